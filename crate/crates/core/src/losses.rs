//! Self-supervision and supervision losses, and their gradients with respect
//! to the per-pixel depth of the frame being optimised.
//!
//! Every loss value is the plain sum of its terms; reports also carry the
//! term count so callers can use the mean. Gradients treat warps as
//! constants: they are refit between optimisation steps, not differentiated.

use std::fmt;

use nalgebra::{Matrix2x3, Vector3};

use crate::correspondence::PartCorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{
    back_project, clamped_angle, depth_to_normals, normal_stencil, project, stencil_cross, BilinearStencil,
    CameraIntrinsics, MapGrid, Point3,
};
use crate::warp::PartWarp;

const COS_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_s: f64,
    pub lambda_w: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_n: 1.0,
            lambda_s: 0.5,
            lambda_w: 5.0,
            lambda_p: 5.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_n: f64, lambda_s: f64, lambda_w: f64, lambda_p: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_n,
            lambda_s,
            lambda_w,
            lambda_p,
        };
        if [lambda_n, lambda_s, lambda_w, lambda_p]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        Ok(w)
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda_n: 0.0,
            lambda_s: 0.0,
            lambda_w: 0.0,
            lambda_p: 0.0,
        }
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    /// `"n,s,w,p"`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("weights `{s}`: {e}")))?;
        if v.len() != 4 {
            return Err(Error::InvalidArgument(format!("expected 4 weights, got {}", v.len())));
        }
        LossWeights::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Sum of all terms.
    pub value: f64,
    pub count: usize,
    /// Per-term values in evaluation order.
    pub terms: Vec<f64>,
    /// Per-pixel sum of terms, indexed by the contributing pixel of the
    /// evaluated frame (frame i for pair losses).
    pub residual_map: MapGrid,
    /// Samples skipped because they fell outside the valid region.
    pub skipped: usize,
}

impl LossReport {
    fn new(width: usize, height: usize) -> Self {
        LossReport {
            value: 0.0,
            count: 0,
            terms: Vec::new(),
            residual_map: MapGrid::new(width, height, 1),
            skipped: 0,
        }
    }

    fn push(&mut self, pixel: (f64, f64), term: f64) {
        self.value += term;
        self.count += 1;
        self.terms.push(term);
        let x = pixel.0.round() as usize;
        let y = pixel.1.round() as usize;
        if x < self.residual_map.width() && y < self.residual_map.height() {
            let prev = self.residual_map.get(x, y);
            self.residual_map.set(x, y, prev + term);
            self.residual_map.set_valid(x, y, true);
        }
    }

    fn merge(&mut self, other: LossReport) {
        self.value += other.value;
        self.count += other.count;
        self.skipped += other.skipped;
        self.terms.extend(other.terms);
        let c = self.residual_map.channels();
        for i in 0..self.residual_map.len() {
            if other.residual_map.is_valid_at(i) {
                self.residual_map.values_mut()[i * c] += other.residual_map.values()[i * c];
                self.residual_map.mask_mut()[i] = true;
            }
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.value / self.count as f64
        }
    }

    /// No term contributed.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn warp_for(warps: &[PartWarp], part: u32) -> Option<&PartWarp> {
    warps.iter().find(|w| w.part_index == part)
}

/// Sum over parts and matched UV cells of `|p_j(u) - W(p_i(u))|^2`.
pub fn warping_loss(
    sets: &[PartCorrespondenceSet],
    warps: &[PartWarp],
    depth_i: &MapGrid,
    depth_j: &MapGrid,
    k: &CameraIntrinsics,
) -> LossReport {
    let mut rep = LossReport::new(depth_i.width(), depth_i.height());
    for set in sets {
        let Some(w) = warp_for(warps, set.part_index) else { continue };
        for c in &set.matches {
            let (Ok(pi), Ok(pj)) = (
                back_project(depth_i, k, c.pixel_i.0, c.pixel_i.1),
                back_project(depth_j, k, c.pixel_j.0, c.pixel_j.1),
            ) else {
                rep.skipped += 1;
                continue;
            };
            rep.push(c.pixel_i, (pj - w.apply(&pi)).norm_squared());
        }
    }
    rep
}

/// Sum over parts and cells of `|I_j(x_{i->j}(u)) - I_i(h_i(u))|^2`, with
/// `x_{i->j}` the projection of the warped frame-i point. Samples that land
/// outside the valid region of frame j are skipped and counted.
pub fn photometric_loss(
    sets: &[PartCorrespondenceSet],
    warps: &[PartWarp],
    depth_i: &MapGrid,
    rgb_i: &MapGrid,
    rgb_j: &MapGrid,
    k: &CameraIntrinsics,
) -> LossReport {
    let mut rep = LossReport::new(depth_i.width(), depth_i.height());
    let ch = rgb_i.channels();
    let mut ci = vec![0.0; ch];
    let mut cj = vec![0.0; ch];
    for set in sets {
        let Some(w) = warp_for(warps, set.part_index) else { continue };
        for c in &set.matches {
            let Ok(pi) = back_project(depth_i, k, c.pixel_i.0, c.pixel_i.1) else {
                rep.skipped += 1;
                continue;
            };
            let q = w.apply(&pi);
            let Ok((x, y)) = project(&q, k) else {
                rep.skipped += 1;
                continue;
            };
            if rgb_i.sample(c.pixel_i.0, c.pixel_i.1, &mut ci).is_err() || rgb_j.sample(x, y, &mut cj).is_err() {
                rep.skipped += 1;
                continue;
            }
            let term: f64 = ci.iter().zip(&cj).map(|(a, b)| (b - a).powi(2)).sum();
            rep.push(c.pixel_i, term);
        }
    }
    rep
}

/// Sum over valid pixels of the angle between the given normals and the
/// normals derived from the depth map.
pub fn normal_consistency_loss(normals: &MapGrid, depth: &MapGrid, k: &CameraIntrinsics) -> Result<LossReport> {
    normals.check_shape(depth, "normal/depth")?;
    let derived = depth_to_normals(depth, k);
    angular_loss(normals, &derived)
}

fn angular_loss(a: &MapGrid, b: &MapGrid) -> Result<LossReport> {
    if a.channels() != 3 || b.channels() != 3 {
        return Err(Error::Shape("normal maps need 3 channels".into()));
    }
    a.check_shape(b, "normal maps")?;
    let mut rep = LossReport::new(a.width(), a.height());
    for (x, y) in a.valid_pixels() {
        if !b.is_valid(x, y) {
            continue;
        }
        let na = Vector3::from_column_slice(a.pixel(x, y));
        let nb = Vector3::from_column_slice(b.pixel(x, y));
        if na.norm() == 0.0 || nb.norm() == 0.0 {
            rep.skipped += 1;
            continue;
        }
        rep.push((x as f64, y as f64), clamped_angle(&na, &nb));
    }
    Ok(rep)
}

/// Sum over the mask intersection of `(Z - g)^2`.
pub fn depth_supervision_loss(pred: &MapGrid, gt: &MapGrid) -> Result<LossReport> {
    pred.check_shape(gt, "depth supervision")?;
    let mut rep = LossReport::new(pred.width(), pred.height());
    for (x, y) in pred.valid_pixels() {
        if gt.is_valid(x, y) {
            rep.push((x as f64, y as f64), (gt.get(x, y) - pred.get(x, y)).powi(2));
        }
    }
    Ok(rep)
}

/// Sum of angles between predicted and ground-truth normals.
pub fn normal_supervision_loss(pred: &MapGrid, gt: &MapGrid) -> Result<LossReport> {
    angular_loss(pred, gt)
}

/// Individual loss values entering the weighted total; absent terms count
/// as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub depth: Option<f64>,
    pub normal: Option<f64>,
    pub consistency: Option<f64>,
    pub warping: Option<f64>,
    pub photometric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    /// `(name, raw value, weight, weighted value)`.
    pub items: Vec<(&'static str, f64, f64, f64)>,
}

impl fmt::Display for TotalLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>16} {:>8} {:>16}", "term", "value", "weight", "weighted")?;
        for (name, raw, w, weighted) in &self.items {
            writeln!(f, "{:<6} {:>16.9e} {:>8.3} {:>16.9e}", name, raw, w, weighted)?;
        }
        write!(f, "{:<6} {:>16} {:>8} {:>16.9e}", "total", "", "", self.value)
    }
}

/// `L = L_z + l_n L_n + l_s L_s + l_w L_w + l_p L_p`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> TotalLoss {
    let items = vec![
        ("L_z", c.depth.unwrap_or(0.0), 1.0),
        ("L_n", c.normal.unwrap_or(0.0), w.lambda_n),
        ("L_s", c.consistency.unwrap_or(0.0), w.lambda_s),
        ("L_w", c.warping.unwrap_or(0.0), w.lambda_w),
        ("L_p", c.photometric.unwrap_or(0.0), w.lambda_p),
    ];
    let items: Vec<_> = items
        .into_iter()
        .map(|(n, raw, weight)| (n, raw, weight, raw * weight))
        .collect();
    TotalLoss {
        value: items.iter().map(|i| i.3).sum(),
        items,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    Warping,
    Consistency,
    Photometric,
    Depth,
    Normal,
}

impl std::str::FromStr for LossSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" | "warping" => Ok(LossSelector::Warping),
            "s" | "consistency" => Ok(LossSelector::Consistency),
            "p" | "photometric" => Ok(LossSelector::Photometric),
            "z" | "depth" => Ok(LossSelector::Depth),
            "n" | "normal" => Ok(LossSelector::Normal),
            other => Err(Error::UnsupportedLoss(other.to_string())),
        }
    }
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSelector::Warping => "w",
            LossSelector::Consistency => "s",
            LossSelector::Photometric => "p",
            LossSelector::Depth => "z",
            LossSelector::Normal => "n",
        })
    }
}

/// One partner frame supervising the frame being optimised.
#[derive(Debug, Clone, Copy)]
pub struct PartnerView<'a> {
    pub sets: &'a [PartCorrespondenceSet],
    pub warps: &'a [PartWarp],
    pub depth: &'a MapGrid,
    pub rgb: Option<&'a MapGrid>,
}

/// Everything a loss needs besides the depth being differentiated.
#[derive(Debug, Clone)]
pub struct LossContext<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub partners: Vec<PartnerView<'a>>,
    pub rgb: Option<&'a MapGrid>,
    pub normals: Option<&'a MapGrid>,
    pub gt_depth: Option<&'a MapGrid>,
}

fn missing(what: &str) -> Error {
    Error::InvalidArgument(format!("loss context lacks {what}"))
}

/// Value of the selected loss for `depth` (summed over partners).
pub fn loss_value(sel: LossSelector, depth: &MapGrid, ctx: &LossContext) -> Result<LossReport> {
    let k = ctx.intrinsics;
    match sel {
        LossSelector::Warping => {
            let mut rep = LossReport::new(depth.width(), depth.height());
            for p in &ctx.partners {
                rep.merge(warping_loss(p.sets, p.warps, depth, p.depth, k));
            }
            Ok(rep)
        }
        LossSelector::Photometric => {
            let rgb = ctx.rgb.ok_or_else(|| missing("frame RGB"))?;
            let mut rep = LossReport::new(depth.width(), depth.height());
            for p in &ctx.partners {
                let rgb_j = p.rgb.ok_or_else(|| missing("partner RGB"))?;
                rep.merge(photometric_loss(p.sets, p.warps, depth, rgb, rgb_j, k));
            }
            Ok(rep)
        }
        LossSelector::Consistency => {
            normal_consistency_loss(ctx.normals.ok_or_else(|| missing("normals"))?, depth, k)
        }
        LossSelector::Depth => depth_supervision_loss(depth, ctx.gt_depth.ok_or_else(|| missing("ground-truth depth"))?),
        LossSelector::Normal => Err(Error::InvalidArgument(
            "L_n does not depend on depth; evaluate normal_supervision_loss directly".into(),
        )),
    }
}

/// Adds `g * dz/d(depth values)` for a depth sampled through `st`.
#[inline]
fn scatter(grad: &mut [f64], st: &BilinearStencil, g: f64) {
    for n in 0..st.n {
        grad[st.idx[n]] += g * st.w[n];
    }
}

fn warping_grad(p: &PartnerView, depth: &MapGrid, k: &CameraIntrinsics, grad: &mut [f64]) {
    for set in p.sets {
        let Some(w) = warp_for(p.warps, set.part_index) else { continue };
        for c in &set.matches {
            let Ok(st) = depth.bilinear_stencil(c.pixel_i.0, c.pixel_i.1) else { continue };
            let z = st.scalar(depth);
            let Ok(pj) = back_project(p.depth, k, c.pixel_j.0, c.pixel_j.1) else { continue };
            if !(z > 0.0) {
                continue;
            }
            let ray = k.ray(c.pixel_i.0, c.pixel_i.1);
            let r = pj.coords - (w.a * ray * z + w.t);
            scatter(grad, &st, -2.0 * r.dot(&(w.a * ray)));
        }
    }
}

fn photometric_grad(
    p: &PartnerView,
    depth: &MapGrid,
    rgb_i: &MapGrid,
    k: &CameraIntrinsics,
    grad: &mut [f64],
) -> Result<()> {
    let rgb_j = p.rgb.ok_or_else(|| missing("partner RGB"))?;
    let ch = rgb_i.channels();
    let (mut ci, mut cj, mut dx, mut dy) = (vec![0.0; ch], vec![0.0; ch], vec![0.0; ch], vec![0.0; ch]);
    for set in p.sets {
        let Some(w) = warp_for(p.warps, set.part_index) else { continue };
        for c in &set.matches {
            let Ok(st) = depth.bilinear_stencil(c.pixel_i.0, c.pixel_i.1) else { continue };
            let z = st.scalar(depth);
            if !(z > 0.0) {
                continue;
            }
            let ray = k.ray(c.pixel_i.0, c.pixel_i.1);
            let q = Point3::from(w.a * ray * z + w.t);
            let Ok((x, y)) = project(&q, k) else { continue };
            let Ok(sj) = rgb_j.bilinear_stencil(x, y) else { continue };
            if rgb_i.sample(c.pixel_i.0, c.pixel_i.1, &mut ci).is_err() {
                continue;
            }
            sj.apply(rgb_j, &mut cj);
            sj.gradient(rgb_j, &mut dx, &mut dy);
            // d term / d(x, y)
            let mut gxy = nalgebra::Vector2::zeros();
            for ch_i in 0..ch {
                let diff = cj[ch_i] - ci[ch_i];
                gxy.x += 2.0 * diff * dx[ch_i];
                gxy.y += 2.0 * diff * dy[ch_i];
            }
            let jp = Matrix2x3::new(
                k.fx / q.z,
                0.0,
                -k.fx * q.x / (q.z * q.z),
                0.0,
                k.fy / q.z,
                -k.fy * q.y / (q.z * q.z),
            );
            let dq_dz = w.a * ray;
            scatter(grad, &st, gxy.dot(&(jp * dq_dz)));
        }
    }
    Ok(())
}

fn consistency_grad(normals: &MapGrid, depth: &MapGrid, k: &CameraIntrinsics, grad: &mut [f64]) -> Result<()> {
    normals.check_shape(depth, "normal/depth")?;
    let w = depth.width();
    let ray_at = |i: usize| k.ray((i % w) as f64, (i / w) as f64);
    for y in 0..depth.height() {
        for x in 0..w {
            if !normals.is_valid(x, y) {
                continue;
            }
            let Some((sx, sy)) = normal_stencil(depth, x, y) else { continue };
            let (m, dxv, dyv) = stencil_cross(depth, k, &sx, &sy);
            let mn = m.norm();
            if !(mn > 1e-300) {
                continue;
            }
            // Orientation flip is locally constant.
            let sign = if m.z > 0.0 { -1.0 } else { 1.0 };
            let mhat = m * (sign / mn);
            let n = Vector3::from_column_slice(normals.pixel(x, y));
            let nn = n.norm();
            if nn == 0.0 {
                continue;
            }
            let nhat = n / nn;
            let c = nhat.dot(&mhat);
            if c.abs() >= COS_CLAMP {
                continue;
            }
            let dtheta_dc = -1.0 / (1.0 - c * c).sqrt();
            // dc/dm for m' = sign * m.
            let dc_dm = (nhat - mhat * c) * (sign / mn);
            let g = dc_dm * dtheta_dc;
            let g_dx = dyv.cross(&g);
            let g_dy = g.cross(&dxv);
            grad[sx.plus] += sx.scale * g_dx.dot(&ray_at(sx.plus));
            grad[sx.minus] -= sx.scale * g_dx.dot(&ray_at(sx.minus));
            grad[sy.plus] += sy.scale * g_dy.dot(&ray_at(sy.plus));
            grad[sy.minus] -= sy.scale * g_dy.dot(&ray_at(sy.minus));
        }
    }
    Ok(())
}

/// `dL/dz` at every pixel of `depth` for the selected loss, warps frozen.
pub fn loss_gradient(sel: LossSelector, depth: &MapGrid, ctx: &LossContext) -> Result<MapGrid> {
    let k = ctx.intrinsics;
    depth.check_intrinsics(k)?;
    let mut grad = vec![0.0; depth.len()];
    match sel {
        LossSelector::Warping => {
            for p in &ctx.partners {
                warping_grad(p, depth, k, &mut grad);
            }
        }
        LossSelector::Photometric => {
            let rgb = ctx.rgb.ok_or_else(|| missing("frame RGB"))?;
            for p in &ctx.partners {
                photometric_grad(p, depth, rgb, k, &mut grad)?;
            }
        }
        LossSelector::Consistency => {
            consistency_grad(ctx.normals.ok_or_else(|| missing("normals"))?, depth, k, &mut grad)?;
        }
        LossSelector::Depth => {
            let gt = ctx.gt_depth.ok_or_else(|| missing("ground-truth depth"))?;
            depth.check_shape(gt, "depth supervision")?;
            for (x, y) in depth.valid_pixels() {
                if gt.is_valid(x, y) {
                    grad[depth.index(x, y)] = 2.0 * (depth.get(x, y) - gt.get(x, y));
                }
            }
        }
        LossSelector::Normal => return Err(Error::UnsupportedLoss("n".into())),
    }
    MapGrid::from_parts(depth.width(), depth.height(), 1, grad, depth.mask().to_vec())
}
