#![allow(dead_code)]

use humanwarp::correspondence::{Correspondence, IuvMap, PartCorrespondenceSet};
use humanwarp::geometry::{back_project_depth, depth_to_normals, project, CameraIntrinsics, MapGrid};
use humanwarp::losses::{loss_gradient, loss_value, LossContext, LossSelector, PartnerView};
use humanwarp::synth::{figure_scene, render_sequence, FigureConfig, Motion, SequenceBundle};
use humanwarp::warp::{PartWarp, WarpKind};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn figure(motion: Motion, frames: usize, size: usize) -> (SequenceBundle, Vec<IuvMap>) {
    let cfg = FigureConfig {
        size,
        frames,
        motion,
        ..FigureConfig::default()
    };
    let bundle = render_sequence(&figure_scene(&cfg).unwrap()).unwrap();
    let iuvs = bundle
        .frames
        .iter()
        .map(|f| IuvMap::new(f.iuv.clone(), bundle.part_count).unwrap())
        .collect();
    (bundle, iuvs)
}

/// Randomised 16x16 loss instance: smooth random depths and colours, a few
/// mask holes, one partner with a near-identity warp and random sub-pixel
/// correspondences.
pub struct GradInstance {
    pub k: CameraIntrinsics,
    pub depth: MapGrid,
    pub partner_depth: MapGrid,
    pub rgb_i: MapGrid,
    pub rgb_j: MapGrid,
    pub normals: MapGrid,
    pub gt: MapGrid,
    pub sets: Vec<PartCorrespondenceSet>,
    pub warps: Vec<PartWarp>,
}

pub const GRAD_SIZE: usize = 16;

fn smooth_field(rng: &mut ChaCha8Rng, base: f64, amp: f64) -> impl Fn(f64, f64) -> f64 {
    let terms: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.0..6.28),
                rng.gen_range(-amp..amp),
            )
        })
        .collect();
    move |x, y| base + terms.iter().map(|(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum::<f64>()
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let n = GRAD_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::centered(18.0, n).unwrap();
    let zf = smooth_field(&mut rng, 2.0, 0.08);
    let zj = smooth_field(&mut rng, 2.1, 0.08);
    let gf = smooth_field(&mut rng, 2.0, 0.05);
    let colours: Vec<_> = (0..6).map(|_| smooth_field(&mut rng, 0.5, 0.3)).collect();
    let mut depth = MapGrid::new(n, n, 1);
    let mut partner_depth = MapGrid::new(n, n, 1);
    let mut gt = MapGrid::new(n, n, 1);
    let mut rgb_i = MapGrid::new(n, n, 3);
    let mut rgb_j = MapGrid::new(n, n, 3);
    let holes: Vec<(usize, usize)> = (0..3).map(|_| (rng.gen_range(2..n - 2), rng.gen_range(2..n - 2))).collect();
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let valid = !holes.contains(&(x, y));
            depth.set(x, y, zf(xf, yf));
            depth.set_valid(x, y, valid);
            partner_depth.set(x, y, zj(xf, yf));
            partner_depth.set_valid(x, y, true);
            gt.set(x, y, gf(xf, yf));
            gt.set_valid(x, y, true);
            for c in 0..3 {
                rgb_i.pixel_mut(x, y)[c] = colours[c](xf, yf);
                rgb_j.pixel_mut(x, y)[c] = colours[3 + c](xf, yf);
            }
            rgb_i.set_valid(x, y, true);
            rgb_j.set_valid(x, y, true);
        }
    }
    // Predicted normals sit 0.5..1.2 rad off the derived ones, away from
    // the kink of the angle at zero.
    let derived = depth_to_normals(&depth, &k);
    let mut normals = MapGrid::new(n, n, 3);
    for (x, y) in depth.valid_pixels() {
        let d = Vector3::from_column_slice(derived.pixel(x, y));
        let helper = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let axis = d.cross(&helper).normalize();
        let v = Rotation3::new(axis * rng.gen_range(0.5..1.2)) * d;
        normals.pixel_mut(x, y).copy_from_slice(v.as_slice());
        normals.set_valid(x, y, true);
    }
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rot = Rotation3::new(axis.normalize() * rng.gen_range(0.01..0.04));
    let shear = Matrix3::from_fn(|_, _| rng.gen_range(-0.02..0.02));
    let warp = PartWarp {
        kind: WarpKind::Affine,
        a: rot.matrix() + shear,
        t: Vector3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(-0.05..0.05)),
        part_index: 1,
        rms_residual: 0.0,
        support_count: 0,
    };
    let matches = depth
        .valid_pixels()
        .enumerate()
        .map(|(c, (x, y))| Correspondence {
            cell: (c as u32, 0),
            pixel_i: (x as f64, y as f64),
            pixel_j: (rng.gen_range(1.0..(n - 2) as f64), rng.gen_range(1.0..(n - 2) as f64)),
            uv: (0.0, 0.0),
        })
        .collect();
    GradInstance {
        k,
        depth,
        partner_depth,
        rgb_i,
        rgb_j,
        normals,
        gt,
        sets: vec![PartCorrespondenceSet { part_index: 1, matches }],
        warps: vec![warp],
    }
}

impl GradInstance {
    pub fn context(&self) -> LossContext<'_> {
        LossContext {
            intrinsics: &self.k,
            partners: vec![PartnerView {
                sets: &self.sets,
                warps: &self.warps,
                depth: &self.partner_depth,
                rgb: Some(&self.rgb_j),
            }],
            rgb: Some(&self.rgb_i),
            normals: Some(&self.normals),
            gt_depth: Some(&self.gt),
        }
    }

    /// Bilinear cell of the warped projection of pixel (x, y) at depth z.
    fn photometric_cell(&self, x: usize, y: usize, z: f64) -> Option<(i64, i64)> {
        let p = back_project_depth(&self.k, x as f64, y as f64, z);
        let (u, v) = project(&self.warps[0].apply(&p), &self.k).ok()?;
        Some((u.floor() as i64, v.floor() as i64))
    }
}

pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central finite differences of the total loss against the analytic
/// gradient, over pixels with |gradient| > 1e-8. For the photometric loss,
/// pixels whose perturbed projections straddle a bilinear cell boundary are
/// skipped: the sampled colour has a kink there.
pub fn fd_check(inst: &GradInstance, sel: LossSelector, eps: f64) -> GradCheck {
    check_with(inst, sel, eps, false)
}

/// As `fd_check`, but with the Richardson combination `(4 D(h/2) - D(h)) / 3`
/// of two central differences, which is fourth-order in `h`.
pub fn extrapolated_check(inst: &GradInstance, sel: LossSelector, eps: f64) -> GradCheck {
    check_with(inst, sel, eps, true)
}

fn check_with(inst: &GradInstance, sel: LossSelector, eps: f64, richardson: bool) -> GradCheck {
    let ctx = inst.context();
    let analytic = loss_gradient(sel, &inst.depth, &ctx).unwrap();
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = inst.depth.clone();
    for (x, y) in inst.depth.valid_pixels() {
        let z = inst.depth.get(x, y);
        if sel == LossSelector::Photometric && inst.photometric_cell(x, y, z + eps) != inst.photometric_cell(x, y, z - eps) {
            out.skipped += 1;
            continue;
        }
        let g = analytic.get(x, y);
        if g.abs() <= 1e-8 {
            continue;
        }
        let mut central = |h: f64| {
            probe.set(x, y, z + h);
            let plus = loss_value(sel, &probe, &ctx).unwrap().value;
            probe.set(x, y, z - h);
            let minus = loss_value(sel, &probe, &ctx).unwrap().value;
            probe.set(x, y, z);
            (plus - minus) / (2.0 * h)
        };
        let fd = if richardson {
            let coarse = central(eps);
            (4.0 * central(eps / 2.0) - coarse) / 3.0
        } else {
            central(eps)
        };
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        out.max_rel = out.max_rel.max(rel);
        out.checked += 1;
    }
    out
}
