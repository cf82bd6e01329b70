//! Per-part 3D warps between frames: rigid (orthogonal Procrustes with
//! reflection correction) and affine (12-parameter linear least squares).

use std::fmt;

use nalgebra::{DMatrix, Matrix3, Vector3, SVD};

use crate::correspondence::PairSpec;
use crate::error::{Error, Result};
use crate::geometry::{back_project, CameraIntrinsics, MapGrid, Point3};

/// Minimum matches for fitting a part, above the algebraic minimum.
pub const MIN_SUPPORT_RIGID: usize = 5;
pub const MIN_SUPPORT_AFFINE: usize = 10;
/// Parts whose design matrix is worse conditioned than this are flagged.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpKind {
    Rigid,
    Affine,
}

impl fmt::Display for WarpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarpKind::Rigid => "rigid",
            WarpKind::Affine => "affine",
        })
    }
}

impl std::str::FromStr for WarpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(WarpKind::Rigid),
            "affine" => Ok(WarpKind::Affine),
            other => Err(Error::InvalidArgument(format!("unknown warp kind `{other}`"))),
        }
    }
}

/// `p -> A p + t` for one body part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartWarp {
    pub kind: WarpKind,
    pub a: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub part_index: u32,
    pub rms_residual: f64,
    pub support_count: usize,
}

impl PartWarp {
    pub fn identity(part_index: u32) -> Self {
        PartWarp {
            kind: WarpKind::Rigid,
            a: Matrix3::identity(),
            t: Vector3::zeros(),
            part_index,
            rms_residual: 0.0,
            support_count: 0,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.a * p.coords + self.t)
    }

    /// `other` after `self`: `p -> other(self(p))`.
    pub fn then(&self, other: &PartWarp) -> PartWarp {
        let kind = if self.kind == WarpKind::Rigid && other.kind == WarpKind::Rigid {
            WarpKind::Rigid
        } else {
            WarpKind::Affine
        };
        PartWarp {
            kind,
            a: other.a * self.a,
            t: other.a * self.t + other.t,
            part_index: self.part_index,
            rms_residual: 0.0,
            support_count: 0,
        }
    }

    pub fn inverse(&self) -> Option<PartWarp> {
        let a_inv = match self.kind {
            WarpKind::Rigid => self.a.transpose(),
            WarpKind::Affine => self.a.try_inverse()?,
        };
        Some(PartWarp {
            kind: self.kind,
            a: a_inv,
            t: -(a_inv * self.t),
            part_index: self.part_index,
            rms_residual: self.rms_residual,
            support_count: self.support_count,
        })
    }

    /// Rotation angle (radians) of `A^T B` for rigid warps, a distance
    /// between two rotations.
    pub fn rotation_distance(&self, other: &PartWarp) -> f64 {
        let r = self.a.transpose() * other.a;
        ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Applies a warp to a point.
#[inline]
pub fn apply_warp(w: &PartWarp, p: &Point3) -> Point3 {
    w.apply(p)
}

fn centroid(pts: &[Point3]) -> Vector3<f64> {
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / pts.len() as f64
}

fn rms(src: &[Point3], dst: &[Point3], a: &Matrix3<f64>, t: &Vector3<f64>) -> f64 {
    let ss: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d.coords - (a * s.coords + t)).norm_squared())
        .sum();
    (ss / src.len() as f64).sqrt()
}

fn check_lengths(src: &[Point3], dst: &[Point3], needed: usize) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument(format!(
            "point lists differ in length: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            got: src.len(),
        });
    }
    Ok(())
}

/// Least-squares rotation and translation taking `src` onto `dst`.
pub fn fit_rigid(src: &[Point3], dst: &[Point3]) -> Result<PartWarp> {
    check_lengths(src, dst, 3)?;
    let mu_s = centroid(src);
    let mu_d = centroid(dst);

    let mut h = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s.coords - mu_s;
        h += (d.coords - mu_d) * sc.transpose();
        scatter += sc * sc.transpose();
    }
    let spread = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= ev[0] * 1e-20 {
        return Err(Error::IllConditioned("source points are collinear".into()));
    }

    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the direction of the smallest singular value.
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("three singular values");
        let mut d = Matrix3::identity();
        d[(min_idx, min_idx)] = -1.0;
        r = u * d * v_t;
    }
    let t = mu_d - r * mu_s;
    Ok(PartWarp {
        kind: WarpKind::Rigid,
        a: r,
        t,
        part_index: 0,
        rms_residual: rms(src, dst, &r, &t),
        support_count: src.len(),
    })
}

/// Affine fit together with the condition number of the centred design.
pub fn fit_affine_with_condition(src: &[Point3], dst: &[Point3]) -> Result<(PartWarp, f64)> {
    check_lengths(src, dst, 4)?;
    let n = src.len();
    let mu_s = centroid(src);
    let mu_d = centroid(dst);
    let design = DMatrix::from_fn(n, 3, |r, c| src[r][c] - mu_s[c]);
    let rhs = DMatrix::from_fn(n, 3, |r, c| dst[r][c] - mu_d[c]);
    let svd = SVD::new(design, true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(smax > 0.0) || cond > MAX_CONDITION {
        return Err(Error::IllConditioned(format!(
            "design matrix condition number {cond:.3e} (coplanar part?)"
        )));
    }
    let x = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::IllConditioned(e.to_string()))?;
    // x is 3x3 with x[(c, r)] = A[(r, c)].
    let a = Matrix3::from_fn(|r, c| x[(c, r)]);
    let t = mu_d - a * mu_s;
    Ok((
        PartWarp {
            kind: WarpKind::Affine,
            a,
            t,
            part_index: 0,
            rms_residual: rms(src, dst, &a, &t),
            support_count: n,
        },
        cond,
    ))
}

/// Least-squares affine map (A, t) taking `src` onto `dst`.
pub fn fit_affine(src: &[Point3], dst: &[Point3]) -> Result<PartWarp> {
    fit_affine_with_condition(src, dst).map(|(w, _)| w)
}

pub fn fit(kind: WarpKind, src: &[Point3], dst: &[Point3]) -> Result<PartWarp> {
    match kind {
        WarpKind::Rigid => fit_rigid(src, dst),
        WarpKind::Affine => fit_affine(src, dst),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub kind: WarpKind,
    /// Drop the worst 10% of residuals and refit once.
    pub trimmed_refit: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            kind: WarpKind::Affine,
            trimmed_refit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartIssue {
    InsufficientSupport { part_index: u32, support: usize, required: usize },
    IllConditioned { part_index: u32, detail: String },
    /// Affine fit was singular or ill-conditioned; the rigid fit was used.
    DemotedToRigid { part_index: u32, detail: String },
}

impl fmt::Display for PartIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartIssue::InsufficientSupport {
                part_index,
                support,
                required,
            } => write!(f, "part {part_index}: {support} matches < {required}"),
            PartIssue::IllConditioned { part_index, detail } => {
                write!(f, "part {part_index}: ill-conditioned ({detail})")
            }
            PartIssue::DemotedToRigid { part_index, detail } => {
                write!(f, "part {part_index}: affine demoted to rigid ({detail})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarpFitReport {
    pub warps: Vec<PartWarp>,
    pub issues: Vec<PartIssue>,
}

impl WarpFitReport {
    pub fn get(&self, part_index: u32) -> Option<&PartWarp> {
        self.warps.iter().find(|w| w.part_index == part_index)
    }
}

/// 3D point pairs `(p_i, p_j)` for one part of a pair; matches whose depth
/// cannot be sampled are skipped.
pub fn part_point_pairs(
    set: &crate::correspondence::PartCorrespondenceSet,
    depth_i: &MapGrid,
    depth_j: &MapGrid,
    k: &CameraIntrinsics,
) -> (Vec<Point3>, Vec<Point3>) {
    let mut src = Vec::with_capacity(set.len());
    let mut dst = Vec::with_capacity(set.len());
    for c in &set.matches {
        let (Ok(pi), Ok(pj)) = (
            back_project(depth_i, k, c.pixel_i.0, c.pixel_i.1),
            back_project(depth_j, k, c.pixel_j.0, c.pixel_j.1),
        ) else {
            continue;
        };
        src.push(pi);
        dst.push(pj);
    }
    (src, dst)
}

fn fit_one(kind: WarpKind, src: &[Point3], dst: &[Point3], part: u32, issues: &mut Vec<PartIssue>) -> Option<PartWarp> {
    match kind {
        WarpKind::Rigid => match fit_rigid(src, dst) {
            Ok(w) => Some(w),
            Err(e) => {
                issues.push(PartIssue::IllConditioned {
                    part_index: part,
                    detail: e.to_string(),
                });
                None
            }
        },
        WarpKind::Affine => {
            let affine = fit_affine(src, dst).and_then(|w| {
                if w.a.determinant().abs() > 1e-12 {
                    Ok(w)
                } else {
                    Err(Error::IllConditioned(format!("det(A) = {:.3e}", w.a.determinant())))
                }
            });
            match affine {
                Ok(w) => Some(w),
                Err(e) => {
                    issues.push(PartIssue::DemotedToRigid {
                        part_index: part,
                        detail: e.to_string(),
                    });
                    fit_one(WarpKind::Rigid, src, dst, part, issues)
                }
            }
        }
    }
}

/// Fits one warp per part from the pair's (sparse) correspondences using the
/// current depth estimates of both frames.
pub fn fit_part_warps(
    pair: &PairSpec,
    depth_i: &MapGrid,
    depth_j: &MapGrid,
    k: &CameraIntrinsics,
    opts: &FitOptions,
) -> WarpFitReport {
    let mut report = WarpFitReport::default();
    let required = match opts.kind {
        WarpKind::Rigid => MIN_SUPPORT_RIGID,
        WarpKind::Affine => MIN_SUPPORT_AFFINE,
    };
    for set in &pair.sets {
        if set.is_empty() {
            continue;
        }
        let (src, dst) = part_point_pairs(set, depth_i, depth_j, k);
        if src.len() < required {
            report.issues.push(PartIssue::InsufficientSupport {
                part_index: set.part_index,
                support: src.len(),
                required,
            });
            continue;
        }
        let mut issues = Vec::new();
        let Some(mut w) = fit_one(opts.kind, &src, &dst, set.part_index, &mut issues) else {
            report.issues.extend(issues);
            continue;
        };
        if opts.trimmed_refit {
            let mut res: Vec<(usize, f64)> = src
                .iter()
                .zip(&dst)
                .enumerate()
                .map(|(n, (s, d))| (n, (d - w.apply(s)).norm_squared()))
                .collect();
            res.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let keep = res.len() - res.len() / 10;
            if keep >= required && keep < res.len() {
                let mut kept: Vec<usize> = res[..keep].iter().map(|r| r.0).collect();
                kept.sort_unstable();
                let s2: Vec<Point3> = kept.iter().map(|&n| src[n]).collect();
                let d2: Vec<Point3> = kept.iter().map(|&n| dst[n]).collect();
                let mut extra = Vec::new();
                if let Some(w2) = fit_one(w.kind, &s2, &d2, set.part_index, &mut extra) {
                    w = w2;
                }
            }
        }
        w.part_index = set.part_index;
        report.issues.extend(issues);
        report.warps.push(w);
    }
    report
}

/// UTF-8 CSV rows: part, kind, 9 A entries (row-major), 3 t entries,
/// residual, support.
pub fn warps_csv(warps: &[PartWarp]) -> String {
    let mut out = String::from(
        "part,kind,a00,a01,a02,a10,a11,a12,a20,a21,a22,t0,t1,t2,residual,support\n",
    );
    for w in warps {
        out.push_str(&format!("{},{}", w.part_index, w.kind));
        for r in 0..3 {
            for c in 0..3 {
                out.push_str(&format!(",{:.17e}", w.a[(r, c)]));
            }
        }
        for v in w.t.iter() {
            out.push_str(&format!(",{:.17e}", v));
        }
        out.push_str(&format!(",{:.17e},{}\n", w.rms_residual, w.support_count));
    }
    out
}

pub fn parse_warps_csv(text: &str) -> Result<Vec<PartWarp>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 16 {
            return Err(Error::Format(format!("warp row {}: expected 16 fields", n + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("warp row {}: {e}", n + 1)))
        };
        let part_index = f[0]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("warp row {}: {e}", n + 1)))?;
        let kind = f[1].trim().parse()?;
        let mut a = Matrix3::zeros();
        for i in 0..9 {
            a[(i / 3, i % 3)] = num(f[2 + i])?;
        }
        let t = Vector3::new(num(f[11])?, num(f[12])?, num(f[13])?);
        out.push(PartWarp {
            kind,
            a,
            t,
            part_index,
            rms_residual: num(f[14])?,
            support_count: f[15]
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("warp row {}: {e}", n + 1)))?,
        });
    }
    Ok(out)
}
