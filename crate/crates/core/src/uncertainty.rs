//! Reconstruction uncertainty of points observed across frames.
//!
//! A reference-frame point collects one sample per frame in which it is
//! visible, each carried into the reference frame by that frame's part warp.
//! Its covariance is the (biased) sample covariance plus the fused prior of
//! the observations. The prior of a single view is tight across the image
//! plane and very loose along depth; fusing views seen from different angles
//! shrinks it, while a static sequence only divides it by the sample count.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SVD};

use crate::correspondence::{build_part_index, match_dense, uv_cell, IuvMap};
use crate::error::{Error, Result};
use crate::geometry::{back_project, CameraIntrinsics, MapGrid, Point3};
use crate::warp::PartWarp;

/// Prior image-plane standard deviation, pixels.
pub const PRIOR_XY_PIXELS: f64 = 5.0;
/// Prior variance along the viewing axis.
pub const PRIOR_Z_VARIANCE: f64 = 1e5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub xy_pixels: f64,
    pub z_variance: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            xy_pixels: PRIOR_XY_PIXELS,
            z_variance: PRIOR_Z_VARIANCE,
        }
    }
}

impl PriorConfig {
    /// Camera-frame prior of a point at depth `z`: the pixel prior converted
    /// to meters at that depth, and the fixed depth variance.
    pub fn covariance(&self, z: f64, k: &CameraIntrinsics) -> Matrix3<f64> {
        let sx = self.xy_pixels * z / k.fx;
        let sy = self.xy_pixels * z / k.fy;
        Matrix3::from_diagonal(&nalgebra::Vector3::new(sx * sx, sy * sy, self.z_variance))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointUncertainty {
    pub mean: Point3,
    pub covariance: Matrix3<f64>,
    pub u: f64,
    pub sample_count: usize,
}

/// Sum of singular values of a symmetric covariance.
pub fn uncertainty_of(cov: &Matrix3<f64>) -> Result<f64> {
    let asym = (cov - cov.transpose()).abs().max();
    if asym > 1e-12 * cov.abs().max().max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    Ok(SVD::new(*cov, false, false).singular_values.sum())
}

fn sample_covariance(samples: &[Point3]) -> (Point3, Matrix3<f64>) {
    let t = samples.len() as f64;
    let mean = samples.iter().fold(nalgebra::Vector3::zeros(), |a, p| a + p.coords) / t;
    let cov = samples.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p.coords - mean;
        a + d * d.transpose()
    }) / t;
    (Point3::from(mean), cov)
}

fn finish(mean: Point3, cov: Matrix3<f64>, n: usize) -> Result<PointUncertainty> {
    let cov = (cov + cov.transpose()) * 0.5;
    Ok(PointUncertainty {
        mean,
        covariance: cov,
        u: uncertainty_of(&cov)?,
        sample_count: n,
    })
}

/// Mean and covariance of samples `X_{j->i}` sharing one prior; the prior
/// enters as `prior / T`.
pub fn accumulate_point(samples: &[Point3], prior: &Matrix3<f64>) -> Result<PointUncertainty> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples for point".into()));
    }
    let (mean, cov) = sample_covariance(samples);
    finish(mean, cov + prior / samples.len() as f64, samples.len())
}

/// Mean and covariance of samples that each carry their own prior, already
/// expressed in the reference frame. Priors are fused by summing
/// information; identical priors reduce to `prior / T`.
pub fn accumulate_observations(samples: &[(Point3, Matrix3<f64>)]) -> Result<PointUncertainty> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples for point".into()));
    }
    let t = samples.len() as f64;
    let points: Vec<Point3> = samples.iter().map(|s| s.0).collect();
    let (mean, cov) = sample_covariance(&points);
    let first = samples[0].1;
    let scale = first.abs().max().max(f64::MIN_POSITIVE);
    let fused = if samples.iter().all(|s| (s.1 - first).abs().max() <= 1e-12 * scale) {
        first / t
    } else {
        let info = samples
            .iter()
            .try_fold(Matrix3::zeros(), |acc, s| s.1.try_inverse().map(|inv| acc + inv));
        match info.and_then(|i| ((i + i.transpose()) * 0.5).try_inverse()) {
            Some(c) => c,
            None => samples.iter().fold(Matrix3::zeros(), |a, s| a + s.1) / (t * t),
        }
    };
    finish(mean, cov + fused, samples.len())
}

/// One frame of a sequence as seen by the uncertainty analysis.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub depth: &'a MapGrid,
    pub iuv: &'a IuvMap,
    /// Per-part warps from this frame to the reference frame. Ignored for
    /// the reference frame itself.
    pub warps_to_ref: &'a [PartWarp],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSummary {
    pub part_index: u32,
    pub mean_u: f64,
    pub points: usize,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceUncertainty {
    pub parts: Vec<PartSummary>,
    /// Per reference pixel, the uncertainty of the UV cell it falls in.
    pub heatmap: MapGrid,
    pub mean_u: f64,
    pub points: Vec<(u32, (u32, u32), PointUncertainty)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyConfig {
    pub bins: usize,
    pub prior: PriorConfig,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            bins: crate::correspondence::LOSS_BINS,
            prior: PriorConfig::default(),
        }
    }
}

/// Accumulates, for every UV cell visible in the reference frame, the warped
/// reconstructions from every frame in which the cell is visible.
pub fn sequence_uncertainty(
    frames: &[FrameView],
    reference: usize,
    k: &CameraIntrinsics,
    cfg: &UncertaintyConfig,
) -> Result<SequenceUncertainty> {
    let refv = frames
        .get(reference)
        .ok_or_else(|| Error::InvalidArgument(format!("reference frame {reference} out of range")))?;
    let index_r = build_part_index(refv.iuv, cfg.bins);

    type Key = (u32, (u32, u32));
    let mut obs: BTreeMap<Key, Vec<(Point3, Matrix3<f64>)>> = BTreeMap::new();
    for part in 1..=index_r.part_count() as u32 {
        for (cell, e) in index_r.part(part).into_iter().flatten() {
            let Ok(p) = back_project(refv.depth, k, e.pixel.0 as f64, e.pixel.1 as f64) else { continue };
            obs.entry((part, *cell))
                .or_default()
                .push((p, cfg.prior.covariance(p.z, k)));
        }
    }

    for (j, view) in frames.iter().enumerate() {
        if j == reference {
            continue;
        }
        let index_j = build_part_index(view.iuv, cfg.bins);
        let sets = match_dense(&index_r, &index_j, view.iuv, 2)?;
        for set in sets {
            let Some(w) = view.warps_to_ref.iter().find(|w| w.part_index == set.part_index) else { continue };
            for c in &set.matches {
                let Ok(pj) = back_project(view.depth, k, c.pixel_j.0, c.pixel_j.1) else { continue };
                let prior = w.a * cfg.prior.covariance(pj.z, k) * w.a.transpose();
                if let Some(v) = obs.get_mut(&(set.part_index, c.cell)) {
                    v.push((w.apply(&pj), prior));
                }
            }
        }
    }

    let mut points = Vec::with_capacity(obs.len());
    for (key, samples) in &obs {
        points.push((key.0, key.1, accumulate_observations(samples)?));
    }

    let mut by_part: BTreeMap<u32, (f64, usize, usize)> = BTreeMap::new();
    let mut lookup: BTreeMap<Key, f64> = BTreeMap::new();
    for (part, cell, pu) in &points {
        let e = by_part.entry(*part).or_insert((0.0, 0, 0));
        e.0 += pu.u;
        e.1 += 1;
        e.2 += pu.sample_count;
        lookup.insert((*part, *cell), pu.u);
    }
    let parts: Vec<PartSummary> = by_part
        .into_iter()
        .map(|(part_index, (sum, n, samples))| PartSummary {
            part_index,
            mean_u: sum / n as f64,
            points: n,
            sample_count: samples,
        })
        .collect();
    let mean_u = if points.is_empty() {
        0.0
    } else {
        points.iter().map(|p| p.2.u).sum::<f64>() / points.len() as f64
    };

    let g = refv.iuv.grid();
    let mut heatmap = MapGrid::new(g.width(), g.height(), 1);
    for (x, y) in g.valid_pixels() {
        let px = g.pixel(x, y);
        let cell = uv_cell(px[1], px[2], cfg.bins);
        if let Some(&u) = lookup.get(&(px[0] as u32, cell)) {
            heatmap.set(x, y, u);
            heatmap.set_valid(x, y, true);
        }
    }
    Ok(SequenceUncertainty {
        parts,
        heatmap,
        mean_u,
        points,
    })
}

/// UTF-8 CSV: part, mean_u, sample_count.
pub fn parts_csv(parts: &[PartSummary]) -> String {
    let mut out = String::from("part,mean_u,sample_count\n");
    for p in parts {
        out.push_str(&format!("{},{:.9e},{}\n", p.part_index, p.mean_u, p.sample_count));
    }
    out
}
