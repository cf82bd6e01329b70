//! Scale-aligned depth, normal and reconstruction errors, reported as
//! per-sample rows plus tolerance percentages.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{back_project_depth, depth_to_normals, CameraIntrinsics, MapGrid};

/// Similarity applied to a prediction: `p' = median_gt + scale * (p - median_pred)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment<const D: usize> {
    pub points: Vec<[f64; D]>,
    pub scale: f64,
    pub pred_median: [f64; D],
    pub gt_median: [f64; D],
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn axis_median<const D: usize>(points: &[[f64; D]]) -> [f64; D] {
    let mut out = [0.0; D];
    let mut scratch = Vec::with_capacity(points.len());
    for (d, slot) in out.iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(points.iter().map(|p| p[d]));
        *slot = median(&mut scratch);
    }
    out
}

fn distance<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// max - min of the distances from each point to `center`.
fn distance_range<const D: usize>(points: &[[f64; D]], center: &[f64; D]) -> f64 {
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = distance(p, center);
        (lo.min(d), hi.max(d))
    });
    hi - lo
}

/// Moves the prediction's per-axis median onto the ground-truth median, then
/// scales it about that point so the spread of point-to-median distances
/// matches the ground truth.
pub fn align_points<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<Alignment<D>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("alignment needs points on both sides".into()));
    }
    let pred_median = axis_median(pred);
    let gt_median = axis_median(gt);
    let pred_range = distance_range(pred, &pred_median);
    if !(pred_range > 0.0) || !pred_range.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "degenerate prediction: distance range {pred_range}"
        )));
    }
    let scale = distance_range(gt, &gt_median) / pred_range;
    if scale == 1.0 && pred_median == gt_median {
        return Ok(Alignment {
            points: pred.to_vec(),
            scale,
            pred_median,
            gt_median,
        });
    }
    let points = pred
        .iter()
        .map(|p| std::array::from_fn(|d| gt_median[d] + scale * (p[d] - pred_median[d])))
        .collect();
    Ok(Alignment {
        points,
        scale,
        pred_median,
        gt_median,
    })
}

/// Aligns a predicted depth map to the ground truth over the intersection
/// of both masks. Pixels outside the intersection are left untouched.
pub fn align_depth(pred: &MapGrid, gt: &MapGrid) -> Result<MapGrid> {
    pred.check_shape(gt, "depth alignment")?;
    let pixels = shared_pixels(pred, gt)?;
    let p: Vec<[f64; 1]> = pixels.iter().map(|&(x, y)| [pred.get(x, y)]).collect();
    let g: Vec<[f64; 1]> = pixels.iter().map(|&(x, y)| [gt.get(x, y)]).collect();
    let aligned = align_points(&p, &g)?;
    let mut out = pred.clone();
    for (&(x, y), z) in pixels.iter().zip(&aligned.points) {
        out.set(x, y, z[0]);
    }
    Ok(out)
}

fn shared_pixels(a: &MapGrid, b: &MapGrid) -> Result<Vec<(usize, usize)>> {
    let pixels: Vec<_> = a.valid_pixels().filter(|&(x, y)| b.is_valid(x, y)).collect();
    if pixels.is_empty() {
        return Err(Error::Empty("prediction and ground truth masks do not overlap".into()));
    }
    Ok(pixels)
}

/// One test sample. Missing predicted normals are derived from the aligned
/// predicted depth; missing ground-truth normals from the ground-truth depth.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub pred_depth: &'a MapGrid,
    pub pred_normals: Option<&'a MapGrid>,
    pub gt_depth: &'a MapGrid,
    pub gt_normals: Option<&'a MapGrid>,
    pub intrinsics: &'a CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    /// Meters.
    pub depth: f64,
    /// Degrees.
    pub normal: f64,
    /// Meters.
    pub recon: f64,
}

pub fn depth_error(pred: &MapGrid, gt: &MapGrid) -> Result<f64> {
    let aligned = align_depth(pred, gt)?;
    let pixels = shared_pixels(&aligned, gt)?;
    let ss: f64 = pixels
        .iter()
        .map(|&(x, y)| (aligned.get(x, y) - gt.get(x, y)).powi(2))
        .sum();
    Ok((ss / pixels.len() as f64).sqrt())
}

/// Mean angle in degrees over pixels where both normal maps are valid.
pub fn normal_error(pred: &MapGrid, gt: &MapGrid) -> Result<f64> {
    pred.check_shape(gt, "normal error")?;
    if pred.channels() != 3 {
        return Err(Error::Shape(format!("normals need 3 channels, got {}", pred.channels())));
    }
    let pixels = shared_pixels(pred, gt)?;
    let sum: f64 = pixels
        .iter()
        .map(|&(x, y)| {
            let a = Vector3::from_column_slice(pred.pixel(x, y));
            let b = Vector3::from_column_slice(gt.pixel(x, y));
            a.cross(&b).norm().atan2(a.dot(&b))
        })
        .sum();
    Ok((sum / pixels.len() as f64).to_degrees())
}

/// RMS 3D distance between back-projected clouds after similarity alignment.
pub fn recon_error(pred: &MapGrid, gt: &MapGrid, k: &CameraIntrinsics) -> Result<f64> {
    pred.check_shape(gt, "reconstruction error")?;
    pred.check_intrinsics(k)?;
    let pixels = shared_pixels(pred, gt)?;
    let cloud = |m: &MapGrid| -> Vec<[f64; 3]> {
        pixels
            .iter()
            .map(|&(x, y)| {
                let p = back_project_depth(k, x as f64, y as f64, m.get(x, y));
                [p.x, p.y, p.z]
            })
            .collect()
    };
    let gt_cloud = cloud(gt);
    let aligned = align_points(&cloud(pred), &gt_cloud)?;
    let ss: f64 = aligned
        .points
        .iter()
        .zip(&gt_cloud)
        .map(|(a, b)| distance(a, b).powi(2))
        .sum();
    Ok((ss / gt_cloud.len() as f64).sqrt())
}

pub fn evaluate_sample(s: &EvalSample) -> Result<SampleMetrics> {
    s.pred_depth.check_shape(s.gt_depth, "evaluation")?;
    let depth = depth_error(s.pred_depth, s.gt_depth)?;
    let pred_n = match s.pred_normals {
        Some(n) => n.clone(),
        None => depth_to_normals(&align_depth(s.pred_depth, s.gt_depth)?, s.intrinsics),
    };
    let gt_n = match s.gt_normals {
        Some(n) => n.clone(),
        None => depth_to_normals(s.gt_depth, s.intrinsics),
    };
    Ok(SampleMetrics {
        depth,
        normal: normal_error(&pred_n, &gt_n)?,
        recon: recon_error(s.pred_depth, s.gt_depth, s.intrinsics)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> MeanStd {
        let n = values.clone().count();
        if n == 0 {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub depth: MeanStd,
    pub normal: MeanStd,
    pub recon: MeanStd,
    /// Meters, ascending.
    pub depth_thresholds: Vec<f64>,
    /// Degrees, ascending.
    pub normal_thresholds: Vec<f64>,
    pub depth_pct: Vec<f64>,
    pub normal_pct: Vec<f64>,
    pub recon_pct: Vec<f64>,
    pub rows: Vec<SampleMetrics>,
}

/// Share of values strictly below each threshold, in percent.
pub fn percent_below(values: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if values.is_empty() {
                return 0.0;
            }
            100.0 * values.iter().filter(|&&v| v < t).count() as f64 / values.len() as f64
        })
        .collect()
}

fn sorted_thresholds(t: &[f64], what: &str) -> Result<Vec<f64>> {
    if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} thresholds must be finite and >= 0")));
    }
    let mut t = t.to_vec();
    t.sort_by(f64::total_cmp);
    Ok(t)
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<SampleMetrics>, depth_thresholds: &[f64], normal_thresholds: &[f64]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no samples to report".into()));
        }
        let depth_thresholds = sorted_thresholds(depth_thresholds, "depth")?;
        let normal_thresholds = sorted_thresholds(normal_thresholds, "normal")?;
        let col = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let (d, n, r) = (col(|s| s.depth), col(|s| s.normal), col(|s| s.recon));
        Ok(MetricsReport {
            depth: MeanStd::of(d.iter().copied()),
            normal: MeanStd::of(n.iter().copied()),
            recon: MeanStd::of(r.iter().copied()),
            depth_pct: percent_below(&d, &depth_thresholds),
            normal_pct: percent_below(&n, &normal_thresholds),
            recon_pct: percent_below(&r, &depth_thresholds),
            depth_thresholds,
            normal_thresholds,
            rows,
        })
    }

    /// Per-sample CSV in meters and degrees.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("sample,depth_error_m,normal_error_deg,recon_error_m\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{i},{:.9e},{:.9e},{:.9e}", r.depth, r.normal, r.recon);
        }
        out
    }

    /// Summary CSV: one row per metric with mean, std and threshold shares.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,std,threshold,percent\n");
        let mut block = |name: &str, ms: &MeanStd, th: &[f64], pct: &[f64]| {
            for (t, p) in th.iter().zip(pct) {
                let _ = writeln!(out, "{name},{:.9e},{:.9e},{t},{p:.4}", ms.mean, ms.std);
            }
        };
        block("depth_m", &self.depth, &self.depth_thresholds, &self.depth_pct);
        block("normal_deg", &self.normal, &self.normal_thresholds, &self.normal_pct);
        block("recon_m", &self.recon, &self.depth_thresholds, &self.recon_pct);
        out
    }

    /// Three Markdown tables: depth and reconstruction error in cm, normal
    /// error in degrees, each followed by the tolerance columns.
    pub fn markdown(&self, method: &str) -> String {
        let cm = |t: &f64| format!("{}cm", fmt_num(t * 100.0));
        let deg = |t: &f64| format!("{}°", fmt_num(*t));
        let mut out = String::new();
        table(
            &mut out,
            method,
            "D. error",
            &self.depth_thresholds.iter().map(cm).collect::<Vec<_>>(),
            &self.depth,
            100.0,
            &self.depth_pct,
        );
        out.push('\n');
        table(
            &mut out,
            method,
            "N. error",
            &self.normal_thresholds.iter().map(deg).collect::<Vec<_>>(),
            &self.normal,
            1.0,
            &self.normal_pct,
        );
        out.push('\n');
        table(
            &mut out,
            method,
            "R. error",
            &self.depth_thresholds.iter().map(cm).collect::<Vec<_>>(),
            &self.recon,
            100.0,
            &self.recon_pct,
        );
        out
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn table(out: &mut String, method: &str, error: &str, heads: &[String], ms: &MeanStd, unit: f64, pct: &[f64]) {
    let mut header = vec!["Method".to_string(), error.to_string()];
    header.extend(heads.iter().cloned());
    let mut row = vec![
        method.to_string(),
        format!("{:.2}±{:.2}", ms.mean * unit, ms.std * unit),
    ];
    row.extend(pct.iter().map(|p| format!("{p:.1}%")));
    let widths: Vec<usize> = header
        .iter()
        .zip(&row)
        .map(|(h, r)| h.chars().count().max(r.chars().count()).max(3))
        .collect();
    let line = |cells: &[String]| {
        let body: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", body.join(" | "))
    };
    out.push_str(&line(&header));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    out.push_str(&line(&row));
}

/// Evaluates every sample independently and assembles the report.
pub fn evaluate(samples: &[EvalSample], depth_thresholds: &[f64], normal_thresholds: &[f64]) -> Result<MetricsReport> {
    #[cfg(feature = "parallel")]
    let rows = {
        use rayon::prelude::*;
        samples.par_iter().map(evaluate_sample).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows = samples.iter().map(evaluate_sample).collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows, depth_thresholds, normal_thresholds)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument("constant series has no rank correlation".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(w: usize, h: usize, z0: f64, slope: f64) -> MapGrid {
        let mut m = MapGrid::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                m.set(x, y, z0 + slope * x as f64 + 0.003 * (y * y) as f64);
                m.set_valid(x, y, true);
            }
        }
        m
    }

    #[test]
    fn identity_alignment() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, (i * i) as f64 * 0.1, 3.0 - i as f64]).collect();
        let a = align_points(&pts, &pts).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        for (p, q) in a.points.iter().zip(&pts) {
            assert!(distance(p, q) < 1e-12);
        }
    }

    #[test]
    fn doubled_prediction_is_halved() {
        let gt: Vec<[f64; 3]> = (0..15).map(|i| [i as f64 * 0.3, (i % 4) as f64, 2.0 + (i % 3) as f64]).collect();
        let m = axis_median(&gt);
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| std::array::from_fn(|d| m[d] + 2.0 * (p[d] - m[d]))).collect();
        let a = align_points(&pred, &gt).unwrap();
        assert!((a.scale - 0.5).abs() < 1e-12);
        for (p, q) in a.points.iter().zip(&gt) {
            assert!(distance(p, q) < 1e-12);
        }
    }

    #[test]
    fn degenerate_prediction_rejected() {
        let pred = vec![[1.0, 1.0]; 5];
        let gt = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [2.0, 2.0], [1.0, 1.0]];
        assert!(matches!(align_points(&pred, &gt), Err(Error::InvalidArgument(_))));
        assert!(matches!(align_points::<2>(&[], &gt), Err(Error::Empty(_))));
    }

    #[test]
    fn constant_offset_removed() {
        let k = CameraIntrinsics::centered(20.0, 12).unwrap();
        let gt = plane(12, 12, 2.0, 0.01);
        let mut pred = gt.clone();
        pred.values_mut().iter_mut().for_each(|z| *z += 0.04);
        let m = evaluate_sample(&EvalSample {
            pred_depth: &pred,
            pred_normals: None,
            gt_depth: &gt,
            gt_normals: None,
            intrinsics: &k,
        })
        .unwrap();
        assert!(m.depth < 1e-12, "{}", m.depth);
    }

    #[test]
    fn perfect_prediction_zero_report() {
        let k = CameraIntrinsics::centered(20.0, 12).unwrap();
        let gt = plane(12, 12, 2.0, 0.01);
        let s = EvalSample {
            pred_depth: &gt,
            pred_normals: None,
            gt_depth: &gt,
            gt_normals: None,
            intrinsics: &k,
        };
        let r = evaluate(&[s, s], &[0.03, 0.04, 0.05], &[25.0, 30.0, 35.0]).unwrap();
        assert_eq!(r.depth.mean, 0.0);
        assert_eq!(r.normal.mean, 0.0);
        assert_eq!(r.recon.mean, 0.0);
        assert!(r.depth_pct.iter().chain(&r.normal_pct).chain(&r.recon_pct).all(|&p| p == 100.0));
    }

    #[test]
    fn hand_countable_percentages() {
        let cm = [1.0, 2.0, 3.5, 3.5, 4.5, 4.5, 4.5, 6.0, 6.0, 6.0];
        let v: Vec<f64> = cm.iter().map(|c| c / 100.0).collect();
        assert_eq!(percent_below(&v, &[0.03, 0.04, 0.05]), vec![20.0, 40.0, 70.0]);
    }

    #[test]
    fn empty_mask_is_error() {
        let k = CameraIntrinsics::centered(20.0, 4).unwrap();
        let gt = plane(4, 4, 2.0, 0.0);
        let pred = MapGrid::new(4, 4, 1);
        assert!(depth_error(&pred, &gt).is_err());
        assert!(recon_error(&pred, &gt, &k).is_err());
    }

    #[test]
    fn spearman_ties_and_sign() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn markdown_layout() {
        let rows = vec![
            SampleMetrics {
                depth: 0.02,
                normal: 20.0,
                recon: 0.035,
            },
            SampleMetrics {
                depth: 0.045,
                normal: 33.0,
                recon: 0.06,
            },
        ];
        let r = MetricsReport::from_rows(rows, &[0.05, 0.03, 0.04], &[25.0, 30.0, 35.0]).unwrap();
        let md = r.markdown("ours");
        let first: Vec<&str> = md.lines().next().unwrap().split('|').map(str::trim).collect();
        assert_eq!(first, vec!["", "Method", "D. error", "3cm", "4cm", "5cm", ""]);
        let normal_head: Vec<&str> = md.lines().nth(4).unwrap().split('|').map(str::trim).collect();
        assert_eq!(normal_head, vec!["", "Method", "N. error", "25°", "30°", "35°", ""]);
        assert!(md.contains("3.25±1.25"));
        assert_eq!(r.depth_pct, vec![50.0, 50.0, 100.0]);
        assert_eq!(r.recon_pct, vec![0.0, 50.0, 50.0]);
    }
}
