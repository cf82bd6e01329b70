use humanwarp::correspondence::sample_pairs;
use humanwarp::eval::{align_points, percent_below};
use humanwarp::geometry::{MapGrid, Point3};
use humanwarp::io::{decode_hdm, encode_hdm};
use humanwarp::losses::{total_loss, LossComponents, LossWeights};
use humanwarp::uncertainty::uncertainty_of;
use humanwarp::warp::{fit_affine, fit_rigid};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = MapGrid> {
    (1usize..9, 1usize..9, 1usize..5).prop_flat_map(|(w, h, c)| {
        (
            prop::collection::vec(-1e4f32..1e4f32, w * h * c),
            prop::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(v, m)| MapGrid::from_parts(w, h, c, v.into_iter().map(f64::from).collect(), m).unwrap())
    })
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), n)
}

fn spread(points: &[[f64; 3]]) -> f64 {
    let c = points[0];
    points
        .iter()
        .map(|p| (0..3).map(|d| (p[d] - c[d]).powi(2)).sum::<f64>())
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn hdm_round_trip_is_exact(grid in grid_strategy()) {
        let bytes = encode_hdm(&grid);
        let back = decode_hdm(&bytes).unwrap();
        prop_assert_eq!(&back, &grid);
        prop_assert_eq!(encode_hdm(&back), bytes);
    }

    #[test]
    fn hdm_rejects_truncation(grid in grid_strategy(), cut in 1usize..8) {
        let bytes = encode_hdm(&grid);
        let cut = cut.min(bytes.len());
        prop_assert!(decode_hdm(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn alignment_is_idempotent(pred in cloud(30), gt in cloud(30)) {
        prop_assume!(spread(&pred) > 1e-3 && spread(&gt) > 1e-3);
        let Ok(once) = align_points(&pred, &gt) else { return Ok(()) };
        let twice = align_points(&once.points, &gt).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for d in 0..3 {
                prop_assert!((a[d] - b[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alignment_undoes_shift_and_scale(gt in cloud(25), s in 0.2f64..5.0, c in prop::array::uniform3(-3.0f64..3.0)) {
        prop_assume!(spread(&gt) > 1e-2);
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| std::array::from_fn(|d| s * p[d] + c[d])).collect();
        let a = align_points(&pred, &gt).unwrap();
        prop_assert!((a.scale - 1.0 / s).abs() < 1e-9 / s);
        for (p, g) in a.points.iter().zip(&gt) {
            for d in 0..3 {
                prop_assert!((p[d] - g[d]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn percentages_are_monotone(values in prop::collection::vec(0.0f64..1.0, 1..40), mut th in prop::collection::vec(0.0f64..1.0, 1..6)) {
        th.sort_by(f64::total_cmp);
        let pct = percent_below(&values, &th);
        prop_assert_eq!(pct.len(), th.len());
        prop_assert!(pct.iter().all(|p| (0.0..=100.0).contains(p)));
        prop_assert!(pct.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rigid_fit_inverts_construction(src in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 8..40),
                                      axis in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..3.1,
                                      t in prop::array::uniform3(-2.0f64..2.0)) {
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let src: Vec<Point3> = src.into_iter().map(Point3::from).collect();
        prop_assume!(!nearly_collinear(&src));
        let r = Rotation3::new(axis.normalize() * angle);
        let t = Vector3::from(t);
        let dst: Vec<Point3> = src.iter().map(|p| r * p + t).collect();
        let w = fit_rigid(&src, &dst).unwrap();
        prop_assert!((w.a - r.matrix()).abs().max() < 1e-8);
        prop_assert!((w.t - t).abs().max() < 1e-8);
        prop_assert!((w.a.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn affine_fit_inverts_construction(src in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 12..40),
                                       m in prop::array::uniform9(-0.3f64..0.3), t in prop::array::uniform3(-2.0f64..2.0)) {
        let src: Vec<Point3> = src.into_iter().map(Point3::from).collect();
        prop_assume!(!nearly_coplanar(&src));
        let a = Matrix3::identity() + Matrix3::from_row_slice(&m);
        let t = Vector3::from(t);
        let dst: Vec<Point3> = src.iter().map(|p| Point3::from(a * p.coords + t)).collect();
        let w = fit_affine(&src, &dst).unwrap();
        prop_assert!((w.a - a).abs().max() < 1e-8);
        prop_assert!((w.t - t).abs().max() < 1e-8);
    }

    #[test]
    fn sampled_pairs_respect_gap(len in 1usize..40, per in 1usize..8, gap in 1usize..8, seed in any::<u64>()) {
        let s = sample_pairs(len, per, gap, seed);
        prop_assert_eq!(s.too_short, len <= gap);
        for i in 0..len {
            let mine: Vec<usize> = s.pairs.iter().filter(|p| p.0 == i).map(|p| p.1).collect();
            let eligible = (0..len).filter(|&j| j.abs_diff(i) >= gap).count();
            if !s.too_short {
                prop_assert_eq!(mine.len(), per.min(eligible));
            }
            prop_assert!(mine.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(mine.iter().all(|&j| j.abs_diff(i) >= gap));
        }
        prop_assert_eq!(sample_pairs(len, per, gap, seed), s);
    }

    #[test]
    fn total_loss_is_linear(c in prop::array::uniform5(0.0f64..10.0), k in 0.0f64..4.0) {
        let comp = |s: f64| LossComponents {
            depth: Some(s * c[0]),
            normal: Some(s * c[1]),
            consistency: Some(s * c[2]),
            warping: Some(s * c[3]),
            photometric: Some(s * c[4]),
        };
        let w = LossWeights::default();
        let one = total_loss(&comp(1.0), &w).value;
        let scaled = total_loss(&comp(k), &w).value;
        prop_assert!((scaled - k * one).abs() <= 1e-12 * (1.0 + scaled.abs()));
        prop_assert!((one - (c[0] + c[1] + 0.5 * c[2] + 5.0 * c[3] + 5.0 * c[4])).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_is_trace_of_covariance(v in prop::array::uniform9(-1.0f64..1.0)) {
        let m = Matrix3::from_row_slice(&v);
        let cov = m * m.transpose();
        let u = uncertainty_of(&cov).unwrap();
        prop_assert!((u - cov.trace()).abs() < 1e-12 * (1.0 + u));
    }
}

fn nearly_collinear(p: &[Point3]) -> bool {
    let c = p.iter().fold(Vector3::zeros(), |a, q| a + q.coords) / p.len() as f64;
    let m = p.iter().fold(Matrix3::zeros(), |a, q| a + (q.coords - c) * (q.coords - c).transpose());
    let s = m.symmetric_eigenvalues();
    let mut s: Vec<f64> = s.iter().cloned().collect();
    s.sort_by(f64::total_cmp);
    s[1] < 1e-2
}

fn nearly_coplanar(p: &[Point3]) -> bool {
    let c = p.iter().fold(Vector3::zeros(), |a, q| a + q.coords) / p.len() as f64;
    let m = p.iter().fold(Matrix3::zeros(), |a, q| a + (q.coords - c) * (q.coords - c).transpose());
    m.symmetric_eigenvalues().min() < 1e-2
}
