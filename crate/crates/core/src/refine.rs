//! Gradient-descent refinement of one frame's depth, supervised by partner
//! frames through part warps that are refit from the current depth at every
//! step.

use crate::correspondence::{
    build_part_index, filter_pair, match_dense, match_frames, refine_subpixel, FilterParams, FilterVerdict,
    IuvMap, PairSpec, PartCorrespondenceSet, FIT_BINS, LOSS_BINS,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, MapGrid};
use crate::losses::{loss_gradient, loss_value, LossContext, LossSelector, LossWeights, PartnerView};
use crate::warp::{fit_part_warps, FitOptions, PartWarp, WarpKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub weights: LossWeights,
    pub steps: usize,
    /// Meters per unit gradient.
    pub step_size: f64,
    pub fit: FitOptions,
    pub loss_bins: usize,
    pub fit_bins: usize,
    pub filter: FilterParams,
    /// Abort when the total exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            weights: LossWeights::default(),
            steps: 200,
            step_size: 1e-3,
            fit: FitOptions {
                kind: WarpKind::Affine,
                trimmed_refit: false,
            },
            loss_bins: LOSS_BINS,
            fit_bins: FIT_BINS,
            filter: FilterParams::default(),
            divergence_factor: 10.0,
        }
    }
}

/// A frame supervising the refined one; its depth is held fixed.
#[derive(Debug, Clone, Copy)]
pub struct Partner<'a> {
    pub frame: usize,
    pub depth: &'a MapGrid,
    pub iuv: &'a IuvMap,
    pub rgb: Option<&'a MapGrid>,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineInput<'a> {
    pub frame: usize,
    pub depth: &'a MapGrid,
    pub iuv: &'a IuvMap,
    pub rgb: Option<&'a MapGrid>,
    /// Predicted normals of the refined frame; enables the consistency term.
    pub normals: Option<&'a MapGrid>,
    pub intrinsics: &'a CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub warping: f64,
    pub consistency: f64,
    pub photometric: f64,
    pub total: f64,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    /// Lowest-total iterate.
    pub depth: MapGrid,
    pub trace: Vec<TraceRow>,
    pub best_step: usize,
    pub diverged: bool,
}

struct PreparedPartner<'a> {
    partner: Partner<'a>,
    fit_pair: PairSpec,
    loss_sets: Vec<PartCorrespondenceSet>,
}

fn prepare<'a>(input: &RefineInput, partner: Partner<'a>, cfg: &RefineConfig) -> Result<PreparedPartner<'a>> {
    let loss_i = build_part_index(input.iuv, cfg.loss_bins);
    let loss_j = build_part_index(partner.iuv, cfg.loss_bins);
    let loss_sets = match_dense(&loss_i, &loss_j, partner.iuv, 2)?;
    let check = PairSpec::new(input.frame, partner.frame, loss_sets)?;
    let verdict = filter_pair(&check, &cfg.filter);
    if verdict != FilterVerdict::Valid {
        return Err(Error::InvalidArgument(format!(
            "pair ({}, {}) rejected: {verdict}",
            input.frame, partner.frame
        )));
    }
    let loss_sets = check.sets;
    let fit_i = build_part_index(input.iuv, cfg.fit_bins);
    let fit_j = build_part_index(partner.iuv, cfg.fit_bins);
    let mut fit_sets = match_frames(&fit_i, &fit_j)?;
    refine_subpixel(&mut fit_sets, partner.iuv, false);
    let mut fit_pair = PairSpec::new(input.frame, partner.frame, fit_sets)?;
    fit_pair.verdict = Some(verdict);
    Ok(PreparedPartner {
        partner,
        fit_pair,
        loss_sets,
    })
}

struct Evaluation {
    row: TraceRow,
    warps: Vec<Vec<PartWarp>>,
}

fn evaluate(
    depth: &MapGrid,
    input: &RefineInput,
    prepared: &[PreparedPartner],
    cfg: &RefineConfig,
    step: usize,
) -> Result<Evaluation> {
    let warps: Vec<Vec<PartWarp>> = prepared
        .iter()
        .map(|p| fit_part_warps(&p.fit_pair, depth, p.partner.depth, input.intrinsics, &cfg.fit).warps)
        .collect();
    let ctx = context(input, prepared, &warps);
    let w = &cfg.weights;
    let warping = if w.lambda_w > 0.0 {
        loss_value(LossSelector::Warping, depth, &ctx)?.value
    } else {
        0.0
    };
    let consistency = if w.lambda_s > 0.0 && input.normals.is_some() {
        loss_value(LossSelector::Consistency, depth, &ctx)?.value
    } else {
        0.0
    };
    let photometric = if w.lambda_p > 0.0 && photometric_enabled(input, prepared) {
        loss_value(LossSelector::Photometric, depth, &ctx)?.value
    } else {
        0.0
    };
    let total = w.lambda_w * warping + w.lambda_s * consistency + w.lambda_p * photometric;
    Ok(Evaluation {
        row: TraceRow {
            step,
            warping,
            consistency,
            photometric,
            total,
            best: total,
        },
        warps,
    })
}

fn photometric_enabled(input: &RefineInput, prepared: &[PreparedPartner]) -> bool {
    input.rgb.is_some() && prepared.iter().all(|p| p.partner.rgb.is_some())
}

fn context<'a>(
    input: &RefineInput<'a>,
    prepared: &'a [PreparedPartner],
    warps: &'a [Vec<PartWarp>],
) -> LossContext<'a> {
    LossContext {
        intrinsics: input.intrinsics,
        partners: prepared
            .iter()
            .zip(warps)
            .map(|(p, w)| PartnerView {
                sets: &p.loss_sets,
                warps: w,
                depth: p.partner.depth,
                rgb: p.partner.rgb,
            })
            .collect(),
        rgb: input.rgb,
        normals: input.normals,
        gt_depth: None,
    }
}

/// Plain gradient descent on `l_w L_w + l_s L_s (+ l_p L_p)` over the valid
/// pixels of the refined frame. Returns the best iterate and the loss trace
/// (one row per evaluated iterate, step 0 being the input).
pub fn refine_depth(input: &RefineInput, partners: &[Partner], cfg: &RefineConfig) -> Result<RefineOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    if !(cfg.step_size > 0.0) {
        return Err(Error::InvalidArgument("step size must be positive".into()));
    }
    input.depth.check_intrinsics(input.intrinsics)?;
    let prepared = partners
        .iter()
        .map(|p| prepare(input, *p, cfg))
        .collect::<Result<Vec<_>>>()?;

    let w = cfg.weights;
    let mut depth = input.depth.clone();
    let mut best_depth = depth.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best = f64::INFINITY;
    let mut best_step = 0;
    let mut initial = None;
    let mut diverged = false;

    for step in 0..=cfg.steps {
        let Evaluation { mut row, warps } = evaluate(&depth, input, &prepared, cfg, step)?;
        let init = *initial.get_or_insert(row.total);
        if row.total < best || step == 0 {
            best = row.total;
            best_step = step;
            best_depth.clone_from(&depth);
        }
        row.best = best;
        trace.push(row);
        if row.total > cfg.divergence_factor * init && row.total > 0.0 {
            diverged = true;
            break;
        }
        if step == cfg.steps {
            break;
        }

        let ctx = context(input, &prepared, &warps);
        let mut grad = vec![0.0; depth.len()];
        let mut add = |sel: LossSelector, weight: f64| -> Result<()> {
            if weight == 0.0 {
                return Ok(());
            }
            let g = loss_gradient(sel, &depth, &ctx)?;
            for (acc, v) in grad.iter_mut().zip(g.values()) {
                *acc += weight * v;
            }
            Ok(())
        };
        add(LossSelector::Warping, w.lambda_w)?;
        if input.normals.is_some() {
            add(LossSelector::Consistency, w.lambda_s)?;
        }
        if photometric_enabled(input, &prepared) {
            add(LossSelector::Photometric, w.lambda_p)?;
        }
        drop(ctx);
        let c = depth.channels();
        for i in 0..depth.len() {
            if depth.is_valid_at(i) {
                depth.values_mut()[i * c] -= cfg.step_size * grad[i];
            }
        }
    }

    Ok(RefineOutcome {
        depth: best_depth,
        trace,
        best_step,
        diverged,
    })
}

/// Root mean squared depth difference over the mask intersection.
pub fn depth_rmse(a: &MapGrid, b: &MapGrid) -> Result<f64> {
    a.check_shape(b, "depth rmse")?;
    let (mut ss, mut n) = (0.0, 0usize);
    for (x, y) in a.valid_pixels() {
        if b.is_valid(x, y) {
            ss += (a.get(x, y) - b.get(x, y)).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no overlapping valid pixels".into()));
    }
    Ok((ss / n as f64).sqrt())
}

/// UTF-8 CSV: step, L_w, L_s, L_p, total.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,L_w,L_s,L_p,total\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.step, r.warping, r.consistency, r.photometric, r.total
        ));
    }
    out
}
