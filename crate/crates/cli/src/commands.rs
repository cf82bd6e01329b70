use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use humanwarp::correspondence::{
    build_part_index, filter_pair, match_dense, match_frames, refine_subpixel, sample_pairs, FilterParams, IuvMap,
    PairSpec, PartCorrespondenceSet, PartUvIndex,
};
use humanwarp::eval::{evaluate, EvalSample};
use humanwarp::geometry::{back_project_depth, project, MapGrid};
use humanwarp::io::{
    load_depth_frames, load_sequence, map_file_name, pairs_csv, parse_pairs_csv, read_hdm, save_sequence,
    PairRecord, SceneFile, INTRINSICS_FILE, SEQUENCE_FILE, TRANSFORMS_FILE,
};
use humanwarp::losses::{
    depth_supervision_loss, loss_gradient, loss_value, normal_consistency_loss, normal_supervision_loss,
    photometric_loss, total_loss, warping_loss, LossComponents, LossContext, LossSelector, PartnerView,
};
use humanwarp::refine::{depth_rmse, refine_depth, trace_csv, Partner, RefineConfig, RefineInput};
use humanwarp::synth::{perturb_depth, render_sequence, NoiseModel, SequenceBundle};
use humanwarp::uncertainty::{parts_csv, sequence_uncertainty, FrameView, UncertaintyConfig};
use humanwarp::warp::{fit_part_warps, warps_csv, FitOptions, PartWarp, WarpFitReport};

use crate::output::Outputs;
use crate::{EvalArgs, FitArgs, FitFlags, GradcheckArgs, LossArgs, PairsArgs, RefineArgs, SynthArgs, UncertaintyArgs};

struct Sequence {
    bundle: SequenceBundle,
    iuvs: Vec<IuvMap>,
}

impl Sequence {
    fn load(dir: &Path) -> Result<Self> {
        let bundle = load_sequence(dir).with_context(|| format!("cannot load sequence {}", dir.display()))?;
        let iuvs = bundle
            .frames
            .iter()
            .map(|f| IuvMap::new(f.iuv.clone(), bundle.part_count))
            .collect::<humanwarp::Result<Vec<_>>>()?;
        Ok(Sequence { bundle, iuvs })
    }

    fn check_frame(&self, i: usize) -> Result<()> {
        if i >= self.bundle.len() {
            bail!("frame {i} out of range (sequence has {} frames)", self.bundle.len());
        }
        Ok(())
    }

    fn index(&self, i: usize, bins: usize) -> PartUvIndex {
        build_part_index(&self.iuvs[i], bins)
    }

    /// Dense loss correspondences from frame `i` into frame `j`.
    fn dense(&self, i: usize, j: usize, bins: usize) -> Result<Vec<PartCorrespondenceSet>> {
        Ok(match_dense(&self.index(i, bins), &self.index(j, bins), &self.iuvs[j], 2)?)
    }

    /// Warps carrying frame `i` onto frame `j`, fit on the coarse cells.
    fn fit(&self, i: usize, j: usize, depth_i: &MapGrid, depth_j: &MapGrid, flags: &FitFlags) -> Result<WarpFitReport> {
        let mut sets = match_frames(&self.index(i, flags.fit_bins), &self.index(j, flags.fit_bins))?;
        refine_subpixel(&mut sets, &self.iuvs[j], false);
        let pair = PairSpec::new(i, j, sets)?;
        Ok(fit_part_warps(&pair, depth_i, depth_j, &self.bundle.intrinsics, &fit_options(flags)))
    }
}

fn fit_options(flags: &FitFlags) -> FitOptions {
    FitOptions {
        kind: flags.kind,
        trimmed_refit: flags.trimmed,
    }
}

fn valid_pairs(path: &Path, seq: &Sequence) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let pairs: Vec<(usize, usize)> = parse_pairs_csv(&text)?
        .into_iter()
        .filter(PairRecord::is_valid)
        .map(|r| (r.i, r.j))
        .collect();
    if pairs.is_empty() {
        bail!("no valid pairs in {}", path.display());
    }
    for &(i, j) in &pairs {
        seq.check_frame(i)?;
        seq.check_frame(j)?;
    }
    Ok(pairs)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("cannot read {}", a.spec.display()))?;
    let mut scene = SceneFile::parse(&text).with_context(|| format!("scene file {}", a.spec.display()))?;
    if let Some(n) = a.frames {
        scene.frames = n;
    }
    if let Some(m) = &a.motion {
        scene.motion = humanwarp::io::parse_motion(m)?;
    }
    let bundle = render_sequence(&scene.to_scene()?)?;
    let mut out = Outputs::create(&a.out)?;
    for name in [INTRINSICS_FILE, SEQUENCE_FILE, TRANSFORMS_FILE] {
        out.expect(name);
    }
    for i in 0..bundle.len() {
        for kind in ["depth", "normals", "iuv", "rgb"] {
            out.expect(&map_file_name(i, kind));
        }
    }
    save_sequence(out.dir(), &bundle)?;
    println!(
        "rendered {} frames of {}x{} into {}",
        bundle.len(),
        bundle.intrinsics.width,
        bundle.intrinsics.height,
        a.out.display()
    );
    out.commit();
    Ok(())
}

pub fn pairs(a: &PairsArgs, seed: u64) -> Result<()> {
    let seq = Sequence::load(&a.seq)?;
    let n = seq.bundle.len();
    let sampling = sample_pairs(n, a.per_frame, a.gap, seed);
    if sampling.too_short {
        bail!("a sequence of {n} frames has no pair at least {} frames apart", a.gap);
    }
    let params = FilterParams {
        min_shared_parts: a.min_parts,
        min_corr_per_part: a.min_corr,
        min_frame_gap: a.gap,
    };
    let indices: Vec<PartUvIndex> = (0..n).map(|i| seq.index(i, a.bins)).collect();
    let mut records = Vec::with_capacity(sampling.pairs.len());
    let mut log = String::new();
    for i in 0..n {
        if !sampling.pairs.iter().any(|p| p.0 == i) {
            writeln!(log, "frame {i}: no frame at least {} frames away", a.gap)?;
        }
    }
    for &(i, j) in &sampling.pairs {
        let sets = match_dense(&indices[i], &indices[j], &seq.iuvs[j], 2)?;
        let spec = PairSpec::new(i, j, sets)?;
        let verdict = filter_pair(&spec, &params);
        let record = PairRecord {
            i,
            j,
            shared_parts: humanwarp::correspondence::shared_parts(&spec.sets, params.min_corr_per_part),
            correspondences: spec.correspondence_count(),
            verdict: verdict.to_string(),
        };
        if !record.is_valid() {
            writeln!(log, "pair ({i}, {j}) rejected: {verdict}")?;
        }
        records.push(record);
    }
    let valid = records.iter().filter(|r| r.is_valid()).count();
    writeln!(log, "{valid} of {} sampled pairs valid", records.len())?;

    let mut out = Outputs::create(&a.out)?;
    out.text("pairs.csv", &pairs_csv(&records))?;
    out.text("pairs.log", &log)?;
    print!("{log}");
    out.commit();
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let seq = Sequence::load(&a.seq)?;
    let pairs = valid_pairs(&a.pairs, &seq)?;
    let mut out = Outputs::create(&a.out)?;
    let mut summary = String::from("i,j,parts,issues\n");
    for (i, j) in pairs {
        let f = &seq.bundle.frames;
        let report = seq.fit(i, j, &f[i].depth, &f[j].depth, &a.fit)?;
        out.text(&format!("warps_{i:04}_{j:04}.csv"), &warps_csv(&report.warps))?;
        let issues: Vec<String> = report.issues.iter().map(|x| x.to_string()).collect();
        writeln!(summary, "{i},{j},{},\"{}\"", report.warps.len(), issues.join("; "))?;
    }
    out.text("fit.csv", &summary)?;
    print!("{summary}");
    out.commit();
    Ok(())
}

/// Predicted depth and normals per frame: a prediction directory when given,
/// the sequence's own maps otherwise.
fn predictions(seq: &Sequence, pred: Option<&Path>) -> Result<Vec<(MapGrid, MapGrid)>> {
    let Some(dir) = pred else {
        return Ok(seq.bundle.frames.iter().map(|f| (f.depth.clone(), f.normals.clone())).collect());
    };
    (0..seq.bundle.len())
        .map(|i| {
            let depth = read_hdm(&dir.join(map_file_name(i, "depth")))
                .with_context(|| format!("prediction for frame {i}"))?;
            let want = &seq.bundle.frames[i].depth;
            if (depth.width(), depth.height()) != (want.width(), want.height()) {
                bail!("prediction for frame {i} is {}x{}, expected {}x{}", depth.width(), depth.height(), want.width(), want.height());
            }
            let normals_path = dir.join(map_file_name(i, "normals"));
            let normals = if normals_path.exists() {
                read_hdm(&normals_path)?
            } else {
                humanwarp::geometry::depth_to_normals(&depth, &seq.bundle.intrinsics)
            };
            Ok((depth, normals))
        })
        .collect()
}

pub fn loss(a: &LossArgs) -> Result<()> {
    let seq = Sequence::load(&a.seq)?;
    let pairs = valid_pairs(&a.pairs, &seq)?;
    let pred = predictions(&seq, a.pred.as_deref())?;
    let k = &seq.bundle.intrinsics;
    let frames = &seq.bundle.frames;
    let mut out = Outputs::create(&a.out)?;
    let mut csv = String::from("i,j,L_z,L_n,L_s,L_w,L_p,total\n");
    let mut sum = LossComponents::default();
    let add = |acc: &mut Option<f64>, v: f64| *acc = Some(acc.unwrap_or(0.0) + v);
    for (i, j) in pairs {
        let (depth_i, normals_i) = &pred[i];
        let depth_j = &pred[j].0;
        let warps = seq.fit(i, j, depth_i, depth_j, &a.fit)?.warps;
        let sets = seq.dense(i, j, a.bins)?;
        let w = warping_loss(&sets, &warps, depth_i, depth_j, k);
        let p = photometric_loss(&sets, &warps, depth_i, &frames[i].rgb, &frames[j].rgb, k);
        let s = normal_consistency_loss(normals_i, depth_i, k)?;
        let z = depth_supervision_loss(depth_i, &frames[i].depth)?;
        let n = normal_supervision_loss(normals_i, &frames[i].normals)?;
        let c = LossComponents {
            depth: Some(z.value),
            normal: Some(n.value),
            consistency: Some(s.value),
            warping: Some(w.value),
            photometric: Some(p.value),
        };
        let total = total_loss(&c, &a.weights);
        writeln!(
            csv,
            "{i},{j},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            z.value, n.value, s.value, w.value, p.value, total.value
        )?;
        add(&mut sum.depth, z.value);
        add(&mut sum.normal, n.value);
        add(&mut sum.consistency, s.value);
        add(&mut sum.warping, w.value);
        add(&mut sum.photometric, p.value);
        out.map(&format!("residual_w_{i:04}_{j:04}.hdm"), &w.residual_map)?;
        out.map(&format!("residual_p_{i:04}_{j:04}.hdm"), &p.residual_map)?;
        out.map(&format!("residual_s_{i:04}_{j:04}.hdm"), &s.residual_map)?;
    }
    let table = total_loss(&sum, &a.weights).to_string();
    out.text("loss.csv", &csv)?;
    out.text("loss.txt", &format!("{table}\n"))?;
    println!("{table}");
    out.commit();
    Ok(())
}

fn default_partner(seq: &Sequence, frame: usize) -> Result<usize> {
    [frame + 5, frame.wrapping_sub(5)]
        .into_iter()
        .find(|&j| j < seq.bundle.len())
        .ok_or_else(|| anyhow!("no frame at least 5 away from frame {frame}; pass --partner"))
}

/// True when the warped projection of pixel `(x, y)` lands in different
/// bilinear cells of the partner at depths `z - eps` and `z + eps`.
fn crosses_cell(sets: &[PartCorrespondenceSet], warps: &[PartWarp], k: &humanwarp::CameraIntrinsics, x: usize, y: usize, z: f64, eps: f64) -> bool {
    let cell = |w: &PartWarp, z: f64| {
        project(&w.apply(&back_project_depth(k, x as f64, y as f64, z)), k)
            .ok()
            .map(|(u, v)| (u.floor() as i64, v.floor() as i64))
    };
    sets.iter().any(|s| {
        let Some(w) = warps.iter().find(|w| w.part_index == s.part_index) else { return false };
        s.matches.iter().any(|c| c.pixel_i == (x as f64, y as f64)) && cell(w, z - eps) != cell(w, z + eps)
    })
}

pub fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    if !(a.eps > 0.0) {
        bail!("--eps must be positive");
    }
    let seq = Sequence::load(&a.seq)?;
    seq.check_frame(a.frame)?;
    let j = match a.partner {
        Some(j) => j,
        None => default_partner(&seq, a.frame)?,
    };
    seq.check_frame(j)?;
    let frames = &seq.bundle.frames;
    let k = &seq.bundle.intrinsics;
    let (fi, fj) = (&frames[a.frame], &frames[j]);
    let warps = seq.fit(a.frame, j, &fi.depth, &fj.depth, &a.fit)?.warps;
    let sets = seq.dense(a.frame, j, a.bins)?;
    let depth = perturb_depth(&fi.depth, NoiseModel::Gaussian { sigma: a.noise }, seed)?;
    let ctx = LossContext {
        intrinsics: k,
        partners: vec![PartnerView {
            sets: &sets,
            warps: &warps,
            depth: &fj.depth,
            rgb: Some(&fj.rgb),
        }],
        rgb: Some(&fi.rgb),
        normals: Some(&fi.normals),
        gt_depth: Some(&fi.depth),
    };
    let analytic = loss_gradient(a.loss, &depth, &ctx)?;
    let mut probe = depth.clone();
    let mut csv = String::from("x,y,analytic,finite_difference,relative_error\n");
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for (x, y) in depth.valid_pixels() {
        let g = analytic.get(x, y);
        if g.abs() <= 1e-8 {
            continue;
        }
        let z = depth.get(x, y);
        if a.loss == LossSelector::Photometric && crosses_cell(&sets, &warps, k, x, y, z, a.eps) {
            skipped += 1;
            continue;
        }
        probe.set(x, y, z + a.eps);
        let plus = loss_value(a.loss, &probe, &ctx)?.value;
        probe.set(x, y, z - a.eps);
        let minus = loss_value(a.loss, &probe, &ctx)?.value;
        probe.set(x, y, z);
        let fd = (plus - minus) / (2.0 * a.eps);
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        worst = worst.max(rel);
        checked += 1;
        writeln!(csv, "{x},{y},{g:.12e},{fd:.12e},{rel:.6e}")?;
    }
    if checked == 0 {
        bail!("no pixel has a gradient above 1e-8 for L_{}", a.loss);
    }
    let line = format!(
        "L_{} frame {} partner {j}: max relative error {worst:.3e} over {checked} pixels ({skipped} skipped at bilinear cell edges)",
        a.loss, a.frame
    );
    let mut out = Outputs::create(&a.out)?;
    out.text("gradcheck.csv", &csv)?;
    out.text("gradcheck.txt", &format!("{line}\nmax_relative_error = {worst:.6e}\n"))?;
    println!("{line}");
    out.commit();
    Ok(())
}

pub fn uncertainty(a: &UncertaintyArgs) -> Result<()> {
    let seq = Sequence::load(&a.seq)?;
    let frames: Vec<usize> = match &a.frames {
        Some(f) => f.clone(),
        None => (0..seq.bundle.len()).collect(),
    };
    for &f in &frames {
        seq.check_frame(f)?;
    }
    let reference = frames
        .iter()
        .position(|&f| f == a.reference)
        .ok_or_else(|| anyhow!("reference frame {} is not among the selected frames", a.reference))?;
    let b = &seq.bundle;
    let warps: Vec<Vec<PartWarp>> = frames
        .iter()
        .map(|&j| -> Result<Vec<PartWarp>> {
            if j == a.reference {
                return Ok(Vec::new());
            }
            if a.true_warps {
                if b.poses.is_empty() {
                    bail!("{} stores no transforms", a.seq.display());
                }
                return Ok(b.part_indices.iter().filter_map(|&p| b.transform(p, j, a.reference)).collect());
            }
            Ok(seq.fit(j, a.reference, &b.frames[j].depth, &b.frames[a.reference].depth, &a.fit)?.warps)
        })
        .collect::<Result<_>>()?;
    let views: Vec<FrameView> = frames
        .iter()
        .zip(&warps)
        .map(|(&j, w)| FrameView {
            depth: &b.frames[j].depth,
            iuv: &seq.iuvs[j],
            warps_to_ref: w,
        })
        .collect();
    let cfg = UncertaintyConfig {
        bins: a.bins,
        ..UncertaintyConfig::default()
    };
    let u = sequence_uncertainty(&views, reference, &b.intrinsics, &cfg)?;
    let mut out = Outputs::create(&a.out)?;
    out.text("parts.csv", &parts_csv(&u.parts))?;
    out.map("heatmap.hdm", &u.heatmap)?;
    let line = format!("mean u {:.6e} over {} points, reference {}, {} frames", u.mean_u, u.points.len(), a.reference, frames.len());
    out.text("uncertainty.txt", &format!("{line}\n"))?;
    println!("{line}");
    out.commit();
    Ok(())
}

fn default_partners(seq: &Sequence, frame: usize) -> Vec<usize> {
    let n = seq.bundle.len();
    let ahead = [5, 10, 15].into_iter().map(|d| frame + d).filter(|&j| j < n);
    let behind = [5, 10, 15].into_iter().filter_map(|d| frame.checked_sub(d));
    ahead.chain(behind).take(3).collect()
}

pub fn refine(a: &RefineArgs, seed: u64) -> Result<()> {
    let seq = Sequence::load(&a.seq)?;
    seq.check_frame(a.frame)?;
    let partners = match &a.partners {
        Some(p) => p.clone(),
        None => default_partners(&seq, a.frame),
    };
    if partners.is_empty() {
        bail!("no partner frame at least 5 away from frame {}; pass --partners", a.frame);
    }
    for &j in &partners {
        seq.check_frame(j)?;
    }
    let frames = &seq.bundle.frames;
    let truth = &frames[a.frame].depth;
    let noisy = perturb_depth(truth, NoiseModel::Gaussian { sigma: a.noise }, seed)?;
    let rgb = |i: usize| a.photometric.then(|| &frames[i].rgb);
    let partner_views: Vec<Partner> = partners
        .iter()
        .map(|&j| Partner {
            frame: j,
            depth: &frames[j].depth,
            iuv: &seq.iuvs[j],
            rgb: rgb(j),
        })
        .collect();
    let input = RefineInput {
        frame: a.frame,
        depth: &noisy,
        iuv: &seq.iuvs[a.frame],
        rgb: rgb(a.frame),
        normals: a.normals.then(|| &frames[a.frame].normals),
        intrinsics: &seq.bundle.intrinsics,
    };
    let cfg = RefineConfig {
        weights: a.weights,
        steps: a.steps,
        step_size: a.step_size,
        fit: fit_options(&a.fit),
        fit_bins: a.fit.fit_bins,
        ..RefineConfig::default()
    };
    let result = refine_depth(&input, &partner_views, &cfg)?;
    let before = depth_rmse(&noisy, truth)?;
    let after = depth_rmse(&result.depth, truth)?;
    let mut out = Outputs::create(&a.out)?;
    out.map(&format!("noisy_{:04}_depth.hdm", a.frame), &noisy)?;
    out.map(&format!("refined_{:04}_depth.hdm", a.frame), &result.depth)?;
    out.text("trace.csv", &trace_csv(&result.trace))?;
    out.text(
        "rmse.csv",
        &format!(
            "frame,before_m,after_m,best_step,diverged\n{},{before:.9e},{after:.9e},{},{}\n",
            a.frame, result.best_step, result.diverged
        ),
    )?;
    println!(
        "frame {} with partners {:?}: RMSE {:.3} mm -> {:.3} mm (best step {}{})",
        a.frame,
        partners,
        before * 1e3,
        after * 1e3,
        result.best_step,
        if result.diverged { ", diverged" } else { "" }
    );
    out.commit();
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (k, gt) = load_depth_frames(&a.gt).with_context(|| format!("ground truth {}", a.gt.display()))?;
    let frames: Vec<usize> = a.frames.clone().unwrap_or_else(|| (0..gt.len()).collect());
    if let Some(&i) = frames.iter().find(|&&i| i >= gt.len()) {
        bail!("frame {i} out of range (ground truth has {} frames)", gt.len());
    }
    let pred: Vec<MapGrid> = frames
        .iter()
        .map(|&i| {
            let path = a.pred.join(map_file_name(i, "depth"));
            read_hdm(&path).with_context(|| format!("prediction {}", path.display()))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<EvalSample> = pred
        .iter()
        .zip(frames.iter().map(|&i| &gt[i]))
        .map(|(p, (d, n))| EvalSample {
            pred_depth: p,
            pred_normals: None,
            gt_depth: d,
            gt_normals: n.as_ref(),
            intrinsics: &k,
        })
        .collect();
    let depth_th: Vec<f64> = a.depth_th.iter().map(|cm| cm / 100.0).collect();
    let report = evaluate(&samples, &depth_th, &a.normal_th)?;
    let md = report.markdown(&a.method);
    let mut out = Outputs::create(&a.out)?;
    out.text("samples.csv", &report.samples_csv())?;
    out.text("summary.csv", &report.summary_csv())?;
    out.text("report.md", &md)?;
    print!("{md}");
    out.commit();
    Ok(())
}
