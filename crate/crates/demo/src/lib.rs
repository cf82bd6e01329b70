//! Browser front end: each export renders one RGBA image plus a caption for
//! a `<canvas>`.

use colorous::Gradient;
use humanwarp::correspondence::IuvMap;
use humanwarp::refine::{depth_rmse, refine_depth, Partner, RefineConfig, RefineInput};
use humanwarp::synth::{figure_scene, perturb_depth, render_frame, render_sequence, FigureConfig, Motion, NoiseModel, SequenceBundle};
use humanwarp::uncertainty::{sequence_uncertainty, FrameView, UncertaintyConfig};
use humanwarp::warp::PartWarp;
use humanwarp::{Error, MapGrid, Result};
use wasm_bindgen::prelude::*;

const BACKGROUND: [u8; 4] = [24, 24, 28, 255];
const MAX_SIZE: usize = 256;
const MAX_STEPS: usize = 400;

#[wasm_bindgen]
pub struct Image {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    caption: String,
    value: f64,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA bytes, ready for `ImageData`.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.caption.clone()
    }

    /// Figure pixel count, mean u, or refined RMSE in mm, by view.
    #[wasm_bindgen(getter)]
    pub fn value(&self) -> f64 {
        self.value
    }
}

impl Image {
    fn blank(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            rgba: BACKGROUND.repeat(width * height),
            caption: String::new(),
            value: 0.0,
        }
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 4 * (y * self.width + x);
        self.rgba[i..i + 3].copy_from_slice(&c);
    }

    /// Paints the valid pixels of a scalar map through `gradient`, scaling
    /// `lo..hi` onto the full ramp.
    fn paint(&mut self, map: &MapGrid, x0: usize, gradient: Gradient, lo: f64, hi: f64) {
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (x, y) in map.valid_pixels() {
            let t = ((map.get(x, y) - lo) / span).clamp(0.0, 1.0);
            self.put(x0 + x, y, gradient.eval_continuous(t).as_array());
        }
    }

    pub fn rgba_at(&self, x: usize, y: usize) -> [u8; 4] {
        let i = 4 * (y * self.width + x);
        [self.rgba[i], self.rgba[i + 1], self.rgba[i + 2], self.rgba[i + 3]]
    }
}

fn check_size(size: usize) -> Result<()> {
    if !(16..=MAX_SIZE).contains(&size) {
        return Err(Error::InvalidArgument(format!("size must be 16..={MAX_SIZE}, got {size}")));
    }
    Ok(())
}

fn valid_range(map: &MapGrid) -> (f64, f64) {
    map.valid_pixels()
        .map(|(x, y)| map.get(x, y))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn spin(deg_per_frame: f64, frames: usize, size: usize) -> Result<SequenceBundle> {
    check_size(size)?;
    render_sequence(&figure_scene(&FigureConfig {
        size,
        frames,
        motion: Motion::Spin { deg_per_frame },
        ..FigureConfig::default()
    })?)
}

fn iuv_maps(b: &SequenceBundle) -> Result<Vec<IuvMap>> {
    b.frames.iter().map(|f| IuvMap::new(f.iuv.clone(), b.part_count)).collect()
}

/// One frame of the spinning figure. `view` is `rgb`, `depth`, `normals` or
/// `parts`.
pub fn figure_view(deg_per_frame: f64, frame: usize, view: &str, size: usize) -> Result<Image> {
    check_size(size)?;
    let scene = figure_scene(&FigureConfig {
        size,
        frames: frame + 1,
        motion: Motion::Spin { deg_per_frame },
        ..FigureConfig::default()
    })?;
    let f = render_frame(&scene, frame)?;
    let mut img = Image::blank(size, size);
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match view {
        "rgb" => {
            for (x, y) in f.depth.valid_pixels() {
                let c = f.rgb.pixel(x, y);
                img.put(x, y, [to_byte(c[0]), to_byte(c[1]), to_byte(c[2])]);
            }
        }
        "depth" => {
            let (lo, hi) = valid_range(&f.depth);
            img.paint(&f.depth, 0, colorous::TURBO, lo, hi);
        }
        "normals" => {
            for (x, y) in f.depth.valid_pixels() {
                let n = f.normals.pixel(x, y);
                img.put(x, y, [0, 1, 2].map(|c| to_byte(0.5 - 0.5 * n[c])));
            }
        }
        "parts" => {
            for (x, y) in f.depth.valid_pixels() {
                let part = f.iuv.pixel(x, y)[0] as usize;
                img.put(x, y, colorous::TABLEAU10[part % 10].as_array());
            }
        }
        other => return Err(Error::InvalidArgument(format!("unknown view `{other}`"))),
    }
    let (lo, hi) = valid_range(&f.depth);
    img.value = f.depth.valid_pixels().count() as f64;
    img.caption = format!(
        "frame {frame}, {:.0} deg turned, depth {lo:.2}-{hi:.2} m",
        deg_per_frame * frame as f64
    );
    Ok(img)
}

/// Reconstruction uncertainty of frame 0 when frames 0, 5, 10 and 15 span
/// `baseline_deg` of rotation in total. Brighter means less certain; the
/// colour scale is logarithmic and fixed, so baselines compare directly.
pub fn uncertainty_view(baseline_deg: f64, size: usize) -> Result<Image> {
    if !(0.0..=180.0).contains(&baseline_deg) {
        return Err(Error::InvalidArgument(format!("baseline must be 0..=180 deg, got {baseline_deg}")));
    }
    let b = spin(baseline_deg / 15.0, 16, size)?;
    let iuvs = iuv_maps(&b)?;
    let frames = [0usize, 5, 10, 15];
    let warps: Vec<Vec<PartWarp>> = frames
        .iter()
        .map(|&j| if j == 0 { Vec::new() } else { b.part_indices.iter().filter_map(|&p| b.transform(p, j, 0)).collect() })
        .collect();
    let views: Vec<FrameView> = frames
        .iter()
        .zip(&warps)
        .map(|(&j, w)| FrameView {
            depth: &b.frames[j].depth,
            iuv: &iuvs[j],
            warps_to_ref: w,
        })
        .collect();
    let u = sequence_uncertainty(&views, 0, &b.intrinsics, &UncertaintyConfig::default())?;
    let mut log_u = u.heatmap.clone();
    for (x, y) in u.heatmap.valid_pixels() {
        log_u.set(x, y, u.heatmap.get(x, y).max(1e-12).log10());
    }
    let mut img = Image::blank(size, size);
    img.paint(&log_u, 0, colorous::VIRIDIS, 0.0, 5.0);
    img.value = u.mean_u;
    img.caption = format!("baseline {baseline_deg:.0} deg: mean u {:.3e} over {} points", u.mean_u, u.points.len());
    Ok(img)
}

/// Refines frame 0 after adding `noise_mm` of Gaussian noise, supervised by
/// frames 5, 10 and 15 through the warping loss. Left: absolute depth error
/// before, right: after, on a shared scale of 0 to 3 sigma.
pub fn refine_view(noise_mm: f64, steps: usize, seed: u64, size: usize) -> Result<Image> {
    if !(noise_mm > 0.0 && noise_mm <= 50.0) {
        return Err(Error::InvalidArgument(format!("noise must be in (0, 50] mm, got {noise_mm}")));
    }
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(Error::InvalidArgument(format!("steps must be 1..={MAX_STEPS}, got {steps}")));
    }
    let b = spin(3.0, 16, size)?;
    let iuvs = iuv_maps(&b)?;
    let truth = &b.frames[0].depth;
    let noisy = perturb_depth(truth, NoiseModel::Gaussian { sigma: noise_mm * 1e-3 }, seed)?;
    let partners: Vec<Partner> = [5, 10, 15]
        .map(|j| Partner {
            frame: j,
            depth: &b.frames[j].depth,
            iuv: &iuvs[j],
            rgb: None,
        })
        .into();
    let input = RefineInput {
        frame: 0,
        depth: &noisy,
        iuv: &iuvs[0],
        rgb: None,
        normals: None,
        intrinsics: &b.intrinsics,
    };
    let cfg = RefineConfig {
        steps,
        ..RefineConfig::default()
    };
    let out = refine_depth(&input, &partners, &cfg)?;
    let error = |d: &MapGrid| {
        let mut e = d.clone();
        for (x, y) in d.valid_pixels() {
            e.set(x, y, (d.get(x, y) - truth.get(x, y)).abs());
        }
        e
    };
    let gap = 4;
    let mut img = Image::blank(2 * size + gap, size);
    let top = 3.0 * noise_mm * 1e-3;
    img.paint(&error(&noisy), 0, colorous::INFERNO, 0.0, top);
    img.paint(&error(&out.depth), size + gap, colorous::INFERNO, 0.0, top);
    img.value = depth_rmse(&out.depth, truth)? * 1e3;
    img.caption = format!(
        "RMSE {:.2} mm -> {:.2} mm after {} steps (best at step {}{})",
        depth_rmse(&noisy, truth)? * 1e3,
        img.value,
        out.trace.len() - 1,
        out.best_step,
        if out.diverged { ", diverged" } else { "" }
    );
    Ok(img)
}

fn js(r: Result<Image>) -> std::result::Result<Image, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = figureView)]
pub fn figure_view_js(deg_per_frame: f64, frame: usize, view: &str, size: usize) -> std::result::Result<Image, JsError> {
    js(figure_view(deg_per_frame, frame, view, size))
}

#[wasm_bindgen(js_name = uncertaintyView)]
pub fn uncertainty_view_js(baseline_deg: f64, size: usize) -> std::result::Result<Image, JsError> {
    js(uncertainty_view(baseline_deg, size))
}

#[wasm_bindgen(js_name = refineView)]
pub fn refine_view_js(noise_mm: f64, steps: usize, seed: u32, size: usize) -> std::result::Result<Image, JsError> {
    js(refine_view(noise_mm, steps, seed as u64, size))
}
