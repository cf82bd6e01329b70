//! Per-part UV-cell indices over IUV maps, cross-frame matching, noisy-pair
//! filtering and pair sampling.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix2, Vector2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::MapGrid;

/// Default UV bins per axis used for dense loss correspondences.
pub const LOSS_BINS: usize = 64;
/// Default UV bins per axis for the sparse warp-fitting subset.
pub const FIT_BINS: usize = 16;
pub const MIN_SHARED_PARTS: usize = 5;
pub const MIN_CORR_PER_PART: usize = 50;
pub const MIN_FRAME_GAP: usize = 5;
pub const PAIRS_PER_FRAME: usize = 5;

/// IUV image: channels are (part index, u, v); part indices run `1..=part_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct IuvMap {
    grid: MapGrid,
    part_count: usize,
}

impl IuvMap {
    pub fn new(grid: MapGrid, part_count: usize) -> Result<Self> {
        if grid.channels() != 3 {
            return Err(Error::Shape(format!(
                "IUV map needs 3 channels, got {}",
                grid.channels()
            )));
        }
        for (x, y) in grid.valid_pixels() {
            let px = grid.pixel(x, y);
            let part = px[0];
            if part.fract() != 0.0 || part < 1.0 || part > part_count as f64 {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({x}, {y}) has part index {part} outside 1..={part_count}"
                )));
            }
            if !(0.0..=1.0).contains(&px[1]) || !(0.0..=1.0).contains(&px[2]) {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({x}, {y}) has UV ({}, {}) outside [0,1]",
                    px[1], px[2]
                )));
            }
        }
        Ok(IuvMap { grid, part_count })
    }

    pub fn grid(&self) -> &MapGrid {
        &self.grid
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    /// Part index at a pixel, `None` for background.
    #[inline]
    pub fn part_at(&self, x: usize, y: usize) -> Option<u32> {
        self.grid
            .is_valid(x, y)
            .then(|| self.grid.pixel(x, y)[0] as u32)
    }

    #[inline]
    pub fn uv_at(&self, x: usize, y: usize) -> (f64, f64) {
        let p = self.grid.pixel(x, y);
        (p[1], p[2])
    }
}

pub type Cell = (u32, u32);

#[inline]
pub fn uv_cell(u: f64, v: f64, bins: usize) -> Cell {
    let b = bins as f64;
    let cu = ((u * b).floor() as i64).clamp(0, bins as i64 - 1) as u32;
    let cv = ((v * b).floor() as i64).clamp(0, bins as i64 - 1) as u32;
    (cu, cv)
}

#[inline]
pub fn cell_center(cell: Cell, bins: usize) -> (f64, f64) {
    let b = bins as f64;
    ((cell.0 as f64 + 0.5) / b, (cell.1 as f64 + 0.5) / b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellEntry {
    pub pixel: (usize, usize),
    pub uv: (f64, f64),
}

/// For every part, the occupied UV cells and their representative pixel
/// (nearest the cell centre, ties to the earlier pixel in row-major order).
#[derive(Debug, Clone, PartialEq)]
pub struct PartUvIndex {
    bins: usize,
    parts: Vec<BTreeMap<Cell, CellEntry>>,
}

impl PartUvIndex {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    /// Cells of part `part_index` (1-based).
    pub fn part(&self, part_index: u32) -> Option<&BTreeMap<Cell, CellEntry>> {
        self.parts.get((part_index as usize).checked_sub(1)?)
    }

    pub fn total_cells(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum()
    }
}

pub fn build_part_index(iuv: &IuvMap, bins: usize) -> PartUvIndex {
    let bins = bins.max(1);
    let mut parts: Vec<BTreeMap<Cell, (CellEntry, f64)>> = vec![BTreeMap::new(); iuv.part_count];
    let grid = &iuv.grid;
    for (x, y) in grid.valid_pixels() {
        let px = grid.pixel(x, y);
        let part = px[0] as usize;
        let (u, v) = (px[1], px[2]);
        let cell = uv_cell(u, v, bins);
        let (cu, cv) = cell_center(cell, bins);
        let d2 = (u - cu).powi(2) + (v - cv).powi(2);
        let entry = CellEntry {
            pixel: (x, y),
            uv: (u, v),
        };
        parts[part - 1]
            .entry(cell)
            .and_modify(|slot| {
                if d2 < slot.1 {
                    *slot = (entry, d2);
                }
            })
            .or_insert((entry, d2));
    }
    PartUvIndex {
        bins,
        parts: parts
            .into_iter()
            .map(|m| m.into_iter().map(|(c, (e, _))| (c, e)).collect())
            .collect(),
    }
}

/// Same UV cell seen in frames i and j. Pixel coordinates are real-valued so
/// that sub-pixel refinement can move `pixel_j` onto the exact UV of frame i.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub cell: Cell,
    pub pixel_i: (f64, f64),
    pub pixel_j: (f64, f64),
    /// UV observed at `pixel_i`.
    pub uv: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartCorrespondenceSet {
    pub part_index: u32,
    pub matches: Vec<Correspondence>,
}

impl PartCorrespondenceSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Roles of frames i and j exchanged.
    pub fn swapped(&self) -> PartCorrespondenceSet {
        PartCorrespondenceSet {
            part_index: self.part_index,
            matches: self
                .matches
                .iter()
                .map(|c| Correspondence {
                    cell: c.cell,
                    pixel_i: c.pixel_j,
                    pixel_j: c.pixel_i,
                    uv: c.uv,
                })
                .collect(),
        }
    }
}

fn check_compatible(a: &PartUvIndex, b: &PartUvIndex) -> Result<()> {
    if a.bins != b.bins || a.parts.len() != b.parts.len() {
        return Err(Error::InvalidArgument(format!(
            "indices differ: {} vs {} bins, {} vs {} parts",
            a.bins,
            b.bins,
            a.parts.len(),
            b.parts.len()
        )));
    }
    Ok(())
}

/// Per part, the intersection of the occupied cells of both indices.
pub fn match_frames(index_i: &PartUvIndex, index_j: &PartUvIndex) -> Result<Vec<PartCorrespondenceSet>> {
    check_compatible(index_i, index_j)?;
    Ok(index_i
        .parts
        .iter()
        .zip(&index_j.parts)
        .enumerate()
        .map(|(k, (pi, pj))| PartCorrespondenceSet {
            part_index: k as u32 + 1,
            matches: pi
                .iter()
                .filter_map(|(cell, ei)| {
                    pj.get(cell).map(|ej| Correspondence {
                        cell: *cell,
                        pixel_i: (ei.pixel.0 as f64, ei.pixel.1 as f64),
                        pixel_j: (ej.pixel.0 as f64, ej.pixel.1 as f64),
                        uv: ei.uv,
                    })
                })
                .collect(),
        })
        .collect())
}

/// Bilinear UV over the 2x2 block with top-left `(x0, y0)`, only when all
/// four corners belong to `part` and the block does not straddle a seam.
fn uv_block(iuv: &IuvMap, part: u32, x0: usize, y0: usize) -> Option<[(f64, f64); 4]> {
    let g = &iuv.grid;
    if x0 + 1 >= g.width() || y0 + 1 >= g.height() {
        return None;
    }
    let mut out = [(0.0, 0.0); 4];
    for (k, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        if iuv.part_at(x0 + dx, y0 + dy) != Some(part) {
            return None;
        }
        out[k] = iuv.uv_at(x0 + dx, y0 + dy);
    }
    let (umin, umax) = out
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), c| (a.min(c.0), b.max(c.0)));
    let (vmin, vmax) = out
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), c| (a.min(c.1), b.max(c.1)));
    (umax - umin < 0.25 && vmax - vmin < 0.25).then_some(out)
}

/// Sub-pixel location in `iuv` whose bilinearly interpolated UV equals
/// `target`, starting from `seed`. Gauss-Newton over valid same-part blocks.
pub fn locate_uv(iuv: &IuvMap, part: u32, target: (f64, f64), seed: (f64, f64)) -> Option<(f64, f64)> {
    let g = &iuv.grid;
    let (mut x, mut y) = seed;
    let t = Vector2::new(target.0, target.1);
    if g.width() < 2 || g.height() < 2 {
        return None;
    }
    // Block containing (x, y); on a grid line the block on either side will do.
    let block_at = |x: f64, y: f64| {
        let fx = (x.floor().max(0.0) as usize).min(g.width() - 2);
        let fy = (y.floor().max(0.0) as usize).min(g.height() - 2);
        let xs = [Some(fx), (x == fx as f64 && fx > 0).then(|| fx - 1)];
        let ys = [Some(fy), (y == fy as f64 && fy > 0).then(|| fy - 1)];
        xs.iter()
            .flatten()
            .flat_map(|&bx| ys.iter().flatten().map(move |&by| (bx, by)))
            .find_map(|(bx, by)| uv_block(iuv, part, bx, by).map(|b| (bx, by, b)))
    };
    for _ in 0..12 {
        let (x0, y0, block) = block_at(x, y)?;
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let [c00, c10, c01, c11] = block.map(|c| Vector2::new(c.0, c.1));
        let val = c00 * ((1.0 - ax) * (1.0 - ay)) + c10 * (ax * (1.0 - ay)) + c01 * ((1.0 - ax) * ay) + c11 * (ax * ay);
        let ddx = (c10 - c00) * (1.0 - ay) + (c11 - c01) * ay;
        let ddy = (c01 - c00) * (1.0 - ax) + (c11 - c10) * ax;
        let r = t - val;
        let inside = (-1e-9..=1.0 + 1e-9).contains(&ax) && (-1e-9..=1.0 + 1e-9).contains(&ay);
        if r.norm() < 1e-13 && inside {
            return Some((x, y));
        }
        let jac = Matrix2::from_columns(&[ddx, ddy]);
        let step = jac.try_inverse()? * r;
        if !step.iter().all(|s| s.is_finite()) {
            return None;
        }
        let s = step.norm();
        let scale = if s > 1.5 { 1.5 / s } else { 1.0 };
        x += step.x * scale;
        y += step.y * scale;
        if (x - seed.0).abs() > 3.0 || (y - seed.1).abs() > 3.0 {
            return None;
        }
        if x < 0.0 || y < 0.0 || x > (g.width() - 1) as f64 || y > (g.height() - 1) as f64 {
            return None;
        }
        if s * scale < 1e-12 {
            block_at(x, y)?;
            return (r.norm() < 1e-9).then_some((x, y));
        }
    }
    None
}

/// Moves every `pixel_j` to the sub-pixel location in frame j whose UV equals
/// the UV observed at `pixel_i`. Matches that cannot be localised keep their
/// integer pixel when `keep_unrefined`, otherwise they are dropped.
pub fn refine_subpixel(sets: &mut [PartCorrespondenceSet], iuv_j: &IuvMap, keep_unrefined: bool) {
    for set in sets.iter_mut() {
        let part = set.part_index;
        set.matches.retain_mut(|c| match locate_uv(iuv_j, part, c.uv, c.pixel_j) {
            Some(p) => {
                c.pixel_j = p;
                true
            }
            None => keep_unrefined,
        });
    }
}

/// Dense matching: every occupied cell of frame i is located in frame j by
/// sub-pixel UV search, seeded from the same cell of frame j or the nearest
/// occupied cell within `radius` cells. Cells are still matched at most once.
pub fn match_dense(
    index_i: &PartUvIndex,
    index_j: &PartUvIndex,
    iuv_j: &IuvMap,
    radius: u32,
) -> Result<Vec<PartCorrespondenceSet>> {
    check_compatible(index_i, index_j)?;
    let bins = index_j.bins as i64;
    Ok(index_i
        .parts
        .iter()
        .zip(&index_j.parts)
        .enumerate()
        .map(|(k, (pi, pj))| {
            let part = k as u32 + 1;
            let matches = if pj.is_empty() {
                Vec::new()
            } else {
                pi.iter()
                    .filter_map(|(cell, ei)| {
                        let seed = pj.get(cell).or_else(|| {
                            let r = radius as i64;
                            let mut best: Option<(&CellEntry, f64)> = None;
                            for du in -r..=r {
                                for dv in -r..=r {
                                    let cu = cell.0 as i64 + du;
                                    let cv = cell.1 as i64 + dv;
                                    if cu < 0 || cv < 0 || cu >= bins || cv >= bins {
                                        continue;
                                    }
                                    if let Some(e) = pj.get(&(cu as u32, cv as u32)) {
                                        let d = (e.uv.0 - ei.uv.0).powi(2) + (e.uv.1 - ei.uv.1).powi(2);
                                        if best.map_or(true, |b| d < b.1) {
                                            best = Some((e, d));
                                        }
                                    }
                                }
                            }
                            best.map(|b| b.0)
                        })?;
                        let seed = (seed.pixel.0 as f64, seed.pixel.1 as f64);
                        let pj = locate_uv(iuv_j, part, ei.uv, seed)?;
                        Some(Correspondence {
                            cell: *cell,
                            pixel_i: (ei.pixel.0 as f64, ei.pixel.1 as f64),
                            pixel_j: pj,
                            uv: ei.uv,
                        })
                    })
                    .collect()
            };
            PartCorrespondenceSet {
                part_index: part,
                matches,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub i: usize,
    pub j: usize,
    pub sets: Vec<PartCorrespondenceSet>,
    pub verdict: Option<FilterVerdict>,
}

impl PairSpec {
    pub fn new(i: usize, j: usize, sets: Vec<PartCorrespondenceSet>) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidArgument("pair needs two distinct frames".into()));
        }
        Ok(PairSpec {
            i,
            j,
            sets,
            verdict: None,
        })
    }

    pub fn is_valid(&self) -> bool {
        matches!(self.verdict, Some(FilterVerdict::Valid))
    }

    pub fn correspondence_count(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    pub min_shared_parts: usize,
    pub min_corr_per_part: usize,
    pub min_frame_gap: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            min_shared_parts: MIN_SHARED_PARTS,
            min_corr_per_part: MIN_CORR_PER_PART,
            min_frame_gap: MIN_FRAME_GAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Valid,
    FrameGap { gap: usize, required: usize },
    SharedParts { shared: usize, required: usize },
}

impl fmt::Display for FilterVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterVerdict::Valid => write!(f, "valid"),
            FilterVerdict::FrameGap { gap, required } => {
                write!(f, "frame-gap: {gap} < {required}")
            }
            FilterVerdict::SharedParts { shared, required } => {
                write!(f, "shared-parts: {shared} < {required}")
            }
        }
    }
}

/// Parts with strictly more than `min_corr_per_part` correspondences.
pub fn shared_parts(sets: &[PartCorrespondenceSet], min_corr_per_part: usize) -> usize {
    sets.iter().filter(|s| s.len() > min_corr_per_part).count()
}

pub fn filter_pair(pair: &PairSpec, params: &FilterParams) -> FilterVerdict {
    let gap = pair.i.abs_diff(pair.j);
    if gap < params.min_frame_gap {
        return FilterVerdict::FrameGap {
            gap,
            required: params.min_frame_gap,
        };
    }
    let shared = shared_parts(&pair.sets, params.min_corr_per_part);
    if shared < params.min_shared_parts {
        return FilterVerdict::SharedParts {
            shared,
            required: params.min_shared_parts,
        };
    }
    FilterVerdict::Valid
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSampling {
    pub pairs: Vec<(usize, usize)>,
    /// Set when the sequence is too short for any pair.
    pub too_short: bool,
}

/// For every frame, up to `per_frame` distinct partners drawn uniformly from
/// the frames at least `min_gap` away.
pub fn sample_pairs(len: usize, per_frame: usize, min_gap: usize, seed: u64) -> PairSampling {
    if len <= min_gap {
        return PairSampling {
            pairs: Vec::new(),
            too_short: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(len * per_frame);
    for i in 0..len {
        let candidates: Vec<usize> = (0..len).filter(|&j| j.abs_diff(i) >= min_gap.max(1)).collect();
        let n = per_frame.min(candidates.len());
        let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), n)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        picked.sort_unstable();
        pairs.extend(picked.into_iter().map(|j| (i, j)));
    }
    PairSampling {
        pairs,
        too_short: false,
    }
}

/// UTF-8 CSV rows: part, cell_u, cell_v, xi, yi, xj, yj.
pub fn correspondences_csv(sets: &[PartCorrespondenceSet]) -> String {
    let mut out = String::from("part,cell_u,cell_v,xi,yi,xj,yj\n");
    for s in sets {
        for c in &s.matches {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.part_index, c.cell.0, c.cell.1, c.pixel_i.0, c.pixel_i.1, c.pixel_j.0, c.pixel_j.1
            ));
        }
    }
    out
}
