//! On-disk formats: the HDM1 map container, intrinsics and scene text files,
//! sequence directories and pair lists.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, MapGrid};
use crate::synth::{
    figure_scene, motion_pose, Albedo, FigureConfig, Frame, Lighting, Motion, PartSpec, Quadric, RigidPose,
    SceneSpec, SequenceBundle, DEFAULT_PART_COUNT,
};

pub const HDM_MAGIC: &[u8; 4] = b"HDM1";
const HDM_HEADER: usize = 20;

/// Serialises a map. The mask block is always written.
pub fn encode_hdm(grid: &MapGrid) -> Vec<u8> {
    let n = grid.width() * grid.height();
    let mut out = Vec::with_capacity(HDM_HEADER + 4 * grid.values().len() + n);
    out.extend_from_slice(HDM_MAGIC);
    for v in [grid.width(), grid.height(), grid.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&[1, 0, 0, 0]);
    for &v in grid.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(grid.mask().iter().map(|&m| m as u8));
    out
}

pub fn decode_hdm(bytes: &[u8]) -> Result<MapGrid> {
    if bytes.len() < HDM_HEADER || &bytes[..4] != HDM_MAGIC {
        return Err(Error::Format("missing HDM1 header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (word(4), word(8), word(12));
    let has_mask = match bytes[16] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad mask flag {f}"))),
    };
    if bytes[17..20] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::Format(format!("empty map {width}x{height}x{channels}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("map dimensions overflow".into()))?;
    let count = n
        .checked_mul(channels)
        .ok_or_else(|| Error::Format("map dimensions overflow".into()))?;
    let expected = HDM_HEADER + 4 * count + if has_mask { n } else { 0 };
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for {width}x{height}x{channels}, got {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HDM_HEADER..HDM_HEADER + 4 * count]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mask = if has_mask {
        bytes[HDM_HEADER + 4 * count..]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Format(format!("mask byte {b} is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![true; n]
    };
    MapGrid::from_parts(width, height, channels, values, mask)
}

pub fn write_hdm(path: &Path, grid: &MapGrid) -> Result<()> {
    fs::write(path, encode_hdm(grid))?;
    Ok(())
}

pub fn read_hdm(path: &Path) -> Result<MapGrid> {
    decode_hdm(&fs::read(path)?)
}

/// `key = value` lines; blank lines and `#` comments are skipped.
fn parse_keys(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
        }
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(keys: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match keys.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Format(format!("cannot parse `{key} = {v}`"))),
    }
}

fn require<T: std::str::FromStr>(keys: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
    take(keys, key)?.ok_or_else(|| Error::Format(format!("missing key `{key}`")))
}

fn reject_unknown(keys: &BTreeMap<String, String>, what: &str) -> Result<()> {
    match keys.keys().next() {
        Some(k) => Err(Error::Format(format!("unknown {what} key `{k}`"))),
        None => Ok(()),
    }
}

pub fn intrinsics_text(k: &CameraIntrinsics) -> String {
    format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
}

pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let mut keys = parse_keys(text)?;
    let k = intrinsics_from_keys(&mut keys)?;
    reject_unknown(&keys, "intrinsics")?;
    Ok(k)
}

fn intrinsics_from_keys(keys: &mut BTreeMap<String, String>) -> Result<CameraIntrinsics> {
    CameraIntrinsics::new(
        require(keys, "fx")?,
        require(keys, "fy")?,
        require(keys, "cx")?,
        require(keys, "cy")?,
        require(keys, "width")?,
        require(keys, "height")?,
    )
}

fn parse_vec<const N: usize>(s: &str) -> Result<[f64; N]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("cannot parse `{s}` as numbers")))?;
    parts
        .try_into()
        .map_err(|_| Error::Format(format!("expected {N} comma-separated numbers, got `{s}`")))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// A part in a scene file: its shape, its rest position and its look.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePart {
    pub spec: PartSpec,
    pub center: Vector3<f64>,
}

/// Text description of a synthetic scene. Poses are generated from `motion`
/// applied to every part's rest position.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub intrinsics: CameraIntrinsics,
    pub frames: usize,
    pub part_count: usize,
    pub lighting: Lighting,
    pub motion: Motion,
    pub parts: Vec<ScenePart>,
}

fn motion_text(m: Motion) -> String {
    match m {
        Motion::Static => "static".into(),
        Motion::Spin { deg_per_frame } => format!("spin:{deg_per_frame}"),
        Motion::QuarterRoll => "roll90".into(),
    }
}

pub fn parse_motion(s: &str) -> Result<Motion> {
    match s.trim() {
        "static" => Ok(Motion::Static),
        "roll90" => Ok(Motion::QuarterRoll),
        other => {
            let deg = other
                .strip_prefix("spin:")
                .and_then(|d| d.parse::<f64>().ok())
                .filter(|d| d.is_finite())
                .ok_or_else(|| Error::Format(format!("unknown motion `{other}`")))?;
            Ok(Motion::Spin { deg_per_frame: deg })
        }
    }
}

fn parse_lighting(s: &str) -> Result<Lighting> {
    if s.trim() == "baked" {
        return Ok(Lighting::Baked);
    }
    let [x, y, z] = parse_vec::<3>(s)?;
    let v = Vector3::new(x, y, z);
    if !(v.norm() > 0.0) {
        return Err(Error::Format("light direction must be nonzero".into()));
    }
    Ok(Lighting::Directional(v.normalize()))
}

impl SceneFile {
    pub fn from_figure(cfg: &FigureConfig) -> Result<SceneFile> {
        // Rest positions are the part translations of a single static frame.
        let scene = figure_scene(&FigureConfig {
            frames: 1,
            motion: Motion::Static,
            ..*cfg
        })?;
        Ok(SceneFile {
            intrinsics: scene.intrinsics,
            frames: cfg.frames,
            part_count: scene.part_count,
            lighting: scene.lighting,
            motion: cfg.motion,
            parts: scene
                .parts
                .iter()
                .zip(&scene.poses[0])
                .map(|(p, pose)| ScenePart {
                    spec: p.clone(),
                    center: pose.translation,
                })
                .collect(),
        })
    }

    pub fn to_scene(&self) -> Result<SceneSpec> {
        let poses: Vec<Vec<RigidPose>> = (0..self.frames)
            .map(|f| self.parts.iter().map(|p| motion_pose(self.motion, f, &p.center)).collect())
            .collect();
        let scene = SceneSpec {
            parts: self.parts.iter().map(|p| p.spec.clone()).collect(),
            poses,
            intrinsics: self.intrinsics,
            lighting: self.lighting,
            part_count: self.part_count,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_text(&self) -> String {
        let mut out = intrinsics_text(&self.intrinsics);
        let light = match self.lighting {
            Lighting::Baked => "baked".to_string(),
            Lighting::Directional(v) => join(v.as_slice()),
        };
        let _ = write!(
            out,
            "frames = {}\npart_count = {}\nlight = {light}\nmotion = {}\n",
            self.frames,
            self.part_count,
            motion_text(self.motion)
        );
        for p in &self.parts {
            let (kind, size) = match p.spec.shape {
                Quadric::Ellipsoid { semi_axes } => ("ellipsoid", join(semi_axes.as_slice())),
                Quadric::Capsule { radius, length } => ("capsule", join(&[radius, length])),
            };
            let albedo = match p.spec.albedo {
                Albedo::Flat => "flat".to_string(),
                Albedo::Checker { cell } => format!("checker:{cell}"),
            };
            let _ = write!(
                out,
                "\n[part]\nindex = {}\nkind = {kind}\nsize = {size}\ncenter = {}\nalbedo = {albedo}\ncolor = {}\n",
                p.spec.part_index,
                join(p.center.as_slice()),
                join(&p.spec.color)
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<SceneFile> {
        let mut sections: Vec<String> = vec![String::new()];
        for line in text.lines() {
            if line.trim() == "[part]" {
                sections.push(String::new());
            } else {
                let cur = sections.last_mut().unwrap();
                cur.push_str(line);
                cur.push('\n');
            }
        }
        let mut head = parse_keys(&sections[0])?;
        let intrinsics = intrinsics_from_keys(&mut head)?;
        let frames: usize = require(&mut head, "frames")?;
        let part_count = take(&mut head, "part_count")?.unwrap_or(DEFAULT_PART_COUNT);
        let lighting = match head.remove("light") {
            Some(l) => parse_lighting(&l)?,
            None => Lighting::Baked,
        };
        let motion = match head.remove("motion") {
            Some(m) => parse_motion(&m)?,
            None => Motion::Static,
        };
        reject_unknown(&head, "scene")?;
        let parts = sections[1..]
            .iter()
            .map(|s| parse_part(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneFile {
            intrinsics,
            frames,
            part_count,
            lighting,
            motion,
            parts,
        })
    }
}

fn parse_part(text: &str) -> Result<ScenePart> {
    let mut keys = parse_keys(text)?;
    let part_index: u32 = require(&mut keys, "index")?;
    let kind: String = require(&mut keys, "kind")?;
    let size: String = require(&mut keys, "size")?;
    let shape = match kind.as_str() {
        "ellipsoid" => {
            let [a, b, c] = parse_vec::<3>(&size)?;
            Quadric::Ellipsoid {
                semi_axes: Vector3::new(a, b, c),
            }
        }
        "capsule" => {
            let [radius, length] = parse_vec::<2>(&size)?;
            Quadric::Capsule { radius, length }
        }
        other => return Err(Error::Format(format!("unknown part kind `{other}`"))),
    };
    let [cx, cy, cz] = parse_vec::<3>(&require::<String>(&mut keys, "center")?)?;
    let albedo = match keys.remove("albedo").as_deref() {
        None | Some("flat") => Albedo::Flat,
        Some(a) => {
            let cell = a
                .strip_prefix("checker:")
                .and_then(|c| c.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("unknown albedo `{a}`")))?;
            Albedo::Checker { cell }
        }
    };
    let color = match keys.remove("color") {
        Some(c) => parse_vec::<3>(&c)?,
        None => [0.5; 3],
    };
    reject_unknown(&keys, "part")?;
    Ok(ScenePart {
        spec: PartSpec {
            shape,
            part_index,
            albedo,
            color,
        },
        center: Vector3::new(cx, cy, cz),
    })
}

pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const SEQUENCE_FILE: &str = "sequence.txt";
pub const TRANSFORMS_FILE: &str = "transforms.csv";

pub fn map_file_name(frame: usize, kind: &str) -> String {
    format!("frame_{frame:04}_{kind}.hdm")
}

/// Per-frame part poses (local to camera) as CSV.
pub fn transforms_csv(bundle: &SequenceBundle) -> String {
    let mut out = String::from("frame,part,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2\n");
    for (f, poses) in bundle.poses.iter().enumerate() {
        for (part, pose) in bundle.part_indices.iter().zip(poses) {
            let r = pose.rotation.matrix();
            let _ = write!(out, "{f},{part}");
            for i in 0..3 {
                for j in 0..3 {
                    let _ = write!(out, ",{:.17e}", r[(i, j)]);
                }
            }
            for v in pose.translation.iter() {
                let _ = write!(out, ",{v:.17e}");
            }
            out.push('\n');
        }
    }
    out
}

fn parse_transforms(text: &str, frames: usize, parts: &[u32]) -> Result<Vec<Vec<RigidPose>>> {
    let mut poses = vec![vec![None; parts.len()]; frames];
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 14 {
            return Err(Error::Format(format!("transforms line {}: expected 14 columns", n + 1)));
        }
        let bad = || Error::Format(format!("transforms line {}: bad number", n + 1));
        let frame: usize = cols[0].parse().map_err(|_| bad())?;
        let part: u32 = cols[1].parse().map_err(|_| bad())?;
        let nums: Vec<f64> = cols[2..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let slot = parts
            .iter()
            .position(|&p| p == part)
            .ok_or_else(|| Error::Format(format!("transforms line {}: unknown part {part}", n + 1)))?;
        let cell = poses
            .get_mut(frame)
            .ok_or_else(|| Error::Format(format!("transforms line {}: frame {frame} out of range", n + 1)))?;
        let r = Matrix3::from_row_slice(&nums[..9]);
        cell[slot] = Some(RigidPose::new(
            Rotation3::from_matrix_unchecked(r),
            Vector3::new(nums[9], nums[10], nums[11]),
        ));
    }
    poses
        .into_iter()
        .enumerate()
        .map(|(f, row)| {
            row.into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Format(format!("frame {f} is missing part poses")))
        })
        .collect()
}

/// Writes intrinsics, sequence metadata, transforms and four HDM1 maps per
/// frame into `dir` (created if needed).
pub fn save_sequence(dir: &Path, bundle: &SequenceBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(INTRINSICS_FILE), intrinsics_text(&bundle.intrinsics))?;
    let parts: Vec<String> = bundle.part_indices.iter().map(|p| p.to_string()).collect();
    fs::write(
        dir.join(SEQUENCE_FILE),
        format!(
            "frames = {}\npart_count = {}\nparts = {}\n",
            bundle.len(),
            bundle.part_count,
            parts.join(",")
        ),
    )?;
    fs::write(dir.join(TRANSFORMS_FILE), transforms_csv(bundle))?;
    for (i, f) in bundle.frames.iter().enumerate() {
        write_hdm(&dir.join(map_file_name(i, "depth")), &f.depth)?;
        write_hdm(&dir.join(map_file_name(i, "normals")), &f.normals)?;
        write_hdm(&dir.join(map_file_name(i, "iuv")), &f.iuv)?;
        write_hdm(&dir.join(map_file_name(i, "rgb")), &f.rgb)?;
    }
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<SequenceBundle> {
    let intrinsics = parse_intrinsics(&fs::read_to_string(dir.join(INTRINSICS_FILE))?)?;
    let mut meta = parse_keys(&fs::read_to_string(dir.join(SEQUENCE_FILE))?)?;
    let frames: usize = require(&mut meta, "frames")?;
    let part_count: usize = require(&mut meta, "part_count")?;
    let parts_text: String = take(&mut meta, "parts")?.unwrap_or_default();
    reject_unknown(&meta, "sequence")?;
    let part_indices = parts_text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Format(format!("bad part list `{parts_text}`")))?;
    let poses = match fs::read_to_string(dir.join(TRANSFORMS_FILE)) {
        Ok(t) => parse_transforms(&t, frames, &part_indices)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let frames = (0..frames)
        .map(|i| {
            let load = |kind: &str| read_hdm(&dir.join(map_file_name(i, kind)));
            let f = Frame {
                depth: load("depth")?,
                normals: load("normals")?,
                iuv: load("iuv")?,
                rgb: load("rgb")?,
            };
            f.depth.check_intrinsics(&intrinsics)?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceBundle {
        intrinsics,
        frames,
        poses,
        part_indices,
        part_count,
    })
}

/// Depth maps (and normals, when present) of every frame in a directory
/// holding at least `intrinsics.txt` and `frame_NNNN_depth.hdm` files.
pub fn load_depth_frames(dir: &Path) -> Result<(CameraIntrinsics, Vec<(MapGrid, Option<MapGrid>)>)> {
    let k = parse_intrinsics(&fs::read_to_string(dir.join(INTRINSICS_FILE))?)?;
    let mut out = Vec::new();
    loop {
        let depth_path = dir.join(map_file_name(out.len(), "depth"));
        if !depth_path.exists() {
            break;
        }
        let depth = read_hdm(&depth_path)?;
        depth.check_intrinsics(&k)?;
        let normals_path = dir.join(map_file_name(out.len(), "normals"));
        let normals = if normals_path.exists() {
            Some(read_hdm(&normals_path)?)
        } else {
            None
        };
        out.push((depth, normals));
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no depth frames in {}", dir.display())));
    }
    Ok((k, out))
}

/// One line of a pair list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub i: usize,
    pub j: usize,
    pub shared_parts: usize,
    pub correspondences: usize,
    /// `valid` or the reason for exclusion.
    pub verdict: String,
}

impl PairRecord {
    pub fn is_valid(&self) -> bool {
        self.verdict == "valid"
    }
}

pub fn pairs_csv(rows: &[PairRecord]) -> String {
    let mut out = String::from("i,j,shared_parts,correspondences,verdict\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.i, r.j, r.shared_parts, r.correspondences, r.verdict);
    }
    out
}

pub fn parse_pairs_csv(text: &str) -> Result<Vec<PairRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("i,j,shared_parts,correspondences,verdict") {
        return Err(Error::Format("pair list header mismatch".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let cols: Vec<&str> = l.splitn(5, ',').collect();
            let bad = || Error::Format(format!("pair list line {}: `{l}`", n + 2));
            if cols.len() != 5 {
                return Err(bad());
            }
            Ok(PairRecord {
                i: cols[0].parse().map_err(|_| bad())?,
                j: cols[1].parse().map_err(|_| bad())?,
                shared_parts: cols[2].parse().map_err(|_| bad())?,
                correspondences: cols[3].parse().map_err(|_| bad())?,
                verdict: cols[4].to_string(),
            })
        })
        .collect()
}
