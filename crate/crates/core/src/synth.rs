//! Analytic renderer for articulated figures built from ellipsoids and
//! capsules. Every quantity is exact: depth from ray/quadric intersection,
//! normals from the implicit-surface gradient, UV from each part's own
//! angular parametrisation, and per-part rigid transforms between frames.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, MapGrid, Point3};
use crate::warp::{PartWarp, WarpKind};

/// Number of body parts carried by IUV maps unless configured otherwise.
pub const DEFAULT_PART_COUNT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadric {
    Ellipsoid { semi_axes: Vector3<f64> },
    /// Cylinder of the given radius along the local y axis, `length` between
    /// the hemisphere centres.
    Capsule { radius: f64, length: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Albedo {
    Flat,
    /// Checkerboard in UV space with square cells of side `cell`.
    Checker { cell: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSpec {
    pub shape: Quadric,
    pub part_index: u32,
    pub albedo: Albedo,
    pub color: [f64; 3],
}

/// Local-to-camera rigid transform of a part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        RigidPose {
            rotation,
            translation,
        }
    }

    pub fn at(translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn inverse_apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// `other * self`.
    pub fn then(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lighting {
    /// RGB is the albedo itself (view independent).
    Baked,
    /// Lambertian shading `albedo * max(0, n . l)`.
    Directional(Vector3<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub parts: Vec<PartSpec>,
    /// `poses[frame][part]`.
    pub poses: Vec<Vec<RigidPose>>,
    pub intrinsics: CameraIntrinsics,
    pub lighting: Lighting,
    pub part_count: usize,
}

impl SceneSpec {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.parts.is_empty() {
            return Err(Error::InvalidArgument("scene has no parts".into()));
        }
        if self.poses.is_empty() {
            return Err(Error::InvalidArgument("scene has no frames".into()));
        }
        let mut seen = Vec::new();
        for p in &self.parts {
            if p.part_index == 0 || p.part_index as usize > self.part_count {
                return Err(Error::InvalidArgument(format!(
                    "part index {} outside 1..={}",
                    p.part_index, self.part_count
                )));
            }
            if seen.contains(&p.part_index) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate part index {}",
                    p.part_index
                )));
            }
            seen.push(p.part_index);
            match p.shape {
                Quadric::Ellipsoid { semi_axes } => {
                    if semi_axes.iter().any(|&a| !(a > 0.0)) {
                        return Err(Error::InvalidArgument("ellipsoid axes must be positive".into()));
                    }
                }
                Quadric::Capsule { radius, length } => {
                    if !(radius > 0.0) || !(length >= 0.0) {
                        return Err(Error::InvalidArgument("bad capsule dimensions".into()));
                    }
                }
            }
            if let Albedo::Checker { cell } = p.albedo {
                if !(cell > 0.0) {
                    return Err(Error::InvalidArgument("checker cell must be positive".into()));
                }
            }
        }
        for (f, frame) in self.poses.iter().enumerate() {
            if frame.len() != self.parts.len() {
                return Err(Error::InvalidArgument(format!(
                    "frame {f} has {} poses for {} parts",
                    frame.len(),
                    self.parts.len()
                )));
            }
            for pose in frame {
                let r = pose.rotation.matrix();
                let ortho = (r.transpose() * r - Matrix3::identity()).norm();
                if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "frame {f} contains a non-rigid pose"
                    )));
                }
            }
        }
        if let Lighting::Directional(l) = self.lighting {
            if ((l.norm() - 1.0).abs()) > 1e-9 {
                return Err(Error::InvalidArgument("light direction must be unit".into()));
            }
        }
        Ok(())
    }
}

/// How the built-in figure moves from frame to frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Static,
    /// Every part turns about its own vertical axis by this many degrees per
    /// frame.
    Spin { deg_per_frame: f64 },
    /// The whole figure turns by a quarter turn per frame about the optical
    /// axis. With a centred principal point and square pixels this maps the
    /// pixel grid onto itself, so matched pixels see identical surface points.
    QuarterRoll,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FigureConfig {
    pub size: usize,
    pub frames: usize,
    pub motion: Motion,
    pub lighting: Lighting,
    pub checker: Option<f64>,
}

impl Default for FigureConfig {
    fn default() -> Self {
        FigureConfig {
            size: 128,
            frames: 10,
            motion: Motion::Spin { deg_per_frame: 3.0 },
            lighting: Lighting::Baked,
            checker: Some(0.125),
        }
    }
}

/// Focal length that frames the built-in figure at the given image size.
pub fn figure_focal(size: usize) -> f64 {
    260.0 * size as f64 / 128.0
}

/// Five-part figure: ellipsoid torso plus four capsule limbs, at about 3 m.
pub fn figure_scene(cfg: &FigureConfig) -> Result<SceneSpec> {
    let k = CameraIntrinsics::centered(figure_focal(cfg.size), cfg.size)?;
    let albedo = match cfg.checker {
        Some(cell) => Albedo::Checker { cell },
        None => Albedo::Flat,
    };
    let layout: [(Quadric, Vector3<f64>, [f64; 3]); 5] = [
        (
            Quadric::Ellipsoid {
                semi_axes: Vector3::new(0.18, 0.30, 0.12),
            },
            Vector3::new(0.0, -0.32, 3.0),
            [0.85, 0.55, 0.45],
        ),
        (
            Quadric::Capsule {
                radius: 0.06,
                length: 0.45,
            },
            Vector3::new(-0.38, -0.37, 3.0),
            [0.35, 0.6, 0.85],
        ),
        (
            Quadric::Capsule {
                radius: 0.06,
                length: 0.45,
            },
            Vector3::new(0.38, -0.37, 3.0),
            [0.4, 0.8, 0.45],
        ),
        (
            Quadric::Capsule {
                radius: 0.075,
                length: 0.5,
            },
            Vector3::new(-0.12, 0.30, 3.0),
            [0.9, 0.8, 0.35],
        ),
        (
            Quadric::Capsule {
                radius: 0.075,
                length: 0.5,
            },
            Vector3::new(0.12, 0.30, 3.0),
            [0.7, 0.4, 0.8],
        ),
    ];
    let parts: Vec<PartSpec> = layout
        .iter()
        .enumerate()
        .map(|(i, (shape, _, color))| PartSpec {
            shape: *shape,
            part_index: i as u32 + 1,
            albedo,
            color: *color,
        })
        .collect();
    let rest: Vec<Vector3<f64>> = layout.iter().map(|l| l.1).collect();
    let poses = (0..cfg.frames)
        .map(|f| {
            rest.iter()
                .map(|c| motion_pose(cfg.motion, f, c))
                .collect()
        })
        .collect();
    let scene = SceneSpec {
        parts,
        poses,
        intrinsics: k,
        lighting: cfg.lighting,
        part_count: DEFAULT_PART_COUNT,
    };
    scene.validate()?;
    Ok(scene)
}

/// Pose of a part resting at `centre` after `frame` steps of `motion`.
pub fn motion_pose(motion: Motion, frame: usize, centre: &Vector3<f64>) -> RigidPose {
    match motion {
        Motion::Static => RigidPose::at(*centre),
        Motion::Spin { deg_per_frame } => RigidPose::new(
            Rotation3::from_axis_angle(&Vector3::y_axis(), (deg_per_frame * frame as f64).to_radians()),
            *centre,
        ),
        Motion::QuarterRoll => {
            // Exact quarter turns about the optical axis through the
            // principal point; assumes fx == fy and a centred principal point.
            let q = frame % 4;
            let m = match q {
                0 => Matrix3::identity(),
                1 => Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
                2 => Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0),
                _ => Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            };
            let r = Rotation3::from_matrix_unchecked(m);
            RigidPose::new(r, r * centre)
        }
    }
}

/// Exact rendering of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub depth: MapGrid,
    pub normals: MapGrid,
    pub iuv: MapGrid,
    pub rgb: MapGrid,
}

impl Frame {
    pub fn mask(&self) -> &[bool] {
        self.depth.mask()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    /// `poses[frame][part]`, in the order of `part_indices`.
    pub poses: Vec<Vec<RigidPose>>,
    pub part_indices: Vec<u32>,
    pub part_count: usize,
}

impl SequenceBundle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth rigid transform carrying part `part_index` from frame
    /// `i` to frame `j`, if the bundle carries poses for it.
    pub fn transform(&self, part_index: u32, i: usize, j: usize) -> Option<PartWarp> {
        let slot = self.part_indices.iter().position(|&p| p == part_index)?;
        let pi = self.poses.get(i)?.get(slot)?;
        let pj = self.poses.get(j)?.get(slot)?;
        let r = pj.rotation * pi.rotation.inverse();
        let t = pj.translation - r * pi.translation;
        Some(PartWarp {
            kind: WarpKind::Rigid,
            a: *r.matrix(),
            t,
            part_index,
            rms_residual: 0.0,
            support_count: 0,
        })
    }
}

/// Ray parameter of the nearest positive hit of `o + s d` with the quadric
/// in its local frame.
fn intersect_local(shape: &Quadric, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    match *shape {
        Quadric::Ellipsoid { semi_axes } => {
            let os = o.component_div(&semi_axes);
            let ds = d.component_div(&semi_axes);
            smallest_positive_root(ds.dot(&ds), 2.0 * os.dot(&ds), os.dot(&os) - 1.0)
        }
        Quadric::Capsule { radius, length } => {
            let half = 0.5 * length;
            let mut best: Option<f64> = None;
            let mut consider = |s: f64| {
                if s > 0.0 && best.map_or(true, |b| s < b) {
                    best = Some(s);
                }
            };
            // Cylinder wall x^2 + z^2 = r^2, |y| <= half.
            let a = d.x * d.x + d.z * d.z;
            if a > 0.0 {
                let b = 2.0 * (o.x * d.x + o.z * d.z);
                let c = o.x * o.x + o.z * o.z - radius * radius;
                for s in roots(a, b, c) {
                    let y = o.y + s * d.y;
                    if y.abs() <= half {
                        consider(s);
                    }
                }
            }
            for (cy, sign) in [(half, 1.0), (-half, -1.0)] {
                let oc = o - Vector3::new(0.0, cy, 0.0);
                for s in roots(d.dot(d), 2.0 * oc.dot(d), oc.dot(&oc) - radius * radius) {
                    let y = o.y + s * d.y;
                    if sign * (y - cy) >= 0.0 {
                        consider(s);
                    }
                }
            }
            best
        }
    }
}

fn roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return Vec::new();
    }
    let sq = disc.sqrt();
    // Numerically stable pair.
    let q = -0.5 * (b + b.signum() * sq);
    let mut r = Vec::with_capacity(2);
    if q != 0.0 {
        r.push(q / a);
        r.push(c / q);
    } else {
        r.push(0.0);
    }
    r
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    roots(a, b, c)
        .into_iter()
        .filter(|&s| s > 0.0)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |b| b.min(s))))
}

/// Outward unit normal at a local surface point.
fn local_normal(shape: &Quadric, q: &Vector3<f64>) -> Vector3<f64> {
    match *shape {
        Quadric::Ellipsoid { semi_axes } => q
            .component_div(&semi_axes.component_mul(&semi_axes))
            .normalize(),
        Quadric::Capsule { length, .. } => {
            let half = 0.5 * length;
            let cy = q.y.clamp(-half, half);
            (q - Vector3::new(0.0, cy, 0.0)).normalize()
        }
    }
}

/// Pose-invariant surface coordinate in `[0,1]^2`. The azimuthal seam sits at
/// the back of the part (local `+z`).
pub fn surface_uv(shape: &Quadric, q: &Vector3<f64>) -> (f64, f64) {
    match *shape {
        Quadric::Ellipsoid { semi_axes } => {
            let s = q.component_div(&semi_axes);
            let s = s / s.norm();
            let u = s.x.atan2(-s.z) / (2.0 * PI) + 0.5;
            let v = s.y.clamp(-1.0, 1.0).acos() / PI;
            (u.clamp(0.0, 1.0), 1.0 - v)
        }
        Quadric::Capsule { radius, length } => {
            let half = 0.5 * length;
            let u = q.x.atan2(-q.z) / (2.0 * PI) + 0.5;
            let cap = 0.5 * PI * radius;
            let total = 2.0 * cap + length;
            let arc = if q.y < -half {
                let rel = q - Vector3::new(0.0, -half, 0.0);
                let from_pole = (-rel.y / rel.norm()).clamp(-1.0, 1.0).acos();
                radius * from_pole
            } else if q.y > half {
                let rel = q - Vector3::new(0.0, half, 0.0);
                let from_equator = (rel.y / rel.norm()).clamp(-1.0, 1.0).asin();
                cap + length + radius * from_equator
            } else {
                cap + q.y + half
            };
            (u.clamp(0.0, 1.0), (arc / total).clamp(0.0, 1.0))
        }
    }
}

fn albedo_rgb(part: &PartSpec, u: f64, v: f64) -> [f64; 3] {
    match part.albedo {
        Albedo::Flat => part.color,
        Albedo::Checker { cell } => {
            let parity = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2);
            if parity == 0 {
                part.color
            } else {
                [part.color[0] * 0.35, part.color[1] * 0.35, part.color[2] * 0.35]
            }
        }
    }
}

/// Surface hit along the camera ray through a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub slot: usize,
    pub depth: f64,
    pub point: Point3,
    pub normal: Vector3<f64>,
    pub uv: (f64, f64),
}

/// Nearest intersection across all parts for the ray through `(x, y)`.
pub fn cast_ray(scene: &SceneSpec, frame: usize, x: f64, y: f64) -> Option<Hit> {
    let dir = scene.intrinsics.ray(x, y);
    let mut best: Option<(usize, f64)> = None;
    for (slot, part) in scene.parts.iter().enumerate() {
        let pose = &scene.poses[frame][slot];
        let o = pose.inverse_apply(&Vector3::zeros());
        let d = pose.rotation.inverse() * dir;
        if let Some(s) = intersect_local(&part.shape, &o, &d) {
            if best.map_or(true, |(_, b)| s < b) {
                best = Some((slot, s));
            }
        }
    }
    let (slot, s) = best?;
    let part = &scene.parts[slot];
    let pose = &scene.poses[frame][slot];
    let point = dir * s;
    let local = pose.inverse_apply(&point);
    let normal = pose.rotation * local_normal(&part.shape, &local);
    Some(Hit {
        slot,
        depth: s,
        point: Point3::from(point),
        normal,
        uv: surface_uv(&part.shape, &local),
    })
}

fn render_row(scene: &SceneSpec, frame: usize, y: usize) -> Vec<Option<Hit>> {
    (0..scene.intrinsics.width)
        .map(|x| cast_ray(scene, frame, x as f64, y as f64))
        .collect()
}

pub fn render_frame(scene: &SceneSpec, frame: usize) -> Result<Frame> {
    let k = &scene.intrinsics;
    let (w, h) = (k.width, k.height);
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<Option<Hit>>> = {
        use rayon::prelude::*;
        (0..h).into_par_iter().map(|y| render_row(scene, frame, y)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<Option<Hit>>> = (0..h).map(|y| render_row(scene, frame, y)).collect();

    let mut depth = MapGrid::new(w, h, 1);
    let mut normals = MapGrid::new(w, h, 3);
    let mut iuv = MapGrid::new(w, h, 3);
    let mut rgb = MapGrid::new(w, h, 3);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, hit) in row.into_iter().enumerate() {
            let Some(hit) = hit else { continue };
            let part = &scene.parts[hit.slot];
            depth.set(x, y, hit.depth);
            normals.pixel_mut(x, y).copy_from_slice(hit.normal.as_slice());
            iuv.pixel_mut(x, y)
                .copy_from_slice(&[part.part_index as f64, hit.uv.0, hit.uv.1]);
            let base = albedo_rgb(part, hit.uv.0, hit.uv.1);
            let shade = match scene.lighting {
                Lighting::Baked => 1.0,
                Lighting::Directional(l) => hit.normal.dot(&l).max(0.0),
            };
            rgb.pixel_mut(x, y)
                .copy_from_slice(&[base[0] * shade, base[1] * shade, base[2] * shade]);
            for g in [&mut depth, &mut normals, &mut iuv, &mut rgb] {
                g.set_valid(x, y, true);
            }
        }
    }
    if depth.valid_count() == 0 {
        return Err(Error::Empty(format!("frame {frame} has no visible surface")));
    }
    Ok(Frame {
        depth,
        normals,
        iuv,
        rgb,
    })
}

pub fn render_sequence(scene: &SceneSpec) -> Result<SequenceBundle> {
    scene.validate()?;
    let frames = (0..scene.frame_count())
        .map(|f| render_frame(scene, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceBundle {
        intrinsics: scene.intrinsics,
        frames,
        poses: scene.poses.clone(),
        part_indices: scene.parts.iter().map(|p| p.part_index).collect(),
        part_count: scene.part_count,
    })
}

/// Depth corruption models for test inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Gaussian { sigma: f64 },
    /// Smooth sinusoidal bias with the given amplitude (m) and wavelength (px).
    LowFrequency { amplitude: f64, wavelength: f64 },
}

/// Perturbs valid depths; deterministic given the seed, mask untouched.
pub fn perturb_depth(depth: &MapGrid, noise: NoiseModel, seed: u64) -> Result<MapGrid> {
    let mut out = depth.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match noise {
        NoiseModel::Gaussian { sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative sigma {sigma}")));
            }
            if sigma == 0.0 {
                return Ok(out);
            }
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let c = out.channels();
            for i in 0..out.len() {
                if out.is_valid_at(i) {
                    out.values_mut()[i * c] += normal.sample(&mut rng);
                }
            }
        }
        NoiseModel::LowFrequency {
            amplitude,
            wavelength,
        } => {
            if !(amplitude >= 0.0) || !(wavelength > 0.0) {
                return Err(Error::InvalidArgument(
                    "bias needs amplitude >= 0 and wavelength > 0".into(),
                ));
            }
            if amplitude == 0.0 {
                return Ok(out);
            }
            let phase_x = rand::Rng::gen_range(&mut rng, 0.0..2.0 * PI);
            let phase_y = rand::Rng::gen_range(&mut rng, 0.0..2.0 * PI);
            let (w, c) = (out.width(), out.channels());
            for i in 0..out.len() {
                if out.is_valid_at(i) {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    let b = amplitude
                        * (2.0 * PI * x / wavelength + phase_x).sin()
                        * (2.0 * PI * y / wavelength + phase_y).cos();
                    out.values_mut()[i * c] += b;
                }
            }
        }
    }
    Ok(out)
}

/// Rotation about an arbitrary axis, degrees.
pub fn rotation_deg(axis: Vector3<f64>, deg: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), deg.to_radians())
}
