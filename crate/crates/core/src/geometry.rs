//! Pinhole camera model, the per-pixel raster type and normals from depth.
//!
//! Pixel centres sit at integer coordinates: pixel `(x, y)` covers
//! `[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)`. The camera looks down `+z`,
//! with `+x` to the right and `+y` down the image.

use nalgebra::{Point3 as NaPoint3, Vector3};

use crate::error::{Error, Result};

/// A 3D point in the camera frame, in meters.
pub type Point3 = NaPoint3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square image with the principal point at the image centre.
    pub fn centered(focal: f64, size: usize) -> Result<Self> {
        let c = (size as f64 - 1.0) / 2.0;
        Self::new(focal, focal, c, c, size, size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Intrinsics("image size must be nonzero".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::Intrinsics(format!("cx={} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Intrinsics(format!("cy={} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    /// Direction `K^-1 [x, y, 1]^T`; its z component is 1.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }
}

/// Rectangular raster of per-pixel real vectors plus a validity mask.
///
/// Depth maps have one channel (meters), normal maps three, IUV maps three
/// (part index, u, v) and RGB maps three.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGrid {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl MapGrid {
    /// All-zero grid with every pixel invalid.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        MapGrid {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
            mask: vec![false; width * height],
        }
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        channels: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("channel count must be nonzero".into()));
        }
        if values.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "expected {} values for {}x{}x{}, got {}",
                width * height * channels,
                width,
                height,
                channels,
                values.len()
            )));
        }
        if mask.len() != width * height {
            return Err(Error::Shape(format!(
                "expected {} mask entries, got {}",
                width * height,
                mask.len()
            )));
        }
        Ok(MapGrid {
            width,
            height,
            channels,
            values,
            mask,
        })
    }

    /// Single-channel grid with every pixel valid.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        MapGrid {
            width,
            height,
            channels: 1,
            values: vec![value; width * height],
            mask: vec![true; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    #[inline]
    pub fn is_valid_at(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    #[inline]
    pub fn set_valid(&mut self, x: usize, y: usize, valid: bool) {
        let i = self.index(x, y);
        self.mask[i] = valid;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.values[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_at(&self, idx: usize) -> &[f64] {
        let i = idx * self.channels;
        &self.values[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.values[i..i + self.channels]
    }

    /// First channel at pixel `(x, y)`.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = (y * self.width + x) * self.channels;
        self.values[i] = value;
    }

    /// Number of valid pixels.
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Iterator over `(x, y)` of valid pixels in row-major order.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn same_shape(&self, other: &MapGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_shape(&self, other: &MapGrid, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub(crate) fn check_intrinsics(&self, k: &CameraIntrinsics) -> Result<()> {
        if self.width != k.width || self.height != k.height {
            return Err(Error::Shape(format!(
                "grid is {}x{} but intrinsics describe {}x{}",
                self.width, self.height, k.width, k.height
            )));
        }
        Ok(())
    }

    /// Bilinear weights over the (up to) four valid neighbours of `(x, y)`,
    /// renormalised to sum to one. Returns the corner indices, weights and
    /// the derivatives of the normalised weights with respect to x and y.
    pub fn bilinear_stencil(&self, x: f64, y: f64) -> Result<BilinearStencil> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
        let raw = [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ];
        let draw_dx = [-(1.0 - ay), 1.0 - ay, -ay, ay];
        let draw_dy = [-(1.0 - ax), -ax, 1.0 - ax, ax];

        let mut st = BilinearStencil::default();
        let mut total = 0.0;
        let mut total_dx = 0.0;
        let mut total_dy = 0.0;
        for k in 0..4 {
            let (cx, cy) = corners[k];
            if !self.is_valid(cx, cy) {
                continue;
            }
            // Degenerate corners (x1 == x0 at the border) carry zero weight.
            if (k == 1 || k == 3) && x1 == x0 {
                continue;
            }
            if (k == 2 || k == 3) && y1 == y0 {
                continue;
            }
            st.idx[st.n] = self.index(cx, cy);
            st.w[st.n] = raw[k];
            st.dwdx[st.n] = draw_dx[k];
            st.dwdy[st.n] = draw_dy[k];
            st.n += 1;
            total += raw[k];
            total_dx += draw_dx[k];
            total_dy += draw_dy[k];
        }
        if st.n == 0 || total <= 1e-12 {
            return Err(Error::NoValidNeighbour { x, y });
        }
        for k in 0..st.n {
            let w = st.w[k];
            st.w[k] = w / total;
            st.dwdx[k] = (st.dwdx[k] * total - w * total_dx) / (total * total);
            st.dwdy[k] = (st.dwdy[k] * total - w * total_dy) / (total * total);
        }
        Ok(st)
    }

    /// Bilinear sample of every channel at a sub-pixel location, restricted to
    /// valid neighbours.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) -> Result<()> {
        let st = self.bilinear_stencil(x, y)?;
        st.apply(self, out);
        Ok(())
    }

    /// First-channel bilinear sample.
    pub fn sample_scalar(&self, x: f64, y: f64) -> Result<f64> {
        let st = self.bilinear_stencil(x, y)?;
        Ok(st.scalar(self))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BilinearStencil {
    pub n: usize,
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dwdx: [f64; 4],
    pub dwdy: [f64; 4],
}

impl BilinearStencil {
    pub fn apply(&self, grid: &MapGrid, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.n {
            let px = grid.pixel_at(self.idx[k]);
            for (o, v) in out.iter_mut().zip(px) {
                *o += self.w[k] * v;
            }
        }
    }

    /// Derivatives of the sampled channels with respect to x and y.
    pub fn gradient(&self, grid: &MapGrid, ddx: &mut [f64], ddy: &mut [f64]) {
        ddx.iter_mut().for_each(|v| *v = 0.0);
        ddy.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.n {
            let px = grid.pixel_at(self.idx[k]);
            for c in 0..px.len().min(ddx.len()) {
                ddx[c] += self.dwdx[k] * px[c];
                ddy[c] += self.dwdy[k] * px[c];
            }
        }
    }

    pub fn scalar(&self, grid: &MapGrid) -> f64 {
        (0..self.n)
            .map(|k| self.w[k] * grid.values[self.idx[k] * grid.channels])
            .sum()
    }
}

/// Lift a (possibly sub-pixel) location with its interpolated depth to 3D:
/// `z * K^-1 [x, y, 1]^T`.
pub fn back_project(depth: &MapGrid, k: &CameraIntrinsics, x: f64, y: f64) -> Result<Point3> {
    let z = depth.sample_scalar(x, y)?;
    if !(z > 0.0) {
        return Err(Error::NonPositiveDepth(z));
    }
    Ok(back_project_depth(k, x, y, z))
}

/// Back-projection with an explicit depth value.
#[inline]
pub fn back_project_depth(k: &CameraIntrinsics, x: f64, y: f64, z: f64) -> Point3 {
    Point3::from(k.ray(x, y) * z)
}

/// Perspective projection to pixel coordinates.
pub fn project(p: &Point3, k: &CameraIntrinsics) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::NonPositiveDepth(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// One axis of the finite-difference stencil used for normals:
/// derivative = `scale * (p[plus] - p[minus])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffStencil {
    pub plus: usize,
    pub minus: usize,
    pub scale: f64,
}

/// Central differences where both neighbours are valid, one-sided at mask
/// boundaries, `None` when neither neighbour along an axis is valid.
pub fn normal_stencil(mask: &MapGrid, x: usize, y: usize) -> Option<(DiffStencil, DiffStencil)> {
    if !mask.is_valid(x, y) {
        return None;
    }
    let w = mask.width();
    let h = mask.height();
    let here = mask.index(x, y);
    let axis = |lo: Option<usize>, hi: Option<usize>| -> Option<DiffStencil> {
        let lo = lo.filter(|&i| mask.is_valid_at(i));
        let hi = hi.filter(|&i| mask.is_valid_at(i));
        match (lo, hi) {
            (Some(l), Some(h)) => Some(DiffStencil {
                plus: h,
                minus: l,
                scale: 0.5,
            }),
            (None, Some(h)) => Some(DiffStencil {
                plus: h,
                minus: here,
                scale: 1.0,
            }),
            (Some(l), None) => Some(DiffStencil {
                plus: here,
                minus: l,
                scale: 1.0,
            }),
            (None, None) => None,
        }
    };
    let sx = axis(
        (x > 0).then(|| here - 1),
        (x + 1 < w).then(|| here + 1),
    )?;
    let sy = axis(
        (y > 0).then(|| here - w),
        (y + 1 < h).then(|| here + w),
    )?;
    Some((sx, sy))
}

/// Unnormalised cross product `dp/dx x dp/dy` at a pixel, before orientation.
pub(crate) fn stencil_cross(
    depth: &MapGrid,
    k: &CameraIntrinsics,
    sx: &DiffStencil,
    sy: &DiffStencil,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let w = depth.width();
    let point = |i: usize| {
        let z = depth.values()[i * depth.channels()];
        k.ray((i % w) as f64, (i / w) as f64) * z
    };
    let dx = (point(sx.plus) - point(sx.minus)) * sx.scale;
    let dy = (point(sy.plus) - point(sy.minus)) * sy.scale;
    (dx.cross(&dy), dx, dy)
}

/// Surface normals from a depth map: normalised cross product of the image
/// derivatives of the back-projected points, oriented towards the camera
/// (`n_z < 0`). Pixels with a degenerate stencil are left invalid.
pub fn depth_to_normals(depth: &MapGrid, k: &CameraIntrinsics) -> MapGrid {
    let mut out = MapGrid::new(depth.width(), depth.height(), 3);
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let Some((sx, sy)) = normal_stencil(depth, x, y) else {
                continue;
            };
            let (c, _, _) = stencil_cross(depth, k, &sx, &sy);
            let norm = c.norm();
            if !(norm > 1e-300) || !norm.is_finite() {
                continue;
            }
            let mut n = c / norm;
            if n.z > 0.0 {
                n = -n;
            }
            out.pixel_mut(x, y).copy_from_slice(n.as_slice());
            out.set_valid(x, y, true);
        }
    }
    out
}

/// Angle in radians between two (not necessarily unit) vectors, with the
/// cosine clamped away from +-1 so `acos` never produces NaN.
#[inline]
pub fn clamped_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0 + 1e-12, 1.0 - 1e-12).acos()
}
