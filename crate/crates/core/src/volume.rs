//! Dense 3D scalar volumes with isotropic voxel spacing.
//!
//! Voxels are stored z-slowest / x-fastest; the voxel at integer index
//! `(ix, iy, iz)` is centered at millimeter position `(ix, iy, iz) * spacing`.
//! Working intensities live in `[-1, 1]`; raw CT values are brought into that
//! range by [`hu_to_unit`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Intensity used for anything outside the scanned volume (air).
pub const BACKGROUND: f32 = -1.0;

/// Hounsfield window applied on ingestion, mapped affinely onto `[-1, 1]`.
pub const HU_WINDOW: (f32, f32) = (-1024.0, 240.0);

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// (D, H, W): extents along z, y, x.
    pub dims: [usize; 3],
    /// Millimeters per voxel, isotropic, > 0.
    pub spacing: f32,
    /// z-major (z slowest), x fastest.
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: f32, voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("volume dims {dims:?} must be positive")));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::config(format!("voxel spacing {spacing} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::config(format!(
                "volume dims {dims:?} expect {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Volume { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: f32, v: f32) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing, vec![v; n])
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[2] + ix
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.voxels[self.index(ix, iy, iz)]
    }

    /// Voxel value at integer coordinates, background outside the bounds.
    #[inline]
    pub fn at_or_background(&self, ix: i64, iy: i64, iz: i64) -> f32 {
        if ix < 0
            || iy < 0
            || iz < 0
            || ix >= self.dims[2] as i64
            || iy >= self.dims[1] as i64
            || iz >= self.dims[0] as i64
        {
            BACKGROUND
        } else {
            self.at(ix as usize, iy as usize, iz as usize)
        }
    }

    /// Trilinear interpolation at a millimeter position, with coordinates
    /// clamped to the volume so boundary samples replicate edge voxels.
    pub fn sample_mm(&self, p: [f32; 3]) -> f32 {
        let fx = (p[0] / self.spacing).clamp(0.0, (self.dims[2] - 1) as f32);
        let fy = (p[1] / self.spacing).clamp(0.0, (self.dims[1] - 1) as f32);
        let fz = (p[2] / self.spacing).clamp(0.0, (self.dims[0] - 1) as f32);
        trilinear(fx, fy, fz, |x, y, z| self.at(x, y, z), self.dims)
    }

    /// Physical extent in millimeters along (x, y, z): voxel centers span
    /// `[0, (n-1) * spacing]`.
    pub fn extent_mm(&self) -> [f32; 3] {
        [
            (self.dims[2] - 1) as f32 * self.spacing,
            (self.dims[1] - 1) as f32 * self.spacing,
            (self.dims[0] - 1) as f32 * self.spacing,
        ]
    }

    pub fn ensure_unit_range(&self) -> Result<()> {
        for (i, &v) in self.voxels.iter().enumerate() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::config(format!("voxel {i} = {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Trilinear interpolation over values given by `get(ix, iy, iz)`.
pub fn trilinear(
    fx: f32,
    fy: f32,
    fz: f32,
    get: impl Fn(usize, usize, usize) -> f32,
    dims: [usize; 3],
) -> f32 {
    let x0 = (fx as usize).min(dims[2] - 1);
    let y0 = (fy as usize).min(dims[1] - 1);
    let z0 = (fz as usize).min(dims[0] - 1);
    let x1 = (x0 + 1).min(dims[2] - 1);
    let y1 = (y0 + 1).min(dims[1] - 1);
    let z1 = (z0 + 1).min(dims[0] - 1);
    let tx = fx - x0 as f32;
    let ty = fy - y0 as f32;
    let tz = fz - z0 as f32;
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let c00 = lerp(get(x0, y0, z0), get(x1, y0, z0), tx);
    let c10 = lerp(get(x0, y1, z0), get(x1, y1, z0), tx);
    let c01 = lerp(get(x0, y0, z1), get(x1, y0, z1), tx);
    let c11 = lerp(get(x0, y1, z1), get(x1, y1, z1), tx);
    lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
}

/// Map a raw Hounsfield value through the `[-1024, 240]` window onto `[-1, 1]`,
/// clamping outside the window.
#[inline]
pub fn hu_to_unit(hu: f32) -> f32 {
    let clamped = hu.clamp(HU_WINDOW.0, HU_WINDOW.1);
    let mid = 0.5 * (HU_WINDOW.0 + HU_WINDOW.1); // -392
    let half = 0.5 * (HU_WINDOW.1 - HU_WINDOW.0); // 632
    (clamped - mid) / half
}
