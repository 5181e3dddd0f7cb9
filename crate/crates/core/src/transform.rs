//! Invertible spatial transforms: an affine part plus an optional smooth
//! displacement field.
//!
//! A transform maps millimeter coordinates of its source frame to its target
//! frame as `phi(p) = A p + t + u(p)`, with `u` interpolated trilinearly from
//! a coarse grid spanning the source domain and clamped at the boundary.
//! Inversion is exact for the affine part; the displacement is inverted by
//! fixed-point iteration sampled onto a grid over the target domain, which
//! keeps the result representable in the same form.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::trilinear;

/// Fixed-point iteration cap and per-voxel tolerance for displacement inversion.
pub const INVERT_MAX_ITERS: usize = 50;
pub const INVERT_TOL_VOXELS: f32 = 1e-3;
/// The inverse displacement is solved on a grid this many times finer than the
/// forward grid; the inverse of a trilinear field is not trilinear, so extra
/// resolution keeps the representation error well under the round-trip budget.
pub const INVERT_REFINE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Affine3 {
    /// Row-major 3x3 linear part.
    pub m: [[f32; 3]; 3],
    pub t: [f32; 3],
}

impl Affine3 {
    pub fn identity() -> Self {
        Affine3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] }
    }

    pub fn translation(t: [f32; 3]) -> Self {
        Affine3 { t, ..Affine3::identity() }
    }

    #[inline]
    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + self.t[0],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + self.t[1],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + self.t[2],
        ]
    }

    pub fn det(&self) -> f32 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Affine3> {
        let d = self.det();
        if !d.is_finite() || d.abs() < 1e-12 {
            return Err(Error::Degenerate {
                op: "affine_inverse",
                detail: format!("determinant {d}"),
            });
        }
        let m = &self.m;
        let inv_det = 1.0 / d;
        let mut inv = [[0.0f32; 3]; 3];
        inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1] + inv[0][2] * self.t[2]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1] + inv[1][2] * self.t[2]),
            -(inv[2][0] * self.t[0] + inv[2][1] * self.t[1] + inv[2][2] * self.t[2]),
        ];
        Ok(Affine3 { m: inv, t })
    }
}

/// Smooth vector field on a regular grid spanning `[0, extent]` per axis
/// (node `i` sits at `i * extent / (dims - 1)`), clamped outside.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    /// Grid nodes along (z, y, x); each >= 2.
    pub dims: [usize; 3],
    /// Covered extent in mm along (x, y, z).
    pub extent: [f32; 3],
    /// z-major node order, (dx, dy, dz) per node, in mm.
    pub vectors: Vec<[f32; 3]>,
}

impl DisplacementField {
    pub fn new(dims: [usize; 3], extent: [f32; 3], vectors: Vec<[f32; 3]>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::config(format!("displacement grid dims {dims:?} must be >= 2")));
        }
        if extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::config(format!("displacement extent {extent:?} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if vectors.len() != n {
            return Err(Error::config(format!(
                "displacement grid {dims:?} expects {n} vectors, got {}",
                vectors.len()
            )));
        }
        Ok(DisplacementField { dims, extent, vectors })
    }

    pub fn zero(dims: [usize; 3], extent: [f32; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        DisplacementField::new(dims, extent, vec![[0.0; 3]; n])
    }

    #[inline]
    fn node(&self, ix: usize, iy: usize, iz: usize) -> [f32; 3] {
        self.vectors[(iz * self.dims[1] + iy) * self.dims[2] + ix]
    }

    pub fn sample(&self, p: [f32; 3]) -> [f32; 3] {
        let gx = (p[0] / self.extent[0] * (self.dims[2] - 1) as f32)
            .clamp(0.0, (self.dims[2] - 1) as f32);
        let gy = (p[1] / self.extent[1] * (self.dims[1] - 1) as f32)
            .clamp(0.0, (self.dims[1] - 1) as f32);
        let gz = (p[2] / self.extent[2] * (self.dims[0] - 1) as f32)
            .clamp(0.0, (self.dims[0] - 1) as f32);
        let mut out = [0.0f32; 3];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = trilinear(gx, gy, gz, |x, y, z| self.node(x, y, z)[c], self.dims);
        }
        out
    }

    pub fn max_magnitude(&self) -> f32 {
        self.vectors
            .iter()
            .map(|v| libm::sqrtf(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
            .fold(0.0, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTransform {
    pub affine: Affine3,
    pub displacement: Option<DisplacementField>,
    /// True when the source frame is subject space and the target is atlas space.
    pub subject_to_atlas: bool,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform { affine: Affine3::identity(), displacement: None, subject_to_atlas: true }
    }

    #[inline]
    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let mut out = self.affine.apply(p);
        if let Some(field) = &self.displacement {
            let u = field.sample(p);
            out[0] += u[0];
            out[1] += u[1];
            out[2] += u[2];
        }
        out
    }

    /// Invert the transform.
    ///
    /// The affine part inverts exactly. The displacement inverse is solved per
    /// grid node by fixed-point iteration (at most [`INVERT_MAX_ITERS`] steps,
    /// tolerance [`INVERT_TOL_VOXELS`] voxels) and sampled onto a grid of the
    /// same resolution spanning `target_extent` (mm along x, y, z) — the
    /// domain of the inverse. `spacing` converts the voxel tolerance to mm.
    pub fn invert(&self, target_extent: [f32; 3], spacing: f32) -> Result<SpatialTransform> {
        let inv_affine = self.affine.inverse()?;
        let field = match &self.displacement {
            None => None,
            Some(fwd) => {
                let tol_mm = INVERT_TOL_VOXELS * spacing;
                let dims = [
                    (fwd.dims[0] - 1) * INVERT_REFINE + 1,
                    (fwd.dims[1] - 1) * INVERT_REFINE + 1,
                    (fwd.dims[2] - 1) * INVERT_REFINE + 1,
                ];
                let mut vectors = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
                let mut worst = 0.0f32;
                for iz in 0..dims[0] {
                    for iy in 0..dims[1] {
                        for ix in 0..dims[2] {
                            let q = [
                                ix as f32 * target_extent[0] / (dims[2] - 1) as f32,
                                iy as f32 * target_extent[1] / (dims[1] - 1) as f32,
                                iz as f32 * target_extent[2] / (dims[0] - 1) as f32,
                            ];
                            let base = inv_affine.apply(q);
                            let mut x = base;
                            let mut residual = f32::INFINITY;
                            for _ in 0..INVERT_MAX_ITERS {
                                let u = fwd.sample(x);
                                // solve x = B(q - t) - B u(x), with B(q - t) = base
                                let bu = mat_vec(&inv_affine.m, u);
                                let next =
                                    [base[0] - bu[0], base[1] - bu[1], base[2] - bu[2]];
                                residual = dist(next, x);
                                x = next;
                                if residual < tol_mm {
                                    break;
                                }
                            }
                            if residual >= tol_mm {
                                return Err(Error::Convergence {
                                    detail: format!(
                                        "displacement inversion stalled at node ({ix},{iy},{iz}): residual {residual} mm > {tol_mm} mm"
                                    ),
                                });
                            }
                            worst = worst.max(residual);
                            vectors.push([x[0] - base[0], x[1] - base[1], x[2] - base[2]]);
                        }
                    }
                }
                let _ = worst;
                Some(DisplacementField::new(dims, target_extent, vectors)?)
            }
        };
        Ok(SpatialTransform {
            affine: inv_affine,
            displacement: field,
            subject_to_atlas: !self.subject_to_atlas,
        })
    }

    /// Largest round-trip error `|phi(inv(p)) - p|` over the given points, mm.
    pub fn roundtrip_residual(&self, inverse: &SpatialTransform, points: &[[f32; 3]]) -> f32 {
        points
            .iter()
            .map(|&p| dist(self.apply(inverse.apply(p)), p))
            .fold(0.0, f32::max)
    }
}

#[inline]
fn mat_vec(m: &[[f32; 3]; 3], v: [f32; 3]) -> [f32; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    libm::sqrtf(dx * dx + dy * dy + dz * dz)
}
