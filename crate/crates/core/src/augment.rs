//! Stochastic patch augmentations forming the positive pairs: random elastic
//! deformation, additive Gaussian noise and contrast adjustment, applied in
//! that order with the output clamped back to `[-1, 1]`.
//!
//! An augmentation is a pure function of (patch, config, stream), so two draws
//! from the same named stream are byte-identical and distinct tags give
//! independent views.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::volume::trilinear;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Control-point spacing of the elastic grid, voxels.
    pub elastic_grid: usize,
    /// Std-dev of control-point displacements, voxels. Zero disables warping.
    pub elastic_sigma: f32,
    /// Std-dev of additive intensity noise. Zero disables.
    pub noise_sigma: f32,
    /// Contrast exponent range; gamma = 1 leaves intensities unchanged.
    pub gamma_range: (f32, f32),
    /// Per-op application probability.
    pub apply_prob: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            elastic_grid: 8,
            elastic_sigma: 1.0,
            noise_sigma: 0.03,
            gamma_range: (0.8, 1.25),
            apply_prob: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            elastic_grid: 8,
            elastic_sigma: 0.0,
            noise_sigma: 0.0,
            gamma_range: (1.0, 1.0),
            apply_prob: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elastic_grid == 0 {
            return Err(Error::config("elastic grid spacing must be positive"));
        }
        if self.elastic_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::config("augment sigmas must be non-negative"));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(format!("gamma range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::config("apply probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Augment one s^3 patch. Draw order is fixed (gate, elastic, noise, contrast)
/// so the result depends only on the inputs and the stream.
pub fn augment(patch: &Tensor, cfg: &AugmentConfig, stream: Stream) -> Result<Tensor> {
    cfg.validate()?;
    if patch.rank() != 3
        || patch.dims()[0] != patch.dims()[1]
        || patch.dims()[1] != patch.dims()[2]
    {
        return Err(Error::shape("augment", format!("expected cubic patch, got {:?}", patch.dims())));
    }
    let s = patch.dims()[0];
    let mut rng = stream.rng();

    let do_elastic = rng.uniform_f64() < cfg.apply_prob as f64;
    let do_noise = rng.uniform_f64() < cfg.apply_prob as f64;
    let do_contrast = rng.uniform_f64() < cfg.apply_prob as f64;

    let mut data = if do_elastic && cfg.elastic_sigma > 0.0 {
        elastic_warp(patch, s, cfg, &mut rng)
    } else {
        patch.data().to_vec()
    };

    if do_noise && cfg.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += rng.gaussian_f32(cfg.noise_sigma);
        }
    }

    if do_contrast {
        let gamma = rng.range_f64(cfg.gamma_range.0 as f64, cfg.gamma_range.1 as f64);
        if (gamma - 1.0).abs() > 1e-9 {
            for v in data.iter_mut() {
                // odd power rule keeps the signed [-1, 1] window symmetric
                let a = libm::pow(v.abs() as f64, gamma) as f32;
                *v = if *v < 0.0 { -a } else { a };
            }
        }
    }

    for v in data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Tensor::new(&[s, s, s], data)
}

fn elastic_warp(patch: &Tensor, s: usize, cfg: &AugmentConfig, rng: &mut crate::rng::Rng) -> Vec<f32> {
    // control nodes at multiples of the grid spacing, covering [0, s-1]
    let nodes_per_axis = (s - 1).div_ceil(cfg.elastic_grid) + 1;
    let n_nodes = nodes_per_axis * nodes_per_axis * nodes_per_axis;
    let mut disp = vec![[0.0f32; 3]; n_nodes];
    for d in disp.iter_mut() {
        for c in d.iter_mut() {
            *c = rng.gaussian_f32(cfg.elastic_sigma);
        }
    }
    let node = |x: usize, y: usize, z: usize, c: usize| -> f32 {
        disp[(z * nodes_per_axis + y) * nodes_per_axis + x][c]
    };
    let dims = [nodes_per_axis; 3];
    let grid = cfg.elastic_grid as f32;
    let max_node = (nodes_per_axis - 1) as f32;
    let src = patch.data();
    let mut out = vec![0.0f32; s * s * s];
    let mut i = 0;
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let gx = (x as f32 / grid).min(max_node);
                let gy = (y as f32 / grid).min(max_node);
                let gz = (z as f32 / grid).min(max_node);
                let dx = trilinear(gx, gy, gz, |a, b, c| node(a, b, c, 0), dims);
                let dy = trilinear(gx, gy, gz, |a, b, c| node(a, b, c, 1), dims);
                let dz = trilinear(gx, gy, gz, |a, b, c| node(a, b, c, 2), dims);
                // zero-flux boundary: sample coordinates clamp to the patch
                let fx = (x as f32 + dx).clamp(0.0, (s - 1) as f32);
                let fy = (y as f32 + dy).clamp(0.0, (s - 1) as f32);
                let fz = (z as f32 + dz).clamp(0.0, (s - 1) as f32);
                out[i] = trilinear(fx, fy, fz, |a, b, c| src[(c * s + b) * s + a], [s; 3]);
                i += 1;
            }
        }
    }
    out
}
