//! Class activation graphs: decompose a linear probe's output over graph
//! nodes.
//!
//! For a probe with weights `W` and bias `beta` fitted on the pooled features
//! `S' = mean_j h'_j`, the score `M_j = W . h'_j` of node `j` satisfies
//! `beta + mean_j M_j = beta + W . S'` exactly, so the per-node scores are an
//! additive attribution of the probe's logit to anatomical regions. Scores
//! are sigmoid-normalized for display and can be splatted back into a dense
//! volume, averaging where patches overlap.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::Volume;

#[derive(Clone, Debug)]
pub struct ActivationGraph {
    pub subject_id: String,
    /// Raw per-node contributions M_j.
    pub scores_raw: Vec<f64>,
    /// Probe bias.
    pub beta: f64,
    /// Sigmoid of the raw scores, in (0, 1).
    pub scores_norm: Vec<f64>,
    /// beta + mean_j M_j.
    pub logit: f64,
    /// |(beta + mean M) - (beta + W . pooled)|: the reconstruction identity
    /// evaluated along both routes.
    pub logit_check: f64,
}

/// Compute per-node activation scores for one subject from the probe weights
/// (raw-feature space) and the node features `H'` (`[N, F]`, eval mode, head
/// discarded).
pub fn activation_graph(
    weights: &[f64],
    beta: f64,
    node_features: &Tensor,
    subject_id: impl Into<String>,
) -> Result<ActivationGraph> {
    if node_features.rank() != 2 {
        return Err(Error::shape(
            "activation_graph",
            format!("expected [N, F] node features, got {:?}", node_features.dims()),
        ));
    }
    let (n, f) = (node_features.dims()[0], node_features.dims()[1]);
    if weights.len() != f {
        return Err(Error::shape(
            "activation_graph",
            format!("{} probe weights for feature dim {f}", weights.len()),
        ));
    }
    let mut scores_raw = Vec::with_capacity(n);
    for j in 0..n {
        let row = &node_features.data()[j * f..(j + 1) * f];
        let m: f64 = row.iter().zip(weights).map(|(&h, &w)| h as f64 * w).sum();
        scores_raw.push(m);
    }
    let logit = beta + scores_raw.iter().sum::<f64>() / n as f64;

    // second route: through the pooled feature vector
    let mut pooled = vec![0.0f64; f];
    for j in 0..n {
        for (k, slot) in pooled.iter_mut().enumerate() {
            *slot += node_features.data()[j * f + k] as f64;
        }
    }
    let pooled_logit =
        beta + pooled.iter().zip(weights).map(|(&s, &w)| s / n as f64 * w).sum::<f64>();

    Ok(ActivationGraph {
        subject_id: subject_id.into(),
        scores_norm: normalize_scores(&scores_raw),
        logit,
        logit_check: (logit - pooled_logit).abs(),
        scores_raw,
        beta,
    })
}

/// Element-wise sigmoid; order-preserving, output in (0, 1).
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&v| 1.0 / (1.0 + libm::exp(-v))).collect()
}

/// Splat normalized node scores back into a dense volume: each voxel takes
/// the mean score of the patches covering it, zero where nothing does.
pub fn render_map(
    scores_norm: &[f64],
    centers_mm: &[[f32; 3]],
    patch_size: usize,
    dims: [usize; 3],
    spacing: f32,
) -> Result<Volume> {
    if scores_norm.len() != centers_mm.len() {
        return Err(Error::shape(
            "render_map",
            format!("{} scores for {} centers", scores_norm.len(), centers_mm.len()),
        ));
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let half = (patch_size / 2) as i64;
    for (score, c) in scores_norm.iter().zip(centers_mm) {
        let cx = libm::roundf(c[0] / spacing) as i64;
        let cy = libm::roundf(c[1] / spacing) as i64;
        let cz = libm::roundf(c[2] / spacing) as i64;
        for dz in 0..patch_size as i64 {
            let z = cz - half + dz;
            if z < 0 || z >= dims[0] as i64 {
                continue;
            }
            for dy in 0..patch_size as i64 {
                let y = cy - half + dy;
                if y < 0 || y >= dims[1] as i64 {
                    continue;
                }
                for dx in 0..patch_size as i64 {
                    let x = cx - half + dx;
                    if x < 0 || x >= dims[2] as i64 {
                        continue;
                    }
                    let i = (z as usize * dims[1] + y as usize) * dims[2] + x as usize;
                    sum[i] += *score;
                    count[i] += 1;
                }
            }
        }
    }
    let voxels: Vec<f32> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    Volume::new(dims, spacing, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn zero_weights_give_flat_half_map_and_bias_logit() {
        let h = Tensor::full(&[4, 3], 0.7).unwrap();
        let g = activation_graph(&[0.0; 3], 1.25, &h, "s0").unwrap();
        assert!(g.scores_raw.iter().all(|&m| m == 0.0));
        assert!(g.scores_norm.iter().all(|&s| (s - 0.5).abs() < 1e-12));
        assert_eq!(g.logit, 1.25);
        assert!(g.logit_check < 1e-12);
    }

    #[test]
    fn identical_node_features_share_the_logit_minus_bias() {
        let mut rng = Stream::root(1).derive("w").rng();
        let f = 5;
        let w: Vec<f64> = (0..f).map(|_| rng.gaussian()).collect();
        let row: Vec<f32> = (0..f).map(|_| rng.gaussian_f32(1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(&row);
        }
        let h = Tensor::new(&[6, f], data).unwrap();
        let g = activation_graph(&w, 0.4, &h, "s1").unwrap();
        let expect = g.logit - g.beta;
        for &m in &g.scores_raw {
            assert!((m - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_of_scores_matches_pooled_route() {
        let mut rng = Stream::root(2).derive("h").rng();
        let (n, f) = (7, 4);
        let h = Tensor::from_fn(&[n, f], |_| rng.gaussian_f32(1.0)).unwrap();
        let w: Vec<f64> = (0..f).map(|_| rng.gaussian()).collect();
        let g = activation_graph(&w, -0.3, &h, "s2").unwrap();
        assert!(g.logit_check < 1e-6, "check {}", g.logit_check);
    }

    #[test]
    fn sigmoid_normalization_properties() {
        let raw = [-20.0, -1.0, 0.0, 2.0, 20.0];
        let norm = normalize_scores(&raw);
        assert!(norm[0] < 1e-8);
        assert!((norm[2] - 0.5).abs() < 1e-12);
        assert!(norm[4] > 1.0 - 1e-8);
        for pair in norm.windows(2) {
            assert!(pair[0] < pair[1]); // order preserved
        }
    }

    #[test]
    fn argmax_is_invariant_under_positive_weight_scaling() {
        let mut rng = Stream::root(3).derive("s").rng();
        let (n, f) = (9, 6);
        let h = Tensor::from_fn(&[n, f], |_| rng.gaussian_f32(1.0)).unwrap();
        let w: Vec<f64> = (0..f).map(|_| rng.gaussian()).collect();
        let argmax = |scores: &[f64]| {
            scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let base = activation_graph(&w, 0.0, &h, "s").unwrap();
        for c in [0.5, 2.0, 17.0] {
            let scaled: Vec<f64> = w.iter().map(|&v| v * c).collect();
            let g = activation_graph(&scaled, 3.0, &h, "s").unwrap();
            assert_eq!(argmax(&g.scores_raw), argmax(&base.scores_raw));
        }
    }

    #[test]
    fn render_single_patch_block() {
        let scores = [0.8];
        let centers = [[4.0f32, 4.0, 4.0]];
        let v = render_map(&scores, &centers, 4, [8, 8, 8], 1.0).unwrap();
        // covered cube is uniform, everything else zero
        assert_eq!(v.at(4, 4, 4), 0.8);
        assert_eq!(v.at(2, 2, 2), 0.8);
        assert_eq!(v.at(1, 4, 4), 0.0);
        assert_eq!(v.at(6, 4, 4), 0.0);
    }

    #[test]
    fn render_overlap_averages() {
        let scores = [0.2, 0.6];
        let centers = [[2.0f32, 2.0, 2.0], [4.0, 2.0, 2.0]];
        let v = render_map(&scores, &centers, 4, [8, 8, 8], 1.0).unwrap();
        // x in [2,3] covered by both patches
        assert!((v.at(2, 2, 2) - 0.4).abs() < 1e-6);
        assert!((v.at(3, 1, 1) - 0.4).abs() < 1e-6);
        // x = 0 only by the first
        assert!((v.at(0, 2, 2) - 0.2).abs() < 1e-6);
        assert!((v.at(5, 2, 2) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn render_full_grid_with_constant_scores_is_constant() {
        let mut centers = Vec::new();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    centers.push([
                        (x * 16 + 16) as f32,
                        (y * 16 + 16) as f32,
                        (z * 16 + 16) as f32,
                    ]);
                }
            }
        }
        let scores = vec![0.35f64; 27];
        let v = render_map(&scores, &centers, 32, [64, 64, 64], 1.0).unwrap();
        // patches at centers {16, 32, 48} with size 32 tile the whole cube
        for (i, &val) in v.voxels.iter().enumerate() {
            assert!((val - 0.35).abs() < 1e-6, "voxel {i} = {val}");
        }
        assert!(v.voxels.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
