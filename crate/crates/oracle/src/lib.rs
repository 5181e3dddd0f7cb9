//! Slow, obviously-correct f64 reference implementations.
//!
//! These exist solely so the test suites can check the production f32 kernels
//! against an independent path: plain nested loops, no shared code with the
//! crate under test, everything in 64-bit. Shapes are passed explicitly and
//! nothing is validated beyond debug assertions — callers are tests that
//! construct well-formed inputs.

pub const BN_EPS: f64 = 1e-5;

/// `[m,k] x [k,n]` by the definition, triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// 3D cross-correlation, kernel 3x3x3, zero padding 1, by direct 7-deep loops.
/// `x` is `[b, cin, d, h, w]` flattened, `w` is `[cout, cin, 3, 3, 3]`.
pub fn conv3d(
    x: &[f64],
    w: &[f64],
    dims: [usize; 5],
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    let [bsz, cin, d, h, wd] = dims;
    let od = (d + 2 - 3) / stride + 1;
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (wd + 2 - 3) / stride + 1;
    let mut out = vec![0.0; bsz * cout * od * oh * ow];
    for b in 0..bsz {
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..3usize {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let iz = (oz * stride + kz) as isize - 1;
                                        let iy = (oy * stride + ky) as isize - 1;
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * d + iz as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize;
                                        let wi =
                                            (((co * cin + ci) * 3 + kz) * 3 + ky) * 3 + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * cout + co) * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn elu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

/// Train-mode batch norm over rows of `[r, c]` (per-column statistics,
/// biased variance, epsilon 1e-5).
pub fn batch_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for j in 0..c {
        let mut mean = 0.0;
        for i in 0..r {
            mean += x[i * c + j];
        }
        mean /= r as f64;
        let mut var = 0.0;
        for i in 0..r {
            let d = x[i * c + j] - mean;
            var += d * d;
        }
        var /= r as f64;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for i in 0..r {
            out[i * c + j] = gamma[j] * (x[i * c + j] - mean) * inv + beta[j];
        }
    }
    out
}

/// Train-mode batch norm over `[b, c, spatial]` (per-channel statistics).
pub fn batch_norm_channels(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    b: usize,
    c: usize,
    spatial: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * c * spatial];
    for ch in 0..c {
        let mut mean = 0.0;
        for bi in 0..b {
            for s in 0..spatial {
                mean += x[(bi * c + ch) * spatial + s];
            }
        }
        let n = (b * spatial) as f64;
        mean /= n;
        let mut var = 0.0;
        for bi in 0..b {
            for s in 0..spatial {
                let d = x[(bi * c + ch) * spatial + s] - mean;
                var += d * d;
            }
        }
        var /= n;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for bi in 0..b {
            for s in 0..spatial {
                let i = (bi * c + ch) * spatial + s;
                out[i] = gamma[ch] * (x[i] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

/// Eval-mode batch norm with fixed running statistics, any layout where the
/// channel of element `i` is `chan_of(i)`.
pub fn batch_norm_eval(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rm: &[f64],
    rv: &[f64],
    chan_of: impl Fn(usize) -> usize,
) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = chan_of(i);
            gamma[c] * (v - rm[c]) / (rv[c] + BN_EPS).sqrt() + beta[c]
        })
        .collect()
}

/// Row-wise L2 normalization of `[rows, f]`.
pub fn l2_normalize(x: &[f64], rows: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * f];
    for r in 0..rows {
        let row = &x[r * f..(r + 1) * f];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..f {
            out[r * f + j] = row[j] / norm;
        }
    }
    out
}

pub fn col_mean(x: &[f64], r: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; f];
    for i in 0..r {
        for j in 0..f {
            out[j] += x[i * f + j];
        }
    }
    out.iter_mut().for_each(|v| *v /= r as f64);
    out
}

/// Dense layer `y = x W + bias` for `x: [rows, din]`, `w: [din, dout]`.
pub fn dense(x: &[f64], w: &[f64], bias: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = matmul(x, w, rows, din, dout);
    for r in 0..rows {
        for j in 0..dout {
            out[r * dout + j] += bias[j];
        }
    }
    out
}

/// Single-anchor InfoNCE in f64: `-ln( e^{q.k/t} / (e^{q.k/t} + sum e^{q.n/t}) )`.
pub fn info_nce(q: &[f64], k: &[f64], negs: &[f64], f: usize, tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let s_pos = dot(q, k) / tau;
    let mut sims = vec![s_pos];
    for n in negs.chunks(f) {
        sims.push(dot(q, n) / tau);
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = sims.iter().map(|&s| (s - max).exp()).sum();
    max + z.ln() - s_pos
}

/// Central-difference gradient of `f` at `x` with step `eps`, all in f64.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        grad[i] = central_diff_element(&mut f, &mut x, i, eps);
    }
    grad
}

/// Central difference of a single coordinate.
pub fn central_diff_element(
    f: &mut impl FnMut(&[f64]) -> f64,
    x: &mut [f64],
    i: usize,
    eps: f64,
) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let hi = f(x);
    x[i] = orig - eps;
    let lo = f(x);
    x[i] = orig;
    (hi - lo) / (2.0 * eps)
}

/// Relative error with a denominator floor so near-zero gradients compare
/// absolutely at `floor` scale.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y, floor)).fold(0.0, f64::max)
}

/// `D^{-1/2} (A + I) D^{-1/2}` for a binary symmetric zero-diagonal `A`.
pub fn normalized_adjacency(a: &[f64], n: usize) -> Vec<f64> {
    let mut ahat = a.to_vec();
    for i in 0..n {
        ahat[i * n + i] += 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| ahat[i * n + j]).sum()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = ahat[i * n + j] / (deg[i] * deg[j]).sqrt();
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

pub mod harness;
