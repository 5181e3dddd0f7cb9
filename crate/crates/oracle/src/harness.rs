//! Randomized gradient checks: every differentiable operation, and the two
//! full losses on toy networks, against central finite differences of the
//! naive f64 implementations in this crate (step 1e-3). Pass criterion is
//! relative error below 1e-3 per parameter element, with a small floor so
//! gradients near zero compare absolutely. Panics with a diagnostic on the
//! first failing element.

use anatgraph_core::encoders::{EncoderParams, FwdCtx, GraphParams, ModelConfig};
use anatgraph_core::patch_graph::{build_adjacency, normalize_adjacency};
use anatgraph_core::rng::{Rng, Stream};
use anatgraph_core::tape::{BnMode, Tape, Var};
use anatgraph_core::tensor::Tensor;

use crate as oracle;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rng_for(test: &str, seed: u64) -> Rng {
    Stream::root(seed).derive(test).rng()
}

fn rand_vec(rng: &mut Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gaussian_f32(scale)).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Compare per element with a floored relative error.
fn assert_close(test: &str, seed: u64, ad: &[f32], fd: &[f64]) {
    assert_eq!(ad.len(), fd.len(), "{test} seed {seed}: gradient length");
    let max_mag = fd.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = 1e-3 * (1.0 + max_mag);
    for (i, (&a, &b)) in ad.iter().zip(fd).enumerate() {
        let err = oracle::rel_err(a as f64, b, floor);
        assert!(
            err < TOL,
            "{test} seed {seed}: element {i}: ad {a} vs fd {b} (rel err {err:.2e})"
        );
    }
}

/// Like [`assert_close`], but an element that disagrees at the base step is
/// re-measured at eps/10: high local curvature inflates the truncation error
/// of the wider quotient, and the refined measurement must converge to the
/// tape gradient for the element to pass.
fn assert_close_refining(
    test: &str,
    seed: u64,
    ad: &[f32],
    fd: &[f64],
    params: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) {
    assert_eq!(ad.len(), fd.len(), "{test} seed {seed}: gradient length");
    let max_mag = fd.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = 1e-3 * (1.0 + max_mag);
    let mut scratch = params.to_vec();
    for (i, (&a, &b)) in ad.iter().zip(fd).enumerate() {
        let err = oracle::rel_err(a as f64, b, floor);
        if err < TOL {
            continue;
        }
        let refined = oracle::central_diff_element(&mut f, &mut scratch, i, EPS / 10.0);
        let err2 = oracle::rel_err(a as f64, refined, floor);
        assert!(
            err2 < TOL,
            "{test} seed {seed}: element {i}: ad {a} vs fd {b} / refined {refined} (rel err {err2:.2e})"
        );
    }
}

/// Scalar readout used to reduce a tensor output to a loss: flatten and
/// project onto a fixed random vector via matmul.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[1, n]).unwrap();
    let w = tape.constant(weights);
    let prod = tape.matmul(flat, w).unwrap();
    tape.reshape(prod, &[1]).unwrap()
}

fn project_f64(out: &[f64], weights: &[f64]) -> f64 {
    out.iter().zip(weights).map(|(a, b)| a * b).sum()
}

pub fn check_matmul(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = rng_for("matmul", seed);
        let (m, k, n) = (2 + rng.below(4), 2 + rng.below(4), 2 + rng.below(4));
        let a = rand_vec(&mut rng, m * k, 1.0);
        let b = rand_vec(&mut rng, k * n, 1.0);
        let r = rand_vec(&mut rng, m * n, 1.0);

        let mut tape = Tape::new();
        let av = tape.param(&Tensor::new(&[m, k], a.clone()).unwrap());
        let bv = tape.param(&Tensor::new(&[k, n], b.clone()).unwrap());
        let out = tape.matmul(av, bv).unwrap();
        let loss = project(&mut tape, out, &Tensor::new(&[m * n, 1], r.clone()).unwrap());
        let grads = tape.backward(loss).unwrap();

        let rf = to_f64(&r);
        let mut params = to_f64(&a);
        params.extend(to_f64(&b));
        let fd = oracle::central_diff(
            |p| {
                let out = oracle::matmul(&p[..m * k], &p[m * k..], m, k, n);
                project_f64(&out, &rf)
            },
            &params,
            EPS,
        );
        assert_close("matmul.a", seed, grads.tensor(av).unwrap().data(), &fd[..m * k]);
        assert_close("matmul.b", seed, grads.tensor(bv).unwrap().data(), &fd[m * k..]);
    }
}

pub fn check_conv3d(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = rng_for("conv3d", seed);
        let (cin, cout) = (1 + rng.below(2), 1 + rng.below(3));
        let d = 3 + rng.below(3);
        let stride = 1 + rng.below(2);
        let x = rand_vec(&mut rng, cin * d * d * d, 1.0);
        let w = rand_vec(&mut rng, cout * cin * 27, 0.5);

        let mut tape = Tape::new();
        let xv = tape.param(&Tensor::new(&[cin, d, d, d], x.clone()).unwrap());
        let wv = tape.param(&Tensor::new(&[cout, cin, 3, 3, 3], w.clone()).unwrap());
        let out = tape.conv3d(xv, wv, stride).unwrap();
        let out_n = tape.value(out).numel();
        let r = rand_vec(&mut rng, out_n, 1.0);
        let loss = project(&mut tape, out, &Tensor::new(&[out_n, 1], r.clone()).unwrap());
        let grads = tape.backward(loss).unwrap();

        let rf = to_f64(&r);
        let mut params = to_f64(&x);
        params.extend(to_f64(&w));
        let nx = x.len();
        let fd = oracle::central_diff(
            |p| {
                let out = oracle::conv3d(&p[..nx], &p[nx..], [1, cin, d, d, d], cout, stride);
                project_f64(&out, &rf)
            },
            &params,
            EPS,
        );
        assert_close("conv3d.x", seed, grads.tensor(xv).unwrap().data(), &fd[..nx]);
        assert_close("conv3d.w", seed, grads.tensor(wv).unwrap().data(), &fd[nx..]);
    }
}

pub fn check_activations(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = rng_for("acts", seed);
        let n = 4 + rng.below(8);
        // keep inputs away from the ReLU kink where the derivative jumps
        let x: Vec<f32> = (0..n)
            .map(|_| {
                let v = rng.gaussian_f32(1.0);
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect();
        let r = rand_vec(&mut rng, n, 1.0);
        let rf = to_f64(&r);

        for kind in ["relu", "elu", "sigmoid"] {
            let mut tape = Tape::new();
            let xv = tape.param(&Tensor::new(&[n], x.clone()).unwrap());
            let y = match kind {
                "relu" => tape.relu(xv).unwrap(),
                "elu" => tape.elu(xv).unwrap(),
                _ => tape.sigmoid(xv).unwrap(),
            };
            let loss = project(&mut tape, y, &Tensor::new(&[n, 1], r.clone()).unwrap());
            let grads = tape.backward(loss).unwrap();
            let fd = oracle::central_diff(
                |p| {
                    let out = match kind {
                        "relu" => oracle::relu(p),
                        "elu" => oracle::elu(p),
                        _ => oracle::sigmoid(p),
                    };
                    project_f64(&out, &rf)
                },
                &to_f64(&x),
                EPS,
            );
            assert_close(kind, seed, grads.tensor(xv).unwrap().data(), &fd);
        }
    }
}

pub fn check_batch_norm(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = rng_for("bn", seed);
        let (rows, cols) = (3 + rng.below(4), 2 + rng.below(3));
        let x = rand_vec(&mut rng, rows * cols, 1.5);
        let gamma = rand_vec(&mut rng, cols, 0.5);
        let beta = rand_vec(&mut rng, cols, 0.5);
        let r = rand_vec(&mut rng, rows * cols, 1.0);
        let rf = to_f64(&r);

        let mut tape = Tape::new();
        let xv = tape.param(&Tensor::new(&[rows, cols], x.clone()).unwrap());
        let gv = tape.param(&Tensor::new(&[cols], gamma.clone()).unwrap());
        let bv = tape.param(&Tensor::new(&[cols], beta.clone()).unwrap());
        let rm = Tensor::zeros(&[cols]).unwrap();
        let rvr = Tensor::full(&[cols], 1.0).unwrap();
        let (y, _) = tape
            .batch_norm(xv, gv, bv, (&rm, &rvr), BnMode::Train { update_running: false })
            .unwrap();
        let loss = project(&mut tape, y, &Tensor::new(&[rows * cols, 1], r.clone()).unwrap());
        let grads = tape.backward(loss).unwrap();

        let mut params = to_f64(&x);
        params.extend(to_f64(&gamma));
        params.extend(to_f64(&beta));
        let nx = x.len();
        let fd = oracle::central_diff(
            |p| {
                let out = oracle::batch_norm_rows(
                    &p[..nx],
                    &p[nx..nx + cols],
                    &p[nx + cols..],
                    rows,
                    cols,
                );
                project_f64(&out, &rf)
            },
            &params,
            EPS,
        );
        assert_close("bn.x", seed, grads.tensor(xv).unwrap().data(), &fd[..nx]);
        assert_close("bn.gamma", seed, grads.tensor(gv).unwrap().data(), &fd[nx..nx + cols]);
        assert_close("bn.beta", seed, grads.tensor(bv).unwrap().data(), &fd[nx + cols..]);
    }
}

pub fn check_l2_normalize(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = rng_for("l2", seed);
        let n = 3 + rng.below(6);
        let x: Vec<f32> = rand_vec(&mut rng, n, 1.0).iter().map(|v| v + 0.2).collect();
        let r = rand_vec(&mut rng, n, 1.0);
        let rf = to_f64(&r);

        let mut tape = Tape::new();
        let xv = tape.param(&Tensor::new(&[n], x.clone()).unwrap());
        let y = tape.l2_normalize(xv).unwrap();
        let loss = project(&mut tape, y, &Tensor::new(&[n, 1], r.clone()).unwrap());
        let grads = tape.backward(loss).unwrap();

        let fd = oracle::central_diff(
            |p| project_f64(&oracle::l2_normalize(p, 1, p.len()), &rf),
            &to_f64(&x),
            EPS,
        );
        assert_close("l2_normalize", seed, grads.tensor(xv).unwrap().data(), &fd);
    }
}

pub fn check_info_nce(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = rng_for("nce", seed);
        let f = 3 + rng.below(5);
        let kn = 1 + rng.below(6);
        let q = rand_vec(&mut rng, f, 1.0);
        let k = rand_vec(&mut rng, f, 1.0);
        let negs = rand_vec(&mut rng, kn * f, 1.0);
        let tau = 0.2f32;

        let mut tape = Tape::new();
        let qv = tape.param(&Tensor::new(&[f], q.clone()).unwrap());
        let kv = tape.param(&Tensor::new(&[f], k.clone()).unwrap());
        let nt = Tensor::new(&[kn, f], negs.clone()).unwrap();
        let loss = tape.info_nce(qv, kv, &nt, tau).unwrap();
        let grads = tape.backward(loss).unwrap();

        let negs64 = to_f64(&negs);
        let mut params = to_f64(&q);
        params.extend(to_f64(&k));
        let fd = oracle::central_diff(
            |p| oracle::info_nce(&p[..f], &p[f..], &negs64, f, tau as f64),
            &params,
            EPS,
        );
        assert_close("info_nce.q", seed, grads.tensor(qv).unwrap().data(), &fd[..f]);
        assert_close("info_nce.k", seed, grads.tensor(kv).unwrap().data(), &fd[f..]);
    }
}

// ---------------------------------------------------------------------------
// Full losses on toy networks.
// ---------------------------------------------------------------------------

/// A parameter step of eps can shift any ReLU preactivation by roughly
/// eps * |activation|; evaluation points whose ReLU inputs sit closer to the
/// kink than this margin are resampled, because a central difference across
/// the kink measures the average slope rather than the gradient.
const KINK_MARGIN: f64 = 8e-3;
/// Batch-norm divides by the per-channel batch std; tiny stds make the f32
/// forward catastrophically cancel, so such evaluation points are resampled.
const BN_STD_MARGIN: f64 = 0.1;
/// L2 normalization scales gradients by 1/norm; near-zero embeddings blow up
/// both the truncation error of the difference quotient and the f32 noise.
const NORM_MARGIN: f64 = 0.3;

/// Conditioning of an evaluation point for finite differencing.
#[derive(Clone, Copy)]
struct Conditioning {
    kink: f64,
    bn_std: f64,
    embed_norm: f64,
}

impl Conditioning {
    fn fresh() -> Self {
        Conditioning { kink: f64::INFINITY, bn_std: f64::INFINITY, embed_norm: f64::INFINITY }
    }

    fn acceptable(&self, loss: f64) -> bool {
        loss.is_finite()
            && self.kink >= KINK_MARGIN
            && self.bn_std >= BN_STD_MARGIN
            && self.embed_norm >= NORM_MARGIN
    }
}

fn track_margin(xs: &[f64], margin: &mut f64) {
    for &x in xs {
        *margin = margin.min(x.abs());
    }
}

/// Smallest per-channel std over `channels` groups where the channel of
/// element `i` is `chan(i)` and each channel holds `count` elements.
fn track_bn_std(xs: &[f64], channels: usize, chan: impl Fn(usize) -> usize, slot: &mut f64) {
    let mut sum = vec![0.0f64; channels];
    let mut sum2 = vec![0.0f64; channels];
    let mut count = vec![0usize; channels];
    for (i, &x) in xs.iter().enumerate() {
        let c = chan(i);
        sum[c] += x;
        sum2[c] += x * x;
        count[c] += 1;
    }
    for c in 0..channels {
        let n = count[c] as f64;
        let var = (sum2[c] / n - (sum[c] / n) * (sum[c] / n)).max(0.0);
        *slot = slot.min(var.sqrt());
    }
}

/// Mirror of the conditional encoder forward in f64, driven by a flat
/// parameter vector laid out as the tape bindings report them.
struct EncOracle {
    cfg: ModelConfig,
    batch: usize,
    patches: Vec<f64>,
    centers: Vec<f64>,
}

impl EncOracle {
    fn conditioning(&self, p: &[f64]) -> Conditioning {
        let mut cond = Conditioning::fresh();
        self.forward_tracked(p, Some(&mut cond));
        cond
    }

    fn forward(&self, p: &[f64]) -> Vec<f64> {
        self.forward_tracked(p, None)
    }

    /// Parameter layout: conv weights, then per-conv gamma/beta, then dense
    /// weight/bias pairs, in network order.
    fn forward_tracked(&self, p: &[f64], mut margin: Option<&mut Conditioning>) -> Vec<f64> {
        let b = self.batch;
        let mut at = 0;
        let take = |n: usize, at: &mut usize| -> Vec<f64> {
            let out = p[*at..*at + n].to_vec();
            *at += n;
            out
        };
        let mut x = self.patches.clone();
        let mut cin = 1usize;
        let mut dim = self.cfg.patch_size;
        for (i, (&cout, &stride)) in
            self.cfg.conv_channels.iter().zip(&self.cfg.conv_strides).enumerate()
        {
            let _ = i;
            let w = take(cout * cin * 27, &mut at);
            let gamma = take(cout, &mut at);
            let beta = take(cout, &mut at);
            x = oracle::conv3d(&x, &w, [b, cin, dim, dim, dim], cout, stride);
            dim = (dim + 2 - 3) / stride + 1;
            if let Some(m) = margin.as_deref_mut() {
                let spatial = dim * dim * dim;
                track_bn_std(&x, cout, |i| (i / spatial) % cout, &mut m.bn_std);
            }
            x = oracle::batch_norm_channels(&x, &gamma, &beta, b, cout, dim * dim * dim);
            x = oracle::elu(&x);
            cin = cout;
        }
        let fc = cin * dim * dim * dim;
        // concat centers per batch row
        let mut rows = Vec::with_capacity(b * (fc + 3));
        for bi in 0..b {
            rows.extend_from_slice(&x[bi * fc..(bi + 1) * fc]);
            rows.extend_from_slice(&self.centers[bi * 3..(bi + 1) * 3]);
        }
        let mut width = fc + 3;
        let mut h = rows;
        for layer in 0..3 {
            let out_w = if layer == 2 { self.cfg.feature_dim } else { width };
            let w = take(width * out_w, &mut at);
            let bias = take(out_w, &mut at);
            h = oracle::dense(&h, &w, &bias, b, width, out_w);
            if layer < 2 {
                if let Some(m) = margin.as_deref_mut() {
                    track_margin(&h, &mut m.kink);
                }
                h = oracle::relu(&h);
            }
            width = out_w;
        }
        assert_eq!(at, p.len(), "oracle consumed all parameters");
        if let Some(m) = margin.as_deref_mut() {
            for row in h.chunks(self.cfg.feature_dim) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                m.embed_norm = m.embed_norm.min(norm);
            }
        }
        oracle::l2_normalize(&h, b, self.cfg.feature_dim)
    }
}

/// Flatten encoder parameters in the same order the oracle consumes them.
fn pack_encoder(enc: &EncoderParams) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &enc.convs {
        out.extend(to_f64(layer.weight.data()));
        out.extend(to_f64(layer.bn.gamma.data()));
        out.extend(to_f64(layer.bn.beta.data()));
    }
    for layer in &enc.fl {
        out.extend(to_f64(layer.weight.data()));
        out.extend(to_f64(layer.bias.data()));
    }
    out
}

fn unpack_grads_like_encoder(
    enc: &EncoderParams,
    grads: &anatgraph_core::tape::Gradients,
    bindings: &[(String, Var)],
) -> Vec<f32> {
    let by_name: std::collections::BTreeMap<&str, Var> =
        bindings.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let mut out = Vec::new();
    let mut push = |name: String, len: usize| {
        let var = by_name[name.as_str()];
        let g = grads.tensor(var).expect("gradient present");
        assert_eq!(g.numel(), len);
        out.extend_from_slice(g.data());
    };
    for (i, layer) in enc.convs.iter().enumerate() {
        push(format!("enc.q.c{i}.w"), layer.weight.numel());
        push(format!("enc.q.c{i}.bn.gamma"), layer.bn.gamma.numel());
        push(format!("enc.q.c{i}.bn.beta"), layer.bn.beta.numel());
    }
    for (i, layer) in enc.fl.iter().enumerate() {
        push(format!("enc.q.fl{i}.w"), layer.weight.numel());
        push(format!("enc.q.fl{i}.b"), layer.bias.numel());
    }
    out
}

pub fn check_full_patch_loss(seeds: u64) {
    for seed in 0..seeds {
        let mut attempt = seed;
        let (cfg, mut enc, patches, centers, keys, negs, oracle_net, params) = loop {
            let mut rng = rng_for("full_ll", attempt);
            let cfg = ModelConfig::mini(5);
            let enc =
                EncoderParams::init(&cfg, Stream::root(attempt).derive("enc_init")).unwrap();
            let b = 2usize;
            let s = cfg.patch_size;
            let f = cfg.feature_dim;
            let patches =
                Tensor::new(&[b, 1, s, s, s], rand_vec(&mut rng, b * s * s * s, 0.5)).unwrap();
            let centers = Tensor::new(&[b, 3], rand_vec(&mut rng, b * 3, 0.5)).unwrap();
            // fixed unit keys and negatives (the key branch carries no gradient)
            let keys = Tensor::new(
                &[b, f],
                to_f64(&rand_vec(&mut rng, b * f, 1.0))
                    .chunks(f)
                    .flat_map(|row| {
                        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        row.iter().map(|v| (v / n) as f32).collect::<Vec<_>>()
                    })
                    .collect(),
            )
            .unwrap();
            let negs = Tensor::new(&[4, f], rand_vec(&mut rng, 4 * f, 0.7)).unwrap();
            let oracle_net = EncOracle {
                cfg: cfg.clone(),
                batch: b,
                patches: to_f64(patches.data()),
                centers: to_f64(centers.data()),
            };
            let params = pack_encoder(&enc);
            let cond = oracle_net.conditioning(&params);
            let base_loss = {
                let q = oracle_net.forward(&params);
                let keys64 = to_f64(keys.data());
                let negs64 = to_f64(negs.data());
                (0..b)
                    .map(|bi| {
                        oracle::info_nce(
                            &q[bi * f..(bi + 1) * f],
                            &keys64[bi * f..(bi + 1) * f],
                            &negs64,
                            f,
                            0.2,
                        )
                    })
                    .sum::<f64>()
            };
            if cond.acceptable(base_loss) {
                break (cfg, enc, patches, centers, keys, negs, oracle_net, params);
            }
            attempt += 1000;
            assert!(attempt < seed + 50_000, "no well-conditioned evaluation point found");
        };
        let b = 2usize;
        let f = cfg.feature_dim;
        let tau = 0.2f32;

        let mut tape = Tape::new();
        let loss_var;
        let bindings;
        {
            let mut ctx = FwdCtx::new(&mut tape, BnMode::Train { update_running: false }, true);
            let h = enc.forward(&mut ctx, "enc.q", &patches, &centers).unwrap();
            let q = ctx.tape.l2_normalize(h).unwrap();
            let kv = ctx.tape.constant(&keys);
            loss_var = ctx.tape.info_nce(q, kv, &negs, tau).unwrap();
            bindings = ctx.bindings;
        }
        let grads = tape.backward(loss_var).unwrap();
        let ad = unpack_grads_like_encoder(&enc, &grads, &bindings);

        let keys64 = to_f64(keys.data());
        let negs64 = to_f64(negs.data());
        let fd = oracle::central_diff(
            |p| {
                let q = oracle_net.forward(p);
                let mut total = 0.0;
                for bi in 0..b {
                    total += oracle::info_nce(
                        &q[bi * f..(bi + 1) * f],
                        &keys64[bi * f..(bi + 1) * f],
                        &negs64,
                        f,
                        tau as f64,
                    );
                }
                total / b as f64
            },
            &params,
            EPS,
        );
        let loss_fn = |p: &[f64]| {
            let q = oracle_net.forward(p);
            let mut total = 0.0;
            for bi in 0..b {
                total += oracle::info_nce(
                    &q[bi * f..(bi + 1) * f],
                    &keys64[bi * f..(bi + 1) * f],
                    &negs64,
                    f,
                    tau as f64,
                );
            }
            total / b as f64
        };
        assert_close_refining("full_patch_loss", seed, &ad, &fd, &params, loss_fn);
    }
}

pub fn check_full_graph_loss(seeds: u64) {
    let n = 3usize;
    let tau = 0.2f32;

    // f64 mirror of the graph branch; tracks ReLU kink margins when asked
    #[allow(clippy::too_many_arguments)]
    fn graph_oracle(
        p: &[f64],
        f: usize,
        n: usize,
        a64: &[f64],
        h64: &[f64],
        key64: &[f64],
        negs64: &[f64],
        tau: f64,
        mut margin: Option<&mut Conditioning>,
    ) -> f64 {
        let mut at = 0;
        let take = |k: usize, at: &mut usize| {
            let out = p[*at..*at + k].to_vec();
            *at += k;
            out
        };
        let w = take(f * f, &mut at);
        let gamma = take(f, &mut at);
        let beta = take(f, &mut at);
        let mixed = oracle::matmul(a64, h64, n, n, f);
        let projected = oracle::matmul(&mixed, &w, n, f, f);
        if let Some(m) = margin.as_deref_mut() {
            track_bn_std(&projected, f, |i| i % f, &mut m.bn_std);
        }
        let normed = oracle::batch_norm_rows(&projected, &gamma, &beta, n, f);
        let hp = oracle::elu(&normed);
        let pooled = oracle::col_mean(&hp, n, f);
        let mut x = pooled;
        for layer in 0..3 {
            let w = take(f * f, &mut at);
            let bias = take(f, &mut at);
            x = oracle::dense(&x, &w, &bias, 1, f, f);
            if layer < 2 {
                if let Some(m) = margin.as_deref_mut() {
                    track_margin(&x, &mut m.kink);
                }
                x = oracle::relu(&x);
            }
        }
        assert_eq!(at, p.len());
        if let Some(m) = margin.as_deref_mut() {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.embed_norm = m.embed_norm.min(norm);
        }
        let r = oracle::l2_normalize(&x, 1, f);
        oracle::info_nce(&r, key64, negs64, f, tau)
    }

    for seed in 0..seeds {
        let cfg = ModelConfig::mini(4);
        let f = cfg.feature_dim;
        let centers = [[0.0f32; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let a_norm = normalize_adjacency(&build_adjacency(&centers, 1.5).unwrap()).unwrap();
        let a64 = to_f64(a_norm.data());

        let mut attempt = seed;
        let (mut gcn, h, key, negs) = loop {
            let mut rng = rng_for("full_lg", attempt);
            let gcn =
                GraphParams::init(&cfg, Stream::root(attempt).derive("gcn_init")).unwrap();
            let h = Tensor::new(&[n, f], rand_vec(&mut rng, n * f, 1.0)).unwrap();
            let key = {
                let raw = rand_vec(&mut rng, f, 1.0);
                let norm = raw.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
                Tensor::new(&[f], raw.iter().map(|v| (*v as f64 / norm) as f32).collect())
                    .unwrap()
            };
            let negs = Tensor::new(&[3, f], rand_vec(&mut rng, 3 * f, 0.7)).unwrap();
            let mut params: Vec<f64> = to_f64(gcn.proj.data());
            params.extend(to_f64(gcn.bn.gamma.data()));
            params.extend(to_f64(gcn.bn.beta.data()));
            for layer in &gcn.fg {
                params.extend(to_f64(layer.weight.data()));
                params.extend(to_f64(layer.bias.data()));
            }
            let mut cond = Conditioning::fresh();
            let base_loss = graph_oracle(
                &params,
                f,
                n,
                &a64,
                &to_f64(h.data()),
                &to_f64(key.data()),
                &to_f64(negs.data()),
                tau as f64,
                Some(&mut cond),
            );
            if cond.acceptable(base_loss) {
                break (gcn, h, key, negs);
            }
            attempt += 1000;
            assert!(attempt < seed + 50_000, "no well-conditioned evaluation point found");
        };

        let mut tape = Tape::new();
        let loss_var;
        let bindings;
        {
            let mut ctx = FwdCtx::new(&mut tape, BnMode::Train { update_running: false }, true);
            let hv = ctx.tape.constant(&h);
            let hp = gcn.gcn_forward(&mut ctx, "gcn.q", hv, &a_norm).unwrap();
            let emb = gcn.embed(&mut ctx, "gcn.q", hp, true).unwrap();
            let r = ctx.tape.l2_normalize(emb).unwrap();
            let kv = ctx.tape.constant(&key);
            loss_var = ctx.tape.info_nce(r, kv, &negs, tau).unwrap();
            bindings = ctx.bindings;
        }
        let grads = tape.backward(loss_var).unwrap();

        // pack: proj, bn gamma, bn beta, fg layers
        let by_name: std::collections::BTreeMap<&str, Var> =
            bindings.iter().map(|(nm, v)| (nm.as_str(), *v)).collect();
        let mut ad: Vec<f32> = Vec::new();
        let mut params: Vec<f64> = Vec::new();
        let push = |name: &str, t: &Tensor, ad: &mut Vec<f32>, params: &mut Vec<f64>| {
            params.extend(to_f64(t.data()));
            ad.extend_from_slice(grads.tensor(by_name[name]).unwrap().data());
        };
        push("gcn.q.w", &gcn.proj, &mut ad, &mut params);
        push("gcn.q.gcn.bn.gamma", &gcn.bn.gamma, &mut ad, &mut params);
        push("gcn.q.gcn.bn.beta", &gcn.bn.beta, &mut ad, &mut params);
        for (i, layer) in gcn.fg.iter().enumerate() {
            push(&format!("gcn.q.fg{i}.w"), &layer.weight, &mut ad, &mut params);
            push(&format!("gcn.q.fg{i}.b"), &layer.bias, &mut ad, &mut params);
        }

        let h64 = to_f64(h.data());
        let key64 = to_f64(key.data());
        let negs64 = to_f64(negs.data());
        let fd = oracle::central_diff(
            |p| graph_oracle(p, f, n, &a64, &h64, &key64, &negs64, tau as f64, None),
            &params,
            EPS,
        );
        assert_close_refining("full_graph_loss", seed, &ad, &fd, &params, |p| {
            graph_oracle(p, f, n, &a64, &h64, &key64, &negs64, tau as f64, None)
        });
    }
}
