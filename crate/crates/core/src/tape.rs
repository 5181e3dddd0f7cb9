//! Reverse-mode gradient tape over [`Tensor`] operations.
//!
//! A [`Tape`] records each primitive applied during a forward pass together
//! with whatever state its vector-Jacobian product needs, then replays the
//! record backwards from a scalar loss. The op set is exactly what the
//! networks here use: dense matmul, 3x3x3 convolution (stride 1 or 2, zero
//! padding 1), batch normalization, ELU/ReLU/sigmoid, row L2 normalization,
//! column mean pooling, concatenation, and an InfoNCE head with constant
//! negatives.
//!
//! Every op validates shapes and rejects non-finite outputs. Values are f32;
//! the finite-difference oracles that certify these gradients live in the test
//! suites and run in f64.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{at2, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_STATS_MOMENTUM: f32 = 0.1;
const L2_MIN_NORM: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-normalization execution mode.
///
/// `Train { update_running: false }` normalizes with batch statistics without
/// touching the running estimates; the momentum (key) networks and the
/// no-gradient encoder passes of the graph phase run in this mode so their
/// parameter blocks stay bit-identical.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train { update_running: bool },
    Eval,
}

struct BnSaved {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    mode: BnMode,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Scale(usize, f32),
    Matmul(usize, usize),
    Conv3d { x: usize, w: usize, stride: usize },
    AddRowBias(usize, usize),
    Relu(usize),
    Elu(usize),
    Sigmoid(usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, saved: Option<BnSaved> },
    L2NormRows { x: usize, inv_norms: Vec<f32> },
    ColMean(usize),
    ConcatCols(usize, usize),
    RowSlice { x: usize, row: usize },
    Reshape(usize),
    InfoNce { q: usize, k: usize, negs: Tensor, tau: f32, probs: Option<Vec<f32>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of looking up the gradient of one tape variable.
///
/// `Absent` means the variable never participated in the loss subgraph; it is
/// distinct from a stored all-zero gradient.
pub enum ParamGrad<'a> {
    Absent,
    Present(&'a Tensor),
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> ParamGrad<'_> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(t) => ParamGrad::Present(t),
            None => ParamGrad::Absent,
        }
    }

    pub fn tensor(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.clone(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    fn finish(&mut self, op_name: &'static str, value: Tensor, op: Op, req: bool) -> Result<Var> {
        value.ensure_finite(op_name)?;
        Ok(self.push(value, op, req))
    }

    /// Element-wise sum of two tensors with identical dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.dims() != tb.dims() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.dims(), tb.dims())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.dims(), data)?;
        let req = self.req(a) || self.req(b);
        self.finish("add", value, Op::Add(a.0, b.0), req)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.dims(), ta.data().iter().map(|x| x * c).collect())?;
        let req = self.req(a);
        self.finish("scale", value, Op::Scale(a.0, c), req)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.dims(), tb.dims())));
        }
        let (m, k) = (ta.dims()[0], ta.dims()[1]);
        let (k2, n) = (tb.dims()[0], tb.dims()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims disagree: {:?} x {:?}", ta.dims(), tb.dims()),
            ));
        }
        let mut out = vec![0.0f32; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[at2(k, i, p)];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let req = self.req(a) || self.req(b);
        self.finish("matmul", value, Op::Matmul(a.0, b.0), req)
    }

    /// 3D cross-correlation with 3x3x3 kernels, zero padding 1, stride 1 or 2.
    ///
    /// `x` is `[C_in, D, H, W]` or batched `[B, C_in, D, H, W]`; `w` is
    /// `[C_out, C_in, 3, 3, 3]`. Output spatial dims follow
    /// `floor((d + 2 - 3) / stride) + 1`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if stride != 1 && stride != 2 {
            return Err(Error::shape("conv3d", format!("stride {stride} not in {{1,2}}")));
        }
        if tw.rank() != 5 || tw.dims()[2] != 3 || tw.dims()[3] != 3 || tw.dims()[4] != 3 {
            return Err(Error::shape("conv3d", format!("kernel dims {:?}", tw.dims())));
        }
        let batched = match tx.rank() {
            4 => false,
            5 => true,
            r => return Err(Error::shape("conv3d", format!("input rank {r}"))),
        };
        let (bsz, cin, d, h, wd) = if batched {
            let s = tx.dims();
            (s[0], s[1], s[2], s[3], s[4])
        } else {
            let s = tx.dims();
            (1, s[0], s[1], s[2], s[3])
        };
        let (cout, kcin) = (tw.dims()[0], tw.dims()[1]);
        if kcin != cin {
            return Err(Error::shape(
                "conv3d",
                format!("input channels {cin} vs kernel channels {kcin}"),
            ));
        }
        let (od, oh, ow) = (conv_out(d, stride), conv_out(h, stride), conv_out(wd, stride));
        let out_dims: Vec<usize> = if batched {
            vec![bsz, cout, od, oh, ow]
        } else {
            vec![cout, od, oh, ow]
        };
        let mut out = vec![0.0f32; bsz * cout * od * oh * ow];
        conv3d_forward(
            tx.data(),
            tw.data(),
            &mut out,
            [bsz, cin, d, h, wd],
            [cout, od, oh, ow],
            stride,
        );
        let value = Tensor::new(&out_dims, out)?;
        let req = self.req(x) || self.req(w);
        self.finish("conv3d", value, Op::Conv3d { x: x.0, w: w.0, stride }, req)
    }

    /// `[R,C] + [C]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if tx.rank() != 2 || tb.rank() != 1 || tx.dims()[1] != tb.dims()[0] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", tx.dims(), tb.dims()),
            ));
        }
        let (r, c) = (tx.dims()[0], tx.dims()[1]);
        let mut out = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[at2(c, i, j)] += tb.data()[j];
            }
        }
        let value = Tensor::new(&[r, c], out)?;
        let req = self.req(x) || self.req(b);
        self.finish("add_row_bias", value, Op::AddRowBias(x.0, b.0), req)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let value = Tensor::new(tx.dims(), tx.data().iter().map(|&v| v.max(0.0)).collect())?;
        let req = self.req(x);
        self.finish("relu", value, Op::Relu(x.0), req)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { libm::expf(v) - 1.0 })
            .collect();
        let value = Tensor::new(tx.dims(), data)?;
        let req = self.req(x);
        self.finish("elu", value, Op::Elu(x.0), req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| sigmoid_f32(v)).collect();
        let value = Tensor::new(tx.dims(), data)?;
        let req = self.req(x);
        self.finish("sigmoid", value, Op::Sigmoid(x.0), req)
    }

    /// Per-channel batch normalization with epsilon 1e-5.
    ///
    /// Rank-2 input `[R, C]` normalizes each column over rows; rank-5 input
    /// `[B, C, D, H, W]` normalizes each channel over batch and space. In
    /// train mode the leading dim must be >= 2 and the returned pair holds the
    /// updated running statistics when `update_running` is set (momentum 0.1,
    /// biased variance); the caller owns writing them back.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        mode: BnMode,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let tx = &self.nodes[x.0].value;
        let (channels, count, layout) = match tx.rank() {
            2 => (tx.dims()[1], tx.dims()[0], BnLayout::Rows { r: tx.dims()[0], c: tx.dims()[1] }),
            5 => {
                let s = tx.dims();
                let spatial = s[2] * s[3] * s[4];
                (s[1], s[0] * spatial, BnLayout::Channels { b: s[0], c: s[1], spatial })
            }
            r => return Err(Error::shape("batch_norm", format!("input rank {r}"))),
        };
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tg.dims() != [channels] || tb.dims() != [channels] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta dims {:?}/{:?} for {channels} channels", tg.dims(), tb.dims()),
            ));
        }
        if running.0.dims() != [channels] || running.1.dims() != [channels] {
            return Err(Error::shape("batch_norm", "running stats dims"));
        }
        if matches!(mode, BnMode::Train { .. }) && tx.dims()[0] < 2 {
            return Err(Error::Degenerate {
                op: "batch_norm",
                detail: format!("train mode requires batch >= 2, got {}", tx.dims()[0]),
            });
        }
        let _ = count;

        // Per-channel statistics: batch moments in train mode, running in eval.
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BnMode::Train { .. } => layout.moments(tx.data(), channels),
            BnMode::Eval => (running.0.data().to_vec(), running.1.data().to_vec()),
        };
        let inv_std: Vec<f32> =
            var.iter().map(|&v| 1.0 / libm::sqrtf(v + BN_EPS)).collect();

        let n = tx.numel();
        let mut xhat = vec![0.0f32; n];
        let mut out = vec![0.0f32; n];
        layout.for_each(channels, |c, i| {
            let xh = (tx.data()[i] - mean[c]) * inv_std[c];
            xhat[i] = xh;
            out[i] = tg.data()[c] * xh + tb.data()[c];
        });

        let updated = match mode {
            BnMode::Train { update_running: true } => {
                let m = BN_STATS_MOMENTUM;
                let rm: Vec<f32> = running
                    .0
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                let rv: Vec<f32> = running
                    .1
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                Some((Tensor::new(&[channels], rm)?, Tensor::new(&[channels], rv)?))
            }
            _ => None,
        };

        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let saved = req.then_some(BnSaved { xhat, inv_std, mode });
        let value = Tensor::new(tx.dims(), out)?;
        let var_id =
            self.finish("batch_norm", value, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, saved }, req)?;
        Ok((var_id, updated))
    }

    /// L2-normalize a vector `[F]` or each row of `[R, F]`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let f = match tx.rank() {
            1 => tx.dims()[0],
            2 => tx.dims()[1],
            r => return Err(Error::shape("l2_normalize", format!("input rank {r}"))),
        };
        let rows = tx.numel() / f;
        let mut out = vec![0.0f32; tx.numel()];
        let mut inv_norms = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &tx.data()[r * f..(r + 1) * f];
            let norm = libm::sqrt(row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
            if norm <= L2_MIN_NORM {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: format!("row {r} has norm {norm:e}"),
                });
            }
            let inv = (1.0 / norm) as f32;
            inv_norms[r] = inv;
            for j in 0..f {
                out[r * f + j] = row[j] * inv;
            }
        }
        let value = Tensor::new(tx.dims(), out)?;
        let req = self.req(x);
        self.finish("l2_normalize", value, Op::L2NormRows { x: x.0, inv_norms }, req)
    }

    /// Column mean of `[R, F]` -> `[F]` (global average pooling over rows).
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::shape("col_mean", format!("input rank {}", tx.rank())));
        }
        let (r, f) = (tx.dims()[0], tx.dims()[1]);
        let mut out = vec![0.0f32; f];
        for i in 0..r {
            for j in 0..f {
                out[j] += tx.data()[at2(f, i, j)];
            }
        }
        let inv = 1.0 / r as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[f], out)?;
        let req = self.req(x);
        self.finish("col_mean", value, Op::ColMean(x.0), req)
    }

    /// Concatenate along the feature axis: `[R,a] ++ [R,b] -> [R,a+b]`, or
    /// plain vector concatenation for rank-1 inputs.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match (ta.rank(), tb.rank()) {
            (1, 1) => {
                let mut data = ta.data().to_vec();
                data.extend_from_slice(tb.data());
                Tensor::new(&[ta.dims()[0] + tb.dims()[0]], data)?
            }
            (2, 2) => {
                if ta.dims()[0] != tb.dims()[0] {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("{:?} vs {:?}", ta.dims(), tb.dims()),
                    ));
                }
                let (r, ca, cb) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                let mut data = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
                }
                Tensor::new(&[r, ca + cb], data)?
            }
            (ra, rb) => {
                return Err(Error::shape("concat_cols", format!("ranks {ra}/{rb}")));
            }
        };
        let req = self.req(a) || self.req(b);
        self.finish("concat_cols", value, Op::ConcatCols(a.0, b.0), req)
    }

    /// Extract row `r` of `[R, F]` as a rank-1 `[F]` vector.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || r >= tx.dims()[0] {
            return Err(Error::shape("row", format!("row {r} of {:?}", tx.dims())));
        }
        let f = tx.dims()[1];
        let value = Tensor::new(&[f], tx.data()[r * f..(r + 1) * f].to_vec())?;
        let req = self.req(x);
        self.finish("row", value, Op::RowSlice { x: x.0, row: r }, req)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(dims)?;
        let req = self.req(x);
        self.finish("reshape", value, Op::Reshape(x.0), req)
    }

    /// InfoNCE loss with constant negatives.
    ///
    /// `q` and `k` are `[F]` or `[B, F]`; `negs` is `[K, F]` with `K >= 1` and
    /// carries no gradient. Returns the mean over the batch of
    /// `-log( exp(q.k/tau) / (exp(q.k/tau) + sum_i exp(q.n_i/tau)) )`,
    /// computed with max subtraction.
    pub fn info_nce(&mut self, q: Var, k: Var, negs: &Tensor, tau: f32) -> Result<Var> {
        if tau <= 0.0 {
            return Err(Error::config(format!("info_nce temperature {tau} must be positive")));
        }
        let (tq, tk) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
        if tq.dims() != tk.dims() {
            return Err(Error::shape("info_nce", format!("{:?} vs {:?}", tq.dims(), tk.dims())));
        }
        let f = match tq.rank() {
            1 => tq.dims()[0],
            2 => tq.dims()[1],
            r => return Err(Error::shape("info_nce", format!("query rank {r}"))),
        };
        if negs.rank() != 2 || negs.dims()[1] != f {
            return Err(Error::shape(
                "info_nce",
                format!("negatives {:?} for feature dim {f}", negs.dims()),
            ));
        }
        let kn = negs.dims()[0];
        if kn == 0 {
            return Err(Error::Degenerate { op: "info_nce", detail: "no negatives".into() });
        }
        let b = tq.numel() / f;
        let mut probs = vec![0.0f32; b * (kn + 1)];
        let mut total = 0.0f64;
        for bi in 0..b {
            let qrow = &tq.data()[bi * f..(bi + 1) * f];
            let krow = &tk.data()[bi * f..(bi + 1) * f];
            let s_pos = dot(qrow, krow) / tau;
            let mut sims = Vec::with_capacity(kn + 1);
            sims.push(s_pos);
            let mut max = s_pos;
            for ni in 0..kn {
                let s = dot(qrow, &negs.data()[ni * f..(ni + 1) * f]) / tau;
                if s > max {
                    max = s;
                }
                sims.push(s);
            }
            let mut z = 0.0f64;
            for &s in &sims {
                z += libm::exp((s - max) as f64);
            }
            for (slot, &s) in probs[bi * (kn + 1)..(bi + 1) * (kn + 1)].iter_mut().zip(&sims) {
                *slot = (libm::exp((s - max) as f64) / z) as f32;
            }
            total += (max as f64) + libm::log(z) - s_pos as f64;
        }
        let loss = (total / b as f64) as f32;
        let req = self.req(q) || self.req(k);
        let value = Tensor::scalar(loss);
        let saved = req.then_some(probs);
        self.finish(
            "info_nce",
            value,
            Op::InfoNce { q: q.0, k: k.0, negs: negs.clone(), tau, probs: saved },
            req,
        )
    }

    /// Reverse pass from a scalar loss. Gradients are accumulated only for
    /// nodes that require them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lnode.value.dims()),
            ));
        }
        if !lnode.requires_grad {
            return Err(Error::config("backward: loss does not depend on any parameter"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(upstream);
                continue;
            }
            self.apply_vjp(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        // Only leaves keep gradients; interior buffers are dropped to bound memory.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, grads, |g| add_into(g, dy.data(), 1.0));
                self.accum(*b, grads, |g| add_into(g, dy.data(), 1.0));
            }
            Op::Scale(a, c) => {
                self.accum(*a, grads, |g| add_into(g, dy.data(), *c));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.dims()[0], ta.dims()[1]);
                let n = tb.dims()[1];
                self.accum(*a, grads, |g| {
                    // dA = dY . B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0f32;
                            for j in 0..n {
                                acc += dy.data()[at2(n, i, j)] * tb.data()[at2(n, p, j)];
                            }
                            g[at2(k, i, p)] += acc;
                        }
                    }
                });
                self.accum(*b, grads, |g| {
                    // dB = A^T . dY
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ta.data()[at2(k, i, p)];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[at2(n, p, j)] += aip * dy.data()[at2(n, i, j)];
                            }
                        }
                    }
                });
            }
            Op::Conv3d { x, w, stride } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (bsz, cin, d, h, wd) = conv_in_dims(tx);
                let cout = tw.dims()[0];
                let (od, oh, ow) = (conv_out(d, *stride), conv_out(h, *stride), conv_out(wd, *stride));
                let shape_in = [bsz, cin, d, h, wd];
                let shape_out = [cout, od, oh, ow];
                let need_dx = self.nodes[*x].requires_grad;
                let need_dw = self.nodes[*w].requires_grad;
                let mut dx = need_dx.then(|| vec![0.0f32; tx.numel()]);
                let mut dw = need_dw.then(|| vec![0.0f32; tw.numel()]);
                conv3d_backward(
                    tx.data(),
                    tw.data(),
                    dy.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    shape_in,
                    shape_out,
                    *stride,
                );
                if let Some(dx) = dx {
                    self.accum(*x, grads, |g| add_into(g, &dx, 1.0));
                }
                if let Some(dw) = dw {
                    self.accum(*w, grads, |g| add_into(g, &dw, 1.0));
                }
            }
            Op::AddRowBias(x, b) => {
                let c = self.nodes[*b].value.numel();
                let r = dy.numel() / c;
                self.accum(*x, grads, |g| add_into(g, dy.data(), 1.0));
                self.accum(*b, grads, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy.data()[at2(c, i, j)];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let tx = &self.nodes[*x].value;
                self.accum(*x, grads, |g| {
                    for (i, &v) in tx.data().iter().enumerate() {
                        if v > 0.0 {
                            g[i] += dy.data()[i];
                        }
                    }
                });
            }
            Op::Elu(x) => {
                // d elu(x) = 1 for x > 0, else elu(x) + 1
                let out = &node.value;
                let tx = &self.nodes[*x].value;
                self.accum(*x, grads, |g| {
                    for i in 0..out.numel() {
                        let d = if tx.data()[i] > 0.0 { 1.0 } else { out.data()[i] + 1.0 };
                        g[i] += dy.data()[i] * d;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = &node.value;
                self.accum(*x, grads, |g| {
                    for i in 0..out.numel() {
                        let y = out.data()[i];
                        g[i] += dy.data()[i] * y * (1.0 - y);
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let saved = saved.as_ref().expect("bn saved state present when grad required");
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gamma].value;
                let channels = tg.numel();
                let layout = bn_layout(tx);
                let count = (tx.numel() / channels) as f32;

                let mut sum_dy = vec![0.0f32; channels];
                let mut sum_dy_xhat = vec![0.0f32; channels];
                layout.for_each(channels, |c, i| {
                    sum_dy[c] += dy.data()[i];
                    sum_dy_xhat[c] += dy.data()[i] * saved.xhat[i];
                });
                self.accum(*gamma, grads, |g| add_into(g, &sum_dy_xhat, 1.0));
                self.accum(*beta, grads, |g| add_into(g, &sum_dy, 1.0));
                self.accum(*x, grads, |g| match saved.mode {
                    BnMode::Train { .. } => layout.for_each(channels, |c, i| {
                        let term = dy.data()[i]
                            - sum_dy[c] / count
                            - saved.xhat[i] * (sum_dy_xhat[c] / count);
                        g[i] += tg.data()[c] * saved.inv_std[c] * term;
                    }),
                    BnMode::Eval => layout.for_each(channels, |c, i| {
                        g[i] += dy.data()[i] * tg.data()[c] * saved.inv_std[c];
                    }),
                });
            }
            Op::L2NormRows { x, inv_norms } => {
                let out = &node.value;
                let f = out.numel() / inv_norms.len();
                self.accum(*x, grads, |g| {
                    for (r, &inv) in inv_norms.iter().enumerate() {
                        let y = &out.data()[r * f..(r + 1) * f];
                        let dyr = &dy.data()[r * f..(r + 1) * f];
                        let proj = dot(dyr, y);
                        for j in 0..f {
                            g[r * f + j] += (dyr[j] - proj * y[j]) * inv;
                        }
                    }
                });
            }
            Op::ColMean(x) => {
                let tx = &self.nodes[*x].value;
                let (r, f) = (tx.dims()[0], tx.dims()[1]);
                let inv = 1.0 / r as f32;
                self.accum(*x, grads, |g| {
                    for i in 0..r {
                        for j in 0..f {
                            g[at2(f, i, j)] += dy.data()[j] * inv;
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if ta.rank() == 1 {
                    let ca = ta.dims()[0];
                    self.accum(*a, grads, |g| add_into(g, &dy.data()[..ca], 1.0));
                    self.accum(*b, grads, |g| add_into(g, &dy.data()[ca..], 1.0));
                } else {
                    let (r, ca, cb) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                    self.accum(*a, grads, |g| {
                        for i in 0..r {
                            for j in 0..ca {
                                g[at2(ca, i, j)] += dy.data()[i * (ca + cb) + j];
                            }
                        }
                    });
                    self.accum(*b, grads, |g| {
                        for i in 0..r {
                            for j in 0..cb {
                                g[at2(cb, i, j)] += dy.data()[i * (ca + cb) + ca + j];
                            }
                        }
                    });
                }
            }
            Op::RowSlice { x, row } => {
                let f = node.value.numel();
                self.accum(*x, grads, |g| {
                    for j in 0..f {
                        g[row * f + j] += dy.data()[j];
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(*x, grads, |g| add_into(g, dy.data(), 1.0));
            }
            Op::InfoNce { q, k, negs, tau, probs } => {
                let probs = probs.as_ref().expect("info_nce probs present when grad required");
                let (tq, tk) = (&self.nodes[*q].value, &self.nodes[*k].value);
                let kn = negs.dims()[0];
                let f = negs.dims()[1];
                let b = tq.numel() / f;
                let coef = dy.data()[0] / b as f32;
                self.accum(*q, grads, |g| {
                    for bi in 0..b {
                        let p = &probs[bi * (kn + 1)..(bi + 1) * (kn + 1)];
                        let krow = &tk.data()[bi * f..(bi + 1) * f];
                        let grow = &mut g[bi * f..(bi + 1) * f];
                        let c0 = coef * (p[0] - 1.0) / tau;
                        for j in 0..f {
                            grow[j] += c0 * krow[j];
                        }
                        for ni in 0..kn {
                            let cn = coef * p[ni + 1] / tau;
                            let nrow = &negs.data()[ni * f..(ni + 1) * f];
                            for j in 0..f {
                                grow[j] += cn * nrow[j];
                            }
                        }
                    }
                });
                self.accum(*k, grads, |g| {
                    for bi in 0..b {
                        let p0 = probs[bi * (kn + 1)];
                        let qrow = &tq.data()[bi * f..(bi + 1) * f];
                        let c = coef * (p0 - 1.0) / tau;
                        for j in 0..f {
                            g[bi * f + j] += c * qrow[j];
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn accum(&self, input: usize, grads: &mut [Option<Tensor>], f: impl FnOnce(&mut [f32])) {
        if !self.nodes[input].requires_grad {
            return;
        }
        let slot = &mut grads[input];
        if slot.is_none() {
            *slot = Some(
                Tensor::zeros(self.nodes[input].value.dims()).expect("grad buffer allocation"),
            );
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
fn add_into(g: &mut [f32], src: &[f32], scale: f32) {
    for i in 0..g.len() {
        g[i] += src[i] * scale;
    }
}

#[inline]
fn sigmoid_f32(v: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-v))
}

/// Output spatial extent for kernel 3, padding 1.
#[inline]
pub fn conv_out(dim: usize, stride: usize) -> usize {
    (dim + 2 - 3) / stride + 1
}

fn conv_in_dims(t: &Tensor) -> (usize, usize, usize, usize, usize) {
    if t.rank() == 5 {
        let s = t.dims();
        (s[0], s[1], s[2], s[3], s[4])
    } else {
        let s = t.dims();
        (1, s[0], s[1], s[2], s[3])
    }
}

/// Valid output-index range `[lo, hi)` such that `o*stride + k - 1` stays
/// inside `[0, in_dim)`.
#[inline]
fn conv_range(k: usize, stride: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    if in_dim + 1 < k + 1 {
        return (0, 0);
    }
    let hi_incl = (in_dim - k) / stride; // largest o with o*stride + k - 1 <= in_dim - 1
    let hi = (hi_incl + 1).min(out_dim);
    (lo.min(hi), hi)
}

fn conv3d_forward(
    x: &[f32],
    w: &[f32],
    out: &mut [f32],
    [bsz, cin, d, h, wd]: [usize; 5],
    [cout, od, oh, ow]: [usize; 4],
    stride: usize,
) {
    let in_sp = d * h * wd;
    let out_sp = od * oh * ow;
    for b in 0..bsz {
        for co in 0..cout {
            let out_base = (b * cout + co) * out_sp;
            for ci in 0..cin {
                let in_base = (b * cin + ci) * in_sp;
                let w_base = (co * cin + ci) * 27;
                for kz in 0..3 {
                    let (z0, z1) = conv_range(kz, stride, d, od);
                    for ky in 0..3 {
                        let (y0, y1) = conv_range(ky, stride, h, oh);
                        for kx in 0..3 {
                            let (x0, x1) = conv_range(kx, stride, wd, ow);
                            let wv = w[w_base + (kz * 3 + ky) * 3 + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oz in z0..z1 {
                                let iz = oz * stride + kz - 1;
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - 1;
                                    let orow = out_base + (oz * oh + oy) * ow;
                                    let irow = in_base + (iz * h + iy) * wd;
                                    for ox in x0..x1 {
                                        // ox*stride + kx >= 1 on the valid range
                                        out[orow + ox] += wv * x[irow + (ox * stride + kx) - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    [bsz, cin, d, h, wd]: [usize; 5],
    [cout, od, oh, ow]: [usize; 4],
    stride: usize,
) {
    let in_sp = d * h * wd;
    let out_sp = od * oh * ow;
    for b in 0..bsz {
        for co in 0..cout {
            let out_base = (b * cout + co) * out_sp;
            for ci in 0..cin {
                let in_base = (b * cin + ci) * in_sp;
                let w_base = (co * cin + ci) * 27;
                for kz in 0..3 {
                    let (z0, z1) = conv_range(kz, stride, d, od);
                    for ky in 0..3 {
                        let (y0, y1) = conv_range(ky, stride, h, oh);
                        for kx in 0..3 {
                            let (x0, x1) = conv_range(kx, stride, wd, ow);
                            let widx = w_base + (kz * 3 + ky) * 3 + kx;
                            let wv = w[widx];
                            let mut wacc = 0.0f32;
                            for oz in z0..z1 {
                                let iz = oz * stride + kz - 1;
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - 1;
                                    let orow = out_base + (oz * oh + oy) * ow;
                                    let irow = in_base + (iz * h + iy) * wd;
                                    for ox in x0..x1 {
                                        let g = dy[orow + ox];
                                        // ox*stride + kx >= 1 on the valid range
                                        let ii = irow + (ox * stride + kx) - 1;
                                        if let Some(dx) = dx.as_deref_mut() {
                                            dx[ii] += wv * g;
                                        }
                                        wacc += x[ii] * g;
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
}

enum BnLayout {
    Rows { r: usize, c: usize },
    Channels { b: usize, c: usize, spatial: usize },
}

fn bn_layout(t: &Tensor) -> BnLayout {
    if t.rank() == 2 {
        BnLayout::Rows { r: t.dims()[0], c: t.dims()[1] }
    } else {
        let s = t.dims();
        BnLayout::Channels { b: s[0], c: s[1], spatial: s[2] * s[3] * s[4] }
    }
}

impl BnLayout {
    /// Visit every element as (channel, flat index).
    fn for_each(&self, channels: usize, mut f: impl FnMut(usize, usize)) {
        match *self {
            BnLayout::Rows { r, c } => {
                debug_assert_eq!(c, channels);
                for i in 0..r {
                    for j in 0..c {
                        f(j, i * c + j);
                    }
                }
            }
            BnLayout::Channels { b, c, spatial } => {
                debug_assert_eq!(c, channels);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            f(ci, base + s);
                        }
                    }
                }
            }
        }
    }

    /// Biased per-channel mean and variance.
    fn moments(&self, data: &[f32], channels: usize) -> (Vec<f32>, Vec<f32>) {
        let mut sum = vec![0.0f64; channels];
        let mut count = vec![0u32; channels];
        self.for_each(channels, |c, i| {
            sum[c] += data[i] as f64;
            count[c] += 1;
        });
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut var = vec![0.0f64; channels];
        self.for_each(channels, |c, i| {
            let d = data[i] as f64 - mean[c];
            var[c] += d * d;
        });
        let mean32 = mean.iter().map(|&m| m as f32).collect();
        let var32 = var.iter().zip(&count).map(|(v, &n)| (v / n as f64) as f32).collect();
        (mean32, var32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use alloc::vec;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let eye = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        let out = tape.matmul(eye, z).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv3d_dirac_kernel_is_identity() {
        let mut rng = Stream::root(1).derive("conv").rng();
        let x = Tensor::from_fn(&[1, 4, 4, 4], |_| rng.uniform_f32() - 0.5).unwrap();
        let mut k = vec![0.0f32; 27];
        k[13] = 1.0; // center tap
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let kv = tape.constant(&t(&[1, 1, 3, 3, 3], &k));
        let out = tape.conv3d(xv, kv, 1).unwrap();
        assert_eq!(tape.value(out).dims(), x.dims());
        for (a, b) in tape.value(out).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv3d_all_ones_counts_neighbors() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 3, 3, 3], 1.0).unwrap());
        let k = tape.constant(&Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap());
        let out = tape.conv3d(x, k, 1).unwrap();
        // center voxel sees the full 3x3x3 neighborhood
        assert_eq!(tape.value(out).data()[at2(3, 1, 1) * 3 + 1], 27.0);
        // corner voxel sees the in-bounds 2x2x2 octant
        assert_eq!(tape.value(out).data()[0], 8.0);
    }

    #[test]
    fn conv3d_stride2_ladder_matches_table() {
        // spatial progression 32 -> 16 -> 8 -> 4 -> 2 -> 1
        let mut dim = 32;
        for expect in [16, 8, 4, 2, 1] {
            dim = conv_out(dim, 2);
            assert_eq!(dim, expect);
        }
    }

    #[test]
    fn conv3d_channel_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 4, 4, 4]).unwrap());
        let k = tape.constant(&Tensor::zeros(&[3, 1, 3, 3, 3]).unwrap());
        assert!(matches!(tape.conv3d(x, k, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[4], &[0.0, -30.0, -3.0, 3.0]));
        let e = tape.elu(x).unwrap();
        assert_eq!(tape.value(e).data()[0], 0.0);
        assert!((tape.value(e).data()[1] + 1.0).abs() < 1e-6); // ELU(-inf) -> -1
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data()[2], 0.0);
        assert_eq!(tape.value(r).data()[3], 3.0);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
    }

    #[test]
    fn batch_norm_constant_channel_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[4, 2], 3.0).unwrap());
        let g = tape.constant(&Tensor::full(&[2], 1.0).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2]).unwrap());
        let rm = Tensor::zeros(&[2]).unwrap();
        let rv = Tensor::full(&[2], 1.0).unwrap();
        let (y, _) = tape
            .batch_norm(x, g, b, (&rm, &rv), BnMode::Train { update_running: false })
            .unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_gamma_zero_broadcasts_beta() {
        let mut tape = Tape::new();
        let mut rng = Stream::root(2).derive("bn").rng();
        let x = tape.constant(&Tensor::from_fn(&[3, 2], |_| rng.uniform_f32()).unwrap());
        let g = tape.constant(&Tensor::zeros(&[2]).unwrap());
        let b = tape.constant(&t(&[2], &[0.5, -0.25]));
        let rm = Tensor::zeros(&[2]).unwrap();
        let rv = Tensor::full(&[2], 1.0).unwrap();
        let (y, _) = tape
            .batch_norm(x, g, b, (&rm, &rv), BnMode::Train { update_running: false })
            .unwrap();
        for row in 0..3 {
            assert_eq!(tape.value(y).data()[row * 2], 0.5);
            assert_eq!(tape.value(y).data()[row * 2 + 1], -0.25);
        }
    }

    #[test]
    fn batch_norm_standardizes_random_batch() {
        let mut tape = Tape::new();
        let mut rng = Stream::root(3).derive("bn2").rng();
        let x = tape.constant(
            &Tensor::from_fn(&[64, 3], |_| rng.gaussian_f32(2.0) + 1.0).unwrap(),
        );
        let g = tape.constant(&Tensor::full(&[3], 1.0).unwrap());
        let b = tape.constant(&Tensor::zeros(&[3]).unwrap());
        let rm = Tensor::zeros(&[3]).unwrap();
        let rv = Tensor::full(&[3], 1.0).unwrap();
        let (y, _) = tape
            .batch_norm(x, g, b, (&rm, &rv), BnMode::Train { update_running: false })
            .unwrap();
        let out = tape.value(y);
        for c in 0..3 {
            let col: Vec<f32> = (0..64).map(|r| out.data()[r * 3 + c]).collect();
            let mean: f32 = col.iter().sum::<f32>() / 64.0;
            let var: f32 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 64.0;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_batch_of_one_in_train() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2]).unwrap());
        let g = tape.constant(&Tensor::full(&[2], 1.0).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2]).unwrap());
        let rm = Tensor::zeros(&[2]).unwrap();
        let rv = Tensor::full(&[2], 1.0).unwrap();
        let res = tape.batch_norm(x, g, b, (&rm, &rv), BnMode::Train { update_running: true });
        assert!(matches!(res, Err(Error::Degenerate { .. })));
        // eval mode accepts single rows
        let res = tape.batch_norm(x, g, b, (&rm, &rv), BnMode::Eval);
        assert!(res.is_ok());
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 1], &[1.0, 3.0])); // mean 2, var 1
        let g = tape.constant(&Tensor::full(&[1], 1.0).unwrap());
        let b = tape.constant(&Tensor::zeros(&[1]).unwrap());
        let rm = Tensor::zeros(&[1]).unwrap();
        let rv = Tensor::full(&[1], 1.0).unwrap();
        let (_, updated) = tape
            .batch_norm(x, g, b, (&rm, &rv), BnMode::Train { update_running: true })
            .unwrap();
        let (nrm, nrv) = updated.unwrap();
        assert!((nrm.data()[0] - 0.2).abs() < 1e-6); // 0.9*0 + 0.1*2
        assert!((nrv.data()[0] - 1.0).abs() < 1e-6); // 0.9*1 + 0.1*1
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-6);
        assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-6);

        // unit vector is a fixed point
        let u = tape.constant(&t(&[2], &[0.0, 1.0]));
        let yu = tape.l2_normalize(u).unwrap();
        assert_eq!(tape.value(yu).data(), &[0.0, 1.0]);

        // random 128-vector has unit norm after normalization
        let mut rng = Stream::root(9).derive("l2").rng();
        let r = Tensor::from_fn(&[128], |_| rng.gaussian_f32(1.0)).unwrap();
        let rv = tape.constant(&r);
        let ry = tape.l2_normalize(rv).unwrap();
        let n: f64 = tape.value(ry).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        assert!((n - 1.0).abs() < 1e-6);

        let z = tape.constant(&t(&[2], &[0.0, 0.0]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn grad_of_sum_is_ones_and_grad_of_half_norm_is_x() {
        // loss = sum(x) via col_mean * R on a [R,1] layout
        let mut tape = Tape::new();
        let x = t(&[3, 1], &[1.0, -2.0, 0.5]);
        let xv = tape.param(&x);
        let m = tape.col_mean(xv).unwrap();
        let s = tape.scale(m, 3.0).unwrap(); // sum = mean * R
        let g = tape.backward(s).unwrap();
        match g.get(xv) {
            ParamGrad::Present(gx) => {
                for &v in gx.data() {
                    assert!((v - 1.0).abs() < 1e-6);
                }
            }
            ParamGrad::Absent => panic!("gradient missing"),
        }

        // loss = ||x||^2 / 2  =>  grad = x, via matmul(x^T, x)
        let mut tape = Tape::new();
        let xv = tape.param(&t(&[1, 3], &[1.0, -2.0, 0.5]));
        let xt = tape.reshape(xv, &[3, 1]).unwrap();
        let prod = tape.matmul(xv, xt).unwrap(); // [1,1] = ||x||^2
        let half = tape.scale(prod, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        let gx = g.tensor(xv).unwrap();
        for (a, b) in gx.data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unused_parameter_reports_absent_not_zero() {
        let mut tape = Tape::new();
        let used = tape.param(&t(&[1], &[2.0]));
        let unused = tape.param(&t(&[1], &[5.0]));
        let loss = tape.scale(used, 3.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(matches!(g.get(used), ParamGrad::Present(_)));
        assert!(matches!(g.get(unused), ParamGrad::Absent));
    }

    #[test]
    fn info_nce_uniform_similarities() {
        // all similarities equal, 1 negative -> ln 2
        let mut tape = Tape::new();
        let q = tape.constant(&t(&[2], &[1.0, 0.0]));
        let k = tape.constant(&t(&[2], &[0.0, 1.0]));
        let negs = t(&[1, 2], &[0.0, 1.0]);
        let loss = tape.info_nce(q, k, &negs, 0.2).unwrap();
        assert!((tape.value(loss).item().unwrap() - core::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn info_nce_separated_pair() {
        // q.k+ = 1, q.k- = 0, tau = 0.2 -> ln(1 + e^-5)
        let mut tape = Tape::new();
        let q = tape.constant(&t(&[2], &[1.0, 0.0]));
        let k = tape.constant(&t(&[2], &[1.0, 0.0]));
        let negs = t(&[1, 2], &[0.0, 1.0]);
        let loss = tape.info_nce(q, k, &negs, 0.2).unwrap();
        let expect = (1.0f64 + (-5.0f64).exp()).ln();
        assert!((tape.value(loss).item().unwrap() as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn info_nce_rejects_empty_negatives_and_bad_tau() {
        let mut tape = Tape::new();
        let q = tape.constant(&t(&[2], &[1.0, 0.0]));
        let k = tape.constant(&t(&[2], &[1.0, 0.0]));
        let negs = t(&[1, 2], &[0.0, 1.0]);
        assert!(tape.info_nce(q, k, &negs, 0.0).is_err());
        assert!(tape.info_nce(q, k, &negs, -1.0).is_err());
        // zero-row negatives cannot be constructed as a Tensor; the guard on
        // K >= 1 is unreachable through the public type, shape errors cover it
        let bad = t(&[2, 3], &[0.0; 6]);
        assert!(tape.info_nce(q, k, &bad, 0.2).is_err());
    }

    #[test]
    fn info_nce_is_invariant_to_negative_order_and_monotone_in_alignment() {
        let mut rng = Stream::root(17).derive("nce").rng();
        let f = 8;
        let qv = Tensor::from_fn(&[f], |_| rng.gaussian_f32(1.0)).unwrap();
        let kv = Tensor::from_fn(&[f], |_| rng.gaussian_f32(1.0)).unwrap();
        let negs: Vec<f32> = (0..5 * f).map(|_| rng.gaussian_f32(1.0)).collect();
        let fwd = |negs: &[f32]| {
            let mut tape = Tape::new();
            let q = tape.constant(&qv);
            let k = tape.constant(&kv);
            let n = t(&[5, f], negs);
            let l = tape.info_nce(q, k, &n, 0.2).unwrap();
            tape.value(l).item().unwrap()
        };
        let base = fwd(&negs);
        // permute negative rows
        let mut perm = negs.clone();
        perm.rotate_left(2 * f);
        assert_eq!(base, fwd(&perm));

        // increasing q.k+ strictly decreases the loss across a tau grid
        for tau in [0.1f32, 0.2, 0.5, 1.0] {
            let mut prev = f32::INFINITY;
            for scale in [0.0f32, 0.5, 1.0, 2.0] {
                let mut tape = Tape::new();
                let q = tape.constant(&qv);
                let mut kd = qv.data().to_vec();
                for (i, v) in kd.iter_mut().enumerate() {
                    *v = kv.data()[i] + scale * qv.data()[i];
                }
                let k = tape.constant(&t(&[f], &kd));
                let n = t(&[5, f], &negs);
                let l = tape.info_nce(q, k, &n, tau).unwrap();
                let val = tape.value(l).item().unwrap();
                assert!(val < prev, "tau {tau} scale {scale}: {val} !< {prev}");
                prev = val;
            }
        }
    }

    #[test]
    fn info_nce_is_stable_at_extreme_similarities() {
        // unit-norm features bound |q.k| by 1, so logits reach 1/tau = 5;
        // push far beyond that to exercise max subtraction
        let mut tape = Tape::new();
        let q = tape.constant(&t(&[2], &[60.0, 0.0]));
        let k = tape.constant(&t(&[2], &[60.0, 0.0]));
        let negs = t(&[2, 2], &[-60.0, 0.0, 0.0, 60.0]);
        let loss = tape.info_nce(q, k, &negs, 0.2).unwrap();
        assert!(tape.value(loss).item().unwrap().is_finite());
    }

    #[test]
    fn concat_row_slice_and_bias_round_trip() {
        let mut tape = Tape::new();
        let a = tape.param(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(&t(&[2, 1], &[5.0, 6.0]));
        let cat = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(cat).dims(), &[2, 3]);
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let r1 = tape.row(cat, 1).unwrap();
        assert_eq!(tape.value(r1).data(), &[3.0, 4.0, 6.0]);

        let bias = tape.param(&t(&[3], &[1.0, 1.0, -1.0]));
        let shifted = tape.add_row_bias(cat, bias).unwrap();
        assert_eq!(tape.value(shifted).data()[0], 2.0);

        // gradient splits back to the two concat operands
        let pooled = tape.col_mean(shifted).unwrap();
        let total = tape.reshape(pooled, &[1, 3]).unwrap();
        let ones = tape.constant(&t(&[3, 1], &[1.0, 1.0, 1.0]));
        let s = tape.matmul(total, ones).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.tensor(a).unwrap().dims(), &[2, 2]);
        assert_eq!(g.tensor(b).unwrap().dims(), &[2, 1]);
        assert_eq!(g.tensor(bias).unwrap().dims(), &[3]);
    }
}
