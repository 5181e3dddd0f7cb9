//! The conditional patch encoder `E(x, p) = f_l(C(x) || p)`, the graph encoder
//! `G` (one GCN layer, BatchNorm+ELU, mean pooling, MLP head `f_g`), and the
//! momentum (key) copies of both.
//!
//! `C` is a stack of 3x3x3 convolutions, each followed by BatchNorm and ELU,
//! whose strides walk the patch down to a small spatial extent before
//! flattening; `f_l` is three dense layers (ReLU between) whose input is the
//! flattened CNN feature concatenated with the patch's atlas-frame center.
//! All layer shapes are fixed at construction from [`ModelConfig`], so any
//! incompatibility is a configuration error before the first forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{conv_out, BnMode, Tape, Var};
use crate::tensor::Tensor;

/// Architecture and embedding hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Patch edge length in voxels.
    pub patch_size: usize,
    /// Output channels of each conv layer of `C`.
    pub conv_channels: Vec<usize>,
    /// Stride (1 or 2) of each conv layer, parallel to `conv_channels`.
    pub conv_strides: Vec<usize>,
    /// Representation dimension F.
    pub feature_dim: usize,
    /// Key-encoder momentum m.
    pub momentum: f32,
    /// L2-normalize embeddings before the contrastive losses.
    pub normalize_embeddings: bool,
}

impl ModelConfig {
    /// CPU-tractable default: 16^3 patches, channel ladder 4-8-16-32, F = 32.
    pub fn desk_scale() -> Self {
        ModelConfig {
            patch_size: 16,
            conv_channels: vec![4, 8, 16, 32],
            conv_strides: vec![2, 2, 2, 2],
            feature_dim: 32,
            momentum: 0.999,
            normalize_embeddings: true,
        }
    }

    /// The full-size network: 32^3 patches walked down 32-16-8-4-2-1, F = 128.
    pub fn paper_scale() -> Self {
        ModelConfig {
            patch_size: 32,
            conv_channels: vec![8, 8, 16, 16, 16, 32, 32, 32, 64, 64, 64, 128, 128],
            conv_strides: vec![1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 2, 1, 2],
            feature_dim: 128,
            momentum: 0.999,
            normalize_embeddings: true,
        }
    }

    /// Tiny configuration for gradient checks on 4^3 patches.
    pub fn mini(feature_dim: usize) -> Self {
        ModelConfig {
            patch_size: 4,
            conv_channels: vec![2, 4],
            conv_strides: vec![2, 2],
            feature_dim,
            momentum: 0.9,
            normalize_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::config(format!(
                "conv ladder needs matching channels/strides, got {}/{}",
                self.conv_channels.len(),
                self.conv_strides.len()
            )));
        }
        if self.conv_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::config("conv strides must be 1 or 2"));
        }
        if self.patch_size == 0 || self.feature_dim == 0 {
            return Err(Error::config("patch size and feature dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        let mut dim = self.patch_size;
        for &s in &self.conv_strides {
            if dim == 0 {
                break;
            }
            dim = conv_out(dim, s);
        }
        if dim == 0 {
            return Err(Error::config("conv ladder collapses the patch to nothing"));
        }
        Ok(())
    }

    /// Spatial extent after the conv ladder.
    pub fn final_spatial(&self) -> usize {
        let mut dim = self.patch_size;
        for &s in &self.conv_strides {
            dim = conv_out(dim, s);
        }
        dim
    }

    /// Flattened width of `C`'s output (channels x spatial^3).
    pub fn conv_feature_dim(&self) -> usize {
        let sp = self.final_spatial();
        self.conv_channels.last().copied().unwrap_or(0) * sp * sp * sp
    }
}

/// Whether a tensor is a trainable weight or a batch-norm running statistic.
/// Running statistics are carried in checkpoints and blended by momentum
/// updates but never receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    RunningStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    fn init(channels: usize) -> Result<Self> {
        Ok(BnParams {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub stride: usize,
    pub bn: BnParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    fn init(d_in: usize, d_out: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        Ok(DenseLayer {
            weight: kaiming_uniform(&[d_in, d_out], d_in, rng)?,
            bias: Tensor::zeros(&[d_out])?,
        })
    }
}

/// Parameters of the conditional encoder `E = f_l(C(.) || p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub convs: Vec<ConvLayer>,
    /// Three dense layers: (Fc+3) -> (Fc+3) -> (Fc+3) -> F.
    pub fl: Vec<DenseLayer>,
}

/// Parameters of the graph encoder `G`: GCN projection, its BatchNorm, and
/// the head `f_g` (three dense layers F -> F).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    pub proj: Tensor,
    pub bn: BnParams,
    pub fg: Vec<DenseLayer>,
}

fn kaiming_uniform(dims: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Result<Tensor> {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn(dims, |_| (rng.range_f64(-bound, bound)) as f32)
}

impl EncoderParams {
    pub fn init(cfg: &ModelConfig, stream: Stream) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream.rng();
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut c_in = 1usize;
        for (i, (&c_out, &stride)) in cfg.conv_channels.iter().zip(&cfg.conv_strides).enumerate() {
            let _ = i;
            let fan_in = c_in * 27;
            convs.push(ConvLayer {
                weight: kaiming_uniform(&[c_out, c_in, 3, 3, 3], fan_in, &mut rng)?,
                stride,
                bn: BnParams::init(c_out)?,
            });
            c_in = c_out;
        }
        let width = cfg.conv_feature_dim() + 3;
        let fl = vec![
            DenseLayer::init(width, width, &mut rng)?,
            DenseLayer::init(width, width, &mut rng)?,
            DenseLayer::init(width, cfg.feature_dim, &mut rng)?,
        ];
        Ok(EncoderParams { convs, fl })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        for (i, layer) in self.convs.iter().enumerate() {
            f(format!("{prefix}.c{i}.w"), &layer.weight, ParamKind::Weight);
            visit_bn(&layer.bn, prefix, &format!("c{i}"), f);
        }
        for (i, layer) in self.fl.iter().enumerate() {
            f(format!("{prefix}.fl{i}.w"), &layer.weight, ParamKind::Weight);
            f(format!("{prefix}.fl{i}.b"), &layer.bias, ParamKind::Weight);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        for (i, layer) in self.convs.iter_mut().enumerate() {
            f(format!("{prefix}.c{i}.w"), &mut layer.weight, ParamKind::Weight);
            visit_bn_mut(&mut layer.bn, prefix, &format!("c{i}"), f);
        }
        for (i, layer) in self.fl.iter_mut().enumerate() {
            f(format!("{prefix}.fl{i}.w"), &mut layer.weight, ParamKind::Weight);
            f(format!("{prefix}.fl{i}.b"), &mut layer.bias, ParamKind::Weight);
        }
    }

    /// Encode a batch of patches `[B, 1, s, s, s]` conditioned on their
    /// atlas-frame centers `[B, 3]` (components in `[-1, 1]`). Returns the
    /// `[B, F]` feature rows, not yet normalized.
    pub fn forward(&mut self, ctx: &mut FwdCtx<'_>, prefix: &str, patches: &Tensor, centers: &Tensor) -> Result<Var> {
        if patches.rank() != 5 || patches.dims()[1] != 1 {
            return Err(Error::shape(
                "encode_patch",
                format!("expected [B,1,s,s,s] batch, got {:?}", patches.dims()),
            ));
        }
        if centers.rank() != 2 || centers.dims()[1] != 3 || centers.dims()[0] != patches.dims()[0] {
            return Err(Error::shape(
                "encode_patch",
                format!("centers {:?} for batch {:?}", centers.dims(), patches.dims()),
            ));
        }
        let b = patches.dims()[0];
        let mut x = ctx.tape.constant(patches);
        for (i, layer) in self.convs.iter_mut().enumerate() {
            let w = ctx.bind(format!("{prefix}.c{i}.w"), &layer.weight);
            x = ctx.tape.conv3d(x, w, layer.stride)?;
            x = bn_elu(ctx, prefix, &format!("c{i}"), &mut layer.bn, x)?;
        }
        let flat_width = ctx.tape.value(x).numel() / b;
        x = ctx.tape.reshape(x, &[b, flat_width])?;
        let cvar = ctx.tape.constant(centers);
        x = ctx.tape.concat_cols(x, cvar)?;
        let n_fl = self.fl.len();
        for (i, layer) in self.fl.iter_mut().enumerate() {
            let w = ctx.bind(format!("{prefix}.fl{i}.w"), &layer.weight);
            let bias = ctx.bind(format!("{prefix}.fl{i}.b"), &layer.bias);
            x = ctx.tape.matmul(x, w)?;
            x = ctx.tape.add_row_bias(x, bias)?;
            if i + 1 < n_fl {
                x = ctx.tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

impl GraphParams {
    pub fn init(cfg: &ModelConfig, stream: Stream) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream.rng();
        let f = cfg.feature_dim;
        Ok(GraphParams {
            proj: kaiming_uniform(&[f, f], f, &mut rng)?,
            bn: BnParams::init(f)?,
            fg: vec![
                DenseLayer::init(f, f, &mut rng)?,
                DenseLayer::init(f, f, &mut rng)?,
                DenseLayer::init(f, f, &mut rng)?,
            ],
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(format!("{prefix}.w"), &self.proj, ParamKind::Weight);
        visit_bn(&self.bn, prefix, "gcn", f);
        for (i, layer) in self.fg.iter().enumerate() {
            f(format!("{prefix}.fg{i}.w"), &layer.weight, ParamKind::Weight);
            f(format!("{prefix}.fg{i}.b"), &layer.bias, ParamKind::Weight);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(format!("{prefix}.w"), &mut self.proj, ParamKind::Weight);
        visit_bn_mut(&mut self.bn, prefix, "gcn", f);
        for (i, layer) in self.fg.iter_mut().enumerate() {
            f(format!("{prefix}.fg{i}.w"), &mut layer.weight, ParamKind::Weight);
            f(format!("{prefix}.fg{i}.b"), &mut layer.bias, ParamKind::Weight);
        }
    }

    /// One round of propagation: `H' = ELU(BN(A_norm H W))`.
    pub fn gcn_forward(&mut self, ctx: &mut FwdCtx<'_>, prefix: &str, h: Var, a_norm: &Tensor) -> Result<Var> {
        let n = ctx.tape.value(h).dims()[0];
        if a_norm.rank() != 2 || a_norm.dims() != [n, n] {
            return Err(Error::shape(
                "gcn_forward",
                format!("adjacency {:?} for {n} node features", a_norm.dims()),
            ));
        }
        let a = ctx.tape.constant(a_norm);
        let w = ctx.bind(format!("{prefix}.w"), &self.proj);
        let mixed = ctx.tape.matmul(a, h)?;
        let projected = ctx.tape.matmul(mixed, w)?;
        bn_elu(ctx, prefix, "gcn", &mut self.bn, projected)
    }

    /// Pool node features and optionally apply the head `f_g`. The head is
    /// used for the contrastive objective and discarded when extracting
    /// frozen features.
    pub fn embed(&mut self, ctx: &mut FwdCtx<'_>, prefix: &str, h_prime: Var, with_head: bool) -> Result<Var> {
        let pooled = ctx.tape.col_mean(h_prime)?;
        if !with_head {
            return Ok(pooled);
        }
        let f = ctx.tape.value(pooled).dims()[0];
        let mut x = ctx.tape.reshape(pooled, &[1, f])?;
        let n_fg = self.fg.len();
        for (i, layer) in self.fg.iter().enumerate() {
            let w = ctx.bind(format!("{prefix}.fg{i}.w"), &layer.weight);
            let bias = ctx.bind(format!("{prefix}.fg{i}.b"), &layer.bias);
            x = ctx.tape.matmul(x, w)?;
            x = ctx.tape.add_row_bias(x, bias)?;
            if i + 1 < n_fg {
                x = ctx.tape.relu(x)?;
            }
        }
        ctx.tape.reshape(x, &[f])
    }
}

fn visit_bn(bn: &BnParams, prefix: &str, layer: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
    f(format!("{prefix}.{layer}.bn.gamma"), &bn.gamma, ParamKind::Weight);
    f(format!("{prefix}.{layer}.bn.beta"), &bn.beta, ParamKind::Weight);
    f(format!("bn.{prefix}.{layer}.running_mean"), &bn.running_mean, ParamKind::RunningStat);
    f(format!("bn.{prefix}.{layer}.running_var"), &bn.running_var, ParamKind::RunningStat);
}

fn visit_bn_mut(
    bn: &mut BnParams,
    prefix: &str,
    layer: &str,
    f: &mut dyn FnMut(String, &mut Tensor, ParamKind),
) {
    f(format!("{prefix}.{layer}.bn.gamma"), &mut bn.gamma, ParamKind::Weight);
    f(format!("{prefix}.{layer}.bn.beta"), &mut bn.beta, ParamKind::Weight);
    f(format!("bn.{prefix}.{layer}.running_mean"), &mut bn.running_mean, ParamKind::RunningStat);
    f(format!("bn.{prefix}.{layer}.running_var"), &mut bn.running_var, ParamKind::RunningStat);
}

fn bn_elu(
    ctx: &mut FwdCtx<'_>,
    prefix: &str,
    layer: &str,
    bn: &mut BnParams,
    x: Var,
) -> Result<Var> {
    let gamma = ctx.bind(format!("{prefix}.{layer}.bn.gamma"), &bn.gamma);
    let beta = ctx.bind(format!("{prefix}.{layer}.bn.beta"), &bn.beta);
    let (y, updated) =
        ctx.tape.batch_norm(x, gamma, beta, (&bn.running_mean, &bn.running_var), ctx.bn_mode)?;
    if let Some((rm, rv)) = updated {
        bn.running_mean = rm;
        bn.running_var = rv;
    }
    ctx.tape.elu(y)
}

/// Forward-pass context: the tape, the batch-norm mode, and whether parameter
/// leaves should carry gradients (binding their names for the optimizer).
pub struct FwdCtx<'t> {
    pub tape: &'t mut Tape,
    pub bn_mode: BnMode,
    pub grad: bool,
    pub bindings: Vec<(String, Var)>,
}

impl<'t> FwdCtx<'t> {
    pub fn new(tape: &'t mut Tape, bn_mode: BnMode, grad: bool) -> Self {
        FwdCtx { tape, bn_mode, grad, bindings: Vec::new() }
    }

    fn bind(&mut self, name: String, t: &Tensor) -> Var {
        let v = self.tape.leaf(t, self.grad);
        if self.grad {
            self.bindings.push((name, v));
        }
        v
    }
}

/// Query/key parameter pair with momentum-blended key updates.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair<P> {
    pub query: P,
    pub key: P,
    pub momentum: f32,
}

impl<P: Clone> MomentumPair<P> {
    /// Key starts as an exact copy of the query.
    pub fn new(query: P, momentum: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum {momentum} must lie in [0, 1)")));
        }
        Ok(MomentumPair { key: query.clone(), query, momentum })
    }
}

impl MomentumPair<EncoderParams> {
    pub fn momentum_update(&mut self) -> Result<()> {
        let mut snapshot = Vec::new();
        self.query.visit("q", &mut |name, t, _| snapshot.push((name, t.clone())));
        blend_into(&snapshot, self.momentum, |f| self.key.visit_mut("q", f))
    }
}

impl MomentumPair<GraphParams> {
    pub fn momentum_update(&mut self) -> Result<()> {
        let mut snapshot = Vec::new();
        self.query.visit("q", &mut |name, t, _| snapshot.push((name, t.clone())));
        blend_into(&snapshot, self.momentum, |f| self.key.visit_mut("q", f))
    }
}

/// theta_k <- m * theta_k + (1 - m) * theta_q for every tensor, running
/// statistics included.
fn blend_into(
    query: &[(String, Tensor)],
    m: f32,
    visit_key: impl FnOnce(&mut dyn FnMut(String, &mut Tensor, ParamKind)),
) -> Result<()> {
    let mut err: Option<Error> = None;
    let mut idx = 0usize;
    visit_key(&mut |name, key_t, _| {
        if err.is_some() {
            return;
        }
        let Some((qname, q_t)) = query.get(idx) else {
            err = Some(Error::config("momentum update: key has more tensors than query"));
            return;
        };
        if *qname != name || q_t.dims() != key_t.dims() {
            err = Some(Error::shape(
                "momentum_update",
                format!("mismatch at {name}: query {qname} {:?} vs key {:?}", q_t.dims(), key_t.dims()),
            ));
            return;
        }
        // written as q + m*(k - q) so that m = 0 copies the query exactly and
        // equal tensors stay bit-identical
        for (k, q) in key_t.data_mut().iter_mut().zip(q_t.data()) {
            *k = *q + m * (*k - *q);
        }
        idx += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Stack rank-3 patches into the `[B, 1, s, s, s]` batch layout.
pub fn stack_patches(patches: &[&Tensor]) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::config("empty patch batch"))?;
    let s = first.dims()[0];
    let mut data = Vec::with_capacity(patches.len() * first.numel());
    for p in patches {
        if p.dims() != first.dims() {
            return Err(Error::shape("stack_patches", "inconsistent patch dims"));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[patches.len(), 1, s, s, s], data)
}

/// Rows of atlas-frame centers for a batch, `[B, 3]`.
pub fn stack_centers(centers: &[[f32; 3]]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(centers.len() * 3);
    for c in centers {
        data.extend_from_slice(c);
    }
    Tensor::new(&[centers.len(), 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tape::BnMode;

    fn mini_setup() -> (ModelConfig, EncoderParams) {
        let cfg = ModelConfig::mini(6);
        let params = EncoderParams::init(&cfg, Stream::root(1).derive("enc")).unwrap();
        (cfg, params)
    }

    fn random_patch_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let s = cfg.patch_size;
        let mut rng = Stream::root(seed).derive("pb").rng();
        Tensor::from_fn(&[b, 1, s, s, s], |_| rng.uniform_f32() * 2.0 - 1.0).unwrap()
    }

    #[test]
    fn config_shapes_line_up() {
        let desk = ModelConfig::desk_scale();
        desk.validate().unwrap();
        assert_eq!(desk.final_spatial(), 1);
        assert_eq!(desk.conv_feature_dim(), 32);
        let paper = ModelConfig::paper_scale();
        paper.validate().unwrap();
        assert_eq!(paper.final_spatial(), 1);
        assert_eq!(paper.conv_feature_dim(), 128);
        // f_l input width follows the concatenation: Fc + 3
        let enc = EncoderParams::init(&paper, Stream::root(0)).unwrap();
        assert_eq!(enc.fl[0].weight.dims(), &[131, 131]);
        assert_eq!(enc.fl[2].weight.dims(), &[131, 128]);
    }

    #[test]
    fn bad_configs_fail_at_construction() {
        let mut cfg = ModelConfig::desk_scale();
        cfg.conv_strides = vec![2, 2];
        assert!(EncoderParams::init(&cfg, Stream::root(0)).is_err());
        let mut cfg = ModelConfig::desk_scale();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn distinct_centers_give_distinct_features() {
        let (cfg, mut params) = mini_setup();
        let batch = random_patch_batch(&cfg, 2, 3);
        // same patch twice, different conditioning
        let mut data = batch.data().to_vec();
        let half = data.len() / 2;
        let (a, b) = data.split_at_mut(half);
        b.copy_from_slice(a);
        let batch = Tensor::new(batch.dims(), data).unwrap();
        let centers = stack_centers(&[[0.0, 0.0, 0.0], [0.5, -0.5, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Train { update_running: false }, false);
        let h = params.forward(&mut ctx, "q", &batch, &centers).unwrap();
        let out = tape.value(h);
        let f = cfg.feature_dim;
        assert_ne!(&out.data()[..f], &out.data()[f..]);
    }

    #[test]
    fn zeroed_final_layer_gives_zero_features() {
        let (cfg, mut params) = mini_setup();
        params.fl[2].weight = Tensor::zeros(params.fl[2].weight.dims()).unwrap();
        params.fl[2].bias = Tensor::zeros(params.fl[2].bias.dims()).unwrap();
        let batch = Tensor::zeros(&[2, 1, 4, 4, 4]).unwrap();
        let centers = stack_centers(&[[0.0; 3]; 2]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
        let h = params.forward(&mut ctx, "q", &batch, &centers).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        let _ = cfg;
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (cfg, mut params) = mini_setup();
        let batch = random_patch_batch(&cfg, 3, 9);
        let centers = stack_centers(&[[0.1, 0.2, 0.3]; 3]).unwrap();
        let run = |params: &mut EncoderParams| {
            let mut tape = Tape::new();
            let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
            let h = params.forward(&mut ctx, "q", &batch, &centers).unwrap();
            tape.value(h).data().to_vec()
        };
        let a = run(&mut params);
        let b = run(&mut params);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gcn_single_node_identity_path() {
        let cfg = ModelConfig::mini(4);
        let mut g = GraphParams::init(&cfg, Stream::root(2)).unwrap();
        g.proj = Tensor::new(&[4, 4], {
            let mut eye = alloc::vec![0.0f32; 16];
            for i in 0..4 {
                eye[i * 4 + i] = 1.0;
            }
            eye
        })
        .unwrap();
        // eval-mode BN with unit running stats is the identity before ELU;
        // non-negative inputs pass ELU unchanged
        let h_val = Tensor::new(&[1, 4], alloc::vec![0.5, 1.0, 0.0, 2.0]).unwrap();
        let a = Tensor::new(&[1, 1], alloc::vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
        let h = tape_leaf(&mut ctx, &h_val);
        let out = g.gcn_forward(&mut ctx, "q", h, &a).unwrap();
        for (o, e) in tape.value(out).data().iter().zip(h_val.data()) {
            assert!((o - e).abs() < 1e-4, "{o} vs {e}");
        }
    }

    fn tape_leaf(ctx: &mut FwdCtx<'_>, t: &Tensor) -> Var {
        ctx.tape.constant(t)
    }

    #[test]
    fn gcn_zero_features_with_zero_beta_stay_zero() {
        let cfg = ModelConfig::mini(4);
        let mut g = GraphParams::init(&cfg, Stream::root(5)).unwrap();
        let h_val = Tensor::zeros(&[3, 4]).unwrap();
        let a_norm = crate::patch_graph::normalize_adjacency(
            &crate::patch_graph::build_adjacency(
                &[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
                1.5,
            )
            .unwrap(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
        let h = tape_leaf(&mut ctx, &h_val);
        let out = g.gcn_forward(&mut ctx, "q", h, &a_norm).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_preactivation_matches_dense_product_on_path_graph() {
        let cfg = ModelConfig::mini(4);
        let mut g = GraphParams::init(&cfg, Stream::root(6)).unwrap();
        // bypass BN: gamma 1, beta 0, eval mode with unit stats; undo ELU by
        // checking only non-negativity-preserved entries via direct compare on
        // the linear part instead: set gamma so BN is identity and take elu
        // inverse on positives. Simpler: compare against oracle through the
        // same bn/elu composition computed by hand.
        let mut rng = Stream::root(7).derive("h").rng();
        let h_val = Tensor::from_fn(&[3, 4], |_| rng.gaussian_f32(1.0)).unwrap();
        let a_norm = crate::patch_graph::normalize_adjacency(
            &crate::patch_graph::build_adjacency(
                &[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
                1.5,
            )
            .unwrap(),
        )
        .unwrap();
        // dense oracle of A_norm . H . W
        let n = 3;
        let f = 4;
        let mut ah = alloc::vec![0.0f32; n * f];
        for i in 0..n {
            for j in 0..f {
                for k in 0..n {
                    ah[i * f + j] += a_norm.data()[i * n + k] * h_val.data()[k * f + j];
                }
            }
        }
        let mut ahw = alloc::vec![0.0f32; n * f];
        for i in 0..n {
            for j in 0..f {
                for k in 0..f {
                    ahw[i * f + j] += ah[i * f + k] * g.proj.data()[k * f + j];
                }
            }
        }
        // eval-mode BN with zero mean / unit variance scales by 1/sqrt(1 + eps)
        let inv = 1.0 / libm::sqrtf(1.0 + crate::tape::BN_EPS);
        let expect: Vec<f32> = ahw
            .iter()
            .map(|&v| {
                let v = v * inv;
                if v > 0.0 {
                    v
                } else {
                    libm::expf(v) - 1.0
                }
            })
            .collect();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
        let h = tape_leaf(&mut ctx, &h_val);
        let out = g.gcn_forward(&mut ctx, "q", h, &a_norm).unwrap();
        for (o, e) in tape.value(out).data().iter().zip(&expect) {
            assert!((o - e).abs() < 1e-5, "{o} vs {e}");
        }
    }

    #[test]
    fn pooling_examples() {
        let cfg = ModelConfig::mini(3);
        let mut g = GraphParams::init(&cfg, Stream::root(8)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
        // identical rows pool to that row
        let rows = Tensor::new(&[2, 3], alloc::vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap();
        let h = ctx.tape.constant(&rows);
        let pooled = g.embed(&mut ctx, "q", h, false).unwrap();
        assert_eq!(ctx.tape.value(pooled).data(), &[0.5, -1.0, 2.0]);
        // r and -r pool to zero
        let rows = Tensor::new(&[2, 3], alloc::vec![1.0, -2.0, 3.0, -1.0, 2.0, -3.0]).unwrap();
        let h = ctx.tape.constant(&rows);
        let pooled = g.embed(&mut ctx, "q", h, false).unwrap();
        assert!(ctx.tape.value(pooled).data().iter().all(|&v| v == 0.0));
        // random matrix pools to the per-column arithmetic mean
        let mut rng = Stream::root(10).derive("pool").rng();
        let vals = Tensor::from_fn(&[5, 3], |_| rng.gaussian_f32(1.0)).unwrap();
        let h = ctx.tape.constant(&vals);
        let pooled = g.embed(&mut ctx, "q", h, false).unwrap();
        for j in 0..3 {
            let mean: f32 = (0..5).map(|i| vals.data()[i * 3 + j]).sum::<f32>() / 5.0;
            assert!((ctx.tape.value(pooled).data()[j] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn momentum_update_arithmetic() {
        let cfg = ModelConfig::mini(4);
        let q = EncoderParams::init(&cfg, Stream::root(20)).unwrap();

        // m = 0: key becomes the query exactly
        let mut pair = MomentumPair::new(q.clone(), 0.0).unwrap();
        pair.query.fl[0].bias.data_mut()[0] = 7.0;
        pair.momentum_update().unwrap();
        assert_eq!(pair.key.fl[0].bias.data()[0], 7.0);

        // identical params stay identical
        let mut pair = MomentumPair::new(q.clone(), 0.9).unwrap();
        let before = pair.key.clone();
        pair.momentum_update().unwrap();
        assert_eq!(pair.key, before);

        // m = 0.999 with key 0, query 1 gives 0.001
        let mut pair = MomentumPair::new(q, 0.999).unwrap();
        for v in pair.key.fl[0].bias.data_mut() {
            *v = 0.0;
        }
        for v in pair.query.fl[0].bias.data_mut() {
            *v = 1.0;
        }
        pair.momentum_update().unwrap();
        let got = pair.key.fl[0].bias.data()[0];
        assert!((got - 0.001).abs() < 1e-7, "{got}");
    }

    #[test]
    fn gcn_is_permutation_equivariant_and_pooling_invariant() {
        let cfg = ModelConfig::mini(5);
        for seed in 0..10u64 {
            let mut g = GraphParams::init(&cfg, Stream::root(seed).derive("g")).unwrap();
            let mut rng = Stream::root(seed).derive("data").rng();
            let n = 6usize;
            let f = 5usize;
            let centers: Vec<[f32; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.uniform_f32() * 40.0,
                        rng.uniform_f32() * 40.0,
                        rng.uniform_f32() * 40.0,
                    ]
                })
                .collect();
            let a = crate::patch_graph::build_adjacency(&centers, 22.0).unwrap();
            let a_norm = crate::patch_graph::normalize_adjacency(&a).unwrap();
            let h = Tensor::from_fn(&[n, f], |_| rng.gaussian_f32(1.0)).unwrap();

            let perm = rng.permutation(n);
            let mut h_perm = alloc::vec![0.0f32; n * f];
            let mut a_perm = alloc::vec![0.0f32; n * n];
            for (new_i, &old_i) in perm.iter().enumerate() {
                h_perm[new_i * f..(new_i + 1) * f]
                    .copy_from_slice(&h.data()[old_i * f..(old_i + 1) * f]);
                for (new_j, &old_j) in perm.iter().enumerate() {
                    a_perm[new_i * n + new_j] = a.data()[old_i * n + old_j];
                }
            }
            let a_perm = Tensor::new(&[n, n], a_perm).unwrap();
            let a_perm_norm = crate::patch_graph::normalize_adjacency(&a_perm).unwrap();
            let h_perm = Tensor::new(&[n, f], h_perm).unwrap();

            let run = |g: &mut GraphParams, h_val: &Tensor, a_norm: &Tensor| {
                let mut tape = Tape::new();
                let mut ctx = FwdCtx::new(&mut tape, BnMode::Train { update_running: false }, false);
                let hv = ctx.tape.constant(h_val);
                let hp = g.gcn_forward(&mut ctx, "q", hv, a_norm).unwrap();
                let pooled = g.embed(&mut ctx, "q", hp, true).unwrap();
                (tape.value(hp).data().to_vec(), tape.value(pooled).data().to_vec())
            };
            let (hp_base, emb_base) = run(&mut g, &h, &a_norm);
            let (hp_perm, emb_perm) = run(&mut g, &h_perm, &a_perm_norm);

            // rows permute identically
            for (new_i, &old_i) in perm.iter().enumerate() {
                for j in 0..f {
                    let a = hp_perm[new_i * f + j];
                    let b = hp_base[old_i * f + j];
                    assert!((a - b).abs() < 1e-5, "row {new_i} col {j}: {a} vs {b}");
                }
            }
            // pooled embedding is unchanged
            for (a, b) in emb_perm.iter().zip(&emb_base) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
