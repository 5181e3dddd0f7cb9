//! Interleaved contrastive training.
//!
//! Each outer step runs `T_l` patch-phase steps then `T_g` graph-phase steps.
//! A patch step samples a batch of subjects, walks the anatomical regions,
//! accumulates the patch InfoNCE over two augmented views per patch (query
//! encoder vs momentum key encoder, negatives from that region's queue), and
//! takes one Adam step on the query encoder only. A graph step encodes two
//! augmented full patch sets per subject through the frozen encoder, pushes
//! them through the query/key GCNs, and steps only the query GCN. Gradients
//! from the graph loss never reach the encoder — the whole point of the
//! interleave — and the phase that is not running leaves the other network's
//! parameter block bit-identical.
//!
//! All sampling and augmentation randomness derives from the root seed and
//! the step counters, so a run is a pure function of (config, dataset) and a
//! reloaded checkpoint continues bit-exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{augment, AugmentConfig};
use crate::contrastive::{negatives_for, NegativeQueue};
use crate::encoders::{
    stack_centers, stack_patches, EncoderParams, FwdCtx, GraphParams, ModelConfig, MomentumPair,
    ParamKind,
};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{BnMode, ParamGrad, Tape, Var};
use crate::tensor::Tensor;

pub const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Outer steps; derived from `epochs` over the dataset when absent.
    pub t_max: Option<u64>,
    /// Patch-phase steps per outer step.
    pub t_l: u64,
    /// Graph-phase steps per outer step.
    pub t_g: u64,
    /// Subjects per patch-phase batch.
    pub b_l: usize,
    /// Subjects per graph-phase batch.
    pub b_g: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub epochs: u64,
    /// InfoNCE temperature.
    pub tau: f32,
    /// Capacity of each per-region negative queue.
    pub patch_queue_capacity: usize,
    /// Capacity of the graph-level negative queue.
    pub graph_queue_capacity: usize,
    /// Process regions in ascending order instead of a per-step permutation.
    pub ordered_regions: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_max: None,
            t_l: 1,
            t_g: 1,
            b_l: 128,
            b_g: 16,
            lr: 3e-2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            epochs: 30,
            tau: 0.2,
            patch_queue_capacity: 128,
            graph_queue_capacity: 512,
            ordered_regions: false,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_l == 0 || self.t_g == 0 || self.b_l == 0 || self.b_g == 0 || self.epochs == 0 {
            return Err(Error::config("all step and batch counts must be >= 1"));
        }
        if let Some(0) = self.t_max {
            return Err(Error::config("t_max must be >= 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("temperature {} must be positive", self.tau)));
        }
        if self.patch_queue_capacity == 0 || self.graph_queue_capacity == 0 {
            return Err(Error::config("queue capacities must be >= 1"));
        }
        self.augment.validate()
    }

    /// Outer steps: explicit `t_max`, or sized so the patch phase sees about
    /// `epochs` passes over the dataset.
    pub fn resolved_t_max(&self, n_subjects: usize) -> u64 {
        self.t_max.unwrap_or_else(|| {
            let per_step = (self.b_l.min(n_subjects) as u64) * self.t_l;
            (self.epochs * n_subjects as u64).div_ceil(per_step.max(1)).max(1)
        })
    }
}

/// One subject ready for training: its N patches (atlas order) and its
/// normalized adjacency.
#[derive(Clone, Debug)]
pub struct TrainSubject {
    pub id: String,
    pub patches: Vec<Tensor>,
    pub a_norm: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainDataset {
    pub subjects: Vec<TrainSubject>,
    /// Atlas-frame centers normalized to [-1, 1], shared by every subject.
    pub centers_norm: Vec<[f32; 3]>,
}

impl TrainDataset {
    pub fn n_regions(&self) -> usize {
        self.centers_norm.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.len() < 2 {
            return Err(Error::config(format!(
                "training needs at least 2 subjects, got {}",
                self.subjects.len()
            )));
        }
        let n = self.n_regions();
        if n == 0 {
            return Err(Error::config("dataset has no regions"));
        }
        for s in &self.subjects {
            if s.patches.len() != n {
                return Err(Error::config(format!(
                    "subject {} has {} patches for {n} regions",
                    s.id,
                    s.patches.len()
                )));
            }
            if s.a_norm.dims() != [n, n] {
                return Err(Error::config(format!(
                    "subject {} adjacency {:?} for {n} regions",
                    s.id,
                    s.a_norm.dims()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Patch,
    Graph,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Patch => "patch",
            Phase::Graph => "graph",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricRecord {
    /// Optimizer steps taken so far, both phases combined.
    pub global_step: u64,
    pub outer_step: u64,
    pub phase: Phase,
    pub loss: f32,
    pub lr: f32,
}

/// Receives metrics rows and checkpoint bytes; the std layer writes files.
pub trait TrainSink {
    fn metrics(&mut self, rec: &MetricRecord) -> Result<()>;
    fn checkpoint(&mut self, outer_step: u64, bytes: &[u8]) -> Result<()>;
}

pub struct NullSink;

impl TrainSink for NullSink {
    fn metrics(&mut self, _rec: &MetricRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _outer_step: u64, _bytes: &[u8]) -> Result<()> {
        Ok(())
    }
}

/// Collects metrics in memory and keeps the latest checkpoint bytes.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
    pub last_checkpoint: Option<Vec<u8>>,
}

impl TrainSink for MemorySink {
    fn metrics(&mut self, rec: &MetricRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
    fn checkpoint(&mut self, _outer_step: u64, bytes: &[u8]) -> Result<()> {
        self.last_checkpoint = Some(bytes.to_vec());
        Ok(())
    }
}

/// Cosine learning-rate schedule: `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, total: u64, lr0: f32) -> f32 {
    if total == 0 {
        return lr0;
    }
    let frac = (step.min(total) as f64) / (total as f64);
    (lr0 as f64 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))) as f32
}

/// Adam first/second moments per parameter plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    /// One optimizer step over the bound parameters. Weight decay is L2 added
    /// to the gradient before the moment updates. Parameters without a
    /// gradient this step are left untouched.
    fn apply(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
        cfg: &TrainConfig,
        visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut Tensor, ParamKind)),
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - libm::pow(cfg.beta1 as f64, t);
        let bias2 = 1.0 - libm::pow(cfg.beta2 as f64, t);
        let mut err: Option<Error> = None;
        visit_mut(&mut |name, param, kind| {
            if err.is_some() || kind != ParamKind::Weight {
                return;
            }
            let Some(grad) = grads.get(&name) else {
                return;
            };
            if grad.dims() != param.dims() {
                err = Some(Error::shape(
                    "adam",
                    format!("grad {:?} vs param {:?} for {name}", grad.dims(), param.dims()),
                ));
                return;
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| {
                    (
                        Tensor::zeros(param.dims()).expect("moment alloc"),
                        Tensor::zeros(param.dims()).expect("moment alloc"),
                    )
                });
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = param.data_mut();
            for i in 0..pd.len() {
                let g = grad.data()[i] + cfg.weight_decay * pd[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = md[i] as f64 / bias1;
                let v_hat = vd[i] as f64 / bias2;
                pd[i] -= (lr as f64 * m_hat / (libm::sqrt(v_hat) + ADAM_EPS as f64)) as f32;
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

pub struct TrainerState {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub enc: MomentumPair<EncoderParams>,
    pub gcn: MomentumPair<GraphParams>,
    pub patch_queues: Vec<NegativeQueue>,
    pub graph_queue: NegativeQueue,
    pub opt_enc: AdamState,
    pub opt_gcn: AdamState,
    pub outer_step: u64,
    pub patch_steps: u64,
    pub graph_steps: u64,
    /// Resolved T_max, fixed at init so the cosine horizon survives resume.
    pub total_outer: u64,
    /// Extra named tensors carried through checkpoints (config hash etc.).
    pub meta: BTreeMap<String, Tensor>,
}

impl TrainerState {
    pub fn init(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        n_regions: usize,
        n_subjects: usize,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if n_regions == 0 {
            return Err(Error::config("cannot train on zero regions"));
        }
        let root = Stream::root(train_cfg.seed);
        let enc = MomentumPair::new(
            EncoderParams::init(&model_cfg, root.derive("init.enc"))?,
            model_cfg.momentum,
        )?;
        let gcn = MomentumPair::new(
            GraphParams::init(&model_cfg, root.derive("init.gcn"))?,
            model_cfg.momentum,
        )?;
        let f = model_cfg.feature_dim;
        let patch_queues = (0..n_regions)
            .map(|j| NegativeQueue::new(train_cfg.patch_queue_capacity, f, format!("patch.{j}")))
            .collect::<Result<Vec<_>>>()?;
        let graph_queue = NegativeQueue::new(train_cfg.graph_queue_capacity, f, "graph")?;
        let total_outer = train_cfg.resolved_t_max(n_subjects);
        Ok(TrainerState {
            model_cfg,
            train_cfg,
            enc,
            gcn,
            patch_queues,
            graph_queue,
            opt_enc: AdamState::default(),
            opt_gcn: AdamState::default(),
            outer_step: 0,
            patch_steps: 0,
            graph_steps: 0,
            total_outer,
            meta: BTreeMap::new(),
        })
    }

    pub fn n_regions(&self) -> usize {
        self.patch_queues.len()
    }

    /// Every tensor of the trainer, keyed by checkpoint name.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        {
            let mut put = |name: String, t: &Tensor, _k: ParamKind| {
                out.insert(name, t.clone());
            };
            self.enc.query.visit("enc.q", &mut put);
            self.enc.key.visit("enc.k", &mut put);
            self.gcn.query.visit("gcn.q", &mut put);
            self.gcn.key.visit("gcn.k", &mut put);
        }
        let mut put_queue = |name: &str, q: &NegativeQueue, out: &mut BTreeMap<String, Tensor>| {
            let (data, tags, cursor, fill) = q.raw();
            out.insert(
                format!("{name}"),
                Tensor::new(&[q.capacity(), q.dim()], data.to_vec()).expect("queue tensor"),
            );
            out.insert(
                format!("{name}.tags"),
                Tensor::new(&[q.capacity()], tags.iter().map(|&t| t as f32).collect())
                    .expect("queue tags"),
            );
            out.insert(
                format!("{name}.state"),
                Tensor::new(&[2], vec![cursor as f32, fill as f32]).expect("queue state"),
            );
        };
        for (j, q) in self.patch_queues.iter().enumerate() {
            put_queue(&format!("queue.patch.{j:04}"), q, &mut out);
        }
        put_queue("queue.graph", &self.graph_queue, &mut out);
        for (prefix, opt) in [("enc", &self.opt_enc), ("gcn", &self.opt_gcn)] {
            out.insert(format!("opt.{prefix}.step"), Tensor::scalar(opt.step as f32));
            for (name, (m, v)) in &opt.moments {
                out.insert(format!("opt.{name}.m"), m.clone());
                out.insert(format!("opt.{name}.v"), v.clone());
            }
        }
        out.insert(String::from("trainer.outer_step"), Tensor::scalar(self.outer_step as f32));
        out.insert(String::from("trainer.patch_steps"), Tensor::scalar(self.patch_steps as f32));
        out.insert(String::from("trainer.graph_steps"), Tensor::scalar(self.graph_steps as f32));
        out.insert(String::from("trainer.total_outer"), Tensor::scalar(self.total_outer as f32));
        out.insert(
            String::from("trainer.seed"),
            Tensor::new(
                &[8],
                self.train_cfg.seed.to_le_bytes().iter().map(|&b| b as f32).collect(),
            )
            .expect("seed tensor"),
        );
        for (name, t) in &self.meta {
            out.insert(name.clone(), t.clone());
        }
        out
    }

    pub fn encode_checkpoint(&self) -> Result<Vec<u8>> {
        crate::formats::ckpt::encode(&self.to_named())
    }

    /// Rebuild a trainer from checkpoint tensors. The configs must be the
    /// ones the checkpoint was produced with; seed and counters are verified
    /// against the stored values.
    pub fn from_named(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        n_regions: usize,
        n_subjects: usize,
        entries: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut state = TrainerState::init(model_cfg, train_cfg, n_regions, n_subjects)?;

        let scalar = |name: &str| -> Result<f32> {
            entries
                .get(name)
                .ok_or_else(|| Error::format(format!("checkpoint missing {name}")))?
                .item()
        };
        let seed_tensor = entries
            .get("trainer.seed")
            .ok_or_else(|| Error::format("checkpoint missing trainer.seed"))?;
        if seed_tensor.numel() != 8 {
            return Err(Error::format("trainer.seed must hold 8 bytes"));
        }
        let mut seed_bytes = [0u8; 8];
        for (b, v) in seed_bytes.iter_mut().zip(seed_tensor.data()) {
            *b = *v as u8;
        }
        let stored_seed = u64::from_le_bytes(seed_bytes);
        if stored_seed != state.train_cfg.seed {
            return Err(Error::config(format!(
                "checkpoint seed {stored_seed} differs from configured seed {}",
                state.train_cfg.seed
            )));
        }

        let mut missing: Vec<String> = Vec::new();
        {
            let mut fill = |name: String, t: &mut Tensor, _k: ParamKind| {
                match entries.get(&name) {
                    Some(src) if src.dims() == t.dims() => *t = src.clone(),
                    Some(src) => missing
                        .push(format!("{name}: dims {:?} vs expected {:?}", src.dims(), t.dims())),
                    None => missing.push(name),
                }
            };
            state.enc.query.visit_mut("enc.q", &mut fill);
            state.enc.key.visit_mut("enc.k", &mut fill);
            state.gcn.query.visit_mut("gcn.q", &mut fill);
            state.gcn.key.visit_mut("gcn.k", &mut fill);
        }
        if !missing.is_empty() {
            return Err(Error::config(format!(
                "checkpoint incompatible with model config: {}",
                missing.join(", ")
            )));
        }

        let f = state.model_cfg.feature_dim;
        let read_queue = |name: &str, scope: String| -> Result<NegativeQueue> {
            let data = entries
                .get(name)
                .ok_or_else(|| Error::format(format!("checkpoint missing {name}")))?;
            let tags = entries
                .get(&format!("{name}.tags"))
                .ok_or_else(|| Error::format(format!("checkpoint missing {name}.tags")))?;
            let st = entries
                .get(&format!("{name}.state"))
                .ok_or_else(|| Error::format(format!("checkpoint missing {name}.state")))?;
            NegativeQueue::from_raw(
                data.dims()[0],
                f,
                scope,
                data.data().to_vec(),
                tags.data().iter().map(|&t| t as u32).collect(),
                st.data()[0] as usize,
                st.data()[1] as usize,
            )
        };
        for j in 0..n_regions {
            state.patch_queues[j] =
                read_queue(&format!("queue.patch.{j:04}"), format!("patch.{j}"))?;
        }
        state.graph_queue = read_queue("queue.graph", String::from("graph"))?;

        for (prefix, opt) in [("enc", &mut state.opt_enc), ("gcn", &mut state.opt_gcn)] {
            opt.step = scalar(&format!("opt.{prefix}.step"))? as u64;
        }
        for (name, t) in entries {
            if let Some(rest) = name.strip_prefix("opt.") {
                if let Some(base) = rest.strip_suffix(".m") {
                    if base == "enc.step" || base == "gcn.step" {
                        continue;
                    }
                    let v = entries
                        .get(&format!("opt.{base}.v"))
                        .ok_or_else(|| Error::format(format!("missing opt.{base}.v")))?;
                    let opt = if base.starts_with("enc.") {
                        &mut state.opt_enc
                    } else {
                        &mut state.opt_gcn
                    };
                    opt.moments.insert(String::from(base), (t.clone(), v.clone()));
                }
            }
        }

        state.outer_step = scalar("trainer.outer_step")? as u64;
        state.patch_steps = scalar("trainer.patch_steps")? as u64;
        state.graph_steps = scalar("trainer.graph_steps")? as u64;
        let total = scalar("trainer.total_outer")? as u64;
        if total != state.total_outer {
            return Err(Error::config(format!(
                "checkpoint trained toward {total} outer steps, config resolves to {}",
                state.total_outer
            )));
        }
        for (name, t) in entries {
            if name.starts_with("meta.") {
                state.meta.insert(name.clone(), t.clone());
            }
        }
        Ok(state)
    }
}

fn sample_batch(stream: Stream, n_subjects: usize, batch: usize) -> Result<Vec<usize>> {
    if n_subjects < 2 {
        return Err(Error::config(format!("need >= 2 subjects, have {n_subjects}")));
    }
    let b = batch.min(n_subjects);
    if b < 2 {
        return Err(Error::config(format!("batch of {b} subjects; need >= 2")));
    }
    Ok(stream.rng().distinct(n_subjects, b))
}

fn step_context(e: Error, phase: Phase, step: u64, region: Option<usize>) -> Error {
    match e {
        Error::NonFinite { op, detail } => Error::NonFinite {
            op,
            detail: match region {
                Some(j) => format!("{} step {step}, region {j}: {detail}", phase.as_str()),
                None => format!("{} step {step}: {detail}", phase.as_str()),
            },
        },
        other => other,
    }
}

/// One patch-phase optimizer step on an explicit subject batch.
pub fn patch_phase_step_on(
    state: &mut TrainerState,
    data: &TrainDataset,
    batch: &[usize],
) -> Result<f32> {
    if batch.len() < 2 {
        return Err(Error::config("patch phase needs a batch of >= 2 subjects"));
    }
    let step = state.patch_steps;
    let cfg = state.train_cfg.clone();
    let n_regions = data.n_regions();
    let root = Stream::root(cfg.seed);
    let region_order: Vec<usize> = if cfg.ordered_regions {
        (0..n_regions).collect()
    } else {
        root.derive("train.patch").derive_u64(step).derive("regions").rng().permutation(n_regions)
    };
    let aug_root = root.derive("augment").derive("patch").derive_u64(step);

    let normalize = state.model_cfg.normalize_embeddings;
    let mut tape = Tape::new();
    let loss_var;
    let bindings;
    {
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Train { update_running: true }, true);
        let mut total: Option<Var> = None;
        for &j in &region_order {
            let center = data.centers_norm[j];
            let centers = stack_centers(&vec![center; batch.len()])?;

            let mut q_views = Vec::with_capacity(batch.len());
            let mut k_views = Vec::with_capacity(batch.len());
            for &subject in batch {
                let patch = &data.subjects[subject].patches[j];
                let tag = aug_root.derive_u64(subject as u64).derive_u64(j as u64);
                q_views.push(augment(patch, &cfg.augment, tag.derive_u64(0))?);
                k_views.push(augment(patch, &cfg.augment, tag.derive_u64(1))?);
            }
            let q_batch = stack_patches(&q_views.iter().collect::<Vec<_>>())?;
            let k_batch = stack_patches(&k_views.iter().collect::<Vec<_>>())?;

            // query side, on the gradient tape
            let mut q = state
                .enc
                .query
                .forward(&mut ctx, "enc.q", &q_batch, &centers)
                .map_err(|e| step_context(e, Phase::Patch, step, Some(j)))?;
            if normalize {
                q = ctx.tape.l2_normalize(q)?;
            }

            // key side, detached: batch statistics without touching running stats
            let keys = {
                let mut ktape = Tape::new();
                let mut kctx =
                    FwdCtx::new(&mut ktape, BnMode::Train { update_running: false }, false);
                let mut k = state
                    .enc
                    .key
                    .forward(&mut kctx, "enc.k", &k_batch, &centers)
                    .map_err(|e| step_context(e, Phase::Patch, step, Some(j)))?;
                if normalize {
                    k = kctx.tape.l2_normalize(k)?;
                }
                ktape.value(k).clone()
            };

            // negatives come from the queue's other-subject entries (the
            // paper's v != i), so each anchor gets its own negative set
            let queue = &state.patch_queues[j];
            let mut acc: Option<Var> = None;
            for (bi, &subject) in batch.iter().enumerate() {
                let qa = ctx.tape.row(q, bi)?;
                let f = keys.dims()[1];
                let krow = Tensor::new(&[f], keys.data()[bi * f..(bi + 1) * f].to_vec())?;
                let kvar = ctx.tape.constant(&krow);
                let negs = negatives_for(queue, subject as u32, &keys, bi)?;
                let l = ctx.tape.info_nce(qa, kvar, &negs, cfg.tau)?;
                acc = Some(match acc {
                    None => l,
                    Some(prev) => ctx.tape.add(prev, l)?,
                });
            }
            let sum = acc.expect("non-empty batch");
            let loss_j = ctx.tape.scale(sum, 1.0 / batch.len() as f32)?;
            total = Some(match total {
                None => loss_j,
                Some(prev) => ctx.tape.add(prev, loss_j)?,
            });

            let tags: Vec<u32> = batch.iter().map(|&s| s as u32).collect();
            state.patch_queues[j].push_rows(&keys, &tags)?;
        }
        let sum = total.expect("at least one region");
        loss_var = ctx.tape.scale(sum, 1.0 / n_regions as f32)?;
        bindings = core::mem::take(&mut ctx.bindings);
    }
    let loss = tape.value(loss_var).item()?;
    let grads = tape.backward(loss_var).map_err(|e| step_context(e, Phase::Patch, step, None))?;
    let merged = merge_gradients(&tape, &grads, &bindings)?;

    let lr = cosine_lr(step, state.total_outer * cfg.t_l, cfg.lr);
    let enc = &mut state.enc;
    state.opt_enc.apply(&merged, lr, &cfg, |f| enc.query.visit_mut("enc.q", f))?;
    state.enc.momentum_update()?;
    state.patch_steps += 1;
    Ok(loss)
}

/// One graph-phase optimizer step on an explicit subject batch.
pub fn graph_phase_step_on(
    state: &mut TrainerState,
    data: &TrainDataset,
    batch: &[usize],
) -> Result<f32> {
    if batch.len() < 2 {
        return Err(Error::config("graph phase needs a batch of >= 2 subjects"));
    }
    let step = state.graph_steps;
    let cfg = state.train_cfg.clone();
    let aug_root = Stream::root(cfg.seed).derive("augment").derive("graph").derive_u64(step);
    let normalize = state.model_cfg.normalize_embeddings;
    let f = state.model_cfg.feature_dim;

    // key-side graph embeddings for the whole batch first; the in-batch
    // fallback needs them all
    let mut key_embs: Vec<Tensor> = Vec::with_capacity(batch.len());
    for &subject in batch {
        let h_k = encode_view(
            &mut state.enc.key,
            data,
            subject,
            &cfg.augment,
            aug_root.derive_u64(subject as u64),
            1,
            "enc.k",
        )
        .map_err(|e| step_context(e, Phase::Graph, step, None))?;
        let mut ktape = Tape::new();
        let mut kctx = FwdCtx::new(&mut ktape, BnMode::Train { update_running: false }, false);
        let hvar = kctx.tape.constant(&h_k);
        let hp = state.gcn.key.gcn_forward(&mut kctx, "gcn.k", hvar, &data.subjects[subject].a_norm)?;
        let mut emb = state.gcn.key.embed(&mut kctx, "gcn.k", hp, true)?;
        if normalize {
            emb = kctx.tape.l2_normalize(emb)?;
        }
        key_embs.push(ktape.value(emb).clone());
    }
    let mut key_matrix = Vec::with_capacity(batch.len() * f);
    for e in &key_embs {
        key_matrix.extend_from_slice(e.data());
    }
    let key_matrix = Tensor::new(&[batch.len(), f], key_matrix)?;

    let mut tape = Tape::new();
    let loss_var;
    let bindings;
    {
        let mut ctx = FwdCtx::new(&mut tape, BnMode::Train { update_running: true }, true);
        let mut total: Option<Var> = None;
        for (bi, &subject) in batch.iter().enumerate() {
            // query view through the frozen encoder: no gradient, batch-stat
            // normalization, no running-stat writes
            let h_q = encode_view(
                &mut state.enc.query,
                data,
                subject,
                &cfg.augment,
                aug_root.derive_u64(subject as u64),
                0,
                "enc.q",
            )
            .map_err(|e| step_context(e, Phase::Graph, step, None))?;
            let hvar = ctx.tape.constant(&h_q);
            let hp = state
                .gcn
                .query
                .gcn_forward(&mut ctx, "gcn.q", hvar, &data.subjects[subject].a_norm)?;
            let mut r = state.gcn.query.embed(&mut ctx, "gcn.q", hp, true)?;
            if normalize {
                r = ctx.tape.l2_normalize(r)?;
            }
            let kvar = ctx.tape.constant(&key_embs[bi]);
            let negs = negatives_for(&state.graph_queue, subject as u32, &key_matrix, bi)?;
            let l = ctx
                .tape
                .info_nce(r, kvar, &negs, cfg.tau)
                .map_err(|e| step_context(e, Phase::Graph, step, None))?;
            total = Some(match total {
                None => l,
                Some(prev) => ctx.tape.add(prev, l)?,
            });
        }
        let sum = total.expect("non-empty batch");
        loss_var = ctx.tape.scale(sum, 1.0 / batch.len() as f32)?;
        bindings = core::mem::take(&mut ctx.bindings);
    }
    let loss = tape.value(loss_var).item()?;
    let grads = tape.backward(loss_var).map_err(|e| step_context(e, Phase::Graph, step, None))?;
    let merged = merge_gradients(&tape, &grads, &bindings)?;

    let lr = cosine_lr(step, state.total_outer * cfg.t_g, cfg.lr);
    let gcn = &mut state.gcn;
    state.opt_gcn.apply(&merged, lr, &cfg, |f| gcn.query.visit_mut("gcn.q", f))?;
    state.gcn.momentum_update()?;
    let tags: Vec<u32> = batch.iter().map(|&s| s as u32).collect();
    state.graph_queue.push_rows(&key_matrix, &tags)?;
    state.graph_steps += 1;
    Ok(loss)
}

/// Encode one augmented view of a subject's full patch set `[N, F]` without
/// gradients. View index 0 is the query view, 1 the key view.
fn encode_view(
    enc: &mut EncoderParams,
    data: &TrainDataset,
    subject: usize,
    aug_cfg: &AugmentConfig,
    stream: Stream,
    view: u64,
    prefix: &str,
) -> Result<Tensor> {
    let subj = &data.subjects[subject];
    let n = subj.patches.len();
    let mut views = Vec::with_capacity(n);
    for (j, patch) in subj.patches.iter().enumerate() {
        views.push(augment(patch, aug_cfg, stream.derive_u64(j as u64).derive_u64(view))?);
    }
    let batch = stack_patches(&views.iter().collect::<Vec<_>>())?;
    let centers = stack_centers(&data.centers_norm)?;
    let mut tape = Tape::new();
    let mut ctx = FwdCtx::new(&mut tape, BnMode::Train { update_running: false }, false);
    let h = enc.forward(&mut ctx, prefix, &batch, &centers)?;
    Ok(tape.value(h).clone())
}

/// Sum gradients per bound name (a parameter may be bound several times when
/// a forward runs per subject).
fn merge_gradients(
    tape: &Tape,
    grads: &crate::tape::Gradients,
    bindings: &[(String, Var)],
) -> Result<BTreeMap<String, Tensor>> {
    let _ = tape;
    let mut merged: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in bindings {
        match grads.get(*var) {
            ParamGrad::Absent => {}
            ParamGrad::Present(g) => match merged.get_mut(name) {
                None => {
                    merged.insert(name.clone(), g.clone());
                }
                Some(acc) => {
                    if acc.dims() != g.dims() {
                        return Err(Error::shape(
                            "merge_gradients",
                            format!("{name}: {:?} vs {:?}", acc.dims(), g.dims()),
                        ));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            },
        }
    }
    Ok(merged)
}

/// Sampled-batch wrappers: batches derive from the seed and step counters.
pub fn patch_phase_step(state: &mut TrainerState, data: &TrainDataset) -> Result<f32> {
    let stream = Stream::root(state.train_cfg.seed)
        .derive("train.patch")
        .derive_u64(state.patch_steps)
        .derive("batch");
    let batch = sample_batch(stream, data.subjects.len(), state.train_cfg.b_l)?;
    patch_phase_step_on(state, data, &batch)
}

pub fn graph_phase_step(state: &mut TrainerState, data: &TrainDataset) -> Result<f32> {
    let stream = Stream::root(state.train_cfg.seed)
        .derive("train.graph")
        .derive_u64(state.graph_steps)
        .derive("batch");
    let batch = sample_batch(stream, data.subjects.len(), state.train_cfg.b_g)?;
    graph_phase_step_on(state, data, &batch)
}

/// Run the interleaving loop from the state's current position to T_max,
/// reporting one metrics row per optimizer step and a checkpoint per outer
/// step.
pub fn train(state: &mut TrainerState, data: &TrainDataset, sink: &mut dyn TrainSink) -> Result<()> {
    train_until(state, data, sink, u64::MAX)
}

/// Like [`train`], but stops after `limit` outer steps; the checkpoint written
/// at the stopping point resumes bit-exactly.
pub fn train_until(
    state: &mut TrainerState,
    data: &TrainDataset,
    sink: &mut dyn TrainSink,
    limit: u64,
) -> Result<()> {
    data.validate()?;
    if data.n_regions() != state.n_regions() {
        return Err(Error::config(format!(
            "dataset has {} regions, trainer was built for {}",
            data.n_regions(),
            state.n_regions()
        )));
    }
    while state.outer_step < state.total_outer.min(limit) {
        for _ in 0..state.train_cfg.t_l {
            let lr = cosine_lr(state.patch_steps, state.total_outer * state.train_cfg.t_l, state.train_cfg.lr);
            let loss = patch_phase_step(state, data)?;
            sink.metrics(&MetricRecord {
                global_step: state.patch_steps + state.graph_steps,
                outer_step: state.outer_step,
                phase: Phase::Patch,
                loss,
                lr,
            })?;
        }
        for _ in 0..state.train_cfg.t_g {
            let lr = cosine_lr(state.graph_steps, state.total_outer * state.train_cfg.t_g, state.train_cfg.lr);
            let loss = graph_phase_step(state, data)?;
            sink.metrics(&MetricRecord {
                global_step: state.patch_steps + state.graph_steps,
                outer_step: state.outer_step,
                phase: Phase::Graph,
                loss,
                lr,
            })?;
        }
        state.outer_step += 1;
        let bytes = state.encode_checkpoint()?;
        sink.checkpoint(state.outer_step, &bytes)?;
    }
    Ok(())
}

/// Rebuild just the query networks from checkpoint tensors, for feature
/// extraction and explanation. The momentum copies, queues and optimizer
/// state are ignored.
pub fn load_query_model(
    model_cfg: &ModelConfig,
    entries: &BTreeMap<String, Tensor>,
) -> Result<(EncoderParams, GraphParams)> {
    let mut enc = EncoderParams::init(model_cfg, Stream::root(0).derive("load.enc"))?;
    let mut gcn = GraphParams::init(model_cfg, Stream::root(0).derive("load.gcn"))?;
    let mut missing: Vec<String> = Vec::new();
    {
        let mut fill = |name: String, t: &mut Tensor, _k: ParamKind| match entries.get(&name) {
            Some(src) if src.dims() == t.dims() => *t = src.clone(),
            Some(src) => {
                missing.push(format!("{name}: dims {:?} vs expected {:?}", src.dims(), t.dims()))
            }
            None => missing.push(name),
        };
        enc.visit_mut("enc.q", &mut fill);
        gcn.visit_mut("gcn.q", &mut fill);
    }
    if missing.is_empty() {
        Ok((enc, gcn))
    } else {
        Err(Error::config(format!(
            "checkpoint incompatible with model config: {}",
            missing.join(", ")
        )))
    }
}

/// Eval-mode frozen features for one subject: the pooled embedding (head
/// discarded) and the per-node GCN features it is the mean of.
pub fn extract_subject_features(
    enc: &mut EncoderParams,
    gcn: &mut GraphParams,
    subject: &TrainSubject,
    centers_norm: &[[f32; 3]],
) -> Result<(Tensor, Tensor)> {
    let batch = stack_patches(&subject.patches.iter().collect::<Vec<_>>())?;
    let centers = stack_centers(centers_norm)?;
    let mut tape = Tape::new();
    let mut ctx = FwdCtx::new(&mut tape, BnMode::Eval, false);
    let h = enc.forward(&mut ctx, "enc.q", &batch, &centers)?;
    let hp = gcn.gcn_forward(&mut ctx, "gcn.q", h, &subject.a_norm)?;
    let pooled = gcn.embed(&mut ctx, "gcn.q", hp, false)?;
    Ok((tape.value(pooled).clone(), tape.value(hp).clone()))
}
