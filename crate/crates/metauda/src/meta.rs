//! Online meta-adaptation of the detector's initial condition: short inner
//! adaptation windows whose validation loss drives an outer update of the
//! starting parameters, plus the non-meta baselines the ablation ladder
//! compares against. All trainers are deterministic per seed and resumable
//! bitwise from a checkpoint.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    build_alignment_heads, init_head_params, uda_loss, AlignmentConfig, AlignmentHeads, LossValues,
};
use crate::autodiff::{
    grad, grad_vars, live_record_count, peak_record_count, reset_peak_record_count, BoundParams,
    Gradients, Graph, ParameterSet, TensorData, Var,
};
use crate::data::{DetectionSample, SealedLabels, SplitQuartet};
use crate::detector::{detection_loss, detector_forward, init_detector_params, DetectorConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaMode {
    #[serde(rename = "exact-second-order")]
    ExactSecondOrder,
    #[serde(rename = "first-order")]
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerStyle {
    /// Each inner update in a round restarts from the round's initial
    /// parameters (the literal reading of the update rule).
    Restart,
    /// Inner updates chain: each starts from the previous adapted point.
    Chained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate; also the baselines' learning rate.
    pub beta: f64,
    /// Inner interval: adaptation steps per outer update.
    pub m: usize,
    pub mode: MetaMode,
    pub inner_style: InnerStyle,
    pub epochs: usize,
    /// Momentum of the outer update (inner updates are momentum-free so the
    /// inner step stays differentiable).
    pub momentum: f64,
    /// Weight of the adversarial alignment term in L_uda.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.001,
            beta: 0.001,
            m: 3,
            mode: MetaMode::ExactSecondOrder,
            inner_style: InnerStyle::Restart,
            epochs: 10,
            momentum: 0.9,
            lambda: 0.1,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be non-negative"));
        }
        if self.m < 1 {
            return Err(Error::config("m must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be non-negative"));
        }
        Ok(())
    }
}

/// Outer learning rate: beta for the first half of the epoch budget, then
/// one decade lower (the fine-tune epoch inherits the decayed rate).
pub fn outer_lr(cfg: &MetaConfig, epoch: u64) -> f64 {
    if (epoch as usize) * 2 < cfg.epochs {
        cfg.beta
    } else {
        cfg.beta * 0.1
    }
}

/// A conventional full-unroll meta trainer would keep one differentiation
/// record per inner step of the whole horizon alive at once, plus the outer
/// record; the online scheme caps this at m + 1. Cost-comparison stub only.
pub fn full_unroll_record_estimate(inner_steps_per_epoch: usize) -> usize {
    inner_steps_per_epoch + 1
}

// ---------------------------------------------------------------------------
// Sample streams with deterministic per-epoch shuffling. The shuffle order
// is a pure function of (seed, stream id, epoch), so a cursor of
// (epoch, pos) is the complete stream state.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub pos: u64,
}

#[derive(Debug)]
struct Stream {
    name: &'static str,
    samples: Vec<DetectionSample>,
    seed: u64,
    stream_id: u64,
    cursor: Cursor,
    order: Vec<usize>,
    reads: u64,
}

fn epoch_order(seed: u64, stream_id: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream ids start at 1 so no shuffle shares the parameter-init stream 0.
    rng.set_stream(((stream_id + 1) << 32) | (epoch & 0xffff_ffff));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

impl Stream {
    fn new(
        name: &'static str,
        samples: Vec<DetectionSample>,
        seed: u64,
        stream_id: u64,
        cursor: Cursor,
    ) -> Stream {
        let order = epoch_order(seed, stream_id, cursor.epoch, samples.len());
        Stream { name, samples, seed, stream_id, cursor, order, reads: 0 }
    }

    fn next(&mut self) -> &DetectionSample {
        if self.cursor.pos as usize >= self.samples.len() {
            self.cursor.epoch += 1;
            self.cursor.pos = 0;
            self.order = epoch_order(self.seed, self.stream_id, self.cursor.epoch, self.samples.len());
            log::debug!("stream {} wrapped into epoch {}", self.name, self.cursor.epoch);
        }
        let idx = self.order[self.cursor.pos as usize];
        self.cursor.pos += 1;
        self.reads += 1;
        &self.samples[idx]
    }
}

const STREAM_SOURCE_TRAIN: usize = 0;
const STREAM_TARGET_TRAIN: usize = 1;
const STREAM_SOURCE_VAL: usize = 2;
const STREAM_TARGET_VAL: usize = 3;

// ---------------------------------------------------------------------------
// Trainer state and logging.

/// Everything needed to resume a run bitwise: parameters, outer momentum
/// buffers, counters, stream cursors, and the seed from which any remaining
/// randomness is re-derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: ParameterSet,
    pub velocity: Gradients,
    pub rounds: u64,
    pub step: u64,
    pub finetune_steps: u64,
    pub cursors: [Cursor; 4],
    pub seed: u64,
    /// Snapshot of the meta-learned initial condition, taken when the final
    /// plain-adaptation epoch begins.
    pub pre_finetune: Option<ParameterSet>,
}

impl TrainerState {
    fn fresh(params: ParameterSet, seed: u64) -> TrainerState {
        TrainerState {
            velocity: Gradients::zeros_like(&params),
            params,
            rounds: 0,
            step: 0,
            finetune_steps: 0,
            cursors: [Cursor::default(); 4],
            seed,
            pre_finetune: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub l_det: f64,
    pub l_img: f64,
    pub l_inst: f64,
    pub l_da: f64,
    pub l_uda: f64,
    /// Accumulated validation meta-loss of the round this step closed, if
    /// any (meta training only).
    pub meta_loss: Option<f64>,
}

fn row(step: u64, v: &LossValues, meta_loss: Option<f64>) -> LogRow {
    LogRow {
        step,
        l_det: v.l_det,
        l_img: v.l_img,
        l_inst: v.l_inst,
        l_da: v.l_da,
        l_uda: v.l_uda,
        meta_loss,
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub state: TrainerState,
    pub log: Vec<LogRow>,
    /// High-water mark of live differentiation records on this thread.
    pub peak_records: usize,
    /// Samples consumed per stream name.
    pub reads: BTreeMap<&'static str, u64>,
}

fn init_params(det_cfg: &DetectorConfig, heads: &AlignmentHeads, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_detector_params(det_cfg, &mut rng);
    params.extend(init_head_params(heads, &mut rng));
    params
}

fn check_finite(g: &Gradients, what: &'static str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { op: what, node: 0, detail: "non-finite gradient".into() })
    }
}

/// Momentum SGD: v <- mu v + g; theta <- theta - lr v.
fn momentum_update(params: &mut ParameterSet, vel: &mut Gradients, g: &Gradients, lr: f64, mu: f64) {
    for (path, gt) in g.0.iter() {
        let v = vel.0.get_mut(path).expect("velocity path mismatch");
        for (vv, gv) in v.data.iter_mut().zip(&gt.data) {
            *vv = mu * *vv + gv;
        }
        let t = params.0.get_mut(path).expect("parameter path mismatch");
        for (pv, vv) in t.data.iter_mut().zip(&v.data) {
            *pv -= lr * vv;
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable inner step and the per-round meta-gradient.

/// One momentum-free gradient step on an arbitrary scalar loss, at the value
/// level: theta' = theta - alpha * grad(loss). Returns the loss value too.
pub fn inner_step_with<F>(
    params: &ParameterSet,
    alpha: f64,
    loss_fn: F,
) -> Result<(ParameterSet, f64)>
where
    F: FnOnce(&BoundParams) -> Result<Var>,
{
    let graph = Graph::new();
    let bound = BoundParams::bind(&graph, params);
    let loss = loss_fn(&bound)?;
    let g = grad(&loss, &bound)?;
    check_finite(&g, "inner_step")?;
    let mut updated = params.clone();
    updated.sgd_step(&g, alpha);
    Ok((updated, loss.value()))
}

/// The adapted parameters as differentiable graph nodes:
/// theta' = theta - alpha * grad(train_loss), with the gradient recorded so
/// a second backward pass can differentiate through it.
fn adapted_vars(
    bound: &BoundParams,
    at: &BTreeMap<String, Var>,
    train_loss: &Var,
    alpha: f64,
) -> Result<BTreeMap<String, Var>> {
    let wrt = BoundParams { graph: bound.graph.clone(), vars: at.clone() };
    let g = grad_vars(train_loss, &wrt)?;
    Ok(at
        .iter()
        .zip(g.iter())
        .map(|((path, theta), gi)| (path.clone(), theta.sub(&gi.scale(alpha))))
        .collect())
}

/// Exact meta-gradient of one restart-style round step: build the inner
/// update in a single record and backpropagate the validation loss through
/// it to the round's initial parameters.
pub fn exact_meta_gradient<F, G>(
    params: &ParameterSet,
    alpha: f64,
    train_loss: F,
    val_loss: G,
) -> Result<(f64, Gradients)>
where
    F: FnOnce(&BoundParams) -> Result<Var>,
    G: FnOnce(&BoundParams) -> Result<Var>,
{
    let graph = Graph::new();
    let bound = BoundParams::bind(&graph, params);
    let l_tr = train_loss(&bound)?;
    let updated = adapted_vars(&bound, &bound.vars, &l_tr, alpha)?;
    let adapted = BoundParams { graph: graph.clone(), vars: updated };
    let l_val = val_loss(&adapted)?;
    let mg = grad(&l_val, &bound)?;
    graph.check()?;
    check_finite(&mg, "meta_gradient")?;
    Ok((l_val.value(), mg))
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Sum of the validation losses over the round's m adapted points.
    pub meta_loss: f64,
    pub inner: Vec<LossValues>,
    pub peak_records: usize,
}

// ---------------------------------------------------------------------------
// The meta trainer.

pub struct MetaTrainer {
    det_cfg: DetectorConfig,
    heads: AlignmentHeads,
    cfg: MetaConfig,
    streams: [Stream; 4],
    pub state: TrainerState,
    pub log: Vec<LogRow>,
    peak_records: usize,
}

impl MetaTrainer {
    pub fn new(
        det_cfg: &DetectorConfig,
        align_cfg: &AlignmentConfig,
        cfg: &MetaConfig,
        quartet: &SplitQuartet,
    ) -> Result<MetaTrainer> {
        let heads = build_alignment_heads(det_cfg, align_cfg)?;
        let params = init_params(det_cfg, &heads, cfg.seed);
        let state = TrainerState::fresh(params, cfg.seed);
        Self::resume(det_cfg, align_cfg, cfg, quartet, state)
    }

    /// Rebuild a trainer around a restored state; continuing from it yields
    /// the same trajectory as the uninterrupted run.
    pub fn resume(
        det_cfg: &DetectorConfig,
        align_cfg: &AlignmentConfig,
        cfg: &MetaConfig,
        quartet: &SplitQuartet,
        state: TrainerState,
    ) -> Result<MetaTrainer> {
        cfg.validate()?;
        quartet.validate()?;
        let heads = build_alignment_heads(det_cfg, align_cfg)?;
        let seed = state.seed;
        let streams = [
            Stream::new(
                "source-train",
                quartet.source_train.clone(),
                seed,
                STREAM_SOURCE_TRAIN as u64,
                state.cursors[STREAM_SOURCE_TRAIN],
            ),
            Stream::new(
                "target-train",
                quartet.target_train.clone(),
                seed,
                STREAM_TARGET_TRAIN as u64,
                state.cursors[STREAM_TARGET_TRAIN],
            ),
            Stream::new(
                "source-val",
                quartet.source_val.clone(),
                seed,
                STREAM_SOURCE_VAL as u64,
                state.cursors[STREAM_SOURCE_VAL],
            ),
            Stream::new(
                "target-val",
                quartet.target_val.clone(),
                seed,
                STREAM_TARGET_VAL as u64,
                state.cursors[STREAM_TARGET_VAL],
            ),
        ];
        Ok(MetaTrainer {
            det_cfg: det_cfg.clone(),
            heads,
            cfg: cfg.clone(),
            streams,
            state,
            log: Vec::new(),
            peak_records: 0,
        })
    }

    pub fn rounds_per_epoch(&self) -> u64 {
        (self.streams[STREAM_SOURCE_TRAIN].samples.len() as u64 / self.cfg.m as u64).max(1)
    }

    fn epoch(&self) -> u64 {
        self.state.rounds / self.rounds_per_epoch()
    }

    /// One meta round: m inner adaptations, the accumulated validation
    /// meta-loss, and the outer momentum update of the initial parameters.
    pub fn round(&mut self) -> Result<RoundOutcome> {
        let lr = outer_lr(&self.cfg, self.epoch());
        let base = live_record_count();
        reset_peak_record_count();

        let m = self.cfg.m;
        let mut meta_grad = Gradients::zeros_like(&self.state.params);
        let mut meta_loss = 0.0;
        let mut inner = Vec::with_capacity(m);

        match (self.cfg.mode, self.cfg.inner_style) {
            (MetaMode::ExactSecondOrder, InnerStyle::Restart) => {
                for _ in 0..m {
                    let (s_tr, t_tr, s_va, t_va) = self.draw_batches();
                    let det_cfg = &self.det_cfg;
                    let heads = &self.heads;
                    let lambda = self.cfg.lambda;
                    let mut train_values = LossValues::default();
                    let (lv, mg) = exact_meta_gradient(
                        &self.state.params,
                        self.cfg.alpha,
                        |bound| {
                            let l = uda_loss(det_cfg, bound, heads, &s_tr, &t_tr, lambda)?;
                            train_values = l.values();
                            Ok(l.l_uda)
                        },
                        |adapted| {
                            Ok(uda_loss(det_cfg, adapted, heads, &s_va, &t_va, lambda)?.l_uda)
                        },
                    )?;
                    meta_loss += lv;
                    meta_grad.add_assign(&mg);
                    inner.push(train_values);
                    self.state.step += 1;
                }
            }
            (MetaMode::ExactSecondOrder, InnerStyle::Chained) => {
                // One record holds the whole chain; the meta-loss sum is
                // differentiated once at the end.
                let graph = Graph::new();
                let bound = BoundParams::bind(&graph, &self.state.params);
                let mut current = bound.vars.clone();
                let mut meta_sum: Option<Var> = None;
                for _ in 0..m {
                    let (s_tr, t_tr, s_va, t_va) = self.draw_batches();
                    let at = BoundParams { graph: graph.clone(), vars: current.clone() };
                    let l_tr =
                        uda_loss(&self.det_cfg, &at, &self.heads, &s_tr, &t_tr, self.cfg.lambda)?;
                    inner.push(l_tr.values());
                    current = adapted_vars(&bound, &current, &l_tr.l_uda, self.cfg.alpha)?;
                    let adapted = BoundParams { graph: graph.clone(), vars: current.clone() };
                    let l_val = uda_loss(
                        &self.det_cfg,
                        &adapted,
                        &self.heads,
                        &s_va,
                        &t_va,
                        self.cfg.lambda,
                    )?;
                    meta_loss += l_val.l_uda.value();
                    meta_sum = Some(match meta_sum {
                        Some(acc) => acc.add(&l_val.l_uda),
                        None => l_val.l_uda,
                    });
                    self.state.step += 1;
                }
                let mg = grad(&meta_sum.expect("m >= 1"), &bound)?;
                graph.check()?;
                check_finite(&mg, "meta_gradient")?;
                meta_grad.add_assign(&mg);
            }
            (MetaMode::FirstOrder, style) => {
                // The Jacobian of theta' with respect to theta is treated as
                // identity: gradients are taken at the adapted point only.
                let mut start = self.state.params.clone();
                for _ in 0..m {
                    let (s_tr, t_tr, s_va, t_va) = self.draw_batches();
                    let det_cfg = &self.det_cfg;
                    let heads = &self.heads;
                    let lambda = self.cfg.lambda;
                    let mut train_values = LossValues::default();
                    let (adapted, _) = inner_step_with(&start, self.cfg.alpha, |bound| {
                        let l = uda_loss(det_cfg, bound, heads, &s_tr, &t_tr, lambda)?;
                        train_values = l.values();
                        Ok(l.l_uda)
                    })?;
                    inner.push(train_values);
                    let graph = Graph::new();
                    let bound = BoundParams::bind(&graph, &adapted);
                    let l_val =
                        uda_loss(det_cfg, &bound, heads, &s_va, &t_va, lambda)?;
                    let mg = grad(&l_val.l_uda, &bound)?;
                    check_finite(&mg, "meta_gradient")?;
                    meta_loss += l_val.l_uda.value();
                    meta_grad.add_assign(&mg);
                    if style == InnerStyle::Chained {
                        start = adapted;
                    }
                    self.state.step += 1;
                }
            }
        }

        momentum_update(
            &mut self.state.params,
            &mut self.state.velocity,
            &meta_grad,
            lr,
            self.cfg.momentum,
        );
        self.state.rounds += 1;
        self.state.cursors = [
            self.streams[0].cursor,
            self.streams[1].cursor,
            self.streams[2].cursor,
            self.streams[3].cursor,
        ];

        let peak = peak_record_count().saturating_sub(base);
        self.peak_records = self.peak_records.max(peak);
        if peak > m + 1 {
            return Err(Error::contract(format!(
                "online-record bound violated: {peak} live records in a round, limit {}",
                m + 1
            )));
        }
        for (i, v) in inner.iter().enumerate() {
            let step = self.state.step - (m - i) as u64;
            let ml = if i + 1 == m { Some(meta_loss) } else { None };
            self.log.push(row(step, v, ml));
        }
        Ok(RoundOutcome { meta_loss, inner, peak_records: peak })
    }

    fn draw_batches(
        &mut self,
    ) -> (DetectionSample, DetectionSample, DetectionSample, DetectionSample) {
        let s_tr = self.streams[STREAM_SOURCE_TRAIN].next().clone();
        let t_tr = self.streams[STREAM_TARGET_TRAIN].next().clone();
        let s_va = self.streams[STREAM_SOURCE_VAL].next().clone();
        let t_va = self.streams[STREAM_TARGET_VAL].next().clone();
        (s_tr, t_tr, s_va, t_va)
    }

    /// One plain (single-level) adaptation step, used by the final
    /// fine-tuning epoch after meta training.
    fn finetune_step(&mut self) -> Result<()> {
        let lr = outer_lr(&self.cfg, self.cfg.epochs as u64);
        let s_tr = self.streams[STREAM_SOURCE_TRAIN].next().clone();
        let t_tr = self.streams[STREAM_TARGET_TRAIN].next().clone();
        let graph = Graph::new();
        let bound = BoundParams::bind(&graph, &self.state.params);
        let loss = uda_loss(&self.det_cfg, &bound, &self.heads, &s_tr, &t_tr, self.cfg.lambda)?;
        let g = grad(&loss.l_uda, &bound)?;
        check_finite(&g, "finetune_step")?;
        momentum_update(
            &mut self.state.params,
            &mut self.state.velocity,
            &g,
            lr,
            self.cfg.momentum,
        );
        self.state.finetune_steps += 1;
        self.state.step += 1;
        self.state.cursors[STREAM_SOURCE_TRAIN] = self.streams[STREAM_SOURCE_TRAIN].cursor;
        self.state.cursors[STREAM_TARGET_TRAIN] = self.streams[STREAM_TARGET_TRAIN].cursor;
        let v = loss.values();
        self.log.push(row(self.state.step, &v, None));
        Ok(())
    }

    /// Run the remaining budget: meta rounds for the epoch budget, then one
    /// plain-adaptation epoch from the meta-learned initial condition.
    pub fn train(&mut self) -> Result<TrainResult> {
        let total_rounds = self.cfg.epochs as u64 * self.rounds_per_epoch();
        while self.state.rounds < total_rounds {
            self.round()?;
        }
        if self.state.pre_finetune.is_none() {
            self.state.pre_finetune = Some(self.state.params.clone());
        }
        let finetune_total = self.streams[STREAM_SOURCE_TRAIN].samples.len() as u64;
        while self.state.finetune_steps < finetune_total {
            self.finetune_step()?;
        }
        Ok(self.result())
    }

    pub fn result(&self) -> TrainResult {
        TrainResult {
            state: self.state.clone(),
            log: self.log.clone(),
            peak_records: self.peak_records,
            reads: self.streams.iter().map(|s| (s.name, s.reads)).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Non-meta baselines. All share the seeded initialization, the learning-rate
// schedule (rate beta), and the momentum outer update, so ladder differences
// come from the objective and training scheme alone.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BaselineKind {
    SourceOnly,
    DaJoint,
    Oracle,
}

pub struct BaselineTrainer {
    det_cfg: DetectorConfig,
    heads: AlignmentHeads,
    cfg: MetaConfig,
    kind: BaselineKind,
    streams: Vec<Stream>,
    pub state: TrainerState,
    pub log: Vec<LogRow>,
}

impl BaselineTrainer {
    fn build(
        det_cfg: &DetectorConfig,
        align_cfg: &AlignmentConfig,
        cfg: &MetaConfig,
        kind: BaselineKind,
        streams: Vec<Stream>,
        state: Option<TrainerState>,
    ) -> Result<BaselineTrainer> {
        cfg.validate()?;
        let heads = build_alignment_heads(det_cfg, align_cfg)?;
        let state = match state {
            Some(s) => s,
            None => TrainerState::fresh(init_params(det_cfg, &heads, cfg.seed), cfg.seed),
        };
        Ok(BaselineTrainer {
            det_cfg: det_cfg.clone(),
            heads,
            cfg: cfg.clone(),
            kind,
            streams,
            state,
            log: Vec::new(),
        })
    }

    /// Supervised training on the labeled source stream only.
    pub fn source_only(
        det_cfg: &DetectorConfig,
        align_cfg: &AlignmentConfig,
        cfg: &MetaConfig,
        quartet: &SplitQuartet,
    ) -> Result<BaselineTrainer> {
        quartet.validate()?;
        let streams = vec![Stream::new(
            "source-train",
            quartet.source_train.clone(),
            cfg.seed,
            STREAM_SOURCE_TRAIN as u64,
            Cursor::default(),
        )];
        Self::build(det_cfg, align_cfg, cfg, BaselineKind::SourceOnly, streams, None)
    }

    /// Single-level adversarial adaptation: minimizes L_uda jointly.
    pub fn da_joint(
        det_cfg: &DetectorConfig,
        align_cfg: &AlignmentConfig,
        cfg: &MetaConfig,
        quartet: &SplitQuartet,
    ) -> Result<BaselineTrainer> {
        quartet.validate()?;
        let streams = vec![
            Stream::new(
                "source-train",
                quartet.source_train.clone(),
                cfg.seed,
                STREAM_SOURCE_TRAIN as u64,
                Cursor::default(),
            ),
            Stream::new(
                "target-train",
                quartet.target_train.clone(),
                cfg.seed,
                STREAM_TARGET_TRAIN as u64,
                Cursor::default(),
            ),
        ];
        Self::build(det_cfg, align_cfg, cfg, BaselineKind::DaJoint, streams, None)
    }

    /// Upper bound: supervised training on the full training pool of both
    /// domains (train and validation streams), with the target labels
    /// unsealed. Fails if the labels were never generated.
    pub fn oracle(
        det_cfg: &DetectorConfig,
        align_cfg: &AlignmentConfig,
        cfg: &MetaConfig,
        quartet: &SplitQuartet,
        sealed: &SealedLabels,
    ) -> Result<BaselineTrainer> {
        quartet.validate()?;
        if sealed.is_empty() {
            return Err(Error::contract(
                "oracle baseline requires sealed target labels, none were generated",
            ));
        }
        let mut labeled =
            Vec::with_capacity(quartet.target_train.len() + quartet.target_val.len());
        for s in quartet.target_train.iter().chain(&quartet.target_val) {
            let mut sample = s.clone();
            sample.labels = Some(sealed.unseal(&s.id)?.to_vec());
            labeled.push(sample);
        }
        let mut source: Vec<DetectionSample> = quartet.source_train.clone();
        source.extend(quartet.source_val.iter().cloned());
        let streams = vec![
            Stream::new(
                "source-train",
                source,
                cfg.seed,
                STREAM_SOURCE_TRAIN as u64,
                Cursor::default(),
            ),
            Stream::new(
                "target-train",
                labeled,
                cfg.seed,
                STREAM_TARGET_TRAIN as u64,
                Cursor::default(),
            ),
        ];
        Self::build(det_cfg, align_cfg, cfg, BaselineKind::Oracle, streams, None)
    }

    fn epoch_len(&self) -> u64 {
        self.streams[0].samples.len() as u64
    }

    pub fn step(&mut self) -> Result<()> {
        let epoch = self.state.step / self.epoch_len();
        let lr = outer_lr(&self.cfg, epoch);
        let graph = Graph::new();
        let values;
        let g;
        let supervised = |bound: &BoundParams, sample: &DetectionSample| -> Result<crate::autodiff::Var> {
            let fwd = detector_forward(&self.det_cfg, bound, &sample.image)?;
            let labels = sample.labels.as_ref().expect("supervised stream is labeled");
            Ok(detection_loss(
                &self.det_cfg,
                bound,
                &fwd,
                labels,
                sample.width() as f64,
                sample.height() as f64,
            )?
            .total)
        };
        match self.kind {
            BaselineKind::SourceOnly => {
                let sample = self.streams[0].next().clone();
                let bound = BoundParams::bind(&graph, &self.state.params);
                let loss = supervised(&bound, &sample)?;
                let total = loss.value();
                values = LossValues {
                    l_det: total,
                    l_img: 0.0,
                    l_inst: 0.0,
                    l_da: 0.0,
                    l_uda: total,
                };
                g = grad(&loss, &bound)?;
            }
            BaselineKind::Oracle => {
                // Both domains supervised: one sample from each per step.
                let src = self.streams[0].next().clone();
                let tgt = self.streams[1].next().clone();
                let bound = BoundParams::bind(&graph, &self.state.params);
                let loss = supervised(&bound, &src)?.add(&supervised(&bound, &tgt)?);
                let total = loss.value();
                values = LossValues {
                    l_det: total,
                    l_img: 0.0,
                    l_inst: 0.0,
                    l_da: 0.0,
                    l_uda: total,
                };
                g = grad(&loss, &bound)?;
            }
            BaselineKind::DaJoint => {
                let source = self.streams[0].next().clone();
                let target = self.streams[1].next().clone();
                let bound = BoundParams::bind(&graph, &self.state.params);
                let loss = uda_loss(
                    &self.det_cfg,
                    &bound,
                    &self.heads,
                    &source,
                    &target,
                    self.cfg.lambda,
                )?;
                values = loss.values();
                g = grad(&loss.l_uda, &bound)?;
            }
        }
        check_finite(&g, "baseline_step")?;
        momentum_update(
            &mut self.state.params,
            &mut self.state.velocity,
            &g,
            lr,
            self.cfg.momentum,
        );
        self.state.step += 1;
        for (i, s) in self.streams.iter().enumerate() {
            self.state.cursors[i] = s.cursor;
        }
        self.log.push(row(self.state.step, &values, None));
        Ok(())
    }

    /// One epoch more than the meta epoch budget, matching the meta trainer's
    /// total pass count (meta epochs + its fine-tune epoch).
    pub fn train(&mut self) -> Result<TrainResult> {
        let total = (self.cfg.epochs as u64 + 1) * self.epoch_len();
        while self.state.step < total {
            self.step()?;
        }
        Ok(TrainResult {
            state: self.state.clone(),
            log: self.log.clone(),
            peak_records: 1,
            reads: self.streams.iter().map(|s| (s.name, s.reads)).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpointing: a versioned container of little-endian f64 tensors plus
// optimizer buffers, counters, and the seed.

const CHECKPOINT_MAGIC: &[u8; 8] = b"METAUDA\0";
const CHECKPOINT_VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_tensor_map(w: &mut impl Write, map: &BTreeMap<String, TensorData>) -> Result<()> {
    write_u64(w, map.len() as u64)?;
    for (path, t) in map {
        write_u64(w, path.len() as u64)?;
        w.write_all(path.as_bytes())?;
        write_u64(w, t.shape.len() as u64)?;
        for &d in &t.shape {
            write_u64(w, d as u64)?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensor_map(r: &mut impl Read) -> Result<BTreeMap<String, TensorData>> {
    let count = read_u64(r)?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let path_len = read_u64(r)? as usize;
        let mut path = vec![0u8; path_len];
        r.read_exact(&mut path)?;
        let path = String::from_utf8(path)
            .map_err(|_| Error::checkpoint("parameter path is not UTF-8"))?;
        let ndim = read_u64(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        map.insert(path, TensorData::new(shape, data));
    }
    Ok(map)
}

pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_u64(&mut w, state.seed)?;
    write_u64(&mut w, state.rounds)?;
    write_u64(&mut w, state.step)?;
    write_u64(&mut w, state.finetune_steps)?;
    for c in &state.cursors {
        write_u64(&mut w, c.epoch)?;
        write_u64(&mut w, c.pos)?;
    }
    write_u64(&mut w, u64::from(state.pre_finetune.is_some()))?;
    write_tensor_map(&mut w, &state.params.0)?;
    write_tensor_map(&mut w, &state.velocity.0)?;
    if let Some(pre) = &state.pre_finetune {
        write_tensor_map(&mut w, &pre.0)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint("bad magic"));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!("unsupported version {version}")));
    }
    let seed = read_u64(&mut r)?;
    let rounds = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let finetune_steps = read_u64(&mut r)?;
    let mut cursors = [Cursor::default(); 4];
    for c in &mut cursors {
        c.epoch = read_u64(&mut r)?;
        c.pos = read_u64(&mut r)?;
    }
    let has_pre = read_u64(&mut r)? != 0;
    let params = ParameterSet(read_tensor_map(&mut r)?);
    let velocity = Gradients(read_tensor_map(&mut r)?);
    let pre_finetune = if has_pre { Some(ParameterSet(read_tensor_map(&mut r)?)) } else { None };
    Ok(TrainerState {
        params,
        velocity,
        rounds,
        step,
        finetune_steps,
        cursors,
        seed,
        pre_finetune,
    })
}
