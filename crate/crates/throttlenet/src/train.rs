//! Two-phase training: the data path under random gating, then the gate
//! controller against the combined loss with the data path frozen.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchError, EvalCounters, NetworkSpec, ParamStore};
use crate::data::Dataset;
use crate::data::BatchStream;
use crate::gating::{complexity_penalty, GateError, PenaltySpec};
use crate::rng::substream;
use crate::strategies::{
    concrete_gate_nodes, independent_plan, log_prob_node, nested_plan, per_module_k_plan,
    plan_from_values, sample_bernoulli, sample_logistic, AlphaSchedule, ControllerParams,
    GateLayout, GatePlan, StrategyError,
};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug)]
pub enum TrainError {
    Diverged { phase: Phase, epoch: usize, step: usize, value: f64 },
    Config(String),
    Arch(ArchError),
    Strategy(StrategyError),
    Gate(GateError),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged { phase, epoch, step, value } => write!(
                f,
                "{phase:?} training diverged at epoch {epoch} step {step}: loss = {value}"
            ),
            TrainError::Config(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::Arch(e) => write!(f, "{e}"),
            TrainError::Strategy(e) => write!(f, "{e}"),
            TrainError::Gate(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ArchError> for TrainError {
    fn from(e: ArchError) -> Self {
        TrainError::Arch(e)
    }
}

impl From<StrategyError> for TrainError {
    fn from(e: StrategyError) -> Self {
        TrainError::Strategy(e)
    }
}

impl From<GateError> for TrainError {
    fn from(e: GateError) -> Self {
        TrainError::Gate(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Datapath,
    Controller,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingOrder {
    Nested,
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    Reinforce,
    Concrete { temperature: f64 },
}

/// Cosine annealing with warm restarts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t0: f64,
    pub t_mult: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule { eta_max: 0.05, eta_min: 0.0, t0: 10.0, t_mult: 2.0 }
    }
}

/// Learning rate at fractional epoch `progress` under warm restarts:
/// eta_min + (eta_max - eta_min)/2 * (1 + cos(pi * t_cur / t_i)), with the
/// period scaling by t_mult at every restart.
pub fn cosine_lr(progress: f64, sched: &CosineSchedule) -> f64 {
    assert!(progress >= 0.0 && sched.t0 > 0.0 && sched.t_mult >= 1.0);
    let mut t_cur = progress;
    let mut t_i = sched.t0;
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i *= sched.t_mult;
    }
    sched.eta_min
        + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
}

/// Training-time distribution of the control signal u.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UDistribution {
    Uniform01,
    /// Uniform[t, 1] with t = max(0, t0 - step * epoch).
    Annealed { t0: f64, step: f64 },
}

impl UDistribution {
    pub fn lower_bound(&self, epoch: usize) -> f64 {
        match self {
            UDistribution::Uniform01 => 0.0,
            UDistribution::Annealed { t0, step } => (t0 - step * epoch as f64).max(0.0),
        }
    }

    pub fn sample(&self, epoch: usize, rng: &mut rand::rngs::StdRng) -> f64 {
        use rand::Rng;
        let lo = self.lower_bound(epoch);
        if lo >= 1.0 {
            1.0
        } else {
            rng.random_range(lo..=1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: Option<CosineSchedule>,
    pub penalty: PenaltySpec,
    pub u_distribution: UDistribution,
    pub gating_order: GatingOrder,
    pub estimator: Estimator,
    pub seed: u64,
    /// Draw k ~ DiscreteUniform[0, n] per module instead of one shared u.
    pub per_module_k: bool,
    /// Draw u per example instead of per batch (slower; fidelity mode).
    pub per_example_u: bool,
    /// Moving-average baseline for the score-function estimator.
    pub baseline: bool,
    pub alpha_schedule: AlphaSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::datapath_default()
    }
}

impl TrainConfig {
    /// Phase-1 defaults: SGD momentum 0.9, weight decay 5e-4, cosine
    /// annealing (eta_max 0.05, T0 10, T_mult 2); only the task loss is
    /// optimized.
    pub fn datapath_default() -> Self {
        TrainConfig {
            phase: Phase::Datapath,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerKind::SgdMomentum,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: Some(CosineSchedule::default()),
            penalty: PenaltySpec { lambda: 0.0, ..PenaltySpec::default() },
            u_distribution: UDistribution::Uniform01,
            gating_order: GatingOrder::Nested,
            estimator: Estimator::Reinforce,
            seed: 0,
            per_module_k: false,
            per_example_u: false,
            baseline: false,
            alpha_schedule: AlphaSchedule::default(),
        }
    }

    /// Phase-2 defaults: Adam 1e-3 for REINFORCE (SGD 1e-3 for Concrete),
    /// C^2_dist with lambda 10, u ~ Uniform[0,1].
    pub fn controller_default(estimator: Estimator) -> Self {
        let optimizer = match estimator {
            Estimator::Reinforce => OptimizerKind::Adam,
            Estimator::Concrete { .. } => OptimizerKind::SgdMomentum,
        };
        TrainConfig {
            phase: Phase::Controller,
            epochs: 20,
            batch_size: 64,
            optimizer,
            lr: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            cosine: None,
            penalty: PenaltySpec::default(),
            estimator,
            ..TrainConfig::datapath_default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.penalty.validate().map_err(TrainError::Config)?;
        if let Estimator::Concrete { temperature } = self.estimator {
            if !(temperature > 0.0) {
                return Err(TrainError::Config(format!(
                    "concrete temperature must be positive, got {temperature}"
                )));
            }
        }
        if let Some(c) = &self.cosine {
            if !(c.t0 > 0.0) || c.t_mult < 1.0 || c.eta_max < c.eta_min {
                return Err(TrainError::Config("invalid cosine schedule".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, progress: f64) -> f64 {
        match &self.cosine {
            Some(s) => cosine_lr(progress, s),
            None => self.lr,
        }
    }
}

/// SGD-with-momentum / Adam over a parameter list. Weight decay enters as an
/// L2 gradient term; missing gradients are treated as zero (so momentum and
/// decay still apply, matching the dense masked form).
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.momentum, cfg.weight_decay)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
        }
        self.t += 1;
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let zero;
            let gdata = match grad {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; param.numel()];
                    &zero[..]
                }
            };
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let m = &mut self.m[i];
                    for ((p, &g), mi) in param.data_mut().iter_mut().zip(gdata).zip(m.iter_mut()) {
                        let g = g + self.weight_decay * *p;
                        *mi = self.momentum * *mi + g;
                        *p -= lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((p, &g), mi), vi) in param
                        .data_mut()
                        .iter_mut()
                        .zip(gdata)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let g = g + self.weight_decay * *p;
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// One loss evaluation: task loss L, complexity loss C, combined
/// J = L + lambda*C, and the actual utilization behind C.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub task: f64,
    pub complexity: f64,
    pub combined: f64,
    pub utilization: f64,
}

impl LossBreakdown {
    fn new(task: f64, utilization: f64, u: f64, penalty: &PenaltySpec) -> Self {
        let complexity = complexity_penalty(utilization, u, penalty);
        LossBreakdown { task, complexity, combined: task + penalty.lambda * complexity, utilization }
    }
}

/// Appends cross-entropy + mean to the graph and returns the task-loss node
/// with the full breakdown against the executed plan.
pub fn combined_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    plan: &GatePlan,
    u: f64,
    penalty: &PenaltySpec,
) -> Result<(NodeId, LossBreakdown), TrainError> {
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let task = g.batch_mean(ce);
    let breakdown = LossBreakdown::new(g.value(task).item(), plan.utilization(), u, penalty);
    Ok((task, breakdown))
}

/// One metrics-log line; serialized as JSONL by the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub utilization: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
}

impl TrainReport {
    pub fn final_task_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.l)
    }

    /// Mean task loss of one epoch.
    pub fn epoch_loss(&self, epoch: usize) -> f64 {
        let (mut sum, mut n) = (0.0, 0);
        for r in self.records.iter().filter(|r| r.epoch == epoch) {
            sum += r.l;
            n += 1;
        }
        sum / n.max(1) as f64
    }
}

fn sample_plan(
    layout: &GateLayout,
    cfg: &TrainConfig,
    u: f64,
    rng: &mut rand::rngs::StdRng,
) -> GatePlan {
    if cfg.per_module_k {
        per_module_k_plan(layout, cfg.gating_order == GatingOrder::Independent, rng)
    } else {
        match cfg.gating_order {
            GatingOrder::Nested => nested_plan(layout, u),
            GatingOrder::Independent => independent_plan(layout, u, rng),
        }
    }
}

fn check_finite(value: f64, phase: Phase, epoch: usize, step: usize) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { phase, epoch, step, value })
    }
}

/// Phase 1: trains the data path under randomly sampled gates, optimizing
/// only the task loss. The u distribution and gating order come from the
/// config; all randomness derives from the config seed.
pub fn train_datapath(
    net: &NetworkSpec,
    params: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if cfg.phase != Phase::Datapath {
        return Err(TrainError::Config("train_datapath needs phase = datapath".into()));
    }
    let mut gates_rng = substream(cfg.seed, "gates");
    let stream = BatchStream::new(data, cfg.batch_size, true, cfg.seed);
    let steps_per_epoch = stream.batches_per_epoch();
    let mut opt = Optimizer::from_config(cfg);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        for (step, batch) in stream.epoch(epoch).into_iter().enumerate() {
            let progress = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let lr = cfg.lr_at(progress);
            let breakdown;
            let grads_by_param: Vec<Option<Tensor>>;
            if cfg.per_example_u {
                // Fidelity mode: a fresh (u, plan) per example, gradients
                // averaged over the batch.
                let b = batch.labels.len();
                let mut acc: Vec<Option<Tensor>> = vec![None; params.tensors.len()];
                let (mut lsum, mut csum, mut jsum, mut usum) = (0.0, 0.0, 0.0, 0.0);
                let (c, h, w) = data.input_shape();
                for e in 0..b {
                    let u = cfg.u_distribution.sample(epoch, &mut gates_rng);
                    let plan = sample_plan(&net.layout, cfg, u, &mut gates_rng);
                    let numel = c * h * w;
                    let xe = Tensor::new(
                        vec![1, c, h, w],
                        batch.images.data()[e * numel..(e + 1) * numel].to_vec(),
                    )?;
                    let mut g = Graph::new();
                    let mut counters = EvalCounters::new(&net.layout);
                    let handle = net.forward_with_plan(&mut g, params, true, &xe, &plan, &mut counters)?;
                    let (task, bd) =
                        combined_loss(&mut g, handle.logits, &batch.labels[e..e + 1], &plan, u, &cfg.penalty)?;
                    let mut grads = g.backward(task)?;
                    for (i, &node) in handle.param_nodes.iter().enumerate() {
                        if let Some(gt) = grads.take(node) {
                            let slot = acc[i].get_or_insert_with(|| Tensor::zeros(gt.shape()));
                            for (a, v) in slot.data_mut().iter_mut().zip(gt.data()) {
                                *a += v / b as f64;
                            }
                        }
                    }
                    lsum += bd.task / b as f64;
                    csum += bd.complexity / b as f64;
                    jsum += bd.combined / b as f64;
                    usum += bd.utilization / b as f64;
                }
                breakdown = LossBreakdown { task: lsum, complexity: csum, combined: jsum, utilization: usum };
                grads_by_param = acc;
            } else {
                let u = cfg.u_distribution.sample(epoch, &mut gates_rng);
                let plan = sample_plan(&net.layout, cfg, u, &mut gates_rng);
                let mut g = Graph::new();
                let mut counters = EvalCounters::new(&net.layout);
                let handle =
                    net.forward_with_plan(&mut g, params, true, &batch.images, &plan, &mut counters)?;
                let (task, bd) = combined_loss(&mut g, handle.logits, &batch.labels, &plan, u, &cfg.penalty)?;
                let mut grads = g.backward(task)?;
                grads_by_param = handle.param_nodes.iter().map(|&n| grads.take(n)).collect();
                breakdown = bd;
            }
            check_finite(breakdown.task, cfg.phase, epoch, step)?;
            let mut refs: Vec<&mut Tensor> = params.tensors.iter_mut().collect();
            opt.step(&mut refs, &grads_by_param, lr);
            report.records.push(MetricsRecord {
                phase: cfg.phase,
                epoch,
                step,
                l: breakdown.task,
                c: breakdown.complexity,
                j: breakdown.combined,
                utilization: breakdown.utilization,
                lr,
                seed: cfg.seed,
            });
        }
    }
    Ok(report)
}

/// Phase 2: trains the gate controller against J = L + lambda*C with the
/// data path frozen, using the configured gradient estimator.
pub fn train_controller(
    net: &NetworkSpec,
    params: &ParamStore,
    ctrl: &mut ControllerParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if cfg.phase != Phase::Controller {
        return Err(TrainError::Config("train_controller needs phase = controller".into()));
    }
    let mut gates_rng = substream(cfg.seed, "controller");
    let stream = BatchStream::new(data, cfg.batch_size, true, cfg.seed);
    let mut opt = Optimizer::from_config(cfg);
    let mut report = TrainReport::default();
    let mut baseline: Option<f64> = None;

    for epoch in 0..cfg.epochs {
        ctrl.alpha = cfg.alpha_schedule.alpha_at(epoch);
        for (step, batch) in stream.epoch(epoch).into_iter().enumerate() {
            let u = cfg.u_distribution.sample(epoch, &mut gates_rng);
            let breakdown = match cfg.estimator {
                Estimator::Reinforce => reinforce_step(
                    net, params, ctrl, &batch, u, cfg, &mut gates_rng, &mut opt, &mut baseline,
                )?,
                Estimator::Concrete { temperature } => concrete_step(
                    net, params, ctrl, &batch, u, temperature, cfg, &mut gates_rng, &mut opt,
                )?,
            };
            check_finite(breakdown.combined, cfg.phase, epoch, step)?;
            report.records.push(MetricsRecord {
                phase: cfg.phase,
                epoch,
                step,
                l: breakdown.task,
                c: breakdown.complexity,
                j: breakdown.combined,
                utilization: breakdown.utilization,
                lr: cfg.lr,
                seed: cfg.seed,
            });
        }
    }
    Ok(report)
}

/// Evaluates the frozen data path under a plan and returns the mean task
/// loss (no gradients).
fn frozen_task_loss(
    net: &NetworkSpec,
    params: &ParamStore,
    batch: &crate::data::Batch,
    plan: &GatePlan,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let mut counters = EvalCounters::new(&net.layout);
    let handle = net.forward_with_plan(&mut g, params, false, &batch.images, plan, &mut counters)?;
    let ce = g.softmax_cross_entropy(handle.logits, &batch.labels)?;
    let loss = g.batch_mean(ce);
    Ok(g.value(loss).item())
}

#[allow(clippy::too_many_arguments)]
fn reinforce_step(
    net: &NetworkSpec,
    params: &ParamStore,
    ctrl: &mut ControllerParams,
    batch: &crate::data::Batch,
    u: f64,
    cfg: &TrainConfig,
    rng: &mut rand::rngs::StdRng,
    opt: &mut Optimizer,
    baseline: &mut Option<f64>,
) -> Result<LossBreakdown, TrainError> {
    // Sample hard gates from the current policy.
    let p = ctrl.forward(u)?;
    let sampled = sample_bernoulli(&p, rng);
    let plan = plan_from_values(&sampled, &p, &net.layout)?;

    // Reward signal: J on the executed plan, no gradient through the data path.
    let task = frozen_task_loss(net, params, batch, &plan)?;
    let breakdown = LossBreakdown::new(task, plan.utilization(), u, &cfg.penalty);

    let j_eff = match (cfg.baseline, &baseline) {
        (true, Some(b)) => breakdown.combined - b,
        _ => breakdown.combined,
    };
    if cfg.baseline {
        let prev = baseline.unwrap_or(breakdown.combined);
        *baseline = Some(0.9 * prev + 0.1 * breakdown.combined);
    }

    // d/dpsi E[J] estimated as J * dlogPr(g)/dpsi, taken on the *sampled*
    // gates (enforcement is part of the environment the policy acts in).
    let mut g = Graph::new();
    let cg = ctrl.forward_graph(&mut g, u)?;
    let lp = log_prob_node(&mut g, &cg, &sampled)?;
    let obj = g.scalar_mul(lp, j_eff);
    let mut grads = g.backward(obj)?;

    let grad_list: Vec<Option<Tensor>> = std::iter::once(grads.take(cg.w1))
        .chain(cg.w2.iter().map(|&n| grads.take(n)))
        .collect();
    let mut refs: Vec<&mut Tensor> = std::iter::once(&mut ctrl.w1)
        .chain(ctrl.w2.iter_mut())
        .collect();
    opt.step(&mut refs, &grad_list, cfg.lr);
    Ok(breakdown)
}

#[allow(clippy::too_many_arguments)]
fn concrete_step(
    net: &NetworkSpec,
    params: &ParamStore,
    ctrl: &mut ControllerParams,
    batch: &crate::data::Batch,
    u: f64,
    temperature: f64,
    cfg: &TrainConfig,
    rng: &mut rand::rngs::StdRng,
    opt: &mut Optimizer,
) -> Result<LossBreakdown, TrainError> {
    let mut g = Graph::new();
    let cg = ctrl.forward_graph(&mut g, u)?;
    let draws: Vec<f64> = (0..ctrl.total_components()).map(|_| sample_logistic(rng)).collect();
    let gate_nodes = concrete_gate_nodes(&mut g, &cg, temperature, &draws)?;

    // Group the flat per-component nodes by slot.
    let mut by_slot = Vec::with_capacity(net.layout.slots.len());
    let mut at = 0;
    for slot in &net.layout.slots {
        by_slot.push(gate_nodes[at..at + slot.size].to_vec());
        at += slot.size;
    }

    let handle = net.forward_with_gate_nodes(&mut g, params, &batch.images, &by_slot)?;
    let ce = g.softmax_cross_entropy(handle.logits, &batch.labels)?;
    let task = g.batch_mean(ce);

    // Soft utilization of the relaxed gates (weighted mean of gate values);
    // the continuous stand-in for c(g) that makes C differentiable.
    let mut weighted = Vec::with_capacity(gate_nodes.len());
    let mut total_w = 0.0;
    for (slot, nodes) in net.layout.slots.iter().zip(&by_slot) {
        for (i, &n) in nodes.iter().enumerate() {
            weighted.push(g.scalar_mul(n, slot.weights[i]));
            total_w += slot.weights[i];
        }
    }
    let wsum = g.sum_components(&weighted)?;
    let soft_util = g.scalar_mul(wsum, 1.0 / total_w);

    // Penalty node matching the configured form/exponent.
    let diff = g.add_scalar(soft_util, -u);
    let complexity = match (cfg.penalty.form, cfg.penalty.exponent) {
        (crate::gating::PenaltyForm::Hinge, 1) => g.relu(diff),
        (crate::gating::PenaltyForm::Hinge, _) => {
            let r = g.relu(diff);
            g.elem_mul(r, r)?
        }
        (crate::gating::PenaltyForm::Dist, 1) => {
            let pos = g.relu(diff);
            let neg_in = g.scalar_mul(diff, -1.0);
            let neg = g.relu(neg_in);
            g.add(pos, neg)?
        }
        (crate::gating::PenaltyForm::Dist, _) => g.elem_mul(diff, diff)?,
    };
    let scaled_c = g.scalar_mul(complexity, cfg.penalty.lambda);
    // The gate arithmetic runs on (1,1)-shaped nodes; collapse to the loss
    // node's rank-0 shape before combining (mean of one element is exact).
    let scaled_c = g.batch_mean(scaled_c);
    let j = g.add(task, scaled_c)?;

    let breakdown = LossBreakdown {
        task: g.value(task).item(),
        complexity: g.value(complexity).item(),
        combined: g.value(j).item(),
        utilization: g.value(soft_util).item(),
    };

    let mut grads = g.backward(j)?;
    let grad_list: Vec<Option<Tensor>> = std::iter::once(grads.take(cg.w1))
        .chain(cg.w2.iter().map(|&n| grads.take(n)))
        .collect();
    let mut refs: Vec<&mut Tensor> = std::iter::once(&mut ctrl.w1)
        .chain(ctrl.w2.iter_mut())
        .collect();
    opt.step(&mut refs, &grad_list, cfg.lr);
    Ok(breakdown)
}
