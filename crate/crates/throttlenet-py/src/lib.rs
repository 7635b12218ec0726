//! Python bindings: gate math, the throttleable-network container, desk
//! training, and u-sweeps.
//!
//! Build with `cargo build --release -p throttlenet-py`, then import the
//! produced shared library as `throttlenet_py` (see python/smoke_test.py).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use rand::SeedableRng;

use throttlenet::arch::{build_network, ArchConfig, ArchName, EvalCounters, NetworkSpec, ParamStore};
use throttlenet::data::{synth_dataset, Dataset, SynthKind};
use throttlenet::eval::{self, EvalStrategy, SweepSpec};
use throttlenet::gating::{self, GateVector, PenaltyForm, PenaltySpec};
use throttlenet::strategies;
use throttlenet::tensor::{Graph, Tensor};
use throttlenet::train::{self, TrainConfig, UDistribution};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn gate(values: Vec<f64>, weights: Option<Vec<f64>>) -> PyResult<GateVector> {
    match weights {
        Some(w) => GateVector::new(values, w).map_err(value_err),
        None => GateVector::uniform(values).map_err(value_err),
    }
}

/// k = min(n, floor(u * (n + 1))).
#[pyfunction]
fn nested_k(n: usize, u: f64) -> PyResult<usize> {
    if n == 0 || !(0.0..=1.0).contains(&u) {
        return Err(PyValueError::new_err("need n >= 1 and u in [0, 1]"));
    }
    Ok(strategies::nested_k(n, u))
}

/// Prefix gate 1^k 0^(n-k).
#[pyfunction]
fn nested_gate(n: usize, u: f64) -> PyResult<Vec<f64>> {
    nested_k(n, u)?;
    Ok(strategies::nested_gate(n, u).values().to_vec())
}

/// Binary gate with k random active positions (seeded).
#[pyfunction]
fn independent_gate(n: usize, u: f64, seed: u64) -> PyResult<Vec<f64>> {
    nested_k(n, u)?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    Ok(strategies::independent_gate(n, u, &mut rng).values().to_vec())
}

/// Depthwise-nested active-layer counts per stage (output stage first in
/// the iteration order; stages listed input-first).
#[pyfunction]
fn depthwise_nested_counts(stage_sizes: Vec<usize>, u: f64) -> PyResult<Vec<usize>> {
    if stage_sizes.is_empty() || stage_sizes.iter().any(|&n| n == 0) || !(0.0..=1.0).contains(&u) {
        return Err(PyValueError::new_err("need nonempty positive stage sizes and u in [0, 1]"));
    }
    Ok(strategies::depthwise_nested_counts(&stage_sizes, u))
}

/// g / ||g||_1, with the zero gate mapping to zeros.
#[pyfunction]
fn normalize_gate(values: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(gating::normalize_gate(&gate(values, None)?))
}

/// Weighted fraction of active components.
#[pyfunction]
#[pyo3(signature = (values, weights=None))]
fn utilization(values: Vec<f64>, weights: Option<Vec<f64>>) -> PyResult<f64> {
    Ok(gating::utilization(&gate(values, weights)?))
}

/// hinge: max(0, c-u)^p; dist: |c-u|^p.
#[pyfunction]
fn complexity_penalty(c: f64, u: f64, form: &str, exponent: u32) -> PyResult<f64> {
    let form = match form {
        "hinge" => PenaltyForm::Hinge,
        "dist" => PenaltyForm::Dist,
        other => return Err(PyValueError::new_err(format!("unknown penalty form '{other}'"))),
    };
    let spec = PenaltySpec { form, exponent, lambda: 1.0 };
    spec.validate().map_err(value_err)?;
    Ok(gating::complexity_penalty(c, u, &spec))
}

/// log Pr(g) = sum_i log[g_i p_i + (1 - g_i)(1 - p_i)] for binary g.
#[pyfunction]
fn log_prob(gates: Vec<f64>, p: Vec<f64>) -> PyResult<f64> {
    if gates.len() != p.len() {
        return Err(PyValueError::new_err("gates and p must have equal length"));
    }
    Ok(strategies::log_prob(&gates, &p))
}

/// Independent Bernoulli draws (seeded).
#[pyfunction]
fn sample_bernoulli(p: Vec<f64>, seed: u64) -> Vec<f64> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    strategies::sample_bernoulli(&p, &mut rng)
}

/// Binary-Concrete samples: relaxed for t > 0, hard Bernoulli(p) at t = 0.
#[pyfunction]
fn sample_concrete(p: Vec<f64>, t: f64, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    strategies::sample_concrete(&p, t, &mut rng).map_err(value_err)
}

/// Deterministic test-time gate 1(p > 0.5), ties toward off.
#[pyfunction]
fn test_time_gate(p: Vec<f64>) -> Vec<f64> {
    strategies::test_time_gate(&p)
}

/// Cosine-annealing learning rate with warm restarts.
#[pyfunction]
fn cosine_lr(progress: f64, eta_max: f64, eta_min: f64, t0: f64, t_mult: f64) -> PyResult<f64> {
    if progress < 0.0 || t0 <= 0.0 || t_mult < 1.0 {
        return Err(PyValueError::new_err("need progress >= 0, t0 > 0, t_mult >= 1"));
    }
    Ok(train::cosine_lr(progress, &train::CosineSchedule { eta_max, eta_min, t0, t_mult }))
}

fn parse_strategy(s: &str) -> PyResult<EvalStrategy> {
    EvalStrategy::parse(s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown strategy '{s}'")))
}

fn parse_synth(kind: &str) -> PyResult<SynthKind> {
    match kind {
        "blobs" => Ok(SynthKind::Blobs),
        "xor-grid" => Ok(SynthKind::XorGrid),
        other => Err(PyValueError::new_err(format!("unknown synthetic kind '{other}'"))),
    }
}

/// A built throttleable network with its parameters.
#[pyclass]
struct ThrottleNet {
    net: NetworkSpec,
    params: ParamStore,
    seed: u64,
}

#[pymethods]
impl ThrottleNet {
    /// Builds and initializes a network.
    ///
    /// arch: one of t-mlp, t-vgg, t-resnext-w, t-resnet-d, t-densenet.
    /// input: (channels, height, width).
    #[new]
    #[pyo3(signature = (arch, input, classes, seed=0, components=None, channels=None, blocks_per_stage=None, fc_width=None, branch_width=None, growth=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        arch: &str,
        input: (usize, usize, usize),
        classes: usize,
        seed: u64,
        components: Option<usize>,
        channels: Option<Vec<usize>>,
        blocks_per_stage: Option<usize>,
        fc_width: Option<usize>,
        branch_width: Option<usize>,
        growth: Option<usize>,
    ) -> PyResult<Self> {
        let name = match arch {
            "t-mlp" => ArchName::TMlp,
            "t-vgg" => ArchName::TVgg,
            "t-resnext-w" => ArchName::TResnextW,
            "t-resnet-d" => ArchName::TResnetD,
            "t-densenet" => ArchName::TDensenet,
            other => return Err(PyValueError::new_err(format!("unknown architecture '{other}'"))),
        };
        let mut cfg = ArchConfig::defaults(name, input, classes);
        if let Some(v) = components {
            cfg.components = v;
        }
        if let Some(v) = channels {
            cfg.stages = v.len();
            cfg.channels = v;
        }
        if let Some(v) = blocks_per_stage {
            cfg.blocks_per_stage = v;
        }
        if let Some(v) = fc_width {
            cfg.fc_width = v;
        }
        if let Some(v) = branch_width {
            cfg.branch_width = v;
        }
        if let Some(v) = growth {
            cfg.growth = v;
        }
        let net = build_network(&cfg).map_err(value_err)?;
        let params = net.init_params(seed);
        Ok(ThrottleNet { net, params, seed })
    }

    fn __repr__(&self) -> String {
        format!(
            "ThrottleNet(arch='{}', components={}, slots={:?})",
            self.net.cfg.arch,
            self.net.total_components(),
            self.gate_slots()
        )
    }

    /// Component count of every gate slot, in network order.
    fn gate_slots(&self) -> Vec<usize> {
        self.net.layout.slots.iter().map(|s| s.size).collect()
    }

    fn total_components(&self) -> usize {
        self.net.total_components()
    }

    /// Per-example FLOPs of the plan selected by (strategy, u).
    #[pyo3(signature = (u, strategy="nested"))]
    fn flops(&self, u: f64, strategy: &str) -> PyResult<u64> {
        let plan = self.plan(u, strategy)?;
        Ok(eval::flop_count(&self.net, &plan))
    }

    /// Logits for a flat row-major batch under (strategy, u) gating.
    /// Returns (logits, utilization, flops_per_example).
    #[pyo3(signature = (x, shape, u, strategy="nested"))]
    fn predict(
        &self,
        x: Vec<f64>,
        shape: (usize, usize, usize, usize),
        u: f64,
        strategy: &str,
    ) -> PyResult<(Vec<Vec<f64>>, f64, u64)> {
        let (b, c, h, w) = shape;
        let input = Tensor::new(vec![b, c, h, w], x).map_err(value_err)?;
        let plan = self.plan(u, strategy)?;
        let mut g = Graph::new();
        let mut counters = EvalCounters::new(&self.net.layout);
        let handle = self
            .net
            .forward_with_plan(&mut g, &self.params, false, &input, &plan, &mut counters)
            .map_err(value_err)?;
        let out = g.value(handle.logits);
        let k = out.shape()[1];
        let logits = (0..b).map(|i| out.data()[i * k..(i + 1) * k].to_vec()).collect();
        Ok((logits, plan.utilization(), eval::flop_count(&self.net, &plan)))
    }

    /// Phase-1 training on a synthetic dataset ("blobs" or "xor-grid").
    /// Returns the final task loss.
    #[pyo3(signature = (kind, count, epochs, batch_size=32, lr=0.01, gating_order="nested"))]
    fn fit_synth(
        &mut self,
        kind: &str,
        count: usize,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        gating_order: &str,
    ) -> PyResult<f64> {
        let data = self.synth(kind, count)?;
        let order = match gating_order {
            "nested" => train::GatingOrder::Nested,
            "independent" => train::GatingOrder::Independent,
            other => return Err(PyValueError::new_err(format!("unknown gating order '{other}'"))),
        };
        let cfg = TrainConfig {
            epochs,
            batch_size,
            cosine: Some(train::CosineSchedule {
                eta_max: lr,
                eta_min: 0.0,
                t0: epochs.max(1) as f64,
                t_mult: 2.0,
            }),
            gating_order: order,
            u_distribution: UDistribution::Uniform01,
            seed: self.seed,
            ..TrainConfig::datapath_default()
        };
        let report =
            train::train_datapath(&self.net, &mut self.params, &data, &cfg).map_err(value_err)?;
        Ok(report.final_task_loss())
    }

    /// Accuracy/utilization/FLOPs over the 17-point u grid on a fresh
    /// synthetic test split. Returns rows of (u, utilization, accuracy,
    /// flops).
    #[pyo3(signature = (kind, count, strategy="nested", batch_size=64))]
    fn sweep_synth(
        &self,
        kind: &str,
        count: usize,
        strategy: &str,
        batch_size: usize,
    ) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let data = self.synth_test(kind, count)?;
        let spec = SweepSpec {
            grid: eval::default_grid(),
            strategy: parse_strategy(strategy)?,
            batch_size,
        };
        let records = eval::sweep(&self.net, &self.params, None, &spec, &data, self.seed, 1)
            .map_err(value_err)?;
        Ok(records
            .into_iter()
            .map(|r| (r.u_target, r.utilization, r.accuracy, r.flops))
            .collect())
    }
}

impl ThrottleNet {
    fn plan(&self, u: f64, strategy: &str) -> PyResult<strategies::GatePlan> {
        if !(0.0..=1.0).contains(&u) {
            return Err(PyValueError::new_err("u must lie in [0, 1]"));
        }
        let mut rng = throttlenet::rng::substream_indexed(self.seed, "py-gates", u.to_bits());
        Ok(match parse_strategy(strategy)? {
            EvalStrategy::Nested => strategies::nested_plan(&self.net.layout, u),
            EvalStrategy::Independent => strategies::independent_plan(&self.net.layout, u, &mut rng),
            EvalStrategy::DepthwiseNested => strategies::depthwise_plan(&self.net.layout, u),
            EvalStrategy::AllOn => strategies::all_on_plan(&self.net.layout),
            EvalStrategy::Learned | EvalStrategy::LearnedStochastic => {
                return Err(PyValueError::new_err(
                    "learned strategies need a trained controller; use the CLI",
                ))
            }
        })
    }

    fn synth(&self, kind: &str, count: usize) -> PyResult<Dataset> {
        let data = synth_dataset(parse_synth(kind)?, count, self.seed);
        self.check_shape(&data)?;
        Ok(data)
    }

    fn synth_test(&self, kind: &str, count: usize) -> PyResult<Dataset> {
        let data = synth_dataset(parse_synth(kind)?, count, self.seed ^ 0x7e57);
        self.check_shape(&data)?;
        Ok(data)
    }

    fn check_shape(&self, data: &Dataset) -> PyResult<()> {
        if data.input_shape() != self.net.cfg.input || data.classes != self.net.cfg.classes {
            return Err(PyValueError::new_err(format!(
                "network expects input {:?} with {} classes, dataset is {:?} with {}",
                self.net.cfg.input,
                self.net.cfg.classes,
                data.input_shape(),
                data.classes
            )));
        }
        Ok(())
    }
}

#[pymodule]
fn throttlenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ThrottleNet>()?;
    m.add_function(wrap_pyfunction!(nested_k, m)?)?;
    m.add_function(wrap_pyfunction!(nested_gate, m)?)?;
    m.add_function(wrap_pyfunction!(independent_gate, m)?)?;
    m.add_function(wrap_pyfunction!(depthwise_nested_counts, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_gate, m)?)?;
    m.add_function(wrap_pyfunction!(utilization, m)?)?;
    m.add_function(wrap_pyfunction!(complexity_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(log_prob, m)?)?;
    m.add_function(wrap_pyfunction!(sample_bernoulli, m)?)?;
    m.add_function(wrap_pyfunction!(sample_concrete, m)?)?;
    m.add_function(wrap_pyfunction!(test_time_gate, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    Ok(())
}
