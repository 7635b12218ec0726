//! The u-sweep harness: accuracy, actual utilization, and FLOPs per grid
//! point, plus area-under-curve and per-module utilization profiles.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchError, EvalCounters, NetworkSpec, ParamStore};
use crate::data::{BatchStream, Dataset};
use crate::gating::{utilization as gate_utilization, GateError};
use crate::rng::substream_indexed;
use crate::strategies::{
    all_on_plan, depthwise_nested_counts, independent_plan, learned_plan, nested_plan,
    sampled_plan, ControllerParams, GatePlan, StrategyError,
};
use crate::tensor::Graph;

#[derive(Debug)]
pub enum EvalError {
    NeedController(&'static str),
    TooFewRecords { got: usize },
    InvalidSpec(String),
    Arch(ArchError),
    Strategy(StrategyError),
    Gate(GateError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::NeedController(what) => {
                write!(f, "strategy '{what}' requires a trained gate controller")
            }
            EvalError::TooFewRecords { got } => {
                write!(f, "area under curve needs at least 2 records, got {got}")
            }
            EvalError::InvalidSpec(msg) => write!(f, "invalid sweep spec: {msg}"),
            EvalError::Arch(e) => write!(f, "{e}"),
            EvalError::Strategy(e) => write!(f, "{e}"),
            EvalError::Gate(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ArchError> for EvalError {
    fn from(e: ArchError) -> Self {
        EvalError::Arch(e)
    }
}

impl From<StrategyError> for EvalError {
    fn from(e: StrategyError) -> Self {
        EvalError::Strategy(e)
    }
}

impl From<GateError> for EvalError {
    fn from(e: GateError) -> Self {
        EvalError::Gate(e)
    }
}

/// Gate-selection strategy used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalStrategy {
    Nested,
    Independent,
    DepthwiseNested,
    AllOn,
    /// Deterministic learned gates: p(u) thresholded at 0.5.
    Learned,
    /// Stochastic learned gates: Bernoulli(p(u)) per batch.
    LearnedStochastic,
}

impl EvalStrategy {
    pub fn id(&self) -> &'static str {
        match self {
            EvalStrategy::Nested => "nested",
            EvalStrategy::Independent => "independent",
            EvalStrategy::DepthwiseNested => "depthwise-nested",
            EvalStrategy::AllOn => "all-on",
            EvalStrategy::Learned => "learned",
            EvalStrategy::LearnedStochastic => "learned-stochastic",
        }
    }

    pub fn needs_controller(&self) -> bool {
        matches!(self, EvalStrategy::Learned | EvalStrategy::LearnedStochastic)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nested" => Some(EvalStrategy::Nested),
            "independent" => Some(EvalStrategy::Independent),
            "depthwise-nested" => Some(EvalStrategy::DepthwiseNested),
            "all-on" => Some(EvalStrategy::AllOn),
            "learned" => Some(EvalStrategy::Learned),
            "learned-stochastic" => Some(EvalStrategy::LearnedStochastic),
            _ => None,
        }
    }
}

/// One evaluation point of the accuracy-versus-utilization curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRecord {
    pub strategy: &'static str,
    pub u_target: f64,
    pub utilization: f64,
    pub accuracy: f64,
    pub flops: f64,
}

/// Sweep description: the u grid, strategy, and evaluation batch size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec {
    pub grid: Vec<f64>,
    pub strategy: EvalStrategy,
    pub batch_size: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { grid: default_grid(), strategy: EvalStrategy::Nested, batch_size: 64 }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.grid.len() < 2 {
            return Err("sweep grid needs at least 2 points".into());
        }
        if self.grid.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err("sweep grid values must lie in [0, 1]".into());
        }
        if self.grid.windows(2).any(|w| w[0] > w[1]) {
            return Err("sweep grid must be sorted ascending".into());
        }
        if self.batch_size == 0 {
            return Err("sweep batch size must be >= 1".into());
        }
        Ok(())
    }
}

/// The 17-point grid {0, 1/16, ..., 1}.
pub fn default_grid() -> Vec<f64> {
    (0..=16).map(|k| k as f64 / 16.0).collect()
}

/// Analytic FLOPs of one gated forward pass per example: glue plus the cost
/// of every active component.
pub fn flop_count(net: &NetworkSpec, plan: &GatePlan) -> u64 {
    let mut total = net.glue_flops();
    for (slot, gate) in plan.gates.iter().enumerate() {
        for (i, &v) in gate.values().iter().enumerate() {
            if v != 0.0 {
                total += net.component_costs()[slot][i];
            }
        }
    }
    total
}

/// FLOPs-proportional gate weights (the optional alternative to uniform).
pub fn flop_weights(net: &NetworkSpec) -> Vec<Vec<f64>> {
    net.component_costs()
        .iter()
        .map(|slot| slot.iter().map(|&c| c as f64).collect())
        .collect()
}

fn plan_for(
    net: &NetworkSpec,
    strategy: EvalStrategy,
    ctrl: Option<&ControllerParams>,
    u: f64,
    rng: &mut rand::rngs::StdRng,
) -> Result<GatePlan, EvalError> {
    Ok(match strategy {
        EvalStrategy::Nested => nested_plan(&net.layout, u),
        EvalStrategy::Independent => independent_plan(&net.layout, u, rng),
        EvalStrategy::DepthwiseNested => {
            let sizes: Vec<usize> = net.layout.slots.iter().map(|s| s.size).collect();
            let counts = depthwise_nested_counts(&sizes, u);
            let gates = net
                .layout
                .slots
                .iter()
                .zip(&counts)
                .map(|(slot, &k)| {
                    let k = k.max(slot.min_active);
                    let mut values = vec![0.0; slot.size];
                    values[..k].fill(1.0);
                    crate::gating::GateVector::new(values, slot.weights.clone()).expect("valid")
                })
                .collect();
            GatePlan { gates }
        }
        EvalStrategy::AllOn => all_on_plan(&net.layout),
        EvalStrategy::Learned => {
            let ctrl = ctrl.ok_or(EvalError::NeedController("learned"))?;
            learned_plan(ctrl, &net.layout, u)?
        }
        EvalStrategy::LearnedStochastic => {
            let ctrl = ctrl.ok_or(EvalError::NeedController("learned-stochastic"))?;
            sampled_plan(ctrl, &net.layout, u, rng)?
        }
    })
}

fn batch_accuracy(out: &[f64], labels: &[usize], classes: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &out[i * classes..(i + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("non-empty row")
                .0;
            best == label
        })
        .count()
}

/// Evaluates one grid point over the full test split with deterministic
/// gates (random strategies re-draw per batch from a (seed, u) substream).
pub fn evaluate_at(
    net: &NetworkSpec,
    params: &ParamStore,
    strategy: EvalStrategy,
    ctrl: Option<&ControllerParams>,
    u: f64,
    testset: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<CurveRecord, EvalError> {
    let mut rng = substream_indexed(seed, "eval-gates", u.to_bits());
    let stream = BatchStream::new(testset, batch_size, false, seed);
    let mut correct = 0usize;
    let mut util_sum = 0.0;
    let mut flop_sum = 0.0;
    for batch in stream.epoch(0) {
        let plan = plan_for(net, strategy, ctrl, u, &mut rng)?;
        let mut g = Graph::new();
        let mut counters = EvalCounters::new(&net.layout);
        let handle = net.forward_with_plan(&mut g, params, false, &batch.images, &plan, &mut counters)?;
        let out = g.value(handle.logits);
        correct += batch_accuracy(out.data(), &batch.labels, testset.classes);
        let b = batch.labels.len() as f64;
        util_sum += plan.utilization() * b;
        flop_sum += flop_count(net, &plan) as f64 * b;
    }
    let n = testset.len() as f64;
    Ok(CurveRecord {
        strategy: strategy.id(),
        u_target: u,
        utilization: util_sum / n,
        accuracy: correct as f64 / n,
        flops: flop_sum / n,
    })
}

/// Sweeps the u grid, one record per point in grid order. Grid points are
/// independent read-only evaluations and run on up to `threads` workers;
/// ordering and values are thread-count invariant.
pub fn sweep(
    net: &NetworkSpec,
    params: &ParamStore,
    ctrl: Option<&ControllerParams>,
    spec: &SweepSpec,
    testset: &Dataset,
    seed: u64,
    threads: usize,
) -> Result<Vec<CurveRecord>, EvalError> {
    spec.validate().map_err(EvalError::InvalidSpec)?;
    let workers = threads.max(1).min(spec.grid.len());
    if workers == 1 {
        return spec
            .grid
            .iter()
            .map(|&u| evaluate_at(net, params, spec.strategy, ctrl, u, testset, spec.batch_size, seed))
            .collect();
    }
    let mut slots: Vec<Option<Result<CurveRecord, EvalError>>> =
        (0..spec.grid.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, chunk) in slots.chunks_mut(spec.grid.len().div_ceil(workers)).enumerate() {
            let base = w * spec.grid.len().div_ceil(workers);
            let grid = &spec.grid;
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let u = grid[base + off];
                    *slot = Some(evaluate_at(
                        net, params, spec.strategy, ctrl, u, testset, spec.batch_size, seed,
                    ));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every grid point evaluated")).collect()
}

/// Trapezoidal area under accuracy over actual utilization, normalized by
/// the utilization span. Points are integrated in utilization order; a
/// degenerate span yields the mean accuracy.
pub fn auc(records: &[CurveRecord]) -> Result<f64, EvalError> {
    if records.len() < 2 {
        return Err(EvalError::TooFewRecords { got: records.len() });
    }
    let mut pts: Vec<(f64, f64)> = records.iter().map(|r| (r.utilization, r.accuracy)).collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite utilization"));
    let span = pts.last().expect("nonempty").0 - pts[0].0;
    if span <= 0.0 {
        return Ok(pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64);
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1);
    }
    Ok(area / span)
}

/// One row of the per-module utilization profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub u_target: f64,
    pub module_id: usize,
    pub mean_activation: f64,
}

/// Mean per-module activation across the u grid under deterministic gates.
pub fn utilization_profile(
    net: &NetworkSpec,
    strategy: EvalStrategy,
    ctrl: Option<&ControllerParams>,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<ProfileRow>, EvalError> {
    let mut rows = Vec::with_capacity(grid.len() * net.layout.slots.len());
    for &u in grid {
        let mut rng = substream_indexed(seed, "profile-gates", u.to_bits());
        let plan = plan_for(net, strategy, ctrl, u, &mut rng)?;
        for (module_id, gate) in plan.gates.iter().enumerate() {
            rows.push(ProfileRow { u_target: u, module_id, mean_activation: gate_utilization(gate) });
        }
    }
    Ok(rows)
}

/// Formats a float with 6 significant digits (plain decimal where natural,
/// scientific otherwise); byte-stable across runs.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.5e}", x);
    let (_, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let (mant, _) = sci.split_once('e').expect("scientific format");
        format!("{}e{}", mant.trim_end_matches('0').trim_end_matches('.'), exp)
    }
}

/// Curve CSV: `strategy,u_target,utilization,accuracy,flops`.
pub fn curve_csv(records: &[CurveRecord]) -> String {
    let mut out = String::from("strategy,u_target,utilization,accuracy,flops\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.strategy,
            fmt_sig6(r.u_target),
            fmt_sig6(r.utilization),
            fmt_sig6(r.accuracy),
            fmt_sig6(r.flops),
        );
    }
    out
}

/// Profile CSV: `u_target,module_id,mean_activation`.
pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("u_target,module_id,mean_activation\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", fmt_sig6(r.u_target), r.module_id, fmt_sig6(r.mean_activation));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, tiny_config, ArchName};
    use crate::data::{synth_dataset, SynthKind};
    use crate::strategies::nested_k;

    fn fixture(arch: ArchName) -> (NetworkSpec, ParamStore, Dataset) {
        let ds = synth_dataset(SynthKind::Blobs, 48, 2);
        let (c, h, w) = ds.input_shape();
        let net = build_network(&tiny_config(arch, (c, h, w), ds.classes)).unwrap();
        let params = net.init_params(4);
        (net, params, ds)
    }

    #[test]
    fn nested_full_activation_is_exact() {
        let (net, params, ds) = fixture(ArchName::TResnextW);
        let rec = evaluate_at(&net, &params, EvalStrategy::Nested, None, 1.0, &ds, 16, 0).unwrap();
        assert_eq!(rec.utilization, 1.0);
    }

    #[test]
    fn nested_utilization_is_k_fraction() {
        let (net, params, ds) = fixture(ArchName::TResnextW);
        for u in [0.0, 0.25, 0.5, 0.75] {
            let rec = evaluate_at(&net, &params, EvalStrategy::Nested, None, u, &ds, 16, 0).unwrap();
            let expect = nested_k(16, u) as f64 / 16.0;
            assert_eq!(rec.utilization, expect, "u = {u}");
        }
    }

    #[test]
    fn resnet_d_at_zero_matches_glue_network_accuracy() {
        let (net, params, ds) = fixture(ArchName::TResnetD);
        let rec = evaluate_at(&net, &params, EvalStrategy::Nested, None, 0.0, &ds, 16, 0).unwrap();
        assert_eq!(rec.utilization, 0.0);
        // Direct evaluation with the all-off plan reproduces the accuracy.
        let plan = nested_plan(&net.layout, 0.0);
        let mut correct = 0;
        let stream = BatchStream::new(&ds, 16, false, 0);
        for batch in stream.epoch(0) {
            let mut g = Graph::new();
            let mut c = EvalCounters::new(&net.layout);
            let h = net.forward_with_plan(&mut g, &params, false, &batch.images, &plan, &mut c).unwrap();
            correct += batch_accuracy(g.value(h.logits).data(), &batch.labels, ds.classes);
        }
        assert_eq!(rec.accuracy, correct as f64 / ds.len() as f64);
    }

    #[test]
    fn all_on_equals_dense_gate_free_eval() {
        let (net, params, ds) = fixture(ArchName::TVgg);
        let rec = evaluate_at(&net, &params, EvalStrategy::AllOn, None, 1.0, &ds, 16, 0).unwrap();
        // Gate-free dense evaluation: dense masked form with all-ones gate.
        let plan = all_on_plan(&net.layout);
        let stream = BatchStream::new(&ds, 16, false, 0);
        let mut correct = 0;
        for batch in stream.epoch(0) {
            let mut g = Graph::new();
            let mut c = EvalCounters::new(&net.layout);
            let h = net.reference_forward_with_plan(&mut g, &params, &batch.images, &plan, &mut c).unwrap();
            correct += batch_accuracy(g.value(h.logits).data(), &batch.labels, ds.classes);
        }
        assert_eq!(rec.accuracy, correct as f64 / ds.len() as f64);
    }

    #[test]
    fn sweep_returns_grid_order_and_is_deterministic() {
        let (net, params, ds) = fixture(ArchName::TMlp);
        let spec = SweepSpec { strategy: EvalStrategy::Independent, batch_size: 16, ..SweepSpec::default() };
        let a = sweep(&net, &params, None, &spec, &ds, 9, 1).unwrap();
        assert_eq!(a.len(), 17);
        for (i, r) in a.iter().enumerate() {
            assert_eq!(r.u_target, i as f64 / 16.0);
        }
        let b = sweep(&net, &params, None, &spec, &ds, 9, 1).unwrap();
        assert_eq!(curve_csv(&a), curve_csv(&b));
        // Thread count must not change results.
        let c = sweep(&net, &params, None, &spec, &ds, 9, 3).unwrap();
        assert_eq!(curve_csv(&a), curve_csv(&c));
    }

    #[test]
    fn auc_flat_and_linear() {
        let mk = |util: f64, acc: f64| CurveRecord {
            strategy: "nested",
            u_target: util,
            utilization: util,
            accuracy: acc,
            flops: 1.0,
        };
        let flat: Vec<CurveRecord> = (0..=4).map(|i| mk(i as f64 / 4.0, 0.7)).collect();
        assert!((auc(&flat).unwrap() - 0.7).abs() < 1e-15);
        let linear: Vec<CurveRecord> = (0..=4).map(|i| mk(i as f64 / 4.0, i as f64 / 4.0)).collect();
        assert!((auc(&linear).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(auc(&flat[..1]), Err(EvalError::TooFewRecords { got: 1 })));
    }

    #[test]
    fn flops_monotone_under_nested() {
        for arch in ArchName::ALL {
            let (net, _, _) = fixture(arch);
            let mut prev = 0u64;
            for k in 0..=16 {
                let u = k as f64 / 16.0;
                let plan = nested_plan(&net.layout, u);
                let f = flop_count(&net, &plan);
                assert!(f >= prev, "{arch}: flops decreased along the grid");
                prev = f;
            }
        }
    }

    #[test]
    fn flop_count_limits_are_glue_and_dense_totals() {
        // t-resnet-d allows a fully-off plan: glue only.
        let (net, _, _) = fixture(ArchName::TResnetD);
        let off = nested_plan(&net.layout, 0.0);
        assert_eq!(flop_count(&net, &off), net.glue_flops());
        let on = all_on_plan(&net.layout);
        let dense: u64 = net.glue_flops()
            + net.component_costs().iter().flatten().sum::<u64>();
        assert_eq!(flop_count(&net, &on), dense);
    }

    #[test]
    fn profile_rows_static_nested() {
        let (net, _, _) = fixture(ArchName::TResnextW);
        let grid = [0.0, 0.5, 1.0];
        let rows = utilization_profile(&net, EvalStrategy::Nested, None, &grid, 0).unwrap();
        assert_eq!(rows.len(), grid.len() * net.layout.slots.len());
        for row in &rows {
            let expect = nested_k(16, row.u_target) as f64 / 16.0;
            assert_eq!(row.mean_activation, expect);
        }
    }

    #[test]
    fn learned_strategy_requires_controller() {
        let (net, params, ds) = fixture(ArchName::TMlp);
        let err = evaluate_at(&net, &params, EvalStrategy::Learned, None, 0.5, &ds, 16, 0).unwrap_err();
        assert!(matches!(err, EvalError::NeedController(_)));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(0.5), "0.5");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(2.0 / 3.0), "0.666667");
        assert_eq!(fmt_sig6(123456.7), "123457");
        assert_eq!(fmt_sig6(133480.0), "133480");
        assert_eq!(fmt_sig6(437650.0), "437650");
        assert_eq!(fmt_sig6(1234567.0), "1.23457e6");
        assert_eq!(fmt_sig6(0.0123456749), "0.0123457");
        assert_eq!(fmt_sig6(-0.25), "-0.25");
    }

}
