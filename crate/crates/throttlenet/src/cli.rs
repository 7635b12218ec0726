//! Command implementations behind the `throttlenet` binary.
//!
//! Every command echoes its fully-resolved config to the output directory
//! before running, so experiments are self-documenting and replayable.
//! Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 runtime
//! divergence.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::arch::{build_network, ArchError, NetworkSpec, ParamStore};
use crate::checkpoint::CheckpointError;
use crate::config::{load_config, ConfigError, ExperimentConfig};
use crate::data::DataError;
use crate::eval::{self, EvalError, EvalStrategy};
use crate::gating::GateError;
use crate::strategies::{ControllerParams, StrategyError};
use crate::tensor::gradcheck::{check_all_ops, OpCheck};
use crate::tensor::{OpKind, Tensor};
use crate::train::{train_controller, train_datapath, MetricsRecord, TrainError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    CheckFailed(String),
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::CheckFailed(m) | CliError::Diverged(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! usage_from {
    ($($ty:ty),+) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )+};
}

usage_from!(ConfigError, ArchError, DataError, EvalError, StrategyError, GateError, CheckpointError);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Worker-thread cap: THROTTLENET_THREADS when set, else the machine's
/// available parallelism.
pub fn worker_threads() -> usize {
    match std::env::var("THROTTLENET_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Shared command context: resolved config + output directory with the
/// resolved config echoed into it.
struct Prepared {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
}

fn prepare(
    config_path: &Path,
    sets: &[String],
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<Prepared, CliError> {
    let mut cfg = load_config(config_path, sets)?;
    if let Some(out) = out_override {
        cfg.out_dir = out.to_path_buf();
    }
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg = cfg.resolve();
    }
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("resolved-config.toml"), cfg.to_toml())?;
    Ok(Prepared { cfg, out_dir })
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn build_from(cfg: &ExperimentConfig) -> Result<NetworkSpec, CliError> {
    Ok(build_network(&cfg.architecture)?)
}

pub fn cmd_train_datapath(
    config_path: &Path,
    sets: &[String],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let Prepared { cfg, out_dir } = prepare(config_path, sets, out, seed)?;
    let (train, _) = cfg.data.load(cfg.seed)?;
    let net = build_from(&cfg)?;
    let mut params = net.init_params(cfg.seed);
    let report = train_datapath(&net, &mut params, &train, &cfg.train.datapath)?;
    let ckpt = out_dir.join("datapath.ckpt");
    net.save_params(&params, &ckpt)?;
    write_metrics(&out_dir.join("metrics-datapath.jsonl"), &report.records)?;
    println!(
        "trained data path: {} epochs, final L = {:.6}, checkpoint {}",
        cfg.train.datapath.epochs,
        report.final_task_loss(),
        ckpt.display()
    );
    Ok(())
}

pub fn cmd_train_controller(
    config_path: &Path,
    datapath_ckpt: &Path,
    sets: &[String],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let Prepared { cfg, out_dir } = prepare(config_path, sets, out, seed)?;
    let (train, _) = cfg.data.load(cfg.seed)?;
    let net = build_from(&cfg)?;
    let params = net.load_params(datapath_ckpt)?;
    let mut rng = crate::rng::substream(cfg.seed, "controller-init");
    let alpha0 = cfg.train.controller.alpha_schedule.alpha_at(0);
    let mut ctrl = ControllerParams::init(&net.layout, alpha0, &mut rng);
    let report = train_controller(&net, &params, &mut ctrl, &train, &cfg.train.controller)?;
    let ckpt = out_dir.join("controller.ckpt");
    save_controller(&ctrl, &ckpt)?;
    write_metrics(&out_dir.join("metrics-controller.jsonl"), &report.records)?;
    println!(
        "trained controller: {} epochs, final J = {:.6}, checkpoint {}",
        cfg.train.controller.epochs,
        report.records.last().map_or(f64::NAN, |r| r.j),
        ckpt.display()
    );
    Ok(())
}

/// Controller checkpoint layout: the hidden layer, the output layer as one
/// (hidden+1, N) matrix, the sigmoid mix, and the slot sizes.
pub fn save_controller(ctrl: &ControllerParams, path: &Path) -> Result<(), CliError> {
    let hidden = ctrl.w1.shape()[1];
    let n = ctrl.total_components();
    let mut w2 = Tensor::zeros(&[hidden + 1, n]);
    for (i, col) in ctrl.w2.iter().enumerate() {
        for r in 0..hidden + 1 {
            w2.data_mut()[r * n + i] = col.data()[r];
        }
    }
    let alpha = Tensor::scalar(ctrl.alpha);
    let sizes = Tensor::new(
        vec![ctrl.slot_sizes.len()],
        ctrl.slot_sizes.iter().map(|&s| s as f64).collect(),
    )
    .expect("sized");
    crate::checkpoint::save(
        path,
        &[
            ("ctrl.w1".into(), &ctrl.w1),
            ("ctrl.w2".into(), &w2),
            ("ctrl.alpha".into(), &alpha),
            ("ctrl.slot_sizes".into(), &sizes),
        ],
    )?;
    Ok(())
}

pub fn load_controller(path: &Path, net: &NetworkSpec) -> Result<ControllerParams, CliError> {
    let records = crate::checkpoint::load(path)?;
    let get = |name: &str| {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| CliError::Usage(format!("controller checkpoint missing record '{name}'")))
    };
    let w1 = get("ctrl.w1")?;
    let w2 = get("ctrl.w2")?;
    let alpha = get("ctrl.alpha")?.item();
    let sizes: Vec<usize> = get("ctrl.slot_sizes")?.data().iter().map(|&v| v as usize).collect();
    let expected: Vec<usize> = net.layout.slots.iter().map(|s| s.size).collect();
    if sizes != expected {
        return Err(CliError::Usage(format!(
            "controller was trained for gate slots {sizes:?}, network has {expected:?}"
        )));
    }
    let (rows, n) = (w2.shape()[0], w2.shape()[1]);
    if n != net.total_components() || rows != w1.shape()[1] + 1 {
        return Err(CliError::Usage(format!(
            "controller output layer is {:?}, expected [{}, {}]",
            w2.shape(),
            w1.shape()[1] + 1,
            net.total_components()
        )));
    }
    let columns = (0..n)
        .map(|i| {
            let data: Vec<f64> = (0..rows).map(|r| w2.data()[r * n + i]).collect();
            Tensor::new(vec![rows, 1], data).expect("sized")
        })
        .collect();
    Ok(ControllerParams { w1, w2: columns, alpha, slot_sizes: sizes })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    config_path: &Path,
    datapath_ckpt: &Path,
    controller_ckpt: Option<&Path>,
    strategy_arg: Option<&str>,
    out_csv: &Path,
    sets: &[String],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let Prepared { cfg, out_dir: _ } = prepare(config_path, sets, out, seed)?;
    let (_, test) = cfg.data.load(cfg.seed)?;
    let net = build_from(&cfg)?;
    let params: ParamStore = net.load_params(datapath_ckpt)?;

    let mut spec = cfg.sweep.clone();
    if let Some(s) = strategy_arg {
        spec.strategy = EvalStrategy::parse(s).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown strategy '{s}' (expected nested, independent, depthwise-nested, all-on, learned, learned-stochastic)"
            ))
        })?;
    }
    let ctrl = match (spec.strategy.needs_controller(), controller_ckpt) {
        (true, None) => {
            return Err(CliError::Usage(format!(
                "strategy '{}' requires --controller with a trained checkpoint",
                spec.strategy.id()
            )))
        }
        (_, Some(path)) => Some(load_controller(path, &net)?),
        (false, None) => None,
    };

    let records = eval::sweep(&net, &params, ctrl.as_ref(), &spec, &test, cfg.seed, worker_threads())?;
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_csv, eval::curve_csv(&records))?;
    if let Some(ctrl) = &ctrl {
        let rows = eval::utilization_profile(&net, spec.strategy, Some(ctrl), &spec.grid, cfg.seed)?;
        let profile_path = profile_path_for(out_csv);
        std::fs::write(profile_path, eval::profile_csv(&rows))?;
    }
    let auc = eval::auc(&records)?;
    let peak = records.iter().map(|r| r.accuracy).fold(0.0, f64::max);
    println!("auc={} peak_accuracy={}", eval::fmt_sig6(auc), eval::fmt_sig6(peak));
    Ok(())
}

pub fn profile_path_for(out_csv: &Path) -> PathBuf {
    let stem = out_csv.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    out_csv.with_file_name(format!("{stem}-profile.csv"))
}

/// Finite-difference suite over every op kind plus the controller network;
/// prints one table row per op.
pub fn cmd_gradcheck(corrupt: Option<&str>) -> Result<(), CliError> {
    let corrupt_kind = match corrupt {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .iter()
                .copied()
                .find(|k| k.name() == name)
                .ok_or_else(|| CliError::Usage(format!("unknown op kind '{name}'")))?,
        ),
    };
    let threshold = 1e-4;
    let checks: Vec<OpCheck> = check_all_ops(10, 1e-5, 0x746e6e, corrupt_kind);
    println!("{:<24} {:>14}  result", "op", "max rel err");
    let mut failures = Vec::new();
    for check in &checks {
        let ok = check.passed(threshold);
        println!(
            "{:<24} {:>14.3e}  {}",
            check.kind.name(),
            check.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(check.kind.name());
        }
    }
    let ctrl_err = controller_gradcheck();
    let ctrl_ok = ctrl_err < threshold;
    println!("{:<24} {:>14.3e}  {}", "controller", ctrl_err, if ctrl_ok { "ok" } else { "FAIL" });
    if !ctrl_ok {
        failures.push("controller");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient checks failed for: {}",
            failures.join(", ")
        )))
    }
}

/// Finite-difference check of the blind controller end to end.
fn controller_gradcheck() -> f64 {
    use crate::tensor::gradcheck::finite_diff_check;
    use crate::tensor::Graph;
    let mut rng = crate::rng::substream(0x746e6e, "ctrl-gradcheck");
    let layout = crate::strategies::GateLayout {
        slots: vec![
            crate::strategies::SlotSpec::uniform(3, 0),
            crate::strategies::SlotSpec::uniform(4, 0),
        ],
    };
    let ctrl = ControllerParams::init(&layout, 0.9, &mut rng);
    let hidden = ctrl.w1.shape()[1];
    let n = ctrl.total_components();
    let w2_flat: Vec<f64> = ctrl.w2.iter().flat_map(|t| t.data().to_vec()).collect();
    let alpha = ctrl.alpha;
    let inputs = [
        ctrl.w1.clone().with_grad(),
        Tensor::new(vec![hidden + 1, n], w2_flat).expect("sized").with_grad(),
    ];
    finite_diff_check(
        &|g: &mut Graph, ids| {
            let u_in = g.constant(Tensor::new(vec![1, 1], vec![0.35]).expect("1x1"));
            let one = g.constant(Tensor::ones(&[1, 1]));
            let aug = g.concat(&[u_in, one], 1)?;
            let pre = g.matmul(aug, ids[0])?;
            let h = g.relu(pre);
            let haug = g.concat(&[h, one], 1)?;
            let z = g.matmul(haug, ids[1])?;
            let s = g.sigmoid(z);
            let scaled = g.scalar_mul(s, 2.0 * alpha - 1.0);
            Ok(g.add_scalar(scaled, 1.0 - alpha))
        },
        &inputs,
        1e-5,
        &mut rng,
    )
    .expect("controller check instance is valid")
}
