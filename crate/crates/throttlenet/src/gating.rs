//! Gated modules: gate vectors, normalization, aggregation, utilization, and
//! complexity penalties.
//!
//! A gated module holds components f_1..f_n whose outputs are masked by a
//! gate vector g and combined by an aggregation function. [`gated_forward`]
//! skips components whose gate is zero; [`reference_forward`] evaluates the
//! dense masked form directly and serves as its oracle.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Per-component activation pattern with resource weights.
///
/// Values live in [0, 1]: binary at test time, possibly relaxed during
/// Concrete training. Weights are nonnegative with at least one positive
/// entry; uniform weights are the default.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    values: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateError {
    Empty,
    LengthMismatch { values: usize, weights: usize },
    ValueOutOfRange { index: usize, value: f64 },
    WeightsNotUsable,
    SizeMismatch { expected: usize, got: usize },
    MinActiveViolated { active: usize, min_active: usize },
    DepthModuleMustSum,
    Tensor(TensorError),
}

impl fmt::Display for GateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateError::Empty => write!(f, "gate vector must have at least one component"),
            GateError::LengthMismatch { values, weights } => {
                write!(f, "gate has {values} values but {weights} weights")
            }
            GateError::ValueOutOfRange { index, value } => {
                write!(f, "gate value {value} at index {index} outside [0, 1]")
            }
            GateError::WeightsNotUsable => {
                write!(f, "gate weights must be nonnegative with at least one positive entry")
            }
            GateError::SizeMismatch { expected, got } => {
                write!(f, "module expects a gate of length {expected}, got {got}")
            }
            GateError::MinActiveViolated { active, min_active } => {
                write!(f, "{active} active component(s) violates min-active {min_active}")
            }
            GateError::DepthModuleMustSum => {
                write!(f, "depth-wise gated modules only support sum aggregation")
            }
            GateError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for GateError {}

impl From<TensorError> for GateError {
    fn from(e: TensorError) -> Self {
        GateError::Tensor(e)
    }
}

impl GateVector {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self, GateError> {
        if values.is_empty() {
            return Err(GateError::Empty);
        }
        if values.len() != weights.len() {
            return Err(GateError::LengthMismatch { values: values.len(), weights: weights.len() });
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(GateError::ValueOutOfRange { index: i, value: v });
            }
        }
        if weights.iter().any(|&w| w < 0.0) || !weights.iter().any(|&w| w > 0.0) {
            return Err(GateError::WeightsNotUsable);
        }
        Ok(GateVector { values, weights })
    }

    /// Gate with uniform (all-ones) weights.
    pub fn uniform(values: Vec<f64>) -> Result<Self, GateError> {
        let weights = vec![1.0; values.len()];
        Self::new(values, weights)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Normalized gate: g / ||g||_1, with the all-zero gate mapping to zeros.
pub fn normalize_gate(gate: &GateVector) -> Vec<f64> {
    let l1 = gate.l1();
    if l1 > 0.0 {
        gate.values().iter().map(|v| v / l1).collect()
    } else {
        vec![0.0; gate.len()]
    }
}

/// Weighted fraction of active components, c(g) in [0, 1].
pub fn utilization(gate: &GateVector) -> f64 {
    let total: f64 = gate.weights().iter().sum();
    let active: f64 = gate
        .values()
        .iter()
        .zip(gate.weights())
        .filter(|(v, _)| **v != 0.0)
        .map(|(_, w)| w)
        .sum();
    active / total
}

/// Continuous extension of c(g) for relaxed gates: the weighted mean of the
/// gate values themselves. Coincides with [`utilization`] on binary gates.
pub fn soft_utilization(gate: &GateVector) -> f64 {
    let total: f64 = gate.weights().iter().sum();
    let active: f64 = gate.values().iter().zip(gate.weights()).map(|(v, w)| v * w).sum();
    active / total
}

/// Network-level utilization: per-module utilization weighted by each
/// module's total weight, equal to c over the concatenation of all gates.
pub fn network_utilization(gates: &[GateVector]) -> f64 {
    assert!(!gates.is_empty(), "network utilization needs at least one gated module");
    let mut num = 0.0;
    let mut den = 0.0;
    for g in gates {
        let total: f64 = g.weights().iter().sum();
        num += utilization(g) * total;
        den += total;
    }
    num / den
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyForm {
    Hinge,
    Dist,
}

/// Complexity-penalty shape: hinge max(0, c-u)^p or distance |c-u|^p.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub form: PenaltyForm,
    pub exponent: u32,
    pub lambda: f64,
}

impl PenaltySpec {
    pub fn new(form: PenaltyForm, exponent: u32, lambda: f64) -> Self {
        let spec = PenaltySpec { form, exponent, lambda };
        spec.validate().expect("valid penalty spec");
        spec
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.exponent != 1 && self.exponent != 2 {
            return Err(format!("penalty exponent must be 1 or 2, got {}", self.exponent));
        }
        if self.lambda < 0.0 {
            return Err(format!("penalty lambda must be nonnegative, got {}", self.lambda));
        }
        Ok(())
    }
}

impl Default for PenaltySpec {
    /// C^2_dist with lambda = 10.
    fn default() -> Self {
        PenaltySpec { form: PenaltyForm::Dist, exponent: 2, lambda: 10.0 }
    }
}

/// Penalty value for actual complexity `c` against target `u` (without the
/// lambda factor, which the combined loss applies).
pub fn complexity_penalty(c: f64, u: f64, spec: &PenaltySpec) -> f64 {
    let d = match spec.form {
        PenaltyForm::Hinge => (c - u).max(0.0),
        PenaltyForm::Dist => (c - u).abs(),
    };
    match spec.exponent {
        1 => d,
        2 => d * d,
        p => d.powi(p as i32),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Concat,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingAxis {
    Width,
    Depth,
}

/// One gateable sub-network: a function of the module input that knows its
/// output shape without being evaluated.
pub trait Component {
    fn out_shape(&self, in_shape: &[usize]) -> Vec<usize>;
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError>;
}

/// An ordered component list plus its aggregation rule.
///
/// Width-wise modules apply all components to the same input and aggregate
/// by concat or (normalized) sum. Depth-wise modules chain components
/// residually: x := x + g_i * f_i(x), with no gate normalization, so a fully
/// gated-off module acts as the identity.
pub struct GatedModule<C: Component> {
    pub components: Vec<C>,
    pub aggregation: Aggregation,
    pub axis: GatingAxis,
    pub min_active: usize,
}

impl<C: Component> GatedModule<C> {
    pub fn width(components: Vec<C>, aggregation: Aggregation, min_active: usize) -> Self {
        GatedModule { components, aggregation, axis: GatingAxis::Width, min_active }
    }

    pub fn depth(components: Vec<C>) -> Self {
        GatedModule { components, aggregation: Aggregation::Sum, axis: GatingAxis::Depth, min_active: 0 }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    fn check(&self, gate: &GateVector) -> Result<(), GateError> {
        if gate.len() != self.components.len() {
            return Err(GateError::SizeMismatch { expected: self.components.len(), got: gate.len() });
        }
        if self.axis == GatingAxis::Depth && self.aggregation != Aggregation::Sum {
            return Err(GateError::DepthModuleMustSum);
        }
        Ok(())
    }
}

/// Sparse gated forward: components with g_i = 0 are never evaluated.
///
/// `counters` records one increment per component evaluation; gated-off
/// components leave their counter untouched. Concat aggregation emits
/// zero-filled slabs for skipped components so the output shape is
/// gate-independent.
pub fn gated_forward<C: Component>(
    module: &GatedModule<C>,
    g: &mut Graph,
    x: NodeId,
    gate: &GateVector,
    counters: &mut [u64],
) -> Result<NodeId, GateError> {
    module.check(gate)?;
    assert_eq!(counters.len(), module.len(), "one counter per component");
    if gate.active_count() < module.min_active {
        return Err(GateError::MinActiveViolated {
            active: gate.active_count(),
            min_active: module.min_active,
        });
    }

    match module.axis {
        GatingAxis::Depth => {
            let mut cur = x;
            for (i, comp) in module.components.iter().enumerate() {
                let v = gate.values()[i];
                if v == 0.0 {
                    continue;
                }
                let f = comp.forward(g, cur)?;
                counters[i] += 1;
                let scaled = g.scalar_mul(f, v);
                cur = g.add(cur, scaled)?;
            }
            Ok(cur)
        }
        GatingAxis::Width => {
            let norm = normalize_gate(gate);
            let in_shape = g.value(x).shape().to_vec();
            match module.aggregation {
                Aggregation::Sum => {
                    let mut parts = Vec::new();
                    for (i, comp) in module.components.iter().enumerate() {
                        if gate.values()[i] == 0.0 {
                            continue;
                        }
                        let f = comp.forward(g, x)?;
                        counters[i] += 1;
                        parts.push(g.scalar_mul(f, norm[i]));
                    }
                    if parts.is_empty() {
                        let shape = module.components[0].out_shape(&in_shape);
                        Ok(g.constant(Tensor::zeros(&shape)))
                    } else {
                        Ok(g.sum_components(&parts)?)
                    }
                }
                Aggregation::Concat => {
                    let mut slabs = Vec::with_capacity(module.len());
                    for (i, comp) in module.components.iter().enumerate() {
                        if gate.values()[i] == 0.0 {
                            let shape = comp.out_shape(&in_shape);
                            slabs.push(g.constant(Tensor::zeros(&shape)));
                        } else {
                            let f = comp.forward(g, x)?;
                            counters[i] += 1;
                            slabs.push(g.scalar_mul(f, norm[i]));
                        }
                    }
                    Ok(g.concat(&slabs, 1)?)
                }
            }
        }
    }
}

/// Dense masked forward: evaluates every component and multiplies by the
/// normalized gate, implementing the mathematical form directly. Oracle for
/// [`gated_forward`].
pub fn reference_forward<C: Component>(
    module: &GatedModule<C>,
    g: &mut Graph,
    x: NodeId,
    gate: &GateVector,
    counters: &mut [u64],
) -> Result<NodeId, GateError> {
    module.check(gate)?;
    assert_eq!(counters.len(), module.len(), "one counter per component");

    match module.axis {
        GatingAxis::Depth => {
            let mut cur = x;
            for (i, comp) in module.components.iter().enumerate() {
                let f = comp.forward(g, cur)?;
                counters[i] += 1;
                let scaled = g.scalar_mul(f, gate.values()[i]);
                cur = g.add(cur, scaled)?;
            }
            Ok(cur)
        }
        GatingAxis::Width => {
            let norm = normalize_gate(gate);
            let mut slabs = Vec::with_capacity(module.len());
            for (i, comp) in module.components.iter().enumerate() {
                let f = comp.forward(g, x)?;
                counters[i] += 1;
                slabs.push(g.scalar_mul(f, norm[i]));
            }
            match module.aggregation {
                Aggregation::Sum => Ok(g.sum_components(&slabs)?),
                Aggregation::Concat => Ok(g.concat(&slabs, 1)?),
            }
        }
    }
}
