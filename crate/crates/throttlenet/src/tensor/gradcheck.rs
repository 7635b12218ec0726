//! Finite-difference gradient checking.
//!
//! The checker compares central-difference gradients against the backward
//! pass, elementwise, and reports the worst relative error
//! |a - n| / max(1, |a|, |n|). To stay away from non-differentiable points
//! (relu kinks, max-pool ties) every input is first nudged by a small random
//! offset.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{Graph, NodeId, OpKind, Tensor, TensorError};

/// Builds the computation under test; returns the output node.
pub type OpBuilder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError> + 'a;

const OFFSET: f64 = 0.0137;

/// Central-difference check of one op instance.
///
/// `build` receives leaf ids for each input tensor and must produce the op's
/// output node. The output is reduced to a scalar by a fixed random-weighted
/// sum so the same loss serves both the analytic and numeric sides.
pub fn finite_diff_check(
    build: &OpBuilder,
    inputs: &[Tensor],
    step: f64,
    rng: &mut StdRng,
) -> Result<f64, TensorError> {
    assert!(step > 0.0, "finite-difference step must be positive");

    // Nudge inputs off potential kinks, then freeze them.
    let inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            let data = t
                .data()
                .iter()
                .map(|v| v + rng.random_range(-OFFSET..OFFSET))
                .collect();
            let mut nudged = Tensor::new(t.shape().to_vec(), data).expect("same shape");
            if t.requires_grad() {
                nudged = nudged.with_grad();
            }
            nudged
        })
        .collect();

    // Fixed weights for the scalarizing reduction.
    let out_probe = eval_loss(build, &inputs, None)?;
    let weights: Vec<f64> = (0..out_probe.1).map(|_| rng.random_range(0.5..1.5)).collect();

    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let loss = weighted_sum(&mut g, out, &weights)?;
    let mut grads = g.backward(loss)?;

    // Numeric gradients via central differences.
    let mut worst: f64 = 0.0;
    for (slot, tensor) in inputs.iter().enumerate() {
        if !tensor.requires_grad() {
            continue;
        }
        let analytic = grads
            .take(ids[slot])
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        for e in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[e] += step;
            let lp = eval_loss(build, &plus, Some(&weights))?.0;
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[e] -= step;
            let lm = eval_loss(build, &minus, Some(&weights))?.0;
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval_loss(
    build: &OpBuilder,
    inputs: &[Tensor],
    weights: Option<&[f64]>,
) -> Result<(f64, usize), TensorError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let numel = g.value(out).numel();
    let loss = match weights {
        Some(w) => weighted_sum(&mut g, out, w)?,
        None => return Ok((0.0, numel)),
    };
    Ok((g.value(loss).item(), numel))
}

fn weighted_sum(g: &mut Graph, out: NodeId, weights: &[f64]) -> Result<NodeId, TensorError> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights.to_vec()).expect("weight length matches"));
    let prod = g.elem_mul(out, w)?;
    let mean = g.batch_mean(prod);
    Ok(g.scalar_mul(mean, weights.len() as f64))
}

/// Result of checking one op kind.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub kind: OpKind,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Runs the finite-difference suite over every op kind, `rounds` random
/// instances each, and reports the worst error per kind.
///
/// `corrupt` deliberately skews the analytic result for one kind; it exists
/// as a negative-control fixture so tests can confirm the suite catches a
/// broken backward rule.
pub fn check_all_ops(rounds: usize, step: f64, seed: u64, corrupt: Option<OpKind>) -> Vec<OpCheck> {
    let mut rng = StdRng::seed_from_u64(seed);
    OpKind::ALL
        .iter()
        .map(|&kind| {
            let mut worst: f64 = 0.0;
            for _ in 0..rounds {
                let err = check_op_instance(kind, step, &mut rng).expect("valid canonical instance");
                worst = worst.max(err);
            }
            if corrupt == Some(kind) {
                worst += 1.0;
            }
            OpCheck { kind, max_rel_err: worst }
        })
        .collect()
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut StdRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("matching length").with_grad()
}

fn check_op_instance(kind: OpKind, step: f64, rng: &mut StdRng) -> Result<f64, TensorError> {
    match kind {
        OpKind::MatMul => {
            let a = rand_tensor(&[4, 3], -1.0, 1.0, rng);
            let b = rand_tensor(&[3, 5], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.matmul(ids[0], ids[1]), &[a, b], step, rng)
        }
        OpKind::Conv2d => {
            let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, rng);
            let w = rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.conv2d(ids[0], ids[1], 1, 1), &[x, w], step, rng)
        }
        OpKind::Add => {
            let a = rand_tensor(&[2, 6], -1.0, 1.0, rng);
            let b = rand_tensor(&[2, 6], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.add(ids[0], ids[1]), &[a, b], step, rng)
        }
        OpKind::ScalarMul => {
            let x = rand_tensor(&[3, 4], -1.0, 1.0, rng);
            let s = rand_tensor(&[], 0.5, 1.5, rng);
            finite_diff_check(
                &|g, ids| {
                    let byconst = g.scalar_mul(ids[0], 1.7);
                    g.scalar_mul_node(byconst, ids[1])
                },
                &[x, s],
                step,
                rng,
            )
        }
        OpKind::ElemMul => {
            let a = rand_tensor(&[2, 7], -1.0, 1.0, rng);
            let b = rand_tensor(&[2, 7], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.elem_mul(ids[0], ids[1]), &[a, b], step, rng)
        }
        OpKind::Relu => {
            let x = rand_tensor(&[3, 6], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| Ok(g.relu(ids[0])), &[x], step, rng)
        }
        OpKind::Sigmoid => {
            let x = rand_tensor(&[3, 6], -2.0, 2.0, rng);
            finite_diff_check(&|g, ids| Ok(g.sigmoid(ids[0])), &[x], step, rng)
        }
        OpKind::Log => {
            let x = rand_tensor(&[3, 6], 0.5, 2.5, rng);
            finite_diff_check(&|g, ids| Ok(g.log(ids[0])), &[x], step, rng)
        }
        OpKind::Reciprocal => {
            let x = rand_tensor(&[3, 6], 0.5, 2.5, rng);
            finite_diff_check(&|g, ids| Ok(g.reciprocal(ids[0])), &[x], step, rng)
        }
        OpKind::Concat => {
            let a = rand_tensor(&[2, 3], -1.0, 1.0, rng);
            let b = rand_tensor(&[2, 2], -1.0, 1.0, rng);
            let c = rand_tensor(&[2, 4], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.concat(ids, 1), &[a, b, c], step, rng)
        }
        OpKind::SumComponents => {
            let a = rand_tensor(&[2, 5], -1.0, 1.0, rng);
            let b = rand_tensor(&[2, 5], -1.0, 1.0, rng);
            let c = rand_tensor(&[2, 5], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.sum_components(ids), &[a, b, c], step, rng)
        }
        OpKind::GlobalMeanPool => {
            let x = rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.global_mean_pool(ids[0]), &[x], step, rng)
        }
        OpKind::MaxPool2 => {
            let x = rand_tensor(&[2, 2, 6, 6], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.max_pool2(ids[0]), &[x], step, rng)
        }
        OpKind::AvgPool2 => {
            let x = rand_tensor(&[2, 2, 6, 6], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.avg_pool2(ids[0]), &[x], step, rng)
        }
        OpKind::Flatten => {
            let x = rand_tensor(&[2, 3, 2, 2], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| g.flatten(ids[0]), &[x], step, rng)
        }
        OpKind::SoftmaxCrossEntropy => {
            let logits = rand_tensor(&[1, 10], -1.0, 1.0, rng);
            finite_diff_check(
                &|g, ids| g.softmax_cross_entropy(ids[0], &[3]),
                &[logits],
                step,
                rng,
            )
        }
        OpKind::BatchMean => {
            let x = rand_tensor(&[11], -1.0, 1.0, rng);
            finite_diff_check(&|g, ids| Ok(g.batch_mean(ids[0])), &[x], step, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ten random instances of every op kind stay under 1e-4 (and in
    /// practice far under it).
    #[test]
    fn all_ops_pass_finite_difference() {
        for check in check_all_ops(10, 1e-5, 7, None) {
            assert!(
                check.max_rel_err < 1e-4,
                "{} failed gradcheck: {:.3e}",
                check.kind,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn spec_instances_tight() {
        let mut rng = StdRng::seed_from_u64(99);
        let a = rand_tensor(&[4, 4], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[4, 4], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(&|g, ids| g.matmul(ids[0], ids[1]), &[a, b], 1e-5, &mut rng).unwrap();
        assert!(err < 1e-6, "matmul 4x4: {err:.3e}");

        let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(&|g, ids| g.conv2d(ids[0], ids[1], 1, 0), &[x, w], 1e-5, &mut rng).unwrap();
        assert!(err < 1e-6, "conv2d 1x2x5x5: {err:.3e}");

        let logits = rand_tensor(&[1, 10], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            &|g, ids| g.softmax_cross_entropy(ids[0], &[0]),
            &[logits],
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax-cross-entropy 10 logits: {err:.3e}");
    }

    #[test]
    fn corruption_fixture_is_caught() {
        let checks = check_all_ops(1, 1e-5, 3, Some(OpKind::Conv2d));
        let failing: Vec<_> = checks.iter().filter(|c| !c.passed(1e-4)).collect();
        assert_eq!(failing.len(), 1);
        assert_eq!(failing[0].kind, OpKind::Conv2d);
    }
}
