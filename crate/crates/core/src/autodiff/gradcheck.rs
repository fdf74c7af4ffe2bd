//! Central finite-difference gradient checking.
//!
//! Non-smooth ops (leaky-relu, clamped log) make a plain central stencil
//! wrong whenever a perturbation crosses a kink. The checker compares the
//! graph's kink signature at each stencil point with the unperturbed one and
//! falls back to a second-order one-sided stencil on the clean side, then to
//! a smaller step, before giving up on that element.

use super::graph::{CompGraph, Feed, NodeId};
use super::params::ParamSet;
use super::AutodiffError;

/// Default step, a power of two near 1e-5 so that `x ± h` is exact for dyadic `x`.
pub const DEFAULT_STEP: f64 = 1.0 / 131_072.0;
/// Largest parameter count the checker accepts.
pub const MAX_CHECK_PARAMS: usize = 10_000;
/// Denominator floor of the relative error, scaled by `max(1, |loss|)`.
pub const RELATIVE_FLOOR: f64 = 1e-4;

const STEP_SHRINKS: u32 = 4;

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Element index of the worst relative error.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Elements that needed a one-sided stencil or a smaller step.
    pub kink_fallbacks: usize,
    /// Elements with kinks on both sides at every step tried; not compared.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub tolerance: f64,
    pub loss: f64,
    pub blocks: Vec<BlockReport>,
}

impl FiniteDiffReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect()
    }
}

/// Backpropagates `loss` on a copy of `params` and compares every gradient
/// component with central finite differences.
pub fn finite_diff_check(
    graph: &CompGraph,
    feed: &Feed,
    params: &ParamSet,
    loss: NodeId,
    tolerance: f64,
) -> Result<FiniteDiffReport, AutodiffError> {
    let mut analytic = params.clone();
    analytic.zero_grad();
    let eval = graph.evaluate(feed, &analytic)?;
    graph.backprop(&eval, &mut analytic, loss)?;
    compare_gradients(graph, feed, &analytic, loss, tolerance)
}

/// Compares the gradients currently stored in `params` with finite differences.
pub fn compare_gradients(
    graph: &CompGraph,
    feed: &Feed,
    params: &ParamSet,
    loss: NodeId,
    tolerance: f64,
) -> Result<FiniteDiffReport, AutodiffError> {
    if params.numel() > MAX_CHECK_PARAMS {
        return Err(AutodiffError::Config(format!(
            "finite-difference check limited to {MAX_CHECK_PARAMS} parameters, got {}",
            params.numel()
        )));
    }
    let base_eval = graph.evaluate(feed, params)?;
    let f0 = base_eval.scalar(loss);
    let sig0 = graph.kink_signature(&base_eval);
    let floor = RELATIVE_FLOOR * f0.abs().max(1.0);
    let mut work = params.clone();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut blocks = Vec::with_capacity(names.len());
    for name in names {
        let analytic = params.grad(&name).expect("name from set").data().to_vec();
        let mut block = BlockReport {
            name: name.clone(),
            numel: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
            numeric_at_worst: 0.0,
            kink_fallbacks: 0,
            skipped: 0,
            passed: true,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let origin = params.value(&name).unwrap().data()[i];
            let mut probe = |offset: f64| -> Result<(f64, bool), AutodiffError> {
                work.value_mut(&name).unwrap().data_mut()[i] = origin + offset;
                let e = graph.evaluate(feed, &work)?;
                let clean = graph.kink_signature(&e) == sig0;
                work.value_mut(&name).unwrap().data_mut()[i] = origin;
                Ok((e.scalar(loss), clean))
            };
            let mut numeric = None;
            let mut h = DEFAULT_STEP;
            for attempt in 0..=STEP_SHRINKS {
                let (fp, cp) = probe(h)?;
                let (fm, cm) = probe(-h)?;
                if cp && cm {
                    numeric = Some((fp - fm) / (2.0 * h));
                } else if cm {
                    let (fm2, cm2) = probe(-2.0 * h)?;
                    if cm2 {
                        numeric = Some((3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h));
                    }
                } else if cp {
                    let (fp2, cp2) = probe(2.0 * h)?;
                    if cp2 {
                        numeric = Some((-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h));
                    }
                }
                if numeric.is_some() {
                    if attempt > 0 || !(cp && cm) {
                        block.kink_fallbacks += 1;
                    }
                    break;
                }
                h /= 8.0;
            }
            let Some(n) = numeric else {
                block.skipped += 1;
                continue;
            };
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(floor);
            block.max_abs_error = block.max_abs_error.max(abs);
            if rel > block.max_rel_error || i == 0 {
                block.max_rel_error = block.max_rel_error.max(rel);
                block.worst_index = i;
                block.analytic_at_worst = a;
                block.numeric_at_worst = n;
            }
        }
        block.passed = block.max_rel_error <= tolerance;
        blocks.push(block);
    }
    Ok(FiniteDiffReport { tolerance, loss: f0, blocks })
}
