//! Central finite-difference verification of tape gradients.
//!
//! Used by unit tests and the acceptance suite: a graph builder is re-run
//! with each checked input element nudged by `+-step` and the resulting
//! slope is compared with the analytic gradient from [`Graph::backward`].

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Gradients whose magnitude and finite-difference estimate both fall
    /// below this floor count as matching zeros.
    pub zero_floor: f64,
    /// Maximum number of elements checked per input tensor; elements are
    /// sampled on an even stride so large tensors stay affordable.
    pub max_checks_per_input: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            zero_floor: 1e-7,
            max_checks_per_input: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: usize,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must construct the same scalar loss from the leaves it is given
/// each time it is called; the checker owns graph construction so it can
/// re-evaluate the loss under perturbed inputs.
pub fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    config: &GradCheckConfig,
) -> GradCheckReport {
    let eval = |tensors: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids);
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        let input_grads = ids
            .iter()
            .map(|&id| grads.get(id).cloned())
            .collect::<Vec<_>>();
        (value, input_grads)
    };

    let (_, analytic) = eval(inputs);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checks: 0,
        worst: None,
    };

    for (ti, tensor) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let stride = (n / config.max_checks_per_input.max(1)).max(1);
        for ei in (0..n).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += config.step;
            let (fp, _) = eval(&plus);
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= config.step;
            let (fm, _) = eval(&minus);
            let fd = (fp - fm) / (2.0 * config.step);
            let an = analytic[ti].as_ref().map_or(0.0, |g| g.data()[ei]);
            report.checks += 1;
            let scale = fd.abs().max(an.abs());
            if scale < config.zero_floor {
                continue;
            }
            let rel = (fd - an).abs() / scale;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, ei));
            }
        }
    }
    report
}
