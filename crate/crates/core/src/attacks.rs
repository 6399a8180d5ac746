//! Sign-gradient attacks on the alignment pipeline.
//!
//! All four attacks share one iterated engine: compute the metric on the
//! current perturbed pair, step both images by `beta * sign(grad)` jointly,
//! project each image's perturbation onto its own infinity-norm ball of
//! radius `epsilon`, then clip to `[0, 1]` — in that order. FGSM is the
//! engine at one iteration with step size `epsilon`; BIM is the plain
//! iterated form; PGD adds an optional uniform random start; the
//! stitching-oriented attack swaps the metric after the first iteration
//! from the shared-region loss to the homography-plus-alignment-shift
//! objective.
//!
//! Attacks read model parameters immutably and keep all state per call, so
//! concurrent attacks against one frozen parameter snapshot are safe.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::LeafCache;
use crate::error::{CoreError, Result};
use crate::estimator::EstimatorModel;
use crate::geometry::Homography;
use crate::graph::{Graph, NodeId};
use crate::losses::{alignment_canvas, loss_s_graph, loss_soa_graph};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Perturbation norm. Only the infinity norm is supported; other balls are
/// out of scope for this toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationNorm {
    #[default]
    LInf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Maximum per-pixel perturbation in image units.
    pub epsilon: f64,
    /// Step size per iteration.
    pub beta: f64,
    /// Iteration count.
    pub iters: usize,
    #[serde(default)]
    pub norm: PerturbationNorm,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            beta: 5.0 / 255.0,
            iters: 3,
            norm: PerturbationNorm::LInf,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(CoreError::InvalidConfig(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.beta < 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if self.iters == 0 {
            return Err(CoreError::InvalidConfig("iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of an attack: the perturbed pair plus bookkeeping.
#[derive(Debug, Clone)]
pub struct AttackedPair {
    pub x1: Tensor,
    pub x2: Tensor,
    /// Achieved infinity-norm distance from the clean pair.
    pub delta_norm: f64,
    /// Metric value at the start of each iteration.
    pub loss_trace: Vec<f64>,
}

/// A scalar objective of the two (perturbed) input images, differentiable
/// with respect to both.
pub trait InputMetric {
    fn loss(
        &self,
        g: &mut Graph,
        model: &EstimatorModel,
        store: &ParamStore,
        x1: NodeId,
        x2: NodeId,
    ) -> Result<NodeId>;
}

/// The shared-region alignment loss under the model's own prediction.
pub struct SharedRegionMetric;

impl InputMetric for SharedRegionMetric {
    fn loss(
        &self,
        g: &mut Graph,
        model: &EstimatorModel,
        store: &ParamStore,
        x1: NodeId,
        x2: NodeId,
    ) -> Result<NodeId> {
        let mut leaves = LeafCache::new();
        let est = model.estimate_graph(g, store, &mut leaves, x1, x2)?;
        loss_s_graph(g, x1, x2, est.h)
    }
}

/// Sum of all pixels of both images; a trivial metric for contract tests.
pub struct PixelSumMetric;

impl InputMetric for PixelSumMetric {
    fn loss(
        &self,
        g: &mut Graph,
        _model: &EstimatorModel,
        _store: &ParamStore,
        x1: NodeId,
        x2: NodeId,
    ) -> Result<NodeId> {
        let a = g.sum_all(x1);
        let b = g.sum_all(x2);
        Ok(g.add(a, b))
    }
}

fn sign_step(x: &mut Tensor, grad: &Tensor, beta: f64) {
    for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
        if *g > 0.0 {
            *v += beta;
        } else if *g < 0.0 {
            *v -= beta;
        }
    }
}

/// Project onto the epsilon ball around `clean`, then clip to [0, 1].
fn project_and_clip(x: &mut Tensor, clean: &Tensor, epsilon: f64) {
    for (v, c) in x.data_mut().iter_mut().zip(clean.data()) {
        *v = v.clamp(c - epsilon, c + epsilon).clamp(0.0, 1.0);
    }
}

/// The shared iterated engine; `metric_at` builds the objective for a given
/// iteration index.
fn iterated_sign_attack(
    model: &EstimatorModel,
    store: &ParamStore,
    x1: &Tensor,
    x2: &Tensor,
    epsilon: f64,
    beta: f64,
    iters: usize,
    random_start: Option<&mut ChaCha8Rng>,
    mut metric_at: impl FnMut(&mut Graph, usize, NodeId, NodeId) -> Result<NodeId>,
) -> Result<AttackedPair> {
    let mut x1p = x1.clone();
    let mut x2p = x2.clone();
    if let Some(rng) = random_start {
        for t in [&mut x1p, &mut x2p] {
            for v in t.data_mut() {
                *v += rng.gen_range(-epsilon..=epsilon);
            }
        }
        project_and_clip(&mut x1p, x1, epsilon);
        project_and_clip(&mut x2p, x2, epsilon);
    }
    let mut trace = Vec::with_capacity(iters);
    for iter in 0..iters {
        let mut g = Graph::new();
        let a = g.leaf(x1p.clone());
        let b = g.leaf(x2p.clone());
        let loss = metric_at(&mut g, iter, a, b)?;
        trace.push(g.value(loss).item());
        let grads = g.backward(loss);
        let ga = grads.get_or_zeros(a, x1p.shape());
        let gb = grads.get_or_zeros(b, x2p.shape());
        if ga.max_abs() == 0.0 && gb.max_abs() == 0.0 {
            log::warn!("attack iteration {iter}: metric gradient is identically zero");
        }
        sign_step(&mut x1p, &ga, beta);
        sign_step(&mut x2p, &gb, beta);
        project_and_clip(&mut x1p, x1, epsilon);
        project_and_clip(&mut x2p, x2, epsilon);
    }
    let delta_norm = x1p.linf_distance(x1).max(x2p.linf_distance(x2));
    assert!(
        delta_norm <= epsilon + 1e-9,
        "perturbation bound violated: {delta_norm} > {epsilon}"
    );
    Ok(AttackedPair {
        x1: x1p,
        x2: x2p,
        delta_norm,
        loss_trace: trace,
    })
}

/// Single sign step of size `epsilon` along the metric gradient.
pub fn fgsm(
    model: &EstimatorModel,
    store: &ParamStore,
    x1: &Tensor,
    x2: &Tensor,
    metric: &dyn InputMetric,
    epsilon: f64,
) -> Result<AttackedPair> {
    iterated_sign_attack(model, store, x1, x2, epsilon, epsilon, 1, None, |g, _, a, b| {
        metric.loss(g, model, store, a, b)
    })
}

/// Iterated sign steps of size `beta` with epsilon-ball projection.
pub fn bim(
    model: &EstimatorModel,
    store: &ParamStore,
    x1: &Tensor,
    x2: &Tensor,
    metric: &dyn InputMetric,
    config: &AttackConfig,
) -> Result<AttackedPair> {
    config.validate()?;
    iterated_sign_attack(
        model,
        store,
        x1,
        x2,
        config.epsilon,
        config.beta,
        config.iters,
        None,
        |g, _, a, b| metric.loss(g, model, store, a, b),
    )
}

/// BIM with an optional uniform random initialization inside the ball.
pub fn pgd(
    model: &EstimatorModel,
    store: &ParamStore,
    x1: &Tensor,
    x2: &Tensor,
    metric: &dyn InputMetric,
    config: &AttackConfig,
    random_start: bool,
    rng: &mut ChaCha8Rng,
) -> Result<AttackedPair> {
    config.validate()?;
    iterated_sign_attack(
        model,
        store,
        x1,
        x2,
        config.epsilon,
        config.beta,
        config.iters,
        if random_start { Some(rng) } else { None },
        |g, _, a, b| metric.loss(g, model, store, a, b),
    )
}

/// The stitching-oriented attack: the first iteration ascends the
/// shared-region loss, later iterations ascend the homography-disparity
/// plus alignment-shift objective against the reference homography. The
/// alignment-shift terms warp the *clean* second view; perturbations act on
/// the objective only through the predicted homography.
pub fn soa(
    model: &EstimatorModel,
    store: &ParamStore,
    x1: &Tensor,
    x2: &Tensor,
    h_ref: &Homography,
    config: &AttackConfig,
) -> Result<AttackedPair> {
    config.validate()?;
    let (_, height, width) = x1.chw();
    let shape1 = (height, width);
    let x2_clean = x2.clone();
    iterated_sign_attack(
        model,
        store,
        x1,
        x2,
        config.epsilon,
        config.beta,
        config.iters,
        None,
        move |g, iter, a, b| {
            let mut leaves = LeafCache::new();
            let est = model
                .estimate_graph(g, store, &mut leaves, a, b)
                .map_err(attack_diverged)?;
            if iter == 0 {
                loss_s_graph(g, a, b, est.h)
            } else {
                let mut m = [0.0; 9];
                m.copy_from_slice(g.value(est.h).data());
                let h_pred = Homography::from_array(m).map_err(attack_diverged)?;
                let canvas = alignment_canvas(h_ref, &h_pred, shape1, shape1)
                    .map_err(attack_diverged)?;
                let clean2 = g.leaf(x2_clean.clone());
                loss_soa_graph(g, clean2, h_ref, est.h, &canvas, shape1)
                    .map_err(attack_diverged)
            }
        },
    )
}

fn attack_diverged(e: CoreError) -> CoreError {
    match e {
        CoreError::DegenerateConfiguration(msg) => CoreError::AttackDiverged(msg),
        CoreError::ExcessiveCanvas { area, .. } => {
            CoreError::AttackDiverged(format!("canvas area {area} exceeded the divergence guard"))
        }
        other => other,
    }
}
