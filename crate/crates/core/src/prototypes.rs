//! Prototype contrastive learning: a two-layer projection head, per-category
//! feature queues with prototype means and momentum refreshes on a fixed
//! iteration schedule, a hinge contrastive loss with analytic gradient, and
//! the distance-based known/unknown decision.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_distance, euclidean_distance, matvec, matvec_transpose, relu, softmax, ClassScores,
    Tensor,
};

/// Default hinge margin (also the rejection radius at inference).
pub const DEFAULT_MARGIN: f64 = 13.0;

/// Default per-category queue capacity.
pub const DEFAULT_QUEUE_SIZE: usize = 16;

/// Default warmup iteration at which prototypes are first initialized.
pub const DEFAULT_INIT_ITERATION: usize = 500;

/// Default refresh period after warmup.
pub const DEFAULT_REFRESH_PERIOD: usize = 1000;

/// Default momentum factor for prototype refreshes.
pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Reference projection-head widths for full-scale RoI features. The
/// synthetic harness uses much smaller dimensions.
pub const DEFAULT_INPUT_DIM: usize = 1024;
pub const DEFAULT_HIDDEN_DIM: usize = 256;
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

/// Distance used both in the contrastive loss and the rejection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Cosine,
    Euclidean,
}

impl DistanceMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            DistanceMetric::Cosine => cosine_distance(a, b),
            DistanceMetric::Euclidean => euclidean_distance(a, b),
        }
    }

    /// Distance plus its gradient with respect to the first argument.
    /// At non-differentiable points (coincident points for the Euclidean
    /// metric) the subgradient 0 is returned.
    fn distance_with_grad(&self, z: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            DistanceMetric::Euclidean => {
                let d = euclidean_distance(z, p)?;
                if d == 0.0 {
                    return Ok((0.0, vec![0.0; z.len()]));
                }
                let grad = z.iter().zip(p).map(|(zi, pi)| (zi - pi) / d).collect();
                Ok((d, grad))
            }
            DistanceMetric::Cosine => {
                let d = cosine_distance(z, p)?;
                let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = z.iter().zip(p).map(|(a, b)| a * b).sum();
                let grad = z
                    .iter()
                    .zip(p)
                    .map(|(zi, pi)| -(pi / (nz * np) - dot * zi / (nz * nz * nz * np)))
                    .collect();
                Ok((d, grad))
            }
        }
    }
}

/// Margin, metric, and embedding width of the contrastive space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeConfig {
    pub margin: f64,
    pub metric: DistanceMetric,
    pub embedding_dim: usize,
}

impl PrototypeConfig {
    pub fn new(margin: f64, metric: DistanceMetric, embedding_dim: usize) -> Result<Self> {
        let cfg = PrototypeConfig {
            margin,
            metric,
            embedding_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::invalid("margin must be a positive finite number"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be at least 1"));
        }
        Ok(())
    }

    /// Configuration problems worth surfacing that are not hard errors.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.metric == DistanceMetric::Cosine && self.margin > 2.0 {
            out.push(format!(
                "cosine distance never exceeds 2, so margin {} makes the hinge unreachable",
                self.margin
            ));
        }
        out
    }
}

/// Two affine layers with a ReLU between: `z = W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
}

/// Forward-pass values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Vec<f64>,
    pre_activation: Vec<f64>,
    hidden: Vec<f64>,
}

impl ProjectionCache {
    /// Smallest pre-activation magnitude; useful for steering gradient
    /// checks away from the ReLU kink.
    pub fn min_pre_activation_magnitude(&self) -> f64 {
        self.pre_activation
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Gradients of a scalar loss with respect to the head parameters and input.
#[derive(Debug, Clone)]
pub struct ProjectionGrads {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
    pub input: Vec<f64>,
}

impl ProjectionHead {
    pub fn new(w1: Tensor, b1: Vec<f64>, w2: Tensor, b2: Vec<f64>) -> Result<Self> {
        if w1.rank() != 2 || w2.rank() != 2 {
            return Err(Error::invalid("projection head weights must be matrices"));
        }
        if w1.rows() != b1.len() {
            return Err(Error::invalid("b1 length must match W1 rows"));
        }
        if w2.cols() != w1.rows() {
            return Err(Error::invalid("W2 columns must match W1 rows"));
        }
        if w2.rows() != b2.len() {
            return Err(Error::invalid("b2 length must match W2 rows"));
        }
        if !b1.iter().chain(&b2).all(|v| v.is_finite()) {
            return Err(Error::invalid("projection head biases must be finite"));
        }
        Ok(ProjectionHead { w1, b1, w2, b2 })
    }

    /// Seeded uniform initialization in `[-scale, scale]`.
    pub fn seeded(
        input_dim: usize,
        hidden_dim: usize,
        embedding_dim: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        if input_dim == 0 || hidden_dim == 0 || embedding_dim == 0 {
            return Err(Error::invalid("projection head dimensions must be positive"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
        };
        ProjectionHead::new(
            Tensor::new(vec![hidden_dim, input_dim], draw(hidden_dim * input_dim))?,
            draw(hidden_dim),
            Tensor::new(vec![embedding_dim, hidden_dim], draw(embedding_dim * hidden_dim))?,
            draw(embedding_dim),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn w1(&self) -> &Tensor {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &Tensor {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    /// New head with parameters shifted by `-lr * grad`.
    pub fn stepped(&self, grads: &ProjectionGrads, lr: f64) -> Result<Self> {
        let step_vec = |p: &[f64], g: &[f64]| -> Vec<f64> {
            p.iter().zip(g).map(|(pv, gv)| pv - lr * gv).collect()
        };
        ProjectionHead::new(
            Tensor::new(self.w1.shape().to_vec(), step_vec(self.w1.data(), grads.w1.data()))?,
            step_vec(&self.b1, &grads.b1),
            Tensor::new(self.w2.shape().to_vec(), step_vec(self.w2.data(), grads.w2.data()))?,
            step_vec(&self.b2, &grads.b2),
        )
    }
}

/// Projects a feature vector into the embedding space, returning the
/// embedding and the cache needed for the backward pass.
pub fn project(head: &ProjectionHead, feature: &[f64]) -> Result<(Vec<f64>, ProjectionCache)> {
    if feature.len() != head.input_dim() {
        return Err(Error::invalid(format!(
            "feature has length {}, head expects {}",
            feature.len(),
            head.input_dim()
        )));
    }
    let mut pre = matvec(&head.w1, feature)?;
    for (p, b) in pre.iter_mut().zip(&head.b1) {
        *p += b;
    }
    let hidden = relu(&pre);
    let mut z = matvec(&head.w2, &hidden)?;
    for (zi, b) in z.iter_mut().zip(&head.b2) {
        *zi += b;
    }
    Ok((
        z,
        ProjectionCache {
            input: feature.to_vec(),
            pre_activation: pre,
            hidden,
        },
    ))
}

/// Backward pass of [`project`]: given `dL/dz`, produces gradients for every
/// head parameter and for the input feature.
pub fn project_backward(
    head: &ProjectionHead,
    cache: &ProjectionCache,
    dz: &[f64],
) -> Result<ProjectionGrads> {
    if dz.len() != head.embedding_dim() {
        return Err(Error::invalid(format!(
            "dz has length {}, head embeds into {}",
            dz.len(),
            head.embedding_dim()
        )));
    }
    let hidden_dim = head.hidden_dim();
    let input_dim = head.input_dim();

    // dW2 = dz (outer) hidden, db2 = dz
    let mut dw2 = vec![0.0; head.embedding_dim() * hidden_dim];
    for (m, &dzm) in dz.iter().enumerate() {
        for (h, &hh) in cache.hidden.iter().enumerate() {
            dw2[m * hidden_dim + h] = dzm * hh;
        }
    }

    // dhidden = W2^T dz, gated by the ReLU mask
    let mut dhidden = matvec_transpose(&head.w2, dz)?;
    for (dh, &pre) in dhidden.iter_mut().zip(&cache.pre_activation) {
        if pre <= 0.0 {
            *dh = 0.0;
        }
    }

    let mut dw1 = vec![0.0; hidden_dim * input_dim];
    for (h, &dhh) in dhidden.iter().enumerate() {
        for (i, &xi) in cache.input.iter().enumerate() {
            dw1[h * input_dim + i] = dhh * xi;
        }
    }

    let dinput = matvec_transpose(&head.w1, &dhidden)?;

    Ok(ProjectionGrads {
        w1: Tensor::new(vec![hidden_dim, input_dim], dw1)?,
        b1: dhidden,
        w2: Tensor::new(vec![head.embedding_dim(), hidden_dim], dw2)?,
        b2: dz.to_vec(),
        input: dinput,
    })
}

/// Per-category FIFO feature queues with prototype vectors and the momentum
/// refresh schedule state.
///
/// Single-writer contract: one training loop owns and mutates the store;
/// readers take immutable prototype snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    queues: Vec<VecDeque<Vec<f64>>>,
    prototypes: Vec<Option<Vec<f64>>>,
    eta: f64,
    init_iteration: usize,
    refresh_period: usize,
    capacity: usize,
    dim: usize,
    initialized: bool,
}

impl PrototypeStore {
    pub fn new(
        num_categories: usize,
        dim: usize,
        capacity: usize,
        eta: f64,
        init_iteration: usize,
        refresh_period: usize,
    ) -> Result<Self> {
        if num_categories == 0 {
            return Err(Error::invalid("store needs at least one category"));
        }
        if dim == 0 || capacity == 0 {
            return Err(Error::invalid("store dimension and capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("momentum factor must be in [0, 1], got {eta}")));
        }
        if refresh_period == 0 {
            return Err(Error::invalid("refresh period must be at least 1"));
        }
        Ok(PrototypeStore {
            queues: vec![VecDeque::new(); num_categories],
            prototypes: vec![None; num_categories],
            eta,
            init_iteration,
            refresh_period,
            capacity,
            dim,
            initialized: false,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.queues.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn init_iteration(&self) -> usize {
        self.init_iteration
    }

    pub fn refresh_period(&self) -> usize {
        self.refresh_period
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    pub fn queue(&self, category: usize) -> Option<&VecDeque<Vec<f64>>> {
        self.queues.get(category)
    }

    /// Current prototype snapshot; `None` entries are categories whose
    /// queues have never produced a prototype.
    pub fn prototypes(&self) -> &[Option<Vec<f64>>] {
        &self.prototypes
    }

    /// FIFO append; the oldest entry is evicted once the queue is full.
    pub fn push_feature(&mut self, category: usize, z: &[f64]) -> Result<()> {
        if category >= self.queues.len() {
            return Err(Error::invalid(format!(
                "category {category} out of range for {} queues",
                self.queues.len()
            )));
        }
        if z.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding has length {}, store expects {}",
                z.len(),
                self.dim
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("embedding entries must be finite"));
        }
        let q = &mut self.queues[category];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(z.to_vec());
        Ok(())
    }

    /// Elementwise mean of each category queue; empty queues yield `None`.
    pub fn compute_prototypes(&self) -> Vec<Option<Vec<f64>>> {
        self.queues
            .iter()
            .map(|q| {
                if q.is_empty() {
                    return None;
                }
                let mut mean = vec![0.0; self.dim];
                for z in q {
                    for (m, v) in mean.iter_mut().zip(z) {
                        *m += v;
                    }
                }
                let n = q.len() as f64;
                for m in &mut mean {
                    *m /= n;
                }
                Some(mean)
            })
            .collect()
    }

    /// Sets the prototypes to the current queue means and marks the store
    /// initialized. At least one queue must be non-empty.
    pub fn initialize(&mut self) -> Result<()> {
        let protos = self.compute_prototypes();
        if protos.iter().all(Option::is_none) {
            return Err(Error::InvalidState(
                "cannot initialize prototypes: every queue is empty".into(),
            ));
        }
        self.prototypes = protos;
        self.initialized = true;
        Ok(())
    }

    /// Momentum refresh `p <- eta * p + (1 - eta) * p_new` per category.
    /// Categories absent from `p_new` keep their old prototype; categories
    /// that never had a prototype adopt the new one directly.
    pub fn momentum_update(&mut self, p_new: &[Option<Vec<f64>>]) -> Result<()> {
        if !self.initialized {
            return Err(Error::InvalidState(
                "momentum update requires initialized prototypes".into(),
            ));
        }
        if p_new.len() != self.prototypes.len() {
            return Err(Error::invalid(format!(
                "momentum update got {} categories, store has {}",
                p_new.len(),
                self.prototypes.len()
            )));
        }
        for (old, new) in self.prototypes.iter_mut().zip(p_new) {
            let Some(new) = new else { continue };
            if new.len() != self.dim {
                return Err(Error::invalid("prototype dimension mismatch"));
            }
            match old {
                Some(p) => {
                    for (pv, nv) in p.iter_mut().zip(new) {
                        *pv = self.eta * *pv + (1.0 - self.eta) * nv;
                    }
                }
                None => *old = Some(new.clone()),
            }
        }
        Ok(())
    }
}

/// What the training loop should do with prototypes at a given iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleAction {
    /// Warmup: no prototypes yet, contrastive loss contributes zero.
    None,
    /// Initialization iteration: set prototypes to queue means, then apply
    /// the loss.
    InitializeAndLoss,
    /// Refresh iteration: momentum-update prototypes, then apply the loss.
    RefreshAndLoss,
    /// Past warmup, off the refresh grid: apply the loss with the current
    /// prototypes.
    LossOnly,
}

/// The prototype maintenance schedule. Before `init_iteration` nothing
/// happens; at it prototypes initialize; after it they refresh whenever the
/// iteration is a multiple of `refresh_period`; every other iteration past
/// warmup computes the loss against the standing prototypes.
pub fn schedule_action(
    iteration: usize,
    init_iteration: usize,
    refresh_period: usize,
) -> ScheduleAction {
    assert!(refresh_period >= 1, "refresh period must be at least 1");
    if iteration < init_iteration {
        ScheduleAction::None
    } else if iteration == init_iteration {
        ScheduleAction::InitializeAndLoss
    } else if iteration % refresh_period == 0 {
        ScheduleAction::RefreshAndLoss
    } else {
        ScheduleAction::LossOnly
    }
}

/// Contrastive loss of one embedding against the prototype set, with its
/// analytic gradient with respect to the embedding.
///
/// The own-category term is the plain distance; every other category
/// contributes the hinge `max(0, margin - distance)`. Categories without a
/// prototype are skipped. The hinge subgradient at the kink is 0.
pub fn contrastive_loss(
    z: &[f64],
    label: usize,
    prototypes: &[Option<Vec<f64>>],
    cfg: &PrototypeConfig,
) -> Result<(f64, Vec<f64>)> {
    if prototypes.iter().all(Option::is_none) {
        return Err(Error::InvalidState(
            "contrastive loss requires initialized prototypes".into(),
        ));
    }
    if label >= prototypes.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} prototype slots",
            prototypes.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    for (k, proto) in prototypes.iter().enumerate() {
        let Some(p) = proto else { continue };
        let (d, dgrad) = cfg.metric.distance_with_grad(z, p)?;
        if k == label {
            loss += d;
            for (g, dg) in grad.iter_mut().zip(&dgrad) {
                *g += dg;
            }
        } else if d < cfg.margin {
            loss += cfg.margin - d;
            for (g, dg) in grad.iter_mut().zip(&dgrad) {
                *g -= dg;
            }
        }
    }
    Ok((loss, grad))
}

/// Outcome of the open-set decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Known(usize),
    Unknown,
}

/// Distance-gated classification: if the smallest prototype distance exceeds
/// the margin the sample is rejected as unknown; otherwise the softmax
/// classifier decides among the known categories (ties to the lowest index).
pub fn classify(
    z: &[f64],
    scores: &ClassScores,
    prototypes: &[Option<Vec<f64>>],
    cfg: &PrototypeConfig,
) -> Result<Classification> {
    let mut min_dist = f64::INFINITY;
    let mut any = false;
    for proto in prototypes.iter().flatten() {
        min_dist = min_dist.min(cfg.metric.distance(z, proto)?);
        any = true;
    }
    if !any {
        return Err(Error::InvalidState(
            "classification requires initialized prototypes".into(),
        ));
    }
    if min_dist > cfg.margin {
        return Ok(Classification::Unknown);
    }
    let probs = softmax(scores.logits())?;
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    Ok(Classification::Known(best))
}
