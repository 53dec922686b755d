//! Explainer training: distillation loss, prior losses and the decaying
//! prior weight λ(t) = β/√t.

use std::str::FromStr;

use concept_autodiff::{AutodiffError, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ExplainError, Result};
use crate::models::{ConceptBank, ExplainerModel, ExplainerVars, PerformerModel};
use crate::prior::{clamp_nonneg, concept_prior, PriorWeights, SharedFeature};

/// Added inside the cross-entropy logarithm so clamped zeros stay finite.
pub const CE_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// −Σ ŵᵢ ln α̂ᵢ over L1-normalized vectors; needs α, w ≥ 0.
    CrossEntropy,
    /// ‖α/‖α‖₂ − w/‖w‖₂‖².
    L2,
    /// Distillation loss only.
    #[default]
    None,
}

impl FromStr for PriorKind {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(PriorKind::CrossEntropy),
            "l2" => Ok(PriorKind::L2),
            "none" => Ok(PriorKind::None),
            other => Err(ExplainError::Config(format!(
                "unknown prior kind {other:?} (ce|l2|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub beta: f64,
    pub prior: PriorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Softplus on the explainer output.
    pub positivity: bool,
    pub shared_feature: SharedFeature,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            prior: PriorKind::CrossEntropy,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            positivity: true,
            shared_feature: SharedFeature::Hidden,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ExplainError::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if self.epochs < 1 {
            return Err(ExplainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(ExplainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ExplainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.prior == PriorKind::CrossEntropy && !self.positivity {
            return Err(ExplainError::Config(
                "the cross-entropy prior needs nonnegative α; enable positivity".into(),
            ));
        }
        Ok(())
    }
}

/// λ(t) = β/√t for epochs t ≥ 1.
pub fn lambda_schedule(t: usize, beta: f64) -> Result<f64> {
    if t < 1 {
        return Err(ExplainError::Config("epoch index starts at 1".into()));
    }
    Ok(beta / (t as f64).sqrt())
}

/// ‖ŷ − Σ αᵢyᵢ − b‖².
pub fn distill_loss(score: f64, alpha: &[f64], y: &[f64], b: f64) -> Result<f64> {
    let r = score - crate::models::explainer_predict(alpha, y, b)?;
    Ok(r * r)
}

fn l1_normalized(w: &[f64]) -> Option<Vec<f64>> {
    let norm: f64 = w.iter().map(|v| v.abs()).sum();
    (norm > 0.0).then(|| w.iter().map(|v| v / norm).collect())
}

fn l2_normalized(w: &[f64]) -> Option<Vec<f64>> {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| w.iter().map(|v| v / norm).collect())
}

/// Records the cross-entropy prior loss for `alpha` against fixed
/// weights. Returns `None` when either vector has zero L1 norm.
pub fn record_prior_ce(tape: &mut Tape, alpha: Var, w: &[f64]) -> Result<Option<Var>> {
    let av = tape.value(alpha);
    if av.len() != w.len() {
        return Err(ExplainError::LengthMismatch {
            what: "prior weights",
            expected: av.len(),
            got: w.len(),
        });
    }
    if av.data().iter().chain(w).any(|&v| v < 0.0) {
        return Err(ExplainError::Config(
            "cross-entropy prior needs nonnegative α and w".into(),
        ));
    }
    let Some(w_hat) = l1_normalized(w) else {
        return Ok(None);
    };
    if av.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let norm = tape.l1norm(alpha)?;
    let a_hat = tape.div_scalar(alpha, norm)?;
    let smoothed = tape.offset(a_hat, CE_SMOOTHING)?;
    let logs = tape.ln(smoothed)?;
    let target = tape.constant(Tensor::vector(&w_hat));
    let dot = tape.dot(target, logs)?;
    Ok(Some(tape.scale(dot, -1.0)?))
}

/// Records ‖α/‖α‖₂ − w/‖w‖₂‖². Returns `None` for zero-norm inputs.
pub fn record_prior_l2(tape: &mut Tape, alpha: Var, w: &[f64]) -> Result<Option<Var>> {
    let av = tape.value(alpha);
    if av.len() != w.len() {
        return Err(ExplainError::LengthMismatch {
            what: "prior weights",
            expected: av.len(),
            got: w.len(),
        });
    }
    let Some(w_hat) = l2_normalized(w) else {
        return Ok(None);
    };
    if av.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let norm = tape.l2norm(alpha)?;
    let a_hat = tape.div_scalar(alpha, norm)?;
    let target = tape.constant(Tensor::vector(&w_hat));
    let diff = tape.sub(a_hat, target)?;
    Ok(Some(tape.dot(diff, diff)?))
}

fn eval_prior(
    alpha: &[f64],
    w: &[f64],
    record: fn(&mut Tape, Var, &[f64]) -> Result<Option<Var>>,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(alpha));
    match record(&mut tape, a, w)? {
        Some(v) => Ok(Some(tape.scalar(v)?)),
        None => Ok(None),
    }
}

/// Cross-entropy of L1-normalized α against L1-normalized w (the target),
/// or `None` when the sample must be skipped.
pub fn prior_loss_ce(alpha: &[f64], w: &[f64]) -> Result<Option<f64>> {
    eval_prior(alpha, w, record_prior_ce)
}

/// Squared distance between L2-normalized α and w, or `None` when the
/// sample must be skipped.
pub fn prior_loss_l2(alpha: &[f64], w: &[f64]) -> Result<Option<f64>> {
    eval_prior(alpha, w, record_prior_l2)
}

/// Everything the explainer needs from one image, computed once since the
/// performer and concept bank are frozen during distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSample {
    /// Flattened explainer input.
    pub features: Tensor,
    /// Concept scores y.
    pub concepts: Tensor,
    /// Performer score ŷ.
    pub score: f64,
    pub prior: Option<PriorWeights>,
}

/// Runs the frozen performer and concept bank over `images` and caches the
/// explainer inputs, concept scores, scores and (if needed) prior weights.
pub fn prepare_samples(
    performer: &PerformerModel,
    bank: &ConceptBank,
    explainer: &ExplainerModel,
    images: &[Tensor],
    prior: PriorKind,
    shared: SharedFeature,
) -> Result<Vec<DistillSample>> {
    images
        .iter()
        .map(|image| {
            let out = performer.forward(image)?;
            let concepts = bank.scores_from(&out)?;
            let features = explainer.features(image, &out)?;
            let prior = match prior {
                PriorKind::None => None,
                PriorKind::CrossEntropy => {
                    Some(clamp_nonneg(concept_prior(performer, bank, image, shared)?))
                }
                PriorKind::L2 => Some(concept_prior(performer, bank, image, shared)?),
            };
            Ok(DistillSample {
                features,
                concepts,
                score: out.score,
                prior,
            })
        })
        .collect()
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean distillation loss L.
    pub distill: f64,
    /// Mean prior loss 𝓛 (skipped samples count as 0).
    pub prior: f64,
    pub lambda: f64,
    /// Mean of L + λ·𝓛.
    pub total: f64,
    /// Samples whose prior loss was skipped.
    pub skipped: usize,
}

struct BatchGraph {
    root: Var,
    breakdown: LossBreakdown,
}

fn record_batch(
    tape: &mut Tape,
    explainer: &ExplainerModel,
    vars: &ExplainerVars,
    batch: &[&DistillSample],
    kind: PriorKind,
    lambda: f64,
) -> Result<BatchGraph> {
    let mut acc: Option<Var> = None;
    let (mut distill_sum, mut prior_sum, mut skipped) = (0.0, 0.0, 0usize);
    for s in batch {
        let f = tape.constant(s.features.clone());
        let alpha = explainer.record(tape, vars, f)?;
        let y = tape.constant(s.concepts.clone());
        let pred = tape.dot(alpha, y)?;
        let pred = tape.add(pred, vars.bias)?;
        let resid = tape.offset(pred, -s.score)?;
        let mut loss = tape.square(resid)?;
        distill_sum += tape.scalar(loss)?;
        if kind != PriorKind::None && lambda > 0.0 {
            let w = s.prior.as_ref().ok_or_else(|| {
                ExplainError::Config("prior loss requested but sample has no prior weights".into())
            })?;
            let term = match kind {
                PriorKind::CrossEntropy => record_prior_ce(tape, alpha, &w.w)?,
                PriorKind::L2 => record_prior_l2(tape, alpha, &w.w)?,
                PriorKind::None => unreachable!(),
            };
            match term {
                Some(p) => {
                    prior_sum += tape.scalar(p)?;
                    let weighted = tape.scale(p, lambda)?;
                    loss = tape.add(loss, weighted)?;
                }
                None => skipped += 1,
            }
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, loss)?,
            None => loss,
        });
    }
    let sum = acc.ok_or_else(|| ExplainError::Degenerate("empty batch".into()))?;
    let n = batch.len() as f64;
    let root = tape.scale(sum, 1.0 / n)?;
    let breakdown = LossBreakdown {
        distill: distill_sum / n,
        prior: prior_sum / n,
        lambda,
        total: tape.scalar(root)?,
        skipped,
    };
    Ok(BatchGraph { root, breakdown })
}

/// Loss = mean over the batch of L + λ(t)·𝓛(α, w).
pub fn total_loss(
    explainer: &ExplainerModel,
    batch: &[DistillSample],
    config: &DistillConfig,
    t: usize,
) -> Result<LossBreakdown> {
    let lambda = match config.prior {
        PriorKind::None => 0.0,
        _ => lambda_schedule(t, config.beta)?,
    };
    let mut tape = Tape::new();
    let vars = explainer.bind(&mut tape, false);
    let refs: Vec<&DistillSample> = batch.iter().collect();
    Ok(record_batch(&mut tape, explainer, &vars, &refs, config.prior, lambda)?.breakdown)
}

/// Per-epoch training curve entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean distillation loss over the epoch's batches.
    pub distill: f64,
    pub prior: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Progress of one distillation run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch (starts counting at 1).
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Sample-epochs where the prior loss was skipped.
    pub skipped_prior: usize,
}

impl TrainState {
    pub fn final_distill_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.distill)
    }
}

/// Per-parameter adaptive steps (Adam) or plain gradient descent.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        let gv = g.data()[j];
                        m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * gv;
                        v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * gv * gv;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] -= self.lr * mh / (vh.sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

fn explainer_grads(vars: &ExplainerVars, grads: &concept_autodiff::Gradients) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(2 * vars.layers.len() + 1);
    for l in &vars.layers {
        out.push(grads.wrt(l.weight));
        out.push(grads.wrt(l.bias));
    }
    out.push(grads.wrt(vars.bias));
    out
}

fn diverged(epoch: usize) -> impl Fn(ExplainError) -> ExplainError {
    move |e| match e {
        ExplainError::Autodiff(AutodiffError::NonFinite { .. }) => ExplainError::Diverged {
            epoch,
            cause: e.to_string(),
        },
        other => other,
    }
}

/// Minimizes L + λ(t)·𝓛 over the explainer's parameters θ_g and b.
/// Only the explainer is mutated; samples come from frozen models.
pub fn train(
    explainer: &mut ExplainerModel,
    samples: &[DistillSample],
    config: &DistillConfig,
) -> Result<TrainState> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ExplainError::Degenerate("empty training set".into()));
    }
    if explainer.positivity != config.positivity {
        return Err(ExplainError::Config(
            "explainer positivity flag disagrees with the distillation config".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sizes: Vec<usize> = explainer.params_mut().iter().map(|p| p.len()).collect();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &sizes);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut state = TrainState::default();

    for t in 1..=config.epochs {
        let lambda = match config.prior {
            PriorKind::None => 0.0,
            _ => lambda_schedule(t, config.beta)?,
        };
        order.shuffle(&mut rng);
        let (mut distill_sum, mut prior_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&DistillSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::new();
            let vars = explainer.bind(&mut tape, true);
            let graph = record_batch(&mut tape, explainer, &vars, &batch, config.prior, lambda)
                .map_err(diverged(t))?;
            let grads = tape
                .backward(graph.root)
                .map_err(ExplainError::from)
                .map_err(diverged(t))?;
            let grads = explainer_grads(&vars, &grads);
            opt.step(&mut explainer.params_mut(), &grads);

            let n = batch.len() as f64;
            distill_sum += graph.breakdown.distill * n;
            prior_sum += graph.breakdown.prior * n;
            total_sum += graph.breakdown.total * n;
            state.skipped_prior += graph.breakdown.skipped;
        }
        let n = samples.len() as f64;
        let record = EpochRecord {
            epoch: t,
            distill: distill_sum / n,
            prior: prior_sum / n,
            lambda,
            total: total_sum / n,
        };
        if !(record.total.is_finite()
            && explainer
                .params_mut()
                .iter()
                .all(|p| p.iter().all(|v| v.is_finite())))
        {
            return Err(ExplainError::Diverged {
                epoch: t,
                cause: "non-finite loss or parameters".into(),
            });
        }
        state.history.push(record);
        state.epoch = t;
    }
    Ok(state)
}

/// Prepares samples from the frozen models and trains the explainer.
pub fn distill(
    explainer: &mut ExplainerModel,
    performer: &PerformerModel,
    bank: &ConceptBank,
    images: &[Tensor],
    config: &DistillConfig,
) -> Result<TrainState> {
    config.validate()?;
    let samples = prepare_samples(
        performer,
        bank,
        explainer,
        images,
        config.prior,
        config.shared_feature,
    )?;
    train(explainer, &samples, config)
}

/// Training curve as CSV: `epoch,L,prior_loss,lambda,total`.
pub fn curves_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,L,prior_loss,lambda,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.distill, r.prior, r.lambda, r.total
        ));
    }
    out
}
