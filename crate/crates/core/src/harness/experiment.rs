//! Baseline-vs-prior comparisons over seeded replicates, plus the
//! concept-count sweep.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{
    prepare_samples, train, DistillConfig, DistillSample, EpochRecord, PriorKind,
};
use crate::error::{ExplainError, Result};
use crate::harness::pretrain::{pretrain_performer, PretrainConfig, PretrainReport, Pretrained};
use crate::harness::synthetic::{generate_dataset, Dataset, SyntheticSpec};
use crate::metrics::{evaluate, EvalSubset, MetricsReport};
use crate::models::{CaseTag, ConceptBank, ExplainerModel, InputSource, PerformerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerSpec {
    pub hidden: Vec<usize>,
    /// Sum-pooling window applied to the input map (0 pools everything).
    pub pool: usize,
    pub source: InputSource,
}

impl Default for ExplainerSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            pool: 4,
            source: InputSource::TopMap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub spec: SyntheticSpec,
    pub case: CaseTag,
    pub pretrain: PretrainConfig,
    pub explainer: ExplainerSpec,
    /// Settings of the prior-guided run; the baseline reuses them with no prior.
    pub distill: DistillConfig,
    pub eval_subset: EvalSubset,
    pub replicates: Vec<u64>,
    /// Concept counts for the capacity sweep.
    pub sweep: Option<Vec<usize>>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::case1_preset()
    }
}

impl ExperimentConfig {
    /// Channel concepts, cross-entropy prior on clamped weights, softplus α, β = 10.
    pub fn case1_preset() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            case: CaseTag::Case1,
            pretrain: PretrainConfig::default(),
            explainer: ExplainerSpec::default(),
            distill: DistillConfig {
                beta: 10.0,
                prior: PriorKind::CrossEntropy,
                positivity: true,
                epochs: 300,
                learning_rate: 2e-3,
                ..DistillConfig::default()
            },
            eval_subset: EvalSubset::Positive,
            replicates: vec![0, 1, 2, 3, 4],
            sweep: None,
            output_dir: None,
        }
    }

    /// Shared-head concepts, L2 prior, unconstrained α, β = 0.2.
    pub fn case2_preset() -> Self {
        let mut c = Self::case1_preset();
        c.case = CaseTag::Case2;
        c.distill.beta = 0.2;
        c.distill.prior = PriorKind::L2;
        c.distill.positivity = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.distill.validate()?;
        if self.replicates.is_empty() {
            return Err(ExplainError::Config(
                "at least one replicate seed is required".into(),
            ));
        }
        if let Some(counts) = &self.sweep {
            let n = self.spec.n_concepts;
            if counts.is_empty() || counts.iter().any(|&c| c < 2 || c > n) {
                return Err(ExplainError::Config(format!(
                    "sweep counts must lie in 2..={n}, got {counts:?}"
                )));
            }
        }
        Ok(())
    }

    /// Synthetic spec of one replicate; the dataset seed mixes in the replicate seed.
    pub fn replicate_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed: self
                .spec
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(seed),
            ..self.spec.clone()
        }
    }

    pub fn baseline_distill(&self) -> DistillConfig {
        DistillConfig {
            prior: PriorKind::None,
            ..self.distill.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub metrics: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub skipped_prior: usize,
    pub explainer: ExplainerModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_concepts: usize,
    pub concepts: Vec<usize>,
    pub mean_relative_deviation: f64,
    pub explainer_accuracy: f64,
    pub performer_accuracy: f64,
    /// Performer accuracy minus explainer accuracy.
    pub accuracy_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub seed: u64,
    pub dataset_checksum: u64,
    pub performer_checksum: u64,
    pub bank_checksum: u64,
    pub pretrain: PretrainReport,
    pub baseline: RunResult,
    pub ours: RunResult,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReplicateOutcome {
    Completed(Box<ReplicateResult>),
    Failed { seed: u64, cause: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub replicates: Vec<ReplicateOutcome>,
}

impl ExperimentResult {
    pub fn completed(&self) -> impl Iterator<Item = &ReplicateResult> {
        self.replicates.iter().filter_map(|r| match r {
            ReplicateOutcome::Completed(r) => Some(r.as_ref()),
            ReplicateOutcome::Failed { .. } => None,
        })
    }
}

/// A fresh explainer sized for `bank`, reading features shaped like `probe`.
pub fn new_explainer(
    spec: &ExplainerSpec,
    input_dim: usize,
    n_concepts: usize,
    positivity: bool,
    seed: u64,
) -> ExplainerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ExplainerModel::new(
        input_dim,
        &spec.hidden,
        n_concepts,
        positivity,
        spec.source,
        spec.pool,
        &mut rng,
    )
}

/// Explainer feature length for this performer and spec.
pub fn explainer_input_dim(
    spec: &ExplainerSpec,
    performer: &PerformerModel,
    image: &concept_autodiff::Tensor,
) -> Result<usize> {
    let probe = ExplainerModel {
        layers: Vec::new(),
        bias: 0.0,
        positivity: false,
        source: spec.source,
        pool: spec.pool,
    };
    Ok(probe.features(image, &performer.forward(image)?)?.len())
}

fn run_one(
    init: &ExplainerModel,
    samples: &[DistillSample],
    config: &DistillConfig,
    performer: &PerformerModel,
    bank: &ConceptBank,
    dataset: &Dataset,
    subset: EvalSubset,
) -> Result<RunResult> {
    let mut explainer = init.clone();
    let state = train(&mut explainer, samples, config)?;
    let metrics = evaluate(
        performer,
        bank,
        &explainer,
        &dataset.eval.images,
        &dataset.eval.labels,
        subset,
    )?;
    Ok(RunResult {
        metrics,
        history: state.history,
        skipped_prior: state.skipped_prior,
        explainer,
    })
}

/// Subsets the cached samples to the given concepts.
fn select_samples(samples: &[DistillSample], indices: &[usize]) -> Result<Vec<DistillSample>> {
    samples
        .iter()
        .map(|s| {
            let y: Vec<f64> = indices.iter().map(|&i| s.concepts.data()[i]).collect();
            Ok(DistillSample {
                features: s.features.clone(),
                concepts: concept_autodiff::Tensor::vector(&y),
                score: s.score,
                prior: s.prior.as_ref().map(|p| p.select(indices)).transpose()?,
            })
        })
        .collect()
}

/// Trains the prior-guided explainer on nested random concept subsets.
fn run_sweep(
    config: &ExperimentConfig,
    counts: &[usize],
    seed: u64,
    pre: &Pretrained,
    dataset: &Dataset,
    samples: &[DistillSample],
    input_dim: usize,
) -> Result<Vec<SweepPoint>> {
    let n = pre.bank.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut points = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut indices = order[..count].to_vec();
        indices.sort_unstable();
        let bank = pre.bank.select(&indices)?;
        let sub = select_samples(samples, &indices)?;
        let init = new_explainer(
            &config.explainer,
            input_dim,
            count,
            config.distill.positivity,
            seed,
        );
        let run = run_one(
            &init,
            &sub,
            &config.distill,
            &pre.performer,
            &bank,
            dataset,
            config.eval_subset,
        )?;
        let m = &run.metrics;
        points.push(SweepPoint {
            n_concepts: count,
            concepts: indices,
            mean_relative_deviation: m.mean_relative_deviation,
            explainer_accuracy: m.explainer_accuracy,
            performer_accuracy: m.performer_accuracy,
            accuracy_drop: m.performer_accuracy - m.explainer_accuracy,
        });
    }
    Ok(points)
}

/// Runs baseline and prior-guided distillation for one replicate seed on
/// the same frozen performer and dataset.
pub fn run_replicate(config: &ExperimentConfig, seed: u64) -> Result<ReplicateResult> {
    let dataset = generate_dataset(&config.replicate_spec(seed))?;
    let pretrain = PretrainConfig {
        seed,
        ..config.pretrain.clone()
    };
    let pre = pretrain_performer(&dataset, &pretrain, config.case)?;
    let performer_checksum = pre.performer.checksum();
    let bank_checksum = pre.bank.checksum();

    let input_dim =
        explainer_input_dim(&config.explainer, &pre.performer, &dataset.train.images[0])?;
    let init = new_explainer(
        &config.explainer,
        input_dim,
        pre.bank.len(),
        config.distill.positivity,
        seed,
    );
    let samples = prepare_samples(
        &pre.performer,
        &pre.bank,
        &init,
        &dataset.train.images,
        config.distill.prior,
        config.distill.shared_feature,
    )?;

    let baseline_cfg = DistillConfig {
        seed,
        ..config.baseline_distill()
    };
    let ours_cfg = DistillConfig {
        seed,
        ..config.distill.clone()
    };
    let baseline = run_one(
        &init,
        &samples,
        &baseline_cfg,
        &pre.performer,
        &pre.bank,
        &dataset,
        config.eval_subset,
    )?;
    let ours = run_one(
        &init,
        &samples,
        &ours_cfg,
        &pre.performer,
        &pre.bank,
        &dataset,
        config.eval_subset,
    )?;
    if pre.performer.checksum() != performer_checksum || pre.bank.checksum() != bank_checksum {
        return Err(ExplainError::Degenerate(
            "performer changed during distillation".into(),
        ));
    }

    let sweep = match &config.sweep {
        Some(counts) => {
            let sweep_cfg = ExperimentConfig {
                distill: ours_cfg.clone(),
                ..config.clone()
            };
            run_sweep(
                &sweep_cfg, counts, seed, &pre, &dataset, &samples, input_dim,
            )?
        }
        None => Vec::new(),
    };

    Ok(ReplicateResult {
        seed,
        dataset_checksum: dataset.checksum(),
        performer_checksum,
        bank_checksum,
        pretrain: pre.report,
        baseline,
        ours,
        sweep,
    })
}

/// Runs every replicate concurrently. A failing replicate is recorded with
/// its cause and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let replicates = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .replicates
            .iter()
            .map(|&seed| (seed, scope.spawn(move || run_replicate(config, seed))))
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| match h.join() {
                Ok(Ok(r)) => ReplicateOutcome::Completed(Box::new(r)),
                Ok(Err(e)) => ReplicateOutcome::Failed {
                    seed,
                    cause: e.to_string(),
                },
                Err(_) => ReplicateOutcome::Failed {
                    seed,
                    cause: "replicate panicked".into(),
                },
            })
            .collect()
    });
    Ok(ExperimentResult {
        config: config.clone(),
        replicates,
    })
}
