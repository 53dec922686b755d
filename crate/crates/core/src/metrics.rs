//! Evaluation quantities: contribution distributions and their entropy,
//! part aggregation, the channel-ablation oracle, contribution error,
//! relative deviation and thresholded accuracy.

use concept_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ExplainError, Result};
use crate::models::{explainer_predict, ConceptBank, ExplainerModel, PartMap, PerformerModel};

/// Below this |Σ Δy_p| the ablation oracle is undefined for an image.
pub const ORACLE_TOL: f64 = 1e-9;
/// Tolerance when checking that an input sums to one.
const DISTRIBUTION_TOL: f64 = 1e-9;

/// Signed contributions αᵢyᵢ and their normalized magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionVector {
    pub raw: Vec<f64>,
    /// cᵢ = |αᵢyᵢ| / Σⱼ|αⱼyⱼ|; `None` when every contribution is zero.
    pub normalized: Option<Vec<f64>>,
}

impl ContributionVector {
    pub fn entropy(&self) -> Option<f64> {
        self.normalized.as_deref().map(entropy_unchecked)
    }
}

pub fn contributions(alpha: &[f64], y: &[f64]) -> Result<ContributionVector> {
    if alpha.len() != y.len() {
        return Err(ExplainError::LengthMismatch {
            what: "contributions",
            expected: alpha.len(),
            got: y.len(),
        });
    }
    let raw: Vec<f64> = alpha.iter().zip(y).map(|(a, v)| a * v).collect();
    let total: f64 = raw.iter().map(|v| v.abs()).sum();
    let normalized = (total > 0.0).then(|| raw.iter().map(|v| v.abs() / total).collect());
    Ok(ContributionVector { raw, normalized })
}

fn entropy_unchecked(c: &[f64]) -> f64 {
    -c.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// −Σ cᵢ ln cᵢ with 0·ln 0 = 0.
pub fn entropy(c: &[f64]) -> Result<f64> {
    if c.is_empty() || c.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(ExplainError::Degenerate(
            "entropy input has a negative or NaN entry".into(),
        ));
    }
    let total: f64 = c.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(ExplainError::Degenerate(format!(
            "entropy input sums to {total}, not 1"
        )));
    }
    Ok(entropy_unchecked(c))
}

/// Contri_p = Σ_{i∈Ω_p} αᵢyᵢ, in part order.
pub fn aggregate_parts(alpha: &[f64], y: &[f64], parts: &PartMap) -> Result<Vec<f64>> {
    let raw = contributions(alpha, y)?.raw;
    parts.validate(raw.len())?;
    Ok(parts
        .parts()
        .iter()
        .map(|p| p.concepts.iter().map(|&i| raw[i]).sum())
        .collect())
}

/// Score drops Δy_p = ŷ − ŷ(part p's channels zeroed), in part order.
pub fn ablation_deltas(
    performer: &PerformerModel,
    bank: &ConceptBank,
    image: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let top = performer.top_map(image)?;
    let (score, _) = performer.tail(&top)?;
    let c = top.shape()[2];
    let mut deltas = Vec::with_capacity(bank.parts.len());
    for part in bank.parts.parts() {
        let mut ablated = top.clone();
        for &concept in &part.concepts {
            let ch = bank.channels[concept];
            for v in ablated.data_mut().iter_mut().skip(ch).step_by(c) {
                *v = 0.0;
            }
        }
        let (s, _) = performer.tail(&ablated)?;
        deltas.push(score - s);
    }
    Ok((score, deltas))
}

/// y*_p = ŷ · Δy_p / Σ_{p'} Δy_{p'} (signed). `None` when the normalizer
/// vanishes and the oracle is undefined for this image.
pub fn ablation_ground_truth(
    performer: &PerformerModel,
    bank: &ConceptBank,
    image: &Tensor,
) -> Result<Option<Vec<f64>>> {
    let (score, deltas) = ablation_deltas(performer, bank, image)?;
    let total: f64 = deltas.iter().sum();
    if total.abs() < ORACLE_TOL {
        return Ok(None);
    }
    Ok(Some(deltas.iter().map(|d| score * d / total).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionError {
    /// E[|Contri_p − y*_p|] / E[ŷ] for each part.
    pub per_part: Vec<f64>,
    /// Average over parts.
    pub mean: f64,
    /// Images skipped because the oracle was undefined.
    pub excluded: usize,
}

/// E[|Contri_p − y*_p|] / E[ŷ] over the images whose oracle is defined.
pub fn contribution_error(
    part_contributions: &[Vec<f64>],
    oracle: &[Option<Vec<f64>>],
    scores: &[f64],
) -> Result<ContributionError> {
    if part_contributions.len() != oracle.len() || oracle.len() != scores.len() {
        return Err(ExplainError::LengthMismatch {
            what: "contribution_error inputs",
            expected: scores.len(),
            got: part_contributions.len().min(oracle.len()),
        });
    }
    let n_parts = part_contributions.first().map_or(0, Vec::len);
    let mut abs_sum = vec![0.0; n_parts];
    let (mut score_sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for ((contri, truth), &score) in part_contributions.iter().zip(oracle).zip(scores) {
        let Some(truth) = truth else {
            excluded += 1;
            continue;
        };
        if contri.len() != n_parts || truth.len() != n_parts {
            return Err(ExplainError::LengthMismatch {
                what: "part contributions",
                expected: n_parts,
                got: contri.len().min(truth.len()),
            });
        }
        for (acc, (c, t)) in abs_sum.iter_mut().zip(contri.iter().zip(truth)) {
            *acc += (c - t).abs();
        }
        score_sum += score;
        used += 1;
    }
    if used == 0 {
        return Err(ExplainError::Degenerate(
            "oracle undefined on every image".into(),
        ));
    }
    let mean_score = score_sum / used as f64;
    if mean_score < ORACLE_TOL {
        return Err(ExplainError::Degenerate(format!(
            "mean performer output {mean_score} is too small to normalize contribution error"
        )));
    }
    let per_part: Vec<f64> = abs_sum
        .iter()
        .map(|s| s / used as f64 / mean_score)
        .collect();
    let mean = if per_part.is_empty() {
        0.0
    } else {
        per_part.iter().sum::<f64>() / per_part.len() as f64
    };
    Ok(ContributionError {
        per_part,
        mean,
        excluded,
    })
}

/// Per-image |ŷ − explained| / (max ŷ − min ŷ) and the dataset mean.
pub fn relative_deviation(scores: &[f64], explained: &[f64]) -> Result<(Vec<f64>, f64)> {
    if scores.len() != explained.len() {
        return Err(ExplainError::LengthMismatch {
            what: "relative_deviation",
            expected: scores.len(),
            got: explained.len(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return Err(ExplainError::Degenerate(
            "performer outputs have zero range".into(),
        ));
    }
    let per: Vec<f64> = scores
        .iter()
        .zip(explained)
        .map(|(s, e)| (s - e).abs() / range)
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Fraction of images where (score > τ) matches the label.
pub fn accuracy_at(scores: &[f64], labels: &[bool], tau: f64) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s > tau) == **l)
        .count();
    hits as f64 / scores.len() as f64
}

/// Scans τ over −∞, midpoints of adjacent distinct sorted scores and +∞;
/// returns the (τ, accuracy) maximizing accuracy, preferring small |τ|.
pub fn accuracy_with_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(ExplainError::LengthMismatch {
            what: "accuracy_with_threshold",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if labels.is_empty() || labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(ExplainError::Degenerate(
            "threshold scan needs both classes".into(),
        ));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(f64::INFINITY);

    let mut best = (candidates[0], accuracy_at(scores, labels, candidates[0]));
    for &tau in &candidates[1..] {
        let acc = accuracy_at(scores, labels, tau);
        if acc > best.1 || (acc == best.1 && tau.abs() < best.0.abs()) {
            best = (tau, acc);
        }
    }
    Ok(best)
}

/// Serializes ±∞ thresholds as strings, since JSON has no infinity.
mod threshold_serde {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v)
        } else if *v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("bad threshold {t:?}"))),
        }
    }
}

/// Which images enter the entropy and contribution-error averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSubset {
    /// Images whose label is positive, i.e. that contain the category's parts.
    #[default]
    Positive,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub label: bool,
    /// Performer score ŷ.
    pub score: f64,
    /// Σ αᵢyᵢ + b.
    pub explained: f64,
    pub alpha: Vec<f64>,
    pub concepts: Vec<f64>,
    /// αᵢyᵢ.
    pub contributions: Vec<f64>,
    /// Contri_p per part.
    pub parts: Vec<f64>,
    /// y*_p per part, when evaluated and defined.
    pub oracle: Option<Vec<f64>>,
    pub entropy: Option<f64>,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_concepts: usize,
    pub part_names: Vec<String>,
    pub subset: EvalSubset,
    pub mean_entropy: f64,
    /// Images in the subset whose contributions were all zero.
    pub entropy_undefined: usize,
    pub contribution_error: ContributionError,
    pub mean_relative_deviation: f64,
    pub performer_accuracy: f64,
    pub explainer_accuracy: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub bias: f64,
    pub images: Vec<ImageRecord>,
}

impl MetricsReport {
    /// One row per image followed by a `metric,value` summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label,score,explained,deviation,entropy\n");
        for r in &self.images {
            let h = r.entropy.map_or(String::new(), |h| h.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.index, r.label as u8, r.score, r.explained, r.deviation, h
            ));
        }
        out.push_str("\nmetric,value\n");
        for (k, v) in self.summary() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// Scalar metrics in a fixed order.
    pub fn summary(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("mean_entropy", self.mean_entropy),
            ("contribution_error", self.contribution_error.mean),
            ("mean_relative_deviation", self.mean_relative_deviation),
            ("performer_accuracy", self.performer_accuracy),
            ("explainer_accuracy", self.explainer_accuracy),
            ("threshold", self.threshold),
        ]
    }
}

/// Runs the explainer and all metrics over a labeled image set.
pub fn evaluate(
    performer: &PerformerModel,
    bank: &ConceptBank,
    explainer: &ExplainerModel,
    images: &[Tensor],
    labels: &[bool],
    subset: EvalSubset,
) -> Result<MetricsReport> {
    if images.len() != labels.len() {
        return Err(ExplainError::LengthMismatch {
            what: "evaluation labels",
            expected: images.len(),
            got: labels.len(),
        });
    }
    if explainer.n_concepts() != bank.len() {
        return Err(ExplainError::LengthMismatch {
            what: "explainer outputs vs concepts",
            expected: bank.len(),
            got: explainer.n_concepts(),
        });
    }
    let mut records = Vec::with_capacity(images.len());
    for (index, (image, &label)) in images.iter().zip(labels).enumerate() {
        let out = performer.forward(image)?;
        let y = bank.scores_from(&out)?;
        let alpha = explainer.weights(&explainer.features(image, &out)?)?;
        let explained = explainer_predict(alpha.data(), y.data(), explainer.bias)?;
        let cv = contributions(alpha.data(), y.data())?;
        let parts = aggregate_parts(alpha.data(), y.data(), &bank.parts)?;
        let included = label || subset == EvalSubset::All;
        let oracle = if included {
            ablation_ground_truth(performer, bank, image)?
        } else {
            None
        };
        records.push(ImageRecord {
            index,
            label,
            score: out.score,
            explained,
            alpha: alpha.into_data(),
            concepts: y.into_data(),
            entropy: cv.entropy(),
            contributions: cv.raw,
            parts,
            oracle,
            deviation: 0.0,
        });
    }

    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let explained: Vec<f64> = records.iter().map(|r| r.explained).collect();
    let (per, mean_relative_deviation) = relative_deviation(&scores, &explained)?;
    for (r, d) in records.iter_mut().zip(per) {
        r.deviation = d;
    }

    let included: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.label || subset == EvalSubset::All)
        .collect();
    let entropies: Vec<f64> = included.iter().filter_map(|r| r.entropy).collect();
    let entropy_undefined = included.len() - entropies.len();
    let mean_entropy = if entropies.is_empty() {
        return Err(ExplainError::Degenerate(
            "no image has a defined contribution distribution".into(),
        ));
    } else {
        entropies.iter().sum::<f64>() / entropies.len() as f64
    };
    let contribution_error = contribution_error(
        &included.iter().map(|r| r.parts.clone()).collect::<Vec<_>>(),
        &included
            .iter()
            .map(|r| r.oracle.clone())
            .collect::<Vec<_>>(),
        &included.iter().map(|r| r.score).collect::<Vec<_>>(),
    )?;

    let performer_accuracy = accuracy_at(&scores, labels, 0.0);
    let (threshold, explainer_accuracy) = accuracy_with_threshold(&explained, labels)?;
    Ok(MetricsReport {
        n_concepts: bank.len(),
        part_names: bank.parts.parts().iter().map(|p| p.name.clone()).collect(),
        subset,
        mean_entropy,
        entropy_undefined,
        contribution_error,
        mean_relative_deviation,
        performer_accuracy,
        explainer_accuracy,
        threshold,
        bias: explainer.bias,
        images: records,
    })
}
