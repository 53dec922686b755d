//! Synthetic images with planted concept patches and a known labeling rule.

use concept_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ExplainError, Result};
use crate::models::{Fnv, PartMap};

/// Max |⟨tᵢ, tⱼ⟩| / ‖t‖² allowed between generated ±1 templates.
const MAX_TEMPLATE_CORRELATION: f64 = 0.34;
/// Correlation bound every template set must satisfy.
const TEMPLATE_CORRELATION_LIMIT: f64 = 0.9;
const PLACEMENT_ATTEMPTS: usize = 1000;
const PRESENCE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub n_concepts: usize,
    /// Side k of each k×k template.
    pub patch: usize,
    /// Flat k×k templates; drawn as random ±1 patterns when empty.
    pub templates: Vec<Vec<f64>>,
    /// Part map over the concepts; one part per concept when absent.
    pub parts: Option<PartMap>,
    /// Planted importance of each concept in the category rule.
    pub importance: Vec<f64>,
    /// An image is positive iff Σ importanceᵢ·presentᵢ ≥ `min_score`.
    pub min_score: f64,
    /// Concept planted as a shortcut: when present it appears `shortcut_gain`
    /// times, so its concept score dominates the others.
    pub shortcut: Option<usize>,
    pub shortcut_gain: usize,
    /// Probability that each concept is present before the rule is applied.
    pub presence: f64,
    /// Fraction of positive images.
    pub positive_fraction: f64,
    /// Std of the Gaussian background.
    pub noise_std: f64,
    pub train: usize,
    pub eval: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_concepts: 8,
            patch: 3,
            templates: Vec::new(),
            parts: None,
            importance: vec![1.0; 8],
            min_score: 3.0,
            shortcut: Some(0),
            shortcut_gain: 8,
            presence: 0.4,
            positive_fraction: 0.5,
            noise_std: 0.05,
            train: 512,
            eval: 256,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_concepts;
        if n == 0 || self.patch == 0 {
            return Err(ExplainError::Config(
                "need at least one concept and a nonzero patch".into(),
            ));
        }
        if self.patch > self.height || self.patch > self.width {
            return Err(ExplainError::Config(format!(
                "patch {} does not fit a {}×{} image",
                self.patch, self.height, self.width
            )));
        }
        if self.importance.len() != n {
            return Err(ExplainError::LengthMismatch {
                what: "importance vector",
                expected: n,
                got: self.importance.len(),
            });
        }
        if self
            .importance
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(ExplainError::Config(
                "importance must be finite and nonnegative".into(),
            ));
        }
        let nonzero = self.importance.iter().filter(|&&v| v > 0.0).count();
        if nonzero < n.min(2) {
            return Err(ExplainError::Config(format!(
                "importance needs at least {} nonzero entries, got {nonzero}",
                n.min(2)
            )));
        }
        if !self.templates.is_empty() {
            if self.templates.len() != n {
                return Err(ExplainError::LengthMismatch {
                    what: "templates",
                    expected: n,
                    got: self.templates.len(),
                });
            }
            if let Some(t) = self
                .templates
                .iter()
                .find(|t| t.len() != self.patch * self.patch)
            {
                return Err(ExplainError::LengthMismatch {
                    what: "template size",
                    expected: self.patch * self.patch,
                    got: t.len(),
                });
            }
            check_distinguishable(&self.templates)?;
        }
        if let Some(parts) = &self.parts {
            parts.validate(n)?;
        }
        if let Some(s) = self.shortcut {
            if s >= n {
                return Err(ExplainError::IndexOutOfRange { index: s, n });
            }
            if self.shortcut_gain == 0 {
                return Err(ExplainError::Config("shortcut_gain must be >= 1".into()));
            }
        }
        for (name, p) in [
            ("presence", self.presence),
            ("positive_fraction", self.positive_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ExplainError::Config(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(ExplainError::Config(
                "noise_std must be finite and >= 0".into(),
            ));
        }
        let max_patches = n - 1 + self.copies(self.shortcut.unwrap_or(0));
        let cell = self.patch + 1;
        if max_patches * cell * cell > self.height * self.width / 2 {
            return Err(ExplainError::Placement {
                patches: max_patches,
                patch: self.patch,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    pub fn part_map(&self) -> PartMap {
        self.parts
            .clone()
            .unwrap_or_else(|| PartMap::singletons(self.n_concepts))
    }

    /// How many copies of concept `i` a present concept contributes.
    pub fn copies(&self, i: usize) -> usize {
        if self.shortcut == Some(i) {
            self.shortcut_gain
        } else {
            1
        }
    }

    fn rule(&self, present: &[bool]) -> bool {
        let s: f64 = self
            .importance
            .iter()
            .zip(present)
            .filter(|(_, &p)| p)
            .map(|(v, _)| v)
            .sum();
        s >= self.min_score
    }
}

fn check_distinguishable(templates: &[Vec<f64>]) -> Result<()> {
    for (i, a) in templates.iter().enumerate() {
        for b in &templates[i + 1..] {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(ExplainError::Config("templates must be nonzero".into()));
            }
            let corr = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            if corr >= TEMPLATE_CORRELATION_LIMIT {
                return Err(ExplainError::Config(format!(
                    "templates are too similar (normalized correlation {corr:.3})"
                )));
            }
        }
    }
    Ok(())
}

/// Random ±1 templates with pairwise normalized correlation at most
/// [`MAX_TEMPLATE_CORRELATION`] in absolute value.
pub fn random_templates(n: usize, patch: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let size = patch * patch;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..PRESENCE_ATTEMPTS {
        if out.len() == n {
            break;
        }
        let t: Vec<f64> = (0..size)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let ok = out.iter().all(|o| {
            let dot: f64 = o.iter().zip(&t).map(|(a, b)| a * b).sum();
            dot.abs() / size as f64 <= MAX_TEMPLATE_CORRELATION
        });
        if ok {
            out.push(t);
        }
    }
    if out.len() < n {
        return Err(ExplainError::Config(format!(
            "could not draw {n} distinguishable {patch}×{patch} templates"
        )));
    }
    Ok(out)
}

/// A labeled image set with the planted ground truth of each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub images: Vec<Tensor>,
    pub labels: Vec<bool>,
    /// Copies of each concept planted in each image.
    pub presence: Vec<Vec<usize>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// The templates actually used.
    pub templates: Vec<Vec<f64>>,
    pub parts: PartMap,
    pub train: Split,
    pub eval: Split,
}

impl Dataset {
    pub fn checksum(&self) -> u64 {
        let mut acc = Fnv::default();
        for split in [&self.train, &self.eval] {
            for (img, label) in split.images.iter().zip(&split.labels) {
                acc.tensor(img);
                acc.bytes(&[*label as u8]);
            }
        }
        acc.finish()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| ExplainError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| ExplainError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExplainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ExplainError::json(path, e))
    }
}

fn sample_presence(spec: &SyntheticSpec, label: bool, rng: &mut impl Rng) -> Result<Vec<bool>> {
    for _ in 0..PRESENCE_ATTEMPTS {
        let present: Vec<bool> = (0..spec.n_concepts)
            .map(|_| rng.random_bool(spec.presence))
            .collect();
        if spec.rule(&present) == label {
            return Ok(present);
        }
    }
    Err(ExplainError::Config(format!(
        "no presence pattern with label {label} found; check min_score and presence"
    )))
}

/// Places `count` non-overlapping k×k patches with a one-pixel gap.
fn place(spec: &SyntheticSpec, count: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let k = spec.patch;
    let mut taken: Vec<(usize, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.random_range(0..=spec.height - k);
            let c = rng.random_range(0..=spec.width - k);
            let clear = taken
                .iter()
                .all(|&(tr, tc)| r + k < tr || tr + k < r || c + k < tc || tc + k < c);
            if clear {
                taken.push((r, c));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(ExplainError::Placement {
                patches: count,
                patch: k,
                height: spec.height,
                width: spec.width,
            });
        }
    }
    Ok(taken)
}

fn render(
    spec: &SyntheticSpec,
    templates: &[Vec<f64>],
    present: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, k) = (spec.height, spec.width, spec.patch);
    let noise =
        Normal::new(0.0, spec.noise_std).map_err(|e| ExplainError::Config(e.to_string()))?;
    let mut data: Vec<f64> = (0..h * w).map(|_| noise.sample(rng)).collect();
    let mut instances: Vec<usize> = Vec::new();
    let counts: Vec<usize> = present
        .iter()
        .enumerate()
        .map(|(i, &p)| if p { spec.copies(i) } else { 0 })
        .collect();
    for (i, &c) in counts.iter().enumerate() {
        instances.extend(std::iter::repeat_n(i, c));
    }
    let spots = place(spec, instances.len(), rng)?;
    for (&concept, &(r, c)) in instances.iter().zip(&spots) {
        let t = &templates[concept];
        for i in 0..k {
            for j in 0..k {
                data[(r + i) * w + c + j] = t[i * k + j];
            }
        }
    }
    Ok((Tensor::new(vec![h, w, 1], data)?, counts))
}

fn generate_split(
    spec: &SyntheticSpec,
    templates: &[Vec<f64>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Split> {
    let n_pos = (count as f64 * spec.positive_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..count).map(|i| i < n_pos).collect();
    labels.shuffle(rng);
    let mut images = Vec::with_capacity(count);
    let mut presence = Vec::with_capacity(count);
    for &label in &labels {
        let present = sample_presence(spec, label, rng)?;
        let (img, counts) = render(spec, templates, &present, rng)?;
        images.push(img);
        presence.push(counts);
    }
    Ok(Split {
        images,
        labels,
        presence,
    })
}

/// Deterministic under `spec.seed`.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = if spec.templates.is_empty() {
        random_templates(spec.n_concepts, spec.patch, &mut rng)?
    } else {
        spec.templates.clone()
    };
    let train = generate_split(spec, &templates, spec.train, &mut rng)?;
    let eval = generate_split(spec, &templates, spec.eval, &mut rng)?;
    Ok(Dataset {
        spec: spec.clone(),
        templates,
        parts: spec.part_map(),
        train,
        eval,
    })
}
