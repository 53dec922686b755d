//! Builds and trains the performer on a synthetic dataset.
//!
//! The trunk is planted rather than learned: the first conv layer holds one
//! matched filter per concept template (bias cancelling partial matches),
//! the second is an identity pass, so top-map channel i fires exactly where
//! concept i was drawn. Only what sits after the spatial sum is trained.

use concept_autodiff::{Padding, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{Optimizer, OptimizerKind};
use crate::error::{ExplainError, Result};
use crate::harness::synthetic::{Dataset, Split};
use crate::models::{
    concept_scores_case1, CaseTag, ConceptBank, ConvLayer, DenseLayer, PartMap, PerformerModel,
};

/// Detector bias as a fraction of ‖t‖²; a one-pixel shift of a ±1 3×3
/// template matches at most 6/9 of its energy, well below this.
const DETECTOR_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on head weights (not biases).
    pub weight_decay: f64,
    /// Width of the shared hidden layer of the shared-head topology.
    pub hidden: usize,
    /// Required eval-accuracy margin over the majority class.
    pub min_margin: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.05,
            weight_decay: 1e-3,
            hidden: 16,
            min_margin: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub majority: f64,
    /// Eval accuracy of each concept head on concept presence (shared-head only).
    pub head_accuracies: Vec<f64>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    pub performer: PerformerModel,
    pub bank: ConceptBank,
    pub report: PretrainReport,
}

/// Matched-filter trunk: conv(k×k, 1→n, same) + relu, conv(3×3 identity,
/// n→n, same) + relu.
pub fn planted_trunk(templates: &[Vec<f64>], patch: usize) -> Result<Vec<ConvLayer>> {
    let n = templates.len();
    let mut k1 = vec![0.0; patch * patch * n];
    let mut b1 = vec![0.0; n];
    for (o, t) in templates.iter().enumerate() {
        for (p, &v) in t.iter().enumerate() {
            k1[p * n + o] = v;
        }
        b1[o] = -DETECTOR_THRESHOLD * t.iter().map(|v| v * v).sum::<f64>();
    }
    let mut k2 = vec![0.0; 9 * n * n];
    for c in 0..n {
        k2[(4 * n + c) * n + c] = 1.0;
    }
    Ok(vec![
        ConvLayer {
            kernels: Tensor::new(vec![patch, patch, 1, n], k1)?,
            bias: Tensor::new(vec![n], b1)?,
            padding: Padding::Same,
        },
        ConvLayer {
            kernels: Tensor::new(vec![3, 3, n, n], k2)?,
            bias: Tensor::zeros(&[n]),
            padding: Padding::Same,
        },
    ])
}

fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    crate::metrics::accuracy_at(scores, labels, 0.0)
}

fn majority(labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
    pos.max(1.0 - pos)
}

/// Spatial sums of the planted top map for every image.
fn pooled(trunk: &[ConvLayer], input_shape: &[usize], split: &Split) -> Result<Vec<Tensor>> {
    let probe = PerformerModel {
        input_shape: input_shape.to_vec(),
        trunk: trunk.to_vec(),
        hidden: None,
        head: DenseLayer::zeros(1, 1),
    };
    split
        .images
        .iter()
        .map(|img| concept_scores_case1(&probe.top_map(img)?))
        .collect()
}

/// Records softplus(s) − l·s, the logistic loss of score `s` for label `l`.
fn logistic(
    tape: &mut Tape,
    s: concept_autodiff::Var,
    label: bool,
) -> Result<concept_autodiff::Var> {
    let sp = tape.softplus(s)?;
    if label {
        Ok(tape.sub(sp, s)?)
    } else {
        Ok(sp)
    }
}

struct Heads {
    hidden: Option<DenseLayer>,
    target: DenseLayer,
    concepts: Vec<DenseLayer>,
}

impl Heads {
    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut out: Vec<&mut DenseLayer> = Vec::new();
        if let Some(h) = &mut self.hidden {
            out.push(h);
        }
        out.push(&mut self.target);
        out.extend(self.concepts.iter_mut());
        out
    }
}

fn train_heads(
    heads: &mut Heads,
    inputs: &[Tensor],
    split: &Split,
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    let sizes: Vec<usize> = heads
        .layers_mut()
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate, &sizes);
    let mut losses = Vec::with_capacity(config.epochs);
    let n = inputs.len() as f64;
    for epoch in 1..=config.epochs {
        let mut tape = Tape::new();
        let hidden = heads.hidden.as_ref().map(|h| h.bind(&mut tape, true));
        let target = heads.target.bind(&mut tape, true);
        let concepts: Vec<_> = heads
            .concepts
            .iter()
            .map(|c| c.bind(&mut tape, true))
            .collect();

        let mut acc = None;
        for (i, x) in inputs.iter().enumerate() {
            let mut f = tape.constant(x.clone());
            if let Some(h) = hidden {
                let z = tape.dense(f, h.weight, h.bias)?;
                f = tape.relu(z)?;
            }
            let s = tape.dense(f, target.weight, target.bias)?;
            let mut loss = logistic(&mut tape, s, split.labels[i])?;
            for (j, c) in concepts.iter().enumerate() {
                let s = tape.dense(f, c.weight, c.bias)?;
                let l = logistic(&mut tape, s, split.presence[i][j] > 0)?;
                loss = tape.add(loss, l)?;
            }
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let data = acc.ok_or_else(|| ExplainError::Degenerate("empty training split".into()))?;
        let data = tape.scale(data, 1.0 / n)?;
        let mut total = data;
        for w in std::iter::once(target.weight).chain(concepts.iter().map(|c| c.weight)) {
            let sq = tape.dot(w, w)?;
            let pen = tape.scale(sq, config.weight_decay)?;
            total = tape.add(total, pen)?;
        }
        losses.push(tape.scalar(total)?);
        let grads = tape.backward(total).map_err(|e| ExplainError::Diverged {
            epoch,
            cause: e.to_string(),
        })?;
        let mut g = Vec::with_capacity(sizes.len());
        for v in hidden
            .iter()
            .chain(std::iter::once(&target))
            .chain(&concepts)
        {
            g.push(grads.wrt(v.weight));
            g.push(grads.wrt(v.bias));
        }
        let mut layers = heads.layers_mut();
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(sizes.len());
        for l in layers.iter_mut() {
            let DenseLayer { weight, bias } = &mut **l;
            params.push(weight.data_mut());
            params.push(bias.data_mut());
        }
        opt.step(&mut params, &g);
    }
    Ok(losses)
}

/// Trains the performer's head (and for the shared-head topology a hidden
/// layer plus one presence head per concept). Halts with
/// [`ExplainError::PerformerUntrainable`] when eval accuracy does not beat
/// the majority class by `min_margin`.
pub fn pretrain_performer(
    dataset: &Dataset,
    config: &PretrainConfig,
    case: CaseTag,
) -> Result<Pretrained> {
    let spec = &dataset.spec;
    let n = spec.n_concepts;
    let input_shape = vec![spec.height, spec.width, 1];
    let trunk = planted_trunk(&dataset.templates, spec.patch)?;
    let train_x = pooled(&trunk, &input_shape, &dataset.train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut heads = match case {
        CaseTag::Case1 => Heads {
            hidden: None,
            target: DenseLayer::zeros(n, 1),
            concepts: Vec::new(),
        },
        CaseTag::Case2 => Heads {
            hidden: Some(DenseLayer::uniform(n, config.hidden, &mut rng)),
            target: DenseLayer::zeros(config.hidden, 1),
            concepts: (0..n)
                .map(|_| DenseLayer::zeros(config.hidden, 1))
                .collect(),
        },
    };
    let losses = train_heads(&mut heads, &train_x, &dataset.train, config)?;

    let performer = PerformerModel {
        input_shape,
        trunk,
        hidden: heads.hidden.clone(),
        head: heads.target.clone(),
    };
    let parts: PartMap = dataset.parts.clone();
    let channels: Vec<usize> = (0..n).collect();
    let bank = match case {
        CaseTag::Case1 => ConceptBank::case1(channels, parts)?,
        CaseTag::Case2 => ConceptBank::case2(heads.concepts.clone(), channels, parts)?,
    };

    let score_of = |split: &Split| -> Result<Vec<f64>> {
        split
            .images
            .iter()
            .map(|img| Ok(performer.forward(img)?.score))
            .collect()
    };
    let train_accuracy = accuracy(&score_of(&dataset.train)?, &dataset.train.labels);
    let eval_accuracy = accuracy(&score_of(&dataset.eval)?, &dataset.eval.labels);
    let majority = majority(&dataset.eval.labels);

    let mut head_accuracies = Vec::new();
    if case == CaseTag::Case2 {
        let ys: Vec<Tensor> = dataset
            .eval
            .images
            .iter()
            .map(|img| bank.scores(&performer, img))
            .collect::<Result<_>>()?;
        for j in 0..n {
            let s: Vec<f64> = ys.iter().map(|y| y.data()[j]).collect();
            let l: Vec<bool> = dataset.eval.presence.iter().map(|p| p[j] > 0).collect();
            head_accuracies.push(accuracy(&s, &l));
        }
    }

    if eval_accuracy <= majority + config.min_margin {
        return Err(ExplainError::PerformerUntrainable {
            accuracy: eval_accuracy,
            majority,
        });
    }
    Ok(Pretrained {
        performer,
        bank,
        report: PretrainReport {
            train_accuracy,
            eval_accuracy,
            majority,
            head_accuracies,
            losses,
        },
    })
}
