//! Rough per-image prior weights w used to guide early explainer training.
//!
//! Case 1 sums the Jacobian of ŷ over each top-map channel. Case 2 uses a
//! first-order expansion around a shared feature x: pushing x along
//! ∂yᵢ/∂x changes yᵢ by ε‖∂yᵢ/∂x‖² and ŷ by ε⟨∂ŷ/∂x, ∂yᵢ/∂x⟩, so the ratio
//! is independent of ε. Neither case normalizes w; the prior losses do.

use concept_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ExplainError, Result};
use crate::models::{CaseTag, ConceptBank, ConceptSource, PerformerModel};

/// Squared gradient norm below which a concept is unusable for the prior.
pub const DEGENERATE_GRAD_TOL: f64 = 1e-12;

/// Which shared activation the shared-head prior differentiates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedFeature {
    /// The hidden dense/relu activation feeding every head.
    #[default]
    Hidden,
    /// The trunk's top feature map.
    TopMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    pub w: Vec<f64>,
    pub case: CaseTag,
    pub clamped: bool,
    /// Concepts whose gradient norm fell below [`DEGENERATE_GRAD_TOL`].
    pub degenerate: Vec<usize>,
}

impl PriorWeights {
    /// True when every weight is zero, so no prior loss can be formed.
    pub fn is_degenerate(&self) -> bool {
        self.w.iter().all(|&v| v == 0.0)
    }

    /// Weights for a subset of indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.w.len();
        let w = indices
            .iter()
            .map(|&i| {
                self.w
                    .get(i)
                    .copied()
                    .ok_or(ExplainError::IndexOutOfRange { index: i, n })
            })
            .collect::<Result<Vec<_>>>()?;
        let degenerate = indices
            .iter()
            .enumerate()
            .filter(|(_, i)| self.degenerate.contains(i))
            .map(|(pos, _)| pos)
            .collect();
        Ok(Self {
            w,
            case: self.case,
            clamped: self.clamped,
            degenerate,
        })
    }
}

/// `wᵢ = Σ_{h,w} ∂ŷ/∂x_{hwi}` for every top-map channel, from one
/// backward pass.
pub fn prior_case1(performer: &PerformerModel, image: &Tensor) -> Result<PriorWeights> {
    let top = performer.top_map(image)?;
    prior_case1_from_top_map(performer, &top)
}

pub fn prior_case1_from_top_map(
    performer: &PerformerModel,
    top_map: &Tensor,
) -> Result<PriorWeights> {
    let mut tape = Tape::new();
    let x = tape.leaf(top_map.clone());
    let tail = performer.record_tail(&mut tape, x)?;
    let grad = tape.backward(tail.score)?.wrt(x);
    let n = top_map.shape()[2];
    let mut w = vec![0.0; n];
    for px in grad.data().chunks_exact(n) {
        for (wi, g) in w.iter_mut().zip(px) {
            *wi += g;
        }
    }
    Ok(PriorWeights {
        w,
        case: CaseTag::Case1,
        clamped: false,
        degenerate: Vec::new(),
    })
}

/// First-order ratio from precomputed gradients:
/// `wᵢ = ⟨∂ŷ/∂x, ∂yᵢ/∂x⟩ / ‖∂yᵢ/∂x‖²_F`.
pub fn prior_case2_from_gradients(target: &Tensor, concepts: &[Tensor]) -> Result<PriorWeights> {
    let mut w = Vec::with_capacity(concepts.len());
    let mut degenerate = Vec::new();
    for (i, g) in concepts.iter().enumerate() {
        if g.shape() != target.shape() {
            return Err(concept_autodiff::AutodiffError::ShapeMismatch {
                op: "prior_case2",
                expected: target.shape().to_vec(),
                got: g.shape().to_vec(),
            }
            .into());
        }
        let norm_sq: f64 = g.data().iter().map(|v| v * v).sum();
        if norm_sq < DEGENERATE_GRAD_TOL {
            w.push(0.0);
            degenerate.push(i);
            continue;
        }
        let dot: f64 = target.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        w.push(dot / norm_sq);
    }
    Ok(PriorWeights {
        w,
        case: CaseTag::Case2,
        clamped: false,
        degenerate,
    })
}

/// Shared-feature prior over an already recorded graph: `x` is the shared
/// feature, `target` the node for ŷ and `concepts` the nodes for each yᵢ.
pub fn prior_case2_graph(
    tape: &Tape,
    x: Var,
    target: Var,
    concepts: &[Var],
) -> Result<PriorWeights> {
    let target_grad = tape.backward(target)?.wrt(x);
    let concept_grads = concepts
        .iter()
        .map(|&c| Ok(tape.backward(c)?.wrt(x)))
        .collect::<Result<Vec<_>>>()?;
    prior_case2_from_gradients(&target_grad, &concept_grads)
}

/// Shared-head prior for a performer and its concept heads.
pub fn prior_case2(
    performer: &PerformerModel,
    bank: &ConceptBank,
    image: &Tensor,
    shared: SharedFeature,
) -> Result<PriorWeights> {
    let ConceptSource::SharedHeads { heads } = &bank.source else {
        return Err(ExplainError::ModeMismatch(
            "case2 prior needs a shared-head concept bank".into(),
        ));
    };
    let top = performer.top_map(image)?;
    let mut tape = Tape::new();
    let x = match shared {
        SharedFeature::TopMap => tape.leaf(top),
        SharedFeature::Hidden => {
            let (_, h) = performer.tail(&top)?;
            let h = h.ok_or_else(|| {
                ExplainError::ModeMismatch("performer has no shared hidden layer".into())
            })?;
            tape.leaf(h)
        }
    };
    let features = match shared {
        SharedFeature::TopMap => performer.record_tail(&mut tape, x)?.shared.ok_or_else(|| {
            ExplainError::ModeMismatch("performer has no shared hidden layer".into())
        })?,
        SharedFeature::Hidden => x,
    };
    let hv = performer.head.bind(&mut tape, false);
    let target = tape.dense(features, hv.weight, hv.bias)?;
    let mut concepts = Vec::with_capacity(heads.len());
    for head in heads {
        let v = head.bind(&mut tape, false);
        concepts.push(tape.dense(features, v.weight, v.bias)?);
    }
    prior_case2_graph(&tape, x, target, &concepts)
}

/// Prior weights for the concepts of `bank`, dispatching on its mode.
pub fn concept_prior(
    performer: &PerformerModel,
    bank: &ConceptBank,
    image: &Tensor,
    shared: SharedFeature,
) -> Result<PriorWeights> {
    match bank.mode() {
        CaseTag::Case1 => prior_case1(performer, image)?.select(&bank.channels),
        CaseTag::Case2 => prior_case2(performer, bank, image, shared),
    }
}

/// `wᵢ ← max(wᵢ, 0)`.
pub fn clamp_nonneg(prior: PriorWeights) -> PriorWeights {
    PriorWeights {
        w: prior.w.iter().map(|&v| v.max(0.0)).collect(),
        clamped: true,
        ..prior
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConvLayer, DenseLayer, PartMap};
    use concept_autodiff::{numeric_gradient, Padding};

    fn linear_head_performer(a: &[f64]) -> PerformerModel {
        let n = a.len();
        let mut kernels = vec![0.0; n * n];
        for i in 0..n {
            kernels[i * n + i] = 1.0;
        }
        PerformerModel {
            input_shape: vec![1, 1, n],
            trunk: vec![ConvLayer {
                kernels: Tensor::new(vec![1, 1, n, n], kernels).unwrap(),
                bias: Tensor::zeros(&[n]),
                padding: Padding::Valid,
            }],
            hidden: None,
            head: DenseLayer {
                weight: Tensor::new(vec![1, n], a.to_vec()).unwrap(),
                bias: Tensor::vector(&[0.0]),
            },
        }
    }

    #[test]
    fn case1_linear_head_matches_finite_differences() {
        let p = linear_head_performer(&[3.0, 5.0]);
        let x = Tensor::new(vec![1, 1, 2], vec![0.7, 1.3]).unwrap();
        let prior = prior_case1_from_top_map(&p, &x).unwrap();
        let numeric = numeric_gradient(|t| p.tail(t).unwrap().0, &x, 1e-5);
        assert!((prior.w[0] - numeric.data()[0]).abs() < 1e-8);
        assert!((prior.w[1] - numeric.data()[1]).abs() < 1e-8);
        assert!((prior.w[0] - 3.0).abs() < 1e-12 && (prior.w[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn case1_ignored_channel_has_zero_weight() {
        let p = linear_head_performer(&[2.0, 0.0]);
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 4.0]).unwrap();
        let prior = prior_case1_from_top_map(&p, &x).unwrap();
        assert_eq!(prior.w[1], 0.0);
    }

    #[test]
    fn case1_scale_equivariance() {
        let a = [0.5, -1.5, 2.0];
        let x = Tensor::new(vec![1, 1, 3], vec![0.2, 0.9, 1.1]).unwrap();
        let base = prior_case1_from_top_map(&linear_head_performer(&a), &x).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| v * 3.5).collect();
        let s = prior_case1_from_top_map(&linear_head_performer(&scaled), &x).unwrap();
        for (b, v) in base.w.iter().zip(&s.w) {
            assert!((v - 3.5 * b).abs() < 1e-12);
        }
    }

    fn linear_case2(a: &[f64], bs: &[Vec<f64>]) -> PriorWeights {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.3, -0.8]));
        let av = tape.constant(Tensor::vector(a));
        let target = tape.dot(av, x).unwrap();
        let concepts: Vec<Var> = bs
            .iter()
            .map(|b| {
                let bv = tape.constant(Tensor::vector(b));
                tape.dot(bv, x).unwrap()
            })
            .collect();
        prior_case2_graph(&tape, x, target, &concepts).unwrap()
    }

    #[test]
    fn case2_linear_ratios() {
        let p = linear_case2(&[1.0, 2.0], &[vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!((p.w[0] - 1.0).abs() < 1e-15);
        assert!((p.w[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn case2_self_and_orthogonal() {
        let p = linear_case2(&[1.0, 2.0], &[vec![1.0, 2.0], vec![-2.0, 1.0]]);
        assert_eq!(p.w[0], 1.0);
        assert_eq!(p.w[1], 0.0);
    }

    #[test]
    fn case2_degenerate_gradient_is_zeroed() {
        let p = linear_case2(&[1.0, 2.0], &[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(p.w, vec![0.0, 1.0]);
        assert_eq!(p.degenerate, vec![0]);
    }

    #[test]
    fn case2_on_shared_head_performer() {
        let performer = PerformerModel {
            input_shape: vec![1, 1, 2],
            trunk: vec![],
            hidden: Some(DenseLayer {
                weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::vector(&[0.5, 0.5]),
            }),
            head: DenseLayer {
                weight: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
                bias: Tensor::vector(&[0.0]),
            },
        };
        let heads = vec![
            DenseLayer {
                weight: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
                bias: Tensor::vector(&[0.0]),
            },
            DenseLayer {
                weight: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
                bias: Tensor::vector(&[0.0]),
            },
        ];
        let bank = ConceptBank::case2(heads, vec![0, 1], PartMap::singletons(2)).unwrap();
        let image = Tensor::new(vec![1, 1, 2], vec![0.4, 0.9]).unwrap();
        let hidden = prior_case2(&performer, &bank, &image, SharedFeature::Hidden).unwrap();
        assert!((hidden.w[0] - 1.0).abs() < 1e-12 && (hidden.w[1] - 1.5).abs() < 1e-12);
        // both hidden units are active, so differentiating at the top map
        // sees the same linear relationship
        let top = prior_case2(&performer, &bank, &image, SharedFeature::TopMap).unwrap();
        assert!((top.w[0] - 1.0).abs() < 1e-12 && (top.w[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn clamp_examples() {
        let mk = |w: Vec<f64>| PriorWeights {
            w,
            case: CaseTag::Case1,
            clamped: false,
            degenerate: vec![],
        };
        let c = clamp_nonneg(mk(vec![-1.0, 2.0]));
        assert_eq!(c.w, vec![0.0, 2.0]);
        assert!(c.clamped && !c.is_degenerate());
        assert_eq!(clamp_nonneg(mk(vec![3.0, 5.0])).w, vec![3.0, 5.0]);
        let all_neg = clamp_nonneg(mk(vec![-1.0, -2.0]));
        assert_eq!(all_neg.w, vec![0.0, 0.0]);
        assert!(all_neg.is_degenerate());
        assert_eq!(clamp_nonneg(c.clone()), c);
    }
}
