//! Performer, concept scorers and the additive explainer.
//!
//! The performer is a conv/relu trunk whose last activation is the top
//! feature map `x` (H×W×n), followed by a spatial sum and a scalar dense
//! head producing the pre-decision score. In the shared-head topology a
//! hidden dense/relu layer sits between the spatial sum and the head, and
//! its activation is the feature shared with the concept heads.

use concept_autodiff::{Padding, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ExplainError, Result};

/// Which concept topology a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    /// Concepts are channels of the performer's top feature map.
    Case1,
    /// Concepts are scalar heads sharing the performer's trunk.
    Case2,
}

impl std::fmt::Display for CaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CaseTag::Case1 => f.write_str("case1"),
            CaseTag::Case2 => f.write_str("case2"),
        }
    }
}

pub(crate) fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Tape handles for one dense layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    /// Weights drawn from `U(-1/sqrt(inputs), 1/sqrt(inputs))`, zero bias.
    pub fn uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![outputs, inputs], data).expect("finite init"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenseVars {
        DenseVars {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape, false);
        let out = tape.dense(xv, vars.weight, vars.bias)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// k×k×C×n kernels.
    pub kernels: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[3]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[2]
    }
}

/// The network being explained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformerModel {
    /// Expected image shape, H×W×C.
    pub input_shape: Vec<usize>,
    /// Conv layers, each followed by relu. The last activation is the top map.
    pub trunk: Vec<ConvLayer>,
    /// Shared dense/relu layer of the shared-head topology.
    pub hidden: Option<DenseLayer>,
    /// Scalar head producing the pre-decision score.
    pub head: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformerOutput {
    /// Pre-decision score ŷ.
    pub score: f64,
    /// Top feature map x, H'×W'×n, post-relu.
    pub top_map: Tensor,
    /// Shared hidden feature (shared-head topology only).
    pub shared: Option<Tensor>,
}

/// Tape nodes produced by [`PerformerModel::record_tail`].
#[derive(Debug, Clone, Copy)]
pub struct TailVars {
    pub shared: Option<Var>,
    pub score: Var,
}

impl PerformerModel {
    pub fn top_channels(&self) -> usize {
        self.trunk
            .last()
            .map_or(self.input_shape[2], ConvLayer::out_channels)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(concept_autodiff::AutodiffError::ShapeMismatch {
                op: "performer_forward",
                expected: self.input_shape.clone(),
                got: image.shape().to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// Records the frozen trunk on `tape`; returns the top-map node.
    pub fn record_trunk(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let mut x = image;
        for layer in &self.trunk {
            let k = tape.constant(layer.kernels.clone());
            let b = tape.constant(layer.bias.clone());
            let z = tape.conv2d(x, k, b, layer.padding)?;
            x = tape.relu(z)?;
        }
        Ok(x)
    }

    /// Records everything after the top map with frozen parameters.
    pub fn record_tail(&self, tape: &mut Tape, top_map: Var) -> Result<TailVars> {
        let pooled = tape.spatial_sum(top_map)?;
        let (features, shared) = match &self.hidden {
            Some(hidden) => {
                let v = hidden.bind(tape, false);
                let z = tape.dense(pooled, v.weight, v.bias)?;
                let h = tape.relu(z)?;
                (h, Some(h))
            }
            None => (pooled, None),
        };
        let hv = self.head.bind(tape, false);
        let score = tape.dense(features, hv.weight, hv.bias)?;
        Ok(TailVars { shared, score })
    }

    pub fn top_map(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let img = tape.constant(image.clone());
        let top = self.record_trunk(&mut tape, img)?;
        Ok(tape.value(top).clone())
    }

    /// Runs the part of the network after the top map.
    pub fn tail(&self, top_map: &Tensor) -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let top = tape.constant(top_map.clone());
        let vars = self.record_tail(&mut tape, top)?;
        let shared = vars.shared.map(|s| tape.value(s).clone());
        Ok((tape.scalar(vars.score)?, shared))
    }

    pub fn forward(&self, image: &Tensor) -> Result<PerformerOutput> {
        let top_map = self.top_map(image)?;
        let (score, shared) = self.tail(&top_map)?;
        Ok(PerformerOutput {
            score,
            top_map,
            shared,
        })
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut acc = Fnv::default();
        for layer in &self.trunk {
            acc.tensor(&layer.kernels);
            acc.tensor(&layer.bias);
        }
        if let Some(h) = &self.hidden {
            acc.tensor(&h.weight);
            acc.tensor(&h.bias);
        }
        acc.tensor(&self.head.weight);
        acc.tensor(&self.head.bias);
        acc.finish()
    }
}

/// Returns the performer score ŷ and the top feature map x.
pub fn performer_forward(model: &PerformerModel, image: &Tensor) -> Result<(f64, Tensor)> {
    let out = model.forward(image)?;
    Ok((out.score, out.top_map))
}

#[derive(Debug)]
pub(crate) struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.bytes(&v.to_bits().to_le_bytes());
        }
    }

    pub(crate) fn tensor(&mut self, t: &Tensor) {
        for d in t.shape() {
            self.bytes(&(*d as u64).to_le_bytes());
        }
        self.f64s(t.data());
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// A named group of concept indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub name: String,
    pub concepts: Vec<usize>,
}

/// Assignment of concepts to named parts (the index sets Ω).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartMap(Vec<Part>);

impl PartMap {
    /// Validates that the index sets are disjoint, nonempty and in range.
    pub fn new(parts: Vec<Part>, n: usize) -> Result<Self> {
        let map = PartMap(parts);
        map.validate(n)?;
        Ok(map)
    }

    /// One part per concept, named `concept{i}`.
    pub fn singletons(n: usize) -> Self {
        PartMap(
            (0..n)
                .map(|i| Part {
                    name: format!("concept{i}"),
                    concepts: vec![i],
                })
                .collect(),
        )
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let mut names = std::collections::BTreeSet::new();
        for part in &self.0 {
            if !names.insert(part.name.as_str()) {
                return Err(ExplainError::Config(format!(
                    "duplicate part name {:?}",
                    part.name
                )));
            }
            if part.concepts.is_empty() {
                return Err(ExplainError::Config(format!(
                    "part {:?} has no concepts",
                    part.name
                )));
            }
            for &i in &part.concepts {
                if i >= n {
                    return Err(ExplainError::IndexOutOfRange { index: i, n });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(ExplainError::Config(format!(
                        "concept {i} assigned to more than one part"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parts(&self) -> &[Part] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Restricts to the concepts in `selected`, renumbered by position.
    /// Parts left without concepts are dropped.
    pub fn restrict(&self, selected: &[usize]) -> Self {
        PartMap(
            self.0
                .iter()
                .filter_map(|p| {
                    let concepts: Vec<usize> = p
                        .concepts
                        .iter()
                        .filter_map(|c| selected.iter().position(|s| s == c))
                        .collect();
                    (!concepts.is_empty()).then(|| Part {
                        name: p.name.clone(),
                        concepts,
                    })
                })
                .collect(),
        )
    }
}

/// Where concept scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConceptSource {
    /// Spatial sums of top-map channels.
    Channels,
    /// Scalar heads over the performer's shared hidden feature.
    SharedHeads { heads: Vec<DenseLayer> },
}

/// The n concept scorers plus their part assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub source: ConceptSource,
    /// Top-map channel carrying each concept; used when ablating parts.
    pub channels: Vec<usize>,
    pub parts: PartMap,
}

impl ConceptBank {
    pub fn case1(channels: Vec<usize>, parts: PartMap) -> Result<Self> {
        let bank = Self {
            source: ConceptSource::Channels,
            channels,
            parts,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn case2(heads: Vec<DenseLayer>, channels: Vec<usize>, parts: PartMap) -> Result<Self> {
        let bank = Self {
            source: ConceptSource::SharedHeads { heads },
            channels,
            parts,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return Err(ExplainError::Config(format!(
                "need at least 2 concepts, got {n}"
            )));
        }
        if let ConceptSource::SharedHeads { heads } = &self.source {
            if heads.len() != self.channels.len() {
                return Err(ExplainError::LengthMismatch {
                    what: "concept heads vs channel map",
                    expected: self.channels.len(),
                    got: heads.len(),
                });
            }
            if let Some(h) = heads.iter().find(|h| h.outputs() != 1) {
                return Err(ExplainError::Config(format!(
                    "concept heads must be scalar, found {} outputs",
                    h.outputs()
                )));
            }
        }
        self.parts.validate(n)
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn mode(&self) -> CaseTag {
        match self.source {
            ConceptSource::Channels => CaseTag::Case1,
            ConceptSource::SharedHeads { .. } => CaseTag::Case2,
        }
    }

    /// A bank over a subset of the concepts, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(ExplainError::IndexOutOfRange { index: bad, n });
        }
        let source = match &self.source {
            ConceptSource::Channels => ConceptSource::Channels,
            ConceptSource::SharedHeads { heads } => ConceptSource::SharedHeads {
                heads: indices.iter().map(|&i| heads[i].clone()).collect(),
            },
        };
        let bank = Self {
            source,
            channels: indices.iter().map(|&i| self.channels[i]).collect(),
            parts: self.parts.restrict(indices),
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Concept scores y from an already computed performer pass.
    pub fn scores_from(&self, out: &PerformerOutput) -> Result<Tensor> {
        match &self.source {
            ConceptSource::Channels => {
                let sums = concept_scores_case1(&out.top_map)?;
                let n_top = sums.len();
                let mut y = Vec::with_capacity(self.len());
                for &c in &self.channels {
                    if c >= n_top {
                        return Err(ExplainError::IndexOutOfRange { index: c, n: n_top });
                    }
                    y.push(sums.data()[c]);
                }
                Ok(Tensor::vector(&y))
            }
            ConceptSource::SharedHeads { heads } => {
                let shared = out.shared.as_ref().ok_or_else(|| {
                    ExplainError::ModeMismatch(
                        "shared-head concepts need a performer with a hidden layer".into(),
                    )
                })?;
                let y = heads
                    .iter()
                    .map(|h| h.forward(shared).map(|t| t.data()[0]))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::vector(&y))
            }
        }
    }

    pub fn scores(&self, performer: &PerformerModel, image: &Tensor) -> Result<Tensor> {
        self.scores_from(&performer.forward(image)?)
    }

    pub fn checksum(&self) -> u64 {
        let mut acc = Fnv::default();
        if let ConceptSource::SharedHeads { heads } = &self.source {
            for h in heads {
                acc.tensor(&h.weight);
                acc.tensor(&h.bias);
            }
        }
        for c in &self.channels {
            acc.bytes(&(*c as u64).to_le_bytes());
        }
        acc.finish()
    }
}

/// Channel-wise spatial sums of a top map: `y_i = Σ_{h,w} x_{hwi}`.
pub fn concept_scores_case1(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.spatial_sum(v)?;
    Ok(tape.value(s).clone())
}

/// Head scores over the shared trunk; the trunk is evaluated once.
pub fn concept_scores_case2(
    bank: &ConceptBank,
    performer: &PerformerModel,
    image: &Tensor,
) -> Result<Tensor> {
    if bank.mode() != CaseTag::Case2 {
        return Err(ExplainError::ModeMismatch(format!(
            "expected a case2 concept bank, got {}",
            bank.mode()
        )));
    }
    bank.scores(performer, image)
}

/// What the explainer network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// The performer's top feature map.
    #[default]
    TopMap,
    /// The raw image.
    Image,
}

/// The network g with bias b: α = g(input), prediction Σ αᵢyᵢ + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerModel {
    /// Dense layers; relu between consecutive layers.
    pub layers: Vec<DenseLayer>,
    pub bias: f64,
    /// Apply softplus to the final layer so every αᵢ > 0.
    pub positivity: bool,
    pub source: InputSource,
    /// Side of the fixed sum-pooling window applied to the input map.
    pub pool: usize,
}

/// Tape handles for the explainer's trainable parameters.
#[derive(Debug, Clone)]
pub struct ExplainerVars {
    pub layers: Vec<DenseVars>,
    pub bias: Var,
}

impl ExplainerModel {
    /// Hidden layers get a fan-in scaled uniform init; the output layer
    /// starts at zero so every image begins from the same α.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        n_concepts: usize,
        positivity: bool,
        source: InputSource,
        pool: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(DenseLayer::uniform(fan_in, h, rng));
            fan_in = h;
        }
        layers.push(DenseLayer::zeros(fan_in, n_concepts));
        Self {
            layers,
            bias: 0.0,
            positivity,
            source,
            pool,
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::inputs)
    }

    /// Pools and flattens the configured source map into g's input vector.
    pub fn features(&self, image: &Tensor, performer_out: &PerformerOutput) -> Result<Tensor> {
        let map = match self.source {
            InputSource::TopMap => &performer_out.top_map,
            InputSource::Image => image,
        };
        pool_features(map, self.pool)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ExplainerVars {
        ExplainerVars {
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(tape, trainable))
                .collect(),
            bias: bind_tensor(tape, &Tensor::scalar(self.bias), trainable),
        }
    }

    /// Records α = g(features) on the tape.
    pub fn record(&self, tape: &mut Tape, vars: &ExplainerVars, features: Var) -> Result<Var> {
        let mut x = features;
        let last = vars.layers.len() - 1;
        for (i, lv) in vars.layers.iter().enumerate() {
            x = tape.dense(x, lv.weight, lv.bias)?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        if self.positivity {
            x = tape.softplus(x)?;
        }
        Ok(x)
    }

    /// α for one input vector.
    pub fn weights(&self, features: &Tensor) -> Result<Tensor> {
        if features.len() != self.input_dim() {
            return Err(ExplainError::LengthMismatch {
                what: "explainer input",
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let f = tape.constant(features.reshape(&[features.len()])?);
        let alpha = self.record(&mut tape, &vars, f)?;
        Ok(tape.value(alpha).clone())
    }

    /// Flat views of every parameter, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.data_mut());
        }
        out.push(std::slice::from_mut(&mut self.bias));
        out
    }

    pub fn checksum(&self) -> u64 {
        let mut acc = Fnv::default();
        for l in &self.layers {
            acc.tensor(&l.weight);
            acc.tensor(&l.bias);
        }
        acc.f64s(&[self.bias]);
        acc.finish()
    }
}

/// Sum-pools an H×W×C map by `pool` and flattens it. `pool == 0` or a
/// pool equal to the full size reduces each channel to one value.
pub fn pool_features(map: &Tensor, pool: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(map.clone());
    let pooled = match pool {
        0 => tape.spatial_sum(v)?,
        1 => v,
        p => tape.sum_pool(v, p)?,
    };
    let flat = tape.flatten(pooled)?;
    Ok(tape.value(flat).clone())
}

/// α = g(input).
pub fn explainer_weights(explainer: &ExplainerModel, input: &Tensor) -> Result<Tensor> {
    explainer.weights(input)
}

/// The additive prediction Σ αᵢ yᵢ + b.
pub fn explainer_predict(alpha: &[f64], y: &[f64], b: f64) -> Result<f64> {
    if alpha.len() != y.len() {
        return Err(ExplainError::LengthMismatch {
            what: "explainer_predict",
            expected: alpha.len(),
            got: y.len(),
        });
    }
    Ok(alpha.iter().zip(y).map(|(a, v)| a * v).sum::<f64>() + b)
}
