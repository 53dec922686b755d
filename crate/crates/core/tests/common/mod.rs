#![allow(dead_code)]

use concept_autodiff::Tensor;
use concept_explain::models::{ConceptBank, DenseLayer, PartMap, PerformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A performer whose score is exactly Σ aᵢyᵢ + b: no trunk, so the image
/// (H×W×n) is the top map and yᵢ is the spatial sum of channel i.
pub fn additive_performer(a: &[f64], b: f64, side: usize) -> (PerformerModel, ConceptBank) {
    let n = a.len();
    let performer = PerformerModel {
        input_shape: vec![side, side, n],
        trunk: vec![],
        hidden: None,
        head: DenseLayer {
            weight: Tensor::new(vec![1, n], a.to_vec()).unwrap(),
            bias: Tensor::vector(&[b]),
        },
    };
    let bank = ConceptBank::case1((0..n).collect(), PartMap::singletons(n)).unwrap();
    (performer, bank)
}

/// Random maps, each channel scaled by a per-image level in [-0.5, 1.5) so
/// concept scores vary in sign around a positive mean.
pub fn additive_images(n: usize, side: usize, count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let levels: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..1.5)).collect();
            let data = (0..side * side * n)
                .map(|i| levels[i % n] * rng.random_range(0.0..0.25))
                .collect();
            Tensor::new(vec![side, side, n], data).unwrap()
        })
        .collect()
}

/// Labels splitting the images at the median performer score.
pub fn median_labels(performer: &PerformerModel, images: &[Tensor]) -> Vec<bool> {
    let scores: Vec<f64> = images
        .iter()
        .map(|i| performer.forward(i).unwrap().score)
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    scores.iter().map(|&s| s >= median).collect()
}
