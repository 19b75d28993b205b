//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use mmfast::{Corpus, FeatureTable, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Labeled lines with one feature row per line.
pub struct Split {
    pub lines: Vec<String>,
    pub features: FeatureTable,
    pub classes: Vec<usize>,
}

impl Split {
    pub fn corpus(&self, vocab: &Vocabulary) -> Corpus {
        Corpus::from_lines(&self.lines, vocab)
    }
}

pub const FUSION_VOCAB: usize = 100;
pub const FUSION_PLANTED: usize = 5;
pub const FUSION_DIM: usize = 16;

/// Four classes, `2 * text_bit + visual_bit`. Each document has 10 words
/// from a 100-word vocabulary: 3 drawn from the planted set of its text
/// bit (words 0-4 or 5-9) and 7 noise words from the rest. The feature
/// vector is drawn around `±1` in every coordinate by the visual bit with
/// standard deviation 0.5.
pub fn fusion_task(n: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let text_bit = rng.gen_range(0..2usize);
        let visual_bit = rng.gen_range(0..2usize);
        let class = 2 * text_bit + visual_bit;
        let mut words: Vec<usize> = (0..3)
            .map(|_| text_bit * FUSION_PLANTED + rng.gen_range(0..FUSION_PLANTED))
            .collect();
        words.extend((0..7).map(|_| rng.gen_range(2 * FUSION_PLANTED..FUSION_VOCAB)));
        words.shuffle(&mut rng);
        let text: Vec<String> = words.iter().map(|w| format!("w{}", w)).collect();
        lines.push(format!("__label__c{} {}", class, text.join(" ")));

        let mean = if visual_bit == 1 { 1.0 } else { -1.0 };
        rows.push(
            (0..FUSION_DIM)
                .map(|_| mean + gaussian(&mut rng, 0.5))
                .collect::<Vec<f64>>(),
        );
        classes.push(class);
    }
    Split {
        lines,
        features: FeatureTable::from_rows(rows).unwrap(),
        classes,
    }
}

/// Documents for timing: `classes` labels, 20 words each from a
/// 10k-word vocabulary, with a class-dependent word and feature offset.
pub fn speed_task(n: usize, dim: usize, classes: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| gaussian(&mut rng, 1.0)).collect())
        .collect();
    let mut lines = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..classes);
        let mut text: Vec<String> = (0..19)
            .map(|_| format!("w{}", rng.gen_range(0..10_000)))
            .collect();
        text.push(format!("k{}", class));
        lines.push(format!("__label__c{} {}", class, text.join(" ")));
        rows.push(
            centers[class]
                .iter()
                .map(|c| c + gaussian(&mut rng, 1.0))
                .collect::<Vec<f64>>(),
        );
        labels.push(class);
    }
    Split {
        lines,
        features: FeatureTable::from_rows(rows).unwrap(),
        classes: labels,
    }
}
