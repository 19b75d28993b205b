//! Product quantization (PQ) and random-sample product quantization (RSPQ)
//! of continuous vectors into pseudo-tokens.
//!
//! A codebook splits a (permuted) vector into `n` equal slices and maps each
//! slice to its nearest k-means centroid. With `r > 1` repetitions the
//! vector is permuted `r` times and quantized once per permutation, so
//! components that land in different slices under one permutation can share
//! a slice under another. Repetition 0 always uses the identity permutation,
//! which makes a PQ codebook the first repetition of any RSPQ codebook
//! trained with the same seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{FeatureTable, QUANT_PREFIX};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
#[cfg(test)]
use crate::kmeans::squared_distance;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerConfig {
    /// Slices per vector.
    pub n: usize,
    /// Centroids per slice.
    pub k: usize,
    /// Permutation repetitions; 1 is plain PQ.
    pub r: usize,
    /// Reweighting of the pseudo-token bag, stored with the codebook.
    pub alpha: f32,
    pub seed: u64,
    pub max_iters: usize,
    /// Rows sampled for k-means; larger tables are subsampled.
    pub max_samples: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            n: 4,
            k: 256,
            r: 1,
            alpha: 0.1,
            seed: 0,
            max_iters: 25,
            max_samples: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    source_dim: usize,
    n: usize,
    k: usize,
    alpha: f32,
    permutations: Vec<Vec<u32>>,
    // r × n × k × (source_dim / n)
    centroids: Vec<f32>,
}

impl Codebook {
    /// Assemble a codebook, checking the layout invariants.
    pub fn new(
        source_dim: usize,
        n: usize,
        k: usize,
        alpha: f32,
        permutations: Vec<Vec<u32>>,
        centroids: Vec<f32>,
    ) -> Result<Self> {
        check_shape(source_dim, n, k, permutations.len())?;
        for perm in &permutations {
            let mut seen = vec![false; source_dim];
            for &p in perm {
                match seen.get_mut(p as usize) {
                    Some(s) if !*s => *s = true,
                    _ => return Err(Error::Malformed("permutation is not a bijection".into())),
                }
            }
            if perm.len() != source_dim {
                return Err(Error::Malformed("permutation length".into()));
            }
        }
        let expected = permutations.len() * n * k * (source_dim / n);
        if centroids.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: centroids.len(),
            });
        }
        Ok(Codebook {
            source_dim,
            n,
            k,
            alpha,
            permutations,
            centroids,
        })
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.permutations.len()
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn sub_dim(&self) -> usize {
        self.source_dim / self.n
    }

    pub fn permutations(&self) -> &[Vec<u32>] {
        &self.permutations
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Centroid `c` of slice `slot` in repetition `rep`.
    pub fn centroid(&self, rep: usize, slot: usize, c: usize) -> &[f32] {
        let sub = self.sub_dim();
        let start = ((rep * self.n + slot) * self.k + c) * sub;
        &self.centroids[start..start + sub]
    }

    /// Nearest-centroid index for every (repetition, slot), repetition-major.
    pub fn codes(&self, vector: &[f32]) -> Result<Vec<u32>> {
        if vector.len() != self.source_dim {
            return Err(Error::DimensionMismatch {
                expected: self.source_dim,
                actual: vector.len(),
            });
        }
        let sub = self.sub_dim();
        let mut slice = vec![0.0f64; sub];
        let mut codes = Vec::with_capacity(self.r() * self.n);
        for (rep, perm) in self.permutations.iter().enumerate() {
            for slot in 0..self.n {
                for (dst, &p) in slice.iter_mut().zip(&perm[slot * sub..(slot + 1) * sub]) {
                    *dst = vector[p as usize] as f64;
                }
                let mut best = (0u32, f64::INFINITY);
                for c in 0..self.k {
                    let d: f64 = self
                        .centroid(rep, slot, c)
                        .iter()
                        .zip(&slice)
                        .map(|(&y, &x)| (x - y as f64) * (x - y as f64))
                        .sum();
                    if d < best.1 {
                        best = (c as u32, d);
                    }
                }
                codes.push(best.0);
            }
        }
        Ok(codes)
    }

    /// Pseudo-tokens `__q__{rep·n+slot}_{centroid}` for `vector`.
    pub fn encode(&self, vector: &[f32]) -> Result<Vec<String>> {
        Ok(self
            .codes(vector)?
            .into_iter()
            .enumerate()
            .map(|(slot, c)| pseudo_token(slot, c))
            .collect())
    }
}

pub fn pseudo_token(global_slot: usize, centroid: u32) -> String {
    format!("{}{}_{}", QUANT_PREFIX, global_slot, centroid)
}

fn check_shape(source_dim: usize, n: usize, k: usize, r: usize) -> Result<()> {
    if n == 0 || n > source_dim {
        return Err(Error::config(format!(
            "slice count {} must be in 1..={}",
            n, source_dim
        )));
    }
    if !source_dim.is_multiple_of(n) {
        return Err(Error::config(format!(
            "feature dimension {} is not divisible by slice count {}",
            source_dim, n
        )));
    }
    if k == 0 {
        return Err(Error::config("codebook needs k >= 1"));
    }
    if r == 0 {
        return Err(Error::config("codebook needs r >= 1"));
    }
    Ok(())
}

// splitmix64 finalizer, for deriving independent per-slot seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn permutation(dim: usize, rep: usize, seed: u64) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..dim as u32).collect();
    if rep > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(rep as u64)));
        perm.shuffle(&mut rng);
    }
    perm
}

/// Train a PQ (`r = 1`) or RSPQ (`r > 1`) codebook on unit-normalized rows.
pub fn train_codebook(features: &FeatureTable, config: &QuantizerConfig) -> Result<Codebook> {
    if features.is_empty() {
        return Err(Error::Empty("feature table"));
    }
    let dim = features.dim();
    check_shape(dim, config.n, config.k, config.r)?;
    let sub = dim / config.n;

    let mut sample: Vec<usize> = if features.len() > config.max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed));
        index::sample(&mut rng, features.len(), config.max_samples).into_vec()
    } else {
        (0..features.len()).collect()
    };
    sample.sort_unstable();

    let mut permutations = Vec::with_capacity(config.r);
    let mut centroids = Vec::with_capacity(config.r * config.n * config.k * sub);
    let mut points = vec![0.0f64; sample.len() * sub];
    for rep in 0..config.r {
        let perm = permutation(dim, rep, config.seed);
        for slot in 0..config.n {
            let cols = &perm[slot * sub..(slot + 1) * sub];
            for (dst, &row) in points.chunks_exact_mut(sub).zip(&sample) {
                let x = features.row(row);
                for (d, &p) in dst.iter_mut().zip(cols) {
                    *d = x[p as usize] as f64;
                }
            }
            let slot_seed = mix(config.seed ^ mix(((rep as u64) << 32) | slot as u64));
            let km = kmeans(&points, sub, config.k, config.max_iters, slot_seed)?;
            log::debug!(
                "codebook rep {} slot {}: inertia {:.6} after {} steps",
                rep,
                slot,
                km.final_inertia(),
                km.inertia.len()
            );
            centroids.extend(km.centroids.iter().map(|&c| c as f32));
        }
        permutations.push(perm);
    }
    Codebook::new(dim, config.n, config.k, config.alpha, permutations, centroids)
}

/// Append the pseudo-tokens of `tokens` to a corpus line.
pub fn append_tokens(line: &str, tokens: &[String]) -> String {
    if line.trim().is_empty() {
        tokens.join(" ")
    } else {
        format!("{} {}", line, tokens.join(" "))
    }
}

/// Stream `reader` to `writer`, appending each line's pseudo-tokens.
pub fn emit_quantized<R: BufRead, W: Write>(
    reader: R,
    features: &FeatureTable,
    codebook: &Codebook,
    mut writer: W,
) -> Result<usize> {
    let mut lines = 0;
    for line in reader.lines() {
        let line = line?;
        if lines >= features.len() {
            return Err(Error::RowCountMismatch {
                expected: features.len(),
                actual: lines + 1,
            });
        }
        let tokens = codebook.encode(features.row(lines))?;
        writeln!(writer, "{}", append_tokens(&line, &tokens))?;
        lines += 1;
    }
    if lines != features.len() {
        return Err(Error::RowCountMismatch {
            expected: features.len(),
            actual: lines,
        });
    }
    writer.flush()?;
    Ok(lines)
}

/// Write a copy of the corpus with pseudo-tokens appended to every line.
pub fn emit_quantized_corpus(
    corpus_path: impl AsRef<Path>,
    features: &FeatureTable,
    codebook: &Codebook,
    out_path: impl AsRef<Path>,
) -> Result<usize> {
    let reader = BufReader::new(File::open(corpus_path)?);
    let writer = BufWriter::new(File::create(out_path)?);
    emit_quantized(reader, features, codebook, writer)
}
