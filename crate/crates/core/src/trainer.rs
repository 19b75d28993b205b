//! Stochastic gradient descent on the negative log-likelihood with a
//! learning rate that decays linearly in the number of processed tokens.
//!
//! Multi-threaded training is Hogwild-style: workers update the shared
//! parameter matrices without locks and tolerate lost updates. Only the
//! token counter driving the learning rate is atomic, and workers publish
//! to it in batches.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, FeatureTable, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::{axpy, Real};
use crate::model::{fuse_backward, Fusion, Model, ModelConfig, Scratch};
use crate::quantizer::Codebook;

/// Tokens a worker accumulates before publishing to the shared counter.
const PUBLISH_EVERY: u64 = 1024;
/// Window of the running loss reported in progress logs.
const LOSS_WINDOW: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub fusion: Fusion,
    pub dim: usize,
    pub lr: f64,
    pub epochs: u32,
    pub threads: usize,
    pub min_count: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fusion: Fusion::Text,
            dim: 100,
            lr: 0.1,
            epochs: 5,
            threads: 4,
            min_count: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim must be >= 1"));
        }
        Ok(())
    }
}

/// Tokens processed so far against the total budget of the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub tokens_processed: u64,
    pub budget: u64,
}

impl Progress {
    /// Fraction of the budget consumed, clamped to `[0, 1]`.
    pub fn fraction(&self) -> f64 {
        if self.budget == 0 {
            return 1.0;
        }
        (self.tokens_processed.min(self.budget)) as f64 / self.budget as f64
    }
}

/// `lr0 · (1 - p)` where `p` is the consumed fraction of the budget.
pub fn lr_at(lr0: f64, progress: Progress) -> f64 {
    lr0 * (1.0 - progress.fraction())
}

/// One SGD update on a single labeled document; returns its loss.
///
/// The first label of the document is the target. Only the `U` rows of
/// tokens present in the document change, plus `V` and `W`.
pub fn step<T: Real>(
    model: &mut Model<T>,
    doc: &Document,
    features: Option<&[f32]>,
    lr: T,
    scratch: &mut Scratch<T>,
) -> Result<T> {
    let label = *doc
        .labels
        .first()
        .ok_or(Error::Empty("document has no known label"))?;
    step_label(model, &doc.tokens, features, label, lr, scratch)
}

pub(crate) fn step_label<T: Real>(
    model: &mut Model<T>,
    tokens: &[u32],
    features: Option<&[f32]>,
    label: u32,
    lr: T,
    s: &mut Scratch<T>,
) -> Result<T> {
    model.forward_into(tokens, features, s)?;
    let loss = model.output_gradient(label, s);

    // Gradient w.r.t. the hidden vector uses W before its update.
    s.g_h.iter_mut().for_each(|x| *x = T::zero());
    for (k, &g) in s.probs.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let scale = lr * g;
        for ((w, gh), &h) in model.w.row_mut(k).iter_mut().zip(s.g_h.iter_mut()).zip(&s.h) {
            let old = *w;
            *gh += g * old;
            *w = old - scale * h;
        }
    }

    let fusion = model.fusion();
    fuse_backward(fusion, &s.ht, &s.hv, &s.g_h, &mut s.g_ht, &mut s.g_hv);

    for &(t, c) in &s.bag {
        axpy(-lr * c, &s.g_ht, model.u.row_mut(t as usize));
    }
    if let (Some(v), Some(x)) = (model.v.as_mut(), features) {
        for (i, &g) in s.g_hv.iter().enumerate() {
            let scale = -lr * g;
            for (dst, &xj) in v.row_mut(i).iter_mut().zip(x) {
                *dst += scale * T::of_f32(xj);
            }
        }
    }
    Ok(loss)
}

/// Summary of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    /// Mean loss of each epoch over all workers.
    pub epoch_loss: Vec<f64>,
    pub tokens: u64,
    pub seconds: f64,
}

/// Train a model; see [`train_with_stats`].
pub fn train(
    config: &TrainConfig,
    vocab: &Vocabulary,
    corpus: &Corpus,
    features: Option<&FeatureTable>,
    codebook: Option<&Codebook>,
) -> Result<Model> {
    train_with_stats(config, vocab, corpus, features, codebook).map(|(m, _)| m)
}

// Parameters shared by Hogwild workers.
struct Shared<T>(UnsafeCell<Model<T>>);

// SAFETY: workers write to the parameter matrices without synchronization.
// Their lengths never change during training, so all accesses stay in
// bounds; interleaved or lost float updates are accepted by design of
// Hogwild SGD. Vocabulary and configuration are only read.
unsafe impl<T: Send> Sync for Shared<T> {}

impl<T> Shared<T> {
    #[allow(clippy::mut_from_ref)]
    unsafe fn get(&self) -> &mut Model<T> {
        &mut *self.0.get()
    }
}

struct Run<'a> {
    config: &'a TrainConfig,
    corpus: &'a Corpus,
    features: Option<&'a FeatureTable>,
    budget: u64,
    processed: AtomicU64,
    epoch_loss: Mutex<Vec<(f64, u64)>>,
    start: Instant,
}

/// Train with `config.threads` lock-free workers.
///
/// Each worker owns a strided share of the labeled documents and visits it
/// in a freshly seeded random order every epoch. With one thread the run is
/// bit-for-bit deterministic for a given seed.
pub fn train_with_stats(
    config: &TrainConfig,
    vocab: &Vocabulary,
    corpus: &Corpus,
    features: Option<&FeatureTable>,
    codebook: Option<&Codebook>,
) -> Result<(Model, TrainStats)> {
    config.validate()?;
    let fusion = config.fusion;
    let features = match (fusion.needs_features(), features) {
        (true, None) => return Err(Error::MissingFeatures(fusion.name())),
        (false, Some(_)) => {
            return Err(Error::config(format!(
                "fusion '{}' does not use continuous features",
                fusion.name()
            )))
        }
        (_, f) => f,
    };
    if let Some(f) = features {
        if f.len() != corpus.len() {
            return Err(Error::RowCountMismatch {
                expected: corpus.len(),
                actual: f.len(),
            });
        }
    }

    let mut trainable = Vec::new();
    for (i, doc) in corpus.iter().enumerate() {
        if doc.unknown_labels > 0 {
            return Err(Error::UnknownLabel(format!("on line {}", doc.line_index + 1)));
        }
        if !doc.labels.is_empty() {
            trainable.push(i);
        }
    }
    if trainable.is_empty() {
        return Err(Error::NoLabeledLines);
    }

    let model_config = ModelConfig {
        fusion,
        dim: config.dim,
        label_count: vocab.n_labels(),
        visual_dim: features.map_or(0, FeatureTable::dim),
    };
    let mut model = Model::<f32>::new(model_config, vocab.clone(), config.seed)?;
    model.set_codebook(codebook.cloned());

    let per_epoch: u64 = trainable
        .iter()
        .map(|&i| doc_units(&corpus.documents[i]))
        .sum();
    let run = Run {
        config,
        corpus,
        features,
        budget: per_epoch * config.epochs as u64,
        processed: AtomicU64::new(0),
        epoch_loss: Mutex::new(vec![(0.0, 0); config.epochs as usize]),
        start: Instant::now(),
    };

    let shared = Shared(UnsafeCell::new(model));
    thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..config.threads)
            .map(|worker| {
                let share: Vec<usize> = trainable
                    .iter()
                    .skip(worker)
                    .step_by(config.threads)
                    .copied()
                    .collect();
                let (run, shared) = (&run, &shared);
                scope.spawn(move || run.work(worker, share, shared))
            })
            .collect();
        for handle in handles {
            handle.join().expect("training worker panicked")?;
        }
        Ok(())
    })?;

    let model = shared.0.into_inner();
    if !model.is_finite() {
        return Err(Error::config("training diverged (non-finite parameters); lower the learning rate"));
    }
    let stats = TrainStats {
        epoch_loss: run
            .epoch_loss
            .into_inner()
            .expect("loss lock")
            .into_iter()
            .map(|(sum, n)| if n > 0 { sum / n as f64 } else { 0.0 })
            .collect(),
        tokens: run.processed.load(Ordering::Relaxed),
        seconds: run.start.elapsed().as_secs_f64(),
    };
    Ok((model, stats))
}

/// Progress units of one document: its tokens plus the end of line.
fn doc_units(doc: &Document) -> u64 {
    doc.tokens.len() as u64 + 1
}

impl Run<'_> {
    fn work(&self, worker: usize, mut share: Vec<usize>, shared: &Shared<f32>) -> Result<()> {
        // SAFETY: see `Shared`.
        let model = unsafe { shared.get() };
        let mut scratch = Scratch::new(model);
        let mut unpublished = 0u64;
        let mut recent = RunningLoss::new(LOSS_WINDOW);
        let mut last_log = Instant::now();

        for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(((worker as u64) << 32) | epoch as u64);
            share.shuffle(&mut rng);

            let (mut loss_sum, mut steps) = (0.0f64, 0u64);
            for &i in &share {
                let doc = &self.corpus.documents[i];
                let progress = Progress {
                    tokens_processed: self.processed.load(Ordering::Relaxed) + unpublished,
                    budget: self.budget,
                };
                let lr = lr_at(self.config.lr, progress) as f32;
                let x = self.features.map(|f| f.row(doc.line_index));
                let loss = step_label(model, &doc.tokens, x, doc.labels[0], lr, &mut scratch)?;

                loss_sum += loss as f64;
                steps += 1;
                unpublished += doc_units(doc);
                if unpublished >= PUBLISH_EVERY {
                    self.processed.fetch_add(unpublished, Ordering::Relaxed);
                    unpublished = 0;
                }
                if worker == 0 {
                    recent.push(loss);
                    if last_log.elapsed().as_secs_f64() >= 1.0 {
                        last_log = Instant::now();
                        self.log(progress, lr, recent.mean());
                    }
                }
            }
            let mut totals = self.epoch_loss.lock().expect("loss lock");
            totals[epoch as usize].0 += loss_sum;
            totals[epoch as usize].1 += steps;
        }
        self.processed.fetch_add(unpublished, Ordering::Relaxed);
        Ok(())
    }

    fn log(&self, progress: Progress, lr: f32, loss: f64) {
        let secs = self.start.elapsed().as_secs_f64().max(1e-9);
        log::info!(
            "progress {:5.1}%  tokens/sec/thread {:8.0}  lr {:.6}  loss {:.6}",
            100.0 * progress.fraction(),
            progress.tokens_processed as f64 / secs / self.config.threads as f64,
            lr,
            loss
        );
    }
}

struct RunningLoss {
    window: Vec<f32>,
    next: usize,
    sum: f64,
}

impl RunningLoss {
    fn new(size: usize) -> Self {
        RunningLoss {
            window: Vec::with_capacity(size),
            next: 0,
            sum: 0.0,
        }
    }

    fn push(&mut self, loss: f32) {
        if self.window.len() < self.window.capacity() {
            self.window.push(loss);
        } else {
            self.sum -= self.window[self.next] as f64;
            self.window[self.next] = loss;
            self.next = (self.next + 1) % self.window.len();
        }
        self.sum += loss as f64;
    }

    fn mean(&self) -> f64 {
        self.sum / self.window.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn corpus(lines: &[&str]) -> (Vocabulary, Corpus) {
        let vocab = Vocabulary::from_lines(lines, 1).unwrap();
        let corpus = Corpus::from_lines(lines, &vocab);
        (vocab, corpus)
    }

    #[test]
    fn lr_schedule_endpoints() {
        let p = |t| Progress {
            tokens_processed: t,
            budget: 100,
        };
        assert_eq!(lr_at(0.7, p(0)), 0.7);
        assert_eq!(lr_at(0.7, p(100)), 0.0);
        assert_eq!(lr_at(0.5, p(50)), 0.25);
        assert_eq!(lr_at(0.5, p(500)), 0.0);
        let mut last = f64::INFINITY;
        for t in 0..=100 {
            let lr = lr_at(2.0, p(t));
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { threads: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let (v, c) = corpus(&["__label__a x"]);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(train(&cfg, &v, &c, None, None).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (v, c) = corpus(&["__label__a x y", "__label__b y z"]);
        let cfg = ModelConfig {
            fusion: Fusion::Text,
            dim: 4,
            label_count: 2,
            visual_dim: 0,
        };
        let mut m = Model::<f64>::new(cfg, v, 3).unwrap();
        let before = m.clone();
        let mut s = Scratch::new(&m);
        let loss = step(&mut m, &c.documents[0], None, 0.0, &mut s).unwrap();
        assert_relative_eq!(loss, 2f64.ln(), epsilon = 1e-12);
        assert_eq!(m.u, before.u);
        assert_eq!(m.w, before.w);
    }

    #[test]
    fn single_step_reduces_loss() {
        let (v, c) = corpus(&["__label__only a b c", "__label__other"]);
        let cfg = ModelConfig {
            fusion: Fusion::Text,
            dim: 3,
            label_count: 2,
            visual_dim: 0,
        };
        let mut m = Model::<f64>::new(cfg, v, 1).unwrap();
        let mut s = Scratch::new(&m);
        let doc = &c.documents[0];
        let before = -m.forward(&doc.tokens, None).unwrap()[0].ln();
        step(&mut m, doc, None, 0.05, &mut s).unwrap();
        let after = -m.forward(&doc.tokens, None).unwrap()[0].ln();
        assert!(after < before, "{} !< {}", after, before);
    }

    #[test]
    fn step_equals_dense_gradient_update() {
        let (v, c) = corpus(&["__label__a x y x", "__label__b y z", "__label__c z"]);
        let table = FeatureTable::from_rows([[1.0, 2.0, 0.5], [0.0, 1.0, 1.0], [2.0, 0.0, 1.0]]).unwrap();
        for fusion in [
            Fusion::Additive,
            Fusion::Max,
            Fusion::Gated(crate::GateSide::Text),
            Fusion::BilinearGated(crate::GateSide::Visual),
        ] {
            let cfg = ModelConfig {
                fusion,
                dim: 4,
                label_count: 3,
                visual_dim: 3,
            };
            let mut m = Model::<f64>::new(cfg, v.clone(), 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            m.w = crate::Matrix::uniform(m.w.rows(), m.w.cols(), 0.5, &mut rng);
            let doc = &c.documents[0];
            let x = table.row(0);
            let g = m.gradient(&doc.tokens, Some(x), doc.labels[0]).unwrap();
            let before = m.clone();
            let mut s = Scratch::new(&m);
            let lr = 0.3;
            step(&mut m, doc, Some(x), lr, &mut s).unwrap();
            let check = |new: &[f64], old: &[f64], grad: &[f64]| {
                for ((n, o), g) in new.iter().zip(old).zip(grad) {
                    assert_relative_eq!(*n, o - lr * g, epsilon = 1e-12);
                }
            };
            check(m.u.as_slice(), before.u.as_slice(), g.u.as_slice());
            check(m.w.as_slice(), before.w.as_slice(), g.w.as_slice());
            check(
                m.v.as_ref().unwrap().as_slice(),
                before.v.as_ref().unwrap().as_slice(),
                g.v.as_ref().unwrap().as_slice(),
            );
        }
    }

    #[test]
    fn only_present_rows_change() {
        let (v, c) = corpus(&["__label__a w0 w1", "__label__b w2 w3 w4", "__label__a w5"]);
        let cfg = ModelConfig {
            fusion: Fusion::Text,
            dim: 3,
            label_count: 2,
            visual_dim: 0,
        };
        let mut m = Model::<f32>::new(cfg, v, 2).unwrap();
        let mut s = Scratch::new(&m);
        let doc = &c.documents[1];
        // make W nonzero so U receives gradient
        step(&mut m, &c.documents[0], None, 0.5, &mut s).unwrap();
        let mid = m.clone();
        step(&mut m, doc, None, 0.5, &mut s).unwrap();
        for row in 0..m.u.rows() as u32 {
            let changed = m.u.row(row as usize) != mid.u.row(row as usize);
            assert_eq!(changed, doc.tokens.contains(&row), "row {}", row);
        }
    }

    #[test]
    fn training_requires_matching_features() {
        let (v, c) = corpus(&["__label__a x", "__label__b y"]);
        let additive = TrainConfig {
            fusion: Fusion::Additive,
            threads: 1,
            dim: 4,
            ..Default::default()
        };
        assert!(matches!(
            train(&additive, &v, &c, None, None),
            Err(Error::MissingFeatures(_))
        ));
        let short = FeatureTable::from_rows([[1.0, 0.0]]).unwrap();
        assert!(matches!(
            train(&additive, &v, &c, Some(&short), None),
            Err(Error::RowCountMismatch { .. })
        ));
        let text = TrainConfig { fusion: Fusion::Text, ..additive.clone() };
        assert!(train(&text, &v, &c, Some(&short), None).is_err());
    }

    #[test]
    fn unknown_training_label_is_rejected() {
        let (v, _) = corpus(&["__label__a x"]);
        let c = Corpus::from_lines(["__label__zzz x"], &v);
        let cfg = TrainConfig { threads: 1, dim: 2, ..Default::default() };
        assert!(matches!(train(&cfg, &v, &c, None, None), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn running_loss_window() {
        let mut r = RunningLoss::new(2);
        r.push(1.0);
        r.push(3.0);
        assert_eq!(r.mean(), 2.0);
        r.push(5.0);
        assert_eq!(r.mean(), 4.0);
    }
}
