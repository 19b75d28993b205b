//! Model parameters and the forward pass of every fusion variant.
//!
//! With `ht = U·x_text` (mean of token rows) and `hv = V·x_visual`, the
//! hidden vector fed to the output matrix `W` is
//!
//! | fusion                 | hidden                       | size |
//! |------------------------|------------------------------|------|
//! | text                   | `ht`                         | H    |
//! | continuous             | `hv`                         | H    |
//! | additive               | `ht + hv`                    | H    |
//! | max                    | `max(ht, hv)`                | H    |
//! | gated (text gate)      | `σ(ht) ⊙ hv`                 | H    |
//! | gated (visual gate)    | `ht ⊙ σ(hv)`                 | H    |
//! | bilinear               | `ht ⊗ hv`                    | H²   |
//! | bilinear-gated         | outer product, gate side σ'd | H²   |
//! | discretized            | `U·x_words + α·U·x_pseudo`   | H    |
//!
//! Outer products are flattened row-major with the text side indexing
//! rows: entry `i·H + j` is `ht[i]·hv[j]`. The layout of `W` depends on it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, sigmoid, Matrix, Real};
use crate::quantizer::Codebook;

/// Which modality passes through the sigmoid in gated variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateSide {
    Text,
    Visual,
}

impl FromStr for GateSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(GateSide::Text),
            "visual" => Ok(GateSide::Visual),
            other => Err(Error::config(format!("unknown gate side '{}'", other))),
        }
    }
}

impl fmt::Display for GateSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateSide::Text => "text",
            GateSide::Visual => "visual",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    Text,
    Continuous,
    Additive,
    Max,
    Gated(GateSide),
    Bilinear,
    BilinearGated(GateSide),
    /// Text bag plus an `alpha`-weighted bag of quantized pseudo-tokens.
    Discretized { alpha: f32 },
}

impl Fusion {
    pub const NAMES: [&'static str; 8] = [
        "text",
        "continuous",
        "additive",
        "max",
        "gated",
        "bilinear",
        "bilinear_gated",
        "discretized",
    ];

    /// Build a fusion from its name plus the optional gate side and alpha.
    ///
    /// The gate side is required by (and only accepted for) the gated
    /// variants; alpha only applies to `discretized` and defaults to 1.
    pub fn from_parts(name: &str, gate: Option<GateSide>, alpha: Option<f32>) -> Result<Self> {
        let gated = matches!(name, "gated" | "bilinear_gated");
        if gate.is_some() && !gated {
            return Err(Error::config(format!("fusion '{}' takes no gate side", name)));
        }
        if alpha.is_some() && name != "discretized" {
            return Err(Error::config(format!("fusion '{}' takes no alpha", name)));
        }
        let need_gate = || gate.ok_or_else(|| Error::config(format!("fusion '{}' needs a gate side", name)));
        Ok(match name {
            "text" => Fusion::Text,
            "continuous" => Fusion::Continuous,
            "additive" => Fusion::Additive,
            "max" => Fusion::Max,
            "gated" => Fusion::Gated(need_gate()?),
            "bilinear" => Fusion::Bilinear,
            "bilinear_gated" => Fusion::BilinearGated(need_gate()?),
            "discretized" => Fusion::Discretized {
                alpha: alpha.unwrap_or(1.0),
            },
            other => return Err(Error::config(format!("unknown fusion '{}'", other))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Fusion::Text => "text",
            Fusion::Continuous => "continuous",
            Fusion::Additive => "additive",
            Fusion::Max => "max",
            Fusion::Gated(_) => "gated",
            Fusion::Bilinear => "bilinear",
            Fusion::BilinearGated(_) => "bilinear_gated",
            Fusion::Discretized { .. } => "discretized",
        }
    }

    pub fn gate(&self) -> Option<GateSide> {
        match *self {
            Fusion::Gated(g) | Fusion::BilinearGated(g) => Some(g),
            _ => None,
        }
    }

    pub fn alpha(&self) -> Option<f32> {
        match *self {
            Fusion::Discretized { alpha } => Some(alpha),
            _ => None,
        }
    }

    /// Whether the variant reads a continuous feature row.
    pub fn needs_features(&self) -> bool {
        !matches!(self, Fusion::Text | Fusion::Discretized { .. })
    }

    pub fn is_bilinear(&self) -> bool {
        matches!(self, Fusion::Bilinear | Fusion::BilinearGated(_))
    }

    /// Width of the fused hidden vector for embedding size `dim`.
    pub fn hidden_out(&self, dim: usize) -> usize {
        if self.is_bilinear() {
            dim * dim
        } else {
            dim
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fusion::Gated(g) | Fusion::BilinearGated(g) => write!(f, "{}({} gate)", self.name(), g),
            Fusion::Discretized { alpha } => write!(f, "{}(alpha={})", self.name(), alpha),
            _ => f.write_str(self.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fusion: Fusion,
    /// Embedding size H.
    pub dim: usize,
    pub label_count: usize,
    /// Continuous feature dimensionality; 0 when unused.
    pub visual_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim must be >= 1"));
        }
        if self.label_count == 0 {
            return Err(Error::config("model needs at least one label"));
        }
        if self.fusion.needs_features() && self.visual_dim == 0 {
            return Err(Error::MissingFeatures(self.fusion.name()));
        }
        Ok(())
    }

    pub fn hidden_out(&self) -> usize {
        self.fusion.hidden_out(self.dim)
    }
}

/// A linear multi-modal classifier.
///
/// `u` embeds words and pseudo-tokens (`vocab × H`), `v` projects continuous
/// features (`H × D_v`, present only when the fusion reads them) and `w`
/// scores labels (`K × H_out`).
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    vocab: Vocabulary,
    pub u: Matrix<T>,
    pub v: Option<Matrix<T>>,
    pub w: Matrix<T>,
    codebook: Option<Codebook>,
}

/// Dense gradients of the negative log-likelihood of one sample.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub loss: T,
    pub u: Matrix<T>,
    pub v: Option<Matrix<T>>,
    pub w: Matrix<T>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters: `U` and `V` uniform in `[-1/H, 1/H]`, `W` zero.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.label_count != vocab.n_labels() {
            return Err(Error::config(format!(
                "label count {} does not match vocabulary ({} labels)",
                config.label_count,
                vocab.n_labels()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / config.dim as f64;
        let u = Matrix::uniform(vocab.n_words(), config.dim, bound, &mut rng);
        let v = config
            .fusion
            .needs_features()
            .then(|| Matrix::uniform(config.dim, config.visual_dim, bound, &mut rng));
        let w = Matrix::zeros(config.label_count, config.hidden_out());
        Ok(Model {
            config,
            vocab,
            u,
            v,
            w,
            codebook: None,
        })
    }

    /// Assemble a model from existing parameters, checking shapes.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        u: Matrix<T>,
        v: Option<Matrix<T>>,
        w: Matrix<T>,
        codebook: Option<Codebook>,
    ) -> Result<Self> {
        config.validate()?;
        let shape_err = |what: &str| Error::Malformed(format!("{} has the wrong shape", what));
        if u.rows() != vocab.n_words() || u.cols() != config.dim {
            return Err(shape_err("U"));
        }
        match (&v, config.fusion.needs_features()) {
            (Some(v), true) if v.rows() == config.dim && v.cols() == config.visual_dim => {}
            (None, false) => {}
            _ => return Err(shape_err("V")),
        }
        if w.rows() != config.label_count
            || w.cols() != config.hidden_out()
            || vocab.n_labels() != config.label_count
        {
            return Err(shape_err("W"));
        }
        Ok(Model {
            config,
            vocab,
            u,
            v,
            w,
            codebook,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn fusion(&self) -> Fusion {
        self.config.fusion
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn set_codebook(&mut self, codebook: Option<Codebook>) {
        self.codebook = codebook;
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            u: self.u.cast(),
            v: self.v.as_ref().map(Matrix::cast),
            w: self.w.cast(),
            codebook: self.codebook.clone(),
        }
    }

    /// Mean of the embedding rows of `tokens`; zero for an empty document.
    pub fn hidden_text(&self, tokens: &[u32]) -> Vec<T> {
        let mut out = vec![T::zero(); self.config.dim];
        if tokens.is_empty() {
            return out;
        }
        let weight = T::one() / T::of_f64(tokens.len() as f64);
        for &t in tokens {
            axpy(weight, self.u.row(t as usize), &mut out);
        }
        out
    }

    /// `V · x`.
    pub fn hidden_visual(&self, features: &[f32]) -> Result<Vec<T>> {
        let v = self
            .v
            .as_ref()
            .ok_or(Error::config(format!("fusion '{}' has no V", self.fusion().name())))?;
        check_len(v.cols(), features.len())?;
        let mut out = vec![T::zero(); v.rows()];
        project(v, features, &mut out);
        Ok(out)
    }

    /// `W · hidden`.
    pub fn logits(&self, hidden: &[T]) -> Result<Vec<T>> {
        check_len(self.w.cols(), hidden.len())?;
        let mut out = vec![T::zero(); self.w.rows()];
        self.w.gemv(hidden, &mut out);
        Ok(out)
    }

    /// Label distribution for a document and its optional feature row.
    pub fn forward(&self, tokens: &[u32], features: Option<&[f32]>) -> Result<Vec<T>> {
        let mut scratch = Scratch::new(self);
        self.forward_into(tokens, features, &mut scratch)?;
        Ok(scratch.probs)
    }

    pub(crate) fn forward_into(
        &self,
        tokens: &[u32],
        features: Option<&[f32]>,
        s: &mut Scratch<T>,
    ) -> Result<()> {
        let fusion = self.config.fusion;
        let features = if fusion.needs_features() {
            let x = features.ok_or(Error::MissingFeatures(fusion.name()))?;
            check_len(self.config.visual_dim, x.len())?;
            Some(x)
        } else {
            None
        };

        self.bag(tokens, &mut s.bag);
        s.ht.iter_mut().for_each(|x| *x = T::zero());
        for &(t, c) in &s.bag {
            axpy(c, self.u.row(t as usize), &mut s.ht);
        }
        if let (Some(v), Some(x)) = (&self.v, features) {
            project(v, x, &mut s.hv);
        }
        fuse_into(fusion, &s.ht, &s.hv, &mut s.h);
        self.w.gemv(&s.h, &mut s.probs);
        softmax_in_place(&mut s.probs);
        Ok(())
    }

    /// Token rows and their coefficients in `ht`.
    fn bag(&self, tokens: &[u32], out: &mut Vec<(u32, T)>) {
        out.clear();
        match self.config.fusion {
            Fusion::Continuous => {}
            Fusion::Discretized { alpha } => {
                let quant = tokens.iter().filter(|&&t| self.vocab.is_quant(t)).count();
                let words = tokens.len() - quant;
                let word_w = if words > 0 {
                    T::one() / T::of_f64(words as f64)
                } else {
                    T::zero()
                };
                let quant_w = if quant > 0 {
                    T::of_f32(alpha) / T::of_f64(quant as f64)
                } else {
                    T::zero()
                };
                out.extend(tokens.iter().map(|&t| {
                    (t, if self.vocab.is_quant(t) { quant_w } else { word_w })
                }));
            }
            _ => {
                if !tokens.is_empty() {
                    let c = T::one() / T::of_f64(tokens.len() as f64);
                    out.extend(tokens.iter().map(|&t| (t, c)));
                }
            }
        }
    }

    /// Loss and `∂loss/∂probs·softmax` for `label`; leaves `s.probs`
    /// holding `p - e_label`.
    pub(crate) fn output_gradient(&self, label: u32, s: &mut Scratch<T>) -> T {
        let label = label as usize;
        let loss = -s.probs[label].max(T::min_positive_value()).ln();
        s.probs[label] -= T::one();
        loss
    }

    /// Dense gradients of `-log p(label)` w.r.t. `U`, `V` and `W`.
    pub fn gradient(&self, tokens: &[u32], features: Option<&[f32]>, label: u32) -> Result<Gradients<T>> {
        if label as usize >= self.config.label_count {
            return Err(Error::UnknownLabel(label.to_string()));
        }
        let mut s = Scratch::new(self);
        self.forward_into(tokens, features, &mut s)?;
        let loss = self.output_gradient(label, &mut s);

        let mut gw = Matrix::zeros(self.w.rows(), self.w.cols());
        s.g_h.iter_mut().for_each(|x| *x = T::zero());
        for (k, &g) in s.probs.iter().enumerate() {
            axpy(g, self.w.row(k), &mut s.g_h);
            axpy(g, &s.h, gw.row_mut(k));
        }
        fuse_backward(self.config.fusion, &s.ht, &s.hv, &s.g_h, &mut s.g_ht, &mut s.g_hv);

        let mut gu = Matrix::zeros(self.u.rows(), self.u.cols());
        for &(t, c) in &s.bag {
            axpy(c, &s.g_ht, gu.row_mut(t as usize));
        }
        let gv = match (&self.v, features) {
            (Some(v), Some(x)) => {
                let mut gv = Matrix::zeros(v.rows(), v.cols());
                for (i, &g) in s.g_hv.iter().enumerate() {
                    for (dst, &xj) in gv.row_mut(i).iter_mut().zip(x) {
                        *dst += g * T::of_f32(xj);
                    }
                }
                Some(gv)
            }
            _ => None,
        };
        Ok(Gradients {
            loss,
            u: gu,
            v: gv,
            w: gw,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.w.is_finite() && self.v.as_ref().is_none_or(Matrix::is_finite)
    }
}

/// Per-sample buffers reused across forward/backward passes.
#[derive(Clone, Debug)]
pub struct Scratch<T> {
    pub(crate) bag: Vec<(u32, T)>,
    pub(crate) ht: Vec<T>,
    pub(crate) hv: Vec<T>,
    pub(crate) h: Vec<T>,
    pub(crate) probs: Vec<T>,
    pub(crate) g_h: Vec<T>,
    pub(crate) g_ht: Vec<T>,
    pub(crate) g_hv: Vec<T>,
}

impl<T: Real> Scratch<T> {
    pub fn new(model: &Model<T>) -> Self {
        let dim = model.config.dim;
        let out = model.config.hidden_out();
        Scratch {
            bag: Vec::new(),
            ht: vec![T::zero(); dim],
            hv: vec![T::zero(); dim],
            h: vec![T::zero(); out],
            probs: vec![T::zero(); model.config.label_count],
            g_h: vec![T::zero(); out],
            g_ht: vec![T::zero(); dim],
            g_hv: vec![T::zero(); dim],
        }
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

#[inline]
fn project<T: Real>(v: &Matrix<T>, x: &[f32], out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = v
            .row(i)
            .iter()
            .zip(x)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * T::of_f32(b));
    }
}

/// Fuse a text and a visual hidden vector.
///
/// `text` and `discretized` return `ht`, `continuous` returns `hv`.
pub fn fuse<T: Real>(fusion: Fusion, ht: &[T], hv: &[T]) -> Result<Vec<T>> {
    check_len(ht.len(), hv.len())?;
    let mut out = vec![T::zero(); fusion.hidden_out(ht.len())];
    fuse_into(fusion, ht, hv, &mut out);
    Ok(out)
}

pub(crate) fn fuse_into<T: Real>(fusion: Fusion, ht: &[T], hv: &[T], out: &mut [T]) {
    let zipped = ht.iter().zip(hv).zip(out.iter_mut());
    match fusion {
        Fusion::Text | Fusion::Discretized { .. } => out.copy_from_slice(ht),
        Fusion::Continuous => out.copy_from_slice(hv),
        Fusion::Additive => zipped.for_each(|((&a, &b), o)| *o = a + b),
        Fusion::Max => zipped.for_each(|((&a, &b), o)| *o = if a >= b { a } else { b }),
        Fusion::Gated(GateSide::Text) => zipped.for_each(|((&a, &b), o)| *o = sigmoid(a) * b),
        Fusion::Gated(GateSide::Visual) => zipped.for_each(|((&a, &b), o)| *o = a * sigmoid(b)),
        Fusion::Bilinear => outer(ht, hv, out, |a| a, |b| b),
        Fusion::BilinearGated(GateSide::Text) => outer(ht, hv, out, sigmoid, |b| b),
        Fusion::BilinearGated(GateSide::Visual) => outer(ht, hv, out, |a| a, sigmoid),
    }
}

#[inline]
fn outer<T: Real>(ht: &[T], hv: &[T], out: &mut [T], fa: impl Fn(T) -> T, fb: impl Fn(T) -> T) {
    let dim = hv.len();
    let b: Vec<T> = hv.iter().map(|&x| fb(x)).collect();
    for (&x, row) in ht.iter().zip(out.chunks_exact_mut(dim)) {
        let a = fa(x);
        for (o, &bj) in row.iter_mut().zip(&b) {
            *o = a * bj;
        }
    }
}

/// Back-propagate `g_h` through the fusion into `g_ht` and `g_hv`.
pub(crate) fn fuse_backward<T: Real>(
    fusion: Fusion,
    ht: &[T],
    hv: &[T],
    g_h: &[T],
    g_ht: &mut [T],
    g_hv: &mut [T],
) {
    let zero = |v: &mut [T]| v.iter_mut().for_each(|x| *x = T::zero());
    let dsig = |x: T| {
        let s = sigmoid(x);
        s * (T::one() - s)
    };
    let dim = ht.len();
    match fusion {
        Fusion::Text | Fusion::Discretized { .. } => {
            g_ht.copy_from_slice(g_h);
            zero(g_hv);
        }
        Fusion::Continuous => {
            zero(g_ht);
            g_hv.copy_from_slice(g_h);
        }
        Fusion::Additive => {
            g_ht.copy_from_slice(g_h);
            g_hv.copy_from_slice(g_h);
        }
        Fusion::Max => {
            for i in 0..dim {
                // ties route to the text side, matching the forward pass
                let text_wins = ht[i] >= hv[i];
                g_ht[i] = if text_wins { g_h[i] } else { T::zero() };
                g_hv[i] = if text_wins { T::zero() } else { g_h[i] };
            }
        }
        Fusion::Gated(GateSide::Text) => {
            for i in 0..dim {
                g_ht[i] = g_h[i] * hv[i] * dsig(ht[i]);
                g_hv[i] = g_h[i] * sigmoid(ht[i]);
            }
        }
        Fusion::Gated(GateSide::Visual) => {
            for i in 0..dim {
                g_ht[i] = g_h[i] * sigmoid(hv[i]);
                g_hv[i] = g_h[i] * ht[i] * dsig(hv[i]);
            }
        }
        Fusion::Bilinear | Fusion::BilinearGated(_) => {
            let gate = fusion.gate();
            let a: Vec<T> = match gate {
                Some(GateSide::Text) => ht.iter().map(|&x| sigmoid(x)).collect(),
                _ => ht.to_vec(),
            };
            let b: Vec<T> = match gate {
                Some(GateSide::Visual) => hv.iter().map(|&x| sigmoid(x)).collect(),
                _ => hv.to_vec(),
            };
            zero(g_hv);
            for (i, g_row) in g_h.chunks_exact(dim).enumerate() {
                g_ht[i] = dot(g_row, &b);
                axpy(a[i], g_row, g_hv);
            }
            match gate {
                Some(GateSide::Text) => g_ht.iter_mut().zip(ht).for_each(|(g, &x)| *g *= dsig(x)),
                Some(GateSide::Visual) => g_hv.iter_mut().zip(hv).for_each(|(g, &x)| *g *= dsig(x)),
                None => {}
            }
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Real>(x: &mut [T]) {
    let max = x.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Negative log-likelihood `-ln probs[label]`.
pub fn nll<T: Real>(probs: &[T], label: usize) -> T {
    -probs[label].ln()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;

    fn vocab(words: &[&str], labels: usize) -> Vocabulary {
        use crate::corpus::Entry;
        let entry = |t: String| Entry { token: t, count: 1 };
        Vocabulary::from_entries(
            words.iter().map(|w| entry(w.to_string())).collect(),
            (0..labels).map(|l| entry(format!("l{}", l))).collect(),
            1,
        )
    }

    fn model(fusion: Fusion, dim: usize, visual_dim: usize) -> Model<f64> {
        let cfg = ModelConfig {
            fusion,
            dim,
            label_count: 3,
            visual_dim,
        };
        Model::new(cfg, vocab(&["a", "b", "c", "__q__0_1", "__q__1_0"], 3), 7).unwrap()
    }

    #[test]
    fn hidden_text_is_mean_of_rows() {
        let m = model(Fusion::Text, 4, 0);
        assert_eq!(m.hidden_text(&[1]), m.u.row(1));
        let two = m.hidden_text(&[0, 2]);
        for i in 0..4 {
            assert_relative_eq!(two[i], (m.u.row(0)[i] + m.u.row(2)[i]) / 2.0, epsilon = 1e-15);
        }
        assert_eq!(m.hidden_text(&[]), vec![0.0; 4]);
    }

    #[test]
    fn hidden_text_matches_text_weights() {
        let m = model(Fusion::Text, 4, 0);
        let tokens = [0, 1, 1, 2, 0, 0];
        let mut expected = vec![0.0; 4];
        for (t, w) in crate::corpus::text_weights(&tokens) {
            axpy(w, m.u.row(t as usize), &mut expected);
        }
        for (a, b) in m.hidden_text(&tokens).iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hidden_visual_cases() {
        let mut m = model(Fusion::Additive, 3, 3);
        assert_eq!(m.hidden_visual(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        let col1: Vec<f64> = (0..3).map(|i| m.v.as_ref().unwrap().row(i)[1]).collect();
        assert_eq!(m.hidden_visual(&[0.0, 1.0, 0.0]).unwrap(), col1);
        m.v = Some(Matrix::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let x = [0.6f32, 0.0, 0.8];
        assert_eq!(
            m.hidden_visual(&x).unwrap(),
            x.iter().map(|&v| v as f64).collect::<Vec<_>>()
        );
        assert!(m.hidden_visual(&[0.0; 2]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let a = [0.3, -1.0, 2.0];
        let z = [0.0; 3];
        assert_eq!(fuse(Fusion::Additive, &a, &z).unwrap(), a.to_vec());
        assert_eq!(fuse(Fusion::Max, &a, &a).unwrap(), a.to_vec());
        let hv = [1.0, -2.0, 4.0];
        assert_eq!(
            fuse(Fusion::Gated(GateSide::Text), &z, &hv).unwrap(),
            vec![0.5, -1.0, 2.0]
        );
        for i in 0..3 {
            for j in 0..3 {
                let mut ei = [0.0; 3];
                let mut ej = [0.0; 3];
                ei[i] = 1.0;
                ej[j] = 1.0;
                let out = fuse(Fusion::Bilinear, &ei, &ej).unwrap();
                assert_eq!(out.len(), 9);
                let nonzero: Vec<usize> = (0..9).filter(|&k| out[k] != 0.0).collect();
                assert_eq!(nonzero, vec![i * 3 + j]);
            }
        }
        assert!(fuse(Fusion::Additive, &a, &[1.0]).is_err());
    }

    #[test]
    fn bilinear_gated_applies_sigmoid_to_gate_side() {
        let ht = [0.0, 1.0];
        let hv = [2.0, -3.0];
        let t = fuse(Fusion::BilinearGated(GateSide::Text), &ht, &hv).unwrap();
        let s1 = sigmoid(1.0);
        assert_eq!(t, vec![1.0, -1.5, 2.0 * s1, -3.0 * s1]);
        let v = fuse(Fusion::BilinearGated(GateSide::Visual), &ht, &hv).unwrap();
        assert_eq!(v, vec![0.0, 0.0, sigmoid(2.0), sigmoid(-3.0)]);
    }

    #[test]
    fn hidden_sizes() {
        for name in Fusion::NAMES {
            let gate = matches!(name, "gated" | "bilinear_gated").then_some(GateSide::Visual);
            let f = Fusion::from_parts(name, gate, None).unwrap();
            let m = model(f, 4, 6);
            let expected = if matches!(name, "bilinear" | "bilinear_gated") { 16 } else { 4 };
            assert_eq!(m.w.cols(), expected, "{}", name);
            assert_eq!(m.w.rows(), 3);
            assert_eq!(m.v.is_some(), f.needs_features());
        }
    }

    #[test]
    fn fusion_parts_are_validated() {
        assert!(Fusion::from_parts("gated", None, None).is_err());
        assert!(Fusion::from_parts("additive", Some(GateSide::Text), None).is_err());
        assert!(Fusion::from_parts("text", None, Some(0.1)).is_err());
        assert!(Fusion::from_parts("nope", None, None).is_err());
        assert_eq!(
            Fusion::from_parts("discretized", None, Some(0.2)).unwrap(),
            Fusion::Discretized { alpha: 0.2 }
        );
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[1.5f64; 4]), vec![0.25; 4]);
        let p = softmax(&[0.0f64, 1e4]);
        assert_eq!(p, vec![0.0, 1.0]);
        // exp(k) / (e + e^2 + e^3)
        let p = softmax(&[1.0f64, 2.0, 3.0]);
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let oracle: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        for (a, b) in p.iter().zip(&oracle) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        assert_relative_eq!(p[0], 0.0900, epsilon = 5e-5);
        assert_relative_eq!(p[1], 0.2447, epsilon = 5e-5);
        assert_relative_eq!(p[2], 0.6652, epsilon = 5e-5);
    }

    #[test]
    fn nll_examples() {
        let uniform = vec![1.0f64 / 101.0; 101];
        assert!((nll(&uniform, 17) - 101f64.ln()).abs() < 1e-9);
        assert!((nll(&uniform, 0) - 4.61512).abs() < 1e-5);
        assert_eq!(nll(&[0.0f64, 1.0], 1), 0.0);
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum::<f64>().ln();
        let loss = nll(&softmax(&[1.0f64, 2.0, 3.0]), 2);
        assert_relative_eq!(loss, z - 3.0, epsilon = 1e-12);
        assert!((loss - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn forward_requires_features_when_fused() {
        let m = model(Fusion::Additive, 3, 4);
        assert!(matches!(m.forward(&[0], None), Err(Error::MissingFeatures(_))));
        assert!(m.forward(&[0], Some(&[0.0; 4])).is_ok());
        assert!(m.forward(&[0], Some(&[0.0; 3])).is_err());
    }

    fn randomize(m: &mut Model<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.u = Matrix::uniform(m.u.rows(), m.u.cols(), 1.0, &mut rng);
        m.w = Matrix::uniform(m.w.rows(), m.w.cols(), 1.0, &mut rng);
        if let Some(v) = &m.v {
            m.v = Some(Matrix::uniform(v.rows(), v.cols(), 1.0, &mut rng));
        }
    }

    #[test]
    fn discretized_reductions() {
        let mut d = model(Fusion::Discretized { alpha: 1.0 }, 4, 0);
        randomize(&mut d, 1);
        let mut t = d.clone();
        t.config.fusion = Fusion::Text;

        // no pseudo-tokens: same as text
        assert_eq!(d.forward(&[0, 1, 1], None).unwrap(), t.forward(&[0, 1, 1], None).unwrap());

        // only pseudo-tokens, alpha 1: W · mean of pseudo rows
        let mean = t.hidden_text(&[3, 4]);
        let expected = softmax(&t.logits(&mean).unwrap());
        assert_eq!(d.forward(&[3, 4], None).unwrap(), expected);

        // alpha 0: pseudo-tokens vanish
        d.config.fusion = Fusion::Discretized { alpha: 0.0 };
        assert_eq!(d.forward(&[0, 3, 2, 4], None).unwrap(), t.forward(&[0, 2], None).unwrap());
    }

    #[test]
    fn additive_with_zero_visual_equals_text() {
        let mut a = model(Fusion::Additive, 4, 5);
        randomize(&mut a, 2);
        let t = Model::from_parts(
            ModelConfig {
                fusion: Fusion::Text,
                visual_dim: 0,
                ..a.config.clone()
            },
            a.vocab.clone(),
            a.u.clone(),
            None,
            a.w.clone(),
            None,
        )
        .unwrap();
        assert_eq!(
            a.forward(&[0, 2], Some(&[0.0; 5])).unwrap(),
            t.forward(&[0, 2], None).unwrap()
        );
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-1e4f64..1e4, 1..20)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn fuse_identities(a in proptest::collection::vec(-5f64..5.0, 1..8)) {
            let z = vec![0.0; a.len()];
            prop_assert_eq!(fuse(Fusion::Additive, &a, &z).unwrap(), a.clone());
            prop_assert_eq!(fuse(Fusion::Max, &a, &a).unwrap(), a.clone());
        }
    }
}
