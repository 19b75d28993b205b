//! Prediction, P@1 evaluation and embedding-space neighbor queries.

use crate::corpus::{Corpus, FeatureTable};
use crate::error::{Error, Result};
use crate::matrix::{dot, Real};
use crate::model::Model;

/// Top-ranked labels with their probabilities, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<(u32, f64)>,
}

impl Prediction {
    pub fn top(&self) -> Option<u32> {
        self.labels.first().map(|&(l, _)| l)
    }
}

/// The `k` most probable labels; ties are ordered by label id.
pub fn predict<T: Real>(
    model: &Model<T>,
    tokens: &[u32],
    features: Option<&[f32]>,
    k: usize,
) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let probs = model.forward(tokens, features)?;
    let mut ranked: Vec<(u32, f64)> = probs
        .iter()
        .enumerate()
        .map(|(l, p)| (l as u32, p.as_f64()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(Prediction { labels: ranked })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Labeled documents scored.
    pub documents: usize,
    pub correct: usize,
}

impl Evaluation {
    /// P@1.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.documents as f64
    }
}

/// P@1: the share of labeled documents whose top prediction is one of
/// their gold labels. Unlabeled lines are skipped; lines whose labels are
/// all unknown to the model count as misses.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    features: Option<&FeatureTable>,
) -> Result<Evaluation> {
    let features = if model.fusion().needs_features() {
        let f = features.ok_or(Error::MissingFeatures(model.fusion().name()))?;
        if f.len() != corpus.len() {
            return Err(Error::RowCountMismatch {
                expected: corpus.len(),
                actual: f.len(),
            });
        }
        Some(f)
    } else {
        None
    };
    let mut eval = Evaluation {
        documents: 0,
        correct: 0,
    };
    for doc in corpus.iter().filter(|d| d.is_labeled()) {
        let x = features.map(|f| f.row(doc.line_index));
        let top = predict(model, &doc.tokens, x, 1)?.top();
        eval.documents += 1;
        if top.is_some_and(|l| doc.labels.contains(&l)) {
            eval.correct += 1;
        }
    }
    if eval.documents == 0 {
        return Err(Error::Empty("no labeled documents to evaluate"));
    }
    Ok(eval)
}

/// Candidate set for neighbor queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Restrict {
    /// Ordinary words only; pseudo-tokens are skipped.
    Words,
    All,
}

/// Nearest neighbors of `query` by cosine similarity of embedding rows.
///
/// The query itself is excluded; results are sorted by similarity, ties
/// by token id. Zero rows have similarity 0 to everything.
pub fn nearest_neighbors<T: Real>(
    model: &Model<T>,
    query: &str,
    topn: usize,
    restrict: Restrict,
) -> Result<Vec<(String, f64)>> {
    let vocab = model.vocab();
    let q = vocab
        .word_id(query)
        .ok_or_else(|| Error::UnknownToken(query.to_owned()))?;
    let qrow = model.u.row(q as usize);
    let qnorm = dot(qrow, qrow).as_f64().sqrt();

    let mut scored: Vec<(u32, f64)> = (0..vocab.n_words() as u32)
        .filter(|&id| id != q && (restrict == Restrict::All || !vocab.is_quant(id)))
        .map(|id| {
            let row = model.u.row(id as usize);
            let norm = dot(row, row).as_f64().sqrt();
            let sim = if norm > 0.0 && qnorm > 0.0 {
                (dot(qrow, row).as_f64() / (norm * qnorm)).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            (id, sim)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(topn);
    Ok(scored
        .into_iter()
        .map(|(id, sim)| (vocab.word(id).to_owned(), sim))
        .collect())
}

/// `token similarity` with three decimals, e.g. `donuts 0.987`.
pub fn format_neighbor(token: &str, similarity: f64) -> String {
    format!("{} {:.3}", token, similarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Entry, Vocabulary};
    use crate::matrix::Matrix;
    use crate::model::{Fusion, ModelConfig};

    fn vocab(words: &[&str], labels: usize) -> Vocabulary {
        let entry = |t: String| Entry { token: t, count: 1 };
        Vocabulary::from_entries(
            words.iter().map(|w| entry(w.to_string())).collect(),
            (0..labels).map(|l| entry(format!("l{}", l))).collect(),
            1,
        )
    }

    fn text_model(words: &[&str], labels: usize, dim: usize) -> Model<f32> {
        let cfg = ModelConfig {
            fusion: Fusion::Text,
            dim,
            label_count: labels,
            visual_dim: 0,
        };
        Model::new(cfg, vocab(words, labels), 1).unwrap()
    }

    #[test]
    fn zero_output_matrix_is_uniform() {
        let m = text_model(&["a", "b"], 2, 3);
        let p = predict(&m, &[0], None, 2).unwrap();
        assert_eq!(p.labels, vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(predict(&m, &[0], None, 10).unwrap().labels.len(), 2);
        assert!(predict(&m, &[0], None, 0).is_err());
    }

    #[test]
    fn predictions_rank_by_probability() {
        let mut m = text_model(&["a"], 3, 1);
        m.u = Matrix::from_vec(1, 1, vec![1.0]);
        m.w = Matrix::from_vec(3, 1, vec![0.0, 2.0, 1.0]);
        let p = predict(&m, &[0], None, 3).unwrap();
        let order: Vec<u32> = p.labels.iter().map(|&(l, _)| l).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert!(p.labels.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn evaluate_counts_matches() {
        let mut m = text_model(&["a", "b"], 2, 2);
        // word a -> label 0, word b -> label 1
        m.u = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        m.w = Matrix::from_vec(2, 2, vec![5.0, 0.0, 0.0, 5.0]);
        let v = m.vocab().clone();
        let perfect = Corpus::from_lines(["__label__l0 a", "__label__l1 b", "unlabeled a"], &v);
        let e = evaluate(&m, &perfect, None).unwrap();
        assert_eq!((e.documents, e.correct), (2, 2));
        assert_eq!(e.accuracy(), 1.0);

        let half = Corpus::from_lines(["__label__l0 a", "__label__l1 a"], &v);
        assert_eq!(evaluate(&m, &half, None).unwrap().accuracy(), 0.5);

        let multi = Corpus::from_lines(["__label__l1 __label__l0 a", "__label__zz a"], &v);
        let e = evaluate(&m, &multi, None).unwrap();
        assert_eq!((e.documents, e.correct), (2, 1));

        assert!(evaluate(&m, &Corpus::default(), None).is_err());
    }

    #[test]
    fn neighbors_rank_by_cosine() {
        let mut m = text_model(&["q", "same", "near", "far", "__q__0_1"], 1, 2);
        m.u = Matrix::from_vec(
            5,
            2,
            vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0, -1.0, 0.0, 3.0, 0.0],
        );
        let all = nearest_neighbors(&m, "q", 10, Restrict::All).unwrap();
        assert_eq!(all[0].1, 1.0);
        assert!(all.iter().all(|(t, s)| t != "q" && (-1.0..=1.0).contains(s)));
        // "same" and "__q__0_1" tie at 1.0; lower id first
        assert_eq!(all[0].0, "same");
        assert_eq!(all[1].0, "__q__0_1");
        let words = nearest_neighbors(&m, "q", 10, Restrict::Words).unwrap();
        let names: Vec<&str> = words.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(names, vec!["same", "near", "far"]);
        assert!(matches!(
            nearest_neighbors(&m, "missing", 3, Restrict::All),
            Err(Error::UnknownToken(_))
        ));
        assert_eq!(nearest_neighbors(&m, "q", 1, Restrict::Words).unwrap().len(), 1);
    }

    #[test]
    fn neighbor_format() {
        assert_eq!(format_neighbor("donuts", 0.98712), "donuts 0.987");
    }
}
