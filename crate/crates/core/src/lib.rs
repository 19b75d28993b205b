//! Fast linear multi-modal classification.
//!
//! Documents carry a bag of discrete tokens (words) and, optionally, a dense
//! continuous feature vector read from a sidecar file. A model embeds the
//! bag with `U`, projects the continuous vector with `V`, fuses the two
//! hidden vectors with one of several operators and scores labels with `W`.
//!
//! Continuous vectors can also be product-quantized into pseudo-tokens
//! (`__q__{slot}_{centroid}`) that are appended to the text, which keeps
//! training as cheap as text-only training.

pub mod corpus;
pub mod error;
pub mod inference;
pub mod kmeans;
pub mod matrix;
pub mod model;
pub mod persistence;
pub mod quantizer;
pub mod sweep;
pub mod trainer;

pub use corpus::{
    build_vocab, load_features, parse_line, text_weights, Corpus, Document, FeatureTable,
    Vocabulary, QUANT_PREFIX,
};
pub use error::{Error, Result};

pub use inference::{
    evaluate, format_neighbor, nearest_neighbors, predict, Evaluation, Prediction, Restrict,
};
pub use kmeans::{kmeans, KMeans};
pub use matrix::{Matrix, Real};
pub use model::{fuse, nll, softmax, Fusion, GateSide, Gradients, Model, ModelConfig, Scratch};
pub use persistence::{load_codebook, load_model, save_codebook, save_model};
pub use quantizer::{emit_quantized_corpus, train_codebook, Codebook, QuantizerConfig};
pub use sweep::{grid_search, Grid, GridAxis, Split, SweepOutcome};
pub use trainer::{lr_at, step, train, train_with_stats, Progress, TrainConfig, TrainStats};




