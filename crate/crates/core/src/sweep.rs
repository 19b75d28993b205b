//! Grid search over training hyperparameters, scored by validation P@1.

use serde_json::Value;

use crate::corpus::{Corpus, FeatureTable, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::model::{Fusion, GateSide};
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum GridAxis {
    Lr(Vec<f64>),
    Epochs(Vec<u32>),
    /// Only applies to discretized fusion.
    Alpha(Vec<f32>),
    Dim(Vec<usize>),
    /// Only applies to gated fusions.
    Gate(Vec<GateSide>),
}

impl GridAxis {
    fn len(&self) -> usize {
        match self {
            GridAxis::Lr(v) => v.len(),
            GridAxis::Epochs(v) => v.len(),
            GridAxis::Alpha(v) => v.len(),
            GridAxis::Dim(v) => v.len(),
            GridAxis::Gate(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, config: &mut TrainConfig) {
        match self {
            GridAxis::Lr(v) => config.lr = v[i],
            GridAxis::Epochs(v) => config.epochs = v[i],
            GridAxis::Dim(v) => config.dim = v[i],
            GridAxis::Alpha(v) => {
                if let Fusion::Discretized { alpha } = &mut config.fusion {
                    *alpha = v[i];
                }
            }
            GridAxis::Gate(v) => match &mut config.fusion {
                Fusion::Gated(side) | Fusion::BilinearGated(side) => *side = v[i],
                _ => {}
            },
        }
    }
}

/// Axes enumerated odometer-style: the first axis varies slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    axes: Vec<GridAxis>,
}

impl Grid {
    pub fn new(axes: Vec<GridAxis>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|a| a.len() == 0) {
            return Err(Error::Empty("hyperparameter grid"));
        }
        Ok(Grid { axes })
    }

    /// Learning rate, epochs, alpha, embedding size and gate side values
    /// commonly swept for these models.
    pub fn standard() -> Self {
        Grid {
            axes: vec![
                GridAxis::Lr(vec![0.1, 0.25, 0.5, 1.0, 2.0]),
                GridAxis::Epochs(vec![5, 10, 20]),
                GridAxis::Alpha(vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5]),
                GridAxis::Dim(vec![20, 100]),
                GridAxis::Gate(vec![GateSide::Text, GateSide::Visual]),
            ],
        }
    }

    /// Parse a JSON object mapping axis name to a list of values. Axis
    /// names: `lr`, `epoch`, `alpha`, `dim`, `gate`. Keys keep their
    /// document order.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::config(format!("grid: {}", msg));
        let value: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let object = value.as_object().ok_or_else(|| bad("expected a JSON object".into()))?;
        let mut axes = Vec::new();
        for (key, values) in object {
            let list = values
                .as_array()
                .ok_or_else(|| bad(format!("axis '{}' is not a list", key)))?;
            let num = |v: &Value| {
                v.as_f64()
                    .ok_or_else(|| bad(format!("axis '{}' holds a non-number", key)))
            };
            let int = |v: &Value| {
                v.as_u64()
                    .ok_or_else(|| bad(format!("axis '{}' holds a non-integer", key)))
            };
            let axis = match key.as_str() {
                "lr" => GridAxis::Lr(list.iter().map(num).collect::<Result<_>>()?),
                "epoch" | "epochs" => GridAxis::Epochs(
                    list.iter().map(|v| int(v).map(|x| x as u32)).collect::<Result<_>>()?,
                ),
                "alpha" => GridAxis::Alpha(
                    list.iter().map(|v| num(v).map(|x| x as f32)).collect::<Result<_>>()?,
                ),
                "dim" => GridAxis::Dim(
                    list.iter().map(|v| int(v).map(|x| x as usize)).collect::<Result<_>>()?,
                ),
                "gate" => GridAxis::Gate(
                    list.iter()
                        .map(|v| {
                            v.as_str()
                                .ok_or_else(|| bad("gate values are strings".into()))?
                                .parse()
                        })
                        .collect::<Result<_>>()?,
                ),
                other => return Err(bad(format!("unknown axis '{}'", other))),
            };
            axes.push(axis);
        }
        Grid::new(axes)
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    /// Number of combinations.
    pub fn len(&self) -> usize {
        self.axes.iter().map(GridAxis::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination applied to `base`, in enumeration order. Axes that
    /// do not apply to the base fusion leave the config unchanged, so the
    /// list may contain repeats.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; self.axes.len()];
        loop {
            let mut config = base.clone();
            for (axis, &i) in self.axes.iter().zip(&idx) {
                axis.apply(i, &mut config);
            }
            out.push(config);

            let mut pos = self.axes.len();
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < self.axes[pos].len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
}

/// A corpus together with its optional continuous features.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub corpus: &'a Corpus,
    pub features: Option<&'a FeatureTable>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub best: TrainConfig,
    pub best_accuracy: f64,
    /// Every distinct configuration trained, with its validation P@1.
    pub trials: Vec<(TrainConfig, f64)>,
}

/// Train every distinct configuration of `grid` on `train` and keep the one
/// with the highest P@1 on `valid`; the earliest wins ties.
pub fn grid_search(
    base: &TrainConfig,
    grid: &Grid,
    vocab: &Vocabulary,
    train_split: Split<'_>,
    valid_split: Split<'_>,
) -> Result<SweepOutcome> {
    let mut trials: Vec<(TrainConfig, f64)> = Vec::new();
    let mut best: Option<usize> = None;
    for config in grid.configs(base) {
        if trials.iter().any(|(seen, _)| *seen == config) {
            continue;
        }
        let model = train(&config, vocab, train_split.corpus, train_split.features, None)?;
        let accuracy = evaluate(&model, valid_split.corpus, valid_split.features)?.accuracy();
        log::info!("sweep {:?}: P@1 {:.4}", config, accuracy);
        if best.is_none_or(|b| accuracy > trials[b].1) {
            best = Some(trials.len());
        }
        trials.push((config, accuracy));
    }
    let best = best.ok_or(Error::Empty("hyperparameter grid"))?;
    Ok(SweepOutcome {
        best: trials[best].0.clone(),
        best_accuracy: trials[best].1,
        trials,
    })
}
