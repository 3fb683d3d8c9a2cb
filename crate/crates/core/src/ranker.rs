//! Item scoring and top-K selection.
//!
//! A [`Ranker`] maps interaction-feature estimates and contextual features to
//! a click probability. [`LogisticRanker`] is the reference scorer, trained
//! pointwise on binary clicks.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::special::{log_sigmoid, sigmoid};
use crate::types::ItemId;

#[derive(Debug, Clone, Copy)]
pub struct RankerInput<'a> {
    pub interaction_features: &'a [f64],
    pub contextual_features: &'a [f64],
}

pub trait Ranker: Send + Sync {
    /// Click probability in `(0, 1)`.
    fn score(&self, input: &RankerInput<'_>) -> Result<f64>;
}

impl<R: Ranker + ?Sized> Ranker for &R {
    fn score(&self, input: &RankerInput<'_>) -> Result<f64> {
        (**self).score(input)
    }
}

impl<R: Ranker + ?Sized> Ranker for Box<R> {
    fn score(&self, input: &RankerInput<'_>) -> Result<f64> {
        (**self).score(input)
    }
}

/// `sigmoid(w · [interaction, contextual] + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRanker {
    num_interaction: usize,
    num_contextual: usize,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticRanker {
    pub fn new(
        num_interaction: usize,
        num_contextual: usize,
        weights: Vec<f64>,
        bias: f64,
    ) -> Result<Self> {
        if weights.len() != num_interaction + num_contextual {
            return Err(Error::Shape {
                what: "ranker weights",
                expected: num_interaction + num_contextual,
                got: weights.len(),
            });
        }
        if !(bias.is_finite() && weights.iter().all(|w| w.is_finite())) {
            return Err(Error::domain("ranker parameters must be finite"));
        }
        Ok(Self {
            num_interaction,
            num_contextual,
            weights,
            bias,
        })
    }

    pub fn zeros(num_interaction: usize, num_contextual: usize) -> Self {
        Self {
            num_interaction,
            num_contextual,
            weights: vec![0.0; num_interaction + num_contextual],
            bias: 0.0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn num_interaction(&self) -> usize {
        self.num_interaction
    }

    pub fn num_contextual(&self) -> usize {
        self.num_contextual
    }

    fn logit(&self, input: &RankerInput<'_>) -> Result<f64> {
        if input.interaction_features.len() != self.num_interaction {
            return Err(Error::Shape {
                what: "interaction features",
                expected: self.num_interaction,
                got: input.interaction_features.len(),
            });
        }
        if input.contextual_features.len() != self.num_contextual {
            return Err(Error::Shape {
                what: "contextual features",
                expected: self.num_contextual,
                got: input.contextual_features.len(),
            });
        }
        let features = input
            .interaction_features
            .iter()
            .chain(input.contextual_features);
        Ok(self.bias + self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut values = self.weights.clone();
        values.push(self.bias);
        Checkpoint {
            kind: CheckpointKind::LogisticRanker,
            dims: vec![self.num_interaction as u64, self.num_contextual as u64],
            values,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::LogisticRanker || ck.dims.len() != 2 {
            return Err(Error::Load("checkpoint does not hold a logistic ranker".into()));
        }
        let (ni, nc) = (ck.dims[0] as usize, ck.dims[1] as usize);
        if ck.values.len() != ni + nc + 1 {
            return Err(Error::Load(format!(
                "ranker checkpoint holds {} values, expected {}",
                ck.values.len(),
                ni + nc + 1
            )));
        }
        let (w, b) = ck.values.split_at(ni + nc);
        Self::new(ni, nc, w.to_vec(), b[0]).map_err(|e| Error::Load(e.to_string()))
    }
}

impl Ranker for LogisticRanker {
    fn score(&self, input: &RankerInput<'_>) -> Result<f64> {
        Ok(sigmoid(self.logit(input)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedItem {
    pub item: ItemId,
    pub score: f64,
}

/// Items in display order: scores non-increasing, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub entries: Vec<RankedItem>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.entries.iter().map(|e| e.item)
    }
}

fn display_order(a: &RankedItem, b: &RankedItem) -> Ordering {
    // NaN sorts last; adding 0.0 folds -0.0 into 0.0 so the two tie
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s + 0.0 };
    key(b.score)
        .total_cmp(&key(a.score))
        .then(a.item.cmp(&b.item))
}

/// The `k` highest-scoring items, descending, ties broken by ascending id.
///
/// A repeated id keeps only its best score.
pub fn select_top_k(scores: &[(ItemId, f64)], k: usize) -> RankedList {
    let mut entries: Vec<RankedItem> = scores
        .iter()
        .map(|&(item, score)| RankedItem { item, score })
        .collect();
    entries.sort_unstable_by(display_order);
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    entries.retain(|e| seen.insert(e.item));
    entries.truncate(k);
    RankedList { entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub interaction: Vec<f64>,
    pub contextual: Vec<f64>,
    pub click: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 256,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RankerTrainOutcome {
    pub ranker: LogisticRanker,
    /// Mean batch BCE per epoch.
    pub loss_history: Vec<f64>,
    /// Set when the labels were all one class and only the bias was fit.
    pub degenerate: bool,
}

/// Pointwise logistic regression trained with mini-batch Adam on binary
/// cross-entropy.
///
/// The dataset is put into a canonical order before the seeded shuffle, so the
/// fitted parameters depend only on the multiset of examples and the seed.
pub fn train_ranker(
    dataset: &[LabeledExample],
    num_interaction: usize,
    num_contextual: usize,
    config: &RankerTrainConfig,
) -> Result<RankerTrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train a ranker on an empty dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    for ex in dataset {
        if ex.interaction.len() != num_interaction {
            return Err(Error::Shape {
                what: "interaction features",
                expected: num_interaction,
                got: ex.interaction.len(),
            });
        }
        if ex.contextual.len() != num_contextual {
            return Err(Error::Shape {
                what: "contextual features",
                expected: num_contextual,
                got: ex.contextual.len(),
            });
        }
    }

    let positives = dataset.iter().filter(|e| e.click).count();
    if positives == 0 || positives == dataset.len() {
        let rate = (positives as f64 / dataset.len() as f64).clamp(1e-6, 1.0 - 1e-6);
        log::warn!(
            "ranker training data has a single class ({positives}/{} clicks); fitting bias only",
            dataset.len()
        );
        let mut ranker = LogisticRanker::zeros(num_interaction, num_contextual);
        ranker.bias = (rate / (1.0 - rate)).ln();
        return Ok(RankerTrainOutcome {
            ranker,
            loss_history: Vec::new(),
            degenerate: true,
        });
    }

    let mut keyed: Vec<(Vec<u64>, bool, &LabeledExample)> = dataset
        .iter()
        .map(|e| {
            let bits = e.interaction.iter().chain(&e.contextual).map(|v| v.to_bits());
            (bits.collect(), e.click, e)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let canonical: Vec<&LabeledExample> = keyed.into_iter().map(|k| k.2).collect();

    let dim = num_interaction + num_contextual;
    let mut params = vec![0.0; dim + 1];
    let mut opt = OptimizerState::adam(dim + 1, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..canonical.len()).collect();
    let mut grad = vec![0.0; dim + 1];
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in chunk {
                let ex = canonical[i];
                let feats = ex.interaction.iter().chain(&ex.contextual);
                let logit = params[dim]
                    + params[..dim].iter().zip(feats.clone()).map(|(w, x)| w * x).sum::<f64>();
                let y = if ex.click { 1.0 } else { 0.0 };
                loss -= if ex.click {
                    log_sigmoid(logit)
                } else {
                    log_sigmoid(-logit)
                };
                let err = sigmoid(logit) - y;
                for (g, x) in grad[..dim].iter_mut().zip(feats) {
                    *g += err * x;
                }
                grad[dim] += err;
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.apply(&mut params, &grad);
            epoch_loss += loss * scale;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }

    let bias = params.pop().unwrap();
    Ok(RankerTrainOutcome {
        ranker: LogisticRanker::new(num_interaction, num_contextual, params, bias)?,
        loss_history: history,
        degenerate: false,
    })
}

/// Area under the ROC curve, with tied scores counted as half.
pub fn auc(scored: &[(f64, bool)]) -> Option<f64> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with average ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * sorted[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}
