//! Stage-2 history classifier over frozen query embeddings, and the boolean
//! mask derived from its prediction.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph};
use crate::error::{CenetError, Result};
use crate::history::QueryContext;
use crate::model::{EpochLog, HyperParams, ModelParams};
use crate::optim::{accumulate_all, Adam, AdamConfig, Parameter};
use crate::tensor::{dot, Tensor};

/// Predicted probability at or above this is a "historical" prediction.
pub const THRESHOLD: f64 = 0.5;

/// Logistic layer `sigmoid(w · v + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Classifier {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        Classifier {
            weight: Parameter::uniform("classifier.weight", &[1, dim], bound, &mut rng),
            bias: Parameter::uniform("classifier.bias", &[1], bound, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn logit(&self, v: &[f64]) -> f64 {
        dot(self.weight.value.data(), v) + self.bias.value.data()[0]
    }

    /// Predicted label and its probability; a probability of exactly 0.5
    /// counts as historical.
    pub fn predict(&self, v: &[f64]) -> (bool, f64) {
        let p = sigmoid(self.logit(v));
        (p >= THRESHOLD, p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub train_accuracy: f64,
    pub valid_accuracy: Option<f64>,
    /// Fraction of training queries whose answer is historical.
    pub train_positive_rate: f64,
    /// Accuracy of always predicting the more frequent training label.
    pub majority_baseline: f64,
    pub epochs: Vec<EpochLog>,
}

pub fn accuracy(classifier: &Classifier, embeddings: &Tensor, labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| classifier.predict(embeddings.row(i)).0 == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Fits a logistic layer on fixed embeddings with mean BCE and Adam.
pub fn train_classifier(
    embeddings: &Tensor,
    labels: &[bool],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(Classifier, Vec<EpochLog>)> {
    if labels.is_empty() {
        return Err(CenetError::EmptyInput("train_classifier"));
    }
    if embeddings.rows() != labels.len() {
        return Err(CenetError::shape(
            "train_classifier",
            embeddings.shape(),
            &[labels.len()],
        ));
    }
    let mut clf = Classifier::init(embeddings.cols(), seed);
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(batch_size.max(1)) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| embeddings.row(i).to_vec()).collect();
            let targets: Vec<bool> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&rows)?);
            let w = g.param(&clf.weight);
            let b = g.param(&clf.bias);
            let logits = g.linear(w, b, x)?;
            let loss = g.bce_with_logits(logits, &targets)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(CenetError::NonFiniteLoss {
                    epoch,
                    step: adam.step_count() as usize + 1,
                    detail: format!("classifier bce={value}"),
                });
            }
            let grads = g.backward(loss)?;
            let mut ps = [&mut clf.weight, &mut clf.bias];
            accumulate_all(&mut ps, &grads)?;
            adam.step(&mut ps);
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        logs.push(EpochLog {
            stage: 2,
            epoch,
            ce: mean,
            sup: 0.0,
            combined: mean,
            batches,
            supcon_skipped: 0,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((clf, logs))
}

/// Freezes every stage-1 parameter, embeds the training queries once and
/// fits the classifier on their history labels. The fitted layer is stored
/// in `params.classifier`.
pub fn train_stage2(
    train: &[QueryContext],
    valid: &[QueryContext],
    params: &mut ModelParams,
    hp: &HyperParams,
) -> Result<ClassifierMetrics> {
    if train.is_empty() {
        return Err(CenetError::EmptySplit("train"));
    }
    params.set_stage1_frozen(true);
    let embeddings = params.embed_contexts(train, hp.lambda, hp.batch_size)?;
    let labels: Vec<bool> = train.iter().map(|c| c.label).collect();
    let (clf, epochs) = train_classifier(
        &embeddings,
        &labels,
        hp.stage2_epochs,
        hp.batch_size,
        hp.lr,
        hp.seed.wrapping_add(0x0c1a_551f),
    )?;
    let positives = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
    let train_accuracy = accuracy(&clf, &embeddings, &labels);
    let valid_accuracy = if valid.is_empty() {
        None
    } else {
        let v = params.embed_contexts(valid, hp.lambda, hp.batch_size)?;
        let l: Vec<bool> = valid.iter().map(|c| c.label).collect();
        Some(accuracy(&clf, &v, &l))
    };
    params.classifier = Some(clf);
    Ok(ClassifierMetrics {
        train_accuracy,
        valid_accuracy,
        train_positive_rate: positives,
        majority_baseline: positives.max(1.0 - positives),
        epochs,
    })
}

/// Predicted history label and probability for each context.
pub fn predict_labels(
    params: &ModelParams,
    contexts: &[QueryContext],
    lambda: f64,
    batch_size: usize,
) -> Result<Vec<(bool, f64)>> {
    let clf = params
        .classifier
        .as_ref()
        .ok_or(CenetError::MissingClassifier("predict"))?;
    let v = params.embed_contexts(contexts, lambda, batch_size)?;
    Ok((0..contexts.len()).map(|i| clf.predict(v.row(i))).collect())
}

/// Boolean mask over entities: `B(o) = (o ∈ H) == Î`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVector(pub Vec<bool>);

impl MaskVector {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_all_zero(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }
}

pub fn build_mask(
    history: impl IntoIterator<Item = u32>,
    predicted: bool,
    num_entities: usize,
) -> MaskVector {
    let mut bits = vec![!predicted; num_entities];
    write_mask(history, predicted, &mut bits);
    MaskVector(bits)
}

/// In-place variant of [`build_mask`] for reuse of a buffer.
pub fn write_mask(history: impl IntoIterator<Item = u32>, predicted: bool, out: &mut [bool]) {
    out.fill(!predicted);
    for e in history {
        if let Some(b) = out.get_mut(e as usize) {
            *b = predicted;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        assert_eq!(build_mask([1], true, 3).0, vec![false, true, false]);
        assert_eq!(build_mask([1], false, 3).0, vec![true, false, true]);
        assert!(build_mask([], true, 4).is_all_zero());
        assert_eq!(build_mask([0, 2], true, 5).count_ones(), 2);
    }

    #[test]
    fn zero_logit_counts_as_historical() {
        let mut c = Classifier::init(2, 0);
        c.weight.value.data_mut().fill(0.0);
        c.bias.value.data_mut()[0] = 0.0;
        assert_eq!(c.predict(&[1.0, -1.0]), (true, 0.5));
        c.bias.value.data_mut()[0] = 40.0;
        assert!(c.predict(&[0.0, 0.0]).0);
        c.bias.value.data_mut()[0] = -40.0;
        assert!(!c.predict(&[0.0, 0.0]).0);
    }

    #[test]
    fn separable_embeddings_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                use rand::Rng;
                let mut r: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // keep a margin around the boundary
                r[0] += r[0].signum() * 0.2;
                r
            })
            .collect();
        let labels: Vec<bool> = rows.iter().map(|r| r[0] > 0.0).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (clf, logs) = train_classifier(&x, &labels, 20, 32, 0.05, 1).unwrap();
        assert_eq!(logs.len(), 20);
        assert!(accuracy(&clf, &x, &labels) > 0.99);
    }

    #[test]
    fn constant_labels_give_full_accuracy() {
        let x = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6]]).unwrap();
        let labels = [true; 3];
        let (clf, _) = train_classifier(&x, &labels, 20, 2, 0.05, 0).unwrap();
        assert_eq!(accuracy(&clf, &x, &labels), 1.0);
    }

    #[test]
    fn empty_training_set_is_error() {
        assert!(train_classifier(&Tensor::zeros(&[0, 2]), &[], 1, 4, 0.1, 0).is_err());
    }
}
