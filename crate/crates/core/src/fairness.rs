//! Classifier training and equalized-odds metrics.
//!
//! `P[y][a]` is the accuracy on test examples with class `y` and group `a`.
//! For each class the gap is the largest pairwise difference between its
//! groups; `DEO_M` is the largest gap over classes and `DEO_A` their mean,
//! both in percent.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{init_network, Arch, NetworkParams};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{sgd_update, Tensor};

fn default_arch() -> String {
    "convnet".into()
}

/// Evaluation classifier settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_arch")]
    pub arch: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { arch: default_arch(), epochs: 100, lr: 0.01, batch: 64 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("eval lr {} must be non-negative", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("eval batch must be at least 1".into()));
        }
        Arch::preset(&self.arch, [1, 8, 8], 2)?;
        Ok(())
    }
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Eval(format!("label {y} outside [0, {k})")));
        }
        data[i * k + y] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), k], data)?)
}

/// Minibatch SGD on mean softmax cross-entropy, reshuffling every epoch.
/// Deterministic in `seed`, which drives both the initialisation and the
/// shuffles.
pub fn train_classifier(
    images: &Tensor,
    labels: &[usize],
    arch: &Arch,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<NetworkParams> {
    let n = labels.len();
    if n == 0 || images.ndim() != 4 || images.shape()[0] != n {
        return Err(Error::Eval(format!("{} labels for images {:?}", n, images.shape())));
    }
    let mut params = init_network(arch, seed)?;
    let mut rng = rng::stream(seed, rng::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = batch.max(1);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let x = images.gather_rows(chunk)?;
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let t = one_hot(&ys, arch.num_classes)?;
            let tape = Tape::new();
            let pvars = params.bind(&tape, true);
            let xv = tape.constant(x);
            let z = params.logits_on(&tape, &pvars, xv)?;
            let tv = tape.constant(t);
            let loss = tape.softmax_cross_entropy(z, tv)?;
            let grads = tape.backward(loss)?;
            for (p, &v) in params.tensors.iter_mut().zip(&pvars) {
                grads.store(v, p)?;
            }
            let mut refs: Vec<&mut Tensor> = params.tensors.iter_mut().collect();
            sgd_update(&mut refs, lr)?;
        }
    }
    Ok(params)
}

/// `P[y][a]` together with the cell counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAccuracy {
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

impl ConditionalAccuracy {
    /// Tallies predictions; every `(class, group)` cell must be populated.
    pub fn from_predictions(
        predictions: &[usize],
        targets: &[usize],
        protected: &[usize],
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if predictions.len() != targets.len() || targets.len() != protected.len() {
            return Err(Error::Eval("predictions, targets and groups differ in length".into()));
        }
        let mut counts = vec![vec![0usize; num_groups]; num_classes];
        let mut correct = vec![vec![0usize; num_groups]; num_classes];
        for ((&p, &y), &a) in predictions.iter().zip(targets).zip(protected) {
            if y >= num_classes || a >= num_groups {
                return Err(Error::Eval(format!("cell ({y}, {a}) outside the label space")));
            }
            counts[y][a] += 1;
            if p == y {
                correct[y][a] += 1;
            }
        }
        for (y, row) in counts.iter().enumerate() {
            if let Some(a) = row.iter().position(|&c| c == 0) {
                return Err(Error::Eval(format!(
                    "test cell (class {y}, group {a}) is empty; a balanced test set is required"
                )));
            }
        }
        let matrix = correct
            .iter()
            .zip(&counts)
            .map(|(c, n)| c.iter().zip(n).map(|(&c, &n)| c as f64 / n as f64).collect())
            .collect();
        Ok(Self { matrix, counts })
    }

    /// Overall accuracy in percent, weighting cells by their counts.
    pub fn accuracy(&self) -> f64 {
        let (mut hit, mut total) = (0.0, 0usize);
        for (p, n) in self.matrix.iter().flatten().zip(self.counts.iter().flatten()) {
            hit += p * *n as f64;
            total += n;
        }
        100.0 * hit / total as f64
    }
}

pub fn conditional_accuracy(params: &NetworkParams, test: &LabeledDataset) -> Result<ConditionalAccuracy> {
    let pred = params.predict(test.images(), 256)?;
    ConditionalAccuracy::from_predictions(
        &pred,
        test.targets(),
        test.protected(),
        test.num_classes(),
        test.num_groups(),
    )
}

/// `(DEO_M, DEO_A)` in percent.
pub fn deo(ca: &ConditionalAccuracy) -> Result<(f64, f64)> {
    let groups = ca.matrix.first().map_or(0, Vec::len);
    if groups < 2 {
        return Err(Error::Eval(format!("equalized odds needs at least 2 groups, got {groups}")));
    }
    let gaps: Vec<f64> = ca
        .matrix
        .iter()
        .map(|row| {
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .collect();
    let m = gaps.iter().cloned().fold(0.0, f64::max);
    let a = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok((100.0 * m, 100.0 * a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub deo_m: f64,
    pub deo_a: f64,
    pub matrix: ConditionalAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub deo_m: f64,
    pub deo_m_std: f64,
    pub deo_a: f64,
    pub deo_a_std: f64,
    /// Cell-wise mean of the per-seed matrices.
    pub matrix: Vec<Vec<f64>>,
    pub per_seed: Vec<SeedResult>,
    pub seeds: Vec<u64>,
    pub config: EvalConfig,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one classifier per seed on `(images, labels)` and scores it on
/// `test`. Means and sample standard deviations are over seeds.
pub fn evaluate(
    images: &Tensor,
    labels: &[usize],
    test: &LabeledDataset,
    config: &EvalConfig,
    seeds: &[u64],
) -> Result<FairnessReport> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::Eval("at least one evaluation seed is required".into()));
    }
    let arch = Arch::preset(&config.arch, test.image_shape(), test.num_classes())?;
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let params = train_classifier(images, labels, &arch, config.epochs, config.lr, config.batch, seed)?;
            let ca = conditional_accuracy(&params, test)?;
            let (deo_m, deo_a) = deo(&ca)?;
            Ok(SeedResult { seed, accuracy: ca.accuracy(), deo_m, deo_a, matrix: ca })
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&SeedResult) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
    let (accuracy, accuracy_std) = pick(|r| r.accuracy);
    let (deo_m, deo_m_std) = pick(|r| r.deo_m);
    let (deo_a, deo_a_std) = pick(|r| r.deo_a);
    let first = &per_seed[0].matrix.matrix;
    let matrix = (0..first.len())
        .map(|y| {
            (0..first[y].len())
                .map(|a| per_seed.iter().map(|r| r.matrix.matrix[y][a]).sum::<f64>() / per_seed.len() as f64)
                .collect()
        })
        .collect();
    Ok(FairnessReport {
        accuracy,
        accuracy_std,
        deo_m,
        deo_m_std,
        deo_a,
        deo_a_std,
        matrix,
        per_seed,
        seeds: seeds.to_vec(),
        config: config.clone(),
    })
}
