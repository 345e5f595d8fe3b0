//! The outer loop: projected SGD on synthetic pixels.
//!
//! Every iteration samples fresh extractor parameters (seed `seed +
//! iteration`), draws per-group real batches, evaluates the matching loss,
//! takes one SGD step on the pixels and clamps them to `[0, 1]`.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{partition_groups, LabeledDataset};
use crate::error::{Error, Result};
use crate::matching::{matching_loss, MatchSpec, RealBatches, SyntheticSet};
use crate::models::{init_network, Arch};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{sgd_update, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Copies of uniformly drawn real images of the class.
    RandomReal,
    /// Standard normal pixels clamped to `[0, 1]`.
    Noise,
    /// Real or noise with probability ½ per synthetic slot.
    Hybrid,
}

impl std::fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RandomReal => "random_real",
            Self::Noise => "noise",
            Self::Hybrid => "hybrid",
        })
    }
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_real" | "real" => Ok(Self::RandomReal),
            "noise" => Ok(Self::Noise),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Config(format!("unknown init strategy `{other}`"))),
        }
    }
}

fn default_group_batch() -> usize {
    64
}

fn default_arch() -> String {
    "convnet".into()
}

pub(crate) fn default_iterations() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub ipc: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub lr_pixels: f64,
    /// Base seed: initialisation and batch streams, and `seed + t` for the
    /// extractor of iteration `t`.
    pub seed: u64,
    pub init: InitStrategy,
    #[serde(rename = "match")]
    pub matching: MatchSpec,
    #[serde(default = "default_group_batch")]
    pub group_batch: usize,
    /// Extractor preset name.
    #[serde(default = "default_arch")]
    pub arch: String,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 {
            return Err(Error::Config("ipc must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr_pixels > 0.0 && self.lr_pixels.is_finite()) {
            return Err(Error::Config(format!("lr_pixels {} must be positive", self.lr_pixels)));
        }
        if self.group_batch == 0 {
            return Err(Error::Config("group_batch must be at least 1".into()));
        }
        Arch::preset(&self.arch, [1, 8, 8], 2)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distilled {
    pub synthetic: SyntheticSet,
    pub trace: Vec<f64>,
}

/// Initial synthetic set with `ipc` images per class.
pub fn init_synthetic(strategy: InitStrategy, ipc: usize, ds: &LabeledDataset, seed: u64) -> Result<SyntheticSet> {
    if ipc == 0 {
        return Err(Error::Config("ipc must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, rng::INIT);
    let [c, h, w] = ds.image_shape();
    let len = c * h * w;
    let mut data = Vec::with_capacity(ds.num_classes() * ipc * len);
    for y in 0..ds.num_classes() {
        let idx = ds.class_indices(y);
        let needs_real = strategy != InitStrategy::Noise;
        if needs_real && idx.len() < ipc {
            return Err(Error::Dataset(format!(
                "class {y} has {} examples, fewer than ipc {ipc}",
                idx.len()
            )));
        }
        let picks: Vec<usize> = if needs_real {
            sample(&mut rng, idx.len(), ipc).into_iter().map(|j| idx[j]).collect()
        } else {
            Vec::new()
        };
        for slot in 0..ipc {
            let real = match strategy {
                InitStrategy::RandomReal => true,
                InitStrategy::Noise => false,
                InitStrategy::Hybrid => rng.gen_bool(0.5),
            };
            if real {
                let i = picks[slot];
                data.extend_from_slice(&ds.images().data()[i * len..(i + 1) * len]);
            } else {
                data.extend((0..len).map(|_| rng.sample::<f64, _>(StandardNormal).clamp(0.0, 1.0)));
            }
        }
    }
    let pixels = Tensor::new(vec![ds.num_classes() * ipc, c, h, w], data)?;
    SyntheticSet::new(pixels, ipc, ds.num_classes())
}

/// Runs the outer loop and returns the final set and the per-iteration loss.
pub fn distill(config: &DistillConfig, ds: &LabeledDataset) -> Result<Distilled> {
    config.validate()?;
    let part = partition_groups(ds);
    let arch = Arch::preset(&config.arch, ds.image_shape(), ds.num_classes())?;
    let mut synthetic = init_synthetic(config.init, config.ipc, ds, config.seed)?;
    let mut batch_rng = rng::stream(config.seed, rng::BATCH);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let at = |e: Error| Error::Distill { iteration: it, source: Box::new(e) };
        let mut step = || -> Result<f64> {
            let params = init_network(&arch, config.seed.wrapping_add(it as u64))?;
            let real = RealBatches::sample(ds, &part, config.group_batch, &mut batch_rng)?;
            let tape = Tape::new();
            let s = tape.leaf(synthetic.pixels());
            let loss = matching_loss(&tape, &config.matching, &params, &real, s, config.ipc)?;
            let value = tape.item(loss)?;
            let grads = tape.backward(loss)?;
            let pixels = synthetic.pixels_mut();
            grads.store(s, pixels)?;
            sgd_update(&mut [&mut *pixels], config.lr_pixels)?;
            pixels.clamp(0.0, 1.0);
            Ok(value)
        };
        trace.push(step().map_err(at)?);
    }
    Ok(Distilled { synthetic, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_training_set, default_palette, BiasMode, BiasSpec};
    use crate::matching::Weighting;

    fn spec(groups: usize, per_class: usize) -> BiasSpec {
        BiasSpec {
            num_classes: 3,
            num_groups: groups,
            br: 0.75,
            mode: BiasMode::Foreground,
            minority_weights: None,
            resolution: (8, 8),
            per_class_count: per_class,
        }
    }

    fn config(weighting: Weighting, iterations: usize) -> DistillConfig {
        DistillConfig {
            ipc: 2,
            iterations,
            lr_pixels: 0.5,
            seed: 3,
            init: InitStrategy::RandomReal,
            matching: MatchSpec::dm(weighting),
            group_batch: 64,
            arch: "convnet".into(),
        }
    }

    fn data() -> LabeledDataset {
        let s = spec(2, 12);
        build_training_set(&s, &default_palette(2).unwrap(), 1).unwrap()
    }

    #[test]
    fn random_real_copies_class_members() {
        let ds = data();
        let s = init_synthetic(InitStrategy::RandomReal, 3, &ds, 0).unwrap();
        let len = 3 * 64;
        for (slot, &y) in s.labels().iter().enumerate() {
            let img = &s.pixels().data()[slot * len..(slot + 1) * len];
            assert!(ds
                .class_indices(y)
                .iter()
                .any(|&i| &ds.images().data()[i * len..(i + 1) * len] == img));
        }
        assert!(init_synthetic(InitStrategy::RandomReal, 13, &ds, 0).is_err());
        assert!(init_synthetic(InitStrategy::Noise, 13, &ds, 0).is_ok());
    }

    #[test]
    fn noise_mean_matches_clamped_normal() {
        let s = spec(2, 60);
        let mut s = s;
        s.resolution = (16, 16);
        let ds = build_training_set(&s, &default_palette(2).unwrap(), 0).unwrap();
        let syn = init_synthetic(InitStrategy::Noise, 20, &ds, 4).unwrap();
        let d = syn.pixels().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        // E[clamp(Z, 0, 1)] = φ(0) − φ(1) + P(Z > 1)
        let phi = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = phi(0.0) - phi(1.0) + 0.158_655_253_931_457_05;
        assert!((0.3..=0.7).contains(&mean));
        assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn hybrid_is_deterministic_and_mixed() {
        let ds = data();
        let a = init_synthetic(InitStrategy::Hybrid, 6, &ds, 9).unwrap();
        let b = init_synthetic(InitStrategy::Hybrid, 6, &ds, 9).unwrap();
        assert_eq!(a, b);
        let len = 3 * 64;
        let is_real = |slot: usize| {
            let img = &a.pixels().data()[slot * len..(slot + 1) * len];
            (0..ds.len()).any(|i| &ds.images().data()[i * len..(i + 1) * len] == img)
        };
        let real = (0..18).filter(|&s| is_real(s)).count();
        assert!(real > 0 && real < 18, "{real}");
    }

    #[test]
    fn config_contract() {
        assert!(config(Weighting::FairddUniform, 0).validate().is_err());
        let mut c = config(Weighting::FairddUniform, 1);
        c.lr_pixels = 0.0;
        assert!(c.validate().is_err());
        c.lr_pixels = 1.0;
        c.arch = "vgg".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_iteration_contract() {
        let ds = data();
        let out = distill(&config(Weighting::FairddUniform, 1), &ds).unwrap();
        assert_eq!(out.trace.len(), 1);
        let init = init_synthetic(InitStrategy::RandomReal, 2, &ds, 3).unwrap();
        assert_eq!(out.synthetic.labels(), init.labels());
        assert_ne!(out.synthetic.pixels().data(), init.pixels().data());
        assert!(out.synthetic.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn runs_are_bit_identical() {
        let ds = data();
        let a = distill(&config(Weighting::VanillaRatio, 3), &ds).unwrap();
        let b = distill(&config(Weighting::VanillaRatio, 3), &ds).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_groups_give_identical_traces() {
        // one group: the two objectives coincide term by term
        let s = spec(1, 12);
        let ds = build_training_set(&BiasSpec { br: 1.0, ..s }, &default_palette(1).unwrap(), 2).unwrap();
        let v = distill(&config(Weighting::VanillaRatio, 4), &ds).unwrap();
        let f = distill(&config(Weighting::FairddUniform, 4), &ds).unwrap();
        assert_eq!(v.trace, f.trace);
        assert_eq!(v.synthetic, f.synthetic);
    }

    #[test]
    fn failures_carry_the_iteration() {
        let ds = data();
        let mut c = config(Weighting::FairddUniform, 2);
        c.matching.distance = crate::matching::DistanceKind::Cosine;
        c.init = InitStrategy::Noise;
        // an all-black synthetic image has a zero embedding; the cosine is undefined
        let black = LabeledDataset::new(
            Tensor::zeros(&[6, 3, 8, 8]),
            vec![0, 0, 1, 1, 2, 2],
            vec![0, 1, 0, 1, 0, 1],
            3,
            2,
        )
        .unwrap();
        let err = distill(&c, &black).unwrap_err();
        assert!(matches!(err, Error::Distill { iteration: 0, .. }), "{err}");
        assert!(distill(&c, &ds).is_ok());
    }
}
