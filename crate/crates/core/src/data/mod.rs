//! Labeled image datasets with a protected attribute, and the procedures that
//! inject protected-attribute bias into them.
//!
//! A [`LabeledDataset`] stores images `[N, C, H, W]` in `[0, 1]` plus a class
//! label `y` and a group label `a` per example. Training sets are built by
//! rendering class glyphs ([`generate_glyph_dataset`]) and then painting each
//! class predominantly with one colour ([`apply_color_bias`]) or converting a
//! class-dependent share to grayscale ([`apply_grayscale_bias`]). Test sets
//! are balanced exactly across groups ([`build_balanced_test`]).

mod bias;
mod glyph;
pub mod io;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use bias::{
    apply_color_bias, apply_grayscale_bias, build_balanced_test, build_training_set,
    colorize_uniform, default_palette, grayscale_image, Rgb,
};

/// Images with class labels and protected-group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    targets: Vec<usize>,
    protected: Vec<usize>,
    num_classes: usize,
    num_groups: usize,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        targets: Vec<usize>,
        protected: Vec<usize>,
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Dataset(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if targets.len() != n || protected.len() != n {
            return Err(Error::Dataset(format!(
                "{n} images but {} targets and {} protected labels",
                targets.len(),
                protected.len()
            )));
        }
        if num_classes == 0 || num_groups == 0 {
            return Err(Error::Dataset("need at least one class and one group".into()));
        }
        if let Some(&y) = targets.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dataset(format!("target {y} outside [0, {num_classes})")));
        }
        if let Some(&a) = protected.iter().find(|&&a| a >= num_groups) {
            return Err(Error::Dataset(format!("group {a} outside [0, {num_groups})")));
        }
        let mut seen = vec![false; num_classes];
        targets.iter().for_each(|&y| seen[y] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Dataset(format!("class {missing} has no examples")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            targets,
            protected,
            num_classes,
            num_groups,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn protected(&self) -> &[usize] {
        &self.protected
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// `[C, H, W]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.targets[i] == class).collect()
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.gather_rows(indices)?;
        Self::new(
            images,
            indices.iter().map(|&i| self.targets[i]).collect(),
            indices.iter().map(|&i| self.protected[i]).collect(),
            self.num_classes,
            self.num_groups,
        )
    }

    pub fn with_protected(&self, protected: Vec<usize>, num_groups: usize) -> Result<Self> {
        Self::new(
            self.images.clone(),
            self.targets.clone(),
            protected,
            self.num_classes,
            num_groups,
        )
    }

    pub(crate) fn with_images(&self, images: Tensor, protected: Vec<usize>, num_groups: usize) -> Result<Self> {
        Self::new(images, self.targets.clone(), protected, self.num_classes, num_groups)
    }

    /// Appends another dataset with the same geometry and label spaces.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.image_shape() != other.image_shape()
            || self.num_classes != other.num_classes
            || self.num_groups != other.num_groups
        {
            return Err(Error::Dataset("cannot concatenate incompatible datasets".into()));
        }
        let images = Tensor::concat_rows(&[&self.images, &other.images])?;
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        let mut protected = self.protected.clone();
        protected.extend_from_slice(&other.protected);
        Self::new(images, targets, protected, self.num_classes, self.num_groups)
    }
}

/// How the protected attribute is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    #[serde(alias = "fg")]
    Foreground,
    #[serde(alias = "bg")]
    Background,
    #[serde(alias = "gray")]
    Grayscale,
}

impl std::str::FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fg" | "foreground" => Ok(Self::Foreground),
            "bg" | "background" => Ok(Self::Background),
            "gray" | "grayscale" => Ok(Self::Grayscale),
            other => Err(Error::Config(format!("unknown bias mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for BiasMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Foreground => "fg",
            Self::Background => "bg",
            Self::Grayscale => "gray",
        })
    }
}

/// Parameters of a biased dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub num_classes: usize,
    pub num_groups: usize,
    /// Share of each class taken by its majority group.
    pub br: f64,
    pub mode: BiasMode,
    /// Relative sizes of the minority groups, in rotation order after the
    /// majority group. Uniform when absent.
    #[serde(default)]
    pub minority_weights: Option<Vec<f64>>,
    pub resolution: (usize, usize),
    pub per_class_count: usize,
}

impl BiasSpec {
    /// Checks every field, including `br ∈ (1/|A|, 1]` when minorities exist.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.num_groups > 1 && !(self.br > 1.0 / self.num_groups as f64 && self.br <= 1.0) {
            return Err(Error::Config(format!(
                "br {} outside (1/{}, 1]",
                self.br, self.num_groups
            )));
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but admits the balanced edge
    /// `br = 1/|A|`.
    pub(crate) fn validate_loose(&self) -> Result<()> {
        self.validate_shape()?;
        let lo = 1.0 / self.num_groups as f64;
        if !(self.br >= lo - 1e-12 && self.br <= 1.0) {
            return Err(Error::Config(format!("br {} outside [1/{}, 1]", self.br, self.num_groups)));
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_groups == 0 {
            return Err(Error::Config("num_classes and num_groups must be positive".into()));
        }
        if self.per_class_count == 0 {
            return Err(Error::Config("per_class_count must be positive".into()));
        }
        if let Some(w) = &self.minority_weights {
            if w.len() + 1 != self.num_groups {
                return Err(Error::Config(format!(
                    "expected {} minority weights, got {}",
                    self.num_groups - 1,
                    w.len()
                )));
            }
            if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Config("minority weights must be positive".into()));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("minority weights sum to {total}, not 1")));
            }
        }
        if self.mode == BiasMode::Grayscale && self.num_groups != 2 {
            return Err(Error::Config("grayscale bias needs exactly 2 groups".into()));
        }
        Ok(())
    }

    /// Group weights of class `class`: majority `class mod |A|` first-class,
    /// remaining mass split over minorities in rotation order.
    pub(crate) fn group_weights(&self, majority: usize) -> Vec<f64> {
        let a = self.num_groups;
        let mut w = vec![0.0; a];
        w[majority] = self.br;
        for k in 1..a {
            let share = match &self.minority_weights {
                Some(mw) => mw[k - 1],
                None => 1.0 / (a - 1) as f64,
            };
            w[(majority + k) % a] = (1.0 - self.br) * share;
        }
        w
    }
}

/// Largest-remainder apportionment of `total` items over `weights`.
///
/// Quotas within 1e-9 of an integer are snapped first so exact shares (for
/// example `0.9 · 100`) never lose an item to rounding; ties in the remainder
/// go to the lower index.
///
/// ```
/// use fairdd::data::apportion;
/// let counts = apportion(100, &[0.9, 0.05, 0.05]);
/// assert_eq!(counts, vec![90, 5, 5]);
/// ```
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights
        .iter()
        .map(|w| {
            let q = total as f64 * w / sum;
            if (q - q.round()).abs() < 1e-9 {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lower indices first on ties
    order.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
        rj.partial_cmp(&ri).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-(class, group) index lists and sample ratios `r[y][a] = |T_y^a| / |T_y|`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    pub indices: Vec<Vec<Vec<usize>>>,
    pub ratios: Vec<Vec<f64>>,
}

impl GroupPartition {
    pub fn num_classes(&self) -> usize {
        self.indices.len()
    }

    pub fn num_groups(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    pub fn group(&self, class: usize, group: usize) -> &[usize] {
        &self.indices[class][group]
    }

    pub fn counts(&self) -> Vec<Vec<usize>> {
        self.indices
            .iter()
            .map(|row| row.iter().map(Vec::len).collect())
            .collect()
    }

    /// Largest group share per class.
    pub fn measured_bias_ratio(&self) -> Vec<f64> {
        self.ratios
            .iter()
            .map(|r| r.iter().cloned().fold(0.0, f64::max))
            .collect()
    }
}

pub fn partition_groups(ds: &LabeledDataset) -> GroupPartition {
    let (k, a) = (ds.num_classes(), ds.num_groups());
    let mut indices = vec![vec![Vec::new(); a]; k];
    for i in 0..ds.len() {
        indices[ds.targets()[i]][ds.protected()[i]].push(i);
    }
    let ratios = indices
        .iter()
        .map(|row| {
            let total: usize = row.iter().map(Vec::len).sum();
            row.iter()
                .map(|g| if total == 0 { 0.0 } else { g.len() as f64 / total as f64 })
                .collect()
        })
        .collect();
    GroupPartition { indices, ratios }
}

/// Renders `per_class_count` glyphs per class, grayscale `[N, 1, H, W]`, every
/// example in group 0.
pub fn generate_glyph_dataset(spec: &BiasSpec, seed: u64) -> Result<LabeledDataset> {
    let (h, w) = spec.resolution;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("resolution {h}x{w} is below 8x8")));
    }
    if spec.per_class_count < spec.num_groups {
        return Err(Error::Config(format!(
            "per_class_count {} cannot populate {} groups",
            spec.per_class_count, spec.num_groups
        )));
    }
    if spec.num_classes == 0 || spec.num_groups == 0 {
        return Err(Error::Config("num_classes and num_groups must be positive".into()));
    }
    let mut rng = rng::stream(seed, rng::GLYPH);
    let n = spec.num_classes * spec.per_class_count;
    let mut data = Vec::with_capacity(n * h * w);
    let mut targets = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        for _ in 0..spec.per_class_count {
            data.extend(glyph::render(class, h, w, &mut rng));
            targets.push(class);
        }
    }
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    LabeledDataset::new(images, targets, vec![0; n], spec.num_classes, spec.num_groups)
}

/// Resamples the group label of `⌊fraction · N⌋` uniformly chosen examples,
/// uniformly over all groups (a draw may coincide with the old label).
pub fn corrupt_group_labels(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let mut protected = ds.protected().to_vec();
    for (i, a) in corruption_plan(ds.len(), ds.num_groups(), fraction, seed) {
        protected[i] = a;
    }
    ds.with_protected(protected, ds.num_groups())
}

/// `(index, new label)` pairs drawn by [`corrupt_group_labels`].
fn corruption_plan(n: usize, groups: usize, fraction: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = rng::stream(seed, rng::CORRUPT);
    let count = (fraction * n as f64).floor() as usize;
    sample(&mut rng, n, count)
        .into_vec()
        .into_iter()
        .map(|i| (i, rng.gen_range(0..groups)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, groups: usize, per_class: usize) -> BiasSpec {
        BiasSpec {
            num_classes: classes,
            num_groups: groups,
            br: 0.9,
            mode: BiasMode::Foreground,
            minority_weights: None,
            resolution: (16, 16),
            per_class_count: per_class,
        }
    }

    fn toy(targets: Vec<usize>, protected: Vec<usize>, k: usize, a: usize) -> LabeledDataset {
        let n = targets.len();
        LabeledDataset::new(Tensor::zeros(&[n, 1, 2, 2]), targets, protected, k, a).unwrap()
    }

    #[test]
    fn glyph_dataset_contract() {
        let ds = generate_glyph_dataset(&spec(5, 4, 100), 7).unwrap();
        assert_eq!(ds.len(), 500);
        assert_eq!(ds.image_shape(), [1, 16, 16]);
        for c in 0..5 {
            assert_eq!(ds.class_indices(c).len(), 100);
        }
        let again = generate_glyph_dataset(&spec(5, 4, 100), 7).unwrap();
        assert_eq!(ds.images().data(), again.images().data());
    }

    #[test]
    fn glyph_seeds_change_jitter_not_labels() {
        let a = generate_glyph_dataset(&spec(3, 2, 20), 1).unwrap();
        let b = generate_glyph_dataset(&spec(3, 2, 20), 2).unwrap();
        assert_ne!(a.images().data(), b.images().data());
        let hist = |d: &LabeledDataset| (0..3).map(|c| d.class_indices(c).len()).collect::<Vec<_>>();
        assert_eq!(hist(&a), hist(&b));
    }

    #[test]
    fn glyph_rejects_underpopulated_groups() {
        assert!(generate_glyph_dataset(&spec(2, 4, 3), 0).is_err());
        let mut s = spec(2, 2, 4);
        s.resolution = (6, 16);
        assert!(generate_glyph_dataset(&s, 0).is_err());
    }

    #[test]
    fn apportionment_examples() {
        let mut w = vec![0.9];
        w.extend(std::iter::repeat(0.1 / 9.0).take(9));
        let c = apportion(100, &w);
        assert_eq!(c[0], 90);
        assert_eq!(c.iter().sum::<usize>(), 100);
        assert_eq!(c[1..].iter().filter(|&&v| v == 2).count(), 1);
        assert_eq!(c[1..].iter().filter(|&&v| v == 1).count(), 8);
        assert_eq!(apportion(10, &[0.25; 4]), vec![3, 3, 2, 2]);
        assert_eq!(apportion(0, &[1.0, 2.0]), vec![0, 0]);
    }

    #[test]
    fn partition_ratios() {
        let mut t = vec![0; 10];
        t.extend(vec![1; 10]);
        let mut p = vec![0; 9];
        p.push(1);
        p.extend(vec![0; 5]);
        p.extend(vec![1; 5]);
        let part = partition_groups(&toy(t, p, 2, 2));
        assert_eq!(part.ratios, vec![vec![0.9, 0.1], vec![0.5, 0.5]]);
        assert_eq!(part.counts(), vec![vec![9, 1], vec![5, 5]]);

        let single = partition_groups(&toy(vec![0, 1, 1], vec![0, 0, 0], 2, 1));
        assert_eq!(single.ratios, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn partition_covers_every_index_once() {
        let ds = toy(vec![0, 1, 2, 0, 1, 2, 2], vec![0, 1, 1, 0, 0, 1, 0], 3, 2);
        let part = partition_groups(&ds);
        let mut all: Vec<usize> = part.indices.iter().flatten().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        for r in &part.ratios {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corruption_counts() {
        let n = 1000;
        let ds = toy((0..n).map(|i| i % 4).collect(), vec![0; n], 4, 10);
        assert_eq!(corrupt_group_labels(&ds, 0.0, 3).unwrap(), ds);

        let noisy = corrupt_group_labels(&ds, 0.1, 3).unwrap();
        let plan = corruption_plan(n, 10, 0.1, 3);
        assert_eq!(plan.len(), 100);
        let touched: std::collections::HashSet<usize> = plan.iter().map(|p| p.0).collect();
        assert_eq!(touched.len(), 100);
        for i in 0..n {
            if noisy.protected()[i] != 0 {
                assert!(touched.contains(&i));
            }
        }
        assert_eq!(noisy.targets(), ds.targets());
    }

    #[test]
    fn full_corruption_is_uniform() {
        let n = 10_000;
        let groups = 5;
        let ds = toy((0..n).map(|i| i % 2).collect(), vec![0; n], 2, groups);
        let noisy = corrupt_group_labels(&ds, 1.0, 11).unwrap();
        let mut counts = vec![0usize; groups];
        noisy.protected().iter().for_each(|&a| counts[a] += 1);
        let expected = n as f64 / groups as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 18.47, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(5, 4, 100);
        assert!(s.validate().is_ok());
        s.br = 0.25;
        assert!(s.validate().is_err());
        assert!(s.validate_loose().is_ok());
        s.br = 1.01;
        assert!(s.validate().is_err());
        s.br = 0.9;
        s.minority_weights = Some(vec![0.5, 0.6, -0.1]);
        assert!(s.validate().is_err());
        s.minority_weights = Some(vec![0.2, 0.3, 0.5]);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn dataset_invariants_are_enforced() {
        let img = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(LabeledDataset::new(img.clone(), vec![0, 0], vec![0, 0], 2, 1).is_err());
        assert!(LabeledDataset::new(img.clone(), vec![0], vec![0], 1, 1).is_err());
        let bright = Tensor::full(&[1, 1, 2, 2], 1.5);
        assert!(LabeledDataset::new(bright, vec![0], vec![0], 1, 1).is_err());
    }
}
