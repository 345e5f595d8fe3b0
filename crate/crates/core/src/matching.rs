//! Matching objectives between real group statistics and a synthetic set.
//!
//! For class `y` with group signals `μ_a` (mean embeddings for distribution
//! matching, classification-loss gradients for gradient matching), group
//! ratios `r_a` and synthetic signal `m`:
//!
//! | weighting        | class term                               |
//! |------------------|------------------------------------------|
//! | `vanilla_ratio`  | `D(Σ_a r_a μ_a, m)`                      |
//! | `fairdd_uniform` | `Σ_a D(μ_a, m)`                          |
//! | `inverse_ratio`  | `Σ_a D(μ_a, m) / (|A_y| r_a)`            |
//!
//! where the sums run over the groups present in the class (`r_a > 0`) and
//! `|A_y|` counts them. The total loss sums the class terms.
//!
//! `D` is one of: `mse`, the *sum* of squared coordinate differences;
//! `mae`, the mean absolute difference; `cosine`, `1 − u·v/(‖u‖‖v‖)`.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{partition_groups, GroupPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::NetworkParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[serde(alias = "dm")]
    Distribution,
    #[serde(alias = "gm")]
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Mse,
    Mae,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[serde(alias = "vanilla")]
    VanillaRatio,
    #[serde(alias = "fairdd")]
    FairddUniform,
    #[serde(alias = "inverse")]
    InverseRatio,
}

macro_rules! names {
    ($ty:ty { $($variant:ident => $short:literal | $long:literal),+ $(,)? }) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(Self::$variant => $short),+ })
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($short | $long => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`",
                        stringify!($ty).to_lowercase()
                    ))),
                }
            }
        }
    };
}

names!(Matcher { Distribution => "dm" | "distribution", Gradient => "gm" | "gradient" });
names!(DistanceKind { Mse => "mse" | "squared", Mae => "mae" | "absolute", Cosine => "cosine" | "cos" });
names!(Weighting {
    VanillaRatio => "vanilla" | "vanilla_ratio",
    FairddUniform => "fairdd" | "fairdd_uniform",
    InverseRatio => "inverse" | "inverse_ratio",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub matcher: Matcher,
    pub distance: DistanceKind,
    pub weighting: Weighting,
}

impl MatchSpec {
    /// Distribution matching with the sum-of-squares distance.
    pub fn dm(weighting: Weighting) -> Self {
        Self { matcher: Matcher::Distribution, distance: DistanceKind::Mse, weighting }
    }

    /// Gradient matching with the layer-wise cosine distance.
    pub fn gm(weighting: Weighting) -> Self {
        Self { matcher: Matcher::Gradient, distance: DistanceKind::Cosine, weighting }
    }
}

/// Learnable images, `ipc` per class, stored class by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pixels: Tensor,
    labels: Vec<usize>,
    ipc: usize,
    num_classes: usize,
}

impl SyntheticSet {
    pub fn new(pixels: Tensor, ipc: usize, num_classes: usize) -> Result<Self> {
        if ipc == 0 || num_classes == 0 {
            return Err(Error::Config("ipc and num_classes must be positive".into()));
        }
        if pixels.ndim() != 4 || pixels.shape()[0] != ipc * num_classes {
            return Err(Error::Dataset(format!(
                "synthetic pixels {:?} do not hold {ipc} images for each of {num_classes} classes",
                pixels.shape()
            )));
        }
        let labels = (0..num_classes).flat_map(|y| std::iter::repeat(y).take(ipc)).collect();
        Ok(Self { pixels: pixels.with_requires_grad(true), labels, ipc, num_classes })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut Tensor {
        &mut self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.pixels.shape();
        [s[1], s[2], s[3]]
    }

    /// The set as a single-group labeled dataset (pixels must lie in `[0, 1]`).
    pub fn to_dataset(&self) -> Result<LabeledDataset> {
        let pixels = Tensor::new(self.pixels.shape().to_vec(), self.pixels.data().to_vec())?;
        LabeledDataset::new(pixels, self.labels.clone(), vec![0; self.labels.len()], self.num_classes, 1)
    }

    /// Inverse of [`to_dataset`](Self::to_dataset); the dataset must hold the
    /// same number of examples for every class, stored class by class.
    pub fn from_dataset(ds: &LabeledDataset) -> Result<Self> {
        let k = ds.num_classes();
        let ipc = ds.len() / k;
        let expected: Vec<usize> = (0..k).flat_map(|y| std::iter::repeat(y).take(ipc)).collect();
        if ds.targets() != expected.as_slice() {
            return Err(Error::Dataset("dataset is not a class-contiguous synthetic set".into()));
        }
        Self::new(ds.images().clone(), ipc, k)
    }
}

/// `D(u, v)` on plain vectors.
pub fn distance(kind: DistanceKind, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Matching(format!("distance over lengths {} and {}", u.len(), v.len())));
    }
    let pairs = u.iter().zip(v);
    Ok(match kind {
        DistanceKind::Mse => pairs.map(|(a, b)| (a - b) * (a - b)).sum(),
        DistanceKind::Mae => pairs.map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64,
        DistanceKind::Cosine => {
            let dot: f64 = pairs.map(|(a, b)| a * b).sum();
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::Matching("cosine distance of a zero-norm vector".into()));
            }
            1.0 - dot / (nu * nv)
        }
    })
}

/// `D(u, v)` recorded on a tape.
pub fn distance_on(tape: &Tape, kind: DistanceKind, u: Var, v: Var) -> Result<Var> {
    Ok(match kind {
        DistanceKind::Mse => {
            let n = tape.value(u).numel() as f64;
            let m = tape.mse(u, v)?;
            tape.scalar_mul(m, n)?
        }
        DistanceKind::Mae => tape.mae(u, v)?,
        DistanceKind::Cosine => tape.cosine_distance(u, v)?,
    })
}

/// One class term of the objective. `group_signals[a]` is `None` for groups
/// absent from the class, and `ratios[a]` must then be zero.
pub fn class_objective(
    tape: &Tape,
    kind: DistanceKind,
    weighting: Weighting,
    group_signals: &[Option<Var>],
    ratios: &[f64],
    m: Var,
) -> Result<Var> {
    let present: Vec<(Var, f64)> = group_signals
        .iter()
        .zip(ratios)
        .filter(|(_, &r)| r > 0.0)
        .map(|(s, &r)| s.map(|s| (s, r)).ok_or_else(|| Error::Matching("missing group signal".into())))
        .collect::<Result<_>>()?;
    if present.is_empty() {
        return Err(Error::Matching("class has no populated group".into()));
    }
    match weighting {
        Weighting::VanillaRatio => {
            let mut target: Option<Var> = None;
            for &(s, r) in &present {
                let term = tape.scalar_mul(s, r)?;
                target = Some(match target {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
            distance_on(tape, kind, target.expect("nonempty"), m)
        }
        Weighting::FairddUniform | Weighting::InverseRatio => {
            let count = present.len() as f64;
            let mut total: Option<Var> = None;
            for &(s, r) in &present {
                let mut term = distance_on(tape, kind, s, m)?;
                if weighting == Weighting::InverseRatio {
                    term = tape.scalar_mul(term, 1.0 / (count * r))?;
                }
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
            Ok(total.expect("nonempty"))
        }
    }
}

/// Per-(class, group) real minibatches plus the ratios of the full dataset.
#[derive(Debug, Clone)]
pub struct RealBatches {
    /// `batches[y][a]`, `None` when the group is empty in class `y`.
    pub batches: Vec<Vec<Option<Tensor>>>,
    pub ratios: Vec<Vec<f64>>,
}

impl RealBatches {
    /// At most `batch` examples per group, drawn without replacement; groups
    /// no larger than `batch` are used whole.
    pub fn sample(
        ds: &LabeledDataset,
        part: &GroupPartition,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut batches = Vec::with_capacity(part.num_classes());
        for row in &part.indices {
            let mut out = Vec::with_capacity(row.len());
            for idx in row {
                if idx.is_empty() {
                    out.push(None);
                    continue;
                }
                let chosen: Vec<usize> = if idx.len() <= batch {
                    idx.clone()
                } else {
                    sample(rng, idx.len(), batch).into_iter().map(|j| idx[j]).collect()
                };
                out.push(Some(ds.images().gather_rows(&chosen)?));
            }
            batches.push(out);
        }
        Ok(Self { batches, ratios: part.ratios.clone() })
    }

    /// Every example of every group.
    pub fn full(ds: &LabeledDataset) -> Result<Self> {
        let part = partition_groups(ds);
        let mut batches = Vec::new();
        for row in &part.indices {
            batches.push(
                row.iter()
                    .map(|idx| if idx.is_empty() { Ok(None) } else { ds.images().gather_rows(idx).map(Some) })
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            );
        }
        Ok(Self { batches, ratios: part.ratios })
    }

    fn num_classes(&self) -> usize {
        self.batches.len()
    }

    fn check(&self, y: usize) -> Result<()> {
        for (a, (b, &r)) in self.batches[y].iter().zip(&self.ratios[y]).enumerate() {
            if r > 0.0 && b.is_none() {
                return Err(Error::Matching(format!("empty real batch for class {y}, group {a}")));
            }
        }
        Ok(())
    }
}

fn check_synthetic(tape: &Tape, synth: Var, ipc: usize, classes: usize) -> Result<()> {
    let s = tape.shape(synth);
    if s.len() != 4 || s[0] != ipc * classes || ipc == 0 {
        return Err(Error::Matching(format!(
            "synthetic batch {s:?} does not hold {ipc} images for each of {classes} classes"
        )));
    }
    Ok(())
}

/// Mean embedding of every populated group, embedded without gradients in a
/// single forward per class.
fn group_means(params: &NetworkParams, batches: &[Option<Tensor>]) -> Result<Vec<Option<Tensor>>> {
    let present: Vec<&Tensor> = batches.iter().flatten().collect();
    if present.is_empty() {
        return Ok(vec![None; batches.len()]);
    }
    let all = params.embed(&Tensor::concat_rows(&present)?)?;
    let d = params.embed_dim;
    let mut start = 0;
    let mut out = Vec::with_capacity(batches.len());
    for b in batches {
        out.push(match b {
            None => None,
            Some(t) => {
                let n = t.shape()[0];
                let mut mean = vec![0.0; d];
                for row in all.data()[start * d..(start + n) * d].chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                start += n;
                Some(Tensor::vector(mean)?)
            }
        });
    }
    Ok(out)
}

/// Distribution-matching loss. `synth` holds `ipc` images per class, class by
/// class; only it receives gradients.
pub fn dm_loss(
    tape: &Tape,
    spec: &MatchSpec,
    params: &NetworkParams,
    real: &RealBatches,
    synth: Var,
    ipc: usize,
) -> Result<Var> {
    let k = real.num_classes();
    check_synthetic(tape, synth, ipc, k)?;
    let pvars = params.bind(tape, false);
    let emb = params.embed_on(tape, &pvars, synth)?;
    let mut total: Option<Var> = None;
    for y in 0..k {
        real.check(y)?;
        let means: Vec<Option<Var>> = group_means(params, &real.batches[y])?
            .into_iter()
            .map(|m| m.map(|t| tape.constant(t)))
            .collect();
        let rows = tape.rows(emb, y * ipc, ipc)?;
        let m = tape.mean_axis(rows, 0)?;
        let term = class_objective(tape, spec.distance, spec.weighting, &means, &real.ratios[y], m)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::Matching("no classes".into()))
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Matching(format!("label {y} outside [0, {k})")));
        }
        data[i * k + y] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), k], data)?)
}

/// `∂ CE / ∂θ` per parameter tensor, flattened, for a plain batch.
pub fn gradient_signal(params: &NetworkParams, batch: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
    if batch.ndim() != 4 || batch.shape()[0] != labels.len() {
        return Err(Error::Matching(format!(
            "batch {:?} does not align with {} labels",
            batch.shape(),
            labels.len()
        )));
    }
    let targets = one_hot(labels, params.arch.num_classes)?;
    let tape = Tape::new();
    let pvars = params.bind(&tape, true);
    let x = tape.constant(batch.clone());
    let z = params.logits_on(&tape, &pvars, x)?;
    let t = tape.constant(targets);
    let loss = tape.softmax_cross_entropy(z, t)?;
    let grads = tape.backward(loss)?;
    pvars
        .iter()
        .map(|&v| {
            let g = grads.get(v).ok_or_else(|| Error::Matching("missing parameter gradient".into()))?;
            Ok(Tensor::vector(g.data().to_vec())?)
        })
        .collect()
}

/// Differentiable counterpart of [`gradient_signal`]: the returned vectors
/// stay connected to `x` on `tape`. `pvars` must be trainable leaves.
pub fn gradient_signal_on(
    tape: &Tape,
    params: &NetworkParams,
    pvars: &[Var],
    x: Var,
    labels: &[usize],
) -> Result<Vec<Var>> {
    let targets = one_hot(labels, params.arch.num_classes)?;
    let z = params.logits_on(tape, pvars, x)?;
    let t = tape.constant(targets);
    let loss = tape.softmax_cross_entropy(z, t)?;
    let grads = tape.grad_graph(loss, pvars)?;
    grads
        .into_iter()
        .map(|g| {
            let n = tape.value(g).numel();
            Ok(tape.reshape(g, &[n])?)
        })
        .collect()
}

/// Gradient-matching loss at parameters `params`.
///
/// Vanilla weighting matches the ratio-weighted real gradient `Σ_a r_a g_a`,
/// the gradient of a class batch with the dataset's group proportions. Cosine
/// is applied per parameter tensor and summed; `mse`/`mae` use the
/// concatenated vector.
pub fn gm_loss(
    tape: &Tape,
    spec: &MatchSpec,
    params: &NetworkParams,
    real: &RealBatches,
    synth: Var,
    ipc: usize,
) -> Result<Var> {
    let k = real.num_classes();
    check_synthetic(tape, synth, ipc, k)?;
    let pvars = params.bind(tape, true);
    let mut total: Option<Var> = None;
    for y in 0..k {
        real.check(y)?;
        let xs = tape.rows(synth, y * ipc, ipc)?;
        let gs = gradient_signal_on(tape, params, &pvars, xs, &vec![y; ipc])?;
        let gr: Vec<Option<Vec<Tensor>>> = real.batches[y]
            .iter()
            .map(|b| b.as_ref().map(|b| gradient_signal(params, b, &vec![y; b.shape()[0]])).transpose())
            .collect::<Result<_>>()?;
        let ratios = &real.ratios[y];
        let term = match spec.distance {
            DistanceKind::Cosine => {
                let mut sum: Option<Var> = None;
                for (l, &gsl) in gs.iter().enumerate() {
                    let signals: Vec<Option<Var>> = gr
                        .iter()
                        .map(|g| g.as_ref().map(|g| tape.constant(g[l].clone())))
                        .collect();
                    let t = class_objective(tape, spec.distance, spec.weighting, &signals, ratios, gsl)?;
                    sum = Some(match sum {
                        None => t,
                        Some(s) => tape.add(s, t)?,
                    });
                }
                sum.expect("networks have parameters")
            }
            _ => {
                let flat_s = tape.concat(&gs)?;
                let signals: Vec<Option<Var>> = gr
                    .iter()
                    .map(|g| {
                        g.as_ref()
                            .map(|g| {
                                let data: Vec<f64> = g.iter().flat_map(|t| t.data().iter().copied()).collect();
                                Ok(tape.constant(Tensor::vector(data)?))
                            })
                            .transpose()
                    })
                    .collect::<Result<_>>()?;
                class_objective(tape, spec.distance, spec.weighting, &signals, ratios, flat_s)?
            }
        };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::Matching("no classes".into()))
}

/// Dispatches to [`dm_loss`] or [`gm_loss`].
pub fn matching_loss(
    tape: &Tape,
    spec: &MatchSpec,
    params: &NetworkParams,
    real: &RealBatches,
    synth: Var,
    ipc: usize,
) -> Result<Var> {
    match spec.matcher {
        Matcher::Distribution => dm_loss(tape, spec, params, real, synth, ipc),
        Matcher::Gradient => gm_loss(tape, spec, params, real, synth, ipc),
    }
}
