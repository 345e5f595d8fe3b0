//! Embedding-space oracles.
//!
//! The matching objectives are studied with the synthetic mean `m` as a free
//! vector, away from pixels and networks. For group means `μ_a` and ratios
//! `r_a`:
//!
//! - vanilla: `L(m) = D(Σ_a r_a μ_a, m)`, minimised at `Σ_a r_a μ_a` (for
//!   cosine: along that direction);
//! - fairdd: `L(m) = Σ_a D(μ_a, m)`, minimised for `mse` at the arithmetic
//!   mean of the `μ_a`.
//!
//! For fairdd with `mae` the minimiser is the coordinate-wise median, and
//! for cosine it is the direction of `Σ_a μ_a/‖μ_a‖`; the arithmetic mean is
//! only reported against those. All vector arithmetic here is local so the
//! oracle shares no code with the matching module.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::DistanceKind;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Fairdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointInstance {
    pub means: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
    pub distance: DistanceKind,
    pub variant: Variant,
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn sub(u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(a, b)| a - b).collect()
}

fn scaled(u: &[f64], c: f64) -> Vec<f64> {
    u.iter().map(|a| a * c).collect()
}

fn unit(u: &[f64]) -> Vec<f64> {
    scaled(u, 1.0 / norm(u))
}

pub fn l2(u: &[f64], v: &[f64]) -> f64 {
    norm(&sub(u, v))
}

pub fn cosine_gap(u: &[f64], v: &[f64]) -> f64 {
    1.0 - dot(u, v) / (norm(u) * norm(v))
}

fn dist(kind: DistanceKind, u: &[f64], m: &[f64]) -> f64 {
    match kind {
        DistanceKind::Mse => u.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum(),
        DistanceKind::Mae => u.iter().zip(m).map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64,
        DistanceKind::Cosine => cosine_gap(u, m),
    }
}

/// Gradient (subgradient for `mae`, with `sign(0) = 0`) of `D(u, ·)` at `m`.
fn dist_grad(kind: DistanceKind, u: &[f64], m: &[f64]) -> Vec<f64> {
    match kind {
        DistanceKind::Mse => m.iter().zip(u).map(|(b, a)| 2.0 * (b - a)).collect(),
        DistanceKind::Mae => {
            let d = u.len() as f64;
            m.iter()
                .zip(u)
                .map(|(b, a)| {
                    let s = b - a;
                    if s > 0.0 {
                        1.0 / d
                    } else if s < 0.0 {
                        -1.0 / d
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        DistanceKind::Cosine => {
            let (nu, nm) = (norm(u), norm(m));
            let c = dot(u, m) / (nu * nm);
            u.iter().zip(m).map(|(a, b)| -(a / (nu * nm) - c * b / (nm * nm))).collect()
        }
    }
}

impl FixedPointInstance {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.means.is_empty() || d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Verify("group means must be nonempty and share a dimension".into()));
        }
        if self.ratios.len() != self.means.len() || self.ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Verify("one positive ratio per group is required".into()));
        }
        if (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Verify("ratios must sum to 1".into()));
        }
        if self.distance == DistanceKind::Cosine && self.means.iter().any(|m| norm(m) == 0.0) {
            return Err(Error::Verify("cosine instances need nonzero means".into()));
        }
        Ok(())
    }

    /// `Σ_a r_a μ_a`.
    pub fn weighted_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (m, r) in self.means.iter().zip(&self.ratios) {
            out.iter_mut().zip(m).for_each(|(o, v)| *o += r * v);
        }
        out
    }

    /// `(1/|A|) Σ_a μ_a`.
    pub fn arithmetic_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for m in &self.means {
            out.iter_mut().zip(m).for_each(|(o, v)| *o += v);
        }
        scaled(&out, 1.0 / self.means.len() as f64)
    }

    /// The vanilla objective at `m`.
    pub fn vanilla_loss(&self, m: &[f64]) -> f64 {
        dist(self.distance, &self.weighted_mean(), m)
    }

    /// The fairdd objective at `m`.
    pub fn fairdd_loss(&self, m: &[f64]) -> f64 {
        self.means.iter().map(|mu| dist(self.distance, mu, m)).sum()
    }

    pub fn loss(&self, m: &[f64]) -> f64 {
        match self.variant {
            Variant::Vanilla => self.vanilla_loss(m),
            Variant::Fairdd => self.fairdd_loss(m),
        }
    }

    fn grad(&self, m: &[f64]) -> Vec<f64> {
        match self.variant {
            Variant::Vanilla => dist_grad(self.distance, &self.weighted_mean(), m),
            Variant::Fairdd => {
                let mut g = vec![0.0; m.len()];
                for mu in &self.means {
                    g.iter_mut().zip(dist_grad(self.distance, mu, m)).for_each(|(a, b)| *a += b);
                }
                g
            }
        }
    }

    /// Number of terms in the objective; step sizes are divided by it.
    fn terms(&self) -> f64 {
        match self.variant {
            Variant::Vanilla => 1.0,
            Variant::Fairdd => self.means.len() as f64,
        }
    }
}

/// The claimed optimum. `exact` is false where the claim does not hold in
/// general (fairdd with `mae` or cosine) and the point is only a prediction
/// to report against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub point: Vec<f64>,
    /// For cosine the point is a unit direction; any positive multiple is
    /// optimal.
    pub direction_only: bool,
    pub exact: bool,
}

pub fn predicted_optimum(inst: &FixedPointInstance) -> Prediction {
    let cosine = inst.distance == DistanceKind::Cosine;
    let point = match inst.variant {
        Variant::Vanilla => inst.weighted_mean(),
        Variant::Fairdd => inst.arithmetic_mean(),
    };
    let point = if cosine { unit(&point) } else { point };
    let exact = inst.variant == Variant::Vanilla || inst.distance == DistanceKind::Mse;
    Prediction { point, direction_only: cosine, exact }
}

/// Minimiser of the fairdd objective where it has a closed form: the mean for
/// `mse`, the coordinate-wise (lower) median for `mae`, the direction of the
/// normalised sum for cosine.
pub fn true_fairdd_optimum(inst: &FixedPointInstance) -> Vec<f64> {
    match inst.distance {
        DistanceKind::Mse => inst.arithmetic_mean(),
        DistanceKind::Mae => (0..inst.dim())
            .map(|i| {
                let mut col: Vec<f64> = inst.means.iter().map(|m| m[i]).collect();
                col.sort_by(f64::total_cmp);
                col[(col.len() - 1) / 2]
            })
            .collect(),
        DistanceKind::Cosine => {
            let mut s = vec![0.0; inst.dim()];
            for m in &inst.means {
                s.iter_mut().zip(unit(m)).for_each(|(a, b)| *a += b);
            }
            unit(&s)
        }
    }
}

/// Descends on the free vector `m` until the step norm drops below `tol`.
///
/// `mse` uses gradient descent from the origin with step `lr / terms`;
/// `mae` uses sign descent with per-coordinate step sizes that start at `lr`,
/// grow by 1.2 while the sign persists and halve when it flips; cosine uses
/// gradient descent on the unit sphere from a seeded random start.
pub fn numerical_optimum(
    inst: &FixedPointInstance,
    lr: f64,
    tol: f64,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    inst.validate()?;
    let d = inst.dim();
    let mut tail: Vec<f64> = Vec::new();
    let remember = |s: f64, tail: &mut Vec<f64>| {
        tail.push(s);
        if tail.len() > 5 {
            tail.remove(0);
        }
    };
    match inst.distance {
        DistanceKind::Mse => {
            let mut m = vec![0.0; d];
            let eta = lr / inst.terms();
            for _ in 0..max_steps {
                let step = scaled(&inst.grad(&m), eta);
                m = sub(&m, &step);
                let s = norm(&step);
                remember(s, &mut tail);
                if s < tol {
                    return Ok(m);
                }
            }
        }
        DistanceKind::Mae => {
            let mut m = vec![0.0; d];
            let mut steps = vec![lr; d];
            let mut prev = vec![0.0; d];
            for _ in 0..max_steps {
                let g = inst.grad(&m);
                let mut moved = 0.0f64;
                for i in 0..d {
                    let s = if g[i] > 0.0 {
                        1.0
                    } else if g[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    if s == 0.0 {
                        prev[i] = 0.0;
                        continue;
                    }
                    if s * prev[i] < 0.0 {
                        steps[i] *= 0.5;
                    } else if s * prev[i] > 0.0 {
                        steps[i] *= 1.2;
                    }
                    m[i] -= s * steps[i];
                    moved = moved.max(steps[i]);
                    prev[i] = s;
                }
                remember(moved, &mut tail);
                if moved < tol {
                    return Ok(m);
                }
            }
        }
        DistanceKind::Cosine => {
            let mut rng = rng::stream(seed, rng::VERIFY);
            let start: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut m = unit(&start);
            let eta = lr / inst.terms();
            for _ in 0..max_steps {
                let g = inst.grad(&m);
                let next = unit(&sub(&m, &scaled(&g, eta)));
                let s = l2(&next, &m);
                m = next;
                remember(s, &mut tail);
                if s < tol {
                    return Ok(m);
                }
            }
        }
    }
    Err(Error::Verify(format!(
        "no convergence within {max_steps} steps; last step norms {tail:?}"
    )))
}

/// `L_fairdd(m) − L_vanilla(m)` for a convex distance.
pub fn jensen_check(inst: &FixedPointInstance, m: &[f64]) -> Result<f64> {
    if inst.distance == DistanceKind::Cosine {
        return Err(Error::Verify("the upper bound needs a convex distance (mse or mae)".into()));
    }
    inst.validate()?;
    if m.len() != inst.dim() {
        return Err(Error::Verify(format!("m has {} coordinates, expected {}", m.len(), inst.dim())));
    }
    Ok(inst.fairdd_loss(m) - inst.vanilla_loss(m))
}

/// Random instance with `dim ∈ [1, max_dim]`, `groups ∈ [2, max_groups]`,
/// standard normal means and positive ratios summing to one.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    distance: DistanceKind,
    variant: Variant,
    max_dim: usize,
    max_groups: usize,
) -> FixedPointInstance {
    // the unit sphere in one dimension is two points, so cosine needs d ≥ 2
    let lo = if distance == DistanceKind::Cosine { 2 } else { 1 };
    let d = rng.gen_range(lo..=max_dim.max(lo));
    let a = rng.gen_range(2..=max_groups.max(2));
    random_instance_of(rng, distance, variant, d, a)
}

pub fn random_instance_of(
    rng: &mut ChaCha8Rng,
    distance: DistanceKind,
    variant: Variant,
    d: usize,
    a: usize,
) -> FixedPointInstance {
    let means = (0..a).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let raw: Vec<f64> = (0..a).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut ratios: Vec<f64> = raw.iter().map(|r| r / total).collect();
    // put the rounding residue on the last ratio
    let head: f64 = ratios[..a - 1].iter().sum();
    ratios[a - 1] = 1.0 - head;
    FixedPointInstance { means, ratios, distance, variant }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimStatus {
    Pass,
    Fail,
    /// Measured and reported; the claim is not expected to hold in general.
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub claim: String,
    pub status: ClaimStatus,
    pub max_deviation: f64,
    pub tolerance: Option<f64>,
    pub instances: usize,
    /// Seed of the instance with the largest deviation.
    pub worst_seed: u64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub base_seed: u64,
    pub instances: usize,
    pub claims: Vec<ClaimResult>,
}

impl VerificationSummary {
    pub fn all_passed(&self) -> bool {
        self.claims.iter().all(|c| c.status != ClaimStatus::Fail)
    }

    pub fn claim(&self, name: &str) -> Option<&ClaimResult> {
        self.claims.iter().find(|c| c.claim == name)
    }
}

struct Tracker {
    worst: f64,
    seed: u64,
}

impl Tracker {
    fn new() -> Self {
        Self { worst: 0.0, seed: 0 }
    }

    fn see(&mut self, dev: f64, seed: u64) {
        // NaN counts as the worst possible deviation
        if !(dev <= self.worst) {
            self.worst = dev;
            self.seed = seed;
        }
    }

    fn finish(self, claim: &str, tol: Option<f64>, instances: usize, note: &str) -> ClaimResult {
        let status = match tol {
            Some(t) if self.worst <= t => ClaimStatus::Pass,
            Some(_) => ClaimStatus::Fail,
            None => ClaimStatus::Reported,
        };
        ClaimResult {
            claim: claim.into(),
            status,
            max_deviation: self.worst,
            tolerance: tol,
            instances,
            worst_seed: self.seed,
            note: note.into(),
        }
    }
}

const LR: f64 = 0.25;
const TOL: f64 = 1e-11;
const MAX_STEPS: usize = 200_000;

fn instance_rng(base: u64, claim: u64, i: usize) -> (u64, ChaCha8Rng) {
    let seed = base.wrapping_add(i as u64);
    (seed, rng::stream(seed.wrapping_mul(31).wrapping_add(claim), rng::VERIFY))
}

fn converge(inst: &FixedPointInstance, seed: u64) -> Option<Vec<f64>> {
    numerical_optimum(inst, LR, TOL, MAX_STEPS, seed).ok()
}

/// Runs every claim on `instances` random instances (`jensen` on twice as
/// many) with dimension ≤ 32 and ≤ 10 groups.
pub fn run_verification(instances: usize, base_seed: u64) -> VerificationSummary {
    use DistanceKind::*;
    use Variant::*;
    let mut claims = Vec::new();

    for (name, kind) in [("vanilla_mse_fixed_point", Mse), ("vanilla_mae_fixed_point", Mae)] {
        let mut t = Tracker::new();
        for i in 0..instances {
            let (seed, mut rng) = instance_rng(base_seed, kind as u64, i);
            let inst = random_instance(&mut rng, kind, Vanilla, 32, 10);
            let dev = converge(&inst, seed).map_or(f64::INFINITY, |m| l2(&m, &predicted_optimum(&inst).point));
            t.see(dev, seed);
        }
        claims.push(t.finish(name, Some(1e-5), instances, "L2 distance to the ratio-weighted mean"));
    }

    let (mut dir, mut scale) = (Tracker::new(), Tracker::new());
    for i in 0..instances {
        let (seed, mut rng) = instance_rng(base_seed, 10, i);
        let inst = random_instance(&mut rng, Cosine, Vanilla, 32, 10);
        match converge(&inst, seed) {
            Some(m) => {
                let c = inst.weighted_mean();
                dir.see(cosine_gap(&m, &c), seed);
                // λ = ‖m‖ / ‖Σ r μ‖ must turn the weighted mean into m
                let lambda = norm(&m) / norm(&c);
                scale.see(l2(&m, &scaled(&c, lambda)) / norm(&m), seed);
            }
            None => {
                dir.see(f64::INFINITY, seed);
                scale.see(f64::INFINITY, seed);
            }
        }
    }
    claims.push(dir.finish("vanilla_cosine_direction", Some(1e-4), instances, "cosine distance to Σ r μ"));
    claims.push(scale.finish(
        "vanilla_cosine_scale",
        Some(1e-4),
        instances,
        "relative residual of m = λ Σ r μ with λ = ‖m‖/‖Σ r μ‖",
    ));

    let mut t = Tracker::new();
    for i in 0..instances {
        let (seed, mut rng) = instance_rng(base_seed, 20, i);
        let inst = random_instance(&mut rng, Mse, Fairdd, 32, 10);
        let dev = converge(&inst, seed).map_or(f64::INFINITY, |m| l2(&m, &inst.arithmetic_mean()));
        t.see(dev, seed);
    }
    claims.push(t.finish("fairdd_mse_fixed_point", Some(1e-5), instances, "L2 distance to the arithmetic mean"));

    let mut t = Tracker::new();
    for i in 0..instances {
        let (seed, mut rng) = instance_rng(base_seed, 30, i);
        let d = rng.gen_range(1..=32);
        let inst = random_instance_of(&mut rng, Mae, Fairdd, d, 2);
        let dev = converge(&inst, seed)
            .map_or(f64::INFINITY, |m| (inst.loss(&inst.arithmetic_mean()) - inst.loss(&m)).max(0.0));
        t.see(dev, seed);
    }
    claims.push(t.finish(
        "fairdd_mae_two_groups_mean_attains_minimum",
        Some(1e-9),
        instances,
        "loss(mean) − loss(numerical optimum)",
    ));

    let (mut gap, mut dev_t) = (Tracker::new(), Tracker::new());
    let mut median = Tracker::new();
    for i in 0..instances {
        let (seed, mut rng) = instance_rng(base_seed, 40, i);
        let d = rng.gen_range(1..=32);
        let a = rng.gen_range(3..=10);
        let inst = random_instance_of(&mut rng, Mae, Fairdd, d, a);
        match converge(&inst, seed) {
            Some(m) => {
                gap.see(inst.loss(&inst.arithmetic_mean()) - inst.loss(&m), seed);
                dev_t.see(l2(&m, &inst.arithmetic_mean()), seed);
                let truth = true_fairdd_optimum(&inst);
                median.see((inst.loss(&m) - inst.loss(&truth)).abs(), seed);
            }
            None => {
                gap.see(f64::INFINITY, seed);
                median.see(f64::INFINITY, seed);
            }
        }
    }
    claims.push(gap.finish(
        "fairdd_mae_general_mean_loss_gap",
        None,
        instances,
        "loss(mean) − loss(numerical optimum) with 3..=10 groups; the minimiser is the coordinate-wise median",
    ));
    claims.push(dev_t.finish(
        "fairdd_mae_general_mean_distance",
        None,
        instances,
        "L2 distance between the numerical optimum and the arithmetic mean",
    ));
    claims.push(median.finish(
        "fairdd_mae_median_attains_minimum",
        Some(1e-9),
        instances,
        "|loss(median) − loss(numerical optimum)|",
    ));

    let (mut mean_dir, mut sum_dir) = (Tracker::new(), Tracker::new());
    for i in 0..instances {
        let (seed, mut rng) = instance_rng(base_seed, 50, i);
        // when the unit means nearly cancel every direction is close to optimal
        let inst = loop {
            let inst = random_instance(&mut rng, Cosine, Fairdd, 32, 10);
            let mut s = vec![0.0; inst.dim()];
            for m in &inst.means {
                s.iter_mut().zip(unit(m)).for_each(|(a, b)| *a += b);
            }
            if norm(&s) > 0.1 {
                break inst;
            }
        };
        match converge(&inst, seed) {
            Some(m) => {
                mean_dir.see(cosine_gap(&m, &inst.arithmetic_mean()), seed);
                sum_dir.see(cosine_gap(&m, &true_fairdd_optimum(&inst)), seed);
            }
            None => {
                mean_dir.see(f64::INFINITY, seed);
                sum_dir.see(f64::INFINITY, seed);
            }
        }
    }
    claims.push(mean_dir.finish(
        "fairdd_cosine_mean_direction",
        None,
        instances,
        "cosine distance between the numerical optimum and the arithmetic mean",
    ));
    claims.push(sum_dir.finish(
        "fairdd_cosine_normalized_sum_direction",
        Some(1e-4),
        instances,
        "cosine distance between the numerical optimum and Σ μ/‖μ‖",
    ));

    for (name, kind, claim) in [("jensen_bound_mse", Mse, 60u64), ("jensen_bound_mae", Mae, 70)] {
        let mut t = Tracker::new();
        for i in 0..2 * instances {
            let (seed, mut rng) = instance_rng(base_seed, claim, i);
            let inst = random_instance(&mut rng, kind, Vanilla, 32, 10);
            let m: Vec<f64> = (0..inst.dim()).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let margin = jensen_check(&inst, &m).unwrap_or(f64::NEG_INFINITY);
            t.see((-margin).max(0.0), seed);
        }
        claims.push(t.finish(name, Some(1e-9), 2 * instances, "max(0, L_vanilla − L_fairdd) at random m"));
    }

    let mut t = Tracker::new();
    for i in 0..instances {
        let (seed, mut rng) = instance_rng(base_seed, 80, i);
        let mut inst = random_instance(&mut rng, Mse, Fairdd, 32, 9);
        let j = rng.gen_range(0..inst.means.len());
        let a = inst.means.len() as f64;
        let expected: Vec<f64> = inst
            .arithmetic_mean()
            .iter()
            .zip(&inst.means[j])
            .map(|(mean, mu)| (mean * a + mu) / (a + 1.0))
            .collect();
        inst.means.push(inst.means[j].clone());
        inst.ratios = vec![1.0 / (a + 1.0); inst.means.len()];
        let head: f64 = inst.ratios[..inst.means.len() - 1].iter().sum();
        *inst.ratios.last_mut().expect("nonempty") = 1.0 - head;
        let dev = converge(&inst, seed).map_or(f64::INFINITY, |m| l2(&m, &expected));
        t.see(dev, seed);
    }
    claims.push(t.finish(
        "fairdd_duplicate_group_tracks_mean",
        Some(1e-5),
        instances,
        "L2 distance to (Σ μ + μ_j)/(|A| + 1) after duplicating group j",
    ));

    VerificationSummary { base_seed, instances, claims }
}
