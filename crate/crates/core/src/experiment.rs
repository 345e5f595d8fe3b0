//! Experiment matrices: a grid of distillation settings, run cell by cell,
//! with artifacts that are enough to reproduce every row.
//!
//! Per cell the runner writes, into the output directory,
//!
//! - `<stem>.fdds`: the distilled set;
//! - `<stem>.manifest.json`: the exact dataset, distillation and evaluation
//!   settings with the loss trace and the resulting row;
//! - `<stem>.trace.csv`: `iteration,loss`;
//! - `<stem>.report.json`: the full fairness report;
//!
//! and finally `results.csv` with one row per cell in grid order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_balanced_test, build_training_set, corrupt_group_labels, default_palette, io, BiasMode, BiasSpec,
    LabeledDataset,
};
use crate::distill::{distill, DistillConfig, InitStrategy};
use crate::error::{Error, Result};
use crate::fairness::{evaluate, EvalConfig, FairnessReport};
use crate::matching::{DistanceKind, MatchSpec, Matcher, SyntheticSet, Weighting};

fn default_name() -> String {
    "glyph".into()
}

fn default_arch() -> String {
    "convnet".into()
}

fn default_group_batch() -> usize {
    64
}

/// The biased training set; `br` comes from the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub num_classes: usize,
    pub num_groups: usize,
    pub mode: BiasMode,
    pub resolution: (usize, usize),
    pub per_class_count: usize,
    #[serde(default)]
    pub minority_weights: Option<Vec<f64>>,
    /// Seed of glyph rendering and bias assignment.
    #[serde(default)]
    pub seed: u64,
    /// Fraction of group labels resampled before distillation.
    #[serde(default)]
    pub label_noise: f64,
}

impl DatasetConfig {
    pub fn bias_spec(&self, br: f64) -> BiasSpec {
        BiasSpec {
            num_classes: self.num_classes,
            num_groups: self.num_groups,
            br,
            mode: self.mode,
            minority_weights: self.minority_weights.clone(),
            resolution: self.resolution,
            per_class_count: self.per_class_count,
        }
    }

    fn palette_size(&self) -> usize {
        match self.mode {
            BiasMode::Grayscale => 4,
            _ => self.num_groups,
        }
    }

    /// Training set at `br`, with label noise applied.
    pub fn training_set(&self, br: f64) -> Result<LabeledDataset> {
        let spec = self.bias_spec(br);
        let palette = default_palette(self.palette_size())?;
        let train = build_training_set(&spec, &palette, self.seed)?;
        if self.label_noise > 0.0 {
            corrupt_group_labels(&train, self.label_noise, self.seed)
        } else {
            Ok(train)
        }
    }

    /// The balanced test set (independent of `br`).
    pub fn test_set(&self) -> Result<LabeledDataset> {
        let spec = self.bias_spec(1.0);
        build_balanced_test(&spec, &default_palette(self.palette_size())?, self.seed)
    }
}

/// Cartesian grid; every combination is one cell and one output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub weighting: Vec<Weighting>,
    pub matcher: Vec<Matcher>,
    pub ipc: Vec<usize>,
    pub br: Vec<f64>,
    pub init: Vec<InitStrategy>,
    /// Distillation seeds.
    pub seeds: Vec<u64>,
}

/// Distillation settings shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    #[serde(default = "crate::distill::default_iterations")]
    pub iterations: usize,
    pub lr_pixels: f64,
    #[serde(default = "default_group_batch")]
    pub group_batch: usize,
    #[serde(default = "default_arch")]
    pub arch: String,
    /// Distance for distribution matching (default `mse`).
    #[serde(default = "DistillSettings::default_dm_distance")]
    pub dm_distance: DistanceKind,
    /// Distance for gradient matching (default `cosine`).
    #[serde(default = "DistillSettings::default_gm_distance")]
    pub gm_distance: DistanceKind,
}

impl DistillSettings {
    fn default_dm_distance() -> DistanceKind {
        DistanceKind::Mse
    }

    fn default_gm_distance() -> DistanceKind {
        DistanceKind::Cosine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(flatten)]
    pub classifier: EvalConfig,
    /// Classifier seeds; metrics are averaged over them.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub dataset: DatasetConfig,
    pub grid: Grid,
    pub distill: DistillSettings,
    pub eval: EvalSettings,
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub weighting: Weighting,
    pub matcher: Matcher,
    pub ipc: usize,
    pub br: f64,
    pub init: InitStrategy,
    pub seed: u64,
}

impl Cell {
    /// File stem shared by the cell's artifacts.
    pub fn stem(&self) -> String {
        format!(
            "cell{:03}_{}_{}_ipc{}_br{}_{}_s{}",
            self.index, self.matcher, self.weighting, self.ipc, self.br, self.init, self.seed
        )
    }
}

impl ExperimentMatrix {
    /// The desk-scale glyph setup: 5 classes, 4 colours, 16×16, 200 per
    /// class, BR 0.9, IPC 10, distribution matching, vanilla vs fairdd.
    pub fn glyph_default() -> Self {
        Self {
            dataset: DatasetConfig {
                name: default_name(),
                num_classes: 5,
                num_groups: 4,
                mode: BiasMode::Foreground,
                resolution: (16, 16),
                per_class_count: 200,
                minority_weights: None,
                seed: 0,
                label_noise: 0.0,
            },
            grid: Grid {
                weighting: vec![Weighting::VanillaRatio, Weighting::FairddUniform],
                matcher: vec![Matcher::Distribution],
                ipc: vec![10],
                br: vec![0.9],
                init: vec![InitStrategy::RandomReal],
                seeds: vec![0],
            },
            distill: DistillSettings {
                iterations: 200,
                lr_pixels: 5.0,
                group_batch: 32,
                arch: default_arch(),
                dm_distance: DistanceKind::Mse,
                gm_distance: DistanceKind::Cosine,
            },
            eval: EvalSettings { classifier: EvalConfig { lr: 0.05, ..EvalConfig::default() }, seeds: vec![0, 1, 2] },
        }
    }

    /// Checks every field; errors name the offending key as a JSON pointer.
    pub fn validate(&self) -> Result<()> {
        let bad = |ptr: &str, msg: String| Error::Config(format!("{ptr}: {msg}"));
        let g = &self.grid;
        for (key, len) in [
            ("weighting", g.weighting.len()),
            ("matcher", g.matcher.len()),
            ("ipc", g.ipc.len()),
            ("br", g.br.len()),
            ("init", g.init.len()),
            ("seeds", g.seeds.len()),
        ] {
            if len == 0 {
                return Err(bad(&format!("/grid/{key}"), "list must not be empty".into()));
            }
        }
        if let Some(i) = g.ipc.iter().position(|&v| v == 0) {
            return Err(bad(&format!("/grid/ipc/{i}"), "ipc must be at least 1".into()));
        }
        for (i, &br) in g.br.iter().enumerate() {
            self.dataset
                .bias_spec(br)
                .validate()
                .map_err(|e| bad(&format!("/grid/br/{i}"), strip(e)))?;
        }
        if !(0.0..=1.0).contains(&self.dataset.label_noise) {
            return Err(bad("/dataset/label_noise", "must lie in [0, 1]".into()));
        }
        if self.dataset.per_class_count % self.dataset.num_groups != 0 {
            return Err(bad(
                "/dataset/per_class_count",
                format!("must be divisible by {} groups for a balanced test set", self.dataset.num_groups),
            ));
        }
        let d = &self.distill;
        let probe = DistillConfig {
            ipc: 1,
            iterations: d.iterations,
            lr_pixels: d.lr_pixels,
            seed: 0,
            init: InitStrategy::Noise,
            matching: MatchSpec::dm(Weighting::FairddUniform),
            group_batch: d.group_batch,
            arch: d.arch.clone(),
        };
        probe.validate().map_err(|e| bad("/distill", strip(e)))?;
        self.eval.classifier.validate().map_err(|e| bad("/eval", strip(e)))?;
        if self.eval.seeds.is_empty() {
            return Err(bad("/eval/seeds", "list must not be empty".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &weighting in &g.weighting {
            for &matcher in &g.matcher {
                for &ipc in &g.ipc {
                    for &br in &g.br {
                        for &init in &g.init {
                            for &seed in &g.seeds {
                                out.push(Cell { index: out.len(), weighting, matcher, ipc, br, init, seed });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn distill_config(&self, cell: &Cell) -> DistillConfig {
        let distance = match cell.matcher {
            Matcher::Distribution => self.distill.dm_distance,
            Matcher::Gradient => self.distill.gm_distance,
        };
        DistillConfig {
            ipc: cell.ipc,
            iterations: self.distill.iterations,
            lr_pixels: self.distill.lr_pixels,
            seed: cell.seed,
            init: cell.init,
            matching: MatchSpec { matcher: cell.matcher, distance, weighting: cell.weighting },
            group_batch: self.distill.group_batch,
            arch: self.distill.arch.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Deserialises JSON; errors name the offending key as a JSON pointer.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(e.path());
        Error::Config(format!("{pointer}: {}", e.inner()))
    })
}

/// Parses and validates a matrix.
pub fn parse_config(text: &str) -> Result<ExperimentMatrix> {
    let matrix: ExperimentMatrix = parse_json(text)?;
    matrix.validate()?;
    Ok(matrix)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentMatrix> {
    parse_config(&fs::read_to_string(path)?)
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// One aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub matcher: Matcher,
    pub weighting: Weighting,
    pub ipc: usize,
    pub br: f64,
    pub init: InitStrategy,
    pub seed: u64,
    pub acc: f64,
    pub acc_std: f64,
    pub deo_m: f64,
    pub deo_m_std: f64,
    pub deo_a: f64,
    pub deo_a_std: f64,
}

pub const CSV_HEADER: &str = "dataset,matcher,weighting,ipc,br,init,seed,acc,acc_std,deo_m,deo_m_std,deo_a,deo_a_std";

impl ReportRow {
    pub fn new(dataset: &str, cell: &Cell, report: &FairnessReport) -> Self {
        Self {
            dataset: dataset.into(),
            matcher: cell.matcher,
            weighting: cell.weighting,
            ipc: cell.ipc,
            br: cell.br,
            init: cell.init,
            seed: cell.seed,
            acc: report.accuracy,
            acc_std: report.accuracy_std,
            deo_m: report.deo_m,
            deo_m_std: report.deo_m_std,
            deo_a: report.deo_a,
            deo_a_std: report.deo_a_std,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.dataset,
            self.matcher,
            self.weighting,
            self.ipc,
            self.br,
            self.init,
            self.seed,
            self.acc,
            self.acc_std,
            self.deo_m,
            self.deo_m_std,
            self.deo_a,
            self.deo_a_std
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return Err(Error::Format(format!("expected 13 CSV fields, got {}: `{line}`", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Format(format!("field {i} `{}` is not a number", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse().map_err(|_| Error::Format(format!("field {i} `{}` is not an integer", f[i])))
        };
        Ok(Self {
            dataset: f[0].into(),
            matcher: f[1].parse()?,
            weighting: f[2].parse()?,
            ipc: int(3)? as usize,
            br: num(4)?,
            init: f[5].parse()?,
            seed: int(6)?,
            acc: num(7)?,
            acc_std: num(8)?,
            deo_m: num(9)?,
            deo_m_std: num(10)?,
            deo_a: num(11)?,
            deo_a_std: num(12)?,
        })
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format("missing or unexpected CSV header".into())),
    }
    lines.map(ReportRow::from_csv).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub cell: Cell,
    pub dataset: DatasetConfig,
    pub bias: BiasSpec,
    pub distill: DistillConfig,
    pub eval: EvalSettings,
    pub trace: Vec<f64>,
    pub row: ReportRow,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub synthetic: SyntheticSet,
    pub trace: Vec<f64>,
    pub report: FairnessReport,
    pub row: ReportRow,
}

/// Distils and evaluates one cell, writing its artifacts when `out` is set.
pub fn run_cell(matrix: &ExperimentMatrix, cell: &Cell, out: Option<&Path>) -> Result<CellOutcome> {
    let train = matrix.dataset.training_set(cell.br)?;
    let test = matrix.dataset.test_set()?;
    let config = matrix.distill_config(cell);
    let result = distill(&config, &train)?;
    let report = evaluate(
        result.synthetic.pixels(),
        result.synthetic.labels(),
        &test,
        &matrix.eval.classifier,
        &matrix.eval.seeds,
    )?;
    let row = ReportRow::new(&matrix.dataset.name, cell, &report);
    if let Some(dir) = out {
        let stem = cell.stem();
        let file = |suffix: &str| dir.join(format!("{stem}.{suffix}"));
        io::write_fdds(file("fdds"), &result.synthetic.to_dataset()?)?;
        let manifest = CellManifest {
            cell: *cell,
            dataset: matrix.dataset.clone(),
            bias: matrix.dataset.bias_spec(cell.br),
            distill: config,
            eval: matrix.eval.clone(),
            trace: result.trace.clone(),
            row: row.clone(),
        };
        fs::write(file("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(file("trace.csv"), trace_csv(&result.trace))?;
        fs::write(file("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(CellOutcome { cell: *cell, synthetic: result.synthetic, trace: result.trace, report, row })
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

/// Runs every cell on up to `jobs` threads. Rows come back in grid order.
pub fn run_matrix(matrix: &ExperimentMatrix, out: Option<&Path>, jobs: usize) -> Result<Vec<ReportRow>> {
    matrix.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("matrix.json"), matrix.to_json()?)?;
    }
    let cells = matrix.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(matrix, c, out).map(|o| o.row))
            .collect::<Result<Vec<_>>>()
    })?;
    if let Some(dir) = out {
        fs::write(dir.join("results.csv"), rows_to_csv(&rows))?;
    }
    Ok(rows)
}

/// Renders rows as a text table plus a CSV of fairdd-minus-vanilla deltas for
/// every configuration that has both.
pub fn render_report(rows: &[ReportRow]) -> (String, String) {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<10} {:<3} {:<8} {:>4} {:>5} {:<11} {:>4} {:>15} {:>15} {:>15}",
        "dataset", "m", "weight", "ipc", "br", "init", "seed", "acc", "DEO_M", "DEO_A"
    );
    for r in rows {
        let _ = writeln!(
            text,
            "{:<10} {:<3} {:<8} {:>4} {:>5} {:<11} {:>4} {:>7.2} ± {:<5.2} {:>7.2} ± {:<5.2} {:>7.2} ± {:<5.2}",
            r.dataset,
            r.matcher.to_string(),
            r.weighting.to_string(),
            r.ipc,
            r.br,
            r.init.to_string(),
            r.seed,
            r.acc,
            r.acc_std,
            r.deo_m,
            r.deo_m_std,
            r.deo_a,
            r.deo_a_std
        );
    }
    let mut csv = String::from("dataset,matcher,ipc,br,init,seed,weighting,d_acc,d_deo_m,d_deo_a\n");
    let mut any = false;
    for base in rows.iter().filter(|r| r.weighting == Weighting::VanillaRatio) {
        for other in rows.iter().filter(|r| {
            r.weighting != Weighting::VanillaRatio
                && r.dataset == base.dataset
                && r.matcher == base.matcher
                && r.ipc == base.ipc
                && r.br == base.br
                && r.init == base.init
                && r.seed == base.seed
        }) {
            if !any {
                let _ = writeln!(text, "\ndeltas against vanilla:");
                any = true;
            }
            let (da, dm, dd) = (other.acc - base.acc, other.deo_m - base.deo_m, other.deo_a - base.deo_a);
            let _ = writeln!(
                text,
                "{:<10} {:<3} ipc {:>3} br {:>5} {:<11} seed {:>3} {:<8} acc {:+7.2}  DEO_M {:+7.2}  DEO_A {:+7.2}",
                base.dataset,
                base.matcher.to_string(),
                base.ipc,
                base.br,
                base.init.to_string(),
                base.seed,
                other.weighting.to_string(),
                da,
                dm,
                dd
            );
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{:.4},{:.4},{:.4}",
                base.dataset, base.matcher, base.ipc, base.br, base.init, base.seed, other.weighting, da, dm, dd
            );
        }
    }
    (text, csv)
}
