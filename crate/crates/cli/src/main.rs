use std::ffi::OsString;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fairdd::data::{
    apply_color_bias, apply_grayscale_bias, colorize_uniform, corrupt_group_labels, default_palette, io, BiasMode,
    LabeledDataset,
};
use fairdd::distill::{distill, DistillConfig, InitStrategy};
use fairdd::experiment::{
    load_config, parse_json, render_report, rows_from_csv, run_matrix, trace_csv, DatasetConfig, ExperimentMatrix,
};
use fairdd::fairness::{evaluate, EvalConfig, FairnessReport};
use fairdd::matching::{DistanceKind, MatchSpec, Matcher, SyntheticSet, Weighting};
use fairdd::verify::run_verification;
use fairdd::Error;

const SEED_ENV: &str = "FDD_SEED";

#[derive(Parser, Debug)]
#[command(name = "fairdd", version, about = "Fair dataset distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a biased glyph set (or colour an IDX set) and write FDDS.
    GenData(GenData),
    /// Distil an FDDS training set into a small synthetic set.
    Distill(Distill),
    /// Train classifiers on a set and score them on a balanced test set.
    Eval(Eval),
    /// Check the fixed-point and bound claims on random instances.
    Verify(Verify),
    /// Run an experiment grid and aggregate one CSV.
    Matrix(Matrix),
    /// Render a results CSV as a table with deltas against vanilla.
    Report(Report),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, default_value_t = 0.9)]
    br: f64,
    /// fg, bg or grayscale
    #[arg(long, default_value = "fg")]
    mode: BiasMode,
    /// Square side length in pixels.
    #[arg(long, default_value_t = 16)]
    res: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Comma-separated minority weights (|A| - 1 values summing to 1).
    #[arg(long, value_delimiter = ',')]
    minority_weights: Option<Vec<f64>>,
    /// Fraction of group labels to resample.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Write the balanced test set for the same settings instead.
    #[arg(long)]
    test: bool,
    /// Colour an IDX image file instead of rendering glyphs.
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    idx_labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Distill {
    /// Training set (FDDS).
    #[arg(long)]
    data: PathBuf,
    /// Distillation config JSON; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr_pixels: Option<f64>,
    #[arg(long)]
    init: Option<InitStrategy>,
    #[arg(long)]
    matcher: Option<Matcher>,
    #[arg(long)]
    distance: Option<DistanceKind>,
    #[arg(long)]
    weighting: Option<Weighting>,
    #[arg(long)]
    group_batch: Option<usize>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic set (FDDS); the manifest and trace go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    /// Set to train on (FDDS).
    #[arg(long)]
    train: PathBuf,
    /// Balanced test set (FDDS).
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    arch: Option<String>,
    /// Comma-separated classifier seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Report JSON; a CSV with the same stem is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Verify {
    #[arg(long, default_value_t = 500)]
    instances: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Matrix {
    /// Matrix config JSON (the glyph preset when absent).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the grid's distillation seeds with this one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Validate and print the materialised config without running.
    #[arg(long)]
    check: bool,
    #[arg(long, required_unless_present = "check")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Report {
    /// results.csv, or a matrix output directory holding one.
    #[arg(long)]
    results: PathBuf,
    /// Writes <out>.txt and <out>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code.
#[derive(Debug)]
enum Fail {
    Invalid(String),
    Runtime(String),
}

impl Fail {
    fn from_core(module: &str, e: Error) -> Self {
        let msg = format!("{module}: {e}");
        match e {
            Error::Config(_) | Error::Json(_) => Fail::Invalid(msg),
            Error::Io(ref io) if io.kind() == ErrorKind::NotFound => Fail::Invalid(msg),
            _ => Fail::Runtime(msg),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Fail::Invalid(_) => 1,
            Fail::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Fail::Invalid(m) | Fail::Runtime(m) => m,
        }
    }
}

type Outcome<T> = Result<T, Fail>;

fn core<T>(module: &str, r: fairdd::Result<T>) -> Outcome<T> {
    r.map_err(|e| Fail::from_core(module, e))
}

fn env_seed() -> Outcome<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Fail::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_data(module: &str, path: &Path) -> Outcome<LabeledDataset> {
    if !path.exists() {
        return Err(Fail::Invalid(format!("{module}: no such file {}", path.display())));
    }
    core(module, io::read_fdds(path))
}

fn write_json<T: Serialize>(module: &str, path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Fail::Runtime(format!("{module}: {e}")))?;
    fs::write(path, text).map_err(|e| Fail::Runtime(format!("{module}: writing {}: {e}", path.display())))
}

fn write_text(module: &str, path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Fail::Runtime(format!("{module}: writing {}: {e}", path.display())))
}

/// `a/b.fdds` -> `a/b.<ext>`
fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

#[derive(Serialize)]
struct GenManifest<'a> {
    dataset: &'a DatasetConfig,
    br: f64,
    split: &'static str,
    idx: Option<(&'a Path, &'a Path)>,
    len: usize,
}

fn gen_data(a: GenData) -> Outcome<()> {
    const M: &str = "gen-data";
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let cfg = DatasetConfig {
        name: "glyph".into(),
        num_classes: a.classes,
        num_groups: a.groups,
        mode: a.mode,
        resolution: (a.res, a.res),
        per_class_count: a.per_class,
        minority_weights: a.minority_weights.clone(),
        seed,
        label_noise: a.label_noise,
    };
    if !(0.0..=1.0).contains(&a.label_noise) {
        return Err(Fail::Invalid(format!("{M}: --label-noise must lie in [0, 1]")));
    }
    let ds = match (&a.idx_images, &a.idx_labels) {
        (Some(images), Some(labels)) => {
            for p in [images, labels] {
                if !p.exists() {
                    return Err(Fail::Invalid(format!("{M}: no such file {}", p.display())));
                }
            }
            let raw = core(M, io::read_idx_dataset(images, labels))?;
            let spec = fairdd::data::BiasSpec { num_classes: raw.num_classes(), ..cfg.bias_spec(a.br) };
            core(M, spec.validate())?;
            let ds = if a.mode == BiasMode::Grayscale {
                let colored = core(M, colorize_uniform(&raw, &core(M, default_palette(4))?, seed))?;
                core(M, apply_grayscale_bias(&colored, a.br, seed))?
            } else {
                core(M, apply_color_bias(&raw, &spec, &core(M, default_palette(a.groups))?, seed))?
            };
            if a.label_noise > 0.0 {
                core(M, corrupt_group_labels(&ds, a.label_noise, seed))?
            } else {
                ds
            }
        }
        _ if a.test => {
            core(M, cfg.bias_spec(a.br).validate())?;
            core(M, cfg.test_set())?
        }
        _ => {
            core(M, cfg.bias_spec(a.br).validate())?;
            core(M, cfg.training_set(a.br))?
        }
    };
    core(M, io::write_fdds(&a.out, &ds))?;
    let manifest = GenManifest {
        dataset: &cfg,
        br: a.br,
        split: if a.test { "test" } else { "train" },
        idx: a.idx_images.as_deref().zip(a.idx_labels.as_deref()),
        len: ds.len(),
    };
    write_json(M, &sibling(&a.out, "manifest.json"), &manifest)?;
    println!("wrote {} examples to {}", ds.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DistillManifest<'a> {
    data: &'a Path,
    data_len: usize,
    config: &'a DistillConfig,
    trace: &'a [f64],
}

fn distill_config(a: &Distill) -> Outcome<DistillConfig> {
    const M: &str = "distill";
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Fail::Invalid(format!("{M}: {}: {e}", path.display())))?;
            core(M, parse_json::<DistillConfig>(&text))?
        }
        None => DistillConfig {
            ipc: 10,
            iterations: 2000,
            lr_pixels: 5.0,
            seed: env_seed()?.unwrap_or(0),
            init: InitStrategy::RandomReal,
            matching: MatchSpec::dm(Weighting::FairddUniform),
            group_batch: 64,
            arch: "convnet".into(),
        },
    };
    if let Some(v) = a.ipc {
        cfg.ipc = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.lr_pixels {
        cfg.lr_pixels = v;
    }
    if let Some(v) = a.init {
        cfg.init = v;
    }
    if let Some(v) = a.matcher {
        cfg.matching.matcher = v;
        if a.distance.is_none() {
            cfg.matching.distance = match v {
                Matcher::Distribution => DistanceKind::Mse,
                Matcher::Gradient => DistanceKind::Cosine,
            };
        }
    }
    if let Some(v) = a.distance {
        cfg.matching.distance = v;
    }
    if let Some(v) = a.weighting {
        cfg.matching.weighting = v;
    }
    if let Some(v) = a.group_batch {
        cfg.group_batch = v;
    }
    if let Some(v) = &a.arch {
        cfg.arch = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    core(M, cfg.validate())?;
    Ok(cfg)
}

fn run_distill(a: Distill) -> Outcome<()> {
    const M: &str = "distill";
    let cfg = distill_config(&a)?;
    let ds = read_data(M, &a.data)?;
    let out = core(M, distill(&cfg, &ds))?;
    core(M, io::write_fdds(&a.out, &core(M, out.synthetic.to_dataset())?))?;
    let manifest = DistillManifest { data: &a.data, data_len: ds.len(), config: &cfg, trace: &out.trace };
    write_json(M, &sibling(&a.out, "manifest.json"), &manifest)?;
    write_text(M, &sibling(&a.out, "trace.csv"), &trace_csv(&out.trace))?;
    println!(
        "distilled {} images per class in {} iterations; final loss {:.6}",
        cfg.ipc,
        cfg.iterations,
        out.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn report_csv(r: &FairnessReport) -> String {
    let mut s = String::from("seed,acc,deo_m,deo_a\n");
    for p in &r.per_seed {
        s.push_str(&format!("{},{:.4},{:.4},{:.4}\n", p.seed, p.accuracy, p.deo_m, p.deo_a));
    }
    s.push_str(&format!("mean,{:.4},{:.4},{:.4}\n", r.accuracy, r.deo_m, r.deo_a));
    s.push_str(&format!("std,{:.4},{:.4},{:.4}\n", r.accuracy_std, r.deo_m_std, r.deo_a_std));
    s
}

fn run_eval(a: Eval) -> Outcome<()> {
    const M: &str = "eval";
    let mut cfg = EvalConfig::default();
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = &a.arch {
        cfg.arch = v.clone();
    }
    core(M, cfg.validate())?;
    let seeds = match a.seeds {
        Some(s) if !s.is_empty() => s,
        _ => vec![env_seed()?.unwrap_or(0)],
    };
    let train = read_data(M, &a.train)?;
    let test = read_data(M, &a.test)?;
    let synthetic = core(M, SyntheticSet::from_dataset(&train))?;
    let report = core(M, evaluate(synthetic.pixels(), synthetic.labels(), &test, &cfg, &seeds))?;
    write_json(M, &a.out, &report)?;
    write_text(M, &sibling(&a.out, "csv"), &report_csv(&report))?;
    println!(
        "acc {:.2} ± {:.2}  DEO_M {:.2} ± {:.2}  DEO_A {:.2} ± {:.2}",
        report.accuracy, report.accuracy_std, report.deo_m, report.deo_m_std, report.deo_a, report.deo_a_std
    );
    Ok(())
}

fn run_verify(a: Verify) -> Outcome<()> {
    const M: &str = "verify";
    if a.instances == 0 {
        return Err(Fail::Invalid(format!("{M}: --instances must be positive")));
    }
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let summary = run_verification(a.instances, seed);
    match &a.out {
        Some(path) => write_json(M, path, &summary)?,
        None => println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Fail::Runtime(e.to_string()))?),
    }
    let failed: Vec<&str> = summary
        .claims
        .iter()
        .filter(|c| c.status == fairdd::verify::ClaimStatus::Fail)
        .map(|c| c.claim.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Runtime(format!("{M}: failed claims: {}", failed.join(", "))))
    }
}

fn run_matrix_cmd(a: Matrix) -> Outcome<()> {
    const M: &str = "matrix";
    let mut matrix = match &a.config {
        Some(path) => {
            if !path.exists() {
                return Err(Fail::Invalid(format!("{M}: no such file {}", path.display())));
            }
            core(M, load_config(path))?
        }
        None => {
            let mut m = ExperimentMatrix::glyph_default();
            if let Some(s) = env_seed()? {
                m.grid.seeds = vec![s];
            }
            m
        }
    };
    if let Some(s) = a.seed {
        matrix.grid.seeds = vec![s];
    }
    if let Some(it) = a.iterations {
        matrix.distill.iterations = it;
    }
    core(M, matrix.validate())?;
    if a.check {
        println!("{}", core(M, matrix.to_json())?);
        return Ok(());
    }
    let out = a.out.as_deref().expect("clap enforces --out without --check");
    let rows = core(M, run_matrix(&matrix, Some(out), a.jobs))?;
    let (text, _) = render_report(&rows);
    print!("{text}");
    Ok(())
}

fn run_report(a: Report) -> Outcome<()> {
    const M: &str = "report";
    let path = if a.results.is_dir() { a.results.join("results.csv") } else { a.results.clone() };
    let text = fs::read_to_string(&path).map_err(|e| Fail::Invalid(format!("{M}: {}: {e}", path.display())))?;
    let rows = core(M, rows_from_csv(&text))?;
    let (table, csv) = render_report(&rows);
    if let Some(out) = &a.out {
        write_text(M, &sibling(out, "txt"), &table)?;
        write_text(M, &sibling(out, "csv"), &csv)?;
    }
    print!("{table}");
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Distill(a) => run_distill(a),
        Command::Eval(a) => run_eval(a),
        Command::Verify(a) => run_verify(a),
        Command::Matrix(a) => run_matrix_cmd(a),
        Command::Report(a) => run_report(a),
    }
}

fn run<I: IntoIterator<Item = OsString>>(argv: I) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            match e.kind() {
                K::DisplayHelp | K::DisplayVersion => {
                    print!("{e}");
                    return 0;
                }
                K::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprintln!("error: missing subcommand; try --help");
                    return 1;
                }
                _ => {}
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message().replace('\n', "; "));
            f.code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
