use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sdc_core::data::presets::Preset;
use sdc_core::data::{load_dataset, make_dataset, save_dataset, Dataset};
use sdc_core::experiment::{
    self, preset_defaults, threshold_csv, Architecture, PresetDefaults, RunSpec, SweepPlan, Variant,
    DEFAULT_ER_LAMBDA,
};
use sdc_core::fcam::{AttentionMode, FcamModel};
use sdc_core::metrics;
use sdc_core::par::{self, Execution};
use sdc_core::plot::{self, PlotKind};
use sdc_core::report::Report;
use sdc_core::training::{DynamicsLog, TrainConfig};

use crate::config::{parse_seeds, ConfigFile};
use crate::{DataArgs, Failure, GenerateArgs, PlotArgs, ReportArgs, RunArgs, SweepArgs, TrainArgs, SEED_ENV};

type CmdResult<T = ()> = Result<T, Failure>;

/// Dynamics records per run when `log_every` is not given.
const DEFAULT_LOG_POINTS: usize = 50;

fn load_config(path: &Option<PathBuf>) -> CmdResult<ConfigFile> {
    path.as_deref().map_or(Ok(ConfigFile::default()), ConfigFile::load)
}

/// Flag value, else config value, else `None`.
fn pick<T: FromStr>(flag: Option<T>, cfg: &ConfigFile, key: &str) -> CmdResult<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.parsed(key),
    }
}

fn pick_string(flag: &Option<String>, cfg: &ConfigFile, key: &str) -> Option<String> {
    flag.clone().or_else(|| cfg.get(key).map(str::to_string))
}

fn env_seed() -> CmdResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={v:?} is not a seed"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(flag: Option<u64>, cfg: &ConfigFile) -> CmdResult<u64> {
    match pick(flag, cfg, "seed")? {
        Some(s) => Ok(s),
        None => Ok(env_seed()?.unwrap_or(0)),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn absolute(path: &Path) -> PathBuf {
    std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

pub fn generate(a: &GenerateArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let preset: Preset = pick_string(&a.preset, &cfg, "preset")
        .ok_or_else(|| Failure::usage(format!("generate needs --preset; available: {}", Preset::names().join(", "))))?
        .parse()?;
    let (default_n, default_fraction) = preset.default_size();
    let n = pick(a.n, &cfg, "n")?.unwrap_or(default_n);
    let test_fraction = pick(a.test_fraction, &cfg, "test_fraction")?.unwrap_or(default_fraction);
    let seed = seed_or_env(a.seed, &cfg)?;
    let out = pick(a.out.clone(), &cfg, "out")?.unwrap_or_else(|| PathBuf::from(format!("{}-s{seed}.sdc", preset.name())));
    let ds = make_dataset(&preset.config(), n, test_fraction, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_dataset(&ds, &out)?;
    let h = ds.header();
    println!(
        "wrote {}: preset={} d={} m={} k={} n={} train={} test={} seed={}",
        out.display(),
        preset.name(),
        h.d,
        h.m,
        h.k,
        h.n,
        h.train_len(),
        h.test_len(),
        h.seed
    );
    Ok(())
}

/// Where a dataset came from, recorded next to run artifacts.
struct LoadedData {
    dataset: Dataset,
    preset: Option<Preset>,
    path: Option<PathBuf>,
}

fn load_data(d: &DataArgs, cfg: &ConfigFile) -> CmdResult<LoadedData> {
    let preset = pick_string(&d.preset, cfg, "preset").map(|p| p.parse::<Preset>()).transpose()?;
    if let Some(path) = pick(d.dataset.clone(), cfg, "dataset")? {
        let dataset = load_dataset(&path).map_err(|e| match e {
            sdc_core::SdcError::Io { .. } => Failure::usage(e.to_string()),
            other => other.into(),
        })?;
        return Ok(LoadedData {
            dataset,
            preset,
            path: Some(absolute(&path)),
        });
    }
    let preset = preset.ok_or_else(|| {
        Failure::usage(format!(
            "need --dataset or --preset; available presets: {}",
            Preset::names().join(", ")
        ))
    })?;
    let (default_n, default_fraction) = preset.default_size();
    let n = pick(d.n, cfg, "n")?.unwrap_or(default_n);
    let test_fraction = pick(d.test_fraction, cfg, "test_fraction")?.unwrap_or(default_fraction);
    let seed = pick(d.data_seed, cfg, "data_seed")?.unwrap_or(0);
    Ok(LoadedData {
        dataset: make_dataset(&preset.config(), n, test_fraction, seed)?,
        preset: Some(preset),
        path: None,
    })
}

impl LoadedData {
    /// Path of the dataset file, writing a copy into `dir` if it was
    /// sampled on the fly.
    fn persist(&self, dir: &Path) -> CmdResult<PathBuf> {
        match &self.path {
            Some(p) => Ok(p.clone()),
            None => {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                let path = dir.join("dataset.sdc");
                save_dataset(&self.dataset, &path)?;
                Ok(absolute(&path))
            }
        }
    }
}

fn parse_batch(text: &str) -> CmdResult<Option<usize>> {
    if text == "full" {
        return Ok(None);
    }
    match text.parse::<usize>() {
        Ok(b) if b > 0 => Ok(Some(b)),
        _ => Err(Failure::usage(format!("batch size {text:?} is neither a positive integer nor `full`"))),
    }
}

fn train_settings(
    t: &TrainArgs,
    cfg: &ConfigFile,
    preset: Option<Preset>,
) -> CmdResult<(Architecture, TrainConfig)> {
    let defaults = preset.map(preset_defaults).unwrap_or(PresetDefaults {
        architecture: Architecture::Mlp,
        ..preset_defaults(Preset::SynthAppendixD)
    });
    let arch = match pick_string(&t.arch, cfg, "arch") {
        Some(a) => a.parse()?,
        None => defaults.architecture,
    };
    let epochs = pick(t.epochs, cfg, "epochs")?.unwrap_or(defaults.epochs);
    let batch_size = match pick_string(&t.batch_size, cfg, "batch_size") {
        Some(b) => parse_batch(&b)?,
        None => defaults.batch_size,
    };
    let config = TrainConfig {
        learning_rate: pick(t.lr, cfg, "lr")?.unwrap_or(defaults.learning_rate),
        lambda: pick(t.lambda, cfg, "lambda")?.unwrap_or(DEFAULT_ER_LAMBDA),
        batch_size,
        epochs,
        seed: 0,
        log_every: pick(t.log_every, cfg, "log_every")?.unwrap_or((epochs / DEFAULT_LOG_POINTS).max(1)),
        exec: Execution::Parallel,
    };
    config.validate()?;
    Ok((arch, config))
}

pub fn run(a: &RunArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let variant: Variant = pick_string(&a.variant, &cfg, "variant")
        .ok_or_else(|| Failure::usage("run needs --variant, e.g. --variant SM-0"))?
        .parse()?;
    let seed = seed_or_env(a.seed, &cfg)?;
    let data = load_data(&a.data, &cfg)?;
    let (architecture, train) = train_settings(&a.train, &cfg, data.preset)?;
    let spec = RunSpec {
        variant,
        architecture,
        train,
        seed,
    };
    let model_config = architecture.fcam_config(variant, data.dataset.dims())?;
    if a.sample_hard && model_config.mode != AttentionMode::Hard {
        return Err(Failure::usage(format!("--sample-hard needs a hard-attention variant, got {variant}")));
    }
    let out = pick(a.out.clone(), &cfg, "out")?.unwrap_or_else(|| PathBuf::from(format!("runs/{variant}-s{seed}")));
    let dataset_path = data.persist(&out)?;
    let result = experiment::run(&data.dataset, &spec)?;
    let mut extra = format!("dataset={}\n", dataset_path.display());
    if a.sample_hard {
        let view = experiment::evaluation_view(&data.dataset);
        let records = metrics::evaluate_sampled(&result.model, &view, seed, Execution::Parallel)?;
        let _ = writeln!(extra, "sampled_accuracy={}", 100.0 * metrics::accuracy(&records)?);
    }
    result.write_artifacts(&out, &extra)?;
    let csv = Report::from_seed_rows(vec![result.row.clone()]).to_csv();
    let mut lines = csv.lines();
    println!("{}", lines.next().unwrap_or_default());
    println!("{}", lines.next().unwrap_or_default());
    eprintln!(
        "wrote {} (classifier evaluations per training instance: {})",
        out.display(),
        result.outcome.classifier_evals as f64 / result.outcome.instances_seen.max(1) as f64
    );
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let variants = match pick_string(&a.variants, &cfg, "variants").or_else(|| cfg.get("variant").map(str::to_string)) {
        Some(list) => Variant::parse_list(&list)?,
        None => Variant::benchmark(),
    };
    let seeds = match pick_string(&a.seeds, &cfg, "seeds") {
        Some(s) => parse_seeds(&s)?,
        None => (0..5).collect(),
    };
    let workers = pick(a.workers, &cfg, "workers")?.unwrap_or_else(par::available_workers);
    if workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    let data = load_data(&a.data, &cfg)?;
    let (architecture, train) = train_settings(&a.train, &cfg, data.preset)?;
    let plan = SweepPlan {
        variants: variants.clone(),
        seeds,
        architecture,
        train,
        workers,
    };
    plan.validate(data.dataset.dims())?;
    let out = pick(a.out.clone(), &cfg, "out")?.unwrap_or_else(|| PathBuf::from("sweep"));
    let dataset_path = data.persist(&out)?;
    let extra = format!("dataset={}\n", dataset_path.display());
    let outcome = experiment::sweep(&data.dataset, &plan, |r| {
        let dir = out.join("runs").join(format!("{}-s{}", r.spec.variant, r.spec.seed));
        r.write_artifacts(&dir, &extra)?;
        eprintln!("finished {} seed {}", r.spec.variant, r.spec.seed);
        Ok(())
    })?;
    outcome.report.save(&out.join("report.csv"))?;
    write_file(&out.join("threshold.csv"), &threshold_csv(&outcome.mean_thresholds(&variants)))?;
    let mut plan_text = String::new();
    let _ = writeln!(plan_text, "variants={}", variants.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
    let _ = writeln!(plan_text, "seeds={}", plan.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    let _ = writeln!(plan_text, "architecture={architecture}");
    let _ = writeln!(plan_text, "workers={workers}");
    plan_text.push_str(&extra);
    write_file(&out.join("sweep.txt"), &plan_text)?;
    print!("{}", outcome.report.summary_table());
    let failures: Vec<&String> = outcome.runs.iter().filter_map(|r| r.as_ref().err()).collect();
    for f in &failures {
        eprintln!("failed: {f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{} of {} runs failed; partial report in {}",
            failures.len(),
            outcome.runs.len(),
            out.join("report.csv").display()
        )))
    }
}

/// `dataset=` entry of a run summary.
fn recorded_dataset(run_dir: &Path) -> CmdResult<PathBuf> {
    let path = run_dir.join("run.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .find_map(|l| l.strip_prefix("dataset="))
        .map(PathBuf::from)
        .ok_or_else(|| Failure::usage(format!("{} records no dataset; pass --dataset", path.display())))
}

fn plot_run(run_dir: &Path, kind: PlotKind, dataset: &Option<PathBuf>) -> CmdResult<String> {
    match kind {
        PlotKind::Dynamics => Ok(plot::dynamics(&DynamicsLog::load(&run_dir.join("dynamics.csv"))?)?),
        PlotKind::Threshold => threshold_svg(&run_dir.join("threshold.csv")),
        PlotKind::FocusHeatmap | PlotKind::DecisionBoundary => {
            let model = FcamModel::load_checkpoint(&run_dir.join("model"))?;
            let path = match dataset {
                Some(p) => p.clone(),
                None => recorded_dataset(run_dir)?,
            };
            let ds = load_dataset(&path)?;
            Ok(if kind == PlotKind::FocusHeatmap {
                plot::focus_heatmap(&model, &ds)?
            } else {
                plot::decision_boundary(&model, &ds)?
            })
        }
    }
}

fn threshold_svg(path: &Path) -> CmdResult<String> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (grid, curves) = experiment::parse_threshold_csv(&text)?;
    Ok(plot::threshold(&grid, &curves)?)
}

pub fn plot(a: &PlotArgs) -> CmdResult {
    if !a.dir.is_dir() {
        return Err(Failure::usage(format!("{} is not a run or sweep directory", a.dir.display())));
    }
    let requested = a.plot_kind.as_deref().map(PlotKind::from_str).transpose()?;
    let kinds: Vec<PlotKind> = requested.map_or(PlotKind::ALL.to_vec(), |k| vec![k]);
    let out = a.out.clone().unwrap_or_else(|| a.dir.join("plots"));
    let runs_dir = a.dir.join("runs");

    // (output name, run directory or None for the sweep-level threshold plot)
    let mut targets: Vec<(String, Option<PathBuf>, PlotKind)> = Vec::new();
    if runs_dir.is_dir() {
        let mut runs: Vec<PathBuf> = std::fs::read_dir(&runs_dir)
            .map_err(|e| io_err(&runs_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        runs.sort();
        for kind in &kinds {
            if *kind == PlotKind::Threshold {
                targets.push((format!("{kind}.svg"), None, *kind));
                continue;
            }
            for r in &runs {
                let name = r.file_name().and_then(|n| n.to_str()).unwrap_or("run");
                targets.push((format!("{name}-{kind}.svg"), Some(r.clone()), *kind));
            }
        }
    } else {
        for kind in &kinds {
            targets.push((format!("{kind}.svg"), Some(a.dir.clone()), *kind));
        }
    }

    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let mut written = 0;
    for (name, run_dir, kind) in targets {
        let svg = match &run_dir {
            Some(dir) => plot_run(dir, kind, &a.dataset),
            None => threshold_svg(&a.dir.join("threshold.csv")),
        };
        match svg {
            Ok(svg) => {
                write_file(&out.join(&name), &svg)?;
                written += 1;
            }
            // without an explicit kind, skip plots that do not apply
            Err(Failure::Usage(msg)) if requested.is_none() && kind.is_spatial() => {
                eprintln!("skipped {name}: {msg}");
            }
            Err(e) => return Err(e),
        }
    }
    println!("wrote {written} plot(s) to {}", out.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> CmdResult {
    let path = if a.path.is_dir() { a.path.join("report.csv") } else { a.path.clone() };
    let report = Report::load(&path).map_err(|e| match e {
        sdc_core::SdcError::Io { .. } => Failure::usage(e.to_string()),
        other => other.into(),
    })?;
    print!("{}", report.summary_table());
    let failed = report.failed_runs();
    if failed > 0 {
        println!("{failed} failed run(s)");
    }
    if let Some(out) = &a.out {
        Report::from_seed_rows(report.seed_rows().cloned().collect()).save(out)?;
    }
    let gap = report.mean_discrepancy();
    if gap > 1e-9 {
        return Err(Failure::runtime(format!("mean rows deviate from their seed rows by {gap:e}")));
    }
    Ok(())
}
