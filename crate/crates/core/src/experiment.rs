//! Variants, architecture presets, single runs and seed sweeps.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ActivationKind;
use crate::data::presets::Preset;
use crate::data::{Dataset, Dims, EvalView, Split};
use crate::error::{Result, SdcError};
use crate::fcam::{AttentionMode, FcamConfig, FcamModel, NetworkSpec, Nonlinearity};
use crate::metrics::{self, EvalRecord};
use crate::par::{self, Execution};
use crate::report::{Report, ReportRow, RowMetrics, SeedCell};
use crate::training::{self, TrainConfig, TrainOutcome};

/// Entropy weight used by `ER` variants unless overridden.
pub const DEFAULT_ER_LAMBDA: f64 = 0.003;

/// Hidden width of the multilayer presets.
pub const HIDDEN_WIDTH: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// Softmax attention.
    Sm,
    /// Softmax attention with the entropy regularizer.
    Er,
    SpMax,
    /// Spherical softmax.
    Ssm,
    /// Hard attention.
    Ha,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Sm, Algorithm::Er, Algorithm::SpMax, Algorithm::Ssm, Algorithm::Ha];

    pub fn code(self) -> &'static str {
        match self {
            Algorithm::Sm => "SM",
            Algorithm::Er => "ER",
            Algorithm::SpMax => "SpMax",
            Algorithm::Ssm => "SSM",
            Algorithm::Ha => "HA",
        }
    }

    pub fn mechanism(self) -> &'static str {
        match self {
            Algorithm::Sm => "softmax",
            Algorithm::Er => "entropy_reg",
            Algorithm::SpMax => "sparsemax",
            Algorithm::Ssm => "spherical_softmax",
            Algorithm::Ha => "hard_attention",
        }
    }

    pub fn activation(self) -> ActivationKind {
        match self {
            Algorithm::Sm | Algorithm::Er => ActivationKind::Softmax,
            Algorithm::SpMax => ActivationKind::Sparsemax,
            Algorithm::Ssm => ActivationKind::SphericalSoftmax,
            Algorithm::Ha => ActivationKind::Hard,
        }
    }

    pub fn mode(self) -> AttentionMode {
        match self {
            Algorithm::Ha => AttentionMode::Hard,
            _ => AttentionMode::Soft,
        }
    }
}

/// An algorithm at an averaging layer, written `SM-0`, `SpMax-2`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub algorithm: Algorithm,
    pub averaging_layer: usize,
}

impl Variant {
    pub fn new(algorithm: Algorithm, averaging_layer: usize) -> Self {
        Variant {
            algorithm,
            averaging_layer,
        }
    }

    /// The ten benchmark variants: every algorithm at layers 0 and 2.
    pub fn benchmark() -> Vec<Variant> {
        [0, 2]
            .into_iter()
            .flat_map(|l| Algorithm::ALL.into_iter().map(move |a| Variant::new(a, l)))
            .collect()
    }

    pub fn parse_list(text: &str) -> Result<Vec<Variant>> {
        let variants: Vec<Variant> = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if variants.is_empty() {
            return Err(SdcError::Config("variant list is empty".into()));
        }
        Ok(variants)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.algorithm.code(), self.averaging_layer)
    }
}

impl FromStr for Variant {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || {
            SdcError::Config(format!(
                "unknown variant {s:?}; expected <SM|ER|SpMax|SSM|HA>-<layer>, e.g. SM-0"
            ))
        };
        let (code, layer) = s.rsplit_once('-').ok_or_else(unknown)?;
        let algorithm = Algorithm::ALL
            .into_iter()
            .find(|a| a.code().eq_ignore_ascii_case(code))
            .ok_or_else(unknown)?;
        let averaging_layer = layer.parse().map_err(|_| unknown())?;
        Ok(Variant::new(algorithm, averaging_layer))
    }
}

/// Network shapes for the focus and classification networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Focus `d -> 50 -> 50 -> 1`, classifier `d' -> 50 -> k`, ReLU.
    Mlp,
    /// Linear focus and linear classifier.
    Linear,
    /// Linear focus, classifier `d -> 50 -> k` with ReLU.
    LinearMlp,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Mlp, Architecture::Linear, Architecture::LinearMlp];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::Linear => "linear",
            Architecture::LinearMlp => "linear-mlp",
        }
    }

    pub fn fcam_config(self, variant: Variant, dims: Dims) -> Result<FcamConfig> {
        let relu = Nonlinearity::Relu;
        let focus = match self {
            Architecture::Mlp => NetworkSpec::new(vec![dims.d, HIDDEN_WIDTH, HIDDEN_WIDTH, 1], relu),
            Architecture::Linear | Architecture::LinearMlp => NetworkSpec::linear(dims.d, 1),
        };
        if variant.averaging_layer > focus.hidden_layers() {
            return Err(SdcError::Config(format!(
                "variant {variant} averages at layer {} but the {} focus network has {} hidden layers",
                variant.averaging_layer,
                self.name(),
                focus.hidden_layers()
            )));
        }
        let width = focus.widths[variant.averaging_layer];
        let classify = match self {
            Architecture::Linear => NetworkSpec::linear(width, dims.k),
            Architecture::Mlp | Architecture::LinearMlp => NetworkSpec::new(vec![width, HIDDEN_WIDTH, dims.k], relu),
        };
        let config = FcamConfig {
            focus,
            classify,
            activation: variant.algorithm.activation(),
            averaging_layer: variant.averaging_layer,
            mode: variant.algorithm.mode(),
        };
        config.validate()?;
        Ok(config)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            SdcError::Config(format!("unknown architecture {s:?}; expected mlp, linear or linear-mlp"))
        })
    }
}

/// Architecture and training defaults tied to a dataset preset.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetDefaults {
    pub architecture: Architecture,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: Option<usize>,
}

pub fn preset_defaults(preset: Preset) -> PresetDefaults {
    match preset {
        Preset::SynthAppendixD => PresetDefaults {
            architecture: Architecture::Mlp,
            epochs: 200,
            learning_rate: training::DEFAULT_LEARNING_RATE,
            batch_size: Some(training::DEFAULT_BATCH_SIZE),
        },
        Preset::ErrorMode1 | Preset::ErrorMode2 | Preset::ErrorMode3 => PresetDefaults {
            architecture: if preset == Preset::ErrorMode3 {
                Architecture::LinearMlp
            } else {
                Architecture::Linear
            },
            epochs: 500,
            learning_rate: 0.003,
            batch_size: None,
        },
    }
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub architecture: Architecture,
    /// Shuffling seed and learning settings. `lambda` applies to `ER` only.
    pub train: TrainConfig,
    /// Seeds parameter initialization and minibatch order.
    pub seed: u64,
}

impl RunSpec {
    /// Training settings with the variant's regularizer weight and seed.
    pub fn effective_train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: if self.variant.algorithm == Algorithm::Er {
                self.train.lambda
            } else {
                0.0
            },
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub model: FcamModel,
    pub outcome: TrainOutcome,
    pub row: ReportRow,
    /// Fraction of evaluated instances with foreground weight above each
    /// point of [`metrics::default_threshold_grid`].
    pub threshold: Vec<f64>,
}

/// The split used for evaluation: the test split, or all instances when
/// the dataset has no test split.
pub fn evaluation_view(dataset: &Dataset) -> EvalView<'_> {
    if dataset.header().test_len() > 0 {
        dataset.eval_view(Split::Test)
    } else {
        dataset.eval_view(Split::All)
    }
}

pub fn report_row(variant: Variant, seed: u64, records: &[EvalRecord]) -> Result<ReportRow> {
    let s = metrics::mean_sparsity(records)?;
    Ok(ReportRow {
        algorithm: variant.to_string(),
        averaging_layer: variant.averaging_layer,
        attention_mechanism: variant.algorithm.mechanism().to_string(),
        seed: SeedCell::Seed(seed),
        metrics: Some(RowMetrics {
            accuracy: 100.0 * metrics::accuracy(records)?,
            ft: 100.0 * metrics::ft(records)?,
            nnz: s.nnz,
            dist: s.dist,
            ent: s.ent,
        }),
    })
}

/// Initializes a model from `spec.seed` and trains it on the training split.
pub fn run(dataset: &Dataset, spec: &RunSpec) -> Result<RunResult> {
    let config = spec.architecture.fcam_config(spec.variant, dataset.dims())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    init_rng.set_stream(1);
    let mut model = FcamModel::new(config, &mut init_rng)?;
    let train_config = spec.effective_train_config();
    let outcome = training::train(
        &mut model,
        dataset.training_view(Split::Train),
        evaluation_view(dataset),
        &train_config,
    )?;
    let row = report_row(spec.variant, spec.seed, &outcome.final_records)?;
    let threshold = metrics::threshold_curve(&outcome.final_records, &metrics::default_threshold_grid())?;
    Ok(RunResult {
        spec: spec.clone(),
        model,
        outcome,
        row,
        threshold,
    })
}

impl RunResult {
    /// Key-value run summary, including the count of classification
    /// network evaluations.
    pub fn summary(&self) -> String {
        let t = self.spec.effective_train_config();
        let o = &self.outcome;
        let mut out = String::new();
        let _ = writeln!(out, "variant={}", self.spec.variant);
        let _ = writeln!(out, "architecture={}", self.spec.architecture);
        let _ = writeln!(out, "seed={}", self.spec.seed);
        let _ = writeln!(out, "epochs={}", t.epochs);
        let _ = writeln!(out, "lr={}", t.learning_rate);
        let _ = writeln!(out, "lambda={}", t.lambda);
        let batch = t.batch_size.map_or("full".to_string(), |b| b.to_string());
        let _ = writeln!(out, "batch_size={batch}");
        let _ = writeln!(out, "steps={}", o.steps);
        let _ = writeln!(out, "instances_seen={}", o.instances_seen);
        let _ = writeln!(out, "classifier_evals={}", o.classifier_evals);
        let per = o.classifier_evals as f64 / o.instances_seen.max(1) as f64;
        let _ = writeln!(out, "classifier_evals_per_instance={per}");
        out
    }

    /// Writes `model/`, `dynamics.csv`, `metrics.csv`, `threshold.csv` and
    /// `run.txt` into `dir`.
    pub fn write_artifacts(&self, dir: &Path, extra_summary: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SdcError::io(dir, e))?;
        self.model.save_checkpoint(&dir.join("model"))?;
        self.outcome.log.save(&dir.join("dynamics.csv"))?;
        Report::from_seed_rows(vec![self.row.clone()]).save(&dir.join("metrics.csv"))?;
        let curve = threshold_csv(&[(self.spec.variant.to_string(), self.threshold.clone())]);
        write_text(&dir.join("threshold.csv"), &curve)?;
        write_text(&dir.join("run.txt"), &(self.summary() + extra_summary))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SdcError::io(path, e))
}

/// A variant name with its threshold curve.
pub type NamedCurve = (String, Vec<f64>);

/// `threshold,<name>...` table over the default grid.
pub fn threshold_csv(curves: &[NamedCurve]) -> String {
    let mut out = String::from("threshold");
    for (name, _) in curves {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (i, t) in metrics::default_threshold_grid().iter().enumerate() {
        let _ = write!(out, "{t}");
        for (_, c) in curves {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    out
}

/// Parses a table written by [`threshold_csv`].
pub fn parse_threshold_csv(text: &str) -> Result<(Vec<f64>, Vec<NamedCurve>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| SdcError::Schema("empty threshold table".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    if names.first() != Some(&"threshold") {
        return Err(SdcError::Schema(format!("bad threshold header {header:?}")));
    }
    let mut grid = Vec::new();
    let mut curves: Vec<(String, Vec<f64>)> = names[1..].iter().map(|n| (n.to_string(), Vec::new())).collect();
    for line in lines {
        let values: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| SdcError::Schema(format!("bad threshold row {line:?}")))?;
        if values.len() != names.len() {
            return Err(SdcError::Schema(format!("threshold row {line:?} has wrong width")));
        }
        grid.push(values[0]);
        for (c, v) in curves.iter_mut().zip(&values[1..]) {
            c.1.push(*v);
        }
    }
    Ok((grid, curves))
}

/// Variants crossed with seeds, run on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub architecture: Architecture,
    pub train: TrainConfig,
    /// Worker threads for concurrent runs.
    pub workers: usize,
}

impl SweepPlan {
    pub fn specs(&self) -> Vec<RunSpec> {
        self.variants
            .iter()
            .flat_map(|v| {
                self.seeds.iter().map(move |s| RunSpec {
                    variant: *v,
                    architecture: self.architecture,
                    train: self.train.clone(),
                    seed: *s,
                })
            })
            .collect()
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(SdcError::Config("sweep needs at least one seed".into()));
        }
        if self.variants.is_empty() {
            return Err(SdcError::Config("sweep needs at least one variant".into()));
        }
        self.train.validate()?;
        for v in &self.variants {
            self.architecture.fcam_config(*v, dims)?;
        }
        Ok(())
    }
}

pub struct SweepOutcome {
    pub report: Report,
    /// Per run, in plan order: the result or the error message.
    pub runs: Vec<std::result::Result<RunResult, String>>,
}

impl SweepOutcome {
    /// Mean threshold curve per variant over finished runs.
    pub fn mean_thresholds(&self, variants: &[Variant]) -> Vec<(String, Vec<f64>)> {
        variants
            .iter()
            .filter_map(|v| {
                let curves: Vec<&Vec<f64>> = self
                    .runs
                    .iter()
                    .filter_map(|r| r.as_ref().ok())
                    .filter(|r| r.spec.variant == *v)
                    .map(|r| &r.threshold)
                    .collect();
                let first = curves.first()?;
                let mean = (0..first.len())
                    .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
                    .collect();
                Some((v.to_string(), mean))
            })
            .collect()
    }
}

/// Runs every (variant, seed) pair on up to `plan.workers` threads. Runs
/// are independent, so rows do not depend on scheduling. A failed run
/// yields a marked row; the sweep itself only fails on an invalid plan.
/// `on_done` sees each finished run on its worker thread, e.g. to write
/// artifacts into a directory the run owns.
pub fn sweep<F>(dataset: &Dataset, plan: &SweepPlan, on_done: F) -> Result<SweepOutcome>
where
    F: Fn(&RunResult) -> Result<()> + Sync + Send,
{
    plan.validate(dataset.dims())?;
    let specs = plan.specs();
    let exec = if plan.workers > 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let runs = par::with_workers(plan.workers, || {
        par::map_slice(exec, &specs, |spec| {
            let spec = RunSpec {
                train: TrainConfig {
                    exec: Execution::Sequential,
                    ..spec.train.clone()
                },
                ..spec.clone()
            };
            run(dataset, &spec)
                .and_then(|r| on_done(&r).map(|_| r))
                .map_err(|e| format!("{} seed {}: {e}", spec.variant, spec.seed))
        })
    });
    let rows = specs
        .iter()
        .zip(&runs)
        .map(|(spec, r)| match r {
            Ok(result) => result.row.clone(),
            Err(_) => ReportRow {
                algorithm: spec.variant.to_string(),
                averaging_layer: spec.variant.averaging_layer,
                attention_mechanism: spec.variant.algorithm.mechanism().to_string(),
                seed: SeedCell::Seed(spec.seed),
                metrics: None,
            },
        })
        .collect();
    Ok(SweepOutcome {
        report: Report::from_seed_rows(rows),
        runs,
    })
}
