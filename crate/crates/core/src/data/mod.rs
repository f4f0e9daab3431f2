//! Mosaic instance generation and dataset management.
//!
//! A mosaic instance has `m` segments in `R^d`. One segment, at a hidden
//! index, is drawn from the class-conditional distribution of the label;
//! the rest come from the background distribution.

mod distribution;
mod io;
pub mod presets;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};
use crate::par::{self, Execution};

pub use distribution::{BaseDistributionSpec, Gaussian};
pub use io::{load_dataset, parse_dataset, save_dataset, write_dataset, DATASET_VERSION};

use distribution::{Pool, PoolDraws, PoolMode, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdcConfig {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub background: BaseDistributionSpec,
    pub foregrounds: Vec<BaseDistributionSpec>,
    /// Draw file-backed pools with replacement instead of exhausting them.
    #[serde(default)]
    pub with_replacement: bool,
}

impl SdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.m < 1 || self.k < 2 {
            return Err(SdcError::Config(format!(
                "need d >= 1, m >= 1, k >= 2; got d={}, m={}, k={}",
                self.d, self.m, self.k
            )));
        }
        if self.foregrounds.len() != self.k {
            return Err(SdcError::Config(format!(
                "expected {} foreground distributions, got {}",
                self.k,
                self.foregrounds.len()
            )));
        }
        self.background.validate(self.d)?;
        self.foregrounds.iter().try_for_each(|f| f.validate(self.d))
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d: self.d,
            m: self.m,
            k: self.k,
        }
    }
}

/// Segment dimension, segments per instance and class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
    pub k: usize,
}

/// One mosaic instance. The foreground index is only reachable through
/// [`EvalView`]; training code sees instances through [`TrainingView`].
#[derive(Clone, Debug, PartialEq)]
pub struct MosaicInstance {
    segments: Vec<f64>,
    d: usize,
    label: usize,
    fg_index: usize,
}

impl MosaicInstance {
    /// `segments` is segment-major: `m * d` values.
    pub fn new(segments: Vec<f64>, d: usize, label: usize, fg_index: usize) -> Result<Self> {
        if d == 0 || segments.is_empty() || !segments.len().is_multiple_of(d) {
            return Err(SdcError::Dimension {
                op: "mosaic instance",
                left: vec![segments.len()],
                right: vec![d],
            });
        }
        let m = segments.len() / d;
        if fg_index >= m {
            return Err(SdcError::Index {
                what: "segments",
                index: fg_index,
                len: m,
            });
        }
        Ok(MosaicInstance {
            segments,
            d,
            label,
            fg_index,
        })
    }

    pub fn segments(&self) -> &[f64] {
        &self.segments
    }

    pub fn segment(&self, j: usize) -> &[f64] {
        &self.segments[j * self.d..(j + 1) * self.d]
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len() / self.d
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn label(&self) -> usize {
        self.label
    }
}

/// Draws instances for one configuration. File pools are loaded once.
#[derive(Clone, Debug)]
pub struct MosaicSampler {
    dims: Dims,
    background: Source,
    foregrounds: Vec<Source>,
    pools: Vec<Pool>,
    with_replacement: bool,
}

impl MosaicSampler {
    pub fn new(config: &SdcConfig) -> Result<Self> {
        config.validate()?;
        let mut pools = Vec::new();
        let mut cache = HashMap::new();
        let background = Source::resolve(&config.background, config.d, &mut pools, &mut cache)?;
        let foregrounds = config
            .foregrounds
            .iter()
            .map(|f| Source::resolve(f, config.d, &mut pools, &mut cache))
            .collect::<Result<Vec<_>>>()?;
        Ok(MosaicSampler {
            dims: config.dims(),
            background,
            foregrounds,
            pools,
            with_replacement: config.with_replacement,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn uses_draw_order(&self) -> bool {
        !self.pools.is_empty() && !self.with_replacement
    }

    /// One instance in generation order: the foreground index, the label,
    /// background segments in index order, then the foreground segment.
    /// File pools are drawn with replacement here.
    pub fn sample_instance<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MosaicInstance> {
        self.sample_with(rng, &mut PoolMode::WithReplacement)
    }

    fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, mode: &mut PoolMode<'_>) -> Result<MosaicInstance> {
        let Dims { d, m, k } = self.dims;
        let fg_index = rng.random_range(0..m);
        let label = rng.random_range(0..k);
        let mut segments = vec![0.0; m * d];
        for i in (0..m).filter(|i| *i != fg_index) {
            self.background
                .sample_into(rng, &self.pools, mode, &mut segments[i * d..(i + 1) * d])?;
        }
        self.foregrounds[label].sample_into(
            rng,
            &self.pools,
            mode,
            &mut segments[fg_index * d..(fg_index + 1) * d],
        )?;
        Ok(MosaicInstance {
            segments,
            d,
            label,
            fg_index,
        })
    }
}

/// Convenience wrapper building a sampler for a single draw.
pub fn sample_instance<R: Rng + ?Sized>(config: &SdcConfig, rng: &mut R) -> Result<MosaicInstance> {
    MosaicSampler::new(config)?.sample_instance(rng)
}

/// Random stream for instance `index` of a dataset generated with `seed`.
pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Header fields of a dataset; also the JSON header of the file format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

impl DatasetHeader {
    pub fn dims(&self) -> Dims {
        Dims {
            d: self.d,
            m: self.m,
            k: self.k,
        }
    }

    /// `floor(n * test_fraction)`.
    pub fn test_len(&self) -> usize {
        (self.n as f64 * self.test_fraction).floor() as usize
    }

    pub fn train_len(&self) -> usize {
        self.n - self.test_len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Instances plus their train/test partition. The last
/// `floor(n * test_fraction)` instances form the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    instances: Vec<MosaicInstance>,
}

impl Dataset {
    pub fn from_parts(header: DatasetHeader, instances: Vec<MosaicInstance>) -> Result<Self> {
        if !(0.0..1.0).contains(&header.test_fraction) {
            return Err(SdcError::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                header.test_fraction
            )));
        }
        if instances.len() != header.n {
            return Err(SdcError::Schema(format!(
                "header says n = {} but {} instances are present",
                header.n,
                instances.len()
            )));
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.d != header.d || inst.num_segments() != header.m || inst.label >= header.k {
                return Err(SdcError::Schema(format!(
                    "instance {i} does not match header dims d={}, m={}, k={}",
                    header.d, header.m, header.k
                )));
            }
        }
        Ok(Dataset { header, instances })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn dims(&self) -> Dims {
        self.header.dims()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    fn range(&self, split: Split) -> std::ops::Range<usize> {
        let train = self.header.train_len();
        match split {
            Split::Train => 0..train,
            Split::Test => train..self.instances.len(),
            Split::All => 0..self.instances.len(),
        }
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        self.range(split)
    }

    pub fn training_view(&self, split: Split) -> TrainingView<'_> {
        TrainingView {
            dims: self.dims(),
            instances: &self.instances[self.range(split)],
        }
    }

    pub fn eval_view(&self, split: Split) -> EvalView<'_> {
        EvalView {
            dims: self.dims(),
            instances: &self.instances[self.range(split)],
        }
    }
}

/// Instances as training code may see them: segments and label only.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    dims: Dims,
    instances: &'a [MosaicInstance],
}

#[derive(Clone, Copy, Debug)]
pub struct TrainingSample<'a> {
    pub segments: &'a [f64],
    pub label: usize,
}

impl<'a> TrainingView<'a> {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, i: usize) -> TrainingSample<'a> {
        let inst = &self.instances[i];
        TrainingSample {
            segments: &inst.segments,
            label: inst.label,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = TrainingSample<'a>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Instances with the foreground index exposed, for evaluation only.
#[derive(Clone, Copy, Debug)]
pub struct EvalView<'a> {
    dims: Dims,
    instances: &'a [MosaicInstance],
}

#[derive(Clone, Copy, Debug)]
pub struct EvalSample<'a> {
    pub segments: &'a [f64],
    pub label: usize,
    pub fg_index: usize,
}

impl<'a> EvalView<'a> {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, i: usize) -> EvalSample<'a> {
        let inst = &self.instances[i];
        EvalSample {
            segments: &inst.segments,
            label: inst.label,
            fg_index: inst.fg_index,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = EvalSample<'a>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// The same instances without foreground indices.
    pub fn as_training(&self) -> TrainingView<'a> {
        TrainingView {
            dims: self.dims,
            instances: self.instances,
        }
    }
}

/// Generates `n` instances. Instance `i` draws from its own stream derived
/// from `(seed, i)`, so the result does not depend on `exec`.
pub fn make_dataset(config: &SdcConfig, n: usize, test_fraction: f64, seed: u64) -> Result<Dataset> {
    make_dataset_with(config, n, test_fraction, seed, Execution::Parallel)
}

pub fn make_dataset_with(
    config: &SdcConfig,
    n: usize,
    test_fraction: f64,
    seed: u64,
    exec: Execution,
) -> Result<Dataset> {
    if n < 1 {
        return Err(SdcError::Config("dataset needs at least one instance".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(SdcError::Config(format!(
            "test_fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let sampler = MosaicSampler::new(config)?;
    let instances = if sampler.uses_draw_order() {
        // without-replacement pools consume draws in instance order
        let mut draws = PoolDraws::new(&sampler.pools, seed);
        let mut mode = PoolMode::WithoutReplacement(&mut draws);
        (0..n)
            .map(|i| sampler.sample_with(&mut instance_rng(seed, i), &mut mode))
            .collect::<Result<Vec<_>>>()?
    } else {
        par::map_indexed(exec, n, |i| sampler.sample_instance(&mut instance_rng(seed, i)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
    };
    let header = DatasetHeader {
        version: DATASET_VERSION,
        d: config.d,
        m: config.m,
        k: config.k,
        n,
        seed,
        test_fraction,
    };
    Dataset::from_parts(header, instances)
}
