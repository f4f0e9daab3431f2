//! Base distributions over segment space.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub stddev: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, stddev: f64) -> Self {
        Gaussian { mean, stddev }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.mean.len() != d {
            return Err(SdcError::Config(format!(
                "gaussian mean has dimension {}, expected {d}",
                self.mean.len()
            )));
        }
        if !self.stddev.is_finite() || self.stddev <= 0.0 {
            return Err(SdcError::Config(format!("stddev must be positive, got {}", self.stddev)));
        }
        Ok(())
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, mu) in out.iter_mut().zip(&self.mean) {
            let z: f64 = rng.sample(StandardNormal);
            *o = mu + self.stddev * z;
        }
    }
}

/// One of `D_0, D_1, ..., D_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistributionSpec {
    Gaussian(Gaussian),
    Mixture {
        components: Vec<Gaussian>,
        weights: Vec<f64>,
    },
    PointMass(Vec<f64>),
    /// Rows of a CSV file (`tag,v1,...,vd`) whose first field equals `class_tag`.
    FromFile { path: PathBuf, class_tag: String },
}

impl BaseDistributionSpec {
    pub fn gaussian(mean: Vec<f64>, stddev: f64) -> Self {
        BaseDistributionSpec::Gaussian(Gaussian::new(mean, stddev))
    }

    /// Equal-weight mixture of isotropic Gaussians sharing one stddev.
    pub fn equal_mixture(means: Vec<Vec<f64>>, stddev: f64) -> Self {
        let w = 1.0 / means.len() as f64;
        BaseDistributionSpec::Mixture {
            weights: vec![w; means.len()],
            components: means.into_iter().map(|m| Gaussian::new(m, stddev)).collect(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            BaseDistributionSpec::Gaussian(g) => g.validate(d),
            BaseDistributionSpec::Mixture { components, weights } => {
                if components.is_empty() || components.len() != weights.len() {
                    return Err(SdcError::Config(format!(
                        "mixture has {} components and {} weights",
                        components.len(),
                        weights.len()
                    )));
                }
                if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
                    return Err(SdcError::Config("mixture weights must be non-negative".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(SdcError::Config(format!("mixture weights sum to {total}, not 1")));
                }
                components.iter().try_for_each(|c| c.validate(d))
            }
            BaseDistributionSpec::PointMass(p) => {
                if p.len() != d {
                    return Err(SdcError::Config(format!(
                        "point mass has dimension {}, expected {d}",
                        p.len()
                    )));
                }
                Ok(())
            }
            BaseDistributionSpec::FromFile { .. } => Ok(()),
        }
    }

    /// Mean of the distribution when it has a closed form.
    pub fn mean(&self) -> Option<Vec<f64>> {
        match self {
            BaseDistributionSpec::Gaussian(g) => Some(g.mean.clone()),
            BaseDistributionSpec::PointMass(p) => Some(p.clone()),
            BaseDistributionSpec::Mixture { components, weights } => {
                let d = components.first()?.mean.len();
                let mut out = vec![0.0; d];
                for (c, w) in components.iter().zip(weights) {
                    for (o, m) in out.iter_mut().zip(&c.mean) {
                        *o += w * m;
                    }
                }
                Some(out)
            }
            BaseDistributionSpec::FromFile { .. } => None,
        }
    }
}

/// Vectors loaded for a `from_file` spec.
#[derive(Clone, Debug)]
pub(crate) struct Pool {
    pub tag: String,
    pub vectors: Vec<Vec<f64>>,
}

pub(crate) fn load_pool(path: &Path, tag: &str, d: usize) -> Result<Pool> {
    let text = std::fs::read_to_string(path).map_err(|e| SdcError::io(path, e))?;
    let mut vectors = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let row_tag = fields.next().unwrap_or_default().trim();
        if row_tag != tag {
            continue;
        }
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| SdcError::Parse {
                offset: start,
                message: format!("bad value in pool file: {e}"),
            })?;
        if values.len() != d {
            return Err(SdcError::Schema(format!(
                "pool row at byte {start} has {} values, expected {d}",
                values.len()
            )));
        }
        vectors.push(values);
    }
    if vectors.is_empty() {
        return Err(SdcError::Config(format!(
            "no rows tagged {tag:?} in {}",
            path.display()
        )));
    }
    Ok(Pool {
        tag: tag.to_string(),
        vectors,
    })
}

/// A distribution ready to draw from, with file pools loaded.
#[derive(Clone, Debug)]
pub(crate) enum Source {
    Gaussian(Gaussian),
    Mixture {
        components: Vec<Gaussian>,
        cumulative: Vec<f64>,
    },
    PointMass(Vec<f64>),
    Pool(usize),
}

impl Source {
    pub fn resolve(spec: &BaseDistributionSpec, d: usize, pools: &mut Vec<Pool>, cache: &mut HashMap<(PathBuf, String), usize>) -> Result<Self> {
        spec.validate(d)?;
        Ok(match spec {
            BaseDistributionSpec::Gaussian(g) => Source::Gaussian(g.clone()),
            BaseDistributionSpec::Mixture { components, weights } => {
                let mut acc = 0.0;
                let cumulative = weights
                    .iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect();
                Source::Mixture {
                    components: components.clone(),
                    cumulative,
                }
            }
            BaseDistributionSpec::PointMass(p) => Source::PointMass(p.clone()),
            BaseDistributionSpec::FromFile { path, class_tag } => {
                let key = (path.clone(), class_tag.clone());
                let idx = match cache.get(&key) {
                    Some(idx) => *idx,
                    None => {
                        pools.push(load_pool(path, class_tag, d)?);
                        cache.insert(key, pools.len() - 1);
                        pools.len() - 1
                    }
                };
                Source::Pool(idx)
            }
        })
    }
}

/// Without-replacement draw order for every pool: a seeded permutation and
/// a cursor into it.
#[derive(Clone, Debug)]
pub(crate) struct PoolDraws {
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl PoolDraws {
    pub fn new(pools: &[Pool], seed: u64) -> Self {
        let order = pools
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u64::MAX - i as u64);
                let mut idx: Vec<usize> = (0..p.vectors.len()).collect();
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        PoolDraws {
            order,
            cursor: vec![0; pools.len()],
        }
    }

    pub fn next(&mut self, pool: usize, pools: &[Pool]) -> Result<usize> {
        let c = self.cursor[pool];
        let order = &self.order[pool];
        if c >= order.len() {
            return Err(SdcError::PoolExhausted {
                tag: pools[pool].tag.clone(),
                size: order.len(),
            });
        }
        self.cursor[pool] += 1;
        Ok(order[c])
    }
}

/// How pool-backed sources are drawn.
pub(crate) enum PoolMode<'a> {
    WithReplacement,
    WithoutReplacement(&'a mut PoolDraws),
}

impl Source {
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        pools: &[Pool],
        mode: &mut PoolMode<'_>,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            Source::Gaussian(g) => g.sample_into(rng, out),
            Source::Mixture { components, cumulative } => {
                let u: f64 = rng.random();
                let total = *cumulative.last().unwrap();
                let idx = cumulative
                    .iter()
                    .position(|c| u * total < *c)
                    .unwrap_or(components.len() - 1);
                components[idx].sample_into(rng, out);
            }
            Source::PointMass(p) => out.copy_from_slice(p),
            Source::Pool(idx) => {
                let pool = &pools[*idx];
                let row = match mode {
                    PoolMode::WithReplacement => rng.random_range(0..pool.vectors.len()),
                    PoolMode::WithoutReplacement(draws) => draws.next(*idx, pools)?,
                };
                out.copy_from_slice(&pool.vectors[row]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_weights_validated() {
        let bad = BaseDistributionSpec::Mixture {
            components: vec![Gaussian::new(vec![0.0], 1.0), Gaussian::new(vec![1.0], 1.0)],
            weights: vec![0.7, 0.7],
        };
        assert!(bad.validate(1).is_err());
        let neg = BaseDistributionSpec::Mixture {
            components: vec![Gaussian::new(vec![0.0], 1.0), Gaussian::new(vec![1.0], 1.0)],
            weights: vec![1.5, -0.5],
        };
        assert!(neg.validate(1).is_err());
        assert!(BaseDistributionSpec::equal_mixture(vec![vec![0.0], vec![1.0], vec![2.0]], 0.1)
            .validate(1)
            .is_ok());
    }

    #[test]
    fn stddev_must_be_positive() {
        assert!(BaseDistributionSpec::gaussian(vec![0.0, 0.0], 0.0).validate(2).is_err());
        assert!(BaseDistributionSpec::gaussian(vec![0.0], 1.0).validate(2).is_err());
    }

    #[test]
    fn json_shape() {
        let spec = BaseDistributionSpec::gaussian(vec![3.0, 3.0], 0.01);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"gaussian":{"mean":[3.0,3.0],"stddev":0.01}}"#);
        let back: BaseDistributionSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
