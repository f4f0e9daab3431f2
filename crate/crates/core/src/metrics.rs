//! Evaluation quantities: accuracy, focus-true rate (FT), focus/prediction
//! quadrants, attention sparsity, threshold curves and bounding-box
//! alignment of attention grids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{entropy, hard_select};
use crate::data::EvalView;
use crate::error::{Result, SdcError};
use crate::fcam::{FcamModel, Inference};
use crate::par::{self, Execution};

/// Weights above this count toward NNZ.
pub const NNZ_THRESHOLD: f64 = 0.01;

/// Number of evenly spaced thresholds in `[0, 1]` for threshold curves.
pub const THRESHOLD_GRID_POINTS: usize = 101;

/// Per-instance outcome of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub predicted: usize,
    pub label: usize,
    pub alpha: Vec<f64>,
    pub fg_index: usize,
}

impl EvalRecord {
    pub fn from_inference(inference: &Inference, label: usize, fg_index: usize) -> Self {
        EvalRecord {
            predicted: inference.predicted(),
            label,
            alpha: inference.alpha.clone(),
            fg_index,
        }
    }

    /// The foreground weight strictly exceeds every other weight.
    pub fn focus_correct(&self) -> bool {
        let fg = self.alpha[self.fg_index];
        self.alpha
            .iter()
            .enumerate()
            .all(|(j, a)| j == self.fg_index || fg > *a)
    }

    pub fn prediction_correct(&self) -> bool {
        self.predicted == self.label
    }
}

pub fn evaluate(model: &FcamModel, view: &EvalView<'_>, exec: Execution) -> Result<Vec<EvalRecord>> {
    let samples: Vec<_> = view.iter().collect();
    let segments: Vec<&[f64]> = samples.iter().map(|s| s.segments).collect();
    let inferences = model.infer_many(&segments, exec)?;
    Ok(samples
        .iter()
        .zip(&inferences)
        .map(|(s, inf)| EvalRecord::from_inference(inf, s.label, s.fg_index))
        .collect())
}

/// Evaluation of a hard-attention model that classifies a segment drawn
/// from `alpha`. Instance `i` draws from ChaCha8 stream `i` of `seed`, so
/// the records do not depend on the execution policy.
pub fn evaluate_sampled(model: &FcamModel, view: &EvalView<'_>, seed: u64, exec: Execution) -> Result<Vec<EvalRecord>> {
    let samples: Vec<_> = view.iter().collect();
    par::map_indexed(exec, samples.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let s = &samples[i];
        let inf = model.infer_sampled(s.segments, &mut rng)?;
        Ok(EvalRecord::from_inference(&inf, s.label, s.fg_index))
    })
    .into_iter()
    .collect()
}

fn non_empty(records: &[EvalRecord], what: &str) -> Result<f64> {
    if records.is_empty() {
        return Err(SdcError::UndefinedMetric(format!("{what} of an empty record set")));
    }
    Ok(records.len() as f64)
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    let n = non_empty(records, "accuracy")?;
    Ok(records.iter().filter(|r| r.prediction_correct()).count() as f64 / n)
}

/// Fraction of instances whose foreground weight is the strict maximum.
pub fn ft(records: &[EvalRecord]) -> Result<f64> {
    let n = non_empty(records, "FT")?;
    Ok(records.iter().filter(|r| r.focus_correct()).count() as f64 / n)
}

/// Joint focus-correct / prediction-correct counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuadrantCounts {
    pub ftpt: usize,
    pub ffpt: usize,
    pub ftpf: usize,
    pub ffpf: usize,
}

impl QuadrantCounts {
    pub fn total(&self) -> usize {
        self.ftpt + self.ffpt + self.ftpf + self.ffpf
    }
}

/// Joint fractions: focus true/false crossed with prediction true/false.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadrants {
    pub ftpt: f64,
    pub ffpt: f64,
    pub ftpf: f64,
    pub ffpf: f64,
}

impl Quadrants {
    pub fn sum(&self) -> f64 {
        self.ftpt + self.ffpt + self.ftpf + self.ffpf
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.ftpt, self.ffpt, self.ftpf, self.ffpf]
    }
}

pub fn quadrant_counts(records: &[EvalRecord]) -> QuadrantCounts {
    let mut c = QuadrantCounts::default();
    for r in records {
        match (r.focus_correct(), r.prediction_correct()) {
            (true, true) => c.ftpt += 1,
            (false, true) => c.ffpt += 1,
            (true, false) => c.ftpf += 1,
            (false, false) => c.ffpf += 1,
        }
    }
    c
}

pub fn quadrants(records: &[EvalRecord]) -> Result<Quadrants> {
    let n = non_empty(records, "quadrants")?;
    let c = quadrant_counts(records);
    Ok(Quadrants {
        ftpt: c.ftpt as f64 / n,
        ffpt: c.ffpt as f64 / n,
        ftpf: c.ftpf as f64 / n,
        ffpf: c.ffpf as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sparsity {
    /// Count of weights above [`NNZ_THRESHOLD`] (not divided by `m`).
    pub nnz: f64,
    /// Euclidean distance to the nearest one-hot vector.
    pub dist: f64,
    pub ent: f64,
}

pub fn sparsity(alpha: &[f64]) -> Sparsity {
    let nnz = alpha.iter().filter(|a| **a > NNZ_THRESHOLD).count() as f64;
    let dist = (0..alpha.len())
        .map(|j| {
            alpha
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let e = if i == j { 1.0 } else { 0.0 };
                    (a - e) * (a - e)
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    Sparsity {
        nnz,
        dist,
        ent: entropy(alpha),
    }
}

/// Sparsity metrics averaged over records.
pub fn mean_sparsity(records: &[EvalRecord]) -> Result<Sparsity> {
    let n = non_empty(records, "sparsity")?;
    let (mut nnz, mut dist, mut ent) = (0.0, 0.0, 0.0);
    for r in records {
        let s = sparsity(&r.alpha);
        nnz += s.nnz;
        dist += s.dist;
        ent += s.ent;
    }
    Ok(Sparsity {
        nnz: nnz / n,
        dist: dist / n,
        ent: ent / n,
    })
}

pub fn default_threshold_grid() -> Vec<f64> {
    (0..THRESHOLD_GRID_POINTS)
        .map(|i| i as f64 / (THRESHOLD_GRID_POINTS - 1) as f64)
        .collect()
}

/// For each threshold `t`, the fraction of records whose foreground weight
/// exceeds `t`.
pub fn threshold_curve(records: &[EvalRecord], grid: &[f64]) -> Result<Vec<f64>> {
    let n = non_empty(records, "threshold curve")?;
    let mut fg: Vec<f64> = records.iter().map(|r| r.alpha[r.fg_index]).collect();
    fg.sort_by(f64::total_cmp);
    Ok(grid
        .iter()
        .map(|t| {
            let at_or_below = fg.partition_point(|v| v <= t);
            (fg.len() - at_or_below) as f64 / n
        })
        .collect())
}

/// Square grid of non-negative values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    side: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return Err(SdcError::Dimension {
                op: "grid",
                left: vec![side, side],
                right: vec![data.len()],
            });
        }
        Ok(Grid { side, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Grid::new(rows.len(), rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.side + c]
    }

    fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Nearest-neighbour upsampling: each cell becomes a `factor x factor` block.
pub fn upsample(grid: &Grid, factor: usize) -> Result<Grid> {
    if factor < 1 {
        return Err(SdcError::Config("upsampling factor must be at least 1".into()));
    }
    let side = grid.side * factor;
    let data = (0..side * side)
        .map(|i| grid.get((i / side) / factor, (i % side) / factor))
        .collect();
    Grid::new(side, data)
}

/// Binary mask of a bounding box on a square image.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMask(Grid);

impl BoxMask {
    pub fn new(side: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.iter().any(|c| *c > 1) {
            return Err(SdcError::Config("box mask entries must be 0 or 1".into()));
        }
        if !cells.contains(&1) {
            return Err(SdcError::Config("box mask must mark at least one pixel".into()));
        }
        Ok(BoxMask(Grid::new(side, cells.into_iter().map(f64::from).collect())?))
    }

    /// Mask of the half-open pixel rectangle `[top, bottom) x [left, right)`.
    pub fn rect(side: usize, top: usize, left: usize, bottom: usize, right: usize) -> Result<Self> {
        let cells = (0..side * side)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                u8::from((top..bottom).contains(&r) && (left..right).contains(&c))
            })
            .collect();
        BoxMask::new(side, cells)
    }

    pub fn side(&self) -> usize {
        self.0.side
    }
}

/// Cosine between the upsampled attention grid and the box mask.
pub fn bbox_cosine(grid: &Grid, mask: &BoxMask, factor: usize) -> Result<f64> {
    if grid.data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(SdcError::Config("attention grid must be finite and non-negative".into()));
    }
    if grid.data.iter().all(|v| *v == 0.0) {
        return Err(SdcError::UndefinedMetric("cosine with an all-zero attention grid".into()));
    }
    if grid.side * factor != mask.side() {
        return Err(SdcError::Dimension {
            op: "bbox_cosine",
            left: vec![grid.side * factor],
            right: vec![mask.side()],
        });
    }
    let up = upsample(grid, factor)?;
    let dot: f64 = up.data.iter().zip(&mask.0.data).map(|(a, b)| a * b).sum();
    Ok(dot / (up.norm() * mask.0.norm()))
}

/// Index of the attended segment for each record (argmax weight).
pub fn attended_segments(records: &[EvalRecord]) -> Vec<usize> {
    records.iter().map(|r| hard_select(&r.alpha)).collect()
}
