//! Focus-classify attention models.
//!
//! A focus network `f: R^d -> R` scores every segment, an attention
//! activation turns the scores into weights `alpha`, and a classification
//! network `g` labels the weighted sum of segment features. Features are the
//! activations of focus layer `averaging_layer` (the raw segment for 0).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::attention::{hard_select, softmax, ActivationKind, AttentionVector};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Result, SdcError};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Tanh => v.tanh(),
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "tanh" => Ok(Nonlinearity::Tanh),
            _ => Err(SdcError::Config(format!("unknown nonlinearity {s:?}"))),
        }
    }
}

/// Layer widths from input to output; hidden layers share one nonlinearity
/// and the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub widths: Vec<usize>,
    pub hidden: Nonlinearity,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>, hidden: Nonlinearity) -> Self {
        NetworkSpec { widths, hidden }
    }

    pub fn linear(input: usize, output: usize) -> Self {
        NetworkSpec::new(vec![input, output], Nonlinearity::Relu)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len().saturating_sub(2)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(SdcError::Config(format!(
                "{what} network needs at least two positive widths, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Classify the attention-weighted feature sum.
    Soft,
    /// Classify the feature of the highest-weighted segment.
    Hard,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Soft => "soft",
            AttentionMode::Hard => "hard",
        }
    }
}

impl FromStr for AttentionMode {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(AttentionMode::Soft),
            "hard" => Ok(AttentionMode::Hard),
            _ => Err(SdcError::Config(format!("unknown attention mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcamConfig {
    pub focus: NetworkSpec,
    pub classify: NetworkSpec,
    pub activation: ActivationKind,
    pub averaging_layer: usize,
    pub mode: AttentionMode,
}

impl FcamConfig {
    /// Width of the features the classifier consumes.
    pub fn feature_width(&self) -> usize {
        self.focus.widths[self.averaging_layer]
    }

    pub fn validate(&self) -> Result<()> {
        self.focus.validate("focus")?;
        self.classify.validate("classification")?;
        if self.focus.output_width() != 1 {
            return Err(SdcError::Config(format!(
                "focus network must output one score, got width {}",
                self.focus.output_width()
            )));
        }
        if self.averaging_layer > self.focus.hidden_layers() {
            return Err(SdcError::Config(format!(
                "averaging layer {} exceeds focus depth {}",
                self.averaging_layer,
                self.focus.hidden_layers()
            )));
        }
        if self.classify.input_width() != self.feature_width() {
            return Err(SdcError::Config(format!(
                "classifier input width {} does not match focus layer {} width {}",
                self.classify.input_width(),
                self.averaging_layer,
                self.feature_width()
            )));
        }
        Ok(())
    }

    /// Text manifest, one `key=value` per line.
    pub fn manifest(&self) -> String {
        let widths = |w: &[usize]| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "focus_widths={}\nfocus_hidden={}\nclassify_widths={}\nclassify_hidden={}\nactivation={}\naveraging_layer={}\nmode={}\n",
            widths(&self.focus.widths),
            self.focus.hidden.name(),
            widths(&self.classify.widths),
            self.classify.hidden.name(),
            self.activation,
            self.averaging_layer,
            self.mode.name(),
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| SdcError::Schema(format!("model manifest lacks {key}")))
        };
        let widths = |s: String| -> Result<Vec<usize>> {
            s.split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| SdcError::Schema(format!("bad widths {s:?}")))
        };
        let config = FcamConfig {
            focus: NetworkSpec::new(widths(get("focus_widths")?)?, get("focus_hidden")?.parse()?),
            classify: NetworkSpec::new(widths(get("classify_widths")?)?, get("classify_hidden")?.parse()?),
            activation: get("activation")?.parse()?,
            averaging_layer: get("averaging_layer")?
                .parse()
                .map_err(|_| SdcError::Schema("bad averaging_layer".into()))?,
            mode: get("mode")?.parse()?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcamModel {
    config: FcamConfig,
    params: ParamStore,
    focus: Vec<Layer>,
    classify: Vec<Layer>,
}

/// Nodes produced by running the focus network over a batch of segments.
#[derive(Clone, Copy, Debug)]
pub struct FocusNodes {
    /// `[batch * m]` focus scores.
    pub scores: NodeId,
    /// `[batch * m, d']` segment features at the averaging layer.
    pub features: NodeId,
}

/// Everything one forward pass produces for an instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub scores: Vec<f64>,
    pub alpha: Vec<f64>,
    pub probs: Vec<f64>,
    /// Segment fed to the classifier in hard mode.
    pub selected: Option<usize>,
}

impl Inference {
    pub fn predicted(&self) -> usize {
        hard_select(&self.probs)
    }
}

fn add_layers<R: Rng + ?Sized>(
    params: &mut ParamStore,
    prefix: &str,
    spec: &NetworkSpec,
    rng: &mut R,
) -> Vec<Layer> {
    spec.widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Layer {
            w: params.add_glorot(format!("{prefix}.{i}.w"), w[1], w[0], rng),
            b: params.add(format!("{prefix}.{i}.b"), Tensor::zeros(&[w[1]])),
        })
        .collect()
}

fn find_layers(params: &ParamStore, prefix: &str, spec: &NetworkSpec) -> Result<Vec<Layer>> {
    (0..spec.widths.len() - 1)
        .map(|i| {
            let lookup = |suffix: &str, shape: &[usize]| -> Result<ParamId> {
                let name = format!("{prefix}.{i}.{suffix}");
                let id = params
                    .find(&name)
                    .ok_or_else(|| SdcError::Schema(format!("checkpoint lacks parameter {name}")))?;
                if params.value(id).shape() != shape {
                    return Err(SdcError::Schema(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        params.value(id).shape()
                    )));
                }
                Ok(id)
            };
            Ok(Layer {
                w: lookup("w", &[spec.widths[i + 1], spec.widths[i]])?,
                b: lookup("b", &[spec.widths[i + 1]])?,
            })
        })
        .collect()
}

impl FcamModel {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(config: FcamConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let focus = add_layers(&mut params, "focus", &config.focus, rng);
        let classify = add_layers(&mut params, "classify", &config.classify, rng);
        Ok(FcamModel {
            config,
            params,
            focus,
            classify,
        })
    }

    pub fn from_params(config: FcamConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let focus = find_layers(&params, "focus", &config.focus)?;
        let classify = find_layers(&params, "classify", &config.classify)?;
        Ok(FcamModel {
            config,
            params,
            focus,
            classify,
        })
    }

    pub fn config(&self) -> &FcamConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn segment_dim(&self) -> usize {
        self.config.focus.input_width()
    }

    pub fn num_classes(&self) -> usize {
        self.config.classify.output_width()
    }

    /// Parameter ids of the focus network, in `(weight, bias)` layer order.
    pub fn focus_layers(&self) -> Vec<(ParamId, ParamId)> {
        self.focus.iter().map(|l| (l.w, l.b)).collect()
    }

    pub fn classify_layers(&self) -> Vec<(ParamId, ParamId)> {
        self.classify.iter().map(|l| (l.w, l.b)).collect()
    }

    fn mlp(&self, tape: &mut Tape, layers: &[Layer], hidden: Nonlinearity, x: NodeId, params: &ParamStore) -> Result<(NodeId, Vec<NodeId>)> {
        let mut h = x;
        let mut activations = vec![x];
        for (i, layer) in layers.iter().enumerate() {
            let w = tape.param(params, layer.w);
            let b = tape.param(params, layer.b);
            h = tape.affine(h, w, b)?;
            if i + 1 < layers.len() {
                h = match hidden {
                    Nonlinearity::Relu => tape.relu(h)?,
                    Nonlinearity::Tanh => tape.tanh(h)?,
                };
                activations.push(h);
            }
        }
        Ok((h, activations))
    }

    /// Runs the focus network on `[rows, d]` segments. Parameters are read
    /// from `params`, which must have this model's layout.
    pub fn record_focus(&self, tape: &mut Tape, segments: NodeId, params: &ParamStore) -> Result<FocusNodes> {
        let rows = tape.value(segments).as_rows().0;
        let (out, activations) = self.mlp(tape, &self.focus, self.config.focus.hidden, segments, params)?;
        let scores = tape.reshape(out, vec![rows])?;
        Ok(FocusNodes {
            scores,
            features: activations[self.config.averaging_layer],
        })
    }

    /// Classifier logits for `[rows, d']` features.
    pub fn record_classify(&self, tape: &mut Tape, features: NodeId, params: &ParamStore) -> Result<NodeId> {
        Ok(self.mlp(tape, &self.classify, self.config.classify.hidden, features, params)?.0)
    }

    /// Attention weights `[batch, m]` from `[batch * m]` scores.
    pub fn record_attention(&self, tape: &mut Tape, scores: NodeId, batch: usize, m: usize) -> Result<NodeId> {
        let z = tape.reshape(scores, vec![batch, m])?;
        tape.activation(z, self.config.activation)
    }

    /// Feature of one segment at the averaging layer.
    pub fn feature_map(&self, segment: &[f64]) -> Result<Vec<f64>> {
        if segment.len() != self.segment_dim() {
            return Err(SdcError::Dimension {
                op: "feature_map",
                left: vec![self.segment_dim()],
                right: vec![segment.len()],
            });
        }
        let mut h = segment.to_vec();
        for layer in &self.focus[..self.config.averaging_layer] {
            h = dense(&self.params, layer, &h);
            h.iter_mut().for_each(|v| *v = self.config.focus.hidden.apply(*v));
        }
        Ok(h)
    }

    fn check_segments(&self, segments: &[f64]) -> Result<usize> {
        let d = self.segment_dim();
        if segments.is_empty() || !segments.len().is_multiple_of(d) {
            return Err(SdcError::Dimension {
                op: "segments",
                left: vec![segments.len()],
                right: vec![d],
            });
        }
        Ok(segments.len() / d)
    }

    /// Focus scores of all segments.
    pub fn focus_scores(&self, segments: &[f64]) -> Result<Vec<f64>> {
        Ok(self.infer_batch(&[segments])?.remove(0).scores)
    }

    pub fn attention_vector(&self, segments: &[f64]) -> Result<AttentionVector> {
        AttentionVector::new(self.infer_batch(&[segments])?.remove(0).alpha)
    }

    /// Class probabilities. Soft mode classifies the attended input; hard
    /// mode classifies the feature of the argmax segment.
    pub fn forward(&self, segments: &[f64]) -> Result<Vec<f64>> {
        Ok(self.infer_batch(&[segments])?.remove(0).probs)
    }

    pub fn infer(&self, segments: &[f64]) -> Result<Inference> {
        Ok(self.infer_batch(&[segments])?.remove(0))
    }

    /// Forward passes for instances with a common segment count.
    pub fn infer_batch(&self, batch: &[&[f64]]) -> Result<Vec<Inference>> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        let m = self.check_segments(first)?;
        let d = self.segment_dim();
        let mut flat = Vec::with_capacity(batch.len() * m * d);
        for segments in batch {
            if self.check_segments(segments)? != m {
                return Err(SdcError::Dimension {
                    op: "infer_batch",
                    left: vec![m * d],
                    right: vec![segments.len()],
                });
            }
            flat.extend_from_slice(segments);
        }
        let n = batch.len();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![n * m, d], flat)?);
        let focus = self.record_focus(&mut tape, x, &self.params)?;
        let alpha = self.record_attention(&mut tape, focus.scores, n, m)?;
        let (logits, selected) = match self.config.mode {
            AttentionMode::Soft => {
                let attended = tape.weighted_sum(alpha, focus.features)?;
                (self.record_classify(&mut tape, attended, &self.params)?, None)
            }
            AttentionMode::Hard => {
                let feats = tape.value(focus.features);
                let width = feats.as_rows().1;
                let alphas = tape.value(alpha);
                let picks: Vec<usize> = (0..n).map(|b| hard_select(alphas.row(b))).collect();
                let mut chosen = Vec::with_capacity(n * width);
                for (b, j) in picks.iter().enumerate() {
                    chosen.extend_from_slice(feats.row(b * m + j));
                }
                let chosen = tape.input(Tensor::new(vec![n, width], chosen)?);
                (self.record_classify(&mut tape, chosen, &self.params)?, Some(picks))
            }
        };
        let scores = tape.value(focus.scores);
        let alphas = tape.value(alpha);
        let logits = tape.value(logits);
        Ok((0..n)
            .map(|b| Inference {
                scores: scores.data()[b * m..(b + 1) * m].to_vec(),
                alpha: alphas.row(b).to_vec(),
                probs: softmax(logits.row(b)),
                selected: selected.as_ref().map(|s| s[b]),
            })
            .collect())
    }

    /// Forward passes over many instances in fixed-size chunks.
    pub fn infer_many(&self, instances: &[&[f64]], exec: Execution) -> Result<Vec<Inference>> {
        const CHUNK: usize = 256;
        let chunks: Vec<&[&[f64]]> = instances.chunks(CHUNK).collect();
        let results = par::map_slice(exec, &chunks, |chunk| self.infer_batch(chunk));
        let mut out = Vec::with_capacity(instances.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Hard-mode inference with the classified segment drawn from `alpha`
    /// instead of taken at the argmax.
    pub fn infer_sampled<R: Rng + ?Sized>(&self, segments: &[f64], rng: &mut R) -> Result<Inference> {
        if self.config.mode != AttentionMode::Hard {
            return Err(SdcError::Config("sampled inference needs a hard-attention model".into()));
        }
        let mut inference = self.infer(segments)?;
        let j = WeightedIndex::new(&inference.alpha)
            .map_err(|e| SdcError::Contract(format!("attention weights: {e}")))?
            .sample(rng);
        let d = self.segment_dim();
        inference.probs = self.classify_feature(&self.feature_map(&segments[j * d..(j + 1) * d])?)?;
        inference.selected = Some(j);
        Ok(inference)
    }

    /// Class probabilities of the classifier alone on one feature vector.
    pub fn classify_feature(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(feature.to_vec()));
        let logits = self.record_classify(&mut tape, x, &self.params)?;
        Ok(softmax(tape.value(logits).data()))
    }

    /// Writes `model.txt` (configuration manifest) and `params.bin`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SdcError::io(dir, e))?;
        let manifest = dir.join("model.txt");
        std::fs::write(&manifest, self.config.manifest()).map_err(|e| SdcError::io(&manifest, e))?;
        self.params.save(&dir.join("params.bin"))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest = dir.join("model.txt");
        let text = std::fs::read_to_string(&manifest).map_err(|e| SdcError::io(&manifest, e))?;
        let config = FcamConfig::from_manifest(&text)?;
        let params = ParamStore::load(&dir.join("params.bin"))?;
        FcamModel::from_params(config, params)
    }
}

fn dense(params: &ParamStore, layer: &Layer, x: &[f64]) -> Vec<f64> {
    let w = params.value(layer.w);
    let b = params.value(layer.b);
    let cols = w.shape()[1];
    b.data()
        .iter()
        .enumerate()
        .map(|(r, bias)| bias + w.data()[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// `sum_j alpha_j * features_j`.
pub fn attended_input(alpha: &AttentionVector, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if alpha.len() != features.len() || features.is_empty() {
        return Err(SdcError::Dimension {
            op: "attended_input",
            left: vec![alpha.len()],
            right: vec![features.len()],
        });
    }
    let width = features[0].len();
    let mut out = vec![0.0; width];
    for (a, f) in alpha.as_slice().iter().zip(features) {
        if f.len() != width {
            return Err(SdcError::Dimension {
                op: "attended_input",
                left: vec![width],
                right: vec![f.len()],
            });
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += a * v;
        }
    }
    Ok(out)
}

impl fmt::Display for FcamConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "focus {:?} / classify {:?} / {} / layer {} / {}",
            self.focus.widths,
            self.classify.widths,
            self.activation,
            self.averaging_layer,
            self.mode.name()
        )
    }
}
