use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Result, SdcError};
use crate::tensor::Tensor;

/// Magic line opening a parameter file.
pub const PARAMS_MAGIC: &str = "SDCPARAMS 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors with gradient accumulators of matching shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.names.push(name.into());
        self.values.push(value);
        id
    }

    /// Adds an `out x in` weight drawn uniformly from
    /// `+-sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_out * fan_in)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let value = Tensor::new(vec![fan_out, fan_in], data).expect("shape matches data");
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Mutable value and its gradient at once, for optimizers.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let slot = &mut self.grads[id.0];
        if slot.shape() != grad.shape() {
            return Err(SdcError::Dimension {
                op: "accumulate_grad",
                left: slot.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        slot.data_mut()
            .iter_mut()
            .zip(grad.data())
            .for_each(|(s, g)| *s += g);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Text manifest: one `name dims` line per parameter, `x`-separated dims.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "{name} {}", dims.join("x"));
        }
        out
    }

    /// Serializes as: the magic line, a line with the parameter count, the
    /// manifest, an `END` line, then every value as little-endian `f64` in
    /// manifest order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{PARAMS_MAGIC}\n{}\n{}END\n", self.len(), self.manifest()).into_bytes();
        for value in &self.values {
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut offset = 0;
        let next_line = |offset: &mut usize| -> Result<String> {
            let rest = &bytes[*offset..];
            let end = rest.iter().position(|b| *b == b'\n').ok_or(SdcError::Parse {
                offset: *offset,
                message: "unterminated manifest line".into(),
            })?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| SdcError::Parse {
                offset: *offset,
                message: "manifest is not utf-8".into(),
            })?;
            *offset += end + 1;
            Ok(line.to_string())
        };

        let magic = next_line(&mut offset)?;
        if magic != PARAMS_MAGIC {
            return Err(SdcError::Schema(format!("bad parameter file magic {magic:?}")));
        }
        let count_at = offset;
        let count: usize = next_line(&mut offset)?.trim().parse().map_err(|_| SdcError::Parse {
            offset: count_at,
            message: "parameter count is not an integer".into(),
        })?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let at = offset;
            let line = next_line(&mut offset)?;
            let bad = || SdcError::Parse {
                offset: at,
                message: format!("bad manifest entry {line:?}"),
            };
            let (name, dims) = line.rsplit_once(' ').ok_or_else(bad)?;
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad())?
            };
            entries.push((name.to_string(), shape));
        }
        let end_at = offset;
        if next_line(&mut offset)? != "END" {
            return Err(SdcError::Parse {
                offset: end_at,
                message: "missing END after manifest".into(),
            });
        }

        let mut store = ParamStore::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let need = n * 8;
            if bytes.len() < offset + need {
                return Err(SdcError::Parse {
                    offset: bytes.len(),
                    message: format!("truncated data for parameter {name}"),
                });
            }
            let data = bytes[offset..offset + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            offset += need;
            store.add(name, Tensor::new(shape, data)?);
        }
        if offset != bytes.len() {
            return Err(SdcError::Parse {
                offset,
                message: "trailing bytes after parameter data".into(),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| SdcError::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| SdcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| SdcError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_glorot("focus.0.w", 3, 2, &mut rng);
        store.add("focus.0.b", Tensor::vector(vec![0.5, -0.25, 1e-300]));
        store.add("bias", Tensor::scalar(f64::MIN_POSITIVE));
        store
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let id = store.add_glorot("w", 50, 50, &mut rng);
        let limit = (6.0f64 / 100.0).sqrt();
        assert!(store.value(id).data().iter().all(|v| v.abs() <= limit));
        assert_eq!(store.grad(id).shape(), &[50, 50]);
    }

    #[test]
    fn bytes_round_trip() {
        let store = sample_store();
        let back = ParamStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn manifest_lists_shapes() {
        let store = sample_store();
        assert_eq!(store.manifest(), "focus.0.w 3x2\nfocus.0.b 3\nbias \n");
    }

    #[test]
    fn truncated_data_is_parse_error() {
        let bytes = sample_store().to_bytes();
        let err = ParamStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, SdcError::Parse { .. }), "{err}");
    }

    #[test]
    fn zero_grads_resets() {
        let mut store = sample_store();
        let id = store.find("focus.0.b").unwrap();
        store.accumulate_grad(id, &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 2.0, 3.0]);
        store.zero_grads();
        assert!(store.grad(id).data().iter().all(|g| *g == 0.0));
    }
}
