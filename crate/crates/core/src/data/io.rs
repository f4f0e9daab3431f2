//! Text interchange format for datasets.
//!
//! ```text
//! {"version":1,"d":2,"m":9,"k":3,"n":6000,"seed":0,"test_fraction":0.5}
//! 0,2,4,0.0123,-2.9931,...
//! ```
//!
//! The first line is a JSON header. Each following line is one instance:
//! `instance_id,label,fg_index` then `m * d` floats, segment-major. Floats
//! use the shortest representation that parses back to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, DatasetHeader, MosaicInstance};
use crate::error::{Result, SdcError};

pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(ds: &Dataset) -> String {
    let header = serde_json::to_string(ds.header()).expect("header serializes");
    let mut out = String::with_capacity(header.len() + ds.len() * (ds.header.m * ds.header.d * 12 + 16));
    out.push_str(&header);
    out.push('\n');
    for (i, inst) in ds.instances.iter().enumerate() {
        let _ = write!(out, "{i},{},{}", inst.label, inst.fg_index);
        for v in &inst.segments {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_dataset(ds)).map_err(|e| SdcError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| SdcError::io(path, e))?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| SdcError::Parse {
        offset: e.valid_up_to(),
        message: "dataset file is not utf-8".into(),
    })?;
    let header_end = text.find('\n').ok_or(SdcError::Parse {
        offset: text.len(),
        message: "missing header line".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(&text[..header_end]).map_err(|e| SdcError::Parse {
        offset: e.column().saturating_sub(1),
        message: format!("bad header: {e}"),
    })?;
    if header.version != DATASET_VERSION {
        return Err(SdcError::Schema(format!(
            "unsupported dataset version {} (reader supports {DATASET_VERSION})",
            header.version
        )));
    }
    if header.d == 0 || header.m == 0 {
        return Err(SdcError::Schema("header dims must be positive".into()));
    }
    let width = header.m * header.d;

    let mut instances = Vec::with_capacity(header.n);
    let mut offset = header_end + 1;
    for line in text[offset..].split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if !line.ends_with('\n') {
            return Err(SdcError::Parse {
                offset: line_start,
                message: "truncated record (no line terminator)".into(),
            });
        }
        let body = line.trim_end_matches(['\n', '\r']);
        if body.is_empty() {
            continue;
        }
        let mut field_start = line_start;
        let mut fields = body.split(',').map(|f| {
            let at = field_start;
            field_start += f.len() + 1;
            (at, f)
        });
        let mut next_int = |what: &str| -> Result<usize> {
            let (at, f) = fields.next().ok_or(SdcError::Parse {
                offset: line_start,
                message: format!("missing {what}"),
            })?;
            f.trim().parse().map_err(|_| SdcError::Parse {
                offset: at,
                message: format!("bad {what} {f:?}"),
            })
        };
        let id = next_int("instance_id")?;
        let label = next_int("label")?;
        let fg_index = next_int("fg_index")?;
        if id != instances.len() {
            return Err(SdcError::Schema(format!(
                "record at byte {line_start} has id {id}, expected {}",
                instances.len()
            )));
        }
        let mut segments = Vec::with_capacity(width);
        for (at, f) in fields {
            segments.push(f.trim().parse::<f64>().map_err(|_| SdcError::Parse {
                offset: at,
                message: format!("bad float {f:?}"),
            })?);
        }
        if segments.len() != width {
            return Err(SdcError::Schema(format!(
                "record {id} has {} values, header implies {width}",
                segments.len()
            )));
        }
        if label >= header.k || fg_index >= header.m {
            return Err(SdcError::Schema(format!(
                "record {id} has label {label} / fg_index {fg_index} outside k={} / m={}",
                header.k, header.m
            )));
        }
        instances.push(MosaicInstance::new(segments, header.d, label, fg_index)?);
    }
    Dataset::from_parts(header, instances)
}
