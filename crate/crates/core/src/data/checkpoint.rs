//! Text checkpoints.
//!
//! ```text
//! dpose-checkpoint
//! format_version=1
//! seed=<u64>
//! hyper.<key>=<value>        (one per Hyper field)
//! config.<key>=<value>       (one per TrainConfig field)
//! meta.<key>=<value>         (free-form, optional)
//! tensor <name> <d0>x<d1>...
//! <16-digit hex of f64 bits> ...   (all values of the tensor, one line)
//! ...
//! digest=<sha256 hex of every byte above this line>
//! ```
//!
//! Tensor values are stored as raw IEEE-754 bit patterns, so a load
//! reproduces them exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, Result};
use crate::digest::Digest;
use crate::model::{Hyper, ModelParams};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: &str = "1";
const MAGIC: &str = "dpose-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub seed: u64,
    pub meta: Vec<(String, String)>,
    pub digest: Digest,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn malformed(msg: impl Into<String>) -> DataError {
    DataError::MalformedCheckpoint(msg.into())
}

/// Checkpoint body and its digest line.
pub fn encode(params: &ModelParams, config: &TrainConfig, meta: &[(String, String)]) -> (String, Digest) {
    use std::fmt::Write as _;

    let mut body = String::new();
    writeln!(body, "{MAGIC}").unwrap();
    writeln!(body, "format_version={FORMAT_VERSION}").unwrap();
    writeln!(body, "seed={}", config.seed).unwrap();
    for (k, v) in params.hyper.to_kv() {
        writeln!(body, "hyper.{k}={v}").unwrap();
    }
    for (k, v) in config.to_kv() {
        writeln!(body, "config.{k}={v}").unwrap();
    }
    for (k, v) in meta {
        writeln!(body, "meta.{k}={v}").unwrap();
    }
    for t in params.tensors() {
        let shape: Vec<String> = t.tensor.shape.iter().map(|d| d.to_string()).collect();
        writeln!(body, "tensor {} {}", t.full_name(), shape.join("x")).unwrap();
        let values: Vec<String> = t.tensor.data.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        writeln!(body, "{}", values.join(" ")).unwrap();
    }
    let digest = Digest::of_bytes(body.as_bytes());
    writeln!(body, "digest={}", digest.to_hex()).unwrap();
    (body, digest)
}

/// Writes the checkpoint atomically (temp file + rename). Returns its digest.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    config: &TrainConfig,
    meta: &[(String, String)],
) -> Result<Digest> {
    let (text, digest) = encode(params, config, meta);
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(digest)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let text = std::str::from_utf8(bytes).map_err(|_| DataError::DigestMismatch)?;

    if let Some(v) = text.lines().find_map(|l| l.strip_prefix("format_version=")) {
        if v != FORMAT_VERSION {
            return Err(DataError::VersionMismatch(v.to_string()));
        }
    }

    let body_end = text.rfind("\ndigest=").map(|k| k + 1).ok_or(DataError::DigestMismatch)?;
    let (body, tail) = text.split_at(body_end);
    let stored = tail
        .strip_prefix("digest=")
        .map(|s| s.trim_end_matches('\n'))
        .and_then(Digest::from_hex)
        .ok_or(DataError::DigestMismatch)?;
    let digest = Digest::of_bytes(body.as_bytes());
    if digest != stored {
        return Err(DataError::DigestMismatch);
    }

    let mut lines = body.lines();
    if lines.next() != Some(MAGIC) {
        return Err(malformed("missing header line"));
    }
    let mut hyper = Hyper::default();
    let mut config = TrainConfig::default();
    let mut seed = None;
    let mut meta = Vec::new();
    let mut tensor_lines = Vec::new();
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let values = lines.next().ok_or_else(|| malformed(format!("no values for tensor {rest}")))?;
            tensor_lines.push((rest, values));
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| malformed(format!("unexpected line '{line}'")))?;
        if key == "format_version" {
            continue;
        } else if key == "seed" {
            seed = Some(value.parse().map_err(|_| malformed(format!("bad seed '{value}'")))?);
        } else if let Some(k) = key.strip_prefix("hyper.") {
            if !hyper.set_kv(k, value).map_err(malformed)? {
                return Err(malformed(format!("unknown hyperparameter '{k}'")));
            }
        } else if let Some(k) = key.strip_prefix("config.") {
            if !config.set_kv(k, value).map_err(malformed)? {
                return Err(malformed(format!("unknown config key '{k}'")));
            }
        } else if let Some(k) = key.strip_prefix("meta.") {
            meta.push((k.to_string(), value.to_string()));
        } else {
            return Err(malformed(format!("unknown key '{key}'")));
        }
    }
    hyper.validate().map_err(|e| malformed(e.to_string()))?;

    let mut params = ModelParams::zeros(&hyper);
    let expected: Vec<(String, Vec<usize>)> =
        params.tensors().iter().map(|t| (t.full_name(), t.tensor.shape.clone())).collect();
    if tensor_lines.len() != expected.len() {
        return Err(malformed(format!("expected {} tensors, found {}", expected.len(), tensor_lines.len())));
    }
    for ((header, values), (tensor, (name, shape))) in tensor_lines.iter().zip(params.tensors_mut().into_iter().zip(&expected)) {
        let want = format!("{name} {}", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"));
        if *header != want {
            return Err(malformed(format!("tensor header '{header}', expected '{want}'")));
        }
        let parsed: Vec<f64> = values
            .split_whitespace()
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| malformed(format!("bad value in tensor {name}")))?;
        if parsed.len() != tensor.len() {
            return Err(malformed(format!("tensor {name}: {} values, expected {}", parsed.len(), tensor.len())));
        }
        tensor.data = parsed;
    }
    let seed = seed.ok_or_else(|| malformed("missing seed"))?;
    Ok(Checkpoint { params, config, seed, meta, digest })
}
