//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SSODCKPT"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON (see `Header`)
//! payload  for each model in header order:
//!            params    n_params x f32
//!            velocity  n_params x f32
//! ```
//!
//! Parameters and momentum buffers are kept f32-representable during
//! training, so the f32 payload is lossless.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{ArchConfig, DetectorState};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSODCKPT";
pub const VERSION: u32 = 1;

/// One detector with its SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub detector: DetectorState,
    pub velocity: Vec<f64>,
}

impl ModelState {
    pub fn new(detector: DetectorState) -> Self {
        let velocity = vec![0.0; detector.num_params()];
        ModelState { detector, velocity }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    init_seed: u64,
    n_params: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchConfig,
    step: usize,
    models: Vec<ModelHeader>,
    /// Free-form run configuration snapshot, stored verbatim.
    #[serde(default)]
    config: serde_json::Value,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed training steps.
    pub step: usize,
    pub models: Vec<ModelState>,
    pub config: serde_json::Value,
}

fn f32_exact(v: f64) -> Result<f32> {
    let f = v as f32;
    if !v.is_finite() {
        return Err(Error::Internal(format!("non-finite value {v} in checkpoint payload")));
    }
    if f as f64 != v {
        return Err(Error::Internal(format!("value {v} is not representable as f32")));
    }
    Ok(f)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let first = self
            .models
            .first()
            .ok_or_else(|| Error::Internal("checkpoint has no models".into()))?;
        let arch = first.detector.arch.clone();
        if self.models.iter().any(|m| m.detector.arch != arch) {
            return Err(Error::Internal("models in one checkpoint must share an architecture".into()));
        }
        let header = Header {
            format_version: VERSION,
            arch,
            step: self.step,
            models: self
                .models
                .iter()
                .map(|m| ModelHeader {
                    init_seed: m.detector.init_seed,
                    n_params: m.detector.num_params(),
                })
                .collect(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + self.models.len() * first.detector.num_params() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in &self.models {
            if m.velocity.len() != m.detector.params.len() {
                return Err(Error::Internal("velocity length differs from parameter count".into()));
            }
            for &v in m.detector.params.iter().chain(&m.velocity) {
                out.extend_from_slice(&f32_exact(v)?.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::parse("checkpoint", m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| err(&format!("bad header: {e}")))?;
        header.arch.validate()?;
        let mut payload = &body[hlen..];
        let mut models = Vec::with_capacity(header.models.len());
        for (i, mh) in header.models.iter().enumerate() {
            let need = mh.n_params * 8;
            if payload.len() < need {
                return Err(err(&format!("truncated payload for model {i}")));
            }
            let floats: Vec<f64> = payload[..need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if floats.iter().any(|v| !v.is_finite()) {
                return Err(err(&format!("non-finite values in model {i}")));
            }
            payload = &payload[need..];
            let (params, velocity) = floats.split_at(mh.n_params);
            let detector = DetectorState::from_params(header.arch.clone(), params.to_vec(), mh.init_seed)?;
            models.push(ModelState {
                detector,
                velocity: velocity.to_vec(),
            });
        }
        if !payload.is_empty() {
            return Err(err("trailing bytes after payload"));
        }
        if models.is_empty() {
            return Err(err("no models"));
        }
        Ok(Checkpoint {
            step: header.step,
            models,
            config: header.config,
        })
    }

    /// Atomic write: a temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    /// The model used for inference (model a).
    pub fn primary(&self) -> &DetectorState {
        &self.models[0].detector
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let arch = ArchConfig {
            channels: vec![4, 4],
            strides: vec![2, 2],
            ..ArchConfig::default()
        };
        let a = DetectorState::init(&arch, 1).unwrap();
        let b = DetectorState::init(&arch, 2).unwrap();
        let mut ma = ModelState::new(a);
        ma.velocity[3] = 0.25;
        Checkpoint {
            step: 17,
            models: vec![ma, ModelState::new(b)],
            config: serde_json::json!({"mode": "INSTANT_STAR"}),
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let ck = sample_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn refuses_non_f32_values() {
        let mut ck = sample_checkpoint();
        ck.models[0].detector.params[0] = 0.1;
        assert!(ck.to_bytes().is_err());
    }
}
