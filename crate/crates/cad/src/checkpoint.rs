//! Versioned binary checkpoint.
//!
//! Layout, all integers unsigned 64-bit little-endian:
//!
//! ```text
//! "CADCKPT1"                      8 bytes
//! header length, header           UTF-8 `key=value` lines
//! per parameter:
//!   name length, name             UTF-8
//!   rank, extents[rank]
//!   values                        f32 little-endian, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use cad_core::data::Scaler;
use cad_core::model::{CadModel, Param};
use cad_core::train::TrainConfig;
use cad_core::Tensor;

use crate::error::{CliError, Result};
use crate::io::{fmt_real, write_atomic};

pub const MAGIC: &[u8; 8] = b"CADCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model together with everything needed to score new data.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub scaler: Option<Scaler>,
    pub model: CadModel<f32>,
}

impl Checkpoint {
    pub fn new(train: TrainConfig, scaler: Option<Scaler>, model: CadModel<f32>) -> Result<Self> {
        let k = model.config().metrics;
        if *model.config() != train.model_config(k) {
            return Err(CliError::Checkpoint(
                "model configuration differs from training configuration".into(),
            ));
        }
        if let Some(s) = &scaler {
            if s.min.len() != k || s.max.len() != k {
                return Err(CliError::Checkpoint(format!(
                    "scaler covers {} columns, model has {k} metrics",
                    s.min.len()
                )));
            }
        }
        Ok(Self {
            train,
            scaler,
            model,
        })
    }

    pub fn metrics(&self) -> usize {
        self.model.config().metrics
    }

    /// The `key=value` header block, one entry per line.
    pub fn header(&self) -> String {
        let t = &self.train;
        let list = |v: &[f64]| v.iter().map(|x| fmt_real(*x)).collect::<Vec<_>>().join(",");
        let (smin, smax) = match &self.scaler {
            Some(s) => (list(&s.min), list(&s.max)),
            None => ("none".to_string(), "none".to_string()),
        };
        let patience = t
            .early_stop_patience
            .map_or_else(|| "none".to_string(), |p| p.to_string());
        let entries: [(&str, String); 20] = [
            ("version", FORMAT_VERSION.to_string()),
            ("metrics", self.metrics().to_string()),
            ("window", t.window.to_string()),
            ("horizon", t.horizon.to_string()),
            ("experts", t.experts.to_string()),
            ("kernels", t.kernels.to_string()),
            ("epsilon", fmt_real(t.epsilon)),
            ("variant", t.variant.to_string()),
            ("seed", t.seed.to_string()),
            ("lr0", fmt_real(t.lr0)),
            ("lr_min", fmt_real(t.lr_min)),
            ("batch", t.batch.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("early_stop_patience", patience),
            ("val_fraction", fmt_real(t.val_fraction)),
            ("normalize", t.normalize.to_string()),
            ("clip_preprocessing", t.clip_preprocessing.to_string()),
            ("parameters", self.model.params().len().to_string()),
            ("scaler_min", smin),
            ("scaler_max", smax),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.model.param_count() * 4 + 1024);
        out.extend_from_slice(MAGIC);
        let header = self.header();
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(header.as_bytes());
        for p in self.model.params() {
            put_u64(&mut out, p.name.len() as u64);
            out.extend_from_slice(p.name.as_bytes());
            put_u64(&mut out, p.value.shape().len() as u64);
            for &e in p.value.shape() {
                put_u64(&mut out, e as u64);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let header_len = r.len()?;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| CliError::Checkpoint("header is not UTF-8".into()))?;
        let h = Header::parse(header)?;
        let version: u32 = h.get("version")?;
        if version != FORMAT_VERSION {
            return Err(CliError::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let patience = match h.raw("early_stop_patience")? {
            "none" => None,
            _ => Some(h.get("early_stop_patience")?),
        };
        let train = TrainConfig {
            window: h.get("window")?,
            horizon: h.get("horizon")?,
            experts: h.get("experts")?,
            kernels: h.get("kernels")?,
            epsilon: h.get("epsilon")?,
            lr0: h.get("lr0")?,
            lr_min: h.get("lr_min")?,
            batch: h.get("batch")?,
            max_epochs: h.get("max_epochs")?,
            early_stop_patience: patience,
            val_fraction: h.get("val_fraction")?,
            seed: h.get("seed")?,
            variant: h.get("variant")?,
            normalize: h.get("normalize")?,
            clip_preprocessing: h.get("clip_preprocessing")?,
        };
        let metrics: usize = h.get("metrics")?;
        let count: usize = h.get("parameters")?;
        let scaler = match (h.floats("scaler_min")?, h.floats("scaler_max")?) {
            (None, None) => None,
            (Some(min), Some(max)) => Some(Scaler { min, max }),
            _ => return Err(CliError::Checkpoint("scaler_min/scaler_max disagree".into())),
        };

        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.len()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| CliError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.len()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            let mut size = 1usize;
            for _ in 0..rank {
                let e = r.len()?;
                size = size
                    .checked_mul(e)
                    .ok_or_else(|| CliError::Checkpoint(format!("{name}: extent overflow")))?;
                shape.push(e);
            }
            let raw = r.take(size.checked_mul(4).ok_or_else(|| {
                CliError::Checkpoint(format!("{name}: extent overflow"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Tensor::new(&shape, data)
                .map_err(|e| CliError::Checkpoint(format!("{name}: {e}")))?;
            params.push(Param { name, value });
        }
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!(
                "{} trailing bytes after last parameter",
                bytes.len() - r.pos
            )));
        }
        let model = CadModel::from_params(train.model_config(metrics), params)
            .map_err(|e| CliError::Checkpoint(format!("parameters disagree with header: {e}")))?;
        Self::new(train, scaler, model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CliError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CliError::Checkpoint(format!("length {v} too large")))
    }
}

struct Header<'a>(BTreeMap<&'a str, &'a str>);

impl<'a> Header<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Checkpoint(format!("malformed header line {line:?}")))?;
            map.insert(k, v);
        }
        Ok(Self(map))
    }

    fn raw(&self, key: &str) -> Result<&'a str> {
        self.0
            .get(key)
            .copied()
            .ok_or_else(|| CliError::Checkpoint(format!("header lacks {key}")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| CliError::Checkpoint(format!("header {key}={v} is invalid")))
    }

    fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let v = self.raw(key)?;
        if v == "none" {
            return Ok(None);
        }
        v.split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| CliError::Checkpoint(format!("header {key} holds {x:?}")))
            })
            .collect::<Result<Vec<f64>>>()
            .map(Some)
    }
}
