//! Run configuration: a TOML file of `key = value` pairs, overridden by
//! `--set key=value` flags, on top of a dataset preset.

use std::path::{Path, PathBuf};

use cad_core::eval::Adjuster;
use cad_core::model::Variant;
use cad_core::train::TrainConfig;
use serde::Deserialize;

use crate::error::{CliError, Result};

/// Overrides the default output directory.
pub const OUTPUT_ROOT_ENV: &str = "CAD_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const DEFAULT_KPA_K: [usize; 3] = [10, 20, 30];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "text" => Ok(Self::Text),
            _ => Err(format!("unknown report format {s:?} (tsv, text)")),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: Option<String>,
    data_dir: Option<PathBuf>,
    entities: Option<Vec<String>>,
    output_dir: Option<PathBuf>,
    window: Option<usize>,
    horizon: Option<usize>,
    experts: Option<usize>,
    kernels: Option<usize>,
    epsilon: Option<f64>,
    lr0: Option<f64>,
    lr_min: Option<f64>,
    batch: Option<usize>,
    max_epochs: Option<usize>,
    early_stop_patience: Option<usize>,
    val_fraction: Option<f64>,
    seed: Option<u64>,
    variant: Option<String>,
    normalize: Option<bool>,
    clip_preprocessing: Option<bool>,
    eval_modes: Option<Vec<String>>,
    eval_k: Option<Vec<usize>>,
    report_format: Option<String>,
    jobs: Option<usize>,
}

/// Everything a multi-entity run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    /// Empty means every entity found under `data_dir`.
    pub entities: Vec<String>,
    pub output_dir: PathBuf,
    pub eval_modes: Vec<Adjuster>,
    pub report_format: ReportFormat,
    pub jobs: usize,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn set_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn preset(dataset: &str) -> Result<TrainConfig> {
    match dataset {
        "smd" => Ok(TrainConfig::smd()),
        "swat" => Ok(TrainConfig::swat()),
        "wadi" => Ok(TrainConfig::wadi()),
        _ => Err(usage(format!("unknown dataset preset {dataset:?} (smd, swat, wadi)"))),
    }
}

impl RunConfig {
    /// Loads `file` (if any), then applies `sets` in order. Precedence:
    /// preset < file < sets. `output_root` is the fallback output directory.
    pub fn load(file: Option<&Path>, sets: &[String], output_root: Option<PathBuf>) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = crate::io::read_text(p)?;
                text.parse::<toml::Table>()
                    .map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got {s:?}")))?;
            table.insert(k.trim().to_string(), set_value(v.trim()));
        }
        let raw: RawConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {}", e.message())))?;
        Self::from_raw(raw, output_root)
    }

    fn from_raw(raw: RawConfig, output_root: Option<PathBuf>) -> Result<Self> {
        let dataset = raw.dataset.unwrap_or_else(|| "smd".into());
        let mut t = preset(&dataset)?;
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = raw.$f { t.$f = v; } )* };
        }
        take!(window, horizon, experts, kernels, epsilon, lr0, lr_min, batch, max_epochs);
        take!(val_fraction, seed, normalize, clip_preprocessing);
        if let Some(p) = raw.early_stop_patience {
            t.early_stop_patience = (p > 0).then_some(p);
        }
        if let Some(v) = raw.variant {
            t.variant = v.parse::<Variant>().map_err(|e| usage(format!("variant: {e}")))?;
        }
        t.validate().map_err(|e| usage(format!("config: {e}")))?;

        let ks = raw.eval_k.unwrap_or_else(|| DEFAULT_KPA_K.to_vec());
        let modes = raw
            .eval_modes
            .unwrap_or_else(|| vec!["raw".into(), "pa".into(), "kpa".into()]);
        let eval_modes = expand_modes(&modes, &ks)?;
        let report_format = match raw.report_format {
            Some(f) => f.parse().map_err(usage)?,
            None => ReportFormat::Tsv,
        };
        let jobs = raw.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err(usage("jobs must be >= 1"));
        }
        Ok(Self {
            dataset,
            train: t,
            data_dir: raw.data_dir,
            entities: raw.entities.unwrap_or_default(),
            output_dir: raw
                .output_dir
                .or(output_root)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT)),
            eval_modes,
            report_format,
            jobs,
        })
    }

    /// Output root taken from the environment, if set.
    pub fn env_output_root() -> Option<PathBuf> {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    pub fn entity_dir(&self, entity: &str) -> PathBuf {
        self.output_dir.join(entity)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| usage("no data_dir configured (config file, --set data_dir=..., or --data-dir)"))
    }

    /// Input files for every configured entity. When no entities are listed
    /// they are discovered under `data_dir`.
    pub fn entity_paths(&self) -> Result<Vec<EntityPaths>> {
        let root = self.data_dir()?;
        let names = if self.entities.is_empty() {
            discover_entities(root)?
        } else {
            self.entities.clone()
        };
        if names.is_empty() {
            return Err(CliError::parse(root, "no entities found"));
        }
        for n in &names {
            if n.is_empty() || n.contains(['/', '\\']) || n == "." || n == ".." {
                return Err(usage(format!("invalid entity name {n:?}")));
            }
        }
        Ok(names.iter().map(|n| EntityPaths::resolve(root, n)).collect())
    }
}

/// Turns mode names into adjusters; a bare `kpa` expands over `ks`.
pub fn expand_modes(modes: &[String], ks: &[usize]) -> Result<Vec<Adjuster>> {
    let mut out = Vec::new();
    for m in modes {
        if m == "kpa" {
            if ks.is_empty() {
                return Err(usage("mode kpa needs at least one k"));
            }
            out.extend(ks.iter().map(|&k| Adjuster::Kpa(k)));
        } else {
            out.push(m.parse::<Adjuster>().map_err(|e| usage(format!("mode {m:?}: {e}")))?);
        }
    }
    if out.is_empty() {
        return Err(usage("no evaluation modes"));
    }
    Ok(out)
}

/// Input files of one entity.
///
/// Either `<data>/<entity>/{train,test,test_label}.csv` or the flat layout
/// `<data>/{train,test,test_label}/<entity>.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityPaths {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
    pub labels: PathBuf,
}

impl EntityPaths {
    pub fn resolve(root: &Path, name: &str) -> Self {
        let nested = root.join(name);
        let flat = root.join("train").join(format!("{name}.txt"));
        if !nested.join("train.csv").exists() && flat.exists() {
            return Self {
                name: name.into(),
                train: flat,
                test: root.join("test").join(format!("{name}.txt")),
                labels: root.join("test_label").join(format!("{name}.txt")),
            };
        }
        Self {
            name: name.into(),
            train: nested.join("train.csv"),
            test: nested.join("test.csv"),
            labels: nested.join("test_label.csv"),
        }
    }
}

fn discover_entities(root: &Path) -> Result<Vec<String>> {
    let list = |dir: &Path| -> Result<Vec<std::fs::DirEntry>> {
        std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| CliError::io(dir, e))
    };
    let mut names: Vec<String> = list(root)?
        .into_iter()
        .filter(|e| e.path().join("train.csv").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    let flat = root.join("train");
    if names.is_empty() && flat.is_dir() {
        names = list(&flat)?
            .into_iter()
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "txt").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
            })
            .collect();
    }
    names.sort();
    Ok(names)
}
