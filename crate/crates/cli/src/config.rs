//! Flat key-value experiment configuration.
//!
//! The config file is plain text, one `key = value` pair per line, `#`
//! comments ignored. Command-line `--set key=value` flags override file
//! entries. Unknown keys and out-of-range values are reported with the file
//! line number and exit as usage errors.

use std::fmt;
use std::path::{Path, PathBuf};

use ttrf_core::backbone::PretrainConfig;
use ttrf_core::iamae::{InferenceMode, MaskingConfig, SslConfig};
use ttrf_core::intervention::VariantKind;
use ttrf_core::selection::{CandidateSet, SelectionConfig, SelectionMode};

#[derive(Debug)]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(location: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { location: location.into(), message: message.into() }
}

/// How the experiment obtains its graph.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Synthetic stochastic block model.
    Sbm { n: usize, classes: usize, dim: usize, p_in: f64, p_out: f64 },
    /// The four-file text layout.
    Files { edges: PathBuf, features: PathBuf, labels: PathBuf, split: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftConfigKind {
    None,
    Covariate,
    ConceptDegree,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Seed for dataset generation, split generation, and the shift.
    pub data_seed: u64,
    pub shift_kind: ShiftConfigKind,
    pub shift_strength: f64,
    pub shift_planes: usize,
    pub shift_extra_strength: f64,
    pub shift_fraction: f64,
    pub degree_quantile: f64,
    pub concept_offset: f64,
    pub train_fraction: f64,
    pub pretrain: PretrainConfig,
    pub selection: SelectionConfig,
    pub variant: VariantKind,
    pub rank: usize,
    pub layers: Vec<usize>,
    pub masking: MaskingConfig,
    pub ssl: SslConfig,
    pub inference: InferenceMode,
    /// Run seeds for multi-seed commands.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Sbm { n: 500, classes: 4, dim: 16, p_in: 0.08, p_out: 0.008 },
            data_seed: 0,
            shift_kind: ShiftConfigKind::Covariate,
            shift_strength: 0.35,
            shift_planes: 2,
            shift_extra_strength: 0.0,
            shift_fraction: 0.3,
            degree_quantile: 0.7,
            concept_offset: 3.0,
            train_fraction: 0.6,
            pretrain: PretrainConfig::default(),
            selection: SelectionConfig::default(),
            variant: VariantKind::LoReft,
            rank: 4,
            layers: vec![1],
            masking: MaskingConfig::default(),
            ssl: SslConfig { epochs: 50, ..Default::default() },
            inference: InferenceMode::GatedDualPass,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(path.display().to_string(), e.to_string()))?;
        let mut cfg = ExperimentConfig::default();
        let mut file_paths: FilePaths = FilePaths::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let location = format!("{}:{}", path.display(), lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(&location, "expected `key = value`"))?;
            cfg.apply(key.trim(), value.trim(), &location, &mut file_paths)?;
        }
        file_paths.finish(&mut cfg, &path.display().to_string())?;
        cfg.validate(&path.display().to_string())?;
        Ok(cfg)
    }

    /// Apply `--set key=value` overrides after the file is loaded.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        let mut file_paths = FilePaths::default();
        for item in overrides {
            let location = format!("--set {item}");
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| cfg_err(&location, "expected key=value"))?;
            self.apply(key.trim(), value.trim(), &location, &mut file_paths)?;
        }
        file_paths.finish(self, "--set")?;
        self.validate("--set")?;
        Ok(())
    }

    fn apply(
        &mut self,
        key: &str,
        value: &str,
        location: &str,
        file_paths: &mut FilePaths,
    ) -> Result<(), ConfigError> {
        let parse_usize = |v: &str| -> Result<usize, ConfigError> {
            v.parse().map_err(|_| cfg_err(location, format!("bad integer `{v}`")))
        };
        let parse_f64 = |v: &str| -> Result<f64, ConfigError> {
            v.parse().map_err(|_| cfg_err(location, format!("bad float `{v}`")))
        };
        let parse_u64 = |v: &str| -> Result<u64, ConfigError> {
            v.parse().map_err(|_| cfg_err(location, format!("bad seed `{v}`")))
        };
        let parse_bool = |v: &str| -> Result<bool, ConfigError> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(cfg_err(location, format!("bad bool `{v}`"))),
            }
        };
        match key {
            "data.kind" => match value {
                "sbm" => {
                    if !matches!(self.data, DataSource::Sbm { .. }) {
                        self.data = ExperimentConfig::default().data;
                    }
                }
                "files" => file_paths.requested = true,
                other => return Err(cfg_err(location, format!("unknown data.kind `{other}`"))),
            },
            "data.n" => self.with_sbm(location, |s| {
                s.0 = parse_usize(value)?;
                Ok(())
            })?,
            "data.classes" => self.with_sbm(location, |s| {
                s.1 = parse_usize(value)?;
                Ok(())
            })?,
            "data.dim" => self.with_sbm(location, |s| {
                s.2 = parse_usize(value)?;
                Ok(())
            })?,
            "data.p_in" => self.with_sbm(location, |s| {
                s.3 = parse_f64(value)?;
                Ok(())
            })?,
            "data.p_out" => self.with_sbm(location, |s| {
                s.4 = parse_f64(value)?;
                Ok(())
            })?,
            "data.edges" => file_paths.edges = Some(PathBuf::from(value)),
            "data.features" => file_paths.features = Some(PathBuf::from(value)),
            "data.labels" => file_paths.labels = Some(PathBuf::from(value)),
            "data.split" => file_paths.split = Some(PathBuf::from(value)),
            "data.seed" => self.data_seed = parse_u64(value)?,
            "shift.kind" => {
                self.shift_kind = match value {
                    "none" => ShiftConfigKind::None,
                    "covariate" => ShiftConfigKind::Covariate,
                    "concept" => ShiftConfigKind::ConceptDegree,
                    other => return Err(cfg_err(location, format!("unknown shift.kind `{other}`"))),
                }
            }
            "shift.strength" => self.shift_strength = parse_f64(value)?,
            "shift.planes" => self.shift_planes = parse_usize(value)?,
            "shift.fraction" => self.shift_fraction = parse_f64(value)?,
            "shift.extra_strength" => self.shift_extra_strength = parse_f64(value)?,
            "shift.quantile" => self.degree_quantile = parse_f64(value)?,
            "shift.offset" => self.concept_offset = parse_f64(value)?,
            "shift.train_fraction" => self.train_fraction = parse_f64(value)?,
            "backbone.depth" => self.pretrain.num_layers = parse_usize(value)?,
            "backbone.hidden" => self.pretrain.hidden_dim = parse_usize(value)?,
            "backbone.lr" => self.pretrain.lr = parse_f64(value)?,
            "backbone.max_epochs" => self.pretrain.max_epochs = parse_usize(value)?,
            "backbone.patience" => self.pretrain.patience = parse_usize(value)?,
            "selection.alpha_gate" => self.selection.alpha_gate = parse_f64(value)?,
            "selection.threshold" => {
                self.selection.entropy_threshold = if value == "median" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            "selection.mode" => {
                self.selection.mode = if value == "bernoulli" {
                    SelectionMode::Bernoulli
                } else if let Some(q) = value.strip_prefix("top:") {
                    SelectionMode::TopFraction(parse_f64(q)?)
                } else {
                    return Err(cfg_err(
                        location,
                        format!("unknown selection.mode `{value}` (bernoulli | top:<q>)"),
                    ));
                }
            }
            "selection.candidates" => {
                self.selection.candidate_set = match value {
                    "test_only" => CandidateSet::TestOnly,
                    "all_nodes" => CandidateSet::AllNodes,
                    other => {
                        return Err(cfg_err(location, format!("unknown candidate set `{other}`")))
                    }
                }
            }
            "intervention.variant" => {
                self.variant = VariantKind::parse(value).ok_or_else(|| {
                    cfg_err(location, format!("unknown variant `{value}` (loreft|direft|uv)"))
                })?
            }
            "intervention.rank" => self.rank = parse_usize(value)?,
            "intervention.layers" => {
                self.layers = value
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| cfg_err(location, format!("bad layer `{t}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
            }
            "masking.rho" => self.masking.rho = parse_f64(value)?,
            "masking.beta" => self.masking.beta = parse_f64(value)?,
            "masking.eps" => self.masking.eps = parse_f64(value)?,
            "ssl.gamma" => self.ssl.gamma = parse_f64(value)?,
            "ssl.lambda_entropy" => self.ssl.lambda_entropy = parse_f64(value)?,
            "ssl.epochs" => self.ssl.epochs = parse_usize(value)?,
            "ssl.lr" => self.ssl.lr = parse_f64(value)?,
            "ssl.resample_targets" => self.ssl.resample_targets = parse_bool(value)?,
            "eval.mode" => {
                self.inference = InferenceMode::parse(value).ok_or_else(|| {
                    cfg_err(
                        location,
                        format!("unknown eval.mode `{value}` (gated_dual_pass|propagating)"),
                    )
                })?
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|t| parse_u64(t.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
            }
            other => return Err(cfg_err(location, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn with_sbm(
        &mut self,
        location: &str,
        f: impl FnOnce(&mut (usize, usize, usize, f64, f64)) -> Result<(), ConfigError>,
    ) -> Result<(), ConfigError> {
        let DataSource::Sbm { n, classes, dim, p_in, p_out } = &mut self.data else {
            return Err(cfg_err(location, "data.* sbm keys require data.kind = sbm"));
        };
        let mut tuple = (*n, *classes, *dim, *p_in, *p_out);
        f(&mut tuple)?;
        (*n, *classes, *dim, *p_in, *p_out) = tuple;
        Ok(())
    }

    fn validate(&self, location: &str) -> Result<(), ConfigError> {
        self.selection.validate().map_err(|m| cfg_err(location, m))?;
        self.masking.validate().map_err(|m| cfg_err(location, m))?;
        self.ssl.validate().map_err(|m| cfg_err(location, m))?;
        if self.rank == 0 {
            return Err(cfg_err(location, "intervention.rank must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(cfg_err(location, "intervention.layers must not be empty"));
        }
        if self.layers.iter().any(|&l| l == 0 || l > self.pretrain.num_layers) {
            return Err(cfg_err(
                location,
                format!(
                    "intervention.layers must lie in 1..={} (backbone depth)",
                    self.pretrain.num_layers
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return Err(cfg_err(location, "shift.strength must lie in [0, 1]"));
        }
        if !(0.0 < self.degree_quantile && self.degree_quantile < 1.0) {
            return Err(cfg_err(location, "shift.quantile must lie in (0, 1)"));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 0.9) {
            return Err(cfg_err(location, "shift.train_fraction must lie in (0, 0.9)"));
        }
        if self.seeds.is_empty() {
            return Err(cfg_err(location, "seeds must not be empty"));
        }
        Ok(())
    }
}

/// Collects `data.*` file keys until all four are present.
#[derive(Default)]
struct FilePaths {
    requested: bool,
    edges: Option<PathBuf>,
    features: Option<PathBuf>,
    labels: Option<PathBuf>,
    split: Option<PathBuf>,
}

impl FilePaths {
    fn finish(self, cfg: &mut ExperimentConfig, location: &str) -> Result<(), ConfigError> {
        let any_path = self.edges.is_some()
            || self.features.is_some()
            || self.labels.is_some()
            || self.split.is_some();
        if !self.requested && !any_path {
            return Ok(());
        }
        if !any_path && self.requested {
            return Err(cfg_err(location, "data.kind = files requires the four data.* paths"));
        }
        // Partial path sets re-use previous values only when data is already
        // file-based; otherwise all four are required.
        let existing = match &cfg.data {
            DataSource::Files { edges, features, labels, split } => Some((
                edges.clone(),
                features.clone(),
                labels.clone(),
                split.clone(),
            )),
            DataSource::Sbm { .. } => None,
        };
        let pick = |new: Option<PathBuf>,
                    old: Option<PathBuf>,
                    name: &str|
         -> Result<PathBuf, ConfigError> {
            new.or(old).ok_or_else(|| cfg_err(location, format!("missing data.{name}")))
        };
        let (oe, of, ol, os) = match existing {
            Some((a, b, c, d)) => (Some(a), Some(b), Some(c), Some(d)),
            None => (None, None, None, None),
        };
        cfg.data = DataSource::Files {
            edges: pick(self.edges, oe, "edges")?,
            features: pick(self.features, of, "features")?,
            labels: pick(self.labels, ol, "labels")?,
            split: pick(self.split, os, "split")?,
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, text).unwrap();
        ExperimentConfig::from_file(&path)
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = parse("# empty\n").unwrap();
        assert_eq!(cfg.rank, 4);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn keys_parse_and_apply() {
        let cfg = parse(
            "data.n = 200\nintervention.variant = uv\nintervention.layers = 1,2\n\
             backbone.depth = 3\nselection.mode = top:0.1\nseeds = 7,8\nssl.gamma = 3\n",
        )
        .unwrap();
        assert!(matches!(cfg.data, DataSource::Sbm { n: 200, .. }));
        assert_eq!(cfg.variant, VariantKind::Uv);
        assert_eq!(cfg.layers, vec![1, 2]);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert!(matches!(cfg.selection.mode, SelectionMode::TopFraction(q) if (q - 0.1).abs() < 1e-12));
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse("data.n = 10\nnot.a.key = 3\n").unwrap_err();
        assert!(err.location.ends_with(":2"), "location {}", err.location);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        assert!(parse("masking.rho = 1.5\n").is_err());
        assert!(parse("ssl.gamma = 0.5\n").is_err());
        assert!(parse("intervention.layers = 5\n").is_err());
        assert!(parse("selection.mode = nonsense\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = parse("intervention.rank = 2\n").unwrap();
        cfg.apply_overrides(&["intervention.rank=8".to_string()]).unwrap();
        assert_eq!(cfg.rank, 8);
        assert!(cfg.apply_overrides(&["intervention.rank=0".to_string()]).is_err());
    }
}
