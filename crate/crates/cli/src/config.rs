use std::path::{Path, PathBuf};

use reactpref::dataset::{Mode, Split};
use reactpref::evaluation::EvalConfig;
use reactpref::judge::JudgeConfig;
use reactpref::preference::PreferenceConfig;
use reactpref::synth::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ConfigError;

/// Environment variable consulted for the output root when neither the
/// `--out` flag nor the `out` key is given.
pub const OUT_ENV: &str = "REACTPREF_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; every command writes into `<out>/<command>`.
    pub out: Option<PathBuf>,
    pub synth: WorldConfig,
    pub train: TrainSection,
    pub judge: JudgeSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            synth: WorldConfig::default(),
            train: TrainSection::default(),
            judge: JudgeSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Dataset directory written by `synth`; defaults to `<out>/synth`.
    pub data: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps; defaults to the schedule length.
    pub steps: Option<u64>,
    pub d: usize,
    pub init_scale: f64,
    pub trainer: PreferenceConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            data: None,
            resume: None,
            steps: None,
            d: 16,
            init_scale: 0.1,
            trainer: PreferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    pub data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub steps: Option<u64>,
    pub trainer: JudgeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub data: Option<PathBuf>,
    /// Model checkpoint; defaults to `<out>/train/model.ckpt`.
    pub model: Option<PathBuf>,
    /// Judge checkpoint, or `"planted"` for the judge built from the
    /// world structure; defaults to `<out>/train-judge/judge.ckpt`.
    pub judge: Option<String>,
    pub split: Split,
    /// Modes such as `"T+A+E"`; one report is written per mode.
    pub modes: Vec<String>,
    /// Also compute every metric with the brute-force oracle and fail on
    /// any disagreement.
    pub oracle: bool,
    pub metrics: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            data: None,
            model: None,
            judge: None,
            split: Split::Test,
            modes: Mode::EVAL_MODES.iter().map(Mode::to_string).collect(),
            oracle: false,
            metrics: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub data: Option<PathBuf>,
    /// Judge checkpoint or `"planted"`.
    pub judge: String,
    pub margins: Vec<f64>,
    pub lambda_ranks: Vec<f64>,
    pub lambda_gns: Vec<f64>,
    /// Training steps per cell.
    pub steps: u64,
    pub mode: String,
    /// Cells trained concurrently.
    pub parallelism: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            data: None,
            judge: PLANTED.to_string(),
            margins: vec![0.0, 0.5, 1.0, 2.0],
            lambda_ranks: vec![0.0, 0.25, 0.5, 1.0],
            lambda_gns: vec![0.0, 0.25, 0.5, 1.0],
            steps: 300,
            mode: Mode::TAE.to_string(),
            parallelism: 1,
        }
    }
}

pub const PLANTED: &str = "planted";

fn config_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Sets `path` (dot separated) inside `root`, creating objects on the way.
/// The value is read as JSON and taken as a plain string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(config_err(format!("`{}` is not a section", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            break;
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

impl RunConfig {
    /// Reads the optional JSON file, applies overrides in order and checks
    /// every section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut root = match path {
            Some(p) => {
                let bytes =
                    std::fs::read(p).map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_slice(&bytes).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                config_err(e.into_inner().to_string())
            } else {
                config_err(format!("{path}: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let section = |name: &str, r: reactpref::Result<()>| r.map_err(|e| config_err(format!("{name}: {e}")));
        section("synth", self.synth.validate())?;
        section("train.trainer", self.train.trainer.validate())?;
        section("judge.trainer", self.judge.trainer.validate())?;
        section("eval.metrics", self.eval.metrics.validate())?;
        if self.train.d == 0 {
            return Err(config_err("train.d must be positive"));
        }
        if !(self.train.init_scale >= 0.0 && self.train.init_scale.is_finite()) {
            return Err(config_err("train.init_scale must be finite and non-negative"));
        }
        if self.eval.modes.is_empty() {
            return Err(config_err("eval.modes is empty"));
        }
        self.eval_modes()?;
        self.sweep_mode()?;
        let s = &self.sweep;
        if s.margins.is_empty() || s.lambda_ranks.is_empty() || s.lambda_gns.is_empty() {
            return Err(config_err("sweep grid has an empty axis"));
        }
        if s.parallelism == 0 {
            return Err(config_err("sweep.parallelism must be at least 1"));
        }
        for (i, cell) in self.sweep_cells().iter().enumerate() {
            section(&format!("sweep cell {i}"), cell.validate())?;
        }
        Ok(())
    }

    pub fn eval_modes(&self) -> Result<Vec<Mode>, ConfigError> {
        self.eval.modes.iter().map(|m| parse_mode("eval.modes", m)).collect()
    }

    pub fn sweep_mode(&self) -> Result<Mode, ConfigError> {
        parse_mode("sweep.mode", &self.sweep.mode)
    }

    /// Trainer configuration of every sweep cell, margin-major.
    pub fn sweep_cells(&self) -> Vec<PreferenceConfig> {
        let s = &self.sweep;
        let mut out = Vec::with_capacity(s.margins.len() * s.lambda_ranks.len() * s.lambda_gns.len());
        for &margin in &s.margins {
            for &lambda_rank in &s.lambda_ranks {
                for &lambda_gn in &s.lambda_gns {
                    let mut c = self.train.trainer;
                    c.margin = margin;
                    c.lambda_rank = lambda_rank;
                    c.lambda_gn = lambda_gn;
                    c.optimizer.total_steps = s.steps;
                    out.push(c);
                }
            }
        }
        out
    }

    /// Output root: the flag, then the `out` key, then the environment.
    pub fn out_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn parse_mode(key: &str, s: &str) -> Result<Mode, ConfigError> {
    let mode: Mode = s.parse().map_err(|e| config_err(format!("{key}: {e}")))?;
    if !Mode::EVAL_MODES.contains(&mode) {
        return Err(config_err(format!("{key}: mode {mode} is not supported")));
    }
    Ok(mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
        assert_eq!(cfg.sweep_cells().len(), 64);
    }

    #[test]
    fn overrides_create_nested_keys() {
        let mut v = serde_json::json!({});
        apply_override(&mut v, "train.trainer.margin=1.5").unwrap();
        apply_override(&mut v, "eval.judge=planted").unwrap();
        apply_override(&mut v, "eval.modes=[\"T\",\"A+E\"]").unwrap();
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.train.trainer.margin, 1.5);
        assert_eq!(cfg.eval.judge.as_deref(), Some("planted"));
        assert_eq!(cfg.eval_modes().unwrap(), vec![Mode::T, Mode::AE]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::load(None, &["train.trainer.marginn=1".into()]).unwrap_err();
        assert!(err.0.contains("marginn"), "{}", err.0);
        assert!(err.0.contains("train.trainer"), "{}", err.0);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(RunConfig::load(None, &["eval.modes=[\"X\"]".into()]).is_err());
        assert!(RunConfig::load(None, &["synth.noise=2".into()]).is_err());
        assert!(RunConfig::load(None, &["sweep.margins=[]".into()]).is_err());
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
        assert!(RunConfig::load(None, &["seed.x=1".into()]).is_err());
    }
}
