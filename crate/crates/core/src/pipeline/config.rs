//! Flat `key = value` run configuration with dotted namespaces. Unknown
//! keys are hard errors; unspecified keys fall back to the reference
//! defaults, so an empty file is a valid config.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::metrics::ScoreAnchors;
use crate::sampler::{GradientMode, GuidanceConfig};
use crate::segmentation::{SegTrainConfig, SegWeights};

/// Parameters the sweep may search over, in the canonical sampling order.
/// `eta` behaves like a rate and is drawn log-uniformly; the rest uniformly.
pub const SWEEPABLE: [&str; 7] =
    ["eta", "beta", "omega", "omega_s", "omega_v", "theta", "sigma_blur"];

pub fn is_log_uniform(name: &str) -> bool {
    name == "eta"
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub trials: usize,
    /// Ranges in canonical order, independent of config file line order.
    pub ranges: Vec<SweepRange>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { trials: 20, ranges: Vec::new() }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Config("sweep.trials must be >= 1".into()));
        }
        for r in &self.ranges {
            if !SWEEPABLE.contains(&r.name.as_str()) {
                return Err(Error::Config(format!("unknown sweep parameter {}", r.name)));
            }
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi) {
                return Err(Error::Config(format!(
                    "sweep.{}: need finite min < max, got ({}, {})",
                    r.name, r.lo, r.hi
                )));
            }
            if is_log_uniform(&r.name) && r.lo <= 0.0 {
                return Err(Error::Config(format!(
                    "sweep.{}: log-uniform range needs min > 0",
                    r.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunPaths {
    pub dataset: String,
    pub checkpoint: String,
    pub seg_checkpoint: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub seg: SegWeights,
    pub guidance: GuidanceConfig,
    pub train: TrainConfig,
    pub seg_train: SegTrainConfig,
    pub anchors: ScoreAnchors,
    /// Constant downstream score component (no external evaluator ships).
    pub downstream: f64,
    pub paths: RunPaths,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seg: SegWeights::default(),
            guidance: GuidanceConfig::default(),
            train: TrainConfig::default(),
            seg_train: SegTrainConfig::default(),
            anchors: ScoreAnchors::default(),
            downstream: 0.5,
            paths: RunPaths::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let scope = |ns: &str, r: Result<()>| {
            r.map_err(|e| Error::Config(format!("{ns}: {e}")))
        };
        scope("seg", self.seg.validate())?;
        scope("guidance", self.guidance.validate())?;
        scope("train", self.train.validate())?;
        scope("seg_train", self.seg_train.validate())?;
        self.anchors.validate()?;
        if !(0.0..=1.0).contains(&self.downstream) {
            return Err(Error::Config(format!(
                "downstream = {} outside [0,1]",
                self.downstream
            )));
        }
        self.sweep.validate()
    }
}

fn num<T: std::str::FromStr>(key: &str, val: &str) -> Result<T> {
    val.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {val:?}")))
}

fn boolean(key: &str, val: &str) -> Result<bool> {
    match val {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {val:?}"))),
    }
}

fn gradient_mode(key: &str, val: &str) -> Result<GradientMode> {
    match val {
        "through-denoiser" => Ok(GradientMode::ThroughDenoiser),
        "at-estimate" => Ok(GradientMode::AtEstimate),
        _ => Err(Error::Config(format!(
            "{key}: expected through-denoiser or at-estimate, got {val:?}"
        ))),
    }
}

fn gradient_mode_str(m: GradientMode) -> &'static str {
    match m {
        GradientMode::ThroughDenoiser => "through-denoiser",
        GradientMode::AtEstimate => "at-estimate",
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    let mut lo: BTreeMap<String, f64> = BTreeMap::new();
    let mut hi: BTreeMap<String, f64> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, val) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {line:?}", idx + 1))
        })?;
        let (key, val) = (key.trim(), val.trim());
        match key {
            "seed" => c.seed = num(key, val)?,
            "downstream" => c.downstream = num(key, val)?,
            "seg.omega" => c.seg.omega = num(key, val)?,
            "seg.omega_v" => c.seg.omega_v = num(key, val)?,
            "seg.omega_s" => c.seg.omega_s = num(key, val)?,
            "seg.theta" => c.seg.theta = num(key, val)?,
            "seg.sigma_blur" => c.seg.sigma_blur = num(key, val)?,
            "guidance.steps" => c.guidance.steps = num(key, val)?,
            "guidance.eta" => c.guidance.eta = num(key, val)?,
            "guidance.beta" => c.guidance.beta = num(key, val)?,
            "guidance.fixed_top" => c.guidance.fixed_top = num(key, val)?,
            "guidance.fixed_bottom" => c.guidance.fixed_bottom = num(key, val)?,
            "guidance.gradient_mode" => c.guidance.gradient_mode = gradient_mode(key, val)?,
            "train.lambda_kid" => c.train.lambda_kid = num(key, val)?,
            "train.n_kid" => c.train.n_kid = num(key, val)?,
            "train.kid_every" => c.train.kid_every = num(key, val)?,
            "train.ema_decay" => c.train.ema_decay = num(key, val)?,
            "train.lr_pretrain" => c.train.lr_pretrain = num(key, val)?,
            "train.lr_finetune" => c.train.lr_finetune = num(key, val)?,
            "train.finetune" => c.train.finetune = boolean(key, val)?,
            "train.batch_size" => c.train.batch_size = num(key, val)?,
            "train.steps" => c.train.steps = num(key, val)?,
            "train.seed" => c.train.seed = num(key, val)?,
            "seg_train.learning_rate" => c.seg_train.learning_rate = num(key, val)?,
            "seg_train.steps" => c.seg_train.steps = num(key, val)?,
            "seg_train.batch_size" => c.seg_train.batch_size = num(key, val)?,
            "seg_train.seed" => c.seg_train.seed = num(key, val)?,
            "seg_train.base_channels" => c.seg_train.base_channels = num(key, val)?,
            "anchors.contrast_min" => c.anchors.contrast.0 = num(key, val)?,
            "anchors.contrast_max" => c.anchors.contrast.1 = num(key, val)?,
            "anchors.kid_min" => c.anchors.kid.0 = num(key, val)?,
            "anchors.kid_max" => c.anchors.kid.1 = num(key, val)?,
            "anchors.structure_min" => c.anchors.structure.0 = num(key, val)?,
            "anchors.structure_max" => c.anchors.structure.1 = num(key, val)?,
            "paths.dataset" => c.paths.dataset = val.to_string(),
            "paths.checkpoint" => c.paths.checkpoint = val.to_string(),
            "paths.seg_checkpoint" => c.paths.seg_checkpoint = val.to_string(),
            "paths.output" => c.paths.output = val.to_string(),
            "sweep.trials" => c.sweep.trials = num(key, val)?,
            _ => {
                let Some(rest) = key.strip_prefix("sweep.") else {
                    return Err(Error::Config(format!("unknown key {key}")));
                };
                if let Some(name) = rest.strip_suffix("_min") {
                    if !SWEEPABLE.contains(&name) {
                        return Err(Error::Config(format!("unknown key {key}")));
                    }
                    lo.insert(name.to_string(), num(key, val)?);
                } else if let Some(name) = rest.strip_suffix("_max") {
                    if !SWEEPABLE.contains(&name) {
                        return Err(Error::Config(format!("unknown key {key}")));
                    }
                    hi.insert(name.to_string(), num(key, val)?);
                } else {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
            }
        }
    }
    for name in lo.keys() {
        if !hi.contains_key(name) {
            return Err(Error::Config(format!("sweep.{name}_min given without sweep.{name}_max")));
        }
    }
    for name in hi.keys() {
        if !lo.contains_key(name) {
            return Err(Error::Config(format!("sweep.{name}_max given without sweep.{name}_min")));
        }
    }
    c.sweep.ranges = SWEEPABLE
        .iter()
        .filter_map(|&name| {
            lo.get(name).map(|&l| SweepRange { name: name.to_string(), lo: l, hi: hi[name] })
        })
        .collect();
    c.validate()?;
    Ok(c)
}

/// Canonical serialization: every key in a fixed order, floats in Rust's
/// shortest round-trip form, so save -> load -> save is a fixpoint.
pub fn config_to_string(c: &RunConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("seed", c.seed.to_string());
    kv("downstream", c.downstream.to_string());
    kv("seg.omega", c.seg.omega.to_string());
    kv("seg.omega_v", c.seg.omega_v.to_string());
    kv("seg.omega_s", c.seg.omega_s.to_string());
    kv("seg.theta", c.seg.theta.to_string());
    kv("seg.sigma_blur", c.seg.sigma_blur.to_string());
    kv("guidance.steps", c.guidance.steps.to_string());
    kv("guidance.eta", c.guidance.eta.to_string());
    kv("guidance.beta", c.guidance.beta.to_string());
    kv("guidance.fixed_top", c.guidance.fixed_top.to_string());
    kv("guidance.fixed_bottom", c.guidance.fixed_bottom.to_string());
    kv("guidance.gradient_mode", gradient_mode_str(c.guidance.gradient_mode).to_string());
    kv("train.lambda_kid", c.train.lambda_kid.to_string());
    kv("train.n_kid", c.train.n_kid.to_string());
    kv("train.kid_every", c.train.kid_every.to_string());
    kv("train.ema_decay", c.train.ema_decay.to_string());
    kv("train.lr_pretrain", c.train.lr_pretrain.to_string());
    kv("train.lr_finetune", c.train.lr_finetune.to_string());
    kv("train.finetune", c.train.finetune.to_string());
    kv("train.batch_size", c.train.batch_size.to_string());
    kv("train.steps", c.train.steps.to_string());
    kv("train.seed", c.train.seed.to_string());
    kv("seg_train.learning_rate", c.seg_train.learning_rate.to_string());
    kv("seg_train.steps", c.seg_train.steps.to_string());
    kv("seg_train.batch_size", c.seg_train.batch_size.to_string());
    kv("seg_train.seed", c.seg_train.seed.to_string());
    kv("seg_train.base_channels", c.seg_train.base_channels.to_string());
    kv("anchors.contrast_min", c.anchors.contrast.0.to_string());
    kv("anchors.contrast_max", c.anchors.contrast.1.to_string());
    kv("anchors.kid_min", c.anchors.kid.0.to_string());
    kv("anchors.kid_max", c.anchors.kid.1.to_string());
    kv("anchors.structure_min", c.anchors.structure.0.to_string());
    kv("anchors.structure_max", c.anchors.structure.1.to_string());
    for (k, v) in [
        ("paths.dataset", &c.paths.dataset),
        ("paths.checkpoint", &c.paths.checkpoint),
        ("paths.seg_checkpoint", &c.paths.seg_checkpoint),
        ("paths.output", &c.paths.output),
    ] {
        if !v.is_empty() {
            kv(k, v.clone());
        }
    }
    kv("sweep.trials", c.sweep.trials.to_string());
    for r in &c.sweep.ranges {
        kv(&format!("sweep.{}_min", r.name), r.lo.to_string());
        kv(&format!("sweep.{}_max", r.name), r.hi.to_string());
    }
    s
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path, format!("read config: {e}")))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_config(path: &Path, c: &RunConfig) -> Result<()> {
    atomic_write(path, config_to_string(c).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_reference_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.guidance.steps, 480);
        assert_eq!(c.guidance.eta, 0.007);
        assert_eq!(c.guidance.beta, 1.6);
        assert_eq!(c.seg.omega, 1.0);
        assert_eq!(c.seg.omega_s, 2.0);
        assert_eq!(c.seg.omega_v, 0.3);
        assert_eq!(c.seg.theta, 0.176);
        assert_eq!(c.seg.sigma_blur, 4.2);
    }

    #[test]
    fn comments_blanks_and_overrides_parse() {
        let text = "\n# a comment\n  guidance.eta = 0.02\nseed = 7\ntrain.finetune = true\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.guidance.eta, 0.02);
        assert_eq!(c.seed, 7);
        assert!(c.train.finetune);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse_config("guidance.etaa = 0.1").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert!(parse_config("nonsense").is_err());
    }

    #[test]
    fn range_violation_names_the_field() {
        let err = parse_config("guidance.eta = -1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("guidance") && msg.contains("eta"), "{msg}");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = RunConfig::default();
        c.seed = 41;
        c.guidance.eta = 0.0123;
        c.guidance.gradient_mode = GradientMode::AtEstimate;
        c.paths.dataset = "data/phantoms".into();
        c.anchors.kid = (0.0, 25.0);
        c.sweep.trials = 5;
        c.sweep.ranges = vec![
            SweepRange { name: "eta".into(), lo: 1e-4, hi: 1e-1 },
            SweepRange { name: "theta".into(), lo: 0.05, hi: 0.4 },
        ];
        let text = config_to_string(&c);
        let back = parse_config(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(config_to_string(&back), text);
    }

    #[test]
    fn file_round_trip(){
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        let mut c = RunConfig::default();
        c.downstream = 0.25;
        save_config(&p, &c).unwrap();
        assert_eq!(load_config(&p).unwrap(), c);
    }

    #[test]
    fn sweep_ranges_validate_and_canonicalize() {
        let c = parse_config(
            "sweep.theta_min = 0.1\nsweep.theta_max = 0.3\nsweep.eta_min = 0.001\nsweep.eta_max = 0.1\n",
        )
        .unwrap();
        // canonical order puts eta first regardless of file order
        assert_eq!(c.sweep.ranges[0].name, "eta");
        assert_eq!(c.sweep.ranges[1].name, "theta");
        assert!(parse_config("sweep.eta_min = 0.1").is_err());
        assert!(parse_config("sweep.eta_min = 0\nsweep.eta_max = 1").is_err()); // log-uniform needs > 0
        assert!(parse_config("sweep.bogus_min = 0\nsweep.bogus_max = 1").is_err());
        assert!(parse_config("sweep.beta_min = 2\nsweep.beta_max = 1").is_err());
    }

    #[test]
    fn gradient_mode_strings() {
        assert!(parse_config("guidance.gradient_mode = at-estimate").is_ok());
        assert!(parse_config("guidance.gradient_mode = sideways").is_err());
    }
}
