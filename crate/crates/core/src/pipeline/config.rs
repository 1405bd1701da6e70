use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::affinity::{AffinityConfig, RefinerRegistry};
use crate::backbone::EncoderConfig;
use crate::error::{Error, Result};
use crate::refine::{AffinityLossForm, Thresholds};

pub const SEED_ENV: &str = "UNIA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub affinity: AffinityConfig,
    /// Weight of the distribution loss.
    pub alpha: f64,
    /// Weight of the contrastive affinity loss.
    pub beta: f64,
    /// Weight of the segmentation loss.
    pub gamma: f64,
    pub lambda_fg: f64,
    pub lambda_bg: f64,
    /// Confidence threshold for the reweighted CAM.
    pub lambda_conf: f64,
    pub k_samples: usize,
    pub tau: f64,
    pub aff_log: bool,
    pub pair_budget: usize,
    /// Window side for the spatial prototypes.
    pub window: usize,
    /// Refiners (by registry name) producing the second and third masks.
    pub p2_refiner: String,
    pub p3_refiner: String,
    /// Fraction of iterations before the distribution and affinity losses
    /// and the masked features switch on.
    pub warmup_frac: f64,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            encoder: EncoderConfig::default(),
            affinity: AffinityConfig::default(),
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.15,
            lambda_fg: 0.55,
            lambda_bg: 0.35,
            lambda_conf: 0.7,
            k_samples: 50,
            tau: 0.1,
            aff_log: false,
            pair_budget: 2048,
            window: 2,
            p2_refiner: "par".into(),
            p3_refiner: "random-walk".into(),
            warmup_frac: 0.2,
            iterations: 2000,
            lr: 3e-4,
            weight_decay: 0.01,
            poly_power: 0.9,
            seed: 0,
            checkpoint_every: 0,
            data_dir: PathBuf::from("data/train"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.affinity.validate()?;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return Err(Error::Param(format!("{name} must be non-negative")));
            }
        }
        if !(0.0 < self.lambda_bg && self.lambda_bg < self.lambda_fg && self.lambda_fg < 1.0) {
            return Err(Error::Param("need 0 < lambda_bg < lambda_fg < 1".into()));
        }
        if !(self.lambda_conf > 0.0 && self.lambda_conf < 1.0) {
            return Err(Error::Param("lambda_conf must be in (0, 1)".into()));
        }
        if self.iterations == 0 || self.k_samples == 0 || self.pair_budget == 0 {
            return Err(Error::Param("iterations, k_samples and pair_budget must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Param("tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Param("warmup_frac must be in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Param("lr must be positive, weight_decay and poly_power non-negative".into()));
        }
        let grid = self.encoder.grid();
        if self.window == 0 || self.window > grid {
            return Err(Error::Param(format!("window {} does not fit the {grid}x{grid} grid", self.window)));
        }
        let reg = RefinerRegistry::default();
        for name in [&self.p2_refiner, &self.p3_refiner] {
            reg.build(name, &self.affinity)?;
        }
        Ok(())
    }

    /// First iteration that runs the full objective.
    pub fn warmup_iter(&self) -> usize {
        (self.warmup_frac * self.iterations as f64).floor() as usize
    }

    pub fn is_warm(&self, iter: usize) -> bool {
        iter >= self.warmup_iter()
    }

    /// Whether a trained model uses the masked features.
    pub fn uses_masking(&self) -> bool {
        self.warmup_iter() < self.iterations
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            fg: self.lambda_fg,
            bg: self.lambda_bg,
        }
    }

    pub fn loss_form(&self) -> AffinityLossForm {
        AffinityLossForm::from_flag(self.aff_log)
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Param(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Set one field from a `--key value` pair. Keys may be kebab- or
    /// snake-case and name a top-level field or a field of a nested section
    /// (`channels`, `sinkhorn_iters`, `sigma_rgb`, ...) as long as the name
    /// is unambiguous. Values are parsed as JSON, falling back to a string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim_start_matches("--").replace('-', "_");
        let mut tree = serde_json::to_value(&*self)?;
        let mut hits = Vec::new();
        find_key(&tree, &key, &mut Vec::new(), &mut hits);
        let path = match hits.len() {
            0 => return Err(Error::Param(format!("unknown config key {key:?}"))),
            1 => hits.remove(0),
            _ => {
                // a top-level field wins over nested ones
                match hits.iter().position(|p| p.len() == 1) {
                    Some(i) => hits.remove(i),
                    None => return Err(Error::Param(format!("config key {key:?} is ambiguous"))),
                }
            }
        };
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut slot = &mut tree;
        for part in &path {
            slot = slot.get_mut(part).expect("path found above");
        }
        let previous = std::mem::replace(slot, parsed);
        if previous.is_string() && !slot.is_string() {
            *slot = Value::String(value.to_string());
        }
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Param(format!("bad value {value:?} for {key}: {e}")))?;
        Ok(())
    }
}

fn find_key(v: &Value, key: &str, path: &mut Vec<String>, hits: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            path.push(k.clone());
            if k == key {
                hits.push(path.clone());
            }
            find_key(child, key, path, hits);
            path.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.alpha, cfg.beta, cfg.gamma), (0.1, 0.1, 0.15));
        assert_eq!(cfg.warmup_iter(), 400);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut cfg = Config::default();
        cfg.apply_override("--rw-iters", "3").unwrap();
        cfg.apply_override("channels", "16").unwrap();
        cfg.apply_override("sigma-rgb", "0.2").unwrap();
        cfg.apply_override("out-dir", "/tmp/x").unwrap();
        cfg.apply_override("p2_refiner", "identity").unwrap();
        cfg.apply_override("aff-log", "true").unwrap();
        assert_eq!(cfg.affinity.rw_iters, 3);
        assert_eq!(cfg.encoder.channels, 16);
        assert_eq!(cfg.affinity.par.sigma_rgb, 0.2);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.p2_refiner, "identity");
        assert!(cfg.aff_log);
        assert!(cfg.apply_override("nonsense", "1").is_err());
        assert!(cfg.apply_override("iterations", "many").is_err());
    }

    #[test]
    fn numeric_looking_strings_stay_strings() {
        let mut cfg = Config::default();
        cfg.apply_override("data-dir", "2024").unwrap();
        assert_eq!(cfg.data_dir, PathBuf::from("2024"));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = [
            Config { lambda_bg: 0.6, ..Default::default() },
            Config { alpha: -1.0, ..Default::default() },
            Config { iterations: 0, ..Default::default() },
            Config { window: 9, ..Default::default() },
            Config { p3_refiner: "crf".into(), ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Param(_))), "{cfg:?}");
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = Config::default();
        let back: Config = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
