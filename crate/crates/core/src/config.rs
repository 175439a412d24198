//! Run configuration: every hyperparameter and design-decision knob of a
//! training run, serializable so that the emitted config plus the seed
//! reproduces the run bit for bit.

use crate::data::{StreamKind, Target, NODE_COUNT};
use crate::error::{Error, Result};
use crate::model::StrategyKind;
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Reduced dimensions used by the gradient checker so that exhaustive
/// central differences over every parameter stay fast; the layer math is
/// identical at any size.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckCfg {
    pub k: usize,
    pub d_e: usize,
    pub d_k: usize,
    pub k_nn: usize,
    pub encoder_hidden: [usize; 2],
    pub head_hidden: [usize; 2],
    pub stream_widths: [usize; NODE_COUNT],
    pub frames: usize,
    pub utterances: usize,
}

impl Default for GradcheckCfg {
    fn default() -> Self {
        GradcheckCfg {
            k: 4,
            d_e: 3,
            d_k: 3,
            k_nn: 2,
            encoder_hidden: [5, 4],
            head_hidden: [5, 4],
            stream_widths: [6, 4, 5, 5, 7],
            frames: 3,
            utterances: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Unified vertex width K.
    pub k: usize,
    /// Edge feature width; None ties it to K.
    pub d_e: Option<usize>,
    /// Attention query/key width; None ties it to K.
    pub d_k: Option<usize>,
    /// Neighbors kept per node by the similarity KNN.
    pub k_nn: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Utterances per training batch; the loss is the CCC loss over the
    /// batch's concatenated frames.
    pub batch_size: usize,
    pub cultures: Vec<String>,
    pub strategy: String,
    pub targets: Vec<String>,
    /// Path to the corpus manifest (required by train/eval commands).
    pub manifest: Option<String>,
    /// Output directory for checkpoints and metrics.
    pub out_dir: Option<String>,
    pub encoder_hidden: [usize; 2],
    pub head_hidden: [usize; 2],
    /// Widen the vertex-vertex attention key/value set with the context rows
    /// instead of accepting the single-key degeneracy.
    pub avvr_context_tokens: bool,
    /// Replace learned edge features with ones, so the unified edge equals
    /// the adjacency weight (the scalar-edge ablation wiring).
    pub attention_bypass: bool,
    /// Standardize predictions and labels before the training CCC loss.
    /// Reported metrics always use raw values.
    pub standardize_before_ccc: bool,
    pub bn_momentum: f64,
    /// Optional 0/1 base-graph mask; None means complete.
    pub rule_mask: Option<Vec<Vec<u8>>>,
    /// Sweep the learning rate from `learning_rate` to `lr_sweep_max` in
    /// `lr_sweep_step` increments, keeping the best devel CCC.
    pub lr_sweep: bool,
    pub lr_sweep_max: f64,
    pub lr_sweep_step: f64,
    pub gradcheck: GradcheckCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 7,
            k: 32,
            d_e: None,
            d_k: None,
            k_nn: 4,
            learning_rate: 0.005,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            dropout: 0.1,
            epochs: 50,
            batch_size: 8,
            cultures: vec!["DE".to_string(), "HU".to_string()],
            strategy: "ttf_amef".to_string(),
            targets: vec!["arousal".to_string(), "valence".to_string(), "liking".to_string()],
            manifest: None,
            out_dir: None,
            encoder_hidden: [64, 32],
            head_hidden: [64, 32],
            avvr_context_tokens: false,
            attention_bypass: false,
            standardize_before_ccc: false,
            bn_momentum: 0.1,
            rule_mask: None,
            lr_sweep: false,
            lr_sweep_max: 0.010,
            lr_sweep_step: 0.001,
            gradcheck: GradcheckCfg::default(),
        }
    }
}

fn known_keys(template: &serde_json::Value) -> Vec<String> {
    template
        .as_object()
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default()
}

impl RunConfig {
    /// Parse from JSON, rejecting unknown keys with a list of all offenders.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        let template = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut unknown = Vec::new();
        if let Some(obj) = value.as_object() {
            let top = known_keys(&template);
            for key in obj.keys() {
                if !top.contains(key) {
                    unknown.push(key.clone());
                }
            }
            if let Some(gc) = obj.get("gradcheck").and_then(|v| v.as_object()) {
                let gc_known = known_keys(&template["gradcheck"]);
                for key in gc.keys() {
                    if !gc_known.contains(key) {
                        unknown.push(format!("gradcheck.{key}"));
                    }
                }
            }
        } else {
            return Err(Error::config("config root must be a JSON object"));
        }
        if !unknown.is_empty() {
            return Err(Error::config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "config schema {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        if self.k_nn < 1 || self.k_nn > NODE_COUNT - 1 {
            return Err(Error::config(format!(
                "k_nn must be in 1..={}, got {}",
                NODE_COUNT - 1,
                self.k_nn
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0 < self.rms_decay && self.rms_decay < 1.0) {
            return Err(Error::config("rms_decay must be in (0,1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.cultures.is_empty() {
            return Err(Error::config("cultures must be nonempty"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("targets must be nonempty"));
        }
        for t in &self.targets {
            Target::parse(t)?;
        }
        StrategyKind::parse(&self.strategy)?;
        if let Some(mask) = &self.rule_mask {
            crate::graph::base_adjacency(&crate::graph::RuleKind::Custom(mask.clone()), NODE_COUNT)?;
        }
        if self.lr_sweep {
            if !(self.lr_sweep_step > 0.0) {
                return Err(Error::config("lr_sweep_step must be positive"));
            }
            if self.lr_sweep_max < self.learning_rate {
                return Err(Error::config("lr_sweep_max below learning_rate"));
            }
        }
        if self.encoder_hidden.iter().any(|&h| h == 0) || self.head_hidden.iter().any(|&h| h == 0)
        {
            return Err(Error::config("hidden sizes must be positive"));
        }
        Ok(())
    }

    pub fn d_e(&self) -> usize {
        self.d_e.unwrap_or(self.k)
    }

    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or(self.k)
    }

    pub fn strategy_kind(&self) -> StrategyKind {
        StrategyKind::parse(&self.strategy).expect("validated")
    }

    pub fn target_list(&self) -> Vec<Target> {
        self.targets
            .iter()
            .map(|t| Target::parse(t).expect("validated"))
            .collect()
    }

    pub fn single_stream(&self) -> Option<StreamKind> {
        match self.strategy_kind() {
            StrategyKind::SingleFeature(s) => Some(s),
            _ => None,
        }
    }

    /// FNV-1a fingerprint of the canonical serialization.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// The learning rates visited by a sweep (single rate when disabled).
    pub fn sweep_rates(&self) -> Vec<f64> {
        if !self.lr_sweep {
            return vec![self.learning_rate];
        }
        let mut rates = Vec::new();
        let mut lr = self.learning_rate;
        while lr <= self.lr_sweep_max + 1e-12 {
            rates.push(lr);
            lr += self.lr_sweep_step;
        }
        rates
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_json_pretty();
        let back = RunConfig::from_json_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = RunConfig::from_json_str(
            r#"{"seed": 3, "bogus": 1, "gradcheck": {"k": 2, "nope": 0}, "extra": true}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("extra") && msg.contains("gradcheck.nope"), "{msg}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_json_str(r#"{"dropout": 1.0}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"k_nn": 5}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"strategy": "mystery"}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"targets": []}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"learning_rate": 0.0}"#).is_err());
    }

    #[test]
    fn sweep_rates_follow_the_increment_protocol() {
        let mut cfg = RunConfig::default();
        cfg.lr_sweep = true;
        let rates = cfg.sweep_rates();
        assert_eq!(rates.len(), 6);
        assert!((rates[0] - 0.005).abs() < 1e-12);
        assert!((rates[5] - 0.010).abs() < 1e-12);
        for w in rates.windows(2) {
            assert!((w[1] - w[0] - 0.001).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"seed": 99, "strategy": "ave"}"#).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.k, 32);
        assert_eq!(cfg.epochs, 50);
        assert!((cfg.learning_rate - 0.005).abs() < 1e-15);
        assert!((cfg.dropout - 0.1).abs() < 1e-15);
    }
}
