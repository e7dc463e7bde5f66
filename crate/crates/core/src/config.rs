//! Run configuration: model architecture, task binding and training
//! schedule, stored as versioned TOML.
//!
//! ```toml
//! version = 1
//!
//! [model]
//! host = "tr_hsw"      # tr | tr_hc | tr_ssw | tr_hsw | tr_2xsa | rims_sw | tims_sw
//! n_layers = 4
//! n_h = 64
//! ffn_dim = 128
//! n_m = 8              # memory slots
//! topk = 20            # writers per slot (tr_hsw only)
//!
//! [task]
//! kind = "triangles"   # triangles | sort_of_clevr | copy
//! image_size = 32
//! n_train = 10000
//! n_test = 2000
//!
//! [train]
//! epochs = 50
//! batch_size = 64
//! lr = 0.0005
//! ```
//!
//! Every field has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workspace::GateStyle;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Host {
    /// Transformer, parameters shared across layers.
    Tr,
    /// Transformer with separate parameters per layer.
    TrHc,
    /// Transformer with a soft-competition shared workspace.
    TrSsw,
    /// Transformer with a top-k shared workspace.
    TrHsw,
    /// Transformer applying self-attention twice per layer.
    #[serde(rename = "tr_2xsa")]
    Tr2xSa,
    RimsSw,
    TimsSw,
}

impl Host {
    pub const ALL: [Host; 7] = [
        Host::Tr,
        Host::TrHc,
        Host::TrSsw,
        Host::TrHsw,
        Host::Tr2xSa,
        Host::RimsSw,
        Host::TimsSw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Host::Tr => "tr",
            Host::TrHc => "tr_hc",
            Host::TrSsw => "tr_ssw",
            Host::TrHsw => "tr_hsw",
            Host::Tr2xSa => "tr_2xsa",
            Host::RimsSw => "rims_sw",
            Host::TimsSw => "tims_sw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Host::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::config(format!("unknown host {s}")))
    }

    pub fn uses_workspace(self) -> bool {
        matches!(self, Host::TrSsw | Host::TrHsw | Host::RimsSw | Host::TimsSw)
    }

    pub fn is_transformer(self) -> bool {
        matches!(
            self,
            Host::Tr | Host::TrHc | Host::TrSsw | Host::TrHsw | Host::Tr2xSa
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub host: Host,
    pub n_layers: usize,
    /// Defaults per host: shared for tr/tr_ssw/tr_hsw/tr_2xsa, separate for tr_hc.
    pub share_layer_params: Option<bool>,
    pub n_h: usize,
    pub ffn_dim: usize,
    /// Self-attention heads.
    pub n_heads: usize,
    /// Number of specialists (RIMs) or mechanisms (TIMs). Transformer hosts
    /// use one specialist per position.
    pub n_s: usize,
    /// Specialists/mechanisms selected per step (RIMs, TIMs).
    pub n_sel: usize,
    pub n_m: usize,
    /// Slot width; 0 means `n_h`.
    pub n_l: usize,
    pub ws_heads: usize,
    pub ws_key_dim: usize,
    pub ws_value_dim: usize,
    /// Writers per slot for tr_hsw.
    pub topk: Option<usize>,
    pub n_write_iters: usize,
    pub gate_style: GateStyle,
    /// Keep memory across layers/steps; false re-initializes it every stage.
    pub persistence: bool,
    /// Keep a pairwise self-attention step alongside the workspace.
    pub sw_plus_sa: bool,
    /// Keys/values from `[M; R]` instead of `R`. Defaults: false for
    /// transformer hosts, true for RIMs/TIMs.
    pub include_memory_rows: Option<bool>,
    pub dropout: f64,
    /// TIMs layer layout: (monolithic before, modular, monolithic after).
    pub tims_layout: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            host: Host::TrSsw,
            n_layers: 4,
            share_layer_params: None,
            n_h: 64,
            ffn_dim: 128,
            n_heads: 4,
            n_s: 6,
            n_sel: 4,
            n_m: 8,
            n_l: 0,
            ws_heads: 4,
            ws_key_dim: 8,
            ws_value_dim: 16,
            topk: None,
            n_write_iters: 1,
            gate_style: GateStyle::Unit,
            persistence: true,
            sw_plus_sa: false,
            include_memory_rows: None,
            dropout: 0.1,
            tims_layout: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn slot_width(&self) -> usize {
        if self.n_l == 0 {
            self.n_h
        } else {
            self.n_l
        }
    }

    pub fn shared_layers(&self) -> bool {
        self.share_layer_params
            .unwrap_or(!matches!(self.host, Host::TrHc))
    }

    pub fn memory_rows_as_keys(&self) -> bool {
        self.include_memory_rows
            .unwrap_or(matches!(self.host, Host::RimsSw | Host::TimsSw))
    }

    pub fn layout(&self) -> [usize; 3] {
        self.tims_layout.unwrap_or_else(|| {
            let edge = self.n_layers / 4;
            [edge, self.n_layers - 2 * edge, edge]
        })
    }

    /// Check invariants; `n_specialists` is the specialist count the
    /// workspace will see (sequence length for transformer hosts).
    /// Returns non-fatal warnings.
    pub fn validate(&self, n_specialists: usize) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let bad = |m: String| Err(Error::config(m));
        if self.n_layers == 0 || self.n_h == 0 || self.ffn_dim == 0 || self.n_heads == 0 {
            return bad("n_layers, n_h, ffn_dim and n_heads must be positive".into());
        }
        if self.host.is_transformer() && self.n_h % self.n_heads != 0 {
            return bad(format!("n_heads {} must divide n_h {}", self.n_heads, self.n_h));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match (self.host, self.share_layer_params) {
            (Host::TrHc, Some(true)) => {
                return bad("tr_hc uses separate parameters per layer".into())
            }
            (Host::Tr, Some(false)) => return bad("tr shares parameters across layers".into()),
            _ => {}
        }
        match (self.host, self.topk) {
            (Host::TrHsw, None) => return bad("tr_hsw requires topk".into()),
            (Host::TrHsw, Some(k)) if k == 0 || k > n_specialists => {
                return bad(format!(
                    "topk {k} outside 1..={n_specialists} specialists"
                ))
            }
            (h, Some(_)) if h != Host::TrHsw => {
                return bad(format!("topk only applies to tr_hsw, not {}", h.name()))
            }
            _ => {}
        }
        if self.host.uses_workspace() {
            if self.n_m == 0 {
                return bad("workspace needs n_m >= 1".into());
            }
            if self.ws_heads == 0 || self.ws_key_dim == 0 || self.ws_value_dim == 0 {
                return bad("workspace heads, key and value dims must be positive".into());
            }
            if self.n_write_iters == 0 {
                return bad("n_write_iters must be >= 1".into());
            }
            if self.n_m >= n_specialists {
                warnings.push(format!(
                    "n_m = {} slots is not smaller than n_s = {} specialists; the workspace is not a bottleneck",
                    self.n_m, n_specialists
                ));
            }
        }
        match self.host {
            Host::RimsSw => {
                if self.n_sel == 0 || self.n_sel > self.n_s {
                    return bad(format!("n_sel {} outside 1..={}", self.n_sel, self.n_s));
                }
                if self.slot_width() != self.n_h {
                    return bad("rims_sw writes specialist reads directly, so n_l must equal n_h".into());
                }
            }
            Host::TimsSw => {
                if self.n_s == 0 || self.n_h % self.n_s != 0 {
                    return bad(format!(
                        "n_h {} must be divisible by n_s = {} mechanisms",
                        self.n_h, self.n_s
                    ));
                }
                if self.n_sel == 0 || self.n_sel > self.n_s {
                    return bad(format!("n_sel {} outside 1..={}", self.n_sel, self.n_s));
                }
                let [a, b, c] = self.layout();
                if a + b + c == 0 || b == 0 {
                    return bad("tims layout needs at least one modular layer".into());
                }
            }
            _ => {}
        }
        Ok(warnings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Triangles,
    SortOfClevr,
    Copy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Triangles => "triangles",
            TaskKind::SortOfClevr => "sort_of_clevr",
            TaskKind::Copy => "copy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "triangles" => Ok(TaskKind::Triangles),
            "soc" | "sort_of_clevr" => Ok(TaskKind::SortOfClevr),
            "copy" => Ok(TaskKind::Copy),
            _ => Err(Error::config(format!("unknown task {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Training samples (images for Sort-of-CLEVR).
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Triangles: 32 or 64.
    pub image_size: usize,
    /// Patch edge; 0 picks the task default (4 for triangles, 15 for Sort-of-CLEVR).
    pub patch: usize,
    /// Sort-of-CLEVR: train on relational questions only.
    pub relational_only: bool,
    /// Copy task alphabet size (the delimiter is one extra symbol).
    pub vocab: usize,
    /// Copy task: prefix + copy length (even).
    pub seq_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Triangles,
            n_train: 10_000,
            n_test: 2_000,
            seed: 1,
            image_size: 32,
            patch: 0,
            relational_only: false,
            vocab: 8,
            seq_len: 8,
        }
    }
}

impl TaskConfig {
    pub fn patch_size(&self) -> usize {
        match (self.patch, self.kind) {
            (0, TaskKind::SortOfClevr) => 15,
            (0, _) => 4,
            (p, _) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub min_lr: f64,
    pub cosine: bool,
    pub weight_decay: f64,
    /// Seed for shuffling and dropout.
    pub seed: u64,
    /// Test accuracy whose first crossing is reported as epochs-to-target.
    pub target_accuracy: Option<f64>,
    /// End training at the first crossing of `target_accuracy`.
    pub stop_at_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            min_lr: 0.0,
            cosine: true,
            weight_decay: 0.0,
            seed: 0,
            target_accuracy: None,
            stop_at_target: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Two layers, `n_h = 32`, 500 triangle images, three epochs.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.model = ModelConfig {
            host: Host::TrHsw,
            n_layers: 2,
            n_h: 32,
            ffn_dim: 64,
            n_m: 4,
            ws_value_dim: 8,
            topk: Some(20),
            seed: 1,
            ..ModelConfig::default()
        };
        cfg.task.n_train = 500;
        cfg.task.n_test = 100;
        cfg.train.epochs = 3;
        cfg.train.batch_size = 32;
        cfg.train.lr = 5e-4;
        cfg
    }

    /// Triangle detection at desk scale: 32×32 images, 10k train, 2k test,
    /// four layers with `n_h = 64`, 50 epochs. Workspace hosts get 8 slots
    /// and 20 writers per slot.
    pub fn triangles_desk(host: Host) -> Self {
        let mut cfg = Self::default();
        cfg.model.host = host;
        cfg.model.topk = (host == Host::TrHsw).then_some(20);
        cfg.train.lr = 5e-4;
        cfg.train.target_accuracy = Some(0.85);
        cfg
    }

    /// Sort-of-CLEVR at desk scale with a workspace transformer, trained on
    /// relational questions.
    pub fn clevr_desk(persistence: bool) -> Self {
        let mut cfg = Self::default();
        cfg.model.host = Host::TrHsw;
        cfg.model.topk = Some(5);
        cfg.model.persistence = persistence;
        cfg.task.kind = TaskKind::SortOfClevr;
        cfg.task.n_train = 5_000;
        cfg.task.n_test = 500;
        cfg.task.relational_only = true;
        cfg.train.epochs = 30;
        cfg.train.lr = 5e-4;
        cfg.train.target_accuracy = Some(0.6);
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply a `section.key=value` override, e.g. `model.n_m=4`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment} is not key=value")))?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml())
            .map_err(|e| Error::config(e.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let parsed: toml::Value = format!("v = {}", value.trim())
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").unwrap())
            .unwrap_or_else(|_| toml::Value::String(value.trim().to_string()));
        let mut table = &mut doc;
        for key in &keys[..keys.len() - 1] {
            table = table
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("{path} is not a table path")))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), parsed);
        let text = toml::to_string(&doc).map_err(|e| Error::config(e.to_string()))?;
        *self = Self::from_toml(&text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.model.host = Host::TrHsw;
        cfg.model.topk = Some(5);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(RunConfig::from_toml("version = 1\n[model]\nbogus = 3\n").is_err());
        assert!(RunConfig::from_toml("version = 2\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = RunConfig::default();
        cfg.set("model.n_m=3").unwrap();
        cfg.set("model.host=tr_hc").unwrap();
        cfg.set("task.kind=copy").unwrap();
        assert_eq!(cfg.model.n_m, 3);
        assert_eq!(cfg.model.host, Host::TrHc);
        assert_eq!(cfg.task.kind, TaskKind::Copy);
        assert!(cfg.set("model.nope=1").is_err());
    }

    #[test]
    fn host_invariants() {
        let mut m = ModelConfig {
            host: Host::TrHsw,
            ..Default::default()
        };
        assert!(m.validate(65).is_err());
        m.topk = Some(10);
        assert!(m.validate(65).unwrap().is_empty());
        m.host = Host::TrHc;
        m.topk = None;
        m.share_layer_params = Some(true);
        assert!(m.validate(65).is_err());
        let rims = ModelConfig {
            host: Host::RimsSw,
            n_s: 4,
            n_sel: 5,
            ..Default::default()
        };
        assert!(rims.validate(4).is_err());
    }

    #[test]
    fn bandwidth_warning_when_slots_exceed_specialists() {
        let m = ModelConfig {
            n_m: 8,
            ..Default::default()
        };
        assert_eq!(m.validate(6).unwrap().len(), 1);
    }
}
