//! Training configuration: hyperparameters, profiles, and the flat
//! key=value config-file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::erf::ErfAggregation;
use crate::error::{MontageError, Result};
use crate::montage::{make_template, AdjustMode, MontageTemplate};
use crate::net::Architecture;
use crate::schedule::LrSchedule;

/// Batch size at which the learning-rate anchors are quoted.
pub const LR_ANCHOR_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    ErfAdaptive,
    Blockwise,
    Global,
}

impl Objective {
    pub fn tag(&self) -> &'static str {
        match self {
            Objective::ErfAdaptive => "erf_adaptive",
            Objective::Blockwise => "blockwise",
            Objective::Global => "global",
        }
    }
}

impl FromStr for Objective {
    type Err = MontageError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erf" | "erf_adaptive" | "erf-adaptive" => Ok(Objective::ErfAdaptive),
            "block" | "blockwise" | "block-wise" => Ok(Objective::Blockwise),
            "global" => Ok(Objective::Global),
            other => Err(MontageError::Config(format!(
                "unknown objective {other:?}; expected erf|block|global"
            ))),
        }
    }
}

/// Every knob of a pre-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub warmup_iters: u64,
    /// Learning-rate anchors quoted at batch [`LR_ANCHOR_BATCH`]; the
    /// effective rate is scaled linearly by `batch_assembled / 512`.
    pub lr_start: f64,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_assembled: usize,
    pub refresh_interval: u64,
    pub tau: f64,
    pub objective: Objective,
    pub seed: u64,
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub split_x: usize,
    pub split_y: usize,
    pub stage_channels: Vec<usize>,
    pub adjust_mode: AdjustMode,
    pub neg_ratio: f64,
    pub relax_groups: bool,
    pub erf_stride: usize,
    pub erf_aggregation: ErfAggregation,
    pub deterministic: bool,
    pub jobs: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: the full pipeline in minutes on a laptop while
    /// keeping every hyperparameter ratio of the reference schedule.
    pub fn desk() -> Self {
        TrainConfig {
            total_iters: 2000,
            warmup_iters: 40,
            lr_start: 0.2,
            lr_peak: 0.8,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_assembled: 8,
            refresh_interval: 200,
            tau: 0.7,
            objective: Objective::ErfAdaptive,
            seed: 0,
            canvas_w: 96,
            canvas_h: 96,
            split_x: 24,
            split_y: 24,
            stage_channels: vec![8, 16, 32],
            adjust_mode: AdjustMode::PadCrop,
            neg_ratio: 10.0,
            relax_groups: false,
            erf_stride: 1,
            erf_aggregation: ErfAggregation::Absolute,
            deterministic: false,
            jobs: 0,
        }
    }

    /// Reference-schedule profile (64k iterations, 224x224 canvas).
    pub fn full_scale() -> Self {
        TrainConfig {
            total_iters: 64_000,
            warmup_iters: 1250,
            batch_assembled: 512,
            refresh_interval: 5000,
            canvas_w: 224,
            canvas_h: 224,
            split_x: 64,
            split_y: 64,
            stage_channels: vec![16, 32, 64, 64],
            ..TrainConfig::desk()
        }
    }

    pub fn template(&self) -> Result<MontageTemplate> {
        make_template(self.canvas_w, self.canvas_h, self.split_x, self.split_y)
    }

    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture {
            in_channels: 3,
            stage_channels: self.stage_channels.clone(),
            num_classes,
        }
    }

    /// Learning-rate schedule after linear batch scaling from the
    /// (peak, 512) anchor.
    pub fn schedule(&self) -> LrSchedule {
        let scale = self.batch_assembled as f64 / LR_ANCHOR_BATCH as f64;
        LrSchedule {
            total_iters: self.total_iters,
            warmup_iters: self.warmup_iters,
            lr_start: self.lr_start * scale,
            lr_peak: self.lr_peak * scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters > 0 && self.warmup_iters >= self.total_iters {
            return Err(MontageError::Config(format!(
                "warmup_iters ({}) must be < total_iters ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.lr_start > self.lr_peak {
            return Err(MontageError::Config(format!(
                "lr_start ({}) must be <= lr_peak ({})",
                self.lr_start, self.lr_peak
            )));
        }
        if self.refresh_interval < 1 {
            return Err(MontageError::Config("refresh_interval must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(MontageError::Config(format!(
                "tau ({}) must lie in [0, 1]",
                self.tau
            )));
        }
        if self.batch_assembled == 0 {
            return Err(MontageError::Config("batch_assembled must be >= 1".into()));
        }
        if self.neg_ratio <= 0.0 {
            return Err(MontageError::Config("neg_ratio must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MontageError::Config("momentum must lie in [0, 1)".into()));
        }
        self.template()
            .map_err(|e| MontageError::Config(e.to_string()))?;
        let pool = 1usize << self.stage_channels.len();
        if self.canvas_w % pool != 0 || self.canvas_h % pool != 0 {
            return Err(MontageError::Config(format!(
                "canvas {}x{} is not divisible by the pooling factor {pool}",
                self.canvas_w, self.canvas_h
            )));
        }
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                MontageError::Config(format!("invalid value {value:?} for key {key:?}"))
            })
        }
        match key {
            "total_iters" => self.total_iters = num(key, value)?,
            "warmup_iters" => self.warmup_iters = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_peak" => self.lr_peak = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_assembled" => self.batch_assembled = num(key, value)?,
            "refresh_interval" => self.refresh_interval = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "objective" => self.objective = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "canvas" => {
                let (w, h) = value.split_once('x').ok_or_else(|| {
                    MontageError::Config(format!("canvas must be WxH, got {value:?}"))
                })?;
                self.canvas_w = num(key, w)?;
                self.canvas_h = num(key, h)?;
            }
            "split_x" => self.split_x = num(key, value)?,
            "split_y" => self.split_y = num(key, value)?,
            "stage_channels" => {
                self.stage_channels = value
                    .split(',')
                    .map(|v| num("stage_channels", v.trim()))
                    .collect::<Result<_>>()?;
            }
            "adjust_mode" => {
                self.adjust_mode = value
                    .parse()
                    .map_err(|e: MontageError| MontageError::Config(e.to_string()))?
            }
            "neg_ratio" => self.neg_ratio = num(key, value)?,
            "relax_groups" => self.relax_groups = num(key, value)?,
            "erf_stride" => self.erf_stride = num(key, value)?,
            "erf_aggregation" => {
                self.erf_aggregation = match value {
                    "abs" | "absolute" => ErfAggregation::Absolute,
                    "sq" | "squared" => ErfAggregation::Squared,
                    other => {
                        return Err(MontageError::Config(format!(
                            "unknown erf_aggregation {other:?}; expected abs|sq"
                        )))
                    }
                }
            }
            "deterministic" => self.deterministic = num(key, value)?,
            "jobs" => self.jobs = num(key, value)?,
            other => {
                return Err(MontageError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse a flat key=value config text over the desk-profile defaults.
    /// Lines starting with `#` and blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MontageError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| MontageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Resolved config as sorted key=value text, round-trippable by
    /// [`TrainConfig::parse`]; written into run-manifests.
    pub fn to_key_values(&self) -> String {
        let channels = self
            .stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mode = match self.adjust_mode {
            AdjustMode::PadCrop => "pad-crop",
            AdjustMode::Warp => "warp",
            AdjustMode::Resize => "resize",
        };
        let agg = match self.erf_aggregation {
            ErfAggregation::Absolute => "abs",
            ErfAggregation::Squared => "sq",
        };
        let mut map = BTreeMap::new();
        map.insert("adjust_mode", mode.to_string());
        map.insert("batch_assembled", self.batch_assembled.to_string());
        map.insert("canvas", format!("{}x{}", self.canvas_w, self.canvas_h));
        map.insert("deterministic", self.deterministic.to_string());
        map.insert("erf_aggregation", agg.to_string());
        map.insert("erf_stride", self.erf_stride.to_string());
        map.insert("jobs", self.jobs.to_string());
        map.insert("lr_peak", format!("{}", self.lr_peak));
        map.insert("lr_start", format!("{}", self.lr_start));
        map.insert("momentum", format!("{}", self.momentum));
        map.insert("neg_ratio", format!("{}", self.neg_ratio));
        map.insert("objective", self.objective.tag().to_string());
        map.insert("refresh_interval", self.refresh_interval.to_string());
        map.insert("relax_groups", self.relax_groups.to_string());
        map.insert("seed", self.seed.to_string());
        map.insert("split_x", self.split_x.to_string());
        map.insert("split_y", self.split_y.to_string());
        map.insert("stage_channels", channels);
        map.insert("tau", format!("{}", self.tau));
        map.insert("total_iters", self.total_iters.to_string());
        map.insert("warmup_iters", self.warmup_iters.to_string());
        map.insert("weight_decay", format!("{}", self.weight_decay));
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
