//! Run configuration: a flat `key = value` text format with a closed schema.
//! Unknown or duplicate keys are rejected so typos fail loudly instead of
//! silently training with defaults.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::AlignmentConfig;
use crate::detector::DetectorConfig;
use crate::eval::ApVariant;
use crate::meta::{InnerStyle, MetaConfig, MetaMode};
use crate::synth::{SceneSpec, ShiftSpec, SplitCounts};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "source-only")]
    SourceOnly,
    #[serde(rename = "da")]
    Da,
    #[serde(rename = "meta-da")]
    MetaDa,
    #[serde(rename = "oracle")]
    Oracle,
}

impl RunMode {
    pub fn tag(self) -> &'static str {
        match self {
            RunMode::SourceOnly => "source-only",
            RunMode::Da => "da",
            RunMode::MetaDa => "meta-da",
            RunMode::Oracle => "oracle",
        }
    }

    pub const ALL: [RunMode; 4] = [RunMode::SourceOnly, RunMode::Da, RunMode::MetaDa, RunMode::Oracle];
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<RunMode> {
        match s {
            "source-only" => Ok(RunMode::SourceOnly),
            "da" => Ok(RunMode::Da),
            "meta-da" => Ok(RunMode::MetaDa),
            "oracle" => Ok(RunMode::Oracle),
            other => Err(Error::config(format!(
                "unknown run mode {other:?}; expected source-only, da, meta-da, or oracle"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_mode: RunMode,
    pub meta: MetaConfig,
    /// Gradient-reversal strength of the alignment heads.
    pub lambda_grl: f64,
    pub img_disc_width: usize,
    pub inst_disc_width: usize,
    pub enc_c1: usize,
    pub enc_c2: usize,
    pub roi_dim: usize,
    pub anchor_sizes: Vec<f64>,
    pub max_proposals: usize,
    pub scene: SceneSpec,
    pub counts: SplitCounts,
    /// Seeds for the ablation ladder (each run derives its own seed from
    /// this list; single runs use `seed`).
    pub seeds: Vec<u64>,
    pub ap_variant: ApVariant,
    pub iou_thresh: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run_mode: RunMode::MetaDa,
            meta: MetaConfig::default(),
            lambda_grl: 1.0,
            img_disc_width: 8,
            inst_disc_width: 32,
            enc_c1: 8,
            enc_c2: 16,
            roi_dim: 128,
            anchor_sizes: vec![6.0, 12.0],
            max_proposals: 16,
            scene: SceneSpec::default(),
            counts: SplitCounts::default(),
            seeds: vec![0, 1, 2],
            ap_variant: ApVariant::AllPoint,
            iou_thresh: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            enc_ch: [self.enc_c1, self.enc_c2],
            anchor_sizes: self.anchor_sizes.clone(),
            roi_dim: self.roi_dim,
            max_proposals: self.max_proposals,
            num_classes: self.scene.num_classes,
            ..DetectorConfig::default()
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            img_width: self.img_disc_width,
            inst_width: self.inst_disc_width,
            lambda_grl: self.lambda_grl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.scene.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.lambda_grl < 0.0 {
            return Err(Error::config("lambda_grl must be non-negative"));
        }
        if self.enc_c1 == 0 || self.enc_c2 == 0 || self.roi_dim == 0 {
            return Err(Error::config("network widths must be positive"));
        }
        if self.img_disc_width == 0 || self.inst_disc_width == 0 {
            return Err(Error::config("discriminator widths must be positive"));
        }
        if self.anchor_sizes.is_empty() {
            return Err(Error::config("anchor_sizes must not be empty"));
        }
        if self.max_proposals == 0 {
            return Err(Error::config("max_proposals must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if !(0.0 < self.iou_thresh && self.iou_thresh < 1.0) {
            return Err(Error::config("iou_thresh must lie in (0, 1)"));
        }
        for c in [
            self.counts.source_train,
            self.counts.target_train,
            self.counts.source_val,
            self.counts.target_val,
            self.counts.source_test,
            self.counts.target_test,
        ] {
            if c == 0 {
                return Err(Error::config("all split counts must be positive"));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c` for any valid config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.meta.mode {
            MetaMode::ExactSecondOrder => "exact-second-order",
            MetaMode::FirstOrder => "first-order",
        };
        let style = match self.meta.inner_style {
            InnerStyle::Restart => "restart",
            InnerStyle::Chained => "chained",
        };
        let variant = match self.ap_variant {
            ApVariant::AllPoint => "allpoint",
            ApVariant::ElevenPoint => "11pt",
        };
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let joinu = |v: &[u64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "run_mode = {}", self.run_mode.tag());
        let _ = writeln!(s, "alpha = {}", self.meta.alpha);
        let _ = writeln!(s, "beta = {}", self.meta.beta);
        let _ = writeln!(s, "m = {}", self.meta.m);
        let _ = writeln!(s, "meta_mode = {mode}");
        let _ = writeln!(s, "inner_style = {style}");
        let _ = writeln!(s, "epochs = {}", self.meta.epochs);
        let _ = writeln!(s, "momentum = {}", self.meta.momentum);
        let _ = writeln!(s, "lambda = {}", self.meta.lambda);
        let _ = writeln!(s, "seed = {}", self.meta.seed);
        let _ = writeln!(s, "lambda_grl = {}", self.lambda_grl);
        let _ = writeln!(s, "img_disc_width = {}", self.img_disc_width);
        let _ = writeln!(s, "inst_disc_width = {}", self.inst_disc_width);
        let _ = writeln!(s, "enc_c1 = {}", self.enc_c1);
        let _ = writeln!(s, "enc_c2 = {}", self.enc_c2);
        let _ = writeln!(s, "roi_dim = {}", self.roi_dim);
        let _ = writeln!(s, "anchor_sizes = {}", join(&self.anchor_sizes));
        let _ = writeln!(s, "max_proposals = {}", self.max_proposals);
        let _ = writeln!(s, "image_size = {}", self.scene.image_size);
        let _ = writeln!(s, "min_objects = {}", self.scene.min_objects);
        let _ = writeln!(s, "max_objects = {}", self.scene.max_objects);
        let _ = writeln!(s, "num_classes = {}", self.scene.num_classes);
        let _ = writeln!(s, "bg_level = {}", self.scene.bg_level);
        let _ = writeln!(s, "bg_texture = {}", self.scene.bg_texture);
        let _ = writeln!(s, "max_overlap = {}", self.scene.max_overlap);
        let _ = writeln!(s, "min_box = {}", self.scene.min_box);
        let _ = writeln!(s, "max_box = {}", self.scene.max_box);
        let _ = writeln!(s, "shift_invert = {}", self.scene.shift.invert);
        let _ = writeln!(s, "shift_blur_sigma = {}", self.scene.shift.blur_sigma);
        let _ = writeln!(s, "shift_gamma = {}", self.scene.shift.gamma);
        let _ = writeln!(s, "shift_noise = {}", self.scene.shift.noise);
        let _ = writeln!(s, "source_train = {}", self.counts.source_train);
        let _ = writeln!(s, "target_train = {}", self.counts.target_train);
        let _ = writeln!(s, "source_val = {}", self.counts.source_val);
        let _ = writeln!(s, "target_val = {}", self.counts.target_val);
        let _ = writeln!(s, "source_test = {}", self.counts.source_test);
        let _ = writeln!(s, "target_test = {}", self.counts.target_test);
        let _ = writeln!(s, "seeds = {}", joinu(&self.seeds));
        let _ = writeln!(s, "ap_variant = {variant}");
        let _ = writeln!(s, "iou_thresh = {}", self.iou_thresh);
        s
    }

    /// FNV-1a over the canonical text, used to tag reports.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::schema(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::schema(format!("duplicate key {key:?}")));
            }
            apply(&mut cfg, key, value).map_err(|e| match e {
                Error::Schema(msg) => Error::schema(format!("line {}: {msg}", lineno + 1)),
                other => Error::schema(format!("line {}: {other}", lineno + 1)),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::schema(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "run_mode" => cfg.run_mode = value.parse()?,
        "alpha" => cfg.meta.alpha = parse_num(key, value)?,
        "beta" => cfg.meta.beta = parse_num(key, value)?,
        "m" => cfg.meta.m = parse_num(key, value)?,
        "meta_mode" => {
            cfg.meta.mode = match value {
                "exact-second-order" => MetaMode::ExactSecondOrder,
                "first-order" => MetaMode::FirstOrder,
                other => {
                    return Err(Error::schema(format!(
                        "unknown meta_mode {other:?}; expected exact-second-order or first-order"
                    )))
                }
            }
        }
        "inner_style" => {
            cfg.meta.inner_style = match value {
                "restart" => InnerStyle::Restart,
                "chained" => InnerStyle::Chained,
                other => {
                    return Err(Error::schema(format!(
                        "unknown inner_style {other:?}; expected restart or chained"
                    )))
                }
            }
        }
        "epochs" => cfg.meta.epochs = parse_num(key, value)?,
        "momentum" => cfg.meta.momentum = parse_num(key, value)?,
        "lambda" => cfg.meta.lambda = parse_num(key, value)?,
        "seed" => cfg.meta.seed = parse_num(key, value)?,
        "lambda_grl" => cfg.lambda_grl = parse_num(key, value)?,
        "img_disc_width" => cfg.img_disc_width = parse_num(key, value)?,
        "inst_disc_width" => cfg.inst_disc_width = parse_num(key, value)?,
        "enc_c1" => cfg.enc_c1 = parse_num(key, value)?,
        "enc_c2" => cfg.enc_c2 = parse_num(key, value)?,
        "roi_dim" => cfg.roi_dim = parse_num(key, value)?,
        "anchor_sizes" => cfg.anchor_sizes = parse_list(key, value)?,
        "max_proposals" => cfg.max_proposals = parse_num(key, value)?,
        "image_size" => cfg.scene.image_size = parse_num(key, value)?,
        "min_objects" => cfg.scene.min_objects = parse_num(key, value)?,
        "max_objects" => cfg.scene.max_objects = parse_num(key, value)?,
        "num_classes" => cfg.scene.num_classes = parse_num(key, value)?,
        "bg_level" => cfg.scene.bg_level = parse_num(key, value)?,
        "bg_texture" => cfg.scene.bg_texture = parse_num(key, value)?,
        "max_overlap" => cfg.scene.max_overlap = parse_num(key, value)?,
        "min_box" => cfg.scene.min_box = parse_num(key, value)?,
        "max_box" => cfg.scene.max_box = parse_num(key, value)?,
        "shift_invert" => cfg.scene.shift.invert = parse_num(key, value)?,
        "shift_blur_sigma" => cfg.scene.shift.blur_sigma = parse_num(key, value)?,
        "shift_gamma" => cfg.scene.shift.gamma = parse_num(key, value)?,
        "shift_noise" => cfg.scene.shift.noise = parse_num(key, value)?,
        "source_train" => cfg.counts.source_train = parse_num(key, value)?,
        "target_train" => cfg.counts.target_train = parse_num(key, value)?,
        "source_val" => cfg.counts.source_val = parse_num(key, value)?,
        "target_val" => cfg.counts.target_val = parse_num(key, value)?,
        "source_test" => cfg.counts.source_test = parse_num(key, value)?,
        "target_test" => cfg.counts.target_test = parse_num(key, value)?,
        "seeds" => cfg.seeds = parse_list(key, value)?,
        "ap_variant" => cfg.ap_variant = value.parse()?,
        "iou_thresh" => cfg.iou_thresh = parse_num(key, value)?,
        other => return Err(Error::schema(format!("unknown key {other:?}"))),
    }
    Ok(())
}

/// A preset kept small enough for quick experiments and the test ladder.
pub fn micro_profile() -> TrainConfig {
    TrainConfig {
        enc_c1: 4,
        enc_c2: 8,
        roi_dim: 32,
        img_disc_width: 4,
        inst_disc_width: 8,
        max_proposals: 8,
        anchor_sizes: vec![6.0],
        scene: SceneSpec {
            image_size: 16,
            max_objects: 2,
            max_box: 8,
            shift: ShiftSpec::default(),
            ..SceneSpec::default()
        },
        counts: SplitCounts {
            source_train: 16,
            target_train: 16,
            source_val: 6,
            target_val: 6,
            source_test: 12,
            target_test: 12,
        },
        ..TrainConfig::default()
    }
}
