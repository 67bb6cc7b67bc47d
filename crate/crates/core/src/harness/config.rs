//! Run configuration and the flat `key = value` config file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::corpus::{CorpusKind, CorpusSpec};
use crate::imgio::{CONTEXT, PATCH};
use crate::matcher::MatcherArch;
use crate::refine::RefineArch;

pub const DEFAULT_SIGMA: f64 = 25.0;
pub const BLIND_LOW: f64 = 0.0;
pub const BLIND_HIGH: f64 = 55.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaMode {
    Fixed(f64),
    /// σ drawn uniformly from `[low, high]` per training image.
    Blind { low: f64, high: f64 },
}

impl SigmaMode {
    pub fn blind() -> Self {
        Self::Blind {
            low: BLIND_LOW,
            high: BLIND_HIGH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Fixed(s) if !(s.is_finite() && s >= 0.0) => Err(Error::Contract(format!("invalid sigma {s}"))),
            Self::Blind { low, high } if !(low >= 0.0 && low < high && high.is_finite()) => Err(Error::Contract(
                format!("blind sigma range [{low}, {high}] must satisfy 0 <= low < high"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(s) => write!(f, "fixed:{s}"),
            Self::Blind { low, high } => write!(f, "blind:{low}:{high}"),
        }
    }
}

impl FromStr for SigmaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number {v:?}"));
        let mode = match parts.as_slice() {
            ["fixed", v] => Self::Fixed(num(v)?),
            ["blind"] => Self::blind(),
            ["blind", lo, hi] => Self::Blind {
                low: num(lo)?,
                high: num(hi)?,
            },
            _ => return Err(format!("expected fixed:<sigma>, blind or blind:<low>:<high>, got {s:?}")),
        };
        mode.validate().map_err(|e| e.to_string())?;
        Ok(mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    MatchOnly,
    Full,
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "match" | "match-only" => Ok(Self::MatchOnly),
            "full" => Ok(Self::Full),
            _ => Err(format!("stage must be match or full, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseConfig {
    pub patch_size: usize,
    pub context_size: usize,
    pub window_radius: usize,
    pub sigma_mode: SigmaMode,
    pub stage: Stage,
    pub seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH,
            context_size: CONTEXT,
            window_radius: 15,
            sigma_mode: SigmaMode::Fixed(DEFAULT_SIGMA),
            stage: Stage::Full,
            seed: 0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size != PATCH || self.context_size != self.patch_size + 8 {
            return Err(Error::Contract(format!(
                "patch/context sizes must be {PATCH}/{CONTEXT}, got {}/{}",
                self.patch_size, self.context_size
            )));
        }
        if self.window_radius == 0 {
            return Err(Error::Contract("window radius must be at least 1".into()));
        }
        self.sigma_mode.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub refine_steps: usize,
    pub lr: f64,
    /// Multiplicative factor applied at each milestone.
    pub lr_drop: f64,
    /// Fractions of a stage's steps at which the learning rate drops.
    pub milestones: [f64; 2],
    /// Images per pre-training step.
    pub pretrain_images: usize,
    /// Reference patches per fine-tuning step.
    pub finetune_refs: usize,
    /// Search-window radius used during fine-tuning.
    pub train_radius: usize,
    pub refine_batch: usize,
    pub refine_crop: usize,
    /// Validation interval for checkpoint selection; 0 keeps the final
    /// parameters.
    pub select_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_steps: 5000,
            finetune_steps: 3000,
            refine_steps: 3000,
            lr: 1e-3,
            lr_drop: 10f64.powf(-0.5),
            milestones: [0.6, 0.85],
            pretrain_images: 1,
            finetune_refs: 4,
            train_radius: 7,
            refine_batch: 4,
            refine_crop: 32,
            select_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_drop > 0.0 && self.lr_drop <= 1.0) {
            return bad("lr_drop must be in (0, 1]");
        }
        let [a, b] = self.milestones;
        if !(0.0..=1.0).contains(&a) || !(a..=1.0).contains(&b) {
            return bad("milestones must satisfy 0 <= first <= second <= 1");
        }
        if self.pretrain_images == 0 || self.finetune_refs == 0 || self.refine_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.train_radius == 0 {
            return bad("train_radius must be at least 1");
        }
        if self.refine_crop < PATCH {
            return bad("refine_crop must be at least 8");
        }
        Ok(())
    }

    /// Learning rate at `step` of a stage lasting `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let drops = self
            .milestones
            .iter()
            .filter(|m| step as f64 >= **m * total as f64)
            .count();
        self.lr * self.lr_drop.powi(drops as i32)
    }
}

/// Everything a run needs, as read from a config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub denoise: DenoiseConfig,
    pub schedule: TrainSchedule,
    pub corpus: CorpusSpec,
    pub matcher: MatcherArch,
    pub refine: RefineArch,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            denoise: DenoiseConfig::default(),
            schedule: TrainSchedule::default(),
            corpus: CorpusSpec::default(),
            matcher: MatcherArch::default(),
            refine: RefineArch::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|x| parse(x.trim())).collect()
}

impl Settings {
    pub const KEYS: &'static [&'static str] = &[
        "window_radius",
        "sigma",
        "sigma_mode",
        "stage",
        "seed",
        "pretrain_steps",
        "finetune_steps",
        "refine_steps",
        "lr",
        "lr_drop",
        "milestones",
        "pretrain_images",
        "finetune_refs",
        "train_radius",
        "refine_batch",
        "refine_crop",
        "select_every",
        "corpus_count",
        "corpus_val",
        "corpus_size",
        "corpus_kind",
        "corpus_seed",
        "stage_widths",
        "tail_width",
        "feature_width",
        "hidden_width",
        "refine_width",
    ];

    /// Sets one key. Errors are plain messages; callers attach context.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let s = &mut self.schedule;
        match key {
            "window_radius" => self.denoise.window_radius = parse(v)?,
            "sigma" => self.denoise.sigma_mode = SigmaMode::Fixed(parse(v)?),
            "sigma_mode" => self.denoise.sigma_mode = parse(v)?,
            "stage" => self.denoise.stage = parse(v)?,
            "seed" => self.denoise.seed = parse(v)?,
            "pretrain_steps" => s.pretrain_steps = parse(v)?,
            "finetune_steps" => s.finetune_steps = parse(v)?,
            "refine_steps" => s.refine_steps = parse(v)?,
            "lr" => s.lr = parse(v)?,
            "lr_drop" => s.lr_drop = parse(v)?,
            "milestones" => {
                let m: Vec<f64> = v.split(',').map(|x| parse(x.trim())).collect::<std::result::Result<_, _>>()?;
                s.milestones = m.try_into().map_err(|_| "milestones takes two values".to_string())?;
            }
            "pretrain_images" => s.pretrain_images = parse(v)?,
            "finetune_refs" => s.finetune_refs = parse(v)?,
            "train_radius" => s.train_radius = parse(v)?,
            "refine_batch" => s.refine_batch = parse(v)?,
            "refine_crop" => s.refine_crop = parse(v)?,
            "select_every" => s.select_every = parse(v)?,
            "corpus_count" => self.corpus.count = parse(v)?,
            "corpus_val" => self.corpus.val_count = parse(v)?,
            "corpus_size" => self.corpus.size = parse(v)?,
            "corpus_kind" => self.corpus.kind = parse::<CorpusKind>(v)?,
            "corpus_seed" => self.corpus.seed = parse(v)?,
            "stage_widths" => {
                self.matcher.stage_widths = parse_list(v)?
                    .try_into()
                    .map_err(|_| "stage_widths takes three values".to_string())?
            }
            "tail_width" => self.matcher.tail_width = parse(v)?,
            "feature_width" => self.matcher.feature_width = parse(v)?,
            "hidden_width" => self.matcher.hidden_width = parse(v)?,
            "refine_width" => self.refine.width = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v).map_err(err)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self::default();
        s.apply_text(&text)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoise.validate()?;
        self.schedule.validate()?;
        self.corpus.validate()?;
        self.matcher.validate()?;
        self.refine.validate()
    }
}
