//! Experiment configuration: a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [modulation]
//! gamma = 0.6
//! schedule = log
//! ```
//!
//! Every key is optional and falls back to its default. Unknown sections or
//! keys, repeated keys and unparsable values are rejected with the line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::SweepConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ReferenceConditioning, SpriteDatasetConfig, TrainConfig};
use crate::modulation::{BranchPolicy, ModulationConfig, ScheduleKind};
use crate::sampler::{Condition, SamplerConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cond_class: usize,
    pub attention_window: f64,
    pub reference_gamma: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        let cond_class = match d.cond {
            Condition::Class(c) => c,
            Condition::Null => 0,
        };
        Self { gammas: d.gammas, seeds: d.seeds, cond_class, attention_window: d.attention_window, reference_gamma: d.reference_gamma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Layout, attention and network sizes.
    pub model: ModelConfig,
    pub model_seed: u64,
    /// Record frame attention while sampling.
    pub capture: bool,
    pub modulation: ModulationConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Frame and canvas sizes always follow `model`.
    pub dataset: SpriteDatasetConfig,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let mut c = Self {
            schema_version: SCHEMA_VERSION,
            model,
            model_seed: 0,
            capture: false,
            modulation: ModulationConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            dataset: SpriteDatasetConfig::default(),
            sweep: SweepSection::default(),
        };
        c.sync();
        c
    }
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u32, u64, bool, ScheduleKind, BranchPolicy, ReferenceConditioning);

impl ConfigValue for f64 {
    fn parse(s: &str) -> Result<Self, String> {
        let v = f64::from_str(s).map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{s} is not a finite number"))
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(", ")
    }
}

struct Field {
    section: &'static str,
    key: &'static str,
    doc: &'static str,
    get: fn(&ExperimentConfig) -> String,
    set: fn(&mut ExperimentConfig, &str) -> Result<(), String>,
}

macro_rules! fields {
    ($($section:literal . $key:literal => $($path:ident).+, $doc:literal;)*) => {
        const FIELDS: &[Field] = &[$(
            Field {
                section: $section,
                key: $key,
                doc: $doc,
                get: |c| ConfigValue::render(&c.$($path).+),
                set: |c, s| {
                    c.$($path).+ = ConfigValue::parse(s)?;
                    Ok(())
                },
            },
        )*];
    };
}

fields! {
    "experiment"."schema_version" => schema_version, "format version, must be 1";
    "layout"."frames" => model.frames, "latent frames F";
    "layout"."height" => model.height, "latent height H";
    "layout"."width" => model.width, "latent width W";
    "attention"."heads" => model.heads, "attention heads per layer";
    "attention"."head_dim" => model.head_dim, "channels per head";
    "attention"."capture" => capture, "record frame attention while sampling";
    "modulation"."gamma" => modulation.gamma, "bias strength, negative strengthens the reference frame";
    "modulation"."lambda" => modulation.lambda, "active while step/steps < lambda";
    "modulation"."schedule" => modulation.schedule, "uniform | linear | log";
    "modulation"."branch_policy" => modulation.branch_policy, "conditional_only | both_branches";
    "sampler"."steps" => sampler.num_steps, "Euler steps N";
    "sampler"."guidance" => sampler.guidance_scale, "guidance scale, at least 1";
    "sampler"."seed" => sampler.seed, "initial noise seed";
    "sampler"."replace_reference" => sampler.replace_reference, "pin frame 0 to the reference latent";
    "model"."latent_channels" => model.latent_channels, "channels per latent position";
    "model"."layers" => model.layers, "transformer blocks";
    "model"."ff_mult" => model.ff_mult, "feedforward width multiple";
    "model"."num_classes" => model.num_classes, "condition classes (null class extra)";
    "model"."reference" => model.reference, "broadcast | first_frame | none";
    "model"."seed" => model_seed, "parameter init seed";
    "train"."steps" => train.steps, "SGD steps";
    "train"."batch_size" => train.batch_size, "examples per step";
    "train"."learning_rate" => train.learning_rate, "SGD step size";
    "train"."report_every" => train.report_every, "steps between loss-curve points";
    "train"."cond_dropout" => train.cond_dropout, "probability of training on the null condition";
    "train"."seed" => train.seed, "batch and noise seed";
    "train"."eval_examples" => train.eval_examples, "held-out examples scored before and after";
    "dataset"."num_videos" => dataset.num_videos, "sprite clips";
    "dataset"."sprite_size" => dataset.sprite_size, "sprite edge in pixels";
    "dataset"."max_speed" => dataset.max_speed, "largest per-axis speed";
    "dataset"."seed" => dataset.seed, "dataset seed";
    "sweep"."gammas" => sweep.gammas, "comma-separated gamma grid";
    "sweep"."seeds" => sweep.seeds, "comma-separated seeds";
    "sweep"."cond_class" => sweep.cond_class, "class sampled in the sweep";
    "sweep"."attention_window" => sweep.attention_window, "fraction of early steps in the attention average";
    "sweep"."reference_gamma" => sweep.reference_gamma, "gamma of the D(gamma) comparator run";
}

fn field(section: &str, key: &str) -> Option<&'static Field> {
    FIELDS.iter().find(|f| f.section == section && f.key == key)
}

impl ExperimentConfig {
    fn sync(&mut self) {
        self.dataset.frames = self.model.frames;
        self.dataset.height = self.model.height;
        self.dataset.width = self.model.width;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !FIELDS.iter().any(|f| f.section == name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value` or `[section]`, got {line:?}")))?;
            let key = key.trim();
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {line_no}: key `{key}` appears before any [section]")))?;
            let f = field(sec, key).ok_or_else(|| Error::Config(format!("line {line_no}: unknown key `{sec}.{key}`")))?;
            if seen.contains(&(f.section, f.key)) {
                return Err(Error::Config(format!("line {line_no}: `{sec}.{key}` set twice")));
            }
            seen.push((f.section, f.key));
            (f.set)(&mut cfg, value.trim()).map_err(|e| Error::Config(format!("line {line_no}: `{sec}.{key}`: {e}")))?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets one `section.key` value, as from a command-line override.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (sec, key) = dotted.split_once('.').ok_or_else(|| Error::Config(format!("expected section.key, got {dotted:?}")))?;
        let f = field(sec, key).ok_or_else(|| Error::Config(format!("unknown key `{dotted}`")))?;
        (f.set)(self, value).map_err(|e| Error::Config(format!("`{dotted}`: {e}")))?;
        self.sync();
        Ok(())
    }

    pub fn get(&self, dotted: &str) -> Option<String> {
        let (sec, key) = dotted.split_once('.')?;
        field(sec, key).map(|f| (f.get)(self))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        self.model.validate()?;
        self.modulation.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        if self.sweep.cond_class >= self.model.num_classes {
            return Err(Error::Config(format!(
                "sweep.cond_class {} out of range for {} classes",
                self.sweep.cond_class, self.model.num_classes
            )));
        }
        self.sweep_config().validate()
    }

    /// Serializes every key, with its description, in the parse format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for f in FIELDS {
            if f.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", f.section);
                current = f.section;
            }
            let _ = writeln!(out, "# {}\n{} = {}", f.doc, f.key, (f.get)(self));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    pub fn dataset_config(&self) -> SpriteDatasetConfig {
        self.dataset
    }

    /// The reference-free counterpart of the model.
    pub fn t2v_model_config(&self) -> ModelConfig {
        ModelConfig { reference: ReferenceConditioning::None, ..self.model }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            gammas: self.sweep.gammas.clone(),
            seeds: self.sweep.seeds.clone(),
            sampler: self.sampler,
            modulation: self.modulation,
            cond: Condition::Class(self.sweep.cond_class),
            attention_window: self.sweep.attention_window,
            reference_gamma: self.sweep.reference_gamma,
            dataset: self.dataset,
        }
    }

    /// `(section.key, description, default)` for every key.
    pub fn documented_defaults() -> Vec<(String, &'static str, String)> {
        let d = Self::default();
        FIELDS.iter().map(|f| (format!("{}.{}", f.section, f.key), f.doc, (f.get)(&d))).collect()
    }
}
