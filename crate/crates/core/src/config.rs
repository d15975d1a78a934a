//! Run configuration for the command-line tool.
//!
//! A run is described by a TOML file with nested sections (`dataset`,
//! `model`, `train`, `eval`, `output`, `spectra`, `ablation`, `preview`)
//! and a top-level `seed`. [`RunConfig::resolve`] validates it and
//! materializes every default, so the resolved form written next to each
//! artifact describes the run completely and loads back unchanged.
//!
//! ```toml
//! seed = 7
//!
//! [dataset]
//! patch_size = 9
//! synth = { preset = "pavia-mini", seed = 1 }
//! split = { per_class_train = 300 }
//!
//! [train]
//! regime = "at"
//! epochs = 15
//!
//! [eval]
//! attacks = ["Benign", "FGSM", "PGD-10"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::ImbalanceThresholds;
use crate::attack::{self, AttackConfig, AttackSpec, NamedAttack};
use crate::augment::{AugOp, RaPolicy};
use crate::data::{SplitConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng;
use crate::tensor::Precision;
use crate::train::TrainConfig;

pub const PRESETS: [&str; 1] = ["pavia-mini"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub spectra: SpectraConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
    #[serde(default)]
    pub preview: PreviewConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// HSC cube on disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSource>,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    /// Per-band min-max normalization to `[0, 1]`.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub split: SplitConfig,
}

fn default_patch_size() -> usize {
    9
}

fn yes() -> bool {
    true
}

/// Synthetic scene: a named preset or an explicit spec, plus optional
/// prototype blends that inject class overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SynthSpec>,
    /// Scene noise seed; derived from the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blend: Vec<Blend>,
}

/// Moves class `class` (one-based) a fraction `weight` toward `toward`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blend {
    pub class: usize,
    pub toward: usize,
    pub weight: f64,
}

/// Optional changes to the default MiniResNet shape. Band, class and patch
/// counts always come from the dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks_per_stage: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_multiplier: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, mut cfg: ModelConfig) -> ModelConfig {
        if let Some(v) = self.stem_channels {
            cfg.stem_channels = v;
        }
        if let Some(v) = &self.blocks_per_stage {
            cfg.blocks_per_stage = v.clone();
        }
        if let Some(v) = self.channel_multiplier {
            cfg.channel_multiplier = v;
        }
        cfg
    }
}

/// An attack given by its suite name (`"PGD-10"`) or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackEntry {
    Name(String),
    Custom(NamedAttack),
}

impl AttackEntry {
    /// Resolves a suite name against the standard attacks at `eps`.
    /// `PGD-<n>` works for any iteration count.
    pub fn resolve(&self, eps: f64, seed: u64) -> Result<NamedAttack> {
        let name = match self {
            AttackEntry::Custom(a) => return Ok(a.clone()),
            AttackEntry::Name(n) => n,
        };
        if let Some(a) = attack::standard_suite(eps, seed).into_iter().find(|a| a.name.eq_ignore_ascii_case(name)) {
            return Ok(a);
        }
        let iters = name
            .to_ascii_lowercase()
            .strip_prefix("pgd-")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack `{name}`")))?;
        let cfg = AttackConfig { eps, iters, seed: rng::derive(seed, &[iters as u64]), ..AttackConfig::default() };
        Ok(NamedAttack::new(format!("PGD-{iters}"), AttackSpec::Pgd(cfg)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Budget applied to attacks given by name.
    pub eps: f64,
    pub batch_size: usize,
    pub attacks: Vec<AttackEntry>,
    /// Evaluate only the first `n` test samples of each class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_per_class: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eps: attack::DEFAULT_EPS,
            batch_size: 256,
            attacks: ["Benign", "FGSM", "PGD-10", "PGD-50", "CW", "AA-lite"]
                .map(|n| AttackEntry::Name(n.to_string()))
                .to_vec(),
            subset_per_class: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), formats: vec![Format::Csv, Format::Json] }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraConfig {
    /// Attack producing the adversarial envelopes; `"Benign"` gives a
    /// benign-only report.
    pub attack: AttackEntry,
    pub imbalance: ImbalanceThresholds,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        Self { attack: AttackEntry::Name("PGD-10".into()), imbalance: ImbalanceThresholds::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// One run per op with a single-op pool.
    SingleOp,
    /// One run per pool size `2..=|pool|` with a seeded random subset.
    PoolSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub mode: AblationMode,
    /// Training seeds averaged per row; the run seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "all_ops")]
    pub pool: Vec<AugOp>,
    #[serde(default = "pgd10")]
    pub attack: AttackEntry,
}

fn all_ops() -> Vec<AugOp> {
    AugOp::ALL.to_vec()
}

fn pgd10() -> AttackEntry {
    AttackEntry::Name("PGD-10".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewConfig {
    /// Patches drawn from the training split.
    pub samples: usize,
    pub policy: RaPolicy,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        Self { samples: 4, policy: RaPolicy::default() }
    }
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::config(path, message)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let path = toml_key_path(text, e.span()).unwrap_or_else(|| "<root>".into());
            cfg_err(&path, message)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn dataset(&self) -> Result<&DatasetConfig> {
        self.dataset.as_ref().ok_or_else(|| cfg_err("dataset", "section is missing"))
    }

    /// Checks every section; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let ds = self.dataset()?;
        match (&ds.path, &ds.synth) {
            (Some(_), Some(_)) => return Err(cfg_err("dataset", "set exactly one of `path` and `synth`, not both")),
            (None, None) => return Err(cfg_err("dataset", "set one of `path` or `synth`")),
            (None, Some(s)) => {
                match (&s.preset, &s.spec) {
                    (Some(_), Some(_)) => return Err(cfg_err("dataset.synth", "set one of `preset` and `spec`, not both")),
                    (None, None) => return Err(cfg_err("dataset.synth", "set `preset` or `spec`")),
                    (Some(p), None) if !PRESETS.contains(&p.as_str()) => {
                        return Err(cfg_err("dataset.synth.preset", format!("unknown preset `{p}` (known: {})", PRESETS.join(", "))))
                    }
                    _ => {}
                }
                for (i, b) in s.blend.iter().enumerate() {
                    if !(0.0..=1.0).contains(&b.weight) {
                        return Err(cfg_err(&format!("dataset.synth.blend[{i}].weight"), format!("{} is outside [0, 1]", b.weight)));
                    }
                }
            }
            (Some(_), None) => {
                if ds.split.per_class_train == 0 {
                    return Err(cfg_err("dataset.split.per_class_train", "must be at least 1"));
                }
            }
        }
        if ds.patch_size == 0 || ds.patch_size % 2 == 0 {
            return Err(cfg_err("dataset.patch_size", format!("must be odd and positive, got {}", ds.patch_size)));
        }
        if ds.split.per_class_train == 0 {
            return Err(cfg_err("dataset.split.per_class_train", "must be at least 1"));
        }
        let probe = self.model.apply(ModelConfig::new(1, 1, ds.patch_size));
        probe.validate().map_err(|e| cfg_err("model", e.to_string()))?;
        let mut train = self.train.clone();
        if train.regime.uses_augment() && train.ra_policy.is_none() {
            train.ra_policy = Some(RaPolicy::default());
        }
        train.validate()?;
        if !(self.eval.eps >= 0.0 && self.eval.eps.is_finite()) {
            return Err(cfg_err("eval.eps", format!("must be finite and >= 0, got {}", self.eval.eps)));
        }
        if self.eval.batch_size == 0 {
            return Err(cfg_err("eval.batch_size", "must be at least 1"));
        }
        if self.eval.subset_per_class == Some(0) {
            return Err(cfg_err("eval.subset_per_class", "must be at least 1"));
        }
        for (i, a) in self.eval.attacks.iter().enumerate() {
            let a = a.resolve(self.eval.eps, 0).map_err(|e| cfg_err(&format!("eval.attacks[{i}]"), e.to_string()))?;
            check_attack(&a, &format!("eval.attacks[{i}]"))?;
        }
        self.spectra.attack.resolve(self.eval.eps, 0).map_err(|e| cfg_err("spectra.attack", e.to_string()))?;
        if let Some(a) = &self.ablation {
            if a.pool.is_empty() {
                return Err(cfg_err("ablation.pool", "must not be empty"));
            }
            if a.mode == AblationMode::PoolSize && a.pool.len() < 2 {
                return Err(cfg_err("ablation.pool", "pool-size mode needs at least two ops"));
            }
            a.attack.resolve(self.eval.eps, 0).map_err(|e| cfg_err("ablation.attack", e.to_string()))?;
        }
        self.preview.policy.validate().map_err(|e| cfg_err("preview.policy", e.to_string()))?;
        if self.output.formats.is_empty() {
            return Err(cfg_err("output.formats", "must list at least one of csv, json"));
        }
        Ok(())
    }

    /// Validates and fills in every derived value: the synthetic spec with
    /// blends applied, scene and split seeds, the training seed and inner
    /// attack, the RandAugment policy, and fully specified attack lists.
    pub fn resolve(&self) -> Result<RunConfig> {
        self.validate()?;
        let mut out = self.clone();
        let seed = self.seed;
        let ds = out.dataset.as_mut().expect("validated");
        if let Some(s) = &mut ds.synth {
            let mut spec = match (&s.preset, &s.spec) {
                (Some(_), _) => SynthSpec::pavia_mini(),
                (None, Some(spec)) => spec.clone(),
                (None, None) => unreachable!("validated"),
            };
            for (i, b) in s.blend.iter().enumerate() {
                let path = format!("dataset.synth.blend[{i}]");
                let n = spec.classes.len();
                if b.class == 0 || b.class > n || b.toward == 0 || b.toward > n {
                    return Err(cfg_err(&path, format!("class ids must be in 1..={n}")));
                }
                spec.classes[b.class - 1].blend = Some((b.toward, b.weight));
            }
            spec.prototypes().map_err(|e| cfg_err("dataset.synth", e.to_string()))?;
            s.preset = None;
            s.spec = Some(spec);
            s.blend.clear();
            s.seed.get_or_insert(rng::substream(seed, "synth"));
        }
        ds.split.seed.get_or_insert(rng::substream(seed, "split"));
        out.train.seed = seed;
        out.train.attack = Some(self.train.attack_config());
        if out.train.regime.uses_augment() && out.train.ra_policy.is_none() {
            out.train.ra_policy = Some(RaPolicy::default());
        }
        let eval_seed = rng::substream(seed, "eval");
        out.eval.attacks = self
            .eval
            .attacks
            .iter()
            .map(|a| a.resolve(self.eval.eps, eval_seed).map(AttackEntry::Custom))
            .collect::<Result<_>>()?;
        out.spectra.attack = AttackEntry::Custom(self.spectra.attack.resolve(self.eval.eps, eval_seed)?);
        if let Some(a) = &mut out.ablation {
            if a.seeds.is_empty() {
                a.seeds = vec![seed];
            }
            a.attack = AttackEntry::Custom(a.attack.resolve(self.eval.eps, eval_seed)?);
        }
        out.preview.policy.seed = rng::substream(seed, "preview");
        Ok(out)
    }

    /// Attacks of a resolved config.
    pub fn eval_attacks(&self) -> Result<Vec<NamedAttack>> {
        self.eval.attacks.iter().map(|a| a.resolve(self.eval.eps, rng::substream(self.seed, "eval"))).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes to JSON")
    }
}

fn check_attack(a: &NamedAttack, path: &str) -> Result<()> {
    match &a.spec {
        AttackSpec::Fgsm(c) | AttackSpec::Pgd(c) => c.validate().map_err(|e| cfg_err(path, e.to_string())),
        AttackSpec::AaLite { eps, .. } if !(*eps >= 0.0 && eps.is_finite()) => Err(cfg_err(path, format!("eps {eps}"))),
        _ => Ok(()),
    }
}

/// Dotted path of the table key at a TOML error span, found by tracking
/// `[section]` headers and `key =` lines up to the error offset.
fn toml_key_path(text: &str, span: Option<std::ops::Range<usize>>) -> Option<String> {
    let at = span?.start;
    let mut section = String::new();
    let mut key = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if offset > at {
            break;
        }
        let t = line.trim();
        if t.starts_with('[') {
            section = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key = None;
        } else if let Some((k, _)) = t.split_once('=') {
            if !t.starts_with('#') {
                key = Some(k.trim().to_string());
            }
        }
        offset += line.len();
    }
    match (section.is_empty(), key) {
        (true, k) => k,
        (false, Some(k)) => Some(format!("{section}.{k}")),
        (false, None) => Some(section),
    }
}
