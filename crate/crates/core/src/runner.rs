//! Config-driven runs behind the command-line subcommands.
//!
//! Every run starts from a resolved [`RunConfig`]. Artifacts go to
//! `output.dir`; each one carries the resolved config (a `# config:` first
//! line in CSV files, a `config` field in JSON summaries, the run block of a
//! checkpoint). Summaries hold only seed-determined values, so re-running a
//! subcommand with the same config reproduces them byte for byte. Wall
//! times appear only in CSV logs and the returned in-memory reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{self, ConfusionMatrix, ImbalanceReport, SpectralEnvelope};
use crate::attack::{self, AttackSpec, NamedAttack};
use crate::augment::{self, AugOp, RaPolicy};
use crate::config::{AblationMode, AttackEntry, Format, RunConfig};
use crate::data::{self, HsiCube, PatchDataset, Split};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::train::{self, Regime, RunLog, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Dataset, split and model shape of a resolved run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub cube: HsiCube,
    pub split: Split,
    pub model: ModelConfig,
}

/// Resolves `cfg` (if it is not already) and builds its dataset.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let config = cfg.resolve()?;
    let ds = config.dataset()?;
    let cube = match (&ds.path, &ds.synth) {
        (Some(p), _) => data::load_cube(p)?,
        (None, Some(s)) => {
            let spec = s.spec.as_ref().expect("resolved");
            data::synthesize_dataset(spec, s.seed.expect("resolved"))?
        }
        (None, None) => unreachable!("validated"),
    };
    let cube = if ds.normalize { data::normalize_per_band(&cube) } else { cube };
    let patches = data::extract_patches(&cube, ds.patch_size)?;
    let split = data::stratified_split(&patches, &ds.split, ds.split.seed.expect("resolved"))?;
    let model = config.model.apply(ModelConfig::new(cube.bands, cube.num_classes(), ds.patch_size));
    Ok(Prepared { config, cube, split, model })
}

struct Out<'a> {
    dir: &'a Path,
    config: &'a RunConfig,
    written: Vec<PathBuf>,
}

impl<'a> Out<'a> {
    fn new(config: &'a RunConfig) -> Result<Self> {
        fs::create_dir_all(&config.output.dir)?;
        Ok(Self { dir: &config.output.dir, config, written: Vec::new() })
    }

    fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        if self.config.output.wants(Format::Csv) {
            let header = format!("# config: {}\n", self.config.to_json());
            self.write(name, &(header + body))?;
        }
        Ok(())
    }

    fn json(&mut self, name: &str, kind: &str, body: Value) -> Result<()> {
        if self.config.output.wants(Format::Json) {
            let doc = json!({ "kind": kind, "seed": self.config.seed, "config": self.config.to_json(), "result": body });
            self.write(name, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
        }
        Ok(())
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text)?;
        self.written.push(path);
        Ok(())
    }
}

/// Lower-case alphanumeric file-name stem, e.g. `Bare soil (wet)` ->
/// `bare-soil-wet`.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

/// FNV-1a over the `f32` bit patterns of all parameters.
pub fn params_digest<T: Float>(params: &ModelParams<T>) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in &params.params {
        for v in p.value.data() {
            for b in (v.as_f64() as f32).to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub params: ModelParams<T>,
    pub log: RunLog,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

fn epoch_rows(records: &[train::EpochRecord]) -> Value {
    records
        .iter()
        .map(|e| {
            json!({
                "epoch": e.epoch,
                "lr": e.lr,
                "train_loss": e.train_loss,
                "benign_acc": e.benign_acc,
                "attack_acc": e.attack_acc.iter().map(|(n, a)| json!({ "attack": n, "acc": a })).collect::<Vec<_>>(),
            })
        })
        .collect()
}

/// Trains per `train`, then writes the checkpoint, the epoch log and the
/// summary.
pub fn run_train<T: Float>(cfg: &RunConfig) -> Result<TrainReport<T>> {
    let prep = prepare(cfg)?;
    let outcome = train::train::<T>(&prep.config.train, &prep.model, &prep.split.train, Some(&prep.split.test), &mut ())?;
    let mut out = Out::new(&prep.config)?;
    let run = prep.config.to_json();
    let ckpt = out.dir.join(CHECKPOINT_FILE);
    model::save_checkpoint(&outcome.params, Some(run), &ckpt)?;
    out.written.push(ckpt);
    out.csv("train_log.csv", &outcome.log.to_csv())?;
    let summary = json!({
        "label": outcome.log.label,
        "regime": prep.config.train.regime,
        "train_samples": prep.split.train.len(),
        "test_samples": prep.split.test.len(),
        "split_notes": prep.split.notes,
        "pretrain": epoch_rows(&outcome.log.pretrain),
        "epochs": epoch_rows(&outcome.log.epochs),
        "final_benign_acc": outcome.log.final_benign_acc(),
        "steps": outcome.params.step,
        "params_digest": params_digest(&outcome.params),
    });
    out.json("train_summary.json", "train", summary.clone())?;
    Ok(TrainReport { params: outcome.params, log: outcome.log, summary, files: out.written })
}

/// Loads a checkpoint and checks it against the dataset's band, class and
/// patch counts.
pub fn load_model<T: Float>(prep: &Prepared, path: &Path) -> Result<ModelParams<T>> {
    let ckpt = model::load_checkpoint::<T>(path)?;
    let (have, want) = (&ckpt.params.config, &prep.model);
    let checks = [
        ("bands", have.in_bands, want.in_bands),
        ("classes", have.num_classes, want.num_classes),
        ("patch size", have.patch_size, want.patch_size),
    ];
    if let Some((what, h, w)) = checks.iter().find(|(_, h, w)| h != w) {
        return Err(Error::CheckpointMismatch(format!("checkpoint {what} {h}, dataset {w}")));
    }
    Ok(ckpt.params)
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE))
}

/// The first `n` test samples of every class, in dataset order.
fn eval_split(prep: &Prepared) -> PatchDataset {
    let test = &prep.split.test;
    match prep.config.eval.subset_per_class {
        None => test.clone(),
        Some(n) => {
            let mut seen = vec![0usize; test.num_classes];
            let keep: Vec<usize> = (0..test.len())
                .filter(|&i| {
                    let c = test.labels[i] as usize - 1;
                    seen[c] += 1;
                    seen[c] <= n
                })
                .collect();
            test.subset(&keep)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackRow {
    pub attack: String,
    /// `"reduced ensemble"` for AA-lite.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub rows: Vec<AttackRow>,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

impl EvalReport {
    pub fn accuracy(&self, attack: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.attack == attack).map(|r| r.accuracy)
    }

    pub fn row(&self, attack: &str) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.attack == attack)
    }
}

fn attack_row<T: Float>(model: &ModelParams<T>, ds: &PatchDataset, a: &NamedAttack, batch: usize) -> Result<AttackRow> {
    let r = attack::evaluate(model, ds, &a.spec, batch)?;
    let cm = analysis::confusion_matrix(&r.predictions, &r.targets, ds.num_classes)?;
    Ok(AttackRow {
        attack: a.name.clone(),
        note: matches!(a.spec, AttackSpec::AaLite { .. }).then(|| "reduced ensemble".to_string()),
        accuracy: r.accuracy(),
        per_class: analysis::classwise_accuracy(&cm),
        confusion: cm,
    })
}

/// Evaluates a trained model under every configured attack.
pub fn run_eval<T: Float>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let prep = prepare(cfg)?;
    let model = load_model::<T>(&prep, &checkpoint_path(&prep.config, checkpoint))?;
    let ds = eval_split(&prep);
    let rows = prep
        .config
        .eval_attacks()?
        .iter()
        .map(|a| attack_row(&model, &ds, a, prep.config.eval.batch_size))
        .collect::<Result<Vec<_>>>()?;
    let names = ds.class_names.clone();
    let mut out = Out::new(&prep.config)?;
    let mut table = String::from("Attack,Accuracy");
    names.iter().for_each(|n| table.push_str(&format!(",{}", analysis::csv_field(n))));
    table.push_str(",Note\n");
    for r in &rows {
        table.push_str(&format!("{},{:.4}", analysis::csv_field(&r.attack), r.accuracy));
        for a in &r.per_class {
            table.push_str(&a.map(|v| format!(",{v:.4}")).unwrap_or_else(|| ",NA".into()));
        }
        table.push_str(&format!(",{}\n", r.note.as_deref().unwrap_or("")));
    }
    out.csv("eval.csv", &table)?;
    for r in &rows {
        out.csv(&format!("confusion_{}.csv", slug(&r.attack)), &r.confusion.to_csv(&names))?;
    }
    let summary = json!({
        "samples": ds.len(),
        "class_names": names,
        "params_digest": params_digest(&model),
        "attacks": rows,
    });
    out.json("eval_summary.json", "eval", summary.clone())?;
    Ok(EvalReport { class_names: names, rows, summary, files: out.written })
}

/// Spectrum of the center pixel of every sample of a `[N, B, s, s]` batch.
pub fn center_spectra<T: Float>(batch: &Tensor<T>) -> Vec<Vec<f32>> {
    let (n, b, s) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    let center = (s / 2) * s + s / 2;
    (0..n).map(|i| (0..b).map(|k| batch.row(i)[k * s * s + center].as_f64() as f32).collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSpectra {
    pub class: usize,
    pub name: String,
    pub benign: SpectralEnvelope,
    pub mean_tv_benign: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<SpectralEnvelope>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_tv_adversarial: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SpectraReport {
    pub classes: Vec<ClassSpectra>,
    pub imbalance: Option<ImbalanceReport>,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

fn mean_tv(spectra: &[&Vec<f32>]) -> Result<f64> {
    let mut sum = 0.0;
    for s in spectra {
        sum += analysis::spectral_tv(&s.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    }
    Ok(sum / spectra.len().max(1) as f64)
}

/// Per-class benign and adversarial spectral envelopes, mean spectral total
/// variation, and the imbalance report under the configured attack.
pub fn run_spectra<T: Float>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<SpectraReport> {
    let prep = prepare(cfg)?;
    let model = load_model::<T>(&prep, &checkpoint_path(&prep.config, checkpoint))?;
    let ds = eval_split(&prep);
    let spec = prep.config.spectra.attack.resolve(prep.config.eval.eps, rng::substream(prep.config.seed, "eval"))?;
    let adversarial = !matches!(spec.spec, AttackSpec::Benign);
    let targets = ds.targets();
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut benign_spectra = Vec::with_capacity(ds.len());
    let mut adv_spectra = Vec::new();
    let mut benign_pred = Vec::with_capacity(ds.len());
    let mut adv_pred = Vec::new();
    for chunk in all.chunks(prep.config.eval.batch_size) {
        let x = ds.batch::<T>(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        benign_spectra.extend(center_spectra(&x));
        let z = model::forward_logits(&model, &x)?;
        benign_pred.extend(y.iter().enumerate().map(|(k, &t)| attack::predict(z.row(k), t)));
        if adversarial {
            let adv = spec.spec.run(&model, &x, &y, &ids)?;
            adv_spectra.extend(center_spectra(&adv.x_adv));
            let z = model::forward_logits(&model, &adv.x_adv)?;
            adv_pred.extend(y.iter().enumerate().map(|(k, &t)| attack::predict(z.row(k), t)));
        }
    }
    let names = ds.class_names.clone();
    let wavelengths = ds.wavelengths.clone();
    let mut classes = Vec::new();
    for c in 0..ds.num_classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| targets[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let benign: Vec<&Vec<f32>> = members.iter().map(|&i| &benign_spectra[i]).collect();
        let adv: Vec<&Vec<f32>> = members.iter().filter_map(|&i| adv_spectra.get(i)).collect();
        classes.push(ClassSpectra {
            class: c,
            name: names[c].clone(),
            benign: analysis::spectral_envelope(&benign)?,
            mean_tv_benign: mean_tv(&benign)?,
            adversarial: if adversarial { Some(analysis::spectral_envelope(&adv)?) } else { None },
            mean_tv_adversarial: if adversarial { Some(mean_tv(&adv)?) } else { None },
        });
    }
    let imbalance = if adversarial {
        let cb = analysis::confusion_matrix(&benign_pred, &targets, ds.num_classes)?;
        let ca = analysis::confusion_matrix(&adv_pred, &targets, ds.num_classes)?;
        Some(analysis::imbalance_report(&cb, &ca, &names, prep.config.spectra.imbalance)?)
    } else {
        None
    };

    let mut out = Out::new(&prep.config)?;
    for cs in &classes {
        let mut body = String::from("band,wavelength,benign_lower,benign_mean,benign_upper");
        if cs.adversarial.is_some() {
            body.push_str(",adv_lower,adv_mean,adv_upper");
        }
        body.push('\n');
        for b in 0..cs.benign.bands() {
            let wl = wavelengths.as_ref().and_then(|w| w.get(b)).map(|w| w.to_string()).unwrap_or_default();
            body.push_str(&format!("{b},{wl},{:.6},{:.6},{:.6}", cs.benign.lower[b], cs.benign.mean[b], cs.benign.upper[b]));
            if let Some(a) = &cs.adversarial {
                body.push_str(&format!(",{:.6},{:.6},{:.6}", a.lower[b], a.mean[b], a.upper[b]));
            }
            body.push('\n');
        }
        out.csv(&format!("envelope_{}_{}.csv", cs.class + 1, slug(&cs.name)), &body)?;
    }
    if let Some(rep) = &imbalance {
        out.csv("imbalance.csv", &rep.to_csv())?;
    }
    let summary = json!({
        "samples": ds.len(),
        "attack": spec.name,
        "params_digest": params_digest(&model),
        "classes": classes,
        "imbalance": imbalance,
        "flagged": imbalance.as_ref().map(|r| r.flagged_names()),
    });
    out.json("spectra_summary.json", "spectra", summary.clone())?;
    Ok(SpectraReport { classes, imbalance, summary, files: out.written })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    /// Op name in single-op mode, pool size in pool-size mode.
    pub setting: String,
    pub pool: Vec<AugOp>,
    pub benign: f64,
    pub robust: f64,
    pub per_seed: Vec<(u64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

/// Seeded random `n`-subset of `pool`, kept in pool order.
pub fn pool_subset(pool: &[AugOp], n: usize, seed: u64) -> Vec<AugOp> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng::rng_for(seed, &[rng::name_hash("pool-size"), n as u64]));
    let mut keep = idx[..n.min(pool.len())].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| pool[i]).collect()
}

/// RandAugment ablation: one AT-RA (FAT-RA for fast regimes) setting per
/// row, benign and robust accuracy averaged over the configured seeds.
pub fn run_ablation<T: Float>(cfg: &RunConfig) -> Result<AblationReport> {
    let prep = prepare(cfg)?;
    let ab = prep.config.ablation.clone().ok_or_else(|| Error::Config { path: "ablation".into(), message: "section is missing".into() })?;
    let attack = match &ab.attack {
        AttackEntry::Custom(a) => a.clone(),
        AttackEntry::Name(_) => unreachable!("resolved"),
    };
    let regime = if prep.config.train.regime.is_fast() { Regime::FatRa } else { Regime::AtRa };
    let base_policy = prep.config.train.ra_policy.clone().unwrap_or_default();
    let settings: Vec<(String, Vec<AugOp>)> = match ab.mode {
        AblationMode::SingleOp => ab.pool.iter().map(|&op| (op.name().to_string(), vec![op])).collect(),
        AblationMode::PoolSize => {
            (2..=ab.pool.len()).map(|n| (n.to_string(), pool_subset(&ab.pool, n, prep.config.seed))).collect()
        }
    };
    let ds = eval_split(&prep);
    let mut rows = Vec::new();
    for (setting, pool) in settings {
        let mut per_seed = Vec::new();
        for &seed in &ab.seeds {
            let tc = TrainConfig {
                regime,
                ra_policy: Some(RaPolicy { pool: pool.clone(), ..base_policy.clone() }),
                seed,
                ..prep.config.train.clone()
            };
            let outcome = train::train::<T>(&tc, &prep.model, &prep.split.train, Some(&prep.split.test), &mut ())?;
            let benign = attack::evaluate(&outcome.params, &ds, &AttackSpec::Benign, prep.config.eval.batch_size)?.accuracy();
            let robust = attack::evaluate(&outcome.params, &ds, &attack.spec, prep.config.eval.batch_size)?.accuracy();
            per_seed.push((seed, benign, robust));
        }
        let n = per_seed.len() as f64;
        rows.push(AblationRow {
            setting,
            pool,
            benign: per_seed.iter().map(|r| r.1).sum::<f64>() / n,
            robust: per_seed.iter().map(|r| r.2).sum::<f64>() / n,
            per_seed,
        });
    }
    let mut out = Out::new(&prep.config)?;
    let mut table = format!("Setting,Pool,Benign,{}\n", analysis::csv_field(&attack.name));
    for r in &rows {
        let pool: Vec<&str> = r.pool.iter().map(|o| o.name()).collect();
        table.push_str(&format!("{},{},{:.4},{:.4}\n", r.setting, pool.join(" "), r.benign, r.robust));
    }
    out.csv("ablation.csv", &table)?;
    let summary = json!({ "mode": ab.mode, "regime": regime, "attack": attack.name, "rows": rows });
    out.json("ablation_summary.json", "ablation", summary.clone())?;
    Ok(AblationReport { rows, summary, files: out.written })
}

#[derive(Debug, Clone, Serialize)]
pub struct PreviewSample {
    pub index: usize,
    pub class: String,
    pub ops: Vec<(AugOp, i32)>,
    pub center_before: Vec<f32>,
    pub center_after: Vec<f32>,
    pub max_abs_change: f32,
}

/// Applies sampled policies to the first training patches and reports the
/// ops and the center spectra before and after.
pub fn augment_preview(cfg: &RunConfig) -> Result<(Vec<PreviewSample>, Vec<PathBuf>)> {
    let prep = prepare(cfg)?;
    let train = &prep.split.train;
    let policy = &prep.config.preview.policy;
    let (s, bands) = (train.patch_size, train.bands);
    let c = (s / 2 * s + s / 2) * bands;
    let mut samples = Vec::new();
    for i in 0..prep.config.preview.samples.min(train.len()) {
        let mut r = rng::rng_for(policy.seed, &[i as u64]);
        let ops = augment::sample_policy(policy, &mut r)?;
        let mut patch = train.patch(i).to_vec();
        for &(op, m) in &ops {
            patch = augment::apply_signed(&patch, s, bands, op, m)?;
        }
        let before = train.patch(i);
        let max_abs_change = before.iter().zip(&patch).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        samples.push(PreviewSample {
            index: i,
            class: train.class_names[train.labels[i] as usize - 1].clone(),
            ops,
            center_before: before[c..c + bands].to_vec(),
            center_after: patch[c..c + bands].to_vec(),
            max_abs_change,
        });
    }
    let mut out = Out::new(&prep.config)?;
    let mut table = String::from("sample,class,ops,band,before,after\n");
    for p in &samples {
        let ops: Vec<String> = p.ops.iter().map(|(o, m)| format!("{o}{m:+}")).collect();
        for b in 0..bands {
            table.push_str(&format!(
                "{},{},{},{b},{:.6},{:.6}\n",
                p.index,
                analysis::csv_field(&p.class),
                ops.join(" "),
                p.center_before[b],
                p.center_after[b]
            ));
        }
    }
    out.csv("augment_preview.csv", &table)?;
    out.json("augment_preview.json", "augment-preview", json!({ "samples": samples }))?;
    Ok((samples, out.written))
}

/// Writes the configured synthetic scene (pavia-mini by default) as an HSC
/// cube, before normalization.
pub fn run_synth(cfg: &RunConfig) -> Result<(HsiCube, Vec<PathBuf>)> {
    let config = cfg.resolve()?;
    let synth = config
        .dataset()?
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config { path: "dataset.synth".into(), message: "synth needs a synthetic dataset".into() })?;
    let cube = data::synthesize_dataset(synth.spec.as_ref().expect("resolved"), synth.seed.expect("resolved"))?;
    let mut out = Out::new(&config)?;
    let path = out.dir.join("pavia-mini.hsc");
    data::save_cube(&cube, &path)?;
    out.written.push(path);
    let summary = json!({
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "class_names": cube.class_names,
        "class_counts": cube.class_counts(),
    });
    out.json("synth_summary.json", "synth", summary)?;
    Ok((cube, out.written))
}

/// Wall-clock seconds of `f`.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}
