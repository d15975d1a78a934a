//! Training loops: standard, PGD adversarial training (AT), fast FGSM-based
//! adversarial training (FAT), their RandAugment variants, benign
//! pretraining (BEPM) and the adversarial-plus-benign loss (ABL).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackSpec, NamedAttack};
use crate::augment::{self, RaPolicy};
use crate::data::{patches_to_batch, PatchDataset};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, init_model, Classifier, ModelConfig, ModelParams, Param};
use crate::rng;
use crate::tensor::{Float, GradientMap, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    At,
    Fat,
    AtRa,
    FatRa,
}

impl Regime {
    pub fn is_adversarial(self) -> bool {
        self != Regime::Standard
    }

    pub fn uses_augment(self) -> bool {
        matches!(self, Regime::AtRa | Regime::FatRa)
    }

    pub fn is_fast(self) -> bool {
        matches!(self, Regime::Fat | Regime::FatRa)
    }

    pub fn label(self) -> &'static str {
        match self {
            Regime::Standard => "Standard",
            Regime::At => "AT",
            Regime::Fat => "FAT",
            Regime::AtRa => "AT-RA",
            Regime::FatRa => "FAT-RA",
        }
    }

    /// Inner-maximization defaults: PGD-5 with step 2/255 for AT, one
    /// 8/255 step from a random start for FAT.
    pub fn default_attack(self) -> AttackConfig {
        if self.is_fast() {
            AttackConfig { step: 8.0 / 255.0, iters: 1, random_start: true, ..AttackConfig::default() }
        } else {
            AttackConfig::pgd(5)
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "standard" => Ok(Regime::Standard),
            "at" => Ok(Regime::At),
            "fat" => Ok(Regime::Fat),
            "at_ra" => Ok(Regime::AtRa),
            "fat_ra" => Ok(Regime::FatRa),
            _ => Err(Error::InvalidArgument(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub regime: Regime,
    pub use_bepm: bool,
    pub use_abl: bool,
    /// Benign pretraining epochs run before the adversarial phase.
    pub pretrain_epochs: usize,
    /// Inner attack; the regime default when absent.
    pub attack: Option<AttackConfig>,
    pub ra_policy: Option<RaPolicy>,
    /// Attacks evaluated on the held-out split after every epoch.
    pub epoch_eval: Vec<NamedAttack>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epochs: vec![40, 45],
            lr_drop_factor: 0.1,
            regime: Regime::Standard,
            use_bepm: false,
            use_abl: false,
            pretrain_epochs: 10,
            attack: None,
            ra_policy: None,
            epoch_eval: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn attack_config(&self) -> AttackConfig {
        self.attack.clone().unwrap_or_else(|| self.regime.default_attack())
    }

    /// Table-style run label, e.g. `AT-ABL-BEPM`.
    pub fn label(&self) -> String {
        let mut s = self.regime.label().to_string();
        if self.use_abl {
            s.push_str("-ABL");
        }
        if self.use_bepm {
            s.push_str("-BEPM");
        }
        s
    }

    /// Checks the configuration; errors carry the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { path: format!("train.{key}"), message: msg });
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", format!("must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if let Some(&e) = self.lr_drop_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad("lr_drop_epochs", format!("drop epoch {e} is not below epochs = {}", self.epochs));
        }
        if !self.regime.is_adversarial() && (self.use_abl || self.use_bepm) {
            return bad("regime", "use_abl and use_bepm need an adversarial regime".into());
        }
        if let Some(a) = &self.attack {
            a.validate().or_else(|e| bad("attack", e.to_string()))?;
        }
        if self.regime.is_fast() && self.attack_config().iters != 1 {
            return bad("attack.iters", "fast adversarial training takes a single step".into());
        }
        match (&self.ra_policy, self.regime.uses_augment()) {
            (None, true) => return bad("ra_policy", format!("required by regime {}", self.regime)),
            (Some(p), _) => p.validate().or_else(|e| bad("ra_policy", e.to_string()))?,
            _ => {}
        }
        Ok(())
    }
}

/// Step-decay learning rate: `lr0 * factor^(#drop epochs <= epoch)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr0 * cfg.lr_drop_factor.powi(drops as i32)
}

/// Momentum buffers for [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Float> SgdState<T> {
    pub fn new(params: &[Param<T>], momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }
}

/// `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`.
/// `bound[i]` is the tape handle of `params[i]`.
pub fn sgd_step<T: Float>(params: &mut [Param<T>], bound: &[Var], grads: &GradientMap<T>, lr: f64, state: &mut SgdState<T>) -> Result<()> {
    if bound.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::InvalidArgument("parameter, handle and velocity counts differ".into()));
    }
    for (p, &var) in params.iter().zip(bound) {
        match grads.get(var) {
            Some(g) if g.shape() == p.value.shape() => {}
            _ => return Err(Error::MissingGrad(p.name.clone())),
        }
    }
    let (mu, wd, lr) = (T::from_f(state.momentum), T::from_f(state.weight_decay), T::from_f(lr));
    for ((p, &var), v) in params.iter_mut().zip(bound).zip(&mut state.velocity) {
        let g = grads.get(var).expect("checked above");
        for ((theta, vel), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = mu * *vel + (gi + wd * *theta);
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

/// `CE(f(x_adv), y) + CE(f(x), y)` with batch-mean cross-entropies.
pub fn abl_loss<T: Float, M: Classifier<T> + ?Sized>(
    tape: &mut Tape<T>,
    model: &M,
    params: &[Var],
    x: Var,
    x_adv: Var,
    y: &[usize],
) -> Result<Var> {
    let z_adv = model.forward_with(tape, params, x_adv)?;
    let z = model.forward_with(tape, params, x)?;
    let adv = cross_entropy(tape, z_adv, y)?;
    let benign = cross_entropy(tape, z, y)?;
    tape.add(adv, benign)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Main,
}

/// One optimizer step as seen by a [`TrainObserver`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord<T> {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    pub indices: Vec<usize>,
    /// Loss the step minimized.
    pub loss: f64,
    /// Inputs the loss was computed on (adversarial for AT regimes).
    pub x_adv: Tensor<T>,
    /// Attack origin: the benign, possibly augmented, batch.
    pub x: Tensor<T>,
    pub targets: Vec<usize>,
}

/// Hooks into the training loop, called before each parameter update.
pub trait TrainObserver<T: Float> {
    fn on_phase_start(&mut self, _phase: Phase, _params: &ModelParams<T>) {}

    fn on_batch(&mut self, _record: &BatchRecord<T>, _params: &ModelParams<T>) {}
}

impl<T: Float> TrainObserver<T> for () {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Benign accuracy (%) on the evaluation split.
    pub benign_acc: f64,
    /// `(attack name, accuracy %)` for `TrainConfig::epoch_eval`.
    pub attack_acc: Vec<(String, f64)>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub label: String,
    pub pretrain: Vec<EpochRecord>,
    pub epochs: Vec<EpochRecord>,
    pub batch_losses: Vec<f64>,
    pub wall_s: f64,
}

impl RunLog {
    pub fn final_benign_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.benign_acc)
    }

    /// CSV with columns `epoch,lr,train_loss,benign_acc,<attacks>,wall_s`.
    pub fn to_csv(&self) -> String {
        let attacks: Vec<&str> = self.epochs.first().map(|e| e.attack_acc.iter().map(|(n, _)| n.as_str()).collect()).unwrap_or_default();
        let mut out = String::from("epoch,lr,train_loss,benign_acc");
        for a in &attacks {
            out.push(',');
            out.push_str(a);
        }
        out.push_str(",wall_s\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{:.6},{:.4}", e.epoch, e.lr, e.train_loss, e.benign_acc));
            for (_, acc) in &e.attack_acc {
                out.push_str(&format!(",{acc:.4}"));
            }
            out.push_str(&format!(",{:.3}\n", e.wall_s));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: RunLog,
    /// BEPM output, the starting point of the adversarial phase.
    pub pretrained: Option<ModelParams<T>>,
}

/// Named random streams of a run.
pub fn stream(seed: u64, name: &str) -> u64 {
    rng::substream(seed, name)
}

/// Trains per `cfg.regime`. `eval` (the held-out split) feeds the per-epoch
/// accuracy columns; the training split is used when it is `None`.
pub fn train<T: Float>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &PatchDataset,
    eval: Option<&PatchDataset>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_data(model_cfg, data)?;
    let start = Instant::now();
    let mut params = init_model::<T>(model_cfg, stream(cfg.seed, "init"))?;
    let eval = eval.unwrap_or(data);
    let mut pretrain_log = Vec::new();
    let mut pretrained = None;
    if cfg.regime.is_adversarial() && cfg.use_bepm {
        observer.on_phase_start(Phase::Pretrain, &params);
        pretrain_log = run_phase(cfg, Phase::Pretrain, cfg.pretrain_epochs, &mut params, data, eval, observer)?.0;
        pretrained = Some(params.clone());
    }
    observer.on_phase_start(Phase::Main, &params);
    let (epochs, batch_losses) = run_phase(cfg, Phase::Main, cfg.epochs, &mut params, data, eval, observer)?;
    let log = RunLog { label: cfg.label(), pretrain: pretrain_log, epochs, batch_losses, wall_s: start.elapsed().as_secs_f64() };
    Ok(TrainOutcome { params, log, pretrained })
}

/// Benign pretraining from a fresh initialization for
/// `cfg.pretrain_epochs` epochs.
pub fn pretrain_benign<T: Float>(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &PatchDataset) -> Result<ModelParams<T>> {
    check_data(model_cfg, data)?;
    let mut params = init_model::<T>(model_cfg, stream(cfg.seed, "init"))?;
    run_phase(cfg, Phase::Pretrain, cfg.pretrain_epochs, &mut params, data, data, &mut ())?;
    Ok(params)
}

fn check_data(model_cfg: &ModelConfig, data: &PatchDataset) -> Result<()> {
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.bands != model_cfg.in_bands || data.patch_size != model_cfg.patch_size || data.num_classes != model_cfg.num_classes {
        return Err(Error::ModelConfig(format!(
            "data has B={}, s={}, C={}; model expects B={}, s={}, C={}",
            data.bands, data.patch_size, data.num_classes, model_cfg.in_bands, model_cfg.patch_size, model_cfg.num_classes
        )));
    }
    Ok(())
}

fn run_phase<T: Float>(
    cfg: &TrainConfig,
    phase: Phase,
    epochs: usize,
    params: &mut ModelParams<T>,
    data: &PatchDataset,
    eval: &PatchDataset,
    observer: &mut dyn TrainObserver<T>,
) -> Result<(Vec<EpochRecord>, Vec<f64>)> {
    let adversarial = phase == Phase::Main && cfg.regime.is_adversarial();
    let augmenting = phase == Phase::Main && cfg.regime.uses_augment();
    let tag = match phase {
        Phase::Pretrain => "pretrain-",
        Phase::Main => "",
    };
    let shuffle_seed = stream(cfg.seed, &format!("{tag}shuffle"));
    let attack_seed = stream(cfg.seed, "attack");
    let augment_seed = stream(cfg.seed, "augment");
    let attack_cfg = cfg.attack_config();
    let policy = cfg.ra_policy.clone().unwrap_or_default();
    let targets = data.targets();
    let mut sgd = SgdState::new(&params.params, cfg.momentum, cfg.weight_decay);
    let mut records = Vec::with_capacity(epochs);
    let mut batch_losses = Vec::new();
    let phase_start = Instant::now();

    for epoch in 0..epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::rng_for(shuffle_seed, &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let x: Tensor<T> = if augmenting {
                let patches = idx
                    .iter()
                    .map(|&i| {
                        let mut r = rng::rng_for(augment_seed, &[i as u64, epoch as u64]);
                        augment::randaugment(data.patch(i), data.patch_size, data.bands, &policy, &mut r)
                    })
                    .collect::<Result<Vec<_>>>()?;
                patches_to_batch(&patches, data.patch_size, data.bands)
            } else {
                data.batch(idx)
            };
            let x_adv = if adversarial {
                let a = AttackConfig { seed: rng::derive(attack_seed, &[epoch as u64, b as u64]), ..attack_cfg.clone() };
                let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
                let adv = attack::pgd_with_ids(&*params, &x, &y, &a, &ids)?;
                attack::check_ball(&adv.x_adv, &x, a.eps, a.bounds)?;
                adv.x_adv
            } else {
                x.clone()
            };

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let xa = tape.constant(x_adv.clone());
            let loss = if adversarial && cfg.use_abl {
                let xb = tape.constant(x.clone());
                abl_loss(&mut tape, &*params, &bound, xb, xa, &y)?
            } else {
                let z = params.forward_with(&mut tape, &bound, xa)?;
                cross_entropy(&mut tape, z, &y)?
            };
            let value = tape.value(loss).item().map_or(f64::NAN, |v| v.as_f64());
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: b });
            }
            observer.on_batch(
                &BatchRecord { phase, epoch, step: params.step, indices: idx.to_vec(), loss: value, x_adv, x, targets: y },
                params,
            );
            let grads = tape.backward(loss)?;
            sgd_step(&mut params.params, &bound, &grads, lr, &mut sgd)?;
            params.step += 1;
            batch_losses.push(value);
            loss_sum += value;
            batches += 1;
        }

        let benign = attack::evaluate(&*params, eval, &AttackSpec::Benign, 256)?.accuracy();
        let attack_acc = if phase == Phase::Main {
            cfg.epoch_eval
                .iter()
                .map(|a| Ok((a.name.clone(), attack::evaluate(&*params, eval, &a.spec, 256)?.accuracy())))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            benign_acc: benign,
            attack_acc,
            wall_s: phase_start.elapsed().as_secs_f64(),
        });
    }
    Ok((records, batch_losses))
}
