//! L∞-bounded gradient attacks: FGSM, PGD with cross-entropy, CW-margin or
//! DLR objectives, and a reduced AutoAttack-style ensemble ("AA-lite": PGD-CE
//! and PGD-DLR with fixed step and best-so-far tracking, plus FGSM; no FAB,
//! no Square, no adaptive step halving).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy_per_sample, Classifier};
use crate::rng;
use crate::tensor::{Float, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 8.0 / 255.0;
pub const DEFAULT_STEP: f64 = 2.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    CwMargin,
    Dlr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    pub restarts: usize,
    pub loss: LossKind,
    /// CW confidence margin.
    pub kappa: f64,
    pub bounds: [f64; 2],
    /// Start the first restart from a uniform point in the ball instead of `x`.
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            step: DEFAULT_STEP,
            iters: 10,
            restarts: 1,
            loss: LossKind::Ce,
            kappa: 0.0,
            bounds: [0.0, 1.0],
            random_start: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd(iters: usize) -> Self {
        Self { iters, ..Self::default() }
    }

    pub fn fgsm() -> Self {
        Self { step: DEFAULT_EPS, iters: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be finite and >= 0, got {}", self.step)));
        }
        if self.iters == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument("iters and restarts must be at least 1".into()));
        }
        if self.bounds[0] > self.bounds[1] {
            return Err(Error::InvalidArgument(format!("bounds {:?}", self.bounds)));
        }
        Ok(())
    }
}

/// Adversarial batch with per-sample bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch<T> {
    pub x_adv: Tensor<T>,
    /// Attack objective at `x_adv`.
    pub achieved_loss: Vec<f64>,
    /// `true` where `x_adv` is misclassified.
    pub success: Vec<bool>,
}

/// Clamps `candidate` into `[origin - eps, origin + eps]`, then into `bounds`.
pub fn project_linf<T: Float>(candidate: &Tensor<T>, origin: &Tensor<T>, eps: f64, bounds: [f64; 2]) -> Tensor<T> {
    let mut out = candidate.clone();
    project_in_place(&mut out, origin, eps, bounds);
    out
}

fn project_in_place<T: Float>(x: &mut Tensor<T>, origin: &Tensor<T>, eps: f64, bounds: [f64; 2]) {
    let e = T::from_f(eps);
    let (b0, b1) = (T::from_f(bounds[0]), T::from_f(bounds[1]));
    for (v, &o) in x.data_mut().iter_mut().zip(origin.data()) {
        *v = v.max(o - e).min(o + e).max(b0).min(b1);
    }
}

/// Largest per-sample L∞ distance between two batches.
pub fn linf_distance<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    let n = a.shape().first().copied().unwrap_or(0);
    (0..n)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max))
        .collect()
}

/// Fails if any sample of `x_adv` leaves the ε-ball around `x` (with 1e-6
/// slack) or the value bounds.
pub fn check_ball<T: Float>(x_adv: &Tensor<T>, x: &Tensor<T>, eps: f64, bounds: [f64; 2]) -> Result<()> {
    for (i, d) in linf_distance(x_adv, x).into_iter().enumerate() {
        let out_of_bounds = x_adv.row(i).iter().any(|v| v.as_f64() < bounds[0] || v.as_f64() > bounds[1]);
        if d > eps + 1e-6 || out_of_bounds || !d.is_finite() {
            return Err(Error::BallViolation { sample: i, deviation: d, eps });
        }
    }
    Ok(())
}

/// Scoring rule: a tie between the true logit and the best other logit
/// counts as correct.
pub fn is_correct<T: Float>(logits: &[T], target: usize) -> bool {
    let zy = logits[target];
    logits.iter().enumerate().all(|(j, &z)| j == target || z <= zy)
}

/// Predicted class under the same tie rule as [`is_correct`].
pub fn predict<T: Float>(logits: &[T], target: usize) -> usize {
    if is_correct(logits, target) {
        return target;
    }
    logits.iter().enumerate().fold(0, |best, (j, &z)| if z > logits[best] { j } else { best })
}

/// Index of the largest logit other than `target` (first one on ties).
fn runner_up<T: Float>(logits: &[T], target: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &z) in logits.iter().enumerate() {
        if j != target && (best == usize::MAX || z > logits[best]) {
            best = j;
        }
    }
    best
}

/// Per-sample CW margin objective `min(max_{i≠y} z_i - z_y, kappa)`.
pub fn cw_margin_loss<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[usize], kappa: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::InvalidArgument(format!("CW margin needs at least 2 classes, logits {shape:?}")));
    }
    let v = tape.value(logits).clone();
    let runner: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| runner_up(v.row(i), t)).collect();
    let zr = tape.gather(logits, &runner)?;
    let zy = tape.gather(logits, targets)?;
    let margin = tape.sub(zr, zy)?;
    let k = tape.constant(Tensor::full(&[targets.len()], T::from_f(kappa)));
    let gap = tape.sub(k, margin)?;
    let gap = tape.relu(gap)?;
    tape.sub(k, gap)
}

/// Per-sample difference-of-logits-ratio objective
/// `-(z_y - max_{i≠y} z_i) / (z_π1 - z_π3 + 1e-12)`.
pub fn dlr_loss<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] < 3 {
        return Err(Error::InvalidArgument(format!("DLR needs at least 3 classes, logits {shape:?}")));
    }
    let v = tape.value(logits).clone();
    let mut runner = Vec::with_capacity(targets.len());
    let mut first = Vec::with_capacity(targets.len());
    let mut third = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let row = v.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        runner.push(runner_up(row, t));
        first.push(order[0]);
        third.push(order[2]);
    }
    let zr = tape.gather(logits, &runner)?;
    let zy = tape.gather(logits, targets)?;
    let num = tape.sub(zr, zy)?;
    let z1 = tape.gather(logits, &first)?;
    let z3 = tape.gather(logits, &third)?;
    let den = tape.sub(z1, z3)?;
    let tiny = tape.constant(Tensor::scalar(T::from_f(1e-12)));
    let den = tape.add(den, tiny)?;
    tape.div(num, den)
}

fn objective<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[usize], kind: LossKind, kappa: f64) -> Result<Var> {
    match kind {
        LossKind::Ce => cross_entropy_per_sample(tape, logits, targets),
        LossKind::CwMargin => cw_margin_loss(tape, logits, targets, kappa),
        LossKind::Dlr => dlr_loss(tape, logits, targets),
    }
}

struct Probe<T> {
    loss: Vec<f64>,
    correct: Vec<bool>,
    grad: Option<Tensor<T>>,
}

/// Objective, correctness and (optionally) the input gradient of the summed
/// objective at `x`.
fn probe<T: Float, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    targets: &[usize],
    kind: LossKind,
    kappa: f64,
    want_grad: bool,
) -> Result<Probe<T>> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), want_grad);
    let (logits, _) = model.forward(&mut tape, input, false)?;
    let per = objective(&mut tape, logits, targets, kind, kappa)?;
    let loss: Vec<f64> = tape.value(per).data().iter().map(|v| v.as_f64()).collect();
    let z = tape.value(logits);
    let correct = targets.iter().enumerate().map(|(i, &t)| is_correct(z.row(i), t)).collect();
    let grad = if want_grad {
        let total = tape.sum(per)?;
        let mut g = tape.backward(total)?;
        let g = g.remove(input).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let n = targets.len();
        for i in 0..n {
            if g.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { sample: i });
            }
        }
        Some(g)
    } else {
        None
    };
    Ok(Probe { loss, correct, grad })
}

fn signed_step<T: Float>(x: &mut Tensor<T>, grad: &Tensor<T>, step: f64) {
    let s = T::from_f(step);
    for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
        if g > T::zero() {
            *v += s;
        } else if g < T::zero() {
            *v -= s;
        }
    }
}

fn check_inputs<T: Float>(x: &Tensor<T>, targets: &[usize], ids: &[u64]) -> Result<()> {
    let n = x.shape().first().copied().unwrap_or(0);
    if x.rank() < 2 || n != targets.len() || n != ids.len() {
        return Err(Error::shape("attack", format!("batch {:?} with {} targets and {} ids", x.shape(), targets.len(), ids.len())));
    }
    Ok(())
}

fn default_ids(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// `x' = clip(x + eps * sign(∇x L))`, `sign(0) = 0`.
pub fn fgsm<T: Float, M: Classifier<T> + ?Sized>(model: &M, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>> {
    cfg.validate()?;
    check_inputs(x, y, &default_ids(y.len()))?;
    let g = probe(model, x, y, cfg.loss, cfg.kappa, true)?.grad.expect("gradient requested");
    let mut adv = x.clone();
    signed_step(&mut adv, &g, cfg.eps);
    project_in_place(&mut adv, x, cfg.eps, cfg.bounds);
    let at = probe(model, &adv, y, cfg.loss, cfg.kappa, false)?;
    check_ball(&adv, x, cfg.eps, cfg.bounds)?;
    Ok(AdvBatch { x_adv: adv, achieved_loss: at.loss, success: at.correct.iter().map(|c| !c).collect() })
}

/// Projected sign-gradient ascent with restarts. Within a restart the best
/// iterate so far (by objective) is kept; across restarts the one with the
/// larger objective wins.
pub fn pgd<T: Float, M: Classifier<T> + ?Sized>(model: &M, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>> {
    pgd_with_ids(model, x, y, cfg, &default_ids(y.len()))
}

/// [`pgd`] with explicit sample ids; random starts of sample `i` are drawn
/// from the stream `(seed, ids[i], restart)`, independent of batching.
pub fn pgd_with_ids<T: Float, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    ids: &[u64],
) -> Result<AdvBatch<T>> {
    cfg.validate()?;
    check_inputs(x, y, ids)?;
    let n = y.len();
    let per = x.numel().checked_div(n).unwrap_or(0);
    let mut best = AdvBatch { x_adv: x.clone(), achieved_loss: vec![f64::NEG_INFINITY; n], success: vec![false; n] };
    for restart in 0..cfg.restarts {
        let mut cur = x.clone();
        if restart > 0 || cfg.random_start {
            for (i, &id) in ids.iter().enumerate() {
                let mut r = rng::rng_for(cfg.seed, &[id, restart as u64]);
                for v in &mut cur.data_mut()[i * per..(i + 1) * per] {
                    *v += T::from_f(r.random_range(-1.0..=1.0) * cfg.eps);
                }
            }
            project_in_place(&mut cur, x, cfg.eps, cfg.bounds);
        }
        let mut run_best = AdvBatch { x_adv: cur.clone(), achieved_loss: vec![f64::NEG_INFINITY; n], success: vec![false; n] };
        for k in 0..=cfg.iters {
            let p = probe(model, &cur, y, cfg.loss, cfg.kappa, k < cfg.iters)?;
            for i in 0..n {
                if p.loss[i] > run_best.achieved_loss[i] {
                    run_best.achieved_loss[i] = p.loss[i];
                    run_best.success[i] = !p.correct[i];
                    run_best.x_adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(cur.row(i));
                }
            }
            if let Some(g) = p.grad {
                signed_step(&mut cur, &g, cfg.step);
                project_in_place(&mut cur, x, cfg.eps, cfg.bounds);
            }
        }
        for i in 0..n {
            if run_best.achieved_loss[i] > best.achieved_loss[i] || restart == 0 {
                best.achieved_loss[i] = run_best.achieved_loss[i];
                best.success[i] = run_best.success[i];
                best.x_adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(run_best.x_adv.row(i));
            }
        }
    }
    check_ball(&best.x_adv, x, cfg.eps, cfg.bounds)?;
    Ok(best)
}

/// Members of the reduced ensemble, in evaluation order.
pub fn auto_attack_members(eps: f64, seed: u64, num_classes: usize) -> Vec<(&'static str, AttackSpec)> {
    let base = AttackConfig { eps, step: DEFAULT_STEP, iters: 50, restarts: 2, ..AttackConfig::default() };
    let mut members = vec![(
        "APGD-CE",
        AttackSpec::Pgd(AttackConfig { seed: rng::derive(seed, &[1]), ..base.clone() }),
    )];
    if num_classes >= 3 {
        members.push((
            "APGD-DLR",
            AttackSpec::Pgd(AttackConfig { loss: LossKind::Dlr, seed: rng::derive(seed, &[2]), ..base }),
        ));
    }
    members.push(("FGSM", AttackSpec::Fgsm(AttackConfig { eps, step: eps, iters: 1, ..AttackConfig::default() })));
    members
}

/// Per sample, the first member that misclassifies it; if none does, the
/// member reaching the largest cross-entropy. Members after the first
/// success are skipped for that sample.
pub fn auto_attack_lite<T: Float, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    eps: f64,
    seed: u64,
) -> Result<AdvBatch<T>> {
    auto_attack_lite_with_ids(model, x, y, eps, seed, &default_ids(y.len()))
}

pub fn auto_attack_lite_with_ids<T: Float, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    eps: f64,
    seed: u64,
    ids: &[u64],
) -> Result<AdvBatch<T>> {
    check_inputs(x, y, ids)?;
    let n = y.len();
    let per = x.numel().checked_div(n).unwrap_or(0);
    let mut out = AdvBatch { x_adv: x.clone(), achieved_loss: vec![f64::NEG_INFINITY; n], success: vec![false; n] };
    let mut open: Vec<usize> = (0..n).collect();
    for (_, member) in auto_attack_members(eps, seed, model.num_classes()) {
        if open.is_empty() {
            break;
        }
        let xs = gather_rows(x, &open);
        let ys: Vec<usize> = open.iter().map(|&i| y[i]).collect();
        let sub_ids: Vec<u64> = open.iter().map(|&i| ids[i]).collect();
        let adv = member.run(model, &xs, &ys, &sub_ids)?;
        let ce = probe(model, &adv.x_adv, &ys, LossKind::Ce, 0.0, false)?;
        for (k, &i) in open.iter().enumerate() {
            if !ce.correct[k] || ce.loss[k] > out.achieved_loss[i] {
                out.achieved_loss[i] = ce.loss[k];
                out.success[i] = !ce.correct[k];
                out.x_adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(adv.x_adv.row(k));
            }
        }
        open.retain(|&i| !out.success[i]);
    }
    check_ball(&out.x_adv, x, eps, [0.0, 1.0])?;
    Ok(out)
}

fn gather_rows<T: Float>(x: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    let data = rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(shape, data).expect("row gather")
}

/// An evaluation attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Benign,
    Fgsm(AttackConfig),
    Pgd(AttackConfig),
    /// Reduced AutoAttack ensemble.
    AaLite { eps: f64, seed: u64 },
}

impl AttackSpec {
    pub fn eps(&self) -> f64 {
        match self {
            AttackSpec::Benign => 0.0,
            AttackSpec::Fgsm(c) | AttackSpec::Pgd(c) => c.eps,
            AttackSpec::AaLite { eps, .. } => *eps,
        }
    }

    pub fn with_eps(&self, eps: f64) -> AttackSpec {
        match self {
            AttackSpec::Benign => AttackSpec::Benign,
            AttackSpec::Fgsm(c) => AttackSpec::Fgsm(AttackConfig { eps, ..c.clone() }),
            AttackSpec::Pgd(c) => AttackSpec::Pgd(AttackConfig { eps, ..c.clone() }),
            AttackSpec::AaLite { seed, .. } => AttackSpec::AaLite { eps, seed: *seed },
        }
    }

    pub fn with_seed(&self, seed: u64) -> AttackSpec {
        match self {
            AttackSpec::Benign => AttackSpec::Benign,
            AttackSpec::Fgsm(c) => AttackSpec::Fgsm(AttackConfig { seed, ..c.clone() }),
            AttackSpec::Pgd(c) => AttackSpec::Pgd(AttackConfig { seed, ..c.clone() }),
            AttackSpec::AaLite { eps, .. } => AttackSpec::AaLite { eps: *eps, seed },
        }
    }

    pub fn run<T: Float, M: Classifier<T> + ?Sized>(&self, model: &M, x: &Tensor<T>, y: &[usize], ids: &[u64]) -> Result<AdvBatch<T>> {
        match self {
            AttackSpec::Benign => {
                check_inputs(x, y, ids)?;
                let p = probe(model, x, y, LossKind::Ce, 0.0, false)?;
                Ok(AdvBatch { x_adv: x.clone(), achieved_loss: p.loss, success: p.correct.iter().map(|c| !c).collect() })
            }
            AttackSpec::Fgsm(c) => {
                check_inputs(x, y, ids)?;
                fgsm(model, x, y, c)
            }
            AttackSpec::Pgd(c) => pgd_with_ids(model, x, y, c, ids),
            AttackSpec::AaLite { eps, seed } => auto_attack_lite_with_ids(model, x, y, *eps, *seed, ids),
        }
    }
}

/// Attack with a report label, e.g. `PGD-10`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub spec: AttackSpec,
}

impl NamedAttack {
    pub fn new(name: impl Into<String>, spec: AttackSpec) -> Self {
        Self { name: name.into(), spec }
    }
}

/// Benign, FGSM, PGD-10, PGD-50, CW and AA-lite at `eps`, step 2/255.
pub fn standard_suite(eps: f64, seed: u64) -> Vec<NamedAttack> {
    let pgd = |iters, loss, stream| AttackConfig { eps, iters, loss, seed: rng::derive(seed, &[stream]), ..AttackConfig::default() };
    vec![
        NamedAttack::new("Benign", AttackSpec::Benign),
        NamedAttack::new("FGSM", AttackSpec::Fgsm(AttackConfig { eps, step: eps, iters: 1, ..AttackConfig::default() })),
        NamedAttack::new("PGD-10", AttackSpec::Pgd(pgd(10, LossKind::Ce, 10))),
        NamedAttack::new("PGD-50", AttackSpec::Pgd(pgd(50, LossKind::Ce, 50))),
        NamedAttack::new("CW", AttackSpec::Pgd(pgd(30, LossKind::CwMargin, 30))),
        NamedAttack::new("AA-lite", AttackSpec::AaLite { eps, seed: rng::derive(seed, &[99]) }),
    ]
}

/// Predictions and correctness of a model under an attack over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Zero-based predicted class per sample.
    pub predictions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EvalResult {
    pub fn correct(&self) -> usize {
        self.predictions.iter().zip(&self.targets).filter(|(p, t)| p == t).count()
    }

    /// Percentage in `[0, 100]`; 0 for an empty set.
    pub fn accuracy(&self) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        100.0 * self.correct() as f64 / self.targets.len() as f64
    }
}

/// Runs `attack` over `ds` in batches. Random starts are keyed by dataset
/// index, so results do not depend on `batch_size`.
pub fn evaluate<T: Float, M: Classifier<T> + ?Sized>(
    model: &M,
    ds: &crate::data::PatchDataset,
    attack: &AttackSpec,
    batch_size: usize,
) -> Result<EvalResult> {
    let targets = ds.targets();
    let mut predictions = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = ds.batch::<T>(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
        let adv = attack.run(model, &x, &y, &ids)?;
        let z = model.logits(&adv.x_adv)?;
        predictions.extend(y.iter().enumerate().map(|(k, &t)| predict(z.row(k), t)));
    }
    Ok(EvalResult { predictions, targets })
}
