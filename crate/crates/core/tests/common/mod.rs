//! Independent oracles shared by the integration suites and the acceptance
//! runner. Nothing here calls the library code it checks.

#![allow(dead_code)]

use hsi_robust::model::{cross_entropy, init_model, Classifier, ModelConfig};
use hsi_robust::tensor::{finite_difference_check, CheckReport, FdOptions, Tape, Tensor, Var};
use hsi_robust::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude in `[gap, hi]` and a random sign, keeping
/// ReLU inputs away from the kink.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(gap..hi);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct nested-loop cross-correlation over `[n, cin, h, w]` with zero
/// padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (cout, kk): (usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                acc += xv * k[((co * cin + ci) * kk + ky) * kk + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub probes: usize,
    pub coords: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SuiteEntry {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), probes: 0, coords: 0, excluded: 0, max_rel_error: 0.0, passed: true }
    }

    fn absorb(&mut self, report: &CheckReport) {
        self.probes += 1;
        self.coords += report.coords.len();
        self.excluded += report.excluded().count();
        self.max_rel_error = self.max_rel_error.max(report.max_rel_error);
        self.passed &= report.passed;
    }
}

/// `sum(op(x) * r)` for a fixed random `r`, so every output coordinate
/// contributes to the probed gradient.
fn weighted<F>(op: F, r: Tensor<f64>) -> impl Fn(&mut Tape<f64>, Var) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    move |t: &mut Tape<f64>, x: Var| {
        let y = op(t, x)?;
        let w = t.constant(r.clone().reshaped(t.shape(y))?);
        let p = t.mul(y, w)?;
        t.sum(p)
    }
}

fn check<F>(entry: &mut SuiteEntry, r: &mut ChaCha8Rng, point: &Tensor<f64>, out_len: usize, op: F, opts: FdOptions)
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let w = uniform(r, &[out_len], -1.0, 1.0);
    let report = finite_difference_check(weighted(op, w), point, None, opts).expect("gradient check runs");
    entry.absorb(&report);
}

/// Finite-difference checks of every primitive at `probes` random points
/// each, 64-bit.
pub fn primitive_suite(probes: usize, seed: u64, tol: f64) -> Vec<SuiteEntry> {
    let opts = FdOptions { tol, ..FdOptions::default() };
    let mut r = rng(seed);
    let mut out = Vec::new();

    macro_rules! entry {
        ($name:expr, |$r:ident, $e:ident, $p:ident| $body:block) => {{
            let mut $e = SuiteEntry::new($name);
            for $p in 0..probes {
                let $r = &mut r;
                $body
            }
            out.push($e);
        }};
    }

    entry!("add", |r, e, p| {
        let b_shape: &[usize] = match p % 3 {
            0 => &[3, 4],
            1 => &[4],
            _ => &[],
        };
        let a = uniform(r, &[3, 4], -2.0, 2.0);
        let b = uniform(r, b_shape, -2.0, 2.0);
        let (a2, b2) = (a.clone(), b.clone());
        check(&mut e, r, &a, 12, move |t, x| { let c = t.constant(b2.clone()); t.add(x, c) }, opts);
        if p % 3 == 0 {
            check(&mut e, r, &b, 12, move |t, x| { let c = t.constant(a2.clone()); t.add(c, x) }, opts);
        }
    });
    entry!("sub", |r, e, p| {
        let a = uniform(r, &[2, 5], -2.0, 2.0);
        let b = uniform(r, if p % 2 == 0 { &[2, 5][..] } else { &[5][..] }, -2.0, 2.0);
        let (a2, b2) = (a.clone(), b.clone());
        check(&mut e, r, &a, 10, move |t, x| { let c = t.constant(b2.clone()); t.sub(x, c) }, opts);
        if p % 2 == 0 {
            check(&mut e, r, &b, 10, move |t, x| { let c = t.constant(a2.clone()); t.sub(c, x) }, opts);
        }
    });
    entry!("mul", |r, e, _p| {
        let a = uniform(r, &[3, 3], -2.0, 2.0);
        let b = uniform(r, &[3, 3], -2.0, 2.0);
        let b2 = b.clone();
        check(&mut e, r, &a, 9, move |t, x| { let c = t.constant(b2.clone()); t.mul(x, c) }, opts);
        check(&mut e, r, &b, 9, |t, x| t.mul(x, x), opts);
    });
    entry!("div", |r, e, _p| {
        let a = uniform(r, &[2, 4], -2.0, 2.0);
        let b = uniform(r, &[2, 4], 0.5, 2.0);
        let (a2, b2) = (a.clone(), b.clone());
        check(&mut e, r, &a, 8, move |t, x| { let c = t.constant(b2.clone()); t.div(x, c) }, opts);
        check(&mut e, r, &b, 8, move |t, x| { let c = t.constant(a2.clone()); t.div(c, x) }, opts);
    });
    entry!("scale", |r, e, _p| {
        let a = uniform(r, &[7], -2.0, 2.0);
        let f = r.random_range(-3.0..3.0);
        check(&mut e, r, &a, 7, move |t, x| t.scale(x, f), opts);
    });
    entry!("matmul", |r, e, _p| {
        let a = uniform(r, &[3, 4], -1.0, 1.0);
        let b = uniform(r, &[4, 5], -1.0, 1.0);
        let (a2, b2) = (a.clone(), b.clone());
        check(&mut e, r, &a, 15, move |t, x| { let c = t.constant(b2.clone()); t.matmul(x, c) }, opts);
        check(&mut e, r, &b, 15, move |t, x| { let c = t.constant(a2.clone()); t.matmul(c, x) }, opts);
    });
    entry!("conv2d", |r, e, p| {
        let (n, cin, h, w, cout, k, stride, pad) = match p % 3 {
            0 => (2, 3, 5, 4, 2, 3, 1, 1),
            1 => (1, 2, 6, 6, 3, 3, 2, 0),
            _ => (2, 2, 4, 5, 2, 1, 1, 0),
        };
        let x = uniform(r, &[n, cin, h, w], -1.0, 1.0);
        let kr = uniform(r, &[cout, cin, k, k], -1.0, 1.0);
        let b = uniform(r, &[cout], -1.0, 1.0);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let len = n * cout * oh * ow;
        let (k2, b2) = (kr.clone(), b.clone());
        check(&mut e, r, &x, len, move |t, v| {
            let kk = t.constant(k2.clone());
            let bb = t.constant(b2.clone());
            t.conv2d(v, kk, bb, stride, pad)
        }, opts);
        let (x2, b2) = (x.clone(), b.clone());
        check(&mut e, r, &kr, len, move |t, v| {
            let xx = t.constant(x2.clone());
            let bb = t.constant(b2.clone());
            t.conv2d(xx, v, bb, stride, pad)
        }, opts);
        let (x2, k2) = (x.clone(), kr.clone());
        check(&mut e, r, &b, len, move |t, v| {
            let xx = t.constant(x2.clone());
            let kk = t.constant(k2.clone());
            t.conv2d(xx, kk, v, stride, pad)
        }, opts);
    });
    entry!("relu", |r, e, _p| {
        let a = away_from_zero(r, &[3, 4], 0.05, 2.0);
        check(&mut e, r, &a, 12, |t, x| t.relu(x), opts);
    });
    entry!("global_avg_pool", |r, e, _p| {
        let a = uniform(r, &[2, 3, 3, 2], -1.0, 1.0);
        check(&mut e, r, &a, 6, |t, x| t.global_avg_pool(x), opts);
    });
    entry!("avg_pool2", |r, e, p| {
        let (h, w) = if p % 2 == 0 { (4, 4) } else { (5, 3) };
        let a = uniform(r, &[2, 2, h, w], -1.0, 1.0);
        check(&mut e, r, &a, 2 * 2 * (h / 2) * (w / 2), |t, x| t.avg_pool2(x), opts);
    });
    entry!("reshape", |r, e, _p| {
        let a = uniform(r, &[2, 3, 4], -1.0, 1.0);
        check(&mut e, r, &a, 24, |t, x| t.reshape(x, &[6, 4]), opts);
    });
    entry!("log_softmax", |r, e, _p| {
        let a = uniform(r, &[3, 5], -3.0, 3.0);
        check(&mut e, r, &a, 15, |t, x| t.log_softmax(x), opts);
    });
    entry!("gather", |r, e, _p| {
        let a = uniform(r, &[4, 3], -1.0, 1.0);
        let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        check(&mut e, r, &a, 4, move |t, x| t.gather(x, &idx), opts);
    });
    entry!("sum", |r, e, _p| {
        let a = uniform(r, &[2, 5], -1.0, 1.0);
        check(&mut e, r, &a, 1, |t, x| t.sum(x), opts);
    });
    entry!("mean", |r, e, _p| {
        let a = uniform(r, &[3, 4], -1.0, 1.0);
        check(&mut e, r, &a, 1, |t, x| t.mean(x), opts);
    });
    entry!("max_last", |r, e, _p| {
        let a = uniform(r, &[4, 5], -1.0, 1.0);
        check(&mut e, r, &a, 4, |t, x| t.max_last(x), opts);
    });
    out
}

/// Small MiniResNet used by the end-to-end gradient checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { stem_channels: 4, ..ModelConfig::new(3, 3, 5) }
}

/// End-to-end cross-entropy gradient of the classifier with respect to the
/// input and to parameters, `coords` sampled coordinates per probe.
pub fn end_to_end_suite(probes: usize, coords: usize, seed: u64, tol: f64) -> SuiteEntry {
    let cfg = tiny_model_config();
    let opts = FdOptions { tol, ..FdOptions::default() };
    let mut r = rng(seed);
    let mut entry = SuiteEntry::new("classifier loss");
    for p in 0..probes {
        let mut model = init_model::<f64>(&cfg, seed + p as u64).unwrap();
        for prm in &mut model.params {
            if prm.name.ends_with("bias") {
                prm.value = uniform(&mut r, prm.value.shape(), -0.1, 0.1);
            }
        }
        let x = uniform(&mut r, &[2, cfg.in_bands, cfg.patch_size, cfg.patch_size], 0.0, 1.0);
        let y: Vec<usize> = (0..2).map(|_| r.random_range(0..cfg.num_classes)).collect();
        let report = if p % 2 == 0 {
            let pick: Vec<usize> = (0..coords).map(|_| r.random_range(0..x.numel())).collect();
            let (m, y) = (model.clone(), y.clone());
            finite_difference_check(
                move |t: &mut Tape<f64>, v: Var| {
                    let (z, _) = m.forward(t, v, false)?;
                    cross_entropy(t, z, &y)
                },
                &x,
                Some(&pick),
                opts,
            )
        } else {
            let j = r.random_range(0..model.params.len());
            let point = model.params[j].value.clone();
            let pick: Vec<usize> = (0..coords).map(|_| r.random_range(0..point.numel())).collect();
            let (m, y, x) = (model.clone(), y.clone(), x.clone());
            finite_difference_check(
                move |t: &mut Tape<f64>, v: Var| {
                    let mut bound = m.bind(t, false);
                    bound[j] = v;
                    let input = t.constant(x.clone());
                    let z = m.forward_with(t, &bound, input)?;
                    cross_entropy(t, z, &y)
                },
                &point,
                Some(&pick),
                opts,
            )
        };
        entry.absorb(&report.expect("gradient check runs"));
    }
    entry
}

/// Softmax probabilities of `z`.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Closed-form FGSM on a linear softmax model `z = x W + b`
/// (`W: [d, c]`): `clip(x + eps * sign(W (p - onehot(y))), 0, 1)`.
pub fn linear_fgsm_oracle(w: &[f64], b: &[f64], d: usize, c: usize, x: &[f64], y: usize, eps: f64) -> Vec<f64> {
    let z: Vec<f64> = (0..c).map(|j| b[j] + (0..d).map(|i| x[i] * w[i * c + j]).sum::<f64>()).collect();
    let mut g = softmax(&z);
    g[y] -= 1.0;
    (0..d)
        .map(|i| {
            let grad: f64 = (0..c).map(|j| w[i * c + j] * g[j]).sum();
            let s = if grad > 0.0 {
                1.0
            } else if grad < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x[i] + eps * s).clamp(0.0, 1.0)
        })
        .collect()
}

/// Per-class numbers printed for AT on Pavia University: class id, name,
/// benign accuracy, adversarial accuracy.
pub const PAVIA_AT_CLASSES: [(u32, &str, f64, f64); 9] = [
    (1, "Asphalt", 99.92, 90.03),
    (2, "Meadows", 99.70, 81.17),
    (3, "Gravel", 100.0, 91.94),
    (4, "Trees", 99.78, 93.23),
    (5, "Metal sheets", 100.0, 100.0),
    (6, "Bare soil", 76.80, 65.57),
    (7, "Bitumen", 100.0, 99.03),
    (8, "Bricks", 99.91, 93.91),
    (9, "Shadows", 100.0, 98.76),
];

/// Confusion tally by direct counting.
pub fn tally(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        m[t][p] += 1;
    }
    m
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Outcome of the L∞-ball fuzz: samples checked per attack and violations
/// found by direct comparison.
#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub checked: usize,
    pub violations: usize,
    pub worst_excess: f64,
}

/// FGSM, PGD, CW and AA-lite over `samples` random inputs in batches of
/// `batch`, each batch with its own fuzzed eps; inputs include exact 0 and 1
/// coordinates. Every adversarial coordinate must stay within `eps` of the
/// clean one and inside `[0, 1]`.
pub fn ball_fuzz(samples: usize, batch: usize, seed: u64) -> FuzzOutcome {
    use hsi_robust::attack::{AttackConfig, AttackSpec, LossKind};
    let cfg = tiny_model_config();
    let model = init_model::<f64>(&cfg, seed).unwrap();
    let mut r = rng(seed);
    let mut out = FuzzOutcome::default();
    let per = cfg.in_bands * cfg.patch_size * cfg.patch_size;
    let mut done = 0;
    while done < samples {
        let n = batch.min(samples - done);
        let eps = match done / batch % 5 {
            0 => 0.0,
            1 => 8.0 / 255.0,
            _ => r.random_range(0.0..0.1),
        };
        let data: Vec<f64> = (0..n * per)
            .map(|_| match r.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => r.random_range(0.0..1.0),
            })
            .collect();
        let x = Tensor::new(vec![n, cfg.in_bands, cfg.patch_size, cfg.patch_size], data).unwrap();
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..cfg.num_classes)).collect();
        let ids: Vec<u64> = (done..done + n).map(|i| i as u64).collect();
        let step = r.random_range(0.001..0.05);
        let attacks = [
            AttackSpec::Fgsm(AttackConfig { eps, step: eps, iters: 1, ..AttackConfig::default() }),
            AttackSpec::Pgd(AttackConfig { eps, step, iters: 10, random_start: true, seed, ..AttackConfig::default() }),
            AttackSpec::Pgd(AttackConfig { eps, step, iters: 10, loss: LossKind::CwMargin, seed, ..AttackConfig::default() }),
            AttackSpec::AaLite { eps, seed },
        ];
        for a in &attacks {
            let adv = a.run(&model, &x, &y, &ids).expect("attack runs");
            for (i, (&xa, &xc)) in adv.x_adv.data().iter().zip(x.data()).enumerate() {
                let excess = ((xa - xc).abs() - eps).max(-xa).max(xa - 1.0);
                if excess > 1e-12 {
                    out.violations += 1;
                    out.worst_excess = out.worst_excess.max(excess);
                }
                if i % per == 0 {
                    out.checked += 1;
                }
            }
        }
        done += n;
    }
    out
}

/// Closed-form FGSM comparison on random linear softmax models; returns
/// the largest absolute deviation.
pub fn linear_fgsm_deviation(trials: usize, seed: u64) -> f64 {
    use hsi_robust::attack::{fgsm, AttackConfig};
    use hsi_robust::model::LinearModel;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (d, c, n) = (r.random_range(2..12), r.random_range(2..6), 4);
        let w = uniform(&mut r, &[d, c], -1.0, 1.0);
        let b = uniform(&mut r, &[c], -1.0, 1.0);
        let x = uniform(&mut r, &[n, d], 0.0, 1.0);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let eps = r.random_range(0.0..0.2);
        let model = LinearModel::new(w.clone(), b.clone()).unwrap();
        let adv = fgsm(&model, &x, &y, &AttackConfig { eps, step: eps, iters: 1, ..AttackConfig::default() }).unwrap();
        for i in 0..n {
            let want = linear_fgsm_oracle(w.data(), b.data(), d, c, &x.data()[i * d..(i + 1) * d], y[i], eps);
            for (a, o) in adv.x_adv.data()[i * d..(i + 1) * d].iter().zip(&want) {
                worst = worst.max((a - o).abs());
            }
        }
    }
    worst
}

/// Random patch in `[0, 1]` with a few exact endpoints.
pub fn random_patch(r: &mut ChaCha8Rng, s: usize, bands: usize) -> Vec<f32> {
    (0..s * s * bands)
        .map(|_| match r.random_range(0..12) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..1.0f32),
        })
        .collect()
}

/// Largest deviation between an op applied to the whole patch and the same
/// op applied to each band plane on its own, over every band-separable op.
pub fn band_coherence_deviation(trials: usize, seed: u64) -> f64 {
    use hsi_robust::augment::{apply_signed, AugOp};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (s, bands) = (r.random_range(3..10), r.random_range(2..8));
        let patch = random_patch(&mut r, s, bands);
        let op = AugOp::ALL[t % AugOp::ALL.len()];
        if op == AugOp::Color {
            continue;
        }
        let m = r.random_range(-30..=30);
        let whole = apply_signed(&patch, s, bands, op, m).unwrap();
        for b in 0..bands {
            let plane: Vec<f32> = patch.iter().skip(b).step_by(bands).copied().collect();
            let alone = apply_signed(&plane, s, 1, op, m).unwrap();
            for (p, &v) in alone.iter().enumerate() {
                worst = worst.max((whole[p * bands + b] - v).abs() as f64);
            }
        }
    }
    worst
}

/// Largest deviation of Color from its direct formula: each pixel spectrum
/// is pushed away from (or toward) its own spectral mean.
pub fn color_deviation(trials: usize, seed: u64) -> f64 {
    use hsi_robust::augment::{apply_signed, AugOp, MAX_MAGNITUDE, PHOTOMETRIC_MAX};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (s, bands) = (r.random_range(1..6), r.random_range(1..9));
        let patch = random_patch(&mut r, s, bands);
        let m = r.random_range(-30..=30);
        let f = 1.0 + m as f64 / MAX_MAGNITUDE as f64 * PHOTOMETRIC_MAX;
        let out = apply_signed(&patch, s, bands, AugOp::Color, m).unwrap();
        for (px, o) in patch.chunks(bands).zip(out.chunks(bands)) {
            let mean = px.iter().map(|&v| v as f64).sum::<f64>() / bands as f64;
            for (&v, &w) in px.iter().zip(o) {
                let want = (mean + f * (v as f64 - mean)).clamp(0.0, 1.0);
                worst = worst.max((want - w as f64).abs());
            }
        }
    }
    worst
}

/// Integer translations move pixels by whole positions with mirrored
/// borders; checked against direct indexing.
pub fn integer_translate_deviation(seed: u64) -> f64 {
    use hsi_robust::augment::{apply_signed, AugOp, MAX_MAGNITUDE, TRANSLATE_MAX};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let (s, bands) = (10, 3);
    let patch = random_patch(&mut r, s, bands);
    let mirror = |i: isize| -> usize {
        let n = s as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    for m in -30..=30i32 {
        let shift = m as f64 / MAX_MAGNITUDE as f64 * TRANSLATE_MAX * s as f64;
        if (shift - shift.round()).abs() > 1e-9 {
            continue;
        }
        let k = shift.round() as isize;
        for (op, horizontal) in [(AugOp::TranslateX, true), (AugOp::TranslateY, false)] {
            let out = apply_signed(&patch, s, bands, op, m).unwrap();
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) =
                        if horizontal { (y, mirror(x as isize - k)) } else { (mirror(y as isize - k), x) };
                    for b in 0..bands {
                        let d = out[(y * s + x) * bands + b] - patch[(sy * s + sx) * bands + b];
                        worst = worst.max(d.abs() as f64);
                    }
                }
            }
        }
    }
    worst
}

/// Number of outputs with a value outside `[0, 1]` over `trials` random
/// RandAugment draws.
pub fn closure_violations(trials: usize, seed: u64) -> usize {
    use hsi_robust::augment::{randaugment, AugOp, RaPolicy};
    let mut r = rng(seed);
    let mut bad = 0;
    for t in 0..trials {
        let (s, bands) = (r.random_range(1..10), r.random_range(1..6));
        let patch = random_patch(&mut r, s, bands);
        let pool: Vec<AugOp> = AugOp::ALL.iter().copied().filter(|_| r.random_bool(0.6)).collect();
        let policy = RaPolicy {
            pool: if pool.is_empty() { vec![AugOp::Rotate] } else { pool },
            n_ops: r.random_range(1..4),
            magnitude: r.random_range(0..=30),
            seed: t as u64,
        };
        let mut g = hsi_robust::rng::rng_from(t as u64);
        let out = randaugment(&patch, s, bands, &policy, &mut g).unwrap();
        bad += out.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    }
    bad
}

/// Pearson chi-square of op frequencies from `draws` sampled policies
/// against the uniform distribution over the pool, with the number of
/// positive signs.
pub fn op_frequency_chi_square(draws: usize, seed: u64) -> (f64, usize, usize) {
    use hsi_robust::augment::{sample_policy, AugOp, RaPolicy};
    let policy = RaPolicy { seed, ..RaPolicy::default() };
    let mut g = hsi_robust::rng::rng_from(seed);
    let mut counts = [0usize; 11];
    let (mut positive, mut total) = (0, 0);
    for _ in 0..draws {
        for (op, m) in sample_policy(&policy, &mut g).unwrap() {
            counts[AugOp::ALL.iter().position(|&o| o == op).unwrap()] += 1;
            positive += usize::from(m > 0);
            total += 1;
        }
    }
    let expected = total as f64 / 11.0;
    let chi = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    (chi, positive, total)
}

/// Pavia-mini cut to 52x26 pixels (every class present), patch size 3.
pub fn tiny_split(per_class_train: usize, seed: u64) -> hsi_robust::data::Split {
    use hsi_robust::data::*;
    let mut spec = SynthSpec::pavia_mini();
    spec.width = 26;
    let cube = normalize_per_band(&synthesize_dataset(&spec, seed).unwrap());
    let ds = extract_patches(&cube, 3).unwrap();
    stratified_split(&ds, &SplitConfig { per_class_train, seed: None }, seed).unwrap()
}

pub fn tiny_train_model() -> ModelConfig {
    ModelConfig { stem_channels: 4, blocks_per_stage: vec![1], ..ModelConfig::new(64, 4, 3) }
}

/// Records every batch and the parameters at each phase start, recomputing
/// the objective independently from the recorded inputs.
#[derive(Default)]
pub struct Recorder {
    pub phase_starts: Vec<(hsi_robust::train::Phase, hsi_robust::model::ModelParams<f64>)>,
    pub batches: usize,
    pub adversarial_batches: usize,
    pub worst_loss_gap: f64,
    pub abl: bool,
}

impl hsi_robust::train::TrainObserver<f64> for Recorder {
    fn on_phase_start(&mut self, phase: hsi_robust::train::Phase, params: &hsi_robust::model::ModelParams<f64>) {
        self.phase_starts.push((phase, params.clone()));
    }

    fn on_batch(&mut self, rec: &hsi_robust::train::BatchRecord<f64>, params: &hsi_robust::model::ModelParams<f64>) {
        let mean_ce = |x: &Tensor<f64>| {
            let z = params.logits(x).unwrap();
            let c = z.shape()[1];
            let total: f64 = rec
                .targets
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let row = &z.data()[i * c..(i + 1) * c];
                    let p = softmax(row);
                    -p[t].ln()
                })
                .sum();
            total / rec.targets.len() as f64
        };
        let main = rec.phase == hsi_robust::train::Phase::Main;
        let want = if main && self.abl { mean_ce(&rec.x_adv) + mean_ce(&rec.x) } else { mean_ce(&rec.x_adv) };
        self.worst_loss_gap = self.worst_loss_gap.max((want - rec.loss).abs());
        self.batches += 1;
        if rec.x_adv != rec.x {
            self.adversarial_batches += 1;
        }
    }
}

/// Outcome of the ABL/BEPM wiring check.
#[derive(Debug)]
pub struct WiringReport {
    pub abl_loss_gap: f64,
    pub abl_batches: usize,
    pub bepm_start_matches: bool,
    pub bepm_pretrained_matches: bool,
    pub pretrain_is_benign: bool,
}

impl WiringReport {
    pub fn passed(&self) -> bool {
        self.abl_loss_gap <= 1e-10 && self.abl_batches > 0 && self.bepm_start_matches && self.bepm_pretrained_matches && self.pretrain_is_benign
    }
}

/// Runs AT with ABL and BEPM in 64-bit precision under a [`Recorder`].
pub fn abl_bepm_wiring(seed: u64) -> WiringReport {
    use hsi_robust::train::{pretrain_benign, train, Phase, Regime, TrainConfig};
    let split = tiny_split(12, seed);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        lr0: 0.05,
        lr_drop_epochs: vec![],
        regime: Regime::At,
        use_abl: true,
        use_bepm: true,
        pretrain_epochs: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut rec = Recorder { abl: true, ..Recorder::default() };
    let out = train::<f64>(&cfg, &tiny_train_model(), &split.train, None, &mut rec).unwrap();
    let independent = pretrain_benign::<f64>(&cfg, &tiny_train_model(), &split.train).unwrap();
    let main_start = rec.phase_starts.iter().find(|(p, _)| *p == Phase::Main).map(|(_, m)| m.params.clone());
    WiringReport {
        abl_loss_gap: rec.worst_loss_gap,
        abl_batches: rec.adversarial_batches,
        bepm_start_matches: main_start.as_ref() == Some(&independent.params),
        bepm_pretrained_matches: out.pretrained.as_ref().map(|p| &p.params) == Some(&independent.params),
        pretrain_is_benign: rec.batches - rec.adversarial_batches >= split.train.len().div_ceil(16) * 2,
    }
}

/// Cells where the library confusion matrix disagrees with [`tally`] over
/// `n` random predictions.
pub fn confusion_mismatches(n: usize, classes: usize, seed: u64) -> usize {
    use hsi_robust::analysis::{classwise_accuracy, confusion_matrix};
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let preds: Vec<usize> =
        labels.iter().map(|&l| if r.random_bool(0.6) { l } else { r.random_range(0..classes) }).collect();
    let cm = confusion_matrix(&preds, &labels, classes).unwrap();
    let want = tally(&preds, &labels, classes);
    let mut bad = 0;
    for t in 0..classes {
        for p in 0..classes {
            bad += usize::from(cm.get(t, p) != want[t][p]);
        }
        let row: u64 = want[t].iter().sum();
        let acc = (row > 0).then(|| 100.0 * want[t][t] as f64 / row as f64);
        bad += usize::from(classwise_accuracy(&cm)[t] != acc);
    }
    bad + usize::from(cm.total() != n as u64)
}

/// Bands violating `lower <= mean <= upper` over random spectrum sets,
/// including single-spectrum and constant sets.
pub fn envelope_order_violations(sets: usize, seed: u64) -> usize {
    use hsi_robust::analysis::spectral_envelope;
    let mut r = rng(seed);
    let mut bad = 0;
    for k in 0..sets {
        let bands = r.random_range(1..70);
        let n = if k % 10 == 0 { 1 } else { r.random_range(1..50) };
        let constant = k % 7 == 0;
        let c = r.random_range(0.0..1.0f32);
        let spectra: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..bands).map(|_| if constant { c } else { r.random_range(0.0..1.0f32) }).collect())
            .collect();
        let env = spectral_envelope(&spectra).unwrap();
        for b in 0..bands {
            let col: Vec<f64> = spectra.iter().map(|s| s[b] as f64).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(env.lower[b] <= env.mean[b] && env.mean[b] <= env.upper[b]) || env.lower[b] != lo || env.upper[b] != hi {
                bad += 1;
            }
        }
    }
    bad
}

/// Spectra where `spectral_tv` differs from the direct sum of absolute
/// differences, or, for monotone integer-valued spectra, from the
/// telescoped endpoint difference.
pub fn tv_mismatches(trials: usize, seed: u64) -> usize {
    use hsi_robust::analysis::spectral_tv;
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let n = r.random_range(2..80);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut direct = 0.0;
        for i in 1..n {
            direct += (s[i] - s[i - 1]).abs();
        }
        bad += usize::from(spectral_tv(&s).unwrap() != direct);

        let mut mono: Vec<f64> = (0..n).map(|_| r.random_range(0..1000) as f64).collect();
        mono.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if r.random_bool(0.5) {
            mono.reverse();
        }
        bad += usize::from(spectral_tv(&mono).unwrap() != (mono[n - 1] - mono[0]).abs());
    }
    bad
}

/// Flagged class names when the printed AT per-class accuracies are fed to
/// the imbalance report with gap 10 and floor 70.
pub fn pavia_at_flags() -> Vec<String> {
    use hsi_robust::analysis::{imbalance_from_accuracies, ImbalanceThresholds};
    let names: Vec<String> = PAVIA_AT_CLASSES.iter().map(|c| c.1.to_string()).collect();
    let benign: Vec<Option<f64>> = PAVIA_AT_CLASSES.iter().map(|c| Some(c.2)).collect();
    let adv: Vec<Option<f64>> = PAVIA_AT_CLASSES.iter().map(|c| Some(c.3)).collect();
    let rep = imbalance_from_accuracies(&benign, &adv, &names, ImbalanceThresholds { gap: 10.0, floor: 70.0 }).unwrap();
    let mut flagged: Vec<String> = rep.flagged_names().into_iter().map(String::from).collect();
    flagged.sort();
    flagged
}

pub const CLI: &str = env!("CARGO_BIN_EXE_hsi-robust");

/// A run config small enough for every subcommand to finish in seconds.
pub fn tiny_run_config(out: &std::path::Path) -> String {
    format!(
        r#"seed = 5

[dataset]
patch_size = 3
synth = {{ preset = "pavia-mini" }}
split = {{ per_class_train = 20 }}

[model]
stem_channels = 4
blocks_per_stage = [1]

[train]
regime = "at"
epochs = 1
batch_size = 32
lr0 = 0.02
lr_drop_epochs = []

[eval]
attacks = ["Benign", "FGSM", "PGD-10", "AA-lite"]
subset_per_class = 5

[ablation]
mode = "single-op"
pool = ["Identity", "Rotate"]

[output]
dir = "{}"
"#,
        out.display()
    )
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    std::process::Command::new(CLI).args(args).output().expect("binary runs")
}

/// Runs every subcommand twice with the same config and compares the
/// summary records byte for byte. Returns `(subcommand, identical)`.
pub fn cli_determinism(dir: &std::path::Path) -> Vec<(String, bool)> {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, tiny_run_config(&dir.join("out"))).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let steps = [
        ("train", vec!["train_summary.json", "checkpoint.ckpt"]),
        ("eval", vec!["eval_summary.json", "eval.csv"]),
        ("spectra", vec!["spectra_summary.json", "imbalance.csv"]),
        ("ablate", vec!["ablation_summary.json"]),
        ("augment-preview", vec!["augment_preview.json"]),
        ("synth", vec!["synth_summary.json", "pavia-mini.hsc"]),
    ];
    let mut out = Vec::new();
    for (cmd, files) in steps {
        let read = || {
            let o = run_cli(&[cmd, "--config", &cfg]);
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
            files.iter().map(|f| std::fs::read(dir.join("out").join(f)).unwrap()).collect::<Vec<_>>()
        };
        let first = read();
        // eval and spectra read the checkpoint written by train, which is
        // itself reproduced here
        let second = read();
        out.push((cmd.to_string(), first == second));
    }
    out
}
