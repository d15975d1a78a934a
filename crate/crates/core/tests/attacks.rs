mod common;

use common::*;
use hsi_robust::attack::{
    auto_attack_members, cw_margin_loss, dlr_loss, evaluate, fgsm, pgd, project_linf, standard_suite, AttackConfig,
    AttackSpec, LossKind,
};
use hsi_robust::data::{extract_patches, normalize_per_band, synthesize_dataset, SynthSpec};
use hsi_robust::model::{init_model, LinearModel};
use hsi_robust::tensor::{finite_difference_check, FdOptions, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn fgsm_matches_linear_closed_form() {
    assert!(linear_fgsm_deviation(200, 1) < 1e-12);
}

#[test]
fn every_attack_stays_in_the_ball() {
    let out = ball_fuzz(1000, 50, 3);
    assert_eq!(out.checked, 4000);
    assert_eq!(out.violations, 0, "worst excess {:e}", out.worst_excess);
}

#[test]
fn zero_budget_returns_the_input() {
    let cfg = tiny_model_config();
    let model = init_model::<f64>(&cfg, 1).unwrap();
    let x = uniform(&mut rng(2), &[4, 3, 5, 5], 0.0, 1.0);
    let y = [0, 1, 2, 0];
    let c = AttackConfig { eps: 0.0, random_start: true, ..AttackConfig::pgd(5) };
    assert_eq!(pgd(&model, &x, &y, &c).unwrap().x_adv, x);
    assert_eq!(fgsm(&model, &x, &y, &AttackConfig { eps: 0.0, ..AttackConfig::fgsm() }).unwrap().x_adv, x);
}

fn cw_oracle(z: &[f64], y: usize, kappa: f64) -> f64 {
    let other = z.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    (other - z[y]).min(kappa)
}

fn dlr_oracle(z: &[f64], y: usize) -> f64 {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let other = z.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    -(z[y] - other) / (sorted[0] - sorted[2] + 1e-12)
}

#[test]
fn margin_losses_match_direct_formulas() {
    let mut r = rng(4);
    for _ in 0..200 {
        let (n, c) = (3, r.random_range(3..7));
        let z = uniform(&mut r, &[n, c], -3.0, 3.0);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let kappa = r.random_range(0.0..2.0);
        let mut t = Tape::<f64>::new();
        let zv = t.constant(z.clone());
        let cw = cw_margin_loss(&mut t, zv, &y, kappa).unwrap();
        let dlr = dlr_loss(&mut t, zv, &y).unwrap();
        for i in 0..n {
            let row = &z.data()[i * c..(i + 1) * c];
            assert!((t.value(cw).data()[i] - cw_oracle(row, y[i], kappa)).abs() < 1e-12);
            assert!((t.value(dlr).data()[i] - dlr_oracle(row, y[i])).abs() < 1e-9);
        }
    }
}

#[test]
fn margin_loss_gradients_match_differences() {
    let mut r = rng(5);
    for _ in 0..25 {
        let z = uniform(&mut r, &[2, 5], -3.0, 3.0);
        let y = vec![r.random_range(0..5), r.random_range(0..5)];
        let y2 = y.clone();
        let rep = finite_difference_check(
            move |t: &mut Tape<f64>, v| {
                let l = dlr_loss(t, v, &y2)?;
                t.sum(l)
            },
            &z,
            None,
            FdOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "DLR {:e}", rep.max_rel_error);
        let rep = finite_difference_check(
            move |t: &mut Tape<f64>, v| {
                let l = cw_margin_loss(t, v, &y, 10.0)?;
                t.sum(l)
            },
            &z,
            None,
            FdOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "CW {:e}", rep.max_rel_error);
    }
}

#[test]
fn dlr_requires_three_classes() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::zeros(&[1, 2]));
    assert!(dlr_loss(&mut t, z, &[0]).is_err());
    assert_eq!(auto_attack_members(0.03, 1, 2).len(), 2);
    let names: Vec<_> = auto_attack_members(0.03, 1, 4).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["APGD-CE", "APGD-DLR", "FGSM"]);
}

#[test]
fn pgd_raises_the_loss_on_a_linear_model() {
    let mut r = rng(6);
    let w = uniform(&mut r, &[20, 3], -1.0, 1.0);
    let model = LinearModel::new(w, Tensor::zeros(&[3])).unwrap();
    let x = uniform(&mut r, &[16, 20], 0.2, 0.8);
    let y: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let clean = AttackSpec::Benign.run(&model, &x, &y, &(0..16).collect::<Vec<_>>()).unwrap();
    let adv = pgd(&model, &x, &y, &AttackConfig { eps: 0.1, step: 0.02, ..AttackConfig::pgd(20) }).unwrap();
    for (a, c) in adv.achieved_loss.iter().zip(&clean.achieved_loss) {
        assert!(a >= c);
    }
}

#[test]
fn evaluation_does_not_depend_on_batch_size() {
    let mut spec = SynthSpec::pavia_mini();
    spec.height = 26;
    spec.width = 26;
    let ds = extract_patches(&normalize_per_band(&synthesize_dataset(&spec, 1).unwrap()), 3).unwrap();
    let ds = ds.subset(&(0..60).collect::<Vec<_>>());
    let cfg = hsi_robust::model::ModelConfig { stem_channels: 4, ..hsi_robust::model::ModelConfig::new(64, 4, 3) };
    let model = init_model::<f32>(&cfg, 3).unwrap();
    for a in standard_suite(8.0 / 255.0, 5) {
        if a.name == "PGD-50" {
            continue;
        }
        let big = evaluate(&model, &ds, &a.spec, 64).unwrap();
        let small = evaluate(&model, &ds, &a.spec, 7).unwrap();
        assert_eq!(big, small, "{}", a.name);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for c in [
        AttackConfig { eps: -1.0, ..AttackConfig::default() },
        AttackConfig { step: f64::NAN, ..AttackConfig::default() },
        AttackConfig { bounds: [1.0, 0.0], ..AttackConfig::default() },
    ] {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let _ = LossKind::Ce;
}

proptest! {
    #[test]
    fn projection_lands_in_the_ball(seed in 0u64..500, eps in 0.0f64..0.5) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[3, 4], 0.0, 1.0);
        let cand = uniform(&mut r, &[3, 4], -1.0, 2.0);
        let p = project_linf(&cand, &x, eps, [0.0, 1.0]);
        for ((pv, xv), cv) in p.data().iter().zip(x.data()).zip(cand.data()) {
            prop_assert!((pv - xv).abs() <= eps + 1e-15);
            prop_assert!((0.0..=1.0).contains(pv));
            let inside = (cv - xv).abs() <= eps && (0.0..=1.0).contains(cv);
            if inside {
                prop_assert_eq!(pv, cv);
            }
        }
    }
}
