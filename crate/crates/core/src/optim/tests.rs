use super::*;
use crate::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn sgd_examples() {
    let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0 };
    let mut p = [1.0];
    sgd_update(&mut p, &[0.5], &mut [0.0], 0.1, &cfg);
    assert!((p[0] - 0.95).abs() < 1e-15);

    let mut p = [0.3, -2.0];
    sgd_update(&mut p, &[0.0, 0.0], &mut [0.0, 0.0], 0.1, &SgdConfig::default());
    assert_eq!(p, [0.3, -2.0]);
}

#[test]
fn sgd_momentum_two_steps() {
    // v1 = g, p1 = p0 - lr g; v2 = m g + g, p2 = p1 - lr (1 + m) g
    let (p0, g, lr, m) = (2.0, 0.7, 0.05, 0.9);
    let cfg = SgdConfig { momentum: m, weight_decay: 0.0 };
    let mut p = [p0];
    let mut v = [0.0];
    sgd_update(&mut p, &[g], &mut v, lr, &cfg);
    sgd_update(&mut p, &[g], &mut v, lr, &cfg);
    assert!((p[0] - (p0 - lr * g - lr * (1.0 + m) * g)).abs() < 1e-15);
}

#[test]
fn adam_first_step_is_sign() {
    let cfg = AdamConfig { epsilon: 0.0, weight_decay: 0.0, ..Default::default() };
    for g in [3.0, -0.002, 1e4] {
        let mut p = [1.0];
        adam_update(&mut p, &[g], &mut [0.0], &mut [0.0], 0.01, 1, &cfg);
        assert!((p[0] - (1.0 - 0.01 * f64::signum(g))).abs() < 1e-12);
    }
    let mut p = [1.0, -4.0];
    for t in 1..=5 {
        adam_update(&mut p, &[0.0, 0.0], &mut [0.0; 2], &mut [0.0; 2], 0.01, t, &AdamConfig { weight_decay: 0.0, ..Default::default() });
    }
    assert_eq!(p, [1.0, -4.0]);
}

#[test]
fn adam_quadratic_matches_reference() {
    // f(x) = 0.5 a x^2, gradient a x; unrolled moment recurrence
    let (a, lr) = (3.0, 0.1);
    let cfg = AdamConfig::default();
    let mut p = [1.5];
    let (mut m, mut v) = ([0.0], [0.0]);
    let (mut x, mut mm, mut vv) = (1.5f64, 0.0f64, 0.0f64);
    for t in 1..=5u64 {
        let g = a * p[0];
        adam_update(&mut p, &[g], &mut m, &mut v, lr, t, &cfg);
        let gr = a * x + 0.01 * x;
        mm = 0.9 * mm + 0.1 * gr;
        vv = 0.999 * vv + 0.001 * gr * gr;
        let mhat = mm / (1.0 - 0.9f64.powi(t as i32));
        let vhat = vv / (1.0 - 0.999f64.powi(t as i32));
        x -= lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - x).abs() < 1e-12);
    }
}

fn store() -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("stem.w", "stem", Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
    s.add("head.w", "head", Tensor::from_f64(&[768, 10], &vec![0.5; 7680]).unwrap());
    s.add("head.b", "head", Tensor::zeros(&[10]).unwrap());
    s
}

#[test]
fn freeze_examples() {
    let mut s = store();
    freeze(&mut s, &["head"]).unwrap();
    assert_eq!(s.count_trainable(), 7690);
    freeze(&mut s, &["stem", "head"]).unwrap();
    assert!(s.iter().all(|p| p.trainable));
    assert!(freeze(&mut s, &["encoder"]).is_err());
}

#[test]
fn frozen_group_survives_three_steps() {
    let mut s = store();
    freeze(&mut s, &["head"]).unwrap();
    let stem = s.group_checksum("stem");
    let head = s.group_checksum("head");
    for cfg in [OptimizerConfig::Sgd(SgdConfig::default()), OptimizerConfig::Adam(AdamConfig::default())] {
        let mut opt = Optimizer::new(cfg, s.count()).unwrap();
        for _ in 0..3 {
            let grads = vec![0.25; s.count()];
            opt.step(&mut s, &grads, &LrPlan::Uniform(0.1)).unwrap();
        }
        assert_eq!(s.group_checksum("stem"), stem);
        assert_ne!(s.group_checksum("head"), head);
    }
}

#[test]
fn non_finite_gradient_names_param() {
    let mut s = store();
    let mut opt = Optimizer::new(OptimizerConfig::Sgd(SgdConfig::default()), s.count()).unwrap();
    let mut grads = vec![0.0; s.count()];
    grads[5] = f64::NAN;
    match opt.step(&mut s, &grads, &LrPlan::Uniform(0.1)) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "head.w"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn per_group_plan_requires_all_groups() {
    let mut s = store();
    let mut opt = Optimizer::new(OptimizerConfig::Sgd(SgdConfig::default()), s.count()).unwrap();
    let plan = LrPlan::PerGroup([("head".to_string(), 0.1)].into_iter().collect());
    let grads = vec![0.0; s.count()];
    assert!(opt.step(&mut s, &grads, &plan).is_err());
}

proptest! {
    #[test]
    fn frozen_params_invariant_under_any_update(grads in prop::collection::vec(-10.0f64..10.0, 7693), lr in 1e-6f64..1.0, adam in any::<bool>()) {
        let mut s = store();
        freeze(&mut s, &["head"]).unwrap();
        let before = s.find("stem.w").unwrap().value.clone();
        let cfg = if adam { OptimizerConfig::Adam(AdamConfig::default()) } else { OptimizerConfig::Sgd(SgdConfig::default()) };
        let mut opt = Optimizer::new(cfg, s.count()).unwrap();
        opt.step(&mut s, &grads, &LrPlan::Uniform(lr)).unwrap();
        prop_assert_eq!(s.find("stem.w").unwrap().value.data(), before.data());
    }

    #[test]
    fn update_independent_of_element_order(vals in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..32), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..vals.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let cfg = AdamConfig::default();
        let run = |order: &[usize]| {
            let mut p: Vec<f64> = order.iter().map(|&i| vals[i].0).collect();
            let g: Vec<f64> = order.iter().map(|&i| vals[i].1).collect();
            let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
            for t in 1..=3 {
                adam_update(&mut p, &g, &mut m, &mut v, 0.01, t, &cfg);
            }
            let mut out = vec![0.0; p.len()];
            for (k, &i) in order.iter().enumerate() {
                out[i] = p[k];
            }
            out
        };
        let id: Vec<usize> = (0..vals.len()).collect();
        prop_assert_eq!(run(&id), run(&perm));
    }
}
