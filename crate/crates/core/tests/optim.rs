use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stwb_core::nnet::{set_freeze, BlockType, Model, ModelConfig};
use stwb_core::params::{Gradients, ParamSet};
use stwb_core::training::{
    average_checkpoints, average_params, lr_factor, Adam, AdamConfig, DualOptimizer, TrainState, ValidMetric,
};
use stwb_core::Matrix;

#[test]
fn adam_matches_hand_iteration_on_a_parabola() {
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut adam = Adam::new(cfg);
    let mut params = ParamSet::new();
    params.insert("x", Matrix::row_vector(vec![3.0]));
    let (mut x, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
    for t in 1..=50 {
        let g = 2.0 * x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.999f64.powi(t));
        x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);

        let mut grads = Gradients::new();
        grads.insert("x", Matrix::row_vector(vec![2.0 * params.get("x").unwrap().get(0, 0)]));
        adam.step(&mut params, &grads, 1.0, |_| true);
        assert!((params.get("x").unwrap().get(0, 0) - x).abs() < 1e-12, "step {t}");
    }
    // First step moves by exactly lr (|mhat / sqrt(vhat)| = 1).
    let mut fresh = Adam::new(cfg);
    let mut p = ParamSet::new();
    p.insert("x", Matrix::row_vector(vec![3.0]));
    let mut g = Gradients::new();
    g.insert("x", Matrix::row_vector(vec![6.0]));
    fresh.step(&mut p, &g, 1.0, |_| true);
    assert!((p.get("x").unwrap().get(0, 0) - 2.9).abs() < 1e-9);
}

fn small_model() -> Model {
    Model::build(
        ModelConfig {
            block_type: BlockType::Transformer,
            feat_dim: 4,
            d_model: 4,
            n_heads: 2,
            d_ff: 8,
            conv_kernel: 3,
            conv_stride: 2,
            dw_kernel: 3,
            n_enc_layers: 1,
            src_vocab: 0,
            n_text_layers: 0,
            tgt_vocab: 9,
            n_dec_layers: 1,
            ctc_vocab: 7,
            ctc_hidden: 0,
            mfp_head: false,
        },
        3,
    )
    .unwrap()
}

fn random_grads(params: &ParamSet, seed: u64) -> Gradients {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Gradients::new();
    for (name, m) in params.iter() {
        let data = (0..m.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.insert(name, Matrix::from_vec(m.rows(), m.cols(), data));
    }
    g
}

#[test]
fn dual_optimizer_with_equal_rates_is_plain_adam() {
    let model = small_model();
    let mut a = model.params.clone();
    let mut b = model.params.clone();
    let mut dual = DualOptimizer::new(AdamConfig::with_lr(0.01), AdamConfig::with_lr(0.01));
    let mut single = Adam::new(AdamConfig::with_lr(0.01));
    let none = set_freeze::<&str>(&model, &[]);
    for step in 0..5 {
        let g = random_grads(&model.params, step);
        let scale = lr_factor(step + 1, 3);
        dual.step(&mut a, &g, &none, scale).unwrap();
        single.step(&mut b, &g, scale, |_| true);
    }
    assert_eq!(a, b);
}

#[test]
fn zero_encoder_rate_leaves_encoder_untouched() {
    let model = small_model();
    let mut p = model.params.clone();
    let mut dual = DualOptimizer::new(AdamConfig::with_lr(0.0), AdamConfig::with_lr(0.01));
    let none = set_freeze::<&str>(&model, &[]);
    for step in 0..3 {
        dual.step(&mut p, &random_grads(&model.params, step), &none, 1.0).unwrap();
    }
    for (name, before) in model.params.iter() {
        let after = p.get(name).unwrap();
        if name.starts_with("enc.") {
            assert_eq!(before, after, "{name}");
        } else {
            assert_ne!(before, after, "{name}");
        }
    }
}

#[test]
fn non_finite_gradient_aborts_without_changes() {
    let model = small_model();
    let mut p = model.params.clone();
    let mut dual = DualOptimizer::new(AdamConfig::with_lr(0.01), AdamConfig::with_lr(0.01));
    let mut g = random_grads(&model.params, 1);
    g.insert("dec.out.b", Matrix::filled(1, 9, f64::NAN));
    let none = set_freeze::<&str>(&model, &[]);
    let err = dual.step(&mut p, &g, &none, 1.0).unwrap_err();
    assert!(matches!(err, stwb_core::Error::NonFinite(_)));
    assert_eq!(p, model.params);
}

#[test]
fn warmup_then_inverse_square_root() {
    let w = 100;
    assert_eq!(lr_factor(0, w), 0.0);
    assert!((lr_factor(25, w) - 0.25).abs() < 1e-15);
    assert_eq!(lr_factor(100, w), 1.0);
    assert!((lr_factor(400, w) - 0.5).abs() < 1e-15);
    assert!((lr_factor(10_000, w) - 0.1).abs() < 1e-15);
    for s in 1..w {
        assert!(lr_factor(s, w) < lr_factor(s + 1, w));
    }
    for s in w..3 * w {
        assert!(lr_factor(s + 1, w) < lr_factor(s, w));
    }
    assert_eq!(lr_factor(7, 0), 1.0);
}

#[test]
fn averaging_matches_elementwise_mean() {
    let models: Vec<Model> = (0..4).map(|s| Model::build(small_model().config, s).unwrap()).collect();
    let refs: Vec<&Model> = models.iter().collect();
    let avg = average_checkpoints(&refs).unwrap();
    for (name, t) in avg.params.iter() {
        for i in 0..t.len() {
            let mean = models.iter().map(|m| m.params.get(name).unwrap().data()[i]).sum::<f64>() / 4.0;
            assert!((t.data()[i] - mean).abs() < 1e-15);
        }
    }
    // Idempotent on copies of one model, and invariant to order.
    let one = &models[0];
    assert_eq!(average_checkpoints(&[one, one, one, one]).unwrap().params.iter().count(), one.params.len());
    let same = average_checkpoints(&[one, one]).unwrap();
    assert_eq!(&same, one);
    assert_eq!(average_checkpoints(&[one]).unwrap(), *one);
    let rev: Vec<&Model> = models.iter().rev().collect();
    let back = average_checkpoints(&rev).unwrap();
    for (name, t) in back.params.iter() {
        assert!(t.max_abs_diff(avg.params.get(name).unwrap()) < 1e-15);
    }
}

#[test]
fn averaging_rejects_mismatches() {
    let a = small_model();
    let mut b = a.params.clone();
    b.insert("dec.out.b", Matrix::zeros(1, 3));
    assert!(average_params(&[&a.params, &b]).is_err());
    let mut c = a.params.clone();
    c.insert("extra", Matrix::zeros(1, 1));
    assert!(average_params(&[&a.params, &c]).is_err());
    assert!(average_params(&[]).is_err());
}

#[test]
fn best_k_keeps_the_best_in_order() {
    let m = small_model();
    let mut st = TrainState::new(3);
    let hi = |v| ValidMetric { value: v, higher_is_better: true };
    for (epoch, v) in [10.0, 30.0, 20.0, 5.0, 30.0, 25.0].into_iter().enumerate() {
        st.offer(hi(v), epoch + 1, &m);
    }
    let kept: Vec<(f64, usize)> = st.best_list.iter().map(|e| (e.metric, e.epoch)).collect();
    assert_eq!(kept, vec![(30.0, 2), (30.0, 5), (25.0, 6)]);

    let mut low = TrainState::new(2);
    for (epoch, v) in [3.0, 1.0, 2.0].into_iter().enumerate() {
        low.offer(ValidMetric { value: v, higher_is_better: false }, epoch + 1, &m);
    }
    assert_eq!(low.best_list.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![2, 3]);
}
