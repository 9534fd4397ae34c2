use avflow_core::error::Error;
use avflow_core::flow::*;
use avflow_core::gradcheck::grad_check;
use avflow_core::model::{Model, ModelConfig, ModelInput, Stage};
use avflow_core::optim::{Optimizer, OptimizerConfig};
use avflow_core::params::ParamStore;
use avflow_core::rope::GridSpec;
use avflow_core::scalar::{exact_from_f64, Exact};
use avflow_core::tape::Graph;
use avflow_core::tensor::Tensor;
use avflow_core::toyworld::ToyWorld;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn exact(t: &Tensor<f64>) -> Tensor<Exact> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| exact_from_f64(x)).collect()).unwrap()
}

#[test]
fn endpoints_are_exact() {
    let x0 = randn(&[3, 4], 1);
    let s0 = make_sample(&x0, 7, 0.0).unwrap();
    let s1 = make_sample(&x0, 7, 1.0).unwrap();
    assert_eq!(s0.xt, s0.x0);
    assert_eq!(s1.xt, s1.x1);
    assert_eq!(s0.x1, s1.x1);
}

#[test]
fn scalar_path_by_hand() {
    let s = FlowSample::from_endpoints(Tensor::scalar(2.0), Tensor::scalar(6.0), 0.25).unwrap();
    assert_eq!(s.xt.data(), &[3.0]);
    assert_eq!(s.v_target.data(), &[4.0]);
}

#[test]
fn t_outside_unit_interval_rejected() {
    let x0 = randn(&[2], 0);
    assert!(matches!(make_sample(&x0, 0, 1.5), Err(Error::Contract(_))));
    assert!(matches!(make_sample(&x0, 0, -1e-9), Err(Error::Contract(_))));
    assert!(make_sample(&x0, 0, f64::NAN).is_err());
}

#[test]
fn velocity_target_ignores_t() {
    let x0 = randn(&[5], 2);
    let a = make_sample(&x0, 11, 0.1).unwrap();
    let b = make_sample(&x0, 11, 0.9).unwrap();
    assert_eq!(a.v_target, b.v_target);
}

fn loss_value(vhat: &Tensor<f64>, s: &FlowSample<f64>) -> f64 {
    let g = Graph::no_grad();
    fm_loss(g.constant(vhat), s).unwrap().item()
}

#[test]
fn fm_loss_zero_and_unit_offset() {
    let s = make_sample(&randn(&[4, 3], 3), 4, 0.3).unwrap();
    assert_eq!(loss_value(&s.v_target, &s), 0.0);
    let shifted = s.v_target.map(|x| x + 1.0);
    assert!((loss_value(&shifted, &s) - 1.0).abs() < 1e-12);
    let g = Graph::no_grad();
    assert!(fm_loss(g.constant(&Tensor::<f64>::zeros(&[12])), &s).is_err());
}

#[test]
fn fm_loss_matches_two_pass_accumulation() {
    for seed in 0..10 {
        let s = make_sample(&randn(&[6, 5], seed), seed + 100, 0.6).unwrap();
        let vhat = randn(&[6, 5], seed + 200);
        // Oracle: accumulate differences first, then square and sum in a second pass.
        let diffs: Vec<f64> = vhat.data().iter().zip(s.v_target.data()).map(|(a, b)| a - b).collect();
        let oracle = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((loss_value(&vhat, &s) - oracle).abs() < 1e-12);
        assert!((fm_error(&vhat, &s.v_target).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn joint_loss_is_sum() {
    let sa = make_sample(&randn(&[4, 2], 5), 6, 0.4).unwrap();
    let sv = make_sample(&randn(&[2, 2, 2], 7), 8, 0.4).unwrap();
    let g = Graph::no_grad();
    let exact_a = g.constant(&sa.v_target);
    let offset_v = g.constant(&sv.v_target.map(|x| x + 1.0));
    let l = joint_fm_loss(exact_a, offset_v, &sa, &sv).unwrap().item();
    assert!((l - 1.0).abs() < 1e-12);
    let (ra, rv) = (randn(&[4, 2], 9), randn(&[2, 2, 2], 10));
    let joint = joint_fm_loss(g.constant(&ra), g.constant(&rv), &sa, &sv).unwrap().item();
    assert!((joint - loss_value(&ra, &sa) - loss_value(&rv, &sv)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn fm_loss_nonnegative_and_zero_only_at_target(
        vals in prop::collection::vec(-5.0f64..5.0, 1..12),
        seed in any::<u64>(),
        t in 0.0f64..=1.0,
        poke in any::<prop::sample::Index>(),
    ) {
        let x0 = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let s = make_sample(&x0, seed, t).unwrap();
        let vhat = randn(&[vals.len()], seed ^ 1);
        prop_assert!(loss_value(&vhat, &s) >= 0.0);
        prop_assert_eq!(loss_value(&s.v_target, &s), 0.0);
        let mut off = s.v_target.clone();
        off.data_mut()[poke.index(vals.len())] += 1e-3;
        prop_assert!(loss_value(&off, &s) > 0.0);
    }

    #[test]
    fn path_interpolates_exactly_in_rationals(
        a in -100i32..100, b in -100i32..100, num in 0u32..=16,
    ) {
        let t = Exact::new(num.into(), 16.into());
        let s = FlowSample::from_endpoints(
            Tensor::scalar(Exact::from_integer(a.into())),
            Tensor::scalar(Exact::from_integer(b.into())),
            t.clone(),
        ).unwrap();
        let expect = Exact::from_integer(a.into()) * (Exact::from_integer(1.into()) - t.clone())
            + Exact::from_integer(b.into()) * t;
        prop_assert_eq!(&s.xt.data()[0], &expect);
        prop_assert_eq!(&s.v_target.data()[0], &Exact::from_integer((b - a).into()));
    }
}

fn exact_state(seed: u64) -> (JointLatent<Exact>, JointLatent<Exact>) {
    let x0 = JointLatent {
        audio: exact(&randn(&[4, 3, 2], seed)),
        video: exact(&randn(&[2, 2, 2, 2], seed + 1)),
    };
    let x1 = JointLatent {
        audio: exact(&randn(&[4, 3, 2], seed + 2)),
        video: exact(&randn(&[2, 2, 2, 2], seed + 3)),
    };
    (x0, x1)
}

fn true_field(x0: &JointLatent<Exact>, x1: &JointLatent<Exact>) -> ConstantField<Exact> {
    ConstantField(JointLatent {
        audio: x1.audio.sub(&x0.audio).unwrap(),
        video: x1.video.sub(&x0.video).unwrap(),
    })
}

#[test]
fn one_euler_step_recovers_data_exactly() {
    for seed in 0..5 {
        let (x0, x1) = exact_state(seed * 10);
        let field = true_field(&x0, &x1);
        let out = euler_sample(&field, 0, x1.clone(), &SamplerConfig { n_steps: 1 }).unwrap();
        assert_eq!(out, x0);
    }
}

#[test]
fn euler_step_count_invariance_is_exact() {
    let (x0, x1) = exact_state(77);
    let field = true_field(&x0, &x1);
    let ten = euler_sample(&field, 0, x1.clone(), &SamplerConfig { n_steps: 10 }).unwrap();
    let twenty = euler_sample(&field, 0, x1.clone(), &SamplerConfig { n_steps: 20 }).unwrap();
    assert_eq!(ten, twenty);
    assert_eq!(ten, x0);
}

#[test]
fn euler_in_floats_agrees_closely() {
    let x0 = JointLatent {
        audio: randn(&[4, 3, 2], 1),
        video: randn(&[2, 2, 2, 2], 2),
    };
    let x1 = JointLatent {
        audio: randn(&[4, 3, 2], 3),
        video: randn(&[2, 2, 2, 2], 4),
    };
    let field = ConstantField(JointLatent {
        audio: x1.audio.sub(&x0.audio).unwrap(),
        video: x1.video.sub(&x0.video).unwrap(),
    });
    for n in [1, 10, 20] {
        let out = euler_sample(&field, 0, x1.clone(), &SamplerConfig { n_steps: n }).unwrap();
        assert!(out.audio.max_abs_diff(&x0.audio).unwrap() < 1e-12);
        assert!(out.video.max_abs_diff(&x0.video).unwrap() < 1e-12);
    }
}

#[test]
fn zero_field_returns_noise() {
    let grid = GridSpec::new(2, 2, 2, 4, 3).unwrap();
    let noise = JointLatent::<f64>::noise(&grid, 2, 2, 5);
    let zero = ConstantField(JointLatent {
        audio: Tensor::zeros(noise.audio.shape()),
        video: Tensor::zeros(noise.video.shape()),
    });
    let out = euler_sample_seeded(&zero, 0, &grid, (2, 2), &SamplerConfig { n_steps: 7 }, 5).unwrap();
    assert_eq!(out, noise);
}

#[test]
fn schedule_is_strictly_decreasing_unit_grid() {
    let ts = SamplerConfig { n_steps: 5 }.schedule::<Exact>().unwrap();
    assert_eq!(ts.first().unwrap(), &Exact::from_integer(1.into()));
    assert_eq!(ts.last().unwrap(), &Exact::from_integer(0.into()));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert!(SamplerConfig { n_steps: 0 }.schedule::<f64>().is_err());
}

/// Loss `mean((w·x − v)²)` is quadratic in `w` with curvature `2a`,
/// `a = mean(x²)`; plain gradient descent contracts the error by
/// `|1 − 2a·lr|` per step, so the loss decreases monotonically iff `lr < 1/a`.
#[test]
fn one_parameter_descent_respects_stability_bound() {
    let sample = make_sample(&randn(&[8], 42), 43, 0.5).unwrap();
    let a = sample.xt.data().iter().map(|x| x * x).sum::<f64>() / 8.0;
    let run = |lr: f64| -> Vec<f64> {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            clip_norm: None,
            ..OptimizerConfig::sgd(lr, 0.0)
        });
        (0..15)
            .map(|_| {
                let g = Graph::new();
                let w = g.param_named(&store, "w").unwrap();
                let loss = fm_loss(g.constant(&sample.xt).mul(w).unwrap(), &sample).unwrap();
                let value = loss.item();
                g.backward(loss).unwrap().accumulate(&mut store).unwrap();
                opt.step(&mut store);
                value
            })
            .collect()
    };
    let stable = run(0.95 / a);
    assert!(stable.windows(2).all(|w| w[1] < w[0]), "{stable:?}");
    let unstable = run(1.05 / a);
    assert!(unstable.windows(2).all(|w| w[1] > w[0]), "{unstable:?}");
}

fn small_world() -> ToyWorld {
    ToyWorld {
        grid: GridSpec::new(2, 2, 2, 8, 2).unwrap(),
        max_events: 2,
        ..ToyWorld::default()
    }
}

/// 2000 default (momentum SGD) steps of a 2-layer dim-16 model on a small
/// toy grid at least halve the held-out loss.
#[test]
fn default_training_halves_held_out_loss() {
    let world = ToyWorld {
        grid: GridSpec::new(4, 2, 2, 16, 4).unwrap(),
        ..ToyWorld::default()
    };
    let held_out: Vec<_> = (0..16).map(|i| world.example(77, i).unwrap()).collect();
    let mut model = Model::<f64>::new(ModelConfig::toy(16, 2, 2), 0).unwrap();
    let initial = eval_flow_loss(&model, &held_out, 1).unwrap();
    let log = train_flow(&mut model, |i| world.example(5, i), &TrainFlowConfig::default()).unwrap();
    assert_eq!(log.len(), 2000);
    let last = eval_flow_loss(&model, &held_out, 1).unwrap();
    assert!(last < 0.5 * initial, "{initial} -> {last}");
}

#[test]
fn zero_lr_leaves_model_bitwise() {
    let world = small_world();
    let mut model = Model::<f64>::new(ModelConfig::toy(8, 2, 1), 1).unwrap();
    let before = model.params().checksum();
    let cfg = TrainFlowConfig {
        steps: 3,
        batch_size: 2,
        optimizer: OptimizerConfig::sgd(0.0, 0.9),
        ..Default::default()
    };
    let log = train_flow(&mut model, |i| world.example(3, i), &cfg).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(model.params().checksum(), before);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let world = small_world();
    let cfg = TrainFlowConfig {
        steps: 60,
        batch_size: 2,
        optimizer: OptimizerConfig::adam(0.01),
        ..Default::default()
    };
    let train = || {
        let mut model = Model::<f64>::new(ModelConfig::toy(8, 2, 1), 1).unwrap();
        let log = train_flow(&mut model, |i| world.example(3, i), &cfg).unwrap();
        (model.params().checksum(), log)
    };
    let (c1, l1) = train();
    let (c2, l2) = train();
    assert_eq!(c1, c2);
    assert_eq!(l1, l2);
    let (first, last) = loss_ends(&l1, 10).unwrap();
    assert!(last < first, "{first} -> {last}");
    let held_out: Vec<_> = (0..8).map(|i| world.example(99, i).unwrap()).collect();
    let fresh = Model::<f64>::new(ModelConfig::toy(8, 2, 1), 1).unwrap();
    let mut trained = Model::<f64>::new(ModelConfig::toy(8, 2, 1), 1).unwrap();
    train_flow(&mut trained, |i| world.example(3, i), &cfg).unwrap();
    let before = eval_flow_loss(&fresh, &held_out, 5).unwrap();
    assert_eq!(before, eval_flow_loss(&fresh, &held_out, 5).unwrap());
    assert!(eval_flow_loss(&trained, &held_out, 5).unwrap() < before);
}

#[test]
fn audio_only_mode_touches_no_video_parameter() {
    let world = small_world();
    let mut model = Model::<f64>::new(ModelConfig::toy(8, 2, 1), 2).unwrap();
    model.set_stage(Stage::AudioPretrain);
    let video_side = |n: &str| n.contains("video");
    let before = model.params().checksum_where(video_side);
    let audio_before = model.params().checksum_where(|n| n.contains("audio"));
    let cfg = TrainFlowConfig {
        steps: 5,
        batch_size: 1,
        audio_only: true,
        optimizer: OptimizerConfig::sgd(0.05, 0.9),
        ..Default::default()
    };
    let log = train_flow(&mut model, |i| world.example(4, i), &cfg).unwrap();
    assert!(log.iter().all(|r| r.loss_video.is_none()));
    assert_eq!(model.params().checksum_where(video_side), before);
    assert_ne!(model.params().checksum_where(|n| n.contains("audio")), audio_before);
}

#[test]
fn nan_parameters_abort_training() {
    let world = small_world();
    let mut model = Model::<f64>::new(ModelConfig::toy(8, 2, 1), 2).unwrap();
    model.params_mut().get_mut("audio_head.b").unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainFlowConfig {
        steps: 2,
        batch_size: 1,
        ..Default::default()
    };
    assert!(matches!(
        train_flow(&mut model, |i| world.example(0, i), &cfg),
        Err(Error::Numerical(_))
    ));
}

#[test]
fn log_serializes_as_jsonl() {
    let rec = FlowLogRecord {
        step: 3,
        loss: 0.5,
        loss_audio: 0.25,
        loss_video: Some(0.25),
        lr: 0.01,
    };
    let mut buf = Vec::new();
    write_jsonl(&[rec.clone(), rec], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["step", "loss", "loss_audio", "loss_video", "lr"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig::toy(8, 2, 2);
    let mut model = Model::<f64>::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in model.params_mut().iter_mut() {
        let fresh = Tensor::randn(p.tensor.shape(), 0.3, &mut rng);
        p.tensor.data_mut().copy_from_slice(fresh.data());
    }
    let grid = GridSpec::new(2, 1, 2, 3, 2).unwrap();
    let sa = make_sample(&randn(&[3, 2, 2], 7), 8, 0.4).unwrap();
    let sv = make_sample(&randn(&[2, 1, 2, 2], 9), 10, 0.4).unwrap();
    let report = grad_check(
        model.params(),
        |g, store| {
            let input = ModelInput {
                grid,
                video: Some(g.constant(&sv.xt)),
                audio: Some(g.constant(&sa.xt)),
            };
            let cond = avflow_core::model::ConditionInput { class_id: 2, t: 0.4 };
            let p = model.view_with(store)?.forward(g, &input, &cond)?;
            joint_fm_loss(p.audio.unwrap(), p.video.unwrap(), &sa, &sv)
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
