use super::*;
use crate::denoiser::DenoiserConfig;

#[test]
fn adamw_first_two_steps_on_a_quadratic() {
    let opt = AdamW {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut params = ParamStore::new();
    params.insert("p", Array2::from_elem((1, 1), 1.0f64));
    let mut state = OptimState::new(&params);
    let want = [1.0989999995, 1.1977365527636898];
    for w in want {
        let p = params.get("p").unwrap()[[0, 0]];
        let mut g = ParamStore::new();
        g.insert("p", Array2::from_elem((1, 1), p - 3.0));
        opt.step(&mut params, &g, &mut state).unwrap();
        let got = params.get("p").unwrap()[[0, 0]];
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }
    assert_eq!(state.step, 2);
}

use ndarray::Array2;

#[test]
fn clipping_rescales_to_the_limit() {
    let mut g = ParamStore::new();
    g.insert("a", Array2::from_elem((1, 2), 3.0f32));
    g.insert("b", Array2::from_elem((1, 2), 4.0f32));
    let before = clip_global_norm(&mut g, 1.0);
    assert!((before - 50f64.sqrt()).abs() < 1e-5);
    assert!((g.l2_norm() - 1.0).abs() < 1e-6);
    let mut small = ParamStore::new();
    small.insert("a", Array2::from_elem((1, 1), 0.5f32));
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small.get("a").unwrap()[[0, 0]], 0.5);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        for branch in [Branch::Conditional, Branch::Unconditional] {
            let problem = GradProblem::tiny(variant, branch, 3).unwrap();
            let report = grad_check(&problem, 1e-4).unwrap();
            assert!(report.passed(), "{variant:?} {branch:?}: {:?}", report.failures());
            assert!(report.groups.len() == problem.model.params.len());
        }
    }
}

#[test]
fn corrupted_gradient_is_flagged() {
    let problem = GradProblem::tiny(Variant::DualStream, Branch::Conditional, 4).unwrap();
    let mut analytic = problem.analytic().unwrap();
    analytic.get_mut("block1.v.geo.A").unwrap()[[0, 3]] += 0.05;
    let report = grad_check_against(&problem, &analytic, 1e-4, 200).unwrap();
    let failures: Vec<&str> = report.failures().iter().map(|g| g.name.as_str()).collect();
    assert_eq!(failures, vec!["block1.v.geo.A"]);
}

#[test]
fn masked_out_targets_carry_no_signal() {
    let problem = GradProblem::tiny(Variant::DualStream, Branch::Conditional, 5).unwrap();
    let mask = &problem.example.mask;
    let base = problem.with_targets(&problem.example.targets).unwrap();
    let mut outside = problem.example.targets.clone();
    ndarray::Zip::from(&mut outside.data).and(mask).for_each(|y, &m| {
        if !m {
            *y += 0.37;
        }
    });
    let moved = problem.with_targets(&outside).unwrap();
    assert_eq!(moved.loss, base.loss);
    for (name, g) in base.grads.iter() {
        assert_eq!(g, moved.grads.get(name).unwrap(), "{name}");
    }
    let mut inside = problem.example.targets.clone();
    inside.data[[0, 0, 0, 0]] += if mask[[0, 0, 0, 0]] { 0.01 } else { 0.0 };
    inside.data[[1, 2, 3, 3]] += if mask[[1, 2, 3, 3]] { 0.01 } else { 0.0 };
    assert_ne!(problem.with_targets(&inside).unwrap().loss, base.loss);
}

fn tiny_model() -> DenoiserConfig {
    DenoiserConfig {
        dim: 16,
        blocks: 2,
        heads: 2,
        ff_mult: 2,
        lora_rank: 4,
        lora_alpha: 4.0,
        ..DenoiserConfig::default()
    }
}

fn tiny_stream() -> SceneStream {
    SceneStream {
        views: 3,
        height: 16,
        width: 16,
        patch: 4,
    }
}

fn tiny_train(phase: Phase, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 3,
        lr: 1e-3,
        seed: 11,
        ..TrainConfig::for_phase(phase)
    }
}

#[test]
fn pretraining_is_deterministic_and_resumable() {
    let edm = EdmConfig::default();
    let mut a = TrainState::pretrain(&tiny_model(), tiny_train(Phase::Pretrain, 4), edm).unwrap();
    a.run(&tiny_stream(), None, |_| {}).unwrap();
    let mut b = TrainState::pretrain(&tiny_model(), tiny_train(Phase::Pretrain, 4), edm).unwrap();
    b.run(&tiny_stream(), None, |_| {}).unwrap();
    assert_eq!(a.model, b.model);

    let dir = tempfile::tempdir().unwrap();
    let mut c = TrainState::pretrain(&tiny_model(), tiny_train(Phase::Pretrain, 2), edm).unwrap();
    c.run(&tiny_stream(), Some(dir.path()), |_| {}).unwrap();
    let mut resumed = TrainState::resume(&checkpoint_base(dir.path()), Some(4)).unwrap();
    assert_eq!(resumed.step, 2);
    resumed.run(&tiny_stream(), Some(dir.path()), |_| {}).unwrap();
    assert_eq!(resumed.model, a.model);
    assert_eq!(resumed.optim, a.optim);
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let steps: Vec<usize> = log
        .lines()
        .map(|l| serde_json::from_str::<StepMetrics>(l).unwrap().step)
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
}

#[test]
fn every_base_weight_gets_gradient_at_step_one() {
    let edm = EdmConfig::default();
    let cfg = TrainConfig {
        batch: 4,
        ..tiny_train(Phase::Pretrain, 1)
    };
    let state = TrainState::pretrain(&tiny_model(), cfg, edm).unwrap();
    let sg = step_gradients(&state.model, &tiny_stream(), &state.config, &edm, 0).unwrap();
    assert!(sg.dropped > 0, "fixture needs at least one dropped condition");
    assert_eq!(dead_parameters(&sg.grads, trainable(Phase::Pretrain)), Vec::<String>::new());
}

#[test]
fn finetuning_freezes_the_base() {
    let edm = EdmConfig::default();
    let mut pre = TrainState::pretrain(&tiny_model(), tiny_train(Phase::Pretrain, 2), edm).unwrap();
    pre.run(&tiny_stream(), None, |_| {}).unwrap();
    let base = pre.model;

    let pipe = crate::datapipe::PipelineConfig {
        views: 3,
        height: 16,
        width: 16,
        ..Default::default()
    };
    let samples = crate::datapipe::generate_dataset(None, 4, 1, &pipe, None).unwrap();
    let stream = PairStream::new(&samples, 4).unwrap();
    let mut ft = TrainState::finetune(&base, &tiny_model(), tiny_train(Phase::Finetune, 3), edm).unwrap();

    // at step 0 the edit model reproduces the base exactly
    let ex = stream.example(0, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = ex.targets.clone();
    let edit_out = ft.model.forward(&ex.inputs, &x, 0.1, Branch::Conditional).unwrap();
    let frozen = ft.model.base_equivalent();
    assert_eq!(edit_out, frozen.forward(&ex.inputs, &x, 0.1, Branch::Conditional).unwrap());
    for (name, p) in frozen.params.iter() {
        assert_eq!(base.params.get(name).unwrap(), p, "{name}");
    }

    ft.run(&stream, None, |_| {}).unwrap();
    for (name, p) in base.params.iter() {
        if !is_finetune_param(name) {
            assert_eq!(ft.model.params.get(name).unwrap(), p, "{name} moved");
        }
    }
    assert!(ft.model.params.get("block0.q.geo.B").unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn full_condition_dropout_gives_condition_zero_gradient() {
    let edm = EdmConfig::default();
    let model = Denoiser::<f32>::init(tiny_model(), 2).unwrap();
    let stream = tiny_stream();
    for i in 0..4 {
        let mut rng = step_rng(9, 0, i);
        let ex = stream.example(0, i, &mut rng).unwrap();
        let noise = NoiseDraw::draw(&ex.targets, &edm, 1.0, &mut rng);
        assert_eq!(noise.branch, Branch::Unconditional);
        let g = example_loss_and_grad(&model, &ex, &noise, &edm).unwrap();
        assert!(g.condition.unwrap().data.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn missing_base_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_model(&dir.path().join("nope")).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("nope"));
}

#[test]
fn divergence_reports_the_step() {
    let edm = EdmConfig::default();
    let mut state = TrainState::pretrain(&tiny_model(), tiny_train(Phase::Pretrain, 3), edm).unwrap();
    state.model.params.get_mut("block1.up.w").unwrap()[[0, 0]] = f32::NAN;
    let err = state.run(&tiny_stream(), None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert!(err.to_string().contains("step 1"), "{err}");
}

#[test]
fn config_validation() {
    assert!(TrainConfig { ucg_rate: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
    let t = TrainConfig::for_phase(Phase::Finetune);
    assert_eq!((t.steps, t.batch, t.lr, t.ucg_rate), (4000, 8, 1e-4, 0.2));
}
