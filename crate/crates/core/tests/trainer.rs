use std::fs;

use gcisg_core::encoder::{input_batch, BoundNetwork, Checkpoint, Network};
use gcisg_core::guidance::guidance_loss;
use gcisg_core::invariance::ViewProjections;
use gcisg_core::scm::{Benchmark, DatasetSpec, Domain, Sample};
use gcisg_core::trainer::run::{CONFIG_ECHO_FILE, DIVERGENCE_FILE, FINAL_FILE, METRICS_FILE};
use gcisg_core::trainer::state::make_views;
use gcisg_core::trainer::{
    run_experiment, total_loss, train_step, Artifacts, ExperimentConfig, LossBreakdown, RunOptions, TrainState,
};
use gcisg_core::{Error, Tape, Tensor, Var};

fn tiny_spec() -> DatasetSpec {
    DatasetSpec {
        n_train: 24,
        n_val: 12,
        n_pretext_train: 12,
        n_pretext_val: 12,
        ..DatasetSpec::default()
    }
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        data: tiny_spec(),
        ..ExperimentConfig::default()
    };
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 2;
    cfg.optim.lr = 0.01;
    cfg.loss.queue_size = 16;
    cfg.eval.log_every = 1;
    cfg
}

fn reference() -> Network {
    Network::classifier(12, 99)
}

fn bench() -> Benchmark {
    Benchmark::generate(&tiny_spec())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn batch(b: &Benchmark, start: usize) -> Vec<&Sample> {
    b.train[start..start + 8].iter().collect()
}

/// Evaluate the composite loss on the state without stepping.
fn loss_at(cfg: &ExperimentConfig, state: &TrainState, samples: &[&Sample]) -> LossBreakdown {
    let (v1, v2) = make_views(samples, cfg.seed, state.step, &cfg.augment);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let tape = Tape::new();
    let online = state.pair.online.bind(&tape, true);
    let target = state.pair.target.bind(&tape, false);
    let reference = state.pair.reference.bind(&tape, false);
    let x1 = tape.constant(input_batch(&v1.iter().collect::<Vec<_>>()).unwrap());
    let x2 = tape.constant(input_batch(&v2.iter().collect::<Vec<_>>()).unwrap());
    let (l, b, _) = total_loss(cfg, state, &online, &target, &reference, &x1, &x2, &labels).unwrap();
    assert_eq!(l.item(), b.total);
    b
}

/// A state whose support queues are already warm.
fn warm_state(cfg: &ExperimentConfig, b: &Benchmark) -> TrainState {
    let mut state = TrainState::new(cfg, &reference()).unwrap();
    train_step(&mut state, cfg, &batch(b, 0)).unwrap();
    state
}

#[test]
fn breakdown_reconstructs_total_every_step() {
    let mut cfg = tiny_config();
    cfg.loss.lambda_g = vec![0.5, 0.25, 1.0, 2.0];
    cfg.loss.lambda_ci = vec![0.0, 0.7, 1.0, 1.5];
    let b = bench();
    let mut state = TrainState::new(&cfg, &reference()).unwrap();
    let mut saw_ci = false;
    for s in 0..3 {
        let br = train_step(&mut state, &cfg, &batch(&b, (s * 8) % 16)).unwrap();
        let rebuilt = br.reconstruct(&cfg.loss.lambda_g, &cfg.loss.lambda_ci);
        assert!((br.total - rebuilt).abs() <= 1e-10, "{} vs {rebuilt}", br.total);
        assert!(br.guidance.iter().all(|g| (0.0..=4.0).contains(g)));
        saw_ci |= br.ci[3] > 0.0;
    }
    assert!(saw_ci, "invariance term never became active");
}

#[test]
fn cold_queue_skips_invariance_term() {
    let cfg = tiny_config();
    let b = bench();
    let mut state = TrainState::new(&cfg, &reference()).unwrap();
    let first = train_step(&mut state, &cfg, &batch(&b, 0)).unwrap();
    assert_eq!(first.ci, [0.0; 4]);
    let second = train_step(&mut state, &cfg, &batch(&b, 8)).unwrap();
    assert!(second.ci[2] > 0.0 && second.ci[3] > 0.0);
}

#[test]
fn zero_lambdas_leave_only_the_task_loss() {
    let mut cfg = tiny_config();
    cfg.loss.lambda_g = vec![0.0; 4];
    cfg.loss.lambda_ci = vec![0.0; 4];
    let b = bench();
    let state = warm_state(&cfg, &b);
    let br = loss_at(&cfg, &state, &batch(&b, 8));
    assert_eq!(br.total, br.task);
}

#[test]
fn doubling_lambdas_doubles_the_auxiliary_terms() {
    let cfg = tiny_config();
    let b = bench();
    let state = warm_state(&cfg, &b);
    let mut doubled = cfg.clone();
    doubled.loss.lambda_g.iter_mut().for_each(|l| *l *= 2.0);
    doubled.loss.lambda_ci.iter_mut().for_each(|l| *l *= 2.0);
    let one = loss_at(&cfg, &state, &batch(&b, 8));
    let two = loss_at(&doubled, &state, &batch(&b, 8));
    assert_eq!(one.task, two.task);
    let (e1, e2) = (one.total - one.task, two.total - two.task);
    assert!(e1 > 0.0);
    assert!((e2 - 2.0 * e1).abs() <= 1e-10 * e2.abs().max(1.0), "{e1} {e2}");
}

fn stage4<'t>(n: &BoundNetwork<'t>, x: &Var<'t>) -> Var<'t> {
    n.forward_staged(x).unwrap().maps[3]
}

fn gap(m: Var<'_>) -> Var<'_> {
    gcisg_core::encoder::global_avg_pool(&m).unwrap()
}

#[test]
fn single_stage_matches_standalone_terms() {
    let mut cfg = tiny_config();
    cfg.loss.lambda_g = vec![0.0, 0.0, 0.0, 1.0];
    cfg.loss.lambda_ci = vec![0.0, 0.0, 0.0, 1.0];
    let b = bench();
    let state = warm_state(&cfg, &b);
    let samples = batch(&b, 8);
    let br = loss_at(&cfg, &state, &samples);

    // recompute both terms by hand from the same views
    let (v1, v2) = make_views(&samples, cfg.seed, state.step, &cfg.augment);
    let tape = Tape::new();
    let online = state.pair.online.bind(&tape, true);
    let target = state.pair.target.bind(&tape, false);
    let reference = state.pair.reference.bind(&tape, false);
    let x1 = tape.constant(input_batch(&v1.iter().collect::<Vec<_>>()).unwrap());
    let x2 = tape.constant(input_batch(&v2.iter().collect::<Vec<_>>()).unwrap());
    let g = guidance_loss(&stage4(&online, &x1), &stage4(&reference, &x1), cfg.guidance.pool).unwrap();
    let proj = ViewProjections::compute(
        &online,
        &target,
        4,
        [&gap(stage4(&online, &x1)), &gap(stage4(&online, &x2))],
        [&gap(stage4(&target, &x1)), &gap(stage4(&target, &x2))],
    )
    .unwrap();
    let q = &state.queues.iter().find(|(l, _)| *l == 4).unwrap().1;
    let ci = proj.loss(q, cfg.loss.temperatures(), cfg.loss.ci_kind).unwrap();
    let expected = g.item() + ci.item();
    assert!(((br.total - br.task) - expected).abs() <= 1e-10, "{} vs {expected}", br.total - br.task);
}

#[test]
fn zero_lambdas_and_zero_lr_leave_parameters_unchanged() {
    let mut cfg = tiny_config();
    cfg.loss.lambda_g = vec![0.0; 4];
    cfg.loss.lambda_ci = vec![0.0; 4];
    cfg.optim.lr = 0.0;
    let b = bench();
    let mut state = TrainState::new(&cfg, &reference()).unwrap();
    let before = state.pair.online.clone();
    train_step(&mut state, &cfg, &batch(&b, 0)).unwrap();
    train_step(&mut state, &cfg, &batch(&b, 8)).unwrap();
    assert_eq!(state.pair.online, before);
}

#[test]
fn target_follows_ema_law_after_each_step() {
    for m in [0.0, 0.996, 1.0] {
        let mut cfg = tiny_config();
        cfg.optim.ema = m;
        let b = bench();
        let mut state = TrainState::new(&cfg, &reference()).unwrap();
        for s in 0..2 {
            let old = state.pair.target.clone();
            train_step(&mut state, &cfg, &batch(&b, s * 8)).unwrap();
            let online = state.pair.online.tensors();
            for (name, t) in state.pair.target.tensors() {
                let o = &online.iter().find(|(n, _)| *n == name).unwrap().1;
                let prev = &old.tensors().into_iter().find(|(n, _)| *n == name).unwrap().1;
                for ((new, p), on) in t.data().iter().zip(prev.data()).zip(o.data()) {
                    assert_eq!(*new, m * p + (1.0 - m) * on, "{name} at m={m}");
                }
            }
        }
        if m == 1.0 {
            let fresh = TrainState::new(&cfg, &reference()).unwrap();
            assert_eq!(state.pair.target, fresh.pair.target);
        }
    }
}

#[test]
fn reference_and_target_receive_no_gradient() {
    let cfg = tiny_config();
    let b = bench();
    let state = warm_state(&cfg, &b);
    let samples = batch(&b, 8);
    let (v1, v2) = make_views(&samples, cfg.seed, state.step, &cfg.augment);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let tape = Tape::new();
    let online = state.pair.online.bind(&tape, true);
    let target = state.pair.target.bind(&tape, false);
    let reference = state.pair.reference.bind(&tape, false);
    let x1 = tape.constant(input_batch(&v1.iter().collect::<Vec<_>>()).unwrap());
    let x2 = tape.constant(input_batch(&v2.iter().collect::<Vec<_>>()).unwrap());
    let (l, br, _) = total_loss(&cfg, &state, &online, &target, &reference, &x1, &x2, &labels).unwrap();
    assert!(br.ci[3] > 0.0 && br.guidance[3] > 0.0);
    let grads = tape.backward(l).unwrap();
    assert!(target.grad_slots(&grads).iter().all(Option::is_none));
    assert!(reference.grad_slots(&grads).iter().all(Option::is_none));
    assert!(online.grad_slots(&grads).iter().all(Option::is_some));
}

#[test]
fn real_domain_samples_are_rejected() {
    let cfg = tiny_config();
    let b = bench();
    let mut state = TrainState::new(&cfg, &reference()).unwrap();
    let mixed: Vec<&Sample> = vec![&b.train[0], &b.val[0]];
    assert!(matches!(train_step(&mut state, &cfg, &mixed), Err(Error::Config(_))));
    assert_eq!(state.step, 0);

    let mut arts = Artifacts::from_benchmark(&b, reference());
    arts.train.push(b.val[0].clone());
    assert_eq!(arts.train.last().unwrap().domain, Domain::Real);
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, &arts, dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn train_state_serialisation_is_bit_stable() {
    let cfg = tiny_config();
    let b = bench();
    let mut state = warm_state(&cfg, &b);
    train_step(&mut state, &cfg, &batch(&b, 8)).unwrap();
    let mut first = Vec::new();
    state.to_checkpoint(&cfg).unwrap().write(&mut first).unwrap();
    let back = TrainState::from_checkpoint(&Checkpoint::read(&mut first.as_slice()).unwrap(), &cfg).unwrap();
    assert_eq!(back, state);
    let mut second = Vec::new();
    back.to_checkpoint(&cfg).unwrap().write(&mut second).unwrap();
    assert_eq!(first, second);
}

#[test]
fn training_steps_are_deterministic() {
    let cfg = tiny_config();
    let b = bench();
    let run = || {
        let mut state = TrainState::new(&cfg, &reference()).unwrap();
        let losses: Vec<LossBreakdown> = (0..3)
            .map(|s| train_step(&mut state, &cfg, &batch(&b, (s * 8) % 16)).unwrap())
            .collect();
        (losses, state)
    };
    assert_eq!(run(), run());
}

#[test]
fn ema_drift_is_bounded_by_accumulated_updates() {
    let mut cfg = tiny_config();
    cfg.optim.ema = 0.9;
    cfg.optim.lr = 0.05;
    let b = bench();
    let mut state = TrainState::new(&cfg, &reference()).unwrap();
    let names: Vec<String> = state.pair.target.tensors().iter().map(|(n, _)| n.clone()).collect();
    let shared = |net: &Network| -> Vec<f64> {
        let t = net.tensors();
        names
            .iter()
            .flat_map(|n| t.iter().find(|(m, _)| m == n).unwrap().1.data().to_vec())
            .collect()
    };
    let mut accumulated = 0.0;
    for s in 0..4 {
        let (online_before, target_before) = (shared(&state.pair.online), shared(&state.pair.target));
        train_step(&mut state, &cfg, &batch(&b, (s * 8) % 16)).unwrap();
        let (online_after, target_after) = (shared(&state.pair.online), shared(&state.pair.target));
        // the target moves (1 − m) of the way towards the new online weights
        let moved = dist(&target_after, &target_before);
        let gap = dist(&online_after, &target_before);
        assert!((moved - (1.0 - cfg.optim.ema) * gap).abs() <= 1e-9 * gap.max(1.0));
        accumulated += dist(&online_after, &online_before);
        let drift = dist(&target_after, &online_after);
        assert!(drift <= cfg.optim.ema * accumulated + 1e-12, "{drift} > m·{accumulated}");
    }
}

fn artifacts() -> Artifacts {
    Artifacts::from_benchmark(&bench(), reference())
}

#[test]
fn runs_reproduce_metrics_bit_identically() {
    let cfg = tiny_config();
    let arts = artifacts();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&cfg, &arts, a.path(), &RunOptions::default()).unwrap();
    let rb = run_experiment(&cfg, &arts, b.path(), &RunOptions::default()).unwrap();
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.report, rb.report);
    let log = |d: &tempfile::TempDir| fs::read(d.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log(&a), log(&b));
    let ck = |d: &tempfile::TempDir| fs::read(d.path().join(FINAL_FILE)).unwrap();
    assert_eq!(ck(&a), ck(&b));
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted() {
    let cfg = tiny_config();
    let arts = artifacts();
    let (full, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let whole = run_experiment(&cfg, &arts, full.path(), &RunOptions::default()).unwrap();
    assert_eq!(whole.steps, 6);

    // stop mid-epoch 1, then resume
    let stop = RunOptions {
        resume: false,
        stop_after_steps: Some(4),
    };
    let partial = run_experiment(&cfg, &arts, split.path(), &stop).unwrap();
    assert!(!partial.completed());
    assert_eq!(partial.steps, 4);
    let resume = RunOptions {
        resume: true,
        stop_after_steps: None,
    };
    let resumed = run_experiment(&cfg, &arts, split.path(), &resume).unwrap();
    assert_eq!(resumed.report, whole.report);
    for f in [METRICS_FILE, FINAL_FILE, CONFIG_ECHO_FILE] {
        assert_eq!(
            fs::read(full.path().join(f)).unwrap(),
            fs::read(split.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn resume_rejects_a_changed_config() {
    let cfg = tiny_config();
    let arts = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let stop = RunOptions {
        resume: false,
        stop_after_steps: Some(2),
    };
    run_experiment(&cfg, &arts, dir.path(), &stop).unwrap();
    let mut other = cfg.clone();
    other.optim.lr = 0.02;
    let resume = RunOptions {
        resume: true,
        stop_after_steps: None,
    };
    assert!(matches!(
        run_experiment(&other, &arts, dir.path(), &resume),
        Err(Error::Config(_))
    ));
}

#[test]
fn baseline_run_logs_config_echo_and_real_accuracy() {
    let mut cfg = tiny_config();
    cfg.loss.lambda_g = vec![0.0; 4];
    cfg.loss.lambda_ci = vec![0.0; 4];
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, &artifacts(), dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(out.epochs.len(), 2);

    let echo = fs::read_to_string(dir.path().join(CONFIG_ECHO_FILE)).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&echo).unwrap(), cfg);
    let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["kind"], "config");
    let echoed: ExperimentConfig = serde_json::from_value(lines[0]["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    assert!(lines.iter().all(|l| l["schema"] == 1));
    let epochs: Vec<&serde_json::Value> = lines.iter().filter(|l| l["kind"] == "epoch").collect();
    assert_eq!(epochs.len(), 2);
    for e in &epochs {
        let acc = e["real_acc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        // accuracies are exact count / n
        assert_eq!((acc * 12.0).round() / 12.0, acc);
    }
    assert!(epochs[1].get("cka").is_some() && epochs[1].get("match_rate").is_some());
    let steps = lines.iter().filter(|l| l["kind"] == "step").count();
    assert_eq!(steps, 6);
}

#[test]
fn divergence_writes_a_dump_and_fails() {
    let mut cfg = tiny_config();
    cfg.optim.lr = 1e150;
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, &artifacts(), dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(dir.path().join(DIVERGENCE_FILE).exists());
    let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(log.lines().last().unwrap().contains("\"divergence\""));
}

#[test]
fn missing_reference_head_is_a_missing_artifact() {
    let cfg = tiny_config();
    let mut arts = artifacts();
    arts.reference.head = None;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        run_experiment(&cfg, &arts, dir.path(), &RunOptions::default()),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn unbatched_tensor_helpers_are_consistent() {
    // views of the same seed/step are identical; different steps differ
    let b = bench();
    let cfg = tiny_config();
    let s = batch(&b, 0);
    let (a1, a2) = make_views(&s, cfg.seed, 3, &cfg.augment);
    let (b1, _) = make_views(&s, cfg.seed, 3, &cfg.augment);
    let (c1, _) = make_views(&s, cfg.seed, 4, &cfg.augment);
    assert_eq!(a1, b1);
    assert_ne!(a1, c1);
    assert_ne!(a1, a2);
    assert!(a1.iter().all(Tensor::is_finite));
}
