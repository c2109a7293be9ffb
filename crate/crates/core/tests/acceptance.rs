//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1–3 and 6 are always enforced. The seeded training experiments
//! behind criteria 4 and 5 are reported; set `GCISG_ACCEPT_STRICT=1` to make
//! their outcome fail the test as well.
//!
//! Environment knobs:
//! - `GCISG_ACCEPT_EPOCHS` – epochs per training run (default: the config
//!   default, 10).
//! - `GCISG_ACCEPT_REFERENCE` – path of a reference checkpoint to reuse; it
//!   is created there when missing.
//! - `GCISG_ACCEPT_STRICT` – gate criteria 4 and 5.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gcisg_core::encoder::{
    ema_update, input_batch, pretrain_reference, Checkpoint, Network, PretrainConfig,
};
use gcisg_core::gradcheck::run_suite;
use gcisg_core::guidance::{attention_map, guidance_loss, self_attention_pool, PoolOp, POOL_OPS};
use gcisg_core::invariance::{
    ci_pair_loss, infonce_loss, relational_distribution_values, CiKind, SupportQueue, Temperatures,
};
use gcisg_core::metrics::{cka_linear, MetricReport};
use gcisg_core::scm::{Benchmark, DatasetSpec, Sample};
use gcisg_core::trainer::run::METRICS_FILE;
use gcisg_core::trainer::state::make_views;
use gcisg_core::trainer::{run_experiment, total_loss, train_step, Artifacts, ExperimentConfig, RunOptions, TrainState};
use gcisg_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Verdict {
    criterion: u32,
    title: &'static str,
    pass: bool,
    gated: bool,
    details: Vec<String>,
}

/// Named boolean checks with a description each.
#[derive(Default)]
struct Checks(Vec<(bool, String)>);

impl Checks {
    fn add(&mut self, ok: bool, what: impl Into<String>) {
        self.0.push((ok, what.into()));
    }

    fn close(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        let ok = (got - want).abs() <= tol;
        self.add(ok, format!("{what}: {got:.9} vs {want:.9} (tol {tol:e})"));
    }

    fn all(&self) -> bool {
        self.0.iter().all(|(ok, _)| *ok)
    }

    fn lines(&self) -> Vec<String> {
        self.0
            .iter()
            .map(|(ok, w)| format!("{} {w}", if *ok { "ok  " } else { "FAIL" }))
            .collect()
    }
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn queue(rows: &[&[f64]]) -> SupportQueue {
    let mut q = SupportQueue::new(rows.len(), rows[0].len()).unwrap();
    q.enqueue(&Tensor::from_rows(rows)).unwrap();
    q
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut x = Tensor::randn(&[n, d], 1.0, rng);
    for r in x.data_mut().chunks_mut(d) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= norm);
    }
    x
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut checks = Checks::default();
    let mut worst = 0.0f64;
    let mut targets = 0;
    for seed in 0..3 {
        let r = run_suite(seed);
        targets = r.rows.len();
        for row in &r.rows {
            worst = worst.max(row.max_rel_error);
            if !row.passed() {
                checks.add(false, format!("seed {seed}: {} rel. error {:.3e}", row.name, row.max_rel_error));
            }
        }
    }
    let elapsed = start.elapsed();
    checks.add(targets >= 12, format!("{targets} targets checked"));
    checks.add(worst < 1e-3, format!("worst relative error {worst:.3e} < 1e-3 over 3 seeds"));
    checks.add(elapsed < Duration::from_secs(60), format!("runtime {:.2}s < 60s", elapsed.as_secs_f64()));
    Verdict {
        criterion: 1,
        title: "gradient suite",
        pass: checks.all(),
        gated: true,
        details: checks.lines(),
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Verdict {
    let mut c = Checks::default();
    let e = std::f64::consts::E;

    let q = queue(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let p = relational_distribution_values(&t(&[1, 2], &[1.0, 0.0]), &q, 1.0).unwrap();
    c.close("relational p(τ=1)[0]", p.data()[0], e / (1.0 + e), 1e-6);
    c.close("relational p(τ=1)[0] printed", p.data()[0], 0.73106, 1e-5);
    c.close("relational p(τ=1)[1] printed", p.data()[1], 0.26894, 1e-5);
    let p = relational_distribution_values(&t(&[1, 2], &[1.0, 0.0]), &q, 0.12).unwrap();
    c.close("relational p(τ=0.12)[0]", p.data()[0], 1.0 / (1.0 + (-1.0f64 / 0.12).exp()), 1e-6);
    c.close("relational p(τ=0.12)[0] printed", p.data()[0], 0.99976, 1e-5);

    // ℓ_CI, K=2, both similarity vectors [1, 0], τ=1, τ̄=0.1
    let tape = Tape::new();
    let z = tape.param(t(&[1, 2], &[1.0, 0.0]));
    let zb = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let temps = Temperatures { tau: 1.0, tau_bar: 0.1 };
    let loss = ci_pair_loss(&z, &zb, &q, temps).unwrap().item();
    let target = [1.0 / (1.0 + (-10.0f64).exp()), (-10.0f64).exp() / (1.0 + (-10.0f64).exp())];
    let log_p = [-(1.0 + (-1.0f64).exp()).ln(), -1.0 - (1.0 + (-1.0f64).exp()).ln()];
    let closed = -(target[0] * log_p[0] + target[1] * log_p[1]);
    c.close("ℓ_CI K=2 (closed form)", loss, closed, 1e-6);
    c.close("ℓ_CI target[0]", target[0], 0.999955, 1e-6);
    let printed = 0.31336;
    c.add(
        true,
        format!(
            "ℓ_CI K=2 printed example {printed} differs from the closed form by {:.1e} (arithmetic slip in the example; not gated)",
            (closed - printed).abs()
        ),
    );

    // InfoNCE with orthogonal negatives: −log(e/(e+2))
    let tape = Tape::new();
    let q3 = queue(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    let z = tape.param(t(&[1, 3], &[1.0, 0.0, 0.0]));
    let infonce = infonce_loss(&z, &z, &q3, 1.0).unwrap().item();
    c.close("InfoNCE", infonce, -(e / (e + 2.0)).ln(), 1e-6);
    c.close("InfoNCE printed", infonce, 0.55144, 1e-5);

    // attention map and self-attention pooling
    let tape = Tape::new();
    let v = tape.param(t(&[1, 2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 2.0]));
    let a = attention_map(&v).unwrap();
    for (i, want) in [4.5, 4.0, 4.0, 4.5].iter().enumerate() {
        c.close(&format!("attention a[{i}]"), a.value().data()[i], want / 17.0, 1e-6);
    }
    let sap = self_attention_pool(&v).unwrap();
    c.close("SAP[0]", sap.value().data()[0], 9.0 / 17.0, 1e-6);
    c.close("SAP[0] printed", sap.value().data()[0], 0.52941, 1e-5);
    c.close("SAP[1]", sap.value().data()[1], 2.0, 1e-6);

    // guidance loss: identical 0, orthogonal 2, opposite 4
    let tape = Tape::new();
    let a = tape.param(t(&[1, 2, 1, 1], &[1.0, 0.0]));
    let b = tape.constant(t(&[1, 2, 1, 1], &[0.0, 1.0]));
    let neg = tape.constant(t(&[1, 2, 1, 1], &[-1.0, 0.0]));
    c.close("guidance identical", guidance_loss(&a, &a, PoolOp::Gap).unwrap().item(), 0.0, 1e-12);
    c.close("guidance orthogonal", guidance_loss(&a, &b, PoolOp::Gap).unwrap().item(), 2.0, 1e-12);
    c.close("guidance opposite", guidance_loss(&a, &neg, PoolOp::Np).unwrap().item(), 4.0, 1e-12);

    // EMA single-parameter example
    let m = 0.996;
    c.close("EMA θ̄=0, θ=1", m * 0.0 + (1.0 - m) * 1.0, 0.004, 1e-12);

    Verdict {
        criterion: 2,
        title: "exact oracles",
        pass: c.all(),
        gated: true,
        details: c.lines(),
    }
}

// ---------------------------------------------------------------- criterion 3

/// Linear CKA through explicit Gram matrices and a centring matrix.
fn hsic_cka(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.shape()[0];
    let gram = |m: &Tensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum()).collect())
            .collect()
    };
    let h = |i: usize, j: usize| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
    let center = |k: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut hk = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                hk[i][j] = (0..n).map(|l| h(i, l) * k[l][j]).sum();
            }
        }
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = (0..n).map(|l| hk[i][l] * h(l, j)).sum();
            }
        }
        out
    };
    let (kx, ky) = (center(&gram(x)), center(&gram(y)));
    let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        (0..n).map(|i| (0..n).map(|j| a[i][j] * b[j][i]).sum::<f64>()).sum()
    };
    hsic(&kx, &ky) / (hsic(&kx, &kx) * hsic(&ky, &ky)).sqrt()
}

fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v = Tensor::randn(&[d], 1.0, rng).into_data();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.iter().map(|a| a / norm).collect());
    }
    let mut data = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * d + j] = c[i];
        }
    }
    t(&[d, d], &data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a.data()[i * k + l] * b.data()[l * m + j]).sum();
        }
    }
    t(&[n, m], &out)
}

fn criterion_3(arts: &Artifacts) -> Verdict {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // probability normalisation
    let mut worst: f64 = 0.0;
    for tau in [0.04, 0.12, 1.0, 5.0] {
        let q = {
            let mut q = SupportQueue::new(64, 16).unwrap();
            q.enqueue(&unit_rows(64, 16, &mut rng)).unwrap();
            q
        };
        let p = relational_distribution_values(&unit_rows(32, 16, &mut rng), &q, tau).unwrap();
        for r in p.data().chunks(64) {
            worst = worst.max((r.iter().sum::<f64>() - 1.0).abs());
        }
    }
    c.add(worst <= 1e-12, format!("relational rows sum to 1 (worst {worst:.1e} ≤ 1e-12)"));

    // queue FIFO / capacity
    let mut q = SupportQueue::new(5, 2).unwrap();
    let rows = unit_rows(7, 2, &mut rng);
    q.enqueue(&t(&[3, 2], &rows.data()[..6])).unwrap();
    q.enqueue(&t(&[4, 2], &rows.data()[6..])).unwrap();
    c.add(
        q.fill() == 5 && q.snapshot().data() == &rows.data()[4..],
        "queue keeps the newest K entries, oldest first",
    );

    // EMA law
    for m in [0.0, 0.996, 1.0] {
        let online = Network::classifier(6, 1).without_head();
        let mut target = Network::classifier(6, 2).without_head();
        let before = target.clone();
        ema_update(&mut target, &online, m).unwrap();
        let ok = target
            .tensors()
            .iter()
            .zip(before.tensors())
            .zip(online.tensors())
            .all(|(((_, a), (_, b)), (_, o))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .zip(o.data())
                    .all(|((x, y), z)| *x == m * y + (1.0 - m) * z)
            });
        c.add(ok, format!("EMA law exact at m={m}"));
    }

    // guidance range and bi-scale invariance; SAP == GAP on constant maps
    let (mut in_range, mut invariant) = (true, 0.0f64);
    for op in POOL_OPS {
        for _ in 0..20 {
            let fs = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng).map(f64::abs);
            let fr = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng).map(f64::abs);
            let tape = Tape::new();
            let g = |a: &Tensor, b: &Tensor| {
                guidance_loss(&tape.param(a.clone()), &tape.constant(b.clone()), op).unwrap().item()
            };
            let base = g(&fs, &fr);
            in_range &= (0.0..=4.0).contains(&base);
            let scaled = g(&fs.map(|x| 3.0 * x), &fr.map(|x| 0.25 * x));
            invariant = invariant.max((scaled - base).abs() / base.max(1e-12));
        }
    }
    c.add(in_range, "guidance loss within [0, 4] for all five pooling operators");
    c.add(invariant < 1e-10, format!("guidance bi-scale invariance (worst rel. change {invariant:.1e})"));
    let mut consts = vec![0.0; 3 * 16];
    for (ch, v) in [0.7, 2.0, 0.1].iter().enumerate() {
        consts[ch * 16..(ch + 1) * 16].iter_mut().for_each(|x| *x = *v);
    }
    let tape = Tape::new();
    let cm = tape.param(t(&[1, 3, 4, 4], &consts));
    let sap = self_attention_pool(&cm).unwrap().value();
    let gap_equal = sap
        .data()
        .iter()
        .zip([0.7, 2.0, 0.1])
        .all(|(a, b)| (a - b).abs() <= 1e-12 * b);
    c.add(gap_equal, "SAP equals GAP on constant maps");

    // CKA axioms
    let x = Tensor::randn(&[40, 8], 1.0, &mut rng);
    let y = Tensor::randn(&[40, 8], 1.0, &mut rng);
    c.close("CKA(X, X)", cka_linear(&x, &x).unwrap(), 1.0, 1e-10);
    let base = cka_linear(&x, &y).unwrap();
    let rot = cka_linear(&matmul(&x, &orthogonal(8, &mut rng)), &y).unwrap();
    c.close("CKA orthogonal invariance", rot, base, 1e-8);
    c.close("CKA isotropic scale invariance", cka_linear(&x.map(|v| -2.5 * v), &y).unwrap(), base, 1e-8);
    c.add(cka_linear(&y, &x).unwrap() == base, "CKA symmetric");
    let (a, b) = (Tensor::randn(&[8, 4], 1.0, &mut rng), Tensor::randn(&[8, 4], 1.0, &mut rng));
    c.close("CKA vs independent HSIC oracle", cka_linear(&a, &b).unwrap(), hsic_cka(&a, &b), 1e-10);

    // gradient isolation and dense grid 1 == global, on the real model
    let mut cfg = ExperimentConfig::default();
    cfg.loss.queue_size = 64;
    let mut state = TrainState::new(&cfg, &arts.reference).unwrap();
    let batch: Vec<&Sample> = arts.train[..32].iter().collect();
    train_step(&mut state, &cfg, &batch).unwrap();
    let next: Vec<&Sample> = arts.train[32..64].iter().collect();
    let losses = |cfg: &ExperimentConfig, isolation: bool| {
        let (v1, v2) = make_views(&next, cfg.seed, state.step, &cfg.augment);
        let labels: Vec<usize> = next.iter().map(|s| s.label).collect();
        let tape = Tape::new();
        let online = state.pair.online.bind(&tape, true);
        let target = state.pair.target.bind(&tape, false);
        let reference = state.pair.reference.bind(&tape, false);
        let x1 = tape.constant(input_batch(&v1.iter().collect::<Vec<_>>()).unwrap());
        let x2 = tape.constant(input_batch(&v2.iter().collect::<Vec<_>>()).unwrap());
        let (l, b, _) = total_loss(cfg, &state, &online, &target, &reference, &x1, &x2, &labels).unwrap();
        let grads = tape.backward(l).unwrap();
        let isolated = target.grad_slots(&grads).iter().all(Option::is_none)
            && reference.grad_slots(&grads).iter().all(Option::is_none);
        (b, isolated || !isolation)
    };
    let (global, isolated) = losses(&cfg, true);
    c.add(isolated && global.ci[3] > 0.0, "reference and target receive no gradient (CI and guidance active)");
    let mut dense = cfg.clone();
    dense.loss.dense = true;
    dense.loss.dense_grid = 1;
    let (d, _) = losses(&dense, false);
    let diff = global
        .ci
        .iter()
        .zip(d.ci)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    c.add(diff <= 1e-12, format!("dense invariance with a 1×1 grid equals global invariance ({diff:.1e})"));

    Verdict {
        criterion: 3,
        title: "invariant suites",
        pass: c.all(),
        gated: true,
        details: c.lines(),
    }
}

// ---------------------------------------------------------- criteria 4 and 5

fn epochs() -> usize {
    std::env::var("GCISG_ACCEPT_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(ExperimentConfig::default().optim.epochs)
}

/// Configurations of the directional experiment and the ablation orderings.
fn experiment_configs() -> Vec<(&'static str, ExperimentConfig)> {
    let mut full = ExperimentConfig::default();
    full.optim.epochs = epochs();
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", full.clone()),
        ("task-only", with(&|c| {
            c.loss.lambda_g = vec![0.0; 4];
            c.loss.lambda_ci = vec![0.0; 4];
        })),
        ("no-guidance", with(&|c| c.loss.lambda_g = vec![0.0; 4])),
        ("pool-gap", with(&|c| c.guidance.pool = PoolOp::Gap)),
        ("pool-np", with(&|c| c.guidance.pool = PoolOp::Np)),
        ("taubar-0.12", with(&|c| c.loss.tau_bar = 0.12)),
        ("infonce", with(&|c| c.loss.ci_kind = CiKind::Infonce)),
        ("shallow-1-2", with(&|c| {
            c.loss.lambda_g = vec![1.0, 1.0, 0.0, 0.0];
            c.loss.lambda_ci = vec![1.0, 1.0, 0.0, 0.0];
        })),
    ]
}

struct Runs {
    reports: BTreeMap<&'static str, Vec<MetricReport>>,
    slowest: Duration,
    failures: Vec<String>,
}

impl Runs {
    fn mean(&self, name: &str, f: fn(&MetricReport) -> f64) -> f64 {
        let r = &self.reports[name];
        r.iter().map(f).sum::<f64>() / r.len() as f64
    }
}

fn run_all(arts: &Artifacts, root: &Path) -> Runs {
    let mut reports = BTreeMap::new();
    let mut slowest = Duration::ZERO;
    let mut failures = Vec::new();
    for (name, base) in experiment_configs() {
        let mut got = Vec::new();
        for seed in SEEDS {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let start = Instant::now();
            match run_experiment(&cfg, arts, &root.join(name).join(format!("seed{seed}")), &RunOptions::default()) {
                Ok(out) => got.push(out.report.expect("completed run reports")),
                Err(e) => failures.push(format!("{name} seed {seed}: {e}")),
            }
            let took = start.elapsed();
            slowest = slowest.max(took);
            eprintln!("  run {name:<12} seed {seed}: {:.1}s", took.as_secs_f64());
        }
        reports.insert(name, got);
    }
    Runs {
        reports,
        slowest,
        failures,
    }
}

fn table(runs: &Runs) -> Vec<String> {
    let mut out = vec![format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9}   (means over seeds {SEEDS:?}, {} epochs)",
        "config",
        "real_acc",
        "match",
        "cka",
        "ref_head",
        epochs()
    )];
    for name in runs.reports.keys() {
        if runs.reports[name].is_empty() {
            out.push(format!("{name:<12} (all runs failed)"));
            continue;
        }
        out.push(format!(
            "{name:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            runs.mean(name, |r| r.real_acc),
            runs.mean(name, |r| r.match_rate),
            runs.mean(name, |r| r.cka),
            runs.mean(name, |r| r.ref_head_acc)
        ));
    }
    out
}

fn criterion_4(runs: &Runs, strict: bool) -> Verdict {
    let mut c = Checks::default();
    c.add(runs.failures.is_empty(), format!("all runs completed {:?}", runs.failures));
    c.add(
        runs.slowest <= RUN_BUDGET,
        format!("slowest run {:.0}s ≤ 15 min", runs.slowest.as_secs_f64()),
    );
    let complete = ["full", "task-only", "no-guidance"]
        .iter()
        .all(|n| runs.reports[n].len() == SEEDS.len());
    if complete {
        let acc = |n| runs.mean(n, |r| r.real_acc);
        let gain = acc("full") - acc("task-only");
        c.add(
            gain >= 0.03,
            format!(
                "(a) full − task-only real accuracy = {:+.2} points (need ≥ +3)",
                100.0 * gain
            ),
        );
        let (mf, mb) = (runs.mean("full", |r| r.match_rate), runs.mean("task-only", |r| r.match_rate));
        c.add(mf > mb, format!("(b) match rate full {mf:.4} > task-only {mb:.4}"));
        let (kf, kn) = (runs.mean("full", |r| r.cka), runs.mean("no-guidance", |r| r.cka));
        c.add(kf > kn, format!("(c) CKA λ_G=1 {kf:.4} > λ_G=0 {kn:.4}"));
        let (hf, hn) = (
            runs.mean("full", |r| r.ref_head_acc),
            runs.mean("no-guidance", |r| r.ref_head_acc),
        );
        c.add(hf > hn, format!("(c) reference-head accuracy λ_G=1 {hf:.4} > λ_G=0 {hn:.4}"));
    }
    let mut details = table(runs);
    details.extend(c.lines());
    Verdict {
        criterion: 4,
        title: "directional desk-scale experiment",
        pass: complete && c.all(),
        gated: strict,
        details,
    }
}

fn criterion_5(runs: &Runs, strict: bool) -> Verdict {
    let acc = |n: &str| {
        if runs.reports[n].len() == SEEDS.len() {
            runs.mean(n, |r| r.real_acc)
        } else {
            f64::NAN
        }
    };
    let orderings = [
        (
            "SAP ≥ GAP and SAP ≥ NP",
            acc("full") >= acc("pool-gap") && acc("full") >= acc("pool-np"),
            format!("{:.4} vs {:.4} / {:.4}", acc("full"), acc("pool-gap"), acc("pool-np")),
        ),
        (
            "τ̄=0.04 ≥ τ̄=τ=0.12",
            acc("full") >= acc("taubar-0.12"),
            format!("{:.4} vs {:.4}", acc("full"), acc("taubar-0.12")),
        ),
        (
            "relational ≥ InfoNCE",
            acc("full") >= acc("infonce"),
            format!("{:.4} vs {:.4}", acc("full"), acc("infonce")),
        ),
        (
            "deep stages ≥ shallow stages",
            acc("full") >= acc("shallow-1-2"),
            format!("{:.4} vs {:.4}", acc("full"), acc("shallow-1-2")),
        ),
    ];
    let held = orderings.iter().filter(|o| o.1).count();
    let mut details: Vec<String> = orderings
        .iter()
        .map(|(name, ok, d)| format!("{} {name}: {d}", if *ok { "ok  " } else { "miss" }))
        .collect();
    details.push(format!("{held}/4 orderings hold (gate: ≥ 3)"));
    Verdict {
        criterion: 5,
        title: "ablation orderings",
        pass: held >= 3,
        gated: strict,
        details,
    }
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(arts: &Artifacts, root: &Path) -> Verdict {
    let mut c = Checks::default();
    let mut cfg = ExperimentConfig::default();
    cfg.optim.epochs = 2;
    cfg.seed = 11;
    let go = |dir: &str, opts: RunOptions| run_experiment(&cfg, arts, &root.join(dir), &opts).unwrap();
    let a = go("a", RunOptions::default());
    let b = go("b", RunOptions::default());
    let read = |dir: &str, f: &str| fs::read(root.join(dir).join(f)).unwrap();
    c.add(
        read("a", METRICS_FILE) == read("b", METRICS_FILE) && a.report == b.report,
        "fixed-seed reruns give bit-identical metrics logs",
    );
    let per_epoch = arts.train.len().div_ceil(cfg.optim.batch_size) as u64;
    let stop = per_epoch + 7;
    let partial = go(
        "r",
        RunOptions {
            resume: false,
            stop_after_steps: Some(stop),
        },
    );
    let resumed = go(
        "r",
        RunOptions {
            resume: true,
            stop_after_steps: None,
        },
    );
    c.add(!partial.completed() && partial.steps == stop, format!("run interrupted at step {stop}"));
    c.add(
        read("a", METRICS_FILE) == read("r", METRICS_FILE),
        "interrupted + resumed metrics log is bit-identical",
    );
    c.add(
        read("a", "final.gckp") == read("r", "final.gckp") && resumed.report == a.report,
        "interrupted + resumed final checkpoint and report are bit-identical",
    );
    Verdict {
        criterion: 6,
        title: "determinism and resume",
        pass: c.all(),
        gated: true,
        details: c.lines(),
    }
}

// ---------------------------------------------------------------- harness

fn reference(bench: &Benchmark) -> Network {
    let cached = std::env::var("GCISG_ACCEPT_REFERENCE").ok().map(PathBuf::from);
    if let Some(p) = cached.as_ref().filter(|p| p.exists()) {
        eprintln!("reusing reference {}", p.display());
        return Network::import("reference", &Checkpoint::load(p).unwrap()).unwrap();
    }
    let start = Instant::now();
    let (net, report) = pretrain_reference(&bench.pretext_train, &bench.pretext_val, &PretrainConfig::default())
        .expect("reference pretraining");
    eprintln!(
        "reference pretext accuracy {:.4} in {:.0}s",
        report.final_accuracy,
        start.elapsed().as_secs_f64()
    );
    if let Some(p) = cached {
        let mut ck = Checkpoint::new();
        net.export("reference", &mut ck);
        ck.save(p).unwrap();
    }
    net
}

#[test]
fn acceptance() {
    let strict = std::env::var("GCISG_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();

    let mut verdicts = vec![criterion_1(), criterion_2()];
    let bench = Benchmark::generate(&DatasetSpec::default());
    let arts = Artifacts::from_benchmark(&bench, reference(&bench));
    verdicts.push(criterion_3(&arts));
    let runs = run_all(&arts, &root.join("runs"));
    verdicts.push(criterion_4(&runs, strict));
    verdicts.push(criterion_5(&runs, strict));
    verdicts.push(criterion_6(&arts, &root.join("resume")));

    println!();
    for v in &verdicts {
        println!("--- criterion {}: {}", v.criterion, v.title);
        for d in &v.details {
            println!("    {d}");
        }
    }
    println!();
    for v in &verdicts {
        let gate = if v.gated { "" } else { " (reported, not gated)" };
        println!(
            "criterion {}: {} — {}{gate}",
            v.criterion,
            if v.pass { "PASS" } else { "FAIL" },
            v.title
        );
    }
    let gated_failures: Vec<u32> = verdicts.iter().filter(|v| v.gated && !v.pass).map(|v| v.criterion).collect();
    assert!(gated_failures.is_empty(), "gated criteria failed: {gated_failures:?}");
}
