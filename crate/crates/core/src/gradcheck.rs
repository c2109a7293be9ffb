//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both
/// vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Evaluate `f` on fresh leaves and return `(analytic, numeric)` gradients
/// for every input, concatenated in input order.
pub fn gradients<F>(f: F, inputs: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| grads.wrt(*v).into_data())
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.param(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok((analytic, numeric))
}

/// Relative error between analytic and central-difference gradients.
pub fn check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (a, n) = gradients(f, inputs)?;
    Ok(relative_error(&a, &n))
}

/// Pass threshold of the suite.
pub const TOLERANCE: f64 = 1e-3;
/// Random draws per target; the worst one is reported.
const TRIALS: u64 = 3;

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::guidance::{self, PoolOp};
use crate::invariance::{self, CiKind, SupportQueue, Temperatures};
use crate::scm::mix;

/// One line of the suite report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    /// Worst relative error over the trials; infinite when a trial errored.
    pub max_rel_error: f64,
    pub error: Option<String>,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn failures(&self) -> Vec<&CheckRow> {
        self.rows.iter().filter(|r| !r.passed()).collect()
    }

    pub fn row(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width table, one target per line, then a summary line.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.rows {
            let status = if r.passed() { "ok" } else { "FAIL" };
            let detail = r.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default();
            out.push_str(&format!("{:<width$}  {:>10.3e}  {status}{detail}\n", r.name, r.max_rel_error));
        }
        out.push_str(&format!(
            "{} targets, {} failed, tolerance {TOLERANCE:e}, {:.2}s\n",
            self.rows.len(),
            self.failures().len(),
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

type TargetFn = fn(&mut ChaCha8Rng, &Variant) -> Result<f64>;

/// Knobs for negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Variant {
    /// Replace self-attention pooling in the guidance loss by a copy whose
    /// attention map is detached from the graph.
    pub corrupt_sap: bool,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).map(|x| 0.5 + x.abs())
}

/// `Σ f(x) ⊙ w` for a fixed random `w`, so the probe sees a generic
/// cotangent rather than all-ones.
fn weighted<'t>(v: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(v.mul(&v.tape().constant(w.clone()))?.sum())
}

fn unary(x: Tensor, f: for<'t> fn(&Var<'t>) -> Result<Var<'t>>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let probe = {
        let tape = Tape::new();
        f(&tape.constant(x.clone()))?.shape()
    };
    let w = randn(&probe, rng);
    check(|_, v| weighted(f(&v[0])?, &w), &[x])
}

fn binary(
    a: Tensor,
    b: Tensor,
    f: for<'t> fn(&Var<'t>, &Var<'t>) -> Result<Var<'t>>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let probe = {
        let tape = Tape::new();
        f(&tape.constant(a.clone()), &tape.constant(b.clone()))?.shape()
    };
    let w = randn(&probe, rng);
    check(|_, v| weighted(f(&v[0], &v[1])?, &w), &[a, b])
}

fn unit_queue(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<SupportQueue> {
    let mut q = SupportQueue::new(k, d)?;
    q.enqueue(&unit_rows(k, d, rng))?;
    Ok(q)
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(&[n, d], rng);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

fn guidance_target(rng: &mut ChaCha8Rng, variant: &Variant, op: PoolOp) -> Result<f64> {
    let fs = randn(&[1, 4, 5, 5], rng);
    let fr = randn(&[1, 4, 5, 5], rng);
    if op == PoolOp::Sap && variant.corrupt_sap {
        return check(
            |t, v| {
                let r = t.constant(fr.clone());
                guidance::guidance_loss_with(&v[0], &r, guidance::self_attention_pool_detached_attention)
            },
            &[fs],
        );
    }
    check(
        |t, v| guidance::guidance_loss(&v[0], &t.constant(fr.clone()), op),
        &[fs],
    )
}

fn dense_z<'t>(m: &Var<'t>) -> Result<Var<'t>> {
    invariance::patch_features(m, 2)?.l2_normalize()
}

const TEMPS: Temperatures = Temperatures { tau: 0.5, tau_bar: 0.3 };

fn targets() -> Vec<(&'static str, TargetFn)> {
    vec![
        ("add", |r, _| binary(randn(&[3, 4], r), randn(&[3, 4], r), |a, b| a.add(b), r)),
        ("sub", |r, _| binary(randn(&[3, 4], r), randn(&[3, 4], r), |a, b| a.sub(b), r)),
        ("mul", |r, _| binary(randn(&[3, 4], r), randn(&[3, 4], r), |a, b| a.mul(b), r)),
        ("scale+neg+add_scalar", |r, _| {
            unary(randn(&[3, 4], r), |a| Ok(a.scale(1.7).neg().add_scalar(0.3)), r)
        }),
        ("mul_scalar", |r, _| binary(randn(&[3, 4], r), randn(&[1], r), |a, s| a.mul_scalar(s), r)),
        ("relu", |r, _| unary(randn(&[4, 5], r), |a| Ok(a.relu()), r)),
        ("exp", |r, _| unary(randn(&[3, 4], r), |a| Ok(a.exp()), r)),
        ("log", |r, _| unary(positive(&[3, 4], r), |a| Ok(a.log()), r)),
        ("sum", |r, _| unary(randn(&[3, 4], r), |a| Ok(a.sum().scale(1.3)), r)),
        ("mean", |r, _| unary(randn(&[3, 4], r), |a| Ok(a.mul(a)?.mean()), r)),
        ("sum_axis", |r, _| unary(randn(&[2, 3, 4], r), |a| a.sum_axis(1), r)),
        ("mean_axis", |r, _| unary(randn(&[2, 3, 4], r), |a| a.mean_axis(2), r)),
        ("reshape", |r, _| unary(randn(&[2, 6], r), |a| a.reshape(&[3, 4]), r)),
        ("transpose", |r, _| unary(randn(&[2, 3, 4], r), |a| a.transpose(), r)),
        ("matmul", |r, _| binary(randn(&[3, 4], r), randn(&[4, 2], r), |a, b| a.matmul(b), r)),
        ("matmul_batched", |r, _| {
            binary(randn(&[2, 3, 4], r), randn(&[2, 4, 2], r), |a, b| a.matmul(b), r)
        }),
        ("matmul_shared_rhs", |r, _| {
            binary(randn(&[2, 3, 4], r), randn(&[4, 2], r), |a, b| a.matmul(b), r)
        }),
        ("softmax", |r, _| unary(randn(&[3, 5], r), |a| Ok(a.softmax()), r)),
        ("log_softmax", |r, _| unary(randn(&[3, 5], r), |a| Ok(a.log_softmax()), r)),
        ("l2_normalize", |r, _| unary(randn(&[3, 5], r), |a| a.l2_normalize(), r)),
        ("sum_normalize", |r, _| unary(positive(&[3, 5], r), |a| a.sum_normalize(), r)),
        ("conv2d", |r, _| {
            binary(randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r), |x, w| x.conv2d(w, 1, 1), r)
        }),
        ("conv2d_strided", |r, _| {
            binary(randn(&[1, 2, 6, 6], r), randn(&[2, 2, 3, 3], r), |x, w| x.conv2d(w, 2, 1), r)
        }),
        ("add_channel_bias", |r, _| {
            binary(randn(&[2, 3, 2, 2], r), randn(&[3], r), |x, b| x.add_channel_bias(b), r)
        }),
        ("avg_pool2d", |r, _| unary(randn(&[1, 2, 4, 4], r), |a| a.avg_pool2d(2), r)),
        ("slice", |r, _| unary(randn(&[3, 5], r), |a| a.slice(1, 1, 3), r)),
        ("concat", |r, _| {
            binary(randn(&[2, 3], r), randn(&[2, 2], r), |a, b| Var::concat(&[*a, *b], 1), r)
        }),
        ("task_loss", |r, _| {
            let logits = randn(&[4, 6], r);
            check(|_, v| crate::trainer::task_loss(&v[0], &[0, 5, 2, 2]), &[logits])
        }),
        ("ci_pair_loss", |r, _| {
            let q = unit_queue(6, 4, r)?;
            let (z, zb) = (randn(&[3, 4], r), unit_rows(3, 4, r));
            check(
                |t, v| invariance::ci_pair_loss(&v[0].l2_normalize()?, &t.constant(zb.clone()), &q, TEMPS),
                &[z],
            )
        }),
        ("symmetric_ci_loss", |r, _| {
            let q = unit_queue(6, 4, r)?;
            let (z1, z2) = (randn(&[3, 4], r), randn(&[3, 4], r));
            let (b1, b2) = (unit_rows(3, 4, r), unit_rows(3, 4, r));
            check(
                |t, v| {
                    invariance::symmetric_ci_loss(
                        &v[0].l2_normalize()?,
                        &t.constant(b1.clone()),
                        &v[1].l2_normalize()?,
                        &t.constant(b2.clone()),
                        &q,
                        TEMPS,
                        CiKind::Relational,
                    )
                },
                &[z1, z2],
            )
        }),
        ("dense_ci_loss", |r, _| {
            let q = unit_queue(6, 3, r)?;
            let (m1, m2) = (randn(&[2, 3, 4, 4], r), randn(&[2, 3, 4, 4], r));
            let (t1, t2) = (randn(&[2, 3, 4, 4], r), randn(&[2, 3, 4, 4], r));
            check(
                |t, v| {
                    let zb1 = dense_z(&t.constant(t1.clone()))?;
                    let zb2 = dense_z(&t.constant(t2.clone()))?;
                    invariance::symmetric_ci_loss(&dense_z(&v[0])?, &zb1, &dense_z(&v[1])?, &zb2, &q, TEMPS, CiKind::Relational)
                },
                &[m1, m2],
            )
        }),
        ("infonce_loss", |r, _| {
            let q = unit_queue(6, 4, r)?;
            let (z, zp) = (randn(&[3, 4], r), unit_rows(3, 4, r));
            check(
                |t, v| invariance::infonce_loss(&v[0].l2_normalize()?, &t.constant(zp.clone()), &q, 0.5),
                &[z],
            )
        }),
        ("attention_map", |r, _| unary(positive(&[1, 3, 4, 4], r), guidance::attention_map, r)),
        ("guidance_np", |r, v| guidance_target(r, v, PoolOp::Np)),
        ("guidance_gap", |r, v| guidance_target(r, v, PoolOp::Gap)),
        ("guidance_cp", |r, v| guidance_target(r, v, PoolOp::Cp)),
        ("guidance_sp", |r, v| guidance_target(r, v, PoolOp::Sp)),
        ("guidance_sap", |r, v| guidance_target(r, v, PoolOp::Sap)),
    ]
}

/// Names of every target, in report order.
pub fn target_names() -> Vec<&'static str> {
    targets().into_iter().map(|(n, _)| n).collect()
}

/// Run every target on fresh random inputs derived from `seed`.
pub fn run_suite(seed: u64) -> SuiteReport {
    run_suite_variant(seed, Variant::default())
}

pub fn run_suite_variant(seed: u64, variant: Variant) -> SuiteReport {
    let start = Instant::now();
    let rows = targets()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut worst = 0.0f64;
            let mut error = None;
            for trial in 0..TRIALS {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, i as u64), trial));
                match f(&mut rng, &variant) {
                    Ok(e) if e.is_finite() => worst = worst.max(e),
                    Ok(_) => worst = f64::INFINITY,
                    Err(e) => {
                        worst = f64::INFINITY;
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            CheckRow {
                name: name.to_string(),
                max_rel_error: worst,
                error,
            }
        })
        .collect();
    SuiteReport {
        rows,
        elapsed: start.elapsed(),
    }
}
