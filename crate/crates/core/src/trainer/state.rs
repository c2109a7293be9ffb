//! Training state, the composite objective and one optimisation step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::optim::Sgd;
use super::task_loss;
use crate::encoder::{
    ema_update, global_avg_pool, input_batch, BoundNetwork, Checkpoint, Linear, ModelPair, Network, Projector,
    StagedEncoder, EMBED_DIM, N_STAGES, STAGE_CHANNELS,
};
use crate::error::{Error, Result};
use crate::guidance::guidance_loss;
use crate::invariance::{dense_projections, SupportQueue, ViewProjections};
use crate::par;
use crate::scm::{mix, strong_augment, Domain, Sample};
use crate::tensor::{Tape, Tensor, Var};

/// Loss terms of one step. Stage arrays are indexed by stage − 1 and hold
/// unweighted values; skipped terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub guidance: [f64; N_STAGES],
    pub ci: [f64; N_STAGES],
}

impl LossBreakdown {
    /// `task + Σ λ_G·g + Σ λ_CI·ci`, recomputed from the parts.
    pub fn reconstruct(&self, lambda_g: &[f64], lambda_ci: &[f64]) -> f64 {
        let mut total = self.task;
        for l in 0..N_STAGES {
            total += lambda_g[l] * self.guidance[l];
        }
        for l in 0..N_STAGES {
            total += lambda_ci[l] * self.ci[l];
        }
        total
    }

    /// Flattened `[total, task, g1..g4, ci1..ci4]`.
    pub fn to_array(&self) -> [f64; 2 + 2 * N_STAGES] {
        let mut out = [0.0; 2 + 2 * N_STAGES];
        out[0] = self.total;
        out[1] = self.task;
        out[2..2 + N_STAGES].copy_from_slice(&self.guidance);
        out[2 + N_STAGES..].copy_from_slice(&self.ci);
        out
    }

    pub fn from_array(a: &[f64]) -> Self {
        let mut b = Self {
            total: a[0],
            task: a[1],
            ..Self::default()
        };
        b.guidance.copy_from_slice(&a[2..2 + N_STAGES]);
        b.ci.copy_from_slice(&a[2 + N_STAGES..2 + 2 * N_STAGES]);
        b
    }
}

/// Everything a run needs to continue bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub pair: ModelPair,
    pub opt: Sgd,
    /// Support queue per invariance stage.
    pub queues: Vec<(usize, SupportQueue)>,
    /// Optimisation steps taken.
    pub step: u64,
    /// Running sums of the current epoch's loss terms.
    pub epoch_sums: [f64; 2 + 2 * N_STAGES],
}

/// Checkpoint name of a stage's support queue.
pub fn queue_name(stage: usize, dense: bool) -> String {
    if dense {
        format!("queue.stage{stage}")
    } else {
        format!("queue.global.s{stage}")
    }
}

impl TrainState {
    /// Fresh state: online encoder from the reference (or random), a new
    /// task head, one projector per invariance stage, an identical target.
    pub fn new(cfg: &ExperimentConfig, reference: &Network) -> Result<Self> {
        cfg.validate()?;
        let encoder = if cfg.model.init_from_reference {
            reference.encoder.clone()
        } else {
            StagedEncoder::init(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xe1)))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x4ead));
        let head = Linear::init(EMBED_DIM, cfg.data.n_classes, 1.0, &mut rng);
        let projectors = cfg
            .loss
            .ci_stages()
            .into_iter()
            .map(|l| (l, Projector::init(STAGE_CHANNELS[l - 1], cfg.model.embed_dim, &mut rng)))
            .collect();
        let online = Network {
            encoder,
            head: Some(head),
            projectors,
        };
        let opt = Sgd::new(&online, cfg.optim.lr, cfg.optim.momentum);
        let pair = ModelPair::new(online, reference.clone(), cfg.optim.ema)?;
        let queues = cfg
            .loss
            .ci_stages()
            .into_iter()
            .map(|l| Ok((l, SupportQueue::new(cfg.loss.queue_size, cfg.model.embed_dim)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            pair,
            opt,
            queues,
            step: 0,
            epoch_sums: [0.0; 2 + 2 * N_STAGES],
        })
    }

    pub fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.pair.online.export("online", &mut ck);
        self.pair.target.export("target", &mut ck);
        self.pair.reference.export("reference", &mut ck);
        for ((name, _), v) in self.pair.online.tensors().iter().zip(&self.opt.velocity) {
            ck.insert(format!("optim.velocity.{name}"), v.clone());
        }
        ck.insert("optim.lr", Tensor::scalar(self.opt.lr));
        ck.insert("optim.momentum", Tensor::scalar(self.opt.momentum));
        ck.insert("state.ema", Tensor::scalar(self.pair.momentum));
        ck.insert("state.step", Tensor::scalar(self.step as f64));
        ck.insert("state.epoch_sums", Tensor::from_vec(self.epoch_sums.to_vec()));
        for (l, q) in &self.queues {
            q.export(&queue_name(*l, cfg.loss.dense), &mut ck)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<Self> {
        let online = Network::import("online", ck)?;
        let target = Network::import("target", ck)?;
        let reference = Network::import("reference", ck)?;
        let velocity = online
            .tensors()
            .iter()
            .map(|(name, _)| ck.require(&format!("optim.velocity.{name}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let opt = Sgd {
            lr: ck.scalar("optim.lr")?,
            momentum: ck.scalar("optim.momentum")?,
            velocity,
        };
        let queues = cfg
            .loss
            .ci_stages()
            .into_iter()
            .map(|l| Ok((l, SupportQueue::import(&queue_name(l, cfg.loss.dense), ck)?)))
            .collect::<Result<_>>()?;
        let sums = ck.require("state.epoch_sums")?;
        if sums.numel() != 2 + 2 * N_STAGES {
            return Err(Error::Format("state.epoch_sums has the wrong length".into()));
        }
        let mut epoch_sums = [0.0; 2 + 2 * N_STAGES];
        epoch_sums.copy_from_slice(sums.data());
        Ok(Self {
            pair: ModelPair {
                online,
                target,
                reference,
                momentum: ck.scalar("state.ema")?,
            },
            opt,
            queues,
            step: ck.scalar("state.step")? as u64,
            epoch_sums,
        })
    }

    fn queue(&self, stage: usize) -> Result<&SupportQueue> {
        self.queues
            .iter()
            .find(|(l, _)| *l == stage)
            .map(|(_, q)| q)
            .ok_or_else(|| Error::Config(format!("no support queue for stage {stage}")))
    }
}

/// Both strong-augmented views of every batch image, seeded by
/// `(seed, step, index)`.
pub fn make_views(batch: &[&Sample], seed: u64, step: u64, cfg: &crate::scm::AugmentConfig) -> (Vec<Tensor>, Vec<Tensor>) {
    let base = mix(mix(seed, 0xa5), step);
    let views = par::map_indexed(2 * batch.len(), |k| {
        strong_augment(&batch[k / 2].image, mix(base, k as u64), cfg)
    });
    let mut v1 = Vec::with_capacity(batch.len());
    let mut v2 = Vec::with_capacity(batch.len());
    for (k, v) in views.into_iter().enumerate() {
        if k % 2 == 0 {
            v1.push(v);
        } else {
            v2.push(v);
        }
    }
    (v1, v2)
}

/// Composite loss of one batch given both views, recorded on `tape`.
/// Returns the scalar loss, its breakdown and the target projections to
/// enqueue per invariance stage.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<'t>(
    cfg: &ExperimentConfig,
    state: &TrainState,
    online: &BoundNetwork<'t>,
    target: &BoundNetwork<'t>,
    reference: &BoundNetwork<'t>,
    x1: &Var<'t>,
    x2: &Var<'t>,
    labels: &[usize],
) -> Result<(Var<'t>, LossBreakdown, Vec<(usize, Tensor)>)> {
    let loss_cfg = &cfg.loss;
    let mut breakdown = LossBreakdown::default();
    let f1 = online.forward_staged(x1)?;
    let task = task_loss(&online.logits(&f1.pooled)?, labels)?;
    breakdown.task = task.item();
    let mut total = task;

    let g_stages = loss_cfg.guidance_stages();
    if !g_stages.is_empty() {
        let r1 = reference.forward_staged(x1)?;
        for l in g_stages {
            let g = guidance_loss(&f1.maps[l - 1], &r1.maps[l - 1], cfg.guidance.pool)?;
            breakdown.guidance[l - 1] = g.item();
            total = total.add(&g.scale(loss_cfg.lambda_g[l - 1]))?;
        }
    }

    let mut enqueue = Vec::new();
    let ci_stages = loss_cfg.ci_stages();
    if !ci_stages.is_empty() {
        let f2 = online.forward_staged(x2)?;
        let t1 = target.forward_staged(x1)?;
        let t2 = target.forward_staged(x2)?;
        for l in ci_stages {
            let i = l - 1;
            let proj = if loss_cfg.dense {
                dense_projections(
                    online,
                    target,
                    l,
                    [&f1.maps[i], &f2.maps[i], &t1.maps[i], &t2.maps[i]],
                    loss_cfg.dense_grid,
                )?
            } else {
                let pool = |m: &Var<'t>| global_avg_pool(m);
                ViewProjections::compute(
                    online,
                    target,
                    l,
                    [&pool(&f1.maps[i])?, &pool(&f2.maps[i])?],
                    [&pool(&t1.maps[i])?, &pool(&t2.maps[i])?],
                )?
            };
            let queue = state.queue(l)?;
            if queue.is_warm(loss_cfg.warmup_fill) {
                let ci = proj.loss(queue, loss_cfg.temperatures(), loss_cfg.ci_kind)?;
                breakdown.ci[i] = ci.item();
                total = total.add(&ci.scale(loss_cfg.lambda_ci[i]))?;
            }
            enqueue.push((l, proj.target_rows()?));
        }
    }
    breakdown.total = total.item();
    Ok((total, breakdown, enqueue))
}

fn check_finite(step: u64, b: &LossBreakdown) -> Result<()> {
    if b.to_array().iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Divergence {
        step,
        detail: format!(
            "non-finite loss: total {} task {} guidance {:?} invariance {:?}",
            b.total, b.task, b.guidance, b.ci
        ),
    })
}

/// One optimisation step on a synthetic batch: two views → forward →
/// composite loss → backward → SGD → EMA → enqueue target projections.
pub fn train_step(state: &mut TrainState, cfg: &ExperimentConfig, batch: &[&Sample]) -> Result<LossBreakdown> {
    if let Some(s) = batch.iter().find(|s| s.domain != Domain::Synthetic) {
        return Err(Error::Config(format!(
            "a {:?}-domain sample reached the training step; only synthetic data may be trained on",
            s.domain
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptySet);
    }
    let (v1, v2) = make_views(batch, cfg.seed, state.step, &cfg.augment);
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let tape = Tape::new();
    let online = state.pair.online.bind(&tape, true);
    let target = state.pair.target.bind(&tape, false);
    let reference = state.pair.reference.bind(&tape, false);
    let x1 = tape.constant(input_batch(&v1.iter().collect::<Vec<_>>())?);
    let x2 = tape.constant(input_batch(&v2.iter().collect::<Vec<_>>())?);
    let (loss, breakdown, enqueue) = total_loss(cfg, state, &online, &target, &reference, &x1, &x2, &labels)
        .map_err(|e| match e {
            // blown-up weights surface first inside the forward pass
            Error::NonFinite { op } => Error::Divergence {
                step: state.step,
                detail: format!("non-finite value in {op}"),
            },
            e => e,
        })?;
    check_finite(state.step, &breakdown)?;

    let grads = tape.backward(loss)?;
    let g = online.grads(&grads);
    if g.iter().any(|t| !t.is_finite()) {
        return Err(Error::Divergence {
            step: state.step,
            detail: "non-finite gradient".into(),
        });
    }
    state.opt.lr = cfg.optim.lr;
    state.opt.step(&mut state.pair.online, &g)?;
    ema_update(&mut state.pair.target, &state.pair.online, state.pair.momentum)?;
    for (l, rows) in enqueue {
        let q = state
            .queues
            .iter_mut()
            .find(|(s, _)| *s == l)
            .map(|(_, q)| q)
            .ok_or_else(|| Error::Config(format!("no support queue for stage {l}")))?;
        q.enqueue(&rows)?;
    }
    state.step += 1;
    for (acc, v) in state.epoch_sums.iter_mut().zip(breakdown.to_array()) {
        *acc += v;
    }
    Ok(breakdown)
}
