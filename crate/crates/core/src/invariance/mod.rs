//! Causal-invariance objective: relational distributions of projections
//! over a support queue, aligned between the online and momentum-target
//! branches, plus the dense patch variant and an InfoNCE baseline.

pub mod queue;

use serde::{Deserialize, Serialize};

pub use queue::SupportQueue;

use crate::encoder::BoundNetwork;
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor, Var};

/// Online (`tau`) and target (`tau_bar`) temperatures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau: f64,
    pub tau_bar: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau: 0.12,
            tau_bar: 0.04,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_bar > 0.0) || !self.tau.is_finite() || !self.tau_bar.is_finite() {
            return Err(Error::Config(format!(
                "temperatures must be positive, got tau={} tau_bar={}",
                self.tau, self.tau_bar
            )));
        }
        Ok(())
    }
}

/// Which alignment objective the invariance term uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiKind {
    #[default]
    Relational,
    Infonce,
}

impl CiKind {
    pub fn name(self) -> &'static str {
        match self {
            CiKind::Relational => "relational",
            CiKind::Infonce => "infonce",
        }
    }
}

impl std::str::FromStr for CiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [CiKind::Relational, CiKind::Infonce]
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown invariance loss {s:?} (relational or infonce)")))
    }
}

fn check_rows(op: &'static str, z: &[usize], q: &SupportQueue) -> Result<()> {
    if z.len() != 2 || z[1] != q.dim() {
        return Err(Error::Shape {
            op,
            lhs: z.to_vec(),
            rhs: vec![q.dim()],
        });
    }
    Ok(())
}

/// Similarity logits `z·qₖ / τ` of `[b, d]` projections against the queue.
fn relational_logits<'t>(z: &Var<'t>, q: &SupportQueue, tau: f64) -> Result<Var<'t>> {
    check_rows("relational_logits", &z.shape(), q)?;
    let support = z.tape().constant(q.support_columns()?);
    Ok(z.matmul(&support)?.scale(1.0 / tau))
}

/// Row-wise softmax of `z·qₖ / τ` over the filled queue entries, `[b, K]`.
/// Differentiable in `z`; the queue is a constant.
pub fn relational_distribution<'t>(z: &Var<'t>, q: &SupportQueue, tau: f64) -> Result<Var<'t>> {
    Ok(relational_logits(z, q, tau)?.softmax())
}

/// Plain-value relational distribution, used for the detached target.
pub fn relational_distribution_values(z: &Tensor, q: &SupportQueue, tau: f64) -> Result<Tensor> {
    check_rows("relational_distribution", z.shape(), q)?;
    let cols = q.support_columns()?;
    let (b, d, k) = (z.shape()[0], q.dim(), q.fill());
    let mut logits = vec![0.0; b * k];
    for i in 0..b {
        let zi = z.row(i);
        for (j, out) in logits[i * k..(i + 1) * k].iter_mut().enumerate() {
            *out = (0..d).map(|c| zi[c] * cols.data()[c * k + j]).sum::<f64>() / tau;
        }
    }
    softmax_rows(Tensor::new(vec![b, k], logits)?)
}

/// Cross-entropy `−Σₖ p_τ̄(z̄)ₖ · log p_τ(z)ₖ`, averaged over the batch.
/// `z_target` is detached: no gradient reaches it or the queue.
pub fn ci_pair_loss<'t>(
    z_online: &Var<'t>,
    z_target: &Var<'t>,
    q: &SupportQueue,
    temps: Temperatures,
) -> Result<Var<'t>> {
    if z_online.shape() != z_target.shape() {
        return Err(Error::Shape {
            op: "ci_pair_loss",
            lhs: z_online.shape(),
            rhs: z_target.shape(),
        });
    }
    let target = relational_distribution_values(&z_target.value(), q, temps.tau_bar)?;
    let target = z_online.tape().constant(target);
    let log_p = relational_logits(z_online, q, temps.tau)?.log_softmax();
    let b = z_online.shape()[0] as f64;
    Ok(target.mul(&log_p)?.sum().scale(-1.0 / b))
}

/// `½ℓ(z₁, z̄₂) + ½ℓ(z₂, z̄₁)`.
pub fn symmetric_ci_loss<'t>(
    z1: &Var<'t>,
    z1_bar: &Var<'t>,
    z2: &Var<'t>,
    z2_bar: &Var<'t>,
    q: &SupportQueue,
    temps: Temperatures,
    kind: CiKind,
) -> Result<Var<'t>> {
    let pair = |z: &Var<'t>, zb: &Var<'t>| match kind {
        CiKind::Relational => ci_pair_loss(z, zb, q, temps),
        CiKind::Infonce => infonce_loss(z, zb, q, temps.tau),
    };
    let a = pair(z1, z2_bar)?;
    let b = pair(z2, z1_bar)?;
    Ok(a.add(&b)?.scale(0.5))
}

/// Online and target unit projections of one stage for both views.
#[derive(Clone, Copy, Debug)]
pub struct ViewProjections<'t> {
    pub z1: Var<'t>,
    pub z2: Var<'t>,
    pub z1_bar: Var<'t>,
    pub z2_bar: Var<'t>,
}

impl<'t> ViewProjections<'t> {
    /// Project pooled stage features (`[b, c]` per view) through the stage
    /// projector of each branch. The target outputs are detached.
    pub fn compute(
        online: &BoundNetwork<'t>,
        target: &BoundNetwork<'t>,
        stage: usize,
        online_feats: [&Var<'t>; 2],
        target_feats: [&Var<'t>; 2],
    ) -> Result<Self> {
        Ok(Self {
            z1: online.project_normalize(stage, online_feats[0])?,
            z2: online.project_normalize(stage, online_feats[1])?,
            z1_bar: target.project_normalize(stage, target_feats[0])?.detach(),
            z2_bar: target.project_normalize(stage, target_feats[1])?.detach(),
        })
    }

    pub fn loss(&self, q: &SupportQueue, temps: Temperatures, kind: CiKind) -> Result<Var<'t>> {
        symmetric_ci_loss(&self.z1, &self.z1_bar, &self.z2, &self.z2_bar, q, temps, kind)
    }

    /// Target projections of both views, view 1 first, for enqueueing.
    pub fn target_rows(&self) -> Result<Tensor> {
        let (a, b) = (self.z1_bar.value(), self.z2_bar.value());
        let d = a.shape()[1];
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::new(vec![a.shape()[0] + b.shape()[0], d], data)
    }
}

/// Symmetric invariance loss of two views at one stage, running both
/// branches on the pre-normalised view batches `x1`, `x2`.
pub fn ci_total_loss<'t>(
    online: &BoundNetwork<'t>,
    target: &BoundNetwork<'t>,
    x1: &Var<'t>,
    x2: &Var<'t>,
    stage: usize,
    q: &SupportQueue,
    temps: Temperatures,
) -> Result<Var<'t>> {
    let pooled = |net: &BoundNetwork<'t>, x: &Var<'t>| -> Result<Var<'t>> {
        let f = net.forward_staged(x)?;
        let map = f
            .maps
            .get(stage.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no encoder stage {stage}")))?;
        crate::encoder::global_avg_pool(map)
    };
    let (o1, o2) = (pooled(online, x1)?, pooled(online, x2)?);
    let (t1, t2) = (pooled(target, x1)?, pooled(target, x2)?);
    ViewProjections::compute(online, target, stage, [&o1, &o2], [&t1, &t2])?.loss(
        q,
        temps,
        CiKind::Relational,
    )
}

/// Split `[b, c, h, w]` into an `n×n` grid of patches and average-pool each,
/// giving `[b·n², c]` with patches of one image contiguous in row-major
/// grid order.
pub fn patch_features<'t>(map: &Var<'t>, grid: usize) -> Result<Var<'t>> {
    let s = map.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "patch_features",
            lhs: s,
            rhs: vec![grid, grid],
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if grid == 0 || h % grid != 0 || w % grid != 0 || h / grid != w / grid {
        return Err(Error::Config(format!(
            "a {h}×{w} feature map does not split into a {grid}×{grid} grid of square patches"
        )));
    }
    let n = grid * grid;
    map.avg_pool2d(h / grid)?
        .reshape(&[b, c, n])?
        .transpose()?
        .reshape(&[b * n, c])
}

/// Dense variant: per-patch symmetric invariance over an `n×n` grid of the
/// stage maps, averaged over patches and batch. `maps` holds the online
/// maps of both views, then the target maps of both views.
pub fn dense_projections<'t>(
    online: &BoundNetwork<'t>,
    target: &BoundNetwork<'t>,
    stage: usize,
    maps: [&Var<'t>; 4],
    grid: usize,
) -> Result<ViewProjections<'t>> {
    let [o1, o2, t1, t2] = maps.map(|m| patch_features(m, grid));
    ViewProjections::compute(online, target, stage, [&o1?, &o2?], [&t1?, &t2?])
}

/// Dense invariance loss of two views at one stage.
#[allow(clippy::too_many_arguments)]
pub fn dense_ci_loss<'t>(
    online: &BoundNetwork<'t>,
    target: &BoundNetwork<'t>,
    x1: &Var<'t>,
    x2: &Var<'t>,
    stage: usize,
    q: &SupportQueue,
    temps: Temperatures,
    grid: usize,
) -> Result<Var<'t>> {
    let map = |net: &BoundNetwork<'t>, x: &Var<'t>| -> Result<Var<'t>> {
        net.forward_staged(x)?
            .maps
            .get(stage.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Config(format!("no encoder stage {stage}")))
    };
    let maps = [map(online, x1)?, map(online, x2)?, map(target, x1)?, map(target, x2)?];
    dense_projections(online, target, stage, [&maps[0], &maps[1], &maps[2], &maps[3]], grid)?.loss(
        q,
        temps,
        CiKind::Relational,
    )
}

/// `−log[exp(z·z̄/τ) / (exp(z·z̄/τ) + Σₖ exp(z·qₖ/τ))]`, batch mean, with
/// the positive `z̄` detached.
pub fn infonce_loss<'t>(z: &Var<'t>, z_pos: &Var<'t>, q: &SupportQueue, tau: f64) -> Result<Var<'t>> {
    if z.shape() != z_pos.shape() {
        return Err(Error::Shape {
            op: "infonce_loss",
            lhs: z.shape(),
            rhs: z_pos.shape(),
        });
    }
    let b = z.shape()[0];
    let positive = z
        .mul(&z_pos.detach())?
        .sum_axis(1)?
        .reshape(&[b, 1])?
        .scale(1.0 / tau);
    let negatives = relational_logits(z, q, tau)?;
    let log_p = Var::concat(&[positive, negatives], 1)?.log_softmax();
    Ok(log_p.slice(1, 0, 1)?.sum().scale(-1.0 / b as f64))
}
