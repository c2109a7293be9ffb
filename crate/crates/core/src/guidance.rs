//! Pooled feature guidance from the frozen reference network: the pooling
//! operators, the parameter-free attention map and self-attention pooling,
//! and the normalised-distance guidance loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

/// Pooling applied to `[b, c, h, w]` maps before comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    /// Flatten, `c·h·w`.
    Np,
    /// Global average, `c`.
    Gap,
    /// Channel mean, `h·w`.
    Cp,
    /// Width-pooled `c·h` followed by height-pooled `c·w`.
    Sp,
    /// Self-attention pooling, `c`.
    #[default]
    Sap,
}

pub const POOL_OPS: [PoolOp; 5] = [PoolOp::Np, PoolOp::Gap, PoolOp::Cp, PoolOp::Sp, PoolOp::Sap];

impl PoolOp {
    pub fn name(self) -> &'static str {
        match self {
            PoolOp::Np => "np",
            PoolOp::Gap => "gap",
            PoolOp::Cp => "cp",
            PoolOp::Sp => "sp",
            PoolOp::Sap => "sap",
        }
    }

    /// Pooled length for one `c×h×w` map.
    pub fn output_len(self, c: usize, h: usize, w: usize) -> usize {
        match self {
            PoolOp::Np => c * h * w,
            PoolOp::Gap | PoolOp::Sap => c,
            PoolOp::Cp => h * w,
            PoolOp::Sp => c * (h + w),
        }
    }
}

impl fmt::Display for PoolOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        POOL_OPS
            .into_iter()
            .find(|op| op.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown pooling op {s:?} (expected np|gap|cp|sp|sap)")))
    }
}

fn dims(op: &'static str, v: &Var<'_>) -> Result<[usize; 4]> {
    match v.shape()[..] {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::Shape {
            op,
            lhs: v.shape(),
            rhs: vec![],
        }),
    }
}

/// Attention `[b, h·w]`: each position's feature dotted with the channel
/// means `g`, normalised to sum to one. A near-zero total is clamped to
/// ±1e-8 with its sign kept.
pub fn attention_map<'t>(v: &Var<'t>) -> Result<Var<'t>> {
    attention(v, false)
}

fn attention<'t>(v: &Var<'t>, detach: bool) -> Result<Var<'t>> {
    let [b, c, h, w] = dims("attention_map", v)?;
    let flat = v.reshape(&[b, c, h * w])?;
    let g = flat.mean_axis(2)?.reshape(&[b, 1, c])?;
    let g = if detach { g.detach() } else { g };
    let scores = g.matmul(&flat)?;
    let scores = if detach { scores.detach() } else { scores };
    scores.sum_normalize()?.reshape(&[b, h * w])
}

/// `P_a(v)[c] = Σ_{h,w} v[c,h,w]·a[h,w]`, `[b, c]`; differentiable through
/// both the feature and the attention path.
pub fn self_attention_pool<'t>(v: &Var<'t>) -> Result<Var<'t>> {
    sap(v, false)
}

/// Self-attention pooling with the attention weights cut from the graph.
/// Deliberately wrong gradients; kept as the negative control for the
/// gradient checker.
pub fn self_attention_pool_detached_attention<'t>(v: &Var<'t>) -> Result<Var<'t>> {
    sap(v, true)
}

fn sap<'t>(v: &Var<'t>, detach_attention: bool) -> Result<Var<'t>> {
    let [b, c, h, w] = dims("self_attention_pool", v)?;
    let a = attention(v, detach_attention)?.reshape(&[b, h * w, 1])?;
    v.reshape(&[b, c, h * w])?.matmul(&a)?.reshape(&[b, c])
}

/// Pool `[b, c, h, w]` maps into `[b, len]` rows.
pub fn pool<'t>(v: &Var<'t>, op: PoolOp) -> Result<Var<'t>> {
    let [b, c, h, w] = dims("pool", v)?;
    match op {
        PoolOp::Np => v.reshape(&[b, c * h * w]),
        PoolOp::Gap => v.reshape(&[b, c, h * w])?.mean_axis(2),
        PoolOp::Cp => v.mean_axis(1)?.reshape(&[b, h * w]),
        PoolOp::Sp => {
            let width = v.mean_axis(3)?.reshape(&[b, c * h])?;
            let height = v.mean_axis(2)?.reshape(&[b, c * w])?;
            Var::concat(&[width, height], 1)
        }
        PoolOp::Sap => self_attention_pool(v),
    }
}

/// `‖P(f_s)/‖P(f_s)‖ − P(f_r)/‖P(f_r)‖‖²` per sample, averaged over the
/// batch. The reference map is detached.
pub fn guidance_loss<'t>(fs: &Var<'t>, fr: &Var<'t>, op: PoolOp) -> Result<Var<'t>> {
    guidance_loss_with(fs, fr, |v| pool(v, op))
}

pub(crate) fn guidance_loss_with<'t>(
    fs: &Var<'t>,
    fr: &Var<'t>,
    pool_fn: impl Fn(&Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    if fs.shape() != fr.shape() {
        return Err(Error::Shape {
            op: "guidance_loss",
            lhs: fs.shape(),
            rhs: fr.shape(),
        });
    }
    let b = dims("guidance_loss", fs)?[0];
    let s = pool_fn(fs)?.l2_normalize()?;
    let r = pool_fn(&fr.detach())?.l2_normalize()?;
    let d = s.sub(&r)?;
    Ok(d.mul(&d)?.sum().scale(1.0 / b as f64))
}
