//! Staged convolutional encoder, projector heads, the momentum target and
//! the frozen reference network.

pub mod checkpoint;
pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use reference::{pretrain_reference, PretrainConfig, PretrainReport};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Output channels of the four stride-2 stages.
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const N_STAGES: usize = 4;
pub const EMBED_DIM: usize = 128;
pub const PROJ_HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Tensor::randn(&[inputs, outputs], (gain / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// 3×3 stride-2 convolution with bias, followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagedEncoder {
    pub stages: Vec<ConvStage>,
}

impl StagedEncoder {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 3;
        let stages = STAGE_CHANNELS
            .iter()
            .map(|&cout| {
                let fan_in = (cin * 9) as f64;
                let s = ConvStage {
                    weight: Tensor::randn(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), rng),
                    bias: Tensor::zeros(&[cout]),
                };
                cin = cout;
                s
            })
            .collect();
        Self { stages }
    }
}

/// Two-layer MLP `in → 128 → d` with a ReLU between.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub hidden: Linear,
    pub out: Linear,
}

impl Projector {
    pub fn init(inputs: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::init(inputs, PROJ_HIDDEN, 2.0, rng),
            out: Linear::init(PROJ_HIDDEN, dim, 1.0, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.out.out_dim()
    }
}

/// An encoder with an optional classifier head and per-stage projectors.
/// Projectors are keyed by 1-based stage index.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub encoder: StagedEncoder,
    pub head: Option<Linear>,
    pub projectors: Vec<(usize, Projector)>,
}

impl Network {
    pub fn new(encoder: StagedEncoder) -> Self {
        Self {
            encoder,
            head: None,
            projectors: Vec::new(),
        }
    }

    /// Fresh encoder plus a `n_classes` head, seeded.
    pub fn classifier(n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = StagedEncoder::init(&mut rng);
        let head = Linear::init(EMBED_DIM, n_classes, 1.0, &mut rng);
        Self {
            encoder,
            head: Some(head),
            projectors: Vec::new(),
        }
    }

    pub fn projector(&self, stage: usize) -> Option<&Projector> {
        self.projectors.iter().find(|(s, _)| *s == stage).map(|(_, p)| p)
    }

    /// Every parameter with its checkpoint path, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.stages.iter().enumerate() {
            out.push((format!("stage{}.conv.w", i + 1), &s.weight));
            out.push((format!("stage{}.conv.b", i + 1), &s.bias));
        }
        if let Some(h) = &self.head {
            out.push(("head.w".into(), &h.weight));
            out.push(("head.b".into(), &h.bias));
        }
        for (l, p) in &self.projectors {
            out.push((format!("proj{l}.hidden.w"), &p.hidden.weight));
            out.push((format!("proj{l}.hidden.b"), &p.hidden.bias));
            out.push((format!("proj{l}.out.w"), &p.out.weight));
            out.push((format!("proj{l}.out.b"), &p.out.bias));
        }
        out
    }

    /// Mutable counterpart of [`Network::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.stages.iter_mut().enumerate() {
            out.push((format!("stage{}.conv.w", i + 1), &mut s.weight));
            out.push((format!("stage{}.conv.b", i + 1), &mut s.bias));
        }
        if let Some(h) = &mut self.head {
            out.push(("head.w".into(), &mut h.weight));
            out.push(("head.b".into(), &mut h.bias));
        }
        for (l, p) in &mut self.projectors {
            out.push((format!("proj{l}.hidden.w"), &mut p.hidden.weight));
            out.push((format!("proj{l}.hidden.b"), &mut p.hidden.bias));
            out.push((format!("proj{l}.out.w"), &mut p.out.weight));
            out.push((format!("proj{l}.out.b"), &mut p.out.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy of the encoder and projectors without the head.
    pub fn without_head(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            head: None,
            projectors: self.projectors.clone(),
        }
    }

    pub fn export(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, t) in self.tensors() {
            ck.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Rebuild a network stored under `prefix`.
    pub fn import(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let get = |name: String| ck.require(&format!("{prefix}.{name}")).cloned();
        let stages = (1..=N_STAGES)
            .map(|i| {
                Ok(ConvStage {
                    weight: get(format!("stage{i}.conv.w"))?,
                    bias: get(format!("stage{i}.conv.b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = match ck.get(&format!("{prefix}.head.w")) {
            Some(w) => Some(Linear {
                weight: w.clone(),
                bias: get("head.b".into())?,
            }),
            None => None,
        };
        let mut projectors = Vec::new();
        for l in 1..=N_STAGES {
            if ck.get(&format!("{prefix}.proj{l}.hidden.w")).is_some() {
                projectors.push((
                    l,
                    Projector {
                        hidden: Linear {
                            weight: get(format!("proj{l}.hidden.w"))?,
                            bias: get(format!("proj{l}.hidden.b"))?,
                        },
                        out: Linear {
                            weight: get(format!("proj{l}.out.w"))?,
                            bias: get(format!("proj{l}.out.b"))?,
                        },
                    },
                ));
            }
        }
        Ok(Self {
            encoder: StagedEncoder { stages },
            head,
            projectors,
        })
    }

    /// Record every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundNetwork<'t> {
        let leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let lin = |l: &Linear| (leaf(&l.weight), leaf(&l.bias));
        let stages: Vec<(Var, Var)> = self
            .encoder
            .stages
            .iter()
            .map(|s| (leaf(&s.weight), leaf(&s.bias)))
            .collect();
        let head = self.head.as_ref().map(lin);
        let projectors: Vec<(usize, (Var, Var), (Var, Var))> = self
            .projectors
            .iter()
            .map(|(l, p)| (*l, lin(&p.hidden), lin(&p.out)))
            .collect();
        let mut order = Vec::new();
        for (w, b) in &stages {
            order.extend([*w, *b]);
        }
        if let Some((w, b)) = head {
            order.extend([w, b]);
        }
        for (_, (hw, hb), (ow, ob)) in &projectors {
            order.extend([*hw, *hb, *ow, *ob]);
        }
        BoundNetwork {
            stages,
            head,
            projectors,
            order,
        }
    }
}

/// Per-stage post-ReLU maps `[n, c_l, h_l, w_l]` and the pooled final
/// embedding `[n, 128]`.
#[derive(Clone, Debug)]
pub struct StageFeatures<'t> {
    pub maps: Vec<Var<'t>>,
    pub pooled: Var<'t>,
}

/// Spatial global average of `[n, c, h, w]` → `[n, c]`.
pub fn global_avg_pool<'t>(map: &Var<'t>) -> Result<Var<'t>> {
    let s = map.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "global_avg_pool",
            lhs: s,
            rhs: vec![],
        });
    }
    map.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)
}

/// A [`Network`] whose parameters live on a tape.
pub struct BoundNetwork<'t> {
    stages: Vec<(Var<'t>, Var<'t>)>,
    head: Option<(Var<'t>, Var<'t>)>,
    projectors: Vec<(usize, (Var<'t>, Var<'t>), (Var<'t>, Var<'t>))>,
    order: Vec<Var<'t>>,
}

fn linear<'t>(x: &Var<'t>, (w, b): &(Var<'t>, Var<'t>)) -> Result<Var<'t>> {
    x.matmul(w)?.add_channel_bias(b)
}

impl<'t> BoundNetwork<'t> {
    /// Run the four stages on `[n, 3, h, w]` images.
    pub fn forward_staged(&self, images: &Var<'t>) -> Result<StageFeatures<'t>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::Shape {
                op: "forward_staged",
                lhs: s,
                rhs: vec![3, 32, 32],
            });
        }
        let mut x = *images;
        let mut maps = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            x = x.conv2d(w, 2, 1)?.add_channel_bias(b)?.relu();
            maps.push(x);
        }
        let pooled = global_avg_pool(&x)?;
        Ok(StageFeatures { maps, pooled })
    }

    /// Classifier logits from pooled features.
    pub fn logits(&self, pooled: &Var<'t>) -> Result<Var<'t>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("network has no classifier head".into()))?;
        linear(pooled, head)
    }

    /// Projector output for `stage` before normalisation.
    pub fn project(&self, stage: usize, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, hidden, out) = self
            .projectors
            .iter()
            .find(|(l, _, _)| *l == stage)
            .ok_or_else(|| Error::Config(format!("no projector for stage {stage}")))?;
        linear(&linear(x, hidden)?.relu(), out)
    }

    /// Unit-norm projection `z = g(x)/‖g(x)‖` of pooled stage features.
    pub fn project_normalize(&self, stage: usize, x: &Var<'t>) -> Result<Var<'t>> {
        self.project(stage, x)?.l2_normalize()
    }

    /// Gradients for every parameter, in [`Network::tensors`] order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.order.iter().map(|v| g.wrt(*v)).collect()
    }

    /// Raw gradient slots; `None` for parameters bound as constants.
    pub fn grad_slots(&self, g: &Gradients) -> Vec<Option<Tensor>> {
        self.order.iter().map(|v| g.get(*v).cloned()).collect()
    }
}

/// Online network, its momentum target and the frozen reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub online: Network,
    pub target: Network,
    pub reference: Network,
    pub momentum: f64,
}

impl ModelPair {
    /// Target starts as an exact copy of the online encoder + projectors.
    pub fn new(online: Network, reference: Network, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        let target = init_target_from_online(&online);
        Ok(Self {
            online,
            target,
            reference,
            momentum,
        })
    }
}

pub fn init_target_from_online(online: &Network) -> Network {
    online.without_head()
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum {m} outside [0, 1]")));
    }
    Ok(())
}

/// `θ̄ ← m·θ̄ + (1−m)·θ` for every target parameter, matched by name.
pub fn ema_update(target: &mut Network, online: &Network, m: f64) -> Result<()> {
    check_momentum(m)?;
    let online_tensors = online.tensors();
    for (name, t) in target.tensors_mut() {
        let (_, src) = online_tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("online network lacks {name}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Shape {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        for (a, b) in t.data_mut().iter_mut().zip(src.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Fixed input standardisation applied before every encoder forward.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Stack `[3, h, w]` images in `[0, 1]` into a standardised `[n, 3, h, w]`
/// encoder input.
pub fn input_batch(images: &[&Tensor]) -> Result<Tensor> {
    let mut x = Tensor::stack(images)?;
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v - INPUT_MEAN) / INPUT_STD);
    Ok(x)
}

/// Evaluation-mode batch size for read-only forwards.
pub const EVAL_CHUNK: usize = 100;

/// Pooled 128-d embeddings and, when a head exists, logits for a batch of
/// images, computed in independent chunks.
pub fn embed_images(net: &Network, images: &[&Tensor]) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    let n_chunks = images.len().div_ceil(EVAL_CHUNK);
    let parts = par::map_indexed(n_chunks, |c| -> Result<(Tensor, Option<Tensor>)> {
        let chunk = &images[c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(images.len())];
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let x = tape.constant(input_batch(chunk)?);
        let feats = bound.forward_staged(&x)?;
        let logits = match net.head {
            Some(_) => Some((*bound.logits(&feats.pooled)?.value()).clone()),
            None => None,
        };
        Ok(((*feats.pooled.value()).clone(), logits))
    });
    let mut pooled = Vec::with_capacity(images.len());
    let mut logits = net.head.as_ref().map(|_| Vec::with_capacity(images.len()));
    for part in parts {
        let (p, l) = part?;
        for i in 0..p.shape()[0] {
            pooled.push(p.row(i).to_vec());
        }
        if let (Some(all), Some(l)) = (logits.as_mut(), l) {
            for i in 0..l.shape()[0] {
                all.push(l.row(i).to_vec());
            }
        }
    }
    Ok((pooled, logits))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Top-1 predictions of a classifier network.
pub fn predict(net: &Network, images: &[&Tensor]) -> Result<Vec<usize>> {
    let (_, logits) = embed_images(net, images)?;
    let logits = logits.ok_or_else(|| Error::Config("network has no classifier head".into()))?;
    Ok(logits.iter().map(|r| argmax(r)).collect())
}
