//! Representation diagnostics: prediction consistency under stylisation,
//! linear CKA against the reference, reference-head accuracy and
//! real-domain accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{embed_images, predict, Linear, Network, EMBED_DIM};
use crate::error::{Error, Result};
use crate::par;
use crate::scm::{mix, stylize_for_matchrate, Sample};
use crate::tensor::{io::save_tensor, Tensor};

/// Fraction of positions where two prediction lists agree.
pub fn consistency_rate(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptySet);
    }
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "consistency_rate",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Share of images whose prediction survives a photometric stylisation.
/// Image `i` is stylised with seed `mix(seed, i)`.
pub fn match_rate(net: &Network, samples: &[Sample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let originals: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let styled = par::map_indexed(samples.len(), |i| {
        stylize_for_matchrate(&samples[i].image, mix(seed, i as u64))
    });
    let styled: Vec<&Tensor> = styled.iter().collect();
    consistency_rate(&predict(net, &originals)?, &predict(net, &styled)?)
}

/// Top-1 accuracy on labelled samples.
pub fn accuracy(net: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let pred = predict(net, &imgs)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    consistency_rate(&pred, &labels)
}

/// Real-domain task accuracy.
pub fn real_accuracy(net: &Network, real_val: &[Sample]) -> Result<f64> {
    accuracy(net, real_val)
}

/// Accuracy of the frozen reference head on top of `backbone`'s pooled
/// features, over the pretext validation split.
pub fn ref_head_accuracy(backbone: &Network, ref_head: &Linear, pretext_val: &[Sample]) -> Result<f64> {
    if ref_head.in_dim() != EMBED_DIM {
        return Err(Error::Shape {
            op: "ref_head_accuracy",
            lhs: vec![ref_head.in_dim()],
            rhs: vec![EMBED_DIM],
        });
    }
    let probe = Network {
        encoder: backbone.encoder.clone(),
        head: Some(ref_head.clone()),
        projectors: Vec::new(),
    };
    accuracy(&probe, pretext_val)
}

/// Pooled penultimate features `[n, 128]` of `net` on `samples`.
pub fn features(net: &Network, samples: &[Sample]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let (rows, _) = embed_images(&net.without_head(), &imgs)?;
    let d = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rows.len(), d], rows.concat())
}

fn centered(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "cka_linear",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let (n, p) = (s[0], s[1]);
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "cka_linear" });
    }
    let mut d = x.data().to_vec();
    for c in 0..p {
        let mean = (0..n).map(|r| d[r * p + c]).sum::<f64>() / n as f64;
        (0..n).for_each(|r| d[r * p + c] -= mean);
    }
    Ok((n, p, d))
}

/// `‖AᵀB‖_F²` for `[n, p]` and `[n, q]` row-major matrices.
fn cross_frobenius_sq(n: usize, a: &[f64], p: usize, b: &[f64], q: usize) -> f64 {
    let mut m = vec![0.0; p * q];
    for r in 0..n {
        let (ar, br) = (&a[r * p..(r + 1) * p], &b[r * q..(r + 1) * q]);
        for (i, av) in ar.iter().enumerate() {
            for (j, bv) in br.iter().enumerate() {
                m[i * q + j] += av * bv;
            }
        }
    }
    // summed in sorted order so that swapping the arguments (a transpose
    // of `m`) gives a bit-identical result
    let mut sq: Vec<f64> = m.iter().map(|v| v * v).collect();
    sq.sort_by(f64::total_cmp);
    sq.iter().sum()
}

/// Linear CKA `‖YᶜᵀXᶜ‖²_F / (‖XᶜᵀXᶜ‖_F·‖YᶜᵀYᶜ‖_F)` between two feature
/// matrices sharing row order.
pub fn cka_linear(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p, xc) = centered(x)?;
    let (ny, q, yc) = centered(y)?;
    if n != ny {
        return Err(Error::Shape {
            op: "cka_linear",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if n < 3 {
        return Err(Error::Config(format!("CKA needs at least 3 samples, got {n}")));
    }
    let xx = cross_frobenius_sq(n, &xc, p, &xc, p).sqrt();
    let yy = cross_frobenius_sq(n, &yc, q, &yc, q).sqrt();
    if xx <= 1e-24 || yy <= 1e-24 {
        return Err(Error::Degenerate {
            op: "cka_linear (zero-variance features)",
            norm: xx.min(yy),
        });
    }
    let xy = cross_frobenius_sq(n, &xc, p, &yc, q);
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: u32,
    pub real_acc: f64,
    pub match_rate: f64,
    pub cka: f64,
    pub ref_head_acc: f64,
    /// Real validation images evaluated.
    pub n: usize,
    /// Pretext validation images behind `ref_head_acc`.
    pub n_pretext: usize,
    pub seed: u64,
}

/// Every diagnostic for one trained network.
pub fn evaluate(
    net: &Network,
    reference: &Network,
    real_val: &[Sample],
    pretext_val: &[Sample],
    seed: u64,
) -> Result<MetricReport> {
    let head = reference
        .head
        .as_ref()
        .ok_or_else(|| Error::Config("reference network has no head".into()))?;
    Ok(MetricReport {
        schema: 1,
        real_acc: real_accuracy(net, real_val)?,
        match_rate: match_rate(net, real_val, seed)?,
        cka: cka_linear(&features(net, real_val)?, &features(reference, real_val)?)?,
        ref_head_acc: ref_head_accuracy(net, head, pretext_val)?,
        n: real_val.len(),
        n_pretext: pretext_val.len(),
        seed,
    })
}

/// Write `net`'s and the reference's real-validation features as GTSR
/// files for offline analysis.
pub fn dump_features(dir: &Path, net: &Network, reference: &Network, real_val: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_tensor(dir.join("features_model.gtsr"), &features(net, real_val)?)?;
    save_tensor(dir.join("features_reference.gtsr"), &features(reference, real_val)?)?;
    Ok(())
}
