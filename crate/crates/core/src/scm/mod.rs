//! Procedural structural causal model: a content latent alone fixes the
//! label, and a domain-specific style latent only changes appearance.

pub mod augment;
pub(crate) mod image_ops;
pub mod render;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{strong_augment, stylize_for_matchrate, AugmentConfig, StylizeParams};
pub use render::{render, Family, PRETEXT_FAMILIES, TASK_FAMILIES};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{io, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synthetic,
    Real,
}

/// Which silhouette families the labels index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSet {
    Task,
    Pretext,
}

impl LabelSet {
    pub fn families(self) -> &'static [Family] {
        match self {
            LabelSet::Task => &TASK_FAMILIES,
            LabelSet::Pretext => &PRETEXT_FAMILIES,
        }
    }
}

/// The content variable: class plus pose. Pose never alters the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentLatent {
    pub class_id: usize,
    /// Shape centre as a fraction of the image extent (x, y).
    pub position: [f64; 2],
    /// Shape diameter as a fraction of the image extent, in `[0.3, 0.7]`.
    pub scale: f64,
    pub rotation: f64,
}

/// The style variable. Nothing here can change the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleLatent {
    pub palette_id: usize,
    /// 0 is flat colour.
    pub texture_id: usize,
    pub texture_amp: f64,
    pub texture_seed: u64,
    pub hue_shift: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub brightness: f64,
    pub contrast: f64,
}

/// Closed interval `[lo, hi]`; `lo == hi` pins the value.
pub type Interval = [f64; 2];

fn draw(rng: &mut ChaCha8Rng, iv: Interval) -> f64 {
    if iv[1] > iv[0] {
        rng.random_range(iv[0]..=iv[1])
    } else {
        iv[0]
    }
}

/// Parameter ranges of one domain's style distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleRanges {
    pub palettes: Vec<usize>,
    pub textures: Vec<usize>,
    pub texture_amp: Interval,
    /// Symmetric hue jitter bound in radians.
    pub hue_jitter: f64,
    pub blur_sigma: Interval,
    pub noise_sigma: Interval,
    pub brightness: Interval,
    pub contrast: Interval,
}

impl StyleRanges {
    pub fn synthetic() -> Self {
        Self {
            palettes: (0..8).collect(),
            textures: vec![0],
            texture_amp: [0.0, 0.0],
            hue_jitter: 0.0,
            blur_sigma: [0.0, 0.0],
            noise_sigma: [0.0, 0.0],
            brightness: [0.0, 0.0],
            contrast: [0.0, 0.0],
        }
    }

    pub fn real() -> Self {
        Self {
            palettes: (8..16).collect(),
            textures: (1..=render::TEXTURE_KINDS).collect(),
            texture_amp: [0.2, 0.35],
            hue_jitter: 0.6,
            blur_sigma: [0.4, 0.9],
            noise_sigma: [0.02, 0.05],
            brightness: [-0.1, 0.1],
            contrast: [-0.2, 0.1],
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> StyleLatent {
        StyleLatent {
            palette_id: self.palettes[rng.random_range(0..self.palettes.len())],
            texture_id: self.textures[rng.random_range(0..self.textures.len())],
            texture_amp: draw(rng, self.texture_amp),
            texture_seed: rng.random(),
            hue_shift: if self.hue_jitter > 0.0 {
                rng.random_range(-self.hue_jitter..=self.hue_jitter)
            } else {
                0.0
            },
            blur_sigma: draw(rng, self.blur_sigma),
            noise_sigma: draw(rng, self.noise_sigma),
            noise_seed: rng.random(),
            brightness: draw(rng, self.brightness),
            contrast: draw(rng, self.contrast),
        }
    }

    /// True when the two ranges share no palette, texture, blur or noise
    /// value.
    pub fn disjoint_from(&self, other: &StyleRanges) -> bool {
        let overlap = |a: Interval, b: Interval| a[0] <= b[1] && b[0] <= a[1];
        self.palettes.iter().all(|p| !other.palettes.contains(p))
            && self.textures.iter().all(|t| !other.textures.contains(t))
            && !overlap(self.blur_sigma, other.blur_sigma)
            && !overlap(self.noise_sigma, other.noise_sigma)
    }
}

/// Everything needed to regenerate the benchmark bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_pretext_train: usize,
    pub n_pretext_val: usize,
    pub seed: u64,
    pub synthetic: StyleRanges,
    pub real: StyleRanges,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 6,
            image_size: 32,
            n_train: 5000,
            n_val: 1000,
            n_pretext_train: 12000,
            n_pretext_val: 1200,
            seed: 7,
            synthetic: StyleRanges::synthetic(),
            real: StyleRanges::real(),
        }
    }
}

impl DatasetSpec {
    pub fn ranges(&self, domain: Domain) -> &StyleRanges {
        match domain {
            Domain::Synthetic => &self.synthetic,
            Domain::Real => &self.real,
        }
    }

    /// Seeds of the four standard splits. Train and validation never share
    /// content draws; the pretext splits use their own seeds.
    pub fn split_seed(&self, split: Split) -> u64 {
        let tag = match split {
            Split::Train => 0x01,
            Split::Val => 0x02,
            Split::PretextTrain => 0x03,
            Split::PretextVal => 0x04,
        };
        mix(self.seed, tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    PretextTrain,
    PretextVal,
}

/// SplitMix64-style seed combiner.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub domain: Domain,
    pub content: ContentLatent,
    pub style: StyleLatent,
}

/// Draw a content latent for `class_id`.
pub fn sample_content(class_id: usize, rng: &mut ChaCha8Rng) -> ContentLatent {
    let scale = rng.random_range(0.45..=0.85);
    let margin = scale / 2.0;
    ContentLatent {
        class_id,
        position: [
            rng.random_range(margin..=1.0 - margin),
            rng.random_range(margin..=1.0 - margin),
        ],
        scale,
        rotation: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

/// Render a sample; the label is the content class by construction.
pub fn make_sample(
    labels: LabelSet,
    content: ContentLatent,
    style: StyleLatent,
    domain: Domain,
    size: usize,
) -> Sample {
    let family = labels.families()[content.class_id];
    let image = render(family, &content, &style, size);
    Sample {
        image,
        label: content.class_id,
        domain,
        content,
        style,
    }
}

/// `n` task-label samples of `domain`. Content draws depend only on
/// `seed`, so two domains generated with one seed are paired.
pub fn generate_split(spec: &DatasetSpec, domain: Domain, n: usize, seed: u64) -> Vec<Sample> {
    generate_split_with(spec, LabelSet::Task, domain, n, seed)
}

pub fn generate_split_with(
    spec: &DatasetSpec,
    labels: LabelSet,
    domain: Domain,
    n: usize,
    seed: u64,
) -> Vec<Sample> {
    let n_classes = match labels {
        LabelSet::Task => spec.n_classes.min(TASK_FAMILIES.len()),
        LabelSet::Pretext => PRETEXT_FAMILIES.len(),
    };
    let mut content_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xc0));
    let mut style_rng = ChaCha8Rng::seed_from_u64(mix(
        seed,
        match domain {
            Domain::Synthetic => 0x51,
            Domain::Real => 0x52,
        },
    ));
    let ranges = spec.ranges(domain);
    let latents: Vec<(ContentLatent, StyleLatent)> = (0..n)
        .map(|i| {
            (
                sample_content(i % n_classes, &mut content_rng),
                ranges.sample(&mut style_rng),
            )
        })
        .collect();
    par::map_indexed(n, |i| {
        let (c, s) = latents[i].clone();
        make_sample(labels, c, s, domain, spec.image_size)
    })
}

/// The four standard splits of a benchmark.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub pretext_train: Vec<Sample>,
    pub pretext_val: Vec<Sample>,
}

impl Benchmark {
    pub fn generate(spec: &DatasetSpec) -> Self {
        Self {
            spec: spec.clone(),
            train: generate_split(spec, Domain::Synthetic, spec.n_train, spec.split_seed(Split::Train)),
            val: generate_split(spec, Domain::Real, spec.n_val, spec.split_seed(Split::Val)),
            pretext_train: generate_split_with(
                spec,
                LabelSet::Pretext,
                Domain::Real,
                spec.n_pretext_train,
                spec.split_seed(Split::PretextTrain),
            ),
            pretext_val: generate_split_with(
                spec,
                LabelSet::Pretext,
                Domain::Real,
                spec.n_pretext_val,
                spec.split_seed(Split::PretextVal),
            ),
        }
    }
}

/// Stack sample images into `[n, 3, h, w]`.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&imgs)
}

/// Write `<name>_images.gtsr`, `<name>_labels.gtsr` and a metadata sidecar.
pub fn export_split(dir: &Path, name: &str, samples: &[Sample], spec: &DatasetSpec, seed: u64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    fs::create_dir_all(dir)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    io::save_tensor(dir.join(format!("{name}_images.gtsr")), &stack_images(&refs)?)?;
    let labels = Tensor::from_vec(samples.iter().map(|s| s.label as f64).collect());
    io::save_tensor(dir.join(format!("{name}_labels.gtsr")), &labels)?;
    let meta = serde_json::json!({
        "schema": 1,
        "split": name,
        "n": samples.len(),
        "seed": seed,
        "domain": samples[0].domain,
        "spec": spec,
    });
    fs::write(dir.join(format!("{name}_meta.json")), serde_json::to_string_pretty(&meta)?)?;
    let latents: Vec<_> = samples
        .iter()
        .map(|s| serde_json::json!({"content": s.content, "style": s.style}))
        .collect();
    fs::write(dir.join(format!("{name}_latents.json")), serde_json::to_string(&latents)?)?;
    Ok(())
}

#[derive(Deserialize)]
struct LatentRecord {
    content: ContentLatent,
    style: StyleLatent,
}

/// Full samples of an exported split: pixels and labels from the tensor
/// files, domain from the metadata, latents from the sidecar.
pub fn import_samples(dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let (images, labels) = import_split(dir, name)?;
    let meta_path = dir.join(format!("{name}_meta.json"));
    let meta: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", meta_path.display())))?,
    )?;
    let domain: Domain = serde_json::from_value(meta["domain"].clone())?;
    let lat_path = dir.join(format!("{name}_latents.json"));
    let latents: Vec<LatentRecord> = serde_json::from_str(
        &fs::read_to_string(&lat_path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", lat_path.display())))?,
    )?;
    if latents.len() != labels.len() {
        return Err(Error::Format(format!(
            "split {name}: {} latents vs {} labels",
            latents.len(),
            labels.len()
        )));
    }
    let per = images.numel() / labels.len().max(1);
    let shape = images.shape()[1..].to_vec();
    latents
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (l, label))| {
            Ok(Sample {
                image: Tensor::new(shape.clone(), images.data()[i * per..(i + 1) * per].to_vec())?,
                label,
                domain,
                content: l.content,
                style: l.style,
            })
        })
        .collect()
}

/// File name of the dataset description written next to the splits.
pub const DATASET_FILE: &str = "dataset.json";

impl Benchmark {
    /// Split names used by [`Benchmark::export`].
    pub const SPLITS: [&'static str; 4] = ["train", "val", "pretext_train", "pretext_val"];

    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(DATASET_FILE), serde_json::to_string_pretty(&self.spec)?)?;
        let splits = [
            (&self.train, Split::Train),
            (&self.val, Split::Val),
            (&self.pretext_train, Split::PretextTrain),
            (&self.pretext_val, Split::PretextVal),
        ];
        for (name, (samples, split)) in Self::SPLITS.iter().zip(splits) {
            if !samples.is_empty() {
                export_split(dir, name, samples, &self.spec, self.spec.split_seed(split))?;
            }
        }
        Ok(())
    }

    /// Load what [`Benchmark::export`] wrote; absent splits come back empty.
    pub fn import(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_FILE);
        let spec: DatasetSpec = serde_json::from_str(
            &fs::read_to_string(&path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?,
        )?;
        let load = |name: &str| -> Result<Vec<Sample>> {
            if dir.join(format!("{name}_labels.gtsr")).exists() {
                import_samples(dir, name)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Self {
            spec,
            train: load("train")?,
            val: load("val")?,
            pretext_train: load("pretext_train")?,
            pretext_val: load("pretext_val")?,
        })
    }
}

/// Images and labels of an exported split.
pub fn import_split(dir: &Path, name: &str) -> Result<(Tensor, Vec<usize>)> {
    let images = io::load_tensor(dir.join(format!("{name}_images.gtsr")))?;
    let labels = io::load_tensor(dir.join(format!("{name}_labels.gtsr")))?;
    if images.rank() != 4 || images.shape()[0] != labels.numel() {
        return Err(Error::Format(format!(
            "split {name}: {} images vs {} labels",
            images.shape().first().copied().unwrap_or(0),
            labels.numel()
        )));
    }
    Ok((images, labels.data().iter().map(|&v| v as usize).collect()))
}
