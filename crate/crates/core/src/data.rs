//! Synthetic identity datasets with controllable long-tail imbalance, and the
//! embedding providers used to initialize code vectors from class means.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GifError, Result};
use crate::sphere::{dot, normalize_in_place, CodeVectorMatrix, UnitVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub features: Vec<f64>,
}

/// Parameters of the synthetic identity generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentitySpec {
    pub m: usize,
    pub d: usize,
    /// Concentration of samples around their prototype; per-coordinate noise
    /// is `1/sqrt(dispersion)`. Infinite means noise-free samples.
    pub dispersion: f64,
    /// Number of super-clusters prototypes are drawn around; 0 or 1 draws
    /// prototypes uniformly on the sphere.
    pub groups: usize,
    /// Approximate norm of the perturbation of a prototype away from its
    /// group centre.
    pub group_spread: f64,
    /// Minimum cosine distance between any two prototypes.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for IdentitySpec {
    fn default() -> Self {
        Self {
            m: 64,
            d: 32,
            dispersion: 200.0,
            groups: 0,
            group_spread: 0.6,
            min_separation: 0.0,
            seed: 0,
        }
    }
}

/// Identity prototypes on the sphere and a sampler around them.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySampler {
    prototypes: Vec<UnitVector>,
    sigma: f64,
}

fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `m` prototypes drawn uniformly on `S^{d-1}` with Gaussian-perturbed samples.
pub fn gen_identities(m: usize, d: usize, dispersion: f64, seed: u64) -> Result<IdentitySampler> {
    gen_identity_mixture(&IdentitySpec { m, d, dispersion, seed, ..Default::default() })
}

pub fn gen_identity_mixture(spec: &IdentitySpec) -> Result<IdentitySampler> {
    if spec.m < 2 || spec.d < 2 {
        return Err(GifError::config(format!("need m >= 2 and d >= 2, got m={} d={}", spec.m, spec.d)));
    }
    if !(spec.dispersion > 0.0) {
        return Err(GifError::config("dispersion must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres: Vec<UnitVector> = (0..spec.groups.max(1))
        .map(|_| UnitVector::random(spec.d, &mut rng))
        .collect::<Result<_>>()?;
    let spread = spec.group_spread / (spec.d as f64).sqrt();

    let mut prototypes: Vec<UnitVector> = Vec::with_capacity(spec.m);
    const MAX_TRIES: usize = 10_000;
    for y in 0..spec.m {
        let mut tries = 0;
        let proto = loop {
            let candidate = if spec.groups <= 1 {
                UnitVector::random(spec.d, &mut rng)?
            } else {
                let c = &centres[y % centres.len()];
                let mut v = gaussian(spec.d, &mut rng);
                for (x, ci) in v.iter_mut().zip(c.as_slice()) {
                    *x = ci + spread * *x;
                }
                crate::sphere::normalize(&v)?
            };
            let clear = prototypes
                .iter()
                .all(|p| 1.0 - p.dot(&candidate) >= spec.min_separation);
            if clear {
                break candidate;
            }
            tries += 1;
            if tries >= MAX_TRIES {
                return Err(GifError::config(format!(
                    "could not place prototype {y} at cosine distance >= {}",
                    spec.min_separation
                )));
            }
        };
        prototypes.push(proto);
    }
    let sigma = if spec.dispersion.is_infinite() { 0.0 } else { 1.0 / spec.dispersion.sqrt() };
    Ok(IdentitySampler { prototypes, sigma })
}

impl IdentitySampler {
    pub fn m(&self) -> usize {
        self.prototypes.len()
    }

    pub fn d(&self) -> usize {
        self.prototypes[0].dim()
    }

    pub fn prototype(&self, y: usize) -> &UnitVector {
        &self.prototypes[y]
    }

    pub fn prototypes(&self) -> CodeVectorMatrix {
        CodeVectorMatrix::from_rows(&self.prototypes).expect("prototypes are valid unit rows")
    }

    /// One sample of identity `y`: its prototype plus isotropic Gaussian noise,
    /// renormalized.
    pub fn draw(&self, y: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.prototypes[y].as_slice();
        if self.sigma == 0.0 {
            return p.to_vec();
        }
        let mut v = gaussian(p.len(), rng);
        for (x, pi) in v.iter_mut().zip(p) {
            *x = pi + self.sigma * *x;
        }
        if normalize_in_place(&mut v).is_none() {
            return p.to_vec();
        }
        v
    }

    /// `per_identity` fresh samples for every identity, in label order, with
    /// ids starting at `first_id`.
    pub fn draw_per_identity(&self, per_identity: usize, seed: u64, first_id: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(per_identity * self.m());
        for y in 0..self.m() {
            for _ in 0..per_identity {
                let id = first_id + out.len() as u64;
                out.push(Sample { id, label: y, features: self.draw(y, &mut rng) });
            }
        }
        out
    }
}

/// Labeled samples with per-identity counts and the imbalance that produced
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailDataset {
    pub samples: Vec<Sample>,
    pub m: usize,
    pub counts: Vec<usize>,
    pub head_fraction: f64,
    pub head_count: usize,
    pub tail_count: usize,
}

/// Per-identity sample counts, written alongside generated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub m: usize,
    pub samples: usize,
    pub head_fraction: f64,
    pub head_count: usize,
    pub tail_count: usize,
    pub counts: Vec<usize>,
}

impl LongTailDataset {
    /// Wraps already-labeled samples; labels must cover `0..m` densely.
    pub fn from_samples(samples: Vec<Sample>, m: usize) -> Result<Self> {
        let mut counts = vec![0usize; m];
        for s in &samples {
            if s.label >= m {
                return Err(GifError::LabelOutOfRange { label: s.label, m });
            }
            counts[s.label] += 1;
        }
        if let Some(y) = counts.iter().position(|&c| c == 0) {
            return Err(GifError::EmptyClass(y));
        }
        let head_count = *counts.iter().max().unwrap_or(&0);
        let tail_count = *counts.iter().min().unwrap_or(&0);
        let head_fraction = counts.iter().filter(|&&c| c == head_count).count() as f64 / m as f64;
        Ok(Self { samples, m, counts, head_fraction, head_count, tail_count })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn head_identities(&self) -> usize {
        head_identities(self.m, self.head_fraction)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            m: self.m,
            samples: self.samples.len(),
            head_fraction: self.head_fraction,
            head_count: self.head_count,
            tail_count: self.tail_count,
            counts: self.counts.clone(),
        }
    }
}

fn head_identities(m: usize, head_fraction: f64) -> usize {
    ((head_fraction * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

/// Draws `head_count` samples for the first `ceil(head_fraction * m)`
/// identities and `tail_count` for the rest, then shuffles.
pub fn sample_longtail(
    sampler: &IdentitySampler,
    head_fraction: f64,
    head_count: usize,
    tail_count: usize,
    seed: u64,
) -> Result<LongTailDataset> {
    if tail_count == 0 || head_count < tail_count {
        return Err(GifError::config(format!(
            "need head_count >= tail_count >= 1, got {head_count} / {tail_count}"
        )));
    }
    if !(0.0..=1.0).contains(&head_fraction) {
        return Err(GifError::config(format!("head_fraction {head_fraction} outside [0, 1]")));
    }
    let m = sampler.m();
    let heads = head_identities(m, head_fraction);
    let counts: Vec<usize> = (0..m).map(|y| if y < heads { head_count } else { tail_count }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(counts.iter().sum());
    for (y, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let id = samples.len() as u64;
            samples.push(Sample { id, label: y, features: sampler.draw(y, &mut rng) });
        }
    }
    samples.shuffle(&mut rng);
    Ok(LongTailDataset { samples, m, counts, head_fraction, head_count, tail_count })
}

/// Source of the pretrained-style embeddings averaged into initial code
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingProvider {
    /// The sample features are used directly.
    Features { d: usize },
    /// Embeddings looked up by sample id, e.g. loaded from an embedding file.
    Table { d: usize, embeddings: HashMap<u64, Vec<f64>> },
}

impl EmbeddingProvider {
    pub fn d(&self) -> usize {
        match self {
            EmbeddingProvider::Features { d } | EmbeddingProvider::Table { d, .. } => *d,
        }
    }

    pub fn embed<'a>(&'a self, sample: &'a Sample) -> Result<&'a [f64]> {
        let v = match self {
            EmbeddingProvider::Features { .. } => sample.features.as_slice(),
            EmbeddingProvider::Table { embeddings, .. } => embeddings
                .get(&sample.id)
                .map(|v| v.as_slice())
                .ok_or_else(|| GifError::format(format!("no embedding for sample {}", sample.id)))?,
        };
        if v.len() != self.d() {
            return Err(GifError::DimensionMismatch { expected: self.d(), got: v.len() });
        }
        Ok(v)
    }
}

/// Code vectors initialized as the normalized per-identity mean embedding.
pub fn per_class_mean_init(
    provider: &EmbeddingProvider,
    dataset: &LongTailDataset,
) -> Result<CodeVectorMatrix> {
    let d = provider.d();
    let mut sums = vec![0.0; dataset.m * d];
    let mut counts = vec![0usize; dataset.m];
    for s in &dataset.samples {
        if s.label >= dataset.m {
            return Err(GifError::LabelOutOfRange { label: s.label, m: dataset.m });
        }
        let e = provider.embed(s)?;
        for (acc, x) in sums[s.label * d..(s.label + 1) * d].iter_mut().zip(e) {
            *acc += x;
        }
        counts[s.label] += 1;
    }
    for (y, row) in sums.chunks_mut(d).enumerate() {
        if counts[y] == 0 {
            return Err(GifError::EmptyClass(y));
        }
        let scale = 1.0 / counts[y] as f64;
        row.iter_mut().for_each(|x| *x *= scale);
        if dot(row, row).sqrt() <= 1e-12 || normalize_in_place(row).is_none() {
            return Err(GifError::DegenerateClass(y));
        }
    }
    CodeVectorMatrix::from_flat(dataset.m, d, sums)
}
