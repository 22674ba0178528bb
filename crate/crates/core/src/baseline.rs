//! Margin-free cosine-softmax baseline over learnable centroids, with the
//! pull/push split of the centroid gradient used to study minority collapse.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongTailDataset;
use crate::error::{GifError, Result};
use crate::model::Backbone;
use crate::nn::{log_sum_exp, normalize_backward, softmax, Sgd};
use crate::sphere::{dot, norm, normalize_in_place, separation_metrics, CodeVectorMatrix, SeparationReport};

/// `m` unit-norm centroids of dimension `d` and the logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidMatrix {
    m: usize,
    d: usize,
    /// Row-major `m x d`; row `j` is `w_j`.
    w: Vec<f64>,
    pub scale: f64,
}

impl CentroidMatrix {
    pub fn new(vectors: &CodeVectorMatrix, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(GifError::config(format!("scale must be non-negative, got {scale}")));
        }
        Ok(Self { m: vectors.m(), d: vectors.d(), w: vectors.as_flat().to_vec(), scale })
    }

    pub fn random(m: usize, d: usize, scale: f64, seed: u64) -> Result<Self> {
        Self::new(&CodeVectorMatrix::random(m, d, seed)?, scale)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.w[j * self.d..(j + 1) * self.d]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.w
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn renormalize(&mut self) {
        for row in self.w.chunks_mut(self.d) {
            normalize_in_place(row);
        }
    }

    pub fn to_vectors(&self) -> Result<CodeVectorMatrix> {
        CodeVectorMatrix::from_flat(self.m, self.d, self.w.clone())
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.w.chunks(self.d).map(|w| self.scale * dot(w, z)).collect()
    }
}

/// Cross-entropy of one embedding against `s * cos(w_k, z)` logits, and the
/// softmax probabilities.
pub fn ce_forward(z: &[f64], w: &CentroidMatrix, label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= w.m {
        return Err(GifError::LabelOutOfRange { label, m: w.m });
    }
    if z.len() != w.d {
        return Err(GifError::DimensionMismatch { expected: w.d, got: z.len() });
    }
    let logits = w.logits(z);
    Ok((log_sum_exp(&logits) - logits[label], softmax(&logits)))
}

/// Per-centroid force magnitudes, summed over the batches they were measured
/// on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullPushReport {
    pub pull_norm: Vec<f64>,
    pub push_norm: Vec<f64>,
}

impl PullPushReport {
    pub fn zeros(m: usize) -> Self {
        Self { pull_norm: vec![0.0; m], push_norm: vec![0.0; m] }
    }

    pub fn accumulate(&mut self, other: &PullPushReport) {
        for (a, b) in self.pull_norm.iter_mut().zip(&other.pull_norm) {
            *a += b;
        }
        for (a, b) in self.push_norm.iter_mut().zip(&other.push_norm) {
            *a += b;
        }
    }

    /// `push / pull` per centroid; infinite where nothing pulled.
    pub fn ratio(&self) -> Vec<f64> {
        self.push_norm
            .iter()
            .zip(&self.pull_norm)
            .map(|(&push, &pull)| if pull > 0.0 { push / pull } else if push > 0.0 { f64::INFINITY } else { 0.0 })
            .collect()
    }

    /// Mean finite push/pull ratio over the given centroids.
    pub fn mean_ratio(&self, centroids: impl IntoIterator<Item = usize>) -> f64 {
        let r = self.ratio();
        let (sum, n) = centroids
            .into_iter()
            .map(|j| r[j])
            .filter(|x| x.is_finite())
            .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Centroid gradient of the batch-mean loss, split so that
/// `-grad = pull + push` for every centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CeGradients {
    /// Row-major `m x d`.
    pub grad: Vec<f64>,
    /// Attraction toward same-class embeddings: `(s/n) sum_{y=j} (1 - p_j) z`.
    pub pull: Vec<f64>,
    /// Repulsion from other-class embeddings: `-(s/n) sum_{y!=j} p_j z`.
    pub push: Vec<f64>,
    pub loss: f64,
    pub report: PullPushReport,
}

pub fn ce_grad_decompose<Z: AsRef<[f64]> + Sync>(
    embeddings: &[Z],
    labels: &[usize],
    w: &CentroidMatrix,
) -> Result<CeGradients> {
    if embeddings.len() != labels.len() {
        return Err(GifError::DimensionMismatch { expected: embeddings.len(), got: labels.len() });
    }
    if embeddings.is_empty() {
        return Err(GifError::Degenerate("empty batch".into()));
    }
    let (m, d) = (w.m, w.d);
    let coef = w.scale / embeddings.len() as f64;
    let mut pull = vec![0.0; m * d];
    let mut push = vec![0.0; m * d];
    let mut loss = 0.0;
    for (z, &y) in embeddings.iter().zip(labels) {
        let z = z.as_ref();
        let (l, p) = ce_forward(z, w, y)?;
        loss += l;
        for (j, pj) in p.iter().enumerate() {
            let (target, c) = if j == y { (&mut pull, coef * (1.0 - pj)) } else { (&mut push, -coef * pj) };
            for (t, zi) in target[j * d..(j + 1) * d].iter_mut().zip(z) {
                *t += c * zi;
            }
        }
    }
    let grad = pull.iter().zip(&push).map(|(a, b)| -(a + b)).collect();
    let report = PullPushReport {
        pull_norm: pull.chunks(d).map(norm).collect(),
        push_norm: push.chunks(d).map(norm).collect(),
    };
    Ok(CeGradients { grad, pull, push, loss: loss / embeddings.len() as f64, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 0.0, batch: 64, seed: 0 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(GifError::config("baseline needs lr > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        if self.batch == 0 {
            return Err(GifError::config("batch must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub backbone: Backbone,
    pub w: CentroidMatrix,
    /// Separation of the centroids before training and after every epoch.
    pub trajectory: Vec<SeparationReport>,
    /// Force magnitudes accumulated over each epoch.
    pub forces: Vec<PullPushReport>,
    pub losses: Vec<f64>,
}

/// Joint SGD on the backbone and centroids; centroids are renormalized after
/// every step.
pub fn train_baseline(
    dataset: &LongTailDataset,
    backbone: Backbone,
    w: CentroidMatrix,
    epochs: usize,
    cfg: &BaselineConfig,
) -> Result<BaselineRun> {
    cfg.validate()?;
    if dataset.m != w.m {
        return Err(GifError::Inconsistent(format!("dataset has {} identities, centroids {}", dataset.m, w.m)));
    }
    if backbone.output_dim() != w.d {
        return Err(GifError::DimensionMismatch { expected: w.d, got: backbone.output_dim() });
    }
    let mut backbone = backbone;
    let mut w = w;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum).with_weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trajectory = vec![separation_metrics(&w.to_vectors()?)?];
    let mut forces = Vec::with_capacity(epochs);
    let mut losses = Vec::with_capacity(epochs);
    let mut step = 0;

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_forces = PullPushReport::zeros(w.m);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch) {
            let traces: Vec<_> = idx
                .par_iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    let t = backbone.net.forward_trace(&s.features);
                    let mut z = t.output.clone();
                    let n = normalize_in_place(&mut z).unwrap_or_else(|| {
                        z.iter_mut().for_each(|v| *v = f64::NAN);
                        f64::NAN
                    });
                    (t, z, n)
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.samples[i].label).collect();
            let zs: Vec<&[f64]> = traces.iter().map(|t| t.1.as_slice()).collect();
            let g = ce_grad_decompose(&zs, &labels, &w)?;
            if !g.loss.is_finite() {
                return Err(GifError::NumericAbort {
                    iteration: step,
                    detail: format!("baseline loss {} on a batch of {} samples", g.loss, idx.len()),
                });
            }
            epoch_loss += g.loss * idx.len() as f64;
            epoch_forces.accumulate(&g.report);

            let coef = w.scale / idx.len() as f64;
            let mut grads = backbone.net.zeros_like();
            for ((trace, z, n), &y) in traces.iter().zip(&labels) {
                let p = softmax(&w.logits(z));
                let mut gz = vec![0.0; w.d];
                for (j, pj) in p.iter().enumerate() {
                    let c = coef * (pj - if j == y { 1.0 } else { 0.0 });
                    for (a, wi) in gz.iter_mut().zip(w.centroid(j)) {
                        *a += c * wi;
                    }
                }
                backbone.net.backward(trace, &normalize_backward(z, *n, &gz), &mut grads);
            }
            let mut params = backbone.net.params_mut();
            params.push(&mut w.w);
            let mut grad_list = grads.params();
            grad_list.push(&g.grad);
            opt.step(params, grad_list);
            w.renormalize();
            step += 1;
        }
        losses.push(epoch_loss / dataset.len() as f64);
        forces.push(epoch_forces);
        trajectory.push(separation_metrics(&w.to_vectors()?)?);
    }
    Ok(BaselineRun { backbone, w, trajectory, forces, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_identities, sample_longtail};
    use rand::SeedableRng;

    fn orthogonal_pair(scale: f64) -> CentroidMatrix {
        CentroidMatrix::new(&CodeVectorMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), scale).unwrap()
    }

    #[test]
    fn forward_examples() {
        let w = CentroidMatrix::random(5, 3, 1.0, 2).unwrap();
        let mut flat = w.clone();
        flat.scale = 0.0;
        let (l, p) = ce_forward(&[1.0, 0.0, 0.0], &flat, 2).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let s = 3.0;
        let (l, _) = ce_forward(&[1.0, 0.0], &orthogonal_pair(s), 0).unwrap();
        assert!((l - (1.0 + (-s).exp()).ln()).abs() < 1e-12);
        assert!(ce_forward(&[1.0, 0.0], &orthogonal_pair(s), 2).is_err());
        assert!(CentroidMatrix::random(2, 2, -1.0, 0).is_err());
    }

    #[test]
    fn decomposition_matches_finite_differences() {
        let w = CentroidMatrix::random(4, 3, 5.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs: Vec<Vec<f64>> = (0..7)
            .map(|_| crate::sphere::UnitVector::random(3, &mut rng).unwrap().into_inner())
            .collect();
        let labels = [0, 1, 1, 3, 0, 0, 1];
        let g = ce_grad_decompose(&zs, &labels, &w).unwrap();
        let mean_loss = |w: &CentroidMatrix| {
            zs.iter().zip(&labels).map(|(z, &y)| ce_forward(z, w, y).unwrap().0).sum::<f64>() / zs.len() as f64
        };
        let eps = 1e-6;
        for k in 0..w.as_flat().len() {
            let mut up = w.clone();
            let mut dn = w.clone();
            up.as_flat_mut()[k] += eps;
            dn.as_flat_mut()[k] -= eps;
            let fd = (mean_loss(&up) - mean_loss(&dn)) / (2.0 * eps);
            assert!((fd - g.grad[k]).abs() < 1e-6, "{k}: {fd} vs {}", g.grad[k]);
            assert!((g.pull[k] + g.push[k] + g.grad[k]).abs() < 1e-12);
        }
        // Class 2 has no positives, so nothing pulls it.
        assert_eq!(g.report.pull_norm[2], 0.0);
        assert!(g.report.push_norm[2] > 0.0);
        assert_eq!(g.report.ratio()[2], f64::INFINITY);
    }

    #[test]
    fn single_class_batch_has_no_push_on_its_centroid() {
        let w = orthogonal_pair(4.0);
        let g = ce_grad_decompose(&[vec![1.0, 0.0], vec![0.6, 0.8]], &[1, 1], &w).unwrap();
        assert_eq!(g.report.push_norm[1], 0.0);
        assert_eq!(g.report.pull_norm[0], 0.0);
    }

    #[test]
    fn zero_epochs_leaves_centroids() {
        let s = gen_identities(6, 4, 50.0, 1).unwrap();
        let ds = sample_longtail(&s, 0.5, 4, 1, 2).unwrap();
        let w = CentroidMatrix::random(6, 4, 16.0, 9).unwrap();
        let run = train_baseline(&ds, Backbone::identity(4), w.clone(), 0, &BaselineConfig::default()).unwrap();
        assert_eq!(run.w, w);
        assert_eq!(run.trajectory.len(), 1);
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let s = gen_identities(8, 4, 100.0, 1).unwrap();
        let ds = sample_longtail(&s, 1.0, 10, 10, 2).unwrap();
        let w = CentroidMatrix::random(8, 4, 16.0, 9).unwrap();
        let bb = Backbone::new(&[4, 8, 4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let cfg = BaselineConfig { lr: 0.05, batch: 16, ..Default::default() };
        let a = train_baseline(&ds, bb.clone(), w.clone(), 20, &cfg).unwrap();
        assert!(a.losses.last().unwrap() < &a.losses[0]);
        assert_eq!(a.trajectory.len(), 21);
        let b = train_baseline(&ds, bb, w, 20, &cfg).unwrap();
        assert_eq!(a.w, b.w);
        for r in a.w.as_flat().chunks(4) {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }
}
