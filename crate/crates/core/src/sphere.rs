//! Unit-hypersphere primitives and the Gaussian-potential uniformity objective.
//!
//! Code vectors live on `S^{d-1}`. The uniformity loss is the log of the mean
//! Gaussian potential `exp(-t |h_i - h_j|^2)` over distinct pairs, where the
//! outer index runs over a (possibly sampled) row subset and the inner index
//! over every other row. It is minimized by configurations that spread the
//! rows evenly over the sphere.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GifError, Result};

/// Tolerance used for every unit-norm invariant in the crate.
pub const UNIT_TOL: f64 = 1e-6;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Removes the component of `g` along the unit vector `x`.
#[inline]
pub fn project_tangent(g: &mut [f64], x: &[f64]) {
    let along = dot(g, x);
    for (gi, xi) in g.iter_mut().zip(x) {
        *gi -= along * xi;
    }
}

/// Scales `v` to unit length in place. Returns the original norm, or `None`
/// when the vector has no direction.
pub fn normalize_in_place(v: &mut [f64]) -> Option<f64> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Some(n)
}

/// A point on the unit hypersphere of dimension `d >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }

    /// Draws a direction uniformly from the sphere.
    pub fn random<R: rand::Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            if norm(&v) > 1e-12 {
                return normalize(&v);
            }
        }
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Rescales `v` to unit length, preserving its direction.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    if v.len() < 2 {
        return Err(GifError::Degenerate(format!(
            "unit vectors need dimension >= 2, got {}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    match normalize_in_place(&mut out) {
        Some(_) => Ok(UnitVector(out)),
        None => Err(GifError::Degenerate("cannot normalize a zero-norm vector".into())),
    }
}

/// Gaussian potential kernel `exp(-t |a - b|^2)`.
pub fn gaussian_potential(a: &UnitVector, b: &UnitVector, t: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(GifError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    if !(t > 0.0) {
        return Err(GifError::config(format!("kernel temperature must be positive, got {t}")));
    }
    Ok((-t * squared_distance(a.as_slice(), b.as_slice())).exp())
}

/// The `m x d` matrix of per-identity code vectors, one unit-norm row per
/// identity label `0..m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVectorMatrix {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl CodeVectorMatrix {
    /// Builds a matrix from row-major data, normalizing any row whose norm is
    /// off by more than [`UNIT_TOL`]. Rows within tolerance are kept verbatim.
    pub fn from_flat(m: usize, d: usize, mut data: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(GifError::Degenerate(format!("need at least 2 code vectors, got {m}")));
        }
        if d < 2 {
            return Err(GifError::Degenerate(format!("need dimension >= 2, got {d}")));
        }
        if data.len() != m * d {
            return Err(GifError::DimensionMismatch { expected: m * d, got: data.len() });
        }
        for (i, row) in data.chunks_mut(d).enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOL && normalize_in_place(row).is_none() {
                return Err(GifError::Degenerate(format!("row {i} has zero norm")));
            }
        }
        Ok(Self { m, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(GifError::DimensionMismatch { expected: d, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(rows.len(), d, data)
    }

    /// `m` rows drawn uniformly from the sphere.
    pub fn random(m: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            data.extend(UnitVector::random(d, &mut rng)?.into_inner());
        }
        Self::from_flat(m, d, data)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn unit_row(&self, i: usize) -> UnitVector {
        UnitVector(self.row(i).to_vec())
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Settings for the code-vector optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniformityConfig {
    /// Kernel temperature `t`.
    pub t: f64,
    /// Rows sampled per step; clamped to `m`.
    pub batch_rows: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for UniformityConfig {
    fn default() -> Self {
        Self { t: 2.0, batch_rows: 2048, lr: 0.1, epochs: 1000, seed: 0 }
    }
}

impl UniformityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0) {
            return Err(GifError::config(format!("t must be positive, got {}", self.t)));
        }
        if self.batch_rows == 0 {
            return Err(GifError::config("batch_rows must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(GifError::config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

fn check_subset(h: &CodeVectorMatrix, rows: &[usize]) -> Result<Vec<u32>> {
    if rows.is_empty() {
        return Err(GifError::EmptySubset);
    }
    let mut counts = vec![0u32; h.m];
    for &r in rows {
        if r >= h.m {
            return Err(GifError::IndexOutOfRange { index: r, len: h.m });
        }
        counts[r] += 1;
    }
    Ok(counts)
}

/// Sum over `i in rows`, `j != i` of the pairwise potentials.
fn potential_sum(h: &CodeVectorMatrix, t: f64, rows: &[usize]) -> f64 {
    let per_row: Vec<f64> = rows
        .par_iter()
        .map(|&i| {
            let hi = h.row(i);
            (0..h.m)
                .filter(|&j| j != i)
                .map(|j| (-t * squared_distance(hi, h.row(j))).exp())
                .sum::<f64>()
        })
        .collect();
    per_row.iter().sum()
}

/// Log of the mean pairwise Gaussian potential between the rows in `rows` and
/// every other row of `h`. Self-pairs are excluded.
pub fn uniformity_loss(h: &CodeVectorMatrix, t: f64, rows: &[usize]) -> Result<f64> {
    check_subset(h, rows)?;
    if !(t > 0.0) {
        return Err(GifError::config(format!("t must be positive, got {t}")));
    }
    let pairs = (rows.len() * (h.m - 1)) as f64;
    Ok((potential_sum(h, t, rows) / pairs).ln())
}

/// Full-batch uniformity loss over all rows.
pub fn uniformity_loss_full(h: &CodeVectorMatrix, t: f64) -> f64 {
    let all: Vec<usize> = (0..h.m).collect();
    let pairs = (h.m * (h.m - 1)) as f64;
    (potential_sum(h, t, &all) / pairs).ln()
}

/// Euclidean gradient of [`uniformity_loss`] with respect to each distinct row
/// of `rows`, in ascending row order.
pub fn uniformity_euclidean_grad(
    h: &CodeVectorMatrix,
    t: f64,
    rows: &[usize],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let counts = check_subset(h, rows)?;
    if !(t > 0.0) {
        return Err(GifError::config(format!("t must be positive, got {t}")));
    }
    let total = potential_sum(h, t, rows);
    let targets: Vec<usize> = (0..h.m).filter(|&i| counts[i] > 0).collect();
    let d = h.d;
    let grads = targets
        .par_iter()
        .map(|&a| {
            // Row `a` enters the sum once per occurrence as the outer index and
            // once per occurrence of each other subset row as the inner index.
            let ha = h.row(a);
            let mut g = vec![0.0; d];
            for j in 0..h.m {
                if j == a {
                    continue;
                }
                let weight = (counts[a] + counts[j]) as f64;
                if weight == 0.0 {
                    continue;
                }
                let hj = h.row(j);
                let gij = (-t * squared_distance(ha, hj)).exp();
                let coef = -2.0 * t * weight * gij / total;
                for k in 0..d {
                    g[k] += coef * (ha[k] - hj[k]);
                }
            }
            (a, g)
        })
        .collect();
    Ok(grads)
}

/// Riemannian gradient of [`uniformity_loss`]: the Euclidean gradient of each
/// selected row projected onto the tangent space at that row.
pub fn uniformity_grad(
    h: &CodeVectorMatrix,
    t: f64,
    rows: &[usize],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut grads = uniformity_euclidean_grad(h, t, rows)?;
    for (a, g) in grads.iter_mut() {
        project_tangent(g, h.row(*a));
    }
    Ok(grads)
}

/// Riemannian gradient descent on the uniformity loss.
///
/// Each epoch samples `min(batch_rows, m)` rows, steps them along the negative
/// tangent gradient and renormalizes. The result is never worse (in full-batch
/// loss) than the input.
pub fn optimize_code_vectors(
    init: &CodeVectorMatrix,
    cfg: &UniformityConfig,
) -> Result<CodeVectorMatrix> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(init.clone());
    }
    let mut h = init.clone();
    let batch = cfg.batch_rows.min(h.m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = uniformity_loss_full(init, cfg.t);

    for epoch in 0..cfg.epochs {
        let rows: Vec<usize> = if batch == h.m {
            (0..h.m).collect()
        } else {
            let mut r = index::sample(&mut rng, h.m, batch).into_vec();
            r.sort_unstable();
            r
        };
        let grads = uniformity_grad(&h, cfg.t, &rows)?;
        for (a, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(GifError::NumericAbort {
                    iteration: epoch,
                    detail: format!("non-finite uniformity gradient on row {a}"),
                });
            }
            let row = h.row_mut(a);
            for (x, gx) in row.iter_mut().zip(&g) {
                *x -= cfg.lr * gx;
            }
            if normalize_in_place(row).is_none() {
                return Err(GifError::NumericAbort {
                    iteration: epoch,
                    detail: format!("row {a} lost its direction"),
                });
            }
        }
    }

    let last = uniformity_loss_full(&h, cfg.t);
    if !last.is_finite() {
        return Err(GifError::NumericAbort {
            iteration: cfg.epochs,
            detail: format!("final uniformity loss is {last}"),
        });
    }
    if last > initial {
        log::warn!("uniformity optimization ended above its start ({last} > {initial}); keeping input");
        return Ok(init.clone());
    }
    Ok(h)
}

/// Min, max and mean pairwise cosine distance (`1 - cos`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub min_dist: f64,
    pub max_dist: f64,
    pub mean_dist: f64,
    /// Number of sampled pairs behind `max_dist` when the estimate is sampled;
    /// `None` when every pair was enumerated.
    pub sampled_pairs: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationOptions {
    /// Largest `m` for which every pair is enumerated.
    pub exact_limit: usize,
    pub sample_pairs: u64,
    pub seed: u64,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        Self { exact_limit: 20_000, sample_pairs: 1_000_000, seed: 0 }
    }
}

#[inline]
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}

pub fn separation_metrics(h: &CodeVectorMatrix) -> Result<SeparationReport> {
    separation_metrics_with(h, &SeparationOptions::default())
}

/// Pairwise separation of the rows of `h`.
///
/// Beyond `exact_limit` rows the maximum comes from uniformly sampled pairs.
/// The mean is always exact (it follows from the norm of the row sum) and the
/// minimum is always exact via a nearest-neighbour pass.
pub fn separation_metrics_with(
    h: &CodeVectorMatrix,
    opts: &SeparationOptions,
) -> Result<SeparationReport> {
    let m = h.m;
    if m < 2 {
        return Err(GifError::Degenerate("separation needs at least two rows".into()));
    }
    let pairs = (m * (m - 1) / 2) as f64;

    // sum_{i<j} h_i.h_j = (|sum_i h_i|^2 - sum_i |h_i|^2) / 2
    let mut total = vec![0.0; h.d];
    let mut sq = 0.0;
    for r in h.rows() {
        for (t, x) in total.iter_mut().zip(r) {
            *t += x;
        }
        sq += dot(r, r);
    }
    let cos_sum = (dot(&total, &total) - sq) / 2.0;
    let mean_dist = (1.0 - cos_sum / pairs).clamp(0.0, 2.0);

    // Per-row nearest and farthest neighbour among later rows.
    let extremes = |i: usize| {
        let hi = h.row(i);
        let mut lo = f64::INFINITY;
        let mut hi_d = f64::NEG_INFINITY;
        for j in (i + 1)..m {
            let dist = cosine_distance(hi, h.row(j));
            lo = lo.min(dist);
            hi_d = hi_d.max(dist);
        }
        (lo, hi_d)
    };

    if m <= opts.exact_limit {
        let per_row: Vec<(f64, f64)> = (0..m - 1).into_par_iter().map(extremes).collect();
        let min_dist = per_row.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_dist = per_row.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        return Ok(SeparationReport {
            min_dist,
            max_dist,
            mean_dist: mean_dist.clamp(min_dist, max_dist),
            sampled_pairs: None,
        });
    }

    let min_dist = (0..m - 1)
        .into_par_iter()
        .map(|i| extremes(i).0)
        .reduce(|| f64::INFINITY, f64::min);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_dist = min_dist;
    for _ in 0..opts.sample_pairs {
        let pick = index::sample(&mut rng, m, 2);
        max_dist = max_dist.max(cosine_distance(h.row(pick.index(0)), h.row(pick.index(1))));
    }
    Ok(SeparationReport {
        min_dist,
        max_dist: max_dist.max(mean_dist),
        mean_dist,
        sampled_pairs: Some(opts.sample_pairs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(m: usize, phase: f64) -> CodeVectorMatrix {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|k| {
                let a = phase + 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                vec![a.cos(), a.sin()]
            })
            .collect();
        CodeVectorMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert!((u.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((u.as_slice()[1] - 0.8).abs() < 1e-12);
        assert_eq!(normalize(&[1.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(GifError::Degenerate(_))));
        assert!(normalize(&[2.0]).is_err());
    }

    #[test]
    fn gaussian_potential_examples() {
        let a = normalize(&[1.0, 0.0]).unwrap();
        let b = normalize(&[-1.0, 0.0]).unwrap();
        let c = normalize(&[0.0, 1.0]).unwrap();
        assert_eq!(gaussian_potential(&a, &a, 2.0).unwrap(), 1.0);
        assert!((gaussian_potential(&a, &b, 2.0).unwrap() - (-8.0f64).exp()).abs() < 1e-15);
        assert!((gaussian_potential(&a, &b, 2.0).unwrap() - 3.3546e-4).abs() < 1e-8);
        assert!((gaussian_potential(&a, &c, 1.0).unwrap() - 0.135_335_283).abs() < 1e-8);
        let e = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            gaussian_potential(&a, &e, 1.0),
            Err(GifError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniformity_loss_examples() {
        let h = circle(2, 0.0);
        assert!((uniformity_loss(&h, 2.0, &[0, 1]).unwrap() + 8.0).abs() < 1e-12);

        let same = CodeVectorMatrix::from_rows(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]).unwrap();
        assert!(uniformity_loss(&same, 2.0, &[0, 1, 2]).unwrap().abs() < 1e-15);

        // Each row sees two orthogonal neighbours and one antipode.
        let sq = circle(4, 0.0);
        let expected = ((2.0 * (-2.0f64).exp() + (-4.0f64).exp()) / 3.0).ln();
        assert!((uniformity_loss(&sq, 1.0, &[0, 1, 2, 3]).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 2.339_989).abs() < 1e-6);

        assert!(matches!(uniformity_loss(&sq, 1.0, &[]), Err(GifError::EmptySubset)));
        assert!(uniformity_loss(&sq, 1.0, &[4]).is_err());
    }

    #[test]
    fn antipodal_pair_is_stationary() {
        let h = circle(2, 0.3);
        for (_, g) in uniformity_grad(&h, 2.0, &[0, 1]).unwrap() {
            assert!(norm(&g) < 1e-12);
        }
    }

    #[test]
    fn riemannian_grad_is_tangent() {
        let h = CodeVectorMatrix::random(7, 5, 3).unwrap();
        for (a, g) in uniformity_grad(&h, 2.0, &[0, 2, 5]).unwrap() {
            assert!(dot(&g, h.row(a)).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizer_zero_epochs_is_identity() {
        let h = CodeVectorMatrix::random(5, 3, 1).unwrap();
        let cfg = UniformityConfig { epochs: 0, ..Default::default() };
        assert_eq!(optimize_code_vectors(&h, &cfg).unwrap(), h);
    }

    #[test]
    fn optimizer_square_and_antipode() {
        let cfg = UniformityConfig { epochs: 1000, ..Default::default() };
        let sq = optimize_code_vectors(&CodeVectorMatrix::random(4, 2, 11).unwrap(), &cfg).unwrap();
        let rep = separation_metrics(&sq).unwrap();
        assert!((rep.min_dist - 1.0).abs() < 0.02, "{rep:?}");

        let pair = optimize_code_vectors(&CodeVectorMatrix::random(2, 3, 5).unwrap(), &cfg).unwrap();
        assert!((separation_metrics(&pair).unwrap().min_dist - 2.0).abs() < 0.01);
    }

    #[test]
    fn separation_examples() {
        let two = circle(2, 0.0);
        let r = separation_metrics(&two).unwrap();
        assert_eq!((r.min_dist, r.max_dist, r.mean_dist), (2.0, 2.0, 2.0));

        let sq = circle(4, 0.0);
        let r = separation_metrics(&sq).unwrap();
        assert!((r.min_dist - 1.0).abs() < 1e-12);
        assert!((r.max_dist - 2.0).abs() < 1e-12);
        assert!((r.mean_dist - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.sampled_pairs, None);

        let dup = CodeVectorMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(separation_metrics(&dup).unwrap().min_dist, 0.0);
    }

    #[test]
    fn sampled_separation_keeps_exact_min_and_mean() {
        let h = CodeVectorMatrix::random(60, 4, 9).unwrap();
        let exact = separation_metrics(&h).unwrap();
        let opts = SeparationOptions { exact_limit: 10, sample_pairs: 20_000, seed: 1 };
        let approx = separation_metrics_with(&h, &opts).unwrap();
        assert_eq!(approx.sampled_pairs, Some(20_000));
        assert!((approx.min_dist - exact.min_dist).abs() < 1e-12);
        assert!((approx.mean_dist - exact.mean_dist).abs() < 1e-9);
        assert!(approx.max_dist <= exact.max_dist + 1e-12);
        assert!(approx.min_dist <= approx.mean_dist && approx.mean_dist <= approx.max_dist);
    }

    #[test]
    fn from_flat_rejects_bad_shapes() {
        assert!(CodeVectorMatrix::from_flat(1, 2, vec![1.0, 0.0]).is_err());
        assert!(CodeVectorMatrix::from_flat(2, 2, vec![1.0, 0.0, 0.0]).is_err());
        assert!(CodeVectorMatrix::from_flat(2, 2, vec![1.0, 0.0, 0.0, 0.0]).is_err());
        let h = CodeVectorMatrix::from_flat(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(h.row(1), &[0.0, 1.0]);
    }
}
