//! The code-prediction model: a backbone producing unit embeddings, one
//! projection head and cosine softmax per code token, and the combined token
//! cross-entropy plus angular-regression objective.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{GifError, Result};
use crate::nn::{log_sum_exp, normalize_backward, softmax, Mlp, MlpTrace, Sgd};
use crate::sphere::{dot, norm, normalize_in_place, CodeVectorMatrix, UnitVector};
use crate::tokenizer::{decode, CodeBook, CodeTree, TreeChild, TreeNode};

/// Maps raw features to a unit-norm embedding `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub net: Mlp,
}

impl Backbone {
    /// MLP through `sizes` (input, hidden..., d) followed by normalization.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Self { net: Mlp::new(sizes, rng)? })
    }

    /// Normalization only: features are already embeddings.
    pub fn identity(d: usize) -> Self {
        Self { net: Mlp::identity(d) }
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Unit embedding of `x`; all zeros when every output unit is inactive.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.net.forward(x);
        unit_or_dead(&mut z);
        z
    }

    fn trace(&self, x: &[f64]) -> (MlpTrace, Vec<f64>, f64) {
        let trace = self.net.forward_trace(x);
        let mut z = trace.output.clone();
        let n = unit_or_dead(&mut z);
        (trace, z, n)
    }
}

/// Projection head and cosine classifier for one token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenHead {
    pub projection: Mlp,
    /// Row-major `v x d`; row `k` is the unit-norm class vector `u_k`.
    pub classifier: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenHeads {
    pub heads: Vec<TokenHead>,
    pub v: usize,
    pub d: usize,
    /// Softmax scale applied to the cosine logits.
    pub scale: f64,
}

impl TokenHeads {
    /// `l` independent heads, each a stack of `head_layers` `d x d` layers
    /// (ReLU between, zero layers is the identity) and `v` random unit class
    /// vectors.
    pub fn new<R: Rng + ?Sized>(
        l: usize,
        v: usize,
        d: usize,
        head_layers: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if l == 0 || v < 2 || d < 2 {
            return Err(GifError::config(format!("invalid head shape l={l} v={v} d={d}")));
        }
        if !(scale >= 0.0) {
            return Err(GifError::config(format!("softmax scale must be non-negative, got {scale}")));
        }
        let heads = (0..l)
            .map(|_| {
                let projection = if head_layers == 0 {
                    Mlp::identity(d)
                } else {
                    Mlp::new(&vec![d; head_layers + 1], rng)?
                };
                let mut classifier = Vec::with_capacity(v * d);
                for _ in 0..v {
                    classifier.extend(UnitVector::random(d, rng)?.into_inner());
                }
                Ok(TokenHead { projection, classifier })
            })
            .collect::<Result<_>>()?;
        Ok(Self { heads, v, d, scale })
    }

    pub fn l(&self) -> usize {
        self.heads.len()
    }

    /// Rescales every class vector to unit norm.
    pub fn renormalize(&mut self) {
        for head in &mut self.heads {
            for row in head.classifier.chunks_mut(self.d) {
                normalize_in_place(row);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(|h| h.projection.param_count() + h.classifier.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GifModel {
    pub backbone: Backbone,
    pub heads: TokenHeads,
}

impl GifModel {
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for p in g.params_mut() {
            p.iter_mut().for_each(|x| *x = 0.0);
        }
        g
    }

    /// Every trainable buffer in a fixed order: backbone, then per head the
    /// projection followed by the class vectors.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.backbone.net.params();
        for h in &self.heads.heads {
            out.extend(h.projection.params());
            out.push(&h.classifier);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.backbone.net.params_mut();
        for h in &mut self.heads.heads {
            out.extend(h.projection.params_mut());
            out.push(&mut h.classifier);
        }
        out
    }

    fn add_assign(&mut self, other: &GifModel) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Weights of the combined objective `sum_j lambda_j CE_j + gamma * L_AR`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GifLossConfig {
    pub gamma_balance: f64,
    pub lambdas: Vec<f64>,
}

impl GifLossConfig {
    /// Uniform `lambda_j = 1/l`.
    pub fn uniform(l: usize, gamma_balance: f64) -> Self {
        Self { gamma_balance, lambdas: vec![1.0 / l as f64; l] }
    }

    /// Token weights are rescaled to sum to one.
    pub fn new(gamma_balance: f64, lambdas: Vec<f64>) -> Result<Self> {
        if !(gamma_balance >= 0.0) {
            return Err(GifError::config(format!("gamma_balance must be >= 0, got {gamma_balance}")));
        }
        if lambdas.is_empty() || lambdas.iter().any(|&x| !(x >= 0.0)) {
            return Err(GifError::config("token weights must be non-negative and non-empty"));
        }
        let total: f64 = lambdas.iter().sum();
        if !(total > 0.0) {
            return Err(GifError::config("token weights sum to zero"));
        }
        Ok(Self { gamma_balance, lambdas: lambdas.into_iter().map(|x| x / total).collect() })
    }
}

/// Normalizes in place and returns the old norm. An exactly zero vector (every
/// ReLU off) stays zero and reports norm 0; a non-finite one becomes NaN so
/// the loss check aborts training.
fn unit_or_dead(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n == 0.0 {
        return 0.0;
    }
    if !n.is_finite() {
        v.iter_mut().for_each(|x| *x = f64::NAN);
        return f64::NAN;
    }
    v.iter_mut().for_each(|x| *x /= n);
    n
}

/// [`normalize_backward`], passing no gradient through a dead output.
fn unit_backward(y: &[f64], n: f64, grad: &[f64]) -> Vec<f64> {
    if n == 0.0 {
        vec![0.0; y.len()]
    } else {
        normalize_backward(y, n, grad)
    }
}

struct HeadForward {
    trace: MlpTrace,
    unit: Vec<f64>,
    norm: f64,
    logits: Vec<f64>,
}

fn head_forward(head: &TokenHead, heads: &TokenHeads, z: &[f64]) -> HeadForward {
    let trace = head.projection.forward_trace(z);
    let mut unit = trace.output.clone();
    let norm = unit_or_dead(&mut unit);
    let logits = head.classifier.chunks(heads.d).map(|u| heads.scale * dot(u, &unit)).collect();
    HeadForward { trace, unit, norm, logits }
}

/// Per-token softmax distributions over the `v` token values.
pub fn token_probabilities(z: &[f64], heads: &TokenHeads) -> Vec<Vec<f64>> {
    heads.heads.iter().map(|h| softmax(&head_forward(h, heads, z).logits)).collect()
}

fn check_code(code: &[u32], heads: &TokenHeads) -> Result<()> {
    if code.len() != heads.l() {
        return Err(GifError::DimensionMismatch { expected: heads.l(), got: code.len() });
    }
    for (position, &token) in code.iter().enumerate() {
        if token as usize >= heads.v {
            return Err(GifError::TokenRange { position, token, v: heads.v });
        }
    }
    Ok(())
}

/// Weighted sum of per-token cross-entropies for one embedding.
pub fn loss_code(z: &[f64], heads: &TokenHeads, code: &[u32], cfg: &GifLossConfig) -> Result<f64> {
    check_code(code, heads)?;
    if cfg.lambdas.len() != heads.l() {
        return Err(GifError::DimensionMismatch { expected: heads.l(), got: cfg.lambdas.len() });
    }
    Ok(heads
        .heads
        .iter()
        .zip(code)
        .zip(&cfg.lambdas)
        .map(|((h, &c), &lambda)| {
            let f = head_forward(h, heads, z);
            lambda * (log_sum_exp(&f.logits) - f.logits[c as usize])
        })
        .sum())
}

/// Angular regression `0.5 (z.h - 1)^2`.
pub fn loss_ar(z: &[f64], h: &[f64]) -> f64 {
    let c = dot(z, h) - 1.0;
    0.5 * c * c
}

/// Derivative of [`loss_ar`] with respect to `z`: `(z.h - 1) h`.
pub fn grad_ar(z: &[f64], h: &[f64]) -> Vec<f64> {
    let c = dot(z, h) - 1.0;
    h.iter().map(|x| c * x).collect()
}

/// Loss parts and token hits for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub l_c: f64,
    pub l_ar: f64,
    pub token_acc: Vec<f64>,
}

#[derive(Default)]
struct Partial {
    l_c: f64,
    l_ar: f64,
    hits: Vec<usize>,
}

fn lookup<'a>(
    s: &Sample,
    h: &'a CodeVectorMatrix,
    codes: &'a CodeBook,
) -> Result<(&'a [f64], &'a [u32])> {
    if s.label >= h.m() {
        return Err(GifError::MissingLabel(s.label));
    }
    let code = codes.get(s.label).ok_or(GifError::MissingLabel(s.label))?;
    Ok((h.row(s.label), code))
}

/// Forward (and optionally backward, scaled by `weight`) for one sample.
fn sample_pass(
    model: &GifModel,
    s: &Sample,
    target: &[f64],
    code: &[u32],
    cfg: &GifLossConfig,
    grads: Option<(&mut GifModel, f64)>,
    out: &mut Partial,
) {
    let heads = &model.heads;
    let (btrace, z, znorm) = model.backbone.trace(&s.features);
    let mut grad_z = vec![0.0; z.len()];
    let mut grads = grads;

    for (j, ((head, &c), &lambda)) in heads.heads.iter().zip(code).zip(&cfg.lambdas).enumerate() {
        let f = head_forward(head, heads, &z);
        let c = c as usize;
        out.l_c += lambda * (log_sum_exp(&f.logits) - f.logits[c]);
        let argmax = argmax_lowest(&f.logits);
        if argmax == c {
            out.hits[j] += 1;
        }
        if let Some((g, weight)) = grads.as_mut() {
            let mut dlogits = softmax(&f.logits);
            dlogits[c] -= 1.0;
            let coef = *weight * lambda;
            let gh = &mut g.heads.heads[j];
            let mut grad_unit = vec![0.0; heads.d];
            for (k, dl) in dlogits.iter().enumerate() {
                let dl = coef * dl * heads.scale;
                if dl == 0.0 {
                    continue;
                }
                let u = &head.classifier[k * heads.d..(k + 1) * heads.d];
                let gu = &mut gh.classifier[k * heads.d..(k + 1) * heads.d];
                for i in 0..heads.d {
                    gu[i] += dl * f.unit[i];
                    grad_unit[i] += dl * u[i];
                }
            }
            let grad_proj = unit_backward(&f.unit, f.norm, &grad_unit);
            let gz = head.projection.backward(&f.trace, &grad_proj, &mut gh.projection);
            for (a, b) in grad_z.iter_mut().zip(gz) {
                *a += b;
            }
        }
    }

    out.l_ar += loss_ar(&z, target);
    if let Some((g, weight)) = grads {
        let c = weight * cfg.gamma_balance * (dot(&z, target) - 1.0);
        for (a, t) in grad_z.iter_mut().zip(target) {
            *a += c * t;
        }
        let grad_raw = unit_backward(&z, znorm, &grad_z);
        model.backbone.net.backward(&btrace, &grad_raw, &mut g.backbone.net);
    }
}

const CHUNK: usize = 16;

fn batch_pass(
    batch: &[Sample],
    model: &GifModel,
    h: &CodeVectorMatrix,
    codes: &CodeBook,
    cfg: &GifLossConfig,
    with_grad: bool,
) -> Result<(StepMetrics, Option<GifModel>)> {
    if batch.is_empty() {
        return Err(GifError::Degenerate("empty batch".into()));
    }
    let l = model.heads.l();
    if cfg.lambdas.len() != l {
        return Err(GifError::DimensionMismatch { expected: l, got: cfg.lambdas.len() });
    }
    if codes.l != l || codes.v != model.heads.v {
        return Err(GifError::Inconsistent(format!(
            "codes have (l={}, v={}) but the model has (l={l}, v={})",
            codes.l, codes.v, model.heads.v
        )));
    }
    for s in batch {
        lookup(s, h, codes)?;
    }
    let weight = 1.0 / batch.len() as f64;
    // Fixed-size chunks summed in order keep results independent of the
    // thread count.
    let parts: Vec<(Partial, Option<GifModel>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = Partial { hits: vec![0; l], ..Default::default() };
            let mut g = with_grad.then(|| model.zeros_like());
            for s in chunk {
                let (target, code) = lookup(s, h, codes).expect("checked above");
                sample_pass(model, s, target, code, cfg, g.as_mut().map(|g| (g, weight)), &mut part);
            }
            (part, g)
        })
        .collect();

    let mut total = Partial { hits: vec![0; l], ..Default::default() };
    let mut grads: Option<GifModel> = None;
    for (p, g) in parts {
        total.l_c += p.l_c;
        total.l_ar += p.l_ar;
        for (a, b) in total.hits.iter_mut().zip(&p.hits) {
            *a += b;
        }
        if let Some(g) = g {
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
    }
    let n = batch.len() as f64;
    let l_c = total.l_c / n;
    let l_ar = total.l_ar / n;
    let metrics = StepMetrics {
        loss: l_c + cfg.gamma_balance * l_ar,
        l_c,
        l_ar,
        token_acc: total.hits.iter().map(|&h| h as f64 / n).collect(),
    };
    Ok((metrics, grads))
}

/// Batch mean of `L_C + gamma * L_AR`.
pub fn loss_total(
    batch: &[Sample],
    model: &GifModel,
    h: &CodeVectorMatrix,
    codes: &CodeBook,
    cfg: &GifLossConfig,
) -> Result<f64> {
    Ok(batch_pass(batch, model, h, codes, cfg, false)?.0.loss)
}

/// Loss metrics and the gradient of [`loss_total`] for every parameter.
pub fn loss_and_grad(
    batch: &[Sample],
    model: &GifModel,
    h: &CodeVectorMatrix,
    codes: &CodeBook,
    cfg: &GifLossConfig,
) -> Result<(StepMetrics, GifModel)> {
    let (m, g) = batch_pass(batch, model, h, codes, cfg, true)?;
    Ok((m, g.expect("gradient requested")))
}

/// One optimizer step on the backbone and all heads. Code vectors and codes
/// are read-only. Returns the metrics measured before the update.
pub fn train_step(
    batch: &[Sample],
    model: &mut GifModel,
    h: &CodeVectorMatrix,
    codes: &CodeBook,
    cfg: &GifLossConfig,
    opt: &mut Sgd,
    step: usize,
) -> Result<StepMetrics> {
    let (metrics, grads) = loss_and_grad(batch, model, h, codes, cfg)?;
    if !metrics.loss.is_finite() {
        let labels: Vec<usize> = batch.iter().take(8).map(|s| s.label).collect();
        return Err(GifError::NumericAbort {
            iteration: step,
            detail: format!(
                "loss {} (l_c {}, l_ar {}) on a batch of {} samples, first labels {labels:?}",
                metrics.loss,
                metrics.l_c,
                metrics.l_ar,
                batch.len()
            ),
        });
    }
    opt.step(model.params_mut(), grads.params());
    model.heads.renormalize();
    if model.params().iter().any(|p| p.iter().any(|x| !x.is_finite())) {
        return Err(GifError::NumericAbort {
            iteration: step,
            detail: format!("parameters became non-finite after the update (gradient norm {})", grad_norm(&grads)),
        });
    }
    Ok(metrics)
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionPath {
    /// The per-token argmax code names an identity.
    Direct,
    /// The argmax code was unpopulated; the best-scoring populated leaf was
    /// used instead.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub identity: usize,
    pub tokens: Vec<u32>,
    pub path: PredictionPath,
}

/// Closed-set prediction: per-token argmax (ties to the lowest token), decoded
/// through the tree, falling back to the populated leaf with the highest
/// summed token log-probability.
pub fn predict_identity(z: &[f64], heads: &TokenHeads, tree: &CodeTree) -> Result<Prediction> {
    if heads.l() != tree.l() || heads.v != tree.v() {
        return Err(GifError::Inconsistent(format!(
            "heads are (l={}, v={}) but the tree is (l={}, v={})",
            heads.l(),
            heads.v,
            tree.l(),
            tree.v()
        )));
    }
    let log_probs: Vec<Vec<f64>> = heads
        .heads
        .iter()
        .map(|h| {
            let logits = head_forward(h, heads, z).logits;
            let lse = log_sum_exp(&logits);
            logits.into_iter().map(|x| x - lse).collect()
        })
        .collect();
    let tokens: Vec<u32> = log_probs.iter().map(|lp| argmax_lowest(lp) as u32).collect();
    if let Some(identity) = decode(&tokens, tree)? {
        return Ok(Prediction { identity, tokens, path: PredictionPath::Direct });
    }

    fn search(
        node: &TreeNode,
        depth: usize,
        score: f64,
        prefix: &mut Vec<u32>,
        lp: &[Vec<f64>],
        best: &mut Option<(f64, usize, Vec<u32>)>,
    ) {
        for (token, child) in &node.children {
            let s = score + lp[depth][*token as usize];
            prefix.push(*token);
            match child {
                TreeChild::Node(n) => search(n, depth + 1, s, prefix, lp, best),
                TreeChild::Leaf(y) => {
                    let better = match best {
                        None => true,
                        Some((bs, by, _)) => s > *bs || (s == *bs && *y < *by),
                    };
                    if better {
                        *best = Some((s, *y, prefix.clone()));
                    }
                }
            }
            prefix.pop();
        }
    }
    let mut best = None;
    search(tree.root(), 0, 0.0, &mut Vec::new(), &log_probs, &mut best);
    let (_, identity, tokens) = best.expect("a valid tree has at least one leaf");
    Ok(Prediction { identity, tokens, path: PredictionPath::Fallback })
}

/// Fraction of samples whose predicted identity equals their label, and the
/// mean cosine between each embedding and its label's code vector.
pub fn evaluate(
    samples: &[Sample],
    model: &GifModel,
    h: &CodeVectorMatrix,
    tree: &CodeTree,
) -> Result<Evaluation> {
    let rows: Vec<(bool, f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let z = model.backbone.embed(&s.features);
            let p = predict_identity(&z, &model.heads, tree)?;
            let cos = if s.label < h.m() { dot(&z, h.row(s.label)) } else { f64::NAN };
            Ok((p.identity == s.label, cos, p.path == PredictionPath::Fallback))
        })
        .collect::<Result<_>>()?;
    let n = rows.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: rows.iter().filter(|r| r.0).count() as f64 / n,
        mean_cosine: rows.iter().map(|r| r.1).sum::<f64>() / n,
        fallback_rate: rows.iter().filter(|r| r.2).count() as f64 / n,
        samples: rows.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_cosine: f64,
    pub fallback_rate: f64,
    pub samples: usize,
}

/// Verification rate at a false-accept rate: the fraction of same-identity
/// pairs whose cosine exceeds the threshold that admits `far` of the
/// different-identity pairs.
pub fn verification_tar<E: AsRef<[f64]> + Sync>(embeddings: &[E], labels: &[usize], far: f64) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(GifError::DimensionMismatch { expected: embeddings.len(), got: labels.len() });
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(GifError::config(format!("false-accept rate must be in (0, 1), got {far}")));
    }
    let (genuine, mut impostor): (Vec<f64>, Vec<f64>) = (0..embeddings.len())
        .into_par_iter()
        .map(|i| {
            let mut g = Vec::new();
            let mut im = Vec::new();
            for j in i + 1..embeddings.len() {
                let c = dot(embeddings[i].as_ref(), embeddings[j].as_ref());
                if labels[i] == labels[j] {
                    g.push(c);
                } else {
                    im.push(c);
                }
            }
            (g, im)
        })
        .reduce(
            || (Vec::new(), Vec::new()),
            |mut a, b| {
                a.0.extend(b.0);
                a.1.extend(b.1);
                a
            },
        );
    if genuine.is_empty() || impostor.is_empty() {
        return Err(GifError::Degenerate("need both same- and different-identity pairs".into()));
    }
    let k = ((far * impostor.len() as f64) as usize).min(impostor.len() - 1);
    let (_, threshold, _) = impostor.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    let threshold = *threshold;
    Ok(genuine.iter().filter(|&&g| g > threshold).count() as f64 / genuine.len() as f64)
}

/// Euclidean norm over every gradient buffer.
pub fn grad_norm(grads: &GifModel) -> f64 {
    grads.params().iter().map(|p| norm(p).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::normalize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads_with(l: usize, v: usize, d: usize, scale: f64) -> TokenHeads {
        TokenHeads::new(l, v, d, 0, scale, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_scale_gives_uniform_tokens() {
        let heads = heads_with(3, 4, 5, 0.0);
        let z = normalize(&[1.0, 2.0, 0.0, -1.0, 0.5]).unwrap();
        for p in token_probabilities(z.as_slice(), &heads) {
            for x in p {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
        let cfg = GifLossConfig::uniform(3, 1.0);
        let lc = loss_code(z.as_slice(), &heads, &[0, 3, 1], &cfg).unwrap();
        assert!((lc - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pair_softmax() {
        let mut heads = heads_with(1, 2, 2, 3.0);
        heads.heads[0].classifier = vec![1.0, 0.0, 0.0, 1.0];
        let p = token_probabilities(&[1.0, 0.0], &heads);
        let e = 3f64.exp();
        assert!((p[0][0] - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn lambda_rescaling_is_invisible() {
        let heads = heads_with(2, 3, 4, 5.0);
        let z = normalize(&[0.1, 0.7, -0.2, 0.4]).unwrap();
        let a = GifLossConfig::new(1.0, vec![0.3, 0.7]).unwrap();
        let b = GifLossConfig::new(1.0, vec![0.6, 1.4]).unwrap();
        let la = loss_code(z.as_slice(), &heads, &[2, 0], &a).unwrap();
        let lb = loss_code(z.as_slice(), &heads, &[2, 0], &b).unwrap();
        assert!((la - lb).abs() < 1e-14);
        assert!(loss_code(z.as_slice(), &heads, &[3, 0], &a).is_err());
    }

    #[test]
    fn angular_regression_values() {
        let h = [1.0, 0.0];
        assert_eq!(loss_ar(&[1.0, 0.0], &h), 0.0);
        assert_eq!(loss_ar(&[0.0, 1.0], &h), 0.5);
        assert_eq!(loss_ar(&[-1.0, 0.0], &h), 2.0);
        assert_eq!(grad_ar(&[1.0, 0.0], &h), vec![0.0, 0.0]);
        assert_eq!(grad_ar(&[0.0, 1.0], &h), vec![-1.0, 0.0]);
    }

    fn toy_problem(head_layers: usize, gamma: f64) -> (GifModel, CodeVectorMatrix, CodeBook, Vec<Sample>, GifLossConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let backbone = Backbone::new(&[5, 7, 4], &mut rng).unwrap();
        let heads = TokenHeads::new(2, 3, 4, head_layers, 4.0, &mut rng).unwrap();
        let h = CodeVectorMatrix::random(4, 4, 3).unwrap();
        let codes = CodeBook::from_codes(2, 3, vec![vec![0, 1], vec![2, 2], vec![1, 0], vec![0, 2]]).unwrap();
        let batch = (0..6)
            .map(|i| Sample {
                id: i,
                label: i as usize % 4,
                features: (0..5).map(|k| ((i * 5 + k) as f64 * 0.37).sin()).collect(),
            })
            .collect();
        let cfg = GifLossConfig::new(gamma, vec![0.4, 0.6]).unwrap();
        (GifModel { backbone, heads }, h, codes, batch, cfg)
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        for (layers, gamma) in [(0, 1.0), (2, 0.5), (1, 0.0)] {
            let (model, h, codes, batch, cfg) = toy_problem(layers, gamma);
            let (_, grads) = loss_and_grad(&batch, &model, &h, &codes, &cfg).unwrap();
            let eps = 1e-6;
            for slot in 0..model.params().len() {
                let n = model.params()[slot].len();
                for j in (0..n).step_by(3) {
                    let mut up = model.clone();
                    let mut dn = model.clone();
                    up.params_mut()[slot][j] += eps;
                    dn.params_mut()[slot][j] -= eps;
                    let fd = (loss_total(&batch, &up, &h, &codes, &cfg).unwrap()
                        - loss_total(&batch, &dn, &h, &codes, &cfg).unwrap())
                        / (2.0 * eps);
                    let an = grads.params()[slot][j];
                    assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "slot {slot}[{j}]: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_keeps_unit_classes() {
        let (mut model, h, codes, batch, cfg) = toy_problem(2, 1.0);
        let mut opt = Sgd::new(0.05, 0.9);
        let first = train_step(&batch, &mut model, &h, &codes, &cfg, &mut opt, 0).unwrap().loss;
        let mut last = first;
        for step in 1..200 {
            last = train_step(&batch, &mut model, &h, &codes, &cfg, &mut opt, step).unwrap().loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
        for head in &model.heads.heads {
            for u in head.classifier.chunks(4) {
                assert!((norm(u) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let (model, h, codes, _, cfg) = toy_problem(1, 1.0);
        let batch: Vec<Sample> = (0..100)
            .map(|i| Sample {
                id: i,
                label: i as usize % 4,
                features: (0..5).map(|k| ((i * 3 + k) as f64).cos()).collect(),
            })
            .collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| loss_and_grad(&batch, &model, &h, &codes, &cfg).unwrap())
        };
        let (ma, ga) = run(1);
        let (mb, gb) = run(4);
        assert_eq!(ma, mb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn predictions_decode_or_fall_back() {
        use crate::tokenizer::{build_code_tree, TokenizerConfig};
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![-1.0, 0.0], vec![-0.9, -0.2]];
        let h = CodeVectorMatrix::from_rows(&rows).unwrap();
        let tree = build_code_tree(&h, &TokenizerConfig::new(2, 2)).unwrap();
        let codes = crate::tokenizer::assign_codes(&tree);
        let mut heads = heads_with(2, 2, 2, 10.0);
        // Head 0 prefers token 0 for +x, head 1 always prefers token 1.
        heads.heads[0].classifier = vec![1.0, 0.0, -1.0, 0.0];
        heads.heads[1].classifier = vec![0.0, -1.0, 0.0, 1.0];
        let p = predict_identity(&[0.0, 1.0], &heads, &tree).unwrap();
        assert_eq!(p.path, PredictionPath::Direct);
        assert_eq!(codes.get(p.identity).unwrap(), p.tokens.as_slice());

        // A three-leaf tree leaves one code unpopulated.
        let h3 = CodeVectorMatrix::from_rows(&rows[..3]).unwrap();
        let tree3 = build_code_tree(&h3, &TokenizerConfig::new(2, 2)).unwrap();
        let codes3 = crate::tokenizer::assign_codes(&tree3);
        let used: Vec<Vec<u32>> = codes3.iter().map(|(_, c)| c.to_vec()).collect();
        let missing = [[0u32, 0], [0, 1], [1, 0], [1, 1]]
            .into_iter()
            .find(|c| !used.contains(&c.to_vec()))
            .unwrap();
        heads.heads[0].classifier = if missing[0] == 0 { vec![1.0, 0.0, -1.0, 0.0] } else { vec![-1.0, 0.0, 1.0, 0.0] };
        heads.heads[1].classifier = if missing[1] == 0 { vec![0.0, 1.0, 0.0, -1.0] } else { vec![0.0, -1.0, 0.0, 1.0] };
        let p = predict_identity(&[0.6, 0.8], &heads, &tree3).unwrap();
        assert_eq!(p.path, PredictionPath::Fallback);
        assert_eq!(codes3.get(p.identity).unwrap(), p.tokens.as_slice());
        assert_ne!(p.tokens, missing.to_vec());
    }

    #[test]
    fn verification_examples() {
        let e = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        assert_eq!(verification_tar(&e, &[0, 0, 1, 1], 0.1).unwrap(), 1.0);
        // Same-identity pairs score no better than the worst impostors.
        let e = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert_eq!(verification_tar(&e, &[0, 0, 1, 1], 0.1).unwrap(), 0.0);
        assert!(verification_tar(&e, &[0, 0, 0, 0], 0.1).is_err());
    }

    #[test]
    fn loss_config_validation() {
        assert!(GifLossConfig::new(-1.0, vec![1.0]).is_err());
        assert!(GifLossConfig::new(1.0, vec![0.0, 0.0]).is_err());
        assert!(GifLossConfig::new(1.0, vec![-1.0, 2.0]).is_err());
    }
}
