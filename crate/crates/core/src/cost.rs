//! Analytic parameter, compute and memory counts for a full softmax classifier,
//! a sampled-subset softmax, and code-token heads.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{GifError, Result};
use crate::tokenizer::suggest_length;

pub const F32_BYTES: u64 = 4;
/// Weights, their gradient and the momentum buffer.
pub const TRAINING_COPIES: u64 = 3;
/// Eight 80 GB accelerators.
pub const DEVICE_BUDGET_BYTES: u64 = 8 * 80 * 1_000_000_000;
/// Global batch used for the activation part of the training estimate.
pub const DEFAULT_BATCH: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Fc,
    /// Full weights stored, a fraction `alpha` of the logits computed per
    /// sample.
    Subset { alpha: f64 },
    Gif { l: usize, v: usize },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Fc => write!(f, "fc"),
            Method::Subset { alpha } => write!(f, "subset({alpha})"),
            Method::Gif { l, v } => write!(f, "gif(l={l};v={v})"),
        }
    }
}

/// Row kinds of a scaling table; `Gif` picks `(l, v)` per `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Fc,
    Subset { alpha: f64 },
    Gif,
}

/// Knobs that only affect the secondary counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostExtras {
    /// Linear `d x d` layers per token projection head.
    pub head_layers: usize,
    pub batch: u64,
}

impl Default for CostExtras {
    fn default() -> Self {
        Self { head_layers: 3, batch: DEFAULT_BATCH }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub method: Method,
    pub m: u64,
    pub d: u64,
    pub classifier_params: u64,
    /// Projection-head parameters, zero for the softmax baselines.
    pub head_params: u64,
    /// Multiply-accumulates to produce one sample's logits.
    pub per_sample_logit_flops: u64,
    /// Classifier weights, gradient and momentum at float32.
    pub estimated_classifier_bytes: u64,
    /// The above plus the logits and their gradient for one global batch.
    pub training_bytes: u64,
}

impl CostProfile {
    pub fn exceeds_device_budget(&self) -> bool {
        self.training_bytes > DEVICE_BUDGET_BYTES
    }
}

fn check_capacity(m: u64, l: usize, v: usize) -> Result<()> {
    let mut cap: u128 = 1;
    for _ in 0..l {
        cap = cap.saturating_mul(v as u128);
    }
    if l == 0 || v == 0 || cap < m as u128 {
        return Err(GifError::Capacity { m: m as usize, v, l });
    }
    Ok(())
}

fn validate(method: Method, m: u64, d: u64) -> Result<()> {
    if m == 0 || d == 0 {
        return Err(GifError::config(format!("need m, d >= 1, got m={m} d={d}")));
    }
    match method {
        Method::Fc => Ok(()),
        Method::Subset { alpha } if alpha > 0.0 && alpha < 1.0 => Ok(()),
        Method::Subset { alpha } => Err(GifError::config(format!("subset fraction must be in (0, 1), got {alpha}"))),
        Method::Gif { l, v } => check_capacity(m, l, v),
    }
}

/// Stored classifier weights: `m d` for both softmax variants, `l v d` for
/// token heads.
pub fn classifier_params(method: Method, m: u64, d: u64) -> Result<u64> {
    validate(method, m, d)?;
    Ok(match method {
        Method::Fc | Method::Subset { .. } => m * d,
        Method::Gif { l, v } => (l * v) as u64 * d,
    })
}

pub fn cost_profile(method: Method, m: u64, d: u64, extras: &CostExtras) -> Result<CostProfile> {
    let classifier = classifier_params(method, m, d)?;
    let (head_params, flops, logits) = match method {
        Method::Fc => (0, m * d, m),
        Method::Subset { alpha } => {
            let kept = (alpha * m as f64).round() as u64;
            (0, kept * d, kept)
        }
        Method::Gif { l, v } => {
            let per_head = extras.head_layers as u64 * (d * d + d);
            let head = l as u64 * per_head;
            (head, classifier + head, (l * v) as u64)
        }
    };
    let weights = classifier * F32_BYTES * TRAINING_COPIES;
    Ok(CostProfile {
        method,
        m,
        d,
        classifier_params: classifier,
        head_params,
        per_sample_logit_flops: flops,
        estimated_classifier_bytes: weights,
        training_bytes: weights + 2 * extras.batch * logits * F32_BYTES,
    })
}

/// One row per `(m, method)`; token rows use [`suggest_length`].
pub fn scaling_table(m_list: &[u64], d: u64, methods: &[MethodSpec], extras: &CostExtras) -> Result<Vec<CostProfile>> {
    if m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GifError::config("m_list must be strictly ascending"));
    }
    let mut rows = Vec::with_capacity(m_list.len() * methods.len());
    for &m in m_list {
        for spec in methods {
            let method = match *spec {
                MethodSpec::Fc => Method::Fc,
                MethodSpec::Subset { alpha } => Method::Subset { alpha },
                MethodSpec::Gif => {
                    let c = suggest_length(usize::try_from(m).map_err(|_| GifError::config("m too large"))?);
                    Method::Gif { l: c.l, v: c.v }
                }
            };
            rows.push(cost_profile(method, m, d, extras)?);
        }
    }
    Ok(rows)
}

/// `m,method,params,flops,bytes`, preceded by a `# config=` line.
pub fn write_csv<W: Write>(mut out: W, rows: &[CostProfile], config_hash: &str) -> Result<()> {
    writeln!(out, "# config={config_hash}")?;
    writeln!(out, "m,method,params,flops,bytes")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.m, r.method, r.classifier_params, r.per_sample_logit_flops, r.estimated_classifier_bytes
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_examples() {
        assert_eq!(classifier_params(Method::Fc, 1_000_000, 512).unwrap(), 512_000_000);
        assert_eq!(classifier_params(Method::Gif { l: 6, v: 10 }, 1_000_000, 512).unwrap(), 30_720);
        assert_eq!(
            classifier_params(Method::Gif { l: 1, v: 5000 }, 5000, 64).unwrap(),
            classifier_params(Method::Fc, 5000, 64).unwrap()
        );
        assert!(matches!(
            classifier_params(Method::Gif { l: 2, v: 10 }, 101, 8),
            Err(GifError::Capacity { .. })
        ));
        assert!(classifier_params(Method::Subset { alpha: 1.0 }, 10, 8).is_err());
    }

    #[test]
    fn subset_computes_a_fraction() {
        let ex = CostExtras::default();
        let fc = cost_profile(Method::Fc, 1_000_000, 512, &ex).unwrap();
        let sub = cost_profile(Method::Subset { alpha: 0.3 }, 1_000_000, 512, &ex).unwrap();
        assert_eq!(sub.classifier_params, fc.classifier_params);
        assert_eq!(sub.per_sample_logit_flops * 10, fc.per_sample_logit_flops * 3);
    }

    #[test]
    fn head_parameters_are_separate() {
        let p = cost_profile(Method::Gif { l: 2, v: 8 }, 64, 4, &CostExtras { head_layers: 2, batch: 1 }).unwrap();
        assert_eq!(p.classifier_params, 64);
        assert_eq!(p.head_params, 2 * 2 * (16 + 4));
    }

    #[test]
    fn fc_runs_out_of_memory_where_tokens_do_not() {
        let rows = scaling_table(
            &[1_000_000, 64_000_000],
            512,
            &[MethodSpec::Fc, MethodSpec::Gif],
            &CostExtras::default(),
        )
        .unwrap();
        assert!(!rows[0].exceeds_device_budget());
        assert!(rows[2].exceeds_device_budget());
        assert!(rows[3].classifier_params * F32_BYTES < 1_000_000);
        assert!(!rows[3].exceeds_device_budget());
    }

    #[test]
    fn csv_layout() {
        let rows = scaling_table(&[1000], 8, &[MethodSpec::Fc, MethodSpec::Gif], &CostExtras::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows, "abc").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config=abc");
        assert_eq!(lines[1], "m,method,params,flops,bytes");
        assert_eq!(lines[2], "1000,fc,8000,8000,96000");
        assert!(lines[3].starts_with("1000,gif(l=3;v=10),240,"));
    }
}
