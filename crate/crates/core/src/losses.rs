//! Loss terms with analytic gradients, plus the weighting that combines them.
//!
//! Losses are evaluated in `f64` on values read off the tape; each returns
//! its value and the gradient with respect to every input, which the trainer
//! seeds back into [`Graph::backward`](crate::autograd::Graph::backward).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Preset, TrainConfig};
use crate::error::{Error, Result};
use crate::types::DomainLabel;

/// Accepted deviation of an embedding norm from one.
pub const UNIT_NORM_TOL: f64 = 1e-4;

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{what}: lengths {} and {} must match and be non-empty", a.len(), b.len())));
    }
    Ok(())
}

/// Discriminator least-squares loss: `mean (D(y)-1)^2 + mean D(G(x))^2`.
pub fn lsgan_d(real: &[f64], fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    same_len(real, fake, "lsgan_d")?;
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    let value = real.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / nr + fake.iter().map(|f| f * f).sum::<f64>() / nf;
    let d_real = real.iter().map(|r| 2.0 * (r - 1.0) / nr).collect();
    let d_fake = fake.iter().map(|f| 2.0 * f / nf).collect();
    Ok((value, d_real, d_fake))
}

/// Generator least-squares loss: `mean (D(G(x))-1)^2`.
pub fn lsgan_g(fake: &[f64]) -> (f64, Vec<f64>) {
    let n = fake.len().max(1) as f64;
    let value = fake.iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / n;
    (value, fake.iter().map(|f| 2.0 * (f - 1.0) / n).collect())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Zero rows pass: they are what normalizing an all-zero embedding yields.
fn check_unit_rows(v: &[f64], dim: usize, what: &str) -> Result<()> {
    for (i, row) in v.chunks(dim).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL && n > UNIT_NORM_TOL {
            return Err(Error::InvalidArgument(format!("{what} row {i} has norm {n}, expected unit norm")));
        }
    }
    Ok(())
}

/// Row-wise L2 normalization of an `[S, dim]` matrix.
pub fn l2_normalize_rows(v: &[f64], dim: usize) -> Vec<f64> {
    v.chunks(dim)
        .flat_map(|row| {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(move |x| x / n)
        })
        .collect()
}

/// `c = alpha · a · b` for a row-major `m×n` output; `a` and `b` are given as (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the assertion covers the m×k, k×n and m×n extents for dense strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch contrastive loss for one layer.
///
/// `query` and `keys` are `[S, dim]` row-major with unit-norm rows, aligned by
/// location. Row `s` of the query is classified against all key rows of the
/// same image, with key `s` as the positive. Returns the mean over locations
/// and the gradients with respect to `query` and `keys`.
pub fn patch_nce(query: &[f64], keys: &[f64], dim: usize, tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    same_len(query, keys, "patch_nce")?;
    if dim == 0 || !query.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("patch_nce: {} values do not form rows of {dim}", query.len())));
    }
    let s = query.len() / dim;
    if s < 2 {
        return Err(Error::InvalidArgument("patch_nce needs at least 2 locations".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(query, dim, "query")?;
    check_unit_rows(keys, dim, "key")?;

    // logits[i, j] = q_i · k_j / tau
    let mut logits = vec![0.0; s * s];
    dgemm(s, dim, s, 1.0 / tau, query, (dim as isize, 1), keys, (1, dim as isize), &mut logits);
    // coef[i, j] = (softmax_ij - [i == j]) / (S tau), the gradient of the mean loss w.r.t. q_i · k_j
    let mut value = 0.0;
    let mut coef = vec![0.0; s * s];
    for i in 0..s {
        let row = &logits[i * s..(i + 1) * s];
        let lse = log_sum_exp(row);
        value += lse - row[i];
        for j in 0..s {
            coef[i * s + j] = ((row[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / (s as f64 * tau);
        }
    }
    let mut dq = vec![0.0; query.len()];
    let mut dk = vec![0.0; keys.len()];
    dgemm(s, s, dim, 1.0, &coef, (s as isize, 1), keys, (dim as isize, 1), &mut dq);
    dgemm(s, s, dim, 1.0, &coef, (1, s as isize), query, (dim as isize, 1), &mut dk);
    Ok((value / s as f64, dq, dk))
}

/// Mean absolute difference; used for both the regularization and cycle terms.
pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    same_len(a, b, "l1")?;
    let n = a.len() as f64;
    let value = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let da: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect();
    let db = da.iter().map(|g| -g).collect();
    Ok((value, da, db))
}

/// Semantic-consistency term between translations of a paired sim image and map.
pub fn reg_loss(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    l1_loss(a, b)
}

/// Reconstruction term between an image and its round-trip translation.
pub fn cyc_loss(x: &[f64], x_rec: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    l1_loss(x, x_rec)
}

/// Negative log softmax probability of `target`.
pub fn cls_loss(logits: &[f64], target: DomainLabel) -> (f64, Vec<f64>) {
    let t = target.index();
    let lse = log_sum_exp(logits);
    let grad = logits.iter().enumerate().map(|(j, l)| (l - lse).exp() - if j == t { 1.0 } else { 0.0 }).collect();
    (lse - logits[t], grad)
}

/// Ordered (source, target) domain pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainPair {
    pub source: DomainLabel,
    pub target: DomainLabel,
}

impl DomainPair {
    pub fn new(source: DomainLabel, target: DomainLabel) -> Result<Self> {
        if source == target {
            return Err(Error::InvalidArgument(format!("pair source and target are both {source}")));
        }
        Ok(Self { source, target })
    }

    /// All six ordered pairs of distinct domains.
    pub fn all() -> Vec<DomainPair> {
        let mut v = Vec::new();
        for s in DomainLabel::ALL {
            for t in DomainLabel::ALL {
                if s != t {
                    v.push(DomainPair { source: s, target: t });
                }
            }
        }
        v
    }
}

/// Whether the two sources are exactly sim and seg, in either order.
pub fn reg_indicator(pairs: &[DomainPair; 2]) -> bool {
    let (a, b) = (pairs[0].source, pairs[1].source);
    matches!((a, b), (DomainLabel::Sim, DomainLabel::Seg) | (DomainLabel::Seg, DomainLabel::Sim))
}

/// Checks that the step's pairs are ones the preset can produce.
pub fn check_pairs(preset: Preset, pairs: &[DomainPair; 2]) -> Result<()> {
    use DomainLabel::*;
    let ok = match preset {
        Preset::Cut => pairs.iter().all(|p| (p.source, p.target) == (Sim, Real)),
        Preset::CutS | Preset::CutSc => {
            (pairs[0].source, pairs[0].target, pairs[1].source, pairs[1].target) == (Sim, Real, Seg, Real)
        }
        Preset::ConPres => pairs.iter().all(|p| p.source != p.target),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("pairs {pairs:?} are inconsistent with preset {}", preset.as_str())))
    }
}

/// Multipliers applied to each raw term in one step; inactive terms get 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub gan: f64,
    pub nce: f64,
    pub cls_f: f64,
    pub cyc: f64,
    pub reg: f64,
    pub cls_r: f64,
}

pub fn term_weights(cfg: &TrainConfig, pairs: &[DomainPair; 2]) -> Result<TermWeights> {
    check_pairs(cfg.preset, pairs)?;
    let terms = cfg.preset.terms();
    let on = |b: bool, w: f64| if b { w } else { 0.0 };
    Ok(TermWeights {
        gan: 1.0,
        nce: 1.0,
        cls_f: on(terms.cls, cfg.lambda_cls_f),
        cyc: on(terms.cyc, cfg.lambda_cyc),
        reg: on(terms.reg && reg_indicator(pairs), cfg.lambda_reg),
        cls_r: on(terms.cls, cfg.lambda_cls_r),
    })
}

/// Raw generator-side terms of one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GPairParts {
    pub gan_g: f64,
    pub nce_src: f64,
    pub nce_idt: f64,
    pub cls_f: f64,
    pub cyc: f64,
}

/// Raw discriminator-side terms of one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DPairParts {
    pub gan_d: f64,
    pub cls_r: f64,
}

/// Named scalars of one training step. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_d: f64,
    pub gan_g: f64,
    pub nce_src: f64,
    pub nce_idt: f64,
    pub reg: f64,
    pub cyc: f64,
    pub cls_r: f64,
    pub cls_f: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn as_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("gan_d", self.gan_d),
            ("gan_g", self.gan_g),
            ("nce_src", self.nce_src),
            ("nce_idt", self.nce_idt),
            ("reg", self.reg),
            ("cyc", self.cyc),
            ("cls_r", self.cls_r),
            ("cls_f", self.cls_f),
            ("total_d", self.total_d),
            ("total_g", self.total_g),
        ])
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.as_map().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

/// Fills the generator fields of `report`; terms with zero weight are reported as 0.
pub fn compose_g(report: &mut LossReport, parts: &[GPairParts; 2], reg: f64, w: &TermWeights) {
    let sum = |f: fn(&GPairParts) -> f64| parts.iter().map(f).sum::<f64>();
    let gate = |weight: f64, v: f64| if weight == 0.0 { 0.0 } else { v };
    report.gan_g = sum(|p| p.gan_g);
    report.nce_src = sum(|p| p.nce_src);
    report.nce_idt = sum(|p| p.nce_idt);
    report.cls_f = gate(w.cls_f, sum(|p| p.cls_f));
    report.cyc = gate(w.cyc, sum(|p| p.cyc));
    report.reg = gate(w.reg, reg);
    report.total_g = w.gan * report.gan_g
        + w.nce * (report.nce_src + report.nce_idt)
        + w.cls_f * report.cls_f
        + w.cyc * report.cyc
        + w.reg * report.reg;
}

/// Fills the discriminator fields of `report`.
pub fn compose_d(report: &mut LossReport, parts: &[DPairParts; 2], w: &TermWeights) {
    report.gan_d = parts.iter().map(|p| p.gan_d).sum();
    report.cls_r = if w.cls_r == 0.0 { 0.0 } else { parts.iter().map(|p| p.cls_r).sum() };
    report.total_d = w.gan * report.gan_d + w.cls_r * report.cls_r;
}
