//! Self-supervised objectives on unit-norm embeddings.
//!
//! * `info_nce_loss`: contrastive loss of one anchor against its positive
//!   and a reweighted set of negatives.
//! * `symmetric_contrastive_loss`: the contrastive loss evaluated with each
//!   modality taking the anchor role once.
//! * `byol_loss`: squared distance between online predictions and
//!   (stop-gradient) target projections.
//!
//! Every loss has a `*_with_grad` form returning closed-form gradients.
//!
//! Negatives are reweighted by `w_j = h_j^beta / sum_k h_k^beta` where
//! `h = exp(<a, b> / temperature)`, and the negative mass is
//! `(N - 1) * sum_j w_j h_j`. With `beta = 0` this is the plain sum of
//! negative similarities.

use crate::encoder::FeatureMatrix;
use crate::error::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-3;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.5;

/// Row-major embeddings in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Contract(format!(
                "{rows} x {dim} embeddings need {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Embeddings { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embeddings {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_features(&self) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.rows,
            cols: self.dim,
            data: self.data.iter().map(|&x| x as f32).collect(),
        }
    }
}

impl From<&FeatureMatrix> for Embeddings {
    fn from(f: &FeatureMatrix) -> Self {
        Embeddings {
            rows: f.rows,
            dim: f.cols,
            data: f.data.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// One anchor with its positive and `N - 1` negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

impl CandidateSet {
    /// Candidate count `N` (positive plus negatives).
    pub fn size(&self) -> usize {
        self.negatives.len() + 1
    }

    fn validate(&self) -> Result<()> {
        let d = self.anchor.len();
        if d == 0 {
            return Err(Error::Contract("empty anchor vector".into()));
        }
        let all = std::iter::once(&self.anchor)
            .chain(std::iter::once(&self.positive))
            .chain(self.negatives.iter());
        for v in all {
            if v.len() != d {
                return Err(Error::Contract(format!(
                    "candidate dimension {} differs from anchor dimension {d}",
                    v.len()
                )));
            }
            check_unit(v)?;
        }
        Ok(())
    }
}

/// Gradients of a candidate-set loss with respect to each vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrad {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64]) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::Contract(format!("expected a unit vector, norm is {norm}")));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!("beta must be non-negative, got {beta}")));
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_scaled(scores: &[f64], scale: f64) -> Vec<f64> {
    let lse = log_sum_exp(scores.iter().map(|&s| s * scale));
    scores.iter().map(|&s| (s * scale - lse).exp()).collect()
}

/// `exp(<a, b> / temperature)`.
pub fn similarity(a: &[f64], b: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if a.len() != b.len() {
        return Err(Error::Contract("similarity of vectors with different lengths".into()));
    }
    Ok((dot(a, b) / temperature).exp())
}

/// Self-normalized weights `score_j^beta / sum_k score_k^beta`.
pub fn hard_negative_weights(scores: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    if let Some(bad) = scores.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Parameter(format!("similarity scores must be positive, got {bad}")));
    }
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    let logs: Vec<f64> = scores.iter().map(|s| s.ln()).collect();
    Ok(softmax_scaled(&logs, beta))
}

pub fn info_nce_loss(set: &CandidateSet, temperature: f64, beta: f64) -> Result<f64> {
    info_nce_loss_with_grad(set, temperature, beta).map(|(l, _)| l)
}

/// `-log[h+ / (h+ + (N - 1) sum_j w_j h_j)]` and its gradient.
pub fn info_nce_loss_with_grad(set: &CandidateSet, temperature: f64, beta: f64) -> Result<(f64, CandidateGrad)> {
    check_temperature(temperature)?;
    check_beta(beta)?;
    set.validate()?;
    let d = set.anchor.len();
    let mut grad = CandidateGrad {
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negatives: vec![vec![0.0; d]; set.negatives.len()],
    };
    if set.negatives.is_empty() {
        return Ok((0.0, grad));
    }
    let m = set.negatives.len() as f64;
    let s_pos = dot(&set.anchor, &set.positive) / temperature;
    let s_neg: Vec<f64> = set
        .negatives
        .iter()
        .map(|n| dot(&set.anchor, n) / temperature)
        .collect();
    // log of the weighted negative mass (N - 1) * sum_j w_j h_j
    let log_neg = m.ln() + log_sum_exp(s_neg.iter().map(|&s| (beta + 1.0) * s))
        - log_sum_exp(s_neg.iter().map(|&s| beta * s));
    let z = log_neg - s_pos;
    // softplus(z) = log(1 + e^z), evaluated without overflow
    let loss = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    let g = 1.0 / (1.0 + (-z).exp());

    let p_hi = softmax_scaled(&s_neg, beta + 1.0);
    let p_lo = softmax_scaled(&s_neg, beta);
    let d_neg: Vec<f64> = p_hi
        .iter()
        .zip(&p_lo)
        .map(|(hi, lo)| g * ((beta + 1.0) * hi - beta * lo))
        .collect();

    let inv_t = 1.0 / temperature;
    for k in 0..d {
        grad.anchor[k] = -g * set.positive[k] * inv_t;
        grad.positive[k] = -g * set.anchor[k] * inv_t;
    }
    for ((dn, n), &coef) in grad.negatives.iter_mut().zip(&set.negatives).zip(&d_neg) {
        for k in 0..d {
            grad.anchor[k] += coef * n[k] * inv_t;
            dn[k] = coef * set.anchor[k] * inv_t;
        }
    }
    Ok((loss, grad))
}

/// Mean over the batch of the two contrastive terms, one with each
/// modality as anchor.
pub fn symmetric_contrastive_loss(
    batch_a: &[CandidateSet],
    batch_b: &[CandidateSet],
    temperature: f64,
    beta: f64,
) -> Result<f64> {
    if batch_a.len() != batch_b.len() {
        return Err(Error::Contract(format!(
            "symmetric loss needs equal batches, got {} and {}",
            batch_a.len(),
            batch_b.len()
        )));
    }
    if batch_a.is_empty() {
        return Err(Error::Contract("symmetric loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for (a, b) in batch_a.iter().zip(batch_b) {
        total += info_nce_loss(a, temperature, beta)? + info_nce_loss(b, temperature, beta)?;
    }
    Ok(total / batch_a.len() as f64)
}

/// Candidate sets for in-batch negatives: row `i` of `anchors` is paired
/// with row `i` of `others`; every other row of `others` is a negative.
pub fn in_batch_candidates(anchors: &Embeddings, others: &Embeddings) -> Result<Vec<CandidateSet>> {
    if anchors.rows != others.rows || anchors.dim != others.dim {
        return Err(Error::Contract("in-batch candidates need equally shaped embeddings".into()));
    }
    Ok((0..anchors.rows)
        .map(|i| CandidateSet {
            anchor: anchors.row(i).to_vec(),
            positive: others.row(i).to_vec(),
            negatives: (0..others.rows)
                .filter(|&j| j != i)
                .map(|j| others.row(j).to_vec())
                .collect(),
        })
        .collect())
}

/// One direction of the in-batch loss: summed loss, gradient for the
/// anchor side and gradient for the other side (both unscaled).
fn in_batch_direction(
    anchors: &Embeddings,
    others: &Embeddings,
    temperature: f64,
    beta: f64,
) -> Result<(f64, Embeddings, Embeddings)> {
    let b = anchors.rows;
    let mut d_anchor = Embeddings::zeros(b, anchors.dim);
    let mut d_other = Embeddings::zeros(b, others.dim);
    let mut total = 0.0;
    for (i, set) in in_batch_candidates(anchors, others)?.iter().enumerate() {
        let (loss, g) = info_nce_loss_with_grad(set, temperature, beta)?;
        total += loss;
        axpy(d_anchor.row_mut(i), 1.0, &g.anchor);
        axpy(d_other.row_mut(i), 1.0, &g.positive);
        for (j, gn) in (0..b).filter(|&j| j != i).zip(&g.negatives) {
            axpy(d_other.row_mut(j), 1.0, gn);
        }
    }
    Ok((total, d_anchor, d_other))
}

/// Symmetric in-batch contrastive loss with gradients for both sides.
///
/// The two directions are accumulated separately and combined with
/// commutative additions, so exchanging `za` and `zb` exchanges the
/// gradients bit for bit.
pub fn in_batch_symmetric_loss_with_grad(
    za: &Embeddings,
    zb: &Embeddings,
    temperature: f64,
    beta: f64,
) -> Result<(f64, Embeddings, Embeddings)> {
    if za.rows == 0 {
        return Err(Error::Contract("symmetric loss of an empty batch".into()));
    }
    let (la, da_anchor, db_other) = in_batch_direction(za, zb, temperature, beta)?;
    let (lb, db_anchor, da_other) = in_batch_direction(zb, za, temperature, beta)?;
    let scale = 1.0 / za.rows as f64;
    let combine = |x: Embeddings, y: &Embeddings| Embeddings {
        data: x.data.iter().zip(&y.data).map(|(p, q)| (p + q) * scale).collect(),
        ..x
    };
    Ok(((la + lb) * scale, combine(da_anchor, &da_other), combine(db_anchor, &db_other)))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn check_pair_shapes(online: &Embeddings, target: &Embeddings) -> Result<()> {
    if online.rows != target.rows || online.dim != target.dim {
        return Err(Error::Contract(format!(
            "online {}x{} and target {}x{} outputs differ in shape",
            online.rows, online.dim, target.rows, target.dim
        )));
    }
    if online.rows == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    for i in 0..online.rows {
        check_unit(online.row(i))?;
        check_unit(target.row(i))?;
    }
    Ok(())
}

/// Mean of `||q - t||^2` over rows.
pub fn byol_loss(online: &Embeddings, target: &Embeddings) -> Result<f64> {
    byol_loss_with_grad(online, target).map(|(l, _)| l)
}

/// Loss and gradient with respect to `online` only; `target` is treated
/// as a constant.
pub fn byol_loss_with_grad(online: &Embeddings, target: &Embeddings) -> Result<(f64, Embeddings)> {
    check_pair_shapes(online, target)?;
    let scale = 1.0 / online.rows as f64;
    let mut grad = Embeddings::zeros(online.rows, online.dim);
    let mut total = 0.0;
    for i in 0..online.rows {
        let (q, t) = (online.row(i), target.row(i));
        let g = grad.row_mut(i);
        for k in 0..q.len() {
            let diff = q[k] - t[k];
            total += diff * diff;
            g[k] = 2.0 * diff * scale;
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_set(d: usize, n: usize, rng: &mut ChaCha8Rng) -> CandidateSet {
        CandidateSet {
            anchor: random_unit(d, rng),
            positive: random_unit(d, rng),
            negatives: (0..n - 1).map(|_| random_unit(d, rng)).collect(),
        }
    }

    #[test]
    fn similarity_anchor_values() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        assert!((similarity(&a, &a, 1.0).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(similarity(&a, &b, 0.5).unwrap(), 1.0);
        assert!(matches!(similarity(&a, &b, 0.0), Err(Error::Parameter(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (x, y) = (random_unit(6, &mut rng), random_unit(6, &mut rng));
            let s = similarity(&x, &y, 0.1).unwrap();
            assert!(s >= (-10.0f64).exp() * (1.0 - 1e-12) && s <= 10.0f64.exp() * (1.0 + 1e-12));
            assert_eq!(s, similarity(&y, &x, 0.1).unwrap());
        }
    }

    #[test]
    fn weights_uniform_at_zero_beta() {
        let w = hard_negative_weights(&[0.3, 5.0, 1.2, 9.0], 0.0).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn weights_direct_formula() {
        let w = hard_negative_weights(&[1.0, 2.0], 1.0).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(hard_negative_weights(&[], 1.0).unwrap().is_empty());
        assert!(hard_negative_weights(&[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn uniform_scores_give_log_n() {
        // All candidates identical to each other -> every score equal.
        for n in [2usize, 5, 16] {
            let v = unit(vec![0.3, -0.2, 0.9]);
            let set = CandidateSet {
                anchor: unit(vec![0.1, 0.7, 0.2]),
                positive: v.clone(),
                negatives: vec![v; n - 1],
            };
            for beta in [0.0, 0.5, 1.0] {
                let l = info_nce_loss(&set, 0.1, beta).unwrap();
                assert!((l - (n as f64).ln()).abs() < 1e-12, "n={n} beta={beta}: {l}");
            }
        }
    }

    #[test]
    fn no_negatives_gives_zero() {
        let set = CandidateSet {
            anchor: vec![1.0, 0.0],
            positive: vec![0.0, 1.0],
            negatives: vec![],
        };
        assert_eq!(info_nce_loss(&set, 0.1, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for beta in [0.0, 0.5, 1.0] {
            let set = random_set(8, 5, &mut rng);
            let t = 0.5;
            let hp = similarity(&set.anchor, &set.positive, t).unwrap();
            let hn: Vec<f64> = set
                .negatives
                .iter()
                .map(|n| similarity(&set.anchor, n, t).unwrap())
                .collect();
            let w = hard_negative_weights(&hn, beta).unwrap();
            let mass: f64 = 4.0 * w.iter().zip(&hn).map(|(a, b)| a * b).sum::<f64>();
            let direct = -(hp / (hp + mass)).ln();
            assert!((info_nce_loss(&set, t, beta).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_violation_rejected() {
        let set = CandidateSet {
            anchor: vec![1.0, 0.1],
            positive: vec![1.0, 0.0],
            negatives: vec![vec![0.0, 1.0]],
        };
        assert!(matches!(info_nce_loss(&set, 0.1, 0.0), Err(Error::Contract(_))));
    }

    fn fd_check(f: impl Fn(&CandidateSet) -> f64, set: &CandidateSet, grad: &CandidateGrad) -> f64 {
        let h = 1e-6;
        let mut worst = 0.0f64;
        let mut probe = |get: &dyn Fn(&mut CandidateSet) -> &mut Vec<f64>, an: &[f64]| {
            for k in 0..an.len() {
                let mut p = set.clone();
                get(&mut p)[k] += h;
                let mut m = set.clone();
                get(&mut m)[k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let rel = (fd - an[k]).abs() / fd.abs().max(an[k].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        };
        probe(&|s| &mut s.anchor, &grad.anchor);
        probe(&|s| &mut s.positive, &grad.positive);
        for j in 0..set.negatives.len() {
            probe(&move |s| &mut s.negatives[j], &grad.negatives[j]);
        }
        worst
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for beta in [0.0, 0.5, 1.0] {
            for _ in 0..5 {
                let set = random_set(8, 5, &mut rng);
                let (_, g) = info_nce_loss_with_grad(&set, 0.5, beta).unwrap();
                let worst = fd_check(|s| info_nce_loss(s, 0.5, beta).unwrap(), &set, &g);
                assert!(worst < 1e-4, "beta {beta}: {worst}");
            }
        }
    }

    #[test]
    fn symmetric_loss_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = 4;
        let za = Embeddings::new(b, 6, (0..b).flat_map(|_| random_unit(6, &mut rng)).collect()).unwrap();
        let zb = Embeddings::new(b, 6, (0..b).flat_map(|_| random_unit(6, &mut rng)).collect()).unwrap();
        let sa = in_batch_candidates(&za, &zb).unwrap();
        let sb = in_batch_candidates(&zb, &za).unwrap();
        let l = symmetric_contrastive_loss(&sa, &sb, 0.1, 0.5).unwrap();
        assert_eq!(l, symmetric_contrastive_loss(&sb, &sa, 0.1, 0.5).unwrap());
        let (lg, _, _) = in_batch_symmetric_loss_with_grad(&za, &zb, 0.1, 0.5).unwrap();
        assert!((l - lg).abs() < 1e-12);
        assert!(symmetric_contrastive_loss(&sa, &sb[..2], 0.1, 0.5).is_err());

        let single = symmetric_contrastive_loss(&sa[..1], &sb[..1], 0.1, 0.5).unwrap();
        let parts = info_nce_loss(&sa[0], 0.1, 0.5).unwrap() + info_nce_loss(&sb[0], 0.1, 0.5).unwrap();
        assert_eq!(single, parts);
    }

    #[test]
    fn in_batch_swap_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let za = Embeddings::new(5, 4, (0..5).flat_map(|_| random_unit(4, &mut rng)).collect()).unwrap();
        let zb = Embeddings::new(5, 4, (0..5).flat_map(|_| random_unit(4, &mut rng)).collect()).unwrap();
        let (l1, ga, gb) = in_batch_symmetric_loss_with_grad(&za, &zb, 0.1, 0.5).unwrap();
        let (l2, gb2, ga2) = in_batch_symmetric_loss_with_grad(&zb, &za, 0.1, 0.5).unwrap();
        assert_eq!(l1, l2);
        assert_eq!((ga, gb), (ga2, gb2));
    }

    #[test]
    fn symmetric_uniform_gives_two_log_n() {
        let v = unit(vec![1.0, 2.0, 3.0]);
        let n = 5;
        let za = Embeddings::new(n, 3, v.repeat(n)).unwrap();
        let l = in_batch_symmetric_loss_with_grad(&za, &za, 0.1, 0.5).unwrap().0;
        assert!((l - 2.0 * (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn in_batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, d) = (4, 5);
        let za = Embeddings::new(b, d, (0..b).flat_map(|_| random_unit(d, &mut rng)).collect()).unwrap();
        let zb = Embeddings::new(b, d, (0..b).flat_map(|_| random_unit(d, &mut rng)).collect()).unwrap();
        let (_, ga, gb) = in_batch_symmetric_loss_with_grad(&za, &zb, 0.3, 1.0).unwrap();
        let h = 1e-6;
        for which in 0..2 {
            for idx in 0..b * d {
                let bump = |delta: f64| {
                    let (mut a, mut bb) = (za.clone(), zb.clone());
                    if which == 0 {
                        a.data[idx] += delta;
                    } else {
                        bb.data[idx] += delta;
                    }
                    in_batch_symmetric_loss_with_grad(&a, &bb, 0.3, 1.0).unwrap().0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = if which == 0 { ga.data[idx] } else { gb.data[idx] };
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn byol_anchor_values() {
        let q = Embeddings::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let anti = Embeddings::new(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        let orth = Embeddings::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(byol_loss(&q, &q).unwrap(), 0.0);
        assert!((byol_loss(&q, &anti).unwrap() - 4.0).abs() < 1e-12);
        assert!((byol_loss(&q, &orth).unwrap() - 2.0).abs() < 1e-12);
        let short = Embeddings::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(byol_loss(&q, &short), Err(Error::Contract(_))));
    }

    #[test]
    fn byol_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (b, d) = (5, 8);
        let q = Embeddings::new(b, d, (0..b).flat_map(|_| random_unit(d, &mut rng)).collect()).unwrap();
        let t = Embeddings::new(b, d, (0..b).flat_map(|_| random_unit(d, &mut rng)).collect()).unwrap();
        let (_, g) = byol_loss_with_grad(&q, &t).unwrap();
        let h = 1e-6;
        for idx in 0..b * d {
            let mut p = q.clone();
            p.data[idx] += h;
            let mut m = q.clone();
            m.data[idx] -= h;
            let fd = (byol_loss(&p, &t).unwrap() - byol_loss(&m, &t).unwrap()) / (2.0 * h);
            assert!((fd - g.data[idx]).abs() / fd.abs().max(g.data[idx].abs()).max(1e-6) < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn byol_in_range_and_matches_cosine_form(seed in any::<u64>(), b in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 7;
            let q = Embeddings::new(b, d, (0..b).flat_map(|_| random_unit(d, &mut rng)).collect()).unwrap();
            let t = Embeddings::new(b, d, (0..b).flat_map(|_| random_unit(d, &mut rng)).collect()).unwrap();
            let l = byol_loss(&q, &t).unwrap();
            prop_assert!((0.0..=4.0).contains(&l));
            let cos_form: f64 = (0..b).map(|i| 2.0 - 2.0 * dot(q.row(i), t.row(i))).sum::<f64>() / b as f64;
            prop_assert!((l - cos_form).abs() < 1e-12);
        }

        #[test]
        fn info_nce_non_negative(seed in any::<u64>(), n in 1usize..9, beta in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(6, n, &mut rng);
            prop_assert!(info_nce_loss(&set, 0.1, beta).unwrap() >= 0.0);
        }

        #[test]
        fn weights_invariant_to_score_rescaling(seed in any::<u64>(), c in 0.01f64..100.0, beta in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..20.0)).collect();
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            let (w1, w2) = (hard_negative_weights(&s, beta).unwrap(), hard_negative_weights(&scaled, beta).unwrap());
            prop_assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in w1.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn weights_monotone_in_score(seed in any::<u64>(), beta in 0.01f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..20.0)).collect();
            let w = hard_negative_weights(&s, beta).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    if s[i] <= s[j] {
                        prop_assert!(w[i] <= w[j] + 1e-15);
                    }
                }
            }
        }
    }
}
