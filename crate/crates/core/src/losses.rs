//! Training objectives with their analytic gradients.
//!
//! * regression: per-element mean `|C|` averaged over live samples only;
//! * triplet: batch-all mining with live anchors/positives and spoof
//!   negatives over L2-normalised pooled features, averaged over active
//!   triplets;
//! * classification: binary cross-entropy on the auxiliary classifier;
//! * total: `alpha1 * Lr + alpha2 * sum_k Lt_k + alpha3 * La`.

use serde::{Deserialize, Serialize};

use crate::datamodel::Label;
use crate::generator::TapLayer;
use crate::tensor::{lit, Scalar, Tensor};
use crate::{Error, Result};

/// Added under the square root of every feature norm.
pub const NORM_EPS: f64 = 1e-12;
/// Probability clamp of the classification loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.5 }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("triplet margin {} must be > 0", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 5.0,
            alpha2: 1.0,
            alpha3: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha1, self.alpha2, self.alpha3];
        if w.iter().any(|a| !a.is_finite() || *a < 0.0) || w.iter().all(|a| *a == 0.0) {
            return Err(Error::Config(format!(
                "loss weights {w:?} must be non-negative with at least one positive"
            )));
        }
        Ok(())
    }
}

/// Which samples the cue regression supervises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTarget {
    /// Live cues pulled to zero; spoof cues unconstrained.
    #[default]
    LiveOnly,
    /// Ablation: live cues to zero and spoof cues to an all-one map.
    LiveAndSpoof,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub regression: f64,
    pub triplet: Vec<(TapLayer, f64)>,
    pub triplet_counts: Vec<(TapLayer, usize)>,
    pub classification: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn triplet_sum(&self) -> f64 {
        self.triplet.iter().map(|(_, v)| v).sum()
    }
}

fn regression_impl<T: Scalar>(
    cues: &Tensor<T>,
    labels: &[Label],
    target: RegressionTarget,
    want_grad: bool,
) -> (T, Option<Tensor<T>>) {
    assert_eq!(cues.n, labels.len(), "regression: one label per cue map");
    let supervised: Vec<(usize, T)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match (l, target) {
            (Label::Live, _) => Some((i, T::zero())),
            (Label::Spoof, RegressionTarget::LiveAndSpoof) => Some((i, T::one())),
            (Label::Spoof, RegressionTarget::LiveOnly) => None,
        })
        .collect();
    let mut grad = want_grad.then(|| Tensor::zeros(cues.n, cues.c, cues.h, cues.w));
    if supervised.is_empty() {
        return (T::zero(), grad);
    }
    let per = lit::<T>(cues.sample_len() as f64);
    let count = lit::<T>(supervised.len() as f64);
    let mut total = T::zero();
    for &(i, goal) in &supervised {
        let s = cues.sample(i);
        total += s.iter().map(|v| (*v - goal).abs()).sum::<T>() / per;
        if let Some(g) = grad.as_mut() {
            let scale = T::one() / (per * count);
            for (gv, v) in g.sample_mut(i).iter_mut().zip(s) {
                let d = *v - goal;
                *gv = if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                };
            }
        }
    }
    (total / count, grad)
}

/// Mean over live samples of the per-element mean of `|C|`; zero if the
/// batch holds no live sample.
pub fn regression_loss<T: Scalar>(cues: &Tensor<T>, labels: &[Label]) -> T {
    regression_impl(cues, labels, RegressionTarget::LiveOnly, false).0
}

/// Value and gradient w.r.t. the cue maps.
pub fn regression_loss_grad<T: Scalar>(
    cues: &Tensor<T>,
    labels: &[Label],
    target: RegressionTarget,
) -> (T, Tensor<T>) {
    let (v, g) = regression_impl(cues, labels, target, true);
    (v, g.expect("requested"))
}

fn normalize<T: Scalar>(v: &[T]) -> (Vec<T>, T) {
    let sq = v.iter().map(|x| *x * *x).sum::<T>();
    #[cfg(debug_assertions)]
    if sq == T::zero() {
        log::debug!("zero-norm feature vector in triplet loss (epsilon-regularised)");
    }
    let r = (sq + lit::<T>(NORM_EPS)).sqrt();
    (v.iter().map(|x| *x / r).collect(), r)
}

fn euclid<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum::<T>()
        .sqrt()
}

/// `D[i][j] = ||v_i/||v_i|| - v_j/||v_j||||`.
pub fn pairwise_distances<T: Scalar>(features: &[Vec<T>]) -> Vec<Vec<T>> {
    let units: Vec<Vec<T>> = features.iter().map(|v| normalize(v).0).collect();
    distances_of(&units)
}

fn distances_of<T: Scalar>(units: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = units.len();
    let mut d = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclid(&units[i], &units[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Every ordered `(anchor, positive, negative)` with live anchor and
/// positive (`a != p`), spoof negative and a positive hinge
/// `d(a,p) - d(a,n) + m > 0`.
pub fn mine_triplets<T: Scalar>(
    labels: &[Label],
    distances: &[Vec<T>],
    margin: T,
) -> Vec<(usize, usize, usize)> {
    let live: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_live()).collect();
    let spoof: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_spoof()).collect();
    let mut out = Vec::new();
    for &a in &live {
        for &p in &live {
            if a == p {
                continue;
            }
            for &n in &spoof {
                if distances[a][p] - distances[a][n] + margin > T::zero() {
                    out.push((a, p, n));
                }
            }
        }
    }
    out
}

/// Mean hinge over mined triplets and the number of triplets; `(0, 0)` when
/// none are active.
pub fn triplet_loss<T: Scalar>(features: &[Vec<T>], labels: &[Label], margin: T) -> (T, usize) {
    let (v, t, _) = triplet_loss_grad(features, labels, margin);
    (v, t)
}

/// As [`triplet_loss`] plus the gradient w.r.t. the raw feature vectors.
pub fn triplet_loss_grad<T: Scalar>(
    features: &[Vec<T>],
    labels: &[Label],
    margin: T,
) -> (T, usize, Vec<Vec<T>>) {
    assert_eq!(features.len(), labels.len(), "triplet: one label per feature");
    let normed: Vec<(Vec<T>, T)> = features.iter().map(|v| normalize(v)).collect();
    let units: Vec<Vec<T>> = normed.iter().map(|(u, _)| u.clone()).collect();
    let d = distances_of(&units);
    let triplets = mine_triplets(labels, &d, margin);
    let mut grads: Vec<Vec<T>> = features.iter().map(|v| vec![T::zero(); v.len()]).collect();
    if triplets.is_empty() {
        return (T::zero(), 0, grads);
    }
    let count = lit::<T>(triplets.len() as f64);
    let n = features.len();
    // coefficient of dL/dd_ij, accumulated over triplets
    let mut coef = vec![vec![T::zero(); n]; n];
    let mut total = T::zero();
    for &(a, p, neg) in &triplets {
        total += d[a][p] - d[a][neg] + margin;
        coef[a][p] += T::one() / count;
        coef[a][neg] -= T::one() / count;
    }
    let mut gu: Vec<Vec<T>> = units.iter().map(|u| vec![T::zero(); u.len()]).collect();
    for i in 0..n {
        for j in 0..n {
            let c = coef[i][j];
            if c == T::zero() || d[i][j] == T::zero() {
                continue;
            }
            let s = c / d[i][j];
            for k in 0..units[i].len() {
                let diff = units[i][k] - units[j][k];
                gu[i][k] += s * diff;
                gu[j][k] -= s * diff;
            }
        }
    }
    // back through u = v / sqrt(|v|^2 + eps)
    for (i, (u, r)) in normed.iter().enumerate() {
        let dot = u.iter().zip(&gu[i]).map(|(a, b)| *a * *b).sum::<T>();
        for k in 0..u.len() {
            grads[i][k] = (gu[i][k] - u[k] * dot) / *r;
        }
    }
    (total / count, triplets.len(), grads)
}

/// Mean binary cross-entropy `-(1/N) sum [z ln q + (1-z) ln(1-q)]` with `q`
/// clamped to `[1e-7, 1 - 1e-7]`; spoof is the positive class.
pub fn classification_loss<T: Scalar>(probs: &[T], labels: &[Label]) -> T {
    classification_loss_grad(probs, labels).0
}

/// Value and gradient w.r.t. the probabilities (zero where clamped).
pub fn classification_loss_grad<T: Scalar>(probs: &[T], labels: &[Label]) -> (T, Vec<T>) {
    assert_eq!(probs.len(), labels.len(), "classification: one label per probability");
    let n = lit::<T>(probs.len().max(1) as f64);
    let lo = lit::<T>(PROB_EPS);
    let hi = T::one() - lo;
    let mut total = T::zero();
    let mut grad = vec![T::zero(); probs.len()];
    for (i, (&q, l)) in probs.iter().zip(labels).enumerate() {
        let z = lit::<T>(l.target());
        let qc = q.max(lo).min(hi);
        total -= z * qc.ln() + (T::one() - z) * (T::one() - qc).ln();
        if qc == q {
            grad[i] = -(z / q - (T::one() - z) / (T::one() - q)) / n;
        }
    }
    (total / n, grad)
}

/// `alpha1 * Lr + alpha2 * sum_k Lt_k + alpha3 * La`.
pub fn total_loss(regression: f64, triplet_sum: f64, classification: f64, w: &LossWeights) -> Result<f64> {
    let parts = [regression, triplet_sum, classification];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("Lr={regression} sum Lt={triplet_sum} La={classification}"),
        });
    }
    Ok(w.alpha1 * regression + w.alpha2 * triplet_sum + w.alpha3 * classification)
}
