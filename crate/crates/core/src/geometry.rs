//! Probability-simplex geometry: tempered softmax, KL and Jeffreys
//! divergences, the Fisher-Rao geodesic distance, and the Laplace prior.
//!
//! These are verification tools. Divergences reject boundary points outright
//! instead of clamping; the clamped variants used during training live in
//! [`crate::objectives`].

use crate::error::{Error, Result};

/// Tolerance on `sum(p) == 1`.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Smallest perturbation scale accepted by [`geodesic_residual_order`].
pub const MIN_RESIDUAL_SCALE: f64 = 1e-4;

/// A point of the closed probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Shape("empty probability vector".into()));
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!("component {i} is {}", p[i])));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::Domain(format!("components sum to {sum}")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }

    fn require_interior(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|&v| v <= 0.0) {
            Some(i) => Err(Error::Domain(format!("{what}: component {i} is zero"))),
            None => Ok(()),
        }
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Unnormalized class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "logits",
                format!("component {i} is {}", s[i]),
            ));
        }
        Ok(Self(s))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `log softmax(s / tau)`, stabilized by max subtraction.
pub(crate) fn log_softmax(s: &[f64], tau: f64) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = s.iter().map(|v| (v - max) / tau).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

/// `softmax(s / tau)`.
pub fn softmax_temp(s: &LogitVector, tau: f64) -> Result<ProbVector> {
    check_temperature(tau)?;
    if s.is_empty() {
        return Err(Error::Shape("empty logit vector".into()));
    }
    Ok(ProbVector(softmax_raw(s.as_slice(), tau)))
}

pub(crate) fn softmax_raw(s: &[f64], tau: f64) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| ((v - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn same_len(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() == q.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!("lengths {} and {}", p.len(), q.len())))
    }
}

/// `sum p_i ln(p_i / q_i)` for strictly interior `p`, `q`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p, q)?;
    p.require_interior("p")?;
    q.require_interior("q")?;
    // ln(p/q) = -ln(1 + (q-p)/p) keeps precision when q is close to p.
    let kl =
        p.0.iter()
            .zip(&q.0)
            .map(|(&pi, &qi)| -pi * ((qi - pi) / pi).ln_1p())
            .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Symmetrized KL, `KL(p||q) + KL(q||p)`.
///
/// Evaluated as `sum (q_i - p_i) ln(q_i / p_i)`, which is algebraically the
/// same sum but has no cancellation: every term is non-negative.
pub fn jeffreys(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p, q)?;
    p.require_interior("p")?;
    q.require_interior("q")?;
    Ok(p.0
        .iter()
        .zip(&q.0)
        .map(|(&pi, &qi)| {
            let d = qi - pi;
            d * (d / pi).ln_1p()
        })
        .sum())
}

/// Fisher-Rao geodesic distance on the simplex, `2 acos(sum sqrt(p_i q_i))`.
///
/// Boundary points are allowed. The arccos form loses about half the digits
/// for nearby points, so this evaluates the same quantity through the chord
/// between `sqrt(p)` and `sqrt(q)` on the unit sphere:
/// `4 asin(||sqrt(p) - sqrt(q)|| / 2)`.
pub fn fisher_rao_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p, q)?;
    let chord_sq: f64 =
        p.0.iter()
            .zip(&q.0)
            .map(|(&pi, &qi)| {
                let s = pi.sqrt() + qi.sqrt();
                let diff = if s == 0.0 { 0.0 } else { (pi - qi) / s };
                diff * diff
            })
            .sum();
    let half_chord = (chord_sq.sqrt() / 2.0).min(1.0);
    Ok(4.0 * half_chord.asin())
}

/// Reference form `2 acos(clamp(sum sqrt(p_i q_i), -1, 1))`.
pub fn fisher_rao_distance_arccos(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p, q)?;
    let bc: f64 = p.0.iter().zip(&q.0).map(|(a, b)| (a * b).sqrt()).sum();
    Ok(2.0 * bc.clamp(-1.0, 1.0).acos())
}

/// What the Jeffreys divergence is compared against in
/// [`geodesic_residual_order`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualReference {
    /// `D_J - d^2`, expected to vanish at fourth order.
    SquaredGeodesic,
    /// `D_J - 0`, second order; used to show the fit discriminates.
    Zero,
}

/// Perturbs `p` along a zero-sum `direction` at each scale, and returns the
/// least-squares slope of `ln |D_J(p, p + e v) - reference|` against `ln e`.
pub fn geodesic_residual_order(
    p: &ProbVector,
    direction: &[f64],
    scales: &[f64],
    reference: ResidualReference,
) -> Result<f64> {
    let points = residual_points(p, direction, scales, reference)?;
    Ok(least_squares_slope(&points))
}

/// The `(ln e, ln |residual|)` pairs behind [`geodesic_residual_order`].
pub fn residual_points(
    p: &ProbVector,
    direction: &[f64],
    scales: &[f64],
    reference: ResidualReference,
) -> Result<Vec<(f64, f64)>> {
    p.require_interior("base point")?;
    if direction.len() != p.len() {
        return Err(Error::Shape(format!(
            "direction has length {}, point has {}",
            direction.len(),
            p.len()
        )));
    }
    let dsum: f64 = direction.iter().sum();
    let dscale = direction.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if dscale == 0.0 || dsum.abs() > 1e-12 * dscale * direction.len() as f64 {
        return Err(Error::Parameter(format!(
            "direction must be nonzero and sum to zero (sum {dsum})"
        )));
    }
    if scales.len() < 4 {
        return Err(Error::Parameter(format!(
            "need at least 4 scales, got {}",
            scales.len()
        )));
    }
    if let Some(e) = scales
        .iter()
        .find(|&&e| !e.is_finite() || e < MIN_RESIDUAL_SCALE)
    {
        return Err(Error::Parameter(format!(
            "scale {e} is below the minimum {MIN_RESIDUAL_SCALE}"
        )));
    }
    let lo = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scales.iter().copied().fold(0.0, f64::max);
    if hi < 10.0 * lo {
        return Err(Error::Parameter(format!(
            "scales must span at least a decade, got [{lo}, {hi}]"
        )));
    }

    scales
        .iter()
        .map(|&eps| {
            let q: Vec<f64> =
                p.0.iter()
                    .zip(direction)
                    .map(|(pi, vi)| pi + eps * vi)
                    .collect();
            if let Some(i) = q.iter().position(|&v| v <= 0.0) {
                return Err(Error::Domain(format!(
                    "perturbation at scale {eps} leaves the simplex at component {i}"
                )));
            }
            let q = ProbVector::new(q)?;
            let dj = jeffreys(p, &q)?;
            let target = match reference {
                ResidualReference::SquaredGeodesic => fisher_rao_distance(p, &q)?.powi(2),
                ResidualReference::Zero => 0.0,
            };
            let r = (dj - target).abs();
            if r == 0.0 {
                return Err(Error::numerical(
                    "geodesic residual",
                    format!("residual is exactly zero at scale {eps}"),
                ));
            }
            Ok((eps.ln(), r.ln()))
        })
        .collect()
}

pub(crate) fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn check_scale(b: f64) -> Result<()> {
    if b > 0.0 && b.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "Laplace scale must be positive, got {b}"
        )))
    }
}

/// Log density of the zero-mean Laplace distribution with scale `b`.
pub fn laplace_log_density(x: f64, b: f64) -> Result<f64> {
    check_scale(b)?;
    Ok(-(2.0 * b).ln() - x.abs() / b)
}

/// Negative log of the independent Laplace prior over a deviation vector:
/// `C ln(2b) + ||delta||_1 / b`.
pub fn laplace_neg_log_prior(delta: &[f64], b: f64) -> Result<f64> {
    check_scale(b)?;
    let l1: f64 = delta.iter().map(|d| d.abs()).sum();
    Ok(delta.len() as f64 * (2.0 * b).ln() + l1 / b)
}
