//! Numerical checks of the two theoretical results the method rests on:
//! the L1 / Laplace-prior equivalence and the fourth-order agreement of the
//! Jeffreys divergence with the squared Fisher-Rao distance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    fisher_rao_distance, geodesic_residual_order, jeffreys, laplace_log_density,
    laplace_neg_log_prior, ProbVector, ResidualReference,
};
use crate::rng::{stream_rng, STREAM_VERIFY};

pub const RESIDUAL_SCALES: [f64; 4] = [1e-1, 3e-2, 1e-2, 3e-3];
pub const SLOPE_RANGE: (f64, f64) = (3.7, 4.3);
pub const ZERO_REFERENCE_SLOPE_RANGE: (f64, f64) = (1.7, 2.3);
/// Scale at which `D_J / d^2` is compared to 1.
pub const RATIO_SCALE: f64 = 1e-2;
pub const RATIO_TOL: f64 = 5e-3;
/// Relative tolerance of the closed-form prior against summed log densities.
pub const PRIOR_IDENTITY_TOL: f64 = 1e-12;
pub const MAP_GRID_STEP: f64 = 1e-3;
pub const MAP_GRID_HALF_WIDTH: f64 = 2.0;
const CLASS_COUNTS: [usize; 3] = [3, 5, 10];

/// Softmax of standard normals: a random point well inside the simplex.
pub fn random_interior_point(classes: usize, rng: &mut ChaCha8Rng) -> ProbVector {
    let g: Vec<f64> = (0..classes).map(|_| rng.sample(StandardNormal)).collect();
    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = g.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut p: Vec<f64> = e.iter().map(|v| v / z).collect();
    // push the rounding residue into the largest entry
    let (imax, _) = p.iter().enumerate().fold(
        (0, 0.0),
        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
    );
    let rest: f64 = p
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imax)
        .map(|(_, v)| v)
        .sum();
    p[imax] = 1.0 - rest;
    ProbVector::new(p).expect("softmax output is a probability vector")
}

/// A random zero-sum direction scaled so that the largest relative change
/// `|v_i| / p_i` is exactly 1; `p + e v` stays interior for every `e < 1`.
pub fn random_tangent(p: &ProbVector, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = p.as_slice();
    let g: Vec<f64> = p.iter().map(|_| rng.sample(StandardNormal)).collect();
    let mean: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
    let mut v: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi * (gi - mean)).collect();
    // exact zero sum up to rounding
    let s: f64 = v.iter().sum();
    let n = v.len() as f64;
    v.iter_mut().for_each(|x| *x -= s / n);
    let rel = v
        .iter()
        .zip(p)
        .fold(0.0f64, |m, (vi, pi)| m.max(vi.abs() / pi));
    v.iter_mut().for_each(|x| *x /= rel);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Worst value of the checked statistic over all trials.
    pub worst: f64,
    pub criterion: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn summary(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<28} trials={:<5} failures={:<3} worst={:.6e}  ({})",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.trials,
                    c.failures,
                    c.worst,
                    c.criterion
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Trial counts per check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyPlan {
    pub geodesic_trials: usize,
    pub prior_identity_trials: usize,
    pub map_trials: usize,
}

pub fn verify_theorems(trials: usize, seed: u64) -> Result<VerificationReport> {
    verify_theorems_with(
        VerifyPlan {
            geodesic_trials: trials,
            prior_identity_trials: trials,
            map_trials: trials,
        },
        seed,
    )
}

pub fn verify_theorems_with(plan: VerifyPlan, seed: u64) -> Result<VerificationReport> {
    if plan.geodesic_trials == 0 || plan.prior_identity_trials == 0 || plan.map_trials == 0 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, STREAM_VERIFY);
    let mut checks = geodesic_checks(plan.geodesic_trials, &mut rng);
    checks.push(prior_identity_check(plan.prior_identity_trials, &mut rng));
    checks.push(map_check(plan.map_trials, &mut rng));
    Ok(VerificationReport { seed, checks })
}

fn tally(
    name: &str,
    criterion: String,
    outcomes: &[(bool, f64)],
    worst_is_max: bool,
) -> CheckResult {
    let worst = outcomes.iter().map(|o| o.1).fold(
        if worst_is_max {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        },
        |a, b| if worst_is_max { a.max(b) } else { a.min(b) },
    );
    CheckResult {
        name: name.into(),
        trials: outcomes.len(),
        failures: outcomes.iter().filter(|o| !o.0).count(),
        worst,
        criterion,
    }
}

fn geodesic_checks(trials: usize, rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let (lo, hi) = SLOPE_RANGE;
    let (zlo, zhi) = ZERO_REFERENCE_SLOPE_RANGE;
    let mut slope_dev = Vec::with_capacity(trials);
    let mut zero_dev = Vec::with_capacity(trials);
    let mut ratio = Vec::with_capacity(trials);
    for t in 0..trials {
        let c = CLASS_COUNTS[t % CLASS_COUNTS.len()];
        let p = random_interior_point(c, rng);
        let v = random_tangent(&p, rng);

        let slope =
            geodesic_residual_order(&p, &v, &RESIDUAL_SCALES, ResidualReference::SquaredGeodesic);
        slope_dev.push(match slope {
            Ok(s) => ((lo..=hi).contains(&s), (s - 4.0).abs()),
            Err(_) => (false, f64::INFINITY),
        });
        let slope0 = geodesic_residual_order(&p, &v, &RESIDUAL_SCALES, ResidualReference::Zero);
        zero_dev.push(match slope0 {
            Ok(s) => ((zlo..=zhi).contains(&s), (s - 2.0).abs()),
            Err(_) => (false, f64::INFINITY),
        });

        let q: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(&v)
            .map(|(a, b)| a + RATIO_SCALE * b)
            .collect();
        let r = ProbVector::new(q).and_then(|q| {
            let dj = jeffreys(&p, &q)?;
            let d = fisher_rao_distance(&p, &q)?;
            Ok((dj / (d * d) - 1.0).abs())
        });
        ratio.push(match r {
            Ok(e) => (e < RATIO_TOL, e),
            Err(_) => (false, f64::INFINITY),
        });
    }
    vec![
        tally(
            "jeffreys-geodesic order",
            format!("fitted order of |D_J - d^2| in [{lo}, {hi}]; worst = max |slope - 4|"),
            &slope_dev,
            true,
        ),
        tally(
            "jeffreys-zero order",
            format!("fitted order of D_J alone in [{zlo}, {zhi}]; worst = max |slope - 2|"),
            &zero_dev,
            true,
        ),
        tally(
            "jeffreys/geodesic ratio",
            format!("|D_J / d^2 - 1| < {RATIO_TOL} at scale {RATIO_SCALE}"),
            &ratio,
            true,
        ),
    ]
}

fn prior_identity_check(trials: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let outcomes: Vec<(bool, f64)> = (0..trials)
        .map(|_| {
            let c = rng.random_range(1..=10u32) as usize;
            let delta: Vec<f64> = (0..c)
                .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b = rng.random_range(0.05..5.0);
            let closed = laplace_neg_log_prior(&delta, b).expect("b > 0");
            let summed: f64 = delta
                .iter()
                .map(|&d| -laplace_log_density(d, b).expect("b > 0"))
                .sum();
            let err = (closed - summed).abs() / closed.abs().max(1.0);
            (err <= PRIOR_IDENTITY_TOL, err)
        })
        .collect();
    tally(
        "laplace prior identity",
        format!("|C ln 2b + |d|_1/b + sum ln p(d_c)| <= {PRIOR_IDENTITY_TOL} * max(1, |value|)"),
        &outcomes,
        true,
    )
}

/// Lowest-index argmin over the grid `-2, -2 + h, ..., 2`.
fn grid_argmin(f: impl Fn(f64) -> f64) -> usize {
    let n = (2.0 * MAP_GRID_HALF_WIDTH / MAP_GRID_STEP).round() as usize;
    let mut best = (0, f64::INFINITY);
    for k in 0..=n {
        let v = f(-MAP_GRID_HALF_WIDTH + k as f64 * MAP_GRID_STEP);
        if v < best.1 {
            best = (k, v);
        }
    }
    best.0
}

fn map_check(trials: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let outcomes: Vec<(bool, f64)> = (0..trials)
        .map(|_| {
            let curvature = rng.random_range(0.5..5.0);
            let center = rng.random_range(-2.0..2.0);
            let b = rng.random_range(0.2..2.0);
            let data = move |d: f64| 0.5 * curvature * (d - center) * (d - center);
            let l1 = grid_argmin(|d| data(d) + d.abs() / b);
            let map = grid_argmin(|d| data(d) - laplace_log_density(d, b).expect("b > 0"));
            (l1 == map, l1.abs_diff(map) as f64)
        })
        .collect();
    tally(
        "laplace MAP = L1 argmin",
        format!("same grid cell (step {MAP_GRID_STEP}); worst = max cell offset"),
        &outcomes,
        true,
    )
}
