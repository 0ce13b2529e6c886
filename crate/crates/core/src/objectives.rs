//! Training objective: fused cross-entropy plus the two L1 logit-consistency
//! priors and the Jeffreys consensus term, with hand-derived gradients for
//! both adapters and a central-difference checker.

use serde::{Deserialize, Serialize};

use crate::dd::Dd;
use crate::embedding_store::{EmbeddingMatrix, FrozenData, LabeledRow};
use crate::error::{Error, Result};
use crate::experts::{self, check_fusion_weights, fi_trace, fr_trace, fuse_raw, ExpertParams};
use crate::geometry::{check_temperature, log_softmax, LogitVector};

/// Probability floor applied inside loss logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Every scalar the method needs. Field names double as the JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoMuCoConfig {
    /// Fusion weight of the refiner logits.
    pub alpha: f64,
    /// Fusion weight of the integrator logits.
    pub beta: f64,
    /// Weight of the refiner's L1 prior term.
    pub lambda1: f64,
    /// Weight of the integrator's L1 prior term.
    pub lambda2: f64,
    /// Weight of the consensus term.
    pub lambda3: f64,
    /// Softmax temperature; logits are divided by it.
    pub tau: f64,
    /// Laplace scale. Only used by the prior verification path; in the loss
    /// `1/b` is folded into `lambda1`/`lambda2`.
    pub b: f64,
    /// `None` picks 50, or 300 for manifests flagged `cross_domain`.
    pub epochs: Option<usize>,
    pub warmup_lr: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    /// Refiner hidden width; `None` means `4 * dim`.
    pub hidden_dim: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for CoMuCoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            tau: 0.01,
            b: 1.0,
            epochs: None,
            warmup_lr: 1e-5,
            peak_lr: 0.002,
            batch_size: 32,
            hidden_dim: None,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_CROSS_DOMAIN_EPOCHS: usize = 300;

impl CoMuCoConfig {
    pub fn validate(&self) -> Result<()> {
        check_fusion_weights(self.alpha, self.beta)?;
        check_temperature(self.tau)?;
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::Parameter(format!(
                "b must be positive, got {}",
                self.b
            )));
        }
        if !(self.warmup_lr > 0.0 && self.peak_lr > 0.0 && self.warmup_lr <= self.peak_lr) {
            return Err(Error::Parameter(format!(
                "need 0 < warmup_lr <= peak_lr, got {} and {}",
                self.warmup_lr, self.peak_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::Parameter("hidden_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    pub fn epochs_for(&self, cross_domain: bool) -> usize {
        self.epochs.unwrap_or(if cross_domain {
            DEFAULT_CROSS_DOMAIN_EPOCHS
        } else {
            DEFAULT_EPOCHS
        })
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden_dim.unwrap_or(4 * dim)
    }
}

/// Batch-mean values of each loss term and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l_r: f64,
    pub l_i: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(ce: f64, l_r: f64, l_i: f64, l_d: f64, cfg: &CoMuCoConfig) -> Self {
        Self {
            ce,
            l_r,
            l_i,
            l_d,
            total: ce + cfg.lambda1 * l_r + cfg.lambda2 * l_i + cfg.lambda3 * l_d,
        }
    }
}

/// Cosine similarity of a unit feature against each unit text row.
pub fn cosine_logits(z: &[f64], text: &EmbeddingMatrix) -> Result<LogitVector> {
    if z.len() != text.cols() {
        return Err(Error::Shape(format!(
            "feature has dimension {}, text embeddings {}",
            z.len(),
            text.cols()
        )));
    }
    LogitVector::new(
        text.iter_rows()
            .map(|t| t.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect(),
    )
}

fn ce_single(s: &[f64], label: usize, tau: f64) -> f64 {
    -log_softmax(s, tau)[label]
}

/// Mean of `-ln softmax(s_i / tau)[y_i]`.
pub fn ce_loss(logits: &[LogitVector], labels: &[usize], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if logits.is_empty() {
        return Err(Error::Parameter("cross-entropy over an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit vectors but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (s, &y) in logits.iter().zip(labels) {
        if y >= s.len() {
            return Err(Error::Parameter(format!(
                "label {y} out of range for {} classes",
                s.len()
            )));
        }
        sum += ce_single(s.as_slice(), y, tau);
    }
    Ok(sum / logits.len() as f64)
}

fn l1_raw(s: &[f64], s_zs: &[f64]) -> f64 {
    s.iter().zip(s_zs).map(|(a, b)| (a - b).abs()).sum()
}

/// `||s - s_zs||_1`, summed over classes.
pub fn l1_consistency(s: &LogitVector, s_zs: &LogitVector) -> Result<f64> {
    if s.len() != s_zs.len() {
        return Err(Error::Shape(format!(
            "lengths {} and {}",
            s.len(),
            s_zs.len()
        )));
    }
    Ok(l1_raw(s.as_slice(), s_zs.as_slice()))
}

/// Batch mean of [`l1_consistency`].
pub fn l1_consistency_batch(s: &[LogitVector], s_zs: &[LogitVector]) -> Result<f64> {
    if s.is_empty() || s.len() != s_zs.len() {
        return Err(Error::Shape(format!(
            "batch sizes {} and {}",
            s.len(),
            s_zs.len()
        )));
    }
    let mut sum = 0.0;
    for (a, b) in s.iter().zip(s_zs) {
        sum += l1_consistency(a, b)?;
    }
    Ok(sum / s.len() as f64)
}

/// Tempered distribution with probabilities and floored log-probabilities.
struct Tempered {
    p: Vec<f64>,
    logp: Vec<f64>,
    /// Whether `logp[c]` is above the floor (its derivative is live).
    live: Vec<bool>,
}

fn tempered(s: &[f64], tau: f64) -> Tempered {
    let ls = log_softmax(s, tau);
    let floor = PROB_FLOOR.ln();
    Tempered {
        p: ls.iter().map(|v| v.exp()).collect(),
        logp: ls.iter().map(|&v| v.max(floor)).collect(),
        live: ls.iter().map(|&v| v > floor).collect(),
    }
}

fn consensus_raw(a: &Tempered, b: &Tempered) -> f64 {
    0.5 * a
        .p
        .iter()
        .zip(&b.p)
        .zip(a.logp.iter().zip(&b.logp))
        .map(|((p, q), (lp, lq))| (p - q) * (lp - lq))
        .sum::<f64>()
}

/// `0.5 * Jeffreys(softmax(s_fr / tau), softmax(s_fi / tau))` with
/// probabilities floored at [`PROB_FLOOR`] inside the logarithms.
pub fn consensus_loss(s_fr: &LogitVector, s_fi: &LogitVector, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if s_fr.len() != s_fi.len() {
        return Err(Error::Shape(format!(
            "lengths {} and {}",
            s_fr.len(),
            s_fi.len()
        )));
    }
    Ok(consensus_raw(
        &tempered(s_fr.as_slice(), tau),
        &tempered(s_fi.as_slice(), tau),
    ))
}

/// Batch mean of [`consensus_loss`].
pub fn consensus_loss_batch(s_fr: &[LogitVector], s_fi: &[LogitVector], tau: f64) -> Result<f64> {
    if s_fr.is_empty() || s_fr.len() != s_fi.len() {
        return Err(Error::Shape(format!(
            "batch sizes {} and {}",
            s_fr.len(),
            s_fi.len()
        )));
    }
    let mut sum = 0.0;
    for (a, b) in s_fr.iter().zip(s_fi) {
        sum += consensus_loss(a, b, tau)?;
    }
    Ok(sum / s_fr.len() as f64)
}

/// Softmax backward: gradient w.r.t. logits `s` of a function of
/// `p = softmax(s / tau)`, given its gradient `g` w.r.t. `p`.
fn softmax_backward(p: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(g)
        .map(|(pi, gi)| pi * (gi - dot) / tau)
        .collect()
}

fn l1_subgradient(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Backprop through `out = v / ||v||`.
fn normalize_backward(out: &[f64], norm: f64, d_out: &[f64]) -> Vec<f64> {
    let dot: f64 = out.iter().zip(d_out).map(|(a, b)| a * b).sum();
    out.iter()
        .zip(d_out)
        .map(|(o, g)| (g - o * dot) / norm)
        .collect()
}

/// `T^T g`: pulls a logit gradient back to the unit feature.
fn text_backward(text: &EmbeddingMatrix, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; text.cols()];
    for (t, &gc) in text.iter_rows().zip(g) {
        if gc != 0.0 {
            out.iter_mut().zip(t).for_each(|(o, v)| *o += gc * v);
        }
    }
    out
}

fn add_outer(dst: &mut [f64], left: &[f64], right: &[f64]) {
    let cols = right.len();
    for (row, &l) in dst.chunks_exact_mut(cols).zip(left) {
        if l != 0.0 {
            row.iter_mut().zip(right).for_each(|(d, r)| *d += l * r);
        }
    }
}

/// Values that decide which branch of a piecewise-smooth function the loss is
/// on: L1 deviations and ReLU pre-activations.
#[derive(Debug, Clone, Default)]
pub(crate) struct KinkState {
    pub deviations: Vec<f64>,
    pub preactivations: Vec<f64>,
}

fn check_batch(batch: &[LabeledRow], frozen: &FrozenData, params: &ExpertParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    if params.dim() != frozen.dim() {
        return Err(Error::Shape(format!(
            "adapters have dimension {}, features {}",
            params.dim(),
            frozen.dim()
        )));
    }
    let c = frozen.num_classes();
    for r in batch {
        if r.row >= frozen.features.rows() || r.label >= c {
            return Err(Error::Parameter(format!(
                "batch row {} (label {}) out of range",
                r.row, r.label
            )));
        }
    }
    Ok(())
}

fn finite_or(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(term, format!("value is {v}")))
    }
}

/// Full objective on one batch, with the analytic gradient for every adapter
/// parameter when `want_grad` is set. The zero-shot logits are constants.
pub(crate) fn evaluate_objective(
    batch: &[LabeledRow],
    params: &ExpertParams,
    frozen: &FrozenData,
    cfg: &CoMuCoConfig,
    want_grad: bool,
    kinks: Option<&mut KinkState>,
) -> Result<(LossBreakdown, Option<ExpertParams>)> {
    cfg.validate()?;
    check_batch(batch, frozen, params)?;
    let text = &frozen.text;
    let tau = cfg.tau;
    let inv_n = 1.0 / batch.len() as f64;
    let (mut ce, mut l_r, mut l_i, mut l_d) = (0.0, 0.0, 0.0, 0.0);
    let mut grad = want_grad.then(|| params.zeros_like());
    let mut kinks = kinks;

    for r in batch {
        let z = frozen.features.row(r.row);
        let fi = fi_trace(z, params)?;
        let fr = fr_trace(z, params)?;
        let s_zs = cosine_logits(z, text)?.into_vec();
        let s_fi = cosine_logits(&fi.out, text)?.into_vec();
        let s_fr = cosine_logits(&fr.out, text)?.into_vec();
        let fused = fuse_raw(&s_fr, &s_fi, &s_zs, cfg.alpha, cfg.beta);

        let ls = log_softmax(&fused, tau);
        ce += -ls[r.label];
        l_r += l1_raw(&s_fr, &s_zs);
        l_i += l1_raw(&s_fi, &s_zs);
        let t_fr = tempered(&s_fr, tau);
        let t_fi = tempered(&s_fi, tau);
        l_d += consensus_raw(&t_fr, &t_fi);

        if let Some(k) = kinks.as_deref_mut() {
            k.deviations
                .extend(s_fr.iter().zip(&s_zs).map(|(a, b)| a - b));
            k.deviations
                .extend(s_fi.iter().zip(&s_zs).map(|(a, b)| a - b));
            k.preactivations.extend_from_slice(&fr.pre);
        }

        let Some(g) = grad.as_mut() else { continue };

        // dCE/dfused
        let mut d_fused: Vec<f64> = ls.iter().map(|v| v.exp() / tau).collect();
        d_fused[r.label] -= 1.0 / tau;

        let mut d_fr: Vec<f64> = d_fused.iter().map(|g| cfg.alpha * g).collect();
        let mut d_fi: Vec<f64> = d_fused.iter().map(|g| cfg.beta * g).collect();
        for c in 0..s_zs.len() {
            d_fr[c] += cfg.lambda1 * l1_subgradient(s_fr[c] - s_zs[c]);
            d_fi[c] += cfg.lambda2 * l1_subgradient(s_fi[c] - s_zs[c]);
        }
        if cfg.lambda3 != 0.0 {
            let c = s_zs.len();
            let mut gp = vec![0.0; c];
            let mut gq = vec![0.0; c];
            for i in 0..c {
                let (p, q) = (t_fr.p[i], t_fi.p[i]);
                let dl = t_fr.logp[i] - t_fi.logp[i];
                gp[i] = 0.5 * (dl + if t_fr.live[i] { (p - q) / p } else { 0.0 });
                gq[i] = 0.5 * (-dl - if t_fi.live[i] { (p - q) / q } else { 0.0 });
            }
            let sp = softmax_backward(&t_fr.p, &gp, tau);
            let sq = softmax_backward(&t_fi.p, &gq, tau);
            for i in 0..c {
                d_fr[i] += cfg.lambda3 * sp[i];
                d_fi[i] += cfg.lambda3 * sq[i];
            }
        }
        d_fr.iter_mut().for_each(|v| *v *= inv_n);
        d_fi.iter_mut().for_each(|v| *v *= inv_n);

        if d_fi.iter().any(|&v| v != 0.0) {
            let dz = text_backward(text, &d_fi);
            let du = normalize_backward(&fi.out, fi.norm, &dz);
            add_outer(&mut g.fi_weight, &du, z);
        }
        if d_fr.iter().any(|&v| v != 0.0) {
            let dz = text_backward(text, &d_fr);
            let dv = normalize_backward(&fr.out, fr.norm, &dz);
            add_outer(&mut g.fr_w2, &dv, &fr.hidden);
            g.fr_b2.iter_mut().zip(&dv).for_each(|(a, b)| *a += b);
            let h = params.hidden();
            let d = params.dim();
            let mut d_pre = vec![0.0; h];
            for (j, dp) in d_pre.iter_mut().enumerate() {
                if fr.pre[j] > 0.0 {
                    *dp = (0..d).map(|i| params.fr_w2[i * h + j] * dv[i]).sum();
                }
            }
            add_outer(&mut g.fr_w1, &d_pre, z);
            g.fr_b1.iter_mut().zip(&d_pre).for_each(|(a, b)| *a += b);
        }
    }

    let ce = finite_or("cross-entropy", ce * inv_n)?;
    let l_r = finite_or("refiner prior (L_R)", l_r * inv_n)?;
    let l_i = finite_or("integrator prior (L_I)", l_i * inv_n)?;
    let l_d = finite_or("consensus (L_D)", l_d * inv_n)?;
    let loss = LossBreakdown::weighted(ce, l_r, l_i, l_d, cfg);
    finite_or("total loss", loss.total)?;
    if let Some(g) = &grad {
        if !g.is_finite() {
            return Err(Error::numerical("gradient", "non-finite component"));
        }
    }
    Ok((loss, grad))
}

/// Batch loss breakdown and its exact gradient w.r.t. every adapter
/// parameter. The L1 terms use subgradient 0 at a zero deviation.
pub fn total_loss_and_grad(
    batch: &[LabeledRow],
    params: &ExpertParams,
    frozen: &FrozenData,
    cfg: &CoMuCoConfig,
) -> Result<(LossBreakdown, ExpertParams)> {
    let (loss, grad) = evaluate_objective(batch, params, frozen, cfg, true, None)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Loss breakdown only.
pub fn total_loss(
    batch: &[LabeledRow],
    params: &ExpertParams,
    frozen: &FrozenData,
    cfg: &CoMuCoConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate_objective(batch, params, frozen, cfg, false, None)?.0)
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_step(step: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&step) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "finite-difference step must be in [1e-7, 1e-3], got {step}"
        )))
    }
}

/// Central-difference check of `analytic` against `f` at `theta`; returns the
/// largest [`relative_error`] over all coordinates.
pub fn check_gradient<F>(theta: &[f64], analytic: &[f64], f: F, step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    check_step(step)?;
    if theta.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    let mut x = theta.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        x[k] = theta[k] + step;
        let up = f(&x);
        x[k] = theta[k] - step;
        let down = f(&x);
        x[k] = theta[k];
        worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because a perturbation would cross a kink.
    pub skipped: usize,
}

/// Compares [`total_loss_and_grad`] against central differences on every
/// parameter. Loss values for the quotient are evaluated in double-double
/// arithmetic so its rounding floor sits far below the gradient tolerance. A coordinate is skipped when perturbing it moves an L1
/// deviation that sits within `10 * step` of zero, or flips the sign of any
/// deviation or ReLU pre-activation: there the objective is not
/// differentiable and the difference quotient means nothing.
pub fn finite_diff_check(
    params: &ExpertParams,
    batch: &[LabeledRow],
    frozen: &FrozenData,
    cfg: &CoMuCoConfig,
    step: f64,
) -> Result<GradCheckReport> {
    check_step(step)?;
    let mut base_kinks = KinkState::default();
    let (_, grad) = evaluate_objective(batch, params, frozen, cfg, true, Some(&mut base_kinks))?;
    let grad = grad.expect("gradient requested");

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let eval = |p: &ExpertParams| -> Result<(Dd, KinkState)> {
        let mut k = KinkState::default();
        evaluate_objective(batch, p, frozen, cfg, false, Some(&mut k))?;
        Ok((precise_total(batch, p, frozen, cfg), k))
    };
    for k in 0..params.len() {
        let theta = params.get(k);
        probe.set(k, theta + step);
        let (up, k_up) = eval(&probe)?;
        probe.set(k, theta - step);
        let (down, k_down) = eval(&probe)?;
        probe.set(k, theta);

        if crosses_kink(&base_kinks, &k_up, &k_down, step) {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let numeric = ((up - down) / (2.0 * step)).to_f64();
        report.max_rel_error = report
            .max_rel_error
            .max(relative_error(grad.get(k), numeric));
    }
    Ok(report)
}

fn precise_logits(z: &[Dd], text: &EmbeddingMatrix) -> Vec<Dd> {
    text.iter_rows()
        .map(|t| t.iter().zip(z).map(|(&a, &b)| b * a).sum())
        .collect()
}

fn precise_matvec(m: &[f64], cols: usize, x: &[Dd]) -> Vec<Dd> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(&a, &b)| b * a).sum())
        .collect()
}

fn precise_residual(z: &[Dd], delta: &[Dd]) -> Vec<Dd> {
    if delta.iter().all(|&d| d == Dd::ZERO) {
        return z.to_vec();
    }
    let v: Vec<Dd> = z.iter().zip(delta).map(|(&a, &b)| a + b).collect();
    let norm = v.iter().map(|&x| x * x).sum::<Dd>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn precise_log_softmax(s: &[Dd], tau: f64) -> Vec<Dd> {
    let max = s.iter().copied().fold(s[0], Dd::max);
    let shifted: Vec<Dd> = s.iter().map(|&v| (v - max) / tau).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<Dd>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

fn precise_consensus(s_fr: &[Dd], s_fi: &[Dd], tau: f64) -> Dd {
    let floor = Dd::from(PROB_FLOOR).ln();
    let (a, b) = (
        precise_log_softmax(s_fr, tau),
        precise_log_softmax(s_fi, tau),
    );
    a.iter()
        .zip(&b)
        .map(|(&la, &lb)| (la.exp() - lb.exp()) * (la.max(floor) - lb.max(floor)))
        .sum::<Dd>()
        * 0.5
}

/// The total objective recomputed in double-double arithmetic.
fn precise_total(
    batch: &[LabeledRow],
    p: &ExpertParams,
    frozen: &FrozenData,
    cfg: &CoMuCoConfig,
) -> Dd {
    let l1 = |a: &[Dd], b: &[Dd]| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<Dd>();
    let mut total = Dd::ZERO;
    for r in batch {
        let z: Vec<Dd> = frozen
            .features
            .row(r.row)
            .iter()
            .map(|&v| Dd::from(v))
            .collect();
        let z_fi = precise_residual(&z, &precise_matvec(&p.fi_weight, p.dim(), &z));
        let hidden: Vec<Dd> = precise_matvec(&p.fr_w1, p.dim(), &z)
            .into_iter()
            .zip(&p.fr_b1)
            .map(|(a, &b)| (a + b).max(Dd::ZERO))
            .collect();
        let delta: Vec<Dd> = precise_matvec(&p.fr_w2, p.hidden(), &hidden)
            .into_iter()
            .zip(&p.fr_b2)
            .map(|(a, &b)| a + b)
            .collect();
        let z_fr = precise_residual(&z, &delta);

        let s_zs = precise_logits(&z, &frozen.text);
        let s_fi = precise_logits(&z_fi, &frozen.text);
        let s_fr = precise_logits(&z_fr, &frozen.text);
        let fused: Vec<Dd> = s_zs
            .iter()
            .zip(s_fr.iter().zip(&s_fi))
            .map(|(&zs, (&fr, &fi))| zs + (fr - zs) * cfg.alpha + (fi - zs) * cfg.beta)
            .collect();
        total = total - precise_log_softmax(&fused, cfg.tau)[r.label]
            + l1(&s_fr, &s_zs) * cfg.lambda1
            + l1(&s_fi, &s_zs) * cfg.lambda2
            + precise_consensus(&s_fr, &s_fi, cfg.tau) * cfg.lambda3;
    }
    total / batch.len() as f64
}

fn crosses_kink(base: &KinkState, up: &KinkState, down: &KinkState, step: f64) -> bool {
    let sign_flip = |a: f64, b: f64, c: f64| {
        let s = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
        s(a) != s(b) || s(a) != s(c)
    };
    let dev = base
        .deviations
        .iter()
        .zip(up.deviations.iter().zip(&down.deviations))
        .any(|(&b, (&u, &d))| sign_flip(b, u, d) || (u != d && b.abs() < 10.0 * step));
    let relu = base
        .preactivations
        .iter()
        .zip(up.preactivations.iter().zip(&down.preactivations))
        .any(|(&b, (&u, &d))| (b > 0.0) != (u > 0.0) || (b > 0.0) != (d > 0.0));
    dev || relu
}

/// Zero-shot logits for every row of a batch.
pub fn zero_shot_logits(batch: &[LabeledRow], frozen: &FrozenData) -> Result<Vec<LogitVector>> {
    batch
        .iter()
        .map(|r| cosine_logits(frozen.features.row(r.row), &frozen.text))
        .collect()
}

/// Fused logits of the current adapters for every row of a batch.
pub fn fused_logits(
    batch: &[LabeledRow],
    params: &ExpertParams,
    frozen: &FrozenData,
    cfg: &CoMuCoConfig,
) -> Result<Vec<LogitVector>> {
    batch
        .iter()
        .map(|r| {
            Ok(experts::forward(frozen.features.row(r.row), params, &frozen.text, cfg)?.s_fused)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::{ManifestRow, Split, TaskManifest};
    use crate::geometry::{jeffreys, ProbVector};
    use approx::assert_abs_diff_eq;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let t = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let s = cosine_logits(&[1.0, 0.0], &t).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.6]);
        let s = cosine_logits(&[0.6, 0.8], &t).unwrap();
        assert_abs_diff_eq!(s.as_slice()[1], 1.0, epsilon = 1e-15);
        let t = EmbeddingMatrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            cosine_logits(&[0.0, 0.0, 1.0], &t).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        assert!(matches!(
            cosine_logits(&[1.0, 0.0], &t),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ce_examples() {
        let uniform = vec![lv(&[0.5; 10])];
        assert_abs_diff_eq!(
            ce_loss(&uniform, &[3], 0.01).unwrap(),
            10f64.ln(),
            epsilon = 1e-12
        );
        let v = ce_loss(&[lv(&[1.0, 0.0])], &[0], 1.0).unwrap();
        assert_abs_diff_eq!(v, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.313262, epsilon = 1e-6);
        assert!(matches!(ce_loss(&[], &[], 1.0), Err(Error::Parameter(_))));
        // growing margin drives the loss down to zero
        let mut last = f64::INFINITY;
        for m in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let v = ce_loss(&[lv(&[m, 0.0, 0.0])], &[0], 1.0).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(
            l1_consistency(&lv(&[1.0, 2.0]), &lv(&[1.0, 2.0])).unwrap(),
            0.0
        );
        assert_eq!(
            l1_consistency(&lv(&[1.0, 2.0]), &lv(&[0.0, 0.0])).unwrap(),
            3.0
        );
        let a = lv(&[0.3, -1.1, 0.4]);
        let b = lv(&[-0.2, 0.5, 0.4]);
        assert_eq!(
            l1_consistency(&a, &b).unwrap(),
            l1_consistency(&b, &a).unwrap()
        );
        assert!(matches!(
            l1_consistency(&a, &lv(&[0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn consensus_examples() {
        let a = lv(&[0.7f64.ln(), 0.3f64.ln()]);
        let b = lv(&[0.6f64.ln(), 0.4f64.ln()]);
        let oracle = 0.5
            * jeffreys(
                &ProbVector::new(vec![0.7, 0.3]).unwrap(),
                &ProbVector::new(vec![0.6, 0.4]).unwrap(),
            )
            .unwrap();
        let v = consensus_loss(&a, &b, 1.0).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(v, 0.022092, epsilon = 1e-6);
        assert_eq!(
            consensus_loss(&a, &b, 1.0).unwrap(),
            consensus_loss(&b, &a, 1.0).unwrap()
        );
        assert_eq!(consensus_loss(&a, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn consensus_survives_saturated_softmax() {
        let a = lv(&[1.0, -1.0]);
        let b = lv(&[-1.0, 1.0]);
        let v = consensus_loss(&a, &b, 0.001).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    fn tiny_frozen() -> FrozenData {
        let rows = vec![
            ManifestRow {
                index: 0,
                label: 0,
                split: Split::Train,
            },
            ManifestRow {
                index: 1,
                label: 1,
                split: Split::Train,
            },
            ManifestRow {
                index: 2,
                label: 0,
                split: Split::Test,
            },
            ManifestRow {
                index: 3,
                label: 1,
                split: Split::Test,
            },
        ];
        let m = TaskManifest::new(vec!["a".into(), "b".into()], "", "", rows, false).unwrap();
        let f = EmbeddingMatrix::new(
            4,
            3,
            vec![1.0, 0.2, 0.1, 0.1, 1.0, -0.3, 0.9, -0.1, 0.4, 0.2, 0.8, 0.5],
        )
        .unwrap();
        let t = EmbeddingMatrix::new(2, 3, vec![0.8, 0.5, 0.3, 0.1, 0.9, 0.2]).unwrap();
        FrozenData::new(&m, f, t).unwrap()
    }

    #[test]
    fn quadratic_toy_is_exact() {
        // f(x) = sum (k+1) x_k^2 + x_0 x_1
        let f = |x: &[f64]| {
            x.iter()
                .enumerate()
                .map(|(k, v)| (k as f64 + 1.0) * v * v)
                .sum::<f64>()
                + x[0] * x[1]
        };
        let x = [0.3, -1.2, 2.0];
        let g = [2.0 * 0.3 + -1.2, 4.0 * -1.2 + 0.3, 6.0 * 2.0];
        assert!(check_gradient(&x, &g, f, 1e-4).unwrap() < 1e-9);
    }

    #[test]
    fn step_out_of_range() {
        let f = tiny_frozen();
        let p = ExpertParams::init(3, 4, 0).unwrap();
        let batch = [LabeledRow { row: 0, label: 0 }];
        let cfg = CoMuCoConfig::default();
        assert!(matches!(
            finite_diff_check(&p, &batch, &f, &cfg, 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn zero_init_zero_lambda_is_zero_shot_ce() {
        let f = tiny_frozen();
        let p = ExpertParams::init(3, 12, 0).unwrap();
        let batch = [
            LabeledRow { row: 0, label: 0 },
            LabeledRow { row: 1, label: 1 },
        ];
        let cfg = CoMuCoConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Default::default()
        };
        let (loss, _) = total_loss_and_grad(&batch, &p, &f, &cfg).unwrap();
        let zs = zero_shot_logits(&batch, &f).unwrap();
        assert_eq!(loss.ce, ce_loss(&zs, &[0, 1], cfg.tau).unwrap());
        assert_eq!(loss.total, loss.ce);
        assert_eq!((loss.l_r, loss.l_i, loss.l_d), (0.0, 0.0, 0.0));
    }

    #[test]
    fn breakdown_matches_standalone_terms() {
        let f = tiny_frozen();
        let mut p = ExpertParams::init(3, 6, 1).unwrap();
        p.fi_weight = vec![0.1, -0.2, 0.3, 0.0, 0.2, -0.1, 0.05, 0.1, 0.0];
        p.fr_w2
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = 0.1 * (i as f64 - 8.0) / 8.0);
        let batch = [
            LabeledRow { row: 0, label: 0 },
            LabeledRow { row: 1, label: 1 },
        ];
        let cfg = CoMuCoConfig {
            tau: 0.5,
            ..Default::default()
        };
        let loss = total_loss(&batch, &p, &f, &cfg).unwrap();
        let outs: Vec<_> = batch
            .iter()
            .map(|r| experts::forward(f.features.row(r.row), &p, &f.text, &cfg).unwrap())
            .collect();
        let fused: Vec<_> = outs.iter().map(|o| o.s_fused.clone()).collect();
        let s_fr: Vec<_> = outs.iter().map(|o| o.s_fr.clone()).collect();
        let s_fi: Vec<_> = outs.iter().map(|o| o.s_fi.clone()).collect();
        let s_zs: Vec<_> = outs.iter().map(|o| o.s_zs.clone()).collect();
        assert_abs_diff_eq!(
            loss.ce,
            ce_loss(&fused, &[0, 1], 0.5).unwrap(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            loss.l_r,
            l1_consistency_batch(&s_fr, &s_zs).unwrap(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            loss.l_i,
            l1_consistency_batch(&s_fi, &s_zs).unwrap(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            loss.l_d,
            consensus_loss_batch(&s_fr, &s_fi, 0.5).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn gradient_matches_differences_on_fixed_instance() {
        let f = tiny_frozen();
        let mut p = ExpertParams::init(3, 6, 4).unwrap();
        p.fi_weight = vec![0.1, -0.2, 0.3, 0.0, 0.2, -0.1, 0.05, 0.1, 0.0];
        p.fr_b1 = vec![0.1; 6];
        p.fr_w2
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = 0.2 * ((i * 5 % 7) as f64 - 3.0) / 3.0);
        p.fr_b2 = vec![0.05, -0.02, 0.01];
        let batch = [
            LabeledRow { row: 0, label: 0 },
            LabeledRow { row: 3, label: 1 },
        ];
        let cfg = CoMuCoConfig {
            tau: 0.3,
            lambda1: 0.4,
            lambda2: 0.3,
            lambda3: 0.7,
            ..Default::default()
        };
        let r = finite_diff_check(&p, &batch, &f, &cfg, 1e-5).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn nan_input_surfaces_as_numerical_error() {
        let f = tiny_frozen();
        let mut p = ExpertParams::init(3, 4, 0).unwrap();
        p.fi_weight[0] = f64::NAN;
        let batch = [LabeledRow { row: 0, label: 0 }];
        let err = total_loss_and_grad(&batch, &p, &f, &CoMuCoConfig::default()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(CoMuCoConfig::default().validate().is_ok());
        let bad = [
            CoMuCoConfig {
                alpha: 0.7,
                beta: 0.5,
                ..Default::default()
            },
            CoMuCoConfig {
                tau: 0.0,
                ..Default::default()
            },
            CoMuCoConfig {
                lambda3: -1.0,
                ..Default::default()
            },
            CoMuCoConfig {
                warmup_lr: 0.1,
                ..Default::default()
            },
            CoMuCoConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let cfg: CoMuCoConfig = serde_json::from_str(r#"{"alpha": 0.3, "epochs": 7}"#).unwrap();
        assert_eq!((cfg.alpha, cfg.beta, cfg.epochs), (0.3, 0.2, Some(7)));
        assert!(serde_json::from_str::<CoMuCoConfig>(r#"{"alfa": 0.3}"#).is_err());
        assert_eq!(CoMuCoConfig::default().epochs_for(true), 300);
        assert_eq!(CoMuCoConfig::default().epochs_for(false), 50);
    }
}
