//! Computing, characterizing, and verifying trial-offer market equilibria
//! (TOME): share vectors fixed under the next-purchase map `p(phi) = phi`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{
    next_purchase_probabilities, pow_feedback, MarketConfig, MarketShare,
};
use crate::stats::linf_distance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolveMethod {
    ClosedForm,
    FixedPointIteration,
    Homogenized,
}

/// A solved equilibrium with its fixed-point defect.
#[derive(Clone, Debug, Serialize)]
pub struct TomeResult {
    pub shares: MarketShare,
    /// L-infinity norm of `p(shares) - shares`.
    pub residual: f64,
    pub method: SolveMethod,
    pub iterations: u64,
    /// Tolerance the solver was asked for (the residual satisfies it unless
    /// the caller received a NoConvergence error instead).
    pub tol: f64,
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: u64 = 100_000;
pub const DEFAULT_DAMPING: f64 = 0.5;

/// Knobs for the damped fixed-point solver. `damping = 1` is the plain
/// iteration `phi <- p(phi)`; the damped default is more robust as the
/// feedback exponents approach one.
#[derive(Clone, Debug)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: u64,
    pub damping: f64,
    /// Starting point; uniform when absent.
    pub start: Option<MarketShare>,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            damping: DEFAULT_DAMPING,
            start: None,
        }
    }
}

fn require_feedback_in_unit_interval(cfg: &MarketConfig) -> Result<()> {
    for (i, &r) in cfg.feedback().iter().enumerate() {
        if r >= 1.0 {
            return Err(Error::Domain(format!(
                "feedback exponent r_{i} = {r} >= 1: the equilibrium set is a level set that may contain multiple equilibria; no unique interior TOME to solve for"
            )));
        }
        if r <= 0.0 {
            return Err(Error::Domain(format!(
                "feedback exponent r_{i} = {r} <= 0: solver requires 0 < r < 1"
            )));
        }
    }
    Ok(())
}

/// Closed-form unique interior TOME of a homogeneous market with 0 < r < 1:
/// `phi*_j` proportional to `(v_j q_j)^(1/(1-r))`.
pub fn homogeneous_tome(cfg: &MarketConfig) -> Result<TomeResult> {
    if !cfg.is_homogeneous() {
        return Err(Error::Shape(
            "closed form applies to single-type markets only".into(),
        ));
    }
    require_feedback_in_unit_interval(cfg)?;
    let r = cfg.feedback()[0];
    let appeal = cfg.coupled_appeal().expect("homogeneous");
    let exponent = 1.0 / (1.0 - r);

    // Work in log space so exponents near r -> 1 cannot overflow.
    let logs: Vec<f64> = appeal.iter().map(|&qb| exponent * qb.ln()).collect();
    let max_log = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|&l| (l - max_log).exp()).collect();
    let shares = MarketShare::normalized(raw)?;

    let residual = linf_distance(
        next_purchase_probabilities(cfg, &shares)?.as_slice(),
        shares.as_slice(),
    );
    Ok(TomeResult {
        shares,
        residual,
        method: SolveMethod::ClosedForm,
        iterations: 0,
        tol: DEFAULT_TOL,
    })
}

/// Damped fixed-point iteration `phi <- (1-lambda) phi + lambda p(phi)` from
/// the uniform start. Requires 0 < r_i < 1 for every type. On failure to
/// reach `tol` the error carries the best iterate found.
pub fn heterogeneous_tome(cfg: &MarketConfig, tol: f64, max_iter: u64) -> Result<TomeResult> {
    heterogeneous_tome_with(
        cfg,
        &FixedPointOptions {
            tol,
            max_iter,
            ..FixedPointOptions::default()
        },
    )
}

pub fn heterogeneous_tome_with(cfg: &MarketConfig, opts: &FixedPointOptions) -> Result<TomeResult> {
    require_feedback_in_unit_interval(cfg)?;
    if !(opts.tol > 0.0) {
        return Err(Error::Domain("tol must be positive".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Domain("damping must lie in (0, 1]".into()));
    }

    let lambda = opts.damping;
    let mut phi = opts
        .start
        .clone()
        .unwrap_or_else(|| MarketShare::uniform(cfg.num_items()));
    let mut best: Option<(f64, MarketShare, u64)> = None;
    // Recent residual ratios estimate the linear contraction factor; the
    // distance to the limit is then bounded by step / (1 - rho), which keeps
    // the returned point within tol of the fixed point itself rather than
    // merely having a small one-step defect.
    let mut prev_residual: Option<f64> = None;
    let mut ratios: [f64; 3] = [1.0; 3];
    let mut ratio_count = 0usize;

    for iteration in 0..=opts.max_iter {
        let p = next_purchase_probabilities(cfg, &phi)?;
        let residual = linf_distance(p.as_slice(), phi.as_slice());
        if best.as_ref().map_or(true, |(r, _, _)| residual < *r) {
            best = Some((residual, phi.clone(), iteration));
        }
        if let Some(prev) = prev_residual {
            if prev > 0.0 {
                ratios[ratio_count % ratios.len()] = residual / prev;
                ratio_count += 1;
            }
        }
        prev_residual = Some(residual);
        let converged = if residual == 0.0 {
            true
        } else if residual <= opts.tol && ratio_count >= ratios.len() {
            let rho = ratios.iter().cloned().fold(0.0, f64::max);
            rho < 1.0 && lambda * residual * rho / (1.0 - rho) <= opts.tol
        } else {
            false
        };
        if converged {
            return Ok(TomeResult {
                shares: phi,
                residual,
                method: SolveMethod::FixedPointIteration,
                iterations: iteration,
                tol: opts.tol,
            });
        }
        let mixed: Vec<f64> = phi
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(&old, &new)| (1.0 - lambda) * old + lambda * new)
            .collect();
        phi = MarketShare::normalized(mixed)?;
    }

    let (residual, shares, iterations) = best.expect("at least one iterate");
    Err(Error::NoConvergence {
        best: Box::new(TomeResult {
            shares,
            residual,
            method: SolveMethod::FixedPointIteration,
            iterations,
            tol: opts.tol,
        }),
        residual,
        tol: opts.tol,
        iterations: opts.max_iter,
    })
}

/// Solve with the cheapest applicable method: closed form for homogeneous
/// markets, the common-visibility reduction when it applies, and damped
/// fixed-point iteration otherwise.
pub fn solve_tome(cfg: &MarketConfig, tol: f64) -> Result<TomeResult> {
    if cfg.is_homogeneous() {
        let mut result = homogeneous_tome(cfg)?;
        result.tol = tol;
        return Ok(result);
    }
    if cfg.common_visibility().is_some() && cfg.common_feedback().is_some() {
        let reduced = homogenize(cfg)?;
        let solved = homogeneous_tome(&reduced)?;
        // Residual reported against the original heterogeneous market.
        let residual = linf_distance(
            next_purchase_probabilities(cfg, &solved.shares)?.as_slice(),
            solved.shares.as_slice(),
        );
        return Ok(TomeResult {
            shares: solved.shares,
            residual,
            method: SolveMethod::Homogenized,
            iterations: 0,
            tol,
        });
    }
    heterogeneous_tome(cfg, tol, DEFAULT_MAX_ITER)
}

/// Fixed-point check: is `phi` a TOME at the given tolerance? Returns the
/// verdict together with the L-infinity residual of `p(phi) - phi`.
pub fn verify_tome(cfg: &MarketConfig, phi: &MarketShare, tol: f64) -> (bool, f64) {
    let p = next_purchase_probabilities(cfg, phi)
        .expect("purchase intensity is positive for every valid market and share");
    let residual = linf_distance(p.as_slice(), phi.as_slice());
    (residual <= tol, residual)
}

/// Reduce a common-visibility, common-feedback market to a single-type market
/// with quality averaged by type weights; the TOME is unchanged.
pub fn homogenize(cfg: &MarketConfig) -> Result<MarketConfig> {
    let visibility = cfg
        .common_visibility()
        .ok_or_else(|| Error::Shape("homogenize requires identical visibility rows".into()))?;
    let r = cfg
        .common_feedback()
        .ok_or_else(|| Error::Shape("homogenize requires a common feedback exponent".into()))?;
    let mut quality = vec![0.0; cfg.num_items()];
    for (i, row) in cfg.quality().iter().enumerate() {
        let w = cfg.weights()[i];
        for (j, &q) in row.iter().enumerate() {
            quality[j] += w * q;
        }
    }
    MarketConfig::homogeneous(visibility.to_vec(), quality, r)
}

/// Per-type exponents that make the solved TOME stationary for the ex-post
/// Nash social welfare objective.
#[derive(Clone, Debug, Serialize)]
pub struct ExPostWeights {
    pub a_star: Vec<f64>,
}

/// `a_i* = (1/r_i) * sum_k q_ik v_ik phi_k^{r_i} / sum_k v_ik phi_k^{r_i}`
/// evaluated at the solved shares.
pub fn expost_weights(cfg: &MarketConfig, tome: &TomeResult) -> Result<ExPostWeights> {
    let phi = tome.shares.as_slice();
    let mut a_star = Vec::with_capacity(cfg.num_types());
    for i in 0..cfg.num_types() {
        let r = cfg.feedback()[i];
        if r <= 0.0 {
            return Err(Error::Domain(format!(
                "ex-post weights need r_{i} > 0, got {r}"
            )));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..cfg.num_items() {
            let pow = pow_feedback(phi[j], r);
            num += cfg.quality()[i][j] * cfg.visibility()[i][j] * pow;
            den += cfg.visibility()[i][j] * pow;
        }
        if den <= 0.0 {
            return Err(Error::Domain(format!(
                "type {i} has zero visibility mass at the equilibrium"
            )));
        }
        a_star.push(num / (r * den));
    }
    Ok(ExPostWeights { a_star })
}

/// Relative dispersion of the stationarity gradient of the ex-post Nash
/// social welfare objective at the solved shares:
/// `g_j = sum_i w_i a_i* r_i q_ij v_ij phi_j^{r_i - 1} / sum_k q_ik v_ik phi_k^{r_i}`,
/// returning `max_j |g_j - mean(g)| / mean(g)`. Near zero certifies the
/// shares as a stationary point; requires interior shares.
pub fn nash_sw_kkt_residual(
    cfg: &MarketConfig,
    tome: &TomeResult,
    weights: &ExPostWeights,
) -> Result<f64> {
    let phi = tome.shares.as_slice();
    if !tome.shares.is_interior() {
        return Err(Error::Domain(
            "stationarity residual needs interior shares".into(),
        ));
    }
    let n = cfg.num_items();
    let mut g = vec![0.0; n];
    for i in 0..cfg.num_types() {
        let r = cfg.feedback()[i];
        let denom: f64 = (0..n)
            .map(|k| cfg.quality()[i][k] * cfg.visibility()[i][k] * pow_feedback(phi[k], r))
            .sum();
        if denom <= 0.0 {
            return Err(Error::Domain(format!(
                "type {i} has zero purchase mass at these shares"
            )));
        }
        let scale = cfg.weights()[i] * weights.a_star[i] * r / denom;
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += scale
                * cfg.quality()[i][j]
                * cfg.visibility()[i][j]
                * pow_feedback(phi[j], r - 1.0);
        }
    }
    let mean = g.iter().sum::<f64>() / n as f64;
    Ok(g.iter().map(|&gj| (gj - mean).abs()).fold(0.0, f64::max) / mean)
}
