//! The deterministic attention-spending dynamic, the stochastic trial-offer
//! simulation engine with its purchase-clock bookkeeping, and multi-seed
//! convergence reporting.

use serde::Serialize;

use crate::equilibrium::TomeResult;
use crate::error::{Error, Result};
use crate::market::{
    market_efficiency, next_purchase_probabilities, pow_feedback, share_entropy,
    trial_probabilities, MarketConfig, MarketShare, PurchaseLedger, SIMPLEX_TOL,
};
use crate::objectives::{ObjectiveSpec, TransformedPoint, Vars};
use crate::rng::{rng_for_seed, sample_bernoulli, sample_index, ChaCha8Rng};
use crate::stats::{l1_distance, linf_distance, quartiles};

/// Per-type attention spending on each item, subject to the per-type budget
/// `sum_j b_ij <= w_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpendingMatrix {
    b: Vec<Vec<f64>>,
}

impl SpendingMatrix {
    pub fn new(b: Vec<Vec<f64>>, cfg: &MarketConfig) -> Result<Self> {
        if b.len() != cfg.num_types() {
            return Err(Error::Shape(format!(
                "{} spending rows for {} types",
                b.len(),
                cfg.num_types()
            )));
        }
        for (i, row) in b.iter().enumerate() {
            if row.len() != cfg.num_items() {
                return Err(Error::Shape(format!(
                    "spending row {i} has length {}",
                    row.len()
                )));
            }
            if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "spending row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if sum > cfg.weights()[i] + SIMPLEX_TOL {
                return Err(Error::InvalidConfig(format!(
                    "type {i} spends {sum}, over its budget {}",
                    cfg.weights()[i]
                )));
            }
        }
        Ok(Self { b })
    }

    /// Budget spread evenly over items.
    pub fn uniform(cfg: &MarketConfig) -> Self {
        let n = cfg.num_items() as f64;
        Self {
            b: cfg
                .weights()
                .iter()
                .map(|&w| vec![w / n; cfg.num_items()])
                .collect(),
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.b
    }

    /// Total spending per item, `b_j = sum_i b_ij`.
    pub fn item_totals(&self) -> Vec<f64> {
        let n = self.b[0].len();
        let mut totals = vec![0.0; n];
        for row in &self.b {
            for (j, &v) in row.iter().enumerate() {
                totals[j] += v;
            }
        }
        totals
    }
}

/// The spending profile induced by a share vector: each type splits its
/// budget across items in proportion to trial-and-purchase probability.
/// Applied to an equilibrium share vector this yields a fixed point of the
/// deterministic dynamic.
pub fn spending_from_shares(cfg: &MarketConfig, phi: &MarketShare) -> SpendingMatrix {
    let mut b = vec![vec![0.0; cfg.num_items()]; cfg.num_types()];
    for (i, row) in b.iter_mut().enumerate() {
        let trial = trial_probabilities(cfg, i, phi);
        let w = cfg.weights()[i];
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = w * cfg.quality()[i][j] * trial[j];
        }
    }
    SpendingMatrix { b }
}

/// Market share induced by a spending profile, `phi_j = b_j / sum_k b_k`.
pub fn induced_shares(spending: &SpendingMatrix) -> Result<MarketShare> {
    MarketShare::normalized(spending.item_totals())
        .map_err(|_| Error::Domain("spending has zero total mass".into()))
}

/// One step of the deterministic dynamic:
/// `b_ij' = w_i q_ij v_ij b_j^{r_i} / sum_k v_ik b_k^{r_i}`.
///
/// The column-sum form is scale invariant, so the per-item totals act as
/// (unnormalized) shares. An item whose total spending has hit zero while
/// still visible to a type with positive feedback can never recover; that is
/// reported as ZeroColumn so the caller prunes the item.
pub fn deterministic_step(cfg: &MarketConfig, prev: &SpendingMatrix) -> Result<SpendingMatrix> {
    let totals = prev.item_totals();
    for (j, &total) in totals.iter().enumerate() {
        if total == 0.0 {
            let stuck = (0..cfg.num_types())
                .any(|i| cfg.visibility()[i][j] > 0.0 && cfg.feedback()[i] > 0.0);
            if stuck {
                return Err(Error::ZeroColumn { item: j });
            }
        }
    }

    let mut b = vec![vec![0.0; cfg.num_items()]; cfg.num_types()];
    for (i, row) in b.iter_mut().enumerate() {
        let r = cfg.feedback()[i];
        let signal: Vec<f64> = totals.iter().map(|&t| pow_feedback(t, r)).collect();
        let denom: f64 = cfg.visibility()[i]
            .iter()
            .zip(&signal)
            .map(|(&v, &s)| v * s)
            .sum();
        if denom <= 0.0 {
            // A type with no visible item spends nothing this round.
            continue;
        }
        let w = cfg.weights()[i];
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = w * cfg.quality()[i][j] * cfg.visibility()[i][j] * signal[j] / denom;
        }
    }
    Ok(SpendingMatrix { b })
}

/// One state snapshot along a run.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRecord {
    /// Deterministic step count, or the purchase clock for stochastic runs.
    pub time: u64,
    pub shares: Vec<f64>,
    pub efficiency: f64,
    pub entropy: f64,
    /// Value of the market's convex objective when one applies (the
    /// efficiency-entropy objective for homogeneous markets, the transformed
    /// common-quality objective otherwise).
    pub objective: Option<f64>,
    /// Fixed-point defect `max_j |p_j(phi) - phi_j|`.
    pub residual: f64,
    /// Interpolated-process clock `tau_t = sum_{s<=t} 1/(N0+s)`; stochastic
    /// runs only.
    pub rma_time: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    /// Spending snapshots aligned with `records`; deterministic runs only.
    #[serde(skip)]
    pub spendings: Option<Vec<SpendingMatrix>>,
    /// Full event log; stochastic runs with event recording enabled.
    pub events: Option<Vec<SimulationEvent>>,
    pub total_trials: u64,
    pub total_purchases: u64,
}

impl Trajectory {
    pub fn times(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn final_record(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectory has records")
    }
}

/// The objective tracked along trajectories of this market, when one exists.
pub fn trajectory_objective(cfg: &MarketConfig) -> Option<ObjectiveSpec> {
    if cfg.is_homogeneous() {
        ObjectiveSpec::efficiency_entropy(cfg).ok()
    } else if cfg.common_quality().is_some() && cfg.common_feedback().is_some() {
        ObjectiveSpec::hetero_gamma(cfg).ok()
    } else {
        None
    }
}

fn objective_at_spending(
    objective: &Option<ObjectiveSpec>,
    cfg: &MarketConfig,
    spending: &SpendingMatrix,
    phi: &MarketShare,
) -> Option<f64> {
    match objective {
        Some(obj @ ObjectiveSpec::EfficiencyEntropy { .. }) => {
            obj.evaluate(&Vars::from(phi)).ok()
        }
        Some(obj @ ObjectiveSpec::HeteroGamma { .. }) => {
            let quality = cfg.common_quality()?;
            let x = TransformedPoint::from_spending(spending.rows(), quality, cfg.weights()).ok()?;
            obj.evaluate(&x.into_vars()).ok()
        }
        _ => None,
    }
}

fn make_record(
    cfg: &MarketConfig,
    objective: &Option<ObjectiveSpec>,
    time: u64,
    spending: &SpendingMatrix,
    phi: &MarketShare,
    rma_time: Option<f64>,
) -> TrajectoryRecord {
    let p = next_purchase_probabilities(cfg, phi)
        .expect("valid market and share always have positive purchase intensity");
    TrajectoryRecord {
        time,
        shares: phi.as_slice().to_vec(),
        efficiency: market_efficiency(cfg, phi),
        entropy: share_entropy(phi),
        objective: objective_at_spending(objective, cfg, spending, phi),
        residual: linf_distance(p.as_slice(), phi.as_slice()),
        rma_time,
    }
}

/// Iterate the deterministic dynamic for `t_steps` steps, recording every
/// `record_every` steps (plus the initial and final states).
pub fn run_deterministic(
    cfg: &MarketConfig,
    b0: &SpendingMatrix,
    t_steps: u64,
    record_every: u64,
) -> Result<Trajectory> {
    if t_steps == 0 || record_every == 0 {
        return Err(Error::Domain("t_steps and record_every must be >= 1".into()));
    }
    let objective = trajectory_objective(cfg);
    let mut records = Vec::new();
    let mut spendings = Vec::new();
    let mut current = b0.clone();

    let mut record = |time: u64, b: &SpendingMatrix| -> Result<()> {
        let phi = induced_shares(b)?;
        records.push(make_record(cfg, &objective, time, b, &phi, None));
        spendings.push(b.clone());
        Ok(())
    };

    record(0, &current)?;
    for t in 1..=t_steps {
        current = deterministic_step(cfg, &current)?;
        if t % record_every == 0 || t == t_steps {
            record(t, &current)?;
        }
    }
    Ok(Trajectory {
        records,
        spendings: Some(spendings),
        events: None,
        total_trials: 0,
        total_purchases: 0,
    })
}

/// One arrival in the stochastic market.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SimulationEvent {
    /// Arrival index, starting at 1.
    pub step: u64,
    pub user_type: usize,
    /// None when the user's trial distribution is identically zero (an
    /// all-zero visibility row), in which case nothing is tried.
    pub tried_item: Option<usize>,
    pub purchased: bool,
}

/// Simulate one arrival: draw a user type from the population weights, a
/// tried item from that type's trial probabilities at the ledger's current
/// shares, and a purchase from the item's quality. A purchase updates the
/// ledger. Every draw is one inverse-CDF uniform, in that fixed order.
pub fn stochastic_step(
    cfg: &MarketConfig,
    ledger: &mut PurchaseLedger,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> SimulationEvent {
    let user_type =
        sample_index(rng, cfg.weights()).expect("population weights sum to one");
    let trial = trial_probabilities(cfg, user_type, &ledger.shares());
    let tried_item = sample_index(rng, &trial);
    let purchased = match tried_item {
        Some(item) => sample_bernoulli(rng, cfg.quality()[user_type][item]),
        None => false,
    };
    if purchased {
        ledger.record_purchase(tried_item.expect("purchase implies trial"));
    }
    SimulationEvent {
        step,
        user_type,
        tried_item,
        purchased,
    }
}

#[derive(Clone, Debug)]
pub struct StochasticOptions {
    /// Record every this many purchases.
    pub record_every: u64,
    /// Abort the run after this many trials without reaching the purchase
    /// target; guards against pathological configs where purchases are
    /// vanishingly rare.
    pub trial_cap: u64,
    pub record_events: bool,
}

impl Default for StochasticOptions {
    fn default() -> Self {
        Self {
            record_every: 1000,
            trial_cap: 100_000_000,
            record_events: false,
        }
    }
}

/// Run the stochastic market until `t_purchases` purchases have occurred.
/// The clock is the purchase count: shares change only on purchases, and
/// records are taken on that clock. Deterministic given (cfg, d0, seed).
pub fn run_stochastic(
    cfg: &MarketConfig,
    d0: &PurchaseLedger,
    t_purchases: u64,
    seed: u64,
    record_every: u64,
) -> Result<Trajectory> {
    run_stochastic_opts(
        cfg,
        d0,
        t_purchases,
        seed,
        &StochasticOptions {
            record_every,
            ..StochasticOptions::default()
        },
    )
}

pub fn run_stochastic_opts(
    cfg: &MarketConfig,
    d0: &PurchaseLedger,
    t_purchases: u64,
    seed: u64,
    opts: &StochasticOptions,
) -> Result<Trajectory> {
    if t_purchases == 0 || opts.record_every == 0 {
        return Err(Error::Domain(
            "t_purchases and record_every must be >= 1".into(),
        ));
    }
    if d0.counts().len() != cfg.num_items() {
        return Err(Error::Shape("ledger length must match the item count".into()));
    }
    let objective = trajectory_objective(cfg);
    let mut rng = rng_for_seed(seed);
    let mut ledger = d0.clone();
    let n0 = ledger.total();

    // Shares only move on purchases, so each type's trial distribution is
    // frozen between purchases and cached here.
    let mut trial_cache: Vec<Option<Vec<f64>>> = vec![None; cfg.num_types()];

    let mut records = Vec::new();
    let mut events = opts.record_events.then(Vec::new);
    let mut trials: u64 = 0;
    let mut purchases: u64 = 0;
    let mut tau = 0.0;

    let record =
        |records: &mut Vec<TrajectoryRecord>, purchases: u64, tau: f64, ledger: &PurchaseLedger| {
            let phi = ledger.shares();
            let spending = spending_from_shares(cfg, &phi);
            records.push(make_record(
                cfg,
                &objective,
                purchases,
                &spending,
                &phi,
                Some(tau),
            ));
        };

    record(&mut records, 0, 0.0, &ledger);
    while purchases < t_purchases {
        if trials >= opts.trial_cap {
            return Err(Error::TrialCap {
                trials,
                purchases,
                target: t_purchases,
            });
        }
        trials += 1;
        let user_type = sample_index(&mut rng, cfg.weights()).expect("weights sum to one");
        if trial_cache[user_type].is_none() {
            trial_cache[user_type] =
                Some(trial_probabilities(cfg, user_type, &ledger.shares()));
        }
        let tried_item = sample_index(&mut rng, trial_cache[user_type].as_ref().unwrap());
        let purchased = match tried_item {
            Some(item) => sample_bernoulli(&mut rng, cfg.quality()[user_type][item]),
            None => false,
        };
        if let Some(log) = events.as_mut() {
            log.push(SimulationEvent {
                step: trials,
                user_type,
                tried_item,
                purchased,
            });
        }
        if purchased {
            ledger.record_purchase(tried_item.expect("purchase implies trial"));
            purchases += 1;
            tau += 1.0 / (n0 + purchases) as f64;
            trial_cache.iter_mut().for_each(|c| *c = None);
            if purchases % opts.record_every == 0 || purchases == t_purchases {
                record(&mut records, purchases, tau, &ledger);
            }
        }
    }

    Ok(Trajectory {
        records,
        spendings: None,
        events,
        total_trials: trials,
        total_purchases: purchases,
    })
}

/// Split one purchase-clock share update into its Robbins-Monro pieces:
/// drift `p(phi) - phi` and noise `e - p(phi)`, where `e` is the one-hot
/// purchase indicator. The update identity
/// `phi_t - phi_{t-1} = (drift + noise) / (N0 + t)` holds exactly, with
/// `N0 + t` the ledger total after the purchase.
pub fn rma_decomposition(
    prev_shares: &MarketShare,
    event: &SimulationEvent,
    ledger_total_before: u64,
    next_purchase: &MarketShare,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !event.purchased {
        return Err(Error::Domain(
            "RMA decomposition applies to purchase events".into(),
        ));
    }
    let item = event
        .tried_item
        .ok_or_else(|| Error::Domain("purchase event without a tried item".into()))?;
    if item >= prev_shares.len() || ledger_total_before == 0 {
        return Err(Error::Domain("inconsistent decomposition inputs".into()));
    }
    let drift: Vec<f64> = next_purchase
        .as_slice()
        .iter()
        .zip(prev_shares.as_slice())
        .map(|(&pj, &phij)| pj - phij)
        .collect();
    let noise: Vec<f64> = next_purchase
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, &pj)| (j == item) as u64 as f64 - pj)
        .collect();
    Ok((drift, noise))
}

/// Quantile summary of many seeds at one recorded time.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub time: u64,
    /// 25/50/75 percentiles of the L1 distance to the target equilibrium.
    pub distance_l1: [f64; 3],
    /// Percentiles of the optimality gap of the tracked objective, when the
    /// market has one.
    pub objective_gap: Option<[f64; 3]>,
    pub efficiency: [f64; 3],
    pub entropy: [f64; 3],
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// False when the median objective gap ever increases between
    /// consecutive recorded times.
    pub median_gap_nonincreasing: bool,
}

/// Aggregate per-time quantiles across seed trajectories against a solved
/// equilibrium. All trajectories must share the same recording schedule.
pub fn convergence_report(
    cfg: &MarketConfig,
    trajectories: &[Trajectory],
    target: &TomeResult,
) -> Result<ConvergenceReport> {
    if trajectories.len() < 2 {
        return Err(Error::Domain(
            "convergence report needs at least two trajectories".into(),
        ));
    }
    let times = trajectories[0].times();
    for t in trajectories {
        if t.times() != times {
            return Err(Error::Shape(
                "trajectories have different recording schedules".into(),
            ));
        }
    }
    let optimum_value = trajectory_objective(cfg)
        .map(|obj| obj.optimum().map(|(_, v)| v))
        .transpose()?;

    let mut rows = Vec::with_capacity(times.len());
    for (k, &time) in times.iter().enumerate() {
        let dist: Vec<f64> = trajectories
            .iter()
            .map(|t| l1_distance(&t.records[k].shares, target.shares.as_slice()))
            .collect();
        let eff: Vec<f64> = trajectories.iter().map(|t| t.records[k].efficiency).collect();
        let ent: Vec<f64> = trajectories.iter().map(|t| t.records[k].entropy).collect();
        let gap = optimum_value.map(|f_star| {
            let gaps: Vec<f64> = trajectories
                .iter()
                .map(|t| f_star - t.records[k].objective.unwrap_or(f64::NAN))
                .collect();
            quartiles(&gaps)
        });
        rows.push(ConvergenceRow {
            time,
            distance_l1: quartiles(&dist),
            objective_gap: gap,
            efficiency: quartiles(&eff),
            entropy: quartiles(&ent),
        });
    }

    let median_gap_nonincreasing = rows
        .windows(2)
        .all(|w| match (w[0].objective_gap, w[1].objective_gap) {
            (Some(a), Some(b)) => b[1] <= a[1] + 1e-12,
            _ => true,
        });

    Ok(ConvergenceReport {
        rows,
        median_gap_nonincreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{heterogeneous_tome, homogeneous_tome};
    use crate::stats::linf_distance_matrix;
    use rand::Rng;

    fn two_item_cfg() -> MarketConfig {
        MarketConfig::homogeneous(vec![1.0, 1.0], vec![0.8, 0.2], 0.5).unwrap()
    }

    fn random_common_quality_cfg(rng: &mut ChaCha8Rng) -> MarketConfig {
        let types = rng.gen_range(1..4);
        let items = rng.gen_range(2..6);
        let mut weights: Vec<f64> = (0..types).map(|_| rng.gen_range(0.2..1.0)).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        let vis: Vec<Vec<f64>> = (0..types)
            .map(|_| (0..items).map(|_| rng.gen_range(0.2..1.5)).collect())
            .collect();
        let quality: Vec<f64> = (0..items).map(|_| rng.gen_range(0.05..1.0)).collect();
        let r = rng.gen_range(0.1..0.9);
        MarketConfig::new(weights, vis, vec![quality; types], vec![r; types]).unwrap()
    }

    #[test]
    fn equilibrium_spending_is_a_fixed_point() {
        let mut rng = rng_for_seed(19);
        for _ in 0..20 {
            let cfg = random_common_quality_cfg(&mut rng);
            let tome = heterogeneous_tome(&cfg, 1e-13, 200_000).unwrap();
            let b_star = spending_from_shares(&cfg, &tome.shares);
            let next = deterministic_step(&cfg, &b_star).unwrap();
            assert!(linf_distance_matrix(next.rows(), b_star.rows()) <= 1e-12);
        }
    }

    #[test]
    fn lemma_round_trip_recovers_the_equilibrium() {
        let mut rng = rng_for_seed(101);
        for _ in 0..20 {
            let cfg = random_common_quality_cfg(&mut rng);
            let tome = heterogeneous_tome(&cfg, 1e-13, 200_000).unwrap();
            let spending = spending_from_shares(&cfg, &tome.shares);
            let back = induced_shares(&spending).unwrap();
            assert!(linf_distance(back.as_slice(), tome.shares.as_slice()) <= 1e-12);
        }
    }

    #[test]
    fn single_type_share_update_is_the_next_purchase_map() {
        let mut rng = rng_for_seed(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.5)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let r = rng.gen_range(0.1..0.9);
            let cfg = MarketConfig::homogeneous(v, q, r).unwrap();
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let b = SpendingMatrix::new(
                vec![raw.iter().map(|u| u / total).collect()],
                &cfg,
            )
            .unwrap();

            let phi = induced_shares(&b).unwrap();
            let next = deterministic_step(&cfg, &b).unwrap();
            let stepped_shares = induced_shares(&next).unwrap();
            let p = next_purchase_probabilities(&cfg, &phi).unwrap();
            assert!(linf_distance(stepped_shares.as_slice(), p.as_slice()) <= 1e-12);
        }
    }

    #[test]
    fn symmetric_uniform_spending_stays_uniform() {
        let cfg = MarketConfig::new(
            vec![0.5, 0.5],
            vec![vec![1.0; 3], vec![0.5; 3]],
            vec![vec![0.8; 3], vec![0.8; 3]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let b = SpendingMatrix::uniform(&cfg);
        let next = deterministic_step(&cfg, &b).unwrap();
        let shares = induced_shares(&next).unwrap();
        for j in 0..3 {
            assert!((shares.get(j) - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_column_is_reported() {
        let cfg = two_item_cfg();
        let b = SpendingMatrix::new(vec![vec![1.0, 0.0]], &cfg).unwrap();
        match deterministic_step(&cfg, &b) {
            Err(Error::ZeroColumn { item }) => assert_eq!(item, 1),
            other => panic!("expected ZeroColumn, got {other:?}"),
        }
    }

    // The transformed mirror-descent step and the raw dynamic are the same
    // map under b = q * x.
    #[test]
    fn md_step_matches_deterministic_step_on_common_quality_markets() {
        let mut rng = rng_for_seed(71);
        for _ in 0..50 {
            let cfg = random_common_quality_cfg(&mut rng);
            let obj = ObjectiveSpec::hetero_gamma(&cfg).unwrap();
            let quality = cfg.common_quality().unwrap().to_vec();

            let x: Vec<Vec<f64>> = cfg
                .weights()
                .iter()
                .map(|&w| {
                    let raw: Vec<f64> = (0..cfg.num_items())
                        .map(|_| rng.gen_range(0.05..1.0))
                        .collect();
                    let sum: f64 = raw.iter().sum();
                    raw.into_iter().map(|u| u * w / sum).collect()
                })
                .collect();
            let point = TransformedPoint::new(x, cfg.weights()).unwrap();
            let b = SpendingMatrix::new(point.to_spending(&quality), &cfg).unwrap();

            let via_md = obj.md_step(&point.into_vars(), 1.0).unwrap();
            let via_md: Vec<Vec<f64>> = via_md
                .matrix()
                .unwrap()
                .iter()
                .map(|row| row.iter().zip(&quality).map(|(&x, &q)| x * q).collect())
                .collect();
            let via_dynamic = deterministic_step(&cfg, &b).unwrap();
            assert!(linf_distance_matrix(&via_md, via_dynamic.rows()) <= 1e-12);
        }
    }

    #[test]
    fn deterministic_run_converges_and_objective_is_nondecreasing() {
        let mut rng = rng_for_seed(87);
        for _ in 0..5 {
            let cfg = random_common_quality_cfg(&mut rng);
            let trajectory =
                run_deterministic(&cfg, &SpendingMatrix::uniform(&cfg), 5000, 100).unwrap();
            assert!(trajectory.final_record().residual <= 1e-10);

            let objective = trajectory_objective(&cfg).unwrap();
            let (_, gamma_star) = objective.optimum().unwrap();
            let last = trajectory.final_record().objective.unwrap();
            assert!(
                (last - gamma_star).abs() <= 1e-9,
                "final objective {last} vs optimum {gamma_star}"
            );

            // The uniform start sits off the transformed constraint set, so
            // its record carries no objective; ascent holds from the first
            // dynamic-generated state onward.
            let tracked: Vec<(f64, f64)> = trajectory
                .records
                .iter()
                .filter_map(|r| r.objective.map(|o| (o, r.residual)))
                .collect();
            assert!(tracked.len() >= trajectory.records.len() - 1);
            for w in tracked.windows(2) {
                assert!(w[1].0 >= w[0].0 - 1e-12, "objective decreased: {w:?}");
                if w[0].1 > 1e-6 {
                    assert!(w[1].0 > w[0].0);
                }
            }
        }
    }

    #[test]
    fn run_from_fixed_point_is_constant() {
        let cfg = two_item_cfg();
        let tome = homogeneous_tome(&cfg).unwrap();
        let b_star = spending_from_shares(&cfg, &tome.shares);
        let trajectory = run_deterministic(&cfg, &b_star, 50, 10).unwrap();
        for record in &trajectory.records {
            assert!(linf_distance(&record.shares, tome.shares.as_slice()) <= 1e-12);
        }
    }

    #[test]
    fn homogeneous_trajectory_is_repeated_md_step() {
        let cfg = two_item_cfg();
        let b0 = SpendingMatrix::uniform(&cfg);
        let trajectory = run_deterministic(&cfg, &b0, 20, 1).unwrap();
        let obj = ObjectiveSpec::efficiency_entropy(&cfg).unwrap();
        let mut point = Vars::Simplex(trajectory.records[0].shares.clone());
        for record in &trajectory.records[1..] {
            point = obj.md_step(&point, 1.0).unwrap();
            assert!(linf_distance(point.simplex().unwrap(), &record.shares) <= 1e-12);
        }
    }

    #[test]
    fn certain_quality_always_purchases() {
        let cfg = MarketConfig::homogeneous(vec![1.0, 0.5], vec![1.0, 1.0], 0.5).unwrap();
        let mut ledger = PurchaseLedger::ones(2);
        let mut rng = rng_for_seed(5);
        for step in 1..=200 {
            let event = stochastic_step(&cfg, &mut ledger, &mut rng, step);
            assert!(event.purchased);
        }
        assert_eq!(ledger.total(), 202);
    }

    #[test]
    fn zero_quality_cell_never_purchases() {
        let cfg = MarketConfig::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![vec![0.8, 0.0], vec![0.8, 0.9]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let mut ledger = PurchaseLedger::ones(2);
        let mut rng = rng_for_seed(9);
        for step in 1..=5000 {
            let event = stochastic_step(&cfg, &mut ledger, &mut rng, step);
            if event.user_type == 0 && event.tried_item == Some(1) {
                assert!(!event.purchased);
            }
        }
    }

    #[test]
    fn conditional_purchase_distribution_matches_next_purchase_probabilities() {
        // Frozen shares: sample arrivals without updating the ledger and
        // compare conditional purchase frequencies to the analytic map.
        let cfg = MarketConfig::new(
            vec![0.4, 0.6],
            vec![vec![1.0, 0.5, 0.8], vec![0.3, 1.0, 0.6]],
            vec![vec![0.9, 0.3, 0.5], vec![0.2, 0.8, 0.6]],
            vec![0.5, 0.7],
        )
        .unwrap();
        let phi = MarketShare::new(vec![0.5, 0.3, 0.2]).unwrap();
        let p = next_purchase_probabilities(&cfg, &phi).unwrap();

        let mut rng = rng_for_seed(2024);
        let mut counts = vec![0u64; 3];
        let mut purchases = 0u64;
        let trials_per_type: Vec<Vec<f64>> = (0..2)
            .map(|i| trial_probabilities(&cfg, i, &phi))
            .collect();
        for _ in 0..1_000_000 {
            let i = sample_index(&mut rng, cfg.weights()).unwrap();
            if let Some(j) = sample_index(&mut rng, &trials_per_type[i]) {
                if sample_bernoulli(&mut rng, cfg.quality()[i][j]) {
                    counts[j] += 1;
                    purchases += 1;
                }
            }
        }
        for j in 0..3 {
            let freq = counts[j] as f64 / purchases as f64;
            let se = (p.get(j) * (1.0 - p.get(j)) / purchases as f64).sqrt();
            assert!(
                (freq - p.get(j)).abs() <= 4.0 * se,
                "item {j}: freq {freq} vs p {} (se {se})",
                p.get(j)
            );
        }
    }

    #[test]
    fn single_item_market_stays_at_one() {
        let cfg = MarketConfig::homogeneous(vec![1.0], vec![0.5], 0.5).unwrap();
        let trajectory =
            run_stochastic(&cfg, &PurchaseLedger::ones(1), 100, 7, 10).unwrap();
        for record in &trajectory.records {
            assert_eq!(record.shares, vec![1.0]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical_different_seeds_differ() {
        let cfg = two_item_cfg();
        let d0 = PurchaseLedger::ones(2);
        let opts = StochasticOptions {
            record_every: 100,
            record_events: true,
            ..StochasticOptions::default()
        };
        let a = run_stochastic_opts(&cfg, &d0, 2000, 11, &opts).unwrap();
        let b = run_stochastic_opts(&cfg, &d0, 2000, 11, &opts).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.shares, rb.shares);
        }
        assert_eq!(a.events, b.events);
        assert_eq!(a.total_trials, b.total_trials);

        let c = run_stochastic_opts(&cfg, &d0, 2000, 12, &opts).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn engine_agrees_with_repeated_single_steps() {
        let cfg = MarketConfig::new(
            vec![0.3, 0.7],
            vec![vec![1.0, 0.5], vec![0.4, 1.0]],
            vec![vec![0.8, 0.3], vec![0.2, 0.9]],
            vec![0.4, 0.6],
        )
        .unwrap();
        let opts = StochasticOptions {
            record_every: 50,
            record_events: true,
            ..StochasticOptions::default()
        };
        let engine = run_stochastic_opts(&cfg, &PurchaseLedger::ones(2), 500, 21, &opts).unwrap();

        let mut ledger = PurchaseLedger::ones(2);
        let mut rng = rng_for_seed(21);
        let mut events = Vec::new();
        let mut step = 0;
        while events.iter().filter(|e: &&SimulationEvent| e.purchased).count() < 500 {
            step += 1;
            events.push(stochastic_step(&cfg, &mut ledger, &mut rng, step));
        }
        assert_eq!(engine.events.as_ref().unwrap(), &events);
    }

    #[test]
    fn purchase_clock_counts_purchases_exactly() {
        let cfg = two_item_cfg();
        let trajectory =
            run_stochastic(&cfg, &PurchaseLedger::ones(2), 1234, 3, 100).unwrap();
        assert_eq!(trajectory.total_purchases, 1234);
        assert!(trajectory.total_trials >= trajectory.total_purchases);
        assert_eq!(trajectory.final_record().time, 1234);
        // Shares at each record equal counts/total exactly; entropy/efficiency
        // recompute to the same values.
        for record in &trajectory.records {
            let phi = MarketShare::new(record.shares.clone()).unwrap();
            assert!((share_entropy(&phi) - record.entropy).abs() <= 1e-12);
            assert!((market_efficiency(&cfg, &phi) - record.efficiency).abs() <= 1e-12);
        }
    }

    #[test]
    fn trial_cap_aborts_pathological_runs() {
        // Purchases are possible but rare enough that the cap trips first.
        let cfg = MarketConfig::homogeneous(vec![1.0, 1.0], vec![0.01, 0.01], 0.5).unwrap();
        let opts = StochasticOptions {
            record_every: 10,
            trial_cap: 50,
            ..StochasticOptions::default()
        };
        match run_stochastic_opts(&cfg, &PurchaseLedger::ones(2), 1_000_000, 1, &opts) {
            Err(Error::TrialCap { trials, .. }) => assert_eq!(trials, 50),
            other => panic!("expected TrialCap, got {other:?}"),
        }
    }

    #[test]
    fn rma_identity_reconstructs_share_updates_exactly() {
        let cfg = MarketConfig::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.6, 0.3], vec![0.2, 1.0, 0.9]],
            vec![vec![0.9, 0.4, 0.2], vec![0.3, 0.7, 0.8]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let opts = StochasticOptions {
            record_every: 1000,
            record_events: true,
            ..StochasticOptions::default()
        };
        let trajectory =
            run_stochastic_opts(&cfg, &PurchaseLedger::ones(3), 5000, 99, &opts).unwrap();

        let mut ledger = PurchaseLedger::ones(3);
        let mut max_defect: f64 = 0.0;
        let mut purchase_index = 0u64;
        for event in trajectory.events.as_ref().unwrap() {
            if !event.purchased {
                continue;
            }
            let prev = ledger.shares();
            let p = next_purchase_probabilities(&cfg, &prev).unwrap();
            let total_before = ledger.total();
            let (drift, noise) =
                rma_decomposition(&prev, event, total_before, &p).unwrap();
            purchase_index += 1;

            ledger.record_purchase(event.tried_item.unwrap());
            let next = ledger.shares();
            let gamma = 1.0 / (total_before + 1) as f64;
            for j in 0..3 {
                let reconstructed = prev.get(j) + gamma * (drift[j] + noise[j]);
                max_defect = max_defect.max((next.get(j) - reconstructed).abs());
            }
        }
        assert_eq!(purchase_index, 5000);
        assert!(max_defect <= 1e-14, "max defect {max_defect}");
    }

    #[test]
    fn rma_noise_has_zero_conditional_mean_at_frozen_shares() {
        let cfg = two_item_cfg();
        let phi = MarketShare::new(vec![0.6, 0.4]).unwrap();
        let p = next_purchase_probabilities(&cfg, &phi).unwrap();
        let mut rng = rng_for_seed(404);
        let mut sums = vec![0.0; 2];
        let mut n = 0u64;
        let trial = trial_probabilities(&cfg, 0, &phi);
        while n < 100_000 {
            if let Some(j) = sample_index(&mut rng, &trial) {
                if sample_bernoulli(&mut rng, cfg.quality()[0][j]) {
                    n += 1;
                    for k in 0..2 {
                        sums[k] += (k == j) as u64 as f64 - p.get(k);
                    }
                }
            }
        }
        for k in 0..2 {
            let mean = sums[k] / n as f64;
            let se = (p.get(k) * (1.0 - p.get(k)) / n as f64).sqrt();
            assert!(mean.abs() <= 4.0 * se, "component {k}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn rma_drift_vanishes_at_one_hot_share() {
        let cfg = two_item_cfg();
        let phi = MarketShare::one_hot(2, 0);
        let p = next_purchase_probabilities(&cfg, &phi).unwrap();
        let event = SimulationEvent {
            step: 1,
            user_type: 0,
            tried_item: Some(0),
            purchased: true,
        };
        let (drift, _) = rma_decomposition(&phi, &event, 10, &p).unwrap();
        assert_eq!(drift, vec![0.0, 0.0]);
    }

    #[test]
    fn convergence_report_shapes_and_degenerate_case() {
        let cfg = two_item_cfg();
        let tome = homogeneous_tome(&cfg).unwrap();

        // Two synthetic trajectories pinned at the equilibrium.
        let b_star = spending_from_shares(&cfg, &tome.shares);
        let fixed = run_deterministic(&cfg, &b_star, 30, 10).unwrap();
        let report =
            convergence_report(&cfg, &[fixed.clone(), fixed.clone()], &tome).unwrap();
        assert_eq!(report.rows.len(), fixed.records.len());
        for row in &report.rows {
            assert!(row.distance_l1[1] <= 1e-12);
        }
        assert!(report.median_gap_nonincreasing);

        let single = convergence_report(&cfg, &[fixed], &tome);
        assert!(single.is_err());
    }
}
