//! Market parameterization, choice probabilities, and the efficiency and
//! diversity metrics every other module consumes.
//!
//! A trial-offer market has user types with population weights, per-type item
//! visibilities and qualities, and per-type feedback exponents. An arriving
//! user first tries an item (multinomial logit over visibility times the
//! social signal `share^r`), then purchases it with the item's quality
//! probability. All functions here are pure and safe to call concurrently.

use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance for sums-to-one invariants on weights and shares.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A probability vector produced internally may drift from unit sum by less
/// than this before renormalization; anything larger is a bug.
const RENORMALIZE_GUARD: f64 = 1e-9;

/// `base^exponent` with the zero-base cases pinned: `0^r = 0` for `r > 0` and
/// `0^0 = 1` (a feedback exponent of zero means appeal-driven choice with no
/// social signal). Positive bases go through `exp(r * ln(base))`.
pub fn pow_feedback(base: f64, exponent: f64) -> f64 {
    debug_assert!(base >= 0.0, "pow_feedback needs a nonnegative base");
    debug_assert!(
        base > 0.0 || exponent >= 0.0,
        "0 raised to a negative exponent"
    );
    if base == 0.0 {
        if exponent == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (exponent * base.ln()).exp()
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Full trial-offer market parameterization.
///
/// Construction validates every invariant: weights on the simplex, matrix
/// shapes, entry ranges, and the standing assumption that every item is
/// purchasable by at least one type (`v_ij * q_ij > 0` for some `i`); an item
/// violating it would be pinned at zero equilibrium share and must be removed
/// before analysis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarketConfig {
    weights: Vec<f64>,
    visibility: Vec<Vec<f64>>,
    quality: Vec<Vec<f64>>,
    feedback: Vec<f64>,
}

impl MarketConfig {
    pub fn new(
        weights: Vec<f64>,
        visibility: Vec<Vec<f64>>,
        quality: Vec<Vec<f64>>,
        feedback: Vec<f64>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));

        let num_types = weights.len();
        if num_types == 0 {
            return bad("weights must be non-empty".into());
        }
        if visibility.len() != num_types || quality.len() != num_types {
            return bad(format!(
                "visibility and quality must have one row per type ({} weights, {} visibility rows, {} quality rows)",
                num_types,
                visibility.len(),
                quality.len()
            ));
        }
        if feedback.len() != num_types {
            return bad(format!(
                "feedback must have one entry per type (got {}, expected {})",
                feedback.len(),
                num_types
            ));
        }
        let num_items = visibility[0].len();
        if num_items == 0 {
            return bad("market needs at least one item".into());
        }
        for (i, row) in visibility.iter().enumerate() {
            if row.len() != num_items {
                return bad(format!("visibility row {i} has length {}", row.len()));
            }
            if !all_finite(row) || row.iter().any(|&v| v < 0.0) {
                return bad(format!("visibility row {i} has a negative or non-finite entry"));
            }
        }
        for (i, row) in quality.iter().enumerate() {
            if row.len() != num_items {
                return bad(format!("quality row {i} has length {}", row.len()));
            }
            if !all_finite(row) || row.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
                return bad(format!("quality row {i} has an entry outside [0, 1]"));
            }
        }
        if !all_finite(&weights) || weights.iter().any(|&w| w <= 0.0 || w > 1.0) {
            return bad("weights must lie in (0, 1]".into());
        }
        let weight_sum: f64 = weights.iter().sum();
        if (weight_sum - 1.0).abs() > SIMPLEX_TOL {
            return bad(format!("weights sum to {weight_sum}, expected 1"));
        }
        if !all_finite(&feedback) || feedback.iter().any(|&r| r < 0.0) {
            return bad("feedback exponents must be finite and >= 0".into());
        }
        for j in 0..num_items {
            let purchasable = (0..num_types).any(|i| visibility[i][j] * quality[i][j] > 0.0);
            if !purchasable {
                return bad(format!(
                    "item {j} has visibility*quality = 0 for every type; its equilibrium share is pinned at zero, remove it from the market"
                ));
            }
        }

        Ok(Self {
            weights,
            visibility,
            quality,
            feedback,
        })
    }

    /// Single-type market.
    pub fn homogeneous(visibility: Vec<f64>, quality: Vec<f64>, feedback: f64) -> Result<Self> {
        Self::new(
            vec![1.0],
            vec![visibility],
            vec![quality],
            vec![feedback],
        )
    }

    pub fn num_types(&self) -> usize {
        self.weights.len()
    }

    pub fn num_items(&self) -> usize {
        self.visibility[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn visibility(&self) -> &[Vec<f64>] {
        &self.visibility
    }

    pub fn quality(&self) -> &[Vec<f64>] {
        &self.quality
    }

    pub fn feedback(&self) -> &[f64] {
        &self.feedback
    }

    pub fn is_homogeneous(&self) -> bool {
        self.num_types() == 1
    }

    /// The common quality row if every type perceives identical qualities.
    pub fn common_quality(&self) -> Option<&[f64]> {
        let first = &self.quality[0];
        self.quality[1..]
            .iter()
            .all(|row| row == first)
            .then(|| first.as_slice())
    }

    /// The common visibility row if every type sees identical visibilities.
    pub fn common_visibility(&self) -> Option<&[f64]> {
        let first = &self.visibility[0];
        self.visibility[1..]
            .iter()
            .all(|row| row == first)
            .then(|| first.as_slice())
    }

    /// The common feedback exponent if all types share one.
    pub fn common_feedback(&self) -> Option<f64> {
        let first = self.feedback[0];
        self.feedback.iter().all(|&r| r == first).then_some(first)
    }

    /// Coupled appeal `v_j * q_j` for a homogeneous market.
    pub fn coupled_appeal(&self) -> Option<Vec<f64>> {
        if !self.is_homogeneous() {
            return None;
        }
        Some(
            self.visibility[0]
                .iter()
                .zip(&self.quality[0])
                .map(|(v, q)| v * q)
                .collect(),
        )
    }
}

/// A point on the item simplex: nonnegative shares summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketShare(Vec<f64>);

impl MarketShare {
    pub fn new(shares: Vec<f64>) -> Result<Self> {
        if shares.is_empty() {
            return Err(Error::InvalidConfig("share vector must be non-empty".into()));
        }
        if !all_finite(&shares) || shares.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig(
                "shares must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = shares.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidConfig(format!(
                "shares sum to {sum}, expected 1 within {SIMPLEX_TOL:.0e}"
            )));
        }
        Ok(Self(shares))
    }

    /// Normalize an arbitrary nonnegative vector with positive total mass.
    pub fn normalized(mut raw: Vec<f64>) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) || !all_finite(&raw) || raw.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig(
                "cannot normalize: entries must be nonnegative with positive sum".into(),
            ));
        }
        for p in &mut raw {
            *p /= sum;
        }
        Ok(Self(raw))
    }

    pub fn uniform(num_items: usize) -> Self {
        assert!(num_items > 0);
        Self(vec![1.0 / num_items as f64; num_items])
    }

    pub fn one_hot(num_items: usize, item: usize) -> Self {
        assert!(item < num_items);
        let mut v = vec![0.0; num_items];
        v[item] = 1.0;
        Self(v)
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

    pub fn get(&self, item: usize) -> f64 {
        self.0[item]
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&p| p > 0.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Serialize for MarketShare {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for p in &self.0 {
            seq.serialize_element(p)?;
        }
        seq.end()
    }
}

/// Integer purchase counts behind a share vector. Every item starts with at
/// least one purchase so each has positive probability of being tried in the
/// opening rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct PurchaseLedger {
    counts: Vec<u64>,
    initial_total: u64,
}

impl PurchaseLedger {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidConfig("ledger must be non-empty".into()));
        }
        if counts.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(
                "every item needs at least one initial purchase".into(),
            ));
        }
        let initial_total = counts.iter().sum();
        Ok(Self {
            counts,
            initial_total,
        })
    }

    /// One initial purchase per item, the default starting ledger.
    pub fn ones(num_items: usize) -> Self {
        Self::new(vec![1; num_items]).expect("ones ledger is always valid")
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn initial_total(&self) -> u64 {
        self.initial_total
    }

    pub fn record_purchase(&mut self, item: usize) {
        self.counts[item] += 1;
    }

    /// Current market share, counts divided by the running total.
    pub fn shares(&self) -> MarketShare {
        let total = self.total() as f64;
        MarketShare::new(self.counts.iter().map(|&d| d as f64 / total).collect())
            .expect("ledger shares always lie on the simplex")
    }
}

/// Renormalize a probability vector whose sum should be 1; a deviation beyond
/// the guard indicates a computation bug upstream.
fn renormalize_guarded(mut probs: Vec<f64>) -> Vec<f64> {
    let sum: f64 = probs.iter().sum();
    assert!(
        (sum - 1.0).abs() < RENORMALIZE_GUARD,
        "internal error: probability vector sums to {sum}"
    );
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

/// Multinomial-logit trial probabilities from a raw visibility row:
/// `v_j * phi_j^r / sum_k v_k * phi_k^r`. Returns the all-zero vector when the
/// denominator vanishes (every such choice probability is defined as zero).
pub fn logit_trial_probabilities(visibility: &[f64], shares: &[f64], feedback: f64) -> Vec<f64> {
    debug_assert_eq!(visibility.len(), shares.len());
    let raw: Vec<f64> = visibility
        .iter()
        .zip(shares)
        .map(|(&v, &phi)| v * pow_feedback(phi, feedback))
        .collect();
    let denom: f64 = raw.iter().sum();
    if denom <= 0.0 {
        return vec![0.0; shares.len()];
    }
    renormalize_guarded(raw.into_iter().map(|u| u / denom).collect())
}

/// Trial probabilities of one user type at the given market share.
pub fn trial_probabilities(cfg: &MarketConfig, user_type: usize, phi: &MarketShare) -> Vec<f64> {
    assert_eq!(phi.len(), cfg.num_items(), "share length mismatch");
    logit_trial_probabilities(
        &cfg.visibility()[user_type],
        phi.as_slice(),
        cfg.feedback()[user_type],
    )
}

/// Probability that the *next arrival* tries and then purchases each item:
/// `y_j = sum_i w_i q_ij * trial_ij(phi)`.
pub fn purchase_intensity(cfg: &MarketConfig, phi: &MarketShare) -> Vec<f64> {
    assert_eq!(phi.len(), cfg.num_items(), "share length mismatch");
    let mut y = vec![0.0; cfg.num_items()];
    for i in 0..cfg.num_types() {
        let trial = trial_probabilities(cfg, i, phi);
        let w = cfg.weights()[i];
        for (j, &t) in trial.iter().enumerate() {
            y[j] += w * cfg.quality()[i][j] * t;
        }
    }
    y
}

/// Distribution of the next purchase across items: `p_j = y_j / sum_k y_k`.
pub fn next_purchase_probabilities(cfg: &MarketConfig, phi: &MarketShare) -> Result<MarketShare> {
    let y = purchase_intensity(cfg, phi);
    let total: f64 = y.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroIntensity);
    }
    let p = renormalize_guarded(y.into_iter().map(|yj| yj / total).collect());
    MarketShare::new(p)
}

/// Market efficiency: the probability that the next arrival purchases
/// anything, `E(phi) = sum_j y_j(phi)`.
pub fn market_efficiency(cfg: &MarketConfig, phi: &MarketShare) -> f64 {
    purchase_intensity(cfg, phi).iter().sum()
}

/// Shannon entropy of the share vector in nats, with `0 * ln 0 = 0`.
pub fn share_entropy(phi: &MarketShare) -> f64 {
    phi.as_slice()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}
