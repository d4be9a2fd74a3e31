//! Small numeric helpers shared across modules.

/// Interpolated quantile of an unsorted sample, q in [0, 1].
///
/// Linear interpolation between order statistics (the same convention as
/// numpy's default). Panics on an empty sample.
pub fn quantile(sample: &[f64], q: f64) -> f64 {
    assert!(!sample.is_empty(), "quantile of empty sample");
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// 25/50/75 percentiles of a sample.
pub fn quartiles(sample: &[f64]) -> [f64; 3] {
    [
        quantile(sample, 0.25),
        quantile(sample, 0.50),
        quantile(sample, 0.75),
    ]
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max absolute difference between two matrices of the same shape.
pub fn linf_distance_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(ra, rb)| linf_distance(ra, rb))
        .fold(0.0, f64::max)
}

/// Indices sorted by descending value; ties broken by lower index first.
pub fn argsort_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("NaN in argsort input")
            .then(a.cmp(&b))
    });
    idx
}
