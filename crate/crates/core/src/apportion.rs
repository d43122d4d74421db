//! Integer apportionment by the largest-remainder method.

use crate::scalar::Scalar;

/// Splits `total` units in proportion to `weights`, giving every entry at
/// least `floor` units.
///
/// Units go first by the integer part of each exact quota, then one at a time
/// by descending fractional remainder (ties: larger weight, then lower index).
/// Entries left below `floor` are topped up from the entry holding the most
/// units, taking from the lowest-weight holder on ties, which keeps the result
/// monotone in weight. Returns `None` when `total < floor * weights.len()` or
/// a weight is negative or non-finite.
pub fn largest_remainder<T: Scalar>(weights: &[T], total: u32, floor: u32) -> Option<Vec<u32>> {
    let n = weights.len();
    if n == 0 {
        return Some(Vec::new());
    }
    if u64::from(total) < u64::from(floor) * n as u64 {
        return None;
    }
    if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
        return None;
    }
    let sum = weights.iter().fold(T::zero(), |a, w| a + *w);
    let quotas: Vec<T> = if sum > T::zero() {
        weights.iter().map(|w| *w / sum * T::from_count(total)).collect()
    } else {
        vec![T::from_count(total) / T::from_count(n as u32); n]
    };
    let mut units: Vec<u32> = quotas.iter().map(|q| q.floor().to_u32().unwrap_or(0).min(total)).collect();
    let mut assigned: u32 = units.iter().sum();
    // Float rounding can overshoot by a unit in pathological cases.
    while assigned > total {
        let i = (0..n).max_by(|a, b| units[*a].cmp(&units[*b]).then(b.cmp(a))).unwrap();
        units[i] -= 1;
        assigned -= 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - T::from_count(units[a]);
        let rb = quotas[b] - T::from_count(units[b]);
        rb.partial_cmp(&ra).unwrap().then(weights[b].partial_cmp(&weights[a]).unwrap()).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take((total - assigned) as usize) {
        units[i] += 1;
    }
    while let Some(short) = (0..n)
        .filter(|i| units[*i] < floor)
        .min_by(|a, b| weights[*b].partial_cmp(&weights[*a]).unwrap().then(a.cmp(b)))
    {
        let donor = (0..n)
            .filter(|i| units[*i] > floor)
            .max_by(|a, b| {
                units[*a].cmp(&units[*b]).then(weights[*b].partial_cmp(&weights[*a]).unwrap()).then(a.cmp(b))
            })
            .expect("total covers the floor");
        units[donor] -= 1;
        units[short] += 1;
    }
    Some(units)
}
