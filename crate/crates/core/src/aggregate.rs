//! Weighted NLI combination and reduction of pair sums to a single score.
//!
//! Every directed score `s(i, j) = w_ent·ent + w_con·con + w_neu·neu` is
//! summed with its reverse direction, giving one value per unordered fact
//! pair. The resulting multiset is reduced by one of three strategies:
//! the minimum, the signed value of largest magnitude, or the lower
//! centroid of an exact two-cluster partition.

use crate::error::{Error, Result};
use crate::model::{Method, NliMatrix, NliTriple, RealityScore, ScoreWeights};

pub fn combine_scores(triple: &NliTriple, weights: &ScoreWeights) -> Result<f64> {
    let inputs = [
        triple.ent,
        triple.con,
        triple.neu,
        weights.w_ent,
        weights.w_con,
        weights.w_neu,
    ];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite value combining {triple:?} with {weights}"
        )));
    }
    Ok(weights.w_ent * triple.ent + weights.w_con * triple.con + weights.w_neu * triple.neu)
}

/// One symmetric sum per unordered pair `i < j`, in row-major pair order.
///
/// Duplicate values coming from different pairs are all kept.
pub fn symmetric_sums(matrix: &NliMatrix, weights: &ScoreWeights) -> Result<Vec<f64>> {
    let n = matrix.n();
    let entry = |i: usize, j: usize| {
        matrix.get(i, j).ok_or(Error::IncompleteMatrix {
            premise: i,
            hypothesis: j,
            reason: None,
        })
    };
    let mut sums = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let forward = combine_scores(entry(i, j)?, weights)?;
            let backward = combine_scores(entry(j, i)?, weights)?;
            sums.push(forward + backward);
        }
    }
    Ok(sums)
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyInput("score multiset is empty"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {v}")));
    }
    Ok(())
}

pub fn agg_min(values: &[f64]) -> Result<f64> {
    check_values(values)?;
    Ok(values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// The element of largest magnitude, sign preserved. A `+v`/`-v` tie yields `-v`.
pub fn agg_absmax(values: &[f64]) -> Result<f64> {
    check_values(values)?;
    let mut best = values[0];
    for &v in &values[1..] {
        if v.abs() > best.abs() || (v.abs() == best.abs() && v < best) {
            best = v;
        }
    }
    Ok(best)
}

/// Optimal two-cluster partition of a one-dimensional multiset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoMeans {
    pub low_centroid: f64,
    pub high_centroid: f64,
    /// Number of values in the low cluster; equals the input length when
    /// all values coincide.
    pub low_count: usize,
    /// Within-cluster sum of squared deviations of the chosen partition.
    pub sse: f64,
}

/// Exact 2-means in one dimension.
///
/// Optimal clusters are contiguous once the values are sorted, so the
/// minimum-SSE partition is found by scanning the `n - 1` split points
/// with prefix sums. Equal SSE keeps the leftmost split.
pub fn kmeans_1d_two(values: &[f64]) -> Result<TwoMeans> {
    check_values(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (first, last) = (sorted[0], sorted[n - 1]);
    if first == last {
        return Ok(TwoMeans {
            low_centroid: first,
            high_centroid: first,
            low_count: n,
            sse: 0.0,
        });
    }

    // Centering keeps the prefix-sum SSE formula well conditioned.
    let shift = mean(&sorted);
    let mut sum = vec![0.0; n + 1];
    let mut sum_sq = vec![0.0; n + 1];
    for (k, v) in sorted.iter().enumerate() {
        let c = v - shift;
        sum[k + 1] = sum[k] + c;
        sum_sq[k + 1] = sum_sq[k] + c * c;
    }
    let segment_sse = |from: usize, to: usize| {
        let count = (to - from) as f64;
        let s = sum[to] - sum[from];
        (sum_sq[to] - sum_sq[from] - s * s / count).max(0.0)
    };

    let mut best_split = 1;
    let mut best_sse = f64::INFINITY;
    for k in 1..n {
        let sse = segment_sse(0, k) + segment_sse(k, n);
        if sse < best_sse {
            best_sse = sse;
            best_split = k;
        }
    }

    let (low, high) = sorted.split_at(best_split);
    let low_centroid = mean(low).clamp(low[0], low[low.len() - 1]);
    let high_centroid = mean(high).clamp(high[0], high[high.len() - 1]);
    Ok(TwoMeans {
        low_centroid,
        high_centroid,
        low_count: best_split,
        sse: sse_about(low, low_centroid) + sse_about(high, high_centroid),
    })
}

pub fn agg_clust(values: &[f64]) -> Result<f64> {
    kmeans_1d_two(values).map(|c| c.low_centroid)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sse_about(values: &[f64], center: f64) -> f64 {
    values.iter().map(|v| (v - center) * (v - center)).sum()
}

impl Method {
    /// Applies this reduction to a multiset of pair sums.
    pub fn reduce(&self, values: &[f64]) -> Result<f64> {
        match self {
            Method::Min => agg_min(values),
            Method::Absmax => agg_absmax(values),
            Method::Clust => agg_clust(values),
        }
    }
}

pub fn reality_check(
    image_id: &str,
    matrix: &NliMatrix,
    weights: &ScoreWeights,
    method: Method,
) -> Result<RealityScore> {
    if matrix.n() < 2 {
        return Err(Error::InvalidInput(format!(
            "matrix for `{image_id}` has {} facts, need at least 2",
            matrix.n()
        )));
    }
    weights.validate()?;
    let s_nli_values = symmetric_sums(matrix, weights)?;
    let value = method.reduce(&s_nli_values)?;
    Ok(RealityScore {
        image_id: image_id.to_string(),
        value,
        method,
        weights: *weights,
        s_nli_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(ent: f64, con: f64, neu: f64) -> NliTriple {
        NliTriple::new(ent, con, neu).unwrap()
    }

    /// Enumerates every nonempty bipartition; returns (sse, low, high).
    fn brute_force_two_means(values: &[f64]) -> (f64, f64, f64) {
        let n = values.len();
        if n == 1 {
            return (0.0, values[0], values[0]);
        }
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for mask in 1u32..((1 << n) - 1) {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for (k, &v) in values.iter().enumerate() {
                    if mask & (1 << k) != 0 {
                        a.push(v)
                    } else {
                        b.push(v)
                    }
                }
                (a, b)
            };
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let sse = sse_about(&a, ma) + sse_about(&b, mb);
            if sse < best.0 {
                best = (sse, ma.min(mb), ma.max(mb));
            }
        }
        best
    }

    #[test]
    fn combine_examples() {
        let w = ScoreWeights::default();
        assert_eq!(combine_scores(&t(1.0, 0.0, 0.0), &w).unwrap(), 1.75);
        assert_eq!(combine_scores(&t(0.0, 1.0, 0.0), &w).unwrap(), -2.0);
        let v = combine_scores(&t(0.5, 0.3, 0.2), &w).unwrap();
        assert!((v - 0.275).abs() < 1e-12, "{v}");
    }

    #[test]
    fn combine_rejects_non_finite_weights() {
        let w = ScoreWeights::new(f64::NAN, 0.0, 0.0);
        assert!(matches!(
            combine_scores(&t(1.0, 0.0, 0.0), &w),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn symmetric_sum_two_facts() {
        // forward 0.4 = 1·0.4, backward −0.1 = −1·0.1 with w = (1, −1, 0)
        let mut m = NliMatrix::new(2, "nli");
        m.insert(0, 1, t(0.4, 0.0, 0.6)).unwrap();
        m.insert(1, 0, t(0.0, 0.1, 0.9)).unwrap();
        let s = symmetric_sums(&m, &ScoreWeights::new(1.0, -1.0, 0.0)).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn symmetric_sum_keeps_duplicates() {
        let m = NliMatrix::from_fn(3, "nli", |_, _| t(1.0, 0.0, 0.0)).unwrap();
        let s = symmetric_sums(&m, &ScoreWeights::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(s, vec![2.0, 2.0, 2.0]);
        let m5 = NliMatrix::from_fn(5, "nli", |_, _| t(0.2, 0.5, 0.3)).unwrap();
        assert_eq!(
            symmetric_sums(&m5, &ScoreWeights::default()).unwrap().len(),
            10
        );
    }

    #[test]
    fn symmetric_sum_incomplete_matrix() {
        let mut m = NliMatrix::new(3, "nli");
        m.insert(0, 1, t(1.0, 0.0, 0.0)).unwrap();
        m.insert(1, 0, t(1.0, 0.0, 0.0)).unwrap();
        match symmetric_sums(&m, &ScoreWeights::default()) {
            Err(Error::IncompleteMatrix {
                premise: 0,
                hypothesis: 2,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn min_examples() {
        assert_eq!(agg_min(&[0.2, -0.5, 0.9]).unwrap(), -0.5);
        assert_eq!(agg_min(&[1.0]).unwrap(), 1.0);
        assert_eq!(agg_min(&[-3.0, -3.0, 2.0]).unwrap(), -3.0);
        assert!(matches!(agg_min(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn absmax_examples() {
        assert_eq!(agg_absmax(&[0.2, -0.95, 0.9]).unwrap(), -0.95);
        assert_eq!(agg_absmax(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(agg_absmax(&[0.7, -0.7]).unwrap(), -0.7);
        assert_eq!(agg_absmax(&[-0.7, 0.7]).unwrap(), -0.7);
        assert!(matches!(agg_absmax(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn kmeans_examples() {
        // three split points of {0,0,10,10}: sse 66.7, 0, 66.7
        let c = kmeans_1d_two(&[0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!((c.low_centroid, c.high_centroid), (0.0, 10.0));
        assert_eq!(c.sse, 0.0);

        let c = kmeans_1d_two(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!((c.low_centroid, c.high_centroid), (0.3, 0.3));

        let c = kmeans_1d_two(&[3.1, -2.0, 3.0, -1.9]).unwrap();
        assert!((c.low_centroid + 1.95).abs() < 1e-12);
        assert!((c.high_centroid - 3.05).abs() < 1e-12);
        assert_eq!(c.low_count, 2);

        assert!(matches!(kmeans_1d_two(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn clust_examples() {
        assert_eq!(agg_clust(&[0.0, 0.0, 10.0, 10.0]).unwrap(), 0.0);
        assert_eq!(agg_clust(&[-4.25]).unwrap(), -4.25);
        assert_eq!(agg_clust(&[-1.0, -1.0, -1.0, 5.0]).unwrap(), -1.0);
    }

    #[test]
    fn reality_check_singleton_all_methods_agree() {
        let mut m = NliMatrix::new(2, "nli");
        m.insert(0, 1, t(0.4, 0.0, 0.6)).unwrap();
        m.insert(1, 0, t(0.0, 0.1, 0.9)).unwrap();
        let w = ScoreWeights::new(1.0, -1.0, 0.0);
        for method in Method::ALL {
            let s = reality_check("img", &m, &w, method).unwrap();
            assert!((s.value - 0.3).abs() < 1e-12);
            assert_eq!(s.s_nli_values.len(), 1);
            assert_eq!(s.method, method);
        }
    }

    #[test]
    fn reality_check_rejects_single_fact() {
        let m = NliMatrix::new(1, "nli");
        assert!(reality_check("img", &m, &ScoreWeights::default(), Method::Min).is_err());
    }

    proptest! {
        #[test]
        fn kmeans_matches_bipartition_oracle(values in prop::collection::vec(-5.0f64..5.0, 1..10)) {
            let c = kmeans_1d_two(&values).unwrap();
            let (sse, low, high) = brute_force_two_means(&values);
            prop_assert!((c.sse - sse).abs() < 1e-9);
            prop_assert!((c.low_centroid - low).abs() < 1e-9);
            prop_assert!((c.high_centroid - high).abs() < 1e-9);
        }

        #[test]
        fn reduction_ordering(values in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let lo = agg_min(&values).unwrap();
            let cl = agg_clust(&values).unwrap();
            prop_assert!(lo <= cl);
            prop_assert!(cl <= mean(&values));
            prop_assert!(values.contains(&agg_absmax(&values).unwrap()));
        }

        #[test]
        fn combine_is_linear_in_weights(
            e in 0.0f64..1.0, c in 0.0f64..1.0,
            a in prop::array::uniform3(-3.0f64..3.0),
            b in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let c = c * (1.0 - e);
            let triple = t(e, c, 1.0 - e - c);
            let w1 = ScoreWeights::new(a[0], a[1], a[2]);
            let w2 = ScoreWeights::new(b[0], b[1], b[2]);
            let lhs = combine_scores(&triple, &(w1 + w2)).unwrap();
            let rhs = combine_scores(&triple, &w1).unwrap() + combine_scores(&triple, &w2).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
