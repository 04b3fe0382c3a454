//! Active-learning query strategies over the unlabeled pool.
//!
//! Every selector takes the pool ids in ascending order together with
//! row-aligned model outputs, and breaks ties by ascending id.

use std::cmp::Ordering;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    #[default]
    Margin,
    LeastConfidence,
    Entropy,
    Badge,
    Coreset,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Margin => "margin",
            Strategy::LeastConfidence => "least_confidence",
            Strategy::Entropy => "entropy",
            Strategy::Badge => "badge",
            Strategy::Coreset => "coreset",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(Strategy::Random),
            "margin" => Ok(Strategy::Margin),
            "least_confidence" | "lc" => Ok(Strategy::LeastConfidence),
            "entropy" => Ok(Strategy::Entropy),
            "badge" => Ok(Strategy::Badge),
            "coreset" | "core_set" => Ok(Strategy::Coreset),
            other => Err(Error::Config(format!("unknown query strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub ids: Vec<String>,
    /// Selection score of each id at the time it was picked.
    pub scores: Vec<f64>,
    pub strategy: Strategy,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("query size must be >= 1".into()));
    }
    Ok(())
}

fn check_rows<T>(ids: &[String], m: ArrayView2<T>, what: &str) -> Result<()> {
    if ids.len() != m.nrows() {
        return Err(Error::Argument(format!(
            "{what} has {} rows for {} pool ids",
            m.nrows(),
            ids.len()
        )));
    }
    Ok(())
}

/// Indices `0..ids.len()` ordered by `key` (ascending or descending), ties
/// by ascending id.
fn rank_by(ids: &[String], scores: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal);
        let c = if descending { c.reverse() } else { c };
        c.then_with(|| ids[a].cmp(&ids[b]))
    });
    order
}

fn take_ranked(ids: &[String], scores: Vec<f64>, k: usize, descending: bool, strategy: Strategy) -> QueryResult {
    let order = rank_by(ids, &scores, descending);
    let chosen = &order[..k.min(order.len())];
    QueryResult {
        ids: chosen.iter().map(|&i| ids[i].clone()).collect(),
        scores: chosen.iter().map(|&i| scores[i]).collect(),
        strategy,
    }
}

/// Uniform sampling without replacement.
pub fn select_random(ids: &[String], k: usize, seed: u64) -> Result<QueryResult> {
    check_k(k)?;
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, sorted.len(), k.min(sorted.len()));
    Ok(QueryResult {
        ids: picks.iter().map(|i| sorted[i].clone()).collect(),
        scores: vec![0.0; picks.len()],
        strategy: Strategy::Random,
    })
}

/// Difference between the two largest class probabilities.
pub fn margin_score<T: Scalar>(row: ArrayView1<T>) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in row {
        let p = p.as_f64();
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    if second == f64::NEG_INFINITY {
        return first;
    }
    first - second
}

pub fn least_confidence_score<T: Scalar>(row: ArrayView1<T>) -> f64 {
    1.0 - row.iter().map(|p| p.as_f64()).fold(f64::NEG_INFINITY, f64::max)
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy_score<T: Scalar>(row: ArrayView1<T>) -> f64 {
    -row
        .iter()
        .map(|p| p.as_f64())
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Smallest margins first.
pub fn select_margin<T: Scalar>(ids: &[String], probs: ArrayView2<T>, k: usize) -> Result<QueryResult> {
    check_k(k)?;
    check_rows(ids, probs, "probability matrix")?;
    let scores = probs.rows().into_iter().map(margin_score).collect();
    Ok(take_ranked(ids, scores, k, false, Strategy::Margin))
}

/// Largest `1 − max p` first.
pub fn select_least_confidence<T: Scalar>(ids: &[String], probs: ArrayView2<T>, k: usize) -> Result<QueryResult> {
    check_k(k)?;
    check_rows(ids, probs, "probability matrix")?;
    let scores = probs.rows().into_iter().map(least_confidence_score).collect();
    Ok(take_ranked(ids, scores, k, true, Strategy::LeastConfidence))
}

/// Largest predictive entropy first.
pub fn select_entropy<T: Scalar>(ids: &[String], probs: ArrayView2<T>, k: usize) -> Result<QueryResult> {
    check_k(k)?;
    check_rows(ids, probs, "probability matrix")?;
    let scores = probs.rows().into_iter().map(entropy_score).collect();
    Ok(take_ranked(ids, scores, k, true, Strategy::Entropy))
}

/// Last-layer cross-entropy gradient at the predicted label:
/// `(p − onehot(argmax p)) ⊗ embedding`, flattened class-major.
pub fn badge_embeddings<T: Scalar>(probs: ArrayView2<T>, embeddings: ArrayView2<T>) -> Result<Array2<T>> {
    if probs.nrows() != embeddings.nrows() {
        return Err(Error::Argument("probabilities and embeddings differ in row count".into()));
    }
    let (c, d) = (probs.ncols(), embeddings.ncols());
    let mut out = Array2::zeros((probs.nrows(), c * d));
    for (i, (p, h)) in probs.rows().into_iter().zip(embeddings.rows()).enumerate() {
        let mut pred = 0;
        for j in 1..c {
            if p[j] > p[pred] {
                pred = j;
            }
        }
        for j in 0..c {
            let coef = if j == pred { p[j] - T::one() } else { p[j] };
            for (e, &hv) in h.iter().enumerate() {
                out[[i, j * d + e]] = coef * hv;
            }
        }
    }
    Ok(out)
}

fn sq_dist<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum()
}

/// Index of the first candidate where the running weight sum exceeds
/// `u · total`; one `f64` draw per call.
fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64], eligible: &[bool]) -> usize {
    let total: f64 = weights.iter().zip(eligible).filter(|(_, &e)| e).map(|(w, _)| w).sum();
    let u: f64 = rng.random();
    if !(total > 0.0) {
        // No mass left: uniform over what is still eligible.
        let open: Vec<usize> = (0..weights.len()).filter(|&i| eligible[i]).collect();
        return open[((u * open.len() as f64) as usize).min(open.len() - 1)];
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, (&w, &e)) in weights.iter().zip(eligible).enumerate() {
        if !e {
            continue;
        }
        last = i;
        acc += w;
        if acc > target {
            return i;
        }
    }
    last
}

/// k-means++ seeding over BADGE gradient embeddings. The first centre is
/// drawn proportionally to the squared embedding norm, later ones to the
/// squared distance to the nearest chosen centre.
pub fn select_badge<T: Scalar>(
    ids: &[String],
    probs: ArrayView2<T>,
    embeddings: ArrayView2<T>,
    k: usize,
    seed: u64,
) -> Result<QueryResult> {
    check_k(k)?;
    check_rows(ids, probs, "probability matrix")?;
    check_rows(ids, embeddings, "embedding matrix")?;
    let grads = badge_embeddings(probs, embeddings)?;
    Ok(kmeanspp_select(ids, grads.view(), k, seed))
}

pub(crate) fn kmeanspp_select<T: Scalar>(ids: &[String], points: ArrayView2<T>, k: usize, seed: u64) -> QueryResult {
    let n = ids.len();
    // Canonical order so the draw is independent of presentation order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Vec<f64> = order
        .iter()
        .map(|&i| points.row(i).iter().map(|v| v.as_f64().powi(2)).sum())
        .collect();
    let mut eligible = vec![true; n];
    let mut result = QueryResult {
        ids: Vec::with_capacity(k),
        scores: Vec::with_capacity(k),
        strategy: Strategy::Badge,
    };
    for step in 0..k {
        let pos = weighted_pick(&mut rng, &weights, &eligible);
        eligible[pos] = false;
        result.ids.push(ids[order[pos]].clone());
        result.scores.push(weights[pos]);
        let center = points.row(order[pos]);
        for (j, &idx) in order.iter().enumerate() {
            let d = sq_dist(points.row(idx), center);
            if step == 0 || d < weights[j] {
                weights[j] = d;
            }
        }
    }
    result
}

/// Greedy k-centre: repeatedly take the unlabeled point farthest from
/// `labeled ∪ selected`.
pub fn select_coreset<T: Scalar>(
    labeled: ArrayView2<T>,
    ids: &[String],
    unlabeled: ArrayView2<T>,
    k: usize,
) -> Result<QueryResult> {
    check_k(k)?;
    check_rows(ids, unlabeled, "embedding matrix")?;
    if labeled.nrows() > 0 && labeled.ncols() != unlabeled.ncols() {
        return Err(Error::shape(&[unlabeled.ncols()], &[labeled.ncols()]));
    }
    let n = ids.len();
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| {
            labeled
                .rows()
                .into_iter()
                .map(|l| sq_dist(unlabeled.row(i), l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; n];
    let mut result = QueryResult {
        ids: Vec::new(),
        scores: Vec::new(),
        strategy: Strategy::Coreset,
    };
    for _ in 0..k.min(n) {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if min_d[i] > min_d[b] || (min_d[i] == min_d[b] && ids[i] < ids[b]) => Some(i),
                keep => keep,
            };
        }
        let b = best.expect("k bounded by pool size");
        taken[b] = true;
        result.ids.push(ids[b].clone());
        result.scores.push(min_d[b].sqrt());
        for i in 0..n {
            let d = sq_dist(unlabeled.row(i), unlabeled.row(b));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(result)
}

/// Inputs for [`select`]; rows of every matrix are aligned with `ids`.
#[derive(Debug, Clone, Copy)]
pub struct SelectionInput<'a, T> {
    pub ids: &'a [String],
    pub probs: ArrayView2<'a, T>,
    pub embeddings: ArrayView2<'a, T>,
    pub labeled_embeddings: ArrayView2<'a, T>,
    pub seed: u64,
}

pub fn select<T: Scalar>(strategy: Strategy, input: SelectionInput<'_, T>, k: usize) -> Result<QueryResult> {
    match strategy {
        Strategy::Random => select_random(input.ids, k, input.seed),
        Strategy::Margin => select_margin(input.ids, input.probs, k),
        Strategy::LeastConfidence => select_least_confidence(input.ids, input.probs, k),
        Strategy::Entropy => select_entropy(input.ids, input.probs, k),
        Strategy::Badge => select_badge(input.ids, input.probs, input.embeddings, k, input.seed),
        Strategy::Coreset => select_coreset(input.labeled_embeddings, input.ids, input.embeddings, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:02}")).collect()
    }

    #[test]
    fn margin_prefers_confused_rows() {
        let p = array![[0.6, 0.3, 0.1], [0.4, 0.4, 0.2]];
        let q = select_margin(&ids(2), p.view(), 1).unwrap();
        assert_eq!(q.ids, vec!["id01"]);
        assert_eq!(q.scores, vec![0.0]);
    }

    #[test]
    fn one_hot_rows_are_picked_last() {
        let p = array![[1.0, 0.0], [0.5, 0.5], [0.7, 0.3]];
        let q = select_margin(&ids(3), p.view(), 3).unwrap();
        assert_eq!(q.ids.last().unwrap(), "id00");
        assert_eq!(q.ids[0], "id01");
    }

    #[test]
    fn least_confidence_scores() {
        assert_eq!(least_confidence_score(array![0.0, 1.0, 0.0].view()), 0.0);
        assert!((least_confidence_score(array![0.25, 0.25, 0.25, 0.25].view()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn entropy_scores() {
        assert_eq!(entropy_score(array![0.0, 1.0].view()), 0.0);
        assert!((entropy_score(array![0.5, 0.5, 0.0].view()) - std::f64::consts::LN_2).abs() < 1e-15);
        let u = entropy_score(array![0.2, 0.2, 0.2, 0.2, 0.2].view());
        assert!((u - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn badge_embedding_hand_example() {
        let g = badge_embeddings(array![[0.7, 0.3]].view(), array![[1.0, 2.0]].view()).unwrap();
        let expected: [f64; 4] = [-0.3, -0.6, 0.3, 0.6];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn badge_never_opens_on_a_zero_gradient() {
        let p = array![[1.0, 0.0], [0.6, 0.4], [0.55, 0.45]];
        let h = array![[3.0, 1.0], [1.0, 1.0], [0.5, 2.0]];
        for seed in 0..50 {
            let q = select_badge(&ids(3), p.view(), h.view(), 1, seed).unwrap();
            assert_ne!(q.ids[0], "id00", "seed {seed}");
        }
    }

    #[test]
    fn coreset_hand_example() {
        let labeled = array![[0.0]];
        let unl = array![[1.0], [2.0], [10.0]];
        let q = select_coreset(labeled.view(), &ids(3), unl.view(), 1).unwrap();
        assert_eq!(q.ids, vec!["id02"]);
        assert_eq!(q.scores, vec![10.0]);
    }

    #[test]
    fn random_is_seeded_and_covers_pool() {
        let pool = ids(10);
        let a = select_random(&pool, 4, 9).unwrap();
        assert_eq!(a, select_random(&pool, 4, 9).unwrap());
        let mut all = select_random(&pool, 10, 1).unwrap().ids;
        all.sort();
        assert_eq!(all, pool);
    }

    #[test]
    fn k_is_truncated_and_zero_rejected() {
        let p = array![[0.5, 0.5], [0.9, 0.1]];
        assert_eq!(select_entropy(&ids(2), p.view(), 5).unwrap().ids.len(), 2);
        assert!(select_entropy(&ids(2), p.view(), 0).is_err());
        assert!(select_margin(&ids(3), p.view(), 1).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Random,
            Strategy::Margin,
            Strategy::LeastConfidence,
            Strategy::Entropy,
            Strategy::Badge,
            Strategy::Coreset,
        ] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
    }
}
