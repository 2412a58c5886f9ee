//! Pairwise Bradley-Terry ranking objective over estimated attention scores.
//!
//! For each query the exact logits pick a top-`k` set. Estimated scores at
//! those positions form `B`, the remaining positions form `C`, and every
//! causally valid pair contributes `-ln σ(β (B_i - C_j) - α)`. The loss is
//! the mean over surviving pairs, so only the ordering between the two sets
//! is supervised, never the ordering inside either set.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{lit, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct RankingLossConfig {
    pub beta: f64,
    pub alpha: f64,
    /// Fraction of the cache excluded; the top set holds
    /// `floor(n * (1 - maskout))` positions.
    pub maskout: f64,
    /// Keep at most this many top-set rank positions (shared by all queries).
    pub max_top: Option<usize>,
    /// Keep at most this many non-top rank positions (shared by all queries).
    pub max_oth: Option<usize>,
    /// Optimize only this many randomly chosen query rows.
    pub query_subsample: Option<usize>,
}

impl Default for RankingLossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha: 3.0,
            maskout: 0.98,
            max_top: None,
            max_oth: None,
            query_subsample: None,
        }
    }
}

impl RankingLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.maskout > 0.0 && self.maskout < 1.0) {
            return Err(Error::Config(format!("maskout {} not in (0, 1)", self.maskout)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        for (name, v) in [
            ("max_top", self.max_top),
            ("max_oth", self.max_oth),
            ("query_subsample", self.query_subsample),
        ] {
            if v == Some(0) {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Size of the top set for a row of `n` scores.
    pub fn top_count(&self, n: usize) -> Result<usize> {
        let k = (n as f64 * (1.0 - self.maskout)) as usize;
        if k == 0 {
            return Err(Error::Config(format!(
                "maskout {} leaves no top positions out of {n}",
                self.maskout
            )));
        }
        Ok(k)
    }
}

/// Top and non-top positions chosen for one query row.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPairs {
    pub row: usize,
    pub top: Vec<usize>,
    pub other: Vec<usize>,
    pub top_valid: Vec<bool>,
    pub other_valid: Vec<bool>,
}

impl QueryPairs {
    pub fn valid_pairs(&self) -> usize {
        let t = self.top_valid.iter().filter(|&&v| v).count();
        let o = self.other_valid.iter().filter(|&&v| v).count();
        t * o
    }
}

/// Index split of every selected query into the sets `B` (top) and `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPartition {
    pub top_count: usize,
    pub queries: Vec<QueryPairs>,
}

impl PairPartition {
    pub fn valid_pairs(&self) -> usize {
        self.queries.iter().map(QueryPairs::valid_pairs).sum()
    }
}

fn check_offsets(rows: usize, n: usize, offsets: &[usize]) -> Result<()> {
    if offsets.len() != rows {
        return Err(Error::Shape(format!(
            "{} causal offsets for {rows} query rows",
            offsets.len()
        )));
    }
    if let Some(&o) = offsets.iter().find(|&&o| o > n) {
        return Err(Error::Shape(format!("causal offset {o} exceeds row length {n}")));
    }
    Ok(())
}

/// `offsets[i] = i + 1`: query `i` sees keys `0..=i`.
pub fn causal_offsets_square(rows: usize) -> Vec<usize> {
    (1..=rows).collect()
}

/// Splits each query's positions into top-`k` and the rest by exact score.
///
/// Positions at or beyond a row's causal offset are treated as `-∞` before
/// the descending sort (ties go to the lower index), so they sink to the
/// bottom and are flagged invalid. Random subsampling of rows, top rank
/// positions and non-top rank positions draws from `rng` in that order.
pub fn partition_topk<T: Real>(
    true_attn: &DMatrix<T>,
    cfg: &RankingLossConfig,
    causal_offsets: &[usize],
    rng: &mut impl Rng,
) -> Result<PairPartition> {
    cfg.validate()?;
    let (rows, n) = true_attn.shape();
    if n < 2 {
        return Err(Error::Shape(format!("need at least 2 keys, got {n}")));
    }
    check_offsets(rows, n, causal_offsets)?;
    let k = cfg.top_count(n)?;

    let mut selected: Vec<usize> = (0..rows).collect();
    if let Some(m) = cfg.query_subsample {
        if m < rows {
            selected = rand::seq::index::sample(rng, rows, m).into_vec();
            selected.sort_unstable();
        }
    }
    let top_positions = subsample_positions(k, cfg.max_top, rng);
    let other_positions = subsample_positions(n - k, cfg.max_oth, rng);

    let mut queries = Vec::with_capacity(selected.len());
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for row in selected {
        let valid = causal_offsets[row];
        let score = |j: usize| {
            if j < valid {
                true_attn[(row, j)].to_f64()
            } else {
                f64::NEG_INFINITY
            }
        };
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        let top: Vec<usize> = top_positions.iter().map(|&p| order[p]).collect();
        let other: Vec<usize> = other_positions.iter().map(|&p| order[k + p]).collect();
        queries.push(QueryPairs {
            row,
            top_valid: top.iter().map(|&j| j < valid).collect(),
            other_valid: other.iter().map(|&j| j < valid).collect(),
            top,
            other,
        });
    }
    Ok(PairPartition {
        top_count: k,
        queries,
    })
}

fn subsample_positions(len: usize, limit: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..len).collect();
    if let Some(limit) = limit {
        pos.shuffle(rng);
        pos.truncate(limit);
    }
    pos
}

/// `-ln σ(x)`, stable for large `|x|`.
#[inline]
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct RankingOutput<T: Real> {
    pub loss: f64,
    /// Fraction of valid pairs where the top score falls below the other.
    pub violation_rate: f64,
    pub valid_pairs: usize,
    pub grad: Option<DMatrix<T>>,
}

/// Evaluates the loss (and optionally `∂loss/∂draft`) on a fixed partition.
pub fn pair_loss<T: Real>(
    draft_attn: &DMatrix<T>,
    partition: &PairPartition,
    cfg: &RankingLossConfig,
    with_grad: bool,
) -> Result<RankingOutput<T>> {
    let pairs = partition.valid_pairs();
    if pairs == 0 {
        return Err(Error::EmptyPairs);
    }
    let (beta, alpha) = (cfg.beta, cfg.alpha);
    let scale = beta / pairs as f64;
    let n = draft_attn.ncols();
    let mut grad = with_grad.then(|| DMatrix::<T>::zeros(draft_attn.nrows(), n));
    let mut row_grad = vec![0.0f64; if with_grad { n } else { 0 }];
    let mut loss = 0.0f64;
    let mut violations = 0usize;
    let mut top_vals: Vec<(usize, f64)> = Vec::new();
    let mut oth_vals: Vec<(usize, f64)> = Vec::new();

    for q in &partition.queries {
        let row = q.row;
        if row >= draft_attn.nrows() {
            return Err(Error::Shape(format!("partition row {row} outside draft scores")));
        }
        top_vals.clear();
        oth_vals.clear();
        for (&j, _) in q.top.iter().zip(&q.top_valid).filter(|(_, &v)| v) {
            top_vals.push((j, draft_attn[(row, j)].to_f64()));
        }
        for (&j, _) in q.other.iter().zip(&q.other_valid).filter(|(_, &v)| v) {
            oth_vals.push((j, draft_attn[(row, j)].to_f64()));
        }
        if top_vals.is_empty() || oth_vals.is_empty() {
            continue;
        }
        for &(bj, b) in &top_vals {
            let mut b_grad = 0.0;
            for &(cj, c) in &oth_vals {
                let z = b - c;
                let x = beta * z - alpha;
                // one exp serves both -ln σ(x) and σ(-x)
                let e = (-x.abs()).exp();
                loss += (-x).max(0.0) + e.ln_1p();
                if z < 0.0 {
                    violations += 1;
                }
                if with_grad {
                    let s = if x > 0.0 { e / (1.0 + e) } else { 1.0 / (1.0 + e) };
                    let g = s * scale;
                    b_grad -= g;
                    row_grad[cj] += g;
                }
            }
            if with_grad {
                row_grad[bj] += b_grad;
            }
        }
        if let Some(grad) = grad.as_mut() {
            for (j, g) in row_grad.iter_mut().enumerate() {
                if *g != 0.0 {
                    grad[(row, j)] += lit::<T>(*g);
                    *g = 0.0;
                }
            }
        }
    }
    Ok(RankingOutput {
        loss: loss / pairs as f64,
        violation_rate: violations as f64 / pairs as f64,
        valid_pairs: pairs,
        grad,
    })
}

fn check_pair_shapes<T: Real>(draft: &DMatrix<T>, truth: &DMatrix<T>) -> Result<()> {
    if draft.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "draft scores {:?} vs true scores {:?}",
            draft.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// Loss, violation rate and gradient in one pass. `seed` drives the
/// subsampling choices of [`partition_topk`].
pub fn ranking_loss_with_grad<T: Real>(
    draft_attn: &DMatrix<T>,
    true_attn: &DMatrix<T>,
    causal_offsets: &[usize],
    cfg: &RankingLossConfig,
    seed: u64,
) -> Result<RankingOutput<T>> {
    check_pair_shapes(draft_attn, true_attn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partition = partition_topk(true_attn, cfg, causal_offsets, &mut rng)?;
    pair_loss(draft_attn, &partition, cfg, true)
}

/// Returns `(loss, violation_rate)`.
pub fn ranking_loss<T: Real>(
    draft_attn: &DMatrix<T>,
    true_attn: &DMatrix<T>,
    causal_offsets: &[usize],
    cfg: &RankingLossConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    check_pair_shapes(draft_attn, true_attn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partition = partition_topk(true_attn, cfg, causal_offsets, &mut rng)?;
    let out = pair_loss(draft_attn, &partition, cfg, false)?;
    Ok((out.loss, out.violation_rate))
}

pub fn ranking_loss_grad<T: Real>(
    draft_attn: &DMatrix<T>,
    true_attn: &DMatrix<T>,
    causal_offsets: &[usize],
    cfg: &RankingLossConfig,
    seed: u64,
) -> Result<DMatrix<T>> {
    Ok(ranking_loss_with_grad(draft_attn, true_attn, causal_offsets, cfg, seed)?
        .grad
        .expect("gradient requested"))
}

/// Mean squared error over causally valid entries, with its gradient.
pub fn reconstruction_loss_with_grad<T: Real>(
    draft_attn: &DMatrix<T>,
    true_attn: &DMatrix<T>,
    causal_offsets: &[usize],
) -> Result<(f64, DMatrix<T>)> {
    check_pair_shapes(draft_attn, true_attn)?;
    let (rows, n) = draft_attn.shape();
    check_offsets(rows, n, causal_offsets)?;
    let count: usize = causal_offsets.iter().sum();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut grad = DMatrix::<T>::zeros(rows, n);
    let mut sum = 0.0f64;
    for (i, &valid) in causal_offsets.iter().enumerate() {
        for j in 0..valid {
            let diff = draft_attn[(i, j)].to_f64() - true_attn[(i, j)].to_f64();
            sum += diff * diff;
            grad[(i, j)] = lit(2.0 * diff / count as f64);
        }
    }
    Ok((sum / count as f64, grad))
}

pub fn reconstruction_loss<T: Real>(
    draft_attn: &DMatrix<T>,
    true_attn: &DMatrix<T>,
    causal_offsets: &[usize],
) -> Result<f64> {
    Ok(reconstruction_loss_with_grad(draft_attn, true_attn, causal_offsets)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn cfg(beta: f64, alpha: f64, maskout: f64) -> RankingLossConfig {
        RankingLossConfig {
            beta,
            alpha,
            maskout,
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = RankingLossConfig::default();
        assert_eq!((c.beta, c.alpha, c.maskout), (1.0, 3.0, 0.98));
        assert_eq!(c.top_count(2048).unwrap(), 40);
        assert_eq!(c.top_count(50).unwrap(), 1);
        assert!(c.top_count(49).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(cfg(1.0, 0.0, 1.0).validate().is_err());
        assert!(cfg(1.0, 0.0, 0.0).validate().is_err());
        assert!(cfg(0.0, 0.0, 0.5).validate().is_err());
        let mut c = cfg(1.0, 0.0, 0.5);
        c.max_top = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn partition_picks_largest_unmasked() {
        let truth = DMatrix::from_row_slice(1, 4, &[0.1, 5.0, 3.0, 9.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = partition_topk(&truth, &cfg(1.0, 0.0, 0.5), &[4], &mut rng).unwrap();
        assert_eq!(p.top_count, 2);
        assert_eq!(p.queries[0].top, vec![3, 1]);
        assert_eq!(p.queries[0].other, vec![2, 0]);
        // with only three visible keys, index 3 is masked and sinks
        let p = partition_topk(&truth, &cfg(1.0, 0.0, 0.5), &[3], &mut rng).unwrap();
        assert_eq!(p.queries[0].top, vec![1, 2]);
        assert_eq!(p.queries[0].other, vec![0, 3]);
        assert_eq!(p.queries[0].other_valid, vec![true, false]);
        assert_eq!(p.valid_pairs(), 2);
    }

    #[test]
    fn fully_masked_query_contributes_nothing() {
        let truth = randn(3, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = partition_topk(&truth, &cfg(1.0, 0.0, 0.5), &[0, 8, 8], &mut rng).unwrap();
        assert_eq!(p.queries[0].valid_pairs(), 0);
        assert_eq!(p.valid_pairs(), 2 * 16);
        let out = pair_loss(&truth, &p, &cfg(1.0, 0.0, 0.5), true).unwrap();
        let g = out.grad.unwrap();
        assert!(g.row(0).iter().all(|&v| v == 0.0));
        let p = partition_topk(&truth, &cfg(1.0, 0.0, 0.5), &[0, 0, 0], &mut rng).unwrap();
        assert!(matches!(pair_loss(&truth, &p, &cfg(1.0, 0.0, 0.5), false), Err(Error::EmptyPairs)));
    }

    #[test]
    fn single_pair_per_query() {
        let truth = randn(5, 20, 2);
        let mut c = cfg(1.0, 3.0, 0.5);
        c.max_top = Some(1);
        c.max_oth = Some(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = partition_topk(&truth, &c, &[20; 5], &mut rng).unwrap();
        assert!(p.queries.iter().all(|q| q.valid_pairs() == 1));
    }

    #[test]
    fn query_subsample_is_seeded() {
        let truth = randn(10, 20, 3);
        let mut c = cfg(1.0, 3.0, 0.5);
        c.query_subsample = Some(4);
        let rows = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            partition_topk(&truth, &c, &[20; 10], &mut rng)
                .unwrap()
                .queries
                .iter()
                .map(|q| q.row)
                .collect::<Vec<_>>()
        };
        assert_eq!(rows(5).len(), 4);
        assert_eq!(rows(5), rows(5));
    }

    #[test]
    fn single_pair_value() {
        // B = [2], C = [0]
        let draft = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let truth = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let (loss, viol) = ranking_loss(&draft, &truth, &[2], &cfg(1.0, 0.0, 0.5), 0).unwrap();
        let expected = -(1.0 / (1.0 + (-2.0f64).exp())).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.126928).abs() < 1e-6);
        assert_eq!(viol, 0.0);
    }

    #[test]
    fn equal_scores_give_ln2() {
        let draft = DMatrix::from_element(2, 6, 0.7);
        let truth = randn(2, 6, 4);
        let (loss, viol) = ranking_loss(&draft, &truth, &[6, 6], &cfg(1.0, 0.0, 0.5), 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(viol, 0.0);
    }

    #[test]
    fn shift_invariance() {
        let draft = randn(4, 16, 5);
        let truth = randn(4, 16, 6);
        let c = cfg(1.0, 3.0, 0.75);
        let base = ranking_loss(&draft, &truth, &[16; 4], &c, 1).unwrap();
        for shift in [-3.0, 0.25, 128.0] {
            let moved = draft.add_scalar(shift);
            let shifted = ranking_loss(&moved, &truth, &[16; 4], &c, 1).unwrap();
            assert!((base.0 - shifted.0).abs() < 1e-12);
            assert_eq!(base.1, shifted.1);
        }
    }

    #[test]
    fn gradient_sums_to_zero_and_matches_differences() {
        let draft = randn(4, 16, 7);
        let truth = randn(4, 16, 8);
        let offsets = [16, 9, 16, 3];
        let c = cfg(1.3, 0.7, 0.75);
        let g = ranking_loss_grad(&draft, &truth, &offsets, &c, 2).unwrap();
        assert!(g.sum().abs() < 1e-12);
        for i in 0..4 {
            for j in offsets[i]..16 {
                assert_eq!(g[(i, j)], 0.0);
            }
        }
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..16 {
                let mut plus = draft.clone();
                plus[(i, j)] += h;
                let mut minus = draft.clone();
                minus[(i, j)] -= h;
                let fp = ranking_loss(&plus, &truth, &offsets, &c, 2).unwrap().0;
                let fm = ranking_loss(&minus, &truth, &offsets, &c, 2).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1e-3);
                assert!(err < 1e-6, "({i},{j}) fd={fd} an={}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn reconstruction_examples() {
        let truth = randn(3, 5, 9);
        assert_eq!(reconstruction_loss(&truth, &truth, &[5, 5, 5]).unwrap(), 0.0);
        let shifted = truth.add_scalar(1.0);
        assert!((reconstruction_loss(&shifted, &truth, &[5, 2, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            reconstruction_loss(&shifted, &truth, &[0, 0, 0]),
            Err(Error::EmptyMask)
        ));

        let draft = randn(3, 5, 10);
        let offsets = [5, 3, 1];
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..3 {
            for j in 0..offsets[i] {
                sum += (draft[(i, j)] - truth[(i, j)]).powi(2);
                count += 1.0;
            }
        }
        let got = reconstruction_loss(&draft, &truth, &offsets).unwrap();
        assert!((got - sum / count).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = randn(2, 4, 1);
        let b = randn(2, 5, 1);
        assert!(matches!(ranking_loss(&a, &b, &[4, 4], &cfg(1.0, 0.0, 0.5), 0), Err(Error::Shape(_))));
        assert!(matches!(ranking_loss(&a, &a, &[4], &cfg(1.0, 0.0, 0.5), 0), Err(Error::Shape(_))));
        assert!(matches!(ranking_loss(&a, &a, &[4, 5], &cfg(1.0, 0.0, 0.5), 0), Err(Error::Shape(_))));
    }
}
