//! Reference attention, top-k retrieval pipelines and retrieval metrics.
//!
//! An [`AttentionInstance`] holds a query batch and a KV cache. Query `i`
//! sees cache rows `0..offsets[i]`; the last visible row is the query's own
//! token and is always kept by [`sparse_attention`].

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bitcodes::{nxor_scores, top_k_indices, CodeMatrix, HashCode};
use crate::error::{Error, Result};
use crate::hashers::{DownProjEstimator, LinearHasher, MlpHasher};
use crate::synthkv::QkDump;

/// Smallest budget produced by [`budget_from_rate`].
pub const MIN_BUDGET: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInstance {
    queries: DMatrix<f32>,
    keys: DMatrix<f32>,
    values: Option<DMatrix<f32>>,
    scale: f32,
    offsets: Vec<usize>,
}

impl AttentionInstance {
    pub fn new(
        queries: DMatrix<f32>,
        keys: DMatrix<f32>,
        values: Option<DMatrix<f32>>,
        offsets: Vec<usize>,
    ) -> Result<Self> {
        let n = keys.nrows();
        if n == 0 {
            return Err(Error::Shape("empty KV cache".into()));
        }
        if queries.ncols() != keys.ncols() {
            return Err(Error::Shape(format!(
                "queries have {} columns, keys {}",
                queries.ncols(),
                keys.ncols()
            )));
        }
        if let Some(v) = &values {
            if v.nrows() != n {
                return Err(Error::Shape(format!("{} value rows for {n} keys", v.nrows())));
            }
        }
        if offsets.len() != queries.nrows() {
            return Err(Error::Shape(format!(
                "{} offsets for {} queries",
                offsets.len(),
                queries.nrows()
            )));
        }
        if let Some(&o) = offsets.iter().find(|&&o| o == 0 || o > n) {
            return Err(Error::Shape(format!("causal offset {o} outside 1..={n}")));
        }
        let scale = 1.0 / (queries.ncols() as f32).sqrt();
        Ok(Self {
            queries,
            keys,
            values,
            scale,
            offsets,
        })
    }

    /// Every query sees the whole cache.
    pub fn decode(queries: DMatrix<f32>, keys: DMatrix<f32>, values: Option<DMatrix<f32>>) -> Result<Self> {
        let n = keys.nrows();
        let q = queries.nrows();
        Self::new(queries, keys, values, vec![n; q])
    }

    /// Token-aligned dump: query `i` sees keys `0..=i`. When the dump has
    /// fewer keys than queries, later queries see the whole cache.
    pub fn causal_from_dump(dump: &QkDump, values: Option<DMatrix<f32>>) -> Result<Self> {
        let n = dump.n_keys();
        let offsets = (0..dump.n_queries()).map(|i| (i + 1).min(n)).collect();
        Self::new(dump.queries.clone(), dump.keys.clone(), values, offsets)
    }

    pub fn queries(&self) -> &DMatrix<f32> {
        &self.queries
    }

    pub fn keys(&self) -> &DMatrix<f32> {
        &self.keys
    }

    pub fn values(&self) -> Option<&DMatrix<f32>> {
        self.values.as_ref()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn n_queries(&self) -> usize {
        self.queries.nrows()
    }

    pub fn n_keys(&self) -> usize {
        self.keys.nrows()
    }

    /// Scaled logits `Q Kᵀ / sqrt(d)`, including masked positions.
    pub fn logits(&self) -> DMatrix<f32> {
        (&self.queries * self.keys.transpose()) * self.scale
    }

    fn require_values(&self) -> Result<&DMatrix<f32>> {
        self.values
            .as_ref()
            .ok_or_else(|| Error::Config("instance has no value rows".into()))
    }
}

/// `k = max(floor(rate * n), 20)`, capped at `n`.
pub fn budget_from_rate(rate: f64, n: usize) -> usize {
    ((rate * n as f64).floor() as usize).max(MIN_BUDGET).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Oracle,
    Lsh,
    Mlp,
    DownProj,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Lsh => "lsh",
            Method::Mlp => "mlp",
            Method::DownProj => "downproj",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub method: Method,
    pub budget: usize,
    /// Per query, selected cache rows ordered by estimated score.
    pub sets: Vec<Vec<usize>>,
}

/// Anything that can pick `k` cache rows per query.
pub trait Retriever: Sync {
    fn method(&self) -> Method;
    fn retrieve(&self, inst: &AttentionInstance, k: usize) -> Result<RetrievalResult>;
}

/// Indices of the `k` largest values (ties to the lower index), ordered.
pub fn top_k_real(scores: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

fn row_prefix(m: &DMatrix<f32>, i: usize, len: usize) -> Vec<f32> {
    (0..len).map(|j| m[(i, j)]).collect()
}

fn real_topk(inst: &AttentionInstance, scores: &DMatrix<f32>, k: usize, method: Method) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::BudgetOutOfRange { k, n: inst.n_keys() });
    }
    let sets = (0..inst.n_queries())
        .into_par_iter()
        .map(|i| top_k_real(&row_prefix(scores, i, inst.offsets[i]), k))
        .collect();
    Ok(RetrievalResult {
        method,
        budget: k,
        sets,
    })
}

/// Top-k by exact logits within each query's causal range.
pub fn oracle_topk(inst: &AttentionInstance, k: usize) -> Result<RetrievalResult> {
    real_topk(inst, &inst.logits(), k, Method::Oracle)
}

/// Top-k by code agreement: keys are hashed once, then every query's
/// NXOR scores over its visible prefix are ranked.
pub fn hash_topk_codes(
    inst: &AttentionInstance,
    query_codes: &CodeMatrix,
    key_codes: &CodeMatrix,
    k: usize,
    method: Method,
) -> Result<RetrievalResult> {
    if query_codes.rows() != inst.n_queries() || key_codes.rows() != inst.n_keys() {
        return Err(Error::Shape("code rows do not match the instance".into()));
    }
    if k == 0 {
        return Err(Error::BudgetOutOfRange { k, n: inst.n_keys() });
    }
    let sets = (0..inst.n_queries())
        .into_par_iter()
        .map(|i| {
            let q = HashCode::from_words(query_codes.row_words(i).to_vec())?;
            let scores = nxor_scores(&q, key_codes)?.truncated(inst.offsets[i]);
            top_k_indices(&scores, k.min(scores.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalResult {
        method,
        budget: k,
        sets,
    })
}

pub struct OracleRetriever;

impl Retriever for OracleRetriever {
    fn method(&self) -> Method {
        Method::Oracle
    }

    fn retrieve(&self, inst: &AttentionInstance, k: usize) -> Result<RetrievalResult> {
        oracle_topk(inst, k)
    }
}

impl Retriever for LinearHasher<f32> {
    fn method(&self) -> Method {
        Method::Lsh
    }

    fn retrieve(&self, inst: &AttentionInstance, k: usize) -> Result<RetrievalResult> {
        let qc = self.hash(inst.queries())?;
        let kc = self.hash(inst.keys())?;
        hash_topk_codes(inst, &qc, &kc, k, Method::Lsh)
    }
}

impl Retriever for MlpHasher<f32> {
    fn method(&self) -> Method {
        Method::Mlp
    }

    fn retrieve(&self, inst: &AttentionInstance, k: usize) -> Result<RetrievalResult> {
        let qc = self.hash(inst.queries())?;
        let kc = self.hash(inst.keys())?;
        hash_topk_codes(inst, &qc, &kc, k, Method::Mlp)
    }
}

impl Retriever for DownProjEstimator<f32> {
    fn method(&self) -> Method {
        Method::DownProj
    }

    fn retrieve(&self, inst: &AttentionInstance, k: usize) -> Result<RetrievalResult> {
        let scores = self.scores(inst.queries(), inst.keys())?;
        real_topk(inst, &scores, k, Method::DownProj)
    }
}

/// Hash-based retrieval with any hasher implementing [`Retriever`].
pub fn hash_topk(inst: &AttentionInstance, hasher: &dyn Retriever, k: usize) -> Result<RetrievalResult> {
    hasher.retrieve(inst, k)
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets scoring 1.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Softmax-weighted sum of value rows over `subset` for query `i`.
fn attend(inst: &AttentionInstance, values: &DMatrix<f32>, i: usize, subset: &[usize]) -> Vec<f32> {
    let q = inst.queries.row(i);
    let logits: Vec<f32> = subset
        .iter()
        .map(|&j| q.dot(&inst.keys.row(j)) * inst.scale)
        .collect();
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f32 = weights.iter().sum();
    let mut out = vec![0.0f32; values.ncols()];
    for (&j, &w) in subset.iter().zip(&weights) {
        let p = w / total;
        for (o, &v) in out.iter_mut().zip(values.row(j).iter()) {
            *o += p * v;
        }
    }
    out
}

fn stack_rows(rows: Vec<Vec<f32>>, cols: usize) -> DMatrix<f32> {
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    DMatrix::from_row_slice(flat.len() / cols.max(1), cols, &flat)
}

/// Dense causal attention, `softmax(Q Kᵀ / sqrt(d)) V` with row-max
/// subtraction.
pub fn full_attention(inst: &AttentionInstance) -> Result<DMatrix<f32>> {
    let values = inst.require_values()?;
    let rows = (0..inst.n_queries())
        .into_par_iter()
        .map(|i| {
            let all: Vec<usize> = (0..inst.offsets[i]).collect();
            attend(inst, values, i, &all)
        })
        .collect();
    Ok(stack_rows(rows, values.ncols()))
}

/// Per-query index subsets actually attended: the retrieved rows plus the
/// query's own token, deduplicated.
pub fn attended_subsets(inst: &AttentionInstance, result: &RetrievalResult) -> Result<Vec<Vec<usize>>> {
    if result.sets.len() != inst.n_queries() {
        return Err(Error::Shape(format!(
            "{} retrieved sets for {} queries",
            result.sets.len(),
            inst.n_queries()
        )));
    }
    result
        .sets
        .iter()
        .zip(&inst.offsets)
        .map(|(set, &valid)| {
            if let Some(&j) = set.iter().find(|&&j| j >= valid) {
                return Err(Error::Shape(format!("index {j} outside causal range {valid}")));
            }
            let mut subset = set.clone();
            subset.push(valid - 1);
            subset.sort_unstable();
            subset.dedup();
            Ok(subset)
        })
        .collect()
}

/// Attention restricted to the retrieved rows (plus the query's own token).
pub fn sparse_attention(inst: &AttentionInstance, result: &RetrievalResult) -> Result<DMatrix<f32>> {
    let values = inst.require_values()?;
    let subsets = attended_subsets(inst, result)?;
    if subsets.iter().any(|s| s.is_empty()) {
        return Err(Error::Shape("empty attention subset".into()));
    }
    let rows = subsets
        .par_iter()
        .enumerate()
        .map(|(i, s)| attend(inst, values, i, s))
        .collect();
    Ok(stack_rows(rows, values.ncols()))
}

/// `‖a - b‖_F / ‖b‖_F`.
pub fn relative_l2(a: &DMatrix<f32>, b: &DMatrix<f32>) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (*x as f64, *y as f64);
        num += (x - y) * (x - y);
        den += y * y;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub label: String,
    pub method: Method,
    pub mean_iou: f64,
    pub p10_iou: f64,
    pub p50_iou: f64,
    pub p90_iou: f64,
    pub per_query_iou: Vec<f64>,
    /// Relative L2 error of sparse vs full attention output, when the
    /// instance carries values.
    pub output_rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub budget: usize,
    pub n_queries: usize,
    pub n_keys: usize,
    pub methods: Vec<MethodReport>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-query IoU of `result` against `reference`.
pub fn per_query_iou(result: &RetrievalResult, reference: &RetrievalResult) -> Vec<f64> {
    result
        .sets
        .iter()
        .zip(&reference.sets)
        .map(|(a, b)| iou(a, b))
        .collect()
}

/// Mean IoU of one retriever against the oracle at budget `k`.
pub fn mean_iou(inst: &AttentionInstance, retriever: &dyn Retriever, k: usize) -> Result<f64> {
    let oracle = oracle_topk(inst, k)?;
    let got = retriever.retrieve(inst, k)?;
    let ious = per_query_iou(&got, &oracle);
    Ok(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
}

/// Runs each labelled method at budget `k` and compares against the oracle.
pub fn evaluate(
    inst: &AttentionInstance,
    methods: &[(&str, &dyn Retriever)],
    k: usize,
) -> Result<EvalReport> {
    let oracle = oracle_topk(inst, k)?;
    let full = inst.values().map(|_| full_attention(inst)).transpose()?;
    let mut reports = Vec::with_capacity(methods.len());
    for &(label, retriever) in methods {
        let result = retriever.retrieve(inst, k)?;
        let per_query = per_query_iou(&result, &oracle);
        let mut sorted = per_query.clone();
        sorted.sort_by(f64::total_cmp);
        let output_rel_error = match &full {
            Some(full) => Some(relative_l2(&sparse_attention(inst, &result)?, full)),
            None => None,
        };
        reports.push(MethodReport {
            label: label.to_string(),
            method: result.method,
            mean_iou: per_query.iter().sum::<f64>() / per_query.len().max(1) as f64,
            p10_iou: percentile(&sorted, 0.1),
            p50_iou: percentile(&sorted, 0.5),
            p90_iou: percentile(&sorted, 0.9),
            per_query_iou: per_query,
            output_rel_error,
        });
    }
    Ok(EvalReport {
        budget: k,
        n_queries: inst.n_queries(),
        n_keys: inst.n_keys(),
        methods: reports,
    })
}

impl EvalReport {
    /// One `[method ...]` record per method, `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.methods {
            let _ = writeln!(s, "[method {}]", m.label);
            let _ = writeln!(s, "kind = {}", m.method.tag());
            let _ = writeln!(s, "budget = {}", self.budget);
            let _ = writeln!(s, "n_queries = {}", self.n_queries);
            let _ = writeln!(s, "n_keys = {}", self.n_keys);
            let _ = writeln!(s, "mean_iou = {:.6}", m.mean_iou);
            let _ = writeln!(s, "p10_iou = {:.6}", m.p10_iou);
            let _ = writeln!(s, "p50_iou = {:.6}", m.p50_iou);
            let _ = writeln!(s, "p90_iou = {:.6}", m.p90_iou);
            match m.output_rel_error {
                Some(e) => {
                    let _ = writeln!(s, "output_rel_error = {e:.6e}");
                }
                None => {
                    let _ = writeln!(s, "output_rel_error = n/a");
                }
            }
            s.push('\n');
        }
        s
    }

    /// `query,<label>,<label>...` rows of per-query IoU.
    pub fn per_query_csv(&self) -> String {
        let mut s = String::from("query");
        for m in &self.methods {
            s.push(',');
            s.push_str(&m.label);
        }
        s.push('\n');
        for q in 0..self.n_queries {
            let _ = write!(s, "{q}");
            for m in &self.methods {
                let _ = write!(s, ",{:.6}", m.per_query_iou[q]);
            }
            s.push('\n');
        }
        s
    }
}
