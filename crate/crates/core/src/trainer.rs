//! Training loop for hashers: ranking (or reconstruction) loss on soft
//! codes, hand-derived backward pass, global-norm clipping and AdamW with
//! linear warmup plus cosine annealing.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention_eval::{mean_iou, AttentionInstance, Retriever};
use crate::error::{Error, Result};
use crate::hashers::{
    DownProjCache, DownProjEstimator, LinearCache, LinearHasher, MlpCache, MlpHasher, ParamGrads,
};
use crate::ranking_loss::{
    pair_loss, partition_topk, reconstruction_loss_with_grad, RankingLossConfig,
};
use crate::synthkv::{ConeSpec, QkDump};
use crate::{lit, Real};

/// A parameterized encoder whose training-time outputs are compared by
/// inner product to form draft attention scores.
pub trait Trainable<T: Real> {
    type Cache;

    fn encode_train(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, Self::Cache)>;
    fn encode_backward(&self, cache: &Self::Cache, grad_out: &DMatrix<T>) -> ParamGrads<T>;
    fn params(&self) -> Vec<&DMatrix<T>>;
    fn params_mut(&mut self) -> Vec<&mut DMatrix<T>>;
    /// Which parameter blocks receive decoupled weight decay.
    fn decay_mask(&self) -> Vec<bool>;
    fn input_dim(&self) -> usize;
}

impl<T: Real> Trainable<T> for LinearHasher<T> {
    type Cache = LinearCache<T>;

    fn encode_train(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, Self::Cache)> {
        self.forward_train(x)
    }
    fn encode_backward(&self, cache: &Self::Cache, grad_out: &DMatrix<T>) -> ParamGrads<T> {
        self.backward(cache, grad_out)
    }
    fn params(&self) -> Vec<&DMatrix<T>> {
        LinearHasher::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        LinearHasher::params_mut(self)
    }
    fn decay_mask(&self) -> Vec<bool> {
        vec![true]
    }
    fn input_dim(&self) -> usize {
        LinearHasher::input_dim(self)
    }
}

impl<T: Real> Trainable<T> for MlpHasher<T> {
    type Cache = MlpCache<T>;

    fn encode_train(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, Self::Cache)> {
        self.forward_train(x)
    }
    fn encode_backward(&self, cache: &Self::Cache, grad_out: &DMatrix<T>) -> ParamGrads<T> {
        self.backward(cache, grad_out)
    }
    fn params(&self) -> Vec<&DMatrix<T>> {
        MlpHasher::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        MlpHasher::params_mut(self)
    }
    fn decay_mask(&self) -> Vec<bool> {
        // W1, b1, W2
        vec![true, false, true]
    }
    fn input_dim(&self) -> usize {
        MlpHasher::input_dim(self)
    }
}

impl<T: Real> Trainable<T> for DownProjEstimator<T> {
    type Cache = DownProjCache<T>;

    fn encode_train(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, Self::Cache)> {
        self.forward_train(x)
    }
    fn encode_backward(&self, cache: &Self::Cache, grad_out: &DMatrix<T>) -> ParamGrads<T> {
        self.backward(cache, grad_out)
    }
    fn params(&self) -> Vec<&DMatrix<T>> {
        DownProjEstimator::params(self)
    }
    fn params_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        DownProjEstimator::params_mut(self)
    }
    fn decay_mask(&self) -> Vec<bool> {
        vec![true]
    }
    fn input_dim(&self) -> usize {
        DownProjEstimator::input_dim(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ranking,
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_iters: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm limit; zero disables clipping.
    pub grad_clip: f64,
    /// Sequences per optimizer step.
    pub batch: usize,
    /// Tokens per training sequence.
    pub seq_len: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_iters: 8192,
            max_lr: 1e-3,
            min_lr: 0.0,
            warmup_iters: 81,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch: 1,
            seq_len: 2048,
            loss: LossKind::Ranking,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.num_iters {
            return Err(Error::Config(format!(
                "warmup_iters {} exceeds num_iters {}",
                self.warmup_iters, self.num_iters
            )));
        }
        if !(self.max_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.max_lr.max(self.min_lr)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("eps must be positive, decay and clip non-negative".into()));
        }
        if self.batch == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch must be positive and seq_len at least 2".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `max_lr`, then cosine decay to `min_lr`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.max_lr * iter as f64 / cfg.warmup_iters as f64;
    }
    let span = cfg.num_iters.saturating_sub(cfg.warmup_iters);
    if span == 0 {
        return cfg.max_lr;
    }
    let progress = ((iter - cfg.warmup_iters) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<DMatrix<T>>,
    pub v: Vec<DMatrix<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&DMatrix<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

pub fn global_norm<T: Real>(grads: &[DMatrix<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [DMatrix<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s: T = lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// One AdamW update with bias correction. Gradients are clipped to
/// `cfg.grad_clip` first; decay applies only where `decay` is set.
/// Returns the pre-clip gradient norm.
pub fn adamw_step<T: Real>(
    mut params: Vec<&mut DMatrix<T>>,
    grads: &mut [DMatrix<T>],
    decay: &[bool],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != decay.len() || params.len() != state.m.len() {
        return Err(Error::Shape("parameter, gradient and state block counts differ".into()));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
    }
    if grads.iter().any(|g| !crate::all_finite(g)) {
        return Err(Error::NonFinite("gradient"));
    }
    let norm = clip_grad_norm(grads, cfg.grad_clip);

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let step_size: T = lit(lr / bc1);
    let bc2_sqrt: T = lit(bc2.sqrt());
    let eps: T = lit(cfg.adam_eps);
    let (b1t, b2t): (T, T) = (lit(b1), lit(b2));
    let (one_b1, one_b2): (T, T) = (lit(1.0 - b1), lit(1.0 - b2));
    let shrink: T = lit(1.0 - lr * cfg.weight_decay);

    for (i, p) in params.iter_mut().enumerate() {
        if decay[i] && cfg.weight_decay > 0.0 {
            **p *= shrink;
        }
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for ((pv, mv), (vv, gv)) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut().zip(g.iter()))
        {
            *mv = b1t * *mv + one_b1 * *gv;
            *vv = b2t * *vv + one_b2 * *gv * *gv;
            *pv -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(norm)
}

/// One training example: selected query rows against a key sequence.
#[derive(Debug, Clone)]
pub struct Sample<T: Real> {
    pub queries: DMatrix<T>,
    pub keys: DMatrix<T>,
    /// Visible key count for each query row.
    pub offsets: Vec<usize>,
}

impl<T: Real> Sample<T> {
    pub fn new(queries: DMatrix<T>, keys: DMatrix<T>, offsets: Vec<usize>) -> Result<Self> {
        if queries.ncols() != keys.ncols() {
            return Err(Error::Shape("query and key widths differ".into()));
        }
        if offsets.len() != queries.nrows() || offsets.iter().any(|&o| o > keys.nrows()) {
            return Err(Error::Shape("invalid causal offsets for sample".into()));
        }
        Ok(Self {
            queries,
            keys,
            offsets,
        })
    }

    /// Exact logits `Q Kᵀ / sqrt(d)`.
    pub fn true_logits(&self) -> DMatrix<T> {
        let scale: T = lit(1.0 / (self.queries.ncols() as f64).sqrt());
        (&self.queries * self.keys.transpose()) * scale
    }

    pub fn cast<U: Real>(&self) -> Sample<U> {
        Sample {
            queries: self.queries.map(|v| lit(v.to_f64())),
            keys: self.keys.map(|v| lit(v.to_f64())),
            offsets: self.offsets.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T: Real> {
    pub loss: f64,
    pub violation_rate: f64,
    pub grads: Option<ParamGrads<T>>,
}

/// Forward (and optionally backward) pass of the end-to-end objective:
/// soft codes of queries and keys, their inner products as draft scores,
/// then the selected loss against the exact logits. `seed` fixes the pair
/// subsampling so repeated calls see the same partition.
pub fn sample_loss<T: Real, M: Trainable<T>>(
    model: &M,
    sample: &Sample<T>,
    loss_cfg: &RankingLossConfig,
    kind: LossKind,
    seed: u64,
    with_grad: bool,
) -> Result<StepOutput<T>> {
    if sample.queries.ncols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "sample width {} vs model input {}",
            sample.queries.ncols(),
            model.input_dim()
        )));
    }
    let truth = sample.true_logits();
    let (eq, cq) = model.encode_train(&sample.queries)?;
    let (ek, ck) = model.encode_train(&sample.keys)?;
    let draft = &eq * ek.transpose();

    let mut cfg = loss_cfg.clone();
    cfg.query_subsample = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partition = partition_topk(&truth, &cfg, &sample.offsets, &mut rng)?;
    let ranked = pair_loss(&draft, &partition, &cfg, with_grad && kind == LossKind::Ranking)?;

    let (loss, grad_draft) = match kind {
        LossKind::Ranking => (ranked.loss, ranked.grad),
        LossKind::Reconstruction => {
            let (loss, g) = reconstruction_loss_with_grad(&draft, &truth, &sample.offsets)?;
            (loss, with_grad.then_some(g))
        }
    };

    let grads = grad_draft.map(|g| {
        let d_eq = &g * &ek;
        let d_ek = g.transpose() * &eq;
        let mut grads = model.encode_backward(&cq, &d_eq);
        for (acc, extra) in grads.iter_mut().zip(model.encode_backward(&ck, &d_ek)) {
            *acc += extra;
        }
        grads
    });
    Ok(StepOutput {
        loss,
        violation_rate: ranked.violation_rate,
        grads,
    })
}

/// Worst relative disagreement between the analytic gradient and central
/// finite differences of the loss over every parameter entry. Entries where
/// both gradients fall below `FD_ABS_FLOOR` are compared against that floor.
pub fn finite_diff_check<M: Trainable<f64> + Clone>(
    model: &M,
    sample: &Sample<f64>,
    loss_cfg: &RankingLossConfig,
    kind: LossKind,
    seed: u64,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let analytic = sample_loss(model, sample, loss_cfg, kind, seed, true)?
        .grads
        .expect("gradient requested");
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (b, block) in analytic.iter().enumerate() {
        for idx in 0..block.len() {
            let orig = probe.params()[b][idx];
            probe.params_mut()[b][idx] = orig + step;
            let plus = sample_loss(&probe, sample, loss_cfg, kind, seed, false)?.loss;
            probe.params_mut()[b][idx] = orig - step;
            let minus = sample_loss(&probe, sample, loss_cfg, kind, seed, false)?.loss;
            probe.params_mut()[b][idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let exact = block[idx];
            let denom = numeric.abs().max(exact.abs()).max(FD_ABS_FLOOR);
            worst = worst.max((numeric - exact).abs() / denom);
        }
    }
    Ok(worst)
}

/// Gradient magnitude below which finite differences are dominated by
/// floating-point cancellation in the loss.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Where training sequences come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// Token-aligned dump (`n_queries == n_keys`); each step draws a random
    /// window of `seq_len` tokens.
    Dump(&'a QkDump),
    /// A fresh cone sample of `seq_len` tokens per step.
    Synthetic(&'a ConeSpec),
}

impl TrainData<'_> {
    fn dim(&self) -> usize {
        match self {
            TrainData::Dump(d) => d.dim(),
            TrainData::Synthetic(s) => s.dim,
        }
    }

    fn check(&self, cfg: &TrainConfig) -> Result<usize> {
        match self {
            TrainData::Dump(d) => {
                if d.n_queries() != d.n_keys() {
                    return Err(Error::Shape(format!(
                        "training dump must be token-aligned, got {} queries and {} keys",
                        d.n_queries(),
                        d.n_keys()
                    )));
                }
                if d.n_keys() < 2 {
                    return Err(Error::Config("training dump is empty".into()));
                }
                Ok(cfg.seq_len.min(d.n_keys()))
            }
            TrainData::Synthetic(s) => {
                s.validate()?;
                Ok(cfg.seq_len)
            }
        }
    }

    fn sequence(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f32>, DMatrix<f32>)> {
        match self {
            TrainData::Dump(d) => {
                let start = rng.random_range(0..=d.n_keys() - len);
                Ok((
                    d.queries.rows(start, len).into_owned(),
                    d.keys.rows(start, len).into_owned(),
                ))
            }
            TrainData::Synthetic(spec) => {
                let dump = QkDump::generate(spec, len, len, rng.random())?;
                Ok((dump.queries, dump.keys))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub violation_rate: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
    pub wall_clock_secs: f64,
    pub final_iou: Option<f64>,
    pub seed: u64,
}

impl TrainReport {
    /// Mean loss over records `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len().max(1) as f64
    }

    /// One JSON object per line: `{"iter":..,"loss":..,"violation_rate":..,"lr":..}`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{{\"iter\":{},\"loss\":{:e},\"violation_rate\":{:e},\"lr\":{:e},\"grad_norm\":{:e}}}",
                r.iter, r.loss, r.violation_rate, r.lr, r.grad_norm
            );
        }
        s
    }
}

/// Picks the query rows optimized in one step: rows that can see more keys
/// than the top-set size, so every chosen row yields pairs.
fn select_queries(len: usize, top: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let eligible = len.saturating_sub(top);
    if eligible == 0 {
        return Err(Error::Config(format!(
            "sequence of {len} tokens has no query seeing more than {top} keys"
        )));
    }
    let m = limit.unwrap_or(eligible).min(eligible);
    let mut rows: Vec<usize> = rand::seq::index::sample(rng, eligible, m)
        .into_iter()
        .map(|i| i + top)
        .collect();
    rows.sort_unstable();
    Ok(rows)
}

pub fn train_hasher<M>(
    model: M,
    data: TrainData<'_>,
    loss_cfg: &RankingLossConfig,
    cfg: &TrainConfig,
    holdout: Option<&AttentionInstance>,
) -> Result<(M, TrainReport)>
where
    M: Trainable<f32> + Retriever,
{
    train_hasher_with(model, data, loss_cfg, cfg, holdout, |_| {})
}

/// [`train_hasher`] with a callback invoked after every iteration.
pub fn train_hasher_with<M>(
    mut model: M,
    data: TrainData<'_>,
    loss_cfg: &RankingLossConfig,
    cfg: &TrainConfig,
    holdout: Option<&AttentionInstance>,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<(M, TrainReport)>
where
    M: Trainable<f32> + Retriever,
{
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "data dimension {} vs hasher input {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let len = data.check(cfg)?;
    let top = loss_cfg.top_count(len)?;
    let decay = model.decay_mask();
    let mut state = AdamState::new(&model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.num_iters);

    for iter in 0..cfg.num_iters {
        let mut grads: Option<ParamGrads<f32>> = None;
        let (mut loss, mut violation) = (0.0, 0.0);
        for _ in 0..cfg.batch {
            let (queries, keys) = data.sequence(len, &mut rng)?;
            let rows = select_queries(len, top, loss_cfg.query_subsample, &mut rng)?;
            let q = DMatrix::from_fn(rows.len(), queries.ncols(), |i, j| queries[(rows[i], j)]);
            let offsets = rows.iter().map(|&r| r + 1).collect();
            let sample = Sample::new(q, keys, offsets)?;
            let out = sample_loss(&model, &sample, loss_cfg, cfg.loss, rng.random(), true)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    iter,
                    detail: format!("loss {} (violation rate {})", out.loss, out.violation_rate),
                });
            }
            loss += out.loss / cfg.batch as f64;
            violation += out.violation_rate / cfg.batch as f64;
            let g = out.grads.expect("gradient requested");
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            }
        }
        let mut grads = grads.expect("batch is non-empty");
        if cfg.batch > 1 {
            let inv = 1.0 / cfg.batch as f32;
            grads.iter_mut().for_each(|g| *g *= inv);
        }
        let lr = lr_at(iter, cfg);
        let grad_norm = adamw_step(model.params_mut(), &mut grads, &decay, &mut state, lr, cfg)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    iter,
                    detail: format!("non-finite {what}"),
                },
                other => other,
            })?;
        let record = IterRecord {
            iter,
            loss,
            violation_rate: violation,
            lr,
            grad_norm,
        };
        on_iter(&record);
        records.push(record);
    }

    let final_iou = match holdout {
        Some(inst) => {
            let k = loss_cfg.top_count(inst.n_keys())?;
            Some(mean_iou(inst, &model, k)?)
        }
        None => None,
    };
    Ok((
        model,
        TrainReport {
            records,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            final_iou,
            seed: cfg.seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(81, &cfg) - 1e-3).abs() < 1e-18);
        assert!((lr_at(40, &cfg) - 1e-3 * 40.0 / 81.0).abs() < 1e-18);
        let mid = (81 + 8192) / 2;
        // (81 + 8192) is odd, so evaluate the closed form at the exact point
        let progress = (mid - 81) as f64 / (8192 - 81) as f64;
        let expected = 0.5e-3 * (1.0 + (std::f64::consts::PI * progress).cos());
        assert!((lr_at(mid, &cfg) - expected).abs() < 1e-15);
        let even = TrainConfig {
            num_iters: 181,
            warmup_iters: 81,
            min_lr: 2e-4,
            ..TrainConfig::default()
        };
        assert!((lr_at(131, &even) - (1e-3 + 2e-4) / 2.0).abs() < 1e-15);
        assert!(lr_at(8191, &cfg) < 1e-9);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_iters: 10,
            num_iters: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn blocks(vals: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_row_slice(1, vals.len(), vals)]
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = blocks(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut state = AdamState::new(&p.iter().collect::<Vec<_>>());
        let mut g = blocks(&[0.0; 3]);
        adamw_step(p.iter_mut().collect(), &mut g, &[true], &mut state, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let mut p = blocks(&[0.5, 0.5, 0.5]);
        let mut state = AdamState::new(&p.iter().collect::<Vec<_>>());
        let mut g = blocks(&[0.3, -2.0, 1e-3]);
        adamw_step(p.iter_mut().collect(), &mut g, &[true], &mut state, 0.01, &cfg).unwrap();
        let want = [0.49, 0.51, 0.49];
        for (got, w) in p[0].iter().zip(want) {
            // m̂ / sqrt(v̂) = sign(g) up to eps / |g|
            assert!((got - w).abs() < 1e-7, "{got} vs {w}");
        }
    }

    #[test]
    fn decay_skips_unflagged_blocks() {
        let cfg = TrainConfig::default();
        let mut p = vec![DMatrix::from_element(1, 2, 2.0f64), DMatrix::from_element(1, 2, 2.0)];
        let mut state = AdamState::new(&p.iter().collect::<Vec<_>>());
        let mut g = vec![DMatrix::zeros(1, 2), DMatrix::zeros(1, 2)];
        adamw_step(p.iter_mut().collect(), &mut g, &[true, false], &mut state, 0.5, &cfg).unwrap();
        assert!((p[0][(0, 0)] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
        assert_eq!(p[1][(0, 0)], 2.0);
    }

    #[test]
    fn clipping_scales_to_limit() {
        let mut g = blocks(&[6.0, 8.0]);
        let norm = clip_grad_norm(&mut g, 1.0);
        assert_eq!(norm, 10.0);
        assert!((g[0][(0, 0)] - 0.6).abs() < 1e-15);
        assert!((g[0][(0, 1)] - 0.8).abs() < 1e-15);
        let mut small = blocks(&[0.1, 0.2]);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, blocks(&[0.1, 0.2]));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let cfg = TrainConfig::default();
        let mut p = blocks(&[1.0]);
        let mut state = AdamState::new(&p.iter().collect::<Vec<_>>());
        let mut g = blocks(&[f64::NAN]);
        let r = adamw_step(p.iter_mut().collect(), &mut g, &[true], &mut state, 1e-3, &cfg);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p, blocks(&[1.0]));
    }

    fn random_sample(d: usize, n: usize, m: usize, seed: u64) -> Sample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal));
        let queries = DMatrix::from_fn(m, d, |_, _| rng.sample(StandardNormal));
        let offsets = (0..m).map(|i| n - i * 3).collect();
        Sample::new(queries, keys, offsets).unwrap()
    }

    fn fd_cfg() -> RankingLossConfig {
        RankingLossConfig {
            maskout: 0.75,
            ..RankingLossConfig::default()
        }
    }

    #[test]
    fn zero_hasher_gradients_agree() {
        let model = MlpHasher::<f64>::zeros(8, 8, 8, 64.0).unwrap();
        let sample = random_sample(8, 32, 4, 1);
        let err = finite_diff_check(&model, &sample, &fd_cfg(), LossKind::Ranking, 3, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn random_hasher_gradients_agree() {
        let model = MlpHasher::<f64>::random(16, 16, 16, 64.0, 4).unwrap();
        let sample = random_sample(16, 32, 4, 5);
        let err = finite_diff_check(&model, &sample, &fd_cfg(), LossKind::Ranking, 6, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gradient_agreement_across_gamma() {
        let sample = random_sample(8, 32, 4, 7);
        for gamma in [16.0, 32.0, 64.0] {
            let model = MlpHasher::<f64>::random(8, 8, 8, gamma, 8).unwrap();
            let err = finite_diff_check(&model, &sample, &fd_cfg(), LossKind::Ranking, 9, 1e-5).unwrap();
            assert!(err < 1e-5, "gamma {gamma}: {err}");
        }
    }

    #[test]
    fn linear_downproj_and_reconstruction_gradients_agree() {
        let sample = random_sample(8, 24, 3, 10);
        let lin = LinearHasher::<f64>::qr_init(8, 8, 4.0, 11).unwrap();
        let dp = DownProjEstimator::<f64>::random(8, 2, 12).unwrap();
        for kind in [LossKind::Ranking, LossKind::Reconstruction] {
            let e1 = finite_diff_check(&lin, &sample, &fd_cfg(), kind, 13, 1e-5).unwrap();
            let e2 = finite_diff_check(&dp, &sample, &fd_cfg(), kind, 13, 1e-5).unwrap();
            assert!(e1 < 1e-5 && e2 < 1e-5, "{kind:?}: {e1} {e2}");
        }
        let mlp = MlpHasher::<f64>::random(8, 8, 8, 16.0, 14).unwrap();
        let e = finite_diff_check(&mlp, &sample, &fd_cfg(), LossKind::Reconstruction, 13, 1e-5).unwrap();
        assert!(e < 1e-5, "{e}");
    }

    fn toy_spec() -> ConeSpec {
        ConeSpec::new(16, 3).unwrap()
    }

    fn quick_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            num_iters: iters,
            warmup_iters: iters / 10,
            seq_len: 128,
            seed: 21,
            ..TrainConfig::default()
        }
    }

    fn quick_loss() -> RankingLossConfig {
        RankingLossConfig {
            maskout: 0.9,
            query_subsample: Some(8),
            ..RankingLossConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let spec = toy_spec();
        let model = MlpHasher::<f32>::random(16, 16, 32, 64.0, 1).unwrap();
        let cfg = TrainConfig {
            max_lr: 0.0,
            ..quick_cfg(5)
        };
        let (trained, report) =
            train_hasher(model.clone(), TrainData::Synthetic(&spec), &quick_loss(), &cfg, None).unwrap();
        assert_eq!(trained, model);
        assert_eq!(report.records.len(), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = toy_spec();
        let dump = QkDump::generate(&spec, 256, 256, 2).unwrap();
        let run = || {
            let model = MlpHasher::<f32>::random(16, 16, 32, 64.0, 1).unwrap();
            train_hasher(model, TrainData::Dump(&dump), &quick_loss(), &quick_cfg(20), None).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra.records, rb.records);
        assert_eq!(ra.to_jsonl(), rb.to_jsonl());
        assert_eq!(ra.to_jsonl().lines().count(), 20);
    }

    #[test]
    fn rejects_mismatched_data() {
        let spec = toy_spec();
        let model = MlpHasher::<f32>::random(8, 8, 32, 64.0, 1).unwrap();
        let r = train_hasher(model, TrainData::Synthetic(&spec), &quick_loss(), &quick_cfg(1), None);
        assert!(matches!(r, Err(Error::Shape(_))));
        let dump = QkDump::generate(&spec, 10, 20, 1).unwrap();
        let model = MlpHasher::<f32>::random(16, 8, 32, 64.0, 1).unwrap();
        let r = train_hasher(model, TrainData::Dump(&dump), &quick_loss(), &quick_cfg(1), None);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn clipped_norm_never_exceeds_limit() {
        let spec = toy_spec();
        let model = MlpHasher::<f32>::random(16, 16, 32, 64.0, 1).unwrap();
        let cfg = TrainConfig {
            grad_clip: 0.05,
            ..quick_cfg(10)
        };
        let mut seen = Vec::new();
        train_hasher_with(model, TrainData::Synthetic(&spec), &quick_loss(), &cfg, None, |r| {
            seen.push(r.grad_norm)
        })
        .unwrap();
        assert!(seen.iter().any(|&n| n > 0.05));
    }

    #[test]
    fn query_selection_respects_top_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows = select_queries(100, 10, Some(5), &mut rng).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|&r| r >= 10 && r < 100));
        assert!(select_queries(10, 10, None, &mut rng).is_err());
        assert_eq!(select_queries(12, 10, None, &mut rng).unwrap(), vec![10, 11]);
    }
}
