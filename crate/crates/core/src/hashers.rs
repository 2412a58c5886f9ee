//! Hashing functions mapping `d`-dimensional vectors to `L`-bit codes.
//!
//! All inputs are batches stored as `n × d` matrices, one vector per row.
//! Hard codes use `sign(z)` with the convention that `z >= 0` maps to bit 1.
//! During training the sign is replaced by the soft sign
//! `γz / (1 + γ|z|)`, which is what the `*_train` methods return alongside
//! the cached activations needed for the backward pass.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{self, Reader};
use crate::bitcodes::{pack_bits, CodeMatrix};
use crate::error::{Error, Result};
use crate::{all_finite, lit, Real};

pub const DEFAULT_GAMMA: f64 = 64.0;
pub const DEFAULT_DIM: usize = 128;
pub const DEFAULT_BITS: usize = 128;

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

/// `d/dz [z σ(z)] = σ(z) (1 + z (1 - σ(z)))`.
#[inline]
pub fn silu_grad<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

#[inline]
pub fn soft_sign_scalar<T: Real>(z: T, gamma: T) -> T {
    gamma * z / (T::one() + gamma * z.abs())
}

#[inline]
pub fn soft_sign_grad_scalar<T: Real>(z: T, gamma: T) -> T {
    let den = T::one() + gamma * z.abs();
    gamma / (den * den)
}

/// Elementwise soft sign; values lie strictly inside `(-1, 1)`.
pub fn soft_sign<T: Real>(z: &DMatrix<T>, gamma: T) -> Result<DMatrix<T>> {
    if gamma <= T::zero() {
        return Err(Error::Config("soft sign gamma must be positive".into()));
    }
    Ok(z.map(|v| soft_sign_scalar(v, gamma)))
}

/// Row-major bits of `z >= 0`.
pub fn sign_bits<T: Real>(z: &DMatrix<T>) -> Vec<bool> {
    let mut bits = Vec::with_capacity(z.len());
    for i in 0..z.nrows() {
        bits.extend(z.row(i).iter().map(|&v| v >= T::zero()));
    }
    bits
}

fn check_input<T: Real>(x: &DMatrix<T>, d: usize) -> Result<()> {
    if x.ncols() != d {
        return Err(Error::Shape(format!(
            "input has {} columns, hasher expects {d}",
            x.ncols()
        )));
    }
    if !all_finite(x) {
        return Err(Error::NonFinite("hasher input"));
    }
    Ok(())
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-style random rotation in SO(d): QR of a Gaussian matrix, with the
/// first column negated whenever `det(Q) < 0`.
pub fn random_rotation(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    assert!(d >= 1, "rotation dimension must be positive");
    loop {
        let g = gaussian_matrix(d, d, rng);
        let qr = g.qr();
        // rank-deficient draws have a (near) zero on the diagonal of R
        if qr.r().diagonal().iter().any(|v| v.abs() < 1e-12) {
            continue;
        }
        let mut q = qr.q();
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        return q;
    }
}

/// Gradients for a batch of training outputs, one matrix per parameter
/// block in declaration order.
pub type ParamGrads<T> = Vec<DMatrix<T>>;

/// Sign-of-projection hasher `sign(x R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHasher<T: Real> {
    projection: DMatrix<T>,
    gamma: T,
}

pub struct LinearCache<T: Real> {
    input: DMatrix<T>,
    pre: DMatrix<T>,
}

impl<T: Real> LinearHasher<T> {
    pub fn new(projection: DMatrix<T>, gamma: T) -> Result<Self> {
        if projection.is_empty() {
            return Err(Error::Config("empty projection".into()));
        }
        if gamma <= T::zero() {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if !all_finite(&projection) {
            return Err(Error::NonFinite("linear projection"));
        }
        Ok(Self { projection, gamma })
    }

    /// Rotation-initialized LSH. With `bits == d` the projection is a single
    /// rotation; otherwise independent rotations are concatenated column-wise
    /// and truncated to `bits` columns.
    pub fn qr_init(d: usize, bits: usize, gamma: T, seed: u64) -> Result<Self> {
        if d == 0 || bits == 0 {
            return Err(Error::Config("dimension and bit count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = bits.div_ceil(d);
        let mut proj = DMatrix::<f64>::zeros(d, blocks * d);
        for b in 0..blocks {
            let q = random_rotation(d, &mut rng);
            proj.view_mut((0, b * d), (d, d)).copy_from(&q);
        }
        let proj = proj.columns(0, bits).map(lit::<T>);
        Self::new(proj, gamma)
    }

    pub fn projection(&self) -> &DMatrix<T> {
        &self.projection
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn code_bits(&self) -> usize {
        self.projection.ncols()
    }

    pub fn preactivation(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_input(x, self.input_dim())?;
        Ok(x * &self.projection)
    }

    /// Row-major hard bits, `bit[i][j] = (x_i · r_j >= 0)`.
    pub fn hash_bits(&self, x: &DMatrix<T>) -> Result<Vec<bool>> {
        Ok(sign_bits(&self.preactivation(x)?))
    }

    pub fn hash(&self, x: &DMatrix<T>) -> Result<CodeMatrix> {
        pack_bits(&self.hash_bits(x)?, self.code_bits())
    }

    pub fn soft_codes(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        soft_sign(&self.preactivation(x)?, self.gamma)
    }

    pub fn forward_train(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, LinearCache<T>)> {
        let pre = self.preactivation(x)?;
        let out = pre.map(|v| soft_sign_scalar(v, self.gamma));
        Ok((
            out,
            LinearCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    pub fn backward(&self, cache: &LinearCache<T>, grad_out: &DMatrix<T>) -> ParamGrads<T> {
        let g = self.gamma;
        let d_pre = grad_out.zip_map(&cache.pre, |go, z| go * soft_sign_grad_scalar(z, g));
        vec![cache.input.transpose() * &d_pre]
    }

    pub fn params(&self) -> Vec<&DMatrix<T>> {
        vec![&self.projection]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        vec![&mut self.projection]
    }

    pub fn cast<U: Real>(&self) -> LinearHasher<U> {
        LinearHasher {
            projection: self.projection.map(|v| lit(v.to_f64())),
            gamma: lit(self.gamma.to_f64()),
        }
    }
}

/// Two-layer hasher `sign(SiLU(x W1 + b1) W2)` for a row vector `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHasher<T: Real> {
    w1: DMatrix<T>,
    /// `1 × h` row vector.
    b1: DMatrix<T>,
    w2: DMatrix<T>,
    gamma: T,
}

pub struct MlpCache<T: Real> {
    input: DMatrix<T>,
    hidden_pre: DMatrix<T>,
    hidden: DMatrix<T>,
    pre: DMatrix<T>,
}

impl<T: Real> MlpHasher<T> {
    pub fn new(w1: DMatrix<T>, b1: Vec<T>, w2: DMatrix<T>, gamma: T) -> Result<Self> {
        let h = w1.ncols();
        if w1.nrows() == 0 || h == 0 || w2.ncols() == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        if b1.len() != h || w2.nrows() != h {
            return Err(Error::Shape(format!(
                "W1 is {}x{h}, b1 has {}, W2 is {}x{}",
                w1.nrows(),
                b1.len(),
                w2.nrows(),
                w2.ncols()
            )));
        }
        if gamma <= T::zero() {
            return Err(Error::Config("gamma must be positive".into()));
        }
        let b1 = DMatrix::from_row_slice(1, h, &b1);
        let hasher = Self { w1, b1, w2, gamma };
        hasher.check_params()?;
        Ok(hasher)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for every parameter.
    pub fn random(d: usize, hidden: usize, bits: usize, gamma: T, seed: u64) -> Result<Self> {
        if d == 0 || hidden == 0 || bits == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| lit::<T>(rng.random_range(-bound..bound)))
        };
        let w1 = uniform(d, hidden, d);
        let b1 = uniform(1, hidden, d);
        let w2 = uniform(hidden, bits, hidden);
        Self::new(w1, b1.as_slice().to_vec(), w2, gamma)
    }

    pub fn zeros(d: usize, hidden: usize, bits: usize, gamma: T) -> Result<Self> {
        Self::new(
            DMatrix::zeros(d, hidden),
            vec![T::zero(); hidden],
            DMatrix::zeros(hidden, bits),
            gamma,
        )
    }

    fn check_params(&self) -> Result<()> {
        if all_finite(&self.w1) && all_finite(&self.b1) && all_finite(&self.w2) {
            Ok(())
        } else {
            Err(Error::NonFinite("MLP parameters"))
        }
    }

    pub fn w1(&self) -> &DMatrix<T> {
        &self.w1
    }

    pub fn b1(&self) -> &[T] {
        self.b1.as_slice()
    }

    pub fn w2(&self) -> &DMatrix<T> {
        &self.w2
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: T) -> Result<()> {
        if gamma <= T::zero() {
            return Err(Error::Config("gamma must be positive".into()));
        }
        self.gamma = gamma;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn code_bits(&self) -> usize {
        self.w2.ncols()
    }

    fn hidden_pre(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut z = x * &self.w1;
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.b1[(0, j)]);
        }
        z
    }

    /// Pre-activation codes `SiLU(x W1 + b1) W2`, one row per input.
    pub fn forward(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_input(x, self.input_dim())?;
        self.check_params()?;
        let hidden = self.hidden_pre(x).map(silu);
        Ok(hidden * &self.w2)
    }

    pub fn hash_bits(&self, x: &DMatrix<T>) -> Result<Vec<bool>> {
        Ok(sign_bits(&self.forward(x)?))
    }

    pub fn hash(&self, x: &DMatrix<T>) -> Result<CodeMatrix> {
        pack_bits(&self.hash_bits(x)?, self.code_bits())
    }

    pub fn soft_codes(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        soft_sign(&self.forward(x)?, self.gamma)
    }

    pub fn forward_train(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, MlpCache<T>)> {
        check_input(x, self.input_dim())?;
        let hidden_pre = self.hidden_pre(x);
        let hidden = hidden_pre.map(silu);
        let pre = &hidden * &self.w2;
        let out = pre.map(|v| soft_sign_scalar(v, self.gamma));
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                hidden_pre,
                hidden,
                pre,
            },
        ))
    }

    /// Gradients `[dW1, db1, dW2]` given `∂loss/∂soft_codes`.
    pub fn backward(&self, cache: &MlpCache<T>, grad_out: &DMatrix<T>) -> ParamGrads<T> {
        let g = self.gamma;
        let d_pre = grad_out.zip_map(&cache.pre, |go, z| go * soft_sign_grad_scalar(z, g));
        let d_w2 = cache.hidden.transpose() * &d_pre;
        let d_hidden = &d_pre * self.w2.transpose();
        let d_hidden_pre = d_hidden.zip_map(&cache.hidden_pre, |dh, z| dh * silu_grad(z));
        let d_w1 = cache.input.transpose() * &d_hidden_pre;
        let d_b1 = DMatrix::from_fn(1, self.hidden_dim(), |_, j| d_hidden_pre.column(j).sum());
        vec![d_w1, d_b1, d_w2]
    }

    pub fn params(&self) -> Vec<&DMatrix<T>> {
        vec![&self.w1, &self.b1, &self.w2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2]
    }

    pub fn cast<U: Real>(&self) -> MlpHasher<U> {
        MlpHasher {
            w1: self.w1.map(|v| lit(v.to_f64())),
            b1: self.b1.map(|v| lit(v.to_f64())),
            w2: self.w2.map(|v| lit(v.to_f64())),
            gamma: lit(self.gamma.to_f64()),
        }
    }
}

/// Inner product in a reduced space: `score(q, k) = (q P) · (k P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownProjEstimator<T: Real> {
    projection: DMatrix<T>,
}

pub struct DownProjCache<T: Real> {
    input: DMatrix<T>,
}

impl<T: Real> DownProjEstimator<T> {
    pub fn new(projection: DMatrix<T>) -> Result<Self> {
        if projection.nrows() == 0 || projection.ncols() == 0 {
            return Err(Error::Config("down-projection needs r >= 1".into()));
        }
        if !all_finite(&projection) {
            return Err(Error::NonFinite("down-projection"));
        }
        Ok(Self { projection })
    }

    /// Orthonormal columns taken from a random rotation; `r = d / reduction`.
    pub fn random(d: usize, reduction: usize, seed: u64) -> Result<Self> {
        if d == 0 || reduction == 0 {
            return Err(Error::Config("dimension and reduction must be positive".into()));
        }
        let r = (d / reduction).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_rotation(d, &mut rng);
        Self::new(q.columns(0, r).map(lit::<T>))
    }

    pub fn projection(&self) -> &DMatrix<T> {
        &self.projection
    }

    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn reduced_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn project(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_input(x, self.input_dim())?;
        Ok(x * &self.projection)
    }

    /// Estimated logits of every row of `keys` against each query row.
    pub fn scores(&self, queries: &DMatrix<T>, keys: &DMatrix<T>) -> Result<DMatrix<T>> {
        Ok(self.project(queries)? * self.project(keys)?.transpose())
    }

    pub fn forward_train(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, DownProjCache<T>)> {
        let out = self.project(x)?;
        Ok((out, DownProjCache { input: x.clone() }))
    }

    pub fn backward(&self, cache: &DownProjCache<T>, grad_out: &DMatrix<T>) -> ParamGrads<T> {
        vec![cache.input.transpose() * grad_out]
    }

    pub fn params(&self) -> Vec<&DMatrix<T>> {
        vec![&self.projection]
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        vec![&mut self.projection]
    }
}

/// Single-query convenience form of [`DownProjEstimator::scores`].
pub fn downproj_scores<T: Real>(
    est: &DownProjEstimator<T>,
    query: &[T],
    keys: &DMatrix<T>,
) -> Result<Vec<T>> {
    let q = DMatrix::from_row_slice(1, query.len(), query);
    Ok(est.scores(&q, keys)?.as_slice().to_vec())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPLH";
const CHECKPOINT_VERSION: u32 = 1;

/// A hasher persisted in the `SPLH` checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Linear(LinearHasher<f32>),
    Mlp(MlpHasher<f32>),
    DownProj(DownProjEstimator<f32>),
}

impl Checkpoint {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Checkpoint::Linear(_) => "linear",
            Checkpoint::Mlp(_) => "mlp",
            Checkpoint::DownProj(_) => "downproj",
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (kind, d, h, l, gamma, blocks): (u8, usize, usize, usize, f32, Vec<&DMatrix<f32>>) =
            match self {
                Checkpoint::Linear(x) => (0, x.input_dim(), 0, x.code_bits(), x.gamma, x.params()),
                Checkpoint::Mlp(x) => (
                    1,
                    x.input_dim(),
                    x.hidden_dim(),
                    x.code_bits(),
                    x.gamma,
                    x.params(),
                ),
                Checkpoint::DownProj(x) => (2, x.input_dim(), 0, x.reduced_dim(), 0.0, x.params()),
            };
        w.write_all(CHECKPOINT_MAGIC)?;
        binio::put_u32(&mut w, CHECKPOINT_VERSION)?;
        w.write_all(&[kind])?;
        binio::put_u32(&mut w, binio::to_u32(d, "d")?)?;
        binio::put_u32(&mut w, binio::to_u32(h, "h")?)?;
        binio::put_u32(&mut w, binio::to_u32(l, "L")?)?;
        binio::put_f32(&mut w, gamma)?;
        for block in blocks {
            binio::put_f32_block(&mut w, crate::matrix_to_rows(block))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: at,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let kind_at = r.offset();
        let kind = r.u8()?;
        let d = r.u32()? as usize;
        let h = r.u32()? as usize;
        let l = r.u32()? as usize;
        let gamma = r.f32()?;
        let header = r.offset();
        let sizes: Vec<(usize, usize)> = match kind {
            0 => vec![(d, l)],
            1 => vec![(d, h), (1, h), (h, l)],
            2 => vec![(d, l)],
            other => {
                return Err(Error::Format {
                    offset: kind_at,
                    detail: format!("unknown hasher kind {other}"),
                })
            }
        };
        let total = header + 4 * sizes.iter().map(|(a, b)| (a * b) as u64).sum::<u64>();
        let mut blocks = Vec::with_capacity(sizes.len());
        for (rows, cols) in sizes {
            let vals = r.f32_block(rows * cols, total)?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("checkpoint parameters"));
            }
            blocks.push(DMatrix::from_row_slice(rows, cols, &vals));
        }
        r.expect_eof()?;
        let mut blocks = blocks.into_iter();
        let mut next = || blocks.next().expect("block count fixed by kind");
        Ok(match kind {
            0 => Checkpoint::Linear(LinearHasher::new(next(), gamma)?),
            1 => {
                let w1 = next();
                let b1 = next().as_slice().to_vec();
                Checkpoint::Mlp(MlpHasher::new(w1, b1, next(), gamma)?)
            }
            _ => Checkpoint::DownProj(DownProjEstimator::new(next())?),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// LU determinant with partial pivoting, independent of nalgebra's.
    fn det_lu(m: &DMatrix<f64>) -> f64 {
        let n = m.nrows();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
                .unwrap();
            if a[p][c] == 0.0 {
                return 0.0;
            }
            if p != c {
                a.swap(p, c);
                det = -det;
            }
            det *= a[c][c];
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        det
    }

    fn max_identity_dev(q: &DMatrix<f64>) -> f64 {
        let g = q.tr_mul(q);
        let n = g.nrows();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rotation_d1_is_identity() {
        for seed in 0..20 {
            let h = LinearHasher::<f64>::qr_init(1, 1, 1.0, seed).unwrap();
            assert_eq!(h.projection()[(0, 0)], 1.0);
        }
    }

    #[test]
    fn rotation_d8_orthogonal_f64() {
        for seed in 0..25 {
            let h = LinearHasher::<f64>::qr_init(8, 8, 1.0, seed).unwrap();
            let q = h.projection();
            assert!(max_identity_dev(q) < 1e-10);
            assert!((det_lu(q) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_sizes_f32() {
        for d in [2, 8, 64, 128] {
            let h = LinearHasher::<f32>::qr_init(d, d, 64.0, 7).unwrap();
            let q = h.projection().map(|v| v as f64);
            assert!(max_identity_dev(&q) < 1e-6, "d={d}");
            assert!((det_lu(&q) - 1.0).abs() < 1e-6, "d={d}");
        }
    }

    #[test]
    fn rectangular_projection_stacks_rotations() {
        let h = LinearHasher::<f64>::qr_init(4, 10, 1.0, 3).unwrap();
        assert_eq!(h.projection().shape(), (4, 10));
        let first = h.projection().columns(0, 4).into_owned();
        assert!(max_identity_dev(&first) < 1e-12);
    }

    #[test]
    fn linear_zero_input_sets_all_bits() {
        let h = LinearHasher::<f32>::qr_init(32, 32, 1.0, 1).unwrap();
        let bits = h.hash_bits(&DMatrix::zeros(2, 32)).unwrap();
        assert!(bits.iter().all(|&b| b));
    }

    #[test]
    fn linear_identity_projection() {
        let h = LinearHasher::new(DMatrix::<f64>::identity(4, 4), 1.0).unwrap();
        let x = DMatrix::from_row_slice(1, 4, &[1.0, -1.0, 2.0, -0.5]);
        assert_eq!(h.hash_bits(&x).unwrap(), vec![true, false, true, false]);
    }

    #[test]
    fn linear_negation_flips_nonzero_bits() {
        let h = LinearHasher::<f64>::qr_init(16, 32, 1.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian_matrix(20, 16, &mut rng);
        let pre = h.preactivation(&x).unwrap();
        let a = h.hash_bits(&x).unwrap();
        let b = h.hash_bits(&(-&x)).unwrap();
        for (i, (p, q)) in a.iter().zip(&b).enumerate() {
            let z = pre[(i / 32, i % 32)];
            if z != 0.0 {
                assert_ne!(p, q);
            }
        }
    }

    #[test]
    fn linear_dimension_mismatch() {
        let h = LinearHasher::<f32>::qr_init(8, 32, 1.0, 0).unwrap();
        assert!(matches!(h.hash(&DMatrix::zeros(1, 9)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let h = MlpHasher::<f64>::zeros(8, 8, 32, 64.0).unwrap();
        let x = DMatrix::from_fn(3, 8, |i, j| (i + j) as f64 - 4.0);
        assert!(h.forward(&x).unwrap().iter().all(|&v| v == 0.0));
        assert!(h.hash_bits(&x).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn identity_network_fixed_point() {
        let h = MlpHasher::new(
            DMatrix::<f64>::identity(4, 4),
            vec![0.0; 4],
            DMatrix::identity(4, 4),
            1.0,
        )
        .unwrap();
        assert!(h.forward(&DMatrix::zeros(1, 4)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_matches_loop_oracle() {
        let h = MlpHasher::<f64>::random(6, 5, 7, 64.0, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = gaussian_matrix(4, 6, &mut rng);
        let out = h.forward(&x).unwrap();
        for n in 0..4 {
            let mut hidden = [0.0f64; 5];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let mut z = h.b1()[j];
                for i in 0..6 {
                    z += x[(n, i)] * h.w1()[(i, j)];
                }
                *hj = z / (1.0 + (-z).exp());
            }
            for l in 0..7 {
                let y: f64 = (0..5).map(|j| hidden[j] * h.w2()[(j, l)]).sum();
                assert!(close(out[(n, l)], y, 1e-12));
            }
        }
    }

    #[test]
    fn mlp_scale_w2_keeps_bits() {
        let h = MlpHasher::<f64>::random(8, 8, 32, 64.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian_matrix(10, 8, &mut rng);
        let base = h.hash_bits(&x).unwrap();
        for c in [0.5, 3.0, 1e3] {
            let scaled =
                MlpHasher::new(h.w1().clone(), h.b1().to_vec(), h.w2() * c, 64.0).unwrap();
            assert_eq!(scaled.hash_bits(&x).unwrap(), base);
        }
    }

    #[test]
    fn mlp_rejects_non_finite() {
        let h = MlpHasher::<f64>::random(4, 4, 32, 64.0, 2).unwrap();
        let mut x = DMatrix::zeros(1, 4);
        x[(0, 1)] = f64::NAN;
        assert!(matches!(h.forward(&x), Err(Error::NonFinite(_))));
        let mut w1 = h.w1().clone();
        w1[(0, 0)] = f64::INFINITY;
        assert!(MlpHasher::new(w1, h.b1().to_vec(), h.w2().clone(), 1.0).is_err());
    }

    #[test]
    fn soft_sign_values() {
        let z = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, -1.0]);
        let s = soft_sign(&z, 1.0).unwrap();
        assert_eq!(s[(0, 0)], 0.0);
        assert!(close(s[(0, 1)], 0.5, 1e-15));
        let s64 = soft_sign(&z, 64.0).unwrap();
        assert!(close(s64[(0, 1)], 64.0 / 65.0, 1e-15));
        assert!(close(s64[(0, 2)], -64.0 / 65.0, 1e-15));
        assert!(soft_sign(&z, 0.0).is_err());
    }

    #[test]
    fn soft_sign_derivative_matches_difference() {
        for &z in &[-2.0f64, -0.1, 0.3, 1.7] {
            for &g in &[1.0, 8.0, 64.0] {
                let h = 1e-6;
                let fd = (soft_sign_scalar(z + h, g) - soft_sign_scalar(z - h, g)) / (2.0 * h);
                let an = soft_sign_grad_scalar(z, g);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0));
            }
        }
        for &z in &[-3.0f64, -0.2, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert!((fd - silu_grad(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn soft_codes_agree_with_hard_bits() {
        let h = MlpHasher::<f64>::random(16, 16, 32, 64.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian_matrix(50, 16, &mut rng);
        let pre = h.forward(&x).unwrap();
        let soft = h.soft_codes(&x).unwrap();
        let bits = h.hash_bits(&x).unwrap();
        for i in 0..50 {
            for j in 0..32 {
                let s = soft[(i, j)];
                assert!(s > -1.0 && s < 1.0);
                if pre[(i, j)].abs() > 1e-9 {
                    assert_eq!(s > 0.0, bits[i * 32 + j]);
                }
            }
        }
    }

    #[test]
    fn downproj_identity_and_self_scores() {
        let e = DownProjEstimator::new(DMatrix::<f64>::identity(3, 3)).unwrap();
        let keys = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 0.5]);
        let s = downproj_scores(&e, &[0.5, -1.0, 2.0], &keys).unwrap();
        assert!(close(s[0], 0.5 - 2.0 + 6.0, 1e-12));
        assert!(close(s[1], -0.5 + 1.0, 1e-12));
        assert_eq!(downproj_scores(&e, &[0.0; 3], &keys).unwrap(), vec![0.0, 0.0]);

        let r = DownProjEstimator::<f64>::random(32, 16, 1).unwrap();
        assert_eq!(r.reduced_dim(), 2);
        let q: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let k = DMatrix::from_row_slice(1, 32, &q);
        let s = downproj_scores(&r, &q, &k).unwrap()[0];
        let qp = r.project(&k).unwrap();
        assert!(close(s, qp.norm_squared(), 1e-12));
        assert!(s >= 0.0);
        assert!(downproj_scores(&r, &q[..31], &k).is_err());
    }

    #[test]
    fn checkpoint_round_trip_all_kinds() {
        let cks = [
            Checkpoint::Linear(LinearHasher::qr_init(8, 32, 64.0, 1).unwrap()),
            Checkpoint::Mlp(MlpHasher::random(8, 4, 32, 64.0, 2).unwrap()),
            Checkpoint::DownProj(DownProjEstimator::random(32, 16, 3).unwrap()),
        ];
        for ck in cks {
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"SPLH");
            assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), ck);
            assert!(matches!(
                Checkpoint::read_from(&buf[..buf.len() - 2]),
                Err(Error::Truncated { .. })
            ));
        }
    }

    #[test]
    fn checkpoint_mlp_layout() {
        let h = MlpHasher::new(
            DMatrix::from_row_slice(1, 2, &[1.0f32, 2.0]),
            vec![3.0, 4.0],
            DMatrix::from_row_slice(2, 1, &[5.0, 6.0]),
            64.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        Checkpoint::Mlp(h).write_to(&mut buf).unwrap();
        // magic, version, kind, d, h, L, gamma
        assert_eq!(buf[8], 1);
        assert_eq!(&buf[9..13], &1u32.to_le_bytes());
        assert_eq!(&buf[13..17], &2u32.to_le_bytes());
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..25], &64.0f32.to_le_bytes());
        let params: Vec<f32> = buf[25..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(params, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
