//! Synthetic queries and keys shaped like two narrow, nearly orthogonal
//! cones, plus the `SPLQ` tensor dump format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

const DUMP_MAGIC: &[u8; 4] = b"SPLQ";
const DUMP_VERSION: u32 = 1;
const DUMP_HEADER_BYTES: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Key,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSpec {
    pub dim: usize,
    pub query_axis: Vec<f64>,
    pub key_axis: Vec<f64>,
    /// Maximum angle (radians) between a sample and its cone axis.
    pub angular_spread: f64,
    pub axis_cos: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Probability that a sample's magnitude is multiplied by
    /// `outlier_scale`. Zero disables heavy-tailed magnitudes.
    pub outlier_rate: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

pub const DEFAULT_SPREAD: f64 = 0.3;
pub const DEFAULT_NORM_MEAN: f64 = 16.0;
pub const DEFAULT_NORM_STD: f64 = 4.0;

fn unit_gaussian(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector orthogonal to the unit vector `axis`, drawn isotropically.
fn tangent(axis: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut g: Vec<f64> = (0..axis.len()).map(|_| rng.sample(StandardNormal)).collect();
        let p = dot(&g, axis);
        g.iter_mut().zip(axis).for_each(|(x, a)| *x -= p * a);
        let n = norm(&g);
        if n > 1e-9 {
            return g.into_iter().map(|x| x / n).collect();
        }
    }
}

impl ConeSpec {
    /// Default cone geometry in `dim` dimensions; `seed` fixes the axes.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        Self::with_geometry(dim, DEFAULT_SPREAD, 0.0, seed)
    }

    pub fn with_geometry(dim: usize, angular_spread: f64, axis_cos: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("cone dimension must be at least 2".into()));
        }
        if !(-1.0..=1.0).contains(&axis_cos) {
            return Err(Error::Config(format!("axis cosine {axis_cos} outside [-1, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query_axis = unit_gaussian(dim, &mut rng);
        let t = tangent(&query_axis, &mut rng);
        let s = (1.0 - axis_cos * axis_cos).sqrt();
        let key_axis: Vec<f64> = query_axis
            .iter()
            .zip(&t)
            .map(|(a, b)| axis_cos * a + s * b)
            .collect();
        let spec = Self {
            dim,
            query_axis,
            key_axis,
            angular_spread,
            axis_cos,
            norm_mean: DEFAULT_NORM_MEAN,
            norm_std: DEFAULT_NORM_STD,
            outlier_rate: 0.0,
            outlier_scale: 8.0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_axis.len() != self.dim || self.key_axis.len() != self.dim {
            return Err(Error::Config("axis length differs from dim".into()));
        }
        for axis in [&self.query_axis, &self.key_axis] {
            if (norm(axis) - 1.0).abs() > 1e-9 {
                return Err(Error::Config("cone axes must be unit vectors".into()));
            }
        }
        if !(self.angular_spread > 0.0 && self.angular_spread < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!(
                "angular spread {} outside (0, π/2)",
                self.angular_spread
            )));
        }
        if !(self.norm_mean > 0.0) || !(self.norm_std >= 0.0) {
            return Err(Error::Config("norm_mean must be positive, norm_std non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) || !(self.outlier_scale > 0.0) {
            return Err(Error::Config("invalid outlier settings".into()));
        }
        Ok(())
    }

    fn axis(&self, side: Side) -> &[f64] {
        match side {
            Side::Query => &self.query_axis,
            Side::Key => &self.key_axis,
        }
    }
}

/// Samples in f64, one per row. Every row's angle to the axis lies in
/// `[0, angular_spread)`.
pub fn sample_cone_f64(spec: &ConeSpec, count: usize, side: Side, seed: u64) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let axis = spec.axis(side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = 0.05 * spec.norm_mean;
    let mut out = DMatrix::zeros(count, spec.dim);
    for i in 0..count {
        let t = tangent(axis, &mut rng);
        let theta = rng.random::<f64>() * spec.angular_spread;
        let mut mag = spec.norm_mean + spec.norm_std * rng.sample::<f64, _>(StandardNormal);
        mag = mag.max(floor);
        if spec.outlier_rate > 0.0 && rng.random::<f64>() < spec.outlier_rate {
            mag *= spec.outlier_scale;
        }
        let (s, c) = theta.sin_cos();
        for j in 0..spec.dim {
            out[(i, j)] = mag * (c * axis[j] + s * t[j]);
        }
    }
    Ok(out)
}

/// `count × d` samples from one of the two cones.
pub fn sample_cone(spec: &ConeSpec, count: usize, side: Side, seed: u64) -> Result<DMatrix<f32>> {
    Ok(sample_cone_f64(spec, count, side, seed)?.map(|v| v as f32))
}

/// `count × d` standard-normal value vectors, for attention-output checks
/// on data that has no natural values.
pub fn gaussian_values(count: usize, dim: usize, seed: u64) -> DMatrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(count, dim, |_, _| rng.sample::<f64, _>(StandardNormal) as f32)
}

/// Aggregate geometry of a query/key sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeStats {
    /// Mean pairwise cosine within the query cone and within the key cone.
    pub intra_cos: f64,
    /// Mean absolute query-key cosine.
    pub cross_abs_cos: f64,
}

/// Estimates [`ConeStats`] from `pairs` random (row, row) draws.
pub fn cone_stats(queries: &DMatrix<f32>, keys: &DMatrix<f32>, pairs: usize, seed: u64) -> ConeStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cos = |a: &DMatrix<f32>, i: usize, b: &DMatrix<f32>, j: usize| {
        let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
        for c in 0..a.ncols() {
            let x = a[(i, c)] as f64;
            let y = b[(j, c)] as f64;
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        ab / (aa * bb).sqrt()
    };
    let (nq, nk) = (queries.nrows(), keys.nrows());
    let mut intra = 0.0;
    let mut intra_n = 0usize;
    let mut cross = 0.0;
    for _ in 0..pairs {
        if nq >= 2 {
            let (i, j) = distinct_pair(nq, &mut rng);
            intra += cos(queries, i, queries, j);
            intra_n += 1;
        }
        if nk >= 2 {
            let (i, j) = distinct_pair(nk, &mut rng);
            intra += cos(keys, i, keys, j);
            intra_n += 1;
        }
        let i = rng.random_range(0..nq);
        let j = rng.random_range(0..nk);
        cross += cos(queries, i, keys, j).abs();
    }
    ConeStats {
        intra_cos: intra / intra_n.max(1) as f64,
        cross_abs_cos: cross / pairs.max(1) as f64,
    }
}

fn distinct_pair(n: usize, rng: &mut impl Rng) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Query and key tensors for one head, rows indexed by token position.
#[derive(Debug, Clone, PartialEq)]
pub struct QkDump {
    pub queries: DMatrix<f32>,
    pub keys: DMatrix<f32>,
}

impl QkDump {
    pub fn new(queries: DMatrix<f32>, keys: DMatrix<f32>) -> Result<Self> {
        if queries.ncols() != keys.ncols() {
            return Err(Error::Shape(format!(
                "queries have {} columns, keys {}",
                queries.ncols(),
                keys.ncols()
            )));
        }
        if queries.iter().chain(keys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dump tensors"));
        }
        Ok(Self { queries, keys })
    }

    /// Draws `n_queries` queries and `n_keys` keys from the spec's cones.
    pub fn generate(spec: &ConeSpec, n_queries: usize, n_keys: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q_seed = rng.random();
        let k_seed = rng.random();
        Self::new(
            sample_cone(spec, n_queries, Side::Query, q_seed)?,
            sample_cone(spec, n_keys, Side::Key, k_seed)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.queries.ncols()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.nrows()
    }

    pub fn n_keys(&self) -> usize {
        self.keys.nrows()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        binio::put_u32(&mut w, DUMP_VERSION)?;
        binio::put_u32(&mut w, binio::to_u32(self.n_queries(), "n_queries")?)?;
        binio::put_u32(&mut w, binio::to_u32(self.n_keys(), "n_keys")?)?;
        binio::put_u32(&mut w, binio::to_u32(self.dim(), "d")?)?;
        binio::put_f32_block(&mut w, crate::matrix_to_rows(&self.queries))?;
        binio::put_f32_block(&mut w, crate::matrix_to_rows(&self.keys))?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader::new(r);
        r.magic(DUMP_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != DUMP_VERSION {
            return Err(Error::Format {
                offset: at,
                detail: format!("unsupported dump version {version}"),
            });
        }
        let nq = r.u32()? as usize;
        let nk = r.u32()? as usize;
        let d = r.u32()? as usize;
        let total = DUMP_HEADER_BYTES + 4 * ((nq + nk) * d) as u64;
        let q = r.f32_block(nq * d, total)?;
        let k = r.f32_block(nk * d, total)?;
        r.expect_eof()?;
        Self::new(
            DMatrix::from_row_slice(nq, d, &q),
            DMatrix::from_row_slice(nk, d, &k),
        )
    }
}

pub fn write_dump(path: impl AsRef<Path>, dump: &QkDump) -> Result<()> {
    dump.write_to(BufWriter::new(File::create(path)?))
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<QkDump> {
    QkDump::read_from(BufReader::new(File::open(path)?))
}
