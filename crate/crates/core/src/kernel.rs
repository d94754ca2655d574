//! Dense f64 kernels with explicit forward/backward passes.
//!
//! Matrices are row-major and batch-first: each row is one query point.
//! Every kernel computes a row of output from the matching row of input
//! only, with a fixed summation order, so results for a given row do not
//! depend on how many other rows share the batch.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work (rows x in x out) above which row loops are split across threads.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        same_shape("Matrix::add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values saved by a forward kernel for its backward pass.
///
/// Each cache is moved into exactly one backward call.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Affine {
        input: Matrix,
    },
    LeakyRelu {
        preactivation: Matrix,
        slope: f64,
    },
    Tanh {
        output: Matrix,
    },
    /// `mask` entries are 0 or 1/(1 - rate); `None` means identity.
    Dropout {
        mask: Option<Matrix>,
    },
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const TILE: usize = 4;

/// `out[r] += sum_k a[r, k] * b[k]` for every row `r`, where `out` is
/// `rows x m`, `a` is `rows x k` and `b` is `k x m`. Each output row sees the
/// same sequence of updates whether it is processed alone or in a tile, so
/// results do not depend on the row count or on threading.
fn accumulate_rows(out: &mut [f64], m: usize, a: &[f64], k: usize, b: &[f64], par: bool) {
    let tile = |(o, a): (&mut [f64], &[f64])| {
        let n = o.len() / m;
        if n == TILE {
            let (o0, rest) = o.split_at_mut(m);
            let (o1, rest) = rest.split_at_mut(m);
            let (o2, o3) = rest.split_at_mut(m);
            for kk in 0..k {
                let (a0, a1, a2, a3) = (a[kk], a[k + kk], a[2 * k + kk], a[3 * k + kk]);
                let br = &b[kk * m..(kk + 1) * m];
                for j in 0..m {
                    let bj = br[j];
                    o0[j] += a0 * bj;
                    o1[j] += a1 * bj;
                    o2[j] += a2 * bj;
                    o3[j] += a3 * bj;
                }
            }
        } else {
            for (or, ar) in o.chunks_mut(m).zip(a.chunks(k)) {
                for (kk, &ak) in ar.iter().enumerate() {
                    axpy(or, ak, &b[kk * m..(kk + 1) * m]);
                }
            }
        }
    };
    if par {
        out.par_chunks_mut(TILE * m)
            .zip(a.par_chunks(TILE * k))
            .for_each(tile);
    } else {
        out.chunks_mut(TILE * m)
            .zip(a.chunks(TILE * k))
            .for_each(tile);
    }
}

/// `Y = X W^T + b`, with `W` shaped `[out x in]`.
pub fn affine_forward(w: &Matrix, b: &[f64], x: &Matrix) -> Result<(Matrix, LayerCache)> {
    let y = affine_apply(w, b, x)?;
    Ok((y, LayerCache::Affine { input: x.clone() }))
}

/// Forward affine map without recording a cache.
pub fn affine_apply(w: &Matrix, b: &[f64], x: &Matrix) -> Result<Matrix> {
    let (out_dim, in_dim) = w.shape();
    if b.len() != out_dim {
        return Err(Error::dim(
            "affine_forward",
            format!("W is {out_dim}x{in_dim} but b has {} entries", b.len()),
        ));
    }
    if x.cols() != in_dim {
        return Err(Error::dim(
            "affine_forward",
            format!("X has {} columns but W expects {in_dim}", x.cols()),
        ));
    }
    let wt = w.transpose();
    let mut y = Matrix::zeros(x.rows(), out_dim);
    for yr in y.data.chunks_mut(out_dim.max(1)) {
        yr.copy_from_slice(&b[..yr.len()]);
    }
    if out_dim > 0 && in_dim > 0 {
        let par = x.rows() * in_dim * out_dim >= PAR_THRESHOLD;
        accumulate_rows(&mut y.data, out_dim, &x.data, in_dim, &wt.data, par);
    }
    Ok(y)
}

/// `dX = dY W`, `dW = dY^T X`, `db = column sums of dY`.
pub fn affine_backward(dy: &Matrix, w: &Matrix, cache: LayerCache) -> Result<AffineGrads> {
    let LayerCache::Affine { input: x } = cache else {
        return Err(Error::State(
            "affine_backward received a non-affine cache".into(),
        ));
    };
    let (out_dim, in_dim) = w.shape();
    if dy.cols() != out_dim || dy.rows() != x.rows() || x.cols() != in_dim {
        return Err(Error::dim(
            "affine_backward",
            format!(
                "dY {:?}, W {:?}, cached X {:?}",
                dy.shape(),
                w.shape(),
                x.shape()
            ),
        ));
    }
    let n = x.rows();
    let par = n * in_dim * out_dim >= PAR_THRESHOLD && in_dim > 0 && out_dim > 0;

    let mut dx = Matrix::zeros(n, in_dim);
    let mut dw = Matrix::zeros(out_dim, in_dim);
    if in_dim > 0 && out_dim > 0 {
        accumulate_rows(&mut dx.data, in_dim, &dy.data, out_dim, &w.data, par);
        let dyt = dy.transpose();
        accumulate_rows(&mut dw.data, in_dim, &dyt.data, n, &x.data, par);
    }

    let mut db = vec![0.0; out_dim];
    for i in 0..n {
        for (acc, g) in db.iter_mut().zip(dy.row(i)) {
            *acc += g;
        }
    }
    Ok(AffineGrads { dx, dw, db })
}

pub fn leaky_relu(x: &Matrix, slope: f64) -> Result<(Matrix, LayerCache)> {
    let y = leaky_relu_apply(x, slope)?;
    Ok((
        y,
        LayerCache::LeakyRelu {
            preactivation: x.clone(),
            slope,
        },
    ))
}

pub fn leaky_relu_apply(x: &Matrix, slope: f64) -> Result<Matrix> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Config(format!(
            "leaky relu slope must lie in (0, 1), got {slope}"
        )));
    }
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    Ok(y)
}

pub fn leaky_relu_backward(dy: &Matrix, cache: LayerCache) -> Result<Matrix> {
    let LayerCache::LeakyRelu {
        preactivation,
        slope,
    } = cache
    else {
        return Err(Error::State(
            "leaky_relu_backward received a foreign cache".into(),
        ));
    };
    same_shape("leaky_relu_backward", dy, &preactivation)?;
    let mut dx = dy.clone();
    for (g, &z) in dx.data.iter_mut().zip(&preactivation.data) {
        if z < 0.0 {
            *g *= slope;
        }
    }
    Ok(dx)
}

pub fn tanh_layer(x: &Matrix) -> Result<(Matrix, LayerCache)> {
    let y = tanh_apply(x);
    Ok((y.clone(), LayerCache::Tanh { output: y }))
}

pub fn tanh_apply(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = v.tanh();
    }
    y
}

pub fn tanh_backward(dy: &Matrix, cache: LayerCache) -> Result<Matrix> {
    let LayerCache::Tanh { output } = cache else {
        return Err(Error::State(
            "tanh_backward received a foreign cache".into(),
        ));
    };
    same_shape("tanh_backward", dy, &output)?;
    let mut dx = dy.clone();
    for (g, &y) in dx.data.iter_mut().zip(&output.data) {
        *g *= 1.0 - y * y;
    }
    Ok(dx)
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` at train
/// time, so evaluation is the identity.
pub fn dropout<R: Rng + ?Sized>(
    x: &Matrix,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Matrix, LayerCache)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), LayerCache::Dropout { mask: None }));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in &mut mask.data {
        if rng.gen::<f64>() < keep {
            *m = scale;
        }
    }
    let mut y = x.clone();
    for (v, m) in y.data.iter_mut().zip(&mask.data) {
        *v *= m;
    }
    Ok((y, LayerCache::Dropout { mask: Some(mask) }))
}

pub fn dropout_backward(dy: &Matrix, cache: LayerCache) -> Result<Matrix> {
    let LayerCache::Dropout { mask } = cache else {
        return Err(Error::State(
            "dropout_backward received a foreign cache".into(),
        ));
    };
    let Some(mask) = mask else {
        return Ok(dy.clone());
    };
    same_shape("dropout_backward", dy, &mask)?;
    let mut dx = dy.clone();
    for (g, m) in dx.data.iter_mut().zip(&mask.data) {
        *g *= m;
    }
    Ok(dx)
}

/// Mean of squared residuals and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    same_shape("mse_loss", pred, target)?;
    let n = pred.data.len();
    if n == 0 {
        return Err(Error::EmptyBatch("mse_loss"));
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    let mut grad = Matrix::zeros(pred.rows, pred.cols);
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let r = p - t;
        sum += r * r;
        *g = 2.0 * inv_n * r;
    }
    Ok((sum * inv_n, grad))
}
