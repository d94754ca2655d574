//! Batched evaluation on full sample grids.
//!
//! Predictions are row-independent, so chunking never changes a value: the
//! same lattice point gives a bit-identical prediction for any batch size.

use rayon::prelude::*;

use crate::dataio::Normalizer;
use crate::error::{Error, Result};
use crate::fom::SampleRecord;
use crate::kernel::Matrix;
use crate::model::{Model, QueryBatch};
use crate::sampler::{gather_batch, LatticeIndex, SubsampleIndices};

/// Eval-mode predictions for `batch`, computed `batch_size` rows at a time.
pub fn predict_chunked(model: &Model, batch: &QueryBatch, batch_size: usize) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let n = batch.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(n)))
        .collect();
    let parts: Result<Vec<Matrix>> = chunks
        .par_iter()
        .map(|&(s, e)| model.predict(&batch.slice(s, e)))
        .collect();
    Ok(parts?.into_iter().flat_map(Matrix::into_data).collect())
}

/// Normalized predictions at the given lattice points of `sample`.
pub fn predict_indices(
    model: &Model,
    sample: &SampleRecord,
    indices: &SubsampleIndices,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let parts: Result<Vec<Vec<f64>>> = indices
        .0
        .par_chunks(batch_size)
        .map(|chunk| {
            let b = gather_batch(sample, &SubsampleIndices(chunk.to_vec()), norm)?;
            Ok(model.predict(&b)?.into_data())
        })
        .collect();
    Ok(parts?.concat())
}

/// Physical-unit truth and prediction, shaped `[nt x n_cells]`.
pub fn evaluate_sample(
    model: &Model,
    sample: &SampleRecord,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<(Matrix, Matrix)> {
    let g = &sample.grid;
    let pred = predict_indices(model, sample, &SubsampleIndices::full(g), norm, batch_size)?;
    let pred = pred
        .into_iter()
        .map(|y| norm.target.denormalize(y))
        .collect();
    Ok((
        Matrix::new(g.nt, g.n_cells(), sample.states.clone())?,
        Matrix::new(g.nt, g.n_cells(), pred)?,
    ))
}

/// Physical truth and prediction at a chosen set of cells for every
/// timestamp, shaped `[nt x cells.len()]`.
pub fn evaluate_cells(
    model: &Model,
    sample: &SampleRecord,
    cells: &[usize],
    norm: &Normalizer,
    batch_size: usize,
) -> Result<(Matrix, Matrix)> {
    let g = &sample.grid;
    let mut idx = Vec::with_capacity(g.nt * cells.len());
    let mut truth = Vec::with_capacity(g.nt * cells.len());
    for t in 0..g.nt {
        for &c in cells {
            if c >= g.n_cells() {
                return Err(Error::Bounds(format!(
                    "cell {c} outside a grid of {} cells",
                    g.n_cells()
                )));
            }
            let [x, y, z] = g.cell_coords(c);
            idx.push(LatticeIndex { t, x, y, z });
            truth.push(sample.states[t * g.n_cells() + c]);
        }
    }
    let pred = predict_indices(model, sample, &SubsampleIndices(idx), norm, batch_size)?;
    let pred = pred
        .into_iter()
        .map(|y| norm.target.denormalize(y))
        .collect();
    Ok((
        Matrix::new(g.nt, cells.len(), truth)?,
        Matrix::new(g.nt, cells.len(), pred)?,
    ))
}

/// Mean squared error in normalized target units over every lattice point
/// of every sample.
pub fn full_domain_mse(
    model: &Model,
    samples: &[SampleRecord],
    norm: &Normalizer,
    batch_size: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let pred = predict_indices(model, s, &SubsampleIndices::full(&s.grid), norm, batch_size)?;
        for (p, &t) in pred.iter().zip(&s.states) {
            let r = p - norm.target.normalize(t);
            sum += r * r;
        }
        count += pred.len();
    }
    if count == 0 {
        return Err(Error::EmptyBatch("full_domain_mse"));
    }
    Ok(sum / count as f64)
}
