//! Random spatio-temporal subsampling and batch assembly.
//!
//! Lattice points are addressed by `(t, x, y, z)` indices. Cells are flattened
//! x-fastest: `c = xi + nx * (yi + ny * zi)`, and state snapshots are stored
//! as `states[ti * n_cells + c]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Normalizer;
use crate::error::{Error, Result};
use crate::fom::SampleRecord;
use crate::kernel::Matrix;
use crate::model::QueryBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub nt: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    /// Time of the last snapshot; snapshot `ti` sits at `horizon * ti / (nt - 1)`.
    pub horizon: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 16,
            ny: 16,
            nz: 8,
            nt: 10,
            x_range: [0.0, 1.0],
            y_range: [0.0, 1.0],
            z_range: [0.0, 0.5],
            horizon: 1.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 || self.nt == 0 {
            return Err(Error::Config(format!(
                "grid counts must be >= 1, got {}x{}x{} with {} timestamps",
                self.nx, self.ny, self.nz, self.nt
            )));
        }
        for (axis, r) in [
            ("x", self.x_range),
            ("y", self.y_range),
            ("z", self.z_range),
        ] {
            if !(r[0] < r[1]) {
                return Err(Error::Config(format!(
                    "{axis} extent must satisfy min < max, got {r:?}"
                )));
            }
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn n_points(&self) -> usize {
        self.n_cells() * self.nt
    }

    #[inline]
    pub fn cell_index(&self, xi: usize, yi: usize, zi: usize) -> usize {
        xi + self.nx * (yi + self.ny * zi)
    }

    pub fn cell_coords(&self, c: usize) -> [usize; 3] {
        [
            c % self.nx,
            (c / self.nx) % self.ny,
            c / (self.nx * self.ny),
        ]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            (self.x_range[1] - self.x_range[0]) / self.nx as f64,
            (self.y_range[1] - self.y_range[0]) / self.ny as f64,
            (self.z_range[1] - self.z_range[0]) / self.nz as f64,
        ]
    }

    pub fn time_of(&self, ti: usize) -> f64 {
        if self.nt <= 1 {
            0.0
        } else {
            self.horizon * ti as f64 / (self.nt - 1) as f64
        }
    }

    pub fn cell_center(&self, xi: usize, yi: usize, zi: usize) -> [f64; 3] {
        let h = self.spacing();
        [
            self.x_range[0] + (xi as f64 + 0.5) * h[0],
            self.y_range[0] + (yi as f64 + 0.5) * h[1],
            self.z_range[0] + (zi as f64 + 0.5) * h[2],
        ]
    }

    /// Whether a physical `(t, x, y, z)` lies inside the grid's extents.
    pub fn contains(&self, p: [f64; 4]) -> bool {
        let inside = |v: f64, r: [f64; 2]| v >= r[0] && v <= r[1];
        inside(p[0], [0.0, self.horizon])
            && inside(p[1], self.x_range)
            && inside(p[2], self.y_range)
            && inside(p[3], self.z_range)
    }

    /// Nearest cell to a physical location, or `None` outside the extents.
    pub fn locate(&self, p: [f64; 4]) -> Option<[usize; 3]> {
        if !self.contains(p) {
            return None;
        }
        let h = self.spacing();
        let pick = |v: f64, lo: f64, h: f64, n: usize| (((v - lo) / h).floor() as usize).min(n - 1);
        Some([
            pick(p[1], self.x_range[0], h[0], self.nx),
            pick(p[2], self.y_range[0], h[1], self.ny),
            pick(p[3], self.z_range[0], h[2], self.nz),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticeIndex {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsampleIndices(pub Vec<LatticeIndex>);

impl SubsampleIndices {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every lattice point, timestamp-major then cell order, matching the
    /// layout of `SampleRecord::states`.
    pub fn full(grid: &GridSpec) -> Self {
        let mut out = Vec::with_capacity(grid.n_points());
        for t in 0..grid.nt {
            for c in 0..grid.n_cells() {
                let [x, y, z] = grid.cell_coords(c);
                out.push(LatticeIndex { t, x, y, z });
            }
        }
        Self(out)
    }
}

/// Chooses which lattice points feed one backpropagation pass.
pub trait Sampler {
    fn sample<R: Rng + ?Sized>(
        &self,
        grid: &GridSpec,
        n_sub: usize,
        rng: &mut R,
    ) -> SubsampleIndices;
}

/// I.i.d. uniform draws over the joint space-time lattice, with replacement.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSampler;

impl Sampler for UniformSampler {
    fn sample<R: Rng + ?Sized>(
        &self,
        grid: &GridSpec,
        n_sub: usize,
        rng: &mut R,
    ) -> SubsampleIndices {
        let idx = (0..n_sub)
            .map(|_| LatticeIndex {
                t: rng.gen_range(0..grid.nt),
                x: rng.gen_range(0..grid.nx),
                y: rng.gen_range(0..grid.ny),
                z: rng.gen_range(0..grid.nz),
            })
            .collect();
        SubsampleIndices(idx)
    }
}

pub fn subsample<R: Rng + ?Sized>(grid: &GridSpec, n_sub: usize, rng: &mut R) -> SubsampleIndices {
    UniformSampler.sample(grid, n_sub, rng)
}

/// Physical `(t, x, y, z)` at cell centers.
pub fn coordinates_of(grid: &GridSpec, indices: &SubsampleIndices) -> Vec<[f64; 4]> {
    indices
        .0
        .iter()
        .map(|i| {
            let [x, y, z] = grid.cell_center(i.x, i.y, i.z);
            [grid.time_of(i.t), x, y, z]
        })
        .collect()
}

fn check_bounds(grid: &GridSpec, indices: &SubsampleIndices) -> Result<()> {
    for (k, i) in indices.0.iter().enumerate() {
        if i.t >= grid.nt || i.x >= grid.nx || i.y >= grid.ny || i.z >= grid.nz {
            return Err(Error::Bounds(format!(
                "entry {k} = {i:?} outside a {}x{}x{}x{} lattice",
                grid.nt, grid.nx, grid.ny, grid.nz
            )));
        }
    }
    Ok(())
}

fn hetero_row(sample: &SampleRecord, c: usize, norm: &Normalizer) -> [f64; 4] {
    let raw = sample.hetero_at(c);
    std::array::from_fn(|k| norm.hetero[k].normalize(raw[k]))
}

fn homo_row(sample: &SampleRecord, norm: &Normalizer) -> [f64; 2] {
    std::array::from_fn(|k| norm.homo[k].normalize(sample.homo[k]))
}

/// Normalized features and targets at the given lattice points.
pub fn gather_batch(
    sample: &SampleRecord,
    indices: &SubsampleIndices,
    norm: &Normalizer,
) -> Result<QueryBatch> {
    let grid = &sample.grid;
    check_bounds(grid, indices)?;
    let n = indices.len();
    let n_cells = grid.n_cells();
    let homo = homo_row(sample, norm);
    let mut topo = Vec::with_capacity(n * 4);
    let mut hetero = Vec::with_capacity(n * 4);
    let mut homos = Vec::with_capacity(n * 2);
    let mut target = Vec::with_capacity(n);
    for (i, coords) in indices.0.iter().zip(coordinates_of(grid, indices)) {
        let c = grid.cell_index(i.x, i.y, i.z);
        topo.extend((0..4).map(|k| norm.topo[k].normalize(coords[k])));
        hetero.extend(hetero_row(sample, c, norm));
        homos.extend(homo);
        target.push(norm.target.normalize(sample.states[i.t * n_cells + c]));
    }
    Ok(QueryBatch {
        topo: Matrix::new(n, 4, topo)?,
        hetero: Matrix::new(n, 4, hetero)?,
        homo: Matrix::new(n, 2, homos)?,
        target: Some(Matrix::column(target)),
    })
}

/// Normalized features at arbitrary physical points, using the nearest cell
/// for heterogeneous values. Returns the batch of in-extent points and, per
/// input point, its row in that batch (`None` when outside the extents).
pub fn query_points(
    sample: &SampleRecord,
    points: &[[f64; 4]],
    norm: &Normalizer,
) -> Result<(QueryBatch, Vec<Option<usize>>)> {
    let grid = &sample.grid;
    let homo = homo_row(sample, norm);
    let mut topo = Vec::new();
    let mut hetero = Vec::new();
    let mut homos = Vec::new();
    let mut rows = Vec::with_capacity(points.len());
    let mut n = 0;
    for p in points {
        match grid.locate(*p) {
            Some([xi, yi, zi]) if p.iter().all(|v| v.is_finite()) => {
                topo.extend((0..4).map(|k| norm.topo[k].normalize(p[k])));
                hetero.extend(hetero_row(sample, grid.cell_index(xi, yi, zi), norm));
                homos.extend(homo);
                rows.push(Some(n));
                n += 1;
            }
            _ => rows.push(None),
        }
    }
    Ok((
        QueryBatch {
            topo: Matrix::new(n, 4, topo)?,
            hetero: Matrix::new(n, 4, hetero)?,
            homo: Matrix::new(n, 2, homos)?,
            target: None,
        },
        rows,
    ))
}
