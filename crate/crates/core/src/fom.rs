//! Synthetic full-order model: random heterogeneous porosity/permeability
//! fields and a backward-Euler finite-volume diffusion solve with a point
//! injection source.
//!
//! Solves `phi du/dt = div(k grad u) + q delta(well)` on a box with no-flux
//! boundaries, zero initial state, harmonic-mean face transmissibilities and
//! Jacobi-preconditioned conjugate gradients for each implicit step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub grid: GridSpec,
    pub porosity_range: [f64; 2],
    pub logk_mean: f64,
    pub logk_std: f64,
    /// Box-filter radius in cells applied to the white noise.
    pub correlation_cells: usize,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            porosity_range: [0.15, 0.3],
            logk_mean: 0.0,
            logk_std: 0.5,
            correlation_cells: 2,
            seed: 0,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let [lo, hi] = self.porosity_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "porosity range must satisfy 0 < min <= max < 1, got {:?}",
                self.porosity_range
            )));
        }
        if !(self.logk_std >= 0.0) || !self.logk_mean.is_finite() {
            return Err(Error::Config(
                "logk_mean must be finite and logk_std >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Relative residual target `|b - A u| / |b|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub fields: FieldSpec,
    pub rate_range: [f64; 2],
    /// Injection stops at this time.
    pub duration_range: [f64; 2],
    /// Implicit steps per snapshot interval.
    pub substeps: usize,
    pub solver: SolverSettings,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            fields: FieldSpec::default(),
            rate_range: [0.9, 1.1],
            duration_range: [0.8, 1.2],
            substeps: 4,
            solver: SolverSettings::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.fields.validate()?;
        for (name, r) in [
            ("rate_range", self.rate_range),
            ("duration_range", self.duration_range),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) || !r[1].is_finite() {
                return Err(Error::Config(format!(
                    "{name} must satisfy 0 <= min <= max, got {r:?}"
                )));
            }
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        let g = &self.fields.grid;
        g.horizon / ((g.nt.max(2) - 1) * self.substeps) as f64
    }
}

/// One simulated case.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub grid: GridSpec,
    /// One value per cell.
    pub porosity: Vec<f64>,
    /// Three blocks of `n_cells` values: kx, ky, kz.
    pub perm: Vec<f64>,
    /// Injection rate, injection duration.
    pub homo: [f64; 2],
    pub well_cell: [usize; 3],
    /// `nt` snapshots of `n_cells` values.
    pub states: Vec<f64>,
}

impl SampleRecord {
    /// `[porosity, ln kx, ln ky, ln kz]` at a flat cell index.
    pub fn hetero_at(&self, c: usize) -> [f64; 4] {
        let n = self.grid.n_cells();
        [
            self.porosity[c],
            self.perm[c].ln(),
            self.perm[n + c].ln(),
            self.perm[2 * n + c].ln(),
        ]
    }

    pub fn snapshot(&self, ti: usize) -> &[f64] {
        let n = self.grid.n_cells();
        &self.states[ti * n..(ti + 1) * n]
    }

    /// Checks the structural invariants of a record.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_cells();
        let bad = |m: String| Err(Error::State(m));
        if self.porosity.len() != n
            || self.perm.len() != 3 * n
            || self.states.len() != n * self.grid.nt
        {
            return bad("array lengths do not match the grid".into());
        }
        if !self.porosity.iter().all(|&p| p > 0.0 && p < 1.0) {
            return bad("porosity outside (0, 1)".into());
        }
        if !self.perm.iter().all(|&k| k > 0.0 && k.is_finite()) {
            return bad("permeability must be positive and finite".into());
        }
        if !self.states.iter().all(|v| v.is_finite()) {
            return bad("non-finite state".into());
        }
        if self.states[..n].iter().any(|&v| v != 0.0) {
            return bad("first snapshot differs from the zero initial condition".into());
        }
        let [x, y, z] = self.well_cell;
        if x >= self.grid.nx || y >= self.grid.ny || z >= self.grid.nz {
            return bad(format!("well cell {:?} outside the grid", self.well_cell));
        }
        Ok(())
    }
}

/// Mean over the `(2r+1)^3` box around each cell, clipped at the boundary.
fn box_smooth(grid: &GridSpec, noise: &[f64], r: usize) -> Vec<f64> {
    if r == 0 {
        return noise.to_vec();
    }
    // separable: smooth along x, then y, then z
    let dims = [grid.nx, grid.ny, grid.nz];
    let strides = [1, grid.nx, grid.nx * grid.ny];
    let mut cur = noise.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (c, out) in next.iter_mut().enumerate() {
            let coords = grid.cell_coords(c);
            let i = coords[axis];
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(dims[axis] - 1);
            let base = c - i * strides[axis];
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += cur[base + j * strides[axis]];
            }
            *out = acc / (hi - lo + 1) as f64;
        }
        cur = next;
    }
    cur
}

fn smoothed_noise<R: Rng + ?Sized>(grid: &GridSpec, r: usize, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..grid.n_cells())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    box_smooth(grid, &noise, r)
}

/// Porosity (one block) and permeability (kx, ky, kz blocks).
///
/// Porosity is the smoothed noise mapped affinely onto `porosity_range`.
/// Each permeability axis gets its own smoothed noise, rescaled to unit
/// standard deviation, then `exp(logk_mean + logk_std * noise)`.
pub fn generate_fields<R: Rng + ?Sized>(spec: &FieldSpec, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let g = &spec.grid;
    let r = spec.correlation_cells;

    let phi_noise = smoothed_noise(g, r, rng);
    let (lo, hi) = phi_noise
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let [pmin, pmax] = spec.porosity_range;
    let porosity = phi_noise
        .iter()
        .map(|&v| {
            if hi > lo {
                (pmin + (v - lo) / (hi - lo) * (pmax - pmin)).clamp(pmin, pmax)
            } else {
                0.5 * (pmin + pmax)
            }
        })
        .collect();

    let mut perm = Vec::with_capacity(3 * g.n_cells());
    for _ in 0..3 {
        let noise = smoothed_noise(g, r, rng);
        let n = noise.len() as f64;
        let mean = noise.iter().sum::<f64>() / n;
        let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        perm.extend(noise.iter().map(|&v| {
            let z = if std > 0.0 { (v - mean) / std } else { 0.0 };
            (spec.logk_mean + spec.logk_std * z).exp()
        }));
    }
    (porosity, perm)
}

/// Inputs to one diffusion solve.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionProblem<'a> {
    pub grid: &'a GridSpec,
    pub porosity: &'a [f64],
    pub perm: &'a [f64],
    pub well_cell: [usize; 3],
    pub rate: f64,
    pub duration: f64,
}

/// Seven-point operator `T` (face transmissibilities) and accumulation
/// diagonal `phi * V / dt`.
struct Operator {
    nx: usize,
    ny: usize,
    nz: usize,
    tx: Vec<f64>,
    ty: Vec<f64>,
    tz: Vec<f64>,
    acc: Vec<f64>,
    diag: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl Operator {
    fn new(p: &DiffusionProblem<'_>, dt: f64) -> Self {
        let g = p.grid;
        let (nx, ny, nz) = (g.nx, g.ny, g.nz);
        let n = g.n_cells();
        let [hx, hy, hz] = g.spacing();
        let vol = hx * hy * hz;
        let (kx, ky, kz) = (&p.perm[..n], &p.perm[n..2 * n], &p.perm[2 * n..]);
        // tx[c] couples c and c + 1 in x (valid when xi < nx - 1), etc.
        let mut tx = vec![0.0; n];
        let mut ty = vec![0.0; n];
        let mut tz = vec![0.0; n];
        for c in 0..n {
            let [xi, yi, zi] = g.cell_coords(c);
            if xi + 1 < nx {
                tx[c] = hy * hz / hx * harmonic(kx[c], kx[c + 1]);
            }
            if yi + 1 < ny {
                ty[c] = hx * hz / hy * harmonic(ky[c], ky[c + nx]);
            }
            if zi + 1 < nz {
                tz[c] = hx * hy / hz * harmonic(kz[c], kz[c + nx * ny]);
            }
        }
        let acc: Vec<f64> = p.porosity.iter().map(|&phi| phi * vol / dt).collect();
        let mut diag = acc.clone();
        for c in 0..n {
            let [xi, yi, zi] = g.cell_coords(c);
            diag[c] += tx[c] + ty[c] + tz[c];
            if xi > 0 {
                diag[c] += tx[c - 1];
            }
            if yi > 0 {
                diag[c] += ty[c - nx];
            }
            if zi > 0 {
                diag[c] += tz[c - nx * ny];
            }
        }
        Self {
            nx,
            ny,
            nz,
            tx,
            ty,
            tz,
            acc,
            diag,
        }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let (nx, nxy) = (self.nx, self.nx * self.ny);
        for c in 0..u.len() {
            out[c] = self.diag[c] * u[c];
        }
        for c in 0..u.len() {
            let xi = c % nx;
            let yi = (c / nx) % self.ny;
            let zi = c / nxy;
            if xi + 1 < nx {
                out[c] -= self.tx[c] * u[c + 1];
                out[c + 1] -= self.tx[c] * u[c];
            }
            if yi + 1 < self.ny {
                out[c] -= self.ty[c] * u[c + nx];
                out[c + nx] -= self.ty[c] * u[c];
            }
            if zi + 1 < self.nz {
                out[c] -= self.tz[c] * u[c + nxy];
                out[c + nxy] -= self.tz[c] * u[c];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG; `u` holds the initial guess and the solution.
/// Returns the iteration count.
fn pcg(op: &Operator, b: &[f64], u: &mut [f64], settings: SolverSettings) -> Result<usize> {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        u.fill(0.0);
        return Ok(0);
    }
    let mut r = vec![0.0; n];
    op.apply(u, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<f64> = r.iter().zip(&op.diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = dot(&r, &r).sqrt() / b_norm;
    for it in 0..settings.max_iter {
        if res <= settings.tol {
            return Ok(it);
        }
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = dot(&r, &r).sqrt() / b_norm;
        for i in 0..n {
            z[i] = r[i] / op.diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= settings.tol {
        return Ok(settings.max_iter);
    }
    Err(Error::Solver {
        iterations: settings.max_iter,
        residual: res,
    })
}

/// Injected volume up to time `t`.
pub fn injected_mass(rate: f64, duration: f64, t: f64) -> f64 {
    rate * t.min(duration).max(0.0)
}

/// Integrates from the zero state and returns `nt` snapshots, the first
/// being the initial condition. `dt` must divide the snapshot interval.
pub fn solve_diffusion(
    p: &DiffusionProblem<'_>,
    dt: f64,
    settings: SolverSettings,
) -> Result<Vec<f64>> {
    let g = p.grid;
    g.validate()?;
    let n = g.n_cells();
    if p.porosity.len() != n || p.perm.len() != 3 * n {
        return Err(Error::dim(
            "solve_diffusion",
            format!(
                "porosity {} / perm {} values for {n} cells",
                p.porosity.len(),
                p.perm.len()
            ),
        ));
    }
    let [wx, wy, wz] = p.well_cell;
    if wx >= g.nx || wy >= g.ny || wz >= g.nz {
        return Err(Error::Bounds(format!(
            "well cell {:?} outside the grid",
            p.well_cell
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let mut states = vec![0.0; n * g.nt];
    if g.nt == 1 {
        return Ok(states);
    }
    let interval = g.horizon / (g.nt - 1) as f64;
    let ratio = interval / dt;
    let substeps = ratio.round() as usize;
    if substeps == 0 || (ratio - substeps as f64).abs() > 1e-9 * ratio {
        return Err(Error::Config(format!(
            "dt = {dt} does not divide the snapshot interval {interval}"
        )));
    }
    let dt = interval / substeps as f64;
    let op = Operator::new(p, dt);
    let well = g.cell_index(wx, wy, wz);

    let mut u = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut t = 0.0;
    for ti in 1..g.nt {
        for s in 0..substeps {
            let t_next = ((ti - 1) * substeps + s + 1) as f64 * dt;
            for c in 0..n {
                rhs[c] = op.acc[c] * u[c];
            }
            // average source rate over the step, so stored mass tracks injection exactly
            rhs[well] += (injected_mass(p.rate, p.duration, t_next)
                - injected_mass(p.rate, p.duration, t))
                / dt;
            pcg(&op, &rhs, &mut u, settings)?;
            t = t_next;
        }
        states[ti * n..(ti + 1) * n].copy_from_slice(&u);
    }
    Ok(states)
}

/// `sum(phi * u * V)` for one snapshot.
pub fn stored_mass(grid: &GridSpec, porosity: &[f64], u: &[f64]) -> f64 {
    let [hx, hy, hz] = grid.spacing();
    let vol = hx * hy * hz;
    porosity.iter().zip(u).map(|(phi, v)| phi * v * vol).sum()
}

fn interior(rng: &mut impl Rng, n: usize) -> usize {
    if n >= 3 {
        rng.gen_range(1..n - 1)
    } else {
        rng.gen_range(0..n)
    }
}

/// One sample from its own seed.
pub fn generate_sample(spec: &DatasetSpec, seed: u64) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = spec.fields.grid.clone();
    let (porosity, perm) = generate_fields(&spec.fields, &mut rng);
    let rate = rng.gen_range(spec.rate_range[0]..=spec.rate_range[1]);
    let duration = rng.gen_range(spec.duration_range[0]..=spec.duration_range[1]);
    let well_cell = [
        interior(&mut rng, grid.nx),
        interior(&mut rng, grid.ny),
        interior(&mut rng, grid.nz),
    ];
    let states = solve_diffusion(
        &DiffusionProblem {
            grid: &grid,
            porosity: &porosity,
            perm: &perm,
            well_cell,
            rate,
            duration,
        },
        spec.dt(),
        spec.solver,
    )?;
    Ok(SampleRecord {
        grid,
        porosity,
        perm,
        homo: [rate, duration],
        well_cell,
        states,
    })
}

/// `n_samples` independent cases. Per-sample seeds are drawn from `rng` up
/// front, so the result does not depend on thread scheduling.
pub fn build_dataset<R: Rng + ?Sized>(
    n_samples: usize,
    spec: &DatasetSpec,
    rng: &mut R,
) -> Result<Vec<SampleRecord>> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    spec.validate()?;
    let seeds: Vec<u64> = (0..n_samples).map(|_| rng.gen()).collect();
    seeds
        .par_iter()
        .enumerate()
        .map(|(index, &seed)| {
            generate_sample(spec, seed).map_err(|e| Error::Sample {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}
