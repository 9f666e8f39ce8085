//! WCA pair potential, minimum-image forces and Hessian-vector products, and
//! the full momentum drift of the nonequilibrium Langevin equations.
//!
//! Pair contributions are always accumulated in ascending `(i, j)` order, so
//! the cell list and the all-pairs loop give bitwise identical results.

use rayon::prelude::*;

use crate::error::{NeldError, Result};
use crate::integrators::SimParams;
use crate::lattice::{nearest_image_count, DeformingLattice};
use crate::state::Vec3;

/// `2^(1/6)`, where the WCA potential and its derivative both reach zero.
pub const WCA_CUTOFF: f64 = 1.122_462_048_309_373;

/// Distances below this are treated as a collapsed trajectory.
pub const OVERLAP_DISTANCE: f64 = 1e-8;

const PARALLEL_CHUNK: usize = 128;

/// Reduced-unit WCA parameters (energy and length scales are one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WcaParams {
    pub cutoff: f64,
}

impl Default for WcaParams {
    fn default() -> Self {
        Self { cutoff: WCA_CUTOFF }
    }
}

/// `(phi(r), phi'(r))` for `phi(r) = r^-12 - r^-6 + 1/4` inside the cutoff.
pub fn wca_pair(r: f64) -> Result<(f64, f64)> {
    if !(r > 0.0) {
        return Err(NeldError::Overlap { i: 0, j: 0, r });
    }
    if r >= WCA_CUTOFF {
        return Ok((0.0, 0.0));
    }
    let inv2 = 1.0 / (r * r);
    let inv6 = inv2 * inv2 * inv2;
    let inv12 = inv6 * inv6;
    Ok((inv12 - inv6 + 0.25, (-12.0 * inv12 + 6.0 * inv6) / r))
}

/// `phi''(r)`; zero beyond the cutoff (the second derivative jumps there).
pub fn wca_second_derivative(r: f64) -> f64 {
    if r >= WCA_CUTOFF {
        return 0.0;
    }
    let inv2 = 1.0 / (r * r);
    let inv6 = inv2 * inv2 * inv2;
    (156.0 * inv6 * inv6 - 42.0 * inv6) * inv2
}

/// Whether positions handed to a force evaluation must already be wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionConvention {
    /// Every position must lie in the canonical cell.
    Canonical,
    /// Positions may sit outside the cell; pair distances use the minimum image.
    Unwrapped,
}

#[derive(Debug, Clone, Copy)]
struct PairTerm {
    i: usize,
    j: usize,
    d: Vec3,
    r2: f64,
}

/// Pairwise interactions over a deforming orthorhombic cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceField {
    params: WcaParams,
    interacting: bool,
    use_cells: bool,
    parallel: bool,
}

impl Default for ForceField {
    fn default() -> Self {
        Self::wca()
    }
}

impl ForceField {
    pub fn wca() -> Self {
        Self {
            params: WcaParams::default(),
            interacting: true,
            use_cells: true,
            parallel: false,
        }
    }

    /// No interparticle forces at all.
    pub fn ideal_gas() -> Self {
        Self {
            interacting: false,
            ..Self::wca()
        }
    }

    pub fn with_cells(mut self, use_cells: bool) -> Self {
        self.use_cells = use_cells;
        self
    }

    /// Opt-in chunked accumulation. Results are reproducible for any thread
    /// count but not bitwise equal to the serial sum.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn params(&self) -> &WcaParams {
        &self.params
    }

    pub fn is_interacting(&self) -> bool {
        self.interacting
    }

    pub fn uses_cells(&self) -> bool {
        self.use_cells
    }

    fn pairs(&self, q: &[f64], edges: &Vec3) -> Result<Vec<PairTerm>> {
        if !self.interacting {
            return Ok(Vec::new());
        }
        let n = q.len() / 3;
        let rc2 = self.params.cutoff * self.params.cutoff;
        let cells = cell_counts(edges, self.params.cutoff);
        let mut out = Vec::new();
        let half = [0.5 * edges[0], 0.5 * edges[1], 0.5 * edges[2]];
        let rc = self.params.cutoff;
        let mut consider = |i: usize, j: usize| -> Result<()> {
            let mut d = [0.0; 3];
            for c in 0..3 {
                let mut x = q[3 * i + c] - q[3 * j + c];
                if x >= half[c] || x < -half[c] {
                    x -= edges[c] * nearest_image_count(x, edges[c]);
                }
                if x.abs() >= rc {
                    return Ok(());
                }
                d[c] = x;
            }
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if r2 < rc2 {
                if r2 < OVERLAP_DISTANCE * OVERLAP_DISTANCE {
                    return Err(NeldError::Overlap { i, j, r: r2.sqrt() });
                }
                out.push(PairTerm { i, j, d, r2 });
            }
            Ok(())
        };

        match cells {
            Some(nc) if self.use_cells => {
                let grid = CellGrid::build(q, edges, nc);
                for (cell, shell) in grid.half_shell.iter().enumerate() {
                    let home = grid.members(cell);
                    for (a, &i) in home.iter().enumerate() {
                        for &j in &home[a + 1..] {
                            consider(i.min(j), i.max(j))?;
                        }
                    }
                    for &other in shell {
                        for &i in home {
                            for &j in grid.members(other) {
                                consider(i.min(j), i.max(j))?;
                            }
                        }
                    }
                }
                // same accumulation order as the all-pairs loop
                out.sort_unstable_by_key(|p| (p.i, p.j));
            }
            _ => {
                for i in 0..n {
                    for j in i + 1..n {
                        consider(i, j)?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Total energy and the force `-grad E` (flat, length `3N`).
    pub fn energy_forces(&self, q: &[f64], lattice: &DeformingLattice, t: f64) -> Result<(f64, Vec<f64>)> {
        let edges = lattice.edges_at(t);
        let pairs = self.pairs(q, &edges)?;
        if self.parallel && pairs.len() > PARALLEL_CHUNK {
            let partials: Vec<(f64, Vec<f64>)> = pairs
                .par_chunks(PARALLEL_CHUNK)
                .map(|chunk| {
                    let mut f = vec![0.0; q.len()];
                    let e = accumulate_forces(chunk, &mut f);
                    (e, f)
                })
                .collect();
            let mut energy = 0.0;
            let mut forces = vec![0.0; q.len()];
            for (e, f) in partials {
                energy += e;
                forces.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            }
            return Ok((energy, forces));
        }
        let mut forces = vec![0.0; q.len()];
        let energy = accumulate_forces(&pairs, &mut forces);
        Ok((energy, forces))
    }

    pub fn forces(&self, q: &[f64], lattice: &DeformingLattice, t: f64) -> Result<Vec<f64>> {
        self.energy_forces(q, lattice, t).map(|(_, f)| f)
    }

    pub fn energy(&self, q: &[f64], lattice: &DeformingLattice, t: f64) -> Result<f64> {
        self.energy_forces(q, lattice, t).map(|(e, _)| e)
    }

    /// `(hess E)(q) v` from analytic pair second derivatives.
    pub fn hessian_vec(&self, q: &[f64], v: &[f64], lattice: &DeformingLattice, t: f64) -> Result<Vec<f64>> {
        let edges = lattice.edges_at(t);
        let pairs = self.pairs(q, &edges)?;
        let mut out = vec![0.0; q.len()];
        for pair in &pairs {
            let r = pair.r2.sqrt();
            let (_, d1) = wca_pair(r)?;
            let d2 = wca_second_derivative(r);
            let u = [pair.d[0] / r, pair.d[1] / r, pair.d[2] / r];
            let dv = [
                v[3 * pair.i] - v[3 * pair.j],
                v[3 * pair.i + 1] - v[3 * pair.j + 1],
                v[3 * pair.i + 2] - v[3 * pair.j + 2],
            ];
            let along = u[0] * dv[0] + u[1] * dv[1] + u[2] * dv[2];
            let transverse = d1 / r;
            for c in 0..3 {
                let h = d2 * along * u[c] + transverse * (dv[c] - along * u[c]);
                out[3 * pair.i + c] += h;
                out[3 * pair.j + c] -= h;
            }
        }
        Ok(out)
    }
}

fn accumulate_forces(pairs: &[PairTerm], forces: &mut [f64]) -> f64 {
    let mut energy = 0.0;
    for pair in pairs {
        let r = pair.r2.sqrt();
        // r >= OVERLAP_DISTANCE was checked when the pair was collected
        let (e, d1) = wca_pair(r).unwrap_or((0.0, 0.0));
        energy += e;
        let scale = -d1 / r;
        for c in 0..3 {
            let f = scale * pair.d[c];
            forces[3 * pair.i + c] += f;
            forces[3 * pair.j + c] -= f;
        }
    }
    energy
}

/// Cells per edge, or `None` if any edge holds fewer than three cells.
fn cell_counts(edges: &Vec3, cutoff: f64) -> Option<[usize; 3]> {
    let mut nc = [0usize; 3];
    for c in 0..3 {
        let k = (edges[c] / cutoff).floor();
        if !(k >= 3.0) {
            return None;
        }
        nc[c] = k as usize;
    }
    Some(nc)
}

struct CellGrid {
    /// Particles sorted by cell; cell `c` owns `order[start[c]..start[c + 1]]`.
    order: Vec<usize>,
    start: Vec<usize>,
    /// The 13 neighbouring cells that pair with each cell exactly once.
    half_shell: Vec<[usize; 13]>,
}

impl CellGrid {
    fn build(q: &[f64], edges: &Vec3, dims: [usize; 3]) -> Self {
        let n = q.len() / 3;
        let [nx, ny, nz] = dims;
        let cells = nx * ny * nz;
        let mut cell_of = Vec::with_capacity(n);

        let mut start = vec![0usize; cells + 1];
        for i in 0..n {
            let mut idx = [0usize; 3];
            for c in 0..3 {
                let s = q[3 * i + c] / edges[c];
                let frac = s - s.floor();
                idx[c] = ((frac * dims[c] as f64) as usize).min(dims[c] - 1);
            }
            let cell = (idx[0] * ny + idx[1]) * nz + idx[2];
            cell_of.push(cell);
            start[cell + 1] += 1;
        }
        for c in 0..cells {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut order = vec![0usize; n];
        for (i, &cell) in cell_of.iter().enumerate() {
            order[fill[cell]] = i;
            fill[cell] += 1;
        }
        // offsets (dx, dy, dz) lexicographically after (0, 0, 0)
        let half_shell = (0..cells)
            .map(|cell| {
                let (x, y, z) = (cell / (ny * nz), (cell / nz) % ny, cell % nz);
                let mut out = [0usize; 13];
                for (slot, k) in out.iter_mut().zip(14..27) {
                    let (dx, dy, dz) = (k / 9, (k / 3) % 3, k % 3);
                    let xx = (x + nx + dx - 1) % nx;
                    let yy = (y + ny + dy - 1) % ny;
                    let zz = (z + nz + dz - 1) % nz;
                    *slot = (xx * ny + yy) * nz + zz;
                }
                out
            })
            .collect();
        Self { order, start, half_shell }
    }

    fn members(&self, cell: usize) -> &[usize] {
        &self.order[self.start[cell]..self.start[cell + 1]]
    }
}

/// Combines precomputed interparticle forces into the full drift
/// `F(p, q) = -grad E(q) - gamma (p - A q) + A p`.
pub fn drift_from_forces(p: &[f64], q: &[f64], forces: &[f64], params: &SimParams) -> Vec<f64> {
    let gamma = params.gamma();
    let flow = params.flow();
    forces
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let a = flow.rate(k);
            f - gamma * (p[k] - a * q[k]) + a * p[k]
        })
        .collect()
}

/// Full NELD momentum drift. Interparticle forces always use the minimum
/// image; `convention` states whether `q` is expected to be wrapped.
pub fn drift_force(
    p: &[f64],
    q: &[f64],
    params: &SimParams,
    lattice: &DeformingLattice,
    t: f64,
    convention: PositionConvention,
) -> Result<Vec<f64>> {
    if convention == PositionConvention::Canonical {
        if let Some(particle) = lattice.first_outside(q, t) {
            return Err(NeldError::OutsideCell { particle });
        }
    }
    let forces = params.forces().forces(q, lattice, t)?;
    Ok(drift_from_forces(p, q, &forces, params))
}
