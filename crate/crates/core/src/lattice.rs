//! Background flow and the periodic cell that deforms with it.
//!
//! A particle at `(q, p)` has periodic images at `(q + L_t n, p + A L_t n)`,
//! where `L_t = exp(A t) L_0` is the cell matrix at time `t`. Only diagonal
//! (orthorhombic) flows are representable, so every cell stays a box and the
//! minimum image is exact.

use std::ops::{Add, Neg, Sub};

use crate::error::{NeldError, Result};
use crate::state::{SystemState, Vec3};

const TRACE_TOL: f64 = 1e-12;

/// Trace-free diagonal velocity gradient `A`, applied identically to every
/// particle's three coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMatrix {
    rates: Vec3,
}

impl FlowMatrix {
    pub fn diagonal(rates: Vec3) -> Result<Self> {
        if rates.iter().any(|r| !r.is_finite()) {
            return Err(NeldError::InvalidFlow(format!("non-finite rates {rates:?}")));
        }
        let trace: f64 = rates.iter().sum();
        if trace.abs() > TRACE_TOL {
            return Err(NeldError::InvalidFlow(format!(
                "trace {trace:e} is not zero (incompressible flow required)"
            )));
        }
        Ok(Self { rates })
    }

    /// Accepts a full 3x3 gradient but rejects anything off the diagonal.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        for (r, row) in m.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if r != c && v != 0.0 {
                    return Err(NeldError::InvalidFlow(format!(
                        "entry ({r}, {c}) = {v}: only diagonal flows are supported"
                    )));
                }
            }
        }
        Self::diagonal([m[0][0], m[1][1], m[2][2]])
    }

    pub fn zero() -> Self {
        Self { rates: [0.0; 3] }
    }

    /// Uniaxial extension `diag(rate, -rate/2, -rate/2)`.
    pub fn uniaxial(rate: f64) -> Result<Self> {
        Self::diagonal([rate, -0.5 * rate, -0.5 * rate])
    }

    pub fn rates(&self) -> Vec3 {
        self.rates
    }

    /// Rate acting on flat coordinate index `k`.
    #[inline]
    pub fn rate(&self, k: usize) -> f64 {
        self.rates[k % 3]
    }

    pub fn is_zero(&self) -> bool {
        self.rates.iter().all(|&r| r == 0.0)
    }
}

/// Lattice translation counts for one particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ReplicaIndex(pub [i64; 3]);

impl ReplicaIndex {
    pub const ZERO: Self = Self([0; 3]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 3]
    }
}

impl Add for ReplicaIndex {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self([self.0[0] + rhs.0[0], self.0[1] + rhs.0[1], self.0[2] + rhs.0[2]])
    }
}

impl Sub for ReplicaIndex {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl Neg for ReplicaIndex {
    type Output = Self;
    fn neg(self) -> Self {
        Self([-self.0[0], -self.0[1], -self.0[2]])
    }
}

/// Orthorhombic periodic cell with edges `exp(a_i t) L0_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformingLattice {
    l0: Vec3,
    flow: FlowMatrix,
}

impl DeformingLattice {
    pub fn new(l0: Vec3, flow: FlowMatrix) -> Result<Self> {
        if l0.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(NeldError::InvalidLattice(format!(
                "edge lengths must be positive and finite, got {l0:?}"
            )));
        }
        Ok(Self { l0, flow })
    }

    pub fn cubic(edge: f64, flow: FlowMatrix) -> Result<Self> {
        Self::new([edge; 3], flow)
    }

    /// Like [`DeformingLattice::new`], additionally requiring every edge to stay
    /// at least `2 * cutoff` long on `[0, t_end]` so no particle sees its own image.
    pub fn with_guard(l0: Vec3, flow: FlowMatrix, t_end: f64, cutoff: f64) -> Result<Self> {
        let lattice = Self::new(l0, flow)?;
        if !(t_end >= 0.0) {
            return Err(NeldError::InvalidLattice(format!("end time {t_end} must be >= 0")));
        }
        // edges are monotone in t, so the extremes are at 0 and t_end
        for t in [0.0, t_end] {
            let edges = lattice.edges_at(t);
            let shortest = edges.iter().cloned().fold(f64::INFINITY, f64::min);
            if shortest < 2.0 * cutoff {
                return Err(NeldError::InvalidLattice(format!(
                    "shortest edge {shortest} at t = {t} is below twice the cutoff {cutoff}"
                )));
            }
        }
        Ok(lattice)
    }

    pub fn l0(&self) -> Vec3 {
        self.l0
    }

    pub fn flow(&self) -> &FlowMatrix {
        &self.flow
    }

    /// Cell edges `exp(a_i t) L0_i`.
    pub fn edges_at(&self, t: f64) -> Vec3 {
        let a = self.flow.rates;
        [
            self.l0[0] * (a[0] * t).exp(),
            self.l0[1] * (a[1] * t).exp(),
            self.l0[2] * (a[2] * t).exp(),
        ]
    }

    pub fn volume_at(&self, t: f64) -> f64 {
        self.edges_at(t).iter().product()
    }

    /// Maps one particle into the canonical cell at time `t`.
    ///
    /// `n = floor(q / L_t)` componentwise; `q -= L_t n`, `p -= A L_t n`.
    pub fn wrap(&self, q: &mut Vec3, p: &mut Vec3, t: f64) -> Result<ReplicaIndex> {
        let edges = self.edges_at(t);
        self.wrap_with_edges(q, p, &edges)
            .ok_or(NeldError::NonFinite { particle: 0 })
    }

    /// Returns `None` for non-finite input.
    fn wrap_with_edges(&self, q: &mut Vec3, p: &mut Vec3, edges: &Vec3) -> Option<ReplicaIndex> {
        let mut n = [0i64; 3];
        for c in 0..3 {
            if !q[c].is_finite() || !p[c].is_finite() {
                return None;
            }
            let l = edges[c];
            let mut nc = (q[c] / l).floor();
            let mut wrapped = q[c] - l * nc;
            // floor can land one cell off when q/l rounds across an integer
            if wrapped >= l {
                nc += 1.0;
                wrapped = q[c] - l * nc;
            }
            if wrapped < 0.0 {
                nc -= 1.0;
                wrapped = q[c] - l * nc;
            }
            if wrapped >= l {
                // q is a rounding error below zero: snap onto the face
                nc += 1.0;
                wrapped = 0.0;
            }
            q[c] = wrapped;
            if nc != 0.0 {
                p[c] -= self.flow.rates[c] * l * nc;
            }
            n[c] = nc as i64;
        }
        Some(ReplicaIndex(n))
    }

    /// Wraps every particle of `state` at time `t` and returns the non-zero
    /// replica indices that were removed, as `(particle, n)`.
    pub fn wrap_state_at(&self, state: &mut SystemState, t: f64) -> Result<Vec<(usize, ReplicaIndex)>> {
        let edges = self.edges_at(t);
        let mut moved = Vec::new();
        for i in 0..state.particles() {
            let mut q = state.position(i);
            let mut p = state.momentum(i);
            let n = self
                .wrap_with_edges(&mut q, &mut p, &edges)
                .ok_or(NeldError::NonFinite { particle: i })?;
            if !n.is_zero() {
                state.q[3 * i..3 * i + 3].copy_from_slice(&q);
                state.p[3 * i..3 * i + 3].copy_from_slice(&p);
                moved.push((i, n));
            }
        }
        Ok(moved)
    }

    /// Wraps at the state's own time.
    pub fn wrap_state(&self, state: &mut SystemState) -> Result<Vec<(usize, ReplicaIndex)>> {
        let t = state.t;
        self.wrap_state_at(state, t)
    }

    /// Moves one particle to its image `(q + L_t n, p + A L_t n)`.
    pub fn replica_shift(&self, q: &mut Vec3, p: &mut Vec3, n: ReplicaIndex, t: f64) {
        let edges = self.edges_at(t);
        for c in 0..3 {
            let shift = edges[c] * n.0[c] as f64;
            q[c] += shift;
            p[c] += self.flow.rates[c] * shift;
        }
    }

    /// Applies [`DeformingLattice::replica_shift`] to a list of particles.
    pub fn replica_shift_state(&self, state: &mut SystemState, shifts: &[(usize, ReplicaIndex)], t: f64) {
        for &(i, n) in shifts {
            let mut q = state.position(i);
            let mut p = state.momentum(i);
            self.replica_shift(&mut q, &mut p, n, t);
            state.q[3 * i..3 * i + 3].copy_from_slice(&q);
            state.p[3 * i..3 * i + 3].copy_from_slice(&p);
        }
    }

    /// Nearest-image displacement at time `t`.
    pub fn min_image(&self, dq: Vec3, t: f64) -> Vec3 {
        min_image_with_edges(dq, &self.edges_at(t))
    }

    /// Whether every position lies in `[0, L_t)`; returns the first offender.
    pub fn first_outside(&self, q: &[f64], t: f64) -> Option<usize> {
        let edges = self.edges_at(t);
        q.iter()
            .enumerate()
            .position(|(k, &x)| !(x >= 0.0 && x < edges[k % 3]))
            .map(|k| k / 3)
    }
}

/// Number of cell edges to subtract so that the component lands in `[-L/2, L/2)`.
/// An exact half-edge maps to the negative end.
#[inline]
pub fn nearest_image_count(d: f64, edge: f64) -> f64 {
    (d / edge + 0.5).floor()
}

/// Maps each component into `[-L_i/2, L_i/2)`.
#[inline]
pub fn min_image_with_edges(dq: Vec3, edges: &Vec3) -> Vec3 {
    let mut out = dq;
    for c in 0..3 {
        out[c] -= edges[c] * nearest_image_count(dq[c], edges[c]);
    }
    out
}
