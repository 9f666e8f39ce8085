//! One-step maps for the NELD schemes and the Ito-Taylor reference step.
//!
//! Every scheme wraps the state into the canonical cell at the start of the
//! step. The two "failed" schemes, SE-A and ABAPO, additionally remap after
//! the position drift using the cell of the step start time; their corrected
//! twins skip that remap and let the minimum image handle positions outside
//! the cell. Forces after a drift are evaluated on the cell at `t + dt`.

use std::fmt;
use std::str::FromStr;

use crate::error::{NeldError, Result};
use crate::lattice::{DeformingLattice, FlowMatrix, ReplicaIndex};
use crate::noise::StepNoise;
use crate::potential::{drift_force, ForceField, PositionConvention};
use crate::state::SystemState;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Noise placement in the SOILE-B position drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoileBNoise {
    /// Position noise `sigma dt^{3/2} zeta / (2 sqrt 3)` on top of the half-kick,
    /// which reproduces the Ito-Taylor noise block exactly.
    #[default]
    ItoMatched,
    /// Position noise `sigma dt^{3/2} zeta / sqrt 3` as originally printed.
    AsPrinted,
}

impl SoileBNoise {
    pub fn name(self) -> &'static str {
        match self {
            Self::ItoMatched => "ito-matched",
            Self::AsPrinted => "paper",
        }
    }
}

impl FromStr for SoileBNoise {
    type Err = NeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ito-matched" | "ito_matched" => Ok(Self::ItoMatched),
            "paper" | "as-printed" | "as_printed" => Ok(Self::AsPrinted),
            other => Err(NeldError::InvalidParameter(format!("unknown SOILE-B noise variant '{other}'"))),
        }
    }
}

/// Physical constants of the dynamics. `sigma` is always derived from the
/// fluctuation-dissipation relation `gamma = sigma^2 beta / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    gamma: f64,
    beta: f64,
    sigma: f64,
    flow: FlowMatrix,
    forces: ForceField,
    soile_b: SoileBNoise,
}

impl SimParams {
    /// `beta = inf` is allowed and gives noise-free dynamics.
    pub fn new(gamma: f64, beta: f64, flow: FlowMatrix, forces: ForceField) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(NeldError::InvalidParameter(format!("friction {gamma} must be finite and >= 0")));
        }
        if !(beta > 0.0) {
            return Err(NeldError::InvalidParameter(format!("inverse temperature {beta} must be > 0")));
        }
        let sigma = (2.0 * gamma / beta).sqrt();
        Ok(Self { gamma, beta, sigma, flow, forces, soile_b: SoileBNoise::default() })
    }

    pub fn with_soile_b_noise(mut self, variant: SoileBNoise) -> Self {
        self.soile_b = variant;
        self
    }

    pub fn with_forces(mut self, forces: ForceField) -> Self {
        self.forces = forces;
        self
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn flow(&self) -> &FlowMatrix {
        &self.flow
    }

    pub fn forces(&self) -> &ForceField {
        &self.forces
    }

    pub fn soile_b_noise(&self) -> SoileBNoise {
        self.soile_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeId {
    Em,
    SeA,
    SeB,
    SeAc,
    Abapo,
    AbapoC,
    SoileA,
    SoileB,
    Reference,
}

impl SchemeId {
    pub const ALL: [SchemeId; 9] = [
        Self::Em,
        Self::SeA,
        Self::SeB,
        Self::SeAc,
        Self::Abapo,
        Self::AbapoC,
        Self::SoileA,
        Self::SoileB,
        Self::Reference,
    ];

    /// The eight integrators, without the reference expansion.
    pub const INTEGRATORS: [SchemeId; 8] = [
        Self::Em,
        Self::SeA,
        Self::SeB,
        Self::SeAc,
        Self::Abapo,
        Self::AbapoC,
        Self::SoileA,
        Self::SoileB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Em => "em",
            Self::SeA => "se_a",
            Self::SeB => "se_b",
            Self::SeAc => "se_ac",
            Self::Abapo => "abapo",
            Self::AbapoC => "abapo_c",
            Self::SoileA => "soile_a",
            Self::SoileB => "soile_b",
            Self::Reference => "reference",
        }
    }

    /// Schemes that remap in the middle of a step.
    pub fn is_failed(self) -> bool {
        matches!(self, Self::SeA | Self::Abapo)
    }

    pub fn corrected_twin(self) -> Result<SchemeId> {
        match self {
            Self::SeA => Ok(Self::SeAc),
            Self::Abapo => Ok(Self::AbapoC),
            other => Err(NeldError::NoTwin(other.name())),
        }
    }

    /// Whether the scheme consumes the OU functional `xi`.
    pub fn uses_ou_noise(self) -> bool {
        matches!(self, Self::Abapo | Self::AbapoC)
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = NeldError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|id| id.name() == key)
            .ok_or_else(|| NeldError::InvalidParameter(format!("unknown scheme '{s}'")))
    }
}

/// Replica indices removed by the wraps of one step, as `(particle, n)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepRecord {
    pub start: Vec<(usize, ReplicaIndex)>,
    pub mid: Vec<(usize, ReplicaIndex)>,
}

impl StepRecord {
    pub fn crossed_mid_step(&self) -> bool {
        !self.mid.is_empty()
    }
}

/// Advances `state` by one step of width `noise.dt`.
pub fn step(
    scheme: SchemeId,
    state: &mut SystemState,
    params: &SimParams,
    lattice: &DeformingLattice,
    noise: &StepNoise,
) -> Result<StepRecord> {
    if noise.dim() != state.dim() {
        return Err(NeldError::DimensionMismatch { expected: state.dim(), found: noise.dim() });
    }
    if let Some(xi) = &noise.xi {
        if xi.len() != state.dim() {
            return Err(NeldError::DimensionMismatch { expected: state.dim(), found: xi.len() });
        }
    }
    let t = state.t;
    let record = match scheme {
        Scheme::Em => step_em(state, params, lattice, noise),
        Scheme::SeA => step_symplectic_a(state, params, lattice, noise, true),
        Scheme::SeAc => step_symplectic_a(state, params, lattice, noise, false),
        Scheme::SeB => step_se_b(state, params, lattice, noise),
        Scheme::Abapo => step_abapo_impl(state, params, lattice, noise, true),
        Scheme::AbapoC => step_abapo_impl(state, params, lattice, noise, false),
        Scheme::SoileA => step_soile_a(state, params, lattice, noise),
        Scheme::SoileB => step_soile_b(state, params, lattice, noise),
        Scheme::Reference => step_reference(state, params, lattice, noise),
    }?;
    state.t = t + noise.dt;
    state.check_finite()?;
    Ok(record)
}

use SchemeId as Scheme;

fn check_start(state: &SystemState, t: f64, lattice: &DeformingLattice) -> Result<()> {
    match lattice.first_outside(&state.q, t) {
        Some(particle) => Err(NeldError::OutsideCell { particle }),
        None => Ok(()),
    }
}

fn wrap_start(state: &mut SystemState, lattice: &DeformingLattice) -> Result<Vec<(usize, ReplicaIndex)>> {
    let start = lattice.wrap_state(state)?;
    check_start(state, state.t, lattice)?;
    Ok(start)
}

/// `sigma * int (W(s) - W(t)) ds` per coordinate.
fn noise_integral(noise: &StepNoise, sigma: f64) -> Vec<f64> {
    (0..noise.dim()).map(|k| sigma * noise.integral(k)).collect()
}

fn step_em(state: &mut SystemState, params: &SimParams, lattice: &DeformingLattice, noise: &StepNoise) -> Result<StepRecord> {
    let start = wrap_start(state, lattice)?;
    let (t, dt) = (state.t, noise.dt);
    let f = drift_force(&state.p, &state.q, params, lattice, t, PositionConvention::Canonical)?;
    let kick = params.sigma * dt.sqrt();
    for k in 0..state.dim() {
        state.q[k] += state.p[k] * dt;
        state.p[k] += f[k] * dt + kick * noise.eta[k];
    }
    Ok(StepRecord { start, mid: Vec::new() })
}

fn step_symplectic_a(
    state: &mut SystemState,
    params: &SimParams,
    lattice: &DeformingLattice,
    noise: &StepNoise,
    remap_mid_step: bool,
) -> Result<StepRecord> {
    let start = wrap_start(state, lattice)?;
    let (t, dt) = (state.t, noise.dt);
    for k in 0..state.dim() {
        state.q[k] += state.p[k] * dt;
    }
    let mid = if remap_mid_step { lattice.wrap_state_at(state, t)? } else { Vec::new() };
    let f = drift_force(&state.p, &state.q, params, lattice, t + dt, PositionConvention::Unwrapped)?;
    let kick = params.sigma * dt.sqrt();
    for k in 0..state.dim() {
        state.p[k] += f[k] * dt + kick * noise.eta[k];
    }
    Ok(StepRecord { start, mid })
}

fn step_se_b(state: &mut SystemState, params: &SimParams, lattice: &DeformingLattice, noise: &StepNoise) -> Result<StepRecord> {
    let start = wrap_start(state, lattice)?;
    let (t, dt) = (state.t, noise.dt);
    let grad = params.forces.forces(&state.q, lattice, t)?;
    let kick = params.sigma * dt.sqrt();
    let gamma = params.gamma;
    for k in 0..state.dim() {
        let a = params.flow.rate(k);
        let rhs = state.p[k] + (grad[k] + gamma * a * state.q[k]) * dt + kick * noise.eta[k];
        state.p[k] = rhs / (1.0 + (gamma - a) * dt);
        state.q[k] += state.p[k] * dt;
    }
    Ok(StepRecord { start, mid: Vec::new() })
}

fn step_abapo_impl(
    state: &mut SystemState,
    params: &SimParams,
    lattice: &DeformingLattice,
    noise: &StepNoise,
    remap_mid_step: bool,
) -> Result<StepRecord> {
    let start = wrap_start(state, lattice)?;
    let (t, dt) = (state.t, noise.dt);
    let n = state.dim();
    let half = 0.5 * dt;

    let f0 = params.forces.forces(&state.q, lattice, t)?;
    for k in 0..n {
        state.p[k] += half * f0[k];
        state.q[k] += dt * state.p[k];
    }
    let mid = if remap_mid_step { lattice.wrap_state_at(state, t)? } else { Vec::new() };
    let f1 = params.forces.forces(&state.q, lattice, t + dt)?;

    let gamma = params.gamma;
    let decay = (-gamma * dt).exp();
    let spread = (-(-2.0 * gamma * dt).exp_m1() / params.beta).sqrt();
    let xi = noise.ou_xi(gamma);
    for k in 0..n {
        let a = params.flow.rate(k);
        let mut p = state.p[k] + half * f1[k];
        p *= (a * dt).exp();
        state.p[k] = decay * p + (1.0 - decay) * a * state.q[k] + spread * xi[k];
    }
    Ok(StepRecord { start, mid })
}

fn step_soile_a(state: &mut SystemState, params: &SimParams, lattice: &DeformingLattice, noise: &StepNoise) -> Result<StepRecord> {
    let start = wrap_start(state, lattice)?;
    let (t, dt) = (state.t, noise.dt);
    let n = state.dim();
    let f0 = drift_force(&state.p, &state.q, params, lattice, t, PositionConvention::Canonical)?;
    let g = noise_integral(noise, params.sigma);
    let q1: Vec<f64> = (0..n)
        .map(|k| state.q[k] + state.p[k] * dt + 0.5 * f0[k] * dt * dt + g[k])
        .collect();
    let f1 = drift_force(&state.p, &q1, params, lattice, t + dt, PositionConvention::Unwrapped)?;
    let kick = params.sigma * dt.sqrt();
    for k in 0..n {
        let damp = params.flow.rate(k) - params.gamma;
        state.p[k] += 0.5 * (f1[k] + f0[k]) * dt
            + kick * noise.eta[k]
            + damp * (0.5 * f0[k] * dt * dt + g[k]);
    }
    state.q = q1;
    Ok(StepRecord { start, mid: Vec::new() })
}

fn step_soile_b(state: &mut SystemState, params: &SimParams, lattice: &DeformingLattice, noise: &StepNoise) -> Result<StepRecord> {
    let start = wrap_start(state, lattice)?;
    let (t, dt) = (state.t, noise.dt);
    let n = state.dim();
    let sigma = params.sigma;
    let kick = 0.5 * sigma * dt.sqrt();
    let dt32 = dt.powf(1.5);
    let q_noise = match params.soile_b {
        SoileBNoise::ItoMatched => 1.0 / (2.0 * SQRT_3),
        SoileBNoise::AsPrinted => 1.0 / SQRT_3,
    };
    // half of the (A - gamma) correction, shared by both half-kicks
    let correction = |k: usize, f: f64| -> f64 {
        let damp = params.flow.rate(k) - params.gamma;
        0.25 * damp * (0.5 * f * dt * dt + sigma * dt32 * (0.5 * noise.eta[k] + noise.zeta[k] / SQRT_3))
    };

    let f0 = drift_force(&state.p, &state.q, params, lattice, t, PositionConvention::Canonical)?;
    let mut p_half = vec![0.0; n];
    for k in 0..n {
        p_half[k] = state.p[k] + 0.5 * f0[k] * dt + kick * noise.eta[k] + correction(k, f0[k]);
        state.q[k] += p_half[k] * dt + sigma * dt32 * q_noise * noise.zeta[k];
    }
    let f1 = drift_force(&p_half, &state.q, params, lattice, t + dt, PositionConvention::Unwrapped)?;
    for k in 0..n {
        state.p[k] = p_half[k] + 0.5 * f1[k] * dt + kick * noise.eta[k] + correction(k, f1[k]);
    }
    Ok(StepRecord { start, mid: Vec::new() })
}

/// Second-order Ito-Taylor expansion of the exact flow. Never wraps; refuses
/// states that start or end outside the canonical cell.
fn step_reference(state: &mut SystemState, params: &SimParams, lattice: &DeformingLattice, noise: &StepNoise) -> Result<StepRecord> {
    let (t, dt) = (state.t, noise.dt);
    if let Some(particle) = lattice.first_outside(&state.q, t) {
        return Err(NeldError::ReferenceCrossing { particle });
    }
    let n = state.dim();
    let f = drift_force(&state.p, &state.q, params, lattice, t, PositionConvention::Unwrapped)?;
    let hp = params.forces.hessian_vec(&state.q, &state.p, lattice, t)?;
    let g = noise_integral(noise, params.sigma);
    let kick = params.sigma * dt.sqrt();
    let gamma = params.gamma;
    let mut q1 = vec![0.0; n];
    for k in 0..n {
        let a = params.flow.rate(k);
        let damp = a - gamma;
        q1[k] = state.q[k] + state.p[k] * dt + 0.5 * f[k] * dt * dt + g[k];
        let second = -hp[k] + gamma * a * state.p[k] + damp * f[k];
        state.p[k] += f[k] * dt + kick * noise.eta[k] + 0.5 * second * dt * dt + damp * g[k];
    }
    if let Some(particle) = lattice.first_outside(&q1, t + dt) {
        return Err(NeldError::ReferenceCrossing { particle });
    }
    state.q = q1;
    Ok(StepRecord::default())
}
