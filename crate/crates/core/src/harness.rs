//! Equilibration, coupled step-size ladders, pathwise errors and local
//! truncation slopes.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{NeldError, Result};
use crate::integrators::{step, SchemeId, SimParams, SoileBNoise};
use crate::lattice::{nearest_image_count, DeformingLattice, FlowMatrix};
use crate::noise::{NoisePath, StepNoise};
use crate::potential::{ForceField, WCA_CUTOFF};
use crate::state::SystemState;

/// Closest allowed spacing of the initial sublattice.
const MIN_SPACING: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub particles: usize,
    pub box_side: f64,
    pub flow_rates: [f64; 3],
    pub gamma: f64,
    pub beta: f64,
    pub dt_base: f64,
    pub t_end: f64,
    pub t_eq: f64,
    pub runs: usize,
    pub ladder_levels: u32,
    pub schemes: Vec<SchemeId>,
    pub seed: u64,
    pub checkpoint_stride: usize,
    pub soile_b_noise: SoileBNoise,
    pub use_cell_list: bool,
}

impl Default for ExperimentConfig {
    /// Desk-scale setup: 216 particles at the density of 1728 in a box of 15.
    fn default() -> Self {
        Self {
            particles: 216,
            box_side: 7.5,
            flow_rates: [0.2, -0.1, -0.1],
            gamma: 1.0,
            beta: 1.0,
            dt_base: 1.0 / 20480.0,
            t_end: 0.25,
            t_eq: 1.0,
            runs: 32,
            ladder_levels: 5,
            schemes: SchemeId::INTEGRATORS.to_vec(),
            seed: 20240601,
            checkpoint_stride: 1,
            soile_b_noise: SoileBNoise::ItoMatched,
            use_cell_list: true,
        }
    }
}

fn whole(x: f64) -> Option<usize> {
    let r = x.round();
    ((x - r).abs() <= 1e-9 * r.max(1.0) && r >= 1.0).then_some(r as usize)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NeldError::InvalidParameter(msg));
        if self.particles == 0 {
            return bad("number_of_particles must be positive".into());
        }
        if self.runs == 0 {
            return bad("runs must be positive".into());
        }
        if self.ladder_levels < 2 || self.ladder_levels > 20 {
            return bad(format!("ladder_levels {} must be between 2 and 20", self.ladder_levels));
        }
        if self.checkpoint_stride == 0 {
            return bad("checkpoint_stride must be positive".into());
        }
        if !(self.dt_base > 0.0 && self.dt_base.is_finite()) {
            return bad(format!("time_step {} must be positive", self.dt_base));
        }
        if !(self.t_eq >= 0.0 && self.t_eq.is_finite()) {
            return bad(format!("equilibration_time {} must be >= 0", self.t_eq));
        }
        if self.schemes.is_empty() {
            return bad("no schemes selected".into());
        }
        if self.t_eq > 0.0 && whole(self.t_eq / self.dt_base).is_none() {
            return bad(format!("equilibration_time {} is not a multiple of time_step {}", self.t_eq, self.dt_base));
        }
        let grid = self.dt_base * self.block_steps() as f64 * self.checkpoint_stride as f64;
        if whole(self.t_end / grid).is_none() {
            return bad(format!(
                "simulation_time {} is not a positive multiple of the checkpoint interval {grid}",
                self.t_end
            ));
        }
        let k = sublattice_side(self.particles);
        if self.box_side / (k as f64) < MIN_SPACING {
            return bad(format!(
                "{} particles do not fit a cubic sublattice in a box of side {}",
                self.particles, self.box_side
            ));
        }
        SimParams::new(self.gamma, self.beta, self.flow()?, ForceField::wca())?;
        self.lattice()?;
        Ok(())
    }

    pub fn flow(&self) -> Result<FlowMatrix> {
        FlowMatrix::diagonal(self.flow_rates)
    }

    pub fn params(&self) -> Result<SimParams> {
        let forces = ForceField::wca().with_cells(self.use_cell_list);
        Ok(SimParams::new(self.gamma, self.beta, self.flow()?, forces)?.with_soile_b_noise(self.soile_b_noise))
    }

    /// The deforming cell, checked against the interaction range up to `t_end`.
    pub fn lattice(&self) -> Result<DeformingLattice> {
        DeformingLattice::with_guard([self.box_side; 3], self.flow()?, self.t_end, WCA_CUTOFF)
    }

    /// Fine steps per coarsest step.
    pub fn block_steps(&self) -> usize {
        1usize << (self.ladder_levels - 1)
    }

    pub fn fine_steps(&self) -> usize {
        (self.t_end / self.dt_base).round() as usize
    }

    pub fn checkpoints(&self) -> usize {
        self.fine_steps() / (self.block_steps() * self.checkpoint_stride)
    }

    /// Step size of ladder level `m`.
    pub fn step_size(&self, level: u32) -> f64 {
        self.dt_base * (1u64 << level) as f64
    }

    /// `(equilibration seed, noise seed)` for run `r`.
    pub fn run_seeds(&self, run: usize) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(run as u64);
        (rng.next_u64(), rng.next_u64())
    }
}

fn sublattice_side(n: usize) -> usize {
    let mut k = (n as f64).cbrt().round() as usize;
    while k * k * k < n {
        k += 1;
    }
    k.max(1)
}

/// Gibbs-like initial condition: cubic sublattice, Maxwell-Boltzmann momenta,
/// then `t_eq` of SE-B without flow. The result sits at `t = 0`.
pub fn equilibrate(config: &ExperimentConfig, seed: u64) -> Result<SystemState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.particles;
    let k = sublattice_side(n);
    let spacing = config.box_side / k as f64;
    let mut q = Vec::with_capacity(3 * n);
    'fill: for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                if q.len() == 3 * n {
                    break 'fill;
                }
                q.extend([(i as f64 + 0.5) * spacing, (j as f64 + 0.5) * spacing, (l as f64 + 0.5) * spacing]);
            }
        }
    }
    let scale = (1.0 / config.beta).sqrt();
    let p: Vec<f64> = (0..3 * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    let mut state = SystemState::new(q, p, 0.0)?;

    let still = DeformingLattice::cubic(config.box_side, FlowMatrix::zero())?;
    let params = SimParams::new(
        config.gamma,
        config.beta,
        FlowMatrix::zero(),
        ForceField::wca().with_cells(config.use_cell_list),
    )?;
    let steps = (config.t_eq / config.dt_base).round() as usize;
    let mut noise = StepNoise::zeros(3 * n, config.dt_base);
    for _ in 0..steps {
        noise.eta.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
        step(SchemeId::SeB, &mut state, &params, &still, &noise)?;
    }
    still.wrap_state(&mut state)?;
    state.t = 0.0;
    Ok(state)
}

/// All ladder levels of one run, sampled at the common checkpoints.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub times: Vec<f64>,
    /// `states[m][c]`: level `m` at checkpoint `c`.
    pub states: Vec<Vec<SystemState>>,
}

/// Integrates every ladder level from `state0` with noise coarsened from one
/// fine path, one coarsest step at a time.
pub fn run_coupled(
    config: &ExperimentConfig,
    params: &SimParams,
    lattice: &DeformingLattice,
    state0: &SystemState,
    scheme: SchemeId,
    path: &NoisePath,
) -> Result<CoupledRun> {
    let levels = config.ladder_levels;
    let block = config.block_steps();
    let blocks = config.fine_steps() / block;
    if path.steps() < blocks * block || path.dim() != state0.dim() {
        return Err(NeldError::InvalidParameter(format!(
            "noise path of {} x {} does not cover {} steps x {}",
            path.steps(),
            path.dim(),
            blocks * block,
            state0.dim()
        )));
    }
    let h = config.dt_base;
    let mut current: Vec<SystemState> = (0..levels).map(|_| state0.clone()).collect();
    let mut out = CoupledRun { times: Vec::new(), states: vec![Vec::new(); levels as usize] };

    for b in 0..blocks {
        let noise = path.ladder_block(b, levels)?;
        for (m, steps) in noise.into_iter().enumerate() {
            let width = 1usize << m;
            for (j, mut ns) in steps.into_iter().enumerate() {
                let first = b * block + j * width;
                if scheme.uses_ou_noise() {
                    ns.xi = Some(path.ou_noise_steps(first, width, params.gamma()));
                }
                let state = &mut current[m];
                step(scheme, state, params, lattice, &ns).map_err(|e| {
                    NeldError::InvalidParameter(format!(
                        "{scheme} failed at level {m} (dt = {:e}), t = {:e}: {e}",
                        ns.dt, state.t
                    ))
                })?;
                state.t = (first + width) as f64 * h;
            }
        }
        if (b + 1) % config.checkpoint_stride == 0 {
            out.times.push(((b + 1) * block) as f64 * h);
            for (m, s) in current.iter().enumerate() {
                out.states[m].push(s.clone());
            }
        }
    }
    Ok(out)
}

/// `(|dq|_2, |dp|_2)` between two states at time `t`, each coordinate taken to
/// the nearest periodic image with the matching momentum shift.
pub fn replica_distance(a: &SystemState, b: &SystemState, lattice: &DeformingLattice, t: f64) -> (f64, f64) {
    let edges = lattice.edges_at(t);
    let flow = lattice.flow();
    let (mut sq, mut sp) = (0.0, 0.0);
    for k in 0..a.dim() {
        let edge = edges[k % 3];
        let d = a.q[k] - b.q[k];
        let n = nearest_image_count(d, edge);
        let dq = d - edge * n;
        let dp = a.p[k] - b.p[k] - flow.rate(k) * edge * n;
        sq += dq * dq;
        sp += dp * dp;
    }
    (sq.sqrt(), sp.sqrt())
}

/// Errors of one run, `[checkpoint][pair]`, where pair `j` compares levels `j` and `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunErrors {
    pub run: usize,
    pub q: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub run: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorSeries {
    MeanQ,
    RmsQ,
    MeanP,
    RmsP,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub scheme: SchemeId,
    pub dt_base: f64,
    pub times: Vec<f64>,
    pub runs_requested: usize,
    /// Successful runs in run order.
    pub runs: Vec<RunErrors>,
    pub failures: Vec<RunFailure>,
    pub mean_q: Vec<Vec<f64>>,
    pub rms_q: Vec<Vec<f64>>,
    pub mean_p: Vec<Vec<f64>>,
    pub rms_p: Vec<Vec<f64>>,
}

/// `log2(coarse / fine)`, undefined unless both errors are positive and finite.
pub fn order_estimate(fine: f64, coarse: f64) -> Option<f64> {
    (fine > 0.0 && coarse > 0.0 && fine.is_finite() && coarse.is_finite()).then(|| (coarse / fine).log2())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

impl ConvergenceReport {
    fn from_runs(scheme: SchemeId, config: &ExperimentConfig, times: Vec<f64>, runs: Vec<RunErrors>, failures: Vec<RunFailure>) -> Self {
        let checkpoints = times.len();
        let pairs = (config.ladder_levels - 1) as usize;
        let mut mean_q = vec![vec![0.0; pairs]; checkpoints];
        let mut rms_q = mean_q.clone();
        let mut mean_p = mean_q.clone();
        let mut rms_p = mean_q.clone();
        let count = runs.len() as f64;
        if !runs.is_empty() {
            for c in 0..checkpoints {
                for j in 0..pairs {
                    // fixed run order keeps the sums independent of scheduling
                    let (mut sq, mut sq2, mut sp, mut sp2) = (0.0, 0.0, 0.0, 0.0);
                    for r in &runs {
                        sq += r.q[c][j];
                        sq2 += r.q[c][j] * r.q[c][j];
                        sp += r.p[c][j];
                        sp2 += r.p[c][j] * r.p[c][j];
                    }
                    mean_q[c][j] = sq / count;
                    rms_q[c][j] = (sq2 / count).sqrt();
                    mean_p[c][j] = sp / count;
                    rms_p[c][j] = (sp2 / count).sqrt();
                }
            }
        } else {
            for table in [&mut mean_q, &mut rms_q, &mut mean_p, &mut rms_p] {
                table.iter_mut().flatten().for_each(|x| *x = f64::NAN);
            }
        }
        Self {
            scheme,
            dt_base: config.dt_base,
            times,
            runs_requested: config.runs,
            runs,
            failures,
            mean_q,
            rms_q,
            mean_p,
            rms_p,
        }
    }

    pub fn runs_completed(&self) -> usize {
        self.runs.len()
    }

    pub fn pairs(&self) -> usize {
        self.mean_q.first().map_or(0, |row| row.len())
    }

    pub fn series(&self, which: ErrorSeries) -> &Vec<Vec<f64>> {
        match which {
            ErrorSeries::MeanQ => &self.mean_q,
            ErrorSeries::RmsQ => &self.rms_q,
            ErrorSeries::MeanP => &self.mean_p,
            ErrorSeries::RmsP => &self.rms_p,
        }
    }

    /// `ord(t)` from pairs `j` and `j + 1` at checkpoint `c`.
    pub fn ord(&self, which: ErrorSeries, c: usize, j: usize) -> Option<f64> {
        let row = &self.series(which)[c];
        if j + 1 >= row.len() {
            return None;
        }
        order_estimate(row[j], row[j + 1])
    }

    /// Checkpoints in the second half of the time window.
    pub fn late_checkpoints(&self) -> std::ops::Range<usize> {
        let t_end = self.times.last().copied().unwrap_or(0.0);
        let first = self.times.iter().position(|&t| t > 0.5 * t_end).unwrap_or(self.times.len());
        first..self.times.len()
    }

    /// Median of the defined `ord(t)` values over the second half of the window.
    pub fn time_median_ord(&self, which: ErrorSeries, j: usize) -> Option<f64> {
        let mut values: Vec<f64> = self.late_checkpoints().filter_map(|c| self.ord(which, c, j)).collect();
        median(&mut values)
    }

    /// Per-run time-median of the position `ord(t)` for pair `j`.
    pub fn run_median_ords(&self, j: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| {
                let mut values: Vec<f64> = self
                    .late_checkpoints()
                    .filter(|&c| j + 1 < r.q[c].len())
                    .filter_map(|c| order_estimate(r.q[c][j], r.q[c][j + 1]))
                    .collect();
                median(&mut values)
            })
            .collect()
    }

    /// Sample standard deviation of [`ConvergenceReport::run_median_ords`].
    pub fn run_spread(&self, j: usize) -> Option<f64> {
        let ords = self.run_median_ords(j);
        if ords.len() < 2 {
            return None;
        }
        let mean = ords.iter().sum::<f64>() / ords.len() as f64;
        let var = ords.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (ords.len() - 1) as f64;
        Some(var.sqrt())
    }
}

fn run_errors(run: usize, config: &ExperimentConfig, lattice: &DeformingLattice, coupled: &CoupledRun) -> RunErrors {
    let pairs = (config.ladder_levels - 1) as usize;
    let mut q = Vec::with_capacity(coupled.times.len());
    let mut p = Vec::with_capacity(coupled.times.len());
    for (c, &t) in coupled.times.iter().enumerate() {
        let (mut rq, mut rp) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
        for j in 0..pairs {
            let mut fine = coupled.states[j][c].clone();
            let mut coarse = coupled.states[j + 1][c].clone();
            // both sides use the same canonical-cell convention before comparing
            let wrapped = lattice.wrap_state_at(&mut fine, t).and(lattice.wrap_state_at(&mut coarse, t));
            let (eq, ep) = match wrapped {
                Ok(_) => replica_distance(&fine, &coarse, lattice, t),
                Err(_) => (f64::NAN, f64::NAN),
            };
            rq.push(eq);
            rp.push(ep);
        }
        q.push(rq);
        p.push(rp);
    }
    RunErrors { run, q, p }
}

/// One report per configured scheme. All schemes of a run share its initial
/// state and noise path; runs execute on the current rayon pool.
pub fn convergence_experiment(config: &ExperimentConfig) -> Result<Vec<ConvergenceReport>> {
    config.validate()?;
    let params = config.params()?;
    let lattice = config.lattice()?;
    let per_run: Vec<Vec<std::result::Result<RunErrors, RunFailure>>> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            let (eq_seed, noise_seed) = config.run_seeds(run);
            let setup = equilibrate(config, eq_seed).and_then(|s0| {
                let path = NoisePath::sample(noise_seed, config.dt_base, config.fine_steps(), s0.dim())?;
                Ok((s0, path))
            });
            let (state0, path) = match setup {
                Ok(v) => v,
                Err(e) => {
                    let message = format!("setup failed: {e}");
                    return config.schemes.iter().map(|_| Err(RunFailure { run, message: message.clone() })).collect();
                }
            };
            config
                .schemes
                .iter()
                .map(|&scheme| {
                    run_coupled(config, &params, &lattice, &state0, scheme, &path)
                        .map(|coupled| run_errors(run, config, &lattice, &coupled))
                        .map_err(|e| RunFailure { run, message: e.to_string() })
                })
                .collect()
        })
        .collect();

    let checkpoints = config.checkpoints();
    let interval = config.dt_base * (config.block_steps() * config.checkpoint_stride) as f64;
    let times: Vec<f64> = (1..=checkpoints).map(|c| c as f64 * interval).collect();
    Ok(config
        .schemes
        .iter()
        .enumerate()
        .map(|(s, &scheme)| {
            let mut runs = Vec::new();
            let mut failures = Vec::new();
            for outcome in per_run.iter().map(|r| r[s].clone()) {
                match outcome {
                    Ok(errors) => runs.push(errors),
                    Err(f) => failures.push(f),
                }
            }
            ConvergenceReport::from_runs(scheme, config, times.clone(), runs, failures)
        })
        .collect())
}

/// Least-squares line through `(log2 dt, log2 error)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// RMS deviation from the line, in log2 units.
    pub residual: f64,
}

pub fn fit_slope(dts: &[f64], errors: &[f64]) -> Option<SlopeFit> {
    if dts.len() < 2 || dts.len() != errors.len() || errors.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return None;
    }
    let x: Vec<f64> = dts.iter().map(|d| d.log2()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    Some(SlopeFit { slope, intercept, residual })
}

/// Step sizes of the one-step truncation tests.
pub const TRUNCATION_STEPS: [f64; 5] = [1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5];

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationReport {
    pub scheme: SchemeId,
    /// Compared against the corrected twin (true) or the reference step (false).
    pub crossing: bool,
    pub deterministic: bool,
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub fit: Option<SlopeFit>,
}

/// A frozen interior configuration: a small interacting cluster in the middle
/// of the cell, plus (for crossing tests) one free particle placed so that it
/// crosses the `+x` face halfway through the step.
#[derive(Debug, Clone)]
pub struct TruncationSetup {
    pub params: SimParams,
    pub lattice: DeformingLattice,
    pub cluster: SystemState,
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
}

const CROSSING_SPEED: f64 = 1.0;

impl TruncationSetup {
    pub fn new(config: &ExperimentConfig, deterministic: bool) -> Result<Self> {
        let params = config.params()?;
        let lattice = DeformingLattice::cubic(config.box_side, config.flow()?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let centre = 0.5 * config.box_side - 0.5;
        let mut q = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..2 {
                    for c in [i, j, l] {
                        q.push(centre + c as f64 + rng.gen_range(-0.03..0.03));
                    }
                }
            }
        }
        let p: Vec<f64> = (0..q.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dim = q.len() + 3;
        let mut normal = || -> f64 { if deterministic { 0.0 } else { StandardNormal.sample(&mut rng) } };
        let eta = (0..dim).map(|_| normal()).collect();
        let zeta = (0..dim).map(|_| normal()).collect();
        Ok(Self { params, lattice, cluster: SystemState::new(q, p, 0.0)?, eta, zeta })
    }

    /// The state for step size `dt`; the extra particle crosses mid-step when
    /// `crossing` holds and stays well inside the cell otherwise.
    pub fn state(&self, dt: f64, crossing: bool) -> SystemState {
        let edge = self.lattice.edges_at(0.0)[0];
        let x = if crossing { edge - 0.5 * CROSSING_SPEED * dt } else { 1.0 };
        let mut s = self.cluster.clone();
        s.q.extend([x, 1.0, 1.0]);
        s.p.extend([CROSSING_SPEED, 0.0, 0.0]);
        s
    }

    pub fn noise(&self, dt: f64) -> StepNoise {
        StepNoise { dt, eta: self.eta.clone(), zeta: self.zeta.clone(), xi: None }
    }
}

/// One-step error against the reference expansion (interior) or against the
/// corrected twin (crossing), over [`TRUNCATION_STEPS`].
pub fn truncation_experiment(
    config: &ExperimentConfig,
    scheme: SchemeId,
    crossing: bool,
    deterministic: bool,
) -> Result<TruncationReport> {
    let setup = TruncationSetup::new(config, deterministic)?;
    let (comparison, compare_failed) = if crossing {
        (scheme.corrected_twin()?, true)
    } else if scheme == SchemeId::Reference {
        return Err(NeldError::InvalidParameter("the reference step cannot be compared with itself".into()));
    } else {
        (SchemeId::Reference, false)
    };
    let mut errors = Vec::with_capacity(TRUNCATION_STEPS.len());
    for &dt in &TRUNCATION_STEPS {
        let start = setup.state(dt, crossing && compare_failed);
        let noise = setup.noise(dt);
        let mut a = start.clone();
        let mut b = start;
        step(scheme, &mut a, &setup.params, &setup.lattice, &noise)?;
        step(comparison, &mut b, &setup.params, &setup.lattice, &noise)?;
        let (eq, ep) = replica_distance(&a, &b, &setup.lattice, dt);
        errors.push((eq * eq + ep * ep).sqrt());
    }
    let fit = fit_slope(&TRUNCATION_STEPS, &errors);
    Ok(TruncationReport { scheme, crossing, deterministic, dts: TRUNCATION_STEPS.to_vec(), errors, fit })
}

/// Failed scheme against its twin on the non-crossing state: zero for every dt.
pub fn twin_gap_without_crossing(config: &ExperimentConfig, scheme: SchemeId) -> Result<Vec<f64>> {
    let setup = TruncationSetup::new(config, false)?;
    let twin = scheme.corrected_twin()?;
    TRUNCATION_STEPS
        .iter()
        .map(|&dt| {
            let noise = setup.noise(dt);
            let mut a = setup.state(dt, false);
            let mut b = a.clone();
            step(scheme, &mut a, &setup.params, &setup.lattice, &noise)?;
            step(twin, &mut b, &setup.params, &setup.lattice, &noise)?;
            let (eq, ep) = replica_distance(&a, &b, &setup.lattice, dt);
            Ok((eq * eq + ep * ep).sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            particles: 27,
            box_side: 3.6,
            t_end: 0.02,
            t_eq: 0.05,
            dt_base: 1.0 / 1600.0,
            runs: 2,
            ladder_levels: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.fine_steps(), 5120);
        assert_eq!(c.checkpoints(), 320);
        let mut bad = c.clone();
        bad.t_end = 0.2501;
        assert!(bad.validate().is_err());
        let mut crowded = c.clone();
        crowded.particles = 1000;
        assert!(crowded.validate().is_err());
        let mut tight = c;
        tight.box_side = 2.0;
        assert!(tight.validate().is_err());
    }

    #[test]
    fn zero_step_equilibration_returns_the_sublattice() {
        let config = ExperimentConfig { t_eq: 0.0, ..small() };
        let s = equilibrate(&config, 1).unwrap();
        assert_eq!(s.particles(), 27);
        assert_eq!(s.position(0), [0.6, 0.6, 0.6]);
        assert_eq!(s.position(26), [3.0, 3.0, 3.0]);
        assert_eq!(s.t, 0.0);
    }

    #[test]
    fn equilibration_is_deterministic_and_thermal() {
        let config = ExperimentConfig { t_eq: 0.05, dt_base: 1.0 / 2000.0, t_end: 0.008, ..ExperimentConfig::default() };
        let a = equilibrate(&config, 4).unwrap();
        let b = equilibrate(&config, 4).unwrap();
        assert_eq!(a, b);
        let var = a.p.iter().map(|x| x * x).sum::<f64>() / a.p.len() as f64;
        assert!(var > 0.9 && var < 1.1, "momentum variance {var}");
        assert!(config.lattice().unwrap().first_outside(&a.q, 0.0).is_none());
    }

    #[test]
    fn identical_trajectories_give_zero_error() {
        let config = ExperimentConfig { beta: f64::INFINITY, gamma: 0.0, flow_rates: [0.0; 3], ..small() };
        let params = SimParams::new(0.0, f64::INFINITY, FlowMatrix::zero(), ForceField::ideal_gas()).unwrap();
        let lattice = config.lattice().unwrap();
        let s0 = SystemState::new(vec![1.0; 6], vec![0.0; 6], 0.0).unwrap();
        let path = NoisePath::sample(1, config.dt_base, config.fine_steps(), 6).unwrap();
        let run = run_coupled(&config, &params, &lattice, &s0, SchemeId::Em, &path).unwrap();
        let errs = run_errors(0, &config, &lattice, &run);
        assert!(errs.q.iter().flatten().all(|&e| e == 0.0));
        let report = ConvergenceReport::from_runs(SchemeId::Em, &config, run.times.clone(), vec![errs], vec![]);
        assert_eq!(report.ord(ErrorSeries::MeanQ, 0, 0), None);
        assert_eq!(report.time_median_ord(ErrorSeries::MeanQ, 0), None);
    }

    #[test]
    fn linear_flow_ladder_converges_at_first_order() {
        // free particle, no noise: every level tracks the exact linear flow
        let config = ExperimentConfig { beta: f64::INFINITY, t_end: 0.5, dt_base: 1.0 / 512.0, ladder_levels: 4, ..small() };
        let params = SimParams::new(1.0, f64::INFINITY, config.flow().unwrap(), ForceField::ideal_gas()).unwrap();
        let lattice = config.lattice().unwrap();
        let s0 = SystemState::new(vec![1.0, 1.5, 2.0], vec![0.3, -0.2, 0.1], 0.0).unwrap();
        let path = NoisePath::sample(1, config.dt_base, config.fine_steps(), 3).unwrap();
        let run = run_coupled(&config, &params, &lattice, &s0, SchemeId::Em, &path).unwrap();
        let errs = run_errors(0, &config, &lattice, &run);
        let last = errs.q.last().unwrap();
        for j in 0..last.len() - 1 {
            let ord = order_estimate(last[j], last[j + 1]).unwrap();
            assert!((ord - 1.0).abs() < 0.1, "ord {ord}");
        }
    }

    #[test]
    fn checkpoints_align_and_level_zero_is_ladder_independent() {
        let config = small();
        let params = config.params().unwrap();
        let lattice = config.lattice().unwrap();
        let s0 = equilibrate(&config, 3).unwrap();
        let path = NoisePath::sample(5, config.dt_base, config.fine_steps(), s0.dim()).unwrap();
        for scheme in [SchemeId::Em, SchemeId::Abapo] {
            let three = run_coupled(&config, &params, &lattice, &s0, scheme, &path).unwrap();
            let two_cfg = ExperimentConfig { ladder_levels: 2, checkpoint_stride: 2, ..config.clone() };
            let two = run_coupled(&two_cfg, &params, &lattice, &s0, scheme, &path).unwrap();
            assert_eq!(three.times, two.times);
            assert_eq!(three.states[0], two.states[0]);
            for level in &three.states {
                for (s, &t) in level.iter().zip(&three.times) {
                    assert_eq!(s.t, t);
                }
            }
        }
    }

    #[test]
    fn experiment_accounting_and_determinism() {
        let config = ExperimentConfig { schemes: vec![SchemeId::Em, SchemeId::SeB], ..small() };
        let a = convergence_experiment(&config).unwrap();
        let b = convergence_experiment(&config).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert_eq!(r.runs_completed() + r.failures.len(), r.runs_requested);
            assert_eq!(r.times.len(), config.checkpoints());
            assert!(r.mean_q.iter().flatten().all(|&e| e >= 0.0));
            assert!(r.rms_q.iter().flatten().zip(r.mean_q.iter().flatten()).all(|(rms, mean)| rms >= mean));
        }
    }

    #[test]
    fn failures_are_counted() {
        // the reference expansion refuses to follow particles out of the cell
        let config = ExperimentConfig { t_eq: 0.0, t_end: 1.0, schemes: vec![SchemeId::Reference], ..small() };
        let report = &convergence_experiment(&config).unwrap()[0];
        assert_eq!(report.runs_completed() + report.failures.len(), 2);
        assert!(!report.failures.is_empty());
        assert!(report.failures[0].message.contains("reference"));
    }

    #[test]
    fn slope_fit() {
        let dts = [1.0, 0.5, 0.25];
        let errs: Vec<f64> = dts.iter().map(|d: &f64| 3.0 * d.powi(2)).collect();
        let fit = fit_slope(&dts, &errs).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
        assert!(fit_slope(&dts, &[1.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn median_and_order() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
        assert_eq!(order_estimate(1.0, 2.0), Some(1.0));
        assert_eq!(order_estimate(0.0, 2.0), None);
    }

    #[test]
    fn truncation_contracts() {
        let config = ExperimentConfig::default();
        assert!(truncation_experiment(&config, SchemeId::Em, true, false).is_err());
        assert!(truncation_experiment(&config, SchemeId::Reference, false, false).is_err());
        let gaps = twin_gap_without_crossing(&config, SchemeId::SeA).unwrap();
        assert!(gaps.iter().all(|&g| g == 0.0));
    }
}
