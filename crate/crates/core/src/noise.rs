//! The single source of randomness for a run.
//!
//! A [`NoisePath`] holds, for every fine step of width `h` and every
//! coordinate, the pair `(eta, zeta)` of independent standard normals that
//! encode the Brownian increment and its time integral over that step:
//!
//! ```text
//! dW = sqrt(h) eta
//! I  = int_{t0}^{t0+h} (W(s) - W(t0)) ds = h^{3/2} (eta / 2 + zeta / (2 sqrt 3))
//! ```
//!
//! Adjacent steps combine exactly into the pair for a step of width `2h`, so
//! one fine path drives every step size of a convergence ladder.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{NeldError, Result};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Noise consumed by one integrator step of width `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub dt: f64,
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Normalised Ornstein-Uhlenbeck functional for splitting schemes. When
    /// absent it is reconstructed from `(eta, zeta)`; see [`StepNoise::ou_xi`].
    pub xi: Option<Vec<f64>>,
}

impl StepNoise {
    pub fn new(dt: f64, eta: Vec<f64>, zeta: Vec<f64>) -> Result<Self> {
        if eta.len() != zeta.len() {
            return Err(NeldError::DimensionMismatch { expected: eta.len(), found: zeta.len() });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(NeldError::InvalidParameter(format!("step size {dt} must be positive")));
        }
        Ok(Self { dt, eta, zeta, xi: None })
    }

    /// Noise-free step.
    pub fn zeros(dim: usize, dt: f64) -> Self {
        Self { dt, eta: vec![0.0; dim], zeta: vec![0.0; dim], xi: None }
    }

    pub fn with_xi(mut self, xi: Vec<f64>) -> Self {
        self.xi = Some(xi);
        self
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    /// `W(t0 + dt) - W(t0)` for coordinate `k`.
    pub fn increment(&self, k: usize) -> f64 {
        self.dt.sqrt() * self.eta[k]
    }

    /// `int (W(s) - W(t0)) ds` over the step for coordinate `k`.
    pub fn integral(&self, k: usize) -> f64 {
        self.dt.powf(1.5) * (0.5 * self.eta[k] + self.zeta[k] / (2.0 * SQRT_3))
    }

    /// The normalised OU functional `xi` used by the exact O-step.
    ///
    /// Returns the stored value if present. Otherwise it is expanded from the
    /// step's own increments:
    /// `int exp(-gamma (t - s)) dW = dW - gamma I + O(dt^{5/2})`, divided by the
    /// exact standard deviation `sqrt((1 - exp(-2 gamma dt)) / (2 gamma))`.
    pub fn ou_xi(&self, gamma: f64) -> Vec<f64> {
        if let Some(xi) = &self.xi {
            return xi.clone();
        }
        let sd = ou_std(gamma, self.dt);
        (0..self.dim())
            .map(|k| (self.increment(k) - gamma * self.integral(k)) / sd)
            .collect()
    }
}

/// Standard deviation of `int_0^dt exp(-gamma (dt - s)) dW(s)`.
fn ou_std(gamma: f64, dt: f64) -> f64 {
    if gamma == 0.0 {
        dt.sqrt()
    } else {
        (-(-2.0 * gamma * dt).exp_m1() / (2.0 * gamma)).sqrt()
    }
}

/// Exact combination of two consecutive steps of width `h` into one of width `2h`.
///
/// With `I_k` and `dW_k` as in the module docs, the combined step has
/// `dW = dW_1 + dW_2` and `I = I_1 + I_2 + h dW_1`, which gives
/// `eta = (eta_1 + eta_2) / sqrt 2` and
/// `zeta = (sqrt 3 (eta_1 - eta_2) + zeta_1 + zeta_2) / (2 sqrt 2)`.
pub fn coarsen(first: &StepNoise, second: &StepNoise) -> Result<StepNoise> {
    let h = first.dt;
    if (second.dt - h).abs() > 1e-12 * h {
        return Err(NeldError::StepMismatch { expected: h, found: second.dt });
    }
    if first.dim() != second.dim() {
        return Err(NeldError::DimensionMismatch { expected: first.dim(), found: second.dim() });
    }
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let eta = first.eta.iter().zip(&second.eta).map(|(a, b)| (a + b) * inv_sqrt2).collect();
    let zeta = (0..first.dim())
        .map(|k| {
            (SQRT_3 * (first.eta[k] - second.eta[k]) + first.zeta[k] + second.zeta[k]) * (0.5 * inv_sqrt2)
        })
        .collect();
    Ok(StepNoise { dt: 2.0 * h, eta, zeta, xi: None })
}

/// Fine-grid noise for one run: `steps x dim` pairs of standard normals.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    seed: u64,
    h_fine: f64,
    steps: usize,
    dim: usize,
    eta: Vec<f64>,
    zeta: Vec<f64>,
}

impl NoisePath {
    /// Counter-based generation: row `k` comes from its own ChaCha stream keyed
    /// by `(seed, k)`, so every entry is a function of `(seed, k, i)` alone and
    /// rows can be produced in any order.
    pub fn sample(seed: u64, h_fine: f64, steps: usize, dim: usize) -> Result<Self> {
        if steps == 0 {
            return Err(NeldError::InvalidParameter("a noise path needs at least one step".into()));
        }
        if !(h_fine > 0.0 && h_fine.is_finite()) {
            return Err(NeldError::InvalidParameter(format!("fine step {h_fine} must be positive")));
        }
        let mut eta = vec![0.0; steps * dim];
        let mut zeta = vec![0.0; steps * dim];
        if dim > 0 {
            eta.par_chunks_mut(dim)
                .zip(zeta.par_chunks_mut(dim))
                .enumerate()
                .for_each(|(k, (er, zr))| fill_row(seed, k as u64, er, zr));
        }
        Ok(Self { seed, h_fine, steps, dim, eta, zeta })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn h_fine(&self) -> f64 {
        self.h_fine
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eta_row(&self, k: usize) -> &[f64] {
        &self.eta[k * self.dim..(k + 1) * self.dim]
    }

    pub fn zeta_row(&self, k: usize) -> &[f64] {
        &self.zeta[k * self.dim..(k + 1) * self.dim]
    }

    /// Fine step `k`.
    pub fn step(&self, k: usize) -> StepNoise {
        StepNoise {
            dt: self.h_fine,
            eta: self.eta_row(k).to_vec(),
            zeta: self.zeta_row(k).to_vec(),
            xi: None,
        }
    }

    fn check_level(&self, level: u32) -> Result<usize> {
        let width = 1usize << level;
        if self.steps % width != 0 {
            return Err(NeldError::Divisibility { steps: self.steps, level });
        }
        Ok(width)
    }

    /// Step `j` at width `2^level h`, built by pairwise coarsening.
    pub fn coarse_step(&self, level: u32, j: usize) -> Result<StepNoise> {
        let width = self.check_level(level)?;
        if (j + 1) * width > self.steps {
            return Err(NeldError::InvalidParameter(format!("coarse step {j} beyond the path")));
        }
        Ok(self.coarse_step_unchecked(level, j))
    }

    fn coarse_step_unchecked(&self, level: u32, j: usize) -> StepNoise {
        if level == 0 {
            return self.step(j);
        }
        let a = self.coarse_step_unchecked(level - 1, 2 * j);
        let b = self.coarse_step_unchecked(level - 1, 2 * j + 1);
        coarsen(&a, &b).expect("sibling steps share width and dimension")
    }

    /// The whole path at width `2^level h`.
    pub fn coarsen_ladder(&self, level: u32) -> Result<Vec<StepNoise>> {
        let width = self.check_level(level)?;
        let mut current: Vec<StepNoise> = (0..self.steps).map(|k| self.step(k)).collect();
        for _ in 0..level {
            current = current
                .chunks(2)
                .map(|pair| coarsen(&pair[0], &pair[1]))
                .collect::<Result<_>>()?;
        }
        debug_assert_eq!(current.len(), self.steps / width);
        Ok(current)
    }

    /// Noise for one block of `2^(levels-1)` fine steps at every level:
    /// entry `m` holds the `2^(levels-1-m)` steps of width `2^m h`.
    pub fn ladder_block(&self, block: usize, levels: u32) -> Result<Vec<Vec<StepNoise>>> {
        if levels == 0 {
            return Err(NeldError::InvalidParameter("a ladder needs at least one level".into()));
        }
        let width = self.check_level(levels - 1)?;
        if (block + 1) * width > self.steps {
            return Err(NeldError::InvalidParameter(format!("block {block} beyond the path")));
        }
        let mut out = Vec::with_capacity(levels as usize);
        out.push((block * width..(block + 1) * width).map(|k| self.step(k)).collect::<Vec<_>>());
        for m in 1..levels as usize {
            let next = out[m - 1]
                .chunks(2)
                .map(|pair| coarsen(&pair[0], &pair[1]))
                .collect::<Result<Vec<_>>>()?;
            out.push(next);
        }
        Ok(out)
    }

    /// Discrete OU functional over the time window `[t0, t0 + dt]`, which must
    /// start and end on fine grid points.
    pub fn ou_noise(&self, t0: f64, dt: f64, gamma: f64) -> Result<Vec<f64>> {
        let h = self.h_fine;
        let start = t0 / h;
        let len = dt / h;
        let aligned = |x: f64| (x - x.round()).abs() <= 1e-9 * x.abs().max(1.0);
        if !(aligned(start) && aligned(len)) || start < -0.5 || len < 0.5 {
            return Err(NeldError::MisalignedWindow { start: t0, len: dt, h });
        }
        let (start, len) = (start.round() as usize, len.round() as usize);
        if start + len > self.steps {
            return Err(NeldError::MisalignedWindow { start: t0, len: dt, h });
        }
        Ok(self.ou_noise_steps(start, len, gamma))
    }

    /// `sum_j w_j eta_j / sqrt(sum_j w_j^2)` with `w_j = exp(-gamma (t_end - s_{j+1}))`,
    /// i.e. the fine-grid stochastic convolution scaled to unit variance.
    pub fn ou_noise_steps(&self, start: usize, len: usize, gamma: f64) -> Vec<f64> {
        let weights: Vec<f64> = (0..len)
            .map(|j| (-gamma * (len - 1 - j) as f64 * self.h_fine).exp())
            .collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        let mut xi = vec![0.0; self.dim];
        for (j, w) in weights.iter().enumerate() {
            for (x, e) in xi.iter_mut().zip(self.eta_row(start + j)) {
                *x += w * e;
            }
        }
        xi.iter_mut().for_each(|x| *x /= norm);
        xi
    }

    /// Binary dump: little-endian `seed: u64, h_fine: f64, steps: u64, dim: u64`,
    /// then all `eta` rows and all `zeta` rows as `f64`, row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.h_fine.to_le_bytes())?;
        w.write_all(&(self.steps as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in self.eta.iter().chain(&self.zeta) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let seed = u64::from_le_bytes(next(&mut r)?);
        let h_fine = f64::from_le_bytes(next(&mut r)?);
        let steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let dim = u64::from_le_bytes(next(&mut r)?) as usize;
        let count = steps.checked_mul(dim).ok_or(NeldError::Format {
            what: "noise path",
            detail: "size overflow".into(),
        })?;
        let read_block = |r: &mut R| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes)?;
            Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let eta = read_block(&mut r)?;
        let zeta = read_block(&mut r)?;
        Ok(Self { seed, h_fine, steps, dim, eta, zeta })
    }
}

fn fill_row(seed: u64, row: u64, eta: &mut [f64], zeta: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row);
    for (e, z) in eta.iter_mut().zip(zeta.iter_mut()) {
        *e = StandardNormal.sample(&mut rng);
        *z = StandardNormal.sample(&mut rng);
    }
}
