use crate::error::{NeldError, Result};

/// Three Cartesian components.
pub type Vec3 = [f64; 3];

/// Positions and momenta of `N` unit-mass particles, stored flat as
/// `[x0, y0, z0, x1, ...]`, together with the current time.
///
/// Positions are not required to lie in the canonical cell between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub t: f64,
}

impl SystemState {
    pub fn new(q: Vec<f64>, p: Vec<f64>, t: f64) -> Result<Self> {
        if q.len() != p.len() || q.len() % 3 != 0 {
            return Err(NeldError::InvalidParameter(format!(
                "positions ({}) and momenta ({}) must have equal length divisible by 3",
                q.len(),
                p.len()
            )));
        }
        let state = Self { q, p, t };
        state.check_finite()?;
        Ok(state)
    }

    pub fn from_particles(q: &[Vec3], p: &[Vec3], t: f64) -> Result<Self> {
        Self::new(q.concat(), p.concat(), t)
    }

    pub fn particles(&self) -> usize {
        self.q.len() / 3
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        [self.q[3 * i], self.q[3 * i + 1], self.q[3 * i + 2]]
    }

    pub fn momentum(&self, i: usize) -> Vec3 {
        [self.p[3 * i], self.p[3 * i + 1], self.p[3 * i + 2]]
    }

    /// Errors with the index of the first particle carrying a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        let bad = self
            .q
            .iter()
            .zip(&self.p)
            .position(|(q, p)| !q.is_finite() || !p.is_finite());
        match bad {
            Some(k) => Err(NeldError::NonFinite { particle: k / 3 }),
            None => Ok(()),
        }
    }
}
