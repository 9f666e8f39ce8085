//! Plain-text state snapshots.
//!
//! ```text
//! t L_x L_y L_z N
//! qx qy qz px py pz      (N lines)
//! ```
//!
//! Every number carries 17 significant digits, so a round trip is exact.

use std::io::{BufRead, Write};

use crate::error::{NeldError, Result};
use crate::lattice::DeformingLattice;
use crate::state::{SystemState, Vec3};

pub fn write_snapshot<W: Write>(mut w: W, state: &SystemState, lattice: &DeformingLattice) -> Result<()> {
    let edges = lattice.edges_at(state.t);
    writeln!(
        w,
        "{:.16e} {:.16e} {:.16e} {:.16e} {}",
        state.t,
        edges[0],
        edges[1],
        edges[2],
        state.particles()
    )?;
    for i in 0..state.particles() {
        let (q, p) = (state.position(i), state.momentum(i));
        writeln!(
            w,
            "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            q[0], q[1], q[2], p[0], p[1], p[2]
        )?;
    }
    Ok(())
}

fn malformed(detail: String) -> NeldError {
    NeldError::Format { what: "snapshot", detail }
}

fn numbers(line: &str, expected: usize, line_no: usize) -> Result<Vec<f64>> {
    let values = line
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|e| malformed(format!("line {line_no}: '{tok}': {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != expected {
        return Err(malformed(format!("line {line_no}: expected {expected} fields, found {}", values.len())));
    }
    Ok(values)
}

/// Returns the state and the edge lengths recorded in the header.
pub fn read_snapshot<R: BufRead>(r: R) -> Result<(SystemState, Vec3)> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| malformed("empty input".into()))?;
    let header = header?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(malformed(format!("line 1: expected 't L_x L_y L_z N', found '{header}'")));
    }
    let head = numbers(&fields[..4].join(" "), 4, 1)?;
    let n: usize = fields[4].parse().map_err(|e| malformed(format!("line 1: particle count: {e}")))?;
    let mut q = Vec::with_capacity(3 * n);
    let mut p = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| malformed(format!("expected {n} particle lines")))?;
        let v = numbers(&line?, 6, idx + 1)?;
        q.extend_from_slice(&v[..3]);
        p.extend_from_slice(&v[3..]);
    }
    let state = SystemState::new(q, p, head[0])?;
    Ok((state, [head[1], head[2], head[3]]))
}
