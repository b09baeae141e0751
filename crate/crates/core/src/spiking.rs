//! Leaky-integrate-and-fire dynamics in a real-valued domain and in the
//! 12-bit integer domain of the digital neuron module.
//!
//! One step computes
//!
//! ```text
//! u[t] = leak * u[t-1] + drive[t] - r[t-1]
//! s[t] = u[t] >= v_th
//! r[t] = v_th * s[t]            (soft)
//!      = leak * u[t] * s[t]     (hard)
//! ```
//!
//! The reset term is produced in step `t` and subtracted in step `t + 1`.
//! In the integer domain the leak is an arithmetic right shift and the
//! potential saturates at the 12-bit bounds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quant::LeakCode;
use crate::tensor::Tensor;

pub const STATE_MIN: i32 = -2048;
pub const STATE_MAX: i32 = 2047;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetMode {
    #[default]
    Soft,
    Hard,
}

/// Real-valued neuron parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub v_th: f64,
    pub leak: f64,
    pub reset: ResetMode,
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0) {
            return Err(invalid(format!("threshold must be positive, got {}", self.v_th)));
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(invalid(format!("leak must lie in (0, 1], got {}", self.leak)));
        }
        Ok(())
    }
}

/// Integer neuron parameters as programmed into the digital module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntLifParams {
    pub v_th: i32,
    pub leak: LeakCode,
    pub reset: ResetMode,
}

impl IntLifParams {
    pub fn validate(&self) -> Result<()> {
        if self.v_th <= 0 || self.v_th > STATE_MAX {
            return Err(Error::Range {
                what: "integer threshold",
                value: self.v_th as i64,
                min: 1,
                max: STATE_MAX as i64,
            });
        }
        Ok(())
    }
}

/// Real-domain state: potential, pending reset, and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub u: Tensor<f64>,
    pub r: Tensor<f64>,
    pub t: usize,
}

impl LifState {
    pub fn zeros(dims: Vec<usize>) -> Self {
        Self {
            u: Tensor::filled(dims.clone(), 0.0),
            r: Tensor::filled(dims, 0.0),
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntLifState {
    pub u: Tensor<i32>,
    pub r: Tensor<i32>,
    pub t: usize,
}

impl IntLifState {
    pub fn zeros(dims: Vec<usize>) -> Self {
        Self {
            u: Tensor::filled(dims.clone(), 0),
            r: Tensor::filled(dims, 0),
            t: 0,
        }
    }
}

/// Scalar real update: returns `(u, spike, reset)`.
#[inline]
pub fn lif_update(u: f64, r: f64, drive: f64, p: &LifParams) -> (f64, bool, f64) {
    let u = p.leak * u + drive - r;
    let spike = u >= p.v_th;
    let r = match (spike, p.reset) {
        (false, _) => 0.0,
        (true, ResetMode::Soft) => p.v_th,
        (true, ResetMode::Hard) => p.leak * u,
    };
    (u, spike, r)
}

/// Scalar integer update: returns `(u, spike, reset)`.
#[inline]
pub fn lif_update_int(u: i32, r: i32, drive: i32, p: &IntLifParams) -> (i32, bool, i32) {
    let leaked = u >> p.leak.shift();
    let u = (leaked as i64 + drive as i64 - r as i64).clamp(STATE_MIN as i64, STATE_MAX as i64) as i32;
    let spike = u >= p.v_th;
    let r = match (spike, p.reset) {
        (false, _) => 0,
        (true, ResetMode::Soft) => p.v_th,
        (true, ResetMode::Hard) => u >> p.leak.shift(),
    };
    (u, spike, r)
}

fn check_dims(expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::Shape {
            axis: "drive",
            expected: expected.iter().product(),
            found: found.iter().product(),
        });
    }
    Ok(())
}

pub fn lif_step(state: &LifState, params: &LifParams, drive: &Tensor<f64>) -> Result<(Tensor<u8>, LifState)> {
    params.validate()?;
    check_dims(state.u.dims(), drive.dims())?;
    let n = drive.len();
    let (mut u, mut s, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (nu, ns, nr) = lif_update(state.u.data()[i], state.r.data()[i], drive.data()[i], params);
        u.push(nu);
        s.push(ns as u8);
        r.push(nr);
    }
    let dims = drive.dims().to_vec();
    Ok((
        Tensor::new(dims.clone(), s)?,
        LifState {
            u: Tensor::new(dims.clone(), u)?,
            r: Tensor::new(dims, r)?,
            t: state.t + 1,
        },
    ))
}

pub fn lif_step_int(
    state: &IntLifState,
    params: &IntLifParams,
    drive: &Tensor<i32>,
) -> Result<(Tensor<u8>, IntLifState)> {
    params.validate()?;
    check_dims(state.u.dims(), drive.dims())?;
    let n = drive.len();
    let (mut u, mut s, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (nu, ns, nr) = lif_update_int(state.u.data()[i], state.r.data()[i], drive.data()[i], params);
        u.push(nu);
        s.push(ns as u8);
        r.push(nr);
    }
    let dims = drive.dims().to_vec();
    Ok((
        Tensor::new(dims.clone(), s)?,
        IntLifState {
            u: Tensor::new(dims.clone(), u)?,
            r: Tensor::new(dims, r)?,
            t: state.t + 1,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub t: usize,
    pub u_mem: i32,
    pub spike: bool,
}

/// Per-step record of a single integer neuron.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn potentials(&self) -> Vec<i32> {
        self.steps.iter().map(|s| s.u_mem).collect()
    }

    pub fn spikes(&self) -> Vec<u8> {
        self.steps.iter().map(|s| s.spike as u8).collect()
    }

    /// CSV with header `t,umem,spike`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,umem,spike")?;
        for s in &self.steps {
            writeln!(w, "{},{},{}", s.t, s.u_mem, s.spike as u8)?;
        }
        Ok(())
    }
}

/// Replays a drive sequence through one integer neuron starting at rest.
pub fn trace(params: &IntLifParams, drives: &[i32]) -> Result<Trace> {
    params.validate()?;
    let (mut u, mut r) = (0, 0);
    let mut steps = Vec::with_capacity(drives.len());
    for (t, &d) in drives.iter().enumerate() {
        let (nu, s, nr) = lif_update_int(u, r, d, params);
        steps.push(TraceStep { t, u_mem: nu, spike: s });
        u = nu;
        r = nr;
    }
    Ok(Trace { steps })
}

/// Parses a drive file: integers separated by whitespace, commas or newlines;
/// `#` starts a comment.
pub fn parse_drives(text: &str) -> Result<Vec<i32>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v = tok.parse::<i32>().map_err(|_| Error::Format {
                kind: "drive",
                msg: format!("line {}: `{tok}` is not an integer", line_no + 1),
            })?;
            out.push(v);
        }
    }
    Ok(out)
}
