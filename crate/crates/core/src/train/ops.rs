//! Forward and backward kernels used by the trainer.
//!
//! Activations are channels-last `[T, H, W, C]` with the time axis playing
//! the role of the batch axis for everything except the LIF recurrence.
//! Weight working copies are `[R, O]` with the row index
//! `r = (c * kh + ky) * kw + kx`, matching the flattened `[O, C, kh, kw]`
//! layout of stored weights.

use crate::crossbar::{adc_sample_value, full_scale, AdcModel, Mapping};
use crate::error::{invalid, Error, Result};
use crate::spiking::ResetMode;

/// `1 / (1 + alpha x^2)`: stand-in derivative of the spike step.
pub fn heaviside_surrogate(x: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(invalid(format!("surrogate width must be positive, got {alpha}")));
    }
    Ok(surrogate(x, alpha))
}

/// Same form, used for the sign / Heaviside partial-sum readouts.
pub fn binary_ps_surrogate(x: f64, alpha: f64) -> Result<f64> {
    heaviside_surrogate(x, alpha)
}

#[inline]
pub(crate) fn surrogate(x: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + alpha * x * x)
}

/// Smooth primitive of [`surrogate`], a soft spike in `(0, 1)`.
#[inline]
pub(crate) fn soft_spike(x: f64, alpha: f64) -> f64 {
    let r = alpha.sqrt();
    (r * x).atan() / r + 0.5
}

/// Lets a gradient through only where the corresponding cell holds a 1.
pub fn slicing_grad_mask(plane_grads: &[f64], mapped_bits: &[u8]) -> Result<Vec<f64>> {
    if plane_grads.len() != mapped_bits.len() {
        return Err(Error::Shape { axis: "slicing mask", expected: plane_grads.len(), found: mapped_bits.len() });
    }
    Ok(plane_grads.iter().zip(mapped_bits).map(|(&g, &b)| if b != 0 { g } else { 0.0 }).collect())
}

/// Channels-last activation sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c, data: vec![0.0; t * h * w * c] }
    }

    /// From a `[T, C, H, W]` spike array.
    pub fn from_tchw(t: usize, c: usize, h: usize, w: usize, spikes: &[u8]) -> Self {
        let mut a = Self::zeros(t, h, w, c);
        for ti in 0..t {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        a.data[((ti * h + y) * w + x) * c + ci] = spikes[((ti * c + ci) * h + y) * w + x] as f64;
                    }
                }
            }
        }
        a
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Geometry of a crossbar layer as seen by the kernels. Linear layers are a
/// convolution whose kernel spans the whole input with no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub o: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Calls `f(ky, kx, oy, ox)` for every output position fed by input `(iy, ix)`.
    #[inline]
    fn taps(&self, iy: usize, ix: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ky in 0..self.kh {
            let ny = iy + self.pad;
            if ny < ky || (ny - ky) % self.stride != 0 {
                continue;
            }
            let oy = (ny - ky) / self.stride;
            if oy >= self.oh {
                continue;
            }
            for kx in 0..self.kw {
                let nx = ix + self.pad;
                if nx < kx || (nx - kx) % self.stride != 0 {
                    continue;
                }
                let ox = (nx - kx) / self.stride;
                if ox >= self.ow {
                    continue;
                }
                f(ky, kx, oy, ox);
            }
        }
    }

    #[inline]
    fn row(&self, c: usize, ky: usize, kx: usize) -> usize {
        (c * self.kh + ky) * self.kw + kx
    }
}

/// Transposes `[O, R]` weights to the `[R, O]` working layout.
pub fn transpose_weights(w: &[f64], o: usize, rows: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for oi in 0..o {
        for r in 0..rows {
            t[r * o + oi] = w[oi * rows + r];
        }
    }
    t
}

/// Scatter convolution: zero inputs are skipped, so sparse spike trains are cheap.
pub fn conv_forward(g: &ConvGeom, wt: &[f64], x: &Act) -> Act {
    let mut out = Act::zeros(x.t, g.oh, g.ow, g.o);
    let o = g.o;
    for t in 0..x.t {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let base = ((t * g.h + iy) * g.w + ix) * g.c;
                for c in 0..g.c {
                    let xv = x.data[base + c];
                    if xv == 0.0 {
                        continue;
                    }
                    g.taps(iy, ix, |ky, kx, oy, ox| {
                        let wr = &wt[g.row(c, ky, kx) * o..][..o];
                        let orow = &mut out.data[((t * g.oh + oy) * g.ow + ox) * o..][..o];
                        for (a, &wv) in orow.iter_mut().zip(wr) {
                            *a += xv * wv;
                        }
                    });
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input of [`conv_forward`].
pub fn conv_input_grad(g: &ConvGeom, wt: &[f64], t_n: usize, delta: &[f64]) -> Vec<f64> {
    let o = g.o;
    let mut gx = vec![0.0; t_n * g.h * g.w * g.c];
    for t in 0..t_n {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let base = ((t * g.h + iy) * g.w + ix) * g.c;
                g.taps(iy, ix, |ky, kx, oy, ox| {
                    let d = &delta[((t * g.oh + oy) * g.ow + ox) * o..][..o];
                    for c in 0..g.c {
                        let wr = &wt[g.row(c, ky, kx) * o..][..o];
                        let mut s = 0.0;
                        for (a, b) in d.iter().zip(wr) {
                            s += a * b;
                        }
                        gx[base + c] += s;
                    }
                });
            }
        }
    }
    gx
}

/// Gradient with respect to `[O, R]` weights, accumulated into `gw`.
pub fn conv_weight_grad(g: &ConvGeom, x: &Act, delta: &[f64], gw: &mut [f64]) {
    let o = g.o;
    let rows = g.rows();
    // accumulate in the [R, O] layout, then transpose into gw
    let mut acc = vec![0.0; rows * o];
    for t in 0..x.t {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let base = ((t * g.h + iy) * g.w + ix) * g.c;
                for c in 0..g.c {
                    let xv = x.data[base + c];
                    if xv == 0.0 {
                        continue;
                    }
                    g.taps(iy, ix, |ky, kx, oy, ox| {
                        let d = &delta[((t * g.oh + oy) * g.ow + ox) * o..][..o];
                        let a = &mut acc[g.row(c, ky, kx) * o..][..o];
                        for (s, &dv) in a.iter_mut().zip(d) {
                            *s += xv * dv;
                        }
                    });
                }
            }
        }
    }
    for r in 0..rows {
        for oi in 0..o {
            gw[oi * rows + r] += acc[r * o + oi];
        }
    }
}

/// Bit-sliced crossbar plan for one layer: which bitline columns each
/// wordline row drives, and with what cell value.
#[derive(Clone, Debug)]
pub struct SlicedPlan {
    pub adc: AdcModel,
    pub mapping: Mapping,
    pub xbar: usize,
    pub planes: usize,
    pub rails: usize,
    pub groups: usize,
    pub rows_per_group: usize,
    /// Columns per group, `rails * planes * O`, indexed `(rail * planes + i) * O + o`.
    pub cols: usize,
    /// Per row: `(column, cell value)`; the value is -1 only on shared columns.
    pub entries: Vec<Vec<(u32, i8)>>,
    full_scale: i64,
}

impl SlicedPlan {
    /// `wq` is `[O, R]` integer weights.
    pub fn new(wq: &[i32], o: usize, rows: usize, nb_w: u32, groups: usize, mapping: Mapping, adc: AdcModel, xbar: usize) -> Result<Self> {
        if groups == 0 || rows % groups != 0 {
            return Err(invalid(format!("{rows} rows cannot be split into {groups} groups")));
        }
        let planes = nb_w as usize;
        let rails = match mapping {
            Mapping::SharedColumn => 1,
            Mapping::SplitColumns => 2,
        };
        let mut entries = vec![Vec::new(); rows];
        for oi in 0..o {
            for r in 0..rows {
                let v = wq[oi * rows + r];
                if v == 0 {
                    continue;
                }
                let mag = v.unsigned_abs();
                if mag >= 1 << nb_w {
                    return Err(Error::Range { what: "sliced weight", value: v as i64, min: -(1 << nb_w) + 1, max: (1 << nb_w) - 1 });
                }
                let (rail, pv) = match mapping {
                    Mapping::SharedColumn => (0, v.signum() as i8),
                    Mapping::SplitColumns => ((v < 0) as usize, 1),
                };
                for i in 0..planes {
                    if mag >> i & 1 == 1 {
                        entries[r].push((((rail * planes + i) * o + oi) as u32, pv));
                    }
                }
            }
        }
        Ok(Self {
            adc,
            mapping,
            xbar,
            planes,
            rails,
            groups,
            rows_per_group: rows / groups,
            cols: rails * planes * o,
            entries,
            full_scale: full_scale(xbar, 1),
        })
    }

    /// Dense 0/1 mask of programmed cells in `[R, cols]` layout.
    pub fn cell_mask(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.entries.len() * self.cols];
        for (r, es) in self.entries.iter().enumerate() {
            for &(j, _) in es {
                m[r * self.cols + j as usize] = 1;
            }
        }
        m
    }

    #[inline]
    fn column_meta(&self, j: usize, o: usize) -> (usize, f64) {
        let plane = (j / o) % self.planes;
        let rail = j / o / self.planes;
        let sign = if self.mapping == Mapping::SplitColumns && rail == 1 { -1.0 } else { 1.0 };
        (plane, sign * (1u64 << plane) as f64)
    }
}

/// Bitline sums and digitized layer output of a sliced forward pass.
#[derive(Clone, Debug)]
pub struct SlicedOut {
    /// `[T, OH, OW, groups, cols]` raw bitline sums.
    pub bitlines: Vec<i32>,
    /// `[T, OH, OW, O]` shift-added, group-summed integer activations.
    pub aq: Vec<i32>,
    /// Smallest and largest digitized partial sum seen.
    pub ps_range: (i32, i32),
}

/// Grouped, bit-sliced evaluation with per-plane readout. Inputs must be 0/1.
pub fn sliced_forward(g: &ConvGeom, plan: &SlicedPlan, x: &Act) -> Result<SlicedOut> {
    let (gn, cols, o) = (plan.groups, plan.cols, g.o);
    let per_pos = gn * cols;
    let mut bl = vec![0i32; x.t * g.oh * g.ow * per_pos];
    for t in 0..x.t {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let base = ((t * g.h + iy) * g.w + ix) * g.c;
                for c in 0..g.c {
                    let xv = x.data[base + c];
                    if xv == 0.0 {
                        continue;
                    }
                    if xv != 1.0 {
                        return Err(Error::NonBinary { index: base + c, value: xv as i64 });
                    }
                    g.taps(iy, ix, |ky, kx, oy, ox| {
                        let r = g.row(c, ky, kx);
                        let grp = r / plan.rows_per_group;
                        let row = &mut bl[((t * g.oh + oy) * g.ow + ox) * per_pos + grp * cols..][..cols];
                        for &(j, pv) in &plan.entries[r] {
                            row[j as usize] += pv as i32;
                        }
                    });
                }
            }
        }
    }
    let meta: Vec<(usize, f64)> = (0..cols).map(|j| plan.column_meta(j, o)).collect();
    let mut aq = vec![0i32; x.t * g.oh * g.ow * o];
    let mut lo = i32::MAX;
    let mut hi = i32::MIN;
    for (p, out) in aq.chunks_mut(o).enumerate() {
        let cell = &bl[p * per_pos..][..per_pos];
        for grp in 0..gn {
            for (j, &v) in cell[grp * cols..][..cols].iter().enumerate() {
                let d = adc_sample_value(v, plan.adc, plan.mapping, plan.full_scale);
                lo = lo.min(d);
                hi = hi.max(d);
                let weight = meta[j].1 as i32;
                out[j % o] += weight * d;
            }
        }
    }
    Ok(SlicedOut { bitlines: bl, aq, ps_range: (lo, hi) })
}

/// Surrogate backward of [`sliced_forward`] with respect to the layer's real
/// output `scale * aq`. Returns the input gradient (unless `need_input` is
/// false) and adds `dL/dW` for the `[O, R]` real weights into `gw`.
#[allow(clippy::too_many_arguments)]
pub fn sliced_backward(
    g: &ConvGeom,
    plan: &SlicedPlan,
    x: &Act,
    fwd: &SlicedOut,
    delta: &[f64],
    scale: f64,
    ps_alpha: f64,
    need_input: bool,
    gw: &mut [f64],
) -> Result<Option<Vec<f64>>> {
    let (gn, cols, o) = (plan.groups, plan.cols, g.o);
    let per_pos = gn * cols;
    let meta: Vec<(usize, f64)> = (0..cols).map(|j| plan.column_meta(j, o)).collect();
    // dL/d(bitline) for every column of every group and position
    let mut e = vec![0.0; fwd.bitlines.len()];
    for p in 0..x.t * g.oh * g.ow {
        let d = &delta[p * o..][..o];
        for grp in 0..gn {
            let base = p * per_pos + grp * cols;
            for j in 0..cols {
                let dv = d[j % o];
                if dv == 0.0 {
                    continue;
                }
                let bl = fwd.bitlines[base + j] as f64;
                e[base + j] = scale * dv * meta[j].1 * surrogate(bl, ps_alpha);
            }
        }
    }
    let rows = g.rows();
    let mut omega = vec![0.0; rows * cols];
    let mut gx = if need_input { Some(vec![0.0; x.data.len()]) } else { None };
    for t in 0..x.t {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let base = ((t * g.h + iy) * g.w + ix) * g.c;
                for c in 0..g.c {
                    let xv = x.data[base + c];
                    let mut acc = 0.0;
                    g.taps(iy, ix, |ky, kx, oy, ox| {
                        let r = g.row(c, ky, kx);
                        let grp = r / plan.rows_per_group;
                        let erow = &e[((t * g.oh + oy) * g.ow + ox) * per_pos + grp * cols..][..cols];
                        if need_input {
                            for &(j, pv) in &plan.entries[r] {
                                acc += pv as f64 * erow[j as usize];
                            }
                        }
                        if xv != 0.0 {
                            let om = &mut omega[r * cols..][..cols];
                            for (a, &ev) in om.iter_mut().zip(erow) {
                                *a += ev;
                            }
                        }
                    });
                    if let Some(gx) = gx.as_mut() {
                        gx[base + c] = acc;
                    }
                }
            }
        }
    }
    let masked = slicing_grad_mask(&omega, &plan.cell_mask())?;
    let ste = crate::quant::ste_grad(scale)?;
    for r in 0..rows {
        for j in 0..cols {
            let v = masked[r * cols + j];
            if v == 0.0 {
                continue;
            }
            // d(cell)/d(w_q) is +1 on positive and shared rails, -1 on the negative rail
            let rail = j / o / plan.planes;
            let dcell = if plan.mapping == Mapping::SplitColumns && rail == 1 { -1.0 } else { 1.0 };
            gw[(j % o) * rows + r] += dcell * v * ste;
        }
    }
    Ok(gx)
}

/// How a LIF layer evaluates its recurrence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LifMode {
    Real { v_th: f64, leak: f64 },
    /// Integer state in units of `scale` with a shift leak.
    Int { scale: f64, v_th: i32, shift: u8 },
}

/// Per-neuron trajectory kept for backpropagation through time.
#[derive(Clone, Debug)]
pub struct LifCache {
    /// Membrane potential in real units, `[T, N]`.
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v_th: f64,
    pub leak: f64,
}

/// Runs the recurrence over `T` steps of `n` neurons. `drive` is in real
/// units; `drive_int` must be given for the integer mode.
pub fn lif_forward(
    mode: LifMode,
    reset: ResetMode,
    t_n: usize,
    n: usize,
    drive: &[f64],
    drive_int: Option<&[i32]>,
    smooth_alpha: Option<f64>,
) -> Result<LifCache> {
    let mut u = vec![0.0; t_n * n];
    let mut s = vec![0.0; t_n * n];
    match mode {
        LifMode::Real { v_th, leak } => {
            let mut prev_u = vec![0.0; n];
            let mut prev_r = vec![0.0; n];
            for t in 0..t_n {
                for i in 0..n {
                    let ui = leak * prev_u[i] + drive[t * n + i] - prev_r[i];
                    let si = match smooth_alpha {
                        Some(a) => soft_spike(ui - v_th, a),
                        None => (ui >= v_th) as u8 as f64,
                    };
                    u[t * n + i] = ui;
                    s[t * n + i] = si;
                    prev_r[i] = match reset {
                        ResetMode::Soft => v_th * si,
                        ResetMode::Hard => leak * ui * si,
                    };
                    prev_u[i] = ui;
                }
            }
            Ok(LifCache { u, s, v_th, leak })
        }
        LifMode::Int { scale, v_th, shift } => {
            let d = drive_int.ok_or_else(|| invalid("integer LIF needs integer drive"))?;
            let p = crate::spiking::IntLifParams { v_th, leak: crate::quant::LeakCode::new(shift)?, reset };
            p.validate()?;
            let mut prev_u = vec![0i32; n];
            let mut prev_r = vec![0i32; n];
            for t in 0..t_n {
                for i in 0..n {
                    let (ui, si, ri) = crate::spiking::lif_update_int(prev_u[i], prev_r[i], d[t * n + i], &p);
                    u[t * n + i] = ui as f64 * scale;
                    s[t * n + i] = si as u8 as f64;
                    prev_u[i] = ui;
                    prev_r[i] = ri;
                }
            }
            Ok(LifCache { u, s, v_th: v_th as f64 * scale, leak: p.leak.factor() })
        }
    }
}

/// Gradients of a LIF sequence: drive, threshold and leak.
pub struct LifGrads {
    pub drive: Vec<f64>,
    pub v_th: f64,
    pub leak: f64,
}

/// Backpropagation through time, including the reset path.
pub fn lif_backward(cache: &LifCache, reset: ResetMode, t_n: usize, n: usize, gs_out: &[f64], alpha: f64) -> LifGrads {
    let (th, lk) = (cache.v_th, cache.leak);
    let mut gd = vec![0.0; t_n * n];
    let mut g_th = 0.0;
    let mut g_lk = 0.0;
    for i in 0..n {
        let mut gu_next = 0.0;
        for t in (0..t_n).rev() {
            let k = t * n + i;
            let (u, s) = (cache.u[k], cache.s[k]);
            let sg = surrogate(u - th, alpha);
            let gr = -gu_next;
            let (ds_r, du_r) = match reset {
                ResetMode::Soft => (th, 0.0),
                ResetMode::Hard => (lk * u, lk * s),
            };
            let gs = gs_out[k] + gr * ds_r;
            let gu = gs * sg + lk * gu_next + gr * du_r;
            gd[k] = gu;
            let u_prev = if t > 0 { cache.u[k - n] } else { 0.0 };
            g_lk += gu * u_prev;
            g_th -= gs * sg;
            match reset {
                ResetMode::Soft => g_th += gr * s,
                ResetMode::Hard => g_lk += gr * u * s,
            }
            gu_next = gu;
        }
    }
    LifGrads { drive: gd, v_th: g_th, leak: g_lk }
}
