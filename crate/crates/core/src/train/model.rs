//! A network built from a [`NetworkSpec`], evaluated one sequence at a time
//! onto a gradient tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    conv_forward, conv_input_grad, conv_weight_grad, lif_backward, lif_forward, sliced_backward, sliced_forward,
    transpose_weights, Act, ConvGeom, LifCache, LifMode, SlicedOut, SlicedPlan,
};
use super::tape::{GradientTape, InputGrads};
use super::Stage;
use crate::crossbar::{AdcModel, Mapping};
use crate::dataset::Sample;
use crate::error::{invalid, Error, Result};
use crate::layers::{compute_n_groups, IandOrder};
use crate::netspec::{LayerSpec, NetworkSpec, Periphery};
use crate::quant::{quant_levels, quantize_leak, quantize_value, scale_of, STATE_BITS};

/// Trainable weights of one crossbar layer, `[out, rows]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XbarWeights {
    pub out: usize,
    pub rows: usize,
    pub w: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neuron {
    pub v_th: f64,
    pub leak: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub xbars: Vec<XbarWeights>,
    pub lifs: Vec<Neuron>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            xbars: self.xbars.iter().map(|x| XbarWeights { out: x.out, rows: x.rows, w: vec![0.0; x.w.len()] }).collect(),
            lifs: self.lifs.iter().map(|_| Neuron { v_th: 0.0, leak: 0.0 }).collect(),
        }
    }

    /// Every scalar in a fixed order: weights layer by layer, then `(v_th, leak)` pairs.
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.xbars.iter().flat_map(|x| x.w.iter().copied()).collect();
        for n in &self.lifs {
            v.push(n.v_th);
            v.push(n.leak);
        }
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        let mut v: Vec<&mut f64> = Vec::new();
        for x in &mut self.xbars {
            v.extend(x.w.iter_mut());
        }
        for n in &mut self.lifs {
            v.push(&mut n.v_th);
            v.push(&mut n.leak);
        }
        v
    }
}

/// How one crossbar layer computes its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Fp,
    /// Integer weights, exact accumulation.
    Qat,
    /// Bit-sliced grouped arrays read out by the given converter.
    Sliced(AdcModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecPlan {
    pub xbar: usize,
    pub mapping: Mapping,
    pub layers: Vec<Exec>,
}

impl ExecPlan {
    /// Paths used while training `stage`. `adc` replaces the readout of every
    /// layer in the sense-amplifier stage when given.
    pub fn for_stage(net: &Net, stage: Stage, xbar: usize, mapping: Mapping, adc: Option<AdcModel>) -> Self {
        let layers = net
            .xl
            .iter()
            .map(|x| match stage {
                Stage::Fp => Exec::Fp,
                Stage::Qat => Exec::Qat,
                Stage::Adcless => Exec::Sliced(adc.unwrap_or(match x.periphery {
                    Periphery::Adcless => AdcModel::OneBitSa,
                    Periphery::Hp => net.spec.hp_adc(),
                })),
            })
            .collect();
        Self { xbar, mapping, layers }
    }

    /// Deployment under one converter choice: sense amplifiers keep the
    /// converter on the layers that require it, a multi-bit converter is used
    /// everywhere, and the ideal converter is the exact integer path.
    pub fn for_eval(net: &Net, adc: AdcModel, xbar: usize, mapping: Mapping) -> Self {
        match adc {
            AdcModel::OneBitSa => Self::for_stage(net, Stage::Adcless, xbar, mapping, None),
            AdcModel::HighPrecision { .. } => Self { xbar, mapping, layers: vec![Exec::Sliced(adc); net.xl.len()] },
            AdcModel::Ideal => Self::for_stage(net, Stage::Qat, xbar, mapping, None),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unit {
    Xbar(usize),
    Lif { lif: usize, src: usize },
    Sew { x1: usize, l1: usize, x2: usize, l2: usize },
    Maxpool,
    Dropout { p: f64, slot: usize },
}

/// Static view of a crossbar layer inside the model.
#[derive(Clone, Copy, Debug)]
pub struct XbarInfo {
    pub geom: ConvGeom,
    pub bits: u32,
    pub periphery: Periphery,
    /// Index of the layer in the spec.
    pub layer: usize,
    pub linear: bool,
}

pub struct Net {
    pub spec: NetworkSpec,
    pub xl: Vec<XbarInfo>,
    units: Vec<Unit>,
    n_lifs: usize,
}

/// Per-layer weights prepared once per optimizer step.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub exec: Exec,
    /// Layer scale; 1 for the full-precision path.
    pub scale: f64,
    /// Integer weights `[out, rows]` (empty for the full-precision path).
    pub wq: Vec<i32>,
    wt: Vec<f64>,
    wt_back: Vec<f64>,
    plan: Option<SlicedPlan>,
}

#[derive(Clone, Debug)]
enum Node {
    Input,
    Xbar { xi: usize, aq: Option<Vec<i32>>, sliced: Option<SlicedOut> },
    Lif { li: usize, cache: LifCache },
    Iand,
    Maxpool { arg: Vec<u32> },
    Dropout { mask: Vec<u8> },
    TimeSum,
}

/// Activity counters collected during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Activity {
    /// Per LIF layer `(fired, neurons)`; neurons counted once per step.
    pub lif: Vec<(u64, u64)>,
    /// Per crossbar layer `(ones, elements)` of its input.
    pub xbar_in: Vec<(u64, u64)>,
    /// Smallest and largest digitized partial sum of sliced layers.
    pub ps_range: Option<(i32, i32)>,
    pub time_steps: usize,
}

impl Activity {
    pub fn merge(&mut self, o: &Activity) {
        if self.lif.is_empty() {
            self.lif = vec![(0, 0); o.lif.len()];
            self.xbar_in = vec![(0, 0); o.xbar_in.len()];
            self.time_steps = o.time_steps;
        }
        for (a, b) in self.lif.iter_mut().zip(&o.lif) {
            a.0 += b.0;
            a.1 += b.1;
        }
        for (a, b) in self.xbar_in.iter_mut().zip(&o.xbar_in) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.ps_range = match (self.ps_range, o.ps_range) {
            (Some(a), Some(b)) => Some((a.0.min(b.0), a.1.max(b.1))),
            (a, b) => a.or(b),
        };
    }

    /// Fired spikes over all LIF neurons and steps, as a percentage.
    pub fn avg_spikes(&self) -> Result<f64> {
        let fired = self.lif.iter().map(|l| l.0).sum();
        let slots: u64 = self.lif.iter().map(|l| l.1).sum();
        super::metrics::avg_spikes(fired, slots, 1)
    }

    /// Fraction of ones in each crossbar layer's input.
    pub fn input_rates(&self) -> Vec<f64> {
        self.xbar_in.iter().map(|&(a, n)| if n == 0 { 0.0 } else { a as f64 / n as f64 }).collect()
    }
}

/// One recorded forward pass.
pub struct Pass {
    tape: GradientTape<Node>,
    vals: Vec<Act>,
    out: usize,
    pub logits: Vec<f64>,
    pub activity: Activity,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOpts {
    /// Seed for this sequence's dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Replace the spike step by its smooth primitive (full-precision path only).
    pub smooth: Option<f64>,
}

impl Net {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let xls = spec.crossbar_layers()?;
        let mut xl = Vec::new();
        let mut units = Vec::new();
        let mut shape = spec.input;
        let mut n_lifs = 0;
        let mut dropouts = 0;
        let mut last_xbar = None;
        let mut it = xls.iter();
        let mut geom_of = |c: &crate::netspec::CrossbarLayer, shape: [usize; 3], linear: bool| {
            let geom = if linear {
                ConvGeom { h: shape[1], w: shape[2], c: shape[0], kh: shape[1], kw: shape[2], stride: 1, pad: 0, oh: 1, ow: 1, o: c.out_ch }
            } else {
                ConvGeom {
                    h: shape[1],
                    w: shape[2],
                    c: shape[0],
                    kh: c.kernel,
                    kw: c.kernel,
                    stride: c.stride,
                    pad: c.padding,
                    oh: c.out_shape[1],
                    ow: c.out_shape[2],
                    o: c.out_ch,
                }
            };
            xl.push(XbarInfo { geom, bits: c.bits, periphery: c.periphery, layer: c.layer, linear });
            xl.len() - 1
        };
        for l in &spec.layers {
            match *l {
                LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => {
                    let linear = matches!(l, LayerSpec::Linear { .. });
                    let c = it.next().expect("crossbar layer listed");
                    let i = geom_of(c, shape, linear);
                    units.push(Unit::Xbar(i));
                    last_xbar = Some(i);
                    shape = c.out_shape;
                }
                LayerSpec::Lif { .. } => {
                    let src = last_xbar.ok_or_else(|| Error::Validation("LIF layer without a feeding crossbar".into()))?;
                    units.push(Unit::Lif { lif: n_lifs, src });
                    n_lifs += 1;
                }
                LayerSpec::Sew { .. } => {
                    let c1 = it.next().expect("crossbar layer listed");
                    let x1 = geom_of(c1, shape, false);
                    let c2 = it.next().expect("crossbar layer listed");
                    let x2 = geom_of(c2, shape, false);
                    units.push(Unit::Sew { x1, l1: n_lifs, x2, l2: n_lifs + 1 });
                    n_lifs += 2;
                }
                LayerSpec::Maxpool => {
                    units.push(Unit::Maxpool);
                    shape = [shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Dropout { p } => {
                    units.push(Unit::Dropout { p, slot: dropouts });
                    dropouts += 1;
                }
            }
        }
        Ok(Self { spec, xl, units, n_lifs })
    }

    /// Feeding crossbar layer of every LIF layer.
    pub fn lif_sources(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_lifs];
        for u in &self.units {
            match *u {
                Unit::Lif { lif, src } => out[lif] = src,
                Unit::Sew { x1, l1, x2, l2 } => {
                    out[l1] = x1;
                    out[l2] = x2;
                }
                _ => {}
            }
        }
        out
    }

    /// Initial neuron parameters as written in the spec, in LIF order.
    fn spec_neurons(&self) -> Vec<Neuron> {
        let mut out = Vec::with_capacity(self.n_lifs);
        for l in &self.spec.layers {
            match *l {
                LayerSpec::Lif { v_th, leak } => out.push(Neuron { v_th, leak }),
                LayerSpec::Sew { v_th, leak, .. } => {
                    out.push(Neuron { v_th, leak });
                    out.push(Neuron { v_th, leak });
                }
                _ => {}
            }
        }
        out
    }

    /// Uniform fan-in scaled initialization, `gain * sqrt(6 / fan_in)` bound.
    pub fn init_params(&self, seed: u64, gain: f64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xbars = self
            .xl
            .iter()
            .map(|x| {
                let rows = x.geom.rows();
                let bound = gain * (6.0 / rows as f64).sqrt();
                let w = (0..x.geom.o * rows).map(|_| rng.gen_range(-bound..bound)).collect();
                XbarWeights { out: x.geom.o, rows, w }
            })
            .collect();
        Params { xbars, lifs: self.spec_neurons() }
    }

    pub fn zero_params(&self) -> Params {
        let xbars = self.xl.iter().map(|x| XbarWeights { out: x.geom.o, rows: x.geom.rows(), w: vec![0.0; x.geom.o * x.geom.rows()] }).collect();
        Params { xbars, lifs: self.spec_neurons() }
    }

    pub fn check_params(&self, p: &Params) -> Result<()> {
        if p.xbars.len() != self.xl.len() || p.lifs.len() != self.n_lifs {
            return Err(Error::Validation(format!(
                "parameters hold {} crossbar and {} LIF layers, network has {} and {}",
                p.xbars.len(),
                p.lifs.len(),
                self.xl.len(),
                self.n_lifs
            )));
        }
        for (i, (w, x)) in p.xbars.iter().zip(&self.xl).enumerate() {
            if w.out != x.geom.o || w.rows != x.geom.rows() || w.w.len() != w.out * w.rows {
                return Err(Error::Validation(format!("crossbar layer {i}: weight shape does not match the network")));
            }
        }
        Ok(())
    }

    /// Crossbar groups of layer `i` for a given array size.
    pub fn groups(&self, i: usize, xbar: usize) -> Result<usize> {
        let g = &self.xl[i].geom;
        if self.xl[i].linear {
            compute_n_groups(g.rows(), 1, 1, xbar)
        } else {
            compute_n_groups(g.c, g.kh, g.kw, xbar)
        }
    }

    pub fn prepare(&self, p: &Params, plan: &ExecPlan) -> Result<Vec<Prepared>> {
        self.check_params(p)?;
        if plan.layers.len() != self.xl.len() {
            return Err(invalid("execution plan does not cover every crossbar layer"));
        }
        let mut out = Vec::with_capacity(self.xl.len());
        for (i, (info, wts)) in self.xl.iter().zip(&p.xbars).enumerate() {
            let (o, rows) = (wts.out, wts.rows);
            let exec = plan.layers[i];
            if exec == Exec::Fp {
                let wt = transpose_weights(&wts.w, o, rows);
                out.push(Prepared { exec, scale: 1.0, wq: Vec::new(), wt: wt.clone(), wt_back: wt, plan: None });
                continue;
            }
            if wts.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("crossbar layer {i} has non-finite weights")));
            }
            let scale = scale_of(&wts.w, info.bits)?;
            let ql = quant_levels(info.bits)?;
            let wq: Vec<i32> = wts.w.iter().map(|&v| quantize_value(v, scale, ql)).collect();
            let wi: Vec<f64> = wq.iter().map(|&v| v as f64).collect();
            let wd: Vec<f64> = wi.iter().map(|v| v * scale).collect();
            let sliced = match exec {
                Exec::Sliced(adc) => Some(SlicedPlan::new(
                    &wq,
                    o,
                    rows,
                    info.bits,
                    self.groups(i, plan.xbar)?,
                    plan.mapping,
                    adc,
                    plan.xbar,
                )?),
                _ => None,
            };
            out.push(Prepared {
                exec,
                scale,
                wq,
                wt: transpose_weights(&wi, o, rows),
                wt_back: transpose_weights(&wd, o, rows),
                plan: sliced,
            });
        }
        Ok(out)
    }

    /// Integer neuron threshold and leak shift used with a quantized feeding layer.
    pub fn int_neuron(n: &Neuron, scale: f64) -> Result<(i32, u8)> {
        let th = quantize_value(n.v_th, scale, quant_levels(STATE_BITS)?).max(1);
        let leak = quantize_leak(n.leak.clamp(f64::MIN_POSITIVE, 1.0))?;
        Ok((th, leak.shift()))
    }

    pub fn run(&self, p: &Params, prep: &[Prepared], sample: &Sample, opts: RunOpts) -> Result<Pass> {
        let [c, h, w] = self.spec.input;
        let t_n = self.spec.time_steps;
        if sample.spikes.len() != t_n * c * h * w {
            return Err(Error::Shape { axis: "sample", expected: t_n * c * h * w, found: sample.spikes.len() });
        }
        let mut tape = GradientTape::new();
        let mut vals = Vec::new();
        let mut act = Activity {
            lif: vec![(0, 0); self.n_lifs],
            xbar_in: vec![(0, 0); self.xl.len()],
            ps_range: None,
            time_steps: t_n,
        };
        let x0 = Act::from_tchw(t_n, c, h, w, &sample.spikes);
        let mut cur = tape.push(Node::Input, vec![]);
        vals.push(x0);
        let mut st = State { tape: &mut tape, vals: &mut vals, act: &mut act };
        for u in &self.units {
            cur = match *u {
                Unit::Xbar(i) => self.xbar_fwd(&mut st, prep, i, cur)?,
                Unit::Lif { lif, src } => self.lif_fwd(&mut st, p, prep, lif, src, cur, opts.smooth)?,
                Unit::Sew { x1, l1, x2, l2 } => {
                    let a = self.xbar_fwd(&mut st, prep, x1, cur)?;
                    let a = self.lif_fwd(&mut st, p, prep, l1, x1, a, opts.smooth)?;
                    let b = self.xbar_fwd(&mut st, prep, x2, a)?;
                    let b = self.lif_fwd(&mut st, p, prep, l2, x2, b, opts.smooth)?;
                    let (s, d) = (&st.vals[cur], &st.vals[b]);
                    let data = s
                        .data
                        .iter()
                        .zip(&d.data)
                        .map(|(&s, &d)| match self.spec.iand {
                            IandOrder::NegateDirect => s * (1.0 - d),
                            IandOrder::NegateSkip => d * (1.0 - s),
                        })
                        .collect();
                    let v = Act { data, ..*s };
                    st.push(Node::Iand, vec![cur, b], v)
                }
                Unit::Maxpool => {
                    let x = &st.vals[cur];
                    let (oh, ow) = (x.h / 2, x.w / 2);
                    let mut v = Act::zeros(x.t, oh, ow, x.c);
                    let mut arg = vec![0u32; v.data.len()];
                    for t in 0..x.t {
                        for y in 0..oh {
                            for xx in 0..ow {
                                for ch in 0..x.c {
                                    let o = ((t * oh + y) * ow + xx) * x.c + ch;
                                    let mut best = f64::NEG_INFINITY;
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let i = ((t * x.h + 2 * y + dy) * x.w + 2 * xx + dx) * x.c + ch;
                                        if x.data[i] > best {
                                            best = x.data[i];
                                            arg[o] = i as u32;
                                        }
                                    }
                                    v.data[o] = best;
                                }
                            }
                        }
                    }
                    st.push(Node::Maxpool { arg }, vec![cur], v)
                }
                Unit::Dropout { p: rate, slot } => match opts.dropout_seed {
                    None => cur,
                    Some(seed) => {
                        let x = &st.vals[cur];
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (slot as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                        let mask: Vec<u8> = (0..x.frame_len()).map(|_| (rng.gen::<f64>() >= rate) as u8).collect();
                        let fl = x.frame_len();
                        let data = x.data.iter().enumerate().map(|(i, &v)| v * mask[i % fl] as f64).collect();
                        let v = Act { data, ..*x };
                        st.push(Node::Dropout { mask }, vec![cur], v)
                    }
                },
            };
        }
        let last = &st.vals[cur];
        let k = last.frame_len();
        let mut logits = vec![0.0; k];
        for t in 0..last.t {
            for (a, &v) in logits.iter_mut().zip(&last.data[t * k..][..k]) {
                *a += v;
            }
        }
        let out = st.push(Node::TimeSum, vec![cur], Act { t: 1, h: 1, w: 1, c: k, data: logits.clone() });
        Ok(Pass { tape, vals, out, logits, activity: act })
    }

    fn xbar_fwd(&self, st: &mut State, prep: &[Prepared], i: usize, input: usize) -> Result<usize> {
        let g = &self.xl[i].geom;
        let pr = &prep[i];
        let x = &st.vals[input];
        let ones = x.data.iter().filter(|&&v| v != 0.0).count() as u64;
        st.act.xbar_in[i].0 += ones;
        st.act.xbar_in[i].1 += x.data.len() as u64;
        let (v, aq, sliced) = match pr.exec {
            Exec::Fp => (conv_forward(g, &pr.wt, x), None, None),
            Exec::Qat => {
                let a = conv_forward(g, &pr.wt, x);
                let aq: Vec<i32> = a.data.iter().map(|&v| v as i32).collect();
                let data = aq.iter().map(|&v| v as f64 * pr.scale).collect();
                (Act { data, ..a }, Some(aq), None)
            }
            Exec::Sliced(_) => {
                let plan = pr.plan.as_ref().expect("sliced layer has a plan");
                let out = sliced_forward(g, plan, x)?;
                st.act.ps_range = Some(match st.act.ps_range {
                    None => out.ps_range,
                    Some(r) => (r.0.min(out.ps_range.0), r.1.max(out.ps_range.1)),
                });
                let data = out.aq.iter().map(|&v| v as f64 * pr.scale).collect();
                let aq = out.aq.clone();
                (Act { t: x.t, h: g.oh, w: g.ow, c: g.o, data }, Some(aq), Some(out))
            }
        };
        Ok(st.push(Node::Xbar { xi: i, aq, sliced }, vec![input], v))
    }

    #[allow(clippy::too_many_arguments)]
    fn lif_fwd(
        &self,
        st: &mut State,
        p: &Params,
        prep: &[Prepared],
        li: usize,
        src: usize,
        input: usize,
        smooth: Option<f64>,
    ) -> Result<usize> {
        let n = &p.lifs[li];
        let d = &st.vals[input];
        let (t_n, width) = (d.t, d.frame_len());
        let aq = match &st.tape.op(input) {
            Node::Xbar { aq, .. } => aq.as_deref(),
            _ => None,
        };
        let mode = match (prep[src].exec, aq) {
            (Exec::Fp, _) => LifMode::Real { v_th: n.v_th, leak: n.leak },
            (_, Some(_)) => {
                let (v_th, shift) = Self::int_neuron(n, prep[src].scale)?;
                LifMode::Int { scale: prep[src].scale, v_th, shift }
            }
            _ => return Err(invalid("quantized LIF must directly follow its crossbar")),
        };
        let smooth = if matches!(mode, LifMode::Real { .. }) { smooth } else { None };
        let cache = lif_forward(mode, self.spec.reset, t_n, width, &d.data, aq, smooth)?;
        let fired = cache.s.iter().filter(|&&s| s == 1.0).count() as u64;
        st.act.lif[li].0 += fired;
        st.act.lif[li].1 += (t_n * width) as u64;
        let v = Act { data: cache.s.clone(), ..*d };
        Ok(st.push(Node::Lif { li, cache }, vec![input], v))
    }

    /// Backpropagates `d loss / d logits` through a recorded pass, adding
    /// parameter gradients into `grads`.
    pub fn backward(&self, pass: &Pass, prep: &[Prepared], dlogits: &[f64], grads: &mut Params) -> Result<()> {
        let alpha = self.spec.alpha;
        let ps_alpha = self.spec.ps_alpha;
        let reset = self.spec.reset;
        let vals = &pass.vals;
        pass.tape.backward(pass.out, dlogits.to_vec(), |tape, id, g| -> Result<InputGrads> {
            let node = tape.node(id);
            Ok(match &node.op {
                Node::Input => vec![],
                Node::TimeSum => {
                    let x = &vals[node.inputs[0]];
                    let k = x.frame_len();
                    let gx = (0..x.data.len()).map(|i| g[i % k]).collect();
                    vec![Some(gx)]
                }
                Node::Xbar { xi, sliced, .. } => {
                    let src = node.inputs[0];
                    let x = &vals[src];
                    let geom = &self.xl[*xi].geom;
                    let pr = &prep[*xi];
                    let need_input = !matches!(tape.op(src), Node::Input);
                    let gw = &mut grads.xbars[*xi].w;
                    match (pr.exec, sliced) {
                        (Exec::Sliced(AdcModel::OneBitSa), Some(f)) => {
                            let plan = pr.plan.as_ref().expect("sliced layer has a plan");
                            vec![sliced_backward(geom, plan, x, f, g, pr.scale, ps_alpha, need_input, gw)?]
                        }
                        _ => {
                            conv_weight_grad(geom, x, g, gw);
                            vec![need_input.then(|| conv_input_grad(geom, &pr.wt_back, x.t, g))]
                        }
                    }
                }
                Node::Lif { li, cache, .. } => {
                    let x = &vals[node.inputs[0]];
                    let lg = lif_backward(cache, reset, x.t, x.frame_len(), g, alpha);
                    grads.lifs[*li].v_th += lg.v_th;
                    grads.lifs[*li].leak += lg.leak;
                    vec![Some(lg.drive)]
                }
                Node::Iand => {
                    let (s, d) = (&vals[node.inputs[0]], &vals[node.inputs[1]]);
                    let (gs, gd) = match self.spec.iand {
                        IandOrder::NegateDirect => (
                            g.iter().zip(&d.data).map(|(g, d)| g * (1.0 - d)).collect(),
                            g.iter().zip(&s.data).map(|(g, s)| -g * s).collect(),
                        ),
                        IandOrder::NegateSkip => (
                            g.iter().zip(&d.data).map(|(g, d)| -g * d).collect(),
                            g.iter().zip(&s.data).map(|(g, s)| g * (1.0 - s)).collect(),
                        ),
                    };
                    vec![Some(gs), Some(gd)]
                }
                Node::Maxpool { arg } => {
                    let mut gx = vec![0.0; vals[node.inputs[0]].data.len()];
                    for (o, &i) in arg.iter().enumerate() {
                        gx[i as usize] += g[o];
                    }
                    vec![Some(gx)]
                }
                Node::Dropout { mask } => {
                    let fl = mask.len();
                    vec![Some(g.iter().enumerate().map(|(i, &v)| v * mask[i % fl] as f64).collect())]
                }
            })
        })?;
        Ok(())
    }
}

struct State<'a> {
    tape: &'a mut GradientTape<Node>,
    vals: &'a mut Vec<Act>,
    act: &'a mut Activity,
}

impl State<'_> {
    fn push(&mut self, node: Node, inputs: Vec<usize>, v: Act) -> usize {
        self.vals.push(v);
        self.tape.push(node, inputs)
    }
}
