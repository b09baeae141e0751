//! Layer-level forward semantics for ADC-less inference: the grouped,
//! bit-sliced convolution with binary partial sums, its fully-connected
//! special case, the SEW block with IAND merge, 2x2 max pooling and frozen
//! dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crossbar::{adc_sample_value, full_scale, CrossbarConfig, Mapping};
use crate::error::{invalid, Error, Result};
use crate::quant::QuantizedTensor;
use crate::spiking::{lif_step_int, IntLifParams, IntLifState};
use crate::tensor::{bit_planes, grouped_conv, IntTensor, Tensor};

/// Number of crossbar groups the kernel's input-channel axis is split into.
///
/// Starts at `ceil(in_ch * kh * kw / xbar)` and grows until it divides `in_ch`.
pub fn compute_n_groups(in_ch: usize, kh: usize, kw: usize, xbar: usize) -> Result<usize> {
    if in_ch == 0 || kh == 0 || kw == 0 || xbar == 0 {
        return Err(invalid("group computation needs positive extents"));
    }
    let mut g = (in_ch * kh * kw).div_ceil(xbar);
    if g > in_ch {
        return Err(invalid(format!(
            "a {kh}x{kw} kernel slice of one channel needs {} wordlines, more than xbar={xbar}",
            kh * kw
        )));
    }
    while in_ch % g != 0 {
        g += 1;
    }
    Ok(g)
}

fn first_non_binary(x: &IntTensor) -> Error {
    let (index, &value) = x
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0 && v != 1)
        .expect("called on a non-binary tensor");
    Error::NonBinary { index, value: value as i64 }
}

pub(crate) fn require_binary(x: &IntTensor) -> Result<()> {
    if x.is_binary() {
        Ok(())
    } else {
        Err(first_non_binary(x))
    }
}

/// Digitized partial sums of one bit-plane and rail, `[N, groups*O, H', W']`.
#[derive(Clone, Debug)]
pub struct PsPlane {
    pub plane: usize,
    /// `false` for the positive (or shared) rail.
    pub negative: bool,
    pub values: IntTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdcLessConvLayer {
    pub wq: QuantizedTensor,
    pub config: CrossbarConfig,
    pub stride: usize,
    pub padding: usize,
    n_groups: usize,
}

impl AdcLessConvLayer {
    pub fn new(wq: QuantizedTensor, config: CrossbarConfig, stride: usize, padding: usize) -> Result<Self> {
        config.validate()?;
        let d = wq.values.dims();
        if d.len() != 4 {
            return Err(Error::Shape { axis: "kernel rank", expected: 4, found: d.len() });
        }
        if wq.bits > config.nb_w {
            return Err(invalid(format!("{}-bit weights exceed nb_w={}", wq.bits, config.nb_w)));
        }
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        let n_groups = compute_n_groups(d[1], d[2], d[3], config.xbar)?;
        Ok(Self { wq, config, stride, padding, n_groups })
    }

    /// Fully-connected layer over flattened features: `[O, F]` weights become a 1x1 kernel.
    pub fn linear(wq: QuantizedTensor, config: CrossbarConfig) -> Result<Self> {
        let d = wq.values.dims().to_vec();
        if d.len() != 2 {
            return Err(Error::Shape { axis: "linear weight rank", expected: 2, found: d.len() });
        }
        let values = wq.values.clone().reshape(vec![d[0], d[1], 1, 1])?;
        Self::new(QuantizedTensor { values, ..wq }, config, 1, 0)
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn out_channels(&self) -> usize {
        self.wq.values.dims()[0]
    }

    pub fn forward(&self, x: &IntTensor) -> Result<IntTensor> {
        Ok(self.forward_with_ps(x)?.0)
    }

    /// Forward pass that also returns every digitized partial-sum plane.
    pub fn forward_with_ps(&self, x: &IntTensor) -> Result<(IntTensor, Vec<PsPlane>)> {
        require_binary(x)?;
        let cfg = self.config;
        let w = &self.wq.values;
        let pos = w.map(cfg.nb_w, false, |v| v.max(0))?;
        let neg = w.map(cfg.nb_w, false, |v| (-v).max(0))?;
        let pos_planes = bit_planes(&pos, cfg.nb_w, cfg.sb_w)?;
        let neg_planes = bit_planes(&neg, cfg.nb_w, cfg.sb_w)?;
        let fs = full_scale(cfg.xbar, cfg.sb_w);
        let g = self.n_groups;
        let mut traced = Vec::new();
        let mut pass = |plane: &IntTensor, index: usize, negative: bool| -> Result<IntTensor> {
            let kernel = IntTensor::concat(&plane.chunk(g, 1)?, 0)?;
            let out = grouped_conv(x, &kernel, g, self.stride, self.padding)?;
            let act = out.map(32, true, |v| adc_sample_value(v, cfg.adc, cfg.mapping, fs))?;
            traced.push(PsPlane { plane: index, negative, values: act.clone() });
            Ok(act)
        };
        let weight = |i: usize| 1i32 << (i as u32 * cfg.sb_w);
        let mut acc: Option<IntTensor> = None;
        let mut add = |t: IntTensor, k: i32| -> Result<()> {
            acc = Some(match acc.take() {
                None if k == 1 => t,
                None => t.map(32, true, |v| v * k)?,
                Some(a) => a.add_scaled(&t, k)?,
            });
            Ok(())
        };
        match cfg.mapping {
            Mapping::SharedColumn => {
                for (i, (p, n)) in pos_planes.iter().zip(&neg_planes).enumerate() {
                    let signed = p.cells.add_scaled(&n.cells, -1)?;
                    add(pass(&signed, i, false)?, weight(i))?;
                }
            }
            Mapping::SplitColumns => {
                for (i, p) in pos_planes.iter().enumerate() {
                    add(pass(&p.cells, i, false)?, weight(i))?;
                }
                for (i, n) in neg_planes.iter().enumerate() {
                    add(pass(&n.cells, i, true)?, -weight(i))?;
                }
            }
        }
        let acc = acc.expect("at least one bit-plane");
        let mut parts = acc.chunk(g, 1)?.into_iter();
        let mut out = parts.next().expect("at least one group");
        for part in parts {
            out = out.add_scaled(&part, 1)?;
        }
        Ok((out, traced))
    }
}

pub fn adcless_conv(x: &IntTensor, layer: &AdcLessConvLayer) -> Result<IntTensor> {
    layer.forward(x)
}

/// `x` is `[F]` or `[N, F]`; the result has `O` in place of `F`.
pub fn adcless_linear(x: &IntTensor, layer: &AdcLessConvLayer) -> Result<IntTensor> {
    let d = x.dims().to_vec();
    let (n, f) = match d[..] {
        [f] => (1, f),
        [n, f] => (n, f),
        _ => return Err(Error::Shape { axis: "linear input rank", expected: 2, found: d.len() }),
    };
    let x4 = x.clone().reshape(vec![n, f, 1, 1])?;
    let out = layer.forward(&x4)?;
    let o = layer.out_channels();
    out.reshape(if d.len() == 1 { vec![o] } else { vec![n, o] })
}

/// Which IAND operand is negated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IandOrder {
    /// `skip AND NOT direct`.
    #[default]
    NegateDirect,
    /// `direct AND NOT skip`.
    NegateSkip,
}

impl IandOrder {
    #[inline]
    pub fn apply(self, skip: bool, direct: bool) -> bool {
        match self {
            Self::NegateDirect => skip && !direct,
            Self::NegateSkip => direct && !skip,
        }
    }
}

pub fn iand(skip: &IntTensor, direct: &IntTensor, order: IandOrder) -> Result<IntTensor> {
    require_binary(skip)?;
    require_binary(direct)?;
    if skip.dims() != direct.dims() {
        return Err(Error::Shape { axis: "iand operands", expected: skip.data().len(), found: direct.data().len() });
    }
    let data = skip
        .data()
        .iter()
        .zip(direct.data())
        .map(|(&s, &d)| order.apply(s == 1, d == 1) as i32)
        .collect();
    IntTensor::binary(skip.dims().to_vec(), data)
}

/// 2x2, stride-2 max over the last two axes of a binary tensor.
pub fn maxpool2(x: &IntTensor) -> Result<IntTensor> {
    require_binary(x)?;
    let d = x.dims();
    if d.len() < 2 {
        return Err(Error::Shape { axis: "pooling rank", expected: 2, found: d.len() });
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(format!("max pooling needs even extents, got {h}x{w}")));
    }
    let lead: usize = d[..d.len() - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(lead * oh * ow);
    for p in 0..lead {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i = base + 2 * y * w + 2 * xx;
                out.push(src[i] | src[i + 1] | src[i + w] | src[i + w + 1]);
            }
        }
    }
    let mut dims = d.to_vec();
    let n = dims.len();
    dims[n - 2] = oh;
    dims[n - 1] = ow;
    IntTensor::binary(dims, out)
}

/// Keep-mask with each element dropped at rate `p`.
pub fn sample_dropout_mask<R: Rng>(dims: Vec<usize>, p: f64, rng: &mut R) -> Result<Tensor<u8>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("dropout rate {p} outside [0, 1]")));
    }
    let n = dims.iter().product();
    let data = (0..n).map(|_| (rng.gen::<f64>() >= p) as u8).collect();
    Tensor::new(dims, data)
}

/// Elementwise `x * mask` without rescaling. `mask` covers the trailing axes of
/// `x`, so one mask is shared by every leading (time) index.
pub fn frozen_dropout<T: Copy + Default>(x: &Tensor<T>, mask: &Tensor<u8>) -> Result<Tensor<T>> {
    let (xd, md) = (x.dims(), mask.dims());
    if md.len() > xd.len() || xd[xd.len() - md.len()..] != *md {
        return Err(Error::Shape { axis: "dropout mask", expected: mask.len(), found: x.len() });
    }
    let m = mask.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if m[i % m.len()] != 0 { v } else { T::default() })
        .collect();
    Tensor::new(xd.to_vec(), data)
}

/// Spike-element-wise residual block: two conv+LIF stages on the direct path,
/// identity skip, IAND merge. Runs in the integer domain.
#[derive(Clone, Debug)]
pub struct SewBlock {
    pub conv1: AdcLessConvLayer,
    pub lif1: IntLifParams,
    pub conv2: AdcLessConvLayer,
    pub lif2: IntLifParams,
    pub order: IandOrder,
}

impl SewBlock {
    /// Runs a whole sequence of binary `[N, C, H, W]` frames, states starting at rest.
    pub fn forward(&self, frames: &[IntTensor]) -> Result<Vec<IntTensor>> {
        let mut s1: Option<IntLifState> = None;
        let mut s2: Option<IntLifState> = None;
        let mut out = Vec::with_capacity(frames.len());
        for x in frames {
            require_binary(x)?;
            let a1 = self.conv1.forward(x)?;
            let st1 = s1.take().unwrap_or_else(|| IntLifState::zeros(a1.dims().to_vec()));
            let (y1, n1) = lif_step_int(&st1, &self.lif1, a1.tensor())?;
            s1 = Some(n1);
            let y1 = IntTensor::binary(y1.dims().to_vec(), y1.data().iter().map(|&v| v as i32).collect())?;
            let a2 = self.conv2.forward(&y1)?;
            let st2 = s2.take().unwrap_or_else(|| IntLifState::zeros(a2.dims().to_vec()));
            let (y2, n2) = lif_step_int(&st2, &self.lif2, a2.tensor())?;
            s2 = Some(n2);
            let y2 = IntTensor::binary(y2.dims().to_vec(), y2.data().iter().map(|&v| v as i32).collect())?;
            out.push(iand(x, &y2, self.order)?);
        }
        Ok(out)
    }
}
