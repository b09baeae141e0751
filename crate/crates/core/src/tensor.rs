//! Dense row-major tensors with the shape manipulations used by the
//! ADC-Less convolution: channel chunking, concatenation, grouped
//! convolution in exact integer arithmetic, and bit-plane extraction.
//!
//! Every reduction runs in a fixed loop order, so results are identical
//! from run to run.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense tensor in canonical row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                axis: "element count",
                expected: n,
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-major offset of a full multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }
}

fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Splits `t` into `n` equal pieces along `axis`.
pub fn chunk<T: Copy>(t: &Tensor<T>, n: usize, axis: usize) -> Result<Vec<Tensor<T>>> {
    if axis >= t.dims.len() {
        return Err(invalid(format!("axis {axis} out of range for rank {}", t.dims.len())));
    }
    if n == 0 || t.dims[axis] % n != 0 {
        return Err(invalid(format!(
            "extent {} along axis {axis} is not divisible into {n} chunks",
            t.dims[axis]
        )));
    }
    let (outer, extent, inner) = split_at_axis(&t.dims, axis);
    let piece = extent / n;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut data = Vec::with_capacity(outer * piece * inner);
        for o in 0..outer {
            let start = (o * extent + k * piece) * inner;
            data.extend_from_slice(&t.data[start..start + piece * inner]);
        }
        let mut dims = t.dims.clone();
        dims[axis] = piece;
        out.push(Tensor { dims, data });
    }
    Ok(out)
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<T: Copy>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
    if axis >= first.dims.len() {
        return Err(invalid(format!("axis {axis} out of range for rank {}", first.dims.len())));
    }
    for p in parts {
        if p.dims.len() != first.dims.len() {
            return Err(Error::Shape {
                axis: "rank",
                expected: first.dims.len(),
                found: p.dims.len(),
            });
        }
        for (d, (&a, &b)) in p.dims.iter().zip(&first.dims).enumerate() {
            if d != axis && a != b {
                return Err(Error::Shape {
                    axis: "non-concatenated axis",
                    expected: b,
                    found: a,
                });
            }
        }
    }
    let (outer, _, inner) = split_at_axis(&first.dims, axis);
    let total: usize = parts.iter().map(|p| p.dims[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.dims[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    let mut dims = first.dims.clone();
    dims[axis] = total;
    Ok(Tensor { dims, data })
}

/// Integer tensor with a declared bit-width that every element fits in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntTensor {
    tensor: Tensor<i32>,
    bits: u32,
    signed: bool,
}

pub(crate) fn int_range(bits: u32, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

impl IntTensor {
    pub fn new(dims: Vec<usize>, data: Vec<i32>, bits: u32, signed: bool) -> Result<Self> {
        if bits == 0 || bits > 32 || (!signed && bits == 32) {
            return Err(invalid(format!("unsupported integer width {bits}")));
        }
        let (min, max) = int_range(bits, signed);
        if let Some(&v) = data.iter().find(|&&v| (v as i64) < min || (v as i64) > max) {
            return Err(Error::Range {
                what: "integer tensor element",
                value: v as i64,
                min,
                max,
            });
        }
        Ok(Self {
            tensor: Tensor::new(dims, data)?,
            bits,
            signed,
        })
    }

    /// Unsigned 1-bit tensor; rejects anything outside {0, 1}.
    pub fn binary(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| v != 0 && v != 1) {
            return Err(Error::NonBinary {
                index,
                value: v as i64,
            });
        }
        Self::new(dims, data, 1, false)
    }

    pub fn zeros(dims: Vec<usize>, bits: u32, signed: bool) -> Self {
        Self {
            tensor: Tensor::filled(dims, 0),
            bits,
            signed,
        }
    }

    pub fn dims(&self) -> &[usize] {
        self.tensor.dims()
    }

    pub fn data(&self) -> &[i32] {
        self.tensor.data()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn tensor(&self) -> &Tensor<i32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<i32> {
        self.tensor
    }

    pub fn is_binary(&self) -> bool {
        self.data().iter().all(|&v| v == 0 || v == 1)
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Ok(Self {
            tensor: self.tensor.reshape(dims)?,
            ..self
        })
    }

    /// Elementwise map into a new declared width; the result is range-checked.
    pub fn map(&self, bits: u32, signed: bool, f: impl Fn(i32) -> i32) -> Result<Self> {
        Self::new(
            self.dims().to_vec(),
            self.data().iter().map(|&v| f(v)).collect(),
            bits,
            signed,
        )
    }

    /// `self + scale * other` into a 32-bit signed result.
    pub fn add_scaled(&self, other: &IntTensor, scale: i32) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::Shape {
                axis: "element count",
                expected: self.data().len(),
                found: other.data().len(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| checked_i32(a as i64 + scale as i64 * b as i64))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.dims().to_vec(), data, 32, true)
    }

    pub fn chunk(&self, n: usize, axis: usize) -> Result<Vec<Self>> {
        Ok(chunk(&self.tensor, n, axis)?
            .into_iter()
            .map(|tensor| Self {
                tensor,
                bits: self.bits,
                signed: self.signed,
            })
            .collect())
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let (bits, signed) = if parts.iter().all(|p| p.signed == first.signed) {
            (parts.iter().map(|p| p.bits).max().unwrap_or(first.bits), first.signed)
        } else {
            (32, true)
        };
        let tensors: Vec<_> = parts.iter().map(|p| p.tensor.clone()).collect();
        let tensor = concat(&tensors, axis)?;
        Self::new(tensor.dims().to_vec(), tensor.into_data(), bits, signed)
    }
}

pub(crate) fn checked_i32(v: i64) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::Overflow(v))
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape {
            axis: "spatial (kernel larger than padded input)",
            expected: kernel,
            found: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Grouped cross-correlation over `[N, C, H, W]` input and `[O, C/groups, kH, kW]`
/// kernel, accumulated exactly. Output is `[N, O, H', W']`, 32-bit signed.
///
/// Zero padding is used; output channel `o` reads input channel block
/// `o / (O / groups)`.
pub fn grouped_conv(
    input: &IntTensor,
    kernel: &IntTensor,
    groups: usize,
    stride: usize,
    padding: usize,
) -> Result<IntTensor> {
    let (id, kd) = (input.dims(), kernel.dims());
    if id.len() != 4 {
        return Err(Error::Shape { axis: "input rank", expected: 4, found: id.len() });
    }
    if kd.len() != 4 {
        return Err(Error::Shape { axis: "kernel rank", expected: 4, found: kd.len() });
    }
    let (n, c, h, w) = (id[0], id[1], id[2], id[3]);
    let (o, kc, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape {
            axis: "input channels (not divisible by groups)",
            expected: groups,
            found: c,
        });
    }
    if kc != c / groups {
        return Err(Error::Shape {
            axis: "kernel channels",
            expected: c / groups,
            found: kc,
        });
    }
    if o % groups != 0 {
        return Err(Error::Shape {
            axis: "output channels (not divisible by groups)",
            expected: groups,
            found: o,
        });
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    let per_group = o / groups;
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0i64; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let g = oc / per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ci in 0..kc {
                        let ich = g * kc + ci;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ich) * h + iy as usize) * w + ix as usize];
                                if xv != 0 {
                                    acc += xv as i64
                                        * k[((oc * kc + ci) * kh + ky) * kw + kx] as i64;
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    let data = out.into_iter().map(checked_i32).collect::<Result<Vec<_>>>()?;
    IntTensor::new(vec![n, o, oh, ow], data, 32, true)
}

/// One bit-slice of a nonnegative integer tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BitPlane {
    /// Plane position, LSB first.
    pub index: usize,
    /// Cell values, each in `[0, 2^sb)`.
    pub cells: IntTensor,
}

/// Slices a nonnegative tensor into `nb / sb` planes of `sb`-bit cells, LSB first.
pub fn bit_planes(t: &IntTensor, nb: u32, sb: u32) -> Result<Vec<BitPlane>> {
    if sb == 0 || nb == 0 || nb % sb != 0 || nb > 31 {
        return Err(invalid(format!("cell width {sb} must divide weight width {nb}")));
    }
    let max = (1i64 << nb) - 1;
    if let Some(&v) = t.data().iter().find(|&&v| v < 0 || v as i64 > max) {
        return Err(Error::Range {
            what: "bit-sliced element",
            value: v as i64,
            min: 0,
            max,
        });
    }
    let mask = (1i32 << sb) - 1;
    (0..(nb / sb) as usize)
        .map(|index| {
            let shift = index as u32 * sb;
            let cells = t.map(sb, false, |v| (v >> shift) & mask)?;
            Ok(BitPlane { index, cells })
        })
        .collect()
}

/// Inverse of [`bit_planes`]: `sum_i 2^(i*sb) * plane_i`.
pub fn reconstruct_planes(planes: &[BitPlane], sb: u32) -> Result<IntTensor> {
    let first = planes.first().ok_or_else(|| invalid("no planes"))?;
    let mut acc = IntTensor::zeros(first.cells.dims().to_vec(), 32, true);
    for p in planes {
        acc = acc.add_scaled(&p.cells, 1 << (p.index as u32 * sb))?;
    }
    Ok(acc)
}
