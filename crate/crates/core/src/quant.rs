//! Symmetric per-tensor quantization of weights, 12-bit quantization of
//! spiking state, and power-of-two leak codes.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{IntTensor, Tensor};

/// Bit-width used for membrane potentials and thresholds.
pub const STATE_BITS: u32 = 12;

/// Scale returned for an all-zero tensor.
pub const ZERO_SCALE: f64 = 1e-8;

/// Integer grid plus its real scale factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub values: IntTensor,
    pub scale: f64,
    pub bits: u32,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor<f64> {
        let s = self.scale;
        self.values.tensor().map(|q| q as f64 * s)
    }
}

/// Largest positive level, `2^(bits-1) - 1`.
pub fn quant_levels(bits: u32) -> Result<i32> {
    if !(2..=31).contains(&bits) {
        return Err(invalid(format!("quantization needs 2..=31 bits, got {bits}")));
    }
    Ok((1i32 << (bits - 1)) - 1)
}

/// `max |x| / q_l` over the whole tensor.
pub fn scale_of(x: &[f64], bits: u32) -> Result<f64> {
    let ql = quant_levels(bits)? as f64;
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(if m > 0.0 { m / ql } else { ZERO_SCALE })
}

/// Quantizes one element: `clamp(round(x / scale), -q_l - 1, q_l)`.
#[inline]
pub fn quantize_value(x: f64, scale: f64, ql: i32) -> i32 {
    let r = (x / scale).round();
    r.clamp(-(ql as f64) - 1.0, ql as f64) as i32
}

pub fn quantize(x: &Tensor<f64>, scale: f64, bits: u32) -> Result<QuantizedTensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(invalid(format!("scale must be positive, got {scale}")));
    }
    let ql = quant_levels(bits)?;
    let data = x.data().iter().map(|&v| quantize_value(v, scale, ql)).collect();
    Ok(QuantizedTensor {
        values: IntTensor::new(x.dims().to_vec(), data, bits, true)?,
        scale,
        bits,
    })
}

/// Per-tensor scale from the data itself, then quantize.
pub fn quantize_weights(w: &Tensor<f64>, bits: u32) -> Result<QuantizedTensor> {
    quantize(w, scale_of(w.data(), bits)?, bits)
}

/// Backward multiplier of the quantizer with respect to its input.
pub fn ste_grad(scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(1.0 / scale)
}

/// Leak factor `2^-n` with `n` in `{0, 1, 2}`; applied as a right shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeakCode(u8);

impl LeakCode {
    pub const MAX_SHIFT: u8 = 2;

    pub fn new(shift: u8) -> Result<Self> {
        if shift > Self::MAX_SHIFT {
            return Err(invalid(format!("leak shift {shift} outside 0..=2")));
        }
        Ok(Self(shift))
    }

    pub fn shift(self) -> u8 {
        self.0
    }

    pub fn factor(self) -> f64 {
        1.0 / (1u32 << self.0) as f64
    }
}

/// Nearest power-of-two leak; ties go to the larger factor.
pub fn quantize_leak(lambda: f64) -> Result<LeakCode> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(invalid(format!("leak must lie in (0, 1], got {lambda}")));
    }
    let mut best = LeakCode(0);
    for n in 1..=LeakCode::MAX_SHIFT {
        let cand = LeakCode(n);
        if (lambda - cand.factor()).abs() < (lambda - best.factor()).abs() {
            best = cand;
        }
    }
    Ok(best)
}

/// 12-bit quantization of a spiking state using the feeding layer's weight scale.
pub fn quantize_state(u: &Tensor<f64>, weight_scale: f64) -> Result<QuantizedTensor> {
    quantize(u, weight_scale, STATE_BITS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn levels() {
        assert_eq!(quant_levels(4).unwrap(), 7);
        assert_eq!(quant_levels(8).unwrap(), 127);
        assert_eq!(quant_levels(12).unwrap(), 2047);
        assert!(quant_levels(1).is_err());
    }

    #[test]
    fn scale_examples() {
        assert!((scale_of(&[-1.4, 0.7], 4).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(scale_of(&[0.0, 0.0], 4).unwrap(), ZERO_SCALE);
    }

    #[test]
    fn quantize_examples() {
        let q = |x: f64| quantize(&t(&[x]), 0.1, 4).unwrap().values.data()[0];
        assert_eq!(q(0.5), 5);
        assert_eq!(q(1.0), 7);
        assert_eq!(q(-2.0), -8);
        assert!(quantize(&t(&[1.0]), 0.0, 4).is_err());
        assert!(quantize(&t(&[1.0]), -1.0, 4).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(quantize_value(0.25, 0.1, 7), 3);
        assert_eq!(quantize_value(-0.25, 0.1, 7), -3);
        assert_eq!(quantize_value(1.5, 1.0, 7), 2);
        assert_eq!(quantize_value(-1.5, 1.0, 7), -2);
    }

    #[test]
    fn ste_examples() {
        assert!((ste_grad(0.2).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(ste_grad(1.0).unwrap(), 1.0);
        let s = 0.37;
        assert!((ste_grad(s).unwrap() * s - 1.0).abs() < 1e-15);
        assert!(ste_grad(0.0).is_err());
    }

    #[test]
    fn leak_examples() {
        assert_eq!(quantize_leak(1.0).unwrap().shift(), 0);
        assert_eq!(quantize_leak(0.5).unwrap().shift(), 1);
        assert_eq!(quantize_leak(0.6).unwrap().shift(), 1);
        assert_eq!(quantize_leak(0.75).unwrap().shift(), 0);
        assert_eq!(quantize_leak(0.375).unwrap().shift(), 1);
        assert_eq!(quantize_leak(0.1).unwrap().shift(), 2);
        assert!(quantize_leak(0.0).is_err());
        assert!(quantize_leak(1.5).is_err());
        assert!(LeakCode::new(3).is_err());
    }

    #[test]
    fn state_examples() {
        let s = 0.03;
        let q = |u: f64| quantize_state(&t(&[u]), s).unwrap().values.data()[0];
        assert_eq!(q(0.0), 0);
        assert_eq!(q(s), 1);
        assert_eq!(q(2047.0 * s), 2047);
        assert_eq!(q(5000.0 * s), 2047);
        assert_eq!(q(-5000.0 * s), -2048);
    }

    proptest! {
        #[test]
        fn scale_is_homogeneous(v in proptest::collection::vec(-10.0f64..10.0, 1..32), c in 0.1f64..5.0, neg in any::<bool>()) {
            let c = if neg { -c } else { c };
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let a = scale_of(&scaled, 4).unwrap();
            let b = scale_of(&v, 4).unwrap();
            if b != ZERO_SCALE {
                prop_assert!((a - c.abs() * b).abs() <= 1e-12 * a.max(1.0));
            }
        }
    }
}
