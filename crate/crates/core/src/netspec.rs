//! Declarative network description and its validator.
//!
//! ```toml
//! name = "tiny"
//! input = [2, 8, 8]
//! classes = 4
//!
//! [[layer]]
//! kind = "conv"
//! out = 4
//! bits = 8
//! periphery = "hp"
//!
//! [[layer]]
//! kind = "lif"
//!
//! [[layer]]
//! kind = "linear"
//! out = 4
//! bits = 8
//! periphery = "hp"
//! ```

use serde::{Deserialize, Serialize};

use crate::crossbar::{AdcModel, Mapping};
use crate::error::{Error, Result};
use crate::layers::IandOrder;
use crate::spiking::ResetMode;

fn default_time_steps() -> usize {
    10
}
fn default_alpha() -> f64 {
    10.0
}
fn default_xbar() -> usize {
    32
}
fn default_hp_bits() -> u32 {
    5
}
fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_v_th() -> f64 {
    1.0
}
fn default_leak() -> f64 {
    1.0
}

/// Readout circuit of a crossbar layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Periphery {
    /// Multi-bit converter.
    Hp,
    /// Sense amplifiers only.
    Adcless,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossbarDefaults {
    #[serde(default = "default_xbar")]
    pub xbar: usize,
    #[serde(default)]
    pub mapping: Mapping,
    #[serde(default = "default_hp_bits")]
    pub hp_bits: u32,
}

impl Default for CrossbarDefaults {
    fn default() -> Self {
        Self { xbar: default_xbar(), mapping: Mapping::default(), hp_bits: default_hp_bits() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        /// Defaults to `kernel / 2`.
        #[serde(default)]
        padding: Option<usize>,
        bits: u32,
        periphery: Periphery,
    },
    Linear {
        out: usize,
        bits: u32,
        periphery: Periphery,
    },
    Lif {
        #[serde(default = "default_v_th")]
        v_th: f64,
        #[serde(default = "default_leak")]
        leak: f64,
    },
    /// Two same-width 3x3 conv+LIF stages merged with the input by IAND.
    Sew {
        #[serde(default = "default_kernel")]
        kernel: usize,
        bits: u32,
        periphery: Periphery,
        #[serde(default = "default_v_th")]
        v_th: f64,
        #[serde(default = "default_leak")]
        leak: f64,
    },
    Maxpool,
    Dropout {
        p: f64,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Conv { .. } => "conv",
            Self::Linear { .. } => "linear",
            Self::Lif { .. } => "lif",
            Self::Sew { .. } => "sew",
            Self::Maxpool => "maxpool",
            Self::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default)]
    pub reset: ResetMode,
    /// Width of the spike surrogate.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Width of the partial-sum surrogate.
    #[serde(default = "default_alpha")]
    pub ps_alpha: f64,
    #[serde(default)]
    pub iand: IandOrder,
    /// Lifts the 8-bit/HP requirement on the first and last crossbar layers.
    #[serde(default)]
    pub allow_edge_override: bool,
    #[serde(default)]
    pub crossbar: CrossbarDefaults,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

/// Activation shape `[channels, height, width]` (flattened features use `[F, 1, 1]`).
pub type Shape = [usize; 3];

/// Geometry of one crossbar-mapped weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossbarLayer {
    /// Index of the owning entry in `NetworkSpec::layers`.
    pub layer: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub bits: u32,
    pub periphery: Periphery,
}

impl CrossbarLayer {
    /// Logical wordlines needed by one output column.
    pub fn rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_shape[1] * self.out_shape[2]
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn conv_extent(x: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (x + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format { kind: "network spec", msg: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    pub fn hp_adc(&self) -> AdcModel {
        AdcModel::HighPrecision { bits: self.crossbar.hp_bits }
    }

    /// Every crossbar weight matrix in forward order (a SEW block contributes two).
    pub fn crossbar_layers(&self) -> Result<Vec<CrossbarLayer>> {
        let mut out = Vec::new();
        let mut shape = self.input;
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv { out: o, kernel, stride, padding, bits, periphery } => {
                    let p = padding.unwrap_or(kernel / 2);
                    let (h, w) = match (conv_extent(shape[1], kernel, stride, p), conv_extent(shape[2], kernel, stride, p)) {
                        (Some(h), Some(w)) if stride > 0 && h > 0 && w > 0 => (h, w),
                        _ => return Err(bad(format!("layer {i}: conv kernel {kernel} does not fit a {}x{} input", shape[1], shape[2]))),
                    };
                    let next = [o, h, w];
                    out.push(CrossbarLayer { layer: i, in_ch: shape[0], out_ch: o, kernel, stride, padding: p, in_shape: shape, out_shape: next, bits, periphery });
                    shape = next;
                }
                LayerSpec::Linear { out: o, bits, periphery } => {
                    let f = shape.iter().product();
                    let next = [o, 1, 1];
                    out.push(CrossbarLayer { layer: i, in_ch: f, out_ch: o, kernel: 1, stride: 1, padding: 0, in_shape: [f, 1, 1], out_shape: next, bits, periphery });
                    shape = next;
                }
                LayerSpec::Sew { kernel, bits, periphery, .. } => {
                    if kernel % 2 == 0 {
                        return Err(bad(format!("layer {i}: SEW kernel must be odd to preserve extents")));
                    }
                    let c = CrossbarLayer { layer: i, in_ch: shape[0], out_ch: shape[0], kernel, stride: 1, padding: kernel / 2, in_shape: shape, out_shape: shape, bits, periphery };
                    out.push(c);
                    out.push(c);
                }
                LayerSpec::Maxpool => {
                    if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(bad(format!("layer {i}: max pooling needs even extents, got {}x{}", shape[1], shape[2])));
                    }
                    shape = [shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Lif { .. } | LayerSpec::Dropout { .. } => {}
            }
        }
        Ok(out)
    }

    /// Shape after each layer.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let xl = self.crossbar_layers()?;
        let mut it = xl.iter().peekable();
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerSpec::Conv { .. } | LayerSpec::Linear { .. } | LayerSpec::Sew { .. } => {
                    let mut last = shape;
                    while let Some(c) = it.peek().filter(|c| c.layer == i) {
                        last = c.out_shape;
                        it.next();
                    }
                    shape = last;
                }
                LayerSpec::Maxpool => shape = [shape[0], shape[1] / 2, shape[2] / 2],
                _ => {}
            }
            out.push(shape);
        }
        Ok(out)
    }

    /// Checks structure, binary closure and the edge-layer precision rule.
    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(bad("input extents must be positive"));
        }
        if self.classes < 2 {
            return Err(bad("need at least two classes"));
        }
        if self.time_steps == 0 {
            return Err(bad("time_steps must be positive"));
        }
        if !(self.alpha > 0.0) || !(self.ps_alpha > 0.0) {
            return Err(bad("surrogate widths must be positive"));
        }
        if self.crossbar.xbar == 0 || self.crossbar.hp_bits == 0 {
            return Err(bad("crossbar size and HP-ADC bits must be positive"));
        }
        if self.layers.is_empty() {
            return Err(bad("network has no layers"));
        }
        let xl = self.crossbar_layers()?;
        // binary closure: the input is a spike tensor; crossbar outputs are
        // analog until a LIF layer thresholds them
        let mut binary = true;
        let mut after_crossbar = false;
        for (i, l) in self.layers.iter().enumerate() {
            let needs_binary = matches!(l, LayerSpec::Conv { .. } | LayerSpec::Linear { .. } | LayerSpec::Sew { .. } | LayerSpec::Maxpool);
            if needs_binary && !binary {
                return Err(bad(format!(
                    "layer {i} ({}) receives non-spiking input; insert a lif layer before it",
                    l.kind()
                )));
            }
            match l {
                LayerSpec::Conv { out, bits, .. } | LayerSpec::Linear { out, bits, .. } => {
                    if *out == 0 {
                        return Err(bad(format!("layer {i}: zero output width")));
                    }
                    if !(2..=16).contains(bits) {
                        return Err(bad(format!("layer {i}: weight bits {bits} outside 2..=16")));
                    }
                    binary = false;
                    after_crossbar = true;
                }
                LayerSpec::Sew { bits, v_th, leak, .. } => {
                    if !(2..=16).contains(bits) {
                        return Err(bad(format!("layer {i}: weight bits {bits} outside 2..=16")));
                    }
                    check_lif(i, *v_th, *leak)?;
                    after_crossbar = false;
                }
                LayerSpec::Lif { v_th, leak } => {
                    if !after_crossbar {
                        return Err(bad(format!("layer {i}: lif must directly follow a conv or linear layer")));
                    }
                    check_lif(i, *v_th, *leak)?;
                    binary = true;
                    after_crossbar = false;
                }
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(bad(format!("layer {i}: dropout rate {p} outside [0, 1)")));
                    }
                    if after_crossbar {
                        return Err(bad(format!("layer {i}: dropout between a crossbar layer and its lif")));
                    }
                }
                LayerSpec::Maxpool => after_crossbar = false,
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Linear { out, .. }) if *out == self.classes => {}
            _ => return Err(bad(format!("the last layer must be a linear layer with {} outputs", self.classes))),
        }
        if !self.allow_edge_override {
            for (pos, c) in [("first", xl.first()), ("last", xl.last())] {
                let c = c.expect("at least the readout layer");
                if c.bits != 8 || c.periphery != Periphery::Hp {
                    return Err(bad(format!(
                        "{pos} crossbar layer (layer {}) must use 8-bit weights with periphery = \"hp\" (set allow_edge_override = true to lift this)",
                        c.layer
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_lif(i: usize, v_th: f64, leak: f64) -> Result<()> {
    if !(v_th > 0.0) || !v_th.is_finite() {
        return Err(bad(format!("layer {i}: threshold must be positive")));
    }
    if !(leak > 0.0 && leak <= 1.0) {
        return Err(bad(format!("layer {i}: leak must lie in (0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
name = "tiny"
input = [2, 8, 8]
classes = 4

[[layer]]
kind = "conv"
out = 4
bits = 8
periphery = "hp"

[[layer]]
kind = "lif"

[[layer]]
kind = "sew"
bits = 4
periphery = "adcless"

[[layer]]
kind = "maxpool"

[[layer]]
kind = "dropout"
p = 0.1

[[layer]]
kind = "linear"
out = 4
bits = 8
periphery = "hp"
"#;

    #[test]
    fn parses_and_defaults() {
        let s = NetworkSpec::from_toml(TINY).unwrap();
        assert_eq!(s.time_steps, 10);
        assert_eq!(s.alpha, 10.0);
        assert_eq!(s.crossbar.xbar, 32);
        assert_eq!(s.iand, IandOrder::NegateDirect);
        assert_eq!(s.shapes().unwrap(), vec![[4, 8, 8], [4, 8, 8], [4, 8, 8], [4, 4, 4], [4, 4, 4], [4, 1, 1]]);
        let xl = s.crossbar_layers().unwrap();
        assert_eq!(xl.len(), 4);
        assert_eq!(xl[3].in_ch, 64);
        assert_eq!(xl[1].rows(), 36);
        assert_eq!(NetworkSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    fn expect_invalid(text: &str, needle: &str) {
        match NetworkSpec::from_toml(text) {
            Err(Error::Validation(m)) => assert!(m.contains(needle), "{m}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn binary_closure_enforced() {
        let t = TINY.replacen("[[layer]]\nkind = \"lif\"\n", "", 1);
        expect_invalid(&t, "non-spiking input");
    }

    #[test]
    fn edge_rule_enforced_and_overridable() {
        let t = TINY.replacen("bits = 8\nperiphery = \"hp\"", "bits = 4\nperiphery = \"adcless\"", 1);
        expect_invalid(&t, "first crossbar layer");
        let t = format!("allow_edge_override = true\n{t}");
        assert!(NetworkSpec::from_toml(&t).is_ok());
    }

    #[test]
    fn readout_and_pooling_checked() {
        let t = TINY.replace("input = [2, 8, 8]", "input = [2, 5, 5]");
        expect_invalid(&t, "even extents");
        let t = TINY.replace("classes = 4", "classes = 5");
        expect_invalid(&t, "last layer");
    }

    #[test]
    fn unknown_fields_rejected() {
        let t = TINY.replace("p = 0.1", "p = 0.1\nrate = 3");
        assert!(matches!(NetworkSpec::from_toml(&t), Err(Error::Format { .. })));
    }
}
