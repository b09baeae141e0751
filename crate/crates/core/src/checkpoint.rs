//! Versioned container for trained models.
//!
//! Layout: the 8-byte magic `ADCLCKPT`, a little-endian `u32` version, then a
//! JSON document. Besides the real-valued parameters the document stores, per
//! crossbar layer, the integer weight grid with its scale and bit width, and,
//! per LIF layer, the integer threshold and leak code used on hardware.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::crossbar::{program, AdcModel, CrossbarConfig, Mapping, NamedProgram};
use crate::error::{Error, Result};
use crate::netspec::{NetworkSpec, Periphery};
use crate::quant::{quant_levels, quantize_value, scale_of, QuantizedTensor};
use crate::tensor::IntTensor;
use crate::train::model::{Net, Params};
use crate::train::Stage;

pub const MAGIC: &[u8; 8] = b"ADCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub bits: u32,
    pub scale: f64,
    /// `[out, rows]`.
    pub dims: [usize; 2],
    pub values: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRecord {
    pub v_th: f64,
    pub leak: f64,
    /// Threshold in units of the feeding layer's scale.
    pub v_th_int: i32,
    pub leak_shift: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub spec: NetworkSpec,
    /// Array size and mapping the model was fine-tuned for.
    pub xbar: usize,
    pub mapping: Mapping,
    pub params: Params,
    pub weights: Vec<QuantRecord>,
    pub neurons: Vec<NeuronRecord>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format { kind: "checkpoint", msg: msg.into() }
}

impl Checkpoint {
    pub fn new(stage: Stage, net: &Net, params: Params, xbar: usize, mapping: Mapping) -> Result<Self> {
        net.check_params(&params)?;
        let mut weights = Vec::new();
        for (x, info) in params.xbars.iter().zip(&net.xl) {
            let scale = scale_of(&x.w, info.bits)?;
            let ql = quant_levels(info.bits)?;
            let values = x.w.iter().map(|&v| quantize_value(v, scale, ql)).collect();
            weights.push(QuantRecord { bits: info.bits, scale, dims: [x.out, x.rows], values });
        }
        let neurons = net
            .lif_sources()
            .iter()
            .zip(&params.lifs)
            .map(|(&src, n)| {
                let (v_th_int, leak_shift) = Net::int_neuron(n, weights[src].scale)?;
                Ok(NeuronRecord { v_th: n.v_th, leak: n.leak, v_th_int, leak_shift })
            })
            .collect::<Result<_>>()?;
        Ok(Self { stage, spec: net.spec.clone(), xbar, mapping, params, weights, neurons })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        serde_json::to_writer(&mut w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let v = u32::from_le_bytes(head[8..].try_into().expect("4 bytes"));
        if v != VERSION {
            return Err(bad(format!("unsupported version {v} (expected {VERSION})")));
        }
        let ck: Self = serde_json::from_reader(r).map_err(|e| bad(e.to_string()))?;
        ck.spec.validate()?;
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to memory");
        v
    }

    /// Cell programs of every crossbar layer, sense amplifiers on the layers
    /// marked for them and the multi-bit converter elsewhere.
    pub fn programs(&self, xbar: usize, mapping: Mapping) -> Result<Vec<NamedProgram>> {
        let net = Net::new(self.spec.clone())?;
        let mut out = Vec::with_capacity(net.xl.len());
        for (i, (info, rec)) in net.xl.iter().zip(&self.weights).enumerate() {
            let g = &info.geom;
            let dims = if info.linear { vec![rec.dims[0], rec.dims[1]] } else { vec![g.o, g.c, g.kh, g.kw] };
            let values = IntTensor::new(dims, rec.values.clone(), rec.bits, true)?;
            let wq = QuantizedTensor { values, scale: rec.scale, bits: rec.bits };
            let adc = match info.periphery {
                Periphery::Adcless => AdcModel::OneBitSa,
                Periphery::Hp => self.spec.hp_adc(),
            };
            let cfg = CrossbarConfig::new(xbar, rec.bits, mapping, adc);
            let kind = self.spec.layers[info.layer].kind();
            out.push(NamedProgram {
                name: format!("x{i}-{kind}"),
                stride: g.stride,
                padding: g.pad,
                program: program(&wq, &cfg, net.groups(i, xbar)?)?,
            });
        }
        Ok(out)
    }

    /// Rejects a checkpoint whose network differs from `spec`.
    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        if self.spec.crossbar_layers()? != spec.crossbar_layers()? || self.spec.layers.len() != spec.layers.len() {
            return Err(Error::Validation(format!(
                "checkpoint was trained for network `{}`, which does not match `{}`",
                self.spec.name, spec.name
            )));
        }
        Ok(())
    }
}
