//! Cell-level crossbar model: bit-sliced weight programming under the
//! shared-column and split-column mappings, wordline activation by binary
//! spikes, bitline accumulation, ADC sampling and shift-add.
//!
//! Cells are ideal conductances (0 = Roff, 1 = Ron). A program covers one
//! layer. The kernel's input-channel axis is split into `groups` blocks and
//! each block is laid onto its own row of arrays, so one bitline always
//! carries exactly one group's partial sum for one bit-plane.
//!
//! Column order inside a group is LSB-first per output channel:
//! shared-column uses `out * planes + plane`, split-column uses
//! `(out * 2 + rail) * planes + plane` (positive rail first). Shared-column
//! arrays hold two physical rows per wordline input (positive row, then
//! negative row), both gated by the same spike.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::{conv_out_extent, IntTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mapping {
    /// Positive and negative weights share a column, one row each.
    SharedColumn,
    /// Positive and negative weights land in adjacent column sets.
    #[default]
    SplitColumns,
}

impl FromStr for Mapping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" | "shared-column" | "1" => Ok(Self::SharedColumn),
            "split" | "split-columns" | "2" => Ok(Self::SplitColumns),
            _ => Err(invalid(format!("unknown mapping scheme `{s}` (expected shared|split)"))),
        }
    }
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SharedColumn => "shared",
            Self::SplitColumns => "split",
        })
    }
}

/// Bitline digitizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdcModel {
    /// Sense amplifier used as a 1-bit ADC.
    OneBitSa,
    /// Uniform multi-bit converter over the full bitline range.
    HighPrecision { bits: u32 },
    /// Lossless readout.
    Ideal,
}

impl FromStr for AdcModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sa1" | "sa" => Ok(Self::OneBitSa),
            "ideal" => Ok(Self::Ideal),
            _ => match s.strip_prefix("hp").map(str::parse::<u32>) {
                Some(Ok(bits)) if bits >= 1 => Ok(Self::HighPrecision { bits }),
                _ => Err(invalid(format!("unknown ADC model `{s}` (expected sa1|hp<bits>|ideal)"))),
            },
        }
    }
}

impl fmt::Display for AdcModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OneBitSa => f.write_str("sa1"),
            Self::HighPrecision { bits } => write!(f, "hp{bits}"),
            Self::Ideal => f.write_str("ideal"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossbarConfig {
    /// Wordlines and bitlines per array.
    pub xbar: usize,
    pub nb_w: u32,
    pub sb_w: u32,
    pub mapping: Mapping,
    pub adc: AdcModel,
}

impl CrossbarConfig {
    pub fn new(xbar: usize, nb_w: u32, mapping: Mapping, adc: AdcModel) -> Self {
        Self { xbar, nb_w, sb_w: 1, mapping, adc }
    }

    pub fn validate(&self) -> Result<()> {
        if self.xbar == 0 {
            return Err(invalid("crossbar size must be positive"));
        }
        if self.sb_w == 0 || self.nb_w == 0 || self.nb_w % self.sb_w != 0 || self.nb_w > 16 {
            return Err(invalid(format!(
                "cell width {} must divide weight width {}",
                self.sb_w, self.nb_w
            )));
        }
        if let AdcModel::HighPrecision { bits } = self.adc {
            if bits == 0 || bits > 16 {
                return Err(invalid(format!("HP-ADC resolution {bits} outside 1..=16")));
            }
        }
        Ok(())
    }

    pub fn planes(&self) -> usize {
        (self.nb_w / self.sb_w) as usize
    }

    pub fn rails(&self) -> usize {
        match self.mapping {
            Mapping::SharedColumn => 1,
            Mapping::SplitColumns => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rail {
    /// Shared column: positive row charges, negative row discharges.
    Signed,
    Pos,
    Neg,
}

/// What a used bitline computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnTag {
    pub out: u32,
    pub plane: u8,
    pub rail: Rail,
}

/// One physical array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellArray {
    pub group: usize,
    pub mapping: Mapping,
    /// Wordline inputs (spikes) the array accepts.
    pub wordlines: usize,
    /// Wordlines that carry a logical input; the rest are tied to 0.
    pub active_rows: usize,
    /// Bitlines in the array.
    pub bitlines: usize,
    /// Tags of the used bitlines, in column order.
    pub columns: Vec<ColumnTag>,
    /// Row-major `physical_rows x bitlines` cell values.
    cells: Vec<u8>,
}

impl CellArray {
    fn blank(group: usize, mapping: Mapping, xbar: usize, active_rows: usize) -> Self {
        let rows = physical_rows(mapping, xbar);
        Self {
            group,
            mapping,
            wordlines: xbar,
            active_rows,
            bitlines: xbar,
            columns: Vec::new(),
            cells: vec![0; rows * xbar],
        }
    }

    pub fn physical_rows(&self) -> usize {
        physical_rows(self.mapping, self.wordlines)
    }

    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.bitlines + col]
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    fn set(&mut self, row: usize, col: usize, v: u8) {
        self.cells[row * self.bitlines + col] = v;
    }
}

fn physical_rows(mapping: Mapping, xbar: usize) -> usize {
    match mapping {
        Mapping::SharedColumn => 2 * xbar,
        Mapping::SplitColumns => xbar,
    }
}

/// All arrays holding one layer, plus the geometry needed to drive them.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossbarProgram {
    pub config: CrossbarConfig,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub scale: f64,
    pub arrays: Vec<CellArray>,
}

fn kernel_geometry(wq: &QuantizedTensor) -> Result<(usize, usize, usize, usize)> {
    match *wq.values.dims() {
        [o, c, kh, kw] => Ok((o, c, kh, kw)),
        [o, f] => Ok((o, f, 1, 1)),
        _ => Err(invalid(format!("weights must be 2-D or 4-D, got {:?}", wq.values.dims()))),
    }
}

/// Programs `wq` with positive and negative weights sharing columns.
pub fn program_shared_column(wq: &QuantizedTensor, cfg: &CrossbarConfig, groups: usize) -> Result<CrossbarProgram> {
    program(wq, &CrossbarConfig { mapping: Mapping::SharedColumn, ..*cfg }, groups)
}

/// Programs `wq` with positive and negative weights in adjacent columns.
pub fn program_split_columns(wq: &QuantizedTensor, cfg: &CrossbarConfig, groups: usize) -> Result<CrossbarProgram> {
    program(wq, &CrossbarConfig { mapping: Mapping::SplitColumns, ..*cfg }, groups)
}

/// Programs `wq` under `cfg.mapping`.
pub fn program(wq: &QuantizedTensor, cfg: &CrossbarConfig, groups: usize) -> Result<CrossbarProgram> {
    cfg.validate()?;
    if wq.bits > cfg.nb_w {
        return Err(invalid(format!(
            "{}-bit weights do not fit {}-bit cells slicing",
            wq.bits, cfg.nb_w
        )));
    }
    let (o, c, kh, kw) = kernel_geometry(wq)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape {
            axis: "input channels (not divisible by groups)",
            expected: groups,
            found: c,
        });
    }
    let cg = c / groups;
    let rows = cg * kh * kw;
    if rows > cfg.xbar {
        return Err(invalid(format!(
            "group needs {rows} wordlines but the array has {}",
            cfg.xbar
        )));
    }
    let planes = cfg.planes();
    let rails = cfg.rails();
    let cols_per_group = o * rails * planes;
    let arrays_per_group = cols_per_group.div_ceil(cfg.xbar);
    let mask = (1i32 << cfg.sb_w) - 1;
    let w = wq.values.data();
    let mut arrays = Vec::with_capacity(groups * arrays_per_group);
    for g in 0..groups {
        let mut block: Vec<CellArray> = (0..arrays_per_group)
            .map(|_| CellArray::blank(g, cfg.mapping, cfg.xbar, rows))
            .collect();
        for col in 0..cols_per_group {
            let plane = col % planes;
            let (out, rail) = match cfg.mapping {
                Mapping::SharedColumn => (col / planes, Rail::Signed),
                Mapping::SplitColumns => {
                    let k = col / planes;
                    (k / 2, if k % 2 == 0 { Rail::Pos } else { Rail::Neg })
                }
            };
            let arr = &mut block[col / cfg.xbar];
            let local = col % cfg.xbar;
            arr.columns.push(ColumnTag { out: out as u32, plane: plane as u8, rail });
            let shift = plane as u32 * cfg.sb_w;
            for r in 0..rows {
                let ci = g * cg + r / (kh * kw);
                let k = r % (kh * kw);
                let v = w[(out * c + ci) * kh * kw + k];
                let pos = ((v.max(0) >> shift) & mask) as u8;
                let neg = (((-v).max(0) >> shift) & mask) as u8;
                match rail {
                    Rail::Signed => {
                        arr.set(2 * r, local, pos);
                        arr.set(2 * r + 1, local, neg);
                    }
                    Rail::Pos => arr.set(r, local, pos),
                    Rail::Neg => arr.set(r, local, neg),
                }
            }
        }
        arrays.extend(block);
    }
    Ok(CrossbarProgram {
        config: *cfg,
        out_ch: o,
        in_ch: c,
        kh,
        kw,
        groups,
        scale: wq.scale,
        arrays,
    })
}

impl CrossbarProgram {
    pub fn rows_per_group(&self) -> usize {
        self.in_ch / self.groups * self.kh * self.kw
    }

    /// Signed shift-add recombination of every cell: `sum_i 2^i (pos_i - neg_i)`.
    pub fn reconstruct(&self) -> Result<IntTensor> {
        let (o, c, kk) = (self.out_ch, self.in_ch, self.kh * self.kw);
        let cg = c / self.groups;
        let mut w = vec![0i32; o * c * kk];
        for arr in &self.arrays {
            for (local, tag) in arr.columns.iter().enumerate() {
                let weight = 1i32 << (tag.plane as u32 * self.config.sb_w);
                for r in 0..arr.active_rows {
                    let ci = arr.group * cg + r / kk;
                    let idx = (tag.out as usize * c + ci) * kk + r % kk;
                    let v = match tag.rail {
                        Rail::Signed => arr.cell(2 * r, local) as i32 - arr.cell(2 * r + 1, local) as i32,
                        Rail::Pos => arr.cell(r, local) as i32,
                        Rail::Neg => -(arr.cell(r, local) as i32),
                    };
                    w[idx] += weight * v;
                }
            }
        }
        IntTensor::new(vec![o, c, self.kh, self.kw], w, 32, true)
    }
}

/// Integer bitline sums for one spike vector (one spike per active wordline).
/// Shared-column bitlines return `pos - neg`.
pub fn bitline_mac(array: &CellArray, spikes: &[u8]) -> Result<Vec<i32>> {
    if spikes.len() != array.active_rows {
        return Err(Error::Shape {
            axis: "wordlines",
            expected: array.active_rows,
            found: spikes.len(),
        });
    }
    let mut out = vec![0i32; array.columns.len()];
    for (r, &s) in spikes.iter().enumerate() {
        if s == 0 {
            continue;
        }
        if s != 1 {
            return Err(Error::NonBinary { index: r, value: s as i64 });
        }
        for (col, acc) in out.iter_mut().enumerate() {
            *acc += match array.mapping {
                Mapping::SharedColumn => array.cell(2 * r, col) as i32 - array.cell(2 * r + 1, col) as i32,
                Mapping::SplitColumns => array.cell(r, col) as i32,
            };
        }
    }
    Ok(out)
}

#[inline]
pub fn sign(x: i32) -> i32 {
    x.signum()
}

#[inline]
pub fn heaviside(x: i32) -> i32 {
    (x > 0) as i32
}

/// Uniform `bits`-bit conversion of `|x|` over `[0, full_scale]`, rounded to
/// the nearest code and mapped back to the nearest integer bitline value.
#[inline]
pub fn hp_convert(x: i32, bits: u32, full_scale: i64) -> i32 {
    let levels = (1i64 << bits) - 1;
    let mag = (x as i64).abs();
    let code = ((2 * mag * levels + full_scale) / (2 * full_scale)).min(levels);
    let back = (2 * code * full_scale + levels) / (2 * levels);
    (x.signum() as i64 * back) as i32
}

/// Digitizes one bitline value.
#[inline]
pub fn adc_sample_value(x: i32, model: AdcModel, mapping: Mapping, full_scale: i64) -> i32 {
    match model {
        AdcModel::Ideal => x,
        AdcModel::OneBitSa => match mapping {
            Mapping::SharedColumn => sign(x),
            Mapping::SplitColumns => heaviside(x),
        },
        AdcModel::HighPrecision { bits } => hp_convert(x, bits, full_scale),
    }
}

/// Full-scale bitline value of an array with `n_wl` wordlines.
pub fn full_scale(n_wl: usize, sb_w: u32) -> i64 {
    n_wl as i64 * ((1i64 << sb_w) - 1)
}

pub fn adc_sample(bitline: &[i32], model: AdcModel, mapping: Mapping, n_wl: usize, sb_w: u32) -> Vec<i32> {
    let fs = full_scale(n_wl, sb_w).max(1);
    bitline.iter().map(|&x| adc_sample_value(x, model, mapping, fs)).collect()
}

/// `sum_i 2^i * plane_i`, planes LSB first.
pub fn shift_add(per_plane: &[Vec<i32>]) -> Vec<i32> {
    let len = per_plane.first().map_or(0, Vec::len);
    let mut out = vec![0i32; len];
    for (i, p) in per_plane.iter().enumerate() {
        for (acc, &v) in out.iter_mut().zip(p) {
            *acc += v << i;
        }
    }
    out
}

/// Converter resolution needed for a lossless readout: `log2(n_wl) + sb_w - 1`.
pub fn ideal_adc_bits(n_wl: usize, sb_w: u32) -> Result<u32> {
    if n_wl == 0 || !n_wl.is_power_of_two() {
        return Err(invalid(format!("wordline count {n_wl} is not a power of two")));
    }
    Ok(n_wl.trailing_zeros() + sb_w - 1)
}

/// Output of a cell-level layer simulation.
#[derive(Clone, Debug)]
pub struct CellSim {
    pub output: IntTensor,
    /// Every distinct digitized bitline value seen.
    pub sampled: BTreeSet<i32>,
}

/// Evaluates a convolution as the hardware would: for every output position
/// and group, drive the group's wordlines with the receptive field, read and
/// digitize every bitline, shift-add per rail, subtract rails, then add the
/// group partial sums in ascending group order.
pub fn simulate_conv(program: &CrossbarProgram, x: &IntTensor, stride: usize, padding: usize) -> Result<CellSim> {
    let d = x.dims();
    if d.len() != 4 || d[1] != program.in_ch {
        return Err(Error::Shape {
            axis: "input channels",
            expected: program.in_ch,
            found: d.get(1).copied().unwrap_or(0),
        });
    }
    if !x.is_binary() {
        let (index, &value) = x.data().iter().enumerate().find(|(_, &v)| v != 0 && v != 1).unwrap();
        return Err(Error::NonBinary { index, value: value as i64 });
    }
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let (kh, kw) = (program.kh, program.kw);
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    let (o, cg, planes) = (program.out_ch, c / program.groups, program.config.planes());
    let rows = program.rows_per_group();
    let cfg = program.config;
    let nwl = cfg.xbar;
    let mut sampled = BTreeSet::new();
    let mut out = vec![0i32; n * o * oh * ow];
    let mut spikes = vec![0u8; rows];
    // per-group, per-rail, per-plane digitized values for each output channel
    let mut digit = vec![vec![vec![0i32; o]; planes]; 2];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut total = vec![0i32; o];
                for g in 0..program.groups {
                    for (r, s) in spikes.iter_mut().enumerate() {
                        let ci = g * cg + r / (kh * kw);
                        let (ky, kx) = ((r % (kh * kw)) / kw, r % kw);
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *s = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            0
                        } else {
                            x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize] as u8
                        };
                    }
                    for arr in program.arrays.iter().filter(|a| a.group == g) {
                        let bl = bitline_mac(arr, &spikes)?;
                        let ds = adc_sample(&bl, cfg.adc, cfg.mapping, nwl, cfg.sb_w);
                        for (tag, v) in arr.columns.iter().zip(ds) {
                            sampled.insert(v);
                            let rail = (tag.rail == Rail::Neg) as usize;
                            digit[rail][tag.plane as usize][tag.out as usize] = v;
                        }
                    }
                    let pos = shift_add(&digit[0]);
                    let group_sum: Vec<i32> = if cfg.mapping == Mapping::SplitColumns {
                        let neg = shift_add(&digit[1]);
                        pos.iter().zip(&neg).map(|(p, q)| p - q).collect()
                    } else {
                        pos
                    };
                    for (t, v) in total.iter_mut().zip(group_sum) {
                        *t += v;
                    }
                }
                for (oc, v) in total.into_iter().enumerate() {
                    out[((b * o + oc) * oh + oy) * ow + ox] = v;
                }
            }
        }
    }
    Ok(CellSim {
        output: IntTensor::new(vec![n, o, oh, ow], out, 32, true)?,
        sampled,
    })
}

const PROGRAM_MAGIC: &[u8; 8] = b"XBARPROG";
pub const PROGRAM_VERSION: u32 = 1;

/// A named layer program, as stored in a dump file.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedProgram {
    pub name: String,
    pub stride: usize,
    pub padding: usize,
    pub program: CrossbarProgram,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format { kind: "crossbar program", msg: msg.into() }
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| fmt_err("value exceeds 32 bits"))?;
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.u32(v.len())?;
        Ok(self.0.write_all(v)?)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b).map_err(|_| fmt_err("truncated"))?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b).map_err(|_| fmt_err("truncated"))?;
        Ok(u32::from_le_bytes(b) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b).map_err(|_| fmt_err("truncated"))?;
        Ok(f64::from_le_bytes(b))
    }
    fn bytes(&mut self, limit: usize) -> Result<Vec<u8>> {
        let n = self.u32()?;
        if n > limit {
            return Err(fmt_err(format!("field length {n} exceeds {limit}")));
        }
        let mut v = vec![0u8; n];
        self.0.read_exact(&mut v).map_err(|_| fmt_err("truncated"))?;
        Ok(v)
    }
}

fn adc_code(adc: AdcModel) -> (u8, u8) {
    match adc {
        AdcModel::OneBitSa => (0, 1),
        AdcModel::HighPrecision { bits } => (1, bits as u8),
        AdcModel::Ideal => (2, 0),
    }
}

fn rail_code(r: Rail) -> u8 {
    match r {
        Rail::Signed => 0,
        Rail::Pos => 1,
        Rail::Neg => 2,
    }
}

/// Writes programs as a versioned binary container. Cells are packed one bit
/// per cell (LSB first) when `sb_w == 1`, otherwise one byte per cell.
pub fn write_programs<W: Write>(w: W, programs: &[NamedProgram]) -> Result<()> {
    let mut w = Writer(w);
    w.0.write_all(PROGRAM_MAGIC)?;
    w.u32(PROGRAM_VERSION as usize)?;
    w.u32(programs.len())?;
    for np in programs {
        let p = &np.program;
        w.bytes(np.name.as_bytes())?;
        w.u32(np.stride)?;
        w.u32(np.padding)?;
        w.u32(p.config.xbar)?;
        w.u32(p.config.nb_w as usize)?;
        w.u32(p.config.sb_w as usize)?;
        w.u8((p.config.mapping == Mapping::SplitColumns) as u8)?;
        let (k, b) = adc_code(p.config.adc);
        w.u8(k)?;
        w.u8(b)?;
        for v in [p.out_ch, p.in_ch, p.kh, p.kw, p.groups] {
            w.u32(v)?;
        }
        w.f64(p.scale)?;
        w.u32(p.arrays.len())?;
        for a in &p.arrays {
            w.u32(a.group)?;
            w.u32(a.active_rows)?;
            w.u32(a.columns.len())?;
            for t in &a.columns {
                w.u32(t.out as usize)?;
                w.u8(t.plane)?;
                w.u8(rail_code(t.rail))?;
            }
            if p.config.sb_w == 1 {
                let mut packed = vec![0u8; a.cells.len().div_ceil(8)];
                for (i, &c) in a.cells.iter().enumerate() {
                    packed[i / 8] |= (c & 1) << (i % 8);
                }
                w.bytes(&packed)?;
            } else {
                w.bytes(&a.cells)?;
            }
        }
    }
    Ok(())
}

/// Reads a container written by [`write_programs`]; unknown versions are rejected.
pub fn read_programs<R: Read>(r: R) -> Result<Vec<NamedProgram>> {
    let mut r = Reader(r);
    let mut magic = [0u8; 8];
    r.0.read_exact(&mut magic).map_err(|_| fmt_err("truncated header"))?;
    if &magic != PROGRAM_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != PROGRAM_VERSION as usize {
        return Err(fmt_err(format!("unsupported version {version} (expected {PROGRAM_VERSION})")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = String::from_utf8(r.bytes(4096)?).map_err(|_| fmt_err("layer name is not UTF-8"))?;
        let stride = r.u32()?;
        let padding = r.u32()?;
        let xbar = r.u32()?;
        let nb_w = r.u32()? as u32;
        let sb_w = r.u32()? as u32;
        let mapping = if r.u8()? == 1 { Mapping::SplitColumns } else { Mapping::SharedColumn };
        let adc = match (r.u8()?, r.u8()?) {
            (0, _) => AdcModel::OneBitSa,
            (1, b) => AdcModel::HighPrecision { bits: b as u32 },
            (2, _) => AdcModel::Ideal,
            (k, _) => return Err(fmt_err(format!("unknown ADC kind {k}"))),
        };
        let config = CrossbarConfig { xbar, nb_w, sb_w, mapping, adc };
        config.validate()?;
        let (out_ch, in_ch, kh, kw, groups) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let scale = r.f64()?;
        let n_arrays = r.u32()?;
        let mut arrays = Vec::with_capacity(n_arrays.min(1 << 16));
        for _ in 0..n_arrays {
            let group = r.u32()?;
            let active_rows = r.u32()?;
            let ncols = r.u32()?;
            if ncols > xbar || active_rows > xbar {
                return Err(fmt_err("array geometry exceeds crossbar size"));
            }
            let mut arr = CellArray::blank(group, mapping, xbar, active_rows);
            for _ in 0..ncols {
                let out = r.u32()? as u32;
                let plane = r.u8()?;
                let rail = match r.u8()? {
                    0 => Rail::Signed,
                    1 => Rail::Pos,
                    2 => Rail::Neg,
                    k => return Err(fmt_err(format!("unknown rail {k}"))),
                };
                arr.columns.push(ColumnTag { out, plane, rail });
            }
            let n_cells = arr.cells.len();
            if sb_w == 1 {
                let packed = r.bytes(n_cells.div_ceil(8))?;
                if packed.len() != n_cells.div_ceil(8) {
                    return Err(fmt_err("cell payload length mismatch"));
                }
                for (i, c) in arr.cells.iter_mut().enumerate() {
                    *c = (packed[i / 8] >> (i % 8)) & 1;
                }
            } else {
                let cells = r.bytes(n_cells)?;
                if cells.len() != n_cells {
                    return Err(fmt_err("cell payload length mismatch"));
                }
                arr.cells = cells;
            }
            arrays.push(arr);
        }
        out.push(NamedProgram {
            name,
            stride,
            padding,
            program: CrossbarProgram { config, out_ch, in_ch, kh, kw, groups, scale, arrays },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grouped_conv;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wq(dims: Vec<usize>, v: Vec<i32>, bits: u32) -> QuantizedTensor {
        QuantizedTensor { values: IntTensor::new(dims, v, bits, true).unwrap(), scale: 1.0, bits }
    }

    fn cfg(xbar: usize, mapping: Mapping, adc: AdcModel) -> CrossbarConfig {
        CrossbarConfig::new(xbar, 4, mapping, adc)
    }

    fn column_bits(p: &CrossbarProgram, row: usize) -> Vec<(Rail, u8)> {
        let a = &p.arrays[0];
        a.columns
            .iter()
            .enumerate()
            .map(|(c, t)| (t.rail, a.cell(row, c)))
            .collect()
    }

    #[test]
    fn shared_column_positive_weight() {
        let p = program_shared_column(&wq(vec![1, 1], vec![3], 4), &cfg(32, Mapping::SharedColumn, AdcModel::Ideal), 1).unwrap();
        let pos: Vec<u8> = column_bits(&p, 0).into_iter().map(|(_, b)| b).collect();
        let neg: Vec<u8> = column_bits(&p, 1).into_iter().map(|(_, b)| b).collect();
        assert_eq!(pos, vec![1, 1, 0, 0]);
        assert_eq!(neg, vec![0, 0, 0, 0]);
    }

    #[test]
    fn shared_column_negative_weight() {
        let p = program_shared_column(&wq(vec![1, 1], vec![-1], 4), &cfg(32, Mapping::SharedColumn, AdcModel::Ideal), 1).unwrap();
        let pos: Vec<u8> = column_bits(&p, 0).into_iter().map(|(_, b)| b).collect();
        let neg: Vec<u8> = column_bits(&p, 1).into_iter().map(|(_, b)| b).collect();
        assert_eq!(pos, vec![0, 0, 0, 0]);
        assert_eq!(neg, vec![1, 0, 0, 0]);
    }

    #[test]
    fn split_columns_put_signs_in_columns() {
        let p = program_split_columns(&wq(vec![1, 1], vec![3], 4), &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 1).unwrap();
        assert_eq!(
            column_bits(&p, 0),
            vec![(Rail::Pos, 1), (Rail::Pos, 1), (Rail::Pos, 0), (Rail::Pos, 0), (Rail::Neg, 0), (Rail::Neg, 0), (Rail::Neg, 0), (Rail::Neg, 0)]
        );
        let p = program_split_columns(&wq(vec![1, 1], vec![-1], 4), &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 1).unwrap();
        assert_eq!(column_bits(&p, 0)[4], (Rail::Neg, 1));
        assert!(column_bits(&p, 0)[..4].iter().all(|&(_, b)| b == 0));
    }

    #[test]
    fn too_wide_weights_rejected() {
        let w = wq(vec![1, 1], vec![100], 8);
        assert!(program(&w, &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 1).is_err());
    }

    #[test]
    fn group_larger_than_array_rejected() {
        let w = wq(vec![1, 40], vec![1; 40], 4);
        assert!(program(&w, &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 1).is_err());
        assert!(program(&w, &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 2).is_ok());
    }

    #[test]
    fn wide_layers_replicate_arrays_horizontally() {
        // 11 outputs x 2 rails x 4 planes = 88 columns -> 3 arrays of 32
        let w = wq(vec![11, 32], vec![1; 352], 4);
        let p = program(&w, &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 1).unwrap();
        assert_eq!(p.arrays.len(), 3);
        assert_eq!(p.arrays.iter().map(|a| a.columns.len()).sum::<usize>(), 88);
    }

    #[test]
    fn bitline_selector_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<i32> = (0..8 * 16).map(|_| rng.gen_range(-8..8)).collect();
        let p = program(&wq(vec![8, 16], w, 4), &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 1).unwrap();
        let a = &p.arrays[0];
        assert!(bitline_mac(a, &[0; 16]).unwrap().iter().all(|&v| v == 0));
        let mut onehot = [0u8; 16];
        onehot[5] = 1;
        let out = bitline_mac(a, &onehot).unwrap();
        let row: Vec<i32> = (0..a.columns.len()).map(|c| a.cell(5, c) as i32).collect();
        assert_eq!(out, row);
        assert!(bitline_mac(a, &[0; 15]).is_err());
    }

    #[test]
    fn bitline_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mapping in [Mapping::SharedColumn, Mapping::SplitColumns] {
            let w: Vec<i32> = (0..4 * 20).map(|_| rng.gen_range(-8..8)).collect();
            let p = program(&wq(vec![4, 20], w, 4), &cfg(32, mapping, AdcModel::Ideal), 1).unwrap();
            let s: Vec<u8> = (0..20).map(|_| rng.gen_range(0..2)).collect();
            for a in &p.arrays {
                let got = bitline_mac(a, &s).unwrap();
                for (c, &g) in got.iter().enumerate() {
                    let mut e = 0i32;
                    for r in 0..20 {
                        let cell = match mapping {
                            Mapping::SharedColumn => a.cell(2 * r, c) as i32 - a.cell(2 * r + 1, c) as i32,
                            Mapping::SplitColumns => a.cell(r, c) as i32,
                        };
                        e += cell * s[r] as i32;
                    }
                    assert_eq!(g, e);
                }
            }
        }
    }

    #[test]
    fn adc_examples() {
        let v = [-3, 0, 5];
        assert_eq!(adc_sample(&v, AdcModel::OneBitSa, Mapping::SharedColumn, 32, 1), vec![-1, 0, 1]);
        assert_eq!(adc_sample(&v, AdcModel::OneBitSa, Mapping::SplitColumns, 32, 1), vec![0, 0, 1]);
        assert_eq!(adc_sample(&v, AdcModel::Ideal, Mapping::SplitColumns, 32, 1), v.to_vec());
        // 32 * 31 / 32 = 31 -> code 31 -> 31 * 32 / 31 = 32
        assert_eq!(hp_convert(32, 5, 32), 32);
        assert_eq!(hp_convert(0, 5, 32), 0);
        // 16 * 31 / 32 = 15.5 -> code 16 -> 16 * 32 / 31 = 16.52 -> 17
        assert_eq!(hp_convert(16, 5, 32), 17);
        assert_eq!(hp_convert(-16, 5, 32), -17);
        assert_eq!(hp_convert(100, 5, 32), 32);
        // enough resolution is lossless
        assert!((0..=32).all(|x| hp_convert(x, 6, 32) == x));
    }

    #[test]
    fn shift_add_examples() {
        assert_eq!(shift_add(&[vec![1], vec![1], vec![0], vec![0]]), vec![3]);
        assert_eq!(shift_add(&[vec![4, -2]]), vec![4, -2]);
    }

    #[test]
    fn ideal_bits() {
        assert_eq!(ideal_adc_bits(64, 1).unwrap(), 6);
        assert_eq!(ideal_adc_bits(32, 1).unwrap(), 5);
        assert_eq!(ideal_adc_bits(128, 1).unwrap(), 7);
        assert!(ideal_adc_bits(48, 1).is_err());
    }

    #[test]
    fn parse_models() {
        assert_eq!("sa1".parse::<AdcModel>().unwrap(), AdcModel::OneBitSa);
        assert_eq!("hp5".parse::<AdcModel>().unwrap(), AdcModel::HighPrecision { bits: 5 });
        assert_eq!("ideal".parse::<AdcModel>().unwrap(), AdcModel::Ideal);
        assert!("hp".parse::<AdcModel>().is_err());
        assert_eq!("shared".parse::<Mapping>().unwrap(), Mapping::SharedColumn);
    }

    fn random_case(rng: &mut ChaCha8Rng, c: usize, o: usize, hw: usize) -> (IntTensor, QuantizedTensor) {
        let x = IntTensor::binary(vec![1, c, hw, hw], (0..c * hw * hw).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        let w = wq(vec![o, c, 3, 3], (0..o * c * 9).map(|_| rng.gen_range(-8..8)).collect(), 4);
        (x, w)
    }

    #[test]
    fn ideal_pipeline_reconstructs_integer_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mapping in [Mapping::SharedColumn, Mapping::SplitColumns] {
            for (xbar, groups) in [(32usize, 4usize), (64, 2), (128, 1)] {
                let (x, w) = random_case(&mut rng, 8, 5, 5);
                let p = program(&w, &cfg(xbar, mapping, AdcModel::Ideal), groups).unwrap();
                let sim = simulate_conv(&p, &x, 1, 1).unwrap();
                let direct = grouped_conv(&x, &w.values, 1, 1, 1).unwrap();
                assert_eq!(sim.output.data(), direct.data());
            }
        }
    }

    #[test]
    fn one_bit_partial_sums_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for mapping in [Mapping::SharedColumn, Mapping::SplitColumns] {
            let (x, w) = random_case(&mut rng, 8, 4, 5);
            let p = program(&w, &cfg(32, mapping, AdcModel::OneBitSa), 4).unwrap();
            let sim = simulate_conv(&p, &x, 1, 1).unwrap();
            assert!(sim.sampled.iter().all(|v| v.abs() <= 1));
            if mapping == Mapping::SplitColumns {
                assert!(sim.sampled.iter().all(|&v| v >= 0));
            }
        }
    }

    #[test]
    fn shared_sign_equals_sign_of_split_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let w: Vec<i32> = (0..6 * 24).map(|_| rng.gen_range(-8..8)).collect();
            let w = wq(vec![6, 24], w, 4);
            let s: Vec<u8> = (0..24).map(|_| rng.gen_range(0..2)).collect();
            let sh = program_shared_column(&w, &cfg(32, Mapping::SharedColumn, AdcModel::Ideal), 1).unwrap();
            let sp = program_split_columns(&w, &cfg(32, Mapping::SplitColumns, AdcModel::Ideal), 1).unwrap();
            let shared = adc_sample(&bitline_mac(&sh.arrays[0], &s).unwrap(), AdcModel::OneBitSa, Mapping::SharedColumn, 32, 1);
            let mut split = Vec::new();
            for a in &sp.arrays {
                split.extend(a.columns.iter().copied().zip(bitline_mac(a, &s).unwrap()));
            }
            for (col, tag) in sh.arrays[0].columns.iter().enumerate() {
                let find = |rail| split.iter().find(|(t, _)| t.out == tag.out && t.plane == tag.plane && t.rail == rail).unwrap().1;
                assert_eq!(shared[col], sign(find(Rail::Pos) - find(Rail::Neg)));
            }
        }
    }

    #[test]
    fn split_columns_zero_spikes_give_zero_ps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (_, w) = random_case(&mut rng, 8, 4, 5);
        let p = program(&w, &cfg(32, Mapping::SplitColumns, AdcModel::OneBitSa), 4).unwrap();
        let sim = simulate_conv(&p, &IntTensor::zeros(vec![1, 8, 5, 5], 1, false), 1, 1).unwrap();
        assert!(sim.output.data().iter().all(|&v| v == 0));
        assert_eq!(sim.sampled.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn dump_round_trip_and_version_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (_, w) = random_case(&mut rng, 8, 3, 5);
        let p = program(&w, &cfg(32, Mapping::SharedColumn, AdcModel::OneBitSa), 4).unwrap();
        let np = vec![NamedProgram { name: "conv".into(), stride: 1, padding: 1, program: p }];
        let mut buf = Vec::new();
        write_programs(&mut buf, &np).unwrap();
        assert_eq!(&buf[..8], PROGRAM_MAGIC);
        let back = read_programs(&buf[..]).unwrap();
        assert_eq!(back, np);
        let mut again = Vec::new();
        write_programs(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        buf[8] = 99;
        assert!(matches!(read_programs(&buf[..]), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn recombination_reconstructs_weights(
            vals in proptest::collection::vec(-8i32..8, 2 * 4 * 9), split in any::<bool>(), groups in prop::sample::select(vec![1usize, 2, 4])
        ) {
            let w = wq(vec![2, 4, 3, 3], vals, 4);
            let mapping = if split { Mapping::SplitColumns } else { Mapping::SharedColumn };
            let p = program(&w, &cfg(64, mapping, AdcModel::Ideal), groups).unwrap();
            prop_assert!(p.arrays.iter().all(|a| a.cells().iter().all(|&c| c <= 1)));
            prop_assert_eq!(p.reconstruct().unwrap().data().to_vec(), w.values.data().to_vec());
        }
    }
}
