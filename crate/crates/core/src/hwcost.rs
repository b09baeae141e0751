//! First-order energy, latency and area estimates for a network mapped onto
//! tiles of processing elements of crossbar arrays.
//!
//! Energy is counted per event: a bitline readout costs an array read, one
//! conversion and one shift-add; a neuron update costs `lif_dyn_power` for
//! one clock; spikes entering a layer cost an interconnect transfer; LIF
//! modules leak for the whole inference. A row block of an array is only read
//! when at least one of its inputs spiked, so every count scales with the
//! per-layer input spike rate.
//!
//! Latency follows a synchronous pipeline over time steps. Each layer stage
//! takes `ceil(positions / replication)` array passes. A pass lasts
//! `mux_ratio` cycles behind a shared multi-bit converter and one cycle with
//! sense amplifiers, but never less than the number of row blocks whose
//! partial sums the accumulator adds one per cycle. A stage is longer still
//! when the tile's LIF modules cannot keep up. Stages
//! overlap across time steps, so the total is the pipeline fill plus
//! `T - 1` repetitions of the slowest stage.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::crossbar::Mapping;
use crate::error::{invalid, Error, Result};
use crate::netspec::{CrossbarLayer, LayerSpec, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechParams {
    pub clock_adcless_ns: f64,
    pub clock_hpadc_ns: f64,
    pub hp_adc_bits: u32,
    /// Bitlines sharing one multi-bit converter.
    pub mux_ratio: usize,
    pub lif_area_um2: f64,
    pub lif_dyn_power_mw: f64,
    pub lif_leak_power_nw: f64,
    pub ron_off_ratio: f64,
    pub node_nm: u32,
    /// Energy per bitline read of an active row block.
    pub e_array_read_pj: f64,
    pub e_sa_pj: f64,
    pub e_hp_adc_pj: f64,
    pub e_shift_add_pj: f64,
    /// Energy per spike delivered to a layer.
    pub e_interconnect_pj: f64,
    pub cell_area_um2: f64,
    pub sa_area_um2: f64,
    pub hp_adc_area_um2: f64,
    pub pes_per_tile: usize,
    pub arrays_per_pe: usize,
    /// One LIF module per output neuron of each replica, at most this many per tile.
    pub lif_per_tile: usize,
    pub max_speedup: usize,
    /// Upper bound on tiles; replication is reduced to fit.
    pub tile_budget: Option<usize>,
}

impl Default for TechParams {
    fn default() -> Self {
        Self {
            clock_adcless_ns: 1.1,
            clock_hpadc_ns: 11.9,
            hp_adc_bits: 5,
            mux_ratio: 8,
            lif_area_um2: 1448.0,
            lif_dyn_power_mw: 1.202,
            lif_leak_power_nw: 57.6,
            ron_off_ratio: 150.0,
            node_nm: 65,
            e_array_read_pj: 0.2,
            e_sa_pj: 0.02,
            e_hp_adc_pj: 1.0,
            e_shift_add_pj: 0.05,
            e_interconnect_pj: 0.5,
            cell_area_um2: 0.05,
            sa_area_um2: 5.0,
            hp_adc_area_um2: 600.0,
            pes_per_tile: 4,
            arrays_per_pe: 4,
            lif_per_tile: 64,
            max_speedup: 16,
            tile_budget: None,
        }
    }
}

impl TechParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::Format { kind: "tech params", msg: e.to_string() })?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("tech params serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("clock_adcless_ns", self.clock_adcless_ns),
            ("clock_hpadc_ns", self.clock_hpadc_ns),
            ("lif_area_um2", self.lif_area_um2),
            ("lif_dyn_power_mw", self.lif_dyn_power_mw),
            ("lif_leak_power_nw", self.lif_leak_power_nw),
            ("ron_off_ratio", self.ron_off_ratio),
            ("e_array_read_pj", self.e_array_read_pj),
            ("e_sa_pj", self.e_sa_pj),
            ("e_hp_adc_pj", self.e_hp_adc_pj),
            ("e_shift_add_pj", self.e_shift_add_pj),
            ("e_interconnect_pj", self.e_interconnect_pj),
            ("cell_area_um2", self.cell_area_um2),
            ("sa_area_um2", self.sa_area_um2),
            ("hp_adc_area_um2", self.hp_adc_area_um2),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("tech parameter {name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("hp_adc_bits", self.hp_adc_bits as usize),
            ("mux_ratio", self.mux_ratio),
            ("node_nm", self.node_nm as usize),
            ("pes_per_tile", self.pes_per_tile),
            ("arrays_per_pe", self.arrays_per_pe),
            ("lif_per_tile", self.lif_per_tile),
            ("max_speedup", self.max_speedup),
            ("tile_budget", self.tile_budget.unwrap_or(1)),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("tech parameter {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn arrays_per_tile(&self) -> usize {
        self.pes_per_tile * self.arrays_per_pe
    }

    /// Every energy coefficient (per-event energies and LIF powers) times `c`.
    pub fn scale_energy(&self, c: f64) -> Self {
        Self {
            e_array_read_pj: self.e_array_read_pj * c,
            e_sa_pj: self.e_sa_pj * c,
            e_hp_adc_pj: self.e_hp_adc_pj * c,
            e_shift_add_pj: self.e_shift_add_pj * c,
            e_interconnect_pj: self.e_interconnect_pj * c,
            lif_dyn_power_mw: self.lif_dyn_power_mw * c,
            lif_leak_power_nw: self.lif_leak_power_nw * c,
            ..self.clone()
        }
    }
}

/// Readout kind of the whole chip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    HpAdc,
    AdcLess,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::HpAdc => "hp-adc",
            Readout::AdcLess => "adc-less",
        })
    }
}

/// Array-level geometry of one crossbar weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub kind: String,
    /// Physical wordlines needed by one output (two per input on shared columns).
    pub rows_needed: usize,
    pub cols_needed: usize,
    pub row_blocks: usize,
    pub col_blocks: usize,
    pub arrays: usize,
    pub replication: usize,
    pub tiles: usize,
    pub lif_modules: usize,
    pub positions: usize,
    pub out_ch: usize,
    pub logical_rows: usize,
    pub in_elements: usize,
    pub has_lif: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Floorplan {
    pub xbar: usize,
    pub mapping: Mapping,
    pub layers: Vec<LayerPlan>,
}

impl Floorplan {
    pub fn tiles(&self) -> usize {
        self.layers.iter().map(|l| l.tiles).sum()
    }

    pub fn arrays(&self) -> usize {
        self.layers.iter().map(|l| l.arrays * l.replication).sum()
    }

    pub fn lif_modules(&self) -> usize {
        self.layers.iter().map(|l| l.lif_modules).sum()
    }
}

/// Arrays for a `rows x cols` logical weight matrix with `nb_w`-bit weights.
pub fn layer_arrays(rows: usize, out: usize, nb_w: u32, xbar: usize, mapping: Mapping) -> (usize, usize, usize, usize) {
    let (rows_needed, rails) = match mapping {
        Mapping::SharedColumn => (2 * rows, 1),
        Mapping::SplitColumns => (rows, 2),
    };
    let cols_needed = out * rails * nb_w as usize;
    (rows_needed, cols_needed, rows_needed.div_ceil(xbar), cols_needed.div_ceil(xbar))
}

fn feeds_lif(spec: &NetworkSpec, x: &CrossbarLayer) -> bool {
    match spec.layers[x.layer] {
        LayerSpec::Sew { .. } => true,
        _ => matches!(spec.layers.get(x.layer + 1), Some(LayerSpec::Lif { .. })),
    }
}

/// Arrays, replication, tiles and LIF modules per crossbar layer.
pub fn floorplan(net: &NetworkSpec, xbar: usize, mapping: Mapping, tech: &TechParams) -> Result<Floorplan> {
    tech.validate()?;
    if xbar == 0 {
        return Err(invalid("xbar must be positive"));
    }
    let xl = net.crossbar_layers()?;
    if xl.is_empty() {
        return Err(Error::Validation("network has no crossbar layers".into()));
    }
    let apt = tech.arrays_per_tile();
    let p_ref = xl.iter().map(|x| x.positions()).min().unwrap_or(1).max(1);
    let mut layers: Vec<LayerPlan> = xl
        .iter()
        .map(|x| {
            let (rows_needed, cols_needed, rb, cb) = layer_arrays(x.rows(), x.out_ch, x.bits, xbar, mapping);
            let replication = (x.positions() / p_ref).clamp(1, tech.max_speedup);
            LayerPlan {
                layer: x.layer,
                kind: net.layers[x.layer].kind().to_string(),
                rows_needed,
                cols_needed,
                row_blocks: rb,
                col_blocks: cb,
                arrays: rb * cb,
                replication,
                tiles: 0,
                lif_modules: 0,
                positions: x.positions(),
                out_ch: x.out_ch,
                logical_rows: x.rows(),
                in_elements: x.in_shape.iter().product(),
                has_lif: feeds_lif(net, x),
            }
        })
        .collect();
    let tiles = |layers: &[LayerPlan]| layers.iter().map(|l| (l.arrays * l.replication).div_ceil(apt)).sum::<usize>();
    if let Some(budget) = tech.tile_budget {
        let base: usize = layers.iter().map(|l| l.arrays.div_ceil(apt)).sum();
        if base > budget {
            return Err(Error::Validation(format!(
                "network needs at least {base} tiles at xbar={xbar} but the budget is {budget}; raise tile_budget, \
                 use larger arrays or more arrays per tile"
            )));
        }
        while tiles(&layers) > budget {
            let (i, _) = layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.replication > 1)
                .max_by(|a, b| a.1.replication.cmp(&b.1.replication).then(b.0.cmp(&a.0)))
                .expect("base mapping fits, so some layer is replicated");
            layers[i].replication -= 1;
        }
    }
    for l in &mut layers {
        l.tiles = (l.arrays * l.replication).div_ceil(apt);
        l.lif_modules = if l.has_lif { (l.out_ch * l.replication).min(l.tiles * tech.lif_per_tile) } else { 0 };
    }
    Ok(Floorplan { xbar, mapping, layers })
}

/// Per-layer share of a cost estimate. Energies in joules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    pub input_rate: f64,
    pub readouts: f64,
    pub e_array: f64,
    pub e_adc: f64,
    pub e_shift_add: f64,
    pub e_lif: f64,
    pub e_leak: f64,
    pub e_interconnect: f64,
    pub energy: f64,
    pub stage_cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub readout: Readout,
    pub xbar: usize,
    pub mapping: Mapping,
    pub time_steps: usize,
    pub clock_ns: f64,
    pub tiles: usize,
    pub arrays: usize,
    pub energy_j: f64,
    pub latency_s: f64,
    pub area_m2: f64,
    pub layers: Vec<LayerCost>,
}

fn active(rate: f64, inputs: usize) -> f64 {
    1.0 - (1.0 - rate).powi(inputs as i32)
}

/// Energy, latency and area at the given per-layer input spike rates.
pub fn estimate(net: &NetworkSpec, plan: &Floorplan, tech: &TechParams, readout: Readout, rates: &[f64]) -> Result<CostReport> {
    if rates.len() != plan.layers.len() {
        return Err(Error::Validation(format!(
            "activity covers {} crossbar layers, the network has {}; run an evaluation first",
            rates.len(),
            plan.layers.len()
        )));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(invalid(format!("spike rate {r} outside [0, 1]")));
    }
    let t_n = net.time_steps;
    let (clock_ns, pass_cycles, e_conv) = match readout {
        Readout::HpAdc => (tech.clock_hpadc_ns, tech.mux_ratio as u64, tech.e_hp_adc_pj),
        Readout::AdcLess => (tech.clock_adcless_ns, 1, tech.e_sa_pj),
    };
    let clock = clock_ns * 1e-9;
    let pj = 1e-12;
    let mut layers = Vec::with_capacity(plan.layers.len());
    for (l, &rate) in plan.layers.iter().zip(rates) {
        let per_input_rows = l.rows_needed / l.logical_rows;
        let mut readouts_per_pos = 0.0;
        for b in 0..l.row_blocks {
            let phys = (l.rows_needed - b * plan.xbar).min(plan.xbar);
            readouts_per_pos += active(rate, phys.div_ceil(per_input_rows)) * l.cols_needed as f64;
        }
        let events = (t_n * l.positions) as f64 * readouts_per_pos;
        let updates = if l.has_lif { (t_n * l.positions * l.out_ch) as f64 * active(rate, l.logical_rows) } else { 0.0 };
        let compute = (l.positions.div_ceil(l.replication) as u64) * pass_cycles.max(l.row_blocks as u64);
        let lif_cycles = if l.has_lif { ((l.positions * l.out_ch).div_ceil(l.lif_modules)) as u64 } else { 0 };
        layers.push(LayerCost {
            layer: l.layer,
            kind: l.kind.clone(),
            input_rate: rate,
            readouts: events,
            e_array: events * tech.e_array_read_pj * pj,
            e_adc: events * e_conv * pj,
            e_shift_add: events * tech.e_shift_add_pj * pj,
            e_lif: updates * tech.lif_dyn_power_mw * 1e-3 * clock,
            e_leak: 0.0,
            e_interconnect: (t_n * l.in_elements) as f64 * rate * tech.e_interconnect_pj * pj,
            energy: 0.0,
            stage_cycles: compute.max(lif_cycles),
        });
    }
    let total_cycles: u64 = layers.iter().map(|l| l.stage_cycles).sum::<u64>()
        + (t_n as u64 - 1) * layers.iter().map(|l| l.stage_cycles).max().unwrap_or(0);
    let latency_s = total_cycles as f64 * clock;
    for (c, l) in layers.iter_mut().zip(&plan.layers) {
        c.e_leak = l.lif_modules as f64 * tech.lif_leak_power_nw * 1e-9 * latency_s;
        c.energy = c.e_array + c.e_adc + c.e_shift_add + c.e_lif + c.e_leak + c.e_interconnect;
    }
    let energy_j = layers.iter().map(|l| l.energy).sum();
    let arrays = plan.arrays();
    let cols: usize = plan.layers.iter().map(|l| l.arrays * l.replication).sum::<usize>() * plan.xbar;
    let periph_um2 = match readout {
        Readout::HpAdc => cols.div_ceil(tech.mux_ratio) as f64 * tech.hp_adc_area_um2,
        Readout::AdcLess => cols as f64 * tech.sa_area_um2,
    };
    let cells_um2 = (arrays * plan.xbar * plan.xbar) as f64 * tech.cell_area_um2;
    let area_m2 = (cells_um2 + periph_um2 + plan.lif_modules() as f64 * tech.lif_area_um2) * 1e-12;
    Ok(CostReport {
        readout,
        xbar: plan.xbar,
        mapping: plan.mapping,
        time_steps: t_n,
        clock_ns,
        tiles: plan.tiles(),
        arrays,
        energy_j,
        latency_s,
        area_m2,
        layers,
    })
}

/// `(baseline - candidate) / candidate`.
pub fn improvement(baseline: f64, candidate: f64) -> Result<f64> {
    if candidate == 0.0 {
        return Err(invalid("improvement against a zero candidate metric"));
    }
    Ok((baseline - candidate) / candidate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub xbar: usize,
    pub hp: CostReport,
    pub adcless: CostReport,
    pub energy_improvement: f64,
    pub latency_improvement: f64,
    pub area_improvement: f64,
}

/// Both readouts on one floorplan, each at the activity measured under it.
pub fn compare(
    net: &NetworkSpec,
    tech: &TechParams,
    xbar: usize,
    mapping: Mapping,
    hp_rates: &[f64],
    adcless_rates: &[f64],
) -> Result<Comparison> {
    let plan = floorplan(net, xbar, mapping, tech)?;
    let hp = estimate(net, &plan, tech, Readout::HpAdc, hp_rates)?;
    let adcless = estimate(net, &plan, tech, Readout::AdcLess, adcless_rates)?;
    Ok(Comparison {
        xbar,
        energy_improvement: improvement(hp.energy_j, adcless.energy_j)?,
        latency_improvement: improvement(hp.latency_s, adcless.latency_s)?,
        area_improvement: improvement(hp.area_m2, adcless.area_m2)?,
        hp,
        adcless,
    })
}

pub const COMPARE_HEADER: &str =
    "xbar,tiles,energy_hp_j,energy_adcless_j,energy_improvement,latency_hp_s,latency_adcless_s,latency_improvement,area_hp_m2,area_adcless_m2";

impl Comparison {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6e},{:.4},{:.6e},{:.6e},{:.4},{:.6e},{:.6e}",
            self.xbar,
            self.hp.tiles,
            self.hp.energy_j,
            self.adcless.energy_j,
            self.energy_improvement,
            self.hp.latency_s,
            self.adcless.latency_s,
            self.latency_improvement,
            self.hp.area_m2,
            self.adcless.area_m2
        )
    }
}

pub const LAYER_HEADER: &str =
    "readout,xbar,layer,kind,input_rate,readouts,e_array_j,e_adc_j,e_shift_add_j,e_lif_j,e_leak_j,e_interconnect_j,energy_j,stage_cycles";

impl CostReport {
    pub fn write_layers<W: Write>(&self, mut w: W) -> Result<()> {
        for l in &self.layers {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.3},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
                self.readout,
                self.xbar,
                l.layer,
                l.kind,
                l.input_rate,
                l.readouts,
                l.e_array,
                l.e_adc,
                l.e_shift_add,
                l.e_lif,
                l.e_leak,
                l.e_interconnect,
                l.energy,
                l.stage_cycles
            )?;
        }
        Ok(())
    }
}
