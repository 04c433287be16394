//! Energy-per-inference and area estimation for crossbar deployments.
//!
//! Every figure is built from a catalog of converter measurements, per-cell
//! NVM figures and operation counts; totals are exact sums of their parts.

mod presets;

pub use presets::{preset_report, Preset};

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossbar::{ColumnScheme, CrossbarDeployment, LayerDeployment};
use crate::model::{LinearOp, LinearStage, ModelError, NetworkGraph, Polarity};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CostError>;

/// Clock frequencies the catalog is characterized at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frequency {
    #[serde(rename = "10MHz")]
    Mhz10,
    #[serde(rename = "100MHz")]
    Mhz100,
}

impl Frequency {
    pub const ALL: [Frequency; 2] = [Frequency::Mhz10, Frequency::Mhz100];

    pub fn hz(self) -> f64 {
        match self {
            Frequency::Mhz10 => 10e6,
            Frequency::Mhz100 => 100e6,
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Frequency::Mhz10 => "10 MHz",
            Frequency::Mhz100 => "100 MHz",
        })
    }
}

/// Measured figures of one converter design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceFigures {
    /// Watts at 10 MHz.
    pub power_10mhz: f64,
    /// Watts at 100 MHz.
    pub power_100mhz: f64,
    /// Square micrometres.
    pub area_um2: f64,
}

impl DeviceFigures {
    pub fn power(&self, f: Frequency) -> f64 {
        match f {
            Frequency::Mhz10 => self.power_10mhz,
            Frequency::Mhz100 => self.power_100mhz,
        }
    }

    /// Energy of one conversion, `P(f)/f`.
    pub fn energy_per_op(&self, f: Frequency) -> f64 {
        self.power(f) / f.hz()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeripheryCatalog {
    pub dac4: DeviceFigures,
    pub dac8: DeviceFigures,
    pub adc4: DeviceFigures,
    pub adc8: DeviceFigures,
    /// Watts drawn by one NVM cell read.
    pub nvm_read_power: f64,
    pub nvm_cell_area_um2: f64,
    /// Subtractor power as a fraction of the ADC power.
    pub subtractor_power: f64,
    /// Subtractor area as a fraction of the ADC area.
    pub subtractor_area: f64,
    /// Current-scaling power as a fraction of the ADC power.
    pub current_scaling_power: f64,
}

impl Default for PeripheryCatalog {
    fn default() -> Self {
        let d = |p10: f64, p100: f64, area| DeviceFigures {
            power_10mhz: p10 * 1e-6,
            power_100mhz: p100 * 1e-6,
            area_um2: area,
        };
        Self {
            dac4: d(3.2, 11.7, 101.0),
            dac8: d(4.4, 13.6, 440.0),
            adc4: d(1.28, 12.56, 1030.0),
            adc8: d(1.64, 16.39, 7920.0),
            nvm_read_power: 0.2e-6,
            nvm_cell_area_um2: 0.075,
            subtractor_power: 0.05,
            subtractor_area: 0.10,
            current_scaling_power: 0.05,
        }
    }
}

impl PeripheryCatalog {
    pub fn validate(&self) -> Result<()> {
        let figures = [self.dac4, self.dac8, self.adc4, self.adc8];
        let all = figures
            .iter()
            .flat_map(|d| [d.power_10mhz, d.power_100mhz, d.area_um2])
            .chain([self.nvm_read_power, self.nvm_cell_area_um2]);
        if all.into_iter().any(|v| !(v > 0.0 && v.is_finite())) {
            return Err(CostError::Catalog("every catalog figure must be positive".into()));
        }
        let fractions = [self.subtractor_power, self.subtractor_area, self.current_scaling_power];
        if fractions.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(CostError::Catalog("overhead fractions must be non-negative".into()));
        }
        Ok(())
    }

    pub fn dac(&self, bits: u8) -> Result<DeviceFigures> {
        match bits {
            4 => Ok(self.dac4),
            8 => Ok(self.dac8),
            b => Err(CostError::Catalog(format!("no {b}-bit DAC in the catalog"))),
        }
    }

    pub fn adc(&self, bits: u8) -> Result<DeviceFigures> {
        match bits {
            4 => Ok(self.adc4),
            8 => Ok(self.adc8),
            b => Err(CostError::Catalog(format!("no {b}-bit ADC in the catalog"))),
        }
    }
}

/// Operations per inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    pub nvm_reads_pos: u64,
    pub nvm_reads_neg: u64,
    pub dac_ops: u64,
    pub adc_ops: u64,
}

impl OpCounts {
    pub fn nvm_reads(&self) -> u64 {
        self.nvm_reads_pos + self.nvm_reads_neg
    }

    fn add(&mut self, o: &OpCounts) {
        self.nvm_reads_pos += o.nvm_reads_pos;
        self.nvm_reads_neg += o.nvm_reads_neg;
        self.dac_ops += o.dac_ops;
        self.adc_ops += o.adc_ops;
    }
}

/// Counts the operations of one inference with every layer mapped in
/// `scheme`.
///
/// A convolution reads `F·K` cells per output position (`K = kh·kw·C`,
/// padded taps included); a dense layer reads `X·Y`. Negative columns of
/// bipolar channels are read as well, so fractional schemes read the
/// negative share of the `F − round(p·F)` unconstrained channels only.
/// Every layer converts its whole input once (`X_i` DAC operations) and
/// digitizes every output element (`Y_i·F_i` ADC operations).
pub fn count_ops(net: &NetworkGraph, scheme: Polarity) -> Result<OpCounts> {
    scheme.validate()?;
    let mut c = OpCounts::default();
    for st in net.linear_stages()? {
        c.add(&stage_ops(&st, scheme));
    }
    Ok(c)
}

/// Fractional power overheads added on top of the ADC figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdcOverheads {
    /// Bipolar columns need a current subtractor in front of the ADC.
    pub subtractor: bool,
    /// Layers with their own ranges need analog current scaling.
    pub current_scaling: bool,
}

impl AdcOverheads {
    pub fn factor(&self, catalog: &PeripheryCatalog) -> f64 {
        let mut f = 1.0;
        if self.subtractor {
            f += catalog.subtractor_power;
        }
        if self.current_scaling {
            f += catalog.current_scaling_power;
        }
        f
    }
}

/// Energy per inference in joules at one frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub frequency: Frequency,
    pub nvm_pos: f64,
    pub nvm_neg: f64,
    pub dac: f64,
    pub adc: f64,
    pub total: f64,
}

pub fn energy_estimate(
    counts: &OpCounts,
    catalog: &PeripheryCatalog,
    freq: Frequency,
    dac_bits: u8,
    adc_bits: u8,
    overheads: AdcOverheads,
) -> Result<EnergyBreakdown> {
    catalog.validate()?;
    let cell = catalog.nvm_read_power / freq.hz();
    let nvm_pos = counts.nvm_reads_pos as f64 * cell;
    let nvm_neg = counts.nvm_reads_neg as f64 * cell;
    let dac = counts.dac_ops as f64 * catalog.dac(dac_bits)?.energy_per_op(freq);
    let adc = counts.adc_ops as f64 * catalog.adc(adc_bits)?.energy_per_op(freq) * overheads.factor(catalog);
    Ok(EnergyBreakdown {
        frequency: freq,
        nvm_pos,
        nvm_neg,
        dac,
        adc,
        total: nvm_pos + nvm_neg + dac + adc,
    })
}

/// Physical components of a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentCounts {
    pub crossbars: u64,
    pub tile_rows: u64,
    pub tile_cols: u64,
    pub dacs: u64,
    pub adcs: u64,
    pub subtractors: u64,
    pub dac_bits: u8,
    pub adc_bits: u8,
}

impl ComponentCounts {
    /// Counts the periphery of a deployment.
    ///
    /// A reconfigurable deployment shares one DAC bank (one converter per
    /// tile row) across all layers, one ADC bank (one per tile column)
    /// across the hidden layers, and gives the output layer its own ADC
    /// bank. Otherwise every layer has its own DAC and ADC banks. A bank
    /// serving paired columns carries one subtractor per ADC.
    pub fn of_deployment(dep: &CrossbarDeployment) -> Self {
        let (tr, tc) = (dep.config.tile_rows as u64, dep.config.tile_cols as u64);
        let bipolar = |l: &LayerDeployment| l.tiles().any(|t| t.scheme == ColumnScheme::BipolarPaired);
        let (hidden, output): (Vec<_>, Vec<_>) = dep.layers.iter().partition(|l| !l.stage.is_output());
        let (dacs, adc_banks) = if dep.reconfigurable {
            let mut banks = Vec::new();
            if !hidden.is_empty() {
                banks.push(hidden.iter().any(|l| bipolar(l)));
            }
            banks.extend(output.iter().map(|l| bipolar(l)));
            (tr, banks)
        } else {
            (tr * dep.layers.len() as u64, dep.layers.iter().map(bipolar).collect())
        };
        let adcs = tc * adc_banks.len() as u64;
        let subtractors = tc * adc_banks.iter().filter(|b| **b).count() as u64;
        let dac_bits = dep.layers.iter().map(|l| l.dac.bits).max().unwrap_or(0);
        let adc_bits = hidden.iter().filter_map(|l| l.adc.bits).max().unwrap_or(dac_bits);
        Self {
            crossbars: dep.tile_count() as u64,
            tile_rows: tr,
            tile_cols: tc,
            dacs,
            adcs,
            subtractors,
            dac_bits,
            adc_bits,
        }
    }
}

/// Area in square millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaBreakdown {
    pub crossbars: f64,
    pub dacs: f64,
    pub adcs: f64,
    pub subtractors: f64,
    pub total: f64,
}

const UM2_PER_MM2: f64 = 1e6;

pub fn area_estimate(c: &ComponentCounts, catalog: &PeripheryCatalog) -> Result<AreaBreakdown> {
    catalog.validate()?;
    let adc = catalog.adc(c.adc_bits)?.area_um2;
    let crossbars = (c.crossbars * c.tile_rows * c.tile_cols) as f64 * catalog.nvm_cell_area_um2 / UM2_PER_MM2;
    let dacs = c.dacs as f64 * catalog.dac(c.dac_bits)?.area_um2 / UM2_PER_MM2;
    let adcs = c.adcs as f64 * adc / UM2_PER_MM2;
    let subtractors = c.subtractors as f64 * catalog.subtractor_area * adc / UM2_PER_MM2;
    Ok(AreaBreakdown {
        crossbars,
        dacs,
        adcs,
        subtractors,
        total: crossbars + dacs + adcs + subtractors,
    })
}

/// Energy and area of one deployment scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub counts: OpCounts,
    pub energy: Vec<EnergyBreakdown>,
    pub components: ComponentCounts,
    pub area: AreaBreakdown,
    pub reconfigurable: bool,
    /// Caveats about the inputs of this report.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl CostReport {
    /// Builds a report at every catalog frequency.
    pub fn new(
        label: impl Into<String>,
        counts: OpCounts,
        components: ComponentCounts,
        overheads: AdcOverheads,
        reconfigurable: bool,
        catalog: &PeripheryCatalog,
    ) -> Result<Self> {
        let energy = Frequency::ALL
            .iter()
            .map(|&f| energy_estimate(&counts, catalog, f, components.dac_bits, components.adc_bits, overheads))
            .collect::<Result<_>>()?;
        Ok(Self {
            label: label.into(),
            counts,
            energy,
            components,
            area: area_estimate(&components, catalog)?,
            reconfigurable,
            notes: Vec::new(),
        })
    }

    /// Report of a deployment: operation counts from the mapped network,
    /// periphery from its tiles, and a subtractor overhead when any column
    /// is paired plus a current-scaling overhead when the deployment is
    /// not reconfigurable.
    pub fn of_deployment(
        label: impl Into<String>,
        net: &NetworkGraph,
        dep: &CrossbarDeployment,
        catalog: &PeripheryCatalog,
    ) -> Result<Self> {
        let mut counts = OpCounts::default();
        for st in net.linear_stages()? {
            counts.add(&stage_ops(&st, st.polarity));
        }
        let components = ComponentCounts::of_deployment(dep);
        let overheads = AdcOverheads {
            subtractor: dep.subtractors() > 0,
            current_scaling: !dep.reconfigurable,
        };
        Self::new(label, counts, components, overheads, dep.reconfigurable, catalog)
    }

    pub fn energy_at(&self, f: Frequency) -> Option<&EnergyBreakdown> {
        self.energy.iter().find(|e| e.frequency == f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost reports always serialize")
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.label);
        let _ = writeln!(s, "  {:<22}{:>16}{:>16}", "energy / inference", "10 MHz", "100 MHz");
        let at = |f| self.energy_at(f).copied();
        let rows: [(&str, fn(&EnergyBreakdown) -> f64); 5] = [
            ("total", |e| e.total),
            ("NVM (+)", |e| e.nvm_pos),
            ("NVM (-)", |e| e.nvm_neg),
            ("DAC ops", |e| e.dac),
            ("ADC ops", |e| e.adc),
        ];
        for (name, get) in rows {
            let cell = |f| at(f).map_or("-".to_string(), |e| format!("{:.4} nJ", get(&e) * 1e9));
            let _ = writeln!(s, "  {:<22}{:>16}{:>16}", name, cell(Frequency::Mhz10), cell(Frequency::Mhz100));
        }
        let c = &self.components;
        let _ = writeln!(s, "  {:<22}{:>16}", "reconfigurable", if self.reconfigurable { "yes" } else { "no" });
        let _ = writeln!(s, "  {:<22}{:>16}", "crossbars", c.crossbars);
        let _ = writeln!(s, "  {:<22}{:>16}", format!("DACs ({}-bit)", c.dac_bits), c.dacs);
        let _ = writeln!(s, "  {:<22}{:>16}", format!("ADCs ({}-bit)", c.adc_bits), c.adcs);
        let _ = writeln!(s, "  {:<22}{:>16}", "current subtractors", c.subtractors);
        let _ = writeln!(s, "  {:<22}{:>13.4} mm2", "total area", self.area.total);
        for n in &self.notes {
            let _ = writeln!(s, "  note: {n}");
        }
        s
    }
}

fn stage_ops(st: &LinearStage, scheme: Polarity) -> OpCounts {
    let (rows, f, pos) = (st.op.rows() as u64, st.op.outputs(), st.op.positions() as u64);
    let bipolar = (f - scheme.constrained_channels(f)) as u64;
    OpCounts {
        nvm_reads_pos: rows * f as u64 * pos,
        nvm_reads_neg: rows * bipolar * pos,
        dac_ops: match st.op {
            LinearOp::Dense { inputs, .. } => inputs as u64,
            LinearOp::Conv(g) => g.input_len() as u64,
        },
        adc_ops: f as u64 * pos,
    }
}

/// `proposed / baseline` for one quantity; `None` when the baseline is 0.
fn ratio(proposed: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| proposed / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySavings {
    pub frequency: Frequency,
    pub nvm: Option<f64>,
    pub dac: Option<f64>,
    pub adc: Option<f64>,
    /// `proposed / baseline` total energy.
    pub total_ratio: f64,
    /// `1 − total_ratio`.
    pub total_saving: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub baseline: String,
    pub proposed: String,
    pub crossbar_area: Option<f64>,
    pub converter_area: Option<f64>,
    /// `proposed / baseline` total area.
    pub area_ratio: f64,
    pub area_saving: f64,
    pub energy: Vec<EnergySavings>,
}

/// Component and total ratios of `proposed` against `baseline`.
pub fn savings_report(baseline: &CostReport, proposed: &CostReport) -> Result<Savings> {
    let area_ratio = ratio(proposed.area.total, baseline.area.total)
        .ok_or_else(|| CostError::Argument(format!("baseline `{}` has zero area", baseline.label)))?;
    let mut energy = Vec::new();
    for b in &baseline.energy {
        let Some(p) = proposed.energy_at(b.frequency) else {
            continue;
        };
        let total_ratio = ratio(p.total, b.total)
            .ok_or_else(|| CostError::Argument(format!("baseline `{}` has zero energy", baseline.label)))?;
        energy.push(EnergySavings {
            frequency: b.frequency,
            nvm: ratio(p.nvm_pos + p.nvm_neg, b.nvm_pos + b.nvm_neg),
            dac: ratio(p.dac, b.dac),
            adc: ratio(p.adc, b.adc),
            total_ratio,
            total_saving: 1.0 - total_ratio,
        });
    }
    let converters = |a: &AreaBreakdown| a.dacs + a.adcs + a.subtractors;
    Ok(Savings {
        baseline: baseline.label.clone(),
        proposed: proposed.label.clone(),
        crossbar_area: ratio(proposed.area.crossbars, baseline.area.crossbars),
        converter_area: ratio(converters(&proposed.area), converters(&baseline.area)),
        area_ratio,
        area_saving: 1.0 - area_ratio,
        energy,
    })
}
