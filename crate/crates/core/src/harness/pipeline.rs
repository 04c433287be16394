//! The train → map → estimate → sweep → report pipelines.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DataConfig, ExperimentConfig};
use super::{load_cifar10, load_har_csv, parse_cifar_records, synth_cifar_records, synth_har, Dataset, HarnessError, Result};
use crate::cost::{count_ops, preset_report, savings_report, CostReport, PeripheryCatalog, Preset, Savings};
use crate::crossbar::{crossbar_infer, CrossbarDeployment, DeploymentManifest};
use crate::model::{
    build_reference, forward, Mode, NetworkDescription, NetworkGraph, Polarity, RangeSharing, ReferenceNet,
    ReferenceOptions, HAR_CLASSES,
};
use crate::train::{train, write_metrics_csv, MetricsRow, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_FILE: &str = "train.json";
pub const DEPLOYMENT_FILE: &str = "deployment.json";
pub const COST_JSON: &str = "cost.json";
pub const COST_TEXT: &str = "cost.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Format(e.to_string()))?;
    write(path, text + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

/// How the samples were divided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub scheme: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Provenance record written by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub split: Option<SplitSummary>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            version: VERSION.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            split: None,
            outputs: Vec::new(),
        }
    }

    /// Writes the manifest and the exact configuration next to the outputs,
    /// so the run can be repeated from `config.toml`.
    fn write(mut self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        write(&dir.join(CONFIG_FILE), cfg.to_toml())?;
        self.outputs.push(CONFIG_FILE.into());
        write_json(&dir.join(format!("{}.{MANIFEST_FILE}", self.command)), &self)
    }
}

/// Loads or generates the configured dataset with its splits.
pub fn prepare_dataset(cfg: &ExperimentConfig, full: bool) -> Result<(Dataset, SplitSummary)> {
    let (data, scheme) = match &cfg.data {
        DataConfig::SynthHar { samples, noise } => (
            synth_har(cfg.seed, *samples, HAR_CLASSES, *noise)?,
            "synthetic, random 70/15/15".to_string(),
        ),
        DataConfig::HarCsv { path, options } => {
            let d = load_har_csv(&ExperimentConfig::resolve_data_path(path), options, cfg.seed)?;
            let scheme = match options.subject_column {
                Some(_) => format!(
                    "subject-wise: {:.0}% of subjects for test, {:.0}% of windows for validation",
                    100.0 * options.test_fraction,
                    100.0 * options.val_fraction
                ),
                None => format!(
                    "random windows: {:.0}% test, {:.0}% validation",
                    100.0 * options.test_fraction,
                    100.0 * options.val_fraction
                ),
            };
            (d, scheme)
        }
        DataConfig::Cifar10 { path, options } => {
            let mut o = *options;
            if full {
                (o.train_limit, o.test_limit) = (None, None);
            }
            o.downsample = 32 / cfg.cifar_input;
            let d = load_cifar10(&ExperimentConfig::resolve_data_path(path), &o, cfg.seed)?;
            (d, "CIFAR-10 batches: training files / test file".to_string())
        }
        DataConfig::SynthCifar { samples, noise, options } => {
            let bytes = synth_cifar_records(cfg.seed, *samples, *noise);
            let (labels, pixels) = parse_cifar_records(&bytes, "synthetic")?;
            let side = cfg.cifar_input;
            let mut d = synth_cifar_dataset(labels, pixels, 32 / side)?;
            d.split_random(cfg.seed, options.val_fraction, 0.2)?;
            (d, "synthetic CIFAR-format, random split".to_string())
        }
    };
    let split = SplitSummary {
        scheme,
        train: data.splits.train.len(),
        val: data.splits.val.len(),
        test: data.splits.test.len(),
    };
    Ok((data, split))
}

fn synth_cifar_dataset(labels: Vec<usize>, pixels: Vec<f64>, factor: usize) -> Result<Dataset> {
    let n = labels.len();
    let side = 32 / factor;
    let mut out = vec![0.0; n * side * side * 3];
    let norm = (factor * factor) as f64;
    for s in 0..n {
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    out[((s * side + y / factor) * side + x / factor) * 3 + c] +=
                        pixels[((s * 32 + y) * 32 + x) * 3 + c] / norm;
                }
            }
        }
    }
    let samples = crate::tensor::Tensor::new(vec![n, side, side, 3], out)?;
    Dataset::new(samples, labels, crate::model::CIFAR_CLASSES)
}

/// Builds the configured network with the configured bit widths,
/// activation, polarity and range sharing.
pub fn build_network(cfg: &ExperimentConfig) -> Result<NetworkGraph> {
    let which = match cfg.network.as_str() {
        "har" | "HAR" => ReferenceNet::Har,
        "cifar10" | "cifar" | "CIFAR10" => ReferenceNet::Cifar10,
        path => {
            let p = Path::new(path);
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let desc =
                NetworkDescription::from_toml(&text).map_err(|e| HarnessError::Config(format!("{path}: {e}")))?;
            ReferenceNet::Custom(Box::new(desc))
        }
    };
    let opts = ReferenceOptions {
        weight_bits: cfg.bits.weights,
        activation_bits: cfg.bits.activations,
        bias_bits: cfg.bits.bias,
        activation: cfg.activation,
        polarity: cfg.polarity,
        seed: cfg.seed,
        cifar_input: cfg.cifar_input,
        har_hidden: cfg.har_hidden,
    };
    let mut net = build_reference(&which, &opts).map_err(|e| HarnessError::Config(e.to_string()))?;
    net.set_weight_bits(cfg.bits.weights);
    net.set_activation_bits(cfg.bits.activations);
    net.globals.b_g.bits = cfg.bits.bias;
    if let Some(b) = &mut net.output_ranges.b {
        b.bits = cfg.bits.bias;
    }
    net.set_polarity(cfg.polarity)?;
    if cfg.range_sharing == RangeSharing::PerLayer {
        net.use_per_layer_ranges()?;
    }
    Ok(net)
}

fn train_config(cfg: &ExperimentConfig, full: bool) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = cfg.seed;
    if full {
        t.steps = cfg.full_steps.unwrap_or(t.steps);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub final_task_loss: Option<f64>,
    pub selected_activation: Option<String>,
    pub params: usize,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: NetworkGraph,
    pub data: Dataset,
    pub metrics: Vec<MetricsRow>,
    pub summary: TrainSummary,
    pub split: SplitSummary,
}

/// Trains without writing anything.
pub fn train_experiment(cfg: &ExperimentConfig, full: bool) -> Result<TrainRun> {
    cfg.validate()?;
    let (data, split) = prepare_dataset(cfg, full)?;
    let net = build_network(cfg)?;
    let tc = train_config(cfg, full);
    let outcome = train(&net, &data, &tc)?;
    let selected = outcome.net.layers.iter().find_map(|l| match &l.kind {
        crate::model::LayerKind::Activation { function } => {
            Some(serde_json::to_value(function).ok()?.as_str()?.to_string())
        }
        _ => None,
    });
    let summary = TrainSummary {
        steps: tc.steps,
        val_accuracy: outcome.val_accuracy,
        test_accuracy: outcome.test_accuracy,
        final_task_loss: outcome.metrics.last().map(|m| m.task_loss),
        selected_activation: selected,
        params: outcome.net.param_count(),
    };
    Ok(TrainRun {
        net: outcome.net,
        data,
        metrics: outcome.metrics,
        summary,
        split,
    })
}

/// Trains and writes the model, the metrics log and the manifest to `out`.
pub fn run_train(cfg: &ExperimentConfig, full: bool, out: &Path) -> Result<TrainRun> {
    let run = train_experiment(cfg, full)?;
    write_json(&out.join(MODEL_FILE), &run.net)?;
    let mut csv = Vec::new();
    write_metrics_csv(&run.metrics, &mut csv)?;
    write(&out.join(METRICS_FILE), csv)?;
    write_json(&out.join(TRAIN_FILE), &run.summary)?;
    let mut m = RunManifest::new("train", cfg);
    m.split = Some(run.split.clone());
    m.outputs = vec![MODEL_FILE.into(), METRICS_FILE.into(), TRAIN_FILE.into()];
    m.write(out, cfg)?;
    Ok(run)
}

pub fn load_model(path: &Path) -> Result<NetworkGraph> {
    let net: NetworkGraph = read_json(path)?;
    net.validate().map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
    Ok(net)
}

/// Outcome of comparing ideal crossbar inference with the digital
/// quantized forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessCheck {
    pub samples: usize,
    pub values: usize,
    pub mismatches: usize,
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Compares the ideal-device deployment with the digital reference on
/// `x`, value by value, bit for bit.
pub fn check_exactness(net: &NetworkGraph, dep: &CrossbarDeployment, x: &crate::tensor::Tensor) -> Result<ExactnessCheck> {
    let mut ideal = dep.config;
    ideal.device.noise_sigma = 0.0;
    let ideal = CrossbarDeployment::build(net, &ideal)?;
    let digital = forward(net, x, Mode::Quantized)?;
    let analog = crossbar_infer(&ideal, x)?;
    let mut mismatches = 0;
    let mut max_abs_diff = 0.0f64;
    for (a, b) in digital.data().iter().zip(analog.data()) {
        if a.to_bits() != b.to_bits() {
            mismatches += 1;
            max_abs_diff = max_abs_diff.max((a - b).abs());
        }
    }
    Ok(ExactnessCheck {
        samples: x.shape()[0],
        values: digital.numel(),
        mismatches,
        max_abs_diff,
        pass: mismatches == 0 && ideal.is_lossless(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub manifest: DeploymentManifest,
    pub exactness: ExactnessCheck,
}

/// Maps `net`, verifies the ideal-device exactness invariant on held-out
/// samples, and writes the deployment manifest. A failed check is an
/// invariant violation and nothing is written.
pub fn run_map(cfg: &ExperimentConfig, net: &NetworkGraph, data: &Dataset, out: &Path) -> Result<(CrossbarDeployment, MapSummary)> {
    let dep = CrossbarDeployment::build(net, &cfg.deployment)?;
    let pool = [&data.splits.test, &data.splits.val, &data.splits.train]
        .into_iter()
        .find(|s| !s.is_empty())
        .ok_or_else(|| HarnessError::Config("dataset has no samples to check".into()))?;
    let idx: Vec<usize> = pool.iter().copied().take(cfg.check_samples).collect();
    let (x, _) = data.batch(&idx)?;
    let exactness = check_exactness(net, &dep, &x)?;
    if !exactness.pass {
        return Err(HarnessError::Invariant(format!(
            "crossbar output diverges from the digital reference: {} of {} values differ (max |Δ| = {:e}){}",
            exactness.mismatches,
            exactness.values,
            exactness.max_abs_diff,
            if dep.is_lossless() { "" } else { "; the conductance grid is coarser than the weight grid" }
        )));
    }
    let summary = MapSummary {
        manifest: dep.manifest(),
        exactness,
    };
    write_json(&out.join(DEPLOYMENT_FILE), &summary)?;
    let mut m = RunManifest::new("map", cfg);
    m.outputs = vec![DEPLOYMENT_FILE.into()];
    m.write(out, cfg)?;
    Ok((dep, summary))
}

pub fn load_catalog(cfg: &ExperimentConfig) -> Result<PeripheryCatalog> {
    let Some(path) = &cfg.catalog else {
        return Ok(PeripheryCatalog::default());
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cat: PeripheryCatalog =
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    cat.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(cat)
}

/// Estimates the cost of a deployment and writes JSON and text reports.
pub fn run_estimate(
    cfg: &ExperimentConfig,
    net: &NetworkGraph,
    dep: &CrossbarDeployment,
    out: &Path,
) -> Result<CostReport> {
    let catalog = load_catalog(cfg)?;
    let mut c = crate::cost::ComponentCounts::of_deployment(dep);
    // converters are sized by the configured resolutions
    c.dac_bits = cfg.bits.dac;
    c.adc_bits = cfg.bits.adc;
    let mut report = CostReport::of_deployment(format!("{} deployment", cfg.network), net, dep, &catalog)?;
    let overheads = crate::cost::AdcOverheads {
        subtractor: dep.subtractors() > 0,
        current_scaling: !dep.reconfigurable,
    };
    report = CostReport::new(report.label, report.counts, c, overheads, dep.reconfigurable, &catalog)?;
    write_cost(&report, out)?;
    let mut m = RunManifest::new("estimate", cfg);
    m.outputs = vec![COST_JSON.into(), COST_TEXT.into()];
    m.write(out, cfg)?;
    Ok(report)
}

/// Cost report of a reference scenario, written to `out`.
pub fn run_estimate_preset(preset: Preset, catalog: &PeripheryCatalog, out: Option<&Path>) -> Result<CostReport> {
    let report = preset_report(preset, catalog)?;
    if let Some(out) = out {
        write_cost(&report, out)?;
    }
    Ok(report)
}

fn write_cost(report: &CostReport, out: &Path) -> Result<()> {
    write(&out.join(COST_JSON), report.to_json() + "\n")?;
    write(&out.join(COST_TEXT), report.to_text())
}

/// One point of the unipolar-fraction study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub accuracy: f64,
    /// Area of the conductance cells that hold weights.
    pub crossbar_area_mm2: f64,
    pub nvm_reads: u64,
    /// Crossbar read energy relative to the all-bipolar network.
    pub read_energy_ratio: f64,
}

/// Trains one network per unipolar fraction, concurrently, each in its
/// own output directory, and writes the study as CSV.
pub fn run_sweep(cfg: &ExperimentConfig, fractions: &[f64], full: bool, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(HarnessError::Config(format!("sweep fraction {f} outside [0, 1]")));
    }
    let catalog = load_catalog(cfg)?;
    let bipolar_reads = count_ops(&build_network(cfg)?, Polarity::Bipolar)?.nvm_reads() as f64;
    let results: Vec<Result<SweepRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = fractions
            .iter()
            .map(|&p| {
                let catalog = &catalog;
                s.spawn(move || {
                    let mut run_cfg = cfg.clone();
                    run_cfg.polarity = Polarity::Fractional(p);
                    let dir = out.join(format!("fraction_{p:.3}"));
                    let run = run_train(&run_cfg, full, &dir)?;
                    let dep = CrossbarDeployment::build(&run.net, &run_cfg.deployment)?;
                    let reads = count_ops(&run.net, Polarity::Fractional(p))?.nvm_reads();
                    Ok(SweepRow {
                        fraction: p,
                        accuracy: run.summary.test_accuracy.or(run.summary.val_accuracy).unwrap_or(f64::NAN),
                        crossbar_area_mm2: dep.used_cells() as f64 * catalog.nvm_cell_area_um2 / 1e6,
                        nvm_reads: reads,
                        read_energy_ratio: reads as f64 / bipolar_reads,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Invariant("sweep worker panicked".into()))))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| HarnessError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Format(e.to_string()))?;
    write(&out.join(SWEEP_FILE), bytes)?;
    let mut m = RunManifest::new("sweep", cfg);
    m.outputs = vec![SWEEP_FILE.into()];
    m.write(out, cfg)?;
    Ok(rows)
}

/// Everything known about one output directory plus the reference
/// scenarios and their savings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub training: Option<TrainSummary>,
    pub deployment: Option<MapSummary>,
    pub cost: Option<CostReport>,
    pub sweep: Option<Vec<SweepRow>>,
    pub presets: Vec<CostReport>,
    pub savings: Vec<Savings>,
}

fn optional<T: for<'de> Deserialize<'de>>(path: PathBuf) -> Result<Option<T>> {
    if path.exists() {
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

/// Aggregates the artifacts found in `dir` into one JSON and one text
/// summary.
pub fn run_report(dir: &Path, catalog: &PeripheryCatalog) -> Result<Report> {
    let sweep_path = dir.join(SWEEP_FILE);
    let sweep = if sweep_path.exists() {
        let mut r = csv::Reader::from_path(&sweep_path).map_err(|e| HarnessError::Format(e.to_string()))?;
        Some(
            r.deserialize()
                .collect::<std::result::Result<Vec<SweepRow>, _>>()
                .map_err(|e| HarnessError::Format(format!("{}: {e}", sweep_path.display())))?,
        )
    } else {
        None
    };
    let presets = Preset::ALL
        .iter()
        .map(|&p| preset_report(p, catalog))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let find = |p: Preset| presets.iter().find(|r| r.label == p.name()).expect("all presets present");
    let savings = vec![
        savings_report(find(Preset::CifarTf4), find(Preset::CifarOurs4))?,
        savings_report(find(Preset::CifarTf8), find(Preset::CifarOurs4))?,
        savings_report(find(Preset::HarTf4), find(Preset::HarOurs4))?,
        savings_report(find(Preset::HarTf8), find(Preset::HarOurs4))?,
    ];
    let report = Report {
        version: VERSION.into(),
        training: optional(dir.join(TRAIN_FILE))?,
        deployment: optional(dir.join(DEPLOYMENT_FILE))?,
        cost: optional(dir.join(COST_JSON))?,
        sweep,
        presets,
        savings,
    };
    write_json(&dir.join(REPORT_JSON), &report)?;
    write(&dir.join(REPORT_TEXT), report_text(&report))?;
    Ok(report)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}%", 100.0 * v))
}

pub fn report_text(r: &Report) -> String {
    use std::fmt::Write as _;
    let mut s = format!("cimtrain {} report\n\n", r.version);
    if let Some(t) = &r.training {
        let _ = writeln!(s, "training: {} steps, {} parameters", t.steps, t.params);
        let _ = writeln!(s, "  validation accuracy {}", pct(t.val_accuracy));
        let _ = writeln!(s, "  test accuracy       {}", pct(t.test_accuracy));
        if let Some(a) = &t.selected_activation {
            let _ = writeln!(s, "  selected activation {a}");
        }
        s.push('\n');
    }
    if let Some(d) = &r.deployment {
        let m = &d.manifest;
        let _ = writeln!(
            s,
            "deployment: {} tiles of {}x{}, {} subtractors, reconfigurable: {}",
            m.tiles,
            m.tile_rows,
            m.tile_cols,
            m.subtractors,
            if m.reconfigurable { "yes" } else { "no" }
        );
        let _ = writeln!(
            s,
            "  exactness check: {} ({} values, {} mismatches)\n",
            if d.exactness.pass { "PASS" } else { "FAIL" },
            d.exactness.values,
            d.exactness.mismatches
        );
    }
    if let Some(c) = &r.cost {
        s += &c.to_text();
        s.push('\n');
    }
    if let Some(rows) = &r.sweep {
        let _ = writeln!(s, "unipolar fraction sweep");
        let _ = writeln!(s, "  {:>8} {:>10} {:>14} {:>12}", "fraction", "accuracy", "xbar mm2", "read ratio");
        for row in rows {
            let _ = writeln!(
                s,
                "  {:>8.3} {:>10} {:>14.6} {:>12.4}",
                row.fraction,
                pct(Some(row.accuracy)),
                row.crossbar_area_mm2,
                row.read_energy_ratio
            );
        }
        s.push('\n');
    }
    for p in &r.presets {
        s += &p.to_text();
        s.push('\n');
    }
    for sv in &r.savings {
        let _ = writeln!(
            s,
            "{} vs {}: area saving {:.1}%",
            sv.proposed,
            sv.baseline,
            100.0 * sv.area_saving
        );
        for e in &sv.energy {
            let _ = writeln!(s, "  energy saving at {}: {:.1}%", e.frequency, 100.0 * e.total_saving);
        }
    }
    s
}
