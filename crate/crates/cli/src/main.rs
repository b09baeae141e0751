mod config;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use toml::Table;

use adcless::checkpoint::Checkpoint;
use adcless::crossbar::{read_programs, write_programs, AdcModel, Mapping};
use adcless::dataset::{generate, GenConfig, SpikeDataset};
use adcless::hwcost::{self, Readout, TechParams, COMPARE_HEADER, LAYER_HEADER};
use adcless::netspec::NetworkSpec;
use adcless::quant::{quantize_leak, LeakCode};
use adcless::spiking::{parse_drives, trace, IntLifParams, ResetMode};
use adcless::train::model::{ExecPlan, Net};
use adcless::train::pipeline::{evaluate, run_stage, write_epochs, TrainConfig};
use adcless::train::Stage;

use config::{defaults, layered, read_table, read_text, Overrides};

#[derive(Parser)]
#[command(name = "adcless", version, about = "Train and evaluate spiking networks on ADC-less crossbars")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic event dataset (train/val/test files).
    GenData(GenArgs),
    /// Train one stage of the fp -> qat -> adcless pipeline.
    Train(TrainArgs),
    /// Score a checkpoint under one or more readouts and array sizes.
    Eval(EvalArgs),
    /// Replay a drive sequence through one integer LIF neuron.
    TraceLif(TraceArgs),
    /// Energy, latency and area estimates.
    Estimate(EstimateArgs),
    /// Dump the cell programs of a checkpoint.
    Export(ExportArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// TOML with any of the generator fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    time_steps: Option<usize>,
    /// Channels, height and width, e.g. `2,16,16`.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    stage: Option<Stage>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    xbar: Option<usize>,
    #[arg(long)]
    mapping: Option<Mapping>,
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Network the checkpoint must match.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Readouts: sa1, hp<bits> or ideal.
    #[arg(long, value_delimiter = ',', default_value = "sa1")]
    adc: Vec<AdcModel>,
    #[arg(long, value_delimiter = ',')]
    xbar: Option<Vec<usize>>,
    #[arg(long)]
    mapping: Option<Mapping>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    limit: Option<usize>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reset {
    Soft,
    Hard,
}

#[derive(clap::Args)]
struct TraceArgs {
    /// Integer threshold.
    #[arg(long, default_value_t = 45)]
    v_th: i32,
    /// Real leak factor, rounded to a power of two.
    #[arg(long, conflicts_with = "leak_shift")]
    leak: Option<f64>,
    #[arg(long)]
    leak_shift: Option<u8>,
    #[arg(long, value_enum, default_value = "soft")]
    reset: Reset,
    /// Integers separated by commas, spaces or newlines; `-` reads stdin.
    #[arg(long)]
    drive: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EstimateArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Trained model whose activity drives the estimate.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use this input spike rate on every layer instead of measured activity.
    #[arg(long, conflicts_with = "checkpoint")]
    rate: Option<f64>,
    #[arg(long)]
    tech: Option<PathBuf>,
    #[arg(long)]
    compare: bool,
    #[arg(long, value_enum, default_value = "adc-less")]
    readout: ReadoutArg,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    xbar: Vec<usize>,
    #[arg(long)]
    mapping: Option<Mapping>,
    #[arg(long)]
    tile_budget: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-layer breakdown CSV.
    #[arg(long)]
    layers: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReadoutArg {
    HpAdc,
    AdcLess,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Column mapping; defaults to the one the checkpoint was tuned for.
    #[arg(long)]
    scheme: Option<Mapping>,
    #[arg(long)]
    xbar: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Bad command-line usage detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<adcless::Error>() {
            use adcless::Error::*;
            return match err {
                Validation(_) | Invalid(_) | Shape { .. } | Range { .. } | NonBinary { .. } | Format { .. } => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::TraceLif(a) => trace_lif(a),
        Cmd::Estimate(a) => estimate(a),
        Cmd::Export(a) => export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
}

fn output(p: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match p {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_spec(p: &Path) -> Result<NetworkSpec> {
    let text = read_text(p)?;
    Ok(NetworkSpec::from_toml(&text).with_context(|| format!("network spec {}", p.display()))?)
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(Checkpoint::read(BufReader::new(f)).with_context(|| format!("checkpoint {}", p.display()))?)
}

fn load_split(dir: &Path, split: Split) -> Result<SpikeDataset> {
    let name = match split {
        Split::Train => "train.spk",
        Split::Val => "val.spk",
        Split::Test => "test.spk",
    };
    let p = dir.join(name);
    let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
    Ok(SpikeDataset::read(BufReader::new(f)).with_context(|| format!("dataset {}", p.display()))?)
}

fn check_data(spec: &NetworkSpec, d: &SpikeDataset) -> Result<()> {
    let got = [d.channels, d.height, d.width];
    if got != spec.input || d.time_steps != spec.time_steps || d.classes != spec.classes {
        return Err(adcless::Error::Validation(format!(
            "dataset has shape {got:?}, {} steps, {} classes but network `{}` expects {:?}, {} steps, {} classes",
            d.time_steps, d.classes, spec.name, spec.input, spec.time_steps, spec.classes
        ))
        .into());
    }
    Ok(())
}

fn gen_data(a: GenArgs) -> Result<()> {
    let base = defaults(GenConfig::default())?;
    let file = read_table(a.config.as_deref())?;
    let mut cli = Overrides::default();
    cli.set("classes", a.classes.map(|v| v as i64))
        .set("samples", a.samples.map(|v| v as i64))
        .set("time_steps", a.time_steps.map(|v| v as i64))
        .set("seed", a.seed.map(|v| v as i64))
        .set("noise", a.noise);
    if let Some(s) = &a.shape {
        if s.len() != 3 {
            return Err(Usage(format!("--shape takes channels,height,width; got {} values", s.len())).into());
        }
        cli.set("channels", Some(s[0] as i64)).set("height", Some(s[1] as i64)).set("width", Some(s[2] as i64));
    }
    let cfg: GenConfig = layered("gen-data", base, &file, &cli)?;
    let splits = generate(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, d) in [("train.spk", &splits.train), ("val.spk", &splits.val), ("test.spk", &splits.test)] {
        let p = a.out.join(name);
        let mut w = create(&p)?;
        d.write(&mut w)?;
        w.flush()?;
        eprintln!("wrote {} ({} samples)", p.display(), d.len());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let spec = load_spec(&a.spec)?;
    let file = read_table(a.config.as_deref())?;
    let mut cli = Overrides::default();
    cli.set("stage", a.stage.map(|s| s.to_string()))
        .set("epochs", a.epochs.map(|v| v as i64))
        .set("lr", a.lr)
        .set("seed", a.seed.map(|v| v as i64))
        .set("xbar", a.xbar.map(|v| v as i64))
        .set("mapping", a.mapping.map(|m| m.to_string()))
        .set("train_limit", a.train_limit.map(|v| v as i64));
    if !file.contains_key("stage") && a.stage.is_none() {
        return Err(Usage("--stage is required when the config file does not set it".into()).into());
    }
    let cfg: TrainConfig = layered("train", Table::new(), &file, &cli)?;
    cfg.validate()?;
    let upstream = a.init.as_deref().map(load_checkpoint).transpose()?;
    if let Some(up) = &upstream {
        up.check_spec(&spec)?;
    }
    let net = Net::new(cfg.apply(&spec))?;
    let (train, val, test) = (load_split(&a.data, Split::Train)?, load_split(&a.data, Split::Val)?, load_split(&a.data, Split::Test)?);
    check_data(&net.spec, &train)?;
    let run = run_stage(&net, &cfg, upstream.as_ref(), &train.samples, &val.samples, &test.samples, |r| {
        eprintln!("{} epoch {}: loss {:.4} train {:.2}% val {:.2}% spikes {:.2}%", cfg.stage, r.epoch, r.loss, r.train_acc, r.val_acc, r.avg_spikes)
    })?;
    let mut w = create(&a.out)?;
    run.checkpoint.write(&mut w)?;
    w.flush()?;
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("csv"));
    let mut m = create(&metrics)?;
    write_epochs(&mut m, &run.epochs)?;
    m.flush()?;
    eprintln!(
        "{}: test accuracy {:.2}%, avg spikes {:.2}%; wrote {} and {}",
        cfg.stage,
        run.report.test_acc,
        run.report.avg_spikes,
        a.out.display(),
        metrics.display()
    );
    Ok(())
}

const EVAL_HEADER: &str = "stage,adc,xbar,mapping,accuracy,avg_spikes,loss";

fn take(d: SpikeDataset, limit: Option<usize>) -> Vec<adcless::dataset::Sample> {
    let mut s = d.samples;
    if let Some(n) = limit {
        s.truncate(n);
    }
    s
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.spec {
        ck.check_spec(&load_spec(p)?)?;
    }
    let net = Net::new(ck.spec.clone())?;
    let data = load_split(&a.data, a.split)?;
    check_data(&net.spec, &data)?;
    let samples = take(data, a.limit);
    let mapping = a.mapping.unwrap_or(ck.mapping);
    let xbars = a.xbar.clone().unwrap_or_else(|| vec![ck.xbar]);
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{EVAL_HEADER}")?;
    for &adc in &a.adc {
        for &xbar in &xbars {
            let plan = ExecPlan::for_eval(&net, adc, xbar, mapping);
            let e = evaluate(&net, &ck.params, &plan, &samples)?;
            writeln!(w, "{},{adc},{xbar},{mapping},{:.4},{:.4},{:.6}", ck.stage, e.accuracy, e.avg_spikes(), e.loss)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn trace_lif(a: TraceArgs) -> Result<()> {
    let text = if a.drive.as_os_str() == "-" {
        io::read_to_string(io::stdin())?
    } else {
        fs::read_to_string(&a.drive).with_context(|| format!("reading {}", a.drive.display()))?
    };
    let drives = parse_drives(&text)?;
    let leak = match (a.leak, a.leak_shift) {
        (Some(l), _) => quantize_leak(l)?,
        (None, Some(s)) => LeakCode::new(s)?,
        (None, None) => LeakCode::new(0)?,
    };
    let reset = match a.reset {
        Reset::Soft => ResetMode::Soft,
        Reset::Hard => ResetMode::Hard,
    };
    let tr = trace(&IntLifParams { v_th: a.v_th, leak, reset }, &drives)?;
    let mut w = output(a.out.as_deref())?;
    tr.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let spec = match (&a.spec, &ck) {
        (Some(p), Some(c)) => {
            let s = load_spec(p)?;
            c.check_spec(&s)?;
            s
        }
        (Some(p), None) => load_spec(p)?,
        (None, Some(c)) => c.spec.clone(),
        (None, None) => return Err(Usage("estimate needs --spec or --checkpoint".into()).into()),
    };
    let base = defaults(TechParams::default())?;
    let file = read_table(a.tech.as_deref())?;
    let mut cli = Overrides::default();
    cli.set("tile_budget", a.tile_budget.map(|v| v as i64));
    let tech: TechParams = layered("tech", base, &file, &cli)?;
    tech.validate()?;
    let mapping = a.mapping.or(ck.as_ref().map(|c| c.mapping)).unwrap_or(spec.crossbar.mapping);
    let n_layers = spec.crossbar_layers()?.len();

    let eval_data = match (&ck, &a.data) {
        (Some(_), Some(d)) => {
            let data = load_split(d, a.split)?;
            check_data(&spec, &data)?;
            Some(take(data, a.limit))
        }
        _ => None,
    };
    let activity = |adc: AdcModel, xbar: usize| -> Result<Vec<f64>> {
        match (&ck, &eval_data, a.rate) {
            (Some(c), Some(samples), _) => {
                let net = Net::new(c.spec.clone())?;
                let e = evaluate(&net, &c.params, &ExecPlan::for_eval(&net, adc, xbar, mapping), samples)?;
                eprintln!("activity {adc} xbar={xbar}: input rates {:?}", e.activity.input_rates());
                Ok(e.activity.input_rates())
            }
            (_, _, Some(r)) => Ok(vec![r; n_layers]),
            _ => Err(adcless::Error::Validation(
                "missing activity: pass --checkpoint with --data to measure it, or --rate to assume one".into(),
            )
            .into()),
        }
    };

    let mut w = output(a.out.as_deref())?;
    let mut layers = a.layers.as_deref().map(create).transpose()?;
    if let Some(l) = layers.as_mut() {
        writeln!(l, "{LAYER_HEADER}")?;
    }
    if a.compare {
        writeln!(w, "{COMPARE_HEADER}")?;
    } else {
        writeln!(w, "readout,xbar,tiles,arrays,energy_j,latency_s,area_m2")?;
    }
    for &xbar in &a.xbar {
        if a.compare {
            let hp = activity(spec.hp_adc(), xbar)?;
            let al = activity(AdcModel::OneBitSa, xbar)?;
            let c = hwcost::compare(&spec, &tech, xbar, mapping, &hp, &al)?;
            writeln!(w, "{}", c.csv())?;
            if let Some(l) = layers.as_mut() {
                c.hp.write_layers(&mut *l)?;
                c.adcless.write_layers(&mut *l)?;
            }
        } else {
            let (readout, adc) = match a.readout {
                ReadoutArg::HpAdc => (Readout::HpAdc, spec.hp_adc()),
                ReadoutArg::AdcLess => (Readout::AdcLess, AdcModel::OneBitSa),
            };
            let rates = activity(adc, xbar)?;
            let plan = hwcost::floorplan(&spec, xbar, mapping, &tech)?;
            let r = hwcost::estimate(&spec, &plan, &tech, readout, &rates)?;
            writeln!(w, "{readout},{xbar},{},{},{:.6e},{:.6e},{:.6e}", r.tiles, r.arrays, r.energy_j, r.latency_s, r.area_m2)?;
            if let Some(l) = layers.as_mut() {
                r.write_layers(&mut *l)?;
            }
        }
    }
    w.flush()?;
    if let Some(mut l) = layers {
        l.flush()?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mapping = a.scheme.unwrap_or(ck.mapping);
    let xbar = a.xbar.unwrap_or(ck.xbar);
    let programs = ck.programs(xbar, mapping)?;
    let mut w = create(&a.out)?;
    write_programs(&mut w, &programs)?;
    w.flush()?;
    drop(w);
    let back = read_programs(BufReader::new(File::open(&a.out)?))?;
    if back != programs {
        bail!("program dump {} does not read back identically", a.out.display());
    }
    let arrays: usize = programs.iter().map(|p| p.program.arrays.len()).sum();
    eprintln!("wrote {} layers, {arrays} arrays ({mapping}, xbar={xbar}) to {}", programs.len(), a.out.display());
    Ok(())
}
