//! `fdflow`: train, evaluate, and run the FDFlowNet optical-flow engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/numerical error,
//! 3 selftest failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fdflow::bench::{bench, BenchConfig};
use fdflow::error::Error;
use fdflow::estimator::{
    aggregation_param_count, estimator_input_channels, estimator_param_count,
};
use fdflow::features::{decoder_param_count, encoder_param_count};
use fdflow::flo::{read_flo_file, write_flo_file};
use fdflow::metrics::{epe, fl_all};
use fdflow::pipeline::{FlowNet, ModelConfig};
use fdflow::synth::{generate_set, parse_dataset_uri};
use fdflow::train::{train, TrainConfig};
use fdflow::viz::{read_ppm_file, write_flow_ppm};
use fdflow::Result;

#[derive(Parser)]
#[command(
    name = "fdflow",
    version,
    about = "FDFlowNet optical flow: coarse-to-fine estimation on a CPU tensor core"
)]
struct Cli {
    /// Worker threads for tensor ops (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data; configuration via key=value pairs.
    Train {
        /// Overrides like steps=2000 lr=1:1e-4,1401:5e-5 dataset=synthetic:0:500.
        #[arg(value_name = "KEY=VALUE")]
        options: Vec<String>,
        /// File of key=value lines applied before the positional overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shorthand for the seed=N option (applied last).
        #[arg(long)]
        seed: Option<u64>,
        /// Shorthand for the steps=N option (applied last).
        #[arg(long)]
        steps: Option<usize>,
        /// Shorthand for the variant=NAME option (applied last).
        #[arg(long)]
        variant: Option<String>,
        /// Directory receiving train.log and model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute EPE and Fl-all over a synthetic dataset.
    Eval {
        /// Checkpoint to evaluate (or use --variant for untrained weights).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluate a freshly initialized variant instead of a checkpoint.
        #[arg(long)]
        variant: Option<String>,
        /// synthetic:SEED:COUNT[:SIZE[:MOTION]]
        #[arg(long)]
        dataset: String,
    },
    /// Estimate flow between two PPM frames and write a .flo file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame1: PathBuf,
        #[arg(long)]
        frame2: PathBuf,
        /// Output .flo path.
        #[arg(long)]
        out: PathBuf,
        /// Also render the flow to this PPM.
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Time the forward pass.
    Bench {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        /// HxW, e.g. 436x1024.
        #[arg(long, default_value = "436x1024")]
        size: String,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Print per-module and total parameter counts.
    Params {
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Render a .flo file with the standard color wheel.
    Viz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Normalization magnitude (default: 99th percentile).
        #[arg(long)]
        max: Option<f64>,
    },
    /// Run the built-in oracle and invariant suite.
    Selftest,
}

/// Writes to stdout and optionally to a file at the same time, so training
/// logs land in both places.
struct Tee {
    file: Option<fs::File>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn load_model(ckpt: Option<&Path>, variant: Option<&str>) -> Result<FlowNet> {
    match (ckpt, variant) {
        (Some(path), None) => FlowNet::load_file(path),
        (None, Some(v)) => FlowNet::new(ModelConfig::variant(v)?),
        (Some(_), Some(_)) => {
            Err(Error::Config("pass either --ckpt or --variant, not both".into()))
        }
        (None, None) => Err(Error::Config("pass --ckpt or --variant".into())),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("bad --size {s:?}, expected HxW")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad --size {s:?}, expected HxW")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn cmd_train(
    options: Vec<String>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<usize>,
    variant: Option<String>,
    out: Option<PathBuf>,
) -> Result<i32> {
    // Precedence: config file, then positional key=value pairs, then flags.
    let mut merged = Vec::new();
    if let Some(path) = &config {
        for line in fs::read_to_string(path)?.lines() {
            let line = line.trim();
            if !line.is_empty() && !line.starts_with('#') {
                merged.push(line.to_string());
            }
        }
    }
    merged.extend(options);
    if let Some(s) = seed {
        merged.push(format!("seed={s}"));
    }
    if let Some(s) = steps {
        merged.push(format!("steps={s}"));
    }
    if let Some(v) = variant {
        merged.push(format!("variant={v}"));
    }
    let cfg = TrainConfig::parse(&merged)?;
    let file = match &out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("train.log"))?)
        }
        None => None,
    };
    let mut log = Tee { file };
    let (net, report) = train(&cfg, &mut log)?;
    // The path goes to stdout only: train.log stays reproducible byte for
    // byte across output directories.
    if let Some(dir) = &out {
        let path = dir.join("model.ckpt");
        net.save_file(&path)?;
        drop(log);
        println!("checkpoint path={}", path.display());
    }
    let _ = report;
    Ok(0)
}

fn cmd_eval(ckpt: Option<PathBuf>, variant: Option<String>, dataset: String) -> Result<i32> {
    let net = load_model(ckpt.as_deref(), variant.as_deref())?;
    let (cfg, seed, count) = parse_dataset_uri(&dataset)?;
    if count == 0 {
        return Err(Error::Config("dataset count must be positive".into()));
    }
    let samples = generate_set(&cfg, seed, count);
    let mut epe_sum = 0.0;
    let mut fl_sum = 0.0;
    for s in &samples {
        let pred = net.infer(&s.img1, &s.img2)?;
        epe_sum += epe(&pred, &s.flow, None)?;
        fl_sum += fl_all(&pred, &s.flow, None)?;
    }
    let n = samples.len() as f64;
    println!(
        "eval dataset={dataset} count={count} epe={:.4} fl_all={:.4}",
        epe_sum / n,
        fl_sum / n
    );
    Ok(0)
}

fn cmd_infer(
    ckpt: PathBuf,
    frame1: PathBuf,
    frame2: PathBuf,
    out: PathBuf,
    viz: Option<PathBuf>,
) -> Result<i32> {
    let net = FlowNet::load_file(&ckpt)?;
    let img1 = read_ppm_file(&frame1)?;
    let img2 = read_ppm_file(&frame2)?;
    if img1.shape() != img2.shape() {
        return Err(Error::shape(
            "infer",
            format!("frame sizes differ: {:?} vs {:?}", img1.shape(), img2.shape()),
        ));
    }
    let flow = net.infer(&img1, &img2)?;
    write_flo_file(&out, &flow)?;
    let (_, _, h, w) = flow.dims4()?;
    let mean_mag = {
        let (u, v) = (flow.plane(0, 0), flow.plane(0, 1));
        let sum: f64 = (0..h * w)
            .map(|i| ((u[i] as f64).powi(2) + (v[i] as f64).powi(2)).sqrt())
            .sum();
        sum / (h * w) as f64
    };
    print!("infer size={w}x{h} out={} mean_flow={mean_mag:.4}", out.display());
    if let Some(viz_path) = viz {
        let used = write_flow_ppm(&viz_path, &flow, None)?;
        print!(" viz={} viz_max={used:.4}", viz_path.display());
    }
    println!();
    Ok(0)
}

fn cmd_bench(
    ckpt: Option<PathBuf>,
    variant: String,
    size: String,
    iters: usize,
) -> Result<i32> {
    let net = load_model(ckpt.as_deref(), if ckpt.is_some() { None } else { Some(&variant) })?;
    let (height, width) = parse_size(&size)?;
    let report = bench(&net, &BenchConfig { height, width, iters, warmup: 1 })?;
    println!(
        "bench size={}x{} iters={} mean_ms={:.2} min_ms={:.2} max_ms={:.2} params={} threads={}",
        report.height,
        report.width,
        report.iters,
        report.mean_ms,
        report.min_ms,
        report.max_ms,
        report.params,
        fdflow::parallel::current_threads(),
    );
    Ok(0)
}

fn cmd_params(variant: String) -> Result<i32> {
    let config = ModelConfig::variant(&variant)?;
    let encoder = encoder_param_count();
    let decoder = if config.ushape { decoder_param_count() } else { 0 };
    let mut aggregation = 0;
    let mut estimators = 0;
    for level in ModelConfig::levels() {
        aggregation += aggregation_param_count();
        estimators +=
            estimator_param_count(config.topology, estimator_input_channels(level));
    }
    let total = encoder + decoder + aggregation + estimators;
    debug_assert_eq!(total, fdflow::pipeline::count_params(&config));
    println!(
        "params variant={variant} encoder={encoder} decoder={decoder} \
         aggregation={aggregation} estimators={estimators} total={total} total_m={:.2}",
        total as f64 / 1e6
    );
    Ok(0)
}

fn cmd_viz(flow: PathBuf, out: PathBuf, max: Option<f64>) -> Result<i32> {
    let field = read_flo_file(&flow)?;
    let (_, _, h, w) = field.dims4()?;
    let used = write_flow_ppm(&out, &field, max)?;
    println!("viz flow={} out={} size={w}x{h} max={used:.4}", flow.display(), out.display());
    Ok(0)
}

fn cmd_selftest() -> Result<i32> {
    let mut stdout = std::io::stdout();
    let ok = fdflow::selftest::run(&mut stdout)?;
    Ok(if ok { 0 } else { 3 })
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train { options, config, seed, steps, variant, out } => {
            cmd_train(options, config, seed, steps, variant, out)
        }
        Command::Eval { ckpt, variant, dataset } => cmd_eval(ckpt, variant, dataset),
        Command::Infer { ckpt, frame1, frame2, out, viz } => {
            cmd_infer(ckpt, frame1, frame2, out, viz)
        }
        Command::Bench { ckpt, variant, size, iters } => cmd_bench(ckpt, variant, size, iters),
        Command::Params { variant } => cmd_params(variant),
        Command::Viz { flow, out, max } => cmd_viz(flow, out, max),
        Command::Selftest => cmd_selftest(),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if cli.threads > 0 {
        fdflow::parallel::configure_threads(cli.threads);
    }
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    std::process::exit(code);
}
