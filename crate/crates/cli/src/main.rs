use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use s2c_core::harness::{
    emit_results, evaluate_session, method_config, read_csv_results, read_json_results, run_experiment,
    run_method_from, ResultFormat,
};
use s2c_core::protocol::{cumulative_label_set, write_csv};
use s2c_core::trainer::{stage1_pre_construct, stage2_meta_train, stage3_incremental};
use s2c_core::{Error, ExperimentConfig, Method, ModelState, SessionReport};

#[derive(Parser)]
#[command(
    name = "s2c",
    version,
    about = "Few-shot class-incremental learning with sample and class graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the session stream and describe it.
    Stream {
        #[command(flatten)]
        common: Common,
        /// Directory for per-session train/test CSV files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run stages 1 to 3 for one seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "s2c")]
        method: Method,
        /// Directory for the transcript, graph snapshots and report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the final model state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the saved final graph on each cumulative test set it covers.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every method over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long, default_value = "table")]
        format: ResultFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render result files, or run the configured methods when none are given.
    Report {
        #[command(flatten)]
        common: Common,
        /// CSV or JSON-lines result files.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        method: Vec<Method>,
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long, default_value = "table")]
        format: ResultFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(BufWriter::new(
        File::create(path)
            .map_err(Error::from)
            .with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_reports(reports: &[SessionReport], format: ResultFormat, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            emit_results(reports, format, &mut w)?;
            w.flush().map_err(Error::from)?;
        }
        None => emit_results(reports, format, io::stdout().lock())?,
    }
    Ok(())
}

fn stream(common: &Common, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let stream = cfg.stream(cfg.experiment.seed)?;
    stream.write_description(io::stdout().lock())?;
    if let Some(dir) = out {
        for t in 0..stream.len() {
            write_csv(&stream.sessions[t], create(&dir.join(format!("session{t}_train.csv")))?)?;
            write_csv(&stream.test_sets[t], create(&dir.join(format!("session{t}_test.csv")))?)?;
        }
    }
    Ok(())
}

fn train(common: &Common, method: Method, out: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = cfg.experiment.seed;
    let stream = cfg.stream(seed)?;
    let train = cfg.seeded(seed).1;
    let (pre, pretrain) = stage1_pre_construct(&stream, &train)?;
    eprintln!("pretrained: train accuracy {:.4}", pretrain.train_accuracy);
    let out = out.map(Path::to_path_buf).or_else(|| cfg.experiment.out.clone());

    let (accuracies, state) = match method {
        Method::BaselineFinetune | Method::BaselineDecoupledCosine => {
            let run = run_method_from(method, &pre, &stream, &train)?;
            (run.accuracies, run.state)
        }
        _ => {
            let mcfg = method_config(method, &train);
            let (meta, transcript) = stage2_meta_train(&pre, &stream, &mcfg)?;
            if let Some((first, last)) = transcript.decile_means() {
                eprintln!("meta-train loss: first decile {first:.4}, last decile {last:.4}");
            }
            let (state, snapshots) = stage3_incremental(&meta, &stream, &mcfg)?;
            if let Some(dir) = &out {
                transcript.write(create(&dir.join("transcript.tsv"))?)?;
                for (t, g) in snapshots.iter().enumerate() {
                    g.write_snapshot(create(&dir.join(format!("graph_session{t}.txt")))?)?;
                }
            }
            let acc = snapshots
                .iter()
                .zip(&stream.test_sets)
                .map(|(g, test)| evaluate_session(&state.backbone, g, test))
                .collect::<s2c_core::Result<Vec<_>>>()?;
            (acc, state)
        }
    };

    let report = SessionReport {
        method,
        seed,
        pd: s2c_core::harness::performance_dropping(&accuracies)?,
        accuracies,
        config_fingerprint: cfg.fingerprint(),
        wall_clock_secs: 0.0,
    };
    if let Some(path) = checkpoint {
        let mut w = create(path)?;
        state.write_checkpoint(&mut w)?;
        w.flush().map_err(Error::from)?;
    }
    if let Some(dir) = &out {
        write_reports(
            std::slice::from_ref(&report),
            ResultFormat::Csv,
            Some(&dir.join("report.csv")),
        )?;
    }
    write_reports(&[report], ResultFormat::Table, None)
}

fn eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let file = File::open(checkpoint)
        .map_err(Error::from)
        .with_context(|| format!("opening {}", checkpoint.display()))?;
    let state = ModelState::read_checkpoint(BufReader::new(file))?;
    let stream = cfg.stream(cfg.experiment.seed)?;
    let covered = state.graph.labels();
    let mut out = io::stdout().lock();
    writeln!(out, "session\taccuracy").map_err(Error::from)?;
    for t in 0..stream.len() {
        if !cumulative_label_set(&stream, t)?.is_subset(&covered) {
            break;
        }
        let acc = evaluate_session(&state.backbone, &state.graph, &stream.test_sets[t])?;
        writeln!(out, "{t}\t{acc:.6}").map_err(Error::from)?;
    }
    Ok(())
}

fn experiment(common: &Common, methods: &[Method], repeat: Option<usize>) -> Result<Vec<SessionReport>> {
    let mut cfg = load_config(common)?;
    if !methods.is_empty() {
        cfg.experiment.methods = methods.to_vec();
    }
    if let Some(r) = repeat {
        cfg.experiment.repeat = r;
    }
    Ok(run_experiment(&cfg)?)
}

fn read_reports(path: &Path) -> Result<Vec<SessionReport>> {
    let file = File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("opening {}", path.display()))?;
    let reader = BufReader::new(file);
    let reports = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv_results(reader)?,
        Some("json" | "jsonl") => read_json_results(reader)?,
        _ => bail!(Error::ConfigInvalid(format!(
            "{}: expected a .csv or .jsonl file",
            path.display()
        ))),
    };
    Ok(reports)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stream { common, out } => stream(&common, out.as_deref()),
        Command::Train {
            common,
            method,
            out,
            checkpoint,
        } => train(&common, method, out.as_deref(), checkpoint.as_deref()),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::Ablate {
            common,
            repeat,
            format,
            out,
        } => {
            let reports = experiment(&common, &Method::ALL, repeat)?;
            write_reports(&reports, format, out.as_deref())
        }
        Command::Report {
            common,
            inputs,
            method,
            repeat,
            format,
            out,
        } => {
            let reports = if inputs.is_empty() {
                experiment(&common, &method, repeat)?
            } else {
                let mut all = Vec::new();
                for path in &inputs {
                    all.extend(read_reports(path)?);
                }
                if !method.is_empty() {
                    all.retain(|r| method.contains(&r.method));
                }
                all
            };
            write_reports(&reports, format, out.as_deref())
        }
    }
}

/// 2 for config problems, 3 for divergence, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::DivergedLoss { .. }) => 3,
        Some(Error::Io(_) | Error::Format { .. }) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
