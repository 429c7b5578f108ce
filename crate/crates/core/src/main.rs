use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use taam::diagnostics;
use taam::graph::{generate_sbm, SbmSpec};
use taam::harness::{build_stream, prepare_stream, ContinualRun, Method, PreparedTask, Variant};
use taam::io::planetoid::dataset_paths;
use taam::io::{load_checkpoint, load_dataset, save_checkpoint, write_outputs, write_planetoid, RunConfig, Summary};
use taam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "taam",
    version,
    about = "Replay-free continual graph learning with per-task modulators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// taam | oracle | finetune
    #[arg(long)]
    method: Option<String>,
    /// equal:N | unequal:BASE:STEP | sizes:A,B,...
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Any config key, e.g. `--set epochs=50`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let flags = [
            ("dataset", self.dataset.clone()),
            ("method", self.method.clone()),
            ("protocol", self.protocol.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a full task stream and write the accuracy matrix and summary.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// Save a checkpoint here after every task.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Load a checkpoint and evaluate every task it has seen.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Run the three ablation variants on one stream.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Finite-difference gradient suites; nonzero exit on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = diagnostics::TOLERANCE)]
        tolerance: f64,
    },
    /// Write a stochastic-block-model dataset in the citation-graph format.
    GenSbm {
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 60)]
        nodes_per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        p_in: f64,
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        /// Defaults to the number of classes.
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
        #[arg(long, default_value = "sbm")]
        name: String,
    },
}

fn prepare(cfg: &RunConfig) -> Result<Vec<PreparedTask>> {
    let loaded = load_dataset(cfg)?;
    if loaded.dangling_citations > 0 {
        eprintln!(
            "warning: skipped {} citations with unknown endpoints",
            loaded.dangling_citations
        );
    }
    let g = &loaded.graph;
    let stream = build_stream(g, &cfg.protocol, cfg.class_order, cfg.seed)?;
    eprintln!(
        "{}: {} nodes, {} edges, {} classes, {} tasks",
        cfg.dataset,
        g.num_nodes(),
        g.num_edges(),
        g.num_classes(),
        stream.len()
    );
    prepare_stream(g, &stream, cfg.hops)
}

fn stem(cfg: &RunConfig) -> String {
    let variant = match cfg.variant {
        Variant::Full => String::new(),
        v => format!("_{v}"),
    };
    format!("{}_{}{}_seed{}", cfg.dataset, cfg.method, variant, cfg.seed)
}

fn execute(
    cfg: &RunConfig,
    tasks: &[PreparedTask],
    checkpoint: Option<&PathBuf>,
    resume: Option<&PathBuf>,
) -> Result<()> {
    let clock = Instant::now();
    let opts = cfg.run_options()?;
    let mut run = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let saved = RunConfig::from_json(&ckpt.config)?;
            if saved.run_options()? != opts || saved.seed != cfg.seed || saved.dataset != cfg.dataset {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration",
                    path.display()
                )));
            }
            ContinualRun::resume(tasks, opts, cfg.seed, ckpt.state)?
        }
        None => ContinualRun::new(tasks, opts, cfg.seed)?,
    };
    let name = stem(cfg);
    std::fs::create_dir_all(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join(format!("{name}.log"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    while let Some(stage) = run.step()? {
        for rec in &stage.log {
            writeln!(log, "{rec}")?;
        }
        let last = stage.log.last().expect("epochs >= 1");
        let row: Vec<String> = stage.row.iter().map(|v| format!("{v:.2}")).collect();
        println!(
            "task {} trained in {:.1}s: loss {:.4e}, train acc {:.2}, donor {}, accuracies [{}]",
            stage.task,
            stage.train_seconds,
            last.loss,
            last.train_accuracy,
            stage.donor.map_or("-".to_string(), |d| d.to_string()),
            row.join(", ")
        );
        if let Some(path) = checkpoint {
            save_checkpoint(path, run.state(), &cfg.to_json())?;
        }
    }
    log.flush()?;
    let result = run.finish()?;
    let summary = Summary::new(
        &cfg.dataset,
        &cfg.method.to_string(),
        cfg.seed,
        &result,
        clock.elapsed().as_secs_f64(),
        cfg.to_json(),
    );
    let paths = write_outputs(&cfg.output_dir, &name, &result, &summary)?;
    println!(
        "AA {:.2}  AF {}  -> {}",
        summary.aa,
        summary.af.map_or("n/a".to_string(), |v| format!("{v:.2}")),
        paths.summary_json.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, args: &ConfigArgs) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = RunConfig::from_json(&ckpt.config)?;
    for (k, v) in args.overrides()? {
        cfg.set(&k, &v)?;
    }
    let tasks = prepare(&cfg)?;
    let t = ckpt.state.stages();
    let stored = ckpt.state.matrix.rows().last().cloned().unwrap_or_default();
    let run = ContinualRun::resume(&tasks, cfg.run_options()?, cfg.seed, ckpt.state)?;
    println!("task,accuracy,retrieved,stored");
    for j in 1..=t {
        let (acc, retrieval) = run.evaluate(t, j)?;
        println!(
            "{j},{acc},{},{}",
            retrieval.map_or("-".to_string(), |r| r.retrieved.to_string()),
            stored.get(j - 1).map_or(String::new(), |v| v.to_string())
        );
    }
    Ok(())
}

fn ablate(args: &ConfigArgs) -> Result<()> {
    let base = args.resolve()?;
    if base.method == Method::Finetune {
        return Err(Error::Config("ablation variants need method taam or oracle".into()));
    }
    let tasks = prepare(&base)?;
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.variant = variant;
        println!("== variant {} ==", variant.label());
        execute(&cfg, &tasks, None, None)?;
    }
    Ok(())
}

fn gradcheck(seeds: u64, tolerance: f64) -> Result<bool> {
    let mut worst: Vec<(String, f64, f64)> = Vec::new();
    for s in 0..seeds {
        for (name, report) in diagnostics::all_gradchecks(s)? {
            let (t, e) = (report.max_tensor_relative_error(), report.max_relative_error());
            match worst.iter_mut().find(|w| w.0 == name) {
                Some(w) => {
                    w.1 = w.1.max(t);
                    w.2 = w.2.max(e);
                }
                None => worst.push((name, t, e)),
            }
        }
    }
    println!("{:<32} {:>14} {:>14}  status", "suite", "tensor rel", "element rel");
    let mut ok = true;
    for (name, t, e) in &worst {
        let pass = *t <= tolerance;
        ok &= pass;
        println!("{name:<32} {t:>14.3e} {e:>14.3e}  {}", if pass { "ok" } else { "FAIL" });
    }
    println!(
        "{seeds} seeds, tolerance {tolerance:e}: {}",
        if ok { "pass" } else { "FAIL" }
    );
    Ok(ok)
}

#[allow(clippy::too_many_arguments)]
fn gen_sbm(
    classes: usize,
    nodes_per_class: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: Option<usize>,
    separation: f64,
    noise: f64,
    seed: u64,
    out_dir: &PathBuf,
    name: &str,
) -> Result<()> {
    let spec = SbmSpec::new(classes, nodes_per_class)
        .probabilities(p_in, p_out)
        .features(feature_dim.unwrap_or(classes), separation)
        .noise(noise);
    let g = generate_sbm(&spec, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let (content, cites) = dataset_paths(out_dir, name);
    write_planetoid(&g, &content, &cites)?;
    println!(
        "wrote {} and {} ({} nodes, {} edges)",
        content.display(),
        cites.display(),
        g.num_nodes(),
        g.num_edges()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            args,
            checkpoint,
            resume,
        } => args
            .resolve()
            .and_then(|cfg| Ok((prepare(&cfg)?, cfg)))
            .and_then(|(tasks, cfg)| execute(&cfg, &tasks, checkpoint.as_ref(), resume.as_ref()))
            .map(|_| true),
        Command::Eval { checkpoint, args } => eval(checkpoint, args).map(|_| true),
        Command::Ablate { args } => ablate(args).map(|_| true),
        Command::Gradcheck { seeds, tolerance } => gradcheck(*seeds, *tolerance),
        Command::GenSbm {
            classes,
            nodes_per_class,
            p_in,
            p_out,
            feature_dim,
            separation,
            noise,
            seed,
            out_dir,
            name,
        } => gen_sbm(
            *classes,
            *nodes_per_class,
            *p_in,
            *p_out,
            *feature_dim,
            *separation,
            *noise,
            *seed,
            out_dir,
            name,
        )
        .map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
