//! `rasm`: synthetic data, training, inference, evaluation and diagnostics
//! for the regional-attention shadow removal network.
//!
//! Exit codes: 0 success, 1 usage error (bad flag, invalid config), 2 runtime
//! failure.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rasm_core::data::{load_image, load_mask, save_image, Dataset};
use rasm_core::metrics::records_to_csv;
use rasm_core::network::{bottleneck_attention_map, Architecture};
use rasm_core::train::{self, Checkpoint, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "rasm", version, about = "Regional-attention shadow removal")]
struct Cli {
    /// Run configuration (TOML); unset fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the training and synthetic-data seeds.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (or file, for `infer` and `attmap`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Checkpoint to load (resume for `train`).
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Total optimizer steps (schedule length).
    #[arg(long, global = true, value_name = "N")]
    steps: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as shadow/, mask/ and gt/ PNG triples.
    Synth {
        /// Number of samples (default: `train.samples`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train from scratch, or resume from --checkpoint.
    Train,
    /// Remove the shadow from one image.
    Infer { shadow: PathBuf, mask: PathBuf },
    /// Score a model on a shadow/ mask/ gt/ dataset directory.
    Eval { data: PathBuf },
    /// Per-layer parameter and FLOP table.
    Flops {
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
    },
    /// Run the built-in oracle and gradient-check suites.
    Selfcheck,
    /// Dump the bottleneck attention distribution of one query.
    Attmap {
        shadow: PathBuf,
        mask: PathBuf,
        /// Bottleneck query as `ROW,COL`.
        #[arg(long, value_parser = parse_query)]
        query: (usize, usize),
        /// Bottleneck block index.
        #[arg(long, default_value_t = 0)]
        block: usize,
    },
}

fn parse_query(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected ROW,COL")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

/// An error caused by how the program was invoked.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.synth.seed = seed;
    }
    if let Some(steps) = cli.steps {
        config.schedule.total_steps = steps;
        config.schedule.warmup_steps = config.schedule.warmup_steps.min(steps);
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn require_checkpoint(cli: &Cli) -> Result<Checkpoint> {
    let path = cli.checkpoint.as_ref().ok_or_else(|| usage("this command needs --checkpoint PATH"))?;
    Ok(Checkpoint::load(path)?)
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    let stdout = &mut io::stdout().lock();
    match &cli.command {
        Command::Synth { count } => {
            let config = load_config(cli)?;
            let out = out_or(cli, "synthetic");
            let ds = Dataset::synthetic(&config.synth, count.unwrap_or(config.train.samples))?;
            ds.save(&out)?;
            writeln!(stdout, "wrote {} samples to {}", ds.len(), out.display())?;
        }
        Command::Train => {
            let out = out_or(cli, "run");
            let outcome = match &cli.checkpoint {
                Some(path) => {
                    if cli.config.is_some() || cli.seed.is_some() {
                        return Err(usage("resuming uses the checkpoint's config; drop --config/--seed"));
                    }
                    train::resume(path, cli.steps, Some(&out), stdout)?
                }
                None => train::train(load_config(cli)?, Some(&out), stdout)?,
            };
            writeln!(stdout, "finished at step {}; checkpoint {}", outcome.checkpoint.step, out.join("latest.rasm").display())?;
        }
        Command::Infer { shadow, mask } => {
            let ck = require_checkpoint(cli)?;
            let out = out_or(cli, "restored.png");
            let restored = train::infer(&ck.params, &ck.config.model, &load_image(shadow)?, &load_mask(mask)?)?;
            save_image(&restored, &out)?;
            writeln!(stdout, "wrote {}", out.display())?;
        }
        Command::Eval { data } => {
            let ck = require_checkpoint(cli)?;
            let records = train::evaluate(&ck.params, &ck.config.model, &Dataset::load_dir(data)?)?;
            let csv = records_to_csv(&records);
            if let Some(dir) = &cli.out {
                write_text(&dir.join("metrics.csv"), &csv)?;
            }
            stdout.write_all(csv.as_bytes())?;
        }
        Command::Flops { height, width } => {
            let model = match &cli.checkpoint {
                Some(_) => require_checkpoint(cli)?.config.model,
                None => load_config(cli)?.model,
            };
            let unit = 1usize << model.depth;
            if *height == 0 || *width == 0 || height % unit != 0 || width % unit != 0 {
                return Err(usage(format!("--height and --width must be positive multiples of {unit}")));
            }
            let arch = Architecture::new(&model, *height, *width).map_err(|e| usage(e.to_string()))?;
            let table = format!("{}GFLOPs (2 x MACs): {:.3}\n", arch.table(), 2.0 * arch.macs() as f64 / 1e9);
            match &cli.out {
                Some(path) => write_text(path, &table)?,
                None => stdout.write_all(table.as_bytes())?,
            }
        }
        Command::Selfcheck => {
            let results = rasm_core::selfcheck::run_all();
            for r in &results {
                writeln!(stdout, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                anyhow::bail!("{failed} of {} suites failed", results.len());
            }
        }
        Command::Attmap { shadow, mask, query, block } => {
            let ck = require_checkpoint(cli)?;
            let map = bottleneck_attention_map(
                &ck.params,
                &ck.config.model,
                &load_image(shadow)?,
                &load_mask(mask)?,
                *block,
                *query,
            )?;
            let text = map.to_text();
            match &cli.out {
                Some(path) => write_text(path, &text)?,
                None => stdout.write_all(text.as_bytes())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
