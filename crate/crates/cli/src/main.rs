use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgqp::config::ExperimentConfig;
use lgqp::env::Policy;
use lgqp::experiment::{self, EvalRow};
use lgqp::qmix::Checkpoint;

/// Train and evaluate delay-aware downlink schedulers.
#[derive(Parser)]
#[command(name = "lgqp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learned policy at every configured packet size.
    Train(Common),
    /// Evaluate a policy and write per-seed metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the one `train` wrote to --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the per-packet event log of every evaluation.
        #[arg(long)]
        events: bool,
    },
    /// Train and evaluate every policy at every packet size and seed.
    Sweep(Common),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// lgqp, qpips or rr_edf.
    #[arg(long)]
    policy: Option<Policy>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> lgqp::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::from_overrides(std::env::vars())?,
        };
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        if let Some(p) = self.policy {
            cfg.run.policies = vec![p];
        }
        Ok(cfg)
    }

    fn policy(&self) -> lgqp::Result<Policy> {
        self.policy
            .ok_or_else(|| lgqp::Error::Config {
                path: "--policy".into(),
                msg: "required for this command".into(),
            })
    }
}

fn train(common: &Common) -> lgqp::Result<()> {
    let cfg = common.load()?;
    let policy = common.policy()?;
    for &g in &cfg.traffic.packet_sizes {
        for &seed in &cfg.run.seeds {
            let out = experiment::train(&cfg, policy, g, seed, Some(&common.out))?;
            let tail = out.curve.last().map_or(0.0, |r| r.episode_reward);
            println!("trained {policy} G={g} seed={seed}: final episode reward {tail:.4}");
        }
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>, events: bool) -> lgqp::Result<()> {
    let cfg = common.load()?;
    let policy = common.policy()?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for &g in &cfg.traffic.packet_sizes {
        for &seed in &cfg.run.seeds {
            let model = if policy.is_learned() {
                let path = checkpoint
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| experiment::checkpoint_path(&common.out, policy, g, seed));
                let ck = Checkpoint::load(&path).map_err(|e| {
                    lgqp::Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
                })?;
                Some(ck.to_model()?)
            } else {
                None
            };
            let ev = experiment::evaluate(&cfg, policy, g, seed, model.as_ref())?;
            if events {
                fs::create_dir_all(&common.out)?;
                let path = common.out.join(format!("events_{policy}_g{g}_s{seed}.csv"));
                ev.log.write_csv(BufWriter::new(File::create(path)?))?;
            }
            println!(
                "{policy} G={g} seed={seed}: violations {:.3}%, jitter {:.4} slots",
                ev.row.violation_pct, ev.row.jitter
            );
            rows.push(ev.row);
        }
    }
    fs::create_dir_all(&common.out)?;
    let path = common.out.join(format!("eval_{policy}.csv"));
    experiment::write_eval_rows(&rows, cfg.num_users(), BufWriter::new(File::create(path)?))?;
    Ok(())
}

fn sweep(common: &Common) -> lgqp::Result<()> {
    let cfg = common.load()?;
    let rows = experiment::sweep(&cfg, Some(&common.out))?;
    for s in experiment::summarize(&rows) {
        println!(
            "{} G={}: violations {:.3}% (+/- {:.3}), jitter {:.4} slots",
            s.policy, s.packet_bits, s.violation_pct_mean, s.violation_pct_std, s.jitter_mean
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval {
            common,
            checkpoint,
            events,
        } => eval(common, checkpoint.as_deref(), *events),
        Command::Sweep(c) => sweep(c),
        Command::Defaults => {
            print!("{}", ExperimentConfig::default().to_toml_string());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
