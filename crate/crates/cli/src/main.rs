use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use specdistill::datasets::export_jsonl;
use specdistill::harness::{
    read_records, report, run_ablation, run_comparison, run_variants, Ablation, ExperimentConfig,
    RunRecord, SeedSession, Variant, OUTPUT_ROOT_ENV,
};

#[derive(Parser)]
#[command(
    name = "specdistill",
    version,
    about = "Selective distillation of draft models for speculative decoding"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Explicit flags override `--set`,
/// which overrides the config file.
#[derive(Args)]
struct Common {
    /// Experiment config (TOML). The built-in arithmetic experiment when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set draft_train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    name: Option<String>,
    /// Output root; the environment variable takes precedence.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_eval: Option<usize>,
    /// Filter fraction of the draft stage.
    #[arg(long, global = true)]
    k: Option<f64>,
    /// top, bottom or none.
    #[arg(long, global = true)]
    filter_mode: Option<String>,
    /// fkl, rkl or tvd for both the reference and the draft.
    #[arg(long, global = true)]
    divergence: Option<String>,
    /// Epochs of every stage.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<usize>,
    #[arg(long, global = true)]
    max_new_tokens: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective config as TOML.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write each seed's training and evaluation sets as JSON lines.
    GenData,
    /// Step 1: fine-tune the target on the task.
    FinetuneTarget,
    /// Step 2: distill the reference draft from the target without filtering.
    DistillReference,
    /// Step 3: distill the draft on the tokens selected by loss gap.
    DistillDraft,
    /// Evaluate the unfiltered baseline and the selective draft, then report.
    Evaluate,
    /// Run one or more ablations and report.
    Ablate {
        /// bottom_k, finetune_only, rkl, tvd, k_sweep or all.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        which: Vec<String>,
    },
    /// Compare baseline and selective runs across values of one config key.
    Sweep {
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Collect every persisted run record into a summary CSV.
    Report {
        /// Directory to scan; the experiment directory by default.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn divergence_name(s: &str) -> Result<&'static str> {
    Ok(match s {
        "fkl" | "forward_kl" => "forward_kl",
        "rkl" | "reverse_kl" => "reverse_kl",
        "tvd" => "tvd",
        other => bail!("unknown divergence {other:?}"),
    })
}

impl Common {
    fn overrides(&self) -> Result<Vec<String>> {
        let mut o = self.sets.clone();
        let quote = |s: &str| format!("{s:?}");
        if let Some(v) = &self.name {
            o.push(format!("name={}", quote(v)));
        }
        if let Some(v) = &self.output_dir {
            o.push(format!("output_dir={}", quote(&v.to_string_lossy())));
        }
        if let Some(v) = &self.seeds {
            let list: Vec<String> = v.iter().map(u64::to_string).collect();
            o.push(format!("seeds=[{}]", list.join(",")));
        }
        if let Some(v) = self.n_train {
            o.push(format!("n_train={v}"));
        }
        if let Some(v) = self.n_eval {
            o.push(format!("n_eval={v}"));
        }
        if let Some(v) = self.k {
            o.push(format!("draft_train.filter.k={v:?}"));
        }
        if let Some(v) = &self.filter_mode {
            o.push(format!("draft_train.filter.mode={}", quote(v)));
        }
        if let Some(v) = &self.divergence {
            let d = quote(divergence_name(v)?);
            o.push(format!("reference_train.divergence={d}"));
            o.push(format!("draft_train.divergence={d}"));
        }
        if let Some(v) = self.epochs {
            for stage in ["target_train", "reference_train", "draft_train"] {
                o.push(format!("{stage}.epochs={v}"));
            }
        }
        if let Some(v) = self.gamma {
            o.push(format!("sd.gamma={v}"));
        }
        if let Some(v) = self.max_new_tokens {
            o.push(format!("sd.max_new_tokens={v}"));
        }
        Ok(o)
    }

    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::arithmetic_default().to_toml()?,
        };
        let mut overrides = self.overrides()?;
        overrides.extend_from_slice(extra);
        let cfg = ExperimentConfig::from_toml_with_overrides(&text, &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_root().join(&cfg.name)
}

fn write_report(cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    let path = report(records, experiment_dir(cfg))?;
    for r in records {
        println!(
            "seed {:>3}  {:<22} alpha {:.4}  tau {:.3}  speedup {:.3}  c {:.4}",
            r.seed, r.method, r.alpha, r.tau, r.speedup, r.c
        );
    }
    println!("summary written to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Config { out } => {
            let text = common.load(&[])?.to_toml()?;
            match out {
                Some(p) => {
                    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
        }
        Command::GenData => {
            let cfg = common.load(&[])?;
            for &seed in &cfg.seeds {
                let data = cfg.data(seed)?;
                let dir = cfg.seed_dir(seed).join("data");
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                export_jsonl(&data.train, &data.tokenizer, dir.join("train.jsonl"))?;
                export_jsonl(&data.eval, &data.tokenizer, dir.join("eval.jsonl"))?;
                println!(
                    "seed {seed}: {} train and {} eval examples in {}",
                    data.train.len(),
                    data.eval.len(),
                    dir.display()
                );
            }
        }
        Command::FinetuneTarget => {
            let cfg = common.load(&[])?;
            for &seed in &cfg.seeds {
                let session = SeedSession::open(&cfg, seed)?;
                let st = session.target_stage();
                println!("seed {seed}: target {}", st.checkpoint.display());
            }
        }
        Command::DistillReference => {
            let cfg = common.load(&[])?;
            for &seed in &cfg.seeds {
                let mut session = SeedSession::open(&cfg, seed)?;
                let st = session.reference_stage(&cfg.reference_train)?;
                println!("seed {seed}: reference {}", st.checkpoint.display());
            }
        }
        Command::DistillDraft => {
            let cfg = common.load(&[])?;
            for &seed in &cfg.seeds {
                let mut session = SeedSession::open(&cfg, seed)?;
                let st = session.draft_stage(&cfg.reference_train, &cfg.draft_train)?;
                println!("seed {seed}: draft {}", st.checkpoint.display());
            }
        }
        Command::Evaluate => {
            let cfg = common.load(&[])?;
            let records = run_comparison(&cfg)?;
            write_report(&cfg, &records)?;
        }
        Command::Ablate { which } => {
            let cfg = common.load(&[])?;
            let list: Vec<Ablation> = if which.iter().any(|w| w == "all") {
                Ablation::ALL.to_vec()
            } else {
                which.iter().map(|w| w.parse()).collect::<Result<_, _>>()?
            };
            let mut records = Vec::new();
            for a in list {
                records.extend(run_ablation(&cfg, a)?);
            }
            write_report(&cfg, &records)?;
        }
        Command::Sweep { key, values } => {
            let base = common.load(&[])?;
            let mut records = Vec::new();
            for v in values {
                let cfg = common.load(&[format!("{key}={v}")])?;
                let tag = format!("@{key}={v}");
                let variants: Vec<Variant> = [Variant::baseline(&cfg), Variant::selective(&cfg)]
                    .into_iter()
                    .map(|mut x| {
                        x.method.push_str(&tag);
                        x
                    })
                    .collect();
                records.extend(run_variants(&cfg, &variants)?);
            }
            write_report(&base, &records)?;
        }
        Command::Report { from } => {
            let cfg = common.load(&[])?;
            let dir = from.clone().unwrap_or_else(|| experiment_dir(&cfg));
            let records = read_records(&dir)?;
            if records.is_empty() {
                bail!("no run records under {}", dir.display());
            }
            write_report(&cfg, &records)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
