use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use conprom::corpus::{load_dataset, serialize_dataset, Split};
use conprom::episodes::{build_episodes, episodes_to_json, load_episodes, parse_episodes, Episode};
use conprom::eval::{aggregate, evaluate_episode, EvalOptions};
use conprom::model::full_objective_gradcheck;
use conprom::synthgen::{generate, SynthSpec};
use conprom::trainer::{loss_log_csv, train, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "conprom",
    version,
    about = "Few-shot joint intent detection and slot filling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Episode files.
    Episodes {
        #[command(subcommand)]
        command: EpisodesCommand,
    },
    /// Train one model per seed.
    Train(TrainArgs),
    /// Evaluate checkpoints on an episode file.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients of the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Dump original and merged prototypes of an episode's support set.
    ExportProtos {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EpisodesCommand {
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        query_size: usize,
        #[arg(long, default_value_t = 50)]
        n_episodes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pre-built training episodes; sampled online from the train split when absent.
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Runs with seeds `seed, seed+1, ...` into `out/seed-<i>/`.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// A checkpoint directory, or a training output with `seed-<i>/` subdirectories.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    finetune: bool,
    #[arg(long)]
    tr: bool,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn seed_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("seed-{i}"))
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let dataset =
        load_dataset(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let episodes = args
        .episodes
        .as_ref()
        .map(load_episodes)
        .transpose()
        .context("loading episodes")?;
    let base = match &args.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    for i in 0..args.seeds {
        let mut config = base.clone();
        config.seed = base.seed + i as u64;
        let outcome = train(&dataset, episodes.as_deref(), &config)?;
        let dir = seed_dir(&args.out, i);
        outcome.best.save(&dir)?;
        write(&dir.join("loss.csv"), &loss_log_csv(&outcome.log))?;
        let final_loss = outcome.log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
        let best = outcome
            .dev_history
            .iter()
            .map(|h| h.1)
            .fold(f64::NAN, f64::max);
        println!(
            "seed {}: {} steps, final L_all {final_loss:.4}, best dev joint {best:.4} -> {}",
            config.seed,
            outcome.last.step,
            dir.display()
        );
    }
    Ok(())
}

fn checkpoints(root: &Path, seeds: usize) -> Result<Vec<Checkpoint>> {
    if root.join("checkpoint.json").exists() {
        if seeds > 1 {
            bail!(
                "{} holds a single checkpoint but --seeds is {seeds}",
                root.display()
            );
        }
        return Ok(vec![Checkpoint::load(root)?]);
    }
    (0..seeds)
        .map(|i| {
            let dir = seed_dir(root, i);
            Checkpoint::load(&dir).with_context(|| format!("loading {}", dir.display()))
        })
        .collect()
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let episodes = load_episodes(&args.episodes)?;
    let options = EvalOptions {
        finetune: args.finetune,
        tr: args.tr,
    };
    let mut per_seed = Vec::new();
    for ckpt in checkpoints(&args.checkpoint, args.seeds)? {
        let reports = episodes
            .iter()
            .map(|e| evaluate_episode(&ckpt.model, e, options, &ckpt.config))
            .collect::<conprom::Result<Vec<_>>>()?;
        per_seed.push(reports);
    }
    let report = aggregate(&per_seed, options)?;
    let (m, s) = (&report.mean, &report.std);
    println!(
        "intent acc  {:.4} ± {:.4}",
        m.intent_accuracy, s.intent_accuracy
    );
    println!("slot f1     {:.4} ± {:.4}", m.slot_f1, s.slot_f1);
    println!(
        "joint acc   {:.4} ± {:.4}",
        m.joint_accuracy, s.joint_accuracy
    );
    if let Some(path) = &args.report {
        write(path, &report.to_json())?;
    }
    Ok(())
}

fn single_episode(path: &Path) -> Result<Episode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // a bare episode object or an episode file holding exactly one
    let text = if text.trim_start().starts_with('{') {
        format!("[{text}]")
    } else {
        text
    };
    let mut all = parse_episodes(&text)?;
    match all.len() {
        1 => Ok(all.remove(0)),
        n => bail!("{} holds {n} episodes; expected one", path.display()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => SynthSpec::from_toml_str(&fs::read_to_string(&p)?)?,
                None => SynthSpec::default(),
            };
            let ds = generate(&spec)?;
            write(&out, &serialize_dataset(&ds))?;
            println!(
                "{} train / {} dev / {} test domains -> {}",
                ds.train_domains.len(),
                ds.dev_domains.len(),
                ds.test_domains.len(),
                out.display()
            );
        }
        Command::Episodes {
            command:
                EpisodesCommand::Build {
                    data,
                    split,
                    k,
                    query_size,
                    n_episodes,
                    seed,
                    out,
                },
        } => {
            let dataset = load_dataset(&data)?;
            let split: Split = split.parse()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let episodes =
                build_episodes(dataset.split(split), k, query_size, n_episodes, &mut rng)?;
            write(&out, &episodes_to_json(&episodes))?;
            println!("{} episodes -> {}", episodes.len(), out.display());
        }
        Command::Train(args) => run_train(&args)?,
        Command::Eval(args) => run_eval(&args)?,
        Command::Gradcheck { seed, eps } => {
            let report = full_objective_gradcheck(seed, eps)?;
            println!(
                "max relative error {:e} over {} coordinates",
                report.max_relative_error, report.coordinates
            );
            if let Some(w) = report.worst {
                println!(
                    "worst: {}[{}] analytic {:e} numeric {:e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
        }
        Command::ExportProtos {
            episode,
            checkpoint,
            out,
        } => {
            let ep = single_episode(&episode)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let export = ckpt.model.export_prototypes(&ep.support.frames)?;
            write(&out, &serde_json::to_string_pretty(&export)?)?;
        }
    }
    Ok(())
}
