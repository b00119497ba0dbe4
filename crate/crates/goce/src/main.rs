//! Command-line front end: dataset generation, training, evaluation,
//! self-evolution, and graph dumps over JSON checkpoints and JSONL datasets.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! abort. Set GOCE_LOG=error|info|debug for logging.

use clap::{Args, Parser, Subcommand};
use goce::error::GoceError;
use goce::evolution::{evolve, GateConfig};
use goce::metrics::metrics;
use goce::model::{
    eval_batch, fitness_terms, forward, intervened_report, train_from, Checkpoint, ForwardOpts,
    GoceParams, MaskMode, ModelConfig, TrainOutcome, CHECKPOINT_FORMAT_VERSION,
};
use goce::tasks::{generate, read_jsonl, write_jsonl};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "goce", about = "Causal-graph transformer at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON model config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Mask mode: goce-graph, chain-predecessor, or causal-full.
    #[arg(long)]
    mask_mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_l0: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    lambda_int: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ModelConfig, GoceError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<ModelConfig>(&text)
                    .map_err(|e| GoceError::Config(format!("bad config {}: {e}", path.display())))?
            }
            None => ModelConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.mask_mode {
            cfg.mask_mode = parse_mask_mode(m)?;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lambda_l0 {
            cfg.lambda_l0 = v;
        }
        if let Some(v) = self.lambda_kl {
            cfg.lambda_kl = v;
        }
        if let Some(v) = self.lambda_int {
            cfg.lambda_int = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_mask_mode(s: &str) -> Result<MaskMode, GoceError> {
    match s {
        "goce-graph" => Ok(MaskMode::GoceGraph),
        "chain-predecessor" => Ok(MaskMode::ChainPredecessor),
        "causal-full" => Ok(MaskMode::CausalFull),
        other => Err(GoceError::Config(format!(
            "unknown mask mode {other:?} (expected goce-graph, chain-predecessor, or causal-full)"
        ))),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic relation-composition dataset as JSONL.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        hops: usize,
        #[arg(long, default_value_t = 4)]
        group_order: usize,
        #[arg(long, default_value_t = 8)]
        entities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSONL training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from this checkpoint instead of fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and print metrics as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Override the checkpoint's mask mode.
        #[arg(long)]
        mask_mode: Option<String>,
        /// One-off intervention report "token_index:seed" on the first example.
        #[arg(long)]
        intervene: Option<String>,
    },
    /// Run the annealed self-evolution gate over a checkpoint.
    Evolve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        /// Output checkpoint path for the fittest parameters.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSONL archive of every round.
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Frozen evaluation batch size drawn from the data file.
        #[arg(long, default_value_t = 256)]
        eval_size: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the learned causal graph for one sequence as DOT.
    DumpGraph {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated token ids, e.g. "0,9,3,10,5,12".
        #[arg(long)]
        tokens: String,
        /// Also dump per-head attention distributions as JSON on stderr-free stdout.
        #[arg(long)]
        attn: bool,
    },
}

fn run() -> Result<(), GoceError> {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter("GOCE_LOG")).init();
    match cli.command {
        Command::GenData {
            out,
            count,
            hops,
            group_order,
            entities,
            seed,
        } => {
            let data = generate(count, hops, group_order, entities, seed)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            write_jsonl(&data, &mut f)?;
            f.flush()?;
            info!("wrote {} examples to {}", data.len(), out.display());
            println!("{}", data.len());
            Ok(())
        }
        Command::Train {
            config,
            data,
            steps,
            out,
            log,
            resume,
        } => {
            let dataset = read_jsonl(std::io::BufReader::new(std::fs::File::open(&data)?))?;
            let (cfg, params, opt, start) = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    let mut cfg = ckpt.config;
                    if let Some(s) = config.seed {
                        cfg.seed = s;
                    }
                    (cfg, ckpt.params, ckpt.optimizer, ckpt.trained_steps)
                }
                None => {
                    let cfg = config.resolve()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(goce_init_seed(cfg.seed));
                    let params = GoceParams::init(&cfg, &mut rng);
                    let opt = goce::model::AdamState::new(&params);
                    (cfg, params, opt, 0)
                }
            };
            let outcome: TrainOutcome = train_from(&dataset, &cfg, steps, params, opt, start)?;
            if let Some(path) = log {
                let mut f = std::fs::File::create(path)?;
                for entry in &outcome.log {
                    writeln!(f, "{}", serde_json::to_string(entry)?)?;
                }
            }
            let trained = start + outcome.log.len();
            if let Some(last) = ckpt_last_loss(&outcome) {
                println!("{}", serde_json::to_string(last)?);
            }
            let aborted_at = outcome.aborted_at;
            let ckpt = Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                config: cfg,
                params: outcome.params,
                optimizer: outcome.optimizer,
                trained_steps: trained,
            };
            ckpt.save(&out)?;
            if let Some(step) = aborted_at {
                info!("non-finite loss at step {step}; saved last good state");
                return Err(GoceError::NumericAbort { step });
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            mask_mode,
            intervene,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let dataset = read_jsonl(std::io::BufReader::new(std::fs::File::open(&data)?))?;
            if dataset.is_empty() {
                return Err(GoceError::Data("evaluation dataset is empty".into()));
            }
            let mode = match mask_mode {
                Some(m) => parse_mask_mode(&m)?,
                None => ckpt.config.mask_mode,
            };
            if let Some(spec) = intervene {
                let (idx, seed) = parse_intervene(&spec)?;
                let report =
                    intervened_report(&dataset[0].tokens, &ckpt.params, &ckpt.config, idx, seed)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
                return Ok(());
            }
            let preds = eval_batch(&dataset, &ckpt.params, &ckpt.config, mode)?;
            let labels: Vec<usize> = dataset.iter().map(|e| e.label).collect();
            let report = metrics(&preds, &labels)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Evolve {
            ckpt,
            data,
            rounds,
            out,
            archive,
            eval_size,
            alpha,
            beta,
            seed,
        } => {
            let loaded = Checkpoint::load(&ckpt)?;
            let cfg = loaded.config.clone();
            let dataset = read_jsonl(std::io::BufReader::new(std::fs::File::open(&data)?))?;
            if dataset.is_empty() {
                return Err(GoceError::Data("evolution dataset is empty".into()));
            }
            let eval_set: Vec<_> = dataset.iter().take(eval_size).cloned().collect();
            let gate_cfg = GateConfig {
                alpha,
                beta,
                ..GateConfig::default()
            };
            let root = seed.unwrap_or(cfg.seed);
            let cf_seed = goce::model::derive_seed(root, "evolve-cf");
            let mut rng = ChaCha8Rng::seed_from_u64(goce::model::derive_seed(root, "evolve"));
            let mut scratch = loaded.params.clone();
            let theta0 = loaded.params.flatten();
            let (state, arch) = evolve(
                rounds,
                theta0,
                |theta| {
                    scratch.unflatten_into(theta)?;
                    let terms = fitness_terms(&scratch, &cfg, &eval_set, cf_seed)?;
                    Ok(terms.combine(&gate_cfg))
                },
                &gate_cfg,
                &mut rng,
            )?;
            if let Some(path) = archive {
                let mut f = std::fs::File::create(path)?;
                for entry in &arch.entries {
                    writeln!(f, "{}", serde_json::to_string(entry)?)?;
                }
            }
            let mut best = loaded.params.clone();
            best.unflatten_into(&state.theta_min)?;
            let ckpt_out = Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                config: cfg,
                params: best,
                optimizer: loaded.optimizer,
                trained_steps: loaded.trained_steps,
            };
            ckpt_out.save(&out)?;
            println!(
                "{}",
                serde_json::to_string(&serde_json::json!({
                    "rounds": rounds,
                    "f_min": state.f_min,
                    "f_best": state.f_best,
                    "final_temperature": state.temperature,
                }))?
            );
            Ok(())
        }
        Command::DumpGraph { ckpt, tokens, attn } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let toks: Vec<usize> = tokens
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| GoceError::Data(format!("bad token {s:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let opts = ForwardOpts {
                mask_mode: ckpt.config.mask_mode,
                ..Default::default()
            };
            let pass = forward(&toks, &ckpt.params, &ckpt.config, &opts, &mut rng)?;
            println!("{}", pass.diagnostics.graph.to_dot());
            if attn {
                println!("{}", serde_json::to_string_pretty(&pass.diagnostics.attention)?);
            }
            Ok(())
        }
    }
}

fn parse_intervene(spec: &str) -> Result<(usize, u64), GoceError> {
    let (a, b) = spec.split_once(':').ok_or_else(|| {
        GoceError::Config(format!("--intervene expects \"index:seed\", got {spec:?}"))
    })?;
    let idx = a
        .trim()
        .parse::<usize>()
        .map_err(|e| GoceError::Config(format!("bad intervene index {a:?}: {e}")))?;
    let seed = b
        .trim()
        .parse::<u64>()
        .map_err(|e| GoceError::Config(format!("bad intervene seed {b:?}: {e}")))?;
    Ok((idx, seed))
}

fn goce_init_seed(root: u64) -> u64 {
    goce::model::derive_seed(root, "init")
}

fn ckpt_last_loss(outcome: &TrainOutcome) -> Option<&goce::model::TrainLogEntry> {
    outcome.log.last()
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                GoceError::Config(_) | GoceError::Serde(_) => 2,
                GoceError::Data(_) | GoceError::Io(_) | GoceError::IndexOutOfRange { .. } => 3,
                GoceError::NumericAbort { .. } => 4,
                GoceError::Evaluator { .. } => 4,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
