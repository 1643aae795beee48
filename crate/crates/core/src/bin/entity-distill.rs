use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use entity_distill::baselines::EditorKind;
use entity_distill::pipeline::{commands, sweep, RunConfig, RunDir, SweepAxis, Workbench};
use entity_distill::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Inject entity definitions into a small language model by context distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for entity selection, sampling, edit order and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Editor kind(s), comma-separated (e.g. distill,ft_definition_full).
    #[arg(long, global = true, value_delimiter = ',')]
    editor: Vec<EditorKind>,
    /// Number of novel entities to edit.
    #[arg(long, global = true)]
    entities: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Any config value by dotted path, e.g. --set edit.epochs=3.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world, its corpus and vocabulary.
    GenWorld,
    /// Pretrain the base model on the world corpus.
    Pretrain,
    /// Sample transfer sets for the selected entities.
    GenTransfer,
    /// Edit the selected entities with every trainable editor.
    Edit,
    /// Evaluate base, edited and prepend editors.
    Eval,
    /// Repeat edit+eval along one config axis, for each sweep seed.
    Sweep {
        /// n_entities, n_continuations or learning_rate.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
    },
    /// Distillation with correct or random definitions and transfer sets.
    Ablate,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects PATH=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if !common.editor.is_empty() {
        cfg.editors = common.editor.clone();
    }
    if let Some(n) = common.entities {
        cfg.eval.n_entities = n;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let dir = RunDir::new(&cfg.out);
    match cli.command {
        Command::GenWorld => commands::gen_world(&cfg, &dir),
        Command::Pretrain => commands::pretrain(&cfg, &dir),
        Command::GenTransfer => commands::gen_transfer(&cfg, &dir),
        Command::Edit => commands::edit(&cfg, &dir),
        Command::Eval => {
            let runs = commands::eval(&cfg, &dir)?;
            for r in runs {
                println!(
                    "{:<26} target {:>9.1} -> {:>9.1}  specificity {:>7.1} -> {:>7.1}",
                    r.kind.name(),
                    r.report.target_pre,
                    r.report.target_post,
                    r.report.specificity_pre,
                    r.report.specificity_post
                );
            }
            println!("wrote {}", dir.summary_csv().display());
            Ok(())
        }
        Command::Sweep { axis, values } => {
            let values = sweep::parse_values(&values)?;
            commands::write_config(&cfg, &dir)?;
            let bench = Workbench::load(&cfg, &dir)?;
            let rows = sweep::sweep(&bench, axis, &values)?;
            let out = dir.root().join("sweep").join(axis.name());
            sweep::write_sweep(&out, &rows)?;
            println!("wrote {}", out.join("summary.csv").display());
            Ok(())
        }
        Command::Ablate => {
            commands::write_config(&cfg, &dir)?;
            let bench = Workbench::load(&cfg, &dir)?;
            let rows = sweep::ablate(&bench)?;
            let path = dir.root().join("ablation").join("ablation.csv");
            sweep::write_ablation(&path, &rows)?;
            for r in &rows {
                println!("{:<8} {:<14} delta {:>9.1}", r.definition, r.transfer_set, r.target_delta);
            }
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
