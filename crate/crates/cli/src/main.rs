use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hierbias_core::datasets::{resolve_data_root, SourceStore};
use hierbias_core::experiment::{
    self, build_datasets, ExperimentConfig, Profile, RunDir, RunMetrics,
};
use hierbias_core::Error;

/// Imbalanced label coupling experiments.
#[derive(Parser, Debug)]
#[command(name = "hierbias", version)]
struct Cli {
    /// Directory holding the MNIST and CIFAR-10 files (overrides HIERBIAS_DATA_ROOT).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Root of the run directories [default: config's output_root, else ./runs].
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "full", value_parser = ["full", "desk"])]
    profile: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compose the datasets and write containers into `<run>/data/`.
    BuildDataset { config: PathBuf },
    /// Train the model and write checkpoints and the epoch log.
    Train { config: PathBuf },
    /// Evaluate the trained model: confusion matrices, heatmaps, metrics.json.
    Evaluate { config: PathBuf },
    /// Last-layer retraining plus the fine-only baseline.
    Dfr { config: PathBuf },
    /// Infer the decision tree from the evaluated confusion matrices.
    Tree { config: PathBuf },
    /// Tabulate metrics of finished runs.
    Report {
        /// Emit CSV instead of the text table.
        #[arg(long)]
        csv: bool,
        runs: Vec<PathBuf>,
    },
    /// Every stage end to end.
    Run { config: PathBuf },
}

struct Ctx {
    cfg: ExperimentConfig,
    profile: Profile,
    store: SourceStore,
    out_root: PathBuf,
    run: RunDir,
}

impl Cli {
    fn ctx(&self, config: &Path) -> Result<Ctx, Error> {
        let profile: Profile = self.profile.parse()?;
        let mut cfg = ExperimentConfig::load(config, profile)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        let out_root = self
            .out_root
            .clone()
            .or_else(|| cfg.output_root.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        let run = RunDir::new(&out_root, &cfg, profile);
        Ok(Ctx {
            store: SourceStore::open(resolve_data_root(self.data_root.as_deref())),
            cfg,
            profile,
            out_root,
            run,
        })
    }
}

fn metrics_base(c: &Ctx, data: &experiment::Datasets) -> RunMetrics {
    RunMetrics {
        config_hash: c.cfg.hash(),
        name: c.cfg.name.clone(),
        profile: c.profile,
        seed: c.cfg.seed,
        dataset_hashes: data.hashes(),
        train: None,
        evaluations: Default::default(),
        dfr: None,
    }
}

fn execute(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::BuildDataset { config } => {
            let c = cli.ctx(config)?;
            experiment::write_config_snapshot(&c.run, &c.cfg)?;
            let data = build_datasets(&c.cfg, &c.store)?;
            for p in experiment::write_datasets(&c.run, &c.cfg, &data)? {
                println!("{}", p.display());
            }
        }
        Command::Train { config } => {
            let c = cli.ctx(config)?;
            experiment::write_config_snapshot(&c.run, &c.cfg)?;
            let data = build_datasets(&c.cfg, &c.store)?;
            let (_, history) = experiment::train_stage(&c.cfg, &data, &c.run)?;
            if let Some(last) = history.epochs.last() {
                println!(
                    "trained {} epochs: loss {:.4}, train accuracy {:.4}",
                    history.epochs.len(),
                    last.loss,
                    last.train_acc
                );
            }
            println!("{}", c.run.final_checkpoint().display());
        }
        Command::Evaluate { config } => {
            let c = cli.ctx(config)?;
            let model = experiment::load_trained(&c.run, &c.cfg)?;
            let data = build_datasets(&c.cfg, &c.store)?;
            let evals = experiment::evaluate_stage(&c.cfg, &model, &data, &c.run)?;
            let mut m = metrics_base(&c, &data);
            m.evaluations = evals.into_iter().map(|e| (e.name, e.report)).collect();
            experiment::write_metrics(&c.run, &m)?;
            print!("{}", experiment::report(&[c.run.root.clone()])?.to_text());
        }
        Command::Dfr { config } => {
            let c = cli.ctx(config)?;
            let data = build_datasets(&c.cfg, &c.store)?;
            let out = experiment::dfr_stage(&c.cfg, &data, &c.run)?;
            if let Ok(mut m) = RunMetrics::read(&c.run.metrics()) {
                if m.config_hash == c.cfg.hash() {
                    m.dfr = Some(out.report.clone());
                    experiment::write_metrics(&c.run, &m)?;
                }
            }
            println!("chosen C = {}", out.fit.chosen_c);
            print!("{}", out.report.to_table());
        }
        Command::Tree { config } => {
            let c = cli.ctx(config)?;
            let tree = c
                .cfg
                .tree()?
                .ok_or_else(|| Error::Spec("tree inference needs a coupled dataset".into()))?;
            let cm = experiment::read_confusions(&c.run, "test", &c.cfg.hash())?;
            experiment::tree_stage(&c.cfg, &tree, &cm, &c.run)?;
            print!("{}", std::fs::read_to_string(c.run.root.join("tree.txt"))?);
        }
        Command::Report { csv, runs } => {
            let r = experiment::report(runs)?;
            print!("{}", if *csv { r.to_csv() } else { r.to_text() });
        }
        Command::Run { config } => {
            let c = cli.ctx(config)?;
            let out = experiment::run_experiment(&c.cfg, c.profile, &c.store, &c.out_root)?;
            print!("{}", experiment::report(&[out.run.root.clone()])?.to_text());
            if let Some(d) = &out.dfr {
                print!("{}", d.report.to_table());
            }
            println!("{}", out.run.root.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Spec(_) => 2,
        Error::DataUnavailable { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
