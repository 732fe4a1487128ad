//! Command line for the study. Every subcommand runs one stage over a shared
//! output directory, so stages can be rerun or scheduled independently.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use bodyscene::manifest::DatasetManifest;
use bodyscene::nets::{InputMode, Topology};
use bodyscene::report::{EvalReport, ParticipantBlocks};
use bodyscene::stimpipe::StimulusVersion;
use bodyscene::study::{self, ModelChoice, StudyConfig, StudyLayout};
use clap::{Args, Parser, Subcommand};
use expserver::{replay_log, AppState, Catalog, Store, StoreConfig};

/// Where `serve` appends responses and where `report` looks for them.
pub const RESPONSE_LOG: &str = "experiment/responses.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "bodyscene",
    about = "Synthetic body/background action study: data, stimuli, training, evaluation, experiment server",
    disable_version_flag = true
)]
pub struct Cli {
    /// Study configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output root shared by all stages.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset into <out>/data.
    Synth {
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Probability that a clip's background matches its action.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Derive original, body-only and background-only versions of every clip.
    Version,
    /// Check estimated flow against the generator's ground truth.
    Flow,
    /// Train models, by default every model and seed of the study plan.
    Train(Selection),
    /// Evaluate trained models one at a time into <out>/eval/<name>.
    Eval {
        #[command(flatten)]
        selection: Selection,
        /// Print only this stimulus version.
        #[arg(long, value_name = "orig|body|bg")]
        version: Option<StimulusVersion>,
    },
    /// Evaluate every planned model into <out>/report, with any recorded
    /// participant responses.
    Report,
    /// Serve the forced-choice experiment, logging to <out>/experiment.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Base seed for session plans.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct Selection {
    #[arg(long, value_name = "baseline|domainnet")]
    pub model: Option<Topology>,
    #[arg(long, value_name = "frames|frames+flows")]
    pub mode: Option<InputMode>,
    /// Training seed; every planned seed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Selection {
    /// Planned models narrowed by the flags, each with the seeds to use.
    fn resolve(&self, config: &StudyConfig) -> (Vec<ModelChoice>, Vec<u64>) {
        let mut models: Vec<ModelChoice> = match (self.model, self.mode) {
            (Some(topology), mode) => vec![ModelChoice {
                topology,
                input_mode: mode.unwrap_or(InputMode::Frames),
            }],
            (None, Some(input_mode)) => config
                .study
                .models
                .iter()
                .map(|m| ModelChoice { input_mode, ..*m })
                .collect(),
            (None, None) => config.study.models.clone(),
        };
        models.dedup();
        let seeds = self
            .seed
            .map_or_else(|| config.study.seeds.clone(), |s| vec![s]);
        (models, seeds)
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// exit status: 0 on success, 2 on a usage error, 1 on any other failure.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<StudyConfig> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => StudyConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    let layout = StudyLayout::new(&cli.out);
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::Synth { seed, rho } => {
            if let Some(s) = seed {
                config.synth.seed = *s;
            }
            if let Some(r) = rho {
                config.synth.rho = *r;
            }
            let manifest = study::run_synth(&config, &layout)?;
            writeln!(
                out,
                "wrote {} clips in {} categories to {}",
                manifest.clips.len(),
                manifest.num_classes(),
                layout.data().display()
            )?;
        }
        Command::Version => {
            let data = study::run_version(&config, &layout)?;
            writeln!(out, "wrote 3 versions of {} clips", data.clips.len())?;
        }
        Command::Flow => {
            let check = study::run_flow(&config, &layout)?;
            match check.max_epe {
                Some(e) => writeln!(out, "worst per-class mean endpoint error {e:.4} px")?,
                None => writeln!(out, "no body-interior pixels to check")?,
            }
        }
        Command::Train(sel) => {
            let data = study::load_versions(&layout)?;
            let (models, seeds) = sel.resolve(&config);
            for choice in models {
                for &seed in &seeds {
                    let name = choice.name(seed);
                    study::run_train(&config, &layout, &data, choice, seed, |r| {
                        eprintln!(
                            "{name} epoch {:>3} loss {:.4} train {:.3} val {}",
                            r.epoch,
                            r.loss,
                            r.train_accuracy,
                            r.val_accuracy.map_or("-".into(), |v| format!("{v:.3}"))
                        );
                    })?;
                    writeln!(out, "wrote {}", layout.checkpoint(&name).display())?;
                }
            }
        }
        Command::Eval { selection, version } => {
            let data = study::load_versions(&layout)?;
            let (models, seeds) = selection.resolve(&config);
            for choice in models {
                for &seed in &seeds {
                    let report = study::run_eval(&config, &layout, &data, choice, seed)?;
                    print_eval(&mut out, &report, *version)?;
                }
            }
        }
        Command::Report => {
            let data = study::load_versions(&layout)?;
            let humans = participant_blocks(&layout.root.join(RESPONSE_LOG))?;
            let report = study::run_report(&config, &layout, &data, humans.as_deref())?;
            write!(out, "{}", report.to_text())?;
        }
        Command::Serve { addr, seed } => {
            let manifest = DatasetManifest::load(&layout.data())?;
            let store_config = StoreConfig {
                n_categories: manifest.num_classes().min(8),
                seed: seed.unwrap_or(config.synth.seed),
                ..StoreConfig::default()
            };
            let log = layout.root.join(RESPONSE_LOG);
            if let Some(dir) = log.parent() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let store = Store::open(Catalog::from_manifest(&manifest), store_config, Some(log))?;
            let state = AppState {
                store: Arc::new(store),
                data_root: layout.data(),
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                writeln!(out, "listening on http://{}", listener.local_addr()?)?;
                out.flush()?;
                expserver::serve(listener, state).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn print_eval(
    out: &mut impl Write,
    report: &EvalReport,
    version: Option<StimulusVersion>,
) -> Result<()> {
    let Some(v) = version else {
        write!(out, "{}", report.to_text())?;
        return Ok(());
    };
    for row in &report.models {
        let s = row.scores(v);
        writeln!(
            out,
            "{} {}: {:.4} ({}/{} trials)",
            row.name,
            v.tag(),
            s.human_aligned,
            s.correct,
            s.trials
        )?;
    }
    Ok(())
}

/// Block accuracies of every participant who finished, if a log exists.
fn participant_blocks(log: &Path) -> Result<Option<Vec<ParticipantBlocks>>> {
    if !log.exists() {
        return Ok(None);
    }
    let done: Vec<ParticipantBlocks> = replay_log(log)?
        .into_iter()
        .filter(|a| a.complete)
        .map(|a| ParticipantBlocks {
            bg: a.bg,
            body: a.body,
            orig: a.orig,
        })
        .collect();
    if done.is_empty() {
        eprintln!("note: {} holds no completed sessions", log.display());
        return Ok(None);
    }
    Ok(Some(done))
}
