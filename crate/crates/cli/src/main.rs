//! `fsre`: run few-shot relation extraction experiments from the shell.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 backend error,
//! 4 data error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use fsre_core::backend::{clear_cache, inspect_cache};
use fsre_core::baselines::TextMode;
use fsre_core::config::{BackendKind, ConfigError, Method, RunConfig};
use fsre_core::corpus::load_catalog;
use fsre_core::pipeline::{offline_backend, rebuild_report, Pipeline, PipelineError, REPORT_FILE};
use fsre_core::prompting::DemoOrder;
use fsre_core::{RunReport, SeedSet};

#[derive(Parser)]
#[command(name = "fsre", version, about = "Few-shot relation extraction with in-context learning")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every episode of every base seed and write report, records and manifest.
    Run {
        #[command(flatten)]
        settings: Settings,
        /// Answer only from the response cache; a miss is an error.
        #[arg(long)]
        offline: bool,
        /// Print the full report JSON instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Rebuild the report of a finished run from its records and manifest.
    Report {
        /// Output directory of the run.
        dir: PathBuf,
        /// Overwrite report.json in place.
        #[arg(long)]
        write: bool,
    },
    /// Print the rendered prompt for one query.
    Render {
        #[command(flatten)]
        settings: Settings,
        /// Base seed; defaults to the first configured one.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Answer only from the response cache.
        #[arg(long)]
        offline: bool,
    },
    /// Print the episode plan of each base seed as JSON.
    Plan {
        #[command(flatten)]
        settings: Settings,
    },
    /// Check a seed exemplar file, optionally against a dataset's relations.
    ValidateSeeds {
        file: PathBuf,
        /// Require a seed for every relation of this dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        label_meta: Option<PathBuf>,
    },
    /// Inspect or clear the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Inspect {
        #[arg(long, default_value = ".fsre-cache")]
        cache_dir: PathBuf,
    },
    Clear {
        #[arg(long, default_value = ".fsre-cache")]
        cache_dir: PathBuf,
    },
}

fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Config file plus per-key overrides.
#[derive(Args)]
struct Settings {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    label_meta: Option<PathBuf>,
    #[arg(long)]
    seeds_file: Option<PathBuf>,
    #[arg(long, value_parser = serde_value::<Method>)]
    method: Option<Method>,
    #[arg(short, long)]
    n: Option<usize>,
    #[arg(short, long)]
    k: Option<usize>,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',')]
    base_seeds: Option<Vec<u64>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    output_reserve: Option<usize>,
    #[arg(long)]
    m_cap: Option<usize>,
    #[arg(long, value_parser = serde_value::<DemoOrder>)]
    demo_order: Option<DemoOrder>,
    #[arg(long, value_parser = serde_value::<BackendKind>)]
    backend: Option<BackendKind>,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    embedding_model: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    queries_per_label: Option<usize>,
    #[arg(long)]
    fixed_support: Option<bool>,
    #[arg(long, value_parser = serde_value::<TextMode>)]
    text_mode: Option<TextMode>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
}

macro_rules! overlay {
    ($cfg:ident, $s:ident; $($field:ident),*; $($opt:ident),*) => {
        $(if let Some(v) = $s.$field { $cfg.$field = v; })*
        $(if $s.$opt.is_some() { $cfg.$opt = $s.$opt; })*
    };
}

impl Settings {
    fn resolve(self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let s = self;
        overlay!(c, s;
            method, n, k, base_seeds, budget, output_reserve, demo_order, backend, model,
            embedding_model, cache_dir, output_dir, queries_per_label, fixed_support,
            text_mode, parallelism, max_retries;
            dataset, label_meta, seeds_file, m_cap, mock_script, base_url);
        c.validate()?;
        Ok(c)
    }
}

fn pipeline(config: RunConfig, offline: bool) -> Result<Pipeline, PipelineError> {
    if offline {
        let backend = offline_backend(&config);
        Pipeline::with_backend(config, backend)
    } else {
        Pipeline::from_config(config)
    }
}

fn summary(report: &RunReport) -> String {
    let mut out = format!(
        "accuracy {:.4}  mean {:.4} ± {:.4} over {} seed(s)\n",
        report.accuracy,
        report.mean,
        report.std,
        report.per_seed.len()
    );
    for s in &report.per_seed {
        out += &format!(
            "  seed {:>6}: {:.4} ({}/{} correct, {} unparsed)\n",
            s.base_seed, s.accuracy, s.correct, s.queries, s.unparsed
        );
    }
    if let Some(d) = &report.demonstrations {
        out += &format!("  demonstrations per prompt: min {} max {} mean {:.2}\n", d.min, d.max, d.mean);
    }
    out
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    let stdout = &mut std::io::stdout().lock();
    let print = |out: &mut dyn Write, text: &str| {
        out.write_all(text.as_bytes()).map_err(|source| PipelineError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
    };
    match cmd {
        Command::Run { settings, offline, json } => {
            let p = pipeline(settings.resolve()?, offline)?;
            let outcome = p.run()?;
            let stats = p.backend().stats();
            log::info!(
                "backend: {} live calls, {} cache hits, {} retries, {} tokens in, {} tokens out",
                stats.live_calls,
                stats.cache_hits,
                stats.retries,
                stats.tokens_in,
                stats.tokens_out
            );
            if json {
                print(stdout, &outcome.report.to_json())?;
            } else {
                print(stdout, &summary(&outcome.report))?;
                print(stdout, &format!("wrote {}\n", p.config().output_dir.join(REPORT_FILE).display()))?;
            }
        }
        Command::Report { dir, write } => {
            let report = rebuild_report(&dir)?;
            if write {
                let path = dir.join(REPORT_FILE);
                report.write(&path)?;
            }
            print(stdout, &report.to_json())?;
        }
        Command::Render {
            settings,
            seed,
            episode,
            query,
            offline,
        } => {
            let p = pipeline(settings.resolve()?, offline)?;
            let seed = seed.unwrap_or(p.config().base_seeds[0]);
            let episodes = p.plan(seed)?.episodes(p.catalog())?;
            let ep = episodes
                .get(episode)
                .ok_or_else(|| PipelineError::Usage(format!("episode {episode} out of range (plan has {})", episodes.len())))?;
            if p.config().method == Method::Proto {
                return Err(PipelineError::Usage("the prototype baseline has no prompts".into()));
            }
            let prepared = p.prepare_episode(ep)?;
            let (_, prompt, _) = prepared.prompts.get(query).ok_or_else(|| {
                PipelineError::Usage(format!("query {query} out of range (episode has {})", prepared.prompts.len()))
            })?;
            print(stdout, &prompt.text)?;
            print(stdout, "\n")?;
            log::info!("{} estimated tokens, {} demonstrations", prompt.est_tokens, prompt.demo_uids.len());
        }
        Command::Plan { settings } => {
            let config = settings.resolve()?;
            let p = Pipeline::with_backend(config.clone(), offline_backend(&config))?;
            let plans = config.base_seeds.iter().map(|&s| p.plan(s)).collect::<Result<Vec<_>, _>>()?;
            let text = serde_json::to_string_pretty(&plans).expect("plans serialize");
            print(stdout, &(text + "\n"))?;
        }
        Command::ValidateSeeds { file, dataset, label_meta } => {
            let seeds = SeedSet::load(&file)?;
            for seed in seeds.iter() {
                seed.to_instance()?;
            }
            if let Some(data) = dataset {
                let catalog = load_catalog(&data, label_meta.as_deref())?;
                seeds.require(&catalog.label_ids())?;
            } else if label_meta.is_some() {
                return Err(ConfigError::Invalid("--label-meta needs --dataset".into()).into());
            }
            print(stdout, &format!("{}: {} seed exemplars ok\n", file.display(), seeds.len()))?;
        }
        Command::Cache { action } => match action {
            CacheAction::Inspect { cache_dir } => {
                let s = inspect_cache(&cache_dir)?;
                print(stdout, &(serde_json::to_string_pretty(&s).expect("summary serializes") + "\n"))?;
            }
            CacheAction::Clear { cache_dir } => {
                let removed = clear_cache(&cache_dir)?;
                print(stdout, &format!("removed {removed} cache files from {}\n", cache_dir.display()))?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
