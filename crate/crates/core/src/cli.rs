//! Command-line front end. [`run`] returns the process exit code.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::curation_service::http::{router, system_clock, AppState, Service};
use crate::error::{Error, Result};
use crate::knowledge_graph::parse_mix;
use crate::pair_builder::TextRenderSpec;
use crate::pipeline::{Pipeline, PipelineConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "zcurate", version, about = "Training-data curation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir` from the config and ZCURATE_DATA_DIR.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Re-run a stage even when its marker matches.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker cap (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a JSONL manifest into the record store.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compute image signals and apply filter rules.
    Profile,
    /// Build the proximity graph and collapse duplicate communities.
    Dedup {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        tau_edge: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Count, rank and weight concepts over the kept pool.
    Graph {
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        prune_quantile: Option<f64>,
    },
    /// Draw the rarity-weighted training sample.
    Sample {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// e.g. `t2i=0.8,i2i=0.2`
        #[arg(long)]
        mix: Option<String>,
    },
    /// Build editing pairs from pair groups.
    Pairs {
        #[command(subcommand)]
        action: Option<PairsAction>,
    },
    /// Plan token-budgeted batches over the sample.
    Plan {
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Host the review API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Candidates to propose before serving.
        #[arg(long)]
        propose: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print record, stage and review counts.
    Stats,
}

#[derive(Debug, Subcommand)]
pub enum PairsAction {
    /// Render a synthetic text-editing pair over a stored image.
    Render {
        #[arg(long)]
        spec: PathBuf,
        /// Record id of the base image.
        #[arg(long)]
        base: String,
    },
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &global.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(j) = global.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn print(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value serializes")
    );
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let stage = match cli.command {
        Command::Ingest { input } => {
            cfg.ingest.input = input.or(cfg.ingest.input);
            Stage::Ingest
        }
        Command::Profile => Stage::Profile,
        Command::Dedup {
            k,
            gamma,
            tau_edge,
            threshold,
            seed,
        } => {
            let d = &mut cfg.dedup;
            set(&mut d.k, k);
            set(&mut d.gamma, gamma);
            set(&mut d.tau_edge, tau_edge);
            set(&mut d.threshold, threshold);
            set(&mut d.seed, seed);
            Stage::Dedup
        }
        Command::Graph {
            concepts,
            prune_quantile,
        } => {
            cfg.graph.concepts = concepts.or(cfg.graph.concepts);
            cfg.graph.prune_quantile = prune_quantile.or(cfg.graph.prune_quantile);
            Stage::Graph
        }
        Command::Sample { n, seed, mix } => {
            cfg.sample.n = n.or(cfg.sample.n);
            set(&mut cfg.sample.seed, seed);
            if let Some(m) = mix {
                cfg.sample.mix = parse_mix(&m).map_err(|e| Error::Config {
                    path: "sample.mix".into(),
                    message: e.to_string(),
                })?;
            }
            Stage::Sample
        }
        Command::Pairs {
            action: Some(PairsAction::Render { spec, base }),
        } => {
            let text =
                std::fs::read_to_string(&spec).map_err(|e| Error::Prerequisite(format!("{}: {e}", spec.display())))?;
            let spec: TextRenderSpec = serde_json::from_str(&text).map_err(|e| Error::Config {
                path: "spec".into(),
                message: e.to_string(),
            })?;
            let pipeline = Pipeline::new(cfg, cli.global.force);
            let rendered = pipeline.render_pair(&base, &spec)?;
            print(&json!({"before": rendered.before, "after": rendered.after,
                          "instruction": rendered.instruction, "pair": rendered.pair}));
            return Ok(());
        }
        Command::Pairs { action: None } => Stage::Pairs,
        Command::Plan { budget, rho, seed, out } => {
            let p = &mut cfg.plan;
            set(&mut p.budget, budget);
            set(&mut p.rho, rho);
            set(&mut p.seed, seed);
            p.out = out.or(p.out.take());
            Stage::Plan
        }
        Command::Serve { addr, propose, seed } => {
            set(&mut cfg.review.propose, propose);
            set(&mut cfg.review.seed, seed);
            cfg.validate()?;
            return serve(Pipeline::new(cfg, cli.global.force), addr);
        }
        Command::Stats => {
            print(&Pipeline::new(cfg, false).stats()?);
            return Ok(());
        }
    };
    cfg.validate()?;
    let pipeline = Pipeline::new(cfg, cli.global.force);
    let report = pipeline.run(stage)?;
    if report.skipped {
        log::info!("{} already done with this config; pass --force to re-run", report.stage);
    }
    print(&serde_json::to_value(&report)?);
    Ok(())
}

fn serve(pipeline: Pipeline, addr: SocketAddr) -> Result<()> {
    if !pipeline.is_done(Stage::Ingest) {
        return Err(Error::Prerequisite("`serve` needs `ingest` first".into()));
    }
    let mut queue = pipeline.open_review_queue()?;
    let graph = pipeline.load_concepts().ok();
    let n = pipeline.cfg.review.propose;
    if n > 0 {
        let g = graph
            .as_ref()
            .ok_or_else(|| Error::Prerequisite("proposing candidates needs `graph` first".into()))?;
        let p = pipeline.propose(&mut queue, g, n, pipeline.cfg.review.seed)?;
        if p.short {
            log::warn!("pool held only {} of {n} requested candidates", p.tasks.len());
        }
        log::info!("proposed {} review tasks", p.tasks.len());
    }
    let mut service = Service::new(queue);
    service.store = Some(pipeline.open_store()?);
    service.graph = graph;
    service.graph_path = Some(pipeline.path("graph/concepts.json"));
    service.curated_path = Some(pipeline.review_dir().join("curated.json"));
    let app = router(AppState::new(service, system_clock()));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(pipeline.cfg.workers())
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("serving review API on http://{addr}");
        axum::serve(listener, app)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))
    })
}

/// Parses `args` (program name first) and runs the command. Usage errors
/// count as config errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}
