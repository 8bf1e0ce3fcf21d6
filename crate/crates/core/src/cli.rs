//! Command-line front end. Every command is a pure function of its inputs
//! and seed; output goes to `--out` or the given writer.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::decoder::Geometry;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalQuery, MetricsReport};
use crate::kg::{generate_toy_kg, MultiViewKg, ViewId};
use crate::model::Ablation;
use crate::protocol::unobserved_view_protocol;
use crate::query::{
    read_queries, sample_queries, write_queries, ConstraintPolicy, Query, StructureTag,
};
use crate::train::{monitor_slice, train_on, training_pool, Monitor};

#[derive(Debug, Parser)]
#[command(name = "mvkg", version, about = "Logical query answering over multi-view knowledge graphs")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// Quadruple TSV file.
    #[arg(long, global = true)]
    pub kg: Option<PathBuf>,
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub geometry: Option<Geometry>,
    #[arg(long, global = true)]
    pub ablation: Option<Ablation>,
    /// Negatives per positive.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Embedding dimension.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print `#entities #relation-types #facts #views` for a KG.
    Ingest,
    /// Write a synthetic KG as TSV.
    GenToy {
        #[arg(long, default_value_t = 100)]
        entities: usize,
        #[arg(long, default_value_t = 5)]
        relations: usize,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long, default_value_t = 667)]
        facts_per_view: usize,
    },
    /// Sample queries with ground-truth answers as JSON lines.
    Sample {
        /// Comma-separated `tag=count` pairs, e.g. `1p=100,2i=50`.
        #[arg(long, default_value = "1p=100,2p=100,2i=100,3i=100")]
        counts: String,
        /// Constraint policy; defaults to equal for chains, wildcard otherwise.
        #[arg(long)]
        policy: Option<ConstraintPolicy>,
    },
    /// Train a model, writing a checkpoint and metrics JSON lines.
    Train,
    /// Score a query file against a checkpoint.
    Eval {
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Print the top answers of every query as JSON lines.
    Answer {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train before a pivot view and evaluate each later view.
    Protocol {
        #[arg(long)]
        pivot: Option<usize>,
    },
}

/// Parses arguments and runs the command, printing to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(stdout, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let config = resolve(&cli.common, &cli.command)?;
    execute(&cli.command, &config, stdout)
}

/// Defaults, then the config file, then flags.
pub fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let flags: [(&str, Option<String>); 10] = [
        ("kg", common.kg.as_ref().map(|p| p.display().to_string())),
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("checkpoint", common.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("geometry", common.geometry.map(|v| v.to_string())),
        ("ablation", common.ablation.map(|v| v.to_string())),
        ("k", common.k.map(|v| v.to_string())),
        ("d", common.d.map(|v| v.to_string())),
        ("steps", common.steps.map(|v| v.to_string())),
        (
            "queries",
            match command {
                Command::Eval { queries } | Command::Answer { queries, .. } => {
                    queries.as_ref().map(|p| p.display().to_string())
                }
                _ => None,
            },
        ),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, &v)?;
        }
    }
    match command {
        Command::Answer { n: Some(n), .. } => config.top_n = *n,
        Command::Protocol { pivot: Some(p) } => config.pivot = Some(*p),
        _ => {}
    }
    Ok(config)
}

fn output(path: Option<&Path>, stdout: &mut dyn Write, f: &mut dyn FnMut(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => f(stdout),
    }
}

fn load_kg(config: &RunConfig) -> Result<MultiViewKg> {
    MultiViewKg::load(config.require(&config.kg, "kg")?)
}

fn load_query_file(path: &Path) -> Result<Vec<Query>> {
    read_queries(BufReader::new(File::open(path)?))
}

/// `1p=100,2i=50` into tag counts.
pub fn parse_counts(text: &str) -> Result<Vec<(StructureTag, usize)>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (tag, n) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("count {pair:?} is not tag=count")))?;
            let n = n
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("count {pair:?} is not a number")))?;
            Ok((tag.trim().parse()?, n))
        })
        .collect()
}

/// Fifty queries of every shape under the default policies.
fn default_eval_queries(kg: &MultiViewKg, seed: u64) -> Result<Vec<Query>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let mut out = Vec::new();
    for tag in StructureTag::ALL {
        out.extend(sample_queries(kg, tag, ConstraintPolicy::default_for(tag), 50, &mut rng)?);
    }
    Ok(out)
}

fn write_json_line(w: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

pub fn execute(command: &Command, config: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let seed = config.training.seed;
    let out = config.out.as_deref();
    match command {
        Command::Ingest => {
            let kg = load_kg(config)?;
            output(out, stdout, &mut |w| Ok(writeln!(w, "{}", kg.stats())?))
        }
        Command::GenToy {
            entities,
            relations,
            views,
            facts_per_view,
        } => {
            let kg = generate_toy_kg(*entities, *relations, *views, *facts_per_view, seed)?;
            output(out, stdout, &mut |w| kg.write_tsv(w))
        }
        Command::Sample { counts, policy } => {
            let kg = load_kg(config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut queries = Vec::new();
            for (tag, n) in parse_counts(counts)? {
                let p = policy.unwrap_or(ConstraintPolicy::default_for(tag));
                queries.extend(sample_queries(&kg, tag, p, n, &mut rng)?);
            }
            output(out, stdout, &mut |w| write_queries(w, &queries))
        }
        Command::Train => {
            let kg = load_kg(config)?;
            let ckpt = config.require(&config.checkpoint, "checkpoint")?;
            let cfg = &config.training;
            cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let pool = training_pool(&kg, cfg.pool_per_structure, cfg.k, &mut rng)?;
            let monitor = Monitor {
                kg: &kg,
                queries: monitor_slice(&pool, cfg.monitor_per_structure),
                options: EvalOptions {
                    view_k: config.view_k,
                    ..EvalOptions::default()
                },
            };
            let mut outcome = None;
            output(out, stdout, &mut |w| {
                let mut failed = None;
                let result = train_on(&kg, cfg, &pool, Some(&monitor), &mut |r| {
                    if failed.is_none() {
                        failed = write_json_line(w, r).err();
                    }
                })?;
                if let Some(e) = failed {
                    return Err(e);
                }
                outcome = Some(result);
                Ok(())
            })?;
            let outcome = outcome.expect("training ran");
            save_model(&outcome.model, ckpt)
        }
        Command::Eval { .. } => {
            let kg = load_kg(config)?;
            let model = load_model(config.require(&config.checkpoint, "checkpoint")?, &kg)?;
            let queries = match &config.queries {
                Some(p) => load_query_file(p)?,
                None => default_eval_queries(&kg, seed)?,
            };
            let queries: Vec<EvalQuery> = queries.into_iter().map(EvalQuery::all).collect();
            let options = EvalOptions {
                view_k: config.view_k,
                ..EvalOptions::default()
            };
            let report = evaluate(&model, &kg, &queries, &options, None)?;
            output(out, stdout, &mut |w| {
                serde_json::to_writer_pretty(&mut *w, &eval_document(&report))?;
                Ok(writeln!(w)?)
            })
        }
        Command::Answer { .. } => {
            let kg = load_kg(config)?;
            let model = load_model(config.require(&config.checkpoint, "checkpoint")?, &kg)?;
            let queries = load_query_file(config.require(&config.queries, "queries")?)?;
            let ctx = model.context(&kg)?;
            output(out, stdout, &mut |w| {
                for (i, q) in queries.iter().enumerate() {
                    for a in model.rank_answers(&ctx, q, config.top_n)? {
                        let label = kg.entities().label(a.entity.0).unwrap_or_default();
                        write_json_line(
                            w,
                            &serde_json::json!({
                                "query": i,
                                "entity": label,
                                "sim_r": a.sim_r,
                                "sim_theta": a.sim_theta,
                                "sim": a.sim,
                            }),
                        )?;
                    }
                }
                Ok(())
            })
        }
        Command::Protocol { .. } => {
            let kg = load_kg(config)?;
            let pivot = config
                .pivot
                .ok_or_else(|| Error::Config("--pivot is required".into()))?;
            let (_, reports) = unobserved_view_protocol(
                &kg,
                ViewId(pivot),
                &config.training,
                config.queries_per_view,
                None,
            )?;
            output(out, stdout, &mut |w| {
                for r in &reports {
                    write_json_line(
                        w,
                        &serde_json::json!({
                            "view": r.label,
                            "distance": r.distance,
                            "queries": r.report.queries,
                            "mrr": r.report.mrr,
                            "hit@5": r.report.hit(5),
                        }),
                    )?;
                }
                Ok(())
            })
        }
    }
}

/// Per-structure MRR and HIT@5 plus the overall metrics.
pub fn eval_document(report: &MetricsReport) -> serde_json::Value {
    let hits: BTreeMap<String, f64> = report
        .hit_at_k
        .iter()
        .map(|(k, v)| (format!("hit@{k}"), *v))
        .collect();
    serde_json::json!({
        "structures": report.table(),
        "mrr": report.mrr,
        "hits": hits,
        "view_k": report.view_k,
        "view_hit": report.view_hit_at_k,
        "queries": report.queries,
    })
}
