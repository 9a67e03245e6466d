use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;

use recloop_core::config::{Config, SplitFilter};
use recloop_core::corpus::{
    ingest_interactions, load_catalog, read_interactions, select_by_difficulty, select_train_by_difficulty,
    split_leave_one_out, InteractionSequence, Split, SplitSample,
};
use recloop_core::eval::{compare_modes, evaluate_retriever, evaluate_trajectories, render_table, ComparisonRow};
use recloop_core::io::{read_jsonl, write_atomic, write_jsonl};
use recloop_core::rewards::{score_trajectory, Stage};
use recloop_core::rollout::{make_policy, run_batch, BatchEntry, EpisodeResult, Policy};
use recloop_core::Environment;
use recloop_server::api::ScoreRequest;
use recloop_server::ServerConfig;

use crate::*;

pub fn run(cli: Cli) -> Result<()> {
    let parallel = matches!(cli.command, Command::Rollout(_) | Command::Eval(_));
    let jobs = cli.jobs.or(if parallel { None } else { Some(1) });
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    let config = match &cli.config {
        Some(path) => Some(Config::load(path)?),
        None => None,
    };
    match cli.command {
        Command::Ingest(a) => ingest(a, config.unwrap_or_default()),
        Command::Split(a) => split(a),
        Command::Select(a) => select(a, require(config)?),
        Command::Serve(a) => serve(a, require(config)?),
        Command::Rollout(a) => rollout(a, require(config)?),
        Command::Eval(a) => eval(a, require(config)?),
        Command::Score(a) => score(a, require(config)?),
    }
}

fn require(config: Option<Config>) -> Result<Config> {
    config.context("no config: pass --config or set DEEPREC_CONFIG")
}

fn environment(config: &Config) -> Result<Environment> {
    Ok(Environment::from_config(config)?)
}

fn load_samples(flag: &Option<std::path::PathBuf>, config: &Config) -> Result<Vec<SplitSample>> {
    let path = match flag {
        Some(p) => p.as_path(),
        None => Config::require(&config.corpus.samples, "corpus.samples")?,
    };
    Ok(read_jsonl(path)?)
}

fn ingest(a: IngestArgs, config: Config) -> Result<()> {
    let mut params = config.ingest;
    params.min_count = a.min_count.unwrap_or(params.min_count);
    params.min_rating = a.min_rating.unwrap_or(params.min_rating);
    params.max_len = a.max_len.unwrap_or(params.max_len);
    let catalog = load_catalog(&a.items)?;
    let raw = read_interactions(&a.interactions)?;
    let (sequences, report) = ingest_interactions(&raw, &catalog, &params);
    std::fs::create_dir_all(&a.out).with_context(|| format!("{}", a.out.display()))?;
    write_jsonl(&a.out.join("items.jsonl"), catalog.items())?;
    write_jsonl(&a.out.join("sequences.jsonl"), &sequences)?;
    write_atomic(
        &a.out.join("ingest_report.json"),
        format!("{}\n", serde_json::to_string_pretty(&report)?).as_bytes(),
    )?;
    info!(
        "{} users, {} items, {} interactions ({} raw records)",
        report.users, report.items, report.interactions, report.raw_records
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let sequences: Vec<InteractionSequence> = read_jsonl(&a.sequences)?;
    let samples = split_leave_one_out(&sequences);
    write_jsonl(&a.out, &samples)?;
    let count = |s: Split| samples.iter().filter(|x| x.split == s).count();
    info!(
        "{} train, {} valid, {} test samples",
        count(Split::Train),
        count(Split::Valid),
        count(Split::Test)
    );
    Ok(())
}

fn select(a: SelectArgs, config: Config) -> Result<()> {
    let env = environment(&config)?;
    let samples = load_samples(&a.samples, &config)?;
    let max_rank = a.max_rank.unwrap_or(config.select.max_rank);
    let kept = if a.all_splits || !config.select.train_only {
        select_by_difficulty(&samples, env.retriever(), max_rank)?
    } else {
        select_train_by_difficulty(&samples, env.retriever(), max_rank)?
    };
    write_jsonl(&a.out, &kept)?;
    info!("kept {} of {} samples at max rank {max_rank}", kept.len(), samples.len());
    Ok(())
}

fn serve(a: ServeArgs, config: Config) -> Result<()> {
    let env = Arc::new(environment(&config)?);
    let port = a.port.unwrap_or(config.server.port);
    let addr: SocketAddr = format!("{}:{port}", a.host)
        .parse()
        .with_context(|| format!("bad listen address {}:{port}", a.host))?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("bind {addr}"))?;
        info!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        };
        recloop_server::serve(listener, env, ServerConfig::from_section(&config.server), shutdown).await?;
        Ok(())
    })
}

/// Environment and samples for a batch, with flag overrides applied.
fn batch_inputs(b: &BatchArgs, config: &Config) -> Result<(Environment, Vec<SplitSample>, usize)> {
    let mut env = environment(config)?;
    if let Some(seed) = b.seed {
        env.rollout.seed = seed;
    }
    let filter = match b.split {
        Some(SplitChoice::Train) => SplitFilter::Train,
        Some(SplitChoice::Valid) => SplitFilter::Valid,
        Some(SplitChoice::Test) => SplitFilter::Test,
        Some(SplitChoice::All) => SplitFilter::All,
        None => config.batch.split,
    };
    let mut samples: Vec<SplitSample> = load_samples(&b.samples, config)?
        .into_iter()
        .filter(|s| filter.admits(s.split))
        .collect();
    if let Some(n) = b.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        bail!("no samples selected");
    }
    let rollouts = b.rollouts.unwrap_or(config.batch.rollouts);
    if rollouts == 0 {
        bail!("--rollouts must be at least 1");
    }
    Ok((env, samples, rollouts))
}

fn rollout(a: RolloutArgs, config: Config) -> Result<()> {
    let (env, samples, rollouts) = batch_inputs(&a.batch, &config)?;
    let policy: Arc<dyn Policy> = make_policy(&a.policy)?;
    let batch = run_batch(policy.as_ref(), &env, &samples, rollouts);
    write_jsonl(&a.out, &batch)?;
    let failed = batch.iter().filter(|e| e.error.is_some()).count();
    let results: Vec<&EpisodeResult> = batch.iter().filter_map(|e| e.result.as_ref()).collect();
    let mean = results.iter().map(|r| r.rewards.stage_total).sum::<f64>() / results.len().max(1) as f64;
    info!("{} episodes, {failed} failed, mean reward {mean:.4}", batch.len());
    Ok(())
}

fn eval(a: EvalArgs, config: Config) -> Result<()> {
    let ks = a.k.clone().unwrap_or_else(|| config.eval.ks.clone());
    if ks.is_empty() || ks.contains(&0) {
        bail!("--k needs positive cutoffs");
    }
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for path in &a.batch_file {
        let batch: Vec<BatchEntry> = read_jsonl(path)?;
        let failed_episodes = batch.iter().filter(|e| e.result.is_none()).count();
        let results: Vec<EpisodeResult> = batch.into_iter().filter_map(|e| e.result).collect();
        rows.push(ComparisonRow {
            policy: path.display().to_string(),
            report: evaluate_trajectories(&results, &ks),
            failed_episodes,
        });
    }
    if !a.policy.is_empty() || a.batch_file.is_empty() {
        let (env, samples, rollouts) = batch_inputs(&a.batch, &config)?;
        if a.policy.is_empty() {
            rows.push(ComparisonRow {
                policy: "history".into(),
                report: evaluate_retriever(env.retriever(), &samples, &ks)?,
                failed_episodes: 0,
            });
        } else {
            let policies = a
                .policy
                .iter()
                .map(|spec| Ok((spec.clone(), make_policy(spec)?)))
                .collect::<Result<Vec<_>>>()?;
            rows.extend(compare_modes(&policies, &env, &samples, rollouts, &ks));
        }
    }
    let table: Vec<(String, &recloop_core::eval::MetricReport)> =
        rows.iter().map(|r| (r.policy.clone(), &r.report)).collect();
    print!("{}", render_table(&table, &ks));
    if let Some(out) = &a.out {
        write_jsonl(out, &rows)?;
    }
    Ok(())
}

/// Components in breakdown order as one flat JSON object.
pub fn flat_record(pairs: &[(&str, f64)]) -> Result<String> {
    let fields = pairs
        .iter()
        .map(|(k, v)| Ok(format!("\"{k}\":{}", serde_json::to_string(v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(format!("{{{}}}", fields.join(",")))
}

fn score(a: ScoreArgs, config: Config) -> Result<()> {
    let env = environment(&config)?;
    let text = std::fs::read_to_string(&a.input).with_context(|| a.input.display().to_string())?;
    let req: ScoreRequest = serde_json::from_str(&text).with_context(|| a.input.display().to_string())?;
    let mut rewards = env.rewards;
    if let Some(stage) = req.stage {
        rewards.stage = stage;
    }
    match a.stage {
        Some(StageChoice::ColdStart) => rewards.stage = Stage::ColdStart,
        Some(StageChoice::Recommendation) => rewards.stage = Stage::Recommendation,
        None => {}
    }
    let t = &req.trajectory;
    let breakdown = score_trajectory(&t.trajectory, &t.format, req.label, env.retriever(), &rewards)?;
    println!("{}", flat_record(&breakdown.components())?);
    Ok(())
}
