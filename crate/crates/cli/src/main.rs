use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use forge_core::archive::{read_archive, Storage};
use forge_core::dataset::registry::{implemented_ids, RECIPE_VERSION};
use forge_core::dataset::{self, BuildConfig, DatasetMeta, Prompts, SeedData};
use forge_core::logits::ChainConfig;
use forge_core::metrics::{rank_sum, MetricOptions, TrackScores};
use forge_core::parser::{AnswerRecord, ParseOptions};
use forge_core::pipeline::{
    decode_questions, evaluate, route_questions, run_merge, run_pipeline, run_quantize, AdapterRef,
    MergeStageConfig, PipelineConfig, DEFAULT_MAX_NEW,
};
use forge_core::quant::QuantConfig;
use forge_core::question::{read_jsonl, read_questions, write_jsonl};
use forge_core::router::Router;
use forge_core::task::TaskType;

/// Exit codes: 2 for bad arguments or configuration, 3 for stage failures.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn config_err(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn stage_err(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, err: err.into() }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "forge", about = "LoRA merging, int4 prep, constrained decoding and scoring at desk scale")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the name/dtype/shape table of a tensor archive.
    Inspect { path: PathBuf },
    /// Add weighted LoRA adapters onto a base archive.
    Merge {
        #[arg(long)]
        base: PathBuf,
        /// `<file>:<weight>`, repeatable; applied in the order given.
        #[arg(long = "adapter", required = true)]
        adapters: Vec<String>,
        /// Wise-ft interpolation factor applied to every adapter.
        #[arg(long = "wise-ft")]
        wise_ft: Option<f32>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Pad and group-quantize every matrix of an archive to int4.
    Quantize {
        #[arg(long, default_value_t = 128)]
        group_size: usize,
        #[arg(long)]
        symmetric: bool,
        input: PathBuf,
        output: PathBuf,
    },
    /// Assign a task type to every question.
    Route {
        questions: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Greedy-decode questions with the toy model and parse the answers.
    Decode {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
        max_new: usize,
        #[arg(long)]
        strict: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build instruction-tuning samples from seed CSVs.
    BuildDataset {
        /// Comma-separated recipe ids; defaults to every implemented recipe.
        #[arg(long, value_delimiter = ',')]
        recipes: Vec<u32>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        esci: Option<PathBuf>,
        #[arg(long)]
        reviews: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score answers against gold questions.
    Evaluate {
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        /// JSON map of system name to per-track scores, for a rank table.
        #[arg(long)]
        leaderboard: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Rank-sum table from per-track scores (`{"team": {"1": 0.8, ...}}`).
    Rank { scores: PathBuf },
    /// Run the whole pipeline from a JSON or TOML config.
    Run { config: PathBuf },
}

fn version_string() -> String {
    format!(
        "{} (recipes {RECIPE_VERSION}, prompts {}, router rules {})",
        env!("CARGO_PKG_VERSION"),
        Prompts::bundled().version,
        Router::default().version()
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_pretty<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_adapter(spec: &str) -> anyhow::Result<AdapterRef> {
    let (path, weight) = spec
        .rsplit_once(':')
        .ok_or_else(|| anyhow!("adapter `{spec}` must look like <file>:<weight>"))?;
    let weight: f32 = weight
        .parse()
        .with_context(|| format!("weight in adapter `{spec}`"))?;
    Ok(AdapterRef {
        path: path.into(),
        weight,
        lora_scale: None,
    })
}

fn inspect(path: &Path) -> CmdResult {
    let ar = read_archive(path).map_err(stage_err)?;
    let mut out = std::io::stdout().lock();
    let width = ar.entries.keys().map(String::len).max().unwrap_or(4).max(4);
    let _ = writeln!(out, "{:<width$}  {:<5}  shape", "name", "dtype");
    for (name, t) in &ar.entries {
        let extra = match t.storage() {
            Storage::Int4(q) => format!("  (group {}, original {:?})", q.group_size(), q.original_shape()),
            _ => String::new(),
        };
        let _ = writeln!(out, "{name:<width$}  {:<5}  {:?}{extra}", t.dtype().as_str(), t.shape());
    }
    for (k, v) in &ar.metadata {
        let _ = writeln!(out, "# {k} = {v}");
    }
    Ok(())
}

fn merge(base: PathBuf, adapters: &[String], wise_ft: Option<f32>, output: PathBuf) -> CmdResult {
    let adapters = adapters
        .iter()
        .map(|s| parse_adapter(s))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(config_err)?;
    let stage = MergeStageConfig {
        base,
        adapters,
        wise_ft_alpha: wise_ft,
        output,
    };
    run_merge(&stage).map_err(stage_err)?;
    log::info!("wrote {}", stage.output.display());
    Ok(())
}

fn quantize(group_size: usize, symmetric: bool, input: &Path, output: &Path) -> CmdResult {
    let config = QuantConfig {
        symmetric,
        ..QuantConfig::with_group_size(group_size)
    };
    config.validate().map_err(config_err)?;
    let reports = run_quantize(input, output, &config).map_err(stage_err)?;
    println!("{}", serde_json::to_string_pretty(&reports).expect("reports serialize"));
    Ok(())
}

fn load_router(rules: Option<&Path>) -> Result<Router, Failure> {
    match rules {
        Some(p) => Router::from_file(p).map_err(config_err),
        None => Ok(Router::default()),
    }
}

#[derive(serde::Serialize)]
struct RouteLine<'a> {
    id: &'a str,
    task_type: TaskType,
}

fn route(questions: &Path, rules: Option<&Path>, output: Option<&Path>) -> CmdResult {
    let router = load_router(rules)?;
    let qs = read_questions(questions).map_err(stage_err)?;
    let lines: Vec<RouteLine> = qs
        .iter()
        .map(|q| RouteLine {
            id: &q.id,
            task_type: router.route(q),
        })
        .collect();
    match output {
        Some(p) => write_jsonl(p, &lines).map_err(stage_err)?,
        None => {
            let mut out = std::io::stdout().lock();
            for l in &lines {
                let _ = writeln!(out, "{}", serde_json::to_string(l).expect("serializes"));
            }
        }
    }
    Ok(())
}

fn decode(
    questions: &Path,
    chain: Option<&Path>,
    seed: u64,
    max_new: usize,
    strict: bool,
    output: &Path,
) -> CmdResult {
    if max_new == 0 {
        return Err(config_err(anyhow!("--max-new must be at least 1")));
    }
    let chain = match chain {
        Some(p) => ChainConfig::from_file(p).map_err(config_err)?,
        None => ChainConfig::default(),
    };
    let mut qs = read_questions(questions).map_err(stage_err)?;
    route_questions(&Router::default(), &mut qs);
    let opts = ParseOptions {
        strict,
        ..ParseOptions::default()
    };
    let answers = decode_questions(&qs, &chain, seed, max_new, &opts).map_err(|e| Failure {
        code: e.exit_code() as u8,
        err: e.into(),
    })?;
    write_jsonl(output, &answers).map_err(stage_err)?;
    let failed = answers.iter().filter(|a| a.parsed.is_none()).count();
    log::info!("{} answers, {failed} unparsed", answers.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_dataset(
    recipes: Vec<u32>,
    seed: u64,
    esci: Option<&Path>,
    reviews: Option<&Path>,
    sessions: Option<&Path>,
    prompts: Option<&Path>,
    output: &Path,
) -> CmdResult {
    let prompts = match prompts {
        Some(p) => Prompts::from_file(p).map_err(config_err)?,
        None => Prompts::bundled(),
    };
    let data = SeedData {
        esci: esci.map(dataset::load_esci).transpose().map_err(stage_err)?,
        reviews: reviews.map(dataset::load_reviews).transpose().map_err(stage_err)?,
        sessions: sessions.map(dataset::load_sessions).transpose().map_err(stage_err)?,
    };
    let cfg = BuildConfig {
        recipes: if recipes.is_empty() { implemented_ids() } else { recipes },
        seed,
        ..BuildConfig::default()
    };
    let (samples, summary) = dataset::build_dataset(&data, &cfg, &prompts).map_err(|e| match e {
        dataset::DatasetError::UnknownRecipe(_)
        | dataset::DatasetError::RequiresGenerator(_)
        | dataset::DatasetError::SourceUnavailable(_)
        | dataset::DatasetError::MissingSeedData { .. } => config_err(e),
        other => stage_err(other),
    })?;
    dataset::emit_jsonl(&samples, output).map_err(stage_err)?;
    DatasetMeta::new(&cfg, &prompts, summary)
        .write(dataset::meta_path(output))
        .map_err(stage_err)?;
    log::info!("wrote {} samples to {}", samples.len(), output.display());
    Ok(())
}

fn evaluate_cmd(questions: &Path, answers: &Path, leaderboard: Option<&Path>, output: &Path) -> CmdResult {
    let board: Option<BTreeMap<String, TrackScores>> = leaderboard.map(read_json).transpose().map_err(config_err)?;
    let qs = read_questions(questions).map_err(stage_err)?;
    let answers: Vec<AnswerRecord> = read_jsonl(answers).map_err(stage_err)?;
    let mut report = evaluate(&qs, &answers, &MetricOptions::default()).map_err(stage_err)?;
    if let Some(board) = board {
        report.compare_with("this_run", board);
    }
    write_pretty(output, &report).map_err(stage_err)
}

fn rank(scores: &Path) -> CmdResult {
    let systems: BTreeMap<String, TrackScores> = read_json(scores).map_err(config_err)?;
    let sums = rank_sum(&systems);
    let mut rows: Vec<(&String, u32)> = sums.iter().map(|(k, v)| (k, *v)).collect();
    rows.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{:<width$}  rank_sum  tracks", "system");
    for (name, sum) in rows {
        let _ = writeln!(out, "{name:<width$}  {sum:>8}  {:>6}", systems[name].len());
    }
    Ok(())
}

fn run(config: &Path) -> CmdResult {
    let cfg = PipelineConfig::from_path(config).map_err(config_err)?;
    let run = run_pipeline(&cfg).map_err(|e| Failure {
        code: e.exit_code() as u8,
        err: e.into(),
    })?;
    println!(
        "{} questions, {:.1} questions/minute, report in {}",
        run.throughput.questions,
        run.throughput.questions_per_minute(),
        cfg.output_dir.join("report.json").display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(config_err(anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(config_err)?;
    }
    match cli.command {
        Command::Inspect { path } => inspect(&path),
        Command::Merge {
            base,
            adapters,
            wise_ft,
            output,
        } => merge(base, &adapters, wise_ft, output),
        Command::Quantize {
            group_size,
            symmetric,
            input,
            output,
        } => quantize(group_size, symmetric, &input, &output),
        Command::Route { questions, rules, output } => route(&questions, rules.as_deref(), output.as_deref()),
        Command::Decode {
            questions,
            chain,
            seed,
            max_new,
            strict,
            output,
        } => decode(&questions, chain.as_deref(), seed, max_new, strict, &output),
        Command::BuildDataset {
            recipes,
            seed,
            esci,
            reviews,
            sessions,
            prompts,
            output,
        } => build_dataset(
            recipes,
            seed,
            esci.as_deref(),
            reviews.as_deref(),
            sessions.as_deref(),
            prompts.as_deref(),
            &output,
        ),
        Command::Evaluate {
            questions,
            answers,
            leaderboard,
            output,
        } => evaluate_cmd(&questions, &answers, leaderboard.as_deref(), &output),
        Command::Rank { scores } => rank(&scores),
        Command::Run { config } => run(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = Cli::command().version(version_string()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
