use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use keyarg::clustering::{label_lookup, sweep_select, SimilarityGraph};
use keyarg::consolidation::{Label, PairId};
use keyarg::engine::{Engine, EngineConfig};
use keyarg::eventlog::Clock;
use keyarg::io::{read_corpus, read_embeddings, read_json, read_quality, read_topics, write_json};
use keyarg::model::ingest_corpus;
use keyarg::pipeline::{simulate, simulated_config, InputPaths, InputSource, RunConfig, RunDir};
use keyarg::report::{add_confusion, build_report};
use keyarg::sampling::shortlist_topics;
use keyarg::selection::{HttpSynthesisClient, LimitedClient, PromptTemplate, SelectionMethod, SynthesisClient};
use keyarg::service::{bind, serve, AppState};
use keyarg::sim::{BehaviorRates, DriverConfig, SimilarityTruth, SimulatedAnnotator, WorldConfig};

#[derive(Parser)]
#[command(name = "keyarg", version, about = "Hybrid key argument extraction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate input files and print per-corpus statistics.
    Ingest(IngestArgs),
    /// Export Phase 1 sessions of a run.
    Phase1(RunArg),
    /// Shortlist topics from a file, or export a run's topic assignments.
    Topics(TopicsArgs),
    /// Export pair labels and query statistics of a run.
    Consolidate(RunArg),
    /// Re-run the clustering sweep on a run's labels.
    Cluster(ClusterArgs),
    /// Choose cluster representatives for a run.
    Select(SelectArgs),
    /// Recompute the evaluation report, optionally against an expert list.
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline with simulated annotators.
    Simulate(SimulateArgs),
    /// Serve the annotation task API for a run.
    Serve(ServeArgs),
    /// Print a run's report.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArg {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, requires = "embedding_ids")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    embedding_ids: Option<PathBuf>,
    #[arg(long)]
    quality: Option<PathBuf>,
}

#[derive(Args)]
struct TopicsArgs {
    #[arg(long, conflicts_with = "topics")]
    run: Option<PathBuf>,
    /// Topic file to shortlist.
    #[arg(long)]
    topics: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    max_topics: usize,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated Louvain resolutions.
    #[arg(long, value_delimiter = ',')]
    louvain_grid: Option<Vec<f64>>,
    /// Largest k for spectral clustering; 0 disables it.
    #[arg(long)]
    spectral_max_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Random,
    Centroid,
    Quality,
    Prompted,
}

impl From<MethodArg> for SelectionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Random => SelectionMethod::Random,
            MethodArg::Centroid => SelectionMethod::Centroid,
            MethodArg::Quality => SelectionMethod::Quality,
            MethodArg::Prompted => SelectionMethod::Prompted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Instruction,
    Completion,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "instruction")]
    template: TemplateArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    /// JSON array of expert key arguments.
    #[arg(long, requires = "equivalence")]
    expert: Option<PathBuf>,
    /// JSON array of `[representative, expert]` pairs judged equivalent.
    #[arg(long)]
    equivalence: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EngineFlags {
    /// Phase 1 annotators.
    #[arg(long)]
    annotators: Option<usize>,
    /// Opinions per Phase 1 session.
    #[arg(long)]
    session_length: Option<usize>,
    /// Farthest-first pool size f.
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    sampler_seed: Option<u64>,
    /// Votes per similarity query v.
    #[arg(long)]
    votes: Option<usize>,
    #[arg(long)]
    topic_votes: Option<usize>,
    #[arg(long)]
    match_votes: Option<usize>,
    #[arg(long)]
    match_sample: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    louvain_grid: Option<Vec<f64>>,
    #[arg(long)]
    spectral_max_k: Option<usize>,
    #[arg(long)]
    cluster_seed: Option<u64>,
    #[arg(long, value_enum)]
    selection: Option<MethodArg>,
    #[arg(long)]
    selection_seed: Option<u64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    triples: Option<usize>,
}

impl EngineFlags {
    fn apply(&self, mut c: EngineConfig) -> EngineConfig {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            annotators => annotators,
            session_length => sampler.session_length,
            pool_size => sampler.pool_size,
            sampler_seed => sampler.seed,
            votes => similarity_votes,
            topic_votes => topic_votes,
            match_votes => match_votes,
            match_sample => match_sample,
            louvain_grid => louvain_grid,
            spectral_max_k => spectral_max_k,
            cluster_seed => cluster_seed,
            selection_seed => selection_seed,
            eval_seed => eval_seed,
            triples => triples,
        );
        if let Some(m) = self.selection {
            c.selection = m.into();
        }
        c
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Run directory; an existing one with the same config is resumed.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "sim")]
    run_id: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    opinions: usize,
    #[arg(long, default_value_t = 12)]
    clusters: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    /// Crowd workers for topic, pair and match tasks.
    #[arg(long, default_value_t = 9)]
    crowd: usize,
    /// Answer flip probability.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Rates of new, skip and already actions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.3, 0.2])]
    rates: Vec<f64>,
    /// Answer pair queries by score thresholds `s1,s2` instead of planted clusters.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    threshold: Option<Vec<f64>>,
    /// Stop after the log holds this many records.
    #[arg(long)]
    halt_after: Option<usize>,
    #[command(flatten)]
    engine: EngineFlags,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Inputs for a new run directory.
    #[arg(long, requires_all = ["embeddings", "embedding_ids", "corpus_id"])]
    corpus: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    embedding_ids: Option<PathBuf>,
    #[arg(long)]
    quality: Option<PathBuf>,
    #[arg(long)]
    topics: Option<PathBuf>,
    #[arg(long)]
    corpus_id: Option<String>,
    #[arg(long, default_value = "run")]
    run_id: String,
    #[command(flatten)]
    engine: EngineFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn print_json<T: Serialize + ?Sized>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn emit<T: Serialize + ?Sized>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => Ok(write_json(p, value)?),
        None => print_json(value),
    }
}

fn replay(run: &Path) -> Result<(RunDir, Engine)> {
    let dir = RunDir::open(run).with_context(|| format!("opening run {}", run.display()))?;
    let engine = dir.replay()?;
    Ok((dir, engine))
}

fn synthesis_client() -> Option<Box<dyn SynthesisClient>> {
    HttpSynthesisClient::from_env().map(|c| Box::new(LimitedClient::new(c, 4)) as Box<dyn SynthesisClient>)
}

fn ingest(args: IngestArgs) -> Result<()> {
    let corpus = ingest_corpus(&read_corpus(&args.corpus)?)?;
    let mut stats = BTreeMap::new();
    for id in corpus.corpus_ids() {
        stats.insert(id.to_string(), *corpus.stats(id).expect("listed corpus"));
    }
    if let (Some(m), Some(ids)) = (&args.embeddings, &args.embedding_ids) {
        let store = read_embeddings(m, ids)?;
        if let Some(o) = corpus.opinions().iter().find(|o| !store.contains(&o.id)) {
            bail!("no embedding for opinion {}", o.id);
        }
    }
    if let Some(q) = &args.quality {
        read_quality(q)?;
    }
    print_json(&stats)
}

fn topics(args: TopicsArgs) -> Result<()> {
    if let Some(path) = args.topics {
        let file = read_topics(&path)?;
        return print_json(&shortlist_topics(&file.topics, args.max_topics)?);
    }
    let Some(run) = args.run else { bail!("pass --run or --topics") };
    let (dir, engine) = replay(&run)?;
    dir.write_artifacts(&engine)?;
    let a = engine.artifacts();
    print_json(&serde_json::json!({ "shortlist": a.shortlist, "topic_vectors": a.topic_vectors }))
}

fn cluster(args: ClusterArgs) -> Result<()> {
    let (_, engine) = replay(&args.run)?;
    let Some(sched) = engine.scheduler() else { bail!("run has not reached consolidation") };
    if !sched.is_done() {
        bail!("consolidation is still running");
    }
    let config = engine.config();
    let ids: Vec<String> = engine.arguments().iter().map(|a| a.id.clone()).collect();
    let graph = SimilarityGraph::from_labels(ids.iter(), sched.records())?;
    let labels = label_lookup(sched.records());
    let grid = args.louvain_grid.unwrap_or_else(|| config.louvain_grid.clone());
    let max_k = args.spectral_max_k.unwrap_or(config.spectral_max_k);
    let spectral: Vec<usize> = (2..=graph.len().min(max_k)).collect();
    let result = sweep_select(
        &graph,
        |p: &PairId| if p.i == p.j { Some(Label::Similar) } else { labels.get(p).copied() },
        &grid,
        &spectral,
        args.seed.unwrap_or(config.cluster_seed),
    )?;
    emit(&result, args.out.as_deref())
}

fn select(args: SelectArgs) -> Result<()> {
    let (_, engine) = replay(&args.run)?;
    let Some(clustering) = engine.clustering() else { bail!("run has no clustering yet") };
    let config = engine.config();
    let method = args.method.map_or(config.selection, SelectionMethod::from);
    let template = match args.template {
        TemplateArg::Instruction => PromptTemplate::Instruction,
        TemplateArg::Completion => PromptTemplate::Completion,
    };
    let client = synthesis_client();
    let reps = engine.choose_representatives(
        &clustering.best.clusters,
        method,
        args.seed.unwrap_or(config.selection_seed),
        template,
        client.as_deref(),
        false,
    )?;
    emit(&reps, args.out.as_deref())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (dir, engine) = replay(&args.run)?;
    let mut report = build_report(&engine);
    if let (Some(expert), Some(eq)) = (&args.expert, &args.equivalence) {
        let list_e: Vec<String> = read_json(expert)?;
        let pairs: Vec<(String, String)> = read_json(eq)?;
        let list_h: Vec<String> = engine.representatives().iter().map(|r| r.text.clone()).collect();
        add_confusion(&mut report, &list_h, &list_e, &pairs)?;
    }
    write_json(&dir.root().join("report.json"), &report)?;
    std::fs::write(dir.root().join("report.txt"), report.render_text())?;
    print!("{}", report.render_text());
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let world = WorldConfig {
        corpus_id: "synthetic".into(),
        opinions: args.opinions,
        clusters: args.clusters,
        dim: args.dim,
        noise: args.noise,
        seed: args.seed,
        ..WorldConfig::default()
    };
    let similarity = match args.threshold.as_deref() {
        Some([s1, s2]) => SimilarityTruth::Threshold { s1: *s1, s2: *s2 },
        Some(_) => bail!("--threshold takes two values"),
        None => SimilarityTruth::Planted,
    };
    let annotator = SimulatedAnnotator {
        seed: args.seed,
        epsilon: args.epsilon,
        rates: BehaviorRates { new: args.rates[0], skip: args.rates[1], already: args.rates[2] },
        similarity,
        ..SimulatedAnnotator::default()
    };
    let base = EngineConfig {
        sampler: keyarg::sampling::SamplerConfig { seed: args.seed, ..Default::default() },
        cluster_seed: args.seed,
        selection_seed: args.seed,
        eval_seed: args.seed,
        ..EngineConfig::default()
    };
    let config = simulated_config(
        &args.run_id,
        world,
        DriverConfig { crowd: args.crowd, annotator },
        args.engine.apply(base),
    );
    match simulate(&args.out, config, args.halt_after) {
        Ok(engine) => {
            eprintln!("run {} finished in phase {}", engine.config().run_id, engine.phase().as_str());
            if let Some(r) = engine.report() {
                print!("{}", r.render_text());
            }
            Ok(())
        }
        Err(e) if e.is_halt() => {
            eprintln!("{e}; rerun the same command to resume");
            std::process::exit(3);
        }
        Err(e) => Err(e.into()),
    }
}

fn run_serve(args: ServeArgs) -> Result<()> {
    let dir = if RunDir::exists(&args.run) {
        RunDir::open(&args.run)?
    } else {
        let Some(corpus) = args.corpus.clone() else {
            bail!("{} is not a run directory; pass --corpus and friends to create one", args.run.display());
        };
        let paths = InputPaths {
            corpus,
            embeddings: args.embeddings.clone().expect("required by clap"),
            embedding_ids: args.embedding_ids.clone().expect("required by clap"),
            quality: args.quality.clone(),
            topics: args.topics.clone(),
        };
        let corpus_id = args.corpus_id.clone().expect("required by clap");
        let inputs = paths.load(&corpus_id)?;
        let engine = args.engine.apply(EngineConfig { run_id: args.run_id.clone(), corpus_id, ..EngineConfig::default() });
        let config = RunConfig { engine, clock: Clock::System, source: InputSource::Files };
        RunDir::create(&args.run, config, &inputs)?
    };
    let engine = dir.open_engine(synthesis_client(), None)?;
    let state = AppState::new(engine, Some(dir.clone()));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = bind(args.addr).await?;
        tracing::info!(addr = %listener.local_addr()?, run = %dir.root().display(), "serving");
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok::<_, anyhow::Error>(())
    })
}

fn report(args: ReportArgs) -> Result<()> {
    let path = args.run.join("report.json");
    let report: keyarg::evaluation::EvalReport = if path.exists() {
        read_json(&path)?
    } else {
        let (_, engine) = replay(&args.run)?;
        build_report(&engine)
    };
    match args.format {
        Format::Text => print!("{}", report.render_text()),
        Format::Json => print_json(&report)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest(a) => ingest(a),
        Command::Phase1(a) => {
            let (dir, engine) = replay(&a.run)?;
            dir.write_artifacts(&engine)?;
            let counts: Vec<_> = engine.sessions().iter().map(|s| (s.session_id.clone(), s.counts())).collect();
            print_json(&counts)
        }
        Command::Topics(a) => topics(a),
        Command::Consolidate(a) => {
            let (dir, engine) = replay(&a.run)?;
            dir.write_artifacts(&engine)?;
            match engine.scheduler() {
                Some(s) => print_json(&s.stats()),
                None => bail!("run has not reached consolidation"),
            }
        }
        Command::Cluster(a) => cluster(a),
        Command::Select(a) => select(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Serve(a) => run_serve(a),
        Command::Report(a) => report(a),
    }
}
