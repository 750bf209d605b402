use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use signspot::corpus::{load_manifest, load_manifest_lenient, CorpusManifest, LoadedCorpus, Word};
use signspot::eval::{evaluate, Direction, EvalConfig, Protocol, Tolerance};
use signspot::model::{read_checkpoint, write_checkpoint, EmbeddingModel};
use signspot::spotter::{
    dictionary_items, embed_continuous, embed_dictionary, faux_amis, mine_annotations, spot, trim_dictionary,
    variant_traces, word_variants, yield_statistics, MinedAnnotation, WristFrame, DEFAULT_MINE_PAD_SECONDS,
    DEFAULT_MINE_THRESHOLD,
};
use signspot::synth::{generate_corpus, read_split, SynthConfig};
use signspot::trainer::{train_with_hook, Framework, TrainConfig};
use signspot::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "signspot", version, about = "Sign spotting with dictionary exemplars")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
struct Global {
    /// Corpus manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Model checkpoint (MLPW).
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Seed; overrides the one in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an embedding head.
    Train(TrainArgs),
    /// Locate a word's best match in continuous videos.
    Spot(SpotArgs),
    /// Mine new annotations from subtitle windows.
    Mine(MineArgs),
    /// Per-variant similarity curves over one video, as CSV.
    Traces(TracesArgs),
    /// Nearest cross-dictionary neighbours.
    Fauxamis(FauxAmisArgs),
    /// Start and end of wrist motion in a dictionary clip.
    Trim(TrimArgs),
    /// Retrieval, localisation or spotting metrics.
    Eval(EvalArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Corpus counts and mining yield.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum FrameworkArg {
    WatchLookup,
    WatchReadLookup,
    Infonce,
    ClassificationBaseline,
}

impl From<FrameworkArg> for Framework {
    fn from(f: FrameworkArg) -> Self {
        match f {
            FrameworkArg::WatchLookup => Framework::WatchLookup,
            FrameworkArg::WatchReadLookup => Framework::WatchReadLookup,
            FrameworkArg::Infonce => Framework::Infonce,
            FrameworkArg::ClassificationBaseline => Framework::ClassificationBaseline,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file mirroring the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
    /// Write the bags of every first-epoch batch here as JSONL.
    #[arg(long)]
    dump_bags: Option<PathBuf>,
    #[arg(long, value_enum)]
    framework: Option<FrameworkArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct SpotArgs {
    #[arg(long)]
    word: String,
    /// Restrict to one video id.
    #[arg(long)]
    video: Option<String>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[arg(long, default_value_t = DEFAULT_MINE_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MINE_PAD_SECONDS)]
    pad_seconds: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TracesArgs {
    #[arg(long)]
    word: String,
    #[arg(long)]
    video: String,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FauxAmisArgs {
    /// Manifest whose dictionary is queried.
    #[arg(long)]
    dict_a: PathBuf,
    /// Manifest whose dictionary is searched.
    #[arg(long)]
    dict_b: PathBuf,
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrimArgs {
    /// JSON array of per-frame wrist positions.
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    threshold: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Retrieval,
    Spotting,
    Localization,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    ContinuousToDictionary,
    DictionaryToContinuous,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subset {
    Seen,
    Unseen,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "continuous-to-dictionary")]
    direction: DirectionArg,
    /// Comma-separated words to query; all annotated words otherwise.
    #[arg(long, value_delimiter = ',')]
    query_words: Option<Vec<String>>,
    /// Seen/unseen split file written by `synth`; used with --subset.
    #[arg(long, requires = "subset")]
    split: Option<PathBuf>,
    #[arg(long, value_enum, requires = "split")]
    subset: Option<Subset>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = signspot::eval::DEFAULT_TEST_PAD_SECONDS)]
    pad_seconds: f64,
    #[arg(short, long, default_value_t = signspot::eval::DEFAULT_K)]
    k: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Mined annotations (JSONL) to summarise per threshold.
    #[arg(long)]
    mined: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
    thresholds: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_MINE_PAD_SECONDS)]
    pad_seconds: f64,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn json_err(path: &Path, e: serde_json::Error) -> Failure {
    Failure::Core(Error::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Failure::Usage(format!("--{flag} is required for this command")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// Parses `path` over `defaults` so that absent keys keep their defaults
/// while unknown keys are rejected.
fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> CliResult<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Core(Error::Config(format!("{}: {e}", p.display()))))
        }
        None => Ok(T::default()),
    }
}

fn print_effective<T: Serialize>(command: &str, global: &Global, config: &T) {
    #[derive(Serialize)]
    struct Effective<'a, T> {
        command: &'a str,
        global: &'a Global,
        config: &'a T,
    }
    let e = Effective {
        command,
        global,
        config,
    };
    eprintln!("effective config: {}", serde_json::to_string(&e).expect("serializable"));
}

fn load_corpus(path: &Path) -> CliResult<LoadedCorpus> {
    Ok(LoadedCorpus::load(load_manifest(path)?)?)
}

fn word(s: &str) -> CliResult<Word> {
    Word::new(s).map_err(Failure::Core)
}

fn stdout_write(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn run_train(g: &Global, a: &TrainArgs) -> CliResult<()> {
    let manifest = required(&g.manifest, "manifest")?;
    let mut cfg: TrainConfig = read_config(a.config.as_ref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.framework {
        cfg.framework = f.into();
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.confidence_threshold {
        cfg.confidence_threshold = v;
    }
    print_effective("train", g, &cfg);
    cfg.validate()?;
    let corpus = load_corpus(manifest)?;

    let mut dump_error = None;
    let (mut model, history) = match &a.dump_bags {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let mut hook = |epoch: usize, step: usize, batch: &signspot::bags::Batch, bags: &signspot::bags::BagSet| {
                if epoch != 1 || dump_error.is_some() {
                    return;
                }
                let path = dir.join(format!("epoch{epoch:03}_step{step:04}.jsonl"));
                let records = signspot::bags::dump_records(batch, bags);
                if let Err(e) = fs::write(&path, to_jsonl(&records)) {
                    dump_error = Some(io_err(&path, e));
                }
            };
            train_with_hook(&corpus, &cfg, Some(&mut hook))?
        }
        None => train_with_hook(&corpus, &cfg, None)?,
    };
    if let Some(e) = dump_error {
        return Err(e);
    }
    model.round_to_f32();
    write_checkpoint(&a.out, &model)?;
    if let Some(h) = &a.history {
        write_text(h, &to_json(&history))?;
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn load_model_and_corpus(g: &Global) -> CliResult<(EmbeddingModel, LoadedCorpus)> {
    let params = required(&g.params, "params")?;
    let manifest = required(&g.manifest, "manifest")?;
    let model = read_checkpoint(params)?;
    let corpus = load_corpus(manifest)?;
    if model.input_dim() != corpus.feature_dim {
        return Err(Failure::Core(Error::InvalidInput(format!(
            "model expects {}-d features, corpus has {}",
            model.input_dim(),
            corpus.feature_dim
        ))));
    }
    Ok((model, corpus))
}

fn run_spot(g: &Global, a: &SpotArgs) -> CliResult<()> {
    #[derive(Serialize)]
    struct Cfg<'a> {
        word: &'a str,
        video: &'a Option<String>,
        stride: usize,
    }
    print_effective(
        "spot",
        g,
        &Cfg {
            word: &a.word,
            video: &a.video,
            stride: a.stride,
        },
    );
    let (model, corpus) = load_model_and_corpus(g)?;
    let w = word(&a.word)?;
    let dict = embed_dictionary(&model, &corpus)?;
    let variants = word_variants(&corpus, &dict, &w);
    if variants.is_empty() {
        return Err(Failure::Core(Error::InvalidInput(format!("word `{w}` has no dictionary entry"))));
    }
    let videos: Vec<usize> = match &a.video {
        Some(id) => vec![corpus
            .video_index(id)
            .ok_or_else(|| Failure::Core(Error::InvalidInput(format!("unknown video `{id}`"))))?],
        None => (0..corpus.manifest.continuous.len()).collect(),
    };
    let mut results = Vec::new();
    for v in videos {
        let id = &corpus.manifest.continuous[v].id;
        let cont = embed_continuous(&model, id, &corpus.continuous[v], a.stride)?;
        if cont.len() > 0 {
            results.push(spot(&w, &variants, &cont, None)?);
        }
    }
    stdout_write(&to_jsonl(&results))
}

fn run_mine(g: &Global, a: &MineArgs) -> CliResult<()> {
    #[derive(Serialize)]
    struct Cfg {
        threshold: f64,
        pad_seconds: f64,
    }
    print_effective(
        "mine",
        g,
        &Cfg {
            threshold: a.threshold,
            pad_seconds: a.pad_seconds,
        },
    );
    let (model, corpus) = load_model_and_corpus(g)?;
    let mined = mine_annotations(&model, &corpus, a.threshold, a.pad_seconds)?;
    write_text(&a.out, &to_jsonl(&mined))?;
    log::info!("mined {} annotations into {}", mined.len(), a.out.display());
    Ok(())
}

fn run_traces(g: &Global, a: &TracesArgs) -> CliResult<()> {
    #[derive(Serialize)]
    struct Cfg<'a> {
        word: &'a str,
        video: &'a str,
        stride: usize,
    }
    print_effective(
        "traces",
        g,
        &Cfg {
            word: &a.word,
            video: &a.video,
            stride: a.stride,
        },
    );
    let (model, corpus) = load_model_and_corpus(g)?;
    let v = corpus
        .video_index(&a.video)
        .ok_or_else(|| Failure::Core(Error::InvalidInput(format!("unknown video `{}`", a.video))))?;
    let traces = variant_traces(&word(&a.word)?, &model, &corpus, &corpus.continuous[v], a.stride)?;
    match &a.out {
        Some(p) => write_text(p, &traces.to_csv()),
        None => stdout_write(&traces.to_csv()),
    }
}

fn run_fauxamis(g: &Global, a: &FauxAmisArgs) -> CliResult<()> {
    #[derive(Serialize)]
    struct Cfg<'a> {
        dict_a: &'a Path,
        dict_b: &'a Path,
        k: usize,
    }
    print_effective(
        "fauxamis",
        g,
        &Cfg {
            dict_a: &a.dict_a,
            dict_b: &a.dict_b,
            k: a.k,
        },
    );
    let model = read_checkpoint(required(&g.params, "params")?)?;
    let items = |p: &Path| -> CliResult<_> { Ok(dictionary_items(&model, &load_corpus(p)?)?) };
    let pairs = faux_amis(&items(&a.dict_a)?, &items(&a.dict_b)?, a.k)?;
    write_text(&a.out, &to_jsonl(&pairs))
}

fn run_trim(g: &Global, a: &TrimArgs) -> CliResult<()> {
    #[derive(Serialize)]
    struct Cfg<'a> {
        keypoints: &'a Path,
        threshold: f64,
    }
    print_effective(
        "trim",
        g,
        &Cfg {
            keypoints: &a.keypoints,
            threshold: a.threshold,
        },
    );
    let frames: Vec<WristFrame> = read_json(&a.keypoints)?;
    let (start_frame, end_frame) = trim_dictionary(&frames, a.threshold)?;
    #[derive(Serialize)]
    struct Out {
        start_frame: usize,
        end_frame: usize,
    }
    stdout_write(&(serde_json::to_string(&Out { start_frame, end_frame }).expect("serializable") + "\n"))
}

fn run_eval(g: &Global, a: &EvalArgs) -> CliResult<()> {
    let mut query_words: Option<BTreeSet<Word>> = match &a.query_words {
        Some(ws) => Some(ws.iter().map(|w| word(w)).collect::<CliResult<_>>()?),
        None => None,
    };
    if let (Some(split), Some(subset)) = (&a.split, a.subset) {
        let s = read_split(split)?;
        let words: BTreeSet<Word> = match subset {
            Subset::Seen => s.seen,
            Subset::Unseen => s.unseen,
        }
        .into_iter()
        .collect();
        query_words = Some(match query_words {
            Some(q) => q.intersection(&words).cloned().collect(),
            None => words,
        });
    }
    let cfg = EvalConfig {
        pad_seconds: a.pad_seconds,
        stride: a.stride,
        k: a.k,
        tolerance: Tolerance::default(),
        direction: match a.direction {
            DirectionArg::ContinuousToDictionary => Direction::ContinuousToDictionary,
            DirectionArg::DictionaryToContinuous => Direction::DictionaryToContinuous,
        },
        query_words,
        ..EvalConfig::default()
    };
    let protocol = match a.protocol {
        ProtocolArg::Retrieval => Protocol::Retrieval,
        ProtocolArg::Spotting => Protocol::Spotting,
        ProtocolArg::Localization => Protocol::Localization,
    };
    #[derive(Serialize)]
    struct Cfg<'a> {
        protocol: Protocol,
        eval: &'a EvalConfig,
    }
    print_effective("eval", g, &Cfg { protocol, eval: &cfg });
    let (model, corpus) = load_model_and_corpus(g)?;
    let metrics = evaluate(&model, &corpus, protocol, &cfg)?;
    write_text(&a.out, &to_json(&metrics))
}

fn run_synth(g: &Global, a: &SynthArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = read_config(a.config.as_ref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    print_effective("synth", g, &cfg);
    let out = generate_corpus(&cfg, &a.out)?;
    log::info!(
        "wrote {} and {} ({} plants)",
        out.manifest_path.display(),
        out.test_manifest_path.display(),
        out.plants.len()
    );
    Ok(())
}

fn run_stats(g: &Global, a: &StatsArgs) -> CliResult<()> {
    #[derive(Serialize)]
    struct Cfg<'a> {
        mined: &'a Option<PathBuf>,
        thresholds: &'a [f64],
        pad_seconds: f64,
    }
    print_effective(
        "stats",
        g,
        &Cfg {
            mined: &a.mined,
            thresholds: &a.thresholds,
            pad_seconds: a.pad_seconds,
        },
    );
    let path = required(&g.manifest, "manifest")?;
    let (manifest, warnings) = load_manifest_lenient(path)?;
    for w in &warnings {
        log::warn!("skipped: {w}");
    }
    #[derive(Serialize)]
    struct Stats {
        vocabulary: usize,
        continuous: usize,
        annotations: usize,
        annotated_words: usize,
        dictionary: usize,
        dictionary_words: usize,
        skipped_records: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        yield_statistics: Option<Vec<signspot::spotter::YieldStats>>,
    }
    let yields = match &a.mined {
        Some(p) => Some(yield_statistics(&read_mined(p)?, &manifest, &a.thresholds, a.pad_seconds)),
        None => None,
    };
    let stats = Stats {
        vocabulary: manifest.vocabulary.words.len(),
        continuous: manifest.continuous.len(),
        annotations: manifest.continuous.iter().map(|s| s.annotations.len()).sum(),
        annotated_words: annotated_words(&manifest),
        dictionary: manifest.dictionary.len(),
        dictionary_words: manifest.dictionary.iter().map(|d| &d.word).collect::<BTreeSet<_>>().len(),
        skipped_records: warnings.len(),
        yield_statistics: yields,
    };
    stdout_write(&to_json(&stats))
}

fn annotated_words(m: &CorpusManifest) -> usize {
    m.continuous
        .iter()
        .flat_map(|s| s.annotations.iter().map(|a| &a.word))
        .collect::<BTreeSet<_>>()
        .len()
}

fn read_mined(path: &Path) -> CliResult<Vec<MinedAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| json_err(path, e)))
        .collect()
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train(a) => run_train(g, a),
        Command::Spot(a) => run_spot(g, a),
        Command::Mine(a) => run_mine(g, a),
        Command::Traces(a) => run_traces(g, a),
        Command::Fauxamis(a) => run_fauxamis(g, a),
        Command::Trim(a) => run_trim(g, a),
        Command::Eval(a) => run_eval(g, a),
        Command::Synth(a) => run_synth(g, a),
        Command::Stats(a) => run_stats(g, a),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .init();
    if let Some(t) = cli.global.threads {
        if t < 1 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
