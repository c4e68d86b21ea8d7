//! Command implementations behind the `otkt` binary.
//!
//! Every command takes parsed arguments and a writer for its report, so the
//! same code path serves the binary and the tests.

pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use otkt::autodiff::Array;
use otkt::io::{self, Checkpoint};
use otkt::ot::{self, CostMatrix, Marginals, SinkhornConfig};
use otkt::probe;
use otkt::synthdata::{gen_corpus, Corpus, Split};
use otkt::training::{self, EpochMetrics, Mode, Model};

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn invalid_mode(given: &str) -> String {
    let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
    format!("invalid mode `{given}`; valid modes: {}", valid.join(", "))
}

#[derive(Debug, Parser)]
#[command(name = "otkt", version, about = "Optimal-transport knowledge transfer for CTC acoustic models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic paired corpus.
    GenData(GenDataArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Greedy-decode a split with a checkpoint and report CER.
    Eval(EvalArgs),
    /// Solve one entropic transport problem from a cost-matrix file.
    Sinkhorn(SinkhornArgs),
    /// Train all four variants on a shared corpus and tabulate CER.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Replace the config's seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Replace the transport entropy weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Replace the CTC weight of the total loss.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus directory (default: the config's corpus_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// baseline, adapter-ctc, ot-no-adapter or transfer (default: the config's mode).
    #[arg(long)]
    pub mode: Option<String>,
    /// Run directory (default: <out_dir>/<mode>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corpus directory (default: the config's corpus_dir).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory; falls back to the corpus_dir of --config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// File to append the report line to (default: eval.txt next to the checkpoint).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SinkhornArgs {
    /// Whitespace-separated cost matrix, one row per line.
    #[arg(long)]
    pub cost: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: the config's out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model seeds per mode (default: the config's ablate_seeds).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Train all runs concurrently.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}").map_err(runtime)?;
                return Ok(());
            }
            return Err(CliError::Usage(e.render().to_string().trim_end().to_string()));
        }
    };
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Sinkhorn(a) => cmd_sinkhorn(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = overrides.seed_override {
        cfg.set_seed(seed);
    }
    if let Some(alpha) = overrides.alpha {
        cfg.hp.alpha = alpha;
    }
    if let Some(lambda) = overrides.lambda {
        cfg.hp.lambda = lambda;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn cmd_gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.corpus_dir.clone());
    let corpus = gen_corpus(&cfg.corpus).map_err(|e| CliError::Config(e.to_string()))?;
    io::write_corpus(&dir, &cfg.corpus, &corpus).map_err(runtime)?;
    writeln!(
        out,
        "wrote {} train, {} dev, {} test utterances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        dir.display()
    )
    .map_err(runtime)
}

/// Reads a corpus directory and sets the encoder's input and output sizes
/// from what is on disk.
pub fn load_corpus(dir: &Path, cfg: &mut RunConfig) -> Result<Corpus, CliError> {
    if !dir.join(io::CORPUS_META).is_file() {
        return Err(CliError::Runtime(format!(
            "no corpus at {} (run `otkt gen-data` first)",
            dir.display()
        )));
    }
    let corpus = io::read_corpus(dir).map_err(runtime)?;
    cfg.encoder.vocab_size = io::read_tokenizer(dir).map_err(runtime)?.vocab_size();
    if let Some(first) = corpus.train.first() {
        cfg.encoder.feature_dim = first.features.ncols();
    }
    Ok(corpus)
}

pub const METRICS_FILE: &str = "metrics.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_COLUMNS: &str = "# epoch mode ctc align eot total dev_cer lr";

pub fn metrics_line(m: &EpochMetrics) -> String {
    format!(
        "{} {} {} {} {} {} {} {}",
        m.epoch, m.mode, m.train.ctc, m.train.align, m.train.eot, m.train.total, m.dev_cer, m.lr
    )
}

fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

/// Trains one mode and writes the metrics file, the checkpoints of the
/// averaging window and the averaged `final.ckpt` into `run_dir`.
pub fn train_run(
    cfg: &RunConfig,
    mode: Mode,
    corpus: &Corpus,
    run_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<RunSummary, CliError> {
    fs::create_dir_all(run_dir).map_err(write_err(run_dir))?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).map_err(write_err(&metrics_path))?;
    writeln!(metrics, "# otkt metrics generated unix={}", timestamp()).map_err(write_err(&metrics_path))?;
    writeln!(metrics, "{METRICS_COLUMNS}").map_err(write_err(&metrics_path))?;

    let model = Model::new(&cfg.encoder, cfg.hp.seed).map_err(runtime)?;
    let use_adapter = mode.uses_adapter();
    let window = cfg.hp.average_last;
    let mut failure = None;
    let outcome = training::train(model, corpus, &cfg.hp, mode, |m, student| {
        if failure.is_some() {
            return;
        }
        let line = metrics_line(m);
        progress(&line);
        let result = writeln!(metrics, "{line}").map_err(write_err(&metrics_path)).and_then(|()| {
            let ckpt = Checkpoint {
                student: student.clone(),
                use_adapter,
            };
            io::save_checkpoint(&epoch_checkpoint(run_dir, m.epoch), &ckpt).map_err(runtime)?;
            if m.epoch > window {
                let stale = epoch_checkpoint(run_dir, m.epoch - window);
                fs::remove_file(&stale).map_err(write_err(&stale))?;
            }
            Ok(())
        });
        failure = result.err();
    })
    .map_err(runtime)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let checkpoint = Checkpoint {
        student: outcome.model.student,
        use_adapter,
    };
    io::save_checkpoint(&run_dir.join(FINAL_CHECKPOINT), &checkpoint).map_err(runtime)?;
    Ok(RunSummary {
        mode,
        seed: cfg.hp.seed,
        history: outcome.history,
        checkpoint,
    })
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config, &args.overrides)?;
    let mode = match &args.mode {
        Some(s) => Mode::parse(s).ok_or_else(|| CliError::Usage(invalid_mode(s)))?,
        None => cfg.mode,
    };
    let corpus_dir = args.corpus.clone().unwrap_or_else(|| cfg.corpus_dir.clone());
    let corpus = load_corpus(&corpus_dir, &mut cfg)?;
    let run_dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.join(mode.name()));
    writeln!(out, "{METRICS_COLUMNS}").map_err(runtime)?;
    let mut echo_err = None;
    train_run(&cfg, mode, &corpus, &run_dir, |line| {
        if let Err(e) = writeln!(out, "{line}") {
            echo_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = echo_err {
        return Err(runtime(e));
    }
    writeln!(out, "final checkpoint: {}", run_dir.join(FINAL_CHECKPOINT).display()).map_err(runtime)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let split = Split::parse(&args.split)
        .ok_or_else(|| CliError::Usage(format!("invalid split `{}`; valid splits: train, dev, test", args.split)))?;
    let corpus_dir = match (&args.corpus, &args.config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(cfg)) => RunConfig::load(cfg)?.corpus_dir,
        (None, None) => return Err(CliError::Usage("eval needs --corpus or --config".into())),
    };
    let checkpoint = io::load_checkpoint(&args.checkpoint).map_err(runtime)?;
    if !corpus_dir.join(io::CORPUS_META).is_file() {
        return Err(CliError::Runtime(format!("no corpus at {}", corpus_dir.display())));
    }
    let utterances = io::read_split(&corpus_dir, split).map_err(runtime)?;

    let before = probe::snapshot();
    let report = training::evaluate(&checkpoint.student, checkpoint.use_adapter, &utterances).map_err(runtime)?;
    let counters = probe::snapshot().since(&before);

    let line = format!(
        "checkpoint={} split={} utterances={} edits={} ref_chars={} cer={:.6} sinkhorn_iterations={} teacher_passes={}",
        args.checkpoint.display(),
        split.name(),
        report.utterances,
        report.edits,
        report.reference_chars,
        report.cer(),
        counters.sinkhorn_iterations,
        counters.teacher_passes
    );
    let report_path = args.report.clone().unwrap_or_else(|| {
        args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval.txt")
    });
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&report_path)
        .map_err(write_err(&report_path))?;
    writeln!(file, "{line}").map_err(write_err(&report_path))?;
    writeln!(out, "{line}").map_err(runtime)
}

/// Parses a whitespace-separated matrix; `#` starts a comment.
pub fn parse_cost_matrix(text: &str) -> Result<Array, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let row = content
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("line {}: invalid number `{tok}`", n + 1))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(format!(
                    "line {}: expected {} values, found {}",
                    n + 1,
                    first.len(),
                    row.len()
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("empty cost matrix".into());
    }
    let cols = rows[0].len();
    Array::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| e.to_string())
}

pub fn cmd_sinkhorn(args: &SinkhornArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.cost)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.cost.display())))?;
    let cost = parse_cost_matrix(&text).map_err(|e| CliError::Usage(format!("{}: {e}", args.cost.display())))?;
    let (rows, cols) = cost.dim();
    let cfg = SinkhornConfig {
        alpha: args.alpha,
        max_iter: args.max_iter,
        tol: args.tol,
    };
    let result = ot::sinkhorn(&CostMatrix(cost), &Marginals::uniform(rows, cols), &cfg)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut text = String::from("gamma:\n");
    for row in result.coupling.gamma.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    text.push_str(&format!(
        "transport_cost={}\nentropy={}\neot_loss={}\niterations={}\nconverged={}\n",
        result.transport_cost, result.entropy, result.eot_loss, result.iterations, result.converged
    ));
    out.write_all(text.as_bytes()).map_err(runtime)
}

/// SHA-256 over the corpus description, every manifest and every feature
/// file, in manifest order.
pub fn corpus_digest(dir: &Path) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    let mut feed = |rel: &str| -> Result<(), CliError> {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(write_err(&path))?;
        hasher.update(rel.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        Ok(())
    };
    feed(io::CORPUS_META)?;
    for split in Split::ALL {
        let manifest = format!("{}/{}", split.name(), io::MANIFEST);
        feed(&manifest)?;
        let text = fs::read_to_string(dir.join(&manifest)).map_err(runtime)?;
        for line in text.lines() {
            let id = line.split('\t').next().unwrap_or("");
            feed(&format!("{}/{id}.arr", split.name()))?;
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    /// Per-seed CER, in seed order.
    pub dev: Vec<f64>,
    pub test: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationRow {
    pub fn median_dev(&self) -> f64 {
        median(&self.dev)
    }

    pub fn median_test(&self) -> f64 {
        median(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub corpus_sha256: String,
    pub seeds: Vec<u64>,
    /// One row per mode, in [`Mode::ALL`] order.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: Mode) -> &AblationRow {
        self.rows.iter().find(|r| r.mode == mode).expect("every mode has a row")
    }

    /// Header comments followed by one row per mode: label, median dev
    /// CER and median test CER, both in percent.
    pub fn render(&self, generated: u64) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!(
            "# otkt ablation generated unix={generated}\n# corpus_sha256={} seeds={}\n# model\tdev_cer_pct\ttest_cer_pct\n",
            self.corpus_sha256,
            seeds.join(",")
        );
        for row in &self.rows {
            s.push_str(&format!(
                "{}\t{:.2}\t{:.2}\n",
                row.mode.label(),
                100.0 * row.median_dev(),
                100.0 * row.median_test()
            ));
        }
        s
    }
}

/// Generates the corpus into `out/corpus`, trains every mode for every seed
/// in `seeds` on it, and evaluates the averaged models.
pub fn ablate(cfg: &RunConfig, out: &Path, seeds: &[u64], parallel: bool) -> Result<AblationReport, CliError> {
    let corpus_dir = out.join("corpus");
    let generated = gen_corpus(&cfg.corpus).map_err(|e| CliError::Config(e.to_string()))?;
    io::write_corpus(&corpus_dir, &cfg.corpus, &generated).map_err(runtime)?;
    let digest = corpus_digest(&corpus_dir)?;
    let mut cfg = cfg.clone();
    let corpus = load_corpus(&corpus_dir, &mut cfg)?;

    let jobs: Vec<(Mode, u64)> = Mode::ALL
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run_one = |&(mode, seed): &(Mode, u64)| -> Result<(f64, f64), CliError> {
        let mut run_cfg = cfg.clone();
        run_cfg.hp.seed = seed;
        let dir = out.join(mode.name()).join(format!("seed-{seed}"));
        let summary = train_run(&run_cfg, mode, &corpus, &dir, |_| {})?;
        let student = &summary.checkpoint.student;
        let dev = training::evaluate(student, mode.uses_adapter(), &corpus.dev).map_err(runtime)?;
        let test = training::evaluate(student, mode.uses_adapter(), &corpus.test).map_err(runtime)?;
        eprintln!(
            "ablate: {mode} seed {seed}: dev {:.4} test {:.4}",
            dev.cer(),
            test.cer()
        );
        Ok((dev.cer(), test.cer()))
    };
    let results: Vec<Result<(f64, f64), CliError>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.iter().map(|job| scope.spawn(move || run_one(job))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("training thread panicked".into()))))
                .collect()
        })
    } else {
        jobs.iter().map(run_one).collect()
    };

    let mut rows: Vec<AblationRow> = Mode::ALL
        .iter()
        .map(|&mode| AblationRow {
            mode,
            dev: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for ((mode, _), result) in jobs.iter().zip(results) {
        let (dev, test) = result?;
        let row = rows.iter_mut().find(|r| r.mode == *mode).expect("row per mode");
        row.dev.push(dev);
        row.test.push(test);
    }
    Ok(AblationReport {
        corpus_sha256: digest,
        seeds: seeds.to_vec(),
        rows,
    })
}

pub const ABLATION_FILE: &str = "ablation.txt";

pub fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let n = args.seeds.unwrap_or(cfg.ablate_seeds);
    if n == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|k| cfg.seed + k).collect();
    let dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let report = ablate(&cfg, &dir, &seeds, args.parallel)?;
    let text = report.render(timestamp());
    let path = dir.join(ABLATION_FILE);
    fs::write(&path, &text).map_err(write_err(&path))?;
    out.write_all(text.as_bytes()).map_err(runtime)
}
