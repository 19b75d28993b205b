//! `mmfast`: train, quantize, evaluate and query multi-modal classifiers.
//!
//! Flags use the single-dash style of fastText (`-input`, `-minCount`);
//! double dashes are accepted too.

use std::fs;
use std::io::{self, BufRead, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use mmfast::quantizer::append_tokens;
use mmfast::{
    evaluate, format_neighbor, grid_search, load_codebook, load_features, load_model,
    nearest_neighbors, predict, save_codebook, save_model, train_codebook, Codebook, Corpus,
    FeatureTable, Fusion, GateSide, Grid, Model, QuantizerConfig, Restrict, Split, TrainConfig,
    Vocabulary,
};

#[derive(Parser)]
#[command(name = "mmfast", version, about = "Fast linear multi-modal text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write <output>.bin
    Train(TrainArgs),
    /// Learn a product-quantization codebook from a feature file
    Quantize(QuantizeArgs),
    /// Report P@1 on a labeled corpus
    Test(TestArgs),
    /// Print the top-k labels for each line
    Predict(PredictArgs),
    /// Nearest neighbors of query words read from stdin
    Nn(NnArgs),
    /// Grid-search hyperparameters on a validation split
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Fusion: text, continuous, additive, max, gated, bilinear, bilinear_gated, discretized
    #[arg(long, default_value = "text")]
    fusion: String,
    /// Embedding size
    #[arg(long, default_value_t = 100)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    epoch: u32,
    #[arg(long, default_value_t = 4)]
    thread: usize,
    #[arg(long = "minCount", default_value_t = 1)]
    min_count: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gated fusions: which side is squashed into a gate
    #[arg(long)]
    gate: Option<GateSide>,
    /// Discretized fusion: weight of the pseudo-token bag
    #[arg(long)]
    alpha: Option<f32>,
    /// Discretized fusion: codebook used to quantize -features on the fly
    #[arg(long)]
    codebook: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output prefix; the model is written to <output>.bin
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Feature file, one whitespace-separated vector per line
    #[arg(long)]
    input: PathBuf,
    /// Codebook file to write
    #[arg(long)]
    output: PathBuf,
    #[arg(long = "pq-n", default_value_t = 4)]
    pq_n: usize,
    #[arg(long = "pq-k", default_value_t = 256)]
    pq_k: usize,
    #[arg(long = "rspq-r", default_value_t = 1)]
    rspq_r: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pseudo-token weight stored with the codebook
    #[arg(long, default_value_t = 0.1)]
    alpha: f32,
    /// Also append pseudo-tokens to this corpus (same line count as -input)
    #[arg(long, requires = "corpus_output")]
    corpus: Option<PathBuf>,
    #[arg(long = "corpus-output", requires = "corpus")]
    corpus_output: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(short, long, default_value_t = 1)]
    k: usize,
}

#[derive(Args)]
struct NnArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10)]
    topn: usize,
    /// Include pseudo-tokens among the candidates
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON object of axis -> list of values (lr, epoch, alpha, dim, gate)
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long = "valid-features")]
    valid_features: Option<PathBuf>,
    /// Retrain the winning configuration and write it to <output>.bin
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

/// Rewrite `-flag` as `--flag`, leaving negative numbers alone.
fn normalize_flags(args: impl IntoIterator<Item = String>) -> Vec<String> {
    args.into_iter()
        .map(|a| {
            let single = a.starts_with('-')
                && !a.starts_with("--")
                && a[1..].starts_with(|c: char| c.is_ascii_alphabetic())
                && a.len() > 2;
            if single {
                format!("-{}", a)
            } else {
                a
            }
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .format_target(false)
        .init();

    let cli = match Cli::try_parse_from(normalize_flags(std::env::args())) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };

    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Quantize(a) => run_quantize(a),
        Command::Test(a) => run_test(a),
        Command::Predict(a) => run_predict(a),
        Command::Nn(a) => run_nn(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn read_features(path: &Path, rows: usize) -> anyhow::Result<FeatureTable> {
    load_features(path, Some(rows)).with_context(|| format!("reading {}", path.display()))
}

fn quantize_lines(
    lines: Vec<String>,
    features: &FeatureTable,
    codebook: &Codebook,
) -> anyhow::Result<Vec<String>> {
    if features.len() != lines.len() {
        bail!("{} corpus lines but {} feature rows", lines.len(), features.len());
    }
    lines
        .iter()
        .zip(features.rows())
        .map(|(line, x)| Ok(append_tokens(line, &codebook.encode(x)?)))
        .collect()
}

/// A corpus read from disk together with the continuous features the
/// fusion consumes. Discretized models with a codebook quantize the
/// features into pseudo-tokens instead.
struct Prepared {
    lines: Vec<String>,
    features: Option<FeatureTable>,
}

fn prepare(
    fusion: Fusion,
    codebook: Option<&Codebook>,
    input: &Path,
    features: Option<&Path>,
) -> anyhow::Result<Prepared> {
    let lines = read_lines(input)?;
    let table = features
        .map(|f| read_features(f, lines.len()))
        .transpose()?;
    match (fusion.needs_features(), table, codebook) {
        (true, None, _) => bail!("fusion '{}' requires -features", fusion.name()),
        (true, Some(t), _) => Ok(Prepared {
            lines,
            features: Some(t),
        }),
        (false, Some(t), Some(cb)) => Ok(Prepared {
            lines: quantize_lines(lines, &t, cb)?,
            features: None,
        }),
        (false, Some(_), None) => bail!(
            "fusion '{}' does not take -features without a codebook",
            fusion.name()
        ),
        (false, None, _) => Ok(Prepared {
            lines,
            features: None,
        }),
    }
}

fn train_config(m: &ModelArgs, codebook: Option<&Codebook>) -> anyhow::Result<TrainConfig> {
    let alpha = match m.fusion.as_str() {
        "discretized" => m.alpha.or(codebook.map(Codebook::alpha)),
        _ => m.alpha,
    };
    if codebook.is_some() && m.fusion != "discretized" {
        bail!("-codebook only applies to discretized fusion");
    }
    let fusion = Fusion::from_parts(&m.fusion, m.gate, alpha)?;
    Ok(TrainConfig {
        fusion,
        dim: m.dim,
        lr: m.lr,
        epochs: m.epoch,
        threads: m.thread,
        min_count: m.min_count,
        seed: m.seed,
    })
}

fn model_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn load_optional_codebook(path: Option<&PathBuf>) -> anyhow::Result<Option<Codebook>> {
    path.map(|p| load_codebook(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let codebook = load_optional_codebook(a.model.codebook.as_ref())?;
    let config = train_config(&a.model, codebook.as_ref())?;
    let data = prepare(config.fusion, codebook.as_ref(), &a.input, a.features.as_deref())?;
    let vocab = Vocabulary::from_lines(&data.lines, config.min_count)?;
    let corpus = Corpus::from_lines(&data.lines, &vocab);
    info!(
        "{} documents, {} words, {} labels, fusion {}",
        corpus.len(),
        vocab.n_words(),
        vocab.n_labels(),
        config.fusion
    );
    let (model, stats) =
        mmfast::train_with_stats(&config, &vocab, &corpus, data.features.as_ref(), codebook.as_ref())?;
    info!(
        "trained {} tokens in {:.2}s, final epoch loss {:.4}",
        stats.tokens,
        stats.seconds,
        stats.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    let out = model_path(&a.output);
    save_model(&model, &out).with_context(|| format!("writing {}", out.display()))?;
    info!("saved {}", out.display());
    Ok(())
}

fn run_quantize(a: QuantizeArgs) -> anyhow::Result<()> {
    let features = load_features(&a.input, None)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let config = QuantizerConfig {
        n: a.pq_n,
        k: a.pq_k,
        r: a.rspq_r,
        alpha: a.alpha,
        seed: a.seed,
        ..Default::default()
    };
    let codebook = train_codebook(&features, &config)?;
    save_codebook(&codebook, &a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    info!(
        "codebook: {} vectors of dim {}, {} slices x {} centroids x {} repetitions",
        features.len(),
        codebook.source_dim(),
        codebook.n(),
        codebook.k(),
        codebook.r()
    );
    if let (Some(corpus), Some(out)) = (a.corpus, a.corpus_output) {
        let lines = mmfast::emit_quantized_corpus(&corpus, &features, &codebook, &out)?;
        info!("wrote {} quantized lines to {}", lines, out.display());
    }
    Ok(())
}

fn open_model(path: &Path) -> anyhow::Result<Model> {
    load_model(path).with_context(|| format!("reading {}", path.display()))
}

fn run_test(a: TestArgs) -> anyhow::Result<()> {
    let model = open_model(&a.model)?;
    let data = prepare(model.fusion(), model.codebook(), &a.input, a.features.as_deref())?;
    let corpus = Corpus::from_lines(&data.lines, model.vocab());
    let eval = evaluate(&model, &corpus, data.features.as_ref())?;
    println!("N {}", eval.documents);
    println!("P@1 {:.4}", eval.accuracy());
    Ok(())
}

fn run_predict(a: PredictArgs) -> anyhow::Result<()> {
    let model = open_model(&a.model)?;
    let data = prepare(model.fusion(), model.codebook(), &a.input, a.features.as_deref())?;
    let corpus = Corpus::from_lines(&data.lines, model.vocab());
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for doc in corpus.iter() {
        let x = data.features.as_ref().map(|f| f.row(doc.line_index));
        let p = predict(&model, &doc.tokens, x, a.k)?;
        let fields: Vec<String> = p
            .labels
            .iter()
            .map(|&(l, prob)| format!("__label__{} {:.5}", model.vocab().label(l), prob))
            .collect();
        writeln!(out, "{}", fields.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn run_nn(a: NnArgs) -> anyhow::Result<()> {
    let model = open_model(&a.model)?;
    let restrict = if a.all { Restrict::All } else { Restrict::Words };
    let stdin = io::stdin();
    let interactive = stdin.is_terminal();
    let mut out = io::stdout().lock();
    loop {
        if interactive {
            write!(out, "Query word? ")?;
            out.flush()?;
        }
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        for query in line.split_whitespace() {
            match nearest_neighbors(&model, query, a.topn, restrict) {
                Ok(neighbors) => {
                    for (token, sim) in neighbors {
                        writeln!(out, "{}", format_neighbor(&token, sim))?;
                    }
                }
                Err(e) => eprintln!("{}", e),
            }
        }
        out.flush()?;
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let grid_text = fs::read_to_string(&a.grid)
        .with_context(|| format!("reading {}", a.grid.display()))?;
    let grid = Grid::from_json(&grid_text)?;
    let codebook = load_optional_codebook(a.model.codebook.as_ref())?;
    let base = train_config(&a.model, codebook.as_ref())?;
    let train_data = prepare(base.fusion, codebook.as_ref(), &a.input, a.features.as_deref())?;
    let valid_data = prepare(
        base.fusion,
        codebook.as_ref(),
        &a.valid,
        a.valid_features.as_deref(),
    )?;
    let vocab = Vocabulary::from_lines(&train_data.lines, base.min_count)?;
    let train_corpus = Corpus::from_lines(&train_data.lines, &vocab);
    let valid_corpus = Corpus::from_lines(&valid_data.lines, &vocab);
    info!("sweeping {} grid points", grid.len());
    let outcome = grid_search(
        &base,
        &grid,
        &vocab,
        Split {
            corpus: &train_corpus,
            features: train_data.features.as_ref(),
        },
        Split {
            corpus: &valid_corpus,
            features: valid_data.features.as_ref(),
        },
    )?;
    let best = &outcome.best;
    println!("fusion {}", best.fusion.name());
    if let Some(gate) = best.fusion.gate() {
        println!("gate {}", gate);
    }
    if let Some(alpha) = best.fusion.alpha() {
        println!("alpha {}", alpha);
    }
    println!("dim {}", best.dim);
    println!("lr {}", best.lr);
    println!("epoch {}", best.epochs);
    println!("P@1 {:.4}", outcome.best_accuracy);

    if let Some(prefix) = a.output {
        let model = mmfast::train(
            best,
            &vocab,
            &train_corpus,
            train_data.features.as_ref(),
            codebook.as_ref(),
        )?;
        let out = model_path(&prefix);
        save_model(&model, &out).with_context(|| format!("writing {}", out.display()))?;
        info!("saved {}", out.display());
    }
    Ok(())
}
