//! `mmfusion` command line: train, evaluate, predict, gradcheck, synth.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmfusion::data::{
    gen_synthetic, load_manifest, load_posts, make_splits, Dataset, DatasetSplit, SynthConfig,
};
use mmfusion::eval::{evaluate, EncodedPosts};
use mmfusion::fusion::{encode_checkpoint, load_checkpoint};
use mmfusion::losses::{GradCheckReport, TinyCase, TinyDims};
use mmfusion::train::{train, EpochStats};
use mmfusion::{
    DenseVector, Error, FusionConfig, MetricsReport, ModalityFilter, Mode, Model, ModelInput,
    Result,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "mmfusion",
    version,
    about = "Train and evaluate text + image fusion classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON run config; writes a checkpoint and metrics JSON.
    Train(TrainArgs),
    /// Score one or more checkpoints on a dataset split.
    Evaluate(EvaluateArgs),
    /// Classify a single post.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on a tiny random model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic two-bit dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config (JSON).
    config: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest.
    #[arg(long, conflicts_with_all = ["posts", "features"])]
    manifest: Option<PathBuf>,
    /// Posts file (JSON lines), when there is no manifest.
    #[arg(long)]
    posts: Option<PathBuf>,
    /// `MMF1` feature file referenced by the posts.
    #[arg(long, requires = "posts")]
    features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint to score; repeat for a comparison table.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Modalities shown to the model: both, text_only or image_only.
    #[arg(long, default_value = "both")]
    filter: ModalityFilter,
    /// Refuse checkpoints whose fusion mode differs.
    #[arg(long)]
    mode: Option<Mode>,
    /// Also write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    text: Option<String>,
    /// Feature file holding the post's image vector.
    #[arg(long, requires = "record")]
    features: Option<PathBuf>,
    /// Record index into --features.
    #[arg(long, requires = "features")]
    record: Option<usize>,
    /// Comma-separated image feature values.
    #[arg(long, conflicts_with = "features")]
    image: Option<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "common_space")]
    mode: Mode,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    h: usize,
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    g: usize,
    /// Print the JSON-lines summary instead of the text report.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    d_text: usize,
    #[arg(long, default_value_t = 8)]
    n_image: usize,
    #[arg(long, default_value_t = 1.0)]
    xor_fraction: f64,
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_owned(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct FilterReports {
    both: Option<MetricsReport>,
    text_only: Option<MetricsReport>,
    image_only: Option<MetricsReport>,
}

#[derive(Serialize)]
pub struct TrainMetrics {
    seed: u64,
    epochs: usize,
    config_sha256: String,
    dataset_sha256: String,
    config: FusionConfig,
    classes: Vec<String>,
    split_sizes: [usize; 3],
    best_epoch: usize,
    best_validation_accuracy: f64,
    history: Vec<EpochStats>,
    test: FilterReports,
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let run = RunConfig::read(&args.config)?;
    let loaded = run.load_data()?;
    let data = &loaded.data;
    let config = run.fusion_config(data)?;
    let split = make_splits(&data.posts)?;

    let state = train(
        data,
        &split,
        &config,
        loaded.embeddings.as_deref(),
        run.epochs,
        run.seed,
    )?;
    let model = &state.best;
    write_file(&run.checkpoint, &encode_checkpoint(model)?)?;

    let posts = EncodedPosts::new(data, model)?;
    let report = |f| evaluate(model, &posts, &split.test, f).ok();
    let identity = fs::read(&loaded.identity_file).map_err(|e| Error::Io {
        path: loaded.identity_file.clone(),
        source: e,
    })?;
    let hashed = serde_json::to_vec(&serde_json::json!({
        "config": config,
        "epochs": run.epochs,
        "seed": run.seed,
    }))?;
    let metrics = TrainMetrics {
        seed: run.seed,
        epochs: run.epochs,
        config_sha256: sha256_hex(&hashed),
        dataset_sha256: sha256_hex(&identity),
        config: config.clone(),
        classes: data.classes.clone(),
        split_sizes: [split.train.len(), split.validation.len(), split.test.len()],
        best_epoch: state.best_epoch,
        best_validation_accuracy: state.best_validation_accuracy,
        history: state.history.clone(),
        test: FilterReports {
            both: report(ModalityFilter::Both),
            text_only: report(ModalityFilter::TextOnly),
            image_only: report(ModalityFilter::ImageOnly),
        },
    };
    let mut json = serde_json::to_vec_pretty(&metrics)?;
    json.push(b'\n');
    write_file(&run.metrics, &json)?;

    let mut summary = format!(
        "trained {} for {} epochs; best validation accuracy {:.4} after epoch {}\n",
        config.mode, run.epochs, state.best_validation_accuracy, state.best_epoch
    );
    if let Some(r) = &metrics.test.both {
        summary += &format!(
            "test accuracy {:.4}  f_macro {:.4}  f_micro {:.4}\n",
            r.accuracy, r.f_macro, r.f_micro
        );
    }
    summary += &format!(
        "checkpoint {}\nmetrics {}\n",
        run.checkpoint.display(),
        run.metrics.display()
    );
    emit(out, &summary)?;
    Ok(EXIT_OK)
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    match (&args.manifest, &args.posts) {
        (Some(m), _) => load_manifest(m).map(|(_, d)| d),
        (None, Some(p)) => load_posts(p, args.features.as_deref()),
        (None, None) => Err(Error::Config("give --manifest or --posts".into())),
    }
}

fn split_indices(split: SplitArg, parts: &DatasetSplit, n: usize) -> Vec<usize> {
    match split {
        SplitArg::Train => parts.train.clone(),
        SplitArg::Validation => parts.validation.clone(),
        SplitArg::Test => parts.test.clone(),
        SplitArg::All => (0..n).collect(),
    }
}

#[derive(Serialize)]
struct EvalRow {
    checkpoint: String,
    mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct EvalOutput {
    split: String,
    filter: ModalityFilter,
    rows: Vec<EvalRow>,
}

/// One line per row: mode, accuracy, F-macro, F-micro, counts.
pub fn comparison_table(rows: &[(String, Option<&MetricsReport>)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$}  accuracy  f_macro  f_micro  evaluated  skipped\n",
        "model"
    );
    for (name, report) in rows {
        match report {
            Some(r) => {
                s += &format!(
                    "{:<width$}  {:>8.4}  {:>7.4}  {:>7.4}  {:>9}  {:>7}\n",
                    name, r.accuracy, r.f_macro, r.f_micro, r.evaluated, r.skipped
                )
            }
            None => {
                s += &format!(
                    "{name:<width$}  {:>8}  {:>7}  {:>7}  {:>9}  {:>7}\n",
                    "n/a", "n/a", "n/a", "-", "-"
                )
            }
        }
    }
    s
}

fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let models = args
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|m| (p, m)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(want) = args.mode {
        if let Some((p, m)) = models.iter().find(|(_, m)| m.config.mode != want) {
            return Err(Error::Config(format!(
                "checkpoint {} holds a {} model, --mode asks for {want}",
                p.display(),
                m.config.mode
            )));
        }
    }
    let data = load_dataset(&args.data)?;
    let parts = make_splits(&data.posts)?;
    let indices = split_indices(args.split, &parts, data.posts.len());

    let mut rows = Vec::with_capacity(models.len());
    for (path, model) in &models {
        let posts = EncodedPosts::new(&data, model)?;
        let result = evaluate(model, &posts, &indices, args.filter);
        if models.len() == 1 {
            result
                .as_ref()
                .map_err(|e| Error::Evaluation(e.to_string()))?;
        }
        let (report, error) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(EvalRow {
            checkpoint: path.display().to_string(),
            mode: model.config.mode,
            report,
            error,
        });
    }
    if rows.iter().all(|r| r.report.is_none()) {
        return Err(Error::Evaluation("no checkpoint could be evaluated".into()));
    }

    let mut text = format!("split {:?}, filter {}\n", args.split, args.filter).to_lowercase();
    if let [row] = rows.as_slice() {
        text += &row.report.as_ref().expect("checked above").table();
    } else {
        let table: Vec<(String, Option<&MetricsReport>)> = rows
            .iter()
            .map(|r| (r.mode.to_string(), r.report.as_ref()))
            .collect();
        text += &comparison_table(&table);
    }
    let output = EvalOutput {
        split: format!("{:?}", args.split).to_lowercase(),
        filter: args.filter,
        rows,
    };
    let json = serde_json::to_string(&output)?;
    if let Some(p) = &args.output {
        write_file(p, format!("{json}\n").as_bytes())?;
    }
    emit(out, &format!("{text}\n{json}\n"))?;
    Ok(EXIT_OK)
}

fn parse_floats(s: &str) -> Result<DenseVector> {
    let values = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad feature value {v:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    DenseVector::new(values)
}

fn predict_one(
    model: &Model,
    text: Option<&str>,
    image: Option<&DenseVector>,
) -> Result<serde_json::Value> {
    use mmfusion::encoders::{Tokenizer, WhitespaceTokenizer};
    let tokens = text
        .map(|t| WhitespaceTokenizer.tokenize(t))
        .filter(|t| !t.is_empty());
    let ids = tokens.as_ref().map(|t| model.vocabulary.ids(t));
    let input = ModelInput::new(ids.as_deref(), image);
    if input.text.is_none() && input.image.is_none() {
        return Err(Error::EmptyPost);
    }
    let scores = model.scores(input)?;
    let index = scores.argmax();
    Ok(serde_json::json!({
        "class": model.classes[index],
        "index": index,
        "scores": scores.as_slice(),
    }))
}

fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let model = load_checkpoint(&args.checkpoint)?;
    let image = match (&args.features, args.record, &args.image) {
        (Some(f), Some(r), _) => {
            let store = mmfusion::encoders::FeatureStore::read(f)?;
            let v = store.get(r).cloned().ok_or_else(|| Error::Validation {
                id: format!("record {r}"),
                message: format!("feature file has {} records", store.len()),
            })?;
            Some(v)
        }
        (_, _, Some(values)) => Some(parse_floats(values)?),
        _ => None,
    };
    let result = predict_one(&model, args.text.as_deref(), image.as_ref())?;
    emit(out, &format!("{result}\n"))?;
    Ok(EXIT_OK)
}

/// Runs the tiny-model gradient check for `mode`; late fusion checks both
/// unimodal branches.
pub fn gradcheck_reports(
    mode: Mode,
    dims: TinyDims,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<Vec<(Mode, GradCheckReport)>> {
    let modes = match mode {
        Mode::Late => vec![Mode::TextOnly, Mode::ImageOnly],
        m => vec![m],
    };
    modes
        .into_iter()
        .map(|m| {
            let case = TinyCase::random(m, dims, seed)?;
            Ok((m, case.check(seed, step, tolerance)?))
        })
        .collect()
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let dims = TinyDims {
        d: args.d,
        h: args.h,
        n: args.n,
        classes: args.classes,
        g: args.g,
        ..TinyDims::default()
    };
    let reports = gradcheck_reports(args.mode, dims, args.seed, args.step, args.tolerance)?;
    let mut text = String::new();
    for (mode, report) in &reports {
        if args.json {
            text += &report.json_lines();
        } else {
            text += &format!("[{mode}] {report}\n");
        }
    }
    emit(out, &text)?;
    Ok(if reports.iter().all(|(_, r)| r.pass) {
        EXIT_OK
    } else {
        EXIT_NUMERIC
    })
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let config = SynthConfig {
        seed: args.seed,
        per_class: args.per_class,
        classes: args.classes,
        d_text: args.d_text,
        n_image: args.n_image,
        xor_fraction: args.xor_fraction,
    };
    let dataset = gen_synthetic(&config)?;
    dataset.write(&args.out)?;
    emit(
        out,
        &format!(
            "wrote {} posts ({} classes) to {}\n",
            dataset.posts.len(),
            dataset.classes.len(),
            args.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}
