use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use morphogen::charlm::{filter_wordlist, read_wordlist, WittenBellLm};
use morphogen::data::{
    build_vocab, flatten_tables, parse_dataset, synth_corpus, write_dataset, Example, SynthSpec,
};
use morphogen::eval::{
    accuracy_by_length, evaluate_accuracy, export_embeddings, vowel_harmony_check, DecodeConfig,
    EvalReport, Predictor,
};
use morphogen::model::{InflectionModel, ModelVariant};
use morphogen::rerank::{pro_train, ProConfig, RerankModel, TrainingGroup};
use morphogen::search::{read_nbest, write_nbest, NBest, DEFAULT_MAX_LEN_SLACK};
use morphogen::train::{
    member_seeds, train_ensemble, train_factored, train_interpolated, train_joint, TrainConfig,
    TrainOutcome,
};

#[derive(Parser)]
#[command(
    name = "morphogen",
    version,
    about = "Character-level neural morphological inflection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an inflection model (or an ensemble of them)
    Train(TrainArgs),
    /// Train a Witten-Bell character language model on a word list
    LmTrain(LmTrainArgs),
    /// Predict inflected forms for `lemma TAB tag` lines
    Predict(PredictArgs),
    /// Write n-best lists for `lemma TAB tag` lines
    Beam(BeamArgs),
    /// Fit a PRO reranker on n-best lists against gold forms
    RerankTrain(RerankTrainArgs),
    /// Exact-match accuracy per tag on a labelled dataset
    Evaluate(EvaluateArgs),
    /// Accuracy binned by gold form length
    AnalyzeLength(AnalyzeLengthArgs),
    /// Fraction of words that respect front/back vowel harmony
    AnalyzeHarmony(AnalyzeHarmonyArgs),
    /// Dump character embeddings as `char TAB v1 TAB v2 ...`
    ExportEmbeddings(ExportEmbeddingsArgs),
    /// Generate a synthetic vowel-harmony dataset
    SynthData(SynthDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Factored,
    Joint,
    Interpolated,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Tag to train (factored and interpolated modes)
    #[arg(long)]
    tag: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint path; ensemble members go to `<out>.<i>`
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log (`epoch TAB train_loss TAB dev_accuracy TAB dev_loss`)
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    variant: ModelVariant,
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    /// Defaults to the vocabulary size
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    l2: f64,
    #[arg(long, env = "MORPHOGEN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    ensemble_k: usize,
    /// Language model (interpolated mode)
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lambda_init: f64,
    #[arg(long)]
    freeze_lambda: bool,
}

#[derive(Args)]
struct LmTrainArgs {
    #[arg(long)]
    words: PathBuf,
    #[arg(long, default_value_t = 5)]
    order: usize,
    #[arg(long)]
    out: PathBuf,
    /// Keep only words spelled with this dataset's characters
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Checkpoint; repeat to ensemble or to cover several tags
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam_width: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN_SLACK)]
    max_len_slack: usize,
    /// Language model for interpolated models and reranking
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    reranker: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// `lemma TAB tag` lines; a third column is ignored
    #[arg(long)]
    input: PathBuf,
    /// Writes `lemma TAB tag TAB prediction`; stdout if absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BeamArgs {
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = morphogen::search::DEFAULT_BEAM_WIDTH)]
    beam_width: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN_SLACK)]
    max_len_slack: usize,
    #[arg(long)]
    lm: Option<PathBuf>,
    /// n-best file (`source TAB tag TAB candidate TAB logprob`)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerankTrainArgs {
    #[arg(long)]
    nbest: PathBuf,
    /// Labelled dataset with the gold forms
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "MORPHOGEN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ProConfig::default().iterations)]
    iterations: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    data: PathBuf,
    /// Also write `lemma TAB tag TAB prediction` lines here
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "Accuracy")]
    title: String,
}

#[derive(Args)]
struct AnalyzeLengthArgs {
    /// `lemma TAB tag TAB prediction` lines, as written by `predict`
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    gold: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct AnalyzeHarmonyArgs {
    /// `lemma TAB tag TAB prediction` lines; the predictions are checked
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// One word per line
    #[arg(long)]
    words: Option<PathBuf>,
}

#[derive(Args)]
struct ExportEmbeddingsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Characters to export; all data characters if absent
    #[arg(long)]
    chars: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output directory for train.tsv, dev.tsv, test.tsv and words.txt
    #[arg(long)]
    out_dir: PathBuf,
    /// Labelled tables, split into train/dev/test
    #[arg(long, default_value_t = 500)]
    tables: usize,
    /// Extra tables that only feed words.txt
    #[arg(long, default_value_t = 500)]
    unlabeled: usize,
    /// Train, dev and test fractions
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    ratios: [f64; 3],
    #[arg(long, env = "MORPHOGEN_SEED", default_value_t = 0)]
    seed: u64,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: morphogen::Error| e.to_string())
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three comma-separated fractions".into())
}

enum Failure {
    Usage(String),
    Data(morphogen::Error),
}

impl From<morphogen::Error> for Failure {
    fn from(e: morphogen::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train(a) => train(a),
        Command::LmTrain(a) => lm_train(a),
        Command::Predict(a) => predict(a),
        Command::Beam(a) => beam(a),
        Command::RerankTrain(a) => rerank_train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::AnalyzeLength(a) => analyze_length(a),
        Command::AnalyzeHarmony(a) => analyze_harmony(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::SynthData(a) => synth_data(a),
    }
}

fn member_path(base: &Path, i: usize, k: usize) -> PathBuf {
    if k == 1 {
        return base.to_path_buf();
    }
    let mut s = base.as_os_str().to_owned();
    s.push(format!(".{i}"));
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| {
        Failure::Data(morphogen::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn train(a: TrainArgs) -> CliResult {
    let config = TrainConfig {
        hidden: a.hidden,
        embed_dim: a.embed_dim,
        l2: a.l2,
        epochs: a.epochs,
        ensemble_k: a.ensemble_k,
        seed: a.seed,
        variant: a.variant,
        lambda_init: a.lambda_init,
        freeze_lambda: a.freeze_lambda,
        ..TrainConfig::default()
    };
    config.validate()?;
    let train = parse_dataset(&a.data)?;
    let dev = match &a.dev {
        Some(p) => parse_dataset(p)?,
        None => Vec::new(),
    };
    let need_tag = || {
        a.tag
            .clone()
            .ok_or_else(|| Failure::Usage("--tag is required for this mode".into()))
    };
    let seeds = member_seeds(a.seed, a.ensemble_k);
    let outcomes: Vec<TrainOutcome> = match a.mode {
        Mode::Factored => {
            let tag = need_tag()?;
            train_ensemble(&seeds, |seed| {
                train_factored(&train, &dev, &tag, &TrainConfig { seed, ..config })
            })?
        }
        Mode::Joint => train_ensemble(&seeds, |seed| {
            train_joint(&train, &dev, &TrainConfig { seed, ..config })
        })?,
        Mode::Interpolated => {
            let tag = need_tag()?;
            let lm_path = a
                .lm
                .as_ref()
                .ok_or_else(|| Failure::Usage("--lm is required for interpolated mode".into()))?;
            let lm = WittenBellLm::load(lm_path)?;
            train_ensemble(&seeds, |seed| {
                train_interpolated(&train, &dev, &tag, &lm, &TrainConfig { seed, ..config })
            })?
        }
    };
    let k = outcomes.len();
    for (i, out) in outcomes.iter().enumerate() {
        let path = member_path(&a.out, i, k);
        out.model.save(&path)?;
        if let Some(log) = &a.log {
            write_text(&member_path(log, i, k), &out.log_text())?;
        }
        let dev_acc = out
            .best_dev_accuracy
            .map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "{}: epoch {} dev accuracy {dev_acc}",
            path.display(),
            out.best_epoch
        );
    }
    Ok(())
}

fn lm_train(a: LmTrainArgs) -> CliResult {
    let mut words = read_wordlist(&a.words)?;
    if let Some(data) = &a.data {
        let vocab = build_vocab(&parse_dataset(data)?)?;
        words = filter_wordlist(&words, &vocab);
    }
    let lm = WittenBellLm::train(&words, a.order)?;
    lm.save(&a.out)?;
    eprintln!("{} words, order {}", words.len(), a.order);
    Ok(())
}

struct Loaded {
    models: Vec<InflectionModel>,
    lm: Option<WittenBellLm>,
    reranker: Option<RerankModel>,
    config: DecodeConfig,
}

impl Loaded {
    fn new(d: &DecodeArgs) -> CliResult<Self> {
        if d.reranker.is_some() && d.lm.is_none() {
            return Err(Failure::Usage("--reranker needs --lm".into()));
        }
        Ok(Loaded {
            models: d
                .models
                .iter()
                .map(|p| InflectionModel::load(p))
                .collect::<Result<_, _>>()?,
            lm: d.lm.as_deref().map(WittenBellLm::load).transpose()?,
            reranker: d.reranker.as_deref().map(RerankModel::load).transpose()?,
            config: DecodeConfig {
                beam_width: d.beam_width,
                max_len_slack: d.max_len_slack,
            },
        })
    }

    fn predictor(&self) -> CliResult<Predictor<'_>> {
        let mut p = Predictor::new(self.models.iter().collect(), self.config)?;
        if let Some(lm) = &self.lm {
            p = p.with_lm(lm);
        }
        if let Some(r) = &self.reranker {
            p = p.with_reranker(r);
        }
        Ok(p)
    }
}

/// `lemma TAB tag [TAB ...]` lines as examples with an empty gold form.
fn read_inputs(path: &Path) -> CliResult<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| morphogen::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(Failure::Data(morphogen::Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `lemma TAB tag`".into(),
            }));
        }
        out.push(Example::new(cols[0], cols[1], ""));
    }
    Ok(out)
}

fn prediction_lines(examples: &[Example], predictions: &[String]) -> String {
    let mut out = String::new();
    for (e, p) in examples.iter().zip(predictions) {
        let _ = writeln!(out, "{}\t{}\t{}", e.lemma, e.tag, p);
    }
    out
}

fn predict(a: PredictArgs) -> CliResult {
    let loaded = Loaded::new(&a.decode)?;
    let inputs = read_inputs(&a.input)?;
    let preds = loaded.predictor()?.predict_all(&inputs)?;
    let text = prediction_lines(&inputs, &preds);
    match &a.out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn beam(a: BeamArgs) -> CliResult {
    let loaded = Loaded::new(&DecodeArgs {
        models: a.models,
        beam_width: a.beam_width,
        max_len_slack: a.max_len_slack,
        lm: a.lm,
        reranker: None,
    })?;
    let inputs = read_inputs(&a.input)?;
    let predictor = loaded.predictor()?;
    let groups: Vec<NBest> = inputs
        .iter()
        .map(|e| predictor.nbest(&e.lemma, &e.tag, a.beam_width))
        .collect::<Result<_, _>>()?;
    write_nbest(&a.out, &groups)?;
    Ok(())
}

fn rerank_train(a: RerankTrainArgs) -> CliResult {
    let nbest = read_nbest(&a.nbest)?;
    let gold: HashMap<(String, String), String> = parse_dataset(&a.gold)?
        .into_iter()
        .map(|e| ((e.lemma, e.tag), e.inflected))
        .collect();
    let lm = WittenBellLm::load(&a.lm)?;
    let groups: Vec<TrainingGroup<'_>> = nbest
        .iter()
        .filter_map(|g| {
            gold.get(&(g.source.clone(), g.tag.clone()))
                .map(|gold| TrainingGroup { nbest: g, gold })
        })
        .collect();
    if groups.is_empty() {
        return Err(Failure::Data(morphogen::Error::Rerank(
            "no n-best group has a gold form".into(),
        )));
    }
    let config = ProConfig {
        iterations: a.iterations,
        seed: a.seed,
        ..ProConfig::default()
    };
    let model = pro_train(&groups, &lm, config)?;
    model.save(&a.out)?;
    eprintln!("{} groups", groups.len());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let loaded = Loaded::new(&a.decode)?;
    let examples = parse_dataset(&a.data)?;
    let predictor = loaded.predictor()?;
    let report = match &a.predictions {
        Some(path) => {
            let preds = predictor.predict_all(&examples)?;
            write_text(path, &prediction_lines(&examples, &preds))?;
            EvalReport::score(&examples, &preds)?
        }
        None => evaluate_accuracy(&predictor, &examples)?,
    };
    print!("{}", report.to_table(&a.title));
    Ok(())
}

fn analyze_length(a: AnalyzeLengthArgs) -> CliResult {
    let preds = parse_dataset(&a.predictions)?;
    let gold = parse_dataset(&a.gold)?;
    if preds.len() != gold.len() {
        return Err(Failure::Usage(format!(
            "{} predictions for {} gold examples",
            preds.len(),
            gold.len()
        )));
    }
    if let Some((p, g)) = preds
        .iter()
        .zip(&gold)
        .find(|(p, g)| p.lemma != g.lemma || p.tag != g.tag)
    {
        return Err(Failure::Usage(format!(
            "prediction for `{}`/{} lines up with gold `{}`/{}",
            p.lemma, p.tag, g.lemma, g.tag
        )));
    }
    let p: Vec<String> = preds.into_iter().map(|e| e.inflected).collect();
    let g: Vec<String> = gold.into_iter().map(|e| e.inflected).collect();
    println!("length\tcorrect\ttotal\taccuracy");
    for bin in accuracy_by_length(&p, &g)? {
        println!(
            "{}\t{}\t{}\t{:.2}",
            bin.label,
            bin.count.correct,
            bin.count.total,
            100.0 * bin.count.accuracy()
        );
    }
    Ok(())
}

fn analyze_harmony(a: AnalyzeHarmonyArgs) -> CliResult {
    let words: Vec<String> = match (&a.predictions, &a.words) {
        (Some(p), _) => parse_dataset(p)?.into_iter().map(|e| e.inflected).collect(),
        (None, Some(w)) => read_wordlist(w)?,
        (None, None) => unreachable!("clap enforces one input"),
    };
    let report = vowel_harmony_check(&words);
    for (w, ok) in words.iter().zip(&report.verdicts) {
        if !ok {
            println!("disharmonic\t{w}");
        }
    }
    println!(
        "harmonic\t{}/{}\t{:.2}",
        report.verdicts.iter().filter(|&&v| v).count(),
        words.len(),
        100.0 * report.fraction
    );
    Ok(())
}

fn export(a: ExportEmbeddingsArgs) -> CliResult {
    let model = InflectionModel::load(&a.model)?;
    let chars: Vec<char> = match &a.chars {
        Some(s) => s.chars().collect(),
        None => model.vocab().data_chars().to_vec(),
    };
    export_embeddings(&model, &chars, &a.out)?;
    Ok(())
}

fn synth_data(a: SynthDataArgs) -> CliResult {
    let corpus = synth_corpus(
        &SynthSpec::default(),
        a.tables,
        a.unlabeled,
        a.ratios,
        a.seed,
    )?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| morphogen::Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let split = &corpus.split;
    for (name, tables) in [
        ("train", &split.train),
        ("dev", &split.dev),
        ("test", &split.test),
    ] {
        write_dataset(
            &a.out_dir.join(format!("{name}.tsv")),
            &flatten_tables(tables),
        )?;
    }
    let mut words = corpus.wordlist.join("\n");
    words.push('\n');
    write_text(&a.out_dir.join("words.txt"), &words)?;
    eprintln!(
        "{} train, {} dev, {} test tables; {} words",
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        corpus.wordlist.len()
    );
    Ok(())
}
