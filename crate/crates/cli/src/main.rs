//! `dforge` command-line interface.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dforge::corpus::synth::GeneralGrammar;
use dforge::corpus::{
    compute_language_distribution, dedup_sqrt, filter_min_tokens, generate_synthetic_nlu, mix_corpora, pack_sentences,
    read_corpus, read_nlu, sample_corpus, spoken_form_transform, Form, Grammar, TextExample,
};
use dforge::distill::{distill_task, DistillPlan, TaskDistillConfig};
use dforge::encoder::{init_params, EncoderCheckpoint};
use dforge::evaluate::{build_mask_fill_tasks, correlation_report, mask_fill_accuracy, nlu_metrics, perplexity};
use dforge::finetune::{finetune, FinetuneConfig, FinetuneMode, NluModelBundle};
use dforge::io::{read_string, write_json, write_jsonl};
use dforge::pipeline::{parse_with_overrides, report, run_pipeline, ModelShape, PipelineOptions, PipelineRecipe, TOY_RECIPE};
use dforge::pretrain::{encode_sequences, latest_checkpoint, train_mlm, MaskingPolicy, Stage, Start, TrainConfig, TrainSpec};
use dforge::tokenizer::{measure_metrics, train_unigram, TokenizerModel};
use dforge::{Error, Result};

#[derive(Parser)]
#[command(name = "dforge", version, about = "Desk-scale encoder pretraining, distillation and NLU fine-tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Corpus preparation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Unigram tokenizer training and measurement.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Masked-LM pretraining from a job file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the latest checkpoint in the job's output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Distillation over a segment plan.
    Distill {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task distillation from a fine-tuned teacher bundle.
    DistillTask {
        #[arg(long)]
        teacher: PathBuf,
        /// Directory with train.jsonl and val.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intent/slot fine-tuning over several seeds.
    Finetune {
        #[arg(long, default_value = "full")]
        mode: String,
        /// Directory with train.jsonl and val.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measurements.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// End-to-end recipes.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Consolidated metrics and relative deltas for a workdir.
    Report {
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, default_value = "stage1")]
        baseline: String,
    },
}

#[derive(Args)]
struct Io {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Language-balanced sampling with exponent `alpha`.
    Sample {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Square-root deduplication of repetition counts.
    Dedup {
        #[command(flatten)]
        io: Io,
    },
    /// Packs consecutive sentences up to a word budget.
    Pack {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = 700)]
        target_words: usize,
    },
    /// Converts records to spoken form.
    Spokenform {
        #[command(flatten)]
        io: Io,
    },
    /// Mixes corpora by record share.
    Mix {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// One weight per input.
        #[arg(long, value_delimiter = ',', required = true)]
        ratio: Vec<f64>,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Drops records shorter than `min_tokens` tokens.
    Filter {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_tokens: usize,
    },
    /// Generates synthetic general-domain sentences.
    GenText {
        #[arg(long)]
        sentences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generates synthetic intent/slot splits into a directory.
    GenNlu {
        #[arg(long, default_value = "assistant")]
        grammar: String,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TokenizerCmd {
    Train {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long, value_delimiter = ',')]
        forced: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Split ratio and unknown-token portion on a corpus.
    Metrics {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Perplexity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 77)]
        seed: u64,
    },
    Maskfill {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// One noun per line; defaults to the synthetic English lexicon.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 77)]
        seed: u64,
    },
    Nlu {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    Correlate {
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run {
        /// Recipe file; the shipped toy recipe when omitted.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        workdir: PathBuf,
    },
    /// Prints the shipped toy recipe.
    Recipe,
}

/// A pretraining job file. Relative paths resolve against the file.
#[derive(Debug, Serialize, Deserialize)]
struct PretrainJob {
    tokenizer: PathBuf,
    train_corpus: PathBuf,
    val_corpus: PathBuf,
    out_dir: PathBuf,
    #[serde(default = "stage1")]
    stage: Stage,
    /// Checkpoint to start from; a fresh `model` otherwise.
    #[serde(default)]
    init: Option<PathBuf>,
    #[serde(default)]
    model: Option<ModelShape>,
    train: TrainConfig,
}

fn stage1() -> Stage {
    Stage::Stage1
}

fn print<T: Serialize>(v: &T) {
    use std::io::Write;
    // A closed pipe downstream (`| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    parse_with_overrides(&read_string(path)?, std::env::vars())
}

fn texts(records: &[TextExample]) -> Vec<String> {
    records.iter().map(|r| r.text.clone()).collect()
}

fn nlu_split(dir: &Path, name: &str) -> Result<Vec<dforge::corpus::NluExample>> {
    read_nlu(&dir.join(format!("{name}.jsonl")))
}

fn corpus_cmd(c: CorpusCmd) -> Result<()> {
    match c {
        CorpusCmd::Sample { io, alpha, size, seed } => {
            let records = read_corpus(&io.input)?;
            let mut streams: BTreeMap<String, Vec<TextExample>> = BTreeMap::new();
            for r in records {
                streams.entry(r.language.clone()).or_default().push(r);
            }
            let counts = streams.iter().map(|(l, s)| (l.clone(), s.iter().map(|r| r.count).sum())).collect();
            let dist = compute_language_distribution(&counts, alpha)?;
            write_jsonl(&io.output, &sample_corpus(&streams, &dist, size, seed)?)?;
            print(&dist);
        }
        CorpusCmd::Dedup { io } => write_jsonl(&io.output, &dedup_sqrt(&read_corpus(&io.input)?))?,
        CorpusCmd::Pack { io, target_words } => {
            let packed: Vec<TextExample> = pack_sentences(&read_corpus(&io.input)?, target_words)?
                .into_iter()
                .map(|p| TextExample::new(p.text, p.language, Form::Written, "packed"))
                .collect();
            write_jsonl(&io.output, &packed)?;
        }
        CorpusCmd::Spokenform { io } => {
            let out = read_corpus(&io.input)?
                .into_iter()
                .map(|mut r| {
                    r.text = spoken_form_transform(&r.text, &r.language)?;
                    r.form = Form::Spoken;
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&io.output, &out)?;
        }
        CorpusCmd::Mix { input, ratio, size, seed, output } => {
            if input.len() != ratio.len() {
                return Err(Error::config("give one --ratio weight per --input"));
            }
            let parts = input.iter().zip(ratio).map(|(p, w)| Ok((read_corpus(p)?, w))).collect::<Result<Vec<_>>>()?;
            write_jsonl(&output, &mix_corpora(&parts, size, seed)?)?;
        }
        CorpusCmd::Filter { io, tokenizer, min_tokens } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            write_jsonl(&io.output, &filter_min_tokens(&read_corpus(&io.input)?, &tok, min_tokens))?;
        }
        CorpusCmd::GenText { sentences, seed, output } => write_jsonl(&output, &GeneralGrammar::english().generate(sentences, seed))?,
        CorpusCmd::GenNlu { grammar, train, val, test, seed, out } => {
            let s = generate_synthetic_nlu(&Grammar::preset(&grammar)?, train, val, test, seed)?;
            write_jsonl(&out.join("train.jsonl"), &s.train)?;
            write_jsonl(&out.join("val.jsonl"), &s.val)?;
            write_jsonl(&out.join("test.jsonl"), &s.test)?;
        }
    }
    Ok(())
}

fn tokenizer_cmd(c: TokenizerCmd) -> Result<()> {
    match c {
        TokenizerCmd::Train { input, vocab_size, forced, seed, output } => {
            let mut corpus = Vec::new();
            for p in &input {
                corpus.extend(texts(&read_corpus(p)?));
            }
            let forced: BTreeSet<String> = forced.into_iter().collect();
            let tok = train_unigram(&corpus, vocab_size, &forced, seed)?;
            let fp = tok.save(&output)?;
            print(&serde_json::json!({ "vocab_size": tok.vocab_size(), "fingerprint": fp, "metrics": measure_metrics(&tok, &corpus)? }));
        }
        TokenizerCmd::Metrics { tokenizer, input } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            print(&measure_metrics(&tok, &texts(&read_corpus(&input)?))?);
        }
    }
    Ok(())
}

fn pretrain_cmd(config: &Path, resume: bool) -> Result<()> {
    let mut job: PretrainJob = load_config(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    for p in [&mut job.tokenizer, &mut job.train_corpus, &mut job.val_corpus, &mut job.out_dir] {
        *p = base.join(&*p);
    }
    let tok = TokenizerModel::load(&job.tokenizer)?;
    let fp = tok.fingerprint();
    let (cfg, init) = match (&job.init, &job.model) {
        (Some(p), _) => {
            let ck = EncoderCheckpoint::load(&base.join(p))?;
            ck.require_fingerprint(&fp)?;
            (ck.config, ck.params)
        }
        (None, Some(shape)) => {
            let cfg = shape.config(tok.vocab_size());
            let p = init_params(&cfg, job.train.seed)?;
            (cfg, p)
        }
        (None, None) => return Err(Error::config("a pretraining job needs `init` or `model`")),
    };
    let start = if resume { Start::Resume(latest_checkpoint(&job.out_dir)?) } else { Start::Params(init) };
    let train = encode_sequences(&tok, &texts(&read_corpus(&job.train_corpus)?), cfg.max_len);
    let val = encode_sequences(&tok, &texts(&read_corpus(&job.val_corpus)?), cfg.max_len);
    let spec = TrainSpec { encoder: &cfg, train: &job.train, stage: job.stage, fingerprint: &fp, out_dir: Some(&job.out_dir) };
    let out = train_mlm(&spec, &train, &val, start, None)?;
    EncoderCheckpoint { config: cfg, params: out.params, tokenizer_fingerprint: fp }.save(&job.out_dir.join("model"))?;
    print(&serde_json::json!({ "step": out.step, "log": out.log, "model": job.out_dir.join("model") }));
    Ok(())
}

fn eval_cmd(c: EvalCmd) -> Result<()> {
    let load = |ckpt: &Path, tokenizer: &Path| -> Result<(EncoderCheckpoint, TokenizerModel)> {
        let tok = TokenizerModel::load(tokenizer)?;
        let ck = EncoderCheckpoint::load(ckpt)?;
        ck.require_fingerprint(&tok.fingerprint())?;
        Ok((ck, tok))
    };
    match c {
        EvalCmd::Perplexity { ckpt, tokenizer, corpus, seed } => {
            let (ck, tok) = load(&ckpt, &tokenizer)?;
            let seqs = encode_sequences(&tok, &texts(&read_corpus(&corpus)?), ck.config.max_len);
            let p = perplexity(&ck.params, &ck.config, &seqs, &MaskingPolicy::default(), seed, Default::default())?;
            print(&serde_json::json!({ "perplexity": p, "sequences": seqs.len() }));
        }
        EvalCmd::Maskfill { ckpt, tokenizer, corpus, lexicon, seed } => {
            let (ck, tok) = load(&ckpt, &tokenizer)?;
            let records = read_corpus(&corpus)?;
            let nouns: BTreeSet<String> = match lexicon {
                Some(p) => read_string(&p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
                None => GeneralGrammar::english().noun_lexicon(),
            };
            let langs: BTreeSet<String> = records.iter().map(|r| r.language.clone()).collect();
            let lex = langs.into_iter().map(|l| (l, nouns.clone())).collect();
            let (tasks, skipped) = build_mask_fill_tasks(&records, &lex, &tok, ck.config.max_len, seed)?;
            let acc = mask_fill_accuracy(&ck.params, &ck.config, &tasks, Default::default())?;
            print(&serde_json::json!({ "mask_fill_acc": acc, "tasks": tasks.len(), "skipped": skipped }));
        }
        EvalCmd::Nlu { bundle, tokenizer, data } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            let b = NluModelBundle::load(&bundle)?;
            let refs = read_nlu(&data)?;
            let utts: Vec<&str> = refs.iter().map(|e| e.utterance.as_str()).collect();
            let preds = b.predict_all(&tok, &utts, Default::default())?;
            print(&nlu_metrics(&refs, &preds)?);
        }
        EvalCmd::Correlate { x, y } => print(&correlation_report(&x, &y)?),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Corpus(c) => corpus_cmd(c)?,
        Cmd::Tokenizer(c) => tokenizer_cmd(c)?,
        Cmd::Pretrain { config, resume } => pretrain_cmd(&config, resume)?,
        Cmd::Distill { plan, out } => {
            let o = DistillPlan::load(&plan)?.run(Some(&out))?;
            print(&serde_json::json!({ "step": o.step, "checkpoints": o.checkpoints, "boundaries": o.boundaries }));
        }
        Cmd::DistillTask { teacher, data, student, tokenizer, config, out } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            let dc: TaskDistillConfig = match config {
                Some(p) => load_config(&p)?,
                None => TaskDistillConfig {
                    recipe: Default::default(),
                    train: FinetuneConfig::new(FinetuneMode::Full),
                    seed: 1,
                    finetune_epochs: 0,
                    teacher_train: None,
                },
            };
            let teacher = NluModelBundle::load(&teacher)?;
            let student = EncoderCheckpoint::load(&student)?;
            let o = distill_task(&teacher, &student, &tok, &nlu_split(&data, "train")?, &nlu_split(&data, "val")?, &dc)?;
            o.bundle.save(&out)?;
            print(&serde_json::json!({ "val": o.val, "epoch_losses": o.epoch_losses }));
        }
        Cmd::Finetune { mode, data, ckpt, tokenizer, seeds, config, out } => {
            let mode: FinetuneMode = mode.parse()?;
            let mut fc: FinetuneConfig = match config {
                Some(p) => load_config(&p)?,
                None => FinetuneConfig::new(mode),
            };
            fc.mode = mode;
            if let Some(s) = seeds {
                fc.seeds = s;
            }
            let tok = TokenizerModel::load(&tokenizer)?;
            let ck = EncoderCheckpoint::load(&ckpt)?;
            let sum = finetune(&ck, &tok, &nlu_split(&data, "train")?, &nlu_split(&data, "val")?, &fc)?;
            for r in &sum.runs {
                r.bundle.save(&out.join(format!("seed-{}", r.seed)))?;
            }
            write_json(&out.join("summary.json"), &sum.metrics)?;
            let runs: Vec<_> = sum
                .runs
                .iter()
                .map(|r| serde_json::json!({ "seed": r.seed, "best_epoch": r.best_epoch, "epoch_losses": r.epoch_losses, "val_history": r.val_history }))
                .collect();
            print(&serde_json::json!({ "metrics": sum.metrics, "runs": runs }));
        }
        Cmd::Eval(c) => eval_cmd(c)?,
        Cmd::Pipeline(PipelineCmd::Run { recipe, workdir }) => {
            let recipe = match recipe {
                Some(p) => PipelineRecipe::load(&p)?,
                None => PipelineRecipe::from_toml(TOY_RECIPE, Path::new("."), std::env::vars())?,
            };
            let r = run_pipeline(&recipe, &workdir, &PipelineOptions::default())?;
            for s in &r.stages {
                eprintln!("{:<14} {}", s.stage, if s.skipped { "skipped (current)".to_string() } else { format!("{} steps", s.steps) });
            }
            if let Some(text) = r.report {
                print!("{text}");
            }
        }
        Cmd::Pipeline(PipelineCmd::Recipe) => print!("{TOY_RECIPE}"),
        Cmd::Report { workdir, baseline } => print!("{}", report(&workdir, Some(&baseline))?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
