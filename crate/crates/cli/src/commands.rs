use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dxgen::bench;
use dxgen::checkpoint::{self, AnyModel};
use dxgen::corpus::{self, PromptTemplate, ReportRecord, DEFAULT_TEMPLATE};
use dxgen::lora::{self, LoraAdapter};
use dxgen::model::{ModelConfig, Transformer};
use dxgen::quant::{quantize_model, QuantModel};
use dxgen::rouge::{self, EvalReport, Generate};
use dxgen::sample::{Adapted, DecodeParams, LanguageModel, TextGenerator};
use dxgen::tokenizer::Vocabulary;
use dxgen::train::TrainConfig;
use dxgen::error::io_at;
use dxgen::{Error, Result};
use serde_json::json;

use crate::{BenchArgs, DecodeArgs, EvaluateArgs, InferArgs, PrepareArgs, TrainArgs, TrainOverrides};

const TRAIN_FILE: &str = "train.jsonl";
const TEST_FILE: &str = "test.jsonl";
const VOCAB_FILE: &str = "vocab.json";
const TEMPLATE_FILE: &str = "template.txt";
const MANIFEST_FILE: &str = "manifest.json";
const BASE_MODEL_FILE: &str = "base.ckpt";

/// Evaluation and bench budget when `--max-new-tokens` is not given.
const EVAL_MAX_NEW_TOKENS: usize = 32;

fn counts_json(records: &[ReportRecord]) -> serde_json::Value {
    corpus::modality_counts(records)
        .into_iter()
        .map(|(m, n)| (m.as_str().to_string(), json!(n)))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn training_texts(records: &[ReportRecord], template: &PromptTemplate) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(2 * records.len());
    for r in records {
        let (p, t) = template.render(r)?;
        out.push(p);
        out.push(t);
    }
    Ok(out)
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let (raw, source) = match (&a.source.input, a.source.synthesize) {
        (Some(p), _) => (corpus::ingest(p)?, p.display().to_string()),
        (None, Some(n)) => (corpus::synthesize(n, a.seed), format!("synthetic:{n}")),
        (None, None) => return Err(Error::Config("give --input or --synthesize".into())),
    };
    let template_text = match &a.template {
        Some(p) => std::fs::read_to_string(p).map_err(io_at(p))?,
        None => format!("{DEFAULT_TEMPLATE}\n"),
    };
    let template = PromptTemplate::parse(&template_text)?;
    let records = corpus::dedup(&raw);
    let split = corpus::split(&records, a.ratio, a.seed)?;
    let vocab = Vocabulary::build(&training_texts(&split.train, &template)?, a.max_vocab)?;
    let config = ModelConfig::desk(vocab.len());
    let base = Transformer::<f32>::init(config, a.seed)?;

    std::fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    corpus::write_jsonl(&a.out.join(TRAIN_FILE), &split.train)?;
    corpus::write_jsonl(&a.out.join(TEST_FILE), &split.test)?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    let template_path = a.out.join(TEMPLATE_FILE);
    std::fs::write(&template_path, &template_text).map_err(io_at(&template_path))?;
    checkpoint::save_model(&a.out.join(BASE_MODEL_FILE), &base)?;
    let manifest = json!({
        "source": source,
        "seed": a.seed,
        "ratio": a.ratio.to_string(),
        "records_read": raw.len(),
        "records_after_dedup": records.len(),
        "train": split.train.len(),
        "test": split.test.len(),
        "per_modality": {
            "all": counts_json(&records),
            "train": counts_json(&split.train),
            "test": counts_json(&split.test),
        },
        "vocab_size": vocab.len(),
        "model": config,
    });
    let manifest_path = a.out.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_at(&manifest_path))?;
    println!(
        "prepared {} records ({} read): {} train, {} test, vocabulary {} -> {}",
        records.len(),
        raw.len(),
        split.train.len(),
        split.test.len(),
        vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut c = match o.preset.as_str() {
        "desk" => TrainConfig::desk(),
        "table" => TrainConfig::default(),
        other => return Err(Error::Config(format!("unknown preset {other:?}; use desk or table"))),
    };
    if let Some(p) = &o.config {
        c.apply_file(p).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Config(format!("{}:{line}: {msg}", p.display())),
            other => other,
        })?;
    }
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = o.$f { c.$f = v; })* };
    }
    over!(learning_rate, batch_size, max_seq_len, grad_accum_steps, lora_r, lora_alpha, epochs, seed);
    c.validate()?;
    Ok(c)
}

fn load_split(dir: &Path, file: &str) -> Result<Vec<ReportRecord>> {
    corpus::ingest(&dir.join(file))
}

fn load_template(dir: &Path) -> Result<PromptTemplate> {
    let p = dir.join(TEMPLATE_FILE);
    if p.exists() {
        PromptTemplate::load(&p)
    } else {
        Ok(PromptTemplate::default())
    }
}

fn check_vocab(config: &ModelConfig, vocab: &Vocabulary, model: &Path) -> Result<()> {
    if config.vocab_size != vocab.len() {
        return Err(Error::Data(format!(
            "{} has vocab_size {} but the vocabulary holds {} tokens",
            model.display(),
            config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn load_adapter_for(path: &Path, config: &ModelConfig) -> Result<LoraAdapter<f32>> {
    let (trained_on, adapter) = checkpoint::load_adapter::<f32>(path)?;
    if &trained_on != config {
        return Err(Error::Lora(format!("{} was trained against a different model shape", path.display())));
    }
    Ok(adapter)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = train_config(&a.train)?;
    let model_path = a.model.clone().unwrap_or_else(|| a.data.join(BASE_MODEL_FILE));
    let model = checkpoint::load_model::<f32>(&model_path)?;
    let vocab = Vocabulary::load(&a.data.join(VOCAB_FILE))?;
    check_vocab(model.config(), &vocab, &model_path)?;
    let template = load_template(&a.data)?;
    let records = load_split(&a.data, TRAIN_FILE)?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log");
        PathBuf::from(s)
    });
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io_at(&log_path))?);
    for line in config.to_text().lines() {
        writeln!(log, "# {line}")?;
    }
    let mut io_err = None;
    let adapter = config.new_adapter(&model)?;
    let out = dxgen::train::train(&model, adapter, &records, &vocab, &template, &config, |s| {
        if !a.quiet {
            println!("{s}");
        }
        if let Err(e) = writeln!(log, "{s}") {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let out = out?;
    log.flush()?;
    checkpoint::save_adapter(&a.out, model.config(), &out.adapter)?;
    println!(
        "trained {} steps on {} records ({} skipped), final loss {:.6} -> {}",
        out.history.len(),
        records.len() - out.skipped,
        out.skipped,
        out.history.last().map_or(f64::NAN, |s| s.loss),
        a.out.display()
    );
    Ok(())
}

fn decode_params(d: &DecodeArgs, max_new_default: usize, seed: u64) -> Result<DecodeParams> {
    let base = DecodeParams::default();
    let p = DecodeParams {
        temperature: d.temperature.unwrap_or(base.temperature),
        top_k: d.top_k.unwrap_or(base.top_k),
        top_p: d.top_p.unwrap_or(base.top_p),
        repetition_penalty: d.repetition_penalty.unwrap_or(base.repetition_penalty),
        max_new_tokens: d.max_new_tokens.unwrap_or(max_new_default),
        seed,
    };
    p.validate()?;
    Ok(p)
}

/// A loaded model ready for decoding, float or int4, with the adapter
/// either attached or already merged.
enum Ready {
    Float(Transformer<f32>, Option<LoraAdapter<f32>>),
    Quant(QuantModel, Option<LoraAdapter<f32>>),
}

impl Ready {
    fn load(model: &Path, adapter: Option<&Path>, quant: bool, block_size: usize) -> Result<Self> {
        let any = checkpoint::load_any(model)?;
        let config = match &any {
            AnyModel::Float(m) => *m.config(),
            AnyModel::Quant(m) => *m.config(),
        };
        let adapter = adapter.map(|p| load_adapter_for(p, &config)).transpose()?;
        Ok(match (any, quant) {
            (AnyModel::Float(m), false) => Ready::Float(m, adapter),
            (AnyModel::Float(m), true) => {
                let m = match &adapter {
                    Some(a) => lora::merged(&m, a)?,
                    None => m,
                };
                Ready::Quant(quantize_model(&m, block_size)?, None)
            }
            (AnyModel::Quant(m), _) => Ready::Quant(m, adapter),
        })
    }

    fn config(&self) -> &ModelConfig {
        match self {
            Ready::Float(m, _) => m.config(),
            Ready::Quant(m, _) => m.config(),
        }
    }

    fn with_generator<T>(
        &self,
        vocab: &Vocabulary,
        params: DecodeParams,
        f: impl FnOnce(&dyn GenerateText) -> Result<T>,
    ) -> Result<T> {
        match self {
            Ready::Float(m, a) => {
                let lm = Adapted::new(m, a.as_ref());
                f(&TextGenerator { model: &lm, vocab, params })
            }
            Ready::Quant(m, a) => {
                let lm = Adapted::new(m, a.as_ref());
                f(&TextGenerator { model: &lm, vocab, params })
            }
        }
    }
}

/// Object-safe view of a text generator.
trait GenerateText: Generate {
    fn complete_text(&self, prompt: &str, seed: u64) -> Result<String>;
}

impl<M: LanguageModel> GenerateText for TextGenerator<'_, M> {
    fn complete_text(&self, prompt: &str, seed: u64) -> Result<String> {
        self.complete(prompt, seed)
    }
}

fn beside(model: &Path, name: &str) -> PathBuf {
    model.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn infer(a: InferArgs) -> Result<()> {
    let params = decode_params(&a.decode, DecodeParams::default().max_new_tokens, a.seed)?;
    let ready = Ready::load(&a.model, a.adapter.as_deref(), a.quant, a.block_size)?;
    let vocab = Vocabulary::load(&a.vocab.clone().unwrap_or_else(|| beside(&a.model, VOCAB_FILE)))?;
    check_vocab(ready.config(), &vocab, &a.model)?;
    let template = match &a.template {
        Some(p) => PromptTemplate::load(p)?,
        None => load_template(a.model.parent().unwrap_or(Path::new(".")))?,
    };
    let findings = match (&a.report.report, &a.report.report_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).map_err(io_at(p))?,
        (None, None) => return Err(Error::Config("give --report or --report-file".into())),
    };
    let findings = corpus::clean_text(&findings);
    if findings.is_empty() {
        return Err(Error::Data("report text is empty".into()));
    }
    let prompt = template.render_findings(a.modality, &findings);
    let text = ready.with_generator(&vocab, params, |g| g.complete_text(&prompt, params.seed))?;
    println!("{text}");
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let params = decode_params(&a.decode, EVAL_MAX_NEW_TOKENS, a.seed)?;
    let vocab = Vocabulary::load(&a.data.join(VOCAB_FILE))?;
    let template = load_template(&a.data)?;
    let mut test = load_split(&a.data, TEST_FILE)?;
    if let Some(n) = a.limit {
        test.truncate(n);
    }
    let adapters: Vec<Option<PathBuf>> = if a.adapters.is_empty() {
        vec![None]
    } else {
        a.adapters.iter().map(|s| (s != "none").then(|| PathBuf::from(s))).collect()
    };

    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for model in &a.models {
        for adapter in &adapters {
            let ready = Ready::load(model, adapter.as_deref(), a.quant, dxgen::quant::DEFAULT_BLOCK_SIZE)?;
            check_vocab(ready.config(), &vocab, model)?;
            let report = ready.with_generator(&vocab, params, |g| rouge::evaluate(g, &test, &template, params.seed))?;
            let mut name = file_stem(model);
            if let Some(p) = adapter {
                write!(name, "+{}", file_stem(p)).expect("writing to a String");
            }
            if a.quant {
                name.push_str(" (int4)");
            }
            rows.push((name, report));
        }
    }
    let table_rows: Vec<(String, &EvalReport)> = rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    let table = rouge::markdown_table(&table_rows);
    std::fs::write(&a.out, &table).map_err(io_at(&a.out))?;
    let full: serde_json::Map<String, serde_json::Value> = rows
        .iter()
        .map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?)))
        .collect::<Result<_>>()?;
    let mut json_path = a.out.clone().into_os_string();
    json_path.push(".json");
    let json_path = PathBuf::from(json_path);
    std::fs::write(&json_path, serde_json::to_string_pretty(&full)? + "\n").map_err(io_at(&json_path))?;
    print!("{table}");
    let failures: usize = rows.iter().map(|(_, r)| r.failures()).sum();
    if failures > 0 {
        eprintln!("warning: {failures} record(s) failed to decode and scored zero");
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let config = train_config(&a.train)?;
    let params = decode_params(&a.decode, EVAL_MAX_NEW_TOKENS, config.seed)?;
    let model = checkpoint::load_model::<f32>(&a.model)?;
    let vocab = Vocabulary::load(&a.data.join(VOCAB_FILE))?;
    check_vocab(model.config(), &vocab, &a.model)?;
    let template = load_template(&a.data)?;
    let mut train_recs = load_split(&a.data, TRAIN_FILE)?;
    let mut test_recs = load_split(&a.data, TEST_FILE)?;
    train_recs.truncate(a.records);
    test_recs.truncate(a.records);
    let adapter = a.adapter.as_deref().map(|p| load_adapter_for(p, model.config())).transpose()?;

    let finetune = || -> Result<usize> {
        let one_epoch = TrainConfig { epochs: 1, ..config };
        let out = dxgen::train::train(&model, one_epoch.new_adapter(&model)?, &train_recs, &vocab, &template, &one_epoch, |_| {})?;
        Ok(out.history.iter().map(|s| s.tokens).sum())
    };
    let lm = Adapted::new(&model, adapter.as_ref());
    let generator = TextGenerator { model: &lm, vocab: &vocab, params };
    let report = bench::run(a.repeats, finetune, &generator, &test_recs, &template, params.seed)?;
    print!("{}", report.table());
    println!(
        "{} repeats; fine-tune {} tokens over {} records; inference {} words over {} reports",
        report.repeats,
        report.train_tokens,
        train_recs.len(),
        report.generated_words,
        test_recs.len()
    );
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n").map_err(io_at(p))?;
    }
    Ok(())
}
