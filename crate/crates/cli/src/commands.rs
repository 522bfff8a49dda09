use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sotk_core::bpe::{load_vocab, save_vocab, BpeTrainer, BpeVocab, TokenId};
use sotk_core::corpus::shard::{sha256_file, sidecar};
use sotk_core::corpus::{
    build_samples_with, corpus_stats, read_jsonl_corpus, write_corpus, CorpusFormat, TokenShard,
};
use sotk_core::ingest::{ingest_dump, RecordStore};
use sotk_core::metrics::{class_weights, evaluate};
use sotk_core::miner::{
    cohen_kappa, export_candidates, import_annotations, mine_all, paired_labels, read_candidates,
    sample_for_annotation, Heuristic,
};
use sotk_core::mlm::{
    attach_head, build_encoder, finetune, label_counts, load_checkpoint, plan_batches,
    save_checkpoint, train_mlm, write_loss_trace, EncoderConfig, FinetuneConfig, HeadKind,
    LabeledExample, MaskingConfig, Target, TrainOptions,
};
use sotk_core::planner::{
    estimate_cost, estimate_params, min_tokens, plan_budget, Candidate, ModelShape,
};
use sotk_core::{Classifier, Encoder};

use crate::config::{stage_seed, HeadChoice, PipelineConfig, Stage};
use crate::{CliError, Command, FormatArg};

fn data<E: Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// An input that must be configured and exist.
fn input(key: &str, p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let p = p
        .clone()
        .ok_or_else(|| usage(format!("missing required setting `{key}`")))?;
    if !p.exists() {
        return Err(usage(format!("`{key}`: {} does not exist", p.display())));
    }
    Ok(p)
}

fn output(key: &str, p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let p = p
        .clone()
        .ok_or_else(|| usage(format!("missing required setting `{key}`")))?;
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    Ok(p)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `<file>.manifest.json` with the root seed and content hash. No absolute
/// paths or clocks, so reruns are byte-identical.
fn write_manifest(path: &Path, command: &str, seed: u64, extra: Value) -> Result<(), CliError> {
    let mut m = json!({
        "command": command,
        "seed": seed,
        "file": file_name(path),
        "sha256": sha256_file(path).map_err(data)?,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    write_json(&sidecar(path, ".manifest.json"), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(data)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn reader(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| data(format!("{}: {e}", path.display())))
}

fn with_summary(command: &str, seed: u64, body: impl Serialize) -> Result<Value, CliError> {
    let mut v = json!({ "command": command, "seed": seed });
    if let (Value::Object(m), Value::Object(extra)) =
        (&mut v, serde_json::to_value(body).map_err(data)?)
    {
        m.extend(extra);
    }
    Ok(v)
}

pub fn dispatch(cmd: &Command, cfg: &PipelineConfig) -> Result<Value, CliError> {
    match cmd {
        Command::Ingest { .. } => ingest(cfg),
        Command::BuildCorpus { format, .. } => build_corpus(cfg, *format),
        Command::TrainTokenizer { .. } => train_tokenizer(cfg),
        Command::Stats { tokens, .. } => stats(cfg, *tokens),
        Command::Plan {
            tokens_per_hour, ..
        } => plan(cfg, *tokens_per_hour),
        Command::Pretrain { .. } => pretrain(cfg),
        Command::Finetune { .. } => run_finetune(cfg),
        Command::Mine { .. } => mine(cfg),
        Command::SampleAnnotations { .. } => sample_annotations(cfg),
        Command::Kappa {
            annotator_a,
            annotator_b,
            ..
        } => kappa(cfg, annotator_a.as_deref(), annotator_b.as_deref()),
        Command::Eval { classes, .. } => eval(cfg, *classes),
    }
}

fn ingest(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let posts = input("paths.posts", &cfg.paths.posts)?;
    let comments = input("paths.comments", &cfg.paths.comments)?;
    let history = match &cfg.paths.history {
        Some(_) => Some(input("paths.history", &cfg.paths.history)?),
        None => None,
    };
    let dir = output("paths.store", &cfg.paths.store)?;
    let history = history.as_deref().map(reader).transpose()?;
    let store =
        ingest_dump(reader(&posts)?, reader(&comments)?, history, Some(&dir)).map_err(data)?;
    let r = store.report();
    let body = json!({
        "posts": r.posts_loaded,
        "comments": r.comments_loaded,
        "history": r.history_loaded,
        "skipped_rows": r.skipped.len(),
        "dangling_comments": r.dangling_comments.len(),
        "dangling_history": r.dangling_history.len(),
        "orphan_answers": r.orphan_answers.len(),
    });
    let summary = with_summary("ingest", cfg.seed, &body)?;
    write_json(&dir.join("manifest.json"), &summary)?;
    Ok(summary)
}

fn open_store(cfg: &PipelineConfig) -> Result<RecordStore, CliError> {
    let dir = input("paths.store", &cfg.paths.store)?;
    RecordStore::open(&dir).map_err(data)
}

fn build_corpus(cfg: &PipelineConfig, format: FormatArg) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let (samples, report) = build_samples_with(&store, cfg.filter, cfg.cleaning);
    let manifest = match format {
        FormatArg::Jsonl => {
            let out = output("paths.corpus", &cfg.paths.corpus)?;
            write_corpus(
                &samples,
                &out,
                CorpusFormat::JsonLines,
                None,
                report.skipped_empty as u64,
                Some(cfg.seed),
            )
        }
        FormatArg::Shard => {
            let vocab = load_vocab(&input("paths.vocab", &cfg.paths.vocab)?).map_err(data)?;
            let out = output("paths.shard", &cfg.paths.shard)?;
            write_corpus(
                &samples,
                &out,
                CorpusFormat::TokenShard,
                Some(&vocab),
                report.skipped_empty as u64,
                Some(cfg.seed),
            )
        }
    }
    .map_err(data)?;
    with_summary(
        "build-corpus",
        cfg.seed,
        json!({ "candidates": report.candidates, "manifest": manifest }),
    )
}

fn train_tokenizer(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let corpus = input("paths.corpus", &cfg.paths.corpus)?;
    let out = output("paths.vocab", &cfg.paths.vocab)?;
    let samples = read_jsonl_corpus(&corpus).map_err(data)?;
    let t = &cfg.tokenizer;
    let trainer = BpeTrainer {
        vocab_size: t.vocab_size,
        sample_fraction: t.sample_fraction,
        seed: stage_seed(cfg.seed, Stage::Tokenizer),
        split_digits: t.split_digits,
        threads: t.threads,
    };
    let vocab = trainer
        .train(samples.iter().map(|s| s.text.as_str()))
        .map_err(data)?;
    save_vocab(&vocab, &out).map_err(data)?;
    let body = json!({
        "vocab_size": vocab.vocab_size(),
        "requested_vocab_size": t.vocab_size,
        "merges": vocab.merges().len(),
        "checksum": format!("{:016x}", vocab.checksum()),
        "sample_fraction": t.sample_fraction,
        "split_digits": t.split_digits,
        "corpus_samples": samples.len(),
    });
    write_manifest(&out, "train-tokenizer", cfg.seed, body.clone())?;
    with_summary("train-tokenizer", cfg.seed, body)
}

fn stats(cfg: &PipelineConfig, tokens: bool) -> Result<Value, CliError> {
    let corpus = input("paths.corpus", &cfg.paths.corpus)?;
    let vocab = if tokens {
        Some(load_vocab(&input("paths.vocab", &cfg.paths.vocab)?).map_err(data)?)
    } else {
        None
    };
    let mut samples = read_jsonl_corpus(&corpus).map_err(data)?;
    let stats =
        corpus_stats(&mut samples, vocab.as_ref(), &cfg.sequence.bucket_edges).map_err(data)?;
    let summary = with_summary("stats", cfg.seed, &stats)?;
    if let Some(p) = &cfg.paths.stats {
        write_json(&output("paths.stats", &Some(p.clone()))?, &summary)?;
    }
    Ok(summary)
}

fn plan(cfg: &PipelineConfig, tokens_per_hour: Option<f64>) -> Result<Value, CliError> {
    let shape = ModelShape {
        n_layers: cfg.model.layers as u64,
        hidden: cfg.model.hidden as u64,
        vocab_size: cfg.tokenizer.vocab_size as u64,
        max_positions: cfg.sequence.max_len as u64,
        head_tied: cfg.model.tied,
    };
    shape
        .validate()
        .map_err(|e| usage(format!("model.hidden: {e}")))?;
    let params = estimate_params(&shape);
    let need = min_tokens(params);
    let batch = plan_batches(
        cfg.batch.target_tokens,
        cfg.batch.micro_batch,
        cfg.sequence.max_len,
    )
    .map_err(data)?;
    let mut body = json!({
        "shape": shape,
        "params": params,
        "min_tokens": need,
        "gpu_hours": cfg.gpu_hours,
        "dollars": estimate_cost(cfg.gpu_hours, cfg.cost.rate_per_hour, cfg.cost.perf_ratio),
        "rate_per_hour": cfg.cost.rate_per_hour,
        "perf_ratio": cfg.cost.perf_ratio,
        "batch": batch,
        "steps_to_min_tokens": need.div_ceil(batch.effective_tokens),
    });
    if let Some(tph) = tokens_per_hour {
        let outcome = plan_budget(
            cfg.gpu_hours,
            &[Candidate {
                shape,
                tokens_per_hour: tph,
            }],
            &cfg.cost,
        )
        .map_err(|e| usage(format!("tokens-per-hour: {e}")))?;
        body["budget"] = serde_json::to_value(outcome).map_err(data)?;
    }
    with_summary("plan", cfg.seed, body)
}

fn pretrain(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let vocab = load_vocab(&input("paths.vocab", &cfg.paths.vocab)?).map_err(data)?;
    let shard = TokenShard::open(
        &input("paths.shard", &cfg.paths.shard)?,
        Some(vocab.checksum()),
    )
    .map_err(data)?;
    let out = output("paths.checkpoint", &cfg.paths.checkpoint)?;
    let m = &cfg.model;
    let enc_cfg = EncoderConfig {
        ffn_mult: m.ffn_mult,
        max_positions: cfg.sequence.max_len,
        seed: stage_seed(cfg.seed, Stage::Model),
        tie_head: m.tied,
        vocab_checksum: Some(vocab.checksum()),
        ..EncoderConfig::new(m.layers, m.hidden, m.heads, vocab.vocab_size())
    };
    let mut model: Encoder = build_encoder(&enc_cfg).map_err(|e| usage(format!("model: {e}")))?;
    let plan = plan_batches(
        cfg.batch.target_tokens,
        cfg.batch.micro_batch,
        cfg.sequence.max_len,
    )
    .map_err(data)?;
    let opts = TrainOptions {
        steps: cfg.batch.steps,
        optimizer: cfg.batch.optimizer,
        masking: MaskingConfig::bpe(cfg.batch.mask_rate, vocab.vocab_size()),
        seed: stage_seed(cfg.seed, Stage::Pretrain),
    };
    let trace = train_mlm(&mut model, &shard, &plan, &opts).map_err(data)?;
    save_checkpoint(&model, &out).map_err(data)?;
    if let Some(p) = &cfg.paths.loss_trace {
        let p = output("paths.loss_trace", &Some(p.clone()))?;
        write_loss_trace(&p, &trace).map_err(|e| data(format!("{}: {e}", p.display())))?;
    }
    let body = json!({
        "params": model.parameter_count(),
        "steps": trace.len(),
        "initial_loss": trace.first(),
        "final_loss": trace.last(),
        "plan": plan,
        "vocab_checksum": format!("{:016x}", vocab.checksum()),
    });
    write_manifest(&out, "pretrain", cfg.seed, body.clone())?;
    with_summary("pretrain", cfg.seed, body)
}

/// One fine-tune example per line: `{"text": ..., "label": k}` or
/// `{"ids": [...], "label": k}` for sequence heads, `{"ids": [...],
/// "labels": [k, null, ...]}` for token heads.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    text: Option<String>,
    ids: Option<Vec<TokenId>>,
    label: Option<usize>,
    labels: Option<Vec<Option<usize>>>,
}

fn read_examples(
    key: &str,
    path: &Path,
    clf: &Classifier,
    vocab: Option<&BpeVocab>,
) -> Result<Vec<LabeledExample>, CliError> {
    let max_len = clf.encoder.config().max_positions;
    let mut out = Vec::new();
    for (i, line) in reader(path)?.lines().enumerate() {
        let line = line.map_err(data)?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: &str| data(format!("{}:{}: {m}", path.display(), i + 1));
        let ex: ExampleLine = serde_json::from_str(&line).map_err(|e| at(&e.to_string()))?;
        let mut ids = match (ex.ids, ex.text) {
            (Some(ids), None) => ids,
            (None, Some(text)) => {
                let v = vocab.ok_or_else(|| {
                    usage(format!("`paths.vocab` is needed to encode text in `{key}`"))
                })?;
                v.encode(&text)
            }
            _ => return Err(at("exactly one of `ids` and `text` is required")),
        };
        let target = match (clf.kind, ex.label, ex.labels) {
            (HeadKind::Sequence { .. }, Some(y), None) => {
                if let Some(m) = clf.class_marker {
                    if ids.first() != Some(&m) {
                        ids.insert(0, m);
                    }
                }
                ids.truncate(max_len);
                Target::Sequence(y)
            }
            (HeadKind::Token { .. }, None, Some(mut ys)) => {
                if ys.len() != ids.len() {
                    return Err(at("`labels` must have one entry per id"));
                }
                ids.truncate(max_len);
                ys.truncate(max_len);
                Target::Tokens(ys)
            }
            (HeadKind::Sequence { .. }, ..) => return Err(at("sequence heads need `label`")),
            (HeadKind::Token { .. }, ..) => return Err(at("token heads need `ids` and `labels`")),
        };
        out.push(LabeledExample { ids, target });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Predictions {
    n_classes: Option<usize>,
    y_true: Vec<usize>,
    y_pred: Vec<usize>,
}

fn run_finetune(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let ckpt = input("paths.checkpoint", &cfg.paths.checkpoint)?;
    let train_path = input("paths.finetune_train", &cfg.paths.finetune_train)?;
    let eval_path = input("paths.finetune_eval", &cfg.paths.finetune_eval)?;
    let out = output("paths.predictions", &cfg.paths.predictions)?;
    let vocab = match &cfg.paths.vocab {
        Some(_) => Some(load_vocab(&input("paths.vocab", &cfg.paths.vocab)?).map_err(data)?),
        None => None,
    };
    let encoder: Encoder = load_checkpoint(&ckpt).map_err(data)?;
    let f = &cfg.finetune;
    let kind = match f.head {
        HeadChoice::Sequence => HeadKind::Sequence {
            n_classes: f.classes,
            pooling: f.pooling,
        },
        HeadChoice::Token => HeadKind::Token {
            n_classes: f.classes,
        },
    };
    let mut clf = attach_head(encoder, kind).map_err(data)?;
    let train = read_examples("paths.finetune_train", &train_path, &clf, vocab.as_ref())?;
    let eval = read_examples("paths.finetune_eval", &eval_path, &clf, vocab.as_ref())?;
    let counts = label_counts(&train, f.classes).map_err(data)?;
    let weights = class_weights::<f64>(&counts, cfg.metric_mode).map_err(data)?;
    let ft = FinetuneConfig {
        batch_size: f.batch_size,
        epochs: f.epochs,
        optimizer: f.optimizer,
        seed: stage_seed(cfg.seed, Stage::Finetune),
    };
    let outcome = finetune(&mut clf, &train, &eval, &weights, &ft).map_err(data)?;
    let preds = Predictions {
        n_classes: Some(f.classes),
        y_true: outcome.y_true,
        y_pred: outcome.y_pred,
    };
    write_json(&out, &preds)?;
    let report = if preds.y_true.is_empty() {
        None
    } else {
        Some(
            evaluate(
                &preds.y_true,
                &preds.y_pred,
                f.classes,
                cfg.metric_mode,
                cfg.unnormalized_accuracy,
            )
            .map_err(data)?,
        )
    };
    let body = json!({
        "train_examples": train.len(),
        "eval_examples": eval.len(),
        "train_label_counts": counts,
        "updates": outcome.losses.len(),
        "final_loss": outcome.losses.last(),
        "weighted_f1": report.as_ref().map(|r| r.weighted_f1),
        "weighted_accuracy": report.as_ref().map(|r| r.weighted_accuracy),
        "weighted_recall": report.as_ref().map(|r| r.weighted_recall),
    });
    write_manifest(&out, "finetune", cfg.seed, body.clone())?;
    with_summary("finetune", cfg.seed, body)
}

fn mine(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let store = open_store(cfg)?;
    let out = output("paths.candidates", &cfg.paths.candidates)?;
    let result = mine_all(&store, &cfg.miner);
    export_candidates(result.all(), &out).map_err(data)?;
    let report = serde_json::to_value(result.report()).map_err(data)?;
    write_manifest(&out, "mine", cfg.seed, json!({ "report": report }))?;
    with_summary("mine", cfg.seed, report)
}

fn sample_annotations(cfg: &PipelineConfig) -> Result<Value, CliError> {
    let cands =
        read_candidates(&input("paths.candidates", &cfg.paths.candidates)?).map_err(data)?;
    let out = output("paths.annotation_sample", &cfg.paths.annotation_sample)?;
    let sample = sample_for_annotation(
        &cands,
        cfg.annotation_size,
        stage_seed(cfg.seed, Stage::Annotation),
    )
    .map_err(data)?;
    export_candidates(&sample.items, &out).map_err(data)?;
    let per: serde_json::Map<String, Value> = Heuristic::ALL
        .iter()
        .map(|h| {
            let n = sample.items.iter().filter(|c| c.heuristic == *h).count();
            (h.name().to_string(), json!(n))
        })
        .collect();
    let body = json!({
        "requested": cfg.annotation_size,
        "sampled": sample.items.len(),
        "per_heuristic": per,
        "shortfalls": sample.shortfalls,
    });
    write_manifest(&out, "sample-annotations", cfg.seed, body.clone())?;
    with_summary("sample-annotations", cfg.seed, body)
}

fn kappa(cfg: &PipelineConfig, a: Option<&str>, b: Option<&str>) -> Result<Value, CliError> {
    let sample = read_candidates(&input(
        "paths.annotation_sample",
        &cfg.paths.annotation_sample,
    )?)
    .map_err(data)?;
    let known: BTreeSet<_> = sample.iter().map(|c| c.answer_id).collect();
    let records = import_annotations(&input("paths.annotations", &cfg.paths.annotations)?, &known)
        .map_err(data)?;
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a.to_string(), b.to_string()),
        (None, None) => {
            let who: BTreeSet<&str> = records.iter().map(|r| r.annotator.as_str()).collect();
            if who.len() != 2 {
                return Err(usage(format!(
                    "annotator-a/annotator-b: file has {} annotators, name the pair to compare",
                    who.len()
                )));
            }
            let mut it = who.into_iter();
            (
                it.next().unwrap().to_string(),
                it.next().unwrap().to_string(),
            )
        }
        _ => return Err(usage("annotator-a/annotator-b: give both or neither")),
    };
    let (la, lb) = paired_labels(&records, &a, &b);
    let k = cohen_kappa(&la, &lb).map_err(data)?;
    let agree = la.iter().zip(&lb).filter(|(x, y)| x == y).count();
    with_summary(
        "kappa",
        cfg.seed,
        json!({
            "annotator_a": a,
            "annotator_b": b,
            "n_items": la.len(),
            "observed_agreement": agree as f64 / la.len() as f64,
            "kappa": k,
        }),
    )
}

fn eval(cfg: &PipelineConfig, classes: Option<usize>) -> Result<Value, CliError> {
    let path = input("paths.predictions", &cfg.paths.predictions)?;
    let preds: Predictions = serde_json::from_reader(reader(&path)?)
        .map_err(|e| data(format!("{}: {e}", path.display())))?;
    let n = classes.or(preds.n_classes).unwrap_or_else(|| {
        preds
            .y_true
            .iter()
            .chain(&preds.y_pred)
            .max()
            .map_or(0, |m| m + 1)
    });
    let report = evaluate(
        &preds.y_true,
        &preds.y_pred,
        n,
        cfg.metric_mode,
        cfg.unnormalized_accuracy,
    )
    .map_err(data)?;
    let summary = with_summary("eval", cfg.seed, &report)?;
    if let Some(p) = &cfg.paths.report {
        write_json(&output("paths.report", &Some(p.clone()))?, &summary)?;
    }
    Ok(summary)
}
