//! Task data: JSONL ingestion, synthetic multi-domain suites, hashed
//! tokenization, and batching.
//!
//! The tokenizer maps strings into a fixed bucket space with a stable hash,
//! so no vocabulary is ever built across tasks and nothing about one task's
//! lexicon leaks into another through preprocessing. Special ids: 0 pad,
//! 1 `[CLS]`, 2 `[SEP]`; word ids start at 3.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const FIRST_WORD_ID: usize = 3;

pub const LABEL_NEGATIVE: usize = 0;
pub const LABEL_POSITIVE: usize = 1;
pub const LABEL_NEUTRAL: usize = 2;
pub const NUM_CLASSES: usize = 3;

/// One aspect-sentiment example: a sentence, the aspect term inside it, and
/// the polarity of the opinion about that aspect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub sentence: Vec<String>,
    pub aspect: Vec<String>,
    pub label: usize,
}

impl Example {
    pub fn new(sentence: Vec<String>, aspect: Vec<String>, label: usize) -> Result<Self> {
        if sentence.is_empty() {
            return Err(Error::InvalidArg("example sentence is empty".into()));
        }
        if label >= NUM_CLASSES {
            return Err(Error::InvalidArg(format!("label {label} outside 0..3")));
        }
        Ok(Example { sentence, aspect, label })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// A tokenized, padded batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// Token ids, row-major [n, len].
    pub tokens: Vec<usize>,
    /// 1.0 for real tokens, 0.0 for padding, same layout.
    pub pad_mask: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub len: usize,
    pub task_id: usize,
}

/// FNV-1a over UTF-8 bytes; stable across platforms and runs.
fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash a token string into {3, .., vocab_buckets - 1}.
pub fn token_id(token: &str, vocab_buckets: usize) -> usize {
    FIRST_WORD_ID + (stable_hash(token) % (vocab_buckets - FIRST_WORD_ID) as u64) as usize
}

/// Encode one example as `[CLS] sentence [SEP] aspect [SEP]`, truncated to
/// `max_len` with the trailing `[SEP]` preserved. Returns the ids and
/// whether truncation happened.
pub fn tokenize(example: &Example, vocab_buckets: usize, max_len: usize) -> Result<(Vec<usize>, bool)> {
    if vocab_buckets < 16 {
        return Err(Error::InvalidArg(format!(
            "vocab_buckets must be at least 16, got {vocab_buckets}"
        )));
    }
    if max_len < 4 {
        return Err(Error::InvalidArg(format!("max_len must be at least 4, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(example.sentence.len() + example.aspect.len() + 3);
    ids.push(CLS_ID);
    ids.extend(example.sentence.iter().map(|t| token_id(t, vocab_buckets)));
    ids.push(SEP_ID);
    ids.extend(example.aspect.iter().map(|t| token_id(t, vocab_buckets)));
    ids.push(SEP_ID);
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(SEP_ID);
        return Ok((ids, true));
    }
    Ok((ids, false))
}

// ── synthetic suite ──────────────────────────────────────────────────

/// Knobs for the synthetic multi-domain generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_tasks: usize,
    pub examples_per_task: usize,
    /// Fraction of the shared sentiment lexicon whose polarity flips in
    /// odd-indexed tasks, creating cross-task conflict.
    pub flip_fraction: f64,
}

const SHARED_SENTIMENT_WORDS: usize = 24;
const DOMAIN_WORDS: usize = 10;
const ASPECT_WORDS: usize = 4;

/// Generate a deterministic suite of 2-class tasks. Each task mixes a
/// private domain lexicon with a shared sentiment lexicon; a fraction of
/// the shared words invert polarity in odd-indexed tasks so that later
/// training pushes against earlier knowledge.
pub fn generate_synthetic_suite(spec: &SyntheticSpec) -> Result<Vec<TaskDataset>> {
    if spec.n_tasks < 2 {
        return Err(Error::InvalidArg(format!("n_tasks must be >= 2, got {}", spec.n_tasks)));
    }
    if spec.examples_per_task < 30 {
        return Err(Error::InvalidArg(format!(
            "examples_per_task must be >= 30, got {}",
            spec.examples_per_task
        )));
    }
    if !(0.0..=1.0).contains(&spec.flip_fraction) {
        return Err(Error::InvalidArg("flip_fraction out of range".into()));
    }

    let mut rng = Rng::new(spec.seed).fork(0x5947_4e54_4845_5449);

    // Shared sentiment lexicon: half base-positive, half base-negative.
    let sentiment: Vec<(String, bool)> = (0..SHARED_SENTIMENT_WORDS)
        .map(|i| (format!("senti{i:02}"), i % 2 == 0))
        .collect();
    let mut flip_order: Vec<usize> = (0..SHARED_SENTIMENT_WORDS).collect();
    rng.shuffle(&mut flip_order);
    let n_flipped = (spec.flip_fraction * SHARED_SENTIMENT_WORDS as f64).round() as usize;
    let flipped: Vec<bool> = {
        let mut f = vec![false; SHARED_SENTIMENT_WORDS];
        for &w in flip_order.iter().take(n_flipped) {
            f[w] = true;
        }
        f
    };

    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let mut task_rng = rng.fork(t as u64 + 1);
        let domain: Vec<String> = (0..DOMAIN_WORDS).map(|j| format!("dom{t}w{j:02}")).collect();
        let aspects: Vec<String> = (0..ASPECT_WORDS).map(|j| format!("asp{t}x{j}")).collect();
        // In odd-indexed tasks, flipped words carry inverted polarity.
        let polarity: Vec<bool> = sentiment
            .iter()
            .enumerate()
            .map(|(w, (_, base_pos))| {
                if flipped[w] && t % 2 == 1 {
                    !base_pos
                } else {
                    *base_pos
                }
            })
            .collect();

        let half = spec.examples_per_task / 2;
        let counts = [spec.examples_per_task - half, half]; // negatives, positives
        let mut by_class: Vec<Vec<Example>> = vec![Vec::new(), Vec::new()];
        for (label, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                by_class[label].push(synth_example(
                    &mut task_rng,
                    label == LABEL_POSITIVE,
                    &domain,
                    &aspects,
                    &sentiment,
                    &polarity,
                ));
            }
        }

        // Stratified 70/15/15 split keeps every split balanced per class.
        let mut train = Vec::new();
        let mut valid = Vec::new();
        let mut test = Vec::new();
        for class in by_class {
            let n = class.len();
            let n_train = (n * 70) / 100;
            let n_valid = (n * 15) / 100;
            for (i, ex) in class.into_iter().enumerate() {
                if i < n_train {
                    train.push(ex);
                } else if i < n_train + n_valid {
                    valid.push(ex);
                } else {
                    test.push(ex);
                }
            }
        }
        task_rng.shuffle(&mut train);
        task_rng.shuffle(&mut valid);
        task_rng.shuffle(&mut test);
        tasks.push(TaskDataset { name: format!("task{t}"), train, valid, test });
    }
    Ok(tasks)
}

fn synth_example(
    rng: &mut Rng,
    positive: bool,
    domain: &[String],
    aspects: &[String],
    sentiment: &[(String, bool)],
    polarity: &[bool],
) -> Example {
    let majority: Vec<usize> = polarity
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == positive)
        .map(|(w, _)| w)
        .collect();
    let minority: Vec<usize> = polarity
        .iter()
        .enumerate()
        .filter(|(_, &p)| p != positive)
        .map(|(w, _)| w)
        .collect();

    // three polarity words with a strict majority deciding the label
    let n_major = [2usize, 3][rng.below(2)];
    let mut words: Vec<String> = Vec::new();
    for _ in 0..n_major {
        words.push(sentiment[majority[rng.below(majority.len())]].0.clone());
    }
    for _ in n_major..3 {
        words.push(sentiment[minority[rng.below(minority.len())]].0.clone());
    }
    let n_filler = 2 + rng.below(3);
    for _ in 0..n_filler {
        words.push(domain[rng.below(domain.len())].clone());
    }
    let aspect = aspects[rng.below(aspects.len())].clone();
    words.push(aspect.clone());
    rng.shuffle(&mut words);

    Example {
        sentence: words,
        aspect: vec![aspect],
        label: if positive { LABEL_POSITIVE } else { LABEL_NEGATIVE },
    }
}

// ── JSONL ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    aspect: String,
    label: String,
}

/// Load one split from newline-delimited JSON records with fields
/// `text`, `aspect`, `label` in {positive, negative, neutral}
/// (case-insensitive). Tokenization is by whitespace, file order kept.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let label = match rec.label.to_ascii_lowercase().as_str() {
            "negative" => LABEL_NEGATIVE,
            "positive" => LABEL_POSITIVE,
            "neutral" => LABEL_NEUTRAL,
            other => {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: idx + 1,
                    msg: format!("unknown label {other:?}"),
                })
            }
        };
        let sentence: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
        if sentence.is_empty() {
            return Err(Error::Parse {
                path: display.clone(),
                line: idx + 1,
                msg: "empty text".into(),
            });
        }
        let aspect: Vec<String> = rec.aspect.split_whitespace().map(str::to_string).collect();
        out.push(Example { sentence, aspect, label });
    }
    if out.is_empty() {
        return Err(Error::Parse { path: display, line: 0, msg: "empty split".into() });
    }
    Ok(out)
}

/// Write one split in the same JSONL layout `load_jsonl` accepts.
pub fn dump_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let display = path.display().to_string();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    for ex in examples {
        let rec = JsonlRecord {
            text: ex.sentence.join(" "),
            aspect: ex.aspect.join(" "),
            label: match ex.label {
                LABEL_NEGATIVE => "negative",
                LABEL_POSITIVE => "positive",
                _ => "neutral",
            }
            .to_string(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::InvalidArg(format!("serialize record: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    Ok(())
}

/// Load a task directory containing train/valid/test.jsonl.
pub fn load_task_dir(dir: &Path, name: &str) -> Result<TaskDataset> {
    Ok(TaskDataset {
        name: name.to_string(),
        train: load_jsonl(&dir.join("train.jsonl"))?,
        valid: load_jsonl(&dir.join("valid.jsonl"))?,
        test: load_jsonl(&dir.join("test.jsonl"))?,
    })
}

/// Dump a suite as `<outdir>/<task>/{train,valid,test}.jsonl`.
pub fn dump_suite(outdir: &Path, tasks: &[TaskDataset]) -> Result<()> {
    for task in tasks {
        let dir = outdir.join(&task.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        dump_jsonl(&dir.join("train.jsonl"), &task.train)?;
        dump_jsonl(&dir.join("valid.jsonl"), &task.valid)?;
        dump_jsonl(&dir.join("test.jsonl"), &task.test)?;
    }
    Ok(())
}

// ── batching ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled, final short batch dropped (contrastive terms need >= 2
    /// samples per batch).
    Train,
    /// File order, all examples kept.
    Eval,
}

/// Tokenize and batch a split. Returns the batches plus the number of
/// examples whose encoding was truncated.
pub fn batch_iter(
    split: &[Example],
    task_id: usize,
    batch_size: usize,
    vocab_buckets: usize,
    max_len: usize,
    mode: BatchMode,
    shuffle_seed: u64,
) -> Result<(Vec<EncodedBatch>, usize)> {
    if batch_size < 2 {
        return Err(Error::InvalidArg(format!("batch_size must be >= 2, got {batch_size}")));
    }
    if mode == BatchMode::Train && split.len() < batch_size {
        return Err(Error::InvalidArg(format!(
            "training split has {} examples, fewer than batch_size {}",
            split.len(),
            batch_size
        )));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    if mode == BatchMode::Train {
        Rng::new(shuffle_seed).shuffle(&mut order);
    }
    let mut batches = Vec::new();
    let mut truncated = 0usize;
    for chunk in order.chunks(batch_size) {
        if mode == BatchMode::Train && chunk.len() < batch_size {
            break;
        }
        let mut encoded = Vec::with_capacity(chunk.len());
        let mut width = 0usize;
        for &i in chunk {
            let (ids, trunc) = tokenize(&split[i], vocab_buckets, max_len)?;
            truncated += trunc as usize;
            width = width.max(ids.len());
            encoded.push((ids, split[i].label));
        }
        let n = encoded.len();
        let mut tokens = vec![PAD_ID; n * width];
        let mut pad_mask = vec![0.0; n * width];
        let mut labels = Vec::with_capacity(n);
        for (r, (ids, label)) in encoded.into_iter().enumerate() {
            for (c, id) in ids.iter().enumerate() {
                tokens[r * width + c] = *id;
                pad_mask[r * width + c] = 1.0;
            }
            labels.push(label);
        }
        batches.push(EncodedBatch { tokens, pad_mask, labels, n, len: width, task_id });
    }
    Ok((batches, truncated))
}
