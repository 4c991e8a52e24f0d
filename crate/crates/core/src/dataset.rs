//! MRQA JSON-lines ingestion and seeded few-shot sampling.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five default seeds for repeated few-shot runs.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Few-shot training set sizes.
pub const FEW_SHOT_SIZES: [usize; 4] = [16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub qid: String,
    pub question: String,
    pub context: String,
    pub gold_answers: Vec<String>,
    /// Byte ranges of detected answers in `context`.
    #[serde(default)]
    pub answer_char_spans: Vec<(usize, usize)>,
}

impl QAExample {
    pub fn first_answer(&self) -> &str {
        self.gold_answers.first().map(String::as_str).unwrap_or("")
    }
}

/// SplitMix64 (Steele, Lea and Flood), the generator behind every seeded
/// choice in the crate.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Value in `0..bound` as `next_u64() % bound`. The modulo bias is at most
    /// `bound / 2^64`, which keeps the stream trivially portable.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        self.next_u64() % bound
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub source_size: usize,
    pub k: usize,
    pub seed: u64,
    pub selected_indices: Vec<usize>,
    pub selected_qids: Vec<String>,
}

impl FewShotSplit {
    pub fn select<'a>(&self, examples: &'a [QAExample]) -> Vec<&'a QAExample> {
        self.selected_indices.iter().map(|&i| &examples[i]).collect()
    }

    pub fn manifest(&self, dataset: &str) -> SplitManifest {
        SplitManifest {
            dataset: dataset.to_string(),
            k: self.k,
            seed: self.seed,
            qids: self.selected_qids.clone(),
        }
    }
}

/// On-disk form of a split: `{dataset, k, seed, qids}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub k: usize,
    pub seed: u64,
    pub qids: Vec<String>,
}

/// Draws `min(k, n)` examples without replacement with a partial
/// Fisher-Yates shuffle driven by `SplitMix64(seed)`. Position `i` swaps with
/// `i + below(n - i)`. Selection order is output order, so for a fixed seed
/// the split for a smaller `k` is a prefix of the split for a larger one.
pub fn sample_few_shot(examples: &[QAExample], k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let n = examples.len();
    let take = k.min(n);
    let mut rng = SplitMix64::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(take);
    Ok(FewShotSplit {
        source_size: n,
        k,
        seed,
        selected_qids: idx.iter().map(|&i| examples[i].qid.clone()).collect(),
        selected_indices: idx,
    })
}

/// Counts of rows that were skipped or repaired while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarnings {
    pub skipped_records: usize,
    pub skipped_questions: usize,
    pub dropped_spans: usize,
}

impl LoadWarnings {
    pub fn total(&self) -> usize {
        self.skipped_records + self.skipped_questions + self.dropped_spans
    }
}

#[derive(Clone, Debug)]
pub struct MrqaDataset {
    pub header: serde_json::Value,
    pub examples: Vec<QAExample>,
    pub warnings: LoadWarnings,
}

impl MrqaDataset {
    /// `header.dataset`, when present.
    pub fn name(&self) -> Option<&str> {
        self.header.get("dataset").and_then(|v| v.as_str())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    context: Option<String>,
    qas: Option<Vec<serde_json::Value>>,
}

#[derive(Deserialize)]
struct RawQa {
    qid: Option<String>,
    id: Option<String>,
    question: Option<String>,
    answers: Option<Vec<String>>,
    #[serde(default)]
    detected_answers: Vec<RawDetected>,
}

#[derive(Deserialize)]
struct RawDetected {
    text: Option<String>,
    #[serde(default)]
    char_spans: Vec<(usize, usize)>,
}

/// Loads an MRQA file, gzip-compressed or plain (detected by magic bytes).
pub fn load_mrqa(path: impl AsRef<Path>) -> Result<MrqaDataset> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let got = read_prefix(&mut file, &mut magic).map_err(|e| Error::io(path, e))?;
    let prefix = std::io::Cursor::new(magic[..got].to_vec());
    let reader: Box<dyn Read> = if got == 2 && magic == [0x1f, 0x8b] {
        Box::new(MultiGzDecoder::new(prefix.chain(file)))
    } else {
        Box::new(prefix.chain(file))
    };
    let ds = parse_mrqa(BufReader::new(reader), path)?;
    let w = ds.warnings;
    if w.total() > 0 {
        log::warn!(
            "{}: skipped {} records, {} questions; dropped {} answer spans",
            path.display(),
            w.skipped_records,
            w.skipped_questions,
            w.dropped_spans
        );
    }
    Ok(ds)
}

fn read_prefix(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Parses MRQA JSON lines. `path` is only used in error messages.
pub fn parse_mrqa(reader: impl BufRead, path: &Path) -> Result<MrqaDataset> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::MissingHeader { path: path.into() }),
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|_| Error::MissingHeader { path: path.into() })?;
                match value.get("header") {
                    Some(h) => break h.clone(),
                    None => return Err(Error::MissingHeader { path: path.into() }),
                }
            }
        }
    };

    let mut examples = Vec::new();
    let mut warnings = LoadWarnings::default();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("{}:{}: {e}", path.display(), i + 1);
                warnings.skipped_records += 1;
                continue;
            }
        };
        let (Some(context), Some(qas)) = (record.context, record.qas) else {
            warnings.skipped_records += 1;
            continue;
        };
        let char_to_byte: Vec<usize> = context
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(context.len()))
            .collect();
        for qa in qas {
            let Ok(qa) = serde_json::from_value::<RawQa>(qa) else {
                warnings.skipped_questions += 1;
                continue;
            };
            let (Some(qid), Some(question), Some(answers)) =
                (qa.qid.or(qa.id), qa.question, qa.answers)
            else {
                warnings.skipped_questions += 1;
                continue;
            };
            if answers.is_empty() {
                warnings.skipped_questions += 1;
                continue;
            }
            let mut spans = Vec::new();
            for det in &qa.detected_answers {
                for &(s, e) in &det.char_spans {
                    match detected_span(&context, &char_to_byte, s, e, det.text.as_deref()) {
                        Some(span) if !spans.contains(&span) => spans.push(span),
                        Some(_) => {}
                        None => warnings.dropped_spans += 1,
                    }
                }
            }
            examples.push(QAExample {
                qid,
                question,
                context: context.clone(),
                gold_answers: answers,
                answer_char_spans: spans,
            });
        }
    }
    Ok(MrqaDataset {
        header,
        examples,
        warnings,
    })
}

/// Converts an inclusive character span to a byte range, checking that the
/// slice reproduces the detected text.
fn detected_span(
    context: &str,
    char_to_byte: &[usize],
    start: usize,
    end_inclusive: usize,
    text: Option<&str>,
) -> Option<(usize, usize)> {
    if start > end_inclusive || end_inclusive + 1 >= char_to_byte.len() {
        return None;
    }
    let (bs, be) = (char_to_byte[start], char_to_byte[end_inclusive + 1]);
    match text {
        Some(t) if &context[bs..be] != t => None,
        _ => Some((bs, be)),
    }
}
