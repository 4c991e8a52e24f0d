//! Cloze sample construction and prompt rendering.
//!
//! Every QA example becomes one `ori` prompt pair:
//!
//! ```text
//! input:  Question: <q> Answer: <mask> Context: <c>
//! target: Question: <q> Answer: <a> Context: <c>
//! ```
//!
//! and every retained entity span of its context becomes one `aug` pair in
//! which the span is replaced by the mask token in the context, the question
//! is fixed, and the answer is the masked surface.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{QAExample, SplitMix64};
use crate::error::{Error, Result};
use crate::matcher::{EntitySpan, MatchAutomaton};

pub const DEFAULT_MASK_TOKEN: &str = "<mask>";
pub const CLOZE_QUESTION: &str = "What is the masked entity?";
pub const SHORT_CLOZE_QUESTION: &str = "What?";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    /// entity spans, full cloze question
    #[default]
    Gotta,
    /// entity spans, the question reduced to "What?"
    What,
    /// random token spans instead of entities
    Random,
}

impl TemplateKind {
    pub fn cloze_question(self) -> &'static str {
        match self {
            TemplateKind::Gotta | TemplateKind::Random => CLOZE_QUESTION,
            TemplateKind::What => SHORT_CLOZE_QUESTION,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Ori,
    Aug,
}

/// Which context an aug target carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TargetContext {
    #[default]
    Masked,
    Original,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStyle {
    pub mask_token: String,
    pub separator: String,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self {
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
            separator: " ".to_string(),
        }
    }
}

impl PromptStyle {
    pub fn with_mask(mask_token: impl Into<String>) -> Self {
        Self {
            mask_token: mask_token.into(),
            ..Self::default()
        }
    }

    fn assemble(&self, question: &str, answer: &str, context: &str) -> String {
        let sep = &self.separator;
        format!("Question: {question}{sep}Answer: {answer}{sep}Context: {context}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeExample {
    pub source_qid: String,
    pub span: EntitySpan,
    pub masked_context: String,
    pub answer_surface: String,
    pub template_kind: TemplateKind,
    /// Every masked byte range of the source context, ascending. One entry
    /// unless all occurrences of the surface were masked.
    pub masked_ranges: Vec<(usize, usize)>,
}

impl ClozeExample {
    /// Puts the answer back at every mask, recovering the source context.
    pub fn reconstruct(&self, mask_token: &str) -> String {
        let mut out = String::with_capacity(
            self.masked_context.len() + self.masked_ranges.len() * self.answer_surface.len(),
        );
        let mut rest = self.masked_context.as_str();
        for _ in &self.masked_ranges {
            match rest.find(mask_token) {
                Some(i) => {
                    out.push_str(&rest[..i]);
                    out.push_str(&self.answer_surface);
                    rest = &rest[i + mask_token.len()..];
                }
                None => break,
            }
        }
        out.push_str(rest);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanOffsets {
    pub start: usize,
    pub end: usize,
}

/// One line of the prompt file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub id: String,
    pub kind: PairKind,
    #[serde(rename = "template")]
    pub template_kind: TemplateKind,
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
    pub question: String,
    pub answer: String,
    pub context: String,
    pub span: Option<SpanOffsets>,
    pub entity_id: Option<String>,
    pub source_qid: String,
}

pub fn render_qa_prompt(e: &QAExample, style: &PromptStyle) -> PromptPair {
    let answer = e.first_answer();
    PromptPair {
        id: format!("{}:ori", e.qid),
        kind: PairKind::Ori,
        template_kind: TemplateKind::Gotta,
        input_text: style.assemble(&e.question, &style.mask_token, &e.context),
        target_text: style.assemble(&e.question, answer, &e.context),
        question: e.question.clone(),
        answer: answer.to_string(),
        context: e.context.clone(),
        span: None,
        entity_id: None,
        source_qid: e.qid.clone(),
    }
}

fn check_span(context: &str, start: usize, end: usize) -> Result<()> {
    if start >= end || end > context.len() {
        return Err(Error::SpanOutOfBounds {
            start,
            end,
            len: context.len(),
        });
    }
    if !context.is_char_boundary(start) || !context.is_char_boundary(end) {
        return Err(Error::SpanNotCharBoundary { start, end });
    }
    Ok(())
}

/// Masks the selected occurrence of `span` in the context of `e`. Other
/// occurrences of the same surface stay visible.
pub fn make_cloze(e: &QAExample, span: &EntitySpan, style: &PromptStyle) -> Result<ClozeExample> {
    make_cloze_masking(e, span, &[], style)
}

/// Like [`make_cloze`], but also masks every span in `others` whose text
/// equals the selected one. `others` must be non-overlapping.
pub fn make_cloze_masking(
    e: &QAExample,
    span: &EntitySpan,
    others: &[EntitySpan],
    style: &PromptStyle,
) -> Result<ClozeExample> {
    let ctx = &e.context;
    check_span(ctx, span.start, span.end)?;
    let answer = &ctx[span.start..span.end];
    let mut ranges = vec![(span.start, span.end)];
    for o in others {
        if (o.start, o.end) != (span.start, span.end)
            && check_span(ctx, o.start, o.end).is_ok()
            && &ctx[o.start..o.end] == answer
            && !o.overlaps(span.start, span.end)
        {
            ranges.push((o.start, o.end));
        }
    }
    ranges.sort_unstable();
    ranges.dedup();

    let mut masked = String::with_capacity(ctx.len() + style.mask_token.len());
    let mut at = 0;
    for &(s, e) in &ranges {
        masked.push_str(&ctx[at..s]);
        masked.push_str(&style.mask_token);
        at = e;
    }
    masked.push_str(&ctx[at..]);

    let mut span = span.clone();
    span.retained = true;
    Ok(ClozeExample {
        source_qid: e.qid.clone(),
        span,
        masked_context: masked,
        answer_surface: answer.to_string(),
        template_kind: TemplateKind::Gotta,
        masked_ranges: ranges,
    })
}

pub fn render_cloze_prompt(
    cz: &ClozeExample,
    style: &PromptStyle,
    template_kind: TemplateKind,
    target_context: TargetContext,
) -> PromptPair {
    let question = template_kind.cloze_question();
    let target_ctx = match target_context {
        TargetContext::Masked => cz.masked_context.clone(),
        TargetContext::Original => cz.reconstruct(&style.mask_token),
    };
    let entity_id = match template_kind {
        TemplateKind::Random => None,
        _ => Some(cz.span.entity_id.clone()),
    };
    PromptPair {
        id: format!("{}:aug:{}-{}", cz.source_qid, cz.span.start, cz.span.end),
        kind: PairKind::Aug,
        template_kind,
        input_text: style.assemble(question, &style.mask_token, &cz.masked_context),
        target_text: style.assemble(question, &cz.answer_surface, &target_ctx),
        question: question.to_string(),
        answer: cz.answer_surface.clone(),
        context: cz.masked_context.clone(),
        span: Some(SpanOffsets {
            start: cz.span.start,
            end: cz.span.end,
        }),
        entity_id,
        source_qid: cz.source_qid.clone(),
    }
}

/// Byte ranges of the whitespace-separated tokens of `text`.
fn whitespace_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Draws up to `count` non-overlapping spans of whole whitespace tokens.
///
/// Each draw picks a length uniformly in `length_range` (in tokens), then a
/// start uniformly among the token positions where a window of that length
/// touches no earlier span. A draw with no free window is skipped, so fewer
/// than `count` spans may come back. The result is sorted by start.
pub fn random_spans(
    e: &QAExample,
    seed: u64,
    count: usize,
    length_range: (usize, usize),
) -> Vec<EntitySpan> {
    let (min_len, max_len) = (length_range.0.max(1), length_range.1.max(length_range.0.max(1)));
    let tokens = whitespace_tokens(&e.context);
    let mut used = vec![false; tokens.len()];
    let mut rng = SplitMix64::new(seed);
    let mut spans = Vec::new();
    for _ in 0..count {
        let len = min_len + rng.below((max_len - min_len + 1) as u64) as usize;
        if len > tokens.len() {
            continue;
        }
        let free: Vec<usize> = (0..=tokens.len() - len)
            .filter(|&i| !used[i..i + len].iter().any(|&u| u))
            .collect();
        if free.is_empty() {
            continue;
        }
        let i = free[rng.below(free.len() as u64) as usize];
        used[i..i + len].iter_mut().for_each(|u| *u = true);
        let (start, end) = (tokens[i].0, tokens[i + len - 1].1);
        spans.push(EntitySpan {
            surface: e.context[start..end].to_string(),
            entity_id: String::new(),
            start,
            end,
            retained: true,
        });
    }
    spans.sort_by_key(|s| s.start);
    spans
}

/// 64-bit FNV-1a, used to derive per-example seeds from qids.
fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the random spans of one example: independent of split order.
pub fn example_seed(seed: u64, qid: &str) -> u64 {
    SplitMix64::new(seed ^ fnv1a64(qid)).next_u64()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub style: PromptStyle,
    pub template: TemplateKind,
    pub seed: u64,
    pub exclude_answer_overlap: bool,
    pub mask_all_occurrences: bool,
    pub target_context: TargetContext,
    /// Token-length bounds of random spans (inclusive).
    pub random_span_tokens: (usize, usize),
    /// Random spans per example; `None` draws as many as the example has
    /// retained entity spans.
    pub random_span_count: Option<usize>,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            style: PromptStyle::default(),
            template: TemplateKind::Gotta,
            seed: 0,
            exclude_answer_overlap: false,
            mask_all_occurrences: false,
            target_context: TargetContext::Masked,
            random_span_tokens: (1, 3),
            random_span_count: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub gazetteer_fingerprint: String,
    pub pattern_count: usize,
    pub seed: u64,
    pub options: AugmentOptions,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleStats {
    pub qid: String,
    pub raw_matches: usize,
    pub retained_spans: usize,
    pub excluded_answer_overlap: usize,
    pub aug_pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub examples: usize,
    pub ori_pairs: usize,
    pub aug_pairs: usize,
    pub skipped_mask_collision: usize,
    /// Mean number of aug pairs per ori pair.
    pub avg_aug_per_example: f64,
    pub per_example: Vec<ExampleStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSet {
    pub ori_pairs: Vec<PromptPair>,
    pub aug_pairs: Vec<PromptPair>,
    pub provenance: Provenance,
    pub stats: AugmentStats,
}

impl AugmentedSet {
    /// Pairs in output order: each example's ori pair followed by its aug
    /// pairs by span start, examples in source order.
    pub fn canonical_order(&self) -> impl Iterator<Item = &PromptPair> + '_ {
        let mut aug = self.aug_pairs.iter();
        self.ori_pairs
            .iter()
            .zip(&self.stats.per_example)
            .flat_map(move |(ori, st)| {
                std::iter::once(ori).chain(aug.by_ref().take(st.aug_pairs).collect::<Vec<_>>())
            })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for pair in self.canonical_order() {
            serde_json::to_writer(&mut w, pair)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

struct ExampleOutput {
    ori: PromptPair,
    aug: Vec<PromptPair>,
    stats: ExampleStats,
}

fn answer_ranges(e: &QAExample) -> Vec<(usize, usize)> {
    if !e.answer_char_spans.is_empty() {
        return e.answer_char_spans.clone();
    }
    e.gold_answers
        .iter()
        .filter(|a| !a.is_empty())
        .flat_map(|a| {
            e.context
                .match_indices(a.as_str())
                .map(|(i, m)| (i, i + m.len()))
        })
        .collect()
}

fn has_mask_collision(e: &QAExample, mask: &str) -> bool {
    mask.is_empty()
        || e.question.contains(mask)
        || e.context.contains(mask)
        || e.first_answer().contains(mask)
}

fn augment_example(
    e: &QAExample,
    automaton: &MatchAutomaton,
    opts: &AugmentOptions,
) -> Result<ExampleOutput> {
    let raw = automaton.find_all(&e.context);
    let entity_spans = crate::matcher::resolve_spans(&raw, &e.context);
    let retained = entity_spans.len();

    let mut spans = match opts.template {
        TemplateKind::Random => random_spans(
            e,
            example_seed(opts.seed, &e.qid),
            opts.random_span_count.unwrap_or(retained),
            opts.random_span_tokens,
        ),
        _ => entity_spans,
    };
    let mut excluded = 0;
    if opts.exclude_answer_overlap {
        let answers = answer_ranges(e);
        let before = spans.len();
        spans.retain(|s| !answers.iter().any(|&(a, b)| s.overlaps(a, b)));
        excluded = before - spans.len();
    }

    let mut aug = Vec::with_capacity(spans.len());
    for span in &spans {
        let others: &[EntitySpan] = if opts.mask_all_occurrences { &spans } else { &[] };
        let mut cz = make_cloze_masking(e, span, others, &opts.style)?;
        cz.template_kind = opts.template;
        aug.push(render_cloze_prompt(
            &cz,
            &opts.style,
            opts.template,
            opts.target_context,
        ));
    }
    let mut ori = render_qa_prompt(e, &opts.style);
    ori.template_kind = opts.template;
    Ok(ExampleOutput {
        ori,
        stats: ExampleStats {
            qid: e.qid.clone(),
            raw_matches: raw.len(),
            retained_spans: retained,
            excluded_answer_overlap: excluded,
            aug_pairs: aug.len(),
        },
        aug,
    })
}

/// Builds the ori and aug prompt pairs for `examples`. Examples are
/// processed in parallel; the output order does not depend on scheduling.
pub fn augment_dataset(
    examples: &[QAExample],
    automaton: &MatchAutomaton,
    opts: &AugmentOptions,
) -> Result<AugmentedSet> {
    let mut skipped = 0;
    let usable: Vec<&QAExample> = examples
        .iter()
        .filter(|e| {
            let collide = has_mask_collision(e, &opts.style.mask_token);
            if collide {
                log::warn!("{}: mask token already present, example skipped", e.qid);
                skipped += 1;
            }
            !collide
        })
        .collect();

    let outputs: Vec<ExampleOutput> = usable
        .par_iter()
        .map(|e| augment_example(e, automaton, opts))
        .collect::<Result<_>>()?;

    let mut set = AugmentedSet {
        ori_pairs: Vec::with_capacity(outputs.len()),
        aug_pairs: Vec::new(),
        provenance: Provenance {
            gazetteer_fingerprint: automaton.fingerprint().to_string(),
            pattern_count: automaton.pattern_count(),
            seed: opts.seed,
            options: opts.clone(),
        },
        stats: AugmentStats {
            skipped_mask_collision: skipped,
            ..Default::default()
        },
    };
    for out in outputs {
        set.ori_pairs.push(out.ori);
        set.aug_pairs.extend(out.aug);
        set.stats.per_example.push(out.stats);
    }
    set.stats.examples = set.ori_pairs.len();
    set.stats.ori_pairs = set.ori_pairs.len();
    set.stats.aug_pairs = set.aug_pairs.len();
    set.stats.avg_aug_per_example = if set.ori_pairs.is_empty() {
        0.0
    } else {
        set.aug_pairs.len() as f64 / set.ori_pairs.len() as f64
    };
    Ok(set)
}

/// Reads a prompt file back. Any malformed line is an error naming its line.
pub fn read_prompt_pairs(reader: impl BufRead, path: &std::path::Path) -> Result<Vec<PromptPair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

/// Table-style counts over a prompt file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub ori_pairs: usize,
    pub aug_pairs: usize,
    pub avg_aug_per_example: f64,
    pub max_aug_per_example: usize,
    pub examples_without_aug: usize,
    pub templates: std::collections::BTreeMap<String, usize>,
}

pub fn summarize_pairs(pairs: &[PromptPair]) -> PairSummary {
    let mut s = PairSummary::default();
    let mut per_source: indexmap::IndexMap<&str, usize> = indexmap::IndexMap::new();
    for p in pairs {
        let name = serde_json::to_value(p.template_kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *s.templates.entry(name).or_default() += 1;
        match p.kind {
            PairKind::Ori => {
                s.ori_pairs += 1;
                per_source.entry(&p.source_qid).or_default();
            }
            PairKind::Aug => {
                s.aug_pairs += 1;
                *per_source.entry(&p.source_qid).or_default() += 1;
            }
        }
    }
    s.max_aug_per_example = per_source.values().copied().max().unwrap_or(0);
    s.examples_without_aug = per_source.values().filter(|&&n| n == 0).count();
    if s.ori_pairs > 0 {
        s.avg_aug_per_example = s.aug_pairs as f64 / s.ori_pairs as f64;
    }
    s
}
