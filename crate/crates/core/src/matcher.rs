//! Multi-pattern exact matching of gazetteer surfaces in context text.
//!
//! [`MatchAutomaton`] is an Aho-Corasick automaton over the UTF-8 bytes of
//! every distinct normalized surface. Transitions are stored in a compact
//! sorted layout (one contiguous slice per state) with a dense table for the
//! root, which keeps a multi-million-pattern dictionary within a few hundred
//! megabytes. [`MatchAutomaton::find_all`] reports every occurrence,
//! overlaps included; [`resolve_spans`] then applies the word-boundary filter
//! and the greedy leftmost-longest overlap policy.

use std::collections::VecDeque;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gazetteer::{Gazetteer, NormalizationOptions};

type StateId = u32;

const ROOT: StateId = 0;
const NONE: u32 = u32::MAX;

/// A single occurrence of a pattern in a text. Offsets are byte offsets into
/// the original (un-normalized) text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RawMatch<'a> {
    pub surface: &'a str,
    pub entity_id: &'a str,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub surface: String,
    pub entity_id: String,
    pub start: usize,
    pub end: usize,
    pub retained: bool,
}

impl EntitySpan {
    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start < end && start < self.end
    }
}

impl From<&RawMatch<'_>> for EntitySpan {
    fn from(m: &RawMatch<'_>) -> Self {
        EntitySpan {
            surface: m.surface.to_string(),
            entity_id: m.entity_id.to_string(),
            start: m.start,
            end: m.end,
            retained: false,
        }
    }
}

struct Pattern {
    surface: Box<str>,
    entity_id: Box<str>,
}

pub struct MatchAutomaton {
    root: Box<[StateId; 256]>,
    /// `trans_start[s]..trans_start[s + 1]` indexes the transitions of state `s`
    trans_start: Vec<u32>,
    trans_bytes: Vec<u8>,
    trans_targets: Vec<StateId>,
    fail: Vec<StateId>,
    /// pattern ending exactly at this state, or NONE
    output: Vec<u32>,
    /// nearest proper suffix state carrying an output, or NONE
    dict: Vec<StateId>,
    patterns: Vec<Pattern>,
    options: NormalizationOptions,
    fingerprint: String,
}

impl fmt::Debug for MatchAutomaton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchAutomaton")
            .field("pattern_count", &self.pattern_count())
            .field("state_count", &self.state_count())
            .field("options", &self.options)
            .finish()
    }
}

/// Compiles every distinct normalized surface of `g`. Each pattern reports the
/// first-listed entity id for its surface.
pub fn build_automaton(g: &Gazetteer) -> Result<MatchAutomaton> {
    if g.surface_count() == 0 {
        return Err(Error::EmptyGazetteer);
    }
    let patterns = g
        .surfaces()
        .map(|(surface, mut ids)| Pattern {
            surface: surface.into(),
            entity_id: ids.next().unwrap_or_default().into(),
        })
        .collect();
    Ok(Builder::new(patterns).build(*g.normalization()))
}

struct Builder {
    patterns: Vec<Pattern>,
    first_child: Vec<StateId>,
    next_sibling: Vec<StateId>,
    last_child: Vec<StateId>,
    byte: Vec<u8>,
    output: Vec<u32>,
}

impl Builder {
    fn new(patterns: Vec<Pattern>) -> Self {
        Builder {
            patterns,
            first_child: vec![NONE],
            next_sibling: vec![NONE],
            last_child: vec![NONE],
            byte: vec![0],
            output: vec![NONE],
        }
    }

    fn add_state(&mut self, parent: StateId, b: u8) -> StateId {
        let id = self.byte.len() as StateId;
        self.first_child.push(NONE);
        self.next_sibling.push(NONE);
        self.last_child.push(NONE);
        self.byte.push(b);
        self.output.push(NONE);
        let p = parent as usize;
        match self.last_child[p] {
            NONE => self.first_child[p] = id,
            prev => self.next_sibling[prev as usize] = id,
        }
        self.last_child[p] = id;
        id
    }

    fn build(mut self, options: NormalizationOptions) -> MatchAutomaton {
        // Inserting in byte-lexicographic order means a child for byte `b`,
        // if it exists, is always the most recently added child, and sibling
        // lists come out sorted.
        let mut order: Vec<u32> = (0..self.patterns.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            self.patterns[a as usize]
                .surface
                .as_bytes()
                .cmp(self.patterns[b as usize].surface.as_bytes())
        });
        for &pid in &order {
            let mut state = ROOT;
            for i in 0..self.patterns[pid as usize].surface.len() {
                let b = self.patterns[pid as usize].surface.as_bytes()[i];
                let last = self.last_child[state as usize];
                state = if last != NONE && self.byte[last as usize] == b {
                    last
                } else {
                    self.add_state(state, b)
                };
            }
            self.output[state as usize] = pid;
        }
        drop(order);

        let n = self.byte.len();
        let mut trans_start = Vec::with_capacity(n + 1);
        let mut trans_bytes = Vec::with_capacity(n.saturating_sub(1));
        let mut trans_targets = Vec::with_capacity(n.saturating_sub(1));
        for s in 0..n {
            trans_start.push(trans_bytes.len() as u32);
            let mut c = self.first_child[s];
            while c != NONE {
                trans_bytes.push(self.byte[c as usize]);
                trans_targets.push(c);
                c = self.next_sibling[c as usize];
            }
        }
        trans_start.push(trans_bytes.len() as u32);
        let Builder {
            patterns, output, ..
        } = self;

        let mut root = Box::new([ROOT; 256]);
        for i in trans_start[0]..trans_start[1] {
            root[trans_bytes[i as usize] as usize] = trans_targets[i as usize];
        }

        let mut ac = MatchAutomaton {
            root,
            trans_start,
            trans_bytes,
            trans_targets,
            fail: vec![ROOT; n],
            output,
            dict: vec![NONE; n],
            patterns,
            options,
            fingerprint: String::new(),
        };
        ac.link_failures();
        ac.fingerprint = ac.compute_fingerprint();
        ac
    }
}

impl MatchAutomaton {
    fn link_failures(&mut self) {
        let mut queue = VecDeque::new();
        for (_, child) in self.transitions(ROOT) {
            queue.push_back(child);
        }
        while let Some(s) = queue.pop_front() {
            let range = self.trans_range(s);
            for i in range {
                let b = self.trans_bytes[i];
                let child = self.trans_targets[i];
                let mut f = self.fail[s as usize];
                let target = loop {
                    if let Some(next) = self.goto(f, b) {
                        break next;
                    }
                    if f == ROOT {
                        break ROOT;
                    }
                    f = self.fail[f as usize];
                };
                self.fail[child as usize] = target;
                self.dict[child as usize] = if self.output[target as usize] != NONE {
                    target
                } else {
                    self.dict[target as usize]
                };
                queue.push_back(child);
            }
        }
    }

    fn compute_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "case_fold={} collapse={} min_chars={}\n",
            self.options.case_fold,
            self.options.collapse_internal_whitespace,
            self.options.min_surface_chars
        ));
        for p in &self.patterns {
            h.update(p.surface.as_bytes());
            h.update(b"\t");
            h.update(p.entity_id.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    #[inline]
    fn trans_range(&self, s: StateId) -> std::ops::Range<usize> {
        self.trans_start[s as usize] as usize..self.trans_start[s as usize + 1] as usize
    }

    fn transitions(&self, s: StateId) -> impl Iterator<Item = (u8, StateId)> + '_ {
        self.trans_range(s)
            .map(move |i| (self.trans_bytes[i], self.trans_targets[i]))
    }

    #[inline]
    fn goto(&self, s: StateId, b: u8) -> Option<StateId> {
        if s == ROOT {
            let t = self.root[b as usize];
            return (t != ROOT).then_some(t);
        }
        let range = self.trans_range(s);
        let bytes = &self.trans_bytes[range.clone()];
        let idx = if bytes.len() <= 8 {
            bytes.iter().position(|&x| x == b)
        } else {
            bytes.binary_search(&b).ok()
        };
        idx.map(|i| self.trans_targets[range.start + i])
    }

    #[inline]
    fn next_state(&self, mut s: StateId, b: u8) -> StateId {
        loop {
            if let Some(t) = self.goto(s, b) {
                return t;
            }
            if s == ROOT {
                return ROOT;
            }
            s = self.fail[s as usize];
        }
    }

    /// Runs the automaton over raw bytes, calling `f(pattern, start, end)` for
    /// every occurrence. Occurrences are produced in order of end offset.
    fn scan_bytes(&self, hay: &[u8], mut f: impl FnMut(usize, usize, usize)) {
        let mut state = ROOT;
        for (i, &b) in hay.iter().enumerate() {
            state = self.next_state(state, b);
            let mut s = if self.output[state as usize] != NONE {
                state
            } else {
                self.dict[state as usize]
            };
            while s != NONE {
                let pid = self.output[s as usize] as usize;
                let end = i + 1;
                f(pid, end - self.patterns[pid].surface.len(), end);
                s = self.dict[s as usize];
            }
        }
    }

    /// Every occurrence of every pattern in `text`, overlaps included, sorted
    /// by `(start, end)`. The text is viewed under the automaton's
    /// normalization; reported offsets refer to the original text.
    pub fn find_all<'a>(&'a self, text: &str) -> Vec<RawMatch<'a>> {
        let mut out = Vec::new();
        let view = NormalizedView::new(text, &self.options);
        let mut push = |pid: usize, start: usize, end: usize| {
            let p = &self.patterns[pid];
            out.push(RawMatch {
                surface: &p.surface,
                entity_id: &p.entity_id,
                start,
                end,
            });
        };
        match &view {
            NormalizedView::Identity => self.scan_bytes(text.as_bytes(), &mut push),
            NormalizedView::Mapped { text: norm, map } => {
                self.scan_bytes(norm.as_bytes(), |pid, s, e| {
                    if let Some((start, end)) = map.original(s, e) {
                        push(pid, start, end);
                    }
                })
            }
        }
        out.sort_unstable_by_key(|m| (m.start, m.end));
        out
    }

    /// Retained entity spans of `text`: [`find_all`](Self::find_all) followed
    /// by [`resolve_spans`].
    pub fn entity_spans(&self, text: &str) -> Vec<EntitySpan> {
        resolve_spans(&self.find_all(text), text)
    }

    /// Scans many contexts concurrently; the result is in input order.
    pub fn entity_spans_batch<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Vec<Vec<EntitySpan>> {
        texts
            .par_iter()
            .map(|t| self.entity_spans(t.as_ref()))
            .collect()
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns.len()
    }

    pub fn state_count(&self) -> usize {
        self.fail.len()
    }

    pub fn options(&self) -> &NormalizationOptions {
        &self.options
    }

    /// Hex SHA-256 over the compiled patterns and normalization options.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn patterns(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.patterns
            .iter()
            .map(|p| (&*p.surface, &*p.entity_id))
    }
}

/// The text as the automaton sees it. `Identity` when normalization would not
/// change a single byte.
enum NormalizedView {
    Identity,
    Mapped { text: String, map: OffsetMap },
}

/// For every byte of the normalized text, the original byte range of the
/// source unit (a character or a collapsed whitespace run) it came from.
struct OffsetMap {
    src_start: Vec<usize>,
    src_end: Vec<usize>,
}

impl OffsetMap {
    fn original(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let n = self.src_start.len();
        let aligned_start = start == 0 || self.src_start[start] != self.src_start[start - 1];
        let aligned_end = end == n || self.src_start[end] != self.src_start[end - 1];
        (aligned_start && aligned_end).then(|| (self.src_start[start], self.src_end[end - 1]))
    }
}

impl NormalizedView {
    fn new(text: &str, opts: &NormalizationOptions) -> Self {
        if !Self::needs_mapping(text, opts) {
            return NormalizedView::Identity;
        }
        let mut norm = String::with_capacity(text.len());
        let mut src_start = Vec::with_capacity(text.len());
        let mut src_end = Vec::with_capacity(text.len());
        let mut chars = text.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if opts.collapse_internal_whitespace && c.is_whitespace() {
                let mut end = i + c.len_utf8();
                while let Some(&(j, d)) = chars.peek() {
                    if !d.is_whitespace() {
                        break;
                    }
                    end = j + d.len_utf8();
                    chars.next();
                }
                norm.push(' ');
                src_start.push(i);
                src_end.push(end);
                continue;
            }
            let end = i + c.len_utf8();
            let before = norm.len();
            if opts.case_fold {
                norm.extend(c.to_lowercase());
            } else {
                norm.push(c);
            }
            for _ in before..norm.len() {
                src_start.push(i);
                src_end.push(end);
            }
        }
        NormalizedView::Mapped {
            text: norm,
            map: OffsetMap { src_start, src_end },
        }
    }

    fn needs_mapping(text: &str, opts: &NormalizationOptions) -> bool {
        if opts.case_fold {
            return text.chars().any(|c| {
                let mut lower = c.to_lowercase();
                !(lower.next() == Some(c) && lower.next().is_none())
            }) || (opts.collapse_internal_whitespace && has_non_canonical_space(text));
        }
        opts.collapse_internal_whitespace && has_non_canonical_space(text)
    }
}

/// True when `text` holds whitespace other than isolated ASCII spaces.
fn has_non_canonical_space(text: &str) -> bool {
    let mut prev_space = false;
    for c in text.chars() {
        if c == ' ' {
            if prev_space {
                return true;
            }
            prev_space = true;
        } else if c.is_whitespace() {
            return true;
        } else {
            prev_space = false;
        }
    }
    false
}

/// True when byte offset `pos` sits strictly inside a run of alphanumeric
/// characters, i.e. both neighbours are alphanumeric.
fn inside_alnum_run(text: &str, pos: usize) -> bool {
    let before = text[..pos].chars().next_back();
    let after = text[pos..].chars().next();
    matches!((before, after), (Some(a), Some(b)) if a.is_alphanumeric() && b.is_alphanumeric())
}

pub fn on_word_boundaries(text: &str, start: usize, end: usize) -> bool {
    !inside_alnum_run(text, start) && !inside_alnum_run(text, end)
}

/// Every match with its `retained` flag set by the boundary filter and the
/// greedy leftmost-longest selection. `matches` must be sorted by
/// `(start, end)`.
pub fn annotate_spans(matches: &[RawMatch<'_>], text: &str) -> Vec<EntitySpan> {
    debug_assert!(matches
        .windows(2)
        .all(|w| (w[0].start, w[0].end) <= (w[1].start, w[1].end)));
    let mut spans: Vec<EntitySpan> = matches.iter().map(EntitySpan::from).collect();
    let mut covered_to = 0usize;
    let mut i = 0;
    while i < spans.len() {
        let start = spans[i].start;
        let mut j = i;
        let mut best = None;
        while j < spans.len() && spans[j].start == start {
            if on_word_boundaries(text, spans[j].start, spans[j].end) {
                // sorted by end within a start group, so the last valid wins
                best = Some(j);
            }
            j += 1;
        }
        if let Some(b) = best {
            if start >= covered_to {
                spans[b].retained = true;
                covered_to = spans[b].end;
            }
        }
        i = j;
    }
    spans
}

/// Applies the word-boundary filter and greedy leftmost-longest overlap
/// resolution. The result is sorted and pairwise non-overlapping.
pub fn resolve_spans(matches: &[RawMatch<'_>], text: &str) -> Vec<EntitySpan> {
    annotate_spans(matches, text)
        .into_iter()
        .filter(|s| s.retained)
        .collect()
}
