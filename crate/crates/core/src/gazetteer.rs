//! Entity dictionary loading and surface normalization.
//!
//! The gazetteer file is UTF-8 text with one `entity_id<TAB>surface` record
//! per line. A single-column line is a bare surface whose id is synthesized
//! as `L<line_number>`. Lines starting with `#` are comments. Dirty rows are
//! counted and skipped so that a large dictionary dump can always be loaded.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationOptions {
    pub case_fold: bool,
    pub collapse_internal_whitespace: bool,
    pub min_surface_chars: usize,
}

impl Default for NormalizationOptions {
    fn default() -> Self {
        Self {
            case_fold: false,
            collapse_internal_whitespace: true,
            min_surface_chars: 2,
        }
    }
}

/// Normalizes a surface form. Leading and trailing whitespace is always
/// removed; the other rules are controlled by `opts`.
pub fn normalize_surface(s: &str, opts: &NormalizationOptions) -> String {
    let folded;
    let s = if opts.case_fold {
        folded = s.to_lowercase();
        folded.as_str()
    } else {
        s
    };
    if opts.collapse_internal_whitespace {
        let mut out = String::with_capacity(s.len());
        for word in s.split_whitespace() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    } else {
        s.trim().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub surface: String,
}

/// Line accounting for one load. `data_lines` excludes blank and comment
/// lines, and always equals `retained + rejected() + duplicates`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub data_lines: usize,
    pub retained: usize,
    pub malformed: usize,
    pub too_short: usize,
    pub duplicates: usize,
}

impl LoadStats {
    pub fn rejected(&self) -> usize {
        self.malformed + self.too_short
    }
}

#[derive(Clone, Debug)]
pub struct Gazetteer {
    records: Vec<EntityRecord>,
    /// normalized surface -> indices into `records`, in file order
    surface_index: IndexMap<String, Vec<usize>>,
    normalization: NormalizationOptions,
    stats: LoadStats,
}

impl Gazetteer {
    pub fn new(opts: NormalizationOptions) -> Self {
        Self {
            records: Vec::new(),
            surface_index: IndexMap::new(),
            normalization: opts,
            stats: LoadStats::default(),
        }
    }

    /// Builds a gazetteer from in-memory `(entity_id, surface)` pairs, applying
    /// the same filtering and deduplication rules as file loading.
    pub fn from_pairs<I, A, B>(pairs: I, opts: NormalizationOptions) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut g = Self::new(opts);
        for (id, surface) in pairs {
            g.stats.data_lines += 1;
            g.push(id.as_ref(), surface.as_ref());
        }
        g
    }

    /// Builds a gazetteer from bare surfaces; ids are `L1`, `L2`, ...
    pub fn from_surfaces<I, S>(surfaces: I, opts: NormalizationOptions) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::from_pairs(
            surfaces
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("L{}", i + 1), s)),
            opts,
        )
    }

    pub fn from_reader<R: Read>(reader: R, opts: NormalizationOptions) -> std::io::Result<Self> {
        let mut g = Self::new(opts);
        let mut reader = BufReader::new(reader);
        let mut buf = Vec::new();
        let mut line_no = 0usize;
        loop {
            buf.clear();
            if reader.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            line_no += 1;
            g.ingest_line(&buf, line_no);
        }
        Ok(g)
    }

    fn ingest_line(&mut self, raw: &[u8], line_no: usize) {
        let raw = raw.strip_suffix(b"\n").unwrap_or(raw);
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let Ok(line) = std::str::from_utf8(raw) else {
            self.stats.data_lines += 1;
            self.stats.malformed += 1;
            return;
        };
        if line.trim().is_empty() || line.starts_with('#') {
            return;
        }
        self.stats.data_lines += 1;

        let mut cols = line.split('\t');
        let (id, surface) = match (cols.next(), cols.next(), cols.next()) {
            (Some(surface), None, None) => (format!("L{line_no}"), surface),
            (Some(id), Some(surface), None) if !id.trim().is_empty() => {
                (id.trim().to_string(), surface)
            }
            _ => {
                self.stats.malformed += 1;
                return;
            }
        };
        self.push(&id, surface);
    }

    fn push(&mut self, id: &str, surface: &str) {
        let surface = normalize_surface(surface, &self.normalization);
        if surface.is_empty() || id.is_empty() {
            self.stats.malformed += 1;
            return;
        }
        if surface.chars().count() < self.normalization.min_surface_chars {
            self.stats.too_short += 1;
            return;
        }
        let records = &self.records;
        let slot = self.surface_index.entry(surface.clone()).or_default();
        if slot.iter().any(|&i| records[i].entity_id == id) {
            self.stats.duplicates += 1;
            return;
        }
        slot.push(self.records.len());
        self.records.push(EntityRecord {
            entity_id: id.to_string(),
            surface,
        });
        self.stats.retained += 1;
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn normalization(&self) -> &NormalizationOptions {
        &self.normalization
    }

    pub fn stats(&self) -> &LoadStats {
        &self.stats
    }

    /// Number of distinct normalized surfaces.
    pub fn surface_count(&self) -> usize {
        self.surface_index.len()
    }

    /// Distinct surfaces in order of first appearance, each with the ids that
    /// share it (file order).
    pub fn surfaces(&self) -> impl Iterator<Item = (&str, impl Iterator<Item = &str> + '_)> + '_ {
        self.surface_index.iter().map(move |(surface, idx)| {
            (
                surface.as_str(),
                idx.iter().map(move |&i| self.records[i].entity_id.as_str()),
            )
        })
    }

    pub fn entity_ids(&self, surface: &str) -> Vec<&str> {
        self.surface_index
            .get(surface)
            .map(|idx| {
                idx.iter()
                    .map(|&i| self.records[i].entity_id.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn load_gazetteer(path: impl AsRef<Path>, opts: NormalizationOptions) -> Result<Gazetteer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let g = Gazetteer::from_reader(file, opts).map_err(|e| Error::io(path, e))?;
    let s = g.stats();
    log::info!(
        "loaded {} records ({} surfaces) from {}; rejected {}, duplicates {}",
        s.retained,
        g.surface_count(),
        path.display(),
        s.rejected(),
        s.duplicates
    );
    Ok(g)
}
