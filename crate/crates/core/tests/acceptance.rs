//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gotta_core::augment::{augment_dataset, make_cloze, AugmentOptions, PairKind, PromptStyle};
use gotta_core::dataset::{sample_few_shot, QAExample, SplitMix64, FEW_SHOT_SIZES};
use gotta_core::eval::{score_example, token_f1};
use gotta_core::gazetteer::{Gazetteer, NormalizationOptions};
use gotta_core::matcher::build_automaton;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Rng(SplitMix64);

impl Rng {
    fn new(seed: u64) -> Self {
        Rng(SplitMix64::new(seed))
    }
    fn below(&mut self, n: usize) -> usize {
        self.0.below(n as u64) as usize
    }
    fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

// ---------------------------------------------------------------- oracles

/// Every (pattern, start, end) with `text[start..]` starting with the pattern.
fn naive_find_all(patterns: &HashSet<String>, text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for p in patterns {
        for start in 0..text.len() {
            if text.as_bytes()[start..].starts_with(p.as_bytes()) {
                out.push((p.clone(), start, start + p.len()));
            }
        }
    }
    out.sort_by(|a, b| (a.1, a.2, &a.0).cmp(&(b.1, b.2, &b.0)));
    out
}

fn alnum_at(text: &str, before: usize, after: usize) -> bool {
    let b = text[..before].chars().last();
    let a = text[after..].chars().next();
    matches!((b, a), (Some(x), Some(y)) if x.is_alphanumeric() && y.is_alphanumeric())
}

/// Word-boundary filter plus greedy leftmost-longest selection written
/// directly over the naive matches.
fn naive_retained(patterns: &HashSet<String>, text: &str) -> usize {
    let valid: Vec<(usize, usize)> = naive_find_all(patterns, text)
        .into_iter()
        .map(|(_, s, e)| (s, e))
        .filter(|&(s, e)| !alnum_at(text, s, s) && !alnum_at(text, e, e))
        .collect();
    let mut kept = 0;
    let mut pos = 0;
    while pos < text.len() {
        let best = valid.iter().filter(|m| m.0 == pos).map(|m| m.1).max();
        match best {
            Some(end) => {
                kept += 1;
                pos = end;
            }
            None => pos += 1,
        }
    }
    kept
}

/// Bag overlap by exhaustive pairing of unused tokens.
fn brute_bag_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut used = vec![false; gold.len()];
    let mut common = 0;
    for p in pred {
        for (j, g) in gold.iter().enumerate() {
            if !used[j] && g == p {
                used[j] = true;
                common += 1;
                break;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

// ---------------------------------------------------------------- criteria

fn matcher_oracle_suite() -> Outcome {
    let started = Instant::now();
    let alphabet = ['a', 'b', 'c', ' ', 'é', 'ß', '.'];
    let inner = ['a', 'b', 'é', 'ß'];
    let opts = NormalizationOptions {
        case_fold: false,
        collapse_internal_whitespace: false,
        min_surface_chars: 1,
    };
    let mut rng = Rng::new(2024);
    let mut total_matches = 0usize;
    for case in 0..1000 {
        let text_len = rng.below(201);
        let text: String = (0..text_len).map(|_| *rng.pick(&alphabet)).collect();
        let n_patterns = 1 + rng.below(50);
        let patterns: Vec<String> = (0..n_patterns)
            .map(|_| {
                let len = 1 + rng.below(5);
                let mut p: String = (0..len).map(|_| *rng.pick(&alphabet)).collect();
                // surfaces never begin or end with whitespace
                p = p.trim().to_string();
                if p.is_empty() {
                    p.push(*rng.pick(&inner));
                }
                p
            })
            .collect();
        let ac = build_automaton(&Gazetteer::from_surfaces(&patterns, opts))
            .map_err(|e| e.to_string())?;
        let got: Vec<(String, usize, usize)> = ac
            .find_all(&text)
            .iter()
            .map(|m| (m.surface.to_string(), m.start, m.end))
            .collect();
        let distinct: HashSet<String> = patterns.iter().cloned().collect();
        let want = naive_find_all(&distinct, &text);
        check(
            got == want,
            format!("instance {case}: automaton {} matches, oracle {}", got.len(), want.len()),
        )?;
        total_matches += want.len();
    }
    let elapsed = started.elapsed();
    check(
        elapsed < Duration::from_secs(10),
        format!("suite took {elapsed:?} (limit 10 s)"),
    )?;
    Ok(format!(
        "1000 instances, {total_matches} matches, identical to naive scan in {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn classic_case() -> Outcome {
    let g = Gazetteer::from_surfaces(["he", "she", "his", "hers"], NormalizationOptions::default());
    let ac = build_automaton(&g).map_err(|e| e.to_string())?;
    let got: Vec<(&str, usize, usize)> = ac
        .find_all("ushers")
        .iter()
        .map(|m| (m.surface, m.start, m.end))
        .collect();
    let want = vec![("she", 1, 4), ("he", 2, 4), ("hers", 2, 6)];
    check(got == want, format!("got {got:?}"))?;
    Ok("ushers -> she@[1,4) he@[2,4) hers@[2,6)".into())
}

struct Corpus {
    examples: Vec<QAExample>,
    surfaces: Vec<String>,
}

fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = Rng::new(seed);
    let filler = [
        "the", "a", "of", "won", "played", "near", "after", "river", "team", "season", "it",
        "was", "city", "with", "final", "and", "in", "on", "record",
    ];
    let surfaces: Vec<String> = [
        "Spain", "Italy", "New York", "New York City", "York", "Johannesburg", "World Cup",
        "2010 FIFA World Cup", "FIFA", "Zürich", "São Paulo", "Art", "Manchester United",
        "United", "東京", "Nile", "river Nile",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let punct = ["", "", "", ",", ".", ";"];
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let words = 5 + rng.below(40);
        let mut ctx = String::new();
        for w in 0..words {
            if w > 0 {
                ctx.push(' ');
            }
            if rng.below(4) == 0 {
                ctx.push_str(rng.pick(&surfaces));
            } else if rng.below(10) == 0 {
                // glue an entity into a longer token so the boundary rule bites
                ctx.push_str(rng.pick(&surfaces));
                ctx.push_str("ish");
            } else {
                ctx.push_str(rng.pick(&filler));
            }
            ctx.push_str(rng.pick(&punct));
        }
        let answer = ctx.split_whitespace().next().unwrap_or("x").to_string();
        examples.push(QAExample {
            qid: format!("syn{i:05}"),
            question: format!("What is item {i}?"),
            context: ctx,
            gold_answers: vec![answer],
            answer_char_spans: vec![],
        });
    }
    Corpus { examples, surfaces }
}

fn mask_and_reconstruction_laws() -> Outcome {
    let corpus = synthetic_corpus(1000, 7);
    let g = Gazetteer::from_surfaces(&corpus.surfaces, NormalizationOptions::default());
    let ac = build_automaton(&g).map_err(|e| e.to_string())?;
    let style = PromptStyle::default();
    let mask = style.mask_token.as_str();
    let set = augment_dataset(&corpus.examples, &ac, &AugmentOptions::default())
        .map_err(|e| e.to_string())?;
    let by_qid: HashMap<&str, &QAExample> =
        corpus.examples.iter().map(|e| (e.qid.as_str(), e)).collect();

    for p in set.canonical_order() {
        let (want_in, want_tgt) = match p.kind {
            PairKind::Ori => (1, 0),
            PairKind::Aug => (2, 1),
        };
        check(
            p.input_text.matches(mask).count() == want_in,
            format!("{}: input has {} masks", p.id, p.input_text.matches(mask).count()),
        )?;
        check(
            p.target_text.matches(mask).count() == want_tgt,
            format!("{}: target has {} masks", p.id, p.target_text.matches(mask).count()),
        )?;
        check(
            p.input_text.replacen(mask, &p.answer, 1) == p.target_text,
            format!("{}: target differs from input outside the answer slot", p.id),
        )?;
        if p.kind == PairKind::Aug {
            let src = by_qid[p.source_qid.as_str()];
            check(
                p.context.replacen(mask, &p.answer, 1) == src.context,
                format!("{}: emitted context does not reconstruct the source", p.id),
            )?;
        }
    }
    let mut clozes = 0;
    for e in &corpus.examples {
        for span in ac.entity_spans(&e.context) {
            let cz = make_cloze(e, &span, &style).map_err(|e| e.to_string())?;
            check(
                cz.masked_context.matches(mask).count() == 1,
                format!("{}: cloze has more than one mask", e.qid),
            )?;
            check(
                cz.reconstruct(mask) == e.context,
                format!("{}: cloze does not round-trip", e.qid),
            )?;
            clozes += 1;
        }
    }
    Ok(format!(
        "{} ori + {} aug pairs, {clozes} cloze round-trips byte-exact",
        set.ori_pairs.len(),
        set.aug_pairs.len()
    ))
}

fn count_law() -> Outcome {
    let corpus = synthetic_corpus(1000, 11);
    let g = Gazetteer::from_surfaces(&corpus.surfaces, NormalizationOptions::default());
    let ac = build_automaton(&g).map_err(|e| e.to_string())?;
    let set = augment_dataset(&corpus.examples, &ac, &AugmentOptions::default())
        .map_err(|e| e.to_string())?;
    let surfaces: HashSet<String> = corpus.surfaces.iter().cloned().collect();
    let recount: usize = corpus
        .examples
        .iter()
        .map(|e| naive_retained(&surfaces, &e.context))
        .sum();
    check(
        set.aug_pairs.len() == recount,
        format!("aug pairs {} vs independent recount {recount}", set.aug_pairs.len()),
    )?;
    check(
        set.stats.aug_pairs == recount && set.ori_pairs.len() == corpus.examples.len(),
        "stats disagree with emitted pairs",
    )?;
    Ok(format!(
        "|aug| = {} = independent recount over {} examples",
        recount,
        corpus.examples.len()
    ))
}

fn f1_metric() -> Outcome {
    let tol = 1e-12;
    let cases = [
        ("the cat sat", "cat sat down", 0.8),
        ("Spain", "Spain", 1.0),
        ("Football", "2010 FIFA World Cup", 0.0),
    ];
    for (p, g, want) in cases {
        let got = token_f1(p, g);
        check((got - want).abs() < tol, format!("f1({p:?}, {g:?}) = {got}, want {want}"))?;
    }

    let vocab = ["cat", "dog", "sat", "down", "spain", "cup", "x1", "2010"];
    let mut rng = Rng::new(99);
    let bag = |rng: &mut Rng| -> Vec<String> {
        (0..rng.below(7)).map(|_| rng.pick(&vocab).to_string()).collect()
    };
    for i in 0..200 {
        let (p, g) = (bag(&mut rng), bag(&mut rng));
        let got = token_f1(&p.join(" "), &g.join(" "));
        let want = brute_bag_f1(&p, &g);
        check((got - want).abs() < tol, format!("pair {i}: {got} vs oracle {want}"))?;
    }

    let noisy = ["The", "a", "cat", "Cat!", "sat,", "an", "dog", "F.C.", "fc"];
    for i in 0..1000 {
        let mk = |rng: &mut Rng| -> String {
            (0..rng.below(6)).map(|_| *rng.pick(&noisy)).collect::<Vec<_>>().join(" ")
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        check(token_f1(&a, &b) == token_f1(&b, &a), format!("asymmetric at {i}: {a:?} / {b:?}"))?;
        let golds: Vec<String> = (0..1 + rng.below(3)).map(|_| mk(&mut rng)).collect();
        let base = score_example(&a, &golds).map_err(|e| e.to_string())?;
        let mut more = golds.clone();
        more.push(mk(&mut rng));
        let after = score_example(&a, &more).map_err(|e| e.to_string())?;
        check(after >= base, format!("adding a gold lowered the score at {i}"))?;
    }
    Ok("worked examples exact; 200 oracle pairs; 1000 symmetry + monotonicity instances".into())
}

fn write_fixture(dir: &Path, corpus: &Corpus) {
    use std::fmt::Write as _;
    let mut train = String::from("{\"header\": {\"dataset\": \"Synthetic\", \"split\": \"train\"}}\n");
    for e in &corpus.examples {
        let line = serde_json::json!({
            "context": e.context,
            "qas": [{"qid": e.qid, "question": e.question, "answers": e.gold_answers, "detected_answers": []}],
        });
        writeln!(train, "{line}").unwrap();
    }
    std::fs::write(dir.join("train.jsonl"), train).unwrap();
    let gaz: String = corpus
        .surfaces
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Q{}\t{s}\n", i + 1))
        .collect();
    std::fs::write(dir.join("gaz.tsv"), gaz).unwrap();
}

fn run_augment(dir: &Path, out: &str, extra: &[&str], threads: &str) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gotta"))
        .current_dir(dir)
        .env("GOTTA_THREADS", threads)
        .args(["augment", "--train", "train.jsonl", "--gazetteer", "gaz.tsv", "--out", out])
        .args(extra)
        .status()
        .map_err(|e| e.to_string())?;
    check(status.success(), format!("augment exited with {status}"))?;
    std::fs::read(dir.join(out)).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_fixture(dir.path(), &synthetic_corpus(300, 5));
    for extra in [
        &["--k", "128", "--seed", "1"][..],
        &["--template", "random", "--seed", "3"][..],
    ] {
        let a = run_augment(dir.path(), "a.jsonl", extra, "1")?;
        let b = run_augment(dir.path(), "b.jsonl", extra, "4")?;
        check(!a.is_empty(), "empty output")?;
        check(a == b, format!("outputs differ for {extra:?}"))?;
        let ra = std::fs::read(dir.path().join("a.jsonl.stats.json")).map_err(|e| e.to_string())?;
        let rb = std::fs::read(dir.path().join("b.jsonl.stats.json")).map_err(|e| e.to_string())?;
        check(ra == rb, "stats sidecars differ")?;
    }

    let examples = synthetic_corpus(500, 3).examples;
    for seed in 0..5u64 {
        let splits: Vec<Vec<String>> = FEW_SHOT_SIZES
            .iter()
            .map(|&k| sample_few_shot(&examples, k, seed).map(|s| s.selected_qids))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for w in splits.windows(2) {
            check(w[1].starts_with(&w[0]), format!("split for seed {seed} is not nested"))?;
        }
        let again = sample_few_shot(&examples, 64, seed).map_err(|e| e.to_string())?;
        check(again.selected_qids == splits[2], "resampling changed the split")?;
    }
    Ok("augment byte-identical across runs and thread counts; splits nested 16<32<64<128".into())
}

fn throughput() -> Outcome {
    let mut rng = Rng::new(77);
    let letters: Vec<char> = ('a'..='z').collect();
    let mut vocab = HashSet::new();
    while vocab.len() < 6000 {
        let len = 3 + rng.below(7);
        vocab.insert((0..len).map(|_| *rng.pick(&letters)).collect::<String>());
    }
    let mut vocab: Vec<String> = vocab.into_iter().collect();
    vocab.sort();

    let started = Instant::now();
    let mut surfaces: HashSet<String> = vocab.iter().step_by(5).cloned().collect();
    while surfaces.len() < 1_000_000 {
        let words = 2 + rng.below(2);
        let s: Vec<&str> = (0..words).map(|_| rng.pick(&vocab).as_str()).collect();
        surfaces.insert(s.join(" "));
    }
    let mut surfaces: Vec<String> = surfaces.into_iter().collect();
    surfaces.sort();
    let g = Gazetteer::from_surfaces(&surfaces, NormalizationOptions::default());
    drop(surfaces);
    let build_started = Instant::now();
    let ac = build_automaton(&g).map_err(|e| e.to_string())?;
    let build_time = build_started.elapsed();
    check(ac.pattern_count() == 1_000_000, format!("{} patterns", ac.pattern_count()))?;

    let mut contexts = Vec::new();
    let mut total = 0usize;
    while total < 10 * 1024 * 1024 {
        let mut ctx = String::with_capacity(1100);
        while ctx.len() < 1000 {
            if !ctx.is_empty() {
                ctx.push(' ');
            }
            ctx.push_str(rng.pick(&vocab));
        }
        total += ctx.len();
        contexts.push(ctx);
    }
    let gen_time = started.elapsed();

    let scan_started = Instant::now();
    let spans = ac.entity_spans_batch(&contexts);
    let scan_time = scan_started.elapsed();
    let retained: usize = spans.iter().map(Vec::len).sum();
    check(retained > 0, "no spans found")?;
    check(
        scan_time < Duration::from_secs(30),
        format!("scan took {scan_time:?} (limit 30 s)"),
    )?;
    Ok(format!(
        "1,000,000 surfaces ({} states) built in {:.2} s; {:.1} MB scanned in {:.2} s, {retained} spans (setup {:.2} s)",
        ac.state_count(),
        build_time.as_secs_f64(),
        total as f64 / (1024.0 * 1024.0),
        scan_time.as_secs_f64(),
        gen_time.as_secs_f64(),
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("matcher-oracle", matcher_oracle_suite),
        ("classic-case", classic_case),
        ("mask-count-and-reconstruction", mask_and_reconstruction_laws),
        ("count-law", count_law),
        ("f1-metric", f1_metric),
        ("determinism", determinism),
        ("throughput", throughput),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, criterion) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match criterion() {
            Ok(detail) => println!("PASS  {name:<32} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<32} {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
