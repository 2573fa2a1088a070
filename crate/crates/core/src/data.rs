//! Synthetic multimodal corpus generation, corpus/vocabulary file I/O, and
//! token-budget batching.
//!
//! Each source admits M valid targets produced by distinct transforms of
//! the source content; training examples carry one uniformly sampled
//! target while evaluation examples keep the full set. A mixed-modality
//! output (one that splices two transforms) matches no valid target, which
//! makes modality errors exactly detectable.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use crate::error::{Error, Result};
use crate::lattice::{Vocabulary, BOS, EOS, RESERVED_SURFACES};
use crate::rng::Rng;

/// Marker token id used by the marker-prefix transform.
pub const MARKER: u32 = 4;

#[derive(Clone, Debug)]
pub struct CorpusExample {
    /// bos ... eos framed source ids.
    pub source: Vec<u32>,
    /// One modality, eos-terminated. Always `valid_targets[0]`.
    pub sampled_target: Vec<u32>,
    /// Every modality target, eos-terminated, pairwise distinct.
    pub valid_targets: Vec<Vec<u32>>,
}

impl CorpusExample {
    pub fn token_count(&self) -> usize {
        self.source.len() + self.sampled_target.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    IdentityCopy,
    Reverse,
    CyclicShift(usize),
    PairwiseSwap,
    MarkerPrefix,
}

impl Transform {
    pub fn apply(&self, content: &[u32]) -> Vec<u32> {
        match self {
            Transform::IdentityCopy => content.to_vec(),
            Transform::Reverse => content.iter().rev().copied().collect(),
            Transform::CyclicShift(k) => {
                let n = content.len();
                let k = k % n.max(1);
                let mut out = Vec::with_capacity(n);
                out.extend_from_slice(&content[k..]);
                out.extend_from_slice(&content[..k]);
                out
            }
            Transform::PairwiseSwap => {
                let mut out = content.to_vec();
                for pair in out.chunks_mut(2) {
                    if pair.len() == 2 {
                        pair.swap(0, 1);
                    }
                }
                out
            }
            Transform::MarkerPrefix => {
                let mut out = Vec::with_capacity(content.len() + 1);
                out.push(MARKER);
                out.extend_from_slice(content);
                out
            }
        }
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transform::IdentityCopy => write!(f, "identity-copy"),
            Transform::Reverse => write!(f, "reverse"),
            Transform::CyclicShift(k) => write!(f, "cyclic-shift({k})"),
            Transform::PairwiseSwap => write!(f, "pairwise-swap"),
            Transform::MarkerPrefix => write!(f, "marker-prefix"),
        }
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("cyclic-shift(") {
            let k = rest
                .strip_suffix(')')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad transform '{s}'")))?;
            return Ok(Transform::CyclicShift(k));
        }
        match s {
            "identity-copy" => Ok(Transform::IdentityCopy),
            "reverse" => Ok(Transform::Reverse),
            "pairwise-swap" => Ok(Transform::PairwiseSwap),
            "marker-prefix" => Ok(Transform::MarkerPrefix),
            other => Err(Error::Config(format!("unknown transform '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub src_len_min: usize,
    pub src_len_max: usize,
    pub transforms: Vec<Transform>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 32,
            src_len_min: 6,
            src_len_max: 10,
            transforms: vec![Transform::IdentityCopy, Transform::Reverse],
            train_size: 10_000,
            valid_size: 500,
            test_size: 500,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn modality_count(&self) -> usize {
        self.transforms.len()
    }

    fn validate(&self) -> Result<()> {
        let m = self.transforms.len();
        if m == 0 || m > 8 {
            return Err(Error::Generation(format!("modality count {m} not in 1..=8")));
        }
        if self.src_len_min == 0 || self.src_len_min > self.src_len_max {
            return Err(Error::Generation("bad source length range".into()));
        }
        let first_content = self.first_content_id();
        if self.vocab_size <= first_content as usize + 1 {
            return Err(Error::Generation(format!(
                "vocab size {} leaves too few content tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn uses_marker(&self) -> bool {
        self.transforms.contains(&Transform::MarkerPrefix)
    }

    fn first_content_id(&self) -> u32 {
        if self.uses_marker() {
            MARKER + 1
        } else {
            MARKER
        }
    }
}

pub struct GeneratedCorpus {
    pub vocab: Vocabulary,
    pub train: Vec<CorpusExample>,
    pub valid: Vec<CorpusExample>,
    pub test: Vec<CorpusExample>,
}

/// Fully seed-deterministic corpus generation. Splits are disjoint by
/// source; degenerate sources whose transforms collide are resampled.
pub fn gen_corpus(spec: &TaskSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, 0x6461);
    let total = spec.train_size + spec.valid_size + spec.test_size;
    let first = spec.first_content_id();
    let content_span = spec.vocab_size as u32 - first;

    let mut seen: std::collections::HashSet<Vec<u32>> = std::collections::HashSet::new();
    let mut examples = Vec::with_capacity(total);
    while examples.len() < total {
        let mut content = Vec::new();
        let mut ok = false;
        for _attempt in 0..100 {
            let len = spec.src_len_min + rng.below(spec.src_len_max - spec.src_len_min + 1);
            content = (0..len).map(|_| first + rng.below(content_span as usize) as u32).collect();
            if seen.contains(&content) {
                continue;
            }
            let targets: Vec<Vec<u32>> =
                spec.transforms.iter().map(|t| t.apply(&content)).collect();
            let distinct = targets
                .iter()
                .enumerate()
                .all(|(i, t)| targets.iter().skip(i + 1).all(|u| u != t));
            if distinct {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(
                "could not make transforms distinct after 100 resamples".into(),
            ));
        }
        seen.insert(content.clone());

        let pick = rng.below(spec.transforms.len());
        let mut valid_targets: Vec<Vec<u32>> = Vec::with_capacity(spec.transforms.len());
        // sampled target first; the rest keep transform order
        let mut framed_pick = spec.transforms[pick].apply(&content);
        framed_pick.push(EOS);
        valid_targets.push(framed_pick.clone());
        for (i, t) in spec.transforms.iter().enumerate() {
            if i == pick {
                continue;
            }
            let mut target = t.apply(&content);
            target.push(EOS);
            valid_targets.push(target);
        }
        let mut source = Vec::with_capacity(content.len() + 2);
        source.push(BOS);
        source.extend_from_slice(&content);
        source.push(EOS);
        examples.push(CorpusExample {
            source,
            sampled_target: framed_pick,
            valid_targets,
        });
    }

    let valid_at = spec.train_size;
    let test_at = spec.train_size + spec.valid_size;
    let test = examples.split_off(test_at);
    let valid = examples.split_off(valid_at);
    Ok(GeneratedCorpus {
        vocab: Vocabulary::synthetic(spec.vocab_size),
        train: examples,
        valid,
        test,
    })
}

/// Warns (returns messages, does not fail) when any modality's sampled
/// frequency strays more than 3 sigma from uniform.
pub fn modality_balance_warnings(spec: &TaskSpec, train: &[CorpusExample]) -> Vec<String> {
    let m = spec.transforms.len();
    if m < 2 || train.is_empty() {
        return Vec::new();
    }
    let mut counts = vec![0usize; m];
    for ex in train {
        let content = &ex.source[1..ex.source.len() - 1];
        for (i, t) in spec.transforms.iter().enumerate() {
            let mut expect = t.apply(content);
            expect.push(EOS);
            if expect == ex.sampled_target {
                counts[i] += 1;
                break;
            }
        }
    }
    let n = train.len() as f64;
    let p = 1.0 / m as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    let mut warnings = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - n * p).abs();
        if dev > 3.0 * sigma {
            warnings.push(format!(
                "modality {} ({}) sampled {} times, {:.1} sigma from uniform",
                i,
                spec.transforms[i],
                c,
                dev / sigma
            ));
        }
    }
    warnings
}

fn surfaces(vocab: &Vocabulary, ids: &[u32]) -> String {
    let mut out = String::new();
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{}", vocab.surface(id));
    }
    out
}

fn parse_tokens(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    text.split_whitespace().map(|s| vocab.lookup(s)).collect()
}

/// Writes one example per line: framed content without the bos/eos markers
/// (they are reattached on load). Training files carry the sampled target
/// only; multi-reference files carry every valid target, sampled first.
pub fn save_corpus(
    path: &FsPath,
    vocab: &Vocabulary,
    corpus: &[CorpusExample],
    multi_ref: bool,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in corpus {
        let content = &ex.source[1..ex.source.len() - 1];
        write!(w, "{}", surfaces(vocab, content))?;
        if multi_ref {
            for t in &ex.valid_targets {
                write!(w, "\t{}", surfaces(vocab, &t[..t.len() - 1]))?;
            }
        } else {
            write!(
                w,
                "\t{}",
                surfaces(vocab, &ex.sampled_target[..ex.sampled_target.len() - 1])
            )?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Loads a corpus file; `multi_ref` selects the eval format. Framing is
/// reattached: bos/eos around sources, eos after targets.
pub fn load_corpus(path: &FsPath, vocab: &Vocabulary, multi_ref: bool) -> Result<Vec<CorpusExample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let min_fields = 2;
        if fields.len() < min_fields {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected source<TAB>target, got {} field(s)", fields.len()),
            });
        }
        if !multi_ref && fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("training line has {} fields", fields.len()),
            });
        }
        let content = parse_tokens(vocab, fields[0]);
        if content.is_empty() {
            return Err(Error::Parse { line: lineno + 1, msg: "empty source".into() });
        }
        let mut source = Vec::with_capacity(content.len() + 2);
        source.push(BOS);
        source.extend_from_slice(&content);
        source.push(EOS);
        let mut valid_targets = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            let mut t = parse_tokens(vocab, f);
            if t.is_empty() {
                return Err(Error::Parse { line: lineno + 1, msg: "empty target".into() });
            }
            t.push(EOS);
            valid_targets.push(t);
        }
        out.push(CorpusExample {
            source,
            sampled_target: valid_targets[0].clone(),
            valid_targets,
        });
    }
    Ok(out)
}

/// Vocabulary file: one surface per line, line number = id, first four
/// lines fixed to the reserved tokens.
pub fn save_vocab(path: &FsPath, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in vocab.surfaces() {
        writeln!(w, "{s}")?;
    }
    Ok(())
}

pub fn load_vocab(path: &FsPath) -> Result<Vocabulary> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut tokens = Vec::new();
    for line in reader.lines() {
        tokens.push(line?);
    }
    for (i, s) in RESERVED_SURFACES.iter().enumerate() {
        if tokens.get(i).map(String::as_str) != Some(*s) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("reserved token {i} must be '{s}'"),
            });
        }
    }
    Vocabulary::new(tokens)
}

/// Length-bucketed batches under a token budget, shuffled by seed.
/// Returns example indices per batch.
pub fn make_batches(corpus: &[CorpusExample], max_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if corpus.is_empty() {
        return Ok(Vec::new());
    }
    for (i, ex) in corpus.iter().enumerate() {
        if ex.token_count() > max_tokens {
            return Err(Error::Corpus(format!(
                "example {i} has {} tokens, over the {max_tokens}-token budget",
                ex.token_count()
            )));
        }
    }
    // bucket by total length so batches stay shape-homogeneous
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = Rng::stream(seed, 0x6261);
    rng.shuffle(&mut order);
    order.sort_by_key(|&i| corpus[i].token_count());
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_tokens = 0usize;
    for idx in order {
        let t = corpus[idx].token_count();
        if cur_tokens + t > max_tokens && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            cur_tokens = 0;
        }
        cur.push(idx);
        cur_tokens += t;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    rng.shuffle(&mut batches);
    Ok(batches)
}
