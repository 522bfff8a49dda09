use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heuristics::{Heuristic, ObsoleteCandidate};
use super::MinerError;
use crate::ingest::PostId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub heuristic: Heuristic,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSample {
    pub items: Vec<ObsoleteCandidate>,
    pub shortfalls: Vec<Shortfall>,
}

/// Draws `⌊n/3⌋` candidates per heuristic uniformly at random. A category
/// with fewer candidates contributes all of them and is reported.
pub fn sample_for_annotation(
    candidates: &[ObsoleteCandidate],
    n: usize,
    seed: u64,
) -> Result<AnnotationSample, MinerError> {
    if candidates.is_empty() {
        return Err(MinerError::NoCandidates);
    }
    let per = n / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let mut shortfalls = Vec::new();
    for h in Heuristic::ALL {
        let mut pool: Vec<&ObsoleteCandidate> =
            candidates.iter().filter(|c| c.heuristic == h).collect();
        pool.sort_by_key(|c| c.answer_id);
        pool.dedup_by_key(|c| c.answer_id);
        if pool.len() < per {
            log::warn!(
                "{}: {} candidates for {} requested",
                h.name(),
                pool.len(),
                per
            );
            shortfalls.push(Shortfall {
                heuristic: h,
                requested: per,
                available: pool.len(),
            });
        }
        let mut picked: Vec<&ObsoleteCandidate> = pool
            .choose_multiple(&mut rng, per.min(pool.len()))
            .copied()
            .collect();
        picked.sort_by_key(|c| c.answer_id);
        items.extend(picked.into_iter().cloned());
    }
    Ok(AnnotationSample { items, shortfalls })
}

/// Cohen's κ between two labelings of the same items.
pub fn cohen_kappa<L: Ord + Clone>(a: &[L], b: &[L]) -> Result<f64, MinerError> {
    if a.len() != b.len() {
        return Err(MinerError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MinerError::KappaUndefined);
    }
    let n = a.len() as f64;
    let mut ma: BTreeMap<&L, f64> = BTreeMap::new();
    let mut mb: BTreeMap<&L, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = ma
        .iter()
        .map(|(k, ca)| ca / n * mb.get(k).copied().unwrap_or(0.0) / n)
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(MinerError::KappaUndefined);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Obsolete,
    NotObsolete,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Obsolete => "obsolete",
            Label::NotObsolete => "not_obsolete",
        })
    }
}

impl FromStr for Label {
    type Err = MinerError;

    fn from_str(s: &str) -> Result<Self, MinerError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "obsolete" => Ok(Label::Obsolete),
            "not_obsolete" => Ok(Label::NotObsolete),
            _ => Err(MinerError::InvalidLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub candidate_id: PostId,
    pub label: Label,
    pub annotator: String,
}

pub const ANNOTATION_HEADER: &str = "candidate_id\tlabel\tannotator";

pub fn export_candidates<'a>(
    candidates: impl IntoIterator<Item = &'a ObsoleteCandidate>,
    path: &Path,
) -> Result<(), MinerError> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in candidates {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<ObsoleteCandidate>, MinerError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<(), MinerError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{ANNOTATION_HEADER}")?;
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.candidate_id, r.label, r.annotator)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a TSV annotation file, checking ids against `known` and that each
/// (candidate, annotator) pair is labeled once.
pub fn import_annotations(
    path: &Path,
    known: &BTreeSet<PostId>,
) -> Result<Vec<AnnotationRecord>, MinerError> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim_end() == ANNOTATION_HEADER => {}
        Some((_, Err(e))) => return Err(e.into()),
        _ => {
            return Err(MinerError::Tsv {
                line: 1,
                message: format!("expected header `{ANNOTATION_HEADER}`"),
            })
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(MinerError::Tsv {
                line: lineno,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let id: PostId = fields[0].trim().parse().map_err(|_| MinerError::Tsv {
            line: lineno,
            message: format!("bad candidate id `{}`", fields[0]),
        })?;
        if !known.contains(&id) {
            return Err(MinerError::UnknownCandidate(id));
        }
        let label: Label = fields[1].parse()?;
        let annotator = fields[2].trim().to_string();
        if !seen.insert((id, annotator.clone())) {
            return Err(MinerError::DuplicateAnnotation {
                candidate_id: id,
                annotator,
            });
        }
        out.push(AnnotationRecord {
            candidate_id: id,
            label,
            annotator,
        });
    }
    Ok(out)
}

/// Labels of two annotators over the candidates both labeled, ordered by
/// candidate id.
pub fn paired_labels(records: &[AnnotationRecord], a: &str, b: &str) -> (Vec<Label>, Vec<Label>) {
    let of = |who: &str| -> BTreeMap<PostId, Label> {
        records
            .iter()
            .filter(|r| r.annotator == who)
            .map(|r| (r.candidate_id, r.label))
            .collect()
    };
    let (la, lb) = (of(a), of(b));
    la.iter()
        .filter_map(|(id, x)| lb.get(id).map(|y| (*x, *y)))
        .unzip()
}
