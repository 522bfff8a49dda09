use std::collections::BTreeSet;

use chrono::{DateTime, Duration, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::levenshtein::levenshtein;
use crate::corpus::{clean_text, extract_code};
use crate::ingest::{HistoryType, PostId, PostRecord, PostType, RecordStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    KeywordComment,
    EditedAfterComment,
    LateAnswer,
}

impl Heuristic {
    /// Precedence order.
    pub const ALL: [Heuristic; 3] = [
        Heuristic::KeywordComment,
        Heuristic::EditedAfterComment,
        Heuristic::LateAnswer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::KeywordComment => "keyword_comment",
            Heuristic::EditedAfterComment => "edited_after_comment",
            Heuristic::LateAnswer => "late_answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsoleteCandidate {
    /// Candidate id; answers appear under one heuristic only, so the answer
    /// id is unique.
    pub answer_id: PostId,
    pub question_id: PostId,
    pub heuristic: Heuristic,
    pub evidence: String,
    pub answer_text: String,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub keywords: Vec<String>,
    pub reference_phrases: Vec<String>,
    pub keyword_min_score: i64,
    pub edit_min_score: i64,
    pub late_min_score: i64,
    pub min_code_distance: usize,
    /// Minimum answer delay after the question, in milliseconds.
    pub late_after_ms: i64,
}

/// 1.5 years of 365 days.
pub const LATE_AFTER_MS: i64 = 547 * 86_400_000 + 43_200_000;

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            keywords: ["deprecated", "outdated", "obsolete", "out of date"]
                .map(String::from)
                .to_vec(),
            reference_phrases: ["'s answers", "answer by", "accepted answer", "other answer"]
                .map(String::from)
                .to_vec(),
            keyword_min_score: 1,
            edit_min_score: 1,
            late_min_score: 2,
            min_code_distance: 100,
            late_after_ms: LATE_AFTER_MS,
        }
    }
}

impl MinerConfig {
    /// Case-insensitive whole-word matcher; spaces inside a keyword phrase
    /// match any run of whitespace or hyphens.
    pub fn keyword_regex(&self) -> Regex {
        let alts: Vec<String> = self
            .keywords
            .iter()
            .map(|k| {
                k.split_whitespace()
                    .map(regex::escape)
                    .collect::<Vec<_>>()
                    .join(r"[\s\-]+")
            })
            .collect();
        Regex::new(&format!(r"(?i)\b(?:{})\b", alts.join("|"))).expect("keyword pattern")
    }
}

fn answers(store: &RecordStore) -> impl Iterator<Item = &PostRecord> {
    store.posts().filter(|p| p.post_type == PostType::Answer)
}

fn question_of<'a>(store: &'a RecordStore, answer: &PostRecord) -> Option<&'a PostRecord> {
    answer
        .parent_id
        .and_then(|q| store.post(q))
        .filter(|q| q.post_type == PostType::Question)
}

fn candidate(
    answer: &PostRecord,
    question: PostId,
    heuristic: Heuristic,
    evidence: String,
) -> ObsoleteCandidate {
    ObsoleteCandidate {
        answer_id: answer.id,
        question_id: question,
        heuristic,
        evidence,
        answer_text: clean_text(&answer.body),
        score: answer.score,
    }
}

/// Answers with a comment mentioning an obsolescence keyword, under a
/// question that mentions none.
pub fn mine_keyword_comments(store: &RecordStore, cfg: &MinerConfig) -> Vec<ObsoleteCandidate> {
    let re = cfg.keyword_regex();
    let mut out = Vec::new();
    for a in answers(store).filter(|a| a.score >= cfg.keyword_min_score) {
        let Some(q) = question_of(store, a) else {
            continue;
        };
        let Some(hit) = store.comments_on(a.id).find(|c| re.is_match(&c.text)) else {
            continue;
        };
        if re.is_match(q.title.as_deref().unwrap_or("")) || re.is_match(&q.body) {
            continue;
        }
        out.push(candidate(
            a,
            q.id,
            Heuristic::KeywordComment,
            hit.text.clone(),
        ));
    }
    out
}

/// Answers whose body was edited after a comment arrived and whose code
/// changed by at least `min_code_distance` characters between the first
/// and the latest revision.
pub fn mine_edited_after_comment(
    store: &RecordStore,
    exclusions: &BTreeSet<PostId>,
    cfg: &MinerConfig,
) -> Vec<ObsoleteCandidate> {
    let mut out = Vec::new();
    for a in answers(store).filter(|a| a.score >= cfg.edit_min_score && !exclusions.contains(&a.id))
    {
        let Some(q) = question_of(store, a) else {
            continue;
        };
        let Some(first_comment) = store.comments_on(a.id).map(|c| c.creation_date).min() else {
            continue;
        };
        let revs: Vec<_> = store
            .history_of(a.id)
            .filter(|h| h.history_type.carries_body())
            .collect();
        if revs.is_empty() {
            if a.last_edit_date.is_some() {
                log::info!(
                    "answer {} was edited but has no body history; skipped",
                    a.id
                );
            }
            continue;
        }
        let edited_after = revs
            .iter()
            .any(|h| h.history_type == HistoryType::EditBody && h.creation_date > first_comment);
        if !edited_after {
            continue;
        }
        let before = revs
            .iter()
            .find(|h| h.history_type == HistoryType::InitialBody)
            .unwrap_or(&revs[0]);
        let after = revs.last().expect("non-empty");
        let dist = levenshtein(&extract_code(&before.text), &extract_code(&after.text));
        if dist >= cfg.min_code_distance {
            out.push(candidate(
                a,
                q.id,
                Heuristic::EditedAfterComment,
                format!("levenshtein={dist}"),
            ));
        }
    }
    out
}

fn is_late(answer: DateTime<Utc>, question: DateTime<Utc>, after_ms: i64) -> bool {
    answer - question >= Duration::milliseconds(after_ms)
}

/// Late answers referring to another answer.
pub fn mine_late_answers(
    store: &RecordStore,
    exclusions: &BTreeSet<PostId>,
    cfg: &MinerConfig,
) -> Vec<ObsoleteCandidate> {
    let phrases: Vec<String> = cfg
        .reference_phrases
        .iter()
        .map(|p| p.to_lowercase())
        .collect();
    let mut out = Vec::new();
    for a in answers(store).filter(|a| a.score >= cfg.late_min_score && !exclusions.contains(&a.id))
    {
        let Some(q) = question_of(store, a) else {
            continue;
        };
        if !is_late(a.creation_date, q.creation_date, cfg.late_after_ms) {
            continue;
        }
        let text = clean_text(&a.body).to_lowercase().replace('\u{2019}', "'");
        if let Some(p) = phrases.iter().find(|p| text.contains(p.as_str())) {
            out.push(candidate(a, q.id, Heuristic::LateAnswer, p.clone()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MiningResult {
    pub keyword_comment: Vec<ObsoleteCandidate>,
    pub edited_after_comment: Vec<ObsoleteCandidate>,
    pub late_answer: Vec<ObsoleteCandidate>,
}

impl MiningResult {
    pub fn get(&self, h: Heuristic) -> &[ObsoleteCandidate] {
        match h {
            Heuristic::KeywordComment => &self.keyword_comment,
            Heuristic::EditedAfterComment => &self.edited_after_comment,
            Heuristic::LateAnswer => &self.late_answer,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &ObsoleteCandidate> {
        self.keyword_comment
            .iter()
            .chain(&self.edited_after_comment)
            .chain(&self.late_answer)
    }

    pub fn report(&self) -> MiningReport {
        MiningReport {
            keyword_comment: self.keyword_comment.len(),
            edited_after_comment: self.edited_after_comment.len(),
            late_answer: self.late_answer.len(),
            published_reference: [85_586, 388_809, 19_371],
        }
    }
}

/// Per-heuristic counts, next to the full-dump counts published for the
/// same heuristics (for order-of-magnitude comparison only).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningReport {
    pub keyword_comment: usize,
    pub edited_after_comment: usize,
    pub late_answer: usize,
    pub published_reference: [usize; 3],
}

/// Runs all three miners with precedence KeywordComment >
/// EditedAfterComment > LateAnswer.
pub fn mine_all(store: &RecordStore, cfg: &MinerConfig) -> MiningResult {
    let keyword_comment = mine_keyword_comments(store, cfg);
    let mut taken: BTreeSet<PostId> = keyword_comment.iter().map(|c| c.answer_id).collect();
    let edited_after_comment = mine_edited_after_comment(store, &taken, cfg);
    taken.extend(edited_after_comment.iter().map(|c| c.answer_id));
    let late_answer = mine_late_answers(store, &taken, cfg);
    MiningResult {
        keyword_comment,
        edited_after_comment,
        late_answer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CommentRecord, PostHistoryRecord};
    use chrono::TimeZone;

    fn t(days: f64) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(1_300_000_000_000 + (days * 86_400_000.0) as i64)
            .unwrap()
    }

    fn post(
        id: i64,
        kind: PostType,
        parent: Option<i64>,
        score: i64,
        body: &str,
        day: f64,
    ) -> PostRecord {
        PostRecord {
            id,
            post_type: kind,
            parent_id: parent,
            score,
            title: (kind == PostType::Question).then(|| format!("question {id}")),
            body: body.into(),
            tags: None,
            creation_date: t(day),
            last_edit_date: None,
            accepted_answer_id: None,
        }
    }

    fn comment(id: i64, post: i64, text: &str, day: f64) -> CommentRecord {
        CommentRecord {
            id,
            post_id: post,
            text: text.into(),
            score: 0,
            creation_date: t(day),
        }
    }

    fn rev(id: i64, post: i64, kind: HistoryType, text: &str, day: f64) -> PostHistoryRecord {
        PostHistoryRecord {
            id,
            post_id: post,
            history_type: kind,
            text: text.into(),
            creation_date: t(day),
        }
    }

    fn store(
        posts: Vec<PostRecord>,
        comments: Vec<CommentRecord>,
        hist: Vec<PostHistoryRecord>,
    ) -> RecordStore {
        let mut s = RecordStore::new();
        posts.into_iter().for_each(|p| s.insert_post(p).unwrap());
        comments
            .into_iter()
            .for_each(|c| s.insert_comment(c).unwrap());
        hist.into_iter().for_each(|h| s.insert_history(h).unwrap());
        s.seal();
        s
    }

    fn ids(c: &[ObsoleteCandidate]) -> Vec<i64> {
        c.iter().map(|c| c.answer_id).collect()
    }

    #[test]
    fn keyword_rules() {
        let s = store(
            vec![
                post(1, PostType::Question, None, 0, "<p>how?</p>", 0.0),
                post(2, PostType::Answer, Some(1), 1, "a", 1.0),
                post(3, PostType::Answer, Some(1), 1, "b", 1.0),
                post(4, PostType::Answer, Some(1), 0, "c", 1.0),
                post(5, PostType::Answer, Some(1), 3, "d", 1.0),
                post(
                    10,
                    PostType::Question,
                    None,
                    0,
                    "<p>is this deprecated?</p>",
                    0.0,
                ),
                post(11, PostType::Answer, Some(10), 5, "e", 1.0),
            ],
            vec![
                comment(1, 2, "this API is Deprecated now", 2.0),
                comment(2, 3, "undeprecated in 2.0", 2.0),
                comment(3, 4, "outdated", 2.0),
                comment(4, 5, "this is OUT OF DATE", 2.0),
                comment(5, 11, "obsolete", 2.0),
            ],
            vec![],
        );
        let got = mine_keyword_comments(&s, &MinerConfig::default());
        assert_eq!(ids(&got), vec![2, 5]);
        assert_eq!(got[0].evidence, "this API is Deprecated now");
    }

    fn code(n: usize, ch: char) -> String {
        format!("<pre><code>{}</code></pre>", ch.to_string().repeat(n))
    }

    #[test]
    fn edit_distance_boundary() {
        let before = code(100, 'a');
        let s = store(
            vec![
                post(1, PostType::Question, None, 0, "q", 0.0),
                post(2, PostType::Answer, Some(1), 1, "x", 1.0),
                post(3, PostType::Answer, Some(1), 1, "x", 1.0),
                post(4, PostType::Answer, Some(1), 1, "x", 1.0),
            ],
            vec![
                comment(1, 2, "hm", 2.0),
                comment(2, 3, "hm", 2.0),
                comment(3, 4, "hm", 5.0),
            ],
            vec![
                rev(1, 2, HistoryType::InitialBody, &before, 1.0),
                rev(2, 2, HistoryType::EditBody, &code(100, 'b'), 3.0),
                rev(3, 3, HistoryType::InitialBody, &before, 1.0),
                rev(
                    4,
                    3,
                    HistoryType::EditBody,
                    &format!("<code>{}a</code>", "b".repeat(99)),
                    3.0,
                ),
                // edit precedes the only comment
                rev(5, 4, HistoryType::InitialBody, &before, 1.0),
                rev(6, 4, HistoryType::EditBody, &code(100, 'b'), 3.0),
            ],
        );
        let cfg = MinerConfig::default();
        assert_eq!(levenshtein(&extract_code(&before), &"b".repeat(99)), 100);
        let got = mine_edited_after_comment(&s, &BTreeSet::new(), &cfg);
        assert_eq!(ids(&got), vec![2]);
        assert_eq!(got[0].evidence, "levenshtein=100");
        assert!(mine_edited_after_comment(&s, &BTreeSet::from([2]), &cfg).is_empty());
    }

    #[test]
    fn late_answer_rules() {
        let late = LATE_AFTER_MS as f64 / 86_400_000.0;
        let body = "<p>The accepted answer is outdated</p>";
        let s = store(
            vec![
                post(1, PostType::Question, None, 0, "q", 0.0),
                post(2, PostType::Answer, Some(1), 2, body, 730.0),
                post(3, PostType::Answer, Some(1), 2, body, 365.0),
                post(4, PostType::Answer, Some(1), 1, body, 730.0),
                post(5, PostType::Answer, Some(1), 2, body, late),
                post(
                    6,
                    PostType::Answer,
                    Some(1),
                    2,
                    "<p>see John\u{2019}s answers</p>",
                    730.0,
                ),
                post(
                    7,
                    PostType::Answer,
                    Some(1),
                    2,
                    "<p>nothing to see</p>",
                    730.0,
                ),
            ],
            vec![],
            vec![],
        );
        let got = mine_late_answers(&s, &BTreeSet::new(), &MinerConfig::default());
        assert_eq!(ids(&got), vec![2, 5, 6]);
        assert_eq!(got[0].evidence, "accepted answer");
        assert_eq!(got[2].evidence, "'s answers");
    }

    #[test]
    fn boundary_one_millisecond_short() {
        let q = post(1, PostType::Question, None, 0, "q", 0.0);
        let mut a = post(2, PostType::Answer, Some(1), 2, "other answer", 0.0);
        a.creation_date = q.creation_date + Duration::milliseconds(LATE_AFTER_MS - 1);
        let s = store(vec![q, a], vec![], vec![]);
        assert!(mine_late_answers(&s, &BTreeSet::new(), &MinerConfig::default()).is_empty());
    }

    #[test]
    fn precedence_makes_sets_disjoint() {
        let s = store(
            vec![
                post(1, PostType::Question, None, 0, "q", 0.0),
                post(
                    2,
                    PostType::Answer,
                    Some(1),
                    3,
                    "<p>other answer</p>",
                    800.0,
                ),
            ],
            vec![comment(1, 2, "deprecated", 801.0)],
            vec![
                rev(1, 2, HistoryType::InitialBody, &code(100, 'a'), 800.0),
                rev(2, 2, HistoryType::EditBody, &code(150, 'z'), 802.0),
            ],
        );
        let r = mine_all(&s, &MinerConfig::default());
        assert_eq!(ids(&r.keyword_comment), vec![2]);
        assert!(r.edited_after_comment.is_empty());
        assert!(r.late_answer.is_empty());
        assert_eq!(r.report().keyword_comment, 1);
    }
}
