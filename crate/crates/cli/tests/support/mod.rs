//! Synthetic dump fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sotk_core::ingest::{
    ingest_dump, CommentRecord, HistoryType, PostHistoryRecord, PostId, PostRecord, PostType,
    RecordStore,
};
use sotk_core::miner::LATE_AFTER_MS;

#[derive(Debug, Clone, Default)]
pub struct Dump {
    pub posts: Vec<PostRecord>,
    pub comments: Vec<CommentRecord>,
    pub history: Vec<PostHistoryRecord>,
}

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2015, 3, 1, 12, 0, 0).unwrap()
}

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\n' => out.push_str("&#xA;"),
            '\r' => out.push_str("&#xD;"),
            c => out.push(c),
        }
    }
    out
}

fn ts(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.3f").to_string()
}

fn table(root: &str, rows: impl Iterator<Item = Vec<(&'static str, String)>>) -> String {
    let mut out = format!("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<{root}>\n");
    for row in rows {
        out.push_str("  <row");
        for (k, v) in row {
            let _ = write!(out, " {k}=\"{}\"", esc(&v));
        }
        out.push_str(" />\n");
    }
    let _ = writeln!(out, "</{root}>");
    out
}

impl Dump {
    pub fn extend(&mut self, other: Dump) {
        self.posts.extend(other.posts);
        self.comments.extend(other.comments);
        self.history.extend(other.history);
    }

    pub fn n_rows(&self) -> usize {
        self.posts.len() + self.comments.len() + self.history.len()
    }

    pub fn posts_xml(&self) -> String {
        table(
            "posts",
            self.posts.iter().map(|p| {
                let mut r = vec![
                    ("Id", p.id.to_string()),
                    (
                        "PostTypeId",
                        match p.post_type {
                            PostType::Question => "1".into(),
                            PostType::Answer => "2".into(),
                            PostType::Other(c) => c.to_string(),
                        },
                    ),
                ];
                if let Some(parent) = p.parent_id {
                    r.push(("ParentId", parent.to_string()));
                }
                r.push(("CreationDate", ts(&p.creation_date)));
                r.push(("Score", p.score.to_string()));
                r.push(("Body", p.body.clone()));
                if let Some(t) = &p.title {
                    r.push(("Title", t.clone()));
                }
                if let Some(e) = &p.last_edit_date {
                    r.push(("LastEditDate", ts(e)));
                }
                r
            }),
        )
    }

    pub fn comments_xml(&self) -> String {
        table(
            "comments",
            self.comments.iter().map(|c| {
                vec![
                    ("Id", c.id.to_string()),
                    ("PostId", c.post_id.to_string()),
                    ("Score", c.score.to_string()),
                    ("Text", c.text.clone()),
                    ("CreationDate", ts(&c.creation_date)),
                ]
            }),
        )
    }

    pub fn history_xml(&self) -> String {
        table(
            "posthistory",
            self.history.iter().map(|h| {
                let code = match h.history_type {
                    HistoryType::InitialBody => 2,
                    HistoryType::EditBody => 5,
                    HistoryType::OtherKind(c) => c,
                };
                vec![
                    ("Id", h.id.to_string()),
                    ("PostHistoryTypeId", code.to_string()),
                    ("PostId", h.post_id.to_string()),
                    ("CreationDate", ts(&h.creation_date)),
                    ("Text", h.text.clone()),
                ]
            }),
        )
    }

    /// Writes `Posts.xml`, `Comments.xml` and `PostHistory.xml` into `dir`.
    pub fn write(&self, dir: &Path) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("Posts.xml"), self.posts_xml()).unwrap();
        fs::write(dir.join("Comments.xml"), self.comments_xml()).unwrap();
        fs::write(dir.join("PostHistory.xml"), self.history_xml()).unwrap();
    }

    /// Round-trips through the XML reader.
    pub fn ingest(&self) -> RecordStore {
        let (p, c, h) = (self.posts_xml(), self.comments_xml(), self.history_xml());
        ingest_dump(p.as_bytes(), c.as_bytes(), Some(h.as_bytes()), None).unwrap()
    }
}

struct Builder {
    dump: Dump,
    next_post: PostId,
    next_comment: i64,
    next_rev: i64,
}

impl Builder {
    fn new(first_id: PostId) -> Self {
        Builder {
            dump: Dump::default(),
            next_post: first_id,
            next_comment: first_id * 10,
            next_rev: first_id * 10,
        }
    }

    fn question(&mut self, title: &str, body: &str, at: DateTime<Utc>) -> PostId {
        let id = self.next_post;
        self.next_post += 1;
        self.dump.posts.push(PostRecord {
            id,
            post_type: PostType::Question,
            parent_id: None,
            score: 3,
            title: Some(title.into()),
            body: body.into(),
            tags: None,
            creation_date: at,
            last_edit_date: None,
            accepted_answer_id: None,
        });
        id
    }

    fn answer(&mut self, q: PostId, score: i64, body: &str, at: DateTime<Utc>) -> PostId {
        let id = self.next_post;
        self.next_post += 1;
        self.dump.posts.push(PostRecord {
            id,
            post_type: PostType::Answer,
            parent_id: Some(q),
            score,
            title: None,
            body: body.into(),
            tags: None,
            creation_date: at,
            last_edit_date: None,
            accepted_answer_id: None,
        });
        id
    }

    fn comment(&mut self, post: PostId, text: &str, at: DateTime<Utc>) {
        self.dump.comments.push(CommentRecord {
            id: self.next_comment,
            post_id: post,
            text: text.into(),
            score: 0,
            creation_date: at,
        });
        self.next_comment += 1;
    }

    fn revision(&mut self, post: PostId, kind: HistoryType, text: &str, at: DateTime<Utc>) {
        self.dump.history.push(PostHistoryRecord {
            id: self.next_rev,
            post_id: post,
            history_type: kind,
            text: text.into(),
            creation_date: at,
        });
        self.next_rev += 1;
        if kind == HistoryType::EditBody {
            let p = self.dump.posts.iter_mut().find(|p| p.id == post).unwrap();
            p.last_edit_date = Some(p.last_edit_date.map_or(at, |e| e.max(at)));
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Planted {
    pub keyword: BTreeSet<PostId>,
    pub edited: BTreeSet<PostId>,
    pub late: BTreeSet<PostId>,
    pub distractors: BTreeSet<PostId>,
}

const NEUTRAL: &str = "Thanks, this helped me a lot.";

fn code(s: &str) -> String {
    format!("<p>Try this:</p><pre><code>{s}</code></pre>")
}

/// 20 planted positives and 60 distractors per heuristic, with the score,
/// distance and date boundaries on both sides.
pub fn miner_fixture(first_id: PostId) -> (Dump, Planted) {
    let mut b = Builder::new(first_id);
    let mut planted = Planted::default();
    let day = Duration::days(1);
    let q_title = "How do I read a file line by line?";
    let q_body = "<p>I need to read a large file.</p>";

    // keyword comment
    let keywords = [
        "deprecated",
        "Outdated",
        "OBSOLETE",
        "out of date",
        "out-of-date",
    ];
    for i in 0..20 {
        let t = t0() + day * i;
        let q = b.question(q_title, q_body, t);
        let a = b.answer(
            q,
            1 + (i as i64 % 3),
            "<p>Use the reader class.</p>",
            t + day,
        );
        b.comment(
            a,
            &format!("This is {} now.", keywords[i as usize % 5]),
            t + day * 2,
        );
        planted.keyword.insert(a);
    }
    for i in 0..60 {
        let t = t0() + day * i;
        let (title, body, score, answer, comment) = match i / 15 {
            0 => (
                q_title,
                q_body,
                0,
                "<p>Use the reader.</p>",
                "this is deprecated",
            ),
            1 => (
                "Is the old reader deprecated?",
                q_body,
                2,
                "<p>Use the reader.</p>",
                "deprecated indeed",
            ),
            2 => (
                q_title,
                q_body,
                2,
                "<p>Use the reader.</p>",
                "not obsoleted, nondeprecated",
            ),
            _ => (
                q_title,
                q_body,
                2,
                "<p>This method is deprecated but works.</p>",
                NEUTRAL,
            ),
        };
        let q = b.question(title, body, t);
        let a = b.answer(q, score, answer, t + day);
        b.comment(a, comment, t + day * 2);
        planted.distractors.insert(a);
    }

    // edited after comment
    let before = "a".repeat(100);
    for i in 0..20 {
        let t = t0() + day * i;
        let q = b.question(q_title, q_body, t);
        let after = if i % 2 == 0 {
            "b".repeat(100)
        } else {
            "c".repeat(160)
        };
        let a = b.answer(q, 1 + (i as i64 % 2), &code(&after), t + day);
        b.revision(a, HistoryType::InitialBody, &code(&before), t + day);
        b.comment(a, NEUTRAL, t + day * 2);
        b.revision(a, HistoryType::EditBody, &code(&after), t + day * 3);
        planted.edited.insert(a);
    }
    let near = format!("{}a", "b".repeat(99));
    for i in 0..60 {
        let t = t0() + day * i;
        let q = b.question(q_title, q_body, t);
        let far = "b".repeat(100);
        let (score, after, edit_at, comment) = match i / 15 {
            0 => (2, near.as_str(), t + day * 3, true),
            // edit at or before the first comment
            1 => (
                2,
                far.as_str(),
                if i % 2 == 0 {
                    t + day * 2
                } else {
                    t + day + Duration::hours(1)
                },
                true,
            ),
            2 => (0, far.as_str(), t + day * 3, true),
            _ => (2, far.as_str(), t + day * 3, false),
        };
        let a = b.answer(q, score, &code(after), t + day);
        b.revision(a, HistoryType::InitialBody, &code(&before), t + day);
        if comment {
            b.comment(a, NEUTRAL, t + day * 2);
        }
        b.revision(a, HistoryType::EditBody, &code(after), edit_at);
        planted.distractors.insert(a);
    }

    // late answer
    let late = Duration::milliseconds(LATE_AFTER_MS);
    let phrases = [
        "As the accepted answer says",
        "Building on John's answers above",
        "The Answer By Jane shows it",
        "Unlike the other answer",
        "Per the Accepted Answer",
    ];
    for i in 0..20 {
        let t = t0() + day * i;
        let q = b.question(q_title, q_body, t);
        let at = if i % 4 == 0 {
            t + late
        } else {
            t + late + day * i
        };
        let body = format!("<p>{}, use the stream API.</p>", phrases[i as usize % 5]);
        let a = b.answer(q, 2 + (i as i64 % 2), &body, at);
        planted.late.insert(a);
    }
    for i in 0..60 {
        let t = t0() + day * i;
        let q = b.question(q_title, q_body, t);
        let (score, at, body) = match i / 15 {
            0 => (
                3,
                t + late - Duration::milliseconds(1),
                "<p>As the accepted answer says, use streams.</p>",
            ),
            1 => (
                1,
                t + late + day,
                "<p>As the accepted answer says, use streams.</p>",
            ),
            2 => (3, t + late + day, "<p>Use streams.</p>"),
            _ => (3, t + day, "<p>See the other answer.</p>"),
        };
        let a = b.answer(q, score, body, at);
        if i / 15 == 2 {
            b.comment(a, "see the accepted answer", at + day);
        }
        planted.distractors.insert(a);
    }
    (b.dump, planted)
}

const WORDS: &[&str] = &[
    "the", "file", "reader", "loop", "array", "index", "value", "string", "parse", "return",
    "function", "class", "object", "list", "map", "key", "error", "null", "thread", "buffer",
    "stream", "query", "table", "row", "column", "you", "can", "use", "this", "with", "instead",
    "call", "method", "type", "int", "works",
];

fn sentence(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random questions, answers and comments, roughly `n_rows` rows in total.
/// Vocabulary avoids miner keywords and reference phrases; every answer is
/// posted within a month of its question and has no history.
pub fn random_dump(seed: u64, n_rows: usize, first_id: PostId) -> Dump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(first_id);
    let bodies = [
        "<p>{s}</p>",
        "<p>{s}</p><pre><code>for (int i = 0; i &lt; n; i++) { {s} }</code></pre>",
        "<p>{s} see https://example.com/docs?x=1 or mail dev@example.org</p>",
        "<p>{s} &amp; more <RS> literal</p>",
        "<p>  </p>",
        "<b>{s}</b><code>x = 1</code>",
    ];
    while b.dump.n_rows() < n_rows {
        let t = t0() + Duration::minutes(rng.gen_range(0..5_000_000));
        let s = sentence(&mut rng, 6);
        let q = b.question(&s, &format!("<p>{s}?</p>"), t);
        for _ in 0..rng.gen_range(0..4) {
            let n = rng.gen_range(3..40);
            let s = sentence(&mut rng, n);
            let body = bodies.choose(&mut rng).unwrap().replace("{s}", &s);
            let at = t + Duration::minutes(rng.gen_range(1..40_000));
            let a = b.answer(q, rng.gen_range(-2..6), &body, at);
            for _ in 0..rng.gen_range(0..5) {
                let n = rng.gen_range(1..15);
                let c = sentence(&mut rng, n);
                let c = if rng.gen_bool(0.1) {
                    format!("{c} <RS> x")
                } else {
                    c
                };
                b.comment(a, &c, at + Duration::minutes(rng.gen_range(1..10_000)));
            }
        }
    }
    b.dump
}
