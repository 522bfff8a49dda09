//! Embedded record store with by-id, by-parent and by-post lookups.
//!
//! On-disk layout (version 1), one directory:
//!
//! ```text
//! FORMAT            "sotk-store 1"
//! posts.jsonl       one PostRecord per line, ascending id
//! comments.jsonl    one CommentRecord per line, ascending id
//! history.jsonl     one PostHistoryRecord per line, ascending id
//! load_report.txt   counts, skipped rows, dangling references
//! ```
//!
//! Secondary indices are rebuilt on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::records::{
    CommentRecord, HistoryType, PostHistoryRecord, PostId, PostRecord, PostType, RowError,
};
use super::xml::TableKind;

pub const STORE_FORMAT: &str = "sotk-store 1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("duplicate {table} id {id}")]
    DuplicateId { table: TableKind, id: i64 },
    #[error("store at {path} has unsupported format {found:?}")]
    Format { path: PathBuf, found: String },
    #[error("corrupt store file {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Xml(#[from] super::xml::XmlError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Accounting for a load: what was read, what was skipped and why.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub posts_loaded: u64,
    pub comments_loaded: u64,
    pub history_loaded: u64,
    pub skipped: Vec<RowError>,
    pub dangling_comments: Vec<i64>,
    pub dangling_history: Vec<i64>,
    pub orphan_answers: Vec<i64>,
}

impl LoadReport {
    pub fn skipped_in(&self, table: TableKind) -> usize {
        self.skipped.iter().filter(|e| e.table == table).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format: {STORE_FORMAT}");
        let _ = writeln!(out, "posts loaded: {}", self.posts_loaded);
        let _ = writeln!(out, "comments loaded: {}", self.comments_loaded);
        let _ = writeln!(out, "history loaded: {}", self.history_loaded);
        for table in [
            TableKind::Posts,
            TableKind::Comments,
            TableKind::PostHistory,
        ] {
            let _ = writeln!(out, "{table} rows skipped: {}", self.skipped_in(table));
        }
        let _ = writeln!(out, "dangling comments: {}", self.dangling_comments.len());
        let _ = writeln!(out, "dangling history: {}", self.dangling_history.len());
        let _ = writeln!(
            out,
            "answers with missing question: {}",
            self.orphan_answers.len()
        );
        for e in &self.skipped {
            let _ = writeln!(out, "skip: {e}");
        }
        for id in &self.dangling_comments {
            let _ = writeln!(out, "dangling comment: {id}");
        }
        for id in &self.dangling_history {
            let _ = writeln!(out, "dangling history: {id}");
        }
        for id in &self.orphan_answers {
            let _ = writeln!(out, "orphan answer: {id}");
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct RecordStore {
    posts: BTreeMap<PostId, PostRecord>,
    comments: BTreeMap<i64, CommentRecord>,
    history: BTreeMap<i64, PostHistoryRecord>,
    answers_by_parent: BTreeMap<PostId, Vec<PostId>>,
    comments_by_post: BTreeMap<PostId, Vec<i64>>,
    history_by_post: BTreeMap<PostId, Vec<i64>>,
    sealed: bool,
    report: LoadReport,
}

impl RecordStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    pub fn record_skip(&mut self, err: RowError) {
        log::warn!("skipping row: {err}");
        self.report.skipped.push(err);
    }

    pub fn insert_post(&mut self, post: PostRecord) -> Result<(), StoreError> {
        assert!(!self.sealed, "insert into sealed store");
        if self.posts.contains_key(&post.id) {
            return Err(StoreError::DuplicateId {
                table: TableKind::Posts,
                id: post.id,
            });
        }
        self.posts.insert(post.id, post);
        Ok(())
    }

    pub fn insert_comment(&mut self, comment: CommentRecord) -> Result<(), StoreError> {
        assert!(!self.sealed, "insert into sealed store");
        if self.comments.contains_key(&comment.id) {
            return Err(StoreError::DuplicateId {
                table: TableKind::Comments,
                id: comment.id,
            });
        }
        self.comments.insert(comment.id, comment);
        Ok(())
    }

    pub fn insert_history(&mut self, rev: PostHistoryRecord) -> Result<(), StoreError> {
        assert!(!self.sealed, "insert into sealed store");
        if self.history.contains_key(&rev.id) {
            return Err(StoreError::DuplicateId {
                table: TableKind::PostHistory,
                id: rev.id,
            });
        }
        self.history.insert(rev.id, rev);
        Ok(())
    }

    /// Builds all secondary indices and freezes the store.
    pub fn seal(&mut self) {
        if self.sealed {
            return;
        }
        // A post keeps at most one InitialBody revision: the earliest.
        let mut initial_seen = BTreeSet::new();
        let mut order: Vec<&PostHistoryRecord> = self.history.values().collect();
        order.sort_by_key(|h| (h.creation_date, h.id));
        let mut extra_initial = Vec::new();
        for h in order {
            if h.history_type == HistoryType::InitialBody && !initial_seen.insert(h.post_id) {
                extra_initial.push(h.id);
            }
        }
        for id in extra_initial {
            let h = self.history.remove(&id).expect("present");
            self.report.skipped.push(RowError {
                table: TableKind::PostHistory,
                row_id: Some(id),
                reason: format!("second InitialBody revision for post {}", h.post_id),
            });
        }

        self.answers_by_parent.clear();
        self.comments_by_post.clear();
        self.history_by_post.clear();
        self.report.orphan_answers.clear();
        self.report.dangling_comments.clear();
        self.report.dangling_history.clear();

        for post in self.posts.values() {
            if let (PostType::Answer, Some(parent)) = (post.post_type, post.parent_id) {
                self.answers_by_parent
                    .entry(parent)
                    .or_default()
                    .push(post.id);
                if !self.posts.contains_key(&parent) {
                    self.report.orphan_answers.push(post.id);
                }
            }
        }
        for c in self.comments.values() {
            self.comments_by_post
                .entry(c.post_id)
                .or_default()
                .push(c.id);
            if !self.posts.contains_key(&c.post_id) {
                self.report.dangling_comments.push(c.id);
            }
        }
        for h in self.history.values() {
            self.history_by_post
                .entry(h.post_id)
                .or_default()
                .push(h.id);
            if !self.posts.contains_key(&h.post_id) {
                self.report.dangling_history.push(h.id);
            }
        }
        let comments = &self.comments;
        for ids in self.comments_by_post.values_mut() {
            ids.sort_by_key(|id| (comments[id].creation_date, *id));
        }
        let history = &self.history;
        for ids in self.history_by_post.values_mut() {
            ids.sort_by_key(|id| (history[id].creation_date, *id));
        }
        self.report.posts_loaded = self.posts.len() as u64;
        self.report.comments_loaded = self.comments.len() as u64;
        self.report.history_loaded = self.history.len() as u64;
        self.sealed = true;
    }

    pub fn post(&self, id: PostId) -> Option<&PostRecord> {
        self.posts.get(&id)
    }

    pub fn posts(&self) -> impl Iterator<Item = &PostRecord> {
        self.posts.values()
    }

    pub fn comments(&self) -> impl Iterator<Item = &CommentRecord> {
        self.comments.values()
    }

    pub fn history(&self) -> impl Iterator<Item = &PostHistoryRecord> {
        self.history.values()
    }

    pub fn n_posts(&self) -> usize {
        self.posts.len()
    }

    pub fn n_comments(&self) -> usize {
        self.comments.len()
    }

    pub fn n_history(&self) -> usize {
        self.history.len()
    }

    /// Answer ids under a question, ascending.
    pub fn answer_ids(&self, question: PostId) -> &[PostId] {
        self.answers_by_parent
            .get(&question)
            .map_or(&[], Vec::as_slice)
    }

    /// Comment ids on a post, creation-date ascending (ties by id).
    pub fn comment_ids(&self, post: PostId) -> &[i64] {
        self.comments_by_post.get(&post).map_or(&[], Vec::as_slice)
    }

    pub fn comments_on(&self, post: PostId) -> impl Iterator<Item = &CommentRecord> {
        self.comment_ids(post).iter().map(|id| &self.comments[id])
    }

    /// Revisions of a post, creation-date ascending (ties by id).
    pub fn history_of(&self, post: PostId) -> impl Iterator<Item = &PostHistoryRecord> {
        self.history_by_post
            .get(&post)
            .map_or(&[][..], Vec::as_slice)
            .iter()
            .map(|id| &self.history[id])
    }

    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        assert!(self.sealed, "only sealed stores are saved");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("FORMAT"), format!("{STORE_FORMAT}\n").as_bytes())?;
        write_jsonl(&dir.join("posts.jsonl"), self.posts.values())?;
        write_jsonl(&dir.join("comments.jsonl"), self.comments.values())?;
        write_jsonl(&dir.join("history.jsonl"), self.history.values())?;
        write_file(
            &dir.join("load_report.txt"),
            self.report.render().as_bytes(),
        )?;
        Ok(())
    }

    /// Opens a saved store. Skip records from the original load are not
    /// persisted in structured form; the returned report reflects this open.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let fmt_path = dir.join("FORMAT");
        let found = fs::read_to_string(&fmt_path).map_err(io_err(&fmt_path))?;
        if found.trim() != STORE_FORMAT {
            return Err(StoreError::Format {
                path: dir.to_owned(),
                found: found.trim().to_owned(),
            });
        }
        let mut store = RecordStore::new();
        for p in read_jsonl::<PostRecord>(&dir.join("posts.jsonl"))? {
            store.insert_post(p)?;
        }
        for c in read_jsonl::<CommentRecord>(&dir.join("comments.jsonl"))? {
            store.insert_comment(c)?;
        }
        for h in read_jsonl::<PostHistoryRecord>(&dir.join("history.jsonl"))? {
            store.insert_history(h)?;
        }
        store.seal();
        Ok(store)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl Iterator<Item = &'a T>,
) -> Result<(), StoreError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Loads parsed rows into a sealed store, recording row-level failures in the
/// report, and writes the store to `path` when given.
pub fn build_store<P, C, H>(
    posts: P,
    comments: C,
    history: H,
    path: Option<&Path>,
) -> Result<RecordStore, StoreError>
where
    P: IntoIterator<Item = Result<PostRecord, RowError>>,
    C: IntoIterator<Item = Result<CommentRecord, RowError>>,
    H: IntoIterator<Item = Result<PostHistoryRecord, RowError>>,
{
    let mut store = RecordStore::new();
    for row in posts {
        match row {
            Ok(p) => store.insert_post(p)?,
            Err(e) => store.record_skip(e),
        }
    }
    for row in comments {
        match row {
            Ok(c) => store.insert_comment(c)?,
            Err(e) => store.record_skip(e),
        }
    }
    for row in history {
        match row {
            Ok(h) => store.insert_history(h)?,
            Err(e) => store.record_skip(e),
        }
    }
    store.seal();
    if let Some(dir) = path {
        store.save(dir)?;
    }
    Ok(store)
}

/// Streams the three dump files into a store. Malformed XML aborts; bad rows
/// are skipped and reported.
pub fn ingest_dump<RP: BufRead, RC: BufRead, RH: BufRead>(
    posts: RP,
    comments: RC,
    history: Option<RH>,
    path: Option<&Path>,
) -> Result<RecordStore, StoreError> {
    use super::records::{parse_comment, parse_history, parse_post};

    let mut store = RecordStore::new();
    load_table(
        &mut store,
        posts,
        TableKind::Posts,
        parse_post,
        RecordStore::insert_post,
    )?;
    load_table(
        &mut store,
        comments,
        TableKind::Comments,
        parse_comment,
        RecordStore::insert_comment,
    )?;
    if let Some(h) = history {
        load_table(
            &mut store,
            h,
            TableKind::PostHistory,
            parse_history,
            RecordStore::insert_history,
        )?;
    }
    store.seal();
    if let Some(dir) = path {
        store.save(dir)?;
    }
    Ok(store)
}

fn load_table<R: BufRead, T>(
    store: &mut RecordStore,
    src: R,
    table: TableKind,
    parse: fn(&super::xml::AttrMap) -> Result<T, RowError>,
    insert: fn(&mut RecordStore, T) -> Result<(), StoreError>,
) -> Result<(), StoreError> {
    for row in super::xml::stream_rows(src, table) {
        match parse(&row?) {
            Ok(rec) => insert(store, rec)?,
            Err(e) => store.record_skip(e),
        }
    }
    Ok(())
}
