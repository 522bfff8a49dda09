use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use super::xml::{AttrMap, TableKind};

pub type PostId = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PostType {
    Question,
    Answer,
    Other(u32),
}

impl PostType {
    pub fn from_code(code: u32) -> Self {
        match code {
            1 => PostType::Question,
            2 => PostType::Answer,
            other => PostType::Other(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostRecord {
    pub id: PostId,
    pub post_type: PostType,
    pub parent_id: Option<PostId>,
    pub score: i64,
    pub title: Option<String>,
    pub body: String,
    pub tags: Option<Vec<String>>,
    pub creation_date: DateTime<Utc>,
    pub last_edit_date: Option<DateTime<Utc>>,
    pub accepted_answer_id: Option<PostId>,
}

impl PostRecord {
    pub fn is_answer(&self) -> bool {
        self.post_type == PostType::Answer
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentRecord {
    pub id: i64,
    pub post_id: PostId,
    pub text: String,
    pub score: i64,
    pub creation_date: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HistoryType {
    InitialBody,
    EditBody,
    OtherKind(u32),
}

impl HistoryType {
    pub fn from_code(code: u32) -> Self {
        match code {
            2 => HistoryType::InitialBody,
            5 => HistoryType::EditBody,
            other => HistoryType::OtherKind(other),
        }
    }

    /// Whether the revision text is a full post body.
    pub fn carries_body(self) -> bool {
        matches!(self, HistoryType::InitialBody | HistoryType::EditBody)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostHistoryRecord {
    pub id: i64,
    pub post_id: PostId,
    pub history_type: HistoryType,
    pub text: String,
    pub creation_date: DateTime<Utc>,
}

/// A single row that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct RowError {
    pub table: TableKind,
    pub row_id: Option<i64>,
    pub reason: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row_id {
            Some(id) => write!(f, "{} row {}: {}", self.table, id, self.reason),
            None => write!(f, "{} row (no id): {}", self.table, self.reason),
        }
    }
}

struct Row<'a> {
    table: TableKind,
    attrs: &'a AttrMap,
    id: Option<i64>,
}

impl<'a> Row<'a> {
    fn new(table: TableKind, attrs: &'a AttrMap) -> Self {
        let id = attrs.get("Id").and_then(|v| v.trim().parse().ok());
        Row { table, attrs, id }
    }

    fn err(&self, reason: impl Into<String>) -> RowError {
        RowError {
            table: self.table,
            row_id: self.id,
            reason: reason.into(),
        }
    }

    fn required(&self, key: &str) -> Result<&'a str, RowError> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| self.err(format!("missing required attribute {key}")))
    }

    fn int<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T, RowError> {
        raw.trim()
            .parse()
            .map_err(|_| self.err(format!("attribute {key}: not an integer: {raw:?}")))
    }

    fn required_int<T: std::str::FromStr>(&self, key: &str) -> Result<T, RowError> {
        let raw = self.required(key)?;
        self.int(key, raw)
    }

    fn optional_int<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, RowError> {
        match self.attrs.get(key) {
            Some(raw) if !raw.trim().is_empty() => self.int(key, raw).map(Some),
            _ => Ok(None),
        }
    }

    fn time(&self, key: &str, raw: &str) -> Result<DateTime<Utc>, RowError> {
        parse_timestamp(raw)
            .ok_or_else(|| self.err(format!("attribute {key}: bad timestamp {raw:?}")))
    }

    fn required_time(&self, key: &str) -> Result<DateTime<Utc>, RowError> {
        let raw = self.required(key)?;
        self.time(key, raw)
    }

    fn optional_time(&self, key: &str) -> Result<Option<DateTime<Utc>>, RowError> {
        match self.attrs.get(key) {
            Some(raw) if !raw.trim().is_empty() => self.time(key, raw).map(Some),
            _ => Ok(None),
        }
    }
}

/// Parses dump timestamps (`2008-07-31T21:42:52.667`, optional trailing `Z`)
/// as UTC, truncated to millisecond precision.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let s = raw.trim().trim_end_matches('Z');
    let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f"))
        .ok()?;
    let millis = naive.and_utc().timestamp_millis();
    DateTime::from_timestamp_millis(millis)
}

/// Splits a dump tag string. Accepts both `<a><b>` and `|a|b|` encodings.
pub fn split_tags(raw: &str) -> Vec<String> {
    let raw = raw.trim();
    let pieces: Vec<&str> = if raw.starts_with('<') {
        raw.split(['<', '>']).collect()
    } else {
        raw.split('|').collect()
    };
    pieces
        .into_iter()
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn parse_post(attrs: &AttrMap) -> Result<PostRecord, RowError> {
    let row = Row::new(TableKind::Posts, attrs);
    let id: i64 = row.required_int("Id")?;
    let post_type = PostType::from_code(row.required_int("PostTypeId")?);
    let creation_date = row.required_time("CreationDate")?;
    let body = row.required("Body")?.to_owned();
    let score = row.optional_int("Score")?.unwrap_or(0);
    let last_edit_date = row.optional_time("LastEditDate")?;
    let parent_id: Option<i64> = row.optional_int("ParentId")?;

    let is_question = post_type == PostType::Question;
    let parent_id = match post_type {
        PostType::Answer => Some(parent_id.ok_or_else(|| row.err("answer without ParentId"))?),
        PostType::Question => None,
        PostType::Other(_) => parent_id,
    };
    if let Some(edit) = last_edit_date {
        if edit < creation_date {
            return Err(row.err("LastEditDate precedes CreationDate"));
        }
    }
    let title = attrs.get("Title").filter(|_| is_question).cloned();
    let tags = attrs
        .get("Tags")
        .filter(|_| is_question)
        .map(|t| split_tags(t));
    let accepted_answer_id = if is_question {
        row.optional_int("AcceptedAnswerId")?
    } else {
        None
    };

    Ok(PostRecord {
        id,
        post_type,
        parent_id,
        score,
        title,
        body,
        tags,
        creation_date,
        last_edit_date,
        accepted_answer_id,
    })
}

pub fn parse_comment(attrs: &AttrMap) -> Result<CommentRecord, RowError> {
    let row = Row::new(TableKind::Comments, attrs);
    let id = row.required_int("Id")?;
    let post_id = row.required_int("PostId")?;
    let text = row.required("Text")?;
    if text.trim().is_empty() {
        return Err(row.err("empty comment text"));
    }
    Ok(CommentRecord {
        id,
        post_id,
        text: text.to_owned(),
        score: row.optional_int("Score")?.unwrap_or(0),
        creation_date: row.required_time("CreationDate")?,
    })
}

pub fn parse_history(attrs: &AttrMap) -> Result<PostHistoryRecord, RowError> {
    let row = Row::new(TableKind::PostHistory, attrs);
    let id = row.required_int("Id")?;
    let post_id = row.required_int("PostId")?;
    let history_type = HistoryType::from_code(row.required_int("PostHistoryTypeId")?);
    let text = match attrs.get("Text") {
        Some(t) => t.clone(),
        None if history_type.carries_body() => return Err(row.err("body revision without Text")),
        None => String::new(),
    };
    Ok(PostHistoryRecord {
        id,
        post_id,
        history_type,
        text,
        creation_date: row.required_time("CreationDate")?,
    })
}

/// Attribute map from `(key, value)` pairs; handy for tests and fixtures.
pub fn attrs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> AttrMap {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect::<BTreeMap<_, _>>()
}
