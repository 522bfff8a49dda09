//! Streaming reader for data-dump XML: a root element holding `row` elements
//! whose attributes carry the columns.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

pub type AttrMap = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableKind {
    Posts,
    Comments,
    PostHistory,
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableKind::Posts => "Posts",
            TableKind::Comments => "Comments",
            TableKind::PostHistory => "PostHistory",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum XmlError {
    /// `last_row_end` is the byte offset just past the last complete `row`.
    #[error("{table}: malformed XML at byte {position} (last complete row ends at byte {last_row_end}): {message}")]
    Malformed {
        table: TableKind,
        position: u64,
        last_row_end: u64,
        message: String,
    },
}

impl XmlError {
    pub fn last_row_end(&self) -> u64 {
        match self {
            XmlError::Malformed { last_row_end, .. } => *last_row_end,
        }
    }
}

/// Iterator of attribute maps, one per `row` element, in document order.
///
/// Holds a single reusable event buffer, so memory stays proportional to the
/// largest row rather than to the file.
pub struct RowStream<R: BufRead> {
    reader: Reader<R>,
    table: TableKind,
    buf: Vec<u8>,
    depth: usize,
    last_row_end: u64,
    rows: u64,
    done: bool,
}

pub fn stream_rows<R: BufRead>(source: R, table: TableKind) -> RowStream<R> {
    let mut reader = Reader::from_reader(source);
    reader.config_mut().check_end_names = true;
    RowStream {
        reader,
        table,
        buf: Vec::with_capacity(4096),
        depth: 0,
        last_row_end: 0,
        rows: 0,
        done: false,
    }
}

impl<R: BufRead> RowStream<R> {
    /// Capacity of the internal event buffer; bounded by the largest row seen.
    pub fn buffer_capacity(&self) -> usize {
        self.buf.capacity()
    }

    pub fn rows_read(&self) -> u64 {
        self.rows
    }

    fn fail(&mut self, position: u64, message: impl Into<String>) -> XmlError {
        self.done = true;
        XmlError::Malformed {
            table: self.table,
            position,
            last_row_end: self.last_row_end,
            message: message.into(),
        }
    }

    fn row_attrs(&mut self, start: &BytesStart<'_>) -> Result<AttrMap, String> {
        let mut map = AttrMap::new();
        for attr in start.attributes() {
            let attr = attr.map_err(|e| e.to_string())?;
            let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
            let value = attr
                .unescape_value()
                .map_err(|e| e.to_string())?
                .into_owned();
            map.insert(key, value);
        }
        Ok(map)
    }
}

impl<R: BufRead> Iterator for RowStream<R> {
    type Item = Result<AttrMap, XmlError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            self.buf.clear();
            let event = match self.reader.read_event_into(&mut self.buf) {
                Ok(ev) => ev.into_owned(),
                Err(e) => {
                    let pos = self.reader.error_position();
                    return Some(Err(self.fail(pos, e.to_string())));
                }
            };
            match event {
                Event::Start(start) => {
                    self.depth += 1;
                    if self.depth == 2 && start.local_name().as_ref() == b"row" {
                        // `<row ...></row>`: attributes are complete at the start tag.
                        return Some(self.emit(&start));
                    }
                }
                Event::Empty(start) => {
                    if self.depth == 1 && start.local_name().as_ref() == b"row" {
                        let item = self.emit(&start);
                        self.last_row_end = self.reader.buffer_position();
                        return Some(item);
                    }
                }
                Event::End(_) => {
                    self.depth = self.depth.saturating_sub(1);
                    if self.depth == 1 {
                        self.last_row_end = self.reader.buffer_position();
                    }
                }
                Event::Eof => {
                    if self.depth > 0 {
                        let pos = self.reader.buffer_position();
                        return Some(Err(self.fail(pos, "unexpected end of file inside element")));
                    }
                    self.done = true;
                    return None;
                }
                _ => {}
            }
        }
    }
}

impl<R: BufRead> RowStream<R> {
    fn emit(&mut self, start: &BytesStart<'_>) -> Result<AttrMap, XmlError> {
        match self.row_attrs(start) {
            Ok(map) => {
                self.rows += 1;
                Ok(map)
            }
            Err(msg) => {
                let pos = self.reader.buffer_position();
                Err(self.fail(pos, msg))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const POSTS: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<posts>
  <row Id="1" PostTypeId="1" Body="&lt;p&gt;hi&lt;/p&gt;" Extra="kept" />
  <row Id="2" PostTypeId="2" ParentId="1" Body="a&#xA;b" />
  <row Id="3" PostTypeId="2" ParentId="1" Body="c"></row>
</posts>"#;

    #[test]
    fn rows_in_order_with_entities() {
        let rows: Vec<_> = stream_rows(POSTS.as_bytes(), TableKind::Posts)
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0]["Body"], "<p>hi</p>");
        assert_eq!(rows[0]["Extra"], "kept");
        assert_eq!(rows[1]["Body"], "a\nb");
        assert_eq!(rows[2]["Id"], "3");
    }

    #[test]
    fn truncated_reports_last_complete_row() {
        let cut = POSTS.find("<row Id=\"2\"").unwrap() + 20;
        let truncated = &POSTS[..cut];
        let expected = POSTS.find("<row Id=\"1\"").unwrap()
            + POSTS[POSTS.find("<row Id=\"1\"").unwrap()..]
                .find("/>")
                .unwrap()
            + 2;
        let mut stream = stream_rows(truncated.as_bytes(), TableKind::Posts);
        assert!(stream.next().unwrap().is_ok());
        let err = stream.next().unwrap().unwrap_err();
        assert_eq!(err.last_row_end(), expected as u64);
        assert!(stream.next().is_none());
    }

    #[test]
    fn truncated_between_rows_is_error() {
        let cut = POSTS.find("</posts>").unwrap();
        let rows: Vec<_> = stream_rows(POSTS[..cut].as_bytes(), TableKind::Posts).collect();
        assert_eq!(rows.len(), 4);
        assert!(rows[3].is_err());
    }

    #[test]
    fn empty_root() {
        let rows: Vec<_> =
            stream_rows("<comments></comments>".as_bytes(), TableKind::Comments).collect();
        assert!(rows.is_empty());
    }
}
