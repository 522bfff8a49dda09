//! Data-dump ingestion: streaming XML rows, typed records, and the indexed
//! record store.

pub mod records;
pub mod store;
pub mod xml;

pub use records::{
    parse_comment, parse_history, parse_post, parse_timestamp, split_tags, CommentRecord,
    HistoryType, PostHistoryRecord, PostId, PostRecord, PostType, RowError,
};
pub use store::{build_store, ingest_dump, LoadReport, RecordStore, StoreError};
pub use xml::{stream_rows, AttrMap, RowStream, TableKind, XmlError};
