//! Text cleaning for post bodies and comments.
//!
//! Body grammar handled here:
//!
//! * `<code>` / `<code attr=...>` opens a code span, the first following
//!   `</code>` closes it. Span contents are kept byte-for-byte; the tags are
//!   dropped. An unclosed span runs to the end of the body.
//! * Outside code every tag is replaced by a space, HTML entities are
//!   decoded, URLs become `[URL]`, e-mail addresses become `[EMAIL]` and
//!   whitespace runs collapse to one space.
//!
//! URL grammar: `(http|https|ftp)://` or `www.` followed by a run of
//! characters other than whitespace, `<`, `>`, `"`, `'`; trailing
//! `. , ; : ! ? ) ]` are not part of the URL. Matching is case-insensitive.

use std::borrow::Cow;
use std::sync::OnceLock;

use regex::Regex;

pub const URL_TOKEN: &str = "[URL]";
pub const EMAIL_TOKEN: &str = "[EMAIL]";
pub const SEPARATOR: &str = "<RS>";
/// What a literal separator inside source text is rewritten to.
pub const SEPARATOR_ESCAPE: &str = "<RS >";

/// Switches for the cleaning pipeline. The defaults are the reference
/// behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CleanOptions {
    /// Replace URLs and e-mail addresses with placeholders.
    pub abstract_identifiers: bool,
    /// Keep code span contents; when off, spans are dropped.
    pub keep_code: bool,
}

impl Default for CleanOptions {
    fn default() -> Self {
        CleanOptions {
            abstract_identifiers: true,
            keep_code: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment<'a> {
    Text(&'a str),
    Code(&'a str),
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)\b(?:(?:https?|ftp)://|www\.)[^\s<>"']*[^\s<>"'.,;:!?)\]]"#)
            .expect("url regex")
    })
}

fn email_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,}")
            .expect("email regex")
    })
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^>]*>").expect("tag regex"))
}

fn ws_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s+").expect("ws regex"))
}

/// Finds the next `<code>` opening tag at or after `from`; returns
/// `(tag_start, content_start)`.
fn find_code_open(body: &str, from: usize) -> Option<(usize, usize)> {
    let bytes = body.as_bytes();
    let mut i = from;
    while let Some(rel) = body[i..].find('<') {
        let start = i + rel;
        let rest = &bytes[start + 1..];
        if rest.len() >= 4 && rest[..4].eq_ignore_ascii_case(b"code") {
            match rest.get(4) {
                Some(b'>') => return Some((start, start + 6)),
                Some(c) if c.is_ascii_whitespace() => {
                    let close = body[start..].find('>')?;
                    return Some((start, start + close + 1));
                }
                _ => {}
            }
        }
        i = start + 1;
    }
    None
}

fn find_code_close(body: &str, from: usize) -> Option<(usize, usize)> {
    let lower_hit = body[from..]
        .match_indices("</")
        .find(|(idx, _)| {
            let tail = &body.as_bytes()[from + idx + 2..];
            tail.len() >= 5 && tail[..4].eq_ignore_ascii_case(b"code") && tail[4] == b'>'
        })
        .map(|(idx, _)| from + idx);
    lower_hit.map(|s| (s, s + 7))
}

/// Splits an HTML body into alternating text and code segments.
pub fn split_code_spans(body: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some((open, content)) = find_code_open(body, pos) {
        if open > pos {
            out.push(Segment::Text(&body[pos..open]));
        }
        match find_code_close(body, content) {
            Some((close, after)) => {
                out.push(Segment::Code(&body[content..close]));
                pos = after;
            }
            None => {
                log::debug!("unclosed <code> at byte {open}; treating remainder as code");
                out.push(Segment::Code(&body[content..]));
                pos = body.len();
            }
        }
    }
    if pos < body.len() {
        out.push(Segment::Text(&body[pos..]));
    }
    out
}

/// Replaces URLs and e-mail addresses with their placeholder tokens.
pub fn abstract_identifiers(text: &str) -> String {
    let urls = url_re().replace_all(text, URL_TOKEN);
    email_re().replace_all(&urls, EMAIL_TOKEN).into_owned()
}

fn neutralize_separator(text: &str) -> Cow<'_, str> {
    if text.contains(SEPARATOR) {
        Cow::Owned(text.replace(SEPARATOR, SEPARATOR_ESCAPE))
    } else {
        Cow::Borrowed(text)
    }
}

fn clean_prose(fragment: &str, opts: CleanOptions) -> String {
    let stripped = tag_re().replace_all(fragment, " ");
    let decoded = html_escape::decode_html_entities(&stripped);
    let abstracted = if opts.abstract_identifiers {
        Cow::Owned(abstract_identifiers(&decoded))
    } else {
        decoded
    };
    ws_re().replace_all(&abstracted, " ").into_owned()
}

/// Cleans an HTML post body. Never fails.
pub fn clean_text(body: &str) -> String {
    clean_text_with(body, CleanOptions::default())
}

pub fn clean_text_with(body: &str, opts: CleanOptions) -> String {
    let segments = split_code_spans(body);
    let mut out = String::with_capacity(body.len());
    for (i, seg) in segments.iter().enumerate() {
        match *seg {
            Segment::Code(code) => {
                if opts.keep_code {
                    out.push_str(code)
                } else {
                    out.push(' ')
                }
            }
            Segment::Text(text) => {
                let mut prose = clean_prose(text, opts);
                // Tag-to-space substitution is collapsed here, so the result is
                // trimmed only where the body itself begins or ends.
                if i == 0 {
                    prose = prose.trim_start().to_owned();
                }
                if i + 1 == segments.len() {
                    prose = prose.trim_end().to_owned();
                }
                out.push_str(&prose);
            }
        }
    }
    if !opts.keep_code {
        out = ws_re().replace_all(out.trim(), " ").into_owned();
    }
    neutralize_separator(&out).into_owned()
}

/// Cleans plain-text comment content: identifiers abstracted, whitespace
/// collapsed, no markup handling.
pub fn clean_comment(text: &str) -> String {
    clean_comment_with(text, CleanOptions::default())
}

pub fn clean_comment_with(text: &str, opts: CleanOptions) -> String {
    let abstracted = if opts.abstract_identifiers {
        Cow::Owned(abstract_identifiers(text))
    } else {
        Cow::Borrowed(text)
    };
    let collapsed = ws_re().replace_all(abstracted.trim(), " ");
    neutralize_separator(&collapsed).into_owned()
}

/// Contents of every code span in order, joined by newlines.
pub fn extract_code(body: &str) -> String {
    let codes: Vec<&str> = split_code_spans(body)
        .into_iter()
        .filter_map(|s| match s {
            Segment::Code(c) => Some(c),
            Segment::Text(_) => None,
        })
        .collect();
    codes.join("\n")
}
