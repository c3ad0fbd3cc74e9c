//! RSS 2.0 and Atom parsing.

use std::borrow::Cow;

use chrono::{DateTime, Utc};
use encoding_rs::{Encoding, UTF_16BE, UTF_16LE, UTF_8};
use quick_xml::escape::resolve_predefined_entity;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::model::FeedItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedFormat {
    Rss2,
    Atom,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("not well-formed XML: {0}")]
    NotXml(String),
    #[error("unrecognized root element <{0}>")]
    UnknownFormat(String),
    #[error("unsupported character encoding {0:?}")]
    EncodingError(String),
}

/// An entry as it appears in the document, before fingerprinting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawItem {
    pub guid: Option<String>,
    pub link: Option<String>,
    pub title: String,
    pub published: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFeed {
    pub format: FeedFormat,
    pub title: Option<String>,
    pub items: Vec<RawItem>,
    /// Entries dropped for having neither guid nor link.
    pub skipped: usize,
}

impl ParsedFeed {
    pub fn into_feed_items(self, stream_id: &str, ingested_at: DateTime<Utc>) -> Vec<FeedItem> {
        self.items
            .into_iter()
            .filter_map(|raw| {
                FeedItem::new(
                    stream_id,
                    raw.guid,
                    raw.link.unwrap_or_default(),
                    raw.title,
                    raw.published,
                    ingested_at,
                )
                .ok()
            })
            .collect()
    }
}

/// Reads the `encoding` pseudo-attribute of a leading XML declaration.
fn declared_encoding(head: &[u8]) -> Option<String> {
    let head = &head[..head.len().min(256)];
    let text = std::str::from_utf8(head)
        .ok()
        .map(Cow::Borrowed)
        .unwrap_or_else(|| String::from_utf8_lossy(head));
    let text = text.trim_start_matches('\u{feff}').trim_start();
    if !text.starts_with("<?xml") {
        return None;
    }
    let decl = &text[..text.find("?>")?];
    let at = decl.find("encoding")?;
    let rest = decl[at + "encoding".len()..].trim_start().strip_prefix('=')?.trim_start();
    let quote = rest.chars().next().filter(|c| *c == '"' || *c == '\'')?;
    let rest = &rest[1..];
    Some(rest[..rest.find(quote)?].to_owned())
}

/// Picks the document encoding: byte-order mark, then the XML declaration,
/// then the transport's charset, then UTF-8.
pub fn detect_encoding(
    body: &[u8],
    declared_charset: Option<&str>,
) -> Result<&'static Encoding, ParseError> {
    if let Some((enc, _)) = Encoding::for_bom(body) {
        return Ok(enc);
    }
    let label = declared_encoding(body).or_else(|| declared_charset.map(str::to_owned));
    match label {
        None => Ok(UTF_8),
        Some(label) => {
            let enc = Encoding::for_label(label.trim().as_bytes())
                .ok_or_else(|| ParseError::EncodingError(label.clone()))?;
            // a declaration readable as ASCII cannot really be UTF-16
            if enc == UTF_16LE || enc == UTF_16BE {
                Ok(UTF_8)
            } else {
                Ok(enc)
            }
        }
    }
}

pub fn decode_body<'a>(
    body: &'a [u8],
    declared_charset: Option<&str>,
) -> Result<Cow<'a, str>, ParseError> {
    let enc = detect_encoding(body, declared_charset)?;
    let (text, _, _) = enc.decode(body);
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Title,
    Link,
    Guid,
    Date,
    FeedTitle,
}

fn local(name: &[u8]) -> String {
    let name = match name.iter().position(|b| *b == b':') {
        Some(i) => &name[i + 1..],
        None => name,
    };
    String::from_utf8_lossy(name).into_owned()
}

fn attr(e: &BytesStart<'_>, key: &str) -> Option<String> {
    e.attributes()
        .flatten()
        .find(|a| local(a.key.as_ref()) == key)
        .and_then(|a| a.unescape_value().ok().map(|v| v.into_owned()))
}

fn parse_date(s: &str, format: FeedFormat) -> Option<DateTime<Utc>> {
    let s = s.trim();
    let parsed = match format {
        FeedFormat::Rss2 => DateTime::parse_from_rfc2822(s).or_else(|_| DateTime::parse_from_rfc3339(s)),
        FeedFormat::Atom => DateTime::parse_from_rfc3339(s).or_else(|_| DateTime::parse_from_rfc2822(s)),
    };
    parsed.ok().map(|d| d.with_timezone(&Utc))
}

fn non_empty(s: String) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_owned())
}

#[derive(Default)]
struct Entry {
    title: String,
    link: Option<String>,
    alt_link: Option<String>,
    guid: String,
    date: String,
    updated: String,
}

/// Parses an RSS 2.0 or Atom document, keeping document order.
pub fn parse_feed(body: &[u8], declared_charset: Option<&str>) -> Result<ParsedFeed, ParseError> {
    let text = decode_body(body, declared_charset)?;
    let mut reader = Reader::from_str(&text);
    reader.config_mut().check_end_names = true;

    let mut format: Option<FeedFormat> = None;
    let mut stack: Vec<String> = Vec::new();
    let mut entry: Option<Entry> = None;
    // (field, depth of the field element)
    let mut capture: Option<(Field, usize)> = None;
    let mut buf = String::new();
    let mut title: Option<String> = None;
    let mut items = Vec::new();
    let mut skipped = 0;
    let mut seen_root = false;

    let entry_depth = |f: FeedFormat| match f {
        FeedFormat::Rss2 => 3,
        FeedFormat::Atom => 2,
    };

    loop {
        let event = reader
            .read_event()
            .map_err(|e| ParseError::NotXml(format!("at byte {}: {e}", reader.error_position())))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                let name = local(e.name().as_ref());
                if !seen_root {
                    seen_root = true;
                    format = Some(match name.as_str() {
                        "rss" => FeedFormat::Rss2,
                        "feed" => FeedFormat::Atom,
                        other => return Err(ParseError::UnknownFormat(other.to_owned())),
                    });
                }
                let fmt = format.unwrap();
                stack.push(name.clone());
                let depth = stack.len();
                let ed = entry_depth(fmt);
                let is_entry = match fmt {
                    FeedFormat::Rss2 => depth == ed && name == "item" && stack[1] == "channel",
                    FeedFormat::Atom => depth == ed && name == "entry",
                };
                if is_entry {
                    entry = Some(Entry::default());
                } else if let Some(en) = entry.as_mut().filter(|_| depth == ed + 1 && capture.is_none()) {
                    let field = match (fmt, name.as_str()) {
                        (_, "title") => Some(Field::Title),
                        (FeedFormat::Rss2, "link") => Some(Field::Link),
                        (FeedFormat::Rss2, "guid") => Some(Field::Guid),
                        (FeedFormat::Rss2, "pubDate") => Some(Field::Date),
                        (FeedFormat::Atom, "id") => Some(Field::Guid),
                        (FeedFormat::Atom, "published") => Some(Field::Date),
                        (FeedFormat::Atom, "updated") => {
                            // kept apart so `published` wins when both exist
                            capture = Some((Field::Date, depth));
                            buf.clear();
                            en.updated.clear();
                            None
                        }
                        (FeedFormat::Atom, "link") => {
                            let rel = attr(e, "rel");
                            if let Some(href) = attr(e, "href").and_then(non_empty) {
                                match rel.as_deref() {
                                    None | Some("alternate") if en.link.is_none() => en.link = Some(href),
                                    _ if en.alt_link.is_none() => en.alt_link = Some(href),
                                    _ => {}
                                }
                            }
                            None
                        }
                        _ => None,
                    };
                    if let Some(f) = field {
                        capture = Some((f, depth));
                        buf.clear();
                    }
                } else if entry.is_none() && capture.is_none() && depth == ed && name == "title" {
                    capture = Some((Field::FeedTitle, depth));
                    buf.clear();
                }
                if is_empty {
                    close(&mut stack, &mut capture, &mut entry, &mut buf, &mut title, &mut items, &mut skipped, fmt);
                }
            }
            Event::End(_) => {
                let fmt = format.ok_or_else(|| ParseError::NotXml("end tag before root".into()))?;
                close(&mut stack, &mut capture, &mut entry, &mut buf, &mut title, &mut items, &mut skipped, fmt);
            }
            Event::Text(t) => {
                if capture.is_some() {
                    let s = t.xml_content().map_err(|e| ParseError::NotXml(e.to_string()))?;
                    buf.push_str(&s);
                } else if !seen_root || stack.is_empty() {
                    let s = t.xml_content().map_err(|e| ParseError::NotXml(e.to_string()))?;
                    if !s.trim().is_empty() {
                        return Err(ParseError::NotXml("text outside the root element".into()));
                    }
                }
            }
            Event::CData(t) => {
                if capture.is_some() {
                    buf.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Event::GeneralRef(r) => {
                if capture.is_some() {
                    if let Some(c) = r.resolve_char_ref().map_err(|e| ParseError::NotXml(e.to_string()))? {
                        buf.push(c);
                    } else {
                        let name = r.decode().map_err(|e| ParseError::NotXml(e.to_string()))?;
                        match resolve_predefined_entity(&name) {
                            Some(v) => buf.push_str(v),
                            None => {
                                buf.push('&');
                                buf.push_str(&name);
                                buf.push(';');
                            }
                        }
                    }
                }
            }
            Event::Eof => break,
            Event::Decl(_) | Event::PI(_) | Event::Comment(_) | Event::DocType(_) => {}
        }
    }
    if !stack.is_empty() {
        return Err(ParseError::NotXml(format!("unclosed <{}>", stack.last().unwrap())));
    }
    let format = format.ok_or_else(|| ParseError::NotXml("no root element".into()))?;
    Ok(ParsedFeed {
        format,
        title,
        items,
        skipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn close(
    stack: &mut Vec<String>,
    capture: &mut Option<(Field, usize)>,
    entry: &mut Option<Entry>,
    buf: &mut String,
    title: &mut Option<String>,
    items: &mut Vec<RawItem>,
    skipped: &mut usize,
    fmt: FeedFormat,
) {
    let depth = stack.len();
    let name = stack.pop().unwrap_or_default();
    if let Some((field, d)) = *capture {
        if d == depth {
            let text = std::mem::take(buf);
            *capture = None;
            match (field, entry.as_mut()) {
                (Field::FeedTitle, _) => *title = non_empty(text),
                (Field::Title, Some(en)) => en.title = text.trim().to_owned(),
                (Field::Link, Some(en)) => en.link = non_empty(text),
                (Field::Guid, Some(en)) => en.guid = text,
                (Field::Date, Some(en)) if fmt == FeedFormat::Atom && name == "updated" => en.updated = text,
                (Field::Date, Some(en)) => en.date = text,
                _ => {}
            }
        }
        return;
    }
    let is_entry_end = match fmt {
        FeedFormat::Rss2 => depth == 3 && name == "item",
        FeedFormat::Atom => depth == 2 && name == "entry",
    };
    if is_entry_end {
        if let Some(en) = entry.take() {
            let guid = non_empty(en.guid);
            let link = en.link.or(en.alt_link);
            if guid.is_none() && link.is_none() {
                *skipped += 1;
                return;
            }
            let date = if en.date.trim().is_empty() { en.updated } else { en.date };
            items.push(RawItem {
                guid,
                link,
                title: en.title,
                published: parse_date(&date, fmt),
            });
        }
    }
}
