//! Parser for a small HTML subset (h1-h6, p, ul/ol/li, table/tr/td, img,
//! b/strong, i/em, u). One block per top-level element; geometry is
//! synthesized by a deterministic top-down flow layout since raw markup has
//! no rendered coordinates.

use thiserror::Error;

use crate::layout::{Block, BlockType, BoundingBox, Document, ImageRef, TextAttributes};

#[derive(Debug, Error, PartialEq)]
pub enum HtmlError {
    #[error("malformed markup at byte {offset}: {reason}")]
    MalformedMarkup { offset: usize, reason: String },
}

/// An unsupported element that was skipped rather than rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseWarning {
    pub offset: usize,
    pub tag: String,
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub document: Document,
    pub warnings: Vec<ParseWarning>,
}

const MARGIN_X: f64 = 0.05;

/// Font size for heading level 1-6: 1.0 down to 0.5.
fn heading_font(level: u32) -> f64 {
    1.0 - 0.1 * (level - 1) as f64
}

const BODY_FONT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open { tag: String, attrs: Vec<(String, String)>, offset: usize, self_closing: bool },
    Close { tag: String, offset: usize },
    Text { content: String },
}

fn decode_entities(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
}

fn lex(input: &str) -> Result<Vec<Token>, HtmlError> {
    let bytes = input.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes[pos] == b'<' {
            let end = input[pos..].find('>').map(|i| pos + i).ok_or_else(|| {
                HtmlError::MalformedMarkup {
                    offset: pos,
                    reason: "unterminated tag".to_string(),
                }
            })?;
            let inner = input[pos + 1..end].trim();
            if inner.is_empty() {
                return Err(HtmlError::MalformedMarkup {
                    offset: pos,
                    reason: "empty tag".to_string(),
                });
            }
            if let Some(name) = inner.strip_prefix('/') {
                tokens.push(Token::Close {
                    tag: name.trim().to_ascii_lowercase(),
                    offset: pos,
                });
            } else {
                let self_closing = inner.ends_with('/');
                let inner = inner.trim_end_matches('/').trim();
                let mut parts = inner.splitn(2, char::is_whitespace);
                let tag = parts.next().unwrap().to_ascii_lowercase();
                let mut attrs = Vec::new();
                if let Some(rest) = parts.next() {
                    for piece in rest.split_whitespace() {
                        if let Some((k, v)) = piece.split_once('=') {
                            attrs.push((
                                k.to_ascii_lowercase(),
                                v.trim_matches('"').trim_matches('\'').to_string(),
                            ));
                        }
                    }
                }
                tokens.push(Token::Open {
                    tag,
                    attrs,
                    offset: pos,
                    self_closing,
                });
            }
            pos = end + 1;
        } else {
            let next = input[pos..].find('<').map(|i| pos + i).unwrap_or(bytes.len());
            let text = decode_entities(&input[pos..next]);
            if !text.trim().is_empty() {
                tokens.push(Token::Text { content: text });
            }
            pos = next;
        }
    }
    Ok(tokens)
}

fn is_void(tag: &str) -> bool {
    matches!(tag, "img" | "br" | "hr")
}

fn inline_style(tag: &str) -> Option<fn(&mut TextAttributes)> {
    match tag {
        "b" | "strong" => Some(|a| a.bold = true),
        "i" | "em" => Some(|a| a.italic = true),
        "u" => Some(|a| a.underline = true),
        _ => None,
    }
}

fn block_type_for(tag: &str) -> Option<(BlockType, f64)> {
    match tag {
        "h1" => Some((BlockType::Header, heading_font(1))),
        "h2" => Some((BlockType::Header, heading_font(2))),
        "h3" => Some((BlockType::Header, heading_font(3))),
        "h4" => Some((BlockType::Header, heading_font(4))),
        "h5" => Some((BlockType::Header, heading_font(5))),
        "h6" => Some((BlockType::Header, heading_font(6))),
        "p" => Some((BlockType::Paragraph, BODY_FONT)),
        "ul" | "ol" => Some((BlockType::List, BODY_FONT)),
        "table" => Some((BlockType::Table, BODY_FONT)),
        _ => None,
    }
}

/// Deterministic placeholder pixels for an `img` element: the src string has
/// no pixel data, so derive a solid color from a hash of it.
fn placeholder_image(src: &str) -> ImageRef {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in src.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let rgb = [
        ((h & 0xff) as f32) / 255.0,
        (((h >> 8) & 0xff) as f32) / 255.0,
        (((h >> 16) & 0xff) as f32) / 255.0,
    ];
    ImageRef::solid(8, 8, rgb, src)
}

struct PendingBlock {
    block_type: BlockType,
    text: String,
    attributes: TextAttributes,
    images: Vec<ImageRef>,
    /// relative flow height before normalization
    units: f64,
}

impl PendingBlock {
    fn flow_units(&self) -> f64 {
        let text_units = 1.0 + (self.text.len() as f64 / 80.0).ceil();
        text_units + 3.0 * self.images.len() as f64
    }
}

/// Parse a byte sequence of the supported markup subset into a document.
/// Unsupported elements are skipped (their text content is kept) and
/// reported as warnings, not errors.
pub fn parse_html(bytes: &[u8], doc_id: &str) -> Result<ParseOutcome, HtmlError> {
    let input = std::str::from_utf8(bytes).map_err(|e| HtmlError::MalformedMarkup {
        offset: e.valid_up_to(),
        reason: "invalid utf-8".to_string(),
    })?;
    let tokens = lex(input)?;
    let mut warnings = Vec::new();
    let mut pending: Vec<PendingBlock> = Vec::new();
    let mut i = 0;

    while i < tokens.len() {
        match &tokens[i] {
            Token::Open { tag, attrs, offset, self_closing } => {
                if tag == "img" {
                    let src = attrs
                        .iter()
                        .find(|(k, _)| k == "src")
                        .map(|(_, v)| v.clone())
                        .unwrap_or_else(|| format!("{doc_id}#img{i}"));
                    pending.push(PendingBlock {
                        block_type: BlockType::Image,
                        text: String::new(),
                        attributes: TextAttributes {
                            font_size_raw: BODY_FONT,
                            ..TextAttributes::default()
                        },
                        images: vec![placeholder_image(&src)],
                        units: 0.0,
                    });
                    i += 1;
                } else if let Some((block_type, font)) = block_type_for(tag) {
                    let open_tag = tag.clone();
                    let open_offset = *offset;
                    if *self_closing {
                        i += 1;
                        continue;
                    }
                    let mut attributes = TextAttributes {
                        font_size_raw: font,
                        ..TextAttributes::default()
                    };
                    let mut text = String::new();
                    let mut images = Vec::new();
                    let mut depth = 1usize;
                    i += 1;
                    while i < tokens.len() && depth > 0 {
                        match &tokens[i] {
                            Token::Open { tag, attrs, offset, self_closing } => {
                                if tag == &open_tag {
                                    depth += 1;
                                } else if tag == "img" {
                                    let src = attrs
                                        .iter()
                                        .find(|(k, _)| k == "src")
                                        .map(|(_, v)| v.clone())
                                        .unwrap_or_else(|| format!("{doc_id}#img{i}"));
                                    images.push(placeholder_image(&src));
                                } else if let Some(apply) = inline_style(tag) {
                                    apply(&mut attributes);
                                } else if matches!(tag.as_str(), "li" | "tr" | "td" | "th" | "br") {
                                    if !text.is_empty() && !text.ends_with(' ') {
                                        text.push(' ');
                                    }
                                } else {
                                    warnings.push(ParseWarning {
                                        offset: *offset,
                                        tag: tag.clone(),
                                    });
                                    log::warn!("skipping unsupported element <{tag}> at byte {offset}");
                                }
                                let _ = self_closing;
                            }
                            Token::Close { tag, .. } => {
                                if tag == &open_tag {
                                    depth -= 1;
                                }
                            }
                            Token::Text { content } => {
                                let trimmed = content.trim();
                                if !trimmed.is_empty() {
                                    if !text.is_empty() && !text.ends_with(' ') {
                                        text.push(' ');
                                    }
                                    text.push_str(trimmed);
                                }
                            }
                        }
                        i += 1;
                    }
                    if depth > 0 {
                        return Err(HtmlError::MalformedMarkup {
                            offset: open_offset,
                            reason: format!("unclosed <{open_tag}>"),
                        });
                    }
                    pending.push(PendingBlock {
                        block_type,
                        text,
                        attributes,
                        images,
                        units: 0.0,
                    });
                } else if is_void(tag) {
                    i += 1;
                } else {
                    warnings.push(ParseWarning {
                        offset: *offset,
                        tag: tag.clone(),
                    });
                    log::warn!("skipping unsupported element <{tag}> at byte {offset}");
                    i += 1;
                }
            }
            Token::Close { tag, offset } => {
                return Err(HtmlError::MalformedMarkup {
                    offset: *offset,
                    reason: format!("unexpected closing tag </{tag}>"),
                });
            }
            Token::Text { content } => {
                // stray top-level text becomes a paragraph block
                pending.push(PendingBlock {
                    block_type: BlockType::Paragraph,
                    text: content.trim().to_string(),
                    attributes: TextAttributes {
                        font_size_raw: BODY_FONT,
                        ..TextAttributes::default()
                    },
                    images: Vec::new(),
                    units: 0.0,
                });
                i += 1;
            }
        }
    }

    // top-down flow layout, normalized to [0,1]
    for block in &mut pending {
        block.units = block.flow_units();
    }
    let total: f64 = pending.iter().map(|b| b.units).sum::<f64>().max(1.0);
    let mut cursor = 0.0;
    let blocks: Vec<Block> = pending
        .into_iter()
        .map(|p| {
            let y_top = cursor / total;
            cursor += p.units;
            let y_bottom = (cursor / total).min(1.0);
            Block {
                bbox: BoundingBox::new(MARGIN_X, y_top, 1.0 - MARGIN_X, y_bottom),
                block_type: p.block_type,
                text: p.text,
                attributes: p.attributes,
                images: p.images,
            }
        })
        .collect();

    Ok(ParseOutcome {
        document: Document::new(doc_id, blocks),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::validate_document;

    #[test]
    fn heading_and_paragraph_flow() {
        let out = parse_html(b"<h1>T</h1><p>body</p>", "d").unwrap();
        let doc = &out.document;
        assert_eq!(doc.blocks.len(), 2);
        assert_eq!(doc.blocks[0].block_type, BlockType::Header);
        assert_eq!(doc.blocks[0].attributes.font_size_raw, 1.0);
        assert_eq!(doc.blocks[1].block_type, BlockType::Paragraph);
        assert_eq!(doc.blocks[1].attributes.font_size_raw, 0.3);
        assert!(doc.blocks[0].bbox.y_top < doc.blocks[1].bbox.y_top);
        assert!(out.warnings.is_empty());
        assert!(validate_document(doc).is_empty());
    }

    #[test]
    fn h6_font_is_half() {
        let out = parse_html(b"<h6>small</h6>", "d").unwrap();
        assert_eq!(out.document.blocks[0].attributes.font_size_raw, 0.5);
    }

    #[test]
    fn bold_tag_sets_attribute() {
        let out = parse_html(b"<p><b>x</b></p>", "d").unwrap();
        let b = &out.document.blocks[0];
        assert_eq!(b.block_type, BlockType::Paragraph);
        assert!(b.attributes.bold);
        assert!(!b.attributes.italic);
        assert_eq!(b.text, "x");
    }

    #[test]
    fn list_and_table_are_single_blocks() {
        let out = parse_html(
            b"<ul><li>a</li><li>b</li></ul><table><tr><td>x</td><td>y</td></tr></table>",
            "d",
        )
        .unwrap();
        assert_eq!(out.document.blocks.len(), 2);
        assert_eq!(out.document.blocks[0].block_type, BlockType::List);
        assert_eq!(out.document.blocks[0].text, "a b");
        assert_eq!(out.document.blocks[1].block_type, BlockType::Table);
        assert_eq!(out.document.blocks[1].text, "x y");
    }

    #[test]
    fn standalone_img_becomes_image_block() {
        let out = parse_html(b"<img src=\"pic.png\"><p>text</p>", "d").unwrap();
        assert_eq!(out.document.blocks[0].block_type, BlockType::Image);
        assert_eq!(out.document.blocks[0].images.len(), 1);
        assert_eq!(out.document.blocks[0].images[0].source_id, "pic.png");
    }

    #[test]
    fn inline_img_attaches_to_paragraph() {
        let out = parse_html(b"<p>see <img src=\"a.png\"> here</p>", "d").unwrap();
        assert_eq!(out.document.blocks.len(), 1);
        assert_eq!(out.document.blocks[0].images.len(), 1);
        assert_eq!(out.document.blocks[0].text, "see here");
    }

    #[test]
    fn unsupported_element_warns_but_parses() {
        let out = parse_html(b"<p>a <span>b</span></p>", "d").unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].tag, "span");
        assert_eq!(out.document.blocks[0].text, "a b");
    }

    #[test]
    fn malformed_markup_reports_offset() {
        let err = parse_html(b"<p>unclosed", "d").unwrap_err();
        assert_eq!(
            err,
            HtmlError::MalformedMarkup {
                offset: 0,
                reason: "unclosed <p>".to_string()
            }
        );
        let err = parse_html(b"ok</p>", "d").unwrap_err();
        match err {
            HtmlError::MalformedMarkup { offset, .. } => assert_eq!(offset, 2),
        }
    }
}
