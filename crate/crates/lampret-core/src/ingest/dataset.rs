//! Line-oriented dataset format: one JSON document record per line.
//!
//! Record schema (field order fixed):
//! `{doc_id, blocks:[{bbox:[4], type, text, attrs:{font,b,i,u}, images:[{h,w,pixels,src}]}]}`.
//! Image pixels are inline base64 of the little-endian f32 raster; a `path`
//! reference to a raw f32 file (relative to the dataset file) is also
//! accepted.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{
    validate_document, Block, BlockType, BoundingBox, Document, ImageRef, TextAttributes,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error at line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("document {doc_id} failed validation: {reason}")]
    InvalidDocument { doc_id: String, reason: String },
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    blocks: Vec<BlockRecord>,
}

#[derive(Serialize, Deserialize)]
struct BlockRecord {
    bbox: [f64; 4],
    #[serde(rename = "type")]
    block_type: u8,
    text: String,
    attrs: AttrRecord,
    images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
struct AttrRecord {
    font: f64,
    b: u8,
    i: u8,
    u: u8,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    h: usize,
    w: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default)]
    src: String,
}

fn to_record(doc: &Document) -> DocRecord {
    DocRecord {
        doc_id: doc.doc_id.clone(),
        blocks: doc
            .blocks
            .iter()
            .map(|b| BlockRecord {
                bbox: [b.bbox.x_left, b.bbox.y_top, b.bbox.x_right, b.bbox.y_bottom],
                block_type: b.block_type.id(),
                text: b.text.clone(),
                attrs: AttrRecord {
                    font: b.attributes.font_size_raw,
                    b: b.attributes.bold as u8,
                    i: b.attributes.italic as u8,
                    u: b.attributes.underline as u8,
                },
                images: b
                    .images
                    .iter()
                    .map(|img| {
                        let bytes: Vec<u8> =
                            img.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
                        ImageRecord {
                            h: img.height,
                            w: img.width,
                            pixels: Some(B64.encode(bytes)),
                            path: None,
                            src: img.source_id.clone(),
                        }
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn from_record(rec: DocRecord, line: usize, base_dir: &Path) -> Result<Document, DatasetError> {
    let schema_err = |reason: String| DatasetError::Schema { line, reason };
    let mut blocks = Vec::with_capacity(rec.blocks.len());
    for (bi, b) in rec.blocks.into_iter().enumerate() {
        let block_type = BlockType::from_id(b.block_type)
            .ok_or_else(|| schema_err(format!("block {bi}: bad type id {}", b.block_type)))?;
        let mut images = Vec::with_capacity(b.images.len());
        for (ii, img) in b.images.into_iter().enumerate() {
            let bytes = match (&img.pixels, &img.path) {
                (Some(p64), _) => B64
                    .decode(p64)
                    .map_err(|e| schema_err(format!("block {bi} image {ii}: bad base64: {e}")))?,
                (None, Some(path)) => std::fs::read(base_dir.join(path))?,
                (None, None) => {
                    return Err(schema_err(format!(
                        "block {bi} image {ii}: neither pixels nor path"
                    )))
                }
            };
            if bytes.len() != img.h * img.w * 3 * 4 {
                return Err(schema_err(format!(
                    "block {bi} image {ii}: pixel byte length {} != {}",
                    bytes.len(),
                    img.h * img.w * 3 * 4
                )));
            }
            let pixels: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            images.push(ImageRef {
                height: img.h,
                width: img.w,
                pixels,
                source_id: img.src,
            });
        }
        blocks.push(Block {
            bbox: BoundingBox::new(b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]),
            block_type,
            text: b.text,
            attributes: TextAttributes {
                font_size_raw: b.attrs.font,
                bold: b.attrs.b != 0,
                italic: b.attrs.i != 0,
                underline: b.attrs.u != 0,
            },
            images,
        });
    }
    Ok(Document::new(rec.doc_id, blocks))
}

/// Write documents as one JSON record per line. Every document must pass
/// [`validate_document`] first.
pub fn write_dataset<'a, I>(docs: I, path: &Path) -> Result<usize, DatasetError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut out = BufWriter::new(File::create(path)?);
    let mut n = 0;
    for doc in docs {
        let violations = validate_document(doc);
        if !violations.is_empty() {
            return Err(DatasetError::InvalidDocument {
                doc_id: doc.doc_id.clone(),
                reason: violations[0].message.clone(),
            });
        }
        serde_json::to_writer(&mut out, &to_record(doc)).map_err(|e| DatasetError::Schema {
            line: n + 1,
            reason: e.to_string(),
        })?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// Streaming reader over a dataset file; yields one document per line and
/// reports corrupt lines with their line number.
pub struct DatasetReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    base_dir: PathBuf,
}

impl Iterator for DatasetReader {
    type Item = Result<Document, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(DatasetError::Schema {
                        line: self.line_no,
                        reason: e.to_string(),
                    }))
                }
            };
            return Some(from_record(rec, self.line_no, &self.base_dir));
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<DatasetReader, DatasetError> {
    let file = File::open(path)?;
    Ok(DatasetReader {
        lines: BufReader::new(file).lines(),
        line_no: 0,
        base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
    })
}

/// Convenience: read the whole dataset into memory.
pub fn read_all(path: &Path) -> Result<Vec<Document>, DatasetError> {
    read_dataset(path)?.collect()
}
