//! Domain types for content blocks and documents, 2D sorting into the
//! serialized (zigzag) order, block-segment-id assignment, and attachment of
//! standalone image blocks to their nearest text block.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Block-segment id reserved for the global CLS position.
pub const GLOBAL_CLS_SEGMENT: usize = 0;

/// Normalized bounding box, origin at the document's top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_left: f64,
    pub y_top: f64,
    pub x_right: f64,
    pub y_bottom: f64,
}

impl BoundingBox {
    pub fn new(x_left: f64, y_top: f64, x_right: f64, y_bottom: f64) -> Self {
        BoundingBox {
            x_left,
            y_top,
            x_right,
            y_bottom,
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        in_range(self.x_left)
            && in_range(self.y_top)
            && in_range(self.x_right)
            && in_range(self.y_bottom)
            && self.x_left <= self.x_right
            && self.y_top <= self.y_bottom
    }

    /// Euclidean distance between top-left corners.
    pub fn top_left_distance(&self, other: &BoundingBox) -> f64 {
        let dx = self.x_left - other.x_left;
        let dy = self.y_top - other.y_top;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Semantic block type. Ids 0-12 are content types; 13 is reserved for
/// padding and is never emitted by a parser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum BlockType {
    Header,
    Paragraph,
    Image,
    List,
    Table,
    Caption,
    Footer,
    Navigation,
    Sidebar,
    Quote,
    Code,
    Form,
    Other,
    Padding,
}

impl BlockType {
    pub const COUNT: usize = 14;

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<BlockType> {
        use BlockType::*;
        Some(match id {
            0 => Header,
            1 => Paragraph,
            2 => Image,
            3 => List,
            4 => Table,
            5 => Caption,
            6 => Footer,
            7 => Navigation,
            8 => Sidebar,
            9 => Quote,
            10 => Code,
            11 => Form,
            12 => Other,
            13 => Padding,
            _ => return None,
        })
    }

    pub fn is_textual(self) -> bool {
        !matches!(self, BlockType::Image | BlockType::Padding)
    }
}

impl From<BlockType> for u8 {
    fn from(t: BlockType) -> u8 {
        t.id()
    }
}

impl TryFrom<u8> for BlockType {
    type Error = String;
    fn try_from(id: u8) -> Result<Self, String> {
        BlockType::from_id(id).ok_or_else(|| format!("invalid block type id {id}"))
    }
}

/// Visual attributes of the text in a block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextAttributes {
    /// Normalized font size, 1.0 = largest possible.
    pub font_size_raw: f64,
    pub bold: bool,
    pub italic: bool,
    pub underline: bool,
}

impl Default for TextAttributes {
    fn default() -> Self {
        TextAttributes {
            font_size_raw: 0.3,
            bold: false,
            italic: false,
            underline: false,
        }
    }
}

/// An image carried by a block: HxWx3 pixels in [0,1], row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub height: usize,
    pub width: usize,
    /// Flattened HxWx3, values in [0,1]. The all-ones image is reserved as
    /// the mask-image token.
    pub pixels: Vec<f32>,
    pub source_id: String,
}

impl ImageRef {
    pub fn solid(height: usize, width: usize, rgb: [f32; 3], source_id: &str) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        ImageRef {
            height,
            width,
            pixels,
            source_id: source_id.to_string(),
        }
    }

    /// The mask-image token: an all-white image.
    pub fn white(height: usize, width: usize) -> Self {
        ImageRef {
            height,
            width,
            pixels: vec![1.0; height * width * 3],
            source_id: "mask-image".to_string(),
        }
    }

    pub fn is_white(&self) -> bool {
        self.pixels.iter().all(|&p| p == 1.0)
    }
}

/// Smallest parsed layout unit of a document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub bbox: BoundingBox,
    pub block_type: BlockType,
    pub text: String,
    pub attributes: TextAttributes,
    pub images: Vec<ImageRef>,
}

/// A parsed document: ordered list of blocks plus a sorted flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub blocks: Vec<Block>,
    pub sorted: bool,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, blocks: Vec<Block>) -> Self {
        Document {
            doc_id: doc_id.into(),
            blocks,
            sorted: false,
        }
    }

    pub fn image_count(&self) -> usize {
        self.blocks.iter().map(|b| b.images.len()).sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("document has no blocks")]
    EmptyDocument,
    #[error("block {index} has an invalid bounding box")]
    InvalidBBox { index: usize },
}

/// One invariant violation found by [`validate_document`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub block_index: Option<usize>,
    pub message: String,
}

/// Sort blocks lexicographically by (y_top, x_left) — the serialized zigzag
/// order — and assign segment ids 1..=N (0 is reserved for global-CLS).
/// The sort is stable: equal anchors keep their input order.
pub fn sort_and_serialize(doc: &Document) -> Result<(Document, Vec<usize>), LayoutError> {
    if doc.blocks.is_empty() {
        return Err(LayoutError::EmptyDocument);
    }
    for (i, b) in doc.blocks.iter().enumerate() {
        if !b.bbox.is_valid() {
            return Err(LayoutError::InvalidBBox { index: i });
        }
    }
    let mut sorted = doc.clone();
    sorted.blocks.sort_by(|a, b| {
        a.bbox
            .y_top
            .partial_cmp(&b.bbox.y_top)
            .unwrap()
            .then(a.bbox.x_left.partial_cmp(&b.bbox.x_left).unwrap())
    });
    sorted.sorted = true;
    let segment_ids = (1..=sorted.blocks.len()).collect();
    Ok((sorted, segment_ids))
}

/// Remove standalone image blocks and append their images to the closest
/// paragraph block (top-left corner distance; ties broken by earlier
/// serialized index). Falls back to the nearest textual block of any type
/// when the document has no paragraphs.
pub fn attach_standalone_images(doc: &Document) -> Document {
    debug_assert!(doc.sorted, "attach_standalone_images expects a sorted doc");
    let has_paragraph = doc
        .blocks
        .iter()
        .any(|b| b.block_type == BlockType::Paragraph);
    let mut out_blocks: Vec<Block> = Vec::with_capacity(doc.blocks.len());
    // (original index, images) of removed image blocks
    let mut pending: Vec<(BoundingBox, Vec<ImageRef>)> = Vec::new();
    // map from output block position back to whether it is a valid target
    let mut targets: Vec<(usize, BoundingBox)> = Vec::new();
    for block in &doc.blocks {
        if block.block_type == BlockType::Image {
            pending.push((block.bbox, block.images.clone()));
        } else {
            if (has_paragraph && block.block_type == BlockType::Paragraph)
                || (!has_paragraph && block.block_type.is_textual())
            {
                targets.push((out_blocks.len(), block.bbox));
            }
            out_blocks.push(block.clone());
        }
    }
    if pending.is_empty() {
        return doc.clone();
    }
    if targets.is_empty() {
        // Nothing to attach to: keep image blocks as-is.
        return doc.clone();
    }
    for (bbox, images) in pending {
        let (best_idx, _) = targets
            .iter()
            .map(|&(i, tb)| (i, bbox.top_left_distance(&tb)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        out_blocks[best_idx].images.extend(images);
    }
    let mut out = doc.clone();
    out.blocks = out_blocks;
    out
}

/// Check all type invariants; empty result means the document is well formed.
pub fn validate_document(doc: &Document) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (i, b) in doc.blocks.iter().enumerate() {
        if !b.bbox.is_valid() {
            violations.push(Violation {
                block_index: Some(i),
                message: format!(
                    "invalid bbox ({}, {}, {}, {})",
                    b.bbox.x_left, b.bbox.y_top, b.bbox.x_right, b.bbox.y_bottom
                ),
            });
        }
        if b.block_type == BlockType::Padding {
            violations.push(Violation {
                block_index: Some(i),
                message: "padding type emitted".to_string(),
            });
        }
        if !(0.0..=1.0).contains(&b.attributes.font_size_raw) {
            violations.push(Violation {
                block_index: Some(i),
                message: format!("font_size_raw {} out of [0,1]", b.attributes.font_size_raw),
            });
        }
        for (j, img) in b.images.iter().enumerate() {
            if img.height == 0 || img.width == 0 {
                violations.push(Violation {
                    block_index: Some(i),
                    message: format!("image {j} has zero dimension"),
                });
            } else if img.pixels.len() != img.height * img.width * 3 {
                violations.push(Violation {
                    block_index: Some(i),
                    message: format!("image {j} pixel buffer length mismatch"),
                });
            }
        }
    }
    if doc.sorted {
        for w in doc.blocks.windows(2) {
            let a = (w[0].bbox.y_top, w[0].bbox.x_left);
            let b = (w[1].bbox.y_top, w[1].bbox.x_left);
            if a > b {
                violations.push(Violation {
                    block_index: None,
                    message: "sorted flag set but blocks are out of order".to_string(),
                });
                break;
            }
        }
    }
    violations
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn simple_block(y: f64, x: f64, ty: BlockType, text: &str) -> Block {
        Block {
            bbox: BoundingBox::new(x, y, (x + 0.3).min(1.0), (y + 0.05).min(1.0)),
            block_type: ty,
            text: text.to_string(),
            attributes: TextAttributes::default(),
            images: Vec::new(),
        }
    }
}
