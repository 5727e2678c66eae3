//! Seeded synthetic corpus generator. Stands in for a large scraped corpus:
//! deterministic in the seed, with valid geometry, mixed block types,
//! occasional two-column rows (so X-ordering at equal y_top is exercised),
//! distinguishable images, and planted captions under image blocks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{Block, BlockType, BoundingBox, Document, ImageRef, TextAttributes};

/// Parameters of a synthetic corpus; generation is a pure function of this.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_docs: usize,
    /// inclusive [min, max] blocks per document
    pub blocks_per_doc: (usize, usize),
    /// inclusive [min, max] standalone images per document
    pub images_per_doc: (usize, usize),
    pub vocab_sample: Vec<String>,
    /// probability a row is split into two columns
    #[serde(default = "default_two_column_prob")]
    pub two_column_prob: f64,
    /// probability an image block gets a caption block planted directly below
    #[serde(default = "default_caption_prob")]
    pub caption_prob: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_two_column_prob() -> f64 {
    0.3
}
fn default_caption_prob() -> f64 {
    0.5
}
fn default_image_size() -> usize {
    8
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_docs == 0 {
            return Err("n_docs must be >= 1".to_string());
        }
        if self.blocks_per_doc.0 > self.blocks_per_doc.1 || self.blocks_per_doc.0 == 0 {
            return Err("blocks_per_doc range is empty".to_string());
        }
        if self.images_per_doc.0 > self.images_per_doc.1 {
            return Err("images_per_doc range is empty".to_string());
        }
        if self.vocab_sample.is_empty() {
            return Err("vocab_sample must be nonempty".to_string());
        }
        Ok(())
    }

    pub fn default_vocab() -> Vec<String> {
        // small word pool with shared prefixes so wordpiece splitting occurs
        [
            "layout", "document", "block", "image", "table", "header", "text", "content",
            "structure", "model", "train", "page", "section", "figure", "title", "data",
            "learning", "deep", "wide", "over", "under", "format", "style", "caption",
            "list", "item", "row", "column", "grid", "order", "reading", "token", "word",
            "piece", "view", "graph", "chart", "note", "body", "footer",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }
}

/// Text is a cyclic run through the vocabulary (each word is the successor of
/// the previous), not an i.i.d. bag: like natural language, a masked word is
/// predictable from its neighbors, which is what gives MLM-style objectives a
/// learnable signal on this corpus.
fn sample_text(rng: &mut ChaCha8Rng, vocab: &[String], min_w: usize, max_w: usize) -> String {
    let n = rng.random_range(min_w..=max_w);
    let start = rng.random_range(0..vocab.len());
    (0..n)
        .map(|t| vocab[(start + t) % vocab.len()].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic base color for a subject word index; images sharing a
/// subject share a color, tying image content to the surrounding text.
fn subject_color(subject: usize) -> [f32; 3] {
    let h = (subject as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15);
    let chan = |k: u32| 0.15 + 0.7 * (((h >> k) & 0xff) as f32 / 255.0);
    [chan(0), chan(16), chan(32)]
}

/// A seeded image: subject-derived solid base color plus an index pattern in
/// the first row so every image in the corpus is distinguishable by a small
/// featurizer.
fn make_image(size: usize, subject: usize, index: usize, doc_id: &str) -> ImageRef {
    let rgb = subject_color(subject);
    let mut img = ImageRef::solid(size, size, rgb, &format!("{doc_id}#img{index}"));
    // binary index pattern across the first row's pixels
    for bit in 0..size.min(16) {
        let on = (index >> bit) & 1 == 1;
        let px = bit * 3;
        img.pixels[px] = if on { 1.0 } else { 0.0 };
    }
    img
}

fn textual_type(rng: &mut ChaCha8Rng) -> BlockType {
    match rng.random_range(0..10u32) {
        0 => BlockType::Header,
        1 => BlockType::List,
        2 => BlockType::Table,
        _ => BlockType::Paragraph,
    }
}

/// Generate a deterministic corpus. Same spec (including seed) always yields
/// byte-identical documents.
pub fn generate_synthetic(spec: &CorpusSpec) -> Vec<Document> {
    spec.validate().expect("invalid corpus spec");
    let mut docs = Vec::with_capacity(spec.n_docs);
    let mut image_counter = 0usize;
    for doc_idx in 0..spec.n_docs {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (doc_idx as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let doc_id = format!("synth-{:06}-{doc_idx}", spec.seed % 1_000_000);
        let n_blocks = rng.random_range(spec.blocks_per_doc.0..=spec.blocks_per_doc.1);
        let n_images = rng
            .random_range(spec.images_per_doc.0..=spec.images_per_doc.1)
            .min(n_blocks / 2);

        // plan block kinds: image blocks (optionally followed by captions),
        // rest textual
        #[derive(Clone, Copy, PartialEq)]
        enum Kind {
            Text,
            Image,
            CaptionFor,
        }
        let mut kinds = Vec::with_capacity(n_blocks);
        let mut remaining = n_blocks;
        let mut images_placed = 0;
        while remaining > 0 {
            if images_placed < n_images && remaining >= 2 && rng.random_bool(0.35) {
                kinds.push(Kind::Image);
                images_placed += 1;
                remaining -= 1;
                if remaining > 0 && rng.random_bool(spec.caption_prob) {
                    kinds.push(Kind::CaptionFor);
                    remaining -= 1;
                }
            } else {
                kinds.push(Kind::Text);
                remaining -= 1;
            }
        }

        // lay rows top-down; a row holds one or two blocks
        struct Slot {
            kind: Kind,
            x: (f64, f64),
            row: usize,
        }
        let mut slots: Vec<Slot> = Vec::new();
        let mut row = 0usize;
        let mut k = 0usize;
        while k < kinds.len() {
            // captions always sit alone directly under their image row
            let force_single = kinds[k] == Kind::Image || kinds[k] == Kind::CaptionFor;
            let two_cols = !force_single
                && k + 1 < kinds.len()
                && kinds[k + 1] == Kind::Text
                && rng.random_bool(spec.two_column_prob);
            if two_cols {
                slots.push(Slot {
                    kind: kinds[k],
                    x: (0.05, 0.45),
                    row,
                });
                slots.push(Slot {
                    kind: kinds[k + 1],
                    x: (0.55, 0.95),
                    row,
                });
                k += 2;
            } else {
                slots.push(Slot {
                    kind: kinds[k],
                    x: (0.05, 0.95),
                    row,
                });
                k += 1;
            }
            row += 1;
        }
        let n_rows = row.max(1);
        let row_h = 1.0 / n_rows as f64;

        let vocab = &spec.vocab_sample;
        let mut blocks = Vec::with_capacity(slots.len());
        // image-block index -> subject word index, for planting into text
        let mut subjects: Vec<(usize, usize)> = Vec::new();
        let mut last_subject = 0usize;
        for slot in &slots {
            let y_top = slot.row as f64 * row_h;
            // captions hug the bottom of the image row above: vertical gap
            // 0.005 and full horizontal overlap with the image block
            let (y_top, y_bottom) = if slot.kind == Kind::CaptionFor {
                let image_bottom = ((slot.row - 1) as f64 * row_h + row_h * 0.9).min(1.0);
                (
                    (image_bottom + 0.005).min(1.0),
                    (slot.row as f64 * row_h + row_h * 0.6).min(1.0).max(image_bottom + 0.005),
                )
            } else {
                (y_top, (y_top + row_h * 0.9).min(1.0))
            };
            let y_bottom = y_bottom.min(1.0);
            // every textual block opens with its row's ordinal word, so
            // reading order is recoverable from content (the block-ordering
            // objective needs an order signal, as in natural documents)
            let ordinal = vocab[slot.row % vocab.len()].as_str();
            let block = match slot.kind {
                Kind::Image => {
                    let subject = rng.random_range(0..vocab.len());
                    last_subject = subject;
                    subjects.push((blocks.len(), subject));
                    let img = make_image(spec.image_size, subject, image_counter, &doc_id);
                    image_counter += 1;
                    Block {
                        bbox: BoundingBox::new(slot.x.0, y_top, slot.x.1, y_bottom),
                        block_type: BlockType::Image,
                        text: String::new(),
                        attributes: TextAttributes::default(),
                        images: vec![img],
                    }
                }
                Kind::CaptionFor => Block {
                    bbox: BoundingBox::new(slot.x.0, y_top, slot.x.1, y_bottom),
                    block_type: BlockType::Caption,
                    // the caption names its image's subject word
                    text: format!(
                        "{} {}",
                        vocab[last_subject],
                        sample_text(&mut rng, vocab, 1, 3)
                    ),
                    attributes: TextAttributes {
                        font_size_raw: 0.2,
                        italic: true,
                        ..TextAttributes::default()
                    },
                    images: Vec::new(),
                },
                Kind::Text => {
                    let ty = textual_type(&mut rng);
                    let font = if ty == BlockType::Header {
                        1.0 - 0.1 * rng.random_range(0..6) as f64
                    } else {
                        0.3
                    };
                    Block {
                        bbox: BoundingBox::new(slot.x.0, y_top, slot.x.1, y_bottom),
                        block_type: ty,
                        text: format!("{ordinal} {}", sample_text(&mut rng, vocab, 3, 12)),
                        attributes: TextAttributes {
                            font_size_raw: font,
                            bold: rng.random_bool(0.15),
                            italic: rng.random_bool(0.1),
                            underline: rng.random_bool(0.05),
                        },
                        images: Vec::new(),
                    }
                }
            };
            blocks.push(block);
        }
        // plant each image's subject word into the nearest non-caption
        // textual block too, so the signal survives caption stripping
        for &(img_idx, subject) in &subjects {
            let target = (0..blocks.len()).filter(|&j| {
                blocks[j].block_type != BlockType::Image
                    && blocks[j].block_type != BlockType::Caption
            })
            .min_by_key(|&j| (j.abs_diff(img_idx), j));
            if let Some(j) = target {
                blocks[j].text.push(' ');
                blocks[j].text.push_str(&vocab[subject]);
            }
        }
        docs.push(Document::new(doc_id, blocks));
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::validate_document;

    fn desk_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            seed,
            n_docs: 20,
            blocks_per_doc: (4, 10),
            images_per_doc: (0, 2),
            vocab_sample: CorpusSpec::default_vocab(),
            two_column_prob: 0.3,
            caption_prob: 0.5,
            image_size: 8,
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = generate_synthetic(&desk_spec(9));
        let b = generate_synthetic(&desk_spec(9));
        assert_eq!(a, b);
        let c = generate_synthetic(&desk_spec(10));
        assert_ne!(a, c);
    }

    #[test]
    fn zero_image_range_yields_no_images() {
        let mut spec = desk_spec(3);
        spec.images_per_doc = (0, 0);
        for doc in generate_synthetic(&spec) {
            assert_eq!(doc.image_count(), 0);
        }
    }

    #[test]
    fn block_counts_within_range_exhaustive() {
        let mut spec = desk_spec(11);
        spec.n_docs = 100;
        spec.blocks_per_doc = (5, 20);
        for doc in generate_synthetic(&spec) {
            assert!((5..=20).contains(&doc.blocks.len()), "{}", doc.blocks.len());
        }
    }

    #[test]
    fn every_document_validates() {
        for doc in generate_synthetic(&desk_spec(5)) {
            assert!(validate_document(&doc).is_empty());
            assert!(!doc.blocks.is_empty());
        }
    }

    #[test]
    fn images_are_distinguishable() {
        let mut spec = desk_spec(13);
        spec.images_per_doc = (1, 3);
        let docs = generate_synthetic(&spec);
        let mut seen = Vec::new();
        for doc in &docs {
            for b in &doc.blocks {
                for img in &b.images {
                    assert!(!seen.contains(&img.pixels), "duplicate image pixels");
                    seen.push(img.pixels.clone());
                }
            }
        }
        assert!(seen.len() > 3);
    }
}
