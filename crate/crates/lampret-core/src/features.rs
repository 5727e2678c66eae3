//! Tokenization, attribute discretization, and assembly of the flat
//! per-token input arrays, plus the element-wise summed input embedding
//! (word + block-segment + type + modality + attributes + positional).

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Var};
use crate::layout::{BlockType, Document, ImageRef};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;

pub const MAX_VOCAB: usize = 30522;

/// WordPiece vocabulary. Specials occupy fixed ids 0-3; ids are dense.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("vocab has {0} tokens, max is {MAX_VOCAB}")]
    TooLarge(usize),
    #[error("line {0} must be the special token {1}")]
    BadSpecial(usize, &'static str),
}

pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

impl Vocab {
    /// Build from token lines; id = line index, specials must be lines 0-3.
    pub fn from_lines<I: IntoIterator<Item = String>>(lines: I) -> Result<Vocab, VocabError> {
        let tokens: Vec<String> = lines.into_iter().collect();
        if tokens.len() > MAX_VOCAB {
            return Err(VocabError::TooLarge(tokens.len()));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(VocabError::BadSpecial(i, want));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Vocab, Box<dyn std::error::Error>> {
        let content = std::fs::read_to_string(path)?;
        Ok(Vocab::from_lines(content.lines().map(str::to_string))?)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Derive a vocabulary from a word pool: whole words plus `##` suffix
    /// pieces, capped at `max_size`.
    pub fn build_from_words<'a, I: IntoIterator<Item = &'a str>>(
        words: I,
        max_size: usize,
    ) -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let push = |t: String, tokens: &mut Vec<String>, seen: &mut std::collections::HashSet<String>| {
            if tokens.len() < max_size && seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        let words: Vec<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        for w in &words {
            push(w.clone(), &mut tokens, &mut seen);
        }
        // prefix halves and their continuations, so splitting happens
        for w in &words {
            if w.len() >= 4 {
                let mid = w.len() / 2;
                if w.is_char_boundary(mid) {
                    push(w[..mid].to_string(), &mut tokens, &mut seen);
                    push(format!("##{}", &w[mid..]), &mut tokens, &mut seen);
                }
            }
        }
        // single characters as a fallback
        for c in "abcdefghijklmnopqrstuvwxyz0123456789".chars() {
            push(c.to_string(), &mut tokens, &mut seen);
            push(format!("##{c}"), &mut tokens, &mut seen);
        }
        Vocab::from_lines(tokens).expect("constructed vocab is well formed")
    }
}

/// Greedy longest-match-first WordPiece. Continuation pieces carry the `##`
/// prefix; a word with any unmatchable fragment becomes a single UNK.
pub fn tokenize_wordpiece(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut ok = true;
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                if !word.is_char_boundary(end) {
                    end -= 1;
                    continue;
                }
                let candidate = if start == 0 {
                    word[start..end].to_string()
                } else {
                    format!("##{}", &word[start..end])
                };
                if let Some(id) = vocab.id(&candidate) {
                    found = Some((id, end));
                    break;
                }
                end -= 1;
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            out.extend(pieces);
        } else {
            out.push(UNK_ID);
        }
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("font size {0} out of [0,1]")]
    OutOfRange(f64),
    #[error("nothing but global-CLS remains after truncation")]
    EmptyAfterTruncation,
}

/// Round a normalized font size into the integer id range [0,10], half away
/// from zero.
pub fn discretize_font_size(f: f64) -> Result<u8, FeatureError> {
    if !(0.0..=1.0).contains(&f) {
        return Err(FeatureError::OutOfRange(f));
    }
    Ok((f * 10.0).round() as u8)
}

/// Truncation limits for input assembly.
#[derive(Clone, Copy, Debug)]
pub struct Limits {
    pub max_tokens: usize,
    pub max_per_block: usize,
    pub max_blocks: usize,
    pub max_images_per_block: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_tokens: 512,
            max_per_block: 50,
            max_blocks: 50,
            max_images_per_block: 3,
        }
    }
}

impl Limits {
    /// Block-segment id used to hide a block's position (block-ordering
    /// objective); one past the largest real segment id.
    pub fn padding_segment(&self) -> usize {
        self.max_blocks + 1
    }
}

pub const TEXT_MODALITY: u8 = 0;
pub const IMAGE_MODALITY: u8 = 1;

/// Flat per-token arrays for one document, plus image slots and masks.
/// Position 0 is always the global CLS; each block is laid out as
/// `[CLS_i, tokens.., image slots..]` with one shared segment id.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    pub doc_id: String,
    pub token_id: Vec<u32>,
    pub block_segment_id: Vec<usize>,
    pub type_id: Vec<u8>,
    pub font_size_id: Vec<u8>,
    pub bold: Vec<u8>,
    pub italic: Vec<u8>,
    pub underline: Vec<u8>,
    pub modality: Vec<u8>,
    pub positional_id: Vec<usize>,
    pub is_image: Vec<bool>,
    /// index into `images`, or -1 for non-image positions
    pub image_slot_index: Vec<isize>,
    pub attention_valid: Vec<bool>,
    /// global CLS position followed by each block's CLS position
    pub cls_positions: Vec<usize>,
    pub images: Vec<ImageRef>,
    /// per included block: textual flag (parallel to cls_positions[1..])
    pub block_textual: Vec<bool>,
    /// per included block: (start, end) span in the flat arrays, CLS included
    pub block_spans: Vec<(usize, usize)>,
    /// per included block: y_top of its bounding box (grid aggregation)
    pub block_y_top: Vec<f64>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.token_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_id.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        self.cls_positions.len() - 1
    }

    pub fn has_images(&self) -> bool {
        !self.images.is_empty()
    }

    /// Positions holding maskable text tokens (CLS, image slots excluded).
    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&t| {
                !self.is_image[t] && !self.cls_positions.contains(&t) && self.attention_valid[t]
            })
            .collect()
    }

    /// Append `n` zero-image padding slots with `attention_valid = false`;
    /// used when batching documents with differing image counts.
    pub fn pad_image_slots(&mut self, n: usize, image_size: usize) {
        let seg = *self.block_segment_id.last().unwrap_or(&0);
        for _ in 0..n {
            let slot = self.images.len() as isize;
            self.images.push(ImageRef {
                height: image_size,
                width: image_size,
                pixels: vec![0.0; image_size * image_size * 3],
                source_id: "pad-image".to_string(),
            });
            self.token_id.push(PAD_ID);
            self.block_segment_id.push(seg);
            self.type_id.push(BlockType::Padding.id());
            self.font_size_id.push(0);
            self.bold.push(0);
            self.italic.push(0);
            self.underline.push(0);
            self.modality.push(IMAGE_MODALITY);
            self.positional_id.push(self.positional_id.len());
            self.is_image.push(true);
            self.image_slot_index.push(slot);
            self.attention_valid.push(false);
        }
    }

    pub fn check_invariants(&self, limits: &Limits) -> Result<(), String> {
        let l = self.len();
        if l == 0 || l > limits.max_tokens {
            return Err(format!("bad length {l}"));
        }
        if self.cls_positions.first() != Some(&0) || self.block_segment_id[0] != 0 {
            return Err("position 0 must be the global CLS with segment 0".into());
        }
        for (i, &p) in self.positional_id.iter().enumerate() {
            if p != i {
                return Err(format!("positional id {p} at {i} not consecutive"));
            }
        }
        for (b, &(s, e)) in self.block_spans.iter().enumerate() {
            let seg = self.block_segment_id[s];
            for t in s..e {
                if self.block_segment_id[t] != seg {
                    return Err(format!("block {b} has mixed segment ids"));
                }
            }
            if self.cls_positions[b + 1] != s {
                return Err(format!("block {b} CLS not at span start"));
            }
        }
        for t in 0..l {
            let is_pad_slot = self.is_image[t]
                && self.images[self.image_slot_index[t] as usize].pixels.iter().all(|&p| p == 0.0);
            let is_pad_token = !self.is_image[t] && self.token_id[t] == PAD_ID && t != 0;
            if self.attention_valid[t] == (is_pad_slot || is_pad_token) {
                return Err(format!("attention_valid wrong at {t}"));
            }
        }
        Ok(())
    }
}

/// Assemble the flat input arrays for a sorted document.
///
/// Truncation: per-block text to `max_per_block` tokens, blocks beyond
/// `max_blocks` dropped, then trailing whole blocks dropped until the total
/// fits `max_tokens` (a CLS is never split from its block).
pub fn assemble_input(
    doc: &Document,
    segment_ids: &[usize],
    vocab: &Vocab,
    limits: &Limits,
) -> Result<InputSequence, FeatureError> {
    assemble_input_with(doc, segment_ids, vocab, limits, true)
}

/// [`assemble_input`] with a modality switch: `include_images = false`
/// (text-only ablation) creates no image slots at all.
pub fn assemble_input_with(
    doc: &Document,
    segment_ids: &[usize],
    vocab: &Vocab,
    limits: &Limits,
    include_images: bool,
) -> Result<InputSequence, FeatureError> {
    debug_assert!(doc.sorted, "assemble_input expects a sorted document");
    assert_eq!(doc.blocks.len(), segment_ids.len());

    struct BlockPlan {
        seg: usize,
        type_id: u8,
        font: u8,
        bold: u8,
        italic: u8,
        underline: u8,
        tokens: Vec<u32>,
        images: Vec<ImageRef>,
        textual: bool,
        y_top: f64,
    }

    let mut plans = Vec::new();
    for (block, &seg) in doc.blocks.iter().zip(segment_ids).take(limits.max_blocks) {
        let mut tokens = tokenize_wordpiece(&block.text, vocab);
        tokens.truncate(limits.max_per_block);
        let images: Vec<ImageRef> = if include_images {
            block
                .images
                .iter()
                .take(limits.max_images_per_block)
                .cloned()
                .collect()
        } else {
            Vec::new()
        };
        plans.push(BlockPlan {
            seg,
            type_id: block.block_type.id(),
            font: discretize_font_size(block.attributes.font_size_raw)?,
            bold: block.attributes.bold as u8,
            italic: block.attributes.italic as u8,
            underline: block.attributes.underline as u8,
            tokens,
            images,
            textual: block.block_type.is_textual(),
            y_top: block.bbox.y_top,
        });
    }

    // drop trailing blocks whole until the total fits
    let mut total = 1; // global CLS
    let mut kept = 0;
    for plan in &plans {
        let need = 1 + plan.tokens.len() + plan.images.len();
        if total + need > limits.max_tokens {
            break;
        }
        total += need;
        kept += 1;
    }
    plans.truncate(kept);
    if plans.is_empty() {
        return Err(FeatureError::EmptyAfterTruncation);
    }

    let mut seq = InputSequence {
        doc_id: doc.doc_id.clone(),
        token_id: vec![CLS_ID],
        block_segment_id: vec![0],
        type_id: vec![BlockType::Padding.id()],
        font_size_id: vec![0],
        bold: vec![0],
        italic: vec![0],
        underline: vec![0],
        modality: vec![TEXT_MODALITY],
        positional_id: vec![0],
        is_image: vec![false],
        image_slot_index: vec![-1],
        attention_valid: vec![true],
        cls_positions: vec![0],
        images: Vec::new(),
        block_textual: Vec::new(),
        block_spans: Vec::new(),
        block_y_top: Vec::new(),
    };

    for plan in plans {
        let start = seq.len();
        seq.cls_positions.push(start);
        seq.block_textual.push(plan.textual);
        seq.block_y_top.push(plan.y_top);
        let push = |seq: &mut InputSequence, token: u32, modality: u8, slot: isize| {
            seq.token_id.push(token);
            seq.block_segment_id.push(plan.seg);
            seq.type_id.push(plan.type_id);
            seq.font_size_id.push(plan.font);
            seq.bold.push(plan.bold);
            seq.italic.push(plan.italic);
            seq.underline.push(plan.underline);
            seq.modality.push(modality);
            seq.positional_id.push(seq.positional_id.len());
            seq.is_image.push(modality == IMAGE_MODALITY);
            seq.image_slot_index.push(slot);
            seq.attention_valid.push(true);
        };
        push(&mut seq, CLS_ID, TEXT_MODALITY, -1);
        for &tok in &plan.tokens {
            push(&mut seq, tok, TEXT_MODALITY, -1);
        }
        for img in plan.images {
            let slot = seq.images.len() as isize;
            seq.images.push(img);
            push(&mut seq, PAD_ID, IMAGE_MODALITY, slot);
        }
        seq.block_spans.push((start, seq.len()));
    }
    Ok(seq)
}

/// Tape nodes for the embedding tables used by [`embed_input`].
#[derive(Clone, Copy)]
pub struct EmbeddingVars {
    pub word: Var,
    pub segment: Var,
    pub type_: Var,
    pub modality: Var,
    pub font: Var,
    pub bold: Var,
    pub italic: Var,
    pub underline: Var,
    pub positional: Var,
}

/// Element-wise summed input embedding: word (or visual, at image slots) +
/// block-segment + type + modality + attributes + positional. `visual` maps
/// an image to a 1xd tape node.
pub fn embed_input<F: Scalar>(
    tape: &Tape<F>,
    seq: &InputSequence,
    tables: &EmbeddingVars,
    mut visual: impl FnMut(&Tape<F>, &ImageRef) -> Var,
) -> Var {
    let ids = |v: &Vec<u8>| -> Vec<usize> { v.iter().map(|&x| x as usize).collect() };
    let token_idx: Vec<usize> = seq.token_id.iter().map(|&t| t as usize).collect();
    let mut base = tape.gather_rows(tables.word, &token_idx);
    // image slots: the word term is replaced by the visual embedding
    let image_positions: Vec<usize> = (0..seq.len()).filter(|&t| seq.is_image[t]).collect();
    if !image_positions.is_empty() {
        let embeds: Vec<Var> = image_positions
            .iter()
            .map(|&t| visual(tape, &seq.images[seq.image_slot_index[t] as usize]))
            .collect();
        let stacked = tape.concat_rows(&embeds);
        base = tape.replace_rows(base, &image_positions, stacked);
    }
    let mut sum = base;
    for (table, idx) in [
        (tables.segment, seq.block_segment_id.clone()),
        (tables.type_, ids(&seq.type_id)),
        (tables.modality, ids(&seq.modality)),
        (tables.font, ids(&seq.font_size_id)),
        (tables.bold, ids(&seq.bold)),
        (tables.italic, ids(&seq.italic)),
        (tables.underline, ids(&seq.underline)),
        (tables.positional, seq.positional_id.clone()),
    ] {
        let g = tape.gather_rows(table, &idx);
        sum = tape.add(sum, g);
    }
    sum
}
