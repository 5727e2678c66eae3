//! Downstream tasks: text block filling and image suggestion — instance
//! construction, the gated document representation, contrastive fine-tuning
//! loss, and candidate scoring.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Var};
use crate::baselines::{AggregatorKind, Modality};
use crate::features::{assemble_input_with, FeatureError, InputSequence, Limits, Vocab};
use crate::layout::{sort_and_serialize, Block, BlockType, Document, ImageRef, LayoutError};
use crate::nnet::{extract_block_reps, lower_forward, visual_embed, Bound, ModelConfig};

pub const TEXT_FILL_K: usize = 5;
pub const TEXT_FILL_MARGIN_Y: f64 = 0.04;
pub const CONTRASTIVE_MARGIN: f64 = 1.0;
/// vertical gap under an image below which a textual block counts as caption
pub const CAPTION_GAP: f64 = 0.02;
/// minimum horizontal overlap fraction for the caption heuristic
pub const CAPTION_OVERLAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("instance skipped: {0}")]
    Skip(String),
    #[error("candidate pool too small: need {needed}, have {available}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("eval document {0} has no image")]
    NoImage(String),
    #[error("image suggestion requires the multimodal modality")]
    TextOnlyModality,
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// One text-fill instance: predict which candidate block belongs at the
/// masked position, given only the blocks before it.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFillInstance {
    pub doc_id: String,
    /// blocks strictly before the gold position, in serialized order
    pub context: Vec<Block>,
    /// gold + K distractors, shuffled
    pub candidates: Vec<Block>,
    pub gold_index: usize,
}

/// One image-suggestion instance: the document with one image whitened and
/// caption blocks stripped, plus a candidate image pool containing the gold.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSuggestInstance {
    pub doc: Document,
    /// index (in `doc.blocks`) of the block holding the whitened image
    pub block_index: usize,
    pub candidates: Vec<ImageRef>,
    pub gold_index: usize,
}

/// Positions j > i whose block is textual and sits at least `margin_y` below
/// block i — the distractor eligibility rule.
pub fn qualifying_positions(doc: &Document, i: usize, margin_y: f64) -> Vec<usize> {
    let y_i = doc.blocks[i].bbox.y_top;
    (i + 1..doc.blocks.len())
        .filter(|&j| {
            doc.blocks[j].block_type.is_textual() && doc.blocks[j].bbox.y_top >= y_i + margin_y
        })
        .collect()
}

/// Build a text-fill instance: the gold block is chosen uniformly among
/// textual blocks with a nonempty context and at least K qualifying later
/// blocks; the distractors are the K qualifying blocks with smallest y_top.
pub fn build_text_fill<R: Rng>(
    doc: &Document,
    k: usize,
    margin_y: f64,
    rng: &mut R,
) -> Result<TextFillInstance, TaskError> {
    assert!(doc.sorted, "build_text_fill expects a sorted document");
    let eligible: Vec<usize> = (1..doc.blocks.len())
        .filter(|&i| {
            doc.blocks[i].block_type.is_textual()
                && qualifying_positions(doc, i, margin_y).len() >= k
        })
        .collect();
    if eligible.is_empty() {
        return Err(TaskError::Skip(format!(
            "no textual block in {} has {k} qualifying later blocks",
            doc.doc_id
        )));
    }
    let gold_pos = eligible[rng.random_range(0..eligible.len())];
    let mut qual = qualifying_positions(doc, gold_pos, margin_y);
    // K closest by y_top, serialized order breaking ties
    qual.sort_by(|&a, &b| {
        doc.blocks[a]
            .bbox
            .y_top
            .partial_cmp(&doc.blocks[b].bbox.y_top)
            .unwrap()
            .then(a.cmp(&b))
    });
    qual.truncate(k);

    let mut candidates: Vec<Block> = vec![doc.blocks[gold_pos].clone()];
    candidates.extend(qual.iter().map(|&j| doc.blocks[j].clone()));
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    let gold_index = order.iter().position(|&o| o == 0).unwrap();
    let candidates = order.into_iter().map(|o| candidates[o].clone()).collect();

    Ok(TextFillInstance {
        doc_id: doc.doc_id.clone(),
        context: doc.blocks[..gold_pos].to_vec(),
        candidates,
        gold_index,
    })
}

/// Caption heuristic: a textual block is a caption when its type says so, or
/// when it sits directly below an image block (vertical gap < `CAPTION_GAP`)
/// with more than `CAPTION_OVERLAP` of its width overlapping the image.
pub fn is_caption_block(doc: &Document, index: usize) -> bool {
    let blk = &doc.blocks[index];
    if !blk.block_type.is_textual() {
        return false;
    }
    if blk.block_type == BlockType::Caption {
        return true;
    }
    let width = (blk.bbox.x_right - blk.bbox.x_left).max(f64::EPSILON);
    doc.blocks.iter().enumerate().any(|(j, img)| {
        if j == index || img.images.is_empty() {
            return false;
        }
        let gap = blk.bbox.y_top - img.bbox.y_bottom;
        if !(0.0..CAPTION_GAP).contains(&gap) {
            return false;
        }
        let overlap =
            img.bbox.x_right.min(blk.bbox.x_right) - img.bbox.x_left.max(blk.bbox.x_left);
        overlap / width > CAPTION_OVERLAP
    })
}

/// Remove caption blocks (per [`is_caption_block`]) from a document.
pub fn strip_captions(doc: &Document) -> Document {
    let blocks = doc
        .blocks
        .iter()
        .enumerate()
        .filter(|&(i, _)| !is_caption_block(doc, i))
        .map(|(_, b)| b.clone())
        .collect();
    Document { doc_id: doc.doc_id.clone(), blocks, sorted: doc.sorted }
}

/// Build one image-suggestion instance per eval doc: strip captions, whiten
/// one image (chosen uniformly), and draw C−1 distractor images without
/// replacement (by source_id) from the pool documents.
pub fn build_image_suggestion<R: Rng>(
    eval_docs: &[Document],
    pool_docs: &[Document],
    c: usize,
    rng: &mut R,
) -> Result<Vec<ImageSuggestInstance>, TaskError> {
    assert!(c >= 2, "need at least one distractor");
    let mut pool: Vec<ImageRef> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for doc in pool_docs {
        for blk in &doc.blocks {
            for img in &blk.images {
                if seen.insert(img.source_id.clone()) {
                    pool.push(img.clone());
                }
            }
        }
    }

    let mut out = Vec::with_capacity(eval_docs.len());
    for doc in eval_docs {
        if doc.image_count() == 0 {
            return Err(TaskError::NoImage(doc.doc_id.clone()));
        }
        let mut stripped = strip_captions(doc);
        let slots: Vec<(usize, usize)> = stripped
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(bi, b)| (0..b.images.len()).map(move |ii| (bi, ii)))
            .collect();
        let (block_index, image_index) = slots[rng.random_range(0..slots.len())];
        let gold = stripped.blocks[block_index].images[image_index].clone();
        stripped.blocks[block_index].images[image_index] =
            ImageRef::white(gold.height, gold.width);

        let mut distractors: Vec<&ImageRef> =
            pool.iter().filter(|p| p.source_id != gold.source_id).collect();
        if distractors.len() < c - 1 {
            return Err(TaskError::PoolTooSmall { needed: c - 1, available: distractors.len() });
        }
        distractors.shuffle(rng);
        let mut candidates: Vec<ImageRef> =
            distractors[..c - 1].iter().map(|&p| p.clone()).collect();
        let gold_index = rng.random_range(0..c);
        candidates.insert(gold_index, gold);
        out.push(ImageSuggestInstance {
            doc: stripped,
            block_index,
            candidates,
            gold_index,
        });
    }
    Ok(out)
}

/// R_doc = σ(α)·blkh_global + (1−σ(α))·out_global (both 1xd; α 1x1).
pub fn doc_representation<F: Scalar>(
    tape: &Tape<F>,
    blkh_global: Var,
    out_global: Var,
    alpha: Var,
) -> Var {
    let g = tape.sigmoid(alpha);
    let one = tape.scalar(F::one());
    let gm = tape.sub(one, g);
    tape.add(tape.matmul(g, blkh_global), tape.matmul(gm, out_global))
}

/// Assemble and encode a context document down to its gated R_doc.
pub fn doc_rep_forward<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    agg: AggregatorKind,
    seq: &InputSequence,
) -> Var {
    let lower_out = lower_forward(tape, seq, b, cfg);
    let blkh = extract_block_reps(tape, lower_out, &seq.cls_positions);
    let out = crate::baselines::aggregate(tape, b, cfg, agg, seq, blkh);
    let blkh_global = tape.gather_rows(blkh, &[0]);
    doc_representation(tape, blkh_global, out.out_global, b.get("task.alpha"))
}

/// Assemble a context block list into an input sequence.
pub fn context_sequence(
    doc_id: &str,
    context: &[Block],
    vocab: &Vocab,
    limits: &Limits,
    modality: Modality,
) -> Result<InputSequence, TaskError> {
    let doc = Document::new(doc_id, context.to_vec());
    let (sorted, ids) = sort_and_serialize(&doc)?;
    Ok(assemble_input_with(&sorted, &ids, vocab, limits, modality.include_images())?)
}

/// Candidate embedding for a text block: its blkh from a single-block pass
/// through the lower encoder.
pub fn block_embedding<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    block: &Block,
    vocab: &Vocab,
    limits: &Limits,
    modality: Modality,
) -> Result<Var, TaskError> {
    let doc = Document::new("candidate", vec![block.clone()]);
    let (sorted, ids) = sort_and_serialize(&doc)?;
    let seq = assemble_input_with(&sorted, &ids, vocab, limits, modality.include_images())?;
    let lower_out = lower_forward(tape, &seq, b, cfg);
    let blkh = extract_block_reps(tape, lower_out, &seq.cls_positions);
    Ok(tape.gather_rows(blkh, &[1]))
}

/// Candidate embedding for an image: its visual embedding.
pub fn image_embedding<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    img: &ImageRef,
) -> Var {
    visual_embed(tape, b, img, cfg)
}

fn project<F: Scalar>(tape: &Tape<F>, b: &Bound, x: Var) -> Var {
    tape.add_row_broadcast(tape.matmul(x, b.get("task.proj.w")), b.get("task.proj.b"))
}

/// Contrastive loss over one instance (Hadsell semantics): the gold pair
/// contributes ½D², every other candidate ½·max(0, m−D)²; the loss is the
/// mean over candidates. `eq3_as_printed` swaps the two roles, reproducing
/// the equation literally. Returns the loss and the distances D_i.
pub fn contrastive_step<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    r_doc: Var,
    r_cands: &[Var],
    gold_index: usize,
    margin: f64,
    eq3_as_printed: bool,
) -> (Var, Vec<f64>) {
    assert!(!r_cands.is_empty());
    assert!(gold_index < r_cands.len());
    assert!(margin > 0.0);
    let p = project(tape, b, r_doc);
    let mut terms = Vec::with_capacity(r_cands.len());
    let mut distances = Vec::with_capacity(r_cands.len());
    for (i, &cand) in r_cands.iter().enumerate() {
        let q = project(tape, b, cand);
        let diff = tape.sub(p, q);
        let d2 = tape.sum_all(tape.mul(diff, diff));
        let d = tape.sqrt_eps(d2, F::from_f64(1e-12));
        distances.push(tape.scalar_value(d).to_f64());
        let attract = i == gold_index;
        let attract = if eq3_as_printed { !attract } else { attract };
        let term = if attract {
            tape.scale(d2, F::from_f64(0.5))
        } else {
            let hinge = tape.relu(tape.sub(tape.scalar(F::from_f64(margin)), d));
            tape.scale(tape.mul(hinge, hinge), F::from_f64(0.5))
        };
        terms.push(term);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    loss = tape.scale(loss, F::from_f64(1.0 / r_cands.len() as f64));
    (loss, distances)
}

/// Candidate indices ranked by ascending distance, ties broken by index.
pub fn score_candidates(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap().then(a.cmp(&b)));
    order
}

/// 1-based rank of the gold candidate under [`score_candidates`].
pub fn gold_rank(distances: &[f64], gold_index: usize) -> usize {
    score_candidates(distances).iter().position(|&i| i == gold_index).unwrap() + 1
}
