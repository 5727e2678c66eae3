//! The five pretraining objectives: corruption samplers with reversible
//! records, and the shared forward pass producing all five cross-entropy
//! losses plus their linear combination.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Var};
use crate::features::{InputSequence, MASK_ID};
use crate::layout::ImageRef;
use crate::baselines::AggregatorKind;
use crate::nnet::{extract_block_reps, lower_forward, visual_embed, Bound, ModelConfig};

pub const STREAM_MLM: u64 = 1;
pub const STREAM_ITM: u64 = 2;
pub const STREAM_BORD: u64 = 3;
pub const STREAM_BMLM: u64 = 4;
pub const STREAM_IMGFIT: u64 = 5;

/// Stateless per-objective stream: the rng for (seed, step, stream) never
/// depends on how many draws other streams made.
pub fn stream_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut x = seed
        .wrapping_add(step.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("non-finite loss")]
    NonFiniteLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmRecord {
    pub positions: Vec<usize>,
    pub original: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ItmOutcome {
    /// document has no images → excluded from the ITM loss
    NoImages,
    /// label 1 (match)
    Kept,
    /// label 0 (mismatch); stores the document's original image list
    Swapped { original: Vec<ImageRef> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BordRecord {
    /// chosen block indices in the original serialized order, i < j
    pub pair: (usize, usize),
    pub swapped: bool,
    pub original_segments: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BmlmAssignment {
    /// masked block index (current sequence order)
    pub block: usize,
    /// candidate block references (doc index, block index), shuffled
    pub candidates: Vec<(usize, usize)>,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImgfitAssignment {
    /// whitened image slot (index into the sequence's image list)
    pub slot: usize,
    /// block owning the whitened slot (current sequence order)
    pub block: usize,
    /// the image that was in the slot before whitening
    pub original: ImageRef,
    /// candidate images, shuffled; contains the original at `gold`
    pub candidates: Vec<ImageRef>,
    pub gold: usize,
}

/// Everything needed to compute the five losses and to undo the corruption
/// bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCorruption {
    pub mlm: Vec<MlmRecord>,
    pub itm: Vec<ItmOutcome>,
    pub bord: Vec<Option<BordRecord>>,
    pub bmlm: Vec<Option<BmlmAssignment>>,
    pub imgfit: Vec<Option<ImgfitAssignment>>,
}

/// Rebuild a sequence with its blocks in `perm` order (perm[k] = original
/// block index placed at position k). Image list and slot indices are
/// unchanged; positional ids are renumbered.
fn reorder_blocks(seq: &InputSequence, perm: &[usize]) -> InputSequence {
    assert_eq!(perm.len(), seq.n_blocks());
    let mut out = seq.clone();
    fn keep<T>(v: &mut Vec<T>) {
        v.truncate(1);
    }
    keep(&mut out.token_id);
    keep(&mut out.block_segment_id);
    keep(&mut out.type_id);
    keep(&mut out.font_size_id);
    keep(&mut out.bold);
    keep(&mut out.italic);
    keep(&mut out.underline);
    keep(&mut out.modality);
    keep(&mut out.positional_id);
    keep(&mut out.is_image);
    keep(&mut out.image_slot_index);
    keep(&mut out.attention_valid);
    out.cls_positions.truncate(1);
    out.block_textual.clear();
    out.block_spans.clear();
    out.block_y_top.clear();
    for &ob in perm {
        let (s, e) = seq.block_spans[ob];
        let start = out.token_id.len();
        out.cls_positions.push(start);
        out.block_textual.push(seq.block_textual[ob]);
        out.block_y_top.push(seq.block_y_top[ob]);
        for t in s..e {
            out.token_id.push(seq.token_id[t]);
            out.block_segment_id.push(seq.block_segment_id[t]);
            out.type_id.push(seq.type_id[t]);
            out.font_size_id.push(seq.font_size_id[t]);
            out.bold.push(seq.bold[t]);
            out.italic.push(seq.italic[t]);
            out.underline.push(seq.underline[t]);
            out.modality.push(seq.modality[t]);
            out.positional_id.push(out.positional_id.len());
            out.is_image.push(seq.is_image[t]);
            out.image_slot_index.push(seq.image_slot_index[t]);
            out.attention_valid.push(seq.attention_valid[t]);
        }
        out.block_spans.push((start, out.token_id.len()));
    }
    out
}

fn set_block_segment(seq: &mut InputSequence, block: usize, seg: usize) {
    let (s, e) = seq.block_spans[block];
    for t in s..e {
        seq.block_segment_id[t] = seg;
    }
}

/// MLM corruption: each maskable text token selected with probability
/// `mask_rate`; selected tokens are replaced by MASK (80%), a random
/// non-special token (10%), or kept (10%).
pub fn corrupt_mlm(
    seq: &mut InputSequence,
    vocab_size: usize,
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> MlmRecord {
    let mut rec = MlmRecord { positions: Vec::new(), original: Vec::new() };
    for t in seq.maskable_positions() {
        if !rng.random_bool(mask_rate) {
            continue;
        }
        rec.positions.push(t);
        rec.original.push(seq.token_id[t]);
        let branch: f64 = rng.random_range(0.0..1.0);
        if branch < 0.8 {
            seq.token_id[t] = MASK_ID;
        } else if branch < 0.9 {
            seq.token_id[t] = rng.random_range(4..vocab_size) as u32;
        } // else keep
    }
    rec
}

pub fn undo_mlm(seq: &mut InputSequence, rec: &MlmRecord) {
    for (&t, &orig) in rec.positions.iter().zip(&rec.original) {
        seq.token_id[t] = orig;
    }
}

/// ITM sampling over a batch: each image-bearing document keeps its images
/// (label 1) or, with probability `delta`, has them replaced by images drawn
/// from another image-bearing document (label 0).
pub fn sample_itm(
    batch: &mut [InputSequence],
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ItmOutcome> {
    let image_docs: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].has_images())
        .collect();
    let mut outcomes = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        if !batch[i].has_images() {
            outcomes.push(ItmOutcome::NoImages);
            continue;
        }
        let donors: Vec<usize> = image_docs.iter().copied().filter(|&j| j != i).collect();
        if donors.is_empty() || !rng.random_bool(delta) {
            outcomes.push(ItmOutcome::Kept);
            continue;
        }
        let donor = donors[rng.random_range(0..donors.len())];
        let donor_images = batch[donor].images.clone();
        let original = batch[i].images.clone();
        for slot in 0..batch[i].images.len() {
            batch[i].images[slot] = donor_images[rng.random_range(0..donor_images.len())].clone();
        }
        outcomes.push(ItmOutcome::Swapped { original });
    }
    outcomes
}

pub fn undo_itm(batch: &mut [InputSequence], outcomes: &[ItmOutcome]) {
    for (seq, outcome) in batch.iter_mut().zip(outcomes) {
        if let ItmOutcome::Swapped { original } = outcome {
            seq.images = original.clone();
        }
    }
}

/// B-ORD corruption: choose one pair of distinct blocks uniformly; with
/// probability `p_swap` exchange their serialized positions (label 0), else
/// leave them (label 1). Both blocks' segment ids are set to `pad_segment`
/// either way so position cannot leak. Single-block documents are excluded.
pub fn corrupt_block_order(
    seq: &mut InputSequence,
    pad_segment: usize,
    p_swap: f64,
    rng: &mut ChaCha8Rng,
) -> Option<BordRecord> {
    let n = seq.n_blocks();
    if n < 2 {
        return None;
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (i, j) = (i.min(j), i.max(j));
    let swapped = rng.random_bool(p_swap);
    let original_segments = (
        seq.block_segment_id[seq.block_spans[i].0],
        seq.block_segment_id[seq.block_spans[j].0],
    );
    if swapped {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(i, j);
        *seq = reorder_blocks(seq, &perm);
    }
    set_block_segment(seq, i, pad_segment);
    set_block_segment(seq, j, pad_segment);
    Some(BordRecord { pair: (i, j), swapped, original_segments })
}

pub fn undo_block_order(seq: &mut InputSequence, rec: &BordRecord) {
    let (i, j) = rec.pair;
    if rec.swapped {
        let mut perm: Vec<usize> = (0..seq.n_blocks()).collect();
        perm.swap(i, j); // the swap is its own inverse
        *seq = reorder_blocks(seq, &perm);
    }
    set_block_segment(seq, i, rec.original_segments.0);
    set_block_segment(seq, j, rec.original_segments.1);
}

/// B-MLM planning: one textual block per document is chosen for zeroing at
/// the higher-level input; candidates are the gold block plus `n_candidates`−1
/// blocks sampled (with replacement) from the batch's textual block pool.
/// Pure — nothing in the batch is mutated.
pub fn mask_blocks_bmlm(
    batch: &[InputSequence],
    n_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<BmlmAssignment>> {
    let pool: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(d, seq)| {
            seq.block_textual
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(move |(b, _)| (d, b))
        })
        .collect();
    batch
        .iter()
        .enumerate()
        .map(|(d, seq)| {
            let textual: Vec<usize> = seq
                .block_textual
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(b, _)| b)
                .collect();
            if textual.is_empty() {
                return None;
            }
            let block = textual[rng.random_range(0..textual.len())];
            let mut candidates = vec![(d, block)];
            for _ in 1..n_candidates {
                candidates.push(pool[rng.random_range(0..pool.len())]);
            }
            // Fisher-Yates; remember where the gold lands
            let mut gold = 0;
            for k in (1..candidates.len()).rev() {
                let r = rng.random_range(0..=k);
                candidates.swap(k, r);
                if gold == k {
                    gold = r;
                } else if gold == r {
                    gold = k;
                }
            }
            Some(BmlmAssignment { block, candidates, gold })
        })
        .collect()
}

/// IMG-FIT corruption: per image-bearing document, one image slot's pixels
/// are replaced by the all-ones (white) image; candidates are the original
/// image plus `n_candidates`−1 images sampled from the batch's image pool.
pub fn mask_images_imgfit(
    batch: &mut [InputSequence],
    n_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<ImgfitAssignment>> {
    let pool: Vec<ImageRef> = batch
        .iter()
        .flat_map(|seq| seq.images.iter().cloned())
        .collect();
    let mut out = Vec::with_capacity(batch.len());
    for seq in batch.iter_mut() {
        if !seq.has_images() {
            out.push(None);
            continue;
        }
        let slot = rng.random_range(0..seq.images.len());
        let pos = (0..seq.len())
            .find(|&t| seq.image_slot_index[t] == slot as isize)
            .expect("slot has a position");
        let block = seq
            .block_spans
            .iter()
            .position(|&(s, e)| (s..e).contains(&pos))
            .expect("slot position inside a block");
        let original = seq.images[slot].clone();
        seq.images[slot] = ImageRef::white(original.height, original.width);
        let mut candidates = vec![original.clone()];
        for _ in 1..n_candidates {
            candidates.push(pool[rng.random_range(0..pool.len())].clone());
        }
        let mut gold = 0;
        for k in (1..candidates.len()).rev() {
            let r = rng.random_range(0..=k);
            candidates.swap(k, r);
            if gold == k {
                gold = r;
            } else if gold == r {
                gold = k;
            }
        }
        out.push(Some(ImgfitAssignment { slot, block, original, candidates, gold }));
    }
    out
}

pub fn undo_imgfit(batch: &mut [InputSequence], recs: &[Option<ImgfitAssignment>]) {
    for (seq, rec) in batch.iter_mut().zip(recs) {
        if let Some(rec) = rec {
            seq.images[rec.slot] = rec.original.clone();
        }
    }
}

/// Apply all five corruptions for one training step, with one independently
/// seeded rng stream per objective. Order: B-ORD (re-orders positions), then
/// MLM, ITM, IMG-FIT, then the pure B-MLM plan.
pub fn corrupt_batch(
    batch: &mut [InputSequence],
    cfg: &ModelConfig,
    pad_segment: usize,
    seed: u64,
    step: u64,
) -> BatchCorruption {
    let mut bord_rng = stream_rng(seed, step, STREAM_BORD);
    let mut mlm_rng = stream_rng(seed, step, STREAM_MLM);
    let mut itm_rng = stream_rng(seed, step, STREAM_ITM);
    let mut imgfit_rng = stream_rng(seed, step, STREAM_IMGFIT);
    let mut bmlm_rng = stream_rng(seed, step, STREAM_BMLM);

    let bord = batch
        .iter_mut()
        .map(|seq| corrupt_block_order(seq, pad_segment, 0.5, &mut bord_rng))
        .collect();
    let mlm = batch
        .iter_mut()
        .map(|seq| corrupt_mlm(seq, cfg.vocab_size, 0.15, &mut mlm_rng))
        .collect();
    let itm = sample_itm(batch, 0.5, &mut itm_rng);
    let imgfit = mask_images_imgfit(batch, cfg.n_candidates, &mut imgfit_rng);
    let bmlm = mask_blocks_bmlm(batch, cfg.n_candidates, &mut bmlm_rng);
    BatchCorruption { mlm, itm, bord, bmlm, imgfit }
}

/// Invert [`corrupt_batch`] bit-exactly.
pub fn undo_batch(batch: &mut [InputSequence], rec: &BatchCorruption) {
    undo_imgfit(batch, &rec.imgfit);
    undo_itm(batch, &rec.itm);
    for (seq, mlm) in batch.iter_mut().zip(&rec.mlm) {
        undo_mlm(seq, mlm);
    }
    for (seq, bord) in batch.iter_mut().zip(&rec.bord) {
        if let Some(bord) = bord {
            undo_block_order(seq, bord);
        }
    }
}

/// The five per-step losses as tape nodes, plus their λ-weighted sum.
pub struct StepLosses {
    pub mlm: Var,
    pub itm: Var,
    pub bord: Var,
    pub bmlm: Var,
    pub imgfit: Var,
    pub total: Var,
}

impl StepLosses {
    pub fn values<F: Scalar>(&self, tape: &Tape<F>) -> [f64; 5] {
        [
            tape.scalar_value(self.mlm).to_f64(),
            tape.scalar_value(self.itm).to_f64(),
            tape.scalar_value(self.bord).to_f64(),
            tape.scalar_value(self.bmlm).to_f64(),
            tape.scalar_value(self.imgfit).to_f64(),
        ]
    }
}

/// Linear objective head (MLM / ITM / B-ORD).
pub fn head_forward<F: Scalar>(tape: &Tape<F>, b: &Bound, x: Var, name: &str) -> Var {
    tape.add_row_broadcast(
        tape.matmul(x, b.get(&format!("head.{name}.w"))),
        b.get(&format!("head.{name}.b")),
    )
}

use head_forward as head;

/// Candidate-selection head (B-MLM / IMG-FIT): one two-layer MLP scorer
/// shared across candidate slots, applied to concat(context, candidate) and
/// concatenated into an n-way logit row.
pub fn candidate_scores<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    ctx: Var,
    cands: &[Var],
    name: &str,
) -> Var {
    let scores: Vec<Var> = cands
        .iter()
        .map(|&c| {
            let x = tape.concat_cols(&[ctx, c]);
            let hidden = tape.gelu(tape.add_row_broadcast(
                tape.matmul(x, b.get(&format!("head.{name}.w1"))),
                b.get(&format!("head.{name}.b1")),
            ));
            tape.add_row_broadcast(
                tape.matmul(hidden, b.get(&format!("head.{name}.w2"))),
                b.get(&format!("head.{name}.b2")),
            )
        })
        .collect();
    tape.concat_cols(&scores)
}

fn ce_or_zero<F: Scalar>(tape: &Tape<F>, rows: Vec<Var>, targets: Vec<usize>) -> Var {
    if rows.is_empty() {
        tape.scalar(F::zero())
    } else {
        tape.cross_entropy_mean(tape.concat_rows(&rows), &targets)
    }
}

/// Run the shared forward over a corrupted batch and compute all five
/// losses. Each loss is the mean cross-entropy over its valid examples and
/// exactly zero (with zero gradient) when no example is valid.
pub fn five_losses<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    agg: AggregatorKind,
    batch: &[InputSequence],
    rec: &BatchCorruption,
    lambda: [f64; 5],
) -> StepLosses {
    let d = cfg.d;
    let high = agg.has_high_level();
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut itm_rows = Vec::new();
    let mut itm_targets = Vec::new();
    let mut bord_rows = Vec::new();
    let mut bord_targets = Vec::new();
    let mut bmlm_inputs: Vec<(Var, usize, &BmlmAssignment)> = Vec::new();
    let mut imgfit_rows = Vec::new();
    let mut imgfit_targets = Vec::new();
    let mut blkh_per_doc: Vec<Var> = Vec::with_capacity(batch.len());

    for (di, seq) in batch.iter().enumerate() {
        let lower_out = lower_forward(tape, seq, b, cfg);
        let blkh_all = extract_block_reps(tape, lower_out, &seq.cls_positions);
        blkh_per_doc.push(blkh_all);

        // B-MLM: zero the masked block's row at the aggregator input
        let higher_in = match &rec.bmlm[di] {
            Some(a) if high => {
                let zero = tape.input(Array2::<F>::zeros((1, d)).into_dyn());
                tape.replace_rows(blkh_all, &[1 + a.block], zero)
            }
            _ => blkh_all,
        };
        let out = crate::baselines::aggregate(tape, b, cfg, agg, seq, higher_in);

        // MLM: lower rows at masked positions vs original ids
        let mlm_rec = &rec.mlm[di];
        if !mlm_rec.positions.is_empty() {
            mlm_rows.push(tape.gather_rows(lower_out, &mlm_rec.positions));
            mlm_targets.extend(mlm_rec.original.iter().map(|&t| t as usize));
        }

        // ITM: lower-level global CLS
        match &rec.itm[di] {
            ItmOutcome::NoImages => {}
            outcome => {
                itm_rows.push(tape.gather_rows(lower_out, &[0]));
                itm_targets.push(if matches!(outcome, ItmOutcome::Kept) { 1 } else { 0 });
            }
        }

        // B-ORD: the aggregator's global output
        if let (Some(bord), true) = (&rec.bord[di], high) {
            bord_rows.push(out.out_global);
            bord_targets.push(if bord.swapped { 0 } else { 1 });
        }

        if let (Some(a), true) = (&rec.bmlm[di], high) {
            let out_masked = tape.gather_rows(out.out_blocks, &[a.block]);
            bmlm_inputs.push((out_masked, di, a));
        }

        // IMG-FIT: shared scorer over (out_global ++ out_block, candidate
        // visual embedding) pairs
        if let (Some(a), true) = (&rec.imgfit[di], high) {
            let out_block = tape.gather_rows(out.out_blocks, &[a.block]);
            let ctx = tape.concat_cols(&[out.out_global, out_block]);
            let cands: Vec<Var> =
                a.candidates.iter().map(|c| visual_embed(tape, b, c, cfg)).collect();
            imgfit_rows.push(candidate_scores(tape, b, ctx, &cands, "imgfit"));
            imgfit_targets.push(a.gold);
        }
    }

    // B-MLM heads need every document's blkh, so they run after the loop
    let mut bmlm_rows = Vec::new();
    let mut bmlm_targets = Vec::new();
    for (out_masked, _di, a) in &bmlm_inputs {
        let cands: Vec<Var> = a
            .candidates
            .iter()
            .map(|&(cd, cb)| tape.gather_rows(blkh_per_doc[cd], &[1 + cb]))
            .collect();
        bmlm_rows.push(candidate_scores(tape, b, *out_masked, &cands, "bmlm"));
        bmlm_targets.push(a.gold);
    }

    let mlm_logits: Vec<Var> = mlm_rows.iter().map(|&r| head(tape, b, r, "mlm")).collect();
    let itm_logits: Vec<Var> = itm_rows.iter().map(|&r| head(tape, b, r, "itm")).collect();
    let bord_logits: Vec<Var> = bord_rows.iter().map(|&r| head(tape, b, r, "bord")).collect();
    let bmlm_logits: Vec<Var> = bmlm_rows;
    let imgfit_logits: Vec<Var> = imgfit_rows;

    let mlm = ce_or_zero(tape, mlm_logits, mlm_targets);
    let itm = ce_or_zero(tape, itm_logits, itm_targets);
    let bord = ce_or_zero(tape, bord_logits, bord_targets);
    let bmlm = ce_or_zero(tape, bmlm_logits, bmlm_targets);
    let imgfit = ce_or_zero(tape, imgfit_logits, imgfit_targets);

    let mut total = tape.scale(mlm, F::from_f64(lambda[0]));
    for (l, w) in [(itm, lambda[1]), (bord, lambda[2]), (bmlm, lambda[3]), (imgfit, lambda[4])] {
        total = tape.add(total, tape.scale(l, F::from_f64(w)));
    }
    StepLosses { mlm, itm, bord, bmlm, imgfit, total }
}

/// Eq. 2: Σ λ_i · l_i over the five scalar losses.
pub fn combined_loss(losses: [f64; 5], lambda: [f64; 5]) -> Result<f64, ObjectiveError> {
    if losses.iter().chain(lambda.iter()).any(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFiniteLoss);
    }
    Ok(losses.iter().zip(lambda.iter()).map(|(l, w)| l * w).sum())
}
