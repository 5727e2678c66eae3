//! Aggregator variants behind one interface: the hierarchical transformer,
//! the CNN-Grid aggregator, and the single-level (lower-encoder-only)
//! ablation, plus the text-only modality switch.

use std::str::FromStr;

use ndarray::Array2;

use crate::autodiff::{Scalar, Tape, Var};
use crate::features::InputSequence;
use crate::nnet::{encode_higher, Bound, ModelConfig};

pub const GRID_ROW_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregatorKind {
    Lampret,
    CnnGrid,
    SingleLevel,
}

impl AggregatorKind {
    /// Whether the high-level objectives (B-ORD, B-MLM, IMG-FIT) apply.
    pub fn has_high_level(self) -> bool {
        !matches!(self, AggregatorKind::SingleLevel)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorKind::Lampret => "lampret",
            AggregatorKind::CnnGrid => "cnn-grid",
            AggregatorKind::SingleLevel => "single-level",
        }
    }

    pub fn all() -> [AggregatorKind; 3] {
        [AggregatorKind::Lampret, AggregatorKind::CnnGrid, AggregatorKind::SingleLevel]
    }
}

impl FromStr for AggregatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lampret" => Ok(AggregatorKind::Lampret),
            "cnn-grid" => Ok(AggregatorKind::CnnGrid),
            "single-level" => Ok(AggregatorKind::SingleLevel),
            other => Err(format!("unknown aggregator {other:?}")),
        }
    }
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Multimodal,
    TextOnly,
}

impl Modality {
    pub fn include_images(self) -> bool {
        self == Modality::Multimodal
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Multimodal => "multimodal",
            Modality::TextOnly => "text-only",
        }
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "multimodal" => Ok(Modality::Multimodal),
            "text-only" => Ok(Modality::TextOnly),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Grid cell per block: row advances when y_top grows beyond the tolerance,
/// column is the position within the row. Blocks overflowing the grid are
/// dropped (None) with a warning.
pub fn grid_positions(
    y_tops: &[f64],
    rows: usize,
    cols: usize,
    tol: f64,
) -> Vec<Option<(usize, usize)>> {
    let mut out = Vec::with_capacity(y_tops.len());
    let mut row = 0usize;
    let mut col = 0usize;
    let mut prev_y: Option<f64> = None;
    for &y in y_tops {
        if let Some(py) = prev_y {
            if y - py > tol {
                row += 1;
                col = 0;
            }
        }
        prev_y = Some(y);
        if row >= rows || col >= cols {
            log::warn!("grid overflow: block at y_top {y} dropped (row {row}, col {col})");
            out.push(None);
            continue;
        }
        out.push(Some((row, col)));
        col += 1;
    }
    out
}

/// Aggregated document-level view, identical across aggregator kinds: a
/// 1xd doc_rep, a 1xd row for the global head, and one row per block.
pub struct AggregateOut {
    pub doc_rep: Var,
    pub out_global: Var,
    pub out_blocks: Var,
}

/// CNN-Grid aggregation: insert block rows into an RxC grid, run three
/// same-padded 3x3 convolutions (ReLU between), read occupied cells back in
/// serialized order, and average them into the doc_rep.
pub fn cnn_aggregate<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    block_rows: Var,
    y_tops: &[f64],
) -> AggregateOut {
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
    let d = cfg.d;
    let positions = grid_positions(y_tops, rows, cols, GRID_ROW_TOL);
    let occupied: Vec<(usize, usize)> = positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|(r, c)| (i, r * cols + c)))
        .collect();
    let zeros = tape.input(Array2::<F>::zeros((rows * cols, d)).into_dyn());
    let kept_rows = tape.gather_rows(block_rows, &occupied.iter().map(|&(i, _)| i).collect::<Vec<_>>());
    let flat_cells: Vec<usize> = occupied.iter().map(|&(_, f)| f).collect();
    let grid_flat = tape.replace_rows(zeros, &flat_cells, kept_rows);
    let mut grid = tape.reshape(grid_flat, vec![rows, cols, d]);
    for l in 0..3 {
        grid = tape.conv2d(
            grid,
            b.get(&format!("grid.{l}.kernel")),
            b.get(&format!("grid.{l}.bias")),
            1,
            true,
        );
        if l < 2 {
            grid = tape.relu(grid);
        }
    }
    debug_assert_eq!(tape.shape(grid), vec![rows, cols, d]);
    let out_flat = tape.reshape(grid, vec![rows * cols, d]);
    let occupied_out = tape.gather_rows(out_flat, &flat_cells);
    let doc_rep = tape.mean_rows(occupied_out);
    // per-block outputs in serialized order; dropped blocks fall back to
    // the doc_rep row
    let mut per_block = Vec::with_capacity(y_tops.len());
    let mut kept_iter = 0usize;
    for p in &positions {
        match p {
            Some(_) => {
                per_block.push(tape.gather_rows(occupied_out, &[kept_iter]));
                kept_iter += 1;
            }
            None => per_block.push(doc_rep),
        }
    }
    let out_blocks = tape.concat_rows(&per_block);
    AggregateOut { doc_rep, out_global: doc_rep, out_blocks }
}

/// Single-level ablation: no aggregation at all; the document representation
/// is the lower encoder's global CLS output.
pub fn single_level_doc_rep<F: Scalar>(tape: &Tape<F>, higher_in: Var) -> Var {
    tape.gather_rows(higher_in, &[0])
}

/// Run the selected aggregator over `higher_in` (row 0 = blkh_global, rows
/// 1.. = blkh per block, with any B-MLM zeroing already applied).
pub fn aggregate<F: Scalar>(
    tape: &Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    kind: AggregatorKind,
    seq: &InputSequence,
    higher_in: Var,
) -> AggregateOut {
    let n = seq.n_blocks();
    let block_idx: Vec<usize> = (1..=n).collect();
    match kind {
        AggregatorKind::Lampret => {
            let out = encode_higher(tape, higher_in, &vec![true; n + 1], b, cfg, None);
            let out_global = tape.gather_rows(out, &[0]);
            let out_blocks = tape.gather_rows(out, &block_idx);
            AggregateOut { doc_rep: out_global, out_global, out_blocks }
        }
        AggregatorKind::CnnGrid => {
            let block_rows = tape.gather_rows(higher_in, &block_idx);
            cnn_aggregate(tape, b, cfg, block_rows, &seq.block_y_top)
        }
        AggregatorKind::SingleLevel => {
            let blkh_global = single_level_doc_rep(tape, higher_in);
            let out_blocks = tape.gather_rows(higher_in, &block_idx);
            AggregateOut { doc_rep: blkh_global, out_global: blkh_global, out_blocks }
        }
    }
}
