//! Training orchestration: the deterministic doc_id split, the pretraining
//! step driver, downstream fine-tuning, and evaluation runs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::baselines::Modality;
use crate::config::RunConfig;
use crate::eval::{mrr, prf1_at_threshold, recall_at_k, select_tau, MetricReport, RankResult};
use crate::features::{assemble_input_with, FeatureError, InputSequence, Limits, Vocab};
use crate::layout::{sort_and_serialize, Document, LayoutError};
use crate::nnet::{lr_at, Adam, ParamStore};
use crate::objectives::{corrupt_batch, five_losses, stream_rng};
use crate::tasks::{
    block_embedding, contrastive_step, context_sequence, doc_rep_forward, gold_rank,
    image_embedding, ImageSuggestInstance, TaskError, TextFillInstance, CONTRASTIVE_MARGIN,
};

/// rng stream for batch composition (objective streams are 1..=5)
pub const STREAM_BATCH: u64 = 0;
/// rng stream for fine-tuning instance order
pub const STREAM_FINETUNE: u64 = 6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no documents in the training split")]
    EmptyTrainSplit,
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Stable 70/10/20 assignment by FNV-1a hash of the doc_id — independent of
/// file order.
pub fn split_of(doc_id: &str) -> Split {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in doc_id.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    match h % 100 {
        0..=69 => Split::Train,
        70..=79 => Split::Val,
        _ => Split::Test,
    }
}

pub fn split_docs(docs: Vec<Document>) -> (Vec<Document>, Vec<Document>, Vec<Document>) {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for d in docs {
        match split_of(&d.doc_id) {
            Split::Train => out.0.push(d),
            Split::Val => out.1.push(d),
            Split::Test => out.2.push(d),
        }
    }
    out
}

/// Sort, serialize and featurize a document list under the run's modality.
pub fn assemble_corpus(
    docs: &[Document],
    vocab: &Vocab,
    limits: &Limits,
    modality: Modality,
) -> Result<Vec<InputSequence>, TrainError> {
    docs.iter()
        .map(|d| {
            let (sorted, ids) = sort_and_serialize(d)?;
            Ok(assemble_input_with(&sorted, &ids, vocab, limits, modality.include_images())?)
        })
        .collect()
}

/// One pretraining step's log record (JSONL line).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_mlm: f64,
    pub l_itm: f64,
    pub l_bord: f64,
    pub l_bmlm: f64,
    pub l_imgfit: f64,
    pub total: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Deterministic batch composition for a step: `batch_size` draws with
/// replacement from the training sequences, on the batch rng stream.
pub fn batch_indices(seed: u64, step: usize, n_docs: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, step as u64, STREAM_BATCH);
    (0..batch_size).map(|_| rng.random_range(0..n_docs)).collect()
}

/// Run pretraining steps `[from, to)`, mutating parameters and Adam state in
/// place. Everything is a function of (store, adam, seed, step), so resuming
/// from a checkpoint at any step is bit-identical to running straight
/// through. Returns one log record per step.
pub fn pretrain_steps(
    cfg: &RunConfig,
    train_seqs: &[InputSequence],
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    from: usize,
    to: usize,
) -> Result<Vec<StepLog>, TrainError> {
    if train_seqs.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let model = cfg.model_config();
    let agg = cfg.aggregator_kind().expect("validated config");
    let pad_segment = cfg.limits().padding_segment();
    let mut logs = Vec::with_capacity(to.saturating_sub(from));
    for step in from..to {
        let idx = batch_indices(cfg.seed, step, train_seqs.len(), cfg.batch_size);
        let mut batch: Vec<InputSequence> =
            idx.iter().map(|&i| train_seqs[i].clone()).collect();
        let rec = corrupt_batch(&mut batch, &model, pad_segment, cfg.seed, step as u64);

        let tape: Tape<f32> = Tape::new();
        let b = store.bind(&tape);
        let losses = five_losses(&tape, &b, &model, agg, &batch, &rec, cfg.lambda());
        let values = losses.values(&tape);
        let total = tape.scalar_value(losses.total) as f64;
        let grads = tape.backward(losses.total);
        let gmap = b.grads(&tape, &grads, store);
        drop(tape);

        let lr = lr_at(step, cfg.pretrain_steps, cfg.learning_rate);
        adam.apply(store, &gmap, lr);
        logs.push(StepLog {
            step,
            l_mlm: values[0],
            l_itm: values[1],
            l_bord: values[2],
            l_bmlm: values[3],
            l_imgfit: values[4],
            total,
            lr,
            seed: cfg.seed,
        });
    }
    Ok(logs)
}

/// Forward pass of one text-fill instance down to (loss, distances).
fn text_fill_forward(
    tape: &Tape<f32>,
    b: &crate::nnet::Bound,
    cfg: &RunConfig,
    inst: &TextFillInstance,
    vocab: &Vocab,
    eq3_as_printed: bool,
) -> Result<(crate::autodiff::Var, Vec<f64>), TrainError> {
    let model = cfg.model_config();
    let agg = cfg.aggregator_kind().expect("validated config");
    let modality = cfg.modality_kind().expect("validated config");
    let limits = cfg.limits();
    let seq = context_sequence(&inst.doc_id, &inst.context, vocab, &limits, modality)?;
    let r_doc = doc_rep_forward(tape, b, &model, agg, &seq);
    let cands = inst
        .candidates
        .iter()
        .map(|blk| block_embedding(tape, b, &model, blk, vocab, &limits, modality))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(contrastive_step(
        tape,
        b,
        r_doc,
        &cands,
        inst.gold_index,
        CONTRASTIVE_MARGIN,
        eq3_as_printed,
    ))
}

/// Forward pass of one image-suggestion instance. Refuses under the
/// text-only modality.
fn image_suggest_forward(
    tape: &Tape<f32>,
    b: &crate::nnet::Bound,
    cfg: &RunConfig,
    inst: &ImageSuggestInstance,
    vocab: &Vocab,
    eq3_as_printed: bool,
) -> Result<(crate::autodiff::Var, Vec<f64>), TrainError> {
    if cfg.modality_kind().expect("validated config") == Modality::TextOnly {
        return Err(TrainError::Task(TaskError::TextOnlyModality));
    }
    let model = cfg.model_config();
    let agg = cfg.aggregator_kind().expect("validated config");
    let limits = cfg.limits();
    let (sorted, ids) = sort_and_serialize(&inst.doc)?;
    let seq = assemble_input_with(&sorted, &ids, vocab, &limits, true)?;
    let r_doc = doc_rep_forward(tape, b, &model, agg, &seq);
    let cands: Vec<_> = inst
        .candidates
        .iter()
        .map(|img| image_embedding(tape, b, &model, img))
        .collect();
    Ok(contrastive_step(
        tape,
        b,
        r_doc,
        &cands,
        inst.gold_index,
        CONTRASTIVE_MARGIN,
        eq3_as_printed,
    ))
}

/// Which downstream task a fine-tuning/evaluation run addresses.
#[derive(Clone, Debug)]
pub enum TaskInstances {
    TextFill(Vec<TextFillInstance>),
    ImageSuggest(Vec<ImageSuggestInstance>),
}

impl TaskInstances {
    pub fn len(&self) -> usize {
        match self {
            TaskInstances::TextFill(v) => v.len(),
            TaskInstances::ImageSuggest(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_name(&self) -> &'static str {
        match self {
            TaskInstances::TextFill(_) => "text-fill",
            TaskInstances::ImageSuggest(_) => "image-suggestion",
        }
    }
}

fn instance_forward(
    tape: &Tape<f32>,
    b: &crate::nnet::Bound,
    cfg: &RunConfig,
    instances: &TaskInstances,
    i: usize,
    vocab: &Vocab,
    eq3_as_printed: bool,
) -> Result<(crate::autodiff::Var, Vec<f64>), TrainError> {
    match instances {
        TaskInstances::TextFill(v) => {
            text_fill_forward(tape, b, cfg, &v[i], vocab, eq3_as_printed)
        }
        TaskInstances::ImageSuggest(v) => {
            image_suggest_forward(tape, b, cfg, &v[i], vocab, eq3_as_printed)
        }
    }
}

fn instance_gold(instances: &TaskInstances, i: usize) -> usize {
    match instances {
        TaskInstances::TextFill(v) => v[i].gold_index,
        TaskInstances::ImageSuggest(v) => v[i].gold_index,
    }
}

/// Contrastive fine-tuning: one instance per step, visited in a shuffled
/// epoch order on the fine-tune rng stream.
pub fn finetune(
    cfg: &RunConfig,
    instances: &TaskInstances,
    vocab: &Vocab,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    steps: usize,
    eq3_as_printed: bool,
) -> Result<Vec<f64>, TrainError> {
    assert!(!instances.is_empty());
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        if order.is_empty() {
            order = (0..instances.len()).collect();
            let epoch = step / instances.len();
            order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, STREAM_FINETUNE));
        }
        let i = order.pop().unwrap();
        let tape: Tape<f32> = Tape::new();
        let b = store.bind(&tape);
        let (loss, _) = instance_forward(&tape, &b, cfg, instances, i, vocab, eq3_as_printed)?;
        let loss_value = tape.scalar_value(loss) as f64;
        let grads = tape.backward(loss);
        let gmap = b.grads(&tape, &grads, store);
        drop(tape);
        adam.apply(store, &gmap, cfg.finetune_learning_rate);
        losses.push(loss_value);
    }
    Ok(losses)
}

/// Score every instance without touching parameters: per-instance gold ranks
/// and raw distance lists.
pub fn evaluate(
    cfg: &RunConfig,
    instances: &TaskInstances,
    vocab: &Vocab,
    store: &ParamStore<f32>,
    eq3_as_printed: bool,
) -> Result<(Vec<RankResult>, Vec<Vec<f64>>, Vec<usize>), TrainError> {
    let mut ranks = Vec::with_capacity(instances.len());
    let mut distances = Vec::with_capacity(instances.len());
    let mut gold = Vec::with_capacity(instances.len());
    for i in 0..instances.len() {
        let tape: Tape<f32> = Tape::new();
        let b = store.bind(&tape);
        let (_, d) = instance_forward(&tape, &b, cfg, instances, i, vocab, eq3_as_printed)?;
        let g = instance_gold(instances, i);
        ranks.push(RankResult::new(gold_rank(&d, g), d.len())?);
        gold.push(g);
        distances.push(d);
    }
    Ok((ranks, distances, gold))
}

/// Assemble the metric report: ranking metrics on the test results, with τ
/// chosen on the validation distances.
pub fn build_report(
    cfg: &RunConfig,
    task: &str,
    test: &(Vec<RankResult>, Vec<Vec<f64>>, Vec<usize>),
    validation: &(Vec<Vec<f64>>, Vec<usize>),
) -> Result<MetricReport, TrainError> {
    let (ranks, distances, gold) = test;
    let tau = select_tau(&validation.0, &validation.1);
    let prf = prf1_at_threshold(distances, gold, tau);
    Ok(MetricReport {
        task: task.to_string(),
        aggregator: cfg.aggregator.clone(),
        modality: cfg.modality.clone(),
        mrr: mrr(ranks)?,
        recall_at_1: recall_at_k(ranks, 1),
        recall_at_5: recall_at_k(ranks, 5),
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        n_instances: ranks.len(),
        tau,
    })
}
