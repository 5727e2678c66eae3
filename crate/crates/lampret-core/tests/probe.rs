use ndarray::Array2;

use lampret_core::autodiff::{Scalar, Tape, Var};
use lampret_core::baselines::{aggregate, AggregatorKind};
use lampret_core::config::Profile;
use lampret_core::features::{assemble_input, InputSequence, Limits, Vocab};
use lampret_core::ingest::{generate_synthetic, CorpusSpec};
use lampret_core::layout::sort_and_serialize;
use lampret_core::nnet::{
    extract_block_reps, init_params, lower_forward, visual_embed, Adam, Bound, ModelConfig,
    ParamStore,
};
use lampret_core::objectives::{
    corrupt_block_order, corrupt_mlm, five_losses, mask_images_imgfit, stream_rng,
    BatchCorruption, ItmOutcome,
};
use lampret_core::train::pretrain_steps;
use lampret_core::RunConfig;

fn corpus_spec(seed: u64, n_docs: usize, blocks: (usize, usize), images: (usize, usize)) -> CorpusSpec {
    CorpusSpec {
        seed,
        n_docs,
        blocks_per_doc: blocks,
        images_per_doc: images,
        vocab_sample: CorpusSpec::default_vocab(),
        two_column_prob: 0.3,
        caption_prob: 0.3,
        image_size: 8,
    }
}

fn build(seed: u64, n: usize, blocks: (usize, usize), images: (usize, usize)) -> (Vec<InputSequence>, Vocab) {
    let docs = generate_synthetic(&corpus_spec(seed, n, blocks, images));
    let words: Vec<&str> = docs.iter().flat_map(|d| d.blocks.iter().flat_map(|b| b.text.split_whitespace())).collect();
    let vocab = Vocab::build_from_words(words, 1000);
    let seqs = docs
        .iter()
        .map(|d| {
            let (s, ids) = sort_and_serialize(d).unwrap();
            assemble_input(&s, &ids, &vocab, &Limits::default()).unwrap()
        })
        .collect();
    (seqs, vocab)
}

/// Can B-ORD fit two fixed examples (same doc, swapped and unswapped)?
#[test]
#[ignore]
fn probe_bord_two_examples() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let m = cfg.model_config();
    let limits = Limits::default();
    let (seqs, _) = build(34, 10, (4, 6), (0, 0));
    let base = seqs.iter().find(|s| s.n_blocks() >= 4).unwrap().clone();

    // deterministic pair of corrupted variants
    let mk = |want_swapped: bool| -> (InputSequence, BatchCorruption) {
        let mut tries = 0u64;
        loop {
            let mut s = base.clone();
            let mut rng = stream_rng(1234 + tries, 0, 2);
            let rec = corrupt_block_order(&mut s, limits.padding_segment(), 0.5, &mut rng).unwrap();
            if rec.swapped == want_swapped {
                let b = BatchCorruption {
                    mlm: vec![lampret_core::objectives::MlmRecord { positions: vec![], original: vec![] }],
                    itm: vec![ItmOutcome::NoImages],
                    bord: vec![Some(rec)],
                    bmlm: vec![None],
                    imgfit: vec![None],
                };
                return (s, b);
            }
            tries += 1;
        }
    };
    let (s0, r0) = mk(false);
    let (s1, r1) = mk(true);

    let mut store: ParamStore<f32> = init_params(&m, 0);
    let mut adam = Adam::new(&store);
    for step in 0..300 {
        let mut total = 0.0;
        for (s, r) in [(&s0, &r0), (&s1, &r1)] {
            let tape = Tape::<f32>::new();
            let bnd = store.bind(&tape);
            let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, std::slice::from_ref(s), r, [0.0, 0.0, 1.0, 0.0, 0.0]);
            let grads = tape.backward(losses.total);
            let gmap = bnd.grads(&tape, &grads, &store);
            adam.apply(&mut store, &gmap, 1e-3);
            total += tape.scalar_value(losses.bord) as f64;
        }
        if step % 30 == 0 {
            eprintln!("step {step:3}  bord loss {:.4}", total / 2.0);
        }
    }
}

/// Does out_global differ at all between swapped and unswapped inputs?
#[test]
#[ignore]
fn probe_out_global_sensitivity() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let m = cfg.model_config();
    let limits = Limits::default();
    let (seqs, _) = build(34, 10, (4, 6), (0, 0));
    let base = seqs.iter().find(|s| s.n_blocks() >= 4).unwrap().clone();
    let store: ParamStore<f32> = init_params(&m, 0);

    let run = |s: &InputSequence| -> Vec<f32> {
        let tape = Tape::<f32>::new();
        let b = store.bind(&tape);
        let lower = lower_forward(&tape, s, &b, &m);
        let blkh = extract_block_reps(&tape, lower, &s.cls_positions);
        let out = aggregate(&tape, &b, &m, AggregatorKind::Lampret, s, blkh);
        tape.value2(out.out_global).row(0).to_vec()
    };

    let mut tries = 0u64;
    let (unswapped, swapped) = loop {
        let mut a = base.clone();
        let mut rng = stream_rng(99 + tries, 0, 2);
        let rec = corrupt_block_order(&mut a, limits.padding_segment(), 1.0, &mut rng).unwrap();
        if rec.swapped {
            let mut b = base.clone();
            let mut rng2 = stream_rng(99 + tries, 0, 2);
            let rec2 = corrupt_block_order(&mut b, limits.padding_segment(), 0.0, &mut rng2).unwrap();
            assert_eq!(rec.pair, rec2.pair);
            break (b, a);
        }
        tries += 1;
    };
    let (u, s) = (run(&unswapped), run(&swapped));
    let max_diff = u.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    eprintln!("out_global max |unswapped - swapped| = {max_diff:e}");
}

/// MLM train loss trajectory at desk scale, across learning rates.
#[test]
#[ignore]
fn probe_mlm_loss() {
    for lr in ["1e-3", "3e-3", "1e-2"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        for (k, v) in [("lambda_itm", "0"), ("lambda_bord", "0"), ("lambda_bmlm", "0"), ("lambda_imgfit", "0"), ("pretrain_steps", "2000"), ("learning_rate", lr)] {
            cfg.apply_kv(k, v).unwrap();
        }
        let m = cfg.model_config();
        let (seqs, _) = build(33, 32, (2, 5), (0, 1));
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        for c in 0..5 {
            let logs = pretrain_steps(&cfg, &seqs, &mut store, &mut adam, c * 400, (c + 1) * 400).unwrap();
            let avg: f64 = logs.iter().rev().take(50).map(|l| l.l_mlm).sum::<f64>() / 50.0;
            eprintln!("lr {lr}  step {:4}  l_mlm(last50) {avg:.4}", (c + 1) * 400);
        }
    }
}

/// B-ORD full-pipeline train loss across learning rates.
#[test]
#[ignore]
fn probe_bord_lr() {
    for lr in ["3e-3", "1e-2"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        for (k, v) in [("lambda_mlm", "0"), ("lambda_itm", "0"), ("lambda_bmlm", "0"), ("lambda_imgfit", "0"), ("pretrain_steps", "1500"), ("learning_rate", lr)] {
            cfg.apply_kv(k, v).unwrap();
        }
        let m = cfg.model_config();
        let (seqs, _) = build(34, 200, (3, 6), (0, 0));
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        for c in 0..5 {
            let logs = pretrain_steps(&cfg, &seqs, &mut store, &mut adam, c * 300, (c + 1) * 300).unwrap();
            let avg: f64 = logs.iter().rev().take(50).map(|l| l.l_bord).sum::<f64>() / 50.0;
            eprintln!("lr {lr}  step {:4}  l_bord(last50) {avg:.4}", (c + 1) * 300);
        }
    }
}

// --- simplified-corpus probes ---------------------------------------------

fn spec2(
    seed: u64,
    n_docs: usize,
    blocks: (usize, usize),
    images: (usize, usize),
    vocab_sample: Vec<String>,
    two_col: f64,
    caption: f64,
) -> CorpusSpec {
    CorpusSpec {
        seed,
        n_docs,
        blocks_per_doc: blocks,
        images_per_doc: images,
        vocab_sample,
        two_column_prob: two_col,
        caption_prob: caption,
        image_size: 8,
    }
}

fn build2(spec: &CorpusSpec) -> Vec<InputSequence> {
    let docs = generate_synthetic(spec);
    let words: Vec<&str> = docs
        .iter()
        .flat_map(|d| d.blocks.iter().flat_map(|b| b.text.split_whitespace()))
        .collect();
    let vocab = Vocab::build_from_words(words, 1000);
    docs.iter()
        .map(|d| {
            let (s, ids) = sort_and_serialize(d).unwrap();
            assemble_input(&s, &ids, &vocab, &Limits::default()).unwrap()
        })
        .collect()
}

fn head_logits<F: Scalar>(tape: &Tape<F>, b: &Bound, x: Var, name: &str) -> Array2<F> {
    tape.value2(lampret_core::objectives::head_forward(tape, b, x, name))
}

fn argmax_row<F: Scalar>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v.to_f64() > row[best].to_f64() {
            best = i;
        }
    }
    best
}

fn mlm_accuracy(m: &ModelConfig, store: &ParamStore<f32>, seqs: &[InputSequence]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for (i, seq) in seqs.iter().enumerate() {
        let mut s = seq.clone();
        let mut rng = stream_rng(99, i as u64, 1);
        let rec = corrupt_mlm(&mut s, m.vocab_size, 0.15, &mut rng);
        if rec.positions.is_empty() {
            continue;
        }
        let tape = Tape::<f32>::new();
        let b = store.bind(&tape);
        let lower = lower_forward(&tape, &s, &b, m);
        let rows = tape.gather_rows(lower, &rec.positions);
        let logits = head_logits(&tape, &b, rows, "mlm");
        for (r, &orig) in rec.original.iter().enumerate() {
            total += 1;
            if argmax_row(logits.row(r)) == orig as usize {
                correct += 1;
            }
        }
    }
    correct as f64 / total.max(1) as f64
}

fn bord_accuracy(m: &ModelConfig, store: &ParamStore<f32>, seqs: &[InputSequence], pad: usize) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for (i, seq) in seqs.iter().enumerate() {
        let mut s = seq.clone();
        let mut rng = stream_rng(98, i as u64, 2);
        let Some(rec) = corrupt_block_order(&mut s, pad, 0.5, &mut rng) else { continue };
        let tape = Tape::<f32>::new();
        let b = store.bind(&tape);
        let lower = lower_forward(&tape, &s, &b, m);
        let blkh = extract_block_reps(&tape, lower, &s.cls_positions);
        let out = aggregate(&tape, &b, m, AggregatorKind::Lampret, &s, blkh);
        let logits = head_logits(&tape, &b, out.out_global, "bord");
        let want = if rec.swapped { 0 } else { 1 };
        total += 1;
        if argmax_row(logits.row(0)) == want {
            correct += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

fn imgfit_accuracy(m: &ModelConfig, store: &ParamStore<f32>, seqs: &[InputSequence]) -> f64 {
    let mut batch: Vec<InputSequence> = seqs.to_vec();
    let mut rng = stream_rng(97, 0, 3);
    let recs = mask_images_imgfit(&mut batch, m.n_candidates, &mut rng);
    let (mut correct, mut total) = (0usize, 0usize);
    for (seq, rec) in batch.iter().zip(&recs) {
        let Some(a) = rec else { continue };
        let tape = Tape::<f32>::new();
        let b = store.bind(&tape);
        let lower = lower_forward(&tape, seq, &b, m);
        let blkh = extract_block_reps(&tape, lower, &seq.cls_positions);
        let out = aggregate(&tape, &b, m, AggregatorKind::Lampret, seq, blkh);
        let out_block = tape.gather_rows(out.out_blocks, &[a.block]);
        let ctx = tape.concat_cols(&[out.out_global, out_block]);
        let cands: Vec<_> = a.candidates.iter().map(|c| visual_embed(&tape, &b, c, m)).collect();
        let logits =
            tape.value2(lampret_core::objectives::candidate_scores(&tape, &b, ctx, &cands, "imgfit"));
        total += 1;
        if argmax_row(logits.row(0)) == a.gold {
            correct += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

fn wide_vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i:03}")).collect()
}

#[test]
#[ignore]
fn probe2_mlm() {
    let mut cfg = RunConfig::for_profile(Profile::Desk);
    for (k, v) in [("lambda_itm", "0"), ("lambda_bord", "0"), ("lambda_bmlm", "0"), ("lambda_imgfit", "0"), ("pretrain_steps", "2000"), ("learning_rate", "3e-3")] {
        cfg.apply_kv(k, v).unwrap();
    }
    let m = cfg.model_config();
    let vocab12: Vec<String> = CorpusSpec::default_vocab().into_iter().take(12).collect();
    let seqs = build2(&spec2(33, 32, (2, 5), (0, 0), vocab12, 0.0, 0.0));
    let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
    let mut adam = Adam::new(&store);
    for c in 0..5 {
        pretrain_steps(&cfg, &seqs, &mut store, &mut adam, c * 400, (c + 1) * 400).unwrap();
        eprintln!("mlm step {:4}  acc {:.3}", (c + 1) * 400, mlm_accuracy(&m, &store, &seqs));
    }
}

#[test]
#[ignore]
fn probe2_bord() {
    for lr in ["1e-3", "3e-3"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        for (k, v) in [("lambda_mlm", "0"), ("lambda_itm", "0"), ("lambda_bmlm", "0"), ("lambda_imgfit", "0"), ("pretrain_steps", "3000"), ("learning_rate", lr)] {
            cfg.apply_kv(k, v).unwrap();
        }
        let m = cfg.model_config();
        let limits = Limits::default();
        let seqs = build2(&spec2(34, 200, (3, 6), (0, 0), CorpusSpec::default_vocab(), 0.0, 0.0));
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        for c in 0..6 {
            let logs = pretrain_steps(&cfg, &seqs, &mut store, &mut adam, c * 500, (c + 1) * 500).unwrap();
            let avg: f64 = logs.iter().rev().take(50).map(|l| l.l_bord).sum::<f64>() / 50.0;
            eprintln!(
                "bord lr {lr}  step {:4}  loss {avg:.4}  acc {:.3}",
                (c + 1) * 500,
                bord_accuracy(&m, &store, &seqs, limits.padding_segment())
            );
        }
    }
}

#[test]
#[ignore]
fn probe2_imgfit() {
    for lr in ["1e-3", "3e-3"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        for (k, v) in [("lambda_mlm", "0"), ("lambda_itm", "0"), ("lambda_bord", "0"), ("lambda_bmlm", "0"), ("pretrain_steps", "3000"), ("learning_rate", lr)] {
            cfg.apply_kv(k, v).unwrap();
        }
        let m = cfg.model_config();
        let seqs: Vec<InputSequence> = build2(&spec2(35, 64, (3, 6), (1, 2), wide_vocab(200), 0.0, 1.0))
            .into_iter()
            .filter(InputSequence::has_images)
            .collect();
        eprintln!("imgfit docs with images: {}", seqs.len());
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        for c in 0..6 {
            let logs = pretrain_steps(&cfg, &seqs, &mut store, &mut adam, c * 500, (c + 1) * 500).unwrap();
            let avg: f64 = logs.iter().rev().take(50).map(|l| l.l_imgfit).sum::<f64>() / 50.0;
            eprintln!(
                "imgfit lr {lr}  step {:4}  loss {avg:.4}  acc {:.3}",
                (c + 1) * 500,
                imgfit_accuracy(&m, &store, &seqs)
            );
        }
    }
}

// --- single-objective training probes --------------------------------------

use lampret_core::nnet::lr_at;
use lampret_core::objectives::MlmRecord;
use rand::Rng;

fn empty_mlm(n: usize) -> Vec<MlmRecord> {
    (0..n).map(|_| MlmRecord { positions: vec![], original: vec![] }).collect()
}

fn sample_batch(seqs: &[InputSequence], n: usize, seed: u64, step: u64) -> Vec<InputSequence> {
    let mut rng = stream_rng(seed, step, 0);
    (0..n).map(|_| seqs[rng.random_range(0..seqs.len())].clone()).collect()
}

#[test]
#[ignore]
fn probe3_mlm() {
    for lr in ["1e-3", "3e-3"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.apply_kv("learning_rate", lr).unwrap();
        let m = cfg.model_config();
        let seqs = build2(&spec2(33, 32, (2, 5), (0, 0), CorpusSpec::default_vocab(), 0.0, 0.0));
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        let total_steps = 2000usize;
        for step in 0..total_steps {
            let mut batch = sample_batch(&seqs, cfg.batch_size, cfg.seed, step as u64);
            let mut recs = Vec::with_capacity(batch.len());
            for (d, s) in batch.iter_mut().enumerate() {
                let mut rng = stream_rng(cfg.seed ^ d as u64, step as u64, 1);
                recs.push(corrupt_mlm(s, m.vocab_size, 0.15, &mut rng));
            }
            let rec = BatchCorruption {
                mlm: recs,
                itm: vec![ItmOutcome::NoImages; batch.len()],
                bord: vec![None; batch.len()],
                bmlm: vec![None; batch.len()],
                imgfit: vec![None; batch.len()],
            };
            let tape = Tape::<f32>::new();
            let bnd = store.bind(&tape);
            let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, &batch, &rec, [1.0, 0.0, 0.0, 0.0, 0.0]);
            let grads = tape.backward(losses.total);
            let gmap = bnd.grads(&tape, &grads, &store);
            adam.apply(&mut store, &gmap, lr_at(step, total_steps, cfg.learning_rate));
            if (step + 1) % 400 == 0 {
                eprintln!("mlm lr {lr}  step {:4}  acc {:.3}", step + 1, mlm_accuracy(&m, &store, &seqs));
            }
        }
    }
}

#[test]
#[ignore]
fn probe3_bord() {
    for lr in ["1e-3", "3e-3"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.apply_kv("learning_rate", lr).unwrap();
        let m = cfg.model_config();
        let limits = Limits::default();
        let seqs = build2(&spec2(34, 200, (3, 6), (0, 0), CorpusSpec::default_vocab(), 0.0, 0.0));
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        let total_steps = 3000usize;
        for step in 0..total_steps {
            let mut batch = sample_batch(&seqs, cfg.batch_size, cfg.seed, step as u64);
            let mut bord = Vec::with_capacity(batch.len());
            for (d, s) in batch.iter_mut().enumerate() {
                let mut rng = stream_rng(cfg.seed ^ d as u64, step as u64, 3);
                bord.push(corrupt_block_order(s, limits.padding_segment(), 0.5, &mut rng));
            }
            let n = batch.len();
            let rec = BatchCorruption {
                mlm: empty_mlm(n),
                itm: vec![ItmOutcome::NoImages; n],
                bord,
                bmlm: vec![None; n],
                imgfit: vec![None; n],
            };
            let tape = Tape::<f32>::new();
            let bnd = store.bind(&tape);
            let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, &batch, &rec, [0.0, 0.0, 1.0, 0.0, 0.0]);
            let grads = tape.backward(losses.total);
            let gmap = bnd.grads(&tape, &grads, &store);
            adam.apply(&mut store, &gmap, lr_at(step, total_steps, cfg.learning_rate));
            if (step + 1) % 500 == 0 {
                eprintln!(
                    "bord lr {lr}  step {:4}  loss {:.4}  acc {:.3}",
                    step + 1,
                    tape.scalar_value(losses.bord).to_f64(),
                    bord_accuracy(&m, &store, &seqs, limits.padding_segment())
                );
            }
        }
    }
}

#[test]
#[ignore]
fn probe3_imgfit() {
    for lr in ["1e-3", "3e-3"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.apply_kv("learning_rate", lr).unwrap();
        let m = cfg.model_config();
        let seqs: Vec<InputSequence> = build2(&spec2(35, 64, (3, 6), (1, 2), wide_vocab(200), 0.0, 1.0))
            .into_iter()
            .filter(InputSequence::has_images)
            .collect();
        eprintln!("imgfit docs with images: {}", seqs.len());
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        let total_steps = 3000usize;
        for step in 0..total_steps {
            let mut batch = sample_batch(&seqs, cfg.batch_size, cfg.seed, step as u64);
            let mut rng = stream_rng(cfg.seed, step as u64, 5);
            let imgfit = mask_images_imgfit(&mut batch, m.n_candidates, &mut rng);
            let n = batch.len();
            let rec = BatchCorruption {
                mlm: empty_mlm(n),
                itm: vec![ItmOutcome::NoImages; n],
                bord: vec![None; n],
                bmlm: vec![None; n],
                imgfit,
            };
            let tape = Tape::<f32>::new();
            let bnd = store.bind(&tape);
            let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, &batch, &rec, [0.0, 0.0, 0.0, 0.0, 1.0]);
            let grads = tape.backward(losses.total);
            let gmap = bnd.grads(&tape, &grads, &store);
            adam.apply(&mut store, &gmap, lr_at(step, total_steps, cfg.learning_rate));
            if (step + 1) % 500 == 0 {
                eprintln!(
                    "imgfit lr {lr}  step {:4}  loss {:.4}  acc {:.3}",
                    step + 1,
                    tape.scalar_value(losses.imgfit).to_f64(),
                    imgfit_accuracy(&m, &store, &seqs)
                );
            }
        }
    }
}

// --- post-head-fix probes ---------------------------------------------------

#[test]
#[ignore]
fn probe4_imgfit() {
    for lr in ["1e-3", "3e-3"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.apply_kv("learning_rate", lr).unwrap();
        let m = cfg.model_config();
        let seqs: Vec<InputSequence> = build2(&spec2(35, 64, (3, 6), (1, 2), wide_vocab(200), 0.0, 1.0))
            .into_iter()
            .filter(InputSequence::has_images)
            .collect();
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        let total_steps = 3000usize;
        for step in 0..total_steps {
            let mut batch = sample_batch(&seqs, cfg.batch_size, cfg.seed, step as u64);
            let mut rng = stream_rng(cfg.seed, step as u64, 5);
            let imgfit = mask_images_imgfit(&mut batch, m.n_candidates, &mut rng);
            let n = batch.len();
            let rec = BatchCorruption {
                mlm: empty_mlm(n),
                itm: vec![ItmOutcome::NoImages; n],
                bord: vec![None; n],
                bmlm: vec![None; n],
                imgfit,
            };
            let tape = Tape::<f32>::new();
            let bnd = store.bind(&tape);
            let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, &batch, &rec, [0.0, 0.0, 0.0, 0.0, 1.0]);
            let grads = tape.backward(losses.total);
            let gmap = bnd.grads(&tape, &grads, &store);
            adam.apply(&mut store, &gmap, lr_at(step, total_steps, cfg.learning_rate));
            if (step + 1) % 500 == 0 {
                eprintln!(
                    "imgfit lr {lr}  step {:4}  loss {:.4}  acc {:.3}",
                    step + 1,
                    tape.scalar_value(losses.imgfit).to_f64(),
                    imgfit_accuracy(&m, &store, &seqs)
                );
            }
        }
    }
}

#[test]
#[ignore]
fn probe4_bord_joint() {
    for lr in ["1e-3", "3e-3"] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.apply_kv("learning_rate", lr).unwrap();
        let m = cfg.model_config();
        let limits = Limits::default();
        let seqs = build2(&spec2(34, 200, (3, 6), (0, 0), CorpusSpec::default_vocab(), 0.0, 0.0));
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        let total_steps = 3000usize;
        for step in 0..total_steps {
            let mut batch = sample_batch(&seqs, cfg.batch_size, cfg.seed, step as u64);
            let n = batch.len();
            let mut bord = Vec::with_capacity(n);
            let mut mlm = Vec::with_capacity(n);
            for (d, s) in batch.iter_mut().enumerate() {
                let mut rng_b = stream_rng(cfg.seed ^ d as u64, step as u64, 3);
                bord.push(corrupt_block_order(s, limits.padding_segment(), 0.5, &mut rng_b));
                let mut rng_m = stream_rng(cfg.seed ^ d as u64, step as u64, 1);
                mlm.push(corrupt_mlm(s, m.vocab_size, 0.15, &mut rng_m));
            }
            let rec = BatchCorruption {
                mlm,
                itm: vec![ItmOutcome::NoImages; n],
                bord,
                bmlm: vec![None; n],
                imgfit: vec![None; n],
            };
            let tape = Tape::<f32>::new();
            let bnd = store.bind(&tape);
            let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, &batch, &rec, [1.0, 0.0, 1.0, 0.0, 0.0]);
            let grads = tape.backward(losses.total);
            let gmap = bnd.grads(&tape, &grads, &store);
            adam.apply(&mut store, &gmap, lr_at(step, total_steps, cfg.learning_rate));
            if (step + 1) % 500 == 0 {
                eprintln!(
                    "bord-joint lr {lr}  step {:4}  l_bord {:.4}  acc {:.3}",
                    step + 1,
                    tape.scalar_value(losses.bord).to_f64(),
                    bord_accuracy(&m, &store, &seqs, limits.padding_segment())
                );
            }
        }
    }
}

use lampret_core::objectives::sample_itm;

#[test]
#[ignore]
fn probe5_imgfit_joint() {
    // variant A: MLM+ITM+IMGFIT; variant B: MLM+IMGFIT
    for (label, with_itm) in [("mlm+itm+imgfit", true), ("mlm+imgfit", false)] {
        let cfg = RunConfig::for_profile(Profile::Desk);
        let m = cfg.model_config();
        let seqs: Vec<InputSequence> = build2(&spec2(35, 64, (3, 6), (1, 2), wide_vocab(200), 0.0, 1.0))
            .into_iter()
            .filter(InputSequence::has_images)
            .collect();
        let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
        let mut adam = Adam::new(&store);
        let total_steps = 3000usize;
        for step in 0..total_steps {
            let mut batch = sample_batch(&seqs, cfg.batch_size, cfg.seed, step as u64);
            let n = batch.len();
            let itm = if with_itm {
                let mut rng = stream_rng(cfg.seed, step as u64, 2);
                sample_itm(&mut batch, 0.5, &mut rng)
            } else {
                vec![ItmOutcome::NoImages; n]
            };
            let mut mlm = Vec::with_capacity(n);
            for (d, s) in batch.iter_mut().enumerate() {
                let mut rng_m = stream_rng(cfg.seed ^ d as u64, step as u64, 1);
                mlm.push(corrupt_mlm(s, m.vocab_size, 0.15, &mut rng_m));
            }
            let mut rng_f = stream_rng(cfg.seed, step as u64, 5);
            let mut imgfit = mask_images_imgfit(&mut batch, m.n_candidates, &mut rng_f);
            // an ITM-swapped doc's "gold" image is a stranger: skip it
            for (f, o) in imgfit.iter_mut().zip(&itm) {
                if matches!(o, ItmOutcome::Swapped { .. }) {
                    *f = None;
                }
            }
            let rec = BatchCorruption {
                mlm,
                itm,
                bord: vec![None; n],
                bmlm: vec![None; n],
                imgfit,
            };
            let lam = if with_itm { [1.0, 1.0, 0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0, 0.0, 1.0] };
            let tape = Tape::<f32>::new();
            let bnd = store.bind(&tape);
            let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, &batch, &rec, lam);
            let grads = tape.backward(losses.total);
            let gmap = bnd.grads(&tape, &grads, &store);
            adam.apply(&mut store, &gmap, lr_at(step, total_steps, cfg.learning_rate));
            if (step + 1) % 500 == 0 {
                eprintln!(
                    "{label}  step {:4}  l_imgfit {:.4}  acc {:.3}",
                    step + 1,
                    tape.scalar_value(losses.imgfit).to_f64(),
                    imgfit_accuracy(&m, &store, &seqs)
                );
            }
        }
    }
}

/// Can IMG-FIT memorize one fixed corrupted batch? Distinguishes a wiring bug
/// from a missing corpus signal.
#[test]
#[ignore]
fn probe6_imgfit_overfit_one_batch() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let m = cfg.model_config();
    let seqs: Vec<InputSequence> = build2(&spec2(35, 64, (3, 6), (1, 2), wide_vocab(200), 0.0, 1.0))
        .into_iter()
        .filter(InputSequence::has_images)
        .take(8)
        .collect();
    let mut batch = seqs.clone();
    let mut rng = stream_rng(4242, 0, 5);
    let imgfit = mask_images_imgfit(&mut batch, m.n_candidates, &mut rng);
    let n = batch.len();
    eprintln!("assignments: {}", imgfit.iter().filter(|r| r.is_some()).count());
    let rec = BatchCorruption {
        mlm: empty_mlm(n),
        itm: vec![ItmOutcome::NoImages; n],
        bord: vec![None; n],
        bmlm: vec![None; n],
        imgfit,
    };
    let mut store: ParamStore<f32> = init_params(&m, cfg.seed);
    let mut adam = Adam::new(&store);
    for step in 0..600 {
        let tape = Tape::<f32>::new();
        let bnd = store.bind(&tape);
        let losses = five_losses(&tape, &bnd, &m, AggregatorKind::Lampret, &batch, &rec, [0.0, 0.0, 0.0, 0.0, 1.0]);
        let grads = tape.backward(losses.total);
        let gmap = bnd.grads(&tape, &grads, &store);
        adam.apply(&mut store, &gmap, 1e-3);
        if step % 50 == 0 {
            eprintln!("step {step:3}  l_imgfit {:.4}", tape.scalar_value(losses.imgfit).to_f64());
        }
    }
}

/// Are visual embeddings distinct and on the same scale as context reps?
#[test]
#[ignore]
fn probe7_visual_embed_stats() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let m = cfg.model_config();
    let seqs: Vec<InputSequence> = build2(&spec2(35, 16, (3, 6), (1, 2), wide_vocab(200), 0.0, 1.0))
        .into_iter()
        .filter(InputSequence::has_images)
        .collect();
    let store: ParamStore<f32> = init_params(&m, cfg.seed);
    let tape = Tape::<f32>::new();
    let b = store.bind(&tape);
    let images: Vec<_> = seqs.iter().flat_map(|s| s.images.iter().cloned()).take(12).collect();
    let embs: Vec<Vec<f32>> = images
        .iter()
        .map(|img| tape.value2(visual_embed(&tape, &b, img, &m)).row(0).to_vec())
        .collect();
    let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
    for (i, e) in embs.iter().enumerate() {
        eprintln!("ve[{i}] norm {:.4}", norm(e));
    }
    let mut dmin = f32::MAX;
    let mut dmax: f32 = 0.0;
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            let d = norm(&embs[i].iter().zip(&embs[j]).map(|(a, b)| a - b).collect::<Vec<_>>());
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
    }
    eprintln!("pairwise ve distance min {dmin:.6} max {dmax:.6}");
    // context scale for comparison
    let s = &seqs[0];
    let lower = lower_forward(&tape, s, &b, &m);
    let blkh = extract_block_reps(&tape, lower, &s.cls_positions);
    let out = aggregate(&tape, &b, &m, AggregatorKind::Lampret, s, blkh);
    let og = tape.value2(out.out_global).row(0).to_vec();
    eprintln!("out_global norm {:.4}", norm(&og));
}
