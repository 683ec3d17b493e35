use super::*;
use crate::dataset::{self, Split, Vocabulary};
use crate::optics;
use rand::Rng;

fn small_vocab() -> Vocabulary {
    Vocabulary::from_tokens((1..10).map(|i| format!("t{i}"))).unwrap()
}

fn ent(tokens: &[usize], y: bool) -> Example {
    Example {
        tokens: tokens.to_vec(),
        target: Target::Entanglement(y),
    }
}

fn srv(tokens: &[usize], n: u32, m: u32, k: u32) -> Example {
    Example {
        tokens: tokens.to_vec(),
        target: Target::Srv(SrvLabel::new(n, m, k).unwrap()),
    }
}

/// Finite-difference oracle over every parameter. Returns the worst
/// violation of `|a - b| <= rel * max(|a|, |b|) + abs`.
fn gradient_check(model: &LstmModel, batch: &[&Example], rel: f64, abs: f64) -> f64 {
    let (_, grads) = model.loss_and_gradients(batch, ExecMode::Sequential).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let mut flat_index = 0;
    for tensor in 0..6 {
        let len = model.params.slices()[tensor].len();
        for i in 0..len {
            let orig = model.params.slices()[tensor][i];
            let h = 1e-5;
            probe.params.slices_mut()[tensor][i] = orig + h;
            let up = probe.mean_loss(batch, ExecMode::Sequential).unwrap();
            probe.params.slices_mut()[tensor][i] = orig - h;
            let down = probe.mean_loss(batch, ExecMode::Sequential).unwrap();
            probe.params.slices_mut()[tensor][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[flat_index];
            let excess = (a - fd).abs() - (rel * a.abs().max(fd.abs()) + abs);
            worst = worst.max(excess);
            flat_index += 1;
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_entanglement() {
    let v = small_vocab();
    let model = LstmModel::new(&v, 4, 8, Task::Entanglement, 3);
    let a = ent(&[1, 4, 2, 9, 3], true);
    let b = ent(&[5, 5, 7], false);
    assert!(gradient_check(&model, &[&a, &b], 1e-5, 1e-9) <= 0.0);
}

#[test]
fn gradients_match_finite_differences_srv() {
    let v = small_vocab();
    let model = LstmModel::new(&v, 4, 8, Task::Srv, 4);
    let a = srv(&[2, 3, 8, 1, 6, 6], 4, 2, 2);
    let b = srv(&[9, 1], 3, 3, 1);
    assert!(gradient_check(&model, &[&a, &b], 1e-5, 1e-9) <= 0.0);
}

#[test]
fn gradients_match_for_random_models() {
    let v = small_vocab();
    let mut rng = crate::rng::stream(17, crate::rng::Stream::Generation);
    for trial in 0..4 {
        let task = if trial % 2 == 0 { Task::Entanglement } else { Task::Srv };
        let model = LstmModel::new(&v, 4, 8, task, 100 + trial);
        let exs: Vec<Example> = (0..3)
            .map(|_| {
                let len = rng.gen_range(1..=6);
                let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(1..10)).collect();
                match task {
                    Task::Entanglement => ent(&toks, rng.gen_bool(0.5)),
                    Task::Srv => {
                        let n = rng.gen_range(2..9);
                        let m = rng.gen_range(1..=n);
                        let k = rng.gen_range(1..=m);
                        srv(&toks, n, m, k)
                    }
                }
            })
            .collect();
        let refs: Vec<&Example> = exs.iter().collect();
        let w = gradient_check(&model, &refs, 1e-5, 1e-9);
        assert!(w <= 0.0, "trial {trial}: {w}");
    }
}

#[test]
fn zero_model_outputs_one_half() {
    let v = small_vocab();
    let model = LstmModel::zeroed(&v, 4, 8, Task::Entanglement);
    for seq in [&[1usize][..], &[3, 4, 5], &[9, 9, 9, 9, 1]] {
        assert_eq!(model.forward(seq).unwrap(), HeadOutput::Entanglement(0.5));
    }
}

#[test]
fn outputs_are_strict_probabilities() {
    let v = small_vocab();
    let mut rng = crate::rng::stream(5, crate::rng::Stream::Generation);
    for i in 0..1000 {
        let model = LstmModel::new(&v, 4, 8, Task::Entanglement, i);
        let len = rng.gen_range(1..8);
        let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(1..10)).collect();
        let p = model.forward(&toks).unwrap().probability().unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn empty_sequence_is_rejected() {
    let v = small_vocab();
    let model = LstmModel::new(&v, 4, 8, Task::Entanglement, 1);
    assert!(matches!(model.forward(&[]), Err(Error::Structural(_))));
    assert!(model.forward(&[0]).is_err());
    assert!(model.forward(&[10]).is_err());
}

#[test]
fn bce_of_half_is_ln2() {
    let v = small_vocab();
    let model = LstmModel::zeroed(&v, 4, 8, Task::Entanglement);
    let a = ent(&[1, 2], true);
    let (loss, _) = model.loss_and_gradients(&[&a], ExecMode::Sequential).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn duplicated_sample_keeps_mean_loss() {
    let v = small_vocab();
    let model = LstmModel::new(&v, 4, 8, Task::Srv, 9);
    let a = srv(&[1, 2, 3], 5, 4, 2);
    let (one, g1) = model.loss_and_gradients(&[&a], ExecMode::Sequential).unwrap();
    let (two, g2) = model.loss_and_gradients(&[&a, &a], ExecMode::Sequential).unwrap();
    assert!((one - two).abs() < 1e-14, "{one} {two}");
    let diff: f64 = g1
        .slices()
        .iter()
        .zip(g2.slices())
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    assert!(diff < 1e-14);
}

#[test]
fn incremental_stepping_is_exact() {
    let v = small_vocab();
    let model = LstmModel::new(&v, 4, 8, Task::Entanglement, 2);
    let seq = [3, 1, 4, 1, 5];
    let whole = model.run(&[3, 1, 4, 1, 5, 9]).unwrap();
    let prefix = model.run(&seq).unwrap();
    let stepped = model.step(&prefix, 9).unwrap();
    assert_eq!(whole, stepped);
}

#[test]
fn batched_prediction_matches_single() {
    let v = small_vocab();
    let model = LstmModel::new(&v, 4, 8, Task::Srv, 6);
    let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7], vec![8, 9, 1, 2], vec![3, 3, 3]];
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batched = model.predict_sequences(&refs, ExecMode::Parallel).unwrap();
    for (s, b) in seqs.iter().zip(&batched) {
        let single = model.forward(s).unwrap();
        let (HeadOutput::Srv(x), HeadOutput::Srv(y)) = (single, *b) else {
            panic!()
        };
        for i in 0..3 {
            assert!((x.raw[i] - y.raw[i]).abs() < 1e-12);
        }
    }
    let again = model.predict_sequences(&refs, ExecMode::Sequential).unwrap();
    assert_eq!(batched, again);
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let v = small_vocab();
    let model = LstmModel::new(&v, 4, 8, Task::Entanglement, 8);
    let exs = [
        ent(&[1, 2], true),
        ent(&[3, 4, 5], false),
        ent(&[6, 7], false),
        ent(&[9], true),
    ];
    let refs: Vec<&Example> = exs.iter().collect();
    let (l1, g1) = model.loss_and_gradients(&refs, ExecMode::Sequential).unwrap();
    let (l2, g2) = model.loss_and_gradients(&refs, ExecMode::Parallel).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

fn toy_records(n: usize, seed: u64, randomize: bool) -> Vec<Record> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Generation);
    (0..n)
        .map(|i| {
            let setup = optics::random_setup(crate::rng::mix_seed(seed, i as u64), (6, 15), 3);
            let text = setup.to_string();
            let y = if randomize {
                rng.gen_bool(0.5)
            } else {
                text.split_whitespace().any(|t| t == "HOLO(a,+1)")
            };
            Record {
                setup: text,
                y_e: y,
                srv: None,
                fold_rank: 0,
                split: Split::Train,
                fold: None,
            }
        })
        .collect()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        task: Task::Entanglement,
        learning_rate: 0.5,
        batch_size: 32,
        max_updates: 500,
        eval_every: 50,
        hidden: 16,
        embed: 8,
        early_stop_patience: 0,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn plain_sgd_step_is_exact() {
    let v = Vocabulary::toolbox(3);
    let recs = toy_records(50, 3, false);
    let cfg = TrainConfig {
        momentum: 0.0,
        learning_rate: 1.0,
        max_updates: 1,
        grad_clip: None,
        validation_fraction: 0.0,
        batch_size: 8,
        ..toy_config()
    };
    let model = LstmModel::new(&v, cfg.embed, cfg.hidden, cfg.task, 4);
    // reproduce the first batch the trainer will draw
    let exs = examples_for(&recs, &v, Task::Entanglement).unwrap();
    let mut stream = dataset::balanced_batches(&recs, Task::Entanglement, 8, cfg.seed).unwrap();
    let batch: Vec<&Example> = stream.next_batch().into_iter().map(|i| &exs[i].1).collect();
    let (_, grads) = model.loss_and_gradients(&batch, ExecMode::Sequential).unwrap();
    let mut expected = model.params.clone();
    expected.add_scaled(-1.0, &grads);
    let out = train(model, &recs, &v, &cfg, ExecMode::Parallel).unwrap();
    assert_eq!(out.model.params, expected);
}

#[test]
fn training_is_deterministic() {
    let v = Vocabulary::toolbox(3);
    let recs = toy_records(400, 5, false);
    let cfg = TrainConfig {
        max_updates: 60,
        eval_every: 20,
        ..toy_config()
    };
    let run = |mode| {
        let m = LstmModel::new(&v, cfg.embed, cfg.hidden, cfg.task, cfg.seed);
        train(m, &recs, &v, &cfg, mode).unwrap()
    };
    let a = run(ExecMode::Parallel);
    let b = run(ExecMode::Sequential);
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history.rows.len(), 3);
}

fn accuracy(model: &LstmModel, recs: &[Record], v: &Vocabulary) -> f64 {
    let preds = model.predict_batch(recs, v, ExecMode::Parallel).unwrap();
    let hits = preds
        .iter()
        .zip(recs)
        .filter(|(p, r)| (p.probability().unwrap() > 0.5) == r.y_e)
        .count();
    hits as f64 / recs.len() as f64
}

#[test]
fn learns_separable_toy_problem() {
    let v = Vocabulary::toolbox(3);
    let recs = toy_records(2000, 7, false);
    let cfg = TrainConfig {
        validation_fraction: 0.0,
        ..toy_config()
    };
    let model = LstmModel::new(&v, cfg.embed, cfg.hidden, cfg.task, cfg.seed);
    let out = train(model, &recs, &v, &cfg, ExecMode::Parallel).unwrap();
    assert!(out.updates_run <= 500);
    let acc = accuracy(&out.model, &recs, &v);
    assert!(acc >= 0.99, "accuracy {acc}");

    // order sensitivity: swapping two distinct tokens moves the output
    let seq = v.encode(recs[0].tokens()).unwrap();
    let (i, j) = (0..seq.len())
        .flat_map(|i| (i + 1..seq.len()).map(move |j| (i, j)))
        .find(|&(i, j)| seq[i] != seq[j])
        .unwrap();
    let mut swapped = seq.clone();
    swapped.swap(i, j);
    let a = out.model.forward(&seq).unwrap().probability().unwrap();
    let b = out.model.forward(&swapped).unwrap().probability().unwrap();
    assert!((a - b).abs() > 1e-9);
}

#[test]
fn random_labels_do_not_leak() {
    let v = Vocabulary::toolbox(3);
    let recs = toy_records(4000, 9, true);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        max_updates: 2000,
        eval_every: 250,
        validation_fraction: 0.25,
        ..toy_config()
    };
    let model = LstmModel::new(&v, cfg.embed, cfg.hidden, cfg.task, cfg.seed);
    let out = train(model, &recs, &v, &cfg, ExecMode::Parallel).unwrap();
    let last = out.history.rows.last().unwrap();
    assert!(last.val_loss >= 0.67, "{:?}", out.history);
    assert!((last.val_loss - std::f64::consts::LN_2).abs() < 0.05);
}

#[test]
fn vocabulary_mismatch_is_reported() {
    let model = LstmModel::new(&Vocabulary::toolbox(3), 4, 8, Task::Entanglement, 1);
    let recs = toy_records(3, 1, false);
    let other = Vocabulary::toolbox(2);
    assert!(matches!(
        model.predict_batch(&recs, &other, ExecMode::Sequential),
        Err(Error::Vocabulary(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let v = Vocabulary::toolbox(3);
    let model = LstmModel::new(&v, 5, 7, Task::Srv, 12);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model).unwrap();
    assert_eq!(&buf[..4], b"MSRG");
    assert_eq!(buf.len(), 40 + 8 * model.params.len());
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back, model);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad[..]).is_err());
    assert!(read_checkpoint(&buf[..buf.len() - 8]).is_err());
}

#[test]
fn task_models_share_no_parameters() {
    let v = Vocabulary::toolbox(3);
    let a = LstmModel::new(&v, 4, 8, Task::Entanglement, 1);
    let b = LstmModel::new(&v, 4, 8, Task::Srv, 1);
    assert_eq!(a.params.head_w.ncols(), 1);
    assert_eq!(b.params.head_w.ncols(), 3);
}

#[test]
fn paper_scale_reference_config() {
    let c = TrainConfig::paper_scale(Task::Entanglement);
    assert_eq!(
        (c.hidden, c.embed, c.batch_size, c.max_updates),
        (2048, 64, 128, 40_000)
    );
    assert_eq!(c.momentum, 0.5);
    assert_eq!(TrainConfig::paper_scale(Task::Srv).max_updates, 14_000);
}
