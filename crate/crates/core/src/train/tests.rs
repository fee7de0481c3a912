use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Vocab;
use crate::model::Mode;

fn vocab() -> Vocab {
    let mut v = Vocab::new();
    for w in ["a", "b", "c", "d", "e", "f", "g", "h"] {
        v.add(w);
    }
    v
}

fn corpus() -> Vec<Vec<u32>> {
    (0..18u32).map(|i| (0..1 + i % 5).map(|j| 4 + (i + j) % 8).collect()).collect()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps: Some(10),
        d_model: 16,
        heads: 2,
        layers: 1,
        slots: 2,
        d_sem: 8,
        d_syn: 4,
        d_id: 4,
        max_len: 6,
        sem_anneal: (2, 4),
        syn_anneal: (5, 8),
        dropout: 0.1,
        seed: 5,
        log_wall_time: false,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_are_valid() {
    let c = TrainConfig::default();
    c.validate().unwrap();
    assert_eq!((c.beta_sem_final, c.beta_syn_final, c.lambda_fb), (0.6, 0.3, 0.05));
    assert_eq!((c.sem_anneal, c.syn_anneal), ((3000, 6000), (7000, 20000)));
    let s = c.scaled_schedule(0.1);
    assert_eq!((s.sem_anneal, s.syn_anneal), ((300, 600), (700, 2000)));
}

#[test]
fn config_parses_and_reports_line_of_bad_key() {
    let c = TrainConfig::parse("# comment\nlr = 0.01\nsem_anneal = 10, 20\nsyn_anneal=30,40\nmode = advae\nsteps = 7\n").unwrap();
    assert_eq!(c.lr, 0.01);
    assert_eq!((c.sem_anneal, c.syn_anneal, c.mode, c.steps), ((10, 20), (30, 40), Mode::Advae, Some(7)));
    assert!(matches!(TrainConfig::parse("lr = 1\nwarmup = 3\n"), Err(TrainError::Config { line: 2, .. })));
    assert!(matches!(TrainConfig::parse("lr = fast\n"), Err(TrainError::Config { line: 1, .. })));
    assert!(matches!(TrainConfig::parse("lr\n"), Err(TrainError::Config { line: 1, .. })));
    assert!(TrainConfig::parse("sem_anneal = 10,2\n").is_err());
    assert!(TrainConfig::parse("sem_anneal = 10,8000\n").is_err());
    assert!(TrainConfig::parse("optimizer = rmsprop\n").is_err());
    assert_eq!(TrainConfig::parse("optimizer = sgd\n").unwrap().optimizer, Optimizer::Sgd);
}

#[test]
fn every_documented_key_is_accepted() {
    let values = |k: &str| match k {
        "sem_anneal" => "1,2",
        "syn_anneal" => "3,4",
        "optimizer" => "adam",
        "log_wall_time" => "false",
        "mode" => "qkvae",
        "dropout" | "grad_clip" | "lambda_fb" | "adam_beta1" | "adam_beta2" | "adam_eps" => "0.1",
        _ => "8",
    };
    let text: String = CONFIG_KEYS.iter().map(|k| format!("{k} = {}\n", values(k))).collect();
    TrainConfig::parse(&text).unwrap();
}

proptest! {
    #[test]
    fn syntactic_weight_waits_for_full_semantic_weight(
        a in 0u64..1000, len_a in 1u64..1000, gap in 0u64..1000, len_b in 1u64..1000,
        bs in 0.01f64..2.0, by in 0.01f64..2.0, step in 0u64..5000,
    ) {
        let cfg = TrainConfig {
            sem_anneal: (a, a + len_a),
            syn_anneal: (a + len_a + gap, a + len_a + gap + len_b),
            beta_sem_final: bs,
            beta_syn_final: by,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        let (s, y) = (cfg.sem_schedule().beta_at(step), cfg.syn_schedule().beta_at(step));
        if y > 0.0 {
            prop_assert_eq!(s, bs);
        }
        prop_assert!((0.0..=bs).contains(&s) && (0.0..=by).contains(&y));
    }
}

fn batch() -> TokenBatch {
    TokenBatch::new(&corpus()[..5], 6).unwrap()
}

#[test]
fn loss_is_exactly_nll_while_betas_are_zero() {
    let t = Trainer::<f64>::new(tiny_cfg(), vocab(), corpus()).unwrap();
    let mut g = Graph::frozen(&t.model.store);
    let (loss, m) = elbo_loss(&mut g, &t.model, &batch(), 0, &t.cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!((m.beta_sem, m.beta_syn), (0.0, 0.0));
    assert_eq!(g.value(loss).data()[0], m.nll);
    assert!(m.kl_sem > 0.0 && m.kl_syn > 0.0);
}

#[test]
fn kl_terms_match_independent_computation() {
    let t = Trainer::<f64>::new(tiny_cfg(), vocab(), corpus()).unwrap();
    let b = batch();
    let step = 6;
    let mut g = Graph::frozen(&t.model.store);
    let (loss, m) = elbo_loss(&mut g, &t.model, &b, step, &t.cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let loss = g.value(loss).data()[0];
    assert_eq!(m.beta_sem, 0.6);
    assert!((m.beta_syn - 0.1).abs() < 1e-12);
    let post = t.model.encode_batch(b_seqs(&b).as_slice()).unwrap();
    let per_dim = |views: Vec<Vec<(f64, f64)>>| -> Vec<f64> {
        let n = views.len() as f64;
        (0..views[0].len())
            .map(|d| views.iter().map(|v| { let (mu, s) = v[d]; 0.5 * (mu * mu + s * s - 1.0) - s.ln() }).sum::<f64>() / n)
            .collect()
    };
    let sem = per_dim(post.iter().map(|p| p.sem.iter().flat_map(|q| q.mean().iter().copied().zip(q.std().iter().copied())).collect()).collect());
    let syn = per_dim(post.iter().map(|p| { let q = p.syn.as_ref().unwrap(); q.mean().iter().copied().zip(q.std().iter().copied()).collect() }).collect());
    let fb = |v: &[f64]| v.iter().map(|&k| k.max(0.05)).sum::<f64>();
    assert!((m.kl_sem - sem.iter().sum::<f64>()).abs() < 1e-9);
    assert!((m.kl_syn - syn.iter().sum::<f64>()).abs() < 1e-9);
    let expected = m.nll + 0.6 * fb(&sem) + m.beta_syn * fb(&syn);
    assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
}

fn b_seqs(b: &TokenBatch) -> Vec<Vec<u32>> {
    (0..b.batch).map(|i| b.enc_ids[i * b.enc_len..i * b.enc_len + b.enc_lengths[i]].to_vec()).collect()
}

#[test]
fn adam_ignores_zero_gradients_and_matches_first_step() {
    let t = Trainer::<f64>::new(tiny_cfg(), vocab(), corpus()).unwrap();
    let mut store = t.model.store.clone();
    let mut st = AdamState::new(&store);
    let id = store.find("head.w").unwrap();
    let before = store.get(id).clone();
    let zero = vec![(id, vec![0.0; before.numel()])];
    adam_step(&mut store, &zero, &mut st, 0.01, 0.9, 0.999, 1e-8).unwrap();
    assert_eq!(store.get(id), &before);
    let mut st = AdamState::new(&store);
    let grad: Vec<f64> = (0..before.numel()).map(|i| (i as f64 - 7.0) * 0.3).collect();
    adam_step(&mut store, &[(id, grad.clone())], &mut st, 0.01, 0.9, 0.999, 1e-8).unwrap();
    for ((w, w0), g) in store.get(id).data().iter().zip(before.data()).zip(&grad) {
        assert!((w - (w0 - 0.01 * g / (g.abs() + 1e-8))).abs() < 1e-12);
    }
    assert_eq!(st.t, 1);
    let mut wrong = AdamState::<f64> { m: vec![], v: vec![], t: 0 };
    assert!(matches!(adam_step(&mut store, &[], &mut wrong, 0.01, 0.9, 0.999, 1e-8), Err(TrainError::StateMismatch(_))));
}

#[test]
fn small_gradient_step_lowers_the_loss() {
    let t = Trainer::<f64>::new(tiny_cfg(), vocab(), corpus()).unwrap();
    let b = batch();
    let step = 6;
    let loss_of = |store: &crate::nn::ParamStore<f64>| -> (f64, Vec<(crate::nn::ParamId, Vec<f64>)>) {
        let mut g = Graph::new(store);
        let (l, _) = elbo_loss(&mut g, &t.model, &b, step, &t.cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let v = g.value(l).data()[0];
        g.backward(l).unwrap();
        (v, g.param_grads().into_iter().map(|(i, gr)| (i, gr.to_vec())).collect())
    };
    let (l0, grads) = loss_of(&t.model.store);
    let mut m = t.model.clone();
    sgd_step(&mut m.store, &grads, 1e-3);
    let mut g = Graph::frozen(&m.store);
    let (l1, _) = elbo_loss(&mut g, &m, &b, step, &t.cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(g.value(l1).data()[0] < l0);
}

fn run(cfg: TrainConfig, steps: u64) -> (Trainer<f32>, Vec<StepMetrics>) {
    let mut t = Trainer::<f32>::new(cfg, vocab(), corpus()).unwrap();
    let mut log = Vec::new();
    for _ in 0..steps {
        log.push(t.train_step().unwrap());
    }
    (t, log)
}

#[test]
fn resumed_training_is_bit_identical() {
    let (full, full_log) = run(tiny_cfg(), 10);
    let (half, mut log) = run(tiny_cfg(), 4);
    let bytes = half.to_checkpoint().to_bytes();
    let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ck, tiny_cfg(), corpus()).unwrap();
    assert_eq!(resumed.step, 4);
    while resumed.step < 10 {
        log.push(resumed.train_step().unwrap());
    }
    assert_eq!(log, full_log);
    assert_eq!(resumed.to_checkpoint().to_bytes(), full.to_checkpoint().to_bytes());
}

#[test]
fn metric_log_is_deterministic() {
    let once = || {
        let mut t = Trainer::<f32>::new(tiny_cfg(), vocab(), corpus()).unwrap();
        let mut sink = TsvSink::new(Vec::new(), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let plan = CheckpointPlan { dir: dir.path().to_path_buf(), every: 3 };
        train_loop(&mut t, &mut sink, Some(&plan)).unwrap();
        (sink.into_inner(), std::fs::read(plan.latest()).unwrap())
    };
    let (a, ca) = once();
    let (b, cb) = once();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRIC_HEADER);
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn different_seeds_give_different_runs() {
    let (_, a) = run(tiny_cfg(), 3);
    let (_, b) = run(TrainConfig { seed: 6, ..tiny_cfg() }, 3);
    assert_ne!(a, b);
}

#[test]
fn epochs_cover_the_corpus_once() {
    let mut t = Trainer::<f32>::new(tiny_cfg(), vocab(), corpus()).unwrap();
    assert_eq!(t.batches_per_epoch(), 5);
    let mut seen: Vec<Vec<u32>> = (0..5).flat_map(|s| t.batch_at(s)).collect();
    let mut all = corpus();
    seen.sort();
    all.sort();
    assert_eq!(seen, all);
    assert_ne!(t.batch_at(0), t.batch_at(5));
}

#[test]
fn non_finite_loss_aborts_without_touching_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let plan = CheckpointPlan { dir: dir.path().to_path_buf(), every: 2 };
    let mut t = Trainer::<f32>::new(TrainConfig { steps: Some(2), ..tiny_cfg() }, vocab(), corpus()).unwrap();
    train_loop(&mut t, &mut Vec::new(), Some(&plan)).unwrap();
    let saved = std::fs::read(plan.latest()).unwrap();
    t.cfg.steps = Some(10);
    let id = t.model.store.find("head.w").unwrap();
    t.model.store.get_mut(id).data_mut()[0] = f32::NAN;
    let err = train_loop(&mut t, &mut Vec::new(), Some(&plan)).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { term: "nll", step: 2 }), "{err}");
    assert_eq!(t.step, 2);
    assert_eq!(std::fs::read(plan.latest()).unwrap(), saved);
}

#[test]
fn evaluation_reports_nll_and_accuracy() {
    let t = Trainer::<f64>::new(tiny_cfg(), vocab(), corpus()).unwrap();
    let (nll, acc) = t.evaluate(&corpus()).unwrap();
    assert!(nll > 0.0 && nll.is_finite());
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn overlong_and_empty_sentences_are_dropped() {
    let mut c = corpus();
    c.push(vec![4; 7]);
    c.push(vec![]);
    let t = Trainer::<f32>::new(tiny_cfg(), vocab(), c).unwrap();
    assert_eq!(t.corpus().len(), 18);
    assert!(matches!(Trainer::<f32>::new(tiny_cfg(), vocab(), vec![vec![4; 9]]), Err(TrainError::EmptyCorpus)));
}

#[test]
fn advae_training_has_no_syntactic_kl() {
    let (_, log) = run(TrainConfig { mode: Mode::Advae, ..tiny_cfg() }, 7);
    assert!(log.iter().all(|m| m.kl_syn == 0.0 && m.kl_sem > 0.0));
}

#[test]
fn clipping_bounds_global_norm() {
    let id = crate::nn::ParamStore::<f64>::new().add("w", Tensor::zeros(&[2]));
    let mut g = vec![(id, vec![3.0f64, 4.0])];
    clip(&mut g, 1.0);
    assert!((g[0].1[0] - 0.6).abs() < 1e-12 && (g[0].1[1] - 0.8).abs() < 1e-12);
    clip(&mut g, 0.0);
    assert!((g[0].1[0] - 0.6).abs() < 1e-12);
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let r = elbo_grad_check(6, 12, 2).unwrap();
    assert_eq!(r.coordinates, 72);
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}
