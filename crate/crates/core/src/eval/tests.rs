use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
use proptest::strategy::Strategy as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::TripletRecord;
use crate::model::{Mode, ModelConfig};

#[path = "../../tests/common/tai.rs"]
mod tai;

fn t(s: &str) -> ConstTree {
    parse_bracketed(s).unwrap()
}

#[test]
fn parses_nested_brackets() {
    let tree = t("(S (NP (DT the) (NN dog)) (VP (VBZ barks)) (. .))");
    assert_eq!(tree.label, "S");
    assert_eq!(tree.children.len(), 3);
    assert_eq!(tree.leaves(), vec!["the", "dog", "barks", "."]);
    assert_eq!(tree.size(), 11);
    assert_eq!(tree.depth(), 4);
    assert_eq!(t("(X)"), ConstTree::leaf("X"));
    assert_eq!(t("  (A b c)\n"), ConstTree::node("A", vec![ConstTree::leaf("b"), ConstTree::leaf("c")]));
}

#[test]
fn parse_errors_report_offsets() {
    assert_eq!(parse_bracketed(""), Err(ParseError::UnexpectedEnd(0)));
    assert_eq!(parse_bracketed("S x"), Err(ParseError::ExpectedOpen(0)));
    assert_eq!(parse_bracketed("(S (NP x)"), Err(ParseError::UnexpectedEnd(9)));
    assert_eq!(parse_bracketed("(S ())"), Err(ParseError::EmptyBrackets(3)));
    assert_eq!(parse_bracketed("(S x))"), Err(ParseError::Unbalanced(5)));
    assert_eq!(parse_bracketed("(S x) (T y)"), Err(ParseError::Trailing(6)));
}

#[test]
fn display_round_trips() {
    for s in ["(S (NP (DT the) (NN dog)) (VP (VBZ barks)) (. .))", "(X)", "(A b (C d e) f)"] {
        assert_eq!(t(s).to_string(), s);
        assert_eq!(t(&t(s).to_string()), t(s));
    }
}

#[test]
fn truncate_keeps_top_levels() {
    let tree = t("(S (NP (DT the) (NN dog)) (VP (VBZ barks)))");
    assert_eq!(tree.truncate(1), ConstTree::leaf("S"));
    assert_eq!(tree.truncate(2).to_string(), "(S NP VP)");
    assert_eq!(tree.truncate(10), tree);
}

#[test]
fn edit_distance_examples() {
    let a = t("(S (NP x) (VP y))");
    assert_eq!(tree_edit_distance(&a, &a), 0);
    assert_eq!(tree_edit_distance(&a, &t("(S (NP x) (VP z))")), 1);
    assert_eq!(tree_edit_distance(&a, &t("(S (NP x) (VP y) (. .))")), 2);
    assert_eq!(tree_edit_distance(&a, &t("(S (NP x) y)")), 1);
    assert_eq!(tree_edit_distance(&ConstTree::leaf("a"), &t("(b c d)")), 3);
    // Classic example: f(d(a c(b)) e) vs f(c(d(a b)) e).
    let x = t("(f (d a (c b)) e)");
    let y = t("(f (c (d a b)) e)");
    assert_eq!(tree_edit_distance(&x, &y), 2);
    assert_eq!(tai::tai_distance(&x, &y), 2);
}

#[test]
fn edit_distance_matches_exhaustive_mappings() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..150 {
        let a = tai::random_tree(&mut rng, 6);
        let b = tai::random_tree(&mut rng, 6);
        assert_eq!(tree_edit_distance(&a, &b), tai::tai_distance(&a, &b), "{a} vs {b}");
    }
}

fn arb_tree() -> impl proptest::strategy::Strategy<Value = ConstTree> {
    any::<u64>().prop_map(|s| tai::random_tree(&mut ChaCha8Rng::seed_from_u64(s), 9))
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in arb_tree(), b in arb_tree(), c in arb_tree()) {
        let d = tree_edit_distance;
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.size() + b.size());
        prop_assert!(d(&a, &b) >= a.size().abs_diff(b.size()));
    }

    #[test]
    fn template_match_is_monotone_in_depth(a in arb_tree(), b in arb_tree(), k in 1usize..6) {
        if template_match(&a, &b, k + 1) {
            prop_assert!(template_match(&a, &b, k));
        }
        prop_assert!(template_match(&a, &a, k));
        prop_assert_eq!(template_match(&a, &b, k), template_match(&b, &a, k));
        prop_assert_eq!(template_match(&a, &b, k), a.truncate(k) == b.truncate(k));
    }
}

#[test]
fn template_match_examples() {
    let a = t("(S (NP (DT the) (NN dog)) (VP (VBZ barks)) (. .))");
    let b = t("(S (NP (NNP Rex)) (VP (VBD barked) (ADVP loudly)) (. .))");
    assert!(template_match(&a, &b, 1));
    assert!(template_match(&a, &b, 2));
    assert!(!template_match(&a, &b, 3));
    assert!(!template_match(&a, &t("(S (VP x) (NP y) (. .))"), 2));
    assert!(!template_match(&a, &t("(SQ (NP x))"), 1));
}

#[test]
fn transfer_scores_average_and_penalize_missing() {
    let r = t("(S (NP x) (VP y))");
    let outs = vec![Some(r.clone()), Some(t("(S (NP z) (VP y))")), Some(t("(S (VP y))")), None];
    let refs = vec![r.clone(); 4];
    let s = transfer_scores(&outs, &refs).unwrap();
    assert_eq!(s.n, 4);
    assert!((s.sted - (0.0 + 1.0 + 2.0 + 5.0) / 4.0).abs() < 1e-12);
    assert!((s.tma2 - 0.5).abs() < 1e-12);
    assert!((s.tma3 - 0.25).abs() < 1e-12);
    assert!(transfer_scores(&[], &[]).is_err());
    assert!(transfer_scores(&outs[..1], &refs).is_err());
}

#[test]
fn distances() {
    assert_eq!(distance(&[0.0, 3.0], &[4.0, 0.0], Metric::L2).unwrap(), 5.0);
    assert!(distance(&[1.0, 0.0], &[2.0, 0.0], Metric::Cosine).unwrap().abs() < 1e-12);
    assert!((distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Cosine).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(distance(&[1.0], &[1.0, 2.0], Metric::L2), Err(EvalError::WidthMismatch(1, 2))));
}

#[test]
fn separation_extremes_ties_and_swap() {
    let perfect: Vec<TripletEmbedding> = (0..10).map(|i| [vec![i as f64], vec![i as f64 + 0.1], vec![i as f64 + 5.0]]).collect();
    assert_eq!(separation_from_embeddings(&perfect, Metric::L2).unwrap(), 1.0);
    let tied: Vec<TripletEmbedding> = (0..10).map(|i| [vec![i as f64], vec![i as f64 + 1.0], vec![i as f64 - 1.0]]).collect();
    assert_eq!(separation_from_embeddings(&tied, Metric::L2).unwrap(), 0.5);
    assert!(separation_from_embeddings(&[], Metric::L2).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random: Vec<TripletEmbedding> = (0..200)
        .map(|_| {
            let mut v = || (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            [v(), v(), v()]
        })
        .collect();
    let swapped: Vec<TripletEmbedding> = random.iter().map(|[a, b, c]| [a.clone(), c.clone(), b.clone()]).collect();
    for m in [Metric::L2, Metric::Cosine] {
        let p = separation_from_embeddings(&random, m).unwrap();
        let q = separation_from_embeddings(&swapped, m).unwrap();
        assert!((p + q - 1.0).abs() < 1e-12);
    }
}

#[test]
fn separation_probability_uses_embedder() {
    let trips = vec![
        TripletRecord { target: "aa".into(), sem_src: "ab".into(), syn_src: "bbbb".into() },
        TripletRecord { target: "c".into(), sem_src: "cccc".into(), syn_src: "d".into() },
    ];
    let embed = |s: &str| -> Result<Vec<f64>, EvalError> { Ok(vec![s.len() as f64]) };
    assert_eq!(separation_probability(&trips, embed, Metric::L2).unwrap(), 0.5);
}

#[test]
fn slot_selection_picks_extremes_with_ties_to_lowest() {
    let s = select_from_probabilities(vec![0.4, 0.9, 0.1, 0.5]).unwrap();
    assert_eq!((s.sem_slot, s.syn_slot, s.tie), (1, 2, false));
    let s = select_from_probabilities(vec![0.9, 0.2, 0.9, 0.2]).unwrap();
    assert_eq!((s.sem_slot, s.syn_slot, s.tie), (0, 1, true));
    assert!(select_from_probabilities(vec![0.5]).is_err());
}

#[test]
fn slot_selection_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let slots = 4;
    let dev: Vec<TripletRecord> = (0..40)
        .map(|i| TripletRecord { target: format!("t{i}"), sem_src: format!("a{i}"), syn_src: format!("b{i}") })
        .collect();
    let table: std::collections::HashMap<String, Vec<Vec<f64>>> = dev
        .iter()
        .flat_map(|r| [r.target.clone(), r.sem_src.clone(), r.syn_src.clone()])
        .map(|k| (k, (0..slots).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()))
        .collect();
    let sel = select_advae_variables(&dev, |s| -> Result<_, EvalError> { Ok(table[s].clone()) }, Metric::L2).unwrap();
    let mut best = (f64::NEG_INFINITY, 0);
    let mut worst = (f64::INFINITY, 0);
    for l in 0..slots {
        let mut wins = 0.0;
        for r in &dev {
            let d = |x: &str, y: &str| -> f64 {
                table[x][l].iter().zip(&table[y][l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            };
            let (ds, dy) = (d(&r.target, &r.sem_src), d(&r.target, &r.syn_src));
            wins += if ds < dy { 1.0 } else if ds == dy { 0.5 } else { 0.0 };
        }
        let p = wins / dev.len() as f64;
        assert!((sel.probabilities[l] - p).abs() < 1e-12);
        if p > best.0 {
            best = (p, l);
        }
        if p < worst.0 {
            worst = (p, l);
        }
    }
    assert_eq!((sel.sem_slot, sel.syn_slot), (best.1, worst.1));
}

#[test]
fn paired_t_test_matches_reference() {
    let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.5], &[0.5, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert!((r.t - 3.201306922660165).abs() < 1e-9);
    assert_eq!(r.df, 4.0);
    assert!((r.p_value - 0.03285984990336797).abs() < 1e-6);
    let same = paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
    assert_eq!((same.t, same.p_value), (0.0, 1.0));
    assert!(paired_t_test(&[1.0], &[1.0]).is_err());
    assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn similarity_scores_load_and_reject_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sim.tsv");
    std::fs::write(&p, "s1\ts2\t0.75\n\ns3\ts4\t-1\n").unwrap();
    let v = load_similarity_scores(&p).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(v[1], Similarity { id_a: "s3".into(), id_b: "s4".into(), score: -1.0 });
    std::fs::write(&p, "s1\ts2\t0.75\ns3\tx\n").unwrap();
    assert!(matches!(load_similarity_scores(&p), Err(EvalError::Format { line: 2, .. })));
    std::fs::write(&p, "s1\ts2\thigh\n").unwrap();
    assert!(matches!(load_similarity_scores(&p), Err(EvalError::Format { line: 1, .. })));
    assert!(matches!(load_similarity_scores(dir.path().join("none")), Err(EvalError::Io { .. })));
}

#[test]
fn report_tsv() {
    let mut r = Report::separation();
    r.push(vec!["qkvae".into(), "sem".into(), "l2".into(), "0.91".into()]);
    assert_eq!(r.to_tsv(), "model\tvariable\tmetric\tprobability\nqkvae\tsem\tl2\t0.91\n");
}

#[test]
fn variables_parse() {
    assert_eq!("sem".parse::<Variable>().unwrap(), Variable::Sem);
    assert_eq!("z3".parse::<Variable>().unwrap(), Variable::Slot(2));
    assert!("z0".parse::<Variable>().is_err());
    assert!("foo".parse::<Variable>().is_err());
}

fn model() -> QkvaeModel<f64> {
    let cfg = ModelConfig {
        mode: Mode::Qkvae,
        vocab_size: 14,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        post_layers: 1,
        gen_layers: 1,
        src_layers: 1,
        slots: 2,
        d_sem: 8,
        d_syn: 4,
        d_id: 4,
        max_len: 6,
        init_seed: 1,
    };
    QkvaeModel::new(cfg).unwrap()
}

#[test]
fn self_transfer_equals_reconstruction() {
    let m = model();
    for s in [vec![4, 5, 6], vec![7], vec![8, 9, 10, 11, 12, 13]] {
        assert_eq!(transfer(&m, &s, &s).unwrap(), reconstruct(&m, &s).unwrap());
    }
}

#[test]
fn batched_transfer_matches_single() {
    let m = model();
    let pairs = vec![(vec![4, 5], vec![6, 7, 8]), (vec![9], vec![10, 11]), (vec![12, 13, 4], vec![5])];
    let batch = transfer_batch(&m, &pairs, 2).unwrap();
    for (p, out) in pairs.iter().zip(&batch) {
        assert_eq!(&transfer(&m, &p.0, &p.1).unwrap(), out);
    }
}

#[test]
fn interpolation_endpoints_are_reconstructions() {
    let m = model();
    let (a, b) = (vec![4, 5, 6], vec![7, 8]);
    let path = interpolate(&m, &a, &b, 5).unwrap();
    assert_eq!(path.len(), 5);
    assert_eq!(path[0], reconstruct(&m, &a).unwrap());
    assert_eq!(path[4], reconstruct(&m, &b).unwrap());
    assert!(interpolate(&m, &a, &b, 1).is_err());
}

#[test]
fn variable_selection_and_swaps() {
    let m = model();
    let za = m.encode(&[4, 5]).unwrap().means();
    let zb = m.encode(&[6]).unwrap().means();
    assert_eq!(select_variable(&za, Variable::Sem).unwrap().len(), 8);
    assert_eq!(select_variable(&za, Variable::Syn).unwrap().len(), 4);
    assert_eq!(select_variable(&za, Variable::Whole).unwrap().len(), 12);
    assert_eq!(select_variable(&za, Variable::Slot(1)).unwrap().len(), 4);
    assert!(select_variable(&za, Variable::Slot(2)).is_err());
    let s = swap_latents(&za, &zb);
    assert_eq!((s.sem.clone(), s.syn.clone()), (za.sem.clone(), zb.syn.clone()));
    let s = swap_slot(&za, &zb, 1);
    assert_eq!((&s.sem[0], &s.sem[1]), (&za.sem[0], &zb.sem[1]));
}
