use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qkvae::data::{default_spec, detokenize, tokenize, Vocab};
use qkvae::eval::reconstruct;
use qkvae::model::{read_checkpoint, write_checkpoint, Mode, ModelConfig, QkvaeModel};
use qkvae::tensor::Tensor;
use tempfile::TempDir;

fn qkvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkvae")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        mode: Mode::Qkvae,
        vocab_size,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        post_layers: 1,
        gen_layers: 1,
        src_layers: 1,
        slots: 2,
        d_sem: 16,
        d_syn: 8,
        d_id: 8,
        max_len: 24,
        init_seed: 5,
    }
}

fn write_model(dir: &Path, cfg: ModelConfig, vocab: &Vocab) -> PathBuf {
    let model = QkvaeModel::<f32>::new(cfg).unwrap();
    let path = dir.join("model.ckpt");
    write_checkpoint(&path, &model.to_checkpoint(vocab)).unwrap();
    path
}

fn synth(dir: &Path, n: &str) -> PathBuf {
    let out = dir.join("synth");
    let o = qkvae(&["synth-data", "--spec", "default", "--n", n, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_documents_formats_and_exits_zero() {
    let o = qkvae(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for fmt in ["corpus", "triplets", "labels", "trees", "config", "metrics", "grammar"] {
        assert!(text.contains(&format!("  {fmt}")), "help lacks {fmt}");
    }
    assert_eq!(qkvae(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_one_line_usage_error() {
    let o = qkvae(&["grad-check", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("--bogus"));
}

#[test]
fn bad_flag_values_fail_before_touching_files() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = qkvae(&["generate", "--ckpt", s(&missing), "--strategy", "sample:hot"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let out = dir.path().join("never");
    let o = qkvae(&["synth-data", "--n", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let o = qkvae(&["grad-check", "--size", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let o = qkvae(&["transfer", "--ckpt", s(&missing), "--sem", "a b", "--syn", "a b"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.contains("absent.ckpt"), "{err}");
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let dir = TempDir::new().unwrap();
    let vocab = default_spec().vocab();
    let path = write_model(dir.path(), small_config(vocab.len()), &vocab);
    let mut bytes = fs::read(&path).unwrap();
    bytes[6..8].copy_from_slice(&99u16.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let o = qkvae(&["transfer", "--ckpt", s(&path), "--sem", "a boy holds a lamp .", "--syn", "a boy holds a lamp ."]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.contains("version"), "{err}");
}

#[test]
fn grad_check_passes_and_prints_error() {
    let o = qkvae(&["grad-check", "--trials", "100"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn synth_data_writes_only_into_out() {
    let dir = TempDir::new().unwrap();
    let out = synth(dir.path(), "40");
    let mut names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["synth"]);
    let mut files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["corpus.txt", "grammar.txt", "labels.tsv", "syn_trees.txt", "triplets.tsv"]);
    assert_eq!(fs::read_to_string(out.join("corpus.txt")).unwrap().lines().count(), 40);
    let triplets = fs::read_to_string(out.join("triplets.tsv")).unwrap().lines().count();
    assert_eq!(fs::read_to_string(out.join("syn_trees.txt")).unwrap().lines().count(), triplets);
    // The copied grammar regenerates the same corpus.
    let again = dir.path().join("again");
    let o = qkvae(&["synth-data", "--spec", s(&out.join("grammar.txt")), "--n", "40", "--out", s(&again)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(out.join("corpus.txt")).unwrap(), fs::read(again.join("corpus.txt")).unwrap());
}

#[test]
fn transfer_with_identical_inputs_prints_reconstruction() {
    let dir = TempDir::new().unwrap();
    let vocab = default_spec().vocab();
    let path = write_model(dir.path(), small_config(vocab.len()), &vocab);
    let (model, vocab) = QkvaeModel::<f32>::from_checkpoint(&read_checkpoint::<f32>(&path).unwrap()).unwrap();
    for sent in ["a boy holds a lamp .", "is a hat worn by a nurse ?"] {
        let o = qkvae(&["transfer", "--ckpt", s(&path), "--sem", sent, "--syn", sent]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let expected = detokenize(&reconstruct(&model, &tokenize(sent, &vocab)).unwrap(), &vocab);
        assert_eq!(stdout(&o).trim_end_matches('\n'), expected);
    }
}

#[test]
fn generate_and_interpolate_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let vocab = default_spec().vocab();
    let path = write_model(dir.path(), small_config(vocab.len()), &vocab);
    let args = ["generate", "--ckpt", s(&path), "--prompt-latents", "prior", "--strategy", "sample:0.8:3", "--n", "3", "--seed", "9"];
    let a = qkvae(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(stdout(&a).lines().count(), 3);
    assert_eq!(a.stdout, qkvae(&args).stdout);
    let o = qkvae(&["generate", "--ckpt", s(&path), "--prompt-latents", "encode:a boy holds a lamp ."]);
    assert_eq!(o.status.code(), Some(0));
    let o = qkvae(&["interpolate", "--ckpt", s(&path), "--a", "a boy holds a lamp .", "--b", "a girl drops a kite .", "--steps", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("0.000\t") && lines[3].starts_with("1.000\t"));
}

/// Single-bank models need an explicit syntactic slot; two-bank models refuse one.
#[test]
fn syn_slot_matches_model_type() {
    let dir = TempDir::new().unwrap();
    let vocab = default_spec().vocab();
    let advae = write_model(dir.path(), small_config(vocab.len()).advae_of(), &vocab);
    let base = ["transfer", "--ckpt", s(&advae), "--sem", "a boy holds a lamp .", "--syn", "a lamp is held by a boy ."];
    assert_eq!(qkvae(&base).status.code(), Some(1));
    let mut with_slot = base.to_vec();
    with_slot.extend(["--syn-slot", "z2"]);
    let o = qkvae(&with_slot);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

/// Encoder that sees only lexemes: every form of a lexicon entry shares one
/// embedding, all other words and all positions embed to zero.
fn content_only_checkpoint(dir: &Path) -> PathBuf {
    let spec = default_spec();
    let vocab = spec.vocab();
    let mut model = QkvaeModel::<f32>::new(small_config(vocab.len())).unwrap();
    let d = model.cfg.d_model;
    let old = model.store.get(model.tok_emb).clone();
    let mut emb = Tensor::<f32>::zeros(&[vocab.len(), d]);
    for entries in &spec.lexicon {
        for forms in entries {
            let lemma = vocab.id(&forms[0]).unwrap() as usize;
            for f in forms {
                let id = vocab.id(f).unwrap() as usize;
                emb.data_mut()[id * d..(id + 1) * d].copy_from_slice(old.row(lemma));
            }
        }
    }
    *model.store.get_mut(model.tok_emb) = emb;
    *model.store.get_mut(model.pos_emb) = Tensor::zeros(&[model.cfg.max_len + 2, d]);
    let path = dir.join("content.ckpt");
    write_checkpoint(&path, &model.to_checkpoint(&vocab)).unwrap();
    path
}

#[test]
fn eval_separation_with_content_only_encoder() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "300");
    let ckpt = content_only_checkpoint(dir.path());
    let o = qkvae(&["eval-separation", "--ckpt", s(&ckpt), "--triplets", s(&data.join("triplets.tsv")), "--variable", "sem", "--metric", "l2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let p: f64 = out.lines().nth(1).unwrap().split('\t').last().unwrap().parse().unwrap();
    assert!(p >= 0.95, "{out}");
}

#[test]
fn eval_separation_skips_header_line() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "60");
    let ckpt = content_only_checkpoint(dir.path());
    let body = fs::read_to_string(data.join("triplets.tsv")).unwrap();
    let with_header = dir.path().join("h.tsv");
    fs::write(&with_header, format!("target\tsem_src\tsyn_src\n{body}")).unwrap();
    let run = |p: &Path| stdout(&qkvae(&["eval-separation", "--ckpt", s(&ckpt), "--triplets", s(p), "--variable", "syn", "--metric", "cosine"]));
    assert_eq!(run(&data.join("triplets.tsv")), run(&with_header));
}

#[test]
fn eval_transfer_reports_scores() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "60");
    let vocab = default_spec().vocab();
    let ckpt = write_model(dir.path(), small_config(vocab.len()), &vocab);
    let out = dir.path().join("report");
    let o = qkvae(&[
        "eval-transfer",
        "--ckpt",
        s(&ckpt),
        "--triplets",
        s(&data.join("triplets.tsv")),
        "--trees",
        s(&data.join("syn_trees.txt")),
        "--spec",
        "default",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("report.tsv")).unwrap(), stdout(&o));
    // Gold trees as output parses give a perfect score.
    let o = qkvae(&[
        "eval-transfer",
        "--ckpt",
        s(&ckpt),
        "--triplets",
        s(&data.join("triplets.tsv")),
        "--trees",
        s(&data.join("syn_trees.txt")),
        "--output-trees",
        s(&data.join("syn_trees.txt")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let row: Vec<String> = stdout(&o).lines().nth(1).unwrap().split('\t').map(String::from).collect();
    assert_eq!(&row[2..], ["0.0000", "1.0000", "1.0000"]);
    let o = qkvae(&["eval-transfer", "--ckpt", s(&ckpt), "--triplets", s(&data.join("triplets.tsv")), "--trees", s(&data.join("syn_trees.txt"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_and_resume_append_metrics() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "30");
    let cfg = |steps: u32| {
        format!(
            "d_model = 16\nheads = 2\nlayers = 1\nslots = 2\nd_sem = 16\nd_syn = 8\nd_id = 8\nbatch_size = 8\nsteps = {steps}\nsem_anneal = 1,2\nsyn_anneal = 3,4\n"
        )
    };
    let c1 = dir.path().join("a.cfg");
    fs::write(&c1, cfg(3)).unwrap();
    let out = dir.path().join("run");
    let corpus = data.join("corpus.txt");
    let o = qkvae(&["train", "--config", s(&c1), "--data", s(&corpus), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("step\t"));
    let c2 = dir.path().join("b.cfg");
    fs::write(&c2, cfg(5)).unwrap();
    let saved = dir.path().join("saved.ckpt");
    fs::copy(out.join("latest.ckpt"), &saved).unwrap();
    let o = qkvae(&["train", "--config", s(&c2), "--data", s(&corpus), "--out", s(&out), "--resume", s(&saved)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 6, "{metrics}");
    assert_eq!(metrics.matches("step\t").count(), 1);

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "d_model = sixteen\n").unwrap();
    let o = qkvae(&["train", "--config", s(&bad), "--data", s(&corpus), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}
