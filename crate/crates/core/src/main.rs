//! Command-line entry point: data synthesis, training, generation, transfer,
//! interpolation and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qkvae::data::{
    default_spec, detokenize, gen_synthetic, load_corpus, load_triplets, split_words, tokenize, write_labels,
    write_triplets, DataError, SynthSpec, DEFAULT_SPEC, TripletRecord, Vocab,
};
use qkvae::eval::{
    encode_means, interpolate, parse_bracketed, select_variable, separation_from_embeddings, swap_latents, swap_slot,
    transfer_scores, ConstTree, EvalError, Metric, Report, TripletEmbedding, Variable,
};
use qkvae::model::{read_checkpoint, CheckpointError, Latents, Mode, ModelError, QkvaeModel, Strategy};
use qkvae::tensor::{check_primitives, TensorError};
use qkvae::train::{elbo_grad_check_sized, train_loop, CheckpointPlan, TrainConfig, TrainError, Trainer, TsvSink};

const AFTER_HELP: &str = "\
File formats (UTF-8; one example line each):
  corpus    one sentence per line
              a farmer wears a cloak .
  triplets  TSV target, sem_src, syn_src; optional header `target<TAB>sem_src<TAB>syn_src`
              a boy holds a lamp .<TAB>a lamp is held by a boy .<TAB>a nurse wears a cloak .
  labels    TSV sentence, template_id, content_tuple (header first)
              a farmer wears a cloak .<TAB>0<TAB>farmer|wear|cloak
  trees     one bracketed parse per line; `-` marks a failed parse in --output-trees
              (S (NP (DT a) (NN farmer)) (VP (VBZ wears) (NP (DT a) (NN cloak))) (. .))
  config    key = value, `#` starts a comment
              sem_anneal = 3000,6000
  metrics   TSV step, nll, kl_sem, kl_syn, beta_sem, beta_syn, wall_ms (header first)
              120<TAB>1.84<TAB>35.2<TAB>20.1<TAB>0<TAB>0<TAB>0
  grammar   `seed N`, `lex TYPE ENTRY...`, `template NAME TREE`
              template active (S (NP (DT a) (NN {agent})) (VP (VBZ {verb.1}) (NP (DT a) (NN {patient}))) (. .))

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.";

#[derive(Parser)]
#[command(name = "qkvae", version, about = "Transformer VAE with key (syntax) and value (semantics) latent variables")]
#[command(after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with gold templates, triplets and trees.
    ///
    /// Writes corpus.txt, labels.tsv, triplets.tsv, syn_trees.txt and grammar.txt into --out.
    SynthData {
        /// Grammar file, or `default` for the built-in grammar.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the grammar's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a corpus; writes metrics.tsv and latest.ckpt into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus file, one sentence per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (its vocabulary is reused).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode sentences from prior samples or from an encoded sentence.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// `prior` or `encode:SENTENCE`.
        #[arg(long, default_value = "prior")]
        prompt_latents: String,
        /// `greedy` or `sample:TEMPERATURE:SEED`.
        #[arg(long, default_value = "greedy")]
        strategy: String,
        /// Number of sentences.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Seed for prior draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode the semantic latents of --sem with the syntactic latent of --syn.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sem: String,
        #[arg(long)]
        syn: String,
        /// Single-bank models: slot (z1..zL) taken from --syn.
        #[arg(long)]
        syn_slot: Option<Variable>,
    },
    /// Decode evenly spaced points between two sentences' latents.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Separation probability of one latent variable on a triplet file.
    EvalSeparation {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        /// `sem`, `syn`, `whole` or `z1`..`zL`.
        #[arg(long, default_value = "sem")]
        variable: Variable,
        /// `l2` or `cosine`.
        #[arg(long, default_value = "l2", value_parser = parse_metric)]
        metric: Metric,
    },
    /// Syntactic transfer scores (STED, TMA2, TMA3) against reference trees.
    ///
    /// Outputs are turned into trees by the synthetic grammar (--spec) or read
    /// from --output-trees, aligned with the triplets.
    EvalTransfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        /// Reference parses of each triplet's syn_src, one per line.
        #[arg(long)]
        trees: PathBuf,
        /// Grammar that recognizes outputs (`default` for the built-in one).
        #[arg(long, conflicts_with = "output_trees")]
        spec: Option<String>,
        /// Parses of the transfer outputs; `-` or an empty line marks a failed parse.
        #[arg(long)]
        output_trees: Option<PathBuf>,
        /// Single-bank models: slot (z1..zL) taken from syn_src.
        #[arg(long)]
        syn_slot: Option<Variable>,
        /// Write outputs.txt and report.tsv here instead of printing only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the full objective.
    GradCheck {
        /// Model width of the objective check (even, >= 4).
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "l2" => Ok(Metric::L2),
        "cosine" => Ok(Metric::Cosine),
        _ => Err(format!("unknown metric '{s}' (expected l2 or cosine)")),
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            ModelError::Checkpoint(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config { .. } => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("cannot write {}: {e}", path.display()))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} file {} does not exist", path.display())))
    }
}

fn load_spec(spec: &str) -> Result<SynthSpec, CliError> {
    if spec == "default" {
        Ok(default_spec())
    } else {
        require_file(Path::new(spec), "grammar")?;
        Ok(SynthSpec::from_file(spec)?)
    }
}

fn load_model(path: &Path) -> Result<(QkvaeModel<f32>, Vocab), CliError> {
    require_file(path, "checkpoint")?;
    let ck = read_checkpoint::<f32>(path)?;
    Ok(QkvaeModel::from_checkpoint(&ck)?)
}

fn read_triplets(path: &Path) -> Result<Vec<TripletRecord>, CliError> {
    require_file(path, "triplet")?;
    let first = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?
        .lines()
        .next()
        .map(|l| l.trim_end() == "target\tsem_src\tsyn_src")
        .unwrap_or(false);
    let t = load_triplets(path, first)?;
    if t.is_empty() {
        return Err(CliError::Data(format!("{} holds no triplets", path.display())));
    }
    Ok(t)
}

fn encode_text(text: &str, vocab: &Vocab, model: &QkvaeModel<f32>) -> Result<Vec<u32>, CliError> {
    let ids = tokenize(text, vocab);
    if ids.is_empty() {
        return Err(CliError::Usage(format!("sentence '{text}' has no tokens")));
    }
    if ids.len() > model.cfg.max_len {
        return Err(CliError::Usage(format!(
            "sentence '{text}' has {} tokens; the model accepts at most {}",
            ids.len(),
            model.cfg.max_len
        )));
    }
    Ok(ids)
}

fn parse_strategy(s: &str) -> Result<Strategy, CliError> {
    if s == "greedy" {
        return Ok(Strategy::Greedy);
    }
    let bad = || CliError::Usage(format!("--strategy '{s}': expected greedy or sample:TEMPERATURE:SEED"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["sample", t, seed] => {
            let temperature: f64 = t.parse().map_err(|_| bad())?;
            if !(temperature > 0.0) {
                return Err(bad());
            }
            Ok(Strategy::Sample {
                temperature,
                seed: seed.parse().map_err(|_| bad())?,
            })
        }
        _ => Err(bad()),
    }
}

/// Swapped latents for either model type.
fn swapped(model: &QkvaeModel<f32>, sem: &Latents<f32>, syn: &Latents<f32>, slot: Option<Variable>) -> Result<Latents<f32>, CliError> {
    match (model.cfg.mode, slot) {
        (Mode::Qkvae, None) => Ok(swap_latents(sem, syn)),
        (Mode::Qkvae, Some(_)) => Err(CliError::Usage("--syn-slot applies to single-bank (advae) models only".into())),
        (Mode::Advae, Some(Variable::Slot(l))) if l < model.cfg.slots => Ok(swap_slot(sem, syn, l)),
        (Mode::Advae, _) => Err(CliError::Usage(format!(
            "single-bank model: pass --syn-slot z1..z{} to choose the syntactic slot",
            model.cfg.slots
        ))),
    }
}

fn synth_data(spec_arg: &str, n: usize, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = load_spec(spec_arg)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let corpus = gen_synthetic(&spec, n)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = |f: &str| out.join(f);
    let text: String = corpus.sentences.iter().map(|s| format!("{}\n", s.text)).collect();
    fs::write(path("corpus.txt"), text).map_err(io_err(&path("corpus.txt")))?;
    write_labels(path("labels.tsv"), &spec, &corpus.sentences).map_err(io_err(&path("labels.tsv")))?;
    let records: Vec<TripletRecord> = corpus.triplets.iter().map(|t| t.record()).collect();
    write_triplets(path("triplets.tsv"), &records).map_err(io_err(&path("triplets.tsv")))?;
    let trees: String = corpus
        .triplets
        .iter()
        .map(|t| format!("{}\n", spec.tree(t.syn_src.template, &t.syn_src.content)))
        .collect();
    fs::write(path("syn_trees.txt"), trees).map_err(io_err(&path("syn_trees.txt")))?;
    let grammar = if spec_arg == "default" {
        DEFAULT_SPEC.to_string()
    } else {
        fs::read_to_string(spec_arg).map_err(|e| CliError::Data(format!("cannot read {spec_arg}: {e}")))?
    };
    fs::write(path("grammar.txt"), grammar).map_err(io_err(&path("grammar.txt")))?;
    println!(
        "wrote {} sentences and {} triplets to {} (vocabulary {} words)",
        corpus.sentences.len(),
        corpus.triplets.len(),
        out.display(),
        spec.vocab().len()
    );
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    require_file(config, "config")?;
    require_file(data, "corpus")?;
    if let Some(r) = resume {
        require_file(r, "checkpoint")?;
    }
    let cfg = TrainConfig::from_file(config)?;
    let corpus = load_corpus(data)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut trainer = match resume {
        Some(r) => {
            let ck = read_checkpoint::<f32>(r)?;
            let vocab = Vocab::from_words(ck.vocab.clone()).ok_or(CheckpointError::Vocab)?;
            let seqs = corpus.sentences.iter().map(|s| tokenize(s, &vocab)).collect();
            Trainer::from_checkpoint(&ck, cfg, seqs)?
        }
        None => {
            let vocab = Vocab::build(corpus.sentences.iter().map(String::as_str), None);
            let seqs = corpus.sentences.iter().map(|s| tokenize(s, &vocab)).collect();
            Trainer::new(cfg, vocab, seqs)?
        }
    };
    let metrics = out.join("metrics.tsv");
    let append = resume.is_some() && metrics.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics)
        .map_err(io_err(&metrics))?;
    let mut sink = TsvSink::new(std::io::BufWriter::new(file), append).map_err(io_err(&metrics))?;
    let plan = CheckpointPlan {
        dir: out.to_path_buf(),
        every: trainer.cfg.checkpoint_every,
    };
    println!(
        "training {} sentences, vocabulary {}, {} parameters, steps {}..{}",
        trainer.corpus().len(),
        trainer.vocab.len(),
        trainer.model.store.num_scalars(),
        trainer.step,
        trainer.total_steps()
    );
    train_loop(&mut trainer, &mut sink, Some(&plan))?;
    let (nll, acc) = trainer.evaluate(trainer.corpus())?;
    println!(
        "done at step {}: corpus nll {nll:.4}, token accuracy {:.2}%; checkpoint {}",
        trainer.step,
        acc * 100.0,
        plan.latest().display()
    );
    Ok(())
}

fn generate(ckpt: &Path, prompt: &str, strategy: &str, n: usize, seed: u64) -> Result<(), CliError> {
    let strategy = parse_strategy(strategy)?;
    let (model, vocab) = load_model(ckpt)?;
    let latents: Vec<Latents<f32>> = if prompt == "prior" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| model.sample_prior(&mut rng)).collect()
    } else if let Some(text) = prompt.strip_prefix("encode:") {
        let z = model.encode(&encode_text(text, &vocab, &model)?)?.means();
        vec![z; n]
    } else {
        return Err(CliError::Usage(format!("--prompt-latents '{prompt}': expected prior or encode:SENTENCE")));
    };
    let out = match strategy {
        Strategy::Greedy => model.generate_batch(&latents, strategy, model.cfg.max_len + 1)?,
        Strategy::Sample { temperature, seed } => latents
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let s = Strategy::Sample {
                    temperature,
                    seed: seed.wrapping_add(i as u64),
                };
                model.generate(z, s, model.cfg.max_len + 1)
            })
            .collect::<Result<_, _>>()?,
    };
    for ids in out {
        println!("{}", detokenize(&ids, &vocab));
    }
    Ok(())
}

fn transfer_cmd(ckpt: &Path, sem: &str, syn: &str, slot: Option<Variable>) -> Result<(), CliError> {
    let (model, vocab) = load_model(ckpt)?;
    let (a, b) = (encode_text(sem, &vocab, &model)?, encode_text(syn, &vocab, &model)?);
    let zs = model.encode_batch(&[a, b])?;
    let z = swapped(&model, &zs[0].means(), &zs[1].means(), slot)?;
    let ids = model.generate(&z, Strategy::Greedy, model.cfg.max_len + 1)?;
    println!("{}", detokenize(&ids, &vocab));
    Ok(())
}

fn interpolate_cmd(ckpt: &Path, a: &str, b: &str, steps: usize) -> Result<(), CliError> {
    if steps < 2 {
        return Err(CliError::Usage("--steps must be at least 2".into()));
    }
    let (model, vocab) = load_model(ckpt)?;
    let (ia, ib) = (encode_text(a, &vocab, &model)?, encode_text(b, &vocab, &model)?);
    for (i, ids) in interpolate(&model, &ia, &ib, steps)?.iter().enumerate() {
        println!("{:.3}\t{}", i as f64 / (steps - 1) as f64, detokenize(ids, &vocab));
    }
    Ok(())
}

fn eval_separation(ckpt: &Path, triplets: &Path, variable: Variable, metric: Metric) -> Result<(), CliError> {
    let (model, vocab) = load_model(ckpt)?;
    let trips = read_triplets(triplets)?;
    let mut seqs = Vec::with_capacity(trips.len() * 3);
    for t in &trips {
        for s in [&t.target, &t.sem_src, &t.syn_src] {
            seqs.push(encode_text(s, &vocab, &model)?);
        }
    }
    let z = encode_means(&model, &seqs, 64)?;
    let emb = z
        .chunks(3)
        .map(|c| Ok([select_variable(&c[0], variable)?, select_variable(&c[1], variable)?, select_variable(&c[2], variable)?]))
        .collect::<Result<Vec<TripletEmbedding>, EvalError>>()?;
    let p = separation_from_embeddings(&emb, metric)?;
    let mut report = Report::separation();
    let model_name = match model.cfg.mode {
        Mode::Qkvae => "qkvae",
        Mode::Advae => "advae",
    };
    let var = match variable {
        Variable::Sem => "sem".to_string(),
        Variable::Syn => "syn".to_string(),
        Variable::Whole => "whole".to_string(),
        Variable::Slot(l) => format!("z{}", l + 1),
    };
    let metric = if metric == Metric::L2 { "l2" } else { "cosine" };
    report.push(vec![model_name.into(), var, metric.into(), format!("{p:.4}")]);
    print!("{}", report.to_tsv());
    Ok(())
}

fn read_trees(path: &Path, allow_missing: bool) -> Result<Vec<Option<ConstTree>>, CliError> {
    require_file(path, "tree")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let l = l.trim();
            if allow_missing && (l.is_empty() || l == "-") {
                return Ok(None);
            }
            parse_bracketed(l)
                .map(Some)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn eval_transfer(
    ckpt: &Path,
    triplets: &Path,
    trees: &Path,
    spec: Option<&str>,
    output_trees: Option<&Path>,
    slot: Option<Variable>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if spec.is_none() && output_trees.is_none() {
        return Err(CliError::Usage("eval-transfer needs --spec (synthetic grammar) or --output-trees (parsed outputs)".into()));
    }
    let (model, vocab) = load_model(ckpt)?;
    let trips = read_triplets(triplets)?;
    let refs: Vec<ConstTree> = read_trees(trees, false)?.into_iter().flatten().collect();
    if refs.len() != trips.len() {
        return Err(CliError::Data(format!("{} has {} trees for {} triplets", trees.display(), refs.len(), trips.len())));
    }
    let mut sems = Vec::new();
    let mut syns = Vec::new();
    for t in &trips {
        sems.push(encode_text(&t.sem_src, &vocab, &model)?);
        syns.push(encode_text(&t.syn_src, &vocab, &model)?);
    }
    let (zs, zy) = (encode_means(&model, &sems, 64)?, encode_means(&model, &syns, 64)?);
    let swapped_z = zs.iter().zip(&zy).map(|(a, b)| swapped(&model, a, b, slot)).collect::<Result<Vec<_>, _>>()?;
    let mut outputs = Vec::with_capacity(trips.len());
    for c in swapped_z.chunks(64) {
        outputs.extend(model.generate_batch(c, Strategy::Greedy, model.cfg.max_len + 1)?);
    }
    let texts: Vec<String> = outputs.iter().map(|o| detokenize(o, &vocab)).collect();
    let parsed: Vec<Option<ConstTree>> = match (spec, output_trees) {
        (_, Some(p)) => {
            let t = read_trees(p, true)?;
            if t.len() != trips.len() {
                return Err(CliError::Data(format!("{} has {} lines for {} triplets", p.display(), t.len(), trips.len())));
            }
            t
        }
        (Some(s), None) => {
            let grammar = load_spec(s)?;
            texts
                .iter()
                .map(|t| grammar.recognize(&split_words(t)).map(|(tid, c)| grammar.tree(tid, &c)))
                .collect()
        }
        (None, None) => unreachable!("checked above"),
    };
    let scores = transfer_scores(&parsed, &refs)?;
    let mut report = Report::transfer();
    let name = if model.cfg.mode == Mode::Qkvae { "qkvae" } else { "advae" };
    report.push(vec![
        name.into(),
        scores.n.to_string(),
        format!("{:.4}", scores.sted),
        format!("{:.4}", scores.tma2),
        format!("{:.4}", scores.tma3),
    ]);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let o = dir.join("outputs.txt");
        let body: String = texts.iter().map(|t| format!("{t}\n")).collect();
        fs::write(&o, body).map_err(io_err(&o))?;
        let r = dir.join("report.tsv");
        fs::write(&r, report.to_tsv()).map_err(io_err(&r))?;
    }
    print!("{}", report.to_tsv());
    Ok(())
}

fn grad_check(size: usize, trials: usize, seed: u64) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    if size < 4 || size % 2 != 0 {
        return Err(CliError::Usage(format!("--size must be even and at least 4, got {size}")));
    }
    let prims = check_primitives(trials, seed)?;
    let worst_prim = prims.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    for p in &prims {
        println!("{:<16} trials {:>4}  max relative error {:.3e}", p.op, p.trials, p.max_rel_error);
    }
    let r = elbo_grad_check_sized(size, trials, 8, seed)?;
    println!(
        "{:<16} trials {:>4}  max relative error {:.3e}  ({} coordinates, worst {}[{}])",
        "elbo", r.trials, r.max_rel_error, r.coordinates, r.worst.0, r.worst.1
    );
    println!("max relative error: primitives {worst_prim:.3e} (tolerance 1e-4), objective {:.3e} (tolerance 1e-3)", r.max_rel_error);
    if worst_prim > 1e-4 || r.max_rel_error > 1e-3 {
        return Err(CliError::Numeric("gradient check exceeded tolerance".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData { spec, n, out, seed } => synth_data(&spec, n, &out, seed),
        Command::Train { config, data, out, resume } => train(&config, &data, &out, resume.as_deref()),
        Command::Generate {
            ckpt,
            prompt_latents,
            strategy,
            n,
            seed,
        } => generate(&ckpt, &prompt_latents, &strategy, n, seed),
        Command::Transfer { ckpt, sem, syn, syn_slot } => transfer_cmd(&ckpt, &sem, &syn, syn_slot),
        Command::Interpolate { ckpt, a, b, steps } => interpolate_cmd(&ckpt, &a, &b, steps),
        Command::EvalSeparation {
            ckpt,
            triplets,
            variable,
            metric,
        } => eval_separation(&ckpt, &triplets, variable, metric),
        Command::EvalTransfer {
            ckpt,
            triplets,
            trees,
            spec,
            output_trees,
            syn_slot,
            out,
        } => eval_transfer(&ckpt, &triplets, &trees, spec.as_deref(), output_trees.as_deref(), syn_slot, out.as_deref()),
        Command::GradCheck { size, trials, seed } => grad_check(size, trials, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("error: invalid arguments");
            eprintln!("{first} (see `qkvae --help`)");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
