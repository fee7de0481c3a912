//! β-ELBo objective, staged KL annealing, Adam and resumable training.

mod config;
mod gradcheck;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use config::{Optimizer, TrainConfig, CONFIG_KEYS};
pub use gradcheck::{elbo_grad_check, elbo_grad_check_sized, ElboGradReport};

use crate::data::{Vocab, PAD};
use crate::latent::{free_bits, kl_std_normal, reparameterize, PosteriorVars};
use crate::model::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, LatentVars, ModelError, QkvaeModel, TokenBatch,
};
use crate::nn::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("non-finite value in the {term} term at step {step}")]
    NonFinite { term: &'static str, step: u64 },
    #[error("optimizer state does not match parameter {0}")]
    StateMismatch(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Per-step training measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean negative log-likelihood per non-pad target token.
    pub nll: f64,
    /// Batch-mean KL summed over dimensions, before free bits.
    pub kl_sem: f64,
    pub kl_syn: f64,
    pub beta_sem: f64,
    pub beta_syn: f64,
    /// Teacher-forced next-token accuracy over non-pad targets.
    pub accuracy: f64,
    pub wall_ms: u64,
}

pub const METRIC_HEADER: &str = "step\tnll\tkl_sem\tkl_syn\tbeta_sem\tbeta_syn\twall_ms";

impl StepMetrics {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.nll, self.kl_sem, self.kl_syn, self.beta_sem, self.beta_syn, self.wall_ms
        )
    }
}

/// Receives one record per training step.
pub trait MetricSink {
    fn record(&mut self, m: &StepMetrics) -> std::io::Result<()>;
}

impl MetricSink for Vec<StepMetrics> {
    fn record(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        self.push(m.clone());
        Ok(())
    }
}

/// Append-only TSV metric log.
pub struct TsvSink<W: Write> {
    out: W,
}

impl<W: Write> TsvSink<W> {
    /// Writes the header unless `append` is set.
    pub fn new(mut out: W, append: bool) -> std::io::Result<Self> {
        if !append {
            writeln!(out, "{METRIC_HEADER}")?;
        }
        Ok(TsvSink { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricSink for TsvSink<W> {
    fn record(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        writeln!(self.out, "{}", m.tsv_row())?;
        self.out.flush()
    }
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Generator for one purpose and index, independent of every other.
fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) ^ index);
    rng
}

fn finite_or<T: Scalar>(r: Result<Var, TensorError>, term: &'static str, step: u64) -> Result<Var, TrainError> {
    r.map_err(|e| match e {
        TensorError::NonFinite { .. } => TrainError::NonFinite { term, step },
        other => other.into(),
    })
}

fn model_err(e: ModelError, term: &'static str, step: u64) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::NonFinite { term, step },
        other => other.into(),
    }
}

/// Adds `β · FB(mean-over-batch KL)` for one latent; returns the raw KL sum.
fn kl_term<T: Scalar>(
    g: &mut Graph<T>,
    post: PosteriorVars,
    batch: usize,
    beta: f64,
    lambda: f64,
    term: &'static str,
    step: u64,
) -> Result<(Option<Var>, f64), TrainError> {
    let kl = kl_std_normal(&mut g.tape, post).map_err(|_| TrainError::NonFinite { term, step })?;
    let width = g.tape.value(kl).numel() / batch;
    let kl = finite_or::<T>(g.tape.reshape(kl, &[batch, width]), term, step)?;
    let per_dim = finite_or::<T>(g.tape.mean_rows(kl), term, step)?;
    let raw: f64 = g.value(per_dim).data().iter().map(|x| x.to_f64_lossy()).sum();
    if beta == 0.0 {
        return Ok((None, raw));
    }
    let fb = free_bits(&mut g.tape, per_dim, T::lit(lambda)).map_err(|_| TrainError::NonFinite { term, step })?;
    let weighted = finite_or::<T>(g.tape.scale(fb, T::lit(beta)), term, step)?;
    Ok((Some(weighted), raw))
}

/// `NLL + β_sem·FB(KL_sem) + β_syn·FB(KL_syn)` with one reparameterized sample per sentence.
///
/// Terms whose β is zero are left out, so the loss then equals the NLL exactly.
pub fn elbo_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &QkvaeModel<T>,
    batch: &TokenBatch,
    step: u64,
    cfg: &TrainConfig,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(Var, StepMetrics), TrainError> {
    let enc = model.encode_graph(g, batch).map_err(|e| model_err(e, "nll", step))?;
    let mut noise = |v: Var, g: &Graph<T>| -> Tensor<T> {
        let shape = g.tape.shape(v).to_vec();
        Tensor::from_fn(&shape, |_| T::lit(StandardNormal.sample(noise_rng)))
    };
    let n_sem = noise(enc.sem.mean, g);
    let z_sem = reparameterize(&mut g.tape, enc.sem, n_sem).map_err(|_| TrainError::NonFinite { term: "kl_sem", step })?;
    let z_syn = match enc.syn {
        Some(p) => {
            let n = noise(p.mean, g);
            Some(reparameterize(&mut g.tape, p, n).map_err(|_| TrainError::NonFinite { term: "kl_syn", step })?)
        }
        None => None,
    };
    let z = LatentVars { sem: z_sem, syn: z_syn };
    let (logits, _) = model
        .decode_graph(g, z, &batch.dec_ids, batch.batch, batch.dec_len(), &batch.dec_lengths)
        .map_err(|e| model_err(e, "nll", step))?;
    let nll = finite_or::<T>(g.tape.cross_entropy(logits, &batch.targets, Some(PAD as usize)), "nll", step)?;
    let beta_sem = cfg.sem_schedule().beta_at(step);
    let beta_syn = cfg.syn_schedule().beta_at(step);
    let (sem_term, kl_sem) = kl_term(g, enc.sem, batch.batch, beta_sem, cfg.lambda_fb, "kl_sem", step)?;
    let (syn_term, kl_syn) = match enc.syn {
        Some(p) => kl_term(g, p, batch.batch, beta_syn, cfg.lambda_fb, "kl_syn", step)?,
        None => (None, 0.0),
    };
    let mut loss = nll;
    for (t, name) in [(sem_term, "kl_sem"), (syn_term, "kl_syn")] {
        if let Some(t) = t {
            loss = finite_or::<T>(g.tape.add(loss, t), name, step)?;
        }
    }
    let accuracy = token_accuracy(g.value(logits), &batch.targets);
    let metrics = StepMetrics {
        step,
        nll: g.value(nll).data()[0].to_f64_lossy(),
        kl_sem,
        kl_syn,
        beta_sem,
        beta_syn,
        accuracy,
        wall_ms: 0,
    };
    Ok((loss, metrics))
}

/// Fraction of non-pad targets whose logit row peaks at the target.
pub fn token_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD as usize {
            continue;
        }
        n += 1;
        if crate::model::argmax(logits.row(i)) as usize == t {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// First and second moment estimates, aligned with the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update on every parameter that has a gradient.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Vec<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(TrainError::StateMismatch(format!("{} slots for {} parameters", state.m.len(), store.len())));
    }
    state.t += 1;
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let c1 = T::lit(1.0 - beta1.powi(state.t as i32));
    let c2 = T::lit(1.0 - beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(lr), T::lit(eps));
    for (id, g) in grads {
        let i = id.index();
        let p = store.get_mut(*id);
        if p.numel() != g.len() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(TrainError::StateMismatch(format!("parameter #{i}")));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + (T::one() - b1) * gj;
            *vj = b2 * *vj + (T::one() - b2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
    let lr = T::lit(lr);
    for (id, g) in grads {
        for (w, &gj) in store.get_mut(*id).data_mut().iter_mut().zip(g) {
            *w -= lr * gj;
        }
    }
}

fn clip<T: Scalar>(grads: &mut [(ParamId, Vec<T>)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Training state: model, optimizer and position in the deterministic batch stream.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: QkvaeModel<T>,
    pub vocab: Vocab,
    pub cfg: TrainConfig,
    pub adam: AdamState<T>,
    pub step: u64,
    corpus: Vec<Vec<u32>>,
    order: Option<(u64, Vec<usize>)>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model from `cfg`; sentences longer than `max_len` are dropped.
    pub fn new(cfg: TrainConfig, vocab: Vocab, corpus: Vec<Vec<u32>>) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = QkvaeModel::new(cfg.model_config(vocab.len()))?;
        Self::with_model(model, cfg, vocab, corpus)
    }

    pub fn with_model(model: QkvaeModel<T>, cfg: TrainConfig, vocab: Vocab, corpus: Vec<Vec<u32>>) -> Result<Self, TrainError> {
        let corpus: Vec<Vec<u32>> = corpus
            .into_iter()
            .filter(|s| !s.is_empty() && s.len() <= model.cfg.max_len)
            .collect();
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let adam = AdamState::new(&model.store);
        Ok(Trainer {
            model,
            vocab,
            cfg,
            adam,
            step: 0,
            corpus,
            order: None,
        })
    }

    pub fn corpus(&self) -> &[Vec<u32>] {
        &self.corpus
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.corpus.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.steps.unwrap_or(self.cfg.epochs as u64 * self.batches_per_epoch())
    }

    /// Sentences of the batch used at `step`.
    pub fn batch_at(&mut self, step: u64) -> Vec<Vec<u32>> {
        let per_epoch = self.batches_per_epoch();
        let epoch = step / per_epoch;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.corpus.len()).collect();
            idx.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE, epoch));
            self.order = Some((epoch, idx));
        }
        let order = &self.order.as_ref().expect("just set").1;
        let start = (step % per_epoch) as usize * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(order.len());
        order[start..end].iter().map(|&i| self.corpus[i].clone()).collect()
    }

    /// Runs one optimization step and returns its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics, TrainError> {
        let started = Instant::now();
        let step = self.step;
        let sentences = self.batch_at(step);
        let batch = TokenBatch::new(&sentences, self.model.cfg.max_len)?;
        let mut noise = stream_rng(self.cfg.seed, STREAM_NOISE, step);
        let (mut grads, mut metrics) = {
            let mut g = Graph::new(&self.model.store);
            if self.cfg.dropout > 0.0 {
                g = g.with_dropout(self.cfg.dropout, stream_rng(self.cfg.seed, STREAM_DROPOUT, step));
            }
            let (loss, metrics) = elbo_loss(&mut g, &self.model, &batch, step, &self.cfg, &mut noise)?;
            g.backward(loss).map_err(|e| match e {
                TensorError::NonFinite { .. } => TrainError::NonFinite { term: "gradient", step },
                other => other.into(),
            })?;
            let grads: Vec<(ParamId, Vec<T>)> = g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();
            (grads, metrics)
        };
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(TrainError::NonFinite { term: "gradient", step });
        }
        clip(&mut grads, self.cfg.grad_clip);
        match self.cfg.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => {
                adam_step(&mut self.model.store, &grads, &mut self.adam, self.cfg.lr, beta1, beta2, eps)?
            }
            Optimizer::Sgd => sgd_step(&mut self.model.store, &grads, self.cfg.lr),
        }
        self.step += 1;
        if self.cfg.log_wall_time {
            metrics.wall_ms = started.elapsed().as_millis() as u64;
        }
        Ok(metrics)
    }

    /// NLL and teacher-forced accuracy of `sentences` at the posterior means, without updating.
    pub fn evaluate(&self, sentences: &[Vec<u32>]) -> Result<(f64, f64), TrainError> {
        let mut nll_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut tokens = 0usize;
        for chunk in sentences.chunks(self.cfg.batch_size.max(1)) {
            let batch = TokenBatch::new(chunk, self.model.cfg.max_len)?;
            let mut g = Graph::frozen(&self.model.store);
            let enc = self.model.encode_graph(&mut g, &batch)?;
            let z = LatentVars {
                sem: enc.sem.mean,
                syn: enc.syn.map(|p| p.mean),
            };
            let (logits, _) = self
                .model
                .decode_graph(&mut g, z, &batch.dec_ids, batch.batch, batch.dec_len(), &batch.dec_lengths)?;
            let nll = g.tape.cross_entropy(logits, &batch.targets, Some(PAD as usize))?;
            let n = batch.targets.iter().filter(|&&t| t != PAD as usize).count();
            nll_sum += g.value(nll).data()[0].to_f64_lossy() * n as f64;
            acc_sum += token_accuracy(g.value(logits), &batch.targets) * n as f64;
            tokens += n;
        }
        Ok((nll_sum / tokens as f64, acc_sum / tokens as f64))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = self.model.to_checkpoint(&self.vocab);
        for (id, name, _) in self.model.store.iter() {
            ck.tensors.push((format!("adam.m.{name}"), self.adam.m[id.index()].clone()));
            ck.tensors.push((format!("adam.v.{name}"), self.adam.v[id.index()].clone()));
        }
        ck.set_config("train.step", self.step as f64);
        ck.set_config("train.adam_t", self.adam.t as f64);
        ck.set_config("train.seed", self.cfg.seed as f64);
        ck
    }

    /// Restores model, optimizer state and step from a checkpoint written by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint<T>, cfg: TrainConfig, corpus: Vec<Vec<u32>>) -> Result<Self, TrainError> {
        let (model, vocab) = QkvaeModel::from_checkpoint(ck)?;
        let mut t = Self::with_model(model, cfg, vocab, corpus)?;
        for (id, name, _) in t.model.store.iter() {
            let get = |prefix: &str| {
                ck.tensor(&format!("{prefix}.{name}"))
                    .cloned()
                    .ok_or_else(|| TrainError::StateMismatch(name.to_string()))
            };
            t.adam.m[id.index()] = get("adam.m")?;
            t.adam.v[id.index()] = get("adam.v")?;
        }
        t.step = ck.config_value("train.step").unwrap_or(0.0) as u64;
        t.adam.t = ck.config_value("train.adam_t").unwrap_or(0.0) as u64;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        Ok(write_checkpoint(path, &self.to_checkpoint())?)
    }

    pub fn load(path: impl AsRef<Path>, cfg: TrainConfig, corpus: Vec<Vec<u32>>) -> Result<Self, TrainError> {
        Self::from_checkpoint(&read_checkpoint(path)?, cfg, corpus)
    }
}

/// Where and how often [`train_loop`] writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    pub every: u64,
}

impl CheckpointPlan {
    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.ckpt")
    }
}

/// Trains until `total_steps`, sending every step to `sink`. A non-finite loss
/// stops training and leaves the last written checkpoint untouched.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    sink: &mut dyn MetricSink,
    plan: Option<&CheckpointPlan>,
) -> Result<Checkpoint<T>, TrainError> {
    let total = trainer.total_steps();
    while trainer.step < total {
        let m = trainer.train_step()?;
        sink.record(&m).map_err(|e| TrainError::Io(e.to_string()))?;
        if let Some(p) = plan {
            if p.every > 0 && trainer.step % p.every == 0 {
                trainer.save(p.latest())?;
            }
        }
    }
    let ck = trainer.to_checkpoint();
    if let Some(p) = plan {
        write_checkpoint(p.latest(), &ck)?;
    }
    Ok(ck)
}

#[cfg(test)]
mod tests;
