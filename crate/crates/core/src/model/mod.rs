//! QKVAE and the ADVAE baseline: encoding to latents, key/value decoding, generation.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};

use crate::data::{Vocab, BOS, EOS, PAD};
use crate::latent::{encode_posteriors, EncodedPosteriors, GaussianPosterior, LatentBank, LatentError};
use crate::nn::{
    causal_pattern, decode_layers, trans_enc, BlockStack, CrossWidths, Graph, Linear, ParamId,
    ParamStore, Seq,
};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty token sequence")]
    Empty,
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("expected {expected} semantic latents, got {found}")]
    SlotArity { expected: usize, found: usize },
    #[error("latent width {found} does not match the configured {expected}")]
    LatentWidth { expected: usize, found: usize },
    #[error("{0}")]
    Mode(&'static str),
    #[error("prefix must start with the sentence-start token")]
    Prefix,
    #[error("token id {0} outside the vocabulary")]
    Token(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Keys from `z_syn`, values from `z_sem`.
    Qkvae,
    /// Single latent bank, decoded by cross-attention over `TransEnc(Concat(d; z))`.
    Advae,
}

/// Architecture hyperparameters. Every field is stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub post_layers: usize,
    pub gen_layers: usize,
    /// `TransEnc` depth over the decoder source in ADVAE mode.
    pub src_layers: usize,
    pub slots: usize,
    /// Total semantic width, split evenly over the slots.
    pub d_sem: usize,
    pub d_syn: usize,
    /// Width of the decoder identifier embeddings.
    pub d_id: usize,
    /// Maximum sentence length in tokens, markers excluded.
    pub max_len: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Small CPU-sized configuration.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            mode: Mode::Qkvae,
            vocab_size,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            post_layers: 2,
            gen_layers: 2,
            src_layers: 2,
            slots: 4,
            d_sem: 256,
            d_syn: 128,
            d_id: 64,
            max_len: 24,
            init_seed: 0,
        }
    }

    /// Full-size configuration (768-wide, 4 layers, 12 heads).
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            mode: Mode::Qkvae,
            vocab_size,
            d_model: 768,
            heads: 12,
            enc_layers: 4,
            post_layers: 4,
            gen_layers: 4,
            src_layers: 4,
            slots: 4,
            d_sem: 768,
            d_syn: 768,
            d_id: 768,
            max_len: 64,
            init_seed: 0,
        }
    }

    /// The ADVAE counterpart: one bank as wide as both QKVAE latents together.
    pub fn advae_of(&self) -> Self {
        ModelConfig {
            mode: Mode::Advae,
            d_sem: self.d_sem + self.d_syn,
            d_syn: 0,
            ..self.clone()
        }
    }

    pub fn slot_width(&self) -> usize {
        self.d_sem / self.slots
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size < 5 {
            return bad("vocabulary must hold the reserved tokens plus at least one word");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.slots == 0 || self.d_sem % self.slots != 0 {
            return bad("slots must divide d_sem");
        }
        if self.mode == Mode::Qkvae && self.d_syn == 0 {
            return bad("QKVAE needs d_syn > 0");
        }
        if self.max_len == 0 || self.d_id == 0 {
            return bad("max_len and d_id must be positive");
        }
        if self.enc_layers == 0 || self.post_layers == 0 || self.gen_layers == 0 {
            return bad("layer counts must be positive");
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, f64)> {
        let e = |k: &str, v: usize| (format!("model.{k}"), v as f64);
        vec![
            e("mode", if self.mode == Mode::Qkvae { 0 } else { 1 }),
            e("vocab_size", self.vocab_size),
            e("d_model", self.d_model),
            e("heads", self.heads),
            e("enc_layers", self.enc_layers),
            e("post_layers", self.post_layers),
            e("gen_layers", self.gen_layers),
            e("src_layers", self.src_layers),
            e("slots", self.slots),
            e("d_sem", self.d_sem),
            e("d_syn", self.d_syn),
            e("d_id", self.d_id),
            e("max_len", self.max_len),
            e("init_seed", self.init_seed as usize),
        ]
    }

    pub fn from_entries(entries: &[(String, f64)]) -> Result<Self, ModelError> {
        let get = |k: &str| -> Result<usize, ModelError> {
            let key = format!("model.{k}");
            let v = entries
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks {key}")))?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(ModelError::Config(format!("{key} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let cfg = ModelConfig {
            mode: match get("mode")? {
                0 => Mode::Qkvae,
                1 => Mode::Advae,
                m => return Err(ModelError::Config(format!("unknown mode {m}"))),
            },
            vocab_size: get("vocab_size")?,
            d_model: get("d_model")?,
            heads: get("heads")?,
            enc_layers: get("enc_layers")?,
            post_layers: get("post_layers")?,
            gen_layers: get("gen_layers")?,
            src_layers: get("src_layers")?,
            slots: get("slots")?,
            d_sem: get("d_sem")?,
            d_syn: get("d_syn")?,
            d_id: get("d_id")?,
            max_len: get("max_len")?,
            init_seed: get("init_seed")? as u64,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Latent codes of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents<T> {
    /// One vector per slot.
    pub sem: Vec<Vec<T>>,
    /// Present in QKVAE mode only.
    pub syn: Option<Vec<T>>,
}

impl<T: Scalar> Latents<T> {
    /// Concatenation of every latent, semantic slots first.
    pub fn flatten(&self) -> Vec<T> {
        let mut out: Vec<T> = self.sem.iter().flatten().copied().collect();
        if let Some(s) = &self.syn {
            out.extend_from_slice(s);
        }
        out
    }

    /// `(1 - alpha) * self + alpha * other`, elementwise over all latents.
    pub fn lerp(&self, other: &Self, alpha: T) -> Self {
        let mix = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&x, &y)| (T::one() - alpha) * x + alpha * y).collect() };
        Latents {
            sem: self.sem.iter().zip(&other.sem).map(|(a, b)| mix(a, b)).collect(),
            syn: match (&self.syn, &other.syn) {
                (Some(a), Some(b)) => Some(mix(a, b)),
                _ => None,
            },
        }
    }
}

/// Posterior of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors<T> {
    pub sem: Vec<GaussianPosterior<T>>,
    pub syn: Option<GaussianPosterior<T>>,
}

impl<T: Scalar> Posteriors<T> {
    pub fn means(&self) -> Latents<T> {
        Latents {
            sem: self.sem.iter().map(|p| p.mean().to_vec()).collect(),
            syn: self.syn.as_ref().map(|p| p.mean().to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Padded encoder and decoder views of a batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub enc_len: usize,
    pub enc_ids: Vec<u32>,
    pub enc_lengths: Vec<usize>,
    /// `BOS w_1 .. w_n`, padded to `enc_len + 1`.
    pub dec_ids: Vec<u32>,
    /// `w_1 .. w_n EOS`, padded with `PAD`.
    pub targets: Vec<usize>,
    pub dec_lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<u32>], max_len: usize) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::Empty);
        }
        for s in seqs {
            if s.is_empty() {
                return Err(ModelError::Empty);
            }
            if s.len() > max_len {
                return Err(ModelError::TooLong { len: s.len(), max: max_len });
            }
        }
        let enc_len = seqs.iter().map(Vec::len).max().expect("non-empty");
        let dec_len = enc_len + 1;
        let mut b = TokenBatch {
            batch: seqs.len(),
            enc_len,
            enc_ids: Vec::with_capacity(seqs.len() * enc_len),
            enc_lengths: Vec::new(),
            dec_ids: Vec::with_capacity(seqs.len() * dec_len),
            targets: Vec::with_capacity(seqs.len() * dec_len),
            dec_lengths: Vec::new(),
        };
        for s in seqs {
            let pad = enc_len - s.len();
            b.enc_ids.extend(s.iter().copied().chain(std::iter::repeat(PAD).take(pad)));
            b.enc_lengths.push(s.len());
            b.dec_ids.push(BOS);
            b.dec_ids.extend(s.iter().copied().chain(std::iter::repeat(PAD).take(pad)));
            b.targets.extend(s.iter().map(|&t| t as usize));
            b.targets.push(EOS as usize);
            b.targets.extend(std::iter::repeat(PAD as usize).take(pad));
            b.dec_lengths.push(s.len() + 1);
        }
        Ok(b)
    }

    pub fn dec_len(&self) -> usize {
        self.enc_len + 1
    }
}

/// Latent samples recorded on a tape: `sem` is `[batch * L, d_sem / L]`, `syn` `[batch, d_syn]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub sem: Var,
    pub syn: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct QkvaeModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub encoder: BlockStack,
    pub posterior: BlockStack,
    pub bank: LatentBank,
    pub generator: BlockStack,
    /// ADVAE only: projection of `Concat(d_l; z_l)` to `d_model` and its `TransEnc`.
    pub source: Option<(Linear, BlockStack)>,
    pub head: Linear,
}

impl<T: Scalar> QkvaeModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let tok_emb = store.add("embed.tokens", Tensor::randn(&[cfg.vocab_size, d], 1.0, &mut rng));
        let pos_emb = store.add("embed.positions", Tensor::randn(&[cfg.max_len + 2, d], 0.5, &mut rng));
        let encoder = BlockStack::encoder(&mut store, "enc", d, cfg.heads, cfg.enc_layers, &mut rng);
        let posterior = BlockStack::decoder(&mut store, "post", d, cfg.heads, cfg.post_layers, CrossWidths { key: d, value: d }, &mut rng);
        let qkv = cfg.mode == Mode::Qkvae;
        let bank = LatentBank::new(&mut store, d, cfg.slots, cfg.d_sem, cfg.d_syn, cfg.d_id, qkv, &mut rng)?;
        let value_width = cfg.d_id + cfg.slot_width();
        let (generator, source) = if qkv {
            let widths = CrossWidths { key: d, value: value_width };
            (BlockStack::decoder(&mut store, "gen", d, cfg.heads, cfg.gen_layers, widths, &mut rng), None)
        } else {
            let proj = Linear::new(&mut store, "src.proj", value_width, d, true, &mut rng);
            let src = BlockStack::encoder(&mut store, "src", d, cfg.heads, cfg.src_layers, &mut rng);
            let widths = CrossWidths { key: d, value: d };
            (BlockStack::decoder(&mut store, "gen", d, cfg.heads, cfg.gen_layers, widths, &mut rng), Some((proj, src)))
        };
        let head = Linear::new(&mut store, "head", d, cfg.vocab_size, true, &mut rng);
        Ok(QkvaeModel {
            cfg,
            store,
            tok_emb,
            pos_emb,
            encoder,
            posterior,
            bank,
            generator,
            source,
            head,
        })
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            Some(&t) => Err(ModelError::Token(t)),
            None => Ok(()),
        }
    }

    /// Token plus positional embeddings for `[batch * len]` ids.
    fn embed(&self, g: &mut Graph<T>, ids: &[u32], batch: usize, len: usize) -> Result<Var, ModelError> {
        self.check_tokens(ids)?;
        if len > self.cfg.max_len + 2 {
            return Err(ModelError::TooLong { len, max: self.cfg.max_len });
        }
        let table = g.p(self.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = g.tape.gather(table, &idx)?;
        let pos_table = g.p(self.pos_emb);
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.tape.gather(pos_table, &pos_idx)?;
        Ok(g.tape.add(tok, pos)?)
    }

    /// Posterior parameters for a batch.
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &TokenBatch) -> Result<EncodedPosteriors, ModelError> {
        let x = self.embed(g, &b.enc_ids, b.batch, b.enc_len)?;
        let seq = Seq {
            x,
            batch: b.batch,
            len: b.enc_len,
            lengths: b.enc_lengths.clone(),
        };
        let states = trans_enc(g, &seq, &self.encoder)?;
        Ok(encode_posteriors(g, &states, &self.bank, &self.posterior)?)
    }

    /// Decoder keys and values for `batch` latent sets.
    fn sources(&self, g: &mut Graph<T>, z: LatentVars, batch: usize) -> Result<(Seq, Seq), ModelError> {
        let l = self.cfg.slots;
        let ids = g.p(self.bank.dec_ids);
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..l).collect();
        let d = g.tape.gather(ids, &idx)?;
        let y = g.tape.concat(&[d, z.sem])?;
        match (&self.source, z.syn) {
            (None, Some(syn)) => {
                let key_proj = self.bank.key_proj.as_ref().expect("QKVAE has a key projection");
                let k = key_proj.forward(g, syn)?;
                let k = g.tape.reshape(k, &[batch * l, self.cfg.d_model])?;
                Ok((Seq::dense(k, batch, l), Seq::dense(y, batch, l)))
            }
            (Some((proj, stack)), None) => {
                let h = proj.forward(g, y)?;
                let s = trans_enc(g, &Seq::dense(h, batch, l), stack)?;
                Ok((s.clone(), s))
            }
            (None, None) => Err(ModelError::Mode("QKVAE decoding needs a syntactic latent")),
            (Some(_), Some(_)) => Err(ModelError::Mode("ADVAE decoding takes no syntactic latent")),
        }
    }

    /// Logits at every decoder position, `[batch * dec_len, vocab]`, plus the
    /// cross-attention weights of every generator layer.
    pub fn decode_graph(
        &self,
        g: &mut Graph<T>,
        z: LatentVars,
        dec_ids: &[u32],
        batch: usize,
        dec_len: usize,
        dec_lengths: &[usize],
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let x = self.embed(g, dec_ids, batch, dec_len)?;
        let prefix = Seq {
            x,
            batch,
            len: dec_len,
            lengths: dec_lengths.to_vec(),
        };
        let (s_k, s_v) = self.sources(g, z, batch)?;
        let pattern = causal_pattern(dec_len);
        let trace = decode_layers(g, &prefix, &s_k, &s_v, &self.generator, Some(&pattern))?;
        let logits = self.head.forward(g, trace.out.x)?;
        Ok((logits, trace.cross_weights))
    }

    fn latent_vars(&self, g: &mut Graph<T>, zs: &[&Latents<T>]) -> Result<LatentVars, ModelError> {
        let l = self.cfg.slots;
        let dz = self.cfg.slot_width();
        let mut sem = Vec::with_capacity(zs.len() * self.cfg.d_sem);
        let mut syn = Vec::new();
        for z in zs {
            if z.sem.len() != l {
                return Err(ModelError::SlotArity { expected: l, found: z.sem.len() });
            }
            for s in &z.sem {
                if s.len() != dz {
                    return Err(ModelError::LatentWidth { expected: dz, found: s.len() });
                }
                sem.extend_from_slice(s);
            }
            match (&z.syn, self.cfg.mode) {
                (Some(s), Mode::Qkvae) => {
                    if s.len() != self.cfg.d_syn {
                        return Err(ModelError::LatentWidth { expected: self.cfg.d_syn, found: s.len() });
                    }
                    syn.extend_from_slice(s);
                }
                (None, Mode::Qkvae) => return Err(ModelError::Mode("QKVAE decoding needs a syntactic latent")),
                (Some(_), Mode::Advae) => return Err(ModelError::Mode("ADVAE decoding takes no syntactic latent")),
                (None, Mode::Advae) => {}
            }
        }
        let sem = g.constant(Tensor::new(&[zs.len() * l, dz], sem)?);
        let syn = match self.cfg.mode {
            Mode::Qkvae => Some(g.constant(Tensor::new(&[zs.len(), self.cfg.d_syn], syn)?)),
            Mode::Advae => None,
        };
        Ok(LatentVars { sem, syn })
    }

    /// Posteriors of a batch of sentences.
    pub fn encode_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Posteriors<T>>, ModelError> {
        let b = TokenBatch::new(seqs, self.cfg.max_len)?;
        let mut g = Graph::frozen(&self.store);
        let enc = self.encode_graph(&mut g, &b)?;
        let l = self.cfg.slots;
        let dz = self.cfg.slot_width();
        let (sm, ss) = (g.value(enc.sem.mean), g.value(enc.sem.std));
        let mut out = Vec::with_capacity(b.batch);
        for i in 0..b.batch {
            let sem = (0..l)
                .map(|s| {
                    let r = i * l + s;
                    GaussianPosterior::new(sm.data()[r * dz..(r + 1) * dz].to_vec(), ss.data()[r * dz..(r + 1) * dz].to_vec())
                })
                .collect::<Result<Vec<_>, _>>()?;
            let syn = match enc.syn {
                Some(p) => {
                    let w = self.cfg.d_syn;
                    let (m, s) = (g.value(p.mean), g.value(p.std));
                    Some(GaussianPosterior::new(m.data()[i * w..(i + 1) * w].to_vec(), s.data()[i * w..(i + 1) * w].to_vec())?)
                }
                None => None,
            };
            out.push(Posteriors { sem, syn });
        }
        Ok(out)
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<Posteriors<T>, ModelError> {
        Ok(self.encode_batch(&[tokens.to_vec()])?.remove(0))
    }

    /// Logits for every position of `prefix`, `[|prefix|, vocab]`.
    pub fn teacher_forced_logits(&self, z: &Latents<T>, prefix: &[u32]) -> Result<Tensor<T>, ModelError> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::Prefix);
        }
        let mut g = Graph::frozen(&self.store);
        let zv = self.latent_vars(&mut g, &[z])?;
        let (logits, _) = self.decode_graph(&mut g, zv, prefix, 1, prefix.len(), &[prefix.len()])?;
        Ok(g.value(logits).clone())
    }

    /// Next-token logits after `prefix`.
    pub fn decode_logits(&self, z: &Latents<T>, prefix: &[u32]) -> Result<Vec<T>, ModelError> {
        let all = self.teacher_forced_logits(z, prefix)?;
        Ok(all.row(prefix.len() - 1).to_vec())
    }

    /// [`QkvaeModel::decode_logits`] for the single-bank ADVAE decoder.
    pub fn advae_decode_logits(&self, z_sem: &[Vec<T>], prefix: &[u32]) -> Result<Vec<T>, ModelError> {
        if self.cfg.mode != Mode::Advae {
            return Err(ModelError::Mode("model is not in ADVAE mode"));
        }
        self.decode_logits(&Latents { sem: z_sem.to_vec(), syn: None }, prefix)
    }

    /// Cross-attention weights of every generator layer for the last prefix position,
    /// one `[heads, L]` tensor per layer.
    pub fn cross_attention(&self, z: &Latents<T>, prefix: &[u32]) -> Result<Vec<Tensor<T>>, ModelError> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::Prefix);
        }
        let mut g = Graph::frozen(&self.store);
        let zv = self.latent_vars(&mut g, &[z])?;
        let (_, weights) = self.decode_graph(&mut g, zv, prefix, 1, prefix.len(), &[prefix.len()])?;
        let (h, t, l) = (self.cfg.heads, prefix.len(), self.cfg.slots);
        weights
            .iter()
            .map(|&w| {
                let w = g.value(w);
                let data: Vec<T> = (0..h).flat_map(|hh| w.data()[(hh * t + t - 1) * l..(hh * t + t) * l].to_vec()).collect();
                Ok(Tensor::new(&[h, l], data)?)
            })
            .collect()
    }

    /// Autoregressive decoding from `BOS`; stops at `EOS` (not included) or after `max_len` tokens.
    pub fn generate(&self, z: &Latents<T>, strategy: Strategy, max_len: usize) -> Result<Vec<u32>, ModelError> {
        Ok(self.generate_batch(&[z.clone()], strategy, max_len)?.remove(0))
    }

    /// [`QkvaeModel::generate`] for several latent sets at once. Sampling draws
    /// from one stream seeded by the strategy, in batch order.
    pub fn generate_batch(&self, zs: &[Latents<T>], strategy: Strategy, max_len: usize) -> Result<Vec<Vec<u32>>, ModelError> {
        let n = zs.len();
        let max_len = max_len.min(self.cfg.max_len + 1);
        let mut rng = match strategy {
            Strategy::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Strategy::Greedy => None,
        };
        let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        let refs: Vec<&Latents<T>> = zs.iter().collect();
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let t = prefixes[0].len();
            let mut g = Graph::frozen(&self.store);
            let zv = self.latent_vars(&mut g, &refs)?;
            let ids: Vec<u32> = prefixes.iter().flatten().copied().collect();
            let (logits, _) = self.decode_graph(&mut g, zv, &ids, n, t, &vec![t; n])?;
            let logits = g.value(logits);
            for i in 0..n {
                let row = logits.row(i * t + t - 1);
                let next = if done[i] {
                    PAD
                } else {
                    match (strategy, rng.as_mut()) {
                        (Strategy::Sample { temperature, .. }, Some(r)) => sample_token(row, temperature, r),
                        _ => argmax(row),
                    }
                };
                if next == EOS {
                    done[i] = true;
                }
                prefixes[i].push(next);
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| p[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect())
            .collect())
    }

    /// Latent draw from the standard Normal prior.
    pub fn sample_prior(&self, rng: &mut impl Rng) -> Latents<T> {
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect() };
        let sem = (0..self.cfg.slots).map(|_| draw(self.cfg.slot_width())).collect();
        let syn = (self.cfg.mode == Mode::Qkvae).then(|| draw(self.cfg.d_syn));
        Latents { sem, syn }
    }

    pub fn to_checkpoint(&self, vocab: &Vocab) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.entries(),
            tensors: self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            vocab: vocab.words().to_vec(),
        }
    }

    /// Rebuilds the model from a checkpoint. Extra tensors are ignored; missing
    /// or misshapen parameters are errors.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, Vocab), ModelError> {
        let cfg = ModelConfig::from_entries(&ck.config)?;
        let mut model = Self::new(cfg)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = ck
                .tensor(&name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(CheckpointError::Shape(name).into());
            }
            *model.store.get_mut(id) = t.clone();
        }
        let vocab = Vocab::from_words(ck.vocab.clone()).ok_or(CheckpointError::Vocab)?;
        if vocab.len() != model.cfg.vocab_size {
            return Err(CheckpointError::Vocab.into());
        }
        Ok((model, vocab))
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_token<T: Scalar>(row: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature <= 0.0 {
        return argmax(row);
    }
    let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|v| ((v.to_f64_lossy() - max) / temperature).exp()).collect();
    match WeightedIndex::new(&weights) {
        Ok(d) => d.sample(rng) as u32,
        Err(_) => argmax(row),
    }
}
