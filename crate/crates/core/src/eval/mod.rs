//! Evaluation: embedding separation, latent swaps, interpolation and tree metrics.

mod metrics;
mod tree;

pub use metrics::{
    distance, load_similarity_scores, paired_t_test, select_advae_variables, select_from_probabilities,
    separation_from_embeddings, separation_probability, EvalError, Metric, Report, Similarity, SlotSelection, TTest,
    TripletEmbedding,
};
pub use tree::{parse_bracketed, template_match, tree_edit_distance, ConstTree, ParseError};

use crate::model::{Latents, ModelError, QkvaeModel, Strategy};
use crate::scalar::Scalar;

/// Which latent a sentence embedding is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    /// All semantic slots concatenated.
    Sem,
    Syn,
    /// Every latent concatenated.
    Whole,
    /// One semantic slot, 0-based.
    Slot(usize),
}

impl std::str::FromStr for Variable {
    type Err = String;

    /// `sem`, `syn`, `whole`, or `z1`..`zL` (1-based).
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sem" => Ok(Variable::Sem),
            "syn" => Ok(Variable::Syn),
            "whole" => Ok(Variable::Whole),
            _ => s
                .strip_prefix('z')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| Variable::Slot(n - 1))
                .ok_or_else(|| format!("unknown variable '{s}' (expected sem, syn, whole or z1..zL)")),
        }
    }
}

/// Posterior-mean embedding of one variable.
pub fn select_variable<T: Scalar>(z: &Latents<T>, var: Variable) -> Result<Vec<f64>, EvalError> {
    let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    match var {
        Variable::Sem => Ok(f(&z.sem.concat())),
        Variable::Syn => z.syn.as_deref().map(f).ok_or(EvalError::Model(ModelError::Mode("model has no syntactic latent"))),
        Variable::Whole => Ok(f(&z.flatten())),
        Variable::Slot(l) => z.sem.get(l).map(|v| f(v)).ok_or(EvalError::Model(ModelError::SlotArity {
            expected: z.sem.len(),
            found: l + 1,
        })),
    }
}

/// Posterior means for many sentences, encoded in chunks.
pub fn encode_means<T: Scalar>(model: &QkvaeModel<T>, seqs: &[Vec<u32>], chunk: usize) -> Result<Vec<Latents<T>>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    for c in seqs.chunks(chunk.max(1)) {
        out.extend(model.encode_batch(c)?.iter().map(|p| p.means()));
    }
    Ok(out)
}

/// Semantic latents of `sem_src` with the syntactic latent of `syn_src`.
pub fn swap_latents<T: Scalar>(sem: &Latents<T>, syn: &Latents<T>) -> Latents<T> {
    Latents {
        sem: sem.sem.clone(),
        syn: syn.syn.clone(),
    }
}

/// ADVAE swap: every slot from `sem` except `syn_slot`, which comes from `syn`.
pub fn swap_slot<T: Scalar>(sem: &Latents<T>, syn: &Latents<T>, syn_slot: usize) -> Latents<T> {
    let mut z = sem.clone();
    z.sem[syn_slot] = syn.sem[syn_slot].clone();
    z
}

/// Greedy decoding of the posterior means.
pub fn reconstruct<T: Scalar>(model: &QkvaeModel<T>, tokens: &[u32]) -> Result<Vec<u32>, ModelError> {
    let z = model.encode(tokens)?.means();
    model.generate(&z, Strategy::Greedy, model.cfg.max_len + 1)
}

/// Greedy decoding of `z_sem(sem_src)` with `z_syn(syn_src)`.
pub fn transfer<T: Scalar>(model: &QkvaeModel<T>, sem_src: &[u32], syn_src: &[u32]) -> Result<Vec<u32>, ModelError> {
    let zs = model.encode_batch(&[sem_src.to_vec(), syn_src.to_vec()])?;
    let z = swap_latents(&zs[0].means(), &zs[1].means());
    model.generate(&z, Strategy::Greedy, model.cfg.max_len + 1)
}

/// [`transfer`] over many pairs, batched.
pub fn transfer_batch<T: Scalar>(
    model: &QkvaeModel<T>,
    pairs: &[(Vec<u32>, Vec<u32>)],
    chunk: usize,
) -> Result<Vec<Vec<u32>>, ModelError> {
    let sems: Vec<Vec<u32>> = pairs.iter().map(|p| p.0.clone()).collect();
    let syns: Vec<Vec<u32>> = pairs.iter().map(|p| p.1.clone()).collect();
    let zs = encode_means(model, &sems, chunk)?;
    let zy = encode_means(model, &syns, chunk)?;
    let swapped: Vec<Latents<T>> = zs.iter().zip(&zy).map(|(a, b)| swap_latents(a, b)).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for c in swapped.chunks(chunk.max(1)) {
        out.extend(model.generate_batch(c, Strategy::Greedy, model.cfg.max_len + 1)?);
    }
    Ok(out)
}

/// Greedy decodings along the straight line between the two sentences' latents,
/// `steps` evenly spaced points including both ends.
pub fn interpolate<T: Scalar>(model: &QkvaeModel<T>, a: &[u32], b: &[u32], steps: usize) -> Result<Vec<Vec<u32>>, ModelError> {
    if steps < 2 {
        return Err(ModelError::Config("interpolation needs at least 2 steps".into()));
    }
    let zs = model.encode_batch(&[a.to_vec(), b.to_vec()])?;
    let (za, zb) = (zs[0].means(), zs[1].means());
    let points: Vec<Latents<T>> = (0..steps)
        .map(|i| {
            if i == 0 {
                za.clone()
            } else if i == steps - 1 {
                zb.clone()
            } else {
                za.lerp(&zb, T::lit(i as f64 / (steps - 1) as f64))
            }
        })
        .collect();
    points
        .iter()
        .map(|z| model.generate(z, Strategy::Greedy, model.cfg.max_len + 1))
        .collect()
}

/// Syntactic agreement between generated and reference trees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferScores {
    pub n: usize,
    /// Mean raw tree edit distance.
    pub sted: f64,
    pub tma2: f64,
    pub tma3: f64,
}

/// Scores aligned pairs; `None` outputs (unparseable) count as mismatches with
/// distance equal to the reference size.
pub fn transfer_scores(outputs: &[Option<ConstTree>], references: &[ConstTree]) -> Result<TransferScores, EvalError> {
    if outputs.len() != references.len() {
        return Err(EvalError::LengthMismatch(outputs.len(), references.len()));
    }
    if outputs.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut sted, mut tma2, mut tma3) = (0.0, 0.0, 0.0);
    for (o, r) in outputs.iter().zip(references) {
        match o {
            Some(o) => {
                sted += tree_edit_distance(o, r) as f64;
                tma2 += f64::from(u8::from(template_match(o, r, 2)));
                tma3 += f64::from(u8::from(template_match(o, r, 3)));
            }
            None => sted += r.size() as f64,
        }
    }
    let n = outputs.len() as f64;
    Ok(TransferScores {
        n: outputs.len(),
        sted: sted / n,
        tma2: tma2 / n,
        tma3: tma3 / n,
    })
}

#[cfg(test)]
mod tests;
