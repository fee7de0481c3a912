use rand::Rng;

use super::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

/// Padded batch of sequences stored as `[batch * len, width]` rows.
///
/// Rows at positions `>= lengths[b]` are padding; attention never reads them.
#[derive(Debug, Clone)]
pub struct Seq {
    pub x: Var,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl Seq {
    /// A batch with no padding.
    pub fn dense(x: Var, batch: usize, len: usize) -> Self {
        Seq {
            x,
            batch,
            len,
            lengths: vec![len; batch],
        }
    }

    pub fn with_x(&self, x: Var) -> Self {
        Seq {
            x,
            batch: self.batch,
            len: self.len,
            lengths: self.lengths.clone(),
        }
    }

    pub fn is_padded(&self) -> bool {
        self.lengths.iter().any(|&l| l != self.len)
    }

    /// Row index of position `t` in sequence `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.len + t
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        g.tape.layer_norm(x, gain, bias, T::lit(LN_EPS))
    }
}

/// Two affine maps with a GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        let h = g.dropout(h)?;
        self.outer.forward(g, h)
    }
}

/// Projections of one multi-head attention block.
///
/// Heads are stored concatenated: `w_q` is `[d_model, heads * d_k]`, and the
/// key and value projections take their own source widths.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub heads: usize,
    pub d_k: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

impl MhaParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_key_src: usize,
        d_value_src: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads >= 1 && d_model % heads == 0, "d_model must split evenly over heads");
        let d_k = d_model / heads;
        let width = heads * d_k;
        MhaParams {
            heads,
            d_k,
            w_q: Linear::new(store, &format!("{name}.q"), d_model, width, false, rng),
            w_k: Linear::new(store, &format!("{name}.k"), d_key_src, width, false, rng),
            w_v: Linear::new(store, &format!("{name}.v"), d_value_src, width, false, rng),
            w_o: Linear::new(store, &format!("{name}.o"), width, d_model, false, rng),
        }
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights, `[.., |Q|, |V|]`.
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k) V` with an optional mask (true = allowed).
///
/// Accepts single matrices (`Q: [|Q|, d_k]`) or batches (`Q: [N, |Q|, d_k]`).
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let rank = sk.len();
    if rank < 2 || sv.len() != rank || sk[rank - 2] != sv[rank - 2] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: sk.to_vec(),
            rhs: sv.to_vec(),
        });
    }
    let d_k = *sq.last().expect("rank >= 1");
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::lit(d_k as f64).sqrt())?;
    let weights = tape.masked_softmax(scores, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok(AttentionOutput { out, weights })
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, len: usize, heads: usize, d_k: usize) -> Result<Var> {
    if heads == 1 {
        return tape.reshape(x, &[batch, len, d_k]);
    }
    let x = tape.reshape(x, &[batch, len, heads, d_k])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * heads, len, d_k])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, len: usize, heads: usize, d_k: usize) -> Result<Var> {
    if heads == 1 {
        return tape.reshape(x, &[batch * len, d_k]);
    }
    let x = tape.reshape(x, &[batch, heads, len, d_k])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * len, heads * d_k])
}

/// Builds the `[batch, heads, |Q|, |S|]` mask from source padding and an
/// optional shared `[|Q|, |S|]` pattern. `None` when nothing is blocked.
fn build_mask(target: &Seq, source: &Seq, heads: usize, pattern: Option<&[bool]>) -> Option<Vec<bool>> {
    if pattern.is_none() && !source.is_padded() {
        return None;
    }
    let (tq, tk) = (target.len, source.len);
    let mut mask = Vec::with_capacity(target.batch * heads * tq * tk);
    for b in 0..target.batch {
        let valid = source.lengths[b];
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    mask.push(j < valid && pattern.map_or(true, |p| p[i * tk + j]));
                }
            }
        }
    }
    Some(mask)
}

/// Multi-head attention where keys and values come from separate sources.
///
/// `source_k` and `source_v` index the same slots, so their lengths must
/// agree. With `source_k == source_v` this is ordinary cross-attention, and
/// with all three equal it is self-attention. `pattern` is an extra
/// `[|target|, |source|]` mask shared across the batch.
pub fn mha<T: Scalar>(
    g: &mut Graph<T>,
    target: &Seq,
    source_k: &Seq,
    source_v: &Seq,
    params: &MhaParams,
    pattern: Option<&[bool]>,
) -> Result<AttentionOutput> {
    if source_k.len != source_v.len || source_k.lengths != source_v.lengths || source_k.batch != target.batch {
        return Err(TensorError::ShapeMismatch {
            op: "mha",
            lhs: vec![source_k.batch, source_k.len],
            rhs: vec![source_v.batch, source_v.len],
        });
    }
    let (b, tq, tk) = (target.batch, target.len, source_k.len);
    let (h, dk) = (params.heads, params.d_k);
    let q = params.w_q.forward(g, target.x)?;
    let k = params.w_k.forward(g, source_k.x)?;
    let v = params.w_v.forward(g, source_v.x)?;
    let q = split_heads(&mut g.tape, q, b, tq, h, dk)?;
    let k = split_heads(&mut g.tape, k, b, tk, h, dk)?;
    let v = split_heads(&mut g.tape, v, b, tk, h, dk)?;
    let mask = build_mask(target, source_k, h, pattern);
    let att = attention(&mut g.tape, q, k, v, mask.as_deref())?;
    let merged = merge_heads(&mut g.tape, att.out, b, tq, h, dk)?;
    let out = params.w_o.forward(g, merged)?;
    Ok(AttentionOutput {
        out,
        weights: att.weights,
    })
}

/// `SA(T) = MHA(T, T, T)`.
pub fn sa<T: Scalar>(g: &mut Graph<T>, t: &Seq, params: &MhaParams, pattern: Option<&[bool]>) -> Result<Var> {
    Ok(mha(g, t, t, t, params, pattern)?.out)
}

/// `CA(T, S) = MHA(T, S, S)`.
pub fn ca<T: Scalar>(g: &mut Graph<T>, t: &Seq, s: &Seq, params: &MhaParams) -> Result<Var> {
    Ok(mha(g, t, s, s, params, None)?.out)
}
