use rand::Rng;

use super::layers::{mha, FeedForward, LayerNormParams, MhaParams, Seq};
use super::params::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Result, TensorError, Var};

/// One post-norm Transformer layer: self-attention, optional cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct BlockLayer {
    pub self_attn: MhaParams,
    pub ln_self: LayerNormParams,
    pub cross: Option<(MhaParams, LayerNormParams)>,
    pub ff: FeedForward,
    pub ln_ff: LayerNormParams,
}

/// `depth` layers sharing `d_model`. Depth 0 is the identity map.
#[derive(Debug, Clone)]
pub struct BlockStack {
    pub layers: Vec<BlockLayer>,
    pub d_model: usize,
}

/// Source widths for the cross-attention of decoder layers.
#[derive(Debug, Clone, Copy)]
pub struct CrossWidths {
    pub key: usize,
    pub value: usize,
}

impl BlockStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        depth: usize,
        cross: Option<CrossWidths>,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|d| {
                let p = format!("{name}.{d}");
                BlockLayer {
                    self_attn: MhaParams::new(store, &format!("{p}.sa"), d_model, d_model, d_model, heads, rng),
                    ln_self: LayerNormParams::new(store, &format!("{p}.ln_sa"), d_model),
                    cross: cross.map(|w| {
                        (
                            MhaParams::new(store, &format!("{p}.xa"), d_model, w.key, w.value, heads, rng),
                            LayerNormParams::new(store, &format!("{p}.ln_xa"), d_model),
                        )
                    }),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d_model, 4 * d_model, rng),
                    ln_ff: LayerNormParams::new(store, &format!("{p}.ln_ff"), d_model),
                }
            })
            .collect();
        BlockStack { layers, d_model }
    }

    pub fn encoder<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, d_model, heads, depth, None, rng)
    }

    pub fn decoder<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        depth: usize,
        widths: CrossWidths,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, d_model, heads, depth, Some(widths), rng)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Lower-triangular `[n, n]` pattern: position `i` sees `j <= i`.
pub fn causal_pattern(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

fn residual_norm<T: Scalar>(g: &mut Graph<T>, x: Var, update: Var, ln: &LayerNormParams) -> Result<Var> {
    let update = g.dropout(update)?;
    let sum = g.tape.add(x, update)?;
    ln.forward(g, sum)
}

/// `TransEnc(T)`: self-attention then feed-forward per layer.
pub fn trans_enc<T: Scalar>(g: &mut Graph<T>, t: &Seq, stack: &BlockStack) -> Result<Seq> {
    check_lengths("trans_enc", t)?;
    let mut x = t.x;
    for layer in &stack.layers {
        let cur = t.with_x(x);
        let a = mha(g, &cur, &cur, &cur, &layer.self_attn, None)?.out;
        x = residual_norm(g, x, a, &layer.ln_self)?;
        let f = layer.ff.forward(g, x)?;
        x = residual_norm(g, x, f, &layer.ln_ff)?;
    }
    Ok(t.with_x(x))
}

fn check_lengths(op: &'static str, s: &Seq) -> Result<()> {
    if s.lengths.iter().any(|&l| l == 0 || l > s.len) || s.lengths.len() != s.batch {
        return Err(TensorError::InvalidShape {
            op,
            msg: format!("sequence lengths {:?} invalid for padded length {}", s.lengths, s.len),
        });
    }
    Ok(())
}

/// Result of a decoder stack, with the cross-attention weights of every layer.
pub struct DecodeTrace {
    pub out: Seq,
    pub cross_weights: Vec<Var>,
}

/// Shared decoder body: `FF(MHA(SA(T̃), S_K, S_V))` per layer.
///
/// `self_pattern` is an optional `[|T|, |T|]` mask applied in every
/// self-attention (the causal pattern for autoregressive decoding).
pub fn decode_layers<T: Scalar>(
    g: &mut Graph<T>,
    t: &Seq,
    s_k: &Seq,
    s_v: &Seq,
    stack: &BlockStack,
    self_pattern: Option<&[bool]>,
) -> Result<DecodeTrace> {
    check_lengths("decoder target", t)?;
    check_lengths("decoder source", s_k)?;
    if s_k.len != s_v.len || s_k.lengths != s_v.lengths {
        return Err(TensorError::ShapeMismatch {
            op: "qkv_dec",
            lhs: vec![s_k.batch, s_k.len],
            rhs: vec![s_v.batch, s_v.len],
        });
    }
    let mut x = t.x;
    let mut cross_weights = Vec::with_capacity(stack.depth());
    for layer in &stack.layers {
        let (cross, ln_cross) = layer.cross.as_ref().ok_or(TensorError::InvalidShape {
            op: "decoder",
            msg: "stack has no cross-attention parameters".into(),
        })?;
        let cur = t.with_x(x);
        let a = mha(g, &cur, &cur, &cur, &layer.self_attn, self_pattern)?.out;
        x = residual_norm(g, x, a, &layer.ln_self)?;
        let c = mha(g, &t.with_x(x), s_k, s_v, cross, None)?;
        cross_weights.push(c.weights);
        x = residual_norm(g, x, c.out, ln_cross)?;
        let f = layer.ff.forward(g, x)?;
        x = residual_norm(g, x, f, &layer.ln_ff)?;
    }
    Ok(DecodeTrace {
        out: t.with_x(x),
        cross_weights,
    })
}

/// `TransDec(T, S)`, non-autoregressive.
pub fn trans_dec<T: Scalar>(g: &mut Graph<T>, t: &Seq, s: &Seq, stack: &BlockStack) -> Result<Seq> {
    Ok(decode_layers(g, t, s, s, stack, None)?.out)
}

/// `QKVDec(T; S_K; S_V)`: cross-attention keys from `s_k`, values from `s_v`.
pub fn qkv_dec<T: Scalar>(g: &mut Graph<T>, t: &Seq, s_k: &Seq, s_v: &Seq, stack: &BlockStack) -> Result<Seq> {
    Ok(decode_layers(g, t, s_k, s_v, stack, None)?.out)
}

/// Causal `TransDec` over the whole prefix (every position's output).
pub fn ar_trans_dec_seq<T: Scalar>(g: &mut Graph<T>, prefix: &Seq, s: &Seq, stack: &BlockStack) -> Result<Seq> {
    ar_qkv_dec_seq(g, prefix, s, s, stack)
}

/// Causal `QKVDec` over the whole prefix (every position's output).
pub fn ar_qkv_dec_seq<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &Seq,
    s_k: &Seq,
    s_v: &Seq,
    stack: &BlockStack,
) -> Result<Seq> {
    let pattern = causal_pattern(prefix.len);
    Ok(decode_layers(g, prefix, s_k, s_v, stack, Some(&pattern))?.out)
}

/// Rows holding the last valid position of every sequence: `[batch, d_model]`.
pub fn last_positions<T: Scalar>(g: &mut Graph<T>, s: &Seq) -> Result<Var> {
    let idx: Vec<usize> = (0..s.batch).map(|b| s.row(b, s.lengths[b] - 1)).collect();
    g.tape.gather(s.x, &idx)
}

/// `ARTransDec(prefix; S)`: representation of the final prefix position.
pub fn ar_trans_dec<T: Scalar>(g: &mut Graph<T>, prefix: &Seq, s: &Seq, stack: &BlockStack) -> Result<Var> {
    check_lengths("ar_trans_dec", prefix)?;
    let out = ar_trans_dec_seq(g, prefix, s, stack)?;
    last_positions(g, &out)
}

/// `ARQKVDec(prefix; S_K; S_V)`: representation of the final prefix position.
pub fn ar_qkv_dec<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &Seq,
    s_k: &Seq,
    s_v: &Seq,
    stack: &BlockStack,
) -> Result<Var> {
    check_lengths("ar_qkv_dec", prefix)?;
    let out = ar_qkv_dec_seq(g, prefix, s_k, s_v, stack)?;
    last_positions(g, &out)
}
