//! Attention building blocks.
//!
//! A transformer layer here is pre-norm with the residual carried by the
//! query stream: `y = x_q + Attn(norm(x_q), norm(x_kv))`, then
//! `y = y + FFN(norm(y))`. Cross stacks feed the same key/value source into
//! every layer while the query stream evolves; self stacks attend over
//! their own evolving stream. Each layer leaves a trace: per-head attention
//! logits, the head-averaged map, and the post-attention linear output.

use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_pos_emb<S: Scalar>(t: usize, d: usize) -> Result<Tensor<S>> {
    if d == 0 || d % 2 != 0 {
        return Err(TensorError::BadParam {
            op: "sinusoidal_pos_emb",
            detail: format!("width {d} must be even and positive"),
        });
    }
    let mut pe = Tensor::zeros(vec![t, d]);
    for p in 0..t {
        for i in 0..d / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.data_mut()[p * d + 2 * i] = S::from_f64(rate.sin());
            pe.data_mut()[p * d + 2 * i + 1] = S::from_f64(rate.cos());
        }
    }
    Ok(pe)
}

/// Tape handles for one attention sublayer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MhaNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Tape handles for one full transformer layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub mha: MhaNodes,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// What one layer exposes for distillation.
#[derive(Debug, Clone)]
pub struct AttnTap {
    /// Raw per-head scores `QK^T / sqrt(d_k)`, one `[.., T_q, T_kv]` node per
    /// head. Kept so maps can be re-softmaxed at other temperatures.
    pub head_logits: Vec<NodeId>,
    /// Head-averaged `row_softmax(logits, 1)`, the distillation artifact.
    pub map: NodeId,
    /// Output of the post-attention linear layer (before the residual add).
    pub post_attention: NodeId,
}

/// Where a stack's keys and values come from.
#[derive(Debug, Clone, Copy)]
pub enum KvSource {
    /// Self-attention: each layer attends over its own input stream.
    SelfStream,
    /// Cross-attention: every layer reads the same fixed source.
    Fixed(NodeId),
}

pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    q_in: NodeId,
    kv_in: NodeId,
    p: &MhaNodes,
    n_h: usize,
) -> Result<(NodeId, AttnTap)> {
    let d_model = g.value(q_in).last_dim();
    if n_h == 0 || d_model % n_h != 0 {
        return Err(TensorError::BadParam {
            op: "multi_head_attention",
            detail: format!("width {d_model} not divisible into {n_h} heads"),
        });
    }
    let d_k = d_model / n_h;
    let scale = S::from_f64(1.0 / (d_k as f64).sqrt());

    let q = g.matmul(q_in, p.wq)?;
    let q = g.add_broadcast(q, p.bq)?;
    let k = g.matmul(kv_in, p.wk)?;
    let k = g.add_broadcast(k, p.bk)?;
    let v = g.matmul(kv_in, p.wv)?;
    let v = g.add_broadcast(v, p.bv)?;

    let mut head_logits = Vec::with_capacity(n_h);
    let mut maps = Vec::with_capacity(n_h);
    let mut ctxs = Vec::with_capacity(n_h);
    for h in 0..n_h {
        let qh = g.slice_last(q, h * d_k, d_k)?;
        let kh = g.slice_last(k, h * d_k, d_k)?;
        let vh = g.slice_last(v, h * d_k, d_k)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let logits = g.scale(raw, scale)?;
        let map = g.row_softmax(logits, S::ONE)?;
        let ctx = g.matmul(map, vh)?;
        head_logits.push(logits);
        maps.push(map);
        ctxs.push(ctx);
    }
    let ctx = g.concat_last(&ctxs)?;
    let post = g.matmul(ctx, p.wo)?;
    let post = g.add_broadcast(post, p.bo)?;
    let map = g.mean_of(&maps)?;
    Ok((
        post,
        AttnTap {
            head_logits,
            map,
            post_attention: post,
        },
    ))
}

pub fn layer_forward<S: Scalar>(
    g: &mut Graph<S>,
    x_q: NodeId,
    x_kv: NodeId,
    p: &LayerNodes,
    n_h: usize,
) -> Result<(NodeId, AttnTap)> {
    let qn = g.layer_norm(x_q, p.ln1_g, p.ln1_b)?;
    let kn = if x_kv == x_q {
        qn
    } else {
        g.layer_norm(x_kv, p.ln1_g, p.ln1_b)?
    };
    let (attn, tap) = multi_head_attention(g, qn, kn, &p.mha, n_h)?;
    let y1 = g.add(x_q, attn)?;
    let fin = g.layer_norm(y1, p.ln2_g, p.ln2_b)?;
    let h = g.matmul(fin, p.w1)?;
    let h = g.add_broadcast(h, p.b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, p.w2)?;
    let h = g.add_broadcast(h, p.b2)?;
    let y = g.add(y1, h)?;
    Ok((y, tap))
}

pub fn stack_forward<S: Scalar>(
    g: &mut Graph<S>,
    x_q: NodeId,
    kv: KvSource,
    layers: &[LayerNodes],
    n_h: usize,
) -> Result<(NodeId, Vec<AttnTap>)> {
    let mut stream = x_q;
    let mut taps = Vec::with_capacity(layers.len());
    for layer in layers {
        let x_kv = match kv {
            KvSource::SelfStream => stream,
            KvSource::Fixed(n) => n,
        };
        let (y, tap) = layer_forward(g, stream, x_kv, layer, n_h)?;
        stream = y;
        taps.push(tap);
    }
    Ok((stream, taps))
}
