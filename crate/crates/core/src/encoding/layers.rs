//! Parameterized building blocks shared by the encoder and MLSA.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.insert_normal(format!("{name}.weight"), fan_in, fan_out, std, rng);
        let bias = bias.then(|| store.insert_constant(format!("{name}.bias"), 1, fan_out, 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert_constant(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.insert_constant(format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Multi-head scaled dot-product self-attention over the rows of its input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "hidden size {dim} not divisible by {heads} heads");
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, false, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let dim = g.shape(x).1;
        let head_dim = dim / self.heads;
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, joined)
    }
}

/// Pre-norm transformer encoder layer: attention and feed-forward sublayers
/// with residual connections. No positional information is added here, so
/// the block is permutation-equivariant over rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attention: SelfAttention,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            attention: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = self.attn_norm.forward(g, x);
        let a = self.attention.forward(g, n);
        let h = g.add(x, a);
        let n = self.ff_norm.forward(g, h);
        let f = self.ff_in.forward(g, n);
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f);
        g.add(h, f)
    }
}
