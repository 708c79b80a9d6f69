//! Pairwise vector attention.
//!
//! Instead of a scalar `N×N` attention matrix, every query/key pair yields a
//! per-channel weight vector:
//!
//! ```text
//! a[i, j, :] = softmax_j( proj(f_q(z_i) ⊙ f_k(z_j)) )
//! y_i        = Σ_j a[i, j, :] ⊙ f_v(z_j)
//! ```
//!
//! With `d == C` the projection is omitted and the layer equals multi-head
//! attention with one head per channel and unscaled logits.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, DenseLayer, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct VectorAttentionLayer {
    pub fq: DenseLayer,
    pub fk: DenseLayer,
    pub fv: DenseLayer,
    /// Maps the `d`-wide query/key product to the value width `C`; absent when `d == C`.
    pub proj: Option<DenseLayer>,
    pub width: usize,
    pub inner: usize,
}

impl VectorAttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        inner: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fq = DenseLayer::new(store, &format!("{name}/fq"), width, inner, rng);
        let fk = DenseLayer::new(store, &format!("{name}/fk"), width, inner, rng);
        let fv = DenseLayer::new(store, &format!("{name}/fv"), width, width, rng);
        let proj = (inner != width)
            .then(|| DenseLayer::new(store, &format!("{name}/proj"), inner, width, rng));
        VectorAttentionLayer {
            fq,
            fk,
            fv,
            proj,
            width,
            inner,
        }
    }

    pub fn num_params(width: usize, inner: usize) -> usize {
        let mut n = 2 * DenseLayer::num_params(width, inner) + DenseLayer::num_params(width, width);
        if inner != width {
            n += DenseLayer::num_params(inner, width);
        }
        n
    }

    /// Attention tensor `[N×N×C]`, normalized over the second axis.
    pub fn attention(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.width {
            return Err(Error::dim(
                "vector_attention",
                format!("tokens {:?} for width {}", s, self.width),
            ));
        }
        let n = s[0];
        let q = self.fq.forward(g, p, z)?;
        let k = self.fk.forward(g, p, z)?;
        let mut logits = g.pairwise_product(q, k)?;
        if let Some(proj) = &self.proj {
            let flat = g.reshape(logits, [n * n, self.inner])?;
            let flat = proj.forward(g, p, flat)?;
            logits = g.reshape(flat, [n, n, self.width])?;
        }
        // softmax over j: move j to the trailing axis and back
        let by_channel = g.permute_last2(logits)?;
        let attn = g.softmax(by_channel);
        g.permute_last2(attn)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let attn = self.attention(g, p, z)?;
        let v = self.fv.forward(g, p, z)?;
        g.pair_weighted_sum(attn, v)
    }
}

/// Evaluates the layer on a concrete token matrix.
pub fn vector_attention(z: &Tensor, layer: &VectorAttentionLayer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let zv = g.leaf(z.clone());
    let y = layer.forward(&mut g, &p, zv)?;
    Ok(g.value(y).clone())
}
