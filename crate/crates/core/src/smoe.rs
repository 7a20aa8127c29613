//! Text-routed sparse mixture of experts.
//!
//! One routing decision per sample is taken from the text aggregation token
//! and applied to every token of the fused audio-video sequence:
//! `Y = X + Σ_{i ∈ top-k} w_i · Expert_i(X)`, with `w` the softmax over the
//! selected router logits only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention_weights, Builder, Ffn, Linear, Norm};
use crate::params::ParamId;
use crate::tensor::{Scalar, Tensor};

/// Indices of the `k` largest logits in ascending index order; ties go to the lower index.
pub fn select_top_k<T: Scalar>(logits: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top_k = {k} with {} experts", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Softmax over the selected logits.
pub fn renormalize<T: Scalar>(logits: &[T], indices: &[usize]) -> Vec<T> {
    let mut w: Vec<T> = indices.iter().map(|&i| logits[i]).collect();
    crate::graph::softmax_in_place(&mut w);
    w
}

/// Routing on plain tensors: `logits = key · W_r + b_r`, then top-k and renormalisation.
pub fn route<T: Scalar>(key: &[T], w_r: &Tensor<T>, b_r: &Tensor<T>, k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let s = w_r.shape();
    if s.len() != 2 || s[0] != key.len() || b_r.numel() != s[1] {
        return Err(Error::shape("route", &[key.len()], s));
    }
    let logits: Vec<T> = (0..s[1])
        .map(|e| (0..s[0]).fold(b_r.data()[e], |acc, i| acc + key[i] * w_r.get2(i, e)))
        .collect();
    let idx = select_top_k(&logits, k)?;
    let w = renormalize(&logits, &idx);
    Ok((idx, w))
}

/// Routing decision of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerOut {
    pub output: Var,
    pub routing: Routing,
    /// Full softmax over all router logits, `[1 × E]`; feeds the balance term.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct SmoeLayer {
    pub router: Linear,
    pub experts: Vec<Ffn>,
    pub top_k: usize,
}

impl SmoeLayer {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        key_dim: usize,
        width: usize,
        hidden: usize,
        num_experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        if top_k == 0 || top_k > num_experts {
            return Err(Error::Config(format!("top_k = {top_k} with {num_experts} experts")));
        }
        let router = b.linear("router", key_dim, num_experts)?;
        let experts = (0..num_experts)
            .map(|i| b.ffn(&format!("expert{i}"), width, hidden))
            .collect::<Result<_>>()?;
        Ok(Self { router, experts, top_k })
    }

    /// `key` is `[1 × d]`, `x` is `[L × 2d]`. `frozen` overrides the selected indices.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, key: Var, x: Var, frozen: Option<&[usize]>) -> Result<LayerOut> {
        let logits = self.router.forward(g, key)?;
        let values: Vec<T> = g.value(logits)?.data().to_vec();
        let indices = match frozen {
            Some(f) => {
                if f.len() != self.top_k || f.iter().any(|&i| i >= self.experts.len()) || f.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Contract(format!("invalid frozen routing {f:?}")));
                }
                f.to_vec()
            }
            None => select_top_k(&values, self.top_k)?,
        };
        let selected = g.gather(logits, &indices)?;
        let selected = g.reshape(selected, &[1, indices.len()])?;
        let weights = g.softmax_rows(selected)?;
        let probs = g.softmax_rows(logits)?;

        let mut y = x;
        for (slot, &e) in indices.iter().enumerate() {
            let h = self.experts[e].forward(g, x)?;
            let w = g.gather(weights, &[slot])?;
            let h = g.scale_by(h, w)?;
            y = g.add(y, h)?;
        }
        let routing = Routing {
            weights: g.value(weights)?.data().iter().map(|v| v.as_f64()).collect(),
            logits: values.iter().map(|v| v.as_f64()).collect(),
            indices,
        };
        Ok(LayerOut { output: y, routing, probs })
    }
}

#[derive(Clone, Debug)]
pub struct SmoeStack {
    pub layers: Vec<SmoeLayer>,
}

impl SmoeStack {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        depth: usize,
        key_dim: usize,
        width: usize,
        hidden: usize,
        num_experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| SmoeLayer::build(&mut b.scope(&format!("layer{l}")), key_dim, width, hidden, num_experts, top_k))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        key: Var,
        x: Var,
        frozen: Option<&[Vec<usize>]>,
    ) -> Result<(Var, Vec<LayerOut>)> {
        if let Some(f) = frozen {
            if f.len() != self.layers.len() {
                return Err(Error::Contract(format!(
                    "frozen routing for {} layers, stack has {}",
                    f.len(),
                    self.layers.len()
                )));
            }
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(g, key, h, frozen.map(|f| f[l].as_slice()))?;
            h = out.output;
            outs.push(out);
        }
        Ok((h, outs))
    }
}

/// `E · Σ_e f_e · P̄_e`, with `f_e` the fraction of selections that went to
/// expert `e` and `P̄_e` the mean router probability, over a batch.
pub fn balance_loss<T: Scalar>(g: &mut Graph<'_, T>, probs: &[Var], routes: &[&Routing], num_experts: usize) -> Result<Var> {
    if probs.is_empty() || probs.len() != routes.len() {
        return Err(Error::Contract("balance loss needs one routing per probability row".into()));
    }
    let n = probs.len();
    let mut counts = vec![0.0; num_experts];
    let mut total = 0.0;
    for r in routes {
        for &i in &r.indices {
            counts[i] += 1.0;
            total += 1.0;
        }
    }
    let frac = Tensor::new(&[1, num_experts], counts.iter().map(|c| T::from_f64_lossy(c / total)).collect())?;
    let stacked = g.concat_rows(probs)?;
    let ones = g.constant(Tensor::full(&[1, n], T::from_f64_lossy(1.0 / n as f64)))?;
    let mean = g.matmul(ones, stacked)?;
    let f = g.constant(frac)?;
    let prod = g.mul(mean, f)?;
    let s = g.sum(prod)?;
    g.scale(s, T::from_f64_lossy(num_experts as f64))
}

/// Pre-norm single-head self-attention encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_norm: Norm,
    pub ffn: Ffn,
}

/// Dense baseline: self-attention over `[X ; L(E_t)]`, first `L` rows returned.
#[derive(Clone, Debug)]
pub struct DenseTransformer {
    pub text_proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub scaled: bool,
}

impl DenseTransformer {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        depth: usize,
        d: usize,
        hidden: usize,
        eps: f64,
        scaled: bool,
    ) -> Result<Self> {
        let w = 2 * d;
        let text_proj = b.linear("text_proj", d, w)?;
        let layers = (0..depth)
            .map(|l| {
                let mut s = b.scope(&format!("layer{l}"));
                Ok(EncoderLayer {
                    attn_norm: s.norm("attn_norm", w, eps)?,
                    w_q: s.xavier("w_q", w, w)?,
                    w_k: s.xavier("w_k", w, w)?,
                    w_v: s.xavier("w_v", w, w)?,
                    w_o: s.xavier("w_o", w, w)?,
                    ffn_norm: s.norm("ffn_norm", w, eps)?,
                    ffn: s.ffn("ffn", w, hidden)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            text_proj,
            layers,
            scaled,
        })
    }

    /// Returns the output and each layer's attention weights.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, e_t: Var, x: Var) -> Result<(Var, Vec<Var>)> {
        let len = g.shape(x)?[0];
        let t = self.text_proj.forward(g, e_t)?;
        let mut ctx = g.concat_rows(&[x, t])?;
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.attn_norm.forward(g, ctx)?;
            let (wq, wk, wv, wo) = (
                g.param(layer.w_q)?,
                g.param(layer.w_k)?,
                g.param(layer.w_v)?,
                g.param(layer.w_o)?,
            );
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let a = attention_weights(g, q, k, self.scaled)?;
            let o = g.matmul(a, v)?;
            let o = g.matmul(o, wo)?;
            ctx = g.add(ctx, o)?;
            let h = layer.ffn_norm.forward(g, ctx)?;
            let f = layer.ffn.forward(g, h)?;
            ctx = g.add(ctx, f)?;
            attn.push(a);
        }
        Ok((g.rows(ctx, 0, len)?, attn))
    }
}
