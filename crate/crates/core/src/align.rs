//! Explanation alignment: each modality sequence is aligned with the
//! embedding of its explanation (comments for text) by cross-attention,
//! producing a 51-token sequence whose token 0 aggregates the content.

use rand::Rng;

use crate::config::{AlignMode, Modality};
use crate::data::{attach_agg_token, CONTENT_TOKENS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention_weights, Builder, Linear};
use crate::params::ParamId;
use crate::tensor::Scalar;

/// Output and attention weights of one cross-attention pass.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[L_E × d]`
    pub output: Var,
    /// `[L_E × L_F]`, rows sum to one.
    pub weights: Var,
}

/// `softmax((E W_Q)(F W_K)ᵀ) (F W_V)`: queries come from `e`, keys and values from `f`.
pub fn cross_attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    f: Var,
    e: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    scaled: bool,
) -> Result<Attended> {
    let q = g.matmul(e, w_q)?;
    let k = g.matmul(f, w_k)?;
    let v = g.matmul(f, w_v)?;
    let weights = attention_weights(g, q, k, scaled)?;
    let output = g.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub scaled: bool,
}

impl CrossAttention {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        d_query: usize,
        d_kv: usize,
        d: usize,
        scaled: bool,
    ) -> Result<Self> {
        Ok(Self {
            w_q: b.xavier("w_q", d_query, d)?,
            w_k: b.xavier("w_k", d_kv, d)?,
            w_v: b.xavier("w_v", d_kv, d)?,
            scaled,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var, e: Var) -> Result<Attended> {
        let (q, k, v) = (g.param(self.w_q)?, g.param(self.w_k)?, g.param(self.w_v)?);
        cross_attend(g, f, e, q, k, v, self.scaled)
    }
}

/// Builds token 0 from the aggregation parameter and the first `real`
/// content rows: `agg + softmax(agg · Xᵀ) X`, then prepends it.
pub fn aggregate<T: Scalar>(g: &mut Graph<'_, T>, agg: Var, content: Var, real: usize, scaled: bool) -> Result<Var> {
    let rows = g.shape(content)?[0];
    if real == 0 || real > rows {
        return Err(Error::Data(format!("{real} real tokens in a {rows}-token sequence")));
    }
    let x = g.rows(content, 0, real)?;
    let w = attention_weights(g, agg, x, scaled)?;
    let pooled = g.matmul(w, x)?;
    let token = g.add(agg, pooled)?;
    attach_agg_token(g, content, token)
}

#[derive(Clone, Copy, Debug)]
enum Mapping {
    Attention(CrossAttention),
    Linear(Linear),
}

/// Per-modality alignment block emitting `[51 × d]`.
#[derive(Clone, Copy, Debug)]
pub struct ExplanationAlign {
    pub modality: Modality,
    pub agg: ParamId,
    mapping: Mapping,
    scaled: bool,
}

impl ExplanationAlign {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        modality: Modality,
        mode: AlignMode,
        d_m: usize,
        d_t: usize,
        d: usize,
        scaled: bool,
    ) -> Result<Self> {
        let mapping = match mode {
            AlignMode::CrossAttention => Mapping::Attention(CrossAttention::build(b, d_t, d_m, d, scaled)?),
            AlignMode::Linear => Mapping::Linear(b.linear("proj", d_m, d)?),
        };
        Ok(Self {
            modality,
            agg: b.zeros("agg", &[1, d])?,
            mapping,
            scaled,
        })
    }

    pub fn mode(&self) -> AlignMode {
        match self.mapping {
            Mapping::Attention(_) => AlignMode::CrossAttention,
            Mapping::Linear(_) => AlignMode::Linear,
        }
    }

    pub fn attention(&self) -> Option<&CrossAttention> {
        match &self.mapping {
            Mapping::Attention(ca) => Some(ca),
            Mapping::Linear(_) => None,
        }
    }

    /// `features` is the length-normalised `[50 × d_m]` sequence of which the
    /// first `real` rows are genuine; `explanation` is `[L_E × d_t]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        real: usize,
        explanation: Option<Var>,
    ) -> Result<Var> {
        let rows = g.shape(features)?[0];
        if rows != CONTENT_TOKENS {
            return Err(Error::Data(format!(
                "{:?} features have {rows} tokens, expected {CONTENT_TOKENS}",
                self.modality
            )));
        }
        let agg = g.param(self.agg)?;
        match &self.mapping {
            Mapping::Attention(ca) => {
                let e = explanation.ok_or_else(|| {
                    Error::Data(format!("{:?} needs an explanation embedding for cross-attention", self.modality))
                })?;
                let f = g.rows(features, 0, real)?;
                let att = ca.forward(g, f, e)?;
                let produced = g.shape(att.output)?[0];
                let content = g.rows(att.output, 0, CONTENT_TOKENS)?;
                aggregate(g, agg, content, produced.min(CONTENT_TOKENS), self.scaled)
            }
            Mapping::Linear(lin) => {
                let content = lin.forward(g, features)?;
                aggregate(g, agg, content, real, self.scaled)
            }
        }
    }
}
