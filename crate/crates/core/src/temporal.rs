//! Temporal alignment of the aligned audio and video sequences into one
//! `[51 × 2d]` fused sequence, plus the baselines it is compared against.
//!
//! ```text
//! left  = E_a + L(Conv1d(LN(E_a)) ⊗ SiLU(LN(E_v)))
//! right = E_v + L(Conv1d(LN(E_v)) ⊗ SiLU(LN(E_a)))
//! E_av  = [left | right]
//! ```

use rand::Rng;

use crate::align::CrossAttention;
use crate::config::TemporalVariant;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, Conv, Linear, NormLinear};
use crate::params::ParamId;
use crate::tensor::{Scalar, Tensor};

fn check_pair<T: Scalar>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a)?, g.shape(b)?);
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(op, sa, sb));
    }
    Ok(())
}

/// One side of the gated convolutional block.
#[derive(Clone, Copy, Debug)]
pub struct GatedSide {
    pub conv_in: NormLinear,
    pub gate_in: NormLinear,
    pub conv: Conv,
    pub out: Linear,
}

impl GatedSide {
    fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, d: usize, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            conv_in: b.norm_linear("conv_in", d, d, eps)?,
            gate_in: b.norm_linear("gate_in", d, d, eps)?,
            conv: b.conv("conv", width, d)?,
            out: b.zero_linear("out", d, d)?,
        })
    }

    /// Returns the side output and its gate `SiLU(LN(other))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, own: Var, other: Var) -> Result<(Var, Var)> {
        let c = self.conv_in.forward(g, own)?;
        let c = self.conv.forward(g, c)?;
        let gate = self.gate_in.forward(g, other)?;
        let gate = g.silu(gate)?;
        let mixed = g.mul(c, gate)?;
        let delta = self.out.forward(g, mixed)?;
        Ok((g.add(own, delta)?, gate))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalAlign {
    pub left: GatedSide,
    pub right: GatedSide,
}

/// Fused sequence and the two gate tensors that produced it.
#[derive(Clone, Copy, Debug)]
pub struct TemporalOut {
    pub fused: Var,
    pub gates: Option<(Var, Var)>,
}

impl TemporalAlign {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, d: usize, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            left: GatedSide::build(&mut b.scope("left"), d, width, eps)?,
            right: GatedSide::build(&mut b.scope("right"), d, width, eps)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, e_a: Var, e_v: Var) -> Result<TemporalOut> {
        check_pair(g, "temporal_align", e_a, e_v)?;
        let (left, gl) = self.left.forward(g, e_a, e_v)?;
        let (right, gr) = self.right.forward(g, e_v, e_a)?;
        Ok(TemporalOut {
            fused: g.concat_cols(&[left, right])?,
            gates: Some((gl, gr)),
        })
    }
}

/// Feature-axis concatenation with no parameters.
pub fn temporal_concat<T: Scalar>(g: &mut Graph<'_, T>, e_a: Var, e_v: Var) -> Result<Var> {
    check_pair(g, "temporal_concat", e_a, e_v)?;
    g.concat_cols(&[e_a, e_v])
}

/// Audio and video attend to text, then to each other; an adapter maps the
/// concatenation back to `2d`.
#[derive(Clone, Copy, Debug)]
pub struct TcaBlock {
    pub audio_text: CrossAttention,
    pub video_text: CrossAttention,
    pub audio_video: CrossAttention,
    pub video_audio: CrossAttention,
    pub adapter: Linear,
}

impl TcaBlock {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, d: usize, scaled: bool) -> Result<Self> {
        Ok(Self {
            audio_text: CrossAttention::build(&mut b.scope("a_t"), d, d, d, scaled)?,
            video_text: CrossAttention::build(&mut b.scope("v_t"), d, d, d, scaled)?,
            audio_video: CrossAttention::build(&mut b.scope("a_v"), d, d, d, scaled)?,
            video_audio: CrossAttention::build(&mut b.scope("v_a"), d, d, d, scaled)?,
            adapter: b.linear("adapter", 2 * d, 2 * d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, e_t: Var, e_a: Var, e_v: Var) -> Result<Var> {
        check_pair(g, "tca", e_a, e_v)?;
        check_pair(g, "tca", e_t, e_a)?;
        let at = self.audio_text.forward(g, e_t, e_a)?.output;
        let a1 = g.add(e_a, at)?;
        let vt = self.video_text.forward(g, e_t, e_v)?.output;
        let v1 = g.add(e_v, vt)?;
        let av = self.audio_video.forward(g, v1, a1)?.output;
        let a2 = g.add(a1, av)?;
        let va = self.video_audio.forward(g, a1, v1)?.output;
        let v2 = g.add(v1, va)?;
        let cat = g.concat_cols(&[a2, v2])?;
        self.adapter.forward(g, cat)
    }
}

/// Gated block with a diagonal state-space scan over the token axis:
/// `X + L(Scan(SiLU(Conv1d(L(X)))) ⊗ SiLU(L(X)))` with `X = [E_a | E_v]`.
#[derive(Clone, Copy, Debug)]
pub struct MambaBlock {
    pub in_x: Linear,
    pub in_z: Linear,
    pub conv: Conv,
    /// Per-channel decay is `sigmoid(decay_logit)`.
    pub decay_logit: ParamId,
    pub input: ParamId,
    pub output: ParamId,
    pub skip: ParamId,
    pub out: Linear,
}

impl MambaBlock {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, d: usize, width: usize) -> Result<Self> {
        let c = 2 * d;
        Ok(Self {
            in_x: b.linear("in_x", c, c)?,
            in_z: b.linear("in_z", c, c)?,
            conv: b.conv("conv", width, c)?,
            decay_logit: b.zeros("ssm.decay_logit", &[c])?,
            input: b.tensor("ssm.input", Tensor::ones(&[c]))?,
            output: b.tensor("ssm.output", Tensor::ones(&[c]))?,
            skip: b.tensor("ssm.skip", Tensor::ones(&[c]))?,
            out: b.linear("out", c, c)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, e_a: Var, e_v: Var) -> Result<Var> {
        check_pair(g, "mamba", e_a, e_v)?;
        let x = g.concat_cols(&[e_a, e_v])?;
        let xb = self.in_x.forward(g, x)?;
        let xb = self.conv.forward(g, xb)?;
        let xb = g.silu(xb)?;
        let logit = g.param(self.decay_logit)?;
        let decay = g.sigmoid(logit)?;
        let (bi, co, sk) = (g.param(self.input)?, g.param(self.output)?, g.param(self.skip)?);
        let y = g.diag_scan(xb, decay, bi, co, sk)?;
        let z = self.in_z.forward(g, x)?;
        let z = g.silu(z)?;
        let y = g.mul(y, z)?;
        let y = self.out.forward(g, y)?;
        g.add(x, y)
    }
}

/// Every temporal variant behind one `[51 × 2d]` contract.
#[derive(Clone, Copy, Debug)]
pub enum TemporalBlock {
    Full(TemporalAlign),
    Concat,
    Tca(TcaBlock),
    Mamba(MambaBlock),
}

impl TemporalBlock {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        variant: TemporalVariant,
        d: usize,
        width: usize,
        eps: f64,
        scaled: bool,
    ) -> Result<Self> {
        Ok(match variant {
            TemporalVariant::Full => TemporalBlock::Full(TemporalAlign::build(b, d, width, eps)?),
            TemporalVariant::Concat => TemporalBlock::Concat,
            TemporalVariant::Tca => TemporalBlock::Tca(TcaBlock::build(b, d, scaled)?),
            TemporalVariant::Mamba => TemporalBlock::Mamba(MambaBlock::build(b, d, width)?),
        })
    }

    pub fn variant(&self) -> TemporalVariant {
        match self {
            TemporalBlock::Full(_) => TemporalVariant::Full,
            TemporalBlock::Concat => TemporalVariant::Concat,
            TemporalBlock::Tca(_) => TemporalVariant::Tca,
            TemporalBlock::Mamba(_) => TemporalVariant::Mamba,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, e_t: Var, e_a: Var, e_v: Var) -> Result<TemporalOut> {
        let fused = match self {
            TemporalBlock::Full(b) => return b.forward(g, e_a, e_v),
            TemporalBlock::Concat => temporal_concat(g, e_a, e_v)?,
            TemporalBlock::Tca(b) => b.forward(g, e_t, e_a, e_v)?,
            TemporalBlock::Mamba(b) => b.forward(g, e_a, e_v)?,
        };
        Ok(TemporalOut { fused, gates: None })
    }
}
