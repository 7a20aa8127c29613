//! The composed sentiment model:
//! explanation alignment → temporal alignment → text-routed fusion → gate-fusion head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::ExplanationAlign;
use crate::config::{FusionVariant, Modality, ModelConfig};
use crate::data::{normalize_length, FeatureRecord, CONTENT_TOKENS, MODEL_TOKENS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::GateFusionHead;
use crate::nn::Builder;
use crate::params::{ParamId, ParamStore};
use crate::smoe::{DenseTransformer, LayerOut, SmoeStack};
use crate::temporal::TemporalBlock;
use crate::tensor::{Scalar, Tensor};

/// One record prepared for the model: length-normalised features and the
/// explanation matrices (zeroed when explanations are disabled).
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub id: String,
    /// Text, audio, video; each `[50 × d_m]`.
    pub features: [Tensor<T>; 3],
    pub real: [usize; 3],
    /// Comments, audio explanation, video explanation; each `[L_E × d_t]`.
    pub explanations: [Tensor<T>; 3],
    pub label: T,
}

impl<T: Scalar> ModelInput<T> {
    pub fn from_record(rec: &FeatureRecord, cfg: &ModelConfig) -> Result<Self> {
        let widths = [cfg.d_t, cfg.d_a, cfg.d_v];
        let raw = [&rec.text, &rec.audio, &rec.video];
        let mut features = Vec::with_capacity(3);
        let mut real = [0; 3];
        for (m, (t, &w)) in raw.iter().zip(&widths).enumerate() {
            if t.shape().len() != 2 || t.cols() != w {
                return Err(Error::Data(format!(
                    "record `{}`: {:?} features have shape {:?}, model expects width {w}",
                    rec.id,
                    Modality::ALL[m],
                    t.shape()
                )));
            }
            let (norm, mask) = normalize_length(&t.cast::<T>(), CONTENT_TOKENS)?;
            real[m] = crate::data::sequence::real_tokens(&mask);
            features.push(norm);
        }
        let mut explanations = Vec::with_capacity(3);
        for e in [&rec.comments, &rec.expl_audio, &rec.expl_video] {
            if e.shape().len() != 2 || e.cols() != cfg.d_t {
                return Err(Error::Data(format!(
                    "record `{}`: explanation shape {:?}, model expects width {}",
                    rec.id,
                    e.shape(),
                    cfg.d_t
                )));
            }
            explanations.push(if cfg.explanations {
                e.cast::<T>()
            } else {
                Tensor::zeros(e.shape())
            });
        }
        Ok(Self {
            id: rec.id.clone(),
            features: features.try_into().expect("three modalities"),
            real,
            explanations: explanations.try_into().expect("three explanations"),
            label: T::from_f64_lossy(rec.label as f64),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Smoe(SmoeStack),
    Transformer(DenseTransformer),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Indexed like [`Modality::ALL`]; `None` for excluded modalities.
    pub align: [Option<ExplanationAlign>; 3],
    /// Routing key used when text is excluded.
    pub route_key: Option<ParamId>,
    pub temporal: TemporalBlock,
    pub fusion: Fusion,
    pub head: GateFusionHead,
}

/// Per-sample outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[1 × 1]`
    pub score: Var,
    pub layers: Vec<LayerOut>,
    pub head_gate: Option<Var>,
    pub temporal_gates: Option<(Var, Var)>,
    pub fused: Var,
}

/// Inspection data for a single prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Selected expert indices per SMoE layer.
    pub experts: Vec<Vec<usize>>,
    pub expert_weights: Vec<Vec<f64>>,
    pub head_gate_mean: Option<f64>,
    pub temporal_gate_mean: Option<f64>,
}

fn mean_of<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64
}

impl Model {
    pub fn build<T: Scalar, R: Rng>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = Builder::new(store, rng);
        let widths = [c.d_t, c.d_a, c.d_v];
        let mut align = [None, None, None];
        for (m, modality) in Modality::ALL.iter().enumerate() {
            if c.modalities.contains(*modality) {
                align[m] = Some(ExplanationAlign::build(
                    &mut b.scope(&format!("align.{}", modality.tag())),
                    *modality,
                    c.align,
                    widths[m],
                    c.d_t,
                    c.d,
                    c.attention_scale,
                )?);
            }
        }
        let route_key = if c.modalities.text {
            None
        } else {
            Some(b.xavier("route_key", 1, c.d)?)
        };
        let temporal = TemporalBlock::build(
            &mut b.scope("temporal"),
            c.temporal,
            c.d,
            c.conv_width,
            c.norm_eps,
            c.attention_scale,
        )?;
        let fusion = match c.fusion {
            FusionVariant::Smoe => Fusion::Smoe(SmoeStack::build(
                &mut b.scope("smoe"),
                c.smoe.layers,
                c.d,
                2 * c.d,
                c.expert_hidden(),
                c.smoe.num_experts,
                c.smoe.top_k,
            )?),
            FusionVariant::Transformer => Fusion::Transformer(DenseTransformer::build(
                &mut b.scope("transformer"),
                c.smoe.layers,
                c.d,
                c.expert_hidden(),
                c.norm_eps,
                c.attention_scale,
            )?),
        };
        let head = GateFusionHead::build(
            &mut b.scope("head"),
            2 * c.d,
            c.head_hidden(),
            c.gating.then_some(c.gate_activation),
        )?;
        Ok(Self {
            config: config.clone(),
            align,
            route_key,
            temporal,
            fusion,
            head,
        })
    }

    /// Builds the model with parameters initialised from `seed`.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn aligned<T: Scalar>(&self, g: &mut Graph<'_, T>, input: &ModelInput<T>, m: usize) -> Result<Var> {
        match &self.align[m] {
            Some(block) => {
                let f = g.constant(input.features[m].clone())?;
                let e = g.constant(input.explanations[m].clone())?;
                block.forward(g, f, input.real[m], Some(e))
            }
            None => g.constant(Tensor::zeros(&[MODEL_TOKENS, self.config.d])),
        }
    }

    /// Full forward pass for one sample. `frozen` pins the expert selection of every SMoE layer.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        input: &ModelInput<T>,
        frozen: Option<&[Vec<usize>]>,
    ) -> Result<ForwardOut> {
        let e_t = self.aligned(g, input, 0)?;
        let e_a = self.aligned(g, input, 1)?;
        let e_v = self.aligned(g, input, 2)?;
        let ta = self.temporal.forward(g, e_t, e_a, e_v)?;
        let (fused, layers) = match &self.fusion {
            Fusion::Smoe(stack) => {
                let key = match self.route_key {
                    Some(id) => g.param(id)?,
                    None => g.rows(e_t, 0, 1)?,
                };
                stack.forward(g, key, ta.fused, frozen)?
            }
            Fusion::Transformer(t) => (t.forward(g, e_t, ta.fused)?.0, Vec::new()),
        };
        let head = self.head.forward(g, fused)?;
        Ok(ForwardOut {
            score: head.score,
            layers,
            head_gate: head.gate,
            temporal_gates: ta.gates,
            fused,
        })
    }

    pub fn trace<T: Scalar>(&self, g: &Graph<'_, T>, out: &ForwardOut) -> Result<Trace> {
        let temporal_gate_mean = match out.temporal_gates {
            Some((l, r)) => Some((mean_of(g.value(l)?) + mean_of(g.value(r)?)) / 2.0),
            None => None,
        };
        Ok(Trace {
            experts: out.layers.iter().map(|l| l.routing.indices.clone()).collect(),
            expert_weights: out.layers.iter().map(|l| l.routing.weights.clone()).collect(),
            head_gate_mean: out.head_gate.map(|v| g.value(v).map(mean_of)).transpose()?,
            temporal_gate_mean,
        })
    }

    /// Score and trace for one prepared input.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<(f64, Trace)> {
        let mut g = Graph::with_params(store);
        let out = self.forward(&mut g, input, None)?;
        let score = g.value(out.score)?.data()[0].as_f64();
        Ok((score, self.trace(&g, &out)?))
    }
}
