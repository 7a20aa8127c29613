//! Gate-fusion regression head and the MSE objective.
//!
//! Only token 0 of the fused sequence reaches the head:
//! `score = MLP(gate(x) ⊗ x)` with `gate = sigmoid(L(x))` by default.

use rand::Rng;

use crate::config::GateActivation;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, Linear};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GateFusionHead {
    /// `None` disables gating.
    pub gate: Option<(Linear, GateActivation)>,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    /// `[1 × 1]`
    pub score: Var,
    /// `[1 × 2d]` gate values when gating is on.
    pub gate: Option<Var>,
}

impl GateFusionHead {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        width: usize,
        hidden: usize,
        gating: Option<GateActivation>,
    ) -> Result<Self> {
        let gate = match gating {
            Some(act) => Some((b.linear("gate", width, width)?, act)),
            None => None,
        };
        Ok(Self {
            gate,
            hidden: b.linear("hidden", width, hidden)?,
            out: b.linear("out", hidden, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fused: Var) -> Result<HeadOut> {
        let x = g.rows(fused, 0, 1)?;
        let (x, gate) = match &self.gate {
            Some((lin, act)) => {
                let z = lin.forward(g, x)?;
                let gv = match act {
                    GateActivation::Sigmoid => g.sigmoid(z)?,
                    GateActivation::Silu => g.silu(z)?,
                };
                (g.mul(gv, x)?, Some(gv))
            }
            None => (x, None),
        };
        let h = self.hidden.forward(g, x)?;
        let h = g.silu(h)?;
        let score = self.out.forward(g, h)?;
        Ok(HeadOut { score, gate })
    }
}

/// `(pred − label)²` for a single `[1 × 1]` prediction.
pub fn mse_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, label: T) -> Result<Var> {
    if g.value(pred)?.numel() != 1 {
        return Err(Error::shape("mse_loss", g.shape(pred)?, &[1]));
    }
    let shape = g.shape(pred)?.to_vec();
    let y = g.constant(Tensor::full(&shape, label))?;
    let diff = g.sub(pred, y)?;
    let sq = g.square(diff)?;
    g.sum(sq)
}

/// Mean of [`mse_loss`] over a batch.
pub fn batch_mse<T: Scalar>(g: &mut Graph<'_, T>, preds: &[Var], labels: &[T]) -> Result<Var> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut total = mse_loss(g, preds[0], labels[0])?;
    for (&p, &y) in preds.iter().zip(labels).skip(1) {
        let l = mse_loss(g, p, y)?;
        total = g.add(total, l)?;
    }
    g.scale(total, T::from_f64_lossy(1.0 / preds.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(gating: Option<GateActivation>, seed: u64) -> (ParamStore<f64>, GateFusionHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = {
            let mut b = Builder::new(&mut store, &mut rng);
            GateFusionHead::build(&mut b.scope("head"), 4, 5, gating).unwrap()
        };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        (store, h)
    }

    fn fused(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[51, 4], (0..204).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let (mut store, h) = head(Some(GateActivation::Sigmoid), 1);
        store.zero_prefix("head");
        *store.get_mut(h.out.b) = Tensor::new(&[1], vec![0.37]).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(fused(2)).unwrap();
        let out = h.forward(&mut g, x).unwrap();
        assert_eq!(g.value(out.score).unwrap().data(), &[0.37]);
    }

    #[test]
    fn saturated_gate_equals_ungated_path() {
        let (mut gated_store, gated) = head(Some(GateActivation::Sigmoid), 3);
        let (gw, gb) = gated.gate.map(|(l, _)| (l.w, l.b)).unwrap();
        *gated_store.get_mut(gw) = Tensor::zeros(&[4, 4]);
        *gated_store.get_mut(gb) = Tensor::full(&[4], 1e3);
        let (mut plain_store, plain) = head(None, 3);
        for (id, p) in plain_store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            *plain_store.get_mut(id) = gated_store.by_name(&p).unwrap().clone();
        }
        let x = fused(4);
        let score = |store: &ParamStore<f64>, h: &GateFusionHead| {
            let mut g = Graph::with_params(store);
            let v = g.constant(x.clone()).unwrap();
            let out = h.forward(&mut g, v).unwrap();
            g.value(out.score).unwrap().data()[0]
        };
        assert_eq!(score(&gated_store, &gated), score(&plain_store, &plain));
    }

    #[test]
    fn head_reads_only_token_zero() {
        let (store, h) = head(Some(GateActivation::Sigmoid), 5);
        let x = fused(6);
        let mut y = x.clone();
        y.data_mut()[4..].iter_mut().for_each(|v| *v = -*v * 3.0);
        let mut g = Graph::with_params(&store);
        let (a, b) = (g.constant(x).unwrap(), g.constant(y).unwrap());
        let (sa, sb) = (h.forward(&mut g, a).unwrap().score, h.forward(&mut g, b).unwrap().score);
        assert_eq!(g.value(sa).unwrap(), g.value(sb).unwrap());
    }

    #[test]
    fn head_passes_grad_check_in_every_mode() {
        for gating in [Some(GateActivation::Sigmoid), Some(GateActivation::Silu), None] {
            let (mut store, h) = head(gating, 7);
            let x = store.insert("x", fused(8)).unwrap();
            let report = grad_check(&store, 1e-5, |g| {
                let xv = g.param(x)?;
                let out = h.forward(g, xv)?;
                mse_loss(g, out.score, 0.8)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{gating:?}: {report:?}");
        }
    }

    #[test]
    fn mse_values_and_derivative() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::new(&[1, 1], vec![2.0]).unwrap()).unwrap();
        let l = mse_loss(&mut g, p, 2.0).unwrap();
        assert_eq!(g.value(l).unwrap().data(), &[0.0]);
        let z = g.variable(Tensor::new(&[1, 1], vec![0.0]).unwrap()).unwrap();
        let l = mse_loss(&mut g, z, 2.0).unwrap();
        assert_eq!(g.value(l).unwrap().data(), &[4.0]);

        let pred = 0.3;
        let grad = {
            let mut g = Graph::<f64>::new();
            let v = g.variable(Tensor::new(&[1, 1], vec![pred]).unwrap()).unwrap();
            let l = mse_loss(&mut g, v, 1.1).unwrap();
            g.backward(l).unwrap().wrt(v).unwrap().data()[0]
        };
        let eps = 1e-6;
        let numeric = ((pred + eps - 1.1f64).powi(2) - (pred - eps - 1.1f64).powi(2)) / (2.0 * eps);
        assert!((grad - numeric).abs() < 1e-8);
        assert!((grad - 2.0 * (pred - 1.1)).abs() < 1e-12);
    }

    #[test]
    fn batch_mse_is_the_mean() {
        let mut g = Graph::<f64>::new();
        let preds: Vec<Var> = [1.0, 3.0]
            .iter()
            .map(|&v| g.constant(Tensor::new(&[1, 1], vec![v]).unwrap()).unwrap())
            .collect();
        let l = batch_mse(&mut g, &preds, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(l).unwrap().data(), &[5.0]);
        assert!(batch_mse(&mut g, &preds, &[0.0]).is_err());
    }
}
