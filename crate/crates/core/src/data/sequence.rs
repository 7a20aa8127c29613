//! Fixed token budget: every modality enters the model as 50 content tokens
//! plus one learnable aggregation token at index 0.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const CONTENT_TOKENS: usize = 50;
pub const MODEL_TOKENS: usize = CONTENT_TOKENS + 1;

/// Truncates to the first `target` rows or zero-pads the tail.
///
/// Returns the normalised sequence and a mask with ones for real tokens.
pub fn normalize_length<T: Scalar>(seq: &Tensor<T>, target: usize) -> Result<(Tensor<T>, Vec<T>)> {
    let s = seq.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Data(format!("cannot length-normalise a sequence of shape {s:?}")));
    }
    if target == 0 {
        return Err(Error::Config("target length must be positive".into()));
    }
    let (len, d) = (s[0], s[1]);
    let keep = len.min(target);
    let mut data = vec![T::zero(); target * d];
    data[..keep * d].copy_from_slice(&seq.data()[..keep * d]);
    let mut mask = vec![T::zero(); target];
    mask[..keep].iter_mut().for_each(|m| *m = T::one());
    Ok((Tensor::new(&[target, d], data)?, mask))
}

/// Number of real tokens marked by a mask from [`normalize_length`].
pub fn real_tokens<T: Scalar>(mask: &[T]) -> usize {
    mask.iter().filter(|&&m| m > T::zero()).count()
}

/// Prepends the aggregation token `agg` (`[1×d]`) to a length-normalised sequence.
pub fn attach_agg_token<T: Scalar>(g: &mut Graph<'_, T>, seq: Var, agg: Var) -> Result<Var> {
    let (ss, sa) = (g.shape(seq)?.to_vec(), g.shape(agg)?.to_vec());
    if ss.len() != 2 || sa != [1, ss[1]] {
        return Err(Error::shape("attach_agg_token", &ss, &sa));
    }
    g.concat_rows(&[agg, seq])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn seq(len: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[len, d], (0..len * d).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn exact_length_is_identity() {
        let s = seq(50, 3);
        let (out, mask) = normalize_length(&s, 50).unwrap();
        assert_eq!(out, s);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn long_sequences_keep_first_rows() {
        let s = seq(60, 3);
        let (out, mask) = normalize_length(&s, 50).unwrap();
        assert_eq!(out.data(), &s.data()[..150]);
        assert_eq!(real_tokens(&mask), 50);
    }

    #[test]
    fn short_sequences_pad_with_zeros() {
        let s = seq(40, 3);
        let (out, mask) = normalize_length(&s, 50).unwrap();
        assert_eq!(&out.data()[..120], s.data());
        assert!(out.data()[120..].iter().all(|&v| v == 0.0));
        assert_eq!(mask[..40], [1.0; 40]);
        assert_eq!(mask[40..], [0.0; 10]);
    }

    #[test]
    fn empty_sequence_is_a_data_error() {
        let t = Tensor::<f64>::zeros(&[1, 3]).reshape(&[3]).unwrap();
        assert!(matches!(normalize_length(&t, 50), Err(Error::Data(_))));
    }

    #[test]
    fn aggregation_token_sits_at_index_zero() {
        let mut store = ParamStore::new();
        let agg = store.insert("agg", Tensor::<f64>::zeros(&[1, 3])).unwrap();
        let mut g = Graph::with_params(&store);
        let s = g.constant(seq(50, 3)).unwrap();
        let a = g.param(agg).unwrap();
        let out = attach_agg_token(&mut g, s, a).unwrap();
        let t = g.value(out).unwrap();
        assert_eq!(t.shape(), &[51, 3]);
        assert_eq!(t.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(t.row(1), seq(50, 3).row(0));

        let bad = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(attach_agg_token(&mut g, s, bad).is_err());
    }

    #[test]
    fn aggregation_token_receives_gradient() {
        let mut store = ParamStore::new();
        let agg = store
            .insert("agg", Tensor::new(&[1, 3], vec![0.3, -0.2, 0.5]).unwrap())
            .unwrap();
        let content = seq(50, 3);
        let loss_of = |g: &mut Graph<'_, f64>| -> Result<Var> {
            let s = g.constant(content.clone())?;
            let a = g.param(agg)?;
            let tokens = attach_agg_token(g, s, a)?;
            let first = g.rows(tokens, 0, 1)?;
            let sq = g.square(first)?;
            g.sum(sq)
        };
        let mut g = Graph::with_params(&store);
        let loss = loss_of(&mut g).unwrap();
        let grad = g.backward(loss).unwrap().params(&store);
        assert!(grad.get(agg).data().iter().any(|&v| v != 0.0));
        let report = crate::gradcheck::grad_check(&store, 1e-5, loss_of).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
