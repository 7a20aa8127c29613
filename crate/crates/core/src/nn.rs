//! Parameter builder and the small layers shared by every block.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Registers parameters under a hierarchical name prefix.
pub struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T, R> {
        Builder {
            prefix: self.path(name),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let t = xavier_uniform(self.rng, fan_in, fan_out);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let mut s = self.scope(name);
        Ok(Linear {
            w: s.xavier("w", din, dout)?,
            b: s.zeros("b", &[dout])?,
        })
    }

    /// Linear layer whose weights start at zero.
    pub fn zero_linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let mut s = self.scope(name);
        Ok(Linear {
            w: s.zeros("w", &[din, dout])?,
            b: s.zeros("b", &[dout])?,
        })
    }

    pub fn norm(&mut self, name: &str, d: usize, eps: f64) -> Result<Norm> {
        let mut s = self.scope(name);
        Ok(Norm {
            gamma: s.tensor("gamma", Tensor::ones(&[d]))?,
            beta: s.zeros("beta", &[d])?,
            eps,
        })
    }

    pub fn norm_linear(&mut self, name: &str, din: usize, dout: usize, eps: f64) -> Result<NormLinear> {
        let mut s = self.scope(name);
        Ok(NormLinear {
            norm: s.norm("norm", din, eps)?,
            linear: s.linear("linear", din, dout)?,
        })
    }

    pub fn conv(&mut self, name: &str, width: usize, d: usize) -> Result<Conv> {
        let mut s = self.scope(name);
        Ok(Conv {
            kernel: s.xavier("kernel", width, d)?,
            bias: s.zeros("bias", &[d])?,
        })
    }

    pub fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Result<Ffn> {
        let mut s = self.scope(name);
        Ok(Ffn {
            up: s.linear("up", d, hidden)?,
            down: s.linear("down", hidden, d)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w)?, g.param(self.b)?);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma)?, g.param(self.beta)?);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// A linear layer after a normalisation layer.
#[derive(Clone, Copy, Debug)]
pub struct NormLinear {
    pub norm: Norm,
    pub linear: Linear,
}

impl NormLinear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, x)?;
        self.linear.forward(g, n)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.kernel)?, g.param(self.bias)?);
        g.conv1d_same(x, k, b)
    }
}

/// Two-layer SiLU feed-forward network.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.up.w, self.up.b, self.down.w, self.down.b]
    }
}

/// Attention scores `(q kᵀ)` optionally divided by `sqrt(width)`, softmaxed over rows.
pub fn attention_weights<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, scaled: bool) -> Result<Var> {
    let kt = g.transpose(k)?;
    let mut s = g.matmul(q, kt)?;
    if scaled {
        let width = g.shape(q)?[1] as f64;
        s = g.scale(s, T::from_f64_lossy(1.0 / width.sqrt()))?;
    }
    g.softmax_rows(s)
}
