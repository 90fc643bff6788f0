use rand::Rng;

use crate::diffcore::{DiffError, ParamId, ParamStore, Session, Tensor, Var, LN_EPS};

/// Row-wise affine map `x W + b` on `[rows, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: &str,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = (0..d_in * d_out).map(|_| rng.random_range(-a..a)).collect();
        let w = store.add(
            group,
            &format!("{name}.w"),
            Tensor::new(vec![d_in, d_out], w).expect("shape"),
        );
        let b = bias.then(|| store.add(group, &format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, group: &str, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.add(group, &format!("{name}.w"), Tensor::zeros(&[d_in, d_out])),
            b: Some(store.add(group, &format!("{name}.b"), Tensor::zeros(&[d_out]))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, DiffError> {
        let w = s.param(self.w);
        let y = s.graph.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_tiled(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: &str, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(group, &format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(group, &format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, DiffError> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer perceptron with a rectifier in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, group: &str, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, group, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, group, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, DiffError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.relu(h);
        self.fc2.forward(s, h)
    }
}
