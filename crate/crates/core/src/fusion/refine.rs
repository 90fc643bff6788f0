use rand::Rng;

use crate::autonet::{LayerNorm, Linear, Mlp, NetError};
use crate::diffcore::{ParamId, ParamStore, Session, Tensor, Var};

/// One post-norm transformer block over the concatenated token sequence,
/// followed by the residual `W_r` fold back to `T_s` tokens.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub t_s: usize,
    pub t_d: usize,
    pub width: usize,
    pub heads: usize,
    pub pos: ParamId,
    pub qkv: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub mlp: Mlp,
    pub norm2: LayerNorm,
    pub w_r: ParamId,
}

impl Refiner {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        t_s: usize,
        t_d: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self, NetError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(NetError::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        let g = "fusion";
        let t = t_s + t_d;
        Ok(Self {
            pos: store.add(g, "refine.pos", Tensor::zeros(&[t, width])),
            qkv: Linear::new(store, rng, g, "refine.qkv", width, 3 * width, false),
            out: Linear::new(store, rng, g, "refine.out", width, width, false),
            norm1: LayerNorm::new(store, g, "refine.norm1", width),
            mlp: Mlp::new(store, rng, g, "refine.mlp", width, 2 * width),
            norm2: LayerNorm::new(store, g, "refine.norm2", width),
            w_r: store.add(g, "refine.w_r", Tensor::zeros(&[t, t_s])),
            t_s,
            t_d,
            width,
            heads,
        })
    }

    /// Refined channel tokens `[B * T_s, E]` from channel tokens
    /// `[B * T_s, E]` and sensor tokens `[B * T_d, E]`.
    pub fn forward(&self, s: &mut Session, zs: Var, zd: Var, batch: usize) -> Result<Var, NetError> {
        Ok(self.forward_with_weights(s, zs, zd, batch)?.0)
    }

    /// Also returns the attention weights `[B * heads, T, T]`.
    pub fn forward_with_weights(
        &self,
        s: &mut Session,
        zs: Var,
        zd: Var,
        batch: usize,
    ) -> Result<(Var, Var), NetError> {
        let (e, h) = (self.width, self.heads);
        let d = e / h;
        let t = self.t_s + self.t_d;
        let expect_s = [batch * self.t_s, e];
        let expect_d = [batch * self.t_d, e];
        if s.graph.shape(zs) != expect_s || s.graph.shape(zd) != expect_d {
            return Err(NetError::Config(format!(
                "refiner inputs {:?}/{:?}, expected {expect_s:?}/{expect_d:?}",
                s.graph.shape(zs),
                s.graph.shape(zd)
            )));
        }
        let g = &mut s.graph;
        let a = g.reshape(zs, &[batch, self.t_s, e])?;
        let b = g.reshape(zd, &[batch, self.t_d, e])?;
        let cat = g.concat(&[a, b], 1)?;
        let pos = s.param(self.pos);
        let z = s.graph.add_tiled(cat, pos)?;
        let z = s.graph.reshape(z, &[batch * t, e])?;

        let qkv = self.qkv.forward(s, z)?;
        let g = &mut s.graph;
        let qkv = g.reshape(qkv, &[batch, t, 3, h, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = g.narrow(qkv, 0, i, 1)?;
            parts.push(g.reshape(p, &[batch * h, t, d])?);
        }
        let scores = g.matmul_nt(parts[0], parts[1])?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores);
        let o = g.matmul(attn, parts[2])?;
        let o = g.reshape(o, &[batch, h, t, d])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[batch * t, e])?;
        let msa = self.out.forward(s, o)?;

        let r = s.graph.add(z, msa)?;
        let z1 = self.norm1.forward(s, r)?;
        let m = self.mlp.forward(s, z1)?;
        let r = s.graph.add(m, z1)?;
        let z2 = self.norm2.forward(s, r)?;

        let w_r = s.param(self.w_r);
        let g = &mut s.graph;
        let z2 = g.reshape(z2, &[batch, t, e])?;
        let z2 = g.permute(z2, &[0, 2, 1])?;
        let z2 = g.reshape(z2, &[batch * e, t])?;
        let folded = g.matmul(z2, w_r)?;
        let folded = g.reshape(folded, &[batch, e, self.t_s])?;
        let folded = g.permute(folded, &[0, 2, 1])?;
        let folded = g.reshape(folded, &[batch * self.t_s, e])?;
        Ok((g.add(zs, folded)?, attn))
    }
}
