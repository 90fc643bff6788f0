use std::sync::Arc;

use rand::Rng;

use super::layers::{LayerNorm, Linear, Mlp};
use crate::diffcore::{DiffError, ParamId, ParamStore, Session, Tensor, Var, ZERO_ROW};

const MASKED: f64 = -1e9;

/// Precomputed token routing for (shifted) window attention on an `h x w`
/// grid. The window is `min(M, dim)` per axis; a shift of half the window is
/// applied only along axes longer than `M`. Grids are zero-padded up to a
/// multiple of the window and padded keys are masked.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub grid: (usize, usize),
    pub window: (usize, usize),
    pub shift: (usize, usize),
    padded: (usize, usize),
    windows: usize,
    /// window-layout position -> source token (or ZERO_ROW)
    fwd: Vec<usize>,
    /// source token -> window-layout position
    inv: Vec<usize>,
    /// additive `[windows, T, T]` mask
    mask: Option<Vec<f64>>,
    /// `T * T` indices into the relative-position table
    rel: Vec<usize>,
}

impl WindowPlan {
    pub fn new(grid: (usize, usize), m: usize, shifted: bool) -> Self {
        let (h, w) = grid;
        let wh = m.min(h);
        let ww = m.min(w);
        let sh = if shifted && h > m { wh / 2 } else { 0 };
        let sw = if shifted && w > m { ww / 2 } else { 0 };
        let hp = h.div_ceil(wh) * wh;
        let wp = w.div_ceil(ww) * ww;
        let t = wh * ww;
        let windows = (hp / wh) * (wp / ww);
        let mut fwd = Vec::with_capacity(windows * t);
        let mut label = Vec::with_capacity(windows * t);
        for wy in 0..hp / wh {
            for wx in 0..wp / ww {
                for iy in 0..wh {
                    for ix in 0..ww {
                        let (py, px) = (wy * wh + iy, wx * ww + ix);
                        let (sy, sx) = ((py + sh) % hp, (px + sw) % wp);
                        let src = if sy < h && sx < w { sy * w + sx } else { ZERO_ROW };
                        fwd.push(src);
                        label.push((py + sh >= hp, px + sw >= wp));
                    }
                }
            }
        }
        let mut inv = vec![0; h * w];
        for (p, &src) in fwd.iter().enumerate() {
            if src != ZERO_ROW {
                inv[src] = p;
            }
        }
        let mask = (sh + sw > 0 || hp * wp != h * w).then(|| {
            let mut m = vec![0.0; windows * t * t];
            for win in 0..windows {
                for q in 0..t {
                    for k in 0..t {
                        let (pq, pk) = (win * t + q, win * t + k);
                        if fwd[pk] == ZERO_ROW || label[pq] != label[pk] {
                            m[(win * t + q) * t + k] = MASKED;
                        }
                    }
                }
            }
            m
        });
        let mut rel = Vec::with_capacity(t * t);
        for q in 0..t {
            for k in 0..t {
                let (qy, qx) = (q / ww, q % ww);
                let (ky, kx) = (k / ww, k % ww);
                rel.push((qy + wh - 1 - ky) * (2 * ww - 1) + (qx + ww - 1 - kx));
            }
        }
        Self {
            grid,
            window: (wh, ww),
            shift: (sh, sw),
            padded: (hp, wp),
            windows,
            fwd,
            inv,
            mask,
            rel,
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.0 * self.window.1
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn padded(&self) -> (usize, usize) {
        self.padded
    }

    pub fn table_rows(&self) -> usize {
        (2 * self.window.0 - 1) * (2 * self.window.1 - 1)
    }

    /// Multiply-accumulates for the score and weighting products at feature
    /// width `dim`; linear in the number of windows.
    pub fn attention_cost(&self, dim: usize) -> usize {
        let t = self.tokens_per_window();
        2 * self.windows * t * t * dim
    }

    fn batch_fwd(&self, batch: usize) -> Arc<[usize]> {
        let n = self.grid.0 * self.grid.1;
        (0..batch)
            .flat_map(|b| self.fwd.iter().map(move |&s| if s == ZERO_ROW { s } else { s + b * n }))
            .collect()
    }

    fn batch_inv(&self, batch: usize) -> Arc<[usize]> {
        let n = self.fwd.len();
        (0..batch)
            .flat_map(|b| self.inv.iter().map(move |&p| p + b * n))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub plan: WindowPlan,
    pub heads: usize,
    pub dim: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub table: ParamId,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: &str,
        name: &str,
        dim: usize,
        heads: usize,
        plan: WindowPlan,
    ) -> Self {
        let table = store.add(
            group,
            &format!("{name}.rel_bias"),
            Tensor::zeros(&[plan.table_rows(), heads]),
        );
        Self {
            qkv: Linear::new(store, rng, group, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, rng, group, &format!("{name}.proj"), dim, dim, true),
            table,
            heads,
            dim,
            plan,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, DiffError> {
        Ok(self.forward_with_weights(s, x, batch)?.0)
    }

    /// Output tokens `[B*h*w, C]` and the attention weights
    /// `[B*windows*heads, T, T]`.
    pub fn forward_with_weights(&self, s: &mut Session, x: Var, batch: usize) -> Result<(Var, Var), DiffError> {
        let p = &self.plan;
        let (t, nw, h, c) = (p.tokens_per_window(), p.windows, self.heads, self.dim);
        let d = c / h;
        let g = batch * nw;
        let xw = s.graph.gather_rows(x, p.batch_fwd(batch))?;
        let qkv = self.qkv.forward(s, xw)?;
        let qkv = s.graph.reshape(qkv, &[g, t, 3, h, d])?;
        let qkv = s.graph.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let part = s.graph.narrow(qkv, 0, i, 1)?;
            parts.push(s.graph.reshape(part, &[g * h, t, d])?);
        }
        let scores = s.graph.matmul_nt(parts[0], parts[1])?;
        let mut scores = s.graph.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(mask) = &p.mask {
            let expanded: Vec<f64> = mask
                .chunks(t * t)
                .flat_map(|m| std::iter::repeat_n(m, h).flatten().copied())
                .collect();
            let mask = s.graph.constant(Tensor::new(vec![nw, h, t, t], expanded)?);
            scores = s.graph.reshape(scores, &[batch, nw, h, t, t])?;
            scores = s.graph.add_tiled(scores, mask)?;
        }
        let table = s.param(self.table);
        let bias = s.graph.gather_rows(table, p.rel.iter().copied().collect())?;
        let bias = s.graph.permute(bias, &[1, 0])?;
        let bias = s.graph.reshape(bias, &[h, t, t])?;
        let scores = s.graph.reshape(scores, &[g, h, t, t])?;
        let scores = s.graph.add_tiled(scores, bias)?;
        let attn = s.graph.softmax(scores);
        let attn = s.graph.reshape(attn, &[g * h, t, t])?;
        let o = s.graph.matmul(attn, parts[2])?;
        let o = s.graph.reshape(o, &[g, h, t, d])?;
        let o = s.graph.permute(o, &[0, 2, 1, 3])?;
        let o = s.graph.reshape(o, &[g * t, c])?;
        let o = self.proj.forward(s, o)?;
        Ok((s.graph.gather_rows(o, p.batch_inv(batch))?, attn))
    }
}

/// Pre-norm residual block: attention then a 2x MLP.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: &str,
        name: &str,
        dim: usize,
        heads: usize,
        grid: (usize, usize),
        window: usize,
        shifted: bool,
    ) -> Self {
        let plan = WindowPlan::new(grid, window, shifted);
        Self {
            norm1: LayerNorm::new(store, group, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, rng, group, &format!("{name}.attn"), dim, heads, plan),
            norm2: LayerNorm::new(store, group, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, group, &format!("{name}.mlp"), dim, 2 * dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, DiffError> {
        let h = self.norm1.forward(s, x)?;
        let h = self.attn.forward(s, h, batch)?;
        let x = s.graph.add(x, h)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.graph.add(x, h)
    }
}
