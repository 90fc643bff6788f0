use std::sync::Arc;

use rand::Rng;

use super::layers::{LayerNorm, Linear};
use super::window::SwinBlock;
use super::NetError;
use crate::diffcore::{DiffError, ParamStore, Session, Var};

/// Shape of a windowed-attention pyramid: an input token grid of
/// `in_dim`-wide patches, one stage per entry of `dims` with a 2x2 merge
/// between consecutive stages, and a final projection to `out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyConfig {
    pub grid: (usize, usize),
    pub in_dim: usize,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub out_dim: usize,
}

impl HierarchyConfig {
    pub fn merges(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        (self.grid.0 >> stage, self.grid.1 >> stage)
    }

    pub fn out_grid(&self) -> (usize, usize) {
        self.stage_grid(self.merges())
    }

    pub fn out_tokens(&self) -> usize {
        let (h, w) = self.out_grid();
        h * w
    }

    pub fn in_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::Config(m));
        if self.dims.is_empty() || self.dims.len() != self.heads.len() {
            return fail(format!(
                "{} stage dims vs {} head counts",
                self.dims.len(),
                self.heads.len()
            ));
        }
        for (d, h) in self.dims.iter().zip(&self.heads) {
            if *h == 0 || d % h != 0 {
                return fail(format!("dim {d} not divisible by {h} heads"));
            }
        }
        let f = 1usize << self.merges();
        let (h, w) = self.grid;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return fail(format!(
                "token grid {h}x{w} not divisible by {f} for {} merges",
                self.merges()
            ));
        }
        if self.window == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return fail("zero window or width".into());
        }
        Ok(())
    }
}

/// Concatenates each 2x2 neighbourhood, normalizes, and projects.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub grid: (usize, usize),
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: &str,
        name: &str,
        grid: (usize, usize),
        d_in: usize,
        d_out: usize,
    ) -> Result<Self, NetError> {
        if !grid.0.is_multiple_of(2) || !grid.1.is_multiple_of(2) {
            return Err(NetError::Config(format!("cannot merge odd grid {}x{}", grid.0, grid.1)));
        }
        Ok(Self {
            grid,
            norm: LayerNorm::new(store, group, &format!("{name}.norm"), 4 * d_in),
            reduce: Linear::new(store, rng, group, &format!("{name}.reduce"), 4 * d_in, d_out, false),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, DiffError> {
        let (h, w) = self.grid;
        let c = s.graph.value(x).last_dim();
        let index = merge_index(h, w, batch);
        let rows = index.len() / 4;
        let g = s.graph.gather_rows(x, index)?;
        let g = s.graph.reshape(g, &[rows, 4 * c])?;
        let g = self.norm.forward(s, g)?;
        self.reduce.forward(s, g)
    }
}

/// Corner order within each 2x2 block: (0,0), (1,0), (0,1), (1,1) as
/// (row, col) offsets.
fn merge_index(h: usize, w: usize, batch: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push(b * h * w + (2 * y + dy) * w + 2 * x + dx);
                }
            }
        }
    }
    idx.into()
}

/// Inverse-shaped to [`PatchMerge`]: each token expands to a 2x2 block.
#[derive(Clone, Debug)]
pub struct PatchSplit {
    /// grid before splitting
    pub grid: (usize, usize),
    pub norm: LayerNorm,
    pub expand: Linear,
}

impl PatchSplit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: &str,
        name: &str,
        grid: (usize, usize),
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self {
            grid,
            norm: LayerNorm::new(store, group, &format!("{name}.norm"), d_in),
            expand: Linear::new(store, rng, group, &format!("{name}.expand"), d_in, 4 * d_out, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, DiffError> {
        let (h, w) = self.grid;
        let x = self.norm.forward(s, x)?;
        let e = self.expand.forward(s, x)?;
        let d = s.graph.value(e).last_dim() / 4;
        let e = s.graph.reshape(e, &[batch * h * w * 4, d])?;
        let mut idx = Vec::with_capacity(batch * h * w * 4);
        for b in 0..batch {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let corner = (y % 2) + 2 * (x % 2);
                    idx.push(((b * h + y / 2) * w + x / 2) * 4 + corner);
                }
            }
        }
        s.graph.gather_rows(e, idx.into())
    }
}

fn stage(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    group: &str,
    name: &str,
    cfg: &HierarchyConfig,
    i: usize,
) -> Vec<SwinBlock> {
    (0..2)
        .map(|j| {
            SwinBlock::new(
                store,
                rng,
                group,
                &format!("{name}.stage{i}.block{j}"),
                cfg.dims[i],
                cfg.heads[i],
                cfg.stage_grid(i),
                cfg.window,
                j == 1,
            )
        })
        .collect()
}

/// Downward pyramid: patch embedding, stages with merges, projection.
#[derive(Clone, Debug)]
pub struct Contracting {
    pub cfg: HierarchyConfig,
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerge>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Contracting {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: &str,
        name: &str,
        cfg: &HierarchyConfig,
    ) -> Result<Self, NetError> {
        cfg.validate()?;
        let last = *cfg.dims.last().unwrap();
        let embed = Linear::new(
            store,
            rng,
            group,
            &format!("{name}.embed"),
            cfg.in_dim,
            cfg.dims[0],
            true,
        );
        let embed_norm = LayerNorm::new(store, group, &format!("{name}.embed_norm"), cfg.dims[0]);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for i in 0..cfg.dims.len() {
            stages.push(stage(store, rng, group, name, cfg, i));
            if i + 1 < cfg.dims.len() {
                merges.push(PatchMerge::new(
                    store,
                    rng,
                    group,
                    &format!("{name}.merge{i}"),
                    cfg.stage_grid(i),
                    cfg.dims[i],
                    cfg.dims[i + 1],
                )?);
            }
        }
        Ok(Self {
            norm: LayerNorm::new(store, group, &format!("{name}.norm"), last),
            head: Linear::new(store, rng, group, &format!("{name}.head"), last, cfg.out_dim, true),
            cfg: cfg.clone(),
            embed,
            embed_norm,
            stages,
            merges,
        })
    }

    /// `[B * in_tokens, in_dim]` -> `[B * out_tokens, out_dim]`.
    pub fn forward(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, DiffError> {
        let x = self.embed.forward(s, x)?;
        let mut x = self.embed_norm.forward(s, x)?;
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(s, x, batch)?;
            }
            if let Some(m) = self.merges.get(i) {
                x = m.forward(s, x, batch)?;
            }
        }
        let x = self.norm.forward(s, x)?;
        self.head.forward(s, x)
    }
}

/// Upward mirror of [`Contracting`].
#[derive(Clone, Debug)]
pub struct Expanding {
    pub cfg: HierarchyConfig,
    pub head: Linear,
    /// deepest stage first
    pub stages: Vec<Vec<SwinBlock>>,
    pub splits: Vec<PatchSplit>,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl Expanding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        group: &str,
        name: &str,
        cfg: &HierarchyConfig,
    ) -> Result<Self, NetError> {
        cfg.validate()?;
        let n = cfg.dims.len();
        let head = Linear::new(
            store,
            rng,
            group,
            &format!("{name}.head"),
            cfg.out_dim,
            cfg.dims[n - 1],
            true,
        );
        let mut stages = Vec::new();
        let mut splits = Vec::new();
        for i in (0..n).rev() {
            stages.push(stage(store, rng, group, name, cfg, i));
            if i > 0 {
                splits.push(PatchSplit::new(
                    store,
                    rng,
                    group,
                    &format!("{name}.split{i}"),
                    cfg.stage_grid(i),
                    cfg.dims[i],
                    cfg.dims[i - 1],
                ));
            }
        }
        Ok(Self {
            norm: LayerNorm::new(store, group, &format!("{name}.norm"), cfg.dims[0]),
            out: Linear::new(store, rng, group, &format!("{name}.out"), cfg.dims[0], cfg.in_dim, true),
            cfg: cfg.clone(),
            head,
            stages,
            splits,
        })
    }

    /// `[B * out_tokens, out_dim]` -> `[B * out_tokens, dims.last]`.
    pub fn project(&self, s: &mut Session, z: Var) -> Result<Var, DiffError> {
        self.head.forward(s, z)
    }

    /// Projected bottleneck tokens -> `[B * in_tokens, in_dim]`.
    pub fn expand(&self, s: &mut Session, mut x: Var, batch: usize) -> Result<Var, DiffError> {
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(s, x, batch)?;
            }
            if let Some(sp) = self.splits.get(i) {
                x = sp.forward(s, x, batch)?;
            }
        }
        let x = self.norm.forward(s, x)?;
        self.out.forward(s, x)
    }

    pub fn forward(&self, s: &mut Session, z: Var, batch: usize) -> Result<Var, DiffError> {
        let x = self.project(s, z)?;
        self.expand(s, x, batch)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn merge_halves_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let m = PatchMerge::new(&mut store, &mut rng, "g", "m", (16, 48), 3, 5).unwrap();
        let mut s = Session::inference(&store);
        let x = s.graph.constant(Tensor::full(&[2 * 16 * 48, 3], 0.5));
        let y = m.forward(&mut s, x, 2).unwrap();
        assert_eq!(s.graph.shape(y), &[2 * 8 * 24, 5]);
        assert!(PatchMerge::new(&mut store, &mut rng, "g", "odd", (3, 4), 3, 5).is_err());
    }

    #[test]
    fn merge_tiny_grid_matches_manual_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = PatchMerge::new(&mut store, &mut rng, "g", "m", (2, 2), 2, 3).unwrap();
        let mut s = Session::inference(&store);
        let tokens = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let x = s.graph.constant(Tensor::new(vec![4, 2], tokens).unwrap());
        let y = m.forward(&mut s, x, 1).unwrap();
        // corners in (0,0), (1,0), (0,1), (1,1) order: tokens 0, 2, 1, 3
        let cat = s
            .graph
            .constant(Tensor::new(vec![1, 8], vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]).unwrap());
        let n = m.norm.forward(&mut s, cat).unwrap();
        let r = m.reduce.forward(&mut s, n).unwrap();
        assert_eq!(s.graph.value(y).data(), s.graph.value(r).data());
    }

    #[test]
    fn split_inverts_merge_routing() {
        let idx = merge_index(4, 6, 2);
        let mut seen = [false; 48];
        for &i in idx.iter() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&v| v));
    }
}
