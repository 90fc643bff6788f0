//! Windowed-attention encoder and decoder.
//!
//! The channel is split into real and imaginary planes and cut into
//! patches of 2 antennas x 12 subcarriers. Each patch becomes a token; a
//! pyramid of window / shifted-window attention stages with 2x2 merges
//! reduces the token grid, and a final projection emits `N_p` features per
//! remaining token. The decoder mirrors this with learned 2x2 splits.
//! Tokens are carried as rows of a `[batch * tokens, width]` matrix.

mod hierarchy;
mod layers;
mod window;

use rand::Rng;
use thiserror::Error;

pub use hierarchy::{Contracting, Expanding, HierarchyConfig, PatchMerge, PatchSplit};
pub use layers::{LayerNorm, Linear, Mlp};
pub use window::{SwinBlock, WindowAttention, WindowPlan};

use crate::chansim::ChannelMatrix;
use crate::diffcore::{DiffError, ParamStore, Session, Tensor, Var};
use num_complex::Complex64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub n_tx: usize,
    pub n_sc: usize,
    /// antennas x subcarriers per patch
    pub patch: (usize, usize),
    /// stage widths; one 2x2 merge between consecutive stages
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    /// features per bottleneck token, `N_p`
    pub n_p: usize,
    pub window: usize,
}

impl NetConfig {
    /// 32 ports, 576 subcarriers, three merges, `N = 48`.
    pub fn full() -> Self {
        Self {
            n_tx: 32,
            n_sc: 576,
            patch: (2, 12),
            dims: vec![24, 32, 32, 32],
            heads: vec![2, 4, 4, 4],
            n_p: 4,
            window: 4,
        }
    }

    /// 8 ports, 192 subcarriers, two merges, `N = 48`.
    pub fn desk() -> Self {
        Self {
            n_tx: 8,
            n_sc: 192,
            patch: (2, 12),
            dims: vec![16, 24, 32],
            heads: vec![2, 3, 4],
            n_p: 12,
            window: 4,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.n_tx / self.patch.0, self.n_sc / self.patch.1)
    }

    pub fn patch_dim(&self) -> usize {
        2 * self.patch.0 * self.patch.1
    }

    pub fn hierarchy(&self) -> HierarchyConfig {
        HierarchyConfig {
            grid: self.grid(),
            in_dim: self.patch_dim(),
            dims: self.dims.clone(),
            heads: self.heads.clone(),
            window: self.window,
            out_dim: self.n_p,
        }
    }

    pub fn bottleneck_tokens(&self) -> usize {
        self.hierarchy().out_tokens()
    }

    /// Feature count `N`, derived from the architecture.
    pub fn feature_len(&self) -> usize {
        self.bottleneck_tokens() * self.n_p
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.patch.0 == 0
            || self.patch.1 == 0
            || !self.n_tx.is_multiple_of(self.patch.0)
            || !self.n_sc.is_multiple_of(self.patch.1)
        {
            return Err(NetError::Config(format!(
                "{}x{} channel not divisible into {}x{} patches",
                self.n_tx, self.n_sc, self.patch.0, self.patch.1
            )));
        }
        self.hierarchy().validate()
    }
}

/// Cuts a `[C, H, W]` grid into `ph x pw` patches, zero-padding the far
/// edges. Output rows are tokens in row-major grid order; within a token
/// the layout is `(c, dy, dx)`.
pub fn patchify(grid: &[f64], dims: [usize; 3], patch: (usize, usize)) -> Vec<f64> {
    let [c, h, w] = dims;
    let (ph, pw) = patch;
    let (gh, gw) = (h.div_ceil(ph), w.div_ceil(pw));
    let mut out = vec![0.0; gh * gw * c * ph * pw];
    let mut at = 0;
    for ty in 0..gh {
        for tx in 0..gw {
            for ch in 0..c {
                for dy in 0..ph {
                    for dx in 0..pw {
                        let (y, x) = (ty * ph + dy, tx * pw + dx);
                        if y < h && x < w {
                            out[at] = grid[(ch * h + y) * w + x];
                        }
                        at += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`], dropping padding.
pub fn unpatchify(tokens: &[f64], dims: [usize; 3], patch: (usize, usize)) -> Vec<f64> {
    let [c, h, w] = dims;
    let (ph, pw) = patch;
    let gw = w.div_ceil(pw);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let tok = (y / ph) * gw + x / pw;
                let within = (ch * ph + y % ph) * pw + x % pw;
                out[(ch * h + y) * w + x] = tokens[tok * c * ph * pw + within];
            }
        }
    }
    out
}

/// Real and imaginary planes `[2, N_t, N_s]` scaled by `scale`.
pub fn channel_planes(h: &ChannelMatrix, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * h.data().len());
    out.extend(h.data().iter().map(|c| c.re * scale));
    out.extend(h.data().iter().map(|c| c.im * scale));
    out
}

pub fn planes_to_channel(planes: &[f64], n_tx: usize, n_sc: usize) -> ChannelMatrix {
    let n = n_tx * n_sc;
    let data = (0..n).map(|i| Complex64::new(planes[i], planes[n + i])).collect();
    ChannelMatrix::new(n_tx, n_sc, data).expect("consistent dims")
}

/// Encoder `E` and decoder `C` sharing one [`NetConfig`].
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub cfg: NetConfig,
    pub encoder: Contracting,
    pub decoder: Expanding,
}

impl Autoencoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &NetConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let h = cfg.hierarchy();
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Contracting::new(store, rng, "encoder", "enc", &h)?,
            decoder: Expanding::new(store, rng, "decoder", "dec", &h)?,
        })
    }

    fn dims(&self) -> [usize; 3] {
        [2, self.cfg.n_tx, self.cfg.n_sc]
    }

    fn check(&self, h: &ChannelMatrix) -> Result<(), NetError> {
        if h.n_tx() != self.cfg.n_tx || h.n_sc() != self.cfg.n_sc {
            return Err(NetError::Config(format!(
                "channel {}x{} vs network {}x{}",
                h.n_tx(),
                h.n_sc(),
                self.cfg.n_tx,
                self.cfg.n_sc
            )));
        }
        Ok(())
    }

    /// Patched encoder input `[B * tokens, patch_dim]`, each channel scaled
    /// to unit average entry power. A zero channel stays zero.
    pub fn encoder_input(&self, hs: &[&ChannelMatrix]) -> Result<Tensor, NetError> {
        let mut data = Vec::with_capacity(hs.len() * 2 * self.cfg.n_tx * self.cfg.n_sc);
        for h in hs {
            self.check(h)?;
            let norm = h.frobenius_norm();
            let scale = if norm > 0.0 {
                ((h.data().len()) as f64).sqrt() / norm
            } else {
                0.0
            };
            data.extend(patchify(&channel_planes(h, scale), self.dims(), self.cfg.patch));
        }
        let rows = hs.len() * self.cfg.hierarchy().in_tokens();
        Ok(Tensor::new(vec![rows, self.cfg.patch_dim()], data)?)
    }

    /// Target in the decoder's output layout `[B, 2 * N_t * N_s]`.
    pub fn target(&self, hs: &[&ChannelMatrix]) -> Result<Tensor, NetError> {
        let mut data = Vec::new();
        for h in hs {
            self.check(h)?;
            data.extend(patchify(&channel_planes(h, 1.0), self.dims(), self.cfg.patch));
        }
        Ok(Tensor::new(vec![hs.len(), 2 * self.cfg.n_tx * self.cfg.n_sc], data)?)
    }

    /// Features `[B, N]` from encoder input rows.
    pub fn encode_graph(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, NetError> {
        let z = self.encoder.forward(s, x, batch)?;
        Ok(s.graph.reshape(z, &[batch, self.cfg.feature_len()])?)
    }

    /// Bottleneck tokens `[B * T, N_p]` from features `[B, N]`.
    pub fn feature_tokens(&self, s: &mut Session, z: Var, batch: usize) -> Result<Var, NetError> {
        Ok(s.graph
            .reshape(z, &[batch * self.cfg.bottleneck_tokens(), self.cfg.n_p])?)
    }

    /// Reconstruction `[B, 2 * N_t * N_s]` (patched layout) from `[B, N]`.
    pub fn decode_graph(&self, s: &mut Session, z: Var, batch: usize) -> Result<Var, NetError> {
        let t = self.feature_tokens(s, z, batch)?;
        let x = self.decoder.forward(s, t, batch)?;
        self.flatten_output(s, x, batch)
    }

    pub fn flatten_output(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, NetError> {
        Ok(s.graph.reshape(x, &[batch, 2 * self.cfg.n_tx * self.cfg.n_sc])?)
    }

    /// One sample of decoder output back to a channel.
    pub fn output_to_channel(&self, out: &[f64]) -> ChannelMatrix {
        let planes = unpatchify(out, self.dims(), self.cfg.patch);
        planes_to_channel(&planes, self.cfg.n_tx, self.cfg.n_sc)
    }

    pub fn encode_features(&self, store: &ParamStore, h: &ChannelMatrix) -> Result<Vec<f64>, NetError> {
        let mut s = Session::inference(store);
        let x = s.graph.constant(self.encoder_input(&[h])?);
        let z = self.encode_graph(&mut s, x, 1)?;
        Ok(s.graph.value(z).data().to_vec())
    }

    pub fn decode_channel(&self, store: &ParamStore, z: &[f64]) -> Result<ChannelMatrix, NetError> {
        let n = self.cfg.feature_len();
        if z.len() != n {
            return Err(NetError::Length {
                expected: n,
                got: z.len(),
            });
        }
        let mut s = Session::inference(store);
        let zv = s.graph.constant(Tensor::new(vec![1, n], z.to_vec())?);
        let out = self.decode_graph(&mut s, zv, 1)?;
        Ok(self.output_to_channel(s.graph.value(out).data()))
    }
}
