//! Sensor-assisted feature refinement.
//!
//! A sensor grid (uplink CSI or an image-like array) passes through its own
//! windowed-attention pyramid, producing `T_d` tokens of width `N_e`. These
//! are concatenated with the `T_s` quantized channel-feature tokens, mixed
//! by one transformer block, and folded back onto the channel tokens
//! through a `(T_s + T_d) x T_s` projection `W_r`. `W_r` starts at zero, so
//! an untrained refiner returns its channel input unchanged.

mod grid;
mod refine;

pub use grid::{Modality, SensorGrid};
pub use refine::Refiner;

use rand::Rng;

use crate::autonet::{patchify, Contracting, HierarchyConfig, NetError};
use crate::diffcore::{ParamStore, Session, Tensor, Var};

/// Where the refiner sits in the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPoint {
    /// On the dequantized features, `N_e = N_p`.
    Bottleneck,
    /// After the decoder's input projection, `N_e = N_L3`.
    PostProjection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub modality: Modality,
    /// `[C, H, W]` of the sensor grid
    pub sensor_dims: [usize; 3],
    pub patch: (usize, usize),
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub point: FusionPoint,
    /// attention heads in the refiner
    pub refine_heads: usize,
}

impl FusionConfig {
    /// Uplink CSI on the desk array: 2x8 patches, two merges, 6 tokens.
    pub fn desk_uplink() -> Self {
        Self {
            modality: Modality::UplinkCsi,
            sensor_dims: [2, 8, 192],
            patch: (2, 8),
            dims: vec![16, 24, 32],
            heads: vec![2, 3, 4],
            window: 4,
            point: FusionPoint::Bottleneck,
            refine_heads: 2,
        }
    }

    /// Uplink CSI on the 32-port array: 2x2 patches, three merges.
    pub fn full_uplink() -> Self {
        Self {
            sensor_dims: [2, 32, 576],
            patch: (2, 2),
            dims: vec![24, 32, 32, 32],
            heads: vec![2, 4, 4, 4],
            refine_heads: 2,
            ..Self::desk_uplink()
        }
    }

    /// 192x256 RGB grid with 3x4 patches and three merges.
    pub fn full_image() -> Self {
        Self {
            modality: Modality::ImageGrid,
            sensor_dims: [3, 192, 256],
            patch: (3, 4),
            ..Self::full_uplink()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let [_, h, w] = self.sensor_dims;
        (h.div_ceil(self.patch.0), w.div_ceil(self.patch.1))
    }

    /// Extractor shape for an embedding width `n_e`.
    pub fn hierarchy(&self, n_e: usize) -> HierarchyConfig {
        HierarchyConfig {
            grid: self.grid(),
            in_dim: self.sensor_dims[0] * self.patch.0 * self.patch.1,
            dims: self.dims.clone(),
            heads: self.heads.clone(),
            window: self.window,
            out_dim: n_e,
        }
    }

    /// Sensor feature length `M = T_d * N_e`.
    pub fn feature_len(&self, n_e: usize) -> usize {
        self.hierarchy(n_e).out_tokens() * n_e
    }
}

/// Sensor feature extractor `g_E`.
#[derive(Clone, Debug)]
pub struct SensorExtractor {
    pub cfg: FusionConfig,
    pub n_e: usize,
    pub net: Contracting,
}

impl SensorExtractor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &FusionConfig, n_e: usize) -> Result<Self, NetError> {
        Ok(Self {
            net: Contracting::new(store, rng, "sensor", "sensor", &cfg.hierarchy(n_e))?,
            cfg: cfg.clone(),
            n_e,
        })
    }

    pub fn tokens(&self) -> usize {
        self.net.cfg.out_tokens()
    }

    /// Patched input rows for a batch of grids, each scaled to unit RMS.
    pub fn input(&self, grids: &[&SensorGrid]) -> Result<Tensor, NetError> {
        let mut data = Vec::new();
        for g in grids {
            if g.dims != self.cfg.sensor_dims || g.modality != self.cfg.modality {
                return Err(NetError::Config(format!(
                    "{:?} grid {:?} vs configured {:?} {:?}",
                    g.modality, g.dims, self.cfg.modality, self.cfg.sensor_dims
                )));
            }
            let energy: f64 = g.data.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let scale = if energy > 0.0 {
                (g.data.len() as f64 / energy).sqrt()
            } else {
                0.0
            };
            let vals: Vec<f64> = g.data.iter().map(|&v| v as f64 * scale).collect();
            data.extend(patchify(&vals, g.dims, self.cfg.patch));
        }
        let rows = grids.len() * self.net.cfg.in_tokens();
        Ok(Tensor::new(vec![rows, self.net.cfg.in_dim], data)?)
    }

    /// Sensor tokens `[B * T_d, N_e]`.
    pub fn forward(&self, s: &mut Session, x: Var, batch: usize) -> Result<Var, NetError> {
        Ok(self.net.forward(s, x, batch)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sensor_feature_lengths() {
        assert_eq!(FusionConfig::full_image().feature_len(4), 256);
        assert_eq!(FusionConfig::full_uplink().feature_len(4), 72 * 4);
        assert_eq!(FusionConfig::desk_uplink().feature_len(12), 72);
    }

    #[test]
    fn zero_grid_gives_finite_features() {
        let cfg = FusionConfig::desk_uplink();
        let mut store = ParamStore::new();
        let ext = SensorExtractor::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg, 12).unwrap();
        let grid = SensorGrid::new(Modality::UplinkCsi, [2, 8, 192], (2, 8), vec![0.0; 2 * 8 * 192]).unwrap();
        let mut s = Session::inference(&store);
        let x = s.graph.constant(ext.input(&[&grid]).unwrap());
        let t = ext.forward(&mut s, x, 1).unwrap();
        assert_eq!(s.graph.shape(t), &[6, 12]);
        assert!(s.graph.value(t).is_finite());
    }
}
