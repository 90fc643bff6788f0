//! The full feedback model: encoder, quantizer, decoder, and the optional
//! sensor branch, with parameters in five groups (`encoder`, `quantizer`,
//! `decoder`, `sensor`, `fusion`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autonet::{Autoencoder, NetConfig};
use crate::chansim::ChannelMatrix;
use crate::diffcore::{ParamId, ParamStore, Session, Tensor, Var};
use crate::fusion::{FusionConfig, FusionPoint, Modality, Refiner, SensorExtractor, SensorGrid};
use crate::quantizer::{
    allocate_bits, level_sum, levels_per_feature, materialize_op, quantize_levels, quantize_op, BitAllocation,
    CsiBitstream, QuantizerParams,
};
use crate::wire::{Reader, WireError, Writer};
use crate::Error;

pub const GROUPS: [&str; 5] = ["encoder", "quantizer", "decoder", "sensor", "fusion"];
pub const STAGE1_GROUPS: [&str; 3] = ["encoder", "quantizer", "decoder"];
pub const STAGE2_GROUPS: [&str; 2] = ["sensor", "fusion"];

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub net: NetConfig,
    pub b_max: u32,
    pub fusion: Option<FusionConfig>,
}

impl CodecConfig {
    pub fn desk() -> Self {
        Self {
            net: NetConfig::desk(),
            b_max: 3,
            fusion: None,
        }
    }

    pub fn desk_fused() -> Self {
        Self {
            fusion: Some(FusionConfig::desk_uplink()),
            ..Self::desk()
        }
    }

    pub fn feature_len(&self) -> usize {
        self.net.feature_len()
    }

    /// Valid total bit counts `[N, N * b_max]`.
    pub fn rate_range(&self) -> (usize, usize) {
        let n = self.feature_len();
        (n, n * self.b_max as usize)
    }

    /// Token width at the fusion point.
    pub fn fusion_width(&self) -> Option<usize> {
        self.fusion.as_ref().map(|f| match f.point {
            FusionPoint::Bottleneck => self.net.n_p,
            FusionPoint::PostProjection => *self.net.dims.last().unwrap(),
        })
    }
}

fn write_usizes(w: &mut Writer, v: &[usize]) {
    w.u32(v.len() as u32);
    for &x in v {
        w.u32(x as u32);
    }
}

fn read_usizes(r: &mut Reader) -> Result<Vec<usize>, WireError> {
    let n = r.u32()? as usize;
    (0..n).map(|_| Ok(r.u32()? as usize)).collect()
}

impl CodecConfig {
    pub(crate) fn write_to(&self, w: &mut Writer) {
        let n = &self.net;
        write_usizes(w, &[n.n_tx, n.n_sc, n.patch.0, n.patch.1, n.n_p, n.window]);
        write_usizes(w, &n.dims);
        write_usizes(w, &n.heads);
        w.u32(self.b_max);
        match &self.fusion {
            None => w.u8(0),
            Some(f) => {
                w.u8(1);
                w.u8(match f.modality {
                    Modality::UplinkCsi => 0,
                    Modality::ImageGrid => 1,
                });
                w.u8(match f.point {
                    FusionPoint::Bottleneck => 0,
                    FusionPoint::PostProjection => 1,
                });
                let [c, h, wd] = f.sensor_dims;
                write_usizes(w, &[c, h, wd, f.patch.0, f.patch.1, f.window, f.refine_heads]);
                write_usizes(w, &f.dims);
                write_usizes(w, &f.heads);
            }
        }
    }

    pub(crate) fn read_from(r: &mut Reader) -> Result<Self, WireError> {
        let bad = |what: &str| WireError::Malformed(format!("codec config: {what}"));
        let head = read_usizes(r)?;
        let [n_tx, n_sc, p0, p1, n_p, window] = head[..] else {
            return Err(bad("network header"));
        };
        let net = NetConfig {
            n_tx,
            n_sc,
            patch: (p0, p1),
            dims: read_usizes(r)?,
            heads: read_usizes(r)?,
            n_p,
            window,
        };
        let b_max = r.u32()?;
        let fusion = match r.u8()? {
            0 => None,
            1 => {
                let modality = match r.u8()? {
                    0 => Modality::UplinkCsi,
                    1 => Modality::ImageGrid,
                    _ => return Err(bad("modality")),
                };
                let point = match r.u8()? {
                    0 => FusionPoint::Bottleneck,
                    1 => FusionPoint::PostProjection,
                    _ => return Err(bad("fusion point")),
                };
                let v = read_usizes(r)?;
                let [c, h, wd, p0, p1, window, refine_heads] = v[..] else {
                    return Err(bad("fusion header"));
                };
                Some(FusionConfig {
                    modality,
                    sensor_dims: [c, h, wd],
                    patch: (p0, p1),
                    dims: read_usizes(r)?,
                    heads: read_usizes(r)?,
                    window,
                    point,
                    refine_heads,
                })
            }
            _ => return Err(bad("fusion flag")),
        };
        Ok(Self { net, b_max, fusion })
    }
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub net: Autoencoder,
    pub q_first: ParamId,
    pub q_pseudo: ParamId,
    pub sensor: Option<SensorExtractor>,
    pub refiner: Option<Refiner>,
}

impl Codec {
    /// Builds the model and a freshly initialized store. Parameter creation
    /// order depends only on the config, so stores from different seeds are
    /// interchangeable.
    pub fn new(cfg: &CodecConfig, seed: u64) -> Result<(Self, ParamStore), Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Autoencoder::new(&mut store, &mut rng, &cfg.net)?;
        let n = cfg.feature_len();
        let q = QuantizerParams::uniform(cfg.b_max, &vec![1.0; n]);
        let q_first = store.add("quantizer", "quant.first", q.first);
        let q_pseudo = store.add("quantizer", "quant.pseudo", q.pseudo);
        let (sensor, refiner) = match (&cfg.fusion, cfg.fusion_width()) {
            (Some(f), Some(width)) => {
                let ext = SensorExtractor::new(&mut store, &mut rng, f, width)?;
                let t_s = cfg.net.bottleneck_tokens();
                let r = Refiner::new(&mut store, &mut rng, t_s, ext.tokens(), width, f.refine_heads)?;
                (Some(ext), Some(r))
            }
            _ => (None, None),
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                net,
                q_first,
                q_pseudo,
                sensor,
                refiner,
            },
            store,
        ))
    }

    pub fn feature_len(&self) -> usize {
        self.cfg.feature_len()
    }

    pub fn has_fusion(&self) -> bool {
        self.refiner.is_some()
    }

    pub fn allocation(&self, rate: usize) -> Result<BitAllocation, Error> {
        Ok(allocate_bits(rate, self.feature_len(), self.cfg.b_max)?)
    }

    pub fn quantizer_params(&self, store: &ParamStore) -> QuantizerParams {
        let pseudo = store.get(self.q_pseudo).clone();
        QuantizerParams::new(self.cfg.b_max, store.get(self.q_first).clone(), pseudo).expect("built consistently")
    }

    /// Evenly spaced boundaries spanning +-2 standard deviations of each
    /// feature over `features` (one row per sample).
    pub fn init_quantizer(&self, store: &mut ParamStore, features: &[Vec<f64>]) {
        let n = self.feature_len();
        let k = levels_per_feature(self.cfg.b_max);
        let m = features.len().max(1) as f64;
        let delta: Vec<f64> = (0..n)
            .map(|i| {
                let mean = features.iter().map(|f| f[i]).sum::<f64>() / m;
                let var = features.iter().map(|f| (f[i] - mean).powi(2)).sum::<f64>() / m;
                let sd = var.sqrt().max(1e-3);
                4.0 * sd / (k - 1) as f64
            })
            .collect();
        let q = QuantizerParams::uniform(self.cfg.b_max, &delta);
        *store.get_mut(self.q_first) = q.first;
        *store.get_mut(self.q_pseudo) = q.pseudo;
    }

    /// Continuous features `[B, N]`.
    pub fn g_features(&self, s: &mut Session, hs: &[&ChannelMatrix]) -> Result<Var, Error> {
        let x = s.graph.constant(self.net.encoder_input(hs)?);
        Ok(self.net.encode_graph(s, x, hs.len())?)
    }

    /// Boundaries `[N, K]` from the trainable parameters.
    pub fn g_boundaries(&self, s: &mut Session) -> Result<Var, Error> {
        let (f, p) = (s.param(self.q_first), s.param(self.q_pseudo));
        Ok(materialize_op(&mut s.graph, f, p)?)
    }

    /// Dequantized features `z(s)` `[B, N]` at `alloc`, with surrogate
    /// gradients to features and boundaries.
    pub fn g_quantize(&self, s: &mut Session, z: Var, boundaries: Var, alloc: &BitAllocation) -> Result<Var, Error> {
        let lv = quantize_op(&mut s.graph, z, boundaries, alloc)?;
        Ok(s.graph.sum_last(lv))
    }

    /// Sensor tokens `[B * T_d, N_e]`.
    pub fn g_sensor(&self, s: &mut Session, grids: &[&SensorGrid]) -> Result<Var, Error> {
        let ext = self
            .sensor
            .as_ref()
            .ok_or(Error::Config("model has no sensor branch".into()))?;
        let x = s.graph.constant(ext.input(grids)?);
        Ok(ext.forward(s, x, grids.len())?)
    }

    /// Reconstruction `[B, 2 * N_t * N_s]` from `[B, N]`, refined with
    /// sensor tokens when given.
    pub fn g_decode(&self, s: &mut Session, zq: Var, sensor: Option<Var>, batch: usize) -> Result<Var, Error> {
        let net = &self.net;
        let tokens = net.feature_tokens(s, zq, batch)?;
        let refine = match (sensor, &self.refiner) {
            (Some(d), Some(r)) => Some((d, r)),
            (None, _) => None,
            (Some(_), None) => return Err(Error::Config("model has no fusion branch".into())),
        };
        let point = self.cfg.fusion.as_ref().map(|f| f.point);
        let x = match (refine, point) {
            (Some((d, r)), Some(FusionPoint::Bottleneck)) => {
                let t = r.forward(s, tokens, d, batch)?;
                net.decoder.project(s, t)?
            }
            (Some((d, r)), Some(FusionPoint::PostProjection)) => {
                let p = net.decoder.project(s, tokens)?;
                r.forward(s, p, d, batch)?
            }
            _ => net.decoder.project(s, tokens)?,
        };
        let out = net.decoder.expand(s, x, batch)?;
        Ok(net.flatten_output(s, out, batch)?)
    }

    /// Continuous features for each channel (inference).
    pub fn features(&self, store: &ParamStore, hs: &[&ChannelMatrix]) -> Result<Vec<Vec<f64>>, Error> {
        let mut s = Session::inference(store);
        let z = self.g_features(&mut s, hs)?;
        let n = self.feature_len();
        Ok(s.graph.value(z).data().chunks(n).map(|c| c.to_vec()).collect())
    }

    /// Feedback bits for `h` at `rate` total bits.
    pub fn encode(&self, store: &ParamStore, h: &ChannelMatrix, rate: usize) -> Result<CsiBitstream, Error> {
        Ok(self.encode_batch(store, &[h], rate)?.pop().unwrap())
    }

    pub fn encode_batch(
        &self,
        store: &ParamStore,
        hs: &[&ChannelMatrix],
        rate: usize,
    ) -> Result<Vec<CsiBitstream>, Error> {
        let alloc = self.allocation(rate)?;
        let grid = self.quantizer_params(store).materialize_boundaries();
        self.features(store, hs)?
            .iter()
            .map(|z| {
                let levels: Vec<_> = z
                    .iter()
                    .enumerate()
                    .map(|(i, &zi)| quantize_levels(zi, grid.row(i), alloc.bits[i], alloc.b_max))
                    .collect();
                Ok(CsiBitstream::from_levels(&levels, alloc.clone())?)
            })
            .collect()
    }

    /// Channel estimates from bitstreams, with optional sensor grids (all or
    /// none). Without grids the sensor branch is bypassed.
    pub fn decode_batch(
        &self,
        store: &ParamStore,
        bits: &[&CsiBitstream],
        sensors: Option<&[&SensorGrid]>,
    ) -> Result<Vec<ChannelMatrix>, Error> {
        let n = self.feature_len();
        let batch = bits.len();
        let mut zq = Vec::with_capacity(batch * n);
        for b in bits {
            if b.allocation().features() != n || b.allocation().b_max != self.cfg.b_max {
                return Err(Error::Config(format!(
                    "bitstream for {} features at b_max {}, model has {n} at {}",
                    b.allocation().features(),
                    b.allocation().b_max,
                    self.cfg.b_max
                )));
            }
            zq.extend(level_sum(&b.levels()));
        }
        let mut s = Session::inference(store);
        let z = s.graph.constant(Tensor::new(vec![batch, n], zq)?);
        let sensor = match sensors {
            Some(g) => Some(self.g_sensor(&mut s, g)?),
            None => None,
        };
        let out = self.g_decode(&mut s, z, sensor, batch)?;
        let d = 2 * self.cfg.net.n_tx * self.cfg.net.n_sc;
        Ok(s.graph
            .value(out)
            .data()
            .chunks(d)
            .map(|o| self.net.output_to_channel(o))
            .collect())
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        bits: &CsiBitstream,
        sensor: Option<&SensorGrid>,
    ) -> Result<ChannelMatrix, Error> {
        let sensors = sensor.map(|g| vec![g]);
        Ok(self.decode_batch(store, &[bits], sensors.as_deref())?.pop().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_dataset, GenOptions, SimConfig};

    #[test]
    fn config_blob_roundtrip() {
        for cfg in [CodecConfig::desk(), CodecConfig::desk_fused()] {
            let mut w = Writer::new();
            cfg.write_to(&mut w);
            let bytes = w.finish();
            let mut r = Reader::new(&bytes);
            assert_eq!(CodecConfig::read_from(&mut r).unwrap(), cfg);
            r.expect_end().unwrap();
        }
    }

    #[test]
    fn groups_and_quantizer_count() {
        let (codec, store) = Codec::new(&CodecConfig::desk_fused(), 0).unwrap();
        let mut groups = store.groups();
        groups.sort();
        let mut expected = GROUPS.to_vec();
        expected.sort();
        assert_eq!(groups, expected);
        assert_eq!(store.count_in_group("quantizer"), 336);
        assert_eq!(codec.quantizer_params(&store).param_count(), 336);
    }

    #[test]
    fn bitstream_length_and_roundtrip_shape() {
        let ds = generate_dataset(
            &SimConfig::desk(),
            &GenOptions {
                count: 2,
                uplink: true,
                ..Default::default()
            },
        )
        .unwrap();
        let (codec, store) = Codec::new(&CodecConfig::desk_fused(), 1).unwrap();
        let h = &ds.samples[0].downlink;
        for rate in [48, 76, 144] {
            let bits = codec.encode(&store, h, rate).unwrap();
            assert_eq!(bits.len(), rate);
            let plain = codec.decode(&store, &bits, None).unwrap();
            let grid = SensorGrid::from_uplink(ds.samples[0].uplink.as_ref().unwrap(), (2, 8));
            let fused = codec.decode(&store, &bits, Some(&grid)).unwrap();
            // zero-initialized fold: sensor data changes nothing yet
            assert_eq!(plain, fused);
        }
        assert!(codec.encode(&store, h, 47).is_err());
    }
}
