//! Losses, Adam, and the two training stages.
//!
//! Stage 1 fits encoder, quantizer, and decoder under the rate-weighted
//! loss. Stage 2 loads those groups frozen and fits only the sensor
//! extractor and the refiner.

mod checkpoint;
mod loss;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{group_hash, load_checkpoint, save_checkpoint, Checkpoint, TrainMeta};
pub use loss::{normalized_loss_op, normalized_losses, rate_weights, reconstruction_loss, weighted_rate_loss};

use crate::autonet::NetError;
use crate::chansim::{corrupt_estimate, ChannelMatrix, Dataset, Sample, SimError};
use crate::codec::{Codec, CodecConfig, STAGE1_GROUPS, STAGE2_GROUPS};
use crate::diffcore::{DiffError, ParamStore, Session, Tensor, Var};
use crate::fusion::{FusionConfig, SensorGrid};
use crate::parallel;
use crate::quantizer::QuantError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("zero-norm channel")]
    ZeroNorm,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in group {group} ({param})")]
    NonFinite { group: String, param: String },
    #[error("sample {0} has no sensor modality")]
    MissingModality(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl From<crate::Error> for TrainError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Train(t) => t,
            crate::Error::Net(n) => TrainError::Net(n),
            crate::Error::Quant(q) => TrainError::Quant(q),
            crate::Error::Diff(d) => TrainError::Diff(d),
            crate::Error::Sim(e) => TrainError::Sim(e),
            other => TrainError::Other(other.to_string()),
        }
    }
}

pub const TRAINED_RATES: [usize; 5] = [48, 72, 96, 120, 144];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub rates: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Encoder inputs are corrupted at this SNR when set; targets stay clean.
    pub snr_db: Option<f64>,
    pub seed: u64,
    /// Trailing share of the dataset held out for validation.
    pub val_fraction: f64,
    /// Gradient shards per batch. Results depend on this, never on the
    /// thread count.
    pub shards: usize,
    pub clip_norm: f64,
    /// Append-only CSV of per-epoch, per-rate losses.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rates: TRAINED_RATES.to_vec(),
            gamma: 2f64.powf(1.0 / 96.0),
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            snr_db: None,
            seed: 0,
            val_fraction: 0.1,
            shards: 4,
            clip_norm: 5.0,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, codec: &CodecConfig) -> Result<(), TrainError> {
        let (lo, hi) = codec.rate_range();
        if self.gamma <= 1.0 {
            return Err(TrainError::Config(format!("gamma {} must exceed 1", self.gamma)));
        }
        if self.rates.is_empty() || self.rates.iter().any(|r| !(lo..=hi).contains(r)) {
            return Err(TrainError::Config(format!(
                "rates {:?} outside [{lo}, {hi}]",
                self.rates
            )));
        }
        if self.batch_size == 0 || self.shards == 0 {
            return Err(TrainError::Config("batch size and shard count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config("bad validation fraction or learning rate".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Applies one update. Parameters without a gradient are untouched.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<(), TrainError> {
        if grads.len() != store.len() {
            return Err(TrainError::Mismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (e, g) in store.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != e.value.shape() {
                    return Err(TrainError::Mismatch(format!("gradient shape for {}", e.name)));
                }
                if !g.is_finite() {
                    return Err(TrainError::NonFinite {
                        group: e.group.clone(),
                        param: e.name.clone(),
                    });
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let c = max / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// Sensor grid for a sample: the stored one, else derived from its uplink.
pub fn sensor_grid(sample: &Sample, index: usize, fusion: &FusionConfig) -> Result<SensorGrid, TrainError> {
    if let Some(g) = &sample.sensor {
        return Ok(g.clone());
    }
    match &sample.uplink {
        Some(u) => Ok(SensorGrid::from_uplink(u, fusion.patch)),
        None => Err(TrainError::MissingModality(index)),
    }
}

/// One forward batch: encoder inputs, targets, and optional sensor grids.
pub struct Batch<'a> {
    pub inputs: Vec<ChannelMatrix>,
    pub targets: Vec<&'a ChannelMatrix>,
    pub grids: Option<Vec<SensorGrid>>,
}

impl<'a> Batch<'a> {
    /// Builds a batch from `indices` into `samples`. Input corruption, when
    /// `snr_db` is set, draws from `seed` and the sample index.
    pub fn new(
        samples: &'a [Sample],
        indices: &[usize],
        snr_db: Option<f64>,
        seed: u64,
        fusion: Option<&FusionConfig>,
    ) -> Result<Self, TrainError> {
        let inputs = indices
            .iter()
            .map(|&i| match snr_db {
                Some(snr) => corrupt_estimate(
                    &samples[i].downlink,
                    snr,
                    seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ),
                None => Ok(samples[i].downlink.clone()),
            })
            .collect::<Result<_, _>>()?;
        let grids = match fusion {
            Some(f) => Some(
                indices
                    .iter()
                    .map(|&i| sensor_grid(&samples[i], i, f))
                    .collect::<Result<_, _>>()?,
            ),
            None => None,
        };
        Ok(Self {
            inputs,
            targets: indices.iter().map(|&i| &samples[i].downlink).collect(),
            grids,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Per-rate mean loss vars for a batch, sharing one encoder pass.
pub fn rate_loss_graph(codec: &Codec, s: &mut Session, batch: &Batch, rates: &[usize]) -> Result<Vec<Var>, TrainError> {
    let n = batch.len();
    let inputs: Vec<&ChannelMatrix> = batch.inputs.iter().collect();
    let target = codec.net.target(&batch.targets)?;
    let z = codec.g_features(s, &inputs)?;
    let bnd = codec.g_boundaries(s)?;
    let sensor = match &batch.grids {
        Some(g) => {
            let refs: Vec<&SensorGrid> = g.iter().collect();
            Some(codec.g_sensor(s, &refs)?)
        }
        None => None,
    };
    let mut out = Vec::with_capacity(rates.len());
    for &rate in rates {
        let alloc = codec.allocation(rate)?;
        let zq = codec.g_quantize(s, z, bnd, &alloc)?;
        let pred = codec.g_decode(s, zq, sensor, n)?;
        out.push(normalized_loss_op(&mut s.graph, pred, &target)?);
    }
    Ok(out)
}

/// `(weighted loss, per-rate losses, gradient per parameter)`.
pub type BatchGrads = (f64, Vec<f64>, Vec<Option<Tensor>>);

/// Rate-weighted loss, per-rate losses, and parameter gradients for a
/// batch. The batch is cut into `shards` contiguous pieces, each
/// differentiated in its own session; results are combined in shard order
/// weighted by shard size.
pub fn batch_gradients(
    codec: &Codec,
    store: &ParamStore,
    groups: &[&str],
    batch: &Batch,
    rates: &[usize],
    gamma: f64,
    shards: usize,
) -> Result<BatchGrads, TrainError> {
    let weights = rate_weights(rates, gamma)?;
    let n = batch.len();
    let ranges = parallel::shards(n, shards);
    let parts = parallel::map(&ranges, |r| -> Result<_, TrainError> {
        let sub = Batch {
            inputs: batch.inputs[r.clone()].to_vec(),
            targets: batch.targets[r.clone()].to_vec(),
            grids: batch.grids.as_ref().map(|g| g[r.clone()].to_vec()),
        };
        let mut s = Session::training(store, groups);
        let losses = rate_loss_graph(codec, &mut s, &sub, rates)?;
        let values: Vec<f64> = losses.iter().map(|&l| s.graph.value(l).item().unwrap()).collect();
        let mut total = None;
        for (&l, &w) in losses.iter().zip(&weights) {
            let t = s.graph.scale(l, w);
            total = Some(match total {
                None => t,
                Some(acc) => s.graph.add(acc, t)?,
            });
        }
        let grads = s.param_grads(total.unwrap())?;
        Ok((r.len() as f64 / n as f64, values, grads))
    });
    let mut per_rate = vec![0.0; rates.len()];
    let mut acc: Vec<Option<Tensor>> = vec![None; store.len()];
    for part in parts {
        let (share, values, grads) = part?;
        for (p, v) in per_rate.iter_mut().zip(values) {
            *p += share * v;
        }
        for (a, g) in acc.iter_mut().zip(grads) {
            let Some(mut g) = g else { continue };
            g.data_mut().iter_mut().for_each(|x| *x *= share);
            match a {
                None => *a = Some(g),
                Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            }
        }
    }
    let weighted = weights.iter().zip(&per_rate).map(|(w, l)| w * l).sum();
    Ok((weighted, per_rate, acc))
}

/// Mean loss per rate over `indices` with perfect-CSI inputs, evaluated in
/// chunks with no gradient recording. Sensor grids are used when `fused`
/// is set.
pub fn evaluate_losses(
    codec: &Codec,
    store: &ParamStore,
    samples: &[Sample],
    indices: &[usize],
    rates: &[usize],
    fused: bool,
) -> Result<Vec<f64>, TrainError> {
    let fusion = if fused {
        Some(
            codec
                .cfg
                .fusion
                .as_ref()
                .ok_or(TrainError::Config("fused evaluation without a fusion branch".into()))?,
        )
    } else {
        None
    };
    let chunks: Vec<&[usize]> = indices.chunks(32).collect();
    let parts = parallel::map(&chunks, |idx| -> Result<Vec<f64>, TrainError> {
        let batch = Batch::new(samples, idx, None, 0, fusion)?;
        let mut s = Session::inference(store);
        let losses = rate_loss_graph(codec, &mut s, &batch, rates)?;
        Ok(losses
            .iter()
            .map(|&l| s.graph.value(l).item().unwrap() * idx.len() as f64)
            .collect())
    });
    let mut sums = vec![0.0; rates.len()];
    for p in parts {
        for (s, v) in sums.iter_mut().zip(p?) {
            *s += v;
        }
    }
    let n = indices.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub rate: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,rate,train_loss,val_loss";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.9},{:.9}",
            self.epoch, self.rate, self.train_loss, self.val_loss
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Validation losses per rate before the first update.
    pub initial_val: Vec<f64>,
    /// Validation losses per rate after each epoch.
    pub val: Vec<Vec<f64>>,
    /// Rate-weighted validation loss after each epoch.
    pub val_weighted: Vec<f64>,
    pub best_epoch: usize,
    pub rows: Vec<LogRow>,
}

fn split(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

fn check_dataset(ds: &Dataset, cfg: &CodecConfig) -> Result<(), TrainError> {
    if ds.samples.is_empty() {
        return Err(TrainError::Mismatch("empty dataset".into()));
    }
    let (t, s) = (ds.config.n_tx, ds.config.n_sc);
    if t != cfg.net.n_tx || s != cfg.net.n_sc {
        return Err(TrainError::Mismatch(format!(
            "dataset channels {t}x{s}, network expects {}x{}",
            cfg.net.n_tx, cfg.net.n_sc
        )));
    }
    Ok(())
}

struct Run<'a> {
    codec: &'a Codec,
    groups: &'a [&'a str],
    cfg: &'a TrainConfig,
    samples: &'a [Sample],
    fusion: Option<&'a FusionConfig>,
}

impl Run<'_> {
    fn go(&self, store: &mut ParamStore) -> Result<TrainReport, TrainError> {
        let cfg = self.cfg;
        let (train, val) = split(self.samples.len(), cfg.val_fraction);
        let val = if val.is_empty() { train.clone() } else { val };
        let fused = self.fusion.is_some();
        let eval = |store: &ParamStore| evaluate_losses(self.codec, store, self.samples, &val, &cfg.rates, fused);
        let initial_val = eval(store)?;
        let mut log = match &cfg.log_path {
            Some(p) => {
                let mut f = OpenOptions::new().create(true).append(true).open(p)?;
                if f.metadata()?.len() == 0 {
                    writeln!(f, "{LOG_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut adam = Adam::new(store, cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut report = TrainReport {
            initial_val,
            val: Vec::new(),
            val_weighted: Vec::new(),
            best_epoch: 0,
            rows: Vec::new(),
        };
        let mut best: Option<(f64, ParamStore)> = None;
        for epoch in 0..cfg.epochs {
            let mut order = train.clone();
            order.shuffle(&mut rng);
            let mut train_sum = vec![0.0; cfg.rates.len()];
            for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
                let noise_seed = cfg.seed ^ ((epoch as u64) << 32 | step as u64);
                let batch = Batch::new(self.samples, idx, cfg.snr_db, noise_seed, self.fusion)?;
                let (_, per_rate, mut grads) = batch_gradients(
                    self.codec,
                    store,
                    self.groups,
                    &batch,
                    &cfg.rates,
                    cfg.gamma,
                    cfg.shards,
                )?;
                clip_global_norm(&mut grads, cfg.clip_norm);
                adam.step(store, &grads)?;
                for (s, l) in train_sum.iter_mut().zip(per_rate) {
                    *s += l * idx.len() as f64;
                }
            }
            let v = eval(store)?;
            let w = weighted_rate_loss(&v, &cfg.rates, cfg.gamma)?;
            for (i, &rate) in cfg.rates.iter().enumerate() {
                let row = LogRow {
                    epoch,
                    rate,
                    train_loss: train_sum[i] / train.len() as f64,
                    val_loss: v[i],
                };
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{}", row.csv())?;
                }
                report.rows.push(row);
            }
            if best.as_ref().is_none_or(|(b, _)| w < *b) {
                best = Some((w, store.clone()));
                report.best_epoch = epoch;
            }
            report.val.push(v);
            report.val_weighted.push(w);
        }
        if let Some((_, s)) = best {
            *store = s;
        }
        Ok(report)
    }
}

/// Warm-up statistics for the quantizer: encoder features of up to 256
/// training samples.
fn init_quantizer(codec: &Codec, store: &mut ParamStore, samples: &[Sample]) -> Result<(), TrainError> {
    let take = samples.len().min(256);
    let hs: Vec<&ChannelMatrix> = samples[..take].iter().map(|s| &s.downlink).collect();
    let chunks: Vec<&[&ChannelMatrix]> = hs.chunks(32).collect();
    let mut feats = Vec::with_capacity(take);
    for part in parallel::map(&chunks, |c| codec.features(store, c)) {
        feats.extend(part?);
    }
    codec.init_quantizer(store, &feats);
    Ok(())
}

/// Trains encoder, quantizer, and decoder from scratch and returns the
/// checkpoint with the lowest validation loss.
pub fn train_stage1(
    ds: &Dataset,
    codec_cfg: &CodecConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    let codec_cfg = CodecConfig {
        fusion: None,
        ..codec_cfg.clone()
    };
    check_dataset(ds, &codec_cfg)?;
    cfg.validate(&codec_cfg)?;
    let (codec, mut store) = Codec::new(&codec_cfg, cfg.seed)?;
    let (train, _) = split(ds.samples.len(), cfg.val_fraction);
    init_quantizer(&codec, &mut store, &ds.samples[..train.len()])?;
    let report = Run {
        codec: &codec,
        groups: &STAGE1_GROUPS,
        cfg,
        samples: &ds.samples,
        fusion: None,
    }
    .go(&mut store)?;
    let meta = TrainMeta {
        stage: 1,
        epochs: cfg.epochs as u32,
        best_epoch: report.best_epoch as u32,
        best_val: report.val_weighted.get(report.best_epoch).copied().unwrap_or(f64::NAN),
    };
    Ok((Checkpoint::new(codec_cfg, store, Vec::new(), meta), report))
}

/// Fused model initialized from a stage-1 checkpoint: stage-1 groups take
/// the checkpoint values, sensor and fusion groups are fresh from `seed`.
pub fn fused_from_stage1(
    stage1: &Checkpoint,
    fusion: &FusionConfig,
    seed: u64,
) -> Result<(Codec, ParamStore), TrainError> {
    let cfg = CodecConfig {
        fusion: Some(fusion.clone()),
        ..stage1.config.clone()
    };
    let (codec, mut store) = Codec::new(&cfg, seed)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let e = store.entry(id);
        if STAGE1_GROUPS.contains(&e.group.as_str()) {
            let src = stage1
                .store
                .find(&e.name)
                .ok_or_else(|| TrainError::Mismatch(format!("stage-1 checkpoint lacks {}", e.name)))?;
            let v = stage1.store.get(src).clone();
            if v.shape() != e.value.shape() {
                return Err(TrainError::Mismatch(format!("shape of {}", e.name)));
            }
            *store.get_mut(id) = v;
        }
    }
    Ok((codec, store))
}

/// Trains only the sensor extractor and refiner on top of a frozen stage-1
/// model.
pub fn train_stage2(
    ds: &Dataset,
    stage1: &Checkpoint,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    check_dataset(ds, &stage1.config)?;
    cfg.validate(&stage1.config)?;
    for (i, s) in ds.samples.iter().enumerate() {
        if s.sensor.is_none() && s.uplink.is_none() {
            return Err(TrainError::MissingModality(i));
        }
    }
    let (codec, mut store) = fused_from_stage1(stage1, fusion, cfg.seed)?;
    let report = Run {
        codec: &codec,
        groups: &STAGE2_GROUPS,
        cfg,
        samples: &ds.samples,
        fusion: Some(fusion),
    }
    .go(&mut store)?;
    let meta = TrainMeta {
        stage: 2,
        epochs: cfg.epochs as u32,
        best_epoch: report.best_epoch as u32,
        best_val: report.val_weighted.get(report.best_epoch).copied().unwrap_or(f64::NAN),
    };
    let frozen = STAGE1_GROUPS.iter().map(|g| g.to_string()).collect();
    Ok((Checkpoint::new(codec.cfg.clone(), store, frozen, meta), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_dataset, GenOptions, SimConfig};

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut store = ParamStore::new();
        let a = store.add("encoder", "a", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(&store, 1e-3);
        adam.step(&mut store, &[Some(Tensor::vector(vec![0.0, 0.0]))]).unwrap();
        assert_eq!(store.get(a).data(), &[1.0, -2.0]);
        let mut adam = Adam::new(&store, 1e-3);
        let g = 0.37;
        adam.step(&mut store, &[Some(Tensor::vector(vec![g, -g]))]).unwrap();
        // bias-corrected moments: m = g, v = g^2
        let step = 1e-3 * g / (g + 1e-8);
        assert!((store.get(a).data()[0] - (1.0 - step)).abs() < 1e-15);
        assert!((store.get(a).data()[1] - (-2.0 + step)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan_naming_group() {
        let mut store = ParamStore::new();
        store.add("quantizer", "quant.first", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(&store, 1e-3);
        let err = adam
            .step(&mut store, &[Some(Tensor::vector(vec![f64::NAN]))])
            .unwrap_err();
        assert!(err.to_string().contains("quantizer"));
        assert_eq!(store.get(store.find("quant.first").unwrap()).data(), &[0.0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![
            Some(Tensor::vector(vec![3.0, 4.0])),
            None,
            Some(Tensor::vector(vec![12.0])),
        ];
        assert_eq!(clip_global_norm(&mut g, 5.0), 13.0);
        let after: f64 = g
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let c = CodecConfig::desk();
        assert!(TrainConfig::default().validate(&c).is_ok());
        let bad = TrainConfig {
            rates: vec![47],
            ..Default::default()
        };
        assert!(bad.validate(&c).is_err());
        let bad = TrainConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(bad.validate(&c).is_err());
    }

    #[test]
    fn shard_count_changes_nothing_but_rounding() {
        let ds = generate_dataset(
            &SimConfig::desk(),
            &GenOptions {
                count: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let (codec, store) = Codec::new(&CodecConfig::desk(), 3).unwrap();
        let idx = [0, 1, 2, 3];
        let batch = Batch::new(&ds.samples, &idx, None, 0, None).unwrap();
        let (l1, _, g1) = batch_gradients(&codec, &store, &STAGE1_GROUPS, &batch, &[48, 144], 1.01, 1).unwrap();
        let (l2, _, g2) = batch_gradients(&codec, &store, &STAGE1_GROUPS, &batch, &[48, 144], 1.01, 3).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
                    }
                }
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
    }

    #[test]
    fn stage2_rejects_missing_modality() {
        let ds = generate_dataset(
            &SimConfig::desk(),
            &GenOptions {
                count: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let (codec, store) = Codec::new(&CodecConfig::desk(), 0).unwrap();
        let ck = Checkpoint::new(codec.cfg.clone(), store, Vec::new(), TrainMeta::default());
        let err = train_stage2(&ds, &ck, &FusionConfig::desk_uplink(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::MissingModality(0)));
    }
}
