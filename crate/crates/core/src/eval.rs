//! Beamforming metrics and rate sweeps over a trained checkpoint.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::chansim::{corrupt_estimate, ChannelMatrix, Dataset};
use crate::fusion::SensorGrid;
use crate::parallel;
use crate::trainer::{reconstruction_loss, sensor_grid, Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("column {0} of the reconstructed channel is zero")]
    ZeroColumn(usize),
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("fused mode needs a checkpoint with a fusion branch")]
    MissingFusion,
    #[error("rate {rate} outside [{lo}, {hi}]")]
    RateOutOfRange { rate: usize, lo: usize, hi: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Codec(#[from] crate::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    CsiOnly,
    Fused,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::CsiOnly => "csi_only",
            Mode::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csi_only" => Some(Mode::CsiOnly),
            "fused" => Some(Mode::Fused),
            _ => None,
        }
    }
}

fn same_shape(a: &ChannelMatrix, b: &ChannelMatrix) -> Result<(), EvalError> {
    if a.n_tx() != b.n_tx() || a.n_sc() != b.n_sc() {
        return Err(EvalError::Mismatch(format!(
            "{}x{} vs {}x{}",
            a.n_tx(),
            a.n_sc(),
            b.n_tx(),
            b.n_sc()
        )));
    }
    Ok(())
}

/// Beamforming matrix whose columns are the unit-norm columns of `h_hat`.
pub fn beamformer_from_channel(h_hat: &ChannelMatrix) -> Result<ChannelMatrix, EvalError> {
    let mut p = h_hat.clone();
    for n in 0..h_hat.n_sc() {
        let norm = h_hat.column(n).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EvalError::ZeroColumn(n));
        }
        for t in 0..h_hat.n_tx() {
            p.data_mut()[t * h_hat.n_sc() + n] /= norm;
        }
    }
    Ok(p)
}

/// `|h_n^H p_n|^2` per subcarrier.
pub fn precoded_gains(h: &ChannelMatrix, p: &ChannelMatrix) -> Result<Vec<f64>, EvalError> {
    same_shape(h, p)?;
    Ok((0..h.n_sc())
        .map(|n| {
            h.column(n)
                .iter()
                .zip(p.column(n))
                .map(|(a, b)| a.conj() * b)
                .sum::<Complex64>()
                .norm_sqr()
        })
        .collect())
}

/// Precoded gains divided by `||h_n||^2`, in `[0, 1]` for unit beams.
pub fn normalized_gains(h: &ChannelMatrix, p: &ChannelMatrix) -> Result<Vec<f64>, EvalError> {
    let g = precoded_gains(h, p)?;
    Ok(g.iter()
        .enumerate()
        .map(|(n, &g)| {
            let e: f64 = h.column(n).iter().map(|c| c.norm_sqr()).sum();
            if e == 0.0 {
                0.0
            } else {
                g / e
            }
        })
        .collect())
}

/// Mean over subcarriers of `Re{h_n^H ĥ_n} / (||h_n|| ||ĥ_n||)`.
pub fn cosine_similarity(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<f64, EvalError> {
    same_shape(h, h_hat)?;
    let mut total = 0.0;
    for n in 0..h.n_sc() {
        let dot: Complex64 = h.column(n).iter().zip(h_hat.column(n)).map(|(a, b)| a.conj() * b).sum();
        let na = h.column(n).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let nb = h_hat.column(n).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            total += dot.re / (na * nb);
        }
    }
    Ok(total / h.n_sc() as f64)
}

/// `Σ_n log2(1 + |h_n^H p_n|^2 · 10^(snr/10))`.
pub fn throughput(h: &ChannelMatrix, p: &ChannelMatrix, snr_db: f64) -> Result<f64, EvalError> {
    let snr = 10f64.powf(snr_db / 10.0);
    Ok(precoded_gains(h, p)?.iter().map(|g| (1.0 + g * snr).log2()).sum())
}

/// Independent isotropic unit beams, one per subcarrier.
pub fn random_beams(n_tx: usize, n_sc: usize, rng: &mut impl Rng) -> ChannelMatrix {
    let data = (0..n_tx * n_sc)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let h = ChannelMatrix::new(n_tx, n_sc, data).expect("consistent dims");
    beamformer_from_channel(&h).expect("gaussian columns are nonzero")
}

/// Empirical CDF: sorted samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cdf {
    samples: Vec<f64>,
}

impl Cdf {
    pub fn new(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        Self { samples }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `P(X <= x)`.
    pub fn prob_at(&self, x: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.partition_point(|&s| s <= x) as f64 / self.samples.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len().max(1) as f64
    }

    /// First-order stochastic dominance: `self`'s CDF never exceeds
    /// `other`'s, checked at every sample point of both.
    pub fn dominates(&self, other: &Cdf) -> bool {
        self.samples
            .iter()
            .chain(&other.samples)
            .all(|&x| self.prob_at(x) <= other.prob_at(x))
    }
}

/// CDF of `|h_n^H p_n|^2` over every (sample, subcarrier) pair.
pub fn gain_cdf(hs: &[&ChannelMatrix], ps: &[&ChannelMatrix]) -> Result<Cdf, EvalError> {
    if hs.len() != ps.len() {
        return Err(EvalError::Mismatch(format!(
            "{} channels, {} beamformers",
            hs.len(),
            ps.len()
        )));
    }
    let mut all = Vec::new();
    for (h, p) in hs.iter().zip(ps) {
        all.extend(precoded_gains(h, p)?);
    }
    Ok(Cdf::new(all))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub rate: usize,
    pub snr_db: f64,
    pub mode: Mode,
    pub mean_loss: f64,
    pub loss_db: f64,
    pub cosine: f64,
    /// Mean of `|h_n^H p_n|^2 / ||h_n||^2`.
    pub normalized_gain: f64,
    /// Mean throughput per sample, bits/s/Hz summed over subcarriers.
    pub throughput: f64,
    pub gains: Cdf,
}

/// Reference beamformers at one SNR: ideal (true channel) and random.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub snr_db: f64,
    pub ideal_gains: Cdf,
    pub ideal_throughput: f64,
    pub random_gains: Cdf,
    pub random_normalized_gain: f64,
    pub random_throughput: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub baselines: Vec<Baseline>,
}

pub const REPORT_HEADER: &str = "snr_db,mode,rate,mean_loss,loss_db,cosine,normalized_gain,throughput";

impl EvalReport {
    pub fn row(&self, rate: usize, snr_db: f64, mode: Mode) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.rate == rate && r.snr_db == snr_db && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.9},{:.6},{:.9},{:.9},{:.6}",
                r.snr_db,
                r.mode.as_str(),
                r.rate,
                r.mean_loss,
                r.loss_db,
                r.cosine,
                r.normalized_gain,
                r.throughput
            );
        }
        out
    }

    pub fn baselines_csv(&self) -> String {
        let mut out = String::from(
            "snr_db,ideal_mean_gain,ideal_throughput,random_mean_gain,random_normalized_gain,random_throughput\n",
        );
        for b in &self.baselines {
            let _ = writeln!(
                out,
                "{},{:.9},{:.6},{:.9},{:.9},{:.6}",
                b.snr_db,
                b.ideal_gains.mean(),
                b.ideal_throughput,
                b.random_gains.mean(),
                b.random_normalized_gain,
                b.random_throughput
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub rates: Vec<usize>,
    pub snrs_db: Vec<f64>,
    pub modes: Vec<Mode>,
    /// Sample indices to evaluate.
    pub indices: Vec<usize>,
    pub seed: u64,
}

struct PerSample {
    loss: f64,
    cosine: f64,
    normalized_gain: f64,
    throughput: f64,
    gains: Vec<f64>,
}

/// Full encode, bit packing, unpacking, optional refinement, and decode for
/// every (snr, mode, rate), with metrics against the clean downlink
/// channels. The encoder sees estimates corrupted at each SNR
/// (`f64::INFINITY` is perfect CSI); the same SNR sets the throughput.
pub fn rate_sweep(ck: &Checkpoint, ds: &Dataset, opts: &SweepOptions) -> Result<EvalReport, EvalError> {
    let (codec, store) = ck.codec()?;
    let (lo, hi) = codec.cfg.rate_range();
    if let Some(&rate) = opts.rates.iter().find(|r| !(lo..=hi).contains(*r)) {
        return Err(EvalError::RateOutOfRange { rate, lo, hi });
    }
    if opts.modes.contains(&Mode::Fused) && !codec.has_fusion() {
        return Err(EvalError::MissingFusion);
    }
    let idx = &opts.indices;
    let truth: Vec<&ChannelMatrix> = idx.iter().map(|&i| &ds.samples[i].downlink).collect();
    let grids: Option<Vec<SensorGrid>> = match &codec.cfg.fusion {
        Some(f) if opts.modes.contains(&Mode::Fused) => Some(
            idx.iter()
                .map(|&i| sensor_grid(&ds.samples[i], i, f))
                .collect::<Result<_, _>>()?,
        ),
        _ => None,
    };
    let mut report = EvalReport::default();
    for &snr in &opts.snrs_db {
        let noisy: Vec<ChannelMatrix> = idx
            .iter()
            .map(|&i| {
                corrupt_estimate(
                    &ds.samples[i].downlink,
                    snr,
                    opts.seed ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
                )
            })
            .collect::<Result<_, _>>()
            .map_err(TrainError::from)?;
        let mut ideal = Vec::new();
        let mut ideal_tp = 0.0;
        let mut rand_g = Vec::new();
        let mut rand_ng = 0.0;
        let mut rand_tp = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ snr.to_bits());
        for h in &truth {
            let p = beamformer_from_channel(h)?;
            ideal.extend(precoded_gains(h, &p)?);
            ideal_tp += throughput(h, &p, snr_or_zero(snr))?;
            let r = random_beams(h.n_tx(), h.n_sc(), &mut rng);
            rand_g.extend(precoded_gains(h, &r)?);
            let ng = normalized_gains(h, &r)?;
            rand_ng += ng.iter().sum::<f64>() / ng.len() as f64;
            rand_tp += throughput(h, &r, snr_or_zero(snr))?;
        }
        let count = truth.len().max(1) as f64;
        report.baselines.push(Baseline {
            snr_db: snr,
            ideal_gains: Cdf::new(ideal),
            ideal_throughput: ideal_tp / count,
            random_gains: Cdf::new(rand_g),
            random_normalized_gain: rand_ng / count,
            random_throughput: rand_tp / count,
        });
        for &mode in &opts.modes {
            for &rate in &opts.rates {
                let chunks: Vec<std::ops::Range<usize>> = parallel::shards(idx.len(), idx.len().div_ceil(32).max(1));
                let parts = parallel::map(&chunks, |r| -> Result<Vec<PerSample>, EvalError> {
                    let inputs: Vec<&ChannelMatrix> = noisy[r.clone()].iter().collect();
                    let bits = codec.encode_batch(&store, &inputs, rate)?;
                    let bit_refs: Vec<_> = bits.iter().collect();
                    let sensor: Option<Vec<&SensorGrid>> = match mode {
                        Mode::Fused => grids.as_ref().map(|g| g[r.clone()].iter().collect()),
                        Mode::CsiOnly => None,
                    };
                    let recon = codec.decode_batch(&store, &bit_refs, sensor.as_deref())?;
                    r.clone()
                        .zip(&recon)
                        .map(|(j, h_hat)| {
                            let h = truth[j];
                            let p = beamformer_from_channel(h_hat)?;
                            let ng = normalized_gains(h, &p)?;
                            Ok(PerSample {
                                loss: reconstruction_loss(h, h_hat)?,
                                cosine: cosine_similarity(h, h_hat)?,
                                normalized_gain: ng.iter().sum::<f64>() / ng.len() as f64,
                                throughput: throughput(h, &p, snr_or_zero(snr))?,
                                gains: precoded_gains(h, &p)?,
                            })
                        })
                        .collect()
                });
                let mut per = Vec::with_capacity(idx.len());
                for p in parts {
                    per.extend(p?);
                }
                let mean = |f: fn(&PerSample) -> f64| per.iter().map(f).sum::<f64>() / per.len().max(1) as f64;
                let mean_loss = mean(|p| p.loss);
                report.rows.push(ReportRow {
                    rate,
                    snr_db: snr,
                    mode,
                    mean_loss,
                    loss_db: 10.0 * mean_loss.log10(),
                    cosine: mean(|p| p.cosine),
                    normalized_gain: mean(|p| p.normalized_gain),
                    throughput: mean(|p| p.throughput),
                    gains: Cdf::new(per.iter().flat_map(|p| p.gains.iter().copied()).collect()),
                });
            }
        }
    }
    Ok(report)
}

/// Perfect-CSI sweeps are labeled with an infinite SNR; throughput for
/// them is reported at 0 dB.
fn snr_or_zero(snr: f64) -> f64 {
    if snr.is_finite() {
        snr
    } else {
        0.0
    }
}

/// Parses `start:stop:step` (inclusive) or a comma list.
pub fn parse_rates(s: &str) -> Option<Vec<usize>> {
    let parts: Vec<&str> = s.split(':').collect();
    if let [a, b, c] = parts[..] {
        let (a, b, c): (usize, usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?, c.trim().parse().ok()?);
        if c == 0 || a > b {
            return None;
        }
        return Some((a..=b).step_by(c).collect());
    }
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}
