//! Multipath MIMO-OFDM channel synthesis.
//!
//! A [`RaySet`] is drawn from a parametric sampler and turned into an
//! antenna x subcarrier [`ChannelMatrix`] by summing plane waves. Downlink
//! and uplink share geometry but not phases. Samples persist in a compact
//! little-endian [`dataset`] file.

pub mod dataset;
mod rays;

use num_complex::Complex64;
use thiserror::Error;

pub use dataset::{
    decode_dataset, encode_dataset, generate_dataset, read_dataset, write_dataset, Dataset, GenOptions, Sample,
};
pub use rays::{
    corrupt_estimate, make_paired_uplink, rays_to_channel, redraw_phases, sample_rayset, RaySet, XPOL_ATTENUATION_DB,
};

use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid ray set: {0}")]
    Rays(String),
    #[error("path delay {delay:e} s outside the FFT window of {window:e} s")]
    DelayOutOfWindow { delay: f64, window: f64 },
    #[error("channel has zero Frobenius norm")]
    ZeroNorm,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Air-interface and array description.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n_tx: usize,
    pub n_rb: usize,
    pub n_sc: usize,
    pub scs_hz: f64,
    pub f_dl_hz: f64,
    pub f_ul_hz: f64,
    pub fft_size: usize,
    pub sample_rate_hz: f64,
    pub array_rows: usize,
    pub array_cols: usize,
    pub dual_polarized: bool,
}

impl SimConfig {
    /// 4x4 dual-polarized array, 48 resource blocks.
    pub fn full() -> Self {
        Self {
            n_tx: 32,
            n_rb: 48,
            n_sc: 576,
            scs_hz: 60e3,
            f_dl_hz: 28e9,
            f_ul_hz: 27e9,
            fft_size: 1024,
            sample_rate_hz: 61_440_000.0,
            array_rows: 4,
            array_cols: 4,
            dual_polarized: true,
        }
    }

    /// 2x2 dual-polarized array, 16 resource blocks.
    pub fn desk() -> Self {
        Self {
            n_tx: 8,
            n_rb: 16,
            n_sc: 192,
            fft_size: 256,
            sample_rate_hz: 15_360_000.0,
            array_rows: 2,
            array_cols: 2,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let pol = if self.dual_polarized { 2 } else { 1 };
        let fail = |m: String| Err(SimError::Config(m));
        if self.n_sc != 12 * self.n_rb || self.n_rb == 0 {
            return fail(format!("n_sc {} != 12 * n_rb {}", self.n_sc, self.n_rb));
        }
        if self.n_tx != self.array_rows * self.array_cols * pol {
            return fail(format!(
                "n_tx {} != {}x{}x{pol}",
                self.n_tx, self.array_rows, self.array_cols
            ));
        }
        if !self.n_tx.is_multiple_of(2) {
            return fail(format!("n_tx {} is odd", self.n_tx));
        }
        if self.f_dl_hz == self.f_ul_hz {
            return fail("downlink and uplink carriers coincide".into());
        }
        if self.n_sc > self.fft_size {
            return fail(format!("{} subcarriers exceed FFT size {}", self.n_sc, self.fft_size));
        }
        if !(self.scs_hz > 0.0 && self.sample_rate_hz > 0.0) {
            return fail("non-positive spacing or sample rate".into());
        }
        Ok(())
    }

    /// Length of one OFDM symbol without cyclic prefix.
    pub fn fft_duration(&self) -> f64 {
        self.fft_size as f64 / self.sample_rate_hz
    }

    /// Baseband offset of subcarrier `n` from the carrier.
    pub fn subcarrier_hz(&self, n: usize) -> f64 {
        (n as f64 - (self.n_sc as f64 - 1.0) / 2.0) * self.scs_hz
    }
}

/// Complex `n_tx x n_sc` grid stored antenna-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    n_tx: usize,
    n_sc: usize,
    data: Vec<Complex64>,
}

impl ChannelMatrix {
    pub fn new(n_tx: usize, n_sc: usize, data: Vec<Complex64>) -> Result<Self, SimError> {
        if data.len() != n_tx * n_sc {
            return Err(SimError::Config(format!(
                "{} entries for a {n_tx}x{n_sc} grid",
                data.len()
            )));
        }
        Ok(Self { n_tx, n_sc, data })
    }

    pub fn zeros(n_tx: usize, n_sc: usize) -> Self {
        Self {
            n_tx,
            n_sc,
            data: vec![Complex64::new(0.0, 0.0); n_tx * n_sc],
        }
    }

    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn n_sc(&self) -> usize {
        self.n_sc
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, t: usize, n: usize) -> Complex64 {
        self.data[t * self.n_sc + n]
    }

    /// Column `h_n` across antennas.
    pub fn column(&self, n: usize) -> Vec<Complex64> {
        (0..self.n_tx).map(|t| self.get(t, n)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|c| c * s).collect(),
            ..self.clone()
        }
    }

    /// Entries rounded through `f32`, matching what a dataset file stores.
    pub fn to_f32_precision(&self) -> Self {
        let r = |x: f64| x as f32 as f64;
        Self {
            data: self.data.iter().map(|c| Complex64::new(r(c.re), r(c.im))).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}
