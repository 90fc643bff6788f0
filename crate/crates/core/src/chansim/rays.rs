use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use super::{ChannelMatrix, SimConfig, SimError};

/// Cross-polar port attenuation relative to the co-polar port.
pub const XPOL_ATTENUATION_DB: f64 = 8.0;

const MEAN_DELAY_S: f64 = 100e-9;
const DECAY_DB_PER_S: f64 = 3.0 / 100e-9;
const LOS_K_FACTOR_DB: f64 = 6.0;
const SECTOR_HALF_WIDTH: f64 = PI / 3.0;
const ELEVATION_STD: f64 = 10.0 * PI / 180.0;

/// Multipath description of one link. Gains exclude the carrier phase,
/// which [`rays_to_channel`] applies per carrier.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySet {
    pub gains: Vec<Complex64>,
    pub delays: Vec<f64>,
    pub aod_az: Vec<f64>,
    pub aod_el: Vec<f64>,
    pub aoa_az: Vec<f64>,
    pub aoa_el: Vec<f64>,
    /// Phase of the second polarization port relative to the first.
    pub xpol_phase: Vec<f64>,
    pub los: bool,
}

impl RaySet {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn validate(&self, window: f64) -> Result<(), SimError> {
        let n = self.len();
        if n == 0 {
            return Err(SimError::Rays("no paths".into()));
        }
        let lens = [
            self.delays.len(),
            self.aod_az.len(),
            self.aod_el.len(),
            self.aoa_az.len(),
            self.aoa_el.len(),
            self.xpol_phase.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(SimError::Rays(format!("ragged path arrays {lens:?} vs {n}")));
        }
        for &d in &self.delays {
            if !(0.0..window).contains(&d) {
                return Err(SimError::DelayOutOfWindow { delay: d, window });
            }
        }
        if self.los && self.delays.iter().any(|&d| d < self.delays[0]) {
            return Err(SimError::Rays("LOS path is not the earliest".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            gains: self.gains.iter().map(|g| g * s).collect(),
            ..self.clone()
        }
    }
}

fn truncated_exp(rng: &mut impl Rng, exp: &Exp<f64>, limit: f64) -> f64 {
    loop {
        let d = exp.sample(rng);
        if d < limit {
            return d;
        }
    }
}

/// Draws 1 to 6 single-path clusters. Power decays 3 dB per 100 ns of
/// excess delay; a LOS path is the earliest and gets an extra K-factor.
pub fn sample_rayset(cfg: &SimConfig, seed: u64, los_probability: f64) -> RaySet {
    sample_with(&mut ChaCha8Rng::seed_from_u64(seed), cfg, los_probability)
}

pub(crate) fn sample_with(rng: &mut impl Rng, cfg: &SimConfig, los_probability: f64) -> RaySet {
    let window = cfg.fft_duration();
    let exp = Exp::new(1.0 / MEAN_DELAY_S).expect("positive rate");
    let elev = Normal::new(0.0, ELEVATION_STD).expect("positive std");
    let n = rng.random_range(1..=6usize);
    let los = rng.random_bool(los_probability.clamp(0.0, 1.0));

    let first = truncated_exp(rng, &exp, window);
    let mut delays = vec![first];
    for _ in 1..n {
        delays.push(first + truncated_exp(rng, &exp, window - first));
    }
    let min = first;
    let mut power: Vec<f64> = delays
        .iter()
        .map(|d| 10f64.powf(-DECAY_DB_PER_S * (d - min) / 10.0))
        .collect();
    if los {
        power[0] *= 10f64.powf(LOS_K_FACTOR_DB / 10.0);
    }
    let total: f64 = power.iter().sum();

    let mut out = RaySet {
        gains: Vec::with_capacity(n),
        delays,
        aod_az: Vec::with_capacity(n),
        aod_el: Vec::with_capacity(n),
        aoa_az: Vec::with_capacity(n),
        aoa_el: Vec::with_capacity(n),
        xpol_phase: Vec::with_capacity(n),
        los,
    };
    let clip = |x: f64| x.clamp(-PI / 2.0, PI / 2.0);
    for p in power {
        let phase = rng.random_range(0.0..2.0 * PI);
        out.gains.push(Complex64::from_polar((p / total).sqrt(), phase));
        out.aod_az.push(rng.random_range(-SECTOR_HALF_WIDTH..SECTOR_HALF_WIDTH));
        out.aod_el.push(clip(elev.sample(rng)));
        out.aoa_az.push(rng.random_range(-PI..PI));
        out.aoa_el.push(clip(elev.sample(rng)));
        out.xpol_phase.push(rng.random_range(0.0..2.0 * PI));
    }
    out
}

/// Same geometry and gain magnitudes, fresh path and polarization phases.
pub fn redraw_phases(rays: &RaySet, seed: u64) -> RaySet {
    redraw_with(rays, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn redraw_with(rays: &RaySet, rng: &mut impl Rng) -> RaySet {
    let mut out = rays.clone();
    for (g, x) in out.gains.iter_mut().zip(out.xpol_phase.iter_mut()) {
        *g = Complex64::from_polar(g.norm(), rng.random_range(0.0..2.0 * PI));
        *x = rng.random_range(0.0..2.0 * PI);
    }
    out
}

/// Half-wavelength planar array response of element `(r, c)`.
fn steer(r: usize, c: usize, az: f64, el: f64) -> Complex64 {
    Complex64::from_polar(1.0, PI * (r as f64 * el.sin() + c as f64 * el.cos() * az.sin()))
}

/// Plane-wave sum over paths. Antenna index is
/// `(row * cols + col) * pols + pol`, so neighbouring ports share an element.
pub fn rays_to_channel(rays: &RaySet, cfg: &SimConfig, carrier_hz: f64) -> Result<ChannelMatrix, SimError> {
    rays.validate(cfg.fft_duration())?;
    let pols = if cfg.dual_polarized { 2 } else { 1 };
    let xpol = 10f64.powf(-XPOL_ATTENUATION_DB / 20.0);
    let mut h = ChannelMatrix::zeros(cfg.n_tx, cfg.n_sc);
    let freqs: Vec<f64> = (0..cfg.n_sc).map(|n| cfg.subcarrier_hz(n)).collect();
    let mut ramp = vec![Complex64::new(0.0, 0.0); cfg.n_sc];
    for l in 0..rays.len() {
        let tau = rays.delays[l];
        let g = rays.gains[l] * Complex64::from_polar(1.0, -2.0 * PI * carrier_hz * tau);
        for (r, &f) in ramp.iter_mut().zip(&freqs) {
            *r = Complex64::from_polar(1.0, -2.0 * PI * f * tau);
        }
        for row in 0..cfg.array_rows {
            for col in 0..cfg.array_cols {
                let a = g * steer(row, col, rays.aod_az[l], rays.aod_el[l]);
                for pol in 0..pols {
                    let coef = if pol == 0 {
                        a
                    } else {
                        a * Complex64::from_polar(xpol, rays.xpol_phase[l])
                    };
                    let t = (row * cfg.array_cols + col) * pols + pol;
                    let dst = &mut h.data_mut()[t * cfg.n_sc..(t + 1) * cfg.n_sc];
                    for (d, r) in dst.iter_mut().zip(&ramp) {
                        *d += coef * r;
                    }
                }
            }
        }
    }
    Ok(h)
}

/// Uplink channel at the uplink carrier with phases re-drawn from `seed`.
pub fn make_paired_uplink(rays: &RaySet, cfg: &SimConfig, seed: u64) -> Result<ChannelMatrix, SimError> {
    rays_to_channel(&redraw_phases(rays, seed), cfg, cfg.f_ul_hz)
}

/// Adds circularly symmetric Gaussian noise at `snr_db` relative to the
/// average entry power. `f64::INFINITY` returns the input unchanged.
pub fn corrupt_estimate(h: &ChannelMatrix, snr_db: f64, seed: u64) -> Result<ChannelMatrix, SimError> {
    let norm = h.frobenius_norm();
    if norm == 0.0 {
        return Err(SimError::ZeroNorm);
    }
    if snr_db == f64::INFINITY {
        return Ok(h.clone());
    }
    if !snr_db.is_finite() {
        return Err(SimError::Config(format!("snr {snr_db} dB")));
    }
    let var = norm * norm / h.data().len() as f64 * 10f64.powf(-snr_db / 10.0);
    let sd = (var / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = h.clone();
    for c in out.data_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *c += Complex64::new(re * sd, im * sd);
    }
    Ok(out)
}
