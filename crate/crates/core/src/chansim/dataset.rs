//! Dataset file: `"CSIFORGE"`, u32 version, config, u64 count, records.
//! Each record is a modality bitmask (bit 0 downlink, bit 1 uplink, bit 2
//! sensor grid), the present grids as interleaved f32 `(re, im)` in
//! antenna-major order, then the ray set as length-prefixed f64 arrays.

use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rays::{redraw_with, sample_with};
use super::{rays_to_channel, ChannelMatrix, RaySet, SimConfig, SimError};
use crate::fusion::SensorGrid;
use crate::parallel;
use crate::wire::{Reader, WireError, Writer};

const MAGIC: &str = "CSIFORGE";
const VERSION: u32 = 1;

const HAS_DOWNLINK: u8 = 1;
const HAS_UPLINK: u8 = 2;
const HAS_SENSOR: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub downlink: ChannelMatrix,
    pub uplink: Option<ChannelMatrix>,
    pub sensor: Option<SensorGrid>,
    pub rays: RaySet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    pub count: usize,
    pub seed: u64,
    pub los_probability: f64,
    pub uplink: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            los_probability: 0.5,
            uplink: false,
        }
    }
}

/// Sample `i` uses ChaCha stream `i` of `seed`, so output does not depend
/// on how samples are scheduled across threads.
pub fn generate_dataset(cfg: &SimConfig, opts: &GenOptions) -> Result<Dataset, SimError> {
    cfg.validate()?;
    let samples = parallel::map_range(opts.count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let rays = sample_with(&mut rng, cfg, opts.los_probability);
        let downlink = rays_to_channel(&rays, cfg, cfg.f_dl_hz)?.to_f32_precision();
        let uplink = if opts.uplink {
            let up = redraw_with(&rays, &mut rng);
            Some(rays_to_channel(&up, cfg, cfg.f_ul_hz)?.to_f32_precision())
        } else {
            None
        };
        Ok(Sample {
            downlink,
            uplink,
            sensor: None,
            rays,
        })
    });
    Ok(Dataset {
        config: cfg.clone(),
        samples: samples.into_iter().collect::<Result<_, SimError>>()?,
    })
}

pub(crate) fn write_config(w: &mut Writer, c: &SimConfig) {
    for v in [c.n_tx, c.n_rb, c.n_sc] {
        w.u32(v as u32);
    }
    w.f64(c.scs_hz);
    w.f64(c.f_dl_hz);
    w.f64(c.f_ul_hz);
    w.u32(c.fft_size as u32);
    w.f64(c.sample_rate_hz);
    w.u32(c.array_rows as u32);
    w.u32(c.array_cols as u32);
    w.u8(c.dual_polarized as u8);
}

pub(crate) fn read_config(r: &mut Reader) -> Result<SimConfig, WireError> {
    Ok(SimConfig {
        n_tx: r.u32()? as usize,
        n_rb: r.u32()? as usize,
        n_sc: r.u32()? as usize,
        scs_hz: r.f64()?,
        f_dl_hz: r.f64()?,
        f_ul_hz: r.f64()?,
        fft_size: r.u32()? as usize,
        sample_rate_hz: r.f64()?,
        array_rows: r.u32()? as usize,
        array_cols: r.u32()? as usize,
        dual_polarized: r.u8()? != 0,
    })
}

pub(crate) fn write_grid(w: &mut Writer, h: &ChannelMatrix) {
    for c in h.data() {
        w.f32(c.re as f32);
        w.f32(c.im as f32);
    }
}

pub(crate) fn read_grid(r: &mut Reader, n_tx: usize, n_sc: usize) -> Result<ChannelMatrix, SimError> {
    let raw = r.take(n_tx * n_sc * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    ChannelMatrix::new(n_tx, n_sc, data)
}

fn write_rays(w: &mut Writer, rays: &RaySet) {
    w.u8(rays.los as u8);
    let re: Vec<f64> = rays.gains.iter().map(|g| g.re).collect();
    let im: Vec<f64> = rays.gains.iter().map(|g| g.im).collect();
    for a in [
        &re,
        &im,
        &rays.delays,
        &rays.aod_az,
        &rays.aod_el,
        &rays.aoa_az,
        &rays.aoa_el,
        &rays.xpol_phase,
    ] {
        w.f64s(a);
    }
}

fn read_rays(r: &mut Reader) -> Result<RaySet, WireError> {
    let los = r.u8()? != 0;
    let re = r.f64s()?;
    let im = r.f64s()?;
    if re.len() != im.len() {
        return Err(WireError::Malformed("gain arrays differ in length".into()));
    }
    Ok(RaySet {
        gains: re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)).collect(),
        delays: r.f64s()?,
        aod_az: r.f64s()?,
        aod_el: r.f64s()?,
        aoa_az: r.f64s()?,
        aoa_el: r.f64s()?,
        xpol_phase: r.f64s()?,
        los,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC.as_bytes());
    w.u32(VERSION);
    write_config(&mut w, &ds.config);
    w.u64(ds.samples.len() as u64);
    for s in &ds.samples {
        let mut mask = HAS_DOWNLINK;
        if s.uplink.is_some() {
            mask |= HAS_UPLINK;
        }
        if s.sensor.is_some() {
            mask |= HAS_SENSOR;
        }
        w.u8(mask);
        write_grid(&mut w, &s.downlink);
        if let Some(u) = &s.uplink {
            write_grid(&mut w, u);
        }
        if let Some(g) = &s.sensor {
            g.write_to(&mut w);
        }
        write_rays(&mut w, &s.rays);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, SimError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let config = read_config(&mut r)?;
    let count = r.u64()? as usize;
    let (nt, ns) = (config.n_tx, config.n_sc);
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mask = r.u8()?;
        if mask & HAS_DOWNLINK == 0 || mask & !(HAS_DOWNLINK | HAS_UPLINK | HAS_SENSOR) != 0 {
            return Err(WireError::Malformed(format!("modality mask {mask:#04b}")).into());
        }
        let downlink = read_grid(&mut r, nt, ns)?;
        let uplink = if mask & HAS_UPLINK != 0 {
            Some(read_grid(&mut r, nt, ns)?)
        } else {
            None
        };
        let sensor = if mask & HAS_SENSOR != 0 {
            Some(SensorGrid::read_from(&mut r)?)
        } else {
            None
        };
        samples.push(Sample {
            downlink,
            uplink,
            sensor,
            rays: read_rays(&mut r)?,
        });
    }
    r.expect_end()?;
    Ok(Dataset { config, samples })
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), SimError> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, SimError> {
    decode_dataset(&std::fs::read(path)?)
}
