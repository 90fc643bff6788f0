use std::path::Path;

use crate::chansim::ChannelMatrix;
use crate::wire::{Reader, WireError, Writer};

const MAGIC: &str = "CSIGRID";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    UplinkCsi,
    ImageGrid,
}

/// Real-valued `C x H x W` sensor observation with its patch size.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGrid {
    pub modality: Modality,
    /// `[C, H, W]`
    pub dims: [usize; 3],
    pub patch: (usize, usize),
    pub data: Vec<f32>,
}

impl SensorGrid {
    pub fn new(modality: Modality, dims: [usize; 3], patch: (usize, usize), data: Vec<f32>) -> Result<Self, WireError> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(WireError::Malformed(format!("{} values for dims {dims:?}", data.len())));
        }
        if patch.0 == 0 || patch.1 == 0 {
            return Err(WireError::Malformed("zero patch size".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(WireError::Malformed("non-finite value".into()));
        }
        Ok(Self {
            modality,
            dims,
            patch,
            data,
        })
    }

    /// Uplink channel as a `2 x N_t x N_s` real/imaginary grid.
    pub fn from_uplink(h: &ChannelMatrix, patch: (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(2 * h.data().len());
        data.extend(h.data().iter().map(|c| c.re as f32));
        data.extend(h.data().iter().map(|c| c.im as f32));
        Self {
            modality: Modality::UplinkCsi,
            dims: [2, h.n_tx(), h.n_sc()],
            patch,
            data,
        }
    }

    pub(crate) fn write_to(&self, w: &mut Writer) {
        w.u8(match self.modality {
            Modality::UplinkCsi => 0,
            Modality::ImageGrid => 1,
        });
        w.u8(DTYPE_F32);
        for d in self.dims {
            w.u32(d as u32);
        }
        w.u32(self.patch.0 as u32);
        w.u32(self.patch.1 as u32);
        for &v in &self.data {
            w.f32(v);
        }
    }

    pub(crate) fn read_from(r: &mut Reader) -> Result<Self, WireError> {
        let modality = match r.u8()? {
            0 => Modality::UplinkCsi,
            1 => Modality::ImageGrid,
            m => return Err(WireError::Malformed(format!("modality tag {m}"))),
        };
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(WireError::Malformed(format!("element type {dtype}")));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let patch = (r.u32()? as usize, r.u32()? as usize);
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(modality, dims, patch, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC.as_bytes());
        w.u32(VERSION);
        self.write_to(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let g = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}
