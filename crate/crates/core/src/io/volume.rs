//! `OVOL` volume container: 4-byte magic, u32 version, four u32 extents
//! `(H, W, D, C)`, a one-byte dtype tag, then the little-endian payload in
//! row-major order with channels innermost.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::grid::{CellGrid, GridShape, LabelGrid};

pub const VOLUME_MAGIC: [u8; 4] = *b"OVOL";
pub const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16 + 1;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    fn tag(&self) -> u8 {
        match self {
            VolumeData::F32(_) => 0,
            VolumeData::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `[H, W, D, C]`
    pub extents: [usize; 4],
    pub data: VolumeData,
}

impl Volume {
    pub fn new(extents: [usize; 4], data: VolumeData) -> Result<Self> {
        if extents.iter().any(|&e| e == 0 || e > u32::MAX as usize) {
            return Err(invalid(format!("volume extents {extents:?} out of range")));
        }
        let n: usize = extents.iter().product();
        if data.len() != n {
            return Err(invalid(format!("{} values for volume extents {extents:?}", data.len())));
        }
        Ok(Self { extents, data })
    }

    /// A 3D image grid; 2D grids are stored with depth 1.
    pub fn from_grid(grid: &CellGrid) -> Result<Self> {
        let [h, w, d] = grid.shape().dims3();
        Self::new([h, w, d, grid.channels()], VolumeData::F32(grid.data().to_vec()))
    }

    pub fn from_labels(labels: &LabelGrid) -> Result<Self> {
        let d = labels.dims();
        let depth = d.get(2).copied().unwrap_or(1);
        Self::new([d[0], d[1], depth, 1], VolumeData::U8(labels.labels().to_vec()))
    }

    /// Image grid with all channels as image channels. Volumes of depth 1
    /// become 2D grids.
    pub fn to_grid(&self) -> Result<CellGrid> {
        let VolumeData::F32(data) = &self.data else {
            return Err(invalid("image volumes must hold f32 data"));
        };
        let [h, w, d, c] = self.extents;
        let dims = if d == 1 { vec![h, w] } else { vec![h, w, d] };
        CellGrid::new(GridShape::new(dims, c)?, data.clone(), c)
    }

    pub fn to_labels(&self) -> Result<LabelGrid> {
        let VolumeData::U8(data) = &self.data else {
            return Err(invalid("mask volumes must hold u8 data"));
        };
        let [h, w, d, c] = self.extents;
        if c != 1 {
            return Err(invalid(format!("mask volumes need one channel, found {c}")));
        }
        let dims = if d == 1 { vec![h, w] } else { vec![h, w, d] };
        LabelGrid::new(dims, data.clone())
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.data.len() * 4);
    out.extend_from_slice(&VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for e in v.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(v.data.tag());
    match &v.data {
        VolumeData::F32(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeData::U8(d) => out.extend_from_slice(d),
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Header(format!("volume file of {} bytes has no complete header", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: VOLUME_MAGIC,
            found: magic,
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(Error::VersionMismatch {
            expected: VOLUME_VERSION,
            found: version,
        });
    }
    let extents = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize];
    let n: usize = extents.iter().product();
    let payload = &bytes[HEADER_LEN..];
    let (elem, data) = match bytes[24] {
        0 => (4, None),
        1 => (1, Some(VolumeData::U8(payload.to_vec()))),
        t => return Err(Error::Header(format!("unknown dtype tag {t}"))),
    };
    let expected = n * elem;
    if payload.len() < expected {
        return Err(Error::TruncatedBlob {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = data.unwrap_or_else(|| {
        VolumeData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )
    });
    Volume::new(extents, data)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_volume(&bytes)
}
