//! Binary volume and mask files.
//!
//! All three share one little-endian header:
//!
//! ```text
//! magic[4]  u32 version  u32 nx ny nz  f32 sx sy sz  u32 base_index
//! u32 crop[6] (min xyz, max xyz; all 0xFFFFFFFF when absent)
//! ```
//!
//! followed by x-fastest voxels: `CVOL` f32 intensities, `CMSK` one byte per
//! voxel in {0, 1}, `CPRB` f32 probabilities.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, CropBox, Grid3, ProbabilityMask, Volume};

pub const VOLUME_MAGIC: &[u8; 4] = b"CVOL";
pub const MASK_MAGIC: &[u8; 4] = b"CMSK";
pub const PROBABILITY_MAGIC: &[u8; 4] = b"CPRB";
pub const FILE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 12 + 4 + 24;
const NO_CROP: u32 = u32::MAX;

/// Geometry metadata carried alongside masks so they can be paired with
/// their volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub base_index: usize,
    pub crop_box: Option<CropBox>,
}

impl Header {
    pub fn of(volume: &Volume) -> Self {
        Self {
            dims: volume.dims(),
            spacing: volume.spacing,
            base_index: volume.base_index,
            crop_box: volume.crop_box,
        }
    }

    fn encode(&self, magic: &[u8; 4], out: &mut Vec<u8>) -> Result<()> {
        out.extend_from_slice(magic);
        out.extend_from_slice(&FILE_VERSION.to_le_bytes());
        let mut ints = Vec::with_capacity(10);
        ints.extend(self.dims);
        for v in self.spacing {
            ints.push(v.to_bits() as usize);
        }
        ints.push(self.base_index);
        match self.crop_box {
            Some(b) => ints.extend(b.min.into_iter().chain(b.max)),
            None => ints.extend([NO_CROP as usize; 6]),
        }
        for v in ints {
            let v = u32::try_from(v)
                .map_err(|_| Error::InvalidArgument(format!("header field {v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("file is shorter than its header".into()));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FILE_VERSION {
            return Err(Error::Format(format!(
                "file version {version} is not supported (expected {FILE_VERSION})"
            )));
        }
        let dims = [word(1), word(2), word(3)].map(|v| v as usize);
        let spacing = [word(4), word(5), word(6)].map(f32::from_bits);
        let base_index = word(7) as usize;
        let crop: Vec<u32> = (8..14).map(word).collect();
        let crop_box = if crop.iter().all(|&v| v == NO_CROP) {
            None
        } else {
            let c: Vec<usize> = crop.into_iter().map(|v| v as usize).collect();
            Some(CropBox {
                min: [c[0], c[1], c[2]],
                max: [c[3], c[4], c[5]],
            })
        };
        Ok(Self {
            dims,
            spacing,
            base_index,
            crop_box,
        })
    }

    fn payload<'a>(&self, bytes: &'a [u8], width: usize) -> Result<&'a [u8]> {
        let expected = self
            .dims
            .iter()
            .try_fold(width, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload holds {} bytes, dimensions {:?} need {expected}",
                payload.len(),
                self.dims
            )));
        }
        Ok(payload)
    }
}

fn f32s(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn encode_f32s(magic: &[u8; 4], header: &Header, values: &[f32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    header.encode(magic, &mut out)?;
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    encode_f32s(VOLUME_MAGIC, &Header::of(volume), volume.grid.data())
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let h = Header::decode(VOLUME_MAGIC, bytes)?;
    let data = f32s(h.payload(bytes, 4)?);
    Volume::new(
        Grid3::new(h.dims, data)?,
        h.spacing,
        h.base_index,
        h.crop_box,
    )
}

pub fn encode_mask(mask: &BinaryMask, header: &Header) -> Result<Vec<u8>> {
    check_dims(mask.dims(), header)?;
    if !mask.is_binary() {
        return Err(Error::InvalidArgument(
            "binary mask holds values other than 0/1".into(),
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + mask.data().len());
    header.encode(MASK_MAGIC, &mut out)?;
    out.extend_from_slice(mask.data());
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<(BinaryMask, Header)> {
    let h = Header::decode(MASK_MAGIC, bytes)?;
    let mask = BinaryMask::new(h.dims, h.payload(bytes, 1)?.to_vec())?;
    if !mask.is_binary() {
        return Err(Error::Format(
            "mask payload holds values other than 0/1".into(),
        ));
    }
    Ok((mask, h))
}

pub fn encode_probability(prob: &ProbabilityMask, header: &Header) -> Result<Vec<u8>> {
    check_dims(prob.dims(), header)?;
    encode_f32s(PROBABILITY_MAGIC, header, prob.data())
}

pub fn decode_probability(bytes: &[u8]) -> Result<(ProbabilityMask, Header)> {
    let h = Header::decode(PROBABILITY_MAGIC, bytes)?;
    Ok((ProbabilityMask::new(h.dims, f32s(h.payload(bytes, 4)?))?, h))
}

fn check_dims(dims: [usize; 3], header: &Header) -> Result<()> {
    if dims != header.dims {
        return Err(Error::Shape(format!(
            "grid {dims:?} does not match header {:?}",
            header.dims
        )));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read(path)?)
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    write(path, encode_volume(volume)?)
}

pub fn read_mask(path: &Path) -> Result<(BinaryMask, Header)> {
    decode_mask(&read(path)?)
}

pub fn write_mask(mask: &BinaryMask, header: &Header, path: &Path) -> Result<()> {
    write(path, encode_mask(mask, header)?)
}

pub fn read_probability(path: &Path) -> Result<(ProbabilityMask, Header)> {
    decode_probability(&read(path)?)
}

pub fn write_probability(prob: &ProbabilityMask, header: &Header, path: &Path) -> Result<()> {
    write(path, encode_probability(prob, header)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume(crop: Option<CropBox>) -> Volume {
        let grid = Grid3::new([3, 4, 5], (0..60).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap();
        Volume::new(grid, [1.25, 0.7, 2.5], 3, crop).unwrap()
    }

    #[test]
    fn volume_round_trip() {
        for crop in [
            None,
            Some(CropBox {
                min: [0, 1, 2],
                max: [3, 4, 5],
            }),
        ] {
            let v = sample_volume(crop);
            let bytes = encode_volume(&v).unwrap();
            assert_eq!(bytes.len(), HEADER_LEN + 60 * 4);
            assert_eq!(decode_volume(&bytes).unwrap(), v);
        }
    }

    #[test]
    fn masks_round_trip() {
        let v = sample_volume(None);
        let h = Header::of(&v);
        let mask = v.grid.map(|x| (x > 0.0) as u8);
        let (m, h2) = decode_mask(&encode_mask(&mask, &h).unwrap()).unwrap();
        assert_eq!((m, h2), (mask, h));
        let prob = v.grid.map(|x| (x / 30.0).clamp(0.0, 1.0));
        let (p, _) = decode_probability(&encode_probability(&prob, &h).unwrap()).unwrap();
        assert_eq!(p, prob);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let v = sample_volume(None);
        let bytes = encode_volume(&v).unwrap();
        assert!(decode_volume(&bytes[..10]).is_err());
        assert!(decode_volume(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(MASK_MAGIC);
        assert!(decode_volume(&wrong).is_err());
        let mut version = bytes;
        version[4] = 7;
        assert!(decode_volume(&version)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let h = Header::of(&v);
        let mut mask = encode_mask(&v.grid.map(|_| 1u8), &h).unwrap();
        *mask.last_mut().unwrap() = 2;
        assert!(decode_mask(&mask).is_err());
        let bad = v.grid.map(|_| 3u8);
        assert!(encode_mask(&bad, &h).is_err());
    }
}
