//! `DMX1` dataset files.
//!
//! ```text
//! "DMX1" | u32 version = 1 | u32 count | u32 H | u32 W | u32 num_classes
//! count × ( u64 sample_id | u8 domain_tag | H·W·3 × u8 rgb | H·W × u8 labels )
//! ```
//! All integers little-endian.

use std::path::Path;

use super::{Domain, ImageSample};
use crate::codec::Reader;
use crate::error::{Error, FormatError, Result};
use crate::ops::IGNORE_LABEL;

const MAGIC: [u8; 4] = *b"DMX1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

pub fn encode_dataset(samples: &[ImageSample], num_classes: usize) -> Result<Vec<u8>> {
    let (h, w) = samples.first().map_or((0, 0), |s| (s.height, s.width));
    let per_sample = 9 + h * w * 4;
    let mut out = Vec::with_capacity(24 + samples.len() * per_sample);
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, samples.len() as u32, h as u32, w as u32, num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        if s.height != h || s.width != w || s.rgb.len() != h * w * 3 || s.labels.len() != h * w {
            return Err(Error::Shape(format!(
                "sample {} is {}×{}, file is {h}×{w}",
                s.sample_id, s.height, s.width
            )));
        }
        out.extend_from_slice(&s.sample_id.to_le_bytes());
        out.push(s.domain.tag());
        out.extend_from_slice(&s.rgb);
        out.extend_from_slice(&s.labels);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<ImageSample>), FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let header = DatasetHeader {
        count,
        height,
        width,
        num_classes,
    };

    let pixels = height
        .checked_mul(width)
        .filter(|p| p.checked_mul(4).is_some())
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{height}×{width}")))?;
    let per_sample = pixels * 4 + 9;
    let payload = count
        .checked_mul(per_sample)
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{count} samples of {per_sample} bytes")))?;
    if payload > r.remaining() {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: payload - r.remaining(),
        });
    }

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let sample_id = r.u64()?;
        let tag = r.u8()?;
        let domain =
            Domain::from_tag(tag).ok_or_else(|| FormatError::InvalidField(format!("domain tag {tag}")))?;
        let rgb = r.take(pixels * 3)?.to_vec();
        let labels = r.take(pixels)?.to_vec();
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(FormatError::InvalidField(format!(
                "sample {sample_id}: label {bad} with {num_classes} classes"
            )));
        }
        samples.push(ImageSample {
            sample_id,
            domain,
            height,
            width,
            rgb,
            labels,
        });
    }
    r.finish()?;
    Ok((header, samples))
}

pub fn write_dataset(samples: &[ImageSample], num_classes: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(samples, num_classes)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<ImageSample>)> {
    let bytes = std::fs::read(path)?;
    Ok(decode_dataset(&bytes)?)
}
