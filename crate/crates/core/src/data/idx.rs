//! IDX (MNIST-style) files: big-endian magic and dimensions, then raw bytes.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    what: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::UnexpectedEof(self.what.clone()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut r = Reader {
        what: path.display().to_string(),
        bytes,
        pos: 0,
    };
    let found = r.u32()?;
    if found != magic {
        return Err(Error::Idx(format!(
            "{}: magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let payload = r.take(count)?.to_vec();
    Ok((dims, payload))
}

/// Load an images/labels IDX pair as a single-channel dataset.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    classes: usize,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let (idims, pixels) = parse(ip, &ib, IMAGES_MAGIC)?;
    let (ldims, labels) = parse(lp, &lb, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let name = ip
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        name,
        [idims[0], idims[1], idims[2], 1],
        pixels,
        labels.into_iter().map(u32::from).collect(),
        classes,
    )
}

/// Write `[n,h,w]` bytes as an IDX images file.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    n: usize,
    h: usize,
    w: usize,
    pixels: &[u8],
) -> Result<()> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend(IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}
