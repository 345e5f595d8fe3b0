//! Binary containers.
//!
//! FDDS (little-endian): magic `FDDS`, u32 version, u32 `N C H W classes
//! groups`, `N·C·H·W` f32 pixels row-major, `N` u16 targets, `N` u16 group
//! labels. The IDX reader accepts the big-endian MNIST convention
//! (`0x00000803` images, `0x00000801` labels).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FDDS_MAGIC: &[u8; 4] = b"FDDS";
pub const FDDS_VERSION: u32 = 1;

pub fn encode_fdds(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let [c, h, w] = ds.image_shape();
    let mut out = Vec::with_capacity(32 + ds.images().numel() * 4 + ds.len() * 4);
    out.write_all(FDDS_MAGIC)?;
    out.write_u32::<LittleEndian>(FDDS_VERSION)?;
    for v in [ds.len(), c, h, w, ds.num_classes(), ds.num_groups()] {
        out.write_u32::<LittleEndian>(to_u32(v, "extent")?)?;
    }
    for &p in ds.images().data() {
        out.write_f32::<LittleEndian>(p as f32)?;
    }
    for labels in [ds.targets(), ds.protected()] {
        for &l in labels {
            let l = u16::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u16")))?;
            out.write_u16::<LittleEndian>(l)?;
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

pub fn decode_fdds(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != FDDS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected FDDS")));
    }
    let mut header = [0u32; 7];
    for v in header.iter_mut() {
        *v = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format("truncated header".into()))?;
    }
    let [version, n, c, h, w, k, a] = header.map(|v| v as usize);
    if version != FDDS_VERSION as usize {
        return Err(Error::Format(format!("unsupported FDDS version {version}")));
    }
    let pixels = n * c * h * w;
    let expected = 32 + pixels * 4 + n * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "FDDS payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut data = vec![0f32; pixels];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let mut targets = vec![0u16; n];
    r.read_u16_into::<LittleEndian>(&mut targets)?;
    let mut protected = vec![0u16; n];
    r.read_u16_into::<LittleEndian>(&mut protected)?;
    let images = Tensor::new(vec![n, c, h, w], data.into_iter().map(f64::from).collect())?;
    LabeledDataset::new(
        images,
        targets.into_iter().map(usize::from).collect(),
        protected.into_iter().map(usize::from).collect(),
        k,
        a,
    )
}

pub fn write_fdds(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    fs::write(path, encode_fdds(ds)?)?;
    Ok(())
}

pub fn read_fdds(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_fdds(&fs::read(path)?)
}

/// Reads an IDX image file as `[N, 1, H, W]` scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(&bytes[..]);
    let magic = r.read_u32::<BigEndian>().map_err(|_| Error::Format("truncated IDX header".into()))?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!("IDX image magic {magic:#010x}, expected 0x00000803")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.read_u32::<BigEndian>().map_err(|_| Error::Format("truncated IDX header".into()))? as usize;
    }
    let [n, h, w] = dims;
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Format(format!("IDX body has {} bytes, expected {}", body.len(), n * h * w)));
    }
    Ok(Tensor::new(vec![n, 1, h, w], body.iter().map(|&b| f64::from(b) / 255.0).collect())?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(&bytes[..]);
    let magic = r.read_u32::<BigEndian>().map_err(|_| Error::Format("truncated IDX header".into()))?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!("IDX label magic {magic:#010x}, expected 0x00000801")));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| Error::Format("truncated IDX header".into()))? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("IDX label body has {} bytes, expected {n}", body.len())));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// An IDX image/label pair as a single-group dataset.
pub fn read_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = read_idx_images(images)?;
    let targets = read_idx_labels(labels)?;
    let k = targets.iter().max().map_or(1, |m| m + 1);
    let n = targets.len();
    LabeledDataset::new(images, targets, vec![0; n], k, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledDataset {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| f64::from(i) / 32.0).collect();
        LabeledDataset::new(Tensor::new(vec![2, 3, 2, 2], data).unwrap(), vec![1, 0], vec![2, 0], 2, 3).unwrap()
    }

    #[test]
    fn fdds_round_trip() {
        let ds = sample();
        let bytes = encode_fdds(&ds).unwrap();
        assert_eq!(&bytes[..4], b"FDDS");
        assert_eq!(bytes.len(), 32 + 24 * 4 + 2 * 4);
        // dyadic pixels survive the f32 container exactly
        assert_eq!(decode_fdds(&bytes).unwrap(), ds);
        assert_eq!(encode_fdds(&decode_fdds(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn fdds_rejects_damage() {
        let mut bytes = encode_fdds(&sample()).unwrap();
        assert!(decode_fdds(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_fdds(&bytes).is_err());
    }

    #[test]
    fn idx_reader() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend([0, 255, 51, 102, 255, 0, 0, 0]);
        fs::write(&img, b).unwrap();
        fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let ds = read_idx_dataset(&img, &lab).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images().data()[1], 1.0);
        assert_eq!(ds.images().data()[2], 0.2);
        assert_eq!(ds.targets(), &[1, 0]);
        assert_eq!(ds.num_classes(), 2);
        fs::write(&lab, [0, 0, 8, 3, 0, 0, 0, 0]).unwrap();
        assert!(read_idx_labels(&lab).is_err());
    }
}
