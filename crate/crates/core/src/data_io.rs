//! IDX image/label files and synthetic teacher datasets.
//!
//! IDX layout: a big-endian magic `0x0000TTNN` (`TT = 0x08` for unsigned bytes,
//! `NN` the number of dimensions), `NN` big-endian `u32` sizes, then the payload.
//! Gzip-compressed files are detected by their magic bytes and inflated.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distributions::MeasureSpec;
use crate::error::{Error, IdxError, Result};
use crate::imaging::ImageDataset;
use crate::networks::NetworkParams;
use crate::tols::{load_matrix, save_matrix};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Payload size cap (4 GiB) beyond which dimensions are treated as overflowing.
const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

/// Parses an (already inflated) IDX byte buffer whose magic must equal `expected`.
pub fn parse_idx(bytes: &[u8], expected: u32) -> Result<IdxFile, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: 4,
            found: bytes.len() as u64,
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expected {
        return Err(IdxError::BadMagic { found: magic, expected });
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            expected: header as u64,
            found: bytes.len() as u64,
        });
    }
    let dims: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let len = dims
        .iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(u64::from(*d)))
        .filter(|n| *n <= MAX_PAYLOAD)
        .ok_or(IdxError::DimensionOverflow)?;
    let found = (bytes.len() - header) as u64;
    if found < len {
        return Err(IdxError::Truncated {
            expected: header as u64 + len,
            found: bytes.len() as u64,
        });
    }
    if found > len {
        return Err(IdxError::TrailingData { expected: len, found });
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Reads a file, inflating it if it starts with the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::file(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::file(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Images as an `N × (H·W)` matrix with pixels scaled to `[0, 1]`, plus `(H, W)`.
pub fn load_idx_images(path: &Path) -> Result<(DMatrix<f64>, usize, usize)> {
    let f = parse_idx(&read_maybe_gzip(path)?, IMAGES_MAGIC)?;
    decode_images(&f)
}

fn decode_images(f: &IdxFile) -> Result<(DMatrix<f64>, usize, usize)> {
    let (n, h, w) = (f.dims[0] as usize, f.dims[1] as usize, f.dims[2] as usize);
    let data: Vec<f64> = f.payload.iter().map(|b| f64::from(*b) / 255.0).collect();
    Ok((DMatrix::from_row_slice(n, h * w, &data), h, w))
}

/// Labels, each checked to lie in `0..classes`.
pub fn load_idx_labels(path: &Path, classes: usize) -> Result<Vec<u8>> {
    let f = parse_idx(&read_maybe_gzip(path)?, LABELS_MAGIC)?;
    check_labels(&f.payload, classes)?;
    Ok(f.payload)
}

fn check_labels(labels: &[u8], classes: usize) -> Result<(), IdxError> {
    match labels.iter().enumerate().find(|(_, l)| **l as usize >= classes) {
        Some((index, &label)) => Err(IdxError::LabelOutOfRange { index, label, classes }),
        None => Ok(()),
    }
}

/// Loads and pairs an image file with its label file.
pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize) -> Result<ImageDataset> {
    let (x, h, w) = load_idx_images(images)?;
    let y = load_idx_labels(labels, classes)?;
    if x.nrows() != y.len() {
        return Err(IdxError::PairingMismatch {
            images: x.nrows(),
            labels: y.len(),
        }
        .into());
    }
    ImageDataset::new(x, h, w, y, classes)
}

pub fn encode_idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    let data = if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?
    } else {
        bytes.to_vec()
    };
    fs::write(path, data).map_err(|e| Error::file(path, e))
}

/// Writes raw pixel bytes for `n` images of size `h × w`.
pub fn write_idx_images(path: &Path, n: u32, h: u32, w: u32, pixels: &[u8], gzip: bool) -> Result<()> {
    if pixels.len() as u64 != u64::from(n) * u64::from(h) * u64::from(w) {
        return Err(Error::DimensionMismatch {
            expected: (n * h * w) as usize,
            got: pixels.len(),
        });
    }
    write_bytes(path, &encode_idx(IMAGES_MAGIC, &[n, h, w], pixels), gzip)
}

pub fn write_idx_labels(path: &Path, labels: &[u8], gzip: bool) -> Result<()> {
    write_bytes(path, &encode_idx(LABELS_MAGIC, &[labels.len() as u32], labels), gzip)
}

/// `N` samples from `spec^{⊗d}` labelled by the teacher. Inputs come from
/// stream 1 of `seed`; `random_teacher` draws from stream 0.
pub fn synth_teacher_dataset(
    spec: &MeasureSpec,
    teacher: &NetworkParams,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let xs = spec.sample_matrix_stream(n, teacher.input_dim(), seed, 1);
    let ys = teacher.forward_rows(&xs)?.as_slice().to_vec();
    Ok((xs, ys))
}

/// JSON sidecar describing a synthetic dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub measure: MeasureSpec,
    pub teacher: Option<NetworkParams>,
    pub inputs_file: String,
    pub targets_file: String,
}

/// Writes `<stem>.x.bin`, `<stem>.y.bin` (matrix dumps) and `<stem>.json`.
pub fn save_synthetic(dir: &Path, stem: &str, xs: &DMatrix<f64>, ys: &[f64], meta: &SyntheticMeta) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut meta = meta.clone();
    meta.inputs_file = format!("{stem}.x.bin");
    meta.targets_file = format!("{stem}.y.bin");
    save_matrix(&dir.join(&meta.inputs_file), xs)?;
    save_matrix(
        &dir.join(&meta.targets_file),
        &DMatrix::from_column_slice(ys.len(), 1, ys),
    )?;
    let sidecar = dir.join(format!("{stem}.json"));
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::file(&sidecar, e))?;
    Ok(sidecar)
}

/// Reads a dataset written by [`save_synthetic`] from its sidecar path.
pub fn load_synthetic(sidecar: &Path) -> Result<(DMatrix<f64>, Vec<f64>, SyntheticMeta)> {
    let text = fs::read_to_string(sidecar).map_err(|e| Error::file(sidecar, e))?;
    let meta: SyntheticMeta = serde_json::from_str(&text)?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let xs = load_matrix(&dir.join(&meta.inputs_file))?;
    let ys = load_matrix(&dir.join(&meta.targets_file))?;
    if xs.nrows() != meta.n || xs.ncols() != meta.d || ys.nrows() != meta.n || ys.ncols() != 1 {
        return Err(Error::Format(format!(
            "{} does not match its data files",
            sidecar.display()
        )));
    }
    Ok((xs, ys.as_slice().to_vec(), meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::Activation;
    use crate::networks::{random_teacher, WeightNorm};

    fn fixture(dir: &Path, gzip: bool) -> (PathBuf, PathBuf) {
        let img = dir.join(if gzip { "img.gz" } else { "img" });
        let lab = dir.join(if gzip { "lab.gz" } else { "lab" });
        write_idx_images(&img, 2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 153], gzip).unwrap();
        write_idx_labels(&lab, &[3, 7], gzip).unwrap();
        (img, lab)
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for gzip in [false, true] {
            let (img, lab) = fixture(dir.path(), gzip);
            let (x, h, w) = load_idx_images(&img).unwrap();
            assert_eq!((x.nrows(), h, w), (2, 2, 2));
            assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.2, 0.4]);
            assert_eq!(x.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.6]);
            assert_eq!(load_idx_labels(&lab, 10).unwrap(), vec![3, 7]);
            let ds = load_idx_dataset(&img, &lab, 10).unwrap();
            assert_eq!(ds.labels(), &[3, 7]);
        }
    }

    #[test]
    fn bit_identical_rewrite() {
        let bytes = encode_idx(IMAGES_MAGIC, &[1, 2, 3], &[1, 2, 3, 4, 5, 6]);
        let f = parse_idx(&bytes, IMAGES_MAGIC).unwrap();
        assert_eq!(encode_idx(f.magic, &f.dims, &f.payload), bytes);
    }

    #[test]
    fn malformed_files() {
        let good = encode_idx(IMAGES_MAGIC, &[1, 2, 2], &[1, 2, 3, 4]);
        assert_eq!(
            parse_idx(&good, LABELS_MAGIC),
            Err(IdxError::BadMagic {
                found: IMAGES_MAGIC,
                expected: LABELS_MAGIC
            })
        );
        assert!(matches!(
            parse_idx(&good[..good.len() - 1], IMAGES_MAGIC),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx(&good[..6], IMAGES_MAGIC),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx(&good[..2], IMAGES_MAGIC),
            Err(IdxError::Truncated { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            parse_idx(&long, IMAGES_MAGIC),
            Err(IdxError::TrailingData { .. })
        ));
        let huge = encode_idx(IMAGES_MAGIC, &[u32::MAX, u32::MAX, 2], &[]);
        assert_eq!(parse_idx(&huge, IMAGES_MAGIC), Err(IdxError::DimensionOverflow));
    }

    #[test]
    fn label_checks_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture(dir.path(), false);
        let lab = dir.path().join("bad");
        write_idx_labels(&lab, &[1, 12], false).unwrap();
        assert!(matches!(
            load_idx_labels(&lab, 10),
            Err(Error::Idx(IdxError::LabelOutOfRange {
                index: 1,
                label: 12,
                ..
            }))
        ));
        let three = dir.path().join("three");
        write_idx_labels(&three, &[1, 2, 3], false).unwrap();
        assert!(matches!(
            load_idx_dataset(&img, &three, 10),
            Err(Error::Idx(IdxError::PairingMismatch { images: 2, labels: 3 }))
        ));
        let missing = load_idx_images(&dir.path().join("nope")).unwrap_err();
        assert!(missing.is_io());
    }

    #[test]
    fn synthetic_datasets() {
        let spec = MeasureSpec::standard_uniform();
        let t = random_teacher(4, 2, 5, Activation::Relu, 1, WeightNorm::L1Rows, false).unwrap();
        let (xs, ys) = synth_teacher_dataset(&spec, &t, 500, 2).unwrap();
        assert!(ys.iter().all(|y| y.abs() <= 1.0));
        let (xs2, ys2) = synth_teacher_dataset(&spec, &t, 500, 2).unwrap();
        assert_eq!((xs.clone(), ys.clone()), (xs2, ys2));

        let mut zero = t.clone();
        zero = NetworkParams::new(
            zero.layers().to_vec(),
            nalgebra::DVector::zeros(5),
            zero.activation().clone(),
        )
        .unwrap();
        assert!(synth_teacher_dataset(&spec, &zero, 10, 3)
            .unwrap()
            .1
            .iter()
            .all(|y| *y == 0.0));

        let dir = tempfile::tempdir().unwrap();
        let meta = SyntheticMeta {
            n: 500,
            d: 4,
            seed: 2,
            measure: spec,
            teacher: Some(t),
            inputs_file: String::new(),
            targets_file: String::new(),
        };
        let side = save_synthetic(dir.path(), "train", &xs, &ys, &meta).unwrap();
        let (xl, yl, ml) = load_synthetic(&side).unwrap();
        assert_eq!(xl, xs);
        assert_eq!(yl, ys);
        assert_eq!(ml.inputs_file, "train.x.bin");
    }
}
