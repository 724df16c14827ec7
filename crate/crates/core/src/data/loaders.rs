use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::tensor::Tensor;

use super::dataset::{Dataset, Normalization, Split};

/// One label byte followed by a 3×32×32 image, channel-major.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        GzDecoder::new(file).read_to_end(&mut buf)
    } else {
        let mut f = file;
        f.read_to_end(&mut buf)
    }
    .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Loads a CIFAR binary batch file. Without `normalization` the statistics
/// are computed from this file, which is what a training split wants.
pub fn load_cifar_binary(
    path: impl AsRef<Path>,
    num_classes: usize,
    normalization: Option<&Normalization>,
    split: Split,
) -> Result<Dataset> {
    load_cifar_files(&[path.as_ref()], num_classes, normalization, split)
}

/// Concatenates several CIFAR batch files, in the order given.
pub fn load_cifar_files(
    paths: &[&Path],
    num_classes: usize,
    normalization: Option<&Normalization>,
    split: Split,
) -> Result<Dataset> {
    let plane = 32 * 32;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for &path in paths {
        let bytes = read_all(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::format(
                path,
                format!(
                    "length {} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record size",
                    bytes.len()
                ),
            ));
        }
        pixels.reserve(bytes.len() / CIFAR_RECORD_BYTES * 3 * plane);
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = rec[0] as usize;
            if label >= num_classes {
                return Err(Error::format(
                    path,
                    format!("record {i}: label {label} out of range for {num_classes} classes"),
                ));
            }
            labels.push(label);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    if labels.is_empty() {
        return Err(Error::invalid("load_cifar", "no files given"));
    }
    finish(pixels, labels, (3, 32, 32), num_classes, normalization, split)
}

/// CIFAR-10 binary directory: `data_batch_1.bin`..`data_batch_5.bin` for
/// training (whichever exist, at least the first), `test_batch.bin` for
/// testing.
pub fn load_cifar_dir(dir: impl AsRef<Path>, split: Split, normalization: Option<&Normalization>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let paths: Vec<PathBuf> = match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        Split::Train | Split::Calibration => {
            let mut v: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if v.is_empty() {
                v.push(dir.join("data_batch_1.bin"));
            }
            v
        }
    };
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    load_cifar_files(&refs, 10, normalization, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Mnist,
    Cifar,
}

impl DatasetFormat {
    /// Guesses the format from the files present in `dir`.
    pub fn detect(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let has = |name: &str| dir.join(name).exists() || dir.join(format!("{name}.gz")).exists();
        if has("train-images-idx3-ubyte") || has("t10k-images-idx3-ubyte") {
            Ok(DatasetFormat::Mnist)
        } else if has("data_batch_1.bin") || has("test_batch.bin") {
            Ok(DatasetFormat::Cifar)
        } else {
            Err(Error::format(dir, "no MNIST IDX or CIFAR binary files found"))
        }
    }

    pub fn input_shape(self) -> InputShape {
        match self {
            DatasetFormat::Mnist => InputShape::MNIST,
            DatasetFormat::Cifar => InputShape::CIFAR,
        }
    }

    pub fn load(self, dir: impl AsRef<Path>, split: Split, normalization: Option<&Normalization>) -> Result<Dataset> {
        match self {
            DatasetFormat::Mnist => load_mnist_dir(dir, split, normalization),
            DatasetFormat::Cifar => load_cifar_dir(dir, split, normalization),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Loads an IDX image file (magic 0x803) and label file (magic 0x801);
/// either may be gzip-compressed (`.gz`).
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
    normalization: Option<&Normalization>,
    split: Split,
) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ib = read_all(ipath)?;
    let lb = read_all(lpath)?;
    if ib.len() < 16 || be_u32(&ib, 0) != 0x0803 {
        return Err(Error::format(ipath, "not an IDX image file (magic 0x00000803)"));
    }
    if lb.len() < 8 || be_u32(&lb, 0) != 0x0801 {
        return Err(Error::format(lpath, "not an IDX label file (magic 0x00000801)"));
    }
    let n = be_u32(&ib, 4) as usize;
    let (h, w) = (be_u32(&ib, 8) as usize, be_u32(&ib, 12) as usize);
    if ib.len() != 16 + n * h * w {
        return Err(Error::format(
            ipath,
            format!("expected {} bytes for {n} images of {h}x{w}, found {}", 16 + n * h * w, ib.len()),
        ));
    }
    let nl = be_u32(&lb, 4) as usize;
    if nl != n || lb.len() != 8 + n {
        return Err(Error::format(
            lpath,
            format!("expected {n} labels ({} bytes), header says {nl}, found {} bytes", 8 + n, lb.len()),
        ));
    }
    let labels: Vec<usize> = lb[8..].iter().map(|&b| b as usize).collect();
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::format(
            lpath,
            format!("record {i}: label {l} out of range for {num_classes} classes"),
        ));
    }
    finish(ib[16..].to_vec(), labels, (1, h, w), num_classes, normalization, split)
}

/// Loads `train-*` or `t10k-*` IDX files from an MNIST directory, preferring
/// uncompressed files when both exist.
pub fn load_mnist_dir(
    dir: impl AsRef<Path>,
    split: Split,
    normalization: Option<&Normalization>,
) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Test => "t10k",
        Split::Train | Split::Calibration => "train",
    };
    let pick = |stem: String| {
        let plain = dir.join(&stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    load_idx(
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
        10,
        normalization,
        split,
    )
}

fn finish(
    pixels: Vec<u8>,
    labels: Vec<usize>,
    (c, h, w): (usize, usize, usize),
    num_classes: usize,
    normalization: Option<&Normalization>,
    split: Split,
) -> Result<Dataset> {
    let n = labels.len();
    let norm = match normalization {
        Some(n) => n.clone(),
        None => Normalization::from_bytes(&pixels, c, h * w),
    };
    let data = norm.apply(&pixels, c, h * w)?;
    let images = Tensor::new(vec![n, c, h, w], data)?;
    Dataset::new(images, labels, num_classes, split, norm)
}
