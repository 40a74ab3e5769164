//! CIFAR-10 binary format: records of one label byte followed by 3,072
//! pixel bytes, stored as three 32x32 planes (red, green, blue).

use std::fs;
use std::path::{Path, PathBuf};

use evonet_core::data::Dataset;

use crate::error::{format_err, IoContext, Result};

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE * 3;
pub const RECORD: usize = PIXELS + 1;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";
pub const ENV_DIR: &str = "CIFAR10_DIR";

/// Decodes whole records into interleaved `H x W x C` pixels and labels.
pub fn decode_records(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % RECORD != 0 {
        return Err(format_err(format!("{} bytes is not a whole number of {RECORD}-byte records", bytes.len())));
    }
    let n = bytes.len() / RECORD;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(format_err(format!("record {i}: label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..SIDE * SIDE {
            pixels.extend([planes[p], planes[SIDE * SIDE + p], planes[2 * SIDE * SIDE + p]]);
        }
    }
    Ok((pixels, labels))
}

/// Inverse of [`decode_records`] for a 32x32x3 dataset.
pub fn encode_records(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.shape() != [SIDE, SIDE, 3] {
        return Err(format_err("only 32x32x3 datasets can be written as CIFAR records"));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels()[i]);
        let img = ds.image_bytes(i);
        for c in 0..3 {
            out.extend((0..SIDE * SIDE).map(|p| img[p * 3 + c]));
        }
    }
    Ok(out)
}

fn load_files(dir: &Path, names: &[&str]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.join(name);
        let (p, l) = decode_records(&fs::read(&path).at(&path)?).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok(Dataset::new([SIDE, SIDE, 3], pixels, labels, CLASSES)?)
}

/// Training and test sets from a directory holding the six batch files.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_files(dir, &TRAIN_FILES)?, load_files(dir, &[TEST_FILE])?))
}

/// The directory named by `CIFAR10_DIR`, if set.
pub fn dir_from_env() -> Option<PathBuf> {
    std::env::var_os(ENV_DIR).map(PathBuf::from)
}
