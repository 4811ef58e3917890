//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by a
//! 32×32 image stored as three planes (R, G, B).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::colorsim::ImageU8;
use crate::data::LabeledDataset;

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const RECORD_LEN: usize = 1 + 3 * PLANE;
pub const NUM_CLASSES: u8 = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Error)]
pub enum CifarError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: truncated record at byte offset {offset} ({len} bytes is not a multiple of {RECORD_LEN})")]
    Truncated {
        path: PathBuf,
        offset: usize,
        len: usize,
    },
    #[error("{path}: label {label} at byte offset {offset} is not in 0..{NUM_CLASSES}")]
    BadLabel {
        path: PathBuf,
        offset: usize,
        label: u8,
    },
    #[error("{path}: file holds no records")]
    Empty { path: PathBuf },
}

/// Decodes raw batch bytes; `path` is used only for diagnostics.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(u8, ImageU8)>, CifarError> {
    if bytes.is_empty() {
        return Err(CifarError::Empty { path: path.into() });
    }
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(CifarError::Truncated {
            path: path.into(),
            offset: bytes.len() / RECORD_LEN * RECORD_LEN,
            len: bytes.len(),
        });
    }
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label >= NUM_CLASSES {
                return Err(CifarError::BadLabel {
                    path: path.into(),
                    offset: i * RECORD_LEN,
                    label,
                });
            }
            let planes = &rec[1..];
            let pixels = (0..PLANE)
                .flat_map(|p| [planes[p], planes[PLANE + p], planes[2 * PLANE + p]])
                .collect();
            Ok((
                label,
                ImageU8::new(SIDE, SIDE, pixels).expect("fixed record geometry"),
            ))
        })
        .collect()
}

pub fn encode(records: &[(u8, ImageU8)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_LEN);
    for (label, img) in records {
        assert_eq!(
            (img.height(), img.width()),
            (SIDE, SIDE),
            "CIFAR records are 32x32"
        );
        out.push(*label);
        for c in 0..3 {
            out.extend(img.pixels().iter().skip(c).step_by(3));
        }
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>, CifarError> {
    fs::read(path).map_err(|source| CifarError::Io {
        path: path.into(),
        source,
    })
}

/// Reads batch files in order; IDs follow file order starting at 1.
pub fn ingest(paths: &[PathBuf]) -> Result<LabeledDataset, CifarError> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(decode(&read(p)?, p)?);
    }
    Ok(LabeledDataset::from_records(records))
}

/// The held-out pool: `test_batch.bin` under `dir`.
pub fn ingest_test(dir: &Path) -> Result<LabeledDataset, CifarError> {
    ingest(&[dir.join(TEST_FILE)])
}

/// The pre-training set: the five `data_batch_*.bin` files under `dir`.
pub fn ingest_train(dir: &Path) -> Result<LabeledDataset, CifarError> {
    ingest(&TRAIN_FILES.map(|f| dir.join(f)))
}

/// Writes records in batch format, splitting the training portion across
/// the five standard file names.
pub fn write_dir(
    dir: &Path,
    train: &[(u8, ImageU8)],
    test: &[(u8, ImageU8)],
) -> Result<(), CifarError> {
    fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CifarError + '_ {
        move |source| CifarError::Io {
            path: path.into(),
            source,
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let per_file = train.len().div_ceil(TRAIN_FILES.len()).max(1);
    let mut chunks = train.chunks(per_file);
    for name in TRAIN_FILES {
        let path = dir.join(name);
        fs::write(&path, encode(chunks.next().unwrap_or(&[]))).map_err(io_err(&path))?;
    }
    let path = dir.join(TEST_FILE);
    fs::write(&path, encode(test)).map_err(io_err(&path))?;
    Ok(())
}
