//! CIFAR-10 / CIFAR-100 binary archive loaders.
//!
//! CIFAR-10 records: 1 label byte + 3072 pixel bytes (channel-major RGB).
//! CIFAR-100 records: coarse label byte + fine label byte + 3072 pixel bytes.

use super::{DatasetManifest, DatasetName, RawSet};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const PIXELS: usize = 3 * 32 * 32;

fn file_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::DatasetFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_records(path: &Path, label_bytes: usize, out: &mut RawSet) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e.to_string()))?;
    let rec = label_bytes + PIXELS;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(file_err(
            path,
            format!("file size {} is not a multiple of record size {rec}", bytes.len()),
        ));
    }
    for chunk in bytes.chunks_exact(rec) {
        // fine label is the last label byte in both formats
        out.labels.push(chunk[label_bytes - 1] as usize);
        out.pixels.extend_from_slice(&chunk[label_bytes..]);
    }
    Ok(())
}

fn empty_set() -> RawSet {
    RawSet {
        pixels: Vec::new(),
        labels: Vec::new(),
        shape: (3, 32, 32),
    }
}

pub(super) fn load10(root: &Path) -> Result<(RawSet, RawSet, DatasetManifest)> {
    let mut train = empty_set();
    for i in 1..=5 {
        read_records(&root.join(format!("data_batch_{i}.bin")), 1, &mut train)?;
    }
    let mut test = empty_set();
    read_records(&root.join("test_batch.bin"), 1, &mut test)?;
    let manifest = DatasetManifest {
        name: DatasetName::Cifar10,
        input_shape: (3, 32, 32),
        num_classes: 10,
        train_size: train.labels.len(),
        test_size: test.labels.len(),
    };
    Ok((train, test, manifest))
}

pub(super) fn load100(root: &Path) -> Result<(RawSet, RawSet, DatasetManifest)> {
    let mut train = empty_set();
    read_records(&root.join("train.bin"), 2, &mut train)?;
    let mut test = empty_set();
    read_records(&root.join("test.bin"), 2, &mut test)?;
    let manifest = DatasetManifest {
        name: DatasetName::Cifar100,
        input_shape: (3, 32, 32),
        num_classes: 100,
        train_size: train.labels.len(),
        test_size: test.labels.len(),
    };
    Ok((train, test, manifest))
}
