//! MNIST IDX archive loader (`train-images-idx3-ubyte` and friends).

use super::{DatasetManifest, DatasetName, RawSet};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn file_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::DatasetFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| file_err(path, e.to_string()))?;
    Ok(u32::from_be_bytes(b))
}

fn read_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| file_err(path, e.to_string()))?);
    let magic = read_u32(&mut r, path)?;
    if magic != IMAGE_MAGIC {
        return Err(file_err(path, format!("bad magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    r.read_exact(&mut pixels)
        .map_err(|e| file_err(path, format!("truncated image data: {e}")))?;
    Ok((pixels, n, h, w))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| file_err(path, e.to_string()))?);
    let magic = read_u32(&mut r, path)?;
    if magic != LABEL_MAGIC {
        return Err(file_err(path, format!("bad magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = read_u32(&mut r, path)? as usize;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)
        .map_err(|e| file_err(path, format!("truncated label data: {e}")))?;
    Ok(labels.into_iter().map(|v| v as usize).collect())
}

fn read_split(root: &Path, images: &str, labels: &str) -> Result<RawSet> {
    let (pixels, n, h, w) = read_images(&root.join(images))?;
    let labels = read_labels(&root.join(labels))?;
    if labels.len() != n {
        return Err(file_err(
            &root.join(labels.len().to_string()),
            format!("label count {} does not match image count {n}", labels.len()),
        ));
    }
    Ok(RawSet {
        pixels,
        labels,
        shape: (1, h, w),
    })
}

pub(super) fn load(root: &Path) -> Result<(RawSet, RawSet, DatasetManifest)> {
    let train = read_split(root, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = read_split(root, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let manifest = DatasetManifest {
        name: DatasetName::Mnist,
        input_shape: train.shape,
        num_classes: 10,
        train_size: train.labels.len(),
        test_size: test.labels.len(),
    };
    Ok((train, test, manifest))
}
