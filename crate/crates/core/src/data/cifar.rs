use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const CLASSES: usize = 10;

pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Parses raw records (label byte + 3x32x32 pixel bytes) into `[0, 1]`
/// channel-first images, keeping at most `subset` of them.
pub fn read_cifar10_records(bytes: &[u8], subset: Option<usize>) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let offset = (bytes.len() / CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES;
        return Err(Error::Format {
            offset: offset as u64,
            detail: format!(
                "short record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() - offset
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let count = subset.map_or(count, |n| n.min(count));
    let mut images = Vec::with_capacity(count * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(count);
    for (i, record) in bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .take(count)
        .enumerate()
    {
        let label = record[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD_BYTES) as u64,
                detail: format!("label {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: SIDE,
        width: SIDE,
        classes: CLASSES,
    })
}

fn read_file(path: &Path, subset: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_cifar10_records(&bytes, subset).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut out = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        channels: 3,
        height: SIDE,
        width: SIDE,
        classes: CLASSES,
    };
    for p in parts {
        out.images.extend(p.images);
        out.labels.extend(p.labels);
    }
    out
}

/// Loads `data_batch_*.bin` as the training split and `test_batch.bin` as the
/// test split from a directory in the standard binary layout. Pixels are
/// scaled to `[0, 1]`; normalization is left to the caller.
pub fn load_cifar10_binary(dir: &Path, subset: Option<usize>) -> Result<Split> {
    let mut train_files = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            train_files.push(p);
        }
    }
    let test_file = dir.join("test_batch.bin");
    if train_files.is_empty() {
        return Err(Error::io(
            dir.join("data_batch_1.bin"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no training batches found"),
        ));
    }
    let train = train_files
        .iter()
        .map(|p| read_file(p, subset))
        .collect::<Result<Vec<_>>>()?;
    let test = read_file(&test_file, subset)?;
    Ok(Split {
        train: concat(train),
        test,
    })
}
