//! MNIST IDX loading and client partitioning.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{ClientDataset, PixelScaling, IMAGE_PIXELS, NUM_CLASSES};
use crate::rng::SimRng;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Standard MNIST file names inside a directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    Iid,
    /// Client `m` holds only samples of digit `m`.
    SingleLabel,
}

impl PartitionMode {
    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::Iid => "iid",
            PartitionMode::SingleLabel => "single-label",
        }
    }
}

impl std::str::FromStr for PartitionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            "single-label" | "single_label" => Ok(PartitionMode::SingleLabel),
            other => Err(format!("expected one of iid, single-label; got `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train_clients: Vec<ClientDataset>,
    pub test: ClientDataset,
    pub partition_mode: PartitionMode,
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_len(path: &Path, bytes: &[u8], needed: usize) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, Vec<u8>)> {
    check_len(path, bytes, 4)?;
    let magic = read_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    check_len(path, bytes, 16)?;
    let n = read_u32(bytes, 4) as usize;
    let (rows, cols) = (read_u32(bytes, 8) as usize, read_u32(bytes, 12) as usize);
    if rows * cols != IMAGE_PIXELS {
        return Err(Error::IdxFormat {
            path: path.to_path_buf(),
            reason: format!("images are {rows}x{cols}, expected 28x28"),
        });
    }
    let needed = 16 + n * IMAGE_PIXELS;
    check_len(path, bytes, needed)?;
    Ok((n, bytes[16..needed].to_vec()))
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    check_len(path, bytes, 4)?;
    let magic = read_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    check_len(path, bytes, 8)?;
    let n = read_u32(bytes, 4) as usize;
    check_len(path, bytes, 8 + n)?;
    Ok(bytes[8..8 + n].to_vec())
}

/// Parses a big-endian IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path, scaling: PixelScaling) -> Result<ClientDataset> {
    let (n, pixels) = parse_images(images_path, &read_file(images_path)?)?;
    let labels = parse_labels(labels_path, &read_file(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    ClientDataset::new(pixels, labels, scaling)
}

/// IDX encoding of raw images (`n * 784` bytes, 28x28 each).
pub fn encode_idx_images(pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / IMAGE_PIXELS;
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGE_MAGIC, n as u32, 28, 28] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&pixels[..n * IMAGE_PIXELS]);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Paths of the four MNIST files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join(TRAIN_IMAGES),
            train_labels: dir.join(TRAIN_LABELS),
            test_images: dir.join(TEST_IMAGES),
            test_labels: dir.join(TEST_LABELS),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
    }
}

fn capped(len: usize, cap: Option<usize>) -> usize {
    cap.map_or(len, |c| len.min(c))
}

/// Global shuffle, then `M` contiguous equal chunks. Samples beyond
/// `M * floor(n / M)` are dropped, as is anything past `cap` per client.
pub fn partition_iid(
    data: &ClientDataset,
    clients: usize,
    cap: Option<usize>,
    rng: &mut SimRng,
) -> Result<Vec<ClientDataset>> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be >= 1"));
    }
    if data.len() < clients {
        return Err(Error::invalid(
            "clients",
            format!("{clients} clients but only {} samples", data.len()),
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let chunk = data.len() / clients;
    let take = capped(chunk, cap);
    Ok(order
        .chunks_exact(chunk)
        .take(clients)
        .map(|c| data.subset(&c[..take]))
        .collect())
}

/// Client `m` gets samples of digit `m` only. Each class is shuffled and
/// truncated to the smallest class size (and `cap`) so all clients are equal.
pub fn partition_single_label(
    data: &ClientDataset,
    clients: usize,
    cap: Option<usize>,
    rng: &mut SimRng,
) -> Result<Vec<ClientDataset>> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be >= 1"));
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in data.labels().iter().enumerate() {
        by_label[usize::from(l)].push(i);
    }
    let present = by_label.iter().filter(|v| !v.is_empty()).count();
    if clients > present {
        return Err(Error::invalid(
            "clients",
            format!("single-label partition needs one label per client; {clients} clients, {present} labels present"),
        ));
    }
    let classes: Vec<&mut Vec<usize>> = by_label.iter_mut().filter(|v| !v.is_empty()).take(clients).collect();
    let min = classes.iter().map(|v| v.len()).min().unwrap_or(0);
    let take = capped(min, cap);
    Ok(classes
        .into_iter()
        .map(|idx| {
            idx.shuffle(rng);
            idx.truncate(take);
            data.subset(idx)
        })
        .collect())
}

pub fn partition(
    data: &ClientDataset,
    mode: PartitionMode,
    clients: usize,
    cap: Option<usize>,
    rng: &mut SimRng,
) -> Result<Vec<ClientDataset>> {
    match mode {
        PartitionMode::Iid => partition_iid(data, clients, cap, rng),
        PartitionMode::SingleLabel => partition_single_label(data, clients, cap, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn synthetic(n: usize, seed: u64) -> ClientDataset {
        let mut rng = SimRng::seed_from_u64(seed);
        // first pixel holds the sample id so samples can be traced through a partition
        let mut pixels = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut img = vec![0u8; IMAGE_PIXELS];
            img[0] = (i % 256) as u8;
            img[1] = (i / 256) as u8;
            pixels.extend(img);
            labels.push(rng.random_range(0..10u8));
        }
        ClientDataset::new(pixels, labels, PixelScaling::Unit).unwrap()
    }

    fn ids(d: &ClientDataset) -> Vec<usize> {
        (0..d.len())
            .map(|i| usize::from(d.image(i)[0]) + 256 * usize::from(d.image(i)[1]))
            .collect()
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic(7, 1);
        let img = write(dir.path(), "img", &encode_idx_images(&(0..7).flat_map(|i| data.image(i).to_vec()).collect::<Vec<_>>()));
        let lab = write(dir.path(), "lab", &encode_idx_labels(data.labels()));
        assert_eq!(load_idx(&img, &lab, PixelScaling::Unit).unwrap(), data);
    }

    #[test]
    fn wrong_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = encode_idx_images(&[0; IMAGE_PIXELS]);
        bytes[3] = 0x01;
        let img = write(dir.path(), "img", &bytes);
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[1]));
        let err = load_idx(&img, &lab, PixelScaling::Unit).unwrap_err();
        assert!(matches!(err, Error::IdxMagic { found: 0x0801, .. }), "{err}");
        assert!(err.to_string().contains("0x00000801"));
    }

    #[test]
    fn empty_files_load_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_idx_images(&[]));
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[]));
        assert!(load_idx(&img, &lab, PixelScaling::Unit).unwrap().is_empty());
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_idx_images(&[0; 2 * IMAGE_PIXELS]));
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[1, 2, 3]));
        assert!(matches!(
            load_idx(&img, &lab, PixelScaling::Unit),
            Err(Error::IdxCountMismatch { images: 2, labels: 3 })
        ));
        let mut short = encode_idx_images(&[0; 2 * IMAGE_PIXELS]);
        short.truncate(100);
        let img = write(dir.path(), "short", &short);
        let err = load_idx(&img, &lab, PixelScaling::Unit).unwrap_err();
        assert!(err.is_io(), "{err}");
        let missing = dir.path().join("nope");
        assert!(load_idx(&missing, &lab, PixelScaling::Unit).unwrap_err().is_io());
    }

    #[test]
    fn iid_partition_is_disjoint_and_equal() {
        let data = synthetic(1003, 2);
        let parts = partition_iid(&data, 10, None, &mut SimRng::seed_from_u64(3)).unwrap();
        assert_eq!(parts.len(), 10);
        assert!(parts.iter().all(|p| p.len() == 100));
        let all: HashSet<usize> = parts.iter().flat_map(ids).collect();
        assert_eq!(all.len(), 1000);

        let one = partition_iid(&data, 1, None, &mut SimRng::seed_from_u64(3)).unwrap();
        assert_eq!(one[0].len(), 1003);

        let capped = partition_iid(&data, 10, Some(7), &mut SimRng::seed_from_u64(3)).unwrap();
        assert!(capped.iter().all(|p| p.len() == 7));

        assert!(partition_iid(&synthetic(3, 0), 4, None, &mut SimRng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn partitions_are_deterministic() {
        let data = synthetic(500, 4);
        let a = partition_iid(&data, 5, None, &mut SimRng::seed_from_u64(9)).unwrap();
        let b = partition_iid(&data, 5, None, &mut SimRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let a = partition_single_label(&data, 5, None, &mut SimRng::seed_from_u64(9)).unwrap();
        let b = partition_single_label(&data, 5, None, &mut SimRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_label_partition_is_pure_and_equal() {
        let data = synthetic(2000, 5);
        let parts = partition_single_label(&data, 10, None, &mut SimRng::seed_from_u64(1)).unwrap();
        let min = (0..10u8)
            .map(|c| data.labels().iter().filter(|&&l| l == c).count())
            .min()
            .unwrap();
        for (m, p) in parts.iter().enumerate() {
            assert_eq!(p.len(), min);
            assert!(p.labels().iter().all(|&l| usize::from(l) == m));
        }
        let all: HashSet<usize> = parts.iter().flat_map(ids).collect();
        assert_eq!(all.len(), 10 * min);

        let two = partition_single_label(&data, 2, Some(5), &mut SimRng::seed_from_u64(1)).unwrap();
        assert_eq!(two[0].labels(), &[0; 5]);
        assert_eq!(two[1].labels(), &[1; 5]);
    }

    #[test]
    fn single_label_needs_enough_labels() {
        let labels = vec![0u8, 1, 1, 2];
        let data = ClientDataset::new(vec![0; 4 * IMAGE_PIXELS], labels, PixelScaling::Unit).unwrap();
        assert!(partition_single_label(&data, 4, None, &mut SimRng::seed_from_u64(0)).is_err());
        assert!(partition_single_label(&data, 3, None, &mut SimRng::seed_from_u64(0)).is_ok());
    }
}
