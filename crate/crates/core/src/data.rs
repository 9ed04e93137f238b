//! Datasets, the IDX image format, synthetic data and non-IID partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{substream, Domain};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Classes in MNIST.
pub const MNIST_CLASSES: usize = 10;

/// Examples stored row-major as `f32` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        features: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset has no examples"));
        }
        if input_dim == 0 || features.len() != input_dim * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: input_dim * labels.len(),
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            input_dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self, k: usize) -> &[f32] {
        &self.features[k * self.input_dim..(k + 1) * self.input_dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], usize)> + '_ {
        self.features
            .chunks_exact(self.input_dim)
            .zip(self.labels.iter().copied())
    }

    /// Number of examples per class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copy the examples at `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Domain(format!("example index {k} out of range")));
            }
            features.extend_from_slice(self.features(k));
            labels.push(self.labels[k]);
        }
        Self::new(self.input_dim, self.num_classes, features, labels)
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Domain(format!("example index {k} out of range")));
            }
            inputs.extend_from_slice(self.features(k));
            labels.push(self.labels[k]);
        }
        Batch::new(self.input_dim, inputs, labels)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let word = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail("truncated header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
    }

    fn expect_magic(&mut self, magic: u32) -> Result<()> {
        let found = self.u32()?;
        if found != magic {
            return Err(self.fail(format!(
                "bad magic number {found:#010x}, expected {magic:#010x}"
            )));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        match rest.len().cmp(&len) {
            std::cmp::Ordering::Less => Err(self.fail(format!(
                "truncated payload: {} of {len} bytes",
                rest.len()
            ))),
            std::cmp::Ordering::Greater => Err(self.fail(format!(
                "{} trailing bytes after payload",
                rest.len() - len
            ))),
            std::cmp::Ordering::Equal => Ok(rest),
        }
    }
}

/// Load an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// each image is flattened row-major.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    let mut images = IdxReader {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    images.expect_magic(IDX_IMAGES_MAGIC)?;
    let count = images.u32()? as usize;
    let rows = images.u32()? as usize;
    let cols = images.u32()? as usize;
    let input_dim = rows * cols;
    let pixels = images.payload(count * input_dim)?;

    let mut labels = IdxReader {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    labels.expect_magic(IDX_LABELS_MAGIC)?;
    let label_count = labels.u32()? as usize;
    if label_count != count {
        return Err(labels.fail(format!(
            "{label_count} labels for {count} images"
        )));
    }
    let raw_labels = labels.payload(count)?;
    if let Some(&bad) = raw_labels.iter().find(|&&l| usize::from(l) >= MNIST_CLASSES) {
        return Err(labels.fail(format!("label {bad} is not a digit")));
    }

    Dataset::new(
        input_dim,
        MNIST_CLASSES,
        pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
        raw_labels.iter().map(|&l| usize::from(l)).collect(),
    )
}

/// Serialize images as an IDX3 file body.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Gaussian class clusters in `[0, 1]^input_dim`.
///
/// Each class gets a random unit direction `u_k`; its examples are
/// `0.5 + separation·τ/√2 · u_k + N(0, τ²)` per coordinate with `τ = 0.1`,
/// clamped to `[0, 1]`. Two class means therefore sit about
/// `separation` noise standard deviations apart. Labels cycle through the
/// classes so every class is present.
pub fn synthetic_dataset(
    input_dim: usize,
    num_classes: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    const NOISE: f64 = 0.1;
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::Config("synthetic data needs positive dims".into()));
    }
    if n < num_classes {
        return Err(Error::Config(format!(
            "synthetic data needs at least one example per class ({n} < {num_classes})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("invalid separation {separation}")));
    }
    let mut rng = substream(seed, Domain::Synthetic, 0, 0);
    let offset = separation * NOISE / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter().map(|v| 0.5 + offset * v / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, NOISE).expect("valid normal");
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = k % num_classes;
        labels.push(label);
        features.extend(
            centers[label]
                .iter()
                .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32),
        );
    }
    Dataset::new(input_dim, num_classes, features, labels)
}

/// How the training set is split across parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub num_parties: usize,
    pub labels_per_party: usize,
    pub seed: u64,
}

/// Label-skewed partition.
///
/// Labels are shuffled once; party `m` takes the `c` labels at positions
/// `m·c .. m·c + c` of that permutation, wrapping around. Every label's
/// examples are shuffled and dealt out evenly (sizes differ by at most one)
/// among the parties holding it. Returns example indices per party.
pub fn partition_by_labels(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let classes = ds.num_classes();
    let c = spec.labels_per_party;
    if spec.num_parties == 0 {
        return Err(Error::Config("need at least one party".into()));
    }
    if c == 0 || c > classes {
        return Err(Error::Config(format!(
            "labels per party must be in 1..={classes}, got {c}"
        )));
    }
    let mut rng = substream(spec.seed, Domain::Partition, 0, 0);
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for party in 0..spec.num_parties {
        for j in 0..c {
            holders[order[(party * c + j) % classes]].push(party);
        }
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (k, &l) in ds.labels().iter().enumerate() {
        pools[l].push(k);
    }

    let mut parties: Vec<Vec<usize>> = vec![Vec::new(); spec.num_parties];
    for (label, pool) in pools.iter_mut().enumerate() {
        let owners = &holders[label];
        if owners.is_empty() {
            continue;
        }
        pool.shuffle(&mut rng);
        let share = pool.len() / owners.len();
        let extra = pool.len() % owners.len();
        let mut start = 0;
        for (r, &party) in owners.iter().enumerate() {
            let len = share + usize::from(r < extra);
            parties[party].extend_from_slice(&pool[start..start + len]);
            start += len;
        }
    }
    for p in &mut parties {
        p.sort_unstable();
    }
    Ok(parties)
}

/// A party's local dataset together with its epoch-shuffle cursor.
#[derive(Debug, Clone)]
pub struct PartyData {
    dataset: Dataset,
    order: Vec<usize>,
    cursor: usize,
}

impl PartyData {
    pub fn new(dataset: Dataset) -> Self {
        Self {
            dataset,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// Size of the batches [`PartyData::next_batch`] returns.
    pub fn effective_batch(&self, batch_size: usize) -> usize {
        batch_size.min(self.len())
    }

    /// Indices of the next mini-batch. Batches are drawn without replacement
    /// from a permutation reshuffled at each epoch; an epoch's leftover
    /// examples that cannot fill a batch are skipped. With fewer examples
    /// than `batch_size` the whole dataset is returned.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let n = self.len();
        if n <= batch_size {
            return Ok((0..n).collect());
        }
        if self.order.is_empty() || self.cursor + batch_size > n {
            self.order = (0..n).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + batch_size].to_vec();
        self.cursor += batch_size;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 23) as u8).collect();
        let img = write(dir.path(), "img", &encode_idx_images(3, 2, &pixels));
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[7, 2]));
        let ds = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 6);
        assert_eq!(ds.labels(), &[7, 2]);
        for (k, &p) in pixels.iter().enumerate() {
            assert_eq!(ds.features(k / 6)[k % 6], f32::from(p) / 255.0);
        }
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_idx_images(2, 2, &[0; 8]));
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[1, 2]));

        let mut wrong_magic = encode_idx_labels(&[1, 2]);
        wrong_magic[3] = 0x03;
        let bad = write(dir.path(), "bad", &wrong_magic);
        assert!(matches!(load_mnist_idx(&img, &bad), Err(Error::Idx { .. })));
        assert!(matches!(load_mnist_idx(&bad, &lab), Err(Error::Idx { .. })));

        let full = encode_idx_images(2, 2, &[0; 8]);
        let short = write(dir.path(), "short", &full[..full.len() - 1]);
        assert!(load_mnist_idx(&short, &lab).is_err());
        let header_only = write(dir.path(), "hdr", &full[..6]);
        assert!(load_mnist_idx(&header_only, &lab).is_err());

        let three = write(dir.path(), "three", &encode_idx_labels(&[1, 2, 3]));
        assert!(load_mnist_idx(&img, &three).is_err());

        let big_label = write(dir.path(), "big", &encode_idx_labels(&[1, 12]));
        assert!(load_mnist_idx(&img, &big_label).is_err());

        assert!(matches!(
            load_mnist_idx(dir.path().join("missing"), &lab),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = synthetic_dataset(20, 4, 40, 5.0, 9).unwrap();
        assert_eq!(a, synthetic_dataset(20, 4, 40, 5.0, 9).unwrap());
        assert_ne!(a, synthetic_dataset(20, 4, 40, 5.0, 10).unwrap());
        assert_eq!(a.label_counts(), vec![10; 4]);
        assert!(a.iter().all(|(x, _)| x.iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert!(synthetic_dataset(20, 4, 3, 5.0, 9).is_err());
    }

    #[test]
    fn single_party_with_all_labels_gets_everything() {
        let ds = synthetic_dataset(4, 5, 53, 1.0, 0).unwrap();
        let spec = PartitionSpec {
            num_parties: 1,
            labels_per_party: 5,
            seed: 3,
        };
        let parts = partition_by_labels(&ds, &spec).unwrap();
        assert_eq!(parts, vec![(0..53).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_rejects_too_many_labels() {
        let ds = synthetic_dataset(4, 5, 50, 1.0, 0).unwrap();
        let spec = PartitionSpec {
            num_parties: 3,
            labels_per_party: 6,
            seed: 0,
        };
        assert!(partition_by_labels(&ds, &spec).is_err());
    }

    #[test]
    fn partitions_are_disjoint_with_c_labels_each() {
        let ds = synthetic_dataset(3, 10, 997, 1.0, 1).unwrap();
        for (m, c) in [(31, 1), (31, 2), (31, 4), (31, 10), (7, 3), (2, 10)] {
            let spec = PartitionSpec {
                num_parties: m,
                labels_per_party: c,
                seed: 42,
            };
            let parts = partition_by_labels(&ds, &spec).unwrap();
            assert_eq!(parts, partition_by_labels(&ds, &spec).unwrap());
            let mut seen = BTreeSet::new();
            for p in &parts {
                for &k in p {
                    assert!(seen.insert(k), "example {k} duplicated");
                }
                let labels: BTreeSet<_> = p.iter().map(|&k| ds.labels()[k]).collect();
                assert_eq!(labels.len(), c);
            }
            if m * c >= 10 {
                assert_eq!(seen.len(), ds.len());
            }
        }
    }

    #[test]
    fn batches_cover_an_epoch_without_repeats() {
        let ds = synthetic_dataset(2, 2, 10, 1.0, 0).unwrap();
        let mut party = PartyData::new(ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = party.next_batch(4, &mut rng).unwrap();
        let b = party.next_batch(4, &mut rng).unwrap();
        let mut both: Vec<_> = a.iter().chain(&b).copied().collect();
        both.sort_unstable();
        both.dedup();
        assert_eq!(both.len(), 8);
        // Two leftovers cannot fill a batch: a new epoch starts.
        assert_eq!(party.next_batch(4, &mut rng).unwrap().len(), 4);
        assert_eq!(party.next_batch(64, &mut rng).unwrap(), (0..10).collect::<Vec<_>>());
        assert!(party.next_batch(0, &mut rng).is_err());
    }
}
