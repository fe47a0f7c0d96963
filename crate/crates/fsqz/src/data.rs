//! Datasets and client partitioning: synthetic Gaussian blobs, IDX file
//! loading, and Dirichlet (latent Dirichlet allocation style) non-IID splits
//! across clients.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled classification data; one feature row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be nonzero".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Isotropic Gaussian blobs: one standard-normal centroid per class, then
/// `per_class` examples at `centroid + spread * N(0, I)`. Examples are laid
/// out class-major (all of class 0 first). Deterministic in `seed`.
pub fn gen_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::Config(
            "num_classes, dim, and per_class must be nonzero".into(),
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::Config(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let centroid: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..per_class {
            for &c in &centroid {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push((c + spread * noise) as f32);
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Matrix::from_vec(num_classes * per_class, dim, features)?,
        labels,
        num_classes,
    )
}

/// Splits class-balanced data into train and test by taking the first
/// `train_per_class` examples of every class for training and the rest for
/// testing. Example order is preserved within each side.
pub fn split_per_class(ds: &Dataset, train_per_class: usize) -> Result<(Dataset, Dataset)> {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut seen = vec![0usize; ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        if seen[y] < train_per_class {
            train_idx.push(i);
        } else {
            test_idx.push(i);
        }
        seen[y] += 1;
    }
    if let Some(short) = seen.iter().position(|&n| n < train_per_class) {
        return Err(Error::Data(format!(
            "class {short} has only {} examples, need {train_per_class} for training",
            seen[short]
        )));
    }
    let take = |idx: &[usize]| -> Result<Dataset> {
        Dataset::new(
            ds.features.gather_rows(idx)?,
            idx.iter().map(|&i| ds.labels[i]).collect(),
            ds.num_classes,
        )
    };
    Ok((take(&train_idx)?, take(&test_idx)?))
}

fn read_be_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::truncated(what))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image file (magic `0x00000803`): big-endian dimensions, then
/// one byte per pixel, scaled here to `[0, 1]`. Each image becomes one
/// feature row of `rows * cols` values.
pub fn load_idx_images(path: &Path) -> Result<Matrix> {
    let mut f = File::open(path)?;
    let magic = read_be_u32(&mut f, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut f, "image count")? as usize;
    let rows = read_be_u32(&mut f, "image rows")? as usize;
    let cols = read_be_u32(&mut f, "image cols")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let mut pixels = Vec::new();
    f.read_to_end(&mut pixels)?;
    if pixels.len() < expected {
        return Err(Error::truncated("image pixels"));
    }
    if pixels.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after pixel data",
            pixels.len() - expected
        )));
    }
    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Matrix::from_vec(count, rows * cols, features)
}

/// Loads an IDX label file (magic `0x00000801`): one byte per label.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = File::open(path)?;
    let magic = read_be_u32(&mut f, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut f, "label count")? as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < count {
        return Err(Error::truncated("labels"));
    }
    if bytes.len() > count {
        return Err(Error::Format(format!(
            "{} trailing bytes after label data",
            bytes.len() - count
        )));
    }
    Ok(bytes.iter().map(|&b| b as usize).collect())
}

/// Loads a paired IDX image and label file into a dataset. The two files
/// must agree on the example count, and every label must be below
/// `num_classes`.
pub fn load_idx_dataset(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let features = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != features.rows() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    Dataset::new(features, labels, num_classes)
}

/// How to split a dataset across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Dirichlet concentration; small values give each client a few dominant
    /// classes, large values approach a uniform split.
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be nonzero".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Disjoint, covering assignment of example indices to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn client_counts(&self) -> Vec<usize> {
        self.assignment.iter().map(|a| a.len()).collect()
    }

    /// Checks that every index below `n` appears exactly once.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (client, shard) in self.assignment.iter().enumerate() {
            for &i in shard {
                if i >= n {
                    return Err(Error::Internal(format!(
                        "client {client} holds index {i}, dataset has {n} examples"
                    )));
                }
                if seen[i] {
                    return Err(Error::Internal(format!(
                        "index {i} assigned to more than one client"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Internal(format!(
                "index {missing} assigned to no client"
            )));
        }
        Ok(())
    }
}

/// One draw from `Dirichlet(alpha, ..., alpha)` over `k` categories, via
/// normalized Gamma(alpha, 1) samples.
pub fn dirichlet_proportions(rng: &mut impl Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("cannot draw over zero categories".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Config(format!("gamma({alpha}): {e}")))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::Numeric(
            "degenerate Dirichlet draw (all gamma samples zero)".into(),
        ));
    }
    Ok(draws.iter().map(|&g| g / sum).collect())
}

/// Largest-remainder apportionment of `total` items over fractional
/// proportions; remainder ties go to the lower index.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let targets: Vec<f64> = props.iter().map(|&p| p * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Dirichlet label-skew partition: for every class, proportions over clients
/// are drawn from `Dirichlet(alpha)`, that class's examples are shuffled, and
/// largest-remainder rounding fixes the per-client counts. Deterministic in
/// `spec.seed`; classes are processed in ascending order with proportions
/// drawn before the shuffle.
pub fn lda_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("cannot partition an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_clients;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
    for mut idxs in by_class {
        let props = dirichlet_proportions(&mut rng, spec.alpha, k)?;
        idxs.shuffle(&mut rng);
        let counts = largest_remainder(&props, idxs.len());
        let mut off = 0;
        for (client, &c) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&idxs[off..off + c]);
            off += c;
        }
    }
    Ok(Partition { assignment })
}

/// Per-client label composition of a partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionStats {
    /// Examples per client.
    pub counts: Vec<usize>,
    /// `class_histograms[client][class]`.
    pub class_histograms: Vec<Vec<usize>>,
    /// Label histogram of the whole dataset.
    pub global_histogram: Vec<usize>,
}

/// Counts labels per client. The partition must be valid for the dataset.
pub fn partition_stats(partition: &Partition, ds: &Dataset) -> Result<PartitionStats> {
    partition.validate(ds.len())?;
    let class_histograms: Vec<Vec<usize>> = partition
        .assignment
        .iter()
        .map(|shard| {
            let mut hist = vec![0usize; ds.num_classes];
            for &i in shard {
                hist[ds.labels[i]] += 1;
            }
            hist
        })
        .collect();
    Ok(PartitionStats {
        counts: partition.client_counts(),
        class_histograms,
        global_histogram: ds.class_counts(),
    })
}

/// Total variation distance between two label distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// Mean total-variation distance between each nonempty client's label
/// distribution and the global one: 0 for a perfectly IID split, approaching
/// 1 as clients specialize.
pub fn mean_label_tv(stats: &PartitionStats) -> f64 {
    let total: usize = stats.global_histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let global: Vec<f64> = stats
        .global_histogram
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    let mut sum = 0.0;
    let mut clients = 0usize;
    for (hist, &n) in stats.class_histograms.iter().zip(&stats.counts) {
        if n == 0 {
            continue;
        }
        let dist: Vec<f64> = hist.iter().map(|&c| c as f64 / n as f64).collect();
        sum += tv_distance(&dist, &global);
        clients += 1;
    }
    if clients == 0 {
        0.0
    } else {
        sum / clients as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_layout_is_class_major() {
        let ds = gen_blobs(2, 3, 5, 0.5, 0).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.dim(), 3);
        assert_eq!(&ds.labels[..5], &[0; 5]);
        assert_eq!(&ds.labels[5..], &[1; 5]);
        assert_eq!(ds.class_counts(), vec![5, 5]);
    }

    #[test]
    fn blobs_spread_zero_collapses_to_centroids() {
        let ds = gen_blobs(3, 4, 7, 0.0, 2).unwrap();
        for class in 0..3 {
            let first = ds.features.row(class * 7).to_vec();
            for j in 1..7 {
                assert_eq!(ds.features.row(class * 7 + j), &first[..]);
            }
        }
    }

    #[test]
    fn blobs_are_seed_deterministic() {
        let a = gen_blobs(2, 2, 3, 1.0, 5).unwrap();
        let b = gen_blobs(2, 2, 3, 1.0, 5).unwrap();
        let c = gen_blobs(2, 2, 3, 1.0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(gen_blobs(0, 2, 3, 1.0, 0).is_err());
        assert!(gen_blobs(2, 2, 3, -1.0, 0).is_err());
    }

    #[test]
    fn split_keeps_classes_balanced() {
        let ds = gen_blobs(3, 2, 10, 0.5, 1).unwrap();
        let (train, test) = split_per_class(&ds, 8).unwrap();
        assert_eq!(train.class_counts(), vec![8, 8, 8]);
        assert_eq!(test.class_counts(), vec![2, 2, 2]);
        assert!(split_per_class(&ds, 11).is_err());
    }

    fn write_idx_images(dir: &Path, name: &str, images: &[[u8; 4]]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
        path
    }

    fn write_idx_labels(dir: &Path, name: &str, labels: &[u8]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        path
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let images = write_idx_images(dir.path(), "imgs", &[[0, 51, 102, 255], [255, 0, 0, 0]]);
        let labels = write_idx_labels(dir.path(), "lbls", &[1, 0]);

        let ds = load_idx_dataset(&images, &labels, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.features.row(0)[3], 1.0);
        assert_eq!(ds.features.row(0)[0], 0.0);
        assert!((ds.features.row(0)[1] - 0.2).abs() < 1e-6);

        // Wrong magic.
        let bad = dir.path().join("bad_magic");
        std::fs::write(&bad, 0x0000_0802u32.to_be_bytes()).unwrap();
        assert!(matches!(load_idx_labels(&bad), Err(Error::Format(_))));

        // Truncated pixel data.
        let trunc = dir.path().join("trunc");
        let full = std::fs::read(&images).unwrap();
        std::fs::write(&trunc, &full[..full.len() - 3]).unwrap();
        assert!(matches!(load_idx_images(&trunc), Err(Error::Io(_))));

        // Trailing bytes.
        let mut extra = full.clone();
        extra.push(0);
        let trail = dir.path().join("trail");
        std::fs::write(&trail, &extra).unwrap();
        assert!(matches!(load_idx_images(&trail), Err(Error::Format(_))));

        // Image/label count mismatch.
        let one_label = write_idx_labels(dir.path(), "one", &[0]);
        assert!(matches!(
            load_idx_dataset(&images, &one_label, 2),
            Err(Error::Format(_))
        ));

        // Label out of range for the declared class count.
        assert!(matches!(
            load_idx_dataset(&images, &labels, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn largest_remainder_apportions_exactly() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.3, 0.3, 0.4], 10), vec![3, 3, 4]);
        let third = 1.0 / 3.0;
        assert_eq!(largest_remainder(&[third, third, third], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[1.0], 7), vec![7]);
        assert_eq!(largest_remainder(&[0.9, 0.1], 0), vec![0, 0]);
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let ds = gen_blobs(4, 2, 25, 0.5, 3).unwrap();
        for (alpha, clients) in [(0.1, 7), (1.0, 3), (100.0, 10), (0.5, 1)] {
            let spec = PartitionSpec {
                num_clients: clients,
                alpha,
                seed: 42,
            };
            let p = lda_partition(&ds, &spec).unwrap();
            assert_eq!(p.num_clients(), clients);
            p.validate(ds.len()).unwrap();
            assert_eq!(p.client_counts().iter().sum::<usize>(), ds.len());
        }
    }

    #[test]
    fn partition_handles_more_clients_than_examples() {
        let ds = gen_blobs(2, 2, 2, 0.5, 3).unwrap();
        let spec = PartitionSpec {
            num_clients: 50,
            alpha: 1.0,
            seed: 1,
        };
        let p = lda_partition(&ds, &spec).unwrap();
        p.validate(ds.len()).unwrap();
        assert!(p.client_counts().iter().any(|&c| c == 0));
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let ds = gen_blobs(3, 2, 20, 0.5, 3).unwrap();
        let spec = PartitionSpec {
            num_clients: 5,
            alpha: 0.3,
            seed: 9,
        };
        assert_eq!(
            lda_partition(&ds, &spec).unwrap(),
            lda_partition(&ds, &spec).unwrap()
        );
        let other = lda_partition(
            &ds,
            &PartitionSpec {
                seed: 10,
                ..spec.clone()
            },
        )
        .unwrap();
        assert_ne!(lda_partition(&ds, &spec).unwrap(), other);
    }

    #[test]
    fn partition_spec_validation() {
        let spec = PartitionSpec {
            num_clients: 0,
            alpha: 1.0,
            seed: 0,
        };
        assert!(spec.validate().is_err());
        let spec = PartitionSpec {
            num_clients: 2,
            alpha: 0.0,
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn stats_count_labels_per_client() {
        let ds = gen_blobs(2, 2, 10, 0.5, 0).unwrap();
        let p = Partition {
            assignment: vec![(0..10).collect(), (10..20).collect()],
        };
        let stats = partition_stats(&p, &ds).unwrap();
        assert_eq!(stats.counts, vec![10, 10]);
        assert_eq!(stats.class_histograms[0], vec![10, 0]);
        assert_eq!(stats.class_histograms[1], vec![0, 10]);
        assert_eq!(stats.global_histogram, vec![10, 10]);
        // Each client fully specializes: TV = 0.5 against the uniform global.
        assert!((mean_label_tv(&stats) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tv_distance_basics() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }
}
