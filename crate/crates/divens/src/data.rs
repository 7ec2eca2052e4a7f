//! Dataset container, IDX ingestion, and the synthetic blobs generator.
//!
//! Features always live in `[0, 1]` — attacks and the training loop rely
//! on that box. The IDX loader reads the classic big-endian image/label
//! container; `synth_blobs` produces a deterministic desk-scale stand-in
//! when no image files are around.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Magic number of an IDX image file (unsigned byte, 3 dimensions).
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
/// Magic number of an IDX label file (unsigned byte, 1 dimension).
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset with features boxed into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    /// Human-readable source name (e.g. `"blobs"`).
    pub name: String,
}

impl Dataset {
    /// Builds a dataset, enforcing the box and label-range invariants.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Empty("dataset"));
        }
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                details: format!("{} labels for {} rows", labels.len(), features.rows()),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        for &v in features.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!("feature {v} outside [0, 1]")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    /// Number of examples.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    /// True when the dataset holds no examples (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The `[n, d]` feature matrix.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// The label vector.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// A new dataset holding the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Empty("dataset subset"));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "subset index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.features.row_slice(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor::new(indices.len(), d, data)?,
            labels,
            self.num_classes,
            self.name.clone(),
        )
    }

    /// Keeps the first `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&indices)
    }

    /// Splits off the first `per_class` examples of every class (in dataset
    /// order) as the first returned set; the remainder forms the second.
    pub fn split_per_class(&self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let mut taken = vec![0usize; self.num_classes];
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if taken[y] < per_class {
                taken[y] += 1;
                first.push(i);
            } else {
                second.push(i);
            }
        }
        Ok((self.subset(&first)?, self.subset(&second)?))
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            offset: bytes.len() as u64,
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses a big-endian IDX image/label pair into a dataset with pixels
/// scaled into `[0, 1]` by division by 255. The two files must agree on
/// the example count; labels fix the class count at 10.
pub fn load_idx(images_path: &str, labels_path: &str) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;

    let img_magic = read_u32_be(&img, 0, images_path)?;
    if img_magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxMagic {
            path: images_path.to_string(),
            expected: IDX_IMAGE_MAGIC,
            found: img_magic,
        });
    }
    let lab_magic = read_u32_be(&lab, 0, labels_path)?;
    if lab_magic != IDX_LABEL_MAGIC {
        return Err(Error::IdxMagic {
            path: labels_path.to_string(),
            expected: IDX_LABEL_MAGIC,
            found: lab_magic,
        });
    }

    let n_img = read_u32_be(&img, 4, images_path)? as usize;
    let rows = read_u32_be(&img, 8, images_path)? as usize;
    let cols = read_u32_be(&img, 12, images_path)? as usize;
    let n_lab = read_u32_be(&lab, 4, labels_path)? as usize;
    if n_img != n_lab {
        return Err(Error::IdxCountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }

    let d = rows * cols;
    let pixel_bytes = n_img * d;
    if img.len() < 16 + pixel_bytes {
        return Err(Error::IdxTruncated {
            path: images_path.to_string(),
            offset: img.len() as u64,
        });
    }
    if lab.len() < 8 + n_lab {
        return Err(Error::IdxTruncated {
            path: labels_path.to_string(),
            offset: lab.len() as u64,
        });
    }

    let data: Vec<f64> = img[16..16 + pixel_bytes]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + n_lab].iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::new(n_img, d, data)?, labels, 10, "idx")
}

/// Generates `l` Gaussian clusters in `d` dimensions with unit-sphere
/// means and standard deviation `spread`, then rescales the whole cloud
/// affinely into `[0, 1]`. Examples are grouped by class (class 0 first),
/// bit-identical per seed; each class draws from its own streams, so the
/// sample count of one class never shifts another's draws.
pub fn synth_blobs(
    seed: u64,
    l: usize,
    d: usize,
    n_per_class: usize,
    spread: f64,
) -> Result<Dataset> {
    if l < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs needs l >= 2 and d >= 2, got l={l}, d={d}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Empty("synth_blobs class"));
    }
    if !(spread >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spread must be >= 0, got {spread}"
        )));
    }

    let n = l * n_per_class;
    let mut raw = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..l {
        let mut mean_rng = rng::stream(seed, "blob-means", class as u64);
        let mut mean: Vec<f64> = (0..d).map(|_| rng::standard_normal(&mut mean_rng)).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut mean {
            *v /= norm;
        }
        let mut noise_rng = rng::stream(seed, "blob-noise", class as u64);
        for _ in 0..n_per_class {
            for &m in &mean {
                raw.push(m + spread * rng::standard_normal(&mut noise_rng));
            }
            labels.push(class);
        }
    }

    // One global affine map so inter-class geometry is preserved.
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    for v in &mut raw {
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }

    Dataset::new(Tensor::new(n, d, raw)?, labels, l, "blobs")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Assembles IDX bytes for `images` of `rows x cols` with `labels`.
    fn idx_pair(images: &[Vec<u8>], rows: u32, cols: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&rows.to_be_bytes());
        img.extend_from_slice(&cols.to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    fn write_pair(dir: &tempfile::TempDir, img: &[u8], lab: &[u8]) -> (String, String) {
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("labs.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (
            ip.to_str().unwrap().to_string(),
            lp.to_str().unwrap().to_string(),
        )
    }

    #[test]
    fn hand_built_idx_fixture_round_trips() {
        // Two 3x3 images with every distinct byte value enumerated.
        let a = vec![0u8, 51, 102, 153, 204, 255, 10, 20, 30];
        let b = vec![255u8, 0, 128, 64, 32, 16, 8, 4, 2];
        let (img, lab) = idx_pair(&[a.clone(), b.clone()], 3, 3, &[7, 2]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(&dir, &img, &lab);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 9);
        assert_eq!(ds.labels(), &[7, 2]);
        for (j, &byte) in a.iter().enumerate() {
            assert_eq!(ds.features().at(0, j), byte as f64 / 255.0);
        }
        assert_eq!(ds.features().at(1, 0), 1.0);
        assert_eq!(ds.features().at(1, 1), 0.0);
    }

    #[test]
    fn wrong_magic_is_named_in_the_error() {
        let (mut img, lab) = idx_pair(&[vec![0u8; 4]], 2, 2, &[1]);
        img[3] = 0x04; // magic 2052
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(&dir, &img, &lab);
        match load_idx(&ip, &lp) {
            Err(Error::IdxMagic {
                expected, found, ..
            }) => {
                assert_eq!(expected, 2051);
                assert_eq!(found, 2052);
            }
            other => panic!("expected IdxMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_the_offset() {
        let (img, lab) = idx_pair(&[vec![0u8; 4]], 2, 2, &[1]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(&dir, &img[..img.len() - 2], &lab);
        match load_idx(&ip, &lp) {
            Err(Error::IdxTruncated { offset, .. }) => {
                assert_eq!(offset, (img.len() - 2) as u64);
            }
            other => panic!("expected IdxTruncated, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let (img, lab) = idx_pair(&[vec![0u8; 4], vec![0u8; 4]], 2, 2, &[1]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(&dir, &img, &lab);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::IdxCountMismatch {
                images: 2,
                labels: 1
            })
        ));
    }

    #[test]
    fn blobs_are_deterministic_and_boxed() {
        let a = synth_blobs(11, 4, 6, 25, 0.08).unwrap();
        let b = synth_blobs(11, 4, 6, 25, 0.08).unwrap();
        assert_eq!(a.features().data(), b.features().data());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.len(), 100);
        for &v in a.features().data() {
            assert!((0.0..=1.0).contains(&v));
        }
        let c = synth_blobs(12, 4, 6, 25, 0.08).unwrap();
        assert_ne!(a.features().data(), c.features().data());
    }

    #[test]
    fn zero_spread_collapses_classes_to_their_means() {
        let ds = synth_blobs(5, 3, 4, 10, 0.0).unwrap();
        // All rows of one class are identical; a nearest-mean rule is exact.
        for class in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels()[i] == class)
                .map(|i| ds.features().row_slice(i))
                .collect();
            for r in &rows[1..] {
                assert_eq!(*r, rows[0]);
            }
        }
    }

    #[test]
    fn per_class_split_respects_generation_order() {
        let ds = synth_blobs(9, 3, 5, 30, 0.08).unwrap();
        let (train, test) = ds.split_per_class(20).unwrap();
        assert_eq!(train.len(), 60);
        assert_eq!(test.len(), 30);
        for class in 0..3 {
            assert_eq!(
                train.labels().iter().filter(|&&y| y == class).count(),
                20
            );
            assert_eq!(test.labels().iter().filter(|&&y| y == class).count(), 10);
        }
        // The union reproduces the original rows exactly.
        let mut seen = train.features().data().to_vec();
        seen.extend_from_slice(test.features().data());
        let mut orig = ds.features().data().to_vec();
        seen.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(seen, orig);
    }

    #[test]
    fn dataset_constructor_enforces_invariants() {
        let t = Tensor::new(2, 2, vec![0.0, 0.5, 1.0, 0.5]).unwrap();
        assert!(Dataset::new(t.clone(), vec![0], 2, "x").is_err());
        assert!(matches!(
            Dataset::new(t.clone(), vec![0, 5], 2, "x"),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
        let bad = Tensor::new(1, 2, vec![0.2, 1.4]).unwrap();
        assert!(matches!(
            Dataset::new(bad, vec![0], 2, "x"),
            Err(Error::Numeric(_))
        ));
        assert!(Dataset::new(t, vec![0, 1], 2, "x").is_ok());
    }

    #[test]
    fn subset_preserves_row_content_and_order() {
        let ds = synth_blobs(2, 3, 4, 5, 0.05).unwrap();
        let sub = ds.subset(&[4, 0, 9]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.features().row_slice(0), ds.features().row_slice(4));
        assert_eq!(sub.features().row_slice(1), ds.features().row_slice(0));
        assert_eq!(sub.features().row_slice(2), ds.features().row_slice(9));
        assert_eq!(sub.labels()[1], ds.labels()[0]);
    }
}
