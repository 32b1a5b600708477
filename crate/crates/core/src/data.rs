//! Dataset ingestion: gzipped or raw IDX files and a synthetic
//! Gaussian-clusters generator.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "CDL_DATA_DIR";

/// Row-major samples with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_len: usize,
    pub classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(input_len: usize, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if input_len == 0 || inputs.len() != input_len * labels.len() {
            return Err(Error::Shape(format!(
                "{} values for {} samples of length {input_len}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} out of range for {classes} classes")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset input".into()));
        }
        Ok(Self {
            input_len,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_len..(i + 1) * self.input_len]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            input_len: self.input_len,
            classes: self.classes,
            inputs: self.inputs[..n * self.input_len].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file, returning dimensions and data.
pub fn parse_idx_u8(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!("IDX type 0x{:02x} is not unsigned byte", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, dimensions {dims:?} need {n}",
            bytes.len() - header
        )));
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an image/label IDX pair, scaling pixels to `[0, 1]`.
pub fn load_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    let lab = read_maybe_gz(labels)?;
    let (idims, ibody) = parse_idx_u8(&img)?;
    let (ldims, lbody) = parse_idx_u8(&lab)?;
    if idims.is_empty() || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Format(format!(
            "image dims {idims:?} do not match label dims {ldims:?}"
        )));
    }
    let input_len = idims[1..].iter().product();
    let inputs = ibody.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = lbody.iter().map(|&l| l as usize).collect();
    Dataset::new(input_len, classes, inputs, labels)
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Input(format!(
        "{stem}[.gz] not found in {}; expected files: {}",
        dir.display(),
        MNIST_FILES.join(", ")
    )))
}

/// Loads the MNIST-format train and test splits from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let p: Vec<PathBuf> = MNIST_FILES.iter().map(|f| find(dir, f)).collect::<Result<_>>()?;
    Ok((load_idx_pair(&p[0], &p[1], 10)?, load_idx_pair(&p[2], &p[3], 10)?))
}

/// Bundled 4000/1000 MNIST subset shipped with the crate.
pub fn bundled_mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/mnist5k")
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of each cluster around its centre.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 16,
            train: 512,
            test: 256,
            spread: 0.6,
            seed: 0,
        }
    }
}

/// Isotropic Gaussian clusters around unit-normal centres.
pub fn gaussian_clusters(spec: &ClusterSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.dim == 0 || !(spec.spread.is_finite() && spec.spread >= 0.0) {
        return Err(Error::Config(format!("invalid cluster spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<f64> = (0..spec.classes * spec.dim).map(|_| unit.sample(&mut rng)).collect();
    let mut make = |n: usize| {
        let mut inputs = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.gen_range(0..spec.classes);
            for d in 0..spec.dim {
                inputs.push(centres[c * spec.dim + d] + spec.spread * unit.sample(&mut rng));
            }
            labels.push(c);
        }
        Dataset::new(spec.dim, spec.classes, inputs, labels)
    };
    Ok((make(spec.train)?, make(spec.test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_subset_loads() {
        let (train, test) = load_mnist_dir(&bundled_mnist_dir()).unwrap();
        assert_eq!((train.len(), test.len()), (4000, 1000));
        assert_eq!(train.input_len, 784);
        assert!(train.input(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut seen = [false; 10];
        for i in 0..train.len() {
            seen[train.label(i)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn idx_errors() {
        assert!(parse_idx_u8(&[0, 0, 9, 1, 0, 0, 0, 1, 5]).is_err());
        assert!(parse_idx_u8(&[0, 0, 8, 1, 0, 0, 0, 2, 5]).is_err());
        let (d, b) = parse_idx_u8(&[0, 0, 8, 1, 0, 0, 0, 1, 5]).unwrap();
        assert_eq!((d, b), (vec![1], &[5u8][..]));
        assert!(load_mnist_dir(Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn clusters_are_deterministic() {
        let a = gaussian_clusters(&ClusterSpec::default()).unwrap();
        let b = gaussian_clusters(&ClusterSpec::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 512);
    }
}
