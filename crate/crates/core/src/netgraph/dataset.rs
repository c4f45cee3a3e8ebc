use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{LipError, Result};
use crate::linop::Vector;
use crate::rng::{stream_rng, Stream};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// Flattened inputs with integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vector>,
    pub labels: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Vector>,
        labels: Vec<usize>,
        input_shape: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(LipError::InvalidDataset("dataset must hold at least one sample".into()));
        }
        if inputs.len() != labels.len() {
            return Err(LipError::InvalidDataset(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let dim: usize = input_shape.iter().product();
        if let Some(bad) = inputs.iter().position(|x| x.len() != dim) {
            return Err(LipError::InvalidDataset(format!(
                "sample {bad} has {} features, expected {dim}",
                inputs[bad].len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&y| y >= num_classes) {
            return Err(LipError::InvalidDataset(format!(
                "label {} of sample {bad} is out of range for {num_classes} classes",
                labels[bad]
            )));
        }
        Ok(Dataset { inputs, labels, input_shape, num_classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(n);
        let head = self.take(cut);
        let tail = Dataset {
            inputs: self.inputs[cut..].to_vec(),
            labels: self.labels[cut..].to_vec(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
        };
        (head, tail)
    }
}

fn open(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| LipError::io(path, e))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    }
    .map_err(|e| LipError::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LipError::InvalidDataset(format!("{}: truncated header", path.display())))
}

/// Reads an IDX image/label pair (optionally gzip-compressed).
///
/// Pixels are scaled by 1/255. With `class_filter`, only the listed classes
/// are kept and relabelled `0..m` in ascending class order; `limit` then
/// truncates the result.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
    class_filter: Option<&BTreeSet<usize>>,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = open(ip)?;
    let lab = open(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != IMAGES_MAGIC {
        return Err(LipError::InvalidDataset(format!(
            "{}: bad magic {magic}, expected {IMAGES_MAGIC}",
            ip.display()
        )));
    }
    let magic = be_u32(&lab, 0, lp)?;
    if magic != LABELS_MAGIC {
        return Err(LipError::InvalidDataset(format!(
            "{}: bad magic {magic}, expected {LABELS_MAGIC}",
            lp.display()
        )));
    }
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let n_labels = be_u32(&lab, 4, lp)? as usize;
    if n != n_labels {
        return Err(LipError::InvalidDataset(format!(
            "count mismatch: {n} images but {n_labels} labels"
        )));
    }
    let dim = rows * cols;
    if img.len() < 16 + n * dim {
        return Err(LipError::InvalidDataset(format!(
            "{}: truncated payload ({} of {} bytes)",
            ip.display(),
            img.len() - 16,
            n * dim
        )));
    }
    if lab.len() < 8 + n {
        return Err(LipError::InvalidDataset(format!("{}: truncated payload", lp.display())));
    }

    let raw_labels = &lab[8..8 + n];
    let relabel: Option<Vec<usize>> = class_filter.map(|set| set.iter().copied().collect());
    let num_classes = match &relabel {
        Some(classes) => classes.len(),
        None => raw_labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2),
    };
    let cap = limit.unwrap_or(usize::MAX);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, &raw) in raw_labels.iter().enumerate() {
        if inputs.len() >= cap {
            break;
        }
        let label = match &relabel {
            Some(classes) => match classes.iter().position(|&c| c == raw as usize) {
                Some(p) => p,
                None => continue,
            },
            None => raw as usize,
        };
        let px = &img[16 + i * dim..16 + (i + 1) * dim];
        inputs.push(Vector::from_iterator(dim, px.iter().map(|&b| b as f64 / 255.0)));
        labels.push(label);
    }
    Dataset::new(inputs, labels, vec![rows, cols], num_classes)
}

/// Writes a dataset back to IDX, quantising features to bytes. Paths ending
/// in `.gz` are compressed.
pub fn write_idx(
    data: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (rows, cols) = match data.input_shape[..] {
        [r, c] => (r, c),
        [d] => (1, d),
        _ => {
            return Err(LipError::Unsupported(format!(
                "IDX export needs a 1-D or 2-D input shape, got {:?}",
                data.input_shape
            )))
        }
    };
    let mut img = Vec::with_capacity(16 + data.len() * rows * cols);
    for v in [IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for x in &data.inputs {
        img.extend(x.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    write_bytes(images_path.as_ref(), &img)?;
    write_bytes(labels_path.as_ref(), &lab)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| LipError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| LipError::io(path, e))?;
        enc.finish().map_err(|e| LipError::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| LipError::io(path, e))?;
    }
    Ok(())
}

/// Two interleaved unit half-circles with Gaussian noise.
///
/// The first `n/2` points (label 0) lie on the upper circle centred at the
/// origin, the rest (label 1) on the lower circle centred at `(1, 0.5)`;
/// samples are then shuffled.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(LipError::InvalidArgument("two moons needs n >= 2".into()));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(LipError::InvalidArgument("noise must be finite and >= 0".into()));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let angle = |i: usize, m: usize| {
        if m > 1 {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        } else {
            0.0
        }
    };
    let mut points = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        points.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).unwrap();
        for (p, _) in points.iter_mut() {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    points.shuffle(&mut rng);
    let (inputs, labels) = points
        .into_iter()
        .map(|(p, l)| (Vector::from_vec(p.to_vec()), l))
        .unzip();
    Dataset::new(inputs, labels, vec![2], 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(dir: &Path, n: u32, label_n: u32, pixels: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        let mut img = Vec::new();
        for v in [IMAGES_MAGIC, n, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [LABELS_MAGIC, label_n] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn loads_scales_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = vec![255, 0, 0, 0, 1, 2, 3, 4, 9, 9, 9, 9];
        let (ip, lp) = idx_pair(dir.path(), 3, 3, &px, &[7, 0, 1]);
        let all = load_idx(&ip, &lp, None, None).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all.input_dim(), 4);
        assert_eq!(all.inputs[0][0], 1.0);
        assert_eq!(all.labels, vec![7, 0, 1]);

        let filter: BTreeSet<usize> = [1, 7].into_iter().collect();
        let sub = load_idx(&ip, &lp, None, Some(&filter)).unwrap();
        assert_eq!(sub.labels, vec![1, 0]);
        assert_eq!(sub.num_classes, 2);
        assert_eq!(sub.inputs[1][0], 9.0 / 255.0);

        let limited = load_idx(&ip, &lp, Some(2), None).unwrap();
        assert_eq!(limited.len(), 2);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 3, 2, &[0; 12], &[0, 1]);
        assert!(load_idx(&ip, &lp, None, None).unwrap_err().to_string().contains("count mismatch"));
        let (ip, lp) = idx_pair(dir.path(), 3, 3, &[0; 11], &[0, 1, 1]);
        assert!(load_idx(&ip, &lp, None, None).unwrap_err().to_string().contains("truncated"));
        let (ip, lp) = idx_pair(dir.path(), 1, 1, &[0; 4], &[0]);
        assert!(load_idx(&lp, &ip, None, None).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn gz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_two_moons(10, 0.0, 1).unwrap();
        let shifted = Dataset {
            inputs: data.inputs.iter().map(|x| x.map(|v| ((v + 1.5) / 4.0 * 255.0).round() / 255.0)).collect(),
            ..data
        };
        let ip = dir.path().join("i.gz");
        let lp = dir.path().join("l.gz");
        write_idx(&shifted, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, None, None).unwrap();
        assert_eq!(back.labels, shifted.labels);
        for (a, b) in back.inputs.iter().zip(&shifted.inputs) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn noiseless_moons_lie_on_circles() {
        let d = gen_two_moons(4, 0.0, 0).unwrap();
        assert_eq!(d.labels.iter().filter(|&&l| l == 0).count(), 2);
        for (x, &l) in d.inputs.iter().zip(&d.labels) {
            let r = if l == 0 { x.norm() } else { ((x[0] - 1.0).powi(2) + (x[1] - 0.5).powi(2)).sqrt() };
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert_eq!(gen_two_moons(50, 0.1, 9).unwrap(), gen_two_moons(50, 0.1, 9).unwrap());
        assert!(gen_two_moons(1, 0.0, 0).is_err());
    }
}
