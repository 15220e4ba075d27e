//! Datasets: IDX image/label files, synthetic regression problems, batching.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { ids: Vec<usize>, num_classes: usize },
    /// `[N × outputs]`
    Values(Tensor),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N × …]`
    pub inputs: Tensor,
    pub targets: Targets,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, split: Split) -> Result<Self> {
        let n = inputs.shape()[0];
        let m = match &targets {
            Targets::Classes { ids, num_classes } => {
                if let Some(bad) = ids.iter().find(|&&c| c >= *num_classes) {
                    return Err(Error::Config(format!(
                        "class id {bad} out of range for {num_classes} classes"
                    )));
                }
                ids.len()
            }
            Targets::Values(t) => t.shape()[0],
        };
        if n != m {
            return Err(Error::Config(format!("{n} inputs but {m} targets")));
        }
        Ok(Dataset { inputs, targets, split })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Rows `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, BatchTargets)> {
        let inputs = gather_rows(&self.inputs, indices)?;
        let targets = match &self.targets {
            Targets::Classes { ids, .. } => BatchTargets::Classes(indices.iter().map(|&i| ids[i]).collect()),
            Targets::Values(t) => BatchTargets::Values(gather_rows(t, indices)?),
        };
        Ok((inputs, targets))
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, targets) = self.gather(&idx)?;
        let targets = match (targets, &self.targets) {
            (BatchTargets::Classes(ids), Targets::Classes { num_classes, .. }) => Targets::Classes {
                ids,
                num_classes: *num_classes,
            },
            (BatchTargets::Values(t), _) => Targets::Values(t),
            _ => unreachable!("gather keeps the target kind"),
        };
        Dataset::new(inputs, targets, self.split)
    }

    /// Per-dataset mean/std standardization of the inputs.
    pub fn standardized(&self, mean: f64, std: f64) -> Result<Dataset> {
        let data = self.inputs.data().iter().map(|v| (v - mean) / std).collect();
        Dataset::new(Tensor::new(self.inputs.shape(), data)?, self.targets.clone(), self.split)
    }
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxFile {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse_idx(path: &Path, expected_magic: u32, rank: usize) -> Result<IdxFile> {
    let bytes = read_maybe_gz(path)?;
    let err = |kind| Error::Parse {
        path: path.to_path_buf(),
        kind,
    };
    let header = 4 * (1 + rank);
    if bytes.len() < header {
        return Err(err(ParseErrorKind::Truncated {
            expected: header,
            found: bytes.len(),
        }));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let magic = word(0);
    if magic != expected_magic {
        return Err(err(ParseErrorKind::BadMagic {
            found: magic,
            expected: expected_magic,
        }));
    }
    let dims: Vec<usize> = (1..=rank).map(|i| word(i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(err(ParseErrorKind::Truncated {
            expected,
            found: bytes.len(),
        }));
    }
    Ok(IdxFile {
        payload: bytes[header..expected].to_vec(),
        dims,
    })
}

/// Loads an IDX image file (`u8`, N×rows×cols) and its label file (`u8`, N).
/// Pixels are scaled to `[0, 1]`; gzip-compressed files are detected and
/// decompressed. Returns a `[N × 1 × rows × cols]` dataset with 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let labels = parse_idx(labels_path, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            kind: ParseErrorKind::CountMismatch {
                expected: n,
                found: labels.dims[0],
            },
        });
    }
    let pixels = images.payload.iter().map(|&p| f64::from(p) / 255.0).collect();
    let ids: Vec<usize> = labels.payload.iter().map(|&l| usize::from(l)).collect();
    let num_classes = ids.iter().max().map_or(10, |&m| (m + 1).max(10));
    let inputs = Tensor::new(&[n, 1, rows, cols], pixels)?;
    Dataset::new(inputs, Targets::Classes { ids, num_classes }, split)
}

/// Standard MNIST-family file names under `dir`, with or without `.gz`.
pub fn load_idx_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |stem: String| {
        let plain = dir.join(&stem);
        let gz = dir.join(format!("{stem}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    };
    load_idx(
        &find(format!("{prefix}-images-idx3-ubyte")),
        &find(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Writes an IDX image file and label file. Pixels are `round(255·v)`.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = dataset.inputs.shape();
    let Targets::Classes { ids, .. } = &dataset.targets else {
        return Err(Error::Config("IDX output needs class targets".into()));
    };
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    let mut img = Vec::with_capacity(16 + dataset.inputs.numel());
    for w in [IDX_IMAGES_MAGIC, s[0] as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    img.extend(
        dataset
            .inputs
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + ids.len());
    for w in [IDX_LABELS_MAGIC, ids.len() as u32] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend(ids.iter().map(|&c| c as u8));
    for (path, bytes) in [(images_path, img), (labels_path, lab)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFn {
    Sum,
    SinSum,
    Prod,
    SinProd,
}

impl TargetFn {
    pub const ALL: [TargetFn; 4] = [TargetFn::Sum, TargetFn::SinSum, TargetFn::Prod, TargetFn::SinProd];

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            TargetFn::Sum => x.iter().sum(),
            TargetFn::SinSum => x.iter().sum::<f64>().sin(),
            TargetFn::Prod => x.iter().product(),
            TargetFn::SinProd => x.iter().product::<f64>().sin(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetFn::Sum => "sum",
            TargetFn::SinSum => "sin_sum",
            TargetFn::Prod => "prod",
            TargetFn::SinProd => "sin_prod",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    #[serde(default = "RegressionSpec::default_vars")]
    pub num_vars: usize,
    pub target: TargetFn,
    #[serde(default = "RegressionSpec::default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "RegressionSpec::default_samples")]
    pub train_samples: usize,
    #[serde(default = "RegressionSpec::default_samples")]
    pub test_samples: usize,
    /// Inputs are uniform on `[-input_range, input_range]`.
    #[serde(default = "RegressionSpec::default_range")]
    pub input_range: f64,
}

impl RegressionSpec {
    fn default_vars() -> usize {
        8
    }

    fn default_noise() -> f64 {
        0.2
    }

    fn default_samples() -> usize {
        512
    }

    fn default_range() -> f64 {
        1.0
    }

    pub fn new(target: TargetFn) -> Self {
        RegressionSpec {
            num_vars: Self::default_vars(),
            target,
            noise_sigma: Self::default_noise(),
            train_samples: Self::default_samples(),
            test_samples: Self::default_samples(),
            input_range: Self::default_range(),
        }
    }
}

fn gen_split(spec: &RegressionSpec, n: usize, rng: &mut impl Rng, split: Split) -> Result<Dataset> {
    let d = spec.num_vars;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma {}: {e}", spec.noise_sigma)))?;
    let r = spec.input_range;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-r..=r)).collect();
        let eps = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        ys.push(spec.target.eval(&x) + eps);
        xs.extend(x);
    }
    Dataset::new(
        Tensor::new(&[n, d], xs)?,
        Targets::Values(Tensor::new(&[n, 1], ys)?),
        split,
    )
}

/// Train and test sets for `y = f(x) + ε`, `ε ~ N(0, σ²)`. Pure in `(spec, seed)`.
pub fn gen_regression(spec: &RegressionSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.num_vars == 0 || spec.train_samples == 0 || spec.test_samples == 0 {
        return Err(Error::Config("regression spec needs positive sizes".into()));
    }
    let train = gen_split(spec, spec.train_samples, &mut seed::rng(seed, Stream::Data), Split::Train)?;
    let test = gen_split(spec, spec.test_samples, &mut seed::rng(seed, Stream::TestData), Split::Test)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Tensor),
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: BatchTargets,
}

/// One epoch of mini-batches. The final batch may be short.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Iterates `dataset` in batches of `batch_size`, in a seeded random order
/// when `rng` is given and in storage order otherwise.
pub fn batches<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: Option<&mut R>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let (inputs, targets) = self
            .dataset
            .gather(&self.order[self.pos..end])
            .expect("indices in range");
        self.pos = end;
        Some(Batch { inputs, targets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_classes(n: usize) -> Dataset {
        let inputs = Tensor::new(&[n, 1, 2, 2], (0..4 * n).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap();
        let ids = (0..n).map(|i| i % 10).collect();
        Dataset::new(inputs, Targets::Classes { ids, num_classes: 10 }, Split::Train).unwrap()
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = tiny_classes(10);
        let sizes: Vec<usize> = batches::<rand_chacha::ChaCha8Rng>(&ds, 3, None)
            .unwrap()
            .map(|b| b.inputs.shape()[0])
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let labels: Vec<usize> = batches::<rand_chacha::ChaCha8Rng>(&ds, 4, None)
            .unwrap()
            .flat_map(|b| match b.targets {
                BatchTargets::Classes(c) => c,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        assert!(batches::<rand_chacha::ChaCha8Rng>(&ds, 0, None).is_err());
    }

    #[test]
    fn shuffled_epoch_is_a_permutation() {
        let ds = tiny_classes(25);
        let mut rng = seed::rng(1, Stream::Shuffle);
        let mut seen: Vec<usize> = batches(&ds, 7, Some(&mut rng))
            .unwrap()
            .flat_map(|b| match b.targets {
                BatchTargets::Classes(c) => c,
                _ => unreachable!(),
            })
            .collect();
        seen.sort_unstable();
        let mut expect: Vec<usize> = (0..25).map(|i| i % 10).collect();
        expect.sort_unstable();
        assert_eq!(seen, expect);
    }

    #[test]
    fn noiseless_targets() {
        let mut spec = RegressionSpec::new(TargetFn::Sum);
        spec.noise_sigma = 0.0;
        assert!((TargetFn::Sum.eval(&[0.1; 8]) - 0.8).abs() < 1e-15);
        let mut x = [0.3; 8];
        x[4] = 0.0;
        assert_eq!(TargetFn::SinProd.eval(&x), 0.0);
        let (train, _) = gen_regression(&spec, 4).unwrap();
        let Targets::Values(y) = &train.targets else { panic!() };
        for (row, y) in train.inputs.data().chunks(8).zip(y.data()) {
            assert_eq!(TargetFn::Sum.eval(row), *y);
            assert!(row.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn regression_is_pure_in_seed() {
        let spec = RegressionSpec::new(TargetFn::SinSum);
        let (a, at) = gen_regression(&spec, 9).unwrap();
        let (b, bt) = gen_regression(&spec, 9).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.targets, b.targets);
        assert_eq!(at.inputs, bt.inputs);
        assert_ne!(a.inputs, at.inputs);
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("spinal-idx-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let (img, lab) = (dir.join("img"), dir.join("lab"));
        let ds = tiny_classes(12);
        write_idx(&ds, &img, &lab).unwrap();
        let back = load_idx(&img, &lab, Split::Train).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.targets, ds.targets);

        // label count mismatch
        let short = ds.head(5).unwrap();
        let lab5 = dir.join("lab5");
        write_idx(&short, &dir.join("img5"), &lab5).unwrap();
        let err = load_idx(&img, &lab5, Split::Train).unwrap_err();
        assert!(matches!(
            err,
            Error::Parse { kind: ParseErrorKind::CountMismatch { expected: 12, found: 5 }, .. }
        ));
        assert!(err.to_string().contains("lab5"));

        // swapped files: bad magic
        assert!(matches!(
            load_idx(&lab, &img, Split::Train),
            Err(Error::Parse { kind: ParseErrorKind::BadMagic { .. }, .. })
        ));

        // truncated payload
        let bytes = fs::read(&img).unwrap();
        let cut = dir.join("cut");
        fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_idx(&cut, &lab, Split::Train),
            Err(Error::Parse { kind: ParseErrorKind::Truncated { .. }, .. })
        ));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;

        let dir = std::env::temp_dir().join(format!("spinal-gz-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let (img, lab) = (dir.join("i"), dir.join("l"));
        let ds = tiny_classes(3);
        write_idx(&ds, &img, &lab).unwrap();
        let gz = dir.join("i.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&fs::read(&img).unwrap()).unwrap();
        fs::write(&gz, enc.finish().unwrap()).unwrap();
        let back = load_idx(&gz, &lab, Split::Test).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        fs::remove_dir_all(&dir).ok();
    }
}
