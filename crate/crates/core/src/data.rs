//! Paired-view datasets: synthetic generators, split-image views, file
//! loaders and deterministic splits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Gain inside `tanh` for [`Nonlinearity::TanhMix`].
pub const TANH_MIX_GAIN: f64 = 3.0;

const BINARY_MAGIC: &[u8; 6] = b"DSCCA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Two views of the same `N` samples, one sample per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPairDataset {
    pub name: String,
    pub view1: Matrix,
    pub view2: Matrix,
    pub splits: Splits,
    pub ground_truth_correlations: Option<Vec<f64>>,
}

impl ViewPairDataset {
    /// All samples go to the training split.
    pub fn new(name: impl Into<String>, view1: Matrix, view2: Matrix) -> Result<Self> {
        if view1.cols() != view2.cols() {
            return Err(Error::dim(format!(
                "view 1 has {} samples, view 2 has {}",
                view1.cols(),
                view2.cols()
            )));
        }
        let n = view1.cols();
        Ok(ViewPairDataset {
            name: name.into(),
            view1,
            view2,
            splits: Splits {
                train: (0..n).collect(),
                ..Splits::default()
            },
            ground_truth_correlations: None,
        })
    }

    pub fn len(&self) -> usize {
        self.view1.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies of both views restricted to one split.
    pub fn split_views(&self, split: Split) -> (Matrix, Matrix) {
        let idx = self.splits.get(split);
        (self.view1.select_columns(idx), self.view2.select_columns(idx))
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        check_splits(&splits, self.len())?;
        self.splits = splits;
        Ok(self)
    }
}

fn check_splits(splits: &Splits, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if i >= n {
            return Err(Error::invalid(format!("split index {i} out of range for {n} samples")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("sample {i} appears in more than one split")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    None,
    TanhMix,
}

/// Two views sharing `latent_dim` Gaussian latents. Latent pair `k` is
/// `√ρₖ·zₖ + √(1−ρₖ)·εⱼₖ` in view `j`, so its correlation is exactly `ρₖ`.
/// Remaining dimensions are independent noise, and each view is rotated by
/// its own random orthogonal matrix. `TanhMix` then applies
/// `tanh(TANH_MIX_GAIN · x)` element-wise.
pub fn synth_correlated(
    n_samples: usize,
    latent_dim: usize,
    dims: (usize, usize),
    targets: &[f64],
    nonlinearity: Nonlinearity,
    seed: u64,
) -> Result<ViewPairDataset> {
    let (n1, n2) = dims;
    if latent_dim == 0 || latent_dim > n1.min(n2) {
        return Err(Error::invalid(format!(
            "latent_dim {latent_dim} must be in 1..={}",
            n1.min(n2)
        )));
    }
    if targets.len() != latent_dim {
        return Err(Error::invalid(format!(
            "{} target correlations for latent_dim {latent_dim}",
            targets.len()
        )));
    }
    if targets.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::invalid("target correlations must lie in (0, 1]"));
    }
    if targets.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid("target correlations must be descending"));
    }
    if n_samples < 2 {
        return Err(Error::invalid("need at least 2 samples"));
    }
    let mut rng = crate::rng::stream(seed, 20);
    let z = gaussian(latent_dim, n_samples, &mut rng);
    let make_view = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let noise = gaussian(n, n_samples, rng);
        let latent = Matrix::from_fn(n, n_samples, |k, i| {
            if k < latent_dim {
                let rho = targets[k];
                rho.sqrt() * z[(k, i)] + (1.0 - rho).sqrt() * noise[(k, i)]
            } else {
                noise[(k, i)]
            }
        });
        let q = random_orthogonal(n, rng);
        let mut x = q.matmul(&latent);
        if nonlinearity == Nonlinearity::TanhMix {
            x = x.map(|v| (TANH_MIX_GAIN * v).tanh());
        }
        x
    };
    let view1 = make_view(n1, &mut rng);
    let view2 = make_view(n2, &mut rng);
    let mut ds = ViewPairDataset::new(format!("synth_correlated_{seed}"), view1, view2)?;
    ds.ground_truth_correlations = Some(targets.to_vec());
    Ok(ds)
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let mut q = gaussian(n, n, rng);
    for j in 0..n {
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = q.col(j).iter().zip(q.col(k)).map(|(a, b)| a * b).sum();
                let qk = q.col(k).to_vec();
                for (a, b) in q.col_mut(j).iter_mut().zip(qk) {
                    *a -= dot * b;
                }
            }
        }
        let norm = q.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        q.col_mut(j).iter_mut().for_each(|v| *v /= norm);
    }
    q
}

/// Left and right halves of `h×w` images stored row-major in each column.
pub fn split_halves(images: &Matrix, h: usize, w: usize) -> Result<ViewPairDataset> {
    if w % 2 != 0 {
        return Err(Error::invalid(format!("image width {w} is odd")));
    }
    if h * w != images.rows() {
        return Err(Error::dim(format!(
            "{h}x{w} images need {} rows, got {}",
            h * w,
            images.rows()
        )));
    }
    let half = w / 2;
    let n = images.cols();
    let view1 = Matrix::from_fn(h * half, n, |p, i| images[((p / half) * w + p % half, i)]);
    let view2 = Matrix::from_fn(h * half, n, |p, i| images[((p / half) * w + half + p % half, i)]);
    ViewPairDataset::new("split_halves", view1, view2)
}

/// Inverse of [`split_halves`].
pub fn join_halves(left: &Matrix, right: &Matrix, h: usize, w: usize) -> Result<Matrix> {
    let half = w / 2;
    if left.shape() != right.shape() || left.rows() != h * half || w % 2 != 0 {
        return Err(Error::dim("halves do not match the image shape"));
    }
    Ok(Matrix::from_fn(h * w, left.cols(), |p, i| {
        let (r, c) = (p / w, p % w);
        if c < half {
            left[(r * half + c, i)]
        } else {
            right[(r * half + c - half, i)]
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// First line holds the feature count; each following line is one sample.
    Csv,
    /// `DSCCA1`, `u32` rows, `u32` cols, then little-endian `f64` column-major.
    Binary,
}

pub fn load_views(path1: &Path, path2: &Path, format: DataFormat) -> Result<ViewPairDataset> {
    let read = |p: &Path| match format {
        DataFormat::Csv => read_csv(p),
        DataFormat::Binary => read_binary(p),
    };
    let (v1, v2) = (read(path1)?, read(path2)?);
    if v1.cols() != v2.cols() {
        return Err(Error::format(
            path2.display().to_string(),
            format!("{} samples, but {} has {}", v2.cols(), path1.display(), v1.cols()),
        ));
    }
    ViewPairDataset::new(
        path1.file_stem().map_or("views".into(), |s| s.to_string_lossy().into_owned()),
        v1,
        v2,
    )
}

pub fn read_csv(path: &Path) -> Result<Matrix> {
    let name = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let dim = loop {
        match lines.next() {
            None => return Err(Error::format(format!("{name}:1"), "missing header")),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break line.trim().parse::<usize>().map_err(|_| {
                    Error::format(
                        format!("{name}:{}", i + 1),
                        format!("header must be a feature count, got {:?}", line.trim()),
                    )
                })?;
            }
        }
    };
    if dim == 0 {
        return Err(Error::format(format!("{name}:1"), "feature count is 0"));
    }
    let mut data = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(format!("{name}:{}", i + 1), format!("not a number: {:?}", field.trim()))
            })?;
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(Error::format(
                format!("{name}:{}", i + 1),
                format!("expected {dim} values, found {}", data.len() - before),
            ));
        }
    }
    let n = data.len() / dim;
    Matrix::from_col_major(dim, n, data)
}

pub fn write_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", m.rows())?;
    for j in 0..m.cols() {
        let row: Vec<String> = m.col(j).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Matrix> {
    let name = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 14 || &bytes[..6] != BINARY_MAGIC {
        return Err(Error::format(format!("{name}@0"), "bad magic, expected DSCCA1"));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = 14 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            format!("{name}@{}", bytes.len().min(expected)),
            format!("{rows}x{cols} payload needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data = bytes[14..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_col_major(rows, cols, data)
}

pub fn write_binary(path: &Path, m: &Matrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::invalid("too many rows"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::invalid("too many columns"))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole file, inflating it when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_header(bytes: &[u8], name: &str, kind: u8, ndim: u8) -> Result<Vec<usize>> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != kind || bytes[3] != ndim {
        return Err(Error::format(format!("{name}@0"), "not an unsigned-byte IDX file of the expected rank"));
    }
    let end = 4 + 4 * ndim as usize;
    if bytes.len() < end {
        return Err(Error::format(format!("{name}@{}", bytes.len()), "truncated header"));
    }
    Ok(bytes[4..end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect())
}

/// IDX image file (optionally gzipped) as a `(h·w) × N` matrix with pixels
/// in `[0, 1]`. Returns the matrix and `(h, w)`.
pub fn read_idx_images(path: &Path) -> Result<(Matrix, usize, usize)> {
    let name = path.display().to_string();
    let bytes = read_maybe_gz(path)?;
    let dims = idx_header(&bytes, &name, 0x08, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::format(
            format!("{name}@16"),
            format!("expected {} pixel bytes, found {}", n * h * w, body.len()),
        ));
    }
    let data = body.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((Matrix::from_col_major(h * w, n, data)?, h, w))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let name = path.display().to_string();
    let bytes = read_maybe_gz(path)?;
    let dims = idx_header(&bytes, &name, 0x08, 1)?;
    let body = &bytes[8..];
    if body.len() != dims[0] {
        return Err(Error::format(
            format!("{name}@8"),
            format!("expected {} labels, found {}", dims[0], body.len()),
        ));
    }
    Ok(body.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Fractions of the dataset, each rounded to the nearest count.
    Fractions(f64, f64, f64),
    Counts(usize, usize, usize),
}

/// Shuffles the sample indices with `seed` and carves out train, validation
/// and test splits in that order. Samples beyond the requested counts are unused.
pub fn make_splits(dataset: ViewPairDataset, spec: SplitSpec, seed: u64) -> Result<ViewPairDataset> {
    let n = dataset.len();
    let (a, b, c) = match spec {
        SplitSpec::Counts(a, b, c) => (a, b, c),
        SplitSpec::Fractions(fa, fb, fc) => {
            if [fa, fb, fc].iter().any(|f| !(0.0..=1.0).contains(f)) {
                return Err(Error::invalid("split fractions must lie in [0, 1]"));
            }
            let r = |f: f64| (f * n as f64).round() as usize;
            (r(fa), r(fb), r(fc))
        }
    };
    if a + b + c > n {
        return Err(Error::invalid(format!(
            "splits of {a} + {b} + {c} samples exceed the {n} available"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng::stream(seed, 11));
    let splits = Splits {
        train: idx[..a].to_vec(),
        val: idx[a..a + b].to_vec(),
        test: idx[a + b..a + b + c].to_vec(),
    };
    dataset.with_splits(splits)
}
