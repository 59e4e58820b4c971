//! Synthetic regression sets, MNIST ingestion and label randomization.
//!
//! Noise comes from [`SeededRng`] on the `NOISE` stream (ChaCha8 with
//! Box–Muller normals), so a `(generator, params, seed)` triple always yields
//! the same bytes.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{streams, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub meta: DatasetMeta,
}

/// Clean target functions of the regression experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFn {
    /// `g(x) = 10 + 1.22x²`.
    Quadratic,
    /// `h(x) = g(x) + 1.22(x+4)³` left of 0, `g(x)` otherwise.
    Cubic,
}

impl TargetFn {
    pub fn eval(self, x: f64) -> f64 {
        let g = 10.0 + 1.22 * x * x;
        match self {
            TargetFn::Quadratic => g,
            TargetFn::Cubic if x < 0.0 => g + 1.22 * (x + 4.0).powi(3),
            TargetFn::Cubic => g,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetFn::Quadratic => "quadratic",
            TargetFn::Cubic => "cubic",
        }
    }
}

impl std::str::FromStr for TargetFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(TargetFn::Quadratic),
            "cubic" | "cubic_mix" => Ok(TargetFn::Cubic),
            other => Err(Error::invalid(format!(
                "unknown function {other:?} (expected quadratic or cubic)"
            ))),
        }
    }
}

/// `n` evenly spaced points from `lo` to `hi`, both included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

fn check_grid(n: usize, lo: f64, hi: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("need n >= 2 grid points, got {n}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid(format!("need finite lo < hi, got ({lo}, {hi})")));
    }
    Ok(())
}

/// Noisy samples of `f` on a uniform grid: `y = f(x) + ε`, `ε ~ N(0, sigma²)`.
pub fn gen_regression(f: TargetFn, n: usize, lo: f64, hi: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    check_grid(n, lo, hi)?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let xs = linspace(lo, hi, n);
    let mut rng = SeededRng::stream(seed, streams::NOISE);
    let ys: Vec<f64> = xs.iter().map(|&x| f.eval(x) + sigma * rng.normal()).collect();
    Ok(Dataset {
        inputs: Matrix::column(&xs),
        targets: Matrix::column(&ys),
        meta: DatasetMeta {
            name: f.name().into(),
            seed: Some(seed),
            params: serde_json::json!({"n": n, "lo": lo, "hi": hi, "sigma": sigma}),
        },
    })
}

pub fn gen_quadratic(n: usize, lo: f64, hi: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    gen_regression(TargetFn::Quadratic, n, lo, hi, sigma, seed)
}

pub fn gen_cubic_mix(n: usize, lo: f64, hi: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    gen_regression(TargetFn::Cubic, n, lo, hi, sigma, seed)
}

/// Noise-free evaluation grid.
pub fn test_grid(f: TargetFn, lo: f64, hi: f64, n: usize) -> Result<Dataset> {
    check_grid(n, lo, hi)?;
    let xs = linspace(lo, hi, n);
    let ys: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
    Ok(Dataset {
        inputs: Matrix::column(&xs),
        targets: Matrix::column(&ys),
        meta: DatasetMeta {
            name: format!("{}_test_grid", f.name()),
            seed: None,
            params: serde_json::json!({"n": n, "lo": lo, "hi": hi}),
        },
    })
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix, name: &str) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::DimensionMismatch {
                op: "dataset",
                left: inputs.shape(),
                right: targets.shape(),
            });
        }
        Ok(Self {
            inputs,
            targets,
            meta: DatasetMeta {
                name: name.into(),
                seed: None,
                params: serde_json::Value::Null,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn dim_out(&self) -> usize {
        self.targets.cols()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let pick = |m: &Matrix| {
            let mut out = Matrix::zeros(rows.len(), m.cols());
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(m.row(r));
            }
            out
        };
        Dataset {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            meta: self.meta.clone(),
        }
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let rows: Vec<usize> = (start.min(self.len())..end.min(self.len())).collect();
        self.select(&rows)
    }

    /// Class index of each one-hot target row.
    pub fn labels(&self) -> Result<Vec<usize>> {
        (0..self.len())
            .map(|r| one_hot_index(self.targets.row(r)).ok_or_else(|| Error::invalid(format!("row {r} is not one-hot"))))
            .collect()
    }

    /// SHA-256 of the canonical CSV encoding, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        self.write_csv_to(&mut bytes).expect("in-memory write");
        hex(&Sha256::digest(&bytes))
    }

    fn write_csv_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.dim_in())
            .map(|i| format!("x{i}"))
            .chain((0..self.dim_out()).map(|i| format!("y{i}")))
            .collect();
        wr.write_record(&header)?;
        for r in 0..self.len() {
            let rec: Vec<String> = self
                .inputs
                .row(r)
                .iter()
                .chain(self.targets.row(r))
                .map(|v| format!("{v:?}"))
                .collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// CSV with header `x0,…,y0,…`; floats use the shortest exact representation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }

    /// Reads a CSV written by [`Dataset::write_csv`]; the header decides which
    /// columns are inputs (`x*`) and targets (`y*`).
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?.clone();
        let kinds: Vec<bool> = header
            .iter()
            .map(|h| match h.chars().next() {
                Some('x') => Ok(true),
                Some('y') => Ok(false),
                _ => Err(Error::invalid(format!(
                    "{}: column {h:?} is neither x* nor y*",
                    path.display()
                ))),
            })
            .collect::<Result<_>>()?;
        let dim_in = kinds.iter().filter(|&&k| k).count();
        let dim_out = kinds.len() - dim_in;
        let (mut xs, mut ys, mut n) = (Vec::new(), Vec::new(), 0);
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            for (field, &is_x) in rec.iter().zip(&kinds) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(format!("{}: row {}: bad number {field:?}", path.display(), line + 1))
                })?;
                if is_x { xs.push(v) } else { ys.push(v) }
            }
            n += 1;
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::new(Matrix::new(n, dim_in, xs)?, Matrix::new(n, dim_out, ys)?, &name)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes, as lowercase hex.
pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut idx = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    idx
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::Idx {
            path: path.to_path_buf(),
            message: format!("gzip: {e}"),
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Idx {
        path: PathBuf::from(path),
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Loads IDX image and label files (optionally gzipped). Pixels are scaled
/// to `[0, 1]`; labels become one-hot rows of width 10.
pub fn mnist_load(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path)?;
    if img.len() < 16 {
        return Err(idx_err(images_path, format!("{} bytes is too short for a header", img.len())));
    }
    if lab.len() < 8 {
        return Err(idx_err(labels_path, format!("{} bytes is too short for a header", lab.len())));
    }
    if be_u32(&img, 0) != 0x0803 {
        return Err(idx_err(images_path, format!("bad magic {:#010x}", be_u32(&img, 0))));
    }
    if be_u32(&lab, 0) != 0x0801 {
        return Err(idx_err(labels_path, format!("bad magic {:#010x}", be_u32(&lab, 0))));
    }
    let n = be_u32(&img, 4) as usize;
    let (rows, cols) = (be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    let pixels = rows * cols;
    if img.len() != 16 + n * pixels {
        return Err(idx_err(
            images_path,
            format!("expected {} bytes for {n} images of {rows}x{cols}, found {}", 16 + n * pixels, img.len()),
        ));
    }
    let n_labels = be_u32(&lab, 4) as usize;
    if n_labels != n {
        return Err(idx_err(labels_path, format!("{n_labels} labels for {n} images")));
    }
    if lab.len() != 8 + n {
        return Err(idx_err(labels_path, format!("expected {} bytes, found {}", 8 + n, lab.len())));
    }
    let inputs: Vec<f64> = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let mut targets = vec![0.0; n * 10];
    for (i, &l) in lab[8..].iter().enumerate() {
        if l > 9 {
            return Err(idx_err(labels_path, format!("label {l} at row {i} is not a digit")));
        }
        targets[i * 10 + l as usize] = 1.0;
    }
    Ok(Dataset {
        inputs: Matrix::new(n, pixels, inputs)?,
        targets: Matrix::new(n, 10, targets)?,
        meta: DatasetMeta {
            name: "mnist".into(),
            seed: None,
            params: serde_json::json!({"rows": rows, "cols": cols, "n": n}),
        },
    })
}

/// Replaces every one-hot target with a uniformly random class.
pub fn randomize_labels(ds: &Dataset, seed: u64) -> Result<Dataset> {
    ds.labels()?;
    let k = ds.dim_out();
    let mut out = ds.clone();
    out.meta.name = format!("{}_random_labels", ds.meta.name);
    out.meta.seed = Some(seed);
    if k <= 1 {
        return Ok(out);
    }
    let mut rng = SeededRng::stream(seed, streams::LABELS);
    for r in 0..out.len() {
        let row = out.targets.row_mut(r);
        row.iter_mut().for_each(|v| *v = 0.0);
        row[rng.below(k)] = 1.0;
    }
    Ok(out)
}
