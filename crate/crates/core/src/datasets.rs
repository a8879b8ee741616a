//! Seeded reference and target samplers, plus an MNIST IDX loader.
//!
//! Every sampler is a pure function of its parameters and seed.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Matrix;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown target kind `{0}`")]
    UnknownKind(String),
    #[error("bad target parameter `{key}`: {reason}")]
    BadParam { key: String, reason: String },
    #[error("bad IDX magic number {0:#010x}")]
    BadMagic(u32),
    #[error("IDX file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("requested {requested} samples but the file holds {available}")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `n` draws from the standard normal in `R^d`.
pub fn sample_reference(d: usize, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(d, n, &mut rng)
}

pub(crate) fn standard_normal<R: Rng>(d: usize, n: usize, rng: &mut R) -> Matrix {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

/// Seeded orthogonal `d x d` matrix (Gram-Schmidt on a Gaussian matrix).
pub fn random_rotation(d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = standard_normal(d, d, &mut rng);
    for i in 0..d {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let rj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

/// Target distributions for the flow.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    /// Isotropic Gaussian.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// `k` isotropic components evenly spaced on a circle in the plane.
    GaussianMixture { k: usize, radius: f64, std: f64 },
    /// Circle of radius `radius` in the first two coordinates of
    /// `R^embed_dim`, optionally rotated by a seeded orthogonal map.
    Circle {
        radius: f64,
        noise: f64,
        embed_dim: usize,
        rotation: Option<u64>,
    },
    /// The two interleaved half circles, embedded like [`TargetKind::Circle`].
    TwoMoons {
        noise: f64,
        embed_dim: usize,
        rotation: Option<u64>,
    },
    /// Uniform on alternating unit squares of `[-2, 2]^2`.
    Checkerboard,
}

impl TargetKind {
    pub fn circle(radius: f64, noise: f64, embed_dim: usize) -> Self {
        TargetKind::Circle {
            radius,
            noise,
            embed_dim,
            rotation: None,
        }
    }

    pub fn gaussian(mean: Vec<f64>, std: f64) -> Self {
        TargetKind::Gaussian { mean, std }
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetKind::Gaussian { mean, .. } => mean.len(),
            TargetKind::Circle { embed_dim, .. } | TargetKind::TwoMoons { embed_dim, .. } => (*embed_dim).max(2),
            TargetKind::GaussianMixture { .. } | TargetKind::Checkerboard => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::Gaussian { .. } => "gaussian",
            TargetKind::GaussianMixture { .. } => "gaussian_mixture",
            TargetKind::Circle { .. } => "circle",
            TargetKind::TwoMoons { .. } => "two_moons",
            TargetKind::Checkerboard => "checkerboard",
        }
    }

    /// Mean distance from the manifold the target lives on, where that is
    /// defined (circles: `| |x| - r |`).
    pub fn manifold_residual(&self, x: ArrayView2<'_, f64>) -> Option<f64> {
        match self {
            TargetKind::Circle { radius, .. } if x.nrows() > 0 => {
                let total: f64 = x
                    .axis_iter(Axis(0))
                    .map(|row| (row.dot(&row).sqrt() - radius).abs())
                    .sum();
                Some(total / x.nrows() as f64)
            }
            _ => None,
        }
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Matrix {
        match self {
            TargetKind::Gaussian { mean, std } => {
                let mut x = standard_normal(mean.len(), n, rng);
                for mut row in x.axis_iter_mut(Axis(0)) {
                    for (v, m) in row.iter_mut().zip(mean) {
                        *v = m + std * *v;
                    }
                }
                x
            }
            TargetKind::GaussianMixture { k, radius, std } => {
                let mut x = Array2::zeros((n, 2));
                for i in 0..n {
                    let c = rng.gen_range(0..*k) as f64;
                    let angle = 2.0 * PI * c / *k as f64;
                    let e0: f64 = rng.sample(StandardNormal);
                    let e1: f64 = rng.sample(StandardNormal);
                    x[[i, 0]] = radius * angle.cos() + std * e0;
                    x[[i, 1]] = radius * angle.sin() + std * e1;
                }
                x
            }
            TargetKind::Circle {
                radius,
                noise,
                embed_dim,
                rotation,
            } => {
                let mut x = Array2::zeros((n, (*embed_dim).max(2)));
                for i in 0..n {
                    let angle = rng.gen_range(0.0..2.0 * PI);
                    x[[i, 0]] = radius * angle.cos();
                    x[[i, 1]] = radius * angle.sin();
                    if *noise > 0.0 {
                        for j in 0..2 {
                            let e: f64 = rng.sample(StandardNormal);
                            x[[i, j]] += noise * e;
                        }
                    }
                }
                rotate(x, *rotation)
            }
            TargetKind::TwoMoons {
                noise,
                embed_dim,
                rotation,
            } => {
                let mut x = Array2::zeros((n, (*embed_dim).max(2)));
                for i in 0..n {
                    let s = rng.gen_range(0.0..PI);
                    let (a, b) = if rng.gen_bool(0.5) {
                        (s.cos(), s.sin())
                    } else {
                        (1.0 - s.cos(), 0.5 - s.sin())
                    };
                    x[[i, 0]] = a;
                    x[[i, 1]] = b;
                    if *noise > 0.0 {
                        for j in 0..2 {
                            let e: f64 = rng.sample(StandardNormal);
                            x[[i, j]] += noise * e;
                        }
                    }
                }
                rotate(x, *rotation)
            }
            TargetKind::Checkerboard => {
                let mut x = Array2::zeros((n, 2));
                for i in 0..n {
                    let a: f64 = rng.gen_range(-2.0..2.0);
                    let stripe = if rng.gen_bool(0.5) { 0.0 } else { -2.0 };
                    let b: f64 = rng.gen_range(0.0..1.0) + stripe + a.floor().rem_euclid(2.0);
                    x[[i, 0]] = a;
                    x[[i, 1]] = b;
                }
                x
            }
        }
    }

    /// Builds a kind from its name and a `key=value; key=value` parameter
    /// string. Vector values are comma separated.
    pub fn parse(kind: &str, params: &str) -> Result<Self, DatasetError> {
        let p = Params::parse(params)?;
        let t = match kind.trim() {
            "gaussian" => TargetKind::Gaussian {
                mean: p.vector("mean", &[0.0, 0.0])?,
                std: p.float("std", 1.0)?,
            },
            "gaussian_mixture" => TargetKind::GaussianMixture {
                k: p.float("k", 8.0)? as usize,
                radius: p.float("radius", 3.0)?,
                std: p.float("std", 0.2)?,
            },
            "circle" => TargetKind::Circle {
                radius: p.float("r", 1.0)?,
                noise: p.float("noise", 0.0)?,
                embed_dim: p.float("embed_dim", 2.0)? as usize,
                rotation: p.optional_seed("rotation")?,
            },
            "two_moons" => TargetKind::TwoMoons {
                noise: p.float("noise", 0.0)?,
                embed_dim: p.float("embed_dim", 2.0)? as usize,
                rotation: p.optional_seed("rotation")?,
            },
            "checkerboard" => TargetKind::Checkerboard,
            other => return Err(DatasetError::UnknownKind(other.to_owned())),
        };
        if let TargetKind::GaussianMixture { k: 0, .. } = t {
            return Err(DatasetError::BadParam {
                key: "k".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(t)
    }

    /// Inverse of [`TargetKind::parse`] for the parameter string.
    pub fn params_string(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let rot = |r: &Option<u64>| r.map(|s| format!("; rotation={s}")).unwrap_or_default();
        match self {
            TargetKind::Gaussian { mean, std } => format!("mean={}; std={std}", join(mean)),
            TargetKind::GaussianMixture { k, radius, std } => format!("k={k}; radius={radius}; std={std}"),
            TargetKind::Circle {
                radius,
                noise,
                embed_dim,
                rotation,
            } => format!("r={radius}; noise={noise}; embed_dim={embed_dim}{}", rot(rotation)),
            TargetKind::TwoMoons {
                noise,
                embed_dim,
                rotation,
            } => format!("noise={noise}; embed_dim={embed_dim}{}", rot(rotation)),
            TargetKind::Checkerboard => String::new(),
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.params_string())
    }
}

fn rotate(x: Matrix, rotation: Option<u64>) -> Matrix {
    match rotation {
        Some(seed) => {
            let q = random_rotation(x.ncols(), seed);
            x.dot(&q)
        }
        None => x,
    }
}

struct Params(Vec<(String, String)>);

impl Params {
    fn parse(s: &str) -> Result<Self, DatasetError> {
        let mut out = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| DatasetError::BadParam {
                key: part.to_owned(),
                reason: "expected key=value".into(),
            })?;
            out.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        Ok(Params(out))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn bad(key: &str, reason: impl ToString) -> DatasetError {
        DatasetError::BadParam {
            key: key.to_owned(),
            reason: reason.to_string(),
        }
    }

    fn float(&self, key: &str, default: f64) -> Result<f64, DatasetError> {
        match self.get(key) {
            Some(v) => v.parse().map_err(|e| Self::bad(key, e)),
            None => Ok(default),
        }
    }

    fn vector(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, DatasetError> {
        match self.get(key) {
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| Self::bad(key, e)))
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    fn optional_seed(&self, key: &str) -> Result<Option<u64>, DatasetError> {
        self.get(key)
            .map(|v| v.parse().map_err(|e| Self::bad(key, e)))
            .transpose()
    }
}

/// `n` draws from `kind`, deterministic per seed.
pub fn sample_target(kind: &TargetKind, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kind.sample(n, &mut rng)
}

/// Anything the training loop can draw target batches from.
pub trait TargetSampler {
    fn dim(&self) -> usize;
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix;
}

impl TargetSampler for TargetKind {
    fn dim(&self) -> usize {
        TargetKind::dim(self)
    }

    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        self.sample(n, rng)
    }
}

/// A fixed data set; batches are drawn without replacement.
#[derive(Debug, Clone)]
pub struct Empirical(pub Matrix);

impl TargetSampler for Empirical {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let rows = self.0.nrows();
        let picks: Vec<usize> = if n <= rows {
            index::sample(rng, rows, n).into_vec()
        } else {
            (0..n).map(|_| rng.gen_range(0..rows)).collect()
        };
        self.0.select(Axis(0), &picks)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Header and pixels of an IDX image file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DatasetError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DatasetError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 unsigned-byte image file (big-endian header).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DatasetError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

/// Seeded subset of `n_train` images scaled to `[0, 1]`, one per row.
pub fn load_mnist(path: impl AsRef<Path>, n_train: usize, seed: u64) -> Result<Matrix, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let idx = parse_idx_images(&bytes)?;
    if n_train > idx.count {
        return Err(DatasetError::NotEnoughSamples {
            requested: n_train,
            available: idx.count,
        });
    }
    let pixels = idx.rows * idx.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, idx.count, n_train);
    let mut out = Array2::zeros((n_train, pixels));
    for (row, i) in picks.iter().enumerate() {
        let src = &idx.pixels[i * pixels..(i + 1) * pixels];
        for (j, &p) in src.iter().enumerate() {
            out[[row, j]] = f64::from(p) / 255.0;
        }
    }
    Ok(out)
}

/// Default MNIST training subset size.
pub const MNIST_TRAIN_SUBSET: usize = 6000;

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_cov(x: &Matrix) -> (Vec<f64>, Matrix) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let centered = x - &mean;
        let cov = centered.t().dot(&centered) / n;
        (mean.to_vec(), cov)
    }

    #[test]
    fn reference_moments() {
        let x = sample_reference(2, 10_000, 3);
        let (mean, cov) = mean_cov(&x);
        assert!(mean.iter().all(|m| m.abs() < 0.05), "{mean:?}");
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[[i, j]] - target).abs() < 0.05, "{cov:?}");
            }
        }
        assert_eq!(x, sample_reference(2, 10_000, 3));
    }

    #[test]
    fn circle_is_exact() {
        let x = sample_target(&TargetKind::circle(1.0, 0.0, 2), 500, 1);
        for row in x.axis_iter(Axis(0)) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedded_circle_is_singular() {
        let kind = TargetKind::circle(1.0, 0.0, 8);
        let x = sample_target(&kind, 2000, 4);
        assert_eq!(x.ncols(), 8);
        assert!(x.slice(ndarray::s![.., 2..]).iter().all(|&v| v == 0.0));
        let (_, cov) = mean_cov(&x);
        let eig = nalgebra::DMatrix::from_fn(8, 8, |i, j| cov[[i, j]]).symmetric_eigenvalues();
        assert_eq!(eig.iter().filter(|&&e| e.abs() < 1e-20).count(), 6);
    }

    #[test]
    fn rotated_embedding_has_rank_two() {
        let kind = TargetKind::Circle {
            radius: 2.0,
            noise: 0.0,
            embed_dim: 8,
            rotation: Some(9),
        };
        let x = sample_target(&kind, 2000, 4);
        assert!((kind.manifold_residual(x.view()).unwrap()).abs() < 1e-12);
        let (_, cov) = mean_cov(&x);
        let eig = nalgebra::DMatrix::from_fn(8, 8, |i, j| cov[[i, j]]).symmetric_eigenvalues();
        let top = eig.iter().copied().fold(0.0, f64::max);
        assert_eq!(eig.iter().filter(|&&e| e.abs() > 1e-12 * top).count(), 2);
        let q = random_rotation(5, 2);
        let qqt = q.dot(&q.t());
        for i in 0..5 {
            for j in 0..5 {
                assert!((qqt[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_target_mean() {
        let x = sample_target(&TargetKind::gaussian(vec![3.0, 0.0], 1.0), 10_000, 8);
        let (mean, _) = mean_cov(&x);
        assert!((mean[0] - 3.0).abs() < 0.05 && mean[1].abs() < 0.05);
    }

    #[test]
    fn parse_kinds() {
        let k = TargetKind::parse("circle", "r=2; noise=0.1; embed_dim=8").unwrap();
        assert_eq!(k, TargetKind::circle(2.0, 0.1, 8));
        assert_eq!(TargetKind::parse(k.name(), &k.params_string()).unwrap(), k);
        let g = TargetKind::parse("gaussian", "mean=3,0; std=1").unwrap();
        assert_eq!(g.dim(), 2);
        assert!(matches!(TargetKind::parse("spiral", ""), Err(DatasetError::UnknownKind(_))));
        assert!(TargetKind::parse("gaussian", "std=abc").is_err());
        for name in ["two_moons", "checkerboard", "gaussian_mixture"] {
            let kind = TargetKind::parse(name, "").unwrap();
            let x = sample_target(&kind, 50, 1);
            assert_eq!(x.ncols(), kind.dim());
            assert!(x.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn samplers_are_pure() {
        for kind in [
            TargetKind::Checkerboard,
            TargetKind::parse("two_moons", "noise=0.05; embed_dim=4; rotation=3").unwrap(),
        ] {
            assert_eq!(sample_target(&kind, 64, 11), sample_target(&kind, 64, 11));
        }
    }

    fn fake_idx(count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend((0..count * rows * cols).map(|i| (i * 37 % 256) as u8));
        bytes
    }

    #[test]
    fn idx_header() {
        let mut header = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 60_000, 28, 28] {
            header.extend_from_slice(&v.to_be_bytes());
        }
        match parse_idx_images(&header) {
            Err(DatasetError::Truncated { expected, .. }) => assert_eq!(expected, 16 + 60_000 * 784),
            other => panic!("{other:?}"),
        }
        let idx = parse_idx_images(&fake_idx(3, 28, 28)).unwrap();
        assert_eq!((idx.count, idx.rows, idx.cols), (3, 28, 28));
        let mut bad = fake_idx(1, 2, 2);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(DatasetError::BadMagic(0x0801))));
    }

    #[test]
    fn mnist_subset() {
        let dir = tempdir();
        let path = dir.join("images.idx3");
        fs::write(&path, fake_idx(50, 28, 28)).unwrap();
        let a = load_mnist(&path, 10, 5).unwrap();
        assert_eq!(a.dim(), (10, 784));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, load_mnist(&path, 10, 5).unwrap());
        assert!(matches!(load_mnist(&path, 51, 5), Err(DatasetError::NotEnoughSamples { .. })));
        assert!(matches!(load_mnist(dir.join("missing"), 1, 5), Err(DatasetError::Io { .. })));
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("proxflow-ds-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }
}
