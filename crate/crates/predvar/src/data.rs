//! Dataset generation and ingestion: the star toy problem, IDX-format image
//! sets, subsetting and regression-target construction.
//!
//! Image experiments read the classic IDX binary layout (big-endian header:
//! magic, dims) from `MNIST_DATA_DIR`, which is expected to hold one
//! subdirectory per dataset (`mnist/`, `fashion/`, `kmnist/`, ...) with
//! `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte`
//! and `t10k-labels-idx1-ubyte` inside. When the variable is unset, a
//! deterministic synthetic corpus with the same layout is generated once under
//! the build directory (see [`synthetic`]), so the full ingestion path is
//! exercised either way.

use crate::linalg::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("star dataset needs an even arm count >= 4, got {0}")]
    OddArms(usize),
    #[error("{path}: bad IDX magic {got} (expected {expected})")]
    BadMagic { path: String, got: u32, expected: u32 },
    #[error("{path}: truncated IDX file")]
    TruncatedFile { path: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("requested {requested} samples, only {available} available")]
    InsufficientData { requested: usize, available: usize },
    #[error("balanced subset of {n} is not divisible by {classes} classes")]
    Unbalanced { n: usize, classes: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Inputs, regression targets and a label for provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub xs: Matrix,
    pub ys: Matrix,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Content hash over inputs, targets and name, for reproducibility
    /// records in experiment reports.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update((self.xs.rows() as u64).to_le_bytes());
        h.update((self.xs.cols() as u64).to_le_bytes());
        for v in self.xs.as_slice() {
            h.update(v.to_le_bytes());
        }
        for v in self.ys.as_slice() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize()[..8])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Two-way star-shaped regression problem in the plane: one point per arm at
/// angle `2 pi k / arms` and the given radius, targets alternating `+1 / -1`
/// around the circle. The seed only tags the dataset name (the geometry is
/// deterministic).
pub fn star_dataset(arms: usize, radius: f64, seed: u64) -> Result<Dataset, DataError> {
    if arms < 4 || arms % 2 != 0 {
        return Err(DataError::OddArms(arms));
    }
    let mut xs = Matrix::zeros(arms, 2);
    let mut ys = Matrix::zeros(arms, 1);
    for k in 0..arms {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / arms as f64;
        xs.set(k, 0, radius * angle.cos());
        xs.set(k, 1, radius * angle.sin());
        ys.set(k, 0, if k % 2 == 0 { 1.0 } else { -1.0 });
    }
    Ok(Dataset { xs, ys, name: format!("star-{arms}x{radius}-s{seed}") })
}

/// Raw image set: pixel floats in `[0, 1]` plus class labels.
#[derive(Debug, Clone)]
pub struct RawImageSet {
    /// `N x (rows * cols)` pixels scaled by `1/255`.
    pub images: Matrix,
    pub labels: Vec<u8>,
    pub source: String,
}

impl RawImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }
}

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn read_u32_be(buf: &[u8], off: usize, path: &str) -> Result<u32, DataError> {
    let b: [u8; 4] = buf
        .get(off..off + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| DataError::TruncatedFile { path: path.into() })?;
    Ok(u32::from_be_bytes(b))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

/// Loads an IDX image/label file pair; pixels are divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawImageSet, DataError> {
    let ibuf = read_file(images_path)?;
    let ipath = images_path.display().to_string();
    let magic = read_u32_be(&ibuf, 0, &ipath)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic { path: ipath, got: magic, expected: IMAGE_MAGIC });
    }
    let n = read_u32_be(&ibuf, 4, &ipath)? as usize;
    let rows = read_u32_be(&ibuf, 8, &ipath)? as usize;
    let cols = read_u32_be(&ibuf, 12, &ipath)? as usize;
    let need = 16 + n * rows * cols;
    if ibuf.len() < need {
        return Err(DataError::TruncatedFile { path: ipath });
    }
    let pixels: Vec<f64> = ibuf[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let images = Matrix::new(n, rows * cols, pixels).expect("finite pixel scaling");

    let lbuf = read_file(labels_path)?;
    let lpath = labels_path.display().to_string();
    let magic = read_u32_be(&lbuf, 0, &lpath)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic { path: lpath, got: magic, expected: LABEL_MAGIC });
    }
    let ln = read_u32_be(&lbuf, 4, &lpath)? as usize;
    if lbuf.len() < 8 + ln {
        return Err(DataError::TruncatedFile { path: lpath });
    }
    if ln != n {
        return Err(DataError::CountMismatch { images: n, labels: ln });
    }
    let labels = lbuf[8..8 + ln].to_vec();
    Ok(RawImageSet { images, labels, source: images_path.display().to_string() })
}

/// Writes an IDX image/label pair (the inverse of [`load_idx`], used by the
/// synthetic corpus generator and round-trip tests).
pub fn write_idx(images_path: &Path, labels_path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize, labels: &[u8]) -> Result<(), DataError> {
    assert_eq!(pixels.len(), n * rows * cols);
    assert_eq!(labels.len(), n);
    let write = |path: &Path, bytes: &[u8]| -> Result<(), DataError> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(bytes))
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })
    };
    let mut ibuf = Vec::with_capacity(16 + pixels.len());
    ibuf.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(n as u32).to_be_bytes());
    ibuf.extend_from_slice(&(rows as u32).to_be_bytes());
    ibuf.extend_from_slice(&(cols as u32).to_be_bytes());
    ibuf.extend_from_slice(pixels);
    write(images_path, &ibuf)?;
    let mut lbuf = Vec::with_capacity(8 + labels.len());
    lbuf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(n as u32).to_be_bytes());
    lbuf.extend_from_slice(labels);
    write(labels_path, &lbuf)
}

/// Regression-target construction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// `{+1, -1}` for two classes.
    BinaryPm1,
    /// Centered one-hot rows: `(c-1)/c` at the class, `-1/c` elsewhere.
    CenteredOnehot,
}

/// Builds the regression target matrix for class labels.
pub fn make_targets(labels: &[u8], classes: usize, mode: TargetMode) -> Result<Matrix, DataError> {
    match mode {
        TargetMode::BinaryPm1 => {
            let mut ys = Matrix::zeros(labels.len(), 1);
            for (i, &l) in labels.iter().enumerate() {
                match l {
                    0 => ys.set(i, 0, 1.0),
                    1 => ys.set(i, 0, -1.0),
                    _ => return Err(DataError::LabelOutOfRange { label: l as usize, classes: 2 }),
                }
            }
            Ok(ys)
        }
        TargetMode::CenteredOnehot => {
            let c = classes as f64;
            let mut ys = Matrix::from_fn(labels.len(), classes, |_, _| -1.0 / c);
            for (i, &l) in labels.iter().enumerate() {
                if l as usize >= classes {
                    return Err(DataError::LabelOutOfRange { label: l as usize, classes });
                }
                ys.set(i, l as usize, (c - 1.0) / c);
            }
            Ok(ys)
        }
    }
}

/// A deterministic sample of a raw image set, with the chosen indices kept
/// for reproducibility records.
#[derive(Debug, Clone)]
pub struct Subset {
    pub images: Matrix,
    pub labels: Vec<u8>,
    pub indices: Vec<u32>,
    pub source: String,
}

impl Subset {
    pub fn into_dataset(self, classes: usize, mode: TargetMode, name: &str) -> Result<Dataset, DataError> {
        let ys = make_targets(&self.labels, classes, mode)?;
        Ok(Dataset { xs: self.images, ys, name: name.to_string() })
    }
}

/// Deterministic uniform or stratified sample of `n` items.
pub fn subset(set: &RawImageSet, n: usize, seed: u64, balanced: bool) -> Result<Subset, DataError> {
    if n > set.len() {
        return Err(DataError::InsufficientData { requested: n, available: set.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<u32> = if balanced {
        let classes = set.class_count();
        if n % classes != 0 {
            return Err(DataError::Unbalanced { n, classes });
        }
        let per = n / classes;
        let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); classes];
        for (i, &l) in set.labels.iter().enumerate() {
            by_class[l as usize].push(i as u32);
        }
        let mut picked = Vec::with_capacity(n);
        for (c, pool) in by_class.iter_mut().enumerate() {
            if pool.len() < per {
                return Err(DataError::InsufficientData { requested: per, available: pool.len() });
            }
            partial_shuffle(pool, per, &mut rng);
            let _ = c;
            picked.extend_from_slice(&pool[..per]);
        }
        picked
    } else if n == set.len() {
        (0..n as u32).collect()
    } else {
        let mut all: Vec<u32> = (0..set.len() as u32).collect();
        partial_shuffle(&mut all, n, &mut rng);
        all[..n].to_vec()
    };

    let mut images = Matrix::zeros(indices.len(), set.images.cols());
    let mut labels = Vec::with_capacity(indices.len());
    for (r, &i) in indices.iter().enumerate() {
        images.row_mut(r).copy_from_slice(set.images.row(i as usize));
        labels.push(set.labels[i as usize]);
    }
    Ok(Subset { images, labels, indices, source: set.source.clone() })
}

/// Filters a raw set down to two classes and relabels them `0 / 1`.
pub fn binary_filter(set: &RawImageSet, class_a: u8, class_b: u8) -> RawImageSet {
    let keep: Vec<usize> = set
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class_a || l == class_b)
        .map(|(i, _)| i)
        .collect();
    let mut images = Matrix::zeros(keep.len(), set.images.cols());
    let mut labels = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        images.row_mut(r).copy_from_slice(set.images.row(i));
        labels.push(if set.labels[i] == class_a { 0 } else { 1 });
    }
    RawImageSet { images, labels, source: format!("{}#bin{}v{}", set.source, class_a, class_b) }
}

fn partial_shuffle(v: &mut [u32], k: usize, rng: &mut ChaCha8Rng) {
    let n = v.len();
    for i in 0..k.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        v.swap(i, j);
    }
}

/// Which split of an IDX dataset directory to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads `<root>/<name>/{train,t10k}-{images,labels}-idx?-ubyte`.
pub fn load_named(root: &Path, name: &str, split: Split) -> Result<RawImageSet, DataError> {
    let (img, lbl) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let dir = root.join(name);
    load_idx(&dir.join(img), &dir.join(lbl))
}

/// Resolves the image-data root: `MNIST_DATA_DIR` when set, otherwise a
/// synthetic corpus generated once under `target/`.
pub fn data_root() -> Result<PathBuf, DataError> {
    if let Ok(dir) = std::env::var("MNIST_DATA_DIR") {
        return Ok(PathBuf::from(dir));
    }
    synthetic::ensure_default_corpus()
}

/// Deterministic synthetic stand-in for the MNIST-family corpus.
///
/// Three 28x28 ten-class datasets are generated with distinct image
/// statistics: `mnist` (smooth blob prototypes with shift and noise jitter,
/// class overlap tuned so a desk-scale MLP lands around 90% test accuracy),
/// `fashion` (textured patch prototypes, a near-distribution foil) and
/// `kmnist` (sparse stroke patterns, a far-distribution foil). Files are
/// written in the exact IDX layout, so every consumer goes through
/// [`load_idx`].
pub mod synthetic {
    use super::*;

    pub const SIDE: usize = 28;
    pub const TRAIN_N: usize = 4000;
    pub const TEST_N: usize = 1500;
    pub const CORPUS_SEED: u64 = 0x5ee_d0_c0de;

    /// Generates the three datasets under `dir` (idempotent per content).
    pub fn write_corpus(dir: &Path, seed: u64) -> Result<(), DataError> {
        let mk = |path: &Path| std::fs::create_dir_all(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        });
        const TEST_SPLIT_TAG: u64 = 0x7e57_0001;
        for (name, kind) in [("mnist", Kind::Digits), ("fashion", Kind::Texture), ("kmnist", Kind::Strokes)] {
            let sub = dir.join(name);
            mk(&sub)?;
            // prototypes are shared by both splits; only the sample jitter differs
            let proto_seed = seed ^ fnv(name.as_bytes());
            write_split(&sub, "train", TRAIN_N, kind, proto_seed, proto_seed)?;
            write_split(&sub, "t10k", TEST_N, kind, proto_seed, proto_seed ^ TEST_SPLIT_TAG)?;
        }
        Ok(())
    }

    fn write_split(dir: &Path, split: &str, n: usize, kind: Kind, proto_seed: u64, sample_seed: u64) -> Result<(), DataError> {
        let (pixels, labels) = generate(n, kind, proto_seed, sample_seed);
        let (img, lbl) = match split {
            "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            _ => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        };
        write_idx(&dir.join(img), &dir.join(lbl), &pixels, n, SIDE, SIDE, &labels)
    }

    /// Ensures the default corpus exists exactly once under
    /// `target/synth-data` (worktree-local, atomically renamed into place).
    pub fn ensure_default_corpus() -> Result<PathBuf, DataError> {
        let base = default_dir();
        let marker = base.join(".complete");
        if marker.exists() {
            return Ok(base);
        }
        let staging = base.with_extension(format!("staging-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&staging);
        write_corpus(&staging, CORPUS_SEED)?;
        std::fs::create_dir_all(base.parent().unwrap()).ok();
        match std::fs::rename(&staging, &base) {
            Ok(()) => {}
            Err(_) => {
                // another process won the race; use theirs
                let _ = std::fs::remove_dir_all(&staging);
            }
        }
        std::fs::File::create(&marker).map_err(|source| DataError::Io {
            path: marker.display().to_string(),
            source,
        })?;
        Ok(base)
    }

    fn default_dir() -> PathBuf {
        let target = std::env::var("CARGO_TARGET_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target"));
        target.join("synth-data")
    }

    #[derive(Debug, Clone, Copy)]
    enum Kind {
        Digits,
        Texture,
        Strokes,
    }

    fn fnv(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Smooth random field: low-resolution normal grid, bilinearly upsampled.
    fn smooth_field(rng: &mut ChaCha8Rng, grid: usize) -> Vec<f64> {
        let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let mut out = vec![0.0; SIDE * SIDE];
        for r in 0..SIDE {
            for c in 0..SIDE {
                let gr = r as f64 / (SIDE - 1) as f64 * (grid - 1) as f64;
                let gc = c as f64 / (SIDE - 1) as f64 * (grid - 1) as f64;
                let (r0, c0) = (gr.floor() as usize, gc.floor() as usize);
                let (r1, c1) = ((r0 + 1).min(grid - 1), (c0 + 1).min(grid - 1));
                let (fr, fc) = (gr - r0 as f64, gc - c0 as f64);
                let v = coarse[r0 * grid + c0] * (1.0 - fr) * (1.0 - fc)
                    + coarse[r1 * grid + c0] * fr * (1.0 - fc)
                    + coarse[r0 * grid + c1] * (1.0 - fr) * fc
                    + coarse[r1 * grid + c1] * fr * fc;
                out[r * SIDE + c] = v;
            }
        }
        out
    }

    fn radial_mask(r: usize, c: usize) -> f64 {
        let (cr, cc) = (SIDE as f64 / 2.0 - 0.5, SIDE as f64 / 2.0 - 0.5);
        let dist = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt() / (SIDE as f64 / 2.0);
        (1.0 - dist).clamp(0.0, 1.0).powf(0.7)
    }

    fn digits_prototypes(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        // class shapes are mostly distinct; task difficulty comes from the
        // per-sample deformation below, not from between-class similarity
        let base = smooth_field(rng, 6);
        let alpha = 0.75;
        (0..10)
            .map(|_| {
                let part = smooth_field(rng, 6);
                (0..SIDE * SIDE)
                    .map(|i| {
                        let (r, c) = (i / SIDE, i % SIDE);
                        ((1.0 - alpha) * base[i] + alpha * part[i]) * radial_mask(r, c)
                    })
                    .collect()
            })
            .collect()
    }

    /// Upper quantile threshold that keeps roughly `coverage` of the frame as ink.
    fn ink_threshold(field: &[f64], coverage: f64) -> f64 {
        let mut sorted: Vec<f64> = field.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((1.0 - coverage) * (sorted.len() - 1) as f64).round() as usize;
        sorted[idx]
    }

    fn texture_prototypes(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        // oriented stripe/patch patterns covering most of the frame
        (0..10)
            .map(|k| {
                let angle = k as f64 * 0.31 + rng.gen_range(-0.1..0.1);
                let freq = 0.45 + 0.08 * (k % 4) as f64;
                let phase = rng.gen_range(0.0..std::f64::consts::PI);
                let mut p = vec![0.0; SIDE * SIDE];
                for r in 0..SIDE {
                    for c in 0..SIDE {
                        let u = r as f64 * angle.cos() + c as f64 * angle.sin();
                        let v = 0.55 + 0.45 * (freq * u + phase).sin();
                        p[r * SIDE + c] = v.clamp(0.0, 1.0) * 0.95;
                    }
                }
                p
            })
            .collect()
    }

    fn strokes_prototypes(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        // a few thick random-walk strokes per class on a dark field
        (0..10)
            .map(|_| {
                let mut p = vec![0.0; SIDE * SIDE];
                for _ in 0..3 {
                    let mut r = rng.gen_range(4.0..(SIDE as f64 - 4.0));
                    let mut c = rng.gen_range(4.0..(SIDE as f64 - 4.0));
                    let mut dir = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));
                    for _ in 0..40 {
                        dir += rng.gen_range(-0.5..0.5);
                        r = (r + dir.sin()).clamp(1.0, SIDE as f64 - 2.0);
                        c = (c + dir.cos()).clamp(1.0, SIDE as f64 - 2.0);
                        for dr in -1i32..=1 {
                            for dc in -1i32..=1 {
                                let rr = (r as i32 + dr).clamp(0, SIDE as i32 - 1) as usize;
                                let cc = (c as i32 + dc).clamp(0, SIDE as i32 - 1) as usize;
                                let w: f64 = if dr == 0 && dc == 0 { 1.0 } else { 0.6 };
                                p[rr * SIDE + cc] = (p[rr * SIDE + cc] + w * 0.8).min(1.0);
                            }
                        }
                    }
                }
                p
            })
            .collect()
    }

    fn generate(n: usize, kind: Kind, proto_seed: u64, sample_seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut proto_rng = ChaCha8Rng::seed_from_u64(proto_seed);
        let protos = match kind {
            Kind::Digits => digits_prototypes(&mut proto_rng),
            Kind::Texture => texture_prototypes(&mut proto_rng),
            Kind::Strokes => strokes_prototypes(&mut proto_rng),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5a11_e57);
        let pixel_noise = match kind {
            Kind::Digits => 0.04,
            Kind::Texture => 0.12,
            Kind::Strokes => 0.08,
        };
        let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 10) as u8;
            let proto = &protos[class as usize];
            let (dr, dc) = (rng.gen_range(-4i32..=4), rng.gen_range(-4i32..=4));
            let gain = rng.gen_range(0.8..1.1f64);
            if matches!(kind, Kind::Digits) {
                // deform the class field, shift it, then keep the brightest
                // ~28% of the frame as ink: sparse distinct shapes with a
                // within-class manifold, as in handwritten digits
                let deform = smooth_field(&mut rng, 6);
                let gamma = 0.65;
                let mut field = vec![0.0; SIDE * SIDE];
                for r in 0..SIDE {
                    for c in 0..SIDE {
                        let sr = r as i32 - dr;
                        let sc = c as i32 - dc;
                        let base = if (0..SIDE as i32).contains(&sr) && (0..SIDE as i32).contains(&sc) {
                            proto[sr as usize * SIDE + sc as usize]
                        } else {
                            0.0
                        };
                        field[r * SIDE + c] = base + gamma * deform[r * SIDE + c] * radial_mask(r, c);
                    }
                }
                let tau = ink_threshold(&field, 0.20);
                for v in &field {
                    let ink = 1.0 / (1.0 + (-(v - tau) / 0.03).exp());
                    let noise: f64 = rng.gen_range(-1.0..1.0);
                    let px = (ink * gain * 0.95 + pixel_noise * noise).clamp(0.0, 1.0);
                    pixels.push((px * 255.0).round() as u8);
                }
            } else {
                for r in 0..SIDE {
                    for c in 0..SIDE {
                        let sr = r as i32 - dr;
                        let sc = c as i32 - dc;
                        let base = if (0..SIDE as i32).contains(&sr) && (0..SIDE as i32).contains(&sc) {
                            proto[sr as usize * SIDE + sc as usize]
                        } else {
                            0.0
                        };
                        let noise: f64 = rng.gen_range(-1.0..1.0);
                        let v = (base * gain + pixel_noise * noise).clamp(0.0, 1.0);
                        pixels.push((v * 255.0).round() as u8);
                    }
                }
            }
            labels.push(class);
        }
        (pixels, labels)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean pixel norm, a cheap corpus statistic used in reports.
pub fn mean_input_norm(xs: &Matrix) -> f64 {
    if xs.rows() == 0 {
        return 0.0;
    }
    (0..xs.rows()).map(|i| dot(xs.row(i), xs.row(i)).sqrt()).sum::<f64>() / xs.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_four_arms_layout() {
        let d = star_dataset(4, 1.0, 0).unwrap();
        let expected = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        for (i, (ex, ey)) in expected.iter().enumerate() {
            assert!((d.xs.get(i, 0) - ex).abs() < 1e-12);
            assert!((d.xs.get(i, 1) - ey).abs() < 1e-12);
        }
        let targets: Vec<f64> = (0..4).map(|i| d.ys.get(i, 0)).collect();
        assert_eq!(targets, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn star_targets_alternate_to_zero_sum() {
        for arms in [4usize, 8, 12] {
            let d = star_dataset(arms, 2.5, 1).unwrap();
            let sum: f64 = (0..arms).map(|i| d.ys.get(i, 0)).sum();
            assert_eq!(sum, 0.0);
        }
    }

    #[test]
    fn star_rejects_odd_arms() {
        assert!(matches!(star_dataset(5, 1.0, 0), Err(DataError::OddArms(5))));
        assert!(matches!(star_dataset(2, 1.0, 0), Err(DataError::OddArms(2))));
    }

    #[test]
    fn idx_round_trip_bitwise() {
        let dir = std::env::temp_dir().join(format!("predvar-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let pixels: Vec<u8> = (0..2 * 2 * 2).map(|i| (i * 37 % 256) as u8).collect();
        let labels = vec![3u8, 7u8];
        let img = dir.join("imgs");
        let lbl = dir.join("lbls");
        write_idx(&img, &lbl, &pixels, 2, 2, 2, &labels).unwrap();
        let set = load_idx(&img, &lbl).unwrap();
        assert_eq!(set.images.rows(), 2);
        assert_eq!(set.images.cols(), 4);
        assert_eq!(set.labels, labels);
        for (i, &p) in pixels.iter().enumerate() {
            let got = set.images.as_slice()[i];
            assert_eq!(got, p as f64 / 255.0);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let dir = std::env::temp_dir().join(format!("predvar-idx-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("imgs");
        let lbl = dir.join("lbls");
        write_idx(&img, &lbl, &[0u8; 4], 1, 2, 2, &[1]).unwrap();

        // corrupt the magic
        let mut buf = std::fs::read(&img).unwrap();
        buf[3] = 0;
        std::fs::write(&img, &buf).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(DataError::BadMagic { .. })));

        // restore magic, truncate payload
        buf[3] = 3;
        buf.truncate(17);
        std::fs::write(&img, &buf).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(DataError::TruncatedFile { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = std::env::temp_dir().join(format!("predvar-idx-cm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("imgs");
        let lbl = dir.join("lbls");
        write_idx(&img, &lbl, &[0u8; 8], 2, 2, 2, &[1, 2]).unwrap();
        let other_lbl = dir.join("lbls3");
        write_idx(&dir.join("imgs3"), &other_lbl, &[0u8; 12], 3, 2, 2, &[1, 2, 3]).unwrap();
        assert!(matches!(
            load_idx(&img, &other_lbl),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn centered_onehot_rows() {
        let ys = make_targets(&[3], 10, TargetMode::CenteredOnehot).unwrap();
        for j in 0..10 {
            let expected = if j == 3 { 0.9 } else { -0.1 };
            assert!((ys.get(0, j) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_targets_and_zero_row_sums() {
        let ys = make_targets(&[0, 1, 0], 2, TargetMode::BinaryPm1).unwrap();
        assert_eq!(ys.as_slice(), &[1.0, -1.0, 1.0]);
        let ys = make_targets(&[0, 4, 9], 10, TargetMode::CenteredOnehot).unwrap();
        for i in 0..3 {
            let sum: f64 = (0..10).map(|j| ys.get(i, j)).sum();
            assert!(sum.abs() < 1e-12, "row sum {sum}");
        }
        assert!(matches!(
            make_targets(&[10], 10, TargetMode::CenteredOnehot),
            Err(DataError::LabelOutOfRange { .. })
        ));
    }

    fn tiny_set() -> RawImageSet {
        let n = 40;
        let images = Matrix::from_fn(n, 4, |i, j| (i * 4 + j) as f64 / 160.0);
        let labels: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        RawImageSet { images, labels, source: "tiny".into() }
    }

    #[test]
    fn subset_full_size_is_identity_permutation() {
        let set = tiny_set();
        let s = subset(&set, 40, 9, false).unwrap();
        assert_eq!(s.indices, (0..40u32).collect::<Vec<_>>());
    }

    #[test]
    fn subset_balanced_and_deterministic() {
        let set = tiny_set();
        let a = subset(&set, 20, 5, true).unwrap();
        let b = subset(&set, 20, 5, true).unwrap();
        assert_eq!(a.indices, b.indices);
        let mut counts = [0usize; 4];
        for &l in &a.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [5, 5, 5, 5]);
        let c = subset(&set, 20, 6, true).unwrap();
        assert_ne!(a.indices, c.indices, "different seed should reshuffle");
    }

    #[test]
    fn subset_rejects_oversized_requests() {
        let set = tiny_set();
        assert!(matches!(subset(&set, 41, 0, false), Err(DataError::InsufficientData { .. })));
        assert!(matches!(subset(&set, 18, 0, true), Err(DataError::Unbalanced { .. })));
    }

    #[test]
    fn synthetic_corpus_loads_through_idx_path() {
        let dir = std::env::temp_dir().join(format!("predvar-corpus-{}", std::process::id()));
        synthetic::write_corpus(&dir, 7).unwrap();
        for name in ["mnist", "fashion", "kmnist"] {
            let train = load_named(&dir, name, Split::Train).unwrap();
            assert_eq!(train.len(), synthetic::TRAIN_N);
            assert_eq!(train.images.cols(), 28 * 28);
            assert_eq!(train.class_count(), 10);
            let test = load_named(&dir, name, Split::Test).unwrap();
            assert_eq!(test.len(), synthetic::TEST_N);
            assert!(train.images.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // determinism: regenerating yields identical bytes
        let dir2 = std::env::temp_dir().join(format!("predvar-corpus2-{}", std::process::id()));
        synthetic::write_corpus(&dir2, 7).unwrap();
        let a = std::fs::read(dir.join("mnist/train-images-idx3-ubyte")).unwrap();
        let b = std::fs::read(dir2.join("mnist/train-images-idx3-ubyte")).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn fingerprint_tracks_content() {
        let d1 = star_dataset(4, 1.0, 0).unwrap();
        let d2 = star_dataset(4, 1.0, 0).unwrap();
        assert_eq!(d1.fingerprint(), d2.fingerprint());
        let d3 = star_dataset(4, 2.0, 0).unwrap();
        assert_ne!(d1.fingerprint(), d3.fingerprint());
    }
}
