//! Binary container for kernel and prediction artifacts, plus CSV export.
//!
//! Container layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "NTKC"
//! version u32      1
//! kind    u32      0 = matrix, 1 = kernel bundle, 2 = mean kernels, 3 = predictions
//! ...kind-specific u64 dimensions...
//! payload f64 x count
//! ```
//!
//! CSV files are UTF-8 with a header row and `.` decimal separator; floats
//! are written with Rust's shortest round-trippable formatting so reruns are
//! bitwise identical.

use crate::kernel_models::{EnsemblePredictions, Variant};
use crate::linalg::Matrix;
use crate::ntk::{KernelBundle, MeanKernels};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad container magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("unexpected container kind {got}, wanted {wanted}")]
    WrongKind { got: u32, wanted: u32 },
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

const MAGIC: &[u8; 4] = b"NTKC";
const VERSION: u32 = 1;

const KIND_MATRIX: u32 = 0;
const KIND_BUNDLE: u32 = 1;
const KIND_MEAN: u32 = 2;
const KIND_PREDICTIONS: u32 = 3;

fn write_header(w: &mut impl Write, kind: u32) -> Result<(), IoError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&kind.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, wanted: u32) -> Result<(), IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(IoError::BadVersion(version));
    }
    let kind = read_u32(r)?;
    if kind != wanted {
        return Err(IoError::WrongKind { got: kind, wanted });
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, IoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>, IoError> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_matrix_body(w: &mut impl Write, m: &Matrix) -> Result<(), IoError> {
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    write_f64s(w, m.as_slice())
}

fn read_matrix_body(r: &mut impl Read) -> Result<Matrix, IoError> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let data = read_f64s(r, rows * cols)?;
    Matrix::new(rows, cols, data).map_err(|e| IoError::Corrupt(e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<(), IoError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, KIND_MATRIX)?;
    write_matrix_body(&mut f, m)
}

pub fn read_matrix(path: &Path) -> Result<Matrix, IoError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    read_header(&mut f, KIND_MATRIX)?;
    read_matrix_body(&mut f)
}

pub fn write_bundle(path: &Path, b: &KernelBundle) -> Result<(), IoError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, KIND_BUNDLE)?;
    f.write_all(&b.member_seed.to_le_bytes())?;
    f.write_all(&(b.channel as u64).to_le_bytes())?;
    write_matrix_body(&mut f, &b.theta_train_train)?;
    write_matrix_body(&mut f, &b.theta_eval_train)?;
    f.write_all(&(b.f0_train.len() as u64).to_le_bytes())?;
    write_f64s(&mut f, &b.f0_train)?;
    f.write_all(&(b.f0_eval.len() as u64).to_le_bytes())?;
    write_f64s(&mut f, &b.f0_eval)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<KernelBundle, IoError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    read_header(&mut f, KIND_BUNDLE)?;
    let member_seed = read_u64(&mut f)?;
    let channel = read_u64(&mut f)? as usize;
    let theta_train_train = read_matrix_body(&mut f)?;
    let theta_eval_train = read_matrix_body(&mut f)?;
    let nt = read_u64(&mut f)? as usize;
    let f0_train = read_f64s(&mut f, nt)?;
    let ne = read_u64(&mut f)? as usize;
    let f0_eval = read_f64s(&mut f, ne)?;
    Ok(KernelBundle { theta_train_train, theta_eval_train, f0_train, f0_eval, member_seed, channel })
}

pub fn write_mean_kernels(path: &Path, mks: &[MeanKernels]) -> Result<(), IoError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, KIND_MEAN)?;
    f.write_all(&(mks.len() as u64).to_le_bytes())?;
    for mk in mks {
        f.write_all(&(mk.sample_count as u64).to_le_bytes())?;
        f.write_all(&(mk.channel as u64).to_le_bytes())?;
        write_matrix_body(&mut f, &mk.theta_bar_train_train)?;
        write_matrix_body(&mut f, &mk.theta_bar_eval_train)?;
        write_matrix_body(&mut f, &mk.k_bar_train_train)?;
        write_matrix_body(&mut f, &mk.k_bar_eval_train)?;
        f.write_all(&(mk.k_bar_eval_diag.len() as u64).to_le_bytes())?;
        write_f64s(&mut f, &mk.k_bar_eval_diag)?;
    }
    Ok(())
}

pub fn read_mean_kernels(path: &Path) -> Result<Vec<MeanKernels>, IoError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    read_header(&mut f, KIND_MEAN)?;
    let count = read_u64(&mut f)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let sample_count = read_u64(&mut f)? as usize;
        let channel = read_u64(&mut f)? as usize;
        let theta_bar_train_train = read_matrix_body(&mut f)?;
        let theta_bar_eval_train = read_matrix_body(&mut f)?;
        let k_bar_train_train = read_matrix_body(&mut f)?;
        let k_bar_eval_train = read_matrix_body(&mut f)?;
        let nd = read_u64(&mut f)? as usize;
        let k_bar_eval_diag = read_f64s(&mut f, nd)?;
        out.push(MeanKernels {
            theta_bar_train_train,
            theta_bar_eval_train,
            k_bar_train_train,
            k_bar_eval_train,
            k_bar_eval_diag,
            sample_count,
            channel,
        });
    }
    Ok(out)
}

fn variant_code(v: Variant) -> u32 {
    match v {
        Variant::Lin => 0,
        Variant::LinC => 1,
        Variant::LinA => 2,
        Variant::LinI => 3,
        Variant::LinD => 4,
        Variant::Gd => 5,
        Variant::GdC => 6,
        Variant::GdA => 7,
        Variant::GdI => 8,
    }
}

fn variant_from_code(c: u32) -> Result<Variant, IoError> {
    Ok(match c {
        0 => Variant::Lin,
        1 => Variant::LinC,
        2 => Variant::LinA,
        3 => Variant::LinI,
        4 => Variant::LinD,
        5 => Variant::Gd,
        6 => Variant::GdC,
        7 => Variant::GdA,
        8 => Variant::GdI,
        other => return Err(IoError::Corrupt(format!("unknown variant code {other}"))),
    })
}

pub fn write_predictions(path: &Path, p: &EnsemblePredictions) -> Result<(), IoError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, KIND_PREDICTIONS)?;
    f.write_all(&variant_code(p.variant).to_le_bytes())?;
    for dim in [p.members, p.points, p.channels] {
        f.write_all(&(dim as u64).to_le_bytes())?;
    }
    for seed in &p.member_seeds {
        f.write_all(&seed.to_le_bytes())?;
    }
    write_f64s(&mut f, p.values())
}

pub fn read_predictions(path: &Path) -> Result<EnsemblePredictions, IoError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    read_header(&mut f, KIND_PREDICTIONS)?;
    let variant = variant_from_code(read_u32(&mut f)?)?;
    let members = read_u64(&mut f)? as usize;
    let points = read_u64(&mut f)? as usize;
    let channels = read_u64(&mut f)? as usize;
    let mut seeds = Vec::with_capacity(members);
    for _ in 0..members {
        seeds.push(read_u64(&mut f)?);
    }
    let values = read_f64s(&mut f, members * points * channels)?;
    let mut p = EnsemblePredictions::new(variant, members, points, channels, seeds);
    for m in 0..members {
        let stride = points * channels;
        p.member_block_mut(m).copy_from_slice(&values[m * stride..(m + 1) * stride]);
    }
    Ok(p)
}

/// CSV export of a prediction tensor: `member,point_index,channel,value`.
pub fn predictions_csv(p: &EnsemblePredictions) -> String {
    let mut out = String::from("member,point_index,channel,value\n");
    for m in 0..p.members {
        for i in 0..p.points {
            for k in 0..p.channels {
                out.push_str(&format!("{m},{i},{k},{}\n", p.get(m, i, k)));
            }
        }
    }
    out
}

/// Generic CSV assembly from a header and rows of already formatted cells.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
