//! Attention matrices as CSV tables and grayscale images.
//!
//! Images map each matrix linearly from its own `[min, max]` onto `0..=255`
//! (a constant matrix maps to all zeros), one pixel per entry, row `k` of
//! the matrix on pixel row `k`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{AttentionRecord, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Positions shown by default.
pub const DEFAULT_LAST: usize = 15;

/// Attention of one head over the user's last `k` items.
///
/// Only the last `k` items are encoded, so every row of the returned
/// `k × k` blocks holds that query's complete attention distribution.
/// Histories shorter than `k` leave leading padded rows and columns, whose
/// weights are zero.
pub fn attention_block<S: Scalar>(
    model: &Model<S>,
    history: &[usize],
    layer: usize,
    head: usize,
    k: usize,
) -> Result<AttentionRecord<S>> {
    let c = model.config();
    if k == 0 || k > c.n {
        return Err(Error::config(format!("--last must be in 1..={}, got {k}", c.n)));
    }
    if layer >= c.layers || head >= c.heads {
        return Err(Error::config(format!(
            "layer {layer} / head {head} out of range ({} layers, {} heads)",
            c.layers, c.heads
        )));
    }
    if history.is_empty() {
        return Err(Error::data("user has no history to encode"));
    }
    let tail = &history[history.len().saturating_sub(k)..];
    let (_, records) = model.encode(tail)?;
    let r = records
        .into_iter()
        .find(|r| r.layer == layer && r.head == head)
        .ok_or_else(|| Error::contract("attention record missing"))?;
    let crop = |t: &Tensor<S>| bottom_right(t, k);
    Ok(AttentionRecord {
        layer,
        head,
        a: crop(&r.a)?,
        b: r.b.as_ref().map(crop).transpose()?,
        weights: crop(&r.weights)?,
    })
}

fn bottom_right<S: Scalar>(t: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let n = t.rows();
    let mut out = Vec::with_capacity(k * k);
    for r in n - k..n {
        out.extend_from_slice(&t.row(r)[n - k..]);
    }
    Tensor::new([k, k], out)
}

/// Linear min-max map of a 2-D matrix onto 8-bit gray levels.
pub fn to_gray<S: Scalar>(m: &Tensor<S>) -> Vec<u8> {
    let v = m.to_f64_vec();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter()
        .map(|&x| {
            if span > 0.0 {
                ((x - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_csv<S: Scalar>(path: &Path, m: &Tensor<S>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.as_f64().to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_png<S: Scalar>(path: &Path, m: &Tensor<S>) -> Result<()> {
    let (h, w) = (m.rows() as u32, m.cols() as u32);
    let img = image::GrayImage::from_raw(w, h, to_gray(m))
        .ok_or_else(|| Error::contract("image buffer size mismatch"))?;
    img.save(path)?;
    Ok(())
}

/// Writes `A`, `B` (when refined) and `weights` as `<name>.csv` and
/// `<name>.png` under `dir`. Returns the written paths.
pub fn write_record<S: Scalar>(dir: &Path, record: &AttentionRecord<S>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut mats = vec![("A", &record.a)];
    if let Some(b) = &record.b {
        mats.push(("B", b));
    }
    mats.push(("weights", &record.weights));
    for (name, m) in mats {
        let csv = dir.join(format!("{name}.csv"));
        write_csv(&csv, m)?;
        let png = dir.join(format!("{name}.png"));
        write_png(&png, m)?;
        written.extend([csv, png]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Mechanism, ModelConfig};

    #[test]
    fn gray_levels() {
        let m = Tensor::<f64>::from_f64([2, 2], &[0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(to_gray(&m), vec![0, 128, 255, 64]);
        assert_eq!(to_gray(&Tensor::<f64>::full([2, 2], 3.0)), vec![0; 4]);
    }

    #[test]
    fn block_rows_are_full_distributions() {
        let cfg = ModelConfig {
            mechanism: Mechanism::Simp,
            d: 8,
            n: 20,
            layers: 1,
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg, 30).unwrap();
        let history: Vec<usize> = (1..=25).collect();
        let r = attention_block(&model, &history, 0, 0, 15).unwrap();
        assert_eq!(r.weights.shape(), &[15, 15]);
        for k in 0..15 {
            let s: f64 = r.weights.row(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(r.weights.row(k)[k + 1..].iter().all(|&v| v == 0.0));
        }
        // short history: leading rows are padding
        let r = attention_block(&model, &history[..4], 0, 0, 15).unwrap();
        assert!(r.weights.row(0).iter().all(|&v| v == 0.0));
        let s: f64 = r.weights.row(14).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::<f64>::from_f64([3, 3], &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5]).unwrap();
        let rec = AttentionRecord {
            layer: 0,
            head: 0,
            a: m.clone(),
            b: None,
            weights: m,
        };
        let paths = write_record(dir.path(), &rec).unwrap();
        assert_eq!(paths.len(), 4);
        let img = image::open(dir.path().join("weights.png")).unwrap();
        assert_eq!((img.width(), img.height()), (3, 3));
        let text = fs::read_to_string(dir.path().join("weights.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "1,0,0");
    }
}
