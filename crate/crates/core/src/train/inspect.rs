use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::metrics::write_atomic;
use crate::data::{read_ppm, resize_nearest};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Channel means above this count as active.
pub const ACTIVE_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub stage: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial mean of every channel.
    pub channel_means: Vec<f64>,
    /// Population standard deviation of `channel_means`.
    pub channel_mean_std: f64,
    /// Fraction of channels whose mean exceeds [`ACTIVE_THRESHOLD`].
    pub active_fraction: f64,
}

/// Statistics of a single-image `[1,C,H,W]` (or `[C,H,W]`) feature tensor.
pub fn feature_report(maps: &Tensor, stage: usize) -> Result<FeatureReport> {
    let s = maps.shape();
    let (c, h, w) = match *s {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(Error::Contract(format!("expected one image of feature maps, got {s:?}"))),
    };
    ensure!(c >= 1 && h * w >= 1, "empty feature maps {s:?}");
    let means: Vec<f64> = maps.data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / (h * w) as f64).collect();
    let mu = means.iter().sum::<f64>() / c as f64;
    let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / c as f64;
    let active = means.iter().filter(|&&m| m > ACTIVE_THRESHOLD).count();
    Ok(FeatureReport {
        stage,
        channels: c,
        height: h,
        width: w,
        channel_mean_std: var.sqrt(),
        active_fraction: active as f64 / c as f64,
        channel_means: means,
    })
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    ensure!(pixels.len() == height * width, "buffer does not hold a {height}x{width} image");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Min-max scales one channel to 0..=255; constant channels (all-zero ones
/// included) become black.
fn to_gray(channel: &[f64]) -> Vec<u8> {
    let lo = channel.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; channel.len()];
    }
    channel.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Runs the checkpointed model on one P6 image and writes each channel of
/// the stage's activation as `channel_NNNN.pgm` plus `report.json` into
/// `out_dir`. The image is resized to the checkpoint's input size and
/// normalized with its statistics.
pub fn dump_feature_maps(checkpoint: &Path, image_path: &Path, stage: usize, out_dir: &Path) -> Result<FeatureReport> {
    let (mut model, header) = load_checkpoint(checkpoint)?;
    let (h, w, pixels) = read_ppm(image_path)?;
    let (th, tw) = (header.input_height, header.input_width);
    let pixels = resize_nearest(&pixels, 3, h, w, th, tw);
    let stats = header.normalization;
    let plane = th * tw;
    let data = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = i / plane;
            (p as f64 / 255.0 - stats.mean[c]) / stats.std[c]
        })
        .collect();
    let image = Tensor::from_vec(&[1, 3, th, tw], data, false)?;
    let maps = model.extract_feature_maps(&image, stage)?;
    let report = feature_report(&maps, stage)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let fplane = report.height * report.width;
    for (k, channel) in maps.data().chunks(fplane).enumerate() {
        write_pgm(&out_dir.join(format!("channel_{k:04}.pgm")), report.height, report.width, &to_gray(channel))?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out_dir.join("report.json"), json.as_bytes())?;
    Ok(report)
}
