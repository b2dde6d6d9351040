//! Evaluation metrics: landmark RMSE, lost-frame fraction and depth MAE.

use nalgebra::Vector2;

use crate::depth::DepthMap;
use crate::error::{Error, Result};

/// Root mean square 2D landmark distance for one frame, pixels.
pub fn per_frame_rmse(pred: &[Vector2<f64>], truth: &[Vector2<f64>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "rmse over {} predicted vs {} truth landmarks",
            pred.len(),
            truth.len()
        )));
    }
    let mean_sq = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t).norm_squared())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Per-frame RMSE averaged over frames, pixels.
pub fn eval_rmse(pred: &[Vec<Vector2<f64>>], truth: &[Vec<Vector2<f64>>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "rmse over {} predicted vs {} truth frames",
            pred.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth.iter()) {
        total += per_frame_rmse(p, t)?;
    }
    Ok(total / pred.len() as f64)
}

/// Fraction of frames lost to empty output or RMSE above `tau`.
pub fn eval_lost_fraction(rmse: &[f64], empty: &[bool], tau: f64) -> Result<f64> {
    if rmse.len() != empty.len() || rmse.is_empty() {
        return Err(Error::DimensionMismatch("lost fraction needs matched per-frame lists".into()));
    }
    let lost = rmse
        .iter()
        .zip(empty.iter())
        .filter(|(r, e)| **e || **r > tau)
        .count();
    Ok(lost as f64 / rmse.len() as f64)
}

/// Mean absolute depth error in millimeters over the mask, counting pixels
/// where both maps carry a valid measurement.
pub fn eval_mae_mm(recovered: &DepthMap, truth: &DepthMap, mask: &[bool]) -> Result<f64> {
    let n = (recovered.width * recovered.height) as usize;
    if truth.values.len() != n || mask.len() != n {
        return Err(Error::DimensionMismatch("mae inputs must share dimensions".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if mask[i] && recovered.values[i] > 0.0 && truth.values[i] > 0.0 {
            sum += (recovered.values[i] - truth.values[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("mae: no jointly valid pixels in mask".into()));
    }
    Ok(sum / count as f64 * 1000.0)
}

/// Validity mask of a depth map, the usual evaluation region.
pub fn valid_mask(depth: &DepthMap) -> Vec<bool> {
    depth.values.iter().map(|v| *v > 0.0).collect()
}
