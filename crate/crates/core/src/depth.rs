//! Face-prior depth recovery: joint-trilateral smoothness weights, the
//! quadratic recovery energy and its Jacobi fixed-point iteration.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Per-pixel depth in meters; zero marks an invalid measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> Self {
        DepthMap { width, height, values: vec![0.0; (width * height) as usize] }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.values[(y * self.width + x) as usize] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.at(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// 16-bit PGM in millimeters, the interchange form for depth frames.
    pub fn save_pgm16(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for v in &self.values {
            let mm = (v * 1000.0).round().clamp(0.0, 65535.0) as u16;
            f.write_all(&mm.to_be_bytes())?;
        }
        Ok(())
    }

    pub fn load_pgm16(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (magic, rest) = crate::image::pnm_parse_token(&bytes)?;
        if magic != b"P5" {
            return Err(Error::Format("pgm: expected magic P5".into()));
        }
        let (w, rest) = crate::image::pnm_parse_number(rest)?;
        let (h, rest) = crate::image::pnm_parse_number(rest)?;
        let (maxval, rest) = crate::image::pnm_parse_number(rest)?;
        if maxval != 65535 {
            return Err(Error::Format(format!("pgm: expected 16-bit maxval, got {maxval}")));
        }
        let rest = &rest[1..];
        let n = (w * h) as usize;
        if rest.len() < 2 * n {
            return Err(Error::Format("pgm: truncated pixel data".into()));
        }
        let values = (0..n)
            .map(|i| u16::from_be_bytes([rest[2 * i], rest[2 * i + 1]]) as f64 / 1000.0)
            .collect();
        Ok(DepthMap { width: w, height: h, values })
    }

    /// Raw float32 form (meters), header `BTDF`.
    pub fn save_raw_f32(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"BTDF")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&self.width.to_le_bytes())?;
        f.write_all(&self.height.to_le_bytes())?;
        for v in &self.values {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_raw_f32(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = crate::io::ByteReader::new(&bytes);
        r.expect_magic(b"BTDF")?;
        let version = r.read_u32()?;
        if version != 1 {
            return Err(Error::Format(format!("depth raw: unsupported version {version}")));
        }
        let w = r.read_u32()?;
        let h = r.read_u32()?;
        let n = (w * h) as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.read_f32()? as f64);
        }
        Ok(DepthMap { width: w, height: h, values })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Fidelity weight toward the measured depth `Z`.
    pub lambda_d: f64,
    /// Prior weight toward the rendered face surface `V`.
    pub lambda_f: f64,
    /// Window half-width of the neighborhood.
    pub window_radius: u32,
    /// Spatial bandwidth, pixels.
    pub sigma_s: f64,
    /// Color bandwidth on 0-255 grayscale intensities.
    pub sigma_c: f64,
    /// Guide-depth bandwidth, meters.
    pub sigma_d: f64,
    pub iterations: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            lambda_d: 0.5,
            lambda_f: 1.0,
            window_radius: 3,
            sigma_s: 3.0,
            sigma_c: 10.0,
            sigma_d: 0.05,
            iterations: 30,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_d < 0.0 || self.lambda_f < 0.0 {
            return Err(Error::Config("filter lambdas must be nonnegative".into()));
        }
        if self.sigma_s <= 0.0 || self.sigma_c <= 0.0 || self.sigma_d <= 0.0 {
            return Err(Error::Config("filter bandwidths must be positive".into()));
        }
        if self.lambda_d + self.lambda_f <= 0.0 && self.window_radius < 1 {
            return Err(Error::Config("filter update undefined: no data terms and no window".into()));
        }
        Ok(())
    }
}

/// Precomputed joint-trilateral weights over the window neighborhood.
///
/// `w` holds the unnormalized weight toward every window offset (zero for
/// neighbors outside the image); `norm[i]` is the per-pixel normalizer so
/// that `alpha_ij = w_ij / norm[i]` sums to one over the window.
pub struct JtfWeights {
    width: usize,
    height: usize,
    offsets: Vec<(i32, i32)>,
    w: Vec<f32>,
    norm: Vec<f64>,
}

impl JtfWeights {
    /// Builds the weights from the color guide and the (raw) guide depth.
    /// The depth factor is 1 whenever either depth sample is invalid.
    pub fn compute(guide_color: &RgbImage, guide_depth: &DepthMap, cfg: &FilterConfig) -> Result<Self> {
        cfg.validate()?;
        if guide_color.width != guide_depth.width || guide_color.height != guide_depth.height {
            return Err(Error::DimensionMismatch(format!(
                "guide color {}x{} vs guide depth {}x{}",
                guide_color.width, guide_color.height, guide_depth.width, guide_depth.height
            )));
        }
        let (wpx, hpx) = (guide_color.width as usize, guide_color.height as usize);
        let r = cfg.window_radius as i32;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx != 0 || dy != 0 {
                    offsets.push((dx, dy));
                }
            }
        }
        let spatial: Vec<f64> = offsets
            .iter()
            .map(|&(dx, dy)| {
                (-((dx * dx + dy * dy) as f64) / (2.0 * cfg.sigma_s * cfg.sigma_s)).exp()
            })
            .collect();
        let gray: Vec<f64> = (0..hpx)
            .flat_map(|y| (0..wpx).map(move |x| (x, y)))
            .map(|(x, y)| guide_color.gray_at(x as f64, y as f64))
            .collect();

        let n_off = offsets.len();
        let inv_2sc2 = 1.0 / (2.0 * cfg.sigma_c * cfg.sigma_c);
        let inv_2sd2 = 1.0 / (2.0 * cfg.sigma_d * cfg.sigma_d);
        let mut w = vec![0.0f32; wpx * hpx * n_off];
        let mut norm = vec![0.0f64; wpx * hpx];
        let z = &guide_depth.values;

        w.par_chunks_mut(wpx * n_off)
            .zip(norm.par_chunks_mut(wpx))
            .enumerate()
            .for_each(|(y, (wrow, nrow))| {
                for x in 0..wpx {
                    let i = y * wpx + x;
                    let mut s = 0.0;
                    for (k, &(dx, dy)) in offsets.iter().enumerate() {
                        let xj = x as i32 + dx;
                        let yj = y as i32 + dy;
                        if xj < 0 || yj < 0 || xj >= wpx as i32 || yj >= hpx as i32 {
                            continue;
                        }
                        let j = yj as usize * wpx + xj as usize;
                        let dc = gray[i] - gray[j];
                        let mut wij = spatial[k] * (-dc * dc * inv_2sc2).exp();
                        if z[i] > 0.0 && z[j] > 0.0 {
                            let dz = z[i] - z[j];
                            wij *= (-dz * dz * inv_2sd2).exp();
                        }
                        wrow[x * n_off + k] = wij as f32;
                        s += wij as f32 as f64;
                    }
                    nrow[x] = s;
                }
            });
        Ok(JtfWeights { width: wpx, height: hpx, offsets, w, norm })
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    #[inline]
    fn neighbor(&self, i: usize, k: usize) -> Option<usize> {
        let (dx, dy) = self.offsets[k];
        let x = (i % self.width) as i32 + dx;
        let y = (i / self.width) as i32 + dy;
        if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }

    /// Normalized weight `alpha_ij` of window neighbor `k` of pixel `i`.
    pub fn alpha(&self, i: usize, k: usize) -> f64 {
        let n = self.offsets.len();
        let wij = self.w[i * n + k] as f64;
        if wij == 0.0 {
            0.0
        } else {
            wij / self.norm[i]
        }
    }
}

/// Outcome flags of the recovery, reported rather than raised.
#[derive(Debug, Clone, Default)]
pub struct RecoverFlags {
    /// Both inputs fully invalid; output is all zeros.
    pub empty_inputs: bool,
    /// Pixels whose Jacobi denominator vanished and passed through.
    pub passthrough_pixels: usize,
}

/// The recovery energy `E_r + lambda_d E_d + lambda_f E_f` over the frame.
/// Invalid `Z` pixels drop their fidelity term and invalid `V` pixels their
/// prior term.
pub fn energy(x: &DepthMap, z: &DepthMap, v: &DepthMap, weights: &JtfWeights, cfg: &FilterConfig) -> f64 {
    let n_off = weights.offsets.len();
    let mut e_r = 0.0;
    for i in 0..x.values.len() {
        if weights.norm[i] <= 0.0 {
            continue;
        }
        let inv = 1.0 / weights.norm[i];
        let mut acc = 0.0;
        for k in 0..n_off {
            let wij = weights.w[i * n_off + k] as f64;
            if wij == 0.0 {
                continue;
            }
            let j = weights.neighbor(i, k).unwrap();
            let d = x.values[i] - x.values[j];
            acc += wij * d * d;
        }
        e_r += 0.5 * acc * inv;
    }
    let mut e_d = 0.0;
    let mut e_f = 0.0;
    for i in 0..x.values.len() {
        if z.values[i] > 0.0 {
            let d = x.values[i] - z.values[i];
            e_d += 0.5 * d * d;
        }
        if v.values[i] > 0.0 {
            let d = x.values[i] - v.values[i];
            e_f += 0.5 * d * d;
        }
    }
    e_r + cfg.lambda_d * e_d + cfg.lambda_f * e_f
}

/// One Jacobi sweep of the vanishing-gradient fixed point. All reads come
/// from `x_t`; returns the next iterate and the passthrough count.
pub fn filter_step(
    x_t: &DepthMap,
    z: &DepthMap,
    v: &DepthMap,
    weights: &JtfWeights,
    cfg: &FilterConfig,
) -> (DepthMap, usize) {
    let n_off = weights.offsets.len();
    let wpx = weights.width;
    let mut next = vec![0.0f64; x_t.values.len()];
    let passthrough: usize = next
        .par_chunks_mut(wpx)
        .enumerate()
        .map(|(y, row)| {
            let mut passed = 0usize;
            for (x, out) in row.iter_mut().enumerate() {
                let i = y * wpx + x;
                let lam_d = if z.values[i] > 0.0 { cfg.lambda_d } else { 0.0 };
                let lam_f = if v.values[i] > 0.0 { cfg.lambda_f } else { 0.0 };
                let mut num = lam_d * z.values[i] + lam_f * v.values[i];
                let mut den = lam_d + lam_f;
                let inv_i = if weights.norm[i] > 0.0 { 1.0 / weights.norm[i] } else { 0.0 };
                for k in 0..n_off {
                    let wij = weights.w[i * n_off + k] as f64;
                    if wij == 0.0 {
                        continue;
                    }
                    let j = weights.neighbor(i, k).unwrap();
                    let inv_j = if weights.norm[j] > 0.0 { 1.0 / weights.norm[j] } else { 0.0 };
                    let c = wij * (inv_i + inv_j);
                    num += c * x_t.values[j];
                    den += c;
                }
                if den > 0.0 {
                    *out = num / den;
                } else {
                    *out = x_t.values[i];
                    passed += 1;
                }
            }
            passed
        })
        .sum();
    (DepthMap { width: x_t.width, height: x_t.height, values: next }, passthrough)
}

/// Full recovery: initialize from `Z` (falling back to `V`), compute the
/// guide weights once, then iterate [`filter_step`].
pub fn recover(
    z: &DepthMap,
    v: &DepthMap,
    guide_color: &RgbImage,
    cfg: &FilterConfig,
) -> Result<(DepthMap, RecoverFlags)> {
    cfg.validate()?;
    if z.width != v.width || z.height != v.height {
        return Err(Error::DimensionMismatch(format!(
            "measured {}x{} vs prior {}x{} depth",
            z.width, z.height, v.width, v.height
        )));
    }
    let mut flags = RecoverFlags::default();
    if z.valid_count() == 0 && v.valid_count() == 0 {
        flags.empty_inputs = true;
        return Ok((DepthMap::new(z.width, z.height), flags));
    }
    let mut x = z.clone();
    for (xi, (zi, vi)) in x.values.iter_mut().zip(z.values.iter().zip(v.values.iter())) {
        if *zi <= 0.0 {
            *xi = if *vi > 0.0 { *vi } else { 0.0 };
        }
    }
    let weights = JtfWeights::compute(guide_color, z, cfg)?;
    for _ in 0..cfg.iterations {
        let (next, passed) = filter_step(&x, z, v, &weights, cfg);
        flags.passthrough_pixels = passed;
        x = next;
    }
    Ok((x, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn flat_color(w: u32, h: u32, v: u8) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        img.data.fill(v);
        img
    }

    fn random_depth(rng: &mut StdRng, w: u32, h: u32, base: f64) -> DepthMap {
        let mut d = DepthMap::new(w, h);
        for v in &mut d.values {
            *v = base + rng.random_range(-0.05..0.05);
        }
        d
    }

    #[test]
    fn weights_normalize_to_one() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut img = RgbImage::new(9, 7);
        for b in &mut img.data {
            *b = rng.random();
        }
        let depth = random_depth(&mut rng, 9, 7, 1.5);
        let cfg = FilterConfig { window_radius: 2, ..Default::default() };
        let w = JtfWeights::compute(&img, &depth, &cfg).unwrap();
        for i in 0..(9 * 7) {
            let total: f64 = (0..w.offsets().len()).map(|k| w.alpha(i, k)).sum();
            assert!((total - 1.0).abs() < 1e-12, "pixel {i} sums to {total}");
        }
    }

    #[test]
    fn uniform_guides_reduce_to_spatial_gaussian() {
        let img = flat_color(8, 8, 128);
        let mut depth = DepthMap::new(8, 8);
        depth.values.fill(1.0);
        let cfg = FilterConfig { window_radius: 2, ..Default::default() };
        let w = JtfWeights::compute(&img, &depth, &cfg).unwrap();
        // Interior pixel: weights match the normalized spatial profile.
        let i = (4 * 8 + 4) as usize;
        let spatial: Vec<f64> = w
            .offsets()
            .iter()
            .map(|&(dx, dy)| (-((dx * dx + dy * dy) as f64) / (2.0 * cfg.sigma_s * cfg.sigma_s)).exp())
            .collect();
        let total: f64 = spatial.iter().sum();
        for (k, s) in spatial.iter().enumerate() {
            assert!((w.alpha(i, k) - s / total).abs() < 1e-9);
        }
    }

    #[test]
    fn color_edge_suppresses_cross_weights() {
        // Two-tone patch: left half black, right half white.
        let mut img = RgbImage::new(10, 6);
        for y in 0..6 {
            for x in 0..10 {
                let v = if x < 5 { 0 } else { 255 };
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let mut depth = DepthMap::new(10, 6);
        depth.values.fill(1.0);
        let cfg = FilterConfig { window_radius: 2, sigma_c: 10.0, ..Default::default() };
        let w = JtfWeights::compute(&img, &depth, &cfg).unwrap();
        let i = (3 * 10 + 4) as usize; // just left of the edge
        let mut same_side: f64 = 0.0;
        let mut across: f64 = 0.0;
        for (k, &(dx, dy)) in w.offsets().iter().enumerate() {
            if dx.abs() > 1 || dy.abs() > 1 || (dx == 0 && dy == 0) {
                continue;
            }
            let xj = 4 + dx;
            let a = w.alpha(i, k);
            if xj >= 5 {
                across = across.max(a);
            } else if dx != 0 || dy != 0 {
                same_side = same_side.max(a);
            }
        }
        assert!(across < 1e-3 * same_side, "across {across} same {same_side}");
    }

    #[test]
    fn constant_input_is_fixed_point_and_zero_energy() {
        let img = flat_color(6, 6, 77);
        let mut c = DepthMap::new(6, 6);
        c.values.fill(1.25);
        let cfg = FilterConfig { window_radius: 1, iterations: 3, ..Default::default() };
        let w = JtfWeights::compute(&img, &c, &cfg).unwrap();
        assert_eq!(energy(&c, &c, &c, &w, &cfg), 0.0);
        let (next, passed) = filter_step(&c, &c, &c, &w, &cfg);
        assert_eq!(passed, 0);
        for (a, b) in next.values.iter().zip(c.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothness_energy_matches_double_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(32);
        let mut img = RgbImage::new(7, 5);
        for b in &mut img.data {
            *b = rng.random();
        }
        let guide = random_depth(&mut rng, 7, 5, 1.0);
        let x = random_depth(&mut rng, 7, 5, 1.0);
        let cfg = FilterConfig { lambda_d: 0.0, lambda_f: 0.0, window_radius: 2, ..Default::default() };
        let w = JtfWeights::compute(&img, &guide, &cfg).unwrap();
        let zeros = DepthMap::new(7, 5);
        let got = energy(&x, &zeros, &zeros, &w, &cfg);
        // Direct double loop over pixel pairs.
        let mut want = 0.0;
        for i in 0..(7 * 5) as usize {
            for k in 0..w.offsets().len() {
                if let Some(j) = w.neighbor(i, k) {
                    let d = x.values[i] - x.values[j];
                    want += 0.5 * w.alpha(i, k) * d * d;
                }
            }
        }
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn fidelity_dominated_limit_returns_measurement() {
        let mut rng = StdRng::seed_from_u64(33);
        let mut img = RgbImage::new(6, 6);
        for b in &mut img.data {
            *b = rng.random();
        }
        let z = random_depth(&mut rng, 6, 6, 1.0);
        let v = random_depth(&mut rng, 6, 6, 1.2);
        let cfg = FilterConfig { lambda_d: 1e9, lambda_f: 0.0, window_radius: 1, ..Default::default() };
        let w = JtfWeights::compute(&img, &z, &cfg).unwrap();
        let x0 = random_depth(&mut rng, 6, 6, 1.1);
        let (x1, _) = filter_step(&x0, &z, &v, &w, &cfg);
        for (a, b) in x1.values.iter().zip(z.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn jacobi_matches_dense_solve_and_energy_is_monotone() {
        let mut rng = StdRng::seed_from_u64(34);
        let (wpx, hpx) = (16u32, 16u32);
        let mut img = RgbImage::new(wpx, hpx);
        for b in &mut img.data {
            *b = rng.random();
        }
        let z = random_depth(&mut rng, wpx, hpx, 2.0);
        let v = random_depth(&mut rng, wpx, hpx, 2.0);
        let cfg = FilterConfig { window_radius: 2, iterations: 50, ..Default::default() };
        let w = JtfWeights::compute(&img, &z, &cfg).unwrap();

        // Direct dense solve of the vanishing-gradient linear system.
        let n = (wpx * hpx) as usize;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for i in 0..n {
            let mut diag = cfg.lambda_d + cfg.lambda_f;
            b[i] = cfg.lambda_d * z.values[i] + cfg.lambda_f * v.values[i];
            for k in 0..w.offsets().len() {
                if let Some(j) = w.neighbor(i, k) {
                    let c = w.alpha(i, k) + w.alpha(j, w.offsets().len() - 1 - k);
                    diag += c;
                    a[(i, j)] -= c;
                }
            }
            a[(i, i)] = diag;
        }
        let direct = a.lu().solve(&b).unwrap();

        let mut x = z.clone();
        let mut last = energy(&x, &z, &v, &w, &cfg);
        for _ in 0..cfg.iterations {
            let (next, _) = filter_step(&x, &z, &v, &w, &cfg);
            x = next;
            let e = energy(&x, &z, &v, &w, &cfg);
            assert!(e <= last + 1e-12 * last.max(1.0), "energy rose: {last} -> {e}");
            last = e;
        }
        let mut max_err = 0.0f64;
        for i in 0..n {
            max_err = max_err.max((x.values[i] - direct[i]).abs());
        }
        assert!(max_err < 1e-6, "Jacobi vs dense solve differ by {max_err}");
    }

    #[test]
    fn recover_zero_iterations_returns_initialization() {
        let mut rng = StdRng::seed_from_u64(35);
        let img = flat_color(5, 5, 10);
        let mut z = random_depth(&mut rng, 5, 5, 1.0);
        z.values[7] = 0.0; // hole filled from the prior
        let mut v = random_depth(&mut rng, 5, 5, 1.0);
        v.values[3] = 0.0;
        let cfg = FilterConfig { iterations: 0, ..Default::default() };
        let (x, flags) = recover(&z, &v, &img, &cfg).unwrap();
        assert!(!flags.empty_inputs);
        for i in 0..25 {
            let want = if z.values[i] > 0.0 { z.values[i] } else { v.values[i] };
            assert_eq!(x.values[i], want);
        }
    }

    #[test]
    fn recover_flags_fully_invalid_inputs() {
        let img = flat_color(4, 4, 0);
        let z = DepthMap::new(4, 4);
        let v = DepthMap::new(4, 4);
        let (x, flags) = recover(&z, &v, &img, &FilterConfig::default()).unwrap();
        assert!(flags.empty_inputs);
        assert!(x.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_stays_within_input_hull() {
        let mut rng = StdRng::seed_from_u64(36);
        let mut img = RgbImage::new(8, 8);
        for b in &mut img.data {
            *b = rng.random();
        }
        let z = random_depth(&mut rng, 8, 8, 1.5);
        let v = random_depth(&mut rng, 8, 8, 1.5);
        let cfg = FilterConfig { iterations: 25, window_radius: 2, ..Default::default() };
        let (x, _) = recover(&z, &v, &img, &cfg).unwrap();
        let lo = z
            .values
            .iter()
            .chain(v.values.iter())
            .fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = z
            .values
            .iter()
            .chain(v.values.iter())
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for &val in &x.values {
            assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
        }
    }

    #[test]
    fn pgm16_roundtrip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(37);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm16");
        let mut d = DepthMap::new(6, 4);
        for v in &mut d.values {
            *v = (rng.random_range(0u32..4000) as f64) / 1000.0;
        }
        d.save_pgm16(&path).unwrap();
        let loaded = DepthMap::load_pgm16(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        loaded.save_pgm16(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn raw_f32_roundtrip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(38);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.btdf");
        let mut d = DepthMap::new(3, 5);
        for v in &mut d.values {
            *v = (rng.random::<f32>() * 3.0) as f64;
        }
        d.save_raw_f32(&path).unwrap();
        let loaded = DepthMap::load_raw_f32(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        loaded.save_raw_f32(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
        assert_eq!(d.values, loaded.values);
    }
}
