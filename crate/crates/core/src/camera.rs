//! Pinhole camera model. The camera sits at the origin looking down +z,
//! the image y axis points down, 3D units are meters and 2D units pixels.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Conventional desk-scale consumer RGBD calibration.
    pub fn default_vga() -> Self {
        CameraIntrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::OutOfRange(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::OutOfRange(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(self.project_unchecked(p))
    }

    /// Projection without the depth check; caller guarantees `p.z > 0`.
    #[inline]
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.cx + self.fx * p.x / p.z, self.cy + self.fy * p.y / p.z)
    }

    /// Jacobian of `project` with respect to the 3D point.
    #[inline]
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let inv_z = 1.0 / p.z;
        nalgebra::Matrix2x3::new(
            self.fx * inv_z,
            0.0,
            -self.fx * p.x * inv_z * inv_z,
            0.0,
            self.fy * inv_z,
            -self.fy * p.y * inv_z * inv_z,
        )
    }

    /// Back-projects pixel `(u, v)` at depth `z` to a camera-frame point.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Writes the `key = value` text form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "fx = {}", self.fx);
        let _ = writeln!(s, "fy = {}", self.fy);
        let _ = writeln!(s, "cx = {}", self.cx);
        let _ = writeln!(s, "cy = {}", self.cy);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width = None;
        let mut height = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("intrinsics line {}: expected key = value", lineno + 1))
            })?;
            let value = value.trim();
            let parse = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("intrinsics line {}: bad number {v:?}", lineno + 1)))
            };
            match key.trim() {
                "fx" => fx = Some(parse(value)?),
                "fy" => fy = Some(parse(value)?),
                "cx" => cx = Some(parse(value)?),
                "cy" => cy = Some(parse(value)?),
                "width" => width = Some(parse(value)? as u32),
                "height" => height = Some(parse(value)? as u32),
                other => {
                    return Err(Error::Format(format!("intrinsics: unknown key {other:?}")));
                }
            }
        }
        let missing = |name: &str| Error::Format(format!("intrinsics: missing key {name}"));
        CameraIntrinsics::new(
            fx.ok_or_else(|| missing("fx"))?,
            fy.ok_or_else(|| missing("fy"))?,
            cx.ok_or_else(|| missing("cx"))?,
            cy.ok_or_else(|| missing("cy"))?,
            width.ok_or_else(|| missing("width"))? as u32,
            height.ok_or_else(|| missing("height"))? as u32,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn optical_axis_hits_principal_point() {
        let k = CameraIntrinsics::default_vga();
        for z in [0.3, 1.0, 5.0] {
            let p = k.project(&Vector3::new(0.0, 0.0, z)).unwrap();
            assert_relative_eq!(p, Vector2::new(k.cx, k.cy), epsilon = 1e-12);
        }
    }

    #[test]
    fn pinhole_arithmetic() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let p = k.project(&Vector3::new(1.0, 0.0, 5.0)).unwrap();
        assert_relative_eq!(p.x, 420.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 240.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let k = CameraIntrinsics::default_vga();
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(k.project(&Vector3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn project_backproject_roundtrip() {
        let k = CameraIntrinsics::default_vga();
        for (u, v, z) in [(12.3, 456.7, 0.8), (320.0, 240.0, 2.0), (601.5, 3.25, 4.5)] {
            let p = k.backproject(u, v, z);
            let q = k.project(&p).unwrap();
            assert_relative_eq!(q, Vector2::new(u, v), epsilon = 1e-9);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intrinsics.txt");
        let k = CameraIntrinsics::new(525.0, 520.5, 319.5, 239.5, 640, 480).unwrap();
        k.save(&path).unwrap();
        let loaded = CameraIntrinsics::load(&path).unwrap();
        assert_eq!(k, loaded);
    }

    proptest! {
        // Projection is invariant along rays through the camera center.
        #[test]
        fn scale_invariant_along_rays(
            x in -0.5f64..0.5, y in -0.5f64..0.5, z in 0.2f64..5.0, lambda in 0.1f64..10.0
        ) {
            let k = CameraIntrinsics::default_vga();
            let p = Vector3::new(x, y, z);
            let a = k.project(&p).unwrap();
            let b = k.project(&(p * lambda)).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }
    }
}
