//! Per-pixel viewing directions.
//!
//! Camera coordinates are x right, y up, z toward the camera. Pixel
//! coordinates put `u` along columns and measure `v` upward from the bottom
//! row, so row `r` of an `H`-row image sits at `v = H − 1 − r`. The principal
//! point defaults to the image center.

use serde::{Deserialize, Serialize};

use crate::grid::{normalize_or_z, VectorField};
use crate::{Error, Result};

/// Projection model used to derive the viewing direction of every pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraModel {
    /// Every pixel looks along `(0, 0, 1)`.
    #[default]
    Orthographic,
    /// Pinhole camera parameterized by its horizontal field of view.
    Perspective {
        fov_deg: f64,
        width: usize,
        height: usize,
        /// Principal point `(c_x, c_y)` in pixels; the image center when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        principal_point: Option<[f64; 2]>,
    },
}

impl CameraModel {
    /// Centered perspective camera.
    pub fn perspective(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraModel::Perspective {
            fov_deg,
            width,
            height,
            principal_point: None,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if let CameraModel::Perspective {
            fov_deg,
            width,
            height,
            ..
        } = *self
        {
            if !(fov_deg > 0.0 && fov_deg < 180.0) {
                return Err(Error::param(
                    "fov_deg",
                    format!("must lie in (0, 180), got {fov_deg}"),
                ));
            }
            if width == 0 || height == 0 {
                return Err(Error::param("width/height", "must be positive"));
            }
        }
        Ok(())
    }

    /// `f = W / (2 tan(FoV/2))`; `None` for orthographic cameras.
    pub fn focal_length(&self) -> Option<f64> {
        match *self {
            CameraModel::Orthographic => None,
            CameraModel::Perspective { fov_deg, width, .. } => {
                Some(width as f64 / (2.0 * (fov_deg.to_radians() / 2.0).tan()))
            }
        }
    }

    /// `(f_x, f_y) = (f, f·H/W)`.
    pub fn focal_lengths(&self) -> Option<(f64, f64)> {
        match *self {
            CameraModel::Orthographic => None,
            CameraModel::Perspective { width, height, .. } => {
                let f = self.focal_length()?;
                Some((f, f * height as f64 / width as f64))
            }
        }
    }

    pub fn principal_point(&self) -> Option<[f64; 2]> {
        match *self {
            CameraModel::Orthographic => None,
            CameraModel::Perspective {
                width,
                height,
                principal_point,
                ..
            } => Some(
                principal_point
                    .unwrap_or([(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]),
            ),
        }
    }

    /// Unit direction from the surface toward the camera at every pixel of an
    /// `height × width` image.
    pub fn view_field(&self, height: usize, width: usize) -> Result<VectorField> {
        self.validate()?;
        match *self {
            CameraModel::Orthographic => Ok(VectorField::filled(height, width, [0.0, 0.0, 1.0])),
            CameraModel::Perspective {
                width: cw,
                height: ch,
                ..
            } => {
                if cw != width || ch != height {
                    return Err(Error::param(
                        "camera",
                        format!("camera is {ch}x{cw} but the image is {height}x{width}"),
                    ));
                }
                let (fx, fy) = self.focal_lengths().expect("perspective");
                let [cx, cy] = self.principal_point().expect("perspective");
                Ok(VectorField::from_fn(height, width, |row, col| {
                    let u = col as f64;
                    let v = (height - 1 - row) as f64;
                    normalize_or_z([(cx - u) / fx, (cy - v) / fy, 1.0])
                }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::norm;

    #[test]
    fn orthographic_is_constant() {
        let v = CameraModel::Orthographic.view_field(3, 5).unwrap();
        assert!(v.data().iter().all(|&d| d == [0.0, 0.0, 1.0]));
    }

    #[test]
    fn ninety_degree_fov_focal_length() {
        let cam = CameraModel::perspective(90.0, 768, 768).unwrap();
        assert!((cam.focal_length().unwrap() - 384.0).abs() < 1e-9);
        assert_eq!(
            cam.focal_lengths().unwrap().0,
            cam.focal_lengths().unwrap().1
        );
    }

    #[test]
    fn principal_point_looks_straight() {
        let cam = CameraModel::perspective(60.0, 5, 7).unwrap();
        let v = cam.view_field(7, 5).unwrap();
        assert_eq!(v.at(3, 2), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn rays_are_unit_and_point_back_to_center() {
        let cam = CameraModel::perspective(70.0, 16, 12).unwrap();
        let v = cam.view_field(12, 16).unwrap();
        for d in v.data() {
            assert!((norm(*d) - 1.0).abs() < 1e-12);
        }
        // right column → ray tilts left; top row → ray tilts down
        assert!(v.at(6, 15)[0] < 0.0);
        assert!(v.at(0, 8)[1] < 0.0);
    }

    #[test]
    fn fov_out_of_range_is_rejected() {
        assert!(CameraModel::perspective(200.0, 8, 8).is_err());
        assert!(CameraModel::perspective(0.0, 8, 8).is_err());
        assert!(CameraModel::perspective(180.0, 8, 8).is_err());
    }

    #[test]
    fn perspective_dimension_mismatch() {
        let cam = CameraModel::perspective(60.0, 8, 8).unwrap();
        assert!(cam.view_field(8, 9).is_err());
    }
}
