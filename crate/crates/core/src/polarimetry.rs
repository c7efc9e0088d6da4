//! Linear Stokes algebra.
//!
//! Radiance is in normalized units: `0` is black, `1` is the saturation level.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;

use crate::grid::{Image, Mask, Shape};
use crate::{Error, Result};

/// Guard for the DoLP division.
pub const DIV_EPS: f64 = 1e-8;
/// Minimum total intensity for a pixel to carry usable signal.
pub const SIGNAL_FLOOR: f64 = 0.01;
/// Total intensity at or above which a pixel is treated as saturated.
pub const SATURATION: f64 = 1.0;

/// Four captures behind linear polarizers at 0°, 45°, 90° and 135°.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityCapture {
    pub i000: Image,
    pub i045: Image,
    pub i090: Image,
    pub i135: Image,
}

impl IntensityCapture {
    pub fn shape(&self) -> Shape {
        self.i000.shape()
    }

    fn check(&self) -> Result<Shape> {
        let shape = self.i000.shape();
        if !matches!(shape.channels, 1 | 3) {
            return Err(Error::param(
                "i000",
                format!("channel count must be 1 or 3, got {}", shape.channels),
            ));
        }
        self.i045.expect_shape("i045", shape)?;
        self.i090.expect_shape("i090", shape)?;
        self.i135.expect_shape("i135", shape)?;
        Ok(shape)
    }
}

/// Linear Stokes components `(S0, S1, S2)` per pixel and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct StokesMap {
    pub s0: Image,
    pub s1: Image,
    pub s2: Image,
}

impl StokesMap {
    pub fn zeros(shape: Shape) -> Self {
        let z = Image::zeros(shape.height, shape.width, shape.channels);
        Self {
            s0: z.clone(),
            s1: z.clone(),
            s2: z,
        }
    }

    pub fn shape(&self) -> Shape {
        self.s0.shape()
    }

    pub fn check(&self) -> Result<Shape> {
        let shape = self.s0.shape();
        self.s1.expect_shape("s1", shape)?;
        self.s2.expect_shape("s2", shape)?;
        Ok(shape)
    }

    pub fn components(&self) -> [&Image; 3] {
        [&self.s0, &self.s1, &self.s2]
    }

    /// Inverse of [`stokes_from_capture`].
    pub fn to_capture(&self) -> IntensityCapture {
        let half = |a: &Image, b: &Image, sign: f64| {
            a.zip_map(b, |x, y| 0.5 * (x + sign * y))
                .expect("components share a shape")
        };
        IntensityCapture {
            i000: half(&self.s0, &self.s1, 1.0),
            i090: half(&self.s0, &self.s1, -1.0),
            i045: half(&self.s0, &self.s2, 1.0),
            i135: half(&self.s0, &self.s2, -1.0),
        }
    }
}

/// Degree and angle of linear polarization.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarizationMap {
    pub dolp: Image,
    /// Radians in `[-π/2, π/2)`.
    pub aolp: Image,
}

/// `S0 = I0 + I90`, `S1 = I0 − I90`, `S2 = I45 − I135`.
pub fn stokes_from_capture(cap: &IntensityCapture) -> Result<StokesMap> {
    cap.check()?;
    Ok(StokesMap {
        s0: cap.i000.zip_map(&cap.i090, |a, b| a + b)?,
        s1: cap.i000.zip_map(&cap.i090, |a, b| a - b)?,
        s2: cap.i045.zip_map(&cap.i135, |a, b| a - b)?,
    })
}

/// Half-angle of `atan2(s2, s1)` on the branch `[-π/2, π/2)`.
#[inline]
pub fn aolp(s1: f64, s2: f64) -> f64 {
    let phi = 0.5 * s2.atan2(s1);
    if phi >= FRAC_PI_2 {
        phi - std::f64::consts::PI
    } else {
        phi
    }
}

/// DoLP in `[0, 1]`; zero where `s0` is below [`DIV_EPS`].
#[inline]
pub fn dolp(s0: f64, s1: f64, s2: f64) -> f64 {
    if s0 > DIV_EPS {
        ((s1 * s1 + s2 * s2).sqrt() / s0).min(1.0)
    } else {
        0.0
    }
}

pub fn dolp_aolp(s: &StokesMap) -> PolarizationMap {
    let n = s.s0.data().len();
    let (dolp_v, aolp_v): (Vec<f64>, Vec<f64>) = (0..n)
        .into_par_iter()
        .map(|i| {
            let (s0, s1, s2) = (s.s0.data()[i], s.s1.data()[i], s.s2.data()[i]);
            if s0 > DIV_EPS {
                (dolp(s0, s1, s2), aolp(s1, s2))
            } else {
                (0.0, 0.0)
            }
        })
        .unzip();
    let shape = s.shape();
    PolarizationMap {
        dolp: Image::from_vec(shape.height, shape.width, shape.channels, dolp_v)
            .expect("shape preserved"),
        aolp: Image::from_vec(shape.height, shape.width, shape.channels, aolp_v)
            .expect("shape preserved"),
    }
}

/// Per-channel physical validity test.
#[inline]
pub fn is_valid_sample(s0: f64, s1: f64, s2: f64) -> bool {
    s0 > SIGNAL_FLOOR && s0 < SATURATION && s1 * s1 + s2 * s2 <= s0 * s0
}

/// A pixel is valid when every channel has enough signal, is not saturated
/// and satisfies `S1² + S2² ≤ S0²`.
pub fn validity_mask(s: &StokesMap) -> Mask {
    let shape = s.shape();
    let c = shape.channels;
    let data = (0..shape.pixels())
        .into_par_iter()
        .map(|p| {
            let (a, b, d) = (s.s0.pixel(p), s.s1.pixel(p), s.s2.pixel(p));
            (0..c).all(|k| is_valid_sample(a[k], b[k], d[k]))
        })
        .collect();
    Mask::from_vec(shape.height, shape.width, data).expect("one flag per pixel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn px(v: f64) -> Image {
        Image::filled(1, 1, 1, v)
    }

    fn cap(a: f64, b: f64, c: f64, d: f64) -> IntensityCapture {
        IntensityCapture {
            i000: px(a),
            i045: px(b),
            i090: px(c),
            i135: px(d),
        }
    }

    fn stokes1(s0: f64, s1: f64, s2: f64) -> StokesMap {
        StokesMap {
            s0: px(s0),
            s1: px(s1),
            s2: px(s2),
        }
    }

    fn triple(s: &StokesMap) -> (f64, f64, f64) {
        (s.s0.data()[0], s.s1.data()[0], s.s2.data()[0])
    }

    #[test]
    fn stokes_examples() {
        let s = stokes_from_capture(&cap(0.7, 0.5, 0.3, 0.5)).unwrap();
        let (a, b, c) = triple(&s);
        assert!((a - 1.0).abs() < 1e-15 && (b - 0.4).abs() < 1e-15 && c == 0.0);
        assert_eq!(
            triple(&stokes_from_capture(&cap(0.5, 0.5, 0.5, 0.5)).unwrap()),
            (1.0, 0.0, 0.0)
        );
        assert_eq!(
            triple(&stokes_from_capture(&cap(1.0, 0.5, 0.0, 0.5)).unwrap()),
            (1.0, 1.0, 0.0)
        );
    }

    #[test]
    fn shape_mismatch_names_the_grid() {
        let mut c = cap(0.1, 0.1, 0.1, 0.1);
        c.i090 = Image::zeros(2, 1, 1);
        match stokes_from_capture(&c) {
            Err(Error::ShapeMismatch { what, .. }) => assert_eq!(what, "i090"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dolp_aolp_examples() {
        let p = dolp_aolp(&stokes1(1.0, 0.4, 0.0));
        assert!((p.dolp.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(p.aolp.data()[0], 0.0);

        let p = dolp_aolp(&stokes1(1.0, 0.0, 0.4));
        assert!((p.dolp.data()[0] - 0.4).abs() < 1e-15);
        assert!((p.aolp.data()[0] - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn aolp_wraps_onto_half_open_branch() {
        // Oracle: reduce 0.5 * atan2 into [-π/2, π/2) by subtracting π when needed.
        let p = dolp_aolp(&stokes1(1.0, -0.3, 0.0));
        assert!((p.dolp.data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(p.aolp.data()[0], -FRAC_PI_2);
        assert_eq!(aolp(-0.3, -0.0), -FRAC_PI_2);
        for k in 0..720 {
            let ang = -std::f64::consts::PI + k as f64 * std::f64::consts::PI / 360.0;
            let phi = aolp(ang.cos(), ang.sin());
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&phi), "{ang} -> {phi}");
            let back = 2.0 * phi;
            assert!(
                (back.cos() - ang.cos()).abs() < 1e-12 && (back.sin() - ang.sin()).abs() < 1e-12
            );
        }
    }

    #[test]
    fn degenerate_pixels_are_zero() {
        let p = dolp_aolp(&stokes1(0.0, 0.1, 0.2));
        assert_eq!((p.dolp.data()[0], p.aolp.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn mask_examples() {
        assert!(validity_mask(&stokes1(0.5, 0.1, 0.1)).at(0, 0));
        assert!(!validity_mask(&stokes1(0.005, 0.0, 0.0)).at(0, 0));
        assert!(!validity_mask(&stokes1(0.5, 0.4, 0.4)).at(0, 0));
    }

    #[test]
    fn mask_collapses_channels() {
        let s = StokesMap {
            s0: Image::from_vec(1, 1, 3, vec![0.5, 0.5, 0.005]).unwrap(),
            s1: Image::zeros(1, 1, 3),
            s2: Image::zeros(1, 1, 3),
        };
        assert!(!validity_mask(&s).at(0, 0));
    }

    #[test]
    fn nan_is_invalid() {
        assert!(!validity_mask(&stokes1(f64::NAN, 0.0, 0.0)).at(0, 0));
        assert!(!validity_mask(&stokes1(0.5, f64::NAN, 0.0)).at(0, 0));
    }

    #[test]
    fn to_capture_inverts_dyadic_values() {
        let s = StokesMap {
            s0: Image::from_vec(1, 2, 1, vec![0.625, 0.25]).unwrap(),
            s1: Image::from_vec(1, 2, 1, vec![0.125, -0.0625]).unwrap(),
            s2: Image::from_vec(1, 2, 1, vec![-0.25, 0.125]).unwrap(),
        };
        assert_eq!(stokes_from_capture(&s.to_capture()).unwrap(), s);
    }
}
