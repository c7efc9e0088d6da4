//! Frozen normal estimators `n = f(x)` with input-side derivatives.
//!
//! A backbone maps an `H×W×C` image to an `H×W` field of unit normals and
//! exposes `(∂f/∂x)ᵀ·g` and `(∂f/∂x)·t`. The toy implementations here have
//! closed-form derivatives; [`bridge`] forwards the same calls to a child
//! process.

pub mod bridge;
mod oracle;
mod smoother;

pub use oracle::{CorruptedOracle, TapCoupling};
pub use smoother::LinearSmoother;

use serde::{Deserialize, Serialize};

use crate::grid::{dot, Image, NormalMap, Shape, VectorField};

/// Image shape a backbone session accepts.
pub type InputSpec = Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub has_analytic_vjp: bool,
    pub has_jvp: bool,
    pub is_deterministic: bool,
}

impl Capabilities {
    pub const ANALYTIC: Capabilities = Capabilities {
        has_analytic_vjp: true,
        has_jvp: true,
        is_deterministic: true,
    };

    pub(crate) fn to_bits(self) -> u32 {
        self.has_analytic_vjp as u32
            | (self.has_jvp as u32) << 1
            | (self.is_deterministic as u32) << 2
    }

    pub(crate) fn from_bits(bits: u32) -> Self {
        Self {
            has_analytic_vjp: bits & 1 != 0,
            has_jvp: bits & 2 != 0,
            is_deterministic: bits & 4 != 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("backbone input: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },
    #[error("backbone does not support {0}")]
    Unsupported(&'static str),
    #[error("finite-difference fallback refused for {height}x{width} input (cap {cap}x{cap})")]
    FallbackTooLarge {
        height: usize,
        width: usize,
        cap: usize,
    },
    #[error("bridge transport: {0}")]
    Transport(String),
    #[error("bridge timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("malformed bridge frame: {0}")]
    Protocol(String),
    #[error("bridge reported: {0}")]
    Remote(String),
}

/// A frozen normal estimator.
pub trait Backbone {
    fn spec(&self) -> InputSpec;

    fn caps(&self) -> Capabilities;

    fn forward(&mut self, x: &Image) -> Result<NormalMap, BackboneError>;

    /// `(∂f/∂x)ᵀ · cotangent`.
    fn vjp_input(&mut self, x: &Image, cotangent: &VectorField) -> Result<Image, BackboneError>;

    /// `(∂f/∂x) · tangent`.
    fn jvp_input(&mut self, x: &Image, tangent: &Image) -> Result<VectorField, BackboneError>;
}

/// Owned backbone handle as used by the refinement loop and the cli.
pub type BackboneSession = Box<dyn Backbone + Send>;

impl<B: Backbone + ?Sized> Backbone for Box<B> {
    fn spec(&self) -> InputSpec {
        (**self).spec()
    }
    fn caps(&self) -> Capabilities {
        (**self).caps()
    }
    fn forward(&mut self, x: &Image) -> Result<NormalMap, BackboneError> {
        (**self).forward(x)
    }
    fn vjp_input(&mut self, x: &Image, cotangent: &VectorField) -> Result<Image, BackboneError> {
        (**self).vjp_input(x, cotangent)
    }
    fn jvp_input(&mut self, x: &Image, tangent: &Image) -> Result<VectorField, BackboneError> {
        (**self).jvp_input(x, tangent)
    }
}

pub(crate) fn check_input(spec: InputSpec, x: &Image) -> Result<(), BackboneError> {
    if x.shape() != spec {
        return Err(BackboneError::ShapeMismatch {
            expected: spec,
            found: x.shape(),
        });
    }
    Ok(())
}

pub(crate) fn check_field(spec: InputSpec, v: &VectorField) -> Result<(), BackboneError> {
    if v.height() != spec.height || v.width() != spec.width {
        return Err(BackboneError::ShapeMismatch {
            expected: spec.with_channels(3),
            found: v.shape(),
        });
    }
    Ok(())
}

/// Largest side the finite-difference fallback accepts by default.
pub const FD_SIZE_CAP: usize = 64;

/// Central-difference VJP: one pair of forwards per input sample.
///
/// Only meant for tests against bridges without an analytic VJP.
pub fn finite_difference_vjp<B: Backbone + ?Sized>(
    backbone: &mut B,
    x: &Image,
    cotangent: &VectorField,
    step: f64,
    cap: usize,
) -> Result<Image, BackboneError> {
    let spec = backbone.spec();
    check_input(spec, x)?;
    check_field(spec, cotangent)?;
    if spec.height > cap || spec.width > cap {
        return Err(BackboneError::FallbackTooLarge {
            height: spec.height,
            width: spec.width,
            cap,
        });
    }
    let mut out = Image::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = backbone.forward(&probe)?;
        probe.data_mut()[i] = orig - step;
        let dn = backbone.forward(&probe)?;
        probe.data_mut()[i] = orig;
        let mut acc = 0.0;
        for ((a, b), g) in up.data().iter().zip(dn.data()).zip(cotangent.data()) {
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            acc += dot(d, *g);
        }
        out.data_mut()[i] = acc / (2.0 * step);
    }
    Ok(out)
}

/// Central-difference JVP: two forwards.
pub fn finite_difference_jvp<B: Backbone + ?Sized>(
    backbone: &mut B,
    x: &Image,
    tangent: &Image,
    step: f64,
) -> Result<VectorField, BackboneError> {
    check_input(backbone.spec(), x)?;
    check_input(backbone.spec(), tangent)?;
    let shift = |s: f64| {
        x.zip_map(tangent, |a, t| a + s * t)
            .expect("shapes checked")
    };
    let up = backbone.forward(&shift(step))?;
    let dn = backbone.forward(&shift(-step))?;
    let data = up
        .data()
        .iter()
        .zip(dn.data())
        .map(|(a, b)| {
            [
                (a[0] - b[0]) / (2.0 * step),
                (a[1] - b[1]) / (2.0 * step),
                (a[2] - b[2]) / (2.0 * step),
            ]
        })
        .collect();
    Ok(VectorField::from_vec(x.height(), x.width(), data).expect("sized"))
}

/// Wraps a backbone whose VJP is served by finite differences instead.
pub struct FiniteDifferenceVjp<B> {
    pub inner: B,
    pub step: f64,
    pub cap: usize,
}

impl<B: Backbone> FiniteDifferenceVjp<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            step: 1e-5,
            cap: FD_SIZE_CAP,
        }
    }
}

impl<B: Backbone> Backbone for FiniteDifferenceVjp<B> {
    fn spec(&self) -> InputSpec {
        self.inner.spec()
    }
    fn caps(&self) -> Capabilities {
        Capabilities {
            has_analytic_vjp: false,
            ..self.inner.caps()
        }
    }
    fn forward(&mut self, x: &Image) -> Result<NormalMap, BackboneError> {
        self.inner.forward(x)
    }
    fn vjp_input(&mut self, x: &Image, cotangent: &VectorField) -> Result<Image, BackboneError> {
        finite_difference_vjp(&mut self.inner, x, cotangent, self.step, self.cap)
    }
    fn jvp_input(&mut self, x: &Image, tangent: &Image) -> Result<VectorField, BackboneError> {
        if self.inner.caps().has_jvp {
            self.inner.jvp_input(x, tangent)
        } else {
            finite_difference_jvp(&mut self.inner, x, tangent, self.step)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capability_bits_round_trip() {
        for bits in 0..8 {
            assert_eq!(Capabilities::from_bits(bits).to_bits(), bits);
        }
    }

    #[test]
    fn fallback_refuses_large_inputs() {
        let mut b = FiniteDifferenceVjp::new(LinearSmoother::new(Shape::new(65, 8, 3), 1));
        let x = Image::zeros(65, 8, 3);
        let g = VectorField::zeros(65, 8);
        assert!(matches!(
            b.vjp_input(&x, &g),
            Err(BackboneError::FallbackTooLarge { height: 65, .. })
        ));
    }

    #[test]
    fn fallback_matches_analytic_vjp() {
        let shape = Shape::new(5, 6, 3);
        let x = Image::from_fn(5, 6, 3, |r, c, k| ((r * 7 + c * 3 + k) % 5) as f64 * 0.1);
        let g = VectorField::from_fn(5, 6, |r, c| [(r as f64 - 2.0) * 0.3, c as f64 * 0.1, 0.5]);
        let mut exact = LinearSmoother::new(shape, 1);
        let want = exact.vjp_input(&x, &g).unwrap();
        let mut fd = FiniteDifferenceVjp::new(LinearSmoother::new(shape, 1));
        let got = fd.vjp_input(&x, &g).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
