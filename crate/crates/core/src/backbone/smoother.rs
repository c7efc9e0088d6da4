use rayon::prelude::*;

use super::{check_field, check_input, Backbone, BackboneError, Capabilities, InputSpec};
use crate::grid::{normalize_jvp, normalize_or_z, normalize_vjp, Image, NormalMap, VectorField};

/// `f(x) = normalize(M · box_r(x) + b)`.
///
/// `box_r` averages each channel over the in-bounds `(2r+1)²` window. Gray
/// inputs are replicated to three channels before the head. The head itself is
/// affine, so the derivative is the box stencil pushed through `M` and the
/// normalization Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSmoother {
    spec: InputSpec,
    pub radius: usize,
    pub mixing: [[f64; 3]; 3],
    pub bias: [f64; 3],
}

impl LinearSmoother {
    pub const DEFAULT_MIXING: [[f64; 3]; 3] = [[0.5, -0.2, 0.1], [-0.1, 0.4, 0.2], [0.2, 0.2, 0.6]];
    pub const DEFAULT_BIAS: [f64; 3] = [0.0, 0.0, 1.0];

    /// Panics unless the input has one or three channels.
    pub fn new(spec: InputSpec, radius: usize) -> Self {
        Self::with_head(spec, radius, Self::DEFAULT_MIXING, Self::DEFAULT_BIAS)
    }

    pub fn with_head(
        spec: InputSpec,
        radius: usize,
        mixing: [[f64; 3]; 3],
        bias: [f64; 3],
    ) -> Self {
        assert!(
            matches!(spec.channels, 1 | 3),
            "smoother needs 1 or 3 input channels"
        );
        Self {
            spec,
            radius,
            mixing,
            bias,
        }
    }

    fn window(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        let r = self.radius;
        (
            row.saturating_sub(r),
            (row + r).min(self.spec.height - 1),
            col.saturating_sub(r),
            (col + r).min(self.spec.width - 1),
        )
    }

    /// Number of in-bounds samples in the window centred on `(row, col)`.
    pub fn window_size(&self, row: usize, col: usize) -> usize {
        let (r0, r1, c0, c1) = self.window(row, col);
        (r1 - r0 + 1) * (c1 - c0 + 1)
    }

    /// Box mean lifted to three channels.
    fn smooth(&self, x: &Image) -> Vec<[f64; 3]> {
        let (h, w, c) = (self.spec.height, self.spec.width, self.spec.channels);
        (0..h * w)
            .into_par_iter()
            .map(|p| {
                let (r0, r1, c0, c1) = self.window(p / w, p % w);
                let mut acc = [0.0; 3];
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        let px = x.pixel(rr * w + cc);
                        for k in 0..3 {
                            acc[k] += px[if c == 1 { 0 } else { k }];
                        }
                    }
                }
                let n = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                [acc[0] / n, acc[1] / n, acc[2] / n]
            })
            .collect()
    }

    fn head(&self, m: [f64; 3]) -> [f64; 3] {
        let mut u = self.bias;
        for (i, ui) in u.iter_mut().enumerate() {
            *ui += self.mixing[i][0] * m[0] + self.mixing[i][1] * m[1] + self.mixing[i][2] * m[2];
        }
        u
    }

    fn pre_normalized(&self, x: &Image) -> Vec<[f64; 3]> {
        self.smooth(x).into_iter().map(|m| self.head(m)).collect()
    }
}

impl Backbone for LinearSmoother {
    fn spec(&self) -> InputSpec {
        self.spec
    }

    fn caps(&self) -> Capabilities {
        Capabilities::ANALYTIC
    }

    fn forward(&mut self, x: &Image) -> Result<NormalMap, BackboneError> {
        check_input(self.spec, x)?;
        let data = self
            .pre_normalized(x)
            .into_iter()
            .map(normalize_or_z)
            .collect();
        Ok(VectorField::from_vec(self.spec.height, self.spec.width, data).expect("sized"))
    }

    fn vjp_input(&mut self, x: &Image, cotangent: &VectorField) -> Result<Image, BackboneError> {
        check_input(self.spec, x)?;
        check_field(self.spec, cotangent)?;
        let (h, w, c) = (self.spec.height, self.spec.width, self.spec.channels);
        let u = self.pre_normalized(x);
        // cotangent on the box output, pre-divided by each window's size
        let gb: Vec<[f64; 3]> = (0..h * w)
            .into_par_iter()
            .map(|p| {
                let gu = normalize_vjp(u[p], cotangent.data()[p]);
                let n = self.window_size(p / w, p % w) as f64;
                let mut g = [0.0; 3];
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk = (self.mixing[0][k] * gu[0]
                        + self.mixing[1][k] * gu[1]
                        + self.mixing[2][k] * gu[2])
                        / n;
                }
                g
            })
            .collect();
        // the window relation is symmetric, so scattering equals gathering
        let data: Vec<f64> = (0..h * w)
            .into_par_iter()
            .flat_map_iter(|q| {
                let (r0, r1, c0, c1) = self.window(q / w, q % w);
                let mut acc = [0.0; 3];
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        let g = gb[rr * w + cc];
                        for k in 0..3 {
                            acc[k] += g[k];
                        }
                    }
                }
                if c == 1 {
                    vec![acc[0] + acc[1] + acc[2]]
                } else {
                    acc.to_vec()
                }
            })
            .collect();
        Ok(Image::from_vec(h, w, c, data).expect("sized"))
    }

    fn jvp_input(&mut self, x: &Image, tangent: &Image) -> Result<VectorField, BackboneError> {
        check_input(self.spec, x)?;
        check_input(self.spec, tangent)?;
        let u = self.pre_normalized(x);
        let dm = self.smooth(tangent);
        let data = u
            .iter()
            .zip(dm)
            .map(|(&u, m)| {
                let du = self.head(m);
                let du = [
                    du[0] - self.bias[0],
                    du[1] - self.bias[1],
                    du[2] - self.bias[2],
                ];
                normalize_jvp(u, du)
            })
            .collect();
        Ok(VectorField::from_vec(self.spec.height, self.spec.width, data).expect("sized"))
    }
}
