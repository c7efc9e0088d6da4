use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{check_field, check_input, Backbone, BackboneError, Capabilities, InputSpec};
use crate::grid::{normalize_jvp, normalize_or_z, normalize_vjp, Image, NormalMap, VectorField};
use crate::synth::{corrupt, CorruptionSpec};

#[derive(Clone, Debug, PartialEq)]
struct Tap {
    dr: isize,
    dc: isize,
    /// Row-major `3 × C`.
    weights: Vec<f64>,
}

/// Sparse linear map from an `H×W×C` image to a 3-vector field.
///
/// Each tap shifts the image toroidally by an offset and mixes its channels
/// with a `3×C` matrix: `(K d)(p) = Σ_k W_k · d(p − o_k)`. Offsets are
/// heavy-tailed, so most taps are local while a few reach across the image.
#[derive(Clone, Debug, PartialEq)]
pub struct TapCoupling {
    height: usize,
    width: usize,
    channels: usize,
    taps: Vec<Tap>,
}

impl TapCoupling {
    /// Fraction of the pixel count used as the number of taps.
    pub const DENSITY: f64 = 0.01;
    /// Radius scale of the offset distribution, in pixels.
    pub const RADIUS_SCALE: f64 = 2.0;

    pub fn seeded(spec: InputSpec, seed: u64) -> Self {
        Self::with_params(spec, seed, Self::DENSITY, Self::RADIUS_SCALE)
    }

    /// Panics unless the image has one or three channels.
    pub fn with_params(spec: InputSpec, seed: u64, density: f64, r0: f64) -> Self {
        assert!(
            matches!(spec.channels, 1 | 3),
            "coupling needs 1 or 3 channels"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = ((density * spec.pixels() as f64).round() as usize).max(1);
        let r_max = spec.height.max(spec.width) as f64 / 2.0;
        let mut taps: Vec<Tap> = (0..count)
            .map(|_| {
                let u: f64 = rng.random();
                let angle = rng.random::<f64>() * 2.0 * PI;
                let r = (r0 * (u * PI / 2.0 * 0.999).tan()).min(r_max);
                let decay = 1.0 / (1.0 + r / r0);
                let weights = (0..3 * spec.channels)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * decay)
                    .collect();
                Tap {
                    dr: (r * angle.sin()).round() as isize,
                    dc: (r * angle.cos()).round() as isize,
                    weights,
                }
            })
            .collect();
        let energy: f64 = taps.iter().flat_map(|t| &t.weights).map(|w| w * w).sum();
        let scale = (3.0 / energy).sqrt();
        for t in &mut taps {
            for w in &mut t.weights {
                *w *= scale;
            }
        }
        Self {
            height: spec.height,
            width: spec.width,
            channels: spec.channels,
            taps,
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Sums `Σ_k mix(W_k, src(row + sign·dr_k, col + sign·dc_k))` row by row,
    /// wrapping around the borders. Taps are visited in a fixed order so the
    /// result does not depend on the thread count.
    fn shifted_sum<const OUT: usize>(
        &self,
        sign: isize,
        src_width: usize,
        src: &[f64],
        mix: impl Fn(&[f64], &[f64], &mut [f64; OUT]) + Sync,
    ) -> Vec<[f64; OUT]> {
        let (h, w) = (self.height as isize, self.width);
        let mut out = vec![[0.0; OUT]; self.height * w];
        out.par_chunks_mut(w).enumerate().for_each(|(row, line)| {
            for t in &self.taps {
                let sr = (row as isize + sign * t.dr).rem_euclid(h) as usize;
                let shift = (sign * t.dc).rem_euclid(w as isize) as usize;
                let base = sr * w;
                for (col, acc) in line.iter_mut().enumerate() {
                    let mut sc = col + shift;
                    if sc >= w {
                        sc -= w;
                    }
                    let i = (base + sc) * src_width;
                    mix(&t.weights, &src[i..i + src_width], acc);
                }
            }
        });
        out
    }

    pub fn apply(&self, d: &Image) -> Vec<[f64; 3]> {
        let ch = self.channels;
        self.shifted_sum::<3>(-1, ch, d.data(), |wts, px, acc| {
            for (i, a) in acc.iter_mut().enumerate() {
                for k in 0..ch {
                    *a += wts[i * ch + k] * px[k];
                }
            }
        })
    }

    pub fn apply_transpose(&self, g: &[[f64; 3]]) -> Image {
        let ch = self.channels;
        let flat = g.as_flattened();
        let data: Vec<f64> = if ch == 3 {
            self.shifted_sum::<3>(1, 3, flat, |wts, px, acc| {
                for (k, a) in acc.iter_mut().enumerate() {
                    for i in 0..3 {
                        *a += wts[i * 3 + k] * px[i];
                    }
                }
            })
            .into_iter()
            .flatten()
            .collect()
        } else {
            self.shifted_sum::<1>(1, 3, flat, |wts, px, acc| {
                for i in 0..3 {
                    acc[0] += wts[i] * px[i];
                }
            })
            .into_iter()
            .flatten()
            .collect()
        };
        Image::from_vec(self.height, self.width, ch, data).expect("sized")
    }
}

/// `f(x) = normalize(n_c + gain · K(x − x_ref))`.
///
/// `n_c` is a fixed (typically corrupted ground-truth) normal map and `K` a
/// [`TapCoupling`]. The coupling acts on the deviation from a reference image,
/// normally the observed input, so the unperturbed output is `n_c` itself.
#[derive(Clone, Debug)]
pub struct CorruptedOracle {
    base: NormalMap,
    reference: Image,
    gain: f64,
    coupling: TapCoupling,
    /// Last input and its pre-normalized output; the refinement loop asks for
    /// the VJP at the point it just evaluated.
    cache: Option<(Image, Vec<[f64; 3]>)>,
}

impl CorruptedOracle {
    pub const DEFAULT_GAIN: f64 = 100.0;

    pub fn new(base: NormalMap, reference: Image, gain: f64, seed: u64) -> Self {
        let coupling = TapCoupling::seeded(reference.shape(), seed);
        Self::with_coupling(base, reference, gain, coupling)
    }

    /// Oracle built around `corrupt(gt, corruption)`.
    pub fn corrupting(
        gt: &NormalMap,
        corruption: &CorruptionSpec,
        reference: Image,
        gain: f64,
        seed: u64,
    ) -> Self {
        Self::new(corrupt(gt, corruption), reference, gain, seed)
    }

    /// Panics if the pieces disagree in size.
    pub fn with_coupling(
        base: NormalMap,
        reference: Image,
        gain: f64,
        coupling: TapCoupling,
    ) -> Self {
        assert_eq!(
            (base.height(), base.width()),
            (reference.height(), reference.width())
        );
        assert_eq!(
            (coupling.height, coupling.width, coupling.channels),
            (reference.height(), reference.width(), reference.channels())
        );
        Self {
            base,
            reference,
            gain,
            coupling,
            cache: None,
        }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn base(&self) -> &NormalMap {
        &self.base
    }

    fn pre_normalized(&mut self, x: &Image) -> Vec<[f64; 3]> {
        if let Some((cx, u)) = &self.cache {
            if cx == x {
                return u.clone();
            }
        }
        let u = self.evaluate(x);
        self.cache = Some((x.clone(), u.clone()));
        u
    }

    fn evaluate(&self, x: &Image) -> Vec<[f64; 3]> {
        let d = x
            .zip_map(&self.reference, |a, b| a - b)
            .expect("shape checked");
        let k = self.coupling.apply(&d);
        self.base
            .data()
            .iter()
            .zip(k)
            .map(|(b, k)| {
                [
                    b[0] + self.gain * k[0],
                    b[1] + self.gain * k[1],
                    b[2] + self.gain * k[2],
                ]
            })
            .collect()
    }
}

impl Backbone for CorruptedOracle {
    fn spec(&self) -> InputSpec {
        self.reference.shape()
    }

    fn caps(&self) -> Capabilities {
        Capabilities::ANALYTIC
    }

    fn forward(&mut self, x: &Image) -> Result<NormalMap, BackboneError> {
        check_input(self.spec(), x)?;
        if self.gain == 0.0 {
            return Ok(self.base.clone());
        }
        let data = self
            .pre_normalized(x)
            .into_iter()
            .map(normalize_or_z)
            .collect();
        Ok(VectorField::from_vec(self.base.height(), self.base.width(), data).expect("sized"))
    }

    fn vjp_input(&mut self, x: &Image, cotangent: &VectorField) -> Result<Image, BackboneError> {
        check_input(self.spec(), x)?;
        check_field(self.spec(), cotangent)?;
        if self.gain == 0.0 {
            return Ok(Image::zeros_like(x));
        }
        let u = self.pre_normalized(x);
        let gu: Vec<[f64; 3]> = u
            .par_iter()
            .zip(cotangent.data().par_iter())
            .map(|(&u, &g)| {
                let v = normalize_vjp(u, g);
                [self.gain * v[0], self.gain * v[1], self.gain * v[2]]
            })
            .collect();
        Ok(self.coupling.apply_transpose(&gu))
    }

    fn jvp_input(&mut self, x: &Image, tangent: &Image) -> Result<VectorField, BackboneError> {
        check_input(self.spec(), x)?;
        check_input(self.spec(), tangent)?;
        if self.gain == 0.0 {
            return Ok(VectorField::zeros(x.height(), x.width()));
        }
        let u = self.pre_normalized(x);
        let k = self.coupling.apply(tangent);
        let data = u
            .iter()
            .zip(k)
            .map(|(&u, k)| normalize_jvp(u, [self.gain * k[0], self.gain * k[1], self.gain * k[2]]))
            .collect();
        Ok(VectorField::from_vec(x.height(), x.width(), data).expect("sized"))
    }
}
