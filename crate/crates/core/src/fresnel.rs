//! Closed-form Fresnel polarization renderer.
//!
//! A surface normal `n`, viewed along `v`, has elevation `θ = arccos(n·v)` and
//! azimuth `ψ = atan2(n_y, n_x)`. Diffuse reflection is polarized with degree
//! `ρ_d(θ)` along `ψ`, specular reflection with degree `ρ_s(θ)` along
//! `ψ + π/2`. With diffuse radiance `L_d = S0 − L_s` the predicted Stokes
//! vector is
//!
//! ```text
//! Ŝ0 = L_d + L_s
//! Ŝ1 = L_d ρ_d cos 2ψ − L_s ρ_s cos 2ψ
//! Ŝ2 = L_d ρ_d sin 2ψ − L_s ρ_s sin 2ψ
//! ```
//!
//! Conventions at the edges of the domain:
//!
//! - `θ > π/2` (back-facing) is evaluated at `θ = π/2` with zero θ-gradient.
//! - `ρ_s` is clamped to `[0, 1]` with zero gradient outside.
//! - Where `n_x = n_y = 0` the azimuth is `0` and carries no gradient.
//!
//! The renderer never normalizes `n`; callers pass unit normals and chain
//! through their own normalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{dot, Image, Shape, VectorField};
use crate::polarimetry::StokesMap;
use crate::{Error, Result};

/// Dielectric refractive index shared by the whole scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub eta: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self { eta: 1.5 }
    }
}

impl Material {
    pub fn new(eta: f64) -> Result<Self> {
        let m = Self { eta };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 1.0 && self.eta.is_finite()) {
            return Err(Error::param(
                "eta",
                format!("refractive index must exceed 1, got {}", self.eta),
            ));
        }
        Ok(())
    }
}

/// Diffuse/specular radiance split of the observed intensity.
///
/// Built so that `l_d + l_s == s0` holds bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceSplit {
    pub l_d: Image,
    pub l_s: Image,
}

impl RadianceSplit {
    /// Splits `s0` given a specular estimate, projecting it into `[0, s0]`.
    pub fn from_specular(s0: &Image, l_s: &Image) -> Result<Self> {
        s0.expect_shape("l_s", l_s.shape())
            .map_err(|_| Error::shape("l_s", s0.shape(), l_s.shape()))?;
        let mut l_d = Image::zeros_like(s0);
        let mut spec = Image::zeros_like(s0);
        for (i, (&total, &ls)) in s0.data().iter().zip(l_s.data()).enumerate() {
            let (d, s) = exact_split(total, ls);
            l_d.data_mut()[i] = d;
            spec.data_mut()[i] = s;
        }
        Ok(Self { l_d, l_s: spec })
    }

    pub fn recompose(&self) -> Image {
        self.l_d
            .zip_map(&self.l_s, |a, b| a + b)
            .expect("split halves share a shape")
    }
}

/// Projects `l_s` into `[0, s0]` and returns `(s0 − l_s, l_s)` adjusted so the
/// two parts add back to `s0` exactly.
///
/// One of the two subtractions is always exact (Sterbenz), so computing the
/// diffuse part first and re-deriving the specular part from it leaves no
/// rounding residue.
#[inline]
pub fn exact_split(s0: f64, l_s: f64) -> (f64, f64) {
    let hi = s0.max(0.0);
    let clamped = l_s.clamp(0.0, hi);
    let d = s0 - clamped;
    (d, s0 - d)
}

/// Elevation and azimuth of a normal field.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalField {
    /// `[0, π]`.
    pub theta: Image,
    /// `(−π, π]`; `0` where `n_x = n_y = 0`.
    pub psi: Image,
}

pub fn to_spherical(n: &VectorField, v: &VectorField) -> Result<SphericalField> {
    v.expect_dims("view field", n.height(), n.width())?;
    let (theta, psi): (Vec<f64>, Vec<f64>) = n
        .data()
        .par_iter()
        .zip(v.data().par_iter())
        .map(|(&nn, &vv)| {
            let theta = dot(nn, vv).clamp(-1.0, 1.0).acos();
            let psi = if nn[0] == 0.0 && nn[1] == 0.0 {
                0.0
            } else {
                let p = nn[1].atan2(nn[0]);
                if p <= -std::f64::consts::PI {
                    std::f64::consts::PI
                } else {
                    p
                }
            };
            (theta, psi)
        })
        .unzip();
    Ok(SphericalField {
        theta: Image::from_vec(n.height(), n.width(), 1, theta)?,
        psi: Image::from_vec(n.height(), n.width(), 1, psi)?,
    })
}

/// Diffuse DoLP `ρ_d(θ)`.
pub fn dolp_diffuse(theta: f64, eta: f64) -> f64 {
    diffuse_from_cos(clamp_elevation_cos(theta.cos()).0, eta).0
}

/// Specular DoLP `ρ_s(θ)`, clamped to `[0, 1]`.
pub fn dolp_specular(theta: f64, eta: f64) -> f64 {
    specular_from_cos(clamp_elevation_cos(theta.cos()).0, eta).0
}

/// Clamps `cos θ` into `[0, 1]`; the flag reports whether it was interior.
#[inline]
fn clamp_elevation_cos(c: f64) -> (f64, bool) {
    if c < 0.0 {
        (0.0, false)
    } else if c > 1.0 {
        (1.0, false)
    } else {
        (c, true)
    }
}

/// `ρ_d` and `dρ_d/d(cos θ)` for `cos θ ∈ [0, 1]`.
#[inline]
fn diffuse_from_cos(c: f64, eta: f64) -> (f64, f64) {
    let s2 = 1.0 - c * c;
    let e2 = eta * eta;
    let a = (eta - 1.0 / eta).powi(2);
    let b = (eta + 1.0 / eta).powi(2);
    let r = (e2 - s2).sqrt();
    let num = a * s2;
    let den = 2.0 + 2.0 * e2 - b * s2 + 4.0 * c * r;
    let dnum = -2.0 * a * c;
    let dden = 2.0 * b * c + 4.0 * (r + c * c / r);
    (num / den, (dnum * den - num * dden) / (den * den))
}

/// `ρ_s` and `dρ_s/d(cos θ)` for `cos θ ∈ [0, 1]`, clamped to `[0, 1]`.
#[inline]
fn specular_from_cos(c: f64, eta: f64) -> (f64, f64) {
    let s2 = 1.0 - c * c;
    let e2 = eta * eta;
    let r = (e2 - s2).sqrt();
    let num = 2.0 * s2 * c * r;
    let den = e2 - s2 - e2 * s2 + 2.0 * s2 * s2;
    let dnum = 2.0 * (-2.0 * c * c * r + s2 * r + s2 * c * c / r);
    let dden = 2.0 * c * (1.0 + e2) - 8.0 * c * s2;
    let rho = num / den;
    if rho > 1.0 {
        (1.0, 0.0)
    } else if rho < 0.0 {
        (0.0, 0.0)
    } else {
        (rho, (dnum * den - num * dden) / (den * den))
    }
}

/// Per-pixel quantities shared by the forward pass and its adjoint.
#[derive(Clone, Copy, Debug)]
struct PixelGeometry {
    rho_d: f64,
    rho_s: f64,
    /// Derivatives with respect to the (unclamped) dot product `n·v`.
    drho_d: f64,
    drho_s: f64,
    cos2: f64,
    sin2: f64,
    dcos2: [f64; 3],
    dsin2: [f64; 3],
}

#[inline]
fn pixel_geometry(n: [f64; 3], v: [f64; 3], eta: f64) -> PixelGeometry {
    let (c, interior) = clamp_elevation_cos(dot(n, v));
    let (rho_d, mut drho_d) = diffuse_from_cos(c, eta);
    let (rho_s, mut drho_s) = specular_from_cos(c, eta);
    if !interior {
        drho_d = 0.0;
        drho_s = 0.0;
    }
    let (x, y) = (n[0], n[1]);
    let q = x * x + y * y;
    let (cos2, sin2, dcos2, dsin2) = if q <= f64::MIN_POSITIVE.sqrt() {
        (1.0, 0.0, [0.0; 3], [0.0; 3])
    } else {
        let q2 = q * q;
        (
            (x * x - y * y) / q,
            2.0 * x * y / q,
            [4.0 * x * y * y / q2, -4.0 * y * x * x / q2, 0.0],
            [
                2.0 * y * (y * y - x * x) / q2,
                2.0 * x * (x * x - y * y) / q2,
                0.0,
            ],
        )
    };
    PixelGeometry {
        rho_d,
        rho_s,
        drho_d,
        drho_s,
        cos2,
        sin2,
        dcos2,
        dsin2,
    }
}

/// Diffuse and specular Stokes addends of one channel.
#[inline]
fn channel_components(g: &PixelGeometry, l_d: f64, l_s: f64) -> ([f64; 3], [f64; 3]) {
    let d = l_d * g.rho_d;
    let p = l_s * g.rho_s;
    (
        [l_d, d * g.cos2, d * g.sin2],
        [l_s, p * -g.cos2, p * -g.sin2],
    )
}

struct Inputs<'a> {
    n: &'a VectorField,
    l_s: &'a Image,
    s0: &'a Image,
    v: &'a VectorField,
    eta: f64,
}

fn check_inputs<'a>(
    n: &'a VectorField,
    l_s: &'a Image,
    s0: &'a Image,
    v: &'a VectorField,
    mat: &Material,
) -> Result<Inputs<'a>> {
    mat.validate()?;
    let shape = s0.shape();
    n.expect_dims("normals", shape.height, shape.width)?;
    v.expect_dims("view field", shape.height, shape.width)?;
    l_s.expect_shape("l_s", shape)?;
    Ok(Inputs {
        n,
        l_s,
        s0,
        v,
        eta: mat.eta,
    })
}

fn images_from_pixels(shape: Shape, px: Vec<[Vec<f64>; 3]>) -> StokesMap {
    let mut out = [
        Vec::with_capacity(shape.len()),
        Vec::with_capacity(shape.len()),
        Vec::with_capacity(shape.len()),
    ];
    for p in px {
        for (k, comp) in p.into_iter().enumerate() {
            out[k].extend(comp);
        }
    }
    let [a, b, c] = out;
    let mk = |d| Image::from_vec(shape.height, shape.width, shape.channels, d).expect("sized");
    StokesMap {
        s0: mk(a),
        s1: mk(b),
        s2: mk(c),
    }
}

/// Predicted Stokes map for unit normals `n` and specular radiance `l_s`
/// under observed intensity `s0`.
pub fn render_stokes(
    n: &VectorField,
    l_s: &Image,
    s0: &Image,
    v: &VectorField,
    mat: &Material,
) -> Result<StokesMap> {
    let inp = check_inputs(n, l_s, s0, v, mat)?;
    let shape = s0.shape();
    let c = shape.channels;
    let px: Vec<[Vec<f64>; 3]> = (0..shape.pixels())
        .into_par_iter()
        .map(|p| {
            let g = pixel_geometry(inp.n.data()[p], inp.v.data()[p], inp.eta);
            let (s0p, lsp) = (inp.s0.pixel(p), inp.l_s.pixel(p));
            let mut out = [vec![0.0; c], vec![0.0; c], vec![0.0; c]];
            for k in 0..c {
                let (d, s) = channel_components(&g, s0p[k] - lsp[k], lsp[k]);
                out[0][k] = s0p[k];
                out[1][k] = d[1] + s[1];
                out[2][k] = d[2] + s[2];
            }
            out
        })
        .collect();
    Ok(images_from_pixels(shape, px))
}

/// Gradients of `Σ cotangent ⊙ render_stokes(n, l_s, …)` with respect to `n`
/// (treated as a free 3-vector per pixel) and `l_s`.
pub fn render_stokes_vjp(
    n: &VectorField,
    l_s: &Image,
    s0: &Image,
    v: &VectorField,
    mat: &Material,
    cotangent: &StokesMap,
) -> Result<(VectorField, Image)> {
    let inp = check_inputs(n, l_s, s0, v, mat)?;
    let shape = s0.shape();
    cotangent.s0.expect_shape("cotangent s0", shape)?;
    cotangent.s1.expect_shape("cotangent s1", shape)?;
    cotangent.s2.expect_shape("cotangent s2", shape)?;
    let c = shape.channels;
    let per_pixel: Vec<([f64; 3], Vec<f64>)> = (0..shape.pixels())
        .into_par_iter()
        .map(|p| {
            let g = pixel_geometry(inp.n.data()[p], inp.v.data()[p], inp.eta);
            let v = inp.v.data()[p];
            let (s0p, lsp) = (inp.s0.pixel(p), inp.l_s.pixel(p));
            let (g1, g2) = (cotangent.s1.pixel(p), cotangent.s2.pixel(p));
            let mut grad_ls = vec![0.0; c];
            let mut d_dot = 0.0;
            let mut d_cos2 = 0.0;
            let mut d_sin2 = 0.0;
            for k in 0..c {
                let (ld, ls) = (s0p[k] - lsp[k], lsp[k]);
                let amp = ld * g.rho_d - ls * g.rho_s;
                let w = g1[k] * g.cos2 + g2[k] * g.sin2;
                grad_ls[k] = -w * (g.rho_d + g.rho_s);
                d_dot += w * (ld * g.drho_d - ls * g.drho_s);
                d_cos2 += g1[k] * amp;
                d_sin2 += g2[k] * amp;
            }
            let mut grad_n = [0.0; 3];
            for (j, gn) in grad_n.iter_mut().enumerate() {
                *gn = d_dot * v[j] + d_cos2 * g.dcos2[j] + d_sin2 * g.dsin2[j];
            }
            (grad_n, grad_ls)
        })
        .collect();
    let mut grad_n = Vec::with_capacity(shape.pixels());
    let mut grad_ls = Vec::with_capacity(shape.len());
    for (gn, gl) in per_pixel {
        grad_n.push(gn);
        grad_ls.extend(gl);
    }
    Ok((
        VectorField::from_vec(shape.height, shape.width, grad_n)?,
        Image::from_vec(shape.height, shape.width, c, grad_ls)?,
    ))
}

/// Diffuse and specular Stokes addends rendered from an explicit radiance
/// split. When `l_d + l_s` equals the observed `s0` (as [`RadianceSplit`]
/// guarantees), their sum is bit-identical to [`render_stokes`].
pub fn component_stokes(
    n: &VectorField,
    l_d: &Image,
    l_s: &Image,
    v: &VectorField,
    mat: &Material,
) -> Result<(StokesMap, StokesMap)> {
    mat.validate()?;
    let shape = l_d.shape();
    l_s.expect_shape("l_s", shape)?;
    n.expect_dims("normals", shape.height, shape.width)?;
    v.expect_dims("view field", shape.height, shape.width)?;
    let c = shape.channels;
    let px: Vec<([Vec<f64>; 3], [Vec<f64>; 3])> = (0..shape.pixels())
        .into_par_iter()
        .map(|p| {
            let g = pixel_geometry(n.data()[p], v.data()[p], mat.eta);
            let (ldp, lsp) = (l_d.pixel(p), l_s.pixel(p));
            let mut dif = [vec![0.0; c], vec![0.0; c], vec![0.0; c]];
            let mut spe = [vec![0.0; c], vec![0.0; c], vec![0.0; c]];
            for k in 0..c {
                let (d, s) = channel_components(&g, ldp[k], lsp[k]);
                for i in 0..3 {
                    dif[i][k] = d[i];
                    spe[i][k] = s[i];
                }
            }
            (dif, spe)
        })
        .collect();
    let (dif, spe): (Vec<_>, Vec<_>) = px.into_iter().unzip();
    Ok((
        images_from_pixels(shape, dif),
        images_from_pixels(shape, spe),
    ))
}

/// Sum of two Stokes maps.
pub fn add_stokes(a: &StokesMap, b: &StokesMap) -> Result<StokesMap> {
    Ok(StokesMap {
        s0: a.s0.zip_map(&b.s0, |x, y| x + y)?,
        s1: a.s1.zip_map(&b.s1, |x, y| x + y)?,
        s2: a.s2.zip_map(&b.s2, |x, y| x + y)?,
    })
}
