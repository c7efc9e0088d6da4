//! Synthetic polarimetric scenes with known normals.
//!
//! Ground-truth Stokes maps come from the renderer in [`crate::fresnel`].
//! Captures are stored at `f32` precision and the returned Stokes map is
//! recomputed from them, so the capture/Stokes round trip is exact and
//! survives 32-bit files.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::fresnel::{exact_split, render_stokes, Material};
use crate::grid::{dot, normalize_or_z, Image, Mask, NormalMap, VectorField};
use crate::polarimetry::{stokes_from_capture, validity_mask, IntensityCapture, StokesMap};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// Sphere seen head-on. The center defaults to the image center.
    Sphere {
        radius: f64,
        #[serde(default)]
        center: Option<[f64; 2]>,
    },
    /// Plane filling the frame, tilted by `tilt_deg` toward `azimuth_deg`
    /// (0 = +x, 90 = +y).
    Plane {
        tilt_deg: f64,
        #[serde(default = "default_plane_azimuth")]
        azimuth_deg: f64,
    },
    /// Sphere whose normals are perturbed by a seeded sum of waves.
    BumpySphere {
        radius: f64,
        #[serde(default)]
        center: Option<[f64; 2]>,
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_plane_azimuth() -> f64 {
    90.0
}

/// Lambertian shading: `albedo · (ambient + (1 − ambient) · max(0, n·l))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shading {
    pub light: [f64; 3],
    /// One entry per channel (1 or 3).
    pub albedo: Vec<f64>,
    #[serde(default = "default_ambient")]
    pub ambient: f64,
}

fn default_ambient() -> f64 {
    0.1
}

/// Specular radiance pattern, identical in every channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Specular {
    #[default]
    None,
    /// `peak · exp(−a² / 2w²)`, `a` the angle in radians between `n` and
    /// `direction`.
    Lobe {
        direction: [f64; 3],
        width: f64,
        peak: f64,
    },
    /// `peak · exp(−(n·axis − offset)² / 2w²)`: a bright band of the
    /// environment reflected across the surface.
    Band {
        axis: [f64; 3],
        offset: f64,
        width: f64,
        peak: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub geometry: Geometry,
    pub shading: Shading,
    #[serde(default)]
    pub specular: Specular,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_eta() -> f64 {
    1.5
}

impl SceneSpec {
    /// 128×128 sphere with colored diffuse shading and a specular lobe.
    pub fn sphere() -> Self {
        Self {
            height: 128,
            width: 128,
            geometry: Geometry::Sphere {
                radius: 56.0,
                center: None,
            },
            shading: Shading {
                light: [0.3, 0.4, 0.85],
                albedo: vec![0.6, 0.44, 0.32],
                ambient: 0.1,
            },
            specular: Specular::Lobe {
                direction: [-0.4, 0.3, 0.87],
                width: 0.25,
                peak: 0.35,
            },
            camera: CameraModel::Orthographic,
            eta: 1.5,
        }
    }

    /// The default sphere resized to `size × size`.
    pub fn small_sphere(size: usize) -> Self {
        let mut s = Self::sphere();
        s.height = size;
        s.width = size;
        s.geometry = Geometry::Sphere {
            radius: size as f64 * 0.4375,
            center: None,
        };
        s
    }

    pub fn channels(&self) -> usize {
        self.shading.albedo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::param("height/width", "must be positive"));
        }
        if !matches!(self.channels(), 1 | 3) {
            return Err(Error::param("shading.albedo", "needs 1 or 3 entries"));
        }
        if self
            .shading
            .albedo
            .iter()
            .any(|&a| !(0.0..=1.0).contains(&a))
        {
            return Err(Error::param("shading.albedo", "entries must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.shading.ambient) {
            return Err(Error::param("shading.ambient", "must lie in [0, 1]"));
        }
        match self.geometry {
            Geometry::Sphere { radius, .. } | Geometry::BumpySphere { radius, .. }
                if !(radius > 0.0) =>
            {
                return Err(Error::param("geometry.radius", "must be positive"));
            }
            Geometry::Plane { tilt_deg, .. } if !(0.0..90.0).contains(&tilt_deg) => {
                return Err(Error::param("geometry.tilt_deg", "must lie in [0, 90)"));
            }
            _ => {}
        }
        match self.specular {
            Specular::Lobe { width, peak, .. } | Specular::Band { width, peak, .. } => {
                if !(width > 0.0) {
                    return Err(Error::param("specular.width", "must be positive"));
                }
                if peak < 0.0 {
                    return Err(Error::param("specular.peak", "must be non-negative"));
                }
            }
            Specular::None => {}
        }
        self.camera.validate().map_err(|e| e.prefixed("camera."))?;
        Material::new(self.eta)?;
        Ok(())
    }

    /// Object normals and coverage.
    pub fn normals(&self) -> (NormalMap, Mask) {
        let (h, w) = (self.height, self.width);
        let center =
            |c: Option<[f64; 2]>| c.unwrap_or([(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0]);
        match self.geometry {
            Geometry::Sphere { radius, center: c } => sphere_normals(h, w, radius, center(c), None),
            Geometry::BumpySphere {
                radius,
                center: c,
                amplitude,
                frequency,
                seed,
            } => sphere_normals(
                h,
                w,
                radius,
                center(c),
                Some(Bumps::new(amplitude, frequency, seed)),
            ),
            Geometry::Plane {
                tilt_deg,
                azimuth_deg,
            } => {
                let (t, a) = (tilt_deg.to_radians(), azimuth_deg.to_radians());
                let n = [t.sin() * a.cos(), t.sin() * a.sin(), t.cos()];
                (VectorField::filled(h, w, n), Mask::filled(h, w, true))
            }
        }
    }
}

struct Bumps {
    amplitude: f64,
    waves: Vec<([f64; 2], f64)>,
}

impl Bumps {
    fn new(amplitude: f64, frequency: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..4)
            .map(|_| {
                let a = rng.random::<f64>() * 2.0 * PI;
                (
                    [frequency * a.cos(), frequency * a.sin()],
                    rng.random::<f64>() * 2.0 * PI,
                )
            })
            .collect();
        Self { amplitude, waves }
    }

    /// Gradient of the height perturbation at sphere coordinates `(x, y)`.
    fn gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (k, phase) in &self.waves {
            let d = (2.0 * PI * (k[0] * x + k[1] * y) + phase).cos() * 2.0 * PI * self.amplitude;
            g[0] += d * k[0];
            g[1] += d * k[1];
        }
        g
    }
}

fn sphere_normals(
    h: usize,
    w: usize,
    radius: f64,
    c: [f64; 2],
    bumps: Option<Bumps>,
) -> (NormalMap, Mask) {
    let coords = |row: usize, col: usize| {
        let x = (col as f64 - c[0]) / radius;
        let y = ((h - 1 - row) as f64 - c[1]) / radius;
        (x, y, x * x + y * y)
    };
    let mask = Mask::from_fn(h, w, |r, col| coords(r, col).2 < 0.999);
    let n = VectorField::from_fn(h, w, |r, col| {
        let (x, y, r2) = coords(r, col);
        if r2 >= 0.999 {
            return [0.0, 0.0, 1.0];
        }
        let z = (1.0 - r2).sqrt();
        match &bumps {
            None => [x, y, z],
            Some(b) => {
                // height field z = √(1 − x² − y²) + h(x, y)
                let g = b.gradient(x, y);
                normalize_or_z([x - g[0] * z, y - g[1] * z, z])
            }
        }
    });
    (n, mask)
}

/// Everything known about a synthetic scene.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub gt: NormalMap,
    pub capture: IntensityCapture,
    pub stokes: StokesMap,
    pub mask: Mask,
    /// Pixels covered by the object.
    pub object: Mask,
    /// Ground-truth specular radiance.
    pub l_s: Image,
    pub view: VectorField,
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels());
    let (gt, object) = spec.normals();
    let light = normalize_or_z(spec.shading.light);
    let mut s0 = Image::zeros(h, w, c);
    let mut l_s = Image::zeros(h, w, c);
    for row in 0..h {
        for col in 0..w {
            if !object.at(row, col) {
                continue;
            }
            let n = gt.at(row, col);
            let shade =
                spec.shading.ambient + (1.0 - spec.shading.ambient) * dot(n, light).max(0.0);
            let spec_radiance = specular_radiance(&spec.specular, n);
            for ch in 0..c {
                let total = spec.shading.albedo[ch] * shade + spec_radiance;
                if !(total > 0.0 && total <= 1.0) {
                    return Err(Error::Unrenderable(format!(
                        "s0 = {total} at pixel ({row}, {col}) channel {ch} is outside (0, 1]"
                    )));
                }
                let (_, ls) = exact_split(total, spec_radiance);
                s0.set(row, col, ch, total);
                l_s.set(row, col, ch, ls);
            }
        }
    }
    let view = spec.camera.view_field(h, w)?;
    let rendered = render_stokes(&gt, &l_s, &s0, &view, &Material::new(spec.eta)?)?;
    let quantize = |a: &Image, b: &Image, sign: f64| {
        a.zip_map(b, |x, y| (0.5 * (x + sign * y)) as f32 as f64)
            .expect("same shape")
    };
    let capture = IntensityCapture {
        i000: quantize(&rendered.s0, &rendered.s1, 1.0),
        i045: quantize(&rendered.s0, &rendered.s2, 1.0),
        i090: quantize(&rendered.s0, &rendered.s1, -1.0),
        i135: quantize(&rendered.s0, &rendered.s2, -1.0),
    };
    let stokes = stokes_from_capture(&capture)?;
    let mask = validity_mask(&stokes);
    Ok(SyntheticScene {
        gt,
        capture,
        stokes,
        mask,
        object,
        l_s,
        view,
    })
}

fn specular_radiance(s: &Specular, n: [f64; 3]) -> f64 {
    match *s {
        Specular::None => 0.0,
        Specular::Lobe {
            direction,
            width,
            peak,
        } => {
            let a = dot(n, normalize_or_z(direction)).clamp(-1.0, 1.0).acos();
            peak * (-a * a / (2.0 * width * width)).exp()
        }
        Specular::Band {
            axis,
            offset,
            width,
            peak,
        } => {
            let d = dot(n, normalize_or_z(axis)) - offset;
            peak * (-d * d / (2.0 * width * width)).exp()
        }
    }
}

/// Simulated failure modes of a normal estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionSpec {
    #[default]
    None,
    /// Separable Gaussian blur of the vector components with replicated
    /// borders, then renormalization.
    GaussianBlur { sigma: f64 },
    /// Rotates the azimuth by π inside `region`.
    AzimuthFlip {
        #[serde(default)]
        region: Region,
    },
    /// Random tilts whose RMS angle is `sigma_deg`.
    AngularNoise { sigma_deg: f64, seed: u64 },
    /// Applies each stage in order.
    Composite { stages: Vec<CorruptionSpec> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    #[default]
    All,
    Rect {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

impl Region {
    fn contains(&self, row: usize, col: usize) -> bool {
        match *self {
            Region::All => true,
            Region::Rect {
                row: r0,
                col: c0,
                height,
                width,
            } => (r0..r0 + height).contains(&row) && (c0..c0 + width).contains(&col),
        }
    }
}

pub fn corrupt(n: &NormalMap, c: &CorruptionSpec) -> NormalMap {
    match c {
        CorruptionSpec::None => n.clone(),
        CorruptionSpec::GaussianBlur { sigma } => gaussian_blur(n, *sigma),
        CorruptionSpec::AzimuthFlip { region } => {
            let mut out = n.clone();
            for row in 0..n.height() {
                for col in 0..n.width() {
                    if region.contains(row, col) {
                        let v = n.at(row, col);
                        out.set(row, col, [-v[0], -v[1], v[2]]);
                    }
                }
            }
            out
        }
        CorruptionSpec::AngularNoise { sigma_deg, seed } => angular_noise(n, *sigma_deg, *seed),
        CorruptionSpec::Composite { stages } => {
            stages.iter().fold(n.clone(), |acc, s| corrupt(&acc, s))
        }
    }
}

fn gaussian_blur(n: &NormalMap, sigma: f64) -> NormalMap {
    if !(sigma > 0.0) {
        return n.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (n.height() as isize, n.width() as isize);
    let pass = |src: &VectorField, horizontal: bool| {
        VectorField::from_fn(h as usize, w as usize, |r, c| {
            let mut acc = [0.0; 3];
            for (i, k) in kernel.iter().enumerate() {
                let o = i as isize - radius;
                let (rr, cc) = if horizontal {
                    (r as isize, (c as isize + o).clamp(0, w - 1))
                } else {
                    ((r as isize + o).clamp(0, h - 1), c as isize)
                };
                let v = src.at(rr as usize, cc as usize);
                for j in 0..3 {
                    acc[j] += k * v[j];
                }
            }
            acc
        })
    };
    pass(&pass(n, true), false).normalized()
}

fn angular_noise(n: &NormalMap, sigma_deg: f64, seed: u64) -> NormalMap {
    if !(sigma_deg > 0.0) {
        return n.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma_deg.to_radians() / 2f64.sqrt()).expect("finite sigma");
    let data = n
        .data()
        .iter()
        .map(|&v| {
            let (a, b) = (dist.sample(&mut rng), dist.sample(&mut rng));
            let (e1, e2) = tangent_basis(v);
            let angle = (a * a + b * b).sqrt();
            if angle == 0.0 {
                return v;
            }
            let t = [
                (a * e1[0] + b * e2[0]) / angle,
                (a * e1[1] + b * e2[1]) / angle,
                (a * e1[2] + b * e2[2]) / angle,
            ];
            let (s, co) = angle.sin_cos();
            normalize_or_z([
                co * v[0] + s * t[0],
                co * v[1] + s * t[1],
                co * v[2] + s * t[2],
            ])
        })
        .collect();
    VectorField::from_vec(n.height(), n.width(), data).expect("same size")
}

fn tangent_basis(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if n[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e1 = normalize_or_z(cross(helper, n));
    (e1, cross(n, e1))
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Adds independent zero-mean Gaussian noise to every capture sample and
/// clamps at zero.
pub fn add_noise(cap: &IntensityCapture, sigma: f64, seed: u64) -> Result<IntensityCapture> {
    if !(sigma >= 0.0) {
        return Err(Error::param(
            "sigma",
            format!("must be non-negative, got {sigma}"),
        ));
    }
    if sigma == 0.0 {
        return Ok(cap.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).expect("finite sigma");
    let mut noisy = |img: &Image| {
        let mut out = img.clone();
        for v in out.data_mut() {
            *v = (*v + dist.sample(&mut rng)).max(0.0);
        }
        out
    };
    Ok(IntensityCapture {
        i000: noisy(&cap.i000),
        i045: noisy(&cap.i045),
        i090: noisy(&cap.i090),
        i135: noisy(&cap.i135),
    })
}
