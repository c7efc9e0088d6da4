//! Diagnostic experiments: Jacobian sensitivity, noise and refractive-index
//! sweeps, guidance ablations and material presets.

use serde::{Deserialize, Serialize};

use crate::backbone::{finite_difference_jvp, Backbone, BackboneError, FD_SIZE_CAP};
use crate::grid::Image;
use crate::guidance::{refine, GroundTruth, GuidanceConfig, RefineError, Refinement};
use crate::metrics::mean_angular_error;
use crate::polarimetry::{stokes_from_capture, StokesMap};
use crate::synth::{add_noise, Geometry, SceneSpec, Shading, Specular, SyntheticScene};
use crate::{Error, Result};

/// Per-output-pixel Frobenius norm of `∂f(q)/∂x(p)` for a fixed input pixel
/// `p = (row, col)`.
///
/// Each input channel contributes one JVP with a one-hot tangent; the `3×C`
/// block at `q` stacks the resulting output vectors. Backbones without a JVP
/// fall back to central differences when no side exceeds [`FD_SIZE_CAP`].
pub fn sensitivity_map<B: Backbone + ?Sized>(
    backbone: &mut B,
    x: &Image,
    pixel: (usize, usize),
) -> Result<Image> {
    let spec = backbone.spec();
    if x.shape() != spec {
        return Err(Error::shape("backbone input", spec, x.shape()));
    }
    let (row, col) = pixel;
    if row >= spec.height || col >= spec.width {
        return Err(Error::param(
            "pixel",
            format!("({row}, {col}) lies outside {}x{}", spec.height, spec.width),
        ));
    }
    let analytic = backbone.caps().has_jvp;
    if !analytic && (spec.height > FD_SIZE_CAP || spec.width > FD_SIZE_CAP) {
        return Err(BackboneError::Unsupported("input JVP").into());
    }
    let mut sq = vec![0.0; spec.pixels()];
    for ch in 0..spec.channels {
        let mut t = Image::zeros_like(x);
        t.set(row, col, ch, 1.0);
        let j = if analytic {
            backbone.jvp_input(x, &t)?
        } else {
            finite_difference_jvp(backbone, x, &t, 1e-5)?
        };
        for (s, v) in sq.iter_mut().zip(j.data()) {
            *s += v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        }
    }
    let data = sq.into_iter().map(f64::sqrt).collect();
    Image::from_vec(spec.height, spec.width, 1, data)
}

/// Nearest-rank percentile (`q` in `(0, 1]`) of the samples.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Scales a map so its 99th percentile becomes one. All-zero maps are
/// returned unchanged.
pub fn normalize_by_p99(map: &Image) -> Image {
    let p = percentile(map.data(), 0.99);
    if p > 0.0 {
        map.map(|v| v / p)
    } else {
        map.clone()
    }
}

/// Builds a backbone for a given observed image.
pub trait BackboneFactory {
    type Backbone: Backbone;
    fn build(&mut self, x: &Image) -> Result<Self::Backbone>;
}

impl<B: Backbone, F: FnMut(&Image) -> Result<B>> BackboneFactory for F {
    type Backbone = B;
    fn build(&mut self, x: &Image) -> Result<B> {
        self(x)
    }
}

/// Guided and unguided accuracy of one run, scored on the object pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub mae_guided: f64,
    pub mae_unguided: f64,
    pub n_valid: usize,
}

fn run<F: BackboneFactory>(
    obs: &StokesMap,
    scene: &SyntheticScene,
    factory: &mut F,
    cfg: &GuidanceConfig,
) -> Result<(RunScore, Refinement)> {
    let mut bb = factory.build(&obs.s0)?;
    let gt = GroundTruth {
        normals: &scene.gt,
        mask: &scene.object,
    };
    let r = refine(obs, &mut bb, cfg, Some(gt)).map_err(|e: RefineError| e.source)?;
    let score = RunScore {
        mae_guided: mean_angular_error(&r.normals, &scene.gt, &scene.object)?,
        mae_unguided: mean_angular_error(&r.initial, &scene.gt, &scene.object)?,
        n_valid: crate::polarimetry::validity_mask(obs).count(),
    };
    Ok((score, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    #[serde(flatten)]
    pub score: RunScore,
}

/// Refines the scene under capture noise of each `σ`, seeded per sweep index.
pub fn noise_sweep<F: BackboneFactory>(
    scene: &SyntheticScene,
    factory: &mut F,
    cfg: &GuidanceConfig,
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let cap = add_noise(&scene.capture, sigma, seed.wrapping_add(i as u64))?;
            let obs = stokes_from_capture(&cap)?;
            let (score, _) = run(&obs, scene, factory, cfg)?;
            Ok(NoiseRow { sigma, score })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    #[serde(flatten)]
    pub score: RunScore,
}

/// Refines the same observation assuming each refractive index in turn.
pub fn eta_sweep<F: BackboneFactory>(
    scene: &SyntheticScene,
    factory: &mut F,
    cfg: &GuidanceConfig,
    etas: &[f64],
) -> Result<Vec<EtaRow>> {
    etas.iter()
        .map(|&eta| {
            let cfg = GuidanceConfig { eta, ..cfg.clone() };
            let (score, _) = run(&scene.stokes, scene, factory, &cfg)?;
            Ok(EtaRow { eta, score })
        })
        .collect()
}

/// Mean angular error of the three guidance variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// Backbone output alone (`T = 0`).
    pub none: f64,
    /// Image offset and specular radiance only (`O_n` never activates).
    pub image_only: f64,
    /// The configured staging.
    pub joint: f64,
}

pub fn variant_ablation<F: BackboneFactory>(
    scene: &SyntheticScene,
    factory: &mut F,
    cfg: &GuidanceConfig,
) -> Result<Ablation> {
    let none_cfg = GuidanceConfig {
        steps: 0,
        on_activation_step: 0,
        ..cfg.clone()
    };
    let image_cfg = GuidanceConfig {
        on_activation_step: cfg.steps,
        ..cfg.clone()
    };
    let obs = &scene.stokes;
    Ok(Ablation {
        none: run(obs, scene, factory, &none_cfg)?.0.mae_guided,
        image_only: run(obs, scene, factory, &image_cfg)?.0.mae_guided,
        joint: run(obs, scene, factory, cfg)?.0.mae_guided,
    })
}

/// Reflectance presets sharing the default sphere geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialPreset {
    DiffuseOnly,
    SpecularOnly,
    Mixed,
}

impl MaterialPreset {
    pub const ALL: [MaterialPreset; 3] = [
        MaterialPreset::DiffuseOnly,
        MaterialPreset::SpecularOnly,
        MaterialPreset::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaterialPreset::DiffuseOnly => "diffuse_only",
            MaterialPreset::SpecularOnly => "specular_only",
            MaterialPreset::Mixed => "mixed",
        }
    }

    pub fn scene(self, size: usize) -> SceneSpec {
        let mut s = SceneSpec::small_sphere(size);
        match self {
            MaterialPreset::DiffuseOnly => s.specular = Specular::None,
            MaterialPreset::SpecularOnly => {
                // a faint diffuse floor keeps every object pixel above the signal floor
                s.shading = Shading {
                    light: [0.0, 0.0, 1.0],
                    albedo: vec![0.03, 0.03, 0.03],
                    ambient: 1.0,
                };
                s.specular = Specular::Band {
                    axis: [0.0, 1.0, 0.0],
                    offset: 0.0,
                    width: 0.5,
                    peak: 0.6,
                };
            }
            MaterialPreset::Mixed => {}
        }
        debug_assert!(matches!(s.geometry, Geometry::Sphere { .. }));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialRow {
    pub preset: MaterialPreset,
    #[serde(flatten)]
    pub score: RunScore,
}

/// Runs guidance on each preset scene.
pub fn material_sweep<F: BackboneFactory>(
    scenes: &[(MaterialPreset, SyntheticScene)],
    factory: &mut F,
    cfg: &GuidanceConfig,
) -> Result<Vec<MaterialRow>> {
    scenes
        .iter()
        .map(|(preset, scene)| {
            let (score, _) = run(&scene.stokes, scene, factory, cfg)?;
            Ok(MaterialRow {
                preset: *preset,
                score,
            })
        })
        .collect()
}

/// Whether MAE grows (weakly) as `η` moves away from `reference` on either
/// side. Exploratory; nothing gates on it.
pub fn eta_monotone_away_from(rows: &[EtaRow], reference: f64) -> bool {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.eta.total_cmp(&b.eta));
    sorted.windows(2).all(|w| {
        let (a, b) = (&w[0], &w[1]);
        if b.eta <= reference {
            a.score.mae_guided >= b.score.mae_guided
        } else if a.eta >= reference {
            a.score.mae_guided <= b.score.mae_guided
        } else {
            true
        }
    })
}
