//! Test-time guidance of a frozen backbone by polarization consistency.
//!
//! Three groups of parameters are optimized with Adam against the masked L1
//! distance between observed and rendered Stokes maps:
//!
//! - `l_s`: specular radiance, projected into `[0, S0]` after every step;
//! - `o_x`: an image offset fed through the backbone, `f(x + o_x)`;
//! - `o_n`: a normal offset added after the backbone, frozen at zero until
//!   `on_activation_step`.
//!
//! The normal used for rendering at every step is
//! `normalize(f(clamp(x + o_x, 0, 1.5)) + o_n)`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::camera::CameraModel;
use crate::fresnel::{exact_split, render_stokes, render_stokes_vjp, Material, RadianceSplit};
use crate::grid::{normalize_or_z, normalize_vjp, Image, Mask, NormalMap, VectorField};
use crate::metrics::mean_angular_error;
use crate::polarimetry::{validity_mask, StokesMap};
use crate::reduce::tree_sum;
use crate::{Error, Result};

/// Bounds of the backbone input after the image offset is applied.
pub const INPUT_RANGE: (f64, f64) = (0.0, 1.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub steps: usize,
    pub on_activation_step: usize,
    pub lr_ls: f64,
    pub lr_ox: f64,
    pub lr_on: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eta: f64,
    pub camera: CameraModel,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            on_activation_step: 50,
            lr_ls: 0.01,
            lr_ox: 1e-4,
            lr_on: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eta: 1.5,
            camera: CameraModel::Orthographic,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.on_activation_step > self.steps {
            return Err(Error::param(
                "on_activation_step",
                format!("{} exceeds steps = {}", self.on_activation_step, self.steps),
            ));
        }
        for (name, lr) in [
            ("lr_ls", self.lr_ls),
            ("lr_ox", self.lr_ox),
            ("lr_on", self.lr_on),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {lr}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        Material::new(self.eta)?;
        self.camera.validate().map_err(|e| e.prefixed("camera."))
    }
}

/// First and second moment estimates of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut AdamMoments,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    t: u64,
) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), moments.m.len());
    assert!(t >= 1, "Adam steps are counted from 1");
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Loss value and its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub cotangent: StokesMap,
}

/// `Σ_p M(p) Σ_i Σ_ch |S_i − Ŝ_i|`, with `sign(Ŝ − S)` as the cotangent
/// (zero at ties and on masked pixels).
pub fn polarization_loss(obs: &StokesMap, pred: &StokesMap, mask: &Mask) -> Result<LossEval> {
    let shape = obs.check()?;
    pred.s0.expect_shape("predicted s0", shape)?;
    pred.s1.expect_shape("predicted s1", shape)?;
    pred.s2.expect_shape("predicted s2", shape)?;
    mask.expect_dims("mask", shape.height, shape.width)?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let c = shape.channels;
    let mut cot = StokesMap::zeros(shape);
    let mut per_pixel = vec![0.0; shape.pixels()];
    for (p, acc) in per_pixel.iter_mut().enumerate() {
        if !mask.data()[p] {
            continue;
        }
        for (k, (o, e)) in obs.components().iter().zip(pred.components()).enumerate() {
            for ch in 0..c {
                let i = p * c + ch;
                let r = e.data()[i] - o.data()[i];
                *acc += r.abs();
                let g = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                match k {
                    0 => cot.s0.data_mut()[i] = g,
                    1 => cot.s1.data_mut()[i] = g,
                    _ => cot.s2.data_mut()[i] = g,
                }
            }
        }
    }
    Ok(LossEval {
        value: tree_sum(&per_pixel),
        cotangent: cot,
    })
}

/// Optimized quantities and Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceState {
    pub o_x: Image,
    pub o_n: VectorField,
    pub l_s: Image,
    pub moments_ls: AdamMoments,
    pub moments_ox: AdamMoments,
    pub moments_on: AdamMoments,
    /// Number of Adam updates applied so far.
    pub t: u64,
}

impl GuidanceState {
    pub fn zeros(x: &Image) -> Self {
        let n = x.data().len();
        let px = x.height() * x.width();
        Self {
            o_x: Image::zeros_like(x),
            o_n: VectorField::zeros(x.height(), x.width()),
            l_s: Image::zeros_like(x),
            moments_ls: AdamMoments::zeros(n),
            moments_ox: AdamMoments::zeros(n),
            moments_on: AdamMoments::zeros(px * 3),
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub mae: Option<f64>,
    /// Time since the start of the run; kept in memory only.
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuidanceTrace {
    pub entries: Vec<TraceEntry>,
}

impl GuidanceTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn maes(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.mae).collect()
    }
}

/// Reference normals for progress reporting.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub normals: &'a NormalMap,
    /// Pixels scored in the trace.
    pub mask: &'a Mask,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub normals: NormalMap,
    pub split: RadianceSplit,
    pub trace: GuidanceTrace,
    pub predicted: StokesMap,
    /// Unguided backbone output at step 0.
    pub initial: NormalMap,
    pub state: GuidanceState,
}

/// A failed run with everything recorded up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("refinement failed at step {step}: {source}")]
pub struct RefineError {
    pub step: usize,
    #[source]
    pub source: Error,
    pub trace: GuidanceTrace,
}

/// Observer called after each step's evaluation with the step index, the
/// current normals and the state.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &NormalMap, &GuidanceState);

pub fn refine<B: Backbone + ?Sized>(
    obs: &StokesMap,
    backbone: &mut B,
    cfg: &GuidanceConfig,
    gt: Option<GroundTruth<'_>>,
) -> std::result::Result<Refinement, RefineError> {
    refine_with_hook(obs, backbone, cfg, gt, None)
}

pub fn refine_with_hook<B: Backbone + ?Sized>(
    obs: &StokesMap,
    backbone: &mut B,
    cfg: &GuidanceConfig,
    gt: Option<GroundTruth<'_>>,
    mut hook: Option<StepHook<'_>>,
) -> std::result::Result<Refinement, RefineError> {
    let start = Instant::now();
    let mut trace = GuidanceTrace::default();
    let mut step = 0;
    macro_rules! fail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => {
                    return Err(RefineError {
                        step,
                        source: err.into(),
                        trace,
                    })
                }
            }
        };
    }

    fail!(cfg.validate());
    let shape = fail!(obs.check());
    let spec = backbone.spec();
    if spec != shape {
        fail!(Err(Error::shape("backbone input", shape, spec)));
    }
    let mask = validity_mask(obs);
    if mask.count() == 0 {
        fail!(Err(Error::EmptyMask));
    }
    if let Some(g) = gt {
        fail!(g
            .normals
            .expect_dims("ground truth", shape.height, shape.width));
        fail!(g
            .mask
            .expect_dims("ground-truth mask", shape.height, shape.width));
    }
    let material = fail!(Material::new(cfg.eta));
    let view = fail!(cfg.camera.view_field(shape.height, shape.width));
    let x = &obs.s0;
    let s0 = &obs.s0;
    let mut state = GuidanceState::zeros(x);
    let mut initial = None;
    let betas = (cfg.beta1, cfg.beta2);

    loop {
        let x_in = fail!(x.zip_map(&state.o_x, |a, o| (a + o)
            .clamp(INPUT_RANGE.0, INPUT_RANGE.1)));
        let base = fail!(backbone.forward(&x_in));
        let u: Vec<[f64; 3]> = base
            .data()
            .iter()
            .zip(state.o_n.data())
            .map(|(b, o)| [b[0] + o[0], b[1] + o[1], b[2] + o[2]])
            .collect();
        let normals = fail!(VectorField::from_vec(
            shape.height,
            shape.width,
            u.iter().map(|&v| normalize_or_z(v)).collect(),
        ));
        if initial.is_none() {
            initial = Some(normals.clone());
        }
        let pred = fail!(render_stokes(&normals, &state.l_s, s0, &view, &material));
        let loss = fail!(polarization_loss(obs, &pred, &mask));
        let mae = match gt {
            Some(g) => Some(fail!(mean_angular_error(&normals, g.normals, g.mask))),
            None => None,
        };
        trace.entries.push(TraceEntry {
            step,
            loss: loss.value,
            mae,
            elapsed: start.elapsed(),
        });
        if let Some(h) = hook.as_mut() {
            h(step, &normals, &state);
        }
        if !loss.value.is_finite() {
            fail!(Err(Error::NonFiniteLoss { step }));
        }
        if step == cfg.steps {
            let split = fail!(RadianceSplit::from_specular(s0, &state.l_s));
            return Ok(Refinement {
                normals,
                split,
                trace,
                predicted: pred,
                initial: initial.expect("set at step 0"),
                state,
            });
        }

        let (grad_n, grad_ls) = fail!(render_stokes_vjp(
            &normals,
            &state.l_s,
            s0,
            &view,
            &material,
            &loss.cotangent,
        ));
        let grad_u: Vec<[f64; 3]> = u
            .iter()
            .zip(grad_n.data())
            .map(|(&u, &g)| normalize_vjp(u, g))
            .collect();
        let grad_u = fail!(VectorField::from_vec(shape.height, shape.width, grad_u));
        let mut grad_ox = fail!(backbone.vjp_input(&x_in, &grad_u));
        for ((g, &a), &o) in grad_ox
            .data_mut()
            .iter_mut()
            .zip(x.data())
            .zip(state.o_x.data())
        {
            let v = a + o;
            if !(INPUT_RANGE.0..=INPUT_RANGE.1).contains(&v) {
                *g = 0.0;
            }
        }
        let active = step >= cfg.on_activation_step;
        let grad_on: Vec<f64> = if active {
            grad_u
                .data()
                .iter()
                .flat_map(|g| g.iter().copied())
                .collect()
        } else {
            vec![0.0; shape.pixels() * 3]
        };

        state.t += 1;
        let t = state.t;
        adam_step(
            state.l_s.data_mut(),
            grad_ls.data(),
            &mut state.moments_ls,
            cfg.lr_ls,
            betas,
            cfg.eps,
            t,
        );
        adam_step(
            state.o_x.data_mut(),
            grad_ox.data(),
            &mut state.moments_ox,
            cfg.lr_ox,
            betas,
            cfg.eps,
            t,
        );
        adam_step(
            state.o_n.data_mut().as_flattened_mut(),
            &grad_on,
            &mut state.moments_on,
            cfg.lr_on,
            betas,
            cfg.eps,
            t,
        );
        for (l, &total) in state.l_s.data_mut().iter_mut().zip(s0.data()) {
            *l = exact_split(total, *l).1;
        }
        step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::CorruptedOracle;
    use crate::grid::Shape;

    fn one(v: f64) -> Image {
        Image::filled(1, 1, 1, v)
    }

    #[test]
    fn adam_single_step() {
        let mut p = [0.0];
        let mut m = AdamMoments::zeros(1);
        adam_step(&mut p, &[1.0], &mut m, 0.01, (0.9, 0.999), 1e-8, 1);
        // m̂ = v̂ = 1 after bias correction
        assert!((p[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-17);
    }

    #[test]
    fn adam_two_identical_steps() {
        let mut p = [0.0];
        let mut m = AdamMoments::zeros(1);
        adam_step(&mut p, &[0.3], &mut m, 0.01, (0.9, 0.999), 1e-8, 1);
        let first = p[0];
        adam_step(&mut p, &[0.3], &mut m, 0.01, (0.9, 0.999), 1e-8, 2);
        assert!(((p[0] - first) + 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_grad_keeps_param_and_decays_moments() {
        let mut p = [0.7, -0.2];
        let mut m = AdamMoments {
            m: vec![0.5, -0.5],
            v: vec![0.25, 0.25],
        };
        adam_step(&mut p, &[0.0, 0.0], &mut m, 0.01, (0.9, 0.999), 1e-8, 3);
        assert_eq!(m.m, vec![0.45, -0.45]);
        assert_eq!(m.v, vec![0.25 * 0.999, 0.25 * 0.999]);
        let mut q = [0.7];
        let mut z = AdamMoments::zeros(1);
        adam_step(&mut q, &[0.0], &mut z, 0.01, (0.9, 0.999), 1e-8, 1);
        assert_eq!(q[0], 0.7);
    }

    fn stokes(s0: f64, s1: f64, s2: f64) -> StokesMap {
        StokesMap {
            s0: one(s0),
            s1: one(s1),
            s2: one(s2),
        }
    }

    #[test]
    fn loss_examples() {
        let obs = stokes(0.5, 0.1, -0.1);
        let mask = Mask::filled(1, 1, true);
        assert_eq!(polarization_loss(&obs, &obs, &mask).unwrap().value, 0.0);
        let pred = stokes(0.6, -0.1, -0.05);
        let l = polarization_loss(&obs, &pred, &mask).unwrap();
        assert!((l.value - 0.35).abs() < 1e-15);
        assert_eq!(l.cotangent.s0.data()[0], 1.0);
        assert_eq!(l.cotangent.s1.data()[0], -1.0);
        assert_eq!(l.cotangent.s2.data()[0], 1.0);
        assert!(matches!(
            polarization_loss(&obs, &pred, &Mask::filled(1, 1, false)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn masked_pixels_get_no_gradient() {
        let obs = StokesMap {
            s0: Image::filled(1, 2, 1, 0.5),
            s1: Image::filled(1, 2, 1, 0.1),
            s2: Image::zeros(1, 2, 1),
        };
        let pred = StokesMap::zeros(obs.shape());
        let mask = Mask::from_vec(1, 2, vec![true, false]).unwrap();
        let l = polarization_loss(&obs, &pred, &mask).unwrap();
        assert_eq!(l.cotangent.s1.data(), &[-1.0, 0.0]);
        assert_eq!(l.cotangent.s0.data(), &[-1.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let cfg = GuidanceConfig {
            on_activation_step: 101,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GuidanceConfig {
            lr_on: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_steps_returns_backbone_output() {
        let obs = StokesMap {
            s0: Image::filled(3, 3, 3, 0.5),
            s1: Image::filled(3, 3, 3, 0.01),
            s2: Image::zeros(3, 3, 3),
        };
        let base = VectorField::filled(3, 3, normalize_or_z([0.3, 0.1, 0.9]));
        let mut bb = CorruptedOracle::new(base.clone(), obs.s0.clone(), 2.0, 0);
        let cfg = GuidanceConfig {
            steps: 0,
            on_activation_step: 0,
            ..Default::default()
        };
        let r = refine(&obs, &mut bb, &cfg, None).unwrap();
        assert_eq!(r.normals, bb.forward(&obs.s0).unwrap().normalized());
        assert!(r.split.l_s.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn shape_mismatch_and_empty_mask() {
        let obs = StokesMap {
            s0: Image::filled(2, 2, 3, 0.5),
            s1: Image::zeros(2, 2, 3),
            s2: Image::zeros(2, 2, 3),
        };
        let mut bb = CorruptedOracle::new(
            VectorField::filled(2, 3, [0.0, 0.0, 1.0]),
            Image::zeros(2, 3, 3),
            0.0,
            0,
        );
        assert!(matches!(
            refine(&obs, &mut bb, &GuidanceConfig::default(), None),
            Err(RefineError {
                source: Error::ShapeMismatch { .. },
                ..
            })
        ));
        let dark = StokesMap::zeros(Shape::new(2, 3, 3));
        assert!(matches!(
            refine(&dark, &mut bb, &GuidanceConfig::default(), None),
            Err(RefineError {
                source: Error::EmptyMask,
                ..
            })
        ));
    }
}
