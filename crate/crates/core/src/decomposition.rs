//! Diffuse/specular decomposition of refined results and simple appearance
//! edits on the two radiance components.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fresnel::{component_stokes, Material, RadianceSplit};
use crate::grid::{Image, NormalMap, VectorField};
use crate::polarimetry::{aolp, dolp, StokesMap};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub split: RadianceSplit,
    pub diffuse: StokesMap,
    pub specular: StokesMap,
    /// RGB encodings of AoLP (hue) × DoLP (value), see [`polarization_rgb`].
    pub diffuse_vis: Image,
    pub specular_vis: Image,
}

pub fn decompose(
    obs: &StokesMap,
    normals: &NormalMap,
    l_s: &Image,
    view: &VectorField,
    material: &Material,
) -> Result<Decomposition> {
    let shape = obs.check()?;
    l_s.expect_shape("l_s", shape)?;
    for (i, (&l, &s)) in l_s.data().iter().zip(obs.s0.data()).enumerate() {
        if !(l >= 0.0 && l <= s.max(0.0)) {
            return Err(Error::param(
                "l_s",
                format!("sample {i} is {l}, outside [0, s0 = {s}]"),
            ));
        }
    }
    let split = RadianceSplit::from_specular(&obs.s0, l_s)?;
    let (diffuse, specular) = component_stokes(normals, &split.l_d, &split.l_s, view, material)?;
    Ok(Decomposition {
        diffuse_vis: polarization_rgb(&diffuse),
        specular_vis: polarization_rgb(&specular),
        split,
        diffuse,
        specular,
    })
}

/// Channel-averaged polarization as color: hue `(φ + π/2)/π` on the HSV
/// wheel (red at `φ = −π/2`, cyan at `φ = 0`), full saturation, value equal
/// to DoLP. Unpolarized pixels are black.
pub fn polarization_rgb(s: &StokesMap) -> Image {
    let shape = s.shape();
    let c = shape.channels as f64;
    let data: Vec<f64> = (0..shape.pixels())
        .into_par_iter()
        .flat_map_iter(|p| {
            let mean = |img: &Image| img.pixel(p).iter().sum::<f64>() / c;
            let (s0, s1, s2) = (mean(&s.s0), mean(&s.s1), mean(&s.s2));
            let v = dolp(s0, s1, s2);
            let h = (aolp(s1, s2) + PI / 2.0) / PI;
            hsv_to_rgb(h, 1.0, v)
        })
        .collect();
    Image::from_vec(shape.height, shape.width, 3, data).expect("three channels per pixel")
}

/// `h`, `s`, `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    /// Scales the diffuse radiance per channel.
    Recolor { scale: Vec<f64> },
    /// Tints and amplifies the specular radiance: `L_s′ = gain · tint ⊙ L_s`.
    Metallic { tint: Vec<f64>, gain: f64 },
}

/// Applies `op` to one component and returns `L_d′ + L_s′`.
pub fn edit(split: &RadianceSplit, op: &EditOp) -> Result<Image> {
    let c = split.l_d.channels();
    let per_channel = |v: &[f64], name: &str| -> Result<Vec<f64>> {
        match v.len() {
            1 => Ok(vec![v[0]; c]),
            n if n == c => Ok(v.to_vec()),
            n => Err(Error::param(
                name,
                format!("has {n} entries for {c} channels"),
            )),
        }
    };
    let scale_channels = |img: &Image, k: &[f64]| {
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= k[i % c];
        }
        out
    };
    let (l_d, l_s) = match op {
        EditOp::Recolor { scale } => {
            let k = per_channel(scale, "scale")?;
            (scale_channels(&split.l_d, &k), split.l_s.clone())
        }
        EditOp::Metallic { tint, gain } => {
            let k: Vec<f64> = per_channel(tint, "tint")?
                .iter()
                .map(|t| t * gain)
                .collect();
            (split.l_d.clone(), scale_channels(&split.l_s, &k))
        }
    };
    if let Some(index) = l_d
        .data()
        .iter()
        .chain(l_s.data())
        .position(|&v| !(v >= 0.0))
    {
        return Err(Error::NegativeRadiance {
            index: index % l_d.data().len(),
        });
    }
    l_d.zip_map(&l_s, |a, b| a + b)
}

/// Peak signal-to-noise ratio in dB for signals with the given peak value.
/// Identical inputs give `+∞`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let d = a.zip_map(b, |x, y| (x - y) * (x - y))?;
    let mse = d.data().iter().sum::<f64>() / d.data().len().max(1) as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneSpec};

    fn scene() -> (StokesMap, NormalMap, Image, VectorField) {
        let s = generate(&SceneSpec::small_sphere(16)).unwrap();
        (s.stokes, s.gt, s.l_s, s.view)
    }

    #[test]
    fn zero_specular_visualizes_black() {
        let (obs, n, _, v) = scene();
        let d = decompose(
            &obs,
            &n,
            &Image::zeros_like(&obs.s0),
            &v,
            &Material::default(),
        )
        .unwrap();
        assert!(d.specular_vis.data().iter().all(|&x| x == 0.0));
        assert_eq!(d.split.recompose(), obs.s0);
    }

    #[test]
    fn components_have_orthogonal_aolp() {
        let (obs, n, ls, v) = scene();
        let d = decompose(&obs, &n, &ls, &v, &Material::default()).unwrap();
        let mut checked = 0;
        for i in 0..obs.s0.data().len() {
            let (a1, a2) = (d.diffuse.s1.data()[i], d.diffuse.s2.data()[i]);
            let (b1, b2) = (d.specular.s1.data()[i], d.specular.s2.data()[i]);
            if a1.hypot(a2) > 1e-6 && b1.hypot(b2) > 1e-6 {
                let diff = (aolp(a1, a2) - aolp(b1, b2)).abs();
                assert!((diff - PI / 2.0).abs() < 1e-9, "{diff}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn out_of_range_specular_is_rejected() {
        let (obs, n, _, v) = scene();
        let too_much = obs.s0.map(|s| s + 0.1);
        assert!(decompose(&obs, &n, &too_much, &v, &Material::default()).is_err());
    }

    #[test]
    fn identity_and_vacuous_edits() {
        let (obs, _, ls, _) = scene();
        let split = RadianceSplit::from_specular(&obs.s0, &ls).unwrap();
        let same = edit(
            &split,
            &EditOp::Recolor {
                scale: vec![1.0; 3],
            },
        )
        .unwrap();
        assert_eq!(same, obs.s0);
        let only_spec = edit(&split, &EditOp::Recolor { scale: vec![0.0] }).unwrap();
        assert_eq!(only_spec, split.l_s);
        let dull = RadianceSplit::from_specular(&obs.s0, &Image::zeros_like(&obs.s0)).unwrap();
        let metal = edit(
            &dull,
            &EditOp::Metallic {
                tint: vec![1.0],
                gain: 2.0,
            },
        )
        .unwrap();
        assert_eq!(metal, obs.s0);
    }

    #[test]
    fn negative_edit_is_an_error() {
        let (obs, _, ls, _) = scene();
        let split = RadianceSplit::from_specular(&obs.s0, &ls).unwrap();
        assert!(matches!(
            edit(
                &split,
                &EditOp::Metallic {
                    tint: vec![1.0],
                    gain: -1.0
                }
            ),
            Err(Error::NegativeRadiance { .. })
        ));
        assert!(edit(
            &split,
            &EditOp::Recolor {
                scale: vec![1.0, 1.0]
            }
        )
        .is_err());
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.5, 1.0, 1.0), [0.0, 1.0, 1.0]);
        assert_eq!(hsv_to_rgb(0.25, 1.0, 0.0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = Image::filled(2, 2, 1, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }
}
