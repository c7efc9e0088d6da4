use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polguide::backbone::{Backbone, CorruptedOracle, LinearSmoother};
use polguide::camera::CameraModel;
use polguide::decomposition::{edit, EditOp};
use polguide::fresnel::{dolp_diffuse, dolp_specular, render_stokes, Material, RadianceSplit};
use polguide::metrics::{summarize, summarize_values};
use polguide::polarimetry::{
    dolp, dolp_aolp, stokes_from_capture, validity_mask, IntensityCapture, StokesMap,
};
use polguide::synth::{generate, SceneSpec};
use polguide::{Image, Mask, Shape, VectorField};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Image {
    let data = (0..h * w * c).map(|_| r.random_range(lo..hi)).collect();
    Image::from_vec(h, w, c, data).unwrap()
}

/// Unit normals anywhere on the sphere, so back-facing pixels are included.
fn random_normals(r: &mut ChaCha8Rng, h: usize, w: usize) -> VectorField {
    let data = (0..h * w)
        .map(|_| loop {
            let v = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ];
            let n2: f64 = v.iter().map(|x| x * x).sum();
            if n2 > 1e-4 && n2 <= 1.0 {
                let n = n2.sqrt();
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        })
        .collect();
    VectorField::from_vec(h, w, data).unwrap()
}

fn capture(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> IntensityCapture {
    IntensityCapture {
        i000: random_image(r, h, w, c, -1.0, 1.0),
        i045: random_image(r, h, w, c, -1.0, 1.0),
        i090: random_image(r, h, w, c, -1.0, 1.0),
        i135: random_image(r, h, w, c, -1.0, 1.0),
    }
}

fn close(a: &Image, b: &Image, tol: f64) -> bool {
    a.data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unpolarized_stokes_has_zero_dolp(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let s0 = random_image(&mut r, h, w, 3, 0.0, 2.0);
        let z = Image::zeros(h, w, 3);
        let p = dolp_aolp(&StokesMap { s0, s1: z.clone(), s2: z });
        prop_assert!(p.dolp.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stokes_is_linear_in_the_captures(seed in any::<u64>(), k in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (a, b) = (capture(&mut r, 3, 4, 3), capture(&mut r, 3, 4, 3));
        let add = |x: &Image, y: &Image| x.zip_map(y, |u, v| u + v).unwrap();
        let sum = IntensityCapture {
            i000: add(&a.i000, &b.i000),
            i045: add(&a.i045, &b.i045),
            i090: add(&a.i090, &b.i090),
            i135: add(&a.i135, &b.i135),
        };
        let scaled = IntensityCapture {
            i000: a.i000.map(|v| k * v),
            i045: a.i045.map(|v| k * v),
            i090: a.i090.map(|v| k * v),
            i135: a.i135.map(|v| k * v),
        };
        let (sa, sb) = (stokes_from_capture(&a).unwrap(), stokes_from_capture(&b).unwrap());
        let ss = stokes_from_capture(&sum).unwrap();
        let sk = stokes_from_capture(&scaled).unwrap();
        for i in 0..3 {
            prop_assert!(close(ss.components()[i], &add(sa.components()[i], sb.components()[i]), 1e-14));
            prop_assert!(close(sk.components()[i], &sa.components()[i].map(|v| k * v), 1e-14));
        }
    }

    #[test]
    fn scaling_a_valid_pixel_keeps_it_valid(
        s0 in 0.011f64..0.999,
        mag in 0.0f64..1.0,
        ang in -3.2f64..3.2,
        t in 0.0f64..1.0,
    ) {
        let (s1, s2) = (mag * s0 * ang.cos(), mag * s0 * ang.sin());
        let one = |v: f64| Image::filled(1, 1, 1, v);
        let valid = |k: f64| validity_mask(&StokesMap { s0: one(k * s0), s1: one(k * s1), s2: one(k * s2) }).at(0, 0);
        prop_assume!(valid(1.0));
        let lo = 0.02 / s0;
        prop_assume!(lo < 1.0);
        let c = lo + t * (1.0 - lo);
        prop_assume!(c > lo && c < 1.0);
        prop_assert!(valid(c));
    }

    #[test]
    fn dolp_is_a_fraction_for_physical_pixels(s0 in 0.0f64..10.0, mag in 0.0f64..=1.0, ang in -3.2f64..3.2) {
        let (s1, s2) = (mag * s0 * ang.cos(), mag * s0 * ang.sin());
        prop_assume!(s1 * s1 + s2 * s2 <= s0 * s0);
        let d = dolp(s0, s1, s2);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn rendering_is_physical(seed in any::<u64>(), eta in 1.01f64..4.0, persp in any::<bool>()) {
        let mut r = rng(seed);
        let (h, w) = (4, 5);
        let n = random_normals(&mut r, h, w);
        let s0 = random_image(&mut r, h, w, 3, 0.0, 1.0);
        let frac = random_image(&mut r, h, w, 3, 0.0, 1.0);
        let l_s = s0.zip_map(&frac, |s, f| s * f).unwrap();
        let cam = if persp { CameraModel::perspective(70.0, w, h).unwrap() } else { CameraModel::Orthographic };
        let v = cam.view_field(h, w).unwrap();
        let s = render_stokes(&n, &l_s, &s0, &v, &Material::new(eta).unwrap()).unwrap();
        for i in 0..s.s0.data().len() {
            let (a, b, c) = (s.s0.data()[i], s.s1.data()[i], s.s2.data()[i]);
            prop_assert!(b * b + c * c <= a * a * (1.0 + 1e-9), "{a} {b} {c}");
        }
    }

    #[test]
    fn flipping_the_azimuth_by_pi_changes_nothing(seed in any::<u64>(), eta in 1.01f64..4.0) {
        let mut r = rng(seed);
        let n = random_normals(&mut r, 3, 3);
        let flipped = VectorField::from_vec(3, 3, n.data().iter().map(|&[x, y, z]| [-x, -y, z]).collect()).unwrap();
        let s0 = random_image(&mut r, 3, 3, 1, 0.0, 1.0);
        let l_s = s0.map(|v| 0.3 * v);
        let v = CameraModel::Orthographic.view_field(3, 3).unwrap();
        let m = Material::new(eta).unwrap();
        prop_assert_eq!(render_stokes(&n, &l_s, &s0, &v, &m).unwrap(), render_stokes(&flipped, &l_s, &s0, &v, &m).unwrap());
    }

    #[test]
    fn backbone_adjoints_agree(seed in any::<u64>(), gray in any::<bool>(), radius in 0usize..3) {
        let mut r = rng(seed);
        let c = if gray { 1 } else { 3 };
        let (h, w) = (6, 7);
        let x = random_image(&mut r, h, w, c, 0.0, 1.0);
        let t = random_image(&mut r, h, w, c, -1.0, 1.0);
        let g = random_normals(&mut r, h, w);
        let base = random_normals(&mut r, h, w);
        let mut backbones: Vec<Box<dyn Backbone>> = vec![
            Box::new(LinearSmoother::new(Shape::new(h, w, c), radius)),
            Box::new(CorruptedOracle::new(base, x.map(|v| 0.9 * v), 3.0, seed)),
        ];
        for b in backbones.iter_mut() {
            let jt = b.jvp_input(&x, &t).unwrap();
            let vg = b.vjp_input(&x, &g).unwrap();
            let lhs: f64 = jt.data().iter().zip(g.data()).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
            let rhs: f64 = t.data().iter().zip(vg.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1e-12), "{lhs} {rhs}");

            let out = b.forward(&x).unwrap();
            for n in out.data() {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                prop_assert!((len - 1.0).abs() <= 1e-6);
            }
            prop_assert_eq!(out, b.forward(&x).unwrap());
        }
    }

    #[test]
    fn accuracy_is_monotone_and_order_free(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let mut v: Vec<f64> = (0..n).map(|_| r.random_range(0.0..60.0)).collect();
        let a = summarize_values(&mut v.clone()).unwrap();
        prop_assert!(a.acc_1125 <= a.acc_225 && a.acc_225 <= a.acc_30);
        v.reverse();
        let b = summarize_values(&mut v).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn masked_pixels_never_change_metrics(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w) = (5, 6);
        let err = random_image(&mut r, h, w, 1, 0.0, 45.0);
        let mask = Mask::from_fn(h, w, |row, col| (row * 7 + col * 3) % 4 != 0);
        let mut poisoned = err.clone();
        for (i, v) in poisoned.data_mut().iter_mut().enumerate() {
            if !mask.data()[i] {
                *v = r.random_range(0.0..180.0);
            }
        }
        prop_assert_eq!(summarize(&err, &mask).unwrap(), summarize(&poisoned, &mask).unwrap());
    }

    #[test]
    fn identity_edit_recomposes_exactly(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s0 = random_image(&mut r, 4, 4, 3, 0.0, 1.0);
        let ls = random_image(&mut r, 4, 4, 3, -0.2, 1.2);
        let split = RadianceSplit::from_specular(&s0, &ls).unwrap();
        let out = edit(&split, &EditOp::Recolor { scale: vec![1.0] }).unwrap();
        prop_assert_eq!(out, s0);
    }

    #[test]
    fn edits_commute_with_cropping(seed in any::<u64>(), r0 in 0usize..4, c0 in 0usize..4) {
        let mut r = rng(seed);
        let s0 = random_image(&mut r, 6, 6, 3, 0.0, 1.0);
        let ls = s0.map(|v| 0.25 * v);
        let split = RadianceSplit::from_specular(&s0, &ls).unwrap();
        let ops = [
            EditOp::Recolor { scale: vec![1.2, 0.5, 0.9] },
            EditOp::Metallic { tint: vec![1.0, 0.8, 0.4], gain: 1.7 },
        ];
        for op in &ops {
            let whole = edit(&split, op).unwrap().crop(r0, c0, 2, 2);
            let part = RadianceSplit { l_d: split.l_d.crop(r0, c0, 2, 2), l_s: split.l_s.crop(r0, c0, 2, 2) };
            prop_assert_eq!(whole, edit(&part, op).unwrap());
        }
    }
}

#[test]
fn diffuse_dolp_increases_and_specular_has_one_interior_peak() {
    for eta in [1.3, 1.5, 2.0, 3.2] {
        let grid: Vec<f64> = (0..=2000)
            .map(|i| i as f64 / 2000.0 * std::f64::consts::FRAC_PI_2)
            .collect();
        let d: Vec<f64> = grid.iter().map(|&t| dolp_diffuse(t, eta)).collect();
        assert!(d.windows(2).all(|w| w[1] >= w[0]), "eta {eta}");
        let s: Vec<f64> = grid.iter().map(|&t| dolp_specular(t, eta)).collect();
        let peak = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(peak > 0 && peak < grid.len() - 1);
        assert!(s[..=peak].windows(2).all(|w| w[1] >= w[0]));
        assert!(s[peak..].windows(2).all(|w| w[1] <= w[0]));
        let brewster = eta.atan();
        assert!(
            (grid[peak] - brewster).abs() < 2e-3,
            "eta {eta}: {} vs {brewster}",
            grid[peak]
        );
    }
}

#[test]
fn synthetic_captures_invert_exactly() {
    for spec in [SceneSpec::small_sphere(24), SceneSpec::sphere()] {
        let s = generate(&spec).unwrap();
        assert_eq!(stokes_from_capture(&s.capture).unwrap(), s.stokes);
        assert_eq!(
            stokes_from_capture(&s.stokes.to_capture()).unwrap(),
            s.stokes
        );
    }
}
