use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddhgs::diffusion::{forward_noise, make_schedule, DenoiserConfig, DenoiserNet};
use ddhgs::encoder::{embed, offsets_for, EncoderParams, WavelengthRange};
use ddhgs::evalkit::{psnr, pseudo_rgb, sam};
use ddhgs::gradcheck::random_scene;
use ddhgs::hypercube::HyperCube;
use ddhgs::losses::{spectral_loss, spectral_terms};
use ddhgs::rasterizer::render;
use ddhgs::scene::{covariance3d, project_covariance, radiance, Gaussian};
use ddhgs::sh::SH_COEFFS;

fn cube_from(seed: u64, h: usize, w: usize, n: usize, lo: f64, hi: f64) -> HyperCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wl = (0..n).map(|b| 420.0 + 35.0 * b as f64).collect();
    let data = (0..h * w * n).map(|_| rng.gen_range(lo..hi)).collect();
    HyperCube::new(h, w, wl, data).unwrap()
}

fn gaussian_from(q: [f64; 4], s: [f64; 3]) -> Gaussian {
    Gaussian {
        mean: Vector3::zeros(),
        rotation: q,
        log_scale: Vector3::new(s[0].ln(), s[1].ln(), s[2].ln()),
        opacity_logit: 0.0,
        sh: vec![0.0; SH_COEFFS],
    }
}

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hsc_round_trip(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, n in 1usize..5) {
        let c = cube_from(seed, h, w, n, -2.0, 2.0);
        let c = c.with_data(c.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
        let back = HyperCube::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn hsc_rejects_wrong_length(seed in any::<u64>(), cut in 1usize..8) {
        let c = cube_from(seed, 3, 2, 2, 0.0, 1.0);
        let b = c.to_bytes();
        prop_assert!(HyperCube::from_bytes(&b[..b.len() - cut]).is_err());
        let mut longer = b.clone();
        longer.extend(std::iter::repeat(0u8).take(cut));
        prop_assert!(HyperCube::from_bytes(&longer).is_err());
    }

    #[test]
    fn pixel_indexing(seed in any::<u64>(), r in 0usize..4, k in 0usize..5) {
        let (h, w, n) = (4, 5, 3);
        let c = cube_from(seed, h, w, n, 0.0, 1.0);
        let s = c.pixel_spectrum(r, k).unwrap();
        for b in 0..n {
            prop_assert_eq!(s.0[b], c.data()[r * w * n + k * n + b]);
        }
    }

    #[test]
    fn covariance_is_symmetric_psd(q in quat(), s in prop::array::uniform3(0.01f64..2.0)) {
        let cov = covariance3d(&gaussian_from(q, s));
        prop_assert!((cov - cov.transpose()).abs().max() < 1e-12);
        let eig = cov.symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12));
    }

    #[test]
    fn projection_ignores_quaternion_sign(q in quat(), s in prop::array::uniform3(0.05f64..0.5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, cam) = random_scene(&mut rng, 1, 16, 1);
        let a = gaussian_from(q, s);
        let b = gaussian_from(q.map(|v| -v), s);
        let mc = cam.to_camera(&a.mean);
        let pa = project_covariance(&covariance3d(&a), &mc, &cam).unwrap();
        let pb = project_covariance(&covariance3d(&b), &mc, &cam).unwrap();
        prop_assert!((pa - pb).abs().max() < 1e-12);
    }

    #[test]
    fn radiance_is_linear_before_clamp(seed in any::<u64>(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n * SH_COEFFS).map(|_| rng.gen_range(-0.05..0.05)).collect() };
        let (s1, s2) = (mk(&mut rng), mk(&mut rng));
        let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0));
        let g = |sh: Vec<f64>| Gaussian { sh, ..Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, vec![0.0; n * SH_COEFFS]) };
        // radiance carries a +0.5 shift; remove it to compare the linear part
        let r = |sh: &[f64]| radiance(&g(sh.to_vec()), dir, None).unwrap().0.iter().map(|v| v - 0.5).collect::<Vec<_>>();
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
        let (r1, r2, rm) = (r(&s1), r(&s2), r(&mix));
        for i in 0..n {
            prop_assert!((rm[i] - (a * r1[i] + b * r2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn compositing_bounds(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cloud, cam) = random_scene(&mut rng, 5, 12, 2);
        let view = render(&cloud, &cam, &[0.0; 2 * SH_COEFFS]).unwrap();
        prop_assert!(view.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn transparent_cloud_renders_background(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut cloud, cam) = random_scene(&mut rng, 4, 10, 2);
        for g in &mut cloud.gaussians {
            g.opacity_logit = f64::NEG_INFINITY;
        }
        let view = render(&cloud, &cam, &[0.0; 2 * SH_COEFFS]).unwrap();
        prop_assert!(view.cube.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_separability(seed in any::<u64>(), band in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cloud, cam) = random_scene(&mut rng, 4, 12, 3);
        let offsets: Vec<f64> = (0..3 * SH_COEFFS).map(|_| rng.gen_range(-0.02..0.02)).collect();
        let base = render(&cloud, &cam, &offsets).unwrap().cube;
        let mut perturbed = cloud.clone();
        for g in &mut perturbed.gaussians {
            for b in (0..3).filter(|&b| b != band) {
                for k in 0..SH_COEFFS {
                    g.sh[b * SH_COEFFS + k] += rng.gen_range(-0.3..0.3);
                }
            }
        }
        let other = render(&perturbed, &cam, &offsets).unwrap().cube;
        for px in 0..base.pixels() {
            prop_assert_eq!(base.spectrum_at(px)[band].to_bits(), other.spectrum_at(px)[band].to_bits());
        }
    }

    #[test]
    fn offsets_are_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = EncoderParams::new(4, &[8, 8], &mut rng);
        enc.params.iter_mut().for_each(|p| *p += rng.gen_range(-0.2..0.2));
        let wl = [410.0, 600.0, 990.0];
        let r = WavelengthRange::new(400.0, 1000.0).unwrap();
        prop_assert_eq!(offsets_for(&enc, &wl, r).unwrap(), offsets_for(&enc.clone(), &wl, r).unwrap());
    }

    #[test]
    fn encoder_is_lipschitz_in_wavelength(seed in any::<u64>(), freqs in 1usize..=6, lambda in 400.0f64..999.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = EncoderParams::new(freqs, &[16, 16], &mut rng);
        enc.params.iter_mut().for_each(|p| *p += rng.gen_range(-0.3..0.3));
        let r = WavelengthRange::new(400.0, 1000.0).unwrap();
        // product of Frobenius norms bounds the product of spectral norms; SiLU is 1.1-Lipschitz
        let mut bound = 1.0;
        let layers = enc.layers();
        for (i, l) in layers.iter().enumerate() {
            let w = l.weight.get(&enc.params);
            bound *= w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if i + 1 < layers.len() {
                bound *= 1.0998;
            }
        }
        let e0 = embed(lambda, r, freqs);
        let e1 = embed(lambda + 1.0, r, freqs);
        let de = e0.iter().zip(&e1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let o = offsets_for(&enc, &[lambda, lambda + 1.0], r).unwrap();
        let d = o.row(0).iter().zip(o.row(1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d <= bound * de + 1e-12, "{d} > {bound} * {de}");
    }

    #[test]
    fn spectral_terms_ranges(seed in any::<u64>()) {
        let p = cube_from(seed, 3, 3, 4, -1.0, 2.0);
        let g = cube_from(seed ^ 1, 3, 3, 4, -1.0, 2.0);
        let t = spectral_terms(&p, &g).unwrap();
        prop_assert!(t.kl >= 0.0);
        prop_assert!((0.0..=2.0).contains(&t.cos));
        let same = spectral_terms(&g, &g).unwrap();
        prop_assert!(same.kl.abs() < 1e-12 && same.cos.abs() < 1e-12);
    }

    #[test]
    fn spectral_loss_shift_invariant(seed in any::<u64>(), shift in prop::collection::vec(-3.0f64..3.0, 9)) {
        let p = cube_from(seed, 3, 3, 4, 0.0, 1.0);
        let g = cube_from(seed ^ 7, 3, 3, 4, 0.0, 1.0);
        let sh = |c: &HyperCube| {
            let mut d = c.data().to_vec();
            for (px, s) in d.chunks_exact_mut(4).zip(&shift) {
                px.iter_mut().for_each(|v| *v += s);
            }
            c.with_data(d).unwrap()
        };
        let a = spectral_loss(&p, &g, 1.0, 1.0).unwrap().0;
        let b = spectral_loss(&sh(&p), &sh(&g), 1.0, 1.0).unwrap().0;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn schedule_identities(steps in 1usize..=1000) {
        let s = make_schedule(steps, 1e-4, 0.02).unwrap();
        for t in 1..=steps {
            let ab = s.alpha_bar(t);
            prop_assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
            prop_assert!(ab < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn forward_noise_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, t in 1usize..=50) {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let x1 = cube_from(seed, 2, 3, 2, 0.0, 1.0);
        let x2 = cube_from(seed ^ 2, 2, 3, 2, 0.0, 1.0);
        let e1 = cube_from(seed ^ 3, 2, 3, 2, -2.0, 2.0);
        let e2 = cube_from(seed ^ 4, 2, 3, 2, -2.0, 2.0);
        let lin = |u: &HyperCube, v: &HyperCube| u.with_data(u.data().iter().zip(v.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = forward_noise(&lin(&x1, &x2), t, &lin(&e1, &e2), &s).unwrap();
        let f1 = forward_noise(&x1, t, &e1, &s).unwrap();
        let f2 = forward_noise(&x2, t, &e2, &s).unwrap();
        let rhs = lin(&f1, &f2);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn denoiser_preserves_shape(seed in any::<u64>(), h in 3usize..11, w in 3usize..11) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DenoiserNet::new(2, DenoiserConfig { width: 4, groups: 2, time_dim: 4, ..DenoiserConfig::default() }, &mut rng).unwrap();
        let x = cube_from(seed, h, w, 2, 0.0, 1.0);
        let out = net.predict(&x, &x, 7, &make_schedule(50, 1e-4, 0.02).unwrap()).unwrap();
        prop_assert_eq!((out.height(), out.width(), out.bands()), (h, w, 2));
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sam_ignores_per_pixel_scaling(seed in any::<u64>(), scales in prop::collection::vec(0.1f64..10.0, 16)) {
        let p = cube_from(seed, 4, 4, 3, 0.05, 1.0);
        let g = cube_from(seed ^ 9, 4, 4, 3, 0.05, 1.0);
        let mut d = p.data().to_vec();
        for (px, s) in d.chunks_exact_mut(3).zip(&scales) {
            px.iter_mut().for_each(|v| *v *= s);
        }
        let a = sam(&p, &g).unwrap();
        let b = sam(&p.with_data(d).unwrap(), &g).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_error(seed in any::<u64>(), e1 in 0.001f64..0.2, extra in 0.001f64..0.2) {
        let g = cube_from(seed, 3, 3, 2, 0.0, 1.0);
        let off = |e: f64| g.map(|v| v + e).unwrap();
        prop_assert!(psnr(&off(e1 + extra), &g, 1.0).unwrap() < psnr(&off(e1), &g, 1.0).unwrap());
    }
}

#[test]
fn pseudo_rgb_rejects_invisible_bands() {
    let c = HyperCube::filled(2, 2, vec![800.0, 900.0, 1000.0], 0.5).unwrap();
    assert!(pseudo_rgb(&c).is_err());
}

#[test]
fn identity_at_init_render_matches_plain_splatting() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cloud, cam) = random_scene(&mut rng, 5, 16, 4);
    let enc = EncoderParams::new(6, &[64, 64], &mut rng);
    let r = WavelengthRange::of(cloud.wavelengths()).unwrap();
    let offsets = offsets_for(&enc, cloud.wavelengths(), r).unwrap();
    let a = render(&cloud, &cam, &offsets.values).unwrap().cube;
    let b = render(&cloud, &cam, &vec![0.0; 4 * SH_COEFFS]).unwrap().cube;
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn covariance_of_axis_aligned_gaussian() {
    let g = gaussian_from([1.0, 0.0, 0.0, 0.0], [0.5, 1.0, 2.0]);
    let expect = Matrix3::from_diagonal(&Vector3::new(0.25, 1.0, 4.0));
    assert!((covariance3d(&g) - expect).abs().max() < 1e-12);
}
