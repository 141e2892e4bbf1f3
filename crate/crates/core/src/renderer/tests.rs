use super::*;
use crate::math::IDENTITY_QUAT;
use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(w: usize, h: usize) -> Camera {
    Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], w as f64 * 1.2, w, h).unwrap()
}

fn gaussian(mu: Vec3, scale: f64, opacity: f64, dc: [f64; 3]) -> CanonicalGaussian {
    let mut sh = [0.0; SH_COEFFS];
    for c in 0..3 {
        sh[c] = (dc[c] - 0.5) / SH_C0;
    }
    CanonicalGaussian {
        mu,
        rot: IDENTITY_QUAT,
        log_scale: [scale.ln(); 3],
        logit_opacity: math::logit(opacity),
        sh,
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng, spread: f64) -> CanonicalGaussian {
    let mut sh = [0.0; SH_COEFFS];
    for v in sh.iter_mut() {
        *v = rng.random_range(-0.8..0.8);
    }
    let rot = math::quat_normalize([
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]);
    CanonicalGaussian {
        mu: [
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-0.8..0.8),
        ],
        rot,
        log_scale: [
            rng.random_range(-2.2..-0.9),
            rng.random_range(-2.2..-0.9),
            rng.random_range(-2.2..-0.9),
        ],
        logit_opacity: rng.random_range(-2.0..3.0),
        sh,
    }
}

/// Per-pixel sum of T_i·α_i·c_i over every visible Gaussian, built with
/// nalgebra and no early termination or support cut.
fn oracle(gs: &[CanonicalGaussian], cam: &Camera) -> Vec<f64> {
    let w = Matrix3::from_row_slice(&cam.rotation.concat());
    let t = Vector3::from_column_slice(&cam.translation);
    let center = -w.transpose() * t;
    let mut prims = Vec::new();
    for (i, g) in gs.iter().enumerate() {
        let mu = Vector3::from_column_slice(&g.mu);
        let pc = w * mu + t;
        if pc.z <= 0.01 {
            continue;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(g.rot[0], g.rot[1], g.rot[2], g.rot[3]));
        let r = q.to_rotation_matrix().into_inner();
        let s = Matrix3::from_diagonal(&Vector3::new(
            g.log_scale[0].exp(),
            g.log_scale[1].exp(),
            g.log_scale[2].exp(),
        ));
        let sigma = r * s * s * r.transpose();
        let (fx, fy) = (cam.focal[0], cam.focal[1]);
        let j = nalgebra::Matrix2x3::new(
            fx / pc.z,
            0.0,
            -fx * pc.x / (pc.z * pc.z),
            0.0,
            fy / pc.z,
            -fy * pc.y / (pc.z * pc.z),
        );
        let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * 0.3;
        if cov.determinant() < 1e-12 {
            continue;
        }
        let inv = cov.try_inverse().unwrap();
        let m2 = Vector2::new(fx * pc.x / pc.z + cam.principal[0], fy * pc.y / pc.z + cam.principal[1]);
        let d = (mu - center).normalize();
        let mut col = [0.0; 3];
        for c in 0..3 {
            col[c] = 0.28209479 * g.sh[c]
                + 0.48860251 * (-d.y * g.sh[3 + c] + d.z * g.sh[6 + c] - d.x * g.sh[9 + c])
                + 0.5;
        }
        let o = 1.0 / (1.0 + (-g.logit_opacity).exp());
        prims.push((pc.z, i, m2, inv, o, col));
    }
    prims.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let u = Vector2::new(x as f64, y as f64);
            let mut tr = 1.0;
            let mut c = [0.0; 3];
            for (_, _, m2, inv, o, col) in &prims {
                let d = u - m2;
                let a = (o * (-0.5 * (d.transpose() * inv * d)[0]).exp()).min(0.99);
                if a < 1.0 / 255.0 {
                    continue;
                }
                for k in 0..3 {
                    c[k] += tr * a * col[k];
                }
                tr *= 1.0 - a;
            }
            out.extend_from_slice(&c);
        }
    }
    out
}

#[test]
fn sh_zero_is_half_grey() {
    assert_eq!(sh_eval(&[0.0; 12], [0.0, 0.0, 1.0]), [0.5; 3]);
}

#[test]
fn sh_dc_only_is_isotropic() {
    let mut c = [0.0; 12];
    for k in 0..3 {
        c[k] = 0.5 / SH_C0;
    }
    for dir in [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], math::normalize([1.0, 2.0, 3.0])] {
        let rgb = sh_eval(&c, dir);
        for v in rgb {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn sh_degree_one_is_odd() {
    let mut c = [0.0; 12];
    for (i, v) in c.iter_mut().enumerate().skip(3) {
        *v = 0.1 * i as f64 - 0.4;
    }
    let d = math::normalize([0.3, -0.5, 0.8]);
    let a = sh_eval(&c, d);
    let b = sh_eval(&c, math::scale(d, -1.0));
    for k in 0..3 {
        assert!(((a[k] - 0.5) + (b[k] - 0.5)).abs() < 1e-12);
    }
}

#[test]
fn empty_scene_is_black() {
    let img = render(&[], &camera(8, 8), RenderOptions::default());
    assert!(img.color.data.iter().all(|&v| v == 0.0));
    assert!(img.alpha.iter().all(|&v| v == 0.0));
}

#[test]
fn white_background_shows_through() {
    let img = render(&[], &camera(4, 4), RenderOptions::white());
    assert!(img.color.data.iter().all(|&v| v == 1.0));
}

#[test]
fn single_opaque_gaussian_center_pixel() {
    // Projected centre lands exactly on pixel (8, 8); G = 1 there so the
    // capped alpha is 0.99 and the colour is 0.99·c.
    let cam = camera(16, 16);
    let g = gaussian([0.0; 3], 0.3, 0.9999, [0.2, 0.6, 0.9]);
    let img = render(&[g], &cam, RenderOptions::default());
    let p = img.color.pixel(8, 8);
    let want = [0.99 * 0.2, 0.99 * 0.6, 0.99 * 0.9];
    for k in 0..3 {
        assert!((p[k] - want[k]).abs() < 1e-9, "{p:?}");
    }
    assert!((img.alpha[8 * 16 + 8] - 0.99).abs() < 1e-12);
}

#[test]
fn front_gaussian_hides_back_and_swap_reverses() {
    let cam = camera(16, 16);
    let red = [1.0, 0.0, 0.0];
    let blue = [0.0, 0.0, 1.0];
    let near = [0.0, 0.0, -0.5];
    let far = [0.0, 0.0, 0.5];
    let a = render(
        &[gaussian(near, 0.3, 0.9999, red), gaussian(far, 0.3, 0.9999, blue)],
        &cam,
        RenderOptions::default(),
    );
    let p = a.color.pixel(8, 8);
    // Front takes 0.99, back gets 0.01·0.99.
    assert!((p[0] - 0.99).abs() < 1e-9 && (p[2] - 0.0099).abs() < 1e-9, "{p:?}");
    let b = render(
        &[gaussian(far, 0.3, 0.9999, red), gaussian(near, 0.3, 0.9999, blue)],
        &cam,
        RenderOptions::default(),
    );
    let q = b.color.pixel(8, 8);
    assert!((q[2] - 0.99).abs() < 1e-9 && (q[0] - 0.0099).abs() < 1e-9, "{q:?}");
}

#[test]
fn behind_camera_is_culled() {
    let cam = camera(8, 8);
    let g = gaussian([0.0, 0.0, -5.0], 0.3, 0.9, [1.0; 3]);
    let r = Rasterizer::new(std::slice::from_ref(&g), &cam, RenderOptions::default());
    assert_eq!(r.visible(), 0);
}

#[test]
fn depth_ties_break_by_index() {
    let cam = camera(8, 8);
    let g = gaussian([0.0; 3], 0.3, 0.5, [1.0; 3]);
    let gs = vec![g.clone(), g.clone(), g];
    let r = Rasterizer::new(&gs, &cam, RenderOptions::default());
    assert_eq!(r.depth_order(), vec![0, 1, 2]);
}

#[test]
fn matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cam = camera(8, 8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=5);
        let gs: Vec<_> = (0..n).map(|_| random_gaussian(&mut rng, 1.5)).collect();
        let img = render(&gs, &cam, RenderOptions::default());
        let want = oracle(&gs, &cam);
        for (a, b) in img.color.data.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        assert!(img.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    }
    assert!(worst <= 2e-3, "worst channel error {worst}");
}

#[test]
fn rendering_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gs: Vec<_> = (0..40).map(|_| random_gaussian(&mut rng, 1.5)).collect();
    let cam = camera(32, 24);
    let a = render(&gs, &cam, RenderOptions::default());
    let b = render(&gs, &cam, RenderOptions::default());
    assert_eq!(a.color.data, b.color.data);
    assert_eq!(a.alpha, b.alpha);
}

#[test]
fn golden_ppm_bytes() {
    let cam = camera(4, 4);
    let empty = render(&[], &cam, RenderOptions::default()).clamped().encode_ppm();
    let mut want = b"P6\n4 4\n255\n".to_vec();
    want.extend(std::iter::repeat(0u8).take(48));
    assert_eq!(empty, want);

    let g = gaussian([0.0; 3], 0.3, 0.9999, [0.2, 0.6, 0.9]);
    let bytes = render(std::slice::from_ref(&g), &cam, RenderOptions::default()).clamped().encode_ppm();
    let header = b"P6\n4 4\n255\n".len();
    let centre = header + (2 * 4 + 2) * 3;
    let expect: Vec<u8> = [0.2, 0.6, 0.9].iter().map(|c| (0.99f64 * c * 255.0).round() as u8).collect();
    assert_eq!(&bytes[centre..centre + 3], &expect[..]);
    let again = render(&[g.clone()], &cam, RenderOptions::default()).clamped().encode_ppm();
    assert_eq!(bytes, again);
}

/// Image-sum loss with fixed random per-pixel weights.
fn weighted_sum(gs: &[CanonicalGaussian], cam: &Camera, wts: &[f64]) -> f64 {
    render(gs, cam, RenderOptions::default())
        .color
        .data
        .iter()
        .zip(wts)
        .map(|(a, b)| a * b)
        .sum()
}

fn perturb(gs: &mut [CanonicalGaussian], g: usize, field: usize, k: usize, d: f64) {
    let x = &mut gs[g];
    match field {
        0 => x.mu[k] += d,
        1 => x.rot[k] += d,
        2 => x.log_scale[k] += d,
        3 => x.logit_opacity += d,
        _ => x.sh[k] += d,
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = camera(16, 16);
    let mut checked = 0;
    for _ in 0..6 {
        let n = rng.random_range(1..=3);
        let gs: Vec<_> = (0..n).map(|_| random_gaussian(&mut rng, 1.0)).collect();
        let wts: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(0.5..1.5)).collect();
        let r = Rasterizer::new(&gs, &cam, RenderOptions::default());
        let grads = r.backward(&wts);
        for g in 0..n {
            for (field, len) in [(0, 3), (1, 4), (2, 3), (3, 1), (4, 12)] {
                for k in 0..len {
                    let analytic = match field {
                        0 => grads.mu[g][k],
                        1 => grads.rot[g][k],
                        2 => grads.log_scale[g][k],
                        3 => grads.logit_opacity[g],
                        _ => grads.sh[g][k],
                    };
                    let h = 1e-4;
                    let mut p = gs.clone();
                    perturb(&mut p, g, field, k, h);
                    let mut m = gs.clone();
                    perturb(&mut m, g, field, k, -h);
                    let numeric = (weighted_sum(&p, &cam, &wts) - weighted_sum(&m, &cam, &wts)) / (2.0 * h);
                    let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
                    assert!(
                        rel <= 1e-3,
                        "gaussian {g} field {field}[{k}]: analytic {analytic} numeric {numeric}"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 0);
}
