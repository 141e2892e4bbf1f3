//! Differentiable forward splatting.
//!
//! Gaussians are projected, sorted once by depth and alpha-composited front
//! to back per pixel. The backward pass is written by hand and recomputes
//! each pixel's contributor list rather than storing it.

use crate::image::Image;
use crate::math::{self, Mat3, Quat, Vec3};
use crate::par;
use crate::scene::{self, Camera, CanonicalGaussian, SH_COEFFS};

pub const SH_C0: f64 = 0.28209479;
pub const SH_C1: f64 = 0.48860251;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const DET_MIN: f64 = 1e-12;

/// Colour of a degree ≤ 1 expansion along unit direction `dir`, offset by
/// +0.5.
pub fn sh_eval(coeffs: &[f64; SH_COEFFS], dir: Vec3) -> [f64; 3] {
    let [x, y, z] = dir;
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = SH_C0 * coeffs[c]
            + SH_C1 * (-y * coeffs[3 + c] + z * coeffs[6 + c] - x * coeffs[9 + c])
            + 0.5;
    }
    rgb
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
        }
    }
}

impl RenderOptions {
    pub fn white() -> Self {
        Self {
            background: [1.0; 3],
        }
    }
}

/// Render output. `color` holds pre-clamp values; clamp with
/// [`RenderedImage::clamped`] for display.
#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub color: Image,
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn clamped(&self) -> Image {
        self.color.clamped()
    }
}

/// Per-Gaussian data after projection.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    /// Half-width of the square pixel support.
    extent: f64,
}

/// Gradients with respect to the attributes of every input Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub mu: Vec<Vec3>,
    pub rot: Vec<Quat>,
    pub log_scale: Vec<Vec3>,
    pub logit_opacity: Vec<f64>,
    pub sh: Vec<[f64; SH_COEFFS]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![[0.0; 3]; n],
            rot: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 3]; n],
            logit_opacity: vec![0.0; n],
            sh: vec![[0.0; SH_COEFFS]; n],
        }
    }
}

/// A prepared frame: projected splats in depth order plus, per image row,
/// the splats whose support touches it.
pub struct Rasterizer<'a> {
    gaussians: &'a [CanonicalGaussian],
    camera: &'a Camera,
    options: RenderOptions,
    splats: Vec<Splat>,
    rows: Vec<Vec<u32>>,
}

impl<'a> Rasterizer<'a> {
    pub fn new(gaussians: &'a [CanonicalGaussian], camera: &'a Camera, options: RenderOptions) -> Self {
        let prepared = par::map_slice(gaussians, |g| prepare(g, camera));
        let mut splats: Vec<Splat> = prepared
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|mut s| {
                s.index = i;
                s
            }))
            .collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        let mut rows = vec![Vec::new(); camera.height];
        for (k, s) in splats.iter().enumerate() {
            let lo = (s.mean[1] - s.extent).ceil().max(0.0);
            let hi = (s.mean[1] + s.extent).floor().min(camera.height as f64 - 1.0);
            if !(lo <= hi) {
                continue;
            }
            for row in &mut rows[lo as usize..=hi as usize] {
                row.push(k as u32);
            }
        }
        Self {
            gaussians,
            camera,
            options,
            splats,
            rows,
        }
    }

    /// Number of Gaussians that survived culling.
    pub fn visible(&self) -> usize {
        self.splats.len()
    }

    /// Ids of the visible Gaussians in compositing order.
    pub fn depth_order(&self) -> Vec<usize> {
        self.splats.iter().map(|s| s.index).collect()
    }

    pub fn render(&self) -> RenderedImage {
        let (w, h) = (self.camera.width, self.camera.height);
        let rows = par::map_range(h, |y| {
            let mut color = Vec::with_capacity(w * 3);
            let mut alpha = Vec::with_capacity(w);
            for x in 0..w {
                let (c, t) = self.shade(x, y, |_| {});
                color.extend_from_slice(&c);
                alpha.push(1.0 - t);
            }
            (color, alpha)
        });
        let mut color = Image::new(w, h);
        let mut alpha = Vec::with_capacity(w * h);
        for (y, (c, a)) in rows.into_iter().enumerate() {
            color.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&c);
            alpha.extend(a);
        }
        RenderedImage { color, alpha }
    }

    /// Composites one pixel, reporting every contributor to `visit`.
    /// Returns the colour and the residual transmittance.
    fn shade(&self, x: usize, y: usize, mut visit: impl FnMut(Contribution)) -> ([f64; 3], f64) {
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        let mut c = [0.0; 3];
        for (slot, &k) in self.rows[y].iter().enumerate() {
            let s = &self.splats[k as usize];
            let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
            if dx.abs() > s.extent {
                continue;
            }
            let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
            let g = power.exp();
            let raw = s.opacity * g;
            let alpha = raw.min(ALPHA_MAX);
            if alpha < ALPHA_MIN {
                continue;
            }
            for ch in 0..3 {
                c[ch] += t * alpha * s.color[ch];
            }
            visit(Contribution {
                slot,
                splat: k as usize,
                t,
                alpha,
                g,
                capped: raw > ALPHA_MAX,
                dx,
                dy,
            });
            t *= 1.0 - alpha;
            if t < TRANSMITTANCE_MIN {
                break;
            }
        }
        for ch in 0..3 {
            c[ch] += t * self.options.background[ch];
        }
        (c, t)
    }

    /// Gradients of a scalar loss given `d_color`, its gradient with respect
    /// to the pre-clamp image (interleaved RGB, same layout as
    /// [`Image::data`]).
    pub fn backward(&self, d_color: &[f64]) -> GaussianGrads {
        let (w, h) = (self.camera.width, self.camera.height);
        assert_eq!(d_color.len(), w * h * 3, "gradient image has the wrong size");
        // Per row: screen-space gradients for the splats touching that row.
        let row_grads = par::map_range(h, |y| {
            let mut buf = vec![ScreenGrad::default(); self.rows[y].len()];
            let mut list = Vec::new();
            for x in 0..w {
                let i = (y * w + x) * 3;
                let dc = [d_color[i], d_color[i + 1], d_color[i + 2]];
                if dc == [0.0; 3] {
                    continue;
                }
                list.clear();
                let (_, t_final) = self.shade(x, y, |c| list.push(c));
                let mut behind = self.options.background;
                let _ = t_final;
                for c in list.iter().rev() {
                    let s = &self.splats[c.splat];
                    let sg = &mut buf[c.slot];
                    let mut g_alpha = 0.0;
                    for ch in 0..3 {
                        sg.color[ch] += c.t * c.alpha * dc[ch];
                        g_alpha += dc[ch] * c.t * (s.color[ch] - behind[ch]);
                        behind[ch] = c.alpha * s.color[ch] + (1.0 - c.alpha) * behind[ch];
                    }
                    if c.capped {
                        continue;
                    }
                    sg.opacity += g_alpha * c.g;
                    let g_power = g_alpha * s.opacity * c.g;
                    sg.conic[0] += -0.5 * g_power * c.dx * c.dx;
                    sg.conic[1] += -g_power * c.dx * c.dy;
                    sg.conic[2] += -0.5 * g_power * c.dy * c.dy;
                    sg.mean[0] += g_power * (s.conic[0] * c.dx + s.conic[1] * c.dy);
                    sg.mean[1] += g_power * (s.conic[1] * c.dx + s.conic[2] * c.dy);
                }
            }
            buf
        });
        let mut screen = vec![ScreenGrad::default(); self.splats.len()];
        for (y, buf) in row_grads.into_iter().enumerate() {
            for (slot, g) in buf.into_iter().enumerate() {
                screen[self.rows[y][slot] as usize].add(&g);
            }
        }
        let per_splat = par::map_range(self.splats.len(), |k| {
            let s = &self.splats[k];
            backprop_splat(&self.gaussians[s.index], self.camera, s, &screen[k])
        });
        let mut out = GaussianGrads::zeros(self.gaussians.len());
        for (k, g) in per_splat.into_iter().enumerate() {
            let i = self.splats[k].index;
            out.mu[i] = g.mu;
            out.rot[i] = g.rot;
            out.log_scale[i] = g.log_scale;
            out.logit_opacity[i] = g.logit_opacity;
            out.sh[i] = g.sh;
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    slot: usize,
    splat: usize,
    t: f64,
    alpha: f64,
    g: f64,
    capped: bool,
    dx: f64,
    dy: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

fn prepare(g: &CanonicalGaussian, cam: &Camera) -> Option<Splat> {
    let q = math::quat_normalize(g.rot);
    let cov = scene::covariance_unchecked(q, g.scale());
    let p = scene::project_gaussian(g.mu, &cov, cam)?;
    let [a, b, c] = p.cov2d;
    let det = a * c - b * b;
    if !(det >= DET_MIN) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let opacity = g.opacity();
    // Beyond this Mahalanobis radius alpha is below the skip threshold.
    let cutoff = if opacity * 255.0 > 1.0 {
        (2.0 * (255.0 * opacity).ln()).sqrt()
    } else {
        0.0
    };
    let extent = cutoff.max(3.0) * lambda_max.sqrt();
    let dir = math::normalize(math::sub(g.mu, cam.center()));
    Some(Splat {
        index: 0,
        mean: p.mu2d,
        conic,
        depth: p.depth,
        opacity,
        color: sh_eval(&g.sh, dir),
        extent,
    })
}

struct SplatGrads {
    mu: Vec3,
    rot: Quat,
    log_scale: Vec3,
    logit_opacity: f64,
    sh: [f64; SH_COEFFS],
}

/// Chain rule from screen-space gradients back to the 3D attributes.
fn backprop_splat(g: &CanonicalGaussian, cam: &Camera, s: &Splat, sg: &ScreenGrad) -> SplatGrads {
    // Opacity.
    let logit_opacity = sg.opacity * s.opacity * (1.0 - s.opacity);

    // Colour: SH coefficients and view direction.
    let v = math::sub(g.mu, cam.center());
    let vn = math::norm(v);
    let dir = math::scale(v, 1.0 / vn);
    let mut sh = [0.0; SH_COEFFS];
    let mut g_dir = [0.0; 3];
    for ch in 0..3 {
        let gc = sg.color[ch];
        sh[ch] = SH_C0 * gc;
        sh[3 + ch] = -SH_C1 * dir[1] * gc;
        sh[6 + ch] = SH_C1 * dir[2] * gc;
        sh[9 + ch] = -SH_C1 * dir[0] * gc;
        g_dir[0] += -SH_C1 * g.sh[9 + ch] * gc;
        g_dir[1] += -SH_C1 * g.sh[3 + ch] * gc;
        g_dir[2] += SH_C1 * g.sh[6 + ch] * gc;
    }
    let along = math::dot(dir, g_dir);
    let mut g_mu = math::scale(math::sub(g_dir, math::scale(dir, along)), 1.0 / vn);

    // Conic → 2D covariance: dL/dM = −K·G·K.
    let [ka, kb, kc] = s.conic;
    let gk = [[sg.conic[0], 0.5 * sg.conic[1]], [0.5 * sg.conic[1], sg.conic[2]]];
    let k = [[ka, kb], [kb, kc]];
    let mut gm = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for p in 0..2 {
                for q in 0..2 {
                    acc += k[i][p] * gk[p][q] * k[q][j];
                }
            }
            gm[i][j] = -acc;
        }
    }

    // 2D covariance → camera-space covariance and Jacobian.
    let t = cam.world_to_camera(g.mu);
    let [fx, fy] = cam.focal;
    let (x, y, z) = (t[0], t[1], t[2]);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let j = [[fx * iz, 0.0, -fx * x * iz2], [0.0, fy * iz, -fy * y * iz2]];
    let w = &cam.rotation;
    let q = math::quat_normalize(g.rot);
    let scale = g.scale();
    let cov = scene::covariance_unchecked(q, scale);
    let sigma_cam = math::mat_mul(&math::mat_mul(w, &cov), &math::transpose(w));

    // dL/dJ = 2·Gm·J·Σc
    let mut jsc = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jsc[r][c] = (0..3).map(|m| j[r][m] * sigma_cam[m][c]).sum();
        }
    }
    let mut gj = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            gj[r][c] = 2.0 * (0..2).map(|m| gm[r][m] * jsc[m][c]).sum::<f64>();
        }
    }
    // dL/dΣc = Jᵀ·Gm·J
    let mut g_sigma_cam = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let mut acc = 0.0;
            for p in 0..2 {
                for q2 in 0..2 {
                    acc += j[p][r] * gm[p][q2] * j[q2][c];
                }
            }
            g_sigma_cam[r][c] = acc;
        }
    }
    let g_sigma = math::mat_mul(&math::mat_mul(&math::transpose(w), &g_sigma_cam), w);

    // Camera-space point: through J and through the projected mean.
    let mut g_t = [0.0; 3];
    g_t[0] += gj[0][2] * (-fx * iz2);
    g_t[1] += gj[1][2] * (-fy * iz2);
    g_t[2] += gj[0][0] * (-fx * iz2)
        + gj[0][2] * (2.0 * fx * x * iz2 * iz)
        + gj[1][1] * (-fy * iz2)
        + gj[1][2] * (2.0 * fy * y * iz2 * iz);
    g_t[0] += sg.mean[0] * fx * iz;
    g_t[1] += sg.mean[1] * fy * iz;
    g_t[2] += -sg.mean[0] * fx * x * iz2 - sg.mean[1] * fy * y * iz2;
    g_mu = math::add(g_mu, math::mat_t_vec(w, g_t));

    // Σ = M·Mᵀ with M = R·S.
    let r = math::quat_to_mat(q);
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            m[a][b] = r[a][b] * scale[b];
        }
    }
    let gsym = symmetrize(&g_sigma);
    let gm3 = math::mat_mul(&gsym, &m);
    let mut g_r = [[0.0; 3]; 3];
    let mut log_scale = [0.0; 3];
    for a in 0..3 {
        for b in 0..3 {
            let dm = 2.0 * gm3[a][b];
            g_r[a][b] = dm * scale[b];
            log_scale[b] += dm * r[a][b] * scale[b];
        }
    }
    let g_qn = quat_to_mat_vjp(q, &g_r);
    let qn_norm = math::quat_norm(g.rot);
    let along = math::quat_dot(q, g_qn);
    let mut rot = [0.0; 4];
    for i in 0..4 {
        rot[i] = (g_qn[i] - q[i] * along) / qn_norm;
    }

    SplatGrads {
        mu: g_mu,
        rot,
        log_scale,
        logit_opacity,
        sh,
    }
}

fn symmetrize(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = 0.5 * (m[i][j] + m[j][i]);
        }
    }
    out
}

/// Vector-Jacobian product of [`math::quat_to_mat`].
fn quat_to_mat_vjp(q: Quat, g: &Mat3) -> Quat {
    let [w, x, y, z] = q;
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1])
        - 4.0 * x * (g[1][1] + g[2][2]);
    let gy = 2.0 * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1])
        - 4.0 * y * (g[0][0] + g[2][2]);
    let gz = 2.0 * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1])
        - 4.0 * z * (g[0][0] + g[1][1]);
    [gw, gx, gy, gz]
}

/// Renders Gaussians from one camera.
pub fn render(gaussians: &[CanonicalGaussian], camera: &Camera, options: RenderOptions) -> RenderedImage {
    Rasterizer::new(gaussians, camera, options).render()
}

#[cfg(test)]
mod tests;
