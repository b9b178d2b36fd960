//! Differentiable renderers x_0 = g(θ, c).
//!
//! Two representations: [`PixelImage`], where θ is the output itself, and
//! [`SplatScene`], a set of anisotropic 2D Gaussians composited additively
//! and passed through a smooth clamp.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const SCENE_MAGIC: &[u8; 6] = b"SPLAT1";

/// Half-width of each knee of the smooth clamp.
pub const CLAMP_KNEE: f64 = 0.05;

/// Kernel support in squared Mahalanobis units (a 5σ ellipse).
const KERNEL_CUTOFF_Q: f64 = 25.0;

/// Smooth clamp to [0, 1]: identity on [a, 1 − a], zero below 0, one above 1,
/// joined by cubic Hermite knees that match value and slope (C¹).
///
/// On [0, a] with s = x/a the knee is a·(2s² − s³); the upper knee mirrors it.
pub fn smooth_clamp(x: f64) -> f64 {
    let a = CLAMP_KNEE;
    if x <= 0.0 {
        0.0
    } else if x < a {
        let s = x / a;
        a * s * s * (2.0 - s)
    } else if x <= 1.0 - a {
        x
    } else if x < 1.0 {
        1.0 - smooth_clamp(1.0 - x)
    } else {
        1.0
    }
}

pub fn smooth_clamp_derivative(x: f64) -> f64 {
    let a = CLAMP_KNEE;
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else if x < a {
        let s = x / a;
        s * (4.0 - 3.0 * s)
    } else if x <= 1.0 - a {
        1.0
    } else {
        smooth_clamp_derivative(1.0 - x)
    }
}

/// Camera analog: a 2D translation and zoom about the canvas center.
///
/// A pixel at p samples the scene at p' = c + (p − c)/zoom − translation,
/// so a positive translation shifts the picture toward larger coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub translation: [f64; 2],
    pub zoom: f64,
}

impl Default for View {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl View {
    pub const IDENTITY: View = View {
        translation: [0.0, 0.0],
        zoom: 1.0,
    };

    fn to_scene(&self, p: [f64; 2]) -> [f64; 2] {
        [
            0.5 + (p[0] - 0.5) / self.zoom - self.translation[0],
            0.5 + (p[1] - 0.5) / self.zoom - self.translation[1],
        ]
    }

    fn to_image(&self, q: [f64; 2]) -> [f64; 2] {
        [
            0.5 + self.zoom * (q[0] + self.translation[0] - 0.5),
            0.5 + self.zoom * (q[1] + self.translation[1] - 0.5),
        ]
    }
}

/// Random view distribution: translation uniform in a box, zoom
/// log-uniform in `[zoom_min, zoom_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSampler {
    pub translation_min: [f64; 2],
    pub translation_max: [f64; 2],
    pub zoom_min: f64,
    pub zoom_max: f64,
}

impl Default for ViewSampler {
    fn default() -> Self {
        Self::fixed()
    }
}

impl ViewSampler {
    pub fn fixed() -> Self {
        Self {
            translation_min: [0.0; 2],
            translation_max: [0.0; 2],
            zoom_min: 1.0,
            zoom_max: 1.0,
        }
    }

    pub fn jitter(half_width: f64, zoom_min: f64, zoom_max: f64) -> Self {
        Self {
            translation_min: [-half_width; 2],
            translation_max: [half_width; 2],
            zoom_min,
            zoom_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_box = (0..2).all(|i| self.translation_min[i] <= self.translation_max[i]);
        if !ok_box || !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max) {
            return Err(Error::InvalidRange(format!("bad view sampler {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> View {
        let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let translation = [
            uniform(self.translation_min[0], self.translation_max[0]),
            uniform(self.translation_min[1], self.translation_max[1]),
        ];
        let zoom = uniform(self.zoom_min.ln(), self.zoom_max.ln()).exp();
        View { translation, zoom }
    }
}

/// A differentiable representation rendered to a flat sample vector.
pub trait Representation: Clone + Send + Sync {
    /// Length of the rendered vector.
    fn output_dim(&self) -> usize;
    fn param_count(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn render(&self, view: &View) -> Vec<f64>;
    /// Vector-Jacobian product of `render` with `upstream`.
    fn render_grad(&self, view: &View, upstream: &[f64]) -> Result<Vec<f64>>;
}

/// Identity renderer: the optimized parameters are the sample itself and
/// views are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub theta: Vec<f64>,
}

impl PixelImage {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }
}

impl Representation for PixelImage {
    fn output_dim(&self) -> usize {
        self.theta.len()
    }

    fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.theta.len(), params.len())?;
        self.theta.copy_from_slice(params);
        Ok(())
    }

    fn render(&self, _view: &View) -> Vec<f64> {
        self.theta.clone()
    }

    fn render_grad(&self, _view: &View, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.theta.len(), upstream.len())?;
        Ok(upstream.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Canvas {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Center of pixel (row, col) in [0,1]² as (x, y).
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub mu: [f64; 2],
    /// Per-axis log standard deviation.
    pub log_scale: [f64; 2],
    pub angle: f64,
    pub color: Vec<f64>,
    pub opacity_logit: f64,
}

impl Splat {
    pub fn opacity(&self) -> f64 {
        1.0 / (1.0 + (-self.opacity_logit).exp())
    }

    fn param_len(channels: usize) -> usize {
        6 + channels
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.log_scale);
        out.push(self.angle);
        out.extend_from_slice(&self.color);
        out.push(self.opacity_logit);
    }

    fn from_params(p: &[f64], channels: usize) -> Self {
        Self {
            mu: [p[0], p[1]],
            log_scale: [p[2], p[3]],
            angle: p[4],
            color: p[5..5 + channels].to_vec(),
            opacity_logit: p[5 + channels],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SplatGeometry {
    cos: f64,
    sin: f64,
    inv_var: [f64; 2],
}

impl SplatGeometry {
    fn of(s: &Splat) -> Self {
        let (sin, cos) = s.angle.sin_cos();
        let inv_var = [(-2.0 * s.log_scale[0]).exp(), (-2.0 * s.log_scale[1]).exp()];
        Self { cos, sin, inv_var }
    }

    /// Offset rotated into the splat frame.
    fn local(&self, d: [f64; 2]) -> [f64; 2] {
        [
            self.cos * d[0] + self.sin * d[1],
            -self.sin * d[0] + self.cos * d[1],
        ]
    }
}

/// Truncated, renormalized Gaussian kernel of the squared Mahalanobis
/// distance `q`: (e^{−q/2} − e^{−25/2}) / (1 − e^{−25/2}) inside the 5σ
/// ellipse, zero outside. Returns the kernel and dk/dq.
fn kernel(q: f64) -> (f64, f64) {
    if q >= KERNEL_CUTOFF_Q {
        return (0.0, 0.0);
    }
    let floor = (-0.5 * KERNEL_CUTOFF_Q).exp();
    let norm = 1.0 / (1.0 - floor);
    let e = (-0.5 * q).exp();
    ((e - floor) * norm, -0.5 * e * norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatScene {
    pub canvas: Canvas,
    pub splats: Vec<Splat>,
}

impl SplatScene {
    pub fn new(canvas: Canvas, splats: Vec<Splat>) -> Result<Self> {
        if canvas.is_empty() {
            return Err(Error::InvalidRange("canvas must be non-empty".into()));
        }
        for s in &splats {
            check_dim(canvas.channels, s.color.len())?;
        }
        Ok(Self { canvas, splats })
    }

    /// Splat centers from N(center, spread²) per axis, isotropic scale
    /// `scale`, random orientation, constant color and opacity 1/2.
    pub fn init_random<R: Rng + ?Sized>(
        canvas: Canvas,
        count: usize,
        spread: f64,
        scale: f64,
        color: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(spread >= 0.0 && scale > 0.0) {
            return Err(Error::InvalidRange(format!(
                "spread {spread} / scale {scale}"
            )));
        }
        let pos = Normal::new(0.5, spread).map_err(|e| Error::InvalidRange(e.to_string()))?;
        let jitter = Normal::new(0.0, 0.1).unwrap();
        let splats = (0..count)
            .map(|_| Splat {
                mu: [pos.sample(rng), pos.sample(rng)],
                log_scale: [
                    scale.ln() + jitter.sample(rng),
                    scale.ln() + jitter.sample(rng),
                ],
                angle: rng.random::<f64>() * std::f64::consts::PI,
                color: vec![color; canvas.channels],
                opacity_logit: 0.0,
            })
            .collect();
        Self::new(canvas, splats)
    }

    /// Pixel index range touched by a splat under `view`.
    fn pixel_bounds(&self, s: &Splat, view: &View) -> Option<(usize, usize, usize, usize)> {
        let center = view.to_image(s.mu);
        let radius = view.zoom * KERNEL_CUTOFF_Q.sqrt() * s.log_scale[0].max(s.log_scale[1]).exp();
        let (w, h) = (self.canvas.width as f64, self.canvas.height as f64);
        let col_lo = ((center[0] - radius) * w - 0.5).floor().max(0.0);
        let col_hi = ((center[0] + radius) * w - 0.5).ceil().min(w - 1.0);
        let row_lo = ((center[1] - radius) * h - 0.5).floor().max(0.0);
        let row_hi = ((center[1] + radius) * h - 0.5).ceil().min(h - 1.0);
        if !(col_lo <= col_hi && row_lo <= row_hi) {
            return None;
        }
        Some((row_lo as usize, row_hi as usize, col_lo as usize, col_hi as usize))
    }

    /// Pre-clamp additive radiance Σ_i o_i c_i k_i(p').
    fn accumulate(&self, view: &View) -> Vec<f64> {
        let c = self.canvas.channels;
        let mut acc = vec![0.0; self.canvas.len()];
        for s in &self.splats {
            let Some((r0, r1, c0, c1)) = self.pixel_bounds(s, view) else {
                continue;
            };
            let geo = SplatGeometry::of(s);
            let o = s.opacity();
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let q = self.mahalanobis(&geo, s, view, row, col).0;
                    let (k, _) = kernel(q);
                    if k == 0.0 {
                        continue;
                    }
                    let base = (row * self.canvas.width + col) * c;
                    for ch in 0..c {
                        acc[base + ch] += o * s.color[ch] * k;
                    }
                }
            }
        }
        acc
    }

    /// Squared Mahalanobis distance and the local offset used for it.
    fn mahalanobis(
        &self,
        geo: &SplatGeometry,
        s: &Splat,
        view: &View,
        row: usize,
        col: usize,
    ) -> (f64, [f64; 2]) {
        let p = view.to_scene(self.canvas.pixel_center(row, col));
        let u = geo.local([p[0] - s.mu[0], p[1] - s.mu[1]]);
        (u[0] * u[0] * geo.inv_var[0] + u[1] * u[1] * geo.inv_var[1], u)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SCENE_MAGIC)?;
        for v in [
            self.splats.len(),
            self.canvas.height,
            self.canvas.width,
            self.canvas.channels,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in self.params() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != SCENE_MAGIC {
            return Err(Error::Format {
                format: "SPLAT1",
                reason: "bad magic".into(),
            });
        }
        let mut head = [0usize; 4];
        let mut b4 = [0u8; 4];
        for h in &mut head {
            r.read_exact(&mut b4)?;
            *h = u32::from_le_bytes(b4) as usize;
        }
        let [n, height, width, channels] = head;
        let canvas = Canvas {
            height,
            width,
            channels,
        };
        let mut params = vec![0.0; n * Splat::param_len(channels)];
        let mut b8 = [0u8; 8];
        for p in &mut params {
            r.read_exact(&mut b8)?;
            *p = f64::from_le_bytes(b8);
        }
        let splats = params
            .chunks_exact(Splat::param_len(channels))
            .map(|c| Splat::from_params(c, channels))
            .collect();
        Self::new(canvas, splats)
    }
}

impl Representation for SplatScene {
    fn output_dim(&self) -> usize {
        self.canvas.len()
    }

    fn param_count(&self) -> usize {
        self.splats.len() * Splat::param_len(self.canvas.channels)
    }

    /// Per splat, in field order: mu (2), log_scale (2), angle, color (C),
    /// opacity_logit.
    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in &self.splats {
            s.write_params(&mut out);
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.param_count(), params.len())?;
        let c = self.canvas.channels;
        for (s, chunk) in self
            .splats
            .iter_mut()
            .zip(params.chunks_exact(Splat::param_len(c)))
        {
            *s = Splat::from_params(chunk, c);
        }
        Ok(())
    }

    fn render(&self, view: &View) -> Vec<f64> {
        let mut img = self.accumulate(view);
        img.iter_mut().for_each(|v| *v = smooth_clamp(*v));
        img
    }

    fn render_grad(&self, view: &View, upstream: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.canvas.len(), upstream.len())?;
        let c = self.canvas.channels;
        let acc = self.accumulate(view);
        let g: Vec<f64> = upstream
            .iter()
            .zip(&acc)
            .map(|(u, a)| u * smooth_clamp_derivative(*a))
            .collect();
        let plen = Splat::param_len(c);
        let mut grad = vec![0.0; self.param_count()];
        for (s, out) in self.splats.iter().zip(grad.chunks_exact_mut(plen)) {
            let Some((r0, r1, c0, c1)) = self.pixel_bounds(s, view) else {
                continue;
            };
            let geo = SplatGeometry::of(s);
            let o = s.opacity();
            let (mut d_mu, mut d_ls, mut d_angle, mut d_logit) = ([0.0; 2], [0.0; 2], 0.0, 0.0);
            let mut d_color = vec![0.0; c];
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let (q, u) = self.mahalanobis(&geo, s, view, row, col);
                    let (k, dk_dq) = kernel(q);
                    if k == 0.0 && dk_dq == 0.0 {
                        continue;
                    }
                    let base = (row * self.canvas.width + col) * c;
                    let gp = &g[base..base + c];
                    // Σ_c g_c · color_c
                    let gc: f64 = gp.iter().zip(&s.color).map(|(a, b)| a * b).sum();
                    for ch in 0..c {
                        d_color[ch] += gp[ch] * o * k;
                    }
                    d_logit += gc * k * o * (1.0 - o);
                    // dL/dq
                    let dq = gc * o * dk_dq;
                    if dq == 0.0 {
                        continue;
                    }
                    let wu = [u[0] * geo.inv_var[0], u[1] * geo.inv_var[1]];
                    // dq/dd = 2 R S⁻² u, and d = p' − μ
                    let dq_dd = [
                        2.0 * (geo.cos * wu[0] - geo.sin * wu[1]),
                        2.0 * (geo.sin * wu[0] + geo.cos * wu[1]),
                    ];
                    d_mu[0] -= dq * dq_dd[0];
                    d_mu[1] -= dq * dq_dd[1];
                    d_ls[0] -= dq * 2.0 * u[0] * wu[0];
                    d_ls[1] -= dq * 2.0 * u[1] * wu[1];
                    // du0/dθ = u1, du1/dθ = −u0
                    d_angle += dq * 2.0 * (wu[0] * u[1] - wu[1] * u[0]);
                }
            }
            out[0] = d_mu[0];
            out[1] = d_mu[1];
            out[2] = d_ls[0];
            out[3] = d_ls[1];
            out[4] = d_angle;
            out[5..5 + c].copy_from_slice(&d_color);
            out[5 + c] = d_logit;
        }
        Ok(grad)
    }
}

/// Binary PGM (P5, C = 1) or PPM (P6, C = 3) with 8-bit samples.
pub fn write_netpbm<W: Write>(mut w: W, canvas: Canvas, pixels: &[f64]) -> Result<()> {
    check_dim(canvas.len(), pixels.len())?;
    let tag = match canvas.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Format {
                format: "netpbm",
                reason: format!("{c} channels; only 1 or 3 are writable"),
            })
        }
    };
    write!(w, "{tag}\n{} {}\n255\n", canvas.width, canvas.height)?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
