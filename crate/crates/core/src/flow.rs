//! TV-L1 optical flow and temporal averaging of flow fields.
//!
//! Coarse-to-fine duality-based scheme: on each pyramid level the second
//! image is warped by the current flow, the brightness residual is
//! linearized, and the relaxed energy
//! `Σ|∇u| + (1/2θ)|u − v|² + λ|ρ(v)|` is minimized by alternating a pointwise
//! thresholding step in `v` with Chambolle dual-projection steps on the
//! total-variation term. All sweeps read the previous iterate only (Jacobi
//! style), so results do not depend on scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::Grid2D;

/// Default frame gap between the two images of a flow pair.
pub const DEFAULT_GAP: usize = 10;
/// Default number of consecutive flows averaged together.
pub const DEFAULT_AVG_WINDOW: usize = 5;

/// Intensities are rescaled to this range internally; `lambda` is expressed
/// against it.
const INTENSITY_SCALE: f32 = 255.0;
const GRAD_IS_ZERO: f32 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    /// Data-term weight, for intensities on a 0–255 scale.
    pub lambda: f32,
    /// Coupling between `u` and the auxiliary field `v`.
    pub theta: f32,
    /// Dual step; must not exceed 0.25.
    pub tau: f32,
    pub warps: usize,
    pub inner_iterations: usize,
    /// Pyramid downsampling factor in (0, 1).
    pub scale: f32,
    /// Coarsest level keeps both sides at least this long.
    pub min_level_size: usize,
    pub gap: usize,
    pub avg_window: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            warps: 5,
            inner_iterations: 50,
            scale: 0.5,
            min_level_size: 16,
            gap: DEFAULT_GAP,
            avg_window: DEFAULT_AVG_WINDOW,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return bad("tau must lie in (0, 0.25]");
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return bad("pyramid scale must lie in (0, 1)");
        }
        if !(self.lambda > 0.0 && self.theta > 0.0) {
            return bad("lambda and theta must be positive");
        }
        if self.gap == 0 || self.warps == 0 || self.inner_iterations == 0 || self.avg_window == 0 {
            return bad("gap, warps, inner iterations and averaging window must be at least 1");
        }
        if self.min_level_size == 0 {
            return bad("minimum level size must be at least 1");
        }
        Ok(())
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels, stored as a 2-channel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Grid2D);

impl FlowField {
    pub fn from_grid(grid: Grid2D) -> Result<Self> {
        if grid.channels() != 2 {
            return Err(Error::mismatch("2 channels", format!("{} channels", grid.channels())));
        }
        Ok(FlowField(grid))
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let mut g = Grid2D::zeros(width, height, 2);
        for px in g.data_mut().chunks_exact_mut(2) {
            px[0] = dx;
            px[1] = dy;
        }
        FlowField(g)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.0
    }

    pub fn into_grid(self) -> Grid2D {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        (self.0.get(x, y, 0), self.0.get(x, y, 1))
    }

    pub fn mean_vector(&self) -> (f64, f64) {
        let n = (self.width() * self.height()) as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for px in self.0.data().chunks_exact(2) {
            sx += px[0] as f64;
            sy += px[1] as f64;
        }
        (sx / n, sy / n)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = (self.width() * self.height()) as f64;
        self.0
            .data()
            .chunks_exact(2)
            .map(|p| ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt())
            .sum::<f64>()
            / n
    }

    /// Mean endpoint error against a reference field, optionally ignoring a
    /// border of `margin` pixels.
    pub fn mean_endpoint_error(&self, reference: &FlowField, margin: usize) -> Result<f64> {
        if !self.0.same_shape(&reference.0) {
            return Err(Error::mismatch(reference.0.shape_string(), self.0.shape_string()));
        }
        let (w, h) = (self.width(), self.height());
        if 2 * margin >= w || 2 * margin >= h {
            return Err(Error::invalid("margin leaves no pixels"));
        }
        let mut s = 0.0;
        let mut n = 0usize;
        for y in margin..h - margin {
            for x in margin..w - margin {
                let (a, b) = self.at(x, y);
                let (c, d) = reference.at(x, y);
                s += (((a - c) as f64).powi(2) + ((b - d) as f64).powi(2)).sqrt();
                n += 1;
            }
        }
        Ok(s / n as f64)
    }
}

/// Channel mean of a multi-channel image.
pub fn to_grayscale(img: &Grid2D) -> Grid2D {
    if img.channels() == 1 {
        return img.clone();
    }
    let c = img.channels();
    let data = img
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() as f32 / c as f32)
        .collect();
    Grid2D::new(img.width(), img.height(), 1, data).expect("finite input")
}

/// Single-channel working image.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Plane {
            w,
            h,
            v: vec![0.0; w * h],
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.v[y * self.w + x]
    }

    /// Bilinear sample in index coordinates, clamped to the border.
    #[inline]
    fn sample(&self, x: f32, y: f32) -> f32 {
        let xc = x.clamp(0.0, (self.w - 1) as f32);
        let yc = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Central-difference gradient with replicated borders.
    fn gradient(&self) -> (Plane, Plane) {
        let (w, h) = (self.w, self.h);
        let mut gx = Plane::zeros(w, h);
        let mut gy = Plane::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                let ym = y.saturating_sub(1);
                let yp = (y + 1).min(h - 1);
                gx.v[y * w + x] = 0.5 * (self.at(xp, y) - self.at(xm, y));
                gy.v[y * w + x] = 0.5 * (self.at(x, yp) - self.at(x, ym));
            }
        }
        (gx, gy)
    }

    fn gaussian_blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let k: Vec<f32> = (-r..=r)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let ks: f32 = k.iter().sum();
        let k: Vec<f32> = k.iter().map(|v| v / ks).collect();
        let (w, h) = (self.w as isize, self.h as isize);
        let mut tmp = Plane::zeros(self.w, self.h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x + i as isize - r).clamp(0, w - 1);
                    s += kv * self.v[(y * w + xx) as usize];
                }
                tmp.v[(y * w + x) as usize] = s;
            }
        }
        let mut out = Plane::zeros(self.w, self.h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y + i as isize - r).clamp(0, h - 1);
                    s += kv * tmp.v[(yy * w + x) as usize];
                }
                out.v[(y * w + x) as usize] = s;
            }
        }
        out
    }

    /// Resamples to `nw × nh` with pixel centers aligned.
    fn resample(&self, nw: usize, nh: usize) -> Plane {
        let sx = self.w as f32 / nw as f32;
        let sy = self.h as f32 / nh as f32;
        let mut out = Plane::zeros(nw, nh);
        for y in 0..nh {
            for x in 0..nw {
                out.v[y * nw + x] = self.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5);
            }
        }
        out
    }
}

fn check_pair(i1: &Grid2D, i2: &Grid2D) -> Result<(Plane, Plane)> {
    if i1.width() != i2.width() || i1.height() != i2.height() || i1.channels() != i2.channels() {
        return Err(Error::mismatch(i1.shape_string(), i2.shape_string()));
    }
    let g1 = to_grayscale(i1);
    let g2 = to_grayscale(i2);
    for g in [&g1, &g2] {
        if g.data().iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
            return Err(Error::invalid("flow inputs must be normalized to [0, 1]"));
        }
    }
    let to_plane = |g: &Grid2D| Plane {
        w: g.width(),
        h: g.height(),
        v: g.data().iter().map(|&v| v * INTENSITY_SCALE).collect(),
    };
    Ok((to_plane(&g1), to_plane(&g2)))
}

/// Dense TV-L1 flow from `i1` to `i2`: `i2(x + u(x)) ≈ i1(x)`.
pub fn tvl1_flow(i1: &Grid2D, i2: &Grid2D, p: &FlowParams) -> Result<FlowField> {
    p.validate()?;
    let (a, b) = check_pair(i1, i2)?;

    // pyramid, finest first
    let mut pyr = vec![(a, b)];
    loop {
        let (ca, _) = pyr.last().unwrap();
        let nw = (ca.w as f32 * p.scale).round() as usize;
        let nh = (ca.h as f32 * p.scale).round() as usize;
        if nw < p.min_level_size || nh < p.min_level_size {
            break;
        }
        let sigma = 0.6 * (1.0 / (p.scale * p.scale) - 1.0).sqrt();
        let (ca, cb) = pyr.last().unwrap();
        let next = (
            ca.gaussian_blur(sigma).resample(nw, nh),
            cb.gaussian_blur(sigma).resample(nw, nh),
        );
        pyr.push(next);
    }

    let (cw, ch) = (pyr.last().unwrap().0.w, pyr.last().unwrap().0.h);
    let mut u1 = Plane::zeros(cw, ch);
    let mut u2 = Plane::zeros(cw, ch);
    for level in (0..pyr.len()).rev() {
        let (i0, i1l) = &pyr[level];
        if u1.w != i0.w || u1.h != i0.h {
            let fx = i0.w as f32 / u1.w as f32;
            let fy = i0.h as f32 / u1.h as f32;
            let mut n1 = u1.resample(i0.w, i0.h);
            let mut n2 = u2.resample(i0.w, i0.h);
            n1.v.iter_mut().for_each(|v| *v *= fx);
            n2.v.iter_mut().for_each(|v| *v *= fy);
            u1 = n1;
            u2 = n2;
        }
        tvl1_level(i0, i1l, &mut u1, &mut u2, p);
    }

    let (w, h) = (i1.width(), i1.height());
    let mut data = vec![0.0f32; w * h * 2];
    for i in 0..w * h {
        data[2 * i] = u1.v[i];
        data[2 * i + 1] = u2.v[i];
    }
    FlowField::from_grid(Grid2D::new(w, h, 2, data)?)
}

fn tvl1_level(i0: &Plane, i1: &Plane, u1: &mut Plane, u2: &mut Plane, p: &FlowParams) {
    let (w, h) = (i0.w, i0.h);
    let n = w * h;
    let (i1x, i1y) = i1.gradient();
    let l_t = p.lambda * p.theta;
    let taut = p.tau / p.theta;

    let mut p11 = vec![0.0f32; n];
    let mut p12 = vec![0.0f32; n];
    let mut p21 = vec![0.0f32; n];
    let mut p22 = vec![0.0f32; n];
    let mut v1 = vec![0.0f32; n];
    let mut v2 = vec![0.0f32; n];
    let mut div1 = vec![0.0f32; n];
    let mut div2 = vec![0.0f32; n];

    let mut wx = vec![0.0f32; n];
    let mut wy = vec![0.0f32; n];
    let mut grad = vec![0.0f32; n];
    let mut rho_c = vec![0.0f32; n];
    let mut valid = vec![true; n];

    for _ in 0..p.warps {
        // warp I1 and its gradient by the current flow
        rho_c
            .par_chunks_mut(w)
            .zip(wx.par_chunks_mut(w))
            .zip(wy.par_chunks_mut(w))
            .zip(grad.par_chunks_mut(w))
            .zip(valid.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, ((((rc, gx), gy), g2), ok))| {
                for x in 0..w {
                    let i = y * w + x;
                    let sx = x as f32 + u1.v[i];
                    let sy = y as f32 + u2.v[i];
                    ok[x] = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f32 && sy <= (h - 1) as f32;
                    let iw = i1.sample(sx, sy);
                    gx[x] = i1x.sample(sx, sy);
                    gy[x] = i1y.sample(sx, sy);
                    g2[x] = gx[x] * gx[x] + gy[x] * gy[x];
                    rc[x] = iw - gx[x] * u1.v[i] - gy[x] * u2.v[i] - i0.v[i];
                }
            });

        for _ in 0..p.inner_iterations {
            // thresholding on the linearized data term
            v1.par_iter_mut()
                .zip(v2.par_iter_mut())
                .enumerate()
                .for_each(|(i, (a, b))| {
                    let (x1, x2) = (u1.v[i], u2.v[i]);
                    if !valid[i] {
                        *a = x1;
                        *b = x2;
                        return;
                    }
                    let rho = rho_c[i] + wx[i] * x1 + wy[i] * x2;
                    let g = grad[i];
                    let (d1, d2) = if rho < -l_t * g {
                        (l_t * wx[i], l_t * wy[i])
                    } else if rho > l_t * g {
                        (-l_t * wx[i], -l_t * wy[i])
                    } else if g > GRAD_IS_ZERO {
                        (-rho * wx[i] / g, -rho * wy[i] / g)
                    } else {
                        (0.0, 0.0)
                    };
                    *a = x1 + d1;
                    *b = x2 + d2;
                });

            divergence(&p11, &p12, w, h, &mut div1);
            divergence(&p21, &p22, w, h, &mut div2);
            u1.v.par_iter_mut()
                .zip(v1.par_iter())
                .zip(div1.par_iter())
                .for_each(|((u, v), d)| *u = v + p.theta * d);
            u2.v.par_iter_mut()
                .zip(v2.par_iter())
                .zip(div2.par_iter())
                .for_each(|((u, v), d)| *u = v + p.theta * d);

            dual_step(&u1.v, w, h, taut, &mut p11, &mut p12);
            dual_step(&u2.v, w, h, taut, &mut p21, &mut p22);
        }
    }
}

/// Backward-difference divergence, adjoint of the forward gradient.
fn divergence(px: &[f32], py: &[f32], w: usize, h: usize, out: &mut [f32]) {
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x + 1 < w { px[i] } else { 0.0 } - if x > 0 { px[i - 1] } else { 0.0 };
            let dy = if y + 1 < h { py[i] } else { 0.0 } - if y > 0 { py[i - w] } else { 0.0 };
            row[x] = dx + dy;
        }
    });
}

fn dual_step(u: &[f32], w: usize, h: usize, taut: f32, px: &mut [f32], py: &mut [f32]) {
    px.par_chunks_mut(w)
        .zip(py.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (rx, ry))| {
            for x in 0..w {
                let i = y * w + x;
                let ux = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
                let uy = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
                let ng = 1.0 + taut * (ux * ux + uy * uy).sqrt();
                rx[x] = (rx[x] + taut * ux) / ng;
                ry[x] = (ry[x] + taut * uy) / ng;
            }
        });
}

/// TV-L1 energy `Σ(|∇u₁| + |∇u₂|) + λ·Σ|I2(x + u) − I1(x)|` on the 0–255
/// intensity scale, with border-clamped warping.
pub fn tvl1_energy(i1: &Grid2D, i2: &Grid2D, flow: &FlowField, lambda: f32) -> Result<f64> {
    let (a, b) = check_pair(i1, i2)?;
    if flow.width() != a.w || flow.height() != a.h {
        return Err(Error::mismatch(format!("{}x{}", a.w, a.h), flow.grid().shape_string()));
    }
    let (w, h) = (a.w, a.h);
    let mut e = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            let warped = b.sample(x as f32 + u, y as f32 + v);
            e += lambda as f64 * (warped - a.at(x, y)).abs() as f64;
            for c in 0..2 {
                let here = flow.grid().get(x, y, c);
                let gx = if x + 1 < w {
                    flow.grid().get(x + 1, y, c) - here
                } else {
                    0.0
                };
                let gy = if y + 1 < h {
                    flow.grid().get(x, y + 1, c) - here
                } else {
                    0.0
                };
                e += ((gx * gx + gy * gy) as f64).sqrt();
            }
        }
    }
    Ok(e)
}

/// Per-pixel arithmetic mean of equally sized flow fields.
pub fn average_flows(fields: &[FlowField]) -> Result<FlowField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::invalid("no flow fields to average"))?;
    for f in fields {
        if !f.0.same_shape(&first.0) {
            return Err(Error::mismatch(first.0.shape_string(), f.0.shape_string()));
        }
    }
    let k = fields.len() as f64;
    let n = first.0.data().len();
    let data = (0..n)
        .map(|i| (fields.iter().map(|f| f.0.data()[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    FlowField::from_grid(Grid2D::new(first.width(), first.height(), 2, data)?)
}

/// Flows for every frame pair `(t, t + gap)`.
pub fn flow_sequence(frames: &[Grid2D], p: &FlowParams) -> Result<Vec<FlowField>> {
    p.validate()?;
    if frames.len() <= p.gap {
        return Err(Error::invalid(format!(
            "{} frames are not enough for a gap of {}",
            frames.len(),
            p.gap
        )));
    }
    (0..frames.len() - p.gap)
        .map(|t| tvl1_flow(&frames[t], &frames[t + p.gap], p))
        .collect()
}

/// Sliding-window averages: entry `t` averages flows `t .. t + window`.
pub fn windowed_averages(flows: &[FlowField], window: usize) -> Result<Vec<FlowField>> {
    if window == 0 {
        return Err(Error::invalid("averaging window must be at least 1"));
    }
    if flows.len() < window {
        return Err(Error::invalid(format!(
            "{} flows are fewer than the window {window}",
            flows.len()
        )));
    }
    (0..=flows.len() - window)
        .map(|t| average_flows(&flows[t..t + window]))
        .collect()
}
