//! Deterministic synthetic data: crowd scenes with person-detector
//! confidences, annotated moving sequences with exact displacement fields,
//! and training sets generated from a planted linear model.
//!
//! All randomness comes from ChaCha8 seeded with a `u64`, so identical seeds
//! give bit-identical output on every platform.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::{estimate_density, AnnotationSet};
use crate::error::{Error, Result};
use crate::features::FeatureIndexMap;
use crate::flow::FlowField;
use crate::grids::Grid2D;
use crate::learn::TrainingInstance;

/// Confidence of pixels far from every person.
pub const BACKGROUND_CONFIDENCE: f32 = -8.0;
/// Spatial spread of a person's confidence bump, in pixels.
pub const PERSON_SIGMA: f64 = 6.0;
pub const PEAK_RANGE: (f64, f64) = (-0.6, -0.1);
/// Minimum distance between two person centers.
pub const MIN_SEPARATION: f64 = 2.0 * PERSON_SIGMA;
/// Name of the generator recorded in manifests.
pub const RNG_NAME: &str = "ChaCha8";

/// One person proxy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Person {
    /// Center in continuous pixel coordinates.
    pub x: f64,
    pub y: f64,
    /// Detector confidence at the center.
    pub peak: f64,
}

/// Smooth band-limited texture with values inside `[0.1, 0.9]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    /// `(kx, ky, phase, amplitude)` per wave.
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = 7;
        let waves = (0..n)
            .map(|_| {
                let wavelength: f64 = rng.gen_range(7.0..40.0);
                let dir: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / wavelength;
                (
                    k * dir.cos(),
                    k * dir.sin(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    0.4 / n as f64,
                )
            })
            .collect();
        Texture { waves }
    }

    #[inline]
    pub fn at(&self, x: f64, y: f64) -> f64 {
        0.5 + self
            .waves
            .iter()
            .map(|&(kx, ky, p, a)| a * (kx * x + ky * y + p).sin())
            .sum::<f64>()
    }
}

/// A static crowd scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub persons: Vec<Person>,
    pub texture: Texture,
}

/// Places `n` persons with centers at least [`MIN_SEPARATION`] apart and
/// one σ away from the border, each with a random peak confidence.
pub fn generate_scene(n: usize, width: usize, height: usize, seed: u64) -> Result<Scene> {
    let margin = PERSON_SIGMA;
    if (width as f64) <= 2.0 * margin || (height as f64) <= 2.0 * margin {
        return Err(Error::invalid(format!(
            "{width}x{height} frame is too small to hold persons"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Texture::random(&mut rng);
    // bucket grid with cell = separation, so only 3x3 neighbours need checking
    let cell = MIN_SEPARATION;
    let (bw, bh) = (
        (width as f64 / cell).ceil() as usize,
        (height as f64 / cell).ceil() as usize,
    );
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bw * bh];
    let mut persons: Vec<Person> = Vec::with_capacity(n);
    let max_attempts = 1000 + 200 * n;
    let mut attempts = 0;
    while persons.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid(format!(
                "overcrowded: placed only {} of {n} persons in a {width}x{height} frame",
                persons.len()
            )));
        }
        let x = rng.gen_range(margin..width as f64 - margin);
        let y = rng.gen_range(margin..height as f64 - margin);
        let (bx, by) = ((x / cell) as usize, (y / cell) as usize);
        let clear = (by.saturating_sub(1)..=(by + 1).min(bh - 1)).all(|yy| {
            (bx.saturating_sub(1)..=(bx + 1).min(bw - 1)).all(|xx| {
                buckets[yy * bw + xx]
                    .iter()
                    .all(|&k| (persons[k].x - x).hypot(persons[k].y - y) >= MIN_SEPARATION)
            })
        });
        if clear {
            let peak = rng.gen_range(PEAK_RANGE.0..PEAK_RANGE.1);
            buckets[by * bw + bx].push(persons.len());
            persons.push(Person { x, y, peak });
        }
    }
    Ok(Scene {
        width,
        height,
        persons,
        texture,
    })
}

impl Scene {
    /// Detector confidence: background with one Gaussian bump per person,
    /// overlapping bumps combined by maximum.
    pub fn confidence(&self) -> Grid2D {
        let (w, h) = (self.width, self.height);
        let mut out = vec![BACKGROUND_CONFIDENCE; w * h];
        let bg = BACKGROUND_CONFIDENCE as f64;
        let r = 5.0 * PERSON_SIGMA;
        for p in &self.persons {
            let (x0, x1, y0, y1) = window(p.x, p.y, r, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d2 = (x as f64 + 0.5 - p.x).powi(2) + (y as f64 + 0.5 - p.y).powi(2);
                    let v = (bg + (p.peak - bg) * (-d2 / (2.0 * PERSON_SIGMA * PERSON_SIGMA)).exp()) as f32;
                    let o = &mut out[y * w + x];
                    *o = o.max(v);
                }
            }
        }
        Grid2D::new(w, h, 1, out).expect("finite")
    }

    pub fn annotations(&self, frame: u64) -> AnnotationSet {
        AnnotationSet::new(frame, self.persons.iter().map(|p| (p.x, p.y)).collect())
    }

    /// Textured gray image with a dark blob per person.
    pub fn image(&self) -> Grid2D {
        self.render(|x, y| self.texture.at(x, y))
    }

    fn render(&self, tex: impl Fn(f64, f64) -> f64) -> Grid2D {
        let (w, h) = (self.width, self.height);
        let mut shade = vec![1.0f64; w * h];
        let r = 4.0 * PERSON_SIGMA;
        for p in &self.persons {
            let (x0, x1, y0, y1) = window(p.x, p.y, r, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d2 = (x as f64 + 0.5 - p.x).powi(2) + (y as f64 + 0.5 - p.y).powi(2);
                    shade[y * w + x] *= 1.0 - 0.5 * (-d2 / (2.0 * PERSON_SIGMA * PERSON_SIGMA)).exp();
                }
            }
        }
        Grid2D::from_fn(w, h, |x, y| {
            (tex(x as f64 + 0.5, y as f64 + 0.5) * shade[y * w + x]).clamp(0.0, 1.0) as f32
        })
    }
}

/// Pixel index range `[x0, x1) × [y0, y1)` within `r` of a point.
fn window(cx: f64, cy: f64, r: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let clampi = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    (
        clampi((cx - r).floor(), w),
        clampi((cx + r).ceil() + 1.0, w),
        clampi((cy - r).floor(), h),
        clampi((cy + r).ceil() + 1.0, h),
    )
}

/// Motion of persons and texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocitySpec {
    /// Everything moves by `(vx, vy)` pixels per frame.
    Uniform { vx: f64, vy: f64 },
    /// Rows above the horizontal midline move `+speed` along x, rows below
    /// move `−speed`.
    OpposingStreams { speed: f64 },
    /// Rigid rotation about the image center, `omega` radians per frame.
    Rotation { omega: f64 },
}

impl VelocitySpec {
    /// Where the point at `(x, y)` is after `t` frames.
    pub fn advect(&self, x: f64, y: f64, t: f64, width: usize, height: usize) -> (f64, f64) {
        match *self {
            VelocitySpec::Uniform { vx, vy } => (x + vx * t, y + vy * t),
            VelocitySpec::OpposingStreams { speed } => {
                let s = if y < height as f64 / 2.0 { speed } else { -speed };
                (x + s * t, y)
            }
            VelocitySpec::Rotation { omega } => {
                let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
                let (s, c) = (omega * t).sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx - s * dy, cy + s * dx + c * dy)
            }
        }
    }

    /// Displacement over `t` frames of the point currently at `(x, y)`.
    pub fn displacement(&self, x: f64, y: f64, t: f64, width: usize, height: usize) -> (f64, f64) {
        let (x2, y2) = self.advect(x, y, t, width, height);
        (x2 - x, y2 - y)
    }
}

/// One rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    pub image: Grid2D,
    pub confidence: Grid2D,
    pub annotations: AnnotationSet,
}

/// Frames of a moving scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<SyntheticFrame>,
    pub spec: VelocitySpec,
    pub width: usize,
    pub height: usize,
}

impl Sequence {
    /// Exact per-pixel displacement from any frame to the frame `gap` later,
    /// sampled at pixel centers.
    pub fn gt_displacement(&self, gap: usize) -> FlowField {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0f32; w * h * 2];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = self.spec.displacement(x as f64 + 0.5, y as f64 + 0.5, gap as f64, w, h);
                data[2 * (y * w + x)] = dx as f32;
                data[2 * (y * w + x) + 1] = dy as f32;
            }
        }
        FlowField::from_grid(Grid2D::new(w, h, 2, data).expect("finite")).expect("two channels")
    }
}

/// Advects the scene for `n_frames` frames. Frame `t` shows each person at
/// its position advected by `t` frames and the texture carried along the
/// same motion; `noise_std > 0` adds independent Gaussian noise per pixel
/// (clamped to `[0, 1]`), drawn from `seed`.
pub fn generate_sequence(
    scene: &Scene,
    spec: VelocitySpec,
    n_frames: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Sequence> {
    if n_frames == 0 {
        return Err(Error::invalid("a sequence needs at least one frame"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise level must be non-negative"));
    }
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid deviation");
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let tf = t as f64;
        let persons: Vec<Person> = scene
            .persons
            .iter()
            .map(|p| {
                let (x, y) = spec.advect(p.x, p.y, tf, w, h);
                Person { x, y, ..*p }
            })
            .collect();
        if let Some(p) = persons
            .iter()
            .find(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64))
        {
            return Err(Error::invalid(format!(
                "a person leaves the frame by frame {t} (at {:.1}, {:.1}); shorten the sequence or slow the motion",
                p.x, p.y
            )));
        }
        let moved = Scene {
            persons,
            ..scene.clone()
        };
        let mut image = moved.render(|x, y| {
            let (sx, sy) = source_point(&spec, x, y, tf, w, h);
            scene.texture.at(sx, sy)
        });
        if noise_std > 0.0 {
            for v in image.data_mut() {
                *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        frames.push(SyntheticFrame {
            confidence: moved.confidence(),
            annotations: moved.annotations(t as u64),
            image,
        });
    }
    Ok(Sequence {
        frames,
        spec,
        width: w,
        height: h,
    })
}

/// Point of frame 0 that the motion carries to `(x, y)` by frame `t`.
fn source_point(spec: &VelocitySpec, x: f64, y: f64, t: f64, w: usize, h: usize) -> (f64, f64) {
    match *spec {
        // horizontal streams never change rows, so the row decides the stream
        VelocitySpec::OpposingStreams { speed } => {
            let s = if y < h as f64 / 2.0 { speed } else { -speed };
            (x - s * t, y)
        }
        _ => spec.advect(x, y, -t, w, h),
    }
}

/// Training set whose ground truth is produced by the weights `w_star`, so
/// `w_star` fits it exactly.
///
/// Each frame draws its own random mixture over the `k` indices and then
/// samples every pixel independently from it, so frames differ in feature
/// composition.
pub fn generate_planted_training(
    n_frames: usize,
    width: usize,
    height: usize,
    k: usize,
    w_star: &[f64],
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    if k == 0 || w_star.len() != k {
        return Err(Error::mismatch(format!("{k} weights"), w_star.len()));
    }
    if n_frames == 0 || width == 0 || height == 0 {
        return Err(Error::invalid("planted training needs frames with pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = (0..n_frames)
        .map(|_| {
            let mix: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = mix.iter().sum();
            let mut cdf = Vec::with_capacity(k);
            let mut acc = 0.0;
            for m in &mix {
                acc += m / total;
                cdf.push(acc);
            }
            let idx = (0..width * height)
                .map(|_| {
                    let u: f64 = rng.gen();
                    cdf.iter().position(|&c| u < c).unwrap_or(k - 1) as u32
                })
                .collect();
            FeatureIndexMap::new(width, height, vec![k], idx)
        })
        .collect::<Result<Vec<_>>>()?;
    planted_from_maps(maps, w_star)
}

/// Pairs each feature map with the density `w_star` predicts for it, after
/// checking that every feature index occurs somewhere.
pub fn planted_from_maps(maps: Vec<FeatureIndexMap>, w_star: &[f64]) -> Result<Vec<TrainingInstance>> {
    let first = maps.first().ok_or_else(|| Error::invalid("no feature maps"))?;
    let n = first.total_vocab();
    if w_star.len() != n {
        return Err(Error::mismatch(format!("{n} weights"), w_star.len()));
    }
    if w_star.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("planted weights must be finite and non-negative"));
    }
    let mut seen = vec![false; n];
    for m in &maps {
        if m.vocab_sizes() != first.vocab_sizes() {
            return Err(Error::mismatch(
                format!("{:?}", first.vocab_sizes()),
                format!("{:?}", m.vocab_sizes()),
            ));
        }
        for j in m.global_indices() {
            seen[j as usize] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!(
            "feature index {missing} never occurs; every index needs at least one pixel"
        )));
    }
    maps.into_iter()
        .enumerate()
        .map(|(i, m)| {
            let gt = estimate_density(&m, w_star)?;
            TrainingInstance::new(i as u64, m, gt)
        })
        .collect()
}

/// Index of generated files, written next to them as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub rng: String,
    pub width: usize,
    pub height: usize,
    /// Generation settings, free-form.
    pub params: serde_json::Value,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub frame: u64,
    pub persons: usize,
    /// Role (e.g. `image`, `confidence`, `gt_flow`) to relative file path.
    pub files: BTreeMap<String, String>,
}
