//! Discretized per-pixel features.
//!
//! Each pixel carries one integer index per channel; channel `c` has its own
//! vocabulary of `K_c` values. Channels are stacked into one global index
//! space by offsetting channel `c` by `K_0 + … + K_{c-1}`, so a single weight
//! vector covers every vocabulary at once.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::{read_header_line, Grid2D, IntegralImage};

/// Lower clamp bound for detector confidences.
pub const DEFAULT_MIN_CONF: f64 = -4.0;
/// Upper clamp bound for detector confidences.
pub const DEFAULT_MAX_CONF: f64 = -0.6;
/// Number of confidence bins, and default codebook size.
pub const DEFAULT_BINS: usize = 256;
/// Dimension of the built-in gradient-orientation descriptor.
pub const DESCRIPTOR_DIM: usize = 128;

/// Per-pixel discretized feature indices with per-channel vocabulary sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureIndexMap {
    width: usize,
    height: usize,
    vocab_sizes: Vec<usize>,
    /// Pixel-major, channel-interleaved local indices.
    indices: Vec<u32>,
}

impl FeatureIndexMap {
    pub fn new(width: usize, height: usize, vocab_sizes: Vec<usize>, indices: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("feature map must be nonempty"));
        }
        if vocab_sizes.is_empty() || vocab_sizes.contains(&0) {
            return Err(Error::invalid("every channel needs a vocabulary of size >= 1"));
        }
        let channels = vocab_sizes.len();
        if indices.len() != width * height * channels {
            return Err(Error::mismatch(width * height * channels, indices.len()));
        }
        for (i, &v) in indices.iter().enumerate() {
            let k = vocab_sizes[i % channels];
            if v as usize >= k {
                return Err(Error::invalid(format!(
                    "index {v} at pixel {} channel {} exceeds vocabulary size {k}",
                    i / channels,
                    i % channels
                )));
            }
        }
        Ok(FeatureIndexMap {
            width,
            height,
            vocab_sizes,
            indices,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn total_vocab(&self) -> usize {
        self.vocab_sizes.iter().sum()
    }

    /// Stacking offsets: `offsets()[c] = Σ_{c'<c} K_{c'}`.
    pub fn offsets(&self) -> Vec<usize> {
        self.vocab_sizes
            .iter()
            .scan(0, |acc, &k| {
                let o = *acc;
                *acc += k;
                Some(o)
            })
            .collect()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> u32 {
        self.indices[(y * self.width + x) * self.channels() + c]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Global feature indices of every pixel, pixel-major, channel-interleaved.
    pub fn global_indices(&self) -> Vec<u32> {
        let offsets = self.offsets();
        let ch = self.channels();
        self.indices
            .iter()
            .enumerate()
            .map(|(i, &v)| v + offsets[i % ch] as u32)
            .collect()
    }

    /// Splits a stacked map back into single-channel maps.
    pub fn unstack(&self) -> Vec<FeatureIndexMap> {
        let ch = self.channels();
        (0..ch)
            .map(|c| FeatureIndexMap {
                width: self.width,
                height: self.height,
                vocab_sizes: vec![self.vocab_sizes[c]],
                indices: self.indices.iter().skip(c).step_by(ch).copied().collect(),
            })
            .collect()
    }

    /// Writes the `CFEAT 1 <w> <h> <channels> <K_0> … \n` header and `u32` LE indices.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "CFEAT 1 {} {} {}", self.width, self.height, self.channels())?;
        for k in &self.vocab_sizes {
            write!(w, " {k}")?;
        }
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.indices.len() * 4);
        for v in &self.indices {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header = read_header_line(&mut r)?;
        let fields: Vec<&str> = header.split_ascii_whitespace().collect();
        if fields.len() < 5 || fields[0] != "CFEAT" {
            return Err(Error::Parse(format!("not a CFEAT header: {header:?}")));
        }
        if fields[1] != "1" {
            return Err(Error::Parse(format!("unsupported CFEAT version {}", fields[1])));
        }
        let nums: Vec<usize> = fields[2..]
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}"))))
            .collect::<Result<_>>()?;
        let (w, h, ch) = (nums[0], nums[1], nums[2]);
        if nums.len() != 3 + ch {
            return Err(Error::Parse(format!("expected {ch} vocabulary sizes")));
        }
        let n = w * h * ch;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Parse(format!("truncated CFEAT payload, expected {n} indices")))?;
        let indices = bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        FeatureIndexMap::new(w, h, nums[3..].to_vec(), indices)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        FeatureIndexMap::read_from(BufReader::new(File::open(path)?))
    }
}

/// Maps one confidence value to its bin.
pub fn confidence_bin(c: f64, min_conf: f64, max_conf: f64, bins: usize) -> u32 {
    let t = (c.clamp(min_conf, max_conf) - min_conf) / (max_conf - min_conf);
    // f64::round rounds half away from zero
    (t * (bins - 1) as f64).round() as u32
}

/// Clamps detector confidences to `[min_conf, max_conf]` and scales them to `bins` levels.
pub fn quantize_confidences(conf: &Grid2D, min_conf: f64, max_conf: f64, bins: usize) -> Result<FeatureIndexMap> {
    if conf.channels() != 1 {
        return Err(Error::mismatch("1 channel", format!("{} channels", conf.channels())));
    }
    if !(min_conf.is_finite() && max_conf.is_finite() && min_conf < max_conf) {
        return Err(Error::invalid(format!(
            "need min_conf < max_conf, got {min_conf} and {max_conf}"
        )));
    }
    if bins < 2 || bins > u32::MAX as usize {
        return Err(Error::invalid(format!("bins must be at least 2, got {bins}")));
    }
    let indices = conf
        .data()
        .iter()
        .map(|&c| confidence_bin(c as f64, min_conf, max_conf, bins))
        .collect();
    FeatureIndexMap::new(conf.width(), conf.height(), vec![bins], indices)
}

/// Per-pixel descriptors stored as a `DESCRIPTOR_DIM`-channel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMap(Grid2D);

impl DescriptorMap {
    pub fn from_grid(grid: Grid2D) -> Self {
        DescriptorMap(grid)
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

    pub fn dim(&self) -> usize {
        self.0.channels()
    }

    pub fn descriptor(&self, x: usize, y: usize) -> &[f32] {
        let d = self.dim();
        let start = (y * self.width() + x) * d;
        &self.0.data()[start..start + d]
    }
}

/// Dense gradient-orientation descriptors.
///
/// Every pixel gets a 4×4 grid of spatial cells over a `patch`×`patch` window
/// centered on it; each cell holds an 8-bin orientation histogram of gradient
/// magnitudes (orientation linearly interpolated between neighbouring bins).
/// The 128 values are L2-normalized, clipped at 0.2 and renormalized. Windows
/// overhanging the border are clipped to the image.
pub fn dense_descriptors(image: &Grid2D, patch: usize) -> Result<DescriptorMap> {
    if image.channels() != 1 {
        return Err(Error::mismatch("1 channel", format!("{} channels", image.channels())));
    }
    if patch == 0 || !patch.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "patch size must be a positive multiple of 4, got {patch}"
        )));
    }
    let (w, h) = (image.width(), image.height());
    if patch > w || patch > h {
        return Err(Error::invalid(format!("patch {patch} larger than image {w}x{h}")));
    }

    // orientation-binned gradient magnitude maps
    let mut planes = vec![Grid2D::zeros(w, h, 1); 8];
    let px = |x: isize, y: isize| -> f32 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        image.get(xc, yc, 0)
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (px(x + 1, y) - px(x - 1, y)) as f64;
            let gy = 0.5 * (px(x, y + 1) - px(x, y - 1)) as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let pos = theta / std::f64::consts::TAU * 8.0;
            let lo = (pos.floor() as usize) % 8;
            let frac = pos - pos.floor();
            let hi = (lo + 1) % 8;
            let (xu, yu) = (x as usize, y as usize);
            let a = planes[lo].get(xu, yu, 0) + (mag * (1.0 - frac)) as f32;
            planes[lo].set(xu, yu, 0, a);
            let b = planes[hi].get(xu, yu, 0) + (mag * frac) as f32;
            planes[hi].set(xu, yu, 0, b);
        }
    }
    let sats: Vec<IntegralImage> = planes.iter().map(IntegralImage::new).collect::<Result<_>>()?;

    let cell = patch / 4;
    let half = (patch / 2) as isize;
    let mut data = vec![0.0f32; w * h * DESCRIPTOR_DIM];
    data.par_chunks_mut(w * DESCRIPTOR_DIM)
        .enumerate()
        .for_each(|(y, row)| {
            let mut desc = [0.0f64; DESCRIPTOR_DIM];
            for x in 0..w {
                desc.iter_mut().for_each(|v| *v = 0.0);
                for cj in 0..4 {
                    let ya = y as isize - half + (cj * cell) as isize;
                    let yb = ya + cell as isize - 1;
                    let (ya, yb) = (ya.max(0), yb.min(h as isize - 1));
                    if ya > yb {
                        continue;
                    }
                    for ci in 0..4 {
                        let xa = x as isize - half + (ci * cell) as isize;
                        let xb = xa + cell as isize - 1;
                        let (xa, xb) = (xa.max(0), xb.min(w as isize - 1));
                        if xa > xb {
                            continue;
                        }
                        let b = crate::grids::BoxRegion {
                            x0: xa as usize,
                            y0: ya as usize,
                            x1: xb as usize,
                            y1: yb as usize,
                        };
                        for (o, sat) in sats.iter().enumerate() {
                            desc[(cj * 4 + ci) * 8 + o] = sat.box_sum_unchecked(&b).max(0.0);
                        }
                    }
                }
                normalize_descriptor(&mut desc);
                let out = &mut row[x * DESCRIPTOR_DIM..(x + 1) * DESCRIPTOR_DIM];
                for (o, v) in out.iter_mut().zip(desc.iter()) {
                    *o = *v as f32;
                }
            }
        });
    Ok(DescriptorMap(Grid2D::new(w, h, DESCRIPTOR_DIM, data)?))
}

fn normalize_descriptor(desc: &mut [f64]) {
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        desc.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    desc.iter_mut().for_each(|v| *v = (*v / norm).min(0.2));
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    desc.iter_mut().for_each(|v| *v /= norm);
}

/// Prototype vectors used to quantize descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    seed: u64,
    /// `k × dim`, row-major.
    prototypes: Vec<f32>,
    /// Lloyd iterations run; 0 for codebooks read from disk.
    pub iterations: usize,
    /// Final mean squared distance to the assigned prototype, if known.
    pub distortion: Option<f64>,
}

impl Codebook {
    pub fn from_prototypes(k: usize, dim: usize, seed: u64, prototypes: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs K >= 1 and D >= 1"));
        }
        if prototypes.len() != k * dim {
            return Err(Error::mismatch(k * dim, prototypes.len()));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite prototype value"));
        }
        Ok(Codebook {
            k,
            dim,
            seed,
            prototypes,
            iterations: 0,
            distortion: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prototype(&self, i: usize) -> &[f32] {
        &self.prototypes[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest prototype; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.k {
            let d = sq_dist(v, self.prototype(i));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Writes `CBOOK 1 <K> <D> <seed>\n` followed by K×D `f32` LE values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "CBOOK 1 {} {} {}", self.k, self.dim, self.seed)?;
        let mut buf = Vec::with_capacity(self.prototypes.len() * 4);
        for v in &self.prototypes {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header = read_header_line(&mut r)?;
        let f: Vec<&str> = header.split_ascii_whitespace().collect();
        if f.len() != 5 || f[0] != "CBOOK" {
            return Err(Error::Parse(format!("not a CBOOK header: {header:?}")));
        }
        if f[1] != "1" {
            return Err(Error::Parse(format!("unsupported CBOOK version {}", f[1])));
        }
        let parse = |s: &str| s.parse::<u64>().map_err(|_| Error::Parse(format!("bad number {s:?}")));
        let (k, dim, seed) = (parse(f[2])? as usize, parse(f[3])? as usize, parse(f[4])?);
        let mut bytes = vec![0u8; k * dim * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Parse("truncated CBOOK payload".into()))?;
        let protos = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Codebook::from_prototypes(k, dim, seed, protos)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Codebook::read_from(BufReader::new(File::open(path)?))
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

const KMEANS_MAX_ITER: usize = 50;
const KMEANS_REL_TOL: f64 = 1e-6;

/// k-means with k-means++ seeding over `samples` (row-major, `dim` per row).
///
/// Deterministic for a fixed seed. Empty clusters are re-seeded to the sample
/// farthest from its current prototype.
pub fn build_codebook(samples: &[f32], dim: usize, k: usize, seed: u64) -> Result<Codebook> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!(
            "sample buffer of {} values is not a multiple of D = {dim}",
            samples.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let n = samples.len() / dim;
    if n < k {
        return Err(Error::invalid(format!("{n} samples cannot support K = {k} prototypes")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample value"));
    }
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend(row(first).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_f64(row(i), &centers[0..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!("fewer than K = {k} distinct samples")));
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
        }
        let start = centers.len();
        centers.extend(row(pick).iter().map(|&v| v as f64));
        let c = centers[start..].to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(sq_dist_f64(row(i), &c));
        });
    }

    // Lloyd iterations
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut prev = f64::INFINITY;
    let mut distortion = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITER {
        iterations = it + 1;
        assign
            .par_iter_mut()
            .zip(dist.par_iter_mut())
            .enumerate()
            .for_each(|(i, (a, d))| {
                let (best, bd) = nearest_f64(row(i), &centers, dim);
                *a = best;
                *d = bd;
            });
        distortion = dist.iter().sum::<f64>() / n as f64;

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= 1");
                for j in 0..dim {
                    centers[c * dim + j] = row(far)[j] as f64;
                }
                dist[far] = 0.0;
            }
        }
        let converged = prev.is_finite() && (prev - distortion).abs() <= KMEANS_REL_TOL * prev.max(f64::MIN_POSITIVE);
        prev = distortion;
        if converged || distortion == 0.0 {
            break;
        }
    }

    let prototypes: Vec<f32> = centers.iter().map(|&v| v as f32).collect();
    for a in 0..k {
        for b in a + 1..k {
            if prototypes[a * dim..(a + 1) * dim] == prototypes[b * dim..(b + 1) * dim] {
                return Err(Error::Degenerate(format!("prototypes {a} and {b} coincide")));
            }
        }
    }
    let mut book = Codebook::from_prototypes(k, dim, seed, prototypes)?;
    book.iterations = iterations;
    book.distortion = Some(distortion);
    Ok(book)
}

fn sq_dist_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest_f64(v: &[f32], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist_f64(v, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Assigns every pixel the index of its nearest prototype.
pub fn quantize_descriptors(desc: &DescriptorMap, book: &Codebook) -> Result<FeatureIndexMap> {
    if desc.dim() != book.dim() {
        return Err(Error::mismatch(
            format!("descriptor dimension {}", book.dim()),
            format!("descriptor dimension {}", desc.dim()),
        ));
    }
    let d = desc.dim();
    let indices: Vec<u32> = desc
        .grid()
        .data()
        .par_chunks(d)
        .map(|v| book.nearest(v) as u32)
        .collect();
    FeatureIndexMap::new(desc.width(), desc.height(), vec![book.k()], indices)
}

/// Concatenates channels of equally sized maps; vocabularies are offset in order.
pub fn stack_feature_maps(maps: &[FeatureIndexMap]) -> Result<FeatureIndexMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
    let (w, h) = (first.width, first.height);
    for m in maps {
        if m.width != w || m.height != h {
            return Err(Error::mismatch(format!("{w}x{h}"), format!("{}x{}", m.width, m.height)));
        }
    }
    let vocab: Vec<usize> = maps.iter().flat_map(|m| m.vocab_sizes.iter().copied()).collect();
    let total_ch = vocab.len();
    let mut indices = Vec::with_capacity(w * h * total_ch);
    for p in 0..w * h {
        for m in maps {
            let ch = m.channels();
            indices.extend_from_slice(&m.indices[p * ch..(p + 1) * ch]);
        }
    }
    FeatureIndexMap::new(w, h, vocab, indices)
}

/// Collects every `stride`-th pixel descriptor, skipping all-zero ones.
pub fn sample_descriptors(maps: &[DescriptorMap], stride: usize) -> Vec<f32> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for m in maps {
        let d = m.dim();
        for (i, v) in m.grid().data().chunks_exact(d).enumerate() {
            if i % stride == 0 && v.iter().any(|&x| x != 0.0) {
                out.extend_from_slice(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn conf_grid(values: &[f32]) -> Grid2D {
        Grid2D::new(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn confidence_quantization_examples() {
        let q = quantize_confidences(
            &conf_grid(&[-4.0, -5.2, -2.3, -0.6, 3.0]),
            DEFAULT_MIN_CONF,
            DEFAULT_MAX_CONF,
            DEFAULT_BINS,
        )
        .unwrap();
        assert_eq!(q.indices(), &[0, 0, 128, 255, 255]);
        assert_eq!(q.vocab_sizes(), &[256]);
        // exact half: (0.5)·(3−1) = 1.0 is not a tie; (0.5)·(4−1) = 1.5 is → 2
        assert_eq!(confidence_bin(0.5, 0.0, 1.0, 4), 2);
    }

    #[test]
    fn confidence_quantization_rejects_bad_arguments() {
        let g = conf_grid(&[0.0]);
        assert!(quantize_confidences(&g, 1.0, 0.0, 256).is_err());
        assert!(quantize_confidences(&g, 0.0, 1.0, 1).is_err());
        assert!(quantize_confidences(&Grid2D::zeros(1, 1, 2), 0.0, 1.0, 4).is_err());
    }

    #[test]
    fn constant_image_has_zero_descriptors() {
        let img = Grid2D::from_fn(20, 20, |_, _| 0.4);
        let d = dense_descriptors(&img, 8).unwrap();
        assert_eq!(d.dim(), 128);
        assert!(d.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_edge_fills_horizontal_gradient_bins() {
        let img = Grid2D::from_fn(24, 24, |x, _| if x < 12 { 0.0 } else { 1.0 });
        // finite-difference oracle: the gradient at the edge is purely along +x
        let gx = 0.5 * (img.get(12, 5, 0) - img.get(10, 5, 0));
        let gy = 0.5 * (img.get(11, 6, 0) - img.get(11, 4, 0));
        assert!(gx > 0.0 && gy == 0.0);
        let d = dense_descriptors(&img, 16).unwrap();
        let v = d.descriptor(12, 12);
        let total: f32 = v.iter().map(|a| a * a).sum();
        let horizontal: f32 = v
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 8 == 0)
            .map(|(_, a)| a * a)
            .sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(horizontal / total > 0.999, "fraction {}", horizontal / total);
        assert!(v.iter().all(|&a| a <= 1.0 + 1e-6));
    }

    #[test]
    fn descriptors_are_bounded_and_clipped() {
        let img = Grid2D::from_fn(32, 24, |x, y| (((x * 7 + y * 13) % 11) as f32) / 10.0);
        let d = dense_descriptors(&img, 8).unwrap();
        for y in 0..d.height() {
            for x in 0..d.width() {
                let v = d.descriptor(x, y);
                let n: f32 = v.iter().map(|a| a * a).sum::<f32>().sqrt();
                assert!(n <= 1.0 + 1e-6);
            }
        }
        assert!(dense_descriptors(&img, 6).is_err());
        assert!(dense_descriptors(&img, 28).is_err());
    }

    #[test]
    fn codebook_with_one_prototype_is_the_mean() {
        let samples = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let book = build_codebook(&samples, 2, 1, 7).unwrap();
        assert!((book.prototype(0)[0] - 3.0).abs() < 1e-6);
        assert!((book.prototype(0)[1] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn codebook_recovers_separated_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        let mut sums = [[0.0f64; 3]; 2];
        for i in 0..200 {
            let c = i % 2;
            let base = if c == 0 { 0.0 } else { 100.0 };
            for j in 0..3 {
                let v = base + rng.gen_range(-1.0f32..1.0);
                sums[c][j] += v as f64;
                samples.push(v);
            }
        }
        let book = build_codebook(&samples, 3, 2, 11).unwrap();
        let means: Vec<[f64; 3]> = sums.iter().map(|s| s.map(|v| v / 100.0)).collect();
        for p in 0..2 {
            let proto = book.prototype(p);
            let m = if proto[0] < 50.0 { means[0] } else { means[1] };
            for j in 0..3 {
                assert!((proto[j] as f64 - m[j]).abs() < 1e-5 * m[j].abs().max(1.0));
            }
        }
        assert_ne!(book.prototype(0)[0] < 50.0, book.prototype(1)[0] < 50.0);
    }

    #[test]
    fn codebook_is_deterministic_and_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<f32> = (0..400).map(|_| rng.gen()).collect();
        let a = build_codebook(&samples, 4, 8, 99).unwrap();
        let b = build_codebook(&samples, 4, 8, 99).unwrap();
        assert_eq!(a, b);
        assert!(build_codebook(&samples[..8], 4, 3, 0).is_err());
        assert!(build_codebook(&[1.0, 1.0, 1.0, 1.0], 2, 2, 0).is_err());
    }

    #[test]
    fn quantize_descriptor_ties_and_exact_hits() {
        let dim = 2;
        let mut protos = vec![0.0f32; 10 * dim];
        for i in 0..10 {
            protos[i * dim] = 10.0 + i as f32;
            protos[i * dim + 1] = -(i as f32);
        }
        // prototypes 3 and 9 symmetric about (0.5, 0.25)
        protos[3 * dim..4 * dim].copy_from_slice(&[1.0, 0.5]);
        protos[9 * dim..10 * dim].copy_from_slice(&[0.0, 0.0]);
        let book = Codebook::from_prototypes(10, dim, 0, protos.clone()).unwrap();
        let grid = Grid2D::new(2, 1, 2, vec![0.5, 0.25, protos[14], protos[15]]).unwrap();
        let q = quantize_descriptors(&DescriptorMap::from_grid(grid), &book).unwrap();
        assert_eq!(q.indices(), &[3, 7]);

        let single = Codebook::from_prototypes(1, 2, 0, vec![5.0, 5.0]).unwrap();
        let grid = Grid2D::new(2, 1, 2, vec![0.5, 0.25, -3.0, 1.0]).unwrap();
        let q = quantize_descriptors(&DescriptorMap::from_grid(grid), &single).unwrap();
        assert_eq!(q.indices(), &[0, 0]);

        let wrong_dim = Codebook::from_prototypes(1, 3, 0, vec![0.0; 3]).unwrap();
        let grid = Grid2D::zeros(1, 1, 2);
        assert!(quantize_descriptors(&DescriptorMap::from_grid(grid), &wrong_dim).is_err());
    }

    #[test]
    fn stacking_offsets() {
        let a = FeatureIndexMap::new(2, 1, vec![2], vec![0, 1]).unwrap();
        let b = FeatureIndexMap::new(2, 1, vec![3], vec![2, 0]).unwrap();
        let c = FeatureIndexMap::new(2, 1, vec![4], vec![3, 1]).unwrap();
        let s = stack_feature_maps(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(s.offsets(), vec![0, 2, 5]);
        assert_eq!(s.total_vocab(), 9);
        assert_eq!(s.global_indices(), vec![0, 4, 8, 1, 2, 6]);
        assert_eq!(stack_feature_maps(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(s.unstack(), vec![a.clone(), b, c]);
        let other = FeatureIndexMap::new(1, 2, vec![2], vec![0, 1]).unwrap();
        assert!(stack_feature_maps(&[a, other]).is_err());
    }

    #[test]
    fn detector_plus_descriptor_offsets() {
        let det = FeatureIndexMap::new(1, 1, vec![256], vec![17]).unwrap();
        let sift = FeatureIndexMap::new(1, 1, vec![256], vec![42]).unwrap();
        let s = stack_feature_maps(&[det, sift]).unwrap();
        assert_eq!(s.total_vocab(), 512);
        assert_eq!(s.global_indices(), vec![17, 256 + 42]);
    }

    #[test]
    fn feature_map_file_round_trip() {
        let m = FeatureIndexMap::new(2, 2, vec![3, 5], vec![0, 4, 2, 1, 1, 0, 2, 3]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(FeatureIndexMap::read_from(&buf[..]).unwrap(), m);
        assert!(FeatureIndexMap::read_from(&buf[..buf.len() - 2]).is_err());
        let book = Codebook::from_prototypes(2, 2, 5, vec![0.5, 1.5, -2.0, 3.25]).unwrap();
        let mut buf = Vec::new();
        book.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"CBOOK 1 2 2 5\n"));
        assert_eq!(Codebook::read_from(&buf[..]).unwrap(), book);
    }

    proptest! {
        #[test]
        fn confidence_quantization_is_monotone(a in -10.0f64..5.0, b in -10.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(confidence_bin(lo, -4.0, -0.6, 256) <= confidence_bin(hi, -4.0, -0.6, 256));
        }

        #[test]
        fn quantization_picks_globally_nearest_prototype(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, dim) = (rng.gen_range(1..9), rng.gen_range(1..5));
            let protos: Vec<f32> = (0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let book = Codebook::from_prototypes(k, dim, 0, protos).unwrap();
            let (w, h) = (4, 3);
            let data: Vec<f32> = (0..w * h * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let desc = DescriptorMap::from_grid(Grid2D::new(w, h, dim, data).unwrap());
            let q = quantize_descriptors(&desc, &book).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let v = desc.descriptor(x, y);
                    // exhaustive oracle
                    let dists: Vec<f64> = (0..k).map(|i| sq_dist(v, book.prototype(i))).collect();
                    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                    let want = dists.iter().position(|&d| d == min).unwrap();
                    prop_assert_eq!(q.index(x, y, 0) as usize, want);
                }
            }
        }
    }
}
