//! Ground-truth densities from point annotations, density estimation from
//! discretized features, and counting by integration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureIndexMap;
use crate::grids::{BoxRegion, Grid2D, IntegralImage};

/// Default ground-truth kernel width in pixels.
pub const DEFAULT_GT_SIGMA: f64 = 8.0;

/// Person positions in one frame, in continuous pixel coordinates.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AnnotationSet {
    pub frame: u64,
    pub points: Vec<(f64, f64)>,
}

impl AnnotationSet {
    pub fn new(frame: u64, points: Vec<(f64, f64)>) -> Self {
        AnnotationSet { frame, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
                return Err(Error::OutOfBounds(format!(
                    "annotation ({x}, {y}) in frame {} outside {width}x{height} image",
                    self.frame
                )));
            }
        }
        Ok(())
    }
}

/// Parses a `frame,x,y` CSV into one set per frame, ordered by frame id.
pub fn parse_annotations_csv(text: &str) -> Result<Vec<AnnotationSet>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty annotation file".into()))?;
    if header.trim() != "frame,x,y" {
        return Err(Error::Parse(format!("expected header `frame,x,y`, found {header:?}")));
    }
    let mut frames: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!("line {}: expected 3 columns", n + 2)));
        }
        let bad = |s: &str| Error::Parse(format!("line {}: bad number {s:?}", n + 2));
        let frame: u64 = cols[0].parse().map_err(|_| bad(cols[0]))?;
        let x: f64 = cols[1].parse().map_err(|_| bad(cols[1]))?;
        let y: f64 = cols[2].parse().map_err(|_| bad(cols[2]))?;
        frames.entry(frame).or_default().push((x, y));
    }
    Ok(frames
        .into_iter()
        .map(|(frame, points)| AnnotationSet { frame, points })
        .collect())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationSet>> {
    parse_annotations_csv(&fs::read_to_string(path)?)
}

/// Writes annotation sets as `frame,x,y` CSV (LF endings).
pub fn write_annotations<W: Write>(mut w: W, sets: &[AnnotationSet]) -> Result<()> {
    w.write_all(b"frame,x,y\n")?;
    for s in sets {
        for &(x, y) in &s.points {
            writeln!(w, "{},{},{}", s.frame, x, y)?;
        }
    }
    Ok(())
}

/// Single-channel map of persons per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap(Grid2D);

impl DensityMap {
    pub fn from_grid(grid: Grid2D) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::mismatch("1 channel", format!("{} channels", grid.channels())));
        }
        Ok(DensityMap(grid))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DensityMap(Grid2D::zeros(width, height, 1))
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
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.0.get(x, y, 0)
    }
}

/// Converts `f64` masses to `f32` while carrying each rounding residual into
/// the next value, so the `f32` total matches the `f64` total to within one
/// rounding step. Negative carries never produce negative outputs.
pub(crate) fn to_f32_preserving_sum(values: &[f64]) -> Vec<f32> {
    let mut carry = 0.0f64;
    let mut out: Vec<f32> = values
        .iter()
        .map(|&v| {
            let target = v + carry;
            let out = target.max(0.0) as f32;
            carry = target - out as f64;
            out
        })
        .collect();
    // The leftover residual is up to half an ulp of the last value; folding it
    // into the smallest value that can absorb it shrinks the error to half an
    // ulp of that value.
    if carry != 0.0 {
        let slot = out
            .iter()
            .enumerate()
            .filter(|(_, &v)| v as f64 + carry >= 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k);
        if let Some(k) = slot {
            out[k] = (out[k] as f64 + carry) as f32;
        }
    }
    out
}

/// Sum of unit-mass Gaussian kernels, one per annotation.
///
/// Each kernel is evaluated at pixel centers, truncated to a disk of radius
/// 3σ, clipped to the image, and renormalized over the pixels it touches, so
/// the map integrates to exactly the number of annotations.
pub fn rasterize_ground_truth(ann: &AnnotationSet, sigma: f64, width: usize, height: usize) -> Result<DensityMap> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("image must be nonempty"));
    }
    ann.check_bounds(width, height)?;
    let mut acc = vec![0.0f64; width * height];
    let radius = 3.0 * sigma;
    let r2max = radius * radius;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut weights: Vec<(usize, f64)> = Vec::new();
    for &(px, py) in &ann.points {
        weights.clear();
        let xa = ((px - radius - 0.5).floor().max(0.0)) as usize;
        let xb = ((px + radius - 0.5).ceil().max(0.0) as usize).min(width - 1);
        let ya = ((py - radius - 0.5).floor().max(0.0)) as usize;
        let yb = ((py + radius - 0.5).ceil().max(0.0) as usize).min(height - 1);
        let mut total = 0.0;
        for y in ya..=yb {
            let dy = y as f64 + 0.5 - py;
            for x in xa..=xb {
                let dx = x as f64 + 0.5 - px;
                let r2 = dx * dx + dy * dy;
                if r2 <= r2max {
                    let g = (-r2 * inv2s2).exp();
                    total += g;
                    weights.push((y * width + x, g));
                }
            }
        }
        if total > 0.0 {
            for &(i, g) in &weights {
                acc[i] += g / total;
            }
        } else {
            // kernel narrower than the pixel grid: all mass in the containing pixel
            let (x, y) = ((px as usize).min(width - 1), (py as usize).min(height - 1));
            acc[y * width + x] += 1.0;
        }
    }
    let data = to_f32_preserving_sum(&acc);
    Ok(DensityMap(Grid2D::new(width, height, 1, data)?))
}

/// Per-pixel density as the sum of the weights of the pixel's active features.
pub fn estimate_density(feat: &FeatureIndexMap, weights: &[f64]) -> Result<DensityMap> {
    let values = estimate_density_f64(feat, weights)?;
    let data = values.iter().map(|&v| v as f32).collect();
    Ok(DensityMap(Grid2D::new(feat.width(), feat.height(), 1, data)?))
}

pub(crate) fn estimate_density_f64(feat: &FeatureIndexMap, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != feat.total_vocab() {
        return Err(Error::mismatch(
            format!("{} weights", feat.total_vocab()),
            format!("{} weights", weights.len()),
        ));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("non-finite weight"));
    }
    let offsets = feat.offsets();
    let ch = feat.channels();
    Ok(feat
        .indices()
        .chunks_exact(ch)
        .map(|px| {
            px.iter()
                .zip(&offsets)
                .map(|(&i, &o)| weights[o + i as usize])
                .sum::<f64>()
        })
        .collect())
}

/// Estimated number of persons in the whole map.
pub fn count_total(d: &DensityMap) -> f64 {
    d.0.sum()
}

/// Estimated number of persons inside `b`.
pub fn count_region(d: &DensityMap, b: &BoxRegion) -> Result<f64> {
    IntegralImage::new(&d.0)?.box_sum(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_annotations_give_zero_map() {
        let d = rasterize_ground_truth(&AnnotationSet::default(), 8.0, 10, 10).unwrap();
        assert_eq!(count_total(&d), 0.0);
    }

    #[test]
    fn single_annotation_has_unit_mass_for_any_sigma() {
        for sigma in [0.01, 0.5, 1.0, 8.0, 40.0] {
            let ann = AnnotationSet::new(0, vec![(3.3, 1.2)]);
            let d = rasterize_ground_truth(&ann, sigma, 16, 12).unwrap();
            assert!((count_total(&d) - 1.0).abs() < 1e-9, "sigma {sigma}");
        }
    }

    #[test]
    fn mean_training_crowd_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(263);
        let pts = (0..263)
            .map(|_| (rng.gen_range(0.0..360.0), rng.gen_range(0.0..270.0)))
            .collect();
        let d = rasterize_ground_truth(&AnnotationSet::new(1, pts), DEFAULT_GT_SIGMA, 360, 270).unwrap();
        assert!((count_total(&d) - 263.0).abs() < 263.0 * 1e-9);
    }

    #[test]
    fn rasterize_validates() {
        let ann = AnnotationSet::new(0, vec![(10.0, 1.0)]);
        assert!(matches!(
            rasterize_ground_truth(&ann, 2.0, 10, 10),
            Err(Error::OutOfBounds(_))
        ));
        assert!(rasterize_ground_truth(&AnnotationSet::default(), 0.0, 10, 10).is_err());
    }

    #[test]
    fn kernel_support_is_truncated() {
        let ann = AnnotationSet::new(0, vec![(5.5, 5.5)]);
        let d = rasterize_ground_truth(&ann, 1.0, 20, 20).unwrap();
        // pixel centers farther than 3 px from (5.5, 5.5) carry nothing
        let right = BoxRegion::new(9, 0, 19, 19).unwrap();
        assert_eq!(count_region(&d, &right).unwrap(), 0.0);
    }

    #[test]
    fn estimation_examples() {
        let feat = FeatureIndexMap::new(10, 10, vec![4], vec![2; 100]).unwrap();
        assert_eq!(count_total(&estimate_density(&feat, &[0.0; 4]).unwrap()), 0.0);
        assert_eq!(
            count_total(&estimate_density(&feat, &[0.0, 0.0, 0.5, 0.0]).unwrap()),
            50.0
        );

        let stacked = FeatureIndexMap::new(1, 1, vec![2, 3], vec![1, 0]).unwrap();
        let d = estimate_density(&stacked, &[0.0, 0.2, 0.3, 0.0, 0.0]).unwrap();
        assert!((d.at(0, 0) - 0.5).abs() < 1e-7);
        assert!(estimate_density(&stacked, &[0.0; 4]).is_err());
    }

    #[test]
    fn halves_add_up_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Grid2D::from_fn(13, 7, |_, _| rng.gen_range(0.0..2.0));
        let d = DensityMap::from_grid(g).unwrap();
        let left = count_region(&d, &BoxRegion::new(0, 0, 5, 6).unwrap()).unwrap();
        let right = count_region(&d, &BoxRegion::new(6, 0, 12, 6).unwrap()).unwrap();
        let total = count_total(&d);
        assert!((left + right - total).abs() <= 1e-9 * total);
        assert!((count_region(&d, &d.grid().whole_box()).unwrap() - total).abs() <= 1e-9 * total);
    }

    #[test]
    fn annotation_csv_round_trip() {
        let sets = vec![
            AnnotationSet::new(0, vec![(1.5, 2.25)]),
            AnnotationSet::new(3, vec![(0.1, 0.2), (7.0, 8.0)]),
        ];
        let mut buf = Vec::new();
        write_annotations(&mut buf, &sets).unwrap();
        let back = parse_annotations_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, sets);
        assert!(parse_annotations_csv("x,y\n1,2\n").is_err());
        assert!(parse_annotations_csv("frame,x,y\n1,abc,2\n").is_err());
    }

    #[test]
    fn mass_preserving_conversion_never_goes_negative() {
        let vals = [1e-9, 0.0, 0.0, 0.3, 1.0 / 3.0, 0.0];
        let out = to_f32_preserving_sum(&vals);
        assert!(out.iter().all(|&v| v >= 0.0));
        let s: f64 = out.iter().map(|&v| v as f64).sum();
        assert!((s - vals.iter().sum::<f64>()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gt_mass_is_conserved(seed in any::<u64>(), n in 0usize..40, sigma in 1.0f64..32.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.gen_range(8..80), rng.gen_range(8..80));
            let pts = (0..n).map(|_| (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64))).collect();
            let d = rasterize_ground_truth(&AnnotationSet::new(0, pts), sigma, w, h).unwrap();
            prop_assert!((count_total(&d) - n as f64).abs() <= 1e-9 * (n as f64).max(1.0));
            prop_assert!(d.grid().data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn estimation_is_linear_in_weights(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (6, 5);
            let idx = (0..w * h * 2).map(|i| if i % 2 == 0 { rng.gen_range(0..3) } else { rng.gen_range(0..4) }).collect();
            let feat = FeatureIndexMap::new(w, h, vec![3, 4], idx).unwrap();
            let w1: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
            let w2: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let d1 = estimate_density_f64(&feat, &w1).unwrap();
            let d2 = estimate_density_f64(&feat, &w2).unwrap();
            let dm = estimate_density_f64(&feat, &mix).unwrap();
            for i in 0..dm.len() {
                prop_assert!((dm[i] - (a * d1[i] + b * d2[i])).abs() < 1e-12);
            }
        }
    }
}
