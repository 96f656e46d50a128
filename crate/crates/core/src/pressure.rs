//! Human pressure `P = ρ · Var(V)`: local velocity variance times areal
//! density.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::georef::{VelocityField, WorldGrid, NODATA};
use crate::grids::Grid2D;

pub const DEFAULT_RADIUS_M: f64 = 1.0;
/// Velocity fields per variance window.
pub const DEFAULT_T_WINDOW: usize = 5;

/// Per-cell `Var(v_east) + Var(v_north)` over every valid sample whose cell
/// center lies within `radius_m` of the cell center, pooled across all
/// fields. Population variance; fewer than two samples give 0.
pub fn velocity_variance(fields: &[VelocityField], radius_m: f64) -> Result<WorldGrid> {
    let first = fields
        .first()
        .ok_or_else(|| Error::invalid("no velocity fields in the window"))?;
    if !(radius_m >= 0.0 && radius_m.is_finite()) {
        return Err(Error::invalid("radius must be non-negative"));
    }
    for f in fields {
        first.grid().check_same_grid(f.grid())?;
    }
    let spec = *first.spec();
    let r = (radius_m / spec.cell_size * (1.0 + 1e-12)).floor() as isize;
    let r2 = (radius_m / spec.cell_size).powi(2) * (1.0 + 1e-12);
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dj| (-r..=r).map(move |di| (di, dj)))
        .filter(|&(di, dj)| ((di * di + dj * dj) as f64) <= r2)
        .collect();

    let (w, h) = (spec.width, spec.height);
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(j, row)| {
        for (i, o) in row.iter_mut().enumerate() {
            let (mut n, mut se, mut sn) = (0usize, 0.0f64, 0.0f64);
            let mut samples = Vec::new();
            for f in fields {
                for &(di, dj) in &offsets {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii < 0 || jj < 0 || ii >= w as isize || jj >= h as isize {
                        continue;
                    }
                    if let Some((e, no)) = f.at(ii as usize, jj as usize) {
                        samples.push((e as f64, no as f64));
                        se += e as f64;
                        sn += no as f64;
                        n += 1;
                    }
                }
            }
            if n < 2 {
                continue;
            }
            let (me, mn) = (se / n as f64, sn / n as f64);
            let var = samples
                .iter()
                .map(|(e, no)| (e - me).powi(2) + (no - mn).powi(2))
                .sum::<f64>()
                / n as f64;
            *o = var as f32;
        }
    });
    WorldGrid::new(spec, Grid2D::new(w, h, 1, out)?)
}

/// Converts per-cell person counts to persons per square meter.
pub fn areal_density(counts: &WorldGrid) -> Result<WorldGrid> {
    let area = (counts.spec.cell_size * counts.spec.cell_size) as f32;
    let data = counts
        .values
        .data()
        .iter()
        .map(|&v| if v == NODATA { NODATA } else { v / area })
        .collect();
    WorldGrid::new(
        counts.spec,
        Grid2D::new(counts.spec.width, counts.spec.height, counts.values.channels(), data)?,
    )
}

/// Elementwise `ρ · Var`; NODATA wherever either input is NODATA.
pub fn pressure_map(density: &WorldGrid, variance: &WorldGrid) -> Result<WorldGrid> {
    density.check_same_grid(variance)?;
    if density.values.channels() != 1 || variance.values.channels() != 1 {
        return Err(Error::invalid("pressure inputs must be single-channel"));
    }
    let data = density
        .values
        .data()
        .iter()
        .zip(variance.values.data())
        .map(|(&d, &v)| if d == NODATA || v == NODATA { NODATA } else { d * v })
        .collect();
    WorldGrid::new(
        density.spec,
        Grid2D::new(density.spec.width, density.spec.height, 1, data)?,
    )
}

/// Largest non-NODATA value and its cell `(i, j)`; ties go to the first cell
/// in row order.
pub fn max_cell(wg: &WorldGrid) -> Option<(usize, usize, f32)> {
    let w = wg.spec.width;
    let mut best: Option<(usize, usize, f32)> = None;
    for (k, &v) in wg.values.data().iter().enumerate() {
        if v != NODATA && best.is_none_or(|b| v > b.2) {
            best = Some((k % w, k / w, v));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::georef::{WorldGridSpec, DEFAULT_EPSG};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(w: usize, h: usize, cs: f64) -> WorldGridSpec {
        WorldGridSpec {
            origin_e: 0.0,
            origin_n: 0.0,
            cell_size: cs,
            width: w,
            height: h,
            epsg: DEFAULT_EPSG,
        }
    }

    fn vfield(s: WorldGridSpec, f: impl Fn(usize, usize) -> Option<(f32, f32)>) -> VelocityField {
        let mut g = Grid2D::zeros(s.width, s.height, 2);
        for j in 0..s.height {
            for i in 0..s.width {
                let (e, n) = f(i, j).unwrap_or((NODATA, NODATA));
                g.set(i, j, 0, e);
                g.set(i, j, 1, n);
            }
        }
        VelocityField::from_world_grid(WorldGrid::new(s, g).unwrap()).unwrap()
    }

    fn scalar(s: WorldGridSpec, v: f32) -> WorldGrid {
        WorldGrid::new(s, Grid2D::from_fn(s.width, s.height, |_, _| v)).unwrap()
    }

    #[test]
    fn uniform_field_has_zero_variance() {
        let s = spec(6, 5, 0.25);
        let f = vfield(s, |_, _| Some((1.3, -0.4)));
        let v = velocity_variance(&[f.clone(), f], 1.0).unwrap();
        assert!(v.values.data().iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn opposite_samples_give_unit_variance() {
        let s = spec(1, 1, 1.0);
        let a = vfield(s, |_, _| Some((1.0, 0.0)));
        let b = vfield(s, |_, _| Some((-1.0, 0.0)));
        let v = velocity_variance(&[a.clone(), b], 0.0).unwrap();
        assert_eq!(v.get(0, 0, 0), 1.0);
        let single = velocity_variance(&[a], 0.0).unwrap();
        assert_eq!(single.get(0, 0, 0), 0.0);
    }

    #[test]
    fn disk_neighbourhood_and_nodata() {
        let s = spec(3, 3, 1.0);
        // only the center and its right neighbour carry data
        let f = vfield(s, |i, j| match (i, j) {
            (1, 1) => Some((0.0, 2.0)),
            (2, 1) => Some((0.0, 0.0)),
            _ => None,
        });
        let v = velocity_variance(&[f], 1.0).unwrap();
        assert_eq!(v.get(1, 1, 0), 1.0);
        assert_eq!(v.get(2, 2, 0), 0.0, "one sample within reach");
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(2, 0, 0), 0.0, "diagonal neighbour lies outside a unit disk");
    }

    #[test]
    fn pressure_examples() {
        let s = spec(4, 3, 0.5);
        assert!(pressure_map(&scalar(s, 2.0), &scalar(s, 0.0))
            .unwrap()
            .values
            .data()
            .iter()
            .all(|&p| p == 0.0));
        let p = pressure_map(&scalar(s, 2.0), &scalar(s, 3.0)).unwrap();
        assert!(p.values.data().iter().all(|&x| x == 6.0));
        let mut d = scalar(s, 2.0);
        d.values.set(1, 1, 0, NODATA);
        let p = pressure_map(&d, &scalar(s, 3.0)).unwrap();
        assert_eq!(p.get(1, 1, 0), NODATA);
        assert!(pressure_map(&scalar(s, 1.0), &scalar(spec(4, 3, 0.25), 1.0)).is_err());
        assert_eq!(max_cell(&p), Some((0, 0, 6.0)));
    }

    #[test]
    fn areal_density_divides_by_cell_area() {
        let d = areal_density(&scalar(spec(2, 2, 0.5), 1.0)).unwrap();
        assert!(d.values.data().iter().all(|&x| x == 4.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn variance_is_translation_and_rotation_invariant(seed in any::<u64>(), radius in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = spec(rng.gen_range(1..7), rng.gen_range(1..7), 0.5);
            let vals: Vec<Vec<Option<(f32, f32)>>> = (0..3)
                .map(|_| (0..s.width * s.height).map(|_| rng.gen_bool(0.8).then(|| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))).collect())
                .collect();
            let (ce, cn) = (rng.gen_range(-3.0f32..3.0), rng.gen_range(-3.0f32..3.0));
            let ang = rng.gen_range(0.0f32..std::f32::consts::TAU);
            let make = |t: &dyn Fn((f32, f32)) -> (f32, f32)| -> Vec<VelocityField> {
                vals.iter().map(|v| vfield(s, |i, j| v[j * s.width + i].map(t))).collect()
            };
            let base = velocity_variance(&make(&|p| p), radius).unwrap();
            let shifted = velocity_variance(&make(&|(e, n)| (e + ce, n + cn)), radius).unwrap();
            let rotated = velocity_variance(&make(&|(e, n)| (e * ang.cos() - n * ang.sin(), e * ang.sin() + n * ang.cos())), radius).unwrap();
            for k in 0..base.values.data().len() {
                let b = base.values.data()[k];
                prop_assert!(b >= 0.0);
                prop_assert!((shifted.values.data()[k] - b).abs() <= 1e-4 * (1.0 + b));
                prop_assert!((rotated.values.data()[k] - b).abs() <= 1e-4 * (1.0 + b));
            }

            let rho = WorldGrid::new(s, Grid2D::from_fn(s.width, s.height, |_, _| rng.gen_range(0.0..5.0))).unwrap();
            let alpha = rng.gen_range(0.0f32..4.0);
            let scaled = WorldGrid::new(s, Grid2D::from_fn(s.width, s.height, |i, j| alpha * rho.get(i, j, 0))).unwrap();
            let p = pressure_map(&rho, &base).unwrap();
            let ps = pressure_map(&scaled, &base).unwrap();
            for (a, b) in p.values.data().iter().zip(ps.values.data()) {
                prop_assert!(*a >= 0.0);
                prop_assert!((b - alpha * a).abs() <= 1e-5 * (1.0 + alpha * a));
            }
        }
    }
}
