//! Geo-referencing: pixel ↔ world mappings, mass-conserving rectification of
//! density maps, metric velocities from image flow, and raster export.
//!
//! Pixel coordinates are continuous with pixel `(x, y)` covering
//! `[x, x+1) × [y, y+1)`; its center is `(x + 0.5, y + 0.5)`. World
//! coordinates are planar metric `(easting, northing)`.
//!
//! A [`WorldGrid`] stores cell `(i, j)` covering easting
//! `[E0 + i·cs, E0 + (i+1)·cs)` and northing `[N0 + j·cs, N0 + (j+1)·cs)`:
//! the origin is the lower-left (south-west) corner and rows grow northward.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde_json::json;

use crate::density::{to_f32_preserving_sum, DensityMap};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::grids::{read_header_line, Grid2D};

pub const DEFAULT_CELL_SIZE: f64 = 0.25;
pub const DEFAULT_SIGMA_W: f64 = 2.0;
/// WGS84 / UTM zone 33N.
pub const DEFAULT_EPSG: u32 = 32633;
/// Marker for cells without data.
pub const NODATA: f32 = -9999.0;

/// Projective map from homogeneous pixel coordinates to `(easting, northing)`.
///
/// Internally the map is split into a world offset and a local projective
/// part, so inverting it stays well conditioned for UTM-sized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    offset: (f64, f64),
    local: Matrix3<f64>,
    local_inv: Matrix3<f64>,
}

impl Homography {
    /// Normalizes so `h33 = 1` and rejects singular matrices.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography has non-finite entries"));
        }
        let h33 = m[(2, 2)];
        if h33.abs() < 1e-12 * m.abs().max().max(1e-300) {
            return Err(Error::Degenerate("homography has h33 = 0".into()));
        }
        let m = m / h33;
        // world position of pixel (0, 0); subtracting it leaves a local map
        let offset = (m[(0, 2)], m[(1, 2)]);
        let mut local = m;
        for c in 0..3 {
            local[(0, c)] -= offset.0 * m[(2, c)];
            local[(1, c)] -= offset.1 * m[(2, c)];
        }
        let det = local.determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::Degenerate(format!("homography is singular (det {det:e})")));
        }
        let inv = local
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is singular".into()))?;
        Ok(Homography {
            m,
            offset,
            local,
            local_inv: inv,
        })
    }

    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::mismatch("9 values", v.len()));
        }
        Homography::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Homography::new(Matrix3::identity()).expect("identity is regular")
    }

    /// Row-major matrix with `h33 = 1`.
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn apply(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        let (e, n) = project(&self.local, u, v).ok_or(Error::NoIntersection { u, v })?;
        Ok((e + self.offset.0, n + self.offset.1))
    }

    pub fn apply_inverse(&self, e: f64, n: f64) -> Result<(f64, f64)> {
        project(&self.local_inv, e - self.offset.0, n - self.offset.1)
            .ok_or_else(|| Error::Degenerate(format!("world point ({e}, {n}) maps to infinity")))
    }
}

fn project(m: &Matrix3<f64>, u: f64, v: f64) -> Option<(f64, f64)> {
    let p = m * Vector3::new(u, v, 1.0);
    // relative to the terms summed into z, so large world offsets cannot
    // swamp the test
    let scale = (m[(2, 0)] * u).abs() + (m[(2, 1)] * v).abs() + m[(2, 2)].abs();
    if p.z.abs() <= 1e-12 * scale {
        return None;
    }
    Some((p.x / p.z, p.y / p.z))
}

/// Result of a homography fit.
#[derive(Clone, Debug)]
pub struct HomographyFit {
    pub homography: Homography,
    /// Root-mean-square world-space distance between mapped pixels and their
    /// targets.
    pub rms_residual: f64,
}

/// Similarity that moves the centroid to the origin and sets the mean
/// distance from it to √2.
fn normalizing_transform(pts: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_d = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_d > 0.0 && mean_d.is_finite()) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_d;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let scale = ((b.0 - a.0).hypot(b.1 - a.1) * (c.0 - a.0).hypot(c.1 - a.1)).max(1e-300);
    cross.abs() <= 1e-9 * scale
}

/// Normalized direct linear transform from pixel↔world correspondences.
pub fn fit_homography(pixels: &[(f64, f64)], world: &[(f64, f64)]) -> Result<HomographyFit> {
    if pixels.len() != world.len() {
        return Err(Error::mismatch(pixels.len(), world.len()));
    }
    let n = pixels.len();
    if n < 4 {
        return Err(Error::invalid(format!("a homography needs at least 4 pairs, got {n}")));
    }
    if pixels
        .iter()
        .chain(world)
        .any(|p| !(p.0.is_finite() && p.1.is_finite()))
    {
        return Err(Error::invalid("correspondences must be finite"));
    }
    if n == 4 {
        for (i, j, k) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
            if collinear(pixels[i], pixels[j], pixels[k]) || collinear(world[i], world[j], world[k]) {
                return Err(Error::Degenerate("three of the four points are collinear".into()));
            }
        }
    }
    let tp = normalizing_transform(pixels)?;
    let tw = normalizing_transform(world)?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in pixels.iter().zip(world).enumerate() {
        let p = tp * Vector3::new(p.0, p.1, 1.0);
        let q = tw * Vector3::new(q.0, q.1, 1.0);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    // a second (near) null direction means the solution is not unique
    if sv[order[1]] <= 1e-10 * sv[order[sv.len() - 1]] {
        return Err(Error::Degenerate(
            "correspondences do not determine a unique homography".into(),
        ));
    }
    let h = vt.row(order[0]);
    let hn = Matrix3::from_row_slice(&h.iter().copied().collect::<Vec<_>>());
    let tw_inv = tw.try_inverse().expect("similarity is invertible");
    let homography = Homography::new(tw_inv * hn * tp)?;

    let mut ss = 0.0;
    for (p, q) in pixels.iter().zip(world) {
        let (e, nn) = homography
            .apply(p.0, p.1)
            .map_err(|_| Error::Degenerate("fitted homography sends a control point to infinity".into()))?;
        ss += (e - q.0).powi(2) + (nn - q.1).powi(2);
    }
    Ok(HomographyFit {
        homography,
        rms_residual: (ss / n as f64).sqrt(),
    })
}

/// Central projection with known exterior and interior orientation.
///
/// The camera looks along its local −z axis with +x to the image right and
/// +y to the image top; `rotation()` = Rx(ω)·Ry(φ)·Rz(κ) takes camera-frame
/// directions to world `(east, north, up)`. All angles zero is a nadir view
/// with image up pointing north.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub center: [f64; 3],
    /// `(ω, φ, κ)` in radians.
    pub angles: [f64; 3],
    pub focal: f64,
    pub principal: [f64; 2],
    pub terrain_height: f64,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .center
            .iter()
            .chain(&self.angles)
            .chain(&self.principal)
            .chain([&self.focal, &self.terrain_height]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera pose has non-finite values"));
        }
        if self.focal <= 0.0 {
            return Err(Error::invalid("focal length must be positive"));
        }
        if self.center[2] <= self.terrain_height {
            return Err(Error::invalid("camera must lie above the terrain plane"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [o, p, k] = self.angles;
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, o.cos(), -o.sin(), 0.0, o.sin(), o.cos());
        let ry = Matrix3::new(p.cos(), 0.0, p.sin(), 0.0, 1.0, 0.0, -p.sin(), 0.0, p.cos());
        let rz = Matrix3::new(k.cos(), -k.sin(), 0.0, k.sin(), k.cos(), 0.0, 0.0, 0.0, 1.0);
        rx * ry * rz
    }

    /// Intersects the viewing ray through `(u, v)` with the terrain plane.
    pub fn pixel_to_world(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        let dc = Vector3::new(u - self.principal[0], -(v - self.principal[1]), -self.focal);
        let d = self.rotation() * dc;
        if d.z >= -1e-9 * d.norm() {
            return Err(Error::NoIntersection { u, v });
        }
        let t = (self.terrain_height - self.center[2]) / d.z;
        Ok((self.center[0] + t * d.x, self.center[1] + t * d.y))
    }

    pub fn world_to_pixel(&self, e: f64, n: f64) -> Result<(f64, f64)> {
        let rel = Vector3::new(
            e - self.center[0],
            n - self.center[1],
            self.terrain_height - self.center[2],
        );
        let dc = self.rotation().transpose() * rel;
        if dc.z >= -1e-12 * rel.norm() {
            return Err(Error::Degenerate(format!(
                "world point ({e}, {n}) lies behind the camera"
            )));
        }
        let s = self.focal / -dc.z;
        Ok((self.principal[0] + s * dc.x, self.principal[1] - s * dc.y))
    }
}

/// Either geo-referencing model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mapping {
    Homography(Homography),
    Pose(CameraPose),
}

impl Mapping {
    pub fn pixel_to_world(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        match self {
            Mapping::Homography(h) => h.apply(u, v),
            Mapping::Pose(p) => p.pixel_to_world(u, v),
        }
    }

    pub fn world_to_pixel(&self, e: f64, n: f64) -> Result<(f64, f64)> {
        match self {
            Mapping::Homography(h) => h.apply_inverse(e, n),
            Mapping::Pose(p) => p.world_to_pixel(e, n),
        }
    }

    /// Text form: `HOMOG 1` + 9 row-major values, or `POSE 1` + center (3),
    /// angles ω φ κ (3), focal, principal point (2), terrain height.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        match self {
            Mapping::Homography(h) => {
                writeln!(w, "HOMOG 1")?;
                for r in 0..3 {
                    let m = h.matrix();
                    writeln!(w, "{:?} {:?} {:?}", m[(r, 0)], m[(r, 1)], m[(r, 2)])?;
                }
            }
            Mapping::Pose(p) => {
                writeln!(w, "POSE 1")?;
                writeln!(w, "{:?} {:?} {:?}", p.center[0], p.center[1], p.center[2])?;
                writeln!(w, "{:?} {:?} {:?}", p.angles[0], p.angles[1], p.angles[2])?;
                writeln!(w, "{:?} {:?} {:?}", p.focal, p.principal[0], p.principal[1])?;
                writeln!(w, "{:?}", p.terrain_height)?;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let kind = tokens.next().ok_or_else(|| Error::Parse("empty mapping file".into()))?;
        let version = tokens.next();
        if version != Some("1") {
            return Err(Error::Parse(format!(
                "unsupported mapping version {:?}, expected 1",
                version.unwrap_or("")
            )));
        }
        let values: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number '{t}' in mapping file")))
            })
            .collect::<Result<_>>()?;
        match kind {
            "HOMOG" => {
                if values.len() != 9 {
                    return Err(Error::Parse(format!("HOMOG needs 9 values, found {}", values.len())));
                }
                Ok(Mapping::Homography(Homography::from_row_slice(&values)?))
            }
            "POSE" => {
                if values.len() != 10 {
                    return Err(Error::Parse(format!("POSE needs 10 values, found {}", values.len())));
                }
                let p = CameraPose {
                    center: [values[0], values[1], values[2]],
                    angles: [values[3], values[4], values[5]],
                    focal: values[6],
                    principal: [values[7], values[8]],
                    terrain_height: values[9],
                };
                p.validate()?;
                Ok(Mapping::Pose(p))
            }
            other => Err(Error::Parse(format!(
                "unknown mapping kind '{other}', expected HOMOG or POSE"
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Mapping::parse(&std::fs::read_to_string(path)?)
    }
}

/// Placement of a world raster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldGridSpec {
    /// Easting of the lower-left corner.
    pub origin_e: f64,
    /// Northing of the lower-left corner.
    pub origin_n: f64,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub epsg: u32,
}

impl WorldGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::invalid("cell size must be positive"));
        }
        if !(self.origin_e.is_finite() && self.origin_n.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("world grid must have at least one cell"));
        }
        Ok(())
    }

    /// Cell containing a world point, if any.
    #[inline]
    pub fn cell_of(&self, e: f64, n: f64) -> Option<(usize, usize)> {
        let i = ((e - self.origin_e) / self.cell_size).floor();
        let j = ((n - self.origin_n) / self.cell_size).floor();
        if i >= 0.0 && j >= 0.0 && i < self.width as f64 && j < self.height as f64 {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_e + (i as f64 + 0.5) * self.cell_size,
            self.origin_n + (j as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn same_placement(&self, other: &WorldGridSpec) -> bool {
        self == other
    }

    /// Smallest grid aligned to multiples of `cell_size` that holds the
    /// projected image border plus `margin` cells on every side.
    pub fn covering(
        mapping: &Mapping,
        width: usize,
        height: usize,
        cell_size: f64,
        margin: usize,
        epsg: u32,
    ) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid("cell size must be positive"));
        }
        let (w, h) = (width as f64, height as f64);
        let mut border = Vec::new();
        for x in 0..=width {
            border.push((x as f64, 0.0));
            border.push((x as f64, h));
        }
        for y in 0..=height {
            border.push((0.0, y as f64));
            border.push((w, y as f64));
        }
        let (mut e0, mut n0, mut e1, mut n1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (u, v) in border {
            let (e, n) = mapping.pixel_to_world(u, v)?;
            e0 = e0.min(e);
            n0 = n0.min(n);
            e1 = e1.max(e);
            n1 = n1.max(n);
        }
        let m = margin as f64;
        let origin_e = ((e0 / cell_size).floor() - m) * cell_size;
        let origin_n = ((n0 / cell_size).floor() - m) * cell_size;
        let cells_e = ((e1 - origin_e) / cell_size).ceil() + m + 1.0;
        let cells_n = ((n1 - origin_n) / cell_size).ceil() + m + 1.0;
        if cells_e * cells_n > 2.5e8 {
            return Err(Error::invalid("footprint is too large for the requested cell size"));
        }
        Ok(WorldGridSpec {
            origin_e,
            origin_n,
            cell_size,
            width: cells_e as usize,
            height: cells_n as usize,
            epsg,
        })
    }
}

/// Georeferenced raster, row `j` at northing `N0 + j·cs`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldGrid {
    pub spec: WorldGridSpec,
    pub values: Grid2D,
}

impl WorldGrid {
    pub fn new(spec: WorldGridSpec, values: Grid2D) -> Result<Self> {
        spec.validate()?;
        if values.width() != spec.width || values.height() != spec.height {
            return Err(Error::mismatch(
                format!("{}x{}", spec.width, spec.height),
                values.shape_string(),
            ));
        }
        Ok(WorldGrid { spec, values })
    }

    pub fn zeros(spec: WorldGridSpec, channels: usize) -> Result<Self> {
        spec.validate()?;
        Ok(WorldGrid {
            spec,
            values: Grid2D::zeros(spec.width, spec.height, channels),
        })
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f32 {
        self.values.get(i, j, c)
    }

    /// Sum of all non-NODATA values.
    pub fn sum(&self) -> f64 {
        self.values
            .data()
            .iter()
            .filter(|&&v| v != NODATA)
            .map(|&v| v as f64)
            .sum()
    }

    pub fn check_same_grid(&self, other: &WorldGrid) -> Result<()> {
        if !self.spec.same_placement(&other.spec) {
            return Err(Error::mismatch(format!("{:?}", self.spec), format!("{:?}", other.spec)));
        }
        Ok(())
    }

    /// Binary form: `WGRID 1 w h c E0 N0 cs epsg\n` then little-endian `f32`
    /// values in row order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.spec;
        writeln!(
            w,
            "WGRID 1 {} {} {} {:?} {:?} {:?} {}",
            s.width,
            s.height,
            self.values.channels(),
            s.origin_e,
            s.origin_n,
            s.cell_size,
            s.epsg
        )?;
        self.values
            .data()
            .iter()
            .try_for_each(|v| w.write_all(&v.to_le_bytes()))?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header = read_header_line(&mut r)?;
        let f: Vec<&str> = header.split_ascii_whitespace().collect();
        if f.first() != Some(&"WGRID") {
            return Err(Error::Parse("not a WGRID file".into()));
        }
        if f.get(1) != Some(&"1") {
            return Err(Error::Parse(format!(
                "unsupported WGRID version {:?}, expected 1",
                f.get(1)
            )));
        }
        if f.len() != 9 {
            return Err(Error::Parse("WGRID header needs 9 fields".into()));
        }
        let bad = |what: &str| Error::Parse(format!("bad {what} in WGRID header"));
        let width: usize = f[2].parse().map_err(|_| bad("width"))?;
        let height: usize = f[3].parse().map_err(|_| bad("height"))?;
        let channels: usize = f[4].parse().map_err(|_| bad("channels"))?;
        let spec = WorldGridSpec {
            width,
            height,
            origin_e: f[5].parse().map_err(|_| bad("origin"))?,
            origin_n: f[6].parse().map_err(|_| bad("origin"))?,
            cell_size: f[7].parse().map_err(|_| bad("cell size"))?,
            epsg: f[8].parse().map_err(|_| bad("EPSG code"))?,
        };
        spec.validate()?;
        if channels == 0 {
            return Err(bad("channels"));
        }
        let n = width * height * channels;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Parse(format!("WGRID payload truncated, expected {n} values")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        WorldGrid::new(spec, Grid2D::new(width, height, channels, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        WorldGrid::read_from(BufReader::new(File::open(path)?))
    }
}

/// Two-channel world grid of `(v_east, v_north)` in m/s; cells without
/// contributing pixels hold [`NODATA`].
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField(WorldGrid);

impl VelocityField {
    pub fn from_world_grid(g: WorldGrid) -> Result<Self> {
        if g.values.channels() != 2 {
            return Err(Error::mismatch(
                "2 channels",
                format!("{} channels", g.values.channels()),
            ));
        }
        Ok(VelocityField(g))
    }

    pub fn grid(&self) -> &WorldGrid {
        &self.0
    }

    pub fn into_grid(self) -> WorldGrid {
        self.0
    }

    pub fn spec(&self) -> &WorldGridSpec {
        &self.0.spec
    }

    /// Velocity of a cell, `None` for NODATA.
    pub fn at(&self, i: usize, j: usize) -> Option<(f32, f32)> {
        let e = self.0.get(i, j, 0);
        (e != NODATA).then(|| (e, self.0.get(i, j, 1)))
    }

    /// Mean speed over cells with data.
    pub fn mean_speed(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for j in 0..self.spec().height {
            for i in 0..self.spec().width {
                if let Some((e, no)) = self.at(i, j) {
                    s += (e as f64).hypot(no as f64);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// Rectified density with diagnostics.
#[derive(Clone, Debug)]
pub struct RectifiedDensity {
    /// Smoothed result.
    pub grid: WorldGrid,
    /// Summed hits before smoothing.
    pub splatted: WorldGrid,
    /// Mass that landed in the grid, i.e. the total of both grids.
    pub in_grid_mass: f64,
    /// Mass of pixels whose centers project outside the grid or not at all.
    pub out_of_grid_mass: f64,
    pub out_of_grid_pixels: usize,
}

/// Cell index hit by every pixel center, in row-major pixel order.
fn project_pixel_centers(mapping: &Mapping, width: usize, height: usize, spec: &WorldGridSpec) -> Vec<Option<usize>> {
    (0..width * height)
        .into_par_iter()
        .map(|k| {
            let (x, y) = (k % width, k / width);
            let (e, n) = mapping.pixel_to_world(x as f64 + 0.5, y as f64 + 0.5).ok()?;
            spec.cell_of(e, n).map(|(i, j)| j * spec.width + i)
        })
        .collect()
}

/// Separable Gaussian smoothing truncated at 3σ; mass leaving the grid is
/// dropped.
fn gaussian_smooth(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| {
            if (i as f64).abs() <= 3.0 * sigma {
                (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()
            } else {
                0.0
            }
        })
        .collect();
    let ks: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ks).collect();
    let (wi, hi) = (w as isize, h as isize);
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && xx < wi {
                    s += k * values[y * w + xx as usize];
                }
            }
            *out = s;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && yy < hi {
                    s += k * tmp[yy as usize * w + x];
                }
            }
            *o = s;
        }
    });
    out
}

/// Splats each pixel's density into the world cell under its projected
/// center, smooths with a Gaussian of `sigma_w` cells, and rescales so the
/// smoothed total equals the splatted total.
pub fn rectify_density(
    d: &DensityMap,
    mapping: &Mapping,
    spec: &WorldGridSpec,
    sigma_w: f64,
) -> Result<RectifiedDensity> {
    spec.validate()?;
    if !(sigma_w >= 0.0 && sigma_w.is_finite()) {
        return Err(Error::invalid("sigma_w must be non-negative"));
    }
    let (w, h) = (d.width(), d.height());
    let cells = project_pixel_centers(mapping, w, h, spec);
    let mut acc = vec![0.0f64; spec.width * spec.height];
    let mut out_mass = 0.0;
    let mut out_pixels = 0usize;
    for (k, cell) in cells.iter().enumerate() {
        let v = d.grid().data()[k] as f64;
        match cell {
            Some(c) => acc[*c] += v,
            None => {
                out_mass += v;
                out_pixels += 1;
            }
        }
    }
    if out_pixels == w * h {
        return Err(Error::invalid("no pixel projects into the world grid"));
    }
    let in_mass: f64 = acc.iter().sum();

    let smoothed = if sigma_w > 0.0 {
        let mut s = gaussian_smooth(&acc, spec.width, spec.height, sigma_w);
        let total: f64 = s.iter().sum();
        if total > 0.0 {
            let f = in_mass / total;
            s.iter_mut().for_each(|v| *v *= f);
        }
        s
    } else {
        acc.clone()
    };

    let to_grid = |v: &[f64]| -> Result<WorldGrid> {
        WorldGrid::new(
            *spec,
            Grid2D::new(spec.width, spec.height, 1, to_f32_preserving_sum(v))?,
        )
    };
    Ok(RectifiedDensity {
        grid: to_grid(&smoothed)?,
        splatted: to_grid(&acc)?,
        in_grid_mass: in_mass,
        out_of_grid_mass: out_mass,
        out_of_grid_pixels: out_pixels,
    })
}

/// Rectified velocities with diagnostics.
#[derive(Clone, Debug)]
pub struct RectifiedMotion {
    pub velocity: VelocityField,
    /// Pixels whose ray missed the terrain in either frame.
    pub skipped_pixels: usize,
    /// Pixels projecting outside the grid.
    pub outside_pixels: usize,
}

/// Metric velocity per world cell: each pixel `p` moves from
/// `map_t(p)` to `map_t2(p + flow(p))` within `dt` seconds; cells average
/// their contributing pixels.
pub fn rectify_motion(
    flow: &FlowField,
    map_t: &Mapping,
    map_t2: &Mapping,
    dt: f64,
    spec: &WorldGridSpec,
) -> Result<RectifiedMotion> {
    spec.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("time step must be positive"));
    }
    let (w, h) = (flow.width(), flow.height());
    // Err(true): no intersection, Err(false): outside the grid
    let per_pixel: Vec<std::result::Result<(usize, f64, f64), bool>> = (0..w * h)
        .into_par_iter()
        .map(|k| {
            let (x, y) = (k % w, k / w);
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = flow.at(x, y);
            let a = map_t.pixel_to_world(u, v).map_err(|_| true)?;
            let b = map_t2.pixel_to_world(u + dx as f64, v + dy as f64).map_err(|_| true)?;
            let (i, j) = spec.cell_of(a.0, a.1).ok_or(false)?;
            Ok((j * spec.width + i, (b.0 - a.0) / dt, (b.1 - a.1) / dt))
        })
        .collect();

    let n = spec.width * spec.height;
    let mut se = vec![0.0f64; n];
    let mut sn = vec![0.0f64; n];
    let mut cnt = vec![0usize; n];
    let (mut skipped, mut outside) = (0, 0);
    for r in per_pixel {
        match r {
            Ok((c, ve, vn)) => {
                se[c] += ve;
                sn[c] += vn;
                cnt[c] += 1;
            }
            Err(true) => skipped += 1,
            Err(false) => outside += 1,
        }
    }
    let mut data = vec![NODATA; 2 * n];
    for c in 0..n {
        if cnt[c] > 0 {
            data[2 * c] = (se[c] / cnt[c] as f64) as f32;
            data[2 * c + 1] = (sn[c] / cnt[c] as f64) as f32;
        }
    }
    let grid = WorldGrid::new(*spec, Grid2D::new(spec.width, spec.height, 2, data)?)?;
    Ok(RectifiedMotion {
        velocity: VelocityField(grid),
        skipped_pixels: skipped,
        outside_pixels: outside,
    })
}

/// Output formats for [`export_world_grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    EsriAscii,
    GeoJsonPoints,
}

/// Writes an ESRI ASCII grid (single channel) plus a `.prj` sidecar naming
/// the EPSG code, or a GeoJSON point per non-NODATA cell.
pub fn export_world_grid(wg: &WorldGrid, path: impl AsRef<Path>, format: ExportFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ExportFormat::EsriAscii => {
            let mut f = BufWriter::new(File::create(path)?);
            write_esri_ascii(wg, &mut f)?;
            f.flush()?;
            std::fs::write(path.with_extension("prj"), format!("EPSG:{}\n", wg.spec.epsg))?;
        }
        ExportFormat::GeoJsonPoints => {
            let mut f = BufWriter::new(File::create(path)?);
            serde_json::to_writer(&mut f, &geojson_points(wg)).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
    }
    Ok(())
}

/// ESRI ASCII text; rows are written north to south. Values use the
/// shortest representation that reads back to the same `f32`.
pub fn write_esri_ascii<W: Write>(wg: &WorldGrid, mut w: W) -> Result<()> {
    if wg.values.channels() != 1 {
        return Err(Error::invalid(format!(
            "ESRI ASCII holds one channel, grid has {}",
            wg.values.channels()
        )));
    }
    let s = &wg.spec;
    writeln!(w, "ncols {}", s.width)?;
    writeln!(w, "nrows {}", s.height)?;
    writeln!(w, "xllcorner {}", s.origin_e)?;
    writeln!(w, "yllcorner {}", s.origin_n)?;
    writeln!(w, "cellsize {}", s.cell_size)?;
    writeln!(w, "NODATA_value {NODATA}")?;
    for j in (0..s.height).rev() {
        let row: Vec<String> = (0..s.width).map(|i| wg.get(i, j, 0).to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Parses an ESRI ASCII grid written by [`write_esri_ascii`] (or any grid
/// using corner registration).
pub fn read_esri_ascii<R: BufRead>(r: R, epsg: u32) -> Result<WorldGrid> {
    let mut header = std::collections::HashMap::new();
    let mut values = Vec::new();
    for line in r.lines() {
        let line = line?;
        let mut t = line.split_whitespace().peekable();
        match t.peek() {
            None => continue,
            Some(first) if first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) => {
                let key = t.next().unwrap().to_ascii_lowercase();
                let val = t
                    .next()
                    .ok_or_else(|| Error::Parse(format!("missing value for '{key}'")))?;
                header.insert(key, val.to_string());
            }
            _ => {
                for tok in t {
                    values.push(
                        tok.parse::<f32>()
                            .map_err(|_| Error::Parse(format!("bad grid value '{tok}'")))?,
                    );
                }
            }
        }
    }
    let get = |k: &str| {
        header
            .get(k)
            .ok_or_else(|| Error::Parse(format!("ESRI header lacks '{k}'")))
    };
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad '{k}' value"))) };
    let width: usize = get("ncols")?.parse().map_err(|_| Error::Parse("bad ncols".into()))?;
    let height: usize = get("nrows")?.parse().map_err(|_| Error::Parse("bad nrows".into()))?;
    let nodata = header
        .get("nodata_value")
        .map(|v| v.parse::<f32>())
        .transpose()
        .map_err(|_| Error::Parse("bad NODATA_value".into()))?;
    if values.len() != width * height {
        return Err(Error::Parse(format!(
            "expected {} grid values, found {}",
            width * height,
            values.len()
        )));
    }
    let spec = WorldGridSpec {
        origin_e: num("xllcorner")?,
        origin_n: num("yllcorner")?,
        cell_size: num("cellsize")?,
        width,
        height,
        epsg,
    };
    let mut data = vec![0.0f32; width * height];
    for (r, row) in values.chunks_exact(width).enumerate() {
        let j = height - 1 - r;
        for (i, &v) in row.iter().enumerate() {
            data[j * width + i] = if Some(v) == nodata { NODATA } else { v };
        }
    }
    WorldGrid::new(spec, Grid2D::new(width, height, 1, data)?)
}

/// Reads an ESRI ASCII grid, taking the EPSG code from a `.prj` sidecar of
/// the form `EPSG:<code>` when present.
pub fn import_esri_ascii(path: impl AsRef<Path>) -> Result<WorldGrid> {
    let path = path.as_ref();
    let epsg = match std::fs::read_to_string(path.with_extension("prj")) {
        Ok(s) => s
            .trim()
            .strip_prefix("EPSG:")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Parse("sidecar .prj must read EPSG:<code>".into()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => DEFAULT_EPSG,
        Err(e) => return Err(e.into()),
    };
    read_esri_ascii(BufReader::new(File::open(path)?), epsg)
}

fn geojson_points(wg: &WorldGrid) -> serde_json::Value {
    let s = &wg.spec;
    let c = wg.values.channels();
    let mut features = Vec::new();
    for j in 0..s.height {
        for i in 0..s.width {
            if wg.get(i, j, 0) == NODATA {
                continue;
            }
            let (e, n) = s.cell_center(i, j);
            let props = if c == 1 {
                json!({ "value": wg.get(i, j, 0) })
            } else {
                json!({ "values": (0..c).map(|k| wg.get(i, j, k)).collect::<Vec<_>>() })
            };
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [e, n] },
                "properties": props,
            }));
        }
    }
    json!({
        "type": "FeatureCollection",
        "crs": { "type": "name", "properties": { "name": format!("urn:ogc:def:crs:EPSG::{}", s.epsg) } },
        "features": features,
    })
}
