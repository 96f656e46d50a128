//! `georef` and `pressure` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::Serialize;

use crowd_core::density::DensityMap;
use crowd_core::flow::{FlowField, DEFAULT_GAP};
use crowd_core::georef::{
    export_world_grid, rectify_density, rectify_motion, ExportFormat, Mapping, VelocityField, WorldGrid, WorldGridSpec,
    DEFAULT_CELL_SIZE, DEFAULT_EPSG, DEFAULT_SIGMA_W,
};
use crowd_core::pressure::{
    areal_density, max_cell, pressure_map, velocity_variance, DEFAULT_RADIUS_M, DEFAULT_T_WINDOW,
};
use crowd_core::Grid2D;

use crate::{invalid, with_path, CliError, CliResult};

#[derive(Args, Debug)]
pub struct GeorefArgs {
    #[command(subcommand)]
    kind: GeorefKind,
}

#[derive(Subcommand, Debug)]
enum GeorefKind {
    /// Person density per image pixel to persons per world cell
    Density(DensityArgs),
    /// Image flow to metric velocity (east, north) in m/s per world cell
    Motion(MotionArgs),
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Pixel-to-world mapping file (HOMOG or POSE)
    #[arg(long)]
    mapping: PathBuf,
    /// World cell side in meters
    #[arg(long, default_value_t = DEFAULT_CELL_SIZE)]
    cell_size: f64,
    /// EPSG code of the world coordinates
    #[arg(long, default_value_t = DEFAULT_EPSG)]
    epsg: u32,
    /// Empty cells added around the image footprint
    #[arg(long, default_value_t = 2)]
    margin: usize,
    /// Reuse the placement of an existing world grid instead of fitting one to the footprint
    #[arg(long)]
    grid_like: Option<PathBuf>,
    /// Output world grid (WGRID)
    #[arg(long)]
    output: PathBuf,
    /// Also export as ESRI ASCII grid (with a .prj sidecar)
    #[arg(long)]
    esri: Option<PathBuf>,
    /// Also export cell centers as GeoJSON points
    #[arg(long)]
    geojson: Option<PathBuf>,
    /// Diagnostics (JSON)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DensityArgs {
    /// Density CGRID (persons per pixel)
    #[arg(long)]
    input: PathBuf,
    /// Gaussian σ, in cells, of the world-space smoothing
    #[arg(long, default_value_t = DEFAULT_SIGMA_W)]
    sigma_w: f64,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug)]
struct MotionArgs {
    /// Flow CGRID (2 channels, pixels over the frame gap)
    #[arg(long)]
    flow: PathBuf,
    /// Mapping of the later frame, when the camera moved [default: --mapping]
    #[arg(long)]
    mapping_to: Option<PathBuf>,
    /// Frames per second of the source video
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Frame distance the flow spans
    #[arg(long, default_value_t = DEFAULT_GAP)]
    gap: usize,
    #[command(flatten)]
    grid: GridArgs,
}

fn load_mapping(path: &Path) -> CliResult<Mapping> {
    with_path(Mapping::load(path), path)
}

fn grid_spec(g: &GridArgs, mapping: &Mapping, width: usize, height: usize) -> CliResult<WorldGridSpec> {
    match &g.grid_like {
        Some(p) => Ok(with_path(WorldGrid::load(p), p)?.spec),
        None => Ok(WorldGridSpec::covering(
            mapping,
            width,
            height,
            g.cell_size,
            g.margin,
            g.epsg,
        )?),
    }
}

fn write_outputs(g: &GridArgs, wg: &WorldGrid, report: &impl Serialize) -> CliResult {
    with_path(wg.save(&g.output), &g.output)?;
    if let Some(p) = &g.esri {
        with_path(export_world_grid(wg, p, ExportFormat::EsriAscii), p)?;
    }
    if let Some(p) = &g.geojson {
        with_path(export_world_grid(wg, p, ExportFormat::GeoJsonPoints), p)?;
    }
    if let Some(p) = &g.report {
        write_json(p, report)?;
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| invalid(format!("cannot serialize JSON: {e}")))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct GridJson {
    origin_e: f64,
    origin_n: f64,
    cell_size: f64,
    width: usize,
    height: usize,
    epsg: u32,
}

impl From<&WorldGridSpec> for GridJson {
    fn from(s: &WorldGridSpec) -> Self {
        GridJson {
            origin_e: s.origin_e,
            origin_n: s.origin_n,
            cell_size: s.cell_size,
            width: s.width,
            height: s.height,
            epsg: s.epsg,
        }
    }
}

#[derive(Serialize)]
struct DensityReport {
    grid: GridJson,
    image_sum: f64,
    world_sum: f64,
    in_grid_mass: f64,
    out_of_grid_mass: f64,
    out_of_grid_pixels: usize,
}

#[derive(Serialize)]
struct MotionReport {
    grid: GridJson,
    dt: f64,
    mean_speed: f64,
    skipped_pixels: usize,
    outside_pixels: usize,
}

pub fn georef(a: GeorefArgs) -> CliResult {
    match a.kind {
        GeorefKind::Density(d) => {
            let density = with_path(Grid2D::load(&d.input).and_then(DensityMap::from_grid), &d.input)?;
            let mapping = load_mapping(&d.grid.mapping)?;
            let spec = grid_spec(&d.grid, &mapping, density.width(), density.height())?;
            let r = rectify_density(&density, &mapping, &spec, d.sigma_w)?;
            let report = DensityReport {
                grid: (&spec).into(),
                image_sum: density.grid().sum(),
                world_sum: r.grid.sum(),
                in_grid_mass: r.in_grid_mass,
                out_of_grid_mass: r.out_of_grid_mass,
                out_of_grid_pixels: r.out_of_grid_pixels,
            };
            if r.out_of_grid_pixels > 0 {
                eprintln!(
                    "warning: {} pixels ({} persons) fall outside the world grid",
                    r.out_of_grid_pixels, r.out_of_grid_mass
                );
            }
            write_outputs(&d.grid, &r.grid, &report)?;
            println!("{}x{} cells, {} persons", spec.width, spec.height, report.world_sum);
            Ok(())
        }
        GeorefKind::Motion(m) => {
            if !(m.fps > 0.0 && m.fps.is_finite()) || m.gap == 0 {
                return Err(invalid("--fps and --gap must be positive"));
            }
            let flow = with_path(Grid2D::load(&m.flow).and_then(FlowField::from_grid), &m.flow)?;
            let map_t = load_mapping(&m.grid.mapping)?;
            let map_t2 = match &m.mapping_to {
                Some(p) => load_mapping(p)?,
                None => map_t,
            };
            let spec = grid_spec(&m.grid, &map_t, flow.width(), flow.height())?;
            let dt = m.gap as f64 / m.fps;
            let r = rectify_motion(&flow, &map_t, &map_t2, dt, &spec)?;
            let report = MotionReport {
                grid: (&spec).into(),
                dt,
                mean_speed: r.velocity.mean_speed(),
                skipped_pixels: r.skipped_pixels,
                outside_pixels: r.outside_pixels,
            };
            write_outputs(&m.grid, r.velocity.grid(), &report)?;
            println!(
                "{}x{} cells, mean speed {} m/s",
                spec.width, spec.height, report.mean_speed
            );
            Ok(())
        }
    }
}

#[derive(Args, Debug)]
pub struct PressureArgs {
    /// Person counts per cell (WGRID): one for all windows or one per window
    #[arg(long, num_args = 1.., required = true)]
    density: Vec<PathBuf>,
    /// Velocity grids (WGRID) in temporal order
    #[arg(long, num_args = 1.., required = true)]
    velocity: Vec<PathBuf>,
    /// Neighbourhood radius of the velocity variance, meters
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    radius_m: f64,
    /// Velocity grids pooled per variance window
    #[arg(long, default_value_t = DEFAULT_T_WINDOW)]
    t_window: usize,
    /// Directory for `pressure_NNNN.wgrid` and `pressure.csv`
    #[arg(long)]
    out_dir: PathBuf,
    /// Also export each map as ESRI ASCII grid
    #[arg(long)]
    esri: bool,
}

pub fn pressure(a: PressureArgs) -> CliResult {
    if a.t_window == 0 {
        return Err(invalid("--t-window must be at least 1"));
    }
    if a.velocity.len() < a.t_window {
        return Err(invalid(format!(
            "{} velocity grids are fewer than --t-window {}",
            a.velocity.len(),
            a.t_window
        )));
    }
    let windows = a.velocity.len() - a.t_window + 1;
    if a.density.len() != 1 && a.density.len() != windows {
        return Err(invalid(format!(
            "give 1 or {windows} density grids, got {}",
            a.density.len()
        )));
    }
    let velocities = a
        .velocity
        .iter()
        .map(|p| with_path(WorldGrid::load(p).and_then(VelocityField::from_world_grid), p))
        .collect::<CliResult<Vec<_>>>()?;
    let densities = a
        .density
        .iter()
        .map(|p| with_path(WorldGrid::load(p).and_then(|g| areal_density(&g)), p))
        .collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Io(format!("{}: cannot create directory: {e}", a.out_dir.display())))?;
    let mut table = String::from("frame,max_p,cell_i,cell_j,easting,northing\n");
    for t in 0..windows {
        let var = velocity_variance(&velocities[t..t + a.t_window], a.radius_m)?;
        let rho = &densities[if densities.len() == 1 { 0 } else { t }];
        let p = pressure_map(rho, &var)?;
        let path = a.out_dir.join(format!("pressure_{t:04}.wgrid"));
        with_path(p.save(&path), &path)?;
        if a.esri {
            let path = a.out_dir.join(format!("pressure_{t:04}.asc"));
            with_path(export_world_grid(&p, &path, ExportFormat::EsriAscii), &path)?;
        }
        match max_cell(&p) {
            Some((i, j, v)) => {
                let (e, n) = p.spec.cell_center(i, j);
                table.push_str(&format!("{t},{v},{i},{j},{e},{n}\n"));
            }
            None => table.push_str(&format!("{t},,,,,\n")),
        }
    }
    let path = a.out_dir.join("pressure.csv");
    fs::write(&path, table).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    println!("{windows} pressure maps");
    Ok(())
}
