//! `flow` and `render` subcommands.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::Args;

use crowd_core::flow::{
    flow_sequence, to_grayscale, windowed_averages, FlowField, FlowParams, DEFAULT_AVG_WINDOW, DEFAULT_GAP,
};
use crowd_core::georef::{WorldGrid, NODATA};
use crowd_core::grids::write_pgm;
use crowd_core::Grid2D;

use crate::{invalid, with_path, CliError, CliResult};

#[derive(Args, Debug)]
pub struct FlowArgs {
    /// Frames in temporal order (CGRID; multi-channel frames are averaged to gray)
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    /// Frame distance between the two images of each flow
    #[arg(long, default_value_t = DEFAULT_GAP)]
    gap: usize,
    /// Number of consecutive flows averaged per output
    #[arg(long, default_value_t = DEFAULT_AVG_WINDOW)]
    avg_window: usize,
    /// Data-term weight, for intensities on a 0-255 scale
    #[arg(long, default_value_t = 0.15)]
    lambda: f32,
    /// Coupling between the flow and its auxiliary field
    #[arg(long, default_value_t = 0.3)]
    theta: f32,
    /// Dual step, at most 0.25
    #[arg(long, default_value_t = 0.25)]
    tau: f32,
    /// Warps per pyramid level
    #[arg(long, default_value_t = 5)]
    warps: usize,
    /// Fixed-point iterations per warp
    #[arg(long, default_value_t = 50)]
    inner_iterations: usize,
    /// Pyramid downsampling factor
    #[arg(long, default_value_t = 0.5)]
    scale: f32,
    /// Smallest side of the coarsest pyramid level
    #[arg(long, default_value_t = 16)]
    min_level_size: usize,
    /// Directory for `flow_NNNN.cgrid`, `avg_NNNN.cgrid` and `flow_summary.csv`
    #[arg(long)]
    out_dir: PathBuf,
}

fn summary_row(kind: &str, t: usize, f: &FlowField) -> String {
    let (dx, dy) = f.mean_vector();
    format!("{kind},{t},{dx},{dy},{}\n", f.mean_magnitude())
}

pub fn flow(a: FlowArgs) -> CliResult {
    let p = FlowParams {
        lambda: a.lambda,
        theta: a.theta,
        tau: a.tau,
        warps: a.warps,
        inner_iterations: a.inner_iterations,
        scale: a.scale,
        min_level_size: a.min_level_size,
        gap: a.gap,
        avg_window: a.avg_window,
    };
    p.validate()?;
    let frames = a
        .frames
        .iter()
        .map(|path| with_path(Grid2D::load(path), path).map(|g| if g.channels() == 1 { g } else { to_grayscale(&g) }))
        .collect::<CliResult<Vec<_>>>()?;
    let flows = flow_sequence(&frames, &p)?;
    let averages = windowed_averages(&flows, a.avg_window)?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Io(format!("{}: cannot create directory: {e}", a.out_dir.display())))?;
    let mut table = String::from("kind,index,mean_dx,mean_dy,mean_magnitude\n");
    for (t, f) in flows.iter().enumerate() {
        let path = a.out_dir.join(format!("flow_{t:04}.cgrid"));
        with_path(f.grid().save(&path), &path)?;
        table.push_str(&summary_row("flow", t, f));
    }
    for (t, f) in averages.iter().enumerate() {
        let path = a.out_dir.join(format!("avg_{t:04}.cgrid"));
        with_path(f.grid().save(&path), &path)?;
        table.push_str(&summary_row("avg", t, f));
    }
    let path = a.out_dir.join("flow_summary.csv");
    fs::write(&path, table).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    println!("{} flows, {} averages", flows.len(), averages.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// CGRID raster or WGRID world grid
    #[arg(long)]
    input: PathBuf,
    /// Output PGM
    #[arg(long)]
    output: PathBuf,
    /// Channel to render
    #[arg(long, default_value_t = 0, conflicts_with = "magnitude")]
    channel: usize,
    /// Render the vector length of a 2-channel grid instead of one channel
    #[arg(long)]
    magnitude: bool,
}

/// Min–max scaling of finite, non-NODATA values to 0..=255; NODATA and
/// non-finite values become 0, as does everything when the range is empty.
pub fn heatmap(values: &[f32]) -> Vec<u8> {
    let valid = |v: f32| v.is_finite() && v != NODATA;
    let (lo, hi) = values
        .iter()
        .filter(|&&v| valid(v))
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi as f64 - lo as f64;
    values
        .iter()
        .map(|&v| {
            if !valid(v) || range <= 0.0 {
                0
            } else {
                ((v as f64 - lo as f64) / range * 255.0).round() as u8
            }
        })
        .collect()
}

fn magic(path: &Path) -> CliResult<[u8; 5]> {
    let mut buf = [0u8; 5];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(buf)
}

pub fn render(a: RenderArgs) -> CliResult {
    // world grids are stored south row first; render north up
    let (grid, north_up) = match &magic(&a.input)? {
        b"WGRID" => (with_path(WorldGrid::load(&a.input), &a.input)?.values, true),
        b"CGRID" => (with_path(Grid2D::load(&a.input), &a.input)?, false),
        _ => {
            return Err(invalid(format!(
                "{}: neither a CGRID nor a WGRID file",
                a.input.display()
            )))
        }
    };
    let (w, h, c) = (grid.width(), grid.height(), grid.channels());
    let plane: Vec<f32> = if a.magnitude {
        if c != 2 {
            return Err(invalid(format!("--magnitude needs a 2-channel grid, got {c} channels")));
        }
        grid.data()
            .chunks_exact(2)
            .map(|v| {
                if v[0] == NODATA || v[1] == NODATA {
                    NODATA
                } else {
                    v[0].hypot(v[1])
                }
            })
            .collect()
    } else {
        if a.channel >= c {
            return Err(invalid(format!(
                "--channel {} out of range for {c} channels",
                a.channel
            )));
        }
        grid.data().iter().skip(a.channel).step_by(c).copied().collect()
    };
    let mut pixels = heatmap(&plane);
    if north_up {
        pixels = pixels.chunks_exact(w).rev().flatten().copied().collect();
    }
    let file = fs::File::create(&a.output).map_err(|e| CliError::Io(format!("{}: {e}", a.output.display())))?;
    let mut out = BufWriter::new(file);
    with_path(write_pgm(&mut out, w, h, &pixels), &a.output)?;
    out.flush()?;
    Ok(())
}
