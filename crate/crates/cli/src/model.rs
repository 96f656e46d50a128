//! `learn`, `estimate` and `eval` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use crowd_core::analytics::{temporal_smoothness, write_count_report};
use crowd_core::density::{
    count_total, rasterize_ground_truth, read_annotations, AnnotationSet, DensityMap, DEFAULT_GT_SIGMA,
};
use crowd_core::learn::{
    learn_weights, LearnParams, RegKind, TrainingInstance, WeightVector, DEFAULT_EPS_CUT, DEFAULT_LAMBDA1,
    DEFAULT_LAMBDA_FIT, DEFAULT_MAX_OUTER,
};
use crowd_core::Grid2D;

use crate::prep::load_features;
use crate::{invalid, with_path, CliError, CliResult};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Reg {
    /// Sum of weights (sparse models)
    L1,
    /// Half the squared norm of the weights
    Tik,
}

#[derive(Args, Debug)]
pub struct LearnArgs {
    /// Training feature maps (CFEAT), one per frame
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    /// Point annotations `frame,x,y`; frames without rows have no persons
    #[arg(long, conflicts_with = "gt", required_unless_present = "gt")]
    annotations: Option<PathBuf>,
    /// Ground-truth density CGRIDs, one per feature map
    #[arg(long, num_args = 1..)]
    gt: Vec<PathBuf>,
    /// Annotation frame id of each feature map [default: 0, 1, 2, ...]
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    frame_ids: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Reg::L1)]
    reg: Reg,
    /// Weight of the summed MESA distances
    #[arg(long, default_value_t = DEFAULT_LAMBDA_FIT)]
    lambda_fit: f64,
    /// L1 regularization strength
    #[arg(long, default_value_t = DEFAULT_LAMBDA1)]
    lambda1: f64,
    /// Minimum violation, in persons, for a new box constraint
    #[arg(long, default_value_t = DEFAULT_EPS_CUT)]
    eps_cut: f64,
    /// Cap on constraint-generation rounds
    #[arg(long, default_value_t = DEFAULT_MAX_OUTER)]
    max_outer: usize,
    /// Gaussian σ, in pixels, of the ground-truth kernel per annotation
    #[arg(long, default_value_t = DEFAULT_GT_SIGMA)]
    sigma_gt: f64,
    /// Model file to write
    #[arg(long)]
    output: PathBuf,
    /// Training report (JSON)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct OuterJson {
    objective: f64,
    accepted: bool,
    inner_objective: f64,
    inner_gap: f64,
    inner_iterations: usize,
    constraints: usize,
    added: usize,
    max_violation: f64,
}

#[derive(Serialize)]
struct LearnReport {
    reg: &'static str,
    lambda_fit: f64,
    lambda1: f64,
    eps_cut: f64,
    max_outer: usize,
    frames: usize,
    converged: bool,
    final_objective: f64,
    final_max_violation: f64,
    nonzero_weights: usize,
    constraints: usize,
    train_counts: Vec<CountPair>,
    outer: Vec<OuterJson>,
}

#[derive(Serialize)]
struct CountPair {
    frame: u64,
    gt: f64,
    est: f64,
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn to_json(v: &impl Serialize) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| invalid(format!("cannot serialize JSON: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn frame_ids(given: &[u64], n: usize) -> CliResult<Vec<u64>> {
    if given.is_empty() {
        return Ok((0..n as u64).collect());
    }
    if given.len() != n {
        return Err(invalid(format!(
            "--frame-ids lists {} ids for {n} feature maps",
            given.len()
        )));
    }
    Ok(given.to_vec())
}

pub fn learn(a: LearnArgs) -> CliResult {
    if !(a.sigma_gt > 0.0 && a.sigma_gt.is_finite()) {
        return Err(invalid("--sigma-gt must be positive"));
    }
    let ids = frame_ids(&a.frame_ids, a.features.len())?;
    let feats = a
        .features
        .iter()
        .map(|p| load_features(p))
        .collect::<CliResult<Vec<_>>>()?;
    let gts: Vec<DensityMap> = if let Some(ann_path) = &a.annotations {
        let sets: BTreeMap<u64, AnnotationSet> = with_path(read_annotations(ann_path), ann_path)?
            .into_iter()
            .map(|s| (s.frame, s))
            .collect();
        ids.iter()
            .zip(&feats)
            .map(|(id, f)| {
                let set = sets
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| AnnotationSet::new(*id, Vec::new()));
                Ok(rasterize_ground_truth(&set, a.sigma_gt, f.width(), f.height())?)
            })
            .collect::<CliResult<_>>()?
    } else {
        if a.gt.len() != feats.len() {
            return Err(invalid(format!(
                "{} --gt files for {} feature maps",
                a.gt.len(),
                feats.len()
            )));
        }
        a.gt.iter()
            .map(|p| with_path(Grid2D::load(p).and_then(DensityMap::from_grid), p))
            .collect::<CliResult<_>>()?
    };
    let train = ids
        .iter()
        .zip(feats)
        .zip(gts)
        .zip(&a.features)
        .map(|(((id, f), g), p)| with_path(TrainingInstance::new(*id, f, g), p))
        .collect::<CliResult<Vec<_>>>()?;

    let mut params = LearnParams::new(match a.reg {
        Reg::L1 => RegKind::L1,
        Reg::Tik => RegKind::Tikhonov,
    });
    params.lambda_fit = a.lambda_fit;
    params.lambda1 = a.lambda1;
    params.eps_cut = a.eps_cut;
    params.max_outer = a.max_outer;
    let (model, diag) = learn_weights(&train, &params)?;
    with_path(model.save(&a.output), &a.output)?;

    if !diag.converged {
        eprintln!(
            "warning: constraint generation stopped after {} rounds with violations left",
            a.max_outer
        );
    }
    if let Some(report) = &a.report {
        let train_counts = train
            .iter()
            .map(|t| {
                Ok(CountPair {
                    frame: t.frame,
                    gt: count_total(&t.gt),
                    est: count_total(&model.apply(&t.features)?),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let r = LearnReport {
            reg: params.reg.tag(),
            lambda_fit: a.lambda_fit,
            lambda1: a.lambda1,
            eps_cut: a.eps_cut,
            max_outer: a.max_outer,
            frames: train.len(),
            converged: diag.converged,
            final_objective: diag.final_objective,
            final_max_violation: diag.final_max_violation,
            nonzero_weights: model.nonzero_count(),
            constraints: diag.constraints.len(),
            train_counts,
            outer: diag
                .outer
                .iter()
                .map(|o| OuterJson {
                    objective: o.objective,
                    accepted: o.accepted,
                    inner_objective: o.inner_objective,
                    inner_gap: o.inner_gap,
                    inner_iterations: o.inner_iterations,
                    constraints: o.constraints,
                    added: o.added,
                    max_violation: o.max_violation,
                })
                .collect(),
        };
        write_text(report, &to_json(&r)?)?;
    }
    println!(
        "trained {} weights ({} nonzero) on {} frames, objective {}",
        model.len(),
        model.nonzero_count(),
        train.len(),
        diag.final_objective
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature maps (CFEAT); frame ids follow their order
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    /// Directory for density CGRIDs, `<feature stem>_density.cgrid`
    #[arg(long)]
    out_dir: PathBuf,
    /// Count table `frame,file,count` [default: <out-dir>/counts.csv]
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Frame id of each feature map [default: 0, 1, 2, ...]
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    frame_ids: Vec<u64>,
}

pub fn estimate(a: EstimateArgs) -> CliResult {
    let model = with_path(WeightVector::load(&a.model), &a.model)?;
    let ids = frame_ids(&a.frame_ids, a.features.len())?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Io(format!("{}: cannot create directory: {e}", a.out_dir.display())))?;
    let mut table = String::from("frame,file,count\n");
    for (id, p) in ids.iter().zip(&a.features) {
        let feat = load_features(p)?;
        let density = with_path(model.apply(&feat), p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let name = format!("{stem}_density.cgrid");
        let out = a.out_dir.join(&name);
        with_path(density.grid().save(&out), &out)?;
        let count = count_total(&density);
        table.push_str(&format!("{id},{name},{count}\n"));
        println!("{id}\t{count}");
    }
    let counts = a.counts.unwrap_or_else(|| a.out_dir.join("counts.csv"));
    write_text(&counts, &table)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Estimated counts, CSV with `frame` and `count` columns
    #[arg(long)]
    estimates: PathBuf,
    /// Ground truth as point annotations; frames without rows count 0
    #[arg(long, conflicts_with = "gt_counts", required_unless_present = "gt_counts")]
    annotations: Option<PathBuf>,
    /// Ground truth as a CSV with `frame` and `count` columns
    #[arg(long)]
    gt_counts: Option<PathBuf>,
    /// Per-frame report `frame,gt_count,est_count,abs_err,pct_err`
    #[arg(long)]
    report: PathBuf,
    /// Summary JSON
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalSummary {
    frames: usize,
    mae: f64,
    mean_pct: f64,
    zero_gt_frames: usize,
    smoothness_est: Option<f64>,
    smoothness_gt: Option<f64>,
}

/// Reads `frame` and `count` columns of a CSV, in file order.
fn read_count_table(path: &Path) -> CliResult<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| invalid(format!("{}: empty count table", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| invalid(format!("{}: missing `{name}` column", path.display())))
    };
    let (fc, cc) = (col("frame")?, col("count")?);
    lines
        .enumerate()
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split(',').map(str::trim).collect();
            let bad = || {
                invalid(format!(
                    "{}: line {}: expected `frame` and `count` values",
                    path.display(),
                    n + 2
                ))
            };
            let f = cols.get(fc).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let c: f64 = cols.get(cc).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok((f, c))
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> CliResult {
    let est = read_count_table(&a.estimates)?;
    let gt: BTreeMap<u64, f64> = if let Some(p) = &a.annotations {
        with_path(read_annotations(p), p)?
            .into_iter()
            .map(|s| (s.frame, s.len() as f64))
            .collect()
    } else {
        let p = a.gt_counts.as_ref().expect("clap requires one ground truth");
        let rows = read_count_table(p)?;
        let map: BTreeMap<u64, f64> = rows.iter().copied().collect();
        if map.len() != rows.len() {
            return Err(invalid(format!("{}: repeated frame ids", p.display())));
        }
        map
    };
    let frames: Vec<u64> = est.iter().map(|(f, _)| *f).collect();
    let est_counts: Vec<f64> = est.iter().map(|(_, c)| *c).collect();
    let gt_counts: Vec<f64> = if a.annotations.is_some() {
        frames.iter().map(|f| gt.get(f).copied().unwrap_or(0.0)).collect()
    } else {
        frames
            .iter()
            .map(|f| {
                gt.get(f)
                    .copied()
                    .ok_or_else(|| invalid(format!("no ground-truth count for frame {f}")))
            })
            .collect::<CliResult<_>>()?
    };
    let mut buf = Vec::new();
    let s = write_count_report(&mut buf, &frames, &est_counts, &gt_counts)?;
    fs::write(&a.report, buf).map_err(|e| CliError::Io(format!("{}: {e}", a.report.display())))?;
    let summary = EvalSummary {
        frames: frames.len(),
        mae: s.mae,
        mean_pct: s.mean_pct,
        zero_gt_frames: s.zero_gt_frames,
        smoothness_est: temporal_smoothness(&est_counts).ok(),
        smoothness_gt: temporal_smoothness(&gt_counts).ok(),
    };
    if let Some(p) = &a.summary {
        write_text(p, &to_json(&summary)?)?;
    }
    println!("frames {} mae {} mean_pct {}", summary.frames, s.mae, s.mean_pct);
    Ok(())
}
