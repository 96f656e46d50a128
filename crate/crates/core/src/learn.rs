//! Learning nonnegative per-feature weights by regularized MESA-risk
//! minimization.
//!
//! The training objective is
//!
//! ```text
//! R(w) + λ_fit · Σ_i D_MESA(GT_i, est_i(w)),     w ≥ 0
//! ```
//!
//! with `R(w) = λ₁·Σw` (L1) or `R(w) = ½·wᵀw` (Tikhonov). The MESA distance
//! is a maximum over exponentially many boxes, so it is handled by cutting
//! planes: a finite set of boxes per image is kept, the relaxed convex
//! program over those boxes is solved, and the most violated boxes of the
//! current solution (found by 2D max-subarray on the signed residual) are
//! added until no image's true excess exceeds its slack by more than `ε_cut`.
//!
//! The relaxed program is
//!
//! ```text
//! min R(w) + λ_fit·Σ_i ξ_i   s.t.  |w·c_i(B) − t_i(B)| ≤ ξ_i  for stored B,  w, ξ ≥ 0
//! ```
//!
//! an LP (L1) or QP (Tikhonov) of a few hundred variables, solved to a tight
//! duality gap by an interior-point method.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT};
use rayon::prelude::*;

use crate::density::{estimate_density_f64, DensityMap};
use crate::error::{Error, Result};
use crate::features::FeatureIndexMap;
use crate::grids::{read_header_line, BoxRegion, IntegralImage};
use crate::mesa::max_subarray_f64;

pub const DEFAULT_LAMBDA_FIT: f64 = 100.0;
pub const DEFAULT_LAMBDA1: f64 = 0.1;
pub const DEFAULT_EPS_CUT: f64 = 0.1;
pub const DEFAULT_MAX_OUTER: usize = 100;

/// Regularizer of the weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegKind {
    /// `λ₁·Σw`: favours sparse weights.
    L1,
    /// `½·wᵀw` (identity Tikhonov matrix): favours smooth, spread weights.
    Tikhonov,
}

impl RegKind {
    pub fn tag(&self) -> &'static str {
        match self {
            RegKind::L1 => "L1",
            RegKind::Tikhonov => "TIK",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(RegKind::L1),
            "TIK" | "tik" | "tikhonov" => Ok(RegKind::Tikhonov),
            other => Err(Error::Parse(format!(
                "unknown regularizer {other:?} (expected L1 or TIK)"
            ))),
        }
    }
}

/// Learned nonnegative weight per global feature index, with the settings
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    pub reg: RegKind,
    pub lambda_fit: f64,
    pub lambda1: f64,
    vocab_sizes: Vec<usize>,
}

impl WeightVector {
    pub fn new(
        weights: Vec<f64>,
        reg: RegKind,
        lambda_fit: f64,
        lambda1: f64,
        vocab_sizes: Vec<usize>,
    ) -> Result<Self> {
        if vocab_sizes.is_empty() || vocab_sizes.contains(&0) {
            return Err(Error::invalid("vocabulary layout needs at least one nonempty channel"));
        }
        let total: usize = vocab_sizes.iter().sum();
        if weights.len() != total {
            return Err(Error::mismatch(
                format!("{total} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "weight {i} is {} (must be finite and >= 0)",
                weights[i]
            )));
        }
        Ok(WeightVector {
            weights,
            reg,
            lambda_fit,
            lambda1,
            vocab_sizes,
        })
    }

    /// All-zero model for a vocabulary layout.
    pub fn zeros(vocab_sizes: Vec<usize>) -> Self {
        let n = vocab_sizes.iter().sum();
        WeightVector {
            weights: vec![0.0; n],
            reg: RegKind::Tikhonov,
            lambda_fit: DEFAULT_LAMBDA_FIT,
            lambda1: DEFAULT_LAMBDA1,
            vocab_sizes,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Rejects feature maps whose vocabulary layout differs from the model's.
    pub fn check_layout(&self, feat: &FeatureIndexMap) -> Result<()> {
        if feat.vocab_sizes() != self.vocab_sizes.as_slice() {
            return Err(Error::mismatch(
                format!("feature layout {:?}", self.vocab_sizes),
                format!("feature layout {:?}", feat.vocab_sizes()),
            ));
        }
        Ok(())
    }

    /// Density of a feature map under this model, after a layout check.
    pub fn apply(&self, feat: &FeatureIndexMap) -> Result<DensityMap> {
        self.check_layout(feat)?;
        crate::density::estimate_density(feat, &self.weights)
    }

    /// CMODEL v1: text header, layout line, then `f64` LE weights.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "CMODEL 1 {} {} {} {}",
            self.weights.len(),
            self.reg.tag(),
            self.lambda_fit,
            self.lambda1
        )?;
        write!(w, "{}", self.vocab_sizes.len())?;
        for k in &self.vocab_sizes {
            write!(w, " {k}")?;
        }
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.weights.len() * 8);
        for v in &self.weights {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header = read_header_line(&mut r)?;
        let f: Vec<&str> = header.split_ascii_whitespace().collect();
        if f.len() != 6 || f[0] != "CMODEL" {
            return Err(Error::Parse(format!("not a CMODEL header: {header:?}")));
        }
        if f[1] != "1" {
            return Err(Error::Parse(format!("unsupported CMODEL version {}", f[1])));
        }
        let n: usize = f[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad feature count {:?}", f[2])))?;
        let reg = RegKind::from_tag(f[3])?;
        let lambda_fit: f64 = f[4]
            .parse()
            .map_err(|_| Error::Parse(format!("bad lambda_fit {:?}", f[4])))?;
        let lambda1: f64 = f[5]
            .parse()
            .map_err(|_| Error::Parse(format!("bad lambda1 {:?}", f[5])))?;
        let layout = read_header_line(&mut r)?;
        let nums: Vec<usize> = layout
            .split_ascii_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad layout entry {s:?}"))))
            .collect::<Result<_>>()?;
        if nums.is_empty() || nums.len() != nums[0] + 1 {
            return Err(Error::Parse(format!("malformed layout line {layout:?}")));
        }
        let vocab = nums[1..].to_vec();
        if vocab.iter().sum::<usize>() != n {
            return Err(Error::Parse(format!(
                "layout {vocab:?} does not add up to {n} features"
            )));
        }
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Parse(format!("truncated CMODEL payload, expected {n} weights")))?;
        let weights = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        WeightVector::new(weights, reg, lambda_fit, lambda1, vocab).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        WeightVector::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn save_model(w: &WeightVector, path: impl AsRef<Path>) -> Result<()> {
    w.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<WeightVector> {
    WeightVector::load(path)
}

/// One training image: its features and its ground-truth density.
#[derive(Clone, Debug)]
pub struct TrainingInstance {
    pub frame: u64,
    pub features: FeatureIndexMap,
    pub gt: DensityMap,
}

impl TrainingInstance {
    pub fn new(frame: u64, features: FeatureIndexMap, gt: DensityMap) -> Result<Self> {
        if features.width() != gt.width() || features.height() != gt.height() {
            return Err(Error::mismatch(
                format!("{}x{}", features.width(), features.height()),
                format!("{}x{}", gt.width(), gt.height()),
            ));
        }
        Ok(TrainingInstance { frame, features, gt })
    }
}

/// Feature histogram `c(B)` of a box and its ground-truth mass `t(B)`.
#[derive(Clone, Debug)]
pub struct BoxConstraint {
    pub instance: usize,
    pub frame: u64,
    pub region: BoxRegion,
    /// Sparse `(global feature, pixel count)` pairs, ascending by feature.
    pub counts: Vec<(u32, f64)>,
    pub target: f64,
}

impl BoxConstraint {
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.counts.iter().map(|&(j, c)| c * w[j as usize]).sum()
    }

    pub fn dense_counts(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for &(j, c) in &self.counts {
            v[j as usize] = c;
        }
        v
    }
}

/// Histogram of global feature indices over the pixels of `b`.
///
/// `w · box_feature_counts(feat, b)` equals the estimated count in `b` for
/// every weight vector `w`.
pub fn box_feature_counts(feat: &FeatureIndexMap, b: &BoxRegion) -> Result<Vec<f64>> {
    let mut dense = vec![0.0f64; feat.total_vocab()];
    for (j, c) in sparse_box_counts(feat, b)? {
        dense[j as usize] = c;
    }
    Ok(dense)
}

fn sparse_box_counts(feat: &FeatureIndexMap, b: &BoxRegion) -> Result<Vec<(u32, f64)>> {
    b.check_fits(feat.width(), feat.height())?;
    let offsets = feat.offsets();
    let mut tally = vec![0u64; feat.total_vocab()];
    for y in b.y0..=b.y1 {
        for x in b.x0..=b.x1 {
            for (c, &o) in offsets.iter().enumerate() {
                tally[o + feat.index(x, y, c) as usize] += 1;
            }
        }
    }
    Ok(tally
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(j, &n)| (j as u32, n as f64))
        .collect())
}

/// Settings of the relaxed-program solver.
#[derive(Clone, Copy, Debug)]
pub struct InnerParams {
    /// Interior-point iteration cap.
    pub max_iter: u32,
    /// Absolute and relative duality-gap tolerance.
    pub gap_tol: f64,
}

impl Default for InnerParams {
    fn default() -> Self {
        InnerParams {
            max_iter: 200,
            gap_tol: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LearnParams {
    pub reg: RegKind,
    pub lambda1: f64,
    pub lambda_fit: f64,
    /// Minimum violation, in persons, for a box to be added as a constraint.
    pub eps_cut: f64,
    pub max_outer: usize,
    pub inner: InnerParams,
}

impl LearnParams {
    pub fn new(reg: RegKind) -> Self {
        LearnParams {
            reg,
            lambda1: DEFAULT_LAMBDA1,
            lambda_fit: DEFAULT_LAMBDA_FIT,
            eps_cut: DEFAULT_EPS_CUT,
            max_outer: DEFAULT_MAX_OUTER,
            inner: InnerParams::default(),
        }
    }

    fn regularizer(&self, w: &[f64]) -> f64 {
        match self.reg {
            RegKind::L1 => self.lambda1 * w.iter().sum::<f64>(),
            RegKind::Tikhonov => 0.5 * w.iter().map(|v| v * v).sum::<f64>(),
        }
    }
}

/// One outer (constraint-generation) iteration.
#[derive(Clone, Debug)]
pub struct OuterRecord {
    /// True objective `R(w) + λ_fit·Σ MESA` at this iteration's solution.
    pub objective: f64,
    /// Whether the solution improved on the best so far (and was kept).
    pub accepted: bool,
    /// Objective of the relaxed program over the stored boxes.
    pub inner_objective: f64,
    pub inner_gap: f64,
    pub inner_iterations: usize,
    /// Stored boxes during this iteration's solve.
    pub constraints: usize,
    pub added: usize,
    /// `max_i (MESA_i − ξ_i)` at this iteration's solution.
    pub max_violation: f64,
}

#[derive(Clone, Debug)]
pub struct LearnDiagnostics {
    pub outer: Vec<OuterRecord>,
    /// False when `max_outer` was reached with violations left.
    pub converged: bool,
    /// True objective of the returned weights.
    pub final_objective: f64,
    /// `max_i (MESA_i − ξ_i)` of the returned weights.
    pub final_max_violation: f64,
    pub constraints: Vec<BoxConstraint>,
}

impl LearnDiagnostics {
    /// Objectives of accepted iterations, in order (non-increasing).
    pub fn accepted_objectives(&self) -> Vec<f64> {
        self.outer.iter().filter(|r| r.accepted).map(|r| r.objective).collect()
    }
}

struct InstanceData<'a> {
    inst: &'a TrainingInstance,
    gt: Vec<f64>,
    gt_sat: IntegralImage,
}

/// Runs cutting-plane training. Non-convergence within `max_outer` is
/// reported through `LearnDiagnostics::converged`, not as an error.
pub fn learn_weights(train: &[TrainingInstance], params: &LearnParams) -> Result<(WeightVector, LearnDiagnostics)> {
    let first = train.first().ok_or_else(|| Error::invalid("training set is empty"))?;
    let layout = first.features.vocab_sizes().to_vec();
    for t in train {
        if t.features.vocab_sizes() != layout.as_slice() {
            return Err(Error::mismatch(
                format!("vocabulary layout {layout:?}"),
                format!("vocabulary layout {:?} in frame {}", t.features.vocab_sizes(), t.frame),
            ));
        }
        if t.features.width() != t.gt.width() || t.features.height() != t.gt.height() {
            return Err(Error::mismatch(
                "features and GT of equal size",
                format!("frame {}", t.frame),
            ));
        }
    }
    if !(params.lambda_fit.is_finite() && params.lambda_fit > 0.0) {
        return Err(Error::invalid(format!(
            "lambda_fit must be positive, got {}",
            params.lambda_fit
        )));
    }
    if params.reg == RegKind::L1 && !(params.lambda1.is_finite() && params.lambda1 >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda1 must be nonnegative, got {}",
            params.lambda1
        )));
    }
    if params.eps_cut.is_nan() || params.eps_cut < 0.0 {
        return Err(Error::invalid("eps_cut must be nonnegative"));
    }
    let n = layout.iter().sum::<usize>();
    let data: Vec<InstanceData> = train
        .iter()
        .map(|inst| {
            Ok(InstanceData {
                inst,
                gt: inst.gt.grid().data().iter().map(|&v| v as f64).collect(),
                gt_sat: IntegralImage::new(inst.gt.grid())?,
            })
        })
        .collect::<Result<_>>()?;

    let make_constraint = |i: usize, region: BoxRegion| -> Result<BoxConstraint> {
        let d = &data[i];
        Ok(BoxConstraint {
            instance: i,
            frame: d.inst.frame,
            region,
            counts: sparse_box_counts(&d.inst.features, &region)?,
            target: d.gt_sat.box_sum(&region)?,
        })
    };

    let mut solver = Relaxation::new(n, train.len(), params);
    let mut seen: Vec<HashSet<BoxRegion>> = vec![HashSet::new(); train.len()];
    for (i, d) in data.iter().enumerate() {
        let whole = d.inst.gt.grid().whole_box();
        seen[i].insert(whole);
        solver.push(make_constraint(i, whole)?);
    }

    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut outer = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_outer.max(1) {
        let (w, inner) = solver.solve()?;
        let slacks = solver.slacks(&w);
        let searches = most_violated(&data, &w)?;
        let risk: f64 = searches.iter().map(|s| s.distance()).sum();
        let objective = params.regularizer(&w) + params.lambda_fit * risk;
        let max_violation = searches
            .iter()
            .zip(&slacks)
            .map(|(s, &xi)| s.distance() - xi)
            .fold(f64::NEG_INFINITY, f64::max);

        let accepted = best.as_ref().is_none_or(|b| objective <= b.1);
        if accepted {
            best = Some((w.clone(), objective, max_violation));
        }

        let mut added = 0;
        for (i, s) in searches.iter().enumerate() {
            for (region, value) in [s.positive, s.negative] {
                if value > slacks[i] + params.eps_cut && seen[i].insert(region) {
                    solver.push(make_constraint(i, region)?);
                    added += 1;
                }
            }
        }
        outer.push(OuterRecord {
            objective,
            accepted,
            inner_objective: inner.objective,
            inner_gap: inner.gap,
            inner_iterations: inner.iterations,
            constraints: solver.rows.len() - added,
            added,
            max_violation,
        });
        if added == 0 {
            converged = true;
            break;
        }
    }

    let (w, final_objective, final_max_violation) = best.expect("at least one outer iteration");
    let weights = WeightVector::new(w, params.reg, params.lambda_fit, params.lambda1, layout)?;
    Ok((
        weights,
        LearnDiagnostics {
            outer,
            converged,
            final_objective,
            final_max_violation,
            constraints: solver.rows,
        },
    ))
}

/// True regularized MESA objective of `w` on a training set.
pub fn training_objective(train: &[TrainingInstance], w: &[f64], params: &LearnParams) -> Result<f64> {
    let data: Vec<InstanceData> = train
        .iter()
        .map(|inst| {
            Ok(InstanceData {
                inst,
                gt: inst.gt.grid().data().iter().map(|&v| v as f64).collect(),
                gt_sat: IntegralImage::new(inst.gt.grid())?,
            })
        })
        .collect::<Result<_>>()?;
    let risk: f64 = most_violated(&data, w)?.iter().map(|s| s.distance()).sum();
    Ok(params.regularizer(w) + params.lambda_fit * risk)
}

struct Violation {
    positive: (BoxRegion, f64),
    negative: (BoxRegion, f64),
}

impl Violation {
    fn distance(&self) -> f64 {
        self.positive.1.max(self.negative.1).max(0.0)
    }
}

/// Boxes of maximal over- and under-estimation for every instance.
fn most_violated(data: &[InstanceData], w: &[f64]) -> Result<Vec<Violation>> {
    data.par_iter()
        .map(|d| {
            let est = estimate_density_f64(&d.inst.features, w)?;
            let (width, height) = (d.inst.features.width(), d.inst.features.height());
            let diff: Vec<f64> = est.iter().zip(&d.gt).map(|(e, g)| e - g).collect();
            let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
            let p = max_subarray_f64(&diff, width, height);
            let q = max_subarray_f64(&neg, width, height);
            Ok(Violation {
                positive: (p.region, p.value),
                negative: (q.region, q.value),
            })
        })
        .collect()
}

/// Weights below this fraction of the largest weight are set to exactly 0.
const ZERO_SNAP: f64 = 1e-9;

struct InnerResult {
    objective: f64,
    gap: f64,
    iterations: usize,
}

/// The relaxed program over the stored boxes, solved from scratch by an
/// interior-point method each round. Variables are `x = (w, ξ)`; every box
/// gives the rows `c·w − ξ_i ≤ t` and `−c·w − ξ_i ≤ −t`.
struct Relaxation {
    n: usize,
    m: usize,
    reg: RegKind,
    lambda1: f64,
    lambda_fit: f64,
    params: InnerParams,
    rows: Vec<BoxConstraint>,
}

impl Relaxation {
    fn new(n: usize, m: usize, p: &LearnParams) -> Self {
        Relaxation {
            n,
            m,
            reg: p.reg,
            lambda1: p.lambda1,
            lambda_fit: p.lambda_fit,
            params: p.inner,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, c: BoxConstraint) {
        self.rows.push(c);
    }

    fn regularizer(&self, w: &[f64]) -> f64 {
        match self.reg {
            RegKind::L1 => self.lambda1 * w.iter().sum::<f64>(),
            RegKind::Tikhonov => 0.5 * w.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// `ξ_i = max(0, max_{stored B} |w·c(B) − t(B)|)`.
    fn slacks(&self, w: &[f64]) -> Vec<f64> {
        let mut xi = vec![0.0f64; self.m];
        for r in &self.rows {
            let res = (r.dot(w) - r.target).abs();
            xi[r.instance] = xi[r.instance].max(res);
        }
        xi
    }

    fn primal_objective(&self, w: &[f64]) -> f64 {
        self.regularizer(w) + self.lambda_fit * self.slacks(w).iter().sum::<f64>()
    }

    /// Solves the relaxed program. The returned weights are clipped to
    /// `w ≥ 0` and the objective is re-evaluated exactly at them.
    fn solve(&self) -> Result<(Vec<f64>, InnerResult)> {
        let (n, m) = (self.n, self.m);
        let vars = n + m;
        let box_rows = 2 * self.rows.len();
        let total_rows = box_rows + vars;
        let nnz = self.rows.iter().map(|c| 2 * (c.counts.len() + 1)).sum::<usize>() + vars;
        let (mut ri, mut ci, mut vi) = (
            Vec::with_capacity(nnz),
            Vec::with_capacity(nnz),
            Vec::with_capacity(nnz),
        );
        let mut b = Vec::with_capacity(total_rows);
        for (r, c) in self.rows.iter().enumerate() {
            for (sign, row) in [(1.0, 2 * r), (-1.0, 2 * r + 1)] {
                for &(j, cnt) in &c.counts {
                    ri.push(row);
                    ci.push(j as usize);
                    vi.push(sign * cnt);
                }
                ri.push(row);
                ci.push(n + c.instance);
                vi.push(-1.0);
                b.push(sign * c.target);
            }
        }
        // nonnegativity of w and ξ
        for k in 0..vars {
            ri.push(box_rows + k);
            ci.push(k);
            vi.push(-1.0);
            b.push(0.0);
        }
        let a = CscMatrix::new_from_triplets(total_rows, vars, ri, ci, vi);
        let p = match self.reg {
            RegKind::L1 => CscMatrix::zeros((vars, vars)),
            RegKind::Tikhonov => {
                CscMatrix::new_from_triplets(vars, vars, (0..n).collect(), (0..n).collect(), vec![1.0; n])
            }
        };
        let mut q = vec![0.0f64; vars];
        if self.reg == RegKind::L1 {
            q[..n].iter_mut().for_each(|v| *v = self.lambda1);
        }
        q[n..].iter_mut().for_each(|v| *v = self.lambda_fit);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.params.max_iter)
            .tol_gap_rel(self.params.gap_tol)
            .tol_gap_abs(self.params.gap_tol)
            .max_threads(1)
            .build()
            .expect("valid solver settings");
        let cones = [NonnegativeConeT(total_rows)];
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Degenerate(format!("relaxed program rejected by the solver: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        if !sol.x.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate(format!("relaxed program failed: {:?}", sol.status)));
        }
        // interior-point iterates never reach the bound exactly
        let scale = sol.x[..n].iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        let mut used = vec![false; n];
        for c in &self.rows {
            for &(j, _) in &c.counts {
                used[j as usize] = true;
            }
        }
        // a feature no stored box sees is decided by the regularizer alone: 0
        let w: Vec<f64> = sol.x[..n]
            .iter()
            .zip(&used)
            .map(|(&v, &u)| if !u || v <= ZERO_SNAP * scale { 0.0 } else { v })
            .collect();
        let objective = self.primal_objective(&w);
        let gap = (sol.obj_val - sol.obj_val_dual).abs() / sol.obj_val.abs().max(1.0);
        Ok((
            w,
            InnerResult {
                objective,
                gap,
                iterations: sol.iterations as usize,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{count_region, estimate_density};
    use crate::grids::Grid2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_counts_examples() {
        let feat = FeatureIndexMap::new(2, 2, vec![4], vec![0, 0, 1, 2]).unwrap();
        let c = box_feature_counts(&feat, &BoxRegion::new(0, 0, 1, 1).unwrap()).unwrap();
        assert_eq!(c, vec![2.0, 1.0, 1.0, 0.0]);
        let c = box_feature_counts(&feat, &BoxRegion::new(1, 1, 1, 1).unwrap()).unwrap();
        assert_eq!(c, vec![0.0, 0.0, 1.0, 0.0]);
        let uniform = FeatureIndexMap::new(10, 10, vec![5], vec![3; 100]).unwrap();
        let c = box_feature_counts(&uniform, &uniform_box(10)).unwrap();
        assert_eq!(c[3], 100.0);
        assert!(box_feature_counts(&feat, &BoxRegion::new(0, 0, 2, 0).unwrap()).is_err());
    }

    fn uniform_box(n: usize) -> BoxRegion {
        BoxRegion::new(0, 0, n - 1, n - 1).unwrap()
    }

    #[test]
    fn zero_ground_truth_learns_zero() {
        let feat = FeatureIndexMap::new(4, 4, vec![3], (0..16).map(|i| i % 3).collect()).unwrap();
        let inst = TrainingInstance::new(0, feat, DensityMap::zeros(4, 4)).unwrap();
        for reg in [RegKind::L1, RegKind::Tikhonov] {
            let (w, diag) = learn_weights(std::slice::from_ref(&inst), &LearnParams::new(reg)).unwrap();
            assert!(w.weights().iter().all(|&v| v == 0.0));
            assert_eq!(diag.final_objective, 0.0);
            assert!(diag.converged);
        }
    }

    #[test]
    fn learner_validates_inputs() {
        let a = TrainingInstance::new(
            0,
            FeatureIndexMap::new(2, 2, vec![3], vec![0; 4]).unwrap(),
            DensityMap::zeros(2, 2),
        )
        .unwrap();
        let b = TrainingInstance::new(
            1,
            FeatureIndexMap::new(2, 2, vec![4], vec![0; 4]).unwrap(),
            DensityMap::zeros(2, 2),
        )
        .unwrap();
        assert!(learn_weights(&[], &LearnParams::new(RegKind::L1)).is_err());
        assert!(learn_weights(&[a.clone(), b], &LearnParams::new(RegKind::L1)).is_err());
        let mut p = LearnParams::new(RegKind::Tikhonov);
        p.lambda_fit = 0.0;
        assert!(learn_weights(&[a], &p).is_err());
        assert!(TrainingInstance::new(
            0,
            FeatureIndexMap::new(2, 2, vec![3], vec![0; 4]).unwrap(),
            DensityMap::zeros(3, 2)
        )
        .is_err());
    }

    #[test]
    fn unused_feature_gets_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // vocabulary of 4, index 3 never appears
        let feats: Vec<FeatureIndexMap> = (0..3)
            .map(|_| FeatureIndexMap::new(8, 8, vec![4], (0..64).map(|_| rng.gen_range(0..3)).collect()).unwrap())
            .collect();
        let wstar = [0.2, 0.05, 0.4, 0.0];
        let train: Vec<TrainingInstance> = feats
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                let gt = estimate_density(&f, &wstar).unwrap();
                TrainingInstance::new(i as u64, f, gt).unwrap()
            })
            .collect();
        for reg in [RegKind::L1, RegKind::Tikhonov] {
            let (w, _) = learn_weights(&train, &LearnParams::new(reg)).unwrap();
            assert_eq!(w.weights()[3], 0.0);
        }
    }

    #[test]
    fn model_file_round_trip_and_errors() {
        let w = WeightVector::new(vec![0.0, 0.125, 1.0 / 3.0, 7.5], RegKind::L1, 100.0, 0.1, vec![1, 3]).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"CMODEL 1 4 L1 100 0.1\n2 1 3\n"));
        let back = WeightVector::read_from(&buf[..]).unwrap();
        assert_eq!(back, w);
        assert!(back
            .weights()
            .iter()
            .zip(w.weights())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(
            WeightVector::read_from(&buf[..buf.len() - 3]),
            Err(Error::Parse(_))
        ));
        assert!(WeightVector::read_from(&b"CMODEL 1 4 XX 1 1\n2 1 3\n"[..]).is_err());

        let big = WeightVector::zeros(vec![256, 256]);
        let small = FeatureIndexMap::new(1, 1, vec![256], vec![0]).unwrap();
        assert!(big.apply(&small).is_err());
        assert!(WeightVector::new(vec![-1.0], RegKind::L1, 1.0, 1.0, vec![1]).is_err());
    }

    /// Objective over every box of every instance, straight from the definition.
    fn exhaustive_objective(
        boxes: &[Vec<(Vec<f64>, f64)>],
        w: &[f64],
        reg: RegKind,
        lambda1: f64,
        lambda_fit: f64,
    ) -> f64 {
        let r = match reg {
            RegKind::L1 => lambda1 * w.iter().sum::<f64>(),
            RegKind::Tikhonov => 0.5 * w.iter().map(|v| v * v).sum::<f64>(),
        };
        let fit: f64 = boxes
            .iter()
            .map(|inst| {
                inst.iter()
                    .map(|(c, t)| (c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - t).abs())
                    .fold(0.0, f64::max)
            })
            .sum();
        r + lambda_fit * fit
    }

    fn all_boxes(inst: &TrainingInstance) -> Vec<(Vec<f64>, f64)> {
        let (w, h) = (inst.gt.width(), inst.gt.height());
        let mut out = Vec::new();
        for y0 in 0..h {
            for x0 in 0..w {
                for y1 in y0..h {
                    for x1 in x0..w {
                        let b = BoxRegion::new(x0, y0, x1, y1).unwrap();
                        let c = box_feature_counts(&inst.features, &b).unwrap();
                        let mut t = 0.0;
                        for y in y0..=y1 {
                            for x in x0..=x1 {
                                t += inst.gt.at(x, y) as f64;
                            }
                        }
                        out.push((c, t));
                    }
                }
            }
        }
        out
    }

    /// Coarse grid over [0,2]³ at step 0.05, then a 1e-3 grid over ±0.05
    /// around the coarse minimizer (the objective is convex).
    fn grid_search(f: &dyn Fn(&[f64]) -> f64) -> f64 {
        let mut best = (f64::INFINITY, [0.0; 3]);
        for a in 0..=40 {
            for b in 0..=40 {
                for c in 0..=40 {
                    let w = [a as f64 * 0.05, b as f64 * 0.05, c as f64 * 0.05];
                    let v = f(&w);
                    if v < best.0 {
                        best = (v, w);
                    }
                }
            }
        }
        let centre = best.1;
        let mut fine = best.0;
        let axis = |k: usize| {
            let lo = ((centre[k] - 0.05) * 1000.0).round().max(0.0) as i64;
            let hi = ((centre[k] + 0.05) * 1000.0).round().min(2000.0) as i64;
            lo..=hi
        };
        for a in axis(0) {
            for b in axis(1) {
                for c in axis(2) {
                    let v = f(&[a as f64 * 1e-3, b as f64 * 1e-3, c as f64 * 1e-3]);
                    fine = fine.min(v);
                }
            }
        }
        fine
    }

    #[test]
    fn tiny_instances_match_grid_search() {
        for (seed, reg) in [
            (1u64, RegKind::L1),
            (2, RegKind::Tikhonov),
            (3, RegKind::Tikhonov),
            (4, RegKind::L1),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train: Vec<TrainingInstance> = (0..2)
                .map(|i| {
                    let (w, h) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
                    let idx = (0..w * h).map(|_| rng.gen_range(0..3)).collect();
                    let feat = FeatureIndexMap::new(w, h, vec![3], idx).unwrap();
                    let gt = Grid2D::from_fn(w, h, |_, _| rng.gen_range(0.0f32..1.5));
                    TrainingInstance::new(i, feat, DensityMap::from_grid(gt).unwrap()).unwrap()
                })
                .collect();
            let mut params = LearnParams::new(reg);
            params.lambda_fit = 1.0;
            params.lambda1 = 0.1;
            params.eps_cut = 1e-9;
            let (w, diag) = learn_weights(&train, &params).unwrap();
            assert!(diag.converged);
            let boxes: Vec<_> = train.iter().map(all_boxes).collect();
            let obj = |w: &[f64]| exhaustive_objective(&boxes, w, reg, 0.1, 1.0);
            let learned = obj(w.weights());
            let brute = grid_search(&obj);
            assert!(
                learned <= brute * (1.0 + 1e-3) + 1e-12,
                "{reg:?} seed {seed}: learned {learned} vs grid {brute}"
            );
            assert!((learned - diag.final_objective).abs() < 1e-5 * learned.max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn box_counts_reproduce_region_counts(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.gen_range(1..10), rng.gen_range(1..10));
            let idx = (0..w * h * 2).map(|i| if i % 2 == 0 { rng.gen_range(0..3) } else { rng.gen_range(0..5) }).collect();
            let feat = FeatureIndexMap::new(w, h, vec![3, 5], idx).unwrap();
            let weights: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
            let (xa, xb) = (rng.gen_range(0..w), rng.gen_range(0..w));
            let (ya, yb) = (rng.gen_range(0..h), rng.gen_range(0..h));
            let b = BoxRegion::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb)).unwrap();
            let c = box_feature_counts(&feat, &b).unwrap();
            prop_assert_eq!(c.iter().sum::<f64>(), (b.area() * 2) as f64);
            let via_counts: f64 = c.iter().zip(&weights).map(|(a, b)| a * b).sum();
            let d = estimate_density(&feat, &weights).unwrap();
            let direct = count_region(&d, &b).unwrap();
            prop_assert!((via_counts - direct).abs() < 1e-5 * direct.max(1.0));
        }
    }
}
