//! `synth` and `features` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crowd_core::density::write_annotations;
use crowd_core::features::{
    build_codebook, dense_descriptors, quantize_confidences, quantize_descriptors, sample_descriptors,
    stack_feature_maps, Codebook, DescriptorMap, FeatureIndexMap, DEFAULT_BINS, DEFAULT_MAX_CONF, DEFAULT_MIN_CONF,
};
use crowd_core::flow::DEFAULT_GAP;
use crowd_core::learn::{RegKind, WeightVector, DEFAULT_LAMBDA1, DEFAULT_LAMBDA_FIT};
use crowd_core::synth::{
    generate_planted_training, generate_scene, generate_sequence, Manifest, ManifestFrame, VelocitySpec, RNG_NAME,
};
use crowd_core::Grid2D;

use crate::{invalid, with_path, CliResult};

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(subcommand)]
    kind: SynthKind,
}

#[derive(Subcommand, Debug)]
enum SynthKind {
    /// Independent still scenes with images, confidences and annotations
    Scenes(ScenesArgs),
    /// One scene advected over time, with ground-truth displacement
    Sequence(SequenceArgs),
    /// Random feature maps whose ground truth comes from known weights
    Planted(PlantedArgs),
}

#[derive(Args, Debug)]
struct ScenesArgs {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Mean persons per scene
    #[arg(long, default_value_t = 260)]
    persons: usize,
    /// Per-scene person count varies uniformly within ± this
    #[arg(long, default_value_t = 0)]
    persons_jitter: usize,
    #[arg(long, default_value_t = 640)]
    width: usize,
    #[arg(long, default_value_t = 480)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Motion {
    Uniform,
    Streams,
    Rotation,
}

#[derive(Args, Debug)]
struct SequenceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    persons: usize,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 120)]
    height: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, value_enum, default_value_t = Motion::Uniform)]
    motion: Motion,
    /// Uniform motion, pixels per frame along x
    #[arg(long, default_value_t = 0.37, allow_hyphen_values = true)]
    vx: f64,
    /// Uniform motion, pixels per frame along y
    #[arg(long, default_value_t = -0.22, allow_hyphen_values = true)]
    vy: f64,
    /// Opposing streams, pixels per frame
    #[arg(long, default_value_t = 0.3)]
    speed: f64,
    /// Rotation, radians per frame
    #[arg(long, default_value_t = 0.002, allow_hyphen_values = true)]
    omega: f64,
    /// Standard deviation of per-pixel Gaussian image noise
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Frame distance of the written ground-truth displacement
    #[arg(long, default_value_t = DEFAULT_GAP)]
    gap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PlantedArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Number of feature indices K
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    /// Planted weights are drawn uniformly from [0, this]
    #[arg(long, default_value_t = 0.01)]
    max_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn synth(a: SynthArgs) -> CliResult {
    match a.kind {
        SynthKind::Scenes(s) => synth_scenes(s),
        SynthKind::Sequence(s) => synth_sequence(s),
        SynthKind::Planted(s) => synth_planted(s),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| crate::CliError::Io(format!("{}: cannot create directory: {e}", dir.display())))
}

fn save_grid(g: &Grid2D, dir: &Path, name: &str) -> CliResult<String> {
    let path = dir.join(name);
    with_path(g.save(&path), &path)?;
    Ok(name.to_string())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| invalid(format!("cannot serialize JSON: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| crate::CliError::Io(format!("{}: {e}", path.display())))
}

fn write_annotation_file(path: &Path, sets: &[crowd_core::density::AnnotationSet]) -> CliResult {
    let mut buf = Vec::new();
    write_annotations(&mut buf, sets)?;
    fs::write(path, buf).map_err(|e| crate::CliError::Io(format!("{}: {e}", path.display())))
}

fn synth_scenes(a: ScenesArgs) -> CliResult {
    if a.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    if a.persons_jitter > a.persons {
        return Err(invalid("--persons-jitter cannot exceed --persons"));
    }
    create_dir(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut frames = Vec::with_capacity(a.count);
    let mut sets = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let jitter = a.persons_jitter as i64;
        let n = (a.persons as i64 + rng.gen_range(-jitter..=jitter)) as usize;
        let scene_seed: u64 = rng.gen();
        let scene = generate_scene(n, a.width, a.height, scene_seed)?;
        let mut files = BTreeMap::new();
        files.insert(
            "image".into(),
            save_grid(&scene.image(), &a.out, &format!("scene_{i:04}_image.cgrid"))?,
        );
        files.insert(
            "confidence".into(),
            save_grid(&scene.confidence(), &a.out, &format!("scene_{i:04}_conf.cgrid"))?,
        );
        sets.push(scene.annotations(i as u64));
        frames.push(ManifestFrame {
            frame: i as u64,
            persons: n,
            files,
        });
    }
    write_annotation_file(&a.out.join("annotations.csv"), &sets)?;
    let manifest = Manifest {
        kind: "scenes".into(),
        seed: a.seed,
        rng: RNG_NAME.into(),
        width: a.width,
        height: a.height,
        params: json!({ "count": a.count, "persons": a.persons, "persons_jitter": a.persons_jitter }),
        frames,
    };
    write_json(&a.out.join("manifest.json"), &manifest)
}

fn synth_sequence(a: SequenceArgs) -> CliResult {
    let spec = match a.motion {
        Motion::Uniform => VelocitySpec::Uniform { vx: a.vx, vy: a.vy },
        Motion::Streams => VelocitySpec::OpposingStreams { speed: a.speed },
        Motion::Rotation => VelocitySpec::Rotation { omega: a.omega },
    };
    create_dir(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let scene = generate_scene(a.persons, a.width, a.height, rng.gen())?;
    let seq = generate_sequence(&scene, spec, a.frames, a.noise, rng.gen())?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    let mut sets = Vec::with_capacity(seq.frames.len());
    for (t, f) in seq.frames.iter().enumerate() {
        let mut files = BTreeMap::new();
        files.insert(
            "image".into(),
            save_grid(&f.image, &a.out, &format!("frame_{t:04}_image.cgrid"))?,
        );
        files.insert(
            "confidence".into(),
            save_grid(&f.confidence, &a.out, &format!("frame_{t:04}_conf.cgrid"))?,
        );
        frames.push(ManifestFrame {
            frame: t as u64,
            persons: f.annotations.len(),
            files,
        });
        sets.push(f.annotations.clone());
    }
    write_annotation_file(&a.out.join("annotations.csv"), &sets)?;
    let gt_name = format!("gt_flow_gap{}.cgrid", a.gap);
    save_grid(seq.gt_displacement(a.gap).grid(), &a.out, &gt_name)?;
    let manifest = Manifest {
        kind: "sequence".into(),
        seed: a.seed,
        rng: RNG_NAME.into(),
        width: a.width,
        height: a.height,
        params: json!({
            "persons": a.persons,
            "motion": spec,
            "noise": a.noise,
            "gap": a.gap,
            "gt_flow": gt_name,
        }),
        frames,
    };
    write_json(&a.out.join("manifest.json"), &manifest)
}

fn synth_planted(a: PlantedArgs) -> CliResult {
    if !(a.max_weight > 0.0 && a.max_weight.is_finite()) {
        return Err(invalid("--max-weight must be positive"));
    }
    if a.vocab == 0 {
        return Err(invalid("--vocab must be at least 1"));
    }
    create_dir(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let w_star: Vec<f64> = (0..a.vocab).map(|_| rng.gen_range(0.0..a.max_weight)).collect();
    let train = generate_planted_training(a.frames, a.width, a.height, a.vocab, &w_star, rng.gen())?;
    let mut frames = Vec::with_capacity(train.len());
    for (i, inst) in train.iter().enumerate() {
        let mut files = BTreeMap::new();
        let feat = format!("frame_{i:04}.cfeat");
        let path = a.out.join(&feat);
        with_path(inst.features.save(&path), &path)?;
        files.insert("features".into(), feat);
        files.insert(
            "gt_density".into(),
            save_grid(inst.gt.grid(), &a.out, &format!("frame_{i:04}_gt.cgrid"))?,
        );
        frames.push(ManifestFrame {
            frame: i as u64,
            persons: 0,
            files,
        });
    }
    let model = WeightVector::new(w_star, RegKind::L1, DEFAULT_LAMBDA_FIT, DEFAULT_LAMBDA1, vec![a.vocab])?;
    let path = a.out.join("w_star.model");
    with_path(model.save(&path), &path)?;
    let manifest = Manifest {
        kind: "planted".into(),
        seed: a.seed,
        rng: RNG_NAME.into(),
        width: a.width,
        height: a.height,
        params: json!({ "vocab": a.vocab, "max_weight": a.max_weight, "weights": "w_star.model" }),
        frames,
    };
    write_json(&a.out.join("manifest.json"), &manifest)
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[command(subcommand)]
    kind: FeaturesKind,
}

#[derive(Subcommand, Debug)]
enum FeaturesKind {
    /// Bin detector confidences into feature indices
    QuantizeConf(QuantizeConfArgs),
    /// Dense 128-dimensional gradient-orientation descriptors
    Descriptors(DescriptorsArgs),
    /// k-means codebook over sampled descriptors
    Codebook(CodebookArgs),
    /// Map descriptors to their nearest codebook prototype
    QuantizeDesc(QuantizeDescArgs),
    /// Concatenate feature maps into one multi-channel map
    Stack(StackArgs),
}

#[derive(Args, Debug)]
struct QuantizeConfArgs {
    /// Single-channel confidence CGRID
    #[arg(long)]
    input: PathBuf,
    /// Feature map (CFEAT)
    #[arg(long)]
    output: PathBuf,
    /// Confidences at or below this go to the first bin
    #[arg(long, default_value_t = DEFAULT_MIN_CONF, allow_hyphen_values = true)]
    min_conf: f64,
    /// Confidences at or above this go to the last bin
    #[arg(long, default_value_t = DEFAULT_MAX_CONF, allow_hyphen_values = true)]
    max_conf: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct DescriptorsArgs {
    /// Single-channel image CGRID
    #[arg(long)]
    input: PathBuf,
    /// 128-channel descriptor CGRID
    #[arg(long)]
    output: PathBuf,
    /// Patch side in pixels, a multiple of 4
    #[arg(long, default_value_t = 16)]
    patch: usize,
}

#[derive(Args, Debug)]
struct CodebookArgs {
    /// Descriptor CGRIDs to sample from
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Number of prototypes
    #[arg(long, default_value_t = 256)]
    k: usize,
    /// Keep every n-th pixel descriptor
    #[arg(long, default_value_t = 7)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct QuantizeDescArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct StackArgs {
    /// Feature maps in channel order
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

fn load_grid(path: &Path) -> CliResult<Grid2D> {
    with_path(Grid2D::load(path), path)
}

pub fn load_features(path: &Path) -> CliResult<FeatureIndexMap> {
    with_path(FeatureIndexMap::load(path), path)
}

fn single_channel(g: Grid2D, path: &Path) -> CliResult<Grid2D> {
    if g.channels() != 1 {
        return Err(invalid(format!(
            "{}: expected a single-channel grid, got {} channels",
            path.display(),
            g.channels()
        )));
    }
    Ok(g)
}

pub fn features(a: FeaturesArgs) -> CliResult {
    match a.kind {
        FeaturesKind::QuantizeConf(q) => {
            let conf = single_channel(load_grid(&q.input)?, &q.input)?;
            let map = quantize_confidences(&conf, q.min_conf, q.max_conf, q.bins)?;
            with_path(map.save(&q.output), &q.output)
        }
        FeaturesKind::Descriptors(d) => {
            let img = single_channel(load_grid(&d.input)?, &d.input)?;
            let desc = dense_descriptors(&img, d.patch)?;
            with_path(desc.grid().save(&d.output), &d.output)
        }
        FeaturesKind::Codebook(c) => {
            let maps = c
                .inputs
                .iter()
                .map(|p| load_grid(p).map(DescriptorMap::from_grid))
                .collect::<CliResult<Vec<_>>>()?;
            let dim = maps[0].dim();
            if let Some((p, m)) = c.inputs.iter().zip(&maps).find(|(_, m)| m.dim() != dim) {
                return Err(invalid(format!(
                    "{}: descriptor length {} differs from {dim}",
                    p.display(),
                    m.dim()
                )));
            }
            let samples = sample_descriptors(&maps, c.stride);
            let book = build_codebook(&samples, dim, c.k, c.seed)?;
            with_path(book.save(&c.output), &c.output)
        }
        FeaturesKind::QuantizeDesc(q) => {
            let desc = DescriptorMap::from_grid(load_grid(&q.input)?);
            let book = with_path(Codebook::load(&q.codebook), &q.codebook)?;
            let map = quantize_descriptors(&desc, &book)?;
            with_path(map.save(&q.output), &q.output)
        }
        FeaturesKind::Stack(s) => {
            let maps = s
                .inputs
                .iter()
                .map(|p| load_features(p))
                .collect::<CliResult<Vec<_>>>()?;
            let stacked = stack_feature_maps(&maps)?;
            with_path(stacked.save(&s.output), &s.output)
        }
    }
}
