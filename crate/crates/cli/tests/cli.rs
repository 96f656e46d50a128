use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowd_core::georef::{Homography, Mapping, WorldGrid};
use crowd_core::learn::WeightVector;

fn crowd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = crowd(args);
    assert!(
        out.status.success(),
        "crowd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files_in(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn help_lists_defaults() {
    let flow = ok(&["flow", "--help"]);
    assert!(flow.contains("[default: 10]") && flow.contains("[default: 5]"));
    let georef = ok(&["georef", "density", "--help"]);
    assert!(georef.contains("[default: 32633]") && georef.contains("[default: 0.25]"));
    let learn = ok(&["learn", "--help"]);
    assert!(learn.contains("--lambda-fit") && learn.contains("[default: 100]") && learn.contains("--sigma-gt"));
    let pressure = ok(&["pressure", "--help"]);
    assert!(pressure.contains("--radius-m") && pressure.contains("--t-window"));
}

#[test]
fn exit_codes() {
    assert_eq!(crowd(&["flow", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(crowd(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cgrid");
    let out = crowd(&[
        "render",
        "--input",
        p(&missing),
        "--output",
        p(&dir.path().join("x.pgm")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cgrid"));

    let bad = dir.path().join("bad.cgrid");
    fs::write(&bad, b"CGRID 7 1 1 1\n\0\0\0\0").unwrap();
    let out = crowd(&[
        "features",
        "quantize-conf",
        "--input",
        p(&bad),
        "--output",
        p(&dir.path().join("f.cfeat")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn zero_model_estimates_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth",
        "planted",
        "--out",
        p(&d.join("set")),
        "--frames",
        "2",
        "--width",
        "16",
        "--height",
        "16",
        "--vocab",
        "4",
    ]);
    let model = d.join("zero.model");
    WeightVector::zeros(vec![4]).save(&model).unwrap();
    let feats = files_in(&d.join("set"), "cfeat");
    let out = d.join("est");
    ok(&[
        "estimate",
        "--model",
        p(&model),
        "--features",
        p(&feats[0]),
        "--out-dir",
        p(&out),
    ]);
    let table = fs::read_to_string(out.join("counts.csv")).unwrap();
    assert_eq!(table, "frame,file,count\n0,frame_0000_density.cgrid,0\n");
}

#[test]
fn planted_pipeline_counts_within_five_percent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let set = d.join("set");
    ok(&[
        "synth",
        "planted",
        "--out",
        p(&set),
        "--frames",
        "8",
        "--width",
        "48",
        "--height",
        "48",
        "--vocab",
        "8",
        "--seed",
        "3",
    ]);
    let feats = files_in(&set, "cfeat");
    let gts: Vec<PathBuf> = feats
        .iter()
        .map(|f| f.with_file_name(format!("{}_gt.cgrid", f.file_stem().unwrap().to_str().unwrap())))
        .collect();
    let (train_f, test_f) = feats.split_at(4);
    let mut args = vec!["learn", "--reg", "tik", "--output"];
    let model = d.join("m.model");
    let report = d.join("learn.json");
    args.push(p(&model));
    args.extend(["--report", p(&report), "--features"]);
    args.extend(train_f.iter().map(|f| p(f)));
    args.push("--gt");
    args.extend(gts[..4].iter().map(|f| p(f)));
    ok(&args);
    let learned: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(learned["reg"], "TIK");

    let estimate = |model: &Path, out: &Path| {
        let mut a = vec![
            "estimate",
            "--model",
            p(model),
            "--out-dir",
            p(out),
            "--frame-ids",
            "4,5,6,7",
            "--features",
        ];
        a.extend(test_f.iter().map(|f| p(f)));
        ok(&a);
    };
    estimate(&model, &d.join("est"));
    estimate(&set.join("w_star.model"), &d.join("truth"));
    ok(&[
        "eval",
        "--estimates",
        p(&d.join("est/counts.csv")),
        "--gt-counts",
        p(&d.join("truth/counts.csv")),
        "--report",
        p(&d.join("report.csv")),
        "--summary",
        p(&d.join("summary.json")),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    let pct = summary["mean_pct"].as_f64().unwrap();
    assert!(pct <= 5.0, "mean error {pct}%");
    assert_eq!(summary["frames"], 4);
    let report = fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(report.starts_with("frame,gt_count,est_count,abs_err,pct_err\n4,"));
    assert!(report.contains("# mean_pct="));

    // rerunning gives byte-identical files
    estimate(&model, &d.join("est2"));
    for f in files_in(&d.join("est"), "cgrid") {
        assert_eq!(
            fs::read(&f).unwrap(),
            fs::read(d.join("est2").join(f.file_name().unwrap())).unwrap()
        );
    }
    assert_eq!(
        fs::read(d.join("est/counts.csv")).unwrap(),
        fs::read(d.join("est2/counts.csv")).unwrap()
    );
}

#[test]
fn scenes_to_counts_with_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let set = d.join("scenes");
    ok(&[
        "synth",
        "scenes",
        "--out",
        p(&set),
        "--count",
        "6",
        "--persons",
        "30",
        "--persons-jitter",
        "5",
        "--width",
        "128",
        "--height",
        "96",
        "--seed",
        "11",
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(set.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rng"], "ChaCha8");
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 6);

    let mut feats = Vec::new();
    for i in 0..6 {
        let conf = set.join(format!("scene_{i:04}_conf.cgrid"));
        let f = d.join(format!("f{i}.cfeat"));
        ok(&[
            "features",
            "quantize-conf",
            "--input",
            p(&conf),
            "--output",
            p(&f),
            "--bins",
            "64",
        ]);
        feats.push(f);
    }
    let ann = set.join("annotations.csv");
    let model = d.join("m.model");
    let mut args = vec!["learn", "--annotations", p(&ann), "--output", p(&model), "--features"];
    args.extend(feats[..3].iter().map(|f| p(f)));
    ok(&args);
    let est = d.join("est");
    let mut args = vec![
        "estimate",
        "--model",
        p(&model),
        "--out-dir",
        p(&est),
        "--frame-ids",
        "3,4,5",
        "--features",
    ];
    args.extend(feats[3..].iter().map(|f| p(f)));
    ok(&args);
    ok(&[
        "eval",
        "--estimates",
        p(&d.join("est/counts.csv")),
        "--annotations",
        p(&ann),
        "--report",
        p(&d.join("r.csv")),
        "--summary",
        p(&d.join("s.json")),
    ]);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert!(s["mean_pct"].as_f64().unwrap() < 15.0, "{s}");
    assert!(s["smoothness_est"].as_f64().is_some());
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "synth",
            "sequence",
            "--out",
            p(&out),
            "--frames",
            "3",
            "--persons",
            "5",
            "--width",
            "48",
            "--height",
            "40",
            "--gap",
            "2",
            "--noise",
            "0.02",
            "--seed",
            "4",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(names.len() >= 8);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn motion_pressure_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let seq = d.join("seq");
    ok(&[
        "synth",
        "sequence",
        "--out",
        p(&seq),
        "--frames",
        "6",
        "--persons",
        "12",
        "--width",
        "64",
        "--height",
        "48",
        "--motion",
        "streams",
        "--speed",
        "0.5",
        "--gap",
        "2",
        "--seed",
        "2",
    ]);
    let frames: Vec<PathBuf> = (0..6).map(|t| seq.join(format!("frame_{t:04}_image.cgrid"))).collect();
    let flows = d.join("flows");
    let mut args = vec![
        "flow",
        "--gap",
        "2",
        "--avg-window",
        "2",
        "--warps",
        "2",
        "--out-dir",
        p(&flows),
        "--frames",
    ];
    args.extend(frames.iter().map(|f| p(f)));
    ok(&args);
    let summary = fs::read_to_string(flows.join("flow_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4 + 3);

    // 0.1 m per pixel, north up, somewhere in UTM zone 33
    let mapping = d.join("cam.homog");
    let h = Homography::from_row_slice(&[0.1, 0.0, 400_000.0, 0.0, -0.1, 5_300_000.0, 0.0, 0.0, 1.0]).unwrap();
    Mapping::Homography(h).save(&mapping).unwrap();

    let mut velocities: Vec<PathBuf> = Vec::new();
    for t in 0..3 {
        let v = d.join(format!("v{t}.wgrid"));
        let flow = flows.join(format!("avg_{t:04}.cgrid"));
        let mut a = vec![
            "georef",
            "motion",
            "--flow",
            p(&flow),
            "--mapping",
            p(&mapping),
            "--gap",
            "2",
            "--cell-size",
            "0.5",
            "--output",
            p(&v),
        ];
        let report = d.join(format!("v{t}.json"));
        if t > 0 {
            a.extend(["--grid-like", p(&velocities[0])]);
        } else {
            a.extend(["--report", p(&report)]);
        }
        ok(&a);
        velocities.push(v);
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("v0.json")).unwrap()).unwrap();
    assert!((report["dt"].as_f64().unwrap() - 0.08).abs() < 1e-12);

    let density = d.join("density.cgrid");
    let gt_density = seq.join("frame_0000_conf.cgrid");
    // any non-negative raster works as a density here
    let conf = crowd_core::Grid2D::load(&gt_density).unwrap();
    crowd_core::Grid2D::from_fn(64, 48, |x, y| (conf.get(x, y, 0) + 8.0) / 100.0)
        .save(&density)
        .unwrap();
    let rho = d.join("rho.wgrid");
    ok(&[
        "georef",
        "density",
        "--input",
        p(&density),
        "--mapping",
        p(&mapping),
        "--grid-like",
        p(&velocities[0]),
        "--output",
        p(&rho),
        "--esri",
        p(&d.join("rho.asc")),
        "--geojson",
        p(&d.join("rho.geojson")),
        "--report",
        p(&d.join("rho.json")),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("rho.json")).unwrap()).unwrap();
    let (img, world) = (r["image_sum"].as_f64().unwrap(), r["world_sum"].as_f64().unwrap());
    assert!((img - world).abs() <= 1e-5 * img, "{img} vs {world}");
    assert!(fs::read_to_string(d.join("rho.prj")).unwrap().contains("32633"));
    let wg = WorldGrid::load(&rho).unwrap();
    assert_eq!(wg.spec, WorldGrid::load(&velocities[0]).unwrap().spec);

    let out = d.join("pressure");
    let mut a = vec![
        "pressure",
        "--density",
        p(&rho),
        "--t-window",
        "2",
        "--esri",
        "--out-dir",
        p(&out),
        "--velocity",
    ];
    a.extend(velocities.iter().map(|v| p(v)));
    ok(&a);
    let table = fs::read_to_string(out.join("pressure.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "frame,max_p,cell_i,cell_j,easting,northing");
    assert_eq!(lines.len(), 3);
    let max_p: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!(max_p > 0.0);
    assert!(out.join("pressure_0001.asc").exists());

    let pgm = d.join("p.pgm");
    ok(&[
        "render",
        "--input",
        p(&out.join("pressure_0000.wgrid")),
        "--output",
        p(&pgm),
    ]);
    let bytes = fs::read(&pgm).unwrap();
    let header = format!("P5\n{} {}\n255\n", wg.spec.width, wg.spec.height);
    assert!(bytes.starts_with(header.as_bytes()));
    assert_eq!(bytes.len(), header.len() + wg.spec.width * wg.spec.height);
    assert!(bytes[header.len()..].contains(&255));

    let flow_pgm = d.join("f.pgm");
    ok(&[
        "render",
        "--input",
        p(&flows.join("flow_0000.cgrid")),
        "--magnitude",
        "--output",
        p(&flow_pgm),
    ]);
    assert!(fs::read(&flow_pgm).unwrap().starts_with(b"P5\n64 48\n255\n"));
}

#[test]
fn descriptor_features_and_stacking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth",
        "scenes",
        "--out",
        p(&d.join("s")),
        "--count",
        "2",
        "--persons",
        "4",
        "--width",
        "48",
        "--height",
        "40",
    ]);
    let mut descs = Vec::new();
    for i in 0..2 {
        let out = d.join(format!("d{i}.cgrid"));
        ok(&[
            "features",
            "descriptors",
            "--input",
            p(&d.join(format!("s/scene_{i:04}_image.cgrid"))),
            "--output",
            p(&out),
            "--patch",
            "8",
        ]);
        descs.push(out);
    }
    let book = d.join("book.cbook");
    ok(&[
        "features",
        "codebook",
        "--inputs",
        p(&descs[0]),
        p(&descs[1]),
        "--k",
        "8",
        "--stride",
        "3",
        "--output",
        p(&book),
    ]);
    assert!(fs::read(&book).unwrap().starts_with(b"CBOOK 1 8 128 0\n"));
    let sift = d.join("sift.cfeat");
    ok(&[
        "features",
        "quantize-desc",
        "--input",
        p(&descs[0]),
        "--codebook",
        p(&book),
        "--output",
        p(&sift),
    ]);
    let conf = d.join("conf.cfeat");
    ok(&[
        "features",
        "quantize-conf",
        "--input",
        p(&d.join("s/scene_0000_conf.cgrid")),
        "--output",
        p(&conf),
    ]);
    let stacked = d.join("both.cfeat");
    ok(&[
        "features",
        "stack",
        "--inputs",
        p(&conf),
        p(&sift),
        "--output",
        p(&stacked),
    ]);
    let map = crowd_core::features::FeatureIndexMap::load(&stacked).unwrap();
    assert_eq!(map.vocab_sizes(), &[256, 8]);
    assert_eq!(map.total_vocab(), 264);
}

#[test]
fn threads_flag_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "--threads",
        "2",
        "synth",
        "planted",
        "--out",
        p(&dir.path().join("x")),
        "--frames",
        "1",
        "--width",
        "8",
        "--height",
        "8",
        "--vocab",
        "2",
    ]);
}
