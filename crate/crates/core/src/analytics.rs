//! Counting metrics: absolute and percent count errors, and temporal
//! smoothness of per-frame estimates.

use std::io::Write;

use crate::error::{Error, Result};

/// Summary of per-frame count errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountErrors {
    /// Mean absolute error in persons.
    pub mae: f64,
    /// Mean of `|est − gt| / gt · 100` over frames with `gt > 0`; 0 when no
    /// such frame exists.
    pub mean_pct: f64,
    /// Frames left out of `mean_pct` because their ground truth is 0.
    pub zero_gt_frames: usize,
}

fn check_counts(est: &[f64], gt: &[f64]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::mismatch(
            format!("{} ground-truth counts", gt.len()),
            format!("{} estimates", est.len()),
        ));
    }
    if est.is_empty() {
        return Err(Error::invalid("no counts to compare"));
    }
    if est.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Error::invalid("counts must be finite"));
    }
    if gt.iter().any(|&g| g < 0.0) {
        return Err(Error::invalid("ground-truth counts must be non-negative"));
    }
    Ok(())
}

pub fn count_errors(est: &[f64], gt: &[f64]) -> Result<CountErrors> {
    check_counts(est, gt)?;
    let mae = est.iter().zip(gt).map(|(e, g)| (e - g).abs()).sum::<f64>() / est.len() as f64;
    let pct: Vec<f64> = est
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g > 0.0)
        .map(|(e, g)| (e - g).abs() / g * 100.0)
        .collect();
    let mean_pct = if pct.is_empty() {
        0.0
    } else {
        pct.iter().sum::<f64>() / pct.len() as f64
    };
    Ok(CountErrors {
        mae,
        mean_pct,
        zero_gt_frames: est.len() - pct.len(),
    })
}

/// Population standard deviation of `c[t+1] − c[t]`; lower is smoother.
pub fn temporal_smoothness(counts: &[f64]) -> Result<f64> {
    if counts.len() < 2 {
        return Err(Error::invalid("smoothness needs at least two counts"));
    }
    let diffs: Vec<f64> = counts.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok((diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt())
}

/// CSV report `frame,gt_count,est_count,abs_err,pct_err` with `#` summary
/// lines. `pct_err` is empty for frames whose ground truth is 0.
pub fn write_count_report<W: Write>(mut w: W, frames: &[u64], est: &[f64], gt: &[f64]) -> Result<CountErrors> {
    if frames.len() != est.len() {
        return Err(Error::mismatch(
            format!("{} frames", frames.len()),
            format!("{} estimates", est.len()),
        ));
    }
    let summary = count_errors(est, gt)?;
    writeln!(w, "frame,gt_count,est_count,abs_err,pct_err")?;
    for ((f, e), g) in frames.iter().zip(est).zip(gt) {
        let abs = (e - g).abs();
        if *g > 0.0 {
            writeln!(w, "{f},{g},{e},{abs},{}", abs / g * 100.0)?;
        } else {
            writeln!(w, "{f},{g},{e},{abs},")?;
        }
    }
    writeln!(w, "# frames={}", est.len())?;
    writeln!(w, "# mae={}", summary.mae)?;
    writeln!(w, "# mean_pct={}", summary.mean_pct)?;
    writeln!(w, "# zero_gt_frames={}", summary.zero_gt_frames)?;
    if est.len() >= 2 {
        writeln!(w, "# smoothness_est={}", temporal_smoothness(est)?)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn error_examples() {
        let e = count_errors(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!((e.mae, e.mean_pct), (0.0, 0.0));
        let e = count_errors(&[10.0, 12.0], &[10.0, 10.0]).unwrap();
        assert!((e.mae - 1.0).abs() < 1e-12 && (e.mean_pct - 10.0).abs() < 1e-12);
        let e = count_errors(&[1.0, 12.0], &[0.0, 10.0]).unwrap();
        assert_eq!(e.zero_gt_frames, 1);
        assert!((e.mean_pct - 20.0).abs() < 1e-12 && (e.mae - 1.5).abs() < 1e-12);
        assert!(count_errors(&[1.0], &[1.0, 2.0]).is_err());
        assert!(count_errors(&[], &[]).is_err());
        assert!(count_errors(&[1.0], &[-1.0]).is_err());
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(temporal_smoothness(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(temporal_smoothness(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        // diffs 1, -1
        assert!((temporal_smoothness(&[0.0, 1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(temporal_smoothness(&[1.0]).is_err());
    }

    #[test]
    fn report_layout() {
        let mut buf = Vec::new();
        write_count_report(&mut buf, &[7, 8], &[10.0, 12.0], &[10.0, 0.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame,gt_count,est_count,abs_err,pct_err");
        assert_eq!(lines[1], "7,10,10,0,0");
        assert_eq!(lines[2], "8,0,12,12,");
        assert!(lines[3..].iter().all(|l| l.starts_with('#')));
        assert!(text.contains("# mae=6\n"));
    }

    proptest! {
        #[test]
        fn mae_symmetry_and_zero(v in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..40)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let ab = count_errors(&a, &b).unwrap();
            let ba = count_errors(&b, &a).unwrap();
            prop_assert!((ab.mae - ba.mae).abs() <= 1e-9 * (1.0 + ab.mae));
            prop_assert!(ab.mae >= 0.0);
            prop_assert_eq!(count_errors(&a, &a).unwrap().mae, 0.0);
            prop_assert_eq!(ab.mae == 0.0, a == b);
        }

        #[test]
        fn smoothness_ignores_offsets_and_ramps(v in proptest::collection::vec(0.0f64..500.0, 2..40), c in -100.0f64..100.0, slope in -5.0f64..5.0) {
            let s = temporal_smoothness(&v).unwrap();
            let moved: Vec<f64> = v.iter().enumerate().map(|(t, x)| x + c + slope * t as f64).collect();
            prop_assert!((temporal_smoothness(&moved).unwrap() - s).abs() <= 1e-8 * (1.0 + s));
        }
    }
}
