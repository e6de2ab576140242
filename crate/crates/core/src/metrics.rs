//! Depth evaluation: per-image median scaling and the seven standard error
//! and accuracy measures.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::DepthRange;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

pub const COLUMNS: [&str; 7] = [
    "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3",
];
pub const TABLE_HEADERS: [&str; 7] = [
    "Abs Rel",
    "Sq Rel",
    "RMSE",
    "RMSE log",
    "d1<1.25",
    "d2<1.25^2",
    "d3<1.25^3",
];

impl MetricsReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        MetricsReport {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            delta1: v[4],
            delta2: v[5],
            delta3: v[6],
        }
    }

    /// Unweighted mean over images.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::invalid("no reports to average"));
        }
        let mut acc = [0.0; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Ok(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }

    pub fn csv_header() -> String {
        format!("image,{}", COLUMNS.join(","))
    }

    pub fn csv_row(&self, label: &str) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| v.to_string()).collect();
        format!("{label},{}", vals.join(","))
    }
}

/// Aligned text table, one row per `(label, report)`.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<label_w$}", "");
    for h in TABLE_HEADERS {
        let _ = write!(out, " {h:>10}");
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for v in r.values() {
            let _ = write!(out, " {v:>10.3}");
        }
        out.push('\n');
    }
    out
}

/// Lower middle element for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

fn check_lengths(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::shape(
            "metrics",
            format!("pred {}, gt {}, mask {}", pred.len(), gt.len(), valid.len()),
        ));
    }
    Ok(())
}

/// Pixels with ground truth inside `range`.
pub fn valid_mask(gt: &[f64], range: DepthRange) -> Vec<bool> {
    gt.iter()
        .map(|&g| g >= range.d_min && g <= range.d_max)
        .collect()
}

/// Multiplies `pred` by `median(gt[valid]) / median(pred[valid])`.
pub fn median_scale(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<(Vec<f64>, f64)> {
    check_lengths(pred, gt, valid)?;
    let pick = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(valid)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect()
    };
    let mp = median(&pick(pred))?;
    let mg = median(&pick(gt))?;
    if !(mp > 0.0 && mp.is_finite()) {
        return Err(Error::invalid(format!(
            "prediction median {mp} is not positive"
        )));
    }
    let factor = mg / mp;
    Ok((pred.iter().map(|p| p * factor).collect(), factor))
}

/// Metrics over valid pixels after clamping `pred` to `range`.
pub fn compute_metrics(
    pred: &[f64],
    gt: &[f64],
    valid: &[bool],
    range: DepthRange,
) -> Result<MetricsReport> {
    check_lengths(pred, gt, valid)?;
    range.validate()?;
    let mut acc = [0.0; 7];
    let mut n = 0usize;
    for ((&p, &g), _) in pred.iter().zip(gt).zip(valid).filter(|(_, &m)| m) {
        if !(g > 0.0) {
            return Err(Error::invalid(format!(
                "non-positive ground truth {g} inside the mask"
            )));
        }
        if p.is_nan() {
            return Err(Error::invalid("NaN prediction inside the mask"));
        }
        let p = range.clamp(p);
        let e = p - g;
        let ratio = (p / g).max(g / p);
        acc[0] += e.abs() / g;
        acc[1] += e * e / g;
        acc[2] += e * e;
        acc[3] += (p.ln() - g.ln()).powi(2);
        acc[4] += f64::from(u8::from(ratio < 1.25));
        acc[5] += f64::from(u8::from(ratio < 1.25f64.powi(2)));
        acc[6] += f64::from(u8::from(ratio < 1.25f64.powi(3)));
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no valid pixels"));
    }
    let m = acc.map(|a| a / n as f64);
    Ok(MetricsReport {
        abs_rel: m[0],
        sq_rel: m[1],
        rmse: m[2].sqrt(),
        rmse_log: m[3].sqrt(),
        delta1: m[4],
        delta2: m[5],
        delta3: m[6],
    })
}

/// Median scaling followed by [`compute_metrics`], with the mask taken from
/// ground truth inside `range`.
pub fn evaluate_depth(pred: &[f64], gt: &[f64], range: DepthRange) -> Result<MetricsReport> {
    let valid = valid_mask(gt, range);
    let (scaled, _) = median_scale(pred, gt, &valid)?;
    compute_metrics(&scaled, gt, &valid, range)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn r() -> DepthRange {
        DepthRange::default()
    }

    #[test]
    fn identical_is_perfect() {
        let gt: Vec<f64> = (1..=20).map(f64::from).collect();
        let m = compute_metrics(&gt, &gt, &[true; 20], r()).unwrap();
        assert_eq!(m.values(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_twenty_percent_over() {
        let gt: Vec<f64> = (1..=20).map(f64::from).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * 1.2).collect();
        let m = compute_metrics(&pred, &gt, &[true; 20], r()).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!(m.delta1, 1.0);
    }

    #[test]
    fn median_scaling_recovers_gt() {
        let gt = [3.0, 1.5, 7.25, 0.5];
        let pred: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
        let (s, f) = median_scale(&pred, &gt, &[true; 4]).unwrap();
        assert_eq!(f, 0.5);
        assert_eq!(s, gt);
        assert_eq!(median_scale(&gt, &gt, &[true; 4]).unwrap().1, 1.0);
        assert!(median_scale(&gt, &gt, &[false; 4]).is_err());
    }

    #[test]
    fn median_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 1..30 {
            let v: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..10.0)).collect();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected = if len % 2 == 1 {
                sorted[len / 2]
            } else {
                sorted[len / 2 - 1]
            };
            assert_eq!(median(&v).unwrap(), expected);
        }
    }

    #[test]
    fn clamps_prediction() {
        let range = DepthRange::new(1.0, 10.0).unwrap();
        let m = compute_metrics(&[100.0], &[10.0], &[true], range).unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn bad_ground_truth_rejected() {
        assert!(compute_metrics(&[1.0], &[0.0], &[true], r()).is_err());
        assert!(compute_metrics(&[1.0], &[0.0], &[false], r()).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0], &[true], r()).is_err());
    }

    #[test]
    fn permutation_invariant_and_deltas_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..50.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.gen_range(0.5..2.0)).collect();
        let a = compute_metrics(&pred, &gt, &[true; 64], r()).unwrap();
        let mut idx: Vec<usize> = (0..64).collect();
        idx.reverse();
        idx.swap(3, 40);
        let p2: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let g2: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
        let b = compute_metrics(&p2, &g2, &[true; 64], r()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3);
    }

    #[test]
    fn table_columns_in_order() {
        let t = format_table(&[("mean".into(), MetricsReport::default())]);
        let header = t.lines().next().unwrap();
        let pos: Vec<usize> = TABLE_HEADERS
            .iter()
            .map(|h| header.find(h).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            MetricsReport::csv_header(),
            "image,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3"
        );
    }
}
