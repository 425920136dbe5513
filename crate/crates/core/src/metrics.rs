//! Overlap and distance metrics over the evaluation regions, plus the cohort
//! summary table.
//!
//! Degenerate inputs never produce NaN. Rates with a zero denominator return
//! 1.0 together with a flag, and the Hausdorff distance of an empty mask is
//! the `undefined` sentinel, which cohort statistics skip and count.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::SegVolume;

/// Evaluation regions in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalRegion {
    /// Enhancing tumor, label 4.
    Et,
    /// Whole tumor, labels 1, 2 and 4.
    Wt,
    /// Tumor core, labels 1 and 4.
    Tc,
}

impl EvalRegion {
    pub const ALL: [EvalRegion; 3] = [EvalRegion::Et, EvalRegion::Wt, EvalRegion::Tc];

    pub fn name(self) -> &'static str {
        match self {
            EvalRegion::Et => "ET",
            EvalRegion::Wt => "WT",
            EvalRegion::Tc => "TC",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            EvalRegion::Et => label == 4,
            EvalRegion::Wt => matches!(label, 1 | 2 | 4),
            EvalRegion::Tc => matches!(label, 1 | 4),
        }
    }
}

impl fmt::Display for EvalRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Masks for ET, WT and TC, in [`EvalRegion::ALL`] order.
pub fn derive_regions(labels: &[u8]) -> [Vec<u8>; 3] {
    EvalRegion::ALL.map(|r| labels.iter().map(|&l| u8::from(r.contains(l))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::ExtentMismatch { op: "confusion", left: vec![pred.len()], right: vec![truth.len()] });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A ratio in [0, 1]; `degenerate` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Rate {
    if den == 0 {
        Rate { value: 1.0, degenerate: true }
    } else {
        Rate { value: num as f64 / den as f64, degenerate: false }
    }
}

/// `2TP / (2TP + FP + FN)`; both masks empty gives 1.0, flagged.
pub fn dice(c: &ConfusionCounts) -> Rate {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> Rate {
    ratio(c.tp, c.tp + c.fn_)
}

/// `TN / (TN + FP)`.
pub fn specificity(c: &ConfusionCounts) -> Rate {
    ratio(c.tn, c.tn + c.fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffMode {
    /// Maximum of the two directed max-min distances.
    #[default]
    Exact,
    /// Larger of the two directed 95th-percentile distances (type-7 quantile
    /// over every voxel of the source mask).
    Percentile95,
}

struct Grid {
    shape: [usize; 3],
    /// Physical size of one step along `[z, y, x]`.
    step: [f64; 3],
}

impl Grid {
    fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.shape;
        [i / (h * w), (i / w) % h, i % w]
    }

    fn dist2(&self, a: [usize; 3], b: [usize; 3]) -> f64 {
        (0..3)
            .map(|k| {
                let d = (a[k] as f64 - b[k] as f64) * self.step[k];
                d * d
            })
            .sum()
    }

    /// Voxels of `mask` with a 6-neighbour outside the mask or the grid. The
    /// nearest mask voxel to any point outside the mask is one of these.
    fn boundary(&self, mask: &[u8]) -> Vec<[usize; 3]> {
        let [d, h, w] = self.shape;
        let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x] != 0;
        let mut out = Vec::new();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
            let [z, y, x] = self.coords(i);
            let interior = z > 0
                && z + 1 < d
                && y > 0
                && y + 1 < h
                && x > 0
                && x + 1 < w
                && at(z - 1, y, x)
                && at(z + 1, y, x)
                && at(z, y - 1, x)
                && at(z, y + 1, x)
                && at(z, y, x - 1)
                && at(z, y, x + 1);
            if !interior {
                out.push([z, y, x]);
            }
        }
        out
    }

    fn nearest2(&self, p: [usize; 3], targets: &[[usize; 3]], stop_below: f64) -> f64 {
        let mut best = f64::INFINITY;
        for &t in targets {
            let d = self.dist2(p, t);
            if d < best {
                best = d;
                if best <= stop_below {
                    break;
                }
            }
        }
        best
    }

    /// `max_{x in from} min_{y in to} |x - y|`, squared.
    fn directed_max2(&self, from: &[u8], to: &[u8], to_boundary: &[[usize; 3]]) -> f64 {
        let mut worst = 0.0f64;
        for (i, _) in from.iter().enumerate().filter(|(i, &m)| m != 0 && to[*i] == 0) {
            // Stop scanning as soon as this point cannot raise the maximum.
            worst = worst.max(self.nearest2(self.coords(i), to_boundary, worst));
        }
        worst
    }

    fn directed_all(&self, from: &[u8], to: &[u8], to_boundary: &[[usize; 3]]) -> Vec<f64> {
        from.iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| if to[i] != 0 { 0.0 } else { self.nearest2(self.coords(i), to_boundary, 0.0).sqrt() })
            .collect()
    }
}

/// Symmetric Hausdorff distance between two masks on a `[D, H, W]` grid.
///
/// `spacing_zyx` gives the physical voxel size along depth, height and width.
pub fn hausdorff(x: &[u8], y: &[u8], shape: [usize; 3], spacing_zyx: [f64; 3], mode: HausdorffMode) -> Result<f64> {
    let n: usize = shape.iter().product();
    if x.len() != n || y.len() != n {
        return Err(Error::ExtentMismatch { op: "hausdorff", left: vec![x.len(), y.len()], right: shape.to_vec() });
    }
    if !x.iter().any(|&v| v != 0) {
        return Err(Error::EmptyMask("first"));
    }
    if !y.iter().any(|&v| v != 0) {
        return Err(Error::EmptyMask("second"));
    }
    let grid = Grid { shape, step: spacing_zyx };
    let (bx, by) = (grid.boundary(x), grid.boundary(y));
    match mode {
        HausdorffMode::Exact => Ok(grid.directed_max2(x, y, &by).max(grid.directed_max2(y, x, &bx)).sqrt()),
        HausdorffMode::Percentile95 => {
            let q = |mut d: Vec<f64>| {
                d.sort_by(f64::total_cmp);
                quantile_sorted(&d, 0.95)
            };
            Ok(q(grid.directed_all(x, y, &by)).max(q(grid.directed_all(y, x, &bx))))
        }
    }
}

/// Hausdorff value for reports; `Undefined` when either mask is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HausdorffValue {
    Value(f64),
    Undefined,
}

impl HausdorffValue {
    pub fn value(self) -> Option<f64> {
        match self {
            HausdorffValue::Value(v) => Some(v),
            HausdorffValue::Undefined => None,
        }
    }
}

impl fmt::Display for HausdorffValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HausdorffValue::Value(v) => write!(f, "{v}"),
            HausdorffValue::Undefined => f.write_str("undefined"),
        }
    }
}

/// Type-7 quantile of an ascending, nonempty slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std_dev: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Row labels of the cohort table, in order.
pub const SUMMARY_ROWS: [&str; 5] = ["Mean", "Std. Dev.", "Median", "25 Quantile", "75 Quantile"];

impl Summary {
    pub fn rows(&self) -> [f64; 5] {
        [self.mean, self.std_dev, self.median, self.q25, self.q75]
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("summary values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("summarize", "values must be finite"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_dev = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean,
        std_dev,
        median: quantile_sorted(&sorted, 0.5),
        q25: quantile_sorted(&sorted, 0.25),
        q75: quantile_sorted(&sorted, 0.75),
    })
}

/// Metrics of one case and one region.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub region: EvalRegion,
    pub counts: ConfusionCounts,
    pub dice: Rate,
    pub sensitivity: Rate,
    pub specificity: Rate,
    pub hausdorff: HausdorffValue,
}

impl CaseMetrics {
    /// Names of the degenerate conditions met by this row.
    pub fn flags(&self) -> Vec<&'static str> {
        let mut f = Vec::new();
        if self.dice.degenerate {
            f.push("dice_both_empty");
        }
        if self.sensitivity.degenerate {
            f.push("sn_no_positives");
        }
        if self.specificity.degenerate {
            f.push("sp_no_negatives");
        }
        if self.hausdorff == HausdorffValue::Undefined {
            f.push("hd_empty_mask");
        }
        f
    }
}

/// Evaluates ET, WT and TC of one predicted label volume against the truth.
/// Distances use the truth volume's spacing.
pub fn evaluate_case(pred: &SegVolume, truth: &SegVolume, mode: HausdorffMode) -> Result<Vec<CaseMetrics>> {
    if pred.shape != truth.shape {
        return Err(Error::ExtentMismatch { op: "evaluate_case", left: pred.shape.to_vec(), right: truth.shape.to_vec() });
    }
    let [sx, sy, sz] = truth.spacing();
    let p = derive_regions(pred.labels());
    let t = derive_regions(truth.labels());
    EvalRegion::ALL
        .iter()
        .enumerate()
        .map(|(k, &region)| {
            let counts = confusion(&p[k], &t[k])?;
            let hausdorff = match hausdorff(&p[k], &t[k], truth.shape, [sz, sy, sx], mode) {
                Ok(v) => HausdorffValue::Value(v),
                Err(Error::EmptyMask(_)) => HausdorffValue::Undefined,
                Err(e) => return Err(e),
            };
            Ok(CaseMetrics {
                case_id: truth.id.clone(),
                region,
                counts,
                dice: dice(&counts),
                sensitivity: sensitivity(&counts),
                specificity: specificity(&counts),
                hausdorff,
            })
        })
        .collect()
}

pub const METRIC_NAMES: [&str; 4] = ["dice", "sensitivity", "specificity", "hausdorff"];

/// Cohort table: one column per (metric, region), five statistic rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    /// `(metric, region, summary or None when no value was usable, excluded count)`.
    pub columns: Vec<(&'static str, EvalRegion, Option<Summary>, usize)>,
}

pub fn summarize_cohort(cases: &[CaseMetrics]) -> Result<CohortSummary> {
    if cases.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let mut columns = Vec::new();
    for metric in METRIC_NAMES {
        for region in EvalRegion::ALL {
            let rows = cases.iter().filter(|c| c.region == region);
            let values: Vec<Option<f64>> = rows
                .map(|c| match metric {
                    "dice" => Some(c.dice.value),
                    "sensitivity" => Some(c.sensitivity.value),
                    "specificity" => Some(c.specificity.value),
                    _ => c.hausdorff.value(),
                })
                .collect();
            let usable: Vec<f64> = values.iter().flatten().copied().collect();
            let excluded = values.len() - usable.len();
            let summary = if usable.is_empty() { None } else { Some(summarize(&usable)?) };
            columns.push((metric, region, summary, excluded));
        }
    }
    Ok(CohortSummary { columns })
}

impl CohortSummary {
    pub fn get(&self, metric: &str, region: EvalRegion) -> Option<&Summary> {
        self.columns.iter().find(|c| c.0 == metric && c.1 == region).and_then(|c| c.2.as_ref())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("statistic");
        for (metric, region, _, _) in &self.columns {
            let _ = write!(out, ",{metric}_{region}");
        }
        out.push('\n');
        for (row, label) in SUMMARY_ROWS.iter().enumerate() {
            out.push_str(label);
            for (_, _, summary, _) in &self.columns {
                match summary {
                    Some(s) => {
                        let _ = write!(out, ",{}", s.rows()[row]);
                    }
                    None => out.push_str(",undefined"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Sidecar listing how many cases each column skipped.
    pub fn exclusions_csv(&self) -> String {
        let mut out = String::from("metric,region,excluded\n");
        for (metric, region, _, excluded) in &self.columns {
            let _ = writeln!(out, "{metric},{region},{excluded}");
        }
        out
    }
}

pub const CASE_CSV_HEADER: &str = "case_id,region,dice,sensitivity,specificity,hausdorff,degenerate_flags";

pub fn cases_csv(cases: &[CaseMetrics]) -> String {
    let mut out = format!("{CASE_CSV_HEADER}\n");
    for c in cases {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.case_id,
            c.region,
            c.dice.value,
            c.sensitivity.value,
            c.specificity.value,
            c.hausdorff,
            c.flags().join(";")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(points: &[[usize; 3]], shape: [usize; 3]) -> Vec<u8> {
        let mut m = vec![0u8; shape.iter().product()];
        for p in points {
            m[(p[0] * shape[1] + p[1]) * shape[2] + p[2]] = 1;
        }
        m
    }

    #[test]
    fn regions_of_each_label() {
        assert_eq!(derive_regions(&[0, 1, 2, 4]), [vec![0, 0, 0, 1], vec![0, 1, 1, 1], vec![0, 1, 0, 1]]);
    }

    #[test]
    fn rates_by_hand() {
        let c = ConfusionCounts { tp: 3, fp: 1, tn: 9, fn_: 1 };
        assert_eq!(sensitivity(&c).value, 0.75);
        assert_eq!(specificity(&c).value, 0.9);
        let half = confusion(&[1, 1, 0, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(dice(&half).value, 0.5);
        let empty = confusion(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(dice(&empty), Rate { value: 1.0, degenerate: true });
        assert_eq!(sensitivity(&empty), Rate { value: 1.0, degenerate: true });
    }

    #[test]
    fn three_four_five() {
        let shape = [1, 4, 5];
        let d = hausdorff(&grid(&[[0, 0, 0]], shape), &grid(&[[0, 3, 4]], shape), shape, [1.0; 3], HausdorffMode::Exact);
        assert_eq!(d.unwrap(), 5.0);
    }

    #[test]
    fn anisotropic_spacing_scales_axes() {
        let shape = [3, 1, 1];
        let d = hausdorff(&grid(&[[0, 0, 0]], shape), &grid(&[[2, 0, 0]], shape), shape, [2.5, 1.0, 1.0], HausdorffMode::Exact);
        assert_eq!(d.unwrap(), 5.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let shape = [1, 2, 2];
        let e = hausdorff(&[0; 4], &grid(&[[0, 0, 0]], shape), shape, [1.0; 3], HausdorffMode::Exact);
        assert!(matches!(e, Err(Error::EmptyMask(_))));
    }

    #[test]
    fn percentile_mode_ignores_a_single_outlier() {
        let shape = [1, 1, 40];
        let truth: Vec<[usize; 3]> = (0..20).map(|x| [0, 0, x]).collect();
        let mut pred = truth.clone();
        pred.push([0, 0, 39]);
        let (p, t) = (grid(&pred, shape), grid(&truth, shape));
        assert_eq!(hausdorff(&p, &t, shape, [1.0; 3], HausdorffMode::Exact).unwrap(), 20.0);
        assert!(hausdorff(&p, &t, shape, [1.0; 3], HausdorffMode::Percentile95).unwrap() < 20.0);
    }

    #[test]
    fn summary_by_hand() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.mean, s.median, s.q25, s.q75), (3.0, 3.0, 2.0, 4.0));
        assert!((s.std_dev - 2.5f64.sqrt()).abs() < 1e-15);
        let c = summarize(&[7.0; 4]).unwrap();
        assert_eq!(c.rows(), [7.0, 0.0, 7.0, 7.0, 7.0]);
        assert_eq!(summarize(&[2.0]).unwrap().std_dev, 0.0);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let seg = SegVolume::new("c", [2, 2, 2], vec![0, 1, 2, 4, 4, 1, 0, 0], [1.0; 3]).unwrap();
        let rows = evaluate_case(&seg, &seg, HausdorffMode::Exact).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.dice.value, 1.0);
            assert_eq!(r.hausdorff, HausdorffValue::Value(0.0));
            assert!(r.flags().is_empty());
        }
    }

    #[test]
    fn undefined_hausdorff_is_excluded_and_counted() {
        let truth = SegVolume::new("a", [1, 1, 4], vec![0, 2, 2, 0], [1.0; 3]).unwrap();
        let pred = SegVolume::new("a", [1, 1, 4], vec![0, 2, 0, 0], [1.0; 3]).unwrap();
        let rows = evaluate_case(&pred, &truth, HausdorffMode::Exact).unwrap();
        let et = rows.iter().find(|r| r.region == EvalRegion::Et).unwrap();
        assert_eq!(et.hausdorff, HausdorffValue::Undefined);
        assert!(et.flags().contains(&"hd_empty_mask"));
        let cohort = summarize_cohort(&rows).unwrap();
        assert!(cohort.get("hausdorff", EvalRegion::Et).is_none());
        assert_eq!(cohort.get("hausdorff", EvalRegion::Wt).unwrap().mean, 1.0);
        let csv = cohort.to_csv();
        assert!(csv.lines().nth(1).unwrap().contains("undefined"));
        assert!(cohort.exclusions_csv().contains("hausdorff,ET,1"));
        assert!(cases_csv(&rows).contains(",undefined,"));
    }
}
