//! Classification and localization metrics, and box extraction from heatmaps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stn::{self, BBoxParams, WarpParams};
use crate::tensor::Tensor;

/// IoU thresholds at which a predicted box counts as a hit (strictly above).
pub const IOU_THRESHOLDS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// Heatmap band kept after normalizing to `0..=255`, inclusive.
pub const HEATMAP_BAND: (f64, f64) = (60.0, 180.0);

/// Rows are truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    /// Support-weighted mean of the per-class F1 scores.
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_report(truth: &[usize], pred: &[usize], classes: usize) -> Result<ClassificationReport> {
    if truth.is_empty() {
        return Err(Error::Usage("f1_report needs at least one sample".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::Usage(format!(
            "{} truths vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Label(format!(
                "label pair ({t}, {p}) out of range for {classes} classes"
            )));
        }
        confusion.counts[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut weighted = 0.0;
    for c in 0..classes {
        let tp = confusion.counts[c][c];
        let support: usize = confusion.counts[c].iter().sum();
        let predicted: usize = confusion.counts.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += support as f64 * f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    let correct: usize = (0..classes).map(|c| confusion.counts[c][c]).sum();
    Ok(ClassificationReport {
        per_class,
        weighted_f1: weighted / truth.len() as f64,
        accuracy: ratio(correct, truth.len()),
        confusion,
    })
}

/// Intersection over union of two axis-aligned squares.
pub fn iou(a: &BBoxParams, b: &BBoxParams) -> f64 {
    let (ar0, ar1, ac0, ac1) = a.extent();
    let (br0, br1, bc0, bc1) = b.extent();
    let h = (ar1.min(br1) - ar0.max(br0)).max(0.0);
    let w = (ac1.min(bc1) - ac0.max(bc0)).max(0.0);
    let inter = h * w;
    let union = (ar1 - ar0) * (ac1 - ac0) + (br1 - br0) * (bc1 - bc0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub map: f64,
    pub mean_iou: f64,
    /// IoU of every evaluated sample, in evaluation order.
    pub ious: Vec<f64>,
    /// Samples whose heatmap was constant or had no in-band pixels.
    pub degenerate: usize,
}

/// Per-threshold hit rate `#{IoU > T} / N` and its mean over [`IOU_THRESHOLDS`].
pub fn map_score(ious: &[f64]) -> Result<(Vec<f64>, f64)> {
    if ious.is_empty() {
        return Err(Error::Usage("map_score needs at least one IoU".into()));
    }
    let n = ious.len() as f64;
    let ap: Vec<f64> = IOU_THRESHOLDS
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v > t).count() as f64 / n)
        .collect();
    let map = ap.iter().sum::<f64>() / ap.len() as f64;
    Ok((ap, map))
}

pub fn localization_report(ious: Vec<f64>, degenerate: usize) -> Result<LocalizationReport> {
    let (ap, map) = map_score(&ious)?;
    Ok(LocalizationReport {
        thresholds: IOU_THRESHOLDS.to_vec(),
        ap,
        map,
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        ious,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBox {
    pub bbox: BBoxParams,
    /// Set when the map carried no usable signal and the full image was returned.
    pub degenerate: bool,
}

/// Box from a single-channel `h×w` heatmap: resize to the target size,
/// stretch to `0..=255`, keep the inclusive band, then take the square
/// covering every kept pixel.
pub fn heatmap_to_bbox(
    map: &[f64],
    h: usize,
    w: usize,
    target_h: usize,
    target_w: usize,
) -> Result<HeatmapBox> {
    if map.is_empty() || map.len() != h * w {
        return Err(Error::dim(
            "heatmap_to_bbox",
            format!("{} values for a {h}×{w} map", map.len()),
        ));
    }
    if target_h < 2 || target_w < 2 {
        return Err(Error::Config(format!(
            "target size {target_h}×{target_w} too small"
        )));
    }
    let degenerate = HeatmapBox {
        bbox: BBoxParams::FULL,
        degenerate: true,
    };
    let (lo, hi) = min_max(map);
    if lo == hi || h < 2 || w < 2 {
        return Ok(degenerate);
    }
    let src = Tensor::new(vec![1, h, w], map.to_vec())?;
    let resized = stn::resize(&src, target_h, target_w)?;
    let (lo, hi) = min_max(resized.data());
    if lo == hi {
        return Ok(degenerate);
    }
    let (band_lo, band_hi) = HEATMAP_BAND;
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    for (i, &v) in resized.data().iter().enumerate() {
        let v = 255.0 * (v - lo) / (hi - lo);
        if (band_lo..=band_hi).contains(&v) {
            let (r, c) = (i / target_w, i % target_w);
            rows = (rows.0.min(r), rows.1.max(r));
            cols = (cols.0.min(c), cols.1.max(c));
        }
    }
    if rows.0 == usize::MAX {
        return Ok(degenerate);
    }
    Ok(HeatmapBox {
        bbox: pixel_box(rows, cols, target_h, target_w),
        degenerate: false,
    })
}

/// Square covering pixel rows `r0..=r1` and columns `c0..=c1` (each pixel
/// spanning half a pixel either side of its centre), in normalized
/// coordinates.
pub fn pixel_box(rows: (usize, usize), cols: (usize, usize), h: usize, w: usize) -> BBoxParams {
    let t_r = stn::lattice_coord(rows.0, h)
        + (stn::lattice_coord(rows.1, h) - stn::lattice_coord(rows.0, h)) / 2.0;
    let t_c = stn::lattice_coord(cols.0, w)
        + (stn::lattice_coord(cols.1, w) - stn::lattice_coord(cols.0, w)) / 2.0;
    let half_r = (rows.1 - rows.0 + 1) as f64 / (h - 1) as f64;
    let half_c = (cols.1 - cols.0 + 1) as f64 / (w - 1) as f64;
    BBoxParams::new(t_r, t_c, half_r.max(half_c))
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Box predicted by a transformer's warp, via the corner hull.
pub fn ustn_bbox(params: &WarpParams) -> Result<BBoxParams> {
    stn::params_to_bbox(params)
}

/// Metrics for one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub class_names: Vec<String>,
    pub samples: usize,
    pub classification: Option<ClassificationReport>,
    pub localization: Option<LocalizationReport>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn table(&self) -> String {
        compare_table(std::slice::from_ref(self))
    }
}

/// Aligned text grid with one row per report: per-class F1 columns, the
/// weighted average, then the localization columns when any report has them.
pub fn compare_table(reports: &[MetricsReport]) -> String {
    let names: Vec<String> = reports
        .iter()
        .max_by_key(|r| r.class_names.len())
        .map(|r| r.class_names.clone())
        .unwrap_or_default();
    let with_loc = reports.iter().any(|r| r.localization.is_some());
    let mut header: Vec<String> = vec!["Model".into()];
    header.extend(names.iter().cloned());
    header.push("Avg.".into());
    if with_loc {
        header.extend(IOU_THRESHOLDS.iter().map(|t| format!("AP@{t}")));
        header.push("mAP".into());
    }
    let dash = || "-".to_string();
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.name.clone()];
        match &r.classification {
            Some(c) => {
                row.extend((0..names.len()).map(|i| {
                    c.per_class
                        .get(i)
                        .map_or_else(dash, |m| format!("{:.3}", m.f1))
                }));
                row.push(format!("{:.3}", c.weighted_f1));
            }
            None => row.extend(std::iter::repeat_with(dash).take(names.len() + 1)),
        }
        if with_loc {
            match &r.localization {
                Some(l) => {
                    row.extend(l.ap.iter().map(|v| format!("{v:.3}")));
                    row.push(format!("{:.3}", l.map));
                }
                None => row.extend(std::iter::repeat_with(dash).take(IOU_THRESHOLDS.len() + 1)),
            }
        }
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (j, cell) in row.iter().enumerate() {
            if j == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[j]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[j]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f1_examples() {
        let r = f1_report(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0));
        assert_eq!(r.weighted_f1, 1.0);

        let r = f1_report(&[0, 0, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.per_class[0].f1 - 0.8).abs() < 1e-15);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.weighted_f1 - (3.0 * 0.8 + 2.0 / 3.0) / 4.0).abs() < 1e-15);

        let r3 = f1_report(&[0, 0, 0, 1], &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(r3.per_class[2].support, 0);
        assert_eq!(r3.weighted_f1, r.weighted_f1);
        assert!(matches!(f1_report(&[], &[], 2), Err(Error::Usage(_))));
    }

    #[test]
    fn iou_examples() {
        let a = BBoxParams::new(0.0, 0.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBoxParams::new(5.0, 5.0, 1.0)), 0.0);
        let b = BBoxParams::new(1.0, 1.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_score(&[1.0; 4]).unwrap().1, 1.0);
        let (ap, m) = map_score(&[0.6; 3]).unwrap();
        assert_eq!(ap, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!((m - 0.6).abs() < 1e-15);
        let (ap, _) = map_score(&[0.5]).unwrap();
        assert_eq!(ap[2], 0.0);
        assert!(map_score(&[]).is_err());
    }

    #[test]
    fn constant_heatmap_is_degenerate() {
        let hb = heatmap_to_bbox(&[0.3; 16], 4, 4, 8, 8).unwrap();
        assert!(hb.degenerate);
        assert_eq!(hb.bbox, BBoxParams::FULL);
    }

    #[test]
    fn blob_box_at_target_resolution() {
        // 8×8 map, resized to itself: identity resize, so the band is read directly.
        let mut map = vec![0.0; 64];
        map[63] = 1.0;
        for (r, c) in [(2, 3), (3, 3), (3, 4), (4, 3)] {
            map[r * 8 + c] = 0.5;
        }
        let hb = heatmap_to_bbox(&map, 8, 8, 8, 8).unwrap();
        assert!(!hb.degenerate);
        let expected = pixel_box((2, 4), (3, 4), 8, 8);
        assert_eq!(hb.bbox, expected);
        let unit = 2.0 / 7.0;
        assert!((hb.bbox.t_r - (-1.0 + 3.0 * unit)).abs() < 1e-12);
        assert!((hb.bbox.s - 1.5 * unit).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_union() {
        let mut map = vec![0.0; 64];
        map[0] = 1.0;
        map[8 + 1] = 0.5;
        map[6 * 8 + 6] = 0.5;
        let hb = heatmap_to_bbox(&map, 8, 8, 8, 8).unwrap();
        assert_eq!(hb.bbox, pixel_box((1, 6), (1, 6), 8, 8));
    }

    #[test]
    fn table_layout() {
        let c = f1_report(&[0, 1], &[0, 1], 2).unwrap();
        let r = MetricsReport {
            name: "ubm".into(),
            class_names: vec!["fracture".into(), "normal".into()],
            samples: 2,
            classification: Some(c),
            localization: None,
        };
        let t = r.table();
        let header = t.lines().next().unwrap();
        assert!(header.ends_with("Avg."));
        assert!(header.contains("fracture"));
        assert!(t.lines().nth(1).unwrap().starts_with("ubm"));
    }

    proptest! {
        #[test]
        fn iou_properties(a in (-1.0f64..1.0, -1.0f64..1.0, 0.01f64..1.0), b in (-1.0f64..1.0, -1.0f64..1.0, 0.01f64..1.0)) {
            let a = BBoxParams::new(a.0, a.1, a.2);
            let b = BBoxParams::new(b.0, b.1, b.2);
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn map_monotone(ious in prop::collection::vec(0.0f64..1.0, 1..20), i in 0usize..20, bump in 0.0f64..1.0) {
            let (_, before) = map_score(&ious).unwrap();
            let mut up = ious.clone();
            let k = i % up.len();
            up[k] = (up[k] + bump).min(1.0);
            let (_, after) = map_score(&up).unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn heatmap_affine_invariance(vals in prop::collection::vec(0.0f64..1.0, 16), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let a = heatmap_to_bbox(&vals, 4, 4, 16, 16).unwrap();
            let moved: Vec<f64> = vals.iter().map(|v| v * scale + shift).collect();
            let b = heatmap_to_bbox(&moved, 4, 4, 16, 16).unwrap();
            if !a.degenerate {
                prop_assert_eq!(a.degenerate, b.degenerate);
                let d = (a.bbox.t_r - b.bbox.t_r).abs() + (a.bbox.t_c - b.bbox.t_c).abs() + (a.bbox.s - b.bbox.s).abs();
                // band edges can flip a pixel under roundoff, so compare to one pixel
                prop_assert!(d < 0.5, "{:?} vs {:?}", a, b);
            }
        }
    }
}
