//! Evaluation tables and static overlay figures.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{derive_region_masks, LabelVolume, Region};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_region, RegionScores};
use crate::triplanar::{label_slice, Plane};

/// Metrics of one region of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetricsRow {
    pub case_id: String,
    pub region: Region,
    pub dsc: f64,
    pub hd95: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

/// Mean metrics of one region over all cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub region: Region,
    pub dsc: f64,
    pub hd95: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

/// WT, TC and ET scores of a predicted labelling against ground truth.
pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
) -> Result<Vec<CaseMetricsRow>> {
    let (p, g) = (derive_region_masks(pred)?, derive_region_masks(gt)?);
    Region::ALL
        .iter()
        .map(|&region| {
            let RegionScores {
                dsc,
                hd95,
                sensitivity,
                specificity,
            } = evaluate_region(p.get(region), g.get(region))?;
            Ok(CaseMetricsRow {
                case_id: case_id.to_string(),
                region,
                dsc,
                hd95,
                specificity,
                sensitivity,
            })
        })
        .collect()
}

/// Per-region means in the order WT, TC, ET.
pub fn summarize(rows: &[CaseMetricsRow]) -> Vec<SummaryRow> {
    Region::ALL
        .iter()
        .map(|&region| {
            let sel: Vec<_> = rows.iter().filter(|r| r.region == region).collect();
            let n = sel.len().max(1) as f64;
            let mean = |f: fn(&CaseMetricsRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                region,
                dsc: mean(|r| r.dsc),
                hd95: mean(|r| r.hd95),
                specificity: mean(|r| r.specificity),
                sensitivity: mean(|r| r.sensitivity),
            }
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed-width text rendering of the summary.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<6}{:>10}{:>10}{:>13}{:>13}\n",
        "region", "dsc", "hd95", "specificity", "sensitivity"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6}{:>10.4}{:>10.4}{:>13.4}{:>13.4}",
            r.region.to_string(),
            r.dsc,
            r.hd95,
            r.specificity,
            r.sensitivity
        );
    }
    s
}

/// Overlay color of a canonical label; background is left unpainted.
pub fn label_color(label: u8) -> Option<[u8; 3]> {
    match label {
        1 => Some([220, 40, 40]),
        2 => Some([40, 200, 60]),
        3 => Some([250, 220, 30]),
        _ => None,
    }
}

/// Slice index along `plane` with the most tumor voxels; the middle slice
/// when the volume has no tumor.
pub fn busiest_slice(labels: &Array3<u8>, plane: Plane) -> usize {
    let axis = Axis(plane.axis());
    let counts: Vec<usize> = labels
        .axis_iter(axis)
        .map(|s| s.iter().filter(|&&l| l != 0).count())
        .collect();
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 {
        counts.len() / 2
    } else {
        counts.iter().position(|&c| c == best).expect("max exists")
    }
}

/// Grayscale image slice with labels alpha-blended on top. Image x follows
/// the first in-plane axis; image y runs bottom to top along the second.
pub fn overlay(image: &Array2<f32>, labels: &Array2<u8>, alpha: f32) -> Result<RgbImage> {
    if image.dim() != labels.dim() {
        return Err(Error::shape(format!(
            "overlay image {:?} vs labels {:?}",
            image.dim(),
            labels.dim()
        )));
    }
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = image.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((i, j), &v) in image.indexed_iter() {
        let g = ((v - lo) / span).clamp(0.0, 1.0) * 255.0;
        let px = match label_color(labels[[i, j]]) {
            Some(c) => c.map(|c| (alpha * c as f32 + (1.0 - alpha) * g).round() as u8),
            None => [g.round() as u8; 3],
        };
        img.put_pixel(i as u32, (h - 1 - j) as u32, Rgb(px));
    }
    Ok(img)
}

/// Writes the overlay of `labels` on `image` at the busiest slice of
/// `plane` as a PNG.
pub fn write_overlay(
    path: &Path,
    image: &Array3<f32>,
    labels: &Array3<u8>,
    plane: Plane,
) -> Result<usize> {
    if image.dim() != labels.dim() {
        return Err(Error::GeometryMismatch(format!(
            "overlay image {:?} vs labels {:?}",
            image.dim(),
            labels.dim()
        )));
    }
    let idx = busiest_slice(labels, plane);
    let img = image.index_axis(Axis(plane.axis()), idx).to_owned();
    let lab = label_slice(labels, plane, idx);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    overlay(&img, &lab, 0.45)?.save(path)?;
    Ok(idx)
}

/// Ground-truth overlay (left) and prediction overlay (right) of the slice
/// of `plane` with the most ground-truth tumor.
pub fn write_comparison_overlay(
    path: &Path,
    image: &Array3<f32>,
    truth: &Array3<u8>,
    pred: &Array3<u8>,
    plane: Plane,
) -> Result<usize> {
    if image.dim() != truth.dim() || truth.dim() != pred.dim() {
        return Err(Error::GeometryMismatch(format!(
            "overlay image {:?}, truth {:?}, prediction {:?}",
            image.dim(),
            truth.dim(),
            pred.dim()
        )));
    }
    let idx = busiest_slice(truth, plane);
    let img = image.index_axis(Axis(plane.axis()), idx).to_owned();
    let left = overlay(&img, &label_slice(truth, plane, idx), 0.45)?;
    let right = overlay(&img, &label_slice(pred, plane, idx), 0.45)?;
    let (w, h) = left.dimensions();
    let mut panel = RgbImage::new(2 * w, h);
    image::imageops::replace(&mut panel, &left, 0, 0);
    image::imageops::replace(&mut panel, &right, w as i64, 0);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    panel.save(path)?;
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelConvention;

    fn vol(v: Array3<u8>) -> LabelVolume {
        LabelVolume::new(v, LabelConvention::Canonical).unwrap()
    }

    #[test]
    fn identity_evaluation() {
        let mut l = Array3::zeros((8, 8, 8));
        l.slice_mut(ndarray::s![2..6, 2..6, 2..6]).fill(2);
        l.slice_mut(ndarray::s![3..5, 3..5, 3..5]).fill(3);
        let rows = evaluate_case("a", &vol(l.clone()), &vol(l)).unwrap();
        let summary = summarize(&rows);
        assert_eq!(
            summary.iter().map(|r| r.region).collect::<Vec<_>>(),
            Region::ALL
        );
        for r in &summary {
            assert_eq!(
                (r.dsc, r.hd95, r.sensitivity, r.specificity),
                (1.0, 0.0, 1.0, 1.0)
            );
        }
        let text = format_summary(&summary);
        assert!(text.starts_with("region"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn overlay_colors_and_orientation() {
        let img = Array2::from_shape_fn((4, 3), |(i, _)| i as f32);
        let mut lab = Array2::zeros((4, 3));
        lab[[0, 0]] = 3;
        let out = overlay(&img, &lab, 1.0).unwrap();
        assert_eq!(out.dimensions(), (4, 3));
        assert_eq!(out.get_pixel(0, 2).0, [250, 220, 30]);
        assert_eq!(out.get_pixel(3, 0).0, [255; 3]);
        assert_eq!(out.get_pixel(0, 0).0, [0; 3]);
    }

    #[test]
    fn busiest_slice_picks_max() {
        let mut l = Array3::zeros((5, 5, 5));
        l[[1, 0, 0]] = 1;
        l[[3, 0, 0]] = 1;
        l[[3, 1, 0]] = 2;
        assert_eq!(busiest_slice(&l, Plane::Sagittal), 3);
        assert_eq!(busiest_slice(&Array3::zeros((5, 5, 5)), Plane::Axial), 2);
    }
}
