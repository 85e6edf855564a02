//! Precision and success curves over tracked sequences.

use std::path::Path;

use serde::Serialize;

use crate::bbox::BBox;
use crate::{Error, Result};

pub const SUCCESS_POINTS: usize = 101;
pub const PRECISION_MAX_PX: usize = 50;
pub const PRECISION_HEADLINE_PX: usize = 20;
/// Frame width the pixel thresholds are expressed in.
pub const REFERENCE_WIDTH: f64 = 640.0;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    /// Mean over thresholds.
    pub fn auc(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn scored_pairs<'a>(pred: &'a [BBox], gt: &'a [Option<BBox>]) -> Result<Vec<(&'a BBox, &'a BBox)>> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("{} predictions vs {} ground-truth frames", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).filter_map(|(p, g)| g.as_ref().map(|g| (p, g))).collect())
}

fn curve(thresholds: Vec<f64>, measures: &[f64], hit: impl Fn(f64, f64) -> bool) -> Curve {
    let values = thresholds
        .iter()
        .map(|&th| {
            if measures.is_empty() {
                0.0
            } else {
                measures.iter().filter(|&&m| hit(m, th)).count() as f64 / measures.len() as f64
            }
        })
        .collect();
    Curve { thresholds, values }
}

/// Fraction of present frames with IoU ≥ θ for θ = 0, 0.01, …, 1.
pub fn success_curve(pred: &[BBox], gt: &[Option<BBox>]) -> Result<Curve> {
    let ious: Vec<f64> = scored_pairs(pred, gt)?.iter().map(|(p, g)| p.iou(g)).collect();
    let thresholds = (0..SUCCESS_POINTS).map(|i| i as f64 / (SUCCESS_POINTS - 1) as f64).collect();
    Ok(curve(thresholds, &ious, |m, th| m >= th))
}

/// Fraction of present frames with centre distance ≤ d for d = 0..50 pixels,
/// each multiplied by `scale`.
pub fn precision_curve(pred: &[BBox], gt: &[Option<BBox>], scale: f64) -> Result<Curve> {
    let dists: Vec<f64> = scored_pairs(pred, gt)?.iter().map(|(p, g)| p.center_distance(g)).collect();
    let thresholds = (0..=PRECISION_MAX_PX).map(|d| d as f64 * scale).collect();
    Ok(curve(thresholds, &dists, |m, th| m <= th))
}

/// Pixel-threshold scale for frames of width `width`.
pub fn precision_scale(width: usize) -> f64 {
    width as f64 / REFERENCE_WIDTH
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub success_auc: f64,
    pub precision_at_20: f64,
}

/// Metrics for one sequence plus its curves.
pub fn evaluate_sequence(name: &str, pred: &[BBox], gt: &[Option<BBox>], width: usize) -> Result<(SequenceMetrics, Curve, Curve)> {
    let success = success_curve(pred, gt)?;
    let precision = precision_curve(pred, gt, precision_scale(width))?;
    let metrics = SequenceMetrics {
        name: name.to_string(),
        frames: gt.iter().filter(|g| g.is_some()).count(),
        success_auc: success.auc(),
        precision_at_20: precision.values[PRECISION_HEADLINE_PX],
    };
    Ok((metrics, success, precision))
}

/// Pointwise mean of equally sampled curves.
pub fn mean_curve(curves: &[Curve]) -> Option<Curve> {
    let first = curves.first()?;
    let n = curves.len() as f64;
    let values = (0..first.values.len())
        .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
        .collect();
    Some(Curve { thresholds: first.thresholds.clone(), values })
}

pub fn write_curve_csv(path: &Path, header: &str, curve: &Curve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([header, "value"])?;
    for (t, v) in curve.thresholds.iter().zip(&curve.values) {
        w.write_record([format!("{t:.4}"), format!("{v:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Whether the prediction overlaps the target with IoU ≥ `min_iou` in any
/// frame of `[reappear, reappear + window)` where the target is present.
pub fn reacquired(pred: &[BBox], gt: &[Option<BBox>], reappear: usize, window: usize, min_iou: f64) -> bool {
    (reappear..(reappear + window).min(pred.len()))
        .any(|t| gt[t].is_some_and(|g| pred[t].iou(&g) >= min_iou))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x && x < bx.right() && y >= bx.y && y < bx.bottom();
        let (mut inter, mut union) = (0usize, 0usize);
        // Quarter-pixel grid so half-integer boxes rasterise exactly.
        for yi in -40..80 {
            for xi in -40..80 {
                let (x, y) = (xi as f64 / 4.0 + 0.125, yi as f64 / 4.0 + 0.125);
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += usize::from(ia && ib);
                union += usize::from(ia || ib);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        // Centre-format (1,1,2,2) and (2,2,2,2).
        let c1 = BBox::from_center(1.0, 1.0, 2.0, 2.0);
        let c2 = BBox::from_center(2.0, 2.0, 2.0, 2.0);
        assert!((iou(&c1, &c2) - pixel_iou(&c1, &c2)).abs() < 1e-12);
        assert!((iou(&c1, &c2) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn success_examples() {
        let b = BBox::new(1.0, 1.0, 4.0, 4.0);
        let perfect = success_curve(&[b, b], &[Some(b), Some(b)]).unwrap();
        assert_eq!(perfect.auc(), 1.0);
        let far = BBox::new(20.0, 20.0, 4.0, 4.0);
        let disjoint = success_curve(&[far], &[Some(b)]).unwrap();
        assert_eq!(disjoint.values[0], 1.0);
        assert!(disjoint.values[1..].iter().all(|&v| v == 0.0));
        assert!(success_curve(&[b], &[]).is_err());
    }

    #[test]
    fn precision_examples() {
        let b = BBox::new(10.0, 10.0, 4.0, 4.0);
        let same = precision_curve(&[b], &[Some(b)], 1.0).unwrap();
        assert!(same.values.iter().all(|&v| v == 1.0));
        let shifted = BBox::new(20.0, 10.0, 4.0, 4.0);
        let step = precision_curve(&[shifted], &[Some(b)], 1.0).unwrap();
        for (d, &v) in step.values.iter().enumerate() {
            assert_eq!(v, if d >= 10 { 1.0 } else { 0.0 });
        }
        assert_eq!(precision_scale(64), 0.1);
    }

    #[test]
    fn absent_frames_are_ignored() {
        let b = BBox::new(1.0, 1.0, 4.0, 4.0);
        let far = BBox::new(30.0, 30.0, 4.0, 4.0);
        let c = success_curve(&[b, far], &[Some(b), None]).unwrap();
        assert_eq!(c.auc(), 1.0);
    }

    #[test]
    fn reacquisition_window() {
        let b = BBox::new(1.0, 1.0, 4.0, 4.0);
        let far = BBox::new(30.0, 30.0, 4.0, 4.0);
        let pred = vec![far, far, far, far, b];
        let gt = vec![Some(b); 5];
        assert!(reacquired(&pred, &gt, 1, 5, 0.5));
        assert!(!reacquired(&pred, &gt, 0, 4, 0.5));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..40.0, 0.0f64..40.0, 1.0f64..20.0, 1.0f64..20.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn curves_match_enumeration_and_are_monotone(
            pairs in prop::collection::vec((arb_box(), arb_box(), any::<bool>()), 1..30)
        ) {
            let pred: Vec<BBox> = pairs.iter().map(|p| p.0).collect();
            let gt: Vec<Option<BBox>> = pairs.iter().map(|p| p.2.then_some(p.1)).collect();
            let s = success_curve(&pred, &gt).unwrap();
            let p = precision_curve(&pred, &gt, 0.5).unwrap();
            let present: Vec<(BBox, BBox)> = pairs.iter().filter(|p| p.2).map(|p| (p.0, p.1)).collect();
            for (i, &th) in s.thresholds.iter().enumerate() {
                let want = if present.is_empty() { 0.0 } else {
                    present.iter().filter(|(a, b)| a.iou(b) >= th).count() as f64 / present.len() as f64
                };
                prop_assert_eq!(s.values[i], want);
            }
            for (i, &th) in p.thresholds.iter().enumerate() {
                let want = if present.is_empty() { 0.0 } else {
                    present.iter().filter(|(a, b)| a.center_distance(b) <= th).count() as f64 / present.len() as f64
                };
                prop_assert_eq!(p.values[i], want);
            }
            prop_assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(p.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((0.0..=1.0).contains(&s.auc()));
        }

        #[test]
        fn dominating_curve_has_larger_auc(a in prop::collection::vec(0.0f64..1.0, 101), d in prop::collection::vec(0.0f64..0.5, 101)) {
            let lo = Curve { thresholds: vec![0.0; 101], values: a.clone() };
            let hi = Curve { thresholds: vec![0.0; 101], values: a.iter().zip(&d).map(|(x, y)| x + y).collect() };
            prop_assert!(hi.auc() >= lo.auc());
        }
    }
}
