//! Evaluation primitives: box and mask IoU, Acc@0.5, cumulative IoU, and
//! Spearman rank correlation with a significance test.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::grounding::GroundingRecord;
use crate::types::{BBox, BinaryMask, SampleAnnotation};

pub const ACC_IOU_THRESHOLD: f64 = 0.5;

/// Largest sample size whose p-value is computed by full permutation.
pub const EXACT_PERMUTATION_MAX_N: usize = 8;

/// Permuted statistics this close to the observed one count as "as extreme".
pub const PERMUTATION_TOLERANCE: f64 = 1e-12;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    let inter = if x1 > x0 && y1 > y0 { (x1 - x0) as u64 * (y1 - y0) as u64 } else { 0 };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskOverlap {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// Set-wise overlap. Two empty masks agree perfectly (IoU 1).
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<MaskOverlap> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "masks {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut intersection, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        intersection += (x && y) as u64;
        union += (x || y) as u64;
    }
    let iou = if union == 0 { 1.0 } else { intersection as f64 / union as f64 };
    Ok(MaskOverlap { intersection, union, iou })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rec,
    Res,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    pub box_iou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_intersection: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_union: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: Task,
    pub num_samples: usize,
    pub acc_at_05: f64,
    pub mean_box_iou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ciou: Option<f64>,
    pub per_sample: Vec<SampleEval>,
}

fn index_annotations(annotations: &[SampleAnnotation]) -> HashMap<&str, &SampleAnnotation> {
    annotations.iter().map(|a| (a.sample_id.as_str(), a)).collect()
}

fn box_scores<'a>(
    results: &[GroundingRecord],
    annotations: &'a [SampleAnnotation],
) -> Result<Vec<(f64, &'a SampleAnnotation)>> {
    let by_id = index_annotations(annotations);
    results
        .iter()
        .map(|r| {
            let ann = *by_id
                .get(r.sample_id.as_str())
                .ok_or_else(|| Error::MissingAnnotation(r.sample_id.clone()))?;
            // a sample with no foreground has no box and counts as a miss
            let iou = r.bbox_pixels.map(|b| box_iou(&b, &ann.gt_bbox)).unwrap_or(0.0);
            Ok((iou, ann))
        })
        .collect()
}

fn summarize(task: Task, per_sample: Vec<SampleEval>, ciou: Option<f64>) -> EvalSummary {
    let n = per_sample.len();
    let hits = per_sample.iter().filter(|s| s.box_iou >= ACC_IOU_THRESHOLD).count();
    let iou_total: f64 = per_sample.iter().map(|s| s.box_iou).sum();
    let (acc, mean) = if n == 0 { (0.0, 0.0) } else { (hits as f64 / n as f64, iou_total / n as f64) };
    EvalSummary { task, num_samples: n, acc_at_05: acc, mean_box_iou: mean, ciou, per_sample }
}

/// Referring expression comprehension: Acc@0.5 over predicted boxes.
pub fn evaluate_rec(results: &[GroundingRecord], annotations: &[SampleAnnotation]) -> Result<EvalSummary> {
    let per_sample = results
        .iter()
        .zip(box_scores(results, annotations)?)
        .map(|(r, (iou, _))| SampleEval {
            sample_id: r.sample_id.clone(),
            box_iou: iou,
            mask_intersection: None,
            mask_union: None,
        })
        .collect();
    Ok(summarize(Task::Rec, per_sample, None))
}

/// Referring expression segmentation: cumulative intersection over
/// cumulative union of the pixel pseudo-masks.
pub fn evaluate_res(results: &[GroundingRecord], annotations: &[SampleAnnotation]) -> Result<EvalSummary> {
    let scores = box_scores(results, annotations)?;
    let mut per_sample = Vec::with_capacity(results.len());
    let (mut total_i, mut total_u) = (0u64, 0u64);
    for (r, (iou, ann)) in results.iter().zip(scores) {
        let gt = ann.gt_mask.as_ref().ok_or_else(|| Error::MissingMask(r.sample_id.clone()))?;
        let pred = r.pixel_mask()?;
        let overlap = mask_iou(&pred, gt)?;
        total_i += overlap.intersection;
        total_u += overlap.union;
        per_sample.push(SampleEval {
            sample_id: r.sample_id.clone(),
            box_iou: iou,
            mask_intersection: Some(overlap.intersection),
            mask_union: Some(overlap.union),
        });
    }
    let ciou = if total_u == 0 { 1.0 } else { total_i as f64 / total_u as f64 };
    Ok(summarize(Task::Res, per_sample, Some(ciou)))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
}

fn centred(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss = c.iter().map(|x| x * x).sum::<f64>();
    (c, ss)
}

/// Spearman's rho with a two-sided p-value: exact permutation for
/// `n <= 8`, Student-t approximation above that.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::UndefinedCorrelation(format!("lengths {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 points, got {n}")));
    }
    let (cx, ssx) = centred(&average_ranks(xs));
    let (cy, ssy) = centred(&average_ranks(ys));
    if ssx == 0.0 || ssy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let denom = (ssx * ssy).sqrt();
    let stat = |y: &[f64]| cx.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / denom;
    let rho = stat(&cy).clamp(-1.0, 1.0);

    let p_value = if n <= EXACT_PERMUTATION_MAX_N {
        let target = rho.abs() - PERMUTATION_TOLERANCE;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut permuted = cy.clone();
        let (mut extreme, mut total) = (0u64, 0u64);
        loop {
            for (slot, &k) in permuted.iter_mut().zip(&perm) {
                *slot = cy[k];
            }
            total += 1;
            if stat(&permuted).abs() >= target {
                extreme += 1;
            }
            if !next_permutation(&mut perm) {
                break;
            }
        }
        extreme as f64 / total as f64
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation { rho, p_value })
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: u32, b: u32, c: u32, d: u32) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn record(id: &str, bbox: Option<BBox>) -> GroundingRecord {
        GroundingRecord::from_box(id, 20, 20, bbox)
    }

    fn ann(id: &str, gt: BBox) -> SampleAnnotation {
        SampleAnnotation {
            sample_id: id.into(),
            image_width: 20,
            image_height: 20,
            text: String::new(),
            gt_bbox: gt,
            gt_mask: Some(BinaryMask::from_box(20, 20, &gt).unwrap()),
        }
    }

    #[test]
    fn box_iou_anchors() {
        let a = bx(0, 0, 10, 10);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(10, 0, 20, 10)), 0.0);
        assert!((box_iou(&a, &bx(5, 0, 15, 10)) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn mask_iou_cases() {
        let a = BinaryMask::new(2, 2, vec![true, false, true, false]).unwrap();
        let b = BinaryMask::new(2, 2, vec![false, true, false, true]).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap().iou, 1.0);
        let o = mask_iou(&a, &b).unwrap();
        assert_eq!((o.intersection, o.union), (0, 4));
        let e = BinaryMask::empty(2, 2).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap().iou, 1.0);
        assert!(mask_iou(&a, &BinaryMask::empty(4, 1).unwrap()).is_err());
    }

    #[test]
    fn rec_accuracy_threshold() {
        let anns = vec![ann("a", bx(0, 0, 10, 10)), ann("b", bx(0, 0, 10, 10))];
        // a: 6x10 inside -> 0.6, b: 4x10 inside -> 0.4
        let res = vec![record("a", Some(bx(0, 0, 6, 10))), record("b", Some(bx(0, 0, 4, 10)))];
        let s = evaluate_rec(&res, &anns).unwrap();
        assert_eq!(s.acc_at_05, 0.5);
        assert!((s.mean_box_iou - 0.5).abs() < 1e-12);

        let perfect = vec![record("a", Some(bx(0, 0, 10, 10))), record("b", Some(bx(0, 0, 10, 10)))];
        assert_eq!(evaluate_rec(&perfect, &anns).unwrap().acc_at_05, 1.0);
    }

    #[test]
    fn missing_annotation_is_named() {
        let res = vec![record("zzz", Some(bx(0, 0, 1, 1)))];
        match evaluate_rec(&res, &[]) {
            Err(Error::MissingAnnotation(id)) => assert_eq!(id, "zzz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_prediction_counts_as_miss() {
        let anns = vec![ann("a", bx(0, 0, 10, 10))];
        let s = evaluate_rec(&[record("a", None)], &anns).unwrap();
        assert_eq!(s.acc_at_05, 0.0);
        let s = evaluate_res(&[record("a", None)], &anns).unwrap();
        assert_eq!(s.ciou, Some(0.0));
    }

    #[test]
    fn ciou_is_cumulative() {
        // (I, U) = (10, 20) and (0, 10)
        let gt_a = bx(0, 0, 20, 1);
        let gt_b = bx(0, 0, 10, 1);
        let anns = vec![ann("a", gt_a), ann("b", gt_b)];
        let res = vec![record("a", Some(bx(0, 0, 10, 1))), record("b", Some(bx(10, 0, 20, 1)))];
        let s = evaluate_res(&res, &anns).unwrap();
        assert_eq!(s.per_sample[0].mask_intersection, Some(10));
        assert_eq!(s.per_sample[0].mask_union, Some(20));
        assert_eq!(s.per_sample[1].mask_union, Some(20));
        // second sample: prediction 10 px disjoint from 10 px gt -> union 20
        assert!((s.ciou.unwrap() - 10.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn ciou_documented_example() {
        let anns = vec![ann("a", bx(0, 0, 20, 1)), ann("b", bx(0, 0, 5, 1))];
        // a: pred 10 px inside a 20 px gt -> (10, 20); b: pred 5 px disjoint from 5 px gt -> (0, 10)
        let res = vec![record("a", Some(bx(0, 0, 10, 1))), record("b", Some(bx(5, 0, 10, 1)))];
        let s = evaluate_res(&res, &anns).unwrap();
        assert_eq!(s.per_sample[1].mask_intersection, Some(0));
        assert_eq!(s.per_sample[1].mask_union, Some(10));
        let ciou = s.ciou.unwrap();
        assert!((ciou - 10.0 / 30.0).abs() < 1e-15);
        let mean_iou = (10.0 / 20.0 + 0.0) / 2.0;
        assert!((ciou - mean_iou).abs() > 0.08);
    }

    #[test]
    fn res_requires_masks() {
        let mut a = ann("a", bx(0, 0, 2, 2));
        a.gt_mask = None;
        assert!(matches!(
            evaluate_res(&[record("a", Some(bx(0, 0, 2, 2)))], &[a]),
            Err(Error::MissingMask(_))
        ));
    }

    #[test]
    fn spearman_anchors() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&xs, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap().rho - 1.0).abs() < 1e-15);
        assert!((spearman(&xs, &[5.0, 3.0, 1.0, 0.0, -9.0]).unwrap().rho + 1.0).abs() < 1e-15);
        let c = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((c.rho - 0.6).abs() < 1e-12);
        // 10 of the 24 orderings reach |rho| >= 0.6
        assert_eq!(c.p_value, 10.0 / 24.0);
    }

    #[test]
    fn spearman_errors() {
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_t_approximation_for_large_n() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x * 0.37).sin() + x * 0.3).collect();
        let c = spearman(&xs, &ys).unwrap();
        assert!(c.rho > 0.8);
        assert!(c.p_value < 1e-6);
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest::proptest! {
        #[test]
        fn box_iou_symmetric_bounded(a in (0u32..20, 0u32..20, 1u32..10, 1u32..10), b in (0u32..20, 0u32..20, 1u32..10, 1u32..10)) {
            let p = bx(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let q = bx(b.0, b.1, b.0 + b.2, b.1 + b.3);
            let v = box_iou(&p, &q);
            proptest::prop_assert_eq!(v, box_iou(&q, &p));
            proptest::prop_assert!((0.0..=1.0).contains(&v));
            proptest::prop_assert_eq!(v == 1.0, p == q);
        }

        #[test]
        fn spearman_monotone_invariant(xs in proptest::collection::vec(-50.0f64..50.0, 4..12), ys in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let ys = &ys[..xs.len()];
            if let Ok(c) = spearman(&xs, ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
                let ty: Vec<f64> = ys.iter().map(|y| y * 3.0 - 7.0).collect();
                let d = spearman(&tx, &ty).unwrap();
                proptest::prop_assert!((c.rho - d.rho).abs() < 1e-12);
            }
        }
    }
}
