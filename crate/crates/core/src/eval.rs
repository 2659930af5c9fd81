//! Temporal action localization metrics and pre-action diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ActionSegment, AnnotatedSequence};
use crate::diff::{Real, Tensor2D};
use crate::error::{Error, Result};
use crate::model::segments_from_codes;
use crate::trainer::Checkpoint;

pub const IOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const TABLE_HEADER: &str = "0.1 0.2 0.3 0.4 0.5 Avg";

pub fn default_score_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// A scored segment proposal within sequence `sequence`.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub sequence: usize,
    pub segment: ActionSegment,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub sequence: usize,
    pub segment: ActionSegment,
}

/// Turns `(C + 1) x T` frame probabilities (row `background` is the
/// background class) into detections: for every action class and threshold,
/// each maximal run with probability `>= tau` proposes a segment scored by
/// its mean probability. Identical `(class, begin, end)` proposals keep the
/// highest score.
pub fn predictions_to_segments<S: Real>(
    probs: &Tensor2D<S>,
    background: usize,
    score_thresholds: &[f64],
    sequence: usize,
) -> Result<Vec<Detection>> {
    if score_thresholds.is_empty() {
        return Err(Error::InvalidArgument("no score thresholds given".into()));
    }
    if let Some(t) = score_thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::InvalidArgument(format!("score threshold {t} outside (0, 1)")));
    }
    let t = probs.cols();
    let mut out: Vec<Detection> = Vec::new();
    for class in (0..probs.rows()).filter(|&c| c != background) {
        let row: Vec<f64> = probs.row(class).iter().map(|v| v.as_f64()).collect();
        let mut found: Vec<Detection> = Vec::new();
        for &tau in score_thresholds {
            let mut i = 0;
            while i < t {
                if row[i] < tau {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < t && row[i] >= tau {
                    i += 1;
                }
                let score = row[start..i].iter().sum::<f64>() / (i - start) as f64;
                let seg = ActionSegment::new(start + 1, i, class);
                match found.iter_mut().find(|d| d.segment == seg) {
                    Some(d) => d.score = d.score.max(score),
                    None => found.push(Detection {
                        sequence,
                        segment: seg,
                        score,
                    }),
                }
            }
        }
        found.sort_by_key(|d| (d.segment.begin, d.segment.end));
        out.extend(found);
    }
    Ok(out)
}

/// Frame-count IoU of two inclusive intervals.
pub fn temporal_iou(a: &ActionSegment, b: &ActionSegment) -> f64 {
    let lo = a.begin.max(b.begin);
    let hi = a.end.min(b.end);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy highest-score-first matching, all-point interpolated AP for one
/// class. `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    class_id: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| g.segment.label == class_id).collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.segment.label == class_id).collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(dets.len());
    for (rank, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.sequence != d.sequence {
                continue;
            }
            let iou = temporal_iou(&d.segment, &g.segment);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut envelope = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// `per_class[c][k]`: AP of class `c` at `IOU_THRESHOLDS[k]` (`None` without ground truth).
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub map: Vec<f64>,
    pub average: f64,
    pub confusion: Option<Vec<Vec<usize>>>,
    pub purity: Option<PurityReport>,
}

pub fn map_report(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    num_classes: usize,
) -> Result<EvaluationReport> {
    if let Some(g) = ground_truth.iter().find(|g| g.segment.label >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth class {} out of range",
            g.segment.label
        )));
    }
    let per_class: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| {
            IOU_THRESHOLDS
                .iter()
                .map(|&t| average_precision(detections, ground_truth, c, t))
                .collect()
        })
        .collect();
    let defined: Vec<&Vec<Option<f64>>> = per_class.iter().filter(|r| r[0].is_some()).collect();
    if defined.is_empty() {
        return Err(Error::InvalidArgument(
            "no ground-truth segments to evaluate against".into(),
        ));
    }
    let map: Vec<f64> = (0..IOU_THRESHOLDS.len())
        .map(|k| defined.iter().map(|r| r[k].unwrap_or(0.0)).sum::<f64>() / defined.len() as f64)
        .collect();
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvaluationReport {
        per_class,
        map,
        average,
        confusion: None,
        purity: None,
    })
}

impl EvaluationReport {
    /// Percentages in the `0.1 0.2 0.3 0.4 0.5 Avg` layout.
    pub fn table(&self) -> String {
        let mut s = String::from(TABLE_HEADER);
        s.push('\n');
        let cells: Vec<String> = self
            .map
            .iter()
            .chain(std::iter::once(&self.average))
            .map(|v| format!("{:.2}", 100.0 * v))
            .collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
        s
    }

    /// `class,threshold,ap` rows; undefined classes print `nan`.
    pub fn ap_csv(&self) -> String {
        let mut s = String::from("class,threshold,ap\n");
        for (c, row) in self.per_class.iter().enumerate() {
            for (k, ap) in row.iter().enumerate() {
                let v = ap.map_or("nan".to_string(), |a| format!("{a:.6}"));
                s.push_str(&format!("{c},{},{v}\n", IOU_THRESHOLDS[k]));
            }
        }
        s
    }

    pub fn map_at(&self, iou: f64) -> Option<f64> {
        IOU_THRESHOLDS
            .iter()
            .position(|&t| (t - iou).abs() < 1e-12)
            .map(|k| self.map[k])
    }
}

/// Entry `(g, p)` counts frames labeled `g` and predicted `p`.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], num_labels: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0usize; num_labels]; num_labels];
    for (&p, &g) in predicted.iter().zip(labels) {
        if p >= num_labels || g >= num_labels {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range {num_labels}",
                p.max(g)
            )));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

pub fn matrix_csv(m: &[Vec<usize>]) -> String {
    m.iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

/// How well pre-action codes line up with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    /// Fraction of each pre-action segment's frames carrying its majority label.
    pub segment_purity: Vec<f64>,
    /// `cooccurrence[code][label]` frame counts.
    pub cooccurrence: Vec<Vec<usize>>,
}

impl PurityReport {
    pub fn mean_segment_purity(&self) -> f64 {
        if self.segment_purity.is_empty() {
            return 0.0;
        }
        self.segment_purity.iter().sum::<f64>() / self.segment_purity.len() as f64
    }

    /// Fraction of frames whose label is the majority label of their code,
    /// i.e. segments scored against the code-level majority.
    pub fn class_purity(&self) -> f64 {
        let total: usize = self.cooccurrence.iter().flatten().sum();
        if total == 0 {
            return 0.0;
        }
        let hit: usize = self
            .cooccurrence
            .iter()
            .map(|r| r.iter().copied().max().unwrap_or(0))
            .sum();
        hit as f64 / total as f64
    }

    pub fn merge(&mut self, other: &PurityReport) {
        self.segment_purity.extend_from_slice(&other.segment_purity);
        for (a, b) in self.cooccurrence.iter_mut().zip(&other.cooccurrence) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn csv(&self) -> String {
        let mut s = format!(
            "mean_segment_purity,{:.6}\nclass_purity,{:.6}\nsegments,{}\n",
            self.mean_segment_purity(),
            self.class_purity(),
            self.segment_purity.len()
        );
        s.push_str("code\\label");
        if let Some(r) = self.cooccurrence.first() {
            for l in 0..r.len() {
                s.push_str(&format!(",{l}"));
            }
        }
        s.push('\n');
        for (k, r) in self.cooccurrence.iter().enumerate() {
            if r.iter().all(|&v| v == 0) {
                continue;
            }
            s.push_str(&k.to_string());
            for v in r {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn preaction_purity(
    codes: &[usize],
    labels: &[usize],
    num_codes: usize,
    num_labels: usize,
) -> Result<PurityReport> {
    if codes.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} codes for {} labels",
            codes.len(),
            labels.len()
        )));
    }
    if codes.iter().any(|&c| c >= num_codes) || labels.iter().any(|&l| l >= num_labels) {
        return Err(Error::InvalidArgument("code or label out of range".into()));
    }
    let mut cooccurrence = vec![vec![0usize; num_labels]; num_codes];
    for (&c, &l) in codes.iter().zip(labels) {
        cooccurrence[c][l] += 1;
    }
    let segment_purity = segments_from_codes(codes)
        .iter()
        .map(|s| {
            let mut counts = vec![0usize; num_labels];
            for &l in &labels[s.begin - 1..s.end] {
                counts[l] += 1;
            }
            *counts.iter().max().unwrap_or(&0) as f64 / s.len() as f64
        })
        .collect();
    Ok(PurityReport {
        segment_purity,
        cooccurrence,
    })
}

/// Purity of codes drawn uniformly at random per frame, averaged over
/// `trials`: `(mean segment purity, class purity)`.
pub fn random_code_baseline(
    labels: &[Vec<usize>],
    num_codes: usize,
    num_labels: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut seg, mut cls) = (0.0, 0.0);
    for _ in 0..trials {
        let mut merged: Option<PurityReport> = None;
        for l in labels {
            let codes: Vec<usize> = (0..l.len()).map(|_| rng.random_range(0..num_codes)).collect();
            let r = preaction_purity(&codes, l, num_codes, num_labels)?;
            match &mut merged {
                Some(m) => m.merge(&r),
                None => merged = Some(r),
            }
        }
        let m = merged.ok_or_else(|| Error::InvalidArgument("no sequences".into()))?;
        seg += m.mean_segment_purity();
        cls += m.class_purity();
    }
    Ok((seg / trials as f64, cls / trials as f64))
}

/// Relative frequency of the most common label.
pub fn label_frequency_baseline(labels: &[Vec<usize>], num_labels: usize) -> f64 {
    let mut counts = vec![0usize; num_labels];
    let mut total = 0;
    for &l in labels.iter().flatten() {
        counts[l] += 1;
        total += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / total.max(1) as f64
}

pub fn ground_truth_of(seqs: &[&AnnotatedSequence]) -> Vec<GroundTruth> {
    seqs.iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.segments.iter().map(move |seg| GroundTruth {
                sequence: i,
                segment: *seg,
            })
        })
        .collect()
}

/// Detection mAP, frame confusion and (when the checkpoint has codebooks)
/// pre-action purity on `test`.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    test: &[&AnnotatedSequence],
    num_classes: usize,
    score_thresholds: &[f64],
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let background = num_classes;
    let mut dets = Vec::new();
    let mut pred_frames = Vec::new();
    let mut label_frames = Vec::new();
    let mut purity: Option<PurityReport> = None;
    for (i, s) in test.iter().enumerate() {
        let p = ck.predict(s)?;
        if p.rows() != num_classes + 1 {
            return Err(Error::Shape(format!(
                "classifier emits {} classes, dataset has {} plus background",
                p.rows(),
                num_classes
            )));
        }
        dets.extend(predictions_to_segments(&p, background, score_thresholds, i)?);
        for c in 0..p.cols() {
            pred_frames.push(crate::trainer::argmax(&p.column(c)));
        }
        let labels = s.frame_labels(background);
        if let Some(cb) = &ck.codebooks {
            let codes = ck.class_codes(s)?;
            let r = preaction_purity(&codes, &labels, cb.class.size(), num_classes + 1)?;
            match &mut purity {
                Some(m) => m.merge(&r),
                None => purity = Some(r),
            }
        }
        label_frames.extend(labels);
    }
    let mut report = map_report(&dets, &ground_truth_of(test), num_classes)?;
    report.confusion = Some(confusion_matrix(&pred_frames, &label_frames, num_classes + 1)?);
    report.purity = purity;
    Ok(report)
}

/// Pre-action purity of a checkpoint's class codes on `seqs`.
pub fn checkpoint_purity(ck: &Checkpoint, seqs: &[&AnnotatedSequence], num_classes: usize) -> Result<PurityReport> {
    let cb = ck
        .codebooks
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no codebooks".into()))?;
    let mut merged: Option<PurityReport> = None;
    for s in seqs {
        let r = preaction_purity(
            &ck.class_codes(s)?,
            &s.frame_labels(num_classes),
            cb.class.size(),
            num_classes + 1,
        )?;
        match &mut merged {
            Some(m) => m.merge(&r),
            None => merged = Some(r),
        }
    }
    merged.ok_or_else(|| Error::InvalidArgument("no sequences".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(b: usize, e: usize, l: usize) -> ActionSegment {
        ActionSegment::new(b, e, l)
    }

    fn det(b: usize, e: usize, l: usize, score: f64) -> Detection {
        Detection {
            sequence: 0,
            segment: seg(b, e, l),
            score,
        }
    }

    fn gt(b: usize, e: usize, l: usize) -> GroundTruth {
        GroundTruth {
            sequence: 0,
            segment: seg(b, e, l),
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(&seg(3, 9, 0), &seg(3, 9, 1)), 1.0);
        assert_eq!(temporal_iou(&seg(1, 4, 0), &seg(5, 9, 0)), 0.0);
        assert!((temporal_iou(&seg(1, 10, 0), &seg(6, 15, 0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn proposal_examples() {
        let one_hot = Tensor2D::from_fn(3, 6, |r, _| if r == 1 { 1.0f64 } else { 0.0 });
        let d = predictions_to_segments(&one_hot, 2, &default_score_thresholds(), 0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].segment, seg(1, 6, 1));
        assert_eq!(d[0].score, 1.0);

        let p = [0.9, 0.9, 0.1, 0.9];
        let probs = Tensor2D::from_fn(2, 4, |r, c| if r == 0 { p[c] } else { 1.0 - p[c] });
        let d = predictions_to_segments(&probs, 1, &[0.5], 0).unwrap();
        let segs: Vec<_> = d.iter().map(|d| d.segment).collect();
        assert_eq!(segs, vec![seg(1, 2, 0), seg(4, 4, 0)]);

        let bg = Tensor2D::from_fn(3, 5, |r, _| if r == 2 { 1.0f64 } else { 0.0 });
        assert!(predictions_to_segments(&bg, 2, &[0.5], 0).unwrap().is_empty());
        assert!(predictions_to_segments(&bg, 2, &[], 0).is_err());
    }

    #[test]
    fn ap_examples() {
        let g = vec![gt(1, 5, 0), gt(10, 15, 0)];
        let perfect = vec![det(1, 5, 0, 0.2), det(10, 15, 0, 0.9)];
        assert_eq!(average_precision(&perfect, &g, 0, 0.5), Some(1.0));
        assert_eq!(average_precision(&[], &g, 0, 0.5), Some(0.0));
        let one_tp = vec![det(1, 5, 0, 0.9), det(30, 35, 0, 0.8), det(40, 45, 0, 0.7)];
        assert_eq!(average_precision(&one_tp, &g, 0, 0.5), Some(0.5));
        assert_eq!(average_precision(&one_tp, &g, 1, 0.5), None);
    }

    #[test]
    fn perfect_report_is_full_marks() {
        let g = vec![gt(1, 5, 0), gt(8, 12, 1), gt(20, 30, 0)];
        let d: Vec<_> = g
            .iter()
            .map(|g| Detection {
                sequence: 0,
                segment: g.segment,
                score: 0.5,
            })
            .collect();
        let r = map_report(&d, &g, 3).unwrap();
        assert!(r.map.iter().all(|&m| m == 1.0));
        assert_eq!(r.per_class[2][0], None);
        let t = r.table();
        assert_eq!(t.lines().next().unwrap(), TABLE_HEADER);
        assert_eq!(t.lines().nth(1).unwrap(), "100.00 100.00 100.00 100.00 100.00 100.00");
    }

    #[test]
    fn confusion_examples() {
        let labels = [0, 0, 1, 1, 2, 2];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(m, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        let m = confusion_matrix(&[2; 6], &labels, 3).unwrap();
        assert!(m.iter().all(|r| r[0] == 0 && r[1] == 0 && r[2] == 2));
        let m = confusion_matrix(&[0, 1, 1, 1, 2, 0], &labels, 3).unwrap();
        assert_eq!(m, vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn purity_examples() {
        let r = preaction_purity(&[0, 0, 1, 1, 1], &[2, 2, 0, 0, 0], 2, 3).unwrap();
        assert_eq!(r.segment_purity, vec![1.0, 1.0]);
        assert_eq!(r.class_purity(), 1.0);
        let r = preaction_purity(&[4, 4, 4, 4], &[0, 0, 1, 1], 5, 2).unwrap();
        assert_eq!(r.segment_purity, vec![0.5]);
        assert_eq!(r.cooccurrence[4], vec![2, 2]);
    }

    #[test]
    fn random_codes_sit_at_label_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<Vec<usize>> = (0..20)
            .map(|_| {
                let mut v = Vec::new();
                while v.len() < 400 {
                    let l = rng.random_range(0..3);
                    let len = rng.random_range(20..60);
                    v.extend(std::iter::repeat_n(l, len));
                }
                v.truncate(400);
                v
            })
            .collect();
        let (_, cls) = random_code_baseline(&labels, 4, 3, 100, 2).unwrap();
        let freq = label_frequency_baseline(&labels, 3);
        assert!((cls - freq).abs() < 0.05, "{cls} vs {freq}");
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in 1usize..50, la in 0usize..20, b in 1usize..50, lb in 0usize..20) {
            let (x, y) = (seg(a, a + la, 0), seg(b, b + lb, 0));
            let v = temporal_iou(&x, &y);
            prop_assert_eq!(v, temporal_iou(&y, &x));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(temporal_iou(&x, &x), 1.0);
        }

        #[test]
        fn ap_is_bounded_and_monotone_in_threshold(
            gts in proptest::collection::vec((1usize..40, 0usize..10), 1..4),
            dets in proptest::collection::vec((1usize..40, 0usize..10, 0.0f64..1.0), 0..6),
        ) {
            let g: Vec<_> = gts.iter().map(|&(b, l)| gt(b, b + l, 0)).collect();
            let d: Vec<_> = dets.iter().map(|&(b, l, s)| det(b, b + l, 0, s)).collect();
            let mut prev = f64::INFINITY;
            for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let ap = average_precision(&d, &g, 0, thr).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!(ap <= prev + 1e-12);
                prev = ap;
            }
        }
    }
}
