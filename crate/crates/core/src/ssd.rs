//! Single-shot detection head machinery: the anchor grid over the feature
//! pyramid, IoU matching with a 0.5 threshold plus a best-anchor guarantee
//! per ground truth, softmax cross-entropy with 5:1 hard negative mining,
//! Huber box regression, and greedy per-class NMS for decoding.

use crate::encode::PlaneSize;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Axis-aligned box in pixel coordinates, corners (x1,y1) top-left and
/// (x2,y2) bottom-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2 {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl Box2 {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Box2 { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Intersection over union; zero for disjoint boxes. Computed in f64 so the
/// closed-form cases come out exact.
pub fn iou(a: &Box2, b: &Box2) -> f32 {
    let ix = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let iy = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = ix * iy;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union) as f32
}

/// One anchor: center plus extents, in pixels.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl Anchor {
    pub fn rect(&self) -> Box2 {
        Box2::new(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// Anchor geometry configuration. Scales are fractions of the image height,
/// one per pyramid level; every cell gets one anchor per aspect ratio.
#[derive(Debug, Clone)]
pub struct AnchorConfig {
    pub scales: Vec<f32>,
    pub aspect_ratios: Vec<f32>,
}

impl AnchorConfig {
    /// Linearly spaced scales from 0.08 to 0.8 of image height over `levels`
    /// pyramid levels, aspect ratios 1:1, 2:1, 1:2.
    pub fn default_for_levels(levels: usize) -> Self {
        let scales = (0..levels)
            .map(|k| 0.08 + (0.8 - 0.08) * k as f32 / (levels.max(2) - 1) as f32)
            .collect();
        AnchorConfig { scales, aspect_ratios: vec![1.0, 2.0, 0.5] }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }
}

/// The flattened anchor grid across all pyramid levels. The flattening order
/// matches `Tape::flatten_anchors`: levels outermost, then rows, columns,
/// and per-cell anchors innermost.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub level_ranges: Vec<std::ops::Range<usize>>,
    pub image: PlaneSize,
}

impl AnchorSet {
    pub fn generate(levels: &[(usize, usize)], image: PlaneSize, cfg: &AnchorConfig) -> Self {
        assert_eq!(levels.len(), cfg.scales.len(), "one scale per pyramid level");
        let mut anchors = Vec::new();
        let mut level_ranges = Vec::new();
        for (k, &(fh, fw)) in levels.iter().enumerate() {
            let start = anchors.len();
            let base = cfg.scales[k] * image.h as f32;
            for row in 0..fh {
                for col in 0..fw {
                    let cx = (col as f32 + 0.5) / fw as f32 * image.w as f32;
                    let cy = (row as f32 + 0.5) / fh as f32 * image.h as f32;
                    for &ratio in &cfg.aspect_ratios {
                        let sq = ratio.sqrt();
                        anchors.push(Anchor { cx, cy, w: base * sq, h: base / sq });
                    }
                }
            }
            level_ranges.push(start..anchors.len());
        }
        AnchorSet { anchors, level_ranges, image }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Every anchor center must sit inside the image plane.
    pub fn centers_inside_image(&self) -> bool {
        self.anchors.iter().all(|a| {
            a.cx >= 0.0 && a.cx < self.image.w as f32 && a.cy >= 0.0 && a.cy < self.image.h as f32
        })
    }
}

/// A ground-truth box reduced to what matching needs.
#[derive(Debug, Clone, Copy)]
pub struct TargetBox {
    pub rect: Box2,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    /// Matched to ground truth `gt` carrying `class`.
    Positive { class: usize, gt: usize },
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// (dcx/w_a, dcy/h_a, ln(w/w_a), ln(h/h_a)); zeros unless positive.
    pub regression: [f32; 4],
}

fn regression_target(anchor: &Anchor, gt: &Box2) -> [f32; 4] {
    let (gcx, gcy) = gt.center();
    [
        (gcx - anchor.cx) / anchor.w,
        (gcy - anchor.cy) / anchor.h,
        (gt.width() / anchor.w).ln(),
        (gt.height() / anchor.h).ln(),
    ]
}

/// Assigns every anchor a label: positive when IoU >= `iou_thresh` against
/// its best-overlap ground truth, plus each ground truth's single best
/// still-unforced anchor forced positive (processed in ground-truth order, so
/// every ground truth keeps at least one anchor); everything else negative.
/// An empty ground-truth list yields all negatives.
pub fn match_anchors(anchors: &[Anchor], gts: &[TargetBox], iou_thresh: f32) -> Vec<AnchorTarget> {
    let mut out: Vec<AnchorTarget> = anchors
        .iter()
        .map(|_| AnchorTarget { label: AnchorLabel::Negative, regression: [0.0; 4] })
        .collect();
    if gts.is_empty() {
        return out;
    }

    for (ai, anchor) in anchors.iter().enumerate() {
        let rect = anchor.rect();
        let mut best_gt = 0usize;
        let mut best_iou = -1.0f32;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(&rect, &gt.rect);
            if v > best_iou {
                best_iou = v;
                best_gt = gi;
            }
        }
        if best_iou >= iou_thresh {
            out[ai] = AnchorTarget {
                label: AnchorLabel::Positive { class: gts[best_gt].class, gt: best_gt },
                regression: regression_target(anchor, &gts[best_gt].rect),
            };
        }
    }

    // Best-anchor guarantee, in ground-truth index order. Each ground truth
    // forces its best-overlap anchor positive; anchors already forced by an
    // earlier ground truth are skipped so every ground truth keeps one.
    let mut forced = vec![false; anchors.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let mut best_anchor = None;
        let mut best_iou = -1.0f32;
        for (ai, anchor) in anchors.iter().enumerate() {
            if forced[ai] {
                continue;
            }
            let v = iou(&anchor.rect(), &gt.rect);
            if v > best_iou {
                best_iou = v;
                best_anchor = Some(ai);
            }
        }
        if let Some(ai) = best_anchor {
            forced[ai] = true;
            out[ai] = AnchorTarget {
                label: AnchorLabel::Positive { class: gt.class, gt: gi },
                regression: regression_target(&anchors[ai], &gt.rect),
            };
        }
    }
    out
}

pub struct ClassificationStats {
    pub positives: usize,
    pub mined_negatives: usize,
}

/// Softmax cross-entropy over the positives plus the `mining_ratio * #pos`
/// highest-loss negatives (background label 0), normalized by the positive
/// count (or one when there are none). Ignore-labeled anchors take no part.
pub fn classification_loss(
    tape: &mut Tape,
    logits: &Tensor,
    targets: &[AnchorTarget],
    mining_ratio: usize,
) -> Result<(Tensor, ClassificationStats)> {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    if n != targets.len() {
        return Err(Error::shape(
            "classification_loss",
            format!("{} logit rows (dim 0) for {} anchor targets", n, targets.len()),
        ));
    }

    let mut selected: Vec<usize> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        match t.label {
            AnchorLabel::Positive { class, .. } => {
                selected.push(i);
                labels.push(class);
            }
            AnchorLabel::Negative => negatives.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    let positives = selected.len();

    // Rank negatives by their current background loss; forward-only pass.
    let keep = (mining_ratio * positives).min(negatives.len());
    if keep > 0 {
        let data = logits.data();
        let mut scored: Vec<(f32, usize)> = negatives
            .iter()
            .map(|&i| {
                let row = &data[i * k..(i + 1) * k];
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for &v in row {
                    sum += ((v - m) as f64).exp();
                }
                let loss = (m as f64 + sum.ln() - row[0] as f64) as f32;
                (loss, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut mined: Vec<usize> = scored[..keep].iter().map(|&(_, i)| i).collect();
        mined.sort_unstable();
        for i in mined {
            selected.push(i);
            labels.push(0);
        }
    }

    let stats = ClassificationStats { positives, mined_negatives: keep };
    if selected.is_empty() {
        return Ok((Tensor::scalar(0.0), stats));
    }

    let rows = tape.select_rows(logits, &selected)?;
    let losses = tape.softmax_ce(&rows, &labels)?;
    let total = tape.sum_all(&losses);
    let loss = tape.scale(&total, 1.0 / positives.max(1) as f32);
    Ok((loss, stats))
}

/// Huber loss over the positive anchors' regression residuals, summed and
/// normalized by the positive count.
pub fn regression_loss(
    tape: &mut Tape,
    regressions: &Tensor,
    targets: &[AnchorTarget],
) -> Result<Tensor> {
    let n = regressions.shape()[0];
    if n != targets.len() {
        return Err(Error::shape(
            "regression_loss",
            format!("{} regression rows (dim 0) for {} anchor targets", n, targets.len()),
        ));
    }
    let mut pos_rows: Vec<usize> = Vec::new();
    let mut flat_targets: Vec<f32> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if matches!(t.label, AnchorLabel::Positive { .. }) {
            pos_rows.push(i);
            flat_targets.extend_from_slice(&t.regression);
        }
    }
    if pos_rows.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let rows = tape.select_rows(regressions, &pos_rows)?;
    let residual = tape.sub_const(&rows, &flat_targets)?;
    let total = tape.huber_sum(&residual);
    Ok(tape.scale(&total, 1.0 / pos_rows.len() as f32))
}

/// A decoded, scored box.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub class: usize,
    pub score: f32,
    pub rect: Box2,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeParams {
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_thresh: 0.05, nms_iou: 0.5, max_detections: 100 }
    }
}

/// Inverts the regression parameterization for one anchor.
pub fn decode_box(anchor: &Anchor, t: &[f32; 4], image: PlaneSize) -> Box2 {
    let cx = anchor.cx + t[0] * anchor.w;
    let cy = anchor.cy + t[1] * anchor.h;
    // Clamp the log-extent so a wild regression cannot overflow.
    let w = anchor.w * t[2].clamp(-10.0, 6.0).exp();
    let h = anchor.h * t[3].clamp(-10.0, 6.0).exp();
    Box2 {
        x1: (cx - w / 2.0).clamp(0.0, image.w as f32),
        y1: (cy - h / 2.0).clamp(0.0, image.h as f32),
        x2: (cx + w / 2.0).clamp(0.0, image.w as f32),
        y2: (cy + h / 2.0).clamp(0.0, image.h as f32),
    }
}

/// Greedy per-class NMS over score-sorted candidates. Ties resolve by anchor
/// index so results are deterministic.
pub fn nms(mut dets: Vec<(Detection, usize)>, nms_iou: f32, max: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then(a.1.cmp(&b.1)));
    let mut kept: Vec<Detection> = Vec::new();
    for (cand, _) in dets {
        if kept.len() >= max {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class == cand.class && iou(&k.rect, &cand.rect) > nms_iou);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// Softmax scores, box decoding, clamping to the image, and per-class NMS.
/// Class 0 is background and never emitted.
pub fn decode_and_nms(
    logits: &Tensor,
    regressions: &Tensor,
    anchors: &AnchorSet,
    params: &DecodeParams,
) -> Result<Vec<Detection>> {
    let n = anchors.len();
    let k = logits.shape()[1];
    if logits.shape()[0] != n || regressions.shape()[0] != n {
        return Err(Error::shape(
            "decode_and_nms",
            format!(
                "anchor count {} does not match logits rows {} / regression rows {} (dim 0)",
                n,
                logits.shape()[0],
                regressions.shape()[0]
            ),
        ));
    }
    let zdata = logits.data();
    let rdata = regressions.data();
    let mut candidates: Vec<(Detection, usize)> = Vec::new();
    for i in 0..n {
        let row = &zdata[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - m) as f64).exp();
        }
        for class in 1..k {
            let score = (((row[class] - m) as f64).exp() / denom) as f32;
            if score < params.score_thresh {
                continue;
            }
            let t = [
                rdata[i * 4],
                rdata[i * 4 + 1],
                rdata[i * 4 + 2],
                rdata[i * 4 + 3],
            ];
            let rect = decode_box(&anchors.anchors[i], &t, anchors.image);
            if rect.area() <= 0.0 {
                continue;
            }
            candidates.push((Detection { class, score, rect }, i));
        }
    }
    Ok(nms(candidates, params.nms_iou, params.max_detections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_closed_forms() {
        let unit = Box2::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        let far = Box2::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&unit, &far), 0.0);
        let shifted = Box2::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&unit, &shifted) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn iou_is_symmetric_and_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mut b = || {
                let x1: f32 = rng.random_range(-5.0..5.0);
                let y1: f32 = rng.random_range(-5.0..5.0);
                Box2::new(x1, y1, x1 + rng.random_range(0.1..4.0), y1 + rng.random_range(0.1..4.0))
            };
            let (a, c) = (b(), b());
            assert_eq!(iou(&a, &c), iou(&c, &a));
            let v = iou(&a, &c);
            assert!((0.0..=1.0).contains(&v));
            let (dx, dy) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let shift = |r: &Box2| Box2::new(r.x1 + dx, r.y1 + dy, r.x2 + dx, r.y2 + dy);
            assert!((iou(&shift(&a), &shift(&c)) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn anchor_centers_stay_inside_image() {
        let image = PlaneSize::new(96, 192);
        let levels = [(12, 24), (12, 24), (6, 12), (6, 12), (3, 6), (2, 3)];
        let set = AnchorSet::generate(&levels, image, &AnchorConfig::default_for_levels(6));
        assert!(set.centers_inside_image());
        let cells: usize = levels.iter().map(|(h, w)| h * w).sum();
        assert_eq!(set.len(), cells * 3);
    }

    #[test]
    fn anchor_identical_to_gt_is_positive_and_empty_gts_all_negative() {
        let anchors = vec![
            Anchor { cx: 10.0, cy: 10.0, w: 8.0, h: 8.0 },
            Anchor { cx: 40.0, cy: 40.0, w: 8.0, h: 8.0 },
        ];
        let gts = vec![TargetBox { rect: Box2::new(6.0, 6.0, 14.0, 14.0), class: 1 }];
        let targets = match_anchors(&anchors, &gts, 0.5);
        assert!(matches!(targets[0].label, AnchorLabel::Positive { class: 1, gt: 0 }));
        assert_eq!(targets[0].regression, [0.0, 0.0, 0.0, 0.0]);
        assert_eq!(targets[1].label, AnchorLabel::Negative);

        let none = match_anchors(&anchors, &[], 0.5);
        assert!(none.iter().all(|t| t.label == AnchorLabel::Negative));
    }

    /// Literal restatement of the matching rule, kept independent of the
    /// implementation above.
    fn brute_force_matcher(
        anchors: &[Anchor],
        gts: &[TargetBox],
        thresh: f32,
    ) -> Vec<AnchorLabel> {
        let mut labels = vec![AnchorLabel::Negative; anchors.len()];
        for ai in 0..anchors.len() {
            let mut best = (-1.0f32, 0usize);
            for gi in 0..gts.len() {
                let v = iou(&anchors[ai].rect(), &gts[gi].rect);
                if v > best.0 {
                    best = (v, gi);
                }
            }
            if !gts.is_empty() && best.0 >= thresh {
                labels[ai] = AnchorLabel::Positive { class: gts[best.1].class, gt: best.1 };
            }
        }
        let mut taken = vec![false; anchors.len()];
        for gi in 0..gts.len() {
            let mut best: Option<(f32, usize)> = None;
            for ai in 0..anchors.len() {
                if taken[ai] {
                    continue;
                }
                let v = iou(&anchors[ai].rect(), &gts[gi].rect);
                if best.is_none() || v > best.unwrap().0 {
                    best = Some((v, ai));
                }
            }
            if let Some((_, ai)) = best {
                taken[ai] = true;
                labels[ai] = AnchorLabel::Positive { class: gts[gi].class, gt: gi };
            }
        }
        labels
    }

    #[test]
    fn matcher_equals_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let anchors: Vec<Anchor> = (0..50)
                .map(|_| Anchor {
                    cx: rng.random_range(0.0..100.0),
                    cy: rng.random_range(0.0..60.0),
                    w: rng.random_range(4.0..30.0),
                    h: rng.random_range(4.0..30.0),
                })
                .collect();
            let gts: Vec<TargetBox> = (0..3)
                .map(|_| {
                    let x1: f32 = rng.random_range(0.0..80.0);
                    let y1: f32 = rng.random_range(0.0..40.0);
                    TargetBox {
                        rect: Box2::new(
                            x1,
                            y1,
                            x1 + rng.random_range(5.0..25.0),
                            y1 + rng.random_range(5.0..25.0),
                        ),
                        class: 1,
                    }
                })
                .collect();
            let got = match_anchors(&anchors, &gts, 0.5);
            let expect = brute_force_matcher(&anchors, &gts, 0.5);
            for (g, e) in got.iter().zip(&expect) {
                assert_eq!(g.label, *e);
            }
            // Best-anchor guarantee.
            for gi in 0..gts.len() {
                assert!(got
                    .iter()
                    .any(|t| matches!(t.label, AnchorLabel::Positive { gt, .. } if gt == gi)));
            }
        }
    }

    #[test]
    fn classification_loss_perfect_predictions_approach_zero() {
        let mut tape = Tape::new();
        let targets = vec![
            AnchorTarget { label: AnchorLabel::Positive { class: 1, gt: 0 }, regression: [0.0; 4] },
            AnchorTarget { label: AnchorLabel::Negative, regression: [0.0; 4] },
        ];
        let logits =
            Tensor::from_vec(vec![2, 2], vec![-20.0, 20.0, 20.0, -20.0]).unwrap();
        let (loss, stats) = classification_loss(&mut tape, &logits, &targets, 5).unwrap();
        assert!(loss.item() < 1e-6, "loss {}", loss.item());
        assert_eq!(stats.positives, 1);
        assert_eq!(stats.mined_negatives, 1);
    }

    #[test]
    fn mining_keeps_exactly_min_ratio_pos_or_all_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n_pos, n_neg) in &[(2usize, 30usize), (1, 3), (4, 100), (0, 20), (3, 15)] {
            let n = n_pos + n_neg;
            let mut targets = Vec::new();
            for i in 0..n {
                targets.push(AnchorTarget {
                    label: if i < n_pos {
                        AnchorLabel::Positive { class: 1, gt: 0 }
                    } else {
                        AnchorLabel::Negative
                    },
                    regression: [0.0; 4],
                });
            }
            let logits = Tensor::from_vec(
                vec![n, 2],
                (0..2 * n).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let (_, stats) = classification_loss(&mut tape, &logits, &targets, 5).unwrap();
            assert_eq!(stats.mined_negatives, (5 * n_pos).min(n_neg));
        }
    }

    #[test]
    fn classification_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 40;
        let mut entries: Vec<(AnchorLabel, [f32; 2])> = (0..n)
            .map(|_| {
                let label = if rng.random_range(0.0..1.0) < 0.2 {
                    AnchorLabel::Positive { class: 1, gt: 0 }
                } else {
                    AnchorLabel::Negative
                };
                (label, [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            })
            .collect();
        let eval = |entries: &[(AnchorLabel, [f32; 2])]| {
            let targets: Vec<AnchorTarget> = entries
                .iter()
                .map(|&(label, _)| AnchorTarget { label, regression: [0.0; 4] })
                .collect();
            let logits = Tensor::from_vec(
                vec![entries.len(), 2],
                entries.iter().flat_map(|&(_, z)| z).collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            classification_loss(&mut tape, &logits, &targets, 5).unwrap().0.item()
        };
        let before = eval(&entries);
        for i in (1..entries.len()).rev() {
            let j = rng.random_range(0..=i);
            entries.swap(i, j);
        }
        let after = eval(&entries);
        assert!((before - after).abs() < 1e-5, "{before} vs {after}");
    }

    #[test]
    fn huber_regression_values_and_continuity() {
        let target = AnchorTarget {
            label: AnchorLabel::Positive { class: 1, gt: 0 },
            regression: [0.0; 4],
        };
        let eval = |residual: f32| {
            let regs = Tensor::from_vec(vec![1, 4], vec![residual, 0.0, 0.0, 0.0]).unwrap();
            let mut tape = Tape::new();
            regression_loss(&mut tape, &regs, &[target]).unwrap().item()
        };
        assert_eq!(eval(0.5), 0.125);
        assert_eq!(eval(2.0), 1.5);
        assert_eq!(eval(1.0), 0.5);
        // Numeric continuity across the branch switch at |x| = 1.
        for i in 0..200 {
            let x = 0.9 + i as f32 * 0.001;
            let step = (eval(x + 0.001) - eval(x)).abs();
            assert!(step < 0.0015, "jump of {step} at {x}");
        }
    }

    #[test]
    fn decode_zero_regression_reproduces_anchor_and_nms_keeps_one_of_identical() {
        let image = PlaneSize::new(60, 80);
        let set = AnchorSet {
            anchors: vec![Anchor { cx: 40.0, cy: 30.0, w: 10.0, h: 10.0 }],
            level_ranges: vec![0..1],
            image,
        };
        let decoded = decode_box(&set.anchors[0], &[0.0; 4], image);
        assert_eq!(decoded, set.anchors[0].rect());

        let d = |score: f32| Detection {
            class: 1,
            score,
            rect: Box2::new(10.0, 10.0, 20.0, 20.0),
        };
        let kept = nms(vec![(d(0.9), 0), (d(0.8), 1)], 0.5, 100);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_matches_quadratic_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let candidates: Vec<(Detection, usize)> = (0..40)
                .map(|i| {
                    let x1: f32 = rng.random_range(0.0..60.0);
                    let y1: f32 = rng.random_range(0.0..40.0);
                    (
                        Detection {
                            class: rng.random_range(1..3usize),
                            score: rng.random_range(0.05..1.0),
                            rect: Box2::new(
                                x1,
                                y1,
                                x1 + rng.random_range(4.0..20.0),
                                y1 + rng.random_range(4.0..20.0),
                            ),
                        },
                        i,
                    )
                })
                .collect();

            // O(n^2) reference: repeatedly take the best-scored remaining
            // candidate and erase everything it suppresses.
            let mut remaining = candidates.clone();
            let mut reference = Vec::new();
            while !remaining.is_empty() {
                let mut best = 0usize;
                for i in 1..remaining.len() {
                    let (a, b) = (&remaining[i], &remaining[best]);
                    if a.0.score > b.0.score || (a.0.score == b.0.score && a.1 < b.1) {
                        best = i;
                    }
                }
                let chosen = remaining.remove(best);
                remaining.retain(|(d, _)| {
                    d.class != chosen.0.class || iou(&d.rect, &chosen.0.rect) <= 0.5
                });
                reference.push(chosen.0);
            }

            let kept = nms(candidates, 0.5, 1000);
            assert_eq!(kept.len(), reference.len());
            for (a, b) in kept.iter().zip(&reference) {
                assert_eq!(a.score, b.score);
                assert_eq!(a.rect, b.rect);
            }
        }
    }
}
