//! Detector backends, proposal sets, non-maximum suppression, and
//! average-precision scoring.
//!
//! The built-in [`TemplateDetector`] slides class templates over the
//! image at several window sizes and scores each window by a squashed
//! normalized cross-correlation. It exposes analytic score gradients so
//! attacks can backpropagate through it; external detectors plug in via
//! [`SubprocessDetector`] without gradients.

use std::process::Command;

use ndarray::{Array3, s};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{Grid, ImageTensor};

/// One candidate detection: a box plus a full per-class score vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// Scores in `[0,1]`, one per class.
    pub class_scores: Vec<f64>,
    /// Argmax of `class_scores`, lowest index on ties.
    pub predicted_class: usize,
}

impl Proposal {
    pub fn new(bbox: BBox, class_scores: Vec<f64>) -> Result<Self> {
        if class_scores.is_empty() {
            return Err(Error::BackendFailure("proposal with no class scores".into()));
        }
        if class_scores.iter().any(|s| !s.is_finite() || *s < 0.0 || *s > 1.0) {
            return Err(Error::BackendFailure(format!(
                "proposal class scores outside [0,1]: {class_scores:?}"
            )));
        }
        let predicted_class = class_scores
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap();
        Ok(Self { bbox, class_scores, predicted_class })
    }

    /// Score of the predicted class.
    pub fn score(&self) -> f64 {
        self.class_scores[self.predicted_class]
    }
}

/// Whether a set holds every window or the suppressed survivors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionSource {
    Raw,
    Nms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub proposals: Vec<Proposal>,
    pub source: DetectionSource,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Weight on one raw-proposal class score, seeding the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ScoreSeed {
    /// Index into the raw proposal set, in `detect_raw` order.
    pub proposal: usize,
    pub class: usize,
    pub weight: f64,
}

/// A pluggable detector. `detect_raw` must enumerate proposals in a
/// deterministic order so indices stay stable across calls on the same
/// image; `score_backward` turns weighted raw-score seeds into an
/// image-shaped gradient for detectors that support it.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;

    fn class_count(&self) -> usize;

    /// Dense proposal set, no suppression.
    fn detect_raw(&self, img: &ImageTensor) -> Result<DetectionSet>;

    /// Raw detection followed by score thresholding and per-class NMS.
    fn detect_nms(
        &self,
        img: &ImageTensor,
        score_thresh: f64,
        iou_thresh: f64,
    ) -> Result<DetectionSet> {
        Ok(nms(&self.detect_raw(img)?, score_thresh, iou_thresh))
    }

    /// Whether `score_backward` is available.
    fn differentiable(&self) -> bool;

    /// Gradient of `sum(seed.weight * class_scores[seed.proposal][seed.class])`
    /// with respect to the image.
    fn score_backward(&self, img: &ImageTensor, seeds: &[ScoreSeed]) -> Result<Grid>;
}

/// Greedy per-class non-maximum suppression. Candidates need score at or
/// above `score_thresh`; a kept box suppresses same-class boxes whose IOU
/// with it exceeds `iou_thresh`. Classes iterate in ascending order and
/// ties break toward the lower original index, so output order is
/// deterministic.
pub fn nms(set: &DetectionSet, score_thresh: f64, iou_thresh: f64) -> DetectionSet {
    let mut kept = Vec::new();
    let n_classes = set.proposals.iter().map(|p| p.class_scores.len()).max().unwrap_or(0);
    for class in 0..n_classes {
        let mut candidates: Vec<usize> = (0..set.proposals.len())
            .filter(|&i| {
                set.proposals[i].predicted_class == class
                    && set.proposals[i].score() >= score_thresh
            })
            .collect();
        candidates.sort_by(|&a, &b| {
            set.proposals[b].score().partial_cmp(&set.proposals[a].score()).unwrap()
        });
        let mut suppressed = vec![false; candidates.len()];
        for i in 0..candidates.len() {
            if suppressed[i] {
                continue;
            }
            let winner = &set.proposals[candidates[i]];
            kept.push(winner.clone());
            for j in (i + 1)..candidates.len() {
                if !suppressed[j] {
                    let other = &set.proposals[candidates[j]];
                    if crate::geometry::iou(&winner.bbox, &other.bbox) > iou_thresh {
                        suppressed[j] = true;
                    }
                }
            }
        }
    }
    DetectionSet { proposals: kept, source: DetectionSource::Nms }
}

/// Greedily matches detections to ground-truth boxes of one class.
/// Detections are visited in descending score order; each claims the
/// unmatched ground truth with the highest IOU if that IOU reaches
/// `iou_thresh`. Returns `(score, is_true_positive)` per detection.
pub fn match_detections(
    detections: &[(BBox, f64)],
    ground_truth: &[BBox],
    iou_thresh: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].1.partial_cmp(&detections[a].1).unwrap());
    let mut claimed = vec![false; ground_truth.len()];
    let mut out = Vec::with_capacity(detections.len());
    for &i in &order {
        let (dbox, score) = &detections[i];
        let best = ground_truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !claimed[*g])
            .map(|(g, gt)| (g, crate::geometry::iou(dbox, gt)))
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap());
        match best {
            Some((g, ov)) if ov >= iou_thresh => {
                claimed[g] = true;
                out.push((*score, true));
            }
            _ => out.push((*score, false)),
        }
    }
    out
}

/// Average precision with all-point interpolation: sort by descending
/// score, trace the precision-recall curve, take the running-maximum
/// precision envelope, and integrate it over recall.
pub fn average_precision(matches: &[(f64, bool)], num_ground_truth: usize) -> Result<f64> {
    if num_ground_truth == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = sorted.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (rank, (_, is_tp)) in sorted.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / num_ground_truth as f64);
    }
    let mut envelope = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        ap += (recall[i] - prev_recall) * envelope[i];
        prev_recall = recall[i];
    }
    Ok(ap)
}

/// Ground truth for one image: boxes with class labels.
pub type GroundTruth = Vec<(BBox, usize)>;

/// Mean AP over classes, pooling detections across images. Classes with
/// no ground truth anywhere are skipped; errors if nothing has ground
/// truth at all.
pub fn mean_average_precision(
    samples: &[(DetectionSet, GroundTruth)],
    class_count: usize,
    iou_thresh: f64,
) -> Result<f64> {
    let mut aps = Vec::new();
    for class in 0..class_count {
        let mut pooled = Vec::new();
        let mut num_gt = 0usize;
        for (dets, gt) in samples {
            let class_gt: Vec<BBox> = gt
                .iter()
                .filter(|(_, c)| *c == class)
                .map(|(b, _)| *b)
                .collect();
            num_gt += class_gt.len();
            let class_dets: Vec<(BBox, f64)> = dets
                .proposals
                .iter()
                .filter(|p| p.predicted_class == class)
                .map(|p| (p.bbox, p.score()))
                .collect();
            pooled.extend(match_detections(&class_dets, &class_gt, iou_thresh));
        }
        if num_gt > 0 {
            aps.push(average_precision(&pooled, num_gt)?);
        }
    }
    if aps.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Renders the canonical sign for a class: 0 is a red octagon, 1 a blue
/// disc, 2 a yellow triangle, all on a light square plate. Edges are
/// supersampled so the raster varies smoothly with size.
pub fn render_sign(class: usize, size: usize) -> Result<ImageTensor> {
    if class >= TEMPLATE_CLASS_COUNT {
        return Err(Error::Config(format!(
            "class {class} out of range, detector has {TEMPLATE_CLASS_COUNT} classes"
        )));
    }
    if size < 4 {
        return Err(Error::Config(format!("sign size {size} too small to render")));
    }
    // Mid-gray surround keeps the corners near the tile mean, so the
    // centered templates concentrate their energy in the sign faces and
    // stay nearly uncorrelated across classes.
    let neutral = [0.5, 0.5, 0.5];
    let red = [0.72, 0.05, 0.08];
    let blue = [0.08, 0.22, 0.72];
    let white = [0.93, 0.93, 0.93];
    // Upward triangle: apex at v = -0.9, base at v = 0.75, centroid at 0.2.
    let tri = |u: f64, v: f64| -> bool {
        (-0.9..=0.75).contains(&v) && u.abs() <= (v + 0.9) / 1.65 * 0.95
    };
    let shade = move |u: f64, v: f64| -> [f64; 3] {
        match class {
            // Red octagon with a white horizontal bar.
            0 => {
                if u.abs().max(v.abs()) > 0.95 || u.abs() + v.abs() > 1.3 {
                    neutral
                } else if v.abs() <= 0.18 && u.abs() <= 0.62 {
                    white
                } else {
                    red
                }
            }
            // Blue annulus around a white core.
            1 => {
                let r2 = u * u + v * v;
                if r2 > 0.81 {
                    neutral
                } else if r2 <= 0.2025 {
                    white
                } else {
                    blue
                }
            }
            // White triangle with a red border.
            _ => {
                if !tri(u, v) {
                    neutral
                } else if tri(u / 0.58, 0.2 + (v - 0.2) / 0.58) {
                    white
                } else {
                    red
                }
            }
        }
    };
    let mut data = Array3::zeros((size, size, 3));
    let sub = 3usize;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..sub {
                for sx in 0..sub {
                    let u = ((x as f64 + (sx as f64 + 0.5) / sub as f64) / size as f64) * 2.0 - 1.0;
                    let v = ((y as f64 + (sy as f64 + 0.5) / sub as f64) / size as f64) * 2.0 - 1.0;
                    let col = shade(u, v);
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for c in 0..3 {
                data[[y, x, c]] = acc[c] / (sub * sub) as f64;
            }
        }
    }
    ImageTensor::new(data)
}

pub const TEMPLATE_CLASS_COUNT: usize = 3;

/// Per-scale template bank: centered templates and their energies.
struct TemplateBank {
    size: usize,
    /// Centered template per class; each channel sums to zero.
    centered: Vec<Grid>,
    /// Sum of squares of the centered template.
    energy: Vec<f64>,
}

/// Sliding-window detector scoring normalized cross-correlation against
/// per-class sign templates, squashed through a sigmoid:
/// `score = sigmoid(sharpness * (ncc - margin))`.
///
/// Window and template are centered per channel, so a uniform color cast
/// correlates with nothing; only spatial structure within each channel
/// scores. The window normalization also carries a contrast floor:
/// windows whose RMS contrast sits well below the floor cannot reach high
/// correlation regardless of their shape, which keeps faint background
/// texture quiet.
pub struct TemplateDetector {
    window_sizes: Vec<usize>,
    stride: usize,
    sharpness: f64,
    margin: f64,
    contrast_floor: f64,
    epsilon: f64,
    banks: Vec<TemplateBank>,
}

impl TemplateDetector {
    pub fn new(
        window_sizes: Vec<usize>,
        stride: usize,
        sharpness: f64,
        margin: f64,
    ) -> Result<Self> {
        if window_sizes.is_empty() || stride == 0 {
            return Err(Error::Config("detector needs window sizes and a positive stride".into()));
        }
        let epsilon = 1e-9;
        let mut banks = Vec::new();
        for &size in &window_sizes {
            let mut centered = Vec::new();
            let mut energy = Vec::new();
            for class in 0..TEMPLATE_CLASS_COUNT {
                let t = render_sign(class, size)?;
                let mut ct = t.data().clone();
                for c in 0..3 {
                    let mut ch = ct.slice_mut(s![.., .., c]);
                    let mean = ch.mean().unwrap();
                    ch.mapv_inplace(|v| v - mean);
                }
                energy.push(ct.iter().map(|v| v * v).sum::<f64>());
                centered.push(ct);
            }
            banks.push(TemplateBank { size, centered, energy });
        }
        Ok(Self {
            window_sizes,
            stride,
            sharpness,
            margin,
            contrast_floor: 0.1,
            epsilon,
            banks,
        })
    }

    /// Overrides the minimum per-sample RMS contrast a window needs to
    /// reach full correlation.
    pub fn with_contrast_floor(mut self, contrast_floor: f64) -> Self {
        self.contrast_floor = contrast_floor;
        self
    }

    /// Step between window positions, in pixels.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Window positions for an image, ordered by ascending window size
    /// then raster order. This is the `detect_raw` proposal order.
    fn windows(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (bank_idx, &size) in self.window_sizes.iter().enumerate() {
            if size > h || size > w {
                continue;
            }
            let mut y = 0;
            while y + size <= h {
                let mut x = 0;
                while x + size <= w {
                    out.push((bank_idx, y, x));
                    x += self.stride;
                }
                y += self.stride;
            }
        }
        out
    }

    fn sigmoid(&self, ncc: f64) -> f64 {
        1.0 / (1.0 + (-self.sharpness * (ncc - self.margin)).exp())
    }

    /// Window statistics shared by the forward and backward passes.
    /// `q_eff` is the per-channel centered window energy lifted by the
    /// contrast floor.
    fn window_stats(&self, img: &Grid, bank: &TemplateBank, y: usize, x: usize) -> WindowStats {
        let size = bank.size;
        let n = (size * size * 3) as f64;
        let win = img.slice(s![y..y + size, x..x + size, ..]);
        let mut mean = [0.0; 3];
        for (c, m) in mean.iter_mut().enumerate() {
            *m = win.slice(s![.., .., c]).mean().unwrap();
        }
        let mut q_eff = n * self.contrast_floor * self.contrast_floor + self.epsilon;
        for ((_, _, c), v) in win.indexed_iter() {
            let u = v - mean[c];
            q_eff += u * u;
        }
        // Template channels are mean-free, so the raw window dots equal
        // the centered ones.
        let mut cross = Vec::with_capacity(TEMPLATE_CLASS_COUNT);
        for class in 0..TEMPLATE_CLASS_COUNT {
            let mut s_c = 0.0;
            for (v, t) in win.iter().zip(bank.centered[class].iter()) {
                s_c += v * t;
            }
            cross.push(s_c);
        }
        WindowStats { mean, q_eff, cross }
    }

    fn ncc(&self, bank: &TemplateBank, stats: &WindowStats, class: usize) -> f64 {
        stats.cross[class] / (stats.q_eff * bank.energy[class]).sqrt()
    }
}

struct WindowStats {
    /// Window mean per channel.
    mean: [f64; 3],
    q_eff: f64,
    /// Dot product of the window with each centered template.
    cross: Vec<f64>,
}

impl Default for TemplateDetector {
    fn default() -> Self {
        Self::new(vec![20, 26, 32, 48], 4, 10.0, 0.35).unwrap()
    }
}

impl DetectorBackend for TemplateDetector {
    fn name(&self) -> &str {
        "template-ncc"
    }

    fn class_count(&self) -> usize {
        TEMPLATE_CLASS_COUNT
    }

    fn detect_raw(&self, img: &ImageTensor) -> Result<DetectionSet> {
        let data = img.data();
        let mut proposals = Vec::new();
        for (bank_idx, y, x) in self.windows(img.height(), img.width()) {
            let bank = &self.banks[bank_idx];
            let stats = self.window_stats(data, bank, y, x);
            let mut scores = Vec::with_capacity(TEMPLATE_CLASS_COUNT);
            for class in 0..TEMPLATE_CLASS_COUNT {
                scores.push(self.sigmoid(self.ncc(bank, &stats, class)));
            }
            let bbox = BBox::new(
                x as f64,
                y as f64,
                (x + bank.size) as f64,
                (y + bank.size) as f64,
            )?;
            proposals.push(Proposal::new(bbox, scores)?);
        }
        Ok(DetectionSet { proposals, source: DetectionSource::Raw })
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn score_backward(&self, img: &ImageTensor, seeds: &[ScoreSeed]) -> Result<Grid> {
        let windows = self.windows(img.height(), img.width());
        let data = img.data();
        let mut grad = Array3::zeros(data.dim());
        for seed in seeds {
            let &(bank_idx, y, x) = windows.get(seed.proposal).ok_or_else(|| {
                Error::BackendFailure(format!(
                    "score seed references proposal {} of {}",
                    seed.proposal,
                    windows.len()
                ))
            })?;
            if seed.class >= TEMPLATE_CLASS_COUNT {
                return Err(Error::BackendFailure(format!(
                    "score seed references class {} of {TEMPLATE_CLASS_COUNT}",
                    seed.class
                )));
            }
            let bank = &self.banks[bank_idx];
            let size = bank.size;
            let stats = self.window_stats(data, bank, y, x);
            let s_c = stats.cross[seed.class];
            let p = self.sigmoid(self.ncc(bank, &stats, seed.class));
            let dscore_dncc = self.sharpness * p * (1.0 - p);
            let denom = (stats.q_eff * bank.energy[seed.class]).sqrt();
            let ratio = s_c / stats.q_eff;
            let t = &bank.centered[seed.class];
            let mut gslice = grad.slice_mut(s![y..y + size, x..x + size, ..]);
            let win = data.slice(s![y..y + size, x..x + size, ..]);
            for (((_, _, c), g), (v, tv)) in
                gslice.indexed_iter_mut().zip(win.iter().zip(t.iter()))
            {
                let u = v - stats.mean[c];
                let dncc = (tv - ratio * u) / denom;
                *g += seed.weight * dscore_dncc * dncc;
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Deserialize)]
struct WireProposal {
    bbox: [f64; 4],
    class_scores: Vec<f64>,
}

/// Detector running as an external process. The command gets the path of
/// a temporary PNG as its final argument and must print a JSON array of
/// `{"bbox": [x_min, y_min, x_max, y_max], "class_scores": [...]}` records
/// on stdout. No gradients.
pub struct SubprocessDetector {
    program: String,
    args: Vec<String>,
    class_count: usize,
    name: String,
}

impl SubprocessDetector {
    pub fn new(program: impl Into<String>, args: Vec<String>, class_count: usize) -> Self {
        let program = program.into();
        let name = format!("subprocess:{program}");
        Self { program, args, class_count, name }
    }
}

impl DetectorBackend for SubprocessDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn detect_raw(&self, img: &ImageTensor) -> Result<DetectionSet> {
        let file = tempfile::Builder::new()
            .prefix("signforge-frame-")
            .suffix(".png")
            .tempfile()?;
        img.write_png(file.path())?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .output()
            .map_err(|e| Error::BackendFailure(format!("spawning {}: {e}", self.program)))?;
        if !output.status.success() {
            return Err(Error::BackendFailure(format!(
                "{} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let wire: Vec<WireProposal> = serde_json::from_slice(&output.stdout)
            .map_err(|e| Error::BackendFailure(format!("parsing detector output: {e}")))?;
        let mut proposals = Vec::with_capacity(wire.len());
        for w in wire {
            if w.class_scores.len() != self.class_count {
                return Err(Error::BackendFailure(format!(
                    "detector reported {} class scores, expected {}",
                    w.class_scores.len(),
                    self.class_count
                )));
            }
            let bbox = BBox::new(w.bbox[0], w.bbox[1], w.bbox[2], w.bbox[3])?;
            proposals.push(Proposal::new(bbox, w.class_scores)?);
        }
        Ok(DetectionSet { proposals, source: DetectionSource::Raw })
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn score_backward(&self, _img: &ImageTensor, _seeds: &[ScoreSeed]) -> Result<Grid> {
        Err(Error::BackendFailure(format!(
            "{} does not expose score gradients",
            self.name
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Placement, emb, iou};
    use approx::assert_abs_diff_eq;

    fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn proposal_argmax_breaks_ties_low() {
        let p = Proposal::new(bbox(0.0, 0.0, 1.0, 1.0), vec![0.2, 0.7, 0.7]).unwrap();
        assert_eq!(p.predicted_class, 1);
        assert_eq!(p.score(), 0.7);
    }

    #[test]
    fn proposal_rejects_out_of_range_scores() {
        assert!(Proposal::new(bbox(0.0, 0.0, 1.0, 1.0), vec![0.2, 1.3]).is_err());
        assert!(Proposal::new(bbox(0.0, 0.0, 1.0, 1.0), vec![]).is_err());
    }

    fn raw_set(entries: Vec<(BBox, Vec<f64>)>) -> DetectionSet {
        DetectionSet {
            proposals: entries
                .into_iter()
                .map(|(b, s)| Proposal::new(b, s).unwrap())
                .collect(),
            source: DetectionSource::Raw,
        }
    }

    #[test]
    fn nms_suppresses_overlapping_same_class() {
        let set = raw_set(vec![
            (bbox(0.0, 0.0, 10.0, 10.0), vec![0.9, 0.1]),
            (bbox(1.0, 1.0, 11.0, 11.0), vec![0.8, 0.1]),
            (bbox(30.0, 30.0, 40.0, 40.0), vec![0.7, 0.1]),
        ]);
        let out = nms(&set, 0.25, 0.45);
        assert_eq!(out.len(), 2);
        assert_eq!(out.source, DetectionSource::Nms);
        assert_eq!(out.proposals[0].score(), 0.9);
        assert_eq!(out.proposals[1].score(), 0.7);
    }

    #[test]
    fn nms_keeps_overlapping_different_classes() {
        let set = raw_set(vec![
            (bbox(0.0, 0.0, 10.0, 10.0), vec![0.9, 0.1]),
            (bbox(1.0, 1.0, 11.0, 11.0), vec![0.1, 0.8]),
        ]);
        let out = nms(&set, 0.25, 0.45);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_drops_below_threshold() {
        let set = raw_set(vec![(bbox(0.0, 0.0, 10.0, 10.0), vec![0.2, 0.1])]);
        assert!(nms(&set, 0.25, 0.45).is_empty());
        // Threshold is inclusive.
        let set = raw_set(vec![(bbox(0.0, 0.0, 10.0, 10.0), vec![0.25, 0.1])]);
        assert_eq!(nms(&set, 0.25, 0.45).len(), 1);
    }

    #[test]
    fn average_precision_matches_worked_example() {
        // Two ground truths; detections sorted by score: TP, FP, TP.
        let matches = vec![(0.9, true), (0.8, false), (0.7, true)];
        let ap = average_precision(&matches, 2).unwrap();
        assert_abs_diff_eq!(ap, 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn average_precision_edge_cases() {
        assert_eq!(average_precision(&[(0.9, true)], 1).unwrap(), 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.8, false)], 3).unwrap(), 0.0);
        assert_eq!(average_precision(&[], 2).unwrap(), 0.0);
        assert!(matches!(average_precision(&[(0.9, true)], 0), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn match_detections_is_greedy_by_score() {
        let gt = vec![bbox(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![
            (bbox(0.0, 0.0, 10.0, 9.0), 0.6),
            (bbox(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        let matched = match_detections(&dets, &gt, 0.5);
        // The 0.9 detection claims the ground truth first.
        assert_eq!(matched, vec![(0.9, true), (0.6, false)]);
    }

    #[test]
    fn mean_average_precision_pools_and_averages() {
        let det_a = raw_set(vec![
            (bbox(0.0, 0.0, 10.0, 10.0), vec![0.9, 0.0]),
            (bbox(40.0, 40.0, 50.0, 50.0), vec![0.0, 0.8]),
        ]);
        let gt_a: GroundTruth = vec![
            (bbox(0.0, 0.0, 10.0, 10.0), 0),
            (bbox(40.0, 40.0, 50.0, 50.0), 1),
        ];
        let map = mean_average_precision(&[(det_a, gt_a)], 2, 0.5).unwrap();
        assert_abs_diff_eq!(map, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn blank_image_scores_stay_low() {
        let det = TemplateDetector::default();
        let img = ImageTensor::constant(64, 64, 0.6).unwrap();
        let raw = det.detect_raw(&img).unwrap();
        assert!(!raw.is_empty());
        for p in &raw.proposals {
            for &s in &p.class_scores {
                assert!(s < 0.05, "blank window scored {s}");
            }
        }
    }

    #[test]
    fn rendered_sign_is_detected_where_pasted() {
        let det = TemplateDetector::default();
        let bg = ImageTensor::constant(96, 96, 0.55).unwrap();
        let sign = render_sign(1, 32).unwrap();
        let place = Placement::new(bbox(20.0, 20.0, 52.0, 52.0), 1.0, 0.0).unwrap();
        let embedded = emb(&bg, &sign, &place).unwrap();
        let dets = det.detect_nms(&embedded.composite, 0.25, 0.45).unwrap();
        let hit = dets
            .proposals
            .iter()
            .find(|p| p.predicted_class == 1 && iou(&p.bbox, &embedded.anchor) >= 0.5);
        let hit = hit.expect("pasted sign not detected");
        assert!(hit.score() > 0.9, "score {}", hit.score());
    }

    #[test]
    fn each_class_template_maps_to_its_own_class() {
        let det = TemplateDetector::default();
        let bg = ImageTensor::constant(96, 96, 0.55).unwrap();
        for class in 0..TEMPLATE_CLASS_COUNT {
            let sign = render_sign(class, 32).unwrap();
            let place = Placement::new(bbox(32.0, 32.0, 64.0, 64.0), 1.0, 0.0).unwrap();
            let embedded = emb(&bg, &sign, &place).unwrap();
            let dets = det.detect_nms(&embedded.composite, 0.25, 0.45).unwrap();
            assert!(
                dets.proposals
                    .iter()
                    .any(|p| p.predicted_class == class
                        && iou(&p.bbox, &embedded.anchor) >= 0.5),
                "class {class} sign not recovered"
            );
        }
    }

    #[test]
    fn detect_raw_order_is_deterministic() {
        let det = TemplateDetector::default();
        let img = {
            let mut data = Array3::zeros((64, 64, 3));
            for ((y, x, c), v) in data.indexed_iter_mut() {
                *v = (((y * 7 + x * 13 + c * 3) % 11) as f64) / 11.0;
            }
            ImageTensor::new(data).unwrap()
        };
        let a = det.detect_raw(&img).unwrap();
        let b = det.detect_raw(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_backward_matches_finite_differences() {
        let det = TemplateDetector::new(vec![12], 6, 10.0, 0.35).unwrap();
        let img = {
            let mut data = Array3::zeros((24, 24, 3));
            for ((y, x, c), v) in data.indexed_iter_mut() {
                *v = 0.2 + 0.6 * (((y * 5 + x * 11 + c * 17) % 7) as f64) / 7.0;
            }
            ImageTensor::new(data).unwrap()
        };
        let raw = det.detect_raw(&img).unwrap();
        assert!(raw.len() >= 4);
        let seeds = vec![
            ScoreSeed { proposal: 0, class: 0, weight: 1.0 },
            ScoreSeed { proposal: 2, class: 1, weight: -0.7 },
            ScoreSeed { proposal: 3, class: 2, weight: 0.4 },
        ];
        let grad = det.score_backward(&img, &seeds).unwrap();
        let objective = |img: &ImageTensor| -> f64 {
            let raw = det.detect_raw(img).unwrap();
            seeds
                .iter()
                .map(|s| s.weight * raw.proposals[s.proposal].class_scores[s.class])
                .sum()
        };
        let eps = 1e-6;
        for &(y, x, c) in &[(0usize, 0usize, 0usize), (5, 5, 1), (11, 3, 2), (8, 14, 0)] {
            let mut plus = img.data().clone();
            plus[[y, x, c]] += eps;
            let mut minus = img.data().clone();
            minus[[y, x, c]] -= eps;
            let fd = (objective(&ImageTensor::new(plus).unwrap())
                - objective(&ImageTensor::new(minus).unwrap()))
                / (2.0 * eps);
            let g = grad[[y, x, c]];
            assert!(
                (g - fd).abs() <= 1e-8 + 1e-4 * fd.abs(),
                "pixel ({y},{x},{c}): analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn score_backward_rejects_bad_seed() {
        let det = TemplateDetector::default();
        let img = ImageTensor::constant(48, 48, 0.5).unwrap();
        let seeds = vec![ScoreSeed { proposal: 10_000_000, class: 0, weight: 1.0 }];
        assert!(det.score_backward(&img, &seeds).is_err());
    }

    #[test]
    fn subprocess_detector_round_trips_json() {
        let script = "import sys, json; \
            json.dump([{'bbox': [1.0, 2.0, 11.0, 12.0], 'class_scores': [0.1, 0.9, 0.0]}], \
            sys.stdout)";
        let det = SubprocessDetector::new("python3", vec!["-c".into(), script.into()], 3);
        assert!(!det.differentiable());
        let img = ImageTensor::constant(16, 16, 0.5).unwrap();
        let raw = det.detect_raw(&img).unwrap();
        assert_eq!(raw.len(), 1);
        assert_eq!(raw.proposals[0].predicted_class, 1);
        assert_eq!(raw.proposals[0].bbox, bbox(1.0, 2.0, 11.0, 12.0));
        assert!(det.score_backward(&img, &[]).is_err());
    }

    #[test]
    fn subprocess_detector_surfaces_failures() {
        let det = SubprocessDetector::new(
            "python3",
            vec!["-c".into(), "import sys; sys.exit(3)".into()],
            3,
        );
        let img = ImageTensor::constant(8, 8, 0.5).unwrap();
        assert!(matches!(det.detect_raw(&img), Err(Error::BackendFailure(_))));
    }
}
