//! HOI detection metrics: interaction mAP over Full/Rare/Non-Rare, mean
//! recall at K and the object-conditioned verb-distribution mPCC.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::boxes::{iou, BoxXyxy};
use crate::infer::{truncate_per_image, Detection, DEFAULT_TOP_K};
use crate::priors::{AnnotationSet, RareFlags, Vocabulary};
use crate::tensor::Matrix;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// `(object class, verb)`.
pub type Interaction = (usize, usize);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth contains no interactions")]
    EmptyGroundTruth,
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Ranked TP/FP flags of one interaction class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionMatches {
    pub scores: Vec<f64>,
    pub tp: Vec<bool>,
    pub n_gt: usize,
}

impl InteractionMatches {
    pub fn num_tp(&self) -> usize {
        self.tp.iter().filter(|t| **t).count()
    }
}

type GtIndex<'a> = HashMap<Interaction, HashMap<&'a str, Vec<(BoxXyxy, BoxXyxy)>>>;

fn index_ground_truth(gts: &AnnotationSet) -> GtIndex<'_> {
    let mut index: GtIndex = HashMap::new();
    for im in &gts.images {
        for t in &im.triplets {
            for &v in &t.verbs {
                index.entry((t.object_class, v)).or_default().entry(im.id.as_str()).or_default().push((t.human, t.object));
            }
        }
    }
    index
}

/// Greedy matching per interaction class. Predictions are ranked by score
/// (ties keep input order); each claims the unclaimed ground truth of the
/// same image and interaction with the largest `min(IoU human, IoU object)`,
/// provided both IoUs exceed `iou_thresh`. Zero-score detections are
/// ignored. Every interaction with ground truth appears in the result.
pub fn match_detections(dets: &[Detection], gts: &AnnotationSet, iou_thresh: f64) -> BTreeMap<Interaction, InteractionMatches> {
    let index = index_ground_truth(gts);
    let mut out: BTreeMap<Interaction, InteractionMatches> = BTreeMap::new();
    for (key, per_image) in &index {
        out.entry(*key).or_default().n_gt = per_image.values().map(Vec::len).sum();
    }
    let mut by_class: BTreeMap<Interaction, Vec<&Detection>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.score > 0.0) {
        by_class.entry((d.object_class, d.verb)).or_default().push(d);
    }
    for (key, mut list) in by_class {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        let entry = out.entry(key).or_default();
        let mut claimed: HashMap<&str, Vec<bool>> = HashMap::new();
        for d in list {
            let mut best: Option<(usize, f64)> = None;
            if let Some(cands) = index.get(&key).and_then(|m| m.get(d.image_id.as_str())) {
                let taken = claimed.entry(d.image_id.as_str()).or_insert_with(|| vec![false; cands.len()]);
                for (i, (h, o)) in cands.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    let (ih, io) = (iou(&d.human, h), iou(&d.object, o));
                    if ih > iou_thresh && io > iou_thresh {
                        let q = ih.min(io);
                        if best.is_none_or(|(_, b)| q > b) {
                            best = Some((i, q));
                        }
                    }
                }
                if let Some((i, _)) = best {
                    taken[i] = true;
                }
            }
            entry.scores.push(d.score);
            entry.tp.push(best.is_some());
        }
    }
    out
}

/// All-point interpolated area under the precision–recall curve of a ranked
/// TP/FP sequence. `None` when there is no ground truth.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Mean over interactions with ground truth of the fraction of ground truth
/// recalled by each image's `k` best detections, in percent.
pub fn mean_recall_at_k(dets: &[Detection], gts: &AnnotationSet, k: usize, iou_thresh: f64) -> Option<f64> {
    let kept = truncate_per_image(dets, k);
    let recalls: Vec<f64> = match_detections(&kept, gts, iou_thresh)
        .values()
        .filter(|m| m.n_gt > 0)
        .map(|m| m.num_tp() as f64 / m.n_gt as f64)
        .collect();
    if recalls.is_empty() {
        None
    } else {
        Some(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Object-conditioned verb-distribution agreement.
#[derive(Clone, Debug, PartialEq)]
pub struct MpccResult {
    pub mean: Option<f64>,
    /// PCC per predicted object class that had support and variance.
    pub per_object: BTreeMap<usize, f64>,
}

/// For each predicted object class, the score-weighted verb histogram of
/// rightly-localized detections (both boxes IoU > `iou_thresh` against some
/// ground-truth pair of the image) is correlated with row `o` of
/// `train_s`. Classes whose histogram or prior row has zero variance are
/// skipped with a warning.
pub fn mpcc(dets: &[Detection], gts: &AnnotationSet, train_s: &Matrix, iou_thresh: f64) -> MpccResult {
    let by_image: HashMap<&str, &[crate::priors::HoiTriplet]> = gts.images.iter().map(|im| (im.id.as_str(), im.triplets.as_slice())).collect();
    let mut hist: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.score > 0.0) {
        let localized = by_image
            .get(d.image_id.as_str())
            .is_some_and(|ts| ts.iter().any(|t| iou(&d.human, &t.human) > iou_thresh && iou(&d.object, &t.object) > iou_thresh));
        if localized && d.object_class < train_s.rows() {
            hist.entry(d.object_class).or_insert_with(|| vec![0.0; train_s.cols()])[d.verb] += d.score;
        }
    }
    let mut per_object = BTreeMap::new();
    for (o, h) in hist {
        match pearson(&h, train_s.row(o)) {
            Some(r) => {
                per_object.insert(o, r);
            }
            None => log::warn!("mpcc: object class {o} skipped (zero-variance verb distribution)"),
        }
    }
    let mean = if per_object.is_empty() { None } else { Some(per_object.values().sum::<f64>() / per_object.len() as f64) };
    MpccResult { mean, per_object }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub iou_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_TOP_K, iou_thresh: DEFAULT_IOU_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionAp {
    pub interaction: Interaction,
    pub ap: f64,
    pub n_gt: usize,
    pub rare: bool,
}

/// Metrics in percent, except the correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_interaction: Vec<InteractionAp>,
    pub map_full: f64,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub n_rare: usize,
    pub n_nonrare: usize,
    pub k: usize,
    pub mr_at_k: f64,
    pub mpcc: Option<MpccResult>,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Truncates to the top `k` per image, then computes every metric. mPCC is
/// included when the training object–verb table is given.
pub fn evaluate(dets: &[Detection], gts: &AnnotationSet, rare: &RareFlags, train_s: Option<&Matrix>, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    if cfg.k < 1 {
        return Err(EvalError::Parameter("k must be >= 1".into()));
    }
    if !(cfg.iou_thresh > 0.0 && cfg.iou_thresh < 1.0) {
        return Err(EvalError::Parameter(format!("IoU threshold must lie in (0, 1), got {}", cfg.iou_thresh)));
    }
    let kept = truncate_per_image(dets, cfg.k);
    let matches = match_detections(&kept, gts, cfg.iou_thresh);
    let mut per_interaction = Vec::new();
    let mut recalls = Vec::new();
    for (&key, m) in &matches {
        if let Some(ap) = average_precision(&m.tp, m.n_gt) {
            per_interaction.push(InteractionAp { interaction: key, ap: 100.0 * ap, n_gt: m.n_gt, rare: rare.is_rare(key.0, key.1) });
            recalls.push(100.0 * m.num_tp() as f64 / m.n_gt as f64);
        }
    }
    if per_interaction.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let all: Vec<f64> = per_interaction.iter().map(|a| a.ap).collect();
    let rare_aps: Vec<f64> = per_interaction.iter().filter(|a| a.rare).map(|a| a.ap).collect();
    let nonrare_aps: Vec<f64> = per_interaction.iter().filter(|a| !a.rare).map(|a| a.ap).collect();
    Ok(EvalReport {
        map_full: mean(&all).expect("nonempty"),
        map_rare: mean(&rare_aps),
        map_nonrare: mean(&nonrare_aps),
        n_rare: rare_aps.len(),
        n_nonrare: nonrare_aps.len(),
        k: cfg.k,
        mr_at_k: mean(&recalls).expect("nonempty"),
        mpcc: train_s.map(|s| mpcc(&kept, gts, s, cfg.iou_thresh)),
        per_interaction,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Human-readable summary followed by per-interaction AP.
    pub fn to_table(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10} {:>8}", "set", "mAP(%)", "classes");
        let _ = writeln!(s, "{:<12} {:>10.4} {:>8}", "Full", self.map_full, self.n_rare + self.n_nonrare);
        let _ = writeln!(s, "{:<12} {:>10} {:>8}", "Rare", opt(self.map_rare), self.n_rare);
        let _ = writeln!(s, "{:<12} {:>10} {:>8}", "Non-Rare", opt(self.map_nonrare), self.n_nonrare);
        let _ = writeln!(s, "mR@{}: {:.4}%", self.k, self.mr_at_k);
        if let Some(m) = &self.mpcc {
            let _ = writeln!(s, "mPCC: {} over {} object classes", opt(m.mean), m.per_object.len());
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:<16} {:>6} {:>5} {:>10}", "object", "verb", "n_gt", "rare", "AP(%)");
        for a in &self.per_interaction {
            let (o, v) = a.interaction;
            let _ = writeln!(
                s,
                "{:<16} {:<16} {:>6} {:>5} {:>10.4}",
                vocab.objects()[o],
                vocab.verbs()[v],
                a.n_gt,
                if a.rare { "yes" } else { "no" },
                a.ap
            );
        }
        s
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map_full={}", self.map_full);
        let _ = writeln!(s, "map_rare={}", self.map_rare.map_or("nan".into(), |v| v.to_string()));
        let _ = writeln!(s, "map_nonrare={}", self.map_nonrare.map_or("nan".into(), |v| v.to_string()));
        let _ = writeln!(s, "n_rare={}", self.n_rare);
        let _ = writeln!(s, "n_nonrare={}", self.n_nonrare);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "mr_at_k={}", self.mr_at_k);
        if let Some(m) = &self.mpcc {
            let _ = writeln!(s, "mpcc={}", m.mean.map_or("nan".into(), |v| v.to_string()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{HoiTriplet, ImageAnnotations};

    fn unit() -> BoxXyxy {
        BoxXyxy::new(0.1, 0.1, 0.5, 0.5)
    }

    fn det(image: &str, human: BoxXyxy, object: BoxXyxy, verb: usize, score: f64) -> Detection {
        Detection { image_id: image.into(), human, object, object_class: 0, verb, score }
    }

    fn one_gt() -> AnnotationSet {
        AnnotationSet { images: vec![ImageAnnotations { id: "a".into(), triplets: vec![HoiTriplet::new(unit(), unit(), 0, vec![0])] }] }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false], 2), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        assert_eq!(average_precision(&[false, false], 3), Some(0.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[true], 0), None);
        // TP FP TP with 2 GT: envelope at recall 1.0 is 2/3.
        assert!((average_precision(&[true, false, true], 2).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn matching_rules() {
        let gts = one_gt();
        let m = match_detections(&[det("a", unit(), unit(), 0, 0.9)], &gts, 0.5);
        assert_eq!(m[&(0, 0)].tp, vec![true]);
        let m = match_detections(&[det("a", unit(), unit(), 0, 0.9), det("a", unit(), unit(), 0, 0.8)], &gts, 0.5);
        assert_eq!(m[&(0, 0)].tp, vec![true, false]);
        let shifted = BoxXyxy::new(0.3, 0.1, 0.7, 0.5);
        assert!((iou(&shifted, &unit()) - 1.0 / 3.0).abs() < 1e-12);
        let m = match_detections(&[det("a", unit(), shifted, 0, 0.9)], &gts, 0.5);
        assert_eq!(m[&(0, 0)].tp, vec![false]);
        let m = match_detections(&[det("b", unit(), unit(), 0, 0.9)], &gts, 0.5);
        assert_eq!(m[&(0, 0)].tp, vec![false]);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[0.1, 0.2, 0.7], &[0.1, 0.2, 0.7]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[0.2, 0.8], &[0.8, 0.2]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[0.5, 0.5], &[0.2, 0.8]), None);
    }

    #[test]
    fn perfect_detector_scores_hundred() {
        let gts = one_gt();
        let rare = RareFlags { counts: vec![vec![20, 0]], threshold: 10 };
        let r = evaluate(&[det("a", unit(), unit(), 0, 1.0)], &gts, &rare, None, &EvalConfig::default()).unwrap();
        assert_eq!(r.map_full, 100.0);
        assert_eq!(r.mr_at_k, 100.0);
        assert_eq!(r.map_rare, None);
        assert!(r.to_key_values().contains("map_full=100\n"));
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let rare = RareFlags { counts: vec![vec![0]], threshold: 10 };
        let e = evaluate(&[], &AnnotationSet::default(), &rare, None, &EvalConfig::default());
        assert_eq!(e, Err(EvalError::EmptyGroundTruth));
    }
}
