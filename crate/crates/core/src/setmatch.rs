//! Set-prediction training: the bipartite matcher with its composite cost,
//! and the weighted training loss over matched and unmatched queries.

use crate::boxes::{giou_and_grad, iou, BoxCxcywh, BoxXyxy};
use crate::priors::HoiTriplet;
use crate::tensor::ops::{sigmoid_scalar, softmax_rows};
use crate::tensor::{Graph, Matrix, TensorError, Var};

pub use crate::boxes::giou;

/// Weights of the five loss terms: similarity-KL, box L1, GIoU, object
/// cross-entropy and verb loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub skl: f64,
    pub bbox: f64,
    pub giou: f64,
    pub object: f64,
    pub verb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { skl: 1.0, bbox: 2.5, giou: 1.0, object: 1.0, verb: 1.0 }
    }
}

impl LossWeights {
    pub fn from_array(w: [f64; 5]) -> Result<Self, TensorError> {
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(TensorError::Domain { op: "loss_weights", msg: format!("weights must be finite and >= 0: {w:?}") });
        }
        Ok(Self { skl: w[0], bbox: w[1], giou: w[2], object: w[3], verb: w[4] })
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.skl, self.bbox, self.giou, self.object, self.verb]
    }
}

/// Coefficients of the matching cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub verb: f64,
    pub bbox: f64,
    pub giou: f64,
}

impl From<LossWeights> for CostWeights {
    fn from(w: LossWeights) -> Self {
        Self { class: w.object, verb: w.verb, bbox: w.bbox, giou: w.giou }
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        LossWeights::default().into()
    }
}

/// Verb loss choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VerbLoss {
    Focal { gamma: f64, alpha: f64 },
    Bce,
}

impl Default for VerbLoss {
    fn default() -> Self {
        VerbLoss::Focal { gamma: 2.0, alpha: 0.25 }
    }
}

impl VerbLoss {
    fn parts(self) -> (f64, Option<f64>) {
        match self {
            VerbLoss::Focal { gamma, alpha } => (gamma, Some(alpha)),
            VerbLoss::Bce => (0.0, None),
        }
    }
}

/// Per-query outputs of the heads, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `N_q x 4`, normalized `(cx, cy, w, h)`.
    pub human_boxes: Matrix,
    /// `N_q x 4`, normalized `(cx, cy, w, h)`.
    pub object_boxes: Matrix,
    /// `N_q x (N_o + 1)`, background last.
    pub object_logits: Matrix,
    /// `N_q x N_p`.
    pub verb_logits: Matrix,
}

impl Prediction {
    pub fn num_queries(&self) -> usize {
        self.object_logits.rows()
    }
}

/// Sigmoid focal loss averaged over entries, on plain values.
pub fn focal_loss(logits: &Matrix, targets: &Matrix, gamma: f64, alpha: Option<f64>) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.focal_loss(l, targets, gamma, alpha)?;
    Ok(g.scalar(out))
}

/// Binary cross-entropy: focal loss with `gamma = 0` and no class weight.
pub fn bce_loss(logits: &Matrix, targets: &Matrix) -> Result<f64, TensorError> {
    focal_loss(logits, targets, 0.0, None)
}

fn l1(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Composite cost of assigning query `q` to ground truth `gt`:
/// `class·(1 − p(gt class)) + verb·mean_{v ∈ gt}(1 − σ(verb logit))
///  + bbox·(L1 human + L1 object) + giou·(2 − GIoU human − GIoU object)`.
///
/// `object_probs` holds the softmax of the object logits.
pub fn matching_cost(gt: &HoiTriplet, pred: &Prediction, object_probs: &Matrix, q: usize, w: &CostWeights) -> f64 {
    let class_term = 1.0 - object_probs.get(q, gt.object_class);
    let verb_term = if gt.verbs.is_empty() {
        0.0
    } else {
        gt.verbs.iter().map(|&v| 1.0 - sigmoid_scalar(pred.verb_logits.get(q, v))).sum::<f64>() / gt.verbs.len() as f64
    };
    let ph = BoxCxcywh::from_slice(pred.human_boxes.row(q));
    let po = BoxCxcywh::from_slice(pred.object_boxes.row(q));
    let box_term = l1(ph.to_array(), gt.human.to_cxcywh().to_array()) + l1(po.to_array(), gt.object.to_cxcywh().to_array());
    let giou_term = 2.0 - giou_and_grad(&ph.to_xyxy(), &gt.human).0 - giou_and_grad(&po.to_xyxy(), &gt.object).0;
    w.class * class_term + w.verb * verb_term + w.bbox * box_term + w.giou * giou_term
}

/// `n_gt x N_q` matrix of [`matching_cost`].
pub fn cost_matrix(gts: &[HoiTriplet], pred: &Prediction, w: &CostWeights) -> Matrix {
    let probs = softmax_rows(&pred.object_logits);
    Matrix::from_fn(gts.len(), pred.num_queries(), |i, q| matching_cost(&gts[i], pred, &probs, q, w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` is the query matched to ground truth `i`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatchError {
    #[error("cannot match {n_gt} ground truths to {n_pred} predictions")]
    TooManyTargets { n_gt: usize, n_pred: usize },
    #[error("non-finite matching cost at ({0}, {1})")]
    NonFinite(usize, usize),
}

/// Minimum-cost assignment for the rows listed in `rows` onto the columns in
/// `cols` (`rows.len() <= cols.len()`), by shortest augmenting paths with
/// potentials. Returns the chosen column per row and the cost.
fn solve_assignment(cost: &Matrix, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assign.iter().enumerate().map(|(i, &c)| cost.get(rows[i], c)).sum();
    (assign, total)
}

/// Injective assignment of every row (ground truth) to a column
/// (prediction) with minimum total cost. Among optimal assignments the
/// lexicographically smallest is returned, comparing costs with a relative
/// tolerance of 1e-12.
pub fn hungarian(cost: &Matrix) -> Result<MatchResult, MatchError> {
    let (n, m) = cost.shape();
    if n > m {
        return Err(MatchError::TooManyTargets { n_gt: n, n_pred: m });
    }
    if let Some(k) = cost.data().iter().position(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite(k / m, k % m));
    }
    let mut free: Vec<usize> = (0..m).collect();
    let mut assignment = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut best: Option<(usize, f64)> = None;
        let mut candidates = Vec::with_capacity(free.len());
        for (k, &j) in free.iter().enumerate() {
            let mut cols = free.clone();
            cols.remove(k);
            let (_, sub) = solve_assignment(cost, &rest, &cols);
            let total = fixed_cost + cost.get(i, j) + sub;
            candidates.push((j, total));
            if best.is_none_or(|(_, b)| total < b) {
                best = Some((j, total));
            }
        }
        let (_, min_total) = best.expect("at least one free column");
        let tol = 1e-12 * min_total.abs().max(1.0);
        let chosen = candidates.iter().filter(|(_, t)| *t <= min_total + tol).map(|(j, _)| *j).min().expect("minimum is a candidate");
        fixed_cost += cost.get(i, chosen);
        free.retain(|&j| j != chosen);
        assignment.push(chosen);
    }
    let total_cost = assignment.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(MatchResult { assignment, total_cost })
}

/// Head outputs recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub human_boxes: Var,
    pub object_boxes: Var,
    pub object_logits: Var,
    pub verb_logits: Var,
}

impl HeadVars {
    pub fn prediction(&self, g: &Graph) -> Prediction {
        Prediction {
            human_boxes: g.value(self.human_boxes).clone(),
            object_boxes: g.value(self.object_boxes).clone(),
            object_logits: g.value(self.object_logits).clone(),
            verb_logits: g.value(self.verb_logits).clone(),
        }
    }
}

/// Options of [`total_loss`] that are not loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub verb_loss: VerbLoss,
    /// Relative weight of the background class in the object loss.
    pub background_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), verb_loss: VerbLoss::default(), background_weight: 1.0 }
    }
}

/// Loss terms as graph nodes plus their values.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub skl: f64,
    pub bbox: f64,
    pub giou: f64,
    pub object: f64,
    pub verb: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `step SKL box GIoU obj verb total` as one text record.
    pub fn record(&self, step: usize) -> String {
        format!(
            "{step} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e}",
            self.skl, self.bbox, self.giou, self.object, self.verb, self.total
        )
    }

    pub const HEADER: &'static str = "# step skl box giou obj verb total";

    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.skl += scale * other.skl;
        self.bbox += scale * other.bbox;
        self.giou += scale * other.giou;
        self.object += scale * other.object;
        self.verb += scale * other.verb;
        self.total += scale * other.total;
    }
}

/// Weighted training loss for one image.
///
/// Box L1 (summed over both boxes, averaged over matches), GIoU loss
/// (`1 − GIoU`, both boxes) and the verb loss use matched queries only. The
/// object cross-entropy covers every query, with background as the target
/// of unmatched ones. `skl` is the similarity-KL node, if computed.
pub fn total_loss(
    g: &mut Graph,
    heads: &HeadVars,
    gts: &[HoiTriplet],
    matching: &MatchResult,
    skl: Option<Var>,
    cfg: &LossConfig,
) -> Result<LossTerms, TensorError> {
    let nq = g.value(heads.object_logits).rows();
    let num_classes = g.value(heads.object_logits).cols();
    let num_verbs = g.value(heads.verb_logits).cols();
    let background = num_classes - 1;
    let w = cfg.weights;

    let mut terms: Vec<(f64, Var)> = Vec::new();
    let mut breakdown = LossBreakdown::default();

    if let Some(s) = skl {
        breakdown.skl = g.scalar(s);
        terms.push((w.skl, s));
    }

    let mut targets = vec![background; nq];
    for (gt, &q) in gts.iter().zip(&matching.assignment) {
        targets[q] = gt.object_class;
    }
    let mut class_weights = vec![1.0; num_classes];
    class_weights[background] = cfg.background_weight;
    let obj = g.cross_entropy(heads.object_logits, &targets, &class_weights)?;
    breakdown.object = g.scalar(obj);
    terms.push((w.object, obj));

    if !gts.is_empty() {
        let n = gts.len() as f64;
        let q = &matching.assignment;
        let th = Matrix::from_rows(&gts.iter().map(|t| t.human.to_cxcywh().to_array()).collect::<Vec<_>>());
        let to = Matrix::from_rows(&gts.iter().map(|t| t.object.to_cxcywh().to_array()).collect::<Vec<_>>());
        let ph = g.select_rows(heads.human_boxes, q)?;
        let po = g.select_rows(heads.object_boxes, q)?;

        let th_c = g.constant(th.clone());
        let to_c = g.constant(to.clone());
        let dh = g.sub(ph, th_c)?;
        let dh = g.abs(dh);
        let do_ = g.sub(po, to_c)?;
        let do_ = g.abs(do_);
        let sh = g.sum_all(dh);
        let so = g.sum_all(do_);
        let l1 = g.add(sh, so)?;
        let bbox = g.scale(l1, 1.0 / n);
        breakdown.bbox = g.scalar(bbox);
        terms.push((w.bbox, bbox));

        let gh = g.giou_loss(ph, &th)?;
        let go = g.giou_loss(po, &to)?;
        let giou = g.add(gh, go)?;
        breakdown.giou = g.scalar(giou);
        terms.push((w.giou, giou));

        let verb_targets = Matrix::from_rows(&gts.iter().map(|t| t.multi_hot(num_verbs)).collect::<Vec<_>>());
        let pv = g.select_rows(heads.verb_logits, q)?;
        let (gamma, alpha) = cfg.verb_loss.parts();
        let verb = g.focal_loss(pv, &verb_targets, gamma, alpha)?;
        breakdown.verb = g.scalar(verb);
        terms.push((w.verb, verb));
    }

    let mut total: Option<Var> = None;
    for (weight, term) in terms {
        let scaled = g.scale(term, weight);
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    let total = total.expect("object term always present");
    breakdown.total = g.scalar(total);
    Ok(LossTerms { total, breakdown })
}

/// IoU of both boxes of a predicted pair against a ground truth.
pub fn pair_iou(human: &BoxXyxy, object: &BoxXyxy, gt: &HoiTriplet) -> (f64, f64) {
    (iou(human, &gt.human), iou(object, &gt.object))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hungarian_small_cases() {
        let r = hungarian(&Matrix::from_rows(&[[4.0]])).unwrap();
        assert_eq!(r.assignment, vec![0]);
        assert_eq!(r.total_cost, 4.0);
        let r = hungarian(&Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]])).unwrap();
        assert_eq!((r.assignment, r.total_cost), (vec![0, 1], 2.0));
        let r = hungarian(&Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]])).unwrap();
        assert_eq!((r.assignment, r.total_cost), (vec![1, 0], 2.0));
        assert!(matches!(hungarian(&Matrix::zeros(3, 2)), Err(MatchError::TooManyTargets { .. })));
        assert_eq!(hungarian(&Matrix::zeros(0, 5)).unwrap().assignment, Vec::<usize>::new());
    }

    #[test]
    fn hungarian_ties_take_lexicographically_smallest() {
        let r = hungarian(&Matrix::filled(2, 3, 1.0)).unwrap();
        assert_eq!(r.assignment, vec![0, 1]);
        let r = hungarian(&Matrix::from_rows(&[[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]])).unwrap();
        assert_eq!(r.assignment, vec![0, 1]);
    }

    #[test]
    fn hungarian_rejects_non_finite() {
        assert!(matches!(hungarian(&Matrix::from_rows(&[[1.0, f64::NAN]])), Err(MatchError::NonFinite(0, 1))));
    }

    #[test]
    fn focal_examples() {
        let t1 = Matrix::scalar(1.0);
        assert!(focal_loss(&Matrix::scalar(30.0), &t1, 2.0, Some(0.25)).unwrap() < 1e-10);
        assert!((bce_loss(&Matrix::scalar(0.0), &t1).unwrap() - 2f64.ln()).abs() < 1e-15);
        let focal = focal_loss(&Matrix::scalar(3.0), &t1, 2.0, None).unwrap();
        assert!(focal < bce_loss(&Matrix::scalar(3.0), &t1).unwrap());
    }

    fn perfect_prediction(gt: &HoiTriplet, num_classes: usize, num_verbs: usize) -> Prediction {
        let mut obj = vec![-20.0; num_classes];
        obj[gt.object_class] = 20.0;
        let verbs: Vec<f64> = (0..num_verbs).map(|v| if gt.has_verb(v) { 30.0 } else { -30.0 }).collect();
        Prediction {
            human_boxes: Matrix::row_vector(&gt.human.to_cxcywh().to_array()),
            object_boxes: Matrix::row_vector(&gt.object.to_cxcywh().to_array()),
            object_logits: Matrix::row_vector(&obj),
            verb_logits: Matrix::row_vector(&verbs),
        }
    }

    fn sample_gt() -> HoiTriplet {
        HoiTriplet::new(BoxXyxy::new(0.1, 0.2, 0.4, 0.8), BoxXyxy::new(0.3, 0.3, 0.9, 0.7), 1, vec![0, 2])
    }

    #[test]
    fn perfect_match_costs_nothing() {
        let gt = sample_gt();
        let pred = perfect_prediction(&gt, 3, 3);
        let c = cost_matrix(std::slice::from_ref(&gt), &pred, &CostWeights::default());
        assert!(c.get(0, 0) < 1e-6, "{c:?}");
    }

    #[test]
    fn correct_class_costs_less() {
        let gt = sample_gt();
        let mut pred = perfect_prediction(&gt, 3, 3);
        let row = pred.object_logits.row(0).to_vec();
        let mut wrong = row.clone();
        wrong.swap(0, 1);
        pred.object_logits = Matrix::from_rows(&[row, wrong]);
        pred.human_boxes = Matrix::from_rows(&[pred.human_boxes.row(0), pred.human_boxes.row(0)]);
        pred.object_boxes = Matrix::from_rows(&[pred.object_boxes.row(0), pred.object_boxes.row(0)]);
        pred.verb_logits = Matrix::from_rows(&[pred.verb_logits.row(0), pred.verb_logits.row(0)]);
        let c = cost_matrix(std::slice::from_ref(&gt), &pred, &CostWeights::default());
        assert!(c.get(0, 0) < c.get(0, 1));
    }

    #[test]
    fn perfect_predictions_have_tiny_loss() {
        let gt = sample_gt();
        let pred = perfect_prediction(&gt, 3, 3);
        let mut g = Graph::new();
        let heads = HeadVars {
            human_boxes: g.input(pred.human_boxes.clone()),
            object_boxes: g.input(pred.object_boxes.clone()),
            object_logits: g.input(pred.object_logits.clone()),
            verb_logits: g.input(pred.verb_logits.clone()),
        };
        let m = MatchResult { assignment: vec![0], total_cost: 0.0 };
        let terms = total_loss(&mut g, &heads, std::slice::from_ref(&gt), &m, None, &LossConfig::default()).unwrap();
        let b = terms.breakdown;
        for v in [b.bbox, b.giou, b.object, b.verb, b.total] {
            assert!(v.abs() < 1e-6, "{b:?}");
        }
    }

    #[test]
    fn one_hot_weights_select_a_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = sample_gt();
        let mut g = Graph::new();
        let mut rand_m = |r, c, lo: f64, hi: f64| Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi));
        let heads = HeadVars {
            human_boxes: g.input(rand_m(3, 4, 0.2, 0.5)),
            object_boxes: g.input(rand_m(3, 4, 0.2, 0.5)),
            object_logits: g.input(rand_m(3, 3, -1.0, 1.0)),
            verb_logits: g.input(rand_m(3, 3, -1.0, 1.0)),
        };
        let m = MatchResult { assignment: vec![2], total_cost: 0.0 };
        let all = total_loss(&mut g, &heads, std::slice::from_ref(&gt), &m, None, &LossConfig::default()).unwrap().breakdown;
        let picks = [(1, all.bbox), (2, all.giou), (3, all.object), (4, all.verb)];
        for (k, want) in picks {
            let mut w = [0.0; 5];
            w[k] = 1.0;
            let cfg = LossConfig { weights: LossWeights::from_array(w).unwrap(), ..LossConfig::default() };
            let b = total_loss(&mut g, &heads, std::slice::from_ref(&gt), &m, None, &cfg).unwrap().breakdown;
            assert_eq!(b.total, want);
        }
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::from_array([1.0, -0.1, 1.0, 1.0, 1.0]).is_err());
        assert_eq!(LossWeights::default().to_array(), [1.0, 2.5, 1.0, 1.0, 1.0]);
    }
}
