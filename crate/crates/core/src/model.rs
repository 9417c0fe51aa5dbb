//! The OCN head stack on top of per-query decoder features, and its
//! desk-scale training loop.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::cmc::{self, FusionParams, InterCParams, IntraECParams, DEFAULT_HEADS};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::infer::{detections_for_image, Detection};
use crate::synth::SynthDataset;
use crate::params::{ParamId, ParamStore};
use crate::priors::{HoiTriplet, PriorTables, DEFAULT_RARE_THRESHOLD};
use crate::setmatch::{cost_matrix, hungarian, total_loss, CostWeights, HeadVars, LossBreakdown, LossConfig, MatchError, MatchResult, Prediction};
use crate::tensor::{Graph, Matrix, TensorError, Var};
use crate::vsm::{self, VsmParams, DEFAULT_TAU};

/// Mechanism switches of the head stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub skl: bool,
    pub vsm: bool,
    pub interc: bool,
    pub intraec: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { skl: true, vsm: true, interc: true, intraec: true }
    }
}

impl Ablation {
    /// Plain verb head on the decoder features.
    pub fn baseline() -> Self {
        Self { skl: false, vsm: false, interc: false, intraec: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_verbs: usize,
    pub num_objects: usize,
    pub dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub tau: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(num_verbs: usize, num_objects: usize, dim: usize, embed_dim: usize) -> Self {
        Self { num_verbs, num_objects, dim, embed_dim, heads: DEFAULT_HEADS, tau: DEFAULT_TAU, ablation: Ablation::default() }
    }

    pub fn to_text(&self) -> String {
        let a = self.ablation;
        let mut s = String::new();
        let _ = writeln!(s, "num_verbs={}", self.num_verbs);
        let _ = writeln!(s, "num_objects={}", self.num_objects);
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "skl={}", a.skl);
        let _ = writeln!(s, "vsm={}", a.vsm);
        let _ = writeln!(s, "interc={}", a.interc);
        let _ = writeln!(s, "intraec={}", a.intraec);
        s
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = ModelConfig::new(0, 0, 0, 0);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TrainError::Config(format!("line {}: {msg}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let count = || v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
            let flag = || v.parse::<bool>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "num_verbs" => cfg.num_verbs = count()?,
                "num_objects" => cfg.num_objects = count()?,
                "dim" => cfg.dim = count()?,
                "embed_dim" => cfg.embed_dim = count()?,
                "heads" => cfg.heads = count()?,
                "tau" => cfg.tau = v.parse().map_err(|e| err(format!("tau: {e}")))?,
                "skl" => cfg.ablation.skl = flag()?,
                "vsm" => cfg.ablation.vsm = flag()?,
                "interc" => cfg.ablation.interc = flag()?,
                "intraec" => cfg.ablation.intraec = flag()?,
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, bias: f64, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.w"), fan_in, out, rng);
        let b = store.add(format!("{name}.b"), Matrix::filled(1, out, bias));
        Self { w, b }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Focal-loss prior: verb logits start near probability 0.01.
const VERB_BIAS_INIT: f64 = -4.595_119_850_134_59;

/// Parameters and wiring of the head stack.
#[derive(Clone, Debug)]
pub struct OcnModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    vsm: Option<VsmParams>,
    inter_y: Option<InterCParams>,
    inter_x: Option<InterCParams>,
    intra_y: Option<IntraECParams>,
    intra_x: Option<IntraECParams>,
    fusion: Option<FusionParams>,
    object_head: Linear,
    human_box: Linear,
    object_box: Linear,
    verb_head: Linear,
}

/// The non-differentiable decisions of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteChoices {
    pub classes: Vec<usize>,
    pub matching: MatchResult,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub heads: HeadVars,
    /// Projected verb embeddings, when the semantic branch is on.
    pub p_tilde: Option<Var>,
}

impl OcnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let c = &config;
        if c.num_verbs < 2 || c.num_objects < 1 || c.dim < 1 || c.embed_dim < 1 {
            return Err(TrainError::Config(format!("need >= 2 verbs, >= 1 object and positive dims: {c:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = c.ablation;
        let vsm = a.vsm.then(|| VsmParams::init(&mut store, "vsm", c.embed_dim, c.dim, &mut rng));
        let two = a.vsm;
        let inter_y = if two && a.interc { Some(InterCParams::init(&mut store, "inter_y", c.dim, c.heads, &mut rng)?) } else { None };
        let inter_x = if two && a.interc { Some(InterCParams::init(&mut store, "inter_x", c.dim, c.heads, &mut rng)?) } else { None };
        let intra_y = if a.intraec { Some(IntraECParams::init(&mut store, "intra_y", c.dim, c.heads, &mut rng)?) } else { None };
        let intra_x = if two && a.intraec { Some(IntraECParams::init(&mut store, "intra_x", c.dim, c.heads, &mut rng)?) } else { None };
        let fusion = two.then(|| FusionParams::init(&mut store, "fuse", c.dim, &mut rng));
        let object_head = Linear::init(&mut store, "object_head", c.dim, c.num_objects + 1, 0.0, &mut rng);
        let human_box = Linear::init(&mut store, "human_box", c.dim, 4, 0.0, &mut rng);
        let object_box = Linear::init(&mut store, "object_box", c.dim, 4, 0.0, &mut rng);
        let verb_head = Linear::init(&mut store, "verb_head", c.dim, c.num_verbs, VERB_BIAS_INIT, &mut rng);
        Ok(Self { config, store, vsm, inter_y, inter_x, intra_y, intra_x, fusion, object_head, human_box, object_box, verb_head })
    }

    /// Records the forward pass of one image. `queries` is `N_q x D`,
    /// `embeddings` is `N_p x D_p`, `s_hat` is the smoothed object–verb
    /// table including the background row.
    pub fn forward(&self, g: &mut Graph, queries: &Matrix, embeddings: &Matrix, s_hat: &Matrix) -> Result<Forward, TensorError> {
        self.forward_with(g, queries, embeddings, s_hat, None)
    }

    /// [`OcnModel::forward`] with the object classes used for semantic
    /// aggregation given instead of taken from the object logits.
    pub fn forward_with(&self, g: &mut Graph, queries: &Matrix, embeddings: &Matrix, s_hat: &Matrix, classes: Option<&[usize]>) -> Result<Forward, TensorError> {
        let store = &self.store;
        let q = g.constant(queries.clone());
        let object_logits = self.object_head.apply(g, store, q)?;
        let hb = self.human_box.apply(g, store, q)?;
        let human_boxes = g.sigmoid(hb);
        let ob = self.object_box.apply(g, store, q)?;
        let object_boxes = g.sigmoid(ob);

        let (verb_features, p_tilde) = match &self.vsm {
            Some(vp) => {
                let p = g.constant(embeddings.clone());
                let p_tilde = vsm::semantic_reasoning(g, store, vp, p)?;
                let classes = classes.map_or_else(|| vsm::predict_object_class(g.value(object_logits)), <[usize]>::to_vec);
                let p_bar = vsm::aggregate(g, &classes, s_hat, p_tilde)?;
                let (y, x) = match (&self.inter_y, &self.inter_x) {
                    (Some(iy), Some(ix)) => (cmc::inter_calibrate(g, store, iy, p_bar, q)?, cmc::inter_calibrate(g, store, ix, q, p_bar)?),
                    _ => (q, p_bar),
                };
                let (y, x) = match (&self.intra_y, &self.intra_x) {
                    (Some(ey), Some(ex)) => (cmc::intra_enhance(g, store, ey, y)?, cmc::intra_enhance(g, store, ex, x)?),
                    _ => (y, x),
                };
                let fusion = self.fusion.as_ref().expect("fusion exists with the semantic branch");
                (cmc::fuse(g, store, fusion, x, y)?, Some(p_tilde))
            }
            None => match &self.intra_y {
                Some(ey) => (cmc::intra_enhance(g, store, ey, q)?, None),
                None => (q, None),
            },
        };
        let verb_logits = self.verb_head.apply(g, store, verb_features)?;
        Ok(Forward { heads: HeadVars { human_boxes, object_boxes, object_logits, verb_logits }, p_tilde })
    }

    pub fn predict(&self, queries: &Matrix, embeddings: &Matrix, s_hat: &Matrix) -> Result<Prediction, TensorError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, queries, embeddings, s_hat)?;
        Ok(f.heads.prediction(&g))
    }

    /// Records the forward pass, matches it against `gts` and builds the
    /// weighted loss.
    pub fn loss(&self, g: &mut Graph, queries: &Matrix, gts: &[HoiTriplet], embeddings: &Matrix, priors: &PriorTables, loss_cfg: &LossConfig) -> Result<(Var, LossBreakdown), TrainError> {
        let (total, breakdown, _) = self.loss_with(g, queries, gts, embeddings, priors, loss_cfg, None)?;
        Ok((total, breakdown))
    }

    /// [`OcnModel::loss`], optionally replaying earlier discrete choices
    /// (aggregation classes and matching), which are also returned.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with(
        &self,
        g: &mut Graph,
        queries: &Matrix,
        gts: &[HoiTriplet],
        embeddings: &Matrix,
        priors: &PriorTables,
        loss_cfg: &LossConfig,
        fixed: Option<&DiscreteChoices>,
    ) -> Result<(Var, LossBreakdown, DiscreteChoices), TrainError> {
        let f = self.forward_with(g, queries, embeddings, &priors.s_hat, fixed.map(|d| d.classes.as_slice()))?;
        let classes = vsm::predict_object_class(g.value(f.heads.object_logits));
        let skl = match f.p_tilde {
            Some(pt) if self.config.ablation.skl => {
                let a = vsm::adjacency(g, pt, self.config.tau)?;
                Some(vsm::skl_loss(g, &priors.c_hat, a)?)
            }
            _ => None,
        };
        let pred = f.heads.prediction(g);
        let cost = cost_matrix(gts, &pred, &CostWeights::from(loss_cfg.weights));
        let matching = match fixed {
            Some(d) => d.matching.clone(),
            None => hungarian(&cost)?,
        };
        let terms = total_loss(g, &f.heads, gts, &matching, skl, loss_cfg)?;
        let classes = fixed.map_or(classes, |d| d.classes.clone());
        Ok((terms.total, terms.breakdown, DiscreteChoices { classes, matching }))
    }

    /// Top-`k` detections of one image, masked by `priors.mask` when `mask`.
    pub fn detect(&self, image_id: &str, queries: &Matrix, embeddings: &Matrix, priors: &PriorTables, mask: bool, k: usize) -> Result<Vec<Detection>, TensorError> {
        let pred = self.predict(queries, embeddings, &priors.s_hat)?;
        Ok(detections_for_image(image_id, &pred, mask.then_some(&priors.mask), k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of `steps` after which the rate drops 10x.
    pub decay_at: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, lr: 1e-2, momentum: 0.9, decay_at: 0.75, loss: LossConfig::default(), seed: 0 }
    }
}

/// One training image.
pub struct Sample<'a> {
    pub features: &'a Matrix,
    pub triplets: &'a [HoiTriplet],
}

/// Mini-batch gradient descent with momentum. `log` receives the mean loss
/// breakdown of every step. Returns the breakdown of the last step.
pub fn train(model: &mut OcnModel, data: &[Sample<'_>], embeddings: &Matrix, priors: &PriorTables, cfg: &TrainConfig, mut log: impl FnMut(usize, &LossBreakdown)) -> Result<LossBreakdown, TrainError> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(TrainError::Config("need training images and a positive batch size".into()));
    }
    if !(cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(TrainError::Config(format!("bad lr {} or momentum {}", cfg.lr, cfg.momentum)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut velocity: Vec<Matrix> = model.store.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
    let decay_step = (cfg.decay_at * cfg.steps as f64).floor() as usize;
    let mut last = LossBreakdown::default();
    for step in 0..cfg.steps {
        let lr = if step >= decay_step { cfg.lr / 10.0 } else { cfg.lr };
        let mut grads: Vec<Matrix> = velocity.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect();
        let mut mean = LossBreakdown::default();
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &data[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            let (total, breakdown) = match model.loss(&mut g, sample.features, sample.triplets, embeddings, priors, &cfg.loss) {
                Err(TrainError::Match(MatchError::NonFinite(..)) | TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::DegenerateRow { .. } | TensorError::Domain { op: "giou_loss", .. })) => {
                    return Err(TrainError::Divergence { step });
                }
                other => other?,
            };
            if !breakdown.total.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            mean.accumulate(&breakdown, scale);
            let back = g.backward(total)?;
            for (id, grad) in g.param_grads(&back) {
                grads[id.index()].add_assign(&grad.scale(scale));
            }
        }
        if grads.iter().any(|m| !m.is_finite()) {
            return Err(TrainError::Divergence { step });
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let v = &mut velocity[id.index()];
            *v = v.scale(cfg.momentum).add(&grads[id.index()])?;
            let updated = model.store.get(id).sub(&v.scale(lr))?;
            model.store.set(id, updated);
        }
        log(step, &mean);
        last = mean;
    }
    Ok(last)
}

/// Outcome of [`train_and_evaluate`].
#[derive(Clone, Debug)]
pub struct ToyRun {
    pub model: OcnModel,
    pub priors: PriorTables,
    pub final_loss: LossBreakdown,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

/// Extracts priors from the training split, trains a fresh model, runs
/// inference on the test split and evaluates it.
pub fn train_and_evaluate(
    ds: &SynthDataset,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    beta: f64,
    mask: bool,
    eval_cfg: &EvalConfig,
    log: impl FnMut(usize, &LossBreakdown),
) -> Result<ToyRun, TrainError> {
    let priors = PriorTables::build(&ds.train.annotations, &ds.vocab, beta, DEFAULT_RARE_THRESHOLD).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut model = OcnModel::new(model_cfg, train_cfg.seed)?;
    let data: Vec<Sample<'_>> = ds.train.features.iter().zip(&ds.train.annotations.images).map(|(f, im)| Sample { features: f, triplets: &im.triplets }).collect();
    let final_loss = train(&mut model, &data, &ds.embeddings, &priors, train_cfg, log)?;
    let mut detections = Vec::new();
    for (f, im) in ds.test.features.iter().zip(&ds.test.annotations.images) {
        detections.extend(model.detect(&im.id, f, &ds.embeddings, &priors, mask, eval_cfg.k)?);
    }
    let report = evaluate(&detections, &ds.test.annotations, &priors.rare, Some(&priors.s), eval_cfg).map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(ToyRun { model, priors, final_loss, detections, report })
}
