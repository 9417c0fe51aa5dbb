//! Gradient verification across every differentiable operation, from the
//! tape primitives up to the composed training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cmc::{self, FusionParams, InterCParams, IntraECParams};
use crate::model::{ModelConfig, OcnModel};
use crate::params::{ParamId, ParamStore};
use crate::priors::PriorTables;
use crate::setmatch::LossConfig;
use crate::synth::{gen_dataset, SynthConfig};
use crate::tensor::ops::softmax_rows;
use crate::tensor::{grad_check, GradCheckReport, Graph, Matrix, TensorError, Var};
use crate::vsm::{self, VsmParams, DEFAULT_TAU};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub verbs: usize,
    pub objects: usize,
    pub embed_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Name of a case whose backward rule is deliberately scaled, for
    /// exercising the failure path.
    pub corrupt: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 0, instances: 20, dim: 8, heads: 2, queries: 4, verbs: 6, objects: 3, embed_dim: 5, step: 1e-4, tolerance: 1e-4, corrupt: None }
    }
}

/// Worst report of one case over all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub passed: bool,
}

pub const CASES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "hadamard",
    "add_row",
    "mul_row",
    "scale",
    "sigmoid",
    "relu",
    "square",
    "abs",
    "softmax_rows",
    "offdiag_softmax",
    "l2_normalize_rows",
    "layer_norm",
    "concat_cols",
    "slice_cols",
    "select_rows",
    "transpose",
    "sum_rows",
    "cross_entropy",
    "focal_loss",
    "bce_loss",
    "giou_loss",
    "semantic_reasoning",
    "adjacency",
    "skl_loss",
    "aggregate",
    "inter_calibrate",
    "intra_enhance",
    "fuse",
    "total_loss",
];

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Entries bounded away from zero, for the kinked ops.
fn off_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| {
        let m = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ out ∘ weights`, turning any node into a scalar with a generic upstream gradient.
fn project(g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let prod = g.hadamard(out, w)?;
    Ok(g.sum_all(prod))
}

fn corrupted(g: &mut Graph, v: Var) -> Var {
    let value = g.value(v).clone();
    g.custom(&[v], value, Box::new(|_, _, up| vec![up.scale(1.5)]))
}

fn store_inputs(store: &ParamStore) -> (Vec<ParamId>, Vec<Matrix>) {
    store.iter().map(|(id, _, m)| (id, m.clone())).unzip()
}

fn bind(g: &mut Graph, ids: &[ParamId], vars: &[Var]) {
    for (&id, &v) in ids.iter().zip(vars) {
        g.bind_param(id, v);
    }
}

struct Case<'a> {
    name: &'static str,
    cfg: &'a SuiteConfig,
}

impl Case<'_> {
    fn finish(&self, g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var, TensorError> {
        let out = if self.cfg.corrupt.as_deref() == Some(self.name) { corrupted(g, out) } else { out };
        if g.value(out).shape() == (1, 1) {
            Ok(out)
        } else {
            project(g, out, weights)
        }
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut m = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.random_range(0.05..1.0) });
    let total = m.sum();
    m = m.scale(1.0 / total);
    m.add(&m.transpose()).expect("square").scale(0.5)
}

/// Runs one instance of case `name`.
fn run_case(name: &'static str, cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let case = Case { name, cfg };
    let (n, d) = (cfg.queries, cfg.dim);
    let h = cfg.step;
    let w_out = |rng: &mut ChaCha8Rng, r, c| gaussian(rng, r, c);
    match name {
        "matmul" | "add" | "sub" | "hadamard" => {
            let a = gaussian(rng, n, d);
            let b = if name == "matmul" { gaussian(rng, d, 3) } else { gaussian(rng, n, d) };
            let cols = if name == "matmul" { 3 } else { d };
            let w = w_out(rng, n, cols);
            grad_check(
                |g, v| {
                    let out = match name {
                        "matmul" => g.matmul(v[0], v[1])?,
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.hadamard(v[0], v[1])?,
                    };
                    case.finish(g, out, &w)
                },
                &[a, b],
                h,
            )
        }
        "add_row" | "mul_row" => {
            let a = gaussian(rng, n, d);
            let r = gaussian(rng, 1, d);
            let w = w_out(rng, n, d);
            grad_check(
                |g, v| {
                    let out = if name == "add_row" { g.add_row(v[0], v[1])? } else { g.mul_row(v[0], v[1])? };
                    case.finish(g, out, &w)
                },
                &[a, r],
                h,
            )
        }
        "scale" | "sigmoid" | "relu" | "square" | "abs" | "softmax_rows" | "transpose" | "sum_rows" | "l2_normalize_rows" => {
            let a = if matches!(name, "relu" | "abs") { off_zero(rng, n, d) } else { gaussian(rng, n, d) };
            let w = match name {
                "transpose" => w_out(rng, d, n),
                "sum_rows" => w_out(rng, n, 1),
                _ => w_out(rng, n, d),
            };
            grad_check(
                |g, v| {
                    let out = match name {
                        "scale" => g.scale(v[0], -1.7),
                        "sigmoid" => g.sigmoid(v[0]),
                        "relu" => g.relu(v[0]),
                        "square" => g.square(v[0]),
                        "abs" => g.abs(v[0]),
                        "softmax_rows" => g.softmax_rows(v[0]),
                        "transpose" => g.transpose(v[0]),
                        "sum_rows" => g.sum_rows(v[0]),
                        _ => g.l2_normalize_rows(v[0])?,
                    };
                    case.finish(g, out, &w)
                },
                &[a],
                h,
            )
        }
        "offdiag_softmax" => {
            let a = gaussian(rng, n, n);
            let w = w_out(rng, n, n);
            grad_check(
                |g, v| {
                    let out = g.offdiag_softmax(v[0])?;
                    case.finish(g, out, &w)
                },
                &[a],
                h,
            )
        }
        "layer_norm" => {
            let x = gaussian(rng, n, d);
            let gain = uniform(rng, 1, d, 0.5, 1.5);
            let bias = gaussian(rng, 1, d);
            let w = w_out(rng, n, d);
            grad_check(
                |g, v| {
                    let out = g.layer_norm(v[0], v[1], v[2])?;
                    case.finish(g, out, &w)
                },
                &[x, gain, bias],
                h,
            )
        }
        "concat_cols" | "slice_cols" | "select_rows" => {
            let a = gaussian(rng, n, d);
            let b = gaussian(rng, n, 3);
            let rows: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..n)).collect();
            let w = match name {
                "concat_cols" => w_out(rng, n, d + 3),
                "slice_cols" => w_out(rng, n, 3),
                _ => w_out(rng, n + 2, d),
            };
            grad_check(
                |g, v| {
                    let out = match name {
                        "concat_cols" => g.concat_cols(&[v[0], v[1]])?,
                        "slice_cols" => g.slice_cols(v[0], 1, 4)?,
                        _ => g.select_rows(v[0], &rows)?,
                    };
                    case.finish(g, out, &w)
                },
                &[a, b],
                h,
            )
        }
        "cross_entropy" => {
            let k = cfg.objects + 1;
            let logits = gaussian(rng, n, k);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut weights = vec![1.0; k];
            weights[k - 1] = 0.3;
            grad_check(
                |g, v| {
                    let out = g.cross_entropy(v[0], &targets, &weights)?;
                    case.finish(g, out, &Matrix::scalar(1.0))
                },
                &[logits],
                h,
            )
        }
        "focal_loss" | "bce_loss" => {
            let logits = gaussian(rng, n, cfg.verbs).scale(2.0);
            let targets = Matrix::from_fn(n, cfg.verbs, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
            let (gamma, alpha) = if name == "focal_loss" { (2.0, Some(0.25)) } else { (0.0, None) };
            grad_check(
                |g, v| {
                    let out = g.focal_loss(v[0], &targets, gamma, alpha)?;
                    case.finish(g, out, &Matrix::scalar(1.0))
                },
                &[logits],
                h,
            )
        }
        "giou_loss" => {
            let raw = gaussian(rng, n, 4).scale(0.5);
            let target = Matrix::from_fn(n, 4, |_, j| if j < 2 { rng.random_range(0.3..0.7) } else { rng.random_range(0.1..0.4) });
            grad_check(
                |g, v| {
                    let boxes = g.sigmoid(v[0]);
                    let out = g.giou_loss(boxes, &target)?;
                    case.finish(g, out, &Matrix::scalar(1.0))
                },
                &[raw],
                h,
            )
        }
        "semantic_reasoning" | "adjacency" | "skl_loss" | "aggregate" => {
            let mut store = ParamStore::new();
            let params = VsmParams::init(&mut store, "vsm", cfg.embed_dim, d, rng);
            let (ids, mut inputs) = store_inputs(&store);
            let p = gaussian(rng, cfg.verbs, cfg.embed_dim);
            inputs.insert(0, p);
            let c_hat = random_distribution(rng, cfg.verbs);
            let s_hat = softmax_rows(&gaussian(rng, cfg.objects + 1, cfg.verbs));
            let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..=cfg.objects)).collect();
            let w = match name {
                "adjacency" => w_out(rng, cfg.verbs, cfg.verbs),
                "aggregate" => w_out(rng, n, d),
                _ => w_out(rng, cfg.verbs, d),
            };
            grad_check(
                |g, v| {
                    bind(g, &ids, &v[1..]);
                    let pt = vsm::semantic_reasoning(g, &store, &params, v[0])?;
                    let out = match name {
                        "semantic_reasoning" => pt,
                        "aggregate" => vsm::aggregate(g, &classes, &s_hat, pt)?,
                        _ => {
                            let a = vsm::adjacency(g, pt, DEFAULT_TAU)?;
                            if name == "adjacency" {
                                a
                            } else {
                                vsm::skl_loss(g, &c_hat, a)?
                            }
                        }
                    };
                    case.finish(g, out, &w)
                },
                &inputs,
                h,
            )
        }
        "inter_calibrate" | "intra_enhance" | "fuse" => {
            let mut store = ParamStore::new();
            let inter = InterCParams::init(&mut store, "inter", d, cfg.heads, rng)?;
            let intra = IntraECParams::init(&mut store, "intra", d, cfg.heads, rng)?;
            let fusion = FusionParams::init(&mut store, "fuse", d, rng);
            let (ids, mut inputs) = store_inputs(&store);
            inputs.insert(0, gaussian(rng, n, d));
            inputs.insert(1, gaussian(rng, n, d));
            let w = w_out(rng, n, d);
            grad_check(
                |g, v| {
                    bind(g, &ids, &v[2..]);
                    let out = match name {
                        "inter_calibrate" => cmc::inter_calibrate(g, &store, &inter, v[0], v[1])?,
                        "intra_enhance" => cmc::intra_enhance(g, &store, &intra, v[0])?,
                        _ => cmc::fuse(g, &store, &fusion, v[0], v[1])?,
                    };
                    case.finish(g, out, &w)
                },
                &inputs,
                h,
            )
        }
        "total_loss" => {
            let synth = SynthConfig {
                num_verbs: cfg.verbs,
                num_objects: cfg.objects,
                num_queries: cfg.queries,
                dim: 9,
                embed_dim: cfg.embed_dim,
                train_images: 6,
                test_images: 0,
                max_triplets: 2.min(cfg.queries),
                max_support: 3,
                seed: rng.random(),
                ..SynthConfig::default()
            };
            let ds = gen_dataset(&synth).map_err(|e| TensorError::Domain { op: "total_loss", msg: e.to_string() })?;
            let priors = PriorTables::build(&ds.train.annotations, &ds.vocab, 0.1, 10).map_err(|e| TensorError::Domain { op: "total_loss", msg: e.to_string() })?;
            let model_cfg = ModelConfig { heads: cfg.heads, ..ModelConfig::new(cfg.verbs, cfg.objects, d, cfg.embed_dim) };
            let model = OcnModel::new(model_cfg, rng.random()).map_err(|e| TensorError::Domain { op: "total_loss", msg: e.to_string() })?;
            let queries = gaussian(rng, n, d);
            let gts = ds.train.annotations.images[0].triplets.clone();
            let (ids, inputs) = store_inputs(&model.store);
            let loss_cfg = LossConfig::default();
            let as_tensor = |e: crate::model::TrainError| TensorError::Domain { op: "total_loss", msg: e.to_string() };
            let mut g0 = Graph::new();
            let (_, _, fixed) = model.loss_with(&mut g0, &queries, &gts, &ds.embeddings, &priors, &loss_cfg, None).map_err(as_tensor)?;
            grad_check(
                |g, v| {
                    bind(g, &ids, v);
                    let (total, _, _) = model.loss_with(g, &queries, &gts, &ds.embeddings, &priors, &loss_cfg, Some(&fixed)).map_err(as_tensor)?;
                    case.finish(g, total, &Matrix::scalar(1.0))
                },
                &inputs,
                h,
            )
        }
        other => Err(TensorError::Domain { op: "gradcheck", msg: format!("unknown case {other}") }),
    }
}

/// Runs every case of [`CASES`] on `cfg.instances` seeded random instances
/// and keeps the worst report per case.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CaseResult>, TensorError> {
    let mut out = Vec::with_capacity(CASES.len());
    for (k, &name) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let mut worst: Option<GradCheckReport> = None;
        for _ in 0..cfg.instances {
            let r = run_case(name, cfg, &mut rng)?;
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        let report = worst.ok_or_else(|| TensorError::Domain { op: "gradcheck", msg: "instances must be >= 1".into() })?;
        let passed = report.passes(cfg.tolerance);
        out.push(CaseResult { name, report, passed });
    }
    Ok(out)
}
