//! Cross-modal calibration between query features and aggregated verb
//! semantics.
//!
//! [`inter_calibrate`] gates one modality with a projection of the other in
//! `H` low-dimensional subspaces; [`intra_enhance`] restores context with a
//! multi-head bilinear attention over the queries of one image; [`fuse`]
//! merges the two calibrated streams. Both calibration directions use the
//! same operations with independent parameter sets.

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Matrix, TensorError, Var};

/// Default number of calibration heads.
pub const DEFAULT_HEADS: usize = 2;

fn check_heads(dim: usize, heads: usize) -> Result<usize, TensorError> {
    if heads == 0 || dim % heads != 0 {
        return Err(TensorError::Domain { op: "cmc", msg: format!("dimension {dim} not divisible by {heads} heads") });
    }
    Ok(dim / heads)
}

fn add_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}.ln_gain"), Matrix::filled(1, dim, 1.0)),
        store.add(format!("{prefix}.ln_bias"), Matrix::zeros(1, dim)),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct InterHead {
    /// `D/H x D/H` excitation.
    pub w_t1: ParamId,
    /// `D x D/H` projection of the guide.
    pub w_t2: ParamId,
    /// `D x D/H` projection of the target.
    pub w_t3: ParamId,
}

#[derive(Clone, Debug)]
pub struct InterCParams {
    pub heads: Vec<InterHead>,
    pub w_t4: ParamId,
    pub w_t5: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub dim: usize,
}

impl InterCParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self, TensorError> {
        let sub = check_heads(dim, heads)?;
        let heads = (0..heads)
            .map(|h| InterHead {
                w_t1: store.add_uniform(format!("{prefix}.h{h}.w_t1"), sub, sub, rng),
                w_t2: store.add_uniform(format!("{prefix}.h{h}.w_t2"), dim, sub, rng),
                w_t3: store.add_uniform(format!("{prefix}.h{h}.w_t3"), dim, sub, rng),
            })
            .collect();
        let w_t4 = store.add_uniform(format!("{prefix}.w_t4"), dim, dim, rng);
        let w_t5 = store.add_uniform(format!("{prefix}.w_t5"), dim, dim, rng);
        let (ln_gain, ln_bias) = add_layer_norm(store, prefix, dim);
        Ok(Self { heads, w_t4, w_t5, ln_gain, ln_bias, dim })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.heads.iter().flat_map(|h| [h.w_t1, h.w_t2, h.w_t3]).collect();
        v.extend([self.w_t4, self.w_t5, self.ln_gain, self.ln_bias]);
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntraHead {
    /// `1 x D` bilinear pooling vector.
    pub w: ParamId,
    /// `D x D` left bilinear projection.
    pub w_b1: ParamId,
    /// `D x D` right bilinear projection.
    pub w_b2: ParamId,
    /// `D x D/H` message projection.
    pub w_b3: ParamId,
}

#[derive(Clone, Debug)]
pub struct IntraECParams {
    pub heads: Vec<IntraHead>,
    pub w_b4: ParamId,
    pub w_b5: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub dim: usize,
}

impl IntraECParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self, TensorError> {
        let sub = check_heads(dim, heads)?;
        let heads = (0..heads)
            .map(|h| IntraHead {
                w: store.add_uniform(format!("{prefix}.h{h}.w"), dim, 1, rng),
                w_b1: store.add_uniform(format!("{prefix}.h{h}.w_b1"), dim, dim, rng),
                w_b2: store.add_uniform(format!("{prefix}.h{h}.w_b2"), dim, dim, rng),
                w_b3: store.add_uniform(format!("{prefix}.h{h}.w_b3"), dim, sub, rng),
            })
            .collect::<Vec<_>>();
        // the pooling vector is stored as a row
        for h in &heads {
            let col = store.get(h.w).clone();
            *store.get_mut(h.w) = col.transpose();
        }
        let w_b4 = store.add_uniform(format!("{prefix}.w_b4"), dim, dim, rng);
        let w_b5 = store.add_uniform(format!("{prefix}.w_b5"), dim, dim, rng);
        let (ln_gain, ln_bias) = add_layer_norm(store, prefix, dim);
        Ok(Self { heads, w_b4, w_b5, ln_gain, ln_bias, dim })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.heads.iter().flat_map(|h| [h.w, h.w_b1, h.w_b2, h.w_b3]).collect();
        v.extend([self.w_b4, self.w_b5, self.ln_gain, self.ln_bias]);
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub w_x: ParamId,
    pub w_y: ParamId,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            w_x: store.add_uniform(format!("{prefix}.w_x"), dim, dim, rng),
            w_y: store.add_uniform(format!("{prefix}.w_y"), dim, dim, rng),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w_x, self.w_y]
    }
}

/// `out = x + ReLU(LN(m · W5)) · W4`, the residual tail shared by both
/// calibration blocks.
fn residual_tail(g: &mut Graph, store: &ParamStore, x: Var, m: Var, w5: ParamId, w4: ParamId, gain: ParamId, bias: ParamId) -> Result<Var, TensorError> {
    let w5 = g.param(store, w5);
    let w4 = g.param(store, w4);
    let gain = g.param(store, gain);
    let bias = g.param(store, bias);
    let proj = g.matmul(m, w5)?;
    let normed = g.layer_norm(proj, gain, bias)?;
    let act = g.relu(normed);
    let out = g.matmul(act, w4)?;
    g.add(x, out)
}

/// Calibrates `target` with `guide`, row by row:
/// `e^h_i = σ(ReLU(guide_i W2^h) W1^h) ∘ (target_i W3^h)` and
/// `y_i = target_i + ReLU(LN(Cat_h(e^h_i) W5)) W4`.
pub fn inter_calibrate(g: &mut Graph, store: &ParamStore, params: &InterCParams, guide: Var, target: Var) -> Result<Var, TensorError> {
    let (gs, ts) = (g.value(guide).shape(), g.value(target).shape());
    if gs != ts || gs.1 != params.dim {
        return Err(TensorError::Shape { op: "inter_calibrate", left: gs, right: ts });
    }
    let mut excited = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let w2 = g.param(store, head.w_t2);
        let w1 = g.param(store, head.w_t1);
        let w3 = g.param(store, head.w_t3);
        let gp = g.matmul(guide, w2)?;
        let gp = g.relu(gp);
        let gate = g.matmul(gp, w1)?;
        let gate = g.sigmoid(gate);
        let tp = g.matmul(target, w3)?;
        excited.push(g.hadamard(gate, tp)?);
    }
    let cat = g.concat_cols(&excited)?;
    residual_tail(g, store, target, cat, params.w_t5, params.w_t4, params.ln_gain, params.ln_bias)
}

/// Multi-head bilinear attention within one modality:
/// `f_ij = w·((y_i W1) ∘ (y_j W2))`, `f' = softmax_j f`,
/// `m^h_i = Σ_j f'_ij y_j W3`, and
/// `ȳ_i = y_i + ReLU(LN(Cat_h(m^h_i) W5)) W4`.
pub fn intra_enhance(g: &mut Graph, store: &ParamStore, params: &IntraECParams, y: Var) -> Result<Var, TensorError> {
    let ys = g.value(y).shape();
    if ys.1 != params.dim || ys.0 == 0 {
        return Err(TensorError::Shape { op: "intra_enhance", left: ys, right: (ys.0.max(1), params.dim) });
    }
    let mut messages = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let w = g.param(store, head.w);
        let w1 = g.param(store, head.w_b1);
        let w2 = g.param(store, head.w_b2);
        let w3 = g.param(store, head.w_b3);
        let left = g.matmul(y, w1)?;
        let left = g.mul_row(left, w)?;
        let right = g.matmul(y, w2)?;
        let right_t = g.transpose(right);
        let f = g.matmul(left, right_t)?;
        let attn = g.softmax_rows(f);
        let values = g.matmul(y, w3)?;
        messages.push(g.matmul(attn, values)?);
    }
    let cat = g.concat_cols(&messages)?;
    residual_tail(g, store, y, cat, params.w_b5, params.w_b4, params.ln_gain, params.ln_bias)
}

/// `z = σ(x̄ Wx + ȳ Wy) − (x̄ Wx − ȳ Wy)²`, elementwise.
pub fn fuse(g: &mut Graph, store: &ParamStore, params: &FusionParams, x_bar: Var, y_bar: Var) -> Result<Var, TensorError> {
    let (xs, ys) = (g.value(x_bar).shape(), g.value(y_bar).shape());
    if xs != ys {
        return Err(TensorError::Shape { op: "fuse", left: xs, right: ys });
    }
    let wx = g.param(store, params.w_x);
    let wy = g.param(store, params.w_y);
    let a = g.matmul(x_bar, wx)?;
    let b = g.matmul(y_bar, wy)?;
    let sum = g.add(a, b)?;
    let gate = g.sigmoid(sum);
    let diff = g.sub(a, b)?;
    let sq = g.square(diff);
    g.sub(gate, sq)
}

/// Evaluates a calibration op on plain matrices.
pub fn eval_unary(f: impl FnOnce(&mut Graph, Var) -> Result<Var, TensorError>, x: &Matrix) -> Result<Matrix, TensorError> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    Ok(g.value(out).clone())
}

/// Evaluates a two-input op on plain matrices.
pub fn eval_binary(f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var, TensorError>, a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = f(&mut g, av, bv)?;
    Ok(g.value(out).clone())
}
