//! Verb semantic model: relation-weighted projection of verb word
//! embeddings, the temperature adjacency over projected verbs, the
//! similarity-KL loss against verb co-occurrence, and object-guided
//! aggregation of verb semantics per query.
//!
//! Weights follow the `x · W` convention: a `D_p x D` matrix maps a
//! `D_p`-dimensional row to `D` dimensions. The input embeddings are frozen;
//! only the projections are trainable.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::priors::Vocabulary;
use crate::tensor::{ops, Graph, Matrix, TensorError, Var};

/// Default temperature of the adjacency softmax.
pub const DEFAULT_TAU: f64 = 0.05;

/// Projections of the semantic reasoning step.
#[derive(Clone, Copy, Debug)]
pub struct VsmParams {
    /// Query projection `θ`, `D_p x D`.
    pub theta: ParamId,
    /// Key projection `φ`, `D_p x D`.
    pub phi: ParamId,
    /// Value projection, `D_p x D`.
    pub value: ParamId,
    /// Residual projection, `D_p x D`.
    pub residual: ParamId,
    pub embed_dim: usize,
    pub dim: usize,
}

impl VsmParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, embed_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            theta: store.add_uniform(format!("{prefix}.theta"), embed_dim, dim, rng),
            phi: store.add_uniform(format!("{prefix}.phi"), embed_dim, dim, rng),
            value: store.add_uniform(format!("{prefix}.w_value"), embed_dim, dim, rng),
            residual: store.add_uniform(format!("{prefix}.w_residual"), embed_dim, dim, rng),
            embed_dim,
            dim,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.theta, self.phi, self.value, self.residual]
    }
}

/// `p̃_i = ReLU(Σ_j r'_ij W_value p_j) + W_residual p_i` with
/// `r' = softmax_j(θ(p_i)·φ(p_j) / √D)`.
pub fn semantic_reasoning(g: &mut Graph, store: &ParamStore, params: &VsmParams, p: Var) -> Result<Var, TensorError> {
    let theta = g.param(store, params.theta);
    let phi = g.param(store, params.phi);
    let value = g.param(store, params.value);
    let residual = g.param(store, params.residual);

    let q = g.matmul(p, theta)?;
    let k = g.matmul(p, phi)?;
    let kt = g.transpose(k);
    let r = g.matmul(q, kt)?;
    let r = g.scale(r, 1.0 / (params.dim as f64).sqrt());
    let attn = g.softmax_rows(r);
    let v = g.matmul(p, value)?;
    let mixed = g.matmul(attn, v)?;
    let activated = g.relu(mixed);
    let res = g.matmul(p, residual)?;
    g.add(activated, res)
}

/// Off-diagonal temperature softmax over cosine similarities of the rows of
/// `p_tilde`: `a_ij ∝ exp(p̂_i·p̂_j / τ)` for `i ≠ j`, zero diagonal.
pub fn adjacency(g: &mut Graph, p_tilde: Var, tau: f64) -> Result<Var, TensorError> {
    if !(tau > 0.0) {
        return Err(TensorError::Domain { op: "adjacency", msg: format!("temperature must be positive, got {tau}") });
    }
    let n = g.value(p_tilde).rows();
    if n < 2 {
        return Err(TensorError::Domain { op: "adjacency", msg: format!("needs at least 2 verbs, got {n}") });
    }
    let unit = g.l2_normalize_rows(p_tilde)?;
    let unit_t = g.transpose(unit);
    let sim = g.matmul(unit, unit_t)?;
    let logits = g.scale(sim, 1.0 / tau);
    g.offdiag_softmax(logits)
}

/// `KL(Ĉ ‖ A)` over the off-diagonal support.
pub fn skl_loss(g: &mut Graph, c_hat: &Matrix, a: Var) -> Result<Var, TensorError> {
    g.kl_divergence(c_hat, a)
}

/// `p̄_i = Σ_j ŝ[o_i][j] p̃_j` for each query's object class `o_i`.
/// The class indices are discrete and carry no gradient.
pub fn aggregate(g: &mut Graph, object_indices: &[usize], s_hat: &Matrix, p_tilde: Var) -> Result<Var, TensorError> {
    let weights = s_hat.select_rows(object_indices).map_err(|e| e.rename("aggregate"))?;
    let w = g.constant(weights);
    g.matmul(w, p_tilde)
}

/// Argmax of each row of the object logits; ties go to the lower index.
pub fn predict_object_class(query_logits: &Matrix) -> Vec<usize> {
    ops::argmax_rows(query_logits)
}

/// Evaluates [`semantic_reasoning`] without keeping the graph.
pub fn project_embeddings(store: &ParamStore, params: &VsmParams, p: &Matrix) -> Result<Matrix, TensorError> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let out = semantic_reasoning(&mut g, store, params, pv)?;
    Ok(g.value(out).clone())
}

/// Evaluates [`adjacency`] on plain values.
pub fn adjacency_values(p_tilde: &Matrix, tau: f64) -> Result<Matrix, TensorError> {
    let mut g = Graph::new();
    let pv = g.constant(p_tilde.clone());
    let a = adjacency(&mut g, pv, tau)?;
    Ok(g.value(a).clone())
}

/// Evaluates the loss on plain values.
pub fn skl_value(c_hat: &Matrix, a: &Matrix) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let l = skl_loss(&mut g, c_hat, av)?;
    Ok(g.scalar(l))
}

/// Plain gradient descent on the projections alone, minimizing
/// `KL(Ĉ ‖ adjacency(semantic_reasoning(P), τ))`. Returns the loss before
/// each step followed by the final loss.
pub fn fit_skl(store: &mut ParamStore, params: &VsmParams, p: &Matrix, c_hat: &Matrix, tau: f64, lr: f64, steps: usize) -> Result<Vec<f64>, TensorError> {
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let pt = semantic_reasoning(&mut g, store, params, pv)?;
        let a = adjacency(&mut g, pt, tau)?;
        let loss = skl_loss(&mut g, c_hat, a)?;
        trace.push(g.scalar(loss));
        if step == steps {
            break;
        }
        let grads = g.backward(loss)?;
        for (id, grad) in g.param_grads(&grads) {
            let updated = store.get(id).sub(&grad.scale(lr))?;
            store.set(id, updated);
        }
    }
    Ok(trace)
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no embedding for verb {0:?}")]
    Missing(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parses GloVe-style lines `name v1 ... vD` and returns one ℓ2-normalized
/// row per vocabulary verb, in vocabulary order. Names not in the
/// vocabulary are ignored.
pub fn parse_word_embeddings(text: &str, vocab: &Vocabulary) -> Result<Matrix, EmbeddingError> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.num_verbs()];
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let values = parts
            .map(|t| t.parse::<f64>().map_err(|e| EmbeddingError::Parse { line: n + 1, msg: format!("bad value {t:?}: {e}") }))
            .collect::<Result<Vec<_>, _>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(EmbeddingError::Parse { line: n + 1, msg: format!("expected {d} values, found {}", values.len()) })
            }
            _ => {}
        }
        if let Some(id) = vocab.verb_id(name) {
            rows[id] = Some(values);
        }
    }
    let d = dim.unwrap_or(0);
    let mut data = Vec::with_capacity(vocab.num_verbs() * d);
    for (i, row) in rows.into_iter().enumerate() {
        data.extend(row.ok_or_else(|| EmbeddingError::Missing(vocab.verbs()[i].clone()))?);
    }
    let m = Matrix::from_vec(vocab.num_verbs(), d, data)?;
    Ok(ops::l2_normalize_rows(&m)?)
}

pub fn load_word_embeddings(path: &Path, vocab: &Vocabulary) -> Result<Matrix, EmbeddingError> {
    let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })?;
    parse_word_embeddings(&text, vocab)
}

pub fn write_word_embeddings<W: Write>(p: &Matrix, vocab: &Vocabulary, mut w: W) -> std::io::Result<()> {
    for (name, row) in vocab.verbs().iter().zip(p.iter_rows()) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{name} {}", vals.join(" "))?;
    }
    Ok(())
}
