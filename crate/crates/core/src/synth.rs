//! Synthetic HOI datasets with planted object–verb and verb–verb structure,
//! standing in for a detector backbone.
//!
//! Each ground-truth triplet draws its object from a skewed (Zipf) law, a
//! first verb from the planted row `S[o]`, and with probability
//! `co_occurrence` a second verb from the planted `C[v1]` restricted to the
//! object's support. Query features carry the box logits in their first
//! eight columns followed by an object prototype, a verb code and noise.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::boxes::BoxXyxy;
use crate::priors::{AnnotationSet, HoiTriplet, ImageAnnotations, Vocabulary};
use crate::tensor::{read_named, write_named, Matrix, TensorError};

/// Columns of a query feature holding `logit(human cxcywh) ++ logit(object cxcywh)`.
pub const BOX_FEATURE_DIMS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_verbs: usize,
    pub num_objects: usize,
    pub num_queries: usize,
    pub dim: usize,
    pub embed_dim: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub max_triplets: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub object_signal: f64,
    pub verb_signal: f64,
    /// Probability that a triplet carries a second verb.
    pub co_occurrence: f64,
    /// Zipf exponent of the object frequencies.
    pub object_skew: f64,
    /// Zipf exponent of the weights inside a generated planted row.
    pub verb_skew: f64,
    /// Largest number of verbs an object's planted row supports.
    pub max_support: usize,
    pub seed: u64,
    /// `N_o x N_p` row-stochastic; generated when absent.
    pub planted_s: Option<Matrix>,
    /// `N_p x N_p` with zero diagonal, rows summing to one; generated when absent.
    pub planted_c: Option<Matrix>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_verbs: 10,
            num_objects: 5,
            num_queries: 8,
            dim: 32,
            embed_dim: 16,
            train_images: 400,
            test_images: 100,
            max_triplets: 3,
            noise: 0.5,
            object_signal: 1.5,
            verb_signal: 0.6,
            co_occurrence: 0.3,
            object_skew: 1.5,
            verb_skew: 1.5,
            max_support: 8,
            seed: 0,
            planted_s: None,
            planted_c: None,
        }
    }
}

fn matrix_inline(m: &Matrix) -> String {
    m.iter_rows().map(|r| r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")).collect::<Vec<_>>().join(";")
}

fn parse_inline(s: &str) -> Result<Matrix, String> {
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(|r| r.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect())
        .collect::<Result<_, _>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err("ragged matrix".into());
    }
    Matrix::from_vec(rows.len(), cols, rows.concat()).map_err(|e| e.to_string())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.num_verbs < 1 || self.num_objects < 1 {
            return bad("need at least one verb and one object".into());
        }
        if self.max_triplets < 1 || self.num_queries < self.max_triplets {
            return bad(format!("num_queries ({}) must be >= max_triplets ({}) >= 1", self.num_queries, self.max_triplets));
        }
        if self.dim <= BOX_FEATURE_DIMS {
            return bad(format!("dim must exceed {BOX_FEATURE_DIMS}"));
        }
        if self.embed_dim < 1 || self.max_support < 1 {
            return bad("embed_dim and max_support must be >= 1".into());
        }
        for (name, v) in [("noise", self.noise), ("object_signal", self.object_signal), ("verb_signal", self.verb_signal), ("object_skew", self.object_skew), ("verb_skew", self.verb_skew)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return bad("co_occurrence must lie in [0, 1]".into());
        }
        if let Some(s) = &self.planted_s {
            if s.shape() != (self.num_objects, self.num_verbs) {
                return bad(format!("planted_s must be {}x{}", self.num_objects, self.num_verbs));
            }
            check_stochastic(s, "planted_s")?;
        }
        if let Some(c) = &self.planted_c {
            if c.shape() != (self.num_verbs, self.num_verbs) {
                return bad(format!("planted_c must be {0}x{0}", self.num_verbs));
            }
            check_stochastic(c, "planted_c")?;
            if (0..self.num_verbs).any(|i| c.get(i, i) != 0.0) {
                return bad("planted_c must have a zero diagonal".into());
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_verbs={}", self.num_verbs);
        let _ = writeln!(s, "num_objects={}", self.num_objects);
        let _ = writeln!(s, "num_queries={}", self.num_queries);
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "train_images={}", self.train_images);
        let _ = writeln!(s, "test_images={}", self.test_images);
        let _ = writeln!(s, "max_triplets={}", self.max_triplets);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "object_signal={}", self.object_signal);
        let _ = writeln!(s, "verb_signal={}", self.verb_signal);
        let _ = writeln!(s, "co_occurrence={}", self.co_occurrence);
        let _ = writeln!(s, "object_skew={}", self.object_skew);
        let _ = writeln!(s, "verb_skew={}", self.verb_skew);
        let _ = writeln!(s, "max_support={}", self.max_support);
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some(m) = &self.planted_s {
            let _ = writeln!(s, "planted_s={}", matrix_inline(m));
        }
        if let Some(m) = &self.planted_c {
            let _ = writeln!(s, "planted_c={}", matrix_inline(m));
        }
        s
    }

    /// Parses `key=value` lines over the defaults. Planted tables are written
    /// inline with `;` between rows and `,` between entries.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut cfg = SynthConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SynthError::Parse { line: line_no, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let count = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            let real = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "num_verbs" => cfg.num_verbs = count()?,
                "num_objects" => cfg.num_objects = count()?,
                "num_queries" => cfg.num_queries = count()?,
                "dim" => cfg.dim = count()?,
                "embed_dim" => cfg.embed_dim = count()?,
                "train_images" => cfg.train_images = count()?,
                "test_images" => cfg.test_images = count()?,
                "max_triplets" => cfg.max_triplets = count()?,
                "max_support" => cfg.max_support = count()?,
                "noise" => cfg.noise = real()?,
                "object_signal" => cfg.object_signal = real()?,
                "verb_signal" => cfg.verb_signal = real()?,
                "co_occurrence" => cfg.co_occurrence = real()?,
                "object_skew" => cfg.object_skew = real()?,
                "verb_skew" => cfg.verb_skew = real()?,
                "seed" => cfg.seed = value.parse().map_err(|e| err(format!("seed: {e}")))?,
                "planted_s" => cfg.planted_s = Some(parse_inline(value).map_err(err)?),
                "planted_c" => cfg.planted_c = Some(parse_inline(value).map_err(err)?),
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        Ok(cfg)
    }
}

fn check_stochastic(m: &Matrix, name: &str) -> Result<(), SynthError> {
    for (i, row) in m.iter_rows().enumerate() {
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SynthError::Config(format!("{name} row {i} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if sum == 0.0 {
            return Err(SynthError::Config(format!("{name} row {i} has empty support")));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::Config(format!("{name} row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// Annotations plus one `N_q x D` feature matrix per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplit {
    pub annotations: AnnotationSet,
    pub features: Vec<Matrix>,
    /// Per image, the query index holding each triplet (same order).
    pub slots: Vec<Vec<usize>>,
}

impl SynthSplit {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn write_features<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_named(w, self.annotations.images.iter().map(|im| im.id.as_str()).zip(&self.features))
    }
}

/// Reads per-image features written by [`SynthSplit::write_features`],
/// ordered like `anns.images`.
pub fn read_features<R: BufRead>(reader: R, anns: &AnnotationSet) -> Result<Vec<Matrix>, SynthError> {
    let mut named: std::collections::HashMap<String, Matrix> = read_named(reader)?.into_iter().collect();
    anns.images
        .iter()
        .map(|im| named.remove(&im.id).ok_or_else(|| SynthError::Config(format!("no features for image {}", im.id))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub train: SynthSplit,
    pub test: SynthSplit,
    /// `N_p x D_p`, unit rows, shared by both splits.
    pub embeddings: Matrix,
    pub planted_s: Matrix,
    pub planted_c: Matrix,
    /// Object frequencies.
    pub object_probs: Vec<f64>,
}

fn zipf_probs(n: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-exponent)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn random_planted_s(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Matrix {
    let mut s = Matrix::zeros(cfg.num_objects, cfg.num_verbs);
    let mut verbs: Vec<usize> = (0..cfg.num_verbs).collect();
    for o in 0..cfg.num_objects {
        verbs.shuffle(rng);
        let k = rng.random_range(1..=cfg.max_support.min(cfg.num_verbs));
        let weights = zipf_probs(k, cfg.verb_skew);
        for (v, w) in verbs[..k].iter().zip(weights) {
            s.set(o, *v, w);
        }
    }
    s
}

fn random_planted_c(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Matrix {
    let n = cfg.num_verbs;
    let mut j = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let g: f64 = rng.sample(StandardNormal);
            let v = (2.0 * g).exp();
            j.set(a, b, v);
            j.set(b, a, v);
        }
    }
    if n == 1 {
        return j;
    }
    for a in 0..n {
        let z: f64 = j.row(a).iter().sum();
        for v in j.row_mut(a) {
            *v /= z;
        }
    }
    j
}

/// Second-verb law: `q(v2 | v1, o) ∝ C[v1][v2]` over `v2 ≠ v1` in the
/// support of `S[o]`; `None` when that set has no mass.
fn second_verb_weights(s: &Matrix, c: &Matrix, o: usize, v1: usize) -> Option<Vec<f64>> {
    let w: Vec<f64> = (0..s.cols()).map(|v| if v != v1 && s.get(o, v) > 0.0 { c.get(v1, v) } else { 0.0 }).collect();
    let z: f64 = w.iter().sum();
    if z > 0.0 {
        Some(w.into_iter().map(|x| x / z).collect())
    } else {
        None
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn random_box(rng: &mut ChaCha8Rng, w: (f64, f64), h: (f64, f64)) -> BoxXyxy {
    let bw = rng.random_range(w.0..w.1);
    let bh = rng.random_range(h.0..h.1);
    let x1 = rng.random_range(0.0..1.0 - bw);
    let y1 = rng.random_range(0.0..1.0 - bh);
    BoxXyxy::new(x1, y1, x1 + bw, y1 + bh)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    s: &'a Matrix,
    c: &'a Matrix,
    object_dist: WeightedIndex<f64>,
    object_protos: Vec<Vec<f64>>,
    verb_codes: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn triplet(&self, rng: &mut ChaCha8Rng) -> HoiTriplet {
        let o = self.object_dist.sample(rng);
        let v1 = WeightedIndex::new(self.s.row(o)).expect("validated row").sample(rng);
        let mut verbs = vec![v1];
        if rng.random_bool(self.cfg.co_occurrence) {
            if let Some(w) = second_verb_weights(self.s, self.c, o, v1) {
                verbs.push(WeightedIndex::new(&w).expect("normalized").sample(rng));
            }
        }
        let human = random_box(rng, (0.1, 0.4), (0.2, 0.6));
        let object = random_box(rng, (0.05, 0.4), (0.05, 0.4));
        HoiTriplet::new(human, object, o, verbs)
    }

    fn query(&self, rng: &mut ChaCha8Rng, t: Option<&HoiTriplet>) -> Vec<f64> {
        let d = self.cfg.dim;
        let mut q = vec![0.0; d];
        let (h, o) = match t {
            Some(t) => (t.human, t.object),
            None => (random_box(rng, (0.1, 0.4), (0.2, 0.6)), random_box(rng, (0.05, 0.4), (0.05, 0.4))),
        };
        for (k, v) in h.to_cxcywh().to_array().into_iter().chain(o.to_cxcywh().to_array()).enumerate() {
            q[k] = logit(v);
        }
        let content = &mut q[BOX_FEATURE_DIMS..];
        for x in content.iter_mut() {
            *x = self.cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
        if let Some(t) = t {
            for (x, p) in content.iter_mut().zip(&self.object_protos[t.object_class]) {
                *x += self.cfg.object_signal * p;
            }
            let share = self.cfg.verb_signal / t.verbs.len() as f64;
            for &v in &t.verbs {
                for (x, p) in content.iter_mut().zip(&self.verb_codes[v]) {
                    *x += share * p;
                }
            }
        }
        q
    }

    fn split(&self, rng: &mut ChaCha8Rng, prefix: &str, n: usize) -> SynthSplit {
        let mut split = SynthSplit { annotations: AnnotationSet::default(), features: Vec::new(), slots: Vec::new() };
        let nq = self.cfg.num_queries;
        for i in 0..n {
            let count = rng.random_range(1..=self.cfg.max_triplets);
            let triplets: Vec<HoiTriplet> = (0..count).map(|_| self.triplet(rng)).collect();
            let mut order: Vec<usize> = (0..nq).collect();
            order.shuffle(rng);
            let slots = order[..count].to_vec();
            let mut rows: Vec<Vec<f64>> = vec![Vec::new(); nq];
            for (t, &slot) in triplets.iter().zip(&slots) {
                rows[slot] = self.query(rng, Some(t));
            }
            for row in rows.iter_mut().filter(|r| r.is_empty()) {
                *row = self.query(rng, None);
            }
            split.features.push(Matrix::from_rows(&rows));
            split.slots.push(slots);
            split.annotations.images.push(ImageAnnotations { id: format!("{prefix}{i:05}"), triplets });
        }
        split
    }
}

/// Deterministic given `cfg.seed`.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let planted_s = cfg.planted_s.clone().unwrap_or_else(|| random_planted_s(cfg, &mut rng));
    let planted_c = cfg.planted_c.clone().unwrap_or_else(|| random_planted_c(cfg, &mut rng));
    let object_probs = zipf_probs(cfg.num_objects, cfg.object_skew);
    let content = cfg.dim - BOX_FEATURE_DIMS;
    let object_protos = (0..cfg.num_objects).map(|_| unit_vec(&mut rng, content).into_iter().map(|x| x * (content as f64).sqrt() / 2.0).collect()).collect();
    let verb_codes = (0..cfg.num_verbs).map(|_| unit_vec(&mut rng, content).into_iter().map(|x| x * (content as f64).sqrt() / 2.0).collect()).collect();

    let base: Vec<Vec<f64>> = (0..cfg.num_verbs).map(|_| unit_vec(&mut rng, cfg.embed_dim)).collect();
    let embeddings = Matrix::from_fn(cfg.num_verbs, cfg.embed_dim, |v, k| {
        base[v][k] + (0..cfg.num_verbs).map(|u| planted_c.get(v, u) * base[u][k]).sum::<f64>()
    });
    let embeddings = crate::tensor::ops::l2_normalize_rows(&embeddings)?;

    let gen = Generator {
        cfg,
        s: &planted_s,
        c: &planted_c,
        object_dist: WeightedIndex::new(&object_probs).map_err(|e| SynthError::Config(e.to_string()))?,
        object_protos,
        verb_codes,
    };
    let train = gen.split(&mut rng, "train", cfg.train_images);
    let test = gen.split(&mut rng, "test", cfg.test_images);
    Ok(SynthDataset {
        config: cfg.clone(),
        vocab: Vocabulary::numbered(cfg.num_verbs, cfg.num_objects),
        train,
        test,
        embeddings,
        planted_s,
        planted_c,
        object_probs,
    })
}

/// Expected prior tables of the sampling process, in the form the priors
/// module estimates: `(S, C)`. `S` excludes background; `C` uses the
/// uniform off-diagonal row for verbs that never co-occur.
pub fn population_tables(ds: &SynthDataset) -> (Matrix, Matrix) {
    let (s, c) = (&ds.planted_s, &ds.planted_c);
    let (no, np) = s.shape();
    let pco = ds.config.co_occurrence;
    let mut counts = Matrix::zeros(no, np);
    let mut joint = Matrix::zeros(np, np);
    for o in 0..no {
        let po = ds.object_probs[o];
        for v1 in 0..np {
            let p1 = s.get(o, v1);
            if p1 == 0.0 {
                continue;
            }
            counts.set(o, v1, counts.get(o, v1) + p1);
            if let Some(w) = second_verb_weights(s, c, o, v1) {
                for (v2, q) in w.into_iter().enumerate() {
                    let m = pco * p1 * q;
                    counts.set(o, v2, counts.get(o, v2) + m);
                    joint.set(v1, v2, joint.get(v1, v2) + po * m);
                    joint.set(v2, v1, joint.get(v2, v1) + po * m);
                }
            }
        }
    }
    for o in 0..no {
        let z: f64 = counts.row(o).iter().sum();
        counts.row_mut(o).iter_mut().for_each(|x| *x /= z);
    }
    for a in 0..np {
        let z: f64 = joint.row(a).iter().sum();
        for b in 0..np {
            let v = if z > 0.0 {
                joint.get(a, b) / z
            } else if a != b {
                1.0 / (np - 1) as f64
            } else {
                0.0
            };
            joint.set(a, b, v);
        }
    }
    (counts, joint)
}

/// Largest per-row total-variation distance between two row-stochastic tables.
pub fn max_row_tv(a: &Matrix, b: &Matrix) -> f64 {
    a.iter_rows().zip(b.iter_rows()).map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::object_verb_conditional;

    fn small() -> SynthConfig {
        SynthConfig { train_images: 50, test_images: 10, ..SynthConfig::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(gen_dataset(&small()).unwrap(), gen_dataset(&small()).unwrap());
        let other = gen_dataset(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.train.features, gen_dataset(&small()).unwrap().train.features);
    }

    #[test]
    fn annotations_are_valid_and_features_decode_boxes() {
        let ds = gen_dataset(&small()).unwrap();
        ds.train.annotations.validate(&ds.vocab).unwrap();
        ds.test.annotations.validate(&ds.vocab).unwrap();
        let im = &ds.train.annotations.images[0];
        let q = ds.train.features[0].row(ds.train.slots[0][0]);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let cx = im.triplets[0].human.to_cxcywh().cx;
        assert!((sig(q[0]) - cx).abs() < 1e-9);
    }

    #[test]
    fn empirical_s_approaches_planted_s() {
        let cfg = SynthConfig { co_occurrence: 0.0, train_images: 6000, test_images: 0, object_skew: 0.5, ..SynthConfig::default() };
        let ds = gen_dataset(&cfg).unwrap();
        assert!(ds.train.annotations.num_triplets() >= 10000);
        let emp = object_verb_conditional(&ds.train.annotations, &ds.vocab);
        let emp = emp.select_rows(&(0..cfg.num_objects).collect::<Vec<_>>()).unwrap();
        let tv = max_row_tv(&emp, &ds.planted_s);
        assert!(tv < 0.05, "tv {tv}");
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut cfg = small();
        cfg.planted_s = Some(Matrix::from_fn(5, 10, |_, v| if v == 0 { 1.0 } else { 0.0 }));
        assert_eq!(SynthConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.planted_s = Some(Matrix::zeros(5, 10));
        assert!(gen_dataset(&cfg).is_err());
        assert!(SynthConfig::parse("bogus=1").is_err());
        assert!(gen_dataset(&SynthConfig { num_queries: 2, max_triplets: 3, ..small() }).is_err());
    }
}
