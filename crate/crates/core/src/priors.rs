//! Vocabulary, ground-truth annotations and the statistical prior tables
//! extracted from them.
//!
//! The counting unit for every table is the ground-truth triplet: one
//! human–object pair with its multi-label verb set.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::boxes::BoxXyxy;
use crate::tensor::{Matrix, TensorError};

pub const BACKGROUND: &str = "background";

/// Default rare-interaction threshold (training samples).
pub const DEFAULT_RARE_THRESHOLD: usize = 10;

/// Default Laplacian smoothing strength.
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown {kind} {name:?}")]
    UnknownName { line: usize, kind: &'static str, name: String },
    #[error("image {image}, triplet {index}: {msg}")]
    Invalid { image: String, index: usize, msg: String },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PriorError + '_ {
    move |source| PriorError::Io { path: path.display().to_string(), source }
}

/// Verb and object names with stable ids. The last object is always
/// [`BACKGROUND`].
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    verbs: Vec<String>,
    objects: Vec<String>,
    verb_ids: HashMap<String, usize>,
    object_ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// `objects` lists the real object classes; background is appended
    /// unless it is already the final entry.
    pub fn new(verbs: Vec<String>, mut objects: Vec<String>) -> Result<Self, PriorError> {
        if objects.last().map(String::as_str) != Some(BACKGROUND) {
            objects.push(BACKGROUND.to_string());
        }
        if objects[..objects.len() - 1].iter().any(|o| o == BACKGROUND) {
            return Err(PriorError::Vocabulary("background must be the last object".into()));
        }
        if verbs.is_empty() {
            return Err(PriorError::Vocabulary("no verbs".into()));
        }
        let mut verb_ids = HashMap::new();
        for (i, v) in verbs.iter().enumerate() {
            if verb_ids.insert(v.clone(), i).is_some() {
                return Err(PriorError::Vocabulary(format!("duplicate verb {v:?}")));
            }
        }
        let mut object_ids = HashMap::new();
        for (i, o) in objects.iter().enumerate() {
            if object_ids.insert(o.clone(), i).is_some() {
                return Err(PriorError::Vocabulary(format!("duplicate object {o:?}")));
            }
        }
        Ok(Self { verbs, objects, verb_ids, object_ids })
    }

    /// Names `v0..` and `o0..`, for synthetic data.
    pub fn numbered(num_verbs: usize, num_objects: usize) -> Self {
        let verbs = (0..num_verbs).map(|i| format!("v{i}")).collect();
        let objects = (0..num_objects).map(|i| format!("o{i}")).collect();
        Self::new(verbs, objects).expect("generated names are unique")
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    /// Number of real object classes (excluding background).
    pub fn num_objects(&self) -> usize {
        self.objects.len() - 1
    }

    pub fn background(&self) -> usize {
        self.objects.len() - 1
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    /// All object names including background.
    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn verb_id(&self, name: &str) -> Option<usize> {
        self.verb_ids.get(name).copied()
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.object_ids.get(name).copied()
    }

    /// Lines of `verb <name>` and `object <name>`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PriorError> {
        let (mut verbs, mut objects) = (Vec::new(), Vec::new());
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(kind), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(PriorError::Parse { line: n + 1, msg: format!("expected `verb|object <name>`, got {line:?}") });
            };
            match kind {
                "verb" => verbs.push(name.to_string()),
                "object" => objects.push(name.to_string()),
                other => return Err(PriorError::Parse { line: n + 1, msg: format!("unknown entry kind {other:?}") }),
            }
        }
        Self::new(verbs, objects)
    }

    pub fn load(path: &Path) -> Result<Self, PriorError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.verbs {
            s += &format!("verb {v}\n");
        }
        for o in &self.objects[..self.objects.len() - 1] {
            s += &format!("object {o}\n");
        }
        s
    }
}

/// One ground-truth human–object pair and its verbs.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiTriplet {
    pub human: BoxXyxy,
    pub object: BoxXyxy,
    pub object_class: usize,
    /// Sorted, distinct verb ids.
    pub verbs: Vec<usize>,
}

impl HoiTriplet {
    pub fn new(human: BoxXyxy, object: BoxXyxy, object_class: usize, mut verbs: Vec<usize>) -> Self {
        verbs.sort_unstable();
        verbs.dedup();
        Self { human, object, object_class, verbs }
    }

    pub fn multi_hot(&self, num_verbs: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_verbs];
        for &j in &self.verbs {
            v[j] = 1.0;
        }
        v
    }

    pub fn has_verb(&self, v: usize) -> bool {
        self.verbs.binary_search(&v).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageAnnotations {
    pub id: String,
    pub triplets: Vec<HoiTriplet>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageAnnotations>,
}

impl AnnotationSet {
    pub fn triplets(&self) -> impl Iterator<Item = &HoiTriplet> {
        self.images.iter().flat_map(|im| im.triplets.iter())
    }

    pub fn num_triplets(&self) -> usize {
        self.images.iter().map(|im| im.triplets.len()).sum()
    }

    pub fn image(&self, id: &str) -> Option<&ImageAnnotations> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Checks boxes, verb sets and class ids against `vocab`.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), PriorError> {
        for im in &self.images {
            for (index, t) in im.triplets.iter().enumerate() {
                let fail = |msg: String| PriorError::Invalid { image: im.id.clone(), index, msg };
                if !t.human.is_valid() {
                    return Err(fail(format!("invalid human box {:?}", t.human.to_array())));
                }
                if !t.object.is_valid() {
                    return Err(fail(format!("invalid object box {:?}", t.object.to_array())));
                }
                if t.object_class >= vocab.num_objects() {
                    return Err(fail(format!("object class {} is background or out of range", t.object_class)));
                }
                if t.verbs.is_empty() {
                    return Err(fail("no verbs".into()));
                }
                if let Some(&v) = t.verbs.iter().find(|&&v| v >= vocab.num_verbs()) {
                    return Err(fail(format!("verb id {v} out of range")));
                }
            }
        }
        Ok(())
    }

    /// Parses the line format
    /// `image-id hx1 hy1 hx2 hy2 ox1 oy1 ox2 oy2 object verb[,verb...]`.
    /// Records of one image may be interleaved with others; images keep the
    /// order of first appearance.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self, PriorError> {
        let mut set = AnnotationSet::default();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 11 {
                return Err(PriorError::Parse { line: line_no, msg: format!("expected 11 fields, found {}", fields.len()) });
            }
            let mut coords = [0.0; 8];
            for (k, tok) in fields[1..9].iter().enumerate() {
                coords[k] = tok
                    .parse()
                    .map_err(|e| PriorError::Parse { line: line_no, msg: format!("bad coordinate {tok:?}: {e}") })?;
            }
            let object_class = vocab
                .object_id(fields[9])
                .ok_or_else(|| PriorError::UnknownName { line: line_no, kind: "object", name: fields[9].into() })?;
            let verbs = fields[10]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|v| vocab.verb_id(v).ok_or_else(|| PriorError::UnknownName { line: line_no, kind: "verb", name: v.into() }))
                .collect::<Result<Vec<_>, _>>()?;
            let triplet = HoiTriplet::new(BoxXyxy::from_slice(&coords[..4]), BoxXyxy::from_slice(&coords[4..]), object_class, verbs);
            let slot = *index.entry(fields[0].to_string()).or_insert_with(|| {
                set.images.push(ImageAnnotations { id: fields[0].to_string(), triplets: Vec::new() });
                set.images.len() - 1
            });
            let im = &set.images[slot];
            let tmp = AnnotationSet {
                images: vec![ImageAnnotations { id: im.id.clone(), triplets: vec![triplet.clone()] }],
            };
            tmp.validate(vocab).map_err(|e| match e {
                PriorError::Invalid { msg, .. } => PriorError::Invalid { image: fields[0].into(), index: im.triplets.len(), msg: format!("line {line_no}: {msg}") },
                other => other,
            })?;
            set.images[slot].triplets.push(triplet);
        }
        Ok(set)
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self, PriorError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?, vocab)
    }

    pub fn write<W: Write>(&self, vocab: &Vocabulary, mut w: W) -> std::io::Result<()> {
        for im in &self.images {
            for t in &im.triplets {
                let verbs: Vec<&str> = t.verbs.iter().map(|&v| vocab.verbs()[v].as_str()).collect();
                let h = t.human.to_array();
                let o = t.object.to_array();
                writeln!(
                    w,
                    "{} {} {} {} {} {} {} {} {} {} {}",
                    im.id,
                    h[0],
                    h[1],
                    h[2],
                    h[3],
                    o[0],
                    o[1],
                    o[2],
                    o[3],
                    vocab.objects()[t.object_class],
                    verbs.join(",")
                )?;
            }
        }
        Ok(())
    }
}

/// Verb–verb conditional `c_ij = P(v_j | v_i)` with zero diagonal.
///
/// Rows are renormalized over `j ≠ i`; verbs that never co-occur with
/// another verb get the uniform off-diagonal row.
pub fn verb_conditional(anns: &AnnotationSet, num_verbs: usize) -> Matrix {
    let mut pair = Matrix::zeros(num_verbs, num_verbs);
    let mut single = vec![0.0; num_verbs];
    for t in anns.triplets() {
        for &i in &t.verbs {
            single[i] += 1.0;
            for &j in &t.verbs {
                if i != j {
                    pair.set(i, j, pair.get(i, j) + 1.0);
                }
            }
        }
    }
    let mut c = Matrix::zeros(num_verbs, num_verbs);
    for i in 0..num_verbs {
        let row: Vec<f64> = (0..num_verbs)
            .map(|j| if i == j || single[i] == 0.0 { 0.0 } else { pair.get(i, j) / single[i] })
            .collect();
        let total: f64 = row.iter().sum();
        for j in 0..num_verbs {
            let v = if i == j {
                0.0
            } else if total > 0.0 {
                row[j] / total
            } else {
                1.0 / (num_verbs - 1) as f64
            };
            c.set(i, j, v);
        }
    }
    c
}

/// `ĉ_ij = (c_ij + c_ji) / 2N`: symmetric, and summing to one whenever
/// every row of `c` does.
pub fn symmetrize(c: &Matrix) -> Result<Matrix, PriorError> {
    let n = c.rows();
    if c.cols() != n {
        return Err(TensorError::Shape { op: "symmetrize", left: c.shape(), right: (n, n) }.into());
    }
    let denom = 2.0 * n as f64;
    Ok(Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (c.get(i, j) + c.get(j, i)) / denom }))
}

fn object_verb_counts(anns: &AnnotationSet, vocab: &Vocabulary) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; vocab.num_verbs()]; vocab.num_objects() + 1];
    for t in anns.triplets() {
        for &v in &t.verbs {
            counts[t.object_class][v] += 1;
        }
    }
    counts
}

/// Object–verb conditional `s_ij = P(v_j | o_i)`, one row per object plus
/// the uniform background row. Rows are renormalized to sum to one because
/// a multi-label triplet contributes to several verbs; unseen objects get a
/// uniform row.
pub fn object_verb_conditional(anns: &AnnotationSet, vocab: &Vocabulary) -> Matrix {
    let np = vocab.num_verbs();
    let mut per_object = vec![0usize; vocab.num_objects() + 1];
    for t in anns.triplets() {
        per_object[t.object_class] += 1;
    }
    let counts = object_verb_counts(anns, vocab);
    let mut s = Matrix::zeros(vocab.num_objects() + 1, np);
    for (o, row_counts) in counts.iter().enumerate() {
        let raw: Vec<f64> = if o == vocab.background() || per_object[o] == 0 {
            vec![0.0; np]
        } else {
            row_counts.iter().map(|&c| c as f64 / per_object[o] as f64).collect()
        };
        let total: f64 = raw.iter().sum();
        for (j, &r) in raw.iter().enumerate() {
            s.set(o, j, if total > 0.0 { r / total } else { 1.0 / np as f64 });
        }
    }
    s
}

/// `ŝ_ij = (s_ij + β/N) / (1 + β)` with `N` the number of columns.
pub fn laplacian_smooth(s: &Matrix, beta: f64) -> Result<Matrix, PriorError> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(PriorError::Parameter(format!("beta must be finite and >= 0, got {beta}")));
    }
    let add = beta / s.cols() as f64;
    Ok(s.map(|v| (v + add) / (1.0 + beta)))
}

/// 1 where the object–verb pair occurs in training, else 0. The
/// background row is all ones.
pub fn build_mask(anns: &AnnotationSet, vocab: &Vocabulary) -> Matrix {
    let counts = object_verb_counts(anns, vocab);
    Matrix::from_fn(vocab.num_objects() + 1, vocab.num_verbs(), |o, v| {
        if o == vocab.background() || counts[o][v] > 0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Training counts per (object, verb) interaction and the rare threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct RareFlags {
    /// `counts[object][verb]` over real objects only.
    pub counts: Vec<Vec<usize>>,
    pub threshold: usize,
}

impl RareFlags {
    pub fn is_rare(&self, object: usize, verb: usize) -> bool {
        self.count(object, verb) < self.threshold
    }

    pub fn count(&self, object: usize, verb: usize) -> usize {
        self.counts.get(object).and_then(|r| r.get(verb)).copied().unwrap_or(0)
    }

    pub fn write<W: Write>(&self, vocab: &Vocabulary, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# object verb train_count rare|nonrare (threshold {})", self.threshold)?;
        for (o, row) in self.counts.iter().enumerate() {
            for (v, &c) in row.iter().enumerate() {
                let tag = if self.is_rare(o, v) { "rare" } else { "nonrare" };
                writeln!(w, "{} {} {c} {tag}", vocab.objects()[o], vocab.verbs()[v])?;
            }
        }
        Ok(())
    }
}

/// Flags interactions with fewer than `threshold` training triplets.
pub fn rare_partition(anns: &AnnotationSet, vocab: &Vocabulary, threshold: usize) -> Result<RareFlags, PriorError> {
    if threshold < 1 {
        return Err(PriorError::Parameter("rare threshold must be >= 1".into()));
    }
    let mut counts = object_verb_counts(anns, vocab);
    counts.truncate(vocab.num_objects());
    Ok(RareFlags { counts, threshold })
}

/// Every prior table extracted from one training set.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTables {
    pub c: Matrix,
    pub c_hat: Matrix,
    pub s: Matrix,
    pub s_hat: Matrix,
    pub mask: Matrix,
    pub rare: RareFlags,
    pub beta: f64,
}

impl PriorTables {
    pub fn build(anns: &AnnotationSet, vocab: &Vocabulary, beta: f64, threshold: usize) -> Result<Self, PriorError> {
        if anns.num_triplets() == 0 {
            return Err(PriorError::Parameter("no training triplets".into()));
        }
        let c = verb_conditional(anns, vocab.num_verbs());
        let c_hat = symmetrize(&c)?;
        let s = object_verb_conditional(anns, vocab);
        let s_hat = laplacian_smooth(&s, beta)?;
        let mask = build_mask(anns, vocab);
        let rare = rare_partition(anns, vocab, threshold)?;
        Ok(Self { c, c_hat, s, s_hat, mask, rare, beta })
    }

    pub fn num_verbs(&self) -> usize {
        self.c.rows()
    }

    pub fn num_objects(&self) -> usize {
        self.s.rows() - 1
    }

    /// Header lines `n_verbs`, `n_objects`, `beta`, `threshold`, then one
    /// `[name]` section per table in matrix text form. The rare counts are
    /// stored as the `counts` matrix.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n_verbs {}", self.num_verbs())?;
        writeln!(w, "n_objects {}", self.num_objects())?;
        writeln!(w, "beta {:.16e}", self.beta)?;
        writeln!(w, "threshold {}", self.rare.threshold)?;
        let counts = Matrix::from_fn(self.num_objects(), self.num_verbs(), |o, v| self.rare.counts[o][v] as f64);
        for (name, m) in [("C", &self.c), ("C_hat", &self.c_hat), ("S", &self.s), ("S_hat", &self.s_hat), ("mask", &self.mask), ("counts", &counts)] {
            writeln!(w, "[{name}]")?;
            m.write_text(&mut w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, PriorError> {
        let mut lines = reader.lines();
        let mut line_no = 0;
        let mut header: HashMap<String, String> = HashMap::new();
        let mut tables: HashMap<String, Matrix> = HashMap::new();
        loop {
            line_no += 1;
            let line = match lines.next() {
                None => break,
                Some(Err(e)) => return Err(PriorError::Parse { line: line_no, msg: e.to_string() }),
                Some(Ok(l)) => l,
            };
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let m = Matrix::read_text(&mut lines, &mut line_no)?;
                tables.insert(name.to_string(), m);
            } else {
                let mut parts = t.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some(k), Some(v)) => {
                        header.insert(k.to_string(), v.to_string());
                    }
                    _ => return Err(PriorError::Parse { line: line_no, msg: format!("bad header line {t:?}") }),
                }
            }
        }
        let field = |k: &str| header.get(k).ok_or_else(|| PriorError::Parse { line: line_no, msg: format!("missing header {k}") });
        let parse_err = |k: &str| PriorError::Parse { line: line_no, msg: format!("bad value for {k}") };
        let np: usize = field("n_verbs")?.parse().map_err(|_| parse_err("n_verbs"))?;
        let no: usize = field("n_objects")?.parse().map_err(|_| parse_err("n_objects"))?;
        let beta: f64 = field("beta")?.parse().map_err(|_| parse_err("beta"))?;
        let threshold: usize = field("threshold")?.parse().map_err(|_| parse_err("threshold"))?;
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix, PriorError> {
            let m = tables.remove(name).ok_or_else(|| PriorError::Parse { line: line_no, msg: format!("missing table [{name}]") })?;
            if m.shape() != shape {
                return Err(PriorError::Parse { line: line_no, msg: format!("table [{name}] has shape {:?}, expected {shape:?}", m.shape()) });
            }
            Ok(m)
        };
        let c = take("C", (np, np))?;
        let c_hat = take("C_hat", (np, np))?;
        let s = take("S", (no + 1, np))?;
        let s_hat = take("S_hat", (no + 1, np))?;
        let mask = take("mask", (no + 1, np))?;
        let counts_m = take("counts", (no, np))?;
        let counts = counts_m.iter_rows().map(|r| r.iter().map(|&v| v as usize).collect()).collect();
        Ok(Self { c, c_hat, s, s_hat, mask, rare: RareFlags { counts, threshold }, beta })
    }

    pub fn load(path: &Path) -> Result<Self, PriorError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        Self::read(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXyxy {
        BoxXyxy::new(x1, y1, x2, y2)
    }

    fn set_of(triplets: Vec<(usize, Vec<usize>)>) -> AnnotationSet {
        AnnotationSet {
            images: vec![ImageAnnotations {
                id: "img".into(),
                triplets: triplets
                    .into_iter()
                    .map(|(o, vs)| HoiTriplet::new(b(0.0, 0.0, 1.0, 1.0), b(0.5, 0.5, 2.0, 2.0), o, vs))
                    .collect(),
            }],
        }
    }

    #[test]
    fn vocabulary_appends_background_and_rejects_duplicates() {
        let v = Vocabulary::new(vec!["ride".into(), "hold".into()], vec!["horse".into()]).unwrap();
        assert_eq!(v.objects(), &["horse".to_string(), BACKGROUND.to_string()]);
        assert_eq!(v.background(), 1);
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], vec![]).is_err());
        assert!(Vocabulary::new(vec!["a".into()], vec![BACKGROUND.into(), "cup".into()]).is_err());
        let parsed = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(parsed, v);
    }

    #[test]
    fn single_verb_triplets_give_uniform_rows() {
        let anns = set_of(vec![(0, vec![0]), (0, vec![1]), (0, vec![2])]);
        let c = verb_conditional(&anns, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(c.get(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn verb_conditional_hand_count() {
        let anns = set_of(vec![(0, vec![0, 1]), (0, vec![0, 1]), (0, vec![0, 2])]);
        let c = verb_conditional(&anns, 3);
        assert!((c.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.get(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.get(1, 0), 1.0);
        assert_eq!(c.get(2, 0), 1.0);
        assert_eq!(c.get(1, 2), 0.0);

        let c_hat = symmetrize(&c).unwrap();
        assert!((c_hat.get(0, 1) - 5.0 / 18.0).abs() < 1e-15);
        assert!((c_hat.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetrize_of_symmetric_input_is_scaled() {
        let c = Matrix::from_rows(&[[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]);
        let c_hat = symmetrize(&c).unwrap();
        assert!(c_hat.max_abs_diff(&c.scale(1.0 / 3.0)) < 1e-15);
        assert!(symmetrize(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn object_verb_hand_count_and_background() {
        let vocab = Vocabulary::numbered(4, 2);
        let anns = set_of(vec![(0, vec![0]), (0, vec![0, 1]), (1, vec![3])]);
        let s = object_verb_conditional(&anns, &vocab);
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.row(1), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.row(2), &[0.25; 4]);
    }

    #[test]
    fn smoothing_examples() {
        let s = Matrix::from_rows(&[[1.0, 0.0]]);
        assert_eq!(laplacian_smooth(&s, 0.0).unwrap(), s);
        let sm = laplacian_smooth(&s, 0.1).unwrap();
        assert!((sm.get(0, 0) - 21.0 / 22.0).abs() < 1e-15);
        assert!((sm.get(0, 1) - 1.0 / 22.0).abs() < 1e-15);
        let flat = laplacian_smooth(&s, 1e12).unwrap();
        assert!(flat.data().iter().all(|v| (v - 0.5).abs() < 1e-9));
        assert!(laplacian_smooth(&s, -0.5).is_err());
    }

    #[test]
    fn mask_and_rare_flags() {
        let vocab = Vocabulary::numbered(3, 2);
        let mut trip = vec![(0, vec![0]); 9];
        trip.extend(vec![(1, vec![1]); 10]);
        let anns = set_of(trip);
        let mask = build_mask(&anns, &vocab);
        assert_eq!(mask.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(mask.row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(mask.row(2), &[1.0, 1.0, 1.0]);
        let rare = rare_partition(&anns, &vocab, DEFAULT_RARE_THRESHOLD).unwrap();
        assert!(rare.is_rare(0, 0));
        assert!(!rare.is_rare(1, 1));
        assert!(rare.is_rare(0, 2));
        assert!(rare_partition(&anns, &vocab, 0).is_err());
    }

    #[test]
    fn parse_validates_records() {
        let vocab = Vocabulary::new(vec!["ride".into(), "hold".into()], vec!["horse".into(), "cup".into()]).unwrap();
        let good = "a 0 0 1 1 0.5 0.5 2 2 horse ride,hold\nb 0 0 1 1 0 0 1 1 cup hold\na 0 0 2 2 0 0 1 1 cup hold\n";
        let set = AnnotationSet::parse(good, &vocab).unwrap();
        assert_eq!(set.images.len(), 2);
        assert_eq!(set.images[0].triplets.len(), 2);
        assert_eq!(set.images[0].triplets[0].verbs, vec![0, 1]);

        let bad_box = "a 2 0 1 1 0 0 1 1 horse ride\n";
        assert!(matches!(AnnotationSet::parse(bad_box, &vocab), Err(PriorError::Invalid { .. })));
        let bad_verb = "a 0 0 1 1 0 0 1 1 horse jump\n";
        assert!(matches!(AnnotationSet::parse(bad_verb, &vocab), Err(PriorError::UnknownName { kind: "verb", .. })));
        let bg = "a 0 0 1 1 0 0 1 1 background ride\n";
        assert!(matches!(AnnotationSet::parse(bg, &vocab), Err(PriorError::Invalid { .. })));
        let short = "a 0 0 1 1 0 0 1 horse ride\n";
        assert!(matches!(AnnotationSet::parse(short, &vocab), Err(PriorError::Parse { line: 1, .. })));

        let mut out = Vec::new();
        set.write(&vocab, &mut out).unwrap();
        assert_eq!(AnnotationSet::parse(std::str::from_utf8(&out).unwrap(), &vocab).unwrap(), set);
    }

    #[test]
    fn tables_round_trip_through_text() {
        let vocab = Vocabulary::numbered(3, 2);
        let anns = set_of(vec![(0, vec![0, 1]), (1, vec![2]), (0, vec![0])]);
        let t = PriorTables::build(&anns, &vocab, 0.1, 10).unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(PriorTables::read(buf.as_slice()).unwrap(), t);
    }
}
