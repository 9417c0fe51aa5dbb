//! Inference post-processing: score composition, binary-mask filtering,
//! top-K selection and the plain-text prediction dump.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::boxes::{BoxCxcywh, BoxXyxy};
use crate::priors::{PriorError, Vocabulary};
use crate::setmatch::Prediction;
use crate::tensor::ops::{sigmoid_scalar, softmax_rows};
use crate::tensor::Matrix;

/// Default number of triplets kept per image.
pub const DEFAULT_TOP_K: usize = 100;

/// One query's decoded output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTriplet {
    pub query: usize,
    pub human: BoxXyxy,
    pub object: BoxXyxy,
    /// Best non-background class.
    pub object_class: usize,
    pub object_score: f64,
    /// `object_score · σ(verb logit)` per verb.
    pub verb_scores: Vec<f64>,
}

/// Decodes every query. The last object logit is background; a query whose
/// argmax is background keeps its best real class with that (low) score.
pub fn compose_scores(pred: &Prediction) -> Vec<ScoredTriplet> {
    let probs = softmax_rows(&pred.object_logits);
    let num_real = probs.cols() - 1;
    (0..pred.num_queries())
        .map(|q| {
            let row = &probs.row(q)[..num_real];
            let mut object_class = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[object_class] {
                    object_class = k;
                }
            }
            let object_score = row[object_class];
            let verb_scores = pred.verb_logits.row(q).iter().map(|&x| object_score * sigmoid_scalar(x)).collect();
            ScoredTriplet {
                query: q,
                human: BoxCxcywh::from_slice(pred.human_boxes.row(q)).to_xyxy(),
                object: BoxCxcywh::from_slice(pred.object_boxes.row(q)).to_xyxy(),
                object_class,
                object_score,
                verb_scores,
            }
        })
        .collect()
}

/// Zeroes verb scores whose `(object, verb)` mask entry is 0.
pub fn apply_mask(triplets: &[ScoredTriplet], mask: &Matrix) -> Vec<ScoredTriplet> {
    triplets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            let row = mask.row(t.object_class);
            for (s, &m) in t.verb_scores.iter_mut().zip(row) {
                if m == 0.0 {
                    *s = 0.0;
                }
            }
            t
        })
        .collect()
}

/// One `(triplet, verb)` candidate, indexing into the input list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub triplet: usize,
    pub verb: usize,
    pub score: f64,
}

/// The `k` highest nonzero `(triplet, verb)` scores, descending, ties by
/// triplet then verb index.
pub fn top_k(triplets: &[ScoredTriplet], k: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = triplets
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            t.verb_scores.iter().enumerate().filter(|(_, s)| **s != 0.0).map(move |(v, &score)| Candidate { triplet: i, verb: v, score })
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.triplet.cmp(&b.triplet)).then(a.verb.cmp(&b.verb)));
    all.truncate(k);
    all
}

/// One retained detection of the prediction dump.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub human: BoxXyxy,
    pub object: BoxXyxy,
    pub object_class: usize,
    pub verb: usize,
    pub score: f64,
}

/// Full per-image pipeline: compose, optionally mask, keep the top `k`.
pub fn detections_for_image(image_id: &str, pred: &Prediction, mask: Option<&Matrix>, k: usize) -> Vec<Detection> {
    let mut triplets = compose_scores(pred);
    if let Some(m) = mask {
        triplets = apply_mask(&triplets, m);
    }
    top_k(&triplets, k)
        .into_iter()
        .map(|c| {
            let t = &triplets[c.triplet];
            Detection { image_id: image_id.to_string(), human: t.human, object: t.object, object_class: t.object_class, verb: c.verb, score: c.score }
        })
        .collect()
}

/// Zeroes the score of every detection on a forbidden pair.
pub fn mask_detections(dets: &[Detection], mask: &Matrix) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let mut d = d.clone();
            if mask.get(d.object_class, d.verb) == 0.0 {
                d.score = 0.0;
            }
            d
        })
        .collect()
}

/// Keeps the `k` best detections of each image (stable for equal scores),
/// preserving image order of first appearance.
pub fn truncate_per_image(dets: &[Detection], k: usize) -> Vec<Detection> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&Detection>> = HashMap::new();
    for d in dets {
        groups
            .entry(d.image_id.as_str())
            .or_insert_with(|| {
                order.push(d.image_id.as_str());
                Vec::new()
            })
            .push(d);
    }
    let mut out = Vec::with_capacity(dets.len().min(order.len() * k));
    for id in order {
        let mut g = groups.remove(id).unwrap_or_default();
        g.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.extend(g.into_iter().take(k).cloned());
    }
    out
}

/// Writes one line per detection:
/// `image-id hx1 hy1 hx2 hy2 ox1 oy1 ox2 oy2 object verb score`.
pub fn write_dump<W: Write>(dets: &[Detection], vocab: &Vocabulary, mut w: W) -> std::io::Result<()> {
    for d in dets {
        let h = d.human.to_array();
        let o = d.object.to_array();
        writeln!(
            w,
            "{} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {} {} {:e}",
            d.image_id,
            h[0],
            h[1],
            h[2],
            h[3],
            o[0],
            o[1],
            o[2],
            o[3],
            vocab.objects()[d.object_class],
            vocab.verbs()[d.verb],
            d.score
        )?;
    }
    Ok(())
}

pub fn parse_dump(text: &str, vocab: &Vocabulary) -> Result<Vec<Detection>, PriorError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 12 {
            return Err(PriorError::Parse { line: line_no, msg: format!("expected 12 fields, found {}", f.len()) });
        }
        let num = |tok: &str| -> Result<f64, PriorError> {
            let v: f64 = tok.parse().map_err(|e| PriorError::Parse { line: line_no, msg: format!("bad number {tok:?}: {e}") })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(PriorError::Parse { line: line_no, msg: format!("non-finite number {tok:?}") })
            }
        };
        let mut c = [0.0; 8];
        for (k, tok) in f[1..9].iter().enumerate() {
            c[k] = num(tok)?;
        }
        let object_class = vocab
            .object_id(f[9])
            .filter(|&o| o != vocab.background())
            .ok_or_else(|| PriorError::UnknownName { line: line_no, kind: "object", name: f[9].into() })?;
        let verb = vocab.verb_id(f[10]).ok_or_else(|| PriorError::UnknownName { line: line_no, kind: "verb", name: f[10].into() })?;
        out.push(Detection {
            image_id: f[0].to_string(),
            human: BoxXyxy::from_slice(&c[..4]),
            object: BoxXyxy::from_slice(&c[4..]),
            object_class,
            verb,
            score: num(f[11])?,
        });
    }
    Ok(out)
}

pub fn load_dump(path: &Path, vocab: &Vocabulary) -> Result<Vec<Detection>, PriorError> {
    let text = fs::read_to_string(path).map_err(|source| PriorError::Io { path: path.display().to_string(), source })?;
    parse_dump(&text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prediction(object_logits: Vec<Vec<f64>>, verb_logits: Vec<Vec<f64>>) -> Prediction {
        let n = object_logits.len();
        let boxes = Matrix::from_fn(n, 4, |_, j| if j < 2 { 0.5 } else { 0.2 });
        Prediction {
            human_boxes: boxes.clone(),
            object_boxes: boxes,
            object_logits: Matrix::from_rows(&object_logits),
            verb_logits: Matrix::from_rows(&verb_logits),
        }
    }

    #[test]
    fn certain_object_passes_verb_probabilities() {
        let p = prediction(vec![vec![800.0, 0.0, 0.0]], vec![vec![0.0, (4.0f64).ln()]]);
        let t = compose_scores(&p);
        assert_eq!(t[0].object_class, 0);
        assert_eq!(t[0].verb_scores[0], 0.5);
        assert!((t[0].verb_scores[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn background_dominated_query_keeps_best_real_class() {
        let p = prediction(vec![vec![0.0, 1.0, 5.0]], vec![vec![0.0, 2.0]]);
        let t = &compose_scores(&p)[0];
        assert_eq!(t.object_class, 1);
        let z = 1.0 + 1f64.exp() + 5f64.exp();
        assert!((t.object_score - 1f64.exp() / z).abs() < 1e-15);
        for (s, x) in t.verb_scores.iter().zip([0.0, 2.0]) {
            assert!(*s < 0.5 * sigmoid_scalar(x));
        }
    }

    #[test]
    fn mask_zeroes_only_forbidden() {
        let p = prediction(vec![vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]], vec![vec![0.3, -0.2], vec![1.0, 0.5]]);
        let t = compose_scores(&p);
        assert_eq!(apply_mask(&t, &Matrix::filled(3, 2, 1.0)), t);
        let mask = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
        let m = apply_mask(&t, &mask);
        assert_eq!(m[0].verb_scores[1], 0.0);
        assert_eq!(m[0].verb_scores[0].to_bits(), t[0].verb_scores[0].to_bits());
        assert_eq!(m[1], t[1]);
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let t: Vec<ScoredTriplet> = [[0.3, 0.9], [0.9, 0.1], [0.0, 0.5]]
            .iter()
            .enumerate()
            .map(|(q, s)| ScoredTriplet {
                query: q,
                human: BoxXyxy::new(0.0, 0.0, 1.0, 1.0),
                object: BoxXyxy::new(0.0, 0.0, 1.0, 1.0),
                object_class: 0,
                object_score: 1.0,
                verb_scores: s.to_vec(),
            })
            .collect();
        let got: Vec<(usize, usize)> = top_k(&t, 4).iter().map(|c| (c.triplet, c.verb)).collect();
        assert_eq!(got, vec![(0, 1), (1, 0), (2, 1), (0, 0)]);
        assert_eq!(top_k(&t, 1)[0].score, 0.9);
        assert_eq!(top_k(&t, 1)[0].triplet, 0);
        assert_eq!(top_k(&t, 100).len(), 5);
    }

    #[test]
    fn dump_round_trip() {
        let vocab = Vocabulary::numbered(2, 2);
        let dets = vec![Detection {
            image_id: "im1".into(),
            human: BoxXyxy::new(0.1, 0.2, 0.3, 0.4),
            object: BoxXyxy::new(0.5, 0.6, 0.7, 0.8),
            object_class: 1,
            verb: 0,
            score: 0.123456789,
        }];
        let mut buf = Vec::new();
        write_dump(&dets, &vocab, &mut buf).unwrap();
        assert_eq!(parse_dump(std::str::from_utf8(&buf).unwrap(), &vocab).unwrap(), dets);
        assert!(parse_dump("im1 0 0 1 1 0 0 1 1 o0 v9 0.5", &vocab).is_err());
        assert!(parse_dump("im1 0 0 1 1 0 0 1 1 background v0 0.5", &vocab).is_err());
    }

    #[test]
    fn truncation_is_per_image() {
        let d = |id: &str, score| Detection {
            image_id: id.into(),
            human: BoxXyxy::new(0.0, 0.0, 1.0, 1.0),
            object: BoxXyxy::new(0.0, 0.0, 1.0, 1.0),
            object_class: 0,
            verb: 0,
            score,
        };
        let dets = vec![d("a", 0.1), d("b", 0.2), d("a", 0.9), d("a", 0.5)];
        let scores: Vec<(String, f64)> = truncate_per_image(&dets, 2).into_iter().map(|x| (x.image_id, x.score)).collect();
        assert_eq!(scores, vec![("a".into(), 0.9), ("a".into(), 0.5), ("b".into(), 0.2)]);
    }
}
