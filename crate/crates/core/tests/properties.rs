use proptest::prelude::*;

use ocn_core::boxes::{giou, iou, BoxXyxy};
use ocn_core::eval::{average_precision, match_detections};
use ocn_core::infer::{mask_detections, parse_dump, truncate_per_image, write_dump, Detection};
use ocn_core::priors::{laplacian_smooth, symmetrize, AnnotationSet, HoiTriplet, ImageAnnotations, Vocabulary};
use ocn_core::setmatch::hungarian;
use ocn_core::synth::{gen_dataset, SynthConfig};
use ocn_core::tensor::{ops, Matrix};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn sized_matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| matrix(r, c, -5.0, 5.0))
}

fn stochastic_rows(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    matrix(rows, cols, 0.0, 1.0).prop_map(|m| {
        let mut m = m.map(|v| v + 1e-3);
        for i in 0..m.rows() {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        m
    })
}

fn bbox() -> impl Strategy<Value = BoxXyxy> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BoxXyxy::new(x, y, x + w, y + h))
}

fn detections(images: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0..images, bbox(), bbox(), 0..3usize, 0..4usize, 0.0..1.0f64), 0..40).prop_map(|v| {
        v.into_iter()
            .map(|(im, human, object, object_class, verb, score)| Detection { image_id: format!("img{im}"), human, object, object_class, verb, score })
            .collect()
    })
}

fn ground_truth(images: usize) -> impl Strategy<Value = AnnotationSet> {
    prop::collection::vec(prop::collection::vec((bbox(), bbox(), 0..3usize, prop::collection::btree_set(0..4usize, 1..3)), 1..4), images).prop_map(|ims| AnnotationSet {
        images: ims
            .into_iter()
            .enumerate()
            .map(|(i, ts)| ImageAnnotations {
                id: format!("img{i}"),
                triplets: ts.into_iter().map(|(h, o, c, vs)| HoiTriplet::new(h, o, c, vs.into_iter().collect())).collect(),
            })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn transpose_of_product((a, b) in (1..5usize, 1..5usize, 1..5usize).prop_flat_map(|(n, k, m)| (matrix(n, k, -3.0, 3.0), matrix(k, m, -3.0, 3.0)))) {
        let left = a.matmul(&b).unwrap().transpose();
        let right = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(m in sized_matrix(6)) {
        let s = ops::softmax_rows(&m);
        for row in s.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v > 0.0));
        }
        let shifted = ops::softmax_rows(&m.map(|v| v + 7.0));
        prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn offdiag_softmax_is_one_distribution(m in (2..7usize).prop_flat_map(|n| matrix(n, n, -20.0, 20.0))) {
        let a = ops::offdiag_softmax(&m).unwrap();
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        for i in 0..a.rows() {
            prop_assert_eq!(a.get(i, i), 0.0);
        }
    }

    #[test]
    fn layer_norm_standardizes(m in (1..5usize, 2..8usize).prop_flat_map(|(r, c)| matrix(r, c, -10.0, 10.0))) {
        let c = m.cols();
        let out = ops::layer_norm(&m, &Matrix::filled(1, c, 1.0), &Matrix::zeros(1, c)).unwrap();
        for row in out.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() / c as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothing_keeps_rows_stochastic(s in (1..5usize, 2..8usize).prop_flat_map(|(r, c)| stochastic_rows(r, c)), beta in 0.0..100.0f64) {
        let sm = laplacian_smooth(&s, beta).unwrap();
        let floor = beta / (s.cols() as f64 * (1.0 + beta));
        for row in sm.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= floor - 1e-15));
        }
    }

    #[test]
    fn symmetrized_rows_give_one_distribution(c in (2..7usize).prop_flat_map(|n| stochastic_rows(n, n))) {
        let n = c.rows();
        let c = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { c.get(i, j) });
        let c = Matrix::from_fn(n, n, |i, j| c.get(i, j) / c.row(i).iter().sum::<f64>());
        let sym = symmetrize(&c).unwrap();
        prop_assert!((sym.sum() - 1.0).abs() < 1e-12);
        prop_assert!(sym.max_abs_diff(&sym.transpose()) == 0.0);
    }

    #[test]
    fn hungarian_shift_invariance(cost in (1..6usize).prop_flat_map(|n| (Just(n), n..8usize)).prop_flat_map(|(n, m)| matrix(n, m, -5.0, 5.0)), row_shift in -3.0..3.0f64) {
        let base = hungarian(&cost).unwrap();
        let mut cols = base.assignment.clone();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), cost.rows());
        let mut shifted = cost.clone();
        shifted.row_mut(0).iter_mut().for_each(|v| *v += row_shift);
        let again = hungarian(&shifted).unwrap();
        prop_assert!((again.total_cost - base.total_cost - row_shift).abs() < 1e-9);
        // any other injective assignment costs at least as much
        let greedy: f64 = (0..cost.rows()).map(|i| cost.get(i, i)).sum();
        prop_assert!(base.total_cost <= greedy + 1e-12);
    }

    #[test]
    fn iou_bounds(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let g = giou(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&g) && g <= v + 1e-12);
    }

    #[test]
    fn masking_only_zeroes_forbidden(dets in detections(3), bits in prop::collection::vec(any::<bool>(), 16)) {
        let mask = Matrix::from_fn(4, 4, |o, v| if bits[o * 4 + v] { 1.0 } else { 0.0 });
        let masked = mask_detections(&dets, &mask);
        prop_assert_eq!(masked.len(), dets.len());
        for (d, m) in dets.iter().zip(&masked) {
            let allowed = mask.get(d.object_class, d.verb) == 1.0;
            prop_assert_eq!(m.score, if allowed { d.score } else { 0.0 });
        }
    }

    #[test]
    fn truncation_keeps_best_per_image(dets in detections(3), k in 1..6usize) {
        let kept = truncate_per_image(&dets, k);
        for im in 0..3 {
            let id = format!("img{im}");
            let mut all: Vec<f64> = dets.iter().filter(|d| d.image_id == id).map(|d| d.score).collect();
            all.sort_by(|a, b| b.total_cmp(a));
            let mut got: Vec<f64> = kept.iter().filter(|d| d.image_id == id).map(|d| d.score).collect();
            got.sort_by(|a, b| b.total_cmp(a));
            all.truncate(k);
            prop_assert_eq!(got, all);
        }
    }

    #[test]
    fn ap_is_bounded_and_rank_based(gts in ground_truth(3), dets in detections(3), factor in 0.1..10.0f64) {
        let base = match_detections(&dets, &gts, 0.5);
        let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * factor, ..d.clone() }).collect();
        let other = match_detections(&scaled, &gts, 0.5);
        for (key, m) in &base {
            let ap = average_precision(&m.tp, m.n_gt);
            if let Some(ap) = ap {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            }
            prop_assert_eq!(ap, average_precision(&other[key].tp, other[key].n_gt));
        }
    }

    #[test]
    fn dump_round_trip(dets in detections(3)) {
        let vocab = Vocabulary::numbered(4, 3);
        let mut buf = Vec::new();
        write_dump(&dets, &vocab, &mut buf).unwrap();
        let back = parse_dump(std::str::from_utf8(&buf).unwrap(), &vocab).unwrap();
        prop_assert_eq!(back, dets);
    }
}

#[test]
fn perfect_ranking_has_unit_ap() {
    assert_eq!(average_precision(&[true, true, true], 3), Some(1.0));
    assert_eq!(average_precision(&[false, false], 2), Some(0.0));
    assert_eq!(average_precision(&[], 0), None);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let cfg = SynthConfig { train_images: 30, test_images: 10, ..SynthConfig::default() };
    let a = gen_dataset(&cfg).unwrap();
    let b = gen_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let c = gen_dataset(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.train, c.train);
    a.train.annotations.validate(&a.vocab).unwrap();
    a.test.annotations.validate(&a.vocab).unwrap();
}
