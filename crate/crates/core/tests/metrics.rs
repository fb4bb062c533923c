//! F1 against brute-force counting, and the embedding export.

use bpl_core::linalg::Matrix;
use bpl_core::metrics::{
    basis_embedding, embedding_csv, export_basis_embedding, multilabel_f1, threshold_predict,
    F1Mode,
};

fn bits(code: u32, n: usize) -> Vec<f64> {
    (0..n).map(|i| f64::from((code >> i) & 1)).collect()
}

/// Textbook F1 written from scratch: 2PR / (P + R), with 0 when undefined.
fn reference_f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn reference(pred: &[f64], truth: &[f64], k: usize) -> (f64, f64) {
    let mut per = vec![(0.0, 0.0, 0.0); k];
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        let c = &mut per[i % k];
        match (*p == 1.0, *t == 1.0) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, true) => c.2 += 1.0,
            _ => {}
        }
    }
    let total = per
        .iter()
        .fold((0.0, 0.0, 0.0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let micro = reference_f1(total.0, total.1, total.2);
    let macro_ = per.iter().map(|c| reference_f1(c.0, c.1, c.2)).sum::<f64>() / k as f64;
    (micro, macro_)
}

#[test]
fn all_three_by_two_cases_match_brute_force() {
    let (rows, k) = (3, 2);
    for p in 0..64u32 {
        for t in 0..64u32 {
            let pred = Matrix::from_vec(rows, k, bits(p, 6)).unwrap();
            let truth = Matrix::from_vec(rows, k, bits(t, 6)).unwrap();
            let (micro, macro_) = reference(pred.as_slice(), truth.as_slice(), k);
            let got_micro = multilabel_f1(&pred, &truth, F1Mode::Micro).unwrap();
            let got_macro = multilabel_f1(&pred, &truth, F1Mode::Macro).unwrap();
            assert!((got_micro - micro).abs() < 1e-12, "{p} {t}");
            assert!((got_macro - macro_).abs() < 1e-12, "{p} {t}");
        }
    }
}

#[test]
fn class_permutation_leaves_scores_unchanged() {
    let pred = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
    let truth = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
    let perm = |m: &Matrix| {
        Matrix::from_rows(&(0..2).map(|i| vec![m[(i, 2)], m[(i, 0)], m[(i, 1)]]).collect::<Vec<_>>())
            .unwrap()
    };
    for mode in [F1Mode::Micro, F1Mode::Macro] {
        let a = multilabel_f1(&pred, &truth, mode).unwrap();
        let b = multilabel_f1(&perm(&pred), &perm(&truth), mode).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn thresholding_then_scoring() {
    let probs = Matrix::from_rows(&[vec![0.9, 0.2], vec![0.5, 0.49]]).unwrap();
    let pred = threshold_predict(&probs, 0.5).unwrap();
    assert_eq!(pred.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
    assert!(threshold_predict(&Matrix::from_rows(&[vec![1.2]]).unwrap(), 0.5).is_err());
}

#[test]
fn embedding_has_one_row_per_basis_and_is_deterministic() {
    let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.5, 0.5, 0.1]]).unwrap();
    let b = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.3, 0.3, 0.3]]).unwrap();
    let sets = vec![("learned".to_string(), a), ("svd".to_string(), b)];
    let rows = basis_embedding(&sets).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().filter(|r| r.set_name == "learned").count(), 3);
    assert_eq!(rows[4].basis_index, 1);

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_basis_embedding(&sets, &p1).unwrap();
    export_basis_embedding(&sets, &p2).unwrap();
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    assert_eq!(text, embedding_csv(&rows));
    let first = text.lines().nth(1).unwrap();
    let pc1: f64 = first.split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(pc1, rows[0].pc1);

    let bad = vec![("a,b".to_string(), Matrix::identity(3))];
    assert!(export_basis_embedding(&bad, &p1).is_err());
    let mismatched = vec![
        ("a".to_string(), Matrix::identity(3)),
        ("b".to_string(), Matrix::identity(2)),
    ];
    assert!(basis_embedding(&mismatched).is_err());
}
