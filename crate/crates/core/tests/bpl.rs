//! Projection layer: gradients against finite differences, the clamp
//! invariant, exact zeros, and initializer statistics.

use std::f64::consts::PI;

use bpl_core::bpl::{
    bpl_backward, bpl_forward, clamp_bases, init_bases, p_norm, BasisSet, Denominator, InitMethod,
    InitSpec,
};
use bpl_core::data::{generate_synthetic, sparsity_ratio, SyntheticSpec};
use bpl_core::linalg::Matrix;
use bpl_core::rng::seeded;
use bpl_core::tensor::Tensor3;
use bpl_core::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Bases with row norms drawn from [0.2, 2.5], kept away from the clamp
/// boundary where the map is not differentiable.
fn random_bases(rng: &mut impl Rng, n: usize, f: usize) -> Matrix {
    let mut data = Vec::with_capacity(n * f);
    for _ in 0..n {
        let mut row = normal_vec(rng, f);
        let norm = p_norm(&row, 2.0);
        let target = loop {
            let t: f64 = rng.random_range(0.2..2.5);
            if (t - 1.0).abs() > 1e-2 {
                break t;
            }
        };
        row.iter_mut().for_each(|v| *v *= target / norm);
        data.extend(row);
    }
    Matrix::from_vec(n, f, data).unwrap()
}

/// Σ g ⊙ y, whose gradient is the backward pass seeded with `g`.
fn objective(x: &Tensor3, b: &BasisSet, g: &Tensor3) -> f64 {
    let y = bpl_forward(x, b).unwrap().coefficients;
    y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

fn check_gradients(seed: u64, denominator: Denominator) -> (f64, usize) {
    let h = 1e-6;
    let mut rng = seeded(seed);
    let (batch, t_len, f, n) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(2..=6),
        rng.random_range(1..=5),
    );
    let x = Tensor3::from_vec([batch, t_len, f], normal_vec(&mut rng, batch * t_len * f)).unwrap();
    let b = BasisSet::new(random_bases(&mut rng, n, f))
        .unwrap()
        .with_denominator(denominator);
    let clamped_rows = (0..n).filter(|&i| b.row_norm(i) > 1.0).count();
    let g = Tensor3::from_vec([batch, t_len, n], normal_vec(&mut rng, batch * t_len * n)).unwrap();

    let out = bpl_forward(&x, &b).unwrap();
    let (gx, gb) = bpl_backward(&g, &out).unwrap();

    let mut num_x = vec![0.0; x.as_slice().len()];
    for (i, slot) in num_x.iter_mut().enumerate() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.as_mut_slice()[i] += h;
        xm.as_mut_slice()[i] -= h;
        *slot = (objective(&xp, &b, &g) - objective(&xm, &b, &g)) / (2.0 * h);
    }
    let mut num_b = vec![0.0; n * f];
    for (i, slot) in num_b.iter_mut().enumerate() {
        let (mut bp, mut bm) = (b.clone(), b.clone());
        bp.bases_mut().as_mut_slice()[i] += h;
        bm.bases_mut().as_mut_slice()[i] -= h;
        *slot = (objective(&x, &bp, &g) - objective(&x, &bm, &g)) / (2.0 * h);
    }
    let err = rel_error(gx.as_slice(), &num_x).max(rel_error(gb.as_slice(), &num_b));
    (err, clamped_rows)
}

#[test]
fn backward_matches_central_differences() {
    let mut worst: f64 = 0.0;
    let (mut clamped, mut unclamped) = (0, 0);
    for seed in 0..150 {
        let (err, c) = check_gradients(seed, Denominator::Norm);
        worst = worst.max(err);
        if c > 0 {
            clamped += 1;
        }
        if c == 0 {
            unclamped += 1;
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
    assert!(clamped > 10 && unclamped > 10, "coverage {clamped}/{unclamped}");
}

#[test]
fn backward_matches_central_differences_squared_denominator() {
    for seed in 500..540 {
        let (err, _) = check_gradients(seed, Denominator::NormSquared);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn backward_matches_central_differences_for_other_norms() {
    let h = 1e-6;
    for (seed, p) in [(1u64, 1.5), (2, 3.0), (3, 4.0)] {
        let mut rng = seeded(seed);
        let x = Tensor3::from_vec([1, 2, 4], normal_vec(&mut rng, 8)).unwrap();
        let mut bases = random_bases(&mut rng, 3, 4);
        // keep entries away from zero where |v|^p has a kink for p < 2
        bases.as_mut_slice().iter_mut().for_each(|v| {
            if v.abs() < 0.05 {
                *v = 0.05_f64.copysign(*v);
            }
        });
        let b = BasisSet::new(bases).unwrap().with_norm_type(p).unwrap();
        if (0..3).any(|i| (b.row_norm(i) - 1.0).abs() < 1e-2) {
            continue;
        }
        let g = Tensor3::from_vec([1, 2, 3], normal_vec(&mut rng, 6)).unwrap();
        let out = bpl_forward(&x, &b).unwrap();
        let (_, gb) = bpl_backward(&g, &out).unwrap();
        let num: Vec<f64> = (0..12)
            .map(|i| {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp.bases_mut().as_mut_slice()[i] += h;
                bm.bases_mut().as_mut_slice()[i] -= h;
                (objective(&x, &bp, &g) - objective(&x, &bm, &g)) / (2.0 * h)
            })
            .collect();
        let err = rel_error(gb.as_slice(), &num);
        assert!(err < 1e-4, "p = {p}: relative error {err:e}");
    }
}

fn basis_strategy() -> impl Strategy<Value = Matrix> {
    (1usize..6, 1usize..8).prop_flat_map(|(n, f)| {
        prop::collection::vec(
            prop_oneof![-1e3..1e3f64, -2.0..2.0f64, -1e-3..1e-3f64, Just(0.0)],
            n * f,
        )
        .prop_map(move |v| Matrix::from_vec(n, f, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn clamp_bounds_norms_and_is_idempotent(m in basis_strategy()) {
        let b = BasisSet::new(m).unwrap();
        let once = clamp_bases(&b);
        for i in 0..once.n_bases() {
            prop_assert!(p_norm(once.bases().row(i), 2.0) <= 1.0 + 1e-12);
        }
        let twice = clamp_bases(&once);
        for (a, c) in once.bases().as_slice().iter().zip(twice.bases().as_slice()) {
            prop_assert_eq!(a.to_bits(), c.to_bits());
        }
    }
}

#[test]
fn clamp_examples() {
    let b = BasisSet::new(Matrix::from_rows(&[vec![3.0, 4.0], vec![0.3, 0.4]]).unwrap()).unwrap();
    let c = clamp_bases(&b);
    assert_eq!(c.bases().row(0), &[0.6, 0.8]);
    assert_eq!(c.bases().row(1), &[0.3, 0.4]);
}

#[test]
fn coefficients_scale_with_input_and_ignore_basis_scale() {
    let mut rng = seeded(3);
    let x = Tensor3::from_vec([2, 3, 5], normal_vec(&mut rng, 30)).unwrap();
    let m = random_bases(&mut rng, 4, 5);
    let b = BasisSet::new(m.clone()).unwrap();
    let y = bpl_forward(&x, &b).unwrap().coefficients;

    let mut x2 = x.clone();
    x2.scale(2.5);
    let y2 = bpl_forward(&x2, &b).unwrap().coefficients;
    for (a, c) in y.as_slice().iter().zip(y2.as_slice()) {
        assert!((2.5 * a - c).abs() < 1e-12 * (1.0 + c.abs()));
    }

    for s in [1e-3, 0.37, 7.0, 1e4] {
        let scaled = Matrix::from_vec(4, 5, m.as_slice().iter().map(|v| v * s).collect()).unwrap();
        let ys = bpl_forward(&x, &BasisSet::new(scaled).unwrap()).unwrap().coefficients;
        for (a, c) in y.as_slice().iter().zip(ys.as_slice()) {
            assert!((a - c).abs() < 1e-12 * (1.0 + a.abs()), "scale {s}: {a} vs {c}");
        }
    }
}

#[test]
fn orthogonal_pairs_give_exact_zero() {
    // disjoint supports
    let x = Tensor3::from_vec([1, 1, 4], vec![0.0, 2.5, 0.0, 7.0]).unwrap();
    let b = BasisSet::new(
        Matrix::from_rows(&[vec![3.0, 0.0, -1.0, 0.0], vec![0.0, 0.0, 0.2, 0.0]]).unwrap(),
    )
    .unwrap();
    let y = bpl_forward(&x, &b).unwrap().coefficients;
    assert_eq!(y.as_slice(), &[0.0, 0.0]);

    // exactly representable cancellation
    let x = Tensor3::from_vec([1, 1, 2], vec![1.0, 1.0]).unwrap();
    let b = BasisSet::new(Matrix::from_rows(&[vec![0.5, -0.5], vec![4.0, -4.0]]).unwrap()).unwrap();
    let y = bpl_forward(&x, &b).unwrap().coefficients;
    assert_eq!(y.as_slice(), &[0.0, 0.0]);

    // the zero element is orthogonal to everything
    let x = Tensor3::zeros([1, 1, 3]);
    let b = BasisSet::new(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
    assert_eq!(bpl_forward(&x, &b).unwrap().coefficients.as_slice(), &[0.0]);
}

#[test]
fn zero_basis_rows_output_zero_with_zero_gradient() {
    let x = Tensor3::from_vec([1, 2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
    let b = BasisSet::new(Matrix::from_rows(&[vec![0.0; 3], vec![1.0, 0.0, 0.0]]).unwrap()).unwrap();
    let out = bpl_forward(&x, &b).unwrap();
    assert_eq!(out.coefficients[[0, 0, 0]], 0.0);
    assert_eq!(out.coefficients[[0, 1, 0]], 0.0);
    let g = Tensor3::from_vec([1, 2, 2], vec![1.0; 4]).unwrap();
    let (_, gb) = bpl_backward(&g, &out).unwrap();
    assert_eq!(gb.row(0), &[0.0; 3]);
}

#[test]
fn sparse_input_becomes_dense() {
    let d = generate_synthetic(&SyntheticSpec {
        n_samples: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let x = d.batch(&d.all_indices());
    let before = sparsity_ratio(x.as_slice()).unwrap();
    assert!((before - 0.80).abs() <= 0.02, "input sparsity {before}");
    for method in [InitMethod::VonMises, InitMethod::MultivariateNormal] {
        let b = init_bases(&InitSpec::new(method, 1), 48, d.f_dim).unwrap();
        let y = bpl_forward(&x, &b).unwrap().coefficients;
        let after = sparsity_ratio(y.as_slice()).unwrap();
        assert!(after < 0.01, "{}: output sparsity {after}", method.name());
    }
}

/// I1(κ)/I0(κ) from the power series of the modified Bessel functions.
fn bessel_ratio(kappa: f64) -> f64 {
    let series = |nu: i32| {
        let half = kappa / 2.0;
        let mut term = half.powi(nu) / (1..=nu).map(f64::from).product::<f64>();
        let mut sum = term;
        for k in 1..200 {
            term *= half * half / (k as f64 * (k + nu) as f64);
            sum += term;
        }
        sum
    };
    series(1) / series(0)
}

#[test]
fn von_mises_mean_cosine_matches_bessel_ratio() {
    let f = 16;
    let oracle = bessel_ratio(PI);
    assert!((oracle - 0.819_931_321_064_25).abs() < 1e-12, "oracle {oracle}");
    for seed in 0..3 {
        let b = init_bases(&InitSpec::new(InitMethod::VonMises, seed), 2000, f).unwrap();
        let center = 1.0 / (f as f64).sqrt();
        let mean_cos = (0..2000)
            .map(|i| b.bases().row(i).iter().sum::<f64>() * center)
            .sum::<f64>()
            / 2000.0;
        assert!((mean_cos - oracle).abs() < 0.03, "seed {seed}: {mean_cos} vs {oracle}");
        for i in 0..2000 {
            assert!((p_norm(b.bases().row(i), 2.0) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn von_mises_respects_a_custom_center() {
    let mut spec = InitSpec::new(InitMethod::VonMises, 4);
    spec.center = Some(vec![0.0, 0.0, 3.0, 0.0, 0.0]);
    spec.concentration = 50.0;
    let b = init_bases(&spec, 500, 5).unwrap();
    let mean_cos = (0..500).map(|i| b.bases()[(i, 2)]).sum::<f64>() / 500.0;
    assert!((mean_cos - bessel_ratio(50.0)).abs() < 0.01, "{mean_cos}");
}

#[test]
fn multivariate_normal_statistics() {
    let f = 10;
    let b = init_bases(&InitSpec::new(InitMethod::MultivariateNormal, 7), 4000, f).unwrap();
    let v = b.bases().as_slice();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0 / f as f64).abs() < 0.01, "variance {var}");
}

#[test]
fn factorization_initializers_report_capacity() {
    let mut rng = seeded(0);
    let data = Matrix::from_vec(
        30,
        8,
        (0..240).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    for method in [InitMethod::Svd, InitMethod::Nmf] {
        let spec = InitSpec::new(method, 0).with_data(data.clone());
        let b = init_bases(&spec, 8, 8).unwrap();
        assert_eq!(b.n_bases(), 8);
        for i in 0..8 {
            assert!((p_norm(b.bases().row(i), 2.0) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            init_bases(&spec, 9, 8),
            Err(Error::Capacity { requested: 9, available: 8 })
        ));
        let short = InitSpec::new(method, 0).with_data(
            Matrix::from_vec(3, 8, data.as_slice()[..24].to_vec()).unwrap(),
        );
        assert!(matches!(
            init_bases(&short, 4, 8),
            Err(Error::Capacity { requested: 4, available: 3 })
        ));
        assert!(matches!(
            init_bases(&InitSpec::new(method, 0), 2, 8),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn svd_bases_are_the_leading_right_singular_vectors() {
    // rank-1 data: every row is a multiple of v
    let v = [0.0, 3.0, 4.0];
    let rows: Vec<Vec<f64>> = (1..=5).map(|k| v.iter().map(|x| x * k as f64).collect()).collect();
    let spec = InitSpec::new(InitMethod::Svd, 0).with_data(Matrix::from_rows(&rows).unwrap());
    let b = init_bases(&spec, 1, 3).unwrap();
    let got = b.bases().row(0);
    for (g, w) in got.iter().zip([0.0, 0.6, 0.8]) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }
}
