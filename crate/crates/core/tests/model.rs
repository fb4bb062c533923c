//! Classifier gradients against finite differences and structural checks.

use bpl_core::bpl::{init_bases, InitMethod, InitSpec};
use bpl_core::linalg::Matrix;
use bpl_core::nn::{
    bce_loss, conv1d_forward, sigmoid, ClassifierModel, Conv1dLayer, Dense, FrontLayer,
    ModelConfig,
};
use bpl_core::rng::seeded;
use bpl_core::tensor::Tensor3;
use rand::Rng;

const TINY: ModelConfig = ModelConfig {
    channels: 3,
    blocks: 2,
    kernel_size: 3,
    n_classes: 4,
};

fn sparse_input(seed: u64, shape: [usize; 3]) -> Tensor3 {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.1..2.0) })
        .collect();
    Tensor3::from_vec(shape, data).unwrap()
}

fn labels(seed: u64, rows: usize, k: usize) -> Matrix {
    let mut rng = seeded(seed);
    let data = (0..rows * k).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
    Matrix::from_vec(rows, k, data).unwrap()
}

fn fronts(f: usize, seed: u64) -> Vec<FrontLayer> {
    let mut bases = init_bases(&InitSpec::new(InitMethod::MultivariateNormal, seed), 5, f).unwrap();
    // a mix of clamped and unclamped rows
    let scale = [0.5, 1.7, 0.8, 2.2, 0.3];
    for (i, s) in scale.iter().enumerate() {
        bases.bases_mut().row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    vec![
        FrontLayer::Identity,
        FrontLayer::UnitVectorization,
        FrontLayer::FullyConnected(Dense::uniform(f, 5, seed)),
        FrontLayer::Bpl(bases),
    ]
}

fn loss_of(model: &ClassifierModel, x: &Tensor3, y: &Matrix) -> f64 {
    bce_loss(&model.forward(x).unwrap(), y).unwrap().value
}

#[test]
fn parameter_gradients_match_central_differences() {
    let h = 1e-6;
    let (f, t) = (6, 8);
    let x = sparse_input(1, [2, t, f]);
    let y = labels(2, 2, TINY.n_classes);
    for (fi, front) in fronts(f, 3).into_iter().enumerate() {
        let kind = front.kind();
        let mut model = ClassifierModel::new(TINY, f, front, 10 + fi as u64).unwrap();
        let logits = model.forward_train(&x).unwrap();
        let grads = model.backward(&bce_loss(&logits, &y).unwrap()).unwrap();
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        for (pi, name) in names.iter().enumerate() {
            let analytic = grads.get(name).unwrap().to_vec();
            let len = analytic.len();
            let mut numeric = vec![0.0; len];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = model.parameters()[pi].1[i];
                model.parameters_mut()[pi].1[i] = orig + h;
                let lp = loss_of(&model, &x, &y);
                model.parameters_mut()[pi].1[i] = orig - h;
                let lm = loss_of(&model, &x, &y);
                model.parameters_mut()[pi].1[i] = orig;
                *slot = (lp - lm) / (2.0 * h);
            }
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-7);
            assert!(
                diff / scale < 1e-4 || diff < 1e-9,
                "{kind} {name}: relative error {:e} (|g| = {scale:e})",
                diff / scale
            );
        }
    }
}

#[test]
fn default_config_has_seventeen_conv_layers() {
    let m = ClassifierModel::new(ModelConfig::default(), 48, FrontLayer::Identity, 0).unwrap();
    assert_eq!(m.conv_layer_count(), 17);
    assert_eq!(m.n_classes(), 12);
    let front = FrontLayer::Bpl(init_bases(&InitSpec::new(InitMethod::VonMises, 0), 72, 48).unwrap());
    let m = ClassifierModel::new(ModelConfig::default(), 48, front, 0).unwrap();
    assert_eq!(m.stem.in_channels, 72);
}

#[test]
fn forward_is_deterministic_and_per_sample() {
    let f = 6;
    let one = sparse_input(4, [1, 8, f]);
    let mut data = one.as_slice().to_vec();
    data.extend_from_slice(one.as_slice());
    let two = Tensor3::from_vec([2, 8, f], data).unwrap();
    for front in fronts(f, 5) {
        let m = ClassifierModel::new(TINY, f, front, 6).unwrap();
        let out = m.forward(&two).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), m.forward(&one).unwrap().row(0));
    }
}

#[test]
fn seeds_determine_weights() {
    let a = ClassifierModel::new(TINY, 6, FrontLayer::Identity, 1).unwrap();
    let b = ClassifierModel::new(TINY, 6, FrontLayer::Identity, 1).unwrap();
    let c = ClassifierModel::new(TINY, 6, FrontLayer::Identity, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn backward_without_forward_is_a_state_error() {
    let mut m = ClassifierModel::new(TINY, 6, FrontLayer::Identity, 1).unwrap();
    let loss = bce_loss(&Matrix::zeros(1, 4), &Matrix::zeros(1, 4)).unwrap();
    assert!(matches!(m.backward(&loss), Err(bpl_core::Error::State(_))));
}

#[test]
fn scaling_the_loss_scales_every_gradient() {
    let f = 6;
    let x = sparse_input(7, [2, 8, f]);
    let y = labels(8, 2, 4);
    let front = fronts(f, 9).pop().unwrap();
    let mut m = ClassifierModel::new(TINY, f, front, 3).unwrap();
    let logits = m.forward_train(&x).unwrap();
    let loss = bce_loss(&logits, &y).unwrap();
    let g1 = m.backward(&loss).unwrap();
    m.forward_train(&x).unwrap();
    let g2 = m.backward(&loss.scaled(2.0)).unwrap();
    for ((n, a), (_, b)) in g1.blocks.iter().zip(&g2.blocks) {
        for (u, v) in a.iter().zip(b) {
            assert!((2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()), "{n}");
        }
    }
}

#[test]
fn bce_matches_direct_formula_and_differences() {
    let logits = Matrix::from_rows(&[vec![0.3, -2.0, 40.0], vec![-35.0, 1.5, 0.0]]).unwrap();
    let y = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
    let l = bce_loss(&logits, &y).unwrap();
    let direct: f64 = logits
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&z, &t)| {
            // log(1 + e^z) computed without overflow for the extreme entries
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - t * z
        })
        .sum::<f64>()
        / 6.0;
    assert!((l.value - direct).abs() < 1e-14);
    let h = 1e-6;
    for i in 0..6 {
        let mut p = logits.clone();
        let mut m = logits.clone();
        p.as_mut_slice()[i] += h;
        m.as_mut_slice()[i] -= h;
        let num = (bce_loss(&p, &y).unwrap().value - bce_loss(&m, &y).unwrap().value) / (2.0 * h);
        assert!((num - l.grad_logits.as_slice()[i]).abs() < 1e-8);
        let z = logits.as_slice()[i];
        assert!((l.grad_logits.as_slice()[i] - (sigmoid(z) - y.as_slice()[i]) / 6.0).abs() < 1e-15);
    }
    assert!(bce_loss(&logits, &Matrix::zeros(2, 2)).is_err());
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = seeded(11);
    let (cin, cout, k, t) = (2, 3, 3, 5);
    let weights: Vec<f64> = (0..cout * cin * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
    let layer = Conv1dLayer::new(cin, cout, k, weights.clone(), bias.clone()).unwrap();
    // input is batch × channels × T
    let x = Tensor3::from_vec([1, cin, t], (0..cin * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = conv1d_forward(&x, &layer).unwrap();
    for o in 0..cout {
        for ti in 0..t {
            let mut want = bias[o];
            for i in 0..cin {
                for kk in 0..k {
                    let src = ti as isize + kk as isize - 1;
                    if (0..t as isize).contains(&src) {
                        want += weights[(o * cin + i) * k + kk] * x[[0, i, src as usize]];
                    }
                }
            }
            assert!((y[[0, o, ti]] - want).abs() < 1e-14);
        }
    }
}
