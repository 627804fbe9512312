use proptest::prelude::*;

use super::*;
use crate::rng::CounterRng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = CounterRng::new(seed);
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Straightforward triple-loop forward pass, independent of `forward`.
fn naive_logits(arch: &Architecture, params: &[f64], x: &Matrix) -> Vec<Vec<f64>> {
    let dims = arch.dims();
    let mut out = Vec::new();
    for r in 0..x.rows() {
        let mut a: Vec<f64> = x.row(r).to_vec();
        let mut offset = 0;
        for l in 0..dims.len() - 1 {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let mut z = vec![0.0; fo];
            for j in 0..fo {
                let mut s = params[offset + fi * fo + j];
                for i in 0..fi {
                    s += a[i] * params[offset + i * fo + j];
                }
                z[j] = s;
            }
            offset += fi * fo + fo;
            a = if l + 2 == dims.len() {
                z
            } else {
                match arch.activation() {
                    Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                    Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                }
            };
        }
        out.push(a);
    }
    out
}

#[test]
fn zero_network_gives_zero_logits() {
    let arch = Architecture::new(vec![4, 6, 3], Activation::Tanh).unwrap();
    let model = arch.model(ParamVector::zeros(arch.layout().clone())).unwrap();
    let logits = model.logits(&random_matrix(5, 4, 1)).unwrap();
    assert!(logits.data().iter().all(|v| *v == 0.0));
}

#[test]
fn linear_layer_returns_weight_row_for_basis_input() {
    let arch = Architecture::new(vec![3, 3], Activation::Tanh).unwrap();
    let values: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
    let params = ParamVector::from_values(arch.layout().clone(), values.clone()).unwrap();
    let mut model = arch.model(params).unwrap();
    model.params_mut().values_mut()[9..].fill(0.0);
    for c in 0..3 {
        let mut e = Matrix::zeros(1, 3);
        e.set(0, c, 1.0);
        let logits = model.logits(&e).unwrap();
        // weights stored fan_in x fan_out: input c feeds row c
        assert_eq!(logits.row(0), &values[c * 3..c * 3 + 3]);
    }
}

#[test]
fn forward_matches_naive_oracle() {
    for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu)] {
        let arch = Architecture::new(vec![5, 7, 6, 4], act).unwrap();
        let model = MlpModel::new(arch.clone(), seed);
        let mut params = model.params().clone();
        let mut rng = CounterRng::new(seed + 100);
        params.values_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        let model = arch.model(params).unwrap();
        let x = random_matrix(9, 5, seed + 7);
        let logits = model.logits(&x).unwrap();
        let naive = naive_logits(&arch, model.params().values(), &x);
        for (r, row) in naive.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((logits.get(r, c) - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn forward_rejects_wrong_width() {
    let arch = Architecture::new(vec![4, 3], Activation::Tanh).unwrap();
    let model = MlpModel::new(arch, 0);
    assert!(matches!(forward(&model, &Matrix::zeros(2, 5)), Err(crate::Error::Shape(_))));
}

#[test]
fn forward_is_pure() {
    let arch = Architecture::new(vec![4, 8, 3], Activation::Tanh).unwrap();
    let model = MlpModel::new(arch, 3);
    let x = random_matrix(6, 4, 4);
    let a = forward(&model, &x).unwrap();
    let b = forward(&model, &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn init_is_bounded_and_deterministic() {
    let arch = Architecture::new(vec![10, 20, 5], Activation::Tanh).unwrap();
    let a = arch.init_params(42);
    assert_eq!(a, arch.init_params(42));
    assert_ne!(a, arch.init_params(43));
    for span in arch.layout().layers() {
        let bound = (6.0 / (span.fan_in + span.fan_out) as f64).sqrt();
        assert!(a.values()[span.weight_range()].iter().all(|w| w.abs() <= bound));
        assert!(a.values()[span.bias_range()].iter().all(|b| *b == 0.0));
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let arch = Architecture::new(vec![4, 5, 3], Activation::Tanh).unwrap();
    let model = MlpModel::new(arch, 1);
    let trace = forward(&model, &random_matrix(4, 4, 2)).unwrap();
    let g = backward(&model, &trace, &Matrix::zeros(4, 3)).unwrap();
    assert!(g.values().iter().all(|v| *v == 0.0));
}

#[test]
fn backward_rejects_foreign_trace() {
    let a = MlpModel::new(Architecture::new(vec![4, 5, 3], Activation::Tanh).unwrap(), 1);
    let b = MlpModel::new(Architecture::new(vec![4, 6, 3], Activation::Tanh).unwrap(), 1);
    let trace = forward(&a, &random_matrix(2, 4, 2)).unwrap();
    assert!(matches!(
        backward(&b, &trace, &Matrix::zeros(2, 3)),
        Err(crate::Error::LayoutMismatch)
    ));
}

fn ce_loss(model: &MlpModel, x: &Matrix, y: &[usize]) -> f64 {
    cross_entropy(&model.logits(x).unwrap(), y).unwrap().0
}

#[test]
fn backward_matches_finite_differences() {
    for act in [Activation::Tanh, Activation::Relu] {
        let arch = Architecture::new(vec![3, 6, 4], act).unwrap();
        let model = MlpModel::new(arch.clone(), 5);
        let x = random_matrix(8, 3, 6);
        let y = [0, 1, 2, 3, 3, 2, 1, 0];
        let trace = forward(&model, &x).unwrap();
        let (_, gl) = cross_entropy(trace.logits(), &y).unwrap();
        let grad = backward(&model, &trace, &gl).unwrap();
        let eps = 1e-5;
        for p in 0..model.params().len() {
            let mut plus = model.clone();
            plus.params_mut().values_mut()[p] += eps;
            let mut minus = model.clone();
            minus.params_mut().values_mut()[p] -= eps;
            let fd = (ce_loss(&plus, &x, &y) - ce_loss(&minus, &x, &y)) / (2.0 * eps);
            let a = grad.values()[p];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "{act:?} param {p}: analytic {a} fd {fd}");
        }
    }
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let arch = Architecture::new(vec![3, 5, 4, 2], Activation::Tanh).unwrap();
    let model = MlpModel::new(arch, 9);
    let x = random_matrix(8, 3, 10);
    let target = random_matrix(8, 4, 11);
    // loss = 0.5 * sum (h - target)^2
    let loss = |m: &MlpModel| {
        let t = forward(m, &x).unwrap();
        t.latent()
            .data()
            .iter()
            .zip(target.data())
            .map(|(h, g)| 0.5 * (h - g).powi(2))
            .sum::<f64>()
    };
    let trace = forward(&model, &x).unwrap();
    let mut gh = trace.latent().clone();
    gh.add_scaled(&target, -1.0).unwrap();
    let grad = backward_with_latent(&model, &trace, &Matrix::zeros(8, 2), Some(&gh)).unwrap();
    let eps = 1e-5;
    for p in 0..model.params().len() {
        let mut plus = model.clone();
        plus.params_mut().values_mut()[p] += eps;
        let mut minus = model.clone();
        minus.params_mut().values_mut()[p] -= eps;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let a = grad.values()[p];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        assert!(rel < 1e-4, "param {p}: analytic {a} fd {fd}");
    }
}

#[test]
fn single_layer_softmax_gradient_closed_form() {
    let arch = Architecture::new(vec![3, 4], Activation::Tanh).unwrap();
    let model = MlpModel::new(arch, 12);
    let x = random_matrix(5, 3, 13);
    let y = [0, 3, 1, 1, 2];
    let trace = forward(&model, &x).unwrap();
    let (_, gl) = cross_entropy(trace.logits(), &y).unwrap();
    let grad = backward(&model, &trace, &gl).unwrap();
    // dW[i][c] = mean_n x_{n,i} (q_{n,c} - onehot_{n,c}); db[c] = mean_n (q - onehot)
    let logits = trace.logits();
    let mut expect_w = [[0.0; 4]; 3];
    let mut expect_b = [0.0; 4];
    for n in 0..5 {
        let z = logits.row(n);
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let r = z[c].exp() / denom - if y[n] == c { 1.0 } else { 0.0 };
            expect_b[c] += r / 5.0;
            for i in 0..3 {
                expect_w[i][c] += x.get(n, i) * r / 5.0;
            }
        }
    }
    for i in 0..3 {
        for c in 0..4 {
            assert!((grad.values()[i * 4 + c] - expect_w[i][c]).abs() < 1e-8);
        }
    }
    for c in 0..4 {
        assert!((grad.values()[12 + c] - expect_b[c]).abs() < 1e-8);
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
        tau in 0.05f64..20.0,
    ) {
        let q = softmax_t(&logits, tau).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(q.iter().all(|v| *v >= 0.0 && *v <= 1.0));
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let qs = softmax_t(&shifted, tau).unwrap();
        for (a, b) in q.iter().zip(&qs) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
