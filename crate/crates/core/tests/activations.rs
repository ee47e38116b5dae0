use proptest::prelude::*;
use spoofnet::activations::{arelu, elsa, ActivationKind, ActivationSpec, Mode};
use spoofnet::numerics::{Graph, Tensor};
use spoofnet::seed_rng;

fn eval(spec: &ActivationSpec, xs: &[f64]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([xs.len()], xs).unwrap());
    let y = spec.apply(&mut g, x, Mode::Eval, None).unwrap();
    g.value(y).data().to_vec()
}

fn single_kinds() -> Vec<ActivationSpec> {
    [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::Rrelu,
        ActivationKind::Elu,
        ActivationKind::Prelu,
        ActivationKind::Arelu,
    ]
    .into_iter()
    .map(|k| ActivationSpec::init(k).unwrap())
    .collect()
}

#[test]
fn positive_homogeneity_holds_except_for_elu() {
    let xs = [-3.0, -0.5, -0.001, 0.0, 0.25, 4.0];
    for spec in single_kinds() {
        for c in [0.5, 2.0, 7.0] {
            let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let lhs = eval(&spec, &scaled);
            let rhs: Vec<f64> = eval(&spec, &xs).iter().map(|y| c * y).collect();
            let holds = lhs.iter().zip(&rhs).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            if spec.kind() == ActivationKind::Elu {
                assert!(!holds, "ELU is not homogeneous on x < 0");
            } else {
                assert!(holds, "{spec} at c={c}");
            }
        }
    }
}

#[test]
fn arelu_parameter_gradients_match_closed_form() {
    let sigmoid = |b: f64| 1.0 / (1.0 + (-b).exp());
    for (alpha, beta) in [(0.9, 2.0), (0.3, -1.0), (1.5, 0.5)] {
        for x in [-2.0, -0.3, 0.4, 3.0] {
            let mut g = Graph::<f64>::new();
            let xv = g.leaf(Tensor::from_f64([1], &[x]).unwrap().with_requires_grad(true));
            let a = g.leaf(Tensor::from_f64([1], &[alpha]).unwrap().with_requires_grad(true));
            let b = g.leaf(Tensor::from_f64([1], &[beta]).unwrap().with_requires_grad(true));
            let y = arelu(&mut g, xv, a, b).unwrap();
            let root = g.sum_all(y).unwrap();
            let grads = g.backward(root).unwrap();
            let s = sigmoid(beta);
            let want_b = if x >= 0.0 { s * (1.0 - s) * x } else { 0.0 };
            let want_a = if x < 0.0 && alpha > 0.01 && alpha < 0.99 { x } else { 0.0 };
            assert!((grads.get(b).unwrap()[0] - want_b).abs() < 1e-15);
            assert_eq!(grads.get(a).unwrap()[0], want_a);
        }
    }
}

#[test]
fn rrelu_training_mean_slope() {
    let (l, u) = (0.125, 0.333);
    let spec = ActivationSpec::Rrelu { lower: l, upper: u };
    let n = 100_000;
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([n], &vec![-1.0; n]).unwrap());
    let mut rng = seed_rng(9);
    let y = spec.apply(&mut g, x, Mode::Train, Some(&mut rng)).unwrap();
    let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
    let want = -(l + u) / 2.0;
    assert!(((mean - want) / want).abs() < 0.01, "{mean} vs {want}");
    assert_eq!(eval(&spec, &[-1.0]), [want]);
}

proptest! {
    #[test]
    fn arelu_is_relu_plus_elsa(x in -1e3f64..1e3, alpha in -1.0f64..2.0, beta in -5.0f64..5.0) {
        let spec = ActivationSpec::Arelu { alpha, beta };
        let y = eval(&spec, &[x])[0];
        let decomposed = x.max(0.0) + elsa(x, alpha, beta);
        prop_assert!((y - decomposed).abs() <= 1e-12 * (1.0 + y.abs()));
    }

    #[test]
    fn initial_activations_are_nondecreasing(mut xs in prop::collection::vec(-10.0f64..10.0, 2..64)) {
        xs.sort_by(f64::total_cmp);
        let mut specs = single_kinds();
        specs.push(ActivationSpec::ensemble_of(&[ActivationKind::Relu, ActivationKind::Arelu, ActivationKind::Elu]).unwrap());
        for spec in specs {
            let ys = eval(&spec, &xs);
            prop_assert!(ys.windows(2).all(|w| w[0] <= w[1]), "{} not monotone", spec);
        }
    }
}
