use super::*;
use crate::error::Error;
use crate::rng::RngState;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random_tensor(rng: &mut RngState, shape: &[usize], requires_grad: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Tensor::new(shape.to_vec(), data).unwrap();
    out.set_requires_grad(requires_grad);
    out
}

/// softmax first, then log; no max-subtraction.
fn naive_nll(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let z: f64 = row.iter().map(|l| l.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

#[test]
fn matmul_example() {
    let mut g = Graph::new();
    let a = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(&t(&[2, 1], &[1.0, 1.0]));
    let c = g.apply(BasicOp::MatMul, &[a, b]).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[3.0, 7.0]);
}

#[test]
fn relu_and_mean_square_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);

    let y = g.constant(&t(&[2], &[1.0, 2.0]));
    let sq = g.square(y).unwrap();
    let m = g.mean(sq).unwrap();
    assert_eq!(g.scalar(m), 2.5);
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = g.constant(&t(&[2, 3], &[0.0; 6]));
    let b = g.constant(&t(&[2, 3], &[0.0; 6]));
    assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    let c = g.constant(&t(&[2], &[0.0; 2]));
    assert!(g.add(a, c).is_err());
    // a row broadcasts over the leading batch dimension
    let row = g.constant(&t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.add(a, row).unwrap();
    assert_eq!(g.value(s), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let row1 = g.constant(&t(&[1, 3], &[1.0, 2.0, 3.0]));
    let d = g.sub(row1, a).unwrap();
    assert_eq!(g.shape(d), &[2, 3]);
    assert!(g.apply(BasicOp::Add, &[a]).is_err());
}

#[test]
fn non_finite_is_an_error() {
    let mut g = Graph::new();
    let big = g.constant(&t(&[1], &[1e200]));
    assert!(matches!(g.mul(big, big), Err(Error::NonFinite { op: "mul" })));
    assert!(g.constant_from(vec![1], vec![f64::NAN]).is_err());
}

#[test]
fn nll_uniform_is_ln2() {
    let mut g = Graph::new();
    let l = g.constant(&t(&[3, 2], &[0.7; 6]));
    let loss = g.nll_loss(l, &[0, 1, 1]).unwrap();
    assert!((g.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn nll_vanishes_with_growing_margin() {
    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 100.0, 800.0] {
        let mut g = Graph::new();
        let l = g.constant(&t(&[1, 3], &[margin, 0.0, 0.0]));
        let loss = g_nll(&mut g, l, &[0]);
        let v = g.scalar(loss);
        assert!(v <= prev);
        prev = v;
    }
    assert!(prev < 1e-15);
}

fn g_nll(g: &mut Graph, l: Var, labels: &[usize]) -> Var {
    g.nll_loss(l, labels).unwrap()
}

#[test]
fn nll_matches_naive_oracle() {
    let mut rng = RngState::new(11);
    let logits = random_tensor(&mut rng, &[3, 4], false);
    let labels = [2, 0, 3];
    let mut g = Graph::new();
    let l = g.constant(&logits);
    let loss = g.nll_loss(l, &labels).unwrap();
    let oracle = naive_nll(logits.data(), 4, &labels);
    assert!((g.scalar(loss) - oracle).abs() < 1e-12);
}

#[test]
fn nll_errors() {
    let mut g = Graph::new();
    let l = g.constant(&t(&[2, 2], &[0.0; 4]));
    assert!(matches!(
        g.nll_loss(l, &[0, 2]),
        Err(Error::LabelOutOfRange { label: 2, classes: 2 })
    ));
    let empty = g.constant(&t(&[0, 2], &[]));
    assert!(matches!(g.nll_loss(empty, &[]), Err(Error::EmptyBatch(_))));
    let one = g.constant(&t(&[2, 1], &[0.0; 2]));
    assert!(g.nll_loss(one, &[0, 0]).is_err());
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[2], &[1.0, 2.0]));
    let xx = g.mul(x, x).unwrap();
    let s = g.sum(xx).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    assert_eq!(g.grad(s).unwrap(), &[1.0]);
}

#[test]
fn backward_through_clamped_relu() {
    let mut g = Graph::new();
    let a = g.constant(&t(&[1], &[-5.0]));
    let w = g.variable(&t(&[1], &[3.0]));
    let r = g.relu(a).unwrap();
    let y = g.mul(r, w).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[0.0]);
}

#[test]
fn relu_subgradient_convention() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[3], &[-2.0, 0.0, 3.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
}

#[test]
fn fan_out_accumulates() {
    // y = x*3 + x*x  ->  dy/dx = 3 + 2x
    let mut g = Graph::new();
    let x = g.variable(&t(&[1], &[2.0]));
    let a = g.scale(x, 3.0).unwrap();
    let b = g.square(x).unwrap();
    let y = g.add(a, b).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[7.0]);
}

#[test]
fn constants_receive_no_grad() {
    let mut g = Graph::new();
    let c = g.constant(&t(&[2], &[1.0, 2.0]));
    let x = g.variable(&t(&[2], &[3.0, 4.0]));
    let y = g.mul(c, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn reverse_grad_flips_and_scales() {
    let mut g = Graph::new();
    let x = g.variable(&t(&[2], &[1.0, -1.0]));
    let r = g.reverse_grad(x, 0.5).unwrap();
    assert_eq!(g.value(r), g.value(x));
    let sq = g.square(r).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-1.0, 1.0]);
}

#[test]
fn scalar_square_finite_difference() {
    let mut params = vec![t(&[1], &[3.0])];
    let report = finite_diff_check(&mut params, 1e-5, 1e-4, |g, v| {
        let sq = g.square(v[0])?;
        g.sum(sq)
    })
    .unwrap();
    let e = &report.entries[0];
    assert_eq!(e.analytic, 6.0);
    assert!((e.numeric - 6.0).abs() < 1e-8);
    assert!(report.passed());
    assert_eq!(params[0].data(), &[3.0]);
}

#[test]
fn hinge_kink_is_non_comparable() {
    // [m - v]^+ at v == m
    let m = 5.0;
    let mut params = vec![t(&[1], &[m])];
    let report = finite_diff_check(&mut params, 1e-5, 1e-4, |g, v| {
        let d = g.affine(v[0], -1.0, m)?;
        let h = g.relu(d)?;
        g.sum(h)
    })
    .unwrap();
    assert!(!report.entries[0].comparable);
    assert_eq!(report.excluded, 1);
    assert_eq!(report.compared, 0);
}

/// Two-layer relu network with a softmax head; every op that the models use.
fn two_layer_loss(g: &mut Graph, v: &[Var], x: &Tensor, labels: &[usize]) -> crate::Result<Var> {
    let x = g.constant(x);
    let h = g.matmul(x, v[0])?;
    let h = g.add(h, v[1])?;
    let h = g.relu(h)?;
    let o = g.matmul(h, v[2])?;
    let o = g.add(o, v[3])?;
    let s = g.sigmoid(o)?;
    let nll = g.nll_loss(o, labels)?;
    let sq = g.square(s)?;
    let rows = g.mean_rows(sq)?;
    let reg = g.mean(rows)?;
    let reg = g.scale(reg, 0.3)?;
    g.add(nll, reg)
}

#[test]
fn two_layer_network_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = RngState::new(100 + seed);
        let x = random_tensor(&mut rng, &[5, 3], false);
        let mut params = vec![
            random_tensor(&mut rng, &[3, 6], true),
            random_tensor(&mut rng, &[6], true),
            random_tensor(&mut rng, &[6, 3], true),
            random_tensor(&mut rng, &[3], true),
        ];
        let labels = [0, 2, 1, 1, 0];
        let report = finite_diff_check(&mut params, 1e-5, 1e-4, |g, v| two_layer_loss(g, v, &x, &labels)).unwrap();
        assert!(report.passed(), "seed {seed}: max rel err {}", report.max_rel_error);
        assert!(report.compared > report.entries.len() / 2);
    }
}

#[test]
fn bce_matches_direct_formula_and_gradient() {
    let logits = t(&[3, 1], &[0.3, -2.0, 4.0]);
    let targets = [1.0, 0.0, 1.0];
    let mut g = Graph::new();
    let l = g.constant(&logits);
    let loss = g.bce_with_logits(l, &targets).unwrap();
    let direct: f64 = logits
        .data()
        .iter()
        .zip(&targets)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 3.0;
    assert!((g.scalar(loss) - direct).abs() < 1e-12);

    let mut params = vec![logits];
    let report = finite_diff_check(&mut params, 1e-5, 1e-4, |g, v| g.bce_with_logits(v[0], &targets)).unwrap();
    assert!(report.passed());
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = RngState::new(5);
        let x = random_tensor(&mut rng, &[4, 3], false);
        let params: Vec<Tensor> = vec![
            random_tensor(&mut rng, &[3, 6], true),
            random_tensor(&mut rng, &[6], true),
            random_tensor(&mut rng, &[6, 3], true),
            random_tensor(&mut rng, &[3], true),
        ];
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
        let root = two_layer_loss(&mut g, &vars, &x, &[0, 1, 2, 0]).unwrap();
        g.scalar(root).to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn nll_shift_invariant(
        logits in prop::collection::vec(-20.0f64..20.0, 8),
        shift in -50.0f64..50.0,
        label in 0usize..4,
    ) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let labels = [label, (label + 1) % 4];
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 4], &logits));
        let b = g.constant(&t(&[2, 4], &shifted));
        let la = g.nll_loss(a, &labels).unwrap();
        let lb = g.nll_loss(b, &labels).unwrap();
        prop_assert!((g.scalar(la) - g.scalar(lb)).abs() <= 1e-10);
    }

    #[test]
    fn elementwise_primitives_match_finite_differences(
        data in prop::collection::vec(0.05f64..2.0, 6),
        signs in prop::collection::vec(any::<bool>(), 6),
        other in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        // bounded away from the relu kink at zero
        let x: Vec<f64> = data.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
        let mut params = vec![t(&[2, 3], &x), t(&[3], &other)];
        let report = finite_diff_check(&mut params, 1e-5, 1e-4, |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let r = g.relu(v[0])?;
            let s = g.sigmoid(c)?;
            let q = g.square(r)?;
            let u = g.add(s, q)?;
            let w = g.mean_rows(u)?;
            let m = g.mean(w)?;
            let tot = g.sum(c)?;
            g.add(m, tot)
        }).unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }
}
