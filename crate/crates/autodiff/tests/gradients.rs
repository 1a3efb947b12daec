use proptest::prelude::*;
use radfield_autodiff::{gradcheck, Graph, ParamSet, Real, Tensor};

#[cfg(not(feature = "f64"))]
const TOL: f64 = 1e-4;
#[cfg(feature = "f64")]
const TOL: f64 = 1e-7;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in [1u64, 2, 3] {
        for r in gradcheck::check_primitives(seed).unwrap() {
            assert!(r.rel_err <= TOL, "{} (seed {seed}): rel err {:.3e}", r.name, r.rel_err);
        }
    }
}

#[test]
fn required_primitives_are_covered() {
    let names = gradcheck::primitive_names();
    for need in [
        "add", "subtract", "multiply", "divide", "matmul", "conv2d", "upsample+conv2d",
        "leaky_relu", "relu", "sigmoid", "tanh", "exp", "log", "square", "reduce_sum",
        "reduce_mean", "broadcast", "reshape", "concatenate", "slice",
    ] {
        assert!(names.contains(&need), "missing {need}");
    }
}

fn quadratic_params() -> ParamSet {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::param(vec![3, 2], vec![0.5, -1.0, 0.25, 2.0, -0.75, 1.5]).unwrap());
    ps.insert("b", Tensor::param(vec![2], vec![0.1, -0.2]).unwrap());
    ps
}

fn loss_terms(g: &mut Graph, ps: &ParamSet) -> (radfield_autodiff::Bound, Vec<radfield_autodiff::Var>) {
    let bound = ps.bind(g);
    let x = g.constant(&[4, 3], (0..12).map(|v| (v as Real * 0.3).cos()).collect()).unwrap();
    let y = g.linear(x, bound.var(0), bound.var(1)).unwrap();
    let t = g.tanh(y).unwrap();
    let l1 = g.mean(t).unwrap();
    let sq = g.square(y).unwrap();
    let l2 = g.sum(sq).unwrap();
    (bound, vec![l1, l2])
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut joint = quadratic_params();
    let mut g = Graph::new();
    let (bound, l) = loss_terms(&mut g, &joint);
    let total = g.add(l[0], l[1]).unwrap();
    let grads = g.backward(total).unwrap();
    joint.accumulate(&bound, &grads).unwrap();

    let mut split = quadratic_params();
    for k in 0..2 {
        let mut g = Graph::new();
        let (bound, l) = loss_terms(&mut g, &split);
        let grads = g.backward(l[k]).unwrap();
        split.accumulate(&bound, &grads).unwrap();
    }
    for i in 0..2 {
        let (a, b) = (joint.at(i).grad().unwrap(), split.at(i).grad().unwrap());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn repeated_backward_after_zero_grads_is_identical() {
    let mut ps = quadratic_params();
    let run = |ps: &mut ParamSet| {
        ps.zero_grads();
        let mut g = Graph::new();
        let (bound, l) = loss_terms(&mut g, ps);
        let total = g.add(l[0], l[1]).unwrap();
        let grads = g.backward(total).unwrap();
        ps.accumulate(&bound, &grads).unwrap();
        (0..ps.len()).map(|i| ps.at(i).grad().unwrap().to_vec()).collect::<Vec<_>>()
    };
    let first = run(&mut ps);
    let second = run(&mut ps);
    assert_eq!(first, second);
}

#[test]
fn grads_accumulate_until_zeroed() {
    let mut ps = quadratic_params();
    let mut once = None;
    for _ in 0..2 {
        let mut g = Graph::new();
        let (bound, l) = loss_terms(&mut g, &ps);
        let grads = g.backward(l[1]).unwrap();
        ps.accumulate(&bound, &grads).unwrap();
        once.get_or_insert_with(|| ps.at(0).grad().unwrap().to_vec());
    }
    let once = once.unwrap();
    for (a, b) in ps.at(0).grad().unwrap().iter().zip(&once) {
        assert!((a - 2.0 * b).abs() <= 1e-5 * (1.0 + b.abs()));
    }
}

proptest! {
    #[test]
    fn grads_are_finite_for_bounded_inputs(xs in proptest::collection::vec(-2.0f32..2.0, 6)) {
        let mut g = Graph::new();
        let x = g.variable(&[2, 3], xs.iter().map(|v| *v as Real).collect()).unwrap();
        let s = g.sigmoid(x).unwrap();
        let sp = g.softplus(x).unwrap();
        let p = g.mul(s, sp).unwrap();
        let l = g.mean(p).unwrap();
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cumsum_exclusive_last_equals_sum_minus_last(xs in proptest::collection::vec(-2.0f32..2.0, 1..12)) {
        let mut g = Graph::new();
        let n = xs.len();
        let x = g.constant(&[n], xs.iter().map(|v| *v as Real).collect()).unwrap();
        let c = g.cumsum(x, true).unwrap();
        let total: Real = xs[..n - 1].iter().map(|v| *v as Real).sum();
        prop_assert!((g.value(c)[n - 1] - total).abs() < 1e-4);
        prop_assert_eq!(g.value(c)[0], 0.0);
    }
}
