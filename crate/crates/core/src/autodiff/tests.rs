use proptest::prelude::*;

use super::*;

fn vec_t(v: &[f64]) -> Tensor<f64> {
    Tensor::vector(v.to_vec())
}

fn mat(r: usize, c: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::matrix(r, c, v.to_vec()).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(vec_t(&[0.0, 0.0]));
    let y = g.row_softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn distance_to_self_is_zero() {
    let mut g = Graph::new();
    let v = g.constant(vec_t(&[0.3, -1.2, 4.0]));
    let d = g.distance(v, v).unwrap();
    assert_eq!(g.value(d).item(), 0.0);
}

#[test]
fn squared_hinge_at_zero_distance() {
    let mut g = Graph::new();
    let d = g.scalar(0.0);
    let neg = g.scale(d, -1.0);
    let h = g.add_scalar(neg, 1.0);
    let r = g.relu(h);
    let s = g.square(r);
    assert_eq!(g.value(s).item(), 1.0);
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(vec_t(&[1.0, 2.0]));
    let b = g.constant(vec_t(&[1.0, 2.0, 3.0]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    let m = g.constant(mat(2, 2, &[1.0; 4]));
    let n = g.constant(mat(3, 1, &[1.0; 3]));
    assert!(g.matmul(m, n).unwrap_err().to_string().contains("matmul"));
}

#[test]
fn dot_self_gradient_is_twice_input() {
    let mut g = Graph::new();
    let p = g.param("p", vec_t(&[1.0, 2.0]));
    let l = g.dot(p, p).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut g = Graph::new();
    let _p = g.param("p", vec_t(&[1.0, 2.0]));
    let c = g.scalar(3.5);
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn uniform_cross_entropy_is_log_n() {
    let mut g = Graph::new();
    let logits = g.constant(mat(1, 4, &[0.7; 4]));
    let l = g.cross_entropy(logits, &[2]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 1.3863).abs() < 1e-4);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let p = g.param("p", vec_t(&[1.0, 2.0]));
    assert!(matches!(g.backward(p), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn gradients_accumulate_over_paths() {
    // l = sum(p) + sum(p * p) => dl/dp = 1 + 2p
    let mut g = Graph::new();
    let p = g.param("p", vec_t(&[0.5, -1.0]));
    let s1 = g.sum(p);
    let sq = g.mul(p, p).unwrap();
    let s2 = g.sum(sq);
    let l = g.add(s1, s2).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[2.0, -1.0]);
}

#[test]
fn distance_subgradient_is_zero_when_coincident() {
    let mut g = Graph::new();
    let a = g.param("a", vec_t(&[1.0, 1.0]));
    let b = g.param("b", vec_t(&[1.0, 1.0]));
    let d = g.distance(a, b).unwrap();
    let grads = g.backward(d).unwrap();
    assert_eq!(grads.get("a").unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.get("b").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn gradcheck_sum_of_squares() {
    let mut params = ParamMap::new();
    params.insert("p".to_string(), vec_t(&[0.3, -0.7]));
    let report = grad_check(
        |g, ps| {
            let p = g.param("p", ps["p"].clone());
            let s = g.square(p);
            Ok(g.sum(s))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-7, "{report:?}");
    assert_eq!(report.coordinates, 2);
}

#[test]
fn gradcheck_constant_loss_is_exact() {
    let mut params = ParamMap::new();
    params.insert("p".to_string(), vec_t(&[0.3, -0.7]));
    let report = grad_check(|g, _| Ok(g.scalar(2.0)), &params, 1e-4).unwrap();
    assert_eq!(report.max_relative_error, 0.0);
}

#[test]
fn gradcheck_rejects_non_finite_probe() {
    let mut params = ParamMap::new();
    params.insert("p".to_string(), vec_t(&[1.0]));
    let out = grad_check(|g, _| Ok(g.scalar(f64::NAN)), &params, 1e-4);
    assert!(matches!(out, Err(crate::Error::NonFinite(_))));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = |g: &mut Graph<f64>| {
        let w = g.param("w", mat(2, 3, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let x = g.constant(mat(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.25, -3.0]));
        let m = g.matmul(w, x).unwrap();
        let t = g.tanh(m);
        g.cross_entropy(t, &[1, 0]).unwrap()
    };
    let mut g1 = Graph::new();
    let l1 = build(&mut g1);
    let mut g2 = Graph::new();
    let l2 = build(&mut g2);
    assert_eq!(g1.backward(l1).unwrap(), g2.backward(l2).unwrap());
}

#[test]
fn works_in_single_precision() {
    let mut g: Graph<f32> = Graph::new();
    let p = g.param("p", Tensor::vector(vec![1.0f32, 2.0]));
    let l = g.dot(p, p).unwrap();
    assert_eq!(
        g.backward(l).unwrap().get("p").unwrap().data(),
        &[2.0f32, 4.0]
    );
}

/// Applies a unary op and projects onto fixed weights so the check covers
/// the full Jacobian rather than its column sums.
fn project(g: &mut Graph<f64>, y: NodeId) -> NodeId {
    let n = g.value(y).len();
    let shape = g.value(y).shape().to_vec();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.3 + 0.17 * i as f64 - 0.05 * (i * i % 7) as f64)
        .collect();
    let wc = g.constant(Tensor::new(shape, w).unwrap());
    let prod = g.mul(y, wc).unwrap();
    g.sum(prod)
}

fn jitter(xs: Vec<f64>) -> Vec<f64> {
    xs.into_iter()
        .map(|x| if x.abs() < 1e-3 { 2e-3 } else { x })
        .collect()
}

fn check(params: ParamMap<f64>, f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
    let report = grad_check(
        |g, ps| {
            let ids: Vec<NodeId> = ps.iter().map(|(k, t)| g.param(k, t.clone())).collect();
            let y = f(g, &ids);
            Ok(project(g, y))
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

fn one(name: &str, t: Tensor<f64>) -> ParamMap<f64> {
    let mut m = ParamMap::new();
    m.insert(name.to_string(), t);
    m
}

fn two(a: Tensor<f64>, b: Tensor<f64>) -> ParamMap<f64> {
    let mut m = ParamMap::new();
    m.insert("a".to_string(), a);
    m.insert("b".to_string(), b);
    m
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(x in values(12)) {
        let mut g = Graph::new();
        let a = g.constant(mat(3, 4, &x));
        let y = g.row_softmax(a).unwrap();
        let v = g.value(y);
        for r in 0..3 {
            let s: f64 = v.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(v.row(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn binary_ops_match_finite_differences(x in values(6), y in values(6)) {
        let (a, b) = (mat(2, 3, &x), mat(2, 3, &y));
        check(two(a.clone(), b.clone()), |g, ids| g.add(ids[0], ids[1]).unwrap());
        check(two(a.clone(), b.clone()), |g, ids| g.sub(ids[0], ids[1]).unwrap());
        check(two(a.clone(), b.clone()), |g, ids| g.mul(ids[0], ids[1]).unwrap());
        check(two(a.clone(), b.transpose()), |g, ids| g.matmul(ids[0], ids[1]).unwrap());
        check(two(vec_t(&x), vec_t(&y)), |g, ids| g.dot(ids[0], ids[1]).unwrap());
    }

    #[test]
    fn unary_ops_match_finite_differences(x in values(6)) {
        let a = mat(2, 3, &x);
        check(one("a", a.clone()), |g, ids| g.scale(ids[0], -1.7));
        check(one("a", a.clone()), |g, ids| g.add_scalar(ids[0], 0.4));
        check(one("a", a.clone()), |g, ids| g.tanh(ids[0]));
        check(one("a", a.clone()), |g, ids| g.square(ids[0]));
        check(one("a", a.clone()), |g, ids| g.row_softmax(ids[0]).unwrap());
        check(one("a", a.clone()), |g, ids| g.mean_rows(ids[0]).unwrap());
        check(one("a", a.clone()), |g, ids| g.sum_rows(ids[0]).unwrap());
        check(one("a", a.clone()), |g, ids| g.sum(ids[0]));
        check(one("a", a.clone()), |g, ids| g.transpose(ids[0]).unwrap());
        check(one("a", a.clone()), |g, ids| g.reshape(ids[0], &[3, 2]).unwrap());
        check(one("a", a.clone()), |g, ids| g.gather_rows(ids[0], &[1, 0, 1]).unwrap());
        check(one("a", a.clone()), |g, ids| g.concat_rows(&[ids[0], ids[0]]).unwrap());
        check(one("a", a.clone()), |g, ids| g.cross_entropy(ids[0], &[2, 0]).unwrap());
        check(one("a", mat(2, 3, &jitter(x.clone()))), |g, ids| g.relu(ids[0]));
    }

    #[test]
    fn distance_matches_finite_differences(x in values(6), y in values(6)) {
        // keep rows at least 1e-3 apart
        let y: Vec<f64> = y.iter().zip(&x).map(|(&b, &a)| if (a - b).abs() < 1e-3 { a + 0.5 } else { b }).collect();
        check(two(mat(2, 3, &x), mat(2, 3, &y)), |g, ids| g.distance(ids[0], ids[1]).unwrap());
        check(two(vec_t(&x), vec_t(&y)), |g, ids| g.distance(ids[0], ids[1]).unwrap());
    }
}
