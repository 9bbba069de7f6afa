//! Central-difference checks for every differentiable op on the tape.

use mixtts_tensor::{ConvSpec, Graph, Matrix, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type M = Matrix<f64>;

/// Builds `loss = Σ r ⊙ f(x)` for a fixed random `r`, so that every output
/// entry contributes a distinct weight to the gradient.
fn check(name: &str, inputs: Vec<M>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let weights = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&mut g, &vars);
        let (r, c) = g.shape(out);
        M::randn(r, c, 1.0, &mut rng)
    };
    let eval = |xs: &[M]| -> f64 {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = xs.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).zip_map(&weights, |a, b| a * b).sum()
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward_with(out, weights.clone());
    let eps = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.input(*v).cloned().unwrap_or_else(|| M::zeros(inputs[k].rows(), inputs[k].cols()));
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].as_mut_slice()[idx] += eps;
            let mut minus = inputs.clone();
            minus[k].as_mut_slice()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "{name}: input {k} entry {idx}: analytic {a} vs numeric {numeric}");
        }
    }
}

fn rnd(r: usize, c: usize, seed: u64) -> M {
    M::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_ops() {
    check("add", vec![rnd(3, 4, 1), rnd(3, 4, 2)], |g, v| g.add(v[0], v[1]));
    check("sub", vec![rnd(3, 4, 1), rnd(3, 4, 2)], |g, v| g.sub(v[0], v[1]));
    check("mul", vec![rnd(3, 4, 1), rnd(3, 4, 2)], |g, v| g.mul(v[0], v[1]));
    check("add_row", vec![rnd(3, 4, 1), rnd(1, 4, 2)], |g, v| g.add_row(v[0], v[1]));
    check("mul_row", vec![rnd(3, 4, 1), rnd(1, 4, 2)], |g, v| g.mul_row(v[0], v[1]));
    check("mul_col", vec![rnd(3, 4, 1), rnd(3, 1, 2)], |g, v| g.mul_col(v[0], v[1]));
    check("scale", vec![rnd(2, 3, 1)], |g, v| g.scale(v[0], -1.7));
    check("add_scalar", vec![rnd(2, 3, 1)], |g, v| g.add_scalar(v[0], 0.3));
    check("tanh", vec![rnd(2, 3, 1)], |g, v| g.tanh(v[0]));
    check("sigmoid", vec![rnd(2, 3, 1)], |g, v| g.sigmoid(v[0]));
    check("exp", vec![rnd(2, 3, 1)], |g, v| g.exp(v[0]));
    check("log", vec![rnd(2, 3, 1).map(|x| x.abs() + 0.5)], |g, v| g.log(v[0]));
    check("log_sigmoid", vec![rnd(2, 3, 1).map(|x| 4.0 * x)], |g, v| g.log_sigmoid(v[0]));
    check("square", vec![rnd(2, 3, 1)], |g, v| g.square(v[0]));
    // keep away from the kinks
    check("relu", vec![rnd(2, 3, 1).map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |g, v| g.relu(v[0]));
    check("abs", vec![rnd(2, 3, 1).map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |g, v| g.abs(v[0]));
    check("clamp", vec![M::from_vec(1, 4, vec![-2.0, -0.5, 0.5, 2.0])], |g, v| g.clamp(v[0], -1.0, 1.0));
}

#[test]
fn linear_algebra_ops() {
    check("matmul", vec![rnd(3, 4, 1), rnd(4, 2, 2)], |g, v| g.matmul(v[0], v[1]));
    check("transpose", vec![rnd(3, 4, 1)], |g, v| g.transpose(v[0]));
    check("reshape", vec![rnd(4, 3, 1)], |g, v| g.reshape(v[0], 2, 6));
    check("log_abs_det", vec![rnd(4, 4, 7)], |g, v| g.log_abs_det(v[0]).unwrap());
}

#[test]
fn convolutions() {
    for (k, d, s, p) in [(3, 1, 1, 1), (5, 2, 1, 4), (8, 1, 4, 2), (1, 1, 1, 0), (3, 1, 2, 0)] {
        let spec = ConvSpec { kernel: k, dilation: d, stride: s, padding: p };
        check(&format!("conv{k}{d}{s}{p}"), vec![rnd(12, 3, 1), rnd(k * 3, 2, 2)], move |g, v| {
            g.conv1d(v[0], v[1], spec)
        });
    }
}

#[test]
fn normalization_and_softmax() {
    check("layer_norm", vec![rnd(3, 5, 1), rnd(1, 5, 2), rnd(1, 5, 3)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    check("softmax", vec![rnd(3, 4, 1)], |g, v| g.softmax_rows(v[0], None));
    let mask = vec![true, false, true, true, false, true, false, false, true, true, true, true];
    check("masked_softmax", vec![rnd(3, 4, 1)], move |g, v| g.softmax_rows(v[0], Some(&mask)));
}

#[test]
fn structural_ops() {
    check("slice_cols", vec![rnd(3, 5, 1)], |g, v| g.slice_cols(v[0], 1, 3));
    check("concat_cols", vec![rnd(3, 2, 1), rnd(3, 3, 2)], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    check("slice_rows", vec![rnd(5, 2, 1)], |g, v| g.slice_rows(v[0], 2, 2));
    check("concat_rows", vec![rnd(2, 3, 1), rnd(1, 3, 2)], |g, v| g.concat_rows(&[v[0], v[1]]));
    check("gather_rows", vec![rnd(3, 2, 1)], |g, v| g.gather_rows(v[0], vec![0, 0, 2, 1, 2, 2]));
    check("segment_sum", vec![rnd(5, 2, 1)], |g, v| g.segment_sum(v[0], vec![0, 0, 1, 2, 2], 3));
    check("segment_mean", vec![rnd(5, 2, 1)], |g, v| g.segment_mean(v[0], vec![0, 0, 1, 2, 2], 3));
    check("pool_rows", vec![rnd(8, 2, 1)], |g, v| g.pool_rows(v[0], 4));
    check("permute_cols", vec![rnd(3, 4, 1)], |g, v| g.permute_cols(v[0], vec![3, 2, 1, 0]));
    check("rel_to_abs", vec![rnd(6, 5, 1)], |g, v| g.rel_to_abs(v[0], 2));
    check("abs_to_rel", vec![rnd(6, 6, 1)], |g, v| g.abs_to_rel(v[0], 2));
    check("sum", vec![rnd(3, 4, 1)], |g, v| g.sum(v[0]));
    check("mean", vec![rnd(3, 4, 1)], |g, v| g.mean(v[0]));
}

#[test]
fn parameters_accumulate_across_uses() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", M::from_vec(1, 2, vec![2.0, 3.0]));
    let mut g = Graph::new(&store);
    let a = g.param(w);
    let b = g.param(w);
    let p = g.mul(a, b);
    let s = g.sum(p);
    let grads = g.backward(s);
    // d/dw Σ w² = 2w, split across the two uses
    assert_eq!(grads.param(w).unwrap().as_slice(), &[4.0, 6.0]);
}

#[test]
fn detach_and_inference_block_gradients() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", M::from_vec(1, 1, vec![2.0]));
    let mut g = Graph::new(&store);
    let a = g.param(w);
    let d = g.detach(a);
    let s = g.mul(a, d);
    let grads = g.backward(s);
    assert_eq!(grads.param(w).unwrap().item(), 2.0);

    let mut g = Graph::inference(&store);
    let a = g.param(w);
    let s = g.square(a);
    assert!(g.backward(s).param(w).is_none());
}
