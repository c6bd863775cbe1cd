//! Finite-difference checks for every tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Padding, Tensor, Var};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks d<r, f(inputs)>/d inputs against central differences.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor<f64>], r: Option<&[f64]>| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let vals = g.value(out).data().to_vec();
        let Some(r) = r else {
            return (0.0, vec![], vals);
        };
        let value: f64 = vals.iter().zip(r).map(|(a, b)| a * b).sum();
        let loss = g.attach_loss(out, value, r.to_vec());
        let grads = g.backward(&[loss]);
        let gs = vars.iter().map(|v| grads.get(*v).map(|s| s.to_vec()).unwrap_or_default()).collect();
        (value, gs, vals)
    };
    let (_, _, probe) = eval(&inputs, None);
    let r: Vec<f64> = (0..probe.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, analytic, _) = eval(&inputs, Some(&r));
    let h = 1e-6;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[ti].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[ti].data_mut()[j] -= h;
            let (fp, _, _) = eval(&plus, Some(&r));
            let (fm, _, _) = eval(&minus, Some(&r));
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[ti][j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "input {ti} elem {j}: fd {fd} vs analytic {an}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

#[test]
fn conv2d_gradients() {
    for padding in [Padding::Zero, Padding::Circular] {
        let mut r = rng();
        let x = rand_tensor(&[2, 2, 4, 5], &mut r);
        let w = rand_tensor(&[3, 2, 3, 3], &mut r);
        let b = rand_tensor(&[3], &mut r);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], padding));
    }
}

#[test]
fn pointwise_conv_gradients() {
    let mut r = rng();
    let x = rand_tensor(&[2, 3, 2, 2], &mut r);
    let w = rand_tensor(&[2, 3, 1, 1], &mut r);
    let b = rand_tensor(&[2], &mut r);
    check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], Padding::Zero));
}

#[test]
fn linear_softmax_gradients() {
    let mut r = rng();
    let x = rand_tensor(&[3, 4], &mut r);
    let w = rand_tensor(&[5, 4], &mut r);
    let b = rand_tensor(&[5], &mut r);
    check(vec![x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        g.softmax(y)
    });
}

#[test]
fn activation_gradients() {
    let mut r = rng();
    let x = rand_tensor(&[2, 1, 2, 3], &mut r);
    check(vec![x.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![x.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check(vec![x.clone()], |g, v| g.relu(v[0]));
    check(vec![x], |g, v| g.add_const(v[0], 1.0));
}

#[test]
fn pooling_and_resampling_gradients() {
    let mut r = rng();
    let x = rand_tensor(&[2, 2, 4, 4], &mut r);
    check(vec![x.clone()], |g, v| g.max_pool2(v[0]));
    check(vec![x.clone()], |g, v| g.avg_pool2(v[0]));
    check(vec![x.clone()], |g, v| g.upsample2(v[0]));
    check(vec![x.clone()], |g, v| g.global_avg_pool(v[0]));
    check(vec![x], |g, v| g.minibatch_stddev(v[0]));
}

#[test]
fn structural_gradients() {
    let mut r = rng();
    let a = rand_tensor(&[2, 2, 2, 3], &mut r);
    let b = rand_tensor(&[2, 1, 2, 3], &mut r);
    let s = rand_tensor(&[2, 2], &mut r);
    let c = rand_tensor(&[2, 2, 3], &mut r);
    check(vec![a.clone(), b], |g, v| g.concat(v[0], v[1]));
    check(vec![a.clone(), s], |g, v| g.modulate(v[0], v[1]));
    check(vec![c], |g, v| g.broadcast(v[0], 3));
    let index: Vec<usize> = (0..24).rev().collect();
    check(vec![a.clone()], move |g, v| g.gather(v[0], index.clone(), vec![2, 2, 2, 3]));
    check(vec![a], |g, v| g.reshape(v[0], vec![2, 12]));
}

#[test]
fn inputs_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
    let w = g.leaf(Tensor::new(vec![1, 2], vec![0.5, -0.5]));
    let b = g.leaf(Tensor::new(vec![1], vec![0.0]));
    let y = g.linear(x, w, b);
    let l = g.attach_loss(y, g.value(y).item(), vec![1.0]);
    let grads = g.backward(&[l]);
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
}
