//! Central-difference checks of every backward kernel, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Shape, Tensor, Var};

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data)
}

/// Builds `sum(r * f(inputs))` with fixed random `r`, then compares the
/// analytic gradient of every input against central differences.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |inputs: &[Tensor<f64>], want_grads: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let r = random(g.shape(out), &mut rng);
        let value: f64 = g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let loss = g.custom_scalar(out, value, r);
        let grads = want_grads.then(|| {
            let gr = g.backward(loss);
            vars.iter().map(|&v| gr.get(v).cloned()).collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, grads) = eval(&inputs, true);
    let grads = grads.unwrap();
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads[i].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let step = (n / 40).max(1);
        for j in (0..n).step_by(step) {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn dense_conv_three_by_three() {
    let mut r = rng();
    for (stride, k) in [(1, 3), (2, 3), (1, 1), (2, 1)] {
        let x = random(Shape::new(2, 3, 6, 6), &mut r);
        let w = random(Shape::new(4, 3, k, k), &mut r);
        let b = random(Shape::new(1, 4, 1, 1), &mut r);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2, false));
    }
}

#[test]
fn depthwise_conv() {
    let mut r = rng();
    for stride in [1, 2] {
        let x = random(Shape::new(2, 3, 6, 6), &mut r);
        let w = random(Shape::new(3, 1, 3, 3), &mut r);
        check(vec![x, w], |g, v| g.conv2d(v[0], v[1], None, stride, 1, true));
    }
}

#[test]
fn batch_norm_with_batch_statistics() {
    let mut r = rng();
    let x = random(Shape::new(3, 2, 3, 3), &mut r);
    let gamma = random(Shape::new(1, 2, 1, 1), &mut r);
    let beta = random(Shape::new(1, 2, 1, 1), &mut r);
    check(vec![x, gamma, beta], |g, v| g.batch_norm(v[0], v[1], v[2], 1e-5, None).0);
}

#[test]
fn batch_norm_with_running_statistics() {
    let mut r = rng();
    let x = random(Shape::new(2, 2, 3, 3), &mut r);
    let gamma = random(Shape::new(1, 2, 1, 1), &mut r);
    let beta = random(Shape::new(1, 2, 1, 1), &mut r);
    check(vec![x, gamma, beta], |g, v| g.batch_norm(v[0], v[1], v[2], 1e-5, Some((&[0.1, -0.2], &[0.5, 2.0]))).0);
}

#[test]
fn channel_norm_matches() {
    let mut r = rng();
    let x = random(Shape::new(2, 4, 2, 3), &mut r);
    let gamma = random(Shape::new(1, 4, 1, 1), &mut r);
    let beta = random(Shape::new(1, 4, 1, 1), &mut r);
    check(vec![x, gamma, beta], |g, v| g.channel_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn activations() {
    let mut r = rng();
    let mut x = random(Shape::new(1, 2, 4, 4), &mut r);
    // keep clear of the kinks at 0 and 6
    x.data_mut().iter_mut().for_each(|v| *v = if v.abs() < 0.05 { 0.3 } else { *v * 4.0 });
    x.data_mut()[3] = 6.5;
    check(vec![x.clone()], |g, v| g.relu(v[0]));
    check(vec![x.clone()], |g, v| g.relu6(v[0]));
    check(vec![x.clone()], |g, v| g.silu(v[0]));
    check(vec![x], |g, v| g.sigmoid(v[0]));
}

#[test]
fn broadcast_add_and_mul() {
    let mut r = rng();
    let a = random(Shape::new(2, 3, 2, 2), &mut r);
    for bs in [Shape::new(2, 3, 2, 2), Shape::new(2, 3, 1, 1), Shape::new(2, 1, 2, 2), Shape::new(1, 3, 1, 1)] {
        let b = random(bs, &mut r);
        check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check(vec![a.clone(), b], |g, v| g.mul(v[0], v[1]));
    }
}

#[test]
fn structural_ops() {
    let mut r = rng();
    let a = random(Shape::new(2, 2, 4, 4), &mut r);
    let b = random(Shape::new(2, 3, 4, 4), &mut r);
    check(vec![a.clone(), b], |g, v| g.concat_channels(&[v[0], v[1]]));
    check(vec![a.clone()], |g, v| g.global_avg_pool(v[0]));
    check(vec![a.clone()], |g, v| g.max_pool2(v[0]));
    check(vec![a.clone()], |g, v| g.upsample2(v[0]));
    check(vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    check(vec![a], |g, v| g.rms_normalize(v[0], 1e-8));
}

#[test]
fn attention_over_tokens() {
    let mut r = rng();
    let q = random(Shape::new(2, 3, 2, 3), &mut r);
    let k = random(Shape::new(2, 3, 2, 3), &mut r);
    let v = random(Shape::new(2, 3, 2, 3), &mut r);
    check(vec![q, k, v], |g, x| g.attention(x[0], x[1], x[2]));
}

#[test]
fn scalar_reductions() {
    let mut r = rng();
    let a = random(Shape::new(2, 2, 3, 3), &mut r);
    let b = random(Shape::new(2, 2, 3, 3), &mut r);
    check(vec![a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]));
    check(vec![a, b], |g, v| {
        let m1 = g.mse(v[0], v[1]);
        let m2 = g.mse(v[1], v[0]);
        g.lincomb(&[(m1, 0.3), (m2, -1.2)])
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
    let d = g.detach(x);
    let y = g.mul(x, d);
    let r = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
    let v: f64 = g.value(y).data().iter().sum();
    let loss = g.custom_scalar(y, v, r);
    let grads = g.backward(loss);
    // d(x * const)/dx = const = 2
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}
