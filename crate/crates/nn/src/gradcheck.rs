//! Central finite-difference gradient checking in double precision.
//!
//! The checker builds the scalar `sum(f(inputs) ⊙ R)` with a fixed random
//! weighting `R`, differentiates it with [`Graph::backward`], and compares
//! every input coordinate against `(L(x+ε) − L(x−ε)) / 2ε`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

pub const DEFAULT_EPS: f64 = 1e-3;
/// Denominator floor that keeps near-zero gradients from dominating.
pub const REL_FLOOR: f64 = 1e-2;

fn weighted_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let r = g.constant(r);
    let p = g.mul(out, r);
    g.sum(p)
}

/// Compares analytic and numeric gradients of `f` with respect to `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], seed: u64, eps: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars);
        let l = weighted_loss(&mut g, out, seed);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars);
    let l = weighted_loss(&mut g, out, seed);
    let grads = g.backward(l).expect("scalar loss");

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut xs = inputs.to_vec();
    for (vi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[vi].shape()));
        for j in 0..inputs[vi].len() {
            let orig = xs[vi].data()[j];
            xs[vi].data_mut()[j] = orig + eps;
            let up = eval(&xs);
            xs[vi].data_mut()[j] = orig - eps;
            let down = eval(&xs);
            xs[vi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            coordinates += 1;
        }
    }
    GradCheckReport { max_rel_error: worst, coordinates }
}

/// Random tensor with entries in `±[min_abs, 1]`, away from ReLU kinks.
pub fn random_tensor(shape: &[usize], min_abs: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(min_abs..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Like [`check_gradients`], but differentiates with respect to every value
/// of the parameter set selected by `params` inside `model`.
pub fn check_param_gradients<M, P, F>(model: &mut M, params: P, seed: u64, eps: f64, f: F) -> GradCheckReport
where
    P: Fn(&mut M) -> &mut ParamSet<f64>,
    F: Fn(&mut Graph<f64>, &M) -> Var,
{
    let eval = |m: &M| -> f64 {
        let mut g = Graph::new();
        let out = f(&mut g, m);
        let l = weighted_loss(&mut g, out, seed);
        g.value(l).item()
    };
    params(model).zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, model);
    let l = weighted_loss(&mut g, out, seed);
    let grads = g.backward(l).expect("scalar loss");
    params(model).accumulate(&g, &grads);
    let analytic: Vec<Tensor<f64>> = params(model).iter().map(|p| p.grad.clone()).collect();
    params(model).zero_grad();

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (pi, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = params(model).iter().nth(pi).unwrap().value.data()[j];
            let set = |m: &mut M, v: f64| params(m).iter_mut().nth(pi).unwrap().value.data_mut()[j] = v;
            set(model, orig + eps);
            let up = eval(model);
            set(model, orig - eps);
            let down = eval(model);
            set(model, orig);
            let numeric = (up - down) / (2.0 * eps);
            let av = a.data()[j];
            worst = worst.max((av - numeric).abs() / av.abs().max(numeric.abs()).max(REL_FLOOR));
            coordinates += 1;
        }
    }
    GradCheckReport { max_rel_error: worst, coordinates }
}

/// One randomized op (or small composite) and its inputs.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>,
}

fn case(name: impl Into<String>, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase { name: name.into(), inputs, f: Box::new(f) }
}

/// Every differentiable graph op on shapes drawn from `seed`, plus two
/// composites. Returns 40-odd cases per seed.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases = Vec::new();
    let mut d = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let dims: Vec<usize> = (0..40).map(|_| d(1, 5)).collect();
    let mut it = dims.into_iter().cycle();
    let mut n = move || it.next().unwrap();
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 99);
    let mut t = |shape: &[usize]| random_tensor(shape, 0.05, &mut rng2);

    let (r, c) = (n(), n() + 1);
    cases.push(case("add", vec![t(&[r, c]), t(&[r, c])], |g, v| g.add(v[0], v[1])));
    cases.push(case("sub", vec![t(&[r, c]), t(&[r, c])], |g, v| g.sub(v[0], v[1])));
    cases.push(case("mul", vec![t(&[r, c]), t(&[r, c])], |g, v| g.mul(v[0], v[1])));
    let (a, b, c2) = (n(), n(), n() + 1);
    cases.push(case("add_broadcast", vec![t(&[a, b, c2]), t(&[c2])], |g, v| g.add_broadcast(v[0], v[1])));
    cases.push(case("mul_broadcast", vec![t(&[a, b, c2]), t(&[b, c2])], |g, v| g.mul_broadcast(v[0], v[1])));
    cases.push(case("scale", vec![t(&[r, c])], |g, v| g.scale(v[0], -2.5)));
    cases.push(case("relu", vec![t(&[a, b, c2])], |g, v| g.relu(v[0])));
    cases.push(case("gelu", vec![t(&[a, c2])], |g, v| g.gelu(v[0])));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let (m, k, nn) = (n(), n(), n());
        let sa = if ta { [k, m] } else { [m, k] };
        let sb = if tb { [nn, k] } else { [k, nn] };
        cases.push(case(format!("matmul ta={ta} tb={tb}"), vec![t(&sa), t(&sb)], move |g, v| {
            g.matmul_t(v[0], v[1], ta, tb)
        }));
        let bs = n();
        cases.push(case(
            format!("batch_matmul ta={ta} tb={tb}"),
            vec![t(&[bs, sa[0], sa[1]]), t(&[bs, sb[0], sb[1]])],
            move |g, v| g.batch_matmul_t(v[0], v[1], ta, tb),
        ));
    }
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 2, 0)] {
        let (bsz, h, cin, cout) = (n().min(2), 4 + n(), n().min(3), n());
        cases.push(case(
            format!("conv2d k={k} s={stride} p={pad}"),
            vec![t(&[bsz, h, h, cin]), t(&[k, k, cin, cout])],
            move |g, v| g.conv2d(v[0], v[1], stride, pad),
        ));
    }
    cases.push(case("mean_inner", vec![t(&[a, b, 3, c2])], |g, v| g.mean_inner(v[0])));
    cases.push(case("reshape", vec![t(&[a, b * c2])], move |g, v| g.reshape(v[0], &[a * b, c2])));
    cases.push(case("transpose", vec![t(&[r, c])], |g, v| g.transpose(v[0])));
    cases.push(case("layer_norm", vec![t(&[a, c2 + 2])], |g, v| g.layer_norm(v[0], 1e-5)));
    cases.push(case("l2_normalize", vec![t(&[a, c2 + 1])], |g, v| g.l2_normalize(v[0])));
    cases.push(case("softmax", vec![t(&[a, b, c2 + 1])], |g, v| g.softmax(v[0])));
    cases.push(case("log_softmax", vec![t(&[a, c2 + 1])], |g, v| g.log_softmax(v[0])));
    let classes = c2 + 1;
    let targets: Vec<usize> = (0..a).map(|i| i % classes).collect();
    cases.push(case("cross_entropy", vec![t(&[a, classes])], move |g, v| g.cross_entropy(v[0], &targets)));
    cases.push(case("row_sum", vec![t(&[a, b, c2])], |g, v| g.row_sum(v[0])));
    cases.push(case("sum", vec![t(&[a, c2])], |g, v| g.sum(v[0])));
    cases.push(case("mean", vec![t(&[a, c2])], |g, v| g.mean(v[0])));
    cases.push(case("concat_last", vec![t(&[a, b]), t(&[a, c2]), t(&[a, 1])], |g, v| g.concat_last(v)));
    cases.push(case("concat_rows", vec![t(&[a, c2]), t(&[b, c2])], |g, v| g.concat_rows(v)));
    cases.push(case("slice_rows", vec![t(&[a + 2, c2])], move |g, v| g.slice_rows(v[0], 1, a + 1)));
    let heads = 2;
    cases.push(case("split_heads", vec![t(&[a, b, heads * c2])], move |g, v| g.split_heads(v[0], heads)));
    cases.push(case("merge_heads", vec![t(&[a * heads, b, c2])], move |g, v| g.merge_heads(v[0], heads)));
    // a small composite: attention with residual and layer norm
    let (tok, w) = (n() + 1, 4);
    cases.push(case("attention composite", vec![t(&[2, tok, w]), t(&[w, w])], move |g, v| {
        let flat = g.reshape(v[0], &[2 * tok, w]);
        let q = g.matmul(flat, v[1]);
        let q = g.reshape(q, &[2, tok, w]);
        let q = g.split_heads(q, 2);
        let s = g.batch_matmul_t(q, q, false, true);
        let p = g.softmax(s);
        let o = g.batch_matmul_t(p, q, false, false);
        let o = g.merge_heads(o, 2);
        let o = g.add(o, v[0]);
        g.layer_norm(o, 1e-5)
    }));
    let (h, cin) = (4 + n(), n().min(3));
    cases.push(case("gelu conv net composite", vec![t(&[2, h, h, cin]), t(&[3, 3, cin, 4]), t(&[4, 3])], |g, v| {
        let x = g.conv2d(v[0], v[1], 2, 1);
        let x = g.gelu(x);
        let x = g.mean_inner(x);
        let x = g.matmul(x, v[2]);
        g.l2_normalize(x)
    }));
    cases
}

impl OpCase {
    pub fn check(&self, seed: u64, eps: f64) -> GradCheckReport {
        check_gradients(&self.inputs, seed, eps, |g, v| (self.f)(g, v))
    }
}
