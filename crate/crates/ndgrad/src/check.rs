//! Finite-difference gradient checking.
//!
//! `relative_error` compares reverse-mode gradients of a scalar-valued
//! builder against central differences. `op_suite` runs it over every graph
//! op at random points.

use crate::{Graph, RngStream, Tensor, Var};

pub const STEP: f64 = 1e-6;

/// Builds a scalar from the given inputs on a fresh graph.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn evaluate(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let out = build(&mut g, &vars);
    g.item(out)
}

/// ‖ad − fd‖ / max(‖fd‖, 1e-8) over every element of every input.
pub fn relative_error(inputs: &[Tensor], build: &Build) -> f64 {
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = tracked.iter().map(|t| g.input(t)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("scalar output");

    let (mut diff, mut norm) = (0.0, 0.0);
    for (k, v) in vars.iter().enumerate() {
        let ad = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, a) in ad.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let fd = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * STEP);
            diff += (a - fd).powi(2);
            norm += fd * fd;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-8)
}

fn random(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("shape matches")
}

/// Magnitudes in [0.2, 2] with random sign, away from the kinks of abs/relu.
fn away_from_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.2, 2.0);
    for v in t.data_mut() {
        if rng.bernoulli(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Contracts any output with fixed distinct weights so every element matters.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).expect("shape matches");
    let w = g.constant(w);
    let p = g.mul(x, w).expect("same shape");
    g.sum(p)
}

/// Relative gradient error of every op (binary ops under each broadcast pattern).
pub fn op_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = RngStream::seeded(seed);
    let mut out = Vec::new();
    let any = random(&mut rng, &[3, 4], -2.0, 2.0);
    let pos = random(&mut rng, &[3, 4], 0.3, 3.0);
    let nz = away_from_zero(&mut rng, &[3, 4]);

    type Unary = fn(&mut Graph, Var) -> Var;
    let unary: [(&str, &Tensor, Unary); 16] = [
        ("neg", &any, |g, x| g.neg(x)),
        ("scale", &any, |g, x| g.scale(x, -1.7)),
        ("add_scalar", &any, |g, x| g.add_scalar(x, 0.4)),
        ("square", &any, |g, x| g.square(x)),
        ("abs", &nz, |g, x| g.abs(x)),
        ("exp", &any, |g, x| g.exp(x)),
        ("log", &pos, |g, x| g.log(x)),
        ("sigmoid", &any, |g, x| g.sigmoid(x)),
        ("relu", &nz, |g, x| g.relu(x)),
        ("softplus", &any, |g, x| g.softplus(x)),
        ("softmax", &any, |g, x| g.softmax(x)),
        ("log_softmax", &any, |g, x| g.log_softmax(x)),
        ("sum_last", &any, |g, x| g.sum_last(x)),
        ("clamp", &any, |g, x| g.clamp(x, -5.0, 5.0)),
        ("slice", &any, |g, x| g.slice(x, 1, 3).expect("in range")),
        ("mean", &any, |g, x| g.mean(x)),
    ];
    for (name, x, f) in unary {
        let build = move |g: &mut Graph, v: &[Var]| {
            let y = f(g, v[0]);
            weighted_sum(g, y)
        };
        out.push((name.to_string(), relative_error(std::slice::from_ref(x), &build)));
    }
    let build = |g: &mut Graph, v: &[Var]| g.sum(v[0]);
    out.push(("sum".into(), relative_error(std::slice::from_ref(&any), &build)));

    type Binary = fn(&mut Graph, Var, Var) -> Var;
    let binary: [(&str, Binary); 4] = [
        ("add", |g, a, b| g.add(a, b).expect("broadcastable")),
        ("sub", |g, a, b| g.sub(a, b).expect("broadcastable")),
        ("mul", |g, a, b| g.mul(a, b).expect("broadcastable")),
        ("div", |g, a, b| g.div(a, b).expect("broadcastable")),
    ];
    let shapes: [(&[usize], &[usize]); 5] = [(&[3, 4], &[3, 4]), (&[3, 4], &[4]), (&[3, 4], &[3, 1]), (&[3, 4], &[]), (&[2, 3, 4], &[3, 1])];
    for (sa, sb) in shapes {
        let a = random(&mut rng, sa, -2.0, 2.0);
        let b = random(&mut rng, sb, 0.5, 2.0);
        for (name, op) in binary {
            for swapped in [false, true] {
                let build = move |g: &mut Graph, v: &[Var]| {
                    let y = if swapped { op(g, v[1], v[0]) } else { op(g, v[0], v[1]) };
                    weighted_sum(g, y)
                };
                let tag = format!("{name} {sa:?}{}{sb:?}", if swapped { " <- " } else { " x " });
                out.push((tag, relative_error(&[a.clone(), b.clone()], &build)));
            }
        }
    }

    let x = random(&mut rng, &[5, 3], -1.0, 1.0);
    let w = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4], -1.0, 1.0);
    let build = |g: &mut Graph, v: &[Var]| {
        let y = g.matmul(v[0], v[1]).expect("inner dims");
        weighted_sum(g, y)
    };
    out.push(("matmul".into(), relative_error(&[x.clone(), w.clone()], &build)));
    let build = |g: &mut Graph, v: &[Var]| {
        let y = g.affine(v[0], v[1], v[2]).expect("inner dims");
        let y = g.softplus(y);
        weighted_sum(g, y)
    };
    out.push(("affine".into(), relative_error(&[x.clone(), w, b], &build)));
    let y = random(&mut rng, &[5, 2], -1.0, 1.0);
    let build = |g: &mut Graph, v: &[Var]| {
        let c = g.concat(&[v[0], v[1], v[0]]).expect("same rows");
        let c = g.square(c);
        weighted_sum(g, c)
    };
    out.push(("concat".into(), relative_error(&[x, y], &build)));
    out
}
