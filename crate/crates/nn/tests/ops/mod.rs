//! One finite-difference case per differentiable graph operation. Shared by
//! the nn tests and the workspace acceptance run.

use assertrag_nn::{grad_check, BoundParams, GradCheckReport, Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-4;

pub type Shapes = &'static [(&'static str, usize, usize)];
pub type OpFn = for<'g> fn(&mut Graph<'g>, &BoundParams<'g>) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Shapes,
    pub f: OpFn,
}

pub fn store(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut s = ParamStore::new();
    for &(name, r, c) in shapes {
        s.insert(name, Tensor::randn(&[r, c], 1.0, rng));
    }
    s
}

/// Contracts `out` with a fixed pseudo-random weight so every output
/// coordinate influences the scalar.
fn contract(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(r, c, w)?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Full-coordinate check of one case at one seed.
pub fn run(case: &OpCase, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = store(&mut rng, case.shapes);
    grad_check(&[params], None, EPS, |g, b| {
        let out = (case.f)(g, &b[0])?;
        if g.shape(out) == (1, 1) {
            Ok(out)
        } else {
            contract(g, out, seed)
        }
    })
    .unwrap()
}

const PAIR: Shapes = &[("a", 2, 3), ("b", 2, 3)];

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", shapes: &[("a", 3, 4), ("b", 4, 2)], f: |g, p| g.matmul(p.var("a")?, p.var("b")?) },
        OpCase { name: "matmul_t", shapes: &[("a", 3, 4), ("b", 5, 4)], f: |g, p| g.matmul_t(p.var("a")?, p.var("b")?) },
        OpCase { name: "matmul_self", shapes: &[("a", 3, 3)], f: |g, p| g.matmul_t(p.var("a")?, p.var("a")?) },
        OpCase { name: "add", shapes: PAIR, f: |g, p| g.add(p.var("a")?, p.var("b")?) },
        OpCase { name: "sub", shapes: PAIR, f: |g, p| g.sub(p.var("a")?, p.var("b")?) },
        OpCase { name: "mul", shapes: PAIR, f: |g, p| g.mul(p.var("a")?, p.var("b")?) },
        OpCase { name: "scale", shapes: PAIR, f: |g, p| Ok(g.scale(p.var("a")?, -0.37)) },
        OpCase { name: "gelu", shapes: PAIR, f: |g, p| Ok(g.gelu(p.var("a")?)) },
        OpCase { name: "exp", shapes: PAIR, f: |g, p| Ok(g.exp(p.var("a")?)) },
        OpCase {
            name: "log",
            shapes: PAIR,
            f: |g, p| {
                let e = g.exp(p.var("a")?);
                Ok(g.log(e))
            },
        },
        OpCase { name: "add_row", shapes: &[("a", 3, 4), ("r", 1, 4)], f: |g, p| g.add_row(p.var("a")?, p.var("r")?) },
        OpCase {
            name: "div_scalar",
            shapes: &[("a", 2, 3), ("s", 1, 1)],
            f: |g, p| {
                let s = g.exp(p.var("s")?);
                g.div_scalar(p.var("a")?, s)
            },
        },
        OpCase { name: "softmax", shapes: &[("a", 3, 5)], f: |g, p| g.softmax(p.var("a")?) },
        OpCase {
            name: "masked_softmax",
            shapes: &[("a", 3, 3)],
            f: |g, p| {
                let m = g.add_mask(p.var("a")?, &[false, true, true, false, false, true, false, false, false])?;
                g.softmax(m)
            },
        },
        OpCase {
            name: "layer_norm",
            shapes: &[("x", 3, 6), ("gamma", 1, 6), ("beta", 1, 6)],
            f: |g, p| g.layer_norm(p.var("x")?, p.var("gamma")?, p.var("beta")?, 1e-5),
        },
        OpCase { name: "gather", shapes: &[("t", 5, 3)], f: |g, p| g.gather(p.var("t")?, &[4, 0, 4, 2]) },
        OpCase {
            name: "concat_rows",
            shapes: &[("a", 2, 3), ("b", 1, 3)],
            f: |g, p| g.concat_rows(&[p.var("a")?, p.var("b")?, p.var("a")?]),
        },
        OpCase {
            name: "concat_cols",
            shapes: &[("a", 2, 3), ("b", 2, 1)],
            f: |g, p| g.concat_cols(&[p.var("b")?, p.var("a")?]),
        },
        OpCase { name: "slice_rows", shapes: &[("a", 4, 3)], f: |g, p| g.slice_rows(p.var("a")?, 1, 2) },
        OpCase { name: "slice_cols", shapes: &[("a", 3, 5)], f: |g, p| g.slice_cols(p.var("a")?, 2, 2) },
        OpCase { name: "transpose", shapes: &[("a", 2, 5)], f: |g, p| Ok(g.transpose(p.var("a")?)) },
        OpCase {
            name: "sum",
            shapes: &[("a", 3, 2)],
            f: |g, p| {
                let e = g.exp(p.var("a")?);
                Ok(g.sum(e))
            },
        },
        OpCase {
            name: "mean",
            shapes: &[("a", 3, 2)],
            f: |g, p| {
                let e = g.gelu(p.var("a")?);
                Ok(g.mean(e))
            },
        },
        OpCase { name: "l2_normalize", shapes: &[("a", 3, 4)], f: |g, p| g.l2_normalize(p.var("a")?) },
        OpCase {
            name: "cross_entropy",
            shapes: &[("logits", 4, 6)],
            f: |g, p| g.cross_entropy(p.var("logits")?, &[Some(1), None, Some(5), Some(0)]),
        },
        OpCase {
            name: "dropout",
            shapes: &[("a", 3, 4)],
            f: |g, p| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                Ok(g.dropout(p.var("a")?, 0.3, &mut rng))
            },
        },
        // scaled dot-product attention with a causal mask
        OpCase {
            name: "attention",
            shapes: &[("q", 3, 4), ("k", 3, 4), ("v", 3, 4)],
            f: |g, p| {
                let s = g.matmul_t(p.var("q")?, p.var("k")?)?;
                let s = g.scale(s, 0.5);
                let masked: Vec<bool> = (0..9).map(|i| i % 3 > i / 3).collect();
                let s = g.add_mask(s, &masked)?;
                let a = g.softmax(s)?;
                g.matmul(a, p.var("v")?)
            },
        },
    ]
}
