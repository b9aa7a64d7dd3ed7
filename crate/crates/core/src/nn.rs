//! Graph-level building blocks shared by the encoders and the fusion
//! transformer.

use crate::autodiff::{Graph, Var};
use crate::params::{named_rng, ParamStore};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// `x · w + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = g.matmul(x, w);
    match b {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// Layer norm with an optional affine part.
pub fn layer_norm(g: &mut Graph, x: Var, affine: Option<(Var, Var)>) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    match affine {
        Some((gamma, beta)) => {
            let s = g.mul_row(n, gamma);
            g.add_row(s, beta)
        }
        None => n,
    }
}

/// Scaled dot-product attention over `heads` column groups of already
/// projected queries, keys and values. Returns the concatenated head
/// outputs, shape `[rows(q) × cols(v)]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = g.shape(q).1;
    let dv = g.shape(v).1;
    assert!(heads >= 1 && d.is_multiple_of(heads) && dv.is_multiple_of(heads));
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dvh, dvh),
            )
        };
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Initialization rule for a named tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `1/sqrt(rows)`, for `[fan_in × fan_out]` weights.
    FanIn,
}

/// Inserts a tensor drawn from its own name-keyed generator.
pub fn init_param(store: &mut ParamStore, seed: u64, name: &str, rows: usize, cols: usize, init: Init) {
    let m = match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::Ones => Matrix::filled(rows, cols, 1.0),
        Init::Normal(std) => Matrix::random_normal(rows, cols, std, &mut named_rng(seed, name)),
        Init::FanIn => Matrix::random_normal(
            rows,
            cols,
            1.0 / (rows as f64).sqrt(),
            &mut named_rng(seed, name),
        ),
    };
    store.insert(name, m);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_head_attention_matches_per_head_loop() {
        let mut rng = named_rng(3, "t");
        let q = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let k = Matrix::random_normal(6, 8, 1.0, &mut rng);
        let v = Matrix::random_normal(6, 8, 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = attention(&mut g, qv, kv, vv, 2);
        let out = g.value(out).clone();
        for h in 0..2 {
            for i in 0..5 {
                let logits: Vec<f64> = (0..6)
                    .map(|j| (0..4).map(|c| q[(i, h * 4 + c)] * k[(j, h * 4 + c)]).sum::<f64>() / 2.0)
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..4 {
                    let want: f64 = (0..6).map(|j| (logits[j] - m).exp() / z * v[(j, h * 4 + c)]).sum();
                    assert!((out[(i, h * 4 + c)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamStore::default();
        init_param(&mut a, 1, "x", 2, 3, Init::FanIn);
        init_param(&mut a, 1, "y", 2, 3, Init::FanIn);
        let mut b = ParamStore::default();
        init_param(&mut b, 1, "y", 2, 3, Init::FanIn);
        assert_eq!(a.by_name("y"), b.by_name("y"));
        assert_ne!(a.by_name("x"), a.by_name("y"));
    }
}
