//! Language-aware visual synergy.
//!
//! Each visual stream is enhanced by text-queried attention,
//! `F = f + Aᵀ(A·V)` with `A = softmax(Q_s·Kᵀ/√d)` of shape `[T × N]`, which
//! keeps the `[N × d]` token layout. The streams are then fused by a
//! shared cross-attention and projected into the grounding space.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Role, TokenSequence};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LavsConfig {
    pub enabled: bool,
    /// 1-based layers refined after their encoder block; all when absent.
    pub layers: Option<Vec<usize>>,
    /// Heads of the cross-modal attention.
    pub heads: usize,
    /// Also compute the projected synergy tokens after every refined layer
    /// (diagnostic only; the grounding head uses the last layer's).
    pub compute_t_every_layer: bool,
}

impl Default for LavsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            layers: None,
            heads: 1,
            compute_t_every_layer: false,
        }
    }
}

impl LavsConfig {
    pub fn validate(&self, num_layers: usize, dim: usize) -> Result<()> {
        for &l in self.layers.iter().flatten() {
            if l == 0 || l > num_layers {
                return Err(Error::Config(format!(
                    "lavs.layers entry {l} is outside 1..={num_layers}"
                )));
            }
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "lavs.heads ({}) must divide the encoder dim ({dim})",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn refined_layers(&self, num_layers: usize) -> Vec<usize> {
        match &self.layers {
            Some(ls) => ls.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            None => (1..=num_layers).collect(),
        }
    }

    /// Layers whose synergy tokens are computed: the last encoder layer,
    /// plus every refined layer when requested.
    pub fn synergy_layers(&self, num_layers: usize) -> Vec<usize> {
        let mut s: BTreeSet<usize> = BTreeSet::from([num_layers]);
        if self.compute_t_every_layer {
            s.extend(self.refined_layers(num_layers));
        }
        s.into_iter().collect()
    }
}

/// Text-to-visual attention weights, `[T × N]`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix(pub Matrix);

impl AttentionMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.0.rows())
            .map(|i| (self.0.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Text-queried enhancement weights for one stream at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceParams {
    /// `[d_text × d]`, shared by both streams of a layer.
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Cross-attention and output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SynergyParams {
    pub ca_q: Matrix,
    pub ca_k: Matrix,
    pub ca_v: Matrix,
    pub ca_o: Matrix,
    pub heads: usize,
    pub p_v: Matrix,
    pub b_v: Matrix,
    pub p_t: Matrix,
    pub b_t: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LavsLayerParams {
    pub q: Matrix,
    pub k_v: Matrix,
    pub k_t: Matrix,
    pub v_v: Matrix,
    pub v_t: Matrix,
}

/// Graph form of the enhancement. Returns `(F, A)`.
pub(crate) fn enhance_graph(g: &mut Graph, f: Var, text: Var, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d = g.shape(f).1;
    let qs = g.matmul(text, q);
    let kv = g.matmul(f, k);
    let logits = g.matmul_nt(qs, kv);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let a = g.softmax_rows(logits);
    let vv = g.matmul(f, v);
    let av = g.matmul(a, vv);
    let back = g.matmul_tn(a, av);
    (g.add(f, back), a)
}

/// Graph handles of the shared cross-attention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CrossAttnVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub heads: usize,
}

pub(crate) fn cross_attention(g: &mut Graph, x: Var, y: Var, ca: &CrossAttnVars) -> Var {
    let q = g.matmul(x, ca.q);
    let k = g.matmul(y, ca.k);
    let v = g.matmul(y, ca.v);
    let att = nn::attention(g, q, k, v, ca.heads);
    g.matmul(att, ca.o)
}

/// `P(x + CA(x, y)) + b`.
pub(crate) fn synergy_branch(g: &mut Graph, x: Var, y: Var, ca: &CrossAttnVars, p: Var, b: Var) -> Var {
    let c = cross_attention(g, x, y, ca);
    let s = g.add(x, c);
    nn::linear(g, s, p, Some(b))
}

fn check_finite(what: &str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or infinity")))
    }
}

fn check_shape(what: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{what} is {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        )));
    }
    Ok(())
}

/// `f + Aᵀ(A·V)` for one stream.
pub fn text_queried_enhance(
    f: &TokenSequence,
    text: &TokenSequence,
    params: &EnhanceParams,
) -> Result<(TokenSequence, AttentionMatrix)> {
    let (d, dt) = (f.dim(), text.dim());
    check_shape("query projection", &params.q, dt, d)?;
    check_shape("key projection", &params.k, d, d)?;
    check_shape("value projection", &params.v, d, d)?;
    check_finite("visual tokens", &f.data)?;
    check_finite("text features", &text.data)?;
    let mut g = Graph::new();
    let fv = g.constant(f.data.clone());
    let tv = g.constant(text.data.clone());
    let (q, k, v) = (
        g.constant(params.q.clone()),
        g.constant(params.k.clone()),
        g.constant(params.v.clone()),
    );
    let (out, a) = enhance_graph(&mut g, fv, tv, q, k, v);
    let out = g.value(out).clone();
    check_finite("enhanced tokens", &out)?;
    Ok((TokenSequence::new(out, f.role)?, AttentionMatrix(g.value(a).clone())))
}

/// Fuses the two streams: `T_v = P_v(F_v + CA(F_v, F_t))` and the mirror
/// for `T_t`, with one cross-attention shared by both directions.
pub fn cross_modal_synergy(
    f_v: &TokenSequence,
    f_t: &TokenSequence,
    params: &SynergyParams,
) -> Result<(TokenSequence, TokenSequence)> {
    if f_v.data.shape() != f_t.data.shape() {
        return Err(Error::Shape(format!(
            "streams differ: {:?} vs {:?}",
            f_v.data.shape(),
            f_t.data.shape()
        )));
    }
    let d = f_v.dim();
    for (n, m) in [("ca.q", &params.ca_q), ("ca.k", &params.ca_k), ("ca.v", &params.ca_v), ("ca.o", &params.ca_o)] {
        check_shape(n, m, d, d)?;
    }
    let dg = params.p_v.cols();
    check_shape("P_v", &params.p_v, d, dg)?;
    check_shape("P_t", &params.p_t, d, dg)?;
    check_shape("P_v bias", &params.b_v, 1, dg)?;
    check_shape("P_t bias", &params.b_t, 1, dg)?;
    if params.heads == 0 || !d.is_multiple_of(params.heads) {
        return Err(Error::InvalidArgument(format!("{} heads for dim {d}", params.heads)));
    }
    check_finite("F_v", &f_v.data)?;
    check_finite("F_t", &f_t.data)?;
    let mut g = Graph::new();
    let x = g.constant(f_v.data.clone());
    let y = g.constant(f_t.data.clone());
    let ca = CrossAttnVars {
        q: g.constant(params.ca_q.clone()),
        k: g.constant(params.ca_k.clone()),
        v: g.constant(params.ca_v.clone()),
        o: g.constant(params.ca_o.clone()),
        heads: params.heads,
    };
    let (pv, bv) = (g.constant(params.p_v.clone()), g.constant(params.b_v.clone()));
    let (pt, bt) = (g.constant(params.p_t.clone()), g.constant(params.b_t.clone()));
    let tv = synergy_branch(&mut g, x, y, &ca, pv, bv);
    let tt = synergy_branch(&mut g, y, x, &ca, pt, bt);
    Ok((
        TokenSequence::new(g.value(tv).clone(), f_v.role)?,
        TokenSequence::new(g.value(tt).clone(), f_t.role)?,
    ))
}

/// Enhances both streams with their own keys and values and the shared
/// text query.
pub fn lavs_refine(
    f_v: &TokenSequence,
    f_t: &TokenSequence,
    text: &TokenSequence,
    params: &LavsLayerParams,
) -> Result<(TokenSequence, TokenSequence)> {
    if text.role != Role::Text {
        return Err(Error::InvalidArgument("LAVS query must come from text features".into()));
    }
    let (a, _) = text_queried_enhance(
        f_v,
        text,
        &EnhanceParams {
            q: params.q.clone(),
            k: params.k_v.clone(),
            v: params.v_v.clone(),
        },
    )?;
    let (b, _) = text_queried_enhance(
        f_t,
        text,
        &EnhanceParams {
            q: params.q.clone(),
            k: params.k_t.clone(),
            v: params.v_t.clone(),
        },
    )?;
    Ok((a, b))
}
