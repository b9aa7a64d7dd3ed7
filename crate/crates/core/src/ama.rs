//! Asymmetric low-rank adaptation of the frozen attention projections.
//!
//! Each adapted projection `W` of layer `l` becomes `W + α·A·B` with a
//! separate `(A, B)` pair per visual stream. The thermal stream gets the
//! larger rank.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::{FrozenEncoder, Projection};
use crate::error::{Error, Result};
use crate::params::{named_rng, ParamStore};
use crate::tensor::Matrix;

/// Standard deviation of the initial `A` entries.
pub const A_INIT_STD: f64 = 0.02;

/// Visual stream an adapter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Rgb,
    Tir,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Rgb, Stream::Tir];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Tir => "tir",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
    pub target: Projection,
    /// 1-based encoder layer.
    pub layer: usize,
}

impl LowRankAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64, target: Projection, layer: usize) -> Result<Self> {
        if a.cols() != b.rows() || a.cols() == 0 {
            return Err(Error::Shape(format!(
                "adapter A is {:?} but B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidArgument(format!("adapter alpha {alpha}")));
        }
        Ok(Self {
            a,
            b,
            alpha,
            target,
            layer,
        })
    }

    /// `A` seeded from `seed` and `name`, `B` zero.
    pub fn init(d: usize, rank: usize, alpha: f64, target: Projection, layer: usize, seed: u64, name: &str) -> Self {
        let a = Matrix::random_normal(d, rank, A_INIT_STD, &mut named_rng(seed, &format!("{name}.a")));
        Self {
            a,
            b: Matrix::zeros(rank, d),
            alpha,
            target,
            layer,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `α·A·B`.
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("adapter shapes checked").scale(self.alpha)
    }
}

/// `W + α·A·B`. `w` is left untouched.
pub fn adapt_weight(w: &Matrix, adapter: &LowRankAdapter) -> Result<Matrix> {
    if w.rows() != adapter.a.rows() || w.cols() != adapter.b.cols() {
        return Err(Error::Shape(format!(
            "weight {:?} cannot take an adapter of {:?}·{:?}",
            w.shape(),
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    w.add(&adapter.delta())
}

/// Rank and scale override for a group of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmaGroup {
    pub layers: Vec<usize>,
    pub r_v: usize,
    pub r_t: usize,
    #[serde(default)]
    pub alpha_v: Option<f64>,
    #[serde(default)]
    pub alpha_t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmaConfig {
    pub r_v: usize,
    pub r_t: usize,
    /// Defaults to `r_v`.
    pub alpha_v: Option<f64>,
    /// Defaults to `r_t`.
    pub alpha_t: Option<f64>,
    pub targets: BTreeSet<Projection>,
    /// 1-based layers to adapt; all layers when absent.
    pub layers: Option<Vec<usize>>,
    pub groups: Vec<AmaGroup>,
}

impl Default for AmaConfig {
    fn default() -> Self {
        Self {
            r_v: 8,
            r_t: 32,
            alpha_v: None,
            alpha_t: None,
            targets: [Projection::Query, Projection::Value].into_iter().collect(),
            layers: None,
            groups: Vec::new(),
        }
    }
}

impl AmaConfig {
    pub fn with_ranks(r_v: usize, r_t: usize) -> Self {
        Self {
            r_v,
            r_t,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        check_ranks(self.r_v, self.r_t, "ama")?;
        for (name, alpha) in [("ama.alpha_v", self.alpha_v), ("ama.alpha_t", self.alpha_t)] {
            if let Some(a) = alpha {
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::Config(format!("{name} must be finite and non-negative, got {a}")));
                }
            }
        }
        if self.targets.is_empty() {
            return Err(Error::Config("ama.targets must name at least one projection".into()));
        }
        let adapted = self.adapted_layers(num_layers);
        for &l in self.layers.iter().flatten() {
            if l == 0 || l > num_layers {
                return Err(Error::Config(format!(
                    "ama.layers entry {l} is outside 1..={num_layers}"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            check_ranks(g.r_v, g.r_t, &format!("ama.groups[{i}]"))?;
            for &l in &g.layers {
                if !adapted.contains(&l) {
                    return Err(Error::Config(format!(
                        "ama.groups[{i}] lists layer {l}, which is not adapted"
                    )));
                }
                if !seen.insert(l) {
                    return Err(Error::Config(format!("layer {l} appears in two ama.groups")));
                }
            }
        }
        Ok(())
    }

    pub fn adapted_layers(&self, num_layers: usize) -> Vec<usize> {
        match &self.layers {
            Some(ls) => {
                let set: BTreeSet<usize> = ls.iter().copied().collect();
                set.into_iter().collect()
            }
            None => (1..=num_layers).collect(),
        }
    }

    /// `(rank, alpha)` for one stream at one layer, or `None` when the
    /// layer is not adapted.
    pub fn setting(&self, layer: usize, stream: Stream, num_layers: usize) -> Option<(usize, f64)> {
        if !self.adapted_layers(num_layers).contains(&layer) {
            return None;
        }
        let (r_v, r_t, alpha_v, alpha_t) = self
            .groups
            .iter()
            .find(|g| g.layers.contains(&layer))
            .map(|g| (g.r_v, g.r_t, g.alpha_v, g.alpha_t))
            .unwrap_or((self.r_v, self.r_t, self.alpha_v, self.alpha_t));
        Some(match stream {
            Stream::Rgb => (r_v, alpha_v.unwrap_or(r_v as f64)),
            Stream::Tir => (r_t, alpha_t.unwrap_or(r_t as f64)),
        })
    }

    /// Closed-form trainable parameter count of one stream's adapters:
    /// `2·d·r` per adapted (layer, target).
    pub fn param_count(&self, d: usize, num_layers: usize, stream: Stream) -> usize {
        self.adapted_layers(num_layers)
            .into_iter()
            .filter_map(|l| self.setting(l, stream, num_layers))
            .map(|(r, _)| 2 * d * r * self.targets.len())
            .sum()
    }
}

fn check_ranks(r_v: usize, r_t: usize, scope: &str) -> Result<()> {
    if r_v == 0 || r_t == 0 {
        return Err(Error::Config(format!("{scope}: ranks must be at least 1")));
    }
    if r_v > r_t {
        return Err(Error::Config(format!(
            "{scope}: asymmetric ranks require r_v <= r_t, got r_v = {r_v} > r_t = {r_t}"
        )));
    }
    Ok(())
}

/// Parameter-store name of one adapter factor.
pub fn adapter_name(stream: Stream, layer: usize, target: Projection, factor: char) -> String {
    format!("ama.{}.l{layer}.{}.{factor}", stream.name(), target.name())
}

/// Adapters for both streams over every adapted layer and target: rank
/// `r_v` for RGB, `r_t` for TIR. `A` is seeded noise, `B` zero.
pub fn build_asymmetric_adapters(
    cfg: &AmaConfig,
    encoder: &dyn FrozenEncoder,
    seed: u64,
) -> Result<(Vec<LowRankAdapter>, Vec<LowRankAdapter>)> {
    let ec = encoder.config();
    cfg.validate(ec.num_layers)?;
    Ok((
        stream_adapters(cfg, ec.dim, ec.num_layers, Stream::Rgb, seed),
        stream_adapters(cfg, ec.dim, ec.num_layers, Stream::Tir, seed),
    ))
}

pub(crate) fn stream_adapters(
    cfg: &AmaConfig,
    d: usize,
    num_layers: usize,
    stream: Stream,
    seed: u64,
) -> Vec<LowRankAdapter> {
    let mut out = Vec::new();
    for l in cfg.adapted_layers(num_layers) {
        let Some((rank, alpha)) = cfg.setting(l, stream, num_layers) else {
            continue;
        };
        for &t in &cfg.targets {
            let name = format!("ama.{}.l{l}.{}", stream.name(), t.name());
            out.push(LowRankAdapter::init(d, rank, alpha, t, l, seed, &name));
        }
    }
    out
}

/// Stores adapter factors under their [`adapter_name`]s.
pub fn insert_adapters(store: &mut ParamStore, stream: Stream, adapters: &[LowRankAdapter]) {
    for ad in adapters {
        store.insert(adapter_name(stream, ad.layer, ad.target, 'a'), ad.a.clone());
        store.insert(adapter_name(stream, ad.layer, ad.target, 'b'), ad.b.clone());
    }
}
