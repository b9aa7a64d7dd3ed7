//! The full grounding network: adapted dual-stream encoding, language-aware
//! synergy, token fusion with a regression token, and the box head.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ama::{adapter_name, insert_adapters, stream_adapters, AmaConfig, Stream};
use crate::autodiff::{Graph, Gradients, Var};
use crate::backbone::{build_toy_encoder, AdapterVars, EncoderConfig, FrozenEncoder, Image};
use crate::error::{Error, Result};
use crate::geometry::{giou_norm, NormBox};
use crate::lavs::{enhance_graph, synergy_branch, AttentionMatrix, CrossAttnVars, LavsConfig};
use crate::nn::{self, init_param, Init};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Which visual streams the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityMode {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "TIR")]
    Tir,
    #[serde(rename = "RGBT")]
    Rgbt,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 3] = [ModalityMode::Rgb, ModalityMode::Tir, ModalityMode::Rgbt];

    pub fn streams(self) -> &'static [Stream] {
        match self {
            ModalityMode::Rgb => &[Stream::Rgb],
            ModalityMode::Tir => &[Stream::Tir],
            ModalityMode::Rgbt => &Stream::BOTH,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityMode::Rgb => "RGB",
            ModalityMode::Tir => "TIR",
            ModalityMode::Rgbt => "RGBT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGB" => Ok(ModalityMode::Rgb),
            "TIR" => Ok(ModalityMode::Tir),
            "RGBT" => Ok(ModalityMode::Rgbt),
            _ => Err(Error::Config(format!("unknown modality `{s}` (expected RGB, TIR or RGBT)"))),
        }
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fusion transformer over `[T_v; T_t; T_s; Reg]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlConfig {
    pub layers: usize,
    pub heads: usize,
    /// Grounding-space width; the encoder width when absent.
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_l1.is_finite() && self.w_giou.is_finite() && self.w_l1 >= 0.0 && self.w_giou >= 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ama: AmaConfig,
    pub lavs: LavsConfig,
    pub modality: ModalityMode,
    pub use_ama: bool,
    pub vl: VlConfig,
    pub head_hidden_dims: Vec<usize>,
    /// Seed for the trainable parameters.
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            ama: AmaConfig::default(),
            lavs: LavsConfig::default(),
            modality: ModalityMode::Rgbt,
            use_ama: true,
            vl: VlConfig {
                layers: 2,
                heads: 4,
                dim: None,
            },
            head_hidden_dims: vec![32],
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            vl: VlConfig {
                layers: 6,
                heads: 8,
                dim: None,
            },
            head_hidden_dims: vec![256, 256],
            ..Self::toy()
        }
    }

    pub fn use_lavs(&self) -> bool {
        self.lavs.enabled
    }

    pub fn ground_dim(&self) -> usize {
        self.vl.dim.unwrap_or(self.encoder.dim)
    }

    /// Checks every cross-field rule; the message names the rule broken.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.use_lavs() && !self.use_ama {
            return Err(Error::Config(
                "use_lavs requires use_ama: LAVS without AMA is not a supported configuration".into(),
            ));
        }
        if self.use_lavs() && self.modality != ModalityMode::Rgbt {
            return Err(Error::Config(format!(
                "use_lavs requires modality RGBT, got {}",
                self.modality
            )));
        }
        if self.use_ama {
            self.ama.validate(self.encoder.num_layers)?;
        }
        if self.use_lavs() {
            self.lavs.validate(self.encoder.num_layers, self.encoder.dim)?;
        }
        let dg = self.ground_dim();
        if self.vl.layers == 0 {
            return Err(Error::Config("vl.layers must be at least 1".into()));
        }
        if self.vl.heads == 0 || !dg.is_multiple_of(self.vl.heads) {
            return Err(Error::Config(format!(
                "vl.heads ({}) must divide the grounding dim ({dg})",
                self.vl.heads
            )));
        }
        if self.head_hidden_dims.contains(&0) {
            return Err(Error::Config("head_hidden_dims entries must be positive".into()));
        }
        Ok(())
    }

    /// Length of the fused sequence for a text of `text_tokens` tokens.
    pub fn sequence_len(&self, text_tokens: usize) -> usize {
        self.modality.streams().len() * self.encoder.num_visual_tokens() + text_tokens + 1
    }
}

/// A predicted box with optional attention diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub bbox: NormBox,
    /// Text-to-visual attention of every refined layer, per stream.
    pub attention: Vec<(Stream, usize, AttentionMatrix)>,
}

/// Frozen-encoder outputs for one sample; independent of trainable
/// parameters.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub visual: Vec<(Stream, Matrix)>,
    pub text: Matrix,
}

/// Values produced by one graph forward pass.
pub struct ForwardOut {
    /// `[1 × 4]` sigmoid outputs `(cx, cy, w, h)`.
    pub bbox: Var,
    pub sequence_len: usize,
    pub attention: Vec<(Stream, usize, Var)>,
    /// Synergy tokens of intermediate layers, when requested.
    pub intermediate: Vec<(usize, Var, Var)>,
}

pub struct VgNet {
    cfg: ModelConfig,
    encoder: Arc<dyn FrozenEncoder>,
    params: ParamStore,
}

impl fmt::Debug for VgNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VgNet")
            .field("cfg", &self.cfg)
            .field("trainable_tensors", &self.params.len())
            .finish()
    }
}

impl Clone for VgNet {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            encoder: Arc::clone(&self.encoder),
            params: self.params.clone(),
        }
    }
}

impl VgNet {
    /// Builds the toy encoder from `cfg.encoder` and initializes every
    /// trainable tensor.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder: Arc<dyn FrozenEncoder> = Arc::new(build_toy_encoder(&cfg.encoder)?);
        Self::with_encoder(cfg, encoder)
    }

    pub fn with_encoder(cfg: ModelConfig, encoder: Arc<dyn FrozenEncoder>) -> Result<Self> {
        cfg.validate()?;
        if encoder.config() != &cfg.encoder {
            return Err(Error::Config("encoder does not match model config".into()));
        }
        let params = init_trainable(&cfg);
        Ok(Self {
            cfg,
            encoder,
            params,
        })
    }

    /// Replaces the trainable tensors; names and shapes must match exactly.
    pub fn load_trainable(&mut self, params: &ParamStore) -> Result<()> {
        self.params.load_values_from(params, true)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &dyn FrozenEncoder {
        self.encoder.as_ref()
    }

    /// Every trainable tensor: adapters, LAVS weights, the text and
    /// modality projections, the fusion transformer, the regression token
    /// and the head. Nothing from the frozen towers.
    pub fn trainable_parameters(&self) -> &ParamStore {
        &self.params
    }

    pub fn trainable_parameters_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Runs the frozen embedding and text tower. Images of inactive
    /// streams are not touched and may be `None`.
    pub fn prepare(&self, rgb: Option<&Image>, tir: Option<&Image>, expression: &str) -> Result<PreparedInput> {
        if expression.trim().is_empty() {
            return Err(Error::EmptyInput("expression is empty".into()));
        }
        let mut visual = Vec::new();
        for &s in self.cfg.modality.streams() {
            let img = match s {
                Stream::Rgb => rgb,
                Stream::Tir => tir,
            }
            .ok_or_else(|| {
                Error::InvalidArgument(format!("{} mode needs a {} image", self.cfg.modality, s.name()))
            })?;
            visual.push((s, self.encoder.embed_image(img)?));
        }
        let ids = self.encoder.tokenizer().encode(expression)?;
        let text = self.encoder.encode_tokens(&ids)?;
        Ok(PreparedInput { visual, text })
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(&self.params, self.params.expect(name))
    }

    /// Graph forward pass from prepared frozen features.
    pub fn forward_graph(&self, g: &mut Graph, input: &PreparedInput) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        let n = cfg.encoder.num_layers;
        let text = g.constant(input.text.clone());
        let mut streams: Vec<(Stream, Var)> = Vec::new();
        for &s in cfg.modality.streams() {
            let m = input
                .visual
                .iter()
                .find(|(st, _)| *st == s)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("missing {} features", s.name())))?;
            streams.push((s, g.constant(m)));
        }
        let refined: BTreeSet<usize> = if cfg.use_lavs() {
            cfg.lavs.refined_layers(n).into_iter().collect()
        } else {
            BTreeSet::new()
        };
        let synergy_at: BTreeSet<usize> = if cfg.use_lavs() {
            cfg.lavs.synergy_layers(n).into_iter().collect()
        } else {
            BTreeSet::new()
        };

        let mut attention = Vec::new();
        let mut intermediate = Vec::new();
        let mut fused: Option<(Var, Var)> = None;
        for l in 1..=n {
            for (s, x) in streams.iter_mut() {
                let adapters = self.adapter_vars(g, *s, l);
                *x = self.encoder.vision_layer_graph(g, l, *x, &adapters)?;
            }
            if refined.contains(&l) {
                let q = self.p(g, &format!("lavs.l{l}.q"));
                for (s, x) in streams.iter_mut() {
                    let k = self.p(g, &format!("lavs.l{l}.k.{}", s.name()));
                    let v = self.p(g, &format!("lavs.l{l}.v.{}", s.name()));
                    let (f, a) = enhance_graph(g, *x, text, q, k, v);
                    *x = f;
                    attention.push((*s, l, a));
                }
            }
            if synergy_at.contains(&l) {
                let pair = self.synergy(g, l, streams[0].1, streams[1].1);
                if l == n {
                    fused = Some(pair);
                } else {
                    intermediate.push((l, pair.0, pair.1));
                }
            }
        }

        let dg = cfg.ground_dim();
        let mut parts = Vec::new();
        for (i, (s, x)) in streams.iter().enumerate() {
            let t = match fused {
                Some((tv, tt)) => [tv, tt][i],
                None => {
                    let w = self.p(g, &format!("proj.{}.w", s.name()));
                    let b = self.p(g, &format!("proj.{}.b", s.name()));
                    nn::linear(g, *x, w, Some(b))
                }
            };
            let pos = self.p(g, &format!("vl.pos.{}", s.name()));
            parts.push(g.add(t, pos));
        }
        let tw = self.p(g, "proj.text.w");
        let tb = self.p(g, "proj.text.b");
        let ts = nn::linear(g, text, tw, Some(tb));
        let tlen = g.shape(ts).0;
        let pos_text = self.p(g, "vl.pos.text");
        let pos_text = g.slice_rows(pos_text, 0, tlen);
        parts.push(g.add(ts, pos_text));
        parts.push(self.p(g, "reg"));
        let mut h = g.concat_rows(&parts);
        let seq_len = g.shape(h).0;
        debug_assert_eq!(g.shape(h).1, dg);

        for i in 1..=cfg.vl.layers {
            h = self.vl_block(g, i, h);
        }
        let ln = (self.p(g, "vl.ln.g"), self.p(g, "vl.ln.b"));
        h = nn::layer_norm(g, h, Some(ln));
        let reg = g.slice_rows(h, seq_len - 1, 1);
        let bbox = self.head_graph(g, reg);
        Ok(ForwardOut {
            bbox,
            sequence_len: seq_len,
            attention,
            intermediate,
        })
    }

    fn adapter_vars(&self, g: &mut Graph, stream: Stream, layer: usize) -> Vec<AdapterVars> {
        if !self.cfg.use_ama {
            return Vec::new();
        }
        let n = self.cfg.encoder.num_layers;
        let Some((_, alpha)) = self.cfg.ama.setting(layer, stream, n) else {
            return Vec::new();
        };
        self.cfg
            .ama
            .targets
            .iter()
            .map(|&t| AdapterVars {
                target: t,
                a: self.p(g, &adapter_name(stream, layer, t, 'a')),
                b: self.p(g, &adapter_name(stream, layer, t, 'b')),
                alpha,
            })
            .collect()
    }

    fn synergy(&self, g: &mut Graph, l: usize, fv: Var, ft: Var) -> (Var, Var) {
        let ca = CrossAttnVars {
            q: self.p(g, &format!("lavs.syn.l{l}.ca.q")),
            k: self.p(g, &format!("lavs.syn.l{l}.ca.k")),
            v: self.p(g, &format!("lavs.syn.l{l}.ca.v")),
            o: self.p(g, &format!("lavs.syn.l{l}.ca.o")),
            heads: self.cfg.lavs.heads,
        };
        let (pv, bv) = (self.p(g, "proj.rgb.w"), self.p(g, "proj.rgb.b"));
        let (pt, bt) = (self.p(g, "proj.tir.w"), self.p(g, "proj.tir.b"));
        let tv = synergy_branch(g, fv, ft, &ca, pv, bv);
        let tt = synergy_branch(g, ft, fv, &ca, pt, bt);
        (tv, tt)
    }

    fn vl_block(&self, g: &mut Graph, i: usize, x: Var) -> Var {
        let pre = format!("vl.l{i}");
        let ln1 = (self.p(g, &format!("{pre}.ln1.g")), self.p(g, &format!("{pre}.ln1.b")));
        let h = nn::layer_norm(g, x, Some(ln1));
        let lin = |g: &mut Graph, input: Var, name: &str| {
            let w = self.p(g, &format!("{pre}.{name}.w"));
            let b = self.p(g, &format!("{pre}.{name}.b"));
            nn::linear(g, input, w, Some(b))
        };
        let q = lin(g, h, "attn.q");
        let k = lin(g, h, "attn.k");
        let v = lin(g, h, "attn.v");
        let att = nn::attention(g, q, k, v, self.cfg.vl.heads);
        let o = lin(g, att, "attn.o");
        let x1 = g.add(x, o);
        let ln2 = (self.p(g, &format!("{pre}.ln2.g")), self.p(g, &format!("{pre}.ln2.b")));
        let h2 = nn::layer_norm(g, x1, Some(ln2));
        let f = lin(g, h2, "ffn.1");
        let f = g.gelu(f);
        let f = lin(g, f, "ffn.2");
        g.add(x1, f)
    }

    fn head_graph(&self, g: &mut Graph, reg: Var) -> Var {
        let layers = self.cfg.head_hidden_dims.len() + 1;
        let mut h = reg;
        for i in 1..=layers {
            let w = self.p(g, &format!("head.l{i}.w"));
            let b = self.p(g, &format!("head.l{i}.b"));
            h = nn::linear(g, h, w, Some(b));
            if i < layers {
                h = g.gelu(h);
            }
        }
        g.sigmoid(h)
    }

    /// Full forward pass on images and an expression.
    pub fn forward(&self, rgb: &Image, tir: &Image, expression: &str) -> Result<Prediction> {
        let input = self.prepare(Some(rgb), Some(tir), expression)?;
        self.predict(&input)
    }

    pub fn predict(&self, input: &PreparedInput) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, input)?;
        let v = g.value(out.bbox);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite box prediction".into()));
        }
        let d = v.data();
        Ok(Prediction {
            bbox: NormBox::new(d[0], d[1], d[2], d[3])?,
            attention: out
                .attention
                .iter()
                .map(|&(s, l, a)| (s, l, AttentionMatrix(g.value(a).clone())))
                .collect(),
        })
    }

    /// Applies the regression head to a `[1 × d_ground]` token.
    pub fn regression_head(&self, reg_token: &Matrix) -> Result<NormBox> {
        if reg_token.shape() != (1, self.cfg.ground_dim()) {
            return Err(Error::Shape(format!(
                "regression token is {:?}, expected (1, {})",
                reg_token.shape(),
                self.cfg.ground_dim()
            )));
        }
        let mut g = Graph::new();
        let r = g.constant(reg_token.clone());
        let out = self.head_graph(&mut g, r);
        let d = g.value(out).data();
        NormBox::new(d[0], d[1], d[2], d[3])
    }

    /// Loss and trainable-parameter gradients for one sample.
    pub fn loss_and_grads(
        &self,
        input: &PreparedInput,
        gt: &NormBox,
        weights: LossWeights,
    ) -> Result<(f64, Vec<(ParamId, Matrix)>)> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, input)?;
        let loss = grounding_loss_graph(&mut g, out.bbox, gt, weights)?;
        let value = g.value(loss)[(0, 0)];
        let grads: Gradients = g.backward(loss);
        Ok((value, grads.params(&self.params)))
    }

    pub fn loss(&self, input: &PreparedInput, gt: &NormBox, weights: LossWeights) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, input)?;
        let loss = grounding_loss_graph(&mut g, out.bbox, gt, weights)?;
        Ok(g.value(loss)[(0, 0)])
    }
}

fn init_trainable(cfg: &ModelConfig) -> ParamStore {
    let mut p = ParamStore::default();
    let s = cfg.seed;
    let ec = &cfg.encoder;
    let (d, dt, dg) = (ec.dim, ec.text_dim(), cfg.ground_dim());
    let n = ec.num_layers;
    let streams = cfg.modality.streams();

    if cfg.use_ama {
        for &st in streams {
            insert_adapters(&mut p, st, &stream_adapters(&cfg.ama, d, n, st, s));
        }
    }
    if cfg.use_lavs() {
        for l in cfg.lavs.refined_layers(n) {
            init_param(&mut p, s, &format!("lavs.l{l}.q"), dt, d, Init::FanIn);
            for st in Stream::BOTH {
                init_param(&mut p, s, &format!("lavs.l{l}.k.{}", st.name()), d, d, Init::FanIn);
                init_param(&mut p, s, &format!("lavs.l{l}.v.{}", st.name()), d, d, Init::FanIn);
            }
        }
        for l in cfg.lavs.synergy_layers(n) {
            for m in ["q", "k", "v", "o"] {
                init_param(&mut p, s, &format!("lavs.syn.l{l}.ca.{m}"), d, d, Init::FanIn);
            }
        }
    }
    for &st in streams {
        init_param(&mut p, s, &format!("proj.{}.w", st.name()), d, dg, Init::FanIn);
        init_param(&mut p, s, &format!("proj.{}.b", st.name()), 1, dg, Init::Zeros);
        init_param(&mut p, s, &format!("vl.pos.{}", st.name()), ec.num_visual_tokens(), dg, Init::Normal(0.02));
    }
    init_param(&mut p, s, "proj.text.w", dt, dg, Init::FanIn);
    init_param(&mut p, s, "proj.text.b", 1, dg, Init::Zeros);
    init_param(&mut p, s, "vl.pos.text", ec.text_max_len, dg, Init::Normal(0.02));
    init_param(&mut p, s, "reg", 1, dg, Init::Normal(0.02));
    for i in 1..=cfg.vl.layers {
        let pre = format!("vl.l{i}");
        for ln in ["ln1", "ln2"] {
            init_param(&mut p, s, &format!("{pre}.{ln}.g"), 1, dg, Init::Ones);
            init_param(&mut p, s, &format!("{pre}.{ln}.b"), 1, dg, Init::Zeros);
        }
        for m in ["q", "k", "v", "o"] {
            init_param(&mut p, s, &format!("{pre}.attn.{m}.w"), dg, dg, Init::FanIn);
            init_param(&mut p, s, &format!("{pre}.attn.{m}.b"), 1, dg, Init::Zeros);
        }
        init_param(&mut p, s, &format!("{pre}.ffn.1.w"), dg, 4 * dg, Init::FanIn);
        init_param(&mut p, s, &format!("{pre}.ffn.1.b"), 1, 4 * dg, Init::Zeros);
        init_param(&mut p, s, &format!("{pre}.ffn.2.w"), 4 * dg, dg, Init::FanIn);
        init_param(&mut p, s, &format!("{pre}.ffn.2.b"), 1, dg, Init::Zeros);
    }
    init_param(&mut p, s, "vl.ln.g", 1, dg, Init::Ones);
    init_param(&mut p, s, "vl.ln.b", 1, dg, Init::Zeros);
    let mut widths = vec![dg];
    widths.extend(&cfg.head_hidden_dims);
    widths.push(4);
    for i in 1..widths.len() {
        init_param(&mut p, s, &format!("head.l{i}.w"), widths[i - 1], widths[i], Init::FanIn);
        init_param(&mut p, s, &format!("head.l{i}.b"), 1, widths[i], Init::Zeros);
    }
    p
}

fn check_gt(gt: &NormBox) -> Result<()> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::InvalidBox(format!(
            "ground-truth box has zero area: {:?}",
            gt.to_array()
        )));
    }
    Ok(())
}

/// `w_l1·Σ|pred − gt| + w_giou·(1 − GIoU(pred, gt))` on center-form boxes.
pub fn grounding_loss(pred: &NormBox, gt: &NormBox, weights: LossWeights) -> Result<f64> {
    check_gt(gt)?;
    let l1: f64 = pred
        .to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(weights.w_l1 * l1 + weights.w_giou * (1.0 - giou_norm(pred, gt)))
}

/// Graph form of [`grounding_loss`] for a `[1 × 4]` prediction.
pub fn grounding_loss_graph(g: &mut Graph, pred: Var, gt: &NormBox, weights: LossWeights) -> Result<Var> {
    check_gt(gt)?;
    let gt_row = g.constant(Matrix::row_vector(&gt.to_array()));
    let diff = g.sub(pred, gt_row);
    let abs = g.abs(diff);
    let l1 = g.sum(abs);

    let col = |g: &mut Graph, i| g.slice_cols(pred, i, 1);
    let (cx, cy, w, h) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px1 = g.sub(cx, hw);
    let px2 = g.add(cx, hw);
    let py1 = g.sub(cy, hh);
    let py2 = g.add(cy, hh);
    let [gx1, gy1, gx2, gy2] = gt.corners();
    let mut k = |v: f64| g.constant(Matrix::filled(1, 1, v));
    let (gx1, gy1, gx2, gy2) = (k(gx1), k(gy1), k(gx2), k(gy2));
    let g_area = k(gt.w * gt.h);

    let ix1 = g.max(px1, gx1);
    let ix2 = g.min(px2, gx2);
    let iy1 = g.max(py1, gy1);
    let iy2 = g.min(py2, gy2);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let p_area = g.mul(w, h);
    let sum_area = g.add(p_area, g_area);
    let union = g.sub(sum_area, inter);

    let cx1 = g.min(px1, gx1);
    let cx2 = g.max(px2, gx2);
    let cy1 = g.min(py1, gy1);
    let cy2 = g.max(py2, gy2);
    let cw = g.sub(cx2, cx1);
    let ch = g.sub(cy2, cy1);
    let c = g.mul(cw, ch);

    let iou = g.div(inter, union);
    let gap = g.sub(c, union);
    let pen = g.div(gap, c);
    let giou = g.sub(iou, pen);
    let one_minus = g.scale(giou, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);

    let a = g.scale(l1, weights.w_l1);
    let b = g.scale(one_minus, weights.w_giou);
    Ok(g.add(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{giou, PixelBox};

    fn img(seed: usize) -> Image {
        Image::from_fn(64, |x, y, c| ((x * 3 + y * 5 + c + seed) % 11) as f64 / 10.0)
    }

    #[test]
    fn lavs_requires_ama_and_rgbt() {
        let cfg = ModelConfig {
            use_ama: false,
            ..ModelConfig::toy()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("use_lavs requires use_ama"), "{err}");
        let cfg = ModelConfig {
            modality: ModalityMode::Rgb,
            ..ModelConfig::toy()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("requires modality RGBT"), "{err}");
        let mut cfg = ModelConfig::toy();
        cfg.ama = AmaConfig::with_ranks(8, 4);
        assert!(cfg.validate().unwrap_err().to_string().contains("r_v <= r_t"));
    }

    #[test]
    fn sequence_lengths() {
        let m = VgNet::new(ModelConfig::toy()).unwrap();
        let input = m.prepare(Some(&img(0)), Some(&img(1)), "the red car").unwrap();
        let mut g = Graph::new();
        let out = m.forward_graph(&mut g, &input).unwrap();
        assert_eq!(out.sequence_len, 2 * 17 + 5 + 1);

        let cfg = ModelConfig {
            modality: ModalityMode::Rgb,
            lavs: LavsConfig {
                enabled: false,
                ..LavsConfig::default()
            },
            ..ModelConfig::toy()
        };
        let m = VgNet::new(cfg).unwrap();
        let input = m.prepare(Some(&img(0)), None, "the red car").unwrap();
        let mut g = Graph::new();
        assert_eq!(m.forward_graph(&mut g, &input).unwrap().sequence_len, 17 + 5 + 1);
    }

    #[test]
    fn zero_head_predicts_center() {
        let mut m = VgNet::new(ModelConfig::toy()).unwrap();
        let names: Vec<String> = m
            .trainable_parameters()
            .iter()
            .filter(|(_, n, _)| n.starts_with("head."))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for n in names {
            let id = m.trainable_parameters().expect(&n);
            let (r, c) = m.trainable_parameters().get(id).shape();
            *m.trainable_parameters_mut().get_mut(id) = Matrix::zeros(r, c);
        }
        let p = m.forward(&img(2), &img(3), "a person").unwrap();
        assert_eq!(p.bbox.to_array(), [0.5; 4]);
        let b = m.regression_head(&Matrix::filled(1, 32, 3.0)).unwrap();
        assert_eq!(b.to_array(), [0.5; 4]);
    }

    #[test]
    fn rgb_mode_never_reads_thermal() {
        let cfg = ModelConfig {
            modality: ModalityMode::Rgb,
            lavs: LavsConfig {
                enabled: false,
                ..LavsConfig::default()
            },
            ..ModelConfig::toy()
        };
        let m = VgNet::new(cfg).unwrap();
        let poisoned = Image::filled(64, f64::NAN);
        let a = m.forward(&img(4), &img(5), "the tree").unwrap();
        let b = m.forward(&img(4), &poisoned, "the tree").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_names_are_not_trainable() {
        let m = VgNet::new(ModelConfig::toy()).unwrap();
        for (_, name, _) in m.trainable_parameters().iter() {
            assert!(!name.starts_with("vision.") && !name.starts_with("text."), "{name}");
            assert!(m.encoder().frozen_weights().id(name).is_none());
        }
        let cfg = ModelConfig {
            use_ama: false,
            lavs: LavsConfig {
                enabled: false,
                ..LavsConfig::default()
            },
            ..ModelConfig::toy()
        };
        let m = VgNet::new(cfg).unwrap();
        assert!(m.trainable_parameters().iter().all(|(_, n, _)| !n.starts_with("ama.")));
    }

    #[test]
    fn loss_examples() {
        let w = LossWeights::default();
        let gt = NormBox::new(0.4, 0.5, 0.2, 0.3).unwrap();
        assert_eq!(grounding_loss(&gt, &gt, w).unwrap(), 0.0);
        let far = NormBox::new(0.9, 0.9, 0.1, 0.1).unwrap();
        let l1 = 5.0 * (0.5 + 0.4 + 0.1 + 0.2);
        assert!(grounding_loss(&far, &gt, w).unwrap() > l1 + 2.0);
        assert!(grounding_loss(&far, &NormBox { cx: 0.5, cy: 0.5, w: 0.0, h: 0.2 }, w).is_err());

        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = PixelBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        assert!((giou(&a, &b) + 5.0 / 63.0).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let w = LossWeights::default();
        let gt = NormBox::new(0.45, 0.5, 0.3, 0.2).unwrap();
        for pred in [[0.5, 0.5, 0.2, 0.2], [0.1, 0.9, 0.05, 0.1], [0.45, 0.5, 0.3, 0.2]] {
            let mut g = Graph::new();
            let p = g.constant(Matrix::row_vector(&pred));
            let l = grounding_loss_graph(&mut g, p, &gt, w).unwrap();
            let want = grounding_loss(&NormBox::new(pred[0], pred[1], pred[2], pred[3]).unwrap(), &gt, w).unwrap();
            assert!((g.value(l)[(0, 0)] - want).abs() < 1e-12);
        }
    }
}
