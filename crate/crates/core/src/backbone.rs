//! Frozen vision and text towers.
//!
//! One vision tower encodes both RGB and thermal images; modality-specific
//! behaviour comes only from the adapters passed to [`FrozenEncoder::vision_layer`].
//! [`ToyEncoder`] draws its weights from a seed so every mechanism can be
//! exercised without pretrained checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ama::LowRankAdapter;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, init_param, Init};
use crate::params::{fnv1a, ParamStore};
use crate::tensor::Matrix;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// Maximum text length in tokens, including start and end markers.
    pub text_max_len: usize,
    /// Text tower width; the vision width when absent.
    #[serde(default)]
    pub text_dim: Option<usize>,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale profile used by the tests.
    pub fn toy() -> Self {
        Self {
            num_layers: 2,
            dim: 32,
            num_heads: 4,
            patch_size: 16,
            image_size: 64,
            text_max_len: 16,
            text_dim: None,
            seed: 0,
        }
    }

    /// ViT-B/16-like dimensions at 224 px.
    pub fn paper() -> Self {
        Self {
            num_layers: 12,
            dim: 768,
            num_heads: 12,
            patch_size: 16,
            image_size: 224,
            text_max_len: 77,
            text_dim: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return bad("encoder.num_layers must be at least 1".into());
        }
        if self.dim < 2 {
            return bad(format!("encoder.dim must be at least 2, got {}", self.dim));
        }
        if self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "encoder.num_heads ({}) must divide encoder.dim ({})",
                self.num_heads, self.dim
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "encoder.image_size ({}) must be a positive multiple of encoder.patch_size ({})",
                self.image_size, self.patch_size
            ));
        }
        if self.text_max_len < 3 {
            return bad("encoder.text_max_len must leave room for at least one word".into());
        }
        if let Some(td) = self.text_dim {
            if td < 2 || td % self.num_heads != 0 {
                return bad(format!(
                    "encoder.text_dim ({td}) must be at least 2 and divisible by encoder.num_heads"
                ));
            }
        }
        Ok(())
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim.unwrap_or(self.dim)
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patch tokens plus the class token.
    pub fn num_visual_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }
}

/// What a token sequence carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    VisualRgb,
    VisualTir,
    Text,
}

/// `[tokens × dim]` features with their role.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub data: Matrix,
    pub role: Role,
}

impl TokenSequence {
    pub fn new(data: Matrix, role: Role) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Shape("token sequence needs at least one token".into()));
        }
        Ok(Self { data, role })
    }

    pub fn num_tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Square image, three channels, values in `[0, 1]`, row-major `HWC`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || data.len() != size * size * CHANNELS {
            return Err(Error::Shape(format!(
                "image of side {size} needs {} values, got {}",
                size * size * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            size,
            data: vec![value; size * size * CHANNELS],
        }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(size * size * CHANNELS);
        for y in 0..size {
            for x in 0..size {
                for c in 0..CHANNELS {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.size + x) * CHANNELS + c]
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.size, |x, y, c| self.get(self.size - 1 - x, y, c))
    }

    pub fn map(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % CHANNELS, v))
            .collect();
        Self {
            size: self.size,
            data,
        }
    }

    /// Loads a colour image resized to `size × size`.
    pub fn load_rgb(path: &Path, size: usize) -> Result<Self> {
        let img = open(path)?.to_rgb8();
        let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::new(size, data)
    }

    /// Loads an intensity image resized to `size × size`, replicated over
    /// the three channels.
    pub fn load_thermal(path: &Path, size: usize) -> Result<Self> {
        let img = open(path)?.to_luma8();
        let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
        let data = img
            .as_raw()
            .iter()
            .flat_map(|&v| [f64::from(v) / 255.0; CHANNELS])
            .collect();
        Self::new(size, data)
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
const FIRST_WORD: u32 = 3;
const OOV_BUCKETS: u32 = 64;

const VOCAB: &[&str] = &[
    "a", "above", "all", "an", "and", "at", "behind", "below", "beside", "between", "bicycle",
    "big", "bike", "black", "blob", "blue", "bottom", "box", "bright", "building", "bus", "by",
    "car", "center", "circle", "close", "corner", "cyan", "dark", "diamond", "far", "from",
    "front", "gray", "green", "house", "in", "is", "large", "left", "light", "magenta", "man",
    "middle", "motorcycle", "near", "next", "of", "on", "orange", "parked", "people", "person",
    "pole", "purple", "rectangle", "red", "right", "road", "side", "sign", "small", "square",
    "standing", "street", "tall", "that", "the", "to", "top", "tree", "triangle", "truck", "under",
    "walking", "wall", "white", "with", "woman", "yellow",
];

/// Lower-casing whitespace tokenizer with a fixed vocabulary; unknown
/// words fall into hashed buckets.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: BTreeMap<&'static str, u32>,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(max_len: usize) -> Self {
        let vocab = VOCAB
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, FIRST_WORD + i as u32))
            .collect();
        Self { vocab, max_len }
    }

    pub fn vocab_size(&self) -> usize {
        (FIRST_WORD + VOCAB.len() as u32 + OOV_BUCKETS) as usize
    }

    /// Id of an in-vocabulary word.
    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.vocab.get(word).copied()
    }

    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    /// `[SOS] words… [EOS]`, truncated to the maximum length.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let words = Self::words(text);
        if words.is_empty() {
            return Err(Error::EmptyInput("expression has no words".into()));
        }
        let room = self.max_len - 2;
        if words.len() > room {
            log::warn!(
                "expression truncated from {} to {room} words: {text:?}",
                words.len()
            );
        }
        let mut ids = Vec::with_capacity(words.len().min(room) + 2);
        ids.push(SOS);
        for w in words.iter().take(room) {
            let id = match self.vocab.get(w.as_str()) {
                Some(&id) => id,
                None => {
                    FIRST_WORD + VOCAB.len() as u32 + (fnv1a(w.as_bytes()) % u64::from(OOV_BUCKETS)) as u32
                }
            };
            ids.push(id);
        }
        ids.push(EOS);
        Ok(ids)
    }
}

/// Graph handles of one adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub target: Projection,
    pub a: Var,
    pub b: Var,
    pub alpha: f64,
}

/// A frozen dual tower.
pub trait FrozenEncoder: Send + Sync {
    fn config(&self) -> &EncoderConfig;

    fn tokenizer(&self) -> &Tokenizer;

    /// All frozen tensors, by name.
    fn frozen_weights(&self) -> &ParamStore;

    /// Frozen attention projection of a 1-based layer, `[d × d]`.
    fn attention_weight(&self, layer: usize, proj: Projection) -> Result<&Matrix>;

    /// Patch embedding, class token and position embedding: `[N × d]`.
    fn embed_image(&self, image: &Image) -> Result<Matrix>;

    /// Final-layer text features `[T × d_text]` for token ids.
    fn encode_tokens(&self, ids: &[u32]) -> Result<Matrix>;

    /// One pre-norm block of the vision tower on graph values. Adapters
    /// add `α·(x·A)·B` to their target projection.
    fn vision_layer_graph(&self, g: &mut Graph, layer: usize, x: Var, adapters: &[AdapterVars]) -> Result<Var>;

    fn embed(&self, image: &Image, role: Role) -> Result<TokenSequence> {
        TokenSequence::new(self.embed_image(image)?, role)
    }

    /// One vision block on plain values.
    fn vision_layer(&self, layer: usize, input: &TokenSequence, adapters: &[LowRankAdapter]) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let x = g.constant(input.data.clone());
        let vars: Vec<AdapterVars> = adapters
            .iter()
            .map(|ad| AdapterVars {
                target: ad.target,
                a: g.constant(ad.a.clone()),
                b: g.constant(ad.b.clone()),
                alpha: ad.alpha,
            })
            .collect();
        let y = self.vision_layer_graph(&mut g, layer, x, &vars)?;
        TokenSequence::new(g.value(y).clone(), input.role)
    }

    /// SHA-256 of the frozen weight container.
    fn checksum(&self) -> String {
        self.frozen_weights().checksum()
    }
}

/// Seeded stand-in for pretrained towers.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    cfg: EncoderConfig,
    weights: ParamStore,
    tokenizer: Tokenizer,
}

pub fn build_toy_encoder(cfg: &EncoderConfig) -> Result<ToyEncoder> {
    cfg.validate()?;
    let mut w = ParamStore::default();
    let s = cfg.seed;
    let d = cfg.dim;
    let dt = cfg.text_dim();
    let tokenizer = Tokenizer::new(cfg.text_max_len);

    init_param(&mut w, s, "vision.patch.w", cfg.patch_dim(), d, Init::FanIn);
    init_param(&mut w, s, "vision.patch.b", 1, d, Init::Normal(0.02));
    init_param(&mut w, s, "vision.cls", 1, d, Init::Normal(0.02));
    init_param(&mut w, s, "vision.pos", cfg.num_visual_tokens(), d, Init::Normal(0.02));
    for l in 1..=cfg.num_layers {
        block_params(&mut w, s, &format!("vision.l{l}"), d);
    }
    init_param(&mut w, s, "text.embed", tokenizer.vocab_size(), dt, Init::Normal(1.0));
    init_param(&mut w, s, "text.pos", cfg.text_max_len, dt, Init::Normal(0.02));
    for l in 1..=cfg.num_layers {
        block_params(&mut w, s, &format!("text.l{l}"), dt);
    }
    Ok(ToyEncoder {
        cfg: cfg.clone(),
        weights: w,
        tokenizer,
    })
}

fn block_params(w: &mut ParamStore, seed: u64, prefix: &str, d: usize) {
    for p in Projection::ALL {
        init_param(w, seed, &format!("{prefix}.attn.{}.w", p.short()), d, d, Init::FanIn);
        init_param(w, seed, &format!("{prefix}.attn.{}.b", p.short()), 1, d, Init::Normal(0.02));
    }
    init_param(w, seed, &format!("{prefix}.ffn.w1"), d, 4 * d, Init::FanIn);
    init_param(w, seed, &format!("{prefix}.ffn.b1"), 1, 4 * d, Init::Normal(0.02));
    init_param(w, seed, &format!("{prefix}.ffn.w2"), 4 * d, d, Init::FanIn);
    init_param(w, seed, &format!("{prefix}.ffn.b2"), 1, d, Init::Normal(0.02));
}

impl ToyEncoder {
    fn w(&self, name: &str) -> &Matrix {
        self.weights
            .by_name(name)
            .unwrap_or_else(|| panic!("frozen tensor `{name}` missing"))
    }

    fn c(&self, g: &mut Graph, name: &str) -> Var {
        g.constant(self.w(name).clone())
    }

    /// Frozen pre-norm block; `adapters` only apply to the vision tower.
    fn block(&self, g: &mut Graph, prefix: &str, x: Var, adapters: &[AdapterVars]) -> Var {
        let h = nn::layer_norm(g, x, None);
        let proj = |g: &mut Graph, input: Var, p: Projection| {
            let w = self.c(g, &format!("{prefix}.attn.{}.w", p.short()));
            let b = self.c(g, &format!("{prefix}.attn.{}.b", p.short()));
            let mut y = nn::linear(g, input, w, Some(b));
            for ad in adapters.iter().filter(|a| a.target == p) {
                let xa = g.matmul(input, ad.a);
                let xab = g.matmul(xa, ad.b);
                let delta = g.scale(xab, ad.alpha);
                y = g.add(y, delta);
            }
            y
        };
        let q = proj(g, h, Projection::Query);
        let k = proj(g, h, Projection::Key);
        let v = proj(g, h, Projection::Value);
        let att = nn::attention(g, q, k, v, self.cfg.num_heads);
        let o = proj(g, att, Projection::Output);
        let x1 = g.add(x, o);
        let h2 = nn::layer_norm(g, x1, None);
        let (w1, b1) = (self.c(g, &format!("{prefix}.ffn.w1")), self.c(g, &format!("{prefix}.ffn.b1")));
        let (w2, b2) = (self.c(g, &format!("{prefix}.ffn.w2")), self.c(g, &format!("{prefix}.ffn.b2")));
        let f = nn::linear(g, h2, w1, Some(b1));
        let f = g.gelu(f);
        let f = nn::linear(g, f, w2, Some(b2));
        g.add(x1, f)
    }
}

impl FrozenEncoder for ToyEncoder {
    fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn frozen_weights(&self) -> &ParamStore {
        &self.weights
    }

    fn attention_weight(&self, layer: usize, proj: Projection) -> Result<&Matrix> {
        check_layer(layer, self.cfg.num_layers)?;
        Ok(self.w(&format!("vision.l{layer}.attn.{}.w", proj.short())))
    }

    fn embed_image(&self, image: &Image) -> Result<Matrix> {
        let cfg = &self.cfg;
        if image.size() != cfg.image_size {
            return Err(Error::Shape(format!(
                "image side {} does not match encoder image_size {}",
                image.size(),
                cfg.image_size
            )));
        }
        let p = cfg.patch_size;
        let side = cfg.image_size / p;
        let mut patches = Matrix::zeros(cfg.num_patches(), cfg.patch_dim());
        for py in 0..side {
            for px in 0..side {
                let row = patches.row_mut(py * side + px);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..CHANNELS {
                            row[k] = (image.get(px * p + x, py * p + y, c) - 0.5) * 2.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        let emb = patches.matmul(self.w("vision.patch.w"))?;
        let bias = self.w("vision.patch.b");
        let pos = self.w("vision.pos");
        let d = cfg.dim;
        let mut out = Matrix::zeros(cfg.num_visual_tokens(), d);
        for j in 0..d {
            out[(0, j)] = self.w("vision.cls")[(0, j)] + pos[(0, j)];
        }
        for i in 0..cfg.num_patches() {
            for j in 0..d {
                out[(i + 1, j)] = emb[(i, j)] + bias[(0, j)] + pos[(i + 1, j)];
            }
        }
        Ok(out)
    }

    fn encode_tokens(&self, ids: &[u32]) -> Result<Matrix> {
        if ids.is_empty() || ids.len() > self.cfg.text_max_len {
            return Err(Error::Shape(format!(
                "{} text tokens, expected 1..={}",
                ids.len(),
                self.cfg.text_max_len
            )));
        }
        let dt = self.cfg.text_dim();
        let table = self.w("text.embed");
        let pos = self.w("text.pos");
        let mut x = Matrix::zeros(ids.len(), dt);
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= table.rows() {
                return Err(Error::InvalidArgument(format!("token id {id} out of vocabulary")));
            }
            for j in 0..dt {
                x[(i, j)] = table[(id, j)] + pos[(i, j)];
            }
        }
        let mut g = Graph::new();
        let mut h = g.constant(x);
        for l in 1..=self.cfg.num_layers {
            h = self.block(&mut g, &format!("text.l{l}"), h, &[]);
        }
        let out = nn::layer_norm(&mut g, h, None);
        Ok(g.value(out).clone())
    }

    fn vision_layer_graph(&self, g: &mut Graph, layer: usize, x: Var, adapters: &[AdapterVars]) -> Result<Var> {
        check_layer(layer, self.cfg.num_layers)?;
        let (n, d) = g.shape(x);
        if d != self.cfg.dim || n == 0 {
            return Err(Error::Shape(format!(
                "vision layer expects [N × {}], got [{n} × {d}]",
                self.cfg.dim
            )));
        }
        for ad in adapters {
            let (ar, r) = g.shape(ad.a);
            let (br, bc) = g.shape(ad.b);
            if ar != d || br != r || bc != d {
                return Err(Error::Shape(format!(
                    "adapter for {} has A {:?}, B {:?}",
                    ad.target,
                    (ar, r),
                    (br, bc)
                )));
            }
        }
        Ok(self.block(g, &format!("vision.l{layer}"), x, adapters))
    }
}

fn check_layer(layer: usize, n: usize) -> Result<()> {
    if layer == 0 || layer > n {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside 1..={n}"
        )));
    }
    Ok(())
}

/// Linear map from text features to the grounding space.
#[derive(Clone, Debug, PartialEq)]
pub struct TextProjection {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl TextProjection {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Shape(format!(
                "projection bias {:?} does not fit weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::Numeric("projection has non-finite entries".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Matrix::identity(d),
            bias: Matrix::zeros(1, d),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// Final-layer text features `F_s` and their projection `T_s`.
pub fn encode_text(
    expression: &str,
    encoder: &dyn FrozenEncoder,
    projection: &TextProjection,
) -> Result<(TokenSequence, TokenSequence)> {
    if expression.trim().is_empty() {
        return Err(Error::EmptyInput("expression is empty".into()));
    }
    let ids = encoder.tokenizer().encode(expression)?;
    let f_s = encoder.encode_tokens(&ids)?;
    let t_s = projection.apply(&f_s)?;
    Ok((TokenSequence::new(f_s, Role::Text)?, TokenSequence::new(t_s, Role::Text)?))
}
