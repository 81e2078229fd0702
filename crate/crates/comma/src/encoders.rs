//! Miniature vision and text transformer encoders with CLIP-style projection
//! into a shared embedding space.
//!
//! Both encoders are stacks of pre-norm attention+MLP blocks. Prompt rows can
//! be inserted at the first `J` layers: a prompted layer drops the previous
//! layer's prompt-position outputs and replaces them with fresh rows; past
//! depth `J` the prompt positions propagate like ordinary tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, TensorId};

/// Hidden width of the MLP block relative to the token width.
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderConfig {
    /// Image height = width, in pixels.
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Vision token width.
    pub d_v: usize,
    /// Transformer depth K (shared with the text encoder).
    pub layers: usize,
    pub heads: usize,
    /// Shared embedding space width.
    pub d_joint: usize,
}

impl VisionEncoderConfig {
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::Dimension(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision width {} not divisible by {} heads",
                self.d_v, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Fixed token sequence length N.
    pub seq_len: usize,
    /// Text token width.
    pub d_l: usize,
    /// Transformer depth K (must equal the vision depth).
    pub layers: usize,
    pub heads: usize,
    pub d_joint: usize,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("text sequence length must be at least 1".into()));
        }
        if self.heads == 0 || self.d_l % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by {} heads",
                self.d_l, self.heads
            )));
        }
        Ok(())
    }
}

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl LayerParams {
    fn init(rng: &mut ChaCha12Rng, width: usize) -> Self {
        let attn = Normal::new(0.0, 1.0 / (width as f64).sqrt()).unwrap();
        let hidden = width * MLP_RATIO;
        let mlp_out = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
        let mut mat = |rows: usize, cols: usize, dist: &Normal<f64>| {
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
                .expect("init shape")
        };
        LayerParams {
            ln1_gamma: Tensor::vector(vec![1.0; width]),
            ln1_beta: Tensor::vector(vec![0.0; width]),
            wq: mat(width, width, &attn),
            wk: mat(width, width, &attn),
            wv: mat(width, width, &attn),
            wo: mat(width, width, &attn),
            ln2_gamma: Tensor::vector(vec![1.0; width]),
            ln2_beta: Tensor::vector(vec![0.0; width]),
            w1: mat(width, hidden, &attn),
            w2: mat(hidden, width, &mlp_out),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.ln1_gamma"), &self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &self.ln1_beta);
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.ln2_gamma"), &self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &self.ln2_beta);
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.w2"), &self.w2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &mut self.ln1_beta);
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &mut self.ln2_beta);
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.w2"), &mut self.w2);
    }
}

/// Frozen dual-encoder parameters: embedding tables, per-layer transformer
/// parameters, class token, projection heads, and the temperature.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch_embed: Tensor,
    pub class_token: Tensor,
    pub pos_vision: Tensor,
    pub word_embed: Tensor,
    pub pos_text: Tensor,
    pub vision_layers: Vec<LayerParams>,
    pub text_layers: Vec<LayerParams>,
    pub proj_vision: Tensor,
    pub proj_text: Tensor,
    pub temperature: f64,
}

impl Backbone {
    /// Freshly initialized (untrained) backbone, deterministic under `seed`.
    pub fn init(
        vision: &VisionEncoderConfig,
        text: &TextEncoderConfig,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        vision.validate()?;
        text.validate()?;
        if vision.layers != text.layers {
            return Err(Error::Config(format!(
                "encoder depths differ: vision {} vs text {}",
                vision.layers, text.layers
            )));
        }
        if vision.d_joint != text.d_joint {
            return Err(Error::Config("joint space widths differ between branches".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).unwrap();
            Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
            )
            .expect("init shape")
        };
        let patch_embed = mat(vision.patch_dim(), vision.d_v, 1.0 / (vision.patch_dim() as f64).sqrt());
        let class_token = mat(1, vision.d_v, 0.02);
        let pos_vision = mat(1 + vision.num_patches(), vision.d_v, 0.02);
        let word_embed = mat(text.vocab_size, text.d_l, 0.02);
        let pos_text = mat(text.seq_len, text.d_l, 0.02);
        let proj_vision = mat(vision.d_v, vision.d_joint, 1.0 / (vision.d_v as f64).sqrt());
        let proj_text = mat(text.d_l, text.d_joint, 1.0 / (text.d_l as f64).sqrt());
        let vision_layers =
            (0..vision.layers).map(|_| LayerParams::init(&mut rng, vision.d_v)).collect();
        let text_layers =
            (0..text.layers).map(|_| LayerParams::init(&mut rng, text.d_l)).collect();
        Ok(Backbone {
            patch_embed,
            class_token,
            pos_vision,
            word_embed,
            pos_text,
            vision_layers,
            text_layers,
            proj_vision,
            proj_text,
            temperature,
        })
    }

    /// Visit every parameter tensor in a fixed canonical order.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor)) {
        f("patch_embed".into(), &self.patch_embed);
        f("class_token".into(), &self.class_token);
        f("pos_vision".into(), &self.pos_vision);
        f("word_embed".into(), &self.word_embed);
        f("pos_text".into(), &self.pos_text);
        for (i, lp) in self.vision_layers.iter().enumerate() {
            lp.visit(&format!("vision.{i}"), &mut f);
        }
        for (i, lp) in self.text_layers.iter().enumerate() {
            lp.visit(&format!("text.{i}"), &mut f);
        }
        f("proj_vision".into(), &self.proj_vision);
        f("proj_text".into(), &self.proj_text);
    }

    /// Mutable visit in the same canonical order as [`Backbone::visit_params`].
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        f("patch_embed".into(), &mut self.patch_embed);
        f("class_token".into(), &mut self.class_token);
        f("pos_vision".into(), &mut self.pos_vision);
        f("word_embed".into(), &mut self.word_embed);
        f("pos_text".into(), &mut self.pos_text);
        for (i, lp) in self.vision_layers.iter_mut().enumerate() {
            lp.visit_mut(&format!("vision.{i}"), &mut f);
        }
        for (i, lp) in self.text_layers.iter_mut().enumerate() {
            lp.visit_mut(&format!("text.{i}"), &mut f);
        }
        f("proj_vision".into(), &mut self.proj_vision);
        f("proj_text".into(), &mut self.proj_text);
    }

    /// Mark every parameter as trainable (pretraining) or frozen (prompt
    /// fine-tuning).
    pub fn set_trainable(&mut self, trainable: bool) {
        self.visit_params_mut(|_, t| t.requires_grad = trainable);
    }

    /// True when any parameter is marked trainable.
    pub fn is_trainable(&self) -> bool {
        let mut any = false;
        self.visit_params(|_, t| any |= t.requires_grad);
        any
    }

    /// Bit-exact checksum over every parameter (canonical order), the
    /// temperature, and all shapes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_params(|name, t| {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.update(self.temperature.to_le_bytes());
        hex::encode(hasher.finalize())
    }

    /// Insert every parameter into a graph as a leaf. Gradients flow into the
    /// backbone only while it is marked trainable.
    pub fn bind(&self, g: &mut Graph) -> BackboneBinding {
        let bind_layer = |g: &mut Graph, lp: &LayerParams| LayerBinding {
            ln1_gamma: g.leaf(lp.ln1_gamma.clone()),
            ln1_beta: g.leaf(lp.ln1_beta.clone()),
            wq: g.leaf(lp.wq.clone()),
            wk: g.leaf(lp.wk.clone()),
            wv: g.leaf(lp.wv.clone()),
            wo: g.leaf(lp.wo.clone()),
            ln2_gamma: g.leaf(lp.ln2_gamma.clone()),
            ln2_beta: g.leaf(lp.ln2_beta.clone()),
            w1: g.leaf(lp.w1.clone()),
            w2: g.leaf(lp.w2.clone()),
        };
        BackboneBinding {
            patch_embed: g.leaf(self.patch_embed.clone()),
            class_token: g.leaf(self.class_token.clone()),
            pos_vision: g.leaf(self.pos_vision.clone()),
            word_embed: g.leaf(self.word_embed.clone()),
            pos_text: g.leaf(self.pos_text.clone()),
            vision_layers: self.vision_layers.iter().map(|lp| bind_layer(g, lp)).collect(),
            text_layers: self.text_layers.iter().map(|lp| bind_layer(g, lp)).collect(),
            proj_vision: g.leaf(self.proj_vision.clone()),
            proj_text: g.leaf(self.proj_text.clone()),
        }
    }
}

/// Graph handles for one bound transformer block.
#[derive(Debug, Clone)]
pub struct LayerBinding {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub w1: TensorId,
    pub w2: TensorId,
}

impl LayerBinding {
    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, TensorId)) {
        f(format!("{prefix}.ln1_gamma"), self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), self.ln1_beta);
        f(format!("{prefix}.wq"), self.wq);
        f(format!("{prefix}.wk"), self.wk);
        f(format!("{prefix}.wv"), self.wv);
        f(format!("{prefix}.wo"), self.wo);
        f(format!("{prefix}.ln2_gamma"), self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), self.ln2_beta);
        f(format!("{prefix}.w1"), self.w1);
        f(format!("{prefix}.w2"), self.w2);
    }
}

/// Graph handles for a bound backbone, in the same canonical order as
/// [`Backbone::visit_params`].
#[derive(Debug, Clone)]
pub struct BackboneBinding {
    pub patch_embed: TensorId,
    pub class_token: TensorId,
    pub pos_vision: TensorId,
    pub word_embed: TensorId,
    pub pos_text: TensorId,
    pub vision_layers: Vec<LayerBinding>,
    pub text_layers: Vec<LayerBinding>,
    pub proj_vision: TensorId,
    pub proj_text: TensorId,
}

impl BackboneBinding {
    pub fn visit(&self, mut f: impl FnMut(String, TensorId)) {
        f("patch_embed".into(), self.patch_embed);
        f("class_token".into(), self.class_token);
        f("pos_vision".into(), self.pos_vision);
        f("word_embed".into(), self.word_embed);
        f("pos_text".into(), self.pos_text);
        for (i, lb) in self.vision_layers.iter().enumerate() {
            lb.visit(&format!("vision.{i}"), &mut f);
        }
        for (i, lb) in self.text_layers.iter().enumerate() {
            lb.visit(&format!("text.{i}"), &mut f);
        }
        f("proj_vision".into(), self.proj_vision);
        f("proj_text".into(), self.proj_text);
    }
}

/// Split an `[H, W, C]` image into rows of flattened patches.
///
/// Row `r` holds the pixels of the `r`-th patch in row-major patch order; the
/// layout is lossless.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "patchify expects an [H, W, C] image, shape is {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h != w {
        return Err(Error::Dimension(format!("image must be square, got {h}x{w}")));
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "image side {h} not divisible by patch size {patch_size}"
        )));
    }
    let per_side = h / patch_size;
    let patch_dim = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(per_side * per_side * patch_dim);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let y = pr * patch_size + dy;
                    let x = pc * patch_size + dx;
                    for ch in 0..c {
                        data.push(image.data()[(y * w + x) * c + ch]);
                    }
                }
            }
        }
    }
    Tensor::matrix(per_side * per_side, patch_dim, data)
}

/// One pre-norm transformer block: multi-head self-attention then a GELU MLP,
/// both with residual connections. Shape-preserving and deterministic.
pub fn transformer_layer(
    g: &mut Graph,
    tokens: TensorId,
    layer: &LayerBinding,
    heads: usize,
) -> Result<TensorId> {
    let width = g.value(tokens).cols()?;
    if g.value(layer.wq).rows()? != width {
        return Err(Error::ShapeMismatch {
            op: "transformer_layer",
            lhs: g.value(tokens).shape().to_vec(),
            rhs: g.value(layer.wq).shape().to_vec(),
        });
    }
    let head_dim = width / heads;

    let normed = g.layer_norm(tokens, layer.ln1_gamma, layer.ln1_beta)?;
    let q = g.matmul(normed, layer.wq)?;
    let k = g.matmul(normed, layer.wk)?;
    let v = g.matmul(normed, layer.wv)?;
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let attn = g.softmax(scaled, 1)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let projected = g.matmul(merged, layer.wo)?;
    let after_attn = g.add(tokens, projected)?;

    let normed2 = g.layer_norm(after_attn, layer.ln2_gamma, layer.ln2_beta)?;
    let hidden = g.matmul(normed2, layer.w1)?;
    let activated = g.gelu(hidden)?;
    let mlp_out = g.matmul(activated, layer.w2)?;
    g.add(after_attn, mlp_out)
}

/// Apply the deep-prompting rule at one layer.
///
/// For `layer_index` below the prompt depth the previous layer's
/// prompt-position outputs are discarded and replaced by fresh prompt rows;
/// at and beyond the depth the tokens pass through unchanged.
pub fn insert_prompts(
    g: &mut Graph,
    layer_index: usize,
    tokens: TensorId,
    prompts: &[TensorId],
) -> Result<TensorId> {
    match prompts.get(layer_index) {
        None => Ok(tokens),
        Some(&fresh) => {
            if layer_index == 0 {
                g.concat_rows(&[fresh, tokens])
            } else {
                let total = g.value(tokens).rows()?;
                let prompt_rows = g.value(fresh).rows()?;
                let rest = g.slice_rows(tokens, prompt_rows, total)?;
                g.concat_rows(&[fresh, rest])
            }
        }
    }
}

/// Per-layer handles captured during a traced forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// Layer input after prompt insertion.
    pub input: TensorId,
    /// Layer output.
    pub output: TensorId,
}

/// Embed an image into the input token matrix `[1 + num_patches, d_v]`
/// (class token first, then patch embeddings, plus positional embeddings).
pub fn vision_input_tokens(
    g: &mut Graph,
    bb: &BackboneBinding,
    cfg: &VisionEncoderConfig,
    image: &Tensor,
) -> Result<TensorId> {
    let patches = patchify(image, cfg.patch_size)?;
    if patches.cols()? != cfg.patch_dim() || patches.rows()? != cfg.num_patches() {
        return Err(Error::Dimension(format!(
            "image {:?} does not match encoder config (side {}, patch {})",
            image.shape(),
            cfg.image_side,
            cfg.patch_size
        )));
    }
    let patches = g.leaf(patches);
    let embedded = g.matmul(patches, bb.patch_embed)?;
    let with_class = g.concat_rows(&[bb.class_token, embedded])?;
    g.add(with_class, bb.pos_vision)
}

/// Embed a fixed-length token id sequence into `[N, d_l]`.
pub fn text_input_tokens(
    g: &mut Graph,
    bb: &BackboneBinding,
    cfg: &TextEncoderConfig,
    token_ids: &[usize],
) -> Result<TensorId> {
    if token_ids.len() != cfg.seq_len {
        return Err(Error::Dimension(format!(
            "token sequence length {} does not match configured N = {}",
            token_ids.len(),
            cfg.seq_len
        )));
    }
    let embedded = g.embedding(bb.word_embed, token_ids)?;
    g.add(embedded, bb.pos_text)
}

fn run_layers(
    g: &mut Graph,
    layers: &[LayerBinding],
    heads: usize,
    mut tokens: TensorId,
    prompts: &[TensorId],
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<TensorId> {
    for (i, layer) in layers.iter().enumerate() {
        tokens = insert_prompts(g, i, tokens, prompts)?;
        let input = tokens;
        tokens = transformer_layer(g, tokens, layer, heads)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(LayerTrace { input, output: tokens });
        }
    }
    Ok(tokens)
}

/// Encode an image into the shared space: the class-token output of the last
/// layer, projected to `d_joint`.
pub fn encode_image(
    g: &mut Graph,
    bb: &BackboneBinding,
    cfg: &VisionEncoderConfig,
    image: &Tensor,
    prompts: &[TensorId],
) -> Result<TensorId> {
    encode_image_traced(g, bb, cfg, image, prompts, None)
}

pub fn encode_image_traced(
    g: &mut Graph,
    bb: &BackboneBinding,
    cfg: &VisionEncoderConfig,
    image: &Tensor,
    prompts: &[TensorId],
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<TensorId> {
    let tokens = vision_input_tokens(g, bb, cfg, image)?;
    let out = run_layers(g, &bb.vision_layers, cfg.heads, tokens, prompts, trace)?;
    let class_row = if prompts.is_empty() {
        0
    } else {
        g.value(prompts[0]).rows()?
    };
    let class_out = g.slice_rows(out, class_row, class_row + 1)?;
    let projected = g.matmul(class_out, bb.proj_vision)?;
    g.reshape(projected, vec![cfg.d_joint])
}

/// Encode a token sequence into the shared space: the last-token output of
/// the last layer, projected to `d_joint`.
pub fn encode_text(
    g: &mut Graph,
    bb: &BackboneBinding,
    cfg: &TextEncoderConfig,
    token_ids: &[usize],
    prompts: &[TensorId],
) -> Result<TensorId> {
    encode_text_traced(g, bb, cfg, token_ids, prompts, None)
}

pub fn encode_text_traced(
    g: &mut Graph,
    bb: &BackboneBinding,
    cfg: &TextEncoderConfig,
    token_ids: &[usize],
    prompts: &[TensorId],
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<TensorId> {
    let tokens = text_input_tokens(g, bb, cfg, token_ids)?;
    let out = run_layers(g, &bb.text_layers, cfg.heads, tokens, prompts, trace)?;
    let last = g.value(out).rows()? - 1;
    let last_out = g.slice_rows(out, last, last + 1)?;
    let projected = g.matmul(last_out, bb.proj_text)?;
    g.reshape(projected, vec![cfg.d_joint])
}
