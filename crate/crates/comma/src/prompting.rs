//! Prompt parameter management and the prompt-coupling strategies.
//!
//! Four learnable-prompt designs are supported next to the prompt-free
//! baseline: text-only first-layer prompts, independent deep prompts in both
//! branches, uni-directional text-to-vision mapping, and correlated
//! generation where each vision-layer prompt attends over the previous
//! layer's text prompts (queried by the previous vision prompt).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, TensorId};

/// Std-dev of randomly initialized prompt rows.
const PROMPT_INIT_STD: f64 = 0.02;

/// Prompt-coupling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Frozen zero-shot model; no learnable prompts.
    None,
    /// First-layer text prompts only.
    CoopText,
    /// Independent learnable prompts in both branches at every prompted layer.
    DeepIndependent,
    /// Text prompts learnable; vision prompts are per-layer affine maps of
    /// the same layer's text prompts.
    MapleUni,
    /// Text prompts learnable; vision prompts generated by cross-branch
    /// attention from the previous layer's prompts in both branches.
    Comma,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(StrategyKind::None),
            "coop_text" => Ok(StrategyKind::CoopText),
            "deep_independent" => Ok(StrategyKind::DeepIndependent),
            "maple_uni" => Ok(StrategyKind::MapleUni),
            "comma" => Ok(StrategyKind::Comma),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected none, coop_text, deep_independent, maple_uni or comma)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::CoopText => "coop_text",
            StrategyKind::DeepIndependent => "deep_independent",
            StrategyKind::MapleUni => "maple_uni",
            StrategyKind::Comma => "comma",
        }
    }
}

/// Which width enters the attention scale denominator of the correlated
/// generator: the post-projection feature width (default) or the prompt row
/// count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    FeatureDim,
    TokenCount,
}

/// Strategy plus distillation settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptStrategy {
    pub kind: StrategyKind,
    pub kd_enabled: bool,
    pub lambda: f64,
    pub s_layers: usize,
    pub attn_scale: AttnScale,
}

impl PromptStrategy {
    pub fn validate(&self, encoder_depth: usize) -> Result<()> {
        if self.kd_enabled {
            if self.s_layers < 1 || self.s_layers > encoder_depth {
                return Err(Error::Config(format!(
                    "distillation layer count {} outside 1..={encoder_depth}",
                    self.s_layers
                )));
            }
            if self.lambda < 0.0 {
                return Err(Error::Config("distillation weight must be nonnegative".into()));
            }
            if self.kind == StrategyKind::None {
                return Err(Error::Config(
                    "distillation requires learnable text prompts; strategy is 'none'".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A per-layer affine text-to-vision map.
#[derive(Debug, Clone)]
pub struct MapleMap {
    /// `d_l × d_v` weight.
    pub weight: Tensor,
    /// `1 × d_v` bias row.
    pub bias: Tensor,
}

/// Learnable prompt parameters for one model.
///
/// `text_prompts` holds one `M_p × d_l` matrix per prompted layer. The
/// vision side depends on the strategy: independent deep prompts store one
/// matrix per layer, the correlated strategy stores only the layer-0 seed
/// (deeper vision prompts are derived values, never independent parameters),
/// and the mapped strategy stores affine maps instead.
#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    pub text_prompts: Vec<Tensor>,
    pub vision_prompts: Vec<Tensor>,
    pub key_projection: Option<Tensor>,
    pub value_projection: Option<Tensor>,
    pub maple_maps: Vec<MapleMap>,
}

/// Everything needed to initialize a [`PromptSet`].
pub struct PromptInit<'a> {
    /// Hand-crafted template token ids; layer-0 text prompts copy the
    /// embeddings of the first `M_p` of them.
    pub template: &'a [usize],
    /// Frozen word-embedding table (`vocab × d_l`).
    pub word_embed: &'a Tensor,
    /// Prompt depth J (already clamped to the encoder depth).
    pub depth: usize,
    /// Prompt length M_p.
    pub prompt_len: usize,
    pub d_v: usize,
    pub seed: u64,
}

/// Layer-0 text prompts from template embeddings, deeper layers from a
/// normal distribution under the given seed.
pub fn init_text_prompts(
    template: &[usize],
    word_embed: &Tensor,
    depth: usize,
    prompt_len: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if template.len() < prompt_len {
        return Err(Error::Config(format!(
            "template has {} tokens, prompt length is {prompt_len}",
            template.len()
        )));
    }
    let d_l = word_embed.cols()?;
    let vocab = word_embed.rows()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, PROMPT_INIT_STD).unwrap();
    let mut prompts = Vec::with_capacity(depth);
    for layer in 0..depth {
        let data: Vec<f64> = if layer == 0 {
            let mut rows = Vec::with_capacity(prompt_len * d_l);
            for &id in template.iter().take(prompt_len) {
                if id >= vocab {
                    return Err(Error::Index(format!("template token {id} out of vocabulary {vocab}")));
                }
                rows.extend_from_slice(&word_embed.data()[id * d_l..(id + 1) * d_l]);
            }
            rows
        } else {
            (0..prompt_len * d_l).map(|_| dist.sample(&mut rng)).collect()
        };
        prompts.push(Tensor::matrix(prompt_len, d_l, data)?.with_grad());
    }
    Ok(prompts)
}

impl PromptSet {
    /// Initialize for a strategy. Every stored tensor is marked learnable.
    pub fn init(kind: StrategyKind, spec: &PromptInit) -> Result<Self> {
        let d_l = spec.word_embed.cols()?;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9));
        let prompt_dist = Normal::new(0.0, PROMPT_INIT_STD).unwrap();
        let proj_dist = Normal::new(0.0, 1.0 / (d_l as f64).sqrt()).unwrap();
        let mut rand_mat = |rows: usize, cols: usize, dist: &Normal<f64>| {
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
                .map(Tensor::with_grad)
        };

        let set = match kind {
            StrategyKind::None => PromptSet::default(),
            StrategyKind::CoopText => PromptSet {
                text_prompts: init_text_prompts(
                    spec.template,
                    spec.word_embed,
                    1,
                    spec.prompt_len,
                    spec.seed,
                )?,
                ..PromptSet::default()
            },
            StrategyKind::DeepIndependent => {
                let vision = (0..spec.depth)
                    .map(|_| rand_mat(spec.prompt_len, spec.d_v, &prompt_dist))
                    .collect::<Result<Vec<_>>>()?;
                PromptSet {
                    text_prompts: init_text_prompts(
                        spec.template,
                        spec.word_embed,
                        spec.depth,
                        spec.prompt_len,
                        spec.seed,
                    )?,
                    vision_prompts: vision,
                    ..PromptSet::default()
                }
            }
            StrategyKind::MapleUni => {
                let maps = (0..spec.depth)
                    .map(|_| {
                        Ok(MapleMap {
                            weight: rand_mat(d_l, spec.d_v, &proj_dist)?,
                            bias: Tensor::matrix(1, spec.d_v, vec![0.0; spec.d_v])?.with_grad(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                PromptSet {
                    text_prompts: init_text_prompts(
                        spec.template,
                        spec.word_embed,
                        spec.depth,
                        spec.prompt_len,
                        spec.seed,
                    )?,
                    maple_maps: maps,
                    ..PromptSet::default()
                }
            }
            StrategyKind::Comma => {
                let seed_prompt = rand_mat(spec.prompt_len, spec.d_v, &prompt_dist)?;
                let w_k = rand_mat(d_l, spec.d_v, &proj_dist)?;
                let w_v = rand_mat(d_l, spec.d_v, &proj_dist)?;
                PromptSet {
                    text_prompts: init_text_prompts(
                        spec.template,
                        spec.word_embed,
                        spec.depth,
                        spec.prompt_len,
                        spec.seed,
                    )?,
                    vision_prompts: vec![seed_prompt],
                    key_projection: Some(w_k),
                    value_projection: Some(w_v),
                    ..PromptSet::default()
                }
            }
        };
        Ok(set)
    }

    /// Visit every learnable tensor in a fixed canonical order.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor)) {
        for (i, t) in self.text_prompts.iter().enumerate() {
            f(format!("text_prompt.{i}"), t);
        }
        for (i, t) in self.vision_prompts.iter().enumerate() {
            f(format!("vision_prompt.{i}"), t);
        }
        if let Some(t) = &self.key_projection {
            f("key_projection".into(), t);
        }
        if let Some(t) = &self.value_projection {
            f("value_projection".into(), t);
        }
        for (i, m) in self.maple_maps.iter().enumerate() {
            f(format!("maple.{i}.weight"), &m.weight);
            f(format!("maple.{i}.bias"), &m.bias);
        }
    }

    /// Mutable visit in the same canonical order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        for (i, t) in self.text_prompts.iter_mut().enumerate() {
            f(format!("text_prompt.{i}"), t);
        }
        for (i, t) in self.vision_prompts.iter_mut().enumerate() {
            f(format!("vision_prompt.{i}"), t);
        }
        if let Some(t) = &mut self.key_projection {
            f("key_projection".into(), t);
        }
        if let Some(t) = &mut self.value_projection {
            f("value_projection".into(), t);
        }
        for (i, m) in self.maple_maps.iter_mut().enumerate() {
            f(format!("maple.{i}.weight"), &mut m.weight);
            f(format!("maple.{i}.bias"), &mut m.bias);
        }
    }

    /// Total learnable scalar count.
    pub fn learnable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// Insert every learnable tensor into a graph.
    pub fn bind(&self, g: &mut Graph) -> PromptBinding {
        PromptBinding {
            text: self.text_prompts.iter().map(|t| g.leaf(t.clone())).collect(),
            vision: self.vision_prompts.iter().map(|t| g.leaf(t.clone())).collect(),
            key_projection: self.key_projection.as_ref().map(|t| g.leaf(t.clone())),
            value_projection: self.value_projection.as_ref().map(|t| g.leaf(t.clone())),
            maple_maps: self
                .maple_maps
                .iter()
                .map(|m| (g.leaf(m.weight.clone()), g.leaf(m.bias.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`PromptSet`], in the same canonical order.
#[derive(Debug, Clone)]
pub struct PromptBinding {
    pub text: Vec<TensorId>,
    pub vision: Vec<TensorId>,
    pub key_projection: Option<TensorId>,
    pub value_projection: Option<TensorId>,
    pub maple_maps: Vec<(TensorId, TensorId)>,
}

impl PromptBinding {
    pub fn visit(&self, mut f: impl FnMut(String, TensorId)) {
        for (i, &t) in self.text.iter().enumerate() {
            f(format!("text_prompt.{i}"), t);
        }
        for (i, &t) in self.vision.iter().enumerate() {
            f(format!("vision_prompt.{i}"), t);
        }
        if let Some(t) = self.key_projection {
            f("key_projection".into(), t);
        }
        if let Some(t) = self.value_projection {
            f("value_projection".into(), t);
        }
        for (i, &(w, b)) in self.maple_maps.iter().enumerate() {
            f(format!("maple.{i}.weight"), w);
            f(format!("maple.{i}.bias"), b);
        }
    }
}

/// Generate a vision prompt from the previous layer's prompts in both
/// branches: the previous vision prompt queries the projected text prompts
/// (keys/values), aggregating along the token dimension.
///
/// `A = softmax_rows(Pv · (Pl·W_k)ᵀ / scale)`, output `A · (Pl·W_v)`.
pub fn correlated_prompts(
    g: &mut Graph,
    pv_prev: TensorId,
    pl_prev: TensorId,
    w_k: TensorId,
    w_v: TensorId,
    attn_scale: AttnScale,
) -> Result<TensorId> {
    Ok(correlated_prompts_with_attention(g, pv_prev, pl_prev, w_k, w_v, attn_scale)?.0)
}

/// As [`correlated_prompts`], but also returns the `M_p × M_p` row-stochastic
/// attention matrix.
pub fn correlated_prompts_with_attention(
    g: &mut Graph,
    pv_prev: TensorId,
    pl_prev: TensorId,
    w_k: TensorId,
    w_v: TensorId,
    attn_scale: AttnScale,
) -> Result<(TensorId, TensorId)> {
    let d_v = g.value(pv_prev).cols()?;
    let m_p = g.value(pv_prev).rows()?;
    let keys = g.matmul(pl_prev, w_k)?;
    let values = g.matmul(pl_prev, w_v)?;
    if g.value(keys).cols()? != d_v {
        return Err(Error::ShapeMismatch {
            op: "correlated_prompts",
            lhs: g.value(pv_prev).shape().to_vec(),
            rhs: g.value(keys).shape().to_vec(),
        });
    }
    let scale = match attn_scale {
        AttnScale::FeatureDim => (d_v as f64).sqrt(),
        AttnScale::TokenCount => (m_p as f64).sqrt(),
    };
    let keys_t = g.transpose(keys)?;
    let logits = g.matmul(pv_prev, keys_t)?;
    let scaled = g.scale(logits, 1.0 / scale)?;
    let attention = g.softmax(scaled, 1)?;
    let output = g.matmul(attention, values)?;
    Ok((output, attention))
}

/// Uni-directional text-to-vision prompt map: a per-layer affine map applied
/// row-wise.
pub fn maple_prompts(
    g: &mut Graph,
    pl: TensorId,
    weight: TensorId,
    bias: TensorId,
) -> Result<TensorId> {
    let rows = g.value(pl).rows()?;
    let mapped = g.matmul(pl, weight)?;
    let ones = g.leaf(Tensor::matrix(rows, 1, vec![1.0; rows]).expect("ones column"));
    let bias_rows = g.matmul(ones, bias)?;
    g.add(mapped, bias_rows)
}

/// Per-layer prompt rows for both branches.
#[derive(Debug, Clone, Default)]
pub struct PromptSchedule {
    pub vision: Vec<TensorId>,
    pub text: Vec<TensorId>,
}

/// Resolve a strategy and a bound prompt set into per-layer prompt rows.
///
/// Under the correlated strategy the layer-0 vision prompt is the stored
/// seed and each deeper vision prompt is generated from the previous layer's
/// generated vision prompt and stored text prompt, inside the graph, so
/// gradients flow across branches.
pub fn build_prompt_schedule(
    g: &mut Graph,
    kind: StrategyKind,
    attn_scale: AttnScale,
    prompts: &PromptBinding,
) -> Result<PromptSchedule> {
    let depth = prompts.text.len();
    match kind {
        StrategyKind::None => {
            if depth != 0 || !prompts.vision.is_empty() {
                return Err(Error::Config("prompt-free strategy given stored prompts".into()));
            }
            Ok(PromptSchedule::default())
        }
        StrategyKind::CoopText => {
            if depth != 1 || !prompts.vision.is_empty() {
                return Err(Error::Config(
                    "first-layer text strategy expects exactly one text prompt and no vision prompts"
                        .into(),
                ));
            }
            Ok(PromptSchedule { vision: Vec::new(), text: prompts.text.clone() })
        }
        StrategyKind::DeepIndependent => {
            if prompts.vision.len() != depth {
                return Err(Error::Config(format!(
                    "independent deep prompts need one vision prompt per layer: {} text vs {} vision",
                    depth,
                    prompts.vision.len()
                )));
            }
            Ok(PromptSchedule { vision: prompts.vision.clone(), text: prompts.text.clone() })
        }
        StrategyKind::MapleUni => {
            if prompts.maple_maps.len() != depth {
                return Err(Error::Config(format!(
                    "uni-directional mapping needs one map per layer: {} text vs {} maps",
                    depth,
                    prompts.maple_maps.len()
                )));
            }
            let mut vision = Vec::with_capacity(depth);
            for (i, &(w, b)) in prompts.maple_maps.iter().enumerate() {
                vision.push(maple_prompts(g, prompts.text[i], w, b)?);
            }
            Ok(PromptSchedule { vision, text: prompts.text.clone() })
        }
        StrategyKind::Comma => {
            if prompts.vision.len() != 1 {
                return Err(Error::Config(
                    "correlated strategy stores exactly one vision seed prompt".into(),
                ));
            }
            let (w_k, w_v) = match (prompts.key_projection, prompts.value_projection) {
                (Some(k), Some(v)) => (k, v),
                _ => {
                    return Err(Error::Config(
                        "correlated strategy requires key and value projections".into(),
                    ))
                }
            };
            let mut vision = Vec::with_capacity(depth);
            vision.push(prompts.vision[0]);
            for i in 1..depth {
                let prev = vision[i - 1];
                let generated =
                    correlated_prompts(g, prev, prompts.text[i - 1], w_k, w_v, attn_scale)?;
                vision.push(generated);
            }
            Ok(PromptSchedule { vision, text: prompts.text.clone() })
        }
    }
}

#[cfg(test)]
mod tests;
