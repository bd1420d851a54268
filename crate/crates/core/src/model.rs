//! Tiny multimodal transformer: patch vision encoder, linear connector and a
//! prefix-causal language decoder.
//!
//! Every linear weight is stored `[out, in]`. A feed-forward unit `i` of a block
//! therefore owns row `i` of `ffn.w_in`, element `i` of `ffn.b_in` and column
//! `i` of `ffn.w_out`.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Bindings, Graph, NodeId};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{self, TokenId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vision_blocks: usize,
    pub language_blocks: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub max_image_patches: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vision_blocks: 2,
            language_blocks: 2,
            patch_rows: 7,
            patch_cols: 6,
            max_image_patches: 32,
            vocab_size: vocab::VOCAB_SIZE,
            max_seq: 48,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ffn == 0 {
            return bad("d_ffn must be >= 1".into());
        }
        if self.patch_rows == 0 || self.patch_cols == 0 || self.max_image_patches == 0 || self.max_seq == 0 {
            return bad("patch geometry and max_seq must be positive".into());
        }
        if self.vocab_size < vocab::VOCAB_SIZE {
            return bad(format!("vocab_size {} smaller than the {} assigned ids", self.vocab_size, vocab::VOCAB_SIZE));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn blocks(&self, module: Module) -> usize {
        match module {
            Module::Vision => self.vision_blocks,
            Module::Language => self.language_blocks,
        }
    }

    pub fn neuron_count(&self) -> usize {
        (self.vision_blocks + self.language_blocks) * self.d_ffn
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("model config: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Vision,
    Language,
}

impl Module {
    pub const ALL: [Module; 2] = [Module::Vision, Module::Language];

    pub fn name(&self) -> &'static str {
        match self {
            Module::Vision => "vision",
            Module::Language => "language",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Module::Vision),
            "language" => Ok(Module::Language),
            _ => Err(Error::Format(format!("unknown module {s:?}"))),
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A block of a module: `(module, block index)`.
pub type LayerId = (Module, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub module: Module,
    pub block: usize,
    pub unit: usize,
}

/// Binary image, row-major, `1` = ink.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl PixelGrid {
    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }
}

/// Names of the feed-forward parameters of one block.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w_in: String,
    pub b_in: String,
    pub w_out: String,
    pub b_out: String,
}

pub fn block_prefix(module: Module, block: usize) -> String {
    format!("{}.block{}", module.name(), block)
}

pub fn ffn_params(module: Module, block: usize) -> FfnParams {
    let p = block_prefix(module, block);
    FfnParams {
        w_in: format!("{p}.ffn.w_in"),
        b_in: format!("{p}.ffn.b_in"),
        w_out: format!("{p}.ffn.w_out"),
        b_out: format!("{p}.ffn.b_out"),
    }
}

/// Graph-level edits applied while building a forward pass. Parameters are never touched.
#[derive(Clone, Debug, Default)]
pub struct Intervention {
    /// Multiplies the post-GELU activations of a block column-wise.
    pub unit_scale: BTreeMap<LayerId, Vec<f32>>,
    /// Added to the post-GELU activations of a block; shape `[positions, d_ffn]`.
    pub unit_offset: BTreeMap<LayerId, Tensor>,
    /// Replaces the connector output by zeros.
    pub zero_connector: bool,
    /// Multiplies the loss.
    pub loss_scale: Option<f32>,
}

impl Intervention {
    /// Forces one unit's output to zero at every position.
    pub fn ablate(config: &ModelConfig, neuron: NeuronId) -> Self {
        let mut scale = vec![1.0; config.d_ffn];
        scale[neuron.unit] = 0.0;
        let mut iv = Self::default();
        iv.unit_scale.insert((neuron.module, neuron.block), scale);
        iv
    }
}

/// A built image-translation forward graph and its addressable nodes.
pub struct ItGraph {
    pub graph: Graph,
    pub logits: NodeId,
    pub loss: NodeId,
    /// Post-GELU activation node of every block, vision blocks first.
    pub ffn: Vec<(LayerId, NodeId)>,
    pub patches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl Bindings for Model {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
}

impl Model {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in shapes {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; numel]
            } else if name.ends_with(".beta") || name.ends_with("bias") || name.contains(".b_") {
                vec![0.0; numel]
            } else {
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-a..a) as f32).collect()
            };
            params.insert(name, Tensor::new(shape, data)?.with_trainable(true));
        }
        Ok(Self { config: config.clone(), params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets the trainable flag of every parameter through `f(name)`.
    pub fn set_trainable(&mut self, mut f: impl FnMut(&str) -> bool) {
        for (name, t) in self.params.iter_mut() {
            t.set_trainable(f(name));
        }
    }

    /// Every feed-forward unit: vision blocks first, then language, unit-major within a block.
    pub fn list_neurons(&self) -> Vec<NeuronId> {
        list_neurons(&self.config)
    }

    pub fn to_container(&self) -> Container {
        let tensors = self.params.iter().map(|(k, v)| (k.clone(), v.clone().with_trainable(false))).collect();
        Container { meta: self.config.to_text(), tensors }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config = ModelConfig::from_text(&c.meta)?;
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != c.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                c.tensors.len(),
                expected.len()
            )));
        }
        let mut params = BTreeMap::new();
        for (name, shape) in expected {
            let t = c.tensors.get(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            params.insert(name, t.clone().with_trainable(true));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Number of patches for a grid, after validating its geometry.
    pub fn patch_count(&self, grid: &PixelGrid) -> Result<usize> {
        let c = &self.config;
        if grid.height != c.patch_rows || grid.width == 0 || !grid.width.is_multiple_of(c.patch_cols) {
            return Err(Error::InvalidGrid(format!(
                "grid {}x{} incompatible with {}x{} patches",
                grid.height, grid.width, c.patch_rows, c.patch_cols
            )));
        }
        if grid.pixels.len() != grid.height * grid.width {
            return Err(Error::InvalidGrid("pixel count does not match dimensions".into()));
        }
        let patches = grid.width / c.patch_cols;
        if patches > c.max_image_patches {
            return Err(Error::GridTooWide { patches, max: c.max_image_patches });
        }
        Ok(patches)
    }

    /// Flattened non-overlapping patches, one row per patch.
    pub fn patchify(&self, grid: &PixelGrid) -> Result<Tensor> {
        let patches = self.patch_count(grid)?;
        let (pr, pc) = (self.config.patch_rows, self.config.patch_cols);
        let mut data = Vec::with_capacity(patches * pr * pc);
        for p in 0..patches {
            for r in 0..pr {
                for c in 0..pc {
                    data.push(grid.get(r, p * pc + c) as f32);
                }
            }
        }
        Tensor::matrix(patches, pr * pc, data)
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(Error::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Builds the teacher-forced graph for `(grid, instruction, target)`.
    ///
    /// Decoder input is `[connector(vision) ; instruction ; BOS ; target]`; the loss is the
    /// mean cross-entropy of predicting `target ++ [EOS]`.
    pub fn build_it_graph(
        &self,
        grid: &PixelGrid,
        instruction: &[TokenId],
        target: &[TokenId],
        iv: &Intervention,
    ) -> Result<ItGraph> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        self.check_tokens(instruction)?;
        self.check_tokens(target)?;
        let patches = self.patch_count(grid)?;
        let len = patches + instruction.len() + 1 + target.len();
        if len > self.config.max_seq {
            return Err(Error::SequenceOverflow { len, max: self.config.max_seq });
        }

        let mut g = Graph::new();
        let mut ffn = Vec::new();
        let vis = self.vision_nodes(&mut g, grid, iv, &mut ffn)?;
        let conn = self.connector_nodes(&mut g, vis, iv);

        let mut text: Vec<TokenId> = instruction.to_vec();
        text.push(vocab::BOS);
        text.extend_from_slice(target);
        let hidden = self.decoder_nodes(&mut g, conn, patches, &text, iv, &mut ffn);

        let first = patches + instruction.len();
        let rows = g.slice(hidden, 0, first, target.len() + 1);
        let logits = self.head_nodes(&mut g, rows);
        let mut targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        targets.push(vocab::EOS as usize);
        let mut loss = g.softmax_cross_entropy(logits, targets);
        if let Some(s) = iv.loss_scale {
            loss = g.scale(loss, s);
        }
        Ok(ItGraph { graph: g, logits, loss, ffn, patches })
    }

    /// Teacher-forced logits `[|target|+1, vocab]` and mean token loss.
    pub fn forward_it(&self, grid: &PixelGrid, instruction: &[TokenId], target: &[TokenId]) -> Result<(Tensor, f32)> {
        let it = self.build_it_graph(grid, instruction, target, &Intervention::default())?;
        let (_, tape) = autodiff::forward(&it.graph, self)?;
        Ok((tape.value(it.logits)?.clone(), tape.value(it.loss)?.item()))
    }

    /// Mean token loss at `f64` precision under an intervention.
    pub fn loss_with(&self, grid: &PixelGrid, instruction: &[TokenId], target: &[TokenId], iv: &Intervention) -> Result<f64> {
        let it = self.build_it_graph(grid, instruction, target, iv)?;
        let (_, tape) = autodiff::forward(&it.graph, self)?;
        tape.loss_f64(it.loss)
    }

    /// Patch embeddings before the vision blocks: `patches · Wᵀ + b + pos`.
    pub fn embed_patches(&self, grid: &PixelGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let patches = self.patch_count(grid)?;
        let x = self.patch_embed_nodes(&mut g, grid, patches)?;
        let (_, tape) = autodiff::forward(&g, self)?;
        Ok(tape.value(x)?.clone())
    }

    /// Vision encoder output `[patches, d_model]` (before the connector).
    pub fn encode_image(&self, grid: &PixelGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let vis = self.vision_nodes(&mut g, grid, &Intervention::default(), &mut Vec::new())?;
        let (_, tape) = autodiff::forward(&g, self)?;
        Ok(tape.value(vis)?.clone())
    }

    /// Greedy decoding; ties go to the lowest token id; EOS is not emitted.
    pub fn generate(&self, grid: &PixelGrid, instruction: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(Error::Validation("max_len must be >= 1".into()));
        }
        self.check_tokens(instruction)?;
        let iv = Intervention::default();
        let patches = self.patch_count(grid)?;
        let mut g = Graph::new();
        let vis = self.vision_nodes(&mut g, grid, &iv, &mut Vec::new())?;
        let conn = self.connector_nodes(&mut g, vis, &iv);
        let (_, tape) = autodiff::forward(&g, self)?;
        let visual = tape.value(conn)?.clone();
        drop(tape);

        let mut out = Vec::new();
        for _ in 0..max_len {
            let mut text = instruction.to_vec();
            text.push(vocab::BOS);
            text.extend_from_slice(&out);
            let len = patches + text.len();
            if len > self.config.max_seq {
                return Err(Error::SequenceOverflow { len, max: self.config.max_seq });
            }
            let mut g = Graph::new();
            let vnode = g.constant(visual.clone());
            let hidden = self.decoder_nodes(&mut g, vnode, patches, &text, &iv, &mut Vec::new());
            let last = g.slice(hidden, 0, len - 1, 1);
            let logits = self.head_nodes(&mut g, last);
            let (_, tape) = autodiff::forward(&g, self)?;
            let row = tape.value(logits)?.row(0).to_vec();
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best as TokenId == vocab::EOS {
                break;
            }
            out.push(best as TokenId);
        }
        Ok(out)
    }

    fn patch_embed_nodes(&self, g: &mut Graph, grid: &PixelGrid, patches: usize) -> Result<NodeId> {
        let flat = g.constant(self.patchify(grid)?);
        let w = g.input("vision.patch_embed.weight");
        let b = g.input("vision.patch_embed.bias");
        let pos_table = g.input("vision.pos_embed");
        let x = g.matmul_t(flat, w);
        let x = g.add(x, b);
        let pos = g.slice(pos_table, 0, 0, patches);
        Ok(g.add(x, pos))
    }

    fn vision_nodes(
        &self,
        g: &mut Graph,
        grid: &PixelGrid,
        iv: &Intervention,
        ffn: &mut Vec<(LayerId, NodeId)>,
    ) -> Result<NodeId> {
        let patches = self.patch_count(grid)?;
        let mut x = self.patch_embed_nodes(g, grid, patches)?;
        for b in 0..self.config.vision_blocks {
            x = self.block_nodes(g, x, Module::Vision, b, patches, patches, iv, ffn);
        }
        Ok(self.final_norm(g, x, Module::Vision))
    }

    fn connector_nodes(&self, g: &mut Graph, vis: NodeId, iv: &Intervention) -> NodeId {
        let w = g.input("connector.weight");
        let b = g.input("connector.bias");
        let y = g.matmul_t(vis, w);
        let y = g.add(y, b);
        if iv.zero_connector {
            g.scale(y, 0.0)
        } else {
            y
        }
    }

    fn decoder_nodes(
        &self,
        g: &mut Graph,
        visual: NodeId,
        patches: usize,
        text: &[TokenId],
        iv: &Intervention,
        ffn: &mut Vec<(LayerId, NodeId)>,
    ) -> NodeId {
        let table = g.input("language.tok_embed");
        let emb = g.gather(table, text.iter().map(|&t| t as usize).collect());
        let x = g.concat(vec![visual, emb], 0);
        let len = patches + text.len();
        let pos_table = g.input("language.pos_embed");
        let pos = g.slice(pos_table, 0, 0, len);
        let mut x = g.add(x, pos);
        for b in 0..self.config.language_blocks {
            x = self.block_nodes(g, x, Module::Language, b, len, patches, iv, ffn);
        }
        self.final_norm(g, x, Module::Language)
    }

    fn head_nodes(&self, g: &mut Graph, rows: NodeId) -> NodeId {
        let w = g.input("head.weight");
        let b = g.input("head.bias");
        let y = g.matmul_t(rows, w);
        g.add(y, b)
    }

    fn final_norm(&self, g: &mut Graph, x: NodeId, module: Module) -> NodeId {
        let gamma = g.input(format!("{}.ln_f.gamma", module.name()));
        let beta = g.input(format!("{}.ln_f.beta", module.name()));
        g.layer_norm(x, gamma, beta)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_nodes(
        &self,
        g: &mut Graph,
        x: NodeId,
        module: Module,
        block: usize,
        len: usize,
        prefix: usize,
        iv: &Intervention,
        ffn: &mut Vec<(LayerId, NodeId)>,
    ) -> NodeId {
        let p = block_prefix(module, block);
        let c = &self.config;
        let dh = c.head_dim();

        let gamma = g.input(format!("{p}.ln1.gamma"));
        let beta = g.input(format!("{p}.ln1.beta"));
        let h = g.layer_norm(x, gamma, beta);
        let wq = g.input(format!("{p}.attn.wq"));
        let wk = g.input(format!("{p}.attn.wk"));
        let wv = g.input(format!("{p}.attn.wv"));
        let q = g.matmul_t(h, wq);
        let k = g.matmul_t(h, wk);
        let v = g.matmul_t(h, wv);
        let mut heads = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let qh = g.slice(q, 1, head * dh, dh);
            let kh = g.slice(k, 1, head * dh, dh);
            let vh = g.slice(v, 1, head * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f32).sqrt());
            let a = g.softmax(s, prefix.min(len));
            heads.push(g.matmul(a, vh));
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat(heads, 1) };
        let wo = g.input(format!("{p}.attn.wo"));
        let o = g.matmul_t(o, wo);
        let x = g.add(x, o);

        let gamma = g.input(format!("{p}.ln2.gamma"));
        let beta = g.input(format!("{p}.ln2.beta"));
        let h = g.layer_norm(x, gamma, beta);
        let names = ffn_params(module, block);
        let w_in = g.input(names.w_in);
        let b_in = g.input(names.b_in);
        let u = g.matmul_t(h, w_in);
        let u = g.add(u, b_in);
        let mut act = g.gelu(u);
        if let Some(scale) = iv.unit_scale.get(&(module, block)) {
            let m = g.constant(Tensor::vector(scale.clone()).expect("non-empty unit scale"));
            act = g.mul(act, m);
        }
        if let Some(off) = iv.unit_offset.get(&(module, block)) {
            let o = g.constant(off.clone());
            act = g.add(act, o);
        }
        ffn.push(((module, block), act));
        let w_out = g.input(names.w_out);
        let b_out = g.input(names.b_out);
        let y = g.matmul_t(act, w_out);
        let y = g.add(y, b_out);
        g.add(x, y)
    }
}

pub fn list_neurons(config: &ModelConfig) -> Vec<NeuronId> {
    let mut out = Vec::with_capacity(config.neuron_count());
    for module in Module::ALL {
        for block in 0..config.blocks(module) {
            for unit in 0..config.d_ffn {
                out.push(NeuronId { module, block, unit });
            }
        }
    }
    out
}

/// Every parameter name with its shape, in a fixed order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("vision.patch_embed.weight".into(), vec![d, c.patch_rows * c.patch_cols]),
        ("vision.patch_embed.bias".into(), vec![d]),
        ("vision.pos_embed".into(), vec![c.max_image_patches, d]),
    ];
    for module in Module::ALL {
        for b in 0..c.blocks(module) {
            let p = block_prefix(module, b);
            v.push((format!("{p}.ln1.gamma"), vec![d]));
            v.push((format!("{p}.ln1.beta"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                v.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            v.push((format!("{p}.ln2.gamma"), vec![d]));
            v.push((format!("{p}.ln2.beta"), vec![d]));
            let f = ffn_params(module, b);
            v.push((f.w_in, vec![c.d_ffn, d]));
            v.push((f.b_in, vec![c.d_ffn]));
            v.push((f.w_out, vec![d, c.d_ffn]));
            v.push((f.b_out, vec![d]));
        }
        v.push((format!("{}.ln_f.gamma", module.name()), vec![d]));
        v.push((format!("{}.ln_f.beta", module.name()), vec![d]));
    }
    v.push(("connector.weight".into(), vec![d, d]));
    v.push(("connector.bias".into(), vec![d]));
    v.push(("language.tok_embed".into(), vec![c.vocab_size, d]));
    v.push(("language.pos_embed".into(), vec![c.max_seq, d]));
    v.push(("head.weight".into(), vec![c.vocab_size, d]));
    v.push(("head.bias".into(), vec![c.vocab_size]));
    v
}
