//! Gradient masks over model parameters and the masked SGD training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::model::{ffn_params, LayerId, Model, Module, PixelGrid};
use crate::neuronscore::SelectedLayers;
use crate::partition::NeuronPartition;
use crate::synthtask::{instruction_tokens, supervision, InstructionKind, Sample, TaskSpec};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    Mnaft,
    Full,
    AllLayers,
    LanguageLayers,
    VisionLayers,
    GeneralOnly,
    SpecificOnly,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 7] = [
        FinetuneMode::Mnaft,
        FinetuneMode::Full,
        FinetuneMode::AllLayers,
        FinetuneMode::LanguageLayers,
        FinetuneMode::VisionLayers,
        FinetuneMode::GeneralOnly,
        FinetuneMode::SpecificOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FinetuneMode::Mnaft => "mnaft",
            FinetuneMode::Full => "full",
            FinetuneMode::AllLayers => "all-layers",
            FinetuneMode::LanguageLayers => "language-layers",
            FinetuneMode::VisionLayers => "vision-layers",
            FinetuneMode::GeneralOnly => "general-only",
            FinetuneMode::SpecificOnly => "specific-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown fine-tune mode {s:?}")))
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub mode: String,
    pub target_task: Option<usize>,
    pub partition_hash: Option<String>,
}

/// One 0/1 mask per model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMaskSet {
    pub masks: BTreeMap<String, Tensor>,
    pub provenance: MaskProvenance,
}

impl GradientMaskSet {
    pub fn filled(model: &Model, value: f32, provenance: MaskProvenance) -> Self {
        let masks = model
            .params()
            .iter()
            .map(|(name, p)| (name.clone(), Tensor::full(p.shape().to_vec(), value)))
            .collect();
        Self { masks, provenance }
    }

    /// Unmasks row `unit` of the input weight, `unit` of the input bias and, unless `incoming_only`,
    /// column `unit` of the output weight.
    pub fn unmask_unit(&mut self, model: &Model, layer: LayerId, unit: usize, incoming_only: bool) -> Result<()> {
        let c = model.config();
        if layer.1 >= c.blocks(layer.0) {
            return Err(Error::Validation(format!("{} block {} does not exist", layer.0, layer.1)));
        }
        if unit >= c.d_ffn {
            return Err(Error::Validation(format!("unit {unit} out of range for d_ffn {}", c.d_ffn)));
        }
        let (d, f) = (c.d_model, c.d_ffn);
        let names = ffn_params(layer.0, layer.1);
        let m = self.mask_mut(&names.w_in)?;
        m[unit * d..(unit + 1) * d].fill(1.0);
        self.mask_mut(&names.b_in)?[unit] = 1.0;
        if !incoming_only {
            let m = self.mask_mut(&names.w_out)?;
            for r in 0..d {
                m[r * f + unit] = 1.0;
            }
        }
        Ok(())
    }

    fn mask_mut(&mut self, name: &str) -> Result<&mut [f32]> {
        Ok(self.masks.get_mut(name).ok_or_else(|| Error::Validation(format!("no mask for {name}")))?.data_mut())
    }

    pub fn ones(&self) -> usize {
        self.masks.values().map(|m| m.data().iter().filter(|&&v| v == 1.0).count()).sum()
    }

    /// Parameters whose mask has at least one 1.
    pub fn active(&self) -> BTreeSet<String> {
        self.masks.iter().filter(|(_, m)| m.data().iter().any(|&v| v != 0.0)).map(|(n, _)| n.clone()).collect()
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.masks.len() != model.params().len() {
            return Err(Error::Validation("mask set does not cover the model".into()));
        }
        for (name, p) in model.params() {
            let m = self.masks.get(name).ok_or_else(|| Error::Validation(format!("no mask for {name}")))?;
            if m.shape() != p.shape() {
                return Err(Error::Validation(format!("mask shape {:?} differs from {name} {:?}", m.shape(), p.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!("mask for {name} is not binary")));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        Container { meta: serde_json::to_string(&self.provenance).expect("provenance serialises"), tensors: self.masks.clone() }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let provenance = serde_json::from_str(&c.meta)?;
        Ok(Self { masks: c.tensors, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

fn units_mask(
    model: &Model,
    units: &BTreeMap<LayerId, BTreeSet<usize>>,
    incoming_only: bool,
    provenance: MaskProvenance,
) -> Result<GradientMaskSet> {
    let mut set = GradientMaskSet::filled(model, 0.0, provenance);
    for (&layer, us) in units {
        for &u in us {
            set.unmask_unit(model, layer, u, incoming_only)?;
        }
    }
    Ok(set)
}

fn provenance(mode: FinetuneMode, target: Option<usize>, partition: Option<&NeuronPartition>) -> MaskProvenance {
    MaskProvenance { mode: mode.name().into(), target_task: target, partition_hash: partition.map(NeuronPartition::content_hash) }
}

/// Masks for `A_l ∪ S_{l,target}` over the partition's layers.
pub fn masks_from_partition(
    partition: &NeuronPartition,
    target_task: usize,
    model: &Model,
    incoming_only: bool,
) -> Result<GradientMaskSet> {
    let units = partition
        .layers
        .iter()
        .map(|l| (l.layer(), l.general.iter().chain(l.specific_for(target_task)).copied().collect()))
        .collect();
    units_mask(model, &units, incoming_only, provenance(FinetuneMode::Mnaft, Some(target_task), Some(partition)))
}

pub fn ablation_mode_masks(
    mode: FinetuneMode,
    partition: &NeuronPartition,
    target_task: usize,
    model: &Model,
    incoming_only: bool,
) -> Result<GradientMaskSet> {
    let c = model.config();
    let every = |modules: &[Module]| -> BTreeMap<LayerId, BTreeSet<usize>> {
        modules.iter().flat_map(|&m| (0..c.blocks(m)).map(move |b| ((m, b), (0..c.d_ffn).collect()))).collect()
    };
    let prov = provenance(mode, Some(target_task), Some(partition));
    let units: BTreeMap<LayerId, BTreeSet<usize>> = match mode {
        FinetuneMode::Mnaft => return masks_from_partition(partition, target_task, model, incoming_only),
        FinetuneMode::Full => return Ok(GradientMaskSet::filled(model, 1.0, prov)),
        FinetuneMode::AllLayers => every(&Module::ALL),
        FinetuneMode::LanguageLayers => every(&[Module::Language]),
        FinetuneMode::VisionLayers => every(&[Module::Vision]),
        FinetuneMode::GeneralOnly => {
            partition.layers.iter().map(|l| (l.layer(), l.general.iter().copied().collect())).collect()
        }
        FinetuneMode::SpecificOnly => {
            partition.layers.iter().map(|l| (l.layer(), l.specific_for(target_task).iter().copied().collect())).collect()
        }
    };
    units_mask(model, &units, incoming_only, prov)
}

/// Units trainable under `A_l ∪ S_{l,target}` times the parameters each unit owns.
pub fn expected_mnaft_ones(partition: &NeuronPartition, target_task: usize, d_model: usize) -> usize {
    partition.layers.iter().map(|l| (l.general.len() + l.specific_for(target_task).len()) * (2 * d_model + 1)).sum()
}

/// Selected layers restricted to those the partition covers.
pub fn partition_layers(partition: &NeuronPartition) -> SelectedLayers {
    let pick = |m: Module| partition.layers.iter().filter(|l| l.module == m).map(|l| l.block).collect::<Vec<_>>();
    let (vision, language) = (pick(Module::Vision), pick(Module::Language));
    SelectedLayers { k_vision: vision.len(), k_llm: language.len(), vision, language }
}

/// `W ← W − α·(∇W ⊙ M)`. Elements with `M = 0` are skipped, so they keep their exact bits.
pub fn masked_update(model: &mut Model, grads: &BTreeMap<String, Tensor>, masks: &GradientMaskSet, lr: f32) -> Result<()> {
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let mask = masks.masks.get(&name).ok_or_else(|| Error::Validation(format!("no mask for {name}")))?;
        let param = model.param_mut(&name).expect("name from the model");
        if mask.shape() != param.shape() {
            return Err(Error::Validation(format!("mask shape {:?} differs from {name} {:?}", mask.shape(), param.shape())));
        }
        let Some(grad) = grads.get(&name) else {
            if mask.data().iter().any(|&m| m != 0.0) {
                return Err(Error::Validation(format!("no gradient for unmasked parameter {name}")));
            }
            continue;
        };
        if grad.shape() != param.shape() {
            return Err(Error::Validation(format!("gradient shape {:?} differs from {name} {:?}", grad.shape(), param.shape())));
        }
        for ((w, &g), &m) in param.data_mut().iter_mut().zip(grad.data()).zip(mask.data()) {
            if m != 0.0 {
                *w -= lr * (g * m);
            }
        }
    }
    Ok(())
}

/// Number of masked-out elements whose bits differ between `before` and `after`.
pub fn frozen_violations(before: &Model, after: &Model, masks: &GradientMaskSet) -> usize {
    let mut n = 0;
    for (name, b) in before.params() {
        let (Some(a), Some(m)) = (after.param(name), masks.masks.get(name)) else {
            n += b.numel();
            continue;
        };
        n += b.data().iter().zip(a.data()).zip(m.data()).filter(|((x, y), &k)| k == 0.0 && x.to_bits() != y.to_bits()).count();
    }
    n
}

/// Adam state for the masked variant; moments of masked elements stay zero.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

pub fn masked_adam_update(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    masks: &GradientMaskSet,
    lr: f32,
    (beta1, beta2, eps): (f32, f32, f32),
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let (c1, c2) = (1.0 - beta1.powi(state.step), 1.0 - beta2.powi(state.step));
    for (name, grad) in grads {
        let mask = masks.masks.get(name).ok_or_else(|| Error::Validation(format!("no mask for {name}")))?;
        let param = model.param_mut(name).ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        if grad.shape() != param.shape() || mask.shape() != param.shape() {
            return Err(Error::Validation(format!("shape mismatch for {name}")));
        }
        let n = grad.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (j, w) in param.data_mut().iter_mut().enumerate() {
            if mask.data()[j] == 0.0 {
                continue;
            }
            let g = grad.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub target_task: usize,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Unmask only the incoming row and bias of selected units.
    pub incoming_only: bool,
    /// Stop early once the mean loss of the last `STOP_WINDOW` steps falls to this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_loss: Option<f64>,
}

pub const STOP_WINDOW: usize = 100;

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Mnaft,
            target_task: 0,
            lr: 0.1,
            steps: 1000,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Sgd,
            incoming_only: false,
            stop_loss: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One teacher-forced training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub grid: PixelGrid,
    pub instruction: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

pub fn examples(task: &TaskSpec, samples: &[Sample], kind: InstructionKind) -> Vec<TrainExample> {
    let instruction = instruction_tokens(task, kind);
    samples
        .iter()
        .map(|s| TrainExample { grid: s.grid.clone(), instruction: instruction.clone(), target: supervision(s, kind).to_vec() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub task: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    /// Mean batch loss before each step's update.
    pub loss: Vec<f64>,
    /// Wall-clock seconds since the start of the run, after each step.
    pub seconds: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,seconds\n");
        for (i, (l, t)) in self.loss.iter().zip(&self.seconds).enumerate() {
            writeln!(s, "{},{:.16e},{:.3}", i + 1, l, t).unwrap();
        }
        s
    }
}

/// Mean loss and mean gradients over `batch`, reduced in batch order.
pub fn batch_gradients(model: &Model, batch: &[&TrainExample]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    for ex in batch {
        let it = model.build_it_graph(&ex.grid, &ex.instruction, &ex.target, &Default::default())?;
        let (_, mut tape) = autodiff::forward(&it.graph, model)?;
        loss += tape.loss_f64(it.loss)?;
        let grads = autodiff::backward(&mut tape, it.loss)?;
        for (name, g) in grads.params {
            let acc = sums.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a += v as f64;
            }
        }
    }
    let n = batch.len() as f64;
    let grads = sums
        .into_iter()
        .map(|(name, acc)| {
            let shape = model.param(&name).expect("gradient of a model parameter").shape().to_vec();
            let data = acc.into_iter().map(|a| (a / n) as f32).collect();
            (name, Tensor::new(shape, data).expect("shape matches"))
        })
        .collect();
    Ok((loss / n, grads))
}

/// Called every step with `(step, model)`; returned points are appended to the log.
pub type EvalHook<'a> = dyn FnMut(usize, &Model) -> Result<Vec<EvalPoint>> + 'a;

pub fn finetune(model: &Model, data: &[TrainExample], config: &FinetuneConfig, masks: &GradientMaskSet) -> Result<(Model, TrainLog)> {
    finetune_with_hook(model, data, config, masks, &mut |_, _| Ok(Vec::new()))
}

pub fn finetune_with_hook(
    model: &Model,
    data: &[TrainExample],
    config: &FinetuneConfig,
    masks: &GradientMaskSet,
    hook: &mut EvalHook<'_>,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    masks.validate(model)?;
    let active = masks.active();
    let mut model = model.clone();
    model.set_trainable(|name| active.contains(name));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let mut adam = AdamState::default();
    let start = Instant::now();
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(&data[order.pop().expect("refilled")]);
        }
        let (loss, grads) = batch_gradients(&model, &batch)?;
        match config.optimizer {
            Optimizer::Sgd => masked_update(&mut model, &grads, masks, config.lr)?,
            Optimizer::Adam { beta1, beta2, eps } => {
                masked_adam_update(&mut model, &grads, masks, config.lr, (beta1, beta2, eps), &mut adam)?
            }
        }
        log.loss.push(loss);
        log.seconds.push(start.elapsed().as_secs_f64());
        log.evals.extend(hook(step, &model)?);
        if let Some(target) = config.stop_loss {
            let n = log.loss.len();
            if n >= STOP_WINDOW && log.loss[n - STOP_WINDOW..].iter().sum::<f64>() / STOP_WINDOW as f64 <= target {
                break;
            }
        }
    }
    model.set_trainable(|_| true);
    Ok((model, log))
}
