//! Per-unit awareness scores, layer relevance and layer selection, plus the
//! exact-ablation oracle the scores are checked against.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, TapHandle};
use crate::error::{Error, Result};
use crate::model::{Intervention, LayerId, Model, Module, NeuronId};
use crate::synthtask::{instruction_tokens, supervision, InstructionKind, Sample, TaskSpec};

/// Which probe instruction drives the scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringKind {
    #[default]
    Translate,
    OcrProbe,
    /// Average of the translate and ocr-probe scores.
    Both,
}

/// How the per-position products `g_p · h_p` of one sample are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionReduction {
    /// `|Σ_p g_p · h_p|`: the first-order estimate of the loss change when the unit is zeroed everywhere.
    #[default]
    InnerProduct,
    /// `mean_p |g_p · h_p|`.
    MeanAbs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub kind: ScoringKind,
    pub reduction: PositionReduction,
    /// Multiplies the loss before differentiation.
    pub loss_scale: Option<f32>,
}

fn kinds(kind: ScoringKind) -> &'static [InstructionKind] {
    match kind {
        ScoringKind::Translate => &[InstructionKind::Translate],
        ScoringKind::OcrProbe => &[InstructionKind::OcrProbe],
        ScoringKind::Both => &[InstructionKind::Translate, InstructionKind::OcrProbe],
    }
}

/// Awareness score of every unit, in `list_neurons` order, averaged over `samples`.
pub fn neuron_awareness(model: &Model, task: &TaskSpec, samples: &[Sample], opts: &ScoreOptions) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Validation("scoring set is empty".into()));
    }
    let mut frozen = model.clone();
    frozen.set_trainable(|_| false);
    let kinds = kinds(opts.kind);
    let mut total = vec![0.0f64; model.config().neuron_count()];
    for &kind in kinds {
        let instr = instruction_tokens(task, kind);
        for sample in samples {
            let phi = sample_awareness(&frozen, sample, &instr, supervision(sample, kind), opts)?;
            for (t, p) in total.iter_mut().zip(phi) {
                *t += p;
            }
        }
    }
    let n = (samples.len() * kinds.len()) as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}

/// Scores of one sample. `model` should have no trainable parameters so only tap gradients are formed.
pub fn sample_awareness(
    model: &Model,
    sample: &Sample,
    instruction: &[u32],
    target: &[u32],
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let iv = Intervention { loss_scale: opts.loss_scale, ..Intervention::default() };
    let mut it = model.build_it_graph(&sample.grid, instruction, target, &iv)?;
    let taps: Vec<TapHandle> =
        it.ffn.iter().map(|&(_, node)| it.graph.register_tap(node)).collect::<Result<_>>()?;
    let (_, mut tape) = autodiff::forward(&it.graph, model)?;
    autodiff::backward(&mut tape, it.loss)?;

    let d_ffn = model.config().d_ffn;
    let mut out = Vec::with_capacity(taps.len() * d_ffn);
    for tap in taps {
        let h = tape.tap_value(tap)?;
        let g = tape.tap_gradient(tap)?;
        let positions = h.shape()[0];
        let mut acc = vec![0.0f64; d_ffn];
        for p in 0..positions {
            let (hr, gr) = (h.row(p), g.row(p));
            for u in 0..d_ffn {
                let prod = gr[u] as f64 * hr[u] as f64;
                acc[u] += match opts.reduction {
                    PositionReduction::InnerProduct => prod,
                    PositionReduction::MeanAbs => prod.abs(),
                };
            }
        }
        out.extend(acc.into_iter().map(|a| match opts.reduction {
            PositionReduction::InnerProduct => a.abs(),
            PositionReduction::MeanAbs => a / positions as f64,
        }));
    }
    Ok(out)
}

/// Tasks × units awareness matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub tasks: Vec<usize>,
    pub neurons: Vec<NeuronId>,
    /// `values[t][i]`, one row per task.
    pub values: Vec<Vec<f64>>,
    pub set_size: usize,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.tasks.len() {
            return Err(Error::Validation("score matrix row count differs from task count".into()));
        }
        for row in &self.values {
            if row.len() != self.neurons.len() {
                return Err(Error::Validation("score matrix row length differs from neuron count".into()));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Validation("score matrix entries must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    /// Column indices of the units of `layer`, in unit order.
    pub fn layer_columns(&self, layer: LayerId) -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = self
            .neurons
            .iter()
            .enumerate()
            .filter(|(_, n)| (n.module, n.block) == layer)
            .map(|(i, n)| (n.unit, i))
            .collect();
        cols.sort_unstable();
        cols.into_iter().map(|(_, i)| i).collect()
    }

    /// Scores of one neuron across tasks.
    pub fn column(&self, col: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[col]).collect()
    }

    pub fn layers(&self) -> Vec<LayerId> {
        let mut out: Vec<LayerId> = Vec::new();
        for n in &self.neurons {
            if !out.contains(&(n.module, n.block)) {
                out.push((n.module, n.block));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,block,unit");
        for t in &self.tasks {
            write!(s, ",task_{t}").unwrap();
        }
        s.push('\n');
        for (i, n) in self.neurons.iter().enumerate() {
            write!(s, "{},{},{}", n.module, n.block, n.unit).unwrap();
            for row in &self.values {
                write!(s, ",{:.16e}", row[i]).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, set_size: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty score csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..3] != ["module", "block", "unit"] {
            return Err(Error::Format("bad score csv header".into()));
        }
        let tasks = cols[3..]
            .iter()
            .map(|c| c.strip_prefix("task_").and_then(|n| n.parse().ok()))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| Error::Format("bad task column name".into()))?;
        let mut neurons = Vec::new();
        let mut values = vec![Vec::new(); tasks.len()];
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 + tasks.len() {
                return Err(Error::Format(format!("score csv row has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
            neurons.push(NeuronId { module: Module::parse(f[0])?, block: num(f[1])?, unit: num(f[2])? });
            for (t, v) in f[3..].iter().enumerate() {
                values[t].push(v.parse::<f64>().map_err(|_| Error::Format(format!("bad float {v:?}")))?);
            }
        }
        let m = Self { tasks, neurons, values, set_size };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path, set_size: usize) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, set_size)
    }
}

/// One row per task, scored on that task's own scoring set.
pub fn build_score_matrix(model: &Model, tasks: &[TaskSpec], sets: &[Vec<Sample>], opts: &ScoreOptions) -> Result<ScoreMatrix> {
    if tasks.len() != sets.len() {
        return Err(Error::Validation(format!("{} tasks but {} scoring sets", tasks.len(), sets.len())));
    }
    let set_size = sets.first().map_or(0, Vec::len);
    if sets.iter().any(|s| s.len() != set_size) {
        return Err(Error::Validation("scoring sets differ in size".into()));
    }
    let values = tasks.iter().zip(sets).map(|(t, s)| neuron_awareness(model, t, s, opts)).collect::<Result<_>>()?;
    let m = ScoreMatrix { tasks: tasks.iter().map(|t| t.id).collect(), neurons: model.list_neurons(), values, set_size };
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub module: Module,
    pub block: usize,
    pub d: f64,
    pub d_hat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRelevance {
    pub layers: Vec<LayerScore>,
}

impl LayerRelevance {
    pub fn module(&self, module: Module) -> Vec<&LayerScore> {
        self.layers.iter().filter(|l| l.module == module).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,block,D,D_hat\n");
        for l in &self.layers {
            writeln!(s, "{},{},{:.16e},{:.16e}", l.module, l.block, l.d, l.d_hat).unwrap();
        }
        s
    }
}

/// Mean over a block's units of the mean-over-tasks score, normalised to sum to one per module.
pub fn layer_relevance(x: &ScoreMatrix) -> LayerRelevance {
    let n_tasks = x.tasks.len().max(1) as f64;
    let mut layers: Vec<LayerScore> = x
        .layers()
        .into_iter()
        .map(|layer| {
            let cols = x.layer_columns(layer);
            let sum: f64 = cols.iter().map(|&c| x.column(c).iter().sum::<f64>() / n_tasks).sum();
            LayerScore { module: layer.0, block: layer.1, d: sum / cols.len() as f64, d_hat: 0.0 }
        })
        .collect();
    for module in Module::ALL {
        let total: f64 = layers.iter().filter(|l| l.module == module).map(|l| l.d).sum();
        let count = layers.iter().filter(|l| l.module == module).count() as f64;
        for l in layers.iter_mut().filter(|l| l.module == module) {
            l.d_hat = if total > 0.0 { l.d / total } else { 1.0 / count };
        }
    }
    LayerRelevance { layers }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedLayers {
    pub vision: Vec<usize>,
    pub language: Vec<usize>,
    pub k_vision: usize,
    pub k_llm: usize,
}

impl SelectedLayers {
    /// Vision blocks first, ascending within each module.
    pub fn layers(&self) -> Vec<LayerId> {
        let v = self.vision.iter().map(|&b| (Module::Vision, b));
        v.chain(self.language.iter().map(|&b| (Module::Language, b))).collect()
    }

    pub fn contains(&self, layer: LayerId) -> bool {
        match layer.0 {
            Module::Vision => self.vision.contains(&layer.1),
            Module::Language => self.language.contains(&layer.1),
        }
    }
}

/// Top-`k` blocks of each module by normalised relevance; ties go to the lower block.
pub fn select_layers(rel: &LayerRelevance, k_vision: usize, k_llm: usize) -> Result<SelectedLayers> {
    if k_vision == 0 || k_llm == 0 {
        return Err(Error::Validation("layer budgets must be >= 1".into()));
    }
    let top = |module: Module, k: usize| {
        let mut blocks: Vec<(usize, f64)> = rel.module(module).iter().map(|l| (l.block, l.d_hat)).collect();
        blocks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> = blocks.into_iter().take(k).map(|(b, _)| b).collect();
        chosen.sort_unstable();
        chosen
    };
    Ok(SelectedLayers { vision: top(Module::Vision, k_vision), language: top(Module::Language, k_llm), k_vision, k_llm })
}

/// `f(ablated) − f(baseline)` for any loss function parameterised by an optional ablated unit.
pub fn ablation_delta(unit: usize, mut loss: impl FnMut(Option<usize>) -> Result<f64>) -> Result<f64> {
    let ablated = loss(Some(unit))?;
    let base = loss(None)?;
    Ok(ablated - base)
}

/// Mean loss over `samples` with `neuron` forced to zero, minus the mean baseline loss.
pub fn exact_ablation(model: &Model, neuron: NeuronId, task: &TaskSpec, samples: &[Sample], kind: InstructionKind) -> Result<f64> {
    let base = mean_loss(model, task, samples, kind, &Intervention::default())?;
    let ablated = mean_loss(model, task, samples, kind, &Intervention::ablate(model.config(), neuron))?;
    Ok(ablated - base)
}

/// Exact ablation of every unit of `layer`, reusing one baseline.
pub fn layer_ablation(model: &Model, layer: LayerId, task: &TaskSpec, samples: &[Sample], kind: InstructionKind) -> Result<Vec<f64>> {
    let base = mean_loss(model, task, samples, kind, &Intervention::default())?;
    (0..model.config().d_ffn)
        .map(|unit| {
            let n = NeuronId { module: layer.0, block: layer.1, unit };
            Ok(mean_loss(model, task, samples, kind, &Intervention::ablate(model.config(), n))? - base)
        })
        .collect()
}

fn mean_loss(model: &Model, task: &TaskSpec, samples: &[Sample], kind: InstructionKind, iv: &Intervention) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("scoring set is empty".into()));
    }
    let instr = instruction_tokens(task, kind);
    let mut sum = 0.0;
    for s in samples {
        sum += model.loss_with(&s.grid, &instr, supervision(s, kind), iv)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Agreement between awareness scores and exact ablation over the units of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub module: Module,
    pub block: usize,
    pub samples: usize,
    pub spearman: f64,
    /// Mean `|ΔL|` of the top and bottom tenth of units ranked by score.
    pub top_decile: f64,
    pub bottom_decile: f64,
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
}

impl FidelityReport {
    pub fn decile_ratio(&self) -> f64 {
        if self.bottom_decile == 0.0 {
            return f64::INFINITY;
        }
        self.top_decile / self.bottom_decile
    }
}

pub fn fidelity_check(model: &Model, layer: LayerId, task: &TaskSpec, samples: &[Sample], opts: &ScoreOptions) -> Result<FidelityReport> {
    let phi_all = neuron_awareness(model, task, samples, opts)?;
    let neurons = model.list_neurons();
    let phi: Vec<f64> =
        neurons.iter().zip(&phi_all).filter(|(n, _)| (n.module, n.block) == layer).map(|(_, &p)| p).collect();
    let delta: Vec<f64> =
        layer_ablation(model, layer, task, samples, InstructionKind::Translate)?.into_iter().map(f64::abs).collect();
    let mut idx: Vec<usize> = (0..phi.len()).collect();
    idx.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    let tenth = (phi.len() / 10).max(1);
    let mean_of = |ids: &[usize]| ids.iter().map(|&i| delta[i]).sum::<f64>() / ids.len() as f64;
    Ok(FidelityReport {
        module: layer.0,
        block: layer.1,
        samples: samples.len(),
        spearman: spearman(&phi, &delta),
        top_decile: mean_of(&idx[..tenth]),
        bottom_decile: mean_of(&idx[idx.len() - tenth..]),
        phi,
        delta,
    })
}

/// Most relevant block of `module`; ties go to the lower block.
pub fn most_relevant(rel: &LayerRelevance, module: Module) -> Option<LayerId> {
    rel.module(module)
        .into_iter()
        .fold(None::<&LayerScore>, |best, l| match best {
            Some(b) if b.d_hat >= l.d_hat => Some(b),
            _ => Some(l),
        })
        .map(|l| (l.module, l.block))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{forward, Graph, NoBindings};
    use crate::model::{list_neurons, ModelConfig};
    use crate::synthtask::{make_languages, ring_tasks, sample_dataset, Split};
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 2, d_ffn: 8, vision_blocks: 1, language_blocks: 2, ..ModelConfig::default() }
    }

    fn setup(n: usize) -> (Model, TaskSpec, Vec<Sample>) {
        let c = tiny();
        let model = Model::init(&c, 3).unwrap();
        let tasks = ring_tasks(&make_languages(3, 1).unwrap()).unwrap();
        let samples = sample_dataset(&tasks[0], n, 5, Split::Score, c.patch_cols).unwrap();
        (model, tasks[0].clone(), samples)
    }

    fn rel(vision: &[f64], language: &[f64]) -> LayerRelevance {
        let mut layers = Vec::new();
        for (m, v) in [(Module::Vision, vision), (Module::Language, language)] {
            for (b, &x) in v.iter().enumerate() {
                layers.push(LayerScore { module: m, block: b, d: x, d_hat: x });
            }
        }
        LayerRelevance { layers }
    }

    #[test]
    fn direct_formula_on_single_product() {
        // g = 0.5, h = 2 at a single position
        let mut g = Graph::new();
        let h = g.constant(Tensor::scalar(2.0));
        let loss = g.scale(h, 0.5);
        let tap = g.register_tap(h).unwrap();
        let (_, mut tape) = forward(&g, &NoBindings).unwrap();
        autodiff::backward(&mut tape, loss).unwrap();
        let phi = (tape.tap_gradient(tap).unwrap().item() as f64 * tape.tap_value(tap).unwrap().item() as f64).abs();
        assert_eq!(phi, 1.0);
    }

    #[test]
    fn scores_are_non_negative_and_scale_with_loss() {
        let (model, task, samples) = setup(2);
        let opts = ScoreOptions::default();
        let phi = neuron_awareness(&model, &task, &samples, &opts).unwrap();
        assert_eq!(phi.len(), model.config().neuron_count());
        assert!(phi.iter().all(|&p| p >= 0.0 && p.is_finite()));
        let doubled = neuron_awareness(&model, &task, &samples, &ScoreOptions { loss_scale: Some(2.0), ..opts }).unwrap();
        for (a, b) in phi.iter().zip(&doubled) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn dead_unit_scores_zero() {
        let (mut model, task, samples) = setup(2);
        let names = crate::model::ffn_params(Module::Language, 1);
        // unit 3: zero incoming row and a bias that puts GELU exactly at zero
        let d = model.config().d_model;
        model.param_mut(&names.w_in).unwrap().data_mut()[3 * d..4 * d].fill(0.0);
        model.param_mut(&names.b_in).unwrap().data_mut()[3] = 0.0;
        let phi = neuron_awareness(&model, &task, &samples, &ScoreOptions::default()).unwrap();
        let idx = model.list_neurons().iter().position(|n| *n == NeuronId { module: Module::Language, block: 1, unit: 3 });
        assert_eq!(phi[idx.unwrap()], 0.0);
    }

    #[test]
    fn zero_outgoing_column_gives_zero_delta() {
        let (mut model, task, samples) = setup(2);
        let names = crate::model::ffn_params(Module::Language, 0);
        let (d, f) = (model.config().d_model, model.config().d_ffn);
        let w = model.param_mut(&names.w_out).unwrap().data_mut();
        for r in 0..d {
            w[r * f + 5] = 0.0;
        }
        let n = NeuronId { module: Module::Language, block: 0, unit: 5 };
        assert_eq!(exact_ablation(&model, n, &task, &samples, InstructionKind::Translate).unwrap(), 0.0);
        let identity = ablation_delta(0, |_| mean_loss(&model, &task, &samples, InstructionKind::Translate, &Intervention::default()));
        assert_eq!(identity.unwrap(), 0.0);
    }

    #[test]
    fn matrix_rows_match_standalone_calls_and_round_trip() {
        let c = tiny();
        let model = Model::init(&c, 3).unwrap();
        let tasks = ring_tasks(&make_languages(3, 1).unwrap()).unwrap();
        let sets: Vec<Vec<Sample>> =
            tasks.iter().map(|t| sample_dataset(t, 2, 9, Split::Score, c.patch_cols).unwrap()).collect();
        let opts = ScoreOptions::default();
        let x = build_score_matrix(&model, &tasks, &sets, &opts).unwrap();
        assert_eq!((x.values.len(), x.values[0].len()), (3, c.neuron_count()));
        assert_eq!(x.values[1], neuron_awareness(&model, &tasks[1], &sets[1], &opts).unwrap());
        assert_eq!(ScoreMatrix::from_csv(&x.to_csv(), 2).unwrap(), x);
        assert!(build_score_matrix(&model, &tasks, &sets[..2], &opts).is_err());
        let mut uneven = sets.clone();
        uneven[2].pop();
        assert!(build_score_matrix(&model, &tasks, &uneven, &opts).is_err());
    }

    #[test]
    fn relevance_normalisation() {
        let c = ModelConfig { vision_blocks: 3, ..tiny() };
        let neurons = list_neurons(&c);
        let x = ScoreMatrix { tasks: vec![0, 1], neurons: neurons.clone(), values: vec![vec![0.7; neurons.len()]; 2], set_size: 1 };
        let r = layer_relevance(&x);
        for l in &r.layers {
            let blocks = c.blocks(l.module) as f64;
            assert!((l.d_hat - 1.0 / blocks).abs() < 1e-12);
        }
        let values: Vec<f64> =
            neurons.iter().map(|n| if n.module == Module::Vision && n.block != 1 { 0.0 } else { 0.3 }).collect();
        let x = ScoreMatrix { tasks: vec![0], neurons, values: vec![values], set_size: 1 };
        let r = layer_relevance(&x);
        assert_eq!(r.module(Module::Vision)[1].d_hat, 1.0);
        assert_eq!(r.module(Module::Vision)[0].d_hat, 0.0);
    }

    #[test]
    fn selection_examples() {
        let s = select_layers(&rel(&[0.5, 0.3, 0.2], &[1.0]), 2, 1).unwrap();
        assert_eq!(s.vision, vec![0, 1]);
        let s = select_layers(&rel(&[0.4, 0.4, 0.2], &[1.0]), 1, 1).unwrap();
        assert_eq!(s.vision, vec![0]);
        let s = select_layers(&rel(&[0.2, 0.8], &[0.5, 0.5]), 5, 2).unwrap();
        assert_eq!((s.vision, s.language), (vec![0, 1], vec![0, 1]));
        assert!(select_layers(&rel(&[1.0], &[1.0]), 0, 1).is_err());
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
