//! Staged experiment runner. Every stage reads the outputs of earlier stages,
//! checks them against the hashes recorded in their manifests, and records a
//! manifest of its own.
//!
//! ```text
//! gen-data → train-base → score → partition → finetune → eval → report
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalreport::{
    activation_profiles, evaluate, forgetting_from_results, neuron_projection, profile_svg,
    projection_svg, EvalResult, ForgettingReport, NeuronGroup,
};
use crate::maskedft::{
    ablation_mode_masks, examples, expected_mnaft_ones, finetune, frozen_violations, FinetuneConfig, FinetuneMode,
    GradientMaskSet, MaskProvenance,
};
use crate::model::{Model, ModelConfig, Module};
use crate::neuronscore::{
    build_score_matrix, fidelity_check, layer_relevance, most_relevant, select_layers, PositionReduction, ScoreMatrix,
    ScoreOptions, ScoringKind, SelectedLayers,
};
use crate::partition::{build_partition, NeuronPartition};
use crate::synthtask::{derive_seed, dump_dataset, load_dataset, make_languages, ring_tasks, sample_dataset, InstructionKind, Sample, Split, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub languages: usize,
    pub train: usize,
    pub score: usize,
    pub eval: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { languages: 3, train: 2000, score: 128, eval: 256 }
    }
}

impl SuiteConfig {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Score => self.score,
            Split::Eval => self.eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub kind: ScoringKind,
    pub reduction: PositionReduction,
    pub k_vision: usize,
    pub k_llm: usize,
    pub epsilon: f64,
    pub rho: f64,
    /// Samples used by `score --with-oracle`.
    pub oracle_samples: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            kind: ScoringKind::Translate,
            reduction: PositionReduction::InnerProduct,
            k_vision: 1,
            k_llm: 1,
            epsilon: 0.5,
            rho: 1.0,
            oracle_samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub lr: f32,
    /// Step cap.
    pub steps: usize,
    pub batch_size: usize,
    /// Training stops once the mean loss over the last 100 steps reaches this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self { lr: 0.15, steps: 8000, batch_size: 8, target_loss: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Scoring-split samples per task used for profiles and projections.
    pub samples: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { samples: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream is derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub suite: SuiteConfig,
    pub scoring: ScoringConfig,
    pub base: BaseConfig,
    pub finetune: FinetuneConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.suite.train == 0 || self.suite.score == 0 || self.suite.eval == 0 {
            return Err(Error::InvalidConfig("split sizes must be >= 1".into()));
        }
        if self.base.steps == 0 || self.base.batch_size == 0 || self.base.lr.is_nan() || self.base.lr <= 0.0 {
            return Err(Error::InvalidConfig("base training needs steps, batch_size and lr > 0".into()));
        }
        if self.scoring.k_vision == 0 || self.scoring.k_llm == 0 {
            return Err(Error::InvalidConfig("layer budgets must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.scoring.epsilon) || !(0.0..=1.0).contains(&self.scoring.rho) {
            return Err(Error::InvalidConfig("epsilon and rho must lie in [0, 1]".into()));
        }
        self.finetune.validate()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions { kind: self.scoring.kind, reduction: self.scoring.reduction, loss_scale: None }
    }

    pub fn language_seed(&self) -> u64 {
        derive_seed(self.seed, &[1])
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, &[2])
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[3, self.model.init_seed])
    }

    pub fn base_shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, &[4])
    }

    pub fn finetune_shuffle_seed(&self, run_seed: u64) -> u64 {
        derive_seed(self.seed, &[5, run_seed])
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        ring_tasks(&make_languages(self.suite.languages, self.language_seed())?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// Relative path → SHA-256 of every artifact read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path → SHA-256 of every artifact written.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Paths of one run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn dataset(task: usize, split: Split) -> String {
        format!("data/task{task}-{}.tsv", split.name())
    }

    pub fn manifest(stage: &str) -> String {
        format!("manifests/{stage}.json")
    }

    pub fn finetune_dir(mode: FinetuneMode, task: usize) -> String {
        format!("finetune/{}-task{task}", mode.name())
    }

    pub fn read_manifest(&self, stage: &str) -> Result<StageManifest> {
        let path = self.path(&Self::manifest(stage));
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("{} (run `{stage}` first)", path.display())));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Re-hashes every output of `stages` and compares against their manifests.
    pub fn verify(&self, stages: &[String]) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for stage in stages {
            let m = self.read_manifest(stage)?;
            for (rel, expected) in m.outputs {
                let actual = hash_file(&self.path(&rel))?;
                if actual != expected {
                    return Err(Error::HashMismatch { path: rel, expected, actual });
                }
                inputs.insert(rel, actual);
            }
        }
        Ok(inputs)
    }

    fn write(&self, rel: &str, bytes: &[u8], outputs: &mut BTreeMap<String, String>) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
        outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(&self, stage: &str, cfg: &RunConfig, inputs: BTreeMap<String, String>, outputs: BTreeMap<String, String>, started: u64) -> Result<()> {
        let m = StageManifest { stage: stage.into(), config_hash: cfg.hash(), inputs, outputs, started_unix: started, finished_unix: unix_now() };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        let path = self.path(&Self::manifest(stage));
        std::fs::create_dir_all(path.parent().expect("manifest has a parent"))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_split(&self, task: usize, split: Split) -> Result<Vec<Sample>> {
        let path = self.path(&Self::dataset(task, split));
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        load_dataset(&path)
    }

    pub fn load_splits(&self, tasks: &[TaskSpec], split: Split) -> Result<Vec<Vec<Sample>>> {
        tasks.iter().map(|t| self.load_split(t.id, split)).collect()
    }

    pub fn finetune_stages(&self) -> Result<Vec<String>> {
        let dir = self.path("manifests");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter_map(|n| n.strip_prefix("finetune-").and_then(|s| s.strip_suffix(".json")).map(|s| format!("finetune-{s}")))
            .collect();
        out.sort();
        Ok(out)
    }
}

fn stages(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn pretty(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Layout) -> Result<Value> {
    let started = unix_now();
    let tasks = cfg.tasks()?;
    let mut outputs = BTreeMap::new();
    for task in &tasks {
        for split in Split::ALL {
            let samples = sample_dataset(task, cfg.suite.size(split), cfg.data_seed(), split, cfg.model.patch_cols)?;
            out.write(&Layout::dataset(task.id, split), dump_dataset(task.id, split, &samples).as_bytes(), &mut outputs)?;
        }
        info!("task {} ({}) generated", task.id, task.label());
    }
    let suite: Vec<Value> = tasks
        .iter()
        .map(|t| json!({"id": t.id, "label": t.label(), "source": t.source.id, "target": t.target.id}))
        .collect();
    out.write("data/suite.json", &pretty(&suite)?, &mut outputs)?;
    let files = outputs.len();
    out.finish("gen-data", cfg, BTreeMap::new(), outputs, started)?;
    Ok(json!({"stage": "gen-data", "tasks": tasks.len(), "files": files}))
}

pub fn cmd_train_base(cfg: &RunConfig, out: &Layout) -> Result<Value> {
    let started = unix_now();
    let inputs = out.verify(&stages(&["gen-data"]))?;
    let tasks = cfg.tasks()?;
    let mut data = Vec::new();
    for (task, samples) in tasks.iter().zip(out.load_splits(&tasks, Split::Train)?) {
        data.extend(examples(task, &samples, InstructionKind::Translate));
    }
    let init = Model::init(&cfg.model, cfg.init_seed())?;
    let masks = GradientMaskSet::filled(&init, 1.0, MaskProvenance { mode: "base".into(), target_task: None, partition_hash: None });
    let ft = FinetuneConfig {
        mode: FinetuneMode::Full,
        lr: cfg.base.lr,
        steps: cfg.base.steps,
        batch_size: cfg.base.batch_size,
        seed: cfg.base_shuffle_seed(),
        stop_loss: cfg.base.target_loss,
        ..FinetuneConfig::default()
    };
    info!("training base model on {} examples for {} steps", data.len(), ft.steps);
    let (model, log) = finetune(&init, &data, &ft, &masks)?;
    let mut outputs = BTreeMap::new();
    out.write("base/model.ckpt", &model.to_container().to_bytes(), &mut outputs)?;
    out.write("base/trainlog.csv", log.to_csv().as_bytes(), &mut outputs)?;
    out.finish("train-base", cfg, inputs, outputs, started)?;
    let tail = |v: &[f64]| v.iter().rev().take(100).sum::<f64>() / v.len().min(100) as f64;
    Ok(json!({"stage": "train-base", "steps": log.loss.len(), "initial_loss": log.loss[0], "final_loss_mean100": tail(&log.loss)}))
}

fn load_base(out: &Layout) -> Result<Model> {
    Model::load(&out.path("base/model.ckpt"))
}

pub fn cmd_score(cfg: &RunConfig, out: &Layout, with_oracle: bool) -> Result<Value> {
    let started = unix_now();
    let inputs = out.verify(&stages(&["gen-data", "train-base"]))?;
    let model = load_base(out)?;
    let tasks = cfg.tasks()?;
    let sets = out.load_splits(&tasks, Split::Score)?;
    let opts = cfg.score_options();
    let x = build_score_matrix(&model, &tasks, &sets, &opts)?;
    let rel = layer_relevance(&x);
    let sel = select_layers(&rel, cfg.scoring.k_vision, cfg.scoring.k_llm)?;
    let mut outputs = BTreeMap::new();
    out.write("score/scores.csv", x.to_csv().as_bytes(), &mut outputs)?;
    out.write("score/relevance.csv", rel.to_csv().as_bytes(), &mut outputs)?;
    out.write("score/selected.json", &pretty(&sel)?, &mut outputs)?;
    let mut summary = json!({"stage": "score", "tasks": x.tasks.len(), "neurons": x.neurons.len(), "vision": sel.vision, "language": sel.language});
    if with_oracle {
        let layer = most_relevant(&rel, Module::Language).expect("model has language blocks");
        let n = cfg.scoring.oracle_samples.min(sets[0].len()).max(1);
        let f = fidelity_check(&model, layer, &tasks[0], &sets[0][..n], &opts)?;
        info!("oracle on {} block {}: spearman {:.3}, decile ratio {:.2}", layer.0, layer.1, f.spearman, f.decile_ratio());
        out.write("score/oracle.json", &pretty(&f)?, &mut outputs)?;
        summary["oracle_spearman"] = json!(f.spearman);
        summary["oracle_decile_ratio"] = json!(f.decile_ratio());
    }
    out.finish("score", cfg, inputs, outputs, started)?;
    Ok(summary)
}

pub fn cmd_partition(cfg: &RunConfig, out: &Layout) -> Result<Value> {
    let started = unix_now();
    let inputs = out.verify(&stages(&["score"]))?;
    let x = ScoreMatrix::load(&out.path("score/scores.csv"), cfg.suite.score)?;
    let sel: SelectedLayers = serde_json::from_str(&std::fs::read_to_string(out.path("score/selected.json"))?)?;
    let p = build_partition(&x, &sel, cfg.scoring.epsilon, cfg.scoring.rho)?;
    let mut outputs = BTreeMap::new();
    out.write("partition/partition.json", p.to_json().as_bytes(), &mut outputs)?;
    out.finish("partition", cfg, inputs, outputs, started)?;
    let layers: Vec<Value> = p
        .layers
        .iter()
        .map(|l| json!({"module": l.module, "block": l.block, "general": l.general.len(), "lambda": l.lambda,
            "specific": l.specific.iter().map(|(t, u)| (t.to_string(), u.len())).collect::<BTreeMap<_, _>>()}))
        .collect();
    Ok(json!({"stage": "partition", "layers": layers}))
}

fn load_partition(out: &Layout) -> Result<NeuronPartition> {
    let path = out.path("partition/partition.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    NeuronPartition::load(&path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub mode: FinetuneMode,
    pub target_task: usize,
    pub trainable: usize,
    pub frozen_violations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Layout, mode: FinetuneMode, task: usize) -> Result<Value> {
    let started = unix_now();
    let inputs = out.verify(&stages(&["gen-data", "train-base", "partition"]))?;
    let tasks = cfg.tasks()?;
    let spec = tasks.get(task).ok_or_else(|| Error::Validation(format!("task {task} does not exist ({} tasks)", tasks.len())))?;
    let base = load_base(out)?;
    let partition = load_partition(out)?;
    let masks = ablation_mode_masks(mode, &partition, task, &base, cfg.finetune.incoming_only)?;
    let data = examples(spec, &out.load_split(task, Split::Train)?, InstructionKind::Translate);
    let ft = FinetuneConfig { mode, target_task: task, seed: cfg.finetune_shuffle_seed(cfg.finetune.seed), ..cfg.finetune.clone() };
    info!("fine-tuning {} on task {} with {} trainable elements", mode, spec.label(), masks.ones());
    let (model, log) = finetune(&base, &data, &ft, &masks)?;
    let violations = frozen_violations(&base, &model, &masks);
    if violations > 0 {
        return Err(Error::Validation(format!("{violations} frozen parameter elements changed")));
    }
    let run = FinetuneRun {
        mode,
        target_task: task,
        trainable: masks.ones(),
        frozen_violations: violations,
        initial_loss: log.loss[0],
        final_loss: *log.loss.last().expect("steps >= 1"),
    };
    let dir = Layout::finetune_dir(mode, task);
    let mut outputs = BTreeMap::new();
    out.write(&format!("{dir}/model.ckpt"), &model.to_container().to_bytes(), &mut outputs)?;
    out.write(&format!("{dir}/masks.bin"), &masks.to_container().to_bytes(), &mut outputs)?;
    out.write(&format!("{dir}/trainlog.csv"), log.to_csv().as_bytes(), &mut outputs)?;
    out.write(&format!("{dir}/run.json"), &pretty(&run)?, &mut outputs)?;
    out.finish(&format!("finetune-{}-task{task}", mode.name()), cfg, inputs, outputs, started)?;
    let mut summary = json!({"stage": "finetune", "mode": mode, "task": task, "trainable": run.trainable,
        "initial_loss": run.initial_loss, "final_loss": run.final_loss});
    if mode == FinetuneMode::Mnaft {
        summary["expected_trainable"] = json!(expected_mnaft_ones(&partition, task, cfg.model.d_model));
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    pub tag: String,
    pub mode: FinetuneMode,
    pub target_task: usize,
    pub report: ForgettingReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub results: Vec<EvalResult>,
    pub forgetting: Vec<ForgettingEntry>,
}

pub fn cmd_eval(cfg: &RunConfig, out: &Layout) -> Result<Value> {
    let started = unix_now();
    let ft_stages = out.finetune_stages()?;
    let mut deps = stages(&["gen-data", "train-base"]);
    deps.extend(ft_stages.iter().cloned());
    let inputs = out.verify(&deps)?;
    let tasks = cfg.tasks()?;
    let sets = out.load_splits(&tasks, Split::Eval)?;
    let run_all = |m: &Model, tag: &str| -> Result<Vec<EvalResult>> {
        tasks.iter().zip(&sets).map(|(t, s)| evaluate(m, t, s, tag)).collect()
    };
    let base = run_all(&load_base(out)?, "base")?;
    let mut results = base.clone();
    let mut forgetting = Vec::new();
    for stage in &ft_stages {
        let tag = stage.trim_start_matches("finetune-").to_string();
        let dir = format!("finetune/{tag}");
        let run: FinetuneRun = serde_json::from_str(&std::fs::read_to_string(out.path(&format!("{dir}/run.json")))?)?;
        let after = run_all(&Model::load(&out.path(&format!("{dir}/model.ckpt")))?, &tag)?;
        let report = forgetting_from_results(&base, &after, run.target_task)?;
        info!("{tag}: target {:+.2} BLEU, non-target mean {:+.2}", 100.0 * report.target.delta, 100.0 * report.mean_non_target_delta());
        forgetting.push(ForgettingEntry { tag, mode: run.mode, target_task: run.target_task, report });
        results.extend(after);
    }
    let report = EvalReport { results, forgetting };
    let mut outputs = BTreeMap::new();
    out.write("eval/report.json", &pretty(&report)?, &mut outputs)?;
    out.finish("eval", cfg, inputs, outputs, started)?;
    let bleu: BTreeMap<String, Vec<f64>> = report.results.iter().fold(BTreeMap::new(), |mut acc, r| {
        acc.entry(r.tag.clone()).or_insert_with(Vec::new).push(r.bleu);
        acc
    });
    Ok(json!({"stage": "eval", "bleu": bleu}))
}

pub fn cmd_report(cfg: &RunConfig, out: &Layout) -> Result<Value> {
    let started = unix_now();
    let inputs = out.verify(&stages(&["gen-data", "train-base", "partition", "eval"]))?;
    let tasks = cfg.tasks()?;
    let model = load_base(out)?;
    let partition = load_partition(out)?;
    let sets: Vec<Vec<Sample>> = out
        .load_splits(&tasks, Split::Score)?
        .into_iter()
        .map(|mut s| {
            s.truncate(cfg.report.samples.max(1));
            s
        })
        .collect();
    let mut outputs = BTreeMap::new();

    let profiles = activation_profiles(&model, &tasks, &sets)?;
    out.write("report/profiles.csv", profiles.to_csv().as_bytes(), &mut outputs)?;
    out.write("report/profile_average.svg", profile_svg(&profiles, "Average activation per block", false).as_bytes(), &mut outputs)?;
    out.write("report/profile_delta.svg", profile_svg(&profiles, "Delta average activation", true).as_bytes(), &mut outputs)?;

    let mut projections = Vec::new();
    for module in Module::ALL {
        for group in [NeuronGroup::General, NeuronGroup::Specific] {
            match neuron_projection(&model, &partition, &tasks, &sets, group, module) {
                Ok(p) => {
                    let stem = format!("report/projection_{}_{}", group.name(), module);
                    let title = format!("{} units, last selected {module} block", group.name());
                    out.write(&format!("{stem}.csv"), p.to_csv().as_bytes(), &mut outputs)?;
                    out.write(&format!("{stem}.svg"), projection_svg(&p, &title).as_bytes(), &mut outputs)?;
                    projections.push(json!({"module": module, "group": group.name(), "explained": p.explained}));
                }
                Err(Error::Validation(msg)) => info!("skipping projection: {msg}"),
                Err(e) => return Err(e),
            }
        }
    }

    let eval: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.path("eval/report.json"))?)?;
    let mut csv = String::from("tag,task,target,before,after,delta\n");
    for f in &eval.forgetting {
        for d in std::iter::once(&f.report.target).chain(&f.report.others) {
            csv.push_str(&format!("{},{},{},{:.16e},{:.16e},{:.16e}\n", f.tag, d.task, d.task == f.target_task, d.before, d.after, d.delta));
        }
    }
    out.write("report/forgetting.csv", csv.as_bytes(), &mut outputs)?;
    let files = outputs.len();
    out.finish("report", cfg, inputs, outputs, started)?;
    Ok(json!({"stage": "report", "files": files, "projections": projections}))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig {
            model: ModelConfig { d_model: 16, n_heads: 2, d_ffn: 8, ..ModelConfig::default() },
            suite: SuiteConfig { languages: 3, train: 8, score: 4, eval: 3 },
            ..RunConfig::default()
        };
        c.base.steps = 3;
        c.finetune.steps = 2;
        c.report.samples = 3;
        c.scoring.oracle_samples = 2;
        c
    }

    #[test]
    fn config_text_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let partial = RunConfig::from_text("seed = 9\n[finetune]\nmode = \"full\"\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.finetune.mode, FinetuneMode::Full);
        assert!(RunConfig::from_text("bogus = 1\n").is_err());
        assert!(RunConfig::from_text("[scoring]\nepsilon = 2.0\n").is_err());
    }

    #[test]
    fn stages_chain_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let out = Layout::new(dir.path().join("run"));
        let cfg = small();
        assert!(matches!(cmd_train_base(&cfg, &out), Err(Error::MissingArtifact(_))));
        cmd_gen_data(&cfg, &out).unwrap();
        assert_eq!(std::fs::read_dir(out.path("data")).unwrap().count(), 10);
        cmd_train_base(&cfg, &out).unwrap();
        cmd_score(&cfg, &out, true).unwrap();
        cmd_partition(&cfg, &out).unwrap();
        let s = cmd_finetune(&cfg, &out, FinetuneMode::Mnaft, 0).unwrap();
        assert_eq!(s["trainable"], s["expected_trainable"]);
        cmd_finetune(&cfg, &out, FinetuneMode::Full, 0).unwrap();
        assert!(cmd_finetune(&cfg, &out, FinetuneMode::Full, 5).is_err());
        cmd_eval(&cfg, &out).unwrap();
        cmd_report(&cfg, &out).unwrap();
        let eval: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.path("eval/report.json")).unwrap()).unwrap();
        assert_eq!(eval.results.len(), 9);
        assert_eq!(eval.forgetting.len(), 2);

        let csv = out.path("score/scores.csv");
        let mut text = std::fs::read_to_string(&csv).unwrap();
        text.push('\n');
        std::fs::write(&csv, text).unwrap();
        let err = cmd_partition(&cfg, &out).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
        assert_eq!(err.exit_code(), 1);
    }
}
