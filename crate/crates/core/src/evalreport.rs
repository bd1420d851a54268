//! Translation metrics, forgetting analysis, activation profiles and 2-D
//! neuron projections, with CSV and SVG writers for each.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff;
use crate::error::{Error, Result};
use crate::model::{Intervention, Model, Module};
use crate::partition::NeuronPartition;
use crate::synthtask::{instruction_tokens, InstructionKind, Sample, TaskSpec, MAX_SENTENCE};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Ord>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut out = BTreeMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_counts(c: usize, r: usize) -> Result<()> {
    if c != r {
        return Err(Error::Validation(format!("{c} candidates but {r} references")));
    }
    Ok(())
}

/// Corpus BLEU-4 with clipped n-gram precision and brevity penalty, no smoothing.
pub fn corpus_bleu<T: Ord>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_counts(candidates.len(), references.len())?;
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let (mut matched, mut total) = (0usize, 0usize);
        for (cand, refr) in candidates.iter().zip(references) {
            let rc = ngram_counts(refr, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / MAX_ORDER as f64).exp())
}

/// Positionwise matches up to the shorter length, over total reference tokens.
pub fn token_accuracy<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_counts(candidates.len(), references.len())?;
    let total: usize = references.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let hits: usize = candidates.iter().zip(references).map(|(c, r)| c.iter().zip(r).filter(|(a, b)| a == b).count()).sum();
    Ok(hits as f64 / total as f64)
}

pub fn exact_match<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_counts(candidates.len(), references.len())?;
    if references.is_empty() {
        return Ok(0.0);
    }
    Ok(candidates.iter().zip(references).filter(|(c, r)| c == r).count() as f64 / references.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: usize,
    pub tag: String,
    pub bleu: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub samples: usize,
}

/// Longest greedy decode used for evaluation.
pub const MAX_DECODE: usize = MAX_SENTENCE + 2;

pub fn evaluate(model: &Model, task: &TaskSpec, samples: &[Sample], tag: &str) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let instr = instruction_tokens(task, InstructionKind::Translate);
    let cands = samples.iter().map(|s| model.generate(&s.grid, &instr, MAX_DECODE)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<u32>> = samples.iter().map(|s| s.target.clone()).collect();
    Ok(EvalResult {
        task: task.id,
        tag: tag.into(),
        bleu: corpus_bleu(&cands, &refs)?,
        token_accuracy: token_accuracy(&cands, &refs)?,
        exact_match: exact_match(&cands, &refs)?,
        samples: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: usize,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub target: TaskDelta,
    pub others: Vec<TaskDelta>,
}

impl ForgettingReport {
    /// Mean BLEU change on the non-target tasks (negative means forgetting).
    pub fn mean_non_target_delta(&self) -> f64 {
        if self.others.is_empty() {
            return 0.0;
        }
        self.others.iter().map(|d| d.delta).sum::<f64>() / self.others.len() as f64
    }
}

/// Pairs per-task BLEU of two evaluations of the same task list.
pub fn forgetting_from_results(before: &[EvalResult], after: &[EvalResult], target: usize) -> Result<ForgettingReport> {
    check_counts(after.len(), before.len())?;
    let mut target_row = None;
    let mut others = Vec::new();
    for (b, a) in before.iter().zip(after) {
        if a.task != b.task {
            return Err(Error::Validation("evaluations list tasks in different orders".into()));
        }
        let d = TaskDelta { task: b.task, before: b.bleu, after: a.bleu, delta: a.bleu - b.bleu };
        if b.task == target {
            target_row = Some(d);
        } else {
            others.push(d);
        }
    }
    let target = target_row.ok_or_else(|| Error::Validation(format!("target task {target} not evaluated")))?;
    Ok(ForgettingReport { target, others })
}

pub fn forgetting_report(
    before: &Model,
    after: &Model,
    tasks: &[TaskSpec],
    target: usize,
    eval_sets: &[Vec<Sample>],
) -> Result<ForgettingReport> {
    check_counts(eval_sets.len(), tasks.len())?;
    let run = |m: &Model, tag: &str| -> Result<Vec<EvalResult>> {
        tasks.iter().zip(eval_sets).map(|(t, s)| evaluate(m, t, s, tag)).collect()
    };
    forgetting_from_results(&run(before, "before")?, &run(after, "after")?, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub module: Module,
    pub block: usize,
    pub task: usize,
    pub mean: f64,
    /// `mean(block) − mean(block − 1)`; absent for the first block.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProfileTable {
    pub rows: Vec<ProfileRow>,
}

impl ProfileTable {
    /// Builds rows from per-(module, block, task) means, filling in block-to-block deltas.
    pub fn from_means(means: BTreeMap<(usize, Module, usize), f64>) -> Self {
        let mut rows = Vec::new();
        for (&(task, module, block), &mean) in &means {
            let delta = block.checked_sub(1).and_then(|prev| means.get(&(task, module, prev))).map(|p| mean - p);
            rows.push(ProfileRow { module, block, task, mean, delta });
        }
        rows.sort_by_key(|r| (r.module, r.block, r.task));
        Self { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,block,task,mean,delta\n");
        for r in &self.rows {
            let delta = r.delta.map(|d| format!("{d:.16e}")).unwrap_or_default();
            writeln!(s, "{},{},{},{:.16e},{}", r.module, r.block, r.task, r.mean, delta).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("module,block,task,mean,delta") {
            return Err(Error::Format("bad profile csv header".into()));
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("profile row has {} fields", f.len())));
            }
            let bad = |s: &str| Error::Format(format!("bad profile field {s:?}"));
            rows.push(ProfileRow {
                module: Module::parse(f[0])?,
                block: f[1].parse().map_err(|_| bad(f[1]))?,
                task: f[2].parse().map_err(|_| bad(f[2]))?,
                mean: f[3].parse().map_err(|_| bad(f[3]))?,
                delta: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad(f[4]))?) },
            });
        }
        Ok(Self { rows })
    }
}

/// Mean `|post-GELU activation|` per (module, block, task) over units, positions and samples.
pub fn activation_profiles(model: &Model, tasks: &[TaskSpec], sets: &[Vec<Sample>]) -> Result<ProfileTable> {
    check_counts(sets.len(), tasks.len())?;
    let mut means = BTreeMap::new();
    for (task, samples) in tasks.iter().zip(sets) {
        if samples.is_empty() {
            return Err(Error::Validation("profile set is empty".into()));
        }
        let instr = instruction_tokens(task, InstructionKind::Translate);
        let mut sums: BTreeMap<(Module, usize), (f64, usize)> = BTreeMap::new();
        for s in samples {
            let it = model.build_it_graph(&s.grid, &instr, &s.target, &Intervention::default())?;
            let (_, tape) = autodiff::forward(&it.graph, model)?;
            for &((module, block), node) in &it.ffn {
                let h = tape.value(node)?;
                let e = sums.entry((module, block)).or_insert((0.0, 0));
                e.0 += h.data().iter().map(|&v| (v as f64).abs()).sum::<f64>() / h.numel() as f64;
                e.1 += 1;
            }
        }
        for ((module, block), (sum, n)) in sums {
            means.insert((task.id, module, block), sum / n as f64);
        }
    }
    Ok(ProfileTable::from_means(means))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronGroup {
    General,
    Specific,
}

impl NeuronGroup {
    pub fn name(&self) -> &'static str {
        match self {
            NeuronGroup::General => "general",
            NeuronGroup::Specific => "specific",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `(task, x, y)` per sample.
    pub points: Vec<(usize, f64, f64)>,
    /// Up to two orthonormal principal directions.
    pub directions: Vec<Vec<f64>>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of the total variance on the returned directions.
    pub explained: f64,
}

impl Projection {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,x,y\n");
        for (t, x, y) in &self.points {
            writeln!(s, "{t},{x:.16e},{y:.16e}").unwrap();
        }
        s
    }
}

/// Centers `features` (one row per point) and projects onto the top two principal directions.
pub fn pca_2d(features: &[Vec<f64>], labels: &[usize]) -> Result<Projection> {
    check_counts(labels.len(), features.len())?;
    let n = features.len();
    let dim = features.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Validation("projection needs a non-empty rectangular feature table".into()));
    }
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| features[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let directions: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0) {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let coord = |i: usize, d: usize| directions.get(d).map_or(0.0, |v| centered.row(i).iter().zip(v).map(|(a, b)| a * b).sum());
    let points = (0..n).map(|i| (labels[i], coord(i, 0), coord(i, 1))).collect();
    let trace: f64 = eigenvalues.iter().sum();
    let explained = if trace > 0.0 { eigenvalues.iter().take(2).sum::<f64>() / trace } else { 0.0 };
    Ok(Projection { points, directions, eigenvalues, explained })
}

/// Per-sample features from one neuron group of the last selected block of `module`, projected to 2-D.
pub fn neuron_projection(
    model: &Model,
    partition: &NeuronPartition,
    tasks: &[TaskSpec],
    sets: &[Vec<Sample>],
    group: NeuronGroup,
    module: Module,
) -> Result<Projection> {
    check_counts(sets.len(), tasks.len())?;
    let layer = partition
        .layers
        .iter()
        .filter(|l| l.module == module)
        .max_by_key(|l| l.block)
        .ok_or_else(|| Error::Validation(format!("no selected {module} block")))?;
    let units: Vec<usize> = match group {
        NeuronGroup::General => layer.general.clone(),
        NeuronGroup::Specific => {
            let mut u: Vec<usize> = layer.specific.values().flatten().copied().collect();
            u.sort_unstable();
            u
        }
    };
    if units.is_empty() {
        return Err(Error::Validation(format!("{} group of {module} block {} is empty", group.name(), layer.block)));
    }
    let (mut features, mut labels) = (Vec::new(), Vec::new());
    for (task, samples) in tasks.iter().zip(sets) {
        let instr = instruction_tokens(task, InstructionKind::Translate);
        for s in samples {
            let it = model.build_it_graph(&s.grid, &instr, &s.target, &Intervention::default())?;
            let node = it.ffn.iter().find(|(l, _)| *l == layer.layer()).map(|&(_, n)| n).expect("block exists");
            let (_, tape) = autodiff::forward(&it.graph, model)?;
            let h = tape.value(node)?;
            let rows = h.shape()[0];
            features.push(units.iter().map(|&u| (0..rows).map(|p| h.row(p)[u] as f64).sum::<f64>() / rows as f64).collect());
            labels.push(task.id);
        }
    }
    pca_2d(&features, &labels)
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="800" height="500" viewBox="0 0 800 500">"#)
        .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="800" height="500" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="400" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, escape(title))
        .unwrap();
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, tasks: &[usize]) {
    for (i, t) in tasks.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, WIDTH - MARGIN - 70.0, y).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">task {t}</text>"#, WIDTH - MARGIN - 55.0, y + 9.0)
            .unwrap();
    }
}

/// Grouped bar chart: one group per (module, block), one bar per task. `delta` plots the delta column.
pub fn profile_svg(table: &ProfileTable, title: &str, delta: bool) -> String {
    let mut s = svg_open(title);
    let rows: Vec<(&ProfileRow, f64)> =
        table.rows.iter().filter_map(|r| if delta { r.delta.map(|d| (r, d)) } else { Some((r, r.mean)) }).collect();
    let mut groups: Vec<(Module, usize)> = rows.iter().map(|(r, _)| (r.module, r.block)).collect();
    groups.dedup();
    let mut tasks: Vec<usize> = rows.iter().map(|(r, _)| r.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    if !rows.is_empty() {
        let hi = rows.iter().map(|&(_, v)| v).fold(0.0f64, f64::max);
        let lo = rows.iter().map(|&(_, v)| v).fold(0.0f64, f64::min);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let plot_h = HEIGHT - 2.0 * MARGIN;
        let y_of = |v: f64| MARGIN + (hi - v) / span * plot_h;
        let zero = y_of(0.0);
        writeln!(s, r#"<line x1="{MARGIN}" y1="{zero:.2}" x2="{}" y2="{zero:.2}" stroke="gray"/>"#, WIDTH - MARGIN).unwrap();
        let group_w = (WIDTH - 2.0 * MARGIN) / groups.len() as f64;
        let bar_w = group_w * 0.8 / tasks.len() as f64;
        for (gi, g) in groups.iter().enumerate() {
            let gx = MARGIN + gi as f64 * group_w + group_w * 0.1;
            writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{} {}</text>"#,
                gx + group_w * 0.4,
                HEIGHT - MARGIN + 16.0,
                g.0,
                g.1
            )
            .unwrap();
            for (ti, t) in tasks.iter().enumerate() {
                if let Some(&(_, v)) = rows.iter().find(|(r, _)| (r.module, r.block) == *g && r.task == *t) {
                    let (top, bottom) = if v >= 0.0 { (y_of(v), zero) } else { (zero, y_of(v)) };
                    writeln!(
                        s,
                        r#"<rect x="{:.2}" y="{top:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"/>"#,
                        gx + ti as f64 * bar_w,
                        bottom - top,
                        PALETTE[ti % PALETTE.len()]
                    )
                    .unwrap();
                }
            }
        }
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{hi:.4}</text>"#, MARGIN - 4.0, MARGIN + 4.0)
            .unwrap();
        legend(&mut s, &tasks);
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter plot of projected points colored by task.
pub fn projection_svg(p: &Projection, title: &str) -> String {
    let mut s = svg_open(title);
    if !p.points.is_empty() {
        let xs = p.points.iter().map(|q| q.1);
        let ys = p.points.iter().map(|q| q.2);
        let (xlo, xhi) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
        let (ylo, yhi) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
        let sx = if xhi > xlo { xhi - xlo } else { 1.0 };
        let sy = if yhi > ylo { yhi - ylo } else { 1.0 };
        let mut tasks: Vec<usize> = p.points.iter().map(|q| q.0).collect();
        tasks.sort_unstable();
        tasks.dedup();
        for &(t, x, y) in &p.points {
            let cx = MARGIN + 10.0 + (x - xlo) / sx * (WIDTH - 2.0 * MARGIN - 100.0);
            let cy = HEIGHT - MARGIN - 10.0 - (y - ylo) / sy * (HEIGHT - 2.0 * MARGIN - 20.0);
            let color = PALETTE[tasks.iter().position(|&u| u == t).unwrap_or(0) % PALETTE.len()];
            writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#).unwrap();
        }
        legend(&mut s, &tasks);
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_svg(svg: &str, path: &Path) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}

pub fn emit_csv(csv: &str, path: &Path) -> Result<()> {
    std::fs::write(path, csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        assert_eq!(corpus_bleu(&c, &c).unwrap(), 1.0);
        let empty: Vec<Vec<&str>> = vec![vec![], vec![]];
        assert_eq!(corpus_bleu(&empty, &c).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&[toks("a b c")], &[toks("a b d")]).unwrap(), 0.0);
        assert!(corpus_bleu(&c, &c[..1]).is_err());
    }

    #[test]
    fn bleu_hand_value() {
        // p1 = 4/5, p2..p4 = 3/4, 2/3, 1/2; no brevity penalty
        let got = corpus_bleu(&[toks("a b c d x")], &[toks("a b c d e")]).unwrap();
        let p: f64 = 0.8 * 0.75 * (2.0 / 3.0) * 0.5;
        assert!((got - p.powf(0.25)).abs() < 1e-12);
        // clipping: "the the the" vs "the cat"
        let c = vec![toks("the the the the")];
        assert_eq!(corpus_bleu(&c, &[toks("the cat the mat")]).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        let r = vec![vec![1, 2, 3, 4]];
        assert_eq!(token_accuracy(&r, &r).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[vec![5, 6, 7, 8]], &r).unwrap(), 0.0);
        assert_eq!(token_accuracy(&[vec![1, 2]], &r).unwrap(), 0.5);
        assert_eq!(exact_match(&[vec![1, 2], vec![1, 2, 3, 4]], &[r[0].clone(), r[0].clone()]).unwrap(), 0.5);
    }

    #[test]
    fn forgetting_identity() {
        let rows: Vec<EvalResult> = (0..3)
            .map(|t| EvalResult { task: t, tag: "m".into(), bleu: 0.1 * t as f64, token_accuracy: 0.0, exact_match: 0.0, samples: 1 })
            .collect();
        let f = forgetting_from_results(&rows, &rows, 1).unwrap();
        assert_eq!(f.target.task, 1);
        assert_eq!(f.others.len(), 2);
        assert!(f.others.iter().all(|d| d.delta == 0.0));
        assert_eq!(f.mean_non_target_delta(), 0.0);
        assert!(forgetting_from_results(&rows, &rows, 7).is_err());
    }

    #[test]
    fn profile_deltas_and_csv() {
        let mut means = BTreeMap::new();
        for b in 0..4 {
            means.insert((0, Module::Language, b), 0.5);
            means.insert((1, Module::Language, b), 0.1 * b as f64 + 0.3);
        }
        let t = ProfileTable::from_means(means);
        assert!(t.rows.iter().filter(|r| r.task == 0).all(|r| r.delta.unwrap_or(0.0) == 0.0));
        let sum: f64 = t.rows.iter().filter(|r| r.task == 1).filter_map(|r| r.delta).sum();
        assert!((sum - 0.3).abs() < 1e-12);
        assert_eq!(ProfileTable::from_csv(&t.to_csv()).unwrap(), t);
        assert_eq!(profile_svg(&t, "avg", false), profile_svg(&t, "avg", false));
        let empty = profile_svg(&ProfileTable::default(), "empty", false);
        assert!(empty.contains("<line") && !empty.contains("<rect x=\"6"));
    }

    #[test]
    fn pca_properties() {
        let f: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + (i % 3) as f64, ((i * 7) % 5) as f64]).collect();
        let labels = vec![0; 20];
        let p = pca_2d(&f, &labels).unwrap();
        let d = &p.directions;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&d[0], &d[0]) - 1.0).abs() < 1e-9 && dot(&d[0], &d[1]).abs() < 1e-9);
        assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let shifted: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| v + 10.0).collect()).collect();
        let q = pca_2d(&shifted, &labels).unwrap();
        for (a, b) in p.points.iter().zip(&q.points) {
            assert!((a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
        }
        let same = pca_2d(&vec![vec![1.0, 2.0]; 5], &[0; 5]).unwrap();
        assert!(same.points.iter().all(|&(_, x, y)| x == 0.0 && y == 0.0));
        assert_eq!(same.explained, 0.0);
    }
}
