//! Finite-difference gradient harness shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mnaft::autodiff::{backward, fd_gradient, forward, relative_error, Graph, NodeId};
use mnaft::model::{Intervention, Model, ModelConfig};
use mnaft::synthtask::{instruction_tokens, make_languages, ring_tasks, sample_dataset, InstructionKind, Split};
use mnaft::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

type Builder = fn(&mut Graph, &[NodeId], &mut ChaCha8Rng) -> NodeId;

/// One differentiable op under test: input shapes and how to wire them.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Builder,
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &[&[usize]], build: Builder) -> OpCase {
        OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |g, x, _| g.matmul(x[0], x[1])),
        case("matmul_t", &[&[3, 4], &[5, 4]], |g, x, _| g.matmul_t(x[0], x[1])),
        case("matmul_row", &[&[4], &[4, 2]], |g, x, _| g.matmul(x[0], x[1])),
        case("add", &[&[3, 4], &[3, 4]], |g, x, _| g.add(x[0], x[1])),
        case("add_broadcast", &[&[3, 4], &[4]], |g, x, _| g.add(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, x, _| g.mul(x[0], x[1])),
        case("mul_broadcast", &[&[3, 4], &[4]], |g, x, _| g.mul(x[0], x[1])),
        case("scale", &[&[3, 4]], |g, x, _| g.scale(x[0], -1.7)),
        case("concat_rows", &[&[2, 3], &[4, 3]], |g, x, _| g.concat(vec![x[0], x[1]], 0)),
        case("concat_cols", &[&[3, 2], &[3, 4]], |g, x, _| g.concat(vec![x[0], x[1]], 1)),
        case("slice_rows", &[&[5, 3]], |g, x, _| g.slice(x[0], 0, 1, 3)),
        case("slice_cols", &[&[3, 5]], |g, x, _| g.slice(x[0], 1, 2, 2)),
        case("mean", &[&[3, 4]], |g, x, _| g.mean(x[0])),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, x, _| g.layer_norm(x[0], x[1], x[2])),
        case("gelu", &[&[4, 5]], |g, x, _| g.gelu(x[0])),
        case("gather", &[&[6, 3]], |g, x, rng| {
            let ids = (0..5).map(|_| rng.gen_range(0..6)).collect();
            g.gather(x[0], ids)
        }),
        case("softmax", &[&[4, 5]], |g, x, _| g.softmax(x[0], 5)),
        case("softmax_causal", &[&[4, 4]], |g, x, _| g.softmax(x[0], 0)),
        case("softmax_prefix", &[&[5, 5]], |g, x, _| g.softmax(x[0], 2)),
        case("cross_entropy", &[&[4, 6]], |g, x, rng| {
            let t = (0..4).map(|_| rng.gen_range(0..6)).collect();
            g.softmax_cross_entropy(x[0], t)
        }),
    ]
}

/// Scalar probe `mean(out ⊙ R)` of an op output, evaluated in f64 from the f32 forward values.
fn probe_loss(case: &OpCase, inputs: &BTreeMap<String, Tensor>, seed: u64) -> Result<(Graph, NodeId, NodeId, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = (0..case.shapes.len()).map(|i| g.input(format!("x{i}"))).collect();
    let out = (case.build)(&mut g, &nodes, &mut rng);
    let (value, _) = forward(&g, inputs)?;
    let r = random_tensor(value.shape(), &mut rng);
    let rc = g.constant(r.clone());
    let prod = g.mul(out, rc);
    let loss = g.mean(prod);
    Ok((g, out, loss, r))
}

fn eval_probe(g: &Graph, out: NodeId, r: &Tensor, inputs: &BTreeMap<String, Tensor>) -> Result<f64> {
    let (_, tape) = forward(g, inputs)?;
    let v = tape.value(out)?;
    Ok(v.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / v.numel() as f64)
}

/// Worst normwise relative error over the inputs of one op for one seed.
pub fn check_op(case: &OpCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: BTreeMap<String, Tensor> = case
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("x{i}"), random_tensor(s, &mut rng).with_trainable(true)))
        .collect();
    let (g, out, loss, r) = probe_loss(case, &inputs, seed)?;
    let (_, mut tape) = forward(&g, &inputs)?;
    let grads = backward(&mut tape, loss)?;
    let mut worst: f64 = 0.0;
    for (name, x) in &inputs {
        let fd = fd_gradient(
            |probe| {
                let mut b = inputs.clone();
                b.insert(name.clone(), probe.clone().with_trainable(true));
                eval_probe(&g, out, &r, &b)
            },
            x,
            FD_STEP,
        )?;
        worst = worst.max(relative_error(grads.params[name].data(), fd.data()));
    }
    Ok(worst)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig { d_model: 8, n_heads: 2, d_ffn: 8, vision_blocks: 1, language_blocks: 1, ..ModelConfig::default() }
}

/// Worst relative error of the teacher-forced loss gradient over sampled coordinates of every parameter.
pub fn check_model(seed: u64, coords: usize, step: f64) -> Result<f64> {
    let config = tiny_config();
    let model = Model::init(&config, seed)?;
    let tasks = ring_tasks(&make_languages(3, seed)?)?;
    let sample = sample_dataset(&tasks[0], 1, seed, Split::Train, config.patch_cols)?.remove(0);
    let instr = instruction_tokens(&tasks[0], InstructionKind::Translate);
    let it = model.build_it_graph(&sample.grid, &instr, &sample.target, &Intervention::default())?;
    let (_, mut tape) = forward(&it.graph, &model)?;
    let grads = backward(&mut tape, it.loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (name, p) in model.params() {
        for _ in 0..coords.min(p.numel()) {
            let j = rng.gen_range(0..p.numel());
            let point = Tensor::scalar(p.data()[j]);
            let fd = fd_gradient(
                |x| {
                    let mut m = model.clone();
                    m.param_mut(name).unwrap().data_mut()[j] = x.item();
                    m.loss_with(&sample.grid, &instr, &sample.target, &Intervention::default())
                },
                &point,
                step,
            )?;
            analytic.push(grads.params[name].data()[j]);
            numeric.push(fd.item());
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
