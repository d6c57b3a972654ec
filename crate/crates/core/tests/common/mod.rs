#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng as _;

use tag_head::autodiff::{Tape, Var};
use tag_head::encoder::{encoder_layer_on, layer_param_specs, mha_on, mlp_on, Activation, EncoderConfig, LayerVars, Projection};
use tag_head::error::Result;
use tag_head::gradcheck::{grad_check_objective, GradCheckReport, Objective};
use tag_head::graph::{build_graph, propagate_on, PropagationConfig, StGraph};
use tag_head::head::pool_and_classify_on;
use tag_head::params::{Init, ParamStore};
use tag_head::rng::{stream, Rng};
use tag_head::scalar::{lit, Scalar};
use tag_head::tensor::Tensor;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

pub fn normal(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    Init::Normal { std: 1.0 }.sample(shape, rng).unwrap()
}

fn constant<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<f64>) -> Result<Var> {
    tape.constant(t.shape().to_vec(), t.data().iter().map(|&x| lit(x)).collect())
}

#[derive(Clone, Debug)]
pub enum Op {
    MatMul,
    MatMulNt,
    Add,
    Mul,
    AddRow,
    Scale,
    Softmax,
    LayerNorm,
    Gelu,
    Relu,
    SliceCols,
    ConcatCols,
    MeanRows,
    Reshape,
    Mask(Tensor<f64>),
    CrossEntropy(usize),
    Sum,
    Propagate(Arc<StGraph>, PropagationConfig),
    PatchEmbed,
    PoolClassify(usize),
    Attention,
    Mlp(Activation),
    EncoderLayer(EncoderConfig),
}

/// One op with random inputs, reduced to a scalar through fixed random weights.
pub struct OpCase {
    pub name: String,
    pub op: Op,
    pub params: Vec<Tensor<f64>>,
    pub names: Vec<String>,
    pub weights: Option<Tensor<f64>>,
    pub store: Option<ParamStore<f64>>,
}

impl OpCase {
    pub fn check(&self) -> GradCheckReport {
        grad_check_objective(&self.names, &self.params, EPS, self).unwrap()
    }
}

impl Objective for OpCase {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>, v: &[Var]) -> Result<Var> {
        let y = match &self.op {
            Op::MatMul => tape.matmul(v[0], v[1])?,
            Op::MatMulNt => tape.matmul_nt(v[0], v[1])?,
            Op::Add => tape.add(v[0], v[1])?,
            Op::Mul => tape.mul(v[0], v[1])?,
            Op::AddRow => tape.add_row(v[0], v[1])?,
            Op::Scale => tape.scale(v[0], lit(0.7)),
            Op::Softmax => tape.softmax(v[0]),
            Op::LayerNorm => tape.layer_norm(v[0], v[1], v[2], lit(1e-5))?,
            Op::Gelu => tape.gelu(v[0]),
            Op::Relu => tape.relu(v[0]),
            Op::SliceCols => {
                let c = tape.shape(v[0])[1];
                tape.slice_cols(v[0], 1, c - 1)?
            }
            Op::ConcatCols => tape.concat_cols(&[v[0], v[1]])?,
            Op::MeanRows => tape.mean_rows(v[0])?,
            Op::Reshape => {
                let s = tape.shape(v[0]).to_vec();
                tape.reshape(v[0], vec![s[1], s[0]])?
            }
            Op::Mask(m) => tape.mask(v[0], m.data().iter().map(|&x| lit(x)).collect())?,
            Op::CrossEntropy(label) => return tape.cross_entropy(v[0], *label),
            Op::Sum => return Ok(tape.sum(v[0])),
            Op::Propagate(g, cfg) => propagate_on(tape, v[0], g, cfg)?,
            Op::PatchEmbed => tag_head::backbone::patch_embed_on(tape, v[0], v[1], v[2])?,
            Op::PoolClassify(label) => {
                let (_, logits) = pool_and_classify_on(tape, v[0], v[1], v[2])?;
                return tape.cross_entropy(logits, *label);
            }
            Op::Attention => {
                let lv = LayerVars::from_store(self.store.as_ref().unwrap(), &v[1..], "", 2)?;
                mha_on(tape, v[0], &lv, Projection::Fused)?.0
            }
            Op::Mlp(act) => {
                let lv = LayerVars::from_store(self.store.as_ref().unwrap(), &v[1..], "", 2)?;
                mlp_on(tape, v[0], &lv, *act)?
            }
            Op::EncoderLayer(cfg) => {
                let lv = LayerVars::from_store(self.store.as_ref().unwrap(), &v[1..], "", cfg.heads)?;
                encoder_layer_on(tape, v[0], &lv, cfg, None)?
            }
        };
        let w = constant(tape, self.weights.as_ref().expect("weighted op"))?;
        let prod = tape.mul(y, w)?;
        Ok(tape.sum(prod))
    }
}

/// Output shape of `op` for `params`, used to size the reduction weights.
fn output_shape(op: &Op, params: &[Tensor<f64>]) -> Vec<usize> {
    let s = |i: usize| params[i].shape().to_vec();
    match op {
        Op::MatMul => vec![s(0)[0], s(1)[1]],
        Op::MatMulNt => vec![s(0)[0], s(1)[0]],
        Op::SliceCols => vec![s(0)[0], s(0)[1] - 1],
        Op::ConcatCols => vec![s(0)[0], s(0)[1] + s(1)[1]],
        Op::MeanRows => vec![1, s(0)[1]],
        Op::Reshape => vec![s(0)[1], s(0)[0]],
        Op::PatchEmbed => vec![s(0)[0], s(1)[1]],
        _ => s(0),
    }
}

fn layer_store(c: usize, cfg: &EncoderConfig, rng: &mut Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (name, shape, init) in layer_param_specs(c, cfg) {
        let mut t: Tensor<f64> = init.sample(shape.clone(), rng).unwrap();
        // Perturb gains and biases away from 1 and 0 so their gradients are generic.
        if matches!(init, Init::Ones | Init::Zeros) {
            let noise = Init::Normal { std: 0.3 }.sample::<f64>(shape, rng).unwrap();
            t = t.add(&noise).unwrap();
        }
        store.insert(name, t).unwrap();
    }
    store
}

/// Every differentiable op at small random shapes drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = stream(seed, "gradient-suite", 0);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (m, k, n) = (dim(1, 4), dim(1, 4), dim(2, 5));
    let mut rng = stream(seed, "gradient-suite", 1);
    let mut t = |shape: Vec<usize>| normal(shape, &mut rng);

    let mut cases: Vec<(&str, Op, Vec<Tensor<f64>>)> = vec![
        ("matmul", Op::MatMul, vec![t(vec![m, k]), t(vec![k, n])]),
        ("matmul_nt", Op::MatMulNt, vec![t(vec![m, k]), t(vec![n, k])]),
        ("add", Op::Add, vec![t(vec![m, n]), t(vec![m, n])]),
        ("mul", Op::Mul, vec![t(vec![m, n]), t(vec![m, n])]),
        ("add_row", Op::AddRow, vec![t(vec![m, n]), t(vec![n])]),
        ("scale", Op::Scale, vec![t(vec![m, n])]),
        ("softmax", Op::Softmax, vec![t(vec![m, n])]),
        ("layer_norm", Op::LayerNorm, vec![t(vec![m, n]), t(vec![n]), t(vec![n])]),
        ("gelu", Op::Gelu, vec![t(vec![m, n])]),
        ("relu", Op::Relu, vec![t(vec![m, n])]),
        ("slice_cols", Op::SliceCols, vec![t(vec![m, n])]),
        ("concat_cols", Op::ConcatCols, vec![t(vec![m, k]), t(vec![m, n])]),
        ("mean_rows", Op::MeanRows, vec![t(vec![m, n])]),
        ("reshape", Op::Reshape, vec![t(vec![m, n])]),
        ("sum", Op::Sum, vec![t(vec![m, n])]),
        ("patch_embed", Op::PatchEmbed, vec![t(vec![m, k]), t(vec![k, n]), t(vec![n])]),
    ];

    let mut rng = stream(seed, "gradient-suite", 2);
    let mask = Tensor::from_fn(vec![m, n], |_| if rng.gen_bool(0.7) { 1.0 / 0.7 } else { 0.0 }).unwrap();
    let z = normal(vec![1, n], &mut rng);
    let label = rng.gen_range(0..n);
    let (tf, p, c) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=3));
    let prop = PropagationConfig {
        use_intra: rng.gen_bool(0.5),
        use_temp: rng.gen_bool(0.5),
        ..PropagationConfig::default()
    };
    let g = Arc::new(build_graph(tf, p, &prop).unwrap());
    let mut rng = stream(seed, "gradient-suite", 3);
    let mut t = |shape: Vec<usize>| normal(shape, &mut rng);
    cases.push(("mask", Op::Mask(mask), vec![t(vec![m, n])]));
    cases.push(("cross_entropy", Op::CrossEntropy(label), vec![z]));
    cases.push(("propagate", Op::Propagate(g, prop), vec![t(vec![tf * p, c])]));
    cases.push((
        "pool_and_classify",
        Op::PoolClassify(label),
        vec![t(vec![m, k]), t(vec![n, k]), t(vec![n])],
    ));

    let mut out: Vec<OpCase> = cases
        .into_iter()
        .map(|(name, op, params)| {
            let weighted = !matches!(op, Op::CrossEntropy(_) | Op::Sum | Op::PoolClassify(_));
            let mut rng = stream(seed, name, 4);
            let weights = weighted.then(|| normal(output_shape(&op, &params), &mut rng));
            let names = (0..params.len()).map(|i| format!("{name}.{i}")).collect();
            OpCase {
                name: name.to_string(),
                op,
                params,
                names,
                weights,
                store: None,
            }
        })
        .collect();

    let c = 4;
    let cfg = EncoderConfig {
        layers: 1,
        heads: 2,
        ffn_dim: 6,
        ..EncoderConfig::default()
    };
    for (name, op) in [
        ("attention", Op::Attention),
        ("mlp_gelu", Op::Mlp(Activation::Gelu)),
        ("mlp_relu", Op::Mlp(Activation::Relu)),
    ] {
        out.push(block_case(seed, name, op, c, &cfg));
    }
    out
}

fn block_case(seed: u64, name: &str, op: Op, c: usize, cfg: &EncoderConfig) -> OpCase {
    let mut rng = stream(seed, name, 5);
    let tokens = rng.gen_range(1..=5);
    let store = layer_store(c, cfg, &mut rng);
    let mut params = vec![normal(vec![tokens, c], &mut rng)];
    params.extend(store.tensors().iter().cloned());
    let mut names = vec!["tokens".to_string()];
    names.extend(store.names().iter().cloned());
    let weights = Some(normal(vec![tokens, c], &mut rng));
    OpCase {
        name: name.to_string(),
        op,
        params,
        names,
        weights,
        store: Some(store),
    }
}

/// One full pre-norm encoder layer with its own random tokens.
pub fn encoder_layer_case(seed: u64) -> OpCase {
    let cfg = EncoderConfig {
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        ..EncoderConfig::default()
    };
    block_case(seed, "encoder_layer", Op::EncoderLayer(cfg.clone()), 8, &cfg)
}
