//! Small seeded reference networks used by the experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{Graph, GraphBuilder, NodeKind, Tensor};

/// Activation placed between dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Glorot-uniform matrix `[fan_in, fan_out]`.
fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(vec![fan_in, fan_out], |_| rng.gen_range(-limit..limit))
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

/// Dense stack `dims[0] -> dims[1] -> ... -> dims.last()` over `[batch, dims[0]]`
/// inputs named `x`, with `act` between layers and raw logits out of `logits`.
pub fn mlp(dims: &[usize], batch: usize, act: Activation, seed: u64) -> Graph {
    assert!(dims.len() >= 2, "an MLP needs input and output widths");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GraphBuilder::new();
    let mut prev = g.input("x", vec![batch, dims[0]]);
    let layers = dims.len() - 1;
    for l in 0..layers {
        let id = if l + 1 == layers { "logits".to_string() } else { format!("fc{}", l + 1) };
        let w = glorot(&mut rng, dims[l], dims[l + 1]);
        let b = Tensor::zeros(vec![dims[l + 1]]);
        prev = g.node_with(&id, NodeKind::Dense, &[&prev], vec![("weight", w), ("bias", b)]);
        if l + 1 < layers {
            let kind = match act {
                Activation::Relu => NodeKind::Relu,
                Activation::Gelu => NodeKind::Gelu,
            };
            prev = g.node(&format!("act{}", l + 1), kind, &[&prev]);
        }
    }
    g.output(&prev);
    g.build()
}

/// Conv(3x3, pad 1) -> ReLU -> pool(2) -> Dense over `[batch, channels, size, size]`.
pub fn toy_cnn(batch: usize, channels: usize, size: usize, filters: usize, classes: usize, max_pool: bool, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GraphBuilder::new();
    g.input("x", vec![batch, channels, size, size]);
    let fan_in = channels * 9;
    let w = uniform(&mut rng, vec![filters, channels, 3, 3], (3.0 / fan_in as f32).sqrt());
    let b = uniform(&mut rng, vec![filters], 0.1);
    g.node_with(
        "conv",
        NodeKind::Conv2d {
            stride: 1,
            pad: 1,
            kernel: 3,
        },
        &["x"],
        vec![("weight", w), ("bias", b)],
    );
    g.node("relu", NodeKind::Relu, &["conv"]);
    let pool = if max_pool {
        NodeKind::MaxPool { window: 2 }
    } else {
        NodeKind::AvgPool { window: 2 }
    };
    g.node("pool", pool, &["relu"]);
    let flat = filters * (size / 2) * (size / 2);
    g.node("flatten", NodeKind::Reshape { shape: vec![batch, flat] }, &["pool"]);
    let w = glorot(&mut rng, flat, classes);
    let b = uniform(&mut rng, vec![classes], 0.1);
    g.node_with("fc", NodeKind::Dense, &["flatten"], vec![("weight", w), ("bias", b)]);
    g.output("fc");
    g.build()
}

/// Single-head self-attention plus GELU feed-forward block over `[tokens, width]`,
/// post-norm, with the `1/sqrt(width)` attention scale folded into the query weights.
pub fn transformer_block(tokens: usize, width: usize, hidden: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GraphBuilder::new();
    g.input("x", vec![tokens, width]);
    let scale = 1.0 / (width as f32).sqrt();
    let mut wq = glorot(&mut rng, width, width);
    wq.data_mut().iter_mut().for_each(|v| *v *= scale);
    let wk = glorot(&mut rng, width, width);
    let wv = glorot(&mut rng, width, width);
    let wo = glorot(&mut rng, width, width);
    g.node_with("q", NodeKind::Dense, &["x"], vec![("weight", wq)]);
    g.node_with("k", NodeKind::Dense, &["x"], vec![("weight", wk)]);
    g.node_with("v", NodeKind::Dense, &["x"], vec![("weight", wv)]);
    g.node("kt", NodeKind::Transpose { perm: vec![1, 0] }, &["k"]);
    g.node("scores", NodeKind::MatMul, &["q", "kt"]);
    g.node("attn", NodeKind::Softmax { axis: -1 }, &["scores"]);
    g.node("mix", NodeKind::MatMul, &["attn", "v"]);
    g.node_with("proj", NodeKind::Dense, &["mix"], vec![("weight", wo)]);
    g.node("res1", NodeKind::ElemAdd, &["x", "proj"]);
    let ln = |rng: &mut ChaCha8Rng| {
        vec![
            ("gamma", Tensor::from_fn(vec![width], |_| 1.0 + rng.gen_range(-0.1..0.1))),
            ("beta", uniform(rng, vec![width], 0.1)),
        ]
    };
    let p = ln(&mut rng);
    g.node_with("ln1", NodeKind::LayerNorm { axis: -1, eps: 1e-5 }, &["res1"], p);
    let w1 = glorot(&mut rng, width, hidden);
    let b1 = uniform(&mut rng, vec![hidden], 0.1);
    let w2 = glorot(&mut rng, hidden, width);
    let b2 = uniform(&mut rng, vec![width], 0.1);
    g.node_with("ff1", NodeKind::Dense, &["ln1"], vec![("weight", w1), ("bias", b1)]);
    g.node("gelu", NodeKind::Gelu, &["ff1"]);
    g.node_with("ff2", NodeKind::Dense, &["gelu"], vec![("weight", w2), ("bias", b2)]);
    g.node("res2", NodeKind::ElemAdd, &["ln1", "ff2"]);
    let p = ln(&mut rng);
    g.node_with("ln2", NodeKind::LayerNorm { axis: -1, eps: 1e-5 }, &["res2"], p);
    g.output("ln2");
    g.build()
}
