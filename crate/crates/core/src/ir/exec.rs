use std::collections::BTreeMap;

use super::graph::{conv_output_hw, Graph, Node, NodeKind};
use super::tensor::{axis_split, normalize_axis, permutation_map, Tensor};
use crate::error::{Error, Result};
use crate::pwl::gelu_f32;

pub type TensorMap = BTreeMap<String, Tensor>;

/// Runs the graph with exact nonlinearities and returns its declared outputs.
pub fn execute_reference(graph: &Graph, inputs: &TensorMap) -> Result<TensorMap> {
    let values = execute_all(graph, inputs)?;
    Ok(graph
        .outputs
        .iter()
        .map(|o| (o.clone(), values[o].clone()))
        .collect())
}

/// Runs the graph and returns the value of every graph input and node that
/// an output depends on.
pub fn execute_all(graph: &Graph, inputs: &TensorMap) -> Result<TensorMap> {
    let diags = graph.validate();
    if let Some(d) = diags.first() {
        return Err(Error::structural(d.to_string()));
    }
    let mut values = TensorMap::new();
    for gi in &graph.inputs {
        let t = inputs
            .get(&gi.name)
            .ok_or_else(|| Error::arg(format!("missing graph input '{}'", gi.name)))?;
        if t.shape() != gi.shape.as_slice() {
            return Err(Error::structural(format!(
                "input '{}' has shape {:?}, graph expects {:?}",
                gi.name,
                t.shape(),
                gi.shape
            )));
        }
        values.insert(gi.name.clone(), t.clone());
    }
    let needed = needed_nodes(graph);
    for i in graph.topological_order()? {
        let node = &graph.nodes[i];
        if !needed[i] {
            continue;
        }
        let args: Vec<&Tensor> = node.inputs.iter().map(|d| &values[d]).collect();
        let out = eval_node(node, &args)?;
        values.insert(node.id.clone(), out);
    }
    Ok(values)
}

/// Marks the nodes that some graph output depends on.
pub(crate) fn needed_nodes(graph: &Graph) -> Vec<bool> {
    let index: BTreeMap<&str, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut needed = vec![false; graph.nodes.len()];
    let mut stack: Vec<usize> = graph
        .outputs
        .iter()
        .filter_map(|o| index.get(o.as_str()).copied())
        .collect();
    while let Some(i) = stack.pop() {
        if needed[i] {
            continue;
        }
        needed[i] = true;
        for d in &graph.nodes[i].inputs {
            if let Some(&j) = index.get(d.as_str()) {
                stack.push(j);
            }
        }
    }
    needed
}

fn eval_node(node: &Node, args: &[&Tensor]) -> Result<Tensor> {
    let x = args[0];
    let out = match &node.kind {
        NodeKind::MatMul => matmul(x, args[1]),
        NodeKind::Dense => {
            let w = &node.params["weight"];
            let mut y = if x.rank() == 1 {
                let row = x.clone().reshape(vec![1, x.len()])?;
                let y = matmul(&row, w);
                let n = y.len();
                y.reshape(vec![n])?
            } else {
                matmul(x, w)
            };
            if let Some(b) = node.param("bias") {
                add_last_axis(&mut y, b);
            }
            y
        }
        NodeKind::Conv2d {
            stride,
            pad,
            kernel,
        } => conv2d(x, &node.params["weight"], node.param("bias"), *stride, *pad, *kernel),
        NodeKind::AddBias => {
            let mut y = x.clone();
            add_last_axis(&mut y, &node.params["bias"]);
            y
        }
        NodeKind::ElemAdd => zip(x, args[1], |a, b| a + b),
        NodeKind::ElemMul => zip(x, args[1], |a, b| a * b),
        NodeKind::Relu => map(x, |v| v.max(0.0)),
        NodeKind::Gelu => map(x, gelu_f32),
        NodeKind::Softmax { axis } => softmax(x, axis_of(x, *axis)),
        NodeKind::LayerNorm { axis, eps } => {
            let a = axis_of(x, *axis);
            layer_norm(x, a, *eps, node.param("gamma"), node.param("beta"))
        }
        NodeKind::AvgPool { window } => pool(x, *window, false),
        NodeKind::MaxPool { window } => pool(x, *window, true),
        NodeKind::Transpose { perm } => {
            let map = permutation_map(x.shape(), perm);
            let shape = perm.iter().map(|&p| x.shape()[p]).collect();
            Tensor::new(shape, map.iter().map(|&s| x.data()[s]).collect())?
        }
        NodeKind::Reshape { shape } => x.clone().reshape(shape.clone())?,
    };
    Ok(out)
}

fn axis_of(x: &Tensor, axis: isize) -> usize {
    normalize_axis(axis, x.rank()).expect("validated axis")
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn add_last_axis(y: &mut Tensor, b: &Tensor) {
    let n = b.len();
    for row in y.data_mut().chunks_mut(n) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
}

/// Batched `a @ b` with FP32 accumulation and the reduction index innermost.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let batch: usize = ash[..ash.len() - 2].iter().product();
    let b_batched = bsh.len() > 2;
    let mut out = vec![0f32; batch * m * n];
    for t in 0..batch {
        let ad = &a.data()[t * m * k..(t + 1) * m * k];
        let bd = if b_batched {
            &b.data()[t * k * n..(t + 1) * k * n]
        } else {
            b.data()
        };
        let od = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0f32;
                for p in 0..k {
                    acc += ad[i * k + p] * bd[p * n + j];
                }
                od[i * n + j] = acc;
            }
        }
    }
    let mut shape = ash.to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out).unwrap()
}

/// Direct nested-loop NCHW convolution, channels then kernel rows then columns.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    kernel: usize,
) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let f = w.shape()[0];
    let (ho, wo) = conv_output_hw(h, wd, kernel, stride, pad).expect("validated conv");
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0f32; n * f * ho * wo];
    for img in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0f32;
                    for ci in 0..c {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((img * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = wdat[((fi * c + ci) * kernel + ky) * kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[fi];
                    }
                    out[((img * f + fi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, ho, wo], out).unwrap()
}

/// `x - max(x)` along `axis`: the argument the exponential sees inside softmax.
pub fn softmax_shifted(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mx = (0..len).map(|i| out[at(i)]).fold(f32::NEG_INFINITY, f32::max);
            for i in 0..len {
                out[at(i)] -= mx;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = softmax_shifted(x, axis).into_data();
    for v in out.iter_mut() {
        *v = v.exp();
    }
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mut sum = 0f32;
            for i in 0..len {
                sum += out[at(i)];
            }
            for i in 0..len {
                out[at(i)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Row sums of `exp(x - max)`: the argument of the reciprocal inside softmax.
pub fn softmax_denominators(x: &Tensor, axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let shifted = softmax_shifted(x, axis);
    let d = shifted.data();
    let mut sums = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for j in 0..inner {
            let mut sum = 0f32;
            for i in 0..len {
                sum += d[(o * len + i) * inner + j].exp();
            }
            sums.push(sum);
        }
    }
    sums
}

/// Per-slice mean and biased variance along `axis`.
pub fn moments(x: &Tensor, axis: usize) -> (Vec<f32>, Vec<f32>) {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut means = Vec::with_capacity(outer * inner);
    let mut vars = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mean = (0..len).map(|i| d[at(i)]).sum::<f32>() / len as f32;
            let var = (0..len).map(|i| (d[at(i)] - mean).powi(2)).sum::<f32>() / len as f32;
            means.push(mean);
            vars.push(var);
        }
    }
    (means, vars)
}

pub fn layer_norm(
    x: &Tensor,
    axis: usize,
    eps: f32,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let (means, vars) = moments(x, axis);
    let d = x.data();
    let mut out = vec![0f32; d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let s = o * inner + j;
            let inv = 1.0 / (vars[s] + eps).sqrt();
            for i in 0..len {
                let at = (o * len + i) * inner + j;
                let mut v = (d[at] - means[s]) * inv;
                if let Some(g) = gamma {
                    v *= g.data()[i];
                }
                if let Some(b) = beta {
                    v += b.data()[i];
                }
                out[at] = v;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn pool(x: &Tensor, window: usize, max: bool) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / window, w / window);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = if max { f32::NEG_INFINITY } else { 0.0 };
                for ky in 0..window {
                    for kx in 0..window {
                        let v = d[(plane * h + oy * window + ky) * w + ox * window + kx];
                        acc = if max { acc.max(v) } else { acc + v };
                    }
                }
                if !max {
                    acc /= (window * window) as f32;
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::graph::GraphBuilder;
    use proptest::prelude::*;

    fn single(kind: NodeKind, shape: Vec<usize>, params: Vec<(&str, Tensor)>) -> Graph {
        let mut g = GraphBuilder::new();
        g.input("x", shape);
        g.node_with("n", kind, &["x"], params);
        g.output("n");
        g.build()
    }

    fn run1(g: &Graph, x: Tensor) -> Tensor {
        let mut m = TensorMap::new();
        m.insert("x".into(), x);
        execute_reference(g, &m).unwrap().remove("n").unwrap()
    }

    #[test]
    fn identity_dense_passes_through() {
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let g = single(
            NodeKind::Dense,
            vec![2, 3],
            vec![("weight", eye), ("bias", Tensor::zeros(vec![3]))],
        );
        let x = Tensor::new(vec![2, 3], vec![1.5, -2.0, 3.25, 0.0, 7.0, -0.5]).unwrap();
        assert_eq!(run1(&g, x.clone()), x);
    }

    #[test]
    fn uniform_softmax() {
        let g = single(NodeKind::Softmax { axis: -1 }, vec![1, 4], vec![]);
        let y = run1(&g, Tensor::zeros(vec![1, 4]));
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn conv_output_shape() {
        let g = single(
            NodeKind::Conv2d {
                stride: 1,
                pad: 1,
                kernel: 3,
            },
            vec![1, 3, 8, 8],
            vec![("weight", Tensor::filled(vec![16, 3, 3, 3], 0.1))],
        );
        let y = run1(&g, Tensor::filled(vec![1, 3, 8, 8], 1.0));
        assert_eq!(y.shape(), &[1, 16, 8, 8]);
        // interior pixel sees the full 27-tap kernel
        assert!((y.data()[9 * 1 + 8] - 2.7).abs() < 1e-5);
    }

    #[test]
    fn missing_and_misshaped_inputs() {
        let g = single(NodeKind::Relu, vec![2, 2], vec![]);
        assert!(execute_reference(&g, &TensorMap::new()).is_err());
        let mut m = TensorMap::new();
        m.insert("x".into(), Tensor::zeros(vec![4]));
        let e = execute_reference(&g, &m).unwrap_err();
        assert!(e.to_string().contains("'x'"));
    }

    #[test]
    fn transpose_and_reshape() {
        let g = single(NodeKind::Transpose { perm: vec![1, 0] }, vec![2, 3], vec![]);
        let y = run1(&g, Tensor::from_fn(vec![2, 3], |i| i as f32));
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-20.0f32..20.0, len)
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in vec_strategy(24)) {
            let x = Tensor::new(vec![4, 6], data).unwrap();
            for axis in [0usize, 1] {
                let y = softmax(&x, axis);
                let (outer, len, inner) = axis_split(x.shape(), axis);
                for o in 0..outer {
                    for j in 0..inner {
                        let s: f32 = (0..len).map(|i| y.data()[(o * len + i) * inner + j]).sum();
                        prop_assert!((s - 1.0).abs() <= 1e-6);
                    }
                }
            }
        }

        #[test]
        fn layer_norm_standardizes(data in vec_strategy(32)) {
            let x = Tensor::new(vec![2, 16], data).unwrap();
            let (_, v0) = moments(&x, 1);
            prop_assume!(v0.iter().all(|&v| v > 1e-2));
            // eps far below the variance so the output variance is 1 up to rounding
            let y = layer_norm(&x, 1, 1e-10, None, None);
            let (mu, var) = moments(&y, 1);
            for (m, v) in mu.iter().zip(&var) {
                prop_assert!(m.abs() <= 1e-6, "mean {}", m);
                prop_assert!((v - 1.0).abs() <= 1e-5, "variance {}", v);
            }
        }

        #[test]
        fn max_pool_dominates_avg_pool(data in vec_strategy(2 * 36)) {
            let x = Tensor::new(vec![1, 2, 6, 6], data).unwrap();
            for w in [1usize, 2, 3] {
                let mx = pool(&x, w, true);
                let av = pool(&x, w, false);
                for (a, b) in mx.data().iter().zip(av.data()) {
                    prop_assert!(a >= b);
                }
            }
        }

        #[test]
        fn execution_is_repeatable(data in vec_strategy(12)) {
            let g = single(NodeKind::Gelu, vec![3, 4], vec![]);
            let x = Tensor::new(vec![3, 4], data).unwrap();
            let a = run1(&g, x.clone());
            let b = run1(&g, x);
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
