use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{is_permutation, normalize_axis, Tensor};
use crate::error::{Error, Result};

/// Operator of a graph node. Attributes live in the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs", rename_all = "snake_case")]
pub enum NodeKind {
    /// `a @ b` over the last two dims; `b` is either rank 2 or shares `a`'s batch dims.
    #[serde(rename = "matmul")]
    MatMul,
    /// `x @ weight + bias` over the last dim. Params: `weight [in, out]`, optional `bias [out]`.
    Dense,
    /// NCHW convolution. Params: `weight [F, C, k, k]`, optional `bias [F]`.
    Conv2d {
        stride: usize,
        pad: usize,
        kernel: usize,
    },
    /// Adds `bias` along the last dim.
    AddBias,
    ElemAdd,
    ElemMul,
    Relu,
    Gelu,
    Softmax {
        axis: isize,
    },
    /// Normalizes along `axis`. Optional params `gamma`, `beta`.
    LayerNorm {
        axis: isize,
        eps: f32,
    },
    /// Non-overlapping NCHW pooling with stride equal to the window.
    AvgPool {
        window: usize,
    },
    MaxPool {
        window: usize,
    },
    Transpose {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::MatMul => "matmul",
            NodeKind::Dense => "dense",
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::AddBias => "add_bias",
            NodeKind::ElemAdd => "elem_add",
            NodeKind::ElemMul => "elem_mul",
            NodeKind::Relu => "relu",
            NodeKind::Gelu => "gelu",
            NodeKind::Softmax { .. } => "softmax",
            NodeKind::LayerNorm { .. } => "layer_norm",
            NodeKind::AvgPool { .. } => "avg_pool",
            NodeKind::MaxPool { .. } => "max_pool",
            NodeKind::Transpose { .. } => "transpose",
            NodeKind::Reshape { .. } => "reshape",
        }
    }

    /// True for operators that are not linear maps of their inputs.
    pub fn is_nonlinear(&self) -> bool {
        matches!(
            self,
            NodeKind::Relu
                | NodeKind::Gelu
                | NodeKind::Softmax { .. }
                | NodeKind::LayerNorm { .. }
                | NodeKind::MaxPool { .. }
        )
    }

    fn arity(&self) -> usize {
        match self {
            NodeKind::MatMul | NodeKind::ElemAdd | NodeKind::ElemMul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    /// Producer of each operand: a node id or a graph input name.
    pub inputs: Vec<String>,
    pub params: BTreeMap<String, Tensor>,
}

impl Node {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<Node>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    DuplicateId,
    UnknownReference,
    Cycle,
    Arity,
    ShapeMismatch,
    MissingParam,
    BadAttribute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    /// Ids of the nodes (or inputs) involved.
    pub nodes: Vec<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} [{}]: {}", self.kind, self.nodes.join(", "), self.message)
    }
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, nodes: Vec<String>, message: String) -> Self {
        Diagnostic {
            kind,
            nodes,
            message,
        }
    }
}

impl Graph {
    pub fn new(inputs: Vec<GraphInput>, nodes: Vec<Node>, outputs: Vec<String>) -> Self {
        Graph {
            inputs,
            nodes,
            outputs,
        }
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn input(&self, name: &str) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.name == name)
    }

    /// Number of scalar parameters across all nodes.
    pub fn parameter_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.params.values())
            .map(Tensor::len)
            .sum()
    }

    /// Parameter storage at FP32.
    pub fn parameter_bytes(&self) -> usize {
        4 * self.parameter_count()
    }

    /// Node indices in an order where producers come first.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        match self.order_or_cycle() {
            Ok(order) => Ok(order),
            Err(cycle) => Err(Error::structural(format!(
                "graph has a cycle through {}",
                cycle.join(" -> ")
            ))),
        }
    }

    fn order_or_cycle(&self) -> std::result::Result<Vec<usize>, Vec<String>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; self.nodes.len()];
        let mut order = Vec::with_capacity(self.nodes.len());
        for root in 0..self.nodes.len() {
            if state[root] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
            state[root] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                let deps = &self.nodes[node].inputs;
                if *next < deps.len() {
                    let dep = &deps[*next];
                    *next += 1;
                    if let Some(&d) = index.get(dep.as_str()) {
                        match state[d] {
                            0 => {
                                state[d] = 1;
                                stack.push((d, 0));
                            }
                            1 => {
                                let start = stack.iter().position(|&(n, _)| n == d).unwrap();
                                return Err(stack[start..]
                                    .iter()
                                    .map(|&(n, _)| self.nodes[n].id.clone())
                                    .collect());
                            }
                            _ => {}
                        }
                    }
                } else {
                    state[node] = 2;
                    order.push(node);
                    stack.pop();
                }
            }
        }
        Ok(order)
    }

    /// Structural and shape checks. An empty list means the graph is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        self.check().1
    }

    /// Output shape of every node and graph input.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let (shapes, diags) = self.check();
        match diags.first() {
            None => Ok(shapes),
            Some(d) => Err(Error::structural(d.to_string())),
        }
    }

    fn check(&self) -> (BTreeMap<String, Vec<usize>>, Vec<Diagnostic>) {
        use DiagnosticKind::*;
        let mut diags = Vec::new();
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for input in &self.inputs {
            if input.shape.is_empty() || input.shape.contains(&0) {
                diags.push(Diagnostic::new(
                    BadAttribute,
                    vec![input.name.clone()],
                    format!("input shape {:?} is invalid", input.shape),
                ));
            }
            if seen.insert(input.name.clone(), ()).is_some() {
                diags.push(Diagnostic::new(
                    DuplicateId,
                    vec![input.name.clone()],
                    "duplicate input name".into(),
                ));
            }
            shapes.insert(input.name.clone(), input.shape.clone());
        }
        for node in &self.nodes {
            if seen.insert(node.id.clone(), ()).is_some() {
                diags.push(Diagnostic::new(
                    DuplicateId,
                    vec![node.id.clone()],
                    "id used more than once".into(),
                ));
            }
        }
        for node in &self.nodes {
            for dep in &node.inputs {
                if !seen.contains_key(dep) {
                    diags.push(Diagnostic::new(
                        UnknownReference,
                        vec![node.id.clone(), dep.clone()],
                        format!("node '{}' reads unknown producer '{dep}'", node.id),
                    ));
                }
            }
        }
        for out in &self.outputs {
            if !seen.contains_key(out) {
                diags.push(Diagnostic::new(
                    UnknownReference,
                    vec![out.clone()],
                    format!("output '{out}' does not exist"),
                ));
            }
        }
        if self.outputs.is_empty() {
            diags.push(Diagnostic::new(
                UnknownReference,
                vec![],
                "graph declares no outputs".into(),
            ));
        }
        let order = match self.order_or_cycle() {
            Ok(o) => o,
            Err(cycle) => {
                diags.push(Diagnostic::new(
                    Cycle,
                    cycle.clone(),
                    format!("cycle through {}", cycle.join(" -> ")),
                ));
                return (shapes, diags);
            }
        };
        if !diags.is_empty() {
            return (shapes, diags);
        }
        for &i in &order {
            let node = &self.nodes[i];
            if node.inputs.len() != node.kind.arity() {
                diags.push(Diagnostic::new(
                    Arity,
                    vec![node.id.clone()],
                    format!(
                        "{} takes {} operand(s), got {}",
                        node.kind.name(),
                        node.kind.arity(),
                        node.inputs.len()
                    ),
                ));
                continue;
            }
            let operands: Option<Vec<&Vec<usize>>> =
                node.inputs.iter().map(|d| shapes.get(d)).collect();
            // an upstream failure already produced a diagnostic
            let Some(operands) = operands else { continue };
            match infer_node(node, &operands) {
                Ok(shape) => {
                    shapes.insert(node.id.clone(), shape);
                }
                Err(d) => diags.push(d),
            }
        }
        (shapes, diags)
    }
}

fn shape_err(node: &Node, involved: Vec<String>, msg: String) -> Diagnostic {
    let _ = node;
    Diagnostic::new(DiagnosticKind::ShapeMismatch, involved, msg)
}

fn need_param<'a>(node: &'a Node, name: &str) -> std::result::Result<&'a Tensor, Diagnostic> {
    node.param(name).ok_or_else(|| {
        Diagnostic::new(
            DiagnosticKind::MissingParam,
            vec![node.id.clone()],
            format!("{} '{}' needs parameter '{name}'", node.kind.name(), node.id),
        )
    })
}

fn bad_attr(node: &Node, msg: String) -> Diagnostic {
    Diagnostic::new(DiagnosticKind::BadAttribute, vec![node.id.clone()], msg)
}

fn check_vector_param(
    node: &Node,
    name: &str,
    len: usize,
) -> std::result::Result<(), Diagnostic> {
    if let Some(p) = node.param(name) {
        if p.shape() != [len] {
            return Err(shape_err(
                node,
                vec![node.id.clone()],
                format!(
                    "parameter '{name}' of '{}' has shape {:?}, expected [{len}]",
                    node.id,
                    p.shape()
                ),
            ));
        }
    }
    Ok(())
}

pub(crate) fn conv_output_hw(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
        return None;
    }
    Some(((h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1))
}

fn infer_node(node: &Node, ops: &[&Vec<usize>]) -> std::result::Result<Vec<usize>, Diagnostic> {
    let id = node.id.clone();
    match &node.kind {
        NodeKind::MatMul => {
            let (a, b) = (ops[0], ops[1]);
            if a.len() < 2 || b.len() < 2 {
                return Err(shape_err(
                    node,
                    node.inputs.clone(),
                    format!("matmul '{id}' needs rank >= 2 operands, got {a:?} and {b:?}"),
                ));
            }
            let (k1, k2) = (a[a.len() - 1], b[b.len() - 2]);
            let batched_ok = b.len() == 2 || (a.len() == b.len() && a[..a.len() - 2] == b[..b.len() - 2]);
            if k1 != k2 || !batched_ok {
                return Err(shape_err(
                    node,
                    node.inputs.clone(),
                    format!(
                        "matmul '{id}': {a:?} x {b:?} do not align (inner {k1} vs {k2})"
                    ),
                ));
            }
            let mut out = a.clone();
            *out.last_mut().unwrap() = b[b.len() - 1];
            Ok(out)
        }
        NodeKind::Dense => {
            let x = ops[0];
            let w = need_param(node, "weight")?;
            let ws = w.shape();
            if ws.len() != 2 || ws[0] != *x.last().unwrap() {
                return Err(shape_err(
                    node,
                    vec![node.inputs[0].clone(), id.clone()],
                    format!("dense '{id}': input {x:?} does not match weight {ws:?}"),
                ));
            }
            check_vector_param(node, "bias", ws[1])?;
            let mut out = x.clone();
            *out.last_mut().unwrap() = ws[1];
            Ok(out)
        }
        NodeKind::Conv2d {
            stride,
            pad,
            kernel,
        } => {
            let x = ops[0];
            if x.len() != 4 {
                return Err(shape_err(
                    node,
                    vec![node.inputs[0].clone(), id.clone()],
                    format!("conv2d '{id}' needs NCHW input, got {x:?}"),
                ));
            }
            let w = need_param(node, "weight")?;
            let ws = w.shape();
            if ws.len() != 4 || ws[1] != x[1] || ws[2] != *kernel || ws[3] != *kernel {
                return Err(shape_err(
                    node,
                    vec![node.inputs[0].clone(), id.clone()],
                    format!("conv2d '{id}': weight {ws:?} incompatible with input {x:?} and kernel {kernel}"),
                ));
            }
            check_vector_param(node, "bias", ws[0])?;
            let (ho, wo) = conv_output_hw(x[2], x[3], *kernel, *stride, *pad).ok_or_else(|| {
                bad_attr(
                    node,
                    format!("conv2d '{id}': kernel {kernel} / stride {stride} / pad {pad} do not fit {x:?}"),
                )
            })?;
            Ok(vec![x[0], ws[0], ho, wo])
        }
        NodeKind::AddBias => {
            let x = ops[0];
            let b = need_param(node, "bias")?;
            if b.shape() != [*x.last().unwrap()] {
                return Err(shape_err(
                    node,
                    vec![node.inputs[0].clone(), id.clone()],
                    format!("add_bias '{id}': bias {:?} vs input {x:?}", b.shape()),
                ));
            }
            Ok(x.clone())
        }
        NodeKind::ElemAdd | NodeKind::ElemMul => {
            if ops[0] != ops[1] {
                return Err(shape_err(
                    node,
                    node.inputs.clone(),
                    format!("{} '{id}': {:?} vs {:?}", node.kind.name(), ops[0], ops[1]),
                ));
            }
            Ok(ops[0].clone())
        }
        NodeKind::Relu | NodeKind::Gelu => Ok(ops[0].clone()),
        NodeKind::Softmax { axis } => {
            normalize_axis(*axis, ops[0].len())
                .ok_or_else(|| bad_attr(node, format!("softmax '{id}': axis {axis} out of range")))?;
            Ok(ops[0].clone())
        }
        NodeKind::LayerNorm { axis, eps } => {
            let a = normalize_axis(*axis, ops[0].len())
                .ok_or_else(|| bad_attr(node, format!("layer_norm '{id}': axis {axis} out of range")))?;
            if !(*eps > 0.0 && eps.is_finite()) {
                return Err(bad_attr(node, format!("layer_norm '{id}': eps must be > 0, got {eps}")));
            }
            check_vector_param(node, "gamma", ops[0][a])?;
            check_vector_param(node, "beta", ops[0][a])?;
            Ok(ops[0].clone())
        }
        NodeKind::AvgPool { window } | NodeKind::MaxPool { window } => {
            let x = ops[0];
            if x.len() != 4 || *window == 0 || x[2] < *window || x[3] < *window {
                return Err(bad_attr(
                    node,
                    format!("{} '{id}': window {window} does not fit {x:?}", node.kind.name()),
                ));
            }
            Ok(vec![x[0], x[1], x[2] / window, x[3] / window])
        }
        NodeKind::Transpose { perm } => {
            if !is_permutation(perm, ops[0].len()) {
                return Err(bad_attr(
                    node,
                    format!("transpose '{id}': {perm:?} is not a permutation of rank {}", ops[0].len()),
                ));
            }
            Ok(perm.iter().map(|&p| ops[0][p]).collect())
        }
        NodeKind::Reshape { shape } => {
            let from: usize = ops[0].iter().product();
            let to: usize = shape.iter().product();
            if shape.is_empty() || shape.contains(&0) || from != to {
                return Err(shape_err(
                    node,
                    vec![node.inputs[0].clone(), id.clone()],
                    format!("reshape '{id}': cannot view {:?} as {shape:?}", ops[0]),
                ));
            }
            Ok(shape.clone())
        }
    }
}

/// Incremental graph construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: Vec<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> String {
        self.inputs.push(GraphInput {
            name: name.to_string(),
            shape,
        });
        name.to_string()
    }

    pub fn node(&mut self, id: &str, kind: NodeKind, inputs: &[&str]) -> String {
        self.node_with(id, kind, inputs, Vec::new())
    }

    pub fn node_with(
        &mut self,
        id: &str,
        kind: NodeKind,
        inputs: &[&str],
        params: Vec<(&str, Tensor)>,
    ) -> String {
        self.nodes.push(Node {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
        id.to_string()
    }

    pub fn output(&mut self, id: &str) {
        self.outputs.push(id.to_string());
    }

    pub fn build(self) -> Graph {
        Graph::new(self.inputs, self.nodes, self.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_kind_strings_match_names() {
        let kinds = [
            NodeKind::MatMul,
            NodeKind::Dense,
            NodeKind::Conv2d { stride: 1, pad: 0, kernel: 1 },
            NodeKind::AddBias,
            NodeKind::ElemAdd,
            NodeKind::ElemMul,
            NodeKind::Relu,
            NodeKind::Gelu,
            NodeKind::Softmax { axis: -1 },
            NodeKind::LayerNorm { axis: -1, eps: 1e-5 },
            NodeKind::AvgPool { window: 2 },
            NodeKind::MaxPool { window: 2 },
            NodeKind::Transpose { perm: vec![0] },
            NodeKind::Reshape { shape: vec![1] },
        ];
        for k in kinds {
            let v = serde_json::to_value(&k).unwrap();
            assert_eq!(v["kind"], k.name());
        }
    }

    fn mlp() -> Graph {
        let mut g = GraphBuilder::new();
        g.input("x", vec![4, 3]);
        g.node_with(
            "fc1",
            NodeKind::Dense,
            &["x"],
            vec![
                ("weight", Tensor::zeros(vec![3, 5])),
                ("bias", Tensor::zeros(vec![5])),
            ],
        );
        g.node("act", NodeKind::Gelu, &["fc1"]);
        g.node_with("fc2", NodeKind::Dense, &["act"], vec![("weight", Tensor::zeros(vec![5, 2]))]);
        g.output("fc2");
        g.build()
    }

    #[test]
    fn well_formed_mlp_is_clean() {
        let g = mlp();
        assert!(g.validate().is_empty());
        assert_eq!(g.infer_shapes().unwrap()["fc2"], vec![4, 2]);
        assert_eq!(g.parameter_count(), 15 + 5 + 10);
    }

    #[test]
    fn matmul_mismatch_names_both_operands() {
        let mut g = GraphBuilder::new();
        g.input("a", vec![3, 4]);
        g.input("b", vec![5, 2]);
        g.node("pa", NodeKind::Relu, &["a"]);
        g.node("pb", NodeKind::Relu, &["b"]);
        g.node("mm", NodeKind::MatMul, &["pa", "pb"]);
        g.output("mm");
        let d = g.build().validate();
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::ShapeMismatch);
        assert!(d[0].nodes.contains(&"pa".to_string()));
        assert!(d[0].nodes.contains(&"pb".to_string()));
    }

    #[test]
    fn cycle_is_reported_with_members() {
        let mut g = GraphBuilder::new();
        g.input("x", vec![2]);
        g.node("a", NodeKind::ElemAdd, &["x", "c"]);
        g.node("b", NodeKind::Relu, &["a"]);
        g.node("c", NodeKind::Relu, &["b"]);
        g.output("c");
        let g = g.build();
        let d = g.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::Cycle);
        let mut members = d[0].nodes.clone();
        members.sort();
        assert_eq!(members, vec!["a", "b", "c"]);
        assert!(g.topological_order().is_err());
    }

    #[test]
    fn conv_shape_arithmetic() {
        let mut g = GraphBuilder::new();
        g.input("x", vec![1, 3, 8, 8]);
        g.node_with(
            "conv",
            NodeKind::Conv2d {
                stride: 1,
                pad: 1,
                kernel: 3,
            },
            &["x"],
            vec![("weight", Tensor::zeros(vec![16, 3, 3, 3]))],
        );
        g.output("conv");
        assert_eq!(g.build().infer_shapes().unwrap()["conv"], vec![1, 16, 8, 8]);
    }

    #[test]
    fn other_diagnostics() {
        let mut g = GraphBuilder::new();
        g.input("x", vec![2, 3]);
        g.node("ln", NodeKind::LayerNorm { axis: -1, eps: 0.0 }, &["x"]);
        g.node("d", NodeKind::Dense, &["x"]);
        g.node("t", NodeKind::Transpose { perm: vec![0, 0] }, &["x"]);
        g.node("r", NodeKind::Reshape { shape: vec![5] }, &["x"]);
        g.node("u", NodeKind::Relu, &["nowhere"]);
        g.output("ln");
        let d = g.build().validate();
        assert!(d.iter().any(|d| d.kind == DiagnosticKind::UnknownReference));

        let mut g = GraphBuilder::new();
        g.input("x", vec![2, 3]);
        g.node("ln", NodeKind::LayerNorm { axis: -1, eps: 0.0 }, &["x"]);
        g.node("d", NodeKind::Dense, &["x"]);
        g.node("t", NodeKind::Transpose { perm: vec![0, 0] }, &["x"]);
        g.node("r", NodeKind::Reshape { shape: vec![5] }, &["x"]);
        g.node("s", NodeKind::Softmax { axis: 2 }, &["x"]);
        g.output("ln");
        let kinds: Vec<_> = g.build().validate().into_iter().map(|d| d.kind).collect();
        assert_eq!(
            kinds,
            vec![
                DiagnosticKind::BadAttribute,
                DiagnosticKind::MissingParam,
                DiagnosticKind::BadAttribute,
                DiagnosticKind::ShapeMismatch,
                DiagnosticKind::BadAttribute,
            ]
        );
    }

    #[test]
    fn kind_json_shape() {
        let k = NodeKind::Conv2d {
            stride: 2,
            pad: 1,
            kernel: 3,
        };
        let v = serde_json::to_value(&k).unwrap();
        assert_eq!(v["kind"], "conv2d");
        assert_eq!(v["attrs"]["kernel"], 3);
        let relu: NodeKind = serde_json::from_str(r#"{"kind":"relu"}"#).unwrap();
        assert_eq!(relu, NodeKind::Relu);
    }
}
