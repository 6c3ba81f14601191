//! Graph JSON and the `NMWT` tensor container.
//!
//! `NMWT` layout, all integers little-endian: the magic `NMWT`, a `u32`
//! version, then records until end of file. A record is a `u32` name length,
//! the UTF-8 name, a `u32` rank, `rank` dims as `u64`, and the `f32` payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::{Graph, GraphInput, Node, NodeKind};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NMWT";
pub const WEIGHTS_VERSION: u32 = 1;
pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Largest rank accepted when reading, to reject garbage early.
const MAX_RANK: u32 = 16;

pub fn write_weights<W: Write>(mut w: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn weights_to_bytes(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    write_weights(&mut out, tensors).expect("writing to memory");
    out
}

pub fn read_weights<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    weights_from_bytes(&bytes)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not an NMWT file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported NMWT version {version}")));
    }
    let mut out = BTreeMap::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("tensor '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = cur.u64()?;
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' shape {shape:?} exceeds the file")))?;
        let payload = cur.take(4 * len)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("NMWT file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    inputs: Vec<GraphInput>,
    nodes: Vec<NodeFile>,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    id: String,
    #[serde(flatten)]
    kind: NodeKind,
    inputs: Vec<String>,
    #[serde(default)]
    params: BTreeMap<String, String>,
}

/// Name under which a node parameter is stored in the weights container.
pub fn param_ref(node: &str, param: &str) -> String {
    format!("{node}.{param}")
}

/// Serializes the graph structure. Parameters become references into the
/// returned tensor map.
pub fn graph_to_json(graph: &Graph, weights_file: Option<&str>) -> (String, BTreeMap<String, Tensor>) {
    let mut tensors = BTreeMap::new();
    let nodes = graph
        .nodes
        .iter()
        .map(|n| {
            let params = n
                .params
                .iter()
                .map(|(k, t)| {
                    let r = param_ref(&n.id, k);
                    tensors.insert(r.clone(), t.clone());
                    (k.clone(), r)
                })
                .collect();
            NodeFile {
                id: n.id.clone(),
                kind: n.kind.clone(),
                inputs: n.inputs.clone(),
                params,
            }
        })
        .collect();
    let file = GraphFile {
        weights: weights_file.map(str::to_string),
        inputs: graph.inputs.clone(),
        nodes,
        outputs: graph.outputs.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("graph serializes");
    (json, tensors)
}

/// Parses graph JSON, resolving parameter references against `weights`.
pub fn graph_from_json(json: &str, weights: &BTreeMap<String, Tensor>) -> Result<Graph> {
    let file: GraphFile = serde_json::from_str(json)?;
    build_graph(file, weights)
}

fn build_graph(file: GraphFile, weights: &BTreeMap<String, Tensor>) -> Result<Graph> {
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for n in file.nodes {
        let mut params = BTreeMap::new();
        for (k, r) in n.params {
            let t = weights.get(&r).ok_or_else(|| {
                Error::Format(format!("node '{}' parameter '{k}' refers to missing tensor '{r}'", n.id))
            })?;
            params.insert(k, t.clone());
        }
        nodes.push(Node {
            id: n.id,
            kind: n.kind,
            inputs: n.inputs,
            params,
        });
    }
    Ok(Graph::new(file.inputs, nodes, file.outputs))
}

fn sidecar_for(path: &Path) -> PathBuf {
    path.with_extension("nmwt")
}

/// Writes `path` and a weights sidecar next to it with the `.nmwt` extension.
pub fn save_graph(graph: &Graph, path: &Path) -> Result<PathBuf> {
    let sidecar = sidecar_for(path);
    let name = sidecar
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (json, tensors) = graph_to_json(graph, Some(&name));
    std::fs::write(path, json + "\n")?;
    std::fs::write(&sidecar, weights_to_bytes(&tensors))?;
    Ok(sidecar)
}

/// Reads graph JSON plus the weights file it names (resolved next to the JSON).
pub fn load_graph(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path)?;
    let file: GraphFile = serde_json::from_str(&text)?;
    let weights = match &file.weights {
        Some(w) => {
            let wp = path.parent().unwrap_or(Path::new(".")).join(w);
            weights_from_bytes(&std::fs::read(&wp)?)?
        }
        None => BTreeMap::new(),
    };
    build_graph(file, &weights)
}
