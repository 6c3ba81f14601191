use std::collections::BTreeMap;
use std::path::Path;

use neumat::ir::io::read_weights;
use neumat::ir::{Tensor, TensorMap};
use neumat::training::Dataset;

use crate::error::{CliError, CliResult};

/// A named input and the shape one forward pass expects.
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load(path)?)
}

/// Splits a dataset into forward-pass batches for a single-input model.
pub fn dataset_batches(data: &Dataset, inputs: &[InputSpec]) -> CliResult<Vec<TensorMap>> {
    let [input] = inputs else {
        return Err(CliError::usage(format!(
            "a dataset can only feed a single-input model, this one has {} inputs",
            inputs.len()
        )));
    };
    if input.shape.len() < 2 || input.shape[1..] != *data.sample_shape() {
        return Err(neumat::Error::Structural(format!(
            "input '{}' {:?} does not take batches of samples shaped {:?}",
            input.name,
            input.shape,
            data.sample_shape()
        ))
        .into());
    }
    if data.is_empty() {
        return Err(neumat::Error::Argument("dataset is empty".into()).into());
    }
    Ok(data.batches(&input.name, input.shape[0]))
}

/// Reads forward-pass input sets from a dataset (CSV, or a container with
/// `features` and `labels`) or from a container keyed by input name, where
/// each tensor has the input's shape or an extra leading sample axis.
pub fn load_input_sets(path: &Path, inputs: &[InputSpec]) -> CliResult<Vec<TensorMap>> {
    if is_csv(path) {
        return dataset_batches(&load_dataset(path)?, inputs);
    }
    let tensors = read_weights(std::fs::File::open(path)?)?;
    let named = inputs.iter().any(|i| tensors.contains_key(&i.name));
    if !named && tensors.contains_key("features") && tensors.contains_key("labels") {
        return dataset_batches(&Dataset::from_tensors(&tensors)?, inputs);
    }
    let mut count = None;
    for i in inputs {
        let t = tensors
            .get(&i.name)
            .ok_or_else(|| neumat::Error::Format(format!("input file has no tensor '{}'", i.name)))?;
        let n = if t.shape() == i.shape.as_slice() {
            1
        } else if t.rank() == i.shape.len() + 1 && t.shape()[1..] == *i.shape {
            t.shape()[0]
        } else {
            return Err(neumat::Error::Structural(format!(
                "tensor '{}' has shape {:?}, expected {:?} with an optional leading sample axis",
                i.name,
                t.shape(),
                i.shape
            ))
            .into());
        };
        if *count.get_or_insert(n) != n {
            return Err(neumat::Error::Structural("input tensors hold different sample counts".into()).into());
        }
    }
    let count = count.unwrap_or(0);
    if count == 0 {
        return Err(neumat::Error::Argument("input file holds no samples".into()).into());
    }
    let mut sets = vec![BTreeMap::new(); count];
    for i in inputs {
        let t = &tensors[&i.name];
        let per: usize = i.shape.iter().product();
        for (s, set) in sets.iter_mut().enumerate() {
            let data = t.data()[s * per..(s + 1) * per].to_vec();
            set.insert(i.name.clone(), Tensor::new(i.shape.clone(), data)?);
        }
    }
    Ok(sets)
}

/// Stacks per-set outputs along a new leading axis.
pub fn stack_outputs(sets: &[TensorMap]) -> CliResult<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let Some(first) = sets.first() else { return Ok(out) };
    for (name, t) in first {
        let mut shape = vec![sets.len()];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(t.len() * sets.len());
        for s in sets {
            data.extend_from_slice(s[name].data());
        }
        out.insert(name.clone(), Tensor::new(shape, data)?);
    }
    Ok(out)
}
