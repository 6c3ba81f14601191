use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::backward;
use super::data::Dataset;
use crate::error::{Error, Result};
use crate::ir::{execute_reference, Graph, Tensor, TensorMap};
use crate::lowering::{constants_as, execute_plan, forward, initial_slots, LoweredPlan, PwlMode, SlotId};

/// What the plan's single output holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Raw scores; the loss applies softmax cross-entropy.
    Logits,
    /// Class probabilities (a softmax inside the plan); the loss is their
    /// negative log.
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Accuracy-loss threshold above which the approximated model is retrained.
    pub acc_th: f64,
    /// SGD momentum; 0 is plain SGD.
    pub momentum: f64,
    pub head: Head,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            acc_th: 0.01,
            momentum: 0.9,
            head: Head::Logits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it freezes the weights, which is a useful control run
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::arg(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if !(self.acc_th.is_finite() && self.acc_th >= 0.0) {
            return Err(Error::arg(format!("acc_th must be non-negative, got {}", self.acc_th)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches.
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

pub fn history_to_csv(history: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss", "train_acc", "eval_acc"])?;
    for m in history {
        w.write_record([
            m.epoch.to_string(),
            m.loss.to_string(),
            m.train_acc.to_string(),
            m.eval_acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub plan: LoweredPlan,
    pub history: Vec<EpochMetrics>,
}

/// Shape facts of a plan that maps one `[P, ...]` input to `[P, classes]`.
struct Io {
    input: String,
    output_slot: SlotId,
    rows: usize,
    classes: usize,
}

fn plan_io(plan: &LoweredPlan, data: &Dataset) -> Result<Io> {
    if plan.inputs.len() != 1 || plan.outputs.len() != 1 {
        return Err(Error::Unsupported(format!(
            "training needs a plan with one input and one output, got {} and {}",
            plan.inputs.len(),
            plan.outputs.len()
        )));
    }
    let input_slot = plan.inputs[0].slot;
    let output_slot = plan.outputs[0].slot;
    let ishape = &plan.slots[input_slot].shape;
    let oshape = &plan.slots[output_slot].shape;
    if ishape.len() < 2 || ishape[1..] != *data.sample_shape() {
        return Err(Error::structural(format!(
            "plan input {ishape:?} does not take batches of samples shaped {:?}",
            data.sample_shape()
        )));
    }
    if oshape.len() != 2 || oshape[0] != ishape[0] {
        return Err(Error::Unsupported(format!(
            "classifier output must be [batch, classes], plan gives {oshape:?}"
        )));
    }
    if data.num_classes() > oshape[1] {
        return Err(Error::arg(format!(
            "labels go up to {} but the plan scores {} classes",
            data.num_classes() - 1,
            oshape[1]
        )));
    }
    Ok(Io {
        input: plan.inputs[0].name.clone(),
        output_slot,
        rows: ishape[0],
        classes: oshape[1],
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and output gradient for one row.
fn row_loss(head: Head, row: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    match head {
        Head::Logits => {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
            for (g, &z) in grad.iter_mut().zip(row) {
                *g = (z - m).exp() / sum;
            }
            grad[label] -= 1.0;
            sum.ln() + m - row[label]
        }
        Head::Probabilities => {
            const FLOOR: f64 = 1e-12;
            let p = row[label].max(FLOOR);
            grad.fill(0.0);
            if row[label] > FLOOR {
                grad[label] = -1.0 / p;
            }
            -p.ln()
        }
    }
}

struct Runner<'a> {
    plan: &'a LoweredPlan,
    io: Io,
    mode: PwlMode,
    consts: BTreeMap<SlotId, Vec<f64>>,
}

impl Runner<'_> {
    /// Forward over samples `idx` (at most `rows`), zero-padded.
    fn forward(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
        let n = data.sample_len();
        let mut x = vec![0.0; self.io.rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for (d, &v) in x[r * n..(r + 1) * n].iter_mut().zip(data.sample(i)) {
                *d = v as f64;
            }
        }
        let inputs = BTreeMap::from([(self.io.input.clone(), x)]);
        let mut vals = initial_slots(self.plan, &inputs, &self.consts)?;
        forward(self.plan, &mut vals, self.mode)?;
        Ok(vals)
    }

    /// Summed loss over `idx`, and gradients of the trainable slots added to `grads`.
    fn loss_and_grad(&self, data: &Dataset, idx: &[usize], head: Head, grads: &mut BTreeMap<SlotId, Vec<f64>>) -> Result<f64> {
        let vals = self.forward(data, idx)?;
        let out = vals[self.io.output_slot].as_deref().expect("output computed");
        let c = self.io.classes;
        let mut gout = vec![0.0; out.len()];
        let mut loss = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            loss += row_loss(head, &out[r * c..(r + 1) * c], data.label(i), &mut gout[r * c..(r + 1) * c]);
        }
        let mut slot_grads: Vec<Option<Vec<f64>>> = vec![None; self.plan.slots.len()];
        slot_grads[self.io.output_slot] = Some(gout);
        backward(self.plan, &vals, &mut slot_grads, self.mode)?;
        for (s, acc) in grads.iter_mut() {
            if let Some(g) = &slot_grads[*s] {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(loss)
    }

    fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::arg("accuracy needs at least one sample"));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let c = self.io.classes;
        let mut correct = 0;
        for idx in all.chunks(self.io.rows) {
            let vals = self.forward(data, idx)?;
            let out = vals[self.io.output_slot].as_deref().expect("output computed");
            for (r, &i) in idx.iter().enumerate() {
                if argmax(&out[r * c..(r + 1) * c]) == data.label(i) {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Fine-tunes the trainable constants of `plan` with minibatch SGD on the
/// cross-entropy loss, back-propagating through every primitive. Tables
/// stay fixed. In [`PwlMode::Table`] the network runs through its tables
/// (approximation-aware training); [`PwlMode::Exact`] trains the same plan
/// with the exact functions, as a baseline.
pub fn finetune(
    plan: &LoweredPlan,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mode: PwlMode,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if plan.is_int8() {
        return Err(Error::Unsupported(
            "INT8 matmul_block has no gradient; fine-tune the FP32 plan".into(),
        ));
    }
    let io = plan_io(plan, train)?;
    if let Some(e) = eval {
        plan_io(plan, e)?;
    }
    let trainable = plan.trainable_slots();
    let mut runner = Runner {
        plan,
        io,
        mode,
        consts: constants_as::<f64>(plan),
    };
    let mut velocity: BTreeMap<SlotId, Vec<f64>> =
        trainable.iter().map(|&s| (s, vec![0.0; plan.slots[s].len()])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<SlotId, Vec<f64>> =
                trainable.iter().map(|&s| (s, vec![0.0; plan.slots[s].len()])).collect();
            let mut loss = 0.0;
            for chunk in batch.chunks(runner.io.rows) {
                loss += runner.loss_and_grad(train, chunk, cfg.head, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss;
            batches += 1;
            for (s, g) in &grads {
                let v = velocity.get_mut(s).expect("velocity per trainable slot");
                let w = runner.consts.get_mut(s).expect("trainable slots are constants");
                for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi + gi * scale;
                    *wi -= cfg.learning_rate * *vi;
                }
            }
        }
        let train_acc = runner.accuracy(train)?;
        let eval_acc = eval.map(|e| runner.accuracy(e)).transpose()?;
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            train_acc,
            eval_acc,
        });
    }

    let mut out = plan.clone();
    for &s in &trainable {
        let shape = out.slots[s].shape.clone();
        let data = runner.consts[&s].iter().map(|&v| v as f32).collect();
        out.constants.insert(s, Tensor::new(shape, data)?);
    }
    Ok(FinetuneResult { plan: out, history })
}

/// Classification accuracy of `plan` run in `mode` (f64 interpreter).
pub fn plan_accuracy(plan: &LoweredPlan, data: &Dataset, mode: PwlMode) -> Result<f64> {
    let io = plan_io(plan, data)?;
    let runner = Runner {
        plan,
        io,
        mode,
        consts: constants_as::<f64>(plan),
    };
    runner.accuracy(data)
}

/// Mean loss over samples `indices` of `data` and its gradient with respect
/// to every trainable constant of `plan`.
pub fn loss_and_gradients(
    plan: &LoweredPlan,
    data: &Dataset,
    indices: &[usize],
    head: Head,
    mode: PwlMode,
) -> Result<(f64, BTreeMap<SlotId, Vec<f64>>)> {
    if indices.is_empty() {
        return Err(Error::arg("loss needs at least one sample"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::arg(format!("sample {i} is out of range for {} samples", data.len())));
    }
    let io = plan_io(plan, data)?;
    let runner = Runner {
        plan,
        io,
        mode,
        consts: constants_as::<f64>(plan),
    };
    let mut grads: BTreeMap<SlotId, Vec<f64>> = plan
        .trainable_slots()
        .into_iter()
        .map(|s| (s, vec![0.0; plan.slots[s].len()]))
        .collect();
    let mut loss = 0.0;
    for chunk in indices.chunks(runner.io.rows) {
        loss += runner.loss_and_grad(data, chunk, head, &mut grads)?;
    }
    let scale = 1.0 / indices.len() as f64;
    for g in grads.values_mut() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGap {
    pub reference_acc: f64,
    pub plan_acc: f64,
    /// `reference_acc - plan_acc`.
    pub acc_loss: f64,
    /// `acc_loss > acc_th`: the approximated model should be retrained.
    pub retrain: bool,
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batched_accuracy(data: &Dataset, input: &str, rows: usize, run: impl Fn(&TensorMap) -> Result<Tensor>) -> Result<f64> {
    let mut correct = 0;
    for (b, batch) in data.batches(input, rows).iter().enumerate() {
        let out = run(batch)?;
        if out.rank() != 2 || out.shape()[0] != rows {
            return Err(Error::Unsupported(format!(
                "classifier output must be [batch, classes], got {:?}",
                out.shape()
            )));
        }
        let c = out.shape()[1];
        for r in 0..rows {
            let i = b * rows + r;
            if i < data.len() && argmax_f32(&out.data()[r * c..(r + 1) * c]) == data.label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy lost by running `plan` instead of `reference`, both in FP32, and
/// whether that loss exceeds `acc_th`.
pub fn accuracy_gap(reference: &Graph, plan: &LoweredPlan, data: &Dataset, acc_th: f64) -> Result<AccuracyGap> {
    if data.is_empty() {
        return Err(Error::arg("accuracy gap needs a non-empty evaluation set"));
    }
    if reference.inputs.len() != 1 || reference.outputs.len() != 1 {
        return Err(Error::Unsupported("accuracy gap needs a single-input, single-output classifier".into()));
    }
    let input = reference.inputs[0].name.clone();
    let rows = reference.inputs[0].shape[0];
    let out = reference.outputs[0].clone();
    let reference_acc = batched_accuracy(data, &input, rows, |b| Ok(execute_reference(reference, b)?[&out].clone()))?;
    let pout = plan.outputs[0].name.clone();
    let plan_acc = batched_accuracy(data, &input, rows, |b| Ok(execute_plan(plan, b)?[&pout].clone()))?;
    let acc_loss = reference_acc - plan_acc;
    Ok(AccuracyGap {
        reference_acc,
        plan_acc,
        acc_loss,
        retrain: acc_loss > acc_th,
    })
}

/// Trainable constants of `plan` keyed `node.param`, the naming used by
/// weight containers.
pub fn trainable_weights(plan: &LoweredPlan) -> BTreeMap<String, Tensor> {
    plan.trainable_slots()
        .into_iter()
        .filter_map(|s| plan.constants.get(&s).map(|t| (plan.slots[s].name.clone(), t.clone())))
        .collect()
}

/// Copy of `graph` with node parameters replaced from `weights` (keys
/// `node.param`). Every key must name an existing parameter of the same shape.
pub fn apply_weights(graph: &Graph, weights: &BTreeMap<String, Tensor>) -> Result<Graph> {
    let mut g = graph.clone();
    for (key, t) in weights {
        let (node, param) = key
            .rsplit_once('.')
            .ok_or_else(|| Error::Format(format!("weight '{key}' is not of the form node.param")))?;
        let slot = g
            .nodes
            .iter_mut()
            .find(|n| n.id == node)
            .and_then(|n| n.params.get_mut(param))
            .ok_or_else(|| Error::structural(format!("graph has no parameter '{key}'")))?;
        if slot.shape() != t.shape() {
            return Err(Error::structural(format!(
                "weight '{key}' has shape {:?}, the graph expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(g)
}
