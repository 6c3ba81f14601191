use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ir::io::read_weights;
use crate::ir::{Tensor, TensorMap};

/// Labeled samples of a fixed shape, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(Error::arg(format!("sample shape {sample_shape:?} is empty")));
        }
        if features.len() != per * labels.len() {
            return Err(Error::arg(format!(
                "{} feature values do not split into {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            sample_shape,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Samples `indices` in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Groups samples into tensors of `batch` samples under input `name`;
    /// the last group is zero-padded.
    pub fn batches(&self, name: &str, batch: usize) -> Vec<TensorMap> {
        let n = self.sample_len();
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.sample_shape);
        (0..self.len())
            .step_by(batch.max(1))
            .map(|start| {
                let mut data = vec![0f32; batch * n];
                let end = (start + batch).min(self.len());
                data[..(end - start) * n].copy_from_slice(&self.features[start * n..end * n]);
                BTreeMap::from([(name.to_string(), Tensor::new(shape.clone(), data).expect("sized"))])
            })
            .collect()
    }

    /// CSV rows `label,f_1,...,f_d`; a first row whose label is not an
    /// integer is taken as a header.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let Some(first) = rec.get(0) else { continue };
            let label = match first.parse::<usize>() {
                Ok(l) => l,
                Err(_) if row == 0 => continue,
                Err(_) => return Err(Error::Format(format!("row {}: label '{first}' is not a class index", row + 1))),
            };
            let d = rec.len() - 1;
            if *width.get_or_insert(d) != d {
                return Err(Error::Format(format!(
                    "row {} has {d} features, earlier rows have {}",
                    row + 1,
                    width.unwrap()
                )));
            }
            for f in rec.iter().skip(1) {
                let v: f32 = f
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: '{f}' is not a number", row + 1)))?;
                features.push(v);
            }
            labels.push(label);
        }
        let d = width.ok_or_else(|| Error::Format("dataset has no rows".into()))?;
        Dataset::new(vec![d], features, labels)
    }

    /// Reads a CSV dataset, or a weight container holding `features`
    /// (`[N, ...]`) and `labels` (`[N]`) when the file does not end in `.csv`.
    pub fn load(path: &Path) -> Result<Self> {
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            return Dataset::from_csv_str(&std::fs::read_to_string(path)?);
        }
        let tensors = read_weights(std::fs::File::open(path)?)?;
        Dataset::from_tensors(&tensors)
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| {
            tensors
                .get(k)
                .ok_or_else(|| Error::Format(format!("dataset container lacks a '{k}' tensor")))
        };
        let (f, l) = (get("features")?, get("labels")?);
        if f.rank() < 2 || l.rank() != 1 || f.shape()[0] != l.len() {
            return Err(Error::Format(format!(
                "features {:?} and labels {:?} do not line up",
                f.shape(),
                l.shape()
            )));
        }
        let labels = l
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(f.shape()[1..].to_vec(), f.data().to_vec(), labels)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for i in 0..self.len() {
            let mut row = vec![self.labels[i].to_string()];
            row.extend(self.sample(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Two Gaussian clusters in `dim` dimensions centred at `-separation/2` and
/// `+separation/2` along every axis, `per_class` samples each, interleaved.
pub fn two_blobs(per_class: usize, dim: usize, separation: f32, std: f32, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, std).expect("finite std");
    let mut features = Vec::with_capacity(2 * per_class * dim);
    let mut labels = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for class in 0..2 {
            let centre = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
            for _ in 0..dim {
                features.push(centre + noise.sample(&mut rng));
            }
            labels.push(class);
        }
    }
    Dataset::new(vec![dim], features, labels).expect("consistent sizes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_and_without_header() {
        let a = Dataset::from_csv_str("label,f1,f2\n0,1.5,2\n1,-1,0.25\n").unwrap();
        let b = Dataset::from_csv_str("0,1.5,2\n1,-1,0.25\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sample(1), &[-1.0, 0.25]);
        assert_eq!(a.num_classes(), 2);
        assert_eq!(Dataset::from_csv_str(&a.to_csv().unwrap()).unwrap(), a);
        assert!(Dataset::from_csv_str("0,1\n1,2,3\n").is_err());
        assert!(Dataset::from_csv_str("0,1\nx,2\n").is_err());
    }

    #[test]
    fn padded_batches() {
        let d = Dataset::from_csv_str("0,1\n1,2\n0,3\n").unwrap();
        let b = d.batches("x", 2);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1]["x"].data(), &[3.0, 0.0]);
        assert_eq!(b[1]["x"].shape(), &[2, 1]);
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let d = two_blobs(50, 3, 4.0, 1.0, 7);
        assert_eq!(d.len(), 100);
        assert_eq!(d.labels().iter().filter(|&&l| l == 1).count(), 50);
        assert_eq!(d, two_blobs(50, 3, 4.0, 1.0, 7));
    }
}
