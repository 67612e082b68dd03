//! Labeled sets, synthetic domain-shift benchmark, per-client streams and
//! the CIFAR-10-C ingestion path.

mod cifar;
mod corrupt;
mod stream;
mod synthetic;

pub use cifar::{load_cifar10c, read_dataset, write_dataset, DatasetHeader};
pub use corrupt::{corrupt, Corruption, Domain};
pub use stream::{default_assignment, partition, Batch, ClientStream, Role};
pub use synthetic::{gen_source, SyntheticDomain};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Matrix;

/// Inputs in `[0,1]^D` with integer class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    inputs: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.len() < classes {
            return Err(Error::InsufficientData(format!(
                "{} samples for {classes} classes",
                labels.len()
            )));
        }
        let mut seen = vec![false; classes];
        for &y in &labels {
            *seen
                .get_mut(y)
                .ok_or_else(|| Error::dim(format!("label {y} with {classes} classes")))? = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InsufficientData(format!("class {missing} absent")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs.cols()
    }

    pub(crate) fn with_inputs(&self, inputs: Matrix) -> Self {
        Self {
            inputs,
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Rows at `idx` without the class-coverage check.
    pub(crate) fn subset_unchecked(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

pub(crate) fn clamp_unit(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        *v = v.clamp(0.0, 1.0);
    }
}
