use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, Corruption, Domain};
use super::LabeledSet;
use crate::error::{Error, Result};
use crate::neural::Matrix;
use crate::rng::{derive_seed, rng_for, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Benign,
    Adversarial,
}

/// A mini-batch with optional labels and a per-row poison mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    labels: Option<Vec<usize>>,
    poison_mask: Vec<bool>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::dim("batch label count differs from row count"));
            }
        }
        let poison_mask = vec![false; inputs.rows()];
        Ok(Self {
            inputs,
            labels,
            poison_mask,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// Ground-truth labels, if the stream retains them. Honest adaptation
    /// never calls this; evaluation and the attacker's own stream do.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn poison_mask(&self) -> &[bool] {
        &self.poison_mask
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn poisoned_count(&self) -> usize {
        self.poison_mask.iter().filter(|&&m| m).count()
    }

    /// Same batch without labels.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Replace the inputs and mark `mask` rows as poisoned.
    pub fn with_poison(&self, inputs: Matrix, mask: Vec<bool>) -> Result<Self> {
        if inputs.rows() != self.len() || inputs.cols() != self.inputs.cols() || mask.len() != self.len()
        {
            return Err(Error::dim("poisoned batch shape differs from clean batch"));
        }
        Ok(Self {
            inputs,
            labels: self.labels.clone(),
            poison_mask: mask,
        })
    }

    pub fn concat(parts: &[&Batch]) -> Result<Self> {
        let inputs = Matrix::vstack(&parts.iter().map(|b| &b.inputs).collect::<Vec<_>>())?;
        let labels = parts
            .iter()
            .map(|b| b.labels.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        let poison_mask = parts.iter().flat_map(|b| b.poison_mask.clone()).collect();
        Ok(Self {
            inputs,
            labels,
            poison_mask,
        })
    }
}

/// One client's ordered batches drawn from a single corrupted domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientStream {
    pub id: usize,
    pub batches: Vec<Batch>,
    pub domain: Domain,
    pub role: Role,
}

impl ClientStream {
    pub fn samples(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }
}

/// Distinct `(kind, 5)` per client, cycling through the corruption kinds.
pub fn default_assignment(clients: usize) -> Vec<Domain> {
    (0..clients)
        .map(|i| Domain {
            kind: Corruption::ALL[i % Corruption::ALL.len()],
            severity: 5,
        })
        .collect()
}

/// Split `set` into disjoint, class-balanced client streams, corrupt each
/// client's share with its assigned domain and cut it into batches of `batch`
/// rows whose classes alternate round-robin. A trailing single row is folded
/// into the previous batch so every batch supports batch statistics.
pub fn partition(
    set: &LabeledSet,
    clients: usize,
    assignment: &[Domain],
    batch: usize,
    retain_labels: bool,
    seed: u64,
) -> Result<Vec<ClientStream>> {
    if clients == 0 {
        return Err(Error::config("partition needs at least one client"));
    }
    if assignment.len() != clients {
        return Err(Error::config(format!(
            "{} domains assigned to {clients} clients",
            assignment.len()
        )));
    }
    if let Some(d) = assignment.iter().find(|d| !(1..=5).contains(&d.severity)) {
        return Err(Error::config(format!("stream severity {} outside 1..=5", d.severity)));
    }
    let share = set.len() / clients;
    if batch == 0 || batch > share {
        return Err(Error::config(format!(
            "batch size {batch} exceeds per-client share {share}"
        )));
    }

    let orders = client_orders(set, clients, seed);
    orders
        .into_iter()
        .enumerate()
        .map(|(id, order)| {
            let (x, labels) = set.subset_unchecked(&order);
            let part = LabeledSet {
                inputs: x,
                labels,
                classes: set.classes(),
            };
            let domain = assignment[id];
            let part = corrupt(
                &part,
                domain.kind,
                domain.severity,
                derive_seed(seed, &[tag::CORRUPT, id as u64]),
            )?;
            let mut bounds: Vec<(usize, usize)> = (0..part.len())
                .step_by(batch)
                .map(|s| (s, (s + batch).min(part.len())))
                .collect();
            if bounds.len() > 1 && bounds.last().is_some_and(|(s, e)| e - s < 2) {
                let (_, e) = bounds.pop().expect("non-empty");
                bounds.last_mut().expect("non-empty").1 = e;
            }
            let batches = bounds
                .into_iter()
                .map(|(s, e)| {
                    let idx: Vec<usize> = (s..e).collect();
                    let (bx, by) = part.subset_unchecked(&idx);
                    Batch::new(bx, retain_labels.then_some(by))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClientStream {
                id,
                batches,
                domain,
                role: Role::Benign,
            })
        })
        .collect()
}

/// Per-client row order: classes dealt round-robin across clients, then
/// interleaved round-robin within each client.
fn client_orders(set: &LabeledSet, clients: usize, seed: u64) -> Vec<Vec<usize>> {
    let k = set.classes();
    let mut rng = rng_for(seed, &[tag::PARTITION]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in set.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut owned: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); k]; clients];
    let mut next = 0;
    for (y, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            owned[next % clients][y].push(i);
            next += 1;
        }
    }
    owned
        .into_iter()
        .map(|queues| {
            let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
            (0..longest)
                .flat_map(|r| queues.iter().filter_map(move |q| q.get(r).copied()))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_source;

    fn clean(n: usize) -> Vec<Domain> {
        default_assignment(n)
    }

    #[test]
    fn assignment_is_a_disjoint_cover() {
        let set = gen_source(4, 3, 4, 31).unwrap();
        for n in [1, 2, 5, 7] {
            let mut all: Vec<usize> = client_orders(&set, n, 9).concat();
            all.sort_unstable();
            assert_eq!(all, (0..set.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_client_covers_everything() {
        let set = gen_source(1, 3, 4, 20).unwrap();
        let s = partition(&set, 1, &clean(1), 7, true, 5).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].samples(), set.len());
        assert!(s[0].batches.iter().all(|b| b.len() >= 2));
    }

    #[test]
    fn batches_are_class_balanced() {
        let set = gen_source(2, 4, 4, 50).unwrap();
        let s = partition(&set, 2, &clean(2), 20, true, 5).unwrap();
        for st in &s {
            for b in &st.batches {
                let mut h = [0usize; 4];
                for &y in b.labels().unwrap() {
                    h[y] += 1;
                }
                let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
                assert!(hi - lo <= 1, "{h:?}");
            }
        }
    }

    #[test]
    fn labels_dropped_when_not_retained() {
        let set = gen_source(3, 2, 4, 10).unwrap();
        let s = partition(&set, 2, &clean(2), 5, false, 1).unwrap();
        assert!(s.iter().flat_map(|c| &c.batches).all(|b| b.labels().is_none()));
    }

    #[test]
    fn oversized_batch_is_a_config_error() {
        let set = gen_source(3, 2, 4, 10).unwrap();
        assert!(matches!(
            partition(&set, 4, &clean(4), 6, true, 1),
            Err(Error::Config(_))
        ));
    }
}
