use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One random class order chunked into tasks of two classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub order_id: usize,
    /// Seed the order was drawn from; runs on this order derive their streams from it.
    pub seed: u64,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSequence {
    /// All classes in arrival order.
    pub fn class_order(&self) -> Vec<usize> {
        self.tasks.iter().flatten().copied().collect()
    }

    pub fn class_count(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    /// Head indices `start..end` occupied by task `k`.
    pub fn task_range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.tasks[..k].iter().map(Vec::len).sum();
        start..start + self.tasks[k].len()
    }
}

/// `n_orders` random permutations of `classes`, each chunked into pairs with
/// a trailing singleton for odd class counts. Order `i` does not depend on
/// `n_orders`, so extending a run keeps the earlier orders.
pub fn generate_task_sequences(
    classes: &[usize],
    n_orders: usize,
    seed: u64,
) -> Result<Vec<TaskSequence>> {
    if n_orders == 0 {
        return Err(Error::InvalidConfig("need at least one task order".into()));
    }
    let unique: BTreeSet<usize> = classes.iter().copied().collect();
    if unique.len() != classes.len() {
        return Err(Error::InvalidConfig("class set contains duplicates".into()));
    }
    if classes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two classes, got {}",
            classes.len()
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_orders)
        .map(|order_id| {
            let order_seed: u64 = master.random();
            let mut perm: Vec<usize> = unique.iter().copied().collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
            TaskSequence {
                order_id,
                seed: order_seed,
                tasks: perm.chunks(2).map(<[usize]>::to_vec).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_classes_give_four_pairs_and_a_singleton() {
        let seqs = generate_task_sequences(&(0..9).collect::<Vec<_>>(), 3, 7).unwrap();
        for s in &seqs {
            assert_eq!(s.tasks.len(), 5);
            assert!(s.tasks[..4].iter().all(|t| t.len() == 2));
            assert_eq!(s.tasks[4].len(), 1);
        }
    }

    #[test]
    fn reproducible_and_prefix_stable() {
        let classes = [3, 1, 4, 0];
        let a = generate_task_sequences(&classes, 5, 11).unwrap();
        assert_eq!(a, generate_task_sequences(&classes, 5, 11).unwrap());
        assert_eq!(
            a[..2],
            generate_task_sequences(&classes, 2, 11).unwrap()[..]
        );
    }

    #[test]
    fn every_order_partitions_the_classes() {
        let classes: Vec<usize> = (0..19).collect();
        for s in generate_task_sequences(&classes, 30, 0).unwrap() {
            let mut seen = s.class_order();
            seen.sort_unstable();
            assert_eq!(seen, classes);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(generate_task_sequences(&[0], 1, 0).is_err());
        assert!(generate_task_sequences(&[0, 1], 0, 0).is_err());
        assert!(generate_task_sequences(&[0, 0, 1], 1, 0).is_err());
    }

    #[test]
    fn task_ranges_are_contiguous() {
        let s = TaskSequence {
            order_id: 0,
            seed: 0,
            tasks: vec![vec![4, 2], vec![0, 1], vec![3]],
        };
        assert_eq!(s.task_range(0), 0..2);
        assert_eq!(s.task_range(2), 4..5);
        assert_eq!(s.class_order(), vec![4, 2, 0, 1, 3]);
    }
}
