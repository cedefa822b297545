use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Per-class replay buffer of training-row indices.
///
/// Classes are addressed by head index (arrival position), so the buffer for
/// class `c` lives in slot `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayMemory {
    holdout: usize,
    total_classes: usize,
    per_class: Vec<Vec<usize>>,
}

impl ReplayMemory {
    pub fn new(holdout: usize, total_classes: usize) -> Self {
        Self {
            holdout,
            total_classes,
            per_class: Vec::new(),
        }
    }

    pub fn holdout(&self) -> usize {
        self.holdout
    }

    pub fn seen_classes(&self) -> usize {
        self.per_class.len()
    }

    /// `floor(S·|C| / seen)`.
    pub fn quota(&self, seen: usize) -> usize {
        (self.holdout * self.total_classes)
            .checked_div(seen)
            .unwrap_or(0)
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        self.per_class.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_class.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, class)` pairs of every retained sample.
    pub fn samples(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(c, rows)| rows.iter().map(move |&r| (r, c)))
    }

    /// Registers the next task's classes (`new_classes[i]` holds the rows of
    /// class `seen + i`) and re-balances every class to the new quota.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        new_classes: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<()> {
        let seen = self.per_class.len() + new_classes.len();
        if seen > self.total_classes {
            return Err(Error::InvalidConfig(format!(
                "memory sized for {} classes, asked to hold {seen}",
                self.total_classes
            )));
        }
        let quota = self.quota(seen);
        for rows in &mut self.per_class {
            if rows.len() > quota {
                *rows = sample_sorted(rows, quota, rng);
            }
        }
        for rows in new_classes {
            self.per_class
                .push(sample_sorted(rows, quota.min(rows.len()), rng));
        }
        Ok(())
    }

    /// Checks the quota rule against the number of rows available per class.
    pub fn check_invariant(&self, available: &[usize]) -> Result<()> {
        if available.len() != self.per_class.len() {
            return Err(Error::shape(
                "ReplayMemory::check_invariant",
                self.per_class.len(),
                available.len(),
            ));
        }
        let quota = self.quota(self.per_class.len());
        for (class, (rows, &avail)) in self.per_class.iter().zip(available).enumerate() {
            if rows.len() != quota.min(avail) {
                return Err(Error::InvalidConfig(format!(
                    "memory holds {} samples of class {class}, expected {}",
                    rows.len(),
                    quota.min(avail)
                )));
            }
        }
        if self.len() > self.holdout * self.total_classes {
            return Err(Error::InvalidConfig(
                "memory exceeds its total budget".into(),
            ));
        }
        Ok(())
    }
}

fn sample_sorted<R: Rng + ?Sized>(rows: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    let mut picked: Vec<usize> = index::sample(rng, rows.len(), amount)
        .into_iter()
        .map(|i| rows[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(start: usize, n: usize) -> Vec<usize> {
        (start..start + n).collect()
    }

    #[test]
    fn quota_arithmetic() {
        let m = ReplayMemory::new(6, 9);
        assert_eq!(m.quota(4), 13);
        assert_eq!(ReplayMemory::new(6, 19).quota(19), 6);
        assert_eq!(ReplayMemory::new(0, 9).quota(2), 0);
    }

    #[test]
    fn shrinks_old_classes_as_classes_arrive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ReplayMemory::new(6, 9);
        m.update(&[rows(0, 100), rows(100, 100)], &mut rng).unwrap();
        assert_eq!(m.counts(), vec![27, 27]);
        let before: Vec<usize> = m.class_indices(0).to_vec();
        m.update(&[rows(200, 100), rows(300, 5)], &mut rng).unwrap();
        assert_eq!(m.counts(), vec![13, 13, 13, 5]);
        assert!(m.class_indices(0).iter().all(|r| before.contains(r)));
        m.check_invariant(&[100, 100, 100, 5]).unwrap();
        assert!(m.check_invariant(&[100, 100, 100, 50]).is_err());
    }

    #[test]
    fn zero_holdout_stays_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ReplayMemory::new(0, 4);
        m.update(&[rows(0, 10), rows(10, 10)], &mut rng).unwrap();
        assert!(m.is_empty());
        m.check_invariant(&[10, 10]).unwrap();
    }

    #[test]
    fn samples_come_from_their_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ReplayMemory::new(2, 2);
        m.update(&[rows(0, 10), rows(50, 10)], &mut rng).unwrap();
        for (r, c) in m.samples() {
            assert_eq!(c, usize::from(r >= 50));
        }
    }
}
