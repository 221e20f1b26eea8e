use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint k-fold partition of a set of sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn val_ids(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every id outside `fold`, in fold order.
    pub fn train_ids(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect()
    }

    /// Checks disjointness, coverage of `all` and balanced sizes.
    pub fn check(&self, all: &[usize]) -> Result<()> {
        let mut seen: Vec<usize> = self.folds.iter().flatten().copied().collect();
        seen.sort_unstable();
        let before = seen.len();
        seen.dedup();
        if seen.len() != before {
            return Err(Error::Data("fold plan has overlapping folds".into()));
        }
        let mut expected = all.to_vec();
        expected.sort_unstable();
        if seen != expected {
            return Err(Error::Data("fold plan does not cover the labeled ids".into()));
        }
        let sizes = self.folds.iter().map(Vec::len);
        let (lo, hi) = sizes.fold((usize::MAX, 0), |(lo, hi), s| (lo.min(s), hi.max(s)));
        if hi - lo > 1 {
            return Err(Error::Data(format!("fold sizes range {lo}..{hi}")));
        }
        Ok(())
    }
}

/// Seeded shuffle followed by contiguous chunking; the first `n mod k` folds
/// receive one extra sample.
pub fn kfold_split(ids: &[usize], k_folds: usize, seed: u64) -> Result<FoldPlan> {
    if k_folds == 0 {
        return Err(Error::Argument("k_folds must be at least 1".into()));
    }
    if k_folds > ids.len() {
        return Err(Error::Argument(format!(
            "cannot split {} labeled samples into {k_folds} folds",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = order.len() / k_folds;
    let extra = order.len() % k_folds;
    let mut folds = Vec::with_capacity(k_folds);
    let mut start = 0;
    for f in 0..k_folds {
        let size = base + usize::from(f < extra);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(FoldPlan { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_division() {
        let ids: Vec<usize> = (0..10).collect();
        let plan = kfold_split(&ids, 5, 3).unwrap();
        assert!(plan.folds().iter().all(|f| f.len() == 2));
        plan.check(&ids).unwrap();
    }

    #[test]
    fn remainder_goes_to_first_folds() {
        let ids: Vec<usize> = (0..11).collect();
        let plan = kfold_split(&ids, 5, 3).unwrap();
        let sizes: Vec<usize> = plan.folds().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn same_seed_same_plan() {
        let ids: Vec<usize> = (100..140).collect();
        assert_eq!(kfold_split(&ids, 5, 9).unwrap(), kfold_split(&ids, 5, 9).unwrap());
        assert_ne!(kfold_split(&ids, 5, 9).unwrap(), kfold_split(&ids, 5, 10).unwrap());
    }

    #[test]
    fn too_many_folds_rejected() {
        assert!(matches!(kfold_split(&[1, 2], 3, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn train_and_val_are_complementary() {
        let ids: Vec<usize> = (0..13).collect();
        let plan = kfold_split(&ids, 4, 1).unwrap();
        for f in 0..4 {
            let train = plan.train_ids(f);
            assert_eq!(train.len() + plan.val_ids(f).len(), 13);
            assert!(plan.val_ids(f).iter().all(|v| !train.contains(v)));
        }
    }

    proptest! {
        #[test]
        fn plan_invariants_hold(n in 1usize..200, k in 1usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let plan = kfold_split(&ids, k, seed).unwrap();
            prop_assert_eq!(plan.k(), k);
            prop_assert!(plan.check(&ids).is_ok());
        }
    }
}
