use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Patient indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles patients once, rotates a 1/k test chunk, and splits the rest
/// 80/20 into train and validation (at least one validation patient).
pub fn make_folds(patients: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || patients < k {
        return Err(Error::DatasetTooSmall(format!("{patients} patients for {k} folds")));
    }
    let mut order: Vec<usize> = (0..patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let bounds: Vec<usize> = (0..=k).map(|i| i * patients / k).collect();
    (0..k)
        .map(|i| {
            let test: Vec<usize> = order[bounds[i]..bounds[i + 1]].to_vec();
            let rest: Vec<usize> = order[..bounds[i]].iter().chain(&order[bounds[i + 1]..]).copied().collect();
            let n_val = ((rest.len() as f64 * 0.2).round() as usize).max(1);
            if n_val >= rest.len() {
                return Err(Error::EmptySplit(format!("fold {i} has no training patients")));
            }
            let (val, train) = rest.split_at(n_val);
            let mut fold = Fold {
                train: train.to_vec(),
                val: val.to_vec(),
                test,
            };
            fold.train.sort_unstable();
            fold.val.sort_unstable();
            fold.test.sort_unstable();
            Ok(fold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_patients() {
        let folds = make_folds(100, 5, 0).unwrap();
        for f in &folds {
            assert_eq!((f.test.len(), f.train.len(), f.val.len()), (20, 64, 16));
        }
        assert_eq!(folds, make_folds(100, 5, 0).unwrap());
        assert!(make_folds(3, 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_patients(n in 5usize..60, k in 2usize..6, seed in any::<u64>()) {
            prop_assume!(n >= 3 * k);
            let folds = make_folds(n, k, seed).unwrap();
            let mut tests: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
            tests.sort_unstable();
            prop_assert_eq!(tests, (0..n).collect::<Vec<_>>());
            for f in &folds {
                let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert!(f.train.iter().all(|p| !f.test.contains(p) && !f.val.contains(p)));
            }
        }
    }
}
