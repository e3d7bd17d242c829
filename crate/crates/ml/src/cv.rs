use rand::seq::SliceRandom;

use crate::error::{MlError, MlResult};
use crate::rng::rng_for;

/// One fold: training and test row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it into `k` test folds whose sizes
/// differ by at most one; the first `n % k` folds are the larger ones.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> MlResult<Vec<Fold>> {
    if k < 2 {
        return Err(MlError::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(MlError::invalid(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[0x6b66_6f6c_64]));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_of_ten_are_singletons() {
        let folds = kfold_split(10, 10, 3).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 1 && f.train.len() == 9));
    }

    #[test]
    fn paper_sized_folds() {
        let sizes: Vec<usize> = kfold_split(579, 10, 1).unwrap().iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 58).count(), 9);
        assert_eq!(sizes.iter().filter(|&&s| s == 57).count(), 1);
    }

    #[test]
    fn errors_and_determinism() {
        assert!(kfold_split(3, 5, 0).is_err());
        assert!(kfold_split(10, 1, 0).is_err());
        assert_eq!(kfold_split(50, 5, 9).unwrap(), kfold_split(50, 5, 9).unwrap());
        assert_ne!(kfold_split(50, 5, 9).unwrap(), kfold_split(50, 5, 10).unwrap());
    }

    proptest! {
        #[test]
        fn folds_partition_indices(n in 2usize..200, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let folds = kfold_split(n, k, seed).unwrap();
            let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for f in &folds {
                prop_assert_eq!(f.train.len() + f.test.len(), n);
                prop_assert!(f.test.iter().all(|i| f.train.binary_search(i).is_err()));
            }
        }
    }
}
