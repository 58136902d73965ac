use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Severity;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified k-fold split over patients.
///
/// Each severity class is shuffled with the seeded generator, then the
/// classes are dealt round-robin into the folds, continuing the deal position
/// from one class to the next so fold sizes differ by at most one.
pub fn stratified_folds(patients: &[(String, Severity)], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut slot = 0usize;
    for class in Severity::ALL {
        let mut ids: Vec<&String> = patients.iter().filter(|(_, s)| *s == class).map(|(id, _)| id).collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < k {
            return Err(Error::InvalidArgument(format!(
                "severity class {} has {} patients, fewer than k = {k}",
                class.as_str(),
                ids.len()
            )));
        }
        ids.sort();
        ids.shuffle(&mut rng);
        for id in ids {
            tests[slot % k].push(id.clone());
            slot += 1;
        }
    }
    Ok(tests
        .iter()
        .enumerate()
        .map(|(f, test)| {
            let train = tests
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, t)| t.iter().cloned())
                .collect();
            Fold { train, test: test.clone() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn cohort(n: [usize; 3]) -> Vec<(String, Severity)> {
        let mut v = Vec::new();
        for (c, &count) in Severity::ALL.iter().zip(&n) {
            for i in 0..count {
                v.push((format!("{}-{i:03}", c.as_str()), *c));
            }
        }
        v
    }

    #[test]
    fn seventy_five_patients_five_folds() {
        let pts = cohort([31, 32, 12]);
        let folds = stratified_folds(&pts, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.test.len(), 15);
            let count = |c: Severity| f.test.iter().filter(|id| id.starts_with(c.as_str())).count();
            assert!((6..=7).contains(&count(Severity::NormalOrMild)));
            assert!((6..=7).contains(&count(Severity::Moderate)));
            assert!((2..=3).contains(&count(Severity::Severe)));
            assert_eq!(f.train.len(), 60);
        }
    }

    #[test]
    fn k_one_is_rejected() {
        assert!(stratified_folds(&cohort([10, 0, 0]), 1, 0).is_err());
    }

    #[test]
    fn single_class_splits_evenly() {
        let folds = stratified_folds(&cohort([10, 0, 0]), 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 2));
    }

    #[test]
    fn small_class_is_rejected() {
        assert!(stratified_folds(&cohort([10, 10, 3]), 5, 3).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_patients(a in 5usize..30, b in 5usize..30, c in 5usize..15, k in 2usize..6, seed in any::<u64>()) {
            let pts = cohort([a, b, c]);
            let folds = stratified_folds(&pts, k, seed).unwrap();
            let all: BTreeSet<_> = pts.iter().map(|(id, _)| id.clone()).collect();
            let mut seen = BTreeSet::new();
            for f in &folds {
                for id in &f.test {
                    prop_assert!(seen.insert(id.clone()), "duplicate {}", id);
                }
                let train: BTreeSet<_> = f.train.iter().cloned().collect();
                let test: BTreeSet<_> = f.test.iter().cloned().collect();
                prop_assert!(train.is_disjoint(&test));
                prop_assert_eq!(train.len() + test.len(), all.len());
            }
            prop_assert_eq!(seen, all);
            // Per-class share within one patient of the global share.
            for f in &folds {
                for (cls, &n) in Severity::ALL.iter().zip(&[a, b, c]) {
                    let got = f.test.iter().filter(|id| id.starts_with(cls.as_str())).count() as f64;
                    let want = n as f64 / k as f64;
                    prop_assert!((got - want).abs() <= 1.0);
                }
            }
            prop_assert_eq!(stratified_folds(&pts, k, seed).unwrap(), folds);
        }
    }
}
