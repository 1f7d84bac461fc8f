//! Stratified train/validation/test assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Group;

/// (train, validation, total) counts per cohort of the reference dataset.
fn reference_counts(group: Group) -> (f64, f64, f64) {
    match group {
        Group::Lvo => (42.0, 16.0, 77.0),
        Group::NonLvo => (36.0, 13.0, 60.0),
        Group::Wis => (9.0, 3.0, 15.0),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Cohorts too small to split, assigned wholly to training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Splits each cohort in the reference proportions: train and validation
/// sizes are rounded, test takes the rest. Patients are `(id, group)` pairs;
/// output order within each subset follows the shuffled order.
pub fn split_dataset(patients: &[(String, Group)], seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Split {
        seed,
        ..Split::default()
    };
    for group in Group::ALL {
        let mut ids: Vec<String> = patients.iter().filter(|p| p.1 == group).map(|p| p.0.clone()).collect();
        if ids.is_empty() {
            continue;
        }
        // Sorting first makes the result independent of input order.
        ids.sort();
        ids.shuffle(&mut rng);
        let n = ids.len();
        if n < 3 {
            let msg = format!("{group} has only {n} patient(s); all assigned to training");
            log::warn!("{msg}");
            out.warnings.push(msg);
            out.train.extend(ids);
            continue;
        }
        let (tr, va, total) = reference_counts(group);
        let n_train = ((n as f64 * tr / total).round() as usize).max(1);
        let n_val = ((n as f64 * va / total).round() as usize).max(1).min(n - n_train);
        let mut it = ids.into_iter();
        out.train.extend(it.by_ref().take(n_train));
        out.validation.extend(it.by_ref().take(n_val));
        out.test.extend(it);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(lvo: usize, non: usize, wis: usize) -> Vec<(String, Group)> {
        let mut v = Vec::new();
        for (g, n) in [(Group::Lvo, lvo), (Group::NonLvo, non), (Group::Wis, wis)] {
            v.extend((0..n).map(|i| (format!("{g}-{i:03}"), g)));
        }
        v
    }

    fn sizes(s: &Split) -> (usize, usize, usize) {
        (s.train.len(), s.validation.len(), s.test.len())
    }

    #[test]
    fn reference_cohort_sizes() {
        let s = split_dataset(&cohort(77, 60, 15), 7);
        assert_eq!(sizes(&s), (87, 32, 33));
        let lvo = split_dataset(&cohort(77, 0, 0), 7);
        assert_eq!(sizes(&lvo), (42, 16, 19));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let p = cohort(20, 14, 6);
        let a = split_dataset(&p, 3);
        assert_eq!(a, split_dataset(&p, 3));
        let mut rev = p.clone();
        rev.reverse();
        assert_eq!(a, split_dataset(&rev, 3));
        assert_ne!(a, split_dataset(&p, 4));
        let mut all: Vec<_> = a.train.iter().chain(&a.validation).chain(&a.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 40);
    }

    #[test]
    fn tiny_cohorts_go_to_training() {
        let s = split_dataset(&cohort(10, 2, 0), 0);
        assert_eq!(s.warnings.len(), 1);
        assert!(s.train.iter().filter(|id| id.starts_with("Non-LVO")).count() == 2);
    }
}
