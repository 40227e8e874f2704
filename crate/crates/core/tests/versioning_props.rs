mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strata::versioning::required_versions;
use strata::AccessType;

fn access() -> impl Strategy<Value = AccessType> {
    prop_oneof![Just(AccessType::Read), Just(AccessType::Add), Just(AccessType::Modify)]
}

/// Required version of access k is the number of accesses before its run of
/// equal reorderable accesses.
fn group_oracle(seq: &[AccessType]) -> Vec<u64> {
    (0..seq.len())
        .map(|k| {
            if seq[k] == AccessType::Modify {
                return k as u64;
            }
            let mut start = k;
            while start > 0 && seq[start - 1] == seq[k] {
                start -= 1;
            }
            start as u64
        })
        .collect()
}

proptest! {
    #[test]
    fn required_versions_follow_groups(seq in proptest::collection::vec(access(), 0..40)) {
        let got: Vec<u64> = required_versions(&seq).into_iter().map(|v| v.0).collect();
        prop_assert_eq!(got, group_oracle(&seq));
    }

    #[test]
    fn required_versions_are_monotone(seq in proptest::collection::vec(access(), 1..40)) {
        let v = required_versions(&seq);
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(v.iter().enumerate().all(|(k, r)| r.0 <= k as u64));
    }

    #[test]
    fn schedules_match_brute_force(seq in proptest::collection::vec(access(), 1..16), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::replay_schedule(&seq, &mut rng).map_err(TestCaseError::fail)?;
    }
}
