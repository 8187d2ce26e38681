mod support;

use ncp_core::pref_graph::{filter_dataset, PreferenceRecord};
use proptest::prelude::*;
use support::curation_oracle;

#[test]
fn matches_recount_on_random_corpora() {
    for seed in 0..300 {
        let recs = curation_oracle::random_corpus(seed, 12);
        if let Err(e) = curation_oracle::compare(&recs) {
            panic!("seed {seed}: {e}");
        }
    }
}

fn arb_records() -> impl Strategy<Value = Vec<PreferenceRecord>> {
    prop::collection::vec(
        (
            0..3usize,
            0..6usize,
            0..6usize,
            0..5i64,
            prop::bool::weighted(0.1),
        ),
        0..30,
    )
    .prop_map(|v| {
        v.into_iter()
            .filter(|(_, a, b, _, _)| a != b)
            .map(|(p, a, b, ts, draw)| {
                let (p, a, b) = (format!("p{p}"), format!("i{a}"), format!("i{b}"));
                if draw {
                    PreferenceRecord::draw(&p, &a, &b, ts)
                } else {
                    PreferenceRecord::win(&p, &a, &b, ts)
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn curation_agrees_with_recount(recs in arb_records()) {
        prop_assert_eq!(curation_oracle::compare(&recs), Ok(()));
    }

    #[test]
    fn kept_winners_never_lose_in_kept_set(recs in arb_records()) {
        let (kept, _) = filter_dataset(&recs).unwrap();
        for r in &kept {
            prop_assert!(!kept.iter().any(|o| o.prompt_id == r.prompt_id && o.loser_id == r.winner_id));
        }
    }

    #[test]
    fn filtering_is_idempotent(recs in arb_records()) {
        let (kept, _) = filter_dataset(&recs).unwrap();
        let (again, _) = filter_dataset(&kept).unwrap();
        prop_assert_eq!(again, kept);
    }
}
