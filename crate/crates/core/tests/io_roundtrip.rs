use ncp_core::denoiser::{Arch, DenoiserModel};
use ncp_core::io::{self, ParseMode};
use ncp_core::pref_graph::PreferenceRecord;
use ncp_core::schedule::VarianceSchedule;
use ncp_core::train_eval::ToyItem;
use proptest::prelude::*;

const ARCH: Arch = Arch {
    input_dim: 2,
    hidden: 3,
    embed: 2,
    conditions: 2,
    timesteps: 7,
};

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

proptest! {
    #[test]
    fn checkpoints_round_trip_bit_exact(params in prop::collection::vec(finite(), ARCH.param_count())) {
        let sched = VarianceSchedule::linear(7, 1e-4, 0.02).unwrap();
        let m = DenoiserModel::from_params(ARCH, params).unwrap();
        let mut buf = Vec::new();
        io::write_checkpoint(&mut buf, &m, &sched).unwrap();
        let (back, s) = io::read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(&s, &sched);
        let bits = |m: &DenoiserModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn records_round_trip(
        rows in prop::collection::vec(("\\PC{1,8}", "\\PC{1,8}", "\\PC{1,8}", any::<i64>(), any::<bool>()), 0..20)
    ) {
        let recs: Vec<PreferenceRecord> = rows
            .into_iter()
            .filter(|(_, a, b, _, _)| a != b)
            .map(|(p, a, b, ts, draw)| if draw {
                PreferenceRecord::draw(&p, &a, &b, ts)
            } else {
                PreferenceRecord::win(&p, &a, &b, ts)
            })
            .collect();
        let mut buf = Vec::new();
        io::write_records(&mut buf, &recs).unwrap();
        let (back, skipped) = io::read_records(&buf[..], ParseMode::Strict).unwrap();
        prop_assert!(skipped.is_empty());
        prop_assert_eq!(&back, &recs);
        let mut again = Vec::new();
        io::write_records(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn items_round_trip(xs in prop::collection::vec(prop::collection::vec(finite(), 2), 0..10)) {
        let items: Vec<ToyItem> = xs
            .into_iter()
            .enumerate()
            .map(|(i, x)| ToyItem { item_id: format!("i{i}"), prompt_id: "p".into(), condition: i % 3, x })
            .collect();
        let mut buf = Vec::new();
        io::write_items(&mut buf, &items).unwrap();
        let back = io::read_items(&buf[..]).unwrap();
        for (a, b) in back.iter().zip(&items) {
            prop_assert_eq!(&a.item_id, &b.item_id);
            prop_assert_eq!(a.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        prop_assert_eq!(back.len(), items.len());
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let line = r#"{"prompt_id":"p","winner_id":"a","loser_id":"b","outcome":"win","timestamp":1,"extra":0}"#;
    assert!(io::read_records(line.as_bytes(), ParseMode::Strict).is_err());
    let line = r#"{"prompt_id":"p","winner_id":"a","loser_id":"b","outcome":"tie","timestamp":1}"#;
    assert!(io::read_records(line.as_bytes(), ParseMode::Strict).is_err());
}
