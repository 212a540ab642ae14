use super::*;
use crate::corpus::Turn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(id: &str, states: &[&[(&str, &str)]]) -> Conversation {
    Conversation {
        id: id.into(),
        domains: vec![],
        turns: states
            .iter()
            .map(|s| Turn::new(None, "hi", BeliefState::from_pairs(s.iter().copied())).unwrap())
            .collect(),
    }
}

fn pred(id: &str, t: usize, pairs: &[(&str, &str)]) -> Prediction {
    let belief_state = BeliefState::from_pairs(pairs.iter().copied());
    let scores = vec![0.0; belief_state.len()];
    Prediction {
        conversation_id: id.into(),
        turn_index: t,
        belief_state,
        scores,
    }
}

fn perfect(gold: &[Conversation]) -> Vec<Prediction> {
    gold.iter()
        .flat_map(|c| {
            c.turns.iter().enumerate().map(|(t, turn)| Prediction {
                conversation_id: c.id.clone(),
                turn_index: t,
                scores: vec![0.0; turn.state.len()],
                belief_state: turn.state.clone(),
            })
        })
        .collect()
}

#[test]
fn perfect_predictions_score_one() {
    let gold = vec![conv("a", &[&[("day", "monday")], &[("day", "monday"), ("time", "17:00")]])];
    let p = perfect(&gold);
    assert_eq!(joint_goal_accuracy(&p, &gold).unwrap(), 1.0);
    let sa = slot_accuracy(&p, &gold).unwrap();
    assert_eq!(sa.overall, 1.0);
    assert!(sa.per_slot.values().all(|s| s.acc == 1.0));
    assert_eq!(turn_value_accuracy(&p, &gold).unwrap(), 1.0);
}

#[test]
fn one_wrong_value_halves_jga() {
    let gold = vec![conv("a", &[&[("day", "monday")], &[("day", "monday"), ("time", "17:00")]])];
    let p = vec![pred("a", 0, &[("day", "monday")]), pred("a", 1, &[("day", "monday"), ("time", "18:00")])];
    assert_eq!(joint_goal_accuracy(&p, &gold).unwrap(), 0.5);
}

#[test]
fn missed_value_leaves_slot_denominator() {
    let gold = vec![conv("a", &[&[("day", "monday"), ("time", "17:00")]])];
    let p = vec![pred("a", 0, &[("day", "monday")])];
    let sa = slot_accuracy(&p, &gold).unwrap();
    assert_eq!(sa.overall, 1.0);
    assert_eq!(sa.per_slot.len(), 1);
    assert_eq!(sa.per_slot["day"].support, 1);
}

#[test]
fn hand_counted_slot_accuracy() {
    // 10 gold pairs; values of 8 are predicted, 6 of those with the right slot.
    let gold = vec![
        conv(
            "a",
            &[&[("destination", "london"), ("day", "monday"), ("time", "17:00"), ("people", "2")]],
        ),
        conv(
            "b",
            &[&[("food", "thai"), ("name", "red lion"), ("stay", "3"), ("departure", "ely"), ("area", "north"), ("price", "cheap")]],
        ),
    ];
    let p = vec![
        pred("a", 0, &[("destination", "london"), ("day", "monday"), ("departure", "17:00"), ("stay", "2")]),
        pred("b", 0, &[("food", "thai"), ("name", "red lion"), ("stay", "3"), ("departure", "ely")]),
    ];
    let sa = slot_accuracy(&p, &gold).unwrap();
    assert_eq!(sa.overall, 0.75);
    let support: usize = sa.per_slot.values().map(|s| s.support).sum();
    assert_eq!(support, 8);
    assert_eq!(sa.per_slot["time"].acc, 0.0);
}

#[test]
fn values_right_slots_wrong() {
    let gold = vec![conv("a", &[&[("day", "monday"), ("time", "17:00")]])];
    let p = vec![pred("a", 0, &[("time", "monday"), ("day", "17:00")])];
    assert_eq!(turn_value_accuracy(&p, &gold).unwrap(), 1.0);
    assert_eq!(joint_goal_accuracy(&p, &gold).unwrap(), 0.0);
    let spurious = vec![pred("a", 0, &[("day", "monday"), ("time", "17:00"), ("people", "2")])];
    assert_eq!(turn_value_accuracy(&spurious, &gold).unwrap(), 0.0);
}

#[test]
fn empty_gold_turn_needs_empty_prediction() {
    let gold = vec![conv("a", &[&[]])];
    assert_eq!(joint_goal_accuracy(&[pred("a", 0, &[])], &gold).unwrap(), 1.0);
    assert_eq!(joint_goal_accuracy(&[pred("a", 0, &[("day", "x")])], &gold).unwrap(), 0.0);
}

#[test]
fn misaligned_predictions_are_errors() {
    let gold = vec![conv("a", &[&[("day", "monday")], &[("day", "monday")]])];
    let missing = vec![pred("a", 0, &[])];
    assert!(matches!(joint_goal_accuracy(&missing, &gold), Err(Error::Metric(_))));
    let mut extra = perfect(&gold);
    extra.push(pred("b", 0, &[]));
    assert!(matches!(joint_goal_accuracy(&extra, &gold), Err(Error::Metric(_))));
    let mut dup = perfect(&gold);
    dup.push(dup[0].clone());
    assert!(matches!(turn_value_accuracy(&dup, &gold), Err(Error::Metric(_))));
    assert!(matches!(evaluate(&[], &[]), Err(Error::Metric(_))));
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gold = vec![conv("a", &[&[("day", "monday")], &[("day", "monday"), ("time", "17:00")]])];
    let rep = report(&perfect(&gold), &gold, &dir.path().join("out/report")).unwrap();
    assert_eq!((rep.jga, rep.slot_accuracy, rep.turn_value_accuracy), (1.0, 1.0, 1.0));
    let back = load_report(&dir.path().join("out/report.json")).unwrap();
    assert_eq!(back, rep);
    let table = std::fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    assert!(table.contains("joint goal accuracy  1.0000"));
    assert!(report(&[], &[], &dir.path().join("empty")).is_err());
}

#[test]
fn report_json_schema() {
    let gold = vec![conv("a", &[&[("day", "monday")]])];
    let rep = evaluate(&perfect(&gold), &gold).unwrap();
    let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
    for key in ["jga", "slot_accuracy", "turn_value_accuracy", "per_slot", "n_turns"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(v["per_slot"]["day"].get("acc").is_some());
    assert!(v["per_slot"]["day"].get("support").is_some());
}

/// Random gold corpus and a noisy prediction set over a small label space.
pub(crate) fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Conversation>, Vec<Prediction>) {
    const SLOTS: [&str; 4] = ["day", "time", "food", "area"];
    const VALUES: [&str; 5] = ["a", "b", "c", "d", "e"];
    let mut gold = Vec::new();
    let mut preds = Vec::new();
    for c in 0..rng.random_range(1..5) {
        let id = format!("c{c}");
        let mut turns = Vec::new();
        for t in 0..rng.random_range(1..4) {
            let mut g = BeliefState::new();
            for s in SLOTS {
                if rng.random_bool(0.5) {
                    g.insert(s, VALUES[rng.random_range(0..VALUES.len())]);
                }
            }
            let mut p = BeliefState::new();
            for (s, v) in g.iter() {
                match rng.random_range(0..4) {
                    0 => {}
                    1 => {
                        p.insert(SLOTS[rng.random_range(0..SLOTS.len())], v);
                    }
                    2 => {
                        p.insert(s, VALUES[rng.random_range(0..VALUES.len())]);
                    }
                    _ => {
                        p.insert(s, v);
                    }
                }
            }
            if rng.random_bool(0.2) {
                p.insert(SLOTS[rng.random_range(0..SLOTS.len())], VALUES[rng.random_range(0..VALUES.len())]);
            }
            turns.push(Turn::new(None, "x", g).unwrap());
            preds.push(Prediction {
                conversation_id: id.clone(),
                turn_index: t,
                scores: vec![0.0; p.len()],
                belief_state: p,
            });
        }
        gold.push(Conversation {
            id,
            domains: vec![],
            turns,
        });
    }
    (gold, preds)
}

/// Brute-force metrics from sorted pair lists.
pub(crate) fn oracle(gold: &[Conversation], preds: &[Prediction]) -> (f64, f64, f64) {
    let mut n = 0;
    let (mut jga, mut tva, mut s_hit, mut s_tot) = (0, 0, 0, 0);
    for c in gold {
        for (t, turn) in c.turns.iter().enumerate() {
            n += 1;
            let p = preds
                .iter()
                .find(|p| p.conversation_id == c.id && p.turn_index == t)
                .unwrap();
            let mut gp: Vec<(String, String)> = turn.state.iter().map(|(a, b)| (a.into(), b.into())).collect();
            let mut pp: Vec<(String, String)> = p.belief_state.iter().map(|(a, b)| (a.into(), b.into())).collect();
            gp.sort();
            pp.sort();
            if gp == pp {
                jga += 1;
            }
            let mut gv: Vec<&String> = gp.iter().map(|x| &x.1).collect();
            let mut pv: Vec<&String> = pp.iter().map(|x| &x.1).collect();
            gv.sort();
            pv.sort();
            if gv == pv {
                tva += 1;
            }
            for g in &gp {
                if pv.contains(&&g.1) {
                    s_tot += 1;
                    if pp.contains(g) {
                        s_hit += 1;
                    }
                }
            }
        }
    }
    let sa = if s_tot == 0 { 0.0 } else { s_hit as f64 / s_tot as f64 };
    (jga as f64 / n as f64, sa, tva as f64 / n as f64)
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (gold, preds) = random_case(&mut rng);
        let (jga, sa, tva) = oracle(&gold, &preds);
        assert_eq!(joint_goal_accuracy(&preds, &gold).unwrap(), jga);
        assert_eq!(slot_accuracy(&preds, &gold).unwrap().overall, sa);
        assert_eq!(turn_value_accuracy(&preds, &gold).unwrap(), tva);
    }
}

proptest! {
    #[test]
    fn metric_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gold, mut preds) = random_case(&mut rng);
        let rep = evaluate(&preds, &gold).unwrap();
        prop_assert!(rep.jga <= rep.turn_value_accuracy);
        for x in [rep.jga, rep.slot_accuracy, rep.turn_value_accuracy] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        let total_pairs: usize = gold.iter().flat_map(|c| &c.turns).map(|t| t.state.len()).sum();
        let support: usize = rep.per_slot.values().map(|s| s.support).sum();
        prop_assert!(support <= total_pairs);

        preds.reverse();
        prop_assert_eq!(evaluate(&preds, &gold).unwrap(), rep);

        let disjoint: Vec<Prediction> = preds
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.belief_state = BeliefState::from_pairs([("zz", "zz")]);
                q
            })
            .collect();
        prop_assert_eq!(joint_goal_accuracy(&disjoint, &gold).unwrap(), 0.0);
        prop_assert_eq!(joint_goal_accuracy(&perfect(&gold), &gold).unwrap(), 1.0);
    }
}
