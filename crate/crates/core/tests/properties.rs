use std::collections::{BTreeMap, HashMap};

use num_rational::Ratio;
use proptest::prelude::*;

use termid::corpus::{k_core_filter, InteractionRecord};
use termid::ctg::{Term, TermIdSequence, TidMap};
use termid::eval::{aggregate, ndcg_at_k, recall_at_k, Averaging, RankedPrediction};
use termid::grounding::{StructuralSearch, Track};
use termid::iift::{joint_text, loss_start_for};
use termid::vocab::{kmeans, KMeansConfig};
use termid::CandidateLibrary;

fn term(i: u8) -> Term {
    Term::from_canonical(&format!("T{i}")).unwrap()
}

fn tid_strategy(alphabet: u8, max_len: usize) -> impl Strategy<Value = TermIdSequence> {
    Just((0..alphabet).collect::<Vec<u8>>())
        .prop_shuffle()
        .prop_flat_map(move |order| (Just(order), 1..=max_len.min(alphabet as usize)))
        .prop_map(|(order, len)| TermIdSequence::new(order[..len].iter().copied().map(term).collect()).unwrap())
}

fn score(g: &TermIdSequence, t: &TermIdSequence) -> Ratio<i64> {
    g.terms()
        .iter()
        .zip(t.terms())
        .enumerate()
        .filter(|(_, (a, b))| a == b)
        .map(|(j, _)| Ratio::new(1, j as i64 + 2))
        .sum()
}

fn prediction(rank: Option<usize>, n: usize) -> RankedPrediction {
    let mut items: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    if let Some(r) = rank.filter(|&r| r <= n) {
        items[r - 1] = "t".into();
    }
    RankedPrediction {
        user_id: "u".into(),
        target_item_id: "t".into(),
        grounded_items: items,
        raw_candidates: vec![String::new(); n],
        validity_flags: vec![true; n],
        tracks: vec![Track::Direct; n],
        failed: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn structural_matches_rational_brute_force(
        tids in prop::collection::vec(tid_strategy(6, 6), 1..30),
        pops in prop::collection::vec(0u64..3, 30),
        query in tid_strategy(8, 7),
    ) {
        let map: TidMap = tids.iter().enumerate().map(|(i, t)| (format!("i{i:02}"), t.clone())).collect();
        let pop: BTreeMap<String, u64> = map.keys().enumerate().map(|(i, k)| (k.clone(), pops[i])).collect();
        let (lib, _) = CandidateLibrary::build(&map, &pop).unwrap();
        let best = map
            .iter()
            .map(|(id, t)| (score(&query, t), pop[id], std::cmp::Reverse(id.clone())))
            .filter(|(s, _, _)| *s > Ratio::from_integer(0))
            .max();
        let got = lib.ground_structural(&query);
        prop_assert_eq!(got.item_id.clone(), best.map(|(_, _, std::cmp::Reverse(id))| id));
        prop_assert_eq!(lib.ground_structural_with(&query, StructuralSearch::Exhaustive), got);
    }

    #[test]
    fn direct_hit_returns_an_owner(tids in prop::collection::vec(tid_strategy(4, 3), 1..20), pick in any::<prop::sample::Index>()) {
        let map: TidMap = tids.iter().enumerate().map(|(i, t)| (format!("i{i:02}"), t.clone())).collect();
        let (lib, _) = CandidateLibrary::build(&map, &BTreeMap::new()).unwrap();
        let q = &tids[pick.index(tids.len())];
        let r = lib.ground(q);
        prop_assert_eq!(r.track, Track::Direct);
        prop_assert_eq!(&map[r.item_id.as_ref().unwrap()], q);
    }

    #[test]
    fn metrics_are_bounded_and_monotone(ranks in prop::collection::vec(prop::option::of(1usize..15), 1..40)) {
        let preds: Vec<RankedPrediction> = ranks.iter().map(|r| prediction(*r, 12)).collect();
        let ks: Vec<usize> = (1..=12).collect();
        let report = aggregate(&preds, &ks, Averaging::PerUser, 0);
        let mut prev = (0.0, 0.0);
        for k in ks {
            let (r, n) = (report.recall_at[&k], report.ndcg_at[&k]);
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&n));
            prop_assert!(n <= r + 1e-12);
            prop_assert!(r >= prev.0 && n >= prev.1 - 1e-12);
            prev = (r, n);
        }
        for (p, rank) in preds.iter().zip(&ranks) {
            let hit = rank.is_some_and(|r| r <= 12);
            prop_assert_eq!(recall_at_k(&p.grounded_items, "t", 12), if hit { 1.0 } else { 0.0 });
            prop_assert!(ndcg_at_k(&p.grounded_items, "t", 12) <= 1.0);
        }
    }

    #[test]
    fn k_core_is_a_fixpoint(edges in prop::collection::vec((0u8..12, 0u8..12), 0..120), k in 1usize..4) {
        let rs: Vec<InteractionRecord> = edges
            .iter()
            .map(|(u, i)| InteractionRecord { user_id: format!("u{u}"), item_id: format!("i{i}"), timestamp: 0 })
            .collect();
        if let Ok(kept) = k_core_filter(&rs, k) {
            let mut ud: HashMap<&str, usize> = HashMap::new();
            let mut id: HashMap<&str, usize> = HashMap::new();
            for r in &kept {
                *ud.entry(&r.user_id).or_default() += 1;
                *id.entry(&r.item_id).or_default() += 1;
            }
            prop_assert!(ud.values().chain(id.values()).all(|&d| d >= k));
            prop_assert_eq!(k_core_filter(&kept, k).unwrap(), kept);
        }
    }

    #[test]
    fn kmeans_objective_never_increases(
        pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..80),
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        let k = k.min(pts.len());
        let r = kmeans(&pts, &KMeansConfig::new(k, seed)).unwrap();
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert_eq!(r.assignments.len(), pts.len());
    }

    #[test]
    fn loss_start_splits_output(instruction in "[a-zé ]{0,20}", input in "[A-Z,; ]{0,30}", output in "[a-zü\n]{0,30}") {
        let start = loss_start_for(&instruction, &input);
        let text = joint_text(&instruction, &input, &output);
        let tail: String = text.chars().skip(start).collect();
        prop_assert_eq!(tail, output);
    }
}
