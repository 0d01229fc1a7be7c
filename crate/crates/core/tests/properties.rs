use proptest::prelude::*;

use stancefact_core::dataset::{execute_query, ingest_dataset, validate_query, QueryErrorCode, SourceFormat};
use stancefact_core::embedding::{relevance, MockEmbedder};
use stancefact_core::engine::{canonical_description, check_description, compute_fact, format_number, Direction};
use stancefact_core::fact::parse_fact;
use stancefact_core::llm::{parse_evaluations, Stance};
use stancefact_core::tree::{load_session, rank_order, save_session, RetrievalTree};
use stancefact_core::{Derived, FieldKind, SubTable};

fn table(csv: &str) -> SubTable {
    let d = ingest_dataset(csv.as_bytes(), "t", "test", SourceFormat::Table).unwrap();
    execute_query("SELECT * FROM t", &d).unwrap()
}

fn stance() -> impl Strategy<Value = Stance> {
    prop_oneof![Just(Stance::Support), Just(Stance::Oppose)]
}

proptest! {
    #[test]
    fn ranking_is_a_grouped_stable_sort(
        items in proptest::collection::vec((stance(), 0.0f64..1.0), 0..20),
        input in stance(),
    ) {
        let order = rank_order(&items, input);
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..items.len()).collect::<Vec<_>>());
        let matching = items.iter().filter(|(s, _)| *s == input).count();
        prop_assert!(order[..matching].iter().all(|&i| items[i].0 == input));
        for w in order.windows(2) {
            let (a, b) = (items[w[0]], items[w[1]]);
            if a.0 == b.0 {
                prop_assert!(a.1 > b.1 || (a.1 == b.1 && w[0] < w[1]));
            }
        }
    }

    #[test]
    fn relevance_stays_in_the_unit_interval(d in "[a-z ]{1,40}[a-z]", s in "[a-z ]{0,40}[a-z]", q in "[a-z ]{0,40}[a-z]") {
        let p = MockEmbedder::default();
        let r = relevance(&p, &d, &s, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let same = relevance(&p, &d, &d, &d).unwrap();
        prop_assert!((same - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subtables_never_exceed_ten_rows(rows in 1usize..40, limit in proptest::option::of(0u64..30)) {
        let mut csv = String::from("k,v\n");
        for i in 0..rows {
            csv.push_str(&format!("k{i},{i}\n"));
        }
        let d = ingest_dataset(csv.as_bytes(), "t", "", SourceFormat::Table).unwrap();
        let sql = match limit {
            Some(n) => format!("SELECT * FROM t LIMIT {n}"),
            None => "SELECT * FROM t".to_string(),
        };
        let report = validate_query(&sql, &d);
        match execute_query(&sql, &d) {
            Ok(sub) => {
                prop_assert!(report.ok);
                let cap = limit.map_or(10, |n| n.min(10) as usize);
                prop_assert_eq!(sub.rows.len(), rows.min(cap));
            }
            Err(_) => prop_assert!(report.has(QueryErrorCode::LimitExceeded)),
        }
    }

    #[test]
    fn linear_series_recover_their_slope(a in -500.0f64..500.0, b in -20.0f64..20.0, n in 3usize..10) {
        let mut csv = String::from("c,year,v\n");
        for i in 0..n {
            csv.push_str(&format!("x,{},{}\n", 2000 + i, a + b * i as f64));
        }
        let t = table(&csv);
        let f = parse_fact(&serde_json::json!({"type": "trend", "measure": [{"aggregate": "none", "field": "v"}],
            "breakdown": ["year"], "subspace": [{"field": "c", "value": "x"}], "focus": []})).unwrap();
        let r = compute_fact(&f, &t).unwrap();
        let Derived::Trend { slope, direction, .. } = r.derived else { panic!("not a trend") };
        prop_assert!((slope - b).abs() <= 1e-9 * b.abs().max(1.0));
        if direction != Direction::Flat {
            prop_assert_eq!(direction == Direction::Increasing, b > 0.0);
        }
    }

    #[test]
    fn canonical_value_captions_pass(v in -1.0e9f64..1.0e9) {
        let t = table(&format!("c,year,v\nx,2020,{v}\n"));
        let f = parse_fact(&serde_json::json!({"type": "value", "measure": [{"aggregate": "none", "field": "v"}],
            "breakdown": ["c"], "subspace": [{"field": "year", "value": 2020}], "focus": []})).unwrap();
        let r = compute_fact(&f, &t).unwrap();
        let caption = canonical_description(&r);
        prop_assert!(check_description(&r, &caption).ok, "{}", caption);
    }

    #[test]
    fn formatted_numbers_stay_within_tolerance(v in -1.0e12f64..1.0e12) {
        let s = format_number(v).replace(',', "");
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 0.005 * v.abs() || (back - v).abs() < 1e-9);
    }

    #[test]
    fn numeric_columns_are_numerical(values in proptest::collection::vec(-1.0e6f64..1.0e6, 1..30)) {
        let mut csv = String::from("name,amount\n");
        for (i, v) in values.iter().enumerate() {
            csv.push_str(&format!("n{i},{v}\n"));
        }
        let d = ingest_dataset(csv.as_bytes(), "t", "", SourceFormat::Table).unwrap();
        prop_assert_eq!(d.field("amount").unwrap().kind, FieldKind::Numerical);
        prop_assert_eq!(d.field("name").unwrap().kind, FieldKind::Categorical);
        prop_assert_eq!(d.rows.len(), values.len());
    }

    #[test]
    fn evaluations_are_normalized(s in 0.0f64..10.0, o in 0.0f64..10.0) {
        let text = format!("[{{\"index\": 0, \"support\": {s}, \"oppose\": {o}, \"explanation\": \"x\"}}]");
        let e = &parse_evaluations(&text, 1).unwrap()[0];
        prop_assert!((e.support_prob + e.oppose_prob - 1.0).abs() < 1e-9);
        prop_assert!(e.support_prob >= 0.0 && e.oppose_prob >= 0.0);
        if s > o {
            prop_assert_eq!(e.predicted_label, Stance::Support);
        } else if o > s {
            prop_assert_eq!(e.predicted_label, Stance::Oppose);
        }
    }

    #[test]
    fn empty_sessions_round_trip(statement in "[A-Za-z0-9 ,.%]{1,60}", digest in "[a-f0-9]{8}") {
        let tree = RetrievalTree::new("s", &statement);
        let bytes = save_session(&tree, &digest, None);
        let saved = load_session(&bytes).unwrap();
        prop_assert_eq!(&saved.tree, &tree);
        prop_assert_eq!(save_session(&saved.tree, &digest, None), bytes);
    }
}
