use rand::rngs::StdRng;
use rand::SeedableRng;

use stancefact_bench::{random_table, random_valid_fact, sample_store};
use stancefact_core::engine::compute_fact;

#[test]
fn random_tables_stay_small_with_distinct_keys() {
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..200 {
        let t = random_table(&mut rng, 10);
        assert!((1..=10).contains(&t.rows.len()));
        let mut keys: Vec<(String, String)> = t.rows.iter().map(|r| (r[0].render(), r[2].render())).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), t.rows.len());
    }
}

#[test]
fn valid_facts_compute() {
    let mut rng = StdRng::seed_from_u64(2);
    let mut found = 0;
    for _ in 0..100 {
        let t = random_table(&mut rng, 10);
        if let Some(f) = random_valid_fact(&mut rng, &t, 50) {
            compute_fact(&f, &t).unwrap();
            found += 1;
        }
    }
    assert!(found > 50);
}

#[test]
fn the_sample_store_holds_every_csv() {
    assert_eq!(sample_store().len(), 5);
}
