use std::collections::BTreeMap;

use cyclesql::canon::{parse_sql, to_coarse, CoarseTemplate};
use cyclesql::dist::{fit, TemplateDistribution};
use cyclesql::exec::{execute, DEFAULT_TIMEOUT};
use cyclesql::fixtures;
use cyclesql::sampler::{
    assign_columns, can_fill, fill_values, sample_batch, sample_query, sample_turn_sequence,
    BatchConfig, EnvChoice, Sampler,
};
use cyclesql::schema::DatabaseEnv;
use cyclesql::seed::stream;
use cyclesql::Error;

fn setup() -> (tempfile::TempDir, Vec<DatabaseEnv>) {
    let dir = tempfile::tempdir().unwrap();
    let envs = fixtures::write_fixture_dbs(dir.path()).unwrap();
    (dir, envs)
}

fn tpl(text: &str) -> CoarseTemplate {
    CoarseTemplate::parse(text, 1).unwrap()
}

fn dist_of(items: &[(&str, u64)]) -> TemplateDistribution {
    let mut d = TemplateDistribution::default();
    for (t, c) in items {
        d.add(tpl(t), *c);
    }
    d
}

#[test]
fn can_fill_counts_columns_per_kind() {
    let (_d, envs) = setup();
    let school = fixtures::env(&envs, "school");
    let counter = fixtures::env(&envs, "counter");
    let islands = fixtures::env(&envs, "islands");
    let t = tpl("select key1 , text1 where text2 = val");
    assert!(can_fill(school, &t));
    // islands: two keys, two text columns
    assert!(can_fill(islands, &t));
    assert!(!can_fill(islands, &tpl("select key1 , text1 where text2 = val and text3 = val")));
    assert!(!can_fill(counter, &tpl("select text1")));
    assert!(!can_fill(counter, &CoarseTemplate::parse("select count ( * )", 2).unwrap()));
    assert!(can_fill(school, &CoarseTemplate::parse("select count ( * )", 2).unwrap()));
}

#[test]
fn single_text_slot_is_uniform() {
    let (_d, envs) = setup();
    let islands = fixtures::env(&envs, "islands");
    let t = tpl("select text1");
    let mut rng = stream(3, 0);
    let n = 10_000;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n {
        let a = assign_columns(islands, &t, &mut rng).unwrap();
        *counts.entry(a.columns.values().next().unwrap().name.clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), 2);
    for c in counts.values() {
        assert!((*c as f64 / n as f64 - 0.5).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn assignment_is_injective() {
    let (_d, envs) = setup();
    let school = fixtures::env(&envs, "school");
    let t = tpl("select text1 , text2");
    let mut rng = stream(5, 0);
    for _ in 0..500 {
        let a = assign_columns(school, &t, &mut rng).unwrap();
        let cols: Vec<_> = a.columns.values().collect();
        assert_ne!(cols[0], cols[1]);
    }
}

#[test]
fn disconnected_only_candidates_fail_with_no_join_path() {
    let (_d, envs) = setup();
    let islands = fixtures::env(&envs, "islands");
    let t = tpl("select text1 , text2");
    let mut rng = stream(5, 0);
    assert!(matches!(
        assign_columns(islands, &t, &mut rng),
        Err(Error::NoJoinPath { .. })
    ));
}

#[test]
fn values_come_uniformly_from_stored_contents() {
    let (_d, envs) = setup();
    let counter = fixtures::env(&envs, "counter");
    let t = tpl("select key1 where number1 = val");
    let mut rng = stream(11, 0);
    let a = assign_columns(counter, &t, &mut rng).unwrap();
    // x holds {1, 1, 5}: two distinct values
    let mut sampler = Sampler::new(counter);
    let n = 10_000;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n {
        let v = sampler.fill_values(&t, &a, &mut rng).unwrap();
        *counts.entry(format!("{:?}", v[0].value)).or_default() += 1;
    }
    assert_eq!(counts.len(), 2, "{counts:?}");
    for c in counts.values() {
        assert!((*c as f64 / n as f64 - 0.5).abs() <= 0.02, "{counts:?}");
    }

    // students.age holds {14, 15, 16, 17}
    let school = fixtures::env(&envs, "school");
    let students = school.find_table("Students").unwrap();
    let mut a = cyclesql::canon::Assignment::default();
    a.columns.insert(
        cyclesql::canon::Slot::parse("key1").unwrap(),
        school.find_column(students, "id").unwrap().clone(),
    );
    a.columns.insert(
        cyclesql::canon::Slot::parse("number1").unwrap(),
        school.find_column(students, "age").unwrap().clone(),
    );
    let mut sampler = Sampler::new(school);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n {
        let v = sampler.fill_values(&t, &a, &mut rng).unwrap();
        *counts.entry(format!("{:?}", v[0].value)).or_default() += 1;
    }
    assert_eq!(counts.len(), 4, "{counts:?}");
    for c in counts.values() {
        assert!((*c as f64 / n as f64 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn all_null_column_is_an_empty_column_error() {
    let (_d, envs) = setup();
    let islands = fixtures::env(&envs, "islands");
    let t = tpl("select key1 where number1 = val");
    let mut rng = stream(1, 0);
    let a = assign_columns(islands, &t, &mut rng).unwrap();
    assert!(matches!(
        fill_values(islands, &t, &a, &mut rng),
        Err(Error::EmptyColumn { .. })
    ));
}

#[test]
fn between_draws_two_values_on_one_column() {
    let (_d, envs) = setup();
    let school = fixtures::env(&envs, "school");
    let t = tpl("select text1 where number1 between val and val");
    assert_eq!(t.value_slots().len(), 2);
    assert_eq!(t.value_slots()[0].bound, t.value_slots()[1].bound);
    let mut rng = stream(1, 0);
    let a = assign_columns(school, &t, &mut rng).unwrap();
    let mut differ = false;
    for _ in 0..50 {
        let v = fill_values(school, &t, &a, &mut rng).unwrap();
        differ |= v[0] != v[1];
    }
    assert!(differ);
}

#[test]
fn trivial_template_succeeds_first_time() {
    let (_d, envs) = setup();
    let school = fixtures::env(&envs, "school");
    let d = dist_of(&[("select count ( * )", 1)]);
    let mut rng = stream(1, 0);
    let q = sample_query(school, &d, &mut rng, 500).unwrap();
    assert_eq!(q.seed_trace.attempts, 1);
    assert_eq!(q.template.text(), "select count ( * )");
}

#[test]
fn value_less_template_exhausts() {
    let (_d, envs) = setup();
    let islands = fixtures::env(&envs, "islands");
    let d = dist_of(&[("select key1 where number1 = val", 1)]);
    let mut rng = stream(1, 0);
    match sample_query(islands, &d, &mut rng, 40) {
        Err(Error::SamplingExhausted { attempts, diagnostics, .. }) => {
            assert_eq!(attempts, 40);
            assert!(diagnostics.contains("empty_column"), "{diagnostics}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unfillable_env_is_reported() {
    let (_d, envs) = setup();
    let counter = fixtures::env(&envs, "counter");
    let d = dist_of(&[("select text1", 1)]);
    let mut rng = stream(1, 0);
    assert!(matches!(
        sample_query(counter, &d, &mut rng, 10),
        Err(Error::Unfillable { ref db_id }) if db_id == "counter"
    ));
}

#[test]
fn thousand_samples_execute_with_rows() {
    let (_d, envs) = setup();
    let school = fixtures::env(&envs, "school");
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    let cfg = BatchConfig {
        count: 1000,
        seed: 17,
        ..BatchConfig::default()
    };
    let batch = sample_batch(std::slice::from_ref(school), &dist, &cfg).unwrap();
    assert_eq!(batch.len(), 1000);
    let mut seen = std::collections::BTreeSet::new();
    for seq in &batch {
        let q = &seq[0];
        let d = execute(&q.sql, school, DEFAULT_TIMEOUT).unwrap();
        assert!(!d.is_empty(), "{}", q.sql);
        let again = to_coarse(&parse_sql(&q.sql, school).unwrap(), school);
        assert_eq!(again, q.template, "{}", q.sql);
        seen.insert(q.template.text().to_string());
    }
    // nearly every corpus template gets used
    assert!(seen.len() + 2 >= dist.len(), "{} of {}", seen.len(), dist.len());
}

#[test]
fn batches_are_deterministic_and_thread_independent() {
    let (_d, envs) = setup();
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    let cfg = BatchConfig {
        count: 200,
        seed: 99,
        choice: EnvChoice::Uniform,
        ..BatchConfig::default()
    };
    let a = sample_batch(&envs, &dist, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| sample_batch(&envs, &dist, &cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn turn_sequences_thread_previous_queries() {
    let (_d, envs) = setup();
    let school = fixtures::env(&envs, "school");
    let a = "select text1 where number1 > val";
    let b = "select count ( * ) where number1 > val";
    let mut d = dist_of(&[(a, 1), (b, 1)]);
    d.add_bigram(&tpl(a), &tpl(b), 1);
    let mut rng = stream(4, 0);

    let one = sample_turn_sequence(school, &d, &mut rng, 1).unwrap();
    assert_eq!(one.len(), 1);
    assert!(one[0].prev_ast.is_none());

    for _ in 0..20 {
        let seq = sample_turn_sequence(school, &d, &mut rng, 2).unwrap();
        if seq[0].template.text() == a {
            assert_eq!(seq[1].template.text(), b);
        }
        assert_eq!(seq[1].prev_ast.as_ref(), Some(&seq[0].ast));
        assert_eq!(seq[1].prev_sql.as_deref(), Some(seq[0].sql.as_str()));
    }

    // b has no continuation, so a third turn backs off to the unigram
    let mut sparse = dist_of(&[(a, 1), (b, 1)]);
    sparse.add_bigram(&tpl(a), &tpl(b), 1);
    let seq = sample_turn_sequence(school, &sparse, &mut rng, 3).unwrap();
    assert_eq!(seq.len(), 3);
}

#[test]
fn validate_accepts_every_sample() {
    let (_d, envs) = setup();
    let school = fixtures::env(&envs, "school");
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    let mut sampler = Sampler::new(school);
    let mut rng = stream(8, 0);
    for _ in 0..100 {
        let q = sampler.sample_query(&dist, &mut rng, 500).unwrap();
        sampler.validate(&q).unwrap();
    }
}
