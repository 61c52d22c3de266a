use std::collections::{BTreeMap, BTreeSet};

use cyclesql::canon::{from_coarse, render, Assignment, CoarseTemplate, Literal};
use cyclesql::dist::{
    binomial, coverage, coverage_report, fit, sample_template, variety_bound, TemplateDistribution,
};
use cyclesql::fixtures;
use cyclesql::sampler::assign_columns;
use cyclesql::schema::{parse_schemas, CorpusExample, DatabaseEnv};
use cyclesql::seed::stream;
use cyclesql::Error;
use proptest::prelude::*;

fn setup() -> (tempfile::TempDir, Vec<DatabaseEnv>) {
    let dir = tempfile::tempdir().unwrap();
    let envs = fixtures::write_fixture_dbs(dir.path()).unwrap();
    (dir, envs)
}

/// One table of `n` plain text columns.
fn wide_env(n: usize) -> DatabaseEnv {
    let mut names = vec![serde_json::json!([-1, "*"])];
    let mut types = vec!["text"];
    for i in 1..=n {
        names.push(serde_json::json!([0, format!("c{i}")]));
        types.push("text");
    }
    let v = serde_json::json!([{
        "db_id": "wide",
        "table_names_original": ["t"],
        "column_names_original": names,
        "column_types": types,
        "primary_keys": [],
        "foreign_keys": []
    }]);
    parse_schemas(&v.to_string()).unwrap().remove(0)
}

const ONE_SLOT: [&str; 3] = ["select text1", "select count ( distinct text1 )", "select max ( text1 )"];
const TWO_SLOTS: [&str; 3] = [
    "select text1 , text2",
    "select text1 where text2 = val",
    "select count ( * ) where text1 = val and text2 = val",
];

fn templates(t: usize, s: usize) -> Vec<CoarseTemplate> {
    let pool = if s == 1 { &ONE_SLOT } else { &TWO_SLOTS };
    pool[..t].iter().map(|x| CoarseTemplate::parse(x, 1).unwrap()).collect()
}

fn subsets(n: usize, s: usize) -> Vec<Vec<usize>> {
    if s == 0 {
        return vec![vec![]];
    }
    (0..n)
        .flat_map(|first| {
            subsets(n, s - 1)
                .into_iter()
                .filter(move |rest| rest.iter().all(|&r| r > first))
                .map(move |mut rest| {
                    rest.insert(0, first);
                    rest
                })
        })
        .collect()
}

/// Every distinct single-turn query reachable by choosing a column set per
/// template; slots take the chosen columns in ascending order.
fn single_turn_queries(env: &DatabaseEnv, tpls: &[CoarseTemplate], s: usize) -> BTreeSet<String> {
    let cols: Vec<_> = env.columns().cloned().collect();
    let mut out = BTreeSet::new();
    for tpl in tpls {
        for set in subsets(cols.len(), s) {
            let mut a = Assignment::default();
            for (slot, &c) in tpl.column_slots().iter().zip(&set) {
                a.columns.insert(*slot, cols[c].clone());
            }
            let values = vec![Literal::text("v"); tpl.value_slots().len()];
            out.insert(render(&from_coarse(tpl, &a, &values, env).unwrap()));
        }
    }
    out
}

fn sequences(single: &BTreeSet<String>, k: u32) -> usize {
    let mut seqs: BTreeSet<Vec<&String>> = BTreeSet::from([vec![]]);
    for _ in 0..k {
        seqs = seqs
            .iter()
            .flat_map(|p| single.iter().map(move |q| {
                let mut next = p.clone();
                next.push(q);
                next
            }))
            .collect();
    }
    seqs.len()
}

#[test]
fn fit_counts_fixture_templates() {
    let (_d, envs) = setup();
    let corpus = fixtures::school_corpus();
    let dist = fit(&corpus, &envs).unwrap();
    assert_eq!(dist.total() + dist.skipped(), corpus.len() as u64);
    assert!(dist.count(&CoarseTemplate::parse("select count ( * )", 1).unwrap()) >= 1);
    let sum: u64 = dist.templates().map(|(_, c)| c).sum();
    assert_eq!(sum, dist.total());
}

#[test]
fn fixture_coverage() {
    let (_d, envs) = setup();
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    let dev = fixtures::school_dev_corpus();
    let r = coverage_report(&dist, &dev, &envs).unwrap();
    assert_eq!(r.total, dev.len());
    assert!((r.fraction - 0.5).abs() < 1e-12, "{r:?}");
    assert_eq!(coverage(&dist, &fixtures::school_corpus(), &envs).unwrap(), 1.0);
}

#[test]
fn unparseable_examples_count_as_uncovered() {
    let (_d, envs) = setup();
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    let bad = vec![
        CorpusExample::single_turn("school", "q", "selec junk"),
        CorpusExample::single_turn("school", "q", "select count ( * ) from Friend"),
    ];
    let r = coverage_report(&dist, &bad, &envs).unwrap();
    assert_eq!((r.covered, r.unparseable, r.fraction), (1, 1, 0.5));
}

#[test]
fn empty_inputs_are_errors() {
    let (_d, envs) = setup();
    assert!(fit(&[], &envs).is_err());
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    assert!(matches!(coverage(&dist, &[], &envs), Err(Error::UndefinedCoverage)));
    assert!(sample_template(&TemplateDistribution::default(), |_| true, &mut stream(1, 0)).is_err());
}

#[test]
fn file_round_trip_preserves_counts() {
    let (dir, envs) = setup();
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    let path = dir.path().join("dist.json");
    dist.save(&path).unwrap();
    let back = TemplateDistribution::load(&path).unwrap();
    let a: BTreeMap<_, _> = dist.templates().map(|(t, c)| (t.text().to_string(), c)).collect();
    let b: BTreeMap<_, _> = back.templates().map(|(t, c)| (t.text().to_string(), c)).collect();
    assert_eq!(a, b);
    assert_eq!(dist.bigrams().count(), back.bigrams().count());
}

#[test]
fn sampled_frequencies_follow_counts() {
    let (_d, envs) = setup();
    let dist = fit(&fixtures::school_corpus(), &envs).unwrap();
    let n = 10_000;
    let mut seen: BTreeMap<String, u64> = BTreeMap::new();
    for i in 0..n {
        let t = sample_template(&dist, |_| true, &mut stream(3, i)).unwrap();
        *seen.entry(t.text().to_string()).or_default() += 1;
    }
    for (t, c) in dist.templates() {
        let want = c as f64 / dist.total() as f64;
        let got = seen.get(t.text()).copied().unwrap_or(0) as f64 / n as f64;
        assert!((want - got).abs() <= 0.02, "{}: {want} vs {got}", t.text());
    }
}

#[test]
fn binomial_small_values() {
    let row: Vec<u64> = (0..=5).map(|k| binomial(5, k).try_into().unwrap()).collect();
    assert_eq!(row, [1, 5, 10, 10, 5, 1]);
    assert_eq!(binomial(3, 4), 0u32.into());
    assert_eq!(variety_bound(3, 2, 4, 2).unwrap(), 324u32.into());
    assert!(matches!(variety_bound(1, 3, 2, 1), Err(Error::Domain(_))));
}

#[test]
fn bound_counts_enumerated_queries_exactly() {
    for s in 1..=2usize {
        for n in s..=4 {
            let env = wide_env(n);
            for t in 1..=3 {
                let single = single_turn_queries(&env, &templates(t, s), s);
                for k in 1..=2u32 {
                    let bound = variety_bound(t as u64, s as u64, n as u64, k).unwrap();
                    assert_eq!(bound, sequences(&single, k).into(), "T={t} S={s} N={n} K={k}");
                }
            }
        }
    }
}

#[test]
fn sampler_stays_within_bound() {
    let env = wide_env(4);
    for s in 1..=2usize {
        let tpls = templates(3, s);
        let mut sets = BTreeSet::new();
        for (ti, tpl) in tpls.iter().enumerate() {
            for i in 0..400 {
                let a = assign_columns(&env, tpl, &mut stream(11, i)).unwrap();
                let cols: BTreeSet<_> = a.columns.values().map(|c| c.position()).collect();
                sets.insert((ti, cols));
            }
        }
        let bound = variety_bound(3, s as u64, 4, 1).unwrap();
        assert_eq!(bound, sets.len().into(), "S={s}");
    }
}

proptest! {
    #[test]
    fn bound_is_monotone(t in 1u64..20, s in 0u64..5, extra in 0u64..6, k in 1u32..4) {
        let n = s + extra;
        let b = variety_bound(t, s, n, k).unwrap();
        prop_assert!(variety_bound(t + 1, s, n, k).unwrap() >= b);
        prop_assert!(variety_bound(t, s, n + 1, k).unwrap() >= b);
        prop_assert!(variety_bound(t, s, n, k + 1).unwrap() >= b);
    }

    #[test]
    fn binomial_symmetry_and_pascal(n in 1u64..40, k in 0u64..40) {
        prop_assume!(k <= n);
        prop_assert_eq!(binomial(n, k), binomial(n, n - k));
        if k >= 1 {
            prop_assert_eq!(binomial(n, k), binomial(n - 1, k - 1) + binomial(n - 1, k));
        }
    }
}
