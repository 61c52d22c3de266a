use std::time::{Duration, Instant};

use cyclesql::exec::{
    denotations_equal, denotations_equal_with, execute, Cell, Denotation, Semantics,
    DEFAULT_TIMEOUT,
};
use cyclesql::fixtures;
use cyclesql::schema::DatabaseEnv;
use cyclesql::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn school() -> (tempfile::TempDir, DatabaseEnv) {
    let dir = tempfile::tempdir().unwrap();
    let envs = fixtures::write_fixture_dbs(dir.path()).unwrap();
    let env = fixtures::env(&envs, "school").clone();
    (dir, env)
}

fn run(sql: &str, env: &DatabaseEnv) -> Denotation {
    execute(sql, env, DEFAULT_TIMEOUT).unwrap()
}

#[test]
fn count_of_friend_rows() {
    let (_d, env) = school();
    let d = run("select count ( * ) from Friend", &env);
    assert_eq!(d.rows, vec![vec![Cell::Number(4.0)]]);
    assert_eq!(d.column_count, 1);
    assert!(!d.ordered);
}

#[test]
fn empty_result_and_errors() {
    let (_d, env) = school();
    let d = run("select 1 where 1 = 0", &env);
    assert!(d.is_empty());
    assert_eq!(d.column_count, 1);
    assert!(matches!(
        execute("select name from nowhere", &env, DEFAULT_TIMEOUT),
        Err(Error::Execution(_))
    ));
    assert!(matches!(
        execute("delete from Friend", &env, DEFAULT_TIMEOUT),
        Err(Error::RejectedStatement) | Err(Error::Execution(_))
    ));
}

#[test]
fn writes_are_rejected_before_running() {
    let (_d, env) = school();
    // read-only connection would also refuse; readonly() catches it first
    let err = execute("update Schools set name = 'x'", &env, DEFAULT_TIMEOUT).unwrap_err();
    assert!(matches!(err, Error::RejectedStatement), "{err}");
}

#[test]
fn integer_and_real_compare_equal() {
    let (_d, env) = school();
    assert!(denotations_equal(&run("select 1.0", &env), &run("select 1", &env)));
}

#[test]
fn order_by_flags_ordered_comparison() {
    let (_d, env) = school();
    let asc = run("select id from Schools order by id", &env);
    let desc = run("select id from Schools order by id desc", &env);
    assert!(asc.ordered && desc.ordered);
    assert!(!denotations_equal(&asc, &desc));
    let plain = run("select id from Schools", &env);
    let reversed = Denotation {
        rows: plain.rows.iter().rev().cloned().collect(),
        ..plain.clone()
    };
    assert!(denotations_equal(&plain, &reversed));
}

fn checksum(path: &std::path::Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn execution_never_changes_the_file() {
    let (_d, env) = school();
    let before = checksum(&env.store_path);
    for sql in [
        "select * from Students",
        "select count ( * ) from Friend",
        "delete from Friend",
        "drop table Clubs",
        "insert into Schools values (9, 'x', 'y', 1)",
        "select nonsense",
    ] {
        let _ = execute(sql, &env, DEFAULT_TIMEOUT);
    }
    assert_eq!(checksum(&env.store_path), before);
}

#[test]
fn cross_join_bomb_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big").join("big.sqlite");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(
        "CREATE TABLE big (v INTEGER);
         WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i + 1 FROM n WHERE i < 10000)
         INSERT INTO big SELECT i FROM n;",
    )
    .unwrap();
    drop(conn);
    let env = DatabaseEnv {
        db_id: "big".into(),
        tables: vec![],
        foreign_keys: vec![],
        primary_keys: vec![],
        store_path: path,
    };
    let budget = Duration::from_millis(300);
    let start = Instant::now();
    let err = execute("select count ( * ) from big as a , big as b , big as c", &env, budget)
        .unwrap_err();
    let elapsed = start.elapsed();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
    assert!(elapsed <= budget * 2, "{elapsed:?}");
}

fn cell() -> impl Strategy<Value = Cell> {
    prop_oneof![
        Just(Cell::Null),
        (0i32..4).prop_map(|n| Cell::Number(f64::from(n))),
        (0i32..4).prop_map(|n| Cell::Number(f64::from(n) + 0.5)),
        "[ab]{0,2}".prop_map(Cell::Text),
    ]
}

fn denotation() -> impl Strategy<Value = Denotation> {
    (1usize..3).prop_flat_map(|w| {
        prop::collection::vec(prop::collection::vec(cell(), w), 0..5).prop_map(move |rows| {
            Denotation {
                rows,
                column_count: w,
                ordered: false,
            }
        })
    })
}

proptest! {
    #[test]
    fn equality_is_an_equivalence(a in denotation(), b in denotation(), c in denotation(), set in any::<bool>()) {
        let s = if set { Semantics::Set } else { Semantics::Bag };
        prop_assert!(denotations_equal_with(&a, &a, s));
        prop_assert_eq!(denotations_equal_with(&a, &b, s), denotations_equal_with(&b, &a, s));
        if denotations_equal_with(&a, &b, s) && denotations_equal_with(&b, &c, s) {
            prop_assert!(denotations_equal_with(&a, &c, s));
        }
    }

    #[test]
    fn permuting_rows_keeps_unordered_equality(a in denotation(), rot in 0usize..5) {
        let mut b = a.clone();
        if !b.rows.is_empty() {
            let k = rot % b.rows.len();
            b.rows.rotate_left(k);
        }
        prop_assert!(denotations_equal(&a, &b));
    }
}
