//! Small self-contained databases and corpora used by tests, examples and
//! the CLI smoke runs.
//!
//! * `school`: four related tables (Schools, Students, Friend, Clubs).
//! * `counter`: one table where a count happens to equal a constant.
//! * `islands`: two tables with no foreign key between them and a column
//!   that only holds NULLs.

use std::path::Path;

use rusqlite::Connection;
use serde_json::json;

use crate::error::{Error, Result};
use crate::schema::{load_schemas, CorpusExample, DatabaseEnv};

const SCHOOL_DDL: &str = "
CREATE TABLE Schools (
    id INTEGER PRIMARY KEY,
    name TEXT,
    city TEXT,
    founded INTEGER
);
CREATE TABLE Students (
    id INTEGER PRIMARY KEY,
    name TEXT,
    age INTEGER,
    gpa REAL,
    school INTEGER REFERENCES Schools(id),
    enrolled TEXT,
    active INTEGER
);
CREATE TABLE Friend (
    student_id INTEGER REFERENCES Students(id),
    friend_id INTEGER REFERENCES Students(id)
);
CREATE TABLE Clubs (
    id INTEGER PRIMARY KEY,
    title TEXT,
    budget INTEGER,
    school INTEGER REFERENCES Schools(id)
);
INSERT INTO Schools VALUES
    (1, 'Highland Secondary', 'Boston', 1950),
    (2, 'Riverside High', 'Austin', 1972),
    (3, 'Lakeview Academy', 'Denver', 1988),
    (4, 'Oak Ridge School', 'Boston', 2001);
INSERT INTO Students VALUES
    (1, 'Alice', 15, 3.5, 1, '2018-09-01', 1),
    (2, 'Bob', 16, 2.9, 1, '2017-09-01', 1),
    (3, 'Carol', 15, 3.8, 2, '2018-09-01', 0),
    (4, 'Dave', 17, 3.1, 2, '2016-09-01', 1),
    (5, 'Eve', 16, 3.9, 3, '2017-09-01', 1),
    (6, 'Frank', 14, 2.5, 3, '2019-09-01', 0),
    (7, 'Grace', 17, 3.3, 4, '2016-09-01', 1),
    (8, 'Heidi', 15, 3.0, 4, '2018-09-01', 1),
    (9, 'Ivan', 16, 2.7, 1, '2017-09-01', 0),
    (10, 'Judy', 14, 3.6, 2, '2019-09-01', 1);
INSERT INTO Friend VALUES (1, 2), (1, 3), (4, 5), (7, 8);
INSERT INTO Clubs VALUES
    (1, 'Chess', 500, 1),
    (2, 'Robotics', 1200, 2),
    (3, 'Drama', 800, 3),
    (4, 'Debate', 650, 4),
    (5, 'Soccer', 900, 1);
";

const COUNTER_DDL: &str = "
CREATE TABLE t (id INTEGER PRIMARY KEY, x INTEGER);
INSERT INTO t VALUES (1, 1), (2, 1), (3, 5);
";

const ISLANDS_DDL: &str = "
CREATE TABLE A (id INTEGER PRIMARY KEY, label TEXT);
CREATE TABLE B (id INTEGER PRIMARY KEY, tag TEXT, note INTEGER);
INSERT INTO A VALUES (1, 'red'), (2, 'blue');
INSERT INTO B VALUES (1, 'x', NULL), (2, 'y', NULL);
";

/// The tables file describing every fixture database.
pub fn schema_json() -> String {
    let v = json!([
        {
            "db_id": "school",
            "table_names_original": ["Schools", "Students", "Friend", "Clubs"],
            "column_names_original": [
                [-1, "*"],
                [0, "id"], [0, "name"], [0, "city"], [0, "founded"],
                [1, "id"], [1, "name"], [1, "age"], [1, "gpa"], [1, "school"],
                [1, "enrolled"], [1, "active"],
                [2, "student_id"], [2, "friend_id"],
                [3, "id"], [3, "title"], [3, "budget"], [3, "school"]
            ],
            "column_types": [
                "text",
                "number", "text", "text", "number",
                "number", "text", "number", "number", "number", "time", "boolean",
                "number", "number",
                "number", "text", "number", "number"
            ],
            "primary_keys": [1, 5, 14],
            "foreign_keys": [[9, 1], [12, 5], [13, 5], [17, 1]]
        },
        {
            "db_id": "counter",
            "table_names_original": ["t"],
            "column_names_original": [[-1, "*"], [0, "id"], [0, "x"]],
            "column_types": ["text", "number", "number"],
            "primary_keys": [1],
            "foreign_keys": []
        },
        {
            "db_id": "islands",
            "table_names_original": ["A", "B"],
            "column_names_original": [
                [-1, "*"], [0, "id"], [0, "label"], [1, "id"], [1, "tag"], [1, "note"]
            ],
            "column_types": ["text", "number", "text", "number", "text", "number"],
            "primary_keys": [1, 3],
            "foreign_keys": []
        }
    ]);
    serde_json::to_string_pretty(&v).expect("static json")
}

/// Writes `tables.json` and one SQLite file per fixture database under
/// `data_root`, then loads the environments back from disk.
pub fn write_fixture_dbs(data_root: &Path) -> Result<Vec<DatabaseEnv>> {
    let tables = data_root.join("tables.json");
    std::fs::create_dir_all(data_root).map_err(|e| Error::io(data_root, e))?;
    std::fs::write(&tables, schema_json()).map_err(|e| Error::io(&tables, e))?;
    for (db_id, ddl) in [
        ("school", SCHOOL_DDL),
        ("counter", COUNTER_DDL),
        ("islands", ISLANDS_DDL),
    ] {
        let dir = data_root.join(db_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{db_id}.sqlite"));
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        let conn = Connection::open(&path)?;
        conn.execute_batch(ddl)?;
    }
    let envs = load_schemas(&tables)?;
    Ok(envs
        .into_iter()
        .map(|e| e.with_data_root(data_root))
        .collect())
}

/// Convenience lookup by id.
pub fn env<'a>(envs: &'a [DatabaseEnv], db_id: &str) -> &'a DatabaseEnv {
    envs.iter()
        .find(|e| e.db_id == db_id)
        .unwrap_or_else(|| panic!("no fixture database {db_id}"))
}

fn ex(utterance: &str, sql: &str) -> CorpusExample {
    CorpusExample::single_turn("school", utterance, sql)
}

fn session(turns: &[(&str, &str)]) -> Vec<CorpusExample> {
    let mut out = Vec::new();
    for (i, (u, q)) in turns.iter().enumerate() {
        let mut e = ex(u, q);
        e.turn_index = i as u32 + 1;
        if i > 0 {
            e.prev_sql = Some(turns[i - 1].1.to_string());
        }
        out.push(e);
    }
    out
}

/// Training corpus over the `school` database.
pub fn school_corpus() -> Vec<CorpusExample> {
    let mut out = vec![
        ex("how many friend are there ?", "select count ( * ) from Friend"),
        ex("names of students older than 15", "SELECT name FROM Students WHERE age > 15"),
        ex(
            "ids of students and names of their school for Highland Secondary",
            "SELECT T1.id, T2.name FROM Students AS T1 JOIN Schools AS T2 WHERE T1.school = T2.id AND T2.name = 'Highland Secondary'",
        ),
        ex("students of school 2", "SELECT name, age FROM Students WHERE school = 2"),
        ex("how many students are 15", "SELECT count(*) FROM Students WHERE age = 15"),
        ex("average gpa of students under 17", "SELECT avg(gpa) FROM Students WHERE age < 17"),
        ex("schools in Boston", "SELECT name FROM Schools WHERE city = 'Boston'"),
        ex("mid budget clubs", "SELECT title FROM Clubs WHERE budget BETWEEN 600 AND 1000"),
        ex(
            "top three active students by gpa",
            "SELECT name FROM Students WHERE active = 1 ORDER BY gpa DESC LIMIT 3",
        ),
        ex("number of schools per city", "SELECT city, count(*) FROM Schools GROUP BY city"),
        ex(
            "school hosting the chess club",
            "SELECT T2.name FROM Clubs AS T1 JOIN Schools AS T2 ON T1.school = T2.id WHERE T1.title = 'Chess'",
        ),
        ex(
            "students above average gpa",
            "SELECT name FROM Students WHERE gpa > (SELECT avg(gpa) FROM Students)",
        ),
        ex(
            "16 year olds with gpa over 3",
            "SELECT name FROM Students WHERE age = 16 INTERSECT SELECT name FROM Students WHERE gpa > 3.0",
        ),
        ex(
            "budget range of clubs at school 1",
            "SELECT max(budget), min(budget) FROM Clubs WHERE school = 1",
        ),
        ex("students with an a in the name", "SELECT name FROM Students WHERE name LIKE '%a%'"),
        ex("how many active students", "SELECT count(*) FROM Students WHERE active = 1"),
        ex(
            "students enrolled before 2018",
            "SELECT name FROM Students WHERE enrolled < '2018-01-01'",
        ),
        ex("schools founded after 1960", "SELECT name FROM Schools WHERE founded > 1960"),
        ex("students older than 14", "SELECT name FROM Students WHERE age > 14"),
        ex(
            "big clubs by budget",
            "SELECT title FROM Clubs WHERE budget > 700 ORDER BY budget DESC",
        ),
    ];
    out.extend(session(&[
        ("students older than 15", "SELECT name FROM Students WHERE age > 15"),
        ("how many of them", "SELECT count(*) FROM Students WHERE age > 15"),
        ("their average gpa", "SELECT avg(gpa) FROM Students WHERE age > 15"),
    ]));
    out.extend(session(&[
        ("schools in Boston", "SELECT name FROM Schools WHERE city = 'Boston'"),
        ("how many are there", "SELECT count(*) FROM Schools WHERE city = 'Boston'"),
    ]));
    out
}

/// Two-example evaluation corpus: one template seen in training, one not.
pub fn school_dev_corpus() -> Vec<CorpusExample> {
    vec![
        ex("students older than 16", "SELECT name FROM Students WHERE age > 16"),
        ex(
            "distinct cities with schools founded before 1990",
            "SELECT DISTINCT city FROM Schools WHERE founded < 1990",
        ),
    ]
}
