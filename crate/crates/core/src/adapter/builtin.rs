//! Rule-based baselines.
//!
//! `perfect` renders canonical SQL to pseudo-English through a phrase table
//! and parses it back exactly. `corrupting` shares the generator but its
//! parser nudges one literal in about half of the utterances. `lossy`
//! forgets everything after FROM, so its parser can only guess.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use super::{GenerateRequest, GenerateResponse, ModelAdapter, ParseRequest, ParseResponse};
use crate::canon::{tokenize, TokKind};
use crate::error::{Error, Result};
use crate::exec::format_number;
use crate::seed::derive_seed_str;

pub const BUILTIN_NAMES: [&str; 3] = ["perfect", "corrupting", "lossy"];

pub fn builtin(name: &str) -> Option<Arc<dyn ModelAdapter>> {
    let kind = match name {
        "perfect" => Kind::Perfect,
        "corrupting" => Kind::Corrupting,
        "lossy" => Kind::Lossy,
        _ => return None,
    };
    Some(Arc::new(Builtin { kind }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Perfect,
    Corrupting,
    Lossy,
}

struct Builtin {
    kind: Kind,
}

impl ModelAdapter for Builtin {
    fn name(&self) -> &str {
        match self.kind {
            Kind::Perfect => "builtin:perfect",
            Kind::Corrupting => "builtin:corrupting",
            Kind::Lossy => "builtin:lossy",
        }
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        let utterance = match self.kind {
            Kind::Lossy => describe(&truncate_after_from(&req.query)?)?,
            _ => describe(&req.query)?,
        };
        Ok(GenerateResponse { utterance })
    }

    fn parse(&self, req: &ParseRequest) -> Result<ParseResponse> {
        let mut tokens = read_back(&req.utterance)?;
        if self.kind == Kind::Corrupting {
            corrupt(&mut tokens, &req.utterance);
        }
        Ok(ParseResponse {
            query: tokens.join(" "),
        })
    }
}

/// SQL keyword and its phrase. Keywords missing here are spelled as is.
const PHRASES: &[(&str, &str)] = &[
    ("select", "show me"),
    ("distinct", "unique"),
    ("from", "using"),
    ("join", "together with"),
    ("as", "called"),
    ("on", "linked by"),
    ("where", "such that"),
    ("in", "among"),
    ("like", "resembles"),
    ("group", "grouped"),
    ("having", "keeping groups where"),
    ("order", "sorted"),
    ("asc", "ascending"),
    ("desc", "descending"),
    ("limit", "keeping the first"),
    ("union", "plus"),
    ("intersect", "also in"),
    ("except", "excluding"),
    ("count", "the number of"),
    ("sum", "the total of"),
    ("avg", "the average of"),
    ("min", "the smallest"),
    ("max", "the largest"),
    ("=", "equals"),
    ("!=", "differs from"),
    ("<", "is below"),
    ("<=", "is at most"),
    (">", "is above"),
    (">=", "is at least"),
];

const PLAIN_KEYWORDS: &[&str] = &["and", "or", "not", "between", "by", "is", "null"];
const AGGREGATES: &[&str] = &["count", "sum", "avg", "min", "max"];

/// Every word an utterance may use structurally. Identifiers spelled like
/// one of these get backquoted.
fn vocabulary() -> &'static BTreeSet<String> {
    static VOCAB: OnceLock<BTreeSet<String>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut v: BTreeSet<String> = PHRASES
            .iter()
            .flat_map(|(k, p)| std::iter::once(*k).chain(p.split(' ')))
            .map(str::to_string)
            .collect();
        v.extend(PLAIN_KEYWORDS.iter().map(|s| s.to_string()));
        v
    })
}

fn phrase_of(sql: &str) -> Option<&'static str> {
    PHRASES.iter().find(|(k, _)| *k == sql).map(|(_, p)| *p)
}

fn quote(s: &str, q: char) -> String {
    let doubled: String = [q, q].iter().collect();
    format!("{q}{}{q}", s.replace(q, &doubled))
}

fn ident_text(name: &str) -> String {
    if vocabulary().contains(&name.to_ascii_lowercase()) {
        quote(name, '`')
    } else {
        name.to_string()
    }
}

/// Renders SQL as a phrase-table utterance.
pub fn describe(sql: &str) -> Result<String> {
    let tokens = tokenize(sql)?;
    if let [s, c, l, st, r, f, t] = tokens.as_slice() {
        if s.is_word("select")
            && c.is_word("count")
            && l.is_sym("(")
            && st.is_sym("*")
            && r.is_sym(")")
            && f.is_word("from")
        {
            let table = match &t.kind {
                TokKind::Word(w) => Some(w.clone()),
                TokKind::QuotedIdent(w) => Some(quote(w, '`')),
                _ => None,
            };
            if let Some(table) = table {
                return Ok(format!("how many {} are there ?", table.to_lowercase()));
            }
        }
    }
    let mut chunks: Vec<String> = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let chunk = match &tok.kind {
            TokKind::Word(w) => {
                let lower = w.to_ascii_lowercase();
                let next_is_paren = tokens.get(i + 1).is_some_and(|t| t.is_sym("("));
                let is_keyword = if AGGREGATES.contains(&lower.as_str()) {
                    next_is_paren
                } else {
                    phrase_of(&lower).is_some() || PLAIN_KEYWORDS.contains(&lower.as_str())
                };
                if is_keyword {
                    phrase_of(&lower).unwrap_or(&lower).to_string()
                } else {
                    ident_text(w)
                }
            }
            TokKind::QuotedIdent(w) => quote(w, '`'),
            TokKind::Str(s, _) => quote(s, '\''),
            TokKind::Num(n) => n.clone(),
            TokKind::Sym(s) => phrase_of(s).unwrap_or(s).to_string(),
            TokKind::Placeholder => "<val>".to_string(),
        };
        chunks.push(chunk);
    }
    let mut out = String::new();
    for (i, c) in chunks.iter().enumerate() {
        let glue = i == 0 || c == "." || chunks[i - 1] == ".";
        if !glue {
            out.push(' ');
        }
        out.push_str(c);
    }
    Ok(out)
}

/// Inverts [`describe`], returning SQL tokens.
pub fn read_back(utterance: &str) -> Result<Vec<String>> {
    let text = utterance.trim();
    if let Some(table) = text
        .strip_prefix("how many ")
        .and_then(|t| t.strip_suffix(" are there ?"))
    {
        return Ok(["select", "count", "(", "*", ")", "from", table]
            .iter()
            .map(|s| s.to_string())
            .collect());
    }
    let text = text.strip_suffix('?').unwrap_or(text);
    let tokens = tokenize(text).map_err(|e| Error::Adapter(format!("cannot read utterance: {e}")))?;
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if let Some((sql, len)) = match_phrase(&tokens[i..]) {
            out.push(sql.to_string());
            i += len;
            continue;
        }
        out.push(match &tokens[i].kind {
            TokKind::Word(w) => w.clone(),
            TokKind::QuotedIdent(w) => quote(w, '`'),
            TokKind::Str(s, _) => quote(s, '\''),
            TokKind::Num(n) => n.clone(),
            TokKind::Sym(s) => s.to_string(),
            TokKind::Placeholder => "<val>".to_string(),
        });
        i += 1;
    }
    Ok(out)
}

/// Longest phrase starting at the head of `tokens`.
fn match_phrase(tokens: &[crate::canon::Token]) -> Option<(&'static str, usize)> {
    let mut best: Option<(&'static str, usize)> = None;
    for (sql, phrase) in PHRASES {
        let words: Vec<&str> = phrase.split(' ').collect();
        if words.len() > tokens.len() {
            continue;
        }
        let hit = words
            .iter()
            .zip(tokens)
            .all(|(w, t)| matches!(&t.kind, TokKind::Word(x) if x == w));
        if hit && best.is_none_or(|(_, n)| words.len() > n) {
            best = Some((sql, words.len()));
        }
    }
    best
}

/// Keeps `select ... from <tables>` and drops every later clause.
fn truncate_after_from(sql: &str) -> Result<String> {
    let tokens = tokenize(sql)?;
    let mut depth = 0i32;
    let mut seen_from = false;
    let mut end = tokens.len();
    for (i, t) in tokens.iter().enumerate() {
        if t.is_sym("(") {
            depth += 1;
        } else if t.is_sym(")") {
            depth -= 1;
        } else if depth == 0 && t.is_word("from") {
            seen_from = true;
        } else if depth == 0
            && seen_from
            && ["where", "group", "order", "limit", "having", "union", "intersect", "except"]
                .iter()
                .any(|k| t.is_word(k))
        {
            end = i;
            break;
        }
    }
    Ok(tokens[..end]
        .iter()
        .map(|t| match &t.kind {
            TokKind::Word(w) => w.clone(),
            TokKind::QuotedIdent(w) => quote(w, '`'),
            TokKind::Str(s, _) => quote(s, '\''),
            TokKind::Num(n) => n.clone(),
            TokKind::Sym(s) => s.to_string(),
            TokKind::Placeholder => "<val>".to_string(),
        })
        .collect::<Vec<_>>()
        .join(" "))
}

/// With probability one half, decided by a hash of the utterance, changes
/// one literal among `tokens`.
fn corrupt(tokens: &mut [String], utterance: &str) {
    let h = derive_seed_str(0, utterance);
    if h & 1 == 0 {
        return;
    }
    let literals: Vec<usize> = (0..tokens.len())
        .filter(|&i| {
            let t = &tokens[i];
            // limit counts belong to the template, not its values
            let structural = i > 0 && (tokens[i - 1] == "." || tokens[i - 1] == "limit");
            t.starts_with('\'') || (!structural && t.parse::<f64>().is_ok())
        })
        .collect();
    if literals.is_empty() {
        return;
    }
    let at = literals[((h >> 1) % literals.len() as u64) as usize];
    let t = &tokens[at];
    tokens[at] = if let Some(inner) = t.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')) {
        match inner.strip_suffix('%') {
            Some(head) => format!("'{head}#%'"),
            None => format!("'{inner}#'"),
        }
    } else {
        let n: f64 = t.parse().unwrap_or(0.0);
        format_number(n + 1000.0)
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrases_do_not_collide() {
        let mut seen = BTreeSet::new();
        for (_, p) in PHRASES {
            assert!(seen.insert(*p), "{p}");
        }
    }

    #[test]
    fn count_rule() {
        assert_eq!(
            describe("select count ( * ) from Friend").unwrap(),
            "how many friend are there ?"
        );
        assert_eq!(
            read_back("how many friend are there ?").unwrap().join(" "),
            "select count ( * ) from friend"
        );
    }

    #[test]
    fn vocabulary_identifiers_are_quoted() {
        let u = describe("select count ( count ) from t where show = 'a b'").unwrap();
        assert_eq!(
            u,
            "show me the number of ( `count` ) using t such that `show` equals 'a b'"
        );
        assert_eq!(
            read_back(&u).unwrap().join(" "),
            "select count ( `count` ) from t where `show` = 'a b'"
        );
    }

    #[test]
    fn string_corruption_keeps_like_wildcards() {
        let mut t = vec!["'%ab%'".to_string()];
        // find an utterance that triggers corruption
        let u = (0..64)
            .map(|i| format!("u{i}"))
            .find(|u| derive_seed_str(0, u) & 1 == 1)
            .unwrap();
        corrupt(&mut t, &u);
        assert_eq!(t[0], "'%ab#%'");
    }
}
