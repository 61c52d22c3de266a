use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokKind {
    /// Unquoted identifier or keyword.
    Word(String),
    /// Backtick- or bracket-quoted identifier.
    QuotedIdent(String),
    /// String literal; `true` when it was written with double quotes, which
    /// may still turn out to name a column.
    Str(String, bool),
    Num(String),
    Sym(&'static str),
    /// `<val>`, the rendering of a stripped literal.
    Placeholder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokKind,
    pub offset: usize,
}

impl Token {
    pub fn is_word(&self, kw: &str) -> bool {
        matches!(&self.kind, TokKind::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    pub fn is_sym(&self, s: &str) -> bool {
        matches!(&self.kind, TokKind::Sym(x) if *x == s)
    }
}

const SYMBOLS: &[&str] = &[
    "!=", "<>", "<=", ">=", "==", "(", ")", ",", ".", "*", "+", "-", "/", "=", "<", ">", ";",
];

pub fn tokenize(sql: &str) -> Result<Vec<Token>> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c == b'\'' || c == b'"' {
            let (text, next) = read_quoted(sql, i, c)?;
            out.push(Token {
                kind: TokKind::Str(text, c == b'"'),
                offset: start,
            });
            i = next;
        } else if c == b'`' {
            let (text, next) = read_quoted(sql, i, b'`')?;
            out.push(Token {
                kind: TokKind::QuotedIdent(text),
                offset: start,
            });
            i = next;
        } else if c == b'[' {
            let end = sql[i + 1..].find(']').ok_or_else(|| Error::Syntax {
                offset: start,
                message: "unterminated [identifier]".into(),
            })?;
            out.push(Token {
                kind: TokKind::QuotedIdent(sql[i + 1..i + 1 + end].to_string()),
                offset: start,
            });
            i += end + 2;
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let mut j = i;
            let mut seen_dot = false;
            while j < bytes.len() && (bytes[j].is_ascii_digit() || (bytes[j] == b'.' && !seen_dot)) {
                seen_dot |= bytes[j] == b'.';
                j += 1;
            }
            out.push(Token {
                kind: TokKind::Num(sql[i..j].to_string()),
                offset: start,
            });
            i = j;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let mut j = i;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            out.push(Token {
                kind: TokKind::Word(sql[i..j].to_string()),
                offset: start,
            });
            i = j;
        } else if sql[i..].starts_with("<val>") {
            out.push(Token {
                kind: TokKind::Placeholder,
                offset: start,
            });
            i += 5;
        } else if let Some(sym) = SYMBOLS.iter().find(|s| sql[i..].starts_with(**s)) {
            let sym = match *sym {
                "<>" => "!=",
                "==" => "=",
                s => s,
            };
            out.push(Token {
                kind: TokKind::Sym(sym),
                offset: start,
            });
            i += if sql[i..].starts_with("<>") || sql[i..].starts_with("==") {
                2
            } else {
                sym.len()
            };
        } else {
            let ch = sql[i..].chars().next().unwrap_or('?');
            return Err(Error::Syntax {
                offset: start,
                message: format!("unexpected character `{ch}`"),
            });
        }
    }
    // a single trailing semicolon is tolerated
    if out.last().is_some_and(|t| t.is_sym(";")) {
        out.pop();
    }
    Ok(out)
}

/// Reads a quoted run starting at `start`, where a doubled quote escapes it.
fn read_quoted(sql: &str, start: usize, quote: u8) -> Result<(String, usize)> {
    let bytes = sql.as_bytes();
    let mut text = String::new();
    let mut i = start + 1;
    let mut run = i;
    while i < bytes.len() {
        if bytes[i] == quote {
            text.push_str(&sql[run..i]);
            if bytes.get(i + 1) == Some(&quote) {
                text.push(quote as char);
                i += 2;
                run = i;
                continue;
            }
            return Ok((text, i + 1));
        }
        i += 1;
    }
    Err(Error::Syntax {
        offset: start,
        message: "unterminated quoted text".into(),
    })
}

/// Whether a query string carries an `order by` outside any parentheses.
///
/// Works on unparseable text too, falling back to a case-insensitive
/// substring test when tokenization fails.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let Ok(tokens) = tokenize(sql) else {
        return sql.to_ascii_lowercase().contains("order by");
    };
    let mut depth = 0i32;
    for pair in tokens.windows(2) {
        if pair[0].is_sym("(") {
            depth += 1;
        } else if pair[0].is_sym(")") {
            depth -= 1;
        } else if depth == 0 && pair[0].is_word("order") && pair[1].is_word("by") {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(sql: &str) -> Vec<TokKind> {
        tokenize(sql).unwrap().into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn splits_symbols_and_words() {
        assert_eq!(
            kinds("select count(*) from Friend;"),
            vec![
                TokKind::Word("select".into()),
                TokKind::Word("count".into()),
                TokKind::Sym("("),
                TokKind::Sym("*"),
                TokKind::Sym(")"),
                TokKind::Word("from".into()),
                TokKind::Word("Friend".into()),
            ]
        );
    }

    #[test]
    fn quotes_and_escapes() {
        assert_eq!(
            kinds(r#"'it''s' "Tesla" `odd name`"#),
            vec![
                TokKind::Str("it's".into(), false),
                TokKind::Str("Tesla".into(), true),
                TokKind::QuotedIdent("odd name".into()),
            ]
        );
    }

    #[test]
    fn normalizes_operator_spellings() {
        assert_eq!(kinds("a <> b"), kinds("a != b"));
        assert_eq!(kinds("a == b"), kinds("a = b"));
    }

    #[test]
    fn placeholder_token() {
        assert_eq!(
            kinds("x = <val>"),
            vec![
                TokKind::Word("x".into()),
                TokKind::Sym("="),
                TokKind::Placeholder
            ]
        );
    }

    #[test]
    fn order_by_detection_ignores_subqueries() {
        assert!(has_top_level_order_by("select a from t order by a"));
        assert!(!has_top_level_order_by(
            "select a from t where a in (select b from s order by b limit 1)"
        ));
        assert!(has_top_level_order_by(
            "select a from t union select b from s ORDER BY a"
        ));
    }
}
