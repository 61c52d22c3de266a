//! Recursive-descent parser shared by concrete queries and coarse templates.
//!
//! SELECT lists may name columns of tables that are only introduced later by
//! FROM, so each query level scans ahead for its FROM clause, parses it to
//! establish the scope, and then returns to the select list.

use super::lexer::{tokenize, TokKind, Token};
use super::render::normalize_conditions;
use super::{
    assign_literal_types, AggFunc, ArithOp, CmpOp, ColumnExpr, Cond, Expr, From, Literal,
    OrderDir, OrderItem, Query, SetOp, Slot, SqlAst, TableRef,
};
use crate::error::{Error, Result};
use crate::schema::DatabaseEnv;

const RESERVED: &[&str] = &[
    "select", "from", "where", "group", "by", "having", "order", "limit", "union", "intersect",
    "except", "and", "or", "not", "in", "between", "like", "as", "join", "on", "distinct", "asc",
    "desc", "inner",
];

const UNSUPPORTED: &[&str] = &[
    "window", "over", "case", "when", "then", "else", "end", "exists", "is", "null", "left",
    "right", "outer", "full", "cross", "natural", "with", "insert", "update", "delete", "create",
    "drop", "offset", "cast", "partition", "values", "all", "any", "some", "using", "escape",
    "glob", "regexp", "collate", "replace", "alter", "pragma",
];

const CLAUSE_END: &[&str] = &[
    "where", "group", "having", "order", "limit", "union", "intersect", "except",
];

fn is_reserved(w: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(w))
}

fn is_unsupported(w: &str) -> bool {
    UNSUPPORTED.iter().any(|r| r.eq_ignore_ascii_case(w))
}

pub(crate) trait Resolve: Sized {
    type Leaf: Clone;

    /// Parse the FROM clause starting at `from_pos` (if any) and open a scope.
    fn parse_from(p: &mut Parser<Self>, from_pos: Option<usize>) -> Result<From<Self::Leaf>>;
    fn pop_scope(&mut self);
    fn scope_depth(&self) -> usize {
        0
    }
    fn truncate_scopes(&mut self, _depth: usize) {}
    fn resolve(&self, qualifier: Option<&str>, name: &str) -> Option<Self::Leaf>;
    /// Whether the bare word `val` denotes a value slot.
    fn val_word_is_placeholder(&self) -> bool {
        false
    }
}

pub(crate) struct Parser<R: Resolve> {
    toks: Vec<Token>,
    pos: usize,
    res: R,
    aliases: Vec<Vec<(String, Expr<R::Leaf>)>>,
}

impl<R: Resolve> Parser<R> {
    fn new(text: &str, res: R) -> Result<Self> {
        Ok(Parser {
            toks: tokenize(text)?,
            pos: 0,
            res,
            aliases: Vec::new(),
        })
    }

    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&Token> {
        self.toks.get(self.pos + k)
    }

    fn peek_word(&self, kw: &str) -> bool {
        self.peek().is_some_and(|t| t.is_word(kw))
    }

    fn peek_sym(&self, s: &str) -> bool {
        self.peek().is_some_and(|t| t.is_sym(s))
    }

    fn eat_word(&mut self, kw: &str) -> bool {
        let hit = self.peek_word(kw);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        let hit = self.peek_sym(s);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn offset(&self) -> usize {
        self.peek()
            .map(|t| t.offset)
            .or_else(|| self.toks.last().map(|t| t.offset + 1))
            .unwrap_or(0)
    }

    fn unexpected(&self, expected: &str) -> Error {
        match self.peek() {
            Some(Token {
                kind: TokKind::Word(w),
                ..
            }) if is_unsupported(w) => Error::UnsupportedSyntax(w.to_ascii_uppercase()),
            Some(t) => Error::Syntax {
                offset: t.offset,
                message: format!("expected {expected}, found {:?}", t.kind),
            },
            None => Error::Syntax {
                offset: self.offset(),
                message: format!("expected {expected}, found end of input"),
            },
        }
    }

    fn expect_word(&mut self, kw: &str) -> Result<()> {
        if self.eat_word(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{kw}`")))
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{s}`")))
        }
    }

    fn parse_complete(mut self) -> Result<Query<R::Leaf>> {
        let q = self.parse_query()?;
        if self.pos < self.toks.len() {
            return Err(self.unexpected("end of query"));
        }
        Ok(q)
    }

    /// Position of this level's FROM keyword, if it has one.
    fn find_from(&self) -> Option<usize> {
        let mut depth = 0i32;
        for (i, t) in self.toks.iter().enumerate().skip(self.pos) {
            if t.is_sym("(") {
                depth += 1;
            } else if t.is_sym(")") {
                depth -= 1;
                if depth < 0 {
                    return None;
                }
            } else if depth == 0 {
                if t.is_word("from") {
                    return Some(i);
                }
                if CLAUSE_END.iter().any(|kw| t.is_word(kw)) {
                    return None;
                }
            }
        }
        None
    }

    fn parse_query(&mut self) -> Result<Query<R::Leaf>> {
        self.expect_word("select")?;
        let distinct = self.eat_word("distinct");
        let select_start = self.pos;
        let from_pos = self.find_from();
        self.aliases.push(Vec::new());
        let from = R::parse_from(self, from_pos)?;
        let after_from = self.pos;

        let select = if let Some(fp) = from_pos {
            self.pos = select_start;
            let items = self.parse_select_list()?;
            if self.pos != fp {
                return Err(self.unexpected("`from`"));
            }
            self.pos = after_from;
            items
        } else {
            self.parse_select_list()?
        };

        let where_ = if self.eat_word("where") {
            Some(self.parse_or()?)
        } else {
            None
        };
        let mut group_by = Vec::new();
        if self.eat_word("group") {
            self.expect_word("by")?;
            group_by.push(self.parse_expr()?);
            while self.eat_sym(",") {
                group_by.push(self.parse_expr()?);
            }
        }
        let having = if self.eat_word("having") {
            Some(self.parse_or()?)
        } else {
            None
        };
        let mut order_by = Vec::new();
        if self.eat_word("order") {
            self.expect_word("by")?;
            loop {
                let expr = self.parse_expr()?;
                let dir = if self.eat_word("desc") {
                    OrderDir::Desc
                } else {
                    self.eat_word("asc");
                    OrderDir::Asc
                };
                order_by.push(OrderItem { expr, dir });
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        let limit = if self.eat_word("limit") {
            match self.peek().map(|t| t.kind.clone()) {
                Some(TokKind::Num(n)) => {
                    self.pos += 1;
                    Some(n.parse::<u64>().map_err(|_| Error::Syntax {
                        offset: self.offset(),
                        message: format!("limit `{n}` is not a non-negative integer"),
                    })?)
                }
                _ => return Err(self.unexpected("limit count")),
            }
        } else {
            None
        };
        if self.peek_sym(",") && self.peek_at(1).is_some_and(|t| matches!(t.kind, TokKind::Num(_))) {
            return Err(Error::UnsupportedSyntax("LIMIT with offset".into()));
        }

        let set_op = [SetOp::Union, SetOp::Intersect, SetOp::Except]
            .into_iter()
            .find(|op| self.peek_word(op.keyword()));
        let set_op = match set_op {
            Some(op) => {
                self.pos += 1;
                if self.peek_word("all") {
                    return Err(Error::UnsupportedSyntax("UNION ALL".into()));
                }
                Some((op, Box::new(self.parse_query()?)))
            }
            None => None,
        };

        self.aliases.pop();
        self.res.pop_scope();
        Ok(Query {
            distinct,
            select,
            from,
            where_,
            group_by,
            having,
            order_by,
            limit,
            set_op,
        })
    }

    fn parse_select_list(&mut self) -> Result<Vec<Expr<R::Leaf>>> {
        let mut items = Vec::new();
        loop {
            let expr = self.parse_expr()?;
            let alias = if self.eat_word("as") {
                Some(self.take_name()?)
            } else {
                match self.peek().map(|t| &t.kind) {
                    Some(TokKind::Word(w)) if !is_reserved(w) && !is_unsupported(w) => {
                        Some(self.take_name()?)
                    }
                    _ => None,
                }
            };
            if let Some(a) = alias {
                self.aliases
                    .last_mut()
                    .expect("alias scope")
                    .push((a, expr.clone()));
            }
            items.push(expr);
            if !self.eat_sym(",") {
                return Ok(items);
            }
        }
    }

    fn take_name(&mut self) -> Result<String> {
        match self.peek().map(|t| t.kind.clone()) {
            Some(TokKind::Word(w)) if !is_reserved(&w) => {
                self.pos += 1;
                Ok(w)
            }
            Some(TokKind::QuotedIdent(w)) | Some(TokKind::Str(w, true)) => {
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.unexpected("a name")),
        }
    }

    fn parse_or(&mut self) -> Result<Cond<R::Leaf>> {
        let mut parts = vec![self.parse_and()?];
        while self.eat_word("or") {
            parts.push(self.parse_and()?);
        }
        Ok(Cond::or(parts))
    }

    fn parse_and(&mut self) -> Result<Cond<R::Leaf>> {
        let mut parts = vec![self.parse_pred()?];
        while self.eat_word("and") {
            parts.push(self.parse_pred()?);
        }
        Ok(Cond::and(parts))
    }

    fn at_operator(&self) -> bool {
        match self.peek() {
            Some(t) => {
                ["=", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/"]
                    .iter()
                    .any(|s| t.is_sym(s))
                    || ["not", "in", "like", "between", "is"].iter().any(|w| t.is_word(w))
            }
            None => false,
        }
    }

    fn parse_pred(&mut self) -> Result<Cond<R::Leaf>> {
        if self.peek_sym("(") && !self.peek_at(1).is_some_and(|t| t.is_word("select")) {
            let save = (self.pos, self.aliases.len(), self.res.scope_depth());
            self.pos += 1;
            if let Ok(c) = self.parse_or() {
                if self.eat_sym(")") && !self.at_operator() {
                    return Ok(c);
                }
            }
            self.pos = save.0;
            self.aliases.truncate(save.1);
            self.res.truncate_scopes(save.2);
        }
        if self.peek_word("not") {
            return Err(Error::UnsupportedSyntax("NOT condition".into()));
        }
        let left = self.parse_expr()?;
        let sym_op = [
            ("=", CmpOp::Eq),
            ("!=", CmpOp::Ne),
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ]
        .into_iter()
        .find(|(s, _)| self.peek_sym(s));
        if let Some((_, op)) = sym_op {
            self.pos += 1;
            let right = self.parse_expr()?;
            return Ok(Cond::Cmp { left, op, right });
        }
        let negated = self.eat_word("not");
        if self.eat_word("in") {
            let right = self.parse_in_source()?;
            let op = if negated { CmpOp::NotIn } else { CmpOp::In };
            return Ok(Cond::Cmp { left, op, right });
        }
        if self.eat_word("like") {
            let right = self.parse_expr()?;
            let op = if negated { CmpOp::NotLike } else { CmpOp::Like };
            return Ok(Cond::Cmp { left, op, right });
        }
        if self.peek_word("between") {
            if negated {
                return Err(Error::UnsupportedSyntax("NOT BETWEEN".into()));
            }
            self.pos += 1;
            let low = self.parse_expr()?;
            self.expect_word("and")?;
            let high = self.parse_expr()?;
            return Ok(Cond::Between {
                expr: left,
                low,
                high,
            });
        }
        if negated {
            return Err(self.unexpected("`in`, `like` after `not`"));
        }
        Err(self.unexpected("a comparison operator"))
    }

    fn parse_in_source(&mut self) -> Result<Expr<R::Leaf>> {
        self.expect_sym("(")?;
        if self.peek_word("select") {
            let q = self.parse_query()?;
            self.expect_sym(")")?;
            return Ok(Expr::Subquery(Box::new(q)));
        }
        let mut items = vec![self.parse_expr()?];
        while self.eat_sym(",") {
            items.push(self.parse_expr()?);
        }
        self.expect_sym(")")?;
        Ok(Expr::List(items))
    }

    fn parse_expr(&mut self) -> Result<Expr<R::Leaf>> {
        let mut left = self.parse_term()?;
        loop {
            let op = if self.peek_sym("+") {
                ArithOp::Add
            } else if self.peek_sym("-") {
                ArithOp::Sub
            } else {
                return Ok(left);
            };
            self.pos += 1;
            let right = self.parse_term()?;
            left = Expr::Arith {
                op,
                left: Box::new(left),
                right: Box::new(right),
            };
        }
    }

    fn parse_term(&mut self) -> Result<Expr<R::Leaf>> {
        let mut left = self.parse_primary()?;
        loop {
            let op = if self.peek_sym("*") {
                ArithOp::Mul
            } else if self.peek_sym("/") {
                ArithOp::Div
            } else {
                return Ok(left);
            };
            self.pos += 1;
            let right = self.parse_primary()?;
            left = Expr::Arith {
                op,
                left: Box::new(left),
                right: Box::new(right),
            };
        }
    }

    fn parse_primary(&mut self) -> Result<Expr<R::Leaf>> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.unexpected("an expression"));
        };
        match tok.kind {
            TokKind::Sym("(") => {
                self.pos += 1;
                if self.peek_word("select") {
                    let q = self.parse_query()?;
                    self.expect_sym(")")?;
                    return Ok(Expr::Subquery(Box::new(q)));
                }
                let inner = self.parse_expr()?;
                self.expect_sym(")")?;
                Ok(inner)
            }
            TokKind::Sym("*") => {
                self.pos += 1;
                Ok(Expr::Star)
            }
            TokKind::Sym("-") => match self.peek_at(1).map(|t| t.kind.clone()) {
                Some(TokKind::Num(n)) => {
                    self.pos += 2;
                    Ok(Expr::Literal(Literal::number(format!("-{n}"))))
                }
                _ => Err(Error::UnsupportedSyntax("unary minus".into())),
            },
            TokKind::Num(n) => {
                self.pos += 1;
                Ok(Expr::Literal(Literal::number(n)))
            }
            TokKind::Placeholder => {
                self.pos += 1;
                Ok(Expr::Literal(Literal::placeholder()))
            }
            TokKind::Str(s, double) => {
                self.pos += 1;
                if double {
                    if let Some(leaf) = self.res.resolve(None, &s) {
                        return Ok(Expr::Column(leaf));
                    }
                }
                Ok(Expr::Literal(Literal::text(s)))
            }
            TokKind::QuotedIdent(name) => {
                self.pos += 1;
                self.parse_name_tail(name)
            }
            TokKind::Word(w) => {
                if let Some(func) = AggFunc::from_keyword(&w) {
                    if self.peek_at(1).is_some_and(|t| t.is_sym("(")) {
                        self.pos += 2;
                        let distinct = self.eat_word("distinct");
                        let arg = self.parse_expr()?;
                        self.expect_sym(")")?;
                        return Ok(Expr::Agg {
                            func,
                            distinct,
                            arg: Box::new(arg),
                        });
                    }
                }
                if is_unsupported(&w) {
                    return Err(Error::UnsupportedSyntax(w.to_ascii_uppercase()));
                }
                if is_reserved(&w) {
                    return Err(self.unexpected("an expression"));
                }
                if self.peek_at(1).is_some_and(|t| t.is_sym("(")) {
                    return Err(Error::UnsupportedSyntax(format!("function {w}()")));
                }
                self.pos += 1;
                if w.eq_ignore_ascii_case("val")
                    && self.res.val_word_is_placeholder()
                    && !self.peek_sym(".")
                {
                    return Ok(Expr::Literal(Literal::placeholder()));
                }
                self.parse_name_tail(w)
            }
            _ => Err(self.unexpected("an expression")),
        }
    }

    /// `first` has been consumed; handle an optional `.column` suffix.
    fn parse_name_tail(&mut self, first: String) -> Result<Expr<R::Leaf>> {
        if self.eat_sym(".") {
            if self.peek_sym("*") {
                return Err(Error::UnsupportedSyntax(format!("{first}.*")));
            }
            let col = match self.peek().map(|t| t.kind.clone()) {
                Some(TokKind::Word(w)) | Some(TokKind::QuotedIdent(w)) => {
                    self.pos += 1;
                    w
                }
                _ => return Err(self.unexpected("a column name")),
            };
            return self
                .res
                .resolve(Some(&first), &col)
                .map(Expr::Column)
                .ok_or_else(|| Error::Resolution(format!("{first}.{col}")));
        }
        let alias_hit = self.aliases.last().and_then(|level| {
            level
                .iter()
                .find(|(a, _)| a.eq_ignore_ascii_case(&first))
                .map(|(_, e)| e.clone())
        });
        if let Some(e) = alias_hit {
            return Ok(e);
        }
        self.res
            .resolve(None, &first)
            .map(Expr::Column)
            .ok_or(Error::Resolution(first))
    }
}

struct Entry {
    table: usize,
    alias: Option<String>,
    occurrence: u32,
}

pub(crate) struct ConcreteResolver<'e> {
    env: &'e DatabaseEnv,
    scopes: Vec<Vec<Entry>>,
}

impl ConcreteResolver<'_> {
    fn leaf(&self, entry: &Entry, name: &str) -> Option<ColumnExpr> {
        self.env
            .find_column(entry.table, name)
            .map(|c| ColumnExpr {
                column: c.clone(),
                occurrence: entry.occurrence,
            })
    }
}

impl Resolve for ConcreteResolver<'_> {
    type Leaf = ColumnExpr;

    fn parse_from(p: &mut Parser<Self>, from_pos: Option<usize>) -> Result<From<ColumnExpr>> {
        p.res.scopes.push(Vec::new());
        let Some(fp) = from_pos else {
            return Ok(From::default());
        };
        p.pos = fp;
        p.expect_word("from")?;
        let mut from = From::default();
        loop {
            if p.peek_sym("(") {
                return Err(Error::UnsupportedSyntax("subquery in FROM".into()));
            }
            let name = match p.peek().map(|t| t.kind.clone()) {
                Some(TokKind::Word(w)) if !is_reserved(&w) && !is_unsupported(&w) => w,
                Some(TokKind::QuotedIdent(w)) | Some(TokKind::Str(w, true)) => w,
                _ => return Err(p.unexpected("a table name")),
            };
            p.pos += 1;
            let table = p
                .res
                .env
                .find_table(&name)
                .ok_or_else(|| Error::Resolution(name.clone()))?;
            let alias = if p.eat_word("as") {
                Some(p.take_name()?)
            } else {
                match p.peek().map(|t| &t.kind) {
                    Some(TokKind::Word(w)) if !is_reserved(w) && !is_unsupported(w) => {
                        Some(p.take_name()?)
                    }
                    _ => None,
                }
            };
            let scope = p.res.scopes.last_mut().expect("scope pushed");
            let occurrence = scope.iter().filter(|e| e.table == table).count() as u32;
            scope.push(Entry {
                table,
                alias,
                occurrence,
            });
            from.tables.push(TableRef {
                index: table,
                name: p.res.env.tables[table].name.clone(),
            });

            if p.eat_word("on") {
                loop {
                    let left = p.parse_expr()?;
                    p.expect_sym("=")?;
                    let right = p.parse_expr()?;
                    match (left, right) {
                        (Expr::Column(a), Expr::Column(b)) => from.conditions.push((a, b)),
                        _ => {
                            return Err(Error::UnsupportedSyntax(
                                "join condition other than column equality".into(),
                            ))
                        }
                    }
                    if !p.eat_word("and") {
                        break;
                    }
                }
            }

            if p.eat_sym(",") || p.eat_word("join") {
                continue;
            }
            if p.peek_word("inner") && p.peek_at(1).is_some_and(|t| t.is_word("join")) {
                p.pos += 2;
                continue;
            }
            if ["left", "right", "full", "outer", "cross", "natural"]
                .iter()
                .any(|w| p.peek_word(w))
            {
                return Err(Error::UnsupportedSyntax("outer or cross join".into()));
            }
            normalize_conditions(&mut from);
            return Ok(from);
        }
    }

    fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    fn scope_depth(&self) -> usize {
        self.scopes.len()
    }

    fn truncate_scopes(&mut self, depth: usize) {
        self.scopes.truncate(depth);
    }

    fn resolve(&self, qualifier: Option<&str>, name: &str) -> Option<ColumnExpr> {
        let scope = self.scopes.last()?;
        match qualifier {
            Some(q) => {
                let by_alias = scope
                    .iter()
                    .find(|e| e.alias.as_deref().is_some_and(|a| a.eq_ignore_ascii_case(q)));
                let entry = by_alias.or_else(|| {
                    scope
                        .iter()
                        .find(|e| self.env.tables[e.table].name.eq_ignore_ascii_case(q))
                })?;
                self.leaf(entry, name)
            }
            None => scope.iter().find_map(|e| self.leaf(e, name)),
        }
    }
}

pub(crate) struct TemplateResolver;

impl Resolve for TemplateResolver {
    type Leaf = Slot;

    fn parse_from(p: &mut Parser<Self>, from_pos: Option<usize>) -> Result<From<Slot>> {
        match from_pos {
            None => Ok(From::default()),
            Some(fp) => Err(Error::Syntax {
                offset: p.toks[fp].offset,
                message: "coarse templates carry no FROM clause".into(),
            }),
        }
    }

    fn pop_scope(&mut self) {}

    fn resolve(&self, qualifier: Option<&str>, name: &str) -> Option<Slot> {
        match qualifier {
            Some(_) => None,
            None => Slot::parse(name),
        }
    }

    fn val_word_is_placeholder(&self) -> bool {
        true
    }
}

pub(crate) fn parse_concrete(sql: &str, env: &DatabaseEnv) -> Result<SqlAst> {
    let parser = Parser::new(
        sql,
        ConcreteResolver {
            env,
            scopes: Vec::new(),
        },
    )?;
    let mut q = parser.parse_complete()?;
    assign_literal_types(&mut q);
    Ok(q)
}

pub(crate) fn parse_template(text: &str) -> Result<Query<Slot>> {
    Parser::new(text, TemplateResolver)?.parse_complete()
}
