//! Canonical surface form.
//!
//! Keywords are lowercase and every token is separated by one space, so
//! `count(*)` renders as `count ( * )`. Multi-table FROM entries are aliased
//! `T1..Tn` in FROM order; single-table queries use bare column names. Join
//! conditions follow the first JOIN at which both of their tables are bound.

use super::{
    Cond, ColumnExpr, Expr, From, Literal, LiteralValue, OrderDir, Query, Slot, SqlAst,
};

/// Column leaves the canonical renderer knows how to print.
pub trait RenderLeaf: Sized {
    fn render_leaf(&self, from: &From<Self>) -> String;
    fn placeholder() -> &'static str;
    /// Position of the FROM entry this leaf belongs to.
    fn entry_index(&self, _from: &From<Self>) -> Option<usize> {
        None
    }
}

impl RenderLeaf for ColumnExpr {
    fn render_leaf(&self, from: &From<Self>) -> String {
        let name = quote_ident(&self.column.name);
        if from.tables.len() <= 1 {
            return name;
        }
        match entry_position(from, self) {
            Some(pos) => format!("T{}.{name}", pos + 1),
            None => name,
        }
    }

    fn placeholder() -> &'static str {
        "<val>"
    }

    fn entry_index(&self, from: &From<Self>) -> Option<usize> {
        entry_position(from, self)
    }
}

impl RenderLeaf for Slot {
    fn render_leaf(&self, _from: &From<Self>) -> String {
        self.to_string()
    }

    fn placeholder() -> &'static str {
        "val"
    }
}

fn entry_position(from: &From<ColumnExpr>, col: &ColumnExpr) -> Option<usize> {
    from.tables
        .iter()
        .enumerate()
        .filter(|(_, t)| t.index == col.column.table_index)
        .nth(col.occurrence as usize)
        .map(|(i, _)| i)
}

fn is_plain_ident(s: &str) -> bool {
    let mut chars = s.chars();
    let head_ok = chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
    head_ok
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !matches!(
            s.to_ascii_lowercase().as_str(),
            "select" | "from" | "where" | "group" | "by" | "having" | "order" | "limit"
                | "union" | "intersect" | "except" | "and" | "or" | "not" | "in" | "between"
                | "like" | "as" | "join" | "on" | "distinct" | "asc" | "desc" | "inner"
                | "is" | "null" | "case" | "left" | "right" | "cross" | "all" | "val"
        )
}

pub(crate) fn quote_ident(s: &str) -> String {
    if is_plain_ident(s) {
        s.to_string()
    } else {
        format!("`{}`", s.replace('`', "``"))
    }
}

fn attach_positions<C: RenderLeaf>(from: &From<C>) -> Vec<usize> {
    from.conditions
        .iter()
        .map(|(a, b)| {
            let pos = |leaf: &C| leaf.entry_index(from).unwrap_or(0);
            pos(a).max(pos(b)).max(1).min(from.tables.len().saturating_sub(1))
        })
        .collect()
}

/// Stable-sort join conditions by the FROM entry they attach to, so a
/// parsed FROM matches the order the renderer writes it back in.
pub(crate) fn normalize_conditions(from: &mut From<ColumnExpr>) {
    let attach = attach_positions(from);
    let mut keyed: Vec<_> = attach.into_iter().zip(from.conditions.drain(..)).collect();
    keyed.sort_by_key(|(k, _)| *k);
    from.conditions = keyed.into_iter().map(|(_, c)| c).collect();
}

struct Renderer {
    out: Vec<String>,
}

impl Renderer {
    fn push(&mut self, s: impl Into<String>) {
        self.out.push(s.into());
    }

    fn query<C: RenderLeaf>(&mut self, q: &Query<C>) {
        self.push("select");
        if q.distinct {
            self.push("distinct");
        }
        for (i, e) in q.select.iter().enumerate() {
            if i > 0 {
                self.push(",");
            }
            self.expr(e, &q.from);
        }
        self.from(&q.from);
        if let Some(c) = &q.where_ {
            self.push("where");
            self.cond(c, &q.from);
        }
        if !q.group_by.is_empty() {
            self.push("group");
            self.push("by");
            for (i, e) in q.group_by.iter().enumerate() {
                if i > 0 {
                    self.push(",");
                }
                self.expr(e, &q.from);
            }
        }
        if let Some(c) = &q.having {
            self.push("having");
            self.cond(c, &q.from);
        }
        if !q.order_by.is_empty() {
            self.push("order");
            self.push("by");
            for (i, item) in q.order_by.iter().enumerate() {
                if i > 0 {
                    self.push(",");
                }
                self.expr(&item.expr, &q.from);
                if item.dir == OrderDir::Desc {
                    self.push("desc");
                }
            }
        }
        if let Some(n) = q.limit {
            self.push("limit");
            self.push(n.to_string());
        }
        if let Some((op, rhs)) = &q.set_op {
            self.push(op.keyword());
            self.query(rhs);
        }
    }

    fn from<C: RenderLeaf>(&mut self, from: &From<C>) {
        if from.tables.is_empty() {
            return;
        }
        self.push("from");
        let aliased = from.tables.len() > 1;
        // attach each condition to the first entry at which both sides are bound
        let attach = attach_positions(from);
        for (i, t) in from.tables.iter().enumerate() {
            if i > 0 {
                self.push("join");
            }
            self.push(quote_ident(&t.name));
            if aliased {
                self.push("as");
                self.push(format!("T{}", i + 1));
            }
            let mut first = true;
            for (ci, (a, b)) in from.conditions.iter().enumerate() {
                if attach[ci] != i {
                    continue;
                }
                self.push(if first { "on" } else { "and" });
                first = false;
                self.push(a.render_leaf(from));
                self.push("=");
                self.push(b.render_leaf(from));
            }
        }
    }

    fn literal<C: RenderLeaf>(&mut self, l: &Literal) {
        match &l.value {
            LiteralValue::Number(n) => self.push(n.clone()),
            LiteralValue::Text(t) => self.push(format!("'{}'", t.replace('\'', "''"))),
            LiteralValue::Placeholder => self.push(C::placeholder()),
        }
    }

    fn expr<C: RenderLeaf>(&mut self, e: &Expr<C>, from: &From<C>) {
        match e {
            Expr::Star => self.push("*"),
            Expr::Column(c) => self.push(c.render_leaf(from)),
            Expr::Literal(l) => self.literal::<C>(l),
            Expr::Agg {
                func,
                distinct,
                arg,
            } => {
                self.push(func.keyword());
                self.push("(");
                if *distinct {
                    self.push("distinct");
                }
                self.expr(arg, from);
                self.push(")");
            }
            Expr::Arith { op, left, right } => {
                self.arith_operand(left, from);
                self.push(op.symbol());
                self.arith_operand(right, from);
            }
            Expr::List(items) => {
                self.push("(");
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        self.push(",");
                    }
                    self.expr(item, from);
                }
                self.push(")");
            }
            Expr::Subquery(q) => {
                self.push("(");
                self.query(q);
                self.push(")");
            }
        }
    }

    fn arith_operand<C: RenderLeaf>(&mut self, e: &Expr<C>, from: &From<C>) {
        if matches!(e, Expr::Arith { .. }) {
            self.push("(");
            self.expr(e, from);
            self.push(")");
        } else {
            self.expr(e, from);
        }
    }

    fn cond<C: RenderLeaf>(&mut self, c: &Cond<C>, from: &From<C>) {
        match c {
            Cond::And(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        self.push("and");
                    }
                    if matches!(p, Cond::Or(_)) {
                        self.push("(");
                        self.cond(p, from);
                        self.push(")");
                    } else {
                        self.cond(p, from);
                    }
                }
            }
            Cond::Or(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        self.push("or");
                    }
                    self.cond(p, from);
                }
            }
            Cond::Cmp { left, op, right } => {
                self.expr(left, from);
                for word in op.text().split(' ') {
                    self.push(word);
                }
                self.expr(right, from);
            }
            Cond::Between { expr, low, high } => {
                self.expr(expr, from);
                self.push("between");
                self.expr(low, from);
                self.push("and");
                self.expr(high, from);
            }
        }
    }
}

/// Token sequence of the canonical form.
pub fn render_tokens<C: RenderLeaf>(q: &Query<C>) -> Vec<String> {
    let mut r = Renderer { out: Vec::new() };
    r.query(q);
    r.out
}

/// Canonical single-line rendering of a concrete query.
pub fn render(ast: &SqlAst) -> String {
    render_tokens(ast).join(" ")
}
