use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use super::parser::parse_template;
use super::render::{normalize_conditions, render_tokens};
use super::{
    assign_literal_types, visit_literals_mut, CmpOp, ColumnExpr, Cond, Expr, From, Literal,
    LiteralValue, OrderItem, Query, Slot, SlotKind, SqlAst, TableRef,
};
use crate::error::{Error, Result};
use crate::schema::{fk_join_path, ColumnRef, DatabaseEnv};

/// A query skeleton with typed column slots, value slots, and no joins.
///
/// Identity is the canonical token text; `join_arity` is the largest number
/// of distinct tables any query level of the source query read from.
#[derive(Debug, Clone)]
pub struct CoarseTemplate {
    body: Query<Slot>,
    text: String,
    join_arity: usize,
    slots: Vec<Slot>,
    values: Vec<ValueSlot>,
    levels: Vec<Vec<Slot>>,
}

impl PartialEq for CoarseTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for CoarseTemplate {}

impl Hash for CoarseTemplate {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.text.hash(state);
    }
}

impl PartialOrd for CoarseTemplate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CoarseTemplate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.text.cmp(&other.text)
    }
}

impl std::fmt::Display for CoarseTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

/// A value slot and the column slot its literal is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueSlot {
    pub bound: Option<Slot>,
    pub op: Option<CmpOp>,
}

impl CoarseTemplate {
    fn from_body(body: Query<Slot>, join_arity: usize) -> Self {
        let text = render_tokens(&body).join(" ");
        let levels = query_levels(&body);
        let mut slots: Vec<Slot> = levels.iter().flatten().copied().collect();
        slots.sort_by_key(|s| (s.kind, s.index));
        slots.dedup();
        let values = value_bindings(&body);
        CoarseTemplate {
            body,
            text,
            join_arity: join_arity.max(1),
            slots,
            values,
            levels,
        }
    }

    /// Read a template back from its token text.
    pub fn parse(text: &str, join_arity: usize) -> Result<Self> {
        let body = parse_template(text)?;
        Ok(Self::from_body(body, join_arity))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.text.split(' ').collect()
    }

    pub fn body(&self) -> &Query<Slot> {
        &self.body
    }

    pub fn join_arity(&self) -> usize {
        self.join_arity
    }

    /// Distinct column slots, ordered by kind then index.
    pub fn column_slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot_counts(&self) -> BTreeMap<SlotKind, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.slots {
            *counts.entry(s.kind).or_insert(0) += 1;
        }
        counts
    }

    /// Value slots in rendering order.
    pub fn value_slots(&self) -> &[ValueSlot] {
        &self.values
    }

    /// Direct column slots of each query level, in level order. A level is
    /// the outer query, each nested subquery, and each set-operation branch.
    pub fn levels(&self) -> &[Vec<Slot>] {
        &self.levels
    }
}

/// Slot assignment that turns a template back into a concrete query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    pub columns: BTreeMap<Slot, ColumnRef>,
    /// Table for query levels that reference no column, e.g. `select count ( * )`.
    pub level_tables: BTreeMap<usize, usize>,
}

pub(crate) fn query_levels<C: Clone + Eq>(q: &Query<C>) -> Vec<Vec<C>> {
    let mut levels = Vec::new();
    let mut counter = 0;
    map_query(
        q,
        &mut |c: &C, _| Ok(c.clone()),
        &mut |level: &Query<C>, idx| {
            if levels.len() <= idx {
                levels.resize(idx + 1, Vec::new());
            }
            levels[idx] = direct_leaves(level);
            Ok(From::default())
        },
        &mut counter,
    )
    .expect("infallible callbacks");
    levels
}

/// Column leaves of one query level, not descending into subqueries or
/// set-operation branches. Duplicates removed, first appearance kept.
fn direct_leaves<C: Clone + Eq>(q: &Query<C>) -> Vec<C> {
    fn expr<C: Clone + Eq>(e: &Expr<C>, out: &mut Vec<C>) {
        match e {
            Expr::Column(c) => {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
            Expr::Agg { arg, .. } => expr(arg, out),
            Expr::Arith { left, right, .. } => {
                expr(left, out);
                expr(right, out);
            }
            Expr::List(items) => items.iter().for_each(|i| expr(i, out)),
            Expr::Star | Expr::Literal(_) | Expr::Subquery(_) => {}
        }
    }
    fn cond<C: Clone + Eq>(c: &Cond<C>, out: &mut Vec<C>) {
        match c {
            Cond::And(v) | Cond::Or(v) => v.iter().for_each(|c| cond(c, out)),
            Cond::Cmp { left, right, .. } => {
                expr(left, out);
                expr(right, out);
            }
            Cond::Between { expr: e, low, high } => {
                expr(e, out);
                expr(low, out);
                expr(high, out);
            }
        }
    }
    let mut out = Vec::new();
    q.select.iter().for_each(|e| expr(e, &mut out));
    if let Some(c) = &q.where_ {
        cond(c, &mut out);
    }
    q.group_by.iter().for_each(|e| expr(e, &mut out));
    if let Some(c) = &q.having {
        cond(c, &mut out);
    }
    q.order_by.iter().for_each(|o| expr(&o.expr, &mut out));
    out
}

/// Clause role of a column mention. Identical columns share a slot only
/// within one role, so a filtered column is a separate slot from the same
/// column in the select list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Role {
    Projection,
    Filter,
}

/// Structural map over a query. `from` is invoked on entering each level,
/// with levels numbered in pre-order; leaves are mapped in rendering order.
fn map_query<C, D>(
    q: &Query<C>,
    leaf: &mut impl FnMut(&C, Role) -> Result<D>,
    from: &mut impl FnMut(&Query<C>, usize) -> Result<From<D>>,
    counter: &mut usize,
) -> Result<Query<D>> {
    let idx = *counter;
    *counter += 1;
    let new_from = from(q, idx)?;
    let select = q
        .select
        .iter()
        .map(|e| map_expr(e, Role::Projection, leaf, from, counter))
        .collect::<Result<_>>()?;
    let where_ = q
        .where_
        .as_ref()
        .map(|c| map_cond(c, Role::Filter, leaf, from, counter))
        .transpose()?;
    let group_by = q
        .group_by
        .iter()
        .map(|e| map_expr(e, Role::Projection, leaf, from, counter))
        .collect::<Result<_>>()?;
    let having = q
        .having
        .as_ref()
        .map(|c| map_cond(c, Role::Filter, leaf, from, counter))
        .transpose()?;
    let order_by = q
        .order_by
        .iter()
        .map(|o| {
            Ok(OrderItem {
                expr: map_expr(&o.expr, Role::Projection, leaf, from, counter)?,
                dir: o.dir,
            })
        })
        .collect::<Result<_>>()?;
    let set_op = match &q.set_op {
        Some((op, rhs)) => Some((*op, Box::new(map_query(rhs, leaf, from, counter)?))),
        None => None,
    };
    Ok(Query {
        distinct: q.distinct,
        select,
        from: new_from,
        where_,
        group_by,
        having,
        order_by,
        limit: q.limit,
        set_op,
    })
}

fn map_expr<C, D>(
    e: &Expr<C>,
    role: Role,
    leaf: &mut impl FnMut(&C, Role) -> Result<D>,
    from: &mut impl FnMut(&Query<C>, usize) -> Result<From<D>>,
    counter: &mut usize,
) -> Result<Expr<D>> {
    Ok(match e {
        Expr::Star => Expr::Star,
        Expr::Column(c) => Expr::Column(leaf(c, role)?),
        Expr::Literal(l) => Expr::Literal(l.clone()),
        Expr::Agg {
            func,
            distinct,
            arg,
        } => Expr::Agg {
            func: *func,
            distinct: *distinct,
            arg: Box::new(map_expr(arg, role, leaf, from, counter)?),
        },
        Expr::Arith { op, left, right } => Expr::Arith {
            op: *op,
            left: Box::new(map_expr(left, role, leaf, from, counter)?),
            right: Box::new(map_expr(right, role, leaf, from, counter)?),
        },
        Expr::List(items) => Expr::List(
            items
                .iter()
                .map(|i| map_expr(i, role, leaf, from, counter))
                .collect::<Result<_>>()?,
        ),
        Expr::Subquery(q) => Expr::Subquery(Box::new(map_query(q, leaf, from, counter)?)),
    })
}

fn map_cond<C, D>(
    c: &Cond<C>,
    role: Role,
    leaf: &mut impl FnMut(&C, Role) -> Result<D>,
    from: &mut impl FnMut(&Query<C>, usize) -> Result<From<D>>,
    counter: &mut usize,
) -> Result<Cond<D>> {
    Ok(match c {
        Cond::And(v) => Cond::And(
            v.iter()
                .map(|c| map_cond(c, role, leaf, from, counter))
                .collect::<Result<_>>()?,
        ),
        Cond::Or(v) => Cond::Or(
            v.iter()
                .map(|c| map_cond(c, role, leaf, from, counter))
                .collect::<Result<_>>()?,
        ),
        Cond::Cmp { left, op, right } => Cond::Cmp {
            left: map_expr(left, role, leaf, from, counter)?,
            op: *op,
            right: map_expr(right, role, leaf, from, counter)?,
        },
        Cond::Between { expr, low, high } => Cond::Between {
            expr: map_expr(expr, role, leaf, from, counter)?,
            low: map_expr(low, role, leaf, from, counter)?,
            high: map_expr(high, role, leaf, from, counter)?,
        },
    })
}

/// Binding of every literal, in the order [`visit_literals_mut`] visits them.
fn value_bindings(q: &Query<Slot>) -> Vec<ValueSlot> {
    fn lits(e: &Expr<Slot>, ctx: ValueSlot, out: &mut Vec<ValueSlot>) {
        match e {
            Expr::Literal(_) => out.push(ctx),
            Expr::Agg { arg, .. } => lits(arg, ValueSlot { bound: None, op: None }, out),
            Expr::Arith { left, right, .. } => {
                let none = ValueSlot { bound: None, op: None };
                lits(left, none, out);
                lits(right, none, out);
            }
            Expr::List(items) => items.iter().for_each(|i| lits(i, ctx, out)),
            Expr::Subquery(q) => out.extend(value_bindings(q)),
            Expr::Star | Expr::Column(_) => {}
        }
    }
    fn cond(c: &Cond<Slot>, out: &mut Vec<ValueSlot>) {
        match c {
            Cond::And(v) | Cond::Or(v) => v.iter().for_each(|c| cond(c, out)),
            Cond::Cmp { left, op, right } => {
                let l = ValueSlot {
                    bound: right.value_source().copied(),
                    op: Some(*op),
                };
                let r = ValueSlot {
                    bound: left.value_source().copied(),
                    op: Some(*op),
                };
                lits(left, l, out);
                lits(right, r, out);
            }
            Cond::Between { expr, low, high } => {
                let ctx = ValueSlot {
                    bound: expr.value_source().copied(),
                    op: None,
                };
                lits(expr, ValueSlot { bound: None, op: None }, out);
                lits(low, ctx, out);
                lits(high, ctx, out);
            }
        }
    }
    let none = ValueSlot { bound: None, op: None };
    let mut out = Vec::new();
    q.select.iter().for_each(|e| lits(e, none, &mut out));
    if let Some(c) = &q.where_ {
        cond(c, &mut out);
    }
    q.group_by.iter().for_each(|e| lits(e, none, &mut out));
    if let Some(c) = &q.having {
        cond(c, &mut out);
    }
    q.order_by.iter().for_each(|o| lits(&o.expr, none, &mut out));
    if let Some((_, rhs)) = &q.set_op {
        out.extend(value_bindings(rhs));
    }
    out
}

fn same_entry(a: &ColumnExpr, b: &ColumnExpr) -> bool {
    a.column.table_index == b.column.table_index && a.occurrence == b.occurrence
}

fn is_join_equality(c: &Cond<ColumnExpr>) -> bool {
    matches!(
        c,
        Cond::Cmp { left: Expr::Column(a), op: CmpOp::Eq, right: Expr::Column(b) } if !same_entry(a, b)
    )
}

/// Remove joins: ON conditions, and top-level WHERE conjuncts equating
/// columns of two different FROM entries. Applied at every level.
fn drop_joins(q: &mut SqlAst) {
    q.from.conditions.clear();
    q.where_ = match q.where_.take() {
        Some(c) if is_join_equality(&c) => None,
        Some(Cond::And(parts)) => {
            let kept: Vec<_> = parts.into_iter().filter(|p| !is_join_equality(p)).collect();
            match kept.len() {
                0 => None,
                _ => Some(Cond::and(kept)),
            }
        }
        other => other,
    };
    fn in_expr(e: &mut Expr<ColumnExpr>) {
        match e {
            Expr::Subquery(q) => drop_joins(q),
            Expr::Agg { arg, .. } => in_expr(arg),
            Expr::Arith { left, right, .. } => {
                in_expr(left);
                in_expr(right);
            }
            Expr::List(items) => items.iter_mut().for_each(in_expr),
            _ => {}
        }
    }
    fn in_cond(c: &mut Cond<ColumnExpr>) {
        match c {
            Cond::And(v) | Cond::Or(v) => v.iter_mut().for_each(in_cond),
            Cond::Cmp { left, right, .. } => {
                in_expr(left);
                in_expr(right);
            }
            Cond::Between { expr, low, high } => {
                in_expr(expr);
                in_expr(low);
                in_expr(high);
            }
        }
    }
    q.select.iter_mut().for_each(in_expr);
    if let Some(c) = q.where_.as_mut() {
        in_cond(c);
    }
    if let Some(c) = q.having.as_mut() {
        in_cond(c);
    }
    if let Some((_, rhs)) = q.set_op.as_mut() {
        drop_joins(rhs);
    }
}

/// Coarse template of a query together with the bindings that reproduce it.
pub fn to_coarse_with_bindings(ast: &SqlAst) -> (CoarseTemplate, Assignment, Vec<Literal>) {
    let mut q = ast.clone();
    drop_joins(&mut q);

    let mut slots: HashMap<(ColumnRef, Role), Slot> = HashMap::new();
    let mut next: BTreeMap<SlotKind, u32> = BTreeMap::new();
    let mut assignment = Assignment::default();
    let mut join_arity = 1;
    let mut counter = 0;
    let mut body = map_query(
        &q,
        &mut |c: &ColumnExpr, role| {
            let slot = *slots.entry((c.column.clone(), role)).or_insert_with(|| {
                let kind = SlotKind::of(&c.column);
                let n = next.entry(kind).or_insert(0);
                *n += 1;
                Slot { kind, index: *n }
            });
            assignment.columns.insert(slot, c.column.clone());
            Ok(slot)
        },
        &mut |level: &SqlAst, idx| {
            let distinct: BTreeSet<usize> = level.from.tables.iter().map(|t| t.index).collect();
            join_arity = join_arity.max(distinct.len());
            if direct_leaves(level).is_empty() {
                if let Some(t) = level.from.tables.first() {
                    assignment.level_tables.insert(idx, t.index);
                }
            }
            Ok(From::default())
        },
        &mut counter,
    )
    .expect("infallible callbacks");

    let mut values = Vec::new();
    visit_literals_mut(&mut body, &mut |l| {
        values.push(l.clone());
        *l = Literal::placeholder();
    });
    (CoarseTemplate::from_body(body, join_arity), assignment, values)
}

/// Replace columns with typed slots, literals with value slots, and drop
/// FROM and every join condition.
pub fn to_coarse(ast: &SqlAst, _env: &DatabaseEnv) -> CoarseTemplate {
    to_coarse_with_bindings(ast).0
}

/// Rebuild a concrete query from a template, a column assignment, and one
/// literal per value slot. FROM and join conditions are derived per query
/// level from the foreign-key graph.
pub fn from_coarse(
    tpl: &CoarseTemplate,
    assignment: &Assignment,
    values: &[Literal],
    env: &DatabaseEnv,
) -> Result<SqlAst> {
    let slots = tpl.column_slots();
    let mut used = BTreeSet::new();
    for s in slots {
        let col = assignment
            .columns
            .get(s)
            .ok_or_else(|| Error::Assignment(format!("slot {s} is unassigned")))?;
        if SlotKind::of(col) != s.kind {
            return Err(Error::Assignment(format!(
                "slot {s} cannot take column {} of kind {}",
                col.name,
                SlotKind::of(col).prefix()
            )));
        }
        if !used.insert(col.position()) {
            return Err(Error::Assignment(format!(
                "column {} is assigned to more than one slot",
                col.name
            )));
        }
    }
    let n_values = tpl.value_slots().len();
    if values.len() != n_values {
        return Err(Error::Assignment(format!(
            "template has {n_values} value slots but {} values were given",
            values.len()
        )));
    }

    let mut counter = 0;
    let mut q = map_query(
        tpl.body(),
        &mut |s: &Slot, _| Ok(ColumnExpr::new(assignment.columns[s].clone())),
        &mut |level: &Query<Slot>, idx| build_from(level, idx, assignment, env),
        &mut counter,
    )?;
    let mut it = values.iter();
    visit_literals_mut(&mut q, &mut |l| {
        if l.value == LiteralValue::Placeholder {
            *l = it.next().expect("value count checked").clone();
        }
    });
    assign_literal_types(&mut q);
    Ok(q)
}

fn build_from(
    level: &Query<Slot>,
    idx: usize,
    assignment: &Assignment,
    env: &DatabaseEnv,
) -> Result<From<ColumnExpr>> {
    let mut order: Vec<usize> = Vec::new();
    for s in direct_leaves(level) {
        let t = assignment.columns[&s].table_index;
        if !order.contains(&t) {
            order.push(t);
        }
    }
    if order.is_empty() {
        let t = *assignment.level_tables.get(&idx).ok_or_else(|| {
            Error::Assignment(format!("query level {idx} references no column and has no table"))
        })?;
        if t >= env.tables.len() {
            return Err(Error::Assignment(format!("table ordinal {t} out of range")));
        }
        order.push(t);
    }
    let requested: BTreeSet<usize> = order.iter().copied().collect();
    let joins = fk_join_path(env, &requested)?;
    for j in &joins {
        for t in [j.left.table_index, j.right.table_index] {
            if !order.contains(&t) {
                order.push(t);
            }
        }
    }
    let mut from = From {
        tables: order
            .iter()
            .map(|&t| TableRef {
                index: t,
                name: env.tables[t].name.clone(),
            })
            .collect(),
        conditions: joins
            .into_iter()
            .map(|j| (ColumnExpr::new(j.left), ColumnExpr::new(j.right)))
            .collect(),
    };
    normalize_conditions(&mut from);
    Ok(from)
}
