//! Parsing, canonical rendering, value stripping, and coarse templates for
//! the cross-database benchmark subset of SQL.
//!
//! The AST is generic over its column leaf. Concrete queries use
//! [`ColumnExpr`]; coarse templates use [`Slot`] and carry no FROM clause.
//! One parser and one renderer serve both.

mod lexer;
mod parser;
mod render;
mod template;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::schema::{ColumnRef, DatabaseEnv, LogicalType};

pub use lexer::{has_top_level_order_by, tokenize, TokKind, Token};
pub use render::{render, render_tokens, RenderLeaf};
pub use template::{from_coarse, to_coarse, to_coarse_with_bindings, Assignment, CoarseTemplate, ValueSlot};

/// A resolved reference to a column of a FROM entry.
///
/// `occurrence` distinguishes repeated entries of the same table
/// (self-joins): 0 for its first entry in FROM, 1 for the second, and so on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnExpr {
    pub column: ColumnRef,
    pub occurrence: u32,
}

impl ColumnExpr {
    pub fn new(column: ColumnRef) -> Self {
        ColumnExpr {
            column,
            occurrence: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Key,
    Text,
    Number,
    Time,
    Boolean,
    Other,
}

impl SlotKind {
    pub const ALL: [SlotKind; 6] = [
        SlotKind::Key,
        SlotKind::Text,
        SlotKind::Number,
        SlotKind::Time,
        SlotKind::Boolean,
        SlotKind::Other,
    ];

    /// Key columns take key slots; everything else is typed by its logical type.
    pub fn of(column: &ColumnRef) -> Self {
        if column.is_key {
            return SlotKind::Key;
        }
        match column.logical_type {
            LogicalType::Text => SlotKind::Text,
            LogicalType::Number => SlotKind::Number,
            LogicalType::Time => SlotKind::Time,
            LogicalType::Boolean => SlotKind::Boolean,
            LogicalType::Other => SlotKind::Other,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            SlotKind::Key => "key",
            SlotKind::Text => "text",
            SlotKind::Number => "number",
            SlotKind::Time => "time",
            SlotKind::Boolean => "boolean",
            SlotKind::Other => "other",
        }
    }
}

/// A typed column slot such as `text2`. Indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub kind: SlotKind,
    pub index: u32,
}

impl Slot {
    pub fn parse(s: &str) -> Option<Slot> {
        let lower = s.to_ascii_lowercase();
        SlotKind::ALL.iter().find_map(|&kind| {
            let digits = lower.strip_prefix(kind.prefix())?;
            if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            Some(Slot {
                kind,
                index: digits.parse().ok()?,
            })
        })
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LiteralValue {
    /// Numeric text exactly as written, sign included.
    Number(String),
    Text(String),
    Placeholder,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Literal {
    pub value: LiteralValue,
    /// Logical type of the expression this literal is compared against.
    pub ty: Option<LogicalType>,
}

impl Literal {
    pub fn number(text: impl Into<String>) -> Self {
        Literal {
            value: LiteralValue::Number(text.into()),
            ty: None,
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        Literal {
            value: LiteralValue::Text(text.into()),
            ty: None,
        }
    }

    pub fn placeholder() -> Self {
        Literal {
            value: LiteralValue::Placeholder,
            ty: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggFunc {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFunc {
    pub fn keyword(self) -> &'static str {
        match self {
            AggFunc::Count => "count",
            AggFunc::Sum => "sum",
            AggFunc::Avg => "avg",
            AggFunc::Min => "min",
            AggFunc::Max => "max",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "count" => AggFunc::Count,
            "sum" => AggFunc::Sum,
            "avg" => AggFunc::Avg,
            "min" => AggFunc::Min,
            "max" => AggFunc::Max,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Like,
    NotLike,
    In,
    NotIn,
}

impl CmpOp {
    pub fn text(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Like => "like",
            CmpOp::NotLike => "not like",
            CmpOp::In => "in",
            CmpOp::NotIn => "not in",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr<C> {
    Star,
    Column(C),
    Literal(Literal),
    Agg {
        func: AggFunc,
        distinct: bool,
        arg: Box<Expr<C>>,
    },
    Arith {
        op: ArithOp,
        left: Box<Expr<C>>,
        right: Box<Expr<C>>,
    },
    /// Parenthesized value list, only valid as the right side of IN.
    List(Vec<Expr<C>>),
    Subquery(Box<Query<C>>),
}

impl<C> Expr<C> {
    /// The column whose values a literal compared to this expression should
    /// come from. COUNT yields no column: counts are not column values.
    pub fn value_source(&self) -> Option<&C> {
        match self {
            Expr::Column(c) => Some(c),
            Expr::Agg { func, arg, .. } if *func != AggFunc::Count => match arg.as_ref() {
                Expr::Column(c) => Some(c),
                _ => None,
            },
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Cond<C> {
    /// At least two operands, none of them itself an `And`.
    And(Vec<Cond<C>>),
    /// At least two operands, none of them itself an `Or`.
    Or(Vec<Cond<C>>),
    Cmp {
        left: Expr<C>,
        op: CmpOp,
        right: Expr<C>,
    },
    Between {
        expr: Expr<C>,
        low: Expr<C>,
        high: Expr<C>,
    },
}

impl<C> Cond<C> {
    pub fn and(parts: Vec<Cond<C>>) -> Cond<C> {
        Self::flatten(parts, true)
    }

    pub fn or(parts: Vec<Cond<C>>) -> Cond<C> {
        Self::flatten(parts, false)
    }

    fn flatten(parts: Vec<Cond<C>>, conj: bool) -> Cond<C> {
        let mut flat = Vec::with_capacity(parts.len());
        for p in parts {
            match (p, conj) {
                (Cond::And(inner), true) | (Cond::Or(inner), false) => flat.extend(inner),
                (p, _) => flat.push(p),
            }
        }
        if flat.len() == 1 {
            return flat.pop().expect("one element");
        }
        if conj {
            Cond::And(flat)
        } else {
            Cond::Or(flat)
        }
    }

    /// Number of comparison leaves.
    pub fn leaf_count(&self) -> usize {
        match self {
            Cond::And(v) | Cond::Or(v) => v.iter().map(Cond::leaf_count).sum(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderDir {
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderItem<C> {
    pub expr: Expr<C>,
    pub dir: OrderDir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetOp {
    Union,
    Intersect,
    Except,
}

impl SetOp {
    pub fn keyword(self) -> &'static str {
        match self {
            SetOp::Union => "union",
            SetOp::Intersect => "intersect",
            SetOp::Except => "except",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TableRef {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct From<C> {
    pub tables: Vec<TableRef>,
    /// Column equalities from ON clauses, in rendering order.
    pub conditions: Vec<(C, C)>,
}

impl<C> Default for From<C> {
    fn default() -> Self {
        From {
            tables: Vec::new(),
            conditions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query<C> {
    pub distinct: bool,
    pub select: Vec<Expr<C>>,
    pub from: From<C>,
    pub where_: Option<Cond<C>>,
    pub group_by: Vec<Expr<C>>,
    pub having: Option<Cond<C>>,
    pub order_by: Vec<OrderItem<C>>,
    pub limit: Option<u64>,
    pub set_op: Option<(SetOp, Box<Query<C>>)>,
}

impl<C> Query<C> {
    pub fn has_nested_subquery(&self) -> bool {
        fn in_expr<C>(e: &Expr<C>) -> bool {
            match e {
                Expr::Subquery(_) => true,
                Expr::Agg { arg, .. } => in_expr(arg),
                Expr::Arith { left, right, .. } => in_expr(left) || in_expr(right),
                Expr::List(items) => items.iter().any(in_expr),
                _ => false,
            }
        }
        fn in_cond<C>(c: &Cond<C>) -> bool {
            match c {
                Cond::And(v) | Cond::Or(v) => v.iter().any(in_cond),
                Cond::Cmp { left, right, .. } => in_expr(left) || in_expr(right),
                Cond::Between { expr, low, high } => in_expr(expr) || in_expr(low) || in_expr(high),
            }
        }
        self.select.iter().any(in_expr)
            || self.where_.as_ref().is_some_and(in_cond)
            || self.having.as_ref().is_some_and(in_cond)
    }
}

/// A concrete, alias-free query over one database.
pub type SqlAst = Query<ColumnExpr>;

/// Parse a query in the supported subset, resolving every name against `env`.
pub fn parse_sql(sql: &str, env: &DatabaseEnv) -> Result<SqlAst> {
    parser::parse_concrete(sql, env)
}

/// Replace every literal with an untyped placeholder.
pub fn strip_values(ast: &SqlAst) -> SqlAst {
    let mut out = ast.clone();
    visit_literals_mut(&mut out, &mut |lit| *lit = Literal::placeholder());
    out
}

/// The string exact-match compares: values stripped, canonically rendered.
pub fn em_key(sql: &str, env: &DatabaseEnv) -> Result<String> {
    Ok(render(&strip_values(&parse_sql(sql, env)?)))
}

pub(crate) fn visit_literals_mut<C>(q: &mut Query<C>, f: &mut impl FnMut(&mut Literal)) {
    fn expr<C>(e: &mut Expr<C>, f: &mut impl FnMut(&mut Literal)) {
        match e {
            Expr::Literal(l) => f(l),
            Expr::Agg { arg, .. } => expr(arg, f),
            Expr::Arith { left, right, .. } => {
                expr(left, f);
                expr(right, f);
            }
            Expr::List(items) => items.iter_mut().for_each(|i| expr(i, f)),
            Expr::Subquery(q) => visit_literals_mut(q, f),
            Expr::Star | Expr::Column(_) => {}
        }
    }
    fn cond<C>(c: &mut Cond<C>, f: &mut impl FnMut(&mut Literal)) {
        match c {
            Cond::And(v) | Cond::Or(v) => v.iter_mut().for_each(|c| cond(c, f)),
            Cond::Cmp { left, right, .. } => {
                expr(left, f);
                expr(right, f);
            }
            Cond::Between { expr: e, low, high } => {
                expr(e, f);
                expr(low, f);
                expr(high, f);
            }
        }
    }
    q.select.iter_mut().for_each(|e| expr(e, f));
    if let Some(c) = q.where_.as_mut() {
        cond(c, f);
    }
    q.group_by.iter_mut().for_each(|e| expr(e, f));
    if let Some(c) = q.having.as_mut() {
        cond(c, f);
    }
    q.order_by.iter_mut().for_each(|o| expr(&mut o.expr, f));
    if let Some((_, rhs)) = q.set_op.as_mut() {
        visit_literals_mut(rhs, f);
    }
}

/// Collect every literal in rendering order.
pub fn literals<C: Clone>(q: &Query<C>) -> Vec<Literal> {
    let mut out = Vec::new();
    let mut copy = q.clone();
    visit_literals_mut(&mut copy, &mut |l| out.push(l.clone()));
    out
}

/// Logical type an expression evaluates to, where it can be told.
pub(crate) fn expr_type(e: &Expr<ColumnExpr>) -> Option<LogicalType> {
    match e {
        Expr::Column(c) => Some(c.column.logical_type),
        Expr::Agg { func, arg, .. } => match func {
            AggFunc::Count | AggFunc::Sum | AggFunc::Avg => Some(LogicalType::Number),
            AggFunc::Min | AggFunc::Max => expr_type(arg),
        },
        Expr::Arith { .. } => Some(LogicalType::Number),
        _ => None,
    }
}

/// Give each literal the type of the expression it is compared against.
pub(crate) fn assign_literal_types(q: &mut SqlAst) {
    fn set(e: &mut Expr<ColumnExpr>, ty: Option<LogicalType>) {
        match e {
            Expr::Literal(l) => l.ty = ty,
            Expr::List(items) => items.iter_mut().for_each(|i| set(i, ty)),
            _ => {}
        }
    }
    fn in_expr(e: &mut Expr<ColumnExpr>) {
        match e {
            Expr::Subquery(q) => assign_literal_types(q),
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
                let (lt, rt) = (expr_type(left), expr_type(right));
                set(left, rt);
                set(right, lt);
                in_expr(left);
                in_expr(right);
            }
            Cond::Between { expr, low, high } => {
                let t = expr_type(expr);
                set(low, t);
                set(high, t);
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
        assign_literal_types(rhs);
    }
}
