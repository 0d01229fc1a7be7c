//! Validator and executor for the SQL subset the text-to-SQL step may emit.
//!
//! Grammar:
//!
//! ```text
//! SELECT (* | col [AS alias], ...) FROM table [alias]
//!   [WHERE pred]  [ORDER BY col [ASC|DESC], ...]  [LIMIT n] [;]
//! pred := pred OR pred | pred AND pred | ( pred )
//!       | col (= | <> | != | < | > | <= | >=) literal   (either side)
//!       | col [NOT] IN (literal, ...) | col [NOT] LIKE 'pattern'
//!       | col [NOT] BETWEEN literal AND literal | col IS [NOT] NULL
//! ```
//!
//! Anything computing values (functions, arithmetic, aggregates, grouping,
//! joins, subqueries) is rejected as a forbidden clause. A missing `LIMIT`
//! is treated as `LIMIT 10`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    parse_number, Cell, Dataset, SubTable, MAX_SUBTABLE_FIELDS, MAX_SUBTABLE_ROWS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QueryErrorCode {
    NotSelect,
    UnknownColumn,
    UnknownTable,
    LimitExceeded,
    Syntax,
    ForbiddenClause,
    TypeMismatch,
}

impl fmt::Display for QueryErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryErrorCode::NotSelect => "NOT_SELECT",
            QueryErrorCode::UnknownColumn => "UNKNOWN_COLUMN",
            QueryErrorCode::UnknownTable => "UNKNOWN_TABLE",
            QueryErrorCode::LimitExceeded => "LIMIT_EXCEEDED",
            QueryErrorCode::Syntax => "SYNTAX",
            QueryErrorCode::ForbiddenClause => "FORBIDDEN_CLAUSE",
            QueryErrorCode::TypeMismatch => "TYPE_MISMATCH",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryIssue {
    pub code: QueryErrorCode,
    pub message: String,
    /// Character offset into the query text.
    pub location: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryValidationReport {
    pub ok: bool,
    pub errors: Vec<QueryIssue>,
}

impl QueryValidationReport {
    fn from_errors(errors: Vec<QueryIssue>) -> Self {
        Self { ok: errors.is_empty(), errors }
    }

    pub fn has(&self, code: QueryErrorCode) -> bool {
        self.errors.iter().any(|e| e.code == code)
    }

    /// One line per issue, used when asking the model to repair a query.
    pub fn summary(&self) -> String {
        self.errors
            .iter()
            .map(|e| format!("{} at offset {}: {}", e.code, e.location, e.message))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QueryError {
    #[error("query rejected: {}", .0.summary())]
    Invalid(QueryValidationReport),
    #[error("execution failure: {0}")]
    ExecutionFailure(String),
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Str(String),
    Num(f64),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn issue(code: QueryErrorCode, message: impl Into<String>, location: usize) -> QueryIssue {
    QueryIssue { code, message: message.into(), location }
}

fn lex(sql: &str) -> Result<Vec<Token>, QueryIssue> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Word(chars[start..i].iter().collect()), pos: start });
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && matches!(chars[i], 'e' | 'E') {
                let mut j = i + 1;
                if j < chars.len() && matches!(chars[j], '+' | '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let n = parse_number(&text)
                .ok_or_else(|| issue(QueryErrorCode::Syntax, format!("bad number {text:?}"), start))?;
            out.push(Token { tok: Tok::Num(n), pos: start });
            continue;
        }
        match c {
            '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(issue(QueryErrorCode::Syntax, "unterminated string", start)),
                        Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                            s.push('\'');
                            i += 2;
                        }
                        Some('\'') => {
                            i += 1;
                            break;
                        }
                        Some(ch) => {
                            s.push(*ch);
                            i += 1;
                        }
                    }
                }
                out.push(Token { tok: Tok::Str(s), pos: start });
            }
            '"' | '`' | '[' => {
                let close = if c == '[' { ']' } else { c };
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(issue(QueryErrorCode::Syntax, "unterminated identifier", start)),
                        Some(ch) if *ch == close => {
                            i += 1;
                            break;
                        }
                        Some(ch) => {
                            s.push(*ch);
                            i += 1;
                        }
                    }
                }
                out.push(Token { tok: Tok::Quoted(s), pos: start });
            }
            _ => {
                let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
                let sym = match two.as_str() {
                    "<>" => Some("<>"),
                    "!=" => Some("!="),
                    "<=" => Some("<="),
                    ">=" => Some(">="),
                    "||" => Some("||"),
                    _ => None,
                };
                if let Some(s) = sym {
                    out.push(Token { tok: Tok::Sym(s), pos: start });
                    i += 2;
                    continue;
                }
                let sym = match c {
                    '=' => "=",
                    '<' => "<",
                    '>' => ">",
                    '(' => "(",
                    ')' => ")",
                    ',' => ",",
                    '*' => "*",
                    ';' => ";",
                    '+' => "+",
                    '-' => "-",
                    '/' => "/",
                    '%' => "%",
                    '.' => ".",
                    _ => {
                        return Err(issue(QueryErrorCode::Syntax, format!("unexpected character {c:?}"), start))
                    }
                };
                out.push(Token { tok: Tok::Sym(sym), pos: start });
                i += 1;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// AST

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ColRef {
    pub name: String,
    pub pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Lit {
    Num(f64),
    Str(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl CmpOp {
    fn flip(self) -> Self {
        match self {
            CmpOp::Lt => CmpOp::Gt,
            CmpOp::Gt => CmpOp::Lt,
            CmpOp::Le => CmpOp::Ge,
            CmpOp::Ge => CmpOp::Le,
            other => other,
        }
    }

    fn test(self, o: Ordering) -> bool {
        match self {
            CmpOp::Eq => o == Ordering::Equal,
            CmpOp::Ne => o != Ordering::Equal,
            CmpOp::Lt => o == Ordering::Less,
            CmpOp::Gt => o == Ordering::Greater,
            CmpOp::Le => o != Ordering::Greater,
            CmpOp::Ge => o != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Expr {
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Cmp { col: ColRef, op: CmpOp, lit: Lit },
    In { col: ColRef, list: Vec<Lit>, negated: bool },
    Like { col: ColRef, pattern: String, negated: bool },
    IsNull { col: ColRef, negated: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Projection {
    All(usize),
    Columns(Vec<ColRef>),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SelectQuery {
    pub projection: Projection,
    pub table: String,
    pub table_pos: usize,
    pub filter: Option<Expr>,
    pub order: Vec<(ColRef, bool)>,
    pub limit: Option<(u64, usize)>,
}

// ---------------------------------------------------------------------------
// Parser

const FORBIDDEN_WORDS: &[&str] = &[
    "GROUP", "HAVING", "JOIN", "INNER", "LEFT", "RIGHT", "OUTER", "CROSS", "UNION", "INTERSECT",
    "EXCEPT", "OFFSET", "DISTINCT", "WINDOW", "OVER", "INTO", "CASE",
];

const KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "WHERE", "ORDER", "BY", "LIMIT", "AND", "OR", "NOT", "IN", "LIKE", "IS",
    "NULL", "BETWEEN", "AS", "ASC", "DESC",
];

struct Parser<'a> {
    toks: &'a [Token],
    i: usize,
    end: usize,
}

type PResult<T> = Result<T, QueryIssue>;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.toks.get(self.i)
    }

    fn peek_at(&self, k: usize) -> Option<&'a Token> {
        self.toks.get(self.i + k)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Word(w), .. }) if w.eq_ignore_ascii_case(kw))
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Sym(x), .. }) if *x == s)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected {kw}")))
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected '{s}'")))
        }
    }

    fn unexpected(&self, what: &str) -> QueryIssue {
        if let Some(Token { tok: Tok::Word(w), pos }) = self.peek() {
            if FORBIDDEN_WORDS.iter().any(|f| w.eq_ignore_ascii_case(f)) {
                return issue(
                    QueryErrorCode::ForbiddenClause,
                    format!("{} is not allowed", w.to_ascii_uppercase()),
                    *pos,
                );
            }
            if w.eq_ignore_ascii_case("SELECT") {
                return issue(QueryErrorCode::ForbiddenClause, "subqueries are not allowed", *pos);
            }
        }
        match self.peek() {
            Some(t) => issue(QueryErrorCode::Syntax, format!("{what}, found {:?}", t.tok), t.pos),
            None => issue(QueryErrorCode::Syntax, format!("{what}, found end of query"), self.end),
        }
    }

    /// Skips an optional `[AS] alias`.
    fn skip_alias(&mut self) -> PResult<()> {
        if self.eat_kw("AS") || self.is_ident_start() {
            self.ident()?;
        }
        Ok(())
    }

    fn forbid_computation(&self) -> PResult<()> {
        if let Some(t) = self.peek() {
            match &t.tok {
                Tok::Sym("(") => {
                    return Err(issue(
                        QueryErrorCode::ForbiddenClause,
                        "function calls and aggregates are not allowed; select existing columns only",
                        t.pos,
                    ))
                }
                Tok::Sym(s) if matches!(*s, "+" | "-" | "*" | "/" | "%" | "||") => {
                    return Err(issue(
                        QueryErrorCode::ForbiddenClause,
                        "calculations are not allowed; select existing columns only",
                        t.pos,
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Identifier, optionally qualified (`t.col` keeps `col`).
    fn ident(&mut self) -> PResult<ColRef> {
        let mut col = match self.peek() {
            Some(Token { tok: Tok::Word(w), pos })
                if !KEYWORDS.iter().any(|k| w.eq_ignore_ascii_case(k))
                    && !FORBIDDEN_WORDS.iter().any(|k| w.eq_ignore_ascii_case(k)) =>
            {
                ColRef { name: w.clone(), pos: *pos }
            }
            Some(Token { tok: Tok::Quoted(w), pos }) => ColRef { name: w.clone(), pos: *pos },
            _ => return Err(self.unexpected("expected identifier")),
        };
        self.i += 1;
        if self.is_sym(".")
            && matches!(self.peek_at(1), Some(Token { tok: Tok::Word(_) | Tok::Quoted(_), .. }))
        {
            self.i += 1;
            let inner = self.ident()?;
            col = inner;
        }
        Ok(col)
    }

    fn is_ident_start(&self) -> bool {
        match self.peek() {
            Some(Token { tok: Tok::Word(w), .. }) => !KEYWORDS.iter().any(|k| w.eq_ignore_ascii_case(k)),
            Some(Token { tok: Tok::Quoted(_), .. }) => true,
            _ => false,
        }
    }

    fn literal(&mut self) -> PResult<Option<Lit>> {
        let neg = self.is_sym("-") && matches!(self.peek_at(1), Some(Token { tok: Tok::Num(_), .. }));
        if neg {
            self.i += 1;
        }
        let lit = match self.peek() {
            Some(Token { tok: Tok::Num(n), .. }) => Some(Lit::Num(if neg { -n } else { *n })),
            Some(Token { tok: Tok::Str(s), .. }) => Some(Lit::Str(s.clone())),
            _ => None,
        };
        if lit.is_some() {
            self.i += 1;
        }
        Ok(lit)
    }

    fn expect_literal(&mut self) -> PResult<Lit> {
        match self.literal()? {
            Some(l) => {
                self.forbid_computation()?;
                Ok(l)
            }
            None => {
                self.forbid_computation()?;
                if self.is_ident_start() {
                    let p = self.pos();
                    return Err(issue(
                        QueryErrorCode::ForbiddenClause,
                        "comparisons must be against literals, not columns",
                        p,
                    ));
                }
                Err(self.unexpected("expected literal"))
            }
        }
    }

    fn cmp_op(&mut self) -> Option<CmpOp> {
        let op = match self.peek() {
            Some(Token { tok: Tok::Sym(s), .. }) => match *s {
                "=" => CmpOp::Eq,
                "<>" | "!=" => CmpOp::Ne,
                "<" => CmpOp::Lt,
                ">" => CmpOp::Gt,
                "<=" => CmpOp::Le,
                ">=" => CmpOp::Ge,
                _ => return None,
            },
            _ => return None,
        };
        self.i += 1;
        Some(op)
    }

    fn query(&mut self) -> PResult<SelectQuery> {
        match self.peek() {
            None => return Err(issue(QueryErrorCode::Syntax, "empty query", 0)),
            Some(Token { tok: Tok::Word(w), pos }) if w.eq_ignore_ascii_case("WITH") => {
                return Err(issue(QueryErrorCode::ForbiddenClause, "WITH is not allowed", *pos))
            }
            Some(Token { tok: Tok::Word(w), .. }) if w.eq_ignore_ascii_case("SELECT") => self.i += 1,
            Some(t) => {
                return Err(issue(QueryErrorCode::NotSelect, "only a single SELECT statement is allowed", t.pos))
            }
        }
        if self.is_kw("DISTINCT") || self.is_kw("ALL") || self.is_kw("TOP") {
            return Err(issue(QueryErrorCode::ForbiddenClause, "select modifiers are not allowed", self.pos()));
        }

        let projection = if self.is_sym("*") {
            let p = self.pos();
            self.i += 1;
            Projection::All(p)
        } else {
            let mut cols = Vec::new();
            loop {
                if let Some(Token { tok: Tok::Num(_) | Tok::Str(_), pos }) = self.peek() {
                    return Err(issue(QueryErrorCode::ForbiddenClause, "constant expressions are not allowed", *pos));
                }
                let c = self.ident()?;
                self.forbid_computation()?;
                self.skip_alias()?;
                cols.push(c);
                if !self.eat_sym(",") {
                    break;
                }
            }
            Projection::Columns(cols)
        };

        self.expect_kw("FROM")?;
        if self.is_sym("(") {
            return Err(issue(QueryErrorCode::ForbiddenClause, "subqueries are not allowed", self.pos()));
        }
        let table = self.ident()?;
        self.skip_alias()?;
        if self.is_sym(",") {
            return Err(issue(QueryErrorCode::ForbiddenClause, "only one table may be queried", self.pos()));
        }

        let filter = if self.eat_kw("WHERE") { Some(self.or_expr()?) } else { None };

        let mut order = Vec::new();
        if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            loop {
                let c = self.ident()?;
                self.forbid_computation()?;
                let desc = if self.eat_kw("DESC") {
                    true
                } else {
                    self.eat_kw("ASC");
                    false
                };
                order.push((c, desc));
                if !self.eat_sym(",") {
                    break;
                }
            }
        }

        let mut limit = None;
        if self.is_kw("LIMIT") {
            let kw_pos = self.pos();
            self.i += 1;
            match self.peek() {
                Some(Token { tok: Tok::Num(n), .. }) if n.fract() == 0.0 && *n >= 0.0 => {
                    limit = Some((*n as u64, kw_pos));
                    self.i += 1;
                }
                _ => return Err(self.unexpected("expected non-negative integer after LIMIT")),
            }
        }

        let had_semicolon = self.eat_sym(";");
        while self.eat_sym(";") {}
        if let Some(t) = self.peek() {
            if had_semicolon {
                return Err(issue(QueryErrorCode::ForbiddenClause, "multiple statements are not allowed", t.pos));
            }
            return Err(self.unexpected("unexpected token"));
        }
        Ok(SelectQuery {
            projection,
            table: table.name,
            table_pos: table.pos,
            filter,
            order,
            limit,
        })
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let mut left = self.and_expr()?;
        while self.eat_kw("OR") {
            let right = self.and_expr()?;
            left = Expr::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut left = self.atom()?;
        while self.eat_kw("AND") {
            let right = self.atom()?;
            left = Expr::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn atom(&mut self) -> PResult<Expr> {
        if self.eat_sym("(") {
            if self.is_kw("SELECT") {
                return Err(issue(QueryErrorCode::ForbiddenClause, "subqueries are not allowed", self.pos()));
            }
            let e = self.or_expr()?;
            self.expect_sym(")")?;
            return Ok(e);
        }
        if let Some(lit) = self.literal()? {
            self.forbid_computation()?;
            let Some(op) = self.cmp_op() else {
                return Err(self.unexpected("expected comparison operator"));
            };
            if !self.is_ident_start() {
                return Err(issue(
                    QueryErrorCode::ForbiddenClause,
                    "predicates must compare a column with a literal",
                    self.pos(),
                ));
            }
            let col = self.ident()?;
            self.forbid_computation()?;
            return Ok(Expr::Cmp { col, op: op.flip(), lit });
        }
        let col = self.ident()?;
        self.forbid_computation()?;
        if let Some(op) = self.cmp_op() {
            let lit = self.expect_literal()?;
            return Ok(Expr::Cmp { col, op, lit });
        }
        if self.eat_kw("IS") {
            let negated = self.eat_kw("NOT");
            self.expect_kw("NULL")?;
            return Ok(Expr::IsNull { col, negated });
        }
        let negated = self.eat_kw("NOT");
        if self.eat_kw("IN") {
            self.expect_sym("(")?;
            if self.is_kw("SELECT") {
                return Err(issue(QueryErrorCode::ForbiddenClause, "subqueries are not allowed", self.pos()));
            }
            let mut list = vec![self.expect_literal()?];
            while self.eat_sym(",") {
                list.push(self.expect_literal()?);
            }
            self.expect_sym(")")?;
            return Ok(Expr::In { col, list, negated });
        }
        if self.eat_kw("LIKE") {
            return match self.expect_literal()? {
                Lit::Str(pattern) => Ok(Expr::Like { col, pattern, negated }),
                Lit::Num(_) => Err(issue(QueryErrorCode::Syntax, "LIKE needs a string pattern", self.pos())),
            };
        }
        if self.eat_kw("BETWEEN") {
            let lo = self.expect_literal()?;
            self.expect_kw("AND")?;
            let hi = self.expect_literal()?;
            let (lo_op, hi_op) = if negated { (CmpOp::Lt, CmpOp::Gt) } else { (CmpOp::Ge, CmpOp::Le) };
            let a = Box::new(Expr::Cmp { col: col.clone(), op: lo_op, lit: lo });
            let b = Box::new(Expr::Cmp { col, op: hi_op, lit: hi });
            return Ok(if negated { Expr::Or(a, b) } else { Expr::And(a, b) });
        }
        Err(self.unexpected("expected predicate"))
    }
}

pub(crate) fn parse(sql: &str) -> Result<SelectQuery, QueryIssue> {
    let toks = lex(sql)?;
    let mut p = Parser { toks: &toks, i: 0, end: sql.chars().count() };
    p.query()
}

fn expr_columns<'e>(e: &'e Expr, out: &mut Vec<&'e ColRef>) {
    match e {
        Expr::And(a, b) | Expr::Or(a, b) => {
            expr_columns(a, out);
            expr_columns(b, out);
        }
        Expr::Cmp { col, .. } | Expr::In { col, .. } | Expr::Like { col, .. } | Expr::IsNull { col, .. } => {
            out.push(col)
        }
    }
}

fn table_matches(table: &str, dataset: &Dataset) -> bool {
    table.eq_ignore_ascii_case(&dataset.id) || table.trim().eq_ignore_ascii_case(dataset.name.trim())
}

/// Checks a query against one dataset without running it.
pub fn validate_query(sql: &str, dataset: &Dataset) -> QueryValidationReport {
    match parse(sql) {
        Err(e) => QueryValidationReport::from_errors(vec![e]),
        Ok(q) => QueryValidationReport::from_errors(check(&q, dataset)),
    }
}

fn check(q: &SelectQuery, dataset: &Dataset) -> Vec<QueryIssue> {
    let mut errors = Vec::new();
    if !table_matches(&q.table, dataset) {
        errors.push(issue(
            QueryErrorCode::UnknownTable,
            format!("unknown table {:?}; query table {:?}", q.table, dataset.id),
            q.table_pos,
        ));
    }
    let mut refs: Vec<&ColRef> = Vec::new();
    let width = match &q.projection {
        Projection::All(_) => dataset.fields.len(),
        Projection::Columns(cols) => {
            refs.extend(cols.iter());
            let mut names: Vec<String> = cols.iter().map(|c| c.name.to_ascii_lowercase()).collect();
            names.sort();
            names.dedup();
            names.len()
        }
    };
    if let Some(f) = &q.filter {
        expr_columns(f, &mut refs);
    }
    refs.extend(q.order.iter().map(|(c, _)| c));
    let mut reported: Vec<String> = Vec::new();
    for c in refs {
        let key = c.name.to_ascii_lowercase();
        if dataset.field_index(&c.name).is_none() && !reported.contains(&key) {
            errors.push(issue(
                QueryErrorCode::UnknownColumn,
                format!("column {:?} does not exist", c.name),
                c.pos,
            ));
            reported.push(key);
        }
    }
    if let Some(f) = &q.filter {
        literal_types(f, dataset, &mut errors);
    }
    if width > MAX_SUBTABLE_FIELDS {
        let pos = match &q.projection {
            Projection::All(p) => *p,
            Projection::Columns(c) => c[0].pos,
        };
        errors.push(issue(
            QueryErrorCode::LimitExceeded,
            format!("{width} columns selected; at most {MAX_SUBTABLE_FIELDS} allowed"),
            pos,
        ));
    }
    if let Some((n, pos)) = q.limit {
        if n > MAX_SUBTABLE_ROWS as u64 {
            errors.push(issue(
                QueryErrorCode::LimitExceeded,
                format!("LIMIT {n} exceeds {MAX_SUBTABLE_ROWS} rows"),
                pos,
            ));
        }
    }
    errors
}

/// Flags comparisons that some cell of the column cannot take part in.
fn literal_types(e: &Expr, dataset: &Dataset, errors: &mut Vec<QueryIssue>) {
    let mut probe = |col: &ColRef, lit: &Lit| {
        let Some(i) = dataset.field_index(&col.name) else { return };
        if let Some(Mismatch(why)) = dataset.rows.iter().find_map(|r| compare(&r[i], lit).err()) {
            errors.push(issue(QueryErrorCode::TypeMismatch, format!("column {:?}: {why}", col.name), col.pos));
        }
    };
    match e {
        Expr::And(a, b) | Expr::Or(a, b) => {
            literal_types(a, dataset, errors);
            literal_types(b, dataset, errors);
        }
        Expr::Cmp { col, lit, .. } => probe(col, lit),
        Expr::In { col, list, .. } => {
            for l in list {
                probe(col, l);
            }
        }
        Expr::Like { .. } | Expr::IsNull { .. } => {}
    }
}

// ---------------------------------------------------------------------------
// Execution

struct Mismatch(String);

fn compare(cell: &Cell, lit: &Lit) -> Result<Option<Ordering>, Mismatch> {
    Ok(match (cell, lit) {
        (Cell::Null, _) => None,
        (Cell::Number(n), Lit::Num(m)) => n.partial_cmp(m),
        (Cell::Number(n), Lit::Str(s)) => match parse_number(s) {
            Some(m) => n.partial_cmp(&m),
            None => return Err(Mismatch(format!("cannot compare number {n} with text '{s}'"))),
        },
        (Cell::Text(t), Lit::Str(s)) => Some(t.as_str().cmp(s.as_str())),
        (Cell::Text(t), Lit::Num(m)) => match parse_number(t) {
            Some(n) => n.partial_cmp(m),
            None => return Err(Mismatch(format!("cannot compare text '{t}' with number {m}"))),
        },
    })
}

/// SQL `LIKE` with `%` and `_`, ASCII case-insensitive.
pub(crate) fn like(text: &str, pattern: &str) -> bool {
    let t: Vec<char> = text.chars().map(|c| c.to_ascii_lowercase()).collect();
    let p: Vec<char> = pattern.chars().map(|c| c.to_ascii_lowercase()).collect();
    let (mut ti, mut pi) = (0usize, 0usize);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '_' || (p[pi] != '%' && p[pi] == t[ti])) {
            ti += 1;
            pi += 1;
        } else if pi < p.len() && p[pi] == '%' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '%' {
        pi += 1;
    }
    pi == p.len()
}

fn eval(e: &Expr, row: &[Cell], dataset: &Dataset) -> Result<bool, Mismatch> {
    let cell = |c: &ColRef| &row[dataset.field_index(&c.name).expect("validated column")];
    Ok(match e {
        // Both sides are always evaluated so type errors surface regardless
        // of short-circuiting.
        Expr::And(a, b) => {
            let (x, y) = (eval(a, row, dataset)?, eval(b, row, dataset)?);
            x && y
        }
        Expr::Or(a, b) => {
            let (x, y) = (eval(a, row, dataset)?, eval(b, row, dataset)?);
            x || y
        }
        Expr::Cmp { col, op, lit } => compare(cell(col), lit)?.is_some_and(|o| op.test(o)),
        Expr::In { col, list, negated } => {
            let c = cell(col);
            if c.is_null() {
                false
            } else {
                let mut hit = false;
                for l in list {
                    hit |= compare(c, l)? == Some(Ordering::Equal);
                }
                hit != *negated
            }
        }
        Expr::Like { col, pattern, negated } => {
            let c = cell(col);
            !c.is_null() && like(&c.render(), pattern) != *negated
        }
        Expr::IsNull { col, negated } => cell(col).is_null() != *negated,
    })
}

/// Runs a validated query. Rows keep dataset order unless `ORDER BY` is
/// given (stable sort, nulls last).
pub fn execute_query(sql: &str, dataset: &Dataset) -> Result<SubTable, QueryError> {
    let q = match parse(sql) {
        Ok(q) => q,
        Err(e) => return Err(QueryError::Invalid(QueryValidationReport::from_errors(vec![e]))),
    };
    let errors = check(&q, dataset);
    if !errors.is_empty() {
        return Err(QueryError::Invalid(QueryValidationReport::from_errors(errors)));
    }

    let mut rows: Vec<&Vec<Cell>> = Vec::new();
    for row in &dataset.rows {
        let keep = match &q.filter {
            None => true,
            Some(f) => eval(f, row, dataset).map_err(|m| QueryError::ExecutionFailure(m.0))?,
        };
        if keep {
            rows.push(row);
        }
    }
    if !q.order.is_empty() {
        let keys: Vec<(usize, bool)> = q
            .order
            .iter()
            .map(|(c, desc)| (dataset.field_index(&c.name).expect("validated column"), *desc))
            .collect();
        rows.sort_by(|a, b| {
            for &(i, desc) in &keys {
                let (x, y) = (&a[i], &b[i]);
                let o = match (x.is_null(), y.is_null()) {
                    (true, true) => Ordering::Equal,
                    (true, false) => Ordering::Greater,
                    (false, true) => Ordering::Less,
                    _ if desc => y.sort_cmp(x),
                    _ => x.sort_cmp(y),
                };
                if o != Ordering::Equal {
                    return o;
                }
            }
            Ordering::Equal
        });
    }
    let limit = q.limit.map_or(MAX_SUBTABLE_ROWS, |(n, _)| n as usize).min(MAX_SUBTABLE_ROWS);
    rows.truncate(limit);

    let cols: Vec<usize> = match &q.projection {
        Projection::All(_) => (0..dataset.fields.len()).collect(),
        Projection::Columns(cs) => {
            let mut v: Vec<usize> = Vec::new();
            for c in cs {
                let i = dataset.field_index(&c.name).expect("validated column");
                if !v.contains(&i) {
                    v.push(i);
                }
            }
            v
        }
    };
    Ok(SubTable {
        source_dataset: dataset.id.clone(),
        fields: cols.iter().map(|&i| dataset.fields[i].clone()).collect(),
        rows: rows
            .into_iter()
            .map(|r| cols.iter().map(|&i| r[i].clone()).collect())
            .collect(),
        generating_query: sql.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_dataset, SourceFormat};

    fn table() -> Dataset {
        let csv = "country,country_code,series,series_code,year,value\n\
            Japan,JPN,Gini index,SI.POV.GINI,2012,32.1\n\
            China,CHN,Gini index,SI.POV.GINI,2012,42.2\n\
            Japan,JPN,Gini index,SI.POV.GINI,2013,32.9\n\
            Brazil,BRA,Gini index,SI.POV.GINI,2013,52.8\n\
            China,CHN,Gini index,SI.POV.GINI,2013,..\n\
            Chile,CHL,Gini index,SI.POV.GINI,2013,45.6\n";
        ingest_dataset(csv.as_bytes(), "t", "test", SourceFormat::Table).unwrap()
    }

    fn codes(sql: &str, d: &Dataset) -> Vec<QueryErrorCode> {
        validate_query(sql, d).errors.into_iter().map(|e| e.code).collect()
    }

    #[test]
    fn non_select_rejected() {
        assert_eq!(codes("DROP TABLE t", &table()), vec![QueryErrorCode::NotSelect]);
        assert_eq!(codes("delete from t", &table()), vec![QueryErrorCode::NotSelect]);
    }

    #[test]
    fn simple_select_ok() {
        let csv = "gini,year\n30,2001\n";
        let d = ingest_dataset(csv.as_bytes(), "t", "", SourceFormat::Table).unwrap();
        assert!(validate_query("SELECT gini FROM t LIMIT 10", &d).ok);
    }

    #[test]
    fn unknown_column_reported_with_location() {
        let r = validate_query("SELECT ghost FROM t LIMIT 5", &table());
        assert!(!r.ok);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].code, QueryErrorCode::UnknownColumn);
        assert!(r.errors[0].message.contains("ghost"));
        assert_eq!(r.errors[0].location, 7);
    }

    #[test]
    fn forbidden_constructs() {
        let d = table();
        for sql in [
            "SELECT AVG(value) FROM t",
            "SELECT value * 2 FROM t",
            "SELECT country FROM t GROUP BY country",
            "SELECT country FROM t JOIN u ON t.a = u.a",
            "SELECT DISTINCT country FROM t",
            "SELECT country FROM t WHERE value > (SELECT 1)",
            "SELECT country FROM t; DROP TABLE t",
            "SELECT country FROM t WHERE value > year",
            "SELECT country FROM t, u",
            "SELECT country FROM t LIMIT 5 OFFSET 2",
        ] {
            assert_eq!(codes(sql, &d), vec![QueryErrorCode::ForbiddenClause], "{sql}");
        }
    }

    #[test]
    fn limit_checks() {
        let d = table();
        assert_eq!(codes("SELECT * FROM t LIMIT 11", &d), vec![QueryErrorCode::LimitExceeded]);
        assert!(validate_query("SELECT * FROM t", &d).ok);
        assert_eq!(codes("SELECT * FROM t LIMIT", &d), vec![QueryErrorCode::Syntax]);
    }

    #[test]
    fn unknown_table() {
        assert_eq!(codes("SELECT * FROM wdi", &table()), vec![QueryErrorCode::UnknownTable]);
    }

    #[test]
    fn select_all_returns_everything_in_order() {
        let csv = "k,v\na,1\nb,2\nc,3\nd,4\n";
        let d = ingest_dataset(csv.as_bytes(), "t", "", SourceFormat::Table).unwrap();
        let s = execute_query("SELECT * FROM t LIMIT 10", &d).unwrap();
        assert_eq!(s.rows, d.rows);
        assert_eq!(s.generating_query, "SELECT * FROM t LIMIT 10");
    }

    #[test]
    fn where_equality_filters_rows() {
        let d = table();
        let s = execute_query("SELECT country, year, value FROM t WHERE country='Japan'", &d).unwrap();
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.fields.len(), 3);
        assert!(s.rows.iter().all(|r| r[0] == Cell::Text("Japan".into())));
    }

    #[test]
    fn operators() {
        let d = table();
        let n = |sql: &str| execute_query(sql, &d).unwrap().rows.len();
        assert_eq!(n("SELECT * FROM t WHERE value > 40"), 3);
        assert_eq!(n("SELECT * FROM t WHERE 40 < value"), 3);
        assert_eq!(n("SELECT * FROM t WHERE value IS NULL"), 1);
        assert_eq!(n("SELECT * FROM t WHERE country IN ('Chile', 'Brazil')"), 2);
        assert_eq!(n("SELECT * FROM t WHERE country NOT IN ('Chile', 'Brazil')"), 4);
        assert_eq!(n("SELECT * FROM t WHERE country LIKE 'ch%'"), 3);
        assert_eq!(n("SELECT * FROM t WHERE year = 2013 AND (country = 'Japan' OR country = 'Chile')"), 2);
        assert_eq!(n("SELECT * FROM t WHERE year BETWEEN 2012 AND 2012"), 2);
        assert_eq!(n("SELECT * FROM t WHERE year NOT BETWEEN 2012 AND 2012"), 4);
        assert_eq!(n("SELECT * FROM t WHERE series_code = 'SI.POV.GINI' LIMIT 3"), 3);
        assert_eq!(n("SELECT * FROM t WHERE country <> 'Japan'"), 4);
    }

    #[test]
    fn order_by_desc_nulls_last() {
        let d = table();
        let s = execute_query("SELECT country, value FROM t ORDER BY value DESC", &d).unwrap();
        let vals: Vec<String> = s.rows.iter().map(|r| r[1].render()).collect();
        assert_eq!(vals, ["52.8", "45.6", "42.2", "32.9", "32.1", ""]);
    }

    #[test]
    fn type_mismatch_is_rejected_before_execution() {
        let d = table();
        for sql in ["SELECT * FROM t WHERE value > 'high'", "SELECT * FROM t WHERE country = 3"] {
            match execute_query(sql, &d) {
                Err(QueryError::Invalid(r)) => assert!(r.has(QueryErrorCode::TypeMismatch)),
                other => panic!("{sql}: {other:?}"),
            }
        }
    }

    #[test]
    fn quoted_identifiers_and_fences_of_case() {
        let d = table();
        let s = execute_query("select \"Country\", `value` from T where t.year = '2012';", &d).unwrap();
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.fields[0].name, "country");
    }

    #[test]
    fn like_matcher() {
        assert!(like("Japan", "j%"));
        assert!(like("Japan", "_apan"));
        assert!(like("abcabc", "%b%c"));
        assert!(!like("Japan", "j_n"));
        assert!(like("", "%"));
    }
}
