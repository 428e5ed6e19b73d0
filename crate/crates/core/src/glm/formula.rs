//! Model formulas: `y ~ x1 + x2 + x1:x2 + C(x4) + ns(x3, 4)`.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! formula := [name] "~" rhs
//! rhs     := item ("+" item)* ["-" "1"]
//! item    := "1" | "0" | term
//! term    := factor (":" factor)*
//! factor  := name | "C(" name ")" | "ns(" name ["," integer] ")"
//! ```
//!
//! `0` or `- 1` drops the intercept. `C(x)` expands `x` into reference-coded
//! indicators; columns that are categorical in the data are expanded without
//! it. `ns(x, df)` is a natural cubic spline with `df` columns (default 4).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GlmError;
use crate::data::{ColumnKind, Dataset};

pub const DEFAULT_SPLINE_DF: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Binomial response with logit link.
    Binomial,
    /// Gaussian response with identity link.
    Gaussian,
}

impl FromStr for Family {
    type Err = GlmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binomial" | "logit" | "logistic" => Ok(Family::Binomial),
            "gaussian" | "identity" | "linear" => Ok(Family::Gaussian),
            other => Err(GlmError::Formula(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    Column(String),
    Categorical(String),
    Spline { column: String, df: usize },
}

impl Factor {
    pub fn column(&self) -> &str {
        match self {
            Factor::Column(c) | Factor::Categorical(c) => c,
            Factor::Spline { column, .. } => column,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Column(c) => write!(f, "{c}"),
            Factor::Categorical(c) => write!(f, "C({c})"),
            Factor::Spline { column, df } => write!(f, "ns({column}, {df})"),
        }
    }
}

/// A main effect (one factor) or an interaction (product of factors).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn main(column: impl Into<String>) -> Term {
        Term { factors: vec![Factor::Column(column.into())] }
    }

    pub fn interaction(columns: &[&str]) -> Term {
        Term { factors: columns.iter().map(|c| Factor::Column((*c).to_string())).collect() }
    }

    pub fn is_interaction(&self) -> bool {
        self.factors.len() > 1
    }

    fn is_spline(&self) -> bool {
        self.factors.len() == 1 && matches!(self.factors[0], Factor::Spline { .. })
    }

    fn key(&self) -> BTreeSet<&Factor> {
        self.factors.iter().collect()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, factor) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            write!(f, "{factor}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFormula {
    pub response: Option<String>,
    pub intercept: bool,
    pub terms: Vec<Term>,
    pub family: Family,
}

impl ModelFormula {
    pub fn new(intercept: bool, terms: Vec<Term>, family: Family) -> ModelFormula {
        ModelFormula { response: None, intercept, terms, family }
    }

    pub fn intercept_only(family: Family) -> ModelFormula {
        ModelFormula::new(true, Vec::new(), family)
    }

    pub fn parse(text: &str, family: Family) -> Result<ModelFormula, GlmError> {
        Parser::new(text).formula(family)
    }

    /// Terms in design-column order: main effects (input order), splines,
    /// then interactions.
    pub fn ordered_terms(&self) -> Vec<&Term> {
        let mains = self.terms.iter().filter(|t| !t.is_interaction() && !t.is_spline());
        let splines = self.terms.iter().filter(|t| t.is_spline());
        let inter = self.terms.iter().filter(|t| t.is_interaction());
        mains.chain(splines).chain(inter).collect()
    }

    /// Checks referenced columns, spline degrees of freedom and duplicates.
    pub fn validate(&self, ds: &Dataset) -> Result<(), GlmError> {
        if !self.intercept && self.terms.is_empty() {
            return Err(GlmError::Formula("formula has no columns".into()));
        }
        let mut seen = BTreeSet::new();
        for term in &self.terms {
            let mut in_term = BTreeSet::new();
            for factor in &term.factors {
                let j = ds
                    .column_index(factor.column())
                    .ok_or_else(|| GlmError::MissingColumn(factor.column().to_string()))?;
                if let Factor::Spline { column, df } = factor {
                    if *df < 2 {
                        return Err(GlmError::Formula(format!("ns({column}, {df}): df must be at least 2")));
                    }
                    if matches!(ds.columns()[j].kind, ColumnKind::Categorical { .. }) {
                        return Err(GlmError::Formula(format!("ns({column}): column is categorical")));
                    }
                }
                if !in_term.insert(factor.column()) {
                    return Err(GlmError::Formula(format!("term `{term}` repeats column `{}`", factor.column())));
                }
            }
            if !seen.insert(term.key()) {
                return Err(GlmError::Formula(format!("duplicate term `{term}`")));
            }
        }
        Ok(())
    }

    /// Names of the data columns the formula reads.
    pub fn columns(&self) -> BTreeSet<&str> {
        self.terms.iter().flat_map(|t| t.factors.iter().map(Factor::column)).collect()
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.response {
            write!(f, "{r} ")?;
        }
        f.write_str("~ ")?;
        let mut items: Vec<String> = Vec::new();
        if self.intercept && self.terms.is_empty() {
            items.push("1".into());
        }
        items.extend(self.terms.iter().map(|t| t.to_string()));
        if !self.intercept {
            items.push("0".into());
        }
        f.write_str(&items.join(" + "))
    }
}

struct Parser<'a> {
    text: &'a str,
    chars: Vec<char>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser { text, chars: text.chars().collect(), pos: 0 }
    }

    fn err(&self, msg: &str) -> GlmError {
        GlmError::Formula(format!("{msg} at position {} in `{}`", self.pos, self.text))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), GlmError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected `{c}`")))
        }
    }

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            if c.is_alphanumeric() || c == '_' || c == '.' {
                self.pos += 1;
            } else {
                break;
            }
        }
        (self.pos > start).then(|| self.chars[start..self.pos].iter().collect())
    }

    fn formula(mut self, family: Family) -> Result<ModelFormula, GlmError> {
        let response = if self.peek() == Some('~') {
            None
        } else {
            Some(self.ident().ok_or_else(|| self.err("expected response name or `~`"))?)
        };
        self.expect('~')?;
        let mut intercept = true;
        let mut terms = Vec::new();
        loop {
            match self.peek() {
                None => return Err(self.err("expected a term")),
                Some('-') => {
                    self.pos += 1;
                    match self.ident().as_deref() {
                        Some("1") => intercept = false,
                        _ => return Err(self.err("only `- 1` may be subtracted")),
                    }
                }
                Some(_) => {
                    let save = self.pos;
                    match self.ident().as_deref() {
                        Some("1") => {}
                        Some("0") => intercept = false,
                        _ => {
                            self.pos = save;
                            terms.push(self.term()?);
                        }
                    }
                }
            }
            match self.peek() {
                None => break,
                Some('+') => self.pos += 1,
                Some('-') => {}
                Some(_) => return Err(self.err("expected `+`")),
            }
        }
        Ok(ModelFormula { response, intercept, terms, family })
    }

    fn term(&mut self) -> Result<Term, GlmError> {
        let mut factors = vec![self.factor()?];
        while self.eat(':') {
            factors.push(self.factor()?);
        }
        Ok(Term { factors })
    }

    fn factor(&mut self) -> Result<Factor, GlmError> {
        let name = self.ident().ok_or_else(|| self.err("expected a column name"))?;
        if !self.eat('(') {
            if name.chars().next().is_some_and(|c| c.is_ascii_digit()) {
                return Err(self.err("column names cannot start with a digit"));
            }
            return Ok(Factor::Column(name));
        }
        let column = self.ident().ok_or_else(|| self.err("expected a column name"))?;
        let factor = match name.as_str() {
            "C" => Factor::Categorical(column),
            "ns" => {
                let df = if self.eat(',') {
                    let digits = self.ident().ok_or_else(|| self.err("expected degrees of freedom"))?;
                    digits.parse().map_err(|_| self.err("degrees of freedom must be an integer"))?
                } else {
                    DEFAULT_SPLINE_DF
                };
                Factor::Spline { column, df }
            }
            other => return Err(self.err(&format!("unknown function `{other}`"))),
        };
        self.expect(')')?;
        Ok(factor)
    }
}
