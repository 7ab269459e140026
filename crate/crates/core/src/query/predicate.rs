//! Conjunctive predicates over flat records.
//!
//! A predicate is a list of `field op value` clauses that must all hold.
//! The empty predicate (written `*`) matches every record.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::QueryError;

/// A record field value.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Number(f64),
    Text(String),
}

impl Scalar {
    /// Interprets a raw token: anything that parses as a float is a number.
    pub fn infer(raw: &str) -> Scalar {
        match raw.trim().parse::<f64>() {
            Ok(v) => Scalar::Number(v),
            Err(_) => Scalar::Text(raw.to_string()),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Scalar::Number(v) => Some(*v),
            Scalar::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Scalar::Text(s) => Some(s),
            Scalar::Number(_) => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Number(v) => write!(f, "{v}"),
            Scalar::Text(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
}

impl CompareOp {
    fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
            CompareOp::Contains => "contains",
        }
    }

    fn from_symbol(s: &str) -> Option<CompareOp> {
        Some(match s {
            "=" => CompareOp::Eq,
            "!=" => CompareOp::Ne,
            "<" => CompareOp::Lt,
            "<=" => CompareOp::Le,
            ">" => CompareOp::Gt,
            ">=" => CompareOp::Ge,
            "contains" => CompareOp::Contains,
            _ => return None,
        })
    }
}

/// One `field op value` term.
#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub field: String,
    pub op: CompareOp,
    pub value: Scalar,
}

impl Clause {
    pub fn new(field: impl Into<String>, op: CompareOp, value: Scalar) -> Self {
        Clause {
            field: field.into(),
            op,
            value,
        }
    }

    /// Whether the operator is meaningful for the clause's value type.
    pub fn types_agree(&self) -> bool {
        match (&self.op, &self.value) {
            (CompareOp::Eq | CompareOp::Ne, _) => true,
            (CompareOp::Contains, Scalar::Text(_)) => true,
            (CompareOp::Contains, Scalar::Number(_)) => false,
            (_, Scalar::Number(_)) => true,
            (_, Scalar::Text(_)) => false,
        }
    }

    fn matches(&self, record: &Record) -> bool {
        let Some(actual) = record.fields.get(&self.field) else {
            return false;
        };
        match (self.op, actual, &self.value) {
            (CompareOp::Eq, a, b) => a == b,
            (CompareOp::Ne, a, b) => a != b,
            (CompareOp::Contains, Scalar::Text(a), Scalar::Text(b)) => a.contains(b.as_str()),
            (op, Scalar::Number(a), Scalar::Number(b)) => match op {
                CompareOp::Lt => a < b,
                CompareOp::Le => a <= b,
                CompareOp::Gt => a > b,
                CompareOp::Ge => a >= b,
                _ => false,
            },
            _ => false,
        }
    }
}

/// Conjunction of clauses; stands in for the analyst's SQL `WHERE`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predicate {
    pub clauses: Vec<Clause>,
}

impl Predicate {
    /// The predicate that accepts every record.
    pub fn always() -> Self {
        Predicate::default()
    }

    pub fn new(clauses: Vec<Clause>) -> Self {
        Predicate { clauses }
    }

    pub fn and(mut self, clause: Clause) -> Self {
        self.clauses.push(clause);
        self
    }

    pub fn matches(&self, record: &Record) -> bool {
        self.clauses.iter().all(|c| c.matches(record))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.clauses.is_empty() {
            return f.write_str("*");
        }
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{} {} {}", c.field, c.op.symbol(), c.value)?;
        }
        Ok(())
    }
}

#[derive(Debug, PartialEq)]
enum Token {
    Word(String),
    Op(String),
    Str(String),
}

fn tokenize(s: &str) -> Result<Vec<Token>, QueryError> {
    let bad = |msg: &str| QueryError::Parse(format!("predicate: {msg}"));
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '"' {
            let mut text = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(bad("unterminated string")),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        let esc = chars.get(i + 1).ok_or_else(|| bad("dangling escape"))?;
                        text.push(*esc);
                        i += 2;
                    }
                    Some(ch) => {
                        text.push(*ch);
                        i += 1;
                    }
                }
            }
            out.push(Token::Str(text));
        } else if matches!(c, '=' | '!' | '<' | '>') {
            let mut op = c.to_string();
            if chars.get(i + 1) == Some(&'=') {
                op.push('=');
                i += 1;
            }
            i += 1;
            out.push(Token::Op(op));
        } else {
            let start = i;
            while i < chars.len()
                && !chars[i].is_whitespace()
                && !matches!(chars[i], '"' | '=' | '!' | '<' | '>')
            {
                i += 1;
            }
            out.push(Token::Word(chars[start..i].iter().collect()));
        }
    }
    Ok(out)
}

impl FromStr for Predicate {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if trimmed == "*" || trimmed.is_empty() {
            return Ok(Predicate::always());
        }
        let bad = |msg: String| QueryError::Parse(format!("predicate: {msg}"));
        let tokens = tokenize(trimmed)?;
        let mut clauses = Vec::new();
        let mut it = tokens.into_iter().peekable();
        loop {
            let field = match it.next() {
                Some(Token::Word(w)) => w,
                other => return Err(bad(format!("expected field name, got {other:?}"))),
            };
            let op = match it.next() {
                Some(Token::Op(o)) | Some(Token::Word(o)) => CompareOp::from_symbol(&o)
                    .ok_or_else(|| bad(format!("unknown operator `{o}`")))?,
                other => return Err(bad(format!("expected operator, got {other:?}"))),
            };
            let value = match it.next() {
                Some(Token::Str(s)) => Scalar::Text(s),
                Some(Token::Word(w)) => match w.parse::<f64>() {
                    Ok(v) => Scalar::Number(v),
                    Err(_) => return Err(bad(format!("bare value `{w}` is not a number"))),
                },
                other => return Err(bad(format!("expected value, got {other:?}"))),
            };
            clauses.push(Clause { field, op, value });
            match it.next() {
                None => break,
                Some(Token::Word(w)) if w.eq_ignore_ascii_case("and") => continue,
                Some(other) => return Err(bad(format!("expected AND, got {other:?}"))),
            }
        }
        Ok(Predicate { clauses })
    }
}

/// One row of a client's local store.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub timestamp_ms: u64,
    pub fields: BTreeMap<String, Scalar>,
}

impl Record {
    pub fn new(timestamp_ms: u64) -> Self {
        Record {
            timestamp_ms,
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: impl Into<String>, value: Scalar) -> Self {
        self.fields.insert(field.into(), value);
        self
    }

    pub fn get(&self, field: &str) -> Option<&Scalar> {
        self.fields.get(field)
    }

    /// Parses `timestamp_ms,field=value,...`. Values that parse as floats
    /// become numbers; text values cannot contain commas.
    pub fn parse_line(line: &str) -> Result<Record, QueryError> {
        let mut parts = line.trim().split(',');
        let ts = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| QueryError::Parse("record: missing timestamp".into()))?;
        let timestamp_ms = ts
            .trim()
            .parse::<u64>()
            .map_err(|e| QueryError::Parse(format!("record: bad timestamp `{ts}`: {e}")))?;
        let mut record = Record::new(timestamp_ms);
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| QueryError::Parse(format!("record: `{part}` is not field=value")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(QueryError::Parse("record: empty field name".into()));
            }
            record.fields.insert(k.to_string(), Scalar::infer(v));
        }
        Ok(record)
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.timestamp_ms)?;
        for (k, v) in &self.fields {
            match v {
                Scalar::Number(n) => write!(f, ",{k}={n}")?,
                Scalar::Text(t) => write!(f, ",{k}={t}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_roundtrip() {
        let text = r#"city = "San \"Fran\"" AND speed >= 0 AND note contains "x""#;
        let p: Predicate = text.parse().unwrap();
        assert_eq!(p.clauses.len(), 3);
        assert_eq!(p.clauses[0].value, Scalar::Text("San \"Fran\"".into()));
        let again: Predicate = p.to_string().parse().unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn empty_predicate_matches_everything() {
        let p: Predicate = "*".parse().unwrap();
        assert!(p.matches(&Record::new(0)));
    }

    #[test]
    fn matching_semantics() {
        let r = Record::new(5)
            .with("speed", Scalar::Number(15.0))
            .with("city", Scalar::Text("San Francisco".into()));
        let yes: Predicate = r#"city = "San Francisco" AND speed < 20"#.parse().unwrap();
        let no: Predicate = "speed > 20".parse().unwrap();
        let missing: Predicate = "altitude > 0".parse().unwrap();
        let contains: Predicate = r#"city contains "Fran""#.parse().unwrap();
        assert!(yes.matches(&r));
        assert!(!no.matches(&r));
        assert!(!missing.matches(&r));
        assert!(contains.matches(&r));
    }

    #[test]
    fn rejects_malformed() {
        assert!("speed >".parse::<Predicate>().is_err());
        assert!("speed ~ 3".parse::<Predicate>().is_err());
        assert!("speed = fast".parse::<Predicate>().is_err());
        assert!("a = 1 OR b = 2".parse::<Predicate>().is_err());
    }

    #[test]
    fn record_line() {
        let r = Record::parse_line("1200,speed=15,city=Dresden").unwrap();
        assert_eq!(r.timestamp_ms, 1200);
        assert_eq!(r.get("speed"), Some(&Scalar::Number(15.0)));
        assert_eq!(r.get("city"), Some(&Scalar::Text("Dresden".into())));
        assert_eq!(Record::parse_line(&r.to_string()).unwrap(), r);
        assert!(Record::parse_line("abc,x=1").is_err());
        assert!(Record::parse_line("10,novalue").is_err());
    }
}
