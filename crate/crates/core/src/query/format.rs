//! Line-oriented `key=value` text form of queries.
//!
//! ```text
//! query_id=7
//! predicate=city = "NYC" AND fare >= 0
//! bucket_kind=numeric
//! bucket_field=distance
//! bucket=[0,1)
//! bucket=[1,inf)
//! f=1000
//! w=600000
//! delta=60000
//! inverted=false
//! budget=zk
//! epsilon=1.5
//! error_target=0.05
//! confidence_level=0.95
//! ```
//!
//! `bucket` lines repeat in order; for `bucket_kind=regex` the rest of the
//! line is the pattern verbatim. The budget keys are optional. A published
//! query additionally carries `revision`, `start_ms`, `s`, `p` and `q`.

use std::fmt::Write as _;

use super::{Budget, BudgetKind, BucketSpec, ExecutionParams, MatchRule, NumericRange, Query, QueryError};

fn perr(msg: impl Into<String>) -> QueryError {
    QueryError::Parse(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, QueryError>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse::<T>()
        .map_err(|e| perr(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_range(v: &str) -> Result<NumericRange, QueryError> {
    let inner = v
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| perr(format!("bucket `{v}` is not of the form [lo,hi)")))?;
    let (lo, hi) = inner
        .split_once(',')
        .ok_or_else(|| perr(format!("bucket `{v}` lacks a comma")))?;
    Ok(NumericRange::new(parse_num("bucket", lo)?, parse_num("bucket", hi)?))
}

fn lines(text: &str) -> impl Iterator<Item = Result<(&str, &str), QueryError>> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v))
                .ok_or_else(|| perr(format!("line `{l}` is not key=value")))
        })
}

#[derive(Default)]
struct QueryFields {
    query_id: Option<u64>,
    predicate: Option<String>,
    bucket_kind: Option<String>,
    bucket_field: Option<String>,
    buckets: Vec<String>,
    f: Option<u64>,
    w: Option<u64>,
    delta: Option<u64>,
    inverted: bool,
}

impl QueryFields {
    /// Consumes `key` if it belongs to the query itself.
    fn take(&mut self, key: &str, value: &str) -> Result<bool, QueryError> {
        match key {
            "query_id" => self.query_id = Some(parse_num(key, value)?),
            "predicate" => self.predicate = Some(value.trim().to_string()),
            "bucket_kind" => self.bucket_kind = Some(value.trim().to_string()),
            "bucket_field" => self.bucket_field = Some(value.trim().to_string()),
            "bucket" => self.buckets.push(value.to_string()),
            "f" => self.f = Some(parse_num(key, value)?),
            "w" => self.w = Some(parse_num(key, value)?),
            "delta" => self.delta = Some(parse_num(key, value)?),
            "inverted" => self.inverted = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn build(self) -> Result<Query, QueryError> {
        let missing = |k: &str| perr(format!("missing `{k}`"));
        let field = self.bucket_field.ok_or_else(|| missing("bucket_field"))?;
        let buckets = match self.bucket_kind.as_deref() {
            Some("numeric") => BucketSpec::Numeric {
                field,
                ranges: self
                    .buckets
                    .iter()
                    .map(|b| parse_range(b))
                    .collect::<Result<_, _>>()?,
            },
            Some("regex") => BucketSpec::Regex {
                field,
                rules: self
                    .buckets
                    .iter()
                    .map(|b| MatchRule::new(b))
                    .collect::<Result<_, _>>()?,
            },
            Some(other) => return Err(perr(format!("unknown bucket_kind `{other}`"))),
            None => return Err(missing("bucket_kind")),
        };
        Ok(Query {
            query_id: self.query_id.ok_or_else(|| missing("query_id"))?,
            predicate: self.predicate.as_deref().unwrap_or("*").parse()?,
            buckets,
            answer_frequency_ms: self.f.ok_or_else(|| missing("f"))?,
            window_length_ms: self.w.ok_or_else(|| missing("w"))?,
            slide_interval_ms: self.delta.ok_or_else(|| missing("delta"))?,
            inverted: self.inverted,
        })
    }
}

#[derive(Default)]
struct BudgetFields {
    kind: Option<BudgetKind>,
    epsilon: Option<f64>,
    error_target: Option<f64>,
    confidence_level: Option<f64>,
}

impl BudgetFields {
    fn take(&mut self, key: &str, value: &str) -> Result<bool, QueryError> {
        match key {
            "budget" => {
                self.kind = Some(
                    BudgetKind::parse(value.trim())
                        .ok_or_else(|| perr(format!("unknown budget kind `{value}`")))?,
                )
            }
            "epsilon" => self.epsilon = Some(parse_num(key, value)?),
            "error_target" => self.error_target = Some(parse_num(key, value)?),
            "confidence_level" => self.confidence_level = Some(parse_num(key, value)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn build(self) -> Result<Option<Budget>, QueryError> {
        let Some(kind) = self.kind else {
            if self.epsilon.is_some() {
                return Err(perr("`epsilon` given without `budget`"));
            }
            return Ok(None);
        };
        let epsilon = self.epsilon.ok_or_else(|| perr("missing `epsilon`"))?;
        let budget = Budget {
            kind,
            epsilon,
            error_target: self.error_target,
            confidence_level: self.confidence_level.unwrap_or(0.95),
        };
        budget.validate()?;
        Ok(Some(budget))
    }
}

fn write_query(out: &mut String, q: &Query) {
    let _ = writeln!(out, "query_id={}", q.query_id);
    let _ = writeln!(out, "predicate={}", q.predicate);
    let _ = writeln!(out, "bucket_kind={}", q.buckets.kind_name());
    let _ = writeln!(out, "bucket_field={}", q.buckets.field());
    match &q.buckets {
        BucketSpec::Numeric { ranges, .. } => {
            for r in ranges {
                let _ = writeln!(out, "bucket={r}");
            }
        }
        BucketSpec::Regex { rules, .. } => {
            for r in rules {
                let _ = writeln!(out, "bucket={}", r.pattern());
            }
        }
    }
    let _ = writeln!(out, "f={}", q.answer_frequency_ms);
    let _ = writeln!(out, "w={}", q.window_length_ms);
    let _ = writeln!(out, "delta={}", q.slide_interval_ms);
    let _ = writeln!(out, "inverted={}", q.inverted);
}

/// What an analyst submits: the query plus an optional budget.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySubmission {
    pub query: Query,
    pub budget: Option<Budget>,
}

impl QuerySubmission {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_query(&mut out, &self.query);
        if let Some(b) = &self.budget {
            let _ = writeln!(out, "budget={}", b.kind.as_str());
            let _ = writeln!(out, "epsilon={}", b.epsilon);
            if let Some(t) = b.error_target {
                let _ = writeln!(out, "error_target={t}");
            }
            let _ = writeln!(out, "confidence_level={}", b.confidence_level);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, QueryError> {
        let mut q = QueryFields::default();
        let mut b = BudgetFields::default();
        for kv in lines(text) {
            let (k, v) = kv?;
            if !q.take(k, v)? && !b.take(k, v)? {
                return Err(perr(format!("unknown key `{k}`")));
            }
        }
        Ok(QuerySubmission {
            query: q.build()?,
            budget: b.build()?,
        })
    }
}

/// What the aggregator broadcasts to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedQuery {
    pub query: Query,
    pub params: ExecutionParams,
    /// Bumped whenever the aggregator changes the query (e.g. inversion).
    pub revision: u32,
    /// Epoch boundary from which clients answer this revision; their first
    /// message covers `[start_ms, start_ms + f)` and is stamped `start_ms`.
    pub start_ms: u64,
}

impl PublishedQuery {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_query(&mut out, &self.query);
        let _ = writeln!(out, "revision={}", self.revision);
        let _ = writeln!(out, "start_ms={}", self.start_ms);
        let _ = writeln!(out, "s={}", self.params.sampling);
        let _ = writeln!(out, "p={}", self.params.p());
        let _ = writeln!(out, "q={}", self.params.q());
        out
    }

    pub fn parse(text: &str) -> Result<Self, QueryError> {
        let mut q = QueryFields::default();
        let (mut revision, mut start_ms, mut s, mut p, mut qq) = (0u32, 0u64, None, None, None);
        for kv in lines(text) {
            let (k, v) = kv?;
            if q.take(k, v)? {
                continue;
            }
            match k {
                "revision" => revision = parse_num(k, v)?,
                "start_ms" => start_ms = parse_num(k, v)?,
                "s" => s = Some(parse_num::<f64>(k, v)?),
                "p" => p = Some(parse_num::<f64>(k, v)?),
                "q" => qq = Some(parse_num::<f64>(k, v)?),
                _ => return Err(perr(format!("unknown key `{k}`"))),
            }
        }
        let missing = |k: &str| perr(format!("missing `{k}`"));
        let params = ExecutionParams::new(
            s.ok_or_else(|| missing("s"))?,
            p.ok_or_else(|| missing("p"))?,
            qq.ok_or_else(|| missing("q"))?,
        )?;
        Ok(PublishedQuery {
            query: q.build()?,
            params,
            revision,
            start_ms,
        })
    }
}
