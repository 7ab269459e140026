//! Query, answer and budget vocabulary shared by clients and the aggregator.

mod format;
mod predicate;

use std::fmt;

use regex::Regex;
use thiserror::Error;

use crate::privacy::{PrivacyError, RRCoins};

pub use format::{PublishedQuery, QuerySubmission};
pub use predicate::{Clause, CompareOp, Predicate, Record, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("value type does not match the {expected} bucket spec")]
    TypeMismatch { expected: &'static str },
    #[error("invalid regex rule `{pattern}`: {reason}")]
    BadRule { pattern: String, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid query: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Params(#[from] PrivacyError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Fixed-width answer bits, one per bucket.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector(Vec<bool>);

impl BitVector {
    pub fn zeros(n: usize) -> Self {
        BitVector(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        self.0[i] = bit;
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    /// Complements every bit (used to ask the inverted question).
    pub fn negated(&self) -> BitVector {
        BitVector(self.0.iter().map(|b| !b).collect())
    }

    /// Packs MSB-first into `ceil(n / 8)` bytes, zero-padded.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.0.len().div_ceil(8)];
        for (i, bit) in self.0.iter().enumerate() {
            if *bit {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    /// Inverse of [`BitVector::pack`]; `bytes` must hold at least `n` bits.
    pub fn unpack(bytes: &[u8], n: usize) -> Option<BitVector> {
        if bytes.len() < n.div_ceil(8) {
            return None;
        }
        Some(BitVector(
            (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect(),
        ))
    }
}

impl From<Vec<bool>> for BitVector {
    fn from(bits: Vec<bool>) -> Self {
        BitVector(bits)
    }
}

impl fmt::Display for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// A client's answer to one query for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVector {
    pub query_id: u64,
    pub timestamp_ms: u64,
    pub bits: BitVector,
}

/// Half-open numeric bucket `[lo, hi)`. Either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericRange {
    pub lo: f64,
    pub hi: f64,
}

impl NumericRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        NumericRange { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v < self.hi
    }
}

impl fmt::Display for NumericRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.lo, self.hi)
    }
}

/// A text-matching bucket rule.
#[derive(Debug, Clone)]
pub struct MatchRule {
    pattern: String,
    regex: Regex,
}

impl MatchRule {
    pub fn new(pattern: &str) -> Result<Self, QueryError> {
        let regex = Regex::new(pattern).map_err(|e| QueryError::BadRule {
            pattern: pattern.to_string(),
            reason: e.to_string(),
        })?;
        Ok(MatchRule {
            pattern: pattern.to_string(),
            regex,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.regex.is_match(text)
    }
}

impl PartialEq for MatchRule {
    fn eq(&self, other: &Self) -> bool {
        self.pattern == other.pattern
    }
}

/// Layout of the answer vector: which record field is bucketized and how.
#[derive(Debug, Clone, PartialEq)]
pub enum BucketSpec {
    Numeric {
        field: String,
        ranges: Vec<NumericRange>,
    },
    Regex {
        field: String,
        rules: Vec<MatchRule>,
    },
}

impl BucketSpec {
    pub fn numeric(field: impl Into<String>, ranges: Vec<NumericRange>) -> Self {
        BucketSpec::Numeric {
            field: field.into(),
            ranges,
        }
    }

    /// Contiguous buckets over the given edges: `[e0,e1), [e1,e2), ...`.
    pub fn from_edges(field: impl Into<String>, edges: &[f64]) -> Self {
        let ranges = edges
            .windows(2)
            .map(|w| NumericRange::new(w[0], w[1]))
            .collect();
        BucketSpec::numeric(field, ranges)
    }

    pub fn regex(field: impl Into<String>, patterns: &[&str]) -> Result<Self, QueryError> {
        Ok(BucketSpec::Regex {
            field: field.into(),
            rules: patterns
                .iter()
                .map(|p| MatchRule::new(p))
                .collect::<Result<_, _>>()?,
        })
    }

    /// The answer-vector width `n`.
    pub fn len(&self) -> usize {
        match self {
            BucketSpec::Numeric { ranges, .. } => ranges.len(),
            BucketSpec::Regex { rules, .. } => rules.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn field(&self) -> &str {
        match self {
            BucketSpec::Numeric { field, .. } | BucketSpec::Regex { field, .. } => field,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BucketSpec::Numeric { .. } => "numeric",
            BucketSpec::Regex { .. } => "regex",
        }
    }
}

/// Maps one field value onto the answer bits.
///
/// Numeric specs set the single bucket whose `[lo, hi)` contains the value,
/// or nothing when no bucket does. Regex specs set every matching rule.
pub fn bucketize(value: &Scalar, spec: &BucketSpec) -> Result<BitVector, QueryError> {
    let mut bits = BitVector::zeros(spec.len());
    match (spec, value) {
        (BucketSpec::Numeric { ranges, .. }, Scalar::Number(v)) => {
            // ranges are sorted and disjoint: the candidate is the last one starting at or below v
            let idx = ranges.partition_point(|r| r.lo <= *v);
            if idx > 0 && ranges[idx - 1].contains(*v) {
                bits.set(idx - 1, true);
            }
        }
        (BucketSpec::Regex { rules, .. }, Scalar::Text(t)) => {
            for (i, rule) in rules.iter().enumerate() {
                if rule.is_match(t) {
                    bits.set(i, true);
                }
            }
        }
        (BucketSpec::Numeric { .. }, _) => {
            return Err(QueryError::TypeMismatch {
                expected: "numeric",
            })
        }
        (BucketSpec::Regex { .. }, _) => return Err(QueryError::TypeMismatch { expected: "regex" }),
    }
    Ok(bits)
}

/// A streaming histogram query.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: u64,
    pub predicate: Predicate,
    pub buckets: BucketSpec,
    /// How often clients answer (epoch length).
    pub answer_frequency_ms: u64,
    pub window_length_ms: u64,
    pub slide_interval_ms: u64,
    /// Clients answer the complemented question ("not in bucket").
    pub inverted: bool,
}

impl Query {
    pub fn new(query_id: u64, predicate: Predicate, buckets: BucketSpec) -> Self {
        Query {
            query_id,
            predicate,
            buckets,
            answer_frequency_ms: 1_000,
            window_length_ms: 1_000,
            slide_interval_ms: 1_000,
            inverted: false,
        }
    }

    pub fn with_timing(mut self, frequency_ms: u64, window_ms: u64, slide_ms: u64) -> Self {
        self.answer_frequency_ms = frequency_ms;
        self.window_length_ms = window_ms;
        self.slide_interval_ms = slide_ms;
        self
    }

    pub fn with_inverted(mut self, inverted: bool) -> Self {
        self.inverted = inverted;
        self
    }

    pub fn n_buckets(&self) -> usize {
        self.buckets.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyBucketSpec,
    TooManyBuckets(usize),
    BucketsOverlap { first: usize, second: usize },
    BucketsUnsorted,
    InvalidRange(usize),
    EmptyFieldName,
    OpValueMismatch(usize),
    ZeroDuration(&'static str),
    SlideExceedsWindow,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyBucketSpec => f.write_str("empty bucket spec"),
            Violation::TooManyBuckets(n) => write!(f, "{n} buckets exceed the wire limit of 65535"),
            Violation::BucketsOverlap { first, second } => {
                write!(f, "buckets overlap ({first} and {second})")
            }
            Violation::BucketsUnsorted => f.write_str("buckets not sorted by lower bound"),
            Violation::InvalidRange(i) => write!(f, "bucket {i} has an empty or NaN range"),
            Violation::EmptyFieldName => f.write_str("empty field name"),
            Violation::OpValueMismatch(i) => {
                write!(f, "predicate clause {i}: operator and value types disagree")
            }
            Violation::ZeroDuration(which) => write!(f, "{which} must be positive"),
            Violation::SlideExceedsWindow => f.write_str("slide interval exceeds window length"),
        }
    }
}

/// Collects every invariant violation of `q`; `Ok` iff there are none.
pub fn validate_query(q: &Query) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let n = q.buckets.len();
    if n == 0 {
        v.push(Violation::EmptyBucketSpec);
    }
    if n > u16::MAX as usize {
        v.push(Violation::TooManyBuckets(n));
    }
    if q.buckets.field().is_empty() {
        v.push(Violation::EmptyFieldName);
    }
    if let BucketSpec::Numeric { ranges, .. } = &q.buckets {
        for (i, r) in ranges.iter().enumerate() {
            if r.lo.is_nan() || r.hi.is_nan() || r.lo >= r.hi {
                v.push(Violation::InvalidRange(i));
            }
        }
        if ranges.windows(2).any(|w| w[0].lo > w[1].lo) {
            v.push(Violation::BucketsUnsorted);
        }
        let mut order: Vec<usize> = (0..ranges.len()).collect();
        order.sort_by(|a, b| ranges[*a].lo.total_cmp(&ranges[*b].lo));
        for w in order.windows(2) {
            if ranges[w[0]].hi > ranges[w[1]].lo {
                v.push(Violation::BucketsOverlap {
                    first: w[0].min(w[1]),
                    second: w[0].max(w[1]),
                });
            }
        }
    }
    for (i, c) in q.predicate.clauses.iter().enumerate() {
        if c.field.is_empty() {
            v.push(Violation::EmptyFieldName);
        }
        if !c.types_agree() {
            v.push(Violation::OpValueMismatch(i));
        }
    }
    if q.answer_frequency_ms == 0 {
        v.push(Violation::ZeroDuration("answer frequency"));
    }
    if q.window_length_ms == 0 {
        v.push(Violation::ZeroDuration("window length"));
    }
    if q.slide_interval_ms == 0 {
        v.push(Violation::ZeroDuration("slide interval"));
    }
    if q.slide_interval_ms > q.window_length_ms {
        v.push(Violation::SlideExceedsWindow);
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetKind {
    /// Budget expressed as a zero-knowledge privacy level.
    ZeroKnowledge,
    /// Budget expressed as a differential privacy level.
    Differential,
}

impl BudgetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BudgetKind::ZeroKnowledge => "zk",
            BudgetKind::Differential => "dp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zk" => Some(BudgetKind::ZeroKnowledge),
            "dp" => Some(BudgetKind::Differential),
            _ => None,
        }
    }
}

/// The analyst's execution budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub kind: BudgetKind,
    pub epsilon: f64,
    /// Relative half-width the adaptive loop aims for.
    pub error_target: Option<f64>,
    pub confidence_level: f64,
}

impl Budget {
    pub fn new(kind: BudgetKind, epsilon: f64) -> Result<Self, PrivacyError> {
        let b = Budget {
            kind,
            epsilon,
            error_target: None,
            confidence_level: 0.95,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn zk(epsilon: f64) -> Result<Self, PrivacyError> {
        Budget::new(BudgetKind::ZeroKnowledge, epsilon)
    }

    pub fn dp(epsilon: f64) -> Result<Self, PrivacyError> {
        Budget::new(BudgetKind::Differential, epsilon)
    }

    pub fn with_error_target(mut self, target: f64) -> Self {
        self.error_target = Some(target);
        self
    }

    pub fn with_confidence(mut self, level: f64) -> Self {
        self.confidence_level = level;
        self
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(PrivacyError::InvalidParameter(format!(
                "budget epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "confidence level must lie in (0,1), got {}",
                self.confidence_level
            )));
        }
        if let Some(t) = self.error_target {
            if !(t > 0.0 && t.is_finite()) {
                return Err(PrivacyError::InvalidParameter(format!(
                    "error target must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Sampling and randomization parameters clients run under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutionParams {
    /// Participation probability `s`.
    pub sampling: f64,
    pub coins: RRCoins,
}

impl ExecutionParams {
    /// `0 < s <= 1`, `0 < p <= 1`, `0 < q < 1`. `p = 1` disables randomization.
    pub fn new(sampling: f64, p: f64, q: f64) -> Result<Self, PrivacyError> {
        if !(sampling > 0.0 && sampling <= 1.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "sampling probability must lie in (0,1], got {sampling}"
            )));
        }
        let coins = if p == 1.0 {
            RRCoins::no_privacy(q)?
        } else {
            RRCoins::new(p, q)?
        };
        Ok(ExecutionParams { sampling, coins })
    }

    /// Accepts any probabilities in `[0, 1]`, including `s = 0`. Test harnesses only.
    pub fn test_mode(sampling: f64, p: f64, q: f64) -> Result<Self, PrivacyError> {
        if !(0.0..=1.0).contains(&sampling) {
            return Err(PrivacyError::InvalidParameter(format!(
                "sampling probability must lie in [0,1], got {sampling}"
            )));
        }
        Ok(ExecutionParams {
            sampling,
            coins: RRCoins::arbitrary(p, q)?,
        })
    }

    pub fn p(&self) -> f64 {
        self.coins.p()
    }

    pub fn q(&self) -> f64 {
        self.coins.q()
    }

    pub fn with_sampling(mut self, sampling: f64) -> Self {
        self.sampling = sampling;
        self
    }
}
