//! Decode-step access traces.
//!
//! A [`DecodeTrace`] records, for every decode step `(n, l)`, which past
//! tokens' KV entries layer `l` reads while generating token `n`. Traces are
//! produced by the seeded [`synthesize_trace`] generator, converted from
//! recorded attention scores with [`scores_to_trace`], or loaded from the
//! line-oriented text format handled by [`write_trace`] / [`read_trace`].

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{TraceError, ValidationError};

/// Shape of a trace: layer count, prompt length, decode length and sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceHeader {
    pub num_layers: u32,
    pub prompt_len: u32,
    pub decode_len: u32,
    /// Bytes of one token's KV entry at one layer.
    pub entry_bytes: u64,
    /// Weight bytes read by every step of one layer.
    pub weight_bytes_per_layer: u64,
}

impl TraceHeader {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.num_layers == 0 {
            return Err(ValidationError::new("num_layers", "must be >= 1"));
        }
        if self.decode_len == 0 {
            return Err(ValidationError::new("decode_len", "must be >= 1"));
        }
        if self.entry_bytes == 0 {
            return Err(ValidationError::new("entry_bytes", "must be > 0"));
        }
        Ok(())
    }

    /// Total number of tokens once decoding finishes (`P + N`).
    pub fn total_tokens(&self) -> u32 {
        self.prompt_len + self.decode_len
    }

    /// Number of `(n, l)` steps.
    pub fn num_steps(&self) -> usize {
        self.decode_len as usize * self.num_layers as usize
    }

    /// KV bytes of the whole trace after the last decode step.
    pub fn final_kv_bytes(&self) -> u64 {
        self.total_tokens() as u64 * self.num_layers as u64 * self.entry_bytes
    }

    pub fn weights_bytes(&self) -> u64 {
        self.num_layers as u64 * self.weight_bytes_per_layer
    }

    /// Token whose KV entry is written at decode step `n` (1-based).
    pub fn written_token(&self, n: u32) -> u32 {
        self.prompt_len + n - 1
    }
}

/// Tokens read by one layer at one decode step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StepAccess {
    /// Decode-token index, 1-based.
    pub n: u32,
    pub l: u32,
    /// Ascending, duplicate-free token indices, each `< P + n`.
    pub accessed: Vec<u32>,
}

/// A complete decode trace: `N * L` steps in `(n, l)` order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecodeTrace {
    header: TraceHeader,
    steps: Vec<StepAccess>,
}

impl DecodeTrace {
    /// Builds a trace, checking every structural invariant.
    pub fn new(header: TraceHeader, steps: Vec<StepAccess>) -> Result<Self, ValidationError> {
        header.validate()?;
        if steps.len() != header.num_steps() {
            return Err(ValidationError::new(
                "steps",
                format!("expected {} steps, got {}", header.num_steps(), steps.len()),
            ));
        }
        for (i, step) in steps.iter().enumerate() {
            let (n, l) = step_coords(&header, i);
            if step.n != n || step.l != l {
                return Err(ValidationError::new(
                    "steps",
                    format!("step {i} is ({}, {}), expected ({n}, {l})", step.n, step.l),
                ));
            }
            check_accessed(&header, step).map_err(|m| ValidationError::new("steps", m))?;
        }
        Ok(Self { header, steps })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn steps(&self) -> &[StepAccess] {
        &self.steps
    }

    /// Step record for decode token `n` (1-based) at layer `l`.
    pub fn step(&self, n: u32, l: u32) -> &StepAccess {
        &self.steps[step_ordinal(&self.header, n, l)]
    }

    /// Mean accessed-set size over all steps.
    pub fn mean_set_size(&self) -> f64 {
        let total: usize = self.steps.iter().map(|s| s.accessed.len()).sum();
        total as f64 / self.steps.len() as f64
    }
}

/// Zero-based position of step `(n, l)` in a trace.
pub(crate) fn step_ordinal(header: &TraceHeader, n: u32, l: u32) -> usize {
    (n as usize - 1) * header.num_layers as usize + l as usize
}

fn step_coords(header: &TraceHeader, ordinal: usize) -> (u32, u32) {
    let layers = header.num_layers as usize;
    ((ordinal / layers) as u32 + 1, (ordinal % layers) as u32)
}

fn check_accessed(header: &TraceHeader, step: &StepAccess) -> Result<(), String> {
    if step.accessed.is_empty() {
        return Err(format!("step ({}, {}) has an empty access set", step.n, step.l));
    }
    let limit = header.prompt_len + step.n;
    for pair in step.accessed.windows(2) {
        if pair[0] >= pair[1] {
            return Err(format!(
                "step ({}, {}) access set is not strictly ascending",
                step.n, step.l
            ));
        }
    }
    if let Some(&last) = step.accessed.last() {
        if last >= limit {
            return Err(format!(
                "step ({}, {}) accesses future token {last} (limit {limit})",
                step.n, step.l
            ));
        }
    }
    Ok(())
}

/// Number of tokens kept out of `past` candidates at the given sparsity:
/// `max(1, ceil((1 - sparsity) * past))`.
///
/// A tiny tolerance absorbs products such as `(1 - 1/3) * 3` landing a few
/// ulps above an integer.
pub fn keep_count(sparsity: f64, past: u32) -> u32 {
    let raw = (1.0 - sparsity) * past as f64;
    let k = (raw - 1e-9).ceil().max(0.0) as u32;
    k.clamp(1, past.max(1))
}

fn ceil_fraction(fraction: f64, count: usize) -> usize {
    ((fraction * count as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Parameters of the synthetic trace generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTraceSpec {
    pub header: TraceHeader,
    /// Fraction of past tokens skipped per step, in `[0, 1)`.
    pub sparsity: f64,
    /// Fraction of the important set replaced between consecutive steps.
    pub churn: f64,
    /// Each layer evolves its own important set when true.
    pub per_layer_independent: bool,
    pub seed: u64,
}

impl SynthTraceSpec {
    pub fn validate(&self) -> Result<(), ValidationError> {
        self.header.validate()?;
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(ValidationError::new("sparsity", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.churn) {
            return Err(ValidationError::new("churn", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Evolving important set over a growing token universe.
struct ImportantSet {
    rng: ChaCha8Rng,
    member: Vec<bool>,
    size: usize,
}

impl ImportantSet {
    fn new(rng: ChaCha8Rng, total_tokens: usize) -> Self {
        Self {
            rng,
            member: vec![false; total_tokens.max(1)],
            size: 0,
        }
    }

    fn members(&self, universe: usize) -> Vec<u32> {
        (0..universe as u32).filter(|&t| self.member[t as usize]).collect()
    }

    fn non_members(&self, universe: usize) -> Vec<u32> {
        (0..universe as u32).filter(|&t| !self.member[t as usize]).collect()
    }

    fn remove_random(&mut self, universe: usize, count: usize) {
        let members = self.members(universe);
        let count = count.min(members.len());
        for i in index::sample(&mut self.rng, members.len(), count) {
            self.member[members[i] as usize] = false;
        }
        self.size -= count;
    }

    fn insert_from(&mut self, pool: &[u32], count: usize) {
        let count = count.min(pool.len());
        for i in index::sample(&mut self.rng, pool.len(), count) {
            self.member[pool[i] as usize] = true;
        }
        self.size += count;
    }

    /// Advances to a universe of `universe` tokens with target size `k`.
    fn step(&mut self, universe: usize, k: usize, churn: f64, first: bool) {
        if first {
            let pool = self.non_members(universe);
            self.insert_from(&pool, k);
            return;
        }
        let replace = ceil_fraction(churn, self.size);
        // Replacements come from tokens outside the pre-removal set.
        let fresh = self.non_members(universe);
        self.remove_random(universe, replace);
        self.insert_from(&fresh, replace);
        if self.size < k {
            let pool = self.non_members(universe);
            self.insert_from(&pool, k - self.size);
        } else if self.size > k {
            self.remove_random(universe, self.size - k);
        }
    }
}

/// Generates a deterministic synthetic trace.
///
/// At decode step `n` the universe is the `P + n - 1` past tokens (or the
/// current token alone when there are none) and the important set holds
/// [`keep_count`] of them.
pub fn synthesize_trace(spec: &SynthTraceSpec) -> Result<DecodeTrace, ValidationError> {
    spec.validate()?;
    let h = spec.header;
    let total = h.total_tokens() as usize;
    let streams = if spec.per_layer_independent { h.num_layers } else { 1 };
    let mut sets: Vec<ImportantSet> = (0..streams)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(s as u64);
            ImportantSet::new(rng, total)
        })
        .collect();

    let mut steps = Vec::with_capacity(h.num_steps());
    for n in 1..=h.decode_len {
        let past = h.prompt_len + n - 1;
        let universe = past.max(1) as usize;
        let k = keep_count(spec.sparsity, past) as usize;
        for set in &mut sets {
            set.step(universe, k, spec.churn, n == 1);
        }
        for l in 0..h.num_layers {
            let set = &sets[if spec.per_layer_independent { l as usize } else { 0 }];
            steps.push(StepAccess {
                n,
                l,
                accessed: set.members(universe),
            });
        }
    }
    DecodeTrace::new(h, steps)
}

/// One `(n, l)` row of an attention-score stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub n: u32,
    pub l: u32,
    pub scores: Vec<f64>,
}

/// Indices of the `keep` highest scores, larger index first on ties,
/// returned ascending.
pub fn top_k_indices(scores: &[f64], keep: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(b.cmp(&a)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Converts per-step attention scores into a trace by keeping the top
/// `ceil((1 - sparsity) * (P + n - 1))` tokens of each step.
pub fn scores_to_trace<I>(rows: I, sparsity: f64, header: TraceHeader) -> Result<DecodeTrace, TraceError>
where
    I: IntoIterator<Item = Result<ScoreRow, TraceError>>,
{
    header.validate().map_err(TraceError::Invalid)?;
    if !(0.0..1.0).contains(&sparsity) {
        return Err(TraceError::Invalid(ValidationError::new(
            "sparsity",
            "must be in [0, 1)",
        )));
    }
    let mut rows = rows.into_iter();
    let mut steps = Vec::with_capacity(header.num_steps());
    for ordinal in 0..header.num_steps() {
        let (n, l) = step_coords(&header, ordinal);
        let row = rows.next().ok_or(TraceError::ScoreStepMissing { n, l })??;
        if row.n != n || row.l != l {
            return Err(TraceError::ScoreOrder {
                expected: (n, l),
                found: (row.n, row.l),
            });
        }
        let past = header.prompt_len + n - 1;
        if row.scores.len() != past as usize {
            return Err(TraceError::ScoreCount {
                n,
                l,
                expected: past as usize,
                found: row.scores.len(),
            });
        }
        if let Some(pos) = row.scores.iter().position(|s| !s.is_finite()) {
            return Err(TraceError::NonFiniteScore { n, l, index: pos });
        }
        let accessed = if past == 0 {
            vec![header.written_token(n)]
        } else {
            top_k_indices(&row.scores, keep_count(sparsity, past) as usize)
        };
        steps.push(StepAccess { n, l, accessed });
    }
    if let Some(extra) = rows.next() {
        let extra = extra?;
        return Err(TraceError::ScoreTrailing { n: extra.n, l: extra.l });
    }
    DecodeTrace::new(header, steps).map_err(TraceError::Invalid)
}

/// Parses an attention-score stream: one `<n> <l> <s1>,<s2>,...` line per step.
pub fn read_scores<R: BufRead>(source: R) -> impl Iterator<Item = Result<ScoreRow, TraceError>> {
    source.lines().enumerate().filter_map(|(i, line)| {
        let line_no = i + 1;
        match line {
            Err(e) => Some(Err(TraceError::Io(e))),
            Ok(text) if text.trim().is_empty() => None,
            Ok(text) => Some(parse_score_line(&text, line_no)),
        }
    })
}

fn parse_score_line(text: &str, line: usize) -> Result<ScoreRow, TraceError> {
    let mut parts = text.split(' ');
    let malformed = || TraceError::MalformedLine { line };
    let n: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
    let l: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
    let scores = match parts.next() {
        None | Some("") => Vec::new(),
        Some(list) => list
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|_| malformed()))
            .collect::<Result<_, _>>()?,
    };
    if parts.next().is_some() {
        return Err(malformed());
    }
    Ok(ScoreRow { n, l, scores })
}

/// Writes the text trace format.
pub fn write_trace<W: Write>(trace: &DecodeTrace, mut dest: W) -> std::io::Result<()> {
    let h = trace.header();
    writeln!(
        dest,
        "KVTRACE v1 L={} P={} N={} E={} W={}",
        h.num_layers, h.prompt_len, h.decode_len, h.entry_bytes, h.weight_bytes_per_layer
    )?;
    let mut line = String::new();
    for step in trace.steps() {
        line.clear();
        write!(line, "{} {} ", step.n, step.l).unwrap();
        for (i, t) in step.accessed.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            write!(line, "{t}").unwrap();
        }
        line.push('\n');
        dest.write_all(line.as_bytes())?;
    }
    dest.flush()
}

fn parse_header(text: &str) -> Option<TraceHeader> {
    let mut parts = text.split(' ');
    if parts.next()? != "KVTRACE" || parts.next()? != "v1" {
        return None;
    }
    let mut field = |key: &str| -> Option<u64> { parts.next()?.strip_prefix(key)?.strip_prefix('=')?.parse().ok() };
    let header = TraceHeader {
        num_layers: u32::try_from(field("L")?).ok()?,
        prompt_len: u32::try_from(field("P")?).ok()?,
        decode_len: u32::try_from(field("N")?).ok()?,
        entry_bytes: field("E")?,
        weight_bytes_per_layer: field("W")?,
    };
    if parts.next().is_some() {
        return None;
    }
    Some(header)
}

/// Reads the text trace format, rejecting anything that breaks a trace
/// invariant with an error naming the first offending line.
pub fn read_trace<R: BufRead>(source: R) -> Result<DecodeTrace, TraceError> {
    let mut lines = source.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    let header = parse_header(&first).ok_or(TraceError::MalformedHeader { line: 1 })?;
    header.validate().map_err(|_| TraceError::MalformedHeader { line: 1 })?;

    let expected = header.num_steps();
    let mut steps = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.is_empty() {
            continue;
        }
        if steps.len() == expected {
            return Err(TraceError::StepCountMismatch {
                line: line_no,
                expected,
                found: steps.len() + 1,
            });
        }
        let (n, l) = step_coords(&header, steps.len());
        let step = parse_step_line(&text, line_no)?;
        if step.n != n || step.l != l {
            return Err(TraceError::StepOrder {
                line: line_no,
                expected: (n, l),
                found: (step.n, step.l),
            });
        }
        if step.accessed.is_empty() {
            return Err(TraceError::EmptyAccessSet { line: line_no });
        }
        if step.accessed.windows(2).any(|p| p[0] >= p[1]) {
            return Err(TraceError::UnsortedAccessSet { line: line_no });
        }
        let limit = header.prompt_len + n;
        if let Some(&token) = step.accessed.iter().find(|&&t| t >= limit) {
            return Err(TraceError::FutureTokenAccess {
                line: line_no,
                token,
                limit,
            });
        }
        steps.push(step);
    }
    if steps.len() != expected {
        return Err(TraceError::StepCountMismatch {
            line: steps.len() + 2,
            expected,
            found: steps.len(),
        });
    }
    DecodeTrace::new(header, steps).map_err(TraceError::Invalid)
}

fn parse_step_line(text: &str, line: usize) -> Result<StepAccess, TraceError> {
    let malformed = || TraceError::MalformedLine { line };
    let mut parts = text.split(' ');
    let n: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
    let l: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
    let accessed = match parts.next() {
        None | Some("") => Vec::new(),
        Some(list) => list
            .split(',')
            .map(|s| s.parse::<u32>().map_err(|_| malformed()))
            .collect::<Result<_, _>>()?,
    };
    if parts.next().is_some() {
        return Err(malformed());
    }
    Ok(StepAccess { n, l, accessed })
}
