//! Placement strategies.
//!
//! Each `decide_*` function is a pure function of the current placement and
//! the step being executed; foresight policies additionally read a
//! [`LookaheadIndex`] built from the trace's future. [`PolicyRunner`] wraps
//! them behind one interface for the simulation driver and keeps the
//! lookahead windows up to date incrementally.

use std::cmp::Reverse;

use crate::error::ValidationError;
use crate::placement::{CapacityMode, EntryId, PlacementState, ScheduleDecision, Tier};
use crate::trace::{DecodeTrace, StepAccess};

pub const DEFAULT_PAGE_SIZE: u32 = 16;
pub const DEFAULT_PAGE_WINDOW: u32 = 8;
pub const DEFAULT_PAGE_RATIO: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    UnlimitedHbm,
    Static,
    ReactiveLru,
    PageGranularity { page_size: u32, window: u32, ratio: f64 },
    Lookahead { window: u32, ratio: f64 },
}

impl PolicyKind {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let (page_size, window, ratio) = match *self {
            PolicyKind::PageGranularity {
                page_size,
                window,
                ratio,
            } => (page_size, window, ratio),
            PolicyKind::Lookahead { window, ratio } => (1, window, ratio),
            _ => return Ok(()),
        };
        if page_size == 0 {
            return Err(ValidationError::new("page_size", "must be >= 1"));
        }
        if window == 0 {
            return Err(ValidationError::new("window", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(ValidationError::new("ratio", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn capacity_mode(&self) -> CapacityMode {
        match self {
            PolicyKind::UnlimitedHbm => CapacityMode::Unlimited,
            _ => CapacityMode::Enforced,
        }
    }

    /// Short stable name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::UnlimitedHbm => "unlimited_hbm",
            PolicyKind::Static => "static",
            PolicyKind::ReactiveLru => "reactive_lru",
            PolicyKind::PageGranularity { .. } => "page",
            PolicyKind::Lookahead { .. } => "lookahead",
        }
    }

    /// Name plus parameters, e.g. `lookahead(W=8,R=0.5)`.
    pub fn label(&self) -> String {
        match self {
            PolicyKind::PageGranularity {
                page_size,
                window,
                ratio,
            } => {
                format!("page(S={page_size},W={window},R={ratio})")
            }
            PolicyKind::Lookahead { window, ratio } => format!("lookahead(W={window},R={ratio})"),
            other => other.name().to_string(),
        }
    }
}

/// Access frequencies of one layer's entries over a window of future steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookaheadIndex {
    layer: u32,
    counts: Vec<u32>,
}

impl LookaheadIndex {
    fn empty(layer: u32, tokens: usize) -> Self {
        Self {
            layer,
            counts: vec![0; tokens],
        }
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn frequency(&self, e: EntryId) -> u32 {
        if e.layer != self.layer {
            return 0;
        }
        self.counts.get(e.token as usize).copied().unwrap_or(0)
    }

    pub fn token_frequency(&self, token: u32) -> u32 {
        self.counts.get(token as usize).copied().unwrap_or(0)
    }

    /// Entries with nonzero frequency, ascending by token.
    pub fn iter(&self) -> impl Iterator<Item = (EntryId, u32)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(t, &c)| (EntryId::new(t as u32, self.layer), c))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    fn add(&mut self, access: &StepAccess) {
        for &t in &access.accessed {
            self.counts[t as usize] += 1;
        }
    }

    fn remove(&mut self, access: &StepAccess) {
        for &t in &access.accessed {
            self.counts[t as usize] -= 1;
        }
    }
}

/// Counts layer-`l` accesses over steps `n+1 ..= min(n+window, N)`.
pub fn build_lookahead_index(trace: &DecodeTrace, n: u32, l: u32, window: u32) -> LookaheadIndex {
    let h = trace.header();
    let mut index = LookaheadIndex::empty(l, h.total_tokens() as usize);
    let last = n.saturating_add(window).min(h.decode_len);
    for m in n + 1..=last {
        index.add(trace.step(m, l));
    }
    index
}

/// Per-layer lookahead windows advanced one step at a time.
#[derive(Debug, Clone)]
pub struct SlidingLookahead {
    window: u32,
    layers: Vec<(u32, LookaheadIndex)>,
}

impl SlidingLookahead {
    pub fn new(trace: &DecodeTrace, window: u32) -> Self {
        let h = trace.header();
        let layers = (0..h.num_layers)
            .map(|l| (0, LookaheadIndex::empty(l, h.total_tokens() as usize)))
            .collect();
        Self { window, layers }
    }

    /// Index for step `(n, l)`. Steps of one layer must be visited in order.
    pub fn at(&mut self, trace: &DecodeTrace, n: u32, l: u32) -> &LookaheadIndex {
        let decode_len = trace.header().decode_len;
        let (cur, index) = &mut self.layers[l as usize];
        if *cur == 0 {
            *index = build_lookahead_index(trace, n, l, self.window);
        } else {
            assert!(n >= *cur, "lookahead window moved backwards");
            for m in *cur + 1..=n {
                // Step m leaves the window, step m + W enters.
                if m <= decode_len {
                    index.remove(trace.step(m, l));
                }
                let entering = m as u64 + self.window as u64;
                if entering <= decode_len as u64 {
                    index.add(trace.step(entering as u32, l));
                }
            }
        }
        *cur = n;
        index
    }
}

pub fn decide_unlimited() -> ScheduleDecision {
    ScheduleDecision::write_only(Tier::Hbm)
}

pub fn decide_static(state: &PlacementState) -> ScheduleDecision {
    let tier = if state.free_slots() >= 1 { Tier::Hbm } else { Tier::Dram };
    ScheduleDecision::write_only(tier)
}

/// Promote every missed entry, evicting least-recently-used entries that
/// this step does not read. When the step's working set cannot fit, the
/// most recent misses that fit are promoted and the new entry gets HBM only
/// if room is left.
pub fn decide_reactive(state: &PlacementState, access: &StepAccess) -> ScheduleDecision {
    let h = state.header();
    let l = access.l;
    let mut misses: Vec<EntryId> = access
        .accessed
        .iter()
        .map(|&t| EntryId::new(t, l))
        .filter(|&e| state.tier_of(e) == Some(Tier::Dram))
        .collect();
    let free = state.free_slots();
    let need = misses.len() as u64 + 1;
    if free >= need {
        return ScheduleDecision {
            migrate_out: Vec::new(),
            migrate_in: misses,
            new_entry_tier: Tier::Hbm,
        };
    }

    let mut read_now = vec![false; h.total_tokens() as usize];
    for &t in &access.accessed {
        read_now[t as usize] = true;
    }
    let tokens = h.written_token(access.n) + 1;
    let mut pool: Vec<(u64, EntryId)> = state
        .hbm_residents(tokens)
        .filter(|e| !(e.layer == l && read_now[e.token as usize]))
        .map(|e| (state.last_touch(e), e))
        .collect();
    let evict = take_smallest(&mut pool, (need - free) as usize);
    let room = free + evict.len() as u64;

    if (misses.len() as u64) > room {
        misses.sort_unstable_by_key(|e| Reverse(e.token));
        misses.truncate(room as usize);
        misses.sort_unstable();
    }
    let new_entry_tier = if room > misses.len() as u64 {
        Tier::Hbm
    } else {
        Tier::Dram
    };
    ScheduleDecision {
        migrate_out: evict,
        migrate_in: misses,
        new_entry_tier,
    }
}

/// The `count` smallest keys of `pool`, ascending, returned as ids.
fn take_smallest<K: Ord + Copy>(pool: &mut [(K, EntryId)], count: usize) -> Vec<EntryId> {
    let count = count.min(pool.len());
    if count == 0 {
        return Vec::new();
    }
    if count < pool.len() {
        pool.select_nth_unstable(count - 1);
    }
    let head = &mut pool[..count];
    head.sort_unstable();
    head.iter().map(|&(_, e)| e).collect()
}

fn ratio_count(ratio: f64, candidates: usize) -> usize {
    (((ratio * candidates as f64) - 1e-9).ceil().max(0.0) as usize).min(candidates)
}

/// Migration unit for foresight policies: a run of consecutive tokens of
/// one layer.
struct Unit {
    first: u32,
    frequency: u64,
    dram_members: u64,
    hbm_members: u64,
    last_touch: u64,
}

/// Foresight placement at page granularity; a page of one token is the
/// entry-level lookahead policy.
///
/// Candidates are pages with future accesses and DRAM-resident members,
/// ranked by (frequency desc, page desc). The first `ceil(R * candidates)`
/// are promoted, trimmed from the tail to what HBM can hold after demoting
/// colder pages of the same layer, coldest then least recently used first.
/// With `R > 0` the new entry claims an HBM slot first when the window reads
/// it; otherwise it goes to HBM only if space remains.
pub fn decide_page(
    state: &PlacementState,
    n: u32,
    l: u32,
    index: &LookaheadIndex,
    page_size: u32,
    ratio: f64,
) -> ScheduleDecision {
    let h = state.header();
    let new_token = h.written_token(n);
    let page_size = page_size.max(1);
    let pages = new_token.div_ceil(page_size);

    let mut candidates = Vec::new();
    let mut pool = Vec::new();
    for p in 0..pages {
        let first = p * page_size;
        let end = (first + page_size).min(new_token);
        let mut unit = Unit {
            first,
            frequency: 0,
            dram_members: 0,
            hbm_members: 0,
            last_touch: 0,
        };
        for t in first..end {
            let e = EntryId::new(t, l);
            unit.frequency += index.token_frequency(t) as u64;
            match state.tier_of(e) {
                Some(Tier::Hbm) => unit.hbm_members += 1,
                Some(Tier::Dram) => unit.dram_members += 1,
                None => continue,
            }
            unit.last_touch = unit.last_touch.max(state.last_touch(e));
        }
        if unit.frequency > 0 && unit.dram_members > 0 {
            candidates.push(unit);
        } else if unit.hbm_members > 0 {
            pool.push(unit);
        }
    }

    let free = state.free_slots();
    let target = ratio_count(ratio, candidates.len());
    let new_frequency = index.token_frequency(new_token) as u64;
    let new_wanted = ratio > 0.0 && new_frequency > 0;

    if target == 0 && !new_wanted {
        return decide_static(state);
    }

    candidates.sort_unstable_by_key(|u| (Reverse(u.frequency), Reverse(u.first)));
    pool.sort_unstable_by_key(|u| (u.frequency, u.last_touch, u.first));
    // cumulative[i] = HBM entries held by pool[..i]
    let cumulative: Vec<u64> = std::iter::once(0)
        .chain(pool.iter().scan(0, |acc, u| {
            *acc += u.hbm_members;
            Some(*acc)
        }))
        .collect();

    // Cold units are always demotable. A multi-token page that will still be
    // read may be swapped out only when the candidate's extra window reads
    // outnumber the entries the swap moves.
    let victim_ok = |u: &Unit, cost: u64, frequency: u64| {
        u.frequency == 0 || (page_size > 1 && u.frequency + cost + u.hbm_members < frequency)
    };
    let mut room = free;
    let mut demoted = 0usize;
    // Claims `cost` slots for a unit of the given frequency, demoting
    // eligible pool units as needed. Fails without side effects.
    let mut claim = |cost: u64, frequency: u64, room: &mut u64| -> bool {
        let eligible = pool.partition_point(|u| victim_ok(u, cost, frequency));
        let reachable = cumulative[eligible.max(demoted)] - cumulative[demoted];
        if room.saturating_add(reachable) < cost {
            return false;
        }
        while *room < cost {
            *room += pool[demoted].hbm_members;
            demoted += 1;
        }
        *room -= cost;
        true
    };

    let reserved = new_wanted && claim(1, new_frequency, &mut room);
    let mut promote_units = 0usize;
    for u in candidates.iter().take(target) {
        if !claim(u.dram_members, u.frequency, &mut room) {
            break;
        }
        promote_units += 1;
    }

    let members = |u: &Unit, tier: Tier| {
        (u.first..(u.first + page_size).min(new_token))
            .map(move |t| EntryId::new(t, l))
            .filter(move |&e| state.tier_of(e) == Some(tier))
    };
    let migrate_out = pool[..demoted].iter().flat_map(|u| members(u, Tier::Hbm)).collect();
    let migrate_in = candidates[..promote_units]
        .iter()
        .flat_map(|u| members(u, Tier::Dram))
        .collect();
    let new_entry_tier = if reserved || room >= 1 { Tier::Hbm } else { Tier::Dram };
    ScheduleDecision {
        migrate_out,
        migrate_in,
        new_entry_tier,
    }
}

/// Entry-granularity foresight placement; see [`decide_page`].
pub fn decide_lookahead(
    state: &PlacementState,
    n: u32,
    l: u32,
    index: &LookaheadIndex,
    ratio: f64,
) -> ScheduleDecision {
    decide_page(state, n, l, index, 1, ratio)
}

/// Runs one policy over a trace, step by step.
pub struct PolicyRunner<'t> {
    kind: PolicyKind,
    trace: &'t DecodeTrace,
    window: Option<SlidingLookahead>,
}

impl<'t> PolicyRunner<'t> {
    pub fn new(kind: PolicyKind, trace: &'t DecodeTrace) -> Self {
        let window = match kind {
            PolicyKind::PageGranularity { window, .. } | PolicyKind::Lookahead { window, .. } => {
                Some(SlidingLookahead::new(trace, window))
            }
            _ => None,
        };
        Self { kind, trace, window }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn decide(&mut self, state: &PlacementState, access: &StepAccess) -> ScheduleDecision {
        let (n, l) = (access.n, access.l);
        match self.kind {
            PolicyKind::UnlimitedHbm => decide_unlimited(),
            PolicyKind::Static => decide_static(state),
            PolicyKind::ReactiveLru => decide_reactive(state, access),
            PolicyKind::Lookahead { ratio, .. } => {
                let index = self.window.as_mut().unwrap().at(self.trace, n, l);
                decide_lookahead(state, n, l, index, ratio)
            }
            PolicyKind::PageGranularity { page_size, ratio, .. } => {
                let index = self.window.as_mut().unwrap().at(self.trace, n, l);
                decide_page(state, n, l, index, page_size, ratio)
            }
        }
    }
}
