//! Tier residency of every KV entry.

use crate::error::SimError;
use crate::memory_model::{check_capacity, MemoryConfig, StepTraffic};
use crate::trace::{StepAccess, TraceHeader};

const AUDIT_INTERVAL: u64 = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    #[default]
    Hbm,
    Dram,
}

/// One token's KV entry at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryId {
    pub token: u32,
    pub layer: u32,
}

impl EntryId {
    pub fn new(token: u32, layer: u32) -> Self {
        Self { token, layer }
    }
}

/// Whether HBM capacity binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityMode {
    Enforced,
    /// Idealized HBM that holds everything.
    Unlimited,
}

/// Migrations and the new entry's tier for one step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScheduleDecision {
    /// HBM to DRAM.
    pub migrate_out: Vec<EntryId>,
    /// DRAM to HBM.
    pub migrate_in: Vec<EntryId>,
    pub new_entry_tier: Tier,
}

impl ScheduleDecision {
    pub fn write_only(tier: Tier) -> Self {
        Self {
            migrate_out: Vec::new(),
            migrate_in: Vec::new(),
            new_entry_tier: tier,
        }
    }
}

/// Result of charging one step's reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReadTraffic {
    pub hbm_read: u64,
    pub dram_read: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone)]
pub struct PlacementState {
    header: TraceHeader,
    mode: CapacityMode,
    cfg: MemoryConfig,
    weights_bytes: u64,
    tier: Vec<Option<Tier>>,
    last_touch: Vec<u64>,
    hbm_entries: u64,
    entries: u64,
    applied: u64,
}

impl PlacementState {
    /// Places weights in HBM, then prefill entries in `(token, layer)` order
    /// into HBM until the next one would not fit, the rest into DRAM.
    pub fn initial(header: &TraceHeader, cfg: &MemoryConfig, mode: CapacityMode) -> Result<Self, SimError> {
        header.validate()?;
        cfg.validate()?;
        let weights_bytes = header.weights_bytes();
        if mode == CapacityMode::Enforced && weights_bytes > cfg.hbm_capacity {
            return Err(SimError::Config(format!(
                "model weights ({weights_bytes} B) exceed HBM capacity ({} B)",
                cfg.hbm_capacity
            )));
        }
        if header.final_kv_bytes() > cfg.dram_capacity {
            return Err(SimError::Config(format!(
                "KV footprint ({} B) exceeds DRAM capacity ({} B)",
                header.final_kv_bytes(),
                cfg.dram_capacity
            )));
        }
        let slots = header.total_tokens() as usize * header.num_layers as usize;
        let mut state = Self {
            header: *header,
            mode,
            cfg: *cfg,
            weights_bytes,
            tier: vec![None; slots],
            last_touch: vec![0; slots],
            hbm_entries: 0,
            entries: 0,
            applied: 0,
        };
        for token in 0..header.prompt_len {
            for layer in 0..header.num_layers {
                let tier = if state.free_slots() > 0 { Tier::Hbm } else { Tier::Dram };
                state.insert(EntryId::new(token, layer), tier, 0);
            }
        }
        Ok(state)
    }

    fn idx(&self, e: EntryId) -> usize {
        e.token as usize * self.header.num_layers as usize + e.layer as usize
    }

    fn insert(&mut self, e: EntryId, tier: Tier, touch: u64) {
        let i = self.idx(e);
        self.tier[i] = Some(tier);
        self.last_touch[i] = touch;
        self.entries += 1;
        if tier == Tier::Hbm {
            self.hbm_entries += 1;
        }
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn mode(&self) -> CapacityMode {
        self.mode
    }

    pub fn tier_of(&self, e: EntryId) -> Option<Tier> {
        if e.token >= self.header.total_tokens() || e.layer >= self.header.num_layers {
            return None;
        }
        self.tier[self.idx(e)]
    }

    /// Global step ordinal of the last read (or the write) of `e`; 0 if never.
    pub fn last_touch(&self, e: EntryId) -> u64 {
        self.last_touch[self.idx(e)]
    }

    pub fn hbm_kv_bytes(&self) -> u64 {
        self.hbm_entries * self.header.entry_bytes
    }

    pub fn weights_bytes(&self) -> u64 {
        self.weights_bytes
    }

    pub fn hbm_resident_bytes(&self) -> u64 {
        self.weights_bytes + self.hbm_kv_bytes()
    }

    pub fn entry_count(&self) -> u64 {
        self.entries
    }

    pub fn hbm_entry_count(&self) -> u64 {
        self.hbm_entries
    }

    /// Whole KV entries that still fit in HBM.
    pub fn free_slots(&self) -> u64 {
        match self.mode {
            CapacityMode::Unlimited => u64::MAX,
            CapacityMode::Enforced => (self.cfg.hbm_capacity - self.hbm_resident_bytes()) / self.header.entry_bytes,
        }
    }

    /// Iterates HBM-resident entries among tokens `0..tokens`.
    pub fn hbm_residents(&self, tokens: u32) -> impl Iterator<Item = EntryId> + '_ {
        let layers = self.header.num_layers;
        (0..tokens).flat_map(move |t| {
            (0..layers)
                .map(move |l| EntryId::new(t, l))
                .filter(|&e| self.tier_of(e) == Some(Tier::Hbm))
        })
    }

    /// Global ordinal `n * L + l` used for recency.
    pub fn step_ordinal(&self, n: u32, l: u32) -> u64 {
        n as u64 * self.header.num_layers as u64 + l as u64
    }

    /// Applies a decision for step `(n, l)`: migrations first, then the write
    /// of token `P + n - 1` at layer `l`. Returns the migration and write
    /// part of the step's traffic. The state is untouched on error.
    pub fn apply_decision(&mut self, decision: &ScheduleDecision, n: u32, l: u32) -> Result<StepTraffic, SimError> {
        let new = EntryId::new(self.header.written_token(n), l);
        let logic = |entry, reason| SimError::Logic { n, l, entry, reason };
        if n == 0 || n > self.header.decode_len || l >= self.header.num_layers {
            return Err(logic(new, "step outside trace"));
        }
        if self.tier_of(new).is_some() {
            return Err(logic(new, "already written"));
        }
        for &e in &decision.migrate_out {
            if self.tier_of(e) != Some(Tier::Hbm) {
                return Err(logic(e, "migrated out but not resident in HBM"));
            }
        }
        for &e in &decision.migrate_in {
            if self.tier_of(e) != Some(Tier::Dram) {
                return Err(logic(e, "migrated in but not resident in DRAM"));
            }
        }
        for list in [&decision.migrate_out, &decision.migrate_in] {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                return Err(logic(w[0], "listed twice"));
            }
        }

        let outs = decision.migrate_out.len() as u64;
        let ins = decision.migrate_in.len() as u64;
        let new_hbm = u64::from(decision.new_entry_tier == Tier::Hbm);
        let after = self.hbm_entries + ins + new_hbm - outs;
        if self.mode == CapacityMode::Enforced {
            let resident = self.weights_bytes + after * self.header.entry_bytes;
            if !check_capacity(resident, &self.cfg).feasible {
                return Err(SimError::Infeasible {
                    n,
                    l,
                    resident,
                    capacity: self.cfg.hbm_capacity,
                });
            }
        }

        for &e in &decision.migrate_out {
            let i = self.idx(e);
            self.tier[i] = Some(Tier::Dram);
        }
        for &e in &decision.migrate_in {
            let i = self.idx(e);
            self.tier[i] = Some(Tier::Hbm);
        }
        self.hbm_entries = self.hbm_entries + ins - outs;
        let ordinal = self.step_ordinal(n, l);
        self.insert(new, decision.new_entry_tier, ordinal);

        self.applied += 1;
        if self.applied.is_multiple_of(AUDIT_INTERVAL) {
            self.audit()?;
        }

        let eb = self.header.entry_bytes;
        let (hbm_write, dram_write) = match decision.new_entry_tier {
            Tier::Hbm => (eb, 0),
            Tier::Dram => (0, eb),
        };
        Ok(StepTraffic {
            hbm_write,
            dram_write,
            migrate_out: outs * eb,
            migrate_in: ins * eb,
            ..Default::default()
        })
    }

    /// Recounts HBM residents from scratch and compares with the tracked value.
    pub fn audit(&self) -> Result<(), SimError> {
        let actual = self.tier.iter().filter(|t| **t == Some(Tier::Hbm)).count() as u64;
        if actual != self.hbm_entries {
            return Err(SimError::Audit {
                tracked: self.hbm_kv_bytes(),
                actual: actual * self.header.entry_bytes,
            });
        }
        Ok(())
    }

    /// Charges the reads of one step and marks the accessed entries touched.
    pub fn read_traffic(&mut self, access: &StepAccess) -> Result<ReadTraffic, SimError> {
        let ordinal = self.step_ordinal(access.n, access.l);
        let mut out = ReadTraffic::default();
        for &token in &access.accessed {
            let e = EntryId::new(token, access.l);
            match self.tier_of(e) {
                Some(Tier::Hbm) => out.hits += 1,
                Some(Tier::Dram) => out.misses += 1,
                None => {
                    return Err(SimError::Logic {
                        n: access.n,
                        l: access.l,
                        entry: e,
                        reason: "read before written",
                    })
                }
            }
            let i = self.idx(e);
            self.last_touch[i] = ordinal;
        }
        let eb = self.header.entry_bytes;
        out.hbm_read = self.header.weight_bytes_per_layer + out.hits * eb;
        out.dram_read = out.misses * eb;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EB: u64 = 4096;

    fn header(l: u32, p: u32, n: u32, w: u64) -> TraceHeader {
        TraceHeader {
            num_layers: l,
            prompt_len: p,
            decode_len: n,
            entry_bytes: EB,
            weight_bytes_per_layer: w,
        }
    }

    fn cfg(capacity: u64) -> MemoryConfig {
        MemoryConfig {
            hbm_capacity: capacity,
            ..MemoryConfig::default()
        }
    }

    #[test]
    fn prefill_fills_hbm_first() {
        let h = header(1, 5, 2, 1000);
        let s = PlacementState::initial(&h, &cfg(1000 + 3 * EB), CapacityMode::Enforced).unwrap();
        let tiers: Vec<_> = (0..5).map(|t| s.tier_of(EntryId::new(t, 0)).unwrap()).collect();
        assert_eq!(tiers, [Tier::Hbm, Tier::Hbm, Tier::Hbm, Tier::Dram, Tier::Dram]);
        assert_eq!(s.hbm_kv_bytes(), 3 * EB);
    }

    #[test]
    fn empty_prompt() {
        let s = PlacementState::initial(&header(2, 0, 2, 0), &cfg(1 << 20), CapacityMode::Enforced).unwrap();
        assert_eq!(s.entry_count(), 0);
        assert_eq!(s.hbm_kv_bytes(), 0);
    }

    #[test]
    fn weights_too_large() {
        let err = PlacementState::initial(&header(2, 4, 2, 1 << 20), &cfg(1 << 20), CapacityMode::Enforced);
        assert!(matches!(err, Err(SimError::Config(_))));
    }

    #[test]
    fn write_only_decision() {
        let mut s = PlacementState::initial(&header(1, 2, 2, 0), &cfg(10 * EB), CapacityMode::Enforced).unwrap();
        let t = s
            .apply_decision(&ScheduleDecision::write_only(Tier::Hbm), 1, 0)
            .unwrap();
        assert_eq!(t.hbm_write, EB);
        assert_eq!(t.migrate_in + t.migrate_out + t.dram_write, 0);
        assert_eq!(s.tier_of(EntryId::new(2, 0)), Some(Tier::Hbm));
    }

    #[test]
    fn swap_keeps_occupancy() {
        let h = header(1, 4, 1, 0);
        let mut s = PlacementState::initial(&h, &cfg(3 * EB), CapacityMode::Enforced).unwrap();
        // tokens 0..2 in HBM, token 3 in DRAM
        let d = ScheduleDecision {
            migrate_out: vec![EntryId::new(0, 0), EntryId::new(1, 0)],
            migrate_in: vec![EntryId::new(3, 0)],
            new_entry_tier: Tier::Hbm,
        };
        let t = s.apply_decision(&d, 1, 0).unwrap();
        assert_eq!(t.migrate_out, 2 * EB);
        assert_eq!(t.migrate_in, EB);
        assert_eq!(s.hbm_kv_bytes(), 3 * EB);
    }

    #[test]
    fn over_capacity_is_error() {
        let h = header(1, 2, 1, 0);
        let mut s = PlacementState::initial(&h, &cfg(2 * EB), CapacityMode::Enforced).unwrap();
        let before = s.clone();
        let err = s
            .apply_decision(&ScheduleDecision::write_only(Tier::Hbm), 1, 0)
            .unwrap_err();
        assert!(matches!(err, SimError::Infeasible { resident, .. } if resident == 3 * EB));
        assert_eq!(s.tier_of(EntryId::new(2, 0)), None);
        assert_eq!(s.hbm_kv_bytes(), before.hbm_kv_bytes());
    }

    #[test]
    fn bad_migrations_are_logic_errors() {
        let h = header(1, 4, 1, 0);
        let mut s = PlacementState::initial(&h, &cfg(2 * EB), CapacityMode::Enforced).unwrap();
        let d = ScheduleDecision {
            migrate_in: vec![EntryId::new(0, 0)],
            ..ScheduleDecision::write_only(Tier::Dram)
        };
        assert!(matches!(s.apply_decision(&d, 1, 0), Err(SimError::Logic { .. })));
        let d = ScheduleDecision {
            migrate_out: vec![EntryId::new(3, 0)],
            ..ScheduleDecision::write_only(Tier::Dram)
        };
        assert!(matches!(s.apply_decision(&d, 1, 0), Err(SimError::Logic { .. })));
        let d = ScheduleDecision {
            migrate_out: vec![EntryId::new(0, 0), EntryId::new(0, 0)],
            ..ScheduleDecision::write_only(Tier::Dram)
        };
        assert!(matches!(s.apply_decision(&d, 1, 0), Err(SimError::Logic { .. })));
        s.apply_decision(&ScheduleDecision::write_only(Tier::Dram), 1, 0)
            .unwrap();
        assert!(matches!(
            s.apply_decision(&ScheduleDecision::write_only(Tier::Dram), 1, 0),
            Err(SimError::Logic {
                reason: "already written",
                ..
            })
        ));
    }

    #[test]
    fn read_counts() {
        let h = header(1, 4, 1, 0);
        let mut s = PlacementState::initial(&h, &cfg(3 * EB), CapacityMode::Enforced).unwrap();
        s.apply_decision(&ScheduleDecision::write_only(Tier::Dram), 1, 0)
            .unwrap();
        let access = StepAccess {
            n: 1,
            l: 0,
            accessed: vec![0, 1, 2, 3],
        };
        let r = s.read_traffic(&access).unwrap();
        assert_eq!((r.hbm_read, r.dram_read, r.hits, r.misses), (12288, 4096, 3, 1));
        assert_eq!(s.last_touch(EntryId::new(3, 0)), s.step_ordinal(1, 0));
    }

    #[test]
    fn weights_charged_to_hbm_reads() {
        let h = header(1, 4, 1, 777);
        let mut s = PlacementState::initial(&h, &cfg(777 + 10 * EB), CapacityMode::Enforced).unwrap();
        let r = s
            .read_traffic(&StepAccess {
                n: 1,
                l: 0,
                accessed: vec![0],
            })
            .unwrap();
        assert_eq!(r.hbm_read, 777 + EB);
    }

    proptest! {
        // Random feasible decisions never drop entries and respect HBM capacity.
        #[test]
        fn conservation(layers in 1u32..4, prompt in 0u32..20, decode in 1u32..15,
                        cap_slots in 1u64..40, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let h = header(layers, prompt, decode, 0);
            let c = MemoryConfig { dram_capacity: u64::MAX, ..cfg(cap_slots * EB) };
            let mut s = PlacementState::initial(&h, &c, CapacityMode::Enforced).unwrap();
            for n in 1..=decode {
                for l in 0..layers {
                    let tokens = h.prompt_len + n - 1;
                    let mut outs = Vec::new();
                    let mut ins = Vec::new();
                    for t in 0..tokens {
                        for ll in 0..layers {
                            let e = EntryId::new(t, ll);
                            if rng.gen_bool(0.2) {
                                match s.tier_of(e) {
                                    Some(Tier::Hbm) => outs.push(e),
                                    Some(Tier::Dram) => ins.push(e),
                                    None => {}
                                }
                            }
                        }
                    }
                    let tier = if rng.gen_bool(0.5) { Tier::Hbm } else { Tier::Dram };
                    let d = ScheduleDecision { migrate_out: outs, migrate_in: ins, new_entry_tier: tier };
                    let before = s.entry_count();
                    match s.apply_decision(&d, n, l) {
                        Ok(_) => prop_assert_eq!(s.entry_count(), before + 1),
                        Err(SimError::Infeasible { .. }) => {
                            s.apply_decision(&ScheduleDecision::write_only(Tier::Dram), n, l).unwrap();
                            prop_assert_eq!(s.entry_count(), before + 1);
                        }
                        Err(e) => return Err(TestCaseError::fail(e.to_string())),
                    }
                    prop_assert!(s.hbm_resident_bytes() <= c.hbm_capacity);
                    s.audit().unwrap();
                }
            }
            prop_assert_eq!(s.entry_count(), (h.total_tokens() * layers) as u64);
        }
    }
}
