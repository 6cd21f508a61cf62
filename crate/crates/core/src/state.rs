//! Managed session state and simulated K,V-cache residency.
//!
//! Each instance owns a [`StateLayer`]. A session's managed lists and dicts
//! live at exactly one home instance; migration extracts them as a
//! [`SessionStateBundle`] at the source and installs them at the
//! destination with versions intact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::model::{ContentDigest, Location, Payload, SessionId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    List,
    Dict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEntries {
    List(Vec<Payload>),
    Dict(BTreeMap<String, Payload>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagedState {
    pub session: SessionId,
    pub name: String,
    pub entries: StateEntries,
    pub home: Location,
    pub version: u64,
}

impl ManagedState {
    fn new(session: SessionId, name: &str, kind: StateKind, home: Location) -> Self {
        ManagedState {
            session,
            name: name.to_string(),
            entries: match kind {
                StateKind::List => StateEntries::List(Vec::new()),
                StateKind::Dict => StateEntries::Dict(BTreeMap::new()),
            },
            home,
            version: 1,
        }
    }

    pub fn kind(&self) -> StateKind {
        match self.entries {
            StateEntries::List(_) => StateKind::List,
            StateEntries::Dict(_) => StateKind::Dict,
        }
    }

    pub fn len(&self) -> usize {
        match &self.entries {
            StateEntries::List(v) => v.len(),
            StateEntries::Dict(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, value: Payload) -> Result<()> {
        match &mut self.entries {
            StateEntries::List(v) => v.push(value),
            StateEntries::Dict(_) => {
                return Err(Error::InvariantViolation(format!(
                    "`{}` is a dict",
                    self.name
                )));
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Payload) -> Result<()> {
        match &mut self.entries {
            StateEntries::Dict(m) => {
                m.insert(key.into(), value);
            }
            StateEntries::List(_) => {
                return Err(Error::InvariantViolation(format!(
                    "`{}` is a list",
                    self.name
                )));
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn list(&self) -> &[Payload] {
        match &self.entries {
            StateEntries::List(v) => v,
            StateEntries::Dict(_) => &[],
        }
    }

    pub fn get(&self, key: &str) -> Option<&Payload> {
        match &self.entries {
            StateEntries::Dict(m) => m.get(key),
            StateEntries::List(_) => None,
        }
    }

    pub fn digest(&self) -> ContentDigest {
        canonical::digest(&(&self.name, &self.entries, self.version))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    Device,
    FarMemory,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCacheEntry {
    pub session: SessionId,
    pub instance: Location,
    pub residency: Residency,
    pub size: u64,
    pub pinned_until: Option<SimTime>,
    last_use: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "hint")]
pub enum KvHint {
    Retain { session: SessionId, until: SimTime },
    Offload { session: SessionId },
    Drop { session: SessionId },
}

impl KvHint {
    pub fn session(&self) -> SessionId {
        match self {
            KvHint::Retain { session, .. }
            | KvHint::Offload { session }
            | KvHint::Drop { session } => *session,
        }
    }
}

/// Service-time multipliers by residency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvModel {
    pub hit_factor: f64,
    pub warm_factor: f64,
    /// Device capacity per instance in abstract units.
    pub capacity: u64,
    /// Footprint of one session's cache.
    pub entry_size: u64,
}

impl Default for KvModel {
    fn default() -> Self {
        KvModel {
            hit_factor: 0.3,
            warm_factor: 0.7,
            capacity: 8,
            entry_size: 1,
        }
    }
}

impl KvModel {
    pub fn factor(&self, r: Residency) -> f64 {
        match r {
            Residency::Device => self.hit_factor,
            Residency::FarMemory => self.warm_factor,
            Residency::Dropped => 1.0,
        }
    }
}

/// Device-resident caches with LRU eviction that never evicts an entry
/// pinned past the current time.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    owner: Option<Location>,
    capacity: u64,
    entries: BTreeMap<SessionId, KvCacheEntry>,
    clock: u64,
}

impl KvCache {
    pub fn new(owner: Location, capacity: u64) -> Self {
        KvCache {
            owner: Some(owner),
            capacity,
            entries: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn residency(&self, session: SessionId) -> Residency {
        self.entries
            .get(&session)
            .map_or(Residency::Dropped, |e| e.residency)
    }

    pub fn entry(&self, session: SessionId) -> Option<&KvCacheEntry> {
        self.entries.get(&session)
    }

    pub fn device_usage(&self) -> u64 {
        self.entries
            .values()
            .filter(|e| e.residency == Residency::Device)
            .map(|e| e.size)
            .sum()
    }

    /// Marks the session's cache device-resident after a request and evicts
    /// least-recently-used unpinned entries while over capacity. Returns the
    /// evicted sessions.
    pub fn touch(&mut self, session: SessionId, size: u64, now: SimTime) -> Vec<SessionId> {
        self.clock += 1;
        let owner = self
            .owner
            .clone()
            .unwrap_or_else(|| Location::new("unknown", 0));
        let e = self.entries.entry(session).or_insert(KvCacheEntry {
            session,
            instance: owner,
            residency: Residency::Device,
            size,
            pinned_until: None,
            last_use: 0,
        });
        e.residency = Residency::Device;
        e.size = size;
        e.last_use = self.clock;
        self.evict(now, Some(session))
    }

    fn evict(&mut self, now: SimTime, keep: Option<SessionId>) -> Vec<SessionId> {
        let mut evicted = Vec::new();
        while self.device_usage() > self.capacity {
            let victim = self
                .entries
                .values()
                .filter(|e| e.residency == Residency::Device)
                .filter(|e| Some(e.session) != keep)
                .filter(|e| e.pinned_until.is_none_or(|t| t <= now))
                .min_by_key(|e| e.last_use)
                .map(|e| e.session);
            match victim {
                Some(s) => {
                    self.entries.remove(&s);
                    evicted.push(s);
                }
                None => break,
            }
        }
        evicted
    }

    /// Applies a retention hint; false if the session has no entry here.
    pub fn hint(&mut self, hint: &KvHint, now: SimTime) -> bool {
        let s = hint.session();
        let Some(e) = self.entries.get_mut(&s) else {
            return false;
        };
        match hint {
            KvHint::Retain { until, .. } => e.pinned_until = Some(*until),
            KvHint::Offload { .. } => {
                e.residency = Residency::FarMemory;
                e.pinned_until = None;
            }
            KvHint::Drop { .. } => {
                self.entries.remove(&s);
            }
        }
        self.evict(now, None);
        true
    }

    pub fn take(&mut self, session: SessionId) -> Option<KvCacheEntry> {
        self.entries.remove(&session)
    }

    /// Installs an entry that moved here. Only far-memory copies survive the
    /// move; a device copy is dropped at the source and starts cold here.
    pub fn adopt(&mut self, mut entry: KvCacheEntry) {
        if entry.residency != Residency::FarMemory {
            return;
        }
        if let Some(o) = &self.owner {
            entry.instance = o.clone();
        }
        self.clock += 1;
        entry.last_use = self.clock;
        self.entries.insert(entry.session, entry);
    }
}

/// Everything about one session that moves with a migration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStateBundle {
    pub session: SessionId,
    pub states: Vec<ManagedState>,
    pub kv: Option<KvCacheEntry>,
}

#[derive(Debug, Clone)]
pub struct StateLayer {
    owner: Location,
    states: BTreeMap<(SessionId, String), ManagedState>,
    moved: BTreeMap<SessionId, Location>,
    pub kv: KvCache,
}

impl StateLayer {
    pub fn new(owner: Location, kv_capacity: u64) -> Self {
        StateLayer {
            kv: KvCache::new(owner.clone(), kv_capacity),
            owner,
            states: BTreeMap::new(),
            moved: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &Location {
        &self.owner
    }

    /// Handle over the authoritative copy, created empty on first access.
    /// Only the home instance may access it.
    pub fn state_access(
        &mut self,
        session: SessionId,
        name: &str,
        kind: StateKind,
        accessor: &Location,
    ) -> Result<&mut ManagedState> {
        if accessor != &self.owner {
            return Err(Error::StateAccess {
                session,
                instance: accessor.clone(),
                home: self.owner.clone(),
            });
        }
        if let Some(home) = self.moved.get(&session) {
            return Err(Error::StateAccess {
                session,
                instance: accessor.clone(),
                home: home.clone(),
            });
        }
        let owner = self.owner.clone();
        let st = self
            .states
            .entry((session, name.to_string()))
            .or_insert_with(|| ManagedState::new(session, name, kind, owner));
        if st.kind() != kind {
            return Err(Error::InvariantViolation(format!(
                "state `{name}` of {session} is a {:?}, not a {kind:?}",
                st.kind()
            )));
        }
        Ok(st)
    }

    pub fn has_session(&self, session: SessionId) -> bool {
        self.states.keys().any(|(s, _)| *s == session) || self.kv.entry(session).is_some()
    }

    pub fn states_of(&self, session: SessionId) -> impl Iterator<Item = &ManagedState> {
        self.states
            .range((session, String::new())..)
            .take_while(move |((s, _), _)| *s == session)
            .map(|(_, st)| st)
    }

    /// Removes the session's state and cache entry for transfer to `to`.
    /// Later accesses here fail with the new home.
    pub fn extract(&mut self, session: SessionId, to: &Location) -> SessionStateBundle {
        let keys: Vec<(SessionId, String)> = self
            .states
            .range((session, String::new())..)
            .take_while(|((s, _), _)| *s == session)
            .map(|(k, _)| k.clone())
            .collect();
        let states = keys
            .into_iter()
            .filter_map(|k| self.states.remove(&k))
            .collect();
        self.moved.insert(session, to.clone());
        SessionStateBundle {
            session,
            states,
            kv: self.kv.take(session),
        }
    }

    pub fn install(&mut self, bundle: SessionStateBundle) {
        self.moved.remove(&bundle.session);
        for mut st in bundle.states {
            st.home = self.owner.clone();
            self.states.insert((st.session, st.name.clone()), st);
        }
        if let Some(kv) = bundle.kv {
            self.kv.adopt(kv);
        }
    }

    /// Canonical text dump of a session's managed state.
    pub fn dump(&self, session: SessionId) -> String {
        let states: Vec<(&String, &StateEntries, u64)> = self
            .states_of(session)
            .map(|s| (&s.name, &s.entries, s.version))
            .collect();
        canonical::to_text(&(session, states))
    }
}

/// Moves a session's state between two layers; see [`StateLayer::extract`].
pub fn migrate_state(session: SessionId, from: &mut StateLayer, to: &mut StateLayer) -> Result<()> {
    let dest = to.owner().clone();
    let bundle = from.extract(session, &dest);
    to.install(bundle);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn home() -> Location {
        Location::new("llm", 0)
    }

    #[test]
    fn first_access_creates_empty_version_one() {
        let mut l = StateLayer::new(home(), 4);
        let st = l
            .state_access(SessionId(1), "history", StateKind::List, &home())
            .unwrap();
        assert!(st.is_empty());
        assert_eq!(st.version, 1);
    }

    #[test]
    fn read_your_writes_at_home() {
        let mut l = StateLayer::new(home(), 4);
        l.state_access(SessionId(1), "h", StateKind::List, &home())
            .unwrap()
            .push(Payload::text("a"))
            .unwrap();
        let st = l
            .state_access(SessionId(1), "h", StateKind::List, &home())
            .unwrap();
        assert_eq!(st.list(), &[Payload::text("a")]);
        assert_eq!(st.version, 2);
    }

    #[test]
    fn access_from_wrong_instance_fails() {
        let mut l = StateLayer::new(home(), 4);
        let err = l
            .state_access(SessionId(1), "h", StateKind::Dict, &Location::new("llm", 1))
            .unwrap_err();
        assert!(matches!(err, Error::StateAccess { .. }));
    }

    #[test]
    fn empty_session_migration_moves_nothing() {
        let mut a = StateLayer::new(home(), 4);
        let mut b = StateLayer::new(Location::new("llm", 1), 4);
        migrate_state(SessionId(3), &mut a, &mut b).unwrap();
        assert!(b.states_of(SessionId(3)).next().is_none());
    }

    #[test]
    fn list_migration_preserves_entries_and_versions() {
        let b_loc = Location::new("llm", 1);
        let mut a = StateLayer::new(home(), 4);
        let mut b = StateLayer::new(b_loc.clone(), 4);
        let s = SessionId(3);
        {
            let st = a.state_access(s, "h", StateKind::List, &home()).unwrap();
            for v in ["x", "y", "z"] {
                st.push(Payload::text(v)).unwrap();
            }
        }
        let before: Vec<ContentDigest> = a.states_of(s).map(|st| st.digest()).collect();
        migrate_state(s, &mut a, &mut b).unwrap();
        let after: Vec<ContentDigest> = b.states_of(s).map(|st| st.digest()).collect();
        assert_eq!(before, after);
        let st = b.state_access(s, "h", StateKind::List, &b_loc).unwrap();
        assert_eq!(st.len(), 3);
        assert_eq!(st.version, 4);
        assert_eq!(st.home, b_loc);
        assert!(a.state_access(s, "h", StateKind::List, &home()).is_err());
    }

    #[test]
    fn kv_hints_change_residency() {
        let model = KvModel::default();
        let mut kv = KvCache::new(home(), 4);
        let s = SessionId(1);
        kv.touch(s, 1, SimTime(0));
        assert!(kv.hint(
            &KvHint::Retain {
                session: s,
                until: SimTime(100)
            },
            SimTime(0)
        ));
        assert_eq!(model.factor(kv.residency(s)), 0.3);
        assert!(kv.hint(&KvHint::Drop { session: s }, SimTime(0)));
        assert_eq!(model.factor(kv.residency(s)), 1.0);
        assert!(!kv.hint(
            &KvHint::Offload {
                session: SessionId(9)
            },
            SimTime(0)
        ));
    }

    #[test]
    fn lru_skips_pinned_entry() {
        // capacity 2; touch s1, s2, s3 in order with s1 pinned: the oldest
        // unpinned entry is s2, so s2 goes.
        let mut kv = KvCache::new(home(), 2);
        kv.touch(SessionId(1), 1, SimTime(0));
        kv.hint(
            &KvHint::Retain {
                session: SessionId(1),
                until: SimTime(1_000),
            },
            SimTime(0),
        );
        kv.touch(SessionId(2), 1, SimTime(1));
        let evicted = kv.touch(SessionId(3), 1, SimTime(2));
        assert_eq!(evicted, vec![SessionId(2)]);
        assert_eq!(kv.residency(SessionId(1)), Residency::Device);
        assert_eq!(kv.residency(SessionId(3)), Residency::Device);
        // once the pin expires plain LRU resumes
        let evicted = kv.touch(SessionId(4), 1, SimTime(2_000));
        assert_eq!(evicted, vec![SessionId(1)]);
    }

    #[test]
    fn device_copy_starts_cold_after_move_far_copy_stays_warm() {
        let mut a = StateLayer::new(home(), 4);
        let mut b = StateLayer::new(Location::new("llm", 1), 4);
        a.kv.touch(SessionId(1), 1, SimTime(0));
        a.kv.touch(SessionId(2), 1, SimTime(0));
        a.kv.hint(
            &KvHint::Offload {
                session: SessionId(2),
            },
            SimTime(0),
        );
        migrate_state(SessionId(1), &mut a, &mut b).unwrap();
        migrate_state(SessionId(2), &mut a, &mut b).unwrap();
        assert_eq!(b.kv.residency(SessionId(1)), Residency::Dropped);
        assert_eq!(b.kv.residency(SessionId(2)), Residency::FarMemory);
        assert_eq!(a.kv.residency(SessionId(1)), Residency::Dropped);
    }
}
