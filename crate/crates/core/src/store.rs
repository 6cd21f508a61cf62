//! Per-node metadata repository and telemetry/decision broker.
//!
//! Key namespace:
//!
//! | prefix                           | contents                              |
//! |----------------------------------|---------------------------------------|
//! | `metrics/<instance>/<metric>`    | published controller telemetry        |
//! | `futures/<FutureId>`             | compact future summaries              |
//! | `sessions/<SessionId>/state/<n>` | managed session state (canonical text)|
//! | `sessions/<SessionId>/kvcache`   | K,V-cache residency                   |
//! | `sessions/<SessionId>/<field>`   | driver-published session facts        |
//! | `policy/<instance>`              | the instance's command mailbox        |
//! | `nodes/<node>/<field>`           | node resource ledger                  |
//!
//! Mailboxes are kept apart from the key/value entries but are addressed by
//! the `policy/` namespace in journals and dumps.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use dashmap::DashMap;
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::model::{ControlCommand, Location, NodeId, Payload, SimTime};

pub const NAMESPACES: [&str; 5] = ["metrics", "futures", "sessions", "policy", "nodes"];

/// The controller-facing store interface. Every operation completes locally.
pub trait NodeStore: Send + Sync {
    fn node(&self) -> NodeId;

    /// Writes `value`; returns the new version (previous + 1).
    fn put(&self, key: &str, value: Payload) -> Result<u64>;

    fn get(&self, key: &str) -> Option<(Payload, u64)>;

    /// Writes only if the key's current version equals `expected_version`
    /// (absent keys have version 0).
    fn compare_and_set(&self, key: &str, expected_version: u64, value: Payload) -> Result<bool>;

    /// Deletes the value but keeps the version counter, so a later put
    /// continues the sequence.
    fn remove(&self, key: &str) -> bool;

    /// Point-in-time-per-key view of every live entry under `prefix`.
    fn snapshot(&self, prefix: &str) -> BTreeMap<String, (Payload, u64)> {
        let mut out = BTreeMap::new();
        self.scan(prefix, &mut |k, v, ver| {
            out.insert(k.to_string(), (v.clone(), ver));
        });
        out
    }

    /// Visits every live entry under `prefix` in unspecified order.
    fn scan(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Payload, u64));

    fn register_instance(&self, instance: Location);

    fn deregister_instance(&self, instance: &Location) -> bool;

    fn instances(&self) -> Vec<Location>;

    fn push_command(&self, instance: &Location, cmd: ControlCommand) -> Result<()>;

    fn drain_commands(&self, instance: &Location) -> Result<Vec<ControlCommand>>;

    /// Stamps subsequent journal records.
    fn set_time(&self, _now: SimTime) {}
}

pub fn check_key(key: &str) -> Result<&'static str> {
    let (ns, rest) = key
        .split_once('/')
        .ok_or_else(|| Error::Parse(format!("store key `{key}` has no namespace")))?;
    let ns = NAMESPACES
        .iter()
        .find(|n| **n == ns)
        .ok_or_else(|| Error::Parse(format!("store key `{key}`: unknown namespace `{ns}`")))?;
    if rest.is_empty() || rest.split('/').any(str::is_empty) || key.chars().any(char::is_whitespace)
    {
        return Err(Error::Parse(format!("store key `{key}` is malformed")));
    }
    Ok(ns)
}

#[derive(Debug, Clone)]
struct Entry {
    value: Option<Payload>,
    version: u64,
}

#[derive(Debug, Default)]
struct Mailbox {
    pending: VecDeque<ControlCommand>,
    consumed: u64,
}

/// In-process store: one concurrent map per namespace, per-key atomicity,
/// no lock spanning keys.
pub struct MemStore {
    node: NodeId,
    spaces: [DashMap<String, Entry>; 5],
    mailboxes: DashMap<Location, Mailbox>,
    journal: Mutex<Option<Box<dyn Write + Send>>>,
    now: AtomicU64,
}

impl MemStore {
    pub fn new(node: NodeId) -> Self {
        MemStore {
            node,
            spaces: Default::default(),
            mailboxes: DashMap::new(),
            journal: Mutex::new(None),
            now: AtomicU64::new(0),
        }
    }

    /// Appends one `key\tversion\tdigest\ttime` line per successful write.
    pub fn with_journal(self, sink: Box<dyn Write + Send>) -> Self {
        *self.journal.lock() = Some(sink);
        self
    }

    fn space(&self, ns: &str) -> &DashMap<String, Entry> {
        let i = NAMESPACES
            .iter()
            .position(|n| *n == ns)
            .expect("checked namespace");
        &self.spaces[i]
    }

    fn journal(&self, key: &str, version: u64, value: Option<&Payload>) {
        let mut j = self.journal.lock();
        if let Some(sink) = j.as_mut() {
            let digest = value
                .map(|v| v.digest().short())
                .unwrap_or_else(|| "-".into());
            let now = SimTime(self.now.load(Ordering::Relaxed));
            // Journal failures must not take the data plane down.
            let _ = writeln!(sink, "{key}\t{version}\t{digest}\t{now}");
        }
    }

    /// Number of commands ever consumed from `instance`'s mailbox.
    pub fn mailbox_cursor(&self, instance: &Location) -> Option<u64> {
        self.mailboxes.get(instance).map(|m| m.consumed)
    }
}

impl NodeStore for MemStore {
    fn node(&self) -> NodeId {
        self.node
    }

    fn put(&self, key: &str, value: Payload) -> Result<u64> {
        let ns = check_key(key)?;
        let version = {
            let mut e = self.space(ns).entry(key.to_string()).or_insert(Entry {
                value: None,
                version: 0,
            });
            e.version += 1;
            e.value = Some(value.clone());
            e.version
        };
        self.journal(key, version, Some(&value));
        Ok(version)
    }

    fn get(&self, key: &str) -> Option<(Payload, u64)> {
        let ns = check_key(key).ok()?;
        let e = self.space(ns).get(key)?;
        e.value.clone().map(|v| (v, e.version))
    }

    fn compare_and_set(&self, key: &str, expected_version: u64, value: Payload) -> Result<bool> {
        let ns = check_key(key)?;
        let version = {
            let mut e = self.space(ns).entry(key.to_string()).or_insert(Entry {
                value: None,
                version: 0,
            });
            if e.version != expected_version {
                return Ok(false);
            }
            e.version += 1;
            e.value = Some(value.clone());
            e.version
        };
        self.journal(key, version, Some(&value));
        Ok(true)
    }

    fn remove(&self, key: &str) -> bool {
        let Ok(ns) = check_key(key) else { return false };
        let removed = match self.space(ns).get_mut(key) {
            Some(mut e) if e.value.is_some() => {
                e.value = None;
                Some(e.version)
            }
            _ => None,
        };
        if let Some(v) = removed {
            self.journal(key, v, None);
        }
        removed.is_some()
    }

    fn scan(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Payload, u64)) {
        let spaces: Vec<&DashMap<String, Entry>> = match prefix.split_once('/') {
            Some((ns, _)) => match NAMESPACES.iter().position(|n| *n == ns) {
                Some(i) => vec![&self.spaces[i]],
                None => return,
            },
            None => self.spaces.iter().collect(),
        };
        for space in spaces {
            for e in space.iter() {
                if let Some(v) = &e.value {
                    if e.key().starts_with(prefix) {
                        visit(e.key(), v, e.version);
                    }
                }
            }
        }
    }

    fn register_instance(&self, instance: Location) {
        self.mailboxes.entry(instance).or_default();
    }

    fn deregister_instance(&self, instance: &Location) -> bool {
        self.mailboxes.remove(instance).is_some()
    }

    fn instances(&self) -> Vec<Location> {
        let mut v: Vec<Location> = self.mailboxes.iter().map(|e| e.key().clone()).collect();
        v.sort();
        v
    }

    fn push_command(&self, instance: &Location, cmd: ControlCommand) -> Result<()> {
        let mut mb = self
            .mailboxes
            .get_mut(instance)
            .ok_or_else(|| Error::UnknownInstance(instance.clone()))?;
        mb.pending.push_back(cmd);
        Ok(())
    }

    fn drain_commands(&self, instance: &Location) -> Result<Vec<ControlCommand>> {
        let mut mb = self
            .mailboxes
            .get_mut(instance)
            .ok_or_else(|| Error::UnknownInstance(instance.clone()))?;
        let out: Vec<ControlCommand> = mb.pending.drain(..).collect();
        mb.consumed += out.len() as u64;
        Ok(out)
    }

    fn set_time(&self, now: SimTime) {
        self.now.store(now.0, Ordering::Relaxed);
    }
}
