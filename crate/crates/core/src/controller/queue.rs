use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use crate::model::{FutureId, SessionId};

type Key = (Reverse<i32>, u64, FutureId);

#[derive(Debug, Clone)]
struct Entry {
    key: Key,
    session: SessionId,
    method: String,
}

/// Queued futures ordered by (priority desc, enqueue order asc), plus the
/// running set and the per-session fences stateful agents need.
#[derive(Debug, Default, Clone)]
pub struct LocalQueue {
    order: BTreeSet<Key>,
    entries: BTreeMap<FutureId, Entry>,
    running: BTreeMap<FutureId, SessionId>,
    running_per_session: BTreeMap<SessionId, u32>,
    next_seq: u64,
}

impl LocalQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn running_len(&self) -> usize {
        self.running.len()
    }

    pub fn is_queued(&self, id: FutureId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn is_running(&self, id: FutureId) -> bool {
        self.running.contains_key(&id)
    }

    pub fn session_running(&self, session: SessionId) -> bool {
        self.running_per_session
            .get(&session)
            .is_some_and(|n| *n > 0)
    }

    pub fn push(&mut self, id: FutureId, session: SessionId, method: &str, priority: i32) {
        assert!(!self.running.contains_key(&id), "{id} is already running");
        self.remove(id);
        let key = (Reverse(priority), self.next_seq, id);
        self.next_seq += 1;
        self.order.insert(key);
        self.entries.insert(
            id,
            Entry {
                key,
                session,
                method: method.to_string(),
            },
        );
    }

    pub fn remove(&mut self, id: FutureId) -> bool {
        match self.entries.remove(&id) {
            Some(e) => {
                self.order.remove(&e.key);
                true
            }
            None => false,
        }
    }

    /// Changes a queued future's priority, keeping its enqueue position
    /// among equals.
    pub fn reprioritize(&mut self, id: FutureId, priority: i32) -> bool {
        let Some(e) = self.entries.get_mut(&id) else {
            return false;
        };
        if e.key.0 .0 == priority {
            return false;
        }
        self.order.remove(&e.key);
        e.key.0 = Reverse(priority);
        self.order.insert(e.key);
        true
    }

    /// Queued ids in dequeue order.
    pub fn iter(&self) -> impl Iterator<Item = FutureId> + '_ {
        self.order.iter().map(|k| k.2)
    }

    pub fn queued_of(&self, session: SessionId) -> Vec<FutureId> {
        self.iter()
            .filter(|id| self.entries[id].session == session)
            .collect()
    }

    pub fn head(&self) -> Option<FutureId> {
        self.order.iter().next().map(|k| k.2)
    }

    pub fn mark_done(&mut self, id: FutureId) {
        if let Some(s) = self.running.remove(&id) {
            if let Some(n) = self.running_per_session.get_mut(&s) {
                *n -= 1;
                if *n == 0 {
                    self.running_per_session.remove(&s);
                }
            }
        }
    }

    fn start(&mut self, id: FutureId) {
        let e = self.entries.remove(&id).expect("queued");
        self.order.remove(&e.key);
        self.running.insert(id, e.session);
        *self.running_per_session.entry(e.session).or_insert(0) += 1;
    }

    /// Pops the next eligible future, or for batchable agents up to
    /// `max_batch` queued futures sharing the head's method, and marks them
    /// running.
    ///
    /// With `stateful`, a session with a running future is fenced and
    /// `earlier_pending(session, id)` must report whether an older future of
    /// the same session is still waiting here.
    pub fn schedule_next(
        &mut self,
        stateful: bool,
        max_batch: usize,
        earlier_pending: impl Fn(SessionId, FutureId) -> bool,
    ) -> Option<Vec<FutureId>> {
        let eligible = |q: &LocalQueue, id: FutureId, taken: &[FutureId]| {
            if !stateful {
                return true;
            }
            let s = q.entries[&id].session;
            !q.session_running(s)
                && !earlier_pending(s, id)
                && !taken.iter().any(|t| q.entries[t].session == s)
        };
        let head = self.iter().find(|id| eligible(self, *id, &[]))?;
        let mut batch = vec![head];
        if max_batch > 1 {
            let method = self.entries[&head].method.clone();
            let candidates: Vec<FutureId> = self
                .iter()
                .filter(|id| *id != head && self.entries[id].method == method)
                .collect();
            for id in candidates {
                if batch.len() >= max_batch {
                    break;
                }
                if eligible(self, id, &batch) {
                    batch.push(id);
                }
            }
        }
        for id in &batch {
            self.start(*id);
        }
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(n: u64) -> FutureId {
        FutureId::new(0, n)
    }

    #[test]
    fn priority_then_fifo() {
        let mut q = LocalQueue::new();
        q.push(f(1), SessionId(1), "m", 0);
        q.push(f(2), SessionId(2), "m", 5);
        assert_eq!(q.schedule_next(false, 1, |_, _| false), Some(vec![f(2)]));
        let mut q = LocalQueue::new();
        q.push(f(1), SessionId(1), "m", 0);
        q.push(f(2), SessionId(2), "m", 0);
        assert_eq!(q.schedule_next(false, 1, |_, _| false), Some(vec![f(1)]));
    }

    #[test]
    fn batches_respect_cap() {
        let mut q = LocalQueue::new();
        for i in 0..3 {
            q.push(f(i), SessionId(i), "m", 0);
        }
        assert_eq!(
            q.schedule_next(false, 2, |_, _| false),
            Some(vec![f(0), f(1)])
        );
        assert_eq!(q.schedule_next(false, 2, |_, _| false), Some(vec![f(2)]));
        assert_eq!(q.schedule_next(false, 2, |_, _| false), None);
    }

    #[test]
    fn batches_only_same_method() {
        let mut q = LocalQueue::new();
        q.push(f(0), SessionId(0), "a", 0);
        q.push(f(1), SessionId(1), "b", 0);
        q.push(f(2), SessionId(2), "a", 0);
        assert_eq!(
            q.schedule_next(false, 4, |_, _| false),
            Some(vec![f(0), f(2)])
        );
    }

    #[test]
    fn stateful_fence_blocks_second_of_session() {
        let mut q = LocalQueue::new();
        q.push(f(0), SessionId(7), "m", 0);
        q.push(f(1), SessionId(7), "m", 9);
        q.push(f(2), SessionId(8), "m", 0);
        // f1 has higher priority but f0 of the same session is older.
        let older = |s: SessionId, id: FutureId| s == SessionId(7) && id == f(1);
        assert_eq!(q.schedule_next(true, 1, older), Some(vec![f(0)]));
        // session 7 now running: f1 fenced, f2 goes
        assert_eq!(q.schedule_next(true, 1, |_, _| false), Some(vec![f(2)]));
        assert_eq!(q.schedule_next(true, 1, |_, _| false), None);
        q.mark_done(f(0));
        assert_eq!(q.schedule_next(true, 1, |_, _| false), Some(vec![f(1)]));
    }

    #[test]
    fn reprioritize_moves_ahead() {
        let mut q = LocalQueue::new();
        q.push(f(0), SessionId(0), "m", 0);
        q.push(f(1), SessionId(1), "m", 0);
        q.reprioritize(f(1), 9);
        assert_eq!(q.head(), Some(f(1)));
    }
}
