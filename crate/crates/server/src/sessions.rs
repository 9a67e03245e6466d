//! In-memory session table with idle expiry and a capacity bound.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use recloop_core::rollout::{Episode, EpisodeResult};

#[derive(Debug)]
pub enum Slot {
    Live(Box<Episode>),
    Terminal(Box<EpisodeResult>),
    /// Expired; kept as a tombstone so late calls get 410 rather than 404.
    Aborted,
}

#[derive(Debug)]
pub struct Session {
    pub slot: Slot,
    pub last_active: Instant,
}

impl Session {
    pub fn expired(&self, now: Instant, ttl: Duration) -> bool {
        now.saturating_duration_since(self.last_active) >= ttl
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

#[derive(Debug)]
pub struct SessionStore {
    table: Mutex<HashMap<String, SessionHandle>>,
    ttl: Duration,
    capacity: usize,
}

pub fn lock(session: &SessionHandle) -> MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|p| p.into_inner())
}

impl SessionStore {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        SessionStore {
            table: Mutex::new(HashMap::new()),
            ttl,
            capacity,
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn table(&self) -> MutexGuard<'_, HashMap<String, SessionHandle>> {
        self.table.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Returns `None` when the store is at capacity even after sweeping.
    pub fn insert(&self, id: String, episode: Episode) -> Option<()> {
        let now = Instant::now();
        let mut table = self.table();
        let live = |t: &HashMap<String, SessionHandle>| {
            t.values().filter(|s| !matches!(lock(s).slot, Slot::Aborted)).count()
        };
        if live(&table) >= self.capacity {
            drop(table);
            self.sweep(now);
            table = self.table();
            if live(&table) >= self.capacity {
                return None;
            }
        }
        table.insert(
            id,
            Arc::new(Mutex::new(Session {
                slot: Slot::Live(Box::new(episode)),
                last_active: now,
            })),
        );
        Some(())
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.table().get(id).cloned()
    }

    /// Turns idle live sessions into tombstones, drops idle terminal sessions,
    /// and drops tombstones after a further TTL. Returns the number expired.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut expired = 0;
        let mut table = self.table();
        table.retain(|_, handle| {
            let mut s = lock(handle);
            match s.slot {
                Slot::Aborted => !s.expired(now, self.ttl * 2),
                Slot::Terminal(_) => !s.expired(now, self.ttl),
                Slot::Live(_) if s.expired(now, self.ttl) => {
                    s.slot = Slot::Aborted;
                    expired += 1;
                    true
                }
                Slot::Live(_) => true,
            }
        });
        expired
    }
}
