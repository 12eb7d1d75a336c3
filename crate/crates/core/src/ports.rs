//! Index-store backed port assignment.
//!
//! Every live pod owns one entry `<app>-<index>` in the index store. Its
//! remote-access port is `remote_base + index` and its web-view port is
//! `web_base + index`. Allocation reads the app's active keys, sorts their
//! indices and takes the lowest free one, reclaiming ports held by stale
//! listeners along the way. The whole read-choose-write runs under one lock.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::sim::ScaleSignal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PortError {
    #[error("all {max_index} indices are in use")]
    Exhausted { max_index: u32 },
    #[error("could not reclaim port {port}")]
    ReclaimFailed { port: u16 },
    #[error("index store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("session {session_id} already holds {key}")]
    AlreadyAllocated { session_id: String, key: String },
    #[error("invalid port configuration: {0}")]
    InvalidConfig(String),
}

impl PortError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, PortError::StoreUnavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStoreConfig {
    pub remote_base: u16,
    pub web_base: u16,
    pub max_index: u32,
}

impl Default for IndexStoreConfig {
    fn default() -> Self {
        Self {
            remote_base: 2200,
            web_base: 6080,
            max_index: 64,
        }
    }
}

impl IndexStoreConfig {
    pub fn validate(&self) -> Result<(), PortError> {
        let remote_end = self.remote_base as u32 + self.max_index;
        let web_end = self.web_base as u32 + self.max_index;
        if self.max_index == 0 {
            return Err(PortError::InvalidConfig("max_index must be positive".into()));
        }
        if remote_end > u16::MAX as u32 + 1 || web_end > u16::MAX as u32 + 1 {
            return Err(PortError::InvalidConfig("port range exceeds 65535".into()));
        }
        if !(remote_end <= self.web_base as u32 || web_end <= self.remote_base as u32) {
            return Err(PortError::InvalidConfig(format!(
                "remote range {}..{remote_end} overlaps web range {}..{web_end}",
                self.remote_base, self.web_base
            )));
        }
        Ok(())
    }

    pub fn assignment(&self, index: u32) -> PortAssignment {
        PortAssignment {
            index,
            remote_port: self.remote_base + index as u16,
            web_port: self.web_base + index as u16,
        }
    }

    /// Index owning `port` in either managed range.
    pub fn index_of(&self, port: u16) -> Option<u32> {
        let in_range = |base: u16| {
            (port >= base && ((port - base) as u32) < self.max_index).then(|| (port - base) as u32)
        };
        in_range(self.remote_base).or_else(|| in_range(self.web_base))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortAssignment {
    pub index: u32,
    pub remote_port: u16,
    pub web_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    pub index: u32,
    pub remote_port: u16,
    pub web_port: u16,
    pub session_id: String,
    pub created_at: Millis,
}

impl IndexEntry {
    pub fn ports(&self) -> PortAssignment {
        PortAssignment {
            index: self.index,
            remote_port: self.remote_port,
            web_port: self.web_port,
        }
    }
}

pub fn entry_key(app: &str, index: u32) -> String {
    format!("{app}-{index}")
}

/// Split `<app>-<index>` into its parts.
pub fn parse_key(key: &str) -> Option<(&str, u32)> {
    let (app, idx) = key.rsplit_once('-')?;
    if app.is_empty() || idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((app, idx.parse().ok()?))
}

/// Key-value index store.
pub trait IndexStore: Send {
    /// Keys starting with `prefix`, in any order.
    fn keys(&mut self, prefix: &str) -> Result<Vec<String>, PortError>;
    fn get(&mut self, key: &str) -> Result<Option<IndexEntry>, PortError>;
    fn set(&mut self, key: &str, entry: &IndexEntry) -> Result<(), PortError>;
    /// Returns whether the key existed.
    fn del(&mut self, key: &str) -> Result<bool, PortError>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    entries: BTreeMap<String, IndexEntry>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl IndexStore for MemoryStore {
    fn keys(&mut self, prefix: &str) -> Result<Vec<String>, PortError> {
        Ok(self
            .entries
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect())
    }

    fn get(&mut self, key: &str) -> Result<Option<IndexEntry>, PortError> {
        Ok(self.entries.get(key).cloned())
    }

    fn set(&mut self, key: &str, entry: &IndexEntry) -> Result<(), PortError> {
        self.entries.insert(key.to_string(), entry.clone());
        Ok(())
    }

    fn del(&mut self, key: &str) -> Result<bool, PortError> {
        Ok(self.entries.remove(key).is_some())
    }
}

/// What is currently listening on the gateway's managed ports.
pub trait ListenerProbe: Send {
    fn is_listening(&self, port: u16) -> bool;
    /// Shut down the listener on `port`. Returns false if it could not be stopped.
    fn shut_down(&mut self, port: u16) -> bool;
}

/// Probe for deployments without a gateway: nothing ever listens.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoListeners;

impl ListenerProbe for NoListeners {
    fn is_listening(&self, _port: u16) -> bool {
        false
    }

    fn shut_down(&mut self, _port: u16) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub key: String,
    pub assignment: PortAssignment,
    /// Present when the chosen ordinal lies beyond the app's current replica span.
    pub scale_signal: Option<ScaleSignal>,
}

struct Inner {
    store: Box<dyn IndexStore>,
    listeners: Box<dyn ListenerProbe>,
}

pub struct PortManager {
    config: IndexStoreConfig,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for PortManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PortManager").field("config", &self.config).finish()
    }
}

impl PortManager {
    pub fn new(config: IndexStoreConfig) -> Result<Self, PortError> {
        Self::with_backends(config, Box::new(MemoryStore::new()), Box::new(NoListeners))
    }

    pub fn with_backends(
        config: IndexStoreConfig,
        store: Box<dyn IndexStore>,
        listeners: Box<dyn ListenerProbe>,
    ) -> Result<Self, PortError> {
        config.validate()?;
        Ok(Self {
            config,
            inner: Mutex::new(Inner { store, listeners }),
        })
    }

    pub fn config(&self) -> &IndexStoreConfig {
        &self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Replace the listener probe, e.g. once the tunnel gateway is up.
    pub fn set_listener_probe(&self, listeners: Box<dyn ListenerProbe>) {
        self.lock().listeners = listeners;
    }

    pub fn allocate(&self, app: &str, session_id: &str, now: Millis) -> Result<Allocation, PortError> {
        let mut inner = self.lock();
        let entries = all_entries(inner.store.as_mut())?;
        if let Some(existing) = entries
            .values()
            .find(|e| e.session_id == session_id && parse_key(&e.key).map(|(a, _)| a) == Some(app))
        {
            return Err(PortError::AlreadyAllocated {
                session_id: session_id.to_string(),
                key: existing.key.clone(),
            });
        }

        let mut active: Vec<u32> = inner
            .store
            .keys(&format!("{app}-"))?
            .iter()
            .filter_map(|k| parse_key(k).filter(|(a, _)| *a == app).map(|(_, i)| i))
            .collect();
        active.sort_unstable();
        let span = active.last().map_or(0, |&max| max + 1);
        let active: BTreeSet<u32> = active.into_iter().collect();

        for index in (0..self.config.max_index).filter(|i| !active.contains(i)) {
            let assignment = self.config.assignment(index);
            if !reclaim_locked(&mut inner, &entries, assignment.remote_port)?
                || !reclaim_locked(&mut inner, &entries, assignment.web_port)?
            {
                continue;
            }
            let key = entry_key(app, index);
            let entry = IndexEntry {
                key: key.clone(),
                index,
                remote_port: assignment.remote_port,
                web_port: assignment.web_port,
                session_id: session_id.to_string(),
                created_at: now,
            };
            inner.store.set(&key, &entry)?;
            tracing::debug!(%key, remote = assignment.remote_port, web = assignment.web_port, "allocated ports");
            let scale_signal = (index >= span).then(|| ScaleSignal {
                app: app.to_string(),
                target_replicas: index + 1,
            });
            return Ok(Allocation {
                key,
                assignment,
                scale_signal,
            });
        }
        Err(PortError::Exhausted {
            max_index: self.config.max_index,
        })
    }

    /// Remove `key`. Releasing a missing key is a logged no-op.
    pub fn release(&self, key: &str) -> Result<(), PortError> {
        let removed = self.lock().store.del(key)?;
        if !removed {
            tracing::debug!(%key, "release of unknown key ignored");
        }
        Ok(())
    }

    pub fn lookup_key(&self, key: &str) -> Result<Option<IndexEntry>, PortError> {
        self.lock().store.get(key)
    }

    /// First entry (by key) owned by `session_id`.
    pub fn lookup_session(&self, session_id: &str) -> Result<Option<IndexEntry>, PortError> {
        Ok(self
            .entries()?
            .into_iter()
            .find(|e| e.session_id == session_id))
    }

    /// Full store scan ordered by key.
    pub fn entries(&self) -> Result<Vec<IndexEntry>, PortError> {
        let mut inner = self.lock();
        Ok(all_entries(inner.store.as_mut())?.into_values().collect())
    }

    /// Take over `port` if only a stale listener holds it. Returns false when
    /// a live entry owns the port.
    pub fn reclaim(&self, port: u16) -> Result<bool, PortError> {
        let mut inner = self.lock();
        let entries = all_entries(inner.store.as_mut())?;
        reclaim_locked(&mut inner, &entries, port)
    }
}

fn all_entries(store: &mut dyn IndexStore) -> Result<BTreeMap<String, IndexEntry>, PortError> {
    let mut out = BTreeMap::new();
    for key in store.keys("")? {
        if let Some(entry) = store.get(&key)? {
            out.insert(key, entry);
        }
    }
    Ok(out)
}

fn reclaim_locked(
    inner: &mut Inner,
    entries: &BTreeMap<String, IndexEntry>,
    port: u16,
) -> Result<bool, PortError> {
    if entries
        .values()
        .any(|e| e.remote_port == port || e.web_port == port)
    {
        return Ok(false);
    }
    if !inner.listeners.is_listening(port) {
        return Ok(true);
    }
    tracing::info!(port, "reclaiming port held by stale listener");
    if inner.listeners.shut_down(port) {
        Ok(true)
    } else {
        Err(PortError::ReclaimFailed { port })
    }
}
