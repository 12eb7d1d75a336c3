//! Testbed reservations: inventory browsing and a conflict-free calendar.
//!
//! A reservation claims one edge node and a non-empty set of that node's
//! devices for a half-open window `[start, end)` in UTC seconds. Two stored
//! reservations whose windows overlap never share a device or a node.

mod inventory;
mod journal;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use inventory::{
    Device, DeviceConfig, DeviceKind, Inventory, InventoryConfig, InventoryFilter, Lab, LabConfig,
    LabView, Testbed, TestbedConfig,
};
pub use journal::{Journal, JournalRecord};

#[derive(Debug, Error, PartialEq)]
pub enum ReservationError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflicts with reservation {blocking} [{start}, {end}) on {resource}")]
    Conflict {
        blocking: String,
        start: u64,
        end: u64,
        resource: String,
    },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("invalid inventory: {0}")]
    InvalidInventory(String),
    #[error("journal: {0}")]
    Journal(String),
}

/// Half-open interval `[start, end)` in UTC seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub reservation_id: String,
    pub user_id: String,
    pub testbed_id: String,
    pub node_id: String,
    pub device_ids: BTreeSet<String>,
    pub window: Window,
}

impl Reservation {
    /// Resource name shared with `other`, if any.
    fn shared_resource(&self, other: &Reservation) -> Option<String> {
        if self.node_id == other.node_id {
            return Some(format!("node {}", self.node_id));
        }
        self.device_ids
            .intersection(&other.device_ids)
            .next()
            .map(|d| format!("device {d}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationRequest {
    pub user_id: String,
    pub testbed_id: String,
    pub node_id: String,
    pub device_ids: BTreeSet<String>,
    pub window: Window,
}

/// In-memory calendar. Mutations validate fully before touching state, so a
/// rejected call leaves the calendar unchanged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Calendar {
    reservations: BTreeMap<String, Reservation>,
    next_seq: u64,
}

impl Calendar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.reservations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reservations.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Reservation> {
        self.reservations.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Reservation> {
        self.reservations.values()
    }

    fn validate(
        &self,
        inventory: &Inventory,
        req: &ReservationRequest,
        now_secs: u64,
    ) -> Result<(), ReservationError> {
        if req.window.end <= req.window.start {
            return Err(ReservationError::InvalidWindow(format!(
                "end {} is not after start {}",
                req.window.end, req.window.start
            )));
        }
        if req.window.start < now_secs {
            return Err(ReservationError::InvalidWindow(format!(
                "start {} is in the past",
                req.window.start
            )));
        }
        if req.device_ids.is_empty() {
            return Err(ReservationError::InvalidRequest("no devices selected".into()));
        }
        let testbed = inventory
            .testbed(&req.testbed_id)
            .ok_or_else(|| ReservationError::NotFound(format!("testbed {}", req.testbed_id)))?;
        if !testbed.has_node(&req.node_id) {
            return Err(ReservationError::NotFound(format!(
                "node {} in testbed {}",
                req.node_id, req.testbed_id
            )));
        }
        for id in &req.device_ids {
            let device = testbed.device(id).ok_or_else(|| {
                ReservationError::NotFound(format!("device {id} in testbed {}", req.testbed_id))
            })?;
            if device.node_id != req.node_id {
                return Err(ReservationError::InvalidRequest(format!(
                    "device {id} is attached to {}, not {}",
                    device.node_id, req.node_id
                )));
            }
        }
        Ok(())
    }

    fn find_conflict(&self, candidate: &Reservation) -> Option<ReservationError> {
        self.reservations
            .values()
            .filter(|r| r.window.overlaps(&candidate.window))
            .find_map(|r| {
                candidate
                    .shared_resource(r)
                    .map(|resource| ReservationError::Conflict {
                        blocking: r.reservation_id.clone(),
                        start: r.window.start,
                        end: r.window.end,
                        resource,
                    })
            })
    }

    pub fn create(
        &mut self,
        inventory: &Inventory,
        req: ReservationRequest,
        now_secs: u64,
    ) -> Result<Reservation, ReservationError> {
        self.validate(inventory, &req, now_secs)?;
        let reservation = Reservation {
            reservation_id: format!("r-{}", self.next_seq + 1),
            user_id: req.user_id,
            testbed_id: req.testbed_id,
            node_id: req.node_id,
            device_ids: req.device_ids,
            window: req.window,
        };
        if let Some(conflict) = self.find_conflict(&reservation) {
            return Err(conflict);
        }
        self.insert(reservation.clone());
        Ok(reservation)
    }

    fn insert(&mut self, reservation: Reservation) {
        if let Some(seq) = reservation
            .reservation_id
            .strip_prefix("r-")
            .and_then(|s| s.parse::<u64>().ok())
        {
            self.next_seq = self.next_seq.max(seq);
        }
        self.reservations
            .insert(reservation.reservation_id.clone(), reservation);
    }

    pub fn cancel(&mut self, id: &str, user_id: &str, is_admin: bool) -> Result<Reservation, ReservationError> {
        let owner = self
            .reservations
            .get(id)
            .map(|r| r.user_id.clone())
            .ok_or_else(|| ReservationError::NotFound(format!("reservation {id}")))?;
        if owner != user_id && !is_admin {
            return Err(ReservationError::Forbidden(format!(
                "reservation {id} belongs to another user"
            )));
        }
        Ok(self.reservations.remove(id).expect("checked above"))
    }

    /// The user's reservation whose window contains `now`. When several
    /// match (one per reserved node), the earliest-starting one wins.
    pub fn active_for(&self, user_id: &str, now_secs: u64) -> Option<&Reservation> {
        self.reservations
            .values()
            .filter(|r| r.user_id == user_id && r.window.contains(now_secs))
            .min_by(|a, b| {
                (a.window.start, &a.reservation_id).cmp(&(b.window.start, &b.reservation_id))
            })
    }

    /// Next window of `user_id` that starts after `now`, used as a hint when
    /// a connect attempt falls outside every reserved slot.
    pub fn next_window_for(&self, user_id: &str, now_secs: u64) -> Option<Window> {
        self.reservations
            .values()
            .filter(|r| r.user_id == user_id && r.window.start > now_secs)
            .map(|r| r.window)
            .min_by_key(|w| w.start)
    }

    /// Rebuild a calendar by replaying journal records in order.
    pub fn replay<I>(records: I) -> Self
    where
        I: IntoIterator<Item = JournalRecord>,
    {
        let mut calendar = Calendar::new();
        for record in records {
            match record {
                JournalRecord::Create { reservation } => calendar.insert(reservation),
                JournalRecord::Cancel { reservation_id } => {
                    calendar.reservations.remove(&reservation_id);
                }
            }
        }
        calendar
    }
}

/// Calendar plus inventory plus optional durable journal. All mutations go
/// through `&mut self`; callers share it behind a single lock.
#[derive(Debug)]
pub struct ReservationBook {
    inventory: Inventory,
    calendar: Calendar,
    journal: Option<Journal>,
}

impl ReservationBook {
    pub fn new(inventory: Inventory) -> Self {
        Self {
            inventory,
            calendar: Calendar::new(),
            journal: None,
        }
    }

    /// Open (or create) the journal at `journal` and replay it.
    pub fn with_journal(inventory: Inventory, journal: Journal) -> Result<Self, ReservationError> {
        let calendar = Calendar::replay(journal.read_all()?);
        Ok(Self {
            inventory,
            calendar,
            journal: Some(journal),
        })
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn calendar(&self) -> &Calendar {
        &self.calendar
    }

    pub fn list_inventory(&self, filter: &InventoryFilter) -> Result<Vec<LabView>, ReservationError> {
        self.inventory.list(filter)
    }

    pub fn create_reservation(
        &mut self,
        req: ReservationRequest,
        now_secs: u64,
    ) -> Result<Reservation, ReservationError> {
        let mut next = self.calendar.clone();
        let reservation = next.create(&self.inventory, req, now_secs)?;
        if let Some(journal) = &mut self.journal {
            journal.append(&JournalRecord::Create {
                reservation: reservation.clone(),
            })?;
        }
        self.calendar = next;
        Ok(reservation)
    }

    pub fn cancel_reservation(
        &mut self,
        id: &str,
        user_id: &str,
        is_admin: bool,
    ) -> Result<(), ReservationError> {
        let mut next = self.calendar.clone();
        next.cancel(id, user_id, is_admin)?;
        if let Some(journal) = &mut self.journal {
            journal.append(&JournalRecord::Cancel {
                reservation_id: id.to_string(),
            })?;
        }
        self.calendar = next;
        Ok(())
    }

    pub fn active_reservation(&self, user_id: &str, now_secs: u64) -> Option<&Reservation> {
        self.calendar.active_for(user_id, now_secs)
    }
}
