//! Keepalive bookkeeping, independent of any timer.
//!
//! The driver calls [`KeepaliveState::tick`] every `interval` and sends a
//! PING when the verdict is `Alive`. Any inbound frame since the previous
//! tick, data included, counts as proof the peer is up.

use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeepalivePolicy {
    pub interval: Duration,
    pub max_missed: u32,
}

impl Default for KeepalivePolicy {
    fn default() -> Self {
        Self {
            interval: Duration::from_secs(15),
            max_missed: 3,
        }
    }
}

impl KeepalivePolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.interval.is_zero() {
            return Err("keepalive interval must be positive".into());
        }
        if self.max_missed == 0 {
            return Err("max_missed must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Alive,
    Expired,
}

#[derive(Debug, Clone)]
pub struct KeepaliveState {
    policy: KeepalivePolicy,
    missed: u32,
    heard: bool,
}

impl KeepaliveState {
    pub fn new(policy: KeepalivePolicy) -> Self {
        Self {
            policy,
            missed: 0,
            // registration itself counts as contact
            heard: true,
        }
    }

    pub fn on_inbound(&mut self) {
        self.heard = true;
    }

    pub fn missed(&self) -> u32 {
        self.missed
    }

    pub fn tick(&mut self) -> Verdict {
        if std::mem::take(&mut self.heard) {
            self.missed = 0;
        } else {
            self.missed += 1;
        }
        if self.missed >= self.policy.max_missed {
            Verdict::Expired
        } else {
            Verdict::Alive
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ticks at k·interval; a live peer answers each ping instantly.
    fn expiry_after_kill(policy: KeepalivePolicy, kill_ms: u64) -> u64 {
        let step = policy.interval.as_millis() as u64;
        let mut state = KeepaliveState::new(policy);
        let mut t = 0;
        loop {
            t += step;
            if state.tick() == Verdict::Expired {
                return t;
            }
            if t < kill_ms {
                state.on_inbound();
            }
        }
    }

    #[test]
    fn killed_peer_expires_within_bound() {
        let policy = KeepalivePolicy::default();
        for kill in (1..=600_000u64).step_by(997) {
            let expired = expiry_after_kill(policy, kill);
            let lag = expired - kill;
            assert!((45_000..=60_000).contains(&lag), "kill {kill} expired {expired}");
        }
    }

    #[test]
    fn healthy_idle_peer_never_expires() {
        let mut state = KeepaliveState::new(KeepalivePolicy::default());
        // one hour of 15 s ticks
        for _ in 0..240 {
            assert_eq!(state.tick(), Verdict::Alive);
            state.on_inbound();
        }
    }

    #[test]
    fn data_counts_as_liveness() {
        let mut state = KeepaliveState::new(KeepalivePolicy { interval: Duration::from_secs(1), max_missed: 1 });
        for _ in 0..10 {
            state.on_inbound();
            assert_eq!(state.tick(), Verdict::Alive);
        }
        assert_eq!(state.tick(), Verdict::Expired);
    }

    #[test]
    fn validation() {
        assert!(KeepalivePolicy { interval: Duration::ZERO, max_missed: 3 }.validate().is_err());
        assert!(KeepalivePolicy { interval: Duration::from_secs(1), max_missed: 0 }.validate().is_err());
    }
}
