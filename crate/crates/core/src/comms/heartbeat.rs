use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatConfig {
    #[serde(default = "HeartbeatConfig::default_period_ms")]
    pub period_ms: u64,
    #[serde(default = "HeartbeatConfig::default_suspect_after")]
    pub suspect_after: u32,
    #[serde(default = "HeartbeatConfig::default_dead_after")]
    pub dead_after: u32,
}

impl HeartbeatConfig {
    fn default_period_ms() -> u64 {
        2000
    }

    fn default_suspect_after() -> u32 {
        3
    }

    fn default_dead_after() -> u32 {
        5
    }

    pub fn period(&self) -> Duration {
        Duration::from_millis(self.period_ms)
    }

    /// Silence after which a link is declared dead.
    pub fn dead_timeout(&self) -> Duration {
        self.period() * self.dead_after
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.period_ms == 0 {
            return Err("heartbeat period must be positive".into());
        }
        if self.suspect_after == 0 || self.suspect_after >= self.dead_after {
            return Err(format!(
                "need 0 < suspect_after < dead_after, got {} and {}",
                self.suspect_after, self.dead_after
            ));
        }
        Ok(())
    }
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            period_ms: Self::default_period_ms(),
            suspect_after: Self::default_suspect_after(),
            dead_after: Self::default_dead_after(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkState {
    Connecting,
    Alive,
    Suspect,
    Dead,
}

#[derive(Debug, Clone)]
pub struct PeerLink {
    pub peer: NodeId,
    pub address: String,
    pub state: LinkState,
    /// Last beat received, or link creation time.
    pub last_beat: Instant,
}

impl PeerLink {
    pub fn new(peer: NodeId, address: impl Into<String>, now: Instant) -> Self {
        Self { peer, address: address.into(), state: LinkState::Connecting, last_beat: now }
    }

    /// Record a beat; returns the transition it caused, if any.
    pub fn beat(&mut self, now: Instant) -> Option<StateChange> {
        if self.state == LinkState::Dead {
            return None;
        }
        self.last_beat = now;
        let from = self.state;
        (from != LinkState::Alive).then(|| {
            self.state = LinkState::Alive;
            StateChange { peer: self.peer, from, to: LinkState::Alive }
        })
    }

    pub fn is_live(&self) -> bool {
        self.state != LinkState::Dead
    }

    /// Instant at which this link goes dead if nothing arrives.
    pub fn dead_deadline(&self, cfg: &HeartbeatConfig) -> Instant {
        self.last_beat + cfg.dead_timeout()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateChange {
    pub peer: NodeId,
    pub from: LinkState,
    pub to: LinkState,
}

fn missed_periods(link: &PeerLink, now: Instant, cfg: &HeartbeatConfig) -> u64 {
    let silent = now.saturating_duration_since(link.last_beat);
    (silent.as_millis() / u128::from(cfg.period_ms.max(1))) as u64
}

/// Apply the Alive→Suspect→Dead ladder. A link that crosses both thresholds
/// in one step reports both transitions.
pub fn update_liveness<'a>(
    links: impl IntoIterator<Item = &'a mut PeerLink>,
    now: Instant,
    cfg: &HeartbeatConfig,
) -> Vec<StateChange> {
    let mut changes = Vec::new();
    for link in links {
        if link.state == LinkState::Dead {
            continue;
        }
        let missed = missed_periods(link, now, cfg);
        if link.state == LinkState::Alive && missed >= u64::from(cfg.suspect_after) {
            changes.push(StateChange { peer: link.peer, from: LinkState::Alive, to: LinkState::Suspect });
            link.state = LinkState::Suspect;
        }
        if missed >= u64::from(cfg.dead_after) {
            changes.push(StateChange { peer: link.peer, from: link.state, to: LinkState::Dead });
            link.state = LinkState::Dead;
        }
    }
    changes
}

/// One heartbeat step: update link states, then pick the links owed a BEAT.
pub fn heartbeat_tick<'a>(
    links: impl IntoIterator<Item = &'a mut PeerLink>,
    now: Instant,
    cfg: &HeartbeatConfig,
) -> (BTreeSet<NodeId>, Vec<StateChange>) {
    let mut beats = BTreeSet::new();
    let mut changes = Vec::new();
    for link in links {
        changes.extend(update_liveness(std::iter::once(&mut *link), now, cfg));
        if matches!(link.state, LinkState::Alive | LinkState::Suspect) {
            beats.insert(link.peer);
        }
    }
    (beats, changes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alive(peer: NodeId, last_beat: Instant) -> PeerLink {
        PeerLink { peer, address: String::new(), state: LinkState::Alive, last_beat }
    }

    #[test]
    fn spec_ladder_with_defaults() {
        let cfg = HeartbeatConfig::default();
        let t0 = Instant::now();
        let mut links = vec![alive(1, t0)];

        let (beats, changes) = heartbeat_tick(links.iter_mut(), t0 + Duration::from_millis(6100), &cfg);
        assert_eq!(changes, vec![StateChange { peer: 1, from: LinkState::Alive, to: LinkState::Suspect }]);
        assert!(beats.contains(&1));

        let (beats, changes) = heartbeat_tick(links.iter_mut(), t0 + Duration::from_millis(10_100), &cfg);
        assert_eq!(changes, vec![StateChange { peer: 1, from: LinkState::Suspect, to: LinkState::Dead }]);
        assert!(beats.is_empty());
    }

    #[test]
    fn fresh_beats_keep_link_alive() {
        let cfg = HeartbeatConfig::default();
        let t0 = Instant::now();
        let mut links = vec![alive(1, t0)];
        let (beats, changes) = heartbeat_tick(links.iter_mut(), t0 + Duration::from_millis(5900), &cfg);
        assert!(changes.is_empty());
        assert_eq!(beats, BTreeSet::from([1]));
    }

    #[test]
    fn long_silence_reports_both_transitions() {
        let cfg = HeartbeatConfig::default();
        let t0 = Instant::now();
        let mut links = vec![alive(2, t0)];
        let changes = update_liveness(links.iter_mut(), t0 + Duration::from_secs(60), &cfg);
        assert_eq!(changes.len(), 2);
        assert_eq!(changes[1].to, LinkState::Dead);
    }

    #[test]
    fn suspect_recovers_on_beat() {
        let t0 = Instant::now();
        let mut link = alive(3, t0);
        link.state = LinkState::Suspect;
        let change = link.beat(t0 + Duration::from_secs(7)).unwrap();
        assert_eq!((change.from, change.to), (LinkState::Suspect, LinkState::Alive));
        link.state = LinkState::Dead;
        assert!(link.beat(t0 + Duration::from_secs(8)).is_none());
    }

    #[test]
    fn connecting_links_get_no_beats() {
        let cfg = HeartbeatConfig::default();
        let t0 = Instant::now();
        let mut links = vec![PeerLink::new(4, "x", t0)];
        let (beats, _) = heartbeat_tick(links.iter_mut(), t0 + Duration::from_millis(100), &cfg);
        assert!(beats.is_empty());
    }
}
