//! Capability-scoped access to client data with an audit hook.

use std::sync::Mutex;

use serde::Serialize;

use crate::data::{Batch, ClientStream};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "id")]
pub enum Reader {
    Client(usize),
    Attacker(usize),
    Server,
    Harness,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessKind {
    Batch,
    Labels,
    Delta,
    TtaState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AccessEvent {
    pub round: usize,
    pub reader: Reader,
    pub owner: usize,
    pub kind: AccessKind,
}

impl AccessEvent {
    /// An attacker touching anything that belongs to another client.
    pub fn is_cross_client_attacker_read(&self) -> bool {
        matches!(self.reader, Reader::Attacker(a) if a != self.owner)
    }
}

pub trait AccessMonitor: Send + Sync {
    fn record(&self, event: AccessEvent);
}

pub struct NoopMonitor;

impl AccessMonitor for NoopMonitor {
    fn record(&self, _: AccessEvent) {}
}

#[derive(Default)]
pub struct RecordingMonitor {
    events: Mutex<Vec<AccessEvent>>,
}

impl RecordingMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().expect("monitor lock").clone()
    }

    pub fn attacker_violations(&self) -> Vec<AccessEvent> {
        self.events()
            .into_iter()
            .filter(AccessEvent::is_cross_client_attacker_read)
            .collect()
    }
}

impl AccessMonitor for RecordingMonitor {
    fn record(&self, event: AccessEvent) {
        self.events.lock().expect("monitor lock").push(event);
    }
}

/// Hands out client batches and logs who asked. Honest clients only ever
/// receive unlabelled copies.
pub struct ClientStore<'a> {
    streams: &'a [ClientStream],
    monitor: &'a dyn AccessMonitor,
}

impl<'a> ClientStore<'a> {
    pub fn new(streams: &'a [ClientStream], monitor: &'a dyn AccessMonitor) -> Self {
        Self { streams, monitor }
    }

    pub fn monitor(&self) -> &'a dyn AccessMonitor {
        self.monitor
    }

    pub fn record(&self, round: usize, reader: Reader, owner: usize, kind: AccessKind) {
        self.monitor.record(AccessEvent {
            round,
            reader,
            owner,
            kind,
        });
    }

    fn get(&self, owner: usize, idx: usize) -> Result<&'a Batch> {
        self.streams
            .get(owner)
            .and_then(|s| s.batches.get(idx))
            .ok_or_else(|| Error::Protocol(format!("client {owner} has no batch {idx}")))
    }

    /// Unlabelled batch for adaptation.
    pub fn inputs(&self, round: usize, reader: Reader, owner: usize, idx: usize) -> Result<Batch> {
        let b = self.get(owner, idx)?;
        self.record(round, reader, owner, AccessKind::Batch);
        Ok(b.unlabeled())
    }

    /// Batch with its labels.
    pub fn labelled(&self, round: usize, reader: Reader, owner: usize, idx: usize) -> Result<Batch> {
        let b = self.get(owner, idx)?;
        self.record(round, reader, owner, AccessKind::Batch);
        self.record(round, reader, owner, AccessKind::Labels);
        Ok(b.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_cross_client_attacker_reads_count() {
        let m = RecordingMonitor::new();
        for (reader, owner) in [
            (Reader::Attacker(0), 0),
            (Reader::Client(3), 3),
            (Reader::Harness, 3),
            (Reader::Attacker(1), 4),
        ] {
            m.record(AccessEvent {
                round: 0,
                reader,
                owner,
                kind: AccessKind::Batch,
            });
        }
        assert_eq!(m.events().len(), 4);
        assert_eq!(m.attacker_violations().len(), 1);
    }
}
