//! `events.csv`: one row per layer per mask update.
//!
//! Besides the summary columns the file carries the changed flat indices as
//! space-separated lists, which is enough to replay a run's masks.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerUpdate, UpdateEvent};
use crate::error::{Error, Result};
use crate::sparsity::MaskSet;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<UpdateEvent>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: UpdateEvent) {
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_events_csv(path, &self.events)
    }

    /// Replays every event against `initial`.
    pub fn replay(&self, initial: &MaskSet) -> Result<MaskSet> {
        let mut masks = initial.clone();
        for e in &self.events {
            e.apply_to(&mut masks)?;
        }
        Ok(masks)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    step: usize,
    layer: String,
    dropped: usize,
    grown: usize,
    density_pre: f64,
    density_post: f64,
    dropped_idx: String,
    grown_idx: String,
}

fn join(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn split(text: &str, line: usize) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::input(format!("events.csv row {line}: bad index '{t}'")))
        })
        .collect()
}

pub fn write_events_csv(path: impl AsRef<Path>, events: &[UpdateEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in events {
        for lu in &e.layers {
            w.serialize(Row {
                step: e.step,
                layer: lu.name.clone(),
                dropped: lu.dropped.len(),
                grown: lu.grown.len(),
                density_pre: lu.density_pre,
                density_post: lu.density_post,
                dropped_idx: join(&lu.dropped),
                grown_idx: join(&lu.grown),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an events file, resolving layer names against `masks`.
pub fn read_events_csv(path: impl AsRef<Path>, masks: &MaskSet) -> Result<EventLog> {
    let index: HashMap<&str, usize> = masks
        .layers()
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name(), i))
        .collect();
    let mut r = csv::Reader::from_path(path)?;
    let mut log = EventLog::new();
    for (n, row) in r.deserialize::<Row>().enumerate() {
        let row = row?;
        let line = n + 2;
        let layer = *index
            .get(row.layer.as_str())
            .ok_or_else(|| Error::input(format!("events.csv row {line}: unknown layer '{}'", row.layer)))?;
        let dropped = split(&row.dropped_idx, line)?;
        let grown = split(&row.grown_idx, line)?;
        if dropped.len() != row.dropped || grown.len() != row.grown {
            return Err(Error::input(format!(
                "events.csv row {line}: index lists disagree with counts"
            )));
        }
        let update = LayerUpdate {
            layer,
            name: row.layer,
            dropped,
            grown,
            density_pre: row.density_pre,
            density_post: row.density_post,
        };
        match log.events.last_mut() {
            Some(e) if e.step == row.step => e.layers.push(update),
            _ => log.push(UpdateEvent {
                step: row.step,
                layers: vec![update],
            }),
        }
    }
    Ok(log)
}

/// Reads `path` and replays it on top of `initial`.
pub fn replay_events(path: impl AsRef<Path>, initial: &MaskSet) -> Result<MaskSet> {
    read_events_csv(path, initial)?.replay(initial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::LayerMask;

    #[test]
    fn csv_round_trip_and_replay() {
        let initial = MaskSet::new(vec![
            LayerMask::from_active("a", &[4], &[0, 1]).unwrap(),
            LayerMask::from_active("b", &[3], &[2]).unwrap(),
        ]);
        let events = vec![
            UpdateEvent {
                step: 10,
                layers: vec![
                    LayerUpdate {
                        layer: 0,
                        name: "a".into(),
                        dropped: vec![0],
                        grown: vec![3],
                        density_pre: 0.5,
                        density_post: 0.5,
                    },
                    LayerUpdate {
                        layer: 1,
                        name: "b".into(),
                        dropped: vec![],
                        grown: vec![],
                        density_pre: 1.0 / 3.0,
                        density_post: 1.0 / 3.0,
                    },
                ],
            },
            UpdateEvent {
                step: 20,
                layers: vec![LayerUpdate {
                    layer: 1,
                    name: "b".into(),
                    dropped: vec![2],
                    grown: vec![0, 2],
                    density_pre: 1.0 / 3.0,
                    density_post: 2.0 / 3.0,
                }],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        write_events_csv(&path, &events).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,layer,dropped,grown,density_pre,density_post"));
        let log = read_events_csv(&path, &initial).unwrap();
        assert_eq!(log.events, events);
        let last = replay_events(&path, &initial).unwrap();
        assert_eq!(last.layer(0).active_indices(), vec![1, 3]);
        assert_eq!(last.layer(1).active_indices(), vec![0, 2]);
    }
}
