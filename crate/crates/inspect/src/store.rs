//! Append-only record log and the views derived from it.
//!
//! The store directory holds `records.jsonl` (one event per line), the
//! `labels.jsonl` export stream and `images/`. Everything the service
//! reports is recomputed from `records.jsonl`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use defectnet::data::Label;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const DEFAULT_PAGE_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub inspector_verdict: Label,
    pub reviewer_id: String,
    pub review_timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionRecord {
    pub id: u64,
    /// UTC milliseconds.
    pub timestamp: u64,
    pub image_ref: String,
    pub verdict: Label,
    /// Largest entry of the aggregated class distribution.
    pub confidence: f64,
    pub latency_ms: f64,
    pub review: Option<Review>,
}

impl InspectionRecord {
    /// Final label: the inspector's verdict when reviewed.
    pub fn label(&self) -> Label {
        self.review.as_ref().map_or(self.verdict, |r| r.inspector_verdict)
    }

    pub fn is_override(&self) -> bool {
        self.review.as_ref().is_some_and(|r| r.inspector_verdict != self.verdict)
    }
}

/// One line of the record log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Inspection(InspectionRecord),
    Review {
        id: u64,
        #[serde(flatten)]
        review: Review,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Green,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightState {
    pub color: Color,
    /// When the light last changed color (0 for a fresh store).
    pub since: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub defective: usize,
    pub non_defective: usize,
    pub reviewed: usize,
    pub unreviewed: usize,
    pub overrides: usize,
    /// Overrides per review (0 with no reviews).
    pub override_rate: f64,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueFilter {
    Unreviewed,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub filter: QueueFilter,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub records: Vec<InspectionRecord>,
}

/// Color the light shows for a set of records: red iff the most recent
/// unreviewed record is defective.
fn color_of(records: &[InspectionRecord]) -> Color {
    match records.iter().rev().find(|r| r.review.is_none()) {
        Some(r) if r.verdict == Label::Defective => Color::Red,
        _ => Color::Green,
    }
}

/// In-memory fold of the event log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct State {
    records: Vec<InspectionRecord>,
    light_since: u64,
}

impl State {
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        let before = self.light().color;
        let at = match event {
            Event::Inspection(r) => {
                if let Some(last) = self.records.last() {
                    if r.id <= last.id {
                        return Err(Error::Corrupt(format!(
                            "record id {} after {}",
                            r.id, last.id
                        )));
                    }
                }
                self.records.push(r.clone());
                r.timestamp
            }
            Event::Review { id, review } => {
                let rec = self.find_mut(*id)?;
                if rec.review.is_some() {
                    return Err(Error::Conflict(*id));
                }
                rec.review = Some(review.clone());
                review.review_timestamp
            }
        };
        if self.light().color != before {
            self.light_since = at;
        }
        Ok(())
    }

    fn find_mut(&mut self, id: u64) -> Result<&mut InspectionRecord> {
        let i = self
            .records
            .binary_search_by_key(&id, |r| r.id)
            .map_err(|_| Error::NotFound(id))?;
        Ok(&mut self.records[i])
    }

    pub fn get(&self, id: u64) -> Option<&InspectionRecord> {
        let i = self.records.binary_search_by_key(&id, |r| r.id).ok()?;
        Some(&self.records[i])
    }

    pub fn records(&self) -> &[InspectionRecord] {
        &self.records
    }

    pub fn next_id(&self) -> u64 {
        self.records.last().map_or(1, |r| r.id + 1)
    }

    pub fn light(&self) -> LightState {
        LightState {
            color: color_of(&self.records),
            since: self.light_since,
        }
    }

    pub fn stats(&self) -> Stats {
        let total = self.records.len();
        let reviewed = self.records.iter().filter(|r| r.review.is_some()).count();
        let overrides = self.records.iter().filter(|r| r.is_override()).count();
        let defective = self
            .records
            .iter()
            .filter(|r| r.verdict == Label::Defective)
            .count();
        let latency: f64 = self.records.iter().map(|r| r.latency_ms).sum();
        Stats {
            total,
            defective,
            non_defective: total - defective,
            reviewed,
            unreviewed: total - reviewed,
            overrides,
            override_rate: if reviewed == 0 {
                0.0
            } else {
                overrides as f64 / reviewed as f64
            },
            mean_latency_ms: if total == 0 { 0.0 } else { latency / total as f64 },
        }
    }

    /// Records in id order, `page` counted from 1.
    pub fn queue(&self, filter: QueueFilter, page: usize, page_size: usize) -> QueuePage {
        let page = page.max(1);
        let page_size = page_size.max(1);
        let matching: Vec<&InspectionRecord> = self
            .records
            .iter()
            .filter(|r| filter == QueueFilter::All || r.review.is_none())
            .collect();
        let records = matching
            .iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .map(|&r| r.clone())
            .collect();
        QueuePage {
            filter,
            page,
            page_size,
            total: matching.len(),
            records,
        }
    }
}

/// A store directory with its single log writer.
pub struct Store {
    dir: PathBuf,
    log: File,
    labels: File,
    state: State,
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

impl Store {
    /// Open (or create) a store and replay its log.
    pub fn open(dir: &Path) -> Result<Store> {
        fs::create_dir_all(dir.join(IMAGES_DIR)).map_err(|e| Error::io(dir, e))?;
        let state = replay(dir)?;
        Ok(Store {
            dir: dir.to_path_buf(),
            log: open_append(&dir.join(RECORDS_FILE))?,
            labels: open_append(&dir.join(LABELS_FILE))?,
            state,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    fn append(&mut self, event: &Event) -> Result<()> {
        let mut probe = self.state.clone();
        probe.apply(event)?;
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        let path = self.dir.join(RECORDS_FILE);
        self.log
            .write_all(line.as_bytes())
            .and_then(|_| self.log.sync_data())
            .map_err(|e| Error::io(&path, e))?;
        self.state = probe;
        Ok(())
    }

    /// Persist the image and its record; returns the record once durable.
    pub fn record_inspection(
        &mut self,
        image_png: &[u8],
        timestamp: u64,
        verdict: Label,
        confidence: f64,
        latency_ms: f64,
    ) -> Result<InspectionRecord> {
        let id = self.state.next_id();
        let image_ref = format!("{IMAGES_DIR}/{id:08}.png");
        let path = self.dir.join(&image_ref);
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(image_png)
            .and_then(|_| f.sync_data())
            .map_err(|e| Error::io(&path, e))?;
        let record = InspectionRecord {
            id,
            timestamp,
            image_ref,
            verdict,
            confidence,
            latency_ms,
            review: None,
        };
        self.append(&Event::Inspection(record.clone()))?;
        Ok(record)
    }

    /// Attach a review and export the final label.
    pub fn record_review(
        &mut self,
        id: u64,
        verdict: Label,
        reviewer: &str,
        timestamp: u64,
    ) -> Result<InspectionRecord> {
        match self.state.get(id) {
            None => return Err(Error::NotFound(id)),
            Some(r) if r.review.is_some() => return Err(Error::Conflict(id)),
            Some(_) => {}
        }
        let review = Review {
            inspector_verdict: verdict,
            reviewer_id: reviewer.to_string(),
            review_timestamp: timestamp,
        };
        self.append(&Event::Review { id, review })?;
        let record = self.state.get(id).expect("reviewed record exists").clone();
        let export = LabelExport {
            id,
            image_ref: record.image_ref.clone(),
            label: record.label(),
            model_verdict: record.verdict,
            reviewer_id: reviewer.to_string(),
            timestamp,
        };
        let mut line = serde_json::to_string(&export)?;
        line.push('\n');
        let path = self.dir.join(LABELS_FILE);
        self.labels
            .write_all(line.as_bytes())
            .and_then(|_| self.labels.sync_data())
            .map_err(|e| Error::io(&path, e))?;
        Ok(record)
    }
}

/// A reviewed label on the export stream for retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelExport {
    pub id: u64,
    pub image_ref: String,
    pub label: Label,
    pub model_verdict: Label,
    pub reviewer_id: String,
    pub timestamp: u64,
}

/// Rebuild the state from a store directory's log.
pub fn replay(dir: &Path) -> Result<State> {
    let path = dir.join(RECORDS_FILE);
    let mut state = State::default();
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(state),
        Err(e) => return Err(Error::io(&path, e)),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line)
            .map_err(|e| Error::Corrupt(format!("{}:{}: {e}", path.display(), n + 1)))?;
        state.apply(&event)?;
    }
    Ok(state)
}

pub fn read_labels(dir: &Path) -> Result<Vec<LabelExport>> {
    let path = dir.join(LABELS_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
