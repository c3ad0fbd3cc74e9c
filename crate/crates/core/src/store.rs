//! Embedded stream registry and item store.
//!
//! On disk every stream is one JSON document at `streams/<id>.json` and
//! every item one document at `items/<fp[..2]>/<fp>.json`. Documents are
//! replaced by writing a temp file and renaming it over the target, so a
//! killed process leaves either the old or the new document. Multi-stream
//! transitions (pick, stale re-pick) are written to `journal.log` first and
//! rolled forward on open. `items/index.log` is an append-only list of
//! ingested fingerprints.
//!
//! All documents are also held in memory; disk is write-through.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::clock::{delta, Clock};
use crate::model::{compute_next_due, FeedItem, FeedStream, StreamStatus};

/// Backoff exponent cap: failing streams wait at most 32 intervals.
pub const MAX_BACKOFF_EXPONENT: u32 = 5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt document {path}: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown stream `{0}`")]
    UnknownStream(String),
    #[error("stream `{0}` already exists")]
    DuplicateStream(String),
    #[error("illegal transition for stream `{id}`: {from:?} -> {to:?}")]
    IllegalTransition {
        id: String,
        from: StreamStatus,
        to: StreamStatus,
    },
    #[error("item fingerprint does not match its fields ({0})")]
    FingerprintMismatch(String),
}

impl StoreError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, StoreError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Processed,
    Failed,
}

impl From<Outcome> for StreamStatus {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Processed => StreamStatus::Processed,
            Outcome::Failed => StreamStatus::Failed,
        }
    }
}

/// Fields rewritten by `mark_processed` besides status and schedule.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MarkUpdate {
    /// Replaces both stored validators when set.
    pub validators: Option<Validators>,
    /// Target of a permanent redirect.
    pub url: Option<Url>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Validators {
    pub etag: Option<String>,
    pub last_modified: Option<String>,
}

/// `poll_interval * 2^min(failures, 5)`.
pub fn effective_interval(poll_interval: Duration, consecutive_failures: u32) -> Duration {
    poll_interval * (1u32 << consecutive_failures.min(MAX_BACKOFF_EXPONENT))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StoreOptions {
    /// fsync documents and the journal before acknowledging writes.
    pub fsync: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompactReport {
    pub index_entries: usize,
    pub index_lines_dropped: usize,
    pub journal_bytes_reclaimed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum JournalRecord {
    Pick {
        txn: u64,
        at: DateTime<Utc>,
        ids: Vec<String>,
    },
    Commit {
        txn: u64,
    },
}

struct Disk {
    root: PathBuf,
    journal: Mutex<Journal>,
    index: Mutex<File>,
    fsync: bool,
}

struct Journal {
    file: File,
    next_txn: u64,
}

struct Inner {
    clock: Arc<dyn Clock>,
    disk: Option<Disk>,
    streams: RwLock<BTreeMap<String, FeedStream>>,
    /// fingerprint -> stream id
    items: Mutex<HashMap<String, String>>,
    /// Kept only for the in-memory backend.
    item_docs: Mutex<HashMap<String, FeedItem>>,
}

/// Cloneable handle; all clones share state.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root_path())
            .field("streams", &self.stream_count())
            .finish()
    }
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Arc::new(Inner {
                clock,
                disk: None,
                streams: RwLock::new(BTreeMap::new()),
                items: Mutex::new(HashMap::new()),
                item_docs: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn open(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        Self::open_with(root, clock, StoreOptions::default())
    }

    pub fn open_with(
        root: impl AsRef<Path>,
        clock: Arc<dyn Clock>,
        options: StoreOptions,
    ) -> Result<Self, StoreError> {
        let root = root.as_ref().to_owned();
        let streams_dir = root.join("streams");
        let items_dir = root.join("items");
        fs::create_dir_all(&streams_dir).map_err(io_err(&streams_dir))?;
        fs::create_dir_all(&items_dir).map_err(io_err(&items_dir))?;

        let mut streams = load_streams(&streams_dir)?;
        let items = load_items(&items_dir)?;

        let journal_path = root.join("journal.log");
        let replayed = replay_journal(&journal_path, &mut streams)?;
        for id in &replayed {
            write_doc(&streams_dir.join(format!("{id}.json")), &streams[id], options.fsync)?;
        }
        if !replayed.is_empty() {
            tracing::info!(count = replayed.len(), "rolled forward interrupted pick transitions");
        }
        let journal_file = File::create(&journal_path).map_err(io_err(&journal_path))?;

        let index_path = items_dir.join("index.log");
        let index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index_path)
            .map_err(io_err(&index_path))?;

        Ok(Self {
            inner: Arc::new(Inner {
                clock,
                disk: Some(Disk {
                    root,
                    journal: Mutex::new(Journal {
                        file: journal_file,
                        next_txn: 1,
                    }),
                    index: Mutex::new(index),
                    fsync: options.fsync,
                }),
                streams: RwLock::new(streams),
                items: Mutex::new(items),
                item_docs: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn root_path(&self) -> Option<&Path> {
        self.inner.disk.as_ref().map(|d| d.root.as_path())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    fn persist(&self, stream: &FeedStream) -> Result<(), StoreError> {
        if let Some(disk) = &self.inner.disk {
            let path = disk.root.join("streams").join(format!("{}.json", stream.id));
            write_doc(&path, stream, disk.fsync)?;
        }
        Ok(())
    }

    fn journal(&self, record: impl FnOnce(u64) -> JournalRecord) -> Result<Option<u64>, StoreError> {
        let Some(disk) = &self.inner.disk else {
            return Ok(None);
        };
        let mut journal = disk.journal.lock().unwrap();
        let txn = journal.next_txn;
        journal.next_txn += 1;
        let path = disk.root.join("journal.log");
        let mut line = serde_json::to_vec(&record(txn)).expect("journal record serializes");
        line.push(b'\n');
        journal.file.write_all(&line).map_err(io_err(&path))?;
        if disk.fsync {
            journal.file.sync_data().map_err(io_err(&path))?;
        }
        Ok(Some(txn))
    }

    fn commit(&self, txn: Option<u64>) -> Result<(), StoreError> {
        match txn {
            Some(txn) => self.journal(|_| JournalRecord::Commit { txn }).map(|_| ()),
            None => Ok(()),
        }
    }

    /// Inserts or replaces a stream.
    pub fn upsert_stream(&self, stream: FeedStream) -> Result<FeedStream, StoreError> {
        let mut streams = self.inner.streams.write().unwrap();
        self.persist(&stream)?;
        streams.insert(stream.id.clone(), stream.clone());
        Ok(stream)
    }

    /// Inserts a stream whose id must not exist yet.
    pub fn create_stream(&self, stream: FeedStream) -> Result<FeedStream, StoreError> {
        let mut streams = self.inner.streams.write().unwrap();
        if streams.contains_key(&stream.id) {
            return Err(StoreError::DuplicateStream(stream.id));
        }
        self.persist(&stream)?;
        streams.insert(stream.id.clone(), stream.clone());
        Ok(stream)
    }

    pub fn get_stream(&self, id: &str) -> Result<FeedStream, StoreError> {
        self.inner
            .streams
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownStream(id.to_owned()))
    }

    /// Removes the stream document. Its items are kept.
    pub fn delete_stream(&self, id: &str) -> Result<(), StoreError> {
        let mut streams = self.inner.streams.write().unwrap();
        if !streams.contains_key(id) {
            return Err(StoreError::UnknownStream(id.to_owned()));
        }
        if let Some(disk) = &self.inner.disk {
            let path = disk.root.join("streams").join(format!("{id}.json"));
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
        streams.remove(id);
        Ok(())
    }

    pub fn list_streams(&self) -> Vec<FeedStream> {
        self.inner.streams.read().unwrap().values().cloned().collect()
    }

    pub fn stream_count(&self) -> usize {
        self.inner.streams.read().unwrap().len()
    }

    pub fn count_by_status(&self, status: StreamStatus) -> usize {
        self.inner
            .streams
            .read()
            .unwrap()
            .values()
            .filter(|s| s.status == status)
            .count()
    }

    fn transition_many(
        &self,
        streams: &mut BTreeMap<String, FeedStream>,
        ids: Vec<String>,
        now: DateTime<Utc>,
    ) -> Result<Vec<FeedStream>, StoreError> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let txn = self.journal(|txn| JournalRecord::Pick {
            txn,
            at: now,
            ids: ids.clone(),
        })?;
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let mut s = streams[&id].clone();
            debug_assert!(s.status.can_transition(StreamStatus::InProcess));
            s.status = StreamStatus::InProcess;
            s.picked_at = Some(now);
            self.persist(&s)?;
            streams.insert(id, s.clone());
            out.push(s);
        }
        self.commit(txn)?;
        Ok(out)
    }

    /// Atomically claims up to `limit` streams due by `now + horizon`.
    pub fn pick_due_streams(
        &self,
        now: DateTime<Utc>,
        horizon: Duration,
        limit: usize,
    ) -> Result<Vec<FeedStream>, StoreError> {
        let cutoff = now + delta(horizon);
        let mut streams = self.inner.streams.write().unwrap();
        let mut due: Vec<(&DateTime<Utc>, &String)> = streams
            .values()
            .filter(|s| s.status != StreamStatus::InProcess && s.next_due <= cutoff)
            .map(|s| (&s.next_due, &s.id))
            .collect();
        due.sort();
        let ids: Vec<String> = due.into_iter().take(limit).map(|(_, id)| id.clone()).collect();
        self.transition_many(&mut streams, ids, now)
    }

    /// Re-claims streams stuck in `InProcess` since `now - stale_after`.
    pub fn recover_stale(
        &self,
        now: DateTime<Utc>,
        stale_after: Duration,
        limit: usize,
    ) -> Result<Vec<FeedStream>, StoreError> {
        let cutoff = now - delta(stale_after);
        let mut streams = self.inner.streams.write().unwrap();
        let mut stale: Vec<(DateTime<Utc>, &String)> = streams
            .values()
            .filter_map(|s| match (s.status, s.picked_at) {
                (StreamStatus::InProcess, Some(at)) if at <= cutoff => Some((at, &s.id)),
                _ => None,
            })
            .collect();
        stale.sort();
        let ids: Vec<String> = stale.into_iter().take(limit).map(|(_, id)| id.clone()).collect();
        self.transition_many(&mut streams, ids, now)
    }

    /// Claims one stream regardless of its due date.
    pub fn force_pick(&self, id: &str, now: DateTime<Utc>) -> Result<FeedStream, StoreError> {
        let mut streams = self.inner.streams.write().unwrap();
        match streams.get(id) {
            None => return Err(StoreError::UnknownStream(id.to_owned())),
            Some(s) if s.status == StreamStatus::InProcess => {
                return Err(StoreError::IllegalTransition {
                    id: id.to_owned(),
                    from: s.status,
                    to: StreamStatus::InProcess,
                })
            }
            Some(_) => {}
        }
        let mut picked = self.transition_many(&mut streams, vec![id.to_owned()], now)?;
        Ok(picked.remove(0))
    }

    /// Undoes a pick whose messages never made it into the queue. A no-op
    /// when the stream has since moved on.
    pub fn release(&self, id: &str, picked_at: DateTime<Utc>) -> Result<bool, StoreError> {
        let mut streams = self.inner.streams.write().unwrap();
        let Some(current) = streams.get(id) else {
            return Err(StoreError::UnknownStream(id.to_owned()));
        };
        if current.status != StreamStatus::InProcess || current.picked_at != Some(picked_at) {
            return Ok(false);
        }
        let mut s = current.clone();
        s.status = StreamStatus::Idle;
        s.picked_at = None;
        self.persist(&s)?;
        streams.insert(s.id.clone(), s);
        Ok(true)
    }

    pub fn mark_processed(
        &self,
        stream_id: &str,
        outcome: Outcome,
        completed_at: DateTime<Utc>,
        update: MarkUpdate,
    ) -> Result<FeedStream, StoreError> {
        let mut streams = self.inner.streams.write().unwrap();
        let Some(current) = streams.get(stream_id) else {
            return Err(StoreError::UnknownStream(stream_id.to_owned()));
        };
        let to = StreamStatus::from(outcome);
        if current.status != StreamStatus::InProcess {
            return Err(StoreError::IllegalTransition {
                id: stream_id.to_owned(),
                from: current.status,
                to,
            });
        }
        let mut s = current.clone();
        s.status = to;
        s.consecutive_failures = match outcome {
            Outcome::Processed => 0,
            Outcome::Failed => s.consecutive_failures.saturating_add(1),
        };
        s.next_due = compute_next_due(
            completed_at,
            effective_interval(s.poll_interval, s.consecutive_failures),
        );
        if let Some(v) = update.validators {
            s.etag = v.etag;
            s.last_modified = v.last_modified;
        }
        if let Some(url) = update.url {
            s.url = url;
        }
        self.persist(&s)?;
        streams.insert(s.id.clone(), s.clone());
        Ok(s)
    }

    /// Stores items whose fingerprint has not been seen; returns how many
    /// were new.
    pub fn insert_items_dedup(&self, items: &[FeedItem]) -> Result<usize, StoreError> {
        if let Some(bad) = items.iter().find(|i| !i.fingerprint_is_consistent()) {
            return Err(StoreError::FingerprintMismatch(bad.fingerprint.clone()));
        }
        let mut index = self.inner.items.lock().unwrap();
        let mut inserted = 0;
        for item in items {
            if index.contains_key(&item.fingerprint) {
                continue;
            }
            match &self.inner.disk {
                Some(disk) => {
                    let fp = &item.fingerprint;
                    let dir = disk.root.join("items").join(&fp[..2]);
                    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                    write_doc(&dir.join(format!("{fp}.json")), item, disk.fsync)?;
                    let mut log = disk.index.lock().unwrap();
                    writeln!(log, "{fp} {}", item.stream_id)
                        .map_err(io_err(&disk.root.join("items/index.log")))?;
                }
                None => {
                    self.inner
                        .item_docs
                        .lock()
                        .unwrap()
                        .insert(item.fingerprint.clone(), item.clone());
                }
            }
            index.insert(item.fingerprint.clone(), item.stream_id.clone());
            inserted += 1;
        }
        Ok(inserted)
    }

    pub fn item_count(&self) -> usize {
        self.inner.items.lock().unwrap().len()
    }

    pub fn item_count_for(&self, stream_id: &str) -> usize {
        self.inner
            .items
            .lock()
            .unwrap()
            .values()
            .filter(|s| *s == stream_id)
            .count()
    }

    pub fn contains_item(&self, fingerprint: &str) -> bool {
        self.inner.items.lock().unwrap().contains_key(fingerprint)
    }

    pub fn get_item(&self, fingerprint: &str) -> Result<Option<FeedItem>, StoreError> {
        match &self.inner.disk {
            None => Ok(self.inner.item_docs.lock().unwrap().get(fingerprint).cloned()),
            Some(disk) => {
                if fingerprint.len() < 2 || !self.contains_item(fingerprint) {
                    return Ok(None);
                }
                let path = disk
                    .root
                    .join("items")
                    .join(&fingerprint[..2])
                    .join(format!("{fingerprint}.json"));
                read_doc(&path).map(Some)
            }
        }
    }

    /// Sorted fingerprints of every stored item.
    pub fn fingerprints(&self) -> Vec<String> {
        let mut fps: Vec<_> = self.inner.items.lock().unwrap().keys().cloned().collect();
        fps.sort();
        fps
    }

    /// Rewrites the fingerprint index without duplicate lines and truncates
    /// the journal.
    pub fn compact(&self) -> Result<CompactReport, StoreError> {
        let Some(disk) = &self.inner.disk else {
            return Ok(CompactReport {
                index_entries: self.item_count(),
                ..Default::default()
            });
        };
        let items = self.inner.items.lock().unwrap();
        let mut index = disk.index.lock().unwrap();
        let index_path = disk.root.join("items").join("index.log");
        let lines_before = match File::open(&index_path) {
            Ok(f) => BufReader::new(f).lines().count(),
            Err(_) => 0,
        };
        let mut sorted: Vec<_> = items.iter().collect();
        sorted.sort();
        let mut body = String::with_capacity(sorted.len() * 80);
        for (fp, stream) in &sorted {
            body.push_str(fp);
            body.push(' ');
            body.push_str(stream);
            body.push('\n');
        }
        let tmp = index_path.with_extension("log.tmp");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &index_path).map_err(io_err(&index_path))?;
        *index = OpenOptions::new()
            .append(true)
            .open(&index_path)
            .map_err(io_err(&index_path))?;

        let mut journal = disk.journal.lock().unwrap();
        let journal_path = disk.root.join("journal.log");
        let reclaimed = journal.file.metadata().map(|m| m.len()).unwrap_or(0);
        journal.file = File::create(&journal_path).map_err(io_err(&journal_path))?;

        Ok(CompactReport {
            index_entries: sorted.len(),
            index_lines_dropped: lines_before.saturating_sub(sorted.len()),
            journal_bytes_reclaimed: reclaimed,
        })
    }
}

fn write_doc<T: Serialize>(path: &Path, value: &T, fsync: bool) -> Result<(), StoreError> {
    let bytes = serde_json::to_vec_pretty(value).expect("documents serialize");
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("doc");
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", uuid::Uuid::new_v4().simple()));
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        if fsync {
            f.sync_all().map_err(io_err(&tmp))?;
        }
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_doc<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| StoreError::Corrupt {
        path: path.to_owned(),
        source,
    })
}

fn is_temp(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.') && n.contains(".tmp-"))
}

fn load_streams(dir: &Path) -> Result<BTreeMap<String, FeedStream>, StoreError> {
    let mut streams = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if is_temp(&path) {
            // Leftover from an interrupted write; the target is intact.
            let _ = fs::remove_file(&path);
            continue;
        }
        if path.extension().is_some_and(|e| e == "json") {
            let s: FeedStream = read_doc(&path)?;
            streams.insert(s.id.clone(), s);
        }
    }
    Ok(streams)
}

/// Loads the fingerprint index and reconciles it with the item documents
/// actually present (a crash can land between the two writes).
fn load_items(dir: &Path) -> Result<HashMap<String, String>, StoreError> {
    let mut items = HashMap::new();
    let index_path = dir.join("index.log");
    if let Ok(f) = File::open(&index_path) {
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&index_path))?;
            if let Some((fp, stream)) = line.split_once(' ') {
                if fp.len() == 64 {
                    items.insert(fp.to_owned(), stream.to_owned());
                }
            }
        }
    }
    let mut on_disk = HashMap::new();
    for shard in fs::read_dir(dir).map_err(io_err(dir))? {
        let shard = shard.map_err(io_err(dir))?.path();
        if !shard.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&shard).map_err(io_err(&shard))? {
            let path = entry.map_err(io_err(&shard))?.path();
            if is_temp(&path) {
                let _ = fs::remove_file(&path);
                continue;
            }
            let Some(fp) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if let Some(stream) = items.get(fp) {
                on_disk.insert(fp.to_owned(), stream.clone());
            } else {
                let item: FeedItem = read_doc(&path)?;
                on_disk.insert(fp.to_owned(), item.stream_id);
            }
        }
    }
    Ok(on_disk)
}

/// Re-applies picks that were journaled but never committed. Returns the
/// ids whose documents changed.
fn replay_journal(
    path: &Path,
    streams: &mut BTreeMap<String, FeedStream>,
) -> Result<Vec<String>, StoreError> {
    let Ok(f) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut pending: BTreeMap<u64, (DateTime<Utc>, Vec<String>)> = BTreeMap::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        // A torn final line is expected after a crash.
        let Ok(record) = serde_json::from_str::<JournalRecord>(&line) else {
            continue;
        };
        match record {
            JournalRecord::Pick { txn, at, ids } => {
                pending.insert(txn, (at, ids));
            }
            JournalRecord::Commit { txn } => {
                pending.remove(&txn);
            }
        }
    }
    let mut changed = Vec::new();
    for (_, (at, ids)) in pending {
        for id in ids {
            let Some(s) = streams.get_mut(&id) else {
                continue;
            };
            if s.status == StreamStatus::InProcess && s.picked_at == Some(at) {
                continue;
            }
            if s.status.can_transition(StreamStatus::InProcess) {
                s.status = StreamStatus::InProcess;
                s.picked_at = Some(at);
                changed.push(id);
            }
        }
    }
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::{validate_stream, ChannelKind, StreamDraft};
    use chrono::TimeZone;
    use std::collections::HashSet;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2018, 6, 17, 15, 0, 0).unwrap()
    }

    fn stream(id: &str, due: DateTime<Utc>) -> FeedStream {
        validate_stream(
            StreamDraft {
                id: Some(id.into()),
                url: format!("https://a.example/{id}"),
                channels: vec![ChannelKind::News],
                next_due: Some(due),
                ..Default::default()
            },
            t0(),
        )
        .unwrap()
    }

    fn item(stream: &str, guid: &str) -> FeedItem {
        FeedItem::new(stream, Some(guid.into()), format!("http://x/{guid}"), guid, None, t0()).unwrap()
    }

    fn disk_store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), Arc::new(ManualClock::new(t0()))).unwrap();
        (dir, store)
    }

    #[test]
    fn read_your_writes_and_last_writer_wins() {
        let (_dir, store) = disk_store();
        let s = stream("s1", t0());
        store.upsert_stream(s.clone()).unwrap();
        assert_eq!(store.get_stream("s1").unwrap(), s);
        let mut changed = s.clone();
        changed.poll_interval = Duration::from_secs(60);
        store.upsert_stream(changed.clone()).unwrap();
        assert_eq!(store.get_stream("s1").unwrap(), changed);
    }

    #[test]
    fn documents_survive_reopen() {
        let (dir, store) = disk_store();
        store.upsert_stream(stream("s1", t0())).unwrap();
        store.insert_items_dedup(&[item("s1", "a")]).unwrap();
        drop(store);
        let reopened = Store::open(dir.path(), Arc::new(ManualClock::new(t0()))).unwrap();
        assert_eq!(reopened.get_stream("s1").unwrap(), stream("s1", t0()));
        assert_eq!(reopened.item_count(), 1);
        assert_eq!(reopened.insert_items_dedup(&[item("s1", "a")]).unwrap(), 0);
        let fp = item("s1", "a").fingerprint;
        assert_eq!(reopened.get_item(&fp).unwrap().unwrap().title, "a");
        assert!(dir.path().join("streams/s1.json").exists());
        assert!(dir.path().join(format!("items/{}/{fp}.json", &fp[..2])).exists());
    }

    #[test]
    fn upsert_many_then_scan() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), Arc::new(ManualClock::new(t0()))).unwrap();
        for i in 0..10_000 {
            store.upsert_stream(stream(&format!("s{i:05}"), t0())).unwrap();
        }
        let on_disk = fs::read_dir(dir.path().join("streams")).unwrap().count();
        assert_eq!(on_disk, 10_000);
        assert_eq!(store.stream_count(), 10_000);
    }

    #[test]
    fn pick_window_and_order() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        let now = t0();
        store.upsert_stream(stream("late", now + chrono::TimeDelta::seconds(60))).unwrap();
        store.upsert_stream(stream("soon", now + chrono::TimeDelta::seconds(3))).unwrap();
        store.upsert_stream(stream("past", now - chrono::TimeDelta::seconds(10))).unwrap();
        let picked = store.pick_due_streams(now, Duration::from_secs(5), 10).unwrap();
        let ids: Vec<_> = picked.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["past", "soon"]);
        for id in ids {
            let s = store.get_stream(id).unwrap();
            assert_eq!(s.status, StreamStatus::InProcess);
            assert_eq!(s.picked_at, Some(now));
        }
        assert!(store.pick_due_streams(now, Duration::from_secs(5), 10).unwrap().is_empty());
    }

    #[test]
    fn pick_ties_break_by_id_and_respect_limit() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        for id in ["c", "a", "b"] {
            store.upsert_stream(stream(id, t0())).unwrap();
        }
        let picked = store.pick_due_streams(t0(), Duration::ZERO, 2).unwrap();
        let ids: Vec<_> = picked.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn stale_recovery_threshold() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        store.upsert_stream(stream("old", t0())).unwrap();
        store.pick_due_streams(t0(), Duration::ZERO, 10).unwrap();
        store.upsert_stream(stream("new", t0())).unwrap();
        let later = t0() + chrono::TimeDelta::minutes(14);
        store.pick_due_streams(later, Duration::ZERO, 10).unwrap();

        let now = t0() + chrono::TimeDelta::minutes(16);
        let recovered = store.recover_stale(now, Duration::from_secs(15 * 60), 10).unwrap();
        assert_eq!(recovered.len(), 1);
        assert_eq!(recovered[0].id, "old");
        assert_eq!(recovered[0].picked_at, Some(now));
        assert_eq!(recovered[0].status, StreamStatus::InProcess);
    }

    #[test]
    fn mark_processed_and_backoff() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        store.upsert_stream(stream("s1", t0())).unwrap();
        store.pick_due_streams(t0(), Duration::ZERO, 1).unwrap();
        let done = store
            .mark_processed("s1", Outcome::Processed, t0(), MarkUpdate::default())
            .unwrap();
        assert_eq!(done.status, StreamStatus::Processed);
        assert_eq!(done.next_due, t0() + chrono::TimeDelta::seconds(300));
        assert_eq!(done.consecutive_failures, 0);

        store.pick_due_streams(done.next_due, Duration::ZERO, 1).unwrap();
        let failed = store
            .mark_processed("s1", Outcome::Failed, t0(), MarkUpdate::default())
            .unwrap();
        assert_eq!(failed.consecutive_failures, 1);
        assert_eq!(failed.next_due, t0() + chrono::TimeDelta::seconds(600));
    }

    #[test]
    fn backoff_is_capped() {
        let base = Duration::from_secs(300);
        assert_eq!(effective_interval(base, 0), base);
        assert_eq!(effective_interval(base, 3), base * 8);
        assert_eq!(effective_interval(base, 5), base * 32);
        assert_eq!(effective_interval(base, 40), base * 32);
    }

    #[test]
    fn mark_requires_in_process() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        store.upsert_stream(stream("s1", t0())).unwrap();
        assert!(matches!(
            store.mark_processed("s1", Outcome::Processed, t0(), MarkUpdate::default()),
            Err(StoreError::IllegalTransition { from: StreamStatus::Idle, .. })
        ));
        assert!(matches!(
            store.mark_processed("zz", Outcome::Processed, t0(), MarkUpdate::default()),
            Err(StoreError::UnknownStream(_))
        ));
    }

    #[test]
    fn mark_updates_validators_and_url() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        store.upsert_stream(stream("s1", t0())).unwrap();
        store.pick_due_streams(t0(), Duration::ZERO, 1).unwrap();
        let moved: Url = "https://b.example/new".parse().unwrap();
        let s = store
            .mark_processed(
                "s1",
                Outcome::Processed,
                t0(),
                MarkUpdate {
                    validators: Some(Validators {
                        etag: Some("\"v1\"".into()),
                        last_modified: None,
                    }),
                    url: Some(moved.clone()),
                },
            )
            .unwrap();
        assert_eq!(s.etag.as_deref(), Some("\"v1\""));
        assert_eq!(s.url, moved);
    }

    #[test]
    fn release_reverts_only_matching_pick() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        store.upsert_stream(stream("s1", t0())).unwrap();
        store.pick_due_streams(t0(), Duration::ZERO, 1).unwrap();
        assert!(!store.release("s1", t0() - chrono::TimeDelta::seconds(1)).unwrap());
        assert!(store.release("s1", t0()).unwrap());
        let s = store.get_stream("s1").unwrap();
        assert_eq!((s.status, s.picked_at), (StreamStatus::Idle, None));
    }

    #[test]
    fn dedup_set_semantics() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        let (a, b, c) = (item("s", "a"), item("s", "b"), item("s", "c"));
        assert_eq!(store.insert_items_dedup(&[a.clone(), b.clone()]).unwrap(), 2);
        assert_eq!(store.insert_items_dedup(&[b, c]).unwrap(), 1);
        assert_eq!(store.item_count(), 3);
        assert_eq!(store.insert_items_dedup(&[a]).unwrap(), 0);
    }

    #[test]
    fn dedup_rejects_forged_fingerprint() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        let mut forged = item("s", "a");
        forged.fingerprint = "0".repeat(64);
        assert!(matches!(
            store.insert_items_dedup(&[forged]),
            Err(StoreError::FingerprintMismatch(_))
        ));
    }

    #[test]
    fn dedup_against_independent_counter() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        let mut distinct = HashSet::new();
        let mut batch = Vec::new();
        let mut produced = 0u32;
        for n in 0..100_000u32 {
            let guid = if n > 0 && rng.random_bool(0.1) {
                format!("g{}", rng.random_range(0..produced))
            } else {
                produced += 1;
                format!("g{}", produced - 1)
            };
            let stream = "s";
            distinct.insert(format!("{stream}|{guid}"));
            batch.push(item(stream, &guid));
            if batch.len() == 1000 {
                store.insert_items_dedup(&batch).unwrap();
                batch.clear();
            }
        }
        assert_eq!(store.item_count(), distinct.len());
    }

    #[test]
    fn get_and_delete() {
        let (_dir, store) = disk_store();
        store.upsert_stream(stream("s1", t0())).unwrap();
        store.insert_items_dedup(&[item("s1", "a")]).unwrap();
        store.delete_stream("s1").unwrap();
        assert!(matches!(store.get_stream("s1"), Err(StoreError::UnknownStream(_))));
        assert!(matches!(store.delete_stream("s1"), Err(StoreError::UnknownStream(_))));
        assert_eq!(store.item_count(), 1, "items are retained");
    }

    #[test]
    fn create_rejects_duplicates() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        store.create_stream(stream("s1", t0())).unwrap();
        assert!(matches!(
            store.create_stream(stream("s1", t0())),
            Err(StoreError::DuplicateStream(_))
        ));
    }

    #[test]
    fn uncommitted_pick_rolls_forward_on_open() {
        let (dir, store) = disk_store();
        store.upsert_stream(stream("s1", t0())).unwrap();
        store.upsert_stream(stream("s2", t0())).unwrap();
        drop(store);
        // Simulate a crash after the journal write but before any document
        // was rewritten.
        let record = JournalRecord::Pick {
            txn: 9,
            at: t0(),
            ids: vec!["s1".into(), "s2".into()],
        };
        let mut line = serde_json::to_string(&record).unwrap();
        line.push('\n');
        line.push_str("{\"op\":\"pick\",\"txn\":10,\"at\""); // torn tail
        fs::write(dir.path().join("journal.log"), line).unwrap();
        fs::write(dir.path().join("streams/.s1.json.tmp-dead"), b"{\"id\":").unwrap();

        let store = Store::open(dir.path(), Arc::new(ManualClock::new(t0()))).unwrap();
        for id in ["s1", "s2"] {
            let s = store.get_stream(id).unwrap();
            assert_eq!(s.status, StreamStatus::InProcess);
            assert_eq!(s.picked_at, Some(t0()));
        }
        assert!(!dir.path().join("streams/.s1.json.tmp-dead").exists());
        let recovered = store
            .recover_stale(t0() + chrono::TimeDelta::minutes(16), Duration::from_secs(900), 10)
            .unwrap();
        assert_eq!(recovered.len(), 2);
    }

    #[test]
    fn index_reconciles_with_documents() {
        let (dir, store) = disk_store();
        store.insert_items_dedup(&[item("s1", "a"), item("s1", "b")]).unwrap();
        drop(store);
        // lose the index entirely
        fs::write(dir.path().join("items/index.log"), b"").unwrap();
        let store = Store::open(dir.path(), Arc::new(ManualClock::new(t0()))).unwrap();
        assert_eq!(store.item_count(), 2);
        assert_eq!(store.insert_items_dedup(&[item("s1", "a")]).unwrap(), 0);
        let report = store.compact().unwrap();
        assert_eq!(report.index_entries, 2);
        let index = fs::read_to_string(dir.path().join("items/index.log")).unwrap();
        assert_eq!(index.lines().count(), 2);
    }

    #[test]
    fn force_pick_refuses_a_stream_in_process() {
        let store = Store::in_memory(Arc::new(ManualClock::new(t0())));
        store.create_stream(stream("s1", t0() + chrono::TimeDelta::days(1))).unwrap();
        store.force_pick("s1", t0()).unwrap();
        assert!(matches!(
            store.force_pick("s1", t0()),
            Err(StoreError::IllegalTransition { .. })
        ));
        assert!(matches!(store.force_pick("nope", t0()), Err(StoreError::UnknownStream(_))));
    }
}
