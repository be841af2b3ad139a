//! Content-addressed media pool plus an append-only JSONL journal of records.
//!
//! Layout under the data root:
//!
//! ```text
//! <root>/records.jsonl      one full record snapshot per line, last line wins
//! <root>/pool/<hh>/<hash>   media bytes keyed by their SHA-256
//! ```
//!
//! The store is a single-writer value: every mutation takes `&mut self`.
//! Callers that need concurrent readers wrap it in a lock and hand out
//! cloned [`DataRecord`]s.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::profiler::ProfileReport;

pub const DATA_DIR_ENV: &str = "ZCURATE_DATA_DIR";
const JOURNAL: &str = "records.jsonl";
const POOL: &str = "pool";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionLevel {
    Long,
    Medium,
    Short,
    Tags,
    SimulatedUser,
    Difference,
}

impl CaptionLevel {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "long" => CaptionLevel::Long,
            "medium" => CaptionLevel::Medium,
            "short" => CaptionLevel::Short,
            "tags" => CaptionLevel::Tags,
            "simulated_user" => CaptionLevel::SimulatedUser,
            "difference" => CaptionLevel::Difference,
            other => return Err(Error::UnknownCaptionLevel(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(Modality::Image),
            "text" => Some(Modality::Text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Raw,
    Profiled,
    Kept,
    Dropped(String),
    Sampled,
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Raw => "raw",
            Status::Profiled => "profiled",
            Status::Kept => "kept",
            Status::Dropped(_) => "dropped",
            Status::Sampled => "sampled",
        }
    }

    /// Allowed edges: raw→profiled→{kept, dropped}, kept→sampled, and
    /// raw→dropped for records that fail to decode during profiling.
    pub fn can_transition_to(&self, next: &Status) -> bool {
        matches!(
            (self, next),
            (Status::Raw, Status::Profiled)
                | (Status::Raw, Status::Dropped(_))
                | (Status::Profiled, Status::Kept)
                | (Status::Profiled, Status::Dropped(_))
                | (Status::Kept, Status::Sampled)
        )
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Status::Dropped(reason) => write!(f, "dropped({reason})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRoleKind {
    Input,
    Edit,
    Frame,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRole {
    pub group: String,
    pub role: PairRoleKind,
    /// Editing instruction that produced this version, for `edit` members.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub id: String,
    pub media_ref: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_text: Option<String>,
    #[serde(default)]
    pub captions: BTreeMap<CaptionLevel, String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub embeddings: BTreeMap<Modality, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_role: Option<PairRole>,
    pub status: Status,
}

impl DataRecord {
    pub fn embedding(&self, modality: Modality) -> Option<&[f64]> {
        self.embeddings.get(&modality).map(Vec::as_slice)
    }

    pub fn quality_score(&self) -> Option<f64> {
        let scores = &self.profile.as_ref()?.external_scores;
        if scores.is_empty() {
            return None;
        }
        Some(scores.values().sum::<f64>() / scores.len() as f64)
    }
}

/// Partial update applied by [`RecordStore::update_record`].
#[derive(Debug, Clone, Default)]
pub struct RecordPatch {
    pub status: Option<Status>,
    pub profile: Option<ProfileReport>,
    pub captions: BTreeMap<CaptionLevel, String>,
    pub tags: Option<Vec<String>>,
    pub embeddings: BTreeMap<Modality, Vec<f64>>,
    pub pair_role: Option<PairRole>,
}

impl RecordPatch {
    pub fn status(status: Status) -> Self {
        RecordPatch {
            status: Some(status),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub added: usize,
    pub rejected: usize,
    pub reject_reasons: BTreeMap<String, usize>,
}

impl IngestSummary {
    fn reject(&mut self, reason: &str) {
        self.rejected += 1;
        *self.reject_reasons.entry(reason.to_string()).or_default() += 1;
    }
}

/// One line of the ingest JSONL schema.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_b64: Option<String>,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_text: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub captions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairRole>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("zcurate-data"))
}

#[derive(Debug)]
pub struct RecordStore {
    root: PathBuf,
    records: BTreeMap<String, DataRecord>,
    dims: BTreeMap<Modality, usize>,
    journal: BufWriter<File>,
}

impl RecordStore {
    /// Opens (or creates) a store rooted at `root`, replaying the journal.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(POOL)).map_err(|e| Error::io(&root, e))?;
        let journal_path = root.join(JOURNAL);
        let mut records = BTreeMap::new();
        if journal_path.exists() {
            let file = File::open(&journal_path).map_err(|e| Error::io(&journal_path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&journal_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                // a torn final line from a crash is skipped
                let Ok(record) = serde_json::from_str::<DataRecord>(&line) else {
                    log::warn!("skipping unreadable journal line in {}", journal_path.display());
                    continue;
                };
                records.insert(record.id.clone(), record);
            }
        }
        let mut dims = BTreeMap::new();
        for record in records.values() {
            for (m, v) in &record.embeddings {
                dims.entry(*m).or_insert(v.len());
            }
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(|e| Error::io(&journal_path, e))?;
        Ok(RecordStore {
            root,
            records,
            dims,
            journal: BufWriter::new(journal),
        })
    }

    pub fn open_default() -> Result<Self> {
        Self::open(default_data_dir())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in ascending id order.
    pub fn records(&self) -> impl Iterator<Item = &DataRecord> {
        self.records.values()
    }

    pub fn media_ref_for(id: &str) -> String {
        format!("{POOL}/{}/{}", &id[..2], id)
    }

    pub fn media_path(&self, id: &str) -> PathBuf {
        self.root.join(Self::media_ref_for(id))
    }

    /// Stores bytes under their content hash and returns the hash.
    pub fn put_media(&mut self, bytes: &[u8]) -> Result<String> {
        if bytes.is_empty() {
            return Err(Error::EmptyMedia);
        }
        let id = content_hash(bytes);
        let path = self.media_path(&id);
        if !path.exists() {
            let dir = path.parent().expect("pool shard");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(id)
    }

    pub fn read_media(&self, id: &str) -> Result<Vec<u8>> {
        if id.len() < 2 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::NotFound(id.to_string()));
        }
        let path = self.media_path(id);
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(id.to_string()),
            _ => Error::io(&path, e),
        })
    }

    pub fn get_record(&self, id: &str) -> Result<DataRecord> {
        self.records
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    pub fn update_record(&mut self, id: &str, patch: RecordPatch) -> Result<DataRecord> {
        let current = self.records.get(id).ok_or_else(|| Error::NotFound(id.to_string()))?;
        let mut next = current.clone();
        if let Some(status) = patch.status {
            if !current.status.can_transition_to(&status) {
                return Err(Error::BadTransition {
                    from: current.status.to_string(),
                    to: status.to_string(),
                });
            }
            next.status = status;
        }
        for (m, v) in &patch.embeddings {
            self.check_dim(*m, v.len())?;
        }
        if let Some(profile) = patch.profile {
            next.profile = Some(profile);
        }
        next.captions.extend(patch.captions);
        if let Some(tags) = patch.tags {
            next.tags = tags;
        }
        next.embeddings.extend(patch.embeddings);
        if let Some(role) = patch.pair_role {
            next.pair_role = Some(role);
        }
        self.write(next.clone())?;
        Ok(next)
    }

    /// Inserts a new raw record for media already in the pool, or merges
    /// metadata into the existing record with the same id.
    pub fn upsert(&mut self, record: DataRecord) -> Result<DataRecord> {
        for (m, v) in &record.embeddings {
            self.check_dim(*m, v.len())?;
        }
        let merged = match self.records.get(&record.id) {
            None => record,
            Some(existing) => {
                let mut merged = existing.clone();
                if merged.alt_text.is_none() {
                    merged.alt_text = record.alt_text;
                }
                for (level, text) in record.captions {
                    merged.captions.entry(level).or_insert(text);
                }
                for tag in record.tags {
                    if !merged.tags.contains(&tag) {
                        merged.tags.push(tag);
                    }
                }
                for (m, v) in record.embeddings {
                    merged.embeddings.entry(m).or_insert(v);
                }
                if merged.pair_role.is_none() {
                    merged.pair_role = record.pair_role;
                }
                merged
            }
        };
        if self.records.get(&merged.id) != Some(&merged) {
            self.write(merged.clone())?;
        }
        Ok(merged)
    }

    fn check_dim(&mut self, modality: Modality, len: usize) -> Result<()> {
        match self.dims.get(&modality) {
            Some(&expected) if expected != len => Err(Error::DimMismatch { expected, got: len }),
            Some(_) => Ok(()),
            None => {
                self.dims.insert(modality, len);
                Ok(())
            }
        }
    }

    fn write(&mut self, record: DataRecord) -> Result<()> {
        let line = serde_json::to_string(&record)?;
        let path = self.root.join(JOURNAL);
        writeln!(self.journal, "{line}").map_err(|e| Error::io(&path, e))?;
        self.journal.flush().map_err(|e| Error::io(&path, e))?;
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    /// Ingests a JSONL file. `media_ref` paths resolve relative to the
    /// file's directory.
    pub fn ingest_jsonl(&mut self, path: impl AsRef<Path>) -> Result<IngestSummary> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut summary = IngestSummary::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match self.ingest_line(&line, base) {
                Ok(()) => summary.added += 1,
                Err(reason) => summary.reject(reason),
            }
        }
        Ok(summary)
    }

    fn ingest_line(&mut self, line: &str, base: &Path) -> std::result::Result<(), &'static str> {
        let parsed: IngestLine = serde_json::from_str(line).map_err(|_| "parse")?;
        let bytes = match (&parsed.media_b64, &parsed.media_ref) {
            (Some(b64), _) => base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|_| "parse")?,
            (None, Some(rel)) => fs::read(base.join(rel)).map_err(|_| "media_missing")?,
            (None, None) => return Err("media_missing"),
        };
        let mut captions = BTreeMap::new();
        for (level, text) in parsed.captions {
            let level = CaptionLevel::parse(&level).map_err(|_| "bad_caption_level")?;
            captions.insert(level, text);
        }
        let mut embeddings = BTreeMap::new();
        for (modality, v) in parsed.embeddings {
            let m = Modality::parse(&modality).ok_or("bad_modality")?;
            if let Some(&expected) = self.dims.get(&m) {
                if expected != v.len() {
                    return Err("dim_mismatch");
                }
            }
            embeddings.insert(m, v);
        }
        let id = self.put_media(&bytes).map_err(|e| match e {
            Error::EmptyMedia => "empty_media",
            _ => "media_write",
        })?;
        let record = DataRecord {
            media_ref: Self::media_ref_for(&id),
            id,
            source: parsed.source,
            alt_text: parsed.alt_text,
            captions,
            tags: parsed.tags,
            embeddings,
            profile: None,
            pair_role: parsed.pair,
            status: Status::Raw,
        };
        self.upsert(record).map_err(|_| "dim_mismatch")?;
        Ok(())
    }

    /// Writes every record back out in the ingest schema, in id order.
    pub fn export_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for record in self.records.values() {
            let line = IngestLine {
                media_ref: Some(record.media_ref.clone()),
                media_b64: None,
                source: record.source.clone(),
                alt_text: record.alt_text.clone(),
                captions: record
                    .captions
                    .iter()
                    .map(|(k, v)| {
                        let key = serde_json::to_value(k).expect("level serializes");
                        (key.as_str().unwrap_or_default().to_string(), v.clone())
                    })
                    .collect(),
                tags: record.tags.clone(),
                embeddings: record
                    .embeddings
                    .iter()
                    .map(|(k, v)| {
                        let key = serde_json::to_value(k).expect("modality serializes");
                        (key.as_str().unwrap_or_default().to_string(), v.clone())
                    })
                    .collect(),
                pair: record.pair_role.clone(),
            };
            let s = serde_json::to_string(&line)?;
            writeln!(out, "{s}").map_err(|e| Error::io("<export>", e))?;
        }
        Ok(())
    }

    /// Rewrites the journal with one line per record.
    pub fn compact(&mut self) -> Result<()> {
        let path = self.root.join(JOURNAL);
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
            for record in self.records.values() {
                writeln!(w, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&tmp, e))?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        let journal = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        self.journal = BufWriter::new(journal);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, RecordStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::open(dir.path()).unwrap();
        (dir, store)
    }

    fn b64(bytes: &[u8]) -> String {
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    #[test]
    fn put_media_is_content_addressed() {
        let (_d, mut s) = store();
        let a = s.put_media(b"hello").unwrap();
        let b = s.put_media(b"hello").unwrap();
        assert_eq!(a, b);
        let c = s.put_media(b"hellp").unwrap();
        assert_ne!(a, c);
        assert!(s.media_path(&a).ends_with(format!("pool/{}/{}", &a[..2], a)));
        assert!(matches!(s.put_media(b""), Err(Error::EmptyMedia)));
    }

    #[test]
    fn ingest_counts_and_merges() {
        let (dir, mut s) = store();
        let p = dir.path().join("in.jsonl");
        let lines = [
            format!(r#"{{"media_b64":"{}","source":"t2i","tags":["cat"]}}"#, b64(b"one")),
            format!(r#"{{"media_b64":"{}","source":"t2i"}}"#, b64(b"two")),
            "{not json".to_string(),
            format!(
                r#"{{"media_b64":"{}","source":"i2i","captions":{{"short":"x"}}}}"#,
                b64(b"three")
            ),
        ];
        fs::write(&p, lines.join("\n")).unwrap();
        let summary = s.ingest_jsonl(&p).unwrap();
        assert_eq!(summary.added, 3);
        assert_eq!(summary.rejected, 1);
        assert_eq!(summary.reject_reasons.get("parse"), Some(&1));

        let again = dir.path().join("again.jsonl");
        fs::write(
            &again,
            format!(r#"{{"media_b64":"{}","source":"t2i","tags":["dog"]}}"#, b64(b"one")),
        )
        .unwrap();
        let summary = s.ingest_jsonl(&again).unwrap();
        assert_eq!((summary.added, summary.rejected), (1, 0));
        assert_eq!(s.len(), 3);
        let rec = s.get_record(&content_hash(b"one")).unwrap();
        assert_eq!(rec.tags, vec!["cat", "dog"]);
    }

    #[test]
    fn ingest_empty_file_and_missing_media() {
        let (dir, mut s) = store();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert_eq!(s.ingest_jsonl(&p).unwrap(), IngestSummary::default());

        fs::write(&p, r#"{"media_ref":"nope.png","source":"x"}"#).unwrap();
        let summary = s.ingest_jsonl(&p).unwrap();
        assert_eq!(summary.reject_reasons.get("media_missing"), Some(&1));

        assert!(matches!(
            s.ingest_jsonl(dir.path().join("absent.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unknown_caption_level_is_rejected() {
        let (dir, mut s) = store();
        let p = dir.path().join("in.jsonl");
        fs::write(
            &p,
            format!(r#"{{"media_b64":"{}","captions":{{"poem":"x"}}}}"#, b64(b"a")),
        )
        .unwrap();
        let summary = s.ingest_jsonl(&p).unwrap();
        assert_eq!(summary.reject_reasons.get("bad_caption_level"), Some(&1));
    }

    #[test]
    fn embedding_dims_are_uniform() {
        let (dir, mut s) = store();
        let p = dir.path().join("in.jsonl");
        let lines = [
            format!(r#"{{"media_b64":"{}","embeddings":{{"image":[1,0,0,0]}}}}"#, b64(b"a")),
            format!(r#"{{"media_b64":"{}","embeddings":{{"image":[1,0]}}}}"#, b64(b"b")),
        ];
        fs::write(&p, lines.join("\n")).unwrap();
        let summary = s.ingest_jsonl(&p).unwrap();
        assert_eq!(summary.reject_reasons.get("dim_mismatch"), Some(&1));
    }

    #[test]
    fn status_machine() {
        let (dir, mut s) = store();
        let p = dir.path().join("in.jsonl");
        fs::write(&p, format!(r#"{{"media_b64":"{}"}}"#, b64(b"a"))).unwrap();
        s.ingest_jsonl(&p).unwrap();
        let id = content_hash(b"a");
        let err = s.update_record(&id, RecordPatch::status(Status::Sampled)).unwrap_err();
        assert_eq!(err.code(), "bad_transition");
        s.update_record(&id, RecordPatch::status(Status::Profiled)).unwrap();
        assert_eq!(s.get_record(&id).unwrap().status, Status::Profiled);
        assert_eq!(s.get_record("ffff").unwrap_err().code(), "not_found");
    }

    #[test]
    fn journal_replays_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let id;
        {
            let mut s = RecordStore::open(dir.path()).unwrap();
            let p = dir.path().join("in.jsonl");
            fs::write(&p, format!(r#"{{"media_b64":"{}","source":"s"}}"#, b64(b"z"))).unwrap();
            s.ingest_jsonl(&p).unwrap();
            id = content_hash(b"z");
            s.update_record(&id, RecordPatch::status(Status::Profiled)).unwrap();
        }
        let mut s = RecordStore::open(dir.path()).unwrap();
        assert_eq!(s.get_record(&id).unwrap().status, Status::Profiled);
        s.compact().unwrap();
        let s = RecordStore::open(dir.path()).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn export_round_trips_non_derived_fields() {
        let (dir, mut s) = store();
        fs::write(dir.path().join("img.bin"), b"pixels").unwrap();
        let line = r#"{"media_ref":"img.bin","source":"t2i","alt_text":"alt","captions":{"long":"a long one","short":"s"},"tags":["a","b"],"embeddings":{"image":[0.1,-0.25,3.0,-0.9335380160083309]}}"#;
        let p = dir.path().join("in.jsonl");
        fs::write(&p, line).unwrap();
        s.ingest_jsonl(&p).unwrap();
        let mut out = Vec::new();
        s.export_jsonl(&mut out).unwrap();
        let exported: serde_json::Value = serde_json::from_slice(&out).unwrap();
        let original: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["source", "alt_text", "captions", "tags", "embeddings"] {
            assert_eq!(
                serde_json::to_string(&exported[key]).unwrap(),
                serde_json::to_string(&original[key]).unwrap(),
                "{key}"
            );
        }
    }
}
