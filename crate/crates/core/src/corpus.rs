//! Labeled C function corpora: JSONL ingestion, seeded sampling and
//! ratio-preserving assembly of augmented datasets.
//!
//! One JSONL line holds one function:
//! `{"id": string, "func": string, "target": 0|1, "vul_lines": [string], "project": string}`.
//! `id`, `vul_lines` and `project` are optional. Exports add an `"origin"`
//! field.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::SplitMix64;

/// `origin` given to LLM-generated samples.
pub const GENERATED_ORIGIN: &str = "generated";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no valid records ({rejected} lines rejected)")]
    NoValidRecords { path: PathBuf, rejected: usize },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("sample `{id}` is invalid: {reason}")]
    InvalidSample { id: String, reason: SampleDefect },
    #[error("requested {requested} vulnerable samples but only {available} are available")]
    InsufficientVulnerable { requested: usize, available: usize },
    #[error("clean pool holds {available} samples but {needed} are needed to keep the ratio")]
    InsufficientCleanPool { needed: usize, available: usize },
    #[error("sample count must be positive")]
    ZeroCount,
    #[error("base corpus has no vulnerable samples; its ratio is undefined")]
    NoBaseVulnerable,
    #[error("generated sample `{0}` is not labeled vulnerable")]
    GeneratedNotVulnerable(String),
    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),
}

/// Why a single record cannot become a [`CodeSample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleDefect {
    MalformedJson(String),
    MissingField(String),
    BadLabel(String),
    EmptyCode,
    VulLineNotInCode(String),
    CleanWithVulLines,
}

impl fmt::Display for SampleDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleDefect::MalformedJson(e) => write!(f, "malformed JSON: {e}"),
            SampleDefect::MissingField(name) => write!(f, "missing field `{name}`"),
            SampleDefect::BadLabel(v) => write!(f, "label must be 0 or 1, got {v}"),
            SampleDefect::EmptyCode => f.write_str("code is empty after trimming"),
            SampleDefect::VulLineNotInCode(line) => {
                write!(f, "vulnerable line {line:?} does not occur in the code")
            }
            SampleDefect::CleanWithVulLines => f.write_str("clean sample carries vul_lines"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Vulnerable,
    Clean,
}

impl Label {
    pub fn target(self) -> u8 {
        match self {
            Label::Vulnerable => 1,
            Label::Clean => 0,
        }
    }

    pub fn from_target(target: u8) -> Option<Self> {
        match target {
            1 => Some(Label::Vulnerable),
            0 => Some(Label::Clean),
            _ => None,
        }
    }
}

/// One labeled C function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSample {
    pub id: String,
    pub code: String,
    pub label: Label,
    /// Source lines carrying the vulnerability, each a verbatim substring of `code`.
    pub vul_lines: Option<Vec<String>>,
    /// Dataset the sample came from.
    pub origin: String,
    pub meta: BTreeMap<String, String>,
}

impl CodeSample {
    pub fn new(id: impl Into<String>, code: impl Into<String>, label: Label) -> Self {
        Self {
            id: id.into(),
            code: code.into(),
            label,
            vul_lines: None,
            origin: String::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_vul_lines<I, S>(mut self, lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.vul_lines = Some(lines.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = origin.into();
        self
    }

    pub fn is_vulnerable(&self) -> bool {
        self.label == Label::Vulnerable
    }

    /// Vulnerable lines, or an empty slice when the metadata is absent.
    pub fn vul_lines(&self) -> &[String] {
        self.vul_lines.as_deref().unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<(), SampleDefect> {
        if self.code.trim().is_empty() {
            return Err(SampleDefect::EmptyCode);
        }
        if let Some(lines) = &self.vul_lines {
            if self.label == Label::Clean {
                return Err(SampleDefect::CleanWithVulLines);
            }
            if let Some(missing) = lines.iter().find(|l| !self.code.contains(l.as_str())) {
                return Err(SampleDefect::VulLineNotInCode(missing.clone()));
            }
        }
        Ok(())
    }
}

/// Immutable collection of samples with unique ids.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    samples: Vec<CodeSample>,
    by_id: HashMap<String, usize>,
    vulnerable_count: usize,
    clean_count: usize,
}

impl CorpusStore {
    pub fn from_samples(samples: Vec<CodeSample>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(samples.len());
        let mut vulnerable_count = 0;
        for (i, sample) in samples.iter().enumerate() {
            sample.validate().map_err(|reason| CorpusError::InvalidSample {
                id: sample.id.clone(),
                reason,
            })?;
            if by_id.insert(sample.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(sample.id.clone()));
            }
            if sample.is_vulnerable() {
                vulnerable_count += 1;
            }
        }
        let clean_count = samples.len() - vulnerable_count;
        Ok(Self {
            samples,
            by_id,
            vulnerable_count,
            clean_count,
        })
    }

    pub fn samples(&self) -> &[CodeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn vulnerable_count(&self) -> usize {
        self.vulnerable_count
    }

    pub fn clean_count(&self) -> usize {
        self.clean_count
    }

    pub fn get(&self, id: &str) -> Option<&CodeSample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    pub fn vulnerable(&self) -> impl Iterator<Item = &CodeSample> {
        self.samples.iter().filter(|s| s.is_vulnerable())
    }

    pub fn clean(&self) -> impl Iterator<Item = &CodeSample> {
        self.samples.iter().filter(|s| !s.is_vulnerable())
    }

    pub fn into_samples(self) -> Vec<CodeSample> {
        self.samples
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<(), CorpusError> {
        write_samples(self.samples.iter(), out, None)
    }
}

/// Id lookup across one or more stores.
pub trait SampleLookup {
    fn sample(&self, id: &str) -> Option<&CodeSample>;
}

impl SampleLookup for CorpusStore {
    fn sample(&self, id: &str) -> Option<&CodeSample> {
        self.get(id)
    }
}

impl SampleLookup for [&CorpusStore] {
    fn sample(&self, id: &str) -> Option<&CodeSample> {
        self.iter().find_map(|s| s.get(id))
    }
}

impl<const N: usize> SampleLookup for [&CorpusStore; N] {
    fn sample(&self, id: &str) -> Option<&CodeSample> {
        self.as_slice().sample(id)
    }
}

/// Input field names. Defaults follow the canonical line schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMap {
    pub id: String,
    pub code: String,
    pub label: String,
    pub vul_lines: String,
    pub project: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            code: "func".into(),
            label: "target".into(),
            vul_lines: "vul_lines".into(),
            project: "project".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the input file.
    pub line: usize,
    pub defect: SampleDefect,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub store: CorpusStore,
    pub rejected: Vec<Rejection>,
}

/// Reads a JSONL corpus. Samples take the file stem as their origin unless
/// the line carries an `"origin"` field.
pub fn ingest_jsonl(path: &Path, schema: &FieldMap) -> Result<Ingested, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    let origin = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ingest_reader(BufReader::new(file), schema, &origin).map_err(|e| match e {
        CorpusError::NoValidRecords { rejected, .. } => CorpusError::NoValidRecords {
            path: path.to_owned(),
            rejected,
        },
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_owned(),
            source,
        },
        other => other,
    })
}

pub fn ingest_reader<R: BufRead>(
    reader: R,
    schema: &FieldMap,
    origin: &str,
) -> Result<Ingested, CorpusError> {
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, line_no, schema, origin) {
            Ok(sample) => samples.push(sample),
            Err(defect) => {
                tracing::warn!(line = line_no, %defect, "rejected corpus record");
                rejected.push(Rejection {
                    line: line_no,
                    defect,
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(CorpusError::NoValidRecords {
            path: PathBuf::new(),
            rejected: rejected.len(),
        });
    }
    Ok(Ingested {
        store: CorpusStore::from_samples(samples)?,
        rejected,
    })
}

fn parse_record(
    line: &str,
    line_no: usize,
    schema: &FieldMap,
    origin: &str,
) -> Result<CodeSample, SampleDefect> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| SampleDefect::MalformedJson(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(SampleDefect::MalformedJson("not an object".into()));
    };

    let code = match obj.remove(&schema.code) {
        Some(Value::String(s)) => s,
        _ => return Err(SampleDefect::MissingField(schema.code.clone())),
    };
    let label = match obj.remove(&schema.label) {
        Some(v) => parse_label(&v).ok_or_else(|| SampleDefect::BadLabel(v.to_string()))?,
        None => return Err(SampleDefect::MissingField(schema.label.clone())),
    };
    let id = match obj.remove(&schema.id) {
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("line-{line_no}"),
    };
    let vul_lines = match obj.remove(&schema.vul_lines) {
        Some(Value::Array(items)) => {
            let lines = items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(SampleDefect::MalformedJson(format!(
                        "vul_lines entry {other} is not a string"
                    ))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            (!lines.is_empty()).then_some(lines)
        }
        Some(Value::Null) | None => None,
        Some(other) => {
            return Err(SampleDefect::MalformedJson(format!(
                "vul_lines must be an array, got {other}"
            )))
        }
    };
    let origin = match obj.remove("origin") {
        Some(Value::String(s)) => s,
        _ => origin.to_owned(),
    };

    let mut meta = BTreeMap::new();
    if let Some(Value::String(project)) = obj.remove(&schema.project) {
        meta.insert("project".to_owned(), project);
    }
    for (key, value) in obj {
        if let Value::String(s) = value {
            meta.insert(key, s);
        }
    }

    let sample = CodeSample {
        id,
        code,
        label,
        vul_lines,
        origin,
        meta,
    };
    sample.validate()?;
    Ok(sample)
}

fn parse_label(v: &Value) -> Option<Label> {
    match v {
        Value::Number(n) => n.as_u64().and_then(|t| u8::try_from(t).ok()).and_then(Label::from_target),
        Value::Bool(true) => Some(Label::Vulnerable),
        Value::Bool(false) => Some(Label::Clean),
        Value::String(s) => s.trim().parse::<u8>().ok().and_then(Label::from_target),
        _ => None,
    }
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    id: &'a str,
    func: &'a str,
    target: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    vul_lines: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    origin: Option<&'a str>,
    #[serde(flatten)]
    meta: &'a BTreeMap<String, String>,
}

/// Writes samples in the canonical line schema. With `origin_tag` set, every
/// line carries that `"origin"`; otherwise the sample's own origin is written
/// when non-empty.
pub fn write_samples<'a, I, W>(samples: I, mut out: W, origin_tag: Option<&str>) -> Result<(), CorpusError>
where
    I: IntoIterator<Item = &'a CodeSample>,
    W: Write,
{
    for s in samples {
        let origin = origin_tag.or((!s.origin.is_empty()).then_some(s.origin.as_str()));
        let record = SampleRecord {
            id: &s.id,
            func: &s.code,
            target: s.label.target(),
            vul_lines: s.vul_lines.as_deref(),
            origin,
            meta: &s.meta,
        };
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Seeded draw of `n` distinct vulnerable samples.
///
/// Candidates are taken in store order and permuted with
/// [`SplitMix64::partial_shuffle`], so for a fixed seed the result for `n` is
/// a prefix of the result for `n + 1`.
pub fn sample_vulnerable(store: &CorpusStore, n: usize, seed: u64) -> Result<Vec<&CodeSample>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::ZeroCount);
    }
    let mut pool: Vec<&CodeSample> = store.vulnerable().collect();
    if n > pool.len() {
        return Err(CorpusError::InsufficientVulnerable {
            requested: n,
            available: pool.len(),
        });
    }
    SplitMix64::new(seed).partial_shuffle(&mut pool, n);
    pool.truncate(n);
    Ok(pool)
}

/// Clean samples needed to keep `base_vul:base_clean` after adding
/// `generated` vulnerable samples, rounded half up.
pub fn balancing_clean_count(generated: usize, base_vul: usize, base_clean: usize) -> usize {
    if generated == 0 {
        return 0;
    }
    let (g, v, c) = (generated as u128, base_vul as u128, base_clean as u128);
    ((2 * g * c + v) / (2 * v)) as usize
}

/// Base corpus plus generated vulnerable samples plus clean samples that
/// restore the base ratio.
#[derive(Debug, Clone)]
pub struct AugmentedDataset<'a> {
    pub base: &'a CorpusStore,
    pub generated_vulnerable: Vec<CodeSample>,
    pub added_clean: Vec<CodeSample>,
    /// `(vulnerable, clean)` counts of the base corpus.
    pub target_ratio: (usize, usize),
}

impl AugmentedDataset<'_> {
    pub fn vulnerable_count(&self) -> usize {
        self.base.vulnerable_count() + self.generated_vulnerable.len()
    }

    pub fn clean_count(&self) -> usize {
        self.base.clean_count() + self.added_clean.len()
    }

    pub fn len(&self) -> usize {
        self.vulnerable_count() + self.clean_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes base, generated and added clean samples with origins
    /// `base`, `generated` and `clean-pool`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        write_samples(self.base.samples(), &mut out, Some("base"))?;
        write_samples(&self.generated_vulnerable, &mut out, Some(GENERATED_ORIGIN))?;
        write_samples(&self.added_clean, &mut out, Some("clean-pool"))
    }
}

pub fn assemble_augmented<'a>(
    store: &'a CorpusStore,
    generated: Vec<CodeSample>,
    clean_pool: &CorpusStore,
    seed: u64,
) -> Result<AugmentedDataset<'a>, CorpusError> {
    let target_ratio = (store.vulnerable_count(), store.clean_count());
    if generated.is_empty() {
        return Ok(AugmentedDataset {
            base: store,
            generated_vulnerable: Vec::new(),
            added_clean: Vec::new(),
            target_ratio,
        });
    }
    if store.vulnerable_count() == 0 {
        return Err(CorpusError::NoBaseVulnerable);
    }
    let generated_vulnerable = generated
        .into_iter()
        .map(|mut s| {
            if !s.is_vulnerable() {
                return Err(CorpusError::GeneratedNotVulnerable(s.id));
            }
            s.origin = GENERATED_ORIGIN.to_owned();
            Ok(s)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let needed = balancing_clean_count(
        generated_vulnerable.len(),
        store.vulnerable_count(),
        store.clean_count(),
    );
    // The base corpus may double as the pool; its own samples are never re-added.
    let mut pool: Vec<&CodeSample> = clean_pool.clean().filter(|s| store.get(&s.id).is_none()).collect();
    if needed > pool.len() {
        return Err(CorpusError::InsufficientCleanPool {
            needed,
            available: pool.len(),
        });
    }
    SplitMix64::new(seed).partial_shuffle(&mut pool, needed);
    let added_clean = pool.into_iter().take(needed).cloned().collect();

    Ok(AugmentedDataset {
        base: store,
        generated_vulnerable,
        added_clean,
        target_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn ingest(text: &str) -> Result<Ingested, CorpusError> {
        ingest_reader(Cursor::new(text), &FieldMap::default(), "test")
    }

    fn store_of(n_vul: usize, n_clean: usize) -> CorpusStore {
        let mut samples = Vec::new();
        for i in 0..n_vul {
            samples.push(CodeSample::new(format!("v{i}"), format!("int v{i}(){{return {i};}}"), Label::Vulnerable));
        }
        for i in 0..n_clean {
            samples.push(CodeSample::new(format!("c{i}"), format!("int c{i}(){{return {i};}}"), Label::Clean));
        }
        CorpusStore::from_samples(samples).unwrap()
    }

    #[test]
    fn counts_follow_labels() {
        let text = r#"{"func":"int a(){}","target":1}
{"func":"int b(){}","target":0}
{"func":"int c(){}","target":1}
"#;
        let got = ingest(text).unwrap();
        assert_eq!(got.store.vulnerable_count(), 2);
        assert_eq!(got.store.clean_count(), 1);
        assert!(got.rejected.is_empty());
        assert_eq!(got.store.samples()[1].id, "line-2");
    }

    #[test]
    fn vul_line_outside_code_rejects_only_that_line() {
        let text = r#"{"id":"a","func":"int a(){x=1;}","target":1,"vul_lines":["x=1;"]}
{"id":"b","func":"int b(){y=2;}","target":1,"vul_lines":["z=3;"]}
{"id":"c","func":"int c(){}","target":0}
"#;
        let got = ingest(text).unwrap();
        assert_eq!(got.store.len(), 2);
        assert_eq!(got.rejected.len(), 1);
        assert_eq!(got.rejected[0].line, 2);
        assert!(matches!(got.rejected[0].defect, SampleDefect::VulLineNotInCode(_)));
    }

    #[test]
    fn rejects_bad_records_with_line_numbers() {
        let text = "not json\n{\"func\":\"  \",\"target\":1}\n{\"func\":\"f\",\"target\":7}\n{\"func\":\"g(){}\",\"target\":0,\"vul_lines\":[\"g\"]}\n{\"func\":\"ok(){}\",\"target\":0}\n";
        let got = ingest(text).unwrap();
        let lines: Vec<usize> = got.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![1, 2, 3, 4]);
        assert_eq!(got.rejected[1].defect, SampleDefect::EmptyCode);
        assert_eq!(got.rejected[3].defect, SampleDefect::CleanWithVulLines);
    }

    #[test]
    fn duplicate_ids_fail_ingestion() {
        let text = "{\"id\":\"x\",\"func\":\"a\",\"target\":1}\n{\"id\":\"x\",\"func\":\"b\",\"target\":0}\n";
        assert!(matches!(ingest(text), Err(CorpusError::DuplicateId(id)) if id == "x"));
    }

    #[test]
    fn zero_valid_records_is_an_error() {
        assert!(matches!(ingest("{}\n"), Err(CorpusError::NoValidRecords { rejected: 1, .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = ingest_jsonl(Path::new("/nonexistent/corpus.jsonl"), &FieldMap::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn custom_field_names() {
        let schema = FieldMap {
            id: "idx".into(),
            code: "code".into(),
            label: "label".into(),
            vul_lines: "lines".into(),
            project: "repo".into(),
        };
        let text = "{\"idx\":3,\"code\":\"int f(){a;}\",\"label\":1,\"lines\":[\"a;\"],\"repo\":\"qemu\"}\n";
        let got = ingest_reader(Cursor::new(text), &schema, "d").unwrap();
        let s = &got.store.samples()[0];
        assert_eq!(s.id, "3");
        assert_eq!(s.vul_lines(), ["a;".to_string()]);
        assert_eq!(s.meta.get("project").map(String::as_str), Some("qemu"));
    }

    #[test]
    fn devign_shaped_counts() {
        let mut text = String::new();
        for i in 0..(10768 + 12024) {
            let target = u8::from(i < 10768);
            text.push_str(&format!("{{\"func\":\"int f{i}(){{}}\",\"target\":{target}}}\n"));
        }
        let got = ingest(&text).unwrap();
        assert_eq!((got.store.vulnerable_count(), got.store.clean_count()), (10768, 12024));
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let store = store_of(30, 5);
        let drawn = sample_vulnerable(&store, 30, 11).unwrap();
        let mut ids: Vec<&str> = drawn.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        let mut expected: Vec<String> = (0..30).map(|i| format!("v{i}")).collect();
        expected.sort_unstable();
        assert_eq!(ids, expected);
    }

    #[test]
    fn sampling_is_deterministic() {
        let store = store_of(50, 0);
        let a = sample_vulnerable(&store, 20, 3).unwrap();
        let b = sample_vulnerable(&store, 20, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_errors() {
        let store = store_of(3, 10);
        assert!(matches!(sample_vulnerable(&store, 4, 0), Err(CorpusError::InsufficientVulnerable { requested: 4, available: 3 })));
        assert!(matches!(sample_vulnerable(&store, 0, 0), Err(CorpusError::ZeroCount)));
    }

    #[test]
    fn assemble_identity_when_nothing_generated() {
        let base = store_of(4, 5);
        let pool = store_of(0, 10);
        let ds = assemble_augmented(&base, vec![], &pool, 1).unwrap();
        assert!(ds.added_clean.is_empty());
        assert_eq!((ds.vulnerable_count(), ds.clean_count()), (4, 5));
    }

    #[test]
    fn assemble_unit_ratio() {
        let base = store_of(10, 10);
        let pool = store_of(0, 150);
        let generated: Vec<_> = (0..100)
            .map(|i| CodeSample::new(format!("g{i}"), "int g(){}", Label::Vulnerable))
            .collect();
        let ds = assemble_augmented(&base, generated, &pool, 1).unwrap();
        assert_eq!(ds.added_clean.len(), 100);
        assert!(ds.generated_vulnerable.iter().all(|s| s.origin == GENERATED_ORIGIN));
    }

    #[test]
    fn base_samples_are_never_re_added() {
        let base = store_of(4, 6);
        let generated: Vec<_> = (0..4)
            .map(|i| CodeSample::new(format!("g{i}"), "int g(){}", Label::Vulnerable))
            .collect();
        let ds = assemble_augmented(&base, generated, &store_of(0, 12), 3).unwrap();
        assert_eq!(ds.added_clean.len(), 6);
        assert!(ds.added_clean.iter().all(|s| base.get(&s.id).is_none()));
    }

    #[test]
    fn devign_balancing_count() {
        assert_eq!(balancing_clean_count(5000, 10768, 12024), 5583);
        // 5 * 3 / 2 = 7.5 rounds up
        assert_eq!(balancing_clean_count(5, 2, 3), 8);
    }

    #[test]
    fn assemble_errors() {
        let base = store_of(2, 3);
        // Same ids as the base's clean samples, so nothing in it is eligible.
        let small_pool = store_of(0, 3);
        let generated = vec![CodeSample::new("g", "int g(){}", Label::Vulnerable); 5];
        assert!(matches!(
            assemble_augmented(&base, generated, &small_pool, 0),
            Err(CorpusError::InsufficientCleanPool { needed: 8, available: 0 })
        ));
        let clean_gen = vec![CodeSample::new("g", "int g(){}", Label::Clean)];
        assert!(matches!(
            assemble_augmented(&base, clean_gen, &small_pool, 0),
            Err(CorpusError::GeneratedNotVulnerable(_))
        ));
    }

    #[test]
    fn export_tags_origins() {
        let base = store_of(1, 1);
        let pool = store_of(0, 4);
        let generated = vec![CodeSample::new("g0", "int g(){}", Label::Vulnerable)];
        let ds = assemble_augmented(&base, generated, &pool, 9).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let origins: Vec<String> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["origin"].as_str().unwrap().to_owned())
            .collect();
        assert_eq!(origins, ["base", "base", "generated", "clean-pool"]);
    }

    fn arb_sample(i: usize) -> impl Strategy<Value = CodeSample> {
        (
            "[a-z ;=(){}0-9]{1,40}",
            any::<bool>(),
            proptest::option::of("[a-z]{1,8}"),
            proptest::collection::vec(0usize..5, 0..3),
        )
            .prop_map(move |(body, vulnerable, project, picks)| {
                let code = format!("int f{i}() {{ {body} }}");
                let label = if vulnerable { Label::Vulnerable } else { Label::Clean };
                let mut s = CodeSample::new(format!("s{i}"), code.clone(), label).with_origin("prop");
                if vulnerable && !picks.is_empty() {
                    let chars: Vec<char> = code.chars().collect();
                    s.vul_lines = Some(
                        picks
                            .iter()
                            .map(|&p| chars[p..p + 3].iter().collect())
                            .collect(),
                    );
                }
                if let Some(p) = project {
                    s.meta.insert("project".into(), p);
                }
                s
            })
    }

    proptest! {
        #[test]
        fn export_then_ingest_is_lossless(samples in (1usize..8).prop_flat_map(|n| {
            (0..n).map(arb_sample).collect::<Vec<_>>()
        })) {
            let store = CorpusStore::from_samples(samples).unwrap();
            let mut buf = Vec::new();
            store.write_jsonl(&mut buf).unwrap();
            let back = ingest_reader(Cursor::new(buf), &FieldMap::default(), "other").unwrap();
            prop_assert!(back.rejected.is_empty());
            prop_assert_eq!(back.store.samples(), store.samples());
        }

        #[test]
        fn sampling_is_prefix_stable(n_vul in 2usize..60, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let store = store_of(n_vul, 3);
            let n = ((n_vul - 1) as f64 * frac) as usize + 1;
            let small = sample_vulnerable(&store, n, seed).unwrap();
            let large = sample_vulnerable(&store, n.min(n_vul - 1) + 1, seed).unwrap();
            prop_assert_eq!(&large[..n], &small[..]);
        }

        #[test]
        fn assembled_ratio_within_one_sample(
            base_vul in 1usize..200,
            base_clean in 1usize..200,
            generated in 0usize..300,
        ) {
            let added = balancing_clean_count(generated, base_vul, base_clean);
            let target = base_vul as f64 / base_clean as f64;
            let final_vul = (base_vul + generated) as f64;
            let final_clean = (base_clean + added) as f64;
            let got = final_vul / final_clean;
            // one clean sample more or fewer bounds the achievable error
            let slack = (final_vul / (final_clean - 1.0) - final_vul / (final_clean + 1.0)).abs();
            prop_assert!((got - target).abs() <= slack, "got {got} target {target} slack {slack}");
        }
    }
}
