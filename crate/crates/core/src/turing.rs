//! Blinded real-vs-synthetic reading study: balanced case sets, reader
//! sessions persisted to an append-only log, and per-method error rates.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::organ::Organ;
use crate::volume::{load_mask, load_volume, rescale_clipped, Volume, VolumeFormat, HU_MAX, HU_MIN};

/// Stated in every error report.
pub const ERROR_RULE: &str = "per method and cell: wrong = method cases judged real + real cases judged synthetic, \
over all real and method cases of the cell; real-case errors count toward every method";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Source {
    Real,
    Method(String),
}

impl From<Source> for String {
    fn from(s: Source) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Source {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        match s.as_str() {
            "" => Err(Error::Format("empty source name".into())),
            "real" => Ok(Source::Real),
            _ => Ok(Source::Method(s)),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Real => f.write_str("real"),
            Source::Method(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    /// `d < 20` small, `20 <= d < 50` medium, `d >= 50` large (mm).
    pub fn from_diameter_mm(d: f64) -> SizeBucket {
        if d < 20.0 {
            SizeBucket::Small
        } else if d < 50.0 {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Real,
    Synthetic,
}

/// A tumor available for selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCase {
    pub id: String,
    pub organ: Organ,
    pub source: Source,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub report_text: String,
    pub diameter_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuringCase {
    /// Opaque; carries no hint of the source.
    pub case_id: String,
    pub organ: Organ,
    pub size_bucket: SizeBucket,
    pub source: Source,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub report_text: String,
}

/// Balanced draw of `per_cell` candidates per (organ, bucket, source), shuffled.
pub fn assemble_case_set(
    pool: &[CandidateCase],
    sources: &[Source],
    per_cell: usize,
    seed: u64,
) -> Result<Vec<TuringCase>> {
    assemble_case_set_in(pool, sources, &SizeBucket::ALL, per_cell, seed)
}

/// As [`assemble_case_set`], restricted to the listed size buckets.
pub fn assemble_case_set_in(
    pool: &[CandidateCase],
    sources: &[Source],
    buckets: &[SizeBucket],
    per_cell: usize,
    seed: u64,
) -> Result<Vec<TuringCase>> {
    if sources.is_empty() || per_cell == 0 || buckets.is_empty() {
        return Err(Error::Invalid("need at least one source, one bucket and per_cell >= 1".into()));
    }
    let mut organs: Vec<Organ> = pool.iter().map(|c| c.organ).collect();
    organs.sort();
    organs.dedup();
    if organs.is_empty() {
        return Err(Error::InsufficientPool("candidate pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &organ in &organs {
        for &bucket in buckets {
            for source in sources {
                let mut cell: Vec<&CandidateCase> = pool
                    .iter()
                    .filter(|c| {
                        c.organ == organ && &c.source == source && SizeBucket::from_diameter_mm(c.diameter_mm) == bucket
                    })
                    .collect();
                if cell.len() < per_cell {
                    return Err(Error::InsufficientPool(format!(
                        "cell {organ}/{bucket}/{source} has {} candidates, need {per_cell}",
                        cell.len()
                    )));
                }
                cell.shuffle(&mut rng);
                for c in &cell[..per_cell] {
                    out.push(TuringCase {
                        case_id: String::new(),
                        organ,
                        size_bucket: bucket,
                        source: c.source.clone(),
                        volume_path: c.volume_path.clone(),
                        mask_path: c.mask_path.clone(),
                        report_text: c.report_text.clone(),
                    });
                }
            }
        }
    }
    out.shuffle(&mut rng);
    for (i, c) in out.iter_mut().enumerate() {
        let h = sha256_hex(&[&seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
        c.case_id = format!("c{}", &h[..12]);
    }
    Ok(out)
}

/// What a reader sees for one case. Has no source field by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderPayload {
    pub session_id: String,
    pub case_id: String,
    pub position: usize,
    pub total: usize,
    pub organ: Organ,
    pub size_bucket: SizeBucket,
    pub report_text: String,
    pub slices_url: String,
    pub mask_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextCase {
    Case(ReaderPayload),
    Complete { session_id: String, judged: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub session_id: String,
    pub case_id: String,
    pub verdict: Verdict,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub case_id: String,
    pub verdict: Verdict,
    pub judged: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuringSession {
    pub session_id: String,
    pub reader_id: String,
    pub seed: u64,
    pub order: Vec<String>,
    pub judgments: BTreeMap<String, Judgment>,
    pub created_ms: u64,
}

impl TuringSession {
    pub fn is_complete(&self) -> bool {
        self.judgments.len() == self.order.len()
    }
}

/// Reader-facing session summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub reader_id: String,
    pub total: usize,
    pub judged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord {
    Session {
        session_id: String,
        reader_id: String,
        seed: u64,
        order: Vec<String>,
        created_ms: u64,
    },
    Judgment(Judgment),
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Reads every complete line; a torn final line (no newline) is reported
/// as the byte offset to truncate at.
fn read_log(path: &Path) -> Result<(Vec<LogRecord>, Option<u64>)> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok((out, None));
        }
        if !line.ends_with('\n') {
            return Ok((out, Some(offset)));
        }
        let rec: LogRecord = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Corruption(format!("{}: bad record at byte {offset}: {e}", path.display())))?;
        out.push(rec);
        offset += n as u64;
    }
}

struct StudyLog {
    path: PathBuf,
    file: File,
}

impl StudyLog {
    fn open(path: &Path) -> Result<(StudyLog, Vec<LogRecord>)> {
        let (records, torn) = read_log(path)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if let Some(len) = torn {
            file.set_len(len).map_err(|e| Error::io(path, e))?;
        }
        Ok((StudyLog { path: path.to_owned(), file }, records))
    }

    fn append(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes") + "\n";
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub organ: Organ,
    pub size_bucket: SizeBucket,
    pub method: String,
    pub wrong: usize,
    pub total: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rule: String,
    pub sessions: usize,
    pub excluded_sessions: Vec<String>,
    pub rows: Vec<ErrorRow>,
}

impl ErrorReport {
    pub fn row(&self, organ: Organ, bucket: SizeBucket, method: &str) -> Option<&ErrorRow> {
        self.rows
            .iter()
            .find(|r| r.organ == organ && r.size_bucket == bucket && r.method == method)
    }

    /// Pooled rate over every row.
    pub fn overall_rate(&self) -> Option<f64> {
        let (w, t) = self.rows.iter().fold((0, 0), |(w, t), r| (w + r.wrong, t + r.total));
        (t > 0).then(|| 100.0 * w as f64 / t as f64)
    }
}

type CellKey = (Organ, SizeBucket, String);

fn methods_of(cases: &[TuringCase]) -> Vec<String> {
    let mut m: Vec<String> = cases
        .iter()
        .filter_map(|c| match &c.source {
            Source::Method(n) => Some(n.clone()),
            Source::Real => None,
        })
        .collect();
    m.sort();
    m.dedup();
    m
}

/// Contribution of one judgment to every affected (cell, method) tally.
fn tally_judgment(
    tallies: &mut BTreeMap<CellKey, (usize, usize)>,
    case: &TuringCase,
    verdict: Verdict,
    methods: &[String],
) {
    let targets: Vec<&String> = match &case.source {
        Source::Real => methods.iter().collect(),
        Source::Method(m) => methods.iter().filter(|x| *x == m).collect(),
    };
    let wrong = match case.source {
        Source::Real => verdict == Verdict::Synthetic,
        Source::Method(_) => verdict == Verdict::Real,
    };
    for m in targets {
        let e = tallies.entry((case.organ, case.size_bucket, m.clone())).or_default();
        e.0 += wrong as usize;
        e.1 += 1;
    }
}

fn build_report(
    per_session: &BTreeMap<String, BTreeMap<CellKey, (usize, usize)>>,
    sessions: &BTreeMap<String, TuringSession>,
) -> ErrorReport {
    let mut rows: BTreeMap<CellKey, (usize, usize)> = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut counted = 0;
    for (id, s) in sessions {
        if !s.is_complete() {
            excluded.push(id.clone());
            continue;
        }
        counted += 1;
        if let Some(t) = per_session.get(id) {
            for (k, (w, n)) in t {
                let e = rows.entry(k.clone()).or_default();
                e.0 += w;
                e.1 += n;
            }
        }
    }
    ErrorReport {
        rule: ERROR_RULE.into(),
        sessions: counted,
        excluded_sessions: excluded,
        rows: rows
            .into_iter()
            .map(|((organ, size_bucket, method), (wrong, total))| ErrorRow {
                organ,
                size_bucket,
                method,
                wrong,
                total,
                error_rate: 100.0 * wrong as f64 / total as f64,
            })
            .collect(),
    }
}

/// 8-bit axial slice, row-major `height x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceData {
    pub case_id: String,
    pub index: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Vec<u8>>,
}

/// Study state. Case volumes are read lazily from disk.
pub struct TuringStudy {
    cases: Vec<TuringCase>,
    by_id: HashMap<String, usize>,
    methods: Vec<String>,
    root: PathBuf,
    sessions: BTreeMap<String, TuringSession>,
    tallies: BTreeMap<String, BTreeMap<CellKey, (usize, usize)>>,
    log: Option<StudyLog>,
    seed: u64,
    volumes: HashMap<String, (Volume, Vec<u8>)>,
}

impl TuringStudy {
    /// Relative case paths resolve against `root`. With a log path, prior
    /// sessions and judgments are replayed from it.
    pub fn open(cases: Vec<TuringCase>, root: &Path, log_path: Option<&Path>, seed: u64) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (i, c) in cases.iter().enumerate() {
            if by_id.insert(c.case_id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate case id {}", c.case_id)));
            }
        }
        let methods = methods_of(&cases);
        let mut study = TuringStudy {
            cases,
            by_id,
            methods,
            root: root.to_owned(),
            sessions: BTreeMap::new(),
            tallies: BTreeMap::new(),
            log: None,
            seed,
            volumes: HashMap::new(),
        };
        if let Some(p) = log_path {
            let (log, records) = StudyLog::open(p)?;
            for r in records {
                study.apply(r)?;
            }
            study.log = Some(log);
        }
        Ok(study)
    }

    fn apply(&mut self, r: LogRecord) -> Result<()> {
        match r {
            LogRecord::Session {
                session_id,
                reader_id,
                seed,
                order,
                created_ms,
            } => {
                if let Some(c) = order.iter().find(|c| !self.by_id.contains_key(*c)) {
                    return Err(Error::Corruption(format!("log session {session_id} references unknown case {c}")));
                }
                self.sessions.entry(session_id.clone()).or_insert(TuringSession {
                    session_id,
                    reader_id,
                    seed,
                    order,
                    judgments: BTreeMap::new(),
                    created_ms,
                });
            }
            LogRecord::Judgment(j) => {
                let s = self
                    .sessions
                    .get_mut(&j.session_id)
                    .ok_or_else(|| Error::Corruption(format!("judgment for unknown session {}", j.session_id)))?;
                if s.judgments.contains_key(&j.case_id) {
                    // replayed duplicate: first verdict wins
                    return Ok(());
                }
                let case = &self.cases[self.by_id[&j.case_id]];
                tally_judgment(self.tallies.entry(j.session_id.clone()).or_default(), case, j.verdict, &self.methods);
                s.judgments.insert(j.case_id.clone(), j);
            }
        }
        Ok(())
    }

    fn persist(&mut self, r: &LogRecord) -> Result<()> {
        match &mut self.log {
            Some(l) => l.append(r),
            None => Ok(()),
        }
    }

    pub fn cases(&self) -> &[TuringCase] {
        &self.cases
    }

    pub fn case(&self, id: &str) -> Option<&TuringCase> {
        self.by_id.get(id).map(|&i| &self.cases[i])
    }

    pub fn session(&self, id: &str) -> Option<&TuringSession> {
        self.sessions.get(id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &TuringSession> {
        self.sessions.values()
    }

    /// New session over every case in a seeded order.
    pub fn create_session(&mut self, reader_id: &str, seed: Option<u64>) -> Result<SessionInfo> {
        if reader_id.trim().is_empty() {
            return Err(Error::Invalid("reader_id is empty".into()));
        }
        let n = self.sessions.len();
        let session_id = format!("s{n:04}");
        let seed = seed.unwrap_or_else(|| self.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<String> = self.cases.iter().map(|c| c.case_id.clone()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rec = LogRecord::Session {
            session_id: session_id.clone(),
            reader_id: reader_id.to_owned(),
            seed,
            order,
            created_ms: now_ms(),
        };
        self.persist(&rec)?;
        self.apply(rec)?;
        Ok(self.info(&session_id).expect("just created"))
    }

    pub fn info(&self, session_id: &str) -> Result<SessionInfo> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        Ok(SessionInfo {
            session_id: s.session_id.clone(),
            reader_id: s.reader_id.clone(),
            total: s.order.len(),
            judged: s.judgments.len(),
        })
    }

    pub fn next_case(&self, session_id: &str) -> Result<NextCase> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        let Some((pos, id)) = s.order.iter().enumerate().find(|(_, c)| !s.judgments.contains_key(*c)) else {
            return Ok(NextCase::Complete {
                session_id: session_id.to_owned(),
                judged: s.judgments.len(),
                total: s.order.len(),
            });
        };
        let c = &self.cases[self.by_id[id]];
        Ok(NextCase::Case(ReaderPayload {
            session_id: session_id.to_owned(),
            case_id: id.clone(),
            position: pos,
            total: s.order.len(),
            organ: c.organ,
            size_bucket: c.size_bucket,
            report_text: c.report_text.clone(),
            slices_url: format!("/cases/{id}/slices/{{k}}"),
            mask_url: format!("/cases/{id}/mask/{{k}}"),
        }))
    }

    /// Persists before acknowledging; a second verdict for a case is a conflict.
    pub fn submit_judgment(&mut self, session_id: &str, case_id: &str, verdict: Verdict) -> Result<Ack> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        if !s.order.iter().any(|c| c == case_id) {
            return Err(Error::NotFound(format!("case {case_id} in session {session_id}")));
        }
        if let Some(prev) = s.judgments.get(case_id) {
            return Err(Error::Conflict(format!(
                "case {case_id} already judged {:?} in session {session_id}",
                prev.verdict
            )));
        }
        let rec = LogRecord::Judgment(Judgment {
            session_id: session_id.to_owned(),
            case_id: case_id.to_owned(),
            verdict,
            at_ms: now_ms(),
        });
        self.persist(&rec)?;
        self.apply(rec)?;
        let s = &self.sessions[session_id];
        Ok(Ack {
            session_id: session_id.to_owned(),
            case_id: case_id.to_owned(),
            verdict,
            judged: s.judgments.len(),
            total: s.order.len(),
        })
    }

    /// Report over completed sessions from the running tallies.
    pub fn error_report(&self) -> ErrorReport {
        build_report(&self.tallies, &self.sessions)
    }

    fn load_case(&mut self, case_id: &str) -> Result<&(Volume, Vec<u8>)> {
        if !self.volumes.contains_key(case_id) {
            let c = self.case(case_id).ok_or_else(|| Error::NotFound(format!("case {case_id}")))?;
            let v = load_volume(&self.root.join(&c.volume_path), VolumeFormat::Native)?;
            let (m, _) = load_mask(&self.root.join(&c.mask_path))?;
            if m.dims() != v.dims() {
                return Err(Error::Shape(format!("case {case_id}: mask and volume differ")));
            }
            self.volumes.insert(case_id.to_owned(), (v, m.data().to_vec()));
        }
        Ok(&self.volumes[case_id])
    }

    /// Axial slice windowed to 8 bits with the preprocessing map.
    pub fn slice(&mut self, case_id: &str, k: usize) -> Result<SliceData> {
        let id = case_id.to_owned();
        let (v, _) = self.load_case(case_id)?;
        slice_of(&id, v.dims().as_array(), k, |i| {
            (rescale_clipped(v.data()[i] as f64, HU_MIN, HU_MAX) * 255.0).round() as u8
        })
    }

    /// Mask slice with 0 / 255 pixels.
    pub fn mask_slice(&mut self, case_id: &str, k: usize) -> Result<SliceData> {
        let id = case_id.to_owned();
        let (v, m) = self.load_case(case_id)?;
        slice_of(&id, v.dims().as_array(), k, |i| if m[i] != 0 { 255 } else { 0 })
    }
}

fn slice_of(case_id: &str, [d, h, w]: [usize; 3], k: usize, px: impl Fn(usize) -> u8) -> Result<SliceData> {
    if k >= d {
        return Err(Error::NotFound(format!("slice {k} of case {case_id} (depth {d})")));
    }
    Ok(SliceData {
        case_id: case_id.to_owned(),
        index: k,
        depth: d,
        height: h,
        width: w,
        pixels: (0..h).map(|y| (0..w).map(|x| px((k * h + y) * w + x)).collect()).collect(),
    })
}

/// Recomputes the report from the raw log alone.
pub fn error_report_from_log(cases: &[TuringCase], log_path: &Path) -> Result<ErrorReport> {
    let (records, _) = read_log(log_path)?;
    let methods = methods_of(cases);
    let by_id: HashMap<&str, &TuringCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut sessions: BTreeMap<String, TuringSession> = BTreeMap::new();
    let mut tallies: BTreeMap<String, BTreeMap<CellKey, (usize, usize)>> = BTreeMap::new();
    for r in records {
        match r {
            LogRecord::Session {
                session_id,
                reader_id,
                seed,
                order,
                created_ms,
            } => {
                sessions.entry(session_id.clone()).or_insert(TuringSession {
                    session_id,
                    reader_id,
                    seed,
                    order,
                    judgments: BTreeMap::new(),
                    created_ms,
                });
            }
            LogRecord::Judgment(j) => {
                let Some(s) = sessions.get_mut(&j.session_id) else { continue };
                if s.judgments.contains_key(&j.case_id) {
                    continue;
                }
                let case = by_id
                    .get(j.case_id.as_str())
                    .ok_or_else(|| Error::Corruption(format!("unknown case {}", j.case_id)))?;
                tally_judgment(tallies.entry(j.session_id.clone()).or_default(), case, j.verdict, &methods);
                s.judgments.insert(j.case_id.clone(), j);
            }
        }
    }
    Ok(build_report(&tallies, &sessions))
}

/// Pooled error rate of readers answering uniformly at random.
pub fn simulate_random_readers(cases: &[TuringCase], sessions: usize, seed: u64) -> Result<f64> {
    let mut study = TuringStudy::open(cases.to_vec(), Path::new("."), None, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    for r in 0..sessions {
        let info = study.create_session(&format!("sim{r}"), Some(rng.random()))?;
        while let NextCase::Case(p) = study.next_case(&info.session_id)? {
            let v = if rng.random_bool(0.5) { Verdict::Real } else { Verdict::Synthetic };
            study.submit_judgment(&info.session_id, &p.case_id, v)?;
        }
    }
    study
        .error_report()
        .overall_rate()
        .ok_or_else(|| Error::Invalid("no judged cases".into()))
}
