//! Interaction logs: CSV ingestion, student-level splits, history windowing,
//! and a synthetic generator with a known oracle.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One answered question in a student's chronology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub student_id: String,
    pub seq_index: u32,
    pub question_id: Option<u32>,
    pub concept_ids: Vec<u32>,
    pub correct: bool,
    pub question_text: Option<String>,
    pub concept_texts: Vec<String>,
}

impl Interaction {
    pub fn has_identity(&self) -> bool {
        self.question_id.is_some() || !self.concept_ids.is_empty()
    }
}

/// A prediction instance: chronological history plus the next interaction.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    pub history: Vec<Interaction>,
    pub target: Interaction,
    pub label: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    fn contains(ids: &[String], id: &str) -> bool {
        ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok()
    }

    pub fn in_train(&self, id: &str) -> bool {
        Self::contains(&self.train, id)
    }

    pub fn in_valid(&self, id: &str) -> bool {
        Self::contains(&self.valid, id)
    }

    pub fn in_test(&self, id: &str) -> bool {
        Self::contains(&self.test, id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("split manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaKind {
    Native,
    AssistLike,
    JunyiLike,
    NipsLike,
}

impl SchemaKind {
    pub fn parse(s: &str) -> Result<SchemaKind> {
        match s {
            "native" => Ok(SchemaKind::Native),
            "assist-like" => Ok(SchemaKind::AssistLike),
            "junyi-like" => Ok(SchemaKind::JunyiLike),
            "nips-like" => Ok(SchemaKind::NipsLike),
            other => Err(Error::UnknownSchema(other.to_string())),
        }
    }
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub interactions: Vec<Interaction>,
    /// Rows discarded because a mandatory field for the schema was missing.
    pub dropped_rows: usize,
}

struct RawRow {
    student: String,
    order_key: i64,
    interaction: Interaction,
}

fn field<'r>(
    rec: &'r csv::StringRecord,
    idx: &IndexMap<String, usize>,
    name: &str,
    line: u64,
) -> Result<&'r str> {
    let &col = idx
        .get(name)
        .ok_or_else(|| Error::CsvParse { line: 1, msg: format!("missing column {name}") })?;
    rec.get(col)
        .ok_or_else(|| Error::CsvParse { line, msg: format!("row too short for column {name}") })
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: u64) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::CsvParse { line, msg: format!("invalid {what}: {s:?}") })
}

fn parse_correct(s: &str, line: u64) -> Result<bool> {
    match s.trim() {
        "1" | "true" | "True" => Ok(true),
        "0" | "false" | "False" => Ok(false),
        other => Err(Error::CsvParse { line, msg: format!("invalid correct flag: {other:?}") }),
    }
}

fn split_list(s: &str) -> Vec<&str> {
    s.split(';').map(str::trim).filter(|p| !p.is_empty()).collect()
}

/// Loads a CSV of interactions. Rows missing a field that the schema
/// declares mandatory are dropped and counted rather than failing the load;
/// structurally broken rows are hard errors with their line number.
pub fn load_csv(path: &Path, schema: SchemaKind) -> Result<LoadOutcome> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let headers: IndexMap<String, usize> = rdr
        .headers()
        .map_err(|e| Error::CsvParse { line: 1, msg: e.to_string() })?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();

    let mut rows: Vec<RawRow> = Vec::new();
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::CsvParse { line, msg: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&rec, &headers, schema, line)? {
            Some(row) => rows.push(row),
            None => dropped += 1,
        }
    }

    // Normalize chronology: stable sort by (student, order key), then assign
    // consecutive per-student sequence indices.
    rows.sort_by(|a, b| a.student.cmp(&b.student).then(a.order_key.cmp(&b.order_key)));
    let mut interactions = Vec::with_capacity(rows.len());
    let mut cur_student: Option<&str> = None;
    let mut next_seq = 0u32;
    for row in &rows {
        if cur_student != Some(row.student.as_str()) {
            cur_student = Some(row.student.as_str());
            next_seq = 0;
        }
        let mut it = row.interaction.clone();
        it.seq_index = next_seq;
        next_seq += 1;
        interactions.push(it);
    }
    Ok(LoadOutcome { interactions, dropped_rows: dropped })
}

fn parse_row(
    rec: &csv::StringRecord,
    headers: &IndexMap<String, usize>,
    schema: SchemaKind,
    line: u64,
) -> Result<Option<RawRow>> {
    match schema {
        SchemaKind::Native => {
            let student = field(rec, headers, "student_id", line)?.to_string();
            let seq: u32 = parse_num(field(rec, headers, "seq_index", line)?, "seq_index", line)?;
            let qid_raw = field(rec, headers, "question_id", line)?.trim();
            let question_id = if qid_raw.is_empty() {
                None
            } else {
                Some(parse_num(qid_raw, "question_id", line)?)
            };
            let concept_ids = split_list(field(rec, headers, "concept_ids", line)?)
                .into_iter()
                .map(|p| parse_num(p, "concept id", line))
                .collect::<Result<Vec<u32>>>()?;
            let correct = parse_correct(field(rec, headers, "correct", line)?, line)?;
            let qtext_raw = field(rec, headers, "question_text", line)?.trim();
            let question_text = (!qtext_raw.is_empty()).then(|| qtext_raw.to_string());
            let concept_texts: Vec<String> = split_list(field(rec, headers, "concept_texts", line)?)
                .into_iter()
                .map(str::to_string)
                .collect();
            if question_id.is_none() && concept_ids.is_empty() {
                return Ok(None);
            }
            Ok(Some(RawRow {
                student: student.clone(),
                order_key: seq as i64,
                interaction: Interaction {
                    student_id: student,
                    seq_index: seq,
                    question_id,
                    concept_ids,
                    correct,
                    question_text,
                    concept_texts,
                },
            }))
        }
        SchemaKind::AssistLike => {
            // order_id,user_id,problem_id,correct,skill_id,skill_name
            let student = field(rec, headers, "user_id", line)?.to_string();
            let order: i64 = parse_num(field(rec, headers, "order_id", line)?, "order_id", line)?;
            let qid: u32 = parse_num(field(rec, headers, "problem_id", line)?, "problem_id", line)?;
            let correct = parse_correct(field(rec, headers, "correct", line)?, line)?;
            let skill_id = field(rec, headers, "skill_id", line)?.trim().to_string();
            let skill_name = field(rec, headers, "skill_name", line)?.trim().to_string();
            if skill_id.is_empty() || skill_name.is_empty() {
                return Ok(None);
            }
            let cid: u32 = parse_num(&skill_id, "skill_id", line)?;
            Ok(Some(RawRow {
                student: student.clone(),
                order_key: order,
                interaction: Interaction {
                    student_id: student,
                    seq_index: 0,
                    question_id: Some(qid),
                    concept_ids: vec![cid],
                    correct,
                    question_text: None,
                    concept_texts: vec![skill_name],
                },
            }))
        }
        SchemaKind::JunyiLike => {
            // user_id,order,exercise_id,correct
            let student = field(rec, headers, "user_id", line)?.to_string();
            let order: i64 = parse_num(field(rec, headers, "order", line)?, "order", line)?;
            let qid_raw = field(rec, headers, "exercise_id", line)?.trim();
            if qid_raw.is_empty() {
                return Ok(None);
            }
            let qid: u32 = parse_num(qid_raw, "exercise_id", line)?;
            let correct = parse_correct(field(rec, headers, "correct", line)?, line)?;
            Ok(Some(RawRow {
                student: student.clone(),
                order_key: order,
                interaction: Interaction {
                    student_id: student,
                    seq_index: 0,
                    question_id: Some(qid),
                    concept_ids: Vec::new(),
                    correct,
                    question_text: None,
                    concept_texts: Vec::new(),
                },
            }))
        }
        SchemaKind::NipsLike => {
            // UserId,Order,QuestionId,IsCorrect,SubjectIds,QuestionText,SubjectTexts
            let student = field(rec, headers, "UserId", line)?.to_string();
            let order: i64 = parse_num(field(rec, headers, "Order", line)?, "Order", line)?;
            let qid_raw = field(rec, headers, "QuestionId", line)?.trim();
            if qid_raw.is_empty() {
                return Ok(None);
            }
            let qid: u32 = parse_num(qid_raw, "QuestionId", line)?;
            let correct = parse_correct(field(rec, headers, "IsCorrect", line)?, line)?;
            let concept_ids = split_list(field(rec, headers, "SubjectIds", line)?)
                .into_iter()
                .map(|p| parse_num(p, "subject id", line))
                .collect::<Result<Vec<u32>>>()?;
            let qtext_raw = field(rec, headers, "QuestionText", line)?.trim();
            let question_text = (!qtext_raw.is_empty()).then(|| qtext_raw.to_string());
            let concept_texts: Vec<String> = split_list(field(rec, headers, "SubjectTexts", line)?)
                .into_iter()
                .map(str::to_string)
                .collect();
            Ok(Some(RawRow {
                student: student.clone(),
                order_key: order,
                interaction: Interaction {
                    student_id: student,
                    seq_index: 0,
                    question_id: Some(qid),
                    concept_ids,
                    correct,
                    question_text,
                    concept_texts,
                },
            }))
        }
    }
}

/// Writes interactions in the native schema.
pub fn write_native_csv(path: &Path, interactions: &[Interaction]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "student_id",
        "seq_index",
        "question_id",
        "concept_ids",
        "correct",
        "question_text",
        "concept_texts",
    ])?;
    for it in interactions {
        let qid = it.question_id.map(|q| q.to_string()).unwrap_or_default();
        let cids = it.concept_ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        w.write_record([
            it.student_id.as_str(),
            &it.seq_index.to_string(),
            &qid,
            &cids,
            if it.correct { "1" } else { "0" },
            it.question_text.as_deref().unwrap_or(""),
            &it.concept_texts.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic 8:1:1 student split; remainder goes to train.
pub fn split_students(students: &[String], seed: u64) -> Result<DatasetSplit> {
    let mut ids: Vec<String> = students.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 students to split, got {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_valid = n / 10;
    let n_test = n / 10;
    let test: Vec<String> = ids[..n_test].to_vec();
    let valid: Vec<String> = ids[n_test..n_test + n_valid].to_vec();
    let train: Vec<String> = ids[n_test + n_valid..].to_vec();
    let sorted = |mut v: Vec<String>| {
        v.sort();
        v
    };
    Ok(DatasetSplit { seed, train: sorted(train), valid: sorted(valid), test: sorted(test) })
}

/// Builds one window per predictable interaction: every interaction with at
/// least one predecessor becomes a target, keeping its most recent `max_len`
/// predecessors as history. Students appear in sorted id order.
pub fn window_histories(interactions: &[Interaction], max_len: usize) -> Result<Vec<HistoryWindow>> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("history length must be at least 1".into()));
    }
    let mut per_student: IndexMap<&str, Vec<&Interaction>> = IndexMap::new();
    for it in interactions {
        per_student.entry(it.student_id.as_str()).or_default().push(it);
    }
    per_student.sort_keys();
    let mut windows = Vec::new();
    for (_, mut items) in per_student {
        items.sort_by_key(|it| it.seq_index);
        for i in 1..items.len() {
            let start = i.saturating_sub(max_len);
            windows.push(HistoryWindow {
                history: items[start..i].iter().map(|&it| it.clone()).collect(),
                target: items[i].clone(),
                label: items[i].correct,
            });
        }
    }
    Ok(windows)
}

/// Keeps only windows whose student belongs to the given id list.
pub fn windows_for<'w>(
    windows: &'w [HistoryWindow],
    members: &[String],
) -> Vec<&'w HistoryWindow> {
    windows
        .iter()
        .filter(|w| DatasetSplit::contains(members, &w.target.student_id))
        .collect()
}

/// Highest question/concept id in the data plus one; zero when absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub n_questions: usize,
    pub n_concepts: usize,
}

pub fn entity_counts(interactions: &[Interaction]) -> EntityCounts {
    let mut nq = 0usize;
    let mut nc = 0usize;
    for it in interactions {
        if let Some(q) = it.question_id {
            nq = nq.max(q as usize + 1);
        }
        for &c in &it.concept_ids {
            nc = nc.max(c as usize + 1);
        }
    }
    EntityCounts { n_questions: nq, n_concepts: nc }
}

// ── synthetic generator ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    pub interactions_per_student: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_students: 300,
            n_questions: 60,
            n_concepts: 12,
            interactions_per_student: 100,
            seed: 42,
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// splitmix64; gives each (seed, stream, index) triple its own RNG seed
/// without depending on any hasher whose output could change across
/// toolchain versions.
pub(crate) fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.rotate_left(24) ^ index.rotate_left(48);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_QUESTION: u64 = 1;
const STREAM_STUDENT: u64 = 2;

const CONCEPT_NAMES: [&str; 12] = [
    "adding small integers",
    "subtracting small integers",
    "single digit multiplication",
    "dividing without remainder",
    "comparing two fractions",
    "reducing a fraction",
    "decimal place value",
    "rounding to the nearest ten",
    "reading a simple graph",
    "perimeter of a rectangle",
    "area of a rectangle",
    "solving a one step equation",
];

const VERBS: [&str; 4] = ["Compute", "Find", "Evaluate", "Determine"];
const NOUNS: [&str; 4] = ["sum", "difference", "product", "quotient"];

fn synth_question_text(qid: usize) -> String {
    let verb = VERBS[qid % VERBS.len()];
    let noun = NOUNS[(qid / VERBS.len()) % NOUNS.len()];
    let a = qid % 9 + 2;
    let b = (qid * 7 + 3) % 9 + 1;
    format!("{verb} the {noun} of {a} and {b}.")
}

fn synth_concept_text(cid: usize) -> String {
    CONCEPT_NAMES[cid % CONCEPT_NAMES.len()].to_string()
}

pub struct SynthOutcome {
    pub interactions: Vec<Interaction>,
    /// True success probability for each interaction, aligned by index.
    pub oracle_probs: Vec<f64>,
}

/// Simulates students with per-concept skills and per-question difficulties.
/// Success probability is logistic(skill - difficulty); each attempt raises
/// the attempted concept's skill by a fixed learning rate.
pub fn synth_generate(spec: &SynthSpec) -> SynthOutcome {
    const LEARNING_RATE: f64 = 0.05;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut difficulty = Vec::with_capacity(spec.n_questions);
    for q in 0..spec.n_questions {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, STREAM_QUESTION, q as u64));
        difficulty.push(normal.sample(&mut rng));
    }
    let concept_of = |q: usize| q % spec.n_concepts;

    let mut interactions = Vec::with_capacity(spec.n_students * spec.interactions_per_student);
    let mut oracle_probs = Vec::with_capacity(interactions.capacity());
    for u in 0..spec.n_students {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, STREAM_STUDENT, u as u64));
        let mut skills: Vec<f64> = (0..spec.n_concepts).map(|_| normal.sample(&mut rng)).collect();
        let mut student_id = String::new();
        write!(student_id, "s{u:04}").expect("write to string");
        for step in 0..spec.interactions_per_student {
            let q = rng.gen_range(0..spec.n_questions);
            let c = concept_of(q);
            let p = logistic(skills[c] - difficulty[q]);
            let correct = rng.gen_bool(p);
            skills[c] += LEARNING_RATE;
            interactions.push(Interaction {
                student_id: student_id.clone(),
                seq_index: step as u32,
                question_id: Some(q as u32),
                concept_ids: vec![c as u32],
                correct,
                question_text: Some(synth_question_text(q)),
                concept_texts: vec![synth_concept_text(c)],
            });
            oracle_probs.push(p);
        }
    }
    SynthOutcome { interactions, oracle_probs }
}
