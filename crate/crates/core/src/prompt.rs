//! Instruction templates, the word-level tokenizer, and prompt plans.
//!
//! A prompt plan is the bridge between text and the injected model: token
//! ids plus an ordered list of slot bindings saying which embedding replaces
//! which token position, and where the Yes/No answer is read.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{HistoryWindow, Interaction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    /// Question and concept IDs.
    Type1,
    /// Question IDs only.
    Type2,
    /// Concept IDs only.
    Type3,
    /// Full question text; render-only, carries no slot markers.
    Type4,
    /// Concept text.
    Type5,
}

impl TemplateKind {
    pub fn parse(s: &str) -> Result<TemplateKind> {
        match s {
            "type1" => Ok(TemplateKind::Type1),
            "type2" => Ok(TemplateKind::Type2),
            "type3" => Ok(TemplateKind::Type3),
            "type4" => Ok(TemplateKind::Type4),
            "type5" => Ok(TemplateKind::Type5),
            other => Err(Error::Template(format!("unknown template kind {other:?}"))),
        }
    }

    pub fn slots_per_item(self) -> usize {
        match self {
            TemplateKind::Type1 => 2,
            TemplateKind::Type2 | TemplateKind::Type3 | TemplateKind::Type5 => 1,
            TemplateKind::Type4 => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Type1 => "type1",
            TemplateKind::Type2 => "type2",
            TemplateKind::Type3 => "type3",
            TemplateKind::Type4 => "type4",
            TemplateKind::Type5 => "type5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Ques,
    Conc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRef {
    History(usize),
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotBinding {
    pub position: usize,
    pub slot: SlotKind,
    pub reference: SlotRef,
    pub entity_id: u32,
}

#[derive(Debug, Clone)]
pub struct PromptPlan {
    pub token_ids: Vec<u32>,
    pub slot_bindings: Vec<SlotBinding>,
    pub answer_position: usize,
}

// ── rendering ───────────────────────────────────────────────────────────

fn qid_of(it: &Interaction, role: &str) -> Result<u32> {
    it.question_id
        .ok_or_else(|| Error::Template(format!("{role} interaction is missing question_id")))
}

fn cid_of(it: &Interaction, role: &str) -> Result<u32> {
    it.concept_ids
        .first()
        .copied()
        .ok_or_else(|| Error::Template(format!("{role} interaction is missing concept_ids")))
}

fn ctext_of<'a>(it: &'a Interaction, role: &str) -> Result<&'a str> {
    it.concept_texts
        .first()
        .map(String::as_str)
        .ok_or_else(|| Error::Template(format!("{role} interaction is missing concept_texts")))
}

fn qtext_of<'a>(it: &'a Interaction, role: &str) -> Result<&'a str> {
    it.question_text
        .as_deref()
        .ok_or_else(|| Error::Template(format!("{role} interaction is missing question_text")))
}

fn adverb(correct: bool) -> &'static str {
    if correct {
        "correctly"
    } else {
        "incorrectly"
    }
}

fn item_core(kind: TemplateKind, it: &Interaction, role: &str) -> Result<String> {
    Ok(match kind {
        TemplateKind::Type1 => format!(
            "question with ID={} [QSLOT] involving concept ID={} [CSLOT]",
            qid_of(it, role)?,
            cid_of(it, role)?
        ),
        TemplateKind::Type2 => format!("question with ID={} [QSLOT]", qid_of(it, role)?),
        TemplateKind::Type3 => {
            format!("question involving concept ID={} [CSLOT]", cid_of(it, role)?)
        }
        TemplateKind::Type5 => {
            format!("question involving concept \"{}\" [CSLOT]", ctext_of(it, role)?)
        }
        TemplateKind::Type4 => unreachable!("type 4 renders separately"),
    })
}

/// Renders the instruction text for a window, slot markers included.
pub fn render(kind: TemplateKind, window: &HistoryWindow) -> Result<String> {
    if window.history.is_empty() {
        return Err(Error::Template("window has an empty history".into()));
    }
    if kind == TemplateKind::Type4 {
        return render_type4(window);
    }
    let mut items = Vec::with_capacity(window.history.len());
    for (i, it) in window.history.iter().enumerate() {
        let role = format!("history[{i}]");
        items.push(format!("{} {}", item_core(kind, it, &role)?, adverb(it.correct)));
    }
    let target = item_core(kind, &window.target, "target")?;
    Ok(format!(
        "The student has previously, in chronological order, answered {}. \
         Please predict whether the student will answer the next {} correctly. \
         Response with 'Yes' or 'No'. Response:",
        items.join(", "),
        target
    ))
}

fn render_type4(window: &HistoryWindow) -> Result<String> {
    let mut out = String::from(
        "In this task, we aim to determine whether the student can answer the question \
         correctly based on the student's history record of academic exercises.\n\
         The student's history record of academic exercises is given as follows:\n",
    );
    for (i, it) in window.history.iter().enumerate() {
        let role = format!("history[{i}]");
        writeln!(out, "{}) {}", i + 1, qtext_of(it, &role)?).expect("write to string");
        if !it.concept_texts.is_empty() {
            writeln!(out, "Related knowledge concepts: {}", it.concept_texts.join(", "))
                .expect("write to string");
        }
        writeln!(out, "The student answered this question {}", adverb(it.correct))
            .expect("write to string");
    }
    out.push_str("The target question is given as follows:\n");
    writeln!(out, "{}", qtext_of(&window.target, "target")?).expect("write to string");
    if !window.target.concept_texts.is_empty() {
        writeln!(out, "Related knowledge concepts: {}", window.target.concept_texts.join(", "))
            .expect("write to string");
    }
    out.push_str(
        "Please predict whether the student would answer the target question correctly. \
         Response with 'Yes' or 'No'. Response:",
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Question,
    Concept,
}

/// Renders with the given entity removed from every item, reducing the
/// template to its simpler form (question-only or concept-only phrasing).
/// The template that results from dropping entities out of `kind`.
pub fn ablated_kind(kind: TemplateKind, drop: &BTreeSet<Entity>) -> Result<TemplateKind> {
    if drop.is_empty() {
        return Ok(kind);
    }
    let has_q = matches!(kind, TemplateKind::Type1 | TemplateKind::Type2)
        && !drop.contains(&Entity::Question);
    let has_c = matches!(kind, TemplateKind::Type1 | TemplateKind::Type3 | TemplateKind::Type5)
        && !drop.contains(&Entity::Concept);
    match (has_q, has_c) {
        (true, true) => Ok(TemplateKind::Type1),
        (true, false) => Ok(TemplateKind::Type2),
        (false, true) => {
            if kind == TemplateKind::Type5 {
                Ok(TemplateKind::Type5)
            } else {
                Ok(TemplateKind::Type3)
            }
        }
        (false, false) => Err(Error::Template(
            "ablation removes every entity; nothing left to render".into(),
        )),
    }
}

pub fn render_ablated(
    kind: TemplateKind,
    window: &HistoryWindow,
    drop: &BTreeSet<Entity>,
) -> Result<String> {
    render(ablated_kind(kind, drop)?, window)
}

// ── tokenizer ───────────────────────────────────────────────────────────

const PUNCT: [char; 8] = [',', '.', ':', ';', '?', '!', '(', ')'];

fn is_punct(c: char) -> bool {
    PUNCT.contains(&c) || c == '"'
}

fn is_marker(w: &str) -> bool {
    w.len() >= 3 && w.starts_with('[') && w.ends_with(']')
}

fn is_quoted_literal(w: &str) -> bool {
    w.len() >= 3 && w.starts_with('\'') && w.ends_with('\'')
}

fn split_word(w: &str, out: &mut Vec<String>) {
    if w.is_empty() {
        return;
    }
    if is_marker(w) || is_quoted_literal(w) {
        out.push(w.to_string());
        return;
    }
    let first = w.chars().next().expect("non-empty");
    if is_punct(first) {
        out.push(first.to_string());
        split_word(&w[first.len_utf8()..], out);
        return;
    }
    let last = w.chars().last().expect("non-empty");
    if is_punct(last) {
        split_word(&w[..w.len() - last.len_utf8()], out);
        out.push(last.to_string());
        return;
    }
    if let Some(eq) = w.find('=') {
        split_word(&w[..eq], out);
        out.push("=".to_string());
        split_word(&w[eq + 1..], out);
        return;
    }
    out.push(w.to_string());
}

/// Word-level segmentation: whitespace split, punctuation detached, "="
/// detached, bracketed markers and single-quoted literals kept whole.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        split_word(word, &mut out);
    }
    out
}

/// Inverse of `split_text` up to whitespace normalization: single-line
/// template text round-trips exactly.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut quote_open = false;
    let mut glue_next = false;
    for tok in tokens {
        let (glue_before, glue_after) = match tok.as_str() {
            "," | "." | ":" | ";" | "?" | "!" | ")" => (true, false),
            "(" => (false, true),
            "=" => (true, true),
            "\"" => {
                let open = !quote_open;
                quote_open = open;
                (!open, open)
            }
            _ => (false, false),
        };
        if !out.is_empty() && !glue_before && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = glue_after;
    }
    out
}

// ── vocabulary ──────────────────────────────────────────────────────────

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const QSLOT_TOKEN: &str = "[QSLOT]";
pub const CSLOT_TOKEN: &str = "[CSLOT]";
pub const YES_TOKEN: &str = "Yes";
pub const NO_TOKEN: &str = "No";

const RESERVED: [&str; 6] = [PAD_TOKEN, UNK_TOKEN, QSLOT_TOKEN, CSLOT_TOKEN, YES_TOKEN, NO_TOKEN];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabRepr")]
pub struct Vocab {
    token_to_id: IndexMap<String, u32>,
}

/// JSON objects carry no ordering guarantee, but `token` and `decode` look
/// tokens up by index, so deserialization re-sorts entries by id.
#[derive(Deserialize)]
struct VocabRepr {
    token_to_id: IndexMap<String, u32>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Vocab {
        let mut entries: Vec<(String, u32)> = r.token_to_id.into_iter().collect();
        entries.sort_by_key(|&(_, id)| id);
        Vocab { token_to_id: entries.into_iter().collect() }
    }
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const QSLOT: u32 = 2;
    pub const CSLOT: u32 = 3;
    pub const YES: u32 = 4;
    pub const NO: u32 = 5;

    /// Builds a vocabulary over the given corpus texts. Reserved tokens take
    /// the first ids; the rest are assigned in sorted order, so the mapping
    /// depends only on the token set, not corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut words = BTreeSet::new();
        for text in corpus {
            for tok in split_text(text) {
                if !RESERVED.contains(&tok.as_str()) {
                    words.insert(tok);
                }
            }
        }
        let mut token_to_id = IndexMap::new();
        for r in RESERVED {
            token_to_id.insert(r.to_string(), token_to_id.len() as u32);
        }
        for w in words {
            let id = token_to_id.len() as u32;
            token_to_id.insert(w, id);
        }
        Vocab { token_to_id }
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.token_to_id
            .get_index(id as usize)
            .map(|(t, _)| t.as_str())
            .unwrap_or(UNK_TOKEN)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_text(text)
            .iter()
            .map(|t| self.id_of(t).unwrap_or(Self::UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let tokens: Vec<String> = ids.iter().map(|&i| self.token(i).to_string()).collect();
        detokenize(&tokens)
    }

    /// Content hash of the ordered token list; checkpoints store this so a
    /// model is never resumed against a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tok, _) in &self.token_to_id {
            h.update(tok.as_bytes());
            h.update([0u8]);
        }
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            write!(s, "{b:02x}").expect("write to string");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("vocab {}: {e}", path.display())))?;
        let v: Vocab = serde_json::from_str(&text)?;
        for (i, r) in RESERVED.iter().enumerate() {
            if v.token_to_id.get_index(i).map(|(t, _)| t.as_str()) != Some(*r) {
                return Err(Error::Checkpoint(format!(
                    "vocab file does not reserve {r} at id {i}"
                )));
            }
        }
        Ok(v)
    }
}

// ── prompt plans ────────────────────────────────────────────────────────

fn expected_slots(kind: TemplateKind, window: &HistoryWindow) -> Result<Vec<(SlotKind, SlotRef, u32)>> {
    let mut out = Vec::new();
    let mut push_item = |reference: SlotRef, it: &Interaction, role: &str| -> Result<()> {
        match kind {
            TemplateKind::Type1 => {
                out.push((SlotKind::Ques, reference, qid_of(it, role)?));
                out.push((SlotKind::Conc, reference, cid_of(it, role)?));
            }
            TemplateKind::Type2 => out.push((SlotKind::Ques, reference, qid_of(it, role)?)),
            TemplateKind::Type3 | TemplateKind::Type5 => {
                out.push((SlotKind::Conc, reference, cid_of(it, role)?))
            }
            TemplateKind::Type4 => {}
        }
        Ok(())
    };
    for (i, it) in window.history.iter().enumerate() {
        push_item(SlotRef::History(i), it, &format!("history[{i}]"))?;
    }
    push_item(SlotRef::Target, &window.target, "target")?;
    Ok(out)
}

/// Renders, tokenizes, and pairs each slot marker with its binding.
pub fn plan_prompt(kind: TemplateKind, window: &HistoryWindow, vocab: &Vocab) -> Result<PromptPlan> {
    let text = render(kind, window)?;
    let token_ids = vocab.encode(&text);
    if token_ids.is_empty() {
        return Err(Error::Template("prompt tokenized to nothing".into()));
    }
    let expected = expected_slots(kind, window)?;
    let mut bindings = Vec::with_capacity(expected.len());
    let mut next = expected.iter();
    for (pos, &id) in token_ids.iter().enumerate() {
        let slot = match id {
            Vocab::QSLOT => SlotKind::Ques,
            Vocab::CSLOT => SlotKind::Conc,
            _ => continue,
        };
        let &(want_kind, reference, entity_id) = next.next().ok_or_else(|| {
            Error::Template("more slot markers in text than expected bindings".into())
        })?;
        if want_kind != slot {
            return Err(Error::Template(format!(
                "slot marker at token {pos} is {slot:?} but binding order expects {want_kind:?}"
            )));
        }
        bindings.push(SlotBinding { position: pos, slot, reference, entity_id });
    }
    if next.next().is_some() {
        return Err(Error::Template("fewer slot markers in text than expected bindings".into()));
    }
    let answer_position = token_ids.len() - 1;
    if vocab.token(token_ids[answer_position]) != ":" {
        return Err(Error::Template(
            "prompt does not end with the 'Response:' colon".into(),
        ));
    }
    Ok(PromptPlan { token_ids, slot_bindings: bindings, answer_position })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn it(
        student: &str,
        seq: u32,
        qid: Option<u32>,
        cids: &[u32],
        correct: bool,
        qtext: Option<&str>,
        ctexts: &[&str],
    ) -> Interaction {
        Interaction {
            student_id: student.to_string(),
            seq_index: seq,
            question_id: qid,
            concept_ids: cids.to_vec(),
            correct,
            question_text: qtext.map(str::to_string),
            concept_texts: ctexts.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn appendix_window() -> HistoryWindow {
        HistoryWindow {
            history: vec![
                it("s", 0, Some(74), &[6], true, Some("What is 7 plus 4?"), &["Basic Arithmetic"]),
                it("s", 1, Some(80), &[6], true, Some("What is 8 plus 0?"), &["Basic Arithmetic"]),
                it(
                    "s",
                    2,
                    Some(42),
                    &[5],
                    false,
                    Some("Order -3 and -5."),
                    &["Ordering Negative Numbers"],
                ),
            ],
            target: it(
                "s",
                3,
                Some(44),
                &[5],
                true,
                Some("Order -7 and -2."),
                &["Ordering Negative Numbers"],
            ),
            label: true,
        }
    }

    #[test]
    fn type1_matches_appendix_structure() {
        let text = render(TemplateKind::Type1, &appendix_window()).unwrap();
        assert!(text.starts_with(
            "The student has previously, in chronological order, answered question with ID=74 [QSLOT] involving concept ID=6 [CSLOT] correctly,"
        ));
        assert!(text.contains("question with ID=42 [QSLOT] involving concept ID=5 [CSLOT] incorrectly."));
        assert!(text.contains(
            "Please predict whether the student will answer the next question with ID=44 [QSLOT] involving concept ID=5 [CSLOT] correctly."
        ));
        assert!(text.ends_with("Response with 'Yes' or 'No'. Response:"));
    }

    #[test]
    fn type3_never_mentions_question_ids() {
        let text = render(TemplateKind::Type3, &appendix_window()).unwrap();
        assert!(!text.contains("question with ID="));
        assert!(text.contains("question involving concept ID=6 [CSLOT] correctly"));
    }

    #[test]
    fn type2_slot_counts() {
        let mut w = appendix_window();
        w.history.truncate(1);
        let text = render(TemplateKind::Type2, &w).unwrap();
        assert_eq!(text.matches("[QSLOT]").count(), 2); // one history item + target
        assert_eq!(text.matches("[CSLOT]").count(), 0);
    }

    #[test]
    fn type5_quotes_concept_text() {
        let text = render(TemplateKind::Type5, &appendix_window()).unwrap();
        assert!(text.contains("question involving concept \"Basic Arithmetic\" [CSLOT] correctly"));
        assert!(text
            .contains("the next question involving concept \"Ordering Negative Numbers\" [CSLOT]"));
    }

    #[test]
    fn missing_fields_are_named() {
        let mut w = appendix_window();
        w.history[1].concept_ids.clear();
        let err = render(TemplateKind::Type1, &w).unwrap_err();
        assert!(err.to_string().contains("history[1]"));
        assert!(err.to_string().contains("concept_ids"));
    }

    #[test]
    fn ablating_question_yields_type3_text() {
        let w = appendix_window();
        let mut drop = BTreeSet::new();
        drop.insert(Entity::Question);
        let ablated = render_ablated(TemplateKind::Type1, &w, &drop).unwrap();
        let direct = render(TemplateKind::Type3, &w).unwrap();
        assert_eq!(ablated, direct);
    }

    #[test]
    fn ablating_concept_yields_type2_text() {
        let w = appendix_window();
        let mut drop = BTreeSet::new();
        drop.insert(Entity::Concept);
        let ablated = render_ablated(TemplateKind::Type1, &w, &drop).unwrap();
        let direct = render(TemplateKind::Type2, &w).unwrap();
        assert_eq!(ablated, direct);
    }

    #[test]
    fn ablating_nothing_is_identity_and_everything_errors() {
        let w = appendix_window();
        let none = BTreeSet::new();
        assert_eq!(
            render_ablated(TemplateKind::Type1, &w, &none).unwrap(),
            render(TemplateKind::Type1, &w).unwrap()
        );
        let both: BTreeSet<Entity> = [Entity::Question, Entity::Concept].into();
        assert!(render_ablated(TemplateKind::Type1, &w, &both).is_err());
    }

    #[test]
    fn tokenizer_round_trips_template_text() {
        let w = appendix_window();
        for kind in [
            TemplateKind::Type1,
            TemplateKind::Type2,
            TemplateKind::Type3,
            TemplateKind::Type5,
        ] {
            let text = render(kind, &w).unwrap();
            let toks = split_text(&text);
            assert_eq!(detokenize(&toks), text, "round trip failed for {kind:?}");
        }
    }

    #[test]
    fn markers_and_answers_are_single_tokens() {
        let toks = split_text("Response with 'Yes' or 'No'. Response: Yes");
        assert_eq!(
            toks,
            vec!["Response", "with", "'Yes'", "or", "'No'", ".", "Response", ":", "Yes"]
        );
        let toks = split_text("ID=44 [QSLOT] involving");
        assert_eq!(toks, vec!["ID", "=", "44", "[QSLOT]", "involving"]);
    }

    #[test]
    fn vocab_reserves_fixed_ids() {
        let v = Vocab::build(["hello world"]);
        assert_eq!(v.id_of("[PAD]"), Some(Vocab::PAD));
        assert_eq!(v.id_of("[UNK]"), Some(Vocab::UNK));
        assert_eq!(v.id_of("[QSLOT]"), Some(Vocab::QSLOT));
        assert_eq!(v.id_of("[CSLOT]"), Some(Vocab::CSLOT));
        assert_eq!(v.id_of("Yes"), Some(Vocab::YES));
        assert_eq!(v.id_of("No"), Some(Vocab::NO));
        assert_eq!(v.encode("unknownword"), vec![Vocab::UNK]);
    }

    #[test]
    fn vocab_is_order_independent() {
        let a = Vocab::build(["alpha beta", "gamma"]);
        let b = Vocab::build(["gamma", "beta alpha"]);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.id_of("beta"), b.id_of("beta"));
    }

    #[test]
    fn vocab_round_trips_through_disk() {
        let w = appendix_window();
        let text = render(TemplateKind::Type1, &w).unwrap();
        let v = Vocab::build([text.as_str()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert_eq!(back.encode(&text), v.encode(&text));
    }

    #[test]
    fn vocab_survives_json_key_reordering() {
        // serde_json::Value sorts object keys alphabetically, clobbering
        // insertion order; index-based lookups must still resolve by id.
        let v = Vocab::build(["zeta alpha mid"]);
        let value = serde_json::to_value(&v).unwrap();
        let back: Vocab = serde_json::from_value(value).unwrap();
        assert_eq!(back.fingerprint(), v.fingerprint());
        for id in 0..v.len() as u32 {
            assert_eq!(back.token(id), v.token(id));
        }
    }

    #[test]
    fn plan_counts_and_positions() {
        let w = appendix_window();
        let text = render(TemplateKind::Type1, &w).unwrap();
        let vocab = Vocab::build([text.as_str()]);
        let plan = plan_prompt(TemplateKind::Type1, &w, &vocab).unwrap();
        assert_eq!(plan.slot_bindings.len(), 8); // 2 slots x (3 history + target)
        let mut prev = 0;
        for (i, b) in plan.slot_bindings.iter().enumerate() {
            if i > 0 {
                assert!(b.position > prev, "positions must strictly increase");
            }
            prev = b.position;
            // re-scan oracle: the token at each bound position is its marker
            let expect = match b.slot {
                SlotKind::Ques => Vocab::QSLOT,
                SlotKind::Conc => Vocab::CSLOT,
            };
            assert_eq!(plan.token_ids[b.position], expect);
        }
        assert_eq!(plan.slot_bindings[6].reference, SlotRef::Target);
        assert_eq!(plan.slot_bindings[6].entity_id, 44);
        assert_eq!(plan.slot_bindings[7].entity_id, 5);
        assert_eq!(plan.answer_position, plan.token_ids.len() - 1);
        assert_eq!(vocab.token(plan.token_ids[plan.answer_position]), ":");
    }

    #[test]
    fn type3_plan_is_all_concept_slots() {
        let mut w = appendix_window();
        // five history items
        w.history = (0..5)
            .map(|i| it("s", i, Some(i as u32), &[i as u32 % 3], i % 2 == 0, None, &[]))
            .collect();
        w.target.seq_index = 5;
        let text = render(TemplateKind::Type3, &w).unwrap();
        let vocab = Vocab::build([text.as_str()]);
        let plan = plan_prompt(TemplateKind::Type3, &w, &vocab).unwrap();
        assert_eq!(plan.slot_bindings.len(), 6);
        assert!(plan.slot_bindings.iter().all(|b| b.slot == SlotKind::Conc));
    }

    #[test]
    fn type4_renders_without_bindings() {
        let w = appendix_window();
        let text = render(TemplateKind::Type4, &w).unwrap();
        assert!(text.contains("1) What is 7 plus 4?"));
        assert!(text.contains("Related knowledge concepts: Basic Arithmetic"));
        assert!(text.contains("The student answered this question incorrectly"));
        assert!(text.contains("The target question is given as follows:"));
        assert!(text.ends_with("Response with 'Yes' or 'No'. Response:"));
        let vocab = Vocab::build([text.as_str()]);
        let plan = plan_prompt(TemplateKind::Type4, &w, &vocab).unwrap();
        assert!(plan.slot_bindings.is_empty());
    }
}
