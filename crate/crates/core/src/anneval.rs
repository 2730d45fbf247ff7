//! Human evaluation of generated intents.
//!
//! Annotators label who manipulates in each dialogue (Person1 = A,
//! Person2 = B, or both), or judge whether a generated intent pair points at
//! the labeled manipulator. Answers are appended to a per-annotator JSON-lines
//! session file as soon as they are given, so an interrupted session resumes
//! where it stopped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::pipeline::IntentPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manipulator {
    A,
    B,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntentVerdict {
    Accurate,
    Inaccurate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub dialogue_id: String,
    pub annotator_id: String,
    pub manipulator: Manipulator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentJudgment {
    pub dialogue_id: String,
    pub judge_id: String,
    pub verdict: IntentVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionAnswer {
    A,
    B,
    Both,
    Accurate,
    Inaccurate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    /// Label the manipulator(s).
    Manipulator,
    /// Judge generated intents as accurate or not.
    IntentJudgment,
}

impl SessionMode {
    fn accepts(self, a: SessionAnswer) -> bool {
        match self {
            SessionMode::Manipulator => {
                matches!(a, SessionAnswer::A | SessionAnswer::B | SessionAnswer::Both)
            }
            SessionMode::IntentJudgment => {
                matches!(a, SessionAnswer::Accurate | SessionAnswer::Inaccurate)
            }
        }
    }

    fn parse_key(self, input: &str) -> Option<SessionAnswer> {
        let key = input.trim().to_ascii_lowercase();
        match self {
            SessionMode::Manipulator => match key.as_str() {
                "a" => Some(SessionAnswer::A),
                "b" => Some(SessionAnswer::B),
                "x" | "ab" | "both" => Some(SessionAnswer::Both),
                _ => None,
            },
            SessionMode::IntentJudgment => match key.as_str() {
                "y" | "accurate" => Some(SessionAnswer::Accurate),
                "n" | "inaccurate" => Some(SessionAnswer::Inaccurate),
                _ => None,
            },
        }
    }

    fn prompt(self) -> &'static str {
        match self {
            SessionMode::Manipulator => {
                "Manipulator? [a] Person1  [b] Person2  [x] both  [q] quit > "
            }
            SessionMode::IntentJudgment => {
                "Do the intents point at the manipulator(s)? [y] accurate  [n] inaccurate  [q] quit > "
            }
        }
    }

    fn file_suffix(self) -> &'static str {
        match self {
            SessionMode::Manipulator => "jsonl",
            SessionMode::IntentJudgment => "intents.jsonl",
        }
    }
}

/// Help text listing the session keybindings.
pub const KEYBINDINGS: &str = "\
Manipulator mode:  a = Person1 (A), b = Person2 (B), x | ab | both = both, q = quit
Judgment mode:     y = accurate, n = inaccurate, q = quit
Answers are saved immediately; rerun with --resume to continue a session.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub dialogue_id: String,
    pub annotator_id: String,
    pub answer: SessionAnswer,
    pub timestamp: String,
}

#[derive(Debug, Error)]
pub enum AnnevalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("annotator id {0:?} must be non-empty and use only letters, digits, '-' or '_'")]
    InvalidAnnotatorId(String),
    #[error("session file {0} already has answers; pass --resume to continue it")]
    SessionExists(PathBuf),
    #[error("session file belongs to annotator {found:?}, not {expected:?}")]
    AnnotatorMismatch { expected: String, found: String },
    #[error("answer {answer:?} does not belong in this session type")]
    WrongAnswerKind { answer: SessionAnswer },
    #[error("dialogue id sets differ ({only_first} only in first, {only_second} only in second)")]
    IdMismatch {
        only_first: usize,
        only_second: usize,
    },
    #[error("duplicate record for dialogue {0:?}")]
    DuplicateRecord(String),
    #[error("no records")]
    Empty,
    #[error("annotators disagree on {0:?} and the consensus has no entry for it")]
    MissingConsensus(String),
    #[error("no generated intents for dialogue {0:?}")]
    MissingIntents(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnevalError + '_ {
    move |source| AnnevalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_annotator_id(id: &str) -> Result<(), AnnevalError> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(AnnevalError::InvalidAnnotatorId(id.to_string()))
    }
}

pub fn session_path(dir: &Path, annotator_id: &str, mode: SessionMode) -> PathBuf {
    dir.join(format!("{annotator_id}.{}", mode.file_suffix()))
}

pub fn read_session(path: &Path) -> Result<Vec<SessionRecord>, AnnevalError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| AnnevalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Append-only session file for one annotator.
pub struct Session {
    path: PathBuf,
    annotator_id: String,
    mode: SessionMode,
    records: Vec<SessionRecord>,
    file: File,
}

impl Session {
    /// Opens `<dir>/<annotator_id>.jsonl` (or `.intents.jsonl` in judgment
    /// mode). An existing file with answers is only reopened when `resume`.
    pub fn open(
        dir: &Path,
        annotator_id: &str,
        mode: SessionMode,
        resume: bool,
    ) -> Result<Self, AnnevalError> {
        check_annotator_id(annotator_id)?;
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = session_path(dir, annotator_id, mode);
        let records = if path.exists() {
            read_session(&path)?
        } else {
            Vec::new()
        };
        if !records.is_empty() && !resume {
            return Err(AnnevalError::SessionExists(path));
        }
        for r in &records {
            if r.annotator_id != annotator_id {
                return Err(AnnevalError::AnnotatorMismatch {
                    expected: annotator_id.to_string(),
                    found: r.annotator_id.clone(),
                });
            }
            if !mode.accepts(r.answer) {
                return Err(AnnevalError::WrongAnswerKind { answer: r.answer });
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            annotator_id: annotator_id.to_string(),
            mode,
            records,
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[SessionRecord] {
        &self.records
    }

    pub fn is_done(&self, dialogue_id: &str) -> bool {
        self.records.iter().any(|r| r.dialogue_id == dialogue_id)
    }

    fn append(&mut self, dialogue_id: &str, answer: SessionAnswer) -> Result<(), AnnevalError> {
        let rec = SessionRecord {
            dialogue_id: dialogue_id.to_string(),
            annotator_id: self.annotator_id.clone(),
            answer,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(io_err(&self.path))?;
        self.records.push(rec);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSummary {
    /// Dialogues presented during this invocation.
    pub prompted: usize,
    /// Answers recorded during this invocation.
    pub answered: usize,
    /// Dialogues still without an answer.
    pub remaining: usize,
}

/// Presents each unanswered dialogue of `corpus` in order and records the
/// answer read from `input`. Stops early on `q` or end of input.
///
/// In judgment mode `intents` must hold a pair for every dialogue.
pub fn annotate_session<R: BufRead, W: Write + ?Sized>(
    corpus: &Corpus,
    intents: Option<&HashMap<String, IntentPair>>,
    session: &mut Session,
    mut input: R,
    output: &mut W,
) -> Result<SessionSummary, AnnevalError> {
    let mode = session.mode;
    let pending: Vec<_> = corpus
        .dialogues()
        .iter()
        .filter(|d| !session.is_done(&d.id))
        .collect();
    let total = corpus.len();
    let out_err = |e: std::io::Error| AnnevalError::Io {
        path: PathBuf::from("<output>"),
        source: e,
    };
    let mut summary = SessionSummary {
        prompted: 0,
        answered: 0,
        remaining: pending.len(),
    };
    if pending.is_empty() {
        writeln!(output, "Session complete: {total} of {total} dialogues answered.")
            .map_err(out_err)?;
        return Ok(summary);
    }
    'dialogues: for d in pending {
        let pair = match (mode, intents) {
            (SessionMode::IntentJudgment, Some(map)) => Some(
                map.get(&d.id)
                    .ok_or_else(|| AnnevalError::MissingIntents(d.id.clone()))?,
            ),
            (SessionMode::IntentJudgment, None) => {
                return Err(AnnevalError::MissingIntents(d.id.clone()))
            }
            _ => None,
        };
        summary.prompted += 1;
        let done = total - summary.remaining;
        writeln!(output, "\n[{}/{}] Dialogue {}\n{}", done + 1, total, d.id, d.to_text())
            .map_err(out_err)?;
        if let Some(p) = pair {
            writeln!(
                output,
                "\nPerson1's intent: {}\nPerson2's intent: {}",
                p.intent_a, p.intent_b
            )
            .map_err(out_err)?;
        }
        loop {
            write!(output, "{}", mode.prompt()).map_err(out_err)?;
            output.flush().map_err(out_err)?;
            let mut line = String::new();
            let n = input.read_line(&mut line).map_err(out_err)?;
            if n == 0 || line.trim().eq_ignore_ascii_case("q") {
                writeln!(output, "\nStopped; {} dialogue(s) left.", summary.remaining)
                    .map_err(out_err)?;
                break 'dialogues;
            }
            match mode.parse_key(&line) {
                Some(answer) => {
                    session.append(&d.id, answer)?;
                    summary.answered += 1;
                    summary.remaining -= 1;
                    break;
                }
                None => writeln!(output, "Unrecognized answer {:?}.", line.trim())
                    .map_err(out_err)?,
            }
        }
    }
    Ok(summary)
}

pub fn to_annotations(records: &[SessionRecord]) -> Result<Vec<AnnotationRecord>, AnnevalError> {
    records
        .iter()
        .map(|r| {
            let manipulator = match r.answer {
                SessionAnswer::A => Manipulator::A,
                SessionAnswer::B => Manipulator::B,
                SessionAnswer::Both => Manipulator::Both,
                other => return Err(AnnevalError::WrongAnswerKind { answer: other }),
            };
            Ok(AnnotationRecord {
                dialogue_id: r.dialogue_id.clone(),
                annotator_id: r.annotator_id.clone(),
                manipulator,
            })
        })
        .collect()
}

pub fn to_judgments(records: &[SessionRecord]) -> Result<Vec<IntentJudgment>, AnnevalError> {
    records
        .iter()
        .map(|r| {
            let verdict = match r.answer {
                SessionAnswer::Accurate => IntentVerdict::Accurate,
                SessionAnswer::Inaccurate => IntentVerdict::Inaccurate,
                other => return Err(AnnevalError::WrongAnswerKind { answer: other }),
            };
            Ok(IntentJudgment {
                dialogue_id: r.dialogue_id.clone(),
                judge_id: r.annotator_id.clone(),
                verdict,
            })
        })
        .collect()
}

fn by_id(records: &[AnnotationRecord]) -> Result<BTreeMap<&str, Manipulator>, AnnevalError> {
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert(r.dialogue_id.as_str(), r.manipulator).is_some() {
            return Err(AnnevalError::DuplicateRecord(r.dialogue_id.clone()));
        }
    }
    Ok(map)
}

/// Paired labels of two annotators over the same dialogue ids.
fn paired(
    a1: &[AnnotationRecord],
    a2: &[AnnotationRecord],
) -> Result<Vec<(Manipulator, Manipulator)>, AnnevalError> {
    let (m1, m2) = (by_id(a1)?, by_id(a2)?);
    let k1: BTreeSet<&str> = m1.keys().copied().collect();
    let k2: BTreeSet<&str> = m2.keys().copied().collect();
    if k1 != k2 {
        return Err(AnnevalError::IdMismatch {
            only_first: k1.difference(&k2).count(),
            only_second: k2.difference(&k1).count(),
        });
    }
    if k1.is_empty() {
        return Err(AnnevalError::Empty);
    }
    Ok(m1.iter().map(|(id, l)| (*l, m2[id])).collect())
}

/// Fraction of dialogues on which both annotators chose the same label.
pub fn percent_agreement(
    a1: &[AnnotationRecord],
    a2: &[AnnotationRecord],
) -> Result<f64, AnnevalError> {
    let pairs = paired(a1, a2)?;
    let agree = pairs.iter().filter(|(x, y)| x == y).count();
    Ok(agree as f64 / pairs.len() as f64)
}

/// Cohen's kappa over the three manipulator labels.
pub fn cohen_kappa(a1: &[AnnotationRecord], a2: &[AnnotationRecord]) -> Result<f64, AnnevalError> {
    let pairs = paired(a1, a2)?;
    let n = pairs.len() as f64;
    let observed = pairs.iter().filter(|(x, y)| x == y).count() as f64 / n;
    let expected: f64 = [Manipulator::A, Manipulator::B, Manipulator::Both]
        .iter()
        .map(|l| {
            let p1 = pairs.iter().filter(|(x, _)| x == l).count() as f64 / n;
            let p2 = pairs.iter().filter(|(_, y)| y == l).count() as f64 / n;
            p1 * p2
        })
        .sum();
    if (1.0 - expected).abs() < f64::EPSILON {
        return Ok(if observed == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Fraction of judgments rated accurate.
pub fn intent_accuracy(judgments: &[IntentJudgment]) -> Result<f64, AnnevalError> {
    if judgments.is_empty() {
        return Err(AnnevalError::Empty);
    }
    let mut seen = BTreeSet::new();
    for j in judgments {
        if !seen.insert((j.dialogue_id.as_str(), j.judge_id.as_str())) {
            return Err(AnnevalError::DuplicateRecord(j.dialogue_id.clone()));
        }
    }
    let accurate = judgments
        .iter()
        .filter(|j| j.verdict == IntentVerdict::Accurate)
        .count();
    Ok(accurate as f64 / judgments.len() as f64)
}

/// Final labels: the shared label where the two annotators agree, the
/// consensus session's label where they do not. Raw sessions are untouched.
pub fn merge_consensus(
    a1: &[AnnotationRecord],
    a2: &[AnnotationRecord],
    consensus: &[AnnotationRecord],
) -> Result<Vec<AnnotationRecord>, AnnevalError> {
    let (m1, m2, mc) = (by_id(a1)?, by_id(a2)?, by_id(consensus)?);
    paired(a1, a2)?;
    m1.iter()
        .map(|(id, l1)| {
            let label = if *l1 == m2[id] {
                *l1
            } else {
                *mc.get(id)
                    .ok_or_else(|| AnnevalError::MissingConsensus(id.to_string()))?
            };
            Ok(AnnotationRecord {
                dialogue_id: id.to_string(),
                annotator_id: "consensus".into(),
                manipulator: label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_dialogue, Provenance};
    use rand::{Rng, SeedableRng};

    fn corpus(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| parse_dialogue(&format!("Person1: hi {i}"), format!("d{i}"), None).unwrap())
                .collect(),
            Provenance::default(),
        )
        .unwrap()
    }

    fn rec(id: &str, who: &str, m: Manipulator) -> AnnotationRecord {
        AnnotationRecord {
            dialogue_id: id.into(),
            annotator_id: who.into(),
            manipulator: m,
        }
    }

    #[test]
    fn three_answers_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::open(dir.path(), "ann1", SessionMode::Manipulator, false).unwrap();
        let mut out = Vec::new();
        let summary =
            annotate_session(&corpus(3), None, &mut s, "a\nb\nboth\n".as_bytes(), &mut out).unwrap();
        assert_eq!(summary.answered, 3);
        let answers: Vec<_> = s.records().iter().map(|r| (r.dialogue_id.as_str(), r.answer)).collect();
        assert_eq!(
            answers,
            [("d0", SessionAnswer::A), ("d1", SessionAnswer::B), ("d2", SessionAnswer::Both)]
        );
        assert_eq!(read_session(s.path()).unwrap(), s.records());
    }

    #[test]
    fn invalid_key_reprompts() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::open(dir.path(), "ann1", SessionMode::Manipulator, false).unwrap();
        let mut out = Vec::new();
        annotate_session(&corpus(1), None, &mut s, "z\n\nb\n".as_bytes(), &mut out).unwrap();
        assert_eq!(s.records()[0].answer, SessionAnswer::B);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.matches("Manipulator?").count(), 3);
    }

    #[test]
    fn interrupted_session_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(3);
        {
            let mut s = Session::open(dir.path(), "ann1", SessionMode::Manipulator, false).unwrap();
            let sum = annotate_session(&c, None, &mut s, "a\nb\n".as_bytes(), &mut Vec::new()).unwrap();
            assert_eq!((sum.answered, sum.remaining), (2, 1));
        }
        assert!(matches!(
            Session::open(dir.path(), "ann1", SessionMode::Manipulator, false),
            Err(AnnevalError::SessionExists(_))
        ));
        let mut s = Session::open(dir.path(), "ann1", SessionMode::Manipulator, true).unwrap();
        let mut out = Vec::new();
        let sum = annotate_session(&c, None, &mut s, "x\n".as_bytes(), &mut out).unwrap();
        assert_eq!((sum.prompted, sum.answered, sum.remaining), (1, 1, 0));
        assert_eq!(String::from_utf8(out).unwrap().matches("Manipulator?").count(), 1);
        assert_eq!(s.records().len(), 3);

        let mut out = Vec::new();
        let sum = annotate_session(&c, None, &mut s, "".as_bytes(), &mut out).unwrap();
        assert_eq!(sum.prompted, 0);
        assert!(String::from_utf8(out).unwrap().starts_with("Session complete"));
    }

    #[test]
    fn annotators_get_separate_files() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = Session::open(dir.path(), "alice", SessionMode::Manipulator, false).unwrap();
        let s2 = Session::open(dir.path(), "bob", SessionMode::Manipulator, false).unwrap();
        assert_ne!(s1.path(), s2.path());
        assert!(Session::open(dir.path(), "../evil", SessionMode::Manipulator, false).is_err());
    }

    #[test]
    fn judgment_mode_shows_intents() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(1);
        let intents: HashMap<_, _> = [(
            "d0".to_string(),
            IntentPair {
                dialogue_id: "d0".into(),
                intent_a: "A wants.".into(),
                intent_b: "B wants.".into(),
            },
        )]
        .into_iter()
        .collect();
        let mut s = Session::open(dir.path(), "j", SessionMode::IntentJudgment, false).unwrap();
        let mut out = Vec::new();
        annotate_session(&c, Some(&intents), &mut s, "a\ny\n".as_bytes(), &mut out).unwrap();
        assert_eq!(s.records()[0].answer, SessionAnswer::Accurate);
        assert!(String::from_utf8(out).unwrap().contains("Person1's intent: A wants."));
        let j = to_judgments(s.records()).unwrap();
        assert_eq!(intent_accuracy(&j).unwrap(), 1.0);
        assert!(to_annotations(s.records()).is_err());
    }

    fn fixture(agree: usize, n: usize) -> (Vec<AnnotationRecord>, Vec<AnnotationRecord>) {
        let labels = [Manipulator::A, Manipulator::B, Manipulator::Both];
        let a1: Vec<_> = (0..n).map(|i| rec(&format!("d{i}"), "x", labels[i % 3])).collect();
        let a2: Vec<_> = (0..n)
            .map(|i| {
                let l = if i < agree { labels[i % 3] } else { labels[(i + 1) % 3] };
                rec(&format!("d{i}"), "y", l)
            })
            .collect();
        (a1, a2)
    }

    #[test]
    fn agreement_fixture() {
        let (a1, a2) = fixture(37, 50);
        assert_eq!(percent_agreement(&a1, &a2).unwrap(), 0.74);
        assert_eq!(percent_agreement(&a2, &a1).unwrap(), 0.74);
        assert_eq!(percent_agreement(&a1, &a1).unwrap(), 1.0);
    }

    #[test]
    fn agreement_id_mismatch() {
        let (a1, mut a2) = fixture(10, 10);
        a2.pop();
        assert!(matches!(
            percent_agreement(&a1, &a2),
            Err(AnnevalError::IdMismatch { only_first: 1, only_second: 0 })
        ));
        let mut dup = a1.clone();
        dup.push(a1[0].clone());
        assert!(matches!(percent_agreement(&dup, &a1), Err(AnnevalError::DuplicateRecord(_))));
    }

    #[test]
    fn agreement_matches_count_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let labels = [Manipulator::A, Manipulator::B, Manipulator::Both];
        for _ in 0..20 {
            let pairs: Vec<(Manipulator, Manipulator)> = (0..50)
                .map(|_| (labels[rng.gen_range(0..3)], labels[rng.gen_range(0..3)]))
                .collect();
            let a1: Vec<_> = pairs.iter().enumerate().map(|(i, p)| rec(&i.to_string(), "x", p.0)).collect();
            let a2: Vec<_> = pairs.iter().enumerate().map(|(i, p)| rec(&i.to_string(), "y", p.1)).collect();
            let mut same = 0;
            for (x, y) in &pairs {
                if x == y {
                    same += 1;
                }
            }
            assert_eq!(percent_agreement(&a1, &a2).unwrap(), same as f64 / 50.0);
        }
    }

    #[test]
    fn kappa_values() {
        let (a1, _) = fixture(0, 30);
        assert_eq!(cohen_kappa(&a1, &a1).unwrap(), 1.0);
        // 2x2 textbook case: po = 0.7, pe = 0.5 -> 0.4.
        let l = |i: usize, who: &str, m| rec(&i.to_string(), who, m);
        let (a, b) = (Manipulator::A, Manipulator::B);
        let first = [a, a, a, a, a, b, b, b, b, b];
        let second = [a, a, a, a, b, b, b, b, a, a];
        let r1: Vec<_> = first.iter().enumerate().map(|(i, m)| l(i, "x", *m)).collect();
        let r2: Vec<_> = second.iter().enumerate().map(|(i, m)| l(i, "y", *m)).collect();
        assert!((cohen_kappa(&r1, &r2).unwrap() - 0.4).abs() < 1e-12);
    }

    fn judgments(accurate: usize, n: usize) -> Vec<IntentJudgment> {
        (0..n)
            .map(|i| IntentJudgment {
                dialogue_id: format!("d{i}"),
                judge_id: "j".into(),
                verdict: if i < accurate {
                    IntentVerdict::Accurate
                } else {
                    IntentVerdict::Inaccurate
                },
            })
            .collect()
    }

    #[test]
    fn intent_accuracy_fixture() {
        assert_eq!(intent_accuracy(&judgments(41, 50)).unwrap(), 0.82);
        assert_eq!(intent_accuracy(&judgments(50, 50)).unwrap(), 1.0);
        assert!(matches!(intent_accuracy(&[]), Err(AnnevalError::Empty)));
        let j = judgments(13, 40);
        let inaccurate = j.iter().filter(|x| x.verdict == IntentVerdict::Inaccurate).count();
        assert!((intent_accuracy(&j).unwrap() - (1.0 - inaccurate as f64 / 40.0)).abs() < 1e-12);
    }

    #[test]
    fn consensus_fills_disagreements() {
        let a1 = vec![rec("d0", "x", Manipulator::A), rec("d1", "x", Manipulator::B)];
        let a2 = vec![rec("d0", "y", Manipulator::A), rec("d1", "y", Manipulator::Both)];
        assert!(matches!(
            merge_consensus(&a1, &a2, &[]),
            Err(AnnevalError::MissingConsensus(id)) if id == "d1"
        ));
        let merged = merge_consensus(&a1, &a2, &[rec("d1", "c", Manipulator::Both)]).unwrap();
        let labels: Vec<_> = merged.iter().map(|r| r.manipulator).collect();
        assert_eq!(labels, [Manipulator::A, Manipulator::Both]);
    }
}
