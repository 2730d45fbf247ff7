//! Dialogue corpus: parsing, dataset loading, seeded subsampling and
//! few-shot exemplar selection.
//!
//! Dialogues use the `PersonN:` line format of the MentalManip release.
//! Sampling is driven by ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`)
//! applied as a partial Fisher-Yates shuffle over the id-sorted dialogues, so
//! a given seed always selects the same ids regardless of input order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    Person1,
    Person2,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Person1 => "Person1",
            Speaker::Person2 => "Person2",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Speaker::Person1 => "Person1:",
            Speaker::Person2 => "Person2:",
        }
    }

    /// Returns the speaker and the remainder of the line if it starts with a
    /// speaker prefix.
    fn strip_prefix(line: &str) -> Option<(Speaker, &str)> {
        [Speaker::Person1, Speaker::Person2]
            .into_iter()
            .find_map(|s| line.strip_prefix(s.prefix()).map(|rest| (s, rest)))
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Manipulative,
    NonManipulative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub gold_label: Option<Label>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DialogueError {
    #[error("dialogue has no `Person1:`/`Person2:` line")]
    EmptyDialogue,
    #[error("line {line} precedes any speaker prefix: {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("turn {turn} has an empty utterance")]
    EmptyUtterance { turn: usize },
    #[error("turn {turn} is not in canonical form")]
    NonCanonicalUtterance { turn: usize },
}

/// Parses `PersonN:`-prefixed dialogue text.
///
/// Lines without a prefix continue the previous turn and are joined with a
/// single `\n`. Blank lines before the first turn are ignored; carriage
/// returns are dropped.
pub fn parse_dialogue(
    text: &str,
    id: impl Into<String>,
    gold_label: Option<Label>,
) -> Result<Dialogue, DialogueError> {
    let mut turns: Vec<Turn> = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        match Speaker::strip_prefix(line) {
            Some((speaker, rest)) => turns.push(Turn {
                speaker,
                utterance: rest.trim_start().to_string(),
            }),
            None => match turns.last_mut() {
                Some(turn) => {
                    turn.utterance.push('\n');
                    turn.utterance.push_str(line);
                }
                None if line.trim().is_empty() => {}
                None => {
                    return Err(DialogueError::MalformedLine {
                        line: idx + 1,
                        text: line.to_string(),
                    })
                }
            },
        }
    }
    if turns.is_empty() {
        return Err(DialogueError::EmptyDialogue);
    }
    for (i, turn) in turns.iter_mut().enumerate() {
        let trimmed = turn.utterance.trim_end();
        if trimmed.is_empty() {
            return Err(DialogueError::EmptyUtterance { turn: i + 1 });
        }
        turn.utterance.truncate(trimmed.len());
    }
    Ok(Dialogue {
        id: id.into(),
        turns,
        gold_label,
    })
}

impl Dialogue {
    /// Checks the invariants that make `parse_dialogue(d.to_text())` return `d`.
    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.turns.is_empty() {
            return Err(DialogueError::EmptyDialogue);
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let u = &turn.utterance;
            if u.trim().is_empty() {
                return Err(DialogueError::EmptyUtterance { turn: i + 1 });
            }
            let continuation_clash = u
                .split('\n')
                .skip(1)
                .any(|l| Speaker::strip_prefix(l).is_some());
            if u.trim() != u || u.contains('\r') || continuation_clash {
                return Err(DialogueError::NonCanonicalUtterance { turn: i + 1 });
            }
        }
        Ok(())
    }

    /// Serialized `PersonN: utterance` form, one turn per line, no trailing
    /// newline.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn is_manipulative(&self) -> bool {
        self.gold_label == Some(Label::Manipulative)
    }
}

impl fmt::Display for Dialogue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, turn) in self.turns.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{}: {}", turn.speaker, turn.utterance)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    pub filter: Option<String>,
    pub sample_seed: Option<u64>,
    pub sample_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dialogues: Vec<Dialogue>,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate dialogue id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    Empty,
    #[error("sample fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("few-shot pool needs at least 1 manipulative and 2 non-manipulative dialogues (has {manipulative} and {non_manipulative})")]
    InsufficientPool {
        manipulative: usize,
        non_manipulative: usize,
    },
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>, provenance: Provenance) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for d in &dialogues {
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        Ok(Self {
            dialogues,
            provenance,
        })
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.dialogues.iter().map(|d| d.id.as_str()).collect()
    }

    /// Dialogues of `self` whose ids do not appear in `other`, in original order.
    pub fn complement(&self, other: &Corpus) -> Corpus {
        let exclude: HashSet<&str> = other.dialogues.iter().map(|d| d.id.as_str()).collect();
        Corpus {
            dialogues: self
                .dialogues
                .iter()
                .filter(|d| !exclude.contains(d.id.as_str()))
                .cloned()
                .collect(),
            provenance: Provenance {
                filter: Some("complement-of-sample".into()),
                ..self.provenance.clone()
            },
        }
    }

    /// Keeps dialogues matching `pred`, recording `tag` as the provenance filter.
    pub fn filter(&self, tag: &str, pred: impl Fn(&Dialogue) -> bool) -> Corpus {
        Corpus {
            dialogues: self.dialogues.iter().filter(|d| pred(d)).cloned().collect(),
            provenance: Provenance {
                filter: Some(tag.to_string()),
                ..self.provenance.clone()
            },
        }
    }

    fn sorted_by_id(&self) -> Vec<&Dialogue> {
        let mut v: Vec<&Dialogue> = self.dialogues.iter().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }
}

/// Column names for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub id: String,
    pub dialogue: String,
    /// `None` loads an unlabeled corpus.
    pub label: Option<String>,
    /// Raw label cell value to label. Empty uses [`default_label_values`].
    #[serde(default)]
    pub label_values: BTreeMap<String, Label>,
}

impl Default for SchemaMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            dialogue: "dialogue".into(),
            label: Some("manipulative".into()),
            label_values: BTreeMap::new(),
        }
    }
}

pub fn default_label_values() -> BTreeMap<String, Label> {
    [
        ("1", Label::Manipulative),
        ("Yes", Label::Manipulative),
        ("0", Label::NonManipulative),
        ("No", Label::NonManipulative),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Comma,
    Tab,
}

impl Delimiter {
    /// `.tsv`/`.tab` files are tab separated, anything else comma separated.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(ext) if ext == "tsv" || ext == "tab" => Delimiter::Tab,
            _ => Delimiter::Comma,
        }
    }

    fn byte(self) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Tab => b'\t',
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub delimiter: Option<Delimiter>,
    /// Abort on the first set of row errors instead of skipping bad rows.
    pub strict: bool,
}

#[derive(Debug, Error)]
pub enum RowErrorKind {
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error("unrecognized label value {0:?}")]
    Label(String),
    #[error("empty id")]
    EmptyId,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("malformed record: {0}")]
    Record(String),
}

#[derive(Debug, Error)]
#[error("row {row}: {kind}")]
pub struct RowError {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub kind: RowErrorKind,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing column {0:?}")]
    SchemaError(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{} row(s) failed to load; first: {}", .0.len(), .0[0])]
    Rows(Vec<RowError>),
}

#[derive(Debug)]
pub struct LoadReport {
    pub corpus: Corpus,
    /// Rows skipped in non-strict mode.
    pub row_errors: Vec<RowError>,
}

/// Loads a delimited dataset with a header row into a [`Corpus`].
pub fn load_dataset(
    path: &Path,
    schema: &SchemaMap,
    opts: &LoadOptions,
) -> Result<LoadReport, LoadError> {
    let file = std::fs::File::open(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let delimiter = opts.delimiter.unwrap_or_else(|| Delimiter::from_path(path));
    let mut report = load_from_reader(file, delimiter, schema, opts.strict)?;
    report.corpus.provenance.source = Some(path.to_path_buf());
    Ok(report)
}

pub fn load_from_reader<R: std::io::Read>(
    reader: R,
    delimiter: Delimiter,
    schema: &SchemaMap,
    strict: bool,
) -> Result<LoadReport, LoadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter.byte())
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| LoadError::SchemaError(name.to_string()))
    };
    let id_col = column(&schema.id)?;
    let text_col = column(&schema.dialogue)?;
    let label_col = schema.label.as_deref().map(column).transpose()?;
    let values = if schema.label_values.is_empty() {
        default_label_values()
    } else {
        schema.label_values.clone()
    };

    let mut dialogues = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError {
                    row,
                    kind: RowErrorKind::Record(e.to_string()),
                });
                continue;
            }
        };
        match parse_row(&rec, id_col, text_col, label_col, &values) {
            Ok(d) if !seen.insert(d.id.clone()) => errors.push(RowError {
                row,
                kind: RowErrorKind::DuplicateId(d.id),
            }),
            Ok(d) => dialogues.push(d),
            Err(kind) => errors.push(RowError { row, kind }),
        }
    }
    if strict && !errors.is_empty() {
        return Err(LoadError::Rows(errors));
    }
    for e in &errors {
        tracing::warn!("skipping {e}");
    }
    let corpus = Corpus::new(dialogues, Provenance::default())
        .expect("ids deduplicated while loading");
    Ok(LoadReport {
        corpus,
        row_errors: errors,
    })
}

fn parse_row(
    rec: &csv::StringRecord,
    id_col: usize,
    text_col: usize,
    label_col: Option<usize>,
    values: &BTreeMap<String, Label>,
) -> Result<Dialogue, RowErrorKind> {
    let field = |c: usize| rec.get(c).unwrap_or("");
    let id = field(id_col).trim();
    if id.is_empty() {
        return Err(RowErrorKind::EmptyId);
    }
    let label = match label_col.map(|c| field(c).trim()) {
        None | Some("") => None,
        Some(raw) => Some(
            *values
                .get(raw)
                .ok_or_else(|| RowErrorKind::Label(raw.to_string()))?,
        ),
    };
    Ok(parse_dialogue(field(text_col), id, label)?)
}

/// Draws `floor(fraction * N)` dialogues uniformly without replacement.
///
/// The result is ordered ascending by id and records seed and fraction in its
/// provenance.
pub fn sample_subset(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus, CorpusError> {
    check_fraction(fraction)?;
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let sorted = corpus.sorted_by_id();
    let k = sample_size(sorted.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Dialogue> = choose_k(&mut rng, &sorted, k).into_iter().cloned().collect();
    picked.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(sampled(corpus, picked, fraction, seed, None))
}

/// Like [`sample_subset`] but samples each gold-label class (unlabeled
/// dialogues form their own class) separately so class proportions are kept.
///
/// Per-class quotas are `floor(fraction * n_class)`; leftover slots up to
/// `floor(fraction * N)` go to the classes with the largest remainders.
pub fn sample_subset_stratified(
    corpus: &Corpus,
    fraction: f64,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    check_fraction(fraction)?;
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut groups: BTreeMap<Option<Label>, Vec<&Dialogue>> = BTreeMap::new();
    for d in corpus.sorted_by_id() {
        groups.entry(d.gold_label).or_default().push(d);
    }
    let total = sample_size(corpus.len(), fraction);
    let mut quotas: Vec<(usize, f64)> = groups
        .values()
        .map(|g| {
            let exact = fraction * g.len() as f64;
            let q = (exact.floor() as usize).min(g.len());
            (q, exact - q as f64)
        })
        .collect();
    let mut remaining = total.saturating_sub(quotas.iter().map(|q| q.0).sum());
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for i in order {
        if remaining == 0 {
            break;
        }
        let cap = groups.values().nth(i).map_or(0, Vec::len);
        if quotas[i].0 < cap {
            quotas[i].0 += 1;
            remaining -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Dialogue> = groups
        .values()
        .zip(&quotas)
        .flat_map(|(g, (q, _))| choose_k(&mut rng, g, *q))
        .cloned()
        .collect();
    picked.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(sampled(corpus, picked, fraction, seed, Some("stratified")))
}

fn check_fraction(fraction: f64) -> Result<(), CorpusError> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(CorpusError::InvalidFraction(fraction))
    }
}

/// `floor(fraction * n)`, snapping products within 1e-9 of an integer to that
/// integer (`0.29 * 100` is `28.999999999999996` in binary floating point).
pub fn sample_size(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.floor() as usize
    }
}

/// Partial Fisher-Yates: the first `k` slots of a shuffled index vector.
fn choose_k<'a, T>(rng: &mut ChaCha8Rng, items: &[&'a T], k: usize) -> Vec<&'a T> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| items[i]).collect()
}

fn sampled(
    from: &Corpus,
    dialogues: Vec<Dialogue>,
    fraction: f64,
    seed: u64,
    filter: Option<&str>,
) -> Corpus {
    Corpus {
        dialogues,
        provenance: Provenance {
            source: from.provenance.source.clone(),
            filter: filter.map(str::to_string).or_else(|| from.provenance.filter.clone()),
            sample_seed: Some(seed),
            sample_fraction: Some(fraction),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub dialogue: Dialogue,
    pub answer: Answer,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BankError {
    #[error("few-shot bank must hold exactly 3 exemplars, got {0}")]
    Size(usize),
    #[error("few-shot bank must be ordered Yes, No, No; got {0:?}")]
    Order(Vec<Answer>),
    #[error("exemplar {0:?} also appears in the evaluation subset")]
    Overlap(String),
}

/// Three exemplars ordered Yes, No, No.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotBank {
    exemplars: Vec<Exemplar>,
}

impl FewShotBank {
    pub fn new(exemplars: Vec<Exemplar>) -> Result<Self, BankError> {
        let bank = Self { exemplars };
        bank.check_composition()?;
        Ok(bank)
    }

    /// Builds a bank without checking composition. Rendering re-validates.
    pub fn new_unchecked(exemplars: Vec<Exemplar>) -> Self {
        Self { exemplars }
    }

    pub fn check_composition(&self) -> Result<(), BankError> {
        if self.exemplars.len() != 3 {
            return Err(BankError::Size(self.exemplars.len()));
        }
        let answers: Vec<Answer> = self.exemplars.iter().map(|e| e.answer).collect();
        if answers != [Answer::Yes, Answer::No, Answer::No] {
            return Err(BankError::Order(answers));
        }
        Ok(())
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn ids(&self) -> Vec<&str> {
        self.exemplars.iter().map(|e| e.dialogue.id.as_str()).collect()
    }

    pub fn check_disjoint(&self, eval: &Corpus) -> Result<(), BankError> {
        let eval_ids: HashSet<&str> = eval.ids().into_iter().collect();
        match self.ids().into_iter().find(|id| eval_ids.contains(id)) {
            Some(id) => Err(BankError::Overlap(id.to_string())),
            None => Ok(()),
        }
    }
}

/// Seeded draw of one manipulative and two non-manipulative exemplars.
pub fn select_few_shot(pool: &Corpus, seed: u64) -> Result<FewShotBank, CorpusError> {
    let by_label = |label| -> Vec<&Dialogue> {
        pool.sorted_by_id()
            .into_iter()
            .filter(|d| d.gold_label == Some(label))
            .collect()
    };
    let manip = by_label(Label::Manipulative);
    let non = by_label(Label::NonManipulative);
    if manip.is_empty() || non.len() < 2 {
        return Err(CorpusError::InsufficientPool {
            manipulative: manip.len(),
            non_manipulative: non.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yes = choose_k(&mut rng, &manip, 1);
    let nos = choose_k(&mut rng, &non, 2);
    let exemplars = yes
        .into_iter()
        .map(|d| (d, Answer::Yes))
        .chain(nos.into_iter().map(|d| (d, Answer::No)))
        .map(|(d, answer)| Exemplar {
            dialogue: d.clone(),
            answer,
        })
        .collect();
    Ok(FewShotBank::new(exemplars).expect("composition fixed by construction"))
}

/// Class counts (manipulative, non-manipulative, unlabeled).
pub fn class_counts(corpus: &Corpus) -> (usize, usize, usize) {
    let mut counts: HashMap<Option<Label>, usize> = HashMap::new();
    for d in corpus.dialogues() {
        *counts.entry(d.gold_label).or_default() += 1;
    }
    (
        counts.get(&Some(Label::Manipulative)).copied().unwrap_or(0),
        counts.get(&Some(Label::NonManipulative)).copied().unwrap_or(0),
        counts.get(&None).copied().unwrap_or(0),
    )
}
