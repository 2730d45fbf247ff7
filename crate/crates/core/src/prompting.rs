//! Prompt templates and rendering.
//!
//! Template bodies are stored as text assets under `templates/` and embedded
//! at build time; [`TemplateSet::from_dir`] loads an alternative set from
//! disk. Slots use the `<insert …>` marker syntax. Every template must carry
//! exactly the slots its strategy needs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BankError, Dialogue, FewShotBank, Speaker};

pub const SLOT_DIALOGUE: &str = "<insert dialogue>";
pub const SLOT_PERSON: &str = "<insert person>";
pub const SLOT_INTENT_1: &str = "<insert person1's intent>";
pub const SLOT_INTENT_2: &str = "<insert person2's intent>";

/// Few-shot exemplar slots, in bank order (dialogue, answer) x 3.
pub const FEW_SHOT_SLOTS: [(&str, &str); 3] = [
    ("<insert manipulative_dialogue1>", "<insert manipulative_answer1>"),
    ("<insert nonmanipulative_dialogue1>", "<insert nonmanipulative_answer1>"),
    ("<insert nonmanipulative_dialogue2>", "<insert nonmanipulative_answer2>"),
];

const MARKER_OPEN: &str = "<insert";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateKind {
    ZeroShot,
    FewShot,
    ZeroShotCoT,
    IntentSummarization,
    IapDetection,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::ZeroShot,
        TemplateKind::FewShot,
        TemplateKind::ZeroShotCoT,
        TemplateKind::IntentSummarization,
        TemplateKind::IapDetection,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::ZeroShot => "zero_shot.txt",
            TemplateKind::FewShot => "few_shot.txt",
            TemplateKind::ZeroShotCoT => "zero_shot_cot.txt",
            TemplateKind::IntentSummarization => "intent_summarization.txt",
            TemplateKind::IapDetection => "iap_detection.txt",
        }
    }

    pub fn required_slots(self) -> BTreeSet<&'static str> {
        match self {
            TemplateKind::ZeroShot | TemplateKind::ZeroShotCoT => [SLOT_DIALOGUE].into(),
            TemplateKind::FewShot => FEW_SHOT_SLOTS
                .iter()
                .flat_map(|(d, a)| [*d, *a])
                .chain([SLOT_DIALOGUE])
                .collect(),
            TemplateKind::IntentSummarization => [SLOT_PERSON, SLOT_DIALOGUE].into(),
            TemplateKind::IapDetection => [SLOT_DIALOGUE, SLOT_INTENT_1, SLOT_INTENT_2].into(),
        }
    }

    fn embedded(self) -> &'static str {
        match self {
            TemplateKind::ZeroShot => include_str!("../templates/zero_shot.txt"),
            TemplateKind::FewShot => include_str!("../templates/few_shot.txt"),
            TemplateKind::ZeroShotCoT => include_str!("../templates/zero_shot_cot.txt"),
            TemplateKind::IntentSummarization => {
                include_str!("../templates/intent_summarization.txt")
            }
            TemplateKind::IapDetection => include_str!("../templates/iap_detection.txt"),
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::ZeroShot => "zero-shot",
            TemplateKind::FewShot => "few-shot",
            TemplateKind::ZeroShotCoT => "cot",
            TemplateKind::IntentSummarization => "intent-summarization",
            TemplateKind::IapDetection => "iap",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {kind}: missing slot {slot}")]
    MissingSlot { kind: TemplateKind, slot: String },
    #[error("template {kind}: unexpected slot {slot}")]
    UnexpectedSlot { kind: TemplateKind, slot: String },
    #[error("template {kind}: slot {slot} appears more than once")]
    RepeatedSlot { kind: TemplateKind, slot: String },
    #[error("template {kind}: unterminated `<insert` marker")]
    Unterminated { kind: TemplateKind },
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
    #[error("few-shot bank: {0}")]
    BankComposition(#[from] BankError),
    #[error("intent for {0} is blank")]
    EmptyIntent(Speaker),
    #[error("substituted text for {slot} contains an `<insert` marker")]
    MarkerInValue { slot: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
}

impl PromptTemplate {
    /// Normalizes line endings to LF, strips trailing spaces on each line and
    /// the final newline, then checks the slot set.
    pub fn new(kind: TemplateKind, raw: &str) -> Result<Self, PromptError> {
        let body = raw
            .replace("\r\n", "\n")
            .split('\n')
            .map(str::trim_end)
            .collect::<Vec<_>>()
            .join("\n")
            .trim_end_matches('\n')
            .to_string();
        let found = slots_in(&body).ok_or(PromptError::Unterminated { kind })?;
        let required = kind.required_slots();
        let mut seen = BTreeSet::new();
        for slot in &found {
            if !required.contains(slot.as_str()) {
                return Err(PromptError::UnexpectedSlot {
                    kind,
                    slot: slot.clone(),
                });
            }
            if !seen.insert(slot.as_str()) {
                return Err(PromptError::RepeatedSlot {
                    kind,
                    slot: slot.clone(),
                });
            }
        }
        if let Some(missing) = required.iter().find(|s| !seen.contains(*s)) {
            return Err(PromptError::MissingSlot {
                kind,
                slot: missing.to_string(),
            });
        }
        Ok(Self { kind, body })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Body with every slot marker removed.
    pub fn excised(&self) -> String {
        let mut out = self.body.clone();
        for slot in self.kind.required_slots() {
            out = out.replace(slot, "");
        }
        out
    }

    /// Substitutes every slot in a single left-to-right pass.
    fn fill(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find(MARKER_OPEN) {
            let end = start + rest[start..].find('>').expect("validated") + 1;
            let slot = &rest[start..end];
            let value = values
                .iter()
                .find(|(k, _)| *k == slot)
                .map(|(_, v)| *v)
                .expect("validated slot set");
            out.push_str(&rest[..start]);
            out.push_str(value);
            rest = &rest[end..];
        }
        out.push_str(rest);
        out
    }
}

fn slots_in(body: &str) -> Option<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find(MARKER_OPEN) {
        let end = start + rest[start..].find('>')? + 1;
        out.push(rest[start..end].to_string());
        rest = &rest[end..];
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: TemplateKind,
    pub dialogue_id: String,
    pub text: String,
}

/// The five templates used by the harness.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::embedded()
    }
}

impl TemplateSet {
    pub fn embedded() -> Self {
        let templates = TemplateKind::ALL
            .iter()
            .map(|&k| PromptTemplate::new(k, k.embedded()).expect("embedded template is valid"))
            .collect();
        Self { templates }
    }

    /// Loads `<dir>/<kind file name>` for every template kind.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let templates = TemplateKind::ALL
            .iter()
            .map(|&k| {
                let path = dir.join(k.file_name());
                let raw = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                PromptTemplate::new(k, &raw)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { templates })
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.kind == kind)
            .expect("all kinds present")
    }

    fn render(
        &self,
        kind: TemplateKind,
        d: &Dialogue,
        values: &[(&str, &str)],
    ) -> Result<RenderedPrompt, PromptError> {
        if let Some((slot, _)) = values.iter().find(|(_, v)| v.contains(MARKER_OPEN)) {
            return Err(PromptError::MarkerInValue {
                slot: slot.to_string(),
            });
        }
        let text = self.get(kind).fill(values);
        Ok(RenderedPrompt {
            kind,
            dialogue_id: d.id.clone(),
            text,
        })
    }

    pub fn render_zero_shot(&self, d: &Dialogue) -> Result<RenderedPrompt, PromptError> {
        let text = d.to_text();
        self.render(TemplateKind::ZeroShot, d, &[(SLOT_DIALOGUE, &text)])
    }

    pub fn render_cot(&self, d: &Dialogue) -> Result<RenderedPrompt, PromptError> {
        let text = d.to_text();
        self.render(TemplateKind::ZeroShotCoT, d, &[(SLOT_DIALOGUE, &text)])
    }

    /// Few-shot prompt with the bank's exemplars in Yes, No, No order.
    ///
    /// A target that is also an exemplar renders but logs a warning.
    pub fn render_few_shot(
        &self,
        d: &Dialogue,
        bank: &FewShotBank,
    ) -> Result<RenderedPrompt, PromptError> {
        bank.check_composition()?;
        if bank.ids().contains(&d.id.as_str()) {
            tracing::warn!(dialogue = %d.id, "DisjointnessWarning: target dialogue is also a few-shot exemplar");
        }
        let texts: Vec<String> = bank.exemplars().iter().map(|e| e.dialogue.to_text()).collect();
        let mut values: Vec<(&str, &str)> = FEW_SHOT_SLOTS
            .iter()
            .zip(bank.exemplars().iter().zip(&texts))
            .flat_map(|((ds, as_), (ex, text))| [(*ds, text.as_str()), (*as_, ex.answer.as_str())])
            .collect();
        let target = d.to_text();
        values.push((SLOT_DIALOGUE, &target));
        self.render(TemplateKind::FewShot, d, &values)
    }

    /// Intent summarization prompt for one speaker. The whole dialogue is
    /// always included.
    pub fn render_intent_summarization(
        &self,
        d: &Dialogue,
        person: Speaker,
    ) -> Result<RenderedPrompt, PromptError> {
        let text = d.to_text();
        self.render(
            TemplateKind::IntentSummarization,
            d,
            &[(SLOT_PERSON, person.as_str()), (SLOT_DIALOGUE, &text)],
        )
    }

    pub fn render_iap_detection(
        &self,
        d: &Dialogue,
        intent_person1: &str,
        intent_person2: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        if intent_person1.trim().is_empty() {
            return Err(PromptError::EmptyIntent(Speaker::Person1));
        }
        if intent_person2.trim().is_empty() {
            return Err(PromptError::EmptyIntent(Speaker::Person2));
        }
        let text = d.to_text();
        self.render(
            TemplateKind::IapDetection,
            d,
            &[
                (SLOT_DIALOGUE, &text),
                (SLOT_INTENT_1, intent_person1),
                (SLOT_INTENT_2, intent_person2),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_dialogue, Answer, Exemplar, Label};

    const EXAMPLE_1: &str = "Person1: You have no right to do this.\nPerson2: Well if I don't who will?\nPerson1: They're happy like this.\nPerson2: David, nobody's happy in a Poodle skirt and a sweater set. You like all this don't you?";

    fn ex1() -> Dialogue {
        parse_dialogue(EXAMPLE_1, "ex1", Some(Label::Manipulative)).unwrap()
    }

    fn bank() -> FewShotBank {
        let mk = |id: &str, text: &str, answer| Exemplar {
            dialogue: parse_dialogue(text, id, None).unwrap(),
            answer,
        };
        FewShotBank::new(vec![
            mk("m1", "Person1: Do it or else.", Answer::Yes),
            mk("n1", "Person1: Nice weather.", Answer::No),
            mk("n2", "Person2: See you later.", Answer::No),
        ])
        .unwrap()
    }

    #[test]
    fn zero_shot_instruction_prefix() {
        let p = TemplateSet::embedded().render_zero_shot(&ex1()).unwrap();
        assert!(p.text.starts_with(
            "I will provide you with a dialogue. Please determine if it contains elements of mental manipulation."
        ));
        assert!(p.text.ends_with(EXAMPLE_1));
        assert_eq!(p.dialogue_id, "ex1");
    }

    #[test]
    fn zero_shot_single_turn() {
        let d = parse_dialogue("Person1: Hi.", "s", None).unwrap();
        let p = TemplateSet::embedded().render_zero_shot(&d).unwrap();
        assert_eq!(
            p.text,
            "I will provide you with a dialogue. Please determine if it contains elements of mental manipulation. Just answer with 'Yes' or 'No', and don't add anything else.\n\nPerson1: Hi."
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = TemplateSet::embedded();
        assert_eq!(t.render_zero_shot(&ex1()), t.render_zero_shot(&ex1()));
    }

    #[test]
    fn few_shot_has_three_ordered_examples() {
        let p = TemplateSet::embedded().render_few_shot(&ex1(), &bank()).unwrap();
        let positions: Vec<usize> = (1..=3)
            .map(|k| p.text.find(&format!("Example {k}:")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p.text.matches("Example ").count(), 3);
        assert!(p.text.contains("Example 1:\nPerson1: Do it or else.\nYes\n\nExample 2:"));
        assert!(p.text.contains("Example 3:\nPerson2: See you later.\nNo\n\n"));
        assert!(!p.text.contains(MARKER_OPEN));
    }

    #[test]
    fn few_shot_rejects_misordered_bank() {
        let mut ex = bank().exemplars().to_vec();
        ex.swap(0, 1);
        let bad = FewShotBank::new_unchecked(ex);
        assert!(matches!(
            TemplateSet::embedded().render_few_shot(&ex1(), &bad),
            Err(PromptError::BankComposition(BankError::Order(_)))
        ));
    }

    #[test]
    fn few_shot_overlap_still_renders() {
        let b = bank();
        let target = b.exemplars()[1].dialogue.clone();
        assert!(TemplateSet::embedded().render_few_shot(&target, &b).is_ok());
    }

    #[test]
    fn cot_differs_by_one_sentence() {
        let t = TemplateSet::embedded();
        let zs = t.render_zero_shot(&ex1()).unwrap().text;
        let cot = t.render_cot(&ex1()).unwrap().text;
        assert!(cot.contains("Let's think step by step.\n\n"));
        assert!(!cot.contains(MARKER_OPEN));
        // Longest common prefix and suffix leave exactly the inserted sentence.
        let prefix = zs.bytes().zip(cot.bytes()).take_while(|(a, b)| a == b).count();
        let suffix = zs
            .bytes()
            .rev()
            .zip(cot.bytes().rev())
            .take_while(|(a, b)| a == b)
            .count()
            .min(zs.len() - prefix);
        assert_eq!(&cot[prefix..cot.len() - suffix], " Let's think step by step.");
        assert_eq!(prefix + suffix, zs.len());
    }

    #[test]
    fn intent_prompts_differ_only_in_person() {
        let t = TemplateSet::embedded();
        let p1 = t.render_intent_summarization(&ex1(), Speaker::Person1).unwrap().text;
        let p2 = t.render_intent_summarization(&ex1(), Speaker::Person2).unwrap().text;
        assert!(p2.contains("the statement made by Person2 in one sentence"));
        assert_eq!(p1.replace("made by Person1", "made by Person2"), p2);
        assert!(p1.contains(EXAMPLE_1) && p2.contains(EXAMPLE_1));
    }

    #[test]
    fn iap_slot_order_and_blank_intent() {
        let t = TemplateSet::embedded();
        let p = t.render_iap_detection(&ex1(), "a", "b").unwrap().text;
        assert!(p.ends_with(&format!("{EXAMPLE_1}\na\nb")));
        assert_eq!(
            t.render_iap_detection(&ex1(), "a", "  "),
            Err(PromptError::EmptyIntent(Speaker::Person2))
        );
    }

    #[test]
    fn marker_text_in_dialogue_is_rejected() {
        let d = parse_dialogue("Person1: say <insert dialogue> now", "x", None).unwrap();
        assert_eq!(
            TemplateSet::embedded().render_zero_shot(&d),
            Err(PromptError::MarkerInValue {
                slot: SLOT_DIALOGUE.into()
            })
        );
    }

    #[test]
    fn template_slot_validation() {
        assert!(matches!(
            PromptTemplate::new(TemplateKind::ZeroShot, "no slots here"),
            Err(PromptError::MissingSlot { .. })
        ));
        assert!(matches!(
            PromptTemplate::new(TemplateKind::ZeroShot, "<insert dialogue> <insert person>"),
            Err(PromptError::UnexpectedSlot { .. })
        ));
        assert!(matches!(
            PromptTemplate::new(TemplateKind::ZeroShot, "<insert dialogue><insert dialogue>"),
            Err(PromptError::RepeatedSlot { .. })
        ));
        assert!(matches!(
            PromptTemplate::new(TemplateKind::ZeroShot, "<insert dialogue> <insert"),
            Err(PromptError::Unterminated { .. })
        ));
        let t = PromptTemplate::new(TemplateKind::ZeroShot, "A  \r\n\r\n<insert dialogue>\n").unwrap();
        assert_eq!(t.body(), "A\n\n<insert dialogue>");
    }
}
