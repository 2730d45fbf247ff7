//! Strategy execution: render prompts, call the gateway, parse verdicts.
//!
//! Intent-aware prompting makes three calls per dialogue: an intent summary
//! for Person1, one for Person2 (each given the whole dialogue), and a
//! detection call that sees the dialogue plus both intents.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Dialogue, FewShotBank, Speaker};
use crate::gateway::{CompletionRequest, Gateway, GatewayError, DEFAULT_MODEL};
use crate::prompting::{PromptError, RenderedPrompt, TemplateSet};

/// Appended to a prompt whose answer could not be parsed.
pub const VERDICT_RETRY_SENTENCE: &str = "Answer only 'Yes' or 'No'.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "few-shot")]
    FewShot,
    #[serde(rename = "cot")]
    Cot,
    #[serde(rename = "iap")]
    Iap,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::ZeroShot, Strategy::FewShot, Strategy::Cot, Strategy::Iap];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero-shot",
            Strategy::FewShot => "few-shot",
            Strategy::Cot => "cot",
            Strategy::Iap => "iap",
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "Zero-Shot",
            Strategy::FewShot => "Few-Shot",
            Strategy::Cot => "Zero-Shot CoT",
            Strategy::Iap => "Intent-Aware",
        }
    }

    pub fn default_verdict_mode(self) -> VerdictMode {
        match self {
            Strategy::Cot => VerdictMode::Lenient,
            _ => VerdictMode::Strict,
        }
    }

    /// LLM calls per dialogue when nothing is retried.
    pub fn calls_per_dialogue(self) -> usize {
        match self {
            Strategy::Iap => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zero-shot" | "zeroshot" | "zero_shot" => Ok(Strategy::ZeroShot),
            "few-shot" | "fewshot" | "few_shot" => Ok(Strategy::FewShot),
            "cot" | "zero-shot-cot" => Ok(Strategy::Cot),
            "iap" | "intent-aware" => Ok(Strategy::Iap),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictMode {
    Strict,
    Lenient,
}

impl FromStr for VerdictMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(VerdictMode::Strict),
            "lenient" => Ok(VerdictMode::Lenient),
            other => Err(format!("unknown verdict mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no Yes/No verdict found")]
pub struct ParseFailure;

const TERMINAL_PUNCTUATION: &[char] = &['.', '!', '?', ',', ';', ':'];

/// Maps model output to 1 (manipulative) or 0.
///
/// Strict: after trimming whitespace and trailing punctuation the text must
/// be `yes` or `no`, ignoring case. Lenient: the last standalone `yes`/`no`
/// word decides.
pub fn parse_verdict(text: &str, mode: VerdictMode) -> Result<u8, ParseFailure> {
    let word = match mode {
        VerdictMode::Strict => text
            .trim()
            .trim_end_matches(|c: char| TERMINAL_PUNCTUATION.contains(&c) || c.is_whitespace())
            .to_string(),
        VerdictMode::Lenient => text
            .split(|c: char| !c.is_alphanumeric())
            .rev()
            .find(|w| w.eq_ignore_ascii_case("yes") || w.eq_ignore_ascii_case("no"))
            .unwrap_or("")
            .to_string(),
    };
    if word.eq_ignore_ascii_case("yes") {
        Ok(1)
    } else if word.eq_ignore_ascii_case("no") {
        Ok(0)
    } else {
        Err(ParseFailure)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentPair {
    pub dialogue_id: String,
    /// Person1's intent.
    pub intent_a: String,
    /// Person2's intent.
    pub intent_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub strategy: Strategy,
    pub r: u8,
    pub raw_text: String,
    pub valid: bool,
    pub n_llm_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intents: Option<IntentPair>,
    /// Set when the dialogue could not be processed; such predictions carry
    /// no verdict and are left out of scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Prediction {
    pub fn is_errored(&self) -> bool {
        self.error.is_some()
    }

    fn errored(d: &Dialogue, strategy: Strategy, err: &PipelineError) -> Self {
        Self {
            dialogue_id: d.id.clone(),
            strategy,
            r: 0,
            raw_text: String::new(),
            valid: false,
            n_llm_calls: 0,
            intents: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend returned a blank intent for {0} twice")]
    EmptyIntent(Speaker),
    #[error("{0}")]
    Precondition(String),
    #[error("{errored} of {total} dialogues errored, above the {threshold} threshold")]
    ErrorThreshold {
        errored: usize,
        total: usize,
        threshold: f64,
    },
    #[error("run log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Per-strategy verdict mode overrides.
    pub verdict_overrides: Vec<(Strategy, VerdictMode)>,
    /// A run fails once errored / total exceeds this fraction.
    pub error_threshold: f64,
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: DEFAULT_MODEL.into(),
            temperature: 0.0,
            max_tokens: None,
            verdict_overrides: Vec::new(),
            error_threshold: 0.05,
            concurrency: 4,
        }
    }
}

impl PipelineConfig {
    pub fn verdict_mode(&self, s: Strategy) -> VerdictMode {
        self.verdict_overrides
            .iter()
            .rev()
            .find(|(k, _)| *k == s)
            .map_or(s.default_verdict_mode(), |(_, m)| *m)
    }
}

#[derive(Debug, Serialize)]
struct Timings {
    total_ms: u64,
}

#[derive(Debug, Serialize)]
struct RunLogRecord<'a> {
    dialogue_id: &'a str,
    strategy: Strategy,
    r: u8,
    valid: bool,
    raw_text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    intents: Option<&'a IntentPair>,
    n_llm_calls: usize,
    timings: Timings,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// JSON-lines run log with one serialized writer.
pub struct RunLog {
    out: Mutex<BufWriter<File>>,
}

impl RunLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            out: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }

    fn record(&self, p: &Prediction, total_ms: u64) -> std::io::Result<()> {
        let rec = RunLogRecord {
            dialogue_id: &p.dialogue_id,
            strategy: p.strategy,
            r: p.r,
            valid: p.valid,
            raw_text: &p.raw_text,
            intents: p.intents.as_ref(),
            n_llm_calls: p.n_llm_calls,
            timings: Timings { total_ms },
            error: p.error.as_deref(),
        };
        let mut out = self.out.lock().unwrap();
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub strategy: Strategy,
    /// Ascending by dialogue id.
    pub predictions: Vec<Prediction>,
}

impl RunOutcome {
    pub fn errored(&self) -> usize {
        self.predictions.iter().filter(|p| p.is_errored()).count()
    }

    /// Unparseable verdicts that defaulted to 0.
    pub fn invalid(&self) -> usize {
        self.predictions
            .iter()
            .filter(|p| !p.valid && !p.is_errored())
            .count()
    }

    pub fn total_llm_calls(&self) -> usize {
        self.predictions.iter().map(|p| p.n_llm_calls).sum()
    }
}

pub struct Pipeline {
    gateway: Arc<Gateway>,
    templates: TemplateSet,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(gateway: Arc<Gateway>, templates: TemplateSet, config: PipelineConfig) -> Self {
        Self {
            gateway,
            templates,
            config,
        }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn request(&self, prompt: &str) -> CompletionRequest {
        let mut req = CompletionRequest::user(self.config.model.clone(), prompt);
        req.temperature = self.config.temperature;
        req.max_tokens = self.config.max_tokens;
        req
    }

    fn summarize_one(&self, d: &Dialogue, person: Speaker) -> Result<(String, usize), PipelineError> {
        let prompt = self.templates.render_intent_summarization(d, person)?;
        let req = self.request(&prompt.text);
        let mut text = self.gateway.complete(&req)?.text;
        let mut calls = 1;
        if text.trim().is_empty() {
            text = self.gateway.complete(&req)?.text;
            calls += 1;
        }
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(PipelineError::EmptyIntent(person));
        }
        if sentence_count(&text) > 1 {
            tracing::warn!(dialogue = %d.id, %person, "intent summary has more than one sentence");
        }
        Ok((text, calls))
    }

    /// Person1 then Person2 intent summaries, each from the full dialogue.
    pub fn summarize_intents(&self, d: &Dialogue) -> Result<IntentPair, PipelineError> {
        self.summarize_counted(d).map(|(pair, _)| pair)
    }

    fn summarize_counted(&self, d: &Dialogue) -> Result<(IntentPair, usize), PipelineError> {
        let (intent_a, ca) = self.summarize_one(d, Speaker::Person1)?;
        let (intent_b, cb) = self.summarize_one(d, Speaker::Person2)?;
        Ok((
            IntentPair {
                dialogue_id: d.id.clone(),
                intent_a,
                intent_b,
            },
            ca + cb,
        ))
    }

    /// Calls the gateway with `prompt`, retrying once with
    /// [`VERDICT_RETRY_SENTENCE`] appended if no verdict can be parsed.
    /// Unparseable output after the retry yields `r = 0`, `valid = false`.
    fn verdict(
        &self,
        strategy: Strategy,
        d: &Dialogue,
        prompt: &RenderedPrompt,
    ) -> Result<Prediction, PipelineError> {
        let mode = self.config.verdict_mode(strategy);
        let mut raw = self.gateway.complete(&self.request(&prompt.text))?.text;
        let mut calls = 1;
        let mut parsed = parse_verdict(&raw, mode);
        if parsed.is_err() {
            let retry = format!("{}\n\n{VERDICT_RETRY_SENTENCE}", prompt.text);
            raw = self.gateway.complete(&self.request(&retry))?.text;
            calls += 1;
            parsed = parse_verdict(&raw, mode);
        }
        Ok(Prediction {
            dialogue_id: d.id.clone(),
            strategy,
            r: *parsed.as_ref().unwrap_or(&0),
            raw_text: raw,
            valid: parsed.is_ok(),
            n_llm_calls: calls,
            intents: None,
            error: None,
        })
    }

    /// Runs one strategy on one dialogue. `bank` must be given for few-shot
    /// and only for few-shot.
    pub fn detect(
        &self,
        strategy: Strategy,
        d: &Dialogue,
        bank: Option<&FewShotBank>,
    ) -> Result<Prediction, PipelineError> {
        match (strategy, bank) {
            (Strategy::FewShot, None) => {
                return Err(PipelineError::Precondition(
                    "few-shot detection needs a few-shot bank".into(),
                ))
            }
            (Strategy::FewShot, Some(_)) => {}
            (_, Some(_)) => {
                return Err(PipelineError::Precondition(format!(
                    "{strategy} detection does not take a few-shot bank"
                )))
            }
            _ => {}
        }
        let prompt = match strategy {
            Strategy::ZeroShot => self.templates.render_zero_shot(d)?,
            Strategy::FewShot => self.templates.render_few_shot(d, bank.expect("checked"))?,
            Strategy::Cot => self.templates.render_cot(d)?,
            Strategy::Iap => return self.detect_iap(d),
        };
        self.verdict(strategy, d, &prompt)
    }

    /// Intent-aware detection: two intent summaries, then the detection call.
    pub fn detect_iap(&self, d: &Dialogue) -> Result<Prediction, PipelineError> {
        let (intents, intent_calls) = self.summarize_counted(d)?;
        let prompt = self
            .templates
            .render_iap_detection(d, &intents.intent_a, &intents.intent_b)?;
        let mut p = self.verdict(Strategy::Iap, d, &prompt)?;
        p.n_llm_calls += intent_calls;
        p.intents = Some(intents);
        Ok(p)
    }

    /// Runs `strategy` over every dialogue of `corpus`.
    ///
    /// Dialogues run concurrently up to the configured bound. A dialogue
    /// whose calls fail is recorded as errored; the run fails once the
    /// errored fraction exceeds the configured threshold.
    pub fn run_strategy(
        &self,
        strategy: Strategy,
        corpus: &Corpus,
        bank: Option<&FewShotBank>,
        log: Option<&RunLog>,
    ) -> Result<RunOutcome, PipelineError> {
        if strategy == Strategy::FewShot && bank.is_none() {
            return Err(PipelineError::Precondition(
                "few-shot run needs a few-shot bank".into(),
            ));
        }
        let bank = bank.filter(|_| strategy == Strategy::FewShot);
        if let Some(b) = bank {
            if let Err(e) = b.check_disjoint(corpus) {
                tracing::warn!("DisjointnessWarning: {e}");
            }
        }
        let dialogues = corpus.dialogues();
        let total = dialogues.len();
        let threshold = self.config.error_threshold;
        let exceeded = |errored: usize| total > 0 && errored as f64 / total as f64 > threshold;

        let next = AtomicUsize::new(0);
        let errored = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let log_error: Mutex<Option<std::io::Error>> = Mutex::new(None);
        let results: Mutex<Vec<Prediction>> = Mutex::new(Vec::with_capacity(total));
        let workers = self.config.concurrency.max(1).min(total.max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(d) = dialogues.get(i) else { break };
                    let started = Instant::now();
                    let p = self.detect(strategy, d, bank).unwrap_or_else(|e| {
                        tracing::warn!(dialogue = %d.id, "{strategy} failed: {e}");
                        Prediction::errored(d, strategy, &e)
                    });
                    if p.is_errored() && exceeded(errored.fetch_add(1, Ordering::SeqCst) + 1) {
                        abort.store(true, Ordering::SeqCst);
                    }
                    if let Some(log) = log {
                        if let Err(e) = log.record(&p, started.elapsed().as_millis() as u64) {
                            log_error.lock().unwrap().get_or_insert(e);
                        }
                    }
                    results.lock().unwrap().push(p);
                });
            }
        });

        if let Some(e) = log_error.into_inner().unwrap() {
            return Err(e.into());
        }
        let errored = errored.into_inner();
        if exceeded(errored) {
            return Err(PipelineError::ErrorThreshold {
                errored,
                total,
                threshold,
            });
        }
        let mut predictions = results.into_inner().unwrap();
        predictions.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
        Ok(RunOutcome {
            strategy,
            predictions,
        })
    }
}

fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    chars
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            matches!(c, '.' | '!' | '?')
                && chars.get(i + 1).is_none_or(|n| n.is_whitespace())
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_dialogue, Label, Provenance};
    use crate::gateway::{mock_backend, CacheStore, Matcher, MockBackend, MockReply, MockRule, MockScript, RetryPolicy};
    use proptest::prelude::{proptest, prop_assert_eq};

    fn setup(script: MockScript) -> (Arc<MockBackend>, Pipeline) {
        let mock = Arc::new(mock_backend(script).unwrap());
        let gw = Gateway::new(mock.clone(), CacheStore::in_memory())
            .with_retry(RetryPolicy::no_delay(3));
        let p = Pipeline::new(Arc::new(gw), TemplateSet::embedded(), PipelineConfig::default());
        (mock, p)
    }

    fn reply(text: &str) -> MockScript {
        MockScript {
            default: Some(text.into()),
            ..Default::default()
        }
    }

    fn dlg(id: &str) -> Dialogue {
        parse_dialogue(&format!("Person1: hello {id}\nPerson2: bye {id}"), id, Some(Label::Manipulative))
            .unwrap()
    }

    fn corpus(n: usize) -> Corpus {
        Corpus::new((0..n).map(|i| dlg(&format!("c{i:03}"))).collect(), Provenance::default())
            .unwrap()
    }

    #[test]
    fn strict_parsing() {
        assert_eq!(parse_verdict("Yes", VerdictMode::Strict), Ok(1));
        assert_eq!(parse_verdict("no.", VerdictMode::Strict), Ok(0));
        assert_eq!(parse_verdict("  YES!\n", VerdictMode::Strict), Ok(1));
        assert_eq!(parse_verdict("Yes, it does.", VerdictMode::Strict), Err(ParseFailure));
        assert_eq!(parse_verdict("I cannot determine.", VerdictMode::Strict), Err(ParseFailure));
    }

    #[test]
    fn lenient_uses_last_token() {
        assert_eq!(
            parse_verdict("…manipulative tactics are present. Answer: Yes", VerdictMode::Lenient),
            Ok(1)
        );
        assert_eq!(
            parse_verdict("Yes at first glance, but no.", VerdictMode::Lenient),
            Ok(0)
        );
        assert_eq!(parse_verdict("nobody knows", VerdictMode::Lenient), Err(ParseFailure));
        assert_eq!(parse_verdict("I cannot determine.", VerdictMode::Lenient), Err(ParseFailure));
    }

    proptest! {
        #[test]
        fn parse_is_case_invariant(s in "[ a-zA-Z.,!?]{0,40}") {
            for mode in [VerdictMode::Strict, VerdictMode::Lenient] {
                prop_assert_eq!(parse_verdict(&s, mode), parse_verdict(&s.to_uppercase(), mode));
                prop_assert_eq!(parse_verdict(&s, mode), parse_verdict(&s.to_lowercase(), mode));
                if let Ok(r) = parse_verdict(&s, mode) {
                    let normalized = if r == 1 { "Yes" } else { "No" };
                    prop_assert_eq!(parse_verdict(normalized, mode), Ok(r));
                }
            }
        }
    }

    #[test]
    fn zero_shot_yes() {
        let (_, p) = setup(reply("Yes"));
        let pred = p.detect(Strategy::ZeroShot, &dlg("a"), None).unwrap();
        assert_eq!((pred.r, pred.valid, pred.n_llm_calls), (1, true, 1));
    }

    #[test]
    fn cot_uses_lenient_extraction() {
        let (_, p) = setup(reply("The speaker pressures the other. So the answer is Yes."));
        let pred = p.detect(Strategy::Cot, &dlg("a"), None).unwrap();
        assert_eq!((pred.r, pred.valid), (1, true));
    }

    #[test]
    fn few_shot_requires_bank() {
        let (_, p) = setup(reply("Yes"));
        assert!(matches!(
            p.detect(Strategy::FewShot, &dlg("a"), None),
            Err(PipelineError::Precondition(_))
        ));
    }

    #[test]
    fn intents_come_from_script() {
        let (mock, p) = setup(MockScript {
            rules: vec![
                MockRule::contains("made by Person1", "P1 wants X."),
                MockRule::contains("made by Person2", "P2 wants Y."),
            ],
            strict: true,
            ..Default::default()
        });
        let pair = p.summarize_intents(&dlg("a")).unwrap();
        assert_eq!(pair.intent_a, "P1 wants X.");
        assert_eq!(pair.intent_b, "P2 wants Y.");
        assert_eq!(mock.request_count(), 2);
        for req in mock.requests() {
            assert!(req.prompt().contains(&dlg("a").to_text()));
        }
    }

    #[test]
    fn blank_intent_retried_once_then_errors() {
        let (mock, p) = setup(MockScript {
            rules: vec![MockRule {
                matcher: Matcher::Contains("made by Person1".into()),
                replies: vec![MockReply::Text("  ".into()), MockReply::Text("P1.".into())],
            }],
            default: Some(" ".into()),
            strict: false,
        });
        let err = p.summarize_intents(&dlg("a")).unwrap_err();
        assert!(matches!(err, PipelineError::EmptyIntent(Speaker::Person2)));
        // Person1: blank then recovered; Person2: blank twice.
        assert_eq!(mock.request_count(), 4);
    }

    #[test]
    fn iap_call_order() {
        let (mock, p) = setup(MockScript {
            rules: vec![
                MockRule::contains("made by Person1", "A intends."),
                MockRule::contains("made by Person2", "B intends."),
                MockRule::contains("intent of person1", "Yes"),
            ],
            strict: true,
            ..Default::default()
        });
        let pred = p.detect_iap(&dlg("a")).unwrap();
        assert_eq!((pred.r, pred.n_llm_calls), (1, 3));
        let intents = pred.intents.unwrap();
        assert_eq!((intents.intent_a.as_str(), intents.intent_b.as_str()), ("A intends.", "B intends."));
        let log = mock.requests();
        assert!(log[0].prompt().contains("made by Person1"));
        assert!(log[1].prompt().contains("made by Person2"));
        assert!(log[2].prompt().ends_with("A intends.\nB intends."));
    }

    #[test]
    fn unparseable_verdict_retries_then_defaults() {
        let (mock, p) = setup(reply("Hard to say."));
        let pred = p.detect(Strategy::ZeroShot, &dlg("a"), None).unwrap();
        assert_eq!((pred.r, pred.valid, pred.n_llm_calls), (0, false, 2));
        let log = mock.requests();
        assert!(log[1].prompt().ends_with("\n\nAnswer only 'Yes' or 'No'."));
    }

    #[test]
    fn retry_can_recover_verdict() {
        let (_, p) = setup(MockScript {
            rules: vec![MockRule::contains(VERDICT_RETRY_SENTENCE, "No")],
            default: Some("Maybe".into()),
            strict: false,
        });
        let pred = p.detect(Strategy::ZeroShot, &dlg("a"), None).unwrap();
        assert_eq!((pred.r, pred.valid, pred.n_llm_calls), (0, true, 2));
    }

    #[test]
    fn run_sorts_by_id() {
        let (mock, p) = setup(reply("No"));
        let mut ds: Vec<Dialogue> = corpus(10).dialogues().to_vec();
        ds.reverse();
        let c = Corpus::new(ds, Provenance::default()).unwrap();
        let out = p.run_strategy(Strategy::ZeroShot, &c, None, None).unwrap();
        let ids: Vec<_> = out.predictions.iter().map(|p| p.dialogue_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(out.predictions.len(), 10);
        assert_eq!(mock.request_count(), 10);
    }

    fn failing_for(ids: &[String]) -> MockScript {
        MockScript {
            rules: ids
                .iter()
                .map(|id| MockRule {
                    matcher: Matcher::Contains(format!("hello {id}\n")),
                    replies: vec![MockReply::Fail(crate::gateway::MockFault::Auth)],
                })
                .collect(),
            default: Some("Yes".into()),
            strict: false,
        }
    }

    #[test]
    fn one_error_in_hundred_is_tolerated() {
        let (_, p) = setup(failing_for(&["c042".into()]));
        let out = p.run_strategy(Strategy::ZeroShot, &corpus(100), None, None).unwrap();
        assert_eq!(out.predictions.len(), 100);
        assert_eq!(out.errored(), 1);
        assert!(out.predictions.iter().find(|p| p.dialogue_id == "c042").unwrap().is_errored());
    }

    #[test]
    fn six_errors_in_hundred_abort() {
        let ids: Vec<String> = (0..6).map(|i| format!("c0{}0", i)).collect();
        let (_, p) = setup(failing_for(&ids));
        let err = p.run_strategy(Strategy::ZeroShot, &corpus(100), None, None).unwrap_err();
        assert!(matches!(err, PipelineError::ErrorThreshold { errored: 6, total: 100, .. }));
    }

    #[test]
    fn five_errors_in_hundred_pass() {
        let ids: Vec<String> = (0..5).map(|i| format!("c0{}0", i)).collect();
        let (_, p) = setup(failing_for(&ids));
        assert_eq!(
            p.run_strategy(Strategy::ZeroShot, &corpus(100), None, None).unwrap().errored(),
            5
        );
    }

    #[test]
    fn verdict_overrides() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.verdict_mode(Strategy::Cot), VerdictMode::Lenient);
        assert_eq!(cfg.verdict_mode(Strategy::Iap), VerdictMode::Strict);
        cfg.verdict_overrides.push((Strategy::Iap, VerdictMode::Lenient));
        assert_eq!(cfg.verdict_mode(Strategy::Iap), VerdictMode::Lenient);
    }

    #[test]
    fn sentence_counting() {
        assert_eq!(sentence_count("One sentence."), 1);
        assert_eq!(sentence_count("One. Two!"), 2);
        assert_eq!(sentence_count("Mr.Smith waits"), 0);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>(), Ok(s));
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
    }
}
