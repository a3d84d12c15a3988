//! Turning a text prompt into the N key visual elements to match against
//! the bank.
//!
//! The LLM path asks for a numbered list. A malformed reply gets one
//! reprompt; after that, or whenever the backend is down, the rule-based
//! extractor takes over. Either way exactly `n` elements come back.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{BackendError, IntentError};
use crate::http::{self, Endpoint, RetryPolicy};

pub const DEFAULT_ELEMENT_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementSource {
    Llm,
    Fallback,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyElement {
    pub index: usize,
    pub phrase: String,
    pub source: ElementSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionRequest {
    pub prompt: String,
    pub n: usize,
}

impl ExtractionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            n: DEFAULT_ELEMENT_COUNT,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

/// What the LLM backend is sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub instruction: String,
    pub prompt: String,
    pub n: usize,
}

/// A text-completion model that answers extraction requests.
pub trait LlmBackend: Send + Sync {
    /// Returns the raw completion, expected to be a numbered list.
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError>;
}

pub fn instruction_for(n: usize) -> String {
    format!(
        "Please extract {n} key visual elements from this paragraph. \
         Reply with a numbered list, one element per line, most important first."
    )
}

fn strict_instruction_for(n: usize) -> String {
    format!(
        "{} Use exactly the form `1. element` on each line and nothing else.",
        instruction_for(n)
    )
}

/// Parses `1. foo\n2. bar`. Numbering must start at 1 and be consecutive;
/// any other non-blank line is a format violation.
pub fn parse_numbered_list(text: &str) -> Option<Vec<String>> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let digits: String = line.chars().take_while(|c| c.is_ascii_digit()).collect();
        let number: usize = digits.parse().ok()?;
        if number != out.len() + 1 {
            return None;
        }
        let rest = &line[digits.len()..];
        let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
        if !rest.starts_with(char::is_whitespace) {
            return None;
        }
        let phrase = rest.trim().trim_matches(|c| c == '"' || c == '*').trim();
        if phrase.is_empty() {
            return None;
        }
        out.push(phrase.to_string());
    }
    (!out.is_empty()).then_some(out)
}

/// Extracts exactly `req.n` elements, most important first.
pub fn extract_elements(
    req: &ExtractionRequest,
    llm: Option<&dyn LlmBackend>,
) -> Result<Vec<KeyElement>, IntentError> {
    let prompt = req.prompt.trim();
    if prompt.is_empty() {
        return Err(IntentError::EmptyPrompt);
    }
    if req.n == 0 {
        return Err(IntentError::NoElements);
    }

    let from_llm = llm.and_then(|backend| ask_llm(backend, prompt, req.n));
    let mut phrases: Vec<(String, ElementSource)> = from_llm
        .unwrap_or_default()
        .into_iter()
        .take(req.n)
        .map(|p| (p, ElementSource::Llm))
        .collect();

    if phrases.len() < req.n {
        for p in fallback_phrases(prompt) {
            if phrases.len() == req.n {
                break;
            }
            if !phrases.iter().any(|(q, _)| q.eq_ignore_ascii_case(&p)) {
                phrases.push((p, ElementSource::Fallback));
            }
        }
    }
    while phrases.len() < req.n {
        phrases.push((prompt.to_string(), ElementSource::Fallback));
    }

    Ok(phrases
        .into_iter()
        .enumerate()
        .map(|(index, (phrase, source))| KeyElement {
            index,
            phrase,
            source,
        })
        .collect())
}

fn ask_llm(backend: &dyn LlmBackend, prompt: &str, n: usize) -> Option<Vec<String>> {
    let mut req = LlmRequest {
        instruction: instruction_for(n),
        prompt: prompt.to_string(),
        n,
    };
    for attempt in 0..2 {
        match backend.complete(&req) {
            Ok(text) => {
                if let Some(list) = parse_numbered_list(&text) {
                    return Some(list);
                }
                warn!(attempt, "LLM reply is not a numbered list");
                req.instruction = strict_instruction_for(n);
            }
            Err(e) => {
                warn!(error = %e, "LLM backend failed; using rule-based extraction");
                return None;
            }
        }
    }
    None
}

/// Adopts user-supplied elements verbatim.
pub fn override_elements<S: AsRef<str>>(elements: &[S]) -> Result<Vec<KeyElement>, IntentError> {
    if elements.is_empty() {
        return Err(IntentError::NoElements);
    }
    elements
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let phrase = e.as_ref().trim();
            if phrase.is_empty() {
                return Err(IntentError::EmptyElement(index));
            }
            Ok(KeyElement {
                index,
                phrase: phrase.to_string(),
                source: ElementSource::User,
            })
        })
        .collect()
}

/// Words that open a noun phrase: determiners, possessives, prepositions
/// and coordinators.
const OPENERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "its", "their", "my",
    "your", "our", "some", "any", "every", "each", "no", "one", "two", "three", "several",
    "many", "on", "in", "at", "with", "by", "for", "from", "to", "of", "into", "onto", "over",
    "under", "near", "beside", "behind", "above", "below", "across", "through", "along",
    "around", "between", "among", "against", "toward", "towards", "inside", "outside",
    "beneath", "upon", "and", "or",
];

/// Function words that end a phrase without opening a new one.
const STOPWORDS: &[&str] = &[
    "but", "while", "as", "is", "are", "was", "were", "be", "been", "being", "has", "have",
    "had", "do", "does", "did", "he", "she", "it", "they", "we", "i", "you", "him", "them",
    "us", "me", "very", "then", "there", "here", "who", "which", "what", "where", "when",
    "not", "so", "too", "also", "just",
];

fn is_opener(w: &str) -> bool {
    OPENERS.contains(&w.to_ascii_lowercase().as_str())
}

fn is_stopword(w: &str) -> bool {
    let lower = w.to_ascii_lowercase();
    OPENERS.contains(&lower.as_str()) || STOPWORDS.contains(&lower.as_str())
}

fn is_capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_uppercase)
}

fn is_verb_like(w: &str) -> bool {
    w.len() > 4 && w.ends_with("ing")
}

/// Determiners after which the head noun is singular, so a following
/// `-s` word is read as a verb ("a rocket lands").
const SINGULAR: &[&str] = &["a", "an", "this", "that", "each", "every", "one"];

fn is_third_person_verb(w: &str) -> bool {
    w.len() > 2 && w.ends_with('s') && !w.ends_with("ss")
}

#[derive(Debug)]
enum Token {
    Word(String),
    Break,
}

fn tokenize(prompt: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for raw in prompt.split_whitespace() {
        let ends_clause = raw.ends_with(['.', ',', ';', ':', '!', '?']);
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
        if !word.is_empty() {
            out.push(Token::Word(word.to_string()));
        }
        if ends_clause {
            out.push(Token::Break);
        }
    }
    out
}

/// Rule-based extraction: capitalized name runs first, then noun phrases
/// introduced by determiners or prepositions, each group in prompt order.
pub fn fallback_phrases(prompt: &str) -> Vec<String> {
    let tokens = tokenize(prompt);
    // (position, phrase, capitalized)
    let mut found: Vec<(usize, String, bool)> = Vec::new();
    let mut name: Vec<&str> = Vec::new();
    let mut name_start = 0;
    let mut run: Vec<&str> = Vec::new();
    let mut run_start = 0;
    let mut open = true;
    let mut singular = false;

    let flush = |buf: &mut Vec<&str>, start: usize, cap: bool, found: &mut Vec<(usize, String, bool)>| {
        if !buf.is_empty() {
            found.push((start, buf.join(" "), cap));
            buf.clear();
        }
    };

    for (pos, tok) in tokens.iter().enumerate() {
        let word = match tok {
            Token::Break => {
                flush(&mut name, name_start, true, &mut found);
                flush(&mut run, run_start, false, &mut found);
                open = true;
                continue;
            }
            Token::Word(w) => w.as_str(),
        };
        if is_capitalized(word) && !is_stopword(word) {
            flush(&mut run, run_start, false, &mut found);
            if name.is_empty() {
                name_start = pos;
            }
            name.push(word);
            open = false;
            continue;
        }
        flush(&mut name, name_start, true, &mut found);
        if is_stopword(word) {
            flush(&mut run, run_start, false, &mut found);
            open = is_opener(word);
            singular = SINGULAR.contains(&word.to_ascii_lowercase().as_str());
            continue;
        }
        if is_verb_like(word) || (singular && !run.is_empty() && is_third_person_verb(word)) {
            flush(&mut run, run_start, false, &mut found);
            open = false;
            continue;
        }
        if open {
            if run.is_empty() {
                run_start = pos;
            }
            run.push(word);
        }
    }
    flush(&mut name, name_start, true, &mut found);
    flush(&mut run, run_start, false, &mut found);

    // capitalized names first, then by position
    found.sort_by_key(|(pos, _, cap)| (!cap, *pos));
    let mut out: Vec<String> = Vec::new();
    for (_, phrase, _) in found {
        if !out.iter().any(|p| p.eq_ignore_ascii_case(&phrase)) {
            out.push(phrase);
        }
    }
    out
}

/// Client for a remote LLM speaking `{instruction, prompt, n}` →
/// `{"text": "1. ...\n2. ..."}`.
#[derive(Debug, Clone)]
pub struct HttpLlmBackend {
    endpoint: Endpoint,
    client: Client,
}

#[derive(Debug, Deserialize)]
struct LlmWireResponse {
    text: String,
}

impl HttpLlmBackend {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(endpoint: Endpoint) -> Result<Self, BackendError> {
        Ok(Self {
            client: http::build_client(endpoint.timeout)?,
            endpoint,
        })
    }

    /// Reads `DVP_LLM_URL`, `DVP_LLM_TOKEN` and `DVP_LLM_TIMEOUT_S`.
    pub fn from_env() -> Result<Self, BackendError> {
        let url = std::env::var("DVP_LLM_URL")
            .map_err(|_| BackendError::Unavailable("DVP_LLM_URL is not set".into()))?;
        let timeout = std::env::var("DVP_LLM_TIMEOUT_S")
            .ok()
            .and_then(|t| t.parse().ok())
            .map(Duration::from_secs)
            .unwrap_or(Self::DEFAULT_TIMEOUT);
        Self::new(Endpoint {
            url,
            token: std::env::var("DVP_LLM_TOKEN").ok(),
            timeout,
        })
    }
}

impl LlmBackend for HttpLlmBackend {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        // a single attempt: reprompting is the caller's only retry
        let resp: LlmWireResponse =
            RetryPolicy::none().run(|| http::post_json(&self.client, &self.endpoint, req))?;
        Ok(resp.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn phrases(e: &[KeyElement]) -> Vec<&str> {
        e.iter().map(|k| k.phrase.as_str()).collect()
    }

    struct Scripted(Mutex<Vec<Result<String, BackendError>>>);

    impl Scripted {
        fn new(replies: Vec<Result<String, BackendError>>) -> Self {
            Self(Mutex::new(replies))
        }
        fn remaining(&self) -> usize {
            self.0.lock().unwrap().len()
        }
    }

    impl LlmBackend for Scripted {
        fn complete(&self, _req: &LlmRequest) -> Result<String, BackendError> {
            self.0.lock().unwrap().remove(0)
        }
    }

    #[test]
    fn fallback_tintin_example() {
        let req = ExtractionRequest::new("Tintin rides a horse on the grassland");
        let out = extract_elements(&req, None).unwrap();
        assert_eq!(phrases(&out), vec!["Tintin", "horse", "grassland"]);
        assert!(out.iter().all(|e| e.source == ElementSource::Fallback));
        assert_eq!(out.iter().map(|e| e.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn fallback_single_noun() {
        let out = extract_elements(&ExtractionRequest::new("a cat").with_n(1), None).unwrap();
        assert_eq!(phrases(&out), vec!["cat"]);
    }

    #[test]
    fn fallback_pads_with_whole_prompt() {
        let prompt = "Snowy chases a ball";
        let out = extract_elements(&ExtractionRequest::new(prompt), None).unwrap();
        assert_eq!(phrases(&out), vec!["Snowy", "ball", prompt]);
        assert_eq!(out[2].source, ElementSource::Fallback);
    }

    #[test]
    fn fallback_ranks_names_before_nouns() {
        let p = fallback_phrases("a rocket lands near Captain Haddock and Tintin, under a red sky");
        assert_eq!(p, vec!["Captain Haddock", "Tintin", "rocket", "red sky"]);
    }

    #[test]
    fn fallback_is_deterministic() {
        let p = "The Thompson twins walk through the old market with a dog";
        assert_eq!(fallback_phrases(p), fallback_phrases(p));
        assert_eq!(fallback_phrases(p), vec!["Thompson", "old market", "dog"]);
    }

    #[test]
    fn empty_prompt_rejected() {
        assert_eq!(
            extract_elements(&ExtractionRequest::new("   "), None),
            Err(IntentError::EmptyPrompt)
        );
    }

    #[test]
    fn llm_list_is_used_and_truncated() {
        let llm = Scripted::new(vec![Ok("1. Tintin\n2. horse\n3. grassland\n4. sky".into())]);
        let out = extract_elements(&ExtractionRequest::new("Tintin rides"), Some(&llm)).unwrap();
        assert_eq!(phrases(&out), vec!["Tintin", "horse", "grassland"]);
        assert!(out.iter().all(|e| e.source == ElementSource::Llm));
    }

    #[test]
    fn short_llm_list_is_padded_by_fallback() {
        let llm = Scripted::new(vec![Ok("1. Tintin".into())]);
        let req = ExtractionRequest::new("Tintin rides a horse on the grassland");
        let out = extract_elements(&req, Some(&llm)).unwrap();
        assert_eq!(phrases(&out), vec!["Tintin", "horse", "grassland"]);
        assert_eq!(out[0].source, ElementSource::Llm);
        assert_eq!(out[1].source, ElementSource::Fallback);
    }

    #[test]
    fn malformed_reply_reprompts_once_then_falls_back() {
        let llm = Scripted::new(vec![
            Ok("Sure! Tintin, a horse".into()),
            Ok("1. Tintin\n2. horse\n3. field".into()),
        ]);
        let out = extract_elements(&ExtractionRequest::new("Tintin rides"), Some(&llm)).unwrap();
        assert_eq!(phrases(&out), vec!["Tintin", "horse", "field"]);

        let llm = Scripted::new(vec![Ok("nope".into()), Ok("still nope".into()), Ok("1. x".into())]);
        let req = ExtractionRequest::new("Tintin rides a horse on the grassland");
        let out = extract_elements(&req, Some(&llm)).unwrap();
        assert!(out.iter().all(|e| e.source == ElementSource::Fallback));
        assert_eq!(llm.remaining(), 1);
    }

    #[test]
    fn backend_down_falls_back_without_reprompt() {
        let llm = Scripted::new(vec![Err(BackendError::Unavailable("x".into())), Ok("1. y".into())]);
        let out = extract_elements(&ExtractionRequest::new("a cat").with_n(1), Some(&llm)).unwrap();
        assert_eq!(phrases(&out), vec!["cat"]);
        assert_eq!(out[0].source, ElementSource::Fallback);
        assert_eq!(llm.remaining(), 1);
    }

    #[test]
    fn numbered_list_parser() {
        assert_eq!(
            parse_numbered_list("1. a\n\n2) b c\n"),
            Some(vec!["a".to_string(), "b c".to_string()])
        );
        assert_eq!(parse_numbered_list("2. a"), None);
        assert_eq!(parse_numbered_list("1. a\nb"), None);
        assert_eq!(parse_numbered_list("1.a"), None);
        assert_eq!(parse_numbered_list("1. "), None);
        assert_eq!(parse_numbered_list(""), None);
    }

    #[test]
    fn overrides() {
        let out = override_elements(&["Tintin", "Snowy", "rocket"]).unwrap();
        assert_eq!(phrases(&out), vec!["Tintin", "Snowy", "rocket"]);
        assert!(out.iter().all(|e| e.source == ElementSource::User));
        assert_eq!(override_elements(&[""]), Err(IntentError::EmptyElement(0)));
        assert_eq!(override_elements(&["Captain Haddock"]).unwrap().len(), 1);
        assert_eq!(override_elements::<&str>(&[]), Err(IntentError::NoElements));
    }
}
