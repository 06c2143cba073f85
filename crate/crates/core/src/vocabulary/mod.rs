//! Subject identification: splitting fine-grained class names into a coarse
//! subject and its attribute phrases.
//!
//! Parsing runs once per class name before training or inference. Results
//! can be cached on disk so repeated runs never call the parser again.

mod cache;
mod rules;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmBackend, LlmClient};

pub use cache::{ParseCache, CACHE_VERSION};
pub use rules::{is_attribute_word, rule_based_parse, ATTRIBUTE_WORDS, RULES_PARSER_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Hallucination,
    OtherError,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Ok => "ok",
            ParseStatus::Hallucination => "hallucination",
            ParseStatus::OtherError => "other_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectParse {
    pub input_name: String,
    pub subject: String,
    pub attributes: Vec<String>,
    pub parser_id: String,
    pub status: ParseStatus,
}

impl SubjectParse {
    /// Builds a successful parse, dropping duplicate attribute phrases and
    /// any phrase equal to the subject.
    pub fn new_ok(
        input_name: &str,
        subject: impl Into<String>,
        attributes: Vec<String>,
        parser_id: &str,
    ) -> Self {
        let subject = subject.into();
        let mut attrs: Vec<String> = Vec::with_capacity(attributes.len());
        for a in attributes {
            let a = a.trim().to_string();
            if !a.is_empty() && a != subject && !attrs.contains(&a) {
                attrs.push(a);
            }
        }
        Self {
            input_name: input_name.to_string(),
            subject,
            attributes: attrs,
            parser_id: parser_id.to_string(),
            status: ParseStatus::Ok,
        }
    }

    fn failed(input_name: &str, parser_id: &str) -> Self {
        Self {
            input_name: input_name.to_string(),
            subject: input_name.trim().to_string(),
            attributes: Vec::new(),
            parser_id: parser_id.to_string(),
            status: ParseStatus::OtherError,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineGrainedClass {
    pub class_id: usize,
    pub full_name: String,
    pub subject: String,
    pub attributes: Vec<String>,
}

impl FineGrainedClass {
    pub fn from_parse(class_id: usize, parse: &SubjectParse) -> Self {
        Self {
            class_id,
            full_name: parse.input_name.clone(),
            subject: parse.subject.clone(),
            attributes: parse.attributes.clone(),
        }
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }
}

pub trait SubjectParser: Send + Sync {
    fn id(&self) -> &str;
    fn parse(&self, name: &str) -> Result<SubjectParse>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleParser;

impl SubjectParser for RuleParser {
    fn id(&self) -> &str {
        RULES_PARSER_ID
    }

    fn parse(&self, name: &str) -> Result<SubjectParse> {
        Ok(rule_based_parse(name))
    }
}

/// Prompt sent to a language model for one class name. The model is asked
/// for exactly two lines so that any backend can be parsed the same way.
pub fn subject_prompt(name: &str) -> String {
    format!(
        "Identify the subject of an object class name. The subject is the coarse-grained \
object category, a single noun phrase. The attributes are the descriptive phrases that \
modify the subject, copied verbatim from the name.\n\
Answer with exactly two lines and nothing else:\n\
subject: <subject>\n\
attributes: <comma-separated attribute phrases, or none>\n\
\n\
class name: a small brown dog\n\
subject: dog\n\
attributes: small, brown\n\
\n\
class name: {name}\n"
    )
}

/// Reads a `subject: ...` / `attributes: ...` response. Returns `None` when
/// either line is missing or the subject is empty.
pub fn parse_structured_response(response: &str) -> Option<(String, Vec<String>)> {
    let mut subject = None;
    let mut attributes = None;
    for line in response.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim().to_ascii_lowercase().as_str() {
            "subject" if subject.is_none() => subject = Some(value.to_string()),
            "attributes" if attributes.is_none() => {
                let list = if value.is_empty() || value.eq_ignore_ascii_case("none") {
                    Vec::new()
                } else {
                    value.split(',').map(|a| a.trim().to_string()).collect()
                };
                attributes = Some(list);
            }
            _ => {}
        }
    }
    match (subject, attributes) {
        (Some(s), Some(a)) if !s.is_empty() => Some((s, a)),
        _ => None,
    }
}

/// Parser backed by a language model. A malformed reply is retried once and
/// then replaced by the rule-based parse.
pub struct LlmSubjectParser<B> {
    client: LlmClient<B>,
    id: String,
}

impl<B: LlmBackend> LlmSubjectParser<B> {
    pub fn new(client: LlmClient<B>, id: impl Into<String>) -> Self {
        Self {
            client,
            id: id.into(),
        }
    }
}

impl<B: LlmBackend> SubjectParser for LlmSubjectParser<B> {
    fn id(&self) -> &str {
        &self.id
    }

    fn parse(&self, name: &str) -> Result<SubjectParse> {
        let prompt = subject_prompt(name);
        for _attempt in 0..2 {
            let response = self.client.request(&prompt)?;
            if response.trim().is_empty() {
                return Ok(SubjectParse::failed(name, &self.id));
            }
            if let Some((subject, attributes)) = parse_structured_response(&response) {
                return Ok(SubjectParse::new_ok(name, subject, attributes, &self.id));
            }
            log::debug!("malformed llm reply for {name:?}: {response:?}");
        }
        let mut fallback = rule_based_parse(name);
        fallback.parser_id = format!("{}+{}", self.id, RULES_PARSER_ID);
        Ok(fallback)
    }
}

/// User-supplied hyponym → hypernym map ("husky" → "dog").
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HypernymLexicon {
    entries: HashMap<String, String>,
}

impl HypernymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hyponym: &str, hypernym: &str) {
        self.entries
            .insert(normalize_phrase(hyponym), normalize_phrase(hypernym));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `hyponym<TAB>hypernym` (or `hyponym,hypernym`) pair per line;
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .or_else(|| line.split_once(','))
                .ok_or_else(|| Error::format("hypernym lexicon", format!("line {}: {line:?}", i + 1)))?;
            lex.insert(a.trim(), b.trim());
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn maps_to(&self, original_tokens: &[String], subject: &str) -> bool {
        self.entries.iter().any(|(hypo, hyper)| {
            hyper == subject && contains_sequence(original_tokens, &tokens_of(hypo))
        })
    }
}

fn tokens_of(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(rules::normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

fn normalize_phrase(text: &str) -> String {
    tokens_of(text).join(" ")
}

fn contains_sequence(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && haystack.windows(needle.len()).any(|w| {
            w.iter()
                .zip(needle)
                .all(|(h, n)| h == n || *h == format!("{n}s") || *h == format!("{n}es"))
        })
}

/// Classifies a parse against the name it came from.
///
/// - `other_error`: empty subject, or a subject made only of attribute words.
/// - `ok`: the subject occurs in the name (plural forms accepted), or the
///   lexicon maps some phrase of the name to the subject.
/// - `hallucination`: otherwise.
pub fn validate_parse(
    parse: &SubjectParse,
    original: &str,
    lexicon: Option<&HypernymLexicon>,
) -> ParseStatus {
    let subject_tokens = tokens_of(&parse.subject);
    if subject_tokens.is_empty() || subject_tokens.iter().all(|t| is_attribute_word(t)) {
        return ParseStatus::OtherError;
    }
    let original_tokens = tokens_of(original);
    if contains_sequence(&original_tokens, &subject_tokens) {
        return ParseStatus::Ok;
    }
    if let Some(lex) = lexicon {
        if lex.maps_to(&original_tokens, &subject_tokens.join(" ")) {
            return ParseStatus::Ok;
        }
    }
    ParseStatus::Hallucination
}

/// Parses one name, consulting and filling `cache` when given.
pub fn parse_class_name(
    name: &str,
    parser: &dyn SubjectParser,
    cache: Option<&ParseCache>,
) -> Result<SubjectParse> {
    if name.trim().is_empty() {
        return Err(Error::InvalidInput("empty class name".into()));
    }
    if let Some(hit) = cache.and_then(|c| c.get(name)) {
        return Ok(hit);
    }
    let parse = parser.parse(name)?;
    if let Some(c) = cache {
        c.insert(parse.clone());
    }
    Ok(parse)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub class_id: usize,
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabularyBuild {
    pub classes: Vec<FineGrainedClass>,
    /// Validated parses, one per class.
    pub parses: Vec<SubjectParse>,
    pub failures: Vec<ParseFailure>,
}

impl VocabularyBuild {
    pub fn count(&self, status: ParseStatus) -> usize {
        self.parses.iter().filter(|p| p.status == status).count()
    }
}

/// Parses every name (concurrently) and assigns class ids by position.
/// A failing name yields a class whose subject is the whole name and an
/// entry in `failures`; the batch itself never fails for one bad name.
pub fn build_vocabulary(
    names: &[String],
    parser: &dyn SubjectParser,
    cache: Option<&ParseCache>,
    lexicon: Option<&HypernymLexicon>,
) -> Result<VocabularyBuild> {
    if names.is_empty() {
        return Err(Error::InvalidInput("no class names given".into()));
    }
    let outcomes: Vec<(SubjectParse, Option<String>)> = names
        .par_iter()
        .map(|name| match parse_class_name(name, parser, cache) {
            Ok(mut parse) => {
                if parse.status == ParseStatus::Ok {
                    parse.status = validate_parse(&parse, name, lexicon);
                }
                let reason = (parse.status != ParseStatus::Ok).then(|| parse.status.as_str().to_string());
                (parse, reason)
            }
            Err(e) => (SubjectParse::failed(name, parser.id()), Some(e.to_string())),
        })
        .collect();

    let mut classes = Vec::with_capacity(names.len());
    let mut parses = Vec::with_capacity(names.len());
    let mut failures = Vec::new();
    for (class_id, (parse, reason)) in outcomes.into_iter().enumerate() {
        classes.push(FineGrainedClass::from_parse(class_id, &parse));
        if let Some(reason) = reason {
            failures.push(ParseFailure {
                class_id,
                name: parse.input_name.clone(),
                reason,
            });
        }
        parses.push(parse);
    }
    Ok(VocabularyBuild {
        classes,
        parses,
        failures,
    })
}
