//! Deterministic head-noun parser used when no language model is available.

use super::{ParseStatus, SubjectParse};

pub const RULES_PARSER_ID: &str = "rules";

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "some", "this", "that", "these", "those", "one", "two", "three", "several",
    "many", "its", "their", "his", "her",
];

/// Words that open a trailing phrase kept as one attribute.
const PHRASE_OPENERS: &[&str] = &[
    "with", "without", "on", "in", "at", "near", "under", "above", "behind", "beside", "inside",
    "outside", "of", "from", "for", "over", "against", "by", "having", "holding", "wearing",
    "carrying", "containing", "filled", "made", "covered", "next", "which", "featuring",
];

/// Modifiers that bind to the following word ("dark brown").
const INTENSIFIERS: &[&str] = &[
    "dark", "light", "pale", "bright", "deep", "very", "slightly", "dull", "pastel", "hot",
    "navy", "off", "mostly", "partly", "semi", "highly", "rather", "quite",
];

const CONJUNCTIONS: &[&str] = &["and", "&", "or"];

/// Descriptive words that cannot serve as a subject on their own.
pub const ATTRIBUTE_WORDS: &[&str] = &[
    // colour
    "red", "orange", "yellow", "green", "blue", "purple", "violet", "pink", "brown", "black",
    "white", "gray", "grey", "beige", "tan", "gold", "golden", "silver", "cream", "maroon",
    "turquoise", "teal", "olive", "khaki", "ivory", "magenta", "cyan", "crimson", "colorful",
    "multicolored", "dark", "light", "pale", "bright",
    // material
    "wooden", "wood", "metal", "metallic", "plastic", "glass", "ceramic", "porcelain", "leather",
    "fabric", "cotton", "wool", "woolen", "paper", "cardboard", "rubber", "stone", "steel",
    "iron", "aluminum", "concrete", "wicker", "rattan", "textile", "velvet", "silk", "denim",
    "marble", "bamboo", "clay", "crystal",
    // pattern
    "striped", "dotted", "plain", "checkered", "floral", "spotted", "patterned", "polka-dot",
    "plaid", "textured", "printed", "perforated",
    // transparency
    "transparent", "translucent", "opaque", "clear",
    // size, shape and state
    "small", "large", "big", "tiny", "huge", "little", "tall", "short", "long", "wide", "narrow",
    "round", "square", "rectangular", "oval", "circular", "flat", "thin", "thick", "old", "new",
    "shiny", "matte", "smooth", "rough", "soft", "hard", "empty", "full", "open", "closed",
    "folded", "broken", "wet", "dry", "fluffy", "furry",
];

const ADJECTIVE_SUFFIXES: &[&str] = &["ish", "ous", "ful", "less", "colored", "coloured", "patterned"];

pub(crate) fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '&' && c != '\'')
        .to_lowercase()
}

pub fn is_attribute_word(word: &str) -> bool {
    let w = normalize_token(word);
    ATTRIBUTE_WORDS.contains(&w.as_str())
        || ADJECTIVE_SUFFIXES
            .iter()
            .any(|s| w.len() > s.len() + 2 && w.ends_with(s))
}

struct Token<'a> {
    raw: &'a str,
    lower: String,
    /// A comma or semicolon followed this token.
    breaks_after: bool,
}

fn tokenize(name: &str) -> Vec<Token<'_>> {
    name.split_whitespace()
        .filter_map(|raw| {
            let breaks_after = raw.ends_with(',') || raw.ends_with(';');
            let trimmed = raw.trim_matches(|c: char| {
                !c.is_alphanumeric() && c != '-' && c != '&' && c != '\''
            });
            (!trimmed.is_empty()).then(|| Token {
                raw: trimmed,
                lower: trimmed.to_lowercase(),
                breaks_after,
            })
        })
        .collect()
}

/// Splits a class name into its head noun (subject) and modifier phrases.
///
/// The last word of the head phrase becomes the subject. Everything after
/// the first preposition-like word is split into trailing phrases
/// ("with a head", "on the conveyor belt"), each kept as one attribute.
/// Head modifiers become attributes, with intensifiers and conjunctions
/// binding neighbouring words into one phrase.
pub fn rule_based_parse(name: &str) -> SubjectParse {
    let failure = || SubjectParse {
        input_name: name.to_string(),
        subject: name.trim().to_string(),
        attributes: Vec::new(),
        parser_id: RULES_PARSER_ID.to_string(),
        status: ParseStatus::OtherError,
    };

    let tokens = tokenize(name);
    let split = tokens
        .iter()
        .position(|t| PHRASE_OPENERS.contains(&t.lower.as_str()))
        .unwrap_or(tokens.len());
    let (head, tail) = tokens.split_at(split);

    let head: Vec<&Token> = head
        .iter()
        .skip_while(|t| DETERMINERS.contains(&t.lower.as_str()))
        .collect();
    let Some((subject_tok, modifiers)) = head.split_last() else {
        return failure();
    };
    if is_attribute_word(&subject_tok.lower) || CONJUNCTIONS.contains(&subject_tok.lower.as_str())
    {
        return failure();
    }
    let subject = subject_tok.raw.to_string();

    let mut attributes: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut join_next = false;
    for tok in modifiers {
        let word = tok.lower.as_str();
        if CONJUNCTIONS.contains(&word) {
            if !current.is_empty() {
                current.push(tok.raw);
                join_next = true;
            }
            continue;
        }
        if !join_next && !current.is_empty() {
            attributes.push(current.join(" "));
            current.clear();
        }
        current.push(tok.raw);
        join_next = INTENSIFIERS.contains(&word) && !tok.breaks_after;
    }
    if !current.is_empty() {
        // a dangling conjunction ("black and") stays verbatim
        attributes.push(current.join(" "));
    }

    let mut phrase: Vec<&str> = Vec::new();
    for tok in tail {
        if PHRASE_OPENERS.contains(&tok.lower.as_str()) && !phrase.is_empty() && !is_continuation(&phrase, tok) {
            attributes.push(phrase.join(" "));
            phrase.clear();
        }
        phrase.push(tok.raw);
    }
    if !phrase.is_empty() {
        attributes.push(phrase.join(" "));
    }

    SubjectParse::new_ok(name, subject, attributes, RULES_PARSER_ID)
}

/// "next to", "made of", "filled with" read as one opener.
fn is_continuation(phrase: &[&str], tok: &Token) -> bool {
    let prev = phrase.last().map(|p| p.to_lowercase()).unwrap_or_default();
    matches!(
        (prev.as_str(), tok.lower.as_str()),
        ("next", "to") | ("made", "of") | ("made", "from") | ("filled", "with") | ("covered", "with") | ("covered", "in")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(name: &str) -> (String, Vec<String>, ParseStatus) {
        let p = rule_based_parse(name);
        (p.subject, p.attributes, p.status)
    }

    #[test]
    fn head_noun_with_modifiers() {
        let (s, a, st) = parse("a small brown dog");
        assert_eq!((s.as_str(), st), ("dog", ParseStatus::Ok));
        assert_eq!(a, vec!["small", "brown"]);
    }

    #[test]
    fn bare_noun_has_no_attributes() {
        let (s, a, st) = parse("dog");
        assert_eq!((s.as_str(), st), ("dog", ParseStatus::Ok));
        assert!(a.is_empty());
    }

    #[test]
    fn intensifier_binds_to_next_word() {
        let (s, a, _) = parse("dark brown wooden lamp");
        assert_eq!(s, "lamp");
        assert_eq!(a, vec!["dark brown", "wooden"]);
    }

    #[test]
    fn with_phrase_becomes_one_attribute() {
        let (s, a, _) = parse("a dog with a head");
        assert_eq!(s, "dog");
        assert_eq!(a, vec!["with a head"]);
    }

    #[test]
    fn locative_phrase_is_kept_verbatim() {
        let (s, a, _) = parse("suitcase on the conveyor belt");
        assert_eq!(s, "suitcase");
        assert_eq!(a, vec!["on the conveyor belt"]);
    }

    #[test]
    fn attribute_only_input_is_an_error() {
        let p = rule_based_parse("red");
        assert_eq!(p.status, ParseStatus::OtherError);
        assert_eq!(p.subject, "red");
    }

    #[test]
    fn conjunctions_and_multiple_phrases() {
        let (s, a, _) = parse("A black and white striped shirt with a collar on a hanger.");
        assert_eq!(s, "shirt");
        assert_eq!(a, vec!["black and white", "striped", "with a collar", "on a hanger"]);
        let (s, a, _) = parse("mug made of ceramic next to a laptop");
        assert_eq!(s, "mug");
        assert_eq!(a, vec!["made of ceramic", "next to a laptop"]);
    }

    #[test]
    fn attributes_are_verbatim_and_deduplicated() {
        let (s, a, _) = parse("Red red Chair");
        assert_eq!(s, "Chair");
        assert_eq!(a, vec!["Red", "red"]);
        let (_, a, _) = parse("red red chair");
        assert_eq!(a, vec!["red"]);
    }

    #[test]
    fn leading_preposition_has_no_head() {
        assert_eq!(rule_based_parse("with a handle").status, ParseStatus::OtherError);
        assert_eq!(rule_based_parse("the").status, ParseStatus::OtherError);
    }
}
