//! Word lists and lexicons shared by the rule parser, the mock renderer and
//! the evaluator.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute category used for tagging adjectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Color,
    Shape,
    Texture,
    Other,
}

const COLOR_WORDS: &[&str] = &[
    "black", "silver", "gray", "grey", "white", "maroon", "red", "purple", "fuchsia", "green",
    "lime", "olive", "yellow", "navy", "blue", "teal", "aqua", "brown", "gold", "golden", "pink",
    "orange", "cyan", "magenta", "violet", "beige", "tan", "ivory", "turquoise", "indigo",
    "cream", "crimson", "lavender",
];

const SHAPE_WORDS: &[&str] = &[
    "round", "square", "rectangular", "triangular", "oval", "circular", "spherical", "cubic",
    "cylindrical", "hexagonal", "pentagonal", "octagonal", "oblong", "diamond", "heart-shaped",
    "star-shaped", "conical", "curved", "elliptical",
];

const TEXTURE_WORDS: &[&str] = &[
    "wooden", "wood", "metallic", "metal", "plastic", "glass", "leather", "fabric", "fluffy",
    "rubber", "ceramic", "stone", "velvet", "furry", "silk", "silky", "woolen", "wool", "cotton",
    "paper", "marble", "concrete", "brick", "steel", "iron", "rough", "smooth", "shiny", "glossy",
    "knitted", "porcelain", "denim",
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "his", "her", "their", "its",
    "my", "our", "your",
];

const PRONOUNS: &[&str] = &["it", "them", "they", "him", "her", "itself", "he", "she"];

/// Words dropped between noun phrases ("is", "was", ...).
const FILLERS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "there", "sits", "stands",
    "lies", "rests", "hangs", "placed", "located", "positioned",
];

const NUMBER_WORDS: &[(&str, u32)] = &[
    ("one", 1),
    ("two", 2),
    ("three", 3),
    ("four", 4),
    ("five", 5),
    ("six", 6),
    ("seven", 7),
    ("eight", 8),
    ("nine", 9),
    ("ten", 10),
];

/// Nouns that end in "ing" and must not be read as verbs.
const ING_NOUNS: &[&str] = &[
    "ring", "king", "wing", "string", "building", "painting", "ceiling", "swing", "earring",
    "pudding", "stocking", "thing", "sling", "spring", "drawing", "clothing", "wedding",
    "ping", "icing", "railing", "awning",
];

/// Two-word nouns kept together as the head of a phrase.
const COMPOUND_NOUNS: &[&str] = &[
    "hot dog", "teddy bear", "traffic light", "fire hydrant", "stop sign", "cell phone",
    "wine glass", "tennis racket", "baseball bat", "baseball glove", "parking meter",
    "ice cream", "coffee table", "dining table", "potted plant", "hair drier", "soccer ball",
    "tennis ball", "christmas tree", "water bottle", "coffee cup", "tea cup", "fire truck",
    "police car", "school bus", "sports car", "race car", "street light", "bus stop",
    "park bench", "computer mouse", "toy car", "lamp post", "picture frame", "flower pot",
    "table lamp", "floor lamp", "fish tank", "paper bag", "tool box",
];

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("people", "person"),
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("teeth", "tooth"),
    ("feet", "foot"),
    ("sheep", "sheep"),
    ("fish", "fish"),
    ("deer", "deer"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("wolves", "wolf"),
    ("loaves", "loaf"),
    ("shelves", "shelf"),
];

pub fn attribute_kind(word: &str) -> AttributeKind {
    if COLOR_WORDS.contains(&word) {
        AttributeKind::Color
    } else if SHAPE_WORDS.contains(&word) {
        AttributeKind::Shape
    } else if TEXTURE_WORDS.contains(&word) {
        AttributeKind::Texture
    } else {
        AttributeKind::Other
    }
}

pub fn is_determiner(word: &str) -> bool {
    DETERMINERS.contains(&word)
}

pub fn is_pronoun(word: &str) -> bool {
    PRONOUNS.contains(&word)
}

pub fn is_filler(word: &str) -> bool {
    FILLERS.contains(&word)
}

/// Parses a quantity word or a bare integer.
pub fn quantity(word: &str) -> Option<u32> {
    if let Some((_, n)) = NUMBER_WORDS.iter().find(|(w, _)| *w == word) {
        return Some(*n);
    }
    word.parse::<u32>().ok().filter(|n| *n > 0)
}

pub fn number_word(n: u32) -> String {
    NUMBER_WORDS
        .iter()
        .find(|(_, v)| *v == n)
        .map(|(w, _)| (*w).to_string())
        .unwrap_or_else(|| n.to_string())
}

pub fn is_gerund(word: &str) -> bool {
    word.len() > 4 && word.ends_with("ing") && !ING_NOUNS.contains(&word)
}

pub fn is_compound(first: &str, second: &str) -> bool {
    let joined = format!("{first} {second}");
    COMPOUND_NOUNS.contains(&joined.as_str())
}

pub fn singularize(word: &str) -> String {
    if let Some((_, s)) = IRREGULAR_PLURALS.iter().find(|(p, _)| *p == word) {
        return (*s).to_string();
    }
    if word.len() > 3 && word.ends_with("ies") {
        return format!("{}y", &word[..word.len() - 3]);
    }
    for suffix in ["ches", "shes", "sses", "xes", "zes", "oes"] {
        if word.len() > suffix.len() + 1 && word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    if word.len() > 2 && word.ends_with('s') && !word.ends_with("ss") && !word.ends_with("us") {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

pub fn pluralize(word: &str) -> String {
    if let Some((p, _)) = IRREGULAR_PLURALS.iter().find(|(_, s)| *s == word) {
        return (*p).to_string();
    }
    let bytes = word.as_bytes();
    if word.ends_with('y') && bytes.len() > 1 && !b"aeiou".contains(&bytes[bytes.len() - 2]) {
        return format!("{}ies", &word[..word.len() - 1]);
    }
    if ["ch", "sh", "ss", "x", "z"].iter().any(|s| word.ends_with(s)) {
        return format!("{word}es");
    }
    format!("{word}s")
}

/// Pluralizes the last word of a possibly multi-word noun.
pub fn pluralize_noun(noun: &str) -> String {
    match noun.rsplit_once(' ') {
        Some((head, last)) => format!("{head} {}", pluralize(last)),
        None => pluralize(noun),
    }
}

pub fn indefinite_article(next_word: &str) -> &'static str {
    match next_word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Lowercases, strips articles and adjectives, and singularizes the head
/// noun of a caption or detector label ("a red apple" -> "apple").
pub fn normalize_label(text: &str) -> String {
    let words: Vec<String> = text
        .split(|c: char| c.is_whitespace() || c == ',' || c == '.')
        .filter(|w| !w.is_empty())
        .map(|w| w.trim_matches(|c: char| c == '\'' || c == '"').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let Some(last) = words.last() else {
        return String::new();
    };
    let last = singularize(last);
    if words.len() >= 2 {
        let prev = &words[words.len() - 2];
        if is_compound(prev, &last) {
            return format!("{prev} {last}");
        }
    }
    last
}

/// Trivial-attribute and trivial-relation lexicons that drive category
/// classification.
///
/// Attribute lines are either a bare adjective (trivial for every noun) or an
/// `adjective noun` pair. Relation lines are relation keys such as `left`,
/// `next_to` or a verb phrase like `covering`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub trivial_attributes: BTreeSet<String>,
    pub trivial_relations: BTreeSet<String>,
}

const DEFAULT_TRIVIAL_ATTRIBUTES: &str = include_str!("../assets/trivial_attributes.txt");
const DEFAULT_TRIVIAL_RELATIONS: &str = include_str!("../assets/trivial_relations.txt");

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            trivial_attributes: parse_lexicon_lines(DEFAULT_TRIVIAL_ATTRIBUTES),
            trivial_relations: parse_lexicon_lines(DEFAULT_TRIVIAL_RELATIONS),
        }
    }
}

fn parse_lexicon_lines(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .collect()
}

impl Lexicon {
    pub fn from_strs(attributes: &str, relations: &str) -> Self {
        Self {
            trivial_attributes: parse_lexicon_lines(attributes),
            trivial_relations: parse_lexicon_lines(relations),
        }
    }

    /// Loads either file from disk, falling back to the built-in list for a
    /// `None` path.
    pub fn load(attributes: Option<&Path>, relations: Option<&Path>) -> Result<Self> {
        let read = |p: &Path| {
            std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read lexicon {}: {e}", p.display())))
        };
        let attributes = match attributes {
            Some(p) => read(p)?,
            None => DEFAULT_TRIVIAL_ATTRIBUTES.to_string(),
        };
        let relations = match relations {
            Some(p) => read(p)?,
            None => DEFAULT_TRIVIAL_RELATIONS.to_string(),
        };
        Ok(Self::from_strs(&attributes, &relations))
    }

    pub fn is_trivial_attribute(&self, value: &str, noun: &str) -> bool {
        self.trivial_attributes.contains(value)
            || self.trivial_attributes.contains(&format!("{value} {noun}"))
    }

    pub fn is_trivial_relation(&self, key: &str) -> bool {
        self.trivial_relations.contains(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_plural_pairs() {
        for (plural, singular) in [
            ("dogs", "dog"),
            ("boxes", "box"),
            ("benches", "bench"),
            ("cherries", "cherry"),
            ("mice", "mouse"),
            ("glass", "glass"),
            ("bus", "bus"),
        ] {
            assert_eq!(singularize(plural), singular, "{plural}");
        }
        assert_eq!(pluralize_noun("hot dog"), "hot dogs");
        assert_eq!(pluralize("box"), "boxes");
        assert_eq!(pluralize("cherry"), "cherries");
        assert_eq!(pluralize("toy"), "toys");
    }

    #[test]
    fn labels_normalize_to_head_nouns() {
        assert_eq!(normalize_label("a red apple"), "apple");
        assert_eq!(normalize_label("Two Hot Dogs"), "hot dog");
        assert_eq!(normalize_label("'a bell,"), "bell");
        assert_eq!(normalize_label(""), "");
    }

    #[test]
    fn default_lexicon_is_seeded() {
        let lex = Lexicon::default();
        assert!(lex.is_trivial_attribute("white", "snow"));
        assert!(lex.is_trivial_attribute("red", "apple"));
        assert!(!lex.is_trivial_attribute("blue", "horse"));
        assert!(lex.is_trivial_relation("left"));
        assert!(!lex.is_trivial_relation("on_top"));
    }

    #[test]
    fn lexicon_lines_skip_comments() {
        let lex = Lexicon::from_strs("# header\n  Red   Apple  # trailing\n\nsmall\n", "left\n");
        assert!(lex.is_trivial_attribute("red", "apple"));
        assert!(lex.is_trivial_attribute("small", "anything"));
        assert_eq!(lex.trivial_attributes.len(), 2);
    }

    #[test]
    fn kinds() {
        assert_eq!(attribute_kind("blue"), AttributeKind::Color);
        assert_eq!(attribute_kind("oval"), AttributeKind::Shape);
        assert_eq!(attribute_kind("leather"), AttributeKind::Texture);
        assert_eq!(attribute_kind("fancy"), AttributeKind::Other);
    }
}
