//! Prompt decomposition: attributed objects, relations and a routing
//! category, produced either by the rule grammar or by parsing an LLM answer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BBox, Canvas, LayoutEntry, SceneLayout};
use crate::vocab::{self, AttributeKind, Lexicon};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attribute {
    pub kind: AttributeKind,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributedObject {
    /// Box caption, e.g. "a blue horse".
    pub phrase: String,
    /// Head noun, singular when a quantity was given.
    pub noun: String,
    pub attributes: Vec<Attribute>,
    pub count: u32,
}

impl AttributedObject {
    pub fn color(&self) -> Option<&str> {
        self.attribute(AttributeKind::Color)
    }

    pub fn attribute(&self, kind: AttributeKind) -> Option<&str> {
        self.attributes.iter().find(|a| a.kind == kind).map(|a| a.value.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRelation {
    Left,
    Right,
    Above,
    Below,
    OnTop,
    NextTo,
}

impl SpatialRelation {
    pub fn key(self) -> &'static str {
        match self {
            SpatialRelation::Left => "left",
            SpatialRelation::Right => "right",
            SpatialRelation::Above => "above",
            SpatialRelation::Below => "below",
            SpatialRelation::OnTop => "on_top",
            SpatialRelation::NextTo => "next_to",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Spatial(SpatialRelation),
    NonSpatial(String),
}

impl RelationKind {
    /// Lexicon key: the spatial key or the verb phrase.
    pub fn key(&self) -> &str {
        match self {
            RelationKind::Spatial(s) => s.key(),
            RelationKind::NonSpatial(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub kind: RelationKind,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    AttributeOnly,
    RelationOnly,
    Both,
    Simple,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::AttributeOnly, Category::RelationOnly, Category::Both, Category::Simple];

    /// Label used on the `Analysis:` line of agent answers.
    pub fn label(self) -> &'static str {
        match self {
            Category::AttributeOnly => "attribute-only",
            Category::RelationOnly => "relationship-only",
            Category::Both => "both",
            Category::Simple => "simple",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.trim().trim_end_matches('.').trim().to_lowercase();
        match label.as_str() {
            "attribute-only" | "attribute_only" | "attribute only" => Some(Category::AttributeOnly),
            "relationship-only" | "relation-only" | "relationship only" | "relation_only" => {
                Some(Category::RelationOnly)
            }
            "both" => Some(Category::Both),
            "simple" | "none" => Some(Category::Simple),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnalysis {
    pub raw_prompt: String,
    pub objects: Vec<AttributedObject>,
    pub relations: Vec<Relation>,
    pub category: Category,
}

impl PromptAnalysis {
    pub fn instance_count(&self) -> usize {
        self.objects.iter().map(|o| o.count as usize).sum()
    }

    pub fn has_spatial_relations(&self) -> bool {
        self.relations.iter().any(|r| matches!(r.kind, RelationKind::Spatial(_)))
    }

    /// Character ranges of the object's noun and attribute words inside the
    /// raw prompt. Words that do not occur are skipped.
    pub fn object_spans(&self, object: usize) -> Vec<(usize, usize)> {
        let Some(obj) = self.objects.get(object) else {
            return Vec::new();
        };
        let lower: Vec<char> = self.raw_prompt.to_lowercase().chars().collect();
        let mut spans = Vec::new();
        let words = obj
            .attributes
            .iter()
            .map(|a| a.value.as_str())
            .chain(std::iter::once(obj.noun.as_str()));
        for word in words {
            if let Some(start) = find_word(&lower, word) {
                spans.push((start, start + word.chars().count()));
            }
        }
        spans
    }
}

fn find_word(haystack: &[char], word: &str) -> Option<usize> {
    let needle: Vec<char> = word.chars().collect();
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| {
        haystack[i..i + needle.len()] == needle[..]
            && (i == 0 || !haystack[i - 1].is_alphanumeric())
    })
}

// ---------------------------------------------------------------------------
// Rule grammar

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Comma,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<Token>| {
        let w = word.trim_matches(|c| c == '-' || c == '\'').to_string();
        if !w.is_empty() {
            tokens.push(Token::Word(w));
        }
        word.clear();
    };
    for c in text.chars() {
        if c.is_alphanumeric() || c == '-' || c == '\'' {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut tokens);
            if c == ',' || c == ';' {
                tokens.push(Token::Comma);
            }
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

type MarkerPattern = (&'static [&'static str], Marker);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Marker {
    Spatial(SpatialRelation),
    Preposition,
}

/// Longest patterns first; `on` alone is the weakest spatial cue.
const MARKERS: &[MarkerPattern] = &[
    (&["on", "the", "left", "side", "of"], Marker::Spatial(SpatialRelation::Left)),
    (&["on", "the", "right", "side", "of"], Marker::Spatial(SpatialRelation::Right)),
    (&["on", "the", "left", "of"], Marker::Spatial(SpatialRelation::Left)),
    (&["on", "the", "right", "of"], Marker::Spatial(SpatialRelation::Right)),
    (&["to", "the", "left", "of"], Marker::Spatial(SpatialRelation::Left)),
    (&["to", "the", "right", "of"], Marker::Spatial(SpatialRelation::Right)),
    (&["on", "the", "top", "of"], Marker::Spatial(SpatialRelation::OnTop)),
    (&["in", "front", "of"], Marker::Preposition),
    (&["on", "top", "of"], Marker::Spatial(SpatialRelation::OnTop)),
    (&["left", "of"], Marker::Spatial(SpatialRelation::Left)),
    (&["right", "of"], Marker::Spatial(SpatialRelation::Right)),
    (&["next", "to"], Marker::Spatial(SpatialRelation::NextTo)),
    (&["atop"], Marker::Spatial(SpatialRelation::OnTop)),
    (&["above"], Marker::Spatial(SpatialRelation::Above)),
    (&["over"], Marker::Spatial(SpatialRelation::Above)),
    (&["below"], Marker::Spatial(SpatialRelation::Below)),
    (&["under"], Marker::Spatial(SpatialRelation::Below)),
    (&["underneath"], Marker::Spatial(SpatialRelation::Below)),
    (&["beneath"], Marker::Spatial(SpatialRelation::Below)),
    (&["beside"], Marker::Spatial(SpatialRelation::NextTo)),
    (&["near"], Marker::Spatial(SpatialRelation::NextTo)),
    (&["on"], Marker::Spatial(SpatialRelation::OnTop)),
    (&["behind"], Marker::Preposition),
    (&["inside"], Marker::Preposition),
    (&["in"], Marker::Preposition),
    (&["with"], Marker::Preposition),
    (&["at"], Marker::Preposition),
];

fn match_marker(words: &[Token], at: usize) -> Option<(usize, Marker)> {
    MARKERS.iter().find_map(|(pattern, marker)| {
        let matches = pattern.iter().enumerate().all(|(k, p)| {
            matches!(words.get(at + k), Some(Token::Word(w)) if w == p)
        });
        matches.then_some((pattern.len(), *marker))
    })
}

#[derive(Debug)]
enum Piece {
    Words(Vec<Token>),
    Link { kind: RelationKind, raw: String },
}

#[derive(Debug)]
enum NounPhrase {
    Object(AttributedObject),
    Pronoun,
}

fn has_content(tokens: &[Token]) -> bool {
    tokens.iter().any(|t| match t {
        Token::Word(w) => !vocab::is_determiner(w) && vocab::quantity(w).is_none() && w != "and",
        Token::Comma => false,
    })
}

fn join_words(tokens: &[Token]) -> String {
    tokens
        .iter()
        .filter_map(|t| match t {
            Token::Word(w) => Some(w.as_str()),
            Token::Comma => None,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits the token stream into noun-phrase groups separated by relation
/// markers.
fn split_pieces(tokens: Vec<Token>) -> Vec<Piece> {
    let tokens: Vec<Token> = tokens
        .into_iter()
        .filter(|t| !matches!(t, Token::Word(w) if vocab::is_filler(w)))
        .collect();
    let mut pieces = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Token::Word(w) = &tokens[i] {
            if vocab::is_gerund(w) && has_content(&current) {
                let verb = w.clone();
                i += 1;
                let (kind, raw) = match match_marker(&tokens, i) {
                    Some((len, Marker::Spatial(s))) => {
                        let raw = format!("{verb} {}", join_words(&tokens[i..i + len]));
                        i += len;
                        (RelationKind::Spatial(s), raw)
                    }
                    Some((len, Marker::Preposition)) => {
                        let phrase = format!("{verb} {}", join_words(&tokens[i..i + len]));
                        i += len;
                        (RelationKind::NonSpatial(phrase.clone()), phrase)
                    }
                    None => (RelationKind::NonSpatial(verb.clone()), verb),
                };
                pieces.push(Piece::Words(std::mem::take(&mut current)));
                pieces.push(Piece::Link { kind, raw });
                continue;
            }
            if let Some((len, marker)) = match_marker(&tokens, i) {
                let raw = join_words(&tokens[i..i + len]);
                let kind = match marker {
                    Marker::Spatial(s) => RelationKind::Spatial(s),
                    Marker::Preposition => RelationKind::NonSpatial(raw.clone()),
                };
                pieces.push(Piece::Words(std::mem::take(&mut current)));
                pieces.push(Piece::Link { kind, raw });
                i += len;
                continue;
            }
        }
        current.push(tokens[i].clone());
        i += 1;
    }
    pieces.push(Piece::Words(current));
    pieces
}

fn split_conjunction(tokens: &[Token]) -> Vec<Vec<String>> {
    let mut groups = Vec::new();
    let mut current = Vec::new();
    for t in tokens {
        match t {
            Token::Word(w) if w == "and" => groups.push(std::mem::take(&mut current)),
            Token::Comma => groups.push(std::mem::take(&mut current)),
            Token::Word(w) => current.push(w.clone()),
        }
    }
    groups.push(current);
    groups.into_iter().filter(|g| !g.is_empty()).collect()
}

/// Parses one noun phrase: optional determiners and quantity, adjectives,
/// then a (possibly compound) head noun.
fn parse_noun_phrase(words: &[String]) -> Option<NounPhrase> {
    let mut count = 1;
    let mut start = 0;
    while start < words.len() {
        let w = words[start].as_str();
        if vocab::is_determiner(w) {
            start += 1;
        } else if let Some(n) = vocab::quantity(w) {
            count = n;
            start += 1;
            if words.get(start).map(String::as_str) == Some("of") {
                start += 1;
            }
        } else {
            break;
        }
    }
    let rest = &words[start..];
    let (last, body) = rest.split_last()?;
    if rest.len() == 1 && vocab::is_pronoun(last) {
        return Some(NounPhrase::Pronoun);
    }
    let last = if count > 1 { vocab::singularize(last) } else { last.clone() };
    let (noun, adjectives) = match body.split_last() {
        Some((prev, head)) if vocab::is_compound(prev, &vocab::singularize(&last)) => {
            (format!("{prev} {last}"), head)
        }
        _ => (last, body),
    };
    let attributes: Vec<Attribute> = adjectives
        .iter()
        .filter(|w| w.as_str() != "very")
        .map(|w| Attribute { kind: vocab::attribute_kind(w), value: w.clone() })
        .collect();
    let mut caption_words: Vec<&str> = attributes.iter().map(|a| a.value.as_str()).collect();
    caption_words.push(&noun);
    let body = caption_words.join(" ");
    let phrase = format!("{} {body}", vocab::indefinite_article(&body));
    Some(NounPhrase::Object(AttributedObject { phrase, noun, attributes, count }))
}

/// Attributes and head noun re-extracted from a box caption. Falls back to
/// the last word when the grammar cannot read it.
pub fn object_from_caption(caption: &str) -> AttributedObject {
    let words: Vec<String> = tokenize(caption)
        .into_iter()
        .filter_map(|t| match t {
            Token::Word(w) => Some(w),
            Token::Comma => None,
        })
        .collect();
    let phrase = caption.trim().to_string();
    let lower = phrase.to_lowercase();
    match parse_noun_phrase(&words) {
        Some(NounPhrase::Object(obj)) if lower.contains(&obj.noun) => AttributedObject {
            phrase,
            noun: obj.noun,
            attributes: obj.attributes,
            count: 1,
        },
        _ => AttributedObject {
            noun: words.last().cloned().unwrap_or_else(|| lower.clone()),
            phrase,
            attributes: Vec::new(),
            count: 1,
        },
    }
}

/// Decomposes a prompt with the template grammar.
pub fn decompose_rule_based(prompt: &str, lexicon: &Lexicon) -> Result<PromptAnalysis> {
    let unparseable = || Error::UnparseablePrompt(prompt.to_string());
    if prompt.trim().is_empty() {
        return Err(unparseable());
    }
    let pieces = split_pieces(tokenize(prompt));

    // Each group is the list of noun phrases between two relation markers.
    let mut groups: Vec<Vec<Option<usize>>> = Vec::new();
    let mut links: Vec<(RelationKind, String)> = Vec::new();
    let mut objects: Vec<AttributedObject> = Vec::new();
    for piece in pieces {
        match piece {
            Piece::Words(tokens) => {
                let mut group = Vec::new();
                for words in split_conjunction(&tokens) {
                    match parse_noun_phrase(&words).ok_or_else(unparseable)? {
                        NounPhrase::Object(obj) => {
                            objects.push(obj);
                            group.push(Some(objects.len() - 1));
                        }
                        NounPhrase::Pronoun => group.push(None),
                    }
                }
                groups.push(group);
            }
            Piece::Link { kind, raw } => links.push((kind, raw)),
        }
    }
    if objects.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(unparseable());
    }

    let mut relations = Vec::new();
    for (k, (kind, raw)) in links.into_iter().enumerate() {
        let subject = groups[k].last().copied().flatten();
        let object = groups[k + 1].first().copied().flatten();
        // Pronoun endpoints are dropped: no coreference resolution.
        if let (Some(subject), Some(object)) = (subject, object) {
            relations.push(Relation { subject, object, kind, raw_text: raw });
        }
    }

    let category = classify(&objects, &relations, lexicon);
    Ok(PromptAnalysis { raw_prompt: prompt.to_string(), objects, relations, category })
}

/// Analysis used when the grammar cannot read a prompt: the whole prompt as
/// one object, routed to plain text-to-image.
pub fn fallback_analysis(prompt: &str) -> PromptAnalysis {
    let mut object = object_from_caption(prompt);
    object.attributes.clear();
    PromptAnalysis {
        raw_prompt: prompt.to_string(),
        objects: vec![object],
        relations: Vec::new(),
        category: Category::Simple,
    }
}

pub fn classify(objects: &[AttributedObject], relations: &[Relation], lexicon: &Lexicon) -> Category {
    let complex_attributes = objects.iter().any(|o| {
        o.attributes.iter().any(|a| !lexicon.is_trivial_attribute(&a.value, &o.noun))
    });
    let complex_relations = relations.iter().any(|r| !lexicon.is_trivial_relation(r.kind.key()));
    match (complex_attributes, complex_relations) {
        (true, false) => Category::AttributeOnly,
        (false, true) => Category::RelationOnly,
        (true, true) => Category::Both,
        (false, false) => Category::Simple,
    }
}

// ---------------------------------------------------------------------------
// Agent prompt and response grammar

const TEMPLATE: &str = include_str!("../assets/agent_prompt.txt");
const TASK_TEXT: &str = include_str!("../assets/agent_task.txt");
const TOOLS_TEXT: &str = include_str!("../assets/agent_tools.txt");
const FORMAT_TEXT: &str = include_str!("../assets/agent_format.txt");
const EXAMPLES_TEXT: &str = include_str!("../assets/incontext_examples.txt");

/// One in-context question/answer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextExample {
    pub caption: String,
    /// Answer text exactly as stored (`Analysis:` and `Objects:` lines).
    pub answer: String,
}

/// The five built-in in-context examples.
pub fn default_examples() -> Vec<InContextExample> {
    EXAMPLES_TEXT
        .split("\n---\n")
        .filter_map(|block| {
            let block = block.trim();
            let (first, answer) = block.split_once('\n')?;
            let caption = first.strip_prefix("Caption:")?.trim().to_string();
            Some(InContextExample { caption, answer: answer.trim().to_string() })
        })
        .collect()
}

fn render_example(index: usize, example: &InContextExample, canvas: Canvas) -> String {
    // Answers are re-serialized so the model sees well-formed tuples.
    let answer = match parse_agent_response(&example.answer, canvas) {
        Ok(parsed) => format_answer(parsed.analysis.category, &parsed.layout),
        Err(_) => example.answer.clone(),
    };
    let answer = answer.replacen("\nObjects:", "\n\nObjects:", 1);
    format!("Q{n}:\n\nCaption: {}\n\nA{n}:\n\n{answer}\n\n", example.caption, n = index + 1)
}

/// Builds the full agent prompt: task, tool library, decomposition
/// instructions, in-context examples and the caption to complete.
pub fn build_agent_prompt(prompt: &str, examples: &[InContextExample]) -> String {
    let canvas = Canvas::default();
    let examples: String =
        examples.iter().enumerate().map(|(i, e)| render_example(i, e, canvas)).collect();
    TEMPLATE
        .replace("{TASK}", TASK_TEXT.trim_end())
        .replace("{TOOLS}", TOOLS_TEXT.trim_end())
        .replace("{FORMAT}", FORMAT_TEXT.trim_end())
        .replace("{EXAMPLES}", &examples)
        .replace("{CAPTION}", prompt.trim())
}

/// Serializes a layout into the answer grammar.
pub fn format_answer(category: Category, layout: &SceneLayout) -> String {
    let tuples: Vec<String> = layout
        .entries
        .iter()
        .map(|e| {
            let quote = if e.caption.contains('\'') { '"' } else { '\'' };
            format!("({quote}{}{quote}, {})", e.caption, e.bbox)
        })
        .collect();
    format!("Analysis: {}.\nObjects: [{}]", category.label(), tuples.join(", "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub analysis: PromptAnalysis,
    pub layout: SceneLayout,
    pub warnings: Vec<String>,
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(Error::MalformedResponse(format!(
                "expected {c:?} at offset {} near {:?}",
                self.pos,
                self.text[self.pos..].chars().take(20).collect::<String>()
            )))
        }
    }

    fn integer(&mut self) -> Result<i64> {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        let len = rest
            .char_indices()
            .take_while(|(i, c)| c.is_ascii_digit() || (*i == 0 && (*c == '-' || *c == '+')))
            .count();
        let digits = &rest[..len];
        let value = digits.parse::<i64>().map_err(|_| {
            Error::MalformedResponse(format!(
                "expected integer coordinate near {:?}",
                rest.chars().take(20).collect::<String>()
            ))
        })?;
        self.pos += len;
        self.skip_ws();
        if matches!(self.peek(), Some('.' | 'e' | 'E')) {
            return Err(Error::MalformedResponse(format!("non-integer coordinate after {digits}")));
        }
        Ok(value)
    }

    /// Reads a quoted caption up to the box that follows it. A missing
    /// closing quote is tolerated and reported.
    fn caption(&mut self, warnings: &mut Vec<String>) -> Result<String> {
        self.skip_ws();
        let quote = match self.peek() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(Error::MalformedResponse("expected quoted object name".into())),
        };
        self.pos += 1;
        let rest = &self.text[self.pos..];
        let bracket = rest
            .find('[')
            .ok_or_else(|| Error::MalformedResponse("object name without a box".into()))?;
        let head = rest[..bracket].trim_end();
        let head = head
            .strip_suffix(',')
            .ok_or_else(|| Error::MalformedResponse(format!("expected ',' after {head:?}")))?
            .trim_end();
        let caption = match head.strip_suffix(quote) {
            Some(c) => c,
            None => {
                warnings.push(format!("missing closing quote after object name {head:?}"));
                head
            }
        };
        self.pos += bracket;
        Ok(caption.trim().to_string())
    }
}

fn clamp_span(start: i64, len: i64, limit: u32) -> (u32, u32) {
    let limit = i64::from(limit);
    let mut lo = start.clamp(0, limit);
    let mut hi = (start + len).clamp(0, limit);
    if hi <= lo {
        lo = lo.min(limit - 1);
        hi = lo + 1;
    }
    (lo as u32, (hi - lo) as u32)
}

/// Parses an agent answer (`Analysis:` line plus `Objects:` tuple list).
/// Boxes beyond the canvas are clamped with a warning; repeated captions are
/// merged into one object with several instances.
pub fn parse_agent_response(text: &str, canvas: Canvas) -> Result<ParsedResponse> {
    let analysis_line = text
        .lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("Analysis:"))
        .ok_or_else(|| Error::MalformedResponse("missing Analysis: line".into()))?;
    let category = Category::from_label(analysis_line).ok_or_else(|| {
        Error::MalformedResponse(format!("unknown analysis label {:?}", analysis_line.trim()))
    })?;
    let objects_at = text
        .find("Objects:")
        .ok_or_else(|| Error::MalformedResponse("missing Objects: line".into()))?;

    let mut warnings = Vec::new();
    let mut cursor = Cursor { text, pos: objects_at + "Objects:".len() };
    let mut tuples: Vec<(String, [i64; 4])> = Vec::new();
    cursor.expect('[')?;
    cursor.skip_ws();
    if cursor.peek() != Some(']') {
        loop {
            cursor.expect('(')?;
            let caption = cursor.caption(&mut warnings)?;
            cursor.expect('[')?;
            let mut coords = [0i64; 4];
            for (k, c) in coords.iter_mut().enumerate() {
                if k > 0 {
                    cursor.expect(',')?;
                }
                *c = cursor.integer()?;
            }
            cursor.expect(']')?;
            cursor.expect(')')?;
            tuples.push((caption, coords));
            cursor.skip_ws();
            match cursor.peek() {
                Some(',') => cursor.pos += 1,
                Some(']') => break,
                _ => return Err(Error::MalformedResponse("unterminated object list".into())),
            }
        }
    }
    if tuples.is_empty() && category != Category::Simple {
        return Err(Error::MalformedResponse(format!("empty object list for {category}")));
    }

    let mut objects: Vec<AttributedObject> = Vec::new();
    let mut layout = SceneLayout::new(canvas);
    for (caption, [x, y, w, h]) in tuples {
        if caption.is_empty() {
            return Err(Error::MalformedResponse("empty object name".into()));
        }
        if w <= 0 || h <= 0 {
            return Err(Error::NegativeBoxSize { caption, w, h });
        }
        let (cx, cw) = clamp_span(x, w, canvas.width);
        let (cy, ch) = clamp_span(y, h, canvas.height);
        let bbox = BBox::new(cx, cy, cw, ch);
        if (i64::from(cx), i64::from(cy), i64::from(cw), i64::from(ch)) != (x, y, w, h) {
            warnings.push(format!(
                "box for {caption:?} [{x}, {y}, {w}, {h}] clamped to {bbox} on {}x{} canvas",
                canvas.width, canvas.height
            ));
        }
        let object_ref = match objects.iter().position(|o| o.phrase == caption) {
            Some(i) => {
                objects[i].count += 1;
                i
            }
            None => {
                objects.push(object_from_caption(&caption));
                objects.len() - 1
            }
        };
        layout.entries.push(LayoutEntry { object_ref, instance: 0, caption, bbox });
    }
    layout.renumber_instances();

    let raw_prompt = text
        .lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("Caption:"))
        .map(|c| c.trim().to_string())
        .unwrap_or_else(|| {
            objects.iter().map(|o| o.phrase.as_str()).collect::<Vec<_>>().join(" and ")
        });
    let analysis = PromptAnalysis { raw_prompt, objects, relations: Vec::new(), category };
    Ok(ParsedResponse { analysis, layout, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon::default()
    }

    fn attr(kind: AttributeKind, value: &str) -> Attribute {
        Attribute { kind, value: value.into() }
    }

    #[test]
    fn conjunction_of_colored_objects() {
        let a = decompose_rule_based("a blue horse and a brown vase", &lex()).unwrap();
        assert_eq!(a.objects.len(), 2);
        assert_eq!(a.objects[0].phrase, "a blue horse");
        assert_eq!(a.objects[0].attributes, vec![attr(AttributeKind::Color, "blue")]);
        assert_eq!(a.objects[1].phrase, "a brown vase");
        assert_eq!(a.objects[1].noun, "vase");
        assert!(a.relations.is_empty());
        assert_eq!(a.category, Category::AttributeOnly);
    }

    #[test]
    fn bare_noun_is_simple() {
        let a = decompose_rule_based("a horse", &lex()).unwrap();
        assert_eq!(a.objects.len(), 1);
        assert!(a.objects[0].attributes.is_empty());
        assert!(a.relations.is_empty());
        assert_eq!(a.category, Category::Simple);
    }

    #[test]
    fn apple_on_plate_is_relation_only() {
        let a = decompose_rule_based("The red apple was on top of the plate", &lex()).unwrap();
        assert_eq!(a.objects[0].phrase, "a red apple");
        assert_eq!(a.objects[0].attributes, vec![attr(AttributeKind::Color, "red")]);
        assert_eq!(a.objects[1].phrase, "a plate");
        assert_eq!(a.relations.len(), 1);
        let r = &a.relations[0];
        assert_eq!((r.subject, r.object), (0, 1));
        assert_eq!(r.kind, RelationKind::Spatial(SpatialRelation::OnTop));
        assert_eq!(a.category, Category::RelationOnly);
    }

    #[test]
    fn cat_collar_bell() {
        let a = decompose_rule_based("A cat is wearing a collar with a bell on it.", &lex()).unwrap();
        let phrases: Vec<&str> = a.objects.iter().map(|o| o.phrase.as_str()).collect();
        assert_eq!(phrases, ["a cat", "a collar", "a bell"]);
        assert_eq!(a.relations.len(), 2);
        assert_eq!(a.relations[0].kind, RelationKind::NonSpatial("wearing".into()));
        assert_eq!(a.relations[1].kind, RelationKind::NonSpatial("with".into()));
        assert_eq!(a.category, Category::RelationOnly);
    }

    #[test]
    fn bowl_on_placemat_is_both() {
        let a = decompose_rule_based("The blue bowl was on top of the white placemat.", &lex())
            .unwrap();
        assert_eq!(a.category, Category::Both);
    }

    #[test]
    fn quantities_and_compounds() {
        let a = decompose_rule_based("two hot dogs next to a red plate", &lex()).unwrap();
        assert_eq!(a.objects[0].noun, "hot dog");
        assert_eq!(a.objects[0].phrase, "a hot dog");
        assert_eq!(a.objects[0].count, 2);
        assert!(a.objects[0].attributes.is_empty());
        assert_eq!(a.relations[0].kind, RelationKind::Spatial(SpatialRelation::NextTo));
        let b = decompose_rule_based("3 apples and an orange", &lex()).unwrap();
        assert_eq!(b.objects[0].count, 3);
        assert_eq!(b.objects[0].noun, "apple");
        assert_eq!(b.objects[1].phrase, "an orange");
    }

    #[test]
    fn spatial_patterns() {
        let cases = [
            ("a cat on the left of a dog", SpatialRelation::Left),
            ("a cat to the right of a dog", SpatialRelation::Right),
            ("a lamp above a bed", SpatialRelation::Above),
            ("a ball below a chair", SpatialRelation::Below),
            ("a book on top of a desk", SpatialRelation::OnTop),
            ("a bench next to a tree", SpatialRelation::NextTo),
            ("a cat sitting on a sofa", SpatialRelation::OnTop),
        ];
        for (prompt, kind) in cases {
            let a = decompose_rule_based(prompt, &lex()).unwrap();
            assert_eq!(a.relations.len(), 1, "{prompt}");
            assert_eq!(a.relations[0].kind, RelationKind::Spatial(kind), "{prompt}");
            assert_eq!((a.relations[0].subject, a.relations[0].object), (0, 1));
        }
    }

    #[test]
    fn non_spatial_verbs() {
        let a = decompose_rule_based("a man holding an umbrella", &lex()).unwrap();
        assert_eq!(a.relations[0].kind, RelationKind::NonSpatial("holding".into()));
        let b = decompose_rule_based("a girl playing with a brown dog", &lex()).unwrap();
        assert_eq!(b.relations[0].kind, RelationKind::NonSpatial("playing with".into()));
        assert_eq!(b.category, Category::Both);
        // gerund before any noun is an adjective
        let c = decompose_rule_based("a sleeping cat", &lex()).unwrap();
        assert_eq!(c.objects[0].attributes, vec![attr(AttributeKind::Other, "sleeping")]);
    }

    #[test]
    fn chains_with_commas() {
        let a = decompose_rule_based("a red car, a blue bench, and a green tree", &lex()).unwrap();
        assert_eq!(a.objects.len(), 3);
        assert_eq!(a.objects[2].phrase, "a green tree");
    }

    #[test]
    fn unparseable_prompts() {
        for p in ["", "   ", "the", "on top of a table", "a cat on", "and and"] {
            assert!(
                matches!(decompose_rule_based(p, &lex()), Err(Error::UnparseablePrompt(_))),
                "{p:?}"
            );
        }
    }

    #[test]
    fn classify_rules() {
        let a = decompose_rule_based("a blue horse on the left of a brown vase", &lex()).unwrap();
        assert_eq!(a.category, Category::AttributeOnly);
        let b = decompose_rule_based("white snow and a tree", &lex()).unwrap();
        assert_eq!(b.category, Category::Simple);
    }

    #[test]
    fn classify_is_monotone_in_attributes() {
        let mut a = decompose_rule_based("a cat holding a ball", &lex()).unwrap();
        assert_eq!(a.category, Category::RelationOnly);
        a.objects[0].attributes.push(attr(AttributeKind::Color, "purple"));
        assert_eq!(classify(&a.objects, &a.relations, &lex()), Category::Both);
    }

    #[test]
    fn decomposition_is_deterministic() {
        let p = "three yellow bananas on top of a wooden table";
        assert_eq!(decompose_rule_based(p, &lex()).unwrap(), decompose_rule_based(p, &lex()).unwrap());
    }

    #[test]
    fn spans_locate_words() {
        let a = decompose_rule_based("a blue horse and a brown vase", &lex()).unwrap();
        assert_eq!(a.object_spans(0), vec![(2, 6), (7, 12)]);
        assert_eq!(a.object_spans(1), vec![(19, 24), (25, 29)]);
    }

    #[test]
    fn agent_prompt_structure() {
        let p = build_agent_prompt("a blue horse and a brown vase", &default_examples());
        assert!(p.starts_with("You are an intelligent research assistant."));
        assert!(p.ends_with("Caption: a blue horse and a brown vase"));
        assert!(p.contains("The images are of size 512x512."));
        assert!(p.contains("(object name, [top-left x coordinate, top-left y coordinate, box width, box height])"));
        assert_eq!(p.matches("Analysis:").count(), 5);
        assert!(p.contains("('a bell', [250, 320, 110, 100])"));

        let empty = build_agent_prompt("x", &[]);
        assert!(empty.ends_with("Caption: x"));
        assert!(!empty.contains("Analysis:"));
        let tail = "Please refer to the example below for the desired format.\n\nCaption: x";
        assert!(empty.ends_with(tail));
    }

    #[test]
    fn examples_embedded_in_prompt_parse_back() {
        let prompt = build_agent_prompt("x", &default_examples());
        let blocks: Vec<&str> = prompt.split("Analysis:").skip(1).collect();
        assert_eq!(blocks.len(), 5);
        for (block, example) in blocks.iter().zip(default_examples()) {
            let answer = format!("Analysis:{}", block.split("\n\nQ").next().unwrap());
            let answer = answer.split("\n\nCaption:").next().unwrap();
            let from_prompt = parse_agent_response(answer, Canvas::default()).unwrap();
            let direct = parse_agent_response(&example.answer, Canvas::default()).unwrap();
            assert_eq!(from_prompt.analysis.objects, direct.analysis.objects);
            assert_eq!(from_prompt.layout, direct.layout);
        }
    }

    #[test]
    fn parse_a1() {
        let text = "Analysis: attribute-only.\n\nObjects: [('a blue horse', [50, 70, 220, 300]), ('a brown vase', [300, 113, 150, 250])]";
        let parsed = parse_agent_response(text, Canvas::default()).unwrap();
        assert_eq!(parsed.analysis.category, Category::AttributeOnly);
        let boxes: Vec<(&str, BBox)> =
            parsed.layout.entries.iter().map(|e| (e.caption.as_str(), e.bbox)).collect();
        assert_eq!(
            boxes,
            [("a blue horse", BBox::new(50, 70, 220, 300)), ("a brown vase", BBox::new(300, 113, 150, 250))]
        );
        assert_eq!(parsed.analysis.objects[0].color(), Some("blue"));
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn empty_list_rejected_unless_simple() {
        let err = parse_agent_response("Analysis: both.\nObjects: []", Canvas::default());
        assert!(matches!(err, Err(Error::MalformedResponse(_))));
        let ok = parse_agent_response("Analysis: simple.\nObjects: []", Canvas::default()).unwrap();
        assert!(ok.analysis.objects.is_empty());
    }

    #[test]
    fn out_of_canvas_box_is_clamped() {
        let text = "Analysis: attribute-only.\nObjects: [('a red ball', [500, 500, 100, 100])]";
        let parsed = parse_agent_response(text, Canvas::default()).unwrap();
        assert_eq!(parsed.layout.entries[0].bbox, BBox::new(500, 500, 12, 12));
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn malformed_responses() {
        let cases = [
            "Objects: [('a cat', [1, 2, 3, 4])]",
            "Analysis: both.",
            "Analysis: maybe.\nObjects: [('a cat', [1, 2, 3, 4])]",
            "Analysis: both.\nObjects: [('a cat', [1, 2, 3])]",
            "Analysis: both.\nObjects: [('a cat', [1, 2, 3.5, 4])]",
            "Analysis: both.\nObjects: [('a cat', [1, 2, x, 4])]",
            "Analysis: both.\nObjects: [('a cat', [1, 2, 3, 4])",
            "Analysis: both.\nObjects: ('a cat', [1, 2, 3, 4])",
            "Analysis: both.\nObjects: [(a cat, [1, 2, 3, 4])]",
        ];
        for text in cases {
            assert!(
                matches!(parse_agent_response(text, Canvas::default()), Err(Error::MalformedResponse(_))),
                "{text:?}"
            );
        }
        let neg = "Analysis: both.\nObjects: [('a cat', [1, 2, -3, 4])]";
        assert!(matches!(
            parse_agent_response(neg, Canvas::default()),
            Err(Error::NegativeBoxSize { .. })
        ));
    }

    #[test]
    fn repeated_captions_merge_into_counts() {
        let text = "Analysis: attribute-only.\nObjects: [('a hot dog', [10, 10, 50, 50]), ('a plate', [100, 10, 50, 50]), ('a hot dog', [200, 10, 50, 50])]";
        let parsed = parse_agent_response(text, Canvas::default()).unwrap();
        assert_eq!(parsed.analysis.objects.len(), 2);
        assert_eq!(parsed.analysis.objects[0].count, 2);
        assert_eq!(parsed.layout.entries[2].object_ref, 0);
        assert_eq!(parsed.layout.entries[2].instance, 1);
    }

    fn arb_caption() -> impl Strategy<Value = String> {
        let adjectives = prop::sample::select(vec!["blue", "red", "oval", "wooden", "big", "shiny"]);
        let nouns = prop::sample::select(vec!["horse", "vase", "table", "hot dog", "apple", "cat"]);
        (prop::option::of(adjectives), nouns).prop_map(|(adj, noun)| {
            let body = match adj {
                Some(a) => format!("{a} {noun}"),
                None => noun.to_string(),
            };
            format!("{} {body}", vocab::indefinite_article(&body))
        })
    }

    proptest! {
        #[test]
        fn answer_round_trip(
            category in prop::sample::select(Category::ALL.to_vec()),
            items in prop::collection::vec((arb_caption(), 0u32..400, 0u32..400, 1u32..112, 1u32..112), 1..6),
        ) {
            let mut layout = SceneLayout::new(Canvas::default());
            let mut captions: Vec<String> = Vec::new();
            for (caption, x, y, w, h) in items {
                let object_ref = match captions.iter().position(|c| *c == caption) {
                    Some(i) => i,
                    None => { captions.push(caption.clone()); captions.len() - 1 }
                };
                layout.entries.push(LayoutEntry { object_ref, instance: 0, caption, bbox: BBox::new(x, y, w, h) });
            }
            layout.renumber_instances();
            let text = format_answer(category, &layout);
            let parsed = parse_agent_response(&text, Canvas::default()).unwrap();
            prop_assert_eq!(parsed.analysis.category, category);
            prop_assert_eq!(&parsed.layout, &layout);
            prop_assert!(parsed.warnings.is_empty());
            let again = format_answer(parsed.analysis.category, &parsed.layout);
            prop_assert_eq!(again, text);
        }

        #[test]
        fn objects_satisfy_invariants(prompt in "(a|two|the) (red|oval|wooden|big) (cat|dog|box)( and a (blue|round) (cup|ball))?") {
            let a = decompose_rule_based(&prompt, &Lexicon::default()).unwrap();
            for o in &a.objects {
                prop_assert!(!o.phrase.is_empty());
                prop_assert!(o.phrase.contains(&o.noun));
                prop_assert!(o.count >= 1);
                for attr in &o.attributes {
                    prop_assert_eq!(attr.value.trim().to_lowercase(), attr.value.clone());
                }
            }
        }
    }
}
