//! Log template mining with a fixed-depth parse tree.
//!
//! Messages are masked (volatile values become the `<*>` wildcard), split on
//! whitespace, then routed through a tree keyed first by token count and then
//! by the leading tokens. Leaves hold candidate templates; a token-position
//! similarity score decides whether an incoming message merges into an
//! existing template (divergent positions become wildcards) or founds a new
//! one.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::ingest::LogRecord;

/// The wildcard token marking a variable slot.
pub const WILDCARD: &str = "<*>";

/// Reserved id for records whose content masked/tokenized to nothing.
pub const EMPTY_TEMPLATE_ID: TemplateId = TemplateId(0);

#[derive(Debug, Error)]
pub enum DrainError {
    #[error("invalid parse tree config: {0}")]
    InvalidConfig(String),
    #[error("mask rule {name}: bad pattern: {source}")]
    BadMaskRule {
        name: String,
        #[source]
        source: regex::Error,
    },
    #[error("cannot parse an empty message")]
    EmptyMessage,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A masking rule: occurrences of `pattern` in a message are replaced with
/// the wildcard before tokenization. Patterns must never match across
/// whitespace, which keeps the token count of the message unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRule {
    pub name: String,
    pub pattern: String,
}

impl MaskRule {
    pub fn new(name: impl Into<String>, pattern: impl Into<String>) -> Self {
        MaskRule {
            name: name.into(),
            pattern: pattern.into(),
        }
    }
}

/// The stock rules: IPv4 (with optional port), `0x` hex literals, `core.N`
/// ids, and bare decimal runs. Order matters; earlier rules consume text
/// before the catch-all number rule sees it.
pub fn default_mask_rules() -> Vec<MaskRule> {
    vec![
        MaskRule::new("ipv4_port", r"\b(?:\d{1,3}\.){3}\d{1,3}(?::\d+)?\b"),
        MaskRule::new("hex_literal", r"\b0[xX][0-9a-fA-F]+\b"),
        MaskRule::new("core_id", r"\bcore\.\d+\b"),
        MaskRule::new("number", r"\b\d+\b"),
    ]
}

/// Compiled mask rules applied ahead of tokenization.
#[derive(Debug, Clone)]
pub struct Masker {
    rules: Vec<(String, Regex)>,
}

impl Masker {
    pub fn new(rules: &[MaskRule]) -> Result<Self, DrainError> {
        let compiled = rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (r.name.clone(), re))
                    .map_err(|source| DrainError::BadMaskRule {
                        name: r.name.clone(),
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Masker { rules: compiled })
    }

    /// Apply every rule in order, then split on whitespace.
    pub fn tokenize_and_mask(&self, content: &str) -> Vec<String> {
        let mut masked = std::borrow::Cow::Borrowed(content);
        for (_, re) in &self.rules {
            if re.is_match(&masked) {
                masked = std::borrow::Cow::Owned(re.replace_all(&masked, WILDCARD).into_owned());
            }
        }
        masked.split_whitespace().map(str::to_string).collect()
    }
}

/// Parse tree shape and matching threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParseTreeConfig {
    /// Tree levels counting the token-count root and the leaf; `depth - 2`
    /// leading tokens act as routing keys.
    pub depth: usize,
    /// Minimum fraction of positionally-matching tokens for a merge.
    pub similarity_threshold: f64,
    /// Cap on children per internal node; overflow routes to the wildcard child.
    pub max_children: usize,
}

impl Default for ParseTreeConfig {
    fn default() -> Self {
        ParseTreeConfig {
            depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
        }
    }
}

impl ParseTreeConfig {
    pub fn validate(&self) -> Result<(), DrainError> {
        if self.depth < 3 {
            return Err(DrainError::InvalidConfig(format!(
                "depth must be at least 3, got {}",
                self.depth
            )));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(DrainError::InvalidConfig(format!(
                "similarity threshold must be in (0, 1], got {}",
                self.similarity_threshold
            )));
        }
        if self.max_children == 0 {
            return Err(DrainError::InvalidConfig(
                "max_children must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Stable template identifier, assigned in creation order starting at 1.
/// Id 0 is [`EMPTY_TEMPLATE_ID`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct TemplateId(pub u32);

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One slot of a template: a fixed literal or a variable position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TemplateToken {
    Literal(String),
    Wildcard,
}

impl TemplateToken {
    fn from_input(token: &str) -> Self {
        if token == WILDCARD {
            TemplateToken::Wildcard
        } else {
            TemplateToken::Literal(token.to_string())
        }
    }

    /// Positional match used by the similarity score: literals compare by
    /// string equality, a wildcard slot matches any incoming token.
    fn matches(&self, token: &str) -> bool {
        match self {
            TemplateToken::Literal(s) => s == token,
            TemplateToken::Wildcard => true,
        }
    }

    pub fn is_wildcard(&self) -> bool {
        matches!(self, TemplateToken::Wildcard)
    }
}

impl fmt::Display for TemplateToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateToken::Literal(s) => f.write_str(s),
            TemplateToken::Wildcard => f.write_str(WILDCARD),
        }
    }
}

/// A mined log event: the constant token skeleton plus its match count.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: TemplateId,
    pub tokens: Vec<TemplateToken>,
    pub match_count: u64,
}

impl Template {
    /// Space-joined token string with `<*>` wildcards, as dumped.
    pub fn render(&self) -> String {
        let parts: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        parts.join(" ")
    }

    /// Event form: wildcards dropped, whitespace collapsed.
    pub fn event_string(&self) -> String {
        let parts: Vec<&str> = self
            .tokens
            .iter()
            .filter_map(|t| match t {
                TemplateToken::Literal(s) => Some(s.as_str()),
                TemplateToken::Wildcard => None,
            })
            .collect();
        parts.join(" ")
    }

    pub fn wildcard_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_wildcard()).count()
    }
}

/// Per-record parse result: which template matched and the tokens that
/// occupied its wildcard slots, in position order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub line_no: usize,
    pub template_id: TemplateId,
    pub parameters: Vec<String>,
}

enum Node {
    Internal(HashMap<TemplateToken, Node>),
    Leaf(Vec<TemplateId>),
}

/// Mutable template mining state. Single-writer during a run; freeze (stop
/// parsing) before sharing across threads.
pub struct ParseTree {
    config: ParseTreeConfig,
    root: HashMap<usize, Node>,
    templates: Vec<Template>,
}

fn has_digit(token: &str) -> bool {
    token.bytes().any(|b| b.is_ascii_digit())
}

impl ParseTree {
    pub fn new(config: ParseTreeConfig) -> Result<Self, DrainError> {
        config.validate()?;
        Ok(ParseTree {
            config,
            root: HashMap::new(),
            templates: Vec::new(),
        })
    }

    pub fn config(&self) -> &ParseTreeConfig {
        &self.config
    }

    /// Templates in creation (id) order.
    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn template(&self, id: TemplateId) -> Option<&Template> {
        (id.0 >= 1)
            .then(|| self.templates.get(id.0 as usize - 1))
            .flatten()
    }

    fn template_mut(&mut self, id: TemplateId) -> &mut Template {
        &mut self.templates[id.0 as usize - 1]
    }

    /// Number of leading tokens used as routing keys for a message of `len` tokens.
    fn path_len(&self, len: usize) -> usize {
        (self.config.depth - 2).min(len)
    }

    /// Route a token list to its next template: merge into the most similar
    /// candidate at the leaf, or found a new template. Returns the template
    /// id and the tokens at the template's wildcard positions.
    pub fn parse(&mut self, tokens: &[String]) -> Result<(TemplateId, Vec<String>), DrainError> {
        if tokens.is_empty() {
            return Err(DrainError::EmptyMessage);
        }
        if let Some(id) = self.search(tokens) {
            let template = self.template_mut(id);
            for (slot, token) in template.tokens.iter_mut().zip(tokens) {
                if !slot.matches(token) {
                    *slot = TemplateToken::Wildcard;
                }
            }
            template.match_count += 1;
            let parameters = extract_parameters(&template.tokens, tokens);
            return Ok((id, parameters));
        }
        let id = self.insert(tokens);
        let template = self.template(id).expect("freshly inserted");
        let parameters = extract_parameters(&template.tokens, tokens);
        Ok((id, parameters))
    }

    /// Walk the tree for the best-matching existing template, if any clears
    /// the similarity threshold. Ties go to the lowest (oldest) id.
    fn search(&self, tokens: &[String]) -> Option<TemplateId> {
        let mut node = self.root.get(&tokens.len())?;
        for token in &tokens[..self.path_len(tokens.len())] {
            let children = match node {
                Node::Internal(children) => children,
                Node::Leaf(_) => break,
            };
            let literal = TemplateToken::Literal(token.clone());
            node = children
                .get(&literal)
                .or_else(|| children.get(&TemplateToken::Wildcard))?;
        }
        let Node::Leaf(candidates) = node else {
            return None;
        };
        let mut best: Option<(usize, TemplateId)> = None;
        for &id in candidates {
            let template = self.template(id).expect("leaf ids are live");
            let matched = template
                .tokens
                .iter()
                .zip(tokens)
                .filter(|(t, tok)| t.matches(tok))
                .count();
            let better = match best {
                None => true,
                Some((best_matched, best_id)) => {
                    matched > best_matched || (matched == best_matched && id < best_id)
                }
            };
            if better {
                best = Some((matched, id));
            }
        }
        let (matched, id) = best?;
        (matched as f64 / tokens.len() as f64 >= self.config.similarity_threshold).then_some(id)
    }

    /// Create a template for `tokens` and thread it into the tree, creating
    /// nodes as needed. Digit-bearing tokens and masked wildcards key the
    /// wildcard child, as does any token arriving at a full node.
    fn insert(&mut self, tokens: &[String]) -> TemplateId {
        let id = TemplateId(self.templates.len() as u32 + 1);
        self.templates.push(Template {
            id,
            tokens: tokens.iter().map(|t| TemplateToken::from_input(t)).collect(),
            match_count: 1,
        });
        let path_len = self.path_len(tokens.len());
        let mut node = self
            .root
            .entry(tokens.len())
            .or_insert_with(|| empty_node(0, path_len));
        for (level, token) in tokens[..path_len].iter().enumerate() {
            let children = match node {
                Node::Internal(children) => children,
                Node::Leaf(_) => unreachable!("leaf before the routing path is consumed"),
            };
            let literal = TemplateToken::Literal(token.clone());
            let key = if token == WILDCARD || has_digit(token) {
                TemplateToken::Wildcard
            } else if children.contains_key(&literal) {
                literal
            } else if children.len() >= self.config.max_children {
                // Full node: new tokens collapse onto the wildcard child.
                TemplateToken::Wildcard
            } else {
                literal
            };
            node = children
                .entry(key)
                .or_insert_with(|| empty_node(level + 1, path_len));
        }
        match node {
            Node::Leaf(ids) => ids.push(id),
            Node::Internal(_) => unreachable!("routing path must end at a leaf"),
        }
        id
    }
}

fn empty_node(level: usize, path_len: usize) -> Node {
    if level >= path_len {
        Node::Leaf(Vec::new())
    } else {
        Node::Internal(HashMap::new())
    }
}

fn extract_parameters(template: &[TemplateToken], tokens: &[String]) -> Vec<String> {
    template
        .iter()
        .zip(tokens)
        .filter(|(t, _)| t.is_wildcard())
        .map(|(_, tok)| tok.clone())
        .collect()
}

/// Frozen id-to-template lookup for rendering after a mining run.
#[derive(Debug, Clone, Default)]
pub struct TemplateCatalog {
    by_id: HashMap<TemplateId, Template>,
}

impl TemplateCatalog {
    pub fn new(templates: &[Template]) -> Self {
        TemplateCatalog {
            by_id: templates.iter().map(|t| (t.id, t.clone())).collect(),
        }
    }

    pub fn get(&self, id: TemplateId) -> Option<&Template> {
        self.by_id.get(&id)
    }

    /// Event string for a template id; the reserved empty id renders as "".
    pub fn event_string(&self, id: TemplateId) -> Option<String> {
        if id == EMPTY_TEMPLATE_ID {
            return Some(String::new());
        }
        self.by_id.get(&id).map(Template::event_string)
    }
}

/// Output of a whole-corpus mining run.
#[derive(Debug)]
pub struct CorpusParse {
    /// One entry per input record, in input order.
    pub parsed: Vec<ParsedRecord>,
    /// Templates sorted by id.
    pub templates: Vec<Template>,
}

/// Mine templates over a record list. Records whose content masks/tokenizes
/// to nothing are quarantined under [`EMPTY_TEMPLATE_ID`] rather than failing
/// the run.
pub fn parse_corpus(
    records: &[LogRecord],
    config: &ParseTreeConfig,
    rules: &[MaskRule],
) -> Result<CorpusParse, DrainError> {
    let masker = Masker::new(rules)?;
    let mut tree = ParseTree::new(*config)?;
    let mut parsed = Vec::with_capacity(records.len());
    for record in records {
        let tokens = masker.tokenize_and_mask(&record.content);
        if tokens.is_empty() {
            parsed.push(ParsedRecord {
                line_no: record.line_no,
                template_id: EMPTY_TEMPLATE_ID,
                parameters: Vec::new(),
            });
            continue;
        }
        let (template_id, parameters) = tree.parse(&tokens)?;
        parsed.push(ParsedRecord {
            line_no: record.line_no,
            template_id,
            parameters,
        });
    }
    Ok(CorpusParse {
        parsed,
        templates: tree.templates,
    })
}

/// Template dump: `id<TAB>match_count<TAB>token string` per line, id order.
pub fn write_template_dump(templates: &[Template], path: &Path) -> Result<(), DrainError> {
    let mut out = String::new();
    for t in templates {
        out.push_str(&format!("{}\t{}\t{}\n", t.id, t.match_count, t.render()));
    }
    write_atomic(path, out.as_bytes()).map_err(|source| DrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parsed-record dump: one JSON record per line.
pub fn write_parsed_dump(parsed: &[ParsedRecord], path: &Path) -> Result<(), DrainError> {
    let mut out = String::new();
    for p in parsed {
        out.push_str(&serde_json::to_string(p).expect("parsed records serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|source| DrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
