//! Prompt template dialect: literals, `{{ name }}` slots and flat
//! `{% if name == "lit" %} .. {% else %} .. {% endif %}` blocks.
//!
//! Parsing is lossless. Every node keeps the exact source slice it came from,
//! so [`Template::serialize`] reproduces the input byte for byte even when
//! the whitespace inside tags is irregular.
//!
//! [`protect`] swaps every slot and conditional block for an opaque sentinel
//! (`⟦P0⟧`, `⟦P1⟧`, ...) so text rewriting operators only ever see natural
//! language; [`restore`] puts the fragments back and rejects rewrites that
//! lost or duplicated a sentinel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::TaskSpec;

pub const SENTINEL_OPEN: char = '⟦';
pub const SENTINEL_CLOSE: char = '⟧';

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbalanced tag at byte {offset}: {detail}")]
    UnbalancedTag { offset: usize, detail: String },
    #[error("unknown tag `{tag}` at byte {offset}")]
    UnknownTag { offset: usize, tag: String },
    #[error("bad condition `{condition}` at byte {offset}; expected name == \"literal\"")]
    BadCondition { offset: usize, condition: String },
    #[error("nested conditional at byte {offset}")]
    NestedConditional { offset: usize },
    #[error("bad variable `{inner}` at byte {offset}")]
    BadVariable { offset: usize, inner: String },
    #[error("missing binding for `{0}`")]
    MissingBinding(String),
    #[error("template text contains reserved sentinel characters")]
    ReservedCharacter,
    #[error("sentinel {0} missing from rewritten text")]
    SentinelMissing(String),
    #[error("sentinel {0} appears more than once in rewritten text")]
    SentinelDuplicated(String),
    #[error("rewritten text contains an unknown sentinel")]
    StraySentinel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Literal(String),
    Variable { name: String, raw: String },
    Conditional(Conditional),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conditional {
    pub var: String,
    pub literal: String,
    pub then: Vec<Node>,
    pub else_: Vec<Node>,
    /// Source text from the opening `{%` through the closing `%}` of `endif`.
    pub raw: String,
}

impl Node {
    pub fn raw(&self) -> &str {
        match self {
            Node::Literal(text) => text,
            Node::Variable { raw, .. } => raw,
            Node::Conditional(c) => &c.raw,
        }
    }
}

/// A parsed prompt template. Equality and ordering follow the raw text.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Template {
    raw: String,
    ast: Vec<Node>,
    placeholders: BTreeSet<String>,
}

impl PartialEq for Template {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}

impl Eq for Template {}

impl TryFrom<String> for Template {
    type Error = TemplateError;

    fn try_from(raw: String) -> Result<Self, Self::Error> {
        parse_template(&raw)
    }
}

impl From<Template> for String {
    fn from(t: Template) -> String {
        t.raw
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl std::str::FromStr for Template {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_template(s)
    }
}

impl Template {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn ast(&self) -> &[Node] {
        &self.ast
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Concatenation of the source slices of all nodes.
    pub fn serialize(&self) -> String {
        self.ast.iter().map(Node::raw).collect()
    }

    /// Whitespace-normalized text used for duplicate detection.
    pub fn normalized(&self) -> String {
        normalize(&self.raw)
    }

    pub fn id(&self) -> String {
        crate::hash::prompt_id(&self.raw)
    }
}

/// Trim and collapse every internal whitespace run to one space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

enum Tag {
    If { var: String, literal: String },
    Else,
    EndIf,
}

fn parse_tag(inner: &str, offset: usize) -> Result<Tag, TemplateError> {
    let trimmed = inner.trim();
    let (keyword, rest) = match trimmed.find(char::is_whitespace) {
        Some(split) => (&trimmed[..split], trimmed[split..].trim()),
        None => (trimmed, ""),
    };
    match keyword {
        "if" => parse_condition(rest, offset),
        "else" if rest.is_empty() => Ok(Tag::Else),
        "endif" if rest.is_empty() => Ok(Tag::EndIf),
        _ => Err(TemplateError::UnknownTag {
            offset,
            tag: trimmed.to_string(),
        }),
    }
}

fn parse_condition(condition: &str, offset: usize) -> Result<Tag, TemplateError> {
    let bad = || TemplateError::BadCondition {
        offset,
        condition: condition.to_string(),
    };
    let (lhs, rhs) = condition.split_once("==").ok_or_else(bad)?;
    let var = lhs.trim();
    let rhs = rhs.trim();
    if !is_identifier(var) || rhs.len() < 2 || !rhs.starts_with('"') || !rhs.ends_with('"') {
        return Err(bad());
    }
    let literal = &rhs[1..rhs.len() - 1];
    if literal.contains('"') {
        return Err(bad());
    }
    Ok(Tag::If {
        var: var.to_string(),
        literal: literal.to_string(),
    })
}

struct OpenBlock {
    start: usize,
    var: String,
    literal: String,
    then: Vec<Node>,
    else_: Option<Vec<Node>>,
}

impl OpenBlock {
    fn branch(&mut self) -> &mut Vec<Node> {
        match &mut self.else_ {
            Some(nodes) => nodes,
            None => &mut self.then,
        }
    }
}

pub fn parse_template(raw: &str) -> Result<Template, TemplateError> {
    let mut ast = Vec::new();
    let mut placeholders = BTreeSet::new();
    let mut open: Option<OpenBlock> = None;
    let mut pos = 0;

    fn push(ast: &mut Vec<Node>, open: &mut Option<OpenBlock>, node: Node) {
        match open {
            Some(block) => block.branch().push(node),
            None => ast.push(node),
        }
    }

    while pos < raw.len() {
        let next_var = raw[pos..].find("{{").map(|i| i + pos);
        let next_tag = raw[pos..].find("{%").map(|i| i + pos);
        let start = match (next_var, next_tag) {
            (None, None) => raw.len(),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (Some(a), Some(b)) => a.min(b),
        };
        if start > pos {
            push(&mut ast, &mut open, Node::Literal(raw[pos..start].to_string()));
        }
        if start == raw.len() {
            break;
        }

        if Some(start) == next_var {
            let close =
                raw[start + 2..]
                    .find("}}")
                    .map(|i| i + start + 2)
                    .ok_or_else(|| TemplateError::UnbalancedTag {
                        offset: start,
                        detail: "`{{` without `}}`".into(),
                    })?;
            let inner = &raw[start + 2..close];
            let name = inner.trim();
            if !is_identifier(name) {
                return Err(TemplateError::BadVariable {
                    offset: start,
                    inner: inner.to_string(),
                });
            }
            placeholders.insert(name.to_string());
            let node = Node::Variable {
                name: name.to_string(),
                raw: raw[start..close + 2].to_string(),
            };
            push(&mut ast, &mut open, node);
            pos = close + 2;
            continue;
        }

        let close = raw[start + 2..]
            .find("%}")
            .map(|i| i + start + 2)
            .ok_or_else(|| TemplateError::UnbalancedTag {
                offset: start,
                detail: "`{%` without `%}`".into(),
            })?;
        let end = close + 2;
        match parse_tag(&raw[start + 2..close], start)? {
            Tag::If { var, literal } => {
                if open.is_some() {
                    return Err(TemplateError::NestedConditional { offset: start });
                }
                placeholders.insert(var.clone());
                open = Some(OpenBlock {
                    start,
                    var,
                    literal,
                    then: Vec::new(),
                    else_: None,
                });
            }
            Tag::Else => match &mut open {
                Some(block) if block.else_.is_none() => block.else_ = Some(Vec::new()),
                Some(_) => {
                    return Err(TemplateError::UnbalancedTag {
                        offset: start,
                        detail: "second `else` in one block".into(),
                    })
                }
                None => {
                    return Err(TemplateError::UnbalancedTag {
                        offset: start,
                        detail: "`else` outside of `if`".into(),
                    })
                }
            },
            Tag::EndIf => {
                let block = open.take().ok_or_else(|| TemplateError::UnbalancedTag {
                    offset: start,
                    detail: "`endif` outside of `if`".into(),
                })?;
                ast.push(Node::Conditional(Conditional {
                    var: block.var,
                    literal: block.literal,
                    then: block.then,
                    else_: block.else_.unwrap_or_default(),
                    raw: raw[block.start..end].to_string(),
                }));
            }
        }
        pos = end;
    }

    if let Some(block) = open {
        return Err(TemplateError::UnbalancedTag {
            offset: block.start,
            detail: "missing `{% endif %}`".into(),
        });
    }

    Ok(Template {
        raw: raw.to_string(),
        ast,
        placeholders,
    })
}

pub fn render(t: &Template, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(t.raw.len());
    render_nodes(&t.ast, bindings, &mut out)?;
    Ok(out)
}

fn render_nodes(nodes: &[Node], bindings: &BTreeMap<String, String>, out: &mut String) -> Result<(), TemplateError> {
    for node in nodes {
        match node {
            Node::Literal(text) => out.push_str(text),
            Node::Variable { name, .. } => out.push_str(lookup(bindings, name)?),
            Node::Conditional(c) => {
                let branch = if lookup(bindings, &c.var)? == c.literal {
                    &c.then
                } else {
                    &c.else_
                };
                render_nodes(branch, bindings, out)?;
            }
        }
    }
    Ok(())
}

fn lookup<'a>(bindings: &'a BTreeMap<String, String>, name: &str) -> Result<&'a str, TemplateError> {
    bindings
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| TemplateError::MissingBinding(name.to_string()))
}

pub fn extract_placeholders(t: &Template) -> BTreeSet<String> {
    t.placeholders.clone()
}

/// Sentinel token to template fragment, in order of appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionMap {
    pub sentinels: Vec<(String, String)>,
}

impl ProtectionMap {
    pub fn is_empty(&self) -> bool {
        self.sentinels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sentinels.len()
    }
}

pub fn sentinel(index: usize) -> String {
    format!("{SENTINEL_OPEN}P{index}{SENTINEL_CLOSE}")
}

pub fn contains_sentinel_chars(text: &str) -> bool {
    text.contains([SENTINEL_OPEN, SENTINEL_CLOSE])
}

/// Replace every slot and every whole conditional block with a sentinel.
///
/// Fails only when the template already contains sentinel characters, since
/// the map could not be inverted unambiguously.
pub fn protect(t: &Template) -> Result<(String, ProtectionMap), TemplateError> {
    if contains_sentinel_chars(&t.raw) {
        return Err(TemplateError::ReservedCharacter);
    }
    let mut text = String::with_capacity(t.raw.len());
    let mut pmap = ProtectionMap::default();
    for node in &t.ast {
        match node {
            Node::Literal(literal) => text.push_str(literal),
            Node::Variable { raw, .. } | Node::Conditional(Conditional { raw, .. }) => {
                let token = sentinel(pmap.len());
                text.push_str(&token);
                pmap.sentinels.push((token, raw.clone()));
            }
        }
    }
    Ok((text, pmap))
}

/// Put protected fragments back into rewritten text and parse the result.
pub fn restore(text: &str, pmap: &ProtectionMap) -> Result<Template, TemplateError> {
    for (token, _) in &pmap.sentinels {
        match text.matches(token.as_str()).count() {
            0 => return Err(TemplateError::SentinelMissing(token.clone())),
            1 => {}
            _ => return Err(TemplateError::SentinelDuplicated(token.clone())),
        }
    }
    let mut restored = text.to_string();
    for (token, fragment) in &pmap.sentinels {
        restored = restored.replacen(token.as_str(), fragment, 1);
    }
    if contains_sentinel_chars(&restored) {
        return Err(TemplateError::StraySentinel);
    }
    parse_template(&restored)
}

/// Whether a template can be evaluated on a task: every slot names a known
/// field, all required slots are present, and no sentinel characters leaked
/// into the text.
pub fn validate_for_task(t: &Template, schema: &TaskSpec) -> bool {
    if contains_sentinel_chars(&t.raw) {
        return false;
    }
    let known = t
        .placeholders
        .iter()
        .all(|name| schema.input_fields.contains_key(name) || schema.control_fields.contains(name));
    known && schema.required_placeholders.is_subset(&t.placeholders)
}
