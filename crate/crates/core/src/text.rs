//! Indentation-structured key/value text used by templates and scenarios.
//!
//! The format is a small, strict subset of YAML:
//!
//! * two-space indentation, no tabs;
//! * `key: value` pairs, or `key:` followed by a nested block;
//! * block lists written as `- value` items;
//! * inline flow collections `{ a: 1, b: [x, y] }` and `[x, y]`;
//! * `#` starts a comment when it begins a line or follows whitespace;
//! * scalars are bare words or double-quoted strings with `\"` and `\\` escapes.
//!
//! Duplicate keys are preserved in the tree so callers can report them with their own
//! error types.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub message: String,
}

impl SyntaxError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(String),
    List(Vec<Node>),
    Map(Vec<Entry>),
}

/// A value together with the (1-based) line it starts on.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub value: Value,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub node: Node,
}

impl Node {
    pub fn as_map(&self) -> Result<&[Entry], SyntaxError> {
        match &self.value {
            Value::Map(entries) => Ok(entries),
            _ => Err(SyntaxError::new(self.line, "expected a mapping")),
        }
    }

    pub fn as_list(&self) -> Result<&[Node], SyntaxError> {
        match &self.value {
            Value::List(items) => Ok(items),
            _ => Err(SyntaxError::new(self.line, "expected a list")),
        }
    }

    pub fn as_str(&self) -> Result<&str, SyntaxError> {
        match &self.value {
            Value::Scalar(s) => Ok(s),
            _ => Err(SyntaxError::new(self.line, "expected a scalar")),
        }
    }

    pub fn as_u64(&self) -> Result<u64, SyntaxError> {
        let s = self.as_str()?;
        s.parse().map_err(|_| SyntaxError::new(self.line, format!("expected a non-negative integer, got `{s}`")))
    }

    pub fn as_f64(&self) -> Result<f64, SyntaxError> {
        let s = self.as_str()?;
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(SyntaxError::new(self.line, format!("expected a decimal number, got `{s}`"))),
        }
    }

    pub fn as_bool(&self) -> Result<bool, SyntaxError> {
        match self.as_str()? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(SyntaxError::new(self.line, format!("expected true or false, got `{other}`"))),
        }
    }

    /// List of scalars, e.g. `[a, b]`.
    pub fn as_str_list(&self) -> Result<Vec<String>, SyntaxError> {
        self.as_list()?.iter().map(|n| n.as_str().map(str::to_owned)).collect()
    }
}

/// Strict accessor over a mapping: rejects duplicate keys and keys outside `allowed`.
pub struct MapReader<'a> {
    entries: &'a [Entry],
    line: usize,
}

impl<'a> MapReader<'a> {
    pub fn new(node: &'a Node, allowed: &[&str]) -> Result<Self, SyntaxError> {
        let entries = node.as_map()?;
        for (i, e) in entries.iter().enumerate() {
            if !allowed.contains(&e.key.as_str()) {
                return Err(SyntaxError::new(e.node.line, format!("unknown key `{}`", e.key)));
            }
            if entries[..i].iter().any(|p| p.key == e.key) {
                return Err(SyntaxError::new(e.node.line, format!("duplicate key `{}`", e.key)));
            }
        }
        Ok(Self { entries, line: node.line })
    }

    pub fn get(&self, key: &str) -> Option<&'a Node> {
        self.entries.iter().find(|e| e.key == key).map(|e| &e.node)
    }

    pub fn require(&self, key: &str) -> Result<&'a Node, SyntaxError> {
        self.get(key).ok_or_else(|| SyntaxError::new(self.line, format!("missing key `{key}`")))
    }
}

struct Line<'a> {
    number: usize,
    indent: usize,
    content: &'a str,
}

pub fn parse(text: &str) -> Result<Node, SyntaxError> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let stripped = strip_comment(raw).trim_end();
        if stripped.trim().is_empty() {
            continue;
        }
        let indent = stripped.len() - stripped.trim_start_matches(' ').len();
        if stripped[indent..].starts_with('\t') {
            return Err(SyntaxError::new(number, "tabs are not allowed in indentation"));
        }
        if !indent.is_multiple_of(2) {
            return Err(SyntaxError::new(number, "indentation must be a multiple of two spaces"));
        }
        lines.push(Line { number, indent, content: &stripped[indent..] });
    }
    if lines.is_empty() {
        return Ok(Node { value: Value::Map(Vec::new()), line: 1 });
    }
    if lines[0].indent != 0 {
        return Err(SyntaxError::new(lines[0].number, "document must start at column 0"));
    }
    let mut pos = 0;
    let node = parse_block(&lines, &mut pos, 0)?;
    if pos < lines.len() {
        return Err(SyntaxError::new(lines[pos].number, "unexpected indentation"));
    }
    Ok(node)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    let mut escaped = false;
    let mut prev_ws = true;
    for (i, c) in line.char_indices() {
        if in_quotes {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_quotes = false;
            }
        } else if c == '"' {
            in_quotes = true;
        } else if c == '#' && prev_ws {
            return &line[..i];
        }
        prev_ws = c.is_whitespace();
    }
    line
}

fn is_item(content: &str) -> bool {
    content == "-" || content.starts_with("- ")
}

fn parse_block(lines: &[Line<'_>], pos: &mut usize, indent: usize) -> Result<Node, SyntaxError> {
    let first = &lines[*pos];
    let start_line = first.number;
    if is_item(first.content) {
        let mut items = Vec::new();
        while *pos < lines.len() && lines[*pos].indent == indent {
            let line = &lines[*pos];
            if !is_item(line.content) {
                return Err(SyntaxError::new(line.number, "expected a list item"));
            }
            let rest = line.content[1..].trim();
            if rest.is_empty() {
                return Err(SyntaxError::new(line.number, "empty list item"));
            }
            items.push(parse_inline(rest, line.number)?);
            *pos += 1;
            if *pos < lines.len() && lines[*pos].indent > indent {
                return Err(SyntaxError::new(lines[*pos].number, "unexpected indentation"));
            }
        }
        return Ok(Node { value: Value::List(items), line: start_line });
    }

    let mut entries = Vec::new();
    while *pos < lines.len() && lines[*pos].indent == indent {
        let line = &lines[*pos];
        if is_item(line.content) {
            return Err(SyntaxError::new(line.number, "list item inside a mapping"));
        }
        let (key, rest) = split_key(line.content, line.number)?;
        *pos += 1;
        let node = if rest.is_empty() {
            match lines.get(*pos) {
                Some(next) if next.indent == indent + 2 => parse_block(lines, pos, indent + 2)?,
                Some(next) if next.indent > indent => {
                    return Err(SyntaxError::new(next.number, "nested block must be indented by two spaces"))
                }
                _ => return Err(SyntaxError::new(line.number, format!("key `{key}` has no value"))),
            }
        } else {
            if let Some(next) = lines.get(*pos) {
                if next.indent > indent {
                    return Err(SyntaxError::new(next.number, "unexpected indentation"));
                }
            }
            parse_inline(rest, line.number)?
        };
        entries.push(Entry { key: key.to_owned(), node });
    }
    Ok(Node { value: Value::Map(entries), line: start_line })
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn split_key(content: &str, line: usize) -> Result<(&str, &str), SyntaxError> {
    let colon = content.find(':').ok_or_else(|| SyntaxError::new(line, "expected `key: value`"))?;
    let key = &content[..colon];
    let rest = &content[colon + 1..];
    if !valid_key(key) {
        return Err(SyntaxError::new(line, format!("invalid key `{key}`")));
    }
    if !rest.is_empty() && !rest.starts_with(' ') {
        return Err(SyntaxError::new(line, "expected a space after `:`"));
    }
    Ok((key, rest.trim()))
}

fn parse_inline(text: &str, line: usize) -> Result<Node, SyntaxError> {
    if text.starts_with('{') || text.starts_with('[') {
        let mut p = FlowParser { chars: text.char_indices().peekable(), text, line };
        let node = p.value()?;
        p.skip_ws();
        if let Some((_, c)) = p.chars.peek() {
            return Err(SyntaxError::new(line, format!("unexpected `{c}` after flow collection")));
        }
        Ok(node)
    } else if text.starts_with('"') {
        let mut p = FlowParser { chars: text.char_indices().peekable(), text, line };
        let s = p.quoted()?;
        p.skip_ws();
        if p.chars.peek().is_some() {
            return Err(SyntaxError::new(line, "unexpected text after quoted string"));
        }
        Ok(Node { value: Value::Scalar(s), line })
    } else {
        Ok(Node { value: Value::Scalar(text.to_owned()), line })
    }
}

struct FlowParser<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    text: &'a str,
    line: usize,
}

impl FlowParser<'_> {
    fn err(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError::new(self.line, message)
    }

    fn skip_ws(&mut self) {
        while matches!(self.chars.peek(), Some((_, c)) if c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn expect(&mut self, want: char) -> Result<(), SyntaxError> {
        self.skip_ws();
        match self.chars.next() {
            Some((_, c)) if c == want => Ok(()),
            Some((_, c)) => Err(self.err(format!("expected `{want}`, found `{c}`"))),
            None => Err(self.err(format!("expected `{want}`, found end of line"))),
        }
    }

    fn value(&mut self) -> Result<Node, SyntaxError> {
        self.skip_ws();
        let line = self.line;
        match self.chars.peek().map(|&(_, c)| c) {
            Some('{') => {
                self.chars.next();
                let mut entries = Vec::new();
                self.skip_ws();
                if matches!(self.chars.peek(), Some((_, '}'))) {
                    self.chars.next();
                    return Ok(Node { value: Value::Map(entries), line });
                }
                loop {
                    let key = self.bare()?;
                    if !valid_key(&key) {
                        return Err(self.err(format!("invalid key `{key}`")));
                    }
                    self.expect(':')?;
                    let node = self.value()?;
                    entries.push(Entry { key, node });
                    self.skip_ws();
                    match self.chars.next() {
                        Some((_, ',')) => continue,
                        Some((_, '}')) => break,
                        _ => return Err(self.err("expected `,` or `}` in flow mapping")),
                    }
                }
                Ok(Node { value: Value::Map(entries), line })
            }
            Some('[') => {
                self.chars.next();
                let mut items = Vec::new();
                self.skip_ws();
                if matches!(self.chars.peek(), Some((_, ']'))) {
                    self.chars.next();
                    return Ok(Node { value: Value::List(items), line });
                }
                loop {
                    items.push(self.value()?);
                    self.skip_ws();
                    match self.chars.next() {
                        Some((_, ',')) => continue,
                        Some((_, ']')) => break,
                        _ => return Err(self.err("expected `,` or `]` in flow list")),
                    }
                }
                Ok(Node { value: Value::List(items), line })
            }
            Some('"') => Ok(Node { value: Value::Scalar(self.quoted()?), line }),
            Some(_) => {
                let s = self.bare()?;
                if s.is_empty() {
                    return Err(self.err("empty value in flow collection"));
                }
                Ok(Node { value: Value::Scalar(s), line })
            }
            None => Err(self.err("unexpected end of line")),
        }
    }

    fn bare(&mut self) -> Result<String, SyntaxError> {
        self.skip_ws();
        let start = match self.chars.peek() {
            Some(&(i, _)) => i,
            None => return Err(self.err("unexpected end of line")),
        };
        let mut end = start;
        while let Some(&(i, c)) = self.chars.peek() {
            if matches!(c, ',' | '}' | ']' | ':' | '{' | '[') {
                // `:` only terminates a bare word when followed by whitespace (keys).
                if c == ':' {
                    let next = self.text[i + 1..].chars().next();
                    if next.is_some_and(|n| !n.is_whitespace() && !matches!(n, ',' | '}' | ']')) {
                        self.chars.next();
                        end = i + 1;
                        continue;
                    }
                }
                break;
            }
            self.chars.next();
            end = i + c.len_utf8();
        }
        Ok(self.text[start..end].trim().to_owned())
    }

    fn quoted(&mut self) -> Result<String, SyntaxError> {
        self.expect('"')?;
        let mut out = String::new();
        loop {
            match self.chars.next() {
                Some((_, '"')) => return Ok(out),
                Some((_, '\\')) => match self.chars.next() {
                    Some((_, '"')) => out.push('"'),
                    Some((_, '\\')) => out.push('\\'),
                    Some((_, 'n')) => out.push('\n'),
                    _ => return Err(self.err("invalid escape in quoted string")),
                },
                Some((_, c)) => out.push(c),
                None => return Err(self.err("unterminated quoted string")),
            }
        }
    }
}

/// Renders a scalar, quoting it when a bare word would not parse back identically.
pub fn scalar(s: &str) -> String {
    let bare_ok = !s.is_empty()
        && s.trim() == s
        && !s.starts_with(['"', '{', '[', '-', '#'])
        && !s.contains([',', '{', '}', '[', ']', '"', '#', '\n', '\\'])
        && !s.contains(": ")
        && !s.ends_with(':');
    if bare_ok {
        s.to_owned()
    } else {
        let mut out = String::with_capacity(s.len() + 2);
        out.push('"');
        for c in s.chars() {
            match c {
                '"' => out.push_str("\\\""),
                '\\' => out.push_str("\\\\"),
                '\n' => out.push_str("\\n"),
                c => out.push(c),
            }
        }
        out.push('"');
        out
    }
}

/// Renders a list of scalars as an inline flow list.
pub fn flow_list<S: AsRef<str>>(items: &[S]) -> String {
    let mut out = String::from("[");
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{}", scalar(item.as_ref()));
    }
    out.push(']');
    out
}
