//! S-expression tree reader and writer.
//!
//! One tree per line. A leaf is a bare token, an internal node is
//! `(left right)`, and any node may carry an integer label prefix:
//!
//! ```text
//! 3:(2:(w1 w3) 1:w5)
//! ```
//!
//! parses to `{"label": 3, "left": {"label": 2, ...}, "right": ...}` with
//! leaves as `{"word": ...}` maps. Tokens may contain anything except
//! whitespace, parentheses and `:`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::host::HostValue;

/// Parses every non-empty line of `text` as one tree.
pub fn parse_trees(text: &str) -> Result<Vec<HostValue>> {
    let mut trees = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        trees.push(parse_line(line, i + 1)?);
    }
    Ok(trees)
}

/// Parses a single tree, reporting errors against line 1.
pub fn parse_tree(line: &str) -> Result<HostValue> {
    parse_line(line, 1)
}

/// Reads a tree file, one s-expression per line.
pub fn load_trees(path: &Path) -> Result<Vec<HostValue>> {
    parse_trees(&fs::read_to_string(path)?)
}

/// Renders a tree node back into its s-expression form.
pub fn format_tree(tree: &HostValue) -> Result<String> {
    let mut out = String::new();
    write_node(tree, &mut out)?;
    Ok(out)
}

/// Wraps a tree whose root carries a label into the `{"tree", "label"}`
/// example shape that root-only losses consume.
pub fn root_example(tree: &HostValue) -> Result<HostValue> {
    let label = tree
        .field("label")
        .map_err(|_| Error::Input("the root node carries no label".to_string()))?
        .as_int()?;
    Ok(HostValue::map(vec![("tree", tree.clone()), ("label", HostValue::Int(label))]))
}

fn write_node(node: &HostValue, out: &mut String) -> Result<()> {
    if let Ok(label) = node.field("label") {
        out.push_str(&label.as_int()?.to_string());
        out.push(':');
    }
    if let Ok(word) = node.field("word") {
        let w = word.as_str()?;
        if w.is_empty() || w.contains(|c: char| c.is_whitespace() || "():".contains(c)) {
            return Err(Error::Input(format!("word {w:?} cannot appear in an s-expression")));
        }
        out.push_str(w);
        return Ok(());
    }
    out.push('(');
    write_node(node.field("left")?, out)?;
    out.push(' ');
    write_node(node.field("right")?, out)?;
    out.push(')');
    Ok(())
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: String) -> Error {
        Error::Parse { line: self.line, message }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn bump(&mut self) {
        if let Some(c) = self.peek() {
            self.pos += c.len_utf8();
        }
    }

    fn skip_spaces(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace()) {
            self.bump();
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        let start = self.pos;
        while self.peek().is_some_and(|c| !c.is_whitespace() && !"():".contains(c)) {
            self.bump();
        }
        if self.pos == start {
            let found = self.peek().map_or("end of line".to_string(), |c| format!("{c:?}"));
            return Err(self.fail(format!("expected a token at column {}, found {found}", start + 1)));
        }
        Ok(&self.text[start..self.pos])
    }

    fn node(&mut self) -> Result<HostValue> {
        self.skip_spaces();
        let mut fields: Vec<(&str, HostValue)> = Vec::new();

        // A run of digits directly followed by ':' is this node's label.
        let rest = &self.text[self.pos..];
        let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 && rest[digits..].starts_with(':') {
            let label: i64 = rest[..digits]
                .parse()
                .map_err(|_| self.fail(format!("label {:?} does not fit", &rest[..digits])))?;
            fields.push(("label", HostValue::Int(label)));
            self.pos += digits + 1;
        }

        match self.peek() {
            Some('(') => {
                self.bump();
                let left = self.node()?;
                let right = self.node()?;
                self.skip_spaces();
                if self.peek() != Some(')') {
                    return Err(self.fail(format!(
                        "expected ')' at column {}; binary nodes take exactly two children",
                        self.pos + 1
                    )));
                }
                self.bump();
                fields.insert(0, ("right", right));
                fields.insert(0, ("left", left));
                Ok(HostValue::map(fields))
            }
            _ => {
                let word = self.token()?;
                fields.insert(0, ("word", HostValue::str(word)));
                Ok(HostValue::map(fields))
            }
        }
    }
}

fn parse_line(line: &str, line_no: usize) -> Result<HostValue> {
    let mut cursor = Cursor { text: line, pos: 0, line: line_no };
    let tree = cursor.node()?;
    cursor.skip_spaces();
    if cursor.pos != line.len() {
        return Err(cursor.fail(format!(
            "unexpected trailing input at column {}: {:?}",
            cursor.pos + 1,
            &line[cursor.pos..]
        )));
    }
    Ok(tree)
}
