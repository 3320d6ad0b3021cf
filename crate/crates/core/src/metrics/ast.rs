//! Recursive-descent parser for single assertion statements.
//!
//! Grammar (tokens from [`super::code_tokens`]):
//!
//! ```text
//! stmt    := expr [";"] EOF            (expr must be a call)
//! expr    := primary { "." name [ args ] | "[" expr "]" }
//! primary := literal | "-" number | name [ args ] | "(" expr ")"
//!          | "new" name { "." name } ( args | "[" "]" { "[" "]" } init )
//!          | init
//! init    := "{" [ expr { "," expr } ] "}"
//! args    := "(" [ expr { "," expr } ] ")"
//! ```

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LiteralKind {
    Int,
    Float,
    String,
    Char,
    Bool,
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssertionAst {
    MethodCall {
        name: String,
        receiver: Option<Box<AssertionAst>>,
        args: Vec<AssertionAst>,
    },
    Identifier(String),
    Literal { kind: LiteralKind, text: String },
    FieldAccess { base: Box<AssertionAst>, field: String },
    /// Array access `a[i]` is kept as a two-element init of base and index.
    ArrayInit(Vec<AssertionAst>),
}

impl AssertionAst {
    /// Node label used for subtree matching: kind plus method name or
    /// literal kind; identifier spellings and literal values are dropped.
    pub fn label(&self) -> String {
        match self {
            AssertionAst::MethodCall { name, .. } => format!("call:{name}"),
            AssertionAst::Identifier(_) => "id".into(),
            AssertionAst::Literal { kind, .. } => format!("lit:{kind:?}"),
            AssertionAst::FieldAccess { .. } => "field".into(),
            AssertionAst::ArrayInit(_) => "array".into(),
        }
    }

    /// Children in source order (receiver before arguments).
    pub fn children(&self) -> Vec<&AssertionAst> {
        match self {
            AssertionAst::MethodCall { receiver, args, .. } => receiver.iter().map(|r| &**r).chain(args).collect(),
            AssertionAst::FieldAccess { base, .. } => vec![base],
            AssertionAst::ArrayInit(items) => items.iter().collect(),
            AssertionAst::Identifier(_) | AssertionAst::Literal { .. } => Vec::new(),
        }
    }
}

impl fmt::Display for AssertionAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssertionAst::MethodCall { name, receiver, args } => {
                if let Some(r) = receiver {
                    write!(f, "{r}.")?;
                }
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            AssertionAst::Identifier(n) => f.write_str(n),
            AssertionAst::Literal { text, .. } => f.write_str(text),
            AssertionAst::FieldAccess { base, field } => write!(f, "{base}.{field}"),
            AssertionAst::ArrayInit(items) => {
                f.write_str("{")?;
                for (i, a) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str("}")
            }
        }
    }
}

pub fn parse_assertion(text: &str) -> Result<AssertionAst> {
    let tokens = super::code_tokens(text);
    let mut p = Parser { tokens: &tokens, pos: 0 };
    let root = p.expr()?;
    if p.peek() == Some(";") {
        p.pos += 1;
    }
    if p.pos < tokens.len() {
        return Err(p.error("trailing input"));
    }
    if !matches!(root, AssertionAst::MethodCall { .. }) {
        return Err(Error::Syntax { position: 0, message: "statement is not a method call".into() });
    }
    Ok(root)
}

struct Parser<'t> {
    tokens: &'t [String],
    pos: usize,
}

fn is_name(t: &str) -> bool {
    t.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_' || c == '$')
}

fn literal_kind(t: &str) -> Option<LiteralKind> {
    let first = t.chars().next()?;
    match t {
        "true" | "false" => return Some(LiteralKind::Bool),
        "null" => return Some(LiteralKind::Null),
        _ => {}
    }
    if first == '"' {
        Some(LiteralKind::String)
    } else if first == '\'' {
        Some(LiteralKind::Char)
    } else if first.is_ascii_digit() {
        let lower = t.to_ascii_lowercase();
        let hex = lower.starts_with("0x");
        let float = !hex && (lower.contains('.') || lower.contains('e') || lower.ends_with('f') || lower.ends_with('d'));
        Some(if float { LiteralKind::Float } else { LiteralKind::Int })
    } else {
        None
    }
}

impl<'t> Parser<'t> {
    fn peek(&self) -> Option<&'t str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn error(&self, message: &str) -> Error {
        let found = self.peek().map_or_else(|| "end of input".to_string(), |t| format!("'{t}'"));
        Error::Syntax { position: self.pos, message: format!("{message}, found {found}") }
    }

    fn expect(&mut self, t: &str) -> Result<()> {
        if self.peek() == Some(t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{t}'")))
        }
    }

    fn name(&mut self) -> Result<String> {
        match self.peek() {
            Some(t) if is_name(t) && literal_kind(t).is_none() => {
                self.pos += 1;
                Ok(t.to_string())
            }
            _ => Err(self.error("expected a name")),
        }
    }

    fn list(&mut self, open: &str, close: &str) -> Result<Vec<AssertionAst>> {
        self.expect(open)?;
        let mut items = Vec::new();
        if self.peek() == Some(close) {
            self.pos += 1;
            return Ok(items);
        }
        loop {
            items.push(self.expr()?);
            match self.peek() {
                Some(",") => self.pos += 1,
                Some(t) if t == close => {
                    self.pos += 1;
                    return Ok(items);
                }
                _ => return Err(self.error(&format!("expected ',' or '{close}'"))),
            }
        }
    }

    fn expr(&mut self) -> Result<AssertionAst> {
        let mut node = self.primary()?;
        loop {
            match self.peek() {
                Some(".") => {
                    self.pos += 1;
                    let name = self.name()?;
                    if self.peek() == Some("(") {
                        let args = self.list("(", ")")?;
                        node = AssertionAst::MethodCall { name, receiver: Some(Box::new(node)), args };
                    } else {
                        node = AssertionAst::FieldAccess { base: Box::new(node), field: name };
                    }
                }
                Some("[") => {
                    self.pos += 1;
                    let index = self.expr()?;
                    self.expect("]")?;
                    node = AssertionAst::ArrayInit(vec![node, index]);
                }
                _ => return Ok(node),
            }
        }
    }

    fn primary(&mut self) -> Result<AssertionAst> {
        let Some(t) = self.peek() else {
            return Err(self.error("expected an expression"));
        };
        if let Some(kind) = literal_kind(t) {
            self.pos += 1;
            return Ok(AssertionAst::Literal { kind, text: t.to_string() });
        }
        match t {
            "-" => {
                self.pos += 1;
                match self.peek().and_then(literal_kind) {
                    Some(kind @ (LiteralKind::Int | LiteralKind::Float)) => {
                        let text = format!("-{}", self.tokens[self.pos]);
                        self.pos += 1;
                        Ok(AssertionAst::Literal { kind, text })
                    }
                    _ => Err(self.error("expected a number after '-'")),
                }
            }
            "(" => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            "{" => Ok(AssertionAst::ArrayInit(self.list("{", "}")?)),
            "new" => {
                self.pos += 1;
                let mut ty = self.name()?;
                while self.peek() == Some(".") {
                    self.pos += 1;
                    ty = format!("{ty}.{}", self.name()?);
                }
                if self.peek() == Some("(") {
                    let args = self.list("(", ")")?;
                    return Ok(AssertionAst::MethodCall { name: format!("new {ty}"), receiver: None, args });
                }
                self.expect("[")?;
                self.expect("]")?;
                while self.peek() == Some("[") {
                    self.pos += 1;
                    self.expect("]")?;
                }
                Ok(AssertionAst::ArrayInit(self.list("{", "}")?))
            }
            _ if is_name(t) => {
                self.pos += 1;
                if self.peek() == Some("(") {
                    let args = self.list("(", ")")?;
                    Ok(AssertionAst::MethodCall { name: t.to_string(), receiver: None, args })
                } else {
                    Ok(AssertionAst::Identifier(t.to_string()))
                }
            }
            _ => Err(self.error("expected an expression")),
        }
    }
}
