use std::collections::BTreeSet;

use super::{Condition, Literal, Op, PolicyError, PolicyRule, PolicySet, Scalar, StringPattern};
use crate::id::SpiffeIdPattern;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Int(i64),
    Sym(&'static str),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("'{w}'"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Sym(s) => format!("'{s}'"),
            Tok::Eof => "end of input".to_owned(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')
}

fn lex(src: &str) -> Result<Vec<Spanned>, PolicyError> {
    let mut out = Vec::new();
    let mut chars = src.chars().peekable();
    let (mut line, mut col) = (1usize, 1usize);
    let syntax = |line, col, expected: &str| PolicyError::SyntaxError {
        line,
        col,
        expected: expected.to_owned(),
    };

    while let Some(&c) = chars.peek() {
        let (start_line, start_col) = (line, col);
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars<'_>>| {
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        };
        match c {
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump(&mut chars);
                }
            }
            c if c.is_whitespace() => {
                bump(&mut chars);
            }
            '"' => {
                bump(&mut chars);
                let mut s = String::new();
                loop {
                    match bump(&mut chars) {
                        None | Some('\n') => {
                            return Err(syntax(start_line, start_col, "closing '\"'"))
                        }
                        Some('"') => break,
                        Some('\\') => match bump(&mut chars) {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            _ => return Err(syntax(line, col, "escape \\\" or \\\\")),
                        },
                        Some(c) => s.push(c),
                    }
                }
                out.push(Spanned {
                    tok: Tok::Str(s),
                    line: start_line,
                    col: start_col,
                });
            }
            '=' | '!' => {
                bump(&mut chars);
                if chars.peek() != Some(&'=') {
                    return Err(syntax(start_line, start_col, "'==' or '!='"));
                }
                bump(&mut chars);
                out.push(Spanned {
                    tok: Tok::Sym(if c == '=' { "==" } else { "!=" }),
                    line: start_line,
                    col: start_col,
                });
            }
            '{' | '}' | ',' | ';' | '[' | ']' => {
                bump(&mut chars);
                let sym = match c {
                    '{' => "{",
                    '}' => "}",
                    ',' => ",",
                    ';' => ";",
                    '[' => "[",
                    _ => "]",
                };
                out.push(Spanned {
                    tok: Tok::Sym(sym),
                    line: start_line,
                    col: start_col,
                });
            }
            c if c == '-' || c.is_ascii_digit() || is_word_char(c) => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if !is_word_char(c) {
                        break;
                    }
                    word.push(c);
                    bump(&mut chars);
                }
                let is_int = {
                    let digits = word.strip_prefix('-').unwrap_or(&word);
                    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
                };
                let tok = if is_int {
                    Tok::Int(
                        word.parse()
                            .map_err(|_| syntax(start_line, start_col, "integer in i64 range"))?,
                    )
                } else {
                    Tok::Word(word)
                };
                out.push(Spanned {
                    tok,
                    line: start_line,
                    col: start_col,
                });
            }
            _ => return Err(syntax(start_line, start_col, "a token")),
        }
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, PolicyError> {
        let t = self.peek();
        Err(PolicyError::SyntaxError {
            line: t.line,
            col: t.col,
            expected: format!("{expected}, found {}", t.tok.describe()),
        })
    }

    fn keyword(&mut self, kw: &str) -> Result<(), PolicyError> {
        match &self.peek().tok {
            Tok::Word(w) if w == kw => {
                self.next();
                Ok(())
            }
            _ => self.fail(&format!("'{kw}'")),
        }
    }

    fn symbol(&mut self, sym: &str) -> Result<(), PolicyError> {
        match &self.peek().tok {
            Tok::Sym(s) if *s == sym => {
                self.next();
                Ok(())
            }
            _ => self.fail(&format!("'{sym}'")),
        }
    }

    fn string(&mut self) -> Result<(String, usize, usize), PolicyError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Str(s) => {
                self.next();
                Ok((s, t.line, t.col))
            }
            _ => self.fail("string literal"),
        }
    }

    fn ident(&mut self) -> Result<String, PolicyError> {
        match &self.peek().tok {
            Tok::Word(w)
                if w.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_')
                    && !w.contains('.') =>
            {
                let w = w.clone();
                self.next();
                Ok(w)
            }
            _ => self.fail("rule identifier"),
        }
    }

    fn scalar(&mut self) -> Result<Scalar, PolicyError> {
        match self.peek().tok.clone() {
            Tok::Str(s) => {
                self.next();
                Ok(Scalar::Str(s))
            }
            Tok::Int(i) => {
                self.next();
                Ok(Scalar::Int(i))
            }
            _ => self.fail("string or integer literal"),
        }
    }

    fn condition(&mut self) -> Result<Condition, PolicyError> {
        let key_tok = self.peek().clone();
        let key = match key_tok.tok {
            Tok::Word(w)
                if w.bytes().all(|b| {
                    b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.'
                }) =>
            {
                self.next();
                w
            }
            _ => return self.fail("context key matching [a-z0-9_.]+"),
        };
        let op = match self.peek().tok.clone() {
            Tok::Sym("==") => Op::Eq,
            Tok::Sym("!=") => Op::Ne,
            Tok::Word(w) if w == "in" => Op::In,
            Tok::Word(w) if w == "before" => Op::Before,
            Tok::Word(w) if w == "after" => Op::After,
            _ => return self.fail("operator (==, !=, in, before, after)"),
        };
        self.next();
        let value = match op {
            Op::In => {
                self.symbol("[")?;
                let mut items = Vec::new();
                if !matches!(self.peek().tok, Tok::Sym("]")) {
                    items.push(self.scalar()?);
                    while matches!(self.peek().tok, Tok::Sym(",")) {
                        self.next();
                        items.push(self.scalar()?);
                    }
                }
                self.symbol("]")?;
                Literal::List(items)
            }
            Op::Before | Op::After => match self.peek().tok {
                Tok::Int(i) => {
                    self.next();
                    Literal::Scalar(Scalar::Int(i))
                }
                _ => return self.fail("integer timestamp"),
            },
            Op::Eq | Op::Ne => Literal::Scalar(self.scalar()?),
        };
        Ok(Condition { key, op, value })
    }

    fn rule(&mut self) -> Result<(PolicyRule, usize, usize), PolicyError> {
        let start = self.peek().clone();
        self.keyword("permit")?;
        let rule_id = self.ident()?;
        self.keyword("principal")?;
        let (principal_src, pl, pc) = self.string()?;
        let principal =
            SpiffeIdPattern::parse(&principal_src).map_err(|e| PolicyError::BadPattern {
                line: pl,
                col: pc,
                detail: format!("principal {principal_src:?}: {e}"),
            })?;
        self.keyword("action")?;
        let (action_src, al, ac) = self.string()?;
        let action =
            StringPattern::parse(&action_src).map_err(|detail| PolicyError::BadPattern {
                line: al,
                col: ac,
                detail: format!("action {action_src:?}: {detail}"),
            })?;
        if matches!(action, StringPattern::Prefix(_)) {
            return Err(PolicyError::BadPattern {
                line: al,
                col: ac,
                detail: format!("action {action_src:?}: prefix patterns apply to resources only"),
            });
        }
        self.keyword("resource")?;
        let (resource_src, rl, rc) = self.string()?;
        let resource =
            StringPattern::parse(&resource_src).map_err(|detail| PolicyError::BadPattern {
                line: rl,
                col: rc,
                detail: format!("resource {resource_src:?}: {detail}"),
            })?;
        let mut conditions = Vec::new();
        if matches!(&self.peek().tok, Tok::Word(w) if w == "when") {
            self.next();
            self.symbol("{")?;
            conditions.push(self.condition()?);
            while matches!(self.peek().tok, Tok::Sym(",")) {
                self.next();
                conditions.push(self.condition()?);
            }
            self.symbol("}")?;
        }
        self.symbol(";")?;
        Ok((
            PolicyRule {
                rule_id,
                principal,
                action,
                resource,
                conditions,
            },
            start.line,
            start.col,
        ))
    }
}

pub fn parse_policy(source: &str) -> Result<PolicySet, PolicyError> {
    let mut parser = Parser {
        toks: lex(source)?,
        pos: 0,
    };
    let mut rules = Vec::new();
    let mut ids = BTreeSet::new();
    let mut diagnostics = Vec::new();
    while parser.peek().tok != Tok::Eof {
        let (rule, line, col) = parser.rule()?;
        if !ids.insert(rule.rule_id.clone()) {
            return Err(PolicyError::DuplicateRuleId {
                rule_id: rule.rule_id,
                line,
                col,
            });
        }
        if rule.principal.trust_domain().is_none()
            && matches!(rule.principal.segments(), [crate::id::SegmentPattern::Rest])
        {
            diagnostics.push(format!(
                "{line}:{col}: rule {} applies to every identity in every trust domain",
                rule.rule_id
            ));
        }
        rules.push(rule);
    }
    Ok(PolicySet {
        rules,
        source: source.to_owned(),
        diagnostics,
    })
}
