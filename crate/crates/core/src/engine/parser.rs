//! Lexer and recursive-descent parser for the shield language.
//!
//! The accepted surface is the ProbLog subset used by the shield listings:
//! one annotated disjunction over `action/1`, probabilistic `sensor/1` facts,
//! definite rules with `\+` negation and `\=` guards, and `%` comments.

use super::ShieldError;

/// Source position (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Const(String),
    Var(String),
}

impl Term {
    pub fn name(&self) -> &str {
        match self {
            Term::Const(s) | Term::Var(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub pred: String,
    pub args: Vec<Term>,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Literal {
    Pos(Atom),
    Neg(Atom),
    NotEq(Term, Term),
}

/// Probability placeholder of the form `action(i)` or `sensor_value(i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub kind: String,
    pub index: usize,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Clause {
    /// `ann::atom; ann::atom; ... .` with one or more branches; a single
    /// branch is an ordinary probabilistic fact.
    Annotated(Vec<(Annotation, Atom)>),
    Rule {
        head: Atom,
        body: Vec<Literal>,
    },
    Fact(Atom),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Var(String),
    Int(usize),
    DoubleColon,
    Neck,
    Semi,
    Comma,
    Dot,
    LParen,
    RParen,
    NotProvable,
    NotEqual,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) | Tok::Var(s) => s.clone(),
            Tok::Int(i) => i.to_string(),
            Tok::DoubleColon => "::".into(),
            Tok::Neck => ":-".into(),
            Tok::Semi => ";".into(),
            Tok::Comma => ",".into(),
            Tok::Dot => ".".into(),
            Tok::LParen => "(".into(),
            Tok::RParen => ")".into(),
            Tok::NotProvable => "\\+".into(),
            Tok::NotEqual => "\\=".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, ShieldError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1usize, 1usize);

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let pos = Pos { line, col };
        if c.is_whitespace() {
            bump!();
            continue;
        }
        if c == '%' {
            while let Some(&c) = chars.peek() {
                if c == '\n' {
                    break;
                }
                bump!();
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    s.push(c);
                    bump!();
                } else {
                    break;
                }
            }
            let first = s.chars().next().unwrap();
            let tok = if first.is_ascii_uppercase() || first == '_' {
                Tok::Var(s)
            } else {
                Tok::Ident(s)
            };
            out.push((tok, pos));
            continue;
        }
        if c.is_ascii_digit() {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_digit() {
                    s.push(c);
                    bump!();
                } else {
                    break;
                }
            }
            let n = s.parse().map_err(|_| ShieldError::Syntax {
                line: pos.line,
                col: pos.col,
                found: s.clone(),
                expected: "integer index".into(),
            })?;
            out.push((Tok::Int(n), pos));
            continue;
        }
        bump!();
        let tok = match c {
            ':' => match chars.peek() {
                Some(':') => {
                    bump!();
                    Tok::DoubleColon
                }
                Some('-') => {
                    bump!();
                    Tok::Neck
                }
                _ => return Err(syntax(pos, ":", "`::` or `:-`")),
            },
            '\\' => match chars.peek() {
                Some('+') => {
                    bump!();
                    Tok::NotProvable
                }
                Some('=') => {
                    bump!();
                    Tok::NotEqual
                }
                _ => return Err(syntax(pos, "\\", "`\\+` or `\\=`")),
            },
            ';' => Tok::Semi,
            ',' => Tok::Comma,
            '.' => Tok::Dot,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            other => return Err(syntax(pos, &other.to_string(), "a clause")),
        };
        out.push((tok, pos));
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

fn syntax(pos: Pos, found: &str, expected: &str) -> ShieldError {
    ShieldError::Syntax {
        line: pos.line,
        col: pos.col,
        found: found.to_string(),
        expected: expected.to_string(),
    }
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn next(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, expected: &str) -> Result<Pos, ShieldError> {
        let (tok, pos) = self.next();
        if tok == want {
            Ok(pos)
        } else {
            Err(syntax(pos, &tok.describe(), expected))
        }
    }

    fn error(&self, expected: &str) -> ShieldError {
        syntax(self.pos(), &self.peek().describe(), expected)
    }

    fn program(&mut self) -> Result<Vec<Clause>, ShieldError> {
        let mut clauses = Vec::new();
        while *self.peek() != Tok::Eof {
            clauses.push(self.clause()?);
        }
        Ok(clauses)
    }

    fn clause(&mut self) -> Result<Clause, ShieldError> {
        let first = self.atom()?;
        match self.peek() {
            Tok::DoubleColon => {
                let mut branches = Vec::new();
                let mut ann = annotation(first)?;
                loop {
                    self.expect(Tok::DoubleColon, "`::`")?;
                    let atom = self.atom()?;
                    branches.push((ann, atom));
                    match self.next() {
                        (Tok::Semi, _) => {
                            let next = self.atom()?;
                            ann = annotation(next)?;
                        }
                        (Tok::Dot, _) => break,
                        (tok, pos) => return Err(syntax(pos, &tok.describe(), "`;` or `.`")),
                    }
                }
                Ok(Clause::Annotated(branches))
            }
            Tok::Neck => {
                self.next();
                let mut body = vec![self.literal()?];
                loop {
                    match self.next() {
                        (Tok::Comma, _) => body.push(self.literal()?),
                        (Tok::Dot, _) => break,
                        (tok, pos) => return Err(syntax(pos, &tok.describe(), "`,` or `.`")),
                    }
                }
                Ok(Clause::Rule { head: first, body })
            }
            Tok::Dot => {
                self.next();
                Ok(Clause::Fact(first))
            }
            _ => Err(self.error("`::`, `:-` or `.`")),
        }
    }

    fn literal(&mut self) -> Result<Literal, ShieldError> {
        match self.peek().clone() {
            Tok::NotProvable => {
                self.next();
                Ok(Literal::Neg(self.atom()?))
            }
            Tok::Var(_) => {
                let lhs = self.term()?;
                self.expect(Tok::NotEqual, "`\\=`")?;
                let rhs = self.term()?;
                Ok(Literal::NotEq(lhs, rhs))
            }
            Tok::Ident(_) => {
                // `c \= X` is also a guard.
                if self.toks.get(self.at + 1).map(|t| &t.0) == Some(&Tok::NotEqual) {
                    let lhs = self.term()?;
                    self.next();
                    let rhs = self.term()?;
                    return Ok(Literal::NotEq(lhs, rhs));
                }
                Ok(Literal::Pos(self.atom()?))
            }
            _ => Err(self.error("a literal")),
        }
    }

    fn term(&mut self) -> Result<Term, ShieldError> {
        match self.next() {
            (Tok::Ident(s), _) => Ok(Term::Const(s)),
            (Tok::Var(s), _) => Ok(Term::Var(s)),
            (Tok::Int(i), _) => Ok(Term::Const(i.to_string())),
            (tok, pos) => Err(syntax(pos, &tok.describe(), "a term")),
        }
    }

    fn atom(&mut self) -> Result<Atom, ShieldError> {
        let (tok, pos) = self.next();
        let pred = match tok {
            Tok::Ident(s) => s,
            other => return Err(syntax(pos, &other.describe(), "a predicate name")),
        };
        let mut args = Vec::new();
        if *self.peek() == Tok::LParen {
            self.next();
            args.push(self.term()?);
            loop {
                match self.next() {
                    (Tok::Comma, _) => args.push(self.term()?),
                    (Tok::RParen, _) => break,
                    (tok, pos) => return Err(syntax(pos, &tok.describe(), "`,` or `)`")),
                }
            }
        }
        Ok(Atom { pred, args, pos })
    }
}

fn annotation(atom: Atom) -> Result<Annotation, ShieldError> {
    let index = match atom.args.as_slice() {
        [Term::Const(c)] => c.parse::<usize>().ok(),
        _ => None,
    };
    match index {
        Some(index) if atom.pred == "action" || atom.pred == "sensor_value" => Ok(Annotation {
            kind: atom.pred,
            index,
            pos: atom.pos,
        }),
        _ => Err(syntax(
            atom.pos,
            &atom.pred,
            "a probability placeholder `action(i)` or `sensor_value(i)`",
        )),
    }
}

/// Parses shield source text into clauses without grounding.
pub fn parse_clauses(text: &str) -> Result<Vec<Clause>, ShieldError> {
    let toks = lex(text)?;
    Parser { toks, at: 0 }.program()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rule_with_negation_and_guard() {
        let clauses = parse_clauses("u :- action(X), X\\=a0, \\+ s(b).").unwrap();
        let Clause::Rule { head, body } = &clauses[0] else {
            panic!("expected rule");
        };
        assert_eq!(head.pred, "u");
        assert_eq!(body.len(), 3);
        assert!(
            matches!(&body[1], Literal::NotEq(Term::Var(v), Term::Const(c)) if v == "X" && c == "a0")
        );
        assert!(matches!(&body[2], Literal::Neg(a) if a.pred == "s"));
    }

    #[test]
    fn comments_are_skipped() {
        let clauses = parse_clauses("% header\nfoo. % trailing\n").unwrap();
        assert_eq!(clauses.len(), 1);
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_clauses("a :- b\nc.").unwrap_err();
        match err {
            ShieldError::Syntax {
                line, col, found, ..
            } => {
                assert_eq!((line, col), (2, 1));
                assert_eq!(found, "c");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn annotation_must_be_placeholder() {
        assert!(matches!(
            parse_clauses("foo(0)::action(a)."),
            Err(ShieldError::Syntax { .. })
        ));
    }
}
