use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::store::read_quoted;
use super::term::{PrefixMap, RdfTerm, RDF_TYPE, XSD};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("syntax error at {line}:{column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternTerm {
    Var(String),
    Term(RdfTerm),
}

impl PatternTerm {
    pub fn var(&self) -> Option<&str> {
        match self {
            PatternTerm::Var(v) => Some(v),
            PatternTerm::Term(_) => None,
        }
    }
}

impl fmt::Display for PatternTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternTerm::Var(v) => write!(f, "?{v}"),
            PatternTerm::Term(t) => write!(f, "{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriplePattern {
    pub subject: PatternTerm,
    pub predicate: PatternTerm,
    pub object: PatternTerm,
}

impl TriplePattern {
    pub fn positions(&self) -> [&PatternTerm; 3] {
        [&self.subject, &self.predicate, &self.object]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EqualityFilter {
    pub var: String,
    pub value: RdfTerm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryForm {
    Select { vars: Vec<String>, distinct: bool },
    Ask,
}

/// A parsed query in the executable fragment: a basic graph pattern with
/// equality filters, projected by SELECT (optionally DISTINCT, with LIMIT) or
/// tested by ASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetQuery {
    pub form: QueryForm,
    pub patterns: Vec<TriplePattern>,
    pub filters: Vec<EqualityFilter>,
    pub limit: Option<usize>,
}

impl SubsetQuery {
    pub fn pattern_vars(&self) -> BTreeSet<&str> {
        self.patterns
            .iter()
            .flat_map(|p| p.positions())
            .filter_map(PatternTerm::var)
            .collect()
    }

    /// Renders back to query text with full IRIs.
    pub fn to_sparql(&self) -> String {
        let mut out = String::new();
        match &self.form {
            QueryForm::Select { vars, distinct } => {
                out.push_str("SELECT ");
                if *distinct {
                    out.push_str("DISTINCT ");
                }
                for v in vars {
                    out.push_str(&format!("?{v} "));
                }
                out.push_str("WHERE { ");
            }
            QueryForm::Ask => out.push_str("ASK { "),
        }
        for p in &self.patterns {
            out.push_str(&format!("{} {} {} . ", p.subject, p.predicate, p.object));
        }
        for f in &self.filters {
            out.push_str(&format!("FILTER(?{} = {}) ", f.var, f.value));
        }
        out.push('}');
        if let Some(n) = self.limit {
            out.push_str(&format!(" LIMIT {n}"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Var(String),
    IriRef(String),
    PName(String, String),
    Str(String),
    LangTag(String),
    Integer(String),
    Decimal(String),
    Caret2,
    Punct(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, SyntaxError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, column, message: &str| SyntaxError {
        line,
        column,
        message: message.to_string(),
    };
    let advance = |i: &mut usize, line: &mut usize, col: &mut usize, n: usize, chars: &[char]| {
        for _ in 0..n {
            if chars[*i] == '\n' {
                *line += 1;
                *col = 1;
            } else {
                *col += 1;
            }
            *i += 1;
        }
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            advance(&mut i, &mut line, &mut col, 1, &chars);
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                advance(&mut i, &mut line, &mut col, 1, &chars);
            }
            continue;
        }
        let (tl, tc) = (line, col);
        let is_name = |c: char| c.is_alphanumeric() || c == '_' || c == '-';
        let tok;
        let len;
        match c {
            '{' | '}' | '(' | ')' | '.' | '=' | '*' | ',' | ';' => {
                tok = Tok::Punct(c);
                len = 1;
            }
            '?' | '$' => {
                let mut j = i + 1;
                while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                if j == i + 1 {
                    return Err(err(tl, tc, "empty variable name"));
                }
                tok = Tok::Var(chars[i + 1..j].iter().collect());
                len = j - i;
            }
            '<' => {
                let mut j = i + 1;
                while j < chars.len() && chars[j] != '>' {
                    if chars[j].is_whitespace() {
                        return Err(err(tl, tc, "whitespace inside IRI"));
                    }
                    j += 1;
                }
                if j >= chars.len() {
                    return Err(err(tl, tc, "unterminated IRI"));
                }
                tok = Tok::IriRef(chars[i + 1..j].iter().collect());
                len = j + 1 - i;
            }
            '"' => {
                let rest: String = chars[i..].iter().collect();
                let (value, bytes) = read_quoted(&rest).map_err(|m| err(tl, tc, &m))?;
                tok = Tok::Str(value);
                len = rest[..bytes].chars().count();
            }
            '@' => {
                let mut j = i + 1;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '-') {
                    j += 1;
                }
                if j == i + 1 {
                    return Err(err(tl, tc, "empty language tag"));
                }
                tok = Tok::LangTag(chars[i + 1..j].iter().collect());
                len = j - i;
            }
            '^' if chars.get(i + 1) == Some(&'^') => {
                tok = Tok::Caret2;
                len = 2;
            }
            c if c.is_ascii_digit()
                || ((c == '-' || c == '+')
                    && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) =>
            {
                let mut j = i + 1;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                if j + 1 < chars.len() && chars[j] == '.' && chars[j + 1].is_ascii_digit() {
                    j += 1;
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    tok = Tok::Decimal(chars[i..j].iter().collect());
                } else {
                    tok = Tok::Integer(chars[i..j].iter().collect());
                }
                len = j - i;
            }
            c if is_name(c) || c == ':' => {
                let mut j = i;
                while j < chars.len() && (is_name(chars[j]) || chars[j] == ':' || chars[j] == '.') {
                    j += 1;
                }
                // a trailing '.' terminates the triple rather than belonging to the name
                while j > i && chars[j - 1] == '.' {
                    j -= 1;
                }
                let word: String = chars[i..j].iter().collect();
                tok = match word.split_once(':') {
                    Some((prefix, local)) => Tok::PName(prefix.to_string(), local.to_string()),
                    None => Tok::Word(word),
                };
                len = j - i;
            }
            other => return Err(err(tl, tc, &format!("unexpected character {other:?}"))),
        }
        advance(&mut i, &mut line, &mut col, len, &chars);
        out.push(Token {
            tok,
            line: tl,
            column: tc,
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    prefixes: PrefixMap,
    _base: &'a PrefixMap,
}

/// Parses the executable fragment. QNames resolve through `prefixes` plus any
/// `PREFIX` declarations in the query text; an unknown prefix is an error.
pub fn parse_subset(text: &str, prefixes: &PrefixMap) -> Result<SubsetQuery, SyntaxError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        prefixes: prefixes.clone(),
        _base: prefixes,
    };
    p.query()
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at(&self, t: &Token, message: impl Into<String>) -> SyntaxError {
        SyntaxError {
            line: t.line,
            column: t.column,
            message: message.into(),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn expect_punct(&mut self, c: char) -> Result<(), SyntaxError> {
        if self.peek().tok == Tok::Punct(c) {
            self.next();
            Ok(())
        } else {
            let t = self.peek().clone();
            Err(self.error_at(&t, format!("expected '{c}'")))
        }
    }

    fn query(&mut self) -> Result<SubsetQuery, SyntaxError> {
        while self.is_keyword("PREFIX") {
            self.next();
            let name_tok = self.next();
            let name = match &name_tok.tok {
                Tok::PName(prefix, local) if local.is_empty() => prefix.clone(),
                _ => return Err(self.error_at(&name_tok, "expected prefix name ending in ':'")),
            };
            let iri_tok = self.next();
            match iri_tok.tok {
                Tok::IriRef(iri) => self.prefixes.insert(name, iri),
                _ => return Err(self.error_at(&iri_tok, "expected <IRI> in PREFIX declaration")),
            }
        }
        let start = self.peek().clone();
        let mut var_tokens = Vec::new();
        let form = if self.is_keyword("SELECT") {
            self.next();
            let distinct = if self.is_keyword("DISTINCT") {
                self.next();
                true
            } else {
                false
            };
            let mut vars = Vec::new();
            while let Tok::Var(v) = &self.peek().tok {
                vars.push(v.clone());
                var_tokens.push(self.next());
            }
            if vars.is_empty() {
                let t = self.peek().clone();
                return Err(self.error_at(&t, "expected at least one projected variable"));
            }
            QueryForm::Select { vars, distinct }
        } else if self.is_keyword("ASK") {
            self.next();
            QueryForm::Ask
        } else {
            return Err(self.error_at(&start, "expected SELECT or ASK"));
        };
        if self.is_keyword("WHERE") {
            self.next();
        }
        let (patterns, filters, filter_tokens) = self.group()?;
        let limit = if self.is_keyword("LIMIT") {
            if form == QueryForm::Ask {
                let t = self.peek().clone();
                return Err(self.error_at(&t, "LIMIT is not allowed on ASK"));
            }
            self.next();
            let t = self.next();
            match &t.tok {
                Tok::Integer(n) => match n.parse::<usize>() {
                    Ok(n) if n >= 1 => Some(n),
                    _ => return Err(self.error_at(&t, "LIMIT must be a positive integer")),
                },
                _ => return Err(self.error_at(&t, "expected integer after LIMIT")),
            }
        } else {
            None
        };
        let end = self.peek().clone();
        if end.tok != Tok::Eof {
            return Err(self.error_at(&end, "unexpected trailing input"));
        }
        if patterns.is_empty() {
            return Err(self.error_at(&start, "empty graph pattern"));
        }
        let query = SubsetQuery {
            form,
            patterns,
            filters,
            limit,
        };
        let bound = query.pattern_vars();
        for t in var_tokens.iter().chain(filter_tokens.iter()) {
            if let Tok::Var(v) = &t.tok {
                if !bound.contains(v.as_str()) {
                    return Err(self.error_at(
                        t,
                        format!("variable ?{v} does not appear in any triple pattern"),
                    ));
                }
            }
        }
        Ok(query)
    }

    #[allow(clippy::type_complexity)]
    fn group(
        &mut self,
    ) -> Result<(Vec<TriplePattern>, Vec<EqualityFilter>, Vec<Token>), SyntaxError> {
        self.expect_punct('{')?;
        let mut patterns = Vec::new();
        let mut filters = Vec::new();
        let mut filter_tokens = Vec::new();
        loop {
            let t = self.peek().clone();
            match &t.tok {
                Tok::Punct('}') => {
                    self.next();
                    break;
                }
                Tok::Eof => {
                    return Err(self.error_at(&t, "unterminated group pattern, expected '}'"))
                }
                Tok::Word(w) if w.eq_ignore_ascii_case("FILTER") => {
                    self.next();
                    let (filter, var_tok) = self.filter()?;
                    filters.push(filter);
                    filter_tokens.push(var_tok);
                }
                _ => {
                    let subject = self.pattern_term(Position::Subject)?;
                    let predicate = self.pattern_term(Position::Predicate)?;
                    let object = self.pattern_term(Position::Object)?;
                    patterns.push(TriplePattern {
                        subject,
                        predicate,
                        object,
                    });
                }
            }
            if self.peek().tok == Tok::Punct('.') {
                self.next();
            }
        }
        Ok((patterns, filters, filter_tokens))
    }

    fn filter(&mut self) -> Result<(EqualityFilter, Token), SyntaxError> {
        self.expect_punct('(')?;
        let lhs_tok = self.peek().clone();
        let lhs = self.pattern_term(Position::Object)?;
        self.expect_punct('=')?;
        let rhs_tok = self.peek().clone();
        let rhs = self.pattern_term(Position::Object)?;
        self.expect_punct(')')?;
        match (lhs, rhs) {
            (PatternTerm::Var(var), PatternTerm::Term(value)) => {
                Ok((EqualityFilter { var, value }, lhs_tok))
            }
            (PatternTerm::Term(value), PatternTerm::Var(var)) => {
                Ok((EqualityFilter { var, value }, rhs_tok))
            }
            _ => Err(self.error_at(&lhs_tok, "FILTER must compare one variable with one term")),
        }
    }

    fn pattern_term(&mut self, position: Position) -> Result<PatternTerm, SyntaxError> {
        let t = self.next();
        let term = match &t.tok {
            Tok::Var(v) => return Ok(PatternTerm::Var(v.clone())),
            Tok::IriRef(iri) => {
                if iri.is_empty() {
                    return Err(self.error_at(&t, "empty IRI"));
                }
                RdfTerm::iri(iri.clone())
            }
            Tok::PName(prefix, local) => match self.prefixes.get(prefix) {
                Some(base) => RdfTerm::iri(format!("{base}{local}")),
                None => return Err(self.error_at(&t, format!("unknown prefix '{prefix}:'"))),
            },
            Tok::Word(w) if w == "a" && position == Position::Predicate => RdfTerm::iri(RDF_TYPE),
            Tok::Word(w) if w == "true" || w == "false" => {
                RdfTerm::typed_literal(w.clone(), format!("{XSD}boolean"))
            }
            Tok::Str(s) => {
                let lexical = s.clone();
                match self.peek().tok.clone() {
                    Tok::LangTag(lang) => {
                        self.next();
                        RdfTerm::lang_literal(lexical, lang)
                    }
                    Tok::Caret2 => {
                        self.next();
                        let dt_tok = self.next();
                        let dt = match &dt_tok.tok {
                            Tok::IriRef(iri) => iri.clone(),
                            Tok::PName(prefix, local) => match self.prefixes.get(prefix) {
                                Some(base) => format!("{base}{local}"),
                                None => {
                                    return Err(self
                                        .error_at(&dt_tok, format!("unknown prefix '{prefix}:'")))
                                }
                            },
                            _ => {
                                return Err(
                                    self.error_at(&dt_tok, "expected datatype IRI after '^^'")
                                )
                            }
                        };
                        RdfTerm::typed_literal(lexical, dt)
                    }
                    _ => RdfTerm::literal(lexical),
                }
            }
            Tok::Integer(n) => RdfTerm::typed_literal(n.clone(), format!("{XSD}integer")),
            Tok::Decimal(n) => RdfTerm::typed_literal(n.clone(), format!("{XSD}decimal")),
            Tok::Eof => return Err(self.error_at(&t, "incomplete triple pattern")),
            Tok::Punct(c) => {
                return Err(self.error_at(&t, format!("incomplete triple pattern near '{c}'")))
            }
            other => return Err(self.error_at(&t, format!("unexpected token {other:?}"))),
        };
        match position {
            Position::Subject if !term.is_iri() => {
                Err(self.error_at(&t, "subject must be a variable or IRI"))
            }
            Position::Predicate if !term.is_iri() => {
                Err(self.error_at(&t, "predicate must be a variable or IRI"))
            }
            _ => Ok(PatternTerm::Term(term)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Position {
    Subject,
    Predicate,
    Object,
}
