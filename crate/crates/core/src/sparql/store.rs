use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use super::term::{PrefixMap, RdfTerm, XSD};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub subject: RdfTerm,
    pub predicate: String,
    pub object: RdfTerm,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct FormatError {
    pub line: usize,
    pub message: String,
}

/// Immutable in-memory triple store with subject/predicate/object indexes.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    by_subject: HashMap<RdfTerm, Vec<usize>>,
    by_predicate: HashMap<String, Vec<usize>>,
    by_object: HashMap<RdfTerm, Vec<usize>>,
    prefixes: PrefixMap,
}

impl TripleStore {
    /// Builds a store from triples, dropping duplicates. Subjects must be IRIs
    /// or blank nodes.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>, prefixes: PrefixMap) -> Self {
        let set: BTreeSet<Triple> = triples.into_iter().collect();
        let triples: Vec<Triple> = set.into_iter().collect();
        let mut by_subject: HashMap<RdfTerm, Vec<usize>> = HashMap::new();
        let mut by_predicate: HashMap<String, Vec<usize>> = HashMap::new();
        let mut by_object: HashMap<RdfTerm, Vec<usize>> = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            by_subject.entry(t.subject.clone()).or_default().push(i);
            by_predicate.entry(t.predicate.clone()).or_default().push(i);
            by_object.entry(t.object.clone()).or_default().push(i);
        }
        Self {
            triples,
            by_subject,
            by_predicate,
            by_object,
            prefixes,
        }
    }

    pub fn empty() -> Self {
        Self::from_triples(Vec::new(), PrefixMap::standard())
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn prefixes(&self) -> &PrefixMap {
        &self.prefixes
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, s: &RdfTerm, p: &str, o: &RdfTerm) -> bool {
        self.by_subject.get(s).is_some_and(|idx| {
            idx.iter()
                .any(|&i| self.triples[i].predicate == p && &self.triples[i].object == o)
        })
    }

    /// Triples compatible with the bound positions; picks the smallest index.
    pub(crate) fn candidates<'a>(
        &'a self,
        s: Option<&RdfTerm>,
        p: Option<&str>,
        o: Option<&RdfTerm>,
    ) -> Box<dyn Iterator<Item = &'a Triple> + 'a> {
        const NONE: &[usize] = &[];
        let mut lists: Vec<&[usize]> = Vec::new();
        if let Some(s) = s {
            lists.push(self.by_subject.get(s).map_or(NONE, Vec::as_slice));
        }
        if let Some(p) = p {
            lists.push(self.by_predicate.get(p).map_or(NONE, Vec::as_slice));
        }
        if let Some(o) = o {
            lists.push(self.by_object.get(o).map_or(NONE, Vec::as_slice));
        }
        match lists.into_iter().min_by_key(|l| l.len()) {
            Some(list) => Box::new(list.iter().map(move |&i| &self.triples[i])),
            None => Box::new(self.triples.iter()),
        }
    }

    /// Every distinct term occurring in subject or object position, plus every predicate IRI.
    pub fn term_domain(&self) -> BTreeSet<RdfTerm> {
        let mut out = BTreeSet::new();
        for t in &self.triples {
            out.insert(t.subject.clone());
            out.insert(RdfTerm::iri(t.predicate.clone()));
            out.insert(t.object.clone());
        }
        out
    }

    /// Serializes back to the N-Triples subset accepted by [`load_ntriples`].
    pub fn to_ntriples(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&format!("{} <{}> {} .\n", t.subject, t.predicate, t.object));
        }
        out
    }
}

/// Parses the N-Triples subset: one `<s> <p> <o> .` statement per line, where
/// the subject may be `_:label`, and the object may be an IRI, a blank node or
/// a `"literal"` with optional `@lang` or `^^<datatype>`. Blank lines and
/// `#` comments are skipped.
pub fn load_ntriples(input: &str, prefixes: PrefixMap) -> Result<TripleStore, FormatError> {
    let mut triples = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: &str| FormatError {
            line: line_no,
            message: message.to_string(),
        };
        let mut cur = Cursor { rest: trimmed };
        let subject = match cur.term().map_err(|m| err(&m))? {
            t @ (RdfTerm::Iri { .. } | RdfTerm::BlankNode { .. }) => t,
            _ => return Err(err("subject must be an IRI or blank node")),
        };
        let predicate = match cur.term().map_err(|m| err(&m))? {
            RdfTerm::Iri { value } => value,
            _ => return Err(err("predicate must be an IRI")),
        };
        let object = cur.term().map_err(|m| err(&m))?;
        cur.skip_ws();
        if !cur.rest.starts_with('.') {
            return Err(err("expected '.' terminating the statement"));
        }
        cur.rest = &cur.rest[1..];
        cur.skip_ws();
        if !cur.rest.is_empty() && !cur.rest.starts_with('#') {
            return Err(err("unexpected content after '.'"));
        }
        triples.push(Triple {
            subject,
            predicate,
            object,
        });
    }
    Ok(TripleStore::from_triples(triples, prefixes))
}

struct Cursor<'a> {
    rest: &'a str,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn term(&mut self) -> Result<RdfTerm, String> {
        self.skip_ws();
        if let Some(after) = self.rest.strip_prefix('<') {
            let end = after.find('>').ok_or("unterminated IRI")?;
            let iri = &after[..end];
            if iri.is_empty() || iri.contains(char::is_whitespace) {
                return Err("invalid IRI".into());
            }
            self.rest = &after[end + 1..];
            Ok(RdfTerm::iri(iri))
        } else if let Some(after) = self.rest.strip_prefix("_:") {
            let end = after
                .find(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
                .unwrap_or(after.len());
            if end == 0 {
                return Err("empty blank node label".into());
            }
            self.rest = &after[end..];
            Ok(RdfTerm::BlankNode {
                label: after[..end].to_string(),
            })
        } else if self.rest.starts_with('"') {
            let (lexical, consumed) = read_quoted(self.rest)?;
            self.rest = &self.rest[consumed..];
            if let Some(after) = self.rest.strip_prefix('@') {
                let end = after
                    .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
                    .unwrap_or(after.len());
                if end == 0 {
                    return Err("empty language tag".into());
                }
                self.rest = &after[end..];
                Ok(RdfTerm::lang_literal(lexical, &after[..end]))
            } else if let Some(after) = self.rest.strip_prefix("^^<") {
                let end = after.find('>').ok_or("unterminated datatype IRI")?;
                self.rest = &after[end + 1..];
                Ok(RdfTerm::typed_literal(lexical, &after[..end]))
            } else {
                Ok(RdfTerm::literal(lexical))
            }
        } else if self.rest.is_empty() {
            Err("unexpected end of line".into())
        } else {
            Err(format!(
                "unexpected token starting at {:?}",
                self.rest.chars().next().unwrap()
            ))
        }
    }
}

/// Reads a double-quoted string with N-Triples escapes; returns the unescaped
/// value and the number of bytes consumed including both quotes.
pub(crate) fn read_quoted(s: &str) -> Result<(String, usize), String> {
    let mut out = String::new();
    let mut chars = s.char_indices();
    chars.next();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Ok((out, i + 1)),
            '\\' => match chars.next() {
                Some((_, 'n')) => out.push('\n'),
                Some((_, 't')) => out.push('\t'),
                Some((_, 'r')) => out.push('\r'),
                Some((_, '"')) => out.push('"'),
                Some((_, '\\')) => out.push('\\'),
                Some((_, '\'')) => out.push('\''),
                _ => return Err("invalid escape in literal".into()),
            },
            c => out.push(c),
        }
    }
    Err("unterminated literal".into())
}

/// Whether `dt` is one of the numeric XSD datatypes.
pub(crate) fn is_numeric_datatype(dt: &str) -> bool {
    dt.strip_prefix(XSD).is_some_and(|local| {
        matches!(
            local,
            "integer"
                | "decimal"
                | "double"
                | "float"
                | "int"
                | "long"
                | "short"
                | "nonNegativeInteger"
                | "positiveInteger"
                | "negativeInteger"
                | "nonPositiveInteger"
                | "unsignedInt"
        )
    })
}
