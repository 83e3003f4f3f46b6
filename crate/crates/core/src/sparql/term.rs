use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const XSD: &str = "http://www.w3.org/2001/XMLSchema#";
pub const RDF_TYPE: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type";

/// An RDF term as it appears in stores, query patterns and result rows.
///
/// IRIs are always held in expanded form. `Boolean` is only produced as the
/// answer of an ASK query; boolean literals inside a store are ordinary
/// `xsd:boolean` literals.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RdfTerm {
    Iri {
        value: String,
    },
    Literal {
        lexical: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        datatype: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lang: Option<String>,
    },
    Boolean {
        value: bool,
    },
    BlankNode {
        label: String,
    },
}

impl RdfTerm {
    pub fn iri(value: impl Into<String>) -> Self {
        RdfTerm::Iri {
            value: value.into(),
        }
    }

    pub fn literal(lexical: impl Into<String>) -> Self {
        RdfTerm::Literal {
            lexical: lexical.into(),
            datatype: None,
            lang: None,
        }
    }

    pub fn typed_literal(lexical: impl Into<String>, datatype: impl Into<String>) -> Self {
        RdfTerm::Literal {
            lexical: lexical.into(),
            datatype: Some(datatype.into()),
            lang: None,
        }
    }

    pub fn lang_literal(lexical: impl Into<String>, lang: impl Into<String>) -> Self {
        RdfTerm::Literal {
            lexical: lexical.into(),
            datatype: None,
            lang: Some(lang.into()),
        }
    }

    pub fn as_iri(&self) -> Option<&str> {
        match self {
            RdfTerm::Iri { value } => Some(value),
            _ => None,
        }
    }

    pub fn is_iri(&self) -> bool {
        matches!(self, RdfTerm::Iri { .. })
    }

    /// Canonical N-Triples-style rendering, used for ordering and hashing.
    pub fn to_ntriples(&self) -> String {
        match self {
            RdfTerm::Iri { value } => format!("<{value}>"),
            RdfTerm::Literal {
                lexical,
                datatype,
                lang,
            } => {
                let mut out = format!("\"{}\"", escape_literal(lexical));
                if let Some(lang) = lang {
                    out.push('@');
                    out.push_str(lang);
                } else if let Some(dt) = datatype {
                    out.push_str("^^<");
                    out.push_str(dt);
                    out.push('>');
                }
                out
            }
            RdfTerm::Boolean { value } => value.to_string(),
            RdfTerm::BlankNode { label } => format!("_:{label}"),
        }
    }

    /// Compact rendering with IRIs abbreviated through `prefixes` when possible.
    pub fn to_compact(&self, prefixes: &PrefixMap) -> String {
        match self {
            RdfTerm::Iri { value } => prefixes
                .compact(value)
                .unwrap_or_else(|| format!("<{value}>")),
            RdfTerm::Literal {
                lexical,
                datatype,
                lang,
            } => {
                let mut out = format!("\"{}\"", escape_literal(lexical));
                if let Some(lang) = lang {
                    out.push('@');
                    out.push_str(lang);
                } else if let Some(dt) = datatype {
                    out.push_str("^^");
                    out.push_str(&prefixes.compact(dt).unwrap_or_else(|| format!("<{dt}>")));
                }
                out
            }
            other => other.to_ntriples(),
        }
    }
}

impl fmt::Display for RdfTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_ntriples())
    }
}

pub(crate) fn escape_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

/// Prefix name → IRI base. Ordered so that compaction is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixMap {
    entries: BTreeMap<String, String>,
}

impl PrefixMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// The prefixes conventionally predeclared by Wikidata endpoints, plus `toy:`.
    pub fn standard() -> Self {
        let mut map = Self::new();
        for (name, base) in [
            ("wd", "http://www.wikidata.org/entity/"),
            ("wdt", "http://www.wikidata.org/prop/direct/"),
            ("p", "http://www.wikidata.org/prop/"),
            ("ps", "http://www.wikidata.org/prop/statement/"),
            ("pq", "http://www.wikidata.org/prop/qualifier/"),
            ("rdf", "http://www.w3.org/1999/02/22-rdf-syntax-ns#"),
            ("rdfs", "http://www.w3.org/2000/01/rdf-schema#"),
            ("xsd", XSD),
            ("schema", "http://schema.org/"),
            ("toy", "http://example.org/toy/"),
        ] {
            map.insert(name, base);
        }
        map
    }

    pub fn insert(&mut self, name: impl Into<String>, base: impl Into<String>) {
        self.entries.insert(name.into(), base.into());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.entries.get(name).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn expand(&self, qname: &str) -> Option<String> {
        let (prefix, local) = qname.split_once(':')?;
        self.get(prefix).map(|base| format!("{base}{local}"))
    }

    /// Longest-base match whose remainder is a plain local name.
    pub fn compact(&self, iri: &str) -> Option<String> {
        self.entries
            .iter()
            .filter(|(_, base)| iri.len() > base.len() && iri.starts_with(base.as_str()))
            .filter(|(_, base)| is_plain_local(&iri[base.len()..]))
            .max_by_key(|(_, base)| base.len())
            .map(|(name, base)| format!("{name}:{}", &iri[base.len()..]))
    }
}

fn is_plain_local(local: &str) -> bool {
    !local.is_empty()
        && local
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-'))
}

/// The bindings produced by a SELECT, aligned with `vars`.
///
/// Cells are `None` only for results coming from remote endpoints that leave a
/// variable unbound; the embedded executor always binds every projected variable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solutions {
    pub vars: Vec<String>,
    pub rows: Vec<Vec<Option<RdfTerm>>>,
}

impl Solutions {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn first_term(&self) -> Option<&RdfTerm> {
        self.rows
            .first()
            .and_then(|row| row.iter().flatten().next())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryResult {
    Solutions(Solutions),
    Boolean { value: bool },
}

impl QueryResult {
    pub fn row_count(&self) -> usize {
        match self {
            QueryResult::Solutions(s) => s.len(),
            QueryResult::Boolean { .. } => 1,
        }
    }
}
