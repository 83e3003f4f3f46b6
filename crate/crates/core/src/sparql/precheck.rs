use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecheckCategory {
    Unbalanced,
    BadForm,
    EmptyBody,
}

impl fmt::Display for PrecheckCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecheckCategory::Unbalanced => "unbalanced",
            PrecheckCategory::BadForm => "bad-form",
            PrecheckCategory::EmptyBody => "empty-body",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{category}: {message}")]
pub struct PrecheckError {
    pub category: PrecheckCategory,
    pub message: String,
}

fn fail(category: PrecheckCategory, message: impl Into<String>) -> PrecheckError {
    PrecheckError {
        category,
        message: message.into(),
    }
}

/// Cheap structural validation for full-SPARQL read queries that the subset
/// parser does not cover: balanced delimiters and quotes, a SELECT or ASK form
/// (after optional PREFIX declarations), and a non-empty `{ }` body.
pub fn lexical_precheck(text: &str) -> Result<(), PrecheckError> {
    let cleaned = strip_comments_and_literals(text)?;

    let mut stack = Vec::new();
    for c in cleaned.chars() {
        match c {
            '{' | '(' | '[' => stack.push(c),
            '}' | ')' | ']' => {
                let open = match c {
                    '}' => '{',
                    ')' => '(',
                    _ => '[',
                };
                if stack.pop() != Some(open) {
                    return Err(fail(
                        PrecheckCategory::Unbalanced,
                        format!("unmatched '{c}'"),
                    ));
                }
            }
            _ => {}
        }
    }
    if let Some(open) = stack.pop() {
        return Err(fail(
            PrecheckCategory::Unbalanced,
            format!("unclosed '{open}'"),
        ));
    }

    let mut words = cleaned.split_whitespace();
    let mut first = words.next().unwrap_or("");
    if !first.eq_ignore_ascii_case("PREFIX") && !is_form(first) {
        return Err(fail(
            PrecheckCategory::BadForm,
            "query must start with SELECT, ASK or PREFIX",
        ));
    }
    while first.eq_ignore_ascii_case("PREFIX") {
        let _name = words.next();
        let _iri = words.next();
        first = words.next().unwrap_or("");
    }
    if !is_form(first) {
        return Err(fail(
            PrecheckCategory::BadForm,
            format!("expected SELECT or ASK, found {first:?}"),
        ));
    }

    let Some(open) = cleaned.find('{') else {
        return Err(fail(
            PrecheckCategory::EmptyBody,
            "missing '{ }' group pattern",
        ));
    };
    let mut depth = 0usize;
    let mut body_end = cleaned.len();
    for (i, c) in cleaned[open..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    body_end = open + i;
                    break;
                }
            }
            _ => {}
        }
    }
    if cleaned[open + 1..body_end].trim().is_empty() {
        return Err(fail(PrecheckCategory::EmptyBody, "group pattern is empty"));
    }
    Ok(())
}

fn is_form(word: &str) -> bool {
    let word = word.split('{').next().unwrap_or("");
    word.eq_ignore_ascii_case("SELECT") || word.eq_ignore_ascii_case("ASK")
}

/// Replaces string literals and IRIs by placeholders and drops comments so that
/// delimiters inside them are not counted.
fn strip_comments_and_literals(text: &str) -> Result<String, PrecheckError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' | '\'' => {
                let long = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
                let delim_len = if long { 3 } else { 1 };
                let mut j = i + delim_len;
                loop {
                    if j >= chars.len() {
                        return Err(fail(
                            PrecheckCategory::Unbalanced,
                            "unterminated string literal",
                        ));
                    }
                    if chars[j] == '\\' {
                        j += 2;
                        continue;
                    }
                    if chars[j] == c
                        && (!long || (chars.get(j + 1) == Some(&c) && chars.get(j + 2) == Some(&c)))
                    {
                        j += delim_len;
                        break;
                    }
                    if !long && chars[j] == '\n' {
                        return Err(fail(
                            PrecheckCategory::Unbalanced,
                            "unterminated string literal",
                        ));
                    }
                    j += 1;
                }
                out.push_str("\"\"");
                i = j;
            }
            '<' => {
                let end = chars[i + 1..].iter().position(|&d| {
                    d == '>' || d.is_whitespace() || d == '"' || d == '{' || d == '}'
                });
                match end {
                    Some(k) if chars[i + 1 + k] == '>' => {
                        out.push_str("<>");
                        i += k + 2;
                    }
                    _ => {
                        out.push('<');
                        i += 1;
                    }
                }
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_plain_select() {
        assert!(lexical_precheck("SELECT ?x WHERE { ?x ?p ?o }").is_ok());
    }

    #[test]
    fn unbalanced_brace() {
        assert_eq!(
            lexical_precheck("SELECT ?x WHERE { ?x ?p ?o")
                .unwrap_err()
                .category,
            PrecheckCategory::Unbalanced
        );
    }

    #[test]
    fn update_form_rejected() {
        assert_eq!(
            lexical_precheck("DROP GRAPH <g>").unwrap_err().category,
            PrecheckCategory::BadForm
        );
        assert_eq!(
            lexical_precheck("PREFIX a: <http://a/> INSERT DATA { a:x a:y a:z }")
                .unwrap_err()
                .category,
            PrecheckCategory::BadForm
        );
    }

    #[test]
    fn empty_body() {
        assert_eq!(
            lexical_precheck("SELECT ?x WHERE { }")
                .unwrap_err()
                .category,
            PrecheckCategory::EmptyBody
        );
        assert_eq!(
            lexical_precheck("SELECT ?x").unwrap_err().category,
            PrecheckCategory::EmptyBody
        );
    }

    #[test]
    fn delimiters_inside_literals_and_iris_ignored() {
        assert!(lexical_precheck(
            "SELECT ?x WHERE { ?x rdfs:label \"a } (\" . ?x ?p <http://a#b> } # {"
        )
        .is_ok());
        assert!(lexical_precheck(
            "PREFIX wd: <http://www.wikidata.org/entity/>\nSELECT ?x WHERE { ?x ?p ?o FILTER(?o < 3) }"
        )
        .is_ok());
        assert_eq!(
            lexical_precheck("SELECT ?x WHERE { ?x ?p \"open }")
                .unwrap_err()
                .category,
            PrecheckCategory::Unbalanced
        );
    }

    #[test]
    fn full_sparql_features_pass() {
        assert!(lexical_precheck(
            "SELECT ?x (COUNT(?y) AS ?n) WHERE { ?x ?p ?y OPTIONAL { ?y ?q ?z } } GROUP BY ?x ORDER BY DESC(?n)"
        )
        .is_ok());
        assert!(lexical_precheck("ask{ wd:Q1 ?p ?o }").is_ok());
    }
}
