//! SPARQL 1.1 Query Results JSON Format (`application/sparql-results+json`).

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::term::{QueryResult, RdfTerm, Solutions, XSD};

pub const MEDIA_TYPE: &str = "application/sparql-results+json";

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed results document: {0}")]
    Shape(String),
}

pub fn term_to_json(term: &RdfTerm) -> Value {
    match term {
        RdfTerm::Iri { value } => json!({"type": "uri", "value": value}),
        RdfTerm::Literal {
            lexical,
            datatype,
            lang,
        } => {
            let mut obj = Map::new();
            obj.insert("type".into(), "literal".into());
            obj.insert("value".into(), lexical.clone().into());
            if let Some(lang) = lang {
                obj.insert("xml:lang".into(), lang.clone().into());
            } else if let Some(dt) = datatype {
                obj.insert("datatype".into(), dt.clone().into());
            }
            Value::Object(obj)
        }
        RdfTerm::Boolean { value } => {
            json!({"type": "literal", "value": value.to_string(), "datatype": format!("{XSD}boolean")})
        }
        RdfTerm::BlankNode { label } => json!({"type": "bnode", "value": label}),
    }
}

pub fn to_json(result: &QueryResult) -> Value {
    match result {
        QueryResult::Boolean { value } => json!({"head": {}, "boolean": value}),
        QueryResult::Solutions(s) => {
            let bindings: Vec<Value> = s
                .rows
                .iter()
                .map(|row| {
                    let mut obj = Map::new();
                    for (var, cell) in s.vars.iter().zip(row) {
                        if let Some(term) = cell {
                            obj.insert(var.clone(), term_to_json(term));
                        }
                    }
                    Value::Object(obj)
                })
                .collect();
            json!({"head": {"vars": s.vars}, "results": {"bindings": bindings}})
        }
    }
}

fn term_from_json(v: &Value) -> Result<RdfTerm, ResultsError> {
    let shape = |m: &str| ResultsError::Shape(m.to_string());
    let obj = v
        .as_object()
        .ok_or_else(|| shape("binding value is not an object"))?;
    let kind = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| shape("binding without type"))?;
    let value = obj
        .get("value")
        .and_then(Value::as_str)
        .ok_or_else(|| shape("binding without value"))?;
    match kind {
        "uri" => Ok(RdfTerm::iri(value)),
        "bnode" => Ok(RdfTerm::BlankNode {
            label: value.to_string(),
        }),
        "literal" | "typed-literal" => {
            let lang = obj
                .get("xml:lang")
                .and_then(Value::as_str)
                .map(str::to_string);
            let datatype = obj
                .get("datatype")
                .and_then(Value::as_str)
                .map(str::to_string);
            Ok(RdfTerm::Literal {
                lexical: value.to_string(),
                datatype: if lang.is_some() { None } else { datatype },
                lang,
            })
        }
        other => Err(ResultsError::Shape(format!("unknown term type {other:?}"))),
    }
}

pub fn from_json(body: &[u8]) -> Result<QueryResult, ResultsError> {
    let doc: Value = serde_json::from_slice(body)?;
    if let Some(b) = doc.get("boolean") {
        let value = b
            .as_bool()
            .ok_or_else(|| ResultsError::Shape("boolean is not a bool".into()))?;
        return Ok(QueryResult::Boolean { value });
    }
    let vars: Vec<String> = doc
        .pointer("/head/vars")
        .and_then(Value::as_array)
        .ok_or_else(|| ResultsError::Shape("missing head.vars".into()))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| ResultsError::Shape("non-string var".into()))
        })
        .collect::<Result<_, _>>()?;
    let bindings = doc
        .pointer("/results/bindings")
        .and_then(Value::as_array)
        .ok_or_else(|| ResultsError::Shape("missing results.bindings".into()))?;
    let mut rows = Vec::with_capacity(bindings.len());
    for b in bindings {
        let obj = b
            .as_object()
            .ok_or_else(|| ResultsError::Shape("binding row is not an object".into()))?;
        let row = vars
            .iter()
            .map(|var| obj.get(var).map(term_from_json).transpose())
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(QueryResult::Solutions(Solutions { vars, rows }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_term_kinds() {
        let result = QueryResult::Solutions(Solutions {
            vars: vec!["a".into(), "b".into()],
            rows: vec![
                vec![
                    Some(RdfTerm::iri("http://x/1")),
                    Some(RdfTerm::lang_literal("hi", "en")),
                ],
                vec![
                    Some(RdfTerm::typed_literal("3", format!("{XSD}integer"))),
                    None,
                ],
                vec![
                    Some(RdfTerm::BlankNode { label: "b0".into() }),
                    Some(RdfTerm::literal("")),
                ],
            ],
        });
        let bytes = serde_json::to_vec(&to_json(&result)).unwrap();
        assert_eq!(from_json(&bytes).unwrap(), result);
    }

    #[test]
    fn field_names_follow_the_standard() {
        let v = to_json(&QueryResult::Solutions(Solutions {
            vars: vec!["x".into()],
            rows: vec![vec![Some(RdfTerm::lang_literal("Paris", "fr"))]],
        }));
        assert_eq!(v["results"]["bindings"][0]["x"]["xml:lang"], "fr");
        assert_eq!(v["head"]["vars"][0], "x");
        assert_eq!(
            to_json(&QueryResult::Boolean { value: true })["boolean"],
            true
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_json(b"<html>").is_err());
        assert!(from_json(b"{\"head\":{}}").is_err());
    }
}
