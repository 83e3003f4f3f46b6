//! A restricted SPARQL fragment over an embedded triple store.
//!
//! The fragment covers basic graph patterns, `FILTER(?v = term)`, `LIMIT`,
//! `SELECT [DISTINCT]` and `ASK`. Anything richer is sent to a remote endpoint
//! after [`lexical_precheck`].

mod exec;
pub mod json;
mod parser;
mod precheck;
mod store;
mod term;

pub use exec::execute_subset;
pub use parser::{
    parse_subset, EqualityFilter, PatternTerm, QueryForm, SubsetQuery, SyntaxError, TriplePattern,
};
pub use precheck::{lexical_precheck, PrecheckCategory, PrecheckError};
pub(crate) use store::is_numeric_datatype;
pub use store::{load_ntriples, FormatError, Triple, TripleStore};
pub use term::{PrefixMap, QueryResult, RdfTerm, Solutions, RDF_TYPE, XSD};

/// Parses and runs `text` against `store` in one call.
pub fn query_store(text: &str, store: &TripleStore) -> Result<QueryResult, SyntaxError> {
    let q = parse_subset(text, store.prefixes())?;
    Ok(execute_subset(&q, store))
}
