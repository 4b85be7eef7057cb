//! Schema-free nested meta documents.
//!
//! Every repository entry, request and response is a `MetaDocument`: a JSON
//! object of scalars, lists and nested maps. Serialization is canonical —
//! UTF-8, keys sorted, no insignificant whitespace, floats in shortest
//! round-trip form — so equal documents always produce identical bytes.
//! Keys are addressable with dotted paths (`a.b.c`, list elements `a.3`).

use crate::error::{CmError, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetaDocument {
    root: Map<String, Value>,
}

/// One step of a dotted key path: a map key or a list index.
#[derive(Debug, Clone, PartialEq)]
pub enum PathSeg {
    Key(String),
    Index(usize),
}

/// Splits `a.b.3.c` into segments. Numeric segments double as list indices
/// when the container they land on is a list.
pub fn parse_key_path(path: &str) -> Result<Vec<PathSeg>> {
    if path.is_empty() {
        return Err(CmError::BadKeyPath("empty path".into()));
    }
    path.split('.')
        .map(|seg| {
            if seg.is_empty() {
                return Err(CmError::BadKeyPath(format!("empty segment in `{path}`")));
            }
            if seg.bytes().all(|b| b.is_ascii_digit()) {
                // may still be used as a map key; traversal decides
                Ok(PathSeg::Index(seg.parse().map_err(|_| {
                    CmError::BadKeyPath(format!("index overflow in `{path}`"))
                })?))
            } else {
                Ok(PathSeg::Key(seg.to_string()))
            }
        })
        .collect()
}

/// Canonical JSON text of any value. `serde_json` keeps map keys sorted and
/// renders floats via shortest round-trip, which is exactly the canonical
/// form the wire protocol and equivalence tests rely on.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(value).expect("json value serialization cannot fail")
}

impl MetaDocument {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(root: Map<String, Value>) -> Self {
        MetaDocument { root }
    }

    /// Wraps a JSON value; the root must be an object.
    pub fn from_value(value: Value) -> Result<Self> {
        match value {
            Value::Object(root) => Ok(MetaDocument { root }),
            other => Err(CmError::Validation(format!(
                "meta document root must be an object, got {}",
                kind_name(&other)
            ))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| CmError::Validation(format!("invalid json: {e}")))?;
        Self::from_value(value)
    }

    pub fn to_canonical_string(&self) -> String {
        canonical_json(&Value::Object(self.root.clone()))
    }

    pub fn as_map(&self) -> &Map<String, Value> {
        &self.root
    }

    pub fn as_map_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.root
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_empty()
    }

    /// Looks a value up by dotted path. Missing keys and type mismatches
    /// yield `None`; a syntactically invalid path is an error.
    pub fn get(&self, path: &str) -> Result<Option<&Value>> {
        let segs = parse_key_path(path)?;
        let mut cur: &Value = match segs.first() {
            Some(PathSeg::Key(k)) => match self.root.get(k) {
                Some(v) => v,
                None => return Ok(None),
            },
            Some(PathSeg::Index(i)) => match self.root.get(&i.to_string()) {
                Some(v) => v,
                None => return Ok(None),
            },
            None => return Ok(None),
        };
        for seg in &segs[1..] {
            let next = match (seg, cur) {
                (PathSeg::Key(k), Value::Object(m)) => m.get(k),
                (PathSeg::Index(i), Value::Array(a)) => a.get(*i),
                (PathSeg::Index(i), Value::Object(m)) => m.get(&i.to_string()),
                _ => None,
            };
            match next {
                Some(v) => cur = v,
                None => return Ok(None),
            }
        }
        Ok(Some(cur))
    }

    /// Sets a value at a dotted path, creating intermediate objects as
    /// needed. List indices must already exist; paths through scalars fail.
    pub fn set(&mut self, path: &str, value: Value) -> Result<()> {
        let segs = parse_key_path(path)?;
        let mut cur: &mut Value = {
            let key = seg_key(&segs[0]);
            self.root
                .entry(key)
                .or_insert_with(|| Value::Object(Map::new()))
        };
        if segs.len() == 1 {
            *cur = value;
            return Ok(());
        }
        for (i, seg) in segs[1..].iter().enumerate() {
            let last = i == segs.len() - 2;
            match seg {
                PathSeg::Index(idx) if cur.is_array() => {
                    let arr = cur.as_array_mut().unwrap();
                    let slot = arr.get_mut(*idx).ok_or_else(|| {
                        CmError::BadKeyPath(format!("list index {idx} out of range in `{path}`"))
                    })?;
                    if last {
                        *slot = value;
                        return Ok(());
                    }
                    cur = slot;
                }
                _ => {
                    if !cur.is_object() {
                        return Err(CmError::BadKeyPath(format!(
                            "path `{path}` descends through a non-container"
                        )));
                    }
                    let m = cur.as_object_mut().unwrap();
                    let slot = m
                        .entry(seg_key(seg))
                        .or_insert_with(|| Value::Object(Map::new()));
                    if last {
                        *slot = value;
                        return Ok(());
                    }
                    cur = slot;
                }
            }
        }
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.root.remove(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Value) {
        self.root.insert(key.into(), value);
    }

    /// Flattens the document to `(dotted path, scalar)` pairs, lists included.
    pub fn flatten(&self) -> Vec<(String, &Value)> {
        let mut out = Vec::new();
        for (k, v) in &self.root {
            flatten_into(k.clone(), v, &mut out);
        }
        out
    }
}

fn seg_key(seg: &PathSeg) -> String {
    match seg {
        PathSeg::Key(k) => k.clone(),
        PathSeg::Index(i) => i.to_string(),
    }
}

fn flatten_into<'v>(prefix: String, v: &'v Value, out: &mut Vec<(String, &'v Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                flatten_into(format!("{prefix}.{k}"), child, out);
            }
        }
        Value::Array(a) => {
            for (i, child) in a.iter().enumerate() {
                flatten_into(format!("{prefix}.{i}"), child, out);
            }
        }
        scalar => out.push((prefix, scalar)),
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "object",
    }
}

#[macro_export]
macro_rules! meta {
    ($($json:tt)+) => {
        $crate::meta::MetaDocument::from_value(::serde_json::json!($($json)+))
            .expect("literal meta roots are objects")
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn canonical_form_sorts_keys_and_strips_whitespace() {
        let d = MetaDocument::parse(r#"{ "b": 1, "a": { "y": 2.5, "x": [1, "s", null] } }"#)
            .unwrap();
        assert_eq!(
            d.to_canonical_string(),
            r#"{"a":{"x":[1,"s",null],"y":2.5},"b":1}"#
        );
    }

    #[test]
    fn parse_serialize_round_trip_is_identity() {
        let d = meta!({
            "ints": [0, -3, 9007199254740991i64],
            "floats": [1.0, 0.1, 1e-30, 123456.789],
            "deep": {"a": {"b": {"c": true}}},
            "s": "unicode … ок",
            "n": null
        });
        let text = d.to_canonical_string();
        let back = MetaDocument::parse(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_canonical_string(), text);
    }

    #[test]
    fn random_documents_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let d = random_doc(&mut rng, 3);
            let text = d.to_canonical_string();
            let back = MetaDocument::parse(&text).unwrap();
            assert_eq!(back, d, "round trip failed for {text}");
            assert_eq!(back.to_canonical_string(), text);
        }
    }

    fn random_doc(rng: &mut impl Rng, depth: u32) -> MetaDocument {
        let mut m = Map::new();
        for i in 0..rng.random_range(0..6) {
            m.insert(format!("k{i}"), random_value(rng, depth));
        }
        MetaDocument::from_map(m)
    }

    fn random_value(rng: &mut impl Rng, depth: u32) -> Value {
        match rng.random_range(0..if depth == 0 { 5 } else { 7 }) {
            0 => Value::Null,
            1 => Value::Bool(rng.random()),
            2 => Value::from(rng.random_range(-1_000_000i64..1_000_000)),
            3 => Value::from(rng.random_range(-1e9..1e9)),
            4 => Value::from(format!("s{}", rng.random_range(0..1000))),
            5 => Value::Array((0..rng.random_range(0..4)).map(|_| random_value(rng, depth - 1)).collect()),
            _ => random_doc(rng, depth - 1).into_value(),
        }
    }

    #[test]
    fn dotted_paths_address_maps_and_lists() {
        let d = meta!({"a": {"b": {"c": 7}}, "list": [10, 20, {"inner": "x"}]});
        assert_eq!(d.get("a.b.c").unwrap(), Some(&Value::from(7)));
        assert_eq!(d.get("list.1").unwrap(), Some(&Value::from(20)));
        assert_eq!(d.get("list.2.inner").unwrap(), Some(&Value::from("x")));
        assert_eq!(d.get("a.b.missing").unwrap(), None);
        assert_eq!(d.get("list.9").unwrap(), None);
    }

    #[test]
    fn bad_paths_are_rejected() {
        let d = MetaDocument::new();
        assert!(matches!(d.get(""), Err(CmError::BadKeyPath(_))));
        assert!(matches!(d.get("a..b"), Err(CmError::BadKeyPath(_))));
        assert!(matches!(d.get(".a"), Err(CmError::BadKeyPath(_))));
    }

    #[test]
    fn set_creates_intermediate_maps() {
        let mut d = MetaDocument::new();
        d.set("a.b.c", Value::from(1)).unwrap();
        d.set("a.b.d", Value::from(2)).unwrap();
        assert_eq!(d.to_canonical_string(), r#"{"a":{"b":{"c":1,"d":2}}}"#);
    }

    #[test]
    fn flatten_lists_every_scalar_path() {
        let d = meta!({"a": {"b": 1}, "l": [5, {"x": true}]});
        let flat: Vec<String> = d.flatten().into_iter().map(|(p, _)| p).collect();
        assert_eq!(flat, vec!["a.b", "l.0", "l.1.x"]);
    }
}
