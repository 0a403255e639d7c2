//! Score tables, their JSON files, submissions, and ensembling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::heads::{LabelSpace, ScoreTriple};

pub const SCORE_VERSION: &str = "1.0";
pub const CHALLENGE: &str = "action_recognition";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    S1,
    S2,
    Custom(String),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::S1 => f.write_str("S1"),
            Split::S2 => f.write_str("S2"),
            Split::Custom(s) => f.write_str(s),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" => Ok(Split::S1),
            "S2" => Ok(Split::S2),
            "" => Err(Error::Invalid("empty split tag".into())),
            other => Ok(Split::Custom(other.to_string())),
        }
    }
}

/// Raw logits per segment for one model (or an ensemble) on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub label_space_id: String,
    pub split: Split,
    pub rows: BTreeMap<String, ScoreTriple>,
}

impl ScoreTable {
    pub fn new(space: &LabelSpace, split: Split) -> Self {
        ScoreTable {
            label_space_id: space.hash_id(),
            split,
            rows: BTreeMap::new(),
        }
    }

    /// Builds a table from `(segment_id, scores)` pairs, rejecting duplicates
    /// and logits that do not fit `space`.
    pub fn from_rows(space: &LabelSpace, split: Split, rows: impl IntoIterator<Item = (String, ScoreTriple)>) -> Result<Self> {
        let mut table = ScoreTable::new(space, split);
        for (id, triple) in rows {
            table.insert(space, id, triple)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, space: &LabelSpace, id: String, triple: ScoreTriple) -> Result<()> {
        if space.hash_id() != self.label_space_id {
            return Err(Error::Invalid("label space does not match table".into()));
        }
        triple.check(space)?;
        if self.rows.contains_key(&id) {
            return Err(Error::Invalid(format!("duplicate segment id {id:?}")));
        }
        self.rows.insert(id, triple);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_json_value(&self) -> Value {
        let results: Map<String, Value> = self
            .rows
            .iter()
            .map(|(id, t)| (id.clone(), json!({ "verb": t.verb, "noun": t.noun, "action": t.action })))
            .collect();
        json!({
            "version": SCORE_VERSION,
            "split": self.split.to_string(),
            "label_space": self.label_space_id,
            "results": results,
        })
    }

    /// Canonical text: keys sorted, floats in shortest round-trip form.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json_value()).expect("score values are finite");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let top = object(&v, "$")?;
        expect_keys(top, "$", &["version", "split", "label_space", "results"], &[])?;
        check_version(top)?;
        let split = string_field(top, "$", "split")?.parse()?;
        let label_space_id = string_field(top, "$", "label_space")?.to_string();
        let mut rows = BTreeMap::new();
        for (id, entry) in object(&top["results"], "$.results")? {
            let path = format!("$.results.{id}");
            let e = object(entry, &path)?;
            expect_keys(e, &path, &["verb", "noun", "action"], &[])?;
            rows.insert(
                id.clone(),
                ScoreTriple {
                    verb: floats(&e["verb"], &format!("{path}.verb"))?,
                    noun: floats(&e["noun"], &format!("{path}.noun"))?,
                    action: floats(&e["action"], &format!("{path}.action"))?,
                },
            );
        }
        let table = ScoreTable {
            label_space_id,
            split,
            rows,
        };
        table.check_widths()?;
        Ok(table)
    }

    /// Every row must have the same logit counts as the first.
    fn check_widths(&self) -> Result<()> {
        let mut first: Option<[usize; 3]> = None;
        for (id, t) in &self.rows {
            let w = [t.verb.len(), t.noun.len(), t.action.len()];
            match first {
                None => first = Some(w),
                Some(f) if f != w => {
                    return Err(Error::schema(
                        format!("$.results.{id}"),
                        format!("logit counts {w:?} differ from {f:?}"),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks the table belongs to `space`.
    pub fn check(&self, space: &LabelSpace) -> Result<()> {
        if self.label_space_id != space.hash_id() {
            return Err(Error::schema(
                "$.label_space",
                format!("table has {}, label space is {}", self.label_space_id, space.hash_id()),
            ));
        }
        for (id, t) in &self.rows {
            t.check(space)
                .map_err(|e| Error::schema(format!("$.results.{id}"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Verb and noun scores only, tagged for the challenge.
    pub fn to_submission(&self) -> String {
        let results: Map<String, Value> = self
            .rows
            .iter()
            .map(|(id, t)| (id.clone(), json!({ "verb": t.verb, "noun": t.noun })))
            .collect();
        let v = json!({
            "version": SCORE_VERSION,
            "challenge": CHALLENGE,
            "split": self.split.to_string(),
            "label_space": self.label_space_id,
            "results": results,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("score values are finite");
        s.push('\n');
        s
    }
}

/// Validates a submission document; returns the number of segments.
pub fn validate_submission(text: &str) -> Result<usize> {
    let v: Value = serde_json::from_str(text)?;
    let top = object(&v, "$")?;
    expect_keys(top, "$", &["version", "challenge", "split", "label_space", "results"], &[])?;
    check_version(top)?;
    if string_field(top, "$", "challenge")? != CHALLENGE {
        return Err(Error::schema("$.challenge", format!("expected {CHALLENGE:?}")));
    }
    string_field(top, "$", "split")?.parse::<Split>()?;
    string_field(top, "$", "label_space")?;
    let results = object(&top["results"], "$.results")?;
    let mut widths: Option<(usize, usize)> = None;
    for (id, entry) in results {
        let path = format!("$.results.{id}");
        let e = object(entry, &path)?;
        expect_keys(e, &path, &["verb", "noun"], &[])?;
        let w = (
            floats(&e["verb"], &format!("{path}.verb"))?.len(),
            floats(&e["noun"], &format!("{path}.noun"))?.len(),
        );
        if *widths.get_or_insert(w) != w {
            return Err(Error::schema(path, "logit counts differ between segments"));
        }
    }
    Ok(results.len())
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::schema(path, "expected an object"))
}

fn expect_keys(m: &Map<String, Value>, path: &str, required: &[&str], optional: &[&str]) -> Result<()> {
    for k in required {
        if !m.contains_key(*k) {
            return Err(Error::schema(path, format!("missing field {k:?}")));
        }
    }
    for k in m.keys() {
        if !required.contains(&k.as_str()) && !optional.contains(&k.as_str()) {
            return Err(Error::schema(path, format!("unknown field {k:?}")));
        }
    }
    Ok(())
}

fn string_field<'a>(m: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a str> {
    m[key]
        .as_str()
        .ok_or_else(|| Error::schema(format!("{path}.{key}"), "expected a string"))
}

fn check_version(m: &Map<String, Value>) -> Result<()> {
    let v = string_field(m, "$", "version")?;
    if v != SCORE_VERSION {
        return Err(Error::schema("$.version", format!("unsupported version {v:?}")));
    }
    Ok(())
}

fn floats(v: &Value, path: &str) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| Error::schema(path, "expected an array"))?;
    if arr.is_empty() {
        return Err(Error::schema(path, "empty logit vector"));
    }
    arr.iter()
        .enumerate()
        .map(|(i, x)| x.as_f64().ok_or_else(|| Error::schema(format!("{path}[{i}]"), "expected a number")))
        .collect()
}

/// Elementwise mean over tables, as a running mean in list order:
/// `m ← m + (x − m)/i`. A single table and k copies of one table both come
/// back bit-identical.
pub fn average_tables(tables: &[ScoreTable]) -> Result<ScoreTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Invalid("average_tables needs at least one table".into()))?;
    let ids: BTreeSet<&String> = first.rows.keys().collect();
    for (k, t) in tables.iter().enumerate().skip(1) {
        if t.label_space_id != first.label_space_id {
            return Err(Error::Invalid(format!(
                "table {k} uses label space {}, table 0 uses {}",
                t.label_space_id, first.label_space_id
            )));
        }
        if t.rows.keys().collect::<BTreeSet<_>>() != ids {
            return Err(Error::Invalid(format!("table {k} covers a different segment set")));
        }
    }
    let mut out = first.clone();
    for (k, t) in tables.iter().enumerate().skip(1) {
        let n = (k + 1) as f64;
        for (id, acc) in out.rows.iter_mut() {
            let x = &t.rows[id];
            for (a, b) in [(&mut acc.verb, &x.verb), (&mut acc.noun, &x.noun), (&mut acc.action, &x.action)] {
                if a.len() != b.len() {
                    return Err(Error::shape("average_tables", format!("segment {id}: {} vs {} logits", a.len(), b.len())));
                }
                for (m, v) in a.iter_mut().zip(b) {
                    *m += (v - *m) / n;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn space() -> LabelSpace {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        LabelSpace::from_pairs(names("v", 3), names("n", 4), &[(0, 0), (1, 1), (2, 2), (0, 3), (1, 0)]).unwrap()
    }

    pub(crate) fn random_table(space: &LabelSpace, n: usize, rng: &mut ChaCha8Rng) -> ScoreTable {
        let mut v = |k: usize| (0..k).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();
        let rows: Vec<_> = (0..n)
            .map(|i| {
                (
                    format!("seg{i:05}"),
                    ScoreTriple {
                        verb: v(space.num_verbs()),
                        noun: v(space.num_nouns()),
                        action: v(space.num_actions()),
                    },
                )
            })
            .collect();
        ScoreTable::from_rows(space, Split::S1, rows).unwrap()
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let s = space();
        let mut t = random_table(&s, 5, &mut ChaCha8Rng::seed_from_u64(1));
        t.rows.get_mut("seg00000").unwrap().verb[0] = 0.1 + 0.2;
        t.rows.get_mut("seg00001").unwrap().noun[1] = f64::MIN_POSITIVE;
        t.rows.get_mut("seg00002").unwrap().action[2] = -1e300;
        let back = ScoreTable::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json(), t.to_json());
        back.check(&s).unwrap();
    }

    #[test]
    fn json_keys_are_sorted() {
        let t = random_table(&space(), 2, &mut ChaCha8Rng::seed_from_u64(2));
        let text = t.to_json();
        let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("label_space") < pos("results") && pos("results") < pos("split") && pos("split") < pos("version"));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let t = random_table(&space(), 2, &mut ChaCha8Rng::seed_from_u64(3));
        let mut v = t.to_json_value();
        v["results"]["seg00001"]["noun"][2] = json!("x");
        match ScoreTable::from_json(&v.to_string()) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "$.results.seg00001.noun[2]"),
            other => panic!("{other:?}"),
        }
        let mut v = t.to_json_value();
        v["version"] = json!("2.0");
        assert!(matches!(ScoreTable::from_json(&v.to_string()), Err(Error::Schema { .. })));
        let mut v = t.to_json_value();
        v.as_object_mut().unwrap().remove("split");
        assert!(matches!(ScoreTable::from_json(&v.to_string()), Err(Error::Schema { .. })));
        let mut v = t.to_json_value();
        v["results"]["seg00000"]["action"] = json!([1.0]);
        assert!(matches!(ScoreTable::from_json(&v.to_string()), Err(Error::Schema { .. })));
        assert!(matches!(ScoreTable::from_json("{\"version\": "), Err(Error::Json(_))));
    }

    #[test]
    fn label_space_mismatch_rejected() {
        let t = random_table(&space(), 2, &mut ChaCha8Rng::seed_from_u64(4));
        let other = LabelSpace::from_pairs(vec!["a".into()], vec!["b".into()], &[(0, 0)]).unwrap();
        assert!(t.check(&other).is_err());
    }

    #[test]
    fn split_tags() {
        assert_eq!("S1".parse::<Split>().unwrap(), Split::S1);
        assert_eq!("S2".parse::<Split>().unwrap(), Split::S2);
        assert_eq!("val".parse::<Split>().unwrap(), Split::Custom("val".into()));
        assert!("".parse::<Split>().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = space();
        let row = random_table(&s, 1, &mut ChaCha8Rng::seed_from_u64(5)).rows.into_iter().next().unwrap();
        assert!(ScoreTable::from_rows(&s, Split::S1, vec![row.clone(), row]).is_err());
    }

    #[test]
    fn submission_validates() {
        let t = random_table(&space(), 3, &mut ChaCha8Rng::seed_from_u64(6));
        let sub = t.to_submission();
        assert_eq!(validate_submission(&sub).unwrap(), 3);
        let v: Value = serde_json::from_str(&sub).unwrap();
        assert!(v["results"]["seg00000"].get("action").is_none());
        assert_eq!(v["challenge"], CHALLENGE);
        let mut bad = v.clone();
        bad["results"]["seg00000"]["action"] = json!([0.0]);
        assert!(validate_submission(&bad.to_string()).is_err());
        let mut bad = v;
        bad["challenge"] = json!("other");
        assert!(validate_submission(&bad.to_string()).is_err());
    }

    #[test]
    fn average_single_and_copies_bit_identical() {
        let t = random_table(&space(), 10, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(average_tables(std::slice::from_ref(&t)).unwrap(), t);
        for k in 2..=12 {
            assert_eq!(average_tables(&vec![t.clone(); k]).unwrap(), t, "k={k}");
        }
    }

    #[test]
    fn average_of_opposites_is_zero() {
        let t = random_table(&space(), 4, &mut ChaCha8Rng::seed_from_u64(8));
        let mut neg = t.clone();
        for r in neg.rows.values_mut() {
            for x in r.verb.iter_mut().chain(&mut r.noun).chain(&mut r.action) {
                *x = -*x;
            }
        }
        let avg = average_tables(&[t, neg]).unwrap();
        assert!(avg.rows.values().all(|r| r.verb.iter().chain(&r.noun).chain(&r.action).all(|&x| x == 0.0)));
    }

    #[test]
    fn average_rejects_mismatches() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_table(&s, 3, &mut rng);
        let b = random_table(&s, 4, &mut rng);
        assert!(average_tables(&[a.clone(), b]).is_err());
        let mut c = a.clone();
        c.label_space_id = "0000000000000000".into();
        assert!(average_tables(&[a, c]).is_err());
        assert!(average_tables(&[]).is_err());
    }
}
