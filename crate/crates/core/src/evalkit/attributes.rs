//! Challenge-attribute schemas and per-attribute breakdowns.

use std::fmt;
use std::str::FromStr;

use super::metrics::{evaluate, EvalConfig, Evaluation, SequenceRecord};
use crate::{Error, Result};

/// Attribute vocabulary of a benchmark, in annotation-file order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttributeSchema {
    /// 19 flags.
    LasHeR,
    /// 12 flags.
    Rgbt234,
}

const LASHER: [&str; 19] = [
    "NO", "PO", "TO", "HO", "LI", "HI", "AIV", "OV", "LR", "DEF", "BC", "SA", "TC", "MB", "CM", "FL", "FM", "SV", "ARC",
];

const RGBT234: [&str; 12] = ["NO", "CM", "HO", "FM", "SV", "PO", "LI", "TC", "BC", "MB", "DEF", "LR"];

impl AttributeSchema {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            AttributeSchema::LasHeR => &LASHER,
            AttributeSchema::Rgbt234 => &RGBT234,
        }
    }

    pub fn len(self) -> usize {
        self.names().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn index_of(self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n.eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for AttributeSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttributeSchema::LasHeR => "lasher",
            AttributeSchema::Rgbt234 => "rgbt234",
        })
    }
}

impl FromStr for AttributeSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lasher" => Ok(AttributeSchema::LasHeR),
            "rgbt234" | "rgbt210" => Ok(AttributeSchema::Rgbt234),
            other => Err(Error::Input(format!("unknown attribute schema {other:?}"))),
        }
    }
}

/// Binary attribute vector of one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeFlags {
    pub schema: AttributeSchema,
    pub flags: Vec<bool>,
}

impl AttributeFlags {
    pub fn new(schema: AttributeSchema, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != schema.len() {
            return Err(Error::Schema { schema: schema.to_string(), expected: schema.len(), found: flags.len() });
        }
        Ok(Self { schema, flags })
    }

    /// Flags set by name, everything else cleared.
    pub fn from_names(schema: AttributeSchema, names: &[&str]) -> Result<Self> {
        let mut flags = vec![false; schema.len()];
        for n in names {
            let i = schema
                .index_of(n)
                .ok_or_else(|| Error::Input(format!("attribute {n:?} is not part of schema {schema}")))?;
            flags[i] = true;
        }
        Ok(Self { schema, flags })
    }

    /// Parses one line of whitespace-separated `0`/`1` flags.
    pub fn parse(schema: AttributeSchema, text: &str) -> Result<Self> {
        let flags = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Input(format!("attribute flag {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(schema, flags)
    }

    pub fn has(&self, index: usize) -> bool {
        self.flags.get(index).copied().unwrap_or(false)
    }

    pub fn to_line(&self) -> String {
        self.flags.iter().map(|&f| if f { "1" } else { "0" }).collect::<Vec<_>>().join(" ")
    }
}

/// Metrics restricted to the sequences flagged with one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeRow {
    pub name: &'static str,
    pub sequences: usize,
    /// `None` when no sequence carries the attribute.
    pub evaluation: Option<Evaluation>,
}

pub fn attribute_breakdown(
    records: &[SequenceRecord],
    schema: AttributeSchema,
    cfg: &EvalConfig,
) -> Result<Vec<AttributeRow>> {
    for r in records {
        match &r.attributes {
            None => return Err(Error::Input(format!("sequence {} has no attribute flags", r.name))),
            Some(a) if a.schema != schema || a.flags.len() != schema.len() => {
                return Err(Error::Schema { schema: schema.to_string(), expected: schema.len(), found: a.flags.len() })
            }
            Some(_) => {}
        }
    }
    schema
        .names()
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let subset: Vec<SequenceRecord> =
                records.iter().filter(|r| r.attributes.as_ref().is_some_and(|a| a.has(i))).cloned().collect();
            let evaluation = if subset.is_empty() { None } else { Some(evaluate(&subset, cfg)?) };
            Ok(AttributeRow { name, sequences: subset.len(), evaluation })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::BoundingBox;

    fn record(name: &str, attrs: &[&str], offset: f64) -> SequenceRecord {
        let gt = vec![BoundingBox::new(10.0, 10.0, 10.0, 10.0); 3];
        let pred = gt.iter().map(|b| b.translated(offset, 0.0)).collect();
        SequenceRecord::new(name, pred, gt)
            .with_attributes(AttributeFlags::from_names(AttributeSchema::LasHeR, attrs).unwrap())
    }

    #[test]
    fn schema_lengths() {
        assert_eq!(AttributeSchema::LasHeR.len(), 19);
        assert_eq!(AttributeSchema::Rgbt234.len(), 12);
        let line = vec!["1"; 19].join(" ");
        assert!(AttributeFlags::parse(AttributeSchema::LasHeR, &line).is_ok());
        let short = ["0"; 12].join(" ");
        assert!(matches!(
            AttributeFlags::parse(AttributeSchema::LasHeR, &short),
            Err(Error::Schema { expected: 19, found: 12, .. })
        ));
    }

    #[test]
    fn no_only_matches_global_table() {
        let recs = vec![record("a", &["NO"], 0.0), record("b", &["NO"], 30.0)];
        let cfg = EvalConfig::default();
        let rows = attribute_breakdown(&recs, AttributeSchema::LasHeR, &cfg).unwrap();
        assert_eq!(rows[0].evaluation.as_ref().unwrap(), &evaluate(&recs, &cfg).unwrap());
        assert!(rows[1..].iter().all(|r| r.evaluation.is_none() && r.sequences == 0));
    }

    #[test]
    fn flagged_sequence_lands_in_exactly_its_rows() {
        let recs = vec![record("a", &["LI", "TC"], 0.0)];
        let rows = attribute_breakdown(&recs, AttributeSchema::LasHeR, &EvalConfig::default()).unwrap();
        let present: Vec<_> = rows.iter().filter(|r| r.evaluation.is_some()).map(|r| r.name).collect();
        assert_eq!(present, vec!["LI", "TC"]);
    }

    #[test]
    fn mismatched_schema_is_rejected() {
        let rec = record("a", &["NO"], 0.0);
        assert!(matches!(
            attribute_breakdown(&[rec], AttributeSchema::Rgbt234, &EvalConfig::default()),
            Err(Error::Schema { .. })
        ));
    }
}
