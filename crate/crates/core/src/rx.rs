//! Prescription corpus ingestion.
//!
//! A corpus is a JSON array of prescription records. Pill classes are indexed
//! through a [`PillDictionary`] whose order is fixed when the corpus is first
//! loaded; every downstream matrix (graph, embeddings, logits) is addressed by
//! that order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One anonymized prescription.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrescriptionRecord {
    pub id: String,
    pub diagnoses: Vec<String>,
    pub pills: Vec<String>,
}

/// Bijection between pill-class names and indices `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PillDictionary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    names: Vec<String>,
}

impl PillDictionary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "dictionary lists pill `{name}` more than once"
                )));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> Option<&str> {
        self.names.get(idx).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DictionaryFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))?;
        Self::new(file.names)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = DictionaryFile {
            names: self.names.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A validated prescription corpus together with its pill dictionary and the
/// ordered set of distinct diagnoses.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<PrescriptionRecord>,
    dictionary: PillDictionary,
    diagnoses: Vec<String>,
    diagnosis_index: HashMap<String, usize>,
}

impl Corpus {
    /// Validates `records` and indexes pills in first-appearance order.
    pub fn from_records(records: Vec<PrescriptionRecord>) -> Result<Self> {
        let mut names = Vec::new();
        let mut seen = HashSet::new();
        for rec in &records {
            for pill in &rec.pills {
                if seen.insert(pill.as_str()) {
                    names.push(pill.clone());
                }
            }
        }
        let dictionary = PillDictionary::new(names)?;
        Self::with_dictionary(records, dictionary)
    }

    /// Validates `records` against an explicit dictionary. The dictionary may
    /// contain classes that no record mentions.
    pub fn with_dictionary(
        records: Vec<PrescriptionRecord>,
        dictionary: PillDictionary,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut diagnoses = Vec::new();
        let mut diagnosis_index = HashMap::new();
        for rec in &records {
            if !ids.insert(rec.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate record id `{}`",
                    rec.id
                )));
            }
            if rec.pills.is_empty() {
                return Err(Error::Validation(format!(
                    "record `{}` has an empty pills list",
                    rec.id
                )));
            }
            if rec.diagnoses.is_empty() {
                return Err(Error::Validation(format!(
                    "record `{}` has an empty diagnoses list",
                    rec.id
                )));
            }
            let mut pills = HashSet::new();
            for pill in &rec.pills {
                if !pills.insert(pill.as_str()) {
                    return Err(Error::Validation(format!(
                        "record `{}` lists pill `{pill}` twice",
                        rec.id
                    )));
                }
                if dictionary.index_of(pill).is_none() {
                    return Err(Error::Validation(format!(
                        "record `{}` mentions pill `{pill}` missing from the dictionary",
                        rec.id
                    )));
                }
            }
            for diag in &rec.diagnoses {
                if !diagnosis_index.contains_key(diag) {
                    diagnosis_index.insert(diag.clone(), diagnoses.len());
                    diagnoses.push(diag.clone());
                }
            }
        }
        Ok(Self {
            records,
            dictionary,
            diagnoses,
            diagnosis_index,
        })
    }

    pub fn records(&self) -> &[PrescriptionRecord] {
        &self.records
    }

    pub fn dictionary(&self) -> &PillDictionary {
        &self.dictionary
    }

    pub fn diagnoses(&self) -> &[String] {
        &self.diagnoses
    }

    pub fn num_classes(&self) -> usize {
        self.dictionary.len()
    }

    pub fn diagnosis_index(&self, code: &str) -> Option<usize> {
        self.diagnosis_index.get(code).copied()
    }

    /// Class indices of a record's pills.
    pub fn pill_indices(&self, rec: &PrescriptionRecord) -> Vec<usize> {
        rec.pills
            .iter()
            .map(|p| self.dictionary.index_of(p).expect("validated corpus"))
            .collect()
    }

    /// Diagnosis indices of a record, deduplicated (diagnoses within one
    /// record are treated as a set).
    pub fn diagnosis_indices(&self, rec: &PrescriptionRecord) -> Vec<usize> {
        let mut out: Vec<usize> = rec
            .diagnoses
            .iter()
            .map(|d| self.diagnosis_index[d.as_str()])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }

    /// Writes the record array to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn read_records(path: &Path) -> Result<Vec<PrescriptionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))
}

/// Loads a corpus, indexing pills in first-appearance order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::from_records(read_records(path.as_ref())?)
}

/// Loads a corpus whose class order comes from a sidecar dictionary file.
pub fn load_corpus_with_dictionary(
    path: impl AsRef<Path>,
    dictionary: impl AsRef<Path>,
) -> Result<Corpus> {
    let dict = PillDictionary::load(dictionary)?;
    Corpus::with_dictionary(read_records(path.as_ref())?, dict)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CorpusStats {
    pub records: usize,
    pub classes: usize,
    pub diagnoses: usize,
    pub pill_mentions: usize,
    /// pills-per-record -> number of records
    pub pills_per_record: BTreeMap<usize, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut pills_per_record = BTreeMap::new();
    let mut pill_mentions = 0;
    for rec in corpus.records() {
        *pills_per_record.entry(rec.pills.len()).or_insert(0) += 1;
        pill_mentions += rec.pills.len();
    }
    CorpusStats {
        records: corpus.records().len(),
        classes: corpus.num_classes(),
        diagnoses: corpus.diagnoses().len(),
        pill_mentions,
        pills_per_record,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    fn rec(id: &str, diagnoses: &[&str], pills: &[&str]) -> PrescriptionRecord {
        PrescriptionRecord {
            id: id.into(),
            diagnoses: diagnoses.iter().map(|s| s.to_string()).collect(),
            pills: pills.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Rx1={D1;A,B}, Rx2={D1;A,C}, Rx3={D2;B,C}, Rx4={D2;C}
    pub fn t1_records() -> Vec<PrescriptionRecord> {
        vec![
            rec("Rx1", &["D1"], &["A", "B"]),
            rec("Rx2", &["D1"], &["A", "C"]),
            rec("Rx3", &["D2"], &["B", "C"]),
            rec("Rx4", &["D2"], &["C"]),
        ]
    }

    pub fn t1() -> Corpus {
        Corpus::from_records(t1_records()).unwrap()
    }
}
