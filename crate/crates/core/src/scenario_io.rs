//! Line-delimited JSON scenario files.
//!
//! ```text
//! {"kind":"header","format":"bird-scenario/1","dimension":64,"metric":"cosine"}
//! {"kind":"query","id":"q0000","vector":[...],"gold_doc_id":"b00017","target_answer_doc_ids":["q0000-p0"]}
//! {"kind":"document","id":"b00017","label":"benign","vector":[...],"gold":true}
//! {"kind":"document","id":"q0000-p0","label":"poison","vector":[...],"target_query_id":"q0000"}
//! ```
//!
//! The header comes first. Queries and documents may be interleaved. Optional
//! keys are omitted when empty and unknown keys are ignored, so embedding dumps
//! from other tools load as long as they carry these fields. Floats use the
//! shortest representation that parses back to the same value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::Scenario;
use crate::error::{BirdError, Result};
use crate::scalar::Scalar;
use crate::types::{EmbeddedDocument, Label, Query, SimilarityMetric};

pub const SCENARIO_FORMAT: &str = "bird-scenario/1";

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(deserialize = "T: Scalar"))]
enum Record<T> {
    Header {
        #[serde(default)]
        format: Option<String>,
        dimension: usize,
        #[serde(default)]
        metric: SimilarityMetric,
    },
    Query {
        id: String,
        vector: Vec<T>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_doc_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_answer_doc_ids: Option<Vec<String>>,
    },
    Document {
        id: String,
        label: Label,
        vector: Vec<T>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_query_id: Option<String>,
        #[serde(default, skip_serializing_if = "is_false")]
        gold: bool,
    },
}

/// Serialises a scenario; queries first, then documents, both in stored order.
pub fn write_scenario<T: Scalar, W: Write>(scenario: &Scenario<T>, mut out: W) -> Result<()> {
    let mut emit = |record: &Record<T>| -> Result<()> {
        serde_json::to_writer(&mut out, record).map_err(|e| BirdError::invalid(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| BirdError::io("<scenario writer>", e))
    };
    emit(&Record::Header {
        format: Some(SCENARIO_FORMAT.to_string()),
        dimension: scenario.dimension,
        metric: scenario.metric,
    })?;
    for q in &scenario.queries {
        emit(&Record::Query {
            id: q.id.clone(),
            vector: q.vector.clone(),
            gold_doc_id: scenario.gold_map.get(&q.id).cloned(),
            target_answer_doc_ids: q.target_answer_doc_ids.clone(),
        })?;
    }
    for d in &scenario.corpus {
        emit(&Record::Document {
            id: d.id.clone(),
            label: d.label,
            vector: d.vector.clone(),
            target_query_id: d.target_query_id.clone(),
            gold: d.gold,
        })?;
    }
    Ok(())
}

/// Parses a scenario stream. Errors carry the 1-based line number.
pub fn read_scenario<T: Scalar, R: BufRead>(input: R) -> Result<Scenario<T>> {
    let mut header: Option<(usize, SimilarityMetric)> = None;
    let mut queries = Vec::new();
    let mut corpus = Vec::new();
    let mut gold_map = BTreeMap::new();

    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| BirdError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record<T> = serde_json::from_str(&line).map_err(|e| BirdError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let check_dim = |len: usize, dimension: usize| -> Result<()> {
            if len != dimension {
                return Err(BirdError::Parse {
                    line: line_no,
                    message: format!("dimension mismatch: expected {dimension}, found {len}"),
                });
            }
            Ok(())
        };
        match (record, header) {
            (Record::Header { format, dimension, metric }, None) => {
                if let Some(f) = format {
                    if f != SCENARIO_FORMAT {
                        return Err(BirdError::Parse {
                            line: line_no,
                            message: format!("unsupported format {f:?}"),
                        });
                    }
                }
                if dimension == 0 {
                    return Err(BirdError::Parse {
                        line: line_no,
                        message: "dimension must be positive".into(),
                    });
                }
                header = Some((dimension, metric));
            }
            (Record::Header { .. }, Some(_)) => {
                return Err(BirdError::Parse {
                    line: line_no,
                    message: "duplicate header".into(),
                })
            }
            (_, None) => {
                return Err(BirdError::Parse {
                    line: line_no,
                    message: "record before header".into(),
                })
            }
            (
                Record::Query {
                    id,
                    vector,
                    gold_doc_id,
                    target_answer_doc_ids,
                },
                Some((dimension, _)),
            ) => {
                check_dim(vector.len(), dimension)?;
                if let Some(g) = gold_doc_id {
                    gold_map.insert(id.clone(), g);
                }
                queries.push(Query {
                    id,
                    vector,
                    target_answer_doc_ids,
                });
            }
            (
                Record::Document {
                    id,
                    label,
                    vector,
                    target_query_id,
                    gold,
                },
                Some((dimension, _)),
            ) => {
                check_dim(vector.len(), dimension)?;
                corpus.push(EmbeddedDocument {
                    id,
                    vector,
                    label,
                    gold,
                    target_query_id,
                });
            }
        }
    }

    let (dimension, metric) = header.ok_or(BirdError::Parse {
        line: 0,
        message: "missing header".into(),
    })?;
    let scenario = Scenario {
        dimension,
        metric,
        queries,
        corpus,
        gold_map,
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn save_scenario<T: Scalar>(scenario: &Scenario<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_scenario(scenario, &mut buf)?;
    atomic_write(path, &buf)
}

pub fn load_scenario<T: Scalar>(path: impl AsRef<Path>) -> Result<Scenario<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| BirdError::io(path, e))?;
    read_scenario(BufReader::new(file))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| BirdError::io(parent, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let file = File::create(&tmp).map_err(|e| BirdError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| BirdError::io(&tmp, e))?;
        w.flush().map_err(|e| BirdError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| BirdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{generate_scenario, ScenarioConfig};

    fn small() -> Scenario<f32> {
        generate_scenario(&ScenarioConfig {
            n_queries: 3,
            n_benign: 30,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let s = small();
        let mut buf = Vec::new();
        write_scenario(&s, &mut buf).unwrap();
        let back: Scenario<f32> = read_scenario(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn short_vector_reports_line() {
        let s = small();
        let mut buf = Vec::new();
        write_scenario(&s, &mut buf).unwrap();
        let mut lines: Vec<String> = String::from_utf8(buf).unwrap().lines().map(str::to_string).collect();
        // line 6 is the second document
        let mut v: serde_json::Value = serde_json::from_str(&lines[5]).unwrap();
        v["vector"].as_array_mut().unwrap().pop();
        lines[5] = v.to_string();
        let err = read_scenario::<f32, _>(lines.join("\n").as_bytes()).unwrap_err();
        match err {
            BirdError::Parse { line, message } => {
                assert_eq!(line, 6);
                assert!(message.contains("expected 64, found 63"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_reports_line() {
        let text = "{\"kind\":\"header\",\"dimension\":2}\nnot json\n";
        assert!(matches!(
            read_scenario::<f32, _>(text.as_bytes()),
            Err(BirdError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn missing_header() {
        let text = "{\"kind\":\"query\",\"id\":\"q\",\"vector\":[1,0]}\n";
        assert!(matches!(
            read_scenario::<f32, _>(text.as_bytes()),
            Err(BirdError::Parse { line: 1, .. })
        ));
        assert!(read_scenario::<f32, _>("".as_bytes()).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
