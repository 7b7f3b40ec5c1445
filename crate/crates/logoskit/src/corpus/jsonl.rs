//! On-disk JSONL formats and their canonical writers.
//!
//! One JSON object per line, UTF-8, all floats with exactly six decimal
//! places. Writers are canonical: re-serializing a loaded file reproduces
//! it byte for byte.
//!
//! * QA file: `{"question_id","image_id","question":[...],"answers":[10 strings]}`
//! * OCR file (one per source):
//!   `{"image_id","source","lines":[{"line_id","box":[x1,y1,x2,y2],"tokens":[{"text","box":[...]}]}]}`
//! * Objects file: `{"image_id","objects":[{"label","box":[...],"feature":[F floats]}]}`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::geometry::NormBox;
use crate::{Error, Result};

use super::{Dataset, ObjectRegion, OcrLine, OcrToken, QAItem};

pub(crate) fn fmt_f6(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_box(b: &NormBox) -> String {
    format!(
        "[{},{},{},{}]",
        fmt_f6(b.x1),
        fmt_f6(b.y1),
        fmt_f6(b.x2),
        fmt_f6(b.y2)
    )
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn json_str_list(xs: &[String]) -> String {
    let mut out = String::from("[");
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&json_str(x));
    }
    out.push(']');
    out
}

pub(crate) fn qa_record(item: &QAItem) -> String {
    format!(
        r#"{{"question_id":{},"image_id":{},"question":{},"answers":{}}}"#,
        json_str(&item.question_id),
        json_str(&item.image_id),
        json_str_list(&item.question),
        json_str_list(&item.answers)
    )
}

pub(crate) fn ocr_record(image_id: &str, source: &str, lines: &[OcrLine]) -> String {
    let mut out = format!(
        r#"{{"image_id":{},"source":{},"lines":["#,
        json_str(image_id),
        json_str(source)
    );
    for (i, line) in lines.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(
            out,
            r#"{{"line_id":{},"box":{},"tokens":["#,
            line.line_id,
            fmt_box(&line.bbox)
        )
        .unwrap();
        for (j, t) in line.tokens.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, r#"{{"text":{},"box":{}}}"#, json_str(&t.text), fmt_box(&t.bbox)).unwrap();
        }
        out.push_str("]}");
    }
    out.push_str("]}");
    out
}

pub(crate) fn objects_record(image_id: &str, objects: &[ObjectRegion]) -> String {
    let mut out = format!(r#"{{"image_id":{},"objects":["#, json_str(image_id));
    for (i, o) in objects.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let feats: Vec<String> = o.feature.iter().map(|&f| fmt_f6(f)).collect();
        write!(
            out,
            r#"{{"label":{},"box":{},"feature":[{}]}}"#,
            json_str(&o.label),
            fmt_box(&o.bbox),
            feats.join(",")
        )
        .unwrap();
    }
    out.push_str("]}");
    out
}

/// File locations of one dataset split.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub qa: PathBuf,
    /// source_id → path.
    pub ocr: Vec<(String, PathBuf)>,
    pub objects: PathBuf,
}

impl DatasetPaths {
    /// Conventional layout used by the generator and the CLI:
    /// `<dir>/<split>.qa.jsonl`, `<dir>/<split>.ocr.<source>.jsonl`,
    /// `<dir>/<split>.objects.jsonl`.
    pub fn conventional(dir: &Path, split: &str, sources: &[String]) -> Self {
        DatasetPaths {
            qa: dir.join(format!("{split}.qa.jsonl")),
            ocr: sources
                .iter()
                .map(|s| (s.clone(), dir.join(format!("{split}.ocr.{s}.jsonl"))))
                .collect(),
            objects: dir.join(format!("{split}.objects.jsonl")),
        }
    }
}

/// Serialize a dataset to its three file kinds.
pub fn write_dataset_files(dataset: &Dataset, paths: &DatasetPaths) -> Result<()> {
    let mut qa = String::new();
    for item in &dataset.items {
        qa.push_str(&qa_record(item));
        qa.push('\n');
    }
    fs::write(&paths.qa, qa).map_err(|e| Error::io(&paths.qa, e))?;

    for (source, path) in &paths.ocr {
        let by_image = dataset.ocr_by_source.get(source).ok_or_else(|| {
            Error::Integrity(format!("dataset has no OCR source {source}"))
        })?;
        let mut out = String::new();
        for (image_id, lines) in by_image {
            out.push_str(&ocr_record(image_id, source, lines));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
    }

    let mut obj = String::new();
    for (image_id, objects) in &dataset.objects {
        obj.push_str(&objects_record(image_id, objects));
        obj.push('\n');
    }
    fs::write(&paths.objects, obj).map_err(|e| Error::io(&paths.objects, e))?;
    Ok(())
}

#[derive(Deserialize)]
struct QaRaw {
    question_id: String,
    image_id: String,
    question: Vec<String>,
    answers: Vec<String>,
}

#[derive(Deserialize)]
struct TokenRaw {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct LineRaw {
    line_id: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    tokens: Vec<TokenRaw>,
}

#[derive(Deserialize)]
struct OcrRaw {
    image_id: String,
    source: String,
    lines: Vec<LineRaw>,
}

#[derive(Deserialize)]
struct ObjectRaw {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    feature: Vec<f64>,
}

#[derive(Deserialize)]
struct ObjectsRaw {
    image_id: String,
    objects: Vec<ObjectRaw>,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn to_box(path: &Path, line: usize, raw: [f64; 4]) -> Result<NormBox> {
    NormBox::new(raw[0], raw[1], raw[2], raw[3]).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })
}

/// One OCR file record: a source's detections for one image.
#[derive(Debug, Clone)]
pub struct OcrRecord {
    pub image_id: String,
    pub source: String,
    pub lines: Vec<OcrLine>,
}

/// Load a standalone OCR file without joining it into a dataset.
pub fn load_ocr_records(path: &Path) -> Result<Vec<OcrRecord>> {
    let mut out = Vec::new();
    for (lineno, raw) in parse_lines::<OcrRaw>(path)? {
        let mut lines = Vec::with_capacity(raw.lines.len());
        for l in raw.lines {
            let tokens = l
                .tokens
                .into_iter()
                .enumerate()
                .map(|(pos, t)| {
                    Ok(OcrToken {
                        text: t.text,
                        bbox: to_box(path, lineno, t.bbox)?,
                        line_id: l.line_id,
                        token_pos_in_line: pos,
                        source_id: raw.source.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let line = OcrLine {
                line_id: l.line_id,
                bbox: to_box(path, lineno, l.bbox)?,
                tokens,
                source_id: raw.source.clone(),
            };
            line.validate().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: e.to_string(),
            })?;
            lines.push(line);
        }
        out.push(OcrRecord {
            image_id: raw.image_id,
            source: raw.source,
            lines,
        });
    }
    Ok(out)
}

/// Load a standalone QA file.
pub fn load_qa_items(path: &Path) -> Result<Vec<QAItem>> {
    let mut items = Vec::new();
    for (lineno, raw) in parse_lines::<QaRaw>(path)? {
        let item = QAItem {
            question_id: raw.question_id,
            image_id: raw.image_id,
            question: raw.question,
            answers: raw.answers,
        };
        item.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Load and join the three file kinds into a validated dataset.
pub fn load_dataset(paths: &DatasetPaths, split: &str) -> Result<Dataset> {
    let items = load_qa_items(&paths.qa)?;

    let mut ocr_by_source: BTreeMap<String, BTreeMap<String, Vec<OcrLine>>> = BTreeMap::new();
    for (source, path) in &paths.ocr {
        let mut by_image = BTreeMap::new();
        for rec in load_ocr_records(path)? {
            if &rec.source != source {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: 0,
                    msg: format!(
                        "record source {} does not match file source {source}",
                        rec.source
                    ),
                });
            }
            if by_image.insert(rec.image_id.clone(), rec.lines).is_some() {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: 0,
                    msg: format!("duplicate OCR record for image {}", rec.image_id),
                });
            }
        }
        ocr_by_source.insert(source.clone(), by_image);
    }

    let mut objects = BTreeMap::new();
    for (lineno, raw) in parse_lines::<ObjectsRaw>(&paths.objects)? {
        let mut regions = Vec::with_capacity(raw.objects.len());
        let mut width = None;
        for o in raw.objects {
            let w = o.feature.len();
            if *width.get_or_insert(w) != w {
                return Err(Error::Parse {
                    path: paths.objects.clone(),
                    line: lineno,
                    msg: "inconsistent feature widths within a record".into(),
                });
            }
            regions.push(ObjectRegion {
                label: o.label,
                bbox: to_box(&paths.objects, lineno, o.bbox)?,
                feature: o.feature,
            });
        }
        if objects.insert(raw.image_id.clone(), regions).is_some() {
            return Err(Error::Parse {
                path: paths.objects.clone(),
                line: lineno,
                msg: format!("duplicate objects record for image {}", raw.image_id),
            });
        }
    }

    Dataset::new(items, ocr_by_source, objects, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SynthConfig};

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            seed: 5,
            n_train: 12,
            n_val: 4,
            ..SynthConfig::default()
        };
        let (train, _val) = gen_synthetic(&cfg).unwrap();
        let paths = DatasetPaths::conventional(dir.path(), "train", &train.source_ids());
        write_dataset_files(&train, &paths).unwrap();
        let loaded = load_dataset(&paths, "train").unwrap();

        let reread = |p: &std::path::Path| std::fs::read(p).unwrap();
        let before: Vec<Vec<u8>> = std::iter::once(reread(&paths.qa))
            .chain(paths.ocr.iter().map(|(_, p)| reread(p)))
            .chain(std::iter::once(reread(&paths.objects)))
            .collect();

        let paths2 = DatasetPaths::conventional(dir.path(), "again", &loaded.source_ids());
        write_dataset_files(&loaded, &paths2).unwrap();
        let after: Vec<Vec<u8>> = std::iter::once(reread(&paths2.qa))
            .chain(paths2.ocr.iter().map(|(_, p)| reread(p)))
            .chain(std::iter::once(reread(&paths2.objects)))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_qa_file_loads_zero_items() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths {
            qa: dir.path().join("qa.jsonl"),
            ocr: vec![],
            objects: dir.path().join("obj.jsonl"),
        };
        std::fs::write(&paths.qa, "").unwrap();
        std::fs::write(&paths.objects, "").unwrap();
        let d = load_dataset(&paths, "train").unwrap();
        assert_eq!(d.items.len(), 0);
    }

    #[test]
    fn missing_answer_is_a_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths {
            qa: dir.path().join("qa.jsonl"),
            ocr: vec![],
            objects: dir.path().join("obj.jsonl"),
        };
        let nine: Vec<String> = (0..9).map(|i| format!("\"a{i}\"")).collect();
        std::fs::write(
            &paths.qa,
            format!(
                "{{\"question_id\":\"q0\",\"image_id\":\"i0\",\"question\":[\"x\"],\"answers\":[{}]}}\n",
                nine.join(",")
            ),
        )
        .unwrap();
        std::fs::write(&paths.objects, "").unwrap();
        match load_dataset(&paths, "train") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_image_reference_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths {
            qa: dir.path().join("qa.jsonl"),
            ocr: vec![],
            objects: dir.path().join("obj.jsonl"),
        };
        let answers: Vec<String> = (0..10).map(|_| "\"a\"".to_string()).collect();
        std::fs::write(
            &paths.qa,
            format!(
                "{{\"question_id\":\"q0\",\"image_id\":\"ghost\",\"question\":[\"x\"],\"answers\":[{}]}}\n",
                answers.join(",")
            ),
        )
        .unwrap();
        std::fs::write(&paths.objects, "").unwrap();
        assert!(matches!(
            load_dataset(&paths, "train"),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths {
            qa: dir.path().join("qa.jsonl"),
            ocr: vec![],
            objects: dir.path().join("obj.jsonl"),
        };
        std::fs::write(&paths.qa, "\n{not json}\n").unwrap();
        std::fs::write(&paths.objects, "").unwrap();
        match load_dataset(&paths, "train") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
