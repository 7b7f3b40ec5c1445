//! Data model, on-disk formats, answer-vocabulary construction, and the
//! deterministic synthetic corpus generator with simulated OCR sources.

mod jsonl;
mod synth;

pub use jsonl::{
    load_dataset, load_ocr_records, load_qa_items, write_dataset_files, DatasetPaths, OcrRecord,
};
pub use synth::{
    build_grounding_set, gen_synthetic, label_feature, GroundingExample, NoiseProfile,
    SynthConfig, DEFAULT_FEATURE_WIDTH, LABELS, LEXICON,
};

use std::collections::BTreeMap;

use crate::geometry::NormBox;
use crate::{Error, Result};

/// One question with its ten reference answers.
#[derive(Debug, Clone, PartialEq)]
pub struct QAItem {
    pub question_id: String,
    pub image_id: String,
    /// Lowercased question tokens.
    pub question: Vec<String>,
    /// Exactly ten reference strings.
    pub answers: Vec<String>,
}

impl QAItem {
    pub fn validate(&self) -> Result<()> {
        if self.answers.len() != 10 {
            return Err(Error::Contract(format!(
                "item {} has {} answers, expected 10",
                self.question_id,
                self.answers.len()
            )));
        }
        if self.question.is_empty() {
            return Err(Error::Contract(format!(
                "item {} has an empty question",
                self.question_id
            )));
        }
        Ok(())
    }

    /// Gold answer split into lowercase words (all ten references are
    /// identical in synthetic data; the first is used).
    pub fn answer_words(&self) -> Vec<String> {
        self.answers[0]
            .to_lowercase()
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }
}

/// One OCR-detected token.
#[derive(Debug, Clone, PartialEq)]
pub struct OcrToken {
    pub text: String,
    pub bbox: NormBox,
    pub line_id: usize,
    pub token_pos_in_line: usize,
    pub source_id: String,
}

/// One OCR-detected line: tokens ordered left-to-right.
#[derive(Debug, Clone, PartialEq)]
pub struct OcrLine {
    pub line_id: usize,
    pub bbox: NormBox,
    pub tokens: Vec<OcrToken>,
    pub source_id: String,
}

impl OcrLine {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        for (pos, t) in self.tokens.iter().enumerate() {
            if t.text.trim().is_empty() {
                return Err(Error::Contract(format!(
                    "empty token text in line {} of source {}",
                    self.line_id, self.source_id
                )));
            }
            t.bbox.validate()?;
            if !self.bbox.contains(&t.bbox, 1e-6) {
                return Err(Error::Contract(format!(
                    "token box escapes line box in line {} of source {}",
                    self.line_id, self.source_id
                )));
            }
            if t.line_id != self.line_id || t.token_pos_in_line != pos {
                return Err(Error::Contract(format!(
                    "token indices inconsistent in line {} of source {}",
                    self.line_id, self.source_id
                )));
            }
        }
        for w in self.tokens.windows(2) {
            if w[0].bbox.x_center() > w[1].bbox.x_center() {
                return Err(Error::Contract(format!(
                    "tokens not ordered by x-center in line {} of source {}",
                    self.line_id, self.source_id
                )));
            }
        }
        Ok(())
    }
}

/// One detected object region with its stand-in appearance feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRegion {
    pub label: String,
    pub bbox: NormBox,
    pub feature: Vec<f64>,
}

/// Reserved vocabulary positions.
pub const PAD: usize = 0;
pub const BEGIN: usize = 1;
pub const END: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const BEGIN_TOKEN: &str = "<begin>";
pub const END_TOKEN: &str = "<end>";

/// Fixed decoding vocabulary: three specials followed by the most frequent
/// training-answer words.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl AnswerVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn lookup(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Content words in index order (specials skipped).
    pub fn content_words(&self) -> &[String] {
        &self.words[3..]
    }

    /// Rebuild a vocabulary from its full word list (checkpoint loading).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3
            || words[PAD] != PAD_TOKEN
            || words[BEGIN] != BEGIN_TOKEN
            || words[END] != END_TOKEN
        {
            return Err(Error::Config(
                "answer vocabulary must start with <pad>, <begin>, <end>".into(),
            ));
        }
        let index: BTreeMap<String, usize> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        if index.len() != words.len() {
            return Err(Error::Config("answer vocabulary has duplicates".into()));
        }
        Ok(AnswerVocab { words, index })
    }
}

/// Build the decoding vocabulary from training answers: whitespace-split,
/// lowercased words ranked by descending frequency (ties lexicographic),
/// truncated to the `k` most frequent, preceded by the three specials.
pub fn build_vocab(train_answers: &[String], k: usize) -> Result<AnswerVocab> {
    if k == 0 {
        return Err(Error::Config("vocabulary size must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in train_answers {
        for w in a.to_lowercase().split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);

    let mut words = vec![
        PAD_TOKEN.to_string(),
        BEGIN_TOKEN.to_string(),
        END_TOKEN.to_string(),
    ];
    words.extend(ranked.into_iter().map(|(w, _)| w));
    let index = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i))
        .collect();
    Ok(AnswerVocab { words, index })
}

/// QA items joined to per-source OCR detections and object regions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<QAItem>,
    /// source_id → image_id → lines in detection order.
    pub ocr_by_source: BTreeMap<String, BTreeMap<String, Vec<OcrLine>>>,
    /// image_id → regions.
    pub objects: BTreeMap<String, Vec<ObjectRegion>>,
    pub split: String,
    qid_index: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(
        items: Vec<QAItem>,
        ocr_by_source: BTreeMap<String, BTreeMap<String, Vec<OcrLine>>>,
        objects: BTreeMap<String, Vec<ObjectRegion>>,
        split: impl Into<String>,
    ) -> Result<Self> {
        let mut qid_index = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            item.validate()?;
            if qid_index.insert(item.question_id.clone(), i).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate question_id {}",
                    item.question_id
                )));
            }
            if !objects.contains_key(&item.image_id) {
                return Err(Error::Integrity(format!(
                    "item {} references image {} absent from objects",
                    item.question_id, item.image_id
                )));
            }
            for (source, by_image) in &ocr_by_source {
                if !by_image.contains_key(&item.image_id) {
                    return Err(Error::Integrity(format!(
                        "item {} references image {} absent from OCR source {}",
                        item.question_id, item.image_id, source
                    )));
                }
            }
        }
        for by_image in ocr_by_source.values() {
            for lines in by_image.values() {
                for (i, line) in lines.iter().enumerate() {
                    if line.line_id != i {
                        return Err(Error::Integrity(
                            "line_id must equal detection-order index".into(),
                        ));
                    }
                    line.validate()?;
                }
            }
        }
        Ok(Dataset {
            items,
            ocr_by_source,
            objects,
            split: split.into(),
            qid_index,
        })
    }

    pub fn source_ids(&self) -> Vec<String> {
        self.ocr_by_source.keys().cloned().collect()
    }

    pub fn item_by_question_id(&self, qid: &str) -> Option<&QAItem> {
        self.qid_index.get(qid).map(|&i| &self.items[i])
    }

    pub fn lines_for(&self, source: &str, image_id: &str) -> &[OcrLine] {
        self.ocr_by_source
            .get(source)
            .and_then(|m| m.get(image_id))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn objects_for(&self, image_id: &str) -> &[ObjectRegion] {
        self.objects.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// True when every gold answer word appears (case-insensitively) among
    /// the source's detected tokens for the item's image.
    pub fn answerable_by_source(&self, item: &QAItem, source: &str) -> bool {
        let tokens: Vec<String> = self
            .lines_for(source, &item.image_id)
            .iter()
            .flat_map(|l| l.tokens.iter().map(|t| t.text.to_lowercase()))
            .collect();
        item.answer_words()
            .iter()
            .all(|w| tokens.iter().any(|t| t == w))
    }

    /// True when at least one registered source can answer the item.
    pub fn answerable_any_source(&self, item: &QAItem) -> bool {
        self.ocr_by_source
            .keys()
            .any(|s| self.answerable_by_source(item, s))
    }
}
