//! Deterministic synthetic corpus generator.
//!
//! Each generated image holds a few non-overlapping "signs": multi-line
//! blocks of lexicon words. Every sign doubles as an object region whose
//! appearance feature is a pseudo-random unit vector derived from its
//! label, so questions of the form "what is written on the <label>?" can be
//! answered by grounding the label and reading the text block on it.
//! Two (or more) simulated OCR sources observe the same ground truth
//! through independent noise: token deletion and character substitution.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::NormBox;
use crate::{Error, Result};

use super::{Dataset, ObjectRegion, OcrLine, OcrToken, QAItem};

/// Object labels signs can carry.
pub const LABELS: [&str; 8] = [
    "book", "sign", "jersey", "poster", "menu", "billboard", "card", "screen",
];

/// Closed word list answers are drawn from. Keeping answers inside a fixed
/// lexicon means corrupted tokens are recognizably out-of-lexicon while
/// unseen validation items still reuse familiar words.
pub const LEXICON: [&str; 120] = [
    "amber", "anchor", "apple", "arrow", "autumn", "badge", "baker", "banjo", "barrel", "basil",
    "beacon", "berry", "birch", "bishop", "blaze", "breeze", "brick", "bridge", "bronze", "brook",
    "butter", "cabin", "candle", "canyon", "cedar", "cherry", "china", "cider", "clover", "cobalt",
    "copper", "coral", "cotton", "creek", "cricket", "crystal", "daisy", "delta", "denim", "drift",
    "eagle", "ember", "falcon", "fable", "feather", "fern", "flint", "forest", "fossil", "frost",
    "garnet", "ginger", "glacier", "goose", "granite", "grove", "harbor", "hazel", "heron", "hollow",
    "honey", "indigo", "iris", "ivory", "jade", "jasper", "juniper", "kettle", "lagoon", "lantern",
    "lark", "laurel", "lemon", "lilac", "linen", "lotus", "maple", "marble", "meadow", "mint",
    "morning", "moss", "nectar", "north", "nutmeg", "olive", "onyx", "orchard", "otter", "pebble",
    "pepper", "pine", "plum", "prairie", "quartz", "quill", "raven", "reef", "ridge", "river",
    "robin", "rose", "rust", "saffron", "sage", "salmon", "sandal", "sierra", "silver", "sparrow",
    "spruce", "summit", "sunset", "thistle", "timber", "topaz", "tulip", "velvet", "walnut", "willow",
];

/// Default object-feature width.
pub const DEFAULT_FEATURE_WIDTH: usize = 32;

/// Per-source corruption rates, applied independently per token.
#[derive(Debug, Clone, Copy)]
pub struct NoiseProfile {
    /// Probability a token disappears from the detection.
    pub p_delete: f64,
    /// Probability one character of a token is substituted.
    pub p_substitute: f64,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    /// At least two sources. Defaults: source A deletes tokens, source B
    /// corrupts characters.
    pub sources: Vec<(String, NoiseProfile)>,
    pub feature_width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_train: 200,
            n_val: 50,
            sources: vec![
                (
                    "A".to_string(),
                    NoiseProfile {
                        p_delete: 0.15,
                        p_substitute: 0.0,
                    },
                ),
                (
                    "B".to_string(),
                    NoiseProfile {
                        p_delete: 0.0,
                        p_substitute: 0.15,
                    },
                ),
            ],
            feature_width: DEFAULT_FEATURE_WIDTH,
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic pseudo-random unit vector standing in for a visual
/// appearance feature; a pure function of (label, seed, width).
pub fn label_feature(label: &str, seed: u64, width: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label));
    let mut v: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x = round6(*x / norm);
    }
    v
}

/// Ground truth for one sign before OCR noise.
struct Sign {
    label: String,
    words: Vec<String>,
    /// Token boxes grouped into lines.
    lines: Vec<Vec<(String, NormBox)>>,
    bbox: NormBox,
}

fn layout_sign(rng: &mut ChaCha8Rng, label: &str, words: Vec<String>) -> Sign {
    let char_w = rng.gen_range(0.006..0.009);
    let line_h = rng.gen_range(0.015..0.022);
    let tok_gap = rng.gen_range(0.004..0.007);
    let line_gap = rng.gen_range(0.004..0.012); // below the clustering radius

    let n_lines = if words.len() == 1 {
        1
    } else {
        rng.gen_range(1..=2usize)
    };
    let split = if n_lines == 2 {
        rng.gen_range(1..words.len())
    } else {
        words.len()
    };
    let rows: Vec<&[String]> = if n_lines == 2 {
        vec![&words[..split], &words[split..]]
    } else {
        vec![&words[..]]
    };

    // Lay out at the origin; the caller translates into place.
    let mut lines = Vec::new();
    let mut y = 0.0;
    for row in rows {
        let mut x = 0.0;
        let mut line = Vec::new();
        for w in row {
            let width = char_w * w.len() as f64;
            line.push((
                w.clone(),
                NormBox {
                    x1: x,
                    y1: y,
                    x2: x + width,
                    y2: y + line_h,
                },
            ));
            x += width + tok_gap;
        }
        lines.push(line);
        y += line_h + line_gap;
    }
    let bbox = lines
        .iter()
        .flatten()
        .map(|(_, b)| *b)
        .reduce(|a, b| a.union(&b))
        .expect("sign has at least one token");
    Sign {
        label: label.to_string(),
        words,
        lines,
        bbox,
    }
}

fn translate(b: &NormBox, dx: f64, dy: f64) -> NormBox {
    NormBox {
        x1: round6(b.x1 + dx),
        y1: round6(b.y1 + dy),
        x2: round6(b.x2 + dx),
        y2: round6(b.y2 + dy),
    }
}

struct ImageTruth {
    image_id: String,
    signs: Vec<Sign>,
}

fn gen_image(rng: &mut ChaCha8Rng, image_id: String) -> ImageTruth {
    let n_signs = rng.gen_range(2..=5usize);
    let mut labels: Vec<&str> = LABELS.to_vec();
    labels.shuffle(rng);
    let labels = &labels[..n_signs];

    let mut placed: Vec<Sign> = Vec::new();
    for label in labels {
        let n_words = rng.gen_range(1..=3usize);
        let words: Vec<String> = (0..n_words)
            .map(|_| LEXICON[rng.gen_range(0..LEXICON.len())].to_string())
            .collect();
        let proto = layout_sign(rng, label, words);
        // Rejection placement: keep signs at least 0.06 apart so noise
        // never merges distinct clusters at the default radius.
        let mut done = false;
        for _ in 0..100 {
            let dx = rng.gen_range(0.02..(0.96 - proto.bbox.width()).max(0.021));
            let dy = rng.gen_range(0.02..(0.96 - proto.bbox.height()).max(0.021));
            let candidate = translate(&proto.bbox, dx, dy);
            let far_enough = placed.iter().all(|s| {
                let dxs = (s.bbox.x1 - candidate.x2).max(candidate.x1 - s.bbox.x2).max(0.0);
                let dys = (s.bbox.y1 - candidate.y2).max(candidate.y1 - s.bbox.y2).max(0.0);
                (dxs * dxs + dys * dys).sqrt() >= 0.06
            });
            if far_enough {
                placed.push(Sign {
                    label: proto.label.clone(),
                    words: proto.words.clone(),
                    lines: proto
                        .lines
                        .iter()
                        .map(|l| l.iter().map(|(w, b)| (w.clone(), translate(b, dx, dy))).collect())
                        .collect(),
                    bbox: candidate,
                });
                done = true;
                break;
            }
        }
        if !done {
            // Crowded image; settle for the signs already placed.
            break;
        }
    }
    ImageTruth {
        image_id,
        signs: placed,
    }
}

const ORDINALS: [&str; 3] = ["first", "second", "third"];

fn gen_question(rng: &mut ChaCha8Rng, qid: String, image: &ImageTruth) -> QAItem {
    let sign = &image.signs[rng.gen_range(0..image.signs.len())];
    let ordinal = sign.words.len() >= 2 && rng.gen_bool(0.3);
    let (question, answer) = if ordinal {
        let k = rng.gen_range(0..sign.words.len());
        (
            vec![
                "what".into(),
                "is".into(),
                "the".into(),
                ORDINALS[k].into(),
                "word".into(),
                "on".into(),
                "the".into(),
                sign.label.clone(),
                "?".into(),
            ],
            sign.words[k].clone(),
        )
    } else {
        (
            vec![
                "what".into(),
                "is".into(),
                "written".into(),
                "on".into(),
                "the".into(),
                sign.label.clone(),
                "?".into(),
            ],
            sign.words.join(" "),
        )
    };
    QAItem {
        question_id: qid,
        image_id: image.image_id.clone(),
        question,
        answers: vec![answer; 10],
    }
}

fn substitute_char(rng: &mut ChaCha8Rng, word: &str) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return word.to_string();
    }
    let pos = rng.gen_range(0..chars.len());
    let old = chars[pos];
    let mut new = old;
    while new == old {
        new = (b'a' + rng.gen_range(0..26u8)) as char;
    }
    chars[pos] = new;
    chars.into_iter().collect()
}

/// Apply a source's noise to the true token stream of an image and rebuild
/// detection-order lines.
fn observe(
    rng: &mut ChaCha8Rng,
    image: &ImageTruth,
    source: &str,
    noise: NoiseProfile,
) -> Vec<OcrLine> {
    // Reading order: lines of all signs sorted top-to-bottom, left-to-right.
    let mut raw_lines: Vec<Vec<(String, NormBox)>> = Vec::new();
    for sign in &image.signs {
        for line in &sign.lines {
            raw_lines.push(line.clone());
        }
    }
    raw_lines.sort_by(|a, b| {
        let ka = (a[0].1.y1, a[0].1.x1);
        let kb = (b[0].1.y1, b[0].1.x1);
        ka.partial_cmp(&kb).unwrap()
    });

    let mut lines = Vec::new();
    for tokens in raw_lines {
        let mut survivors: Vec<(String, NormBox)> = Vec::new();
        for (text, bbox) in tokens {
            if noise.p_delete > 0.0 && rng.gen_bool(noise.p_delete) {
                continue;
            }
            let text = if noise.p_substitute > 0.0 && rng.gen_bool(noise.p_substitute) {
                substitute_char(rng, &text)
            } else {
                text
            };
            survivors.push((text, bbox));
        }
        if survivors.is_empty() {
            continue;
        }
        let line_id = lines.len();
        let bbox = survivors
            .iter()
            .map(|(_, b)| *b)
            .reduce(|a, b| a.union(&b))
            .unwrap();
        let toks = survivors
            .into_iter()
            .enumerate()
            .map(|(pos, (text, bbox))| OcrToken {
                text,
                bbox,
                line_id,
                token_pos_in_line: pos,
                source_id: source.to_string(),
            })
            .collect();
        lines.push(OcrLine {
            line_id,
            bbox,
            tokens: toks,
            source_id: source.to_string(),
        });
    }
    lines
}

fn gen_split(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    split: &str,
    n_items: usize,
) -> Result<Dataset> {
    let mut items = Vec::new();
    let mut objects = BTreeMap::new();
    let mut ocr_by_source: BTreeMap<String, BTreeMap<String, Vec<OcrLine>>> = cfg
        .sources
        .iter()
        .map(|(s, _)| (s.clone(), BTreeMap::new()))
        .collect();

    for i in 0..n_items {
        let image_id = format!("{split}_img{i:04}");
        let image = gen_image(rng, image_id.clone());
        let qid = format!("{split}_q{i:04}");
        items.push(gen_question(rng, qid, &image));

        let regions: Vec<ObjectRegion> = image
            .signs
            .iter()
            .map(|s| ObjectRegion {
                label: s.label.clone(),
                bbox: NormBox {
                    x1: round6((s.bbox.x1 - 0.015).max(0.0)),
                    y1: round6((s.bbox.y1 - 0.015).max(0.0)),
                    x2: round6((s.bbox.x2 + 0.015).min(1.0)),
                    y2: round6((s.bbox.y2 + 0.015).min(1.0)),
                },
                feature: label_feature(&s.label, cfg.seed, cfg.feature_width),
            })
            .collect();
        objects.insert(image_id.clone(), regions);

        for (source, noise) in &cfg.sources {
            let lines = observe(rng, &image, source, *noise);
            ocr_by_source
                .get_mut(source)
                .unwrap()
                .insert(image_id.clone(), lines);
        }
    }

    Dataset::new(items, ocr_by_source, objects, split)
}

/// Generate the train and validation splits. Deterministic for a fixed
/// config: the same seed always yields identical datasets.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(Error::Config("need at least one item per split".into()));
    }
    if cfg.sources.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 OCR sources, got {}",
            cfg.sources.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = gen_split(&mut rng, cfg, "train", cfg.n_train)?;
    let val = gen_split(&mut rng, cfg, "val", cfg.n_val)?;
    Ok((train, val))
}

/// One referral-expression example: a description, candidate regions, and
/// the index of the region the description names.
#[derive(Debug, Clone)]
pub struct GroundingExample {
    pub description: Vec<String>,
    pub candidates: Vec<ObjectRegion>,
    pub gold: usize,
}

/// Build referral examples from a dataset: the description names an object
/// label, candidates mix the gold region with distractors of other labels,
/// and the gold position is uniformly shuffled.
pub fn build_grounding_set(
    dataset: &Dataset,
    n_candidates: usize,
    per_image: usize,
    seed: u64,
) -> Result<Vec<GroundingExample>> {
    if n_candidates < 2 {
        return Err(Error::Config("need at least 2 candidates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<&ObjectRegion> = dataset.objects.values().flatten().collect();
    if pool.is_empty() {
        return Err(Error::EmptyInput("dataset has no object regions"));
    }
    let mut out = Vec::new();
    for regions in dataset.objects.values() {
        for _ in 0..per_image {
            let gold_region = &regions[rng.gen_range(0..regions.len())];
            let mut candidates = vec![gold_region.clone()];
            let mut used: Vec<&str> = vec![&gold_region.label];
            let mut guard = 0;
            while candidates.len() < n_candidates && guard < 1000 {
                guard += 1;
                let c = pool[rng.gen_range(0..pool.len())];
                if used.iter().any(|&u| u == c.label) {
                    continue;
                }
                used.push(&c.label);
                candidates.push(c.clone());
            }
            if candidates.len() < n_candidates {
                continue; // not enough distinct labels in this dataset
            }
            let gold_slot = rng.gen_range(0..n_candidates);
            candidates.swap(0, gold_slot);
            out.push(GroundingExample {
                description: vec!["the".into(), candidates[gold_slot].label.clone()],
                candidates,
                gold: gold_slot,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SynthConfig {
            n_train: 10,
            n_val: 5,
            ..SynthConfig::default()
        };
        let (a_train, a_val) = gen_synthetic(&cfg).unwrap();
        let (b_train, b_val) = gen_synthetic(&cfg).unwrap();
        assert_eq!(a_train.items, b_train.items);
        assert_eq!(a_val.items, b_val.items);
        assert_eq!(a_train.ocr_by_source, b_train.ocr_by_source);
        assert_eq!(a_val.objects, b_val.objects);
    }

    #[test]
    fn zero_noise_sources_are_identical_and_clean() {
        let quiet = NoiseProfile {
            p_delete: 0.0,
            p_substitute: 0.0,
        };
        let cfg = SynthConfig {
            n_train: 15,
            n_val: 2,
            sources: vec![("A".into(), quiet), ("B".into(), quiet)],
            ..SynthConfig::default()
        };
        let (train, _) = gen_synthetic(&cfg).unwrap();
        // Identical content up to the source tag each line carries.
        let strip = |source: &str| -> Vec<(String, Vec<(String, NormBox)>)> {
            train.ocr_by_source[source]
                .iter()
                .map(|(img, lines)| {
                    (
                        img.clone(),
                        lines
                            .iter()
                            .flat_map(|l| l.tokens.iter().map(|t| (t.text.clone(), t.bbox)))
                            .collect(),
                    )
                })
                .collect()
        };
        assert_eq!(strip("A"), strip("B"));
        for item in &train.items {
            assert!(train.answerable_by_source(item, "A"), "{}", item.question_id);
        }
    }

    #[test]
    fn union_of_noisy_sources_beats_each_alone() {
        let cfg = SynthConfig {
            seed: 7,
            n_train: 200,
            n_val: 2,
            ..SynthConfig::default()
        };
        let (train, _) = gen_synthetic(&cfg).unwrap();
        let frac = |f: &dyn Fn(&QAItem) -> bool| {
            train.items.iter().filter(|i| f(i)).count() as f64 / train.items.len() as f64
        };
        let a = frac(&|i| train.answerable_by_source(i, "A"));
        let b = frac(&|i| train.answerable_by_source(i, "B"));
        let any = frac(&|i| train.answerable_any_source(i));
        assert!(any > a, "union {any} vs A {a}");
        assert!(any > b, "union {any} vs B {b}");
        assert!(a < 1.0 && b < 1.0, "sources should be fallible: {a}, {b}");
    }

    #[test]
    fn generated_lines_satisfy_invariants() {
        let cfg = SynthConfig {
            n_train: 30,
            n_val: 5,
            ..SynthConfig::default()
        };
        let (train, val) = gen_synthetic(&cfg).unwrap();
        for d in [&train, &val] {
            for by_image in d.ocr_by_source.values() {
                for lines in by_image.values() {
                    for line in lines {
                        line.validate().unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn label_features_are_unit_and_stable() {
        let f1 = label_feature("sign", 7, 32);
        let f2 = label_feature("sign", 7, 32);
        let g = label_feature("book", 7, 32);
        assert_eq!(f1, f2);
        assert_ne!(f1, g);
        let norm: f64 = f1.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-3);
    }

    #[test]
    fn grounding_examples_have_unique_gold_label() {
        let cfg = SynthConfig {
            n_train: 20,
            n_val: 2,
            ..SynthConfig::default()
        };
        let (train, _) = gen_synthetic(&cfg).unwrap();
        let set = build_grounding_set(&train, 4, 2, 3).unwrap();
        assert!(!set.is_empty());
        for ex in &set {
            assert_eq!(ex.candidates.len(), 4);
            let gold_label = &ex.candidates[ex.gold].label;
            assert_eq!(ex.description[1], *gold_label);
            let matches = ex
                .candidates
                .iter()
                .filter(|c| &c.label == gold_label)
                .count();
            assert_eq!(matches, 1);
        }
        // Gold positions should spread over all slots.
        let mut histogram = [0usize; 4];
        for ex in &set {
            histogram[ex.gold] += 1;
        }
        assert!(histogram.iter().all(|&c| c > 0), "{histogram:?}");
    }

    #[test]
    fn too_few_sources_is_a_config_error() {
        let cfg = SynthConfig {
            sources: vec![(
                "A".into(),
                NoiseProfile {
                    p_delete: 0.0,
                    p_substitute: 0.0,
                },
            )],
            ..SynthConfig::default()
        };
        assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))));
    }
}
