//! The network: joint text encoding over question ∥ object labels ∥ OCR
//! texts, per-token multimodal fusion, a multimodal transformer, pointer
//! answer decoding over vocabulary plus OCR copy positions, and the
//! grounding classification head used for question-visual pretraining.
//!
//! Question-visual pretraining and the main task share every encoder and
//! transformer weight; only the grounding scorer versus the pointer and
//! vocabulary heads differ.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerVocab, Dataset, ObjectRegion, QAItem, END, END_TOKEN};
use crate::geometry::{cluster_lines, spatial_descriptor, NormBox};
use crate::phoc::phoc_encode;
use crate::tensor::{Array, Tape, Var};
use crate::{Error, Result};

/// Network dimensions. The text encoder is three layers deep; widths are
/// desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub text_encoder_layers: usize,
    pub mm_layers: usize,
    /// Decoding step cap T.
    pub max_decode_steps: usize,
    pub phoc_width: usize,
    /// Per-attribute sinusoid width; the descriptor is three times this.
    pub spatial_embed_width: usize,
    pub feature_width: usize,
    pub max_seq_len: usize,
    pub ffn_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            text_encoder_layers: 3,
            mm_layers: 2,
            max_decode_steps: 12,
            phoc_width: crate::phoc::PHOC_LEN,
            spatial_embed_width: crate::geometry::SPATIAL_EMBED_WIDTH,
            feature_width: crate::corpus::DEFAULT_FEATURE_WIDTH,
            max_seq_len: 256,
            ffn_width: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_decode_steps == 0 {
            return Err(Error::Config("max_decode_steps must be at least 1".into()));
        }
        if self.spatial_embed_width % 2 != 0 || self.spatial_embed_width == 0 {
            return Err(Error::Config("spatial_embed_width must be even".into()));
        }
        Ok(())
    }

    pub fn spatial_width(&self) -> usize {
        3 * self.spatial_embed_width
    }

    fn ocr_fuse_width(&self) -> usize {
        self.d_model + self.phoc_width + self.spatial_width() + self.feature_width + 4
    }

    fn obj_fuse_width(&self) -> usize {
        self.d_model + self.feature_width + 4
    }
}

/// Word-level vocabulary for the text encoder, with an unknown-word slot.
/// Built from training questions, object labels, and answer words — not
/// from raw OCR detections, so corrupted tokens map to `<unk>` the same
/// way at training and validation time.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl TokenVocab {
    pub fn build(words: impl IntoIterator<Item = String>) -> TokenVocab {
        let mut set: std::collections::BTreeSet<String> = words
            .into_iter()
            .map(|w| w.to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        for s in [
            crate::corpus::PAD_TOKEN,
            crate::corpus::BEGIN_TOKEN,
            END_TOKEN,
            UNK_TOKEN,
        ] {
            set.remove(s);
        }
        let mut list = vec![
            crate::corpus::PAD_TOKEN.to_string(),
            crate::corpus::BEGIN_TOKEN.to_string(),
            END_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        list.extend(set);
        Self::from_words(list).expect("specials are in place by construction")
    }

    pub fn from_words(words: Vec<String>) -> Result<TokenVocab> {
        if words.len() < 4 || words[3] != UNK_TOKEN {
            return Err(Error::Config("token vocabulary missing specials".into()));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(TokenVocab { words, index })
    }

    /// Gather encoder token ids from a training corpus.
    pub fn from_dataset(dataset: &Dataset, vocab: &AnswerVocab) -> TokenVocab {
        let mut words: Vec<String> = Vec::new();
        for item in &dataset.items {
            words.extend(item.question.iter().cloned());
        }
        for regions in dataset.objects.values() {
            words.extend(regions.iter().map(|r| r.label.clone()));
        }
        words.extend(vocab.content_words().iter().cloned());
        TokenVocab::build(words)
    }

    pub const UNK: usize = 3;

    pub fn id_or_unk(&self, w: &str) -> usize {
        self.index
            .get(&w.to_lowercase())
            .copied()
            .unwrap_or(Self::UNK)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Named parameter arrays, the single owner of model state.
#[derive(Debug, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> &Array {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(Array::len).sum()
    }
}

/// One forward pass: a tape plus the parameters bound onto it so far.
pub struct Session<'m> {
    pub tape: Tape,
    model: &'m Model,
    bound: BTreeMap<String, Var>,
    /// Attention probability matrices recorded by every layer, for
    /// diagnostics and contract tests.
    pub attn_probs: Vec<Var>,
}

impl<'m> Session<'m> {
    fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.tape.leaf(self.model.params.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, a: Array) -> Var {
        self.tape.leaf(a)
    }

    /// Parameters touched by this session, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}

/// Per-token OCR features ready for fusion.
#[derive(Debug, Clone)]
pub struct OcrTokenView {
    pub text: String,
    pub phoc: Vec<f64>,
    pub spatial: Vec<f64>,
    pub feature: Vec<f64>,
    pub bbox: NormBox,
}

/// Everything the model consumes for one (item, OCR source) pair.
#[derive(Debug, Clone)]
pub struct ItemView {
    pub question: Vec<String>,
    pub objects: Vec<ObjectRegion>,
    pub ocr: Vec<OcrTokenView>,
}

impl ItemView {
    /// Assemble the view: cluster the source's lines, derive hierarchical
    /// descriptors and PHOC codes per token, and attach to each token the
    /// appearance feature of the object region it overlaps most.
    pub fn build(
        dataset: &Dataset,
        item: &QAItem,
        source: &str,
        epsilon: f64,
        cfg: &ModelConfig,
    ) -> Result<ItemView> {
        let objects = dataset.objects_for(&item.image_id).to_vec();
        for o in &objects {
            if o.feature.len() != cfg.feature_width {
                return Err(Error::Shape {
                    op: "item_view",
                    lhs: format!("feature {}", o.feature.len()),
                    rhs: format!("configured {}", cfg.feature_width),
                });
            }
        }
        let lines = dataset.lines_for(source, &item.image_id);
        let mut ocr = Vec::new();
        if !lines.is_empty() {
            let boxes: Vec<NormBox> = lines.iter().map(|l| l.bbox).collect();
            let clusters = cluster_lines(&boxes, epsilon)?;
            for (line_idx, line) in lines.iter().enumerate() {
                for (tok_idx, tok) in line.tokens.iter().enumerate() {
                    let sd = spatial_descriptor(
                        clusters.cluster_of_line[line_idx],
                        line_idx,
                        tok_idx,
                        cfg.spatial_embed_width,
                    )?;
                    let mut phoc = phoc_encode(&tok.text).to_f64();
                    phoc.truncate(cfg.phoc_width);
                    phoc.resize(cfg.phoc_width, 0.0);
                    ocr.push(OcrTokenView {
                        text: tok.text.to_lowercase(),
                        phoc,
                        spatial: sd.embedding,
                        feature: overlapping_feature(&tok.bbox, &objects, cfg.feature_width),
                        bbox: tok.bbox,
                    });
                }
            }
        }
        Ok(ItemView {
            question: item.question.clone(),
            objects,
            ocr,
        })
    }
}

fn overlapping_feature(bbox: &NormBox, objects: &[ObjectRegion], width: usize) -> Vec<f64> {
    let mut best: Option<(f64, &ObjectRegion)> = None;
    for o in objects {
        let a = o.bbox.intersection_area(bbox);
        if a > 0.0 && best.map_or(true, |(ba, _)| a > ba) {
            best = Some((a, o));
        }
    }
    match best {
        Some((_, o)) => o.feature.clone(),
        None => vec![0.0; width],
    }
}

/// Contextual embeddings for the three text segments.
pub struct TextEncoding {
    pub question: Var,
    pub objects: Var,
    pub ocr: Var,
}

/// Multimodal transformer output, sliced by segment.
pub struct MmOutput {
    pub question: Var,
    pub objects: Var,
    pub ocr: Var,
    pub decoder: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    EndToken,
    LengthCap,
}

/// Greedy decode transcript for one OCR source.
#[derive(Debug, Clone)]
pub struct DecodedAnswer {
    pub tokens: Vec<String>,
    /// Chosen position per emitted token (vocabulary index or V + copy
    /// index).
    pub positions: Vec<usize>,
    /// Emitted-token probability per step: the distribution mass summed
    /// over every position sharing the emitted surface form.
    pub step_probs: Vec<f64>,
    pub terminated_by: Termination,
    /// Probability of the `<end>` emission that terminated decoding.
    pub end_prob: Option<f64>,
}

impl DecodedAnswer {
    pub fn surface(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Cached context for repeated decoding against one (item, source) pair.
pub struct EncodedItem {
    pub question: Array,
    pub objects: Array,
    pub ocr: Array,
    /// Lowercased surface of each OCR copy position.
    pub copy_texts: Vec<String>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: AnswerVocab,
    pub tokens: TokenVocab,
    pub params: ParamStore,
}

/// Expected shape of every parameter for a configuration.
fn param_shapes(
    cfg: &ModelConfig,
    n_tokens: usize,
    vocab_len: usize,
) -> BTreeMap<String, (usize, usize)> {
    let d = cfg.d_model;
    let f = cfg.ffn_width;
    let mut m = BTreeMap::new();
    m.insert("tok_emb".into(), (n_tokens, d));
    m.insert("seg_emb".into(), (3, d));
    m.insert("type_emb".into(), (4, d));
    let mut layer = |prefix: String| {
        for w in ["wq", "wk", "wv", "wo"] {
            m.insert(format!("{prefix}.attn.{w}"), (d, d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            m.insert(format!("{prefix}.attn.{b}"), (1, d));
        }
        m.insert(format!("{prefix}.ln1.g"), (1, d));
        m.insert(format!("{prefix}.ln1.b"), (1, d));
        m.insert(format!("{prefix}.ffn.w1"), (d, f));
        m.insert(format!("{prefix}.ffn.b1"), (1, f));
        m.insert(format!("{prefix}.ffn.w2"), (f, d));
        m.insert(format!("{prefix}.ffn.b2"), (1, d));
        m.insert(format!("{prefix}.ln2.g"), (1, d));
        m.insert(format!("{prefix}.ln2.b"), (1, d));
    };
    for l in 0..cfg.text_encoder_layers {
        layer(format!("enc.{l}"));
    }
    for l in 0..cfg.mm_layers {
        layer(format!("mm.{l}"));
    }
    // The appearance-feature block is one shared projection: an OCR token
    // and the object region it lies on then carry the same feature image
    // in both fused representations, so attention can match them by
    // identity instead of having to align two independent random maps.
    m.insert("fuse_feat.w".into(), (cfg.feature_width, d));
    m.insert(
        "fuse_ocr.w".into(),
        (cfg.ocr_fuse_width() - cfg.feature_width, d),
    );
    m.insert("fuse_ocr.b".into(), (1, d));
    m.insert("fuse_ocr.ln.g".into(), (1, d));
    m.insert("fuse_ocr.ln.b".into(), (1, d));
    m.insert(
        "fuse_obj.w".into(),
        (cfg.obj_fuse_width() - cfg.feature_width, d),
    );
    m.insert("fuse_obj.b".into(), (1, d));
    m.insert("fuse_obj.ln.g".into(), (1, d));
    m.insert("fuse_obj.ln.b".into(), (1, d));
    m.insert("vocab_head.w".into(), (d, vocab_len));
    m.insert("vocab_head.b".into(), (1, vocab_len));
    m.insert("ptr.ocr.w".into(), (d, d));
    m.insert("ptr.ocr.b".into(), (1, d));
    m.insert("ptr.dec.w".into(), (d, d));
    m.insert("ptr.dec.b".into(), (1, d));
    m.insert("ground.w".into(), (d, 1));
    m.insert("ground.b".into(), (1, 1));
    m
}

const LN_EPS: f64 = 1e-5;
const MASK_OFF: f64 = -1e9;

/// Fan-balanced weight scale. The base learning rate is small and the
/// schedule short, so the init must already sit at a healthy operating
/// point: attention logits of order one, activations of unit variance.
fn init_std(rows: usize, cols: usize) -> f64 {
    (2.0 / (rows + cols) as f64).sqrt()
}

/// Embedding tables are summed with sinusoidal position rows whose
/// elements are order one; token identity must stay visible next to them.
const EMB_STD: f64 = 0.5;

/// Scoring heads start near zero so every initial output distribution is
/// close to uniform.
const HEAD_STD: f64 = 0.02;

fn is_head_weight(name: &str) -> bool {
    matches!(
        name,
        "ground.w" | "vocab_head.w" | "ptr.ocr.w" | "ptr.dec.w"
    )
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller on the deterministic stream.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Model {
    /// Seeded initialization: weights from a small normal, layer-norm
    /// gains at one, every bias at zero.
    pub fn new(
        cfg: ModelConfig,
        vocab: AnswerVocab,
        tokens: TokenVocab,
        seed: u64,
    ) -> Result<Model> {
        cfg.validate()?;
        let shapes = param_shapes(&cfg, tokens.len(), vocab.len());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, (r, c)) in shapes {
            let last = name.rsplit('.').next().expect("split yields at least one");
            let a = if last == "g" {
                Array::from_fn(r, c, |_, _| 1.0)
            } else if last.starts_with('b') {
                Array::zeros(r, c)
            } else if name.ends_with("_emb") {
                Array::from_fn(r, c, |_, _| normal(&mut rng) * EMB_STD)
            } else if is_head_weight(&name) {
                Array::from_fn(r, c, |_, _| normal(&mut rng) * HEAD_STD)
            } else {
                Array::from_fn(r, c, |_, _| normal(&mut rng) * init_std(r, c))
            };
            map.insert(name, a);
        }
        Ok(Model {
            cfg,
            vocab,
            tokens,
            params: ParamStore { map },
        })
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            tape: Tape::new(),
            model: self,
            bound: BTreeMap::new(),
            attn_probs: Vec::new(),
        }
    }

    /// One post-norm transformer layer over `x`, optionally masked.
    fn layer(&self, s: &mut Session, prefix: &str, x: Var, mask: Option<Var>) -> Result<Var> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let (wq, bq) = (s.p(&format!("{prefix}.attn.wq")), s.p(&format!("{prefix}.attn.bq")));
        let (wk, bk) = (s.p(&format!("{prefix}.attn.wk")), s.p(&format!("{prefix}.attn.bk")));
        let (wv, bv) = (s.p(&format!("{prefix}.attn.wv")), s.p(&format!("{prefix}.attn.bv")));
        let (wo, bo) = (s.p(&format!("{prefix}.attn.wo")), s.p(&format!("{prefix}.attn.bo")));

        let q = s.tape.matmul(x, wq)?;
        let q = s.tape.add_row(q, bq)?;
        let k = s.tape.matmul(x, wk)?;
        let k = s.tape.add_row(k, bk)?;
        let v = s.tape.matmul(x, wv)?;
        let v = s.tape.add_row(v, bv)?;

        let mut head_ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = s.tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = s.tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = s.tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = s.tape.transpose(kh);
            let scores = s.tape.matmul(qh, kt)?;
            let scores = s.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = match mask {
                Some(m) => s.tape.add(scores, m)?,
                None => scores,
            };
            let probs = s.tape.softmax_rows(scores);
            s.attn_probs.push(probs);
            head_ctx.push(s.tape.matmul(probs, vh)?);
        }
        let ctx = s.tape.concat_cols(&head_ctx)?;
        let attn_out = s.tape.matmul(ctx, wo)?;
        let attn_out = s.tape.add_row(attn_out, bo)?;

        let residual = s.tape.add(x, attn_out)?;
        let g1 = s.p(&format!("{prefix}.ln1.g"));
        let b1 = s.p(&format!("{prefix}.ln1.b"));
        let h1 = s.tape.layer_norm(residual, g1, b1, LN_EPS)?;

        let w1 = s.p(&format!("{prefix}.ffn.w1"));
        let fb1 = s.p(&format!("{prefix}.ffn.b1"));
        let w2 = s.p(&format!("{prefix}.ffn.w2"));
        let fb2 = s.p(&format!("{prefix}.ffn.b2"));
        let ff = s.tape.matmul(h1, w1)?;
        let ff = s.tape.add_row(ff, fb1)?;
        let ff = s.tape.gelu(ff);
        let ff = s.tape.matmul(ff, w2)?;
        let ff = s.tape.add_row(ff, fb2)?;

        let residual2 = s.tape.add(h1, ff)?;
        let g2 = s.p(&format!("{prefix}.ln2.g"));
        let b2 = s.p(&format!("{prefix}.ln2.b"));
        s.tape.layer_norm(residual2, g2, b2, LN_EPS)
    }

    /// Joint text encoder over question ∥ object labels ∥ OCR texts with
    /// token, segment, and sinusoidal position embeddings. Object-label
    /// positions are held constant so the object segment stays an
    /// unordered set.
    pub fn encode_text(
        &self,
        s: &mut Session,
        question: &[String],
        object_labels: &[String],
        ocr_texts: &[String],
    ) -> Result<TextEncoding> {
        let (nq, no, nn) = (question.len(), object_labels.len(), ocr_texts.len());
        let total = nq + no + nn;
        if total > self.cfg.max_seq_len {
            return Err(Error::Capacity {
                len: total,
                cap: self.cfg.max_seq_len,
            });
        }
        let mut ids = Vec::with_capacity(total);
        let mut segs = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        for (i, w) in question.iter().enumerate() {
            ids.push(self.tokens.id_or_unk(w));
            segs.push(0);
            positions.push(i);
        }
        for w in object_labels {
            ids.push(self.tokens.id_or_unk(w));
            segs.push(1);
            positions.push(0);
        }
        for (i, w) in ocr_texts.iter().enumerate() {
            ids.push(self.tokens.id_or_unk(w));
            segs.push(2);
            positions.push(i);
        }

        let tok_emb = s.p("tok_emb");
        let seg_emb = s.p("seg_emb");
        let tok = s.tape.lookup(tok_emb, &ids)?;
        let seg = s.tape.lookup(seg_emb, &segs)?;
        let pos = s.constant(position_table(&positions, self.cfg.d_model)?);
        let x = s.tape.add(tok, seg)?;
        let mut x = s.tape.add(x, pos)?;
        for l in 0..self.cfg.text_encoder_layers {
            x = self.layer(s, &format!("enc.{l}"), x, None)?;
        }
        Ok(TextEncoding {
            question: s.tape.slice_rows(x, 0, nq)?,
            objects: s.tape.slice_rows(x, nq, nq + no)?,
            ocr: s.tape.slice_rows(x, nq + no, total)?,
        })
    }

    /// Project [text ∥ phoc ∥ spatial ∥ feature ∥ box] to d_model and
    /// layer-normalize; one row per OCR token.
    pub fn fuse_ocr(&self, s: &mut Session, text_emb: Var, ocr: &[OcrTokenView]) -> Result<Var> {
        let n = ocr.len();
        let widths = (
            self.cfg.phoc_width,
            self.cfg.spatial_width(),
            self.cfg.feature_width,
        );
        for t in ocr {
            if t.phoc.len() != widths.0 || t.spatial.len() != widths.1 || t.feature.len() != widths.2
            {
                return Err(Error::Shape {
                    op: "fuse_ocr",
                    lhs: format!("{}+{}+{}", t.phoc.len(), t.spatial.len(), t.feature.len()),
                    rhs: format!("{}+{}+{}", widths.0, widths.1, widths.2),
                });
            }
        }
        let side = |f: &dyn Fn(&OcrTokenView) -> Vec<f64>, w: usize| -> Array {
            let mut data = Vec::with_capacity(n * w);
            for t in ocr {
                data.extend(f(t));
            }
            Array::from_vec(n, w, data).expect("width checked above")
        };
        let phoc = s.constant(side(&|t| t.phoc.clone(), widths.0));
        let spatial = s.constant(side(&|t| t.spatial.clone(), widths.1));
        let feat = s.constant(side(&|t| t.feature.clone(), widths.2));
        let boxes = s.constant(side(
            &|t| vec![t.bbox.x1, t.bbox.y1, t.bbox.x2, t.bbox.y2],
            4,
        ));
        let cat = s.tape.concat_cols(&[text_emb, phoc, spatial, boxes])?;
        let w = s.p("fuse_ocr.w");
        let wf = s.p("fuse_feat.w");
        let b = s.p("fuse_ocr.b");
        let proj = s.tape.matmul(cat, w)?;
        let fproj = s.tape.matmul(feat, wf)?;
        let proj = s.tape.add(proj, fproj)?;
        let proj = s.tape.add_row(proj, b)?;
        let g = s.p("fuse_ocr.ln.g");
        let lb = s.p("fuse_ocr.ln.b");
        s.tape.layer_norm(proj, g, lb, LN_EPS)
    }

    /// Project [label embedding ∥ feature ∥ box] to d_model and
    /// layer-normalize; one row per object region.
    pub fn fuse_object(
        &self,
        s: &mut Session,
        label_emb: Var,
        objects: &[ObjectRegion],
    ) -> Result<Var> {
        let n = objects.len();
        for o in objects {
            if o.feature.len() != self.cfg.feature_width {
                return Err(Error::Shape {
                    op: "fuse_object",
                    lhs: format!("feature {}", o.feature.len()),
                    rhs: format!("configured {}", self.cfg.feature_width),
                });
            }
        }
        let mut fdata = Vec::with_capacity(n * self.cfg.feature_width);
        let mut bdata = Vec::with_capacity(n * 4);
        for o in objects {
            fdata.extend(&o.feature);
            bdata.extend([o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2]);
        }
        let feat = s.constant(Array::from_vec(n, self.cfg.feature_width, fdata)?);
        let boxes = s.constant(Array::from_vec(n, 4, bdata)?);
        let cat = s.tape.concat_cols(&[label_emb, boxes])?;
        let w = s.p("fuse_obj.w");
        let wf = s.p("fuse_feat.w");
        let b = s.p("fuse_obj.b");
        let proj = s.tape.matmul(cat, w)?;
        let fproj = s.tape.matmul(feat, wf)?;
        let proj = s.tape.add(proj, fproj)?;
        let proj = s.tape.add_row(proj, b)?;
        let g = s.p("fuse_obj.ln.g");
        let lb = s.p("fuse_obj.ln.b");
        s.tape.layer_norm(proj, g, lb, LN_EPS)
    }

    /// Multimodal transformer over [question ∥ objects ∥ OCR ∥ decoder
    /// prefix]. Context positions see each other but never the decoder;
    /// decoder step t sees the context and decoder steps ≤ t.
    pub fn mm_forward(
        &self,
        s: &mut Session,
        question: Var,
        objects: Var,
        ocr: Var,
        decoder: Var,
    ) -> Result<MmOutput> {
        let (nq, no, nn, nd) = (
            s.tape.shape(question).0,
            s.tape.shape(objects).0,
            s.tape.shape(ocr).0,
            s.tape.shape(decoder).0,
        );
        if nd > self.cfg.max_decode_steps {
            return Err(Error::Contract(format!(
                "decoder prefix {nd} exceeds the {}-step cap",
                self.cfg.max_decode_steps
            )));
        }
        let mut type_ids = Vec::new();
        type_ids.extend(std::iter::repeat(0).take(nq));
        type_ids.extend(std::iter::repeat(1).take(no));
        type_ids.extend(std::iter::repeat(2).take(nn));
        type_ids.extend(std::iter::repeat(3).take(nd));

        let x = s.tape.concat_rows(&[question, objects, ocr, decoder])?;
        let type_emb = s.p("type_emb");
        let ty = s.tape.lookup(type_emb, &type_ids)?;
        let mut x = s.tape.add(x, ty)?;

        let mask = s.constant(mm_mask(nq + no + nn, nd));
        for l in 0..self.cfg.mm_layers {
            x = self.layer(s, &format!("mm.{l}"), x, Some(mask))?;
        }
        let ctx = nq + no + nn;
        Ok(MmOutput {
            question: s.tape.slice_rows(x, 0, nq)?,
            objects: s.tape.slice_rows(x, nq, nq + no)?,
            ocr: s.tape.slice_rows(x, nq + no, ctx)?,
            decoder: s.tape.slice_rows(x, ctx, ctx + nd)?,
        })
    }

    /// Pointer-network step scores: fixed-vocabulary logits from the
    /// decoder state plus one bilinear copy logit per OCR position, fused
    /// into a single distribution by the caller's softmax.
    pub fn step_logits(&self, s: &mut Session, dec_hidden: Var, ocr_hidden: Var) -> Result<Var> {
        let wv = s.p("vocab_head.w");
        let bv = s.p("vocab_head.b");
        let vocab = s.tape.matmul(dec_hidden, wv)?;
        let vocab = s.tape.add_row(vocab, bv)?;

        let wo = s.p("ptr.ocr.w");
        let bo = s.p("ptr.ocr.b");
        let wd = s.p("ptr.dec.w");
        let bd = s.p("ptr.dec.b");
        let o = s.tape.matmul(ocr_hidden, wo)?;
        let o = s.tape.add_row(o, bo)?;
        let dq = s.tape.matmul(dec_hidden, wd)?;
        let dq = s.tape.add_row(dq, bd)?;
        let ot = s.tape.transpose(o);
        let copy = s.tape.matmul(dq, ot)?;
        // Same temperature as attention: without it a d-dimensional inner
        // product saturates the step softmax straight from init.
        let copy = s.tape.scale(copy, 1.0 / (self.cfg.d_model as f64).sqrt());
        s.tape.concat_cols(&[vocab, copy])
    }

    /// Decoder input embedding for a word emitted from the vocabulary.
    fn word_input_row(&self, word: &str) -> Vec<f64> {
        self.params
            .get("tok_emb")
            .row(self.tokens.id_or_unk(word))
            .to_vec()
    }

    /// Teacher-forced decoder input rows: `<begin>` then one row per gold
    /// word, each with its step sinusoid added. A word present among the
    /// OCR copies feeds its first matching copy's fused vector — the same
    /// rule greedy decoding applies — and falls back to the token
    /// embedding otherwise. Differentiable through both routes.
    pub fn teacher_inputs(
        &self,
        s: &mut Session,
        gold_words: &[String],
        ocr_fused: Var,
        copy_texts: &[String],
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let steps = gold_words.len() + 1;
        if steps > self.cfg.max_decode_steps {
            return Err(Error::Contract(format!(
                "gold answer of {} words leaves no room for <end> within {} steps",
                gold_words.len(),
                self.cfg.max_decode_steps
            )));
        }
        let tok_emb = s.p("tok_emb");
        let begin = s
            .tape
            .lookup(tok_emb, &[self.tokens.id_or_unk(crate::corpus::BEGIN_TOKEN)])?;
        let mut rows = vec![begin];
        for word in gold_words {
            let w = word.to_lowercase();
            let row = match copy_texts.iter().position(|t| *t == w) {
                Some(c) => s.tape.slice_rows(ocr_fused, c, c + 1)?,
                None => s.tape.lookup(tok_emb, &[self.tokens.id_or_unk(&w)])?,
            };
            rows.push(row);
        }
        let emb = s.tape.concat_rows(&rows)?;
        let positions: Vec<usize> = (0..steps).collect();
        let pos = s.constant(position_table(&positions, d)?);
        s.tape.add(emb, pos)
    }

    /// Run the full context pipeline once and extract plain arrays for
    /// repeated decoding.
    pub fn encode_item(&self, view: &ItemView) -> Result<EncodedItem> {
        let mut s = self.session();
        let labels: Vec<String> = view.objects.iter().map(|o| o.label.clone()).collect();
        let ocr_texts: Vec<String> = view.ocr.iter().map(|t| t.text.clone()).collect();
        let enc = self.encode_text(&mut s, &view.question, &labels, &ocr_texts)?;
        let obj_fused = self.fuse_object(&mut s, enc.objects, &view.objects)?;
        let ocr_fused = self.fuse_ocr(&mut s, enc.ocr, &view.ocr)?;
        Ok(EncodedItem {
            question: s.tape.array(enc.question),
            objects: s.tape.array(obj_fused),
            ocr: s.tape.array(ocr_fused),
            copy_texts: ocr_texts,
        })
    }

    /// Greedy decode: argmax of the step distribution, surface-form mass
    /// as the recorded probability, stop on `<end>` or the step cap.
    pub fn decode_greedy(&self, ctx: &EncodedItem) -> Result<DecodedAnswer> {
        let d = self.cfg.d_model;
        let v_len = self.vocab.len();
        let mut dec_rows: Vec<f64> = Vec::new();
        {
            let begin = self.word_input_row(crate::corpus::BEGIN_TOKEN);
            let pos = crate::geometry::sinusoidal_embedding(0, d)?;
            dec_rows.extend(begin.iter().zip(&pos).map(|(a, b)| a + b));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut step_probs = Vec::new();

        for step in 0..self.cfg.max_decode_steps {
            let steps_so_far = step + 1;
            let mut s = self.session();
            let q = s.constant(ctx.question.clone());
            let obj = s.constant(ctx.objects.clone());
            let ocr = s.constant(ctx.ocr.clone());
            let dec = s.constant(Array::from_vec(steps_so_far, d, dec_rows.clone())?);
            let out = self.mm_forward(&mut s, q, obj, ocr, dec)?;
            let last = s.tape.slice_rows(out.decoder, steps_so_far - 1, steps_so_far)?;
            let logits = self.step_logits(&mut s, last, out.ocr)?;
            let dist = s.tape.softmax_rows(logits);
            let probs = s.tape.value(dist);

            let mut arg = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[arg] {
                    arg = i;
                }
            }
            if arg == END {
                return Ok(DecodedAnswer {
                    tokens,
                    positions,
                    step_probs,
                    terminated_by: Termination::EndToken,
                    end_prob: Some(probs[END]),
                });
            }
            let surface = if arg < v_len {
                self.vocab.word(arg).to_string()
            } else {
                ctx.copy_texts[arg - v_len].clone()
            };
            let prob = if arg < 3 {
                probs[arg] // specials never share surface mass
            } else {
                surface_mass(probs, &surface, &self.vocab, &ctx.copy_texts)
            };
            // Next input: the emitted word's canonical representation,
            // matching the teacher-forcing rule — first matching copy's
            // fused vector when one exists, token embedding otherwise.
            let next_emb: Vec<f64> = match ctx.copy_texts.iter().position(|t| *t == surface) {
                Some(c) => ctx.ocr.row(c).to_vec(),
                None => self.word_input_row(&surface),
            };
            let pos = crate::geometry::sinusoidal_embedding(step + 1, d)?;
            dec_rows.extend(next_emb.iter().zip(&pos).map(|(a, b)| a + b));

            tokens.push(surface);
            positions.push(arg);
            step_probs.push(prob);
        }
        Ok(DecodedAnswer {
            tokens,
            positions,
            step_probs,
            terminated_by: Termination::LengthCap,
            end_prob: None,
        })
    }

    /// Grounding scores over candidate regions as a differentiable 1×n
    /// log-softmax row.
    pub fn grounding_log_scores(
        &self,
        s: &mut Session,
        description: &[String],
        candidates: &[ObjectRegion],
    ) -> Result<Var> {
        if candidates.len() < 2 {
            return Err(Error::Contract(format!(
                "grounding needs at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        let labels: Vec<String> = candidates.iter().map(|c| c.label.clone()).collect();
        let enc = self.encode_text(s, description, &labels, &[])?;
        let fused = self.fuse_object(s, enc.objects, candidates)?;
        let empty_ocr = s.constant(Array::zeros(0, self.cfg.d_model));
        let empty_dec = s.constant(Array::zeros(0, self.cfg.d_model));
        let out = self.mm_forward(s, enc.question, fused, empty_ocr, empty_dec)?;
        let w = s.p("ground.w");
        let b = s.p("ground.b");
        let scores = s.tape.matmul(out.objects, w)?; // n×1
        let scores = s.tape.add_row(scores, b)?;
        let row = s.tape.transpose(scores); // 1×n
        Ok(s.tape.log_softmax_rows(row))
    }

    /// Candidate probabilities for one grounding query.
    pub fn grounding_scores(
        &self,
        description: &[String],
        candidates: &[ObjectRegion],
    ) -> Result<Vec<f64>> {
        let mut s = self.session();
        let log = self.grounding_log_scores(&mut s, description, candidates)?;
        Ok(s.tape.value(log).iter().map(|l| l.exp()).collect())
    }

    /// Serialize parameters as flat little-endian f64 with a JSON sidecar
    /// carrying offsets, shapes, and the full model metadata.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut blob: Vec<u8> = Vec::with_capacity(self.params.n_scalars() * 8);
        let mut metas = BTreeMap::new();
        let mut offset = 0usize;
        for (name, a) in self.params.iter() {
            for v in a.as_slice() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            metas.insert(
                name.clone(),
                ParamMeta {
                    offset,
                    rows: a.rows(),
                    cols: a.cols(),
                },
            );
            offset += a.len();
        }
        fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            config: self.cfg.clone(),
            answer_vocab: self.vocab.words().to_vec(),
            token_vocab: self.tokens.words().to_vec(),
            params: metas,
        };
        let side_path = sidecar_path(path);
        let mut text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Contract(format!("sidecar serialization failed: {e}")))?;
        text.push('\n');
        fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))?;
        Ok(())
    }

    /// Load a checkpoint, rejecting any parameter whose shape disagrees
    /// with the configuration.
    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let side_path = sidecar_path(path);
        let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: side_path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        sidecar.config.validate()?;
        let vocab = AnswerVocab::from_words(sidecar.answer_vocab)?;
        let tokens = TokenVocab::from_words(sidecar.token_vocab)?;
        let expected = param_shapes(&sidecar.config, tokens.len(), vocab.len());
        if expected.len() != sidecar.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config expects {}",
                sidecar.params.len(),
                expected.len()
            )));
        }
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (name, (r, c)) in expected {
            let meta = sidecar.params.get(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint missing parameter {name}"))
            })?;
            if (meta.rows, meta.cols) != (r, c) {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {}x{}, config expects {r}x{c}",
                    meta.rows, meta.cols
                )));
            }
            let start = meta.offset * 8;
            let end = start + r * c * 8;
            if end > blob.len() {
                return Err(Error::Config(format!(
                    "checkpoint too short for parameter {name}"
                )));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            map.insert(name, Array::from_vec(r, c, data)?);
        }
        Ok(Model {
            cfg: sidecar.config,
            vocab,
            tokens,
            params: ParamStore { map },
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    answer_vocab: Vec<String>,
    token_vocab: Vec<String>,
    params: BTreeMap<String, ParamMeta>,
}

/// Distribution mass over every position whose lowercase surface form
/// equals `surface`: the vocabulary slot plus all matching OCR copies.
pub fn surface_mass(
    probs: &[f64],
    surface: &str,
    vocab: &AnswerVocab,
    copy_texts: &[String],
) -> f64 {
    let mut mass = 0.0;
    if let Some(idx) = vocab.lookup(surface) {
        if idx >= 3 {
            mass += probs[idx];
        }
    }
    let v = vocab.len();
    for (i, t) in copy_texts.iter().enumerate() {
        if t == surface {
            mass += probs[v + i];
        }
    }
    mass
}

fn position_table(positions: &[usize], d: usize) -> Result<Array> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend(crate::geometry::sinusoidal_embedding(p, d)?);
    }
    Array::from_vec(positions.len(), d, data)
}

/// Attention mask for the multimodal transformer: additive 0 / -1e9.
fn mm_mask(ctx: usize, dec: usize) -> Array {
    let s = ctx + dec;
    Array::from_fn(s, s, |i, j| {
        let visible = if i < ctx {
            j < ctx // context never sees the decoder
        } else {
            j < ctx || j <= i // decoder: context plus its own past
        };
        if visible {
            0.0
        } else {
            MASK_OFF
        }
    })
}
