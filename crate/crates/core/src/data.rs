//! Sample model, the JSONL interchange format, and padded batching.
//!
//! A dataset file is one header object followed by one sample object per line:
//!
//! ```text
//! {"format":"trifuse-mmds","version":1,"d_img":8,"d_audio":8,"text_mode":"tokens","vocab_size":64}
//! {"id":"s0","label":"joy","img":[[...],...],"audio":[[...],...],"text_tokens":[3,9,1]}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::branches::{AudioSequence, BranchInput, ImageSequence, TextSequence};
use crate::config::{TextMode, N_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "trifuse-mmds";
pub const FORMAT_VERSION: u32 = 1;

/// Split name that always resolves to every sample in file order.
pub const ALL_SPLIT: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionLabel {
    Joy,
    Anger,
    Sadness,
    Fear,
    Surprise,
    Disgust,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; N_CLASSES] = [
        EmotionLabel::Joy,
        EmotionLabel::Anger,
        EmotionLabel::Sadness,
        EmotionLabel::Fear,
        EmotionLabel::Surprise,
        EmotionLabel::Disgust,
        EmotionLabel::Neutral,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Joy => "joy",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Neutral => "neutral",
        }
    }

    pub fn legal_names() -> String {
        Self::ALL.map(EmotionLabel::name).join(", ")
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                Error::Data(format!(
                    "unknown label \"{s}\"; expected one of: {}",
                    Self::legal_names()
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub dialogue_id: Option<String>,
    pub image: ImageSequence,
    pub audio: AudioSequence,
    pub text: TextSequence,
    pub label: EmotionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub d_img: usize,
    pub d_audio: usize,
    pub text_mode: TextMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_text: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// Named id lists, e.g. `train`, `val`, `test`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetHeader {
    pub fn new(d_img: usize, d_audio: usize, text_mode: TextMode, text_dim: usize) -> Self {
        let (d_text, vocab_size) = match text_mode {
            TextMode::Embeddings => (Some(text_dim), None),
            TextMode::Tokens => (None, Some(text_dim)),
        };
        DatasetHeader {
            format: FORMAT_NAME.to_owned(),
            version: FORMAT_VERSION,
            d_img,
            d_audio,
            text_mode,
            d_text,
            vocab_size,
            splits: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT_NAME {
            return Err(Error::Data(format!(
                "header format is \"{}\", expected \"{FORMAT_NAME}\"",
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "header version {} is not supported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.d_img == 0 || self.d_audio == 0 {
            return Err(Error::Data("d_img and d_audio must be positive".into()));
        }
        match self.text_mode {
            TextMode::Embeddings if !matches!(self.d_text, Some(d) if d > 0) => {
                Err(Error::Data("embeddings mode needs a positive d_text".into()))
            }
            TextMode::Tokens if !matches!(self.vocab_size, Some(v) if v > 0) => {
                Err(Error::Data("tokens mode needs a positive vocab_size".into()))
            }
            _ => Ok(()),
        }
    }

    /// `d_text` in embeddings mode, `vocab_size` in tokens mode.
    pub fn text_dim(&self) -> usize {
        match self.text_mode {
            TextMode::Embeddings => self.d_text.unwrap_or(0),
            TextMode::Tokens => self.vocab_size.unwrap_or(0),
        }
    }
}

/// One sample line, field-for-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue_id: Option<String>,
    pub label: String,
    pub img: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_emb: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_tokens: Option<Vec<usize>>,
}

fn rows_to_tensor(name: &str, rows: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Data(format!("{name} sequence is empty")));
    }
    if rows[0].is_empty() {
        return Err(Error::Data(format!("{name} frames have zero width")));
    }
    Tensor::from_rows(rows).map_err(|e| Error::Data(format!("{name}: {e}")))
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

impl SampleRecord {
    /// Structural conversion; dimensional checks against a header happen in
    /// [`MultimodalSample::check_header`].
    pub fn into_sample(self) -> Result<MultimodalSample> {
        let label: EmotionLabel = self.label.parse()?;
        let image = ImageSequence::new(rows_to_tensor("img", &self.img)?)?;
        let audio = AudioSequence::new(rows_to_tensor("audio", &self.audio)?)?;
        let text = match (self.text_emb, self.text_tokens) {
            (Some(emb), None) => TextSequence::embeddings(rows_to_tensor("text_emb", &emb)?)?,
            (None, Some(ids)) => TextSequence::tokens(ids)?,
            (Some(_), Some(_)) => {
                return Err(Error::Data(
                    "sample carries both text_emb and text_tokens".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Data(
                    "sample carries neither text_emb nor text_tokens".into(),
                ))
            }
        };
        Ok(MultimodalSample {
            id: self.id,
            dialogue_id: self.dialogue_id,
            image,
            audio,
            text,
            label,
        })
    }

    pub fn from_sample(sample: &MultimodalSample) -> Self {
        let (text_emb, text_tokens) = match &sample.text {
            TextSequence::Embeddings(t) => (Some(tensor_to_rows(t)), None),
            TextSequence::Tokens(ids) => (None, Some(ids.clone())),
        };
        SampleRecord {
            id: sample.id.clone(),
            dialogue_id: sample.dialogue_id.clone(),
            label: sample.label.name().to_owned(),
            img: tensor_to_rows(&sample.image.features),
            audio: tensor_to_rows(&sample.audio.features),
            text_emb,
            text_tokens,
        }
    }
}

impl MultimodalSample {
    pub fn check_header(&self, header: &DatasetHeader) -> Result<()> {
        if self.image.features.cols() != header.d_img {
            return Err(Error::Data(format!(
                "img frame width {} does not match d_img {}",
                self.image.features.cols(),
                header.d_img
            )));
        }
        if self.audio.features.cols() != header.d_audio {
            return Err(Error::Data(format!(
                "audio frame width {} does not match d_audio {}",
                self.audio.features.cols(),
                header.d_audio
            )));
        }
        if self.text.mode() != header.text_mode {
            return Err(Error::Data(format!(
                "text representation does not match header text_mode {:?}",
                header.text_mode
            )));
        }
        match &self.text {
            TextSequence::Embeddings(t) if t.cols() != header.text_dim() => Err(Error::Data(format!(
                "text_emb width {} does not match d_text {}",
                t.cols(),
                header.text_dim()
            ))),
            TextSequence::Tokens(ids) => match ids.iter().find(|&&id| id >= header.text_dim()) {
                Some(id) => Err(Error::Data(format!(
                    "token id {id} out of range for vocab_size {}",
                    header.text_dim()
                ))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Parses one sample line (no header).
pub fn parse_sample_line(line: &str) -> Result<MultimodalSample> {
    let record: SampleRecord = serde_json::from_str(line)?;
    record.into_sample()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, samples: Vec<MultimodalSample>) -> Result<Self> {
        header.validate()?;
        let ds = Dataset { header, samples };
        let mut seen = HashSet::new();
        for s in &ds.samples {
            s.check_header(&ds.header)?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id \"{}\"", s.id)));
            }
        }
        ds.check_splits()?;
        Ok(ds)
    }

    fn check_splits(&self) -> Result<()> {
        let ids: HashSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, members) in &self.header.splits {
            if name == ALL_SPLIT {
                return Err(Error::Data(format!("split name \"{ALL_SPLIT}\" is reserved")));
            }
            for id in members {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Data(format!(
                        "split \"{name}\" lists unknown id \"{id}\""
                    )));
                }
                if let Some(prev) = owner.insert(id, name) {
                    return Err(Error::Data(format!(
                        "id \"{id}\" appears in splits \"{prev}\" and \"{name}\""
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_names(&self) -> Vec<&str> {
        self.header.splits.keys().map(String::as_str).collect()
    }

    /// Samples of a named split, in listed order.
    pub fn split(&self, name: &str) -> Result<Vec<&MultimodalSample>> {
        if name == ALL_SPLIT {
            return Ok(self.samples.iter().collect());
        }
        let members = self.header.splits.get(name).ok_or_else(|| {
            Error::Config(format!(
                "dataset has no split \"{name}\" (available: {ALL_SPLIT}, {})",
                self.split_names().join(", ")
            ))
        })?;
        let by_id: HashMap<&str, &MultimodalSample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        Ok(members.iter().map(|id| by_id[id.as_str()]).collect())
    }

    /// Like [`Dataset::split`] but rejects an empty result.
    pub fn nonempty_split(&self, name: &str) -> Result<Vec<&MultimodalSample>> {
        let samples = self.split(name)?;
        if samples.is_empty() {
            return Err(Error::Config(format!("split \"{name}\" is empty")));
        }
        Ok(samples)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(&SampleRecord::from_sample(s))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (header_idx, header_line) = lines
            .next()
            .ok_or_else(|| Error::Line {
                line: 1,
                message: "missing header line".into(),
            })?;
        let at = |idx: usize| move |e: Error| Error::Line {
            line: idx + 1,
            message: e.to_string(),
        };
        let header: DatasetHeader = serde_json::from_str(header_line)
            .map_err(Error::from)
            .map_err(at(header_idx))?;
        header.validate().map_err(at(header_idx))?;

        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in lines {
            let sample = parse_sample_line(line)
                .and_then(|s| s.check_header(&header).map(|_| s))
                .map_err(at(idx))?;
            if !seen.insert(sample.id.clone()) {
                return Err(at(idx)(Error::Data(format!(
                    "duplicate sample id \"{}\"",
                    sample.id
                ))));
            }
            samples.push(sample);
        }
        let ds = Dataset { header, samples };
        ds.check_splits()?;
        Ok(ds)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load_jsonl(path)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchText {
    /// `[B × S × d_text]`
    Embeddings(Tensor),
    /// `[B][S]`, padded with id 0.
    Tokens(Vec<Vec<usize>>),
}

/// Padded tensors per modality with validity masks. Padding is trailing and
/// holds zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B × S_img × d_img]`
    pub image: Tensor,
    pub image_mask: Vec<Vec<bool>>,
    /// `[B × S_audio × d_audio]`
    pub audio: Tensor,
    pub audio_mask: Vec<Vec<bool>>,
    pub text: BatchText,
    pub text_mask: Vec<Vec<bool>>,
    pub labels: Vec<EmotionLabel>,
}

fn pad_features<'a>(seqs: impl Iterator<Item = &'a Tensor> + Clone) -> Result<(Tensor, Vec<Vec<bool>>)> {
    let b = seqs.clone().count();
    let s_max = seqs.clone().map(Tensor::rows).max().unwrap_or(0);
    let d = seqs.clone().next().map_or(0, Tensor::cols);
    let mut data = vec![0.0; b * s_max * d];
    let mut masks = Vec::with_capacity(b);
    for (i, t) in seqs.enumerate() {
        if t.cols() != d {
            return Err(Error::Data("batch mixes feature widths".into()));
        }
        let start = i * s_max * d;
        data[start..start + t.numel()].copy_from_slice(t.data());
        masks.push((0..s_max).map(|p| p < t.rows()).collect());
    }
    Ok((Tensor::new(&[b, s_max, d], data)?, masks))
}

impl Batch {
    pub fn from_samples(samples: &[&MultimodalSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Degenerate("cannot batch zero samples".into()));
        }
        let (image, image_mask) = pad_features(samples.iter().map(|s| &s.image.features))?;
        let (audio, audio_mask) = pad_features(samples.iter().map(|s| &s.audio.features))?;
        let (text, text_mask) = match samples[0].text.mode() {
            TextMode::Embeddings => {
                let embs = samples
                    .iter()
                    .map(|s| match &s.text {
                        TextSequence::Embeddings(t) => Ok(t),
                        TextSequence::Tokens(_) => Err(Error::Data("batch mixes text modes".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (t, m) = pad_features(embs.into_iter())?;
                (BatchText::Embeddings(t), m)
            }
            TextMode::Tokens => {
                let s_max = samples.iter().map(|s| s.text.len()).max().unwrap_or(0);
                let mut rows = Vec::with_capacity(samples.len());
                let mut masks = Vec::with_capacity(samples.len());
                for s in samples {
                    let TextSequence::Tokens(ids) = &s.text else {
                        return Err(Error::Data("batch mixes text modes".into()));
                    };
                    let mut row = ids.clone();
                    row.resize(s_max, 0);
                    rows.push(row);
                    masks.push((0..s_max).map(|p| p < ids.len()).collect());
                }
                (BatchText::Tokens(rows), masks)
            }
        };
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            image,
            image_mask,
            audio,
            audio_mask,
            text,
            text_mask,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Padded per-modality inputs of row `b`.
    pub fn row(&self, b: usize) -> Result<BatchRow<'_>> {
        let text = match &self.text {
            BatchText::Embeddings(t) => RowText::Features(t.outer(b)?),
            BatchText::Tokens(rows) => RowText::Tokens(&rows[b]),
        };
        Ok(BatchRow {
            image: self.image.outer(b)?,
            image_mask: &self.image_mask[b],
            audio: self.audio.outer(b)?,
            audio_mask: &self.audio_mask[b],
            text,
            text_mask: &self.text_mask[b],
            label: self.labels[b],
        })
    }
}

#[derive(Debug, Clone)]
pub enum RowText<'a> {
    Features(Tensor),
    Tokens(&'a [usize]),
}

#[derive(Debug, Clone)]
pub struct BatchRow<'a> {
    pub image: Tensor,
    pub image_mask: &'a [bool],
    pub audio: Tensor,
    pub audio_mask: &'a [bool],
    pub text: RowText<'a>,
    pub text_mask: &'a [bool],
    pub label: EmotionLabel,
}

impl BatchRow<'_> {
    pub fn text_input(&self) -> BranchInput<'_> {
        match &self.text {
            RowText::Features(t) => BranchInput::Features(t),
            RowText::Tokens(ids) => BranchInput::Tokens(ids),
        }
    }
}

/// Splits `samples` into padded batches, shuffling first when `rng` is given.
/// The final partial batch is kept.
pub fn make_batches(
    samples: &[&MultimodalSample],
    batch_size: usize,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<&MultimodalSample> = samples.to_vec();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch_size).map(Batch::from_samples).collect()
}
