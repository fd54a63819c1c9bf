//! Conditions, tiered candidate groups and the line-delimited dataset format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vocab::{TokenId, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Emotion,
}

impl Modality {
    /// Fixed order used for serialization and fusion.
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Emotion];

    fn bit(self) -> u8 {
        match self {
            Modality::Text => 1,
            Modality::Audio => 2,
            Modality::Emotion => 4,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Emotion => 2,
        }
    }
}

/// Non-empty set of active modalities.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mode(u8);

impl Mode {
    pub const T: Mode = Mode(1);
    pub const A: Mode = Mode(2);
    pub const TA: Mode = Mode(3);
    pub const E: Mode = Mode(4);
    pub const TE: Mode = Mode(5);
    pub const AE: Mode = Mode(6);
    pub const TAE: Mode = Mode(7);

    /// The six conditioning variants used for training and evaluation.
    pub const EVAL_MODES: [Mode; 6] = [Mode::T, Mode::A, Mode::TA, Mode::TE, Mode::AE, Mode::TAE];

    pub fn from_modalities(ms: impl IntoIterator<Item = Modality>) -> Result<Mode> {
        let bits = ms.into_iter().fold(0u8, |acc, m| acc | m.bit());
        Mode::from_bits(bits)
    }

    pub fn from_bits(bits: u8) -> Result<Mode> {
        if bits == 0 || bits > 7 {
            return invalid("mode must contain at least one of text, audio, emotion");
        }
        Ok(Mode(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Row of this mode in a 7-entry mode table.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn intersect(self, other: Mode) -> Option<Mode> {
        let bits = self.0 & other.0;
        (bits != 0).then_some(Mode(bits))
    }

    pub fn modalities(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .modalities()
            .map(|m| match m {
                Modality::Text => "T",
                Modality::Audio => "A",
                Modality::Emotion => "E",
            })
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl fmt::Debug for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mode({self})")
    }
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts `T+A+E` style names (case-insensitive).
    fn from_str(s: &str) -> Result<Mode> {
        let mut bits = 0u8;
        for part in s.split('+') {
            let m = match part.trim().to_ascii_lowercase().as_str() {
                "t" | "text" => Modality::Text,
                "a" | "audio" => Modality::Audio,
                "e" | "emotion" => Modality::Emotion,
                other => return invalid(format!("unknown modality `{other}` in mode `{s}`")),
            };
            bits |= m.bit();
        }
        Mode::from_bits(bits)
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let ms: Vec<Modality> = self.modalities().collect();
        ms.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ms = Vec::<Modality>::deserialize(d)?;
        Mode::from_modalities(ms).map_err(serde::de::Error::custom)
    }
}

/// A speaker utterance: text tokens, audio tokens and an emotion id, with the
/// set of modalities that are actually available.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Condition {
    pub text_tokens: Vec<TokenId>,
    pub text_mask: Vec<bool>,
    pub audio_tokens: Vec<TokenId>,
    pub audio_mask: Vec<bool>,
    pub emotion: TokenId,
    pub mode: Mode,
}

impl Condition {
    /// Builds a validated condition. Pad tokens are masked out; modalities
    /// outside `mode` are nullified.
    pub fn new(
        vocab: &VocabSpec,
        text_tokens: Vec<TokenId>,
        audio_tokens: Vec<TokenId>,
        emotion: TokenId,
        mode: Mode,
    ) -> Result<Condition> {
        let pad = vocab.special.pad;
        if let Some(&t) = text_tokens.iter().find(|&&t| t != pad && !vocab.text.contains(t)) {
            return invalid(format!("text token {t} outside the text range"));
        }
        if let Some(&t) = audio_tokens.iter().find(|&&t| t != pad && !vocab.audio.contains(t)) {
            return invalid(format!("audio token {t} outside the audio range"));
        }
        if emotion != vocab.special.unknown_emotion && !vocab.emotion.contains(emotion) {
            return invalid(format!("emotion {emotion} outside the emotion range"));
        }
        let text_mask = text_tokens.iter().map(|&t| t != pad).collect();
        let audio_mask = audio_tokens.iter().map(|&t| t != pad).collect();
        let cond = Condition {
            text_tokens,
            text_mask,
            audio_tokens,
            audio_mask,
            emotion,
            mode: Mode::TAE,
        };
        cond.restrict(vocab, mode)
    }

    /// Replaces every modality outside `mode` by its null input: all-pad
    /// tokens with an all-false mask for text and audio, the unknown sentinel
    /// for emotion. The resulting mode is `self.mode ∩ mode`.
    pub fn restrict(&self, vocab: &VocabSpec, mode: Mode) -> Result<Condition> {
        let active = self
            .mode
            .intersect(mode)
            .ok_or_else(|| Error::InvalidArgument(format!("mode {mode} leaves no active modality")))?;
        let pad = vocab.special.pad;
        let mut out = self.clone();
        out.mode = active;
        if !active.contains(Modality::Text) {
            out.text_tokens.iter_mut().for_each(|t| *t = pad);
            out.text_mask.iter_mut().for_each(|m| *m = false);
        }
        if !active.contains(Modality::Audio) {
            out.audio_tokens.iter_mut().for_each(|t| *t = pad);
            out.audio_mask.iter_mut().for_each(|m| *m = false);
        }
        if !active.contains(Modality::Emotion) {
            out.emotion = vocab.special.unknown_emotion;
        }
        Ok(out)
    }

    pub fn valid_text(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.text_tokens
            .iter()
            .zip(&self.text_mask)
            .filter_map(|(&t, &m)| m.then_some(t))
    }

    pub fn valid_audio(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.audio_tokens
            .iter()
            .zip(&self.audio_mask)
            .filter_map(|(&t, &m)| m.then_some(t))
    }
}

/// Flattens the active modalities into one token sequence. Text tokens are
/// emitted bare, audio and emotion are wrapped in their begin/end sentinels.
pub fn serialize_condition(cond: &Condition, vocab: &VocabSpec) -> Vec<TokenId> {
    let s = &vocab.special;
    let mut out = Vec::with_capacity(cond.text_tokens.len() + cond.audio_tokens.len() + 5);
    for m in cond.mode.modalities() {
        match m {
            Modality::Text => out.extend(cond.valid_text()),
            Modality::Audio => {
                out.push(s.begin_audio);
                out.extend(cond.valid_audio());
                out.push(s.end_audio);
            }
            Modality::Emotion => {
                out.extend([s.begin_emotion, cond.emotion, s.end_emotion]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MotionSequence {
    pub motion_id: String,
    pub tokens: Vec<TokenId>,
}

impl MotionSequence {
    pub fn new(vocab: &VocabSpec, motion_id: impl Into<String>, tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return invalid("motion sequence is empty");
        }
        if tokens.len() > vocab.max_motion_len {
            return invalid(format!(
                "motion sequence of length {} exceeds the limit {}",
                tokens.len(),
                vocab.max_motion_len
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| !vocab.motion.contains(t)) {
            return invalid(format!("motion token {t} outside the motion range"));
        }
        Ok(MotionSequence {
            motion_id: motion_id.into(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Gold,
    Silver,
    Negative,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Gold, Tier::Silver, Tier::Negative];

    /// Graded relevance used by nDCG.
    pub fn relevance(self) -> u32 {
        match self {
            Tier::Gold => 2,
            Tier::Silver => 1,
            Tier::Negative => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Gold => "gold",
            Tier::Silver => "silver",
            Tier::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub motion: MotionSequence,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub group_id: String,
    pub condition: Condition,
    pub candidates: Vec<Candidate>,
}

impl Group {
    pub fn tier(&self, tier: Tier) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(move |c| c.tier == tier)
    }

    pub fn tier_count(&self, tier: Tier) -> usize {
        self.tier(tier).count()
    }

    /// Error unless every tier has at least one candidate.
    pub fn require_all_tiers(&self) -> Result<()> {
        for tier in Tier::ALL {
            if self.tier_count(tier) == 0 {
                return Err(Error::MissingTier {
                    group_id: self.group_id.clone(),
                    tier: tier.name(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => invalid(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: VocabSpec,
    pub train: Vec<Group>,
    pub val: Vec<Group>,
    pub test: Vec<Group>,
}

impl Dataset {
    pub fn empty(vocab: VocabSpec) -> Self {
        Dataset {
            vocab,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> &[Group] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Group> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes one record per group, train then val then test.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for split in Split::ALL {
            for g in self.split(split) {
                serde_json::to_writer(&mut out, &Record::from_group(g, split))?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordCandidate {
    motion_id: String,
    tokens: Vec<TokenId>,
    tier: Tier,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    group_id: String,
    split: Split,
    text_tokens: Vec<TokenId>,
    audio_tokens: Vec<TokenId>,
    emotion: TokenId,
    mode: Mode,
    candidates: Vec<RecordCandidate>,
}

impl Record {
    fn from_group(g: &Group, split: Split) -> Record {
        Record {
            group_id: g.group_id.clone(),
            split,
            text_tokens: g.condition.text_tokens.clone(),
            audio_tokens: g.condition.audio_tokens.clone(),
            emotion: g.condition.emotion,
            mode: g.condition.mode,
            candidates: g
                .candidates
                .iter()
                .map(|c| RecordCandidate {
                    motion_id: c.motion.motion_id.clone(),
                    tokens: c.motion.tokens.clone(),
                    tier: c.tier,
                })
                .collect(),
        }
    }

    fn into_group(self, vocab: &VocabSpec, line: usize) -> Result<(Split, Group)> {
        let pad = vocab.special.pad;
        let out_of_range = |token, range| Error::TokenOutOfRange { line, token, range };
        if let Some(&t) = self.text_tokens.iter().find(|&&t| t != pad && !vocab.text.contains(t)) {
            return Err(out_of_range(t, "text"));
        }
        if let Some(&t) = self.audio_tokens.iter().find(|&&t| t != pad && !vocab.audio.contains(t)) {
            return Err(out_of_range(t, "audio"));
        }
        if self.emotion != vocab.special.unknown_emotion && !vocab.emotion.contains(self.emotion) {
            return Err(out_of_range(self.emotion, "emotion"));
        }
        let malformed = |msg: String| Error::Malformed { line, msg };
        let condition = Condition::new(vocab, self.text_tokens, self.audio_tokens, self.emotion, self.mode)
            .map_err(|e| malformed(e.to_string()))?;

        let mut seen = HashSet::new();
        let mut candidates = Vec::with_capacity(self.candidates.len());
        for c in self.candidates {
            if let Some(&t) = c.tokens.iter().find(|&&t| !vocab.motion.contains(t)) {
                return Err(out_of_range(t, "motion"));
            }
            if !seen.insert(c.motion_id.clone()) {
                return Err(malformed(format!(
                    "motion id `{}` repeated within group `{}`",
                    c.motion_id, self.group_id
                )));
            }
            let motion = MotionSequence::new(vocab, c.motion_id, c.tokens).map_err(|e| malformed(e.to_string()))?;
            candidates.push(Candidate { motion, tier: c.tier });
        }
        Ok((
            self.split,
            Group {
                group_id: self.group_id,
                condition,
                candidates,
            },
        ))
    }
}

/// Reads a line-delimited dataset. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset<R: BufRead>(input: R, vocab: &VocabSpec) -> Result<Dataset> {
    vocab.validate()?;
    let mut dataset = Dataset::empty(*vocab);
    let mut ids: HashSet<String> = HashSet::new();
    let mut conditions: HashMap<Condition, Split> = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: line_no,
            msg: e.to_string(),
        })?;
        let (split, group) = record.into_group(vocab, line_no)?;
        if !ids.insert(group.group_id.clone()) {
            return Err(Error::DuplicateGroup {
                line: line_no,
                group_id: group.group_id,
            });
        }
        match conditions.get(&group.condition) {
            Some(&other) if other != split => {
                return Err(Error::ConditionLeak {
                    line: line_no,
                    group_id: group.group_id,
                    other: other.name().to_string(),
                })
            }
            Some(_) => {}
            None => {
                conditions.insert(group.condition.clone(), split);
            }
        }
        dataset.split_mut(split).push(group);
    }
    Ok(dataset)
}

/// Occurrence counts of motion ids over the training split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
}

impl FrequencyTable {
    pub fn build(train_groups: &[Group]) -> FrequencyTable {
        let mut counts = BTreeMap::new();
        for c in train_groups.iter().flat_map(|g| &g.candidates) {
            *counts.entry(c.motion.motion_id.clone()).or_insert(0) += 1;
        }
        FrequencyTable { counts }
    }

    pub fn freq(&self, motion_id: &str) -> Result<u64> {
        self.counts
            .get(motion_id)
            .copied()
            .ok_or_else(|| Error::UnknownMotion(motion_id.to_string()))
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Inverse square-root frequency weight of one candidate.
pub fn item_weight(freq: u64) -> Result<f64> {
    if freq == 0 {
        return invalid("item weight of a motion with frequency 0");
    }
    Ok(1.0 / (freq as f64).sqrt())
}

/// Mean item weight over a candidate set.
pub fn candidates_weight<'a>(
    candidates: impl IntoIterator<Item = &'a Candidate>,
    table: &FrequencyTable,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in candidates {
        sum += item_weight(table.freq(&c.motion.motion_id)?)?;
        n += 1;
    }
    if n == 0 {
        return invalid("weight of an empty candidate set");
    }
    Ok(sum / n as f64)
}

pub fn group_weight(group: &Group, table: &FrequencyTable) -> Result<f64> {
    candidates_weight(&group.candidates, table)
}

/// Lower-inclusive score thresholds separating the tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub gold_min: f64,
    pub silver_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            gold_min: 0.8,
            silver_min: 0.5,
        }
    }
}

/// Labels a pair from the weighted sum of agent scores.
pub fn assign_tier(scores: &[f64], weights: &[f64], thresholds: Thresholds) -> Result<Tier> {
    if scores.is_empty() {
        return invalid("no agent scores");
    }
    if scores.len() != weights.len() {
        return invalid(format!("{} scores but {} weights", scores.len(), weights.len()));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return invalid(format!("agent weights sum to {wsum}, expected 1"));
    }
    if thresholds.gold_min <= thresholds.silver_min {
        return invalid("gold threshold must exceed the silver threshold");
    }
    let fin: f64 = scores.iter().zip(weights).map(|(s, w)| s * w).sum();
    Ok(if fin >= thresholds.gold_min {
        Tier::Gold
    } else if fin >= thresholds.silver_min {
        Tier::Silver
    } else {
        Tier::Negative
    })
}
