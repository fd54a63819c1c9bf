//! Unified token vocabulary.
//!
//! Text, motion, audio and emotion ids live in disjoint contiguous ranges of a
//! single id space, followed by the structural sentinels. All token ids stored
//! anywhere in the crate are global ids in this space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Inclusive id range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdRange {
    pub start: TokenId,
    pub end: TokenId,
}

impl IdRange {
    pub fn with_len(start: TokenId, len: usize) -> Self {
        IdRange {
            start,
            end: start + len as TokenId - 1,
        }
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id >= self.start && id <= self.end
    }

    /// Offset of `id` inside the range.
    pub fn index_of(&self, id: TokenId) -> Option<usize> {
        self.contains(id).then(|| (id - self.start) as usize)
    }

    pub fn id_at(&self, index: usize) -> TokenId {
        debug_assert!(index < self.len());
        self.start + index as TokenId
    }

    fn overlaps(&self, other: &IdRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sentinels {
    pub pad: TokenId,
    pub begin_motion: TokenId,
    pub end_motion: TokenId,
    pub begin_audio: TokenId,
    pub end_audio: TokenId,
    pub begin_emotion: TokenId,
    pub end_emotion: TokenId,
    pub unknown_emotion: TokenId,
}

impl Sentinels {
    pub const COUNT: usize = 8;

    fn all(&self) -> [(&'static str, TokenId); Self::COUNT] {
        [
            ("pad", self.pad),
            ("begin_motion", self.begin_motion),
            ("end_motion", self.end_motion),
            ("begin_audio", self.begin_audio),
            ("end_audio", self.end_audio),
            ("begin_emotion", self.begin_emotion),
            ("end_emotion", self.end_emotion),
            ("unknown_emotion", self.unknown_emotion),
        ]
    }
}

fn default_max_motion_len() -> usize {
    256
}

/// Layout of the unified vocabulary, as stored in the vocab file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub text: IdRange,
    pub motion: IdRange,
    pub audio: IdRange,
    pub emotion: IdRange,
    pub special: Sentinels,
    /// Longest admissible motion sequence (sentinels excluded).
    #[serde(default = "default_max_motion_len")]
    pub max_motion_len: usize,
}

impl VocabSpec {
    /// Packs the sub-vocabularies back to back (text, motion, audio,
    /// emotion) and appends the sentinels.
    pub fn contiguous(
        text_size: usize,
        motion_size: usize,
        audio_size: usize,
        emotion_size: usize,
    ) -> Result<Self> {
        if text_size == 0 || audio_size == 0 || emotion_size == 0 {
            return Err(Error::Vocab("every sub-vocabulary needs at least one id".into()));
        }
        let text = IdRange::with_len(0, text_size);
        let motion = IdRange::with_len(text.end + 1, motion_size.max(1));
        let audio = IdRange::with_len(motion.end + 1, audio_size);
        let emotion = IdRange::with_len(audio.end + 1, emotion_size);
        let s = emotion.end + 1;
        let vocab = VocabSpec {
            text,
            motion,
            audio,
            emotion,
            special: Sentinels {
                pad: s,
                begin_motion: s + 1,
                end_motion: s + 2,
                begin_audio: s + 3,
                end_audio: s + 4,
                begin_emotion: s + 5,
                end_emotion: s + 6,
                unknown_emotion: s + 7,
            },
            max_motion_len: default_max_motion_len(),
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn with_max_motion_len(mut self, len: usize) -> Self {
        self.max_motion_len = len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("text", self.text),
            ("motion", self.motion),
            ("audio", self.audio),
            ("emotion", self.emotion),
        ];
        for (name, r) in ranges {
            if r.is_empty() {
                return Err(Error::Vocab(format!("{name} range is empty")));
            }
        }
        if self.motion.len() < 2 {
            return Err(Error::Vocab("motion vocabulary needs at least 2 ids".into()));
        }
        for (i, (a, ra)) in ranges.iter().enumerate() {
            for (b, rb) in &ranges[i + 1..] {
                if ra.overlaps(rb) {
                    return Err(Error::Vocab(format!("{a} and {b} ranges overlap")));
                }
            }
        }
        let sentinels = self.special.all();
        for (i, (name, id)) in sentinels.iter().enumerate() {
            if let Some((range, _)) = ranges.iter().find(|(_, r)| r.contains(*id)) {
                return Err(Error::Vocab(format!("sentinel {name} lies inside the {range} range")));
            }
            if let Some((other, _)) = sentinels[i + 1..].iter().find(|(_, o)| o == id) {
                return Err(Error::Vocab(format!("sentinels {name} and {other} share id {id}")));
            }
        }
        let size: usize = ranges.iter().map(|(_, r)| r.len()).sum::<usize>() + Sentinels::COUNT;
        let max_id = ranges
            .iter()
            .map(|(_, r)| r.end)
            .chain(sentinels.iter().map(|(_, id)| *id))
            .max()
            .unwrap_or(0);
        if max_id as usize + 1 != size {
            return Err(Error::Vocab(format!(
                "ids must cover 0..{size} without gaps, highest id is {max_id}"
            )));
        }
        if self.max_motion_len == 0 {
            return Err(Error::Vocab("max_motion_len must be positive".into()));
        }
        Ok(())
    }

    /// Total number of ids, sentinels included.
    pub fn size(&self) -> usize {
        self.text.len() + self.motion.len() + self.audio.len() + self.emotion.len() + Sentinels::COUNT
    }

    pub fn motion_size(&self) -> usize {
        self.motion.len()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let vocab: VocabSpec = serde_json::from_slice(bytes)?;
        vocab.validate()?;
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_layout_sums_up() {
        let v = VocabSpec::contiguous(10, 8, 6, 4).unwrap();
        assert_eq!(v.size(), 10 + 8 + 6 + 4 + 8);
        assert_eq!(v.motion.start, 10);
        assert_eq!(v.motion.len(), 8);
        assert_eq!(v.special.unknown_emotion as usize, v.size() - 1);
    }

    #[test]
    fn rejects_overlap_and_duplicate_sentinels() {
        let mut v = VocabSpec::contiguous(10, 8, 6, 4).unwrap();
        v.audio.start = v.motion.end;
        assert!(v.validate().is_err());

        let mut v = VocabSpec::contiguous(10, 8, 6, 4).unwrap();
        v.special.end_audio = v.special.begin_audio;
        assert!(v.validate().is_err());
    }

    #[test]
    fn rejects_tiny_motion_vocab() {
        assert!(VocabSpec::contiguous(4, 1, 4, 2).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = VocabSpec::contiguous(32, 16, 8, 3).unwrap();
        let bytes = serde_json::to_vec(&v).unwrap();
        assert_eq!(VocabSpec::from_json(&bytes).unwrap(), v);
    }
}
