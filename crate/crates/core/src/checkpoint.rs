//! Binary checkpoints of training states.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes   "RPMC" (sequence model) or "RPJC" (judge)
//! version      u32       1
//! step         u64       completed training steps
//! vocab_len    u64       length of the vocabulary JSON
//! vocab        bytes     VocabSpec as JSON
//! d            u64       hidden width
//! d_o          u64       judge only: score-space width
//! n            u64       parameter count
//! params       n × f64   flat parameters in layout order
//! bank_len     u64       judge only: motion bank entries
//! bank         bank_len × (u32 count, d_o × f64 vector)
//! has_opt      u8        1 when optimizer state follows
//! t            u64       optimizer update count
//! m, v         n × f64 each
//! ```

use crate::error::{Error, Result};
use crate::judge::{JudgeParams, JudgeTrainState, MotionBank};
use crate::optim::AdamW;
use crate::preference::TrainState;
use crate::seq_model::ModelParams;
use crate::vocab::VocabSpec;

pub const MODEL_MAGIC: &[u8; 4] = b"RPMC";
pub const JUDGE_MAGIC: &[u8; 4] = b"RPJC";
pub const VERSION: u32 = 1;

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn header(magic: &[u8; 4], step: u64, vocab: &VocabSpec) -> Writer {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u64(step);
        let json = serde_json::to_vec(vocab).expect("vocab serializes");
        w.u64(json.len() as u64);
        w.0.extend_from_slice(&json);
        w
    }

    fn optimizer(&mut self, opt: &AdamW) {
        self.0.push(1);
        self.u64(opt.t);
        self.f64s(&opt.m);
        self.f64s(&opt.v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return bad(format!("truncated at byte {}", self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).or_else(|_| bad(format!("length {n} does not fit in memory")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let size = n.checked_mul(8).map_or_else(|| bad("array length overflows"), Ok)?;
        Ok(self
            .take(size)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Reader<'a>, u64, VocabSpec)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != magic {
            return bad(format!("bad magic, expected {}", String::from_utf8_lossy(magic)));
        }
        let version = r.u32()?;
        if version != VERSION {
            return bad(format!("unsupported version {version}"));
        }
        let step = r.u64()?;
        let n = r.len()?;
        let vocab = VocabSpec::from_json(r.take(n)?)?;
        Ok((r, step, vocab))
    }

    fn optimizer(&mut self, n: usize, step: u64) -> Result<AdamW> {
        match self.take(1)?[0] {
            0 => Ok(AdamW::new(n)),
            1 => {
                let t = self.u64()?;
                let m = self.f64s(n)?;
                let v = self.f64s(n)?;
                if t > step {
                    return bad(format!("optimizer has {t} updates but the state is at step {step}"));
                }
                Ok(AdamW { m, v, t })
            }
            f => bad(format!("optimizer flag {f}")),
        }
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return bad(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_model(state: &TrainState) -> Vec<u8> {
    let p = &state.params;
    let mut w = Writer::header(MODEL_MAGIC, state.step, p.vocab());
    w.u64(p.dim() as u64);
    w.u64(p.values().len() as u64);
    w.f64s(p.values());
    w.optimizer(&state.optimizer);
    w.0
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainState> {
    let (mut r, step, vocab) = Reader::header(bytes, MODEL_MAGIC)?;
    let d = r.len()?;
    let n = r.len()?;
    let values = r.f64s(n)?;
    let params = ModelParams::from_values(&vocab, d, values)?;
    let optimizer = r.optimizer(n, step)?;
    r.finish()?;
    Ok(TrainState { params, optimizer, step })
}

pub fn encode_judge(state: &JudgeTrainState) -> Vec<u8> {
    let p = &state.params;
    let layout = p.layout();
    let mut w = Writer::header(JUDGE_MAGIC, state.step, p.vocab());
    w.u64(layout.d as u64);
    w.u64(layout.d_o as u64);
    w.u64(p.values().len() as u64);
    w.f64s(p.values());
    w.u64(p.bank.entries.len() as u64);
    for (v, c) in &p.bank.entries {
        w.0.extend_from_slice(&c.to_le_bytes());
        w.f64s(v);
    }
    w.optimizer(&state.optimizer);
    w.0
}

pub fn decode_judge(bytes: &[u8]) -> Result<JudgeTrainState> {
    let (mut r, step, vocab) = Reader::header(bytes, JUDGE_MAGIC)?;
    let d = r.len()?;
    let d_o = r.len()?;
    let n = r.len()?;
    let values = r.f64s(n)?;
    let entries = r.len()?;
    let mut bank = MotionBank::default();
    for _ in 0..entries {
        let c = r.u32()?;
        bank.entries.push((r.f64s(d_o)?, c));
    }
    let params = JudgeParams::from_values(&vocab, d, d_o, values, bank)?;
    let optimizer = r.optimizer(n, step)?;
    r.finish()?;
    Ok(JudgeTrainState { params, optimizer, step })
}
