//! `HRCD` dataset container.
//!
//! ```text
//! "HRCD" | u32 version=1 | u32 J | u32 K | f32 rate | u32 trials
//! trials x { u32 L | f32 human[L*3J] | f32 robot[L*3K]
//!            | u32 segments | segments x { u32 start | u32 end | u8 mode } }
//! ```

use std::fs;
use std::path::Path;

use super::{Mode, Segment, Trial};
use crate::error::{Error, Result};
use crate::motion::{Agent, MotionSequence};
use crate::nn::checkpoint::Reader;
use crate::nn::Tensor;

pub const HRCD_MAGIC: &[u8; 4] = b"HRCD";
pub const HRCD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub j: usize,
    pub k: usize,
    pub rate: f32,
    pub trials: Vec<Trial>,
}

pub fn encode(file: &DatasetFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(HRCD_MAGIC);
    out.extend_from_slice(&HRCD_VERSION.to_le_bytes());
    out.extend_from_slice(&(file.j as u32).to_le_bytes());
    out.extend_from_slice(&(file.k as u32).to_le_bytes());
    out.extend_from_slice(&file.rate.to_le_bytes());
    out.extend_from_slice(&(file.trials.len() as u32).to_le_bytes());
    for t in &file.trials {
        if t.human.dim() != 3 * file.j || t.robot.dim() != 3 * file.k || t.robot.len() != t.len() {
            return Err(Error::dim("trial shape disagrees with the file header"));
        }
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for x in t.human.values.data().iter().chain(t.robot.values.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(t.segments.len() as u32).to_le_bytes());
        for s in &t.segments {
            out.extend_from_slice(&s.start.to_le_bytes());
            out.extend_from_slice(&s.end.to_le_bytes());
            out.push(s.mode as u8);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<DatasetFile> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != HRCD_MAGIC {
        return Err(Error::format(0, "bad magic, expected HRCD"));
    }
    let at = r.pos;
    let version = r.u32()?;
    if version != HRCD_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let j = r.u32()? as usize;
    let k = r.u32()? as usize;
    let at = r.pos;
    let rate = r.f32()?;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::format(at, format!("invalid frame rate {rate}")));
    }
    let count = r.u32()? as usize;
    let mut trials = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()? as usize;
        if len == 0 {
            return Err(Error::format(at, "empty trial"));
        }
        let human = r.f32s(len * 3 * j)?;
        let robot = r.f32s(len * 3 * k)?;
        let nseg = r.u32()? as usize;
        let mut segments = Vec::with_capacity(nseg.min(1 << 16));
        for _ in 0..nseg {
            let start = r.u32()?;
            let end = r.u32()?;
            let at = r.pos;
            let mode =
                Mode::from_u8(r.u8()?).ok_or_else(|| Error::format(at, "unknown mode tag"))?;
            segments.push(Segment { start, end, mode });
        }
        let seq = |data: Vec<f32>, dim: usize, agent| -> Result<MotionSequence> {
            MotionSequence::new(Tensor::new(&[len, dim], data)?, agent)
                .map_err(|e| Error::format(at, format!("trial payload: {e}")))
        };
        trials.push(Trial {
            human: seq(human, 3 * j, Agent::Human)?,
            robot: seq(robot, 3 * k, Agent::Robot)?,
            segments,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos, "trailing bytes after last trial"));
    }
    Ok(DatasetFile { j, k, rate, trials })
}

pub fn write_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    fs::write(path, encode(file)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
