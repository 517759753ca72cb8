//! RIFF/WAVE reading and writing for PCM16 and IEEE float32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::TimeSignal;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<TimeSignal> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

pub fn write_wav(path: impl AsRef<Path>, signal: &TimeSignal, format: SampleFormat) -> Result<()> {
    let bytes = encode_wav(signal, format)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Fmt {
    format: SampleFormat,
    channels: usize,
    sample_rate: u32,
}

pub fn decode_wav(bytes: &[u8]) -> Result<TimeSignal> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "RIFF tag")? != b"RIFF" {
        return Err(Error::format(0, "missing RIFF tag"));
    }
    let riff_len = cur.u32("RIFF size")? as usize;
    if riff_len + 8 > bytes.len() {
        return Err(Error::format(4, format!(
            "RIFF size {riff_len} exceeds file length {}",
            bytes.len()
        )));
    }
    if cur.take(4, "WAVE tag")? != b"WAVE" {
        return Err(Error::format(8, "missing WAVE tag"));
    }

    let mut fmt: Option<Fmt> = None;
    loop {
        let chunk_start = cur.pos;
        let id = cur.take(4, "chunk id")?;
        let len = cur.u32("chunk size")? as usize;
        let body_start = cur.pos;
        let body = cur.take(len, "chunk body")?;
        if len % 2 == 1 && cur.pos < bytes.len() {
            cur.pos += 1;
        }
        match id {
            b"fmt " => fmt = Some(parse_fmt(body, body_start)?),
            b"data" => {
                let fmt = fmt.ok_or_else(|| {
                    Error::format(chunk_start as u64, "data chunk precedes fmt chunk")
                })?;
                return decode_samples(body, body_start, &fmt);
            }
            _ => {}
        }
    }
}

fn parse_fmt(body: &[u8], offset: usize) -> Result<Fmt> {
    let mut cur = Cursor { bytes: body, pos: 0 };
    let at = |c: &Cursor| (offset + c.pos) as u64;
    let mut tag = cur.u16("format tag")?;
    let channels = cur.u16("channel count")? as usize;
    let sample_rate = cur.u32("sample rate")?;
    let _byte_rate = cur.u32("byte rate")?;
    let block_align = cur.u16("block align")? as usize;
    let bits = cur.u16("bits per sample")?;
    if tag == FORMAT_EXTENSIBLE {
        let _cb = cur.u16("extension size")?;
        let _valid = cur.u16("valid bits")?;
        let _mask = cur.u32("channel mask")?;
        tag = cur.u16("sub-format")?;
    }
    if !(1..=8).contains(&channels) {
        return Err(Error::format(offset as u64 + 2, format!("unsupported channel count {channels}")));
    }
    if sample_rate == 0 {
        return Err(Error::format(offset as u64 + 4, "zero sample rate"));
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        _ => {
            return Err(Error::format(
                at(&cur),
                format!("unsupported codec: format tag {tag}, {bits} bits"),
            ))
        }
    };
    let width = if format == SampleFormat::Pcm16 { 2 } else { 4 };
    if block_align != width * channels {
        return Err(Error::format(offset as u64 + 12, format!("inconsistent block align {block_align}")));
    }
    Ok(Fmt {
        format,
        channels,
        sample_rate,
    })
}

fn decode_samples(body: &[u8], offset: usize, fmt: &Fmt) -> Result<TimeSignal> {
    let width = match fmt.format {
        SampleFormat::Pcm16 => 2,
        SampleFormat::Float32 => 4,
    };
    let frame = width * fmt.channels;
    if body.len() % frame != 0 {
        return Err(Error::format(
            (offset + body.len()) as u64,
            "data chunk ends inside a sample frame",
        ));
    }
    let frames = body.len() / frame;
    let mut channels = vec![Vec::with_capacity(frames); fmt.channels];
    for chunk in body.chunks_exact(frame) {
        for (c, s) in chunk.chunks_exact(width).enumerate() {
            let v = match fmt.format {
                SampleFormat::Pcm16 => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
                SampleFormat::Float32 => f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64,
            };
            channels[c].push(v);
        }
    }
    TimeSignal::new(channels, fmt.sample_rate)
}

pub fn encode_wav(signal: &TimeSignal, format: SampleFormat) -> Result<Vec<u8>> {
    let channels = signal.num_channels();
    if !(1..=8).contains(&channels) {
        return Err(Error::config(format!("WAV supports 1-8 channels, got {channels}")));
    }
    let (tag, width) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 2usize),
        SampleFormat::Float32 => (FORMAT_FLOAT, 4usize),
    };
    let frames = signal.len();
    let data_len = frames * channels * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * (channels * width) as u32).to_le_bytes());
    out.extend_from_slice(&((channels * width) as u16).to_le_bytes());
    out.extend_from_slice(&((width * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for t in 0..frames {
        for ch in &signal.channels {
            match format {
                SampleFormat::Pcm16 => {
                    let q = (ch[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&(ch[t] as f32).to_le_bytes()),
            }
        }
    }
    Ok(out)
}
