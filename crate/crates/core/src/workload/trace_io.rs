//! `GKVT` binary trace container.
//!
//! ```text
//! "GKVT"  u32 version=1  u32 flags (bit0: values present)
//! u32 L, H_kv, G, d_h, n, omega, segment_count
//! segment_count x (u32 start, u32 end, u8 kind {0 text, 1 frame}, u32 step)
//! per layer, f32 blocks:
//!     keys         [H_kv x n x d_h]
//!     obs_queries  [H_kv*G x omega x d_h]
//!     hidden_norms [n]
//!     values       [H_kv x n x d_h]   (only with flag bit0)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::cache_model::{LayerTrace, PromptLayout, Segment};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"GKVT";
pub const VERSION: u32 = 1;
const FLAG_VALUES: u32 = 1;
const FIXED_HEADER: usize = 4 + 4 + 4 + 7 * 4;
const SEGMENT_BYTES: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub layout: PromptLayout,
    pub traces: Vec<LayerTrace>,
}

pub fn encode_trace(layout: &PromptLayout, traces: &[LayerTrace]) -> Result<Vec<u8>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no layers to write".into()))?;
    let (h, g, d) = (first.kv_heads(), first.group_size(), first.head_dim());
    for t in traces {
        t.check_layout(layout)?;
        if (t.kv_heads(), t.group_size(), t.head_dim()) != (h, g, d) {
            return Err(Error::ShapeMismatch("layers disagree on head shape".into()));
        }
    }
    let with_values = first.has_values();
    if traces.iter().any(|t| t.has_values() != with_values) {
        return Err(Error::ShapeMismatch(
            "values must be present in every layer or none".into(),
        ));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let flags = if with_values { FLAG_VALUES } else { 0 };
    let segs = layout.segments();
    for v in [
        VERSION,
        flags,
        traces.len() as u32,
        h as u32,
        g as u32,
        d as u32,
        layout.n() as u32,
        layout.omega() as u32,
        segs.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in segs {
        out.extend_from_slice(&(s.start as u32).to_le_bytes());
        out.extend_from_slice(&(s.end as u32).to_le_bytes());
        out.push(u8::from(s.is_visual()));
        out.extend_from_slice(&s.step().unwrap_or(0).to_le_bytes());
    }
    let put = |out: &mut Vec<u8>, xs: &[f64]| {
        for &x in xs {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for t in traces {
        t.all_keys().iter().for_each(|m| put(&mut out, m.data()));
        t.all_obs_queries().iter().for_each(|m| put(&mut out, m.data()));
        put(&mut out, t.hidden_norms());
        if let Some(vals) = t.values() {
            vals.iter().for_each(|m| put(&mut out, m.data()));
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            needed: end,
            available: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32_block(&mut self, count: usize) -> Vec<f64> {
        let raw = &self.bytes[self.pos..self.pos + 4 * count];
        self.pos += 4 * count;
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    }
}

fn format_error(msg: impl Into<String>) -> Error {
    Error::MalformedTrace(msg.into())
}

pub fn decode_trace(bytes: &[u8]) -> Result<TraceFile> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = c.u32()?;
    let dims: Vec<usize> = (0..7).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let [layers, h, g, d, n, omega, seg_count] = dims[..] else {
        unreachable!()
    };
    let mut segments = Vec::with_capacity(seg_count.min(1 << 16));
    for _ in 0..seg_count {
        let start = c.u32()? as usize;
        let end = c.u32()? as usize;
        let kind = c.u8()?;
        let step = c.u32()?;
        segments.push(match kind {
            0 => Segment::text(start, end),
            1 => Segment::frame(start, end, step),
            k => return Err(format_error(format!("unknown segment kind {k}"))),
        });
    }
    let with_values = flags & FLAG_VALUES != 0;
    let wide = |xs: &[usize]| xs.iter().map(|&x| x as u128).product::<u128>();
    let per_layer = wide(&[h, n, d]) * (1 + u128::from(with_values)) + wide(&[h, g, omega, d]) + n as u128;
    let expected_wide =
        (FIXED_HEADER + SEGMENT_BYTES * seg_count + 4) as u128 + 4 * layers as u128 * per_layer;
    let expected = usize::try_from(expected_wide).unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let layout = PromptLayout::new(segments, omega).map_err(|e| format_error(e.to_string()))?;
    if layout.n() != n {
        return Err(format_error(format!(
            "segments cover {} tokens, header says {n}",
            layout.n()
        )));
    }
    let mut traces = Vec::with_capacity(layers);
    for layer in 0..layers {
        let block = |c: &mut Cursor, rows: usize| {
            Matrix::from_vec(rows, d, c.f32_block(rows * d)).map_err(|e| format_error(e.to_string()))
        };
        let keys = (0..h).map(|_| block(&mut c, n)).collect::<Result<Vec<_>>>()?;
        let obs = (0..h * g)
            .map(|_| block(&mut c, omega))
            .collect::<Result<Vec<_>>>()?;
        let norms = c.f32_block(n);
        let values = if with_values {
            Some((0..h).map(|_| block(&mut c, n)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let trace = LayerTrace::new(layer, keys, obs, norms, values)
            .map_err(|e| format_error(e.to_string()))?;
        traces.push(trace);
    }
    Ok(TraceFile { layout, traces })
}

pub fn write_trace(path: &Path, layout: &PromptLayout, traces: &[LayerTrace]) -> Result<()> {
    fs::write(path, encode_trace(layout, traces)?)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    decode_trace(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::synth::{gen_trajectory, TrajectoryParams};

    fn sample_bytes(with_values: bool) -> (Vec<u8>, TraceFile) {
        let t = gen_trajectory(&TrajectoryParams {
            layers: 2,
            frames: 2,
            tokens_per_frame: 8,
            head_dim: 8,
            with_values,
            seed: 5,
            ..TrajectoryParams::default()
        })
        .unwrap();
        let bytes = encode_trace(&t.layout, &t.traces).unwrap();
        (
            bytes,
            TraceFile {
                layout: t.layout,
                traces: t.traces,
            },
        )
    }

    #[test]
    fn round_trip() {
        for with_values in [true, false] {
            let (bytes, original) = sample_bytes(with_values);
            assert_eq!(decode_trace(&bytes).unwrap(), original);
        }
    }

    #[test]
    fn distinct_errors() {
        let (bytes, _) = sample_bytes(true);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_trace(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        let err = decode_trace(&bad).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(2)));
        assert!(err.to_string().contains("unsupported version"));
        assert!(matches!(
            decode_trace(&bytes[..bytes.len() - 1]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(decode_trace(&bytes[..10]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_trace(&bad), Err(Error::ChecksumMismatch { .. })));
    }
}
