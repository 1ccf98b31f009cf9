//! Binary probe checkpoints.
//!
//! Layout, all integers little-endian u32:
//! magic `HPCK`, version, config JSON length, config JSON, standardizer flag
//! (0/1) followed by `2 × input_size` f32 (means then stds) when set, layer
//! count, `(inputs, outputs)` per layer, then per layer the row-major weights
//! and the biases as f32.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Layer, Mlp, Probe, ProbeConfig, ProbeError, Standardizer};

pub const MAGIC: &[u8; 4] = b"HPCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s<'a>(out: &mut Vec<u8>, vs: impl IntoIterator<Item = &'a f32>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(probe: &Probe) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let config = serde_json::to_vec(&probe.config).expect("config serializes");
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    match &probe.standardizer {
        Some(s) => {
            put_u32(&mut out, 1);
            put_f32s(&mut out, &s.mean);
            put_f32s(&mut out, &s.std);
        }
        None => put_u32(&mut out, 0),
    }
    put_u32(&mut out, probe.net.layers.len() as u32);
    for l in &probe.net.layers {
        put_u32(&mut out, l.inputs() as u32);
        put_u32(&mut out, l.outputs() as u32);
    }
    for l in &probe.net.layers {
        put_f32s(&mut out, l.w.iter());
        put_f32s(&mut out, l.b.iter());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProbeError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ProbeError::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ProbeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ProbeError> {
        let len = n.checked_mul(4).ok_or_else(|| ProbeError::Checkpoint("size overflow".into()))?;
        Ok(crate::states::decode_f32(self.take(len)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Probe, ProbeError> {
    let bad = |m: String| ProbeError::Checkpoint(m);
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("not a probe checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let config: ProbeConfig = serde_json::from_slice(c.take(n)?).map_err(|e| bad(e.to_string()))?;
    let standardizer = match c.u32()? {
        0 => None,
        1 => Some(Standardizer { mean: c.f32s(config.input_size)?, std: c.f32s(config.input_size)? }),
        other => return Err(bad(format!("bad standardizer flag {other}"))),
    };
    let count = c.u32()? as usize;
    if count == 0 || count > 64 {
        return Err(bad(format!("bad layer count {count}")));
    }
    let shapes: Vec<(usize, usize)> = (0..count).map(|_| Ok((c.u32()? as usize, c.u32()? as usize))).collect::<Result<_, ProbeError>>()?;
    if shapes[0].0 != config.input_size || shapes.last().map(|s| s.1) != Some(1) {
        return Err(bad("layer shapes do not match the configuration".into()));
    }
    if shapes.windows(2).any(|w| w[0].1 != w[1].0) {
        return Err(bad("layer shapes do not chain".into()));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, o) in shapes {
        let w = Array2::from_shape_vec((i, o), c.f32s(i * o)?).expect("shape checked");
        let b = Array1::from(c.f32s(o)?);
        layers.push(Layer { w, b });
    }
    if c.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(Probe { config, standardizer, net: Mlp { layers } })
}

pub fn save(probe: &Probe, path: &Path) -> Result<(), ProbeError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(probe))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Probe, ProbeError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
