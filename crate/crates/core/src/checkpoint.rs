//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCYS"  u32 version  u32 header_len  header (UTF-8 key=value lines)
//! u64 n_params  n_params × f32   (parameter slots in topological order)
//! u32 n_bn      n_bn × (u32 C, C × f32 running_mean, C × f32 running_var)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::zoo::Architecture;

pub const MAGIC: &[u8; 4] = b"DCYS";
pub const VERSION: u32 = 1;

pub fn encode(graph: &LayerGraph<f32>) -> Result<Vec<u8>> {
    let arch = graph
        .arch
        .as_ref()
        .ok_or_else(|| Error::Usage("only networks built from an architecture can be saved".into()))?;
    let header = arch.to_header();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());

    let slots = graph.parameter_slots();
    out.extend_from_slice(&(graph.num_parameters() as u64).to_le_bytes());
    for slot in slots {
        for v in graph.param(slot).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(graph.bn_states().len() as u32).to_le_bytes());
    for bn in graph.bn_states() {
        out.extend_from_slice(&(bn.channels() as u32).to_le_bytes());
        for v in bn.running_mean.iter().chain(&bn.running_var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<LayerGraph<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected \"DCYS\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = r.u32("header length")? as usize;
    let header_at = r.pos;
    let header = std::str::from_utf8(r.take(len, "header")?).map_err(|_| Error::Parse {
        offset: header_at,
        message: "header is not UTF-8".into(),
    })?;
    let arch = Architecture::from_header(header)?;
    let mut graph: LayerGraph<f32> = arch.build()?;

    let count = r.u64("parameter count")? as usize;
    if count != graph.num_parameters() {
        return Err(r.err(format!(
            "checkpoint holds {count} parameters but the architecture has {}",
            graph.num_parameters()
        )));
    }
    for slot in graph.parameter_slots() {
        let n = graph.param(slot).len();
        let values = r.f32s(n, "parameters")?;
        graph.param_mut(slot).data_mut().copy_from_slice(&values);
    }
    let n_bn = r.u32("normalization count")? as usize;
    if n_bn != graph.bn_states().len() {
        return Err(r.err(format!(
            "checkpoint holds {n_bn} normalization layers but the architecture has {}",
            graph.bn_states().len()
        )));
    }
    for i in 0..n_bn {
        let c = r.u32("channel count")? as usize;
        if c != graph.bn_states()[i].channels() {
            return Err(r.err(format!("normalization layer {i} has {c} channels in the file")));
        }
        let mean = r.f32s(c, "running mean")?;
        let var = r.f32s(c, "running variance")?;
        let bn = &mut graph.bn_states_mut()[i];
        bn.running_mean = mean;
        bn.running_var = var;
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(graph)
}

pub fn save(graph: &LayerGraph<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(graph)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<LayerGraph<f32>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
