//! Binary checkpoints of the full learner state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CAMLCKPT" | version u32 | iteration u64 | seed u64 | adam_t u64 | n_blocks u32
//! per block: name_len u32 | name utf-8 | rows u64 | cols u64 | rows*cols f64, row-major
//! ```
//!
//! Blocks are the meta-learned parameters, `adam.m.<name>`, `adam.v.<name>`
//! and the knowledge graph features `kg.nodes`. Values round-trip bitwise.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::meta::{AdamState, Architecture, LearnerState};
use crate::nets::ParamBlocks;
use crate::tape::Mat;

pub const MAGIC: &[u8; 8] = b"CAMLCKPT";
pub const VERSION: u32 = 1;
const KG_BLOCK: &str = "kg.nodes";

fn push_block(out: &mut Vec<u8>, name: &str, m: &Mat) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((m.nrows() as u64).to_le_bytes());
    out.extend((m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend(m[(r, c)].to_le_bytes());
        }
    }
}

pub fn to_bytes(state: &LearnerState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(state.iteration.to_le_bytes());
    out.extend(state.seed.to_le_bytes());
    out.extend(state.optimizer.t.to_le_bytes());
    let n = 3 * state.params.len() + 1;
    out.extend((n as u32).to_le_bytes());
    for (name, m) in state.params.iter() {
        push_block(&mut out, name, m);
    }
    for (name, m) in state.optimizer.m.iter() {
        push_block(&mut out, &format!("adam.m.{name}"), m);
    }
    for (name, m) in state.optimizer.v.iter() {
        push_block(&mut out, &format!("adam.v.{name}"), m);
    }
    push_block(&mut out, KG_BLOCK, &state.kg.node_features);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn block(&mut self) -> Result<(String, Mat)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.err("block name is not utf-8"))?
            .to_string();
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let data = self.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| self.err("bad block size"))?)?;
        let vals: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Mat::from_row_slice(rows, cols, &vals)))
    }
}

/// Decodes a checkpoint for `arch`. Every block must be present with the
/// shape `arch` implies.
pub fn from_bytes(bytes: &[u8], arch: &Architecture, path: &Path) -> Result<LearnerState> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let iteration = r.u64()?;
    let seed = r.u64()?;
    let t = r.u64()?;
    let n = r.u32()? as usize;
    let mut blocks = ParamBlocks::new();
    for _ in 0..n {
        let (name, m) = r.block()?;
        if blocks.contains(&name) {
            return Err(r.err(format!("duplicate block {name}")));
        }
        blocks.insert(name, m);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }

    // Template state supplies the expected names and shapes.
    let template = LearnerState::init(arch.clone(), seed);
    let pick = |prefix: &str| -> Result<ParamBlocks> {
        let mut out = ParamBlocks::new();
        for (name, m) in template.params.iter() {
            let key = format!("{prefix}{name}");
            let got = blocks
                .get(&key)
                .ok_or_else(|| r.err(format!("missing block {key}")))?;
            if got.shape() != m.shape() {
                return Err(r.err(format!(
                    "block {key} has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    m.shape()
                )));
            }
            out.insert(name, got.clone());
        }
        Ok(out)
    };
    let params = pick("")?;
    let m = pick("adam.m.")?;
    let v = pick("adam.v.")?;
    let kg_nodes = blocks.get(KG_BLOCK).ok_or_else(|| r.err("missing block kg.nodes"))?;
    if kg_nodes.shape() != template.kg.node_features.shape() {
        return Err(r.err(format!(
            "block kg.nodes has shape {:?}, architecture expects {:?}",
            kg_nodes.shape(),
            template.kg.node_features.shape()
        )));
    }
    if n != 3 * params.len() + 1 {
        return Err(r.err("unexpected extra blocks"));
    }
    let mut kg = template.kg;
    kg.node_features = kg_nodes.clone();
    Ok(LearnerState {
        arch: arch.clone(),
        params,
        kg,
        optimizer: AdamState { m, v, t },
        iteration,
        seed,
    })
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn save(state: &LearnerState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp: PathBuf = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&to_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, arch: &Architecture) -> Result<LearnerState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, arch, path)
}

/// `ckpt_000123.bin` style name used by the training front-end.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.bin")
}
