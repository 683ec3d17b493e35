//! Binary checkpoint: fixed header followed by little-endian `f64` tensors.
//!
//! ```text
//! magic   b"MSRG"
//! version u32
//! vocab   u32
//! embed   u32
//! hidden  u32
//! task    u8   (0 = entanglement, 1 = srv)
//! pad     [u8; 3]
//! vhash   u64  vocabulary hash
//! count   u64  number of parameters
//! params  count * f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{LstmModel, ModelShape, Params};
use crate::dataset::Task;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSRG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub shape: ModelShape,
    pub vocab_hash: u64,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &LstmModel) -> Result<()> {
    let s = &model.shape;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [s.vocab, s.embed, s.hidden] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let task: u8 = match s.task {
        Task::Entanglement => 0,
        Task::Srv => 1,
    };
    w.write_all(&[task, 0, 0, 0])?;
    w.write_all(&model.vocab_hash.to_le_bytes())?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.params.len() * 8);
    for slice in model.params.slices() {
        for x in slice {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<LstmModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let vocab = read_u32(&mut r)? as usize;
    let embed = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let mut tb = [0u8; 4];
    r.read_exact(&mut tb)?;
    let task = match tb[0] {
        0 => Task::Entanglement,
        1 => Task::Srv,
        t => return Err(Error::Checkpoint(format!("unknown task byte {t}"))),
    };
    let vocab_hash = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let shape = ModelShape {
        vocab,
        embed,
        hidden,
        task,
    };
    let mut params = Params::zeros(&shape);
    if params.len() != count {
        return Err(Error::Checkpoint(format!(
            "header promises {count} parameters, shape needs {}",
            params.len()
        )));
    }
    let mut b = [0u8; 8];
    for slice in params.slices_mut() {
        for x in slice.iter_mut() {
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(LstmModel {
        shape,
        vocab_hash,
        params,
    })
}

pub fn save_checkpoint(path: &Path, model: &LstmModel) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), model)
}

pub fn load_checkpoint(path: &Path) -> Result<LstmModel> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
