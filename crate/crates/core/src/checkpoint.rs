//! Single-file checkpoint archive: config echo (JSON), named parameter
//! arrays, optimizer state, run counters and an optional pruning mask. The
//! encoding is fully deterministic, so identical training states produce
//! byte-identical files.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::tensor::Arr;
use crate::training::RunConfig;

const MAGIC: &[u8; 4] = b"HVCK";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    /// Next training step to execute (steps below this are done).
    pub next_step: u64,
    pub skipped_count: u64,
    pub params: Vec<(String, Arr)>,
    pub opt_t: u64,
    pub opt_m: Vec<Arr>,
    pub opt_u: Vec<Arr>,
    /// Per-layer keep masks, when a pruning mask has been attached.
    pub mask: Option<Vec<Arr>>,
}

fn put_arr(buf: &mut Vec<u8>, arr: &Arr) {
    buf.extend_from_slice(&(arr.ndim() as u64).to_le_bytes());
    for &d in arr.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated archive".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn arr(&mut self) -> Result<Arr> {
        let ndim = self.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Arr::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let config_json = serde_json::to_vec(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&ckpt.next_step.to_le_bytes());
    buf.extend_from_slice(&ckpt.skipped_count.to_le_bytes());

    buf.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for (name, arr) in &ckpt.params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
        buf.extend_from_slice(nb);
        put_arr(&mut buf, arr);
    }
    buf.extend_from_slice(&ckpt.opt_t.to_le_bytes());
    for m in &ckpt.opt_m {
        put_arr(&mut buf, m);
    }
    for u in &ckpt.opt_u {
        put_arr(&mut buf, u);
    }
    match &ckpt.mask {
        None => buf.extend_from_slice(&0u64.to_le_bytes()),
        Some(layers) => {
            buf.extend_from_slice(&(layers.len() as u64).to_le_bytes());
            for m in layers {
                put_arr(&mut buf, m);
            }
        }
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let json_len = c.u64()? as usize;
    let config: RunConfig = serde_json::from_slice(c.take(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let next_step = c.u64()?;
    let skipped_count = c.u64()?;
    let n_params = c.u64()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = c.u64()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("param name: {e}")))?;
        params.push((name, c.arr()?));
    }
    let opt_t = c.u64()?;
    let mut opt_m = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        opt_m.push(c.arr()?);
    }
    let mut opt_u = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        opt_u.push(c.arr()?);
    }
    let n_mask = c.u64()? as usize;
    let mask = if n_mask == 0 {
        None
    } else {
        let mut layers = Vec::with_capacity(n_mask);
        for _ in 0..n_mask {
            layers.push(c.arr()?);
        }
        Some(layers)
    };
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in archive".to_string()));
    }
    Ok(Checkpoint {
        config,
        next_step,
        skipped_count,
        params,
        opt_t,
        opt_m,
        opt_u,
        mask,
    })
}
