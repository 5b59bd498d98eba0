//! Little-endian checkpoint files.
//!
//! Layout: `"SVQC"`, u32 version, u32 metadata length, metadata JSON,
//! u64 optimizer step, u32 parameter count, then per parameter a name,
//! a shape and the value, first-moment and second-moment payloads as f32,
//! then u32 buffer count with name, shape and value per buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Float, NnError, NnResult, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SVQC";

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    value: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Decoded checkpoint contents, independent of any model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub step: u64,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn to_f32<T: Float>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

fn put_u32(w: &mut impl Write, v: u32) -> NnResult<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_name_shape(w: &mut impl Write, name: &str, shape: &[usize]) -> NnResult<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, shape.len() as u32)?;
    for &d in shape {
        put_u32(w, d as u32)?;
    }
    Ok(())
}

fn put_f32s(w: &mut impl Write, v: &[f32]) -> NnResult<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> NnResult<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> NnResult<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn get_entry(r: &mut impl Read, moments: bool) -> NnResult<Entry> {
    let name_len = get_u32(r)? as usize;
    if name_len > 4096 {
        return Err(bad("implausible name length"));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
    let ndim = get_u32(r)? as usize;
    if ndim > 8 {
        return Err(bad(format!("{name}: {ndim} dimensions")));
    }
    let shape = (0..ndim).map(|_| get_u32(r).map(|d| d as usize)).collect::<NnResult<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(bad(format!("{name}: implausible size")));
    }
    let value = get_f32s(r, n)?;
    let (m, v) = if moments {
        (get_f32s(r, n)?, get_f32s(r, n)?)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Entry { name, shape, value, m, v })
}

pub fn write_checkpoint<T: Float>(w: &mut impl Write, store: &ParamStore<T>, meta: &serde_json::Value) -> NnResult<()> {
    let meta = serde_json::to_vec(meta).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, meta.len() as u32)?;
    w.write_all(&meta)?;
    w.write_all(&store.step.to_le_bytes())?;
    put_u32(w, store.params().len() as u32)?;
    for p in store.params() {
        put_name_shape(w, &p.name, &p.value.shape)?;
        put_f32s(w, &to_f32(&p.value.data))?;
        put_f32s(w, &to_f32(&p.m))?;
        put_f32s(w, &to_f32(&p.v))?;
    }
    put_u32(w, store.buffers().len() as u32)?;
    for b in store.buffers() {
        put_name_shape(w, &b.name, &b.value.shape)?;
        put_f32s(w, &to_f32(&b.value.data))?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> NnResult<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = get_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = serde_json::from_slice(&meta).map_err(|e| bad(e.to_string()))?;
    let mut step = [0u8; 8];
    r.read_exact(&mut step)?;
    let n_params = get_u32(r)?;
    let params = (0..n_params).map(|_| get_entry(r, true)).collect::<NnResult<_>>()?;
    let n_buffers = get_u32(r)?;
    let buffers = (0..n_buffers).map(|_| get_entry(r, false)).collect::<NnResult<_>>()?;
    Ok(Checkpoint {
        meta,
        step: u64::from_le_bytes(step),
        params,
        buffers,
    })
}

pub fn save_checkpoint<T: Float>(path: &Path, store: &ParamStore<T>, meta: &serde_json::Value) -> NnResult<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, store, meta)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> NnResult<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

impl Checkpoint {
    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|e| e.name.as_str())
    }

    /// Copies values, optimizer moments, buffers and the step into a store
    /// built for the same model. Names and shapes must match exactly.
    pub fn restore<T: Float>(&self, store: &mut ParamStore<T>) -> NnResult<()> {
        if self.params.len() != store.params().len() || self.buffers.len() != store.buffers().len() {
            return Err(bad(format!(
                "checkpoint has {} parameters and {} buffers, model has {} and {}",
                self.params.len(),
                self.buffers.len(),
                store.params().len(),
                store.buffers().len()
            )));
        }
        let conv = |v: &[f32]| v.iter().map(|&x| T::of(x as f64)).collect::<Vec<T>>();
        for (e, p) in self.params.iter().zip(store.params_mut()) {
            if e.name != p.name || e.shape != p.value.shape {
                return Err(bad(format!("{} {:?} does not match {} {:?}", e.name, e.shape, p.name, p.value.shape)));
            }
            p.value.data = conv(&e.value);
            p.m = conv(&e.m);
            p.v = conv(&e.v);
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
        for (e, b) in self.buffers.iter().zip(store.buffers_mut()) {
            if e.name != b.name || e.shape != b.value.shape {
                return Err(bad(format!("buffer {} does not match {}", e.name, b.name)));
            }
            b.value.data = conv(&e.value);
        }
        store.step = self.step;
        Ok(())
    }
}
