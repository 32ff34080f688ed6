//! Checkpoint format: the magic string "ARDU1", then one record per tensor
//! (u32 name length, name bytes, four u32 extents, little-endian f32 data).
//! Batchnorm running statistics follow the parameters under reserved
//! `.running_*` names.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Shape;

const MAGIC: &[u8; 5] = b"ARDU1";

fn write_record<W: Write>(w: &mut W, name: &str, shape: Shape, data: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    for extent in shape {
        w.write_all(&(extent as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, t) in &model.book().params {
        write_record(&mut w, name, t.shape(), &t.data())?;
    }
    for (name, stats) in &model.book().bn_stats {
        let s = stats.borrow();
        let c = s.mean.len();
        write_record(&mut w, &format!("{name}.running_mean"), [1, c, 1, 1], &s.mean)?;
        write_record(&mut w, &format!("{name}.running_var"), [1, c, 1, 1], &s.var)?;
        let flag = if s.initialized { 1.0 } else { 0.0 };
        write_record(&mut w, &format!("{name}.running_init"), [1, 1, 1, 1], &[flag])?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_records(path: &Path) -> Result<HashMap<String, (Shape, Vec<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut records = HashMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not valid utf-8".into()))?;
        let mut shape = [0usize; 4];
        for extent in &mut shape {
            read_exact_or(&mut r, &mut len_buf, &name)?;
            *extent = u32::from_le_bytes(len_buf) as usize;
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            read_exact_or(&mut r, &mut len_buf, &name)?;
            data.push(f32::from_le_bytes(len_buf));
        }
        if records.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    Ok(records)
}

/// Load a checkpoint into an already-built model of the same configuration.
pub fn load_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut records = read_records(path)?;
    let mut take = |name: &str, shape: Shape| -> Result<Vec<f32>> {
        let (got_shape, data) = records
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if got_shape != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor '{name}': checkpoint {got_shape:?}, model {shape:?}"
            )));
        }
        Ok(data)
    };

    for (name, t) in &model.book().params {
        let data = take(name, t.shape())?;
        t.data_mut().copy_from_slice(&data);
        t.zero_grad();
    }
    for (name, stats) in &model.book().bn_stats {
        let c = stats.borrow().mean.len();
        let mean = take(&format!("{name}.running_mean"), [1, c, 1, 1])?;
        let var = take(&format!("{name}.running_var"), [1, c, 1, 1])?;
        let init = take(&format!("{name}.running_init"), [1, 1, 1, 1])?;
        let mut s = stats.borrow_mut();
        s.mean = mean;
        s.var = var;
        s.initialized = init[0] != 0.0;
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint contains unknown tensor '{name}'"
        )));
    }
    Ok(())
}
