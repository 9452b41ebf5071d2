//! Model checkpoints: a text header with the config and tensor manifest,
//! followed by every parameter as raw little-endian f64 bytes in store
//! order. Round-trips are bit exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "#checkpoint v1";

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(
        w,
        "{}",
        serde_json::to_string(&model.cfg).map_err(|e| Error::Invalid(e.to_string()))?
    )?;
    writeln!(w, "#params {}", model.store.len())?;
    for (key, value) in model.store.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {} {}", key.layer, key.name, dims.join(" "))?;
    }
    writeln!(w, "#data")?;
    w.write_all(&model.store.le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();

    let mut read_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };

    if read_line(&mut r)? != MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let cfg: ModelConfig = serde_json::from_str(&read_line(&mut r)?)
        .map_err(|e| Error::Parse(format!("bad checkpoint config: {e}")))?;
    cfg.validate()?;

    let count_line = read_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("#params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad params line: {count_line:?}")))?;

    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let entry = read_line(&mut r)?;
        let mut parts = entry.split_ascii_whitespace();
        let layer = parts
            .next()
            .ok_or_else(|| Error::Parse("missing layer in manifest".into()))?
            .to_string();
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse("missing param name in manifest".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|e| Error::Parse(format!("bad dim in manifest: {e}")))
            })
            .collect::<Result<_>>()?;
        manifest.push((layer, name, shape));
    }
    if read_line(&mut r)? != "#data" {
        return Err(Error::Parse("missing #data marker".into()));
    }

    let mut store = ParamStore::new();
    let mut buf = Vec::new();
    for (layer, name, shape) in manifest {
        let n: usize = shape.iter().product();
        buf.resize(n * 8, 0);
        r.read_exact(&mut buf)
            .map_err(|_| Error::Parse("checkpoint data truncated".into()))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&layer, &name, Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Parse("trailing bytes after checkpoint data".into()));
    }
    if store.num_scalars() != cfg.param_count() {
        return Err(Error::Parse(format!(
            "checkpoint has {} scalars, config implies {}",
            store.num_scalars(),
            cfg.param_count()
        )));
    }
    Ok(Model { cfg, store })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::build(ModelConfig {
            vocab_size: 36,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_input_len: 6,
            max_target_len: 5,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.store.le_bytes(), m.store.le_bytes());
        assert_eq!(back.store.len(), m.store.len());
        for i in 0..m.store.len() {
            assert_eq!(back.store.value(i).shape(), m.store.value(i).shape());
        }
    }

    #[test]
    fn loaded_model_evaluates_identically() {
        use crate::batch::pack_batch;
        use crate::span::CorruptedExample;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        let batch = pack_batch(
            &[CorruptedExample {
                input: vec![2, 3, 35, 4],
                target: vec![35, 5, 6],
            }],
            36,
            6,
            5,
        )
        .unwrap();
        let before = m.loss(&batch, 1.0).unwrap();
        save_checkpoint(&path, &m).unwrap();
        let after = load_checkpoint(&path).unwrap().loss(&batch, 1.0).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        save_checkpoint(&path, &m).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 9];
        let p2 = dir.path().join("trunc.ckpt");
        std::fs::write(&p2, truncated).unwrap();
        assert!(load_checkpoint(&p2).is_err());

        let mut extended = bytes.clone();
        extended.push(0);
        let p3 = dir.path().join("ext.ckpt");
        std::fs::write(&p3, extended).unwrap();
        assert!(load_checkpoint(&p3).is_err());

        let p4 = dir.path().join("junk.ckpt");
        std::fs::write(&p4, b"not a checkpoint\n").unwrap();
        assert!(load_checkpoint(&p4).is_err());
    }
}
