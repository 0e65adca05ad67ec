//! Weight container.
//!
//! Layout: the 8-byte magic `FOCALW01`, a little-endian `u64` manifest
//! length, the JSON manifest (model config plus one `{name, shape, offset}`
//! entry per tensor in module-path order, offsets in bytes from the start of
//! the payload), then every tensor as raw little-endian IEEE-754 `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};
use crate::layers::Params;
use crate::model::{build_model, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"FOCALW01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_model(model: &Model, mut w: impl Write) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    model.visit("", &mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    });
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config.clone(),
        tensors,
    })
    .map_err(|e| FocalError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    let mut result = Ok(());
    model.visit("", &mut |_, t| {
        if result.is_ok() {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            result = w.write_all(&bytes);
        }
    });
    result?;
    w.flush()?;
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FocalError::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest).map_err(|e| FocalError::Format(e.to_string()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut model = build_model(&manifest.config, 0)?;
    let mut entries = manifest.tensors.iter();
    let mut error = None;
    model.visit_mut("", &mut |name, t| {
        if error.is_some() {
            return;
        }
        let Some(entry) = entries.next() else {
            error = Some(format!("manifest ends before {name}"));
            return;
        };
        if entry.name != name || entry.shape != t.shape() {
            error = Some(format!(
                "expected {name} {:?}, found {} {:?}",
                t.shape(),
                entry.name,
                entry.shape
            ));
            return;
        }
        let start = entry.offset as usize;
        let end = start + 8 * t.numel();
        if end > payload.len() {
            error = Some(format!("{name} runs past the payload"));
            return;
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(payload[start..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    });
    if let Some(e) = error {
        return Err(FocalError::Format(e));
    }
    if entries.next().is_some() {
        return Err(FocalError::Format("manifest lists extra tensors".into()));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FocalLevel;
    use crate::model::StageConfig;

    fn toy() -> ModelConfig {
        ModelConfig {
            input_size: [8, 8],
            in_channels: 3,
            stages: vec![StageConfig {
                depth: 1,
                dim: 4,
                patch: 2,
                heads: 2,
                window: 2,
                levels: vec![FocalLevel::new(1, 4), FocalLevel::new(2, 2)],
            }],
            num_classes: 5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = build_model(&toy(), 3).unwrap();
        model.randomize(1.0, &mut crate::init::rng_from_seed(9));
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let back = read_model(&buf[..]).unwrap();
        assert_eq!(back, model);
        let bits = |m: &Model| m.named_params().into_iter().flat_map(|(_, t)| t.into_data()).map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
    }

    #[test]
    fn payload_is_little_endian_f64() {
        let model = build_model(&toy(), 1).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let payload = &buf[16 + len..];
        let first = &model.named_params()[0].1;
        assert_eq!(f64::from_le_bytes(payload[..8].try_into().unwrap()), first.data()[0]);
        assert_eq!(payload.len(), 8 * model.num_params());
    }

    #[test]
    fn rejects_corruption() {
        let model = build_model(&toy(), 1).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&bad[..]), Err(FocalError::Format(_))));
        buf.truncate(buf.len() - 8);
        assert!(read_model(&buf[..]).is_err());
    }
}
