//! Model checkpoints: an 8-byte little-endian header length, a JSON header
//! describing the model and every tensor, then raw little-endian values.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageModel, ImageModelSpec, ParamStore, TextEncoderSpec, TextModel};
use crate::tensor::{decode_values, DType, Scalar, Tensor};

pub const FORMAT: &str = "docscale-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "lowercase")]
pub enum ModelConfig {
    Image(ImageModelSpec),
    Text(TextEncoderSpec),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Image(_) => "image",
            ModelConfig::Text(_) => "text",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Image(s) => s.num_classes,
            ModelConfig::Text(s) => s.num_classes,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    trainable: bool,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: DType,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut data = Vec::with_capacity(params.count() * T::DTYPE.size());
    for p in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group.clone(),
            trainable: p.trainable,
            shape: p.value.shape().to_vec(),
            offset: data.len(),
        });
        for &v in p.value.data() {
            v.write_le(&mut data);
        }
    }
    let header = serde_json::to_vec(&Header { format: FORMAT.into(), version: VERSION, dtype: T::DTYPE, model: model.clone(), tensors })?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&data)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| bad(e.to_string()))?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(bad(format!("header of {len} bytes")));
    }
    let mut raw = vec![0u8; len];
    r.read_exact(&mut raw).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&raw).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let size = header.dtype.size();
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * size;
        if end > data.len() {
            return Err(bad(format!("tensor `{}` runs past end of file", e.name)));
        }
        let t = Tensor::new(&e.shape, decode_values(&data[e.offset..end], header.dtype))?;
        let id = store.add(e.name, e.group, t);
        store.get_mut(id).trainable = e.trainable;
    }
    Ok((header.model, store))
}

pub fn load_image_model<T: Scalar>(path: &Path) -> Result<ImageModel<T>> {
    match load_checkpoint::<T>(path)? {
        (ModelConfig::Image(spec), store) => ImageModel::from_parts(spec, store, 0).map_err(|e| Error::Incompatible(e.to_string())),
        (other, _) => Err(Error::Incompatible(format!("{} holds a {} model, expected image", path.display(), other.kind()))),
    }
}

pub fn load_text_model<T: Scalar>(path: &Path) -> Result<TextModel<T>> {
    match load_checkpoint::<T>(path)? {
        (ModelConfig::Text(spec), store) => TextModel::from_parts(spec, store).map_err(|e| Error::Incompatible(e.to_string())),
        (other, _) => Err(Error::Incompatible(format!("{} holds a {} model, expected text", path.display(), other.kind()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_efficientnet, build_text_encoder, Classifier};

    #[test]
    fn image_roundtrip_and_precision_change() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let spec = ImageModelSpec::micro(4, 32);
        let mut m = build_efficientnet::<f32>(&spec, 3).unwrap();
        m.params_mut().train_only(&["head"]).unwrap();
        save_checkpoint(&p, &ModelConfig::Image(spec.clone()), m.params()).unwrap();
        let back = load_image_model::<f32>(&p).unwrap();
        assert_eq!(back.params().flatten(), m.params().flatten());
        assert_eq!(back.params().count_trainable(), m.params().count_trainable());
        let wide = load_image_model::<f64>(&p).unwrap();
        assert_eq!(wide.params().flatten(), m.params().flatten().iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert!(matches!(load_text_model::<f32>(&p), Err(Error::Incompatible(_))));
    }

    #[test]
    fn text_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let spec = TextEncoderSpec::desk(3);
        let m = build_text_encoder::<f64>(&spec, 1).unwrap();
        save_checkpoint(&p, &ModelConfig::Text(spec), m.params()).unwrap();
        assert_eq!(load_text_model::<f64>(&p).unwrap().params().flatten(), m.params().flatten());
    }

    #[test]
    fn garbage_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"\x05\0\0\0\0\0\0\0hello").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Format(_))));
    }
}
