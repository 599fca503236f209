use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pooling::PoolingHead;
use crate::siamese::SiameseModel;
use crate::training::TrainConfig;

/// File layout: magic, version (u32 LE), header length (u64 LE), JSON
/// header, then every tensor's data as little-endian f32, packed back to
/// back in header order.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSIM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    head: PoolingHead,
    train: TrainConfig,
    classifier: bool,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
}

/// Everything needed to resume or run inference.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: SiameseModel<f32>,
    pub train: TrainConfig,
    pub vocab: Vocab,
}

/// Serializes the model next to its configs and vocabulary. The write goes
/// through a temp file in the same directory and a rename, so a crash never
/// leaves a half-written checkpoint at `path`.
pub fn save_checkpoint(
    model: &SiameseModel<f32>,
    train: &TrainConfig,
    vocab: &Vocab,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, tensor) in model.named_params() {
        entries.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        encoder: model.encoder.config.clone(),
        head: model.head.clone(),
        train: train.clone(),
        classifier: model.classifier.is_some(),
        vocab: vocab.words().to_vec(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode failed: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back, verifying the container before trusting any of
/// it: magic and version first, then the header, then that the payload is
/// covered exactly once by the declared tensors.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format("file too short for checkpoint header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("declared header overruns the file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format(format!("header decode failed: {e}")))?;
    let payload = &bytes[payload_start..];

    header.encoder.validate()?;
    header.head.validate()?;
    header.train.validate()?;
    let vocab = Vocab::from_words(header.vocab)?;
    if vocab.size() != header.encoder.vocab_size {
        return Err(Error::Corrupt(format!(
            "vocabulary has {} entries but the encoder expects {}",
            vocab.size(),
            header.encoder.vocab_size
        )));
    }

    let mut model =
        SiameseModel::<f32>::new(header.encoder, header.head, header.classifier)?;

    // The declared tensors must be exactly the model's parameters and must
    // tile the payload with no gaps, overlaps, or trailing bytes.
    let mut entries = header.tensors;
    {
        let mut declared: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        declared.sort_unstable();
        declared.dedup();
        if declared.len() != entries.len() {
            return Err(Error::Corrupt("duplicate tensor name in header".into()));
        }
        let mut expected: Vec<String> =
            model.named_params().into_iter().map(|(n, _)| n).collect();
        expected.sort_unstable();
        if declared != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Corrupt(
                "tensor names do not match the declared architecture".into(),
            ));
        }
    }
    entries.sort_by_key(|e| e.offset);
    let mut cursor = 0u64;
    for entry in &entries {
        if entry.offset != cursor {
            return Err(Error::Corrupt(format!(
                "tensor {} at offset {} leaves the payload non-contiguous",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        cursor += 4 * numel as u64;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes but tensors declare {}",
            payload.len(),
            cursor
        )));
    }

    for (name, tensor) in model.named_params_mut() {
        let entry = entries.iter().find(|e| e.name == name).unwrap();
        if entry.shape != tensor.shape() {
            return Err(Error::Corrupt(format!(
                "tensor {} has shape {:?}, expected {:?}",
                name,
                entry.shape,
                tensor.shape()
            )));
        }
        let start = entry.offset as usize;
        for (i, slot) in tensor.data_mut().iter_mut().enumerate() {
            let at = start + 4 * i;
            *slot = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
        }
    }

    Ok(LoadedCheckpoint { model, train: header.train, vocab })
}
