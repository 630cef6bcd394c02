//! Model persistence: a versioned JSON file holding the label set, the
//! vocabulary, decoding flags and all 22 parameter tensors by name.
//!
//! Values are written with shortest-round-trip float formatting, so
//! save → load → save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{ModelParams, SLOT_NAMES};
use crate::tagger::Tagger;

const FORMAT_MARKER: &str = "seqtag-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    embed_dim: usize,
    hidden_dim: usize,
    min_count: usize,
    hard_bio_constraints: bool,
    tanh_projection: bool,
    labels: Vec<String>,
    /// Non-reserved vocabulary characters in id order.
    vocab: String,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Serializes a tagger to the model JSON text.
pub fn to_json(tagger: &Tagger) -> Result<String> {
    let params = tagger.params();
    let tensors = SLOT_NAMES
        .iter()
        .zip(params.slot_shapes())
        .zip(params.flat())
        .map(|((name, shape), values)| Tensor {
            name: (*name).to_owned(),
            shape,
            values: values.to_vec(),
        })
        .collect();
    let file = ModelFile {
        format: FORMAT_MARKER.to_owned(),
        version: FORMAT_VERSION,
        embed_dim: params.embed_dim(),
        hidden_dim: params.hidden_dim(),
        min_count: tagger.vocab().min_count(),
        hard_bio_constraints: tagger.hard_bio(),
        tanh_projection: tagger.tanh_projection(),
        labels: tagger.label_set().labels().to_vec(),
        vocab: tagger.vocab().chars().iter().collect(),
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::ModelFormat(format!("serialization failed: {e}")))?;
    json.push('\n');
    Ok(json)
}

/// Parses and fully validates model JSON text.
pub fn from_json(text: &str) -> Result<Tagger> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
    if file.format != FORMAT_MARKER {
        return Err(Error::ModelFormat(format!(
            "not a model file: format marker {:?}",
            file.format
        )));
    }
    if file.version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model version {} (expected {FORMAT_VERSION})",
            file.version
        )));
    }
    if file.embed_dim == 0 || file.hidden_dim == 0 {
        return Err(Error::ModelFormat(
            "model dimensions must be positive".into(),
        ));
    }
    let label_set =
        LabelSet::new(file.labels).map_err(|e| Error::ModelFormat(format!("label set: {e}")))?;
    let vocab = Vocabulary::from_chars(file.vocab.chars().collect(), file.min_count)?;

    let mut params = ModelParams::zeros(
        vocab.len(),
        file.embed_dim,
        file.hidden_dim,
        label_set.len(),
    );
    let shapes = params.slot_shapes();
    if file.tensors.len() != SLOT_NAMES.len() {
        return Err(Error::ModelFormat(format!(
            "expected {} tensors, got {}",
            SLOT_NAMES.len(),
            file.tensors.len()
        )));
    }
    for (i, t) in file.tensors.iter().enumerate() {
        if t.name != SLOT_NAMES[i] {
            return Err(Error::ModelFormat(format!(
                "tensor {i}: expected {:?}, got {:?}",
                SLOT_NAMES[i], t.name
            )));
        }
        if t.shape != shapes[i] {
            return Err(Error::ModelFormat(format!(
                "tensor {:?}: expected shape {:?}, got {:?}",
                t.name, shapes[i], t.shape
            )));
        }
        if t.values.len() != shapes[i].iter().product::<usize>() {
            return Err(Error::ModelFormat(format!(
                "tensor {:?}: shape {:?} needs {} values, got {}",
                t.name,
                t.shape,
                shapes[i].iter().product::<usize>(),
                t.values.len()
            )));
        }
    }
    for (slot, t) in params.flat_mut().into_iter().zip(&file.tensors) {
        slot.copy_from_slice(&t.values);
    }
    Tagger::new(
        params,
        vocab,
        label_set,
        file.hard_bio_constraints,
        file.tanh_projection,
    )
}

/// Writes a tagger to `path` as model JSON.
pub fn save(tagger: &Tagger, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(tagger)?)?;
    Ok(())
}

/// Reads a tagger from a model JSON file.
pub fn load(path: impl AsRef<Path>) -> Result<Tagger> {
    from_json(&fs::read_to_string(path)?)
}
