use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EmbeddingMatrix, EmbeddingProvider};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ALIGNMENT_RULE: &str = "last_subtoken";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSentence {
    pub id: String,
    pub n_words: usize,
    pub words: Vec<String>,
    pub stem: String,
}

/// `manifest.json` of an embedding store. Each (sentence, layer) pair lives in
/// `<stem>.l<layer>.f32`: row-major little-endian float32, `n_words × dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub model_tag: String,
    pub dim: usize,
    pub layers: Vec<usize>,
    pub alignment: String,
    pub dtype: String,
    pub sentences: Vec<StoreSentence>,
}

fn blob_name(stem: &str, layer: usize) -> String {
    format!("{stem}.l{layer}.f32")
}

pub(crate) fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "float32 blob has {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Incrementally writes an embedding store.
pub struct StoreWriter {
    dir: PathBuf,
    manifest: StoreManifest,
    index: HashMap<String, usize>,
}

impl StoreWriter {
    pub fn create(
        dir: impl AsRef<Path>,
        model_tag: &str,
        dim: usize,
        layers: Vec<usize>,
    ) -> Result<StoreWriter> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(StoreWriter {
            dir,
            manifest: StoreManifest {
                format_version: 1,
                model_tag: model_tag.to_string(),
                dim,
                layers,
                alignment: ALIGNMENT_RULE.to_string(),
                dtype: "float32_le".to_string(),
                sentences: Vec::new(),
            },
            index: HashMap::new(),
        })
    }

    pub fn put(&mut self, words: &[String], matrix: &EmbeddingMatrix) -> Result<()> {
        if matrix.dim() != self.manifest.dim {
            return Err(Error::DimMismatch {
                expected: self.manifest.dim,
                found: matrix.dim(),
            });
        }
        if matrix.n_words() != words.len() {
            return Err(Error::DimMismatch {
                expected: words.len(),
                found: matrix.n_words(),
            });
        }
        if !self.manifest.layers.contains(&matrix.layer) {
            return Err(Error::UnknownLayer {
                layer: matrix.layer,
                available: self.manifest.layers.clone(),
            });
        }
        let slot = match self.index.get(&matrix.sentence_id) {
            Some(&slot) => slot,
            None => {
                let slot = self.manifest.sentences.len();
                self.manifest.sentences.push(StoreSentence {
                    id: matrix.sentence_id.clone(),
                    n_words: words.len(),
                    words: words.to_vec(),
                    stem: format!("s{slot:06}"),
                });
                self.index.insert(matrix.sentence_id.clone(), slot);
                slot
            }
        };
        let entry = &self.manifest.sentences[slot];
        if entry.words != words {
            return Err(Error::InvalidInput(format!(
                "sentence `{}` stored with different words",
                entry.id
            )));
        }
        let path = self.dir.join(blob_name(&entry.stem, matrix.layer));
        fs::write(path, f32_bytes(matrix.vectors().iter().copied()))?;
        Ok(())
    }

    pub fn finish(self) -> Result<StoreManifest> {
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        fs::write(self.dir.join(MANIFEST_FILE), json)?;
        Ok(self.manifest)
    }
}

/// Read-only embedding store on disk.
pub struct EmbeddingStore {
    dir: PathBuf,
    manifest: StoreManifest,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<EmbeddingStore> {
        let dir = dir.as_ref().to_path_buf();
        let manifest: StoreManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.dtype != "float32_le" {
            return Err(Error::Schema(format!(
                "unsupported store dtype `{}`",
                manifest.dtype
            )));
        }
        let index = manifest
            .sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Ok(EmbeddingStore {
            dir,
            manifest,
            index,
        })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn sentence(&self, id: &str) -> Option<&StoreSentence> {
        self.index.get(id).map(|&i| &self.manifest.sentences[i])
    }

    pub fn get(&self, id: &str, layer: usize) -> Result<EmbeddingMatrix> {
        self.check_layer(layer)?;
        let entry = self.sentence(id).ok_or_else(|| Error::MissingEmbedding {
            id: id.to_string(),
            layer,
        })?;
        let path = self.dir.join(blob_name(&entry.stem, layer));
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingEmbedding {
                id: id.to_string(),
                layer,
            },
            _ => Error::Io(e),
        })?;
        let values = read_f32s(&bytes)?;
        let vectors = Array2::from_shape_vec((entry.n_words, self.manifest.dim), values)
            .map_err(|_| {
                Error::Schema(format!(
                    "{} does not hold {} × {} floats",
                    path.display(),
                    entry.n_words,
                    self.manifest.dim
                ))
            })?;
        EmbeddingMatrix::new(id, layer, self.manifest.model_tag.clone(), vectors)
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn model_tag(&self) -> &str {
        &self.manifest.model_tag
    }

    fn layers(&self) -> Vec<usize> {
        self.manifest.layers.clone()
    }

    fn hidden_states(&self, id: &str, words: &[String], layer: usize) -> Result<EmbeddingMatrix> {
        let matrix = self.get(id, layer)?;
        if !words.is_empty() && matrix.n_words() != words.len() {
            return Err(Error::DimMismatch {
                expected: words.len(),
                found: matrix.n_words(),
            });
        }
        Ok(matrix)
    }
}
