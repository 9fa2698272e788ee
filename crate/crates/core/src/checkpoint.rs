//! Self-describing model archives.
//!
//! Layout: a magic line, one line of JSON header (format version, model
//! kind, optional stage tag, config, config hash, tensor index), then all
//! tensor values as little-endian `f64`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &str = "LOOPWATCH-CHECKPOINT";
pub const FORMAT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: String,
    kind: String,
    stage: Option<String>,
    config: serde_json::Value,
    config_hash: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub stage: Option<String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub params: Vec<(String, Tensor<f64>)>,
    pub buffers: Vec<(String, Tensor<f64>)>,
}

/// SHA-256 of a config's canonical JSON form, hex encoded.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let value = serde_json::to_value(config).expect("configs serialize");
    hash_value(&value)
}

fn hash_value(value: &serde_json::Value) -> String {
    // serde_json maps are ordered, so this string is canonical.
    let text = serde_json::to_string(value).expect("json value serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl Archive {
    pub fn new<C: Serialize, T: Scalar>(kind: &str, stage: Option<&str>, config: &C, stores: &[&ParamStore<T>]) -> Self {
        let config = serde_json::to_value(config).expect("configs serialize");
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for store in stores {
            params.extend(store.params().map(|(n, t)| (n.to_string(), t.cast::<f64>())));
            buffers.extend(store.buffers().map(|(n, t)| (n.to_string(), t.cast::<f64>())));
        }
        Archive {
            kind: kind.to_string(),
            stage: stage.map(str::to_string),
            config_hash: hash_value(&config),
            config,
            params,
            buffers,
        }
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::config(format!("checkpoint config: {e}")))
    }

    /// Rejects archives of another model kind.
    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(path, format!("checkpoint holds {:?}, expected {kind:?}", self.kind)));
        }
        Ok(())
    }

    /// Rejects archives whose config differs from `config`.
    pub fn expect_config<C: Serialize>(&self, config: &C) -> Result<()> {
        let want = config_hash(config);
        if want != self.config_hash {
            return Err(Error::config(format!(
                "checkpoint config hash {} does not match expected {want}",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Copies the named tensors into `store`, which must have the same layout.
    pub fn fill<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let pick = |list: &[(String, Tensor<f64>)]| -> Vec<(String, Tensor<T>)> {
            list.iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.cast::<T>()))
                .collect()
        };
        store.load_named(&pick(&self.params), &pick(&self.buffers))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (list, buffer) in [(&self.params, false), (&self.buffers, true)] {
            for (name, t) in list {
                tensors.push(Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    buffer,
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION.to_string(),
            kind: self.kind.clone(),
            stage: self.stage.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            tensors,
        };
        let mut out = Vec::with_capacity(payload.len() + 4096);
        writeln!(out, "{MAGIC}").expect("vec write");
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = BufReader::new(file);
        let bad = |msg: &str| Error::format(path, msg.to_string());
        let mut line = String::new();
        rdr.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if line.trim_end() != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        line.clear();
        rdr.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&line).map_err(|e| bad(&format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        if hash_value(&header.config) != header.config_hash {
            return Err(bad("config hash does not match embedded config"));
        }
        let mut payload = Vec::new();
        rdr.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut chunks = payload.chunks_exact(8);
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let c = chunks.next().ok_or_else(|| bad("truncated tensor payload"))?;
                data.push(f64::from_le_bytes(c.try_into().expect("chunk of 8")));
            }
            let t = Tensor::from_vec(&entry.shape, data)?;
            if entry.buffer {
                buffers.push((entry.name, t));
            } else {
                params.push((entry.name, t));
            }
        }
        if chunks.next().is_some() || !chunks.remainder().is_empty() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Archive {
            kind: header.kind,
            stage: header.stage,
            config: header.config,
            config_hash: header.config_hash,
            params,
            buffers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Cfg {
        a: usize,
        b: f64,
    }

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("net.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 0.1]).unwrap());
        s.add_buffer("net.stat", Tensor::full(&[3], 0.5));
        s
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = Cfg { a: 3, b: 0.25 };
        let s = store();
        let a = Archive::new("toy", Some("stage1"), &cfg, &[&s]);
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.config::<Cfg>().unwrap(), cfg);
        b.expect_config(&cfg).unwrap();
        assert!(b.expect_config(&Cfg { a: 4, b: 0.25 }).is_err());
        let mut s2 = ParamStore::<f32>::new();
        s2.add("net.w", Tensor::zeros(&[2, 2]));
        s2.add_buffer("net.stat", Tensor::zeros(&[3]));
        b.fill(&mut s2, "net.").unwrap();
        assert_eq!(s2.params().next().unwrap().1, s.params().next().unwrap().1);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Archive::new("toy", None, &Cfg { a: 3, b: 0.25 }, &[&store()]).save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("\"a\":3", "\"a\":4", 1);
        fs::write(&path, text.as_bytes()).unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Archive::new("toy", None, &Cfg { a: 3, b: 0.25 }, &[&store()]).save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Format { .. })));
        fs::write(&path, b"garbage\n").unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Format { .. })));
    }
}
