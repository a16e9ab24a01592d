//! Model checkpoint file format and the JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "AICN"
//! version u32      1
//! count   u32      number of tensors
//! tensor* name_len u16, name utf-8, rank u8, dims u32*rank, data f32*numel
//! config  len u32, utf-8 JSON of AicrnConfig
//! ```
//!
//! A `<checkpoint>.meta.json` sidecar records the target name, the
//! normalization statistics the model was trained with, and training metrics,
//! so inference can apply the identical transform.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{AicrnConfig, AicrnModel};
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"AICN";
pub const VERSION: u32 = 1;

// ---- low-level encoding ------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serialize named tensors plus a config blob into checkpoint bytes.
pub(crate) fn encode(tensors: &[(String, Vec<usize>, Vec<f32>)], config_json: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out
}

pub(crate) fn decode(buf: &[u8]) -> Result<(Vec<(String, Vec<usize>, Vec<f32>)>, String)> {
    let mut c = Cursor::new(buf);
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, VERSION
        )));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not valid UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        if rank == 0 || rank > 3 {
            return Err(Error::Checkpoint(format!(
                "tensor {} has rank {}",
                name, rank
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = c.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, dims, data));
    }
    let json_len = c.u32()? as usize;
    let config_json = std::str::from_utf8(c.take(json_len)?)
        .map_err(|_| Error::Checkpoint("config blob is not valid UTF-8".into()))?
        .to_string();
    if !c.done() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after config blob",
            buf.len() - c.pos
        )));
    }
    Ok((tensors, config_json))
}

// ---- model save/load ---------------------------------------------------------

pub fn save_model(model: &AicrnModel<f32>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    model.for_each_state(&mut |name, dims, data| {
        tensors.push((name.to_string(), dims.to_vec(), data.to_vec()));
    });
    let config_json = serde_json::to_string(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {}", e)))?;
    let bytes = encode(&tensors, &config_json);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<AicrnModel<f32>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensors, config_json) = decode(&buf)?;
    let config: AicrnConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Checkpoint(format!("config blob does not parse: {}", e)))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {}", e)))?;

    let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for (name, dims, data) in tensors {
        if by_name.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", name)));
        }
    }

    let mut model = AicrnModel::<f32>::build(config, &mut Rng::new(0))?;
    let mut failure: Option<Error> = None;
    let mut consumed = 0usize;
    model.for_each_state_mut(&mut |name, dims, slot| {
        if failure.is_some() {
            return;
        }
        match by_name.get(name) {
            None => {
                failure = Some(Error::Checkpoint(format!(
                    "tensor {} required by the config is missing",
                    name
                )));
            }
            Some((fdims, fdata)) => {
                if fdims != dims {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor {} shape disagreement: file has {:?}, config implies {:?}",
                        name, fdims, dims
                    )));
                } else {
                    slot.copy_from_slice(fdata);
                    consumed += 1;
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if consumed != by_name.len() {
        let mut expected: Vec<String> = Vec::new();
        model.for_each_state(&mut |name, _, _| expected.push(name.to_string()));
        let extra: Vec<String> = by_name
            .keys()
            .filter(|k| !expected.contains(k))
            .cloned()
            .collect();
        return Err(Error::Checkpoint(format!(
            "file carries tensors the config does not expect: {:?}",
            extra
        )));
    }
    Ok(model)
}

// ---- sidecar -----------------------------------------------------------------

/// Evaluation summary stored in the sidecar and emitted by the eval command.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
}

/// Sidecar metadata written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SidecarMeta {
    pub target: String,
    pub attention: bool,
    /// Per-lead z-score statistics from the training split.
    pub lead_means: Vec<f64>,
    pub lead_stds: Vec<f64>,
    /// Present when the model was trained on z-scored targets.
    pub target_mean: Option<f64>,
    pub target_std: Option<f64>,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
    /// Eval-mode metrics of the restored best model on its training split.
    pub train_metrics: Option<EvalSummary>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn save_sidecar(checkpoint: &Path, meta: &SidecarMeta) -> Result<()> {
    let path = sidecar_path(checkpoint);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Checkpoint(format!("sidecar serialization failed: {}", e)))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_sidecar(checkpoint: &Path) -> Result<SidecarMeta> {
    let path = sidecar_path(checkpoint);
    let json = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("sidecar does not parse: {}", e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::AicrnConfig;

    fn tiny_model(attention: bool) -> AicrnModel<f32> {
        let config = AicrnConfig {
            input_len: 32,
            stem_width: 8,
            stem_kernel: 5,
            block_kernel: 3,
            num_blocks: 1,
            attention,
            ..AicrnConfig::default()
        };
        AicrnModel::build(config, &mut Rng::new(77)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join("aicrn_ckpt_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.aicn");

        let mut model = tiny_model(true);
        // Make running stats non-trivial so they are exercised too.
        let x: Vec<f32> = (0..2 * 8 * 32).map(|i| (i as f32 * 0.01).sin()).collect();
        let mut tape = crate::tensor::Tape::new();
        let xid = tape.leaf(x.clone(), &[2, 8, 32], false).unwrap();
        let _ = model
            .forward_train(&mut tape, xid, &mut Rng::new(3))
            .unwrap();

        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(
            model.predict(&x, 2).unwrap(),
            loaded.predict(&x, 2).unwrap()
        );

        // Saving the loaded model reproduces the same bytes.
        let path2 = dir.join("m2.aicn");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join("aicrn_ckpt_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.aicn");
        let model = tiny_model(false);
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.join("cut.aicn");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        match load_model(&cut) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{}", msg),
            other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let model = tiny_model(false);
        let mut tensors = Vec::new();
        model.for_each_state(&mut |n, d, v| tensors.push((n.to_string(), d.to_vec(), v.to_vec())));
        let json = serde_json::to_string(&model.config).unwrap();

        let mut bytes = encode(&tensors, &json);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));

        let mut bytes2 = encode(&tensors, &json);
        bytes2[4] = 9;
        assert!(matches!(decode(&bytes2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn attention_mismatch_is_a_shape_disagreement() {
        // Tensor section from an attention model, config claiming no
        // attention: the file then carries CBAM tensors the config cannot
        // place.
        let with = tiny_model(true);
        let mut tensors = Vec::new();
        with.for_each_state(&mut |n, d, v| tensors.push((n.to_string(), d.to_vec(), v.to_vec())));
        let mut cfg = with.config.clone();
        cfg.attention = false;
        let json = serde_json::to_string(&cfg).unwrap();
        let bytes = encode(&tensors, &json);
        let dir = std::env::temp_dir().join("aicrn_ckpt_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.aicn");
        std::fs::write(&path, bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("cbam"), "{}", err);

        // And the transpose: config expects attention tensors that are absent.
        let without = tiny_model(false);
        let mut tensors2 = Vec::new();
        without
            .for_each_state(&mut |n, d, v| tensors2.push((n.to_string(), d.to_vec(), v.to_vec())));
        let mut cfg2 = without.config.clone();
        cfg2.attention = true;
        let json2 = serde_json::to_string(&cfg2).unwrap();
        let path2 = dir.join("bad2.aicn");
        std::fs::write(&path2, encode(&tensors2, &json2)).unwrap();
        let err2 = load_model(&path2).unwrap_err();
        assert!(err2.to_string().contains("missing"), "{}", err2);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = std::env::temp_dir().join("aicrn_sidecar");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("hr.aicn");
        let meta = SidecarMeta {
            target: "hr".into(),
            attention: true,
            lead_means: vec![0.0; 8],
            lead_stds: vec![1.0; 8],
            target_mean: None,
            target_std: None,
            split_ratios: [0.8, 0.1, 0.1],
            split_seed: 42,
            best_epoch: 3,
            best_val_mse: 1.5,
            epochs_run: 10,
            train_metrics: Some(EvalSummary {
                n: 8,
                mse: 1.0,
                mae: 0.8,
                rmse: 1.0,
                r2: Some(0.9),
            }),
        };
        save_sidecar(&ckpt, &meta).unwrap();
        let back = load_sidecar(&ckpt).unwrap();
        assert_eq!(back.target, "hr");
        assert_eq!(back.train_metrics, meta.train_metrics);
        assert_eq!(sidecar_path(&ckpt), dir.join("hr.aicn.meta.json"));
    }
}
