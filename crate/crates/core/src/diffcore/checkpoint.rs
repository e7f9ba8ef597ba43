//! Tensor container files. Layout: 8-byte magic `IOSDPARM`, u32 version, then
//! one record per tensor: u32 name length, UTF-8 name, u32 rows, u32 cols,
//! rows*cols little-endian f64 values. Records run to end of file. The f64
//! payload is written bit-for-bit, so save/load round-trips exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::matrix::Matrix;
use super::mlp::{Activation, MlpSpec, ParamGrads, ParamSet};
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 8] = b"IOSDPARM";
pub const PARAM_VERSION: u32 = 1;

pub fn write_tensors_to(w: &mut impl Write, entries: &[(String, &Matrix)]) -> std::io::Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&PARAM_VERSION.to_le_bytes())?;
    for (name, m) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors_from(r: &mut impl Read) -> Result<Vec<(String, Matrix)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::Format(format!("read failed: {e}")))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > buf.len() {
            return Err(Error::Format(format!(
                "truncated tensor file: wanted {} bytes at offset {}, file has {}",
                n,
                at,
                buf.len()
            )));
        }
        let s = &buf[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let magic = take(&mut at, 8)?;
    if magic != PARAM_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected IOSDPARM", magic)));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != PARAM_VERSION {
        return Err(Error::Format(format!("unsupported tensor file version {version}")));
    }
    let mut out = Vec::new();
    while at < buf.len() {
        let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let payload = take(&mut at, rows * cols * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Matrix::new(rows, cols, data)?));
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, entries: &[(String, &Matrix)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors_to(&mut f, entries).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors_from(&mut f)
}

// ---- named-tensor views of ParamSet and AdamState ----

impl ParamSet {
    /// Tensor entries under `prefix`, e.g. `gen.layer0.weight`. Running
    /// batch-norm statistics are included so eval behavior survives reload.
    pub fn tensor_entries<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}layer{i}.weight"), &l.weight));
            out.push((format!("{prefix}layer{i}.bias"), &l.bias));
            if let Some(bn) = &l.bn {
                out.push((format!("{prefix}layer{i}.bn.gamma"), &bn.gamma));
                out.push((format!("{prefix}layer{i}.bn.beta"), &bn.beta));
                out.push((format!("{prefix}layer{i}.bn.running_mean"), &bn.running_mean));
                out.push((format!("{prefix}layer{i}.bn.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn from_tensor_map(
        spec: &MlpSpec,
        map: &BTreeMap<String, Matrix>,
        prefix: &str,
    ) -> Result<ParamSet> {
        spec.validate()?;
        let fetch = |name: String| -> Result<Matrix> {
            map.get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let mut layers = Vec::new();
        for i in 0..spec.num_layers() {
            let weight = fetch(format!("{prefix}layer{i}.weight"))?;
            let bias = fetch(format!("{prefix}layer{i}.bias"))?;
            let bn = if spec.batch_norm[i] {
                Some(super::mlp::BnParams {
                    gamma: fetch(format!("{prefix}layer{i}.bn.gamma"))?,
                    beta: fetch(format!("{prefix}layer{i}.bn.beta"))?,
                    running_mean: fetch(format!("{prefix}layer{i}.bn.running_mean"))?,
                    running_var: fetch(format!("{prefix}layer{i}.bn.running_var"))?,
                })
            } else {
                None
            };
            layers.push(super::mlp::LayerParams { weight, bias, bn });
        }
        let set = ParamSet { layers };
        if !set.matches_spec(spec) {
            return Err(Error::Format(format!("tensors under {prefix} do not fit the spec")));
        }
        Ok(set)
    }
}

impl AdamState {
    /// Serializes moments plus a meta tensor [step_count, lr, beta1, beta2,
    /// eps]. The step count stays exact as long as it fits in f64's integer
    /// range, far beyond any realistic run.
    pub fn tensor_entries(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let meta = Matrix::new(
            1,
            5,
            vec![self.step_count as f64, self.cfg.lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps],
        )
        .unwrap();
        let mut out = vec![(format!("{prefix}meta"), meta)];
        for (i, l) in self.m.layers.iter().enumerate() {
            out.push((format!("{prefix}m.layer{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}m.layer{i}.bias"), l.bias.clone()));
            if let Some(g) = &l.gamma {
                out.push((format!("{prefix}m.layer{i}.gamma"), g.clone()));
            }
            if let Some(b) = &l.beta {
                out.push((format!("{prefix}m.layer{i}.beta"), b.clone()));
            }
        }
        for (i, l) in self.v.layers.iter().enumerate() {
            out.push((format!("{prefix}v.layer{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}v.layer{i}.bias"), l.bias.clone()));
            if let Some(g) = &l.gamma {
                out.push((format!("{prefix}v.layer{i}.gamma"), g.clone()));
            }
            if let Some(b) = &l.beta {
                out.push((format!("{prefix}v.layer{i}.beta"), b.clone()));
            }
        }
        out
    }

    pub fn from_tensor_map(
        params: &ParamSet,
        map: &BTreeMap<String, Matrix>,
        prefix: &str,
    ) -> Result<AdamState> {
        let meta = map
            .get(&format!("{prefix}meta"))
            .ok_or_else(|| Error::Format(format!("missing tensor {prefix}meta")))?;
        if meta.shape() != (1, 5) {
            return Err(Error::Format("adam meta tensor must be 1x5".into()));
        }
        let d = meta.data();
        let cfg = AdamConfig { lr: d[1], beta1: d[2], beta2: d[3], eps: d[4] };
        let load_moments = |tag: &str| -> Result<ParamGrads> {
            let mut g = ParamGrads::zeros_like(params);
            for (i, l) in g.layers.iter_mut().enumerate() {
                let fetch = |name: String| -> Result<Matrix> {
                    map.get(&name)
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
                };
                l.weight = fetch(format!("{prefix}{tag}.layer{i}.weight"))?;
                l.bias = fetch(format!("{prefix}{tag}.layer{i}.bias"))?;
                if l.gamma.is_some() {
                    l.gamma = Some(fetch(format!("{prefix}{tag}.layer{i}.gamma"))?);
                    l.beta = Some(fetch(format!("{prefix}{tag}.layer{i}.beta"))?);
                }
            }
            Ok(g)
        };
        Ok(AdamState { cfg, step_count: d[0] as u64, m: load_moments("m")?, v: load_moments("v")? })
    }
}

impl MlpSpec {
    /// Encodes the architecture itself as tensors so a checkpoint file can be
    /// reopened without outside knowledge: `{prefix}spec.dims` (layer widths),
    /// `{prefix}spec.bn` (0/1 per layer), `{prefix}spec.act` ([kind, slope,
    /// activate_output] where kind 0 = linear, 1 = leaky relu).
    pub fn tensor_entries(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let dims: Vec<f64> = self.layer_dims.iter().map(|&d| d as f64).collect();
        let bn: Vec<f64> = self.batch_norm.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let act = match self.activation {
            Activation::Linear => vec![0.0, 0.0, if self.activate_output { 1.0 } else { 0.0 }],
            Activation::LeakyRelu(s) => vec![1.0, s, if self.activate_output { 1.0 } else { 0.0 }],
        };
        vec![
            (format!("{prefix}spec.dims"), Matrix::new(1, dims.len(), dims).unwrap()),
            (format!("{prefix}spec.bn"), Matrix::new(1, bn.len(), bn).unwrap()),
            (format!("{prefix}spec.act"), Matrix::new(1, 3, act).unwrap()),
        ]
    }

    pub fn from_tensor_map(map: &BTreeMap<String, Matrix>, prefix: &str) -> Result<MlpSpec> {
        let fetch = |name: String| -> Result<&Matrix> {
            map.get(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let dims = fetch(format!("{prefix}spec.dims"))?;
        let bn = fetch(format!("{prefix}spec.bn"))?;
        let act = fetch(format!("{prefix}spec.act"))?;
        if act.shape() != (1, 3) {
            return Err(Error::Format(format!("{prefix}spec.act must be 1x3")));
        }
        let layer_dims: Vec<usize> = dims.data().iter().map(|&v| v as usize).collect();
        let batch_norm: Vec<bool> = bn.data().iter().map(|&v| v != 0.0).collect();
        let a = act.data();
        let activation = match a[0] as i64 {
            0 => Activation::Linear,
            1 => Activation::LeakyRelu(a[1]),
            k => return Err(Error::Format(format!("unknown activation kind {k}"))),
        };
        let spec =
            MlpSpec { layer_dims, activation, batch_norm, activate_output: a[2] != 0.0 };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn tensor_map(entries: Vec<(String, Matrix)>) -> BTreeMap<String, Matrix> {
    entries.into_iter().collect()
}
