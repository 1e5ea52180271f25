//! Checkpoint container: a directory holding `manifest.json` (metadata and a
//! tensor table) and `tensors.bin` (little-endian `f64`, concatenated in table
//! order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Dense, Mlp, NeuralError, StepNetwork};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dim: usize,
    pub widths: Vec<usize>,
    pub input_norm: bool,
    pub steps: usize,
    pub horizon: f64,
    pub seed: u64,
    /// Hash of the model, payoff and training settings that produced it.
    pub config_hash: String,
    /// Free-form label such as `bsde` or `value-iteration`.
    pub objective: String,
}

/// Trained networks for `k = 1..N-1`; slot 0 and slot `N` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    networks: Vec<Option<StepNetwork>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        let slots = meta.steps + 1;
        Self { meta, networks: vec![None; slots] }
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn set(&mut self, k: usize, net: StepNetwork) {
        assert!(k >= 1 && k < self.meta.steps, "step {k} outside 1..{}", self.meta.steps);
        self.networks[k] = Some(net);
    }

    pub fn get(&self, k: usize) -> Option<&StepNetwork> {
        self.networks.get(k).and_then(|n| n.as_ref())
    }

    /// Number of stored networks.
    pub fn len(&self) -> usize {
        self.networks.iter().filter(|n| n.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complete(&self) -> bool {
        (1..self.meta.steps).all(|k| self.get(k).is_some())
    }

    pub fn save(&self, dir: &Path) -> Result<(), NeuralError> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (k, net) in self.networks.iter().enumerate() {
            let Some(net) = net else { continue };
            for (head, mlp) in [("value", &net.value), ("gradient", &net.gradient)] {
                for (name, shape, data) in mlp_tensors(mlp) {
                    tensors.push(TensorEntry { name: format!("k{k}/{head}/{name}"), shape, offset });
                    offset += data.len();
                    for v in data {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let manifest = Manifest {
            format: "bsde-stopping-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            tensors,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(TENSORS), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NeuralError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported version {}", manifest.version)));
        }
        let bytes = fs::read(dir.join(TENSORS))?;
        if bytes.len() % 8 != 0 {
            return Err(NeuralError::Checkpoint("tensor blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut table = BTreeMap::new();
        for t in &manifest.tensors {
            let len: usize = t.shape.iter().product();
            let data = values
                .get(t.offset..t.offset + len)
                .ok_or_else(|| NeuralError::Checkpoint(format!("tensor {} out of range", t.name)))?;
            table.insert(t.name.clone(), (t.shape.clone(), data));
        }

        let meta = manifest.meta;
        let mut ck = Checkpoint::new(meta.clone());
        for k in 1..meta.steps {
            if !table.keys().any(|n| n.starts_with(&format!("k{k}/"))) {
                continue;
            }
            let mut net = StepNetwork::new(meta.dim, &meta.widths, meta.input_norm);
            for (head, mlp) in [("value", &mut net.value), ("gradient", &mut net.gradient)] {
                fill_mlp(mlp, &format!("k{k}/{head}"), &table)?;
            }
            ck.set(k, net);
        }
        Ok(ck)
    }
}

type Table<'a> = BTreeMap<String, (Vec<usize>, &'a [f64])>;

fn mlp_tensors(mlp: &Mlp) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    if let Some(bn) = &mlp.input_norm {
        push_norm(&mut out, "input_norm", bn);
    }
    for (l, (dense, bn)) in mlp.hidden.iter().enumerate() {
        push_dense(&mut out, &format!("hidden{l}"), dense);
        push_norm(&mut out, &format!("hidden{l}/norm"), bn);
    }
    push_dense(&mut out, "output", &mlp.output);
    out
}

fn push_dense(out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, prefix: &str, d: &Dense) {
    out.push((format!("{prefix}/weight"), vec![d.d_out(), d.d_in()], d.weight.iter().copied().collect()));
    out.push((format!("{prefix}/bias"), vec![d.d_out()], d.bias.to_vec()));
}

fn push_norm(out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, prefix: &str, bn: &BatchNorm) {
    let w = bn.width();
    for (name, v) in [
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
        ("running_mean", &bn.running_mean),
        ("running_var", &bn.running_var),
    ] {
        out.push((format!("{prefix}/{name}"), vec![w], v.to_vec()));
    }
}

fn take<'a>(table: &Table<'a>, name: &str, shape: &[usize]) -> Result<&'a [f64], NeuralError> {
    let (s, data) = table.get(name).ok_or_else(|| NeuralError::Checkpoint(format!("missing tensor {name}")))?;
    if s != shape {
        return Err(NeuralError::Checkpoint(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
    }
    Ok(data)
}

fn fill_dense(d: &mut Dense, prefix: &str, table: &Table) -> Result<(), NeuralError> {
    let (o, i) = (d.d_out(), d.d_in());
    let w = take(table, &format!("{prefix}/weight"), &[o, i])?;
    d.weight = Array2::from_shape_vec((o, i), w.to_vec()).expect("shape checked");
    d.bias = Array1::from(take(table, &format!("{prefix}/bias"), &[o])?.to_vec());
    Ok(())
}

fn fill_norm(bn: &mut BatchNorm, prefix: &str, table: &Table) -> Result<(), NeuralError> {
    let w = bn.width();
    bn.gamma = Array1::from(take(table, &format!("{prefix}/gamma"), &[w])?.to_vec());
    bn.beta = Array1::from(take(table, &format!("{prefix}/beta"), &[w])?.to_vec());
    bn.running_mean = Array1::from(take(table, &format!("{prefix}/running_mean"), &[w])?.to_vec());
    bn.running_var = Array1::from(take(table, &format!("{prefix}/running_var"), &[w])?.to_vec());
    Ok(())
}

fn fill_mlp(mlp: &mut Mlp, prefix: &str, table: &Table) -> Result<(), NeuralError> {
    if let Some(bn) = &mut mlp.input_norm {
        fill_norm(bn, &format!("{prefix}/input_norm"), table)?;
    }
    for (l, (dense, bn)) in mlp.hidden.iter_mut().enumerate() {
        fill_dense(dense, &format!("{prefix}/hidden{l}"), table)?;
        fill_norm(bn, &format!("{prefix}/hidden{l}/norm"), table)?;
    }
    fill_dense(&mut mlp.output, &format!("{prefix}/output"), table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RandomSpec, Stream};

    #[test]
    fn save_load_round_trip() {
        let meta = CheckpointMeta {
            dim: 2,
            widths: vec![6, 6],
            input_norm: true,
            steps: 4,
            horizon: 1.0,
            seed: 9,
            config_hash: "abc".into(),
            objective: "bsde".into(),
        };
        let mut ck = Checkpoint::new(meta);
        for k in 1..4 {
            let mut net = StepNetwork::new(2, &[6, 6], true);
            net.xavier_init(RandomSpec::new(k as u64, Stream::Init));
            net.value.hidden[0].1.running_var[2] = 0.37;
            ck.set(k, net);
        }
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get(2).unwrap().value.hidden[0].1.running_var[2], 0.37);
        assert!(back.is_complete());
    }
}
