//! Named parameter traversal shared by the optimiser, checkpoints and
//! gradient accumulation.
//!
//! Every model struct doubles as its own gradient container: a gradient is a
//! zeroed clone of the model, filled by the backward passes.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: &'a mut [f64],
}

pub trait Module {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>);

    fn named_params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|p| p.data.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_vec<'a>(
    out: &mut Vec<ParamView<'a>>,
    prefix: &str,
    name: &str,
    a: &'a Array1<f64>,
    trainable: bool,
) {
    out.push(ParamView {
        name: join(prefix, name),
        shape: vec![a.len()],
        trainable,
        data: a.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_mat<'a>(
    out: &mut Vec<ParamView<'a>>,
    prefix: &str,
    name: &str,
    a: &'a Array2<f64>,
    trainable: bool,
) {
    out.push(ParamView {
        name: join(prefix, name),
        shape: a.shape().to_vec(),
        trainable,
        data: a.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_vec_mut<'a>(
    out: &mut Vec<ParamViewMut<'a>>,
    prefix: &str,
    name: &str,
    a: &'a mut Array1<f64>,
    trainable: bool,
) {
    let shape = vec![a.len()];
    out.push(ParamViewMut {
        name: join(prefix, name),
        shape,
        trainable,
        data: a.as_slice_mut().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_mat_mut<'a>(
    out: &mut Vec<ParamViewMut<'a>>,
    prefix: &str,
    name: &str,
    a: &'a mut Array2<f64>,
    trainable: bool,
) {
    let shape = a.shape().to_vec();
    out.push(ParamViewMut {
        name: join(prefix, name),
        shape,
        trainable,
        data: a.as_slice_mut().expect("parameters are contiguous"),
    });
}

/// Clone of `m` with every trainable tensor set to zero.
pub fn zeros_like<M: Module + Clone>(m: &M) -> M {
    let mut g = m.clone();
    for p in g.named_params_mut() {
        p.data.fill(0.0);
    }
    g
}

/// `dst += src` over trainable tensors. Both must share one architecture.
pub fn accumulate<M: Module>(dst: &mut M, src: &M) {
    let src = src.named_params();
    for (d, s) in dst.named_params_mut().into_iter().zip(src) {
        debug_assert_eq!(d.name, s.name);
        if d.trainable {
            for (a, b) in d.data.iter_mut().zip(s.data) {
                *a += b;
            }
        }
    }
}

/// Hex SHA-256 prefix over names, shapes and little-endian values.
pub fn fingerprint<M: Module>(m: &M) -> String {
    let mut hasher = Sha256::new();
    for p in m.named_params() {
        hasher.update(p.name.as_bytes());
        for s in &p.shape {
            hasher.update((*s as u64).to_le_bytes());
        }
        for v in p.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(&hasher.finalize()[..8])
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub type TensorMap = BTreeMap<String, StoredTensor>;

pub fn export_tensors<M: Module>(m: &M) -> TensorMap {
    m.named_params()
        .into_iter()
        .map(|p| {
            (
                p.name,
                StoredTensor {
                    shape: p.shape,
                    data: p.data.to_vec(),
                },
            )
        })
        .collect()
}

/// Copies `tensors` into `m`. With `require_all`, every tensor of `m` must be
/// present; tensors with unknown names are always rejected. Shapes must match.
pub fn import_tensors<M: Module>(
    m: &mut M,
    tensors: &TensorMap,
    prefix: &str,
    require_all: bool,
) -> Result<()> {
    let mut seen = 0usize;
    for p in m.named_params_mut() {
        if !p.name.starts_with(prefix) {
            continue;
        }
        match tensors.get(&p.name) {
            Some(t) => {
                if t.shape != p.shape || t.data.len() != p.data.len() {
                    return Err(Error::shape(
                        format!("tensor {}", p.name),
                        format!("{:?}", p.shape),
                        format!("{:?}", t.shape),
                    ));
                }
                p.data.copy_from_slice(&t.data);
                seen += 1;
            }
            None if require_all => {
                return Err(Error::InvalidConfig(format!("missing tensor {}", p.name)));
            }
            None => {}
        }
    }
    let relevant = tensors.keys().filter(|k| k.starts_with(prefix)).count();
    if seen != relevant {
        let known: Vec<String> = m.named_params().into_iter().map(|p| p.name).collect();
        let unknown = tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .find(|k| !known.contains(k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::InvalidConfig(format!("unknown tensor {unknown}")));
    }
    Ok(())
}
