//! Model records, the flattened weight vector, and the `MZW1` container.
//!
//! Flatten order is fixed: layers in declared order, within a layer the
//! weight matrix (row-major, `out × in`) and then the bias. Biases are part
//! of the carrier.
//!
//! `MZW1` layout:
//!
//! ```text
//! b"MZW1" | u32 LE header length | UTF-8 JSON header | f32 LE tensor data in header order
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitview::{Bits, Float32Word};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MZW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// Only valid on the output layer.
    Softmax,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "linear" => Activation::Identity,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "softmax" => Activation::Softmax,
            other => return Err(Error::Argument(format!("unknown activation {other:?}"))),
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        })
    }
}

/// Layer widths `L0 … Lk` and one activation per non-input layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Arch {
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let arch = Arch { sizes, activations };
        arch.validate()?;
        Ok(arch)
    }

    /// Hidden layers use `hidden`, the output layer uses `output`.
    pub fn uniform(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let n = sizes.len().saturating_sub(1);
        let activations = (0..n).map(|i| if i + 1 == n { output } else { hidden }).collect();
        Arch::new(sizes, activations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::Shape("architecture needs at least an input and an output layer".into()));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Shape(format!("zero-width layer in {:?}", self.sizes)));
        }
        if self.activations.len() != self.sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.sizes.len() - 1
            )));
        }
        if let Some(pos) = self.activations.iter().position(|&a| a == Activation::Softmax) {
            if pos + 1 != self.activations.len() {
                return Err(Error::Shape("softmax is only allowed on the output layer".into()));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("validated arch")
    }

    /// `(out, in)` for each layer.
    pub fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sizes.windows(2).map(|w| (w[1], w[0]))
    }

    /// Total parameter count `n_W`.
    pub fn param_count(&self) -> usize {
        self.layer_dims().map(|(o, i)| o * i + o).sum()
    }

    /// Expected tensors in flatten order: `(name, shape)`.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_dims()
            .enumerate()
            .flat_map(|(l, (o, i))| {
                [(format!("l{l}.weight"), vec![o, i]), (format!("l{l}.bias"), vec![o])]
            })
            .collect()
    }
}

/// Parses `2-8-8-2` (tanh hidden, softmax output) or
/// `2-8-8-2:relu,relu,identity` with explicit activations.
impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (sizes_part, acts_part) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let sizes = sizes_part
            .split('-')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Argument(format!("invalid layer size {t:?} in arch {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match acts_part {
            Some(a) => {
                let acts = a.split(',').map(|t| t.trim().parse()).collect::<Result<Vec<_>>>()?;
                Arch::new(sizes, acts)
            }
            None => Arch::uniform(sizes, Activation::Tanh, Activation::Softmax),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.sizes.iter().map(ToString::to_string).collect();
        let acts: Vec<String> = self.activations.iter().map(ToString::to_string).collect();
        write!(f, "{}:{}", sizes.join("-"), acts.join(","))
    }
}

#[derive(Clone, Debug)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { name, shape, data })
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The flattened parameter vector `W` of length `n_W`.
#[derive(Clone, Debug)]
pub struct WeightVector(pub Vec<f32>);

impl WeightVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn words(&self) -> impl Iterator<Item = Float32Word> + '_ {
        self.0.iter().map(|&v| Float32Word::from_f32(v))
    }

    pub fn bit_eq(&self, other: &WeightVector) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug)]
pub struct ModelRecord {
    arch: Arch,
    tensors: Vec<Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl ModelRecord {
    pub fn new(arch: Arch, tensors: Vec<Tensor>, meta: BTreeMap<String, String>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.tensor_layout();
        if tensors.len() != layout.len() {
            return Err(Error::Shape(format!(
                "architecture {arch} expects {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (t, (name, shape)) in tensors.iter().zip(&layout) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Shape(format!(
                    "expected tensor {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {name} has wrong element count")));
            }
        }
        Ok(ModelRecord { arch, tensors, meta })
    }

    /// Rebuilds tensors from a flat vector laid out in flatten order.
    pub fn unflatten(arch: Arch, w: &WeightVector, meta: BTreeMap<String, String>) -> Result<Self> {
        arch.validate()?;
        if w.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "weight vector of length {} does not match n_W = {} of {arch}",
                w.len(),
                arch.param_count()
            )));
        }
        let mut offset = 0;
        let tensors = arch
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = w.0[offset..offset + n].to_vec();
                offset += n;
                Tensor { name, shape, data }
            })
            .collect();
        ModelRecord::new(arch, tensors, meta)
    }

    pub fn flatten(&self) -> WeightVector {
        WeightVector(self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect())
    }

    /// Same architecture and meta, new weights.
    pub fn with_weights(&self, w: &WeightVector) -> Result<Self> {
        ModelRecord::unflatten(self.arch.clone(), w, self.meta.clone())
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn n_weights(&self) -> usize {
        self.arch.param_count()
    }

    pub fn id(&self) -> Option<&str> {
        self.meta.get("id").map(String::as_str)
    }

    /// Equality of architecture, meta and every tensor bit pattern.
    pub fn bit_eq(&self, other: &ModelRecord) -> bool {
        self.arch == other.arch
            && self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FileHeader {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone(), dtype: "f32".into() })
                .collect(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let n: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fmt_err(0, "bad magic, expected MZW1".into()));
        }
        if bytes.len() < 8 {
            return Err(fmt_err(4, "truncated header length".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fmt_err(8, format!("header of {header_len} bytes runs past end of file")))?;
        let header: FileHeader = serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| fmt_err(8, format!("invalid header: {e}")))?;
        let mut offset = data_start;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if entry.dtype != "f32" {
                return Err(fmt_err(8, format!("tensor {} has unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(fmt_err(
                    bytes.len(),
                    format!("truncated data in tensor {}: need {} bytes from offset {offset}", entry.name, 4 * n),
                ));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push(Tensor { name: entry.name, shape: entry.shape, data });
            offset = end;
        }
        if offset != bytes.len() {
            return Err(fmt_err(offset, format!("{} trailing bytes", bytes.len() - offset)));
        }
        ModelRecord::new(header.arch, tensors, header.meta)
            .map_err(|e| fmt_err(8, format!("header inconsistent with data: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelRecord::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    arch: Arch,
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

/// The `n_W × 32` binary expansion of a weight vector. Column 0 is `b32`,
/// column 31 is `b1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: Vec<Float32Word>,
}

impl BitMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        32
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(col < 32);
        self.rows[row].bit(32 - col as u32)
    }

    pub fn row(&self, i: usize) -> Float32Word {
        self.rows[i]
    }

    pub fn row_bits(&self, i: usize) -> Bits {
        self.rows[i].to_bits()
    }

    pub fn rows(&self) -> &[Float32Word] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Float32Word] {
        &mut self.rows
    }
}

pub fn to_bitmatrix(w: &WeightVector) -> BitMatrix {
    BitMatrix { rows: w.words().collect() }
}

pub fn from_bitmatrix(m: &BitMatrix) -> WeightVector {
    WeightVector(m.rows.iter().map(|w| w.to_f32()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> ModelRecord {
        let arch = Arch::new(vec![2, 2], vec![Activation::Identity]).unwrap();
        ModelRecord::new(
            arch,
            vec![
                Tensor::new("l0.weight", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                Tensor::new("l0.bias", vec![2], vec![5.0, 6.0]).unwrap(),
            ],
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn flatten_is_row_major_weight_then_bias() {
        assert_eq!(two_by_two().flatten().0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn missing_bias_is_a_shape_error() {
        let arch = Arch::new(vec![2, 2], vec![Activation::Identity]).unwrap();
        let r = ModelRecord::new(
            arch,
            vec![Tensor::new("l0.weight", vec![2, 2], vec![1.0; 4]).unwrap()],
            BTreeMap::new(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn arch_parsing() {
        let a: Arch = "2-8-8-2".parse().unwrap();
        assert_eq!(a.sizes, vec![2, 8, 8, 2]);
        assert_eq!(a.activations, vec![Activation::Tanh, Activation::Tanh, Activation::Softmax]);
        assert_eq!(a.param_count(), 114);
        let b: Arch = "3-4:relu".parse().unwrap();
        assert_eq!(b.activations, vec![Activation::Relu]);
        assert_eq!(a.to_string().parse::<Arch>().unwrap(), a);
        for bad in ["2", "2-x-2", "2-0-2", "2-8-2:tanh", "2-8-2:softmax,tanh", ""] {
            assert!(bad.parse::<Arch>().is_err(), "{bad}");
        }
    }

    #[test]
    fn bitmatrix_of_one() {
        let m = to_bitmatrix(&WeightVector(vec![1.0]));
        assert_eq!((m.nrows(), m.ncols()), (1, 32));
        assert_eq!(m.row(0), Float32Word(0x3F80_0000));
        assert!(!m.get(0, 0));
        assert!(!m.get(0, 1));
        assert!(m.get(0, 2));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = two_by_two().to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(ModelRecord::from_bytes(&wrong), Err(Error::Format { offset: 0, .. })));

        let cut = &bytes[..bytes.len() - 6];
        match ModelRecord::from_bytes(cut) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("l0.bias"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(ModelRecord::from_bytes(&bytes[..6]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelRecord::from_bytes(&extra).is_err());
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let arch = two_by_two().arch().clone();
        assert!(ModelRecord::unflatten(arch, &WeightVector(vec![0.0; 5]), BTreeMap::new()).is_err());
    }
}
