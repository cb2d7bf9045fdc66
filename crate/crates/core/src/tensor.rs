//! Dense row-major tensors and the flat binary checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Storage precision of a run. Values are always held as `f64`; in `F32` mode
/// every forward result is rounded through `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    pub fn tag(self) -> u32 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F64 => x,
            DType::F32 => x as f32 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input; intended for
    /// literals in tests and presets.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access. Only the optimizer and the weight projection write
    /// through this; everything else treats tensors as immutable values.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols) of a rank-2 tensor; rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Plain matrix product, outside any graph.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 || self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        crate::kernels::gemm(
            m,
            k,
            n,
            1.0,
            crate::kernels::Mat::row_major(&self.data, k),
            crate::kernels::Mat::row_major(&other.data, n),
            0.0,
            &mut out,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// max |a - b| / max(max |b|, tiny)
    pub fn rel_diff(&self, other: &Tensor) -> f64 {
        let scale = other.data.iter().map(|x| x.abs()).fold(0.0, f64::max);
        self.max_abs_diff(other) / scale.max(1e-300)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

const MAGIC: &[u8; 4] = b"SLMF";
const FORMAT_VERSION: u32 = 1;

/// Write one tensor: magic, version, rank, dims (u64 each), dtype tag, then
/// the little-endian payload in the requested precision.
pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&dtype.tag().to_le_bytes());
    match dtype {
        DType::F64 => t.data().iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|x| buf.extend_from_slice(&(*x as f32).to_le_bytes())),
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, DType)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    let dtype = DType::from_tag(cur.u32()?)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(match dtype {
            DType::F64 => f64::from_le_bytes(cur.take(8)?.try_into().unwrap()),
            DType::F32 => f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Index manifest mapping parameter names to tensor files (relative paths).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub dtype: DType,
    pub tensors: BTreeMap<String, String>,
}

/// Write every named tensor to `dir/<name>.slmf` plus `dir/index.json`.
pub fn save_checkpoint<'a>(
    dir: &Path,
    named: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: DType,
) -> Result<CheckpointIndex> {
    fs::create_dir_all(dir)?;
    let mut index = CheckpointIndex {
        dtype,
        tensors: BTreeMap::new(),
    };
    for (name, t) in named {
        let file = format!("{}.slmf", name.replace('/', "."));
        write_tensor(&dir.join(&file), t, dtype)?;
        index.tensors.insert(name.to_string(), file);
    }
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn load_checkpoint(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let index: CheckpointIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    index
        .tensors
        .iter()
        .map(|(name, file)| Ok((name.clone(), read_tensor(&dir.join(file))?.0)))
        .collect()
}
