//! Binary tensor containers and JSON sidecars.
//!
//! All binary values are little-endian 32-bit.
//!
//! Voxel grid file: `X Y Z` (u32), `voxel_size` (f32), `origin` (3 × f32),
//! `C` (u32), then `X·Y·Z·C` f32 values with `x` slowest, then `y`, then
//! `z`, then the channel. Label grids use `C = 1` with the class index,
//! [`EMPTY_CODE`] or [`UNKNOWN_CODE`] per voxel.
//!
//! Named tensor file: tensor count (u32), then per tensor: name length
//! (u32), UTF-8 name, rank (u32), dims (rank × u32), f32 payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Label;
use crate::splatter::{LabelGrid, SemanticVoxelGrid, VoxelGridSpec};

pub const EMPTY_CODE: f32 = -1.0;
pub const UNKNOWN_CODE: f32 = -2.0;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated input: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("payload too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn encode_header(out: &mut Vec<u8>, spec: &VoxelGridSpec, channels: usize) -> Result<()> {
    for d in spec.dims {
        put_u32(out, d)?;
    }
    put_f32(out, spec.voxel_size);
    for o in spec.origin {
        put_f32(out, o);
    }
    put_u32(out, channels)
}

fn decode_header(r: &mut Reader<'_>) -> Result<(VoxelGridSpec, usize)> {
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let voxel_size = r.f32()? as f64;
    let origin = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
    let c = r.u32()?;
    Ok((VoxelGridSpec::new(origin, voxel_size, dims)?, c))
}

pub fn encode_semantic_grid(grid: &SemanticVoxelGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + grid.values().len() * 4);
    encode_header(&mut out, &grid.spec, grid.num_classes())?;
    for v in grid.values() {
        put_f32(&mut out, *v);
    }
    Ok(out)
}

pub fn decode_semantic_grid(bytes: &[u8]) -> Result<SemanticVoxelGrid> {
    let mut r = Reader::new(bytes);
    let (spec, c) = decode_header(&mut r)?;
    let values = r.f32s(spec.num_voxels() * c)?;
    r.finish()?;
    SemanticVoxelGrid::from_values(spec, c, values)
}

fn label_code(l: Label) -> f32 {
    match l {
        Label::Class(k) => k as f32,
        Label::Empty => EMPTY_CODE,
        Label::Unknown => UNKNOWN_CODE,
    }
}

pub fn encode_label_grid(grid: &LabelGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + grid.labels.len() * 4);
    encode_header(&mut out, &grid.spec, 1)?;
    for l in &grid.labels {
        out.extend_from_slice(&label_code(*l).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_label_grid(bytes: &[u8]) -> Result<LabelGrid> {
    let mut r = Reader::new(bytes);
    let (spec, c) = decode_header(&mut r)?;
    if c != 1 {
        return Err(Error::Format(format!("label grids have one channel, found {c}")));
    }
    let labels = r
        .f32s(spec.num_voxels())?
        .into_iter()
        .map(|v| match v as f32 {
            EMPTY_CODE => Ok(Label::Empty),
            UNKNOWN_CODE => Ok(Label::Unknown),
            k if k >= 0.0 && k.fract() == 0.0 && k <= u16::MAX as f32 => Ok(Label::Class(k as u16)),
            k => Err(Error::Format(format!("invalid label code {k}"))),
        })
        .collect::<Result<_>>()?;
    r.finish()?;
    Ok(LabelGrid { spec, labels })
}

/// JSON metadata written next to every grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub kind: GridKind,
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub channels: usize,
    pub layout: String,
    pub dtype: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Semantic,
    Labels,
}

impl GridSidecar {
    fn new(kind: GridKind, spec: &VoxelGridSpec, channels: usize) -> Self {
        Self {
            kind,
            dims: spec.dims,
            voxel_size: spec.voxel_size,
            origin: spec.origin,
            channels,
            layout: "x-major, then y, then z, channels innermost; 32-byte header".into(),
            dtype: "float32-le".into(),
        }
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes `path` plus a `<path>.json` sidecar.
pub fn save_semantic_grid(grid: &SemanticVoxelGrid, path: &Path) -> Result<()> {
    fs::write(path, encode_semantic_grid(grid)?)?;
    let meta = GridSidecar::new(GridKind::Semantic, &grid.spec, grid.num_classes());
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_semantic_grid(path: &Path) -> Result<SemanticVoxelGrid> {
    decode_semantic_grid(&fs::read(path)?)
}

pub fn save_label_grid(grid: &LabelGrid, path: &Path) -> Result<()> {
    fs::write(path, encode_label_grid(grid)?)?;
    let meta = GridSidecar::new(GridKind::Labels, &grid.spec, 1);
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_label_grid(path: &Path) -> Result<LabelGrid> {
    decode_label_grid(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered set of named tensors (weights, feature maps).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: Vec<NamedTensor>,
}

impl TensorStore {
    /// Replaces any tensor already stored under `name`.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        let t = NamedTensor { name, shape, data };
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len())?;
            for d in &t.shape {
                put_u32(&mut out, *d)?;
            }
            for v in &t.data {
                put_f32(&mut out, *v);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let n = r.u32()?;
        let mut store = Self::default();
        for _ in 0..n {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_owned();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let count = count.ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let data = r.f32s(count)?;
            store.tensors.push(NamedTensor { name, shape, data });
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}
