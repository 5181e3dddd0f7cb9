//! Bit-exact binary codecs for volumes (`RVOL`), spatial transforms (`RTFM`)
//! and checkpoints (`CAGC`). All integers and floats are little-endian.
//!
//! Layouts:
//! - `RVOL`: magic "RVOL", u32 version=1, u32 D,H,W, f32 spacing_mm, then
//!   D*H*W f32 voxels in z-major (z slowest) order.
//! - `RTFM`: magic "RTFM", u32 version=1, 12 f32 affine (row-major 3x3 then
//!   translation), u8 has_displacement, then optional u32 grid dims (z,y,x)
//!   plus grid f32 vectors ((dx,dy,dz) per node, z-major). Files always store
//!   the subject -> atlas direction; the displacement grid spans the extent of
//!   the subject volume it is paired with, which the reader supplies.
//! - `CAGC` checkpoints: magic "CAGC", u32 version=1, u32 tensor count, then
//!   per tensor: u16 name length, UTF-8 name, u8 rank, u64 dims, f32 data.
//!   Tensors are written sorted by name so equal states are equal bytes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transform::{DisplacementField, SpatialTransform};
use crate::volume::Volume;

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const RTFM_MAGIC: &[u8; 4] = b"RTFM";
pub const CKPT_MAGIC: &[u8; 4] = b"CAGC";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated file: wanted {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!(
                "{what}: {} trailing bytes after offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }

    fn magic(&mut self, expect: &[u8; 4], what: &str) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::format(format!("{what}: bad magic {got:02x?}")));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("{what}: unsupported version {version}")));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub mod rvol {
    use super::*;

    pub fn encode(v: &Volume) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + v.voxels.len() * 4);
        out.extend_from_slice(RVOL_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, v.dims[0] as u32);
        put_u32(&mut out, v.dims[1] as u32);
        put_u32(&mut out, v.dims[2] as u32);
        put_f32(&mut out, v.spacing);
        for &vox in &v.voxels {
            put_f32(&mut out, vox);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Volume> {
        let mut r = Reader::new(bytes);
        r.magic(RVOL_MAGIC, "RVOL")?;
        let d = r.u32("D")? as usize;
        let h = r.u32("H")? as usize;
        let w = r.u32("W")? as usize;
        let spacing = r.f32("spacing")?;
        let n = d
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Error::format("RVOL: dims overflow"))?;
        let voxels = r.f32_vec(n, "voxels")?;
        r.finish("RVOL")?;
        Volume::new([d, h, w], spacing, voxels).map_err(|e| Error::format(format!("RVOL: {e}")))
    }
}

pub mod rtfm {
    use super::*;

    /// Serialize a subject -> atlas transform.
    pub fn encode(t: &SpatialTransform) -> Result<Vec<u8>> {
        if !t.subject_to_atlas {
            return Err(Error::config(
                "RTFM files store the subject->atlas direction; invert before writing",
            ));
        }
        let mut out = Vec::new();
        out.extend_from_slice(RTFM_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        for row in &t.affine.m {
            for &v in row {
                put_f32(&mut out, v);
            }
        }
        for &v in &t.affine.t {
            put_f32(&mut out, v);
        }
        match &t.displacement {
            None => out.push(0),
            Some(field) => {
                out.push(1);
                put_u32(&mut out, field.dims[0] as u32);
                put_u32(&mut out, field.dims[1] as u32);
                put_u32(&mut out, field.dims[2] as u32);
                for v in &field.vectors {
                    put_f32(&mut out, v[0]);
                    put_f32(&mut out, v[1]);
                    put_f32(&mut out, v[2]);
                }
            }
        }
        Ok(out)
    }

    /// Decode with the extent (mm along x, y, z) of the subject volume the
    /// transform belongs to; the displacement grid spans that domain.
    pub fn decode(bytes: &[u8], source_extent_mm: [f32; 3]) -> Result<SpatialTransform> {
        let mut r = Reader::new(bytes);
        r.magic(RTFM_MAGIC, "RTFM")?;
        let mut m = [[0.0f32; 3]; 3];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = r.f32("affine")?;
            }
        }
        let mut t = [0.0f32; 3];
        for v in t.iter_mut() {
            *v = r.f32("translation")?;
        }
        let has_disp = r.u8("has_displacement")?;
        let displacement = match has_disp {
            0 => None,
            1 => {
                let gd = r.u32("grid D")? as usize;
                let gh = r.u32("grid H")? as usize;
                let gw = r.u32("grid W")? as usize;
                let n = gd
                    .checked_mul(gh)
                    .and_then(|x| x.checked_mul(gw))
                    .ok_or_else(|| Error::format("RTFM: grid dims overflow"))?;
                let flat = r.f32_vec(n * 3, "displacement vectors")?;
                let vectors: Vec<[f32; 3]> =
                    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                Some(
                    DisplacementField::new([gd, gh, gw], source_extent_mm, vectors)
                        .map_err(|e| Error::format(format!("RTFM: {e}")))?,
                )
            }
            v => return Err(Error::format(format!("RTFM: has_displacement byte {v} not 0/1"))),
        };
        r.finish("RTFM")?;
        Ok(SpatialTransform {
            affine: crate::transform::Affine3 { m, t },
            displacement,
            subject_to_atlas: true,
        })
    }
}

pub mod ckpt {
    use super::*;

    pub fn encode(entries: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, entries.len() as u32);
        for (name, tensor) in entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::format(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(tensor.rank() as u8);
            for &d in tensor.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                put_f32(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
        let mut r = Reader::new(bytes);
        r.magic(CKPT_MAGIC, "checkpoint")?;
        let count = r.u32("tensor count")? as usize;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_bytes = r.take(name_len, "name")?;
            let name = core::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(format!("tensor {i}: name is not UTF-8")))?;
            let rank = r.u8("rank")? as usize;
            if rank == 0 || rank > crate::tensor::MAX_RANK {
                return Err(Error::format(format!("tensor {name}: rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u64("dim")? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::format(format!("tensor {name}: dims overflow")))?;
                dims.push(d);
            }
            let data = r.f32_vec(numel, "tensor data")?;
            let tensor = Tensor::new(&dims, data)
                .map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
            if entries.insert(String::from(name), tensor).is_some() {
                return Err(Error::format(format!("duplicate tensor name {name}")));
            }
        }
        r.finish("checkpoint")?;
        Ok(entries)
    }
}
