//! Bitplane storage for per-task binary masks.
//!
//! Task `k`'s mask lives in bit `k % 32` of plane `k / 32`, so a single `u32`
//! per weight holds the masks of 32 tasks:
//!
//! ```text
//! C[i] = sum_k M_k[i] * 2^(k mod 32)        (within one plane)
//! ```
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "SMCL" | version u16 | T u32 | layers u32
//!        | per layer: rank u8, dims u32[rank]
//!        | per layer, per plane: u32[elements] row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::subnet::TaskMask;
use crate::tensor::Mask;

pub const MAGIC: &[u8; 4] = b"SMCL";
pub const VERSION: u16 = 1;
pub const PLANE_BITS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedMaskBank {
    shapes: Vec<Vec<usize>>,
    task_count: usize,
    /// `planes[layer][plane][element]`
    planes: Vec<Vec<Vec<u32>>>,
}

fn planes_for(tasks: usize) -> usize {
    tasks.div_ceil(PLANE_BITS)
}

impl CompressedMaskBank {
    /// A bank with no tasks yet.
    pub fn empty(shapes: Vec<Vec<usize>>) -> Self {
        let planes = vec![Vec::new(); shapes.len()];
        Self {
            shapes,
            task_count: 0,
            planes,
        }
    }

    pub fn compress(masks: &[TaskMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Config("cannot compress an empty mask list".into()))?;
        let mut bank = Self::empty(first.layers.iter().map(|m| m.shape().to_vec()).collect());
        for m in masks {
            bank.append(m)?;
        }
        Ok(bank)
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn num_planes(&self) -> usize {
        planes_for(self.task_count)
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn plane(&self, layer: usize, plane: usize) -> &[u32] {
        &self.planes[layer][plane]
    }

    /// Total weight elements across layers.
    pub fn elements(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn check(&self, mask: &TaskMask, task: usize) -> Result<()> {
        if mask.layers.len() != self.shapes.len() {
            return Err(Error::MaskCount {
                expected: self.shapes.len(),
                actual: mask.layers.len(),
            });
        }
        for (l, (m, shape)) in mask.layers.iter().zip(&self.shapes).enumerate() {
            if m.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    layer: format!("mask layer {l}"),
                    expected: shape.clone(),
                    actual: m.shape().to_vec(),
                });
            }
            if let Some(index) = m.data().iter().position(|&v| v > 1) {
                return Err(Error::NonBinary {
                    task,
                    layer: l,
                    index,
                    value: m.data()[index],
                });
            }
        }
        Ok(())
    }

    /// Adds the next task's mask; a new plane is allocated only when the
    /// current one is full.
    pub fn append(&mut self, mask: &TaskMask) -> Result<()> {
        let k = self.task_count;
        self.check(mask, k)?;
        let bit = k % PLANE_BITS;
        for (layer, m) in self.planes.iter_mut().zip(&mask.layers) {
            if bit == 0 {
                layer.push(vec![0u32; m.len()]);
            }
            let plane = layer.last_mut().expect("plane allocated");
            for (c, &v) in plane.iter_mut().zip(m.data()) {
                *c |= (v as u32) << bit;
            }
        }
        self.task_count += 1;
        Ok(())
    }

    pub fn extract(&self, task: usize) -> Result<TaskMask> {
        if task >= self.task_count {
            return Err(Error::TaskOutOfRange {
                task,
                count: self.task_count,
            });
        }
        let (p, bit) = (task / PLANE_BITS, task % PLANE_BITS);
        let layers = self
            .planes
            .iter()
            .zip(&self.shapes)
            .map(|(planes, shape)| {
                let data = planes[p].iter().map(|&c| ((c >> bit) & 1) as u8).collect();
                Mask::from_vec(shape.clone(), data).expect("plane matches shape")
            })
            .collect();
        Ok(TaskMask { task_id: task, layers })
    }

    /// Extracts just one layer of one task.
    pub fn extract_layer(&self, task: usize, layer: usize) -> Result<Mask> {
        if task >= self.task_count {
            return Err(Error::TaskOutOfRange {
                task,
                count: self.task_count,
            });
        }
        let (p, bit) = (task / PLANE_BITS, task % PLANE_BITS);
        let data = self.planes[layer][p].iter().map(|&c| ((c >> bit) & 1) as u8).collect();
        Mask::from_vec(self.shapes[layer].clone(), data)
    }

    /// Checks that no plane carries bits beyond the recorded task count.
    pub fn validate(&self) -> Result<()> {
        let np = self.num_planes();
        for (l, planes) in self.planes.iter().enumerate() {
            if planes.len() != np {
                return Err(Error::Corrupt(format!("layer {l} has {} planes, expected {np}", planes.len())));
            }
            for (p, plane) in planes.iter().enumerate() {
                let used = (self.task_count - p * PLANE_BITS).min(PLANE_BITS);
                if used < PLANE_BITS {
                    let limit = 1u32 << used;
                    if let Some(i) = plane.iter().position(|&c| c >= limit) {
                        return Err(Error::Corrupt(format!(
                            "layer {l} plane {p} element {i} = {} exceeds 2^{used}",
                            plane[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn header_bytes(&self) -> usize {
        4 + 2 + 4 + 4 + self.shapes.iter().map(|s| 1 + 4 * s.len()).sum::<usize>()
    }

    pub fn payload_bytes(&self) -> usize {
        4 * self.elements() * self.num_planes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_bytes() + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.task_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for s in &self.shapes {
            out.push(s.len() as u8);
            for &d in s {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for planes in &self.planes {
            for plane in planes {
                for &c in plane {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let task_count = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            shapes.push(dims);
        }
        let np = planes_for(task_count);
        let mut planes = Vec::with_capacity(layers);
        for s in &shapes {
            let n: usize = s.iter().product();
            let mut lp = Vec::with_capacity(np);
            for _ in 0..np {
                let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
                lp.push(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect());
            }
            planes.push(lp);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let bank = Self {
            shapes,
            task_count,
            planes,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
