//! Binary dataset file: little-endian, fixed field order.
//!
//! ```text
//! "DSVA" | version u32 | scene_count u32 | height u32 | width u32 | dim u32
//! per scene:
//!   seed u64 | object_count u32 | object_count * [shape u8, color u8, size u8, motion u8]
//!   image f32 * (height*width*3)
//!   gt masks u8 * (object_count*height*width) | label_mask u8 * (height*width)
//!   label_len u32 | label u16 * label_len
//!   mixing_id u64 | e_text f32 * dim | e_vis f32 * dim | x_fused f32 * (2*dim)
//! ```

use std::fs;
use std::path::Path;

use super::factors::FusedHiddenState;
use super::scene::Scene;
use super::vocab::{self, Motion, ObjectAttrs, ShapeKind, SizeClass, COLORS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSVA";
pub const VERSION: u32 = 1;
const MAX_SIDE: u32 = 4096;
const MAX_DIM: u32 = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub state: FusedHiddenState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `eval` samples as the held-out set.
    pub fn split(&self, eval: usize) -> Result<(&[Sample], &[Sample])> {
        if eval >= self.samples.len() {
            return Err(Error::Config(format!(
                "cannot hold out {eval} of {} scenes",
                self.samples.len()
            )));
        }
        Ok(self.samples.split_at(self.samples.len() - eval))
    }

    fn check(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let sc = &s.scene;
            let pix = self.height * self.width;
            let ok = sc.height == self.height
                && sc.width == self.width
                && sc.image.len() == pix * 3
                && sc.gt_masks.len() == sc.objects.len()
                && sc.gt_masks.iter().all(|m| m.len() == pix)
                && sc.label_mask.len() == pix
                && (1..=4).contains(&sc.objects.len())
                && s.state.e_text.len() == self.dim
                && s.state.e_vis.len() == self.dim
                && s.state.x_fused.len() == 2 * self.dim;
            if !ok {
                return Err(Error::shape(format!("sample {i} does not match dataset dims")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        for v in [VERSION, self.samples.len() as u32, self.height as u32, self.width as u32, self.dim as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            let sc = &s.scene;
            b.extend_from_slice(&sc.seed.to_le_bytes());
            b.extend_from_slice(&(sc.objects.len() as u32).to_le_bytes());
            for o in &sc.objects {
                b.extend_from_slice(&encode_attrs(o));
            }
            sc.image.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            sc.gt_masks.iter().for_each(|m| b.extend_from_slice(m));
            b.extend_from_slice(&sc.label_mask);
            b.extend_from_slice(&(sc.label.len() as u32).to_le_bytes());
            sc.label.iter().for_each(|t| b.extend_from_slice(&t.to_le_bytes()));
            b.extend_from_slice(&s.state.mixing_id.to_le_bytes());
            for v in s.state.e_text.iter().chain(&s.state.e_vis).chain(&s.state.x_fused) {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"DSVA\""));
        }
        let at = r.pos as u64;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let at = r.pos as u64;
        let (h, w, dim) = (r.u32()?, r.u32()?, r.u32()?);
        if h == 0 || w == 0 || h > MAX_SIDE || w > MAX_SIDE || dim == 0 || dim > MAX_DIM {
            return Err(Error::format(at, format!("implausible dims {h}x{w}, D={dim}")));
        }
        let (h, w, dim) = (h as usize, w as usize, dim as usize);
        let pix = h * w;
        let min_record = 8 + 4 + 4 + pix * 12 + pix * 2 + 4 + 2 * 2 + 8 + dim * 16;
        if count.saturating_mul(min_record) > bytes.len() - r.pos {
            return Err(Error::format(
                r.pos as u64,
                format!("{count} scenes declared but only {} bytes remain", bytes.len() - r.pos),
            ));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            samples.push(r.sample(h, w, dim)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last scene"));
        }
        Ok(Dataset {
            height: h,
            width: w,
            dim,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

fn encode_attrs(o: &ObjectAttrs) -> [u8; 4] {
    let idx = |p: Option<usize>| p.unwrap() as u8;
    [
        idx(ShapeKind::ALL.iter().position(|&s| s == o.shape)),
        o.color,
        idx(SizeClass::ALL.iter().position(|&s| s == o.size)),
        idx(Motion::ALL.iter().position(|&s| s == o.motion)),
    ]
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let at = self.pos as u64;
        let v: Vec<f32> = self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(at, "non-finite float"));
        }
        Ok(v)
    }

    fn mask(&mut self, n: usize) -> Result<Vec<u8>> {
        let at = self.pos;
        let m = self.take(n)?;
        match m.iter().position(|&b| b > 1) {
            Some(i) => Err(Error::format((at + i) as u64, "mask byte is not 0/1")),
            None => Ok(m.to_vec()),
        }
    }

    fn sample(&mut self, h: usize, w: usize, dim: usize) -> Result<Sample> {
        let pix = h * w;
        let seed = self.u64()?;
        let at = self.pos as u64;
        let n = self.u32()? as usize;
        if !(1..=4).contains(&n) {
            return Err(Error::format(at, format!("object count {n} outside 1..=4")));
        }
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.pos as u64;
            let a = self.take(4)?;
            let bad = || Error::format(at, "invalid object attribute byte");
            objects.push(ObjectAttrs {
                shape: *ShapeKind::ALL.get(a[0] as usize).ok_or_else(bad)?,
                color: if (a[1] as usize) < COLORS.len() { a[1] } else { return Err(bad()) },
                size: *SizeClass::ALL.get(a[2] as usize).ok_or_else(bad)?,
                motion: *Motion::ALL.get(a[3] as usize).ok_or_else(bad)?,
            });
        }
        let at = self.pos as u64;
        let image = self.f32s(pix * 3)?;
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(at, "image value outside [0, 1]"));
        }
        let gt_masks = (0..n).map(|_| self.mask(pix)).collect::<Result<Vec<_>>>()?;
        let mask_at = self.pos as u64;
        let label_mask = self.mask(pix)?;
        let at = self.pos as u64;
        let len = self.u32()? as usize;
        if !(2..=4).contains(&len) {
            return Err(Error::format(at, format!("label length {len} outside 2..=4")));
        }
        let label: Vec<u16> = self
            .take(len * 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if !vocab::is_grammatical(&label) {
            return Err(Error::format(at + 4, "label is not a grammatical expression"));
        }
        let hits: Vec<usize> = (0..n).filter(|&i| vocab::matches(&objects[i], &label)).collect();
        let [target] = hits[..] else {
            return Err(Error::format(at + 4, format!("label matches {} objects", hits.len())));
        };
        if label_mask != gt_masks[target] {
            return Err(Error::format(mask_at, "label mask differs from referred object mask"));
        }
        let mixing_id = self.u64()?;
        let e_text = self.f32s(dim)?;
        let e_vis = self.f32s(dim)?;
        let x_fused = self.f32s(2 * dim)?;
        Ok(Sample {
            scene: Scene {
                seed,
                height: h,
                width: w,
                objects,
                image,
                gt_masks,
                target,
                label,
                label_mask,
            },
            state: FusedHiddenState {
                x_fused,
                e_text,
                e_vis,
                mixing_id,
            },
        })
    }
}
