//! Length-prefixed binary messages exchanged with out-of-process plugins.
//!
//! ```text
//! message  := u32 kind | u64 payload_len | payload
//! payload  := u32 meta_len | meta (UTF-8 JSON) | u32 tensor_count | tensor*
//! tensor   := u32 rank | u32 dim[rank] | f32 value[prod(dim)]
//! ```
//!
//! All integers and floats are little-endian. Replies carry the request kind
//! with [`REPLY`] set; failures come back as [`ERROR`] with `{"message": ..}`.

use std::io::{Read, Write};

use serde_json::Value;

use super::LatentVideo;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImagePlane, RegionMask};

pub const MANIFEST: u32 = 1;
pub const INPAINT: u32 = 2;
pub const DEPTH: u32 = 3;
pub const DENOISE: u32 = 4;
pub const ENCODE: u32 = 5;
pub const DECODE: u32 = 6;
pub const INTERPOLATE: u32 = 7;
pub const REPLY: u32 = 0x8000_0000;
pub const ERROR: u32 = 0xFFFF_FFFF;

/// Upper bound on a single payload (1 GiB).
const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().map(|d| *d as usize).product();
        if n != data.len() {
            return Err(Error::Wire(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::Wire(format!(
                "{what}: expected rank {rank}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// `H × W × 3`.
    pub fn from_image(img: &ImagePlane) -> Self {
        Self {
            dims: vec![img.height as u32, img.width as u32, 3],
            data: img.rgb.iter().flat_map(|c| c.map(|v| v as f32)).collect(),
        }
    }

    pub fn to_image(&self) -> Result<ImagePlane> {
        self.expect_rank(3, "image")?;
        if self.dims[2] != 3 {
            return Err(Error::Wire("image tensor must have 3 channels".into()));
        }
        let (h, w) = (self.dims[0] as usize, self.dims[1] as usize);
        Ok(ImagePlane {
            width: w,
            height: h,
            rgb: self
                .data
                .chunks_exact(3)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect(),
        })
    }

    /// `H × W`.
    pub fn from_mask(m: &RegionMask) -> Self {
        Self {
            dims: vec![m.height as u32, m.width as u32],
            data: m.weights.iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn to_mask(&self) -> Result<RegionMask> {
        self.expect_rank(2, "mask")?;
        Ok(RegionMask {
            width: self.dims[1] as usize,
            height: self.dims[0] as usize,
            weights: self.data.iter().map(|v| *v as f64).collect(),
        })
    }

    /// `H × W`; invalid pixels travel as 0.
    pub fn from_depth(d: &DepthMap) -> Self {
        Self {
            dims: vec![d.height as u32, d.width as u32],
            data: d
                .values
                .iter()
                .zip(&d.valid)
                .map(|(v, ok)| if *ok { *v as f32 } else { 0.0 })
                .collect(),
        }
    }

    pub fn to_depth(&self) -> Result<DepthMap> {
        self.expect_rank(2, "depth")?;
        let (h, w) = (self.dims[0] as usize, self.dims[1] as usize);
        let mut d = DepthMap::invalid(w, h);
        for (i, v) in self.data.iter().enumerate() {
            let v = *v as f64;
            if v.is_finite() && v > 0.0 {
                d.values[i] = v;
                d.valid[i] = true;
            }
        }
        Ok(d)
    }

    /// `T × C × h × w`.
    pub fn from_latent(z: &LatentVideo) -> Self {
        Self {
            dims: vec![
                z.frames as u32,
                z.channels as u32,
                z.height as u32,
                z.width as u32,
            ],
            data: z.data.iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn to_latent(&self, schedule_step: usize) -> Result<LatentVideo> {
        self.expect_rank(4, "latent")?;
        Ok(LatentVideo {
            frames: self.dims[0] as usize,
            channels: self.dims[1] as usize,
            height: self.dims[2] as usize,
            width: self.dims[3] as usize,
            data: self.data.iter().map(|v| *v as f64).collect(),
            schedule_step,
        })
    }

    /// `T × H × W × 3`.
    pub fn from_video(frames: &[ImagePlane]) -> Self {
        let (h, w) = frames.first().map_or((0, 0), |f| (f.height, f.width));
        Self {
            dims: vec![frames.len() as u32, h as u32, w as u32, 3],
            data: frames
                .iter()
                .flat_map(|f| f.rgb.iter().flat_map(|c| c.map(|v| v as f32)))
                .collect(),
        }
    }

    pub fn to_video(&self) -> Result<Vec<ImagePlane>> {
        self.expect_rank(4, "video")?;
        let [t, h, w, c] = [0, 1, 2, 3].map(|i| self.dims[i] as usize);
        if c != 3 {
            return Err(Error::Wire("video tensor must have 3 channels".into()));
        }
        let n = h * w * 3;
        (0..t)
            .map(|j| {
                Tensor {
                    dims: vec![h as u32, w as u32, 3],
                    data: self.data[j * n..(j + 1) * n].to_vec(),
                }
                .to_image()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub kind: u32,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Message {
    pub fn new(kind: u32, meta: Value, tensors: Vec<Tensor>) -> Self {
        Self {
            kind,
            meta,
            tensors,
        }
    }

    pub fn error(message: &str) -> Self {
        Self::new(ERROR, serde_json::json!({ "message": message }), vec![])
    }

    pub fn tensor(&self, i: usize) -> Result<&Tensor> {
        self.tensors
            .get(i)
            .ok_or_else(|| Error::Wire(format!("message kind {} lacks tensor {i}", self.kind)))
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        let mut out = Vec::with_capacity(8 + meta.len());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode_payload(kind: u32, payload: &[u8]) -> Result<Self> {
        let mut cur = Cursor {
            buf: payload,
            pos: 0,
        };
        let meta_len = cur.u32()? as usize;
        let meta: Value = serde_json::from_slice(cur.take(meta_len)?)?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().map(|d| *d as usize).product();
            let bytes = cur.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Wire("tensor too large".into()))?,
            )?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { dims, data });
        }
        if cur.pos != payload.len() {
            return Err(Error::Wire("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Wire("truncated payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    let payload = msg.encode_payload();
    w.write_all(&msg.kind.to_le_bytes())?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    let kind = u32::from_le_bytes(header[0..4].try_into().unwrap());
    let len = u64::from_le_bytes(header[4..12].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Wire(format!("payload of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Message::decode_payload(kind, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_kind_then_length() {
        let msg = Message::new(
            DEPTH,
            serde_json::json!({}),
            vec![Tensor::new(vec![2], vec![1.0, -2.5]).unwrap()],
        );
        let mut buf = Vec::new();
        write_message(&mut buf, &msg).unwrap();
        assert_eq!(&buf[0..4], &DEPTH.to_le_bytes());
        let len = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        assert_eq!(len, buf.len() - 12);
        // meta "{}" then one rank-1 tensor of two floats
        let p = &buf[12..];
        assert_eq!(u32::from_le_bytes(p[0..4].try_into().unwrap()), 2);
        assert_eq!(&p[4..6], b"{}");
        assert_eq!(u32::from_le_bytes(p[6..10].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(p[10..14].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(p[14..18].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(p[22..26].try_into().unwrap()), -2.5);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let msg = Message::new(
            ENCODE,
            serde_json::json!({"a": 1}),
            vec![Tensor::new(vec![3], vec![1.0; 3]).unwrap()],
        );
        let payload = msg.encode_payload();
        assert!(Message::decode_payload(ENCODE, &payload[..payload.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn message_round_trip(kind in any::<u32>(), dims in proptest::collection::vec(0u32..4, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().map(|d| *d as usize).product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let msg = Message::new(kind, serde_json::json!({"seed": seed}), vec![Tensor::new(dims, data).unwrap()]);
            let mut buf = Vec::new();
            write_message(&mut buf, &msg).unwrap();
            prop_assert_eq!(read_message(&mut buf.as_slice()).unwrap(), msg);
        }
    }
}
