//! `.vtn` raw video container.
//!
//! Layout: `"VTEN"`, `u32` version (1), `u32` t, d, h, w, then `t*d*h*w`
//! little-endian `f32` samples in `(t, d, h, w)` order, then the CRC-32 of
//! all preceding bytes.

use std::path::Path;

use motia_core::data::Video;
use motia_core::Tensor;

use crate::binio::{Reader, Writer};
use crate::error::{self, Result};

pub const MAGIC: &[u8; 4] = b"VTEN";
pub const VERSION: u32 = 1;

pub fn encode_vtn(video: &Video) -> Vec<u8> {
    let t = video.tensor();
    let mut w = Writer::new(MAGIC, VERSION);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
    w.finish()
}

pub fn decode_vtn(bytes: &[u8], path: &Path) -> Result<Video> {
    let mut r = Reader::open(bytes, MAGIC, VERSION, path)?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match n {
        Some(n) if n > 0 && n.checked_mul(4) == Some(r.remaining()) => {
            let data = r.f32s(n)?;
            Ok(Video::new(Tensor::new(&dims, data)?)?)
        }
        _ => Err(r.corrupt(format!("header dims {:?} disagree with {} payload bytes", dims, r.remaining()))),
    }
}

pub fn save_vtn(video: &Video, path: &Path) -> Result<()> {
    error::write(path, &encode_vtn(video))
}

pub fn load_vtn(path: &Path) -> Result<Video> {
    decode_vtn(&error::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn video() -> Video {
        Video::new(Tensor::from_fn(&[2, 1, 3, 4], |i| i as f32 / 24.0).unwrap()).unwrap()
    }

    #[test]
    fn layout_is_fixed() {
        let bytes = encode_vtn(&video());
        assert_eq!(&bytes[..4], b"VTEN");
        assert_eq!(bytes.len(), 4 + 4 + 16 + 24 * 4 + 4);
        assert_eq!(&bytes[8..24], &[2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn round_trip_and_rejections() {
        let p = Path::new("mem.vtn");
        let v = video();
        let bytes = encode_vtn(&v);
        assert_eq!(decode_vtn(&bytes, p).unwrap(), v);

        let mut foreign = bytes.clone();
        foreign[..4].copy_from_slice(b"RIFF");
        assert!(matches!(decode_vtn(&foreign, p), Err(Error::Corrupt { .. })));

        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_vtn(&flipped, p), Err(Error::Corrupt { .. })));

        // Consistent CRC but a header claiming more frames than the payload holds.
        let mut body = bytes[..bytes.len() - 4].to_vec();
        body[8] = 3;
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_vtn(&body, p), Err(Error::Corrupt { .. })));
    }
}
