//! Binary framing for the subprocess denoiser (protocol version 1).
//!
//! ```text
//! header   : "TFD1" | version u32 | h u32 | w u32            (16 bytes)
//! request  : header | C u32 | gamma f64 | condition | latent
//! response : header | eps_hat
//! ```
//!
//! All integers and floats are little-endian. Tensors are `h * w * C` f32
//! values, row-major and channel-last. The response carries no channel count;
//! it is implied by the request it answers.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::raster::{Raster, Shape};

pub const MAGIC: [u8; 4] = *b"TFD1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub height: u32,
    pub width: u32,
}

impl Header {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            version: VERSION,
            height: height as u32,
            width: width as u32,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.height.to_le_bytes());
        b[12..16].copy_from_slice(&self.width.to_le_bytes());
        b
    }

    /// Parse and validate magic and version.
    pub fn decode(b: &[u8; HEADER_LEN]) -> Result<Self> {
        if b[..4] != MAGIC {
            return Err(Error::Protocol(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&b[..4]),
                "TFD1"
            )));
        }
        let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Protocol(format!(
                "unsupported protocol version {version}, expected {VERSION}"
            )));
        }
        Ok(Self {
            version,
            height: word(8),
            width: word(12),
        })
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn read_f32s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

/// A decoded request as seen by a server.
#[derive(Clone, Debug, PartialEq)]
pub struct WireRequest {
    pub gamma: f64,
    pub condition: Raster,
    pub latent: Raster,
}

impl WireRequest {
    pub fn shape(&self) -> Shape {
        self.latent.shape()
    }
}

pub fn encode_request(condition: &Raster, latent: &Raster, gamma: f64) -> Result<Vec<u8>> {
    condition.ensure_same_shape(latent)?;
    let s = latent.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 12 + 8 * s.len());
    out.extend_from_slice(&Header::new(s.height, s.width).encode());
    out.extend_from_slice(&(s.channels as u32).to_le_bytes());
    out.extend_from_slice(&gamma.to_le_bytes());
    put_f32s(&mut out, condition.data());
    put_f32s(&mut out, latent.data());
    Ok(out)
}

/// Read one request; `Ok(None)` on a clean end of stream before any header byte.
pub fn read_request(r: &mut impl Read) -> Result<Option<WireRequest>> {
    let mut head = [0u8; HEADER_LEN];
    match read_exact_or_eof(r, &mut head)? {
        false => return Ok(None),
        true => {}
    }
    let header = Header::decode(&head)?;
    let mut c = [0u8; 4];
    r.read_exact(&mut c)?;
    let mut g = [0u8; 8];
    r.read_exact(&mut g)?;
    let shape = Shape::new(
        header.height as usize,
        header.width as usize,
        u32::from_le_bytes(c) as usize,
    );
    let condition = Raster::from_vec(shape, read_f32s(r, shape.len())?)?;
    let latent = Raster::from_vec(shape, read_f32s(r, shape.len())?)?;
    Ok(Some(WireRequest {
        gamma: f64::from_le_bytes(g),
        condition,
        latent,
    }))
}

pub fn encode_response(epsilon: &Raster) -> Vec<u8> {
    let s = epsilon.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * s.len());
    out.extend_from_slice(&Header::new(s.height, s.width).encode());
    put_f32s(&mut out, epsilon.data());
    out
}

/// Raw response frame: the header as received plus payload values.
///
/// The payload length follows the header's `h x w` and the caller's channel
/// count, so a shape-mismatched frame is still consumed whole.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseFrame {
    pub header: Header,
    pub values: Vec<f64>,
}

pub fn read_response_frame(r: &mut impl Read, channels: usize) -> Result<ResponseFrame> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Protocol("denoiser closed its output".into()),
        _ => Error::Io(e),
    })?;
    let header = Header::decode(&head)?;
    let n = header.height as usize * header.width as usize * channels;
    let values = read_f32s(r, n)?;
    Ok(ResponseFrame { header, values })
}

impl ResponseFrame {
    /// Check the frame against the request shape and build the noise estimate.
    pub fn into_epsilon(self, expected: Shape) -> Result<Raster> {
        let (h, w) = (self.header.height as usize, self.header.width as usize);
        if h != expected.height || w != expected.width {
            return Err(Error::shape(
                format!("{}x{}", expected.height, expected.width),
                format!("{h}x{w}"),
            ));
        }
        let eps = Raster::from_vec(expected, self.values)?;
        if !eps.is_finite() {
            return Err(Error::Protocol("response contains non-finite values".into()));
        }
        Ok(eps)
    }
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Protocol("truncated header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Serve requests from `input` until end of stream, answering each with `handler`.
pub fn serve<R: Read, W: Write>(
    mut input: R,
    mut output: W,
    mut handler: impl FnMut(&WireRequest) -> Vec<u8>,
) -> Result<usize> {
    let mut served = 0;
    while let Some(req) = read_request(&mut input)? {
        output.write_all(&handler(&req))?;
        output.flush()?;
        served += 1;
    }
    Ok(served)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSource;

    #[test]
    fn header_layout_is_bit_exact() {
        let h = Header::new(32, 48).encode();
        assert_eq!(&h[..4], b"TFD1");
        assert_eq!(&h[4..8], &[1, 0, 0, 0]);
        assert_eq!(&h[8..12], &[32, 0, 0, 0]);
        assert_eq!(&h[12..16], &[48, 0, 0, 0]);
    }

    #[test]
    fn request_layout() {
        let cond = Raster::filled(Shape::new(1, 2, 1), 0.5);
        let lat = Raster::filled(Shape::new(1, 2, 1), -2.0);
        let b = encode_request(&cond, &lat, 0.25).unwrap();
        assert_eq!(b.len(), 16 + 4 + 8 + 2 * 4 * 2);
        assert_eq!(&b[16..20], &[1, 0, 0, 0]);
        assert_eq!(&b[20..28], &0.25f64.to_le_bytes());
        assert_eq!(&b[28..32], &0.5f32.to_le_bytes());
        assert_eq!(&b[36..40], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut h = Header::new(2, 2).encode();
        h[0] = b'X';
        assert!(matches!(Header::decode(&h), Err(Error::Protocol(_))));
        let mut h = Header::new(2, 2).encode();
        h[4] = 2;
        assert!(matches!(Header::decode(&h), Err(Error::Protocol(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let eps = Raster::zeros(Shape::new(3, 4, 2));
        let bytes = encode_response(&eps);
        let frame = read_response_frame(&mut bytes.as_slice(), 2).unwrap();
        let err = frame.into_epsilon(Shape::new(4, 4, 2)).unwrap_err().to_string();
        assert!(err.contains("4x4") && err.contains("3x4"), "{err}");
    }

    #[test]
    fn serve_loop_answers_each_request() {
        let shape = Shape::new(3, 3, 2);
        let src = NoiseSource::new(1);
        let mut input = Vec::new();
        for k in 0..3 {
            let a = src.patch_noise(k, 0, shape);
            input.extend(encode_request(&a, &a, 0.5).unwrap());
        }
        let mut out = Vec::new();
        let n = serve(input.as_slice(), &mut out, |r| encode_response(&Raster::zeros(r.shape()))).unwrap();
        assert_eq!(n, 3);
        let mut cursor = out.as_slice();
        for _ in 0..3 {
            let eps = read_response_frame(&mut cursor, 2).unwrap().into_epsilon(shape).unwrap();
            assert!(eps.data().iter().all(|v| *v == 0.0));
        }
        assert!(cursor.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn request_roundtrip(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>(),
                                 gamma in 1e-9f64..0.999999) {
                let shape = Shape::new(h, w, c);
                let src = NoiseSource::new(seed);
                // f32-representable values survive exactly
                let cond = src.patch_noise(0, 0, shape).map(|v| v as f32 as f64);
                let lat = src.patch_noise(1, 0, shape).map(|v| v as f32 as f64);
                let bytes = encode_request(&cond, &lat, gamma).unwrap();
                let back = read_request(&mut bytes.as_slice()).unwrap().unwrap();
                prop_assert_eq!(back.gamma, gamma);
                prop_assert_eq!(back.condition, cond);
                prop_assert_eq!(back.latent, lat);
            }
        }
    }
}
