//! MVOL / MMSK little-endian containers.
//!
//! ```text
//! 0..4    magic "MVOL" | "MMSK"
//! 4..8    version (u32) = 1
//! 8..20   nx, ny, nz (u32 each)
//! 20..44  sx, sy, sz (f64 each)
//! 44..48  payload code (u32): 1 = int16 HU, 2 = uint8 binary
//! 48..    payload, x fastest, then y, then z
//! ```

use std::io::{Read, Write};

use super::{Mask, Result, Volume, VolumeError};

pub const HEADER_LEN: usize = 48;
const VERSION: u32 = 1;
const VOLUME_MAGIC: [u8; 4] = *b"MVOL";
const MASK_MAGIC: [u8; 4] = *b"MMSK";
const PAYLOAD_HU: u32 = 1;
const PAYLOAD_BINARY: u32 = 2;

fn encode_header(
    magic: [u8; 4],
    dims: [usize; 3],
    spacing: [f64; 3],
    code: u32,
) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&magic);
    h[4..8].copy_from_slice(&VERSION.to_le_bytes());
    for (i, d) in dims.iter().enumerate() {
        let off = 8 + 4 * i;
        h[off..off + 4].copy_from_slice(&(*d as u32).to_le_bytes());
    }
    for (i, s) in spacing.iter().enumerate() {
        let off = 20 + 8 * i;
        h[off..off + 8].copy_from_slice(&s.to_le_bytes());
    }
    h[44..48].copy_from_slice(&code.to_le_bytes());
    h
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn decode_header<R: Read>(source: &mut R, magic: [u8; 4], code: u32) -> Result<Header> {
    let mut h = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = source.read(&mut h[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    if filled < 4 || h[0..4] != magic {
        let mut found = [0u8; 4];
        found[..filled.min(4)].copy_from_slice(&h[..filled.min(4)]);
        return Err(VolumeError::BadMagic {
            found,
            expected: magic,
        });
    }
    if filled < HEADER_LEN {
        return Err(VolumeError::PayloadLength {
            expected: HEADER_LEN as u64,
            actual: filled as u64,
        });
    }
    let version = read_u32(&h, 4);
    if version != VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let dims = [
        read_u32(&h, 8) as usize,
        read_u32(&h, 12) as usize,
        read_u32(&h, 16) as usize,
    ];
    let spacing = [
        f64::from_le_bytes(h[20..28].try_into().unwrap()),
        f64::from_le_bytes(h[28..36].try_into().unwrap()),
        f64::from_le_bytes(h[36..44].try_into().unwrap()),
    ];
    let found = read_u32(&h, 44);
    if found != code {
        return Err(VolumeError::PayloadCode {
            found,
            expected: code,
        });
    }
    if dims.contains(&0) {
        return Err(VolumeError::ZeroDimension(dims));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(VolumeError::NonPositiveSpacing(spacing));
    }
    Ok(Header { dims, spacing })
}

fn read_payload<R: Read>(source: &mut R, expected: u64) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(expected as usize);
    source.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected {
        return Err(VolumeError::PayloadLength {
            expected,
            actual: payload.len() as u64,
        });
    }
    Ok(payload)
}

/// Write `volume` as MVOL. Returns the number of bytes written.
pub fn save_volume<W: Write>(volume: &Volume, mut destination: W) -> Result<u64> {
    let header = encode_header(VOLUME_MAGIC, volume.dims, volume.spacing, PAYLOAD_HU);
    destination.write_all(&header)?;
    let mut payload = Vec::with_capacity(volume.voxels.len() * 2);
    for v in &volume.voxels {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    destination.write_all(&payload)?;
    destination.flush()?;
    Ok((HEADER_LEN + payload.len()) as u64)
}

pub fn load_volume<R: Read>(mut source: R) -> Result<Volume> {
    let header = decode_header(&mut source, VOLUME_MAGIC, PAYLOAD_HU)?;
    let n = header.dims.iter().product::<usize>();
    let payload = read_payload(&mut source, 2 * n as u64)?;
    let voxels = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Volume::new(header.dims, header.spacing, voxels)
}

/// Write `mask` as MMSK. The structure id is not part of the container; it
/// travels in the file name.
pub fn save_mask<W: Write>(mask: &Mask, mut destination: W) -> Result<u64> {
    let header = encode_header(MASK_MAGIC, mask.dims, mask.spacing, PAYLOAD_BINARY);
    destination.write_all(&header)?;
    destination.write_all(&mask.voxels)?;
    destination.flush()?;
    Ok((HEADER_LEN + mask.voxels.len()) as u64)
}

pub fn load_mask<R: Read>(mut source: R, structure_id: &str) -> Result<Mask> {
    let header = decode_header(&mut source, MASK_MAGIC, PAYLOAD_BINARY)?;
    let n = header.dims.iter().product::<usize>();
    let payload = read_payload(&mut source, n as u64)?;
    Mask::new(structure_id, header.dims, header.spacing, payload)
}
