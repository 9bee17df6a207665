//! Middlebury `.flo` files: `"PIEH"`, width and height as little-endian `i32`,
//! then interleaved little-endian `f32` `(u, v)` pairs in row-major order.

use std::fs;
use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

const HEADER_LEN: usize = 12;

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + flow.u.len() * 8);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8], origin: &str) -> Result<FlowField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{origin}: header needs 12 bytes")));
    }
    if &bytes[..4] != FLO_MAGIC {
        return Err(Error::BadMagic(origin.to_string()));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::InvalidArgument(format!(
            "{origin}: invalid flow size {width}x{height}"
        )));
    }
    let (width, height) = (width as usize, height as usize);
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::InvalidArgument(format!("{origin}: flow size overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count * 8 {
        return Err(Error::Truncated(format!(
            "{origin}: expected {} payload bytes, found {}",
            count * 8,
            payload.len()
        )));
    }
    let mut u = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for pair in payload[..count * 8].chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
    }
    if u.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{origin}: flow payload")));
    }
    Ok(FlowField {
        height,
        width,
        u,
        v,
    })
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path)?;
    decode_flow(&bytes, &path.display().to_string())
}

pub fn write_flow(flow: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, encode_flow(flow))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_flow_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.flo");
        write_flow(&FlowField::zeros(4, 4), &path).unwrap();
        let f = read_flow(&path).unwrap();
        assert_eq!(f.dims(), (4, 4));
        assert!(f.u().iter().chain(f.v()).all(|&x| x == 0.0));
    }

    #[test]
    fn file_size_for_2x2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.flo");
        write_flow(&FlowField::zeros(2, 2), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 4 + 8 + 32);
    }

    #[test]
    fn constant_fraction_survives() {
        let bytes = encode_flow(&FlowField::constant(3, 5, 1.5, -0.25));
        let f = decode_flow(&bytes, "mem").unwrap();
        assert!(f.u().iter().all(|&x| x == 1.5));
        assert!(f.v().iter().all(|&x| x == -0.25));
        assert_eq!((f.height(), f.width()), (3, 5));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_flow(&FlowField::zeros(2, 2));
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_flow(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_flow(&FlowField::zeros(4, 4));
        assert!(matches!(
            decode_flow(&bytes[..bytes.len() - 1], "mem"),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(decode_flow(&bytes[..7], "mem"), Err(Error::Truncated(_))));
    }

    #[test]
    fn non_finite_payload() {
        let mut bytes = encode_flow(&FlowField::zeros(1, 1));
        bytes[12..16].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_flow(&bytes, "mem"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("x.flo");
        assert!(write_flow(&FlowField::zeros(1, 1), &path).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            (h, w, u, v) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (
                Just(h),
                Just(w),
                prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, h * w),
                prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, h * w),
            ))
        ) {
            let flow = FlowField::new(h, w, u, v).unwrap();
            let back = decode_flow(&encode_flow(&flow), "mem").unwrap();
            prop_assert!(back.u().iter().zip(flow.u()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(back.v().iter().zip(flow.v()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.dims(), flow.dims());
        }
    }
}
