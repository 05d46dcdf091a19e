//! Binary matrix format: `"CRMX"`, u32 version, u64 rows, u64 cols, then
//! `rows × cols` little-endian f64 values in row-major order.

use super::Matrix;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const MATRIX_MAGIC: &[u8; 4] = b"CRMX";
pub const MATRIX_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 8 + 8;

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 8);
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one matrix. `offset` is the absolute position of the reader in the
/// enclosing stream and is advanced; errors report the failing offset.
pub fn read_matrix<R: Read>(r: &mut R, offset: &mut usize) -> Result<Matrix> {
    let start = *offset;
    let mut header = [0u8; HEADER_LEN];
    read_exact_at(r, &mut header, offset, "matrix header")?;
    if &header[0..4] != MATRIX_MAGIC {
        return Err(Error::Format {
            what: "matrix",
            offset: start,
            reason: format!("bad magic {:?}", &header[0..4]),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::Format {
            what: "matrix",
            offset: start + 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let count = rows.checked_mul(cols).ok_or_else(|| Error::Format {
        what: "matrix",
        offset: start + 8,
        reason: format!("dimensions {rows}x{cols} overflow"),
    })?;
    let mut buf = vec![0u8; count * 8];
    read_exact_at(r, &mut buf, offset, "matrix data")?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn read_exact_at<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    offset: &mut usize,
    what: &'static str,
) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Format {
                    what,
                    offset: *offset + filled,
                    reason: format!("truncated: expected {} more bytes", buf.len() - filled),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5]]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[0..4], b"CRMX");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 24 + 16);
    }

    #[test]
    fn truncation_names_offset() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &Matrix::identity(3)).unwrap();
        buf.truncate(40);
        let mut off = 0;
        let err = read_matrix(&mut buf.as_slice(), &mut off).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 40, .. }), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &Matrix::identity(1)).unwrap();
        buf[0] = b'X';
        let mut off = 0;
        assert!(read_matrix(&mut buf.as_slice(), &mut off).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>()) {
            let m = Matrix::from_fn(rows, cols, |i, j| {
                f64::from_bits(seed.rotate_left((i * 7 + j) as u32) & 0x7fef_ffff_ffff_ffff)
            });
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m).unwrap();
            let mut off = 0;
            let back = read_matrix(&mut buf.as_slice(), &mut off).unwrap();
            prop_assert_eq!(off, buf.len());
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.data().iter().zip(m.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
