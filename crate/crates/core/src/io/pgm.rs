use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Encodes slice `z` as a binary 8-bit PGM (P5), values `round(v·255)`.
pub fn slice_pgm(v: &Volume, z: usize) -> Result<Vec<u8>> {
    let d = v.dims();
    if z >= d.z {
        return Err(Error::Config(format!("slice {z} out of range for {} slices", d.z)));
    }
    let mut out = format!("P5\n{} {}\n255\n", d.w, d.h).into_bytes();
    let start = d.index(0, 0, z);
    out.extend(v.voxels()[start..start + d.w * d.h].iter().map(|&x| (x * 255.0).round() as u8));
    Ok(out)
}

pub fn export_slice_pgm(v: &Volume, z: usize, path: &Path) -> Result<()> {
    let bytes = slice_pgm(v, z)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn constant_slices() {
        let d = Dims::new(3, 2, 2);
        let ones = slice_pgm(&Volume::filled(d, 1.0), 1).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&ones[..header.len()], header);
        assert!(ones[header.len()..].iter().all(|&b| b == 255));
        assert_eq!(ones.len(), header.len() + 6);
        let zeros = slice_pgm(&Volume::filled(d, 0.0), 0).unwrap();
        assert!(zeros[header.len()..].iter().all(|&b| b == 0));
        assert!(slice_pgm(&Volume::filled(d, 0.0), 2).is_err());
    }
}
