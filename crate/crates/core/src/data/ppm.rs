//! Binary PPM (P6) image I/O; the zero-dependency storage format of the
//! dataset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write a [3,H,W] tensor with values in [0,1] as 8-bit P6.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    image.expect_rank(3, "write_ppm")?;
    if image.shape()[0] != 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("expected 3 channels, got {:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    let d = image.data();
    let plane = h * w;
    let mut row = Vec::with_capacity(3 * w);
    for i in 0..h {
        row.clear();
        for j in 0..w {
            for ch in 0..3 {
                let v = (d[ch * plane + i * w + j].clamp(0.0, 1.0) * 255.0).round() as u8;
                row.push(v);
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn read_token(r: &mut impl Read) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    // skip whitespace and comments
    loop {
        r.read_exact(&mut byte)?;
        match byte[0] {
            b'#' => {
                while byte[0] != b'\n' {
                    r.read_exact(&mut byte)?;
                }
            }
            b' ' | b'\t' | b'\n' | b'\r' => {}
            _ => break,
        }
    }
    tok.push(byte[0] as char);
    loop {
        r.read_exact(&mut byte)?;
        match byte[0] {
            b' ' | b'\t' | b'\n' | b'\r' => break,
            c => tok.push(c as char),
        }
    }
    Ok(tok)
}

/// Read an 8-bit P6 file into a [3,H,W] tensor in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::Dataset(format!("{}: not a P6 file", path.display())));
    }
    let w: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: bad width", path.display())))?;
    let h: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: bad height", path.display())))?;
    let maxval: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: bad maxval", path.display())))?;
    if maxval != 255 {
        return Err(Error::Dataset(format!("{}: only maxval 255 supported", path.display())));
    }
    let mut raw = vec![0u8; 3 * h * w];
    r.read_exact(&mut raw)?;
    let plane = h * w;
    let mut data = vec![0.0f64; 3 * plane];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data[ch * plane + i * w + j] = raw[(i * w + j) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless_on_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = Tensor::zeros(&[3, 5, 7]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 13 % 256) as f64) / 255.0;
        }
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
