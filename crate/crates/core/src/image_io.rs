//! Netpbm output: binary PPM (P6, 8-bit) for color and 16-bit big-endian PGM
//! (P5, maxval 65535) for scalar maps.

use crate::grid::Grid;
use nalgebra::Vector3;
use std::io::{BufRead, Write};

/// Linear scale of depth PGMs: one count is 0.1 mm.
pub const DEPTH_PGM_SCALE: f64 = 10_000.0;

pub fn write_ppm<W: Write>(image: &Grid<Vector3<f64>>, mut out: W) -> std::io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", image.width(), image.height())?;
    let mut bytes = Vec::with_capacity(image.len() * 3);
    for c in image.iter() {
        for v in c.iter() {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)
}

/// Writes `round(value · scale)` saturated into `[0, 65535]`; non-finite values
/// saturate high.
pub fn write_pgm16<W: Write>(map: &Grid<f64>, scale: f64, mut out: W) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n65535\n", map.width(), map.height())?;
    let mut bytes = Vec::with_capacity(map.len() * 2);
    for &v in map.iter() {
        let q = if v.is_finite() {
            (v * scale).round().clamp(0.0, 65535.0) as u16
        } else {
            u16::MAX
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    out.write_all(&bytes)
}

pub fn write_depth_pgm<W: Write>(depth: &Grid<f64>, out: W) -> std::io::Result<()> {
    write_pgm16(depth, DEPTH_PGM_SCALE, out)
}

fn read_token<R: BufRead>(input: &mut R) -> std::io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        input.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c == '#' {
            let mut skip = String::new();
            input.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

fn bad(msg: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string())
}

fn read_header<R: BufRead>(input: &mut R, magic: &str) -> std::io::Result<(usize, usize, usize)> {
    if read_token(input)? != magic {
        return Err(bad("unexpected netpbm magic"));
    }
    let mut num = || -> std::io::Result<usize> {
        read_token(input)?
            .parse()
            .map_err(|_| bad("bad netpbm header"))
    };
    Ok((num()?, num()?, num()?))
}

pub fn read_ppm<R: BufRead>(mut input: R) -> std::io::Result<Grid<Vector3<f64>>> {
    let (w, h, maxval) = read_header(&mut input, "P6")?;
    if maxval != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut bytes = vec![0u8; w * h * 3];
    input.read_exact(&mut bytes)?;
    let px = bytes
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
        .collect();
    Ok(Grid::from_vec(w, h, px))
}

/// Reads a 16-bit PGM back into raw counts.
pub fn read_pgm16<R: BufRead>(mut input: R) -> std::io::Result<Grid<u16>> {
    let (w, h, maxval) = read_header(&mut input, "P5")?;
    if maxval != 65535 {
        return Err(bad("only 16-bit PGM is supported"));
    }
    let mut bytes = vec![0u8; w * h * 2];
    input.read_exact(&mut bytes)?;
    let px = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Grid::from_vec(w, h, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_quantizes_to_bytes() {
        let img = Grid::from_fn(3, 2, |x, y| Vector3::new(x as f64 / 2.0, y as f64, 0.2));
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n3 2\n255\n"));
        let back = read_ppm(buf.as_slice()).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).amax() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_saturates_and_scales() {
        let map = Grid::from_vec(4, 1, vec![0.0, 1.2345, 100.0, f64::INFINITY]);
        let mut buf = Vec::new();
        write_depth_pgm(&map, &mut buf).unwrap();
        let back = read_pgm16(buf.as_slice()).unwrap();
        assert_eq!(back.as_slice(), &[0, 12345, 65535, 65535]);
    }
}
