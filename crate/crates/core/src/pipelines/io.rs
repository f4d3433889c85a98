//! Unaries, segment maps and experiment result tables.

use std::io::{Read, Write};
use std::path::Path;

use image::ImageReader;
use ndarray::Array2;

use crate::error::{Error, Result};

/// Binary unaries: `u32` n, `u32` L (little endian), then `n * L` `f32`
/// values row-major.
pub fn write_unaries<W: Write>(u: &Array2<f64>, mut w: W) -> Result<()> {
    let (n, l) = u.dim();
    let too_big = |v: usize| u32::try_from(v).map_err(|_| Error::shape("unaries too large"));
    w.write_all(&too_big(n)?.to_le_bytes())?;
    w.write_all(&too_big(l)?.to_le_bytes())?;
    for v in u.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_unaries<R: Read>(mut r: R) -> Result<Array2<f64>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let l = u32::from_le_bytes(word) as usize;
    let count = n
        .checked_mul(l)
        .ok_or_else(|| Error::InvalidParameter("unaries header overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::InvalidParameter(format!(
            "unaries header says {n}x{l}, payload has {} bytes",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((n, l), values).expect("size checked"))
}

pub fn save_unaries(u: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_unaries(u, f)
}

pub fn load_unaries(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_unaries(f).map_err(|e| match e {
        Error::InvalidParameter(reason) => Error::format(path, reason),
        other => other,
    })
}

/// Segment ids, one per point.
///
/// `.csv` files hold either one id per line or `point,segment` rows (an
/// optional header line is skipped); anything else is read as a grayscale
/// raster whose integer levels are the ids.
pub fn load_segment_map(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = std::fs::read_to_string(path)?;
        return parse_segment_csv(&text).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        });
    }
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    if img.color().has_color() {
        return Err(Error::format(path, "segment rasters must be grayscale"));
    }
    // Integer levels as stored; to_luma16 would rescale 8-bit data.
    Ok(match img.color().bytes_per_pixel() {
        1 | 2 if img.color() == image::ColorType::L8 || img.color() == image::ColorType::La8 => {
            img.to_luma8().into_raw().into_iter().map(usize::from).collect()
        }
        _ => img.to_luma16().into_raw().into_iter().map(usize::from).collect(),
    })
}

pub fn parse_segment_csv(text: &str) -> Result<Vec<usize>> {
    let bad = |reason: String| Error::format("<csv>", reason);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let nums: std::result::Result<Vec<usize>, _> = cells.iter().map(|c| c.parse()).collect();
        let nums = match nums {
            Ok(v) => v,
            Err(_) if n == 0 => continue,
            Err(_) => return Err(bad(format!("line {}: not an integer", n + 1))),
        };
        match nums.as_slice() {
            [id] => ids.push(*id),
            [point, id] => pairs.push((*point, *id)),
            _ => return Err(bad(format!("line {}: expected 1 or 2 columns", n + 1))),
        }
    }
    if !pairs.is_empty() && !ids.is_empty() {
        return Err(bad("mixed one- and two-column rows".into()));
    }
    if pairs.is_empty() {
        return Ok(ids);
    }
    let mut out = vec![usize::MAX; pairs.len()];
    for (p, id) in pairs {
        let slot = out
            .get_mut(p)
            .ok_or_else(|| bad(format!("point {p} out of range")))?;
        *slot = id;
    }
    if out.contains(&usize::MAX) {
        return Err(bad("every point needs exactly one segment".into()));
    }
    Ok(out)
}

/// One evaluation row of an experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub image: String,
    pub value: f64,
}

/// `method,image,<metric>` rows.
pub fn results_csv(metric: &str, rows: &[ResultRow]) -> String {
    let mut out = format!("method,image,{metric}\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}\n", r.method, r.image, r.value));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unaries_round_trip() {
        let u = ndarray::array![[0.5, -1.25], [3.0, 0.0], [1.0, 2.0]];
        let mut buf = Vec::new();
        write_unaries(&u, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 6 * 4);
        assert_eq!(&buf[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(read_unaries(buf.as_slice()).unwrap(), u);
        buf.pop();
        assert!(read_unaries(buf.as_slice()).is_err());
    }

    #[test]
    fn segment_csv_forms() {
        assert_eq!(parse_segment_csv("0\n1\n1\n").unwrap(), vec![0, 1, 1]);
        assert_eq!(parse_segment_csv("point,segment\n1,0\n0,2\n").unwrap(), vec![2, 0]);
        assert!(parse_segment_csv("0,1\n0,2\n").is_err());
    }

    #[test]
    fn results_schema() {
        let rows = [ResultRow {
            method: "gauss".into(),
            image: "img0".into(),
            value: 26.5,
        }];
        assert_eq!(results_csv("psnr", &rows), "method,image,psnr\ngauss,img0,26.500000\n");
    }
}
