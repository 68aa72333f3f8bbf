//! PNG images and masks, little-endian PFM depth, binary little-endian PLY clouds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, RgbImage};
use nalgebra::Vector3;

use super::{DepthMap, ImagePlane, PointCloud, RegionMask};
use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, img: &ImagePlane) -> Result<()> {
    let buf = RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
    });
    buf.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<ImagePlane> {
    let buf = image::open(path)?.to_rgb8();
    Ok(ImagePlane::from_fn(
        buf.width() as usize,
        buf.height() as usize,
        |x, y| {
            let p = buf.get_pixel(x as u32, y as u32).0;
            [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ]
        },
    ))
}

/// 8-bit grayscale mask.
pub fn write_mask_png(path: &Path, mask: &RegionMask) -> Result<()> {
    let buf = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([to_u8(mask.get(x as usize, y as usize))])
    });
    buf.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<RegionMask> {
    let buf = image::open(path)?.to_luma8();
    Ok(RegionMask::from_fn(
        buf.width() as usize,
        buf.height() as usize,
        |x, y| buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0,
    ))
}

/// Single-channel PFM, negative scale (little-endian), rows stored bottom-up.
/// Invalid pixels are written as 0.
pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", depth.width, depth.height)?;
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let v = depth.get(x, y).unwrap_or(0.0) as f32;
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header_line(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::format(path, "unexpected end of header"));
    }
    Ok(line.trim().to_string())
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let mut r = BufReader::new(File::open(path)?);
    if read_header_line(&mut r, path)? != "Pf" {
        return Err(Error::format(path, "not a single-channel PFM"));
    }
    let dims = read_header_line(&mut r, path)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(width)), Some(Ok(height))) = (it.next(), it.next()) else {
        return Err(Error::format(path, "bad dimensions"));
    };
    let scale: f64 = read_header_line(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::format(path, "big-endian PFM is not supported"));
    }
    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw)?;
    let mut depth = DepthMap::invalid(width, height);
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let (row, x) = (k / width, k % width);
        let y = height - 1 - row;
        if v.is_finite() && v > 0.0 {
            depth.set(x, y, v);
        }
    }
    Ok(depth)
}

const PLY_PROPS: [&str; 7] = ["x", "y", "z", "red", "green", "blue", "provenance"];

/// Positions and colors as `float`, provenance as `uint`.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.len()
    )?;
    for p in &PLY_PROPS[..6] {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "property uint provenance\nend_header")?;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        for v in [p.x, p.y, p.z] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for v in cloud.colors[i] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&cloud.provenance[i].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    if read_header_line(&mut r, path)? != "ply" {
        return Err(Error::format(path, "missing ply magic"));
    }
    if read_header_line(&mut r, path)? != "format binary_little_endian 1.0" {
        return Err(Error::format(
            path,
            "only binary_little_endian is supported",
        ));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let line = read_header_line(&mut r, path)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::format(path, "bad count"))?,
                )
            }
            ["property", _, name] => props.push(name.to_string()),
            ["comment", ..] => {}
            _ => {
                return Err(Error::format(
                    path,
                    format!("unsupported header line: {line}"),
                ))
            }
        }
    }
    if props != PLY_PROPS {
        return Err(Error::format(
            path,
            format!("unexpected properties {props:?}"),
        ));
    }
    let n = count.ok_or_else(|| Error::format(path, "missing vertex element"))?;
    let mut cloud = PointCloud::new();
    let mut rec = [0u8; 28];
    let f = |b: &[u8]| f32::from_le_bytes(b.try_into().unwrap()) as f64;
    for _ in 0..n {
        r.read_exact(&mut rec)?;
        cloud.push(
            Vector3::new(f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])),
            [f(&rec[12..16]), f(&rec[16..20]), f(&rec[20..24])],
            u32::from_le_bytes(rec[24..28].try_into().unwrap()),
        );
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_keeps_validity_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut depth = DepthMap::invalid(3, 2);
        depth.set(0, 0, 1.5);
        depth.set(2, 1, 0.25);
        write_depth_pfm(&path, &depth).unwrap();
        assert_eq!(read_depth_pfm(&path).unwrap(), depth);
        // First stored row is the bottom image row.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = b"Pf\n3 2\n-1.0\n".len();
        let last = f32::from_le_bytes(bytes[header_len + 8..header_len + 12].try_into().unwrap());
        assert_eq!(last, 0.25);
    }

    #[test]
    fn ply_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let mut cloud = PointCloud::new();
        cloud.push(Vector3::new(0.5, -1.25, 3.0), [0.0, 0.5, 1.0], 0);
        cloud.push(Vector3::new(1.0, 2.0, 4.0), [0.25, 0.75, 0.125], 3);
        write_ply(&path, &cloud).unwrap();
        assert_eq!(read_ply(&path).unwrap(), cloud);
    }

    #[test]
    fn png_round_trip_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImagePlane::from_fn(4, 3, |x, y| {
            [x as f64 * 51.0 / 255.0, y as f64 * 85.0 / 255.0, 1.0]
        });
        write_rgb_png(&dir.path().join("a.png"), &img).unwrap();
        let back = read_rgb_png(&dir.path().join("a.png")).unwrap();
        assert!(back.psnr(&img, None) > 100.0);
        let mask = RegionMask::from_fn(4, 3, |x, _| if x > 1 { 1.0 } else { 0.0 });
        write_mask_png(&dir.path().join("m.png"), &mask).unwrap();
        assert_eq!(read_mask_png(&dir.path().join("m.png")).unwrap(), mask);
    }
}
