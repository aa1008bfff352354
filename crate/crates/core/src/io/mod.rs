//! File formats. Binary formats are little-endian with a four-byte magic
//! and a `u32` version; floating payloads are `f32`.

mod binary;
pub mod ply;
pub mod scene;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub use binary::{Reader, Writer};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::grid::{sh, SparseVoxelGrid, VoxelKey, VoxelRecord};
use crate::image::ImagePlane;
use crate::tsdf::{CornerSample, TsdfField};

pub const GRID_MAGIC: &[u8; 4] = b"LESV";
pub const IMAGE_MAGIC: &[u8; 4] = b"LIMG";
pub const TSDF_MAGIC: &[u8; 4] = b"LTSD";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

/// Runs `f` on a buffered file, attaching the path to any error.
pub(crate) fn with_reader<T>(path: &Path, f: impl FnOnce(&mut Reader<BufReader<File>>) -> Result<T>) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut r = Reader::new(BufReader::new(file));
    f(&mut r).map_err(|e| match e {
        Error::File { .. } => e,
        other => Error::file(path, other.to_string()),
    })
}

pub(crate) fn with_writer(path: &Path, f: impl FnOnce(&mut Writer<BufWriter<File>>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    }
    let file = File::create(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut w = Writer::new(BufWriter::new(file));
    f(&mut w)
        .and_then(|_| w.finish())
        .map_err(|e| Error::file(path, e.to_string()))
}

fn expect_header<R: Read>(r: &mut Reader<R>, magic: &[u8; 4]) -> Result<()> {
    let m = r.bytes::<4>()?;
    if &m != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported version {v}")));
    }
    Ok(())
}

fn write_bounds<W: Write>(w: &mut Writer<W>, b: &Aabb) -> Result<()> {
    for v in b.min.iter().chain(b.max.iter()) {
        w.f64(*v)?;
    }
    Ok(())
}

fn read_bounds<R: Read>(r: &mut Reader<R>) -> Result<Aabb> {
    let mut v = [0.0; 6];
    for x in v.iter_mut() {
        *x = r.f64()?;
    }
    Ok(Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])))
}

pub fn write_grid_to<W: Write>(w: &mut Writer<W>, grid: &SparseVoxelGrid) -> Result<()> {
    w.raw(GRID_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    write_bounds(w, grid.bounds())?;
    w.u32(grid.sh_degree())?;
    w.u32(grid.feature_dim() as u32)?;
    w.u64(grid.len() as u64)?;
    for (key, rec) in grid.iter() {
        w.u32(key.level)?;
        w.u64(key.code)?;
        w.f32s(&rec.densities)?;
        for c in &rec.sh {
            w.f32s(c)?;
        }
        w.f32(rec.weight_sum)?;
        w.f32s(&rec.feature)?;
    }
    Ok(())
}

pub fn read_grid_from<R: Read>(r: &mut Reader<R>) -> Result<SparseVoxelGrid> {
    expect_header(r, GRID_MAGIC)?;
    let bounds = read_bounds(r)?;
    let sh_degree = r.u32()?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut grid = SparseVoxelGrid::new(bounds, sh_degree)?;
    let ncoef = sh::coefficient_count(sh_degree);
    grid.reset_features(dim);
    for i in 0..count {
        let level = r.u32()?;
        let code = r.u64()?;
        let mut densities = [0f32; 8];
        r.f32s_into(&mut densities)?;
        let mut coeffs = vec![[0f32; 3]; ncoef];
        for c in coeffs.iter_mut() {
            r.f32s_into(c)?;
        }
        let weight_sum = r.f32()?;
        let mut feature = vec![0f32; dim];
        r.f32s_into(&mut feature)?;
        let key = VoxelKey { level, code };
        grid.insert_record(
            key,
            VoxelRecord {
                densities,
                sh: coeffs,
                feature,
                weight_sum,
            },
        )
        .map_err(|e| Error::format(format!("record {i} ({key}): {e}")))?;
    }
    r.expect_end()?;
    Ok(grid)
}

pub fn write_grid(path: &Path, grid: &SparseVoxelGrid) -> Result<()> {
    with_writer(path, |w| write_grid_to(w, grid))
}

pub fn read_grid(path: &Path) -> Result<SparseVoxelGrid> {
    with_reader(path, read_grid_from)
}

pub fn write_image_to<W: Write>(w: &mut Writer<W>, img: &ImagePlane) -> Result<()> {
    w.raw(IMAGE_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(DTYPE_F32)?;
    w.u32(img.channels as u32)?;
    w.u32(img.width as u32)?;
    w.u32(img.height as u32)?;
    w.f32s(&img.values)?;
    let mut bits = vec![0u8; img.len().div_ceil(8)];
    for (i, v) in img.valid.iter().enumerate() {
        if *v {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    w.raw(&bits)
}

pub fn read_image_from<R: Read>(r: &mut Reader<R>) -> Result<ImagePlane> {
    expect_header(r, IMAGE_MAGIC)?;
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(format!("unsupported dtype tag {dtype}")));
    }
    let channels = r.u32()? as usize;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .filter(|n| *n <= 1 << 32)
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    let mut img = ImagePlane::new(width, height, channels);
    img.values = vec![0.0; n];
    r.f32s_into(&mut img.values)?;
    let mut bits = vec![0u8; img.len().div_ceil(8)];
    r.raw_into(&mut bits)?;
    for (i, v) in img.valid.iter_mut().enumerate() {
        *v = bits[i / 8] >> (i % 8) & 1 == 1;
    }
    r.expect_end()?;
    Ok(img)
}

pub fn write_image(path: &Path, img: &ImagePlane) -> Result<()> {
    with_writer(path, |w| write_image_to(w, img))
}

pub fn read_image(path: &Path) -> Result<ImagePlane> {
    with_reader(path, read_image_from)
}

pub fn write_tsdf_to<W: Write>(w: &mut Writer<W>, field: &TsdfField) -> Result<()> {
    w.raw(TSDF_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    write_bounds(w, field.bounds())?;
    w.u32(field.level())?;
    w.f64(field.trunc())?;
    w.u64(field.len() as u64)?;
    for (c, s) in field.iter() {
        for v in c {
            w.u32(*v)?;
        }
        w.f64(s.phi)?;
        w.f64(s.weight)?;
    }
    Ok(())
}

pub fn read_tsdf_from<R: Read>(r: &mut Reader<R>) -> Result<TsdfField> {
    expect_header(r, TSDF_MAGIC)?;
    let bounds = read_bounds(r)?;
    let level = r.u32()?;
    let trunc = r.f64()?;
    let count = r.u64()?;
    let mut field = TsdfField::new(bounds, level, trunc)?;
    let mut corners = Vec::new();
    let mut observed = Vec::new();
    for _ in 0..count {
        let c = [r.u32()?, r.u32()?, r.u32()?];
        let s = CornerSample {
            phi: r.f64()?,
            weight: r.f64()?,
        };
        corners.push(c);
        if s.is_observed() {
            observed.push((c, s));
        }
    }
    r.expect_end()?;
    field.allocate(corners);
    for (c, s) in observed {
        field.set(c, s.phi, s.weight)?;
    }
    Ok(field)
}

pub fn write_tsdf(path: &Path, field: &TsdfField) -> Result<()> {
    with_writer(path, |w| write_tsdf_to(w, field))
}

pub fn read_tsdf(path: &Path) -> Result<TsdfField> {
    with_reader(path, read_tsdf_from)
}

/// Embedding vector file: `u32` dimension followed by the `f32` payload.
pub fn write_embedding(path: &Path, v: &[f32]) -> Result<()> {
    with_writer(path, |w| {
        w.u32(v.len() as u32)?;
        w.f32s(v)
    })
}

pub fn read_embedding(path: &Path) -> Result<Vec<f32>> {
    with_reader(path, |r| {
        let dim = r.u32()? as usize;
        if dim > 1 << 24 {
            return Err(Error::format(format!("implausible embedding dimension {dim}")));
        }
        let mut v = vec![0f32; dim];
        r.f32s_into(&mut v)?;
        r.expect_end()?;
        Ok(v)
    })
}

/// 8-bit PNG export of one or three channels scaled from `[lo, hi]`.
/// Invalid pixels are written black.
pub fn write_png(path: &Path, img: &ImagePlane, lo: f32, hi: f32) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::domain(format!("PNG export needs 1 or 3 channels, got {c}"))),
    };
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut data = Vec::with_capacity(img.values.len());
    for (i, v) in img.values.iter().enumerate() {
        let valid = img.valid[i / img.channels];
        data.push(if valid {
            ((v - lo) * scale).clamp(0.0, 255.0).round() as u8
        } else {
            0
        });
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    }
    let file = File::create(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&data))
        .map_err(|e| Error::file(path, e.to_string()))
}
