//! PLY meshes and point clouds (ASCII and binary little-endian).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::TriangleMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    Binary,
}

/// Vertices with optional normals and labels, plus optional faces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub labels: Option<Vec<i32>>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn from_mesh(mesh: &TriangleMesh) -> Self {
        PlyData {
            vertices: mesh.vertices.clone(),
            normals: mesh.normals.clone(),
            labels: None,
            faces: mesh.triangles.clone(),
        }
    }

    pub fn points(points: &[Vec3], labels: Option<Vec<i32>>) -> Self {
        PlyData {
            vertices: points.to_vec(),
            normals: None,
            labels,
            faces: Vec::new(),
        }
    }

    pub fn into_mesh(self) -> Result<TriangleMesh> {
        let mut m = TriangleMesh::new(self.vertices, self.faces)?;
        m.normals = self.normals;
        Ok(m)
    }
}

pub fn write_ply(path: &Path, data: &PlyData, format: PlyFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    }
    let file = File::create(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    write_ply_to(&mut w, data, format)
        .and_then(|_| w.flush().map_err(Error::from))
        .map_err(|e| Error::file(path, e.to_string()))
}

pub fn write_ply_to<W: Write>(w: &mut W, data: &PlyData, format: PlyFormat) -> Result<()> {
    let n = data.vertices.len();
    if data.normals.as_ref().is_some_and(|v| v.len() != n) || data.labels.as_ref().is_some_and(|v| v.len() != n) {
        return Err(Error::DimensionMismatch(
            "per-vertex attribute count differs from vertex count".into(),
        ));
    }
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::Binary => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {n}")?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if data.normals.is_some() {
        writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
    }
    if data.labels.is_some() {
        writeln!(w, "property int label")?;
    }
    if !data.faces.is_empty() {
        writeln!(
            w,
            "element face {}\nproperty list uchar int vertex_indices",
            data.faces.len()
        )?;
    }
    writeln!(w, "end_header")?;
    for i in 0..n {
        let mut floats: Vec<f32> = data.vertices[i].iter().map(|v| *v as f32).collect();
        if let Some(nm) = &data.normals {
            floats.extend(nm[i].iter().map(|v| *v as f32));
        }
        match format {
            PlyFormat::Ascii => {
                let mut line: Vec<String> = floats.iter().map(|f| f.to_string()).collect();
                if let Some(l) = &data.labels {
                    line.push(l[i].to_string());
                }
                writeln!(w, "{}", line.join(" "))?;
            }
            PlyFormat::Binary => {
                for f in floats {
                    w.write_all(&f.to_le_bytes())?;
                }
                if let Some(l) = &data.labels {
                    w.write_all(&l[i].to_le_bytes())?;
                }
            }
        }
    }
    for f in &data.faces {
        match format {
            PlyFormat::Ascii => writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?,
            PlyFormat::Binary => {
                w.write_all(&[3u8])?;
                for i in f {
                    w.write_all(&(*i as i32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::format(format!("unknown PLY type '{other}'"))),
        })
    }

    fn read_le<R: Read>(self, r: &mut R) -> Result<f64> {
        let mut b = [0u8; 8];
        let n = match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        };
        r.read_exact(&mut b[..n])
            .map_err(|_| Error::format("unexpected end of PLY body"))?;
        Ok(match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b),
        })
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let file = File::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    read_ply_from(&mut BufReader::new(file)).map_err(|e| Error::file(path, e.to_string()))
}

pub fn read_ply_from<R: BufRead>(r: &mut R) -> Result<PlyData> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::format("PLY header ended early"));
        }
        Ok(line.trim().to_string())
    };
    if next_line(r)? != "ply" {
        return Err(Error::format("missing 'ply' magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, ..] => return Err(Error::format(format!("unsupported PLY format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::format("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => elements
                .last_mut()
                .ok_or_else(|| Error::format("property before element"))?
                .props
                .push(Property::List(name.to_string(), Scalar::parse(ct)?, Scalar::parse(it)?)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::format("property before element"))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(ty)?)),
            ["end_header"] => break,
            _ => return Err(Error::format(format!("unrecognized PLY header line '{l}'"))),
        }
    }
    let binary = binary.ok_or_else(|| Error::format("PLY format line missing"))?;
    let mut data = PlyData::default();
    let mut body = String::new();
    let mut ascii_tokens: Vec<String> = Vec::new();
    let mut cursor = 0usize;
    if !binary {
        r.read_to_string(&mut body)?;
        ascii_tokens = body.split_whitespace().map(str::to_string).collect();
    }
    let mut next_value = |r: &mut R, ty: Scalar| -> Result<f64> {
        if binary {
            ty.read_le(r)
        } else {
            let t = ascii_tokens
                .get(cursor)
                .ok_or_else(|| Error::format("unexpected end of PLY body"))?;
            cursor += 1;
            t.parse::<f64>()
                .map_err(|_| Error::format(format!("bad PLY value '{t}'")))
        }
    };
    for el in &elements {
        for _ in 0..el.count {
            let mut named = [f64::NAN; 7]; // x y z nx ny nz label
            let mut face: Vec<u32> = Vec::new();
            for p in &el.props {
                match p {
                    Property::Scalar(name, ty) => {
                        let v = next_value(r, *ty)?;
                        let slot = ["x", "y", "z", "nx", "ny", "nz", "label"]
                            .iter()
                            .position(|n| n == name);
                        if let Some(s) = slot {
                            named[s] = v;
                        }
                    }
                    Property::List(name, ct, it) => {
                        let n = next_value(r, *ct)? as usize;
                        for _ in 0..n {
                            let v = next_value(r, *it)?;
                            if name == "vertex_indices" || name == "vertex_index" {
                                face.push(v as u32);
                            }
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    data.vertices.push(Vec3::new(named[0], named[1], named[2]));
                    if !named[3].is_nan() {
                        data.normals
                            .get_or_insert_with(Vec::new)
                            .push(Vec3::new(named[3], named[4], named[5]));
                    }
                    if !named[6].is_nan() {
                        data.labels.get_or_insert_with(Vec::new).push(named[6] as i32);
                    }
                }
                "face" => {
                    for k in 1..face.len().saturating_sub(1) {
                        data.faces.push([face[0], face[k], face[k + 1]]);
                    }
                }
                _ => {}
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PlyData {
        PlyData {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.5, 0.0, -0.25),
                Vec3::new(0.0, 2.0, 1e-3),
            ],
            normals: Some(vec![Vec3::z(); 3]),
            labels: None,
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn round_trip_both_encodings() {
        for fmt in [PlyFormat::Ascii, PlyFormat::Binary] {
            let mut buf = Vec::new();
            write_ply_to(&mut buf, &sample(), fmt).unwrap();
            let back = read_ply_from(&mut buf.as_slice()).unwrap();
            let expected = sample();
            assert_eq!(back.faces, expected.faces);
            for (a, b) in back.vertices.iter().zip(&expected.vertices) {
                assert_eq!(a.map(|v| v as f32), b.map(|v| v as f32));
            }
            assert_eq!(back.normals, expected.normals);
        }
    }

    #[test]
    fn labelled_points() {
        let d = PlyData::points(&[Vec3::new(1.0, 2.0, 3.0), Vec3::zeros()], Some(vec![4, -1]));
        for fmt in [PlyFormat::Ascii, PlyFormat::Binary] {
            let mut buf = Vec::new();
            write_ply_to(&mut buf, &d, fmt).unwrap();
            assert_eq!(read_ply_from(&mut buf.as_slice()).unwrap(), d);
        }
    }

    #[test]
    fn empty_mesh_is_valid() {
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &PlyData::default(), PlyFormat::Ascii).unwrap();
        let back = read_ply_from(&mut buf.as_slice()).unwrap();
        assert!(back.vertices.is_empty() && back.faces.is_empty());
    }

    #[test]
    fn quads_are_fanned_and_garbage_rejected() {
        let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\n\
                    element face 1\nproperty list uchar uint vertex_index\nend_header\n\
                    0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let d = read_ply_from(&mut text.as_bytes()).unwrap();
        assert_eq!(d.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(read_ply_from(&mut "plx\n".as_bytes()).is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n";
        assert!(read_ply_from(&mut short.as_bytes()).is_err());
    }
}
