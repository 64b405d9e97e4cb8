//! PLY point cloud reader/writer (ascii and binary little-endian).
//!
//! Recognized vertex properties: `x,y,z` (float32/float64), `red,green,blue`
//! (uint8, mapped to [0,1]), `nx,ny,nz`, and a scalar `label` (int32).
//! Unknown properties and non-vertex elements are skipped on read.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use nalgebra::Vector3;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Result<ScalarType> {
        Ok(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            other => return Err(Error::Ply(format!("unknown property type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, buf: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => buf[0] as i8 as f64,
            ScalarType::U8 => buf[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes([
                buf[0], buf[1], buf[2], buf[3], buf[4], buf[5], buf[6], buf[7],
            ]),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { ty: ScalarType, name: String },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct ElementDecl {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<ElementDecl>,
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Header> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Ply("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<ElementDecl> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Ply("unexpected end of header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(Error::Ply(format!("unsupported format {other}"))),
                });
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::Ply(format!("bad element count {count}")))?;
                elements.push(ElementDecl {
                    name: (*name).to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count_ty, item_ty, _name] => {
                let decl = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                decl.properties.push(Property::List {
                    count: ScalarType::parse(count_ty)?,
                    item: ScalarType::parse(item_ty)?,
                });
            }
            ["property", ty, name] => {
                let decl = elements
                    .last_mut()
                    .ok_or_else(|| Error::Ply("property before element".into()))?;
                decl.properties.push(Property::Scalar {
                    ty: ScalarType::parse(ty)?,
                    name: (*name).to_string(),
                });
            }
            _ => return Err(Error::Ply(format!("bad header line: {}", line.trim_end()))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| Error::Ply("missing format line".into()))?,
        elements,
    })
}

#[derive(Default)]
struct VertexColumns {
    x: Option<usize>,
    y: Option<usize>,
    z: Option<usize>,
    red: Option<usize>,
    green: Option<usize>,
    blue: Option<usize>,
    nx: Option<usize>,
    ny: Option<usize>,
    nz: Option<usize>,
    label: Option<usize>,
}

impl VertexColumns {
    fn from_decl(decl: &ElementDecl) -> Result<VertexColumns> {
        let mut cols = VertexColumns::default();
        for (i, prop) in decl.properties.iter().enumerate() {
            if let Property::Scalar { name, .. } = prop {
                let slot = match name.as_str() {
                    "x" => &mut cols.x,
                    "y" => &mut cols.y,
                    "z" => &mut cols.z,
                    "red" => &mut cols.red,
                    "green" => &mut cols.green,
                    "blue" => &mut cols.blue,
                    "nx" => &mut cols.nx,
                    "ny" => &mut cols.ny,
                    "nz" => &mut cols.nz,
                    "label" => &mut cols.label,
                    _ => continue,
                };
                *slot = Some(i);
            }
        }
        if cols.x.is_none() || cols.y.is_none() || cols.z.is_none() {
            return Err(Error::Ply("vertex element lacks x/y/z".into()));
        }
        Ok(cols)
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader)?;

    let mut cloud = PointCloud::default();
    for decl in &header.elements {
        if decl.name == "vertex" {
            let cols = VertexColumns::from_decl(decl)?;
            let rows = read_element_rows(&mut reader, decl, header.format, true)?;
            fill_cloud(&mut cloud, decl, &cols, &rows)?;
        } else {
            read_element_rows(&mut reader, decl, header.format, false)?;
        }
    }
    if cloud.positions.is_empty() {
        return Err(Error::Ply("no vertex element found".into()));
    }
    cloud.validate()?;
    Ok(cloud)
}

/// Reads (or skips, when `keep` is false) all rows of one element.
/// Row values are scalar properties only; list properties are consumed
/// but not stored.
fn read_element_rows<R: BufRead>(
    reader: &mut R,
    decl: &ElementDecl,
    format: PlyFormat,
    keep: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for _ in 0..decl.count {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    return Err(Error::Ply("unexpected end of data".into()));
                }
                if !keep {
                    continue;
                }
                let mut tokens = line.split_whitespace();
                let mut row = Vec::with_capacity(decl.properties.len());
                for prop in &decl.properties {
                    match prop {
                        Property::Scalar { .. } => {
                            let tok = tokens
                                .next()
                                .ok_or_else(|| Error::Ply("short data line".into()))?;
                            row.push(
                                tok.parse::<f64>()
                                    .map_err(|_| Error::Ply(format!("bad value {tok}")))?,
                            );
                        }
                        Property::List { .. } => {
                            let tok = tokens
                                .next()
                                .ok_or_else(|| Error::Ply("short data line".into()))?;
                            let n: usize = tok
                                .parse()
                                .map_err(|_| Error::Ply(format!("bad list count {tok}")))?;
                            for _ in 0..n {
                                tokens
                                    .next()
                                    .ok_or_else(|| Error::Ply("short list".into()))?;
                            }
                        }
                    }
                }
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 8];
            for _ in 0..decl.count {
                let mut row = Vec::with_capacity(decl.properties.len());
                for prop in &decl.properties {
                    match prop {
                        Property::Scalar { ty, .. } => {
                            reader.read_exact(&mut buf[..ty.size()])?;
                            if keep {
                                row.push(ty.read_le(&buf));
                            }
                        }
                        Property::List { count, item } => {
                            reader.read_exact(&mut buf[..count.size()])?;
                            let n = count.read_le(&buf) as usize;
                            let mut skip = vec![0u8; n * item.size()];
                            reader.read_exact(&mut skip)?;
                        }
                    }
                }
                if keep {
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

fn fill_cloud(
    cloud: &mut PointCloud,
    decl: &ElementDecl,
    cols: &VertexColumns,
    rows: &[Vec<f64>],
) -> Result<()> {
    // Map property index -> scalar column index within the stored row.
    let scalar_pos: Vec<usize> = {
        let mut m = vec![usize::MAX; decl.properties.len()];
        let mut next = 0;
        for (i, p) in decl.properties.iter().enumerate() {
            if matches!(p, Property::Scalar { .. }) {
                m[i] = next;
                next += 1;
            }
        }
        m
    };
    let col = |slot: Option<usize>| slot.map(|i| scalar_pos[i]);
    let (cx, cy, cz) = (
        col(cols.x).unwrap(),
        col(cols.y).unwrap(),
        col(cols.z).unwrap(),
    );

    cloud.positions = rows
        .iter()
        .map(|r| Vector3::new(r[cx], r[cy], r[cz]))
        .collect();
    if let (Some(r), Some(g), Some(b)) = (col(cols.red), col(cols.green), col(cols.blue)) {
        cloud.colors = Some(
            rows.iter()
                .map(|row| Vector3::new(row[r] / 255.0, row[g] / 255.0, row[b] / 255.0))
                .collect(),
        );
    }
    if let (Some(nx), Some(ny), Some(nz)) = (col(cols.nx), col(cols.ny), col(cols.nz)) {
        cloud.normals = Some(
            rows.iter()
                .map(|row| Vector3::new(row[nx], row[ny], row[nz]))
                .collect(),
        );
    }
    if let Some(l) = col(cols.label) {
        let mut labels = Vec::with_capacity(rows.len());
        for row in rows {
            let v = row[l];
            if v < 0.0 {
                return Err(Error::Ply(format!("negative label {v}")));
            }
            labels.push(v as u32);
        }
        cloud.labels = Some(labels);
    }
    Ok(())
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    cloud.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let fmt_name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(w, "ply\nformat {} 1.0\n", fmt_name)?;
    write!(w, "element vertex {}\n", cloud.len())?;
    write!(
        w,
        "property double x\nproperty double y\nproperty double z\n"
    )?;
    if cloud.colors.is_some() {
        write!(
            w,
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        )?;
    }
    if cloud.normals.is_some() {
        write!(
            w,
            "property double nx\nproperty double ny\nproperty double nz\n"
        )?;
    }
    if cloud.labels.is_some() {
        write!(w, "property int label\n")?;
    }
    write!(w, "end_header\n")?;

    let quantize = |c: f64| -> u8 { (c.clamp(0.0, 1.0) * 255.0).round() as u8 };
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        match format {
            PlyFormat::Ascii => {
                write!(w, "{} {} {}", p.x, p.y, p.z)?;
                if let Some(c) = &cloud.colors {
                    let c = c[i];
                    write!(w, " {} {} {}", quantize(c.x), quantize(c.y), quantize(c.z))?;
                }
                if let Some(n) = &cloud.normals {
                    let n = n[i];
                    write!(w, " {} {} {}", n.x, n.y, n.z)?;
                }
                if let Some(l) = &cloud.labels {
                    write!(w, " {}", l[i] as i32)?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                w.write_all(&p.x.to_le_bytes())?;
                w.write_all(&p.y.to_le_bytes())?;
                w.write_all(&p.z.to_le_bytes())?;
                if let Some(c) = &cloud.colors {
                    let c = c[i];
                    w.write_all(&[quantize(c.x), quantize(c.y), quantize(c.z)])?;
                }
                if let Some(n) = &cloud.normals {
                    let n = n[i];
                    w.write_all(&n.x.to_le_bytes())?;
                    w.write_all(&n.y.to_le_bytes())?;
                    w.write_all(&n.z.to_le_bytes())?;
                }
                if let Some(l) = &cloud.labels {
                    w.write_all(&(l[i] as i32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample_cloud() -> PointCloud {
        let mut cloud = PointCloud::from_positions(vec![
            Vector3::new(0.125, -1.5, 3.0),
            Vector3::new(2.0, 0.25, -0.75),
        ]);
        cloud.colors = Some(vec![
            Vector3::new(10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0),
            Vector3::new(0.0, 1.0, 128.0 / 255.0),
        ]);
        cloud.normals = Some(vec![
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        cloud.labels = Some(vec![0, 3]);
        cloud
    }

    #[test]
    fn roundtrip_ascii_and_binary() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sample_cloud();
        for (name, fmt) in [
            ("a.ply", PlyFormat::Ascii),
            ("b.ply", PlyFormat::BinaryLittleEndian),
        ] {
            let path = dir.path().join(name);
            write_ply(&path, &cloud, fmt).unwrap();
            let back = read_ply(&path).unwrap();
            assert_eq!(back.positions, cloud.positions);
            assert_eq!(back.normals, cloud.normals);
            assert_eq!(back.labels, cloud.labels);
            // Colors are quantized to u8 on write.
            let (a, b) = (back.colors.unwrap(), cloud.colors.clone().unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).amax() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn unknown_properties_are_ignored() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property float intensity\nproperty uchar red\nproperty uchar green\n\
                    property uchar blue\nend_header\n\
                    0 0 0 99.5 255 0 0\n1 2 3 1.25 0 255 0\n";
        let mut reader = Cursor::new(text.as_bytes());
        let header = read_header(&mut reader).unwrap();
        assert_eq!(header.elements[0].properties.len(), 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.ply");
        std::fs::write(&path, text).unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.positions[1], Vector3::new(1.0, 2.0, 3.0));
        let colors = cloud.colors.unwrap();
        assert!((colors[0].x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_vertex_elements_are_skipped() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\n\
                    property float x\nproperty float y\nproperty float z\n\
                    element face 2\nproperty list uchar int vertex_indices\nend_header\n\
                    1 2 3\n3 0 0 0\n3 0 0 0\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        std::fs::write(&path, text).unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.len(), 1);
    }

    #[test]
    fn rejects_missing_xyz() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, text).unwrap();
        assert!(read_ply(&path).is_err());
    }
}
