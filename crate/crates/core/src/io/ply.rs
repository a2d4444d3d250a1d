//! PLY subset: ascii and binary little-endian, a `vertex` element with
//! numeric `x`, `y`, `z` and an optional integer `label`. Other properties
//! and elements are skipped.

use std::fs;
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::PlyFormat(format!("unknown property type {other:?}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes(b[..4].try_into().expect("4 bytes"))),
            Scalar::U32 => f64::from(u32::from_le_bytes(b[..4].try_into().expect("4 bytes"))),
            Scalar::F32 => f64::from(f32::from_le_bytes(b[..4].try_into().expect("4 bytes"))),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    body_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut at = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[at..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::PlyFormat("header has no end_header line".into()))?;
        let line = std::str::from_utf8(&bytes[at..at + end])
            .map_err(|_| Error::PlyFormat("header is not utf-8".into()))?
            .trim_end_matches('\r')
            .trim()
            .to_string();
        at += end + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(Error::PlyFormat("missing 'ply' magic line".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in &lines[1..] {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, version] => {
                if *version != "1.0" {
                    return Err(Error::PlyUnsupported(format!("format version {version}")));
                }
                encoding = Some(match *kind {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => return Err(Error::PlyUnsupported("binary_big_endian".into())),
                    other => return Err(Error::PlyFormat(format!("unknown format {other:?}"))),
                });
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::PlyFormat(format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => elements
                .last_mut()
                .ok_or_else(|| Error::PlyFormat("property before any element".into()))?
                .props
                .push(Property::List(Scalar::parse(ct)?, Scalar::parse(it)?)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::PlyFormat("property before any element".into()))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(ty)?)),
            _ => return Err(Error::PlyFormat(format!("unrecognised header line {line:?}"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| Error::PlyFormat("missing format line".into()))?,
        elements,
        body_start: at,
    })
}

/// Sequential value source over the body.
trait Values {
    fn next(&mut self, ty: Scalar) -> Result<f64>;
}

struct AsciiValues<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
}

impl Values for AsciiValues<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64> {
        let tok = self
            .tokens
            .next()
            .ok_or_else(|| Error::PlyFormat("body ends before the declared element count".into()))?;
        if ty.is_integer() {
            tok.parse::<i64>()
                .map(|v| v as f64)
                .map_err(|_| Error::PlyFormat(format!("bad integer {tok:?}")))
        } else {
            tok.parse::<f64>().map_err(|_| Error::PlyFormat(format!("bad number {tok:?}")))
        }
    }
}

struct BinaryValues<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Values for BinaryValues<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64> {
        let end = self.at + ty.size();
        let b = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| Error::PlyFormat("body ends before the declared element count".into()))?;
        self.at = end;
        Ok(ty.read_le(b))
    }
}

fn read_body(header: &Header, values: &mut dyn Values) -> Result<PointCloud> {
    let mut coords = None;
    let mut labels = None;
    for el in &header.elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                for p in &el.props {
                    match p {
                        Property::Scalar(_, ty) => {
                            values.next(*ty)?;
                        }
                        Property::List(ct, it) => {
                            let k = values.next(*ct)?;
                            for _ in 0..k as usize {
                                values.next(*it)?;
                            }
                        }
                    }
                }
            }
            continue;
        }
        let find = |name: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, Property::Scalar(n, _) if n == name))
        };
        let (x, y, z) = match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(Error::PlyFormat("vertex element lacks x, y or z".into())),
        };
        let label = find("label");
        if let Some(Property::Scalar(_, ty)) = label.map(|l| &el.props[l]) {
            if !ty.is_integer() {
                return Err(Error::PlyFormat("label property must be an integer type".into()));
            }
        }
        let mut pts = Vec::with_capacity(el.count);
        let mut lab = Vec::with_capacity(if label.is_some() { el.count } else { 0 });
        let mut row = vec![0.0; el.props.len()];
        for _ in 0..el.count {
            for (k, p) in el.props.iter().enumerate() {
                row[k] = match p {
                    Property::Scalar(_, ty) => values.next(*ty)?,
                    Property::List(ct, it) => {
                        let n = values.next(*ct)?;
                        for _ in 0..n as usize {
                            values.next(*it)?;
                        }
                        0.0
                    }
                };
            }
            pts.push([row[x] as f32, row[y] as f32, row[z] as f32]);
            if let Some(l) = label {
                if row[l] < 0.0 || row[l] > f64::from(u32::MAX) {
                    return Err(Error::PlyFormat(format!("label {} out of range", row[l])));
                }
                lab.push(row[l] as u32);
            }
        }
        coords = Some(pts);
        labels = label.map(|_| lab);
        break;
    }
    let coords = coords.ok_or_else(|| Error::PlyFormat("no vertex element".into()))?;
    let cloud = PointCloud::new(coords)?;
    match labels {
        Some(l) => cloud.with_labels(l),
        None => Ok(cloud),
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let body = &bytes[header.body_start..];
    match header.encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| Error::PlyFormat("ascii body is not utf-8".into()))?;
            read_body(&header, &mut AsciiValues { tokens: text.split_ascii_whitespace() })
        }
        PlyEncoding::BinaryLittleEndian => read_body(&header, &mut BinaryValues { bytes: body, at: 0 }),
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Float `x y z` plus an `int label` when the cloud carries labels.
pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, encoding: PlyEncoding) -> Result<()> {
    let path = path.as_ref();
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    )
    .into_bytes();
    if cloud.labels().is_some() {
        out.extend_from_slice(b"property int label\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in cloud.coords().iter().enumerate() {
        let label = cloud.labels().map(|l| l[i]);
        match encoding {
            PlyEncoding::Ascii => {
                let mut line = format!("{} {} {}", p[0], p[1], p[2]);
                if let Some(l) = label {
                    line.push_str(&format!(" {l}"));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyEncoding::BinaryLittleEndian => {
                for c in p {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                if let Some(l) = label {
                    out.extend_from_slice(&(l as i32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_ascii_vertex() {
        let src = b"ply\nformat ascii 1.0\ncomment hi\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0.5 -1 2\n";
        let c = parse_ply(src).unwrap();
        assert_eq!(c.coords(), &[[0.5, -1.0, 2.0]]);
        assert!(c.labels().is_none());
    }

    #[test]
    fn binary_fixture_with_labels_and_extras() {
        let mut b = b"ply\r\nformat binary_little_endian 1.0\r\nelement vertex 2\r\nproperty double x\r\nproperty float y\r\nproperty float z\r\nproperty uchar red\r\nproperty ushort label\r\nelement face 1\r\nproperty list uchar int vertex_indices\r\nend_header\r\n".to_vec();
        for (x, y, z, r, l) in [(1.0f64, 2.0f32, 3.0f32, 7u8, 4u16), (-1.5, 0.25, 0.0, 9, 65535)] {
            b.extend_from_slice(&x.to_le_bytes());
            b.extend_from_slice(&y.to_le_bytes());
            b.extend_from_slice(&z.to_le_bytes());
            b.push(r);
            b.extend_from_slice(&l.to_le_bytes());
        }
        b.push(3);
        for k in 0i32..3 {
            b.extend_from_slice(&k.to_le_bytes());
        }
        let c = parse_ply(&b).unwrap();
        assert_eq!(c.coords(), &[[1.0, 2.0, 3.0], [-1.5, 0.25, 0.0]]);
        assert_eq!(c.labels().unwrap(), &[4, 65535]);
        b.truncate(b.len() - 20);
        assert_eq!(parse_ply(&b).unwrap_err().code(), "ply_format");
    }

    #[test]
    fn elements_before_vertices_are_skipped() {
        let src = b"ply\nformat ascii 1.0\nelement camera 1\nproperty list uchar float k\nproperty int id\nelement vertex 2\nproperty int label\nproperty float x\nproperty float y\nproperty float z\nend_header\n3 1 2 3 9\n5 0 0 0\n6 1 1 1\n";
        let c = parse_ply(src).unwrap();
        assert_eq!(c.labels().unwrap(), &[5, 6]);
        assert_eq!(c.coords()[1], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejected_variants() {
        let be = b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n";
        assert_eq!(parse_ply(be).unwrap_err().code(), "ply_unsupported");
        let short = b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert_eq!(parse_ply(short).unwrap_err().code(), "ply_format");
        let no_z = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n";
        assert_eq!(parse_ply(no_z).unwrap_err().code(), "ply_format");
        let float_label = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float label\nend_header\n1 2 3 1.5\n";
        assert_eq!(parse_ply(float_label).unwrap_err().code(), "ply_format");
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3], [-4.0, 5.5, 1e-3]])
            .unwrap()
            .with_labels(vec![2, 0])
            .unwrap();
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let p = dir.path().join("c.ply");
            write_ply(&p, &cloud, enc).unwrap();
            assert_eq!(read_ply(&p).unwrap(), cloud);
        }
    }
}
