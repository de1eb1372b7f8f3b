//! On-disk formats: PLY clouds and meshes, PFM depth, PPM color, corner
//! lists and JSON documents.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::calibration::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{color_to_u8, DepthMap, PointCloud, RgbImage, TriangleMesh, Vec2, Vec3};

pub const CORNERS_HEADER: &str = "pnp-corners v1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn u8_to_color(c: [u8; 3]) -> Vec3 {
    Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0
}

/// Byte cursor that reports positions in parse errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Cursor { bytes, pos: 0, path: path.display().to_string() }
    }

    fn err(&self, expected: impl Into<String>) -> Error {
        Error::parse(self.path.clone(), self.pos, expected)
    }

    /// Next `\n`-terminated line without the terminator.
    fn line(&mut self, expected: &str) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| self.err(expected))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| self.err(expected))?;
        self.pos += end + 1;
        Ok(text.trim_end_matches('\r'))
    }

    /// Next whitespace-delimited token (PNM headers), consuming exactly one trailing whitespace byte.
    fn token(&mut self, expected: &str) -> Result<&'a str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos || self.pos >= self.bytes.len() {
            self.pos = start;
            return Err(self.err(expected));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| self.err(expected))?;
        self.pos += 1;
        Ok(tok)
    }

    fn take(&mut self, n: usize, expected: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(expected));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
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
    properties: Vec<Property>,
}

/// Contents of a PLY file restricted to what the pipeline uses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub positions: Vec<Vec3>,
    pub colors: Option<Vec<Vec3>>,
    pub normals: Option<Vec<Vec3>>,
    pub faces: Vec<[usize; 3]>,
}

pub fn encode_ply(data: &PlyData) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("element vertex {}\n", data.positions.len());
    header += "property double x\nproperty double y\nproperty double z\n";
    if data.colors.is_some() {
        header += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    if data.normals.is_some() {
        header += "property double nx\nproperty double ny\nproperty double nz\n";
    }
    if !data.faces.is_empty() {
        header += &format!("element face {}\nproperty list uchar int vertex_indices\n", data.faces.len());
    }
    header += "end_header\n";
    let mut out = header.into_bytes();
    for (i, p) in data.positions.iter().enumerate() {
        for x in p.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(c) = &data.colors {
            out.extend_from_slice(&color_to_u8(&c[i]));
        }
        if let Some(n) = &data.normals {
            for x in n[i].iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    for f in &data.faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<PlyData> {
    let mut cur = Cursor::new(bytes, path);
    if cur.line("`ply` magic")? != "ply" {
        cur.pos = 0;
        return Err(cur.err("`ply` magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    loop {
        let start = cur.pos;
        let line = cur.line("header line or `end_header`")?;
        let words: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| Error::parse(path.display().to_string(), start, what.to_string());
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", ..] => return Err(bad("format binary_little_endian 1.0")),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", len, item, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("element before property"))?;
                let len = Scalar::parse(len).ok_or_else(|| bad("list length type"))?;
                let item = Scalar::parse(item).ok_or_else(|| bad("list item type"))?;
                el.properties.push(Property::List(name.to_string(), len, item));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("element before property"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| bad("property type"))?;
                el.properties.push(Property::Scalar(name.to_string(), ty));
            }
            _ => return Err(bad("header line")),
        }
    }
    if !format_seen {
        return Err(cur.err("format line before end_header"));
    }

    let mut data = PlyData::default();
    for el in &elements {
        let names: Vec<&str> = el
            .properties
            .iter()
            .map(|p| match p {
                Property::Scalar(n, _) | Property::List(n, _, _) => n.as_str(),
            })
            .collect();
        let has = |n: &str| names.contains(&n);
        let is_vertex = el.name == "vertex";
        if is_vertex {
            if !(has("x") && has("y") && has("z")) {
                return Err(cur.err("vertex element with x, y, z"));
            }
            if has("red") && has("green") && has("blue") {
                data.colors = Some(Vec::with_capacity(el.count));
            }
            if has("nx") && has("ny") && has("nz") {
                data.normals = Some(Vec::with_capacity(el.count));
            }
        }
        for _ in 0..el.count {
            let mut pos = Vec3::zeros();
            let mut rgb = Vec3::zeros();
            let mut nrm = Vec3::zeros();
            for prop in &el.properties {
                match prop {
                    Property::Scalar(name, ty) => {
                        let v = ty.read(cur.take(ty.size(), &format!("{name} value"))?);
                        if is_vertex {
                            match name.as_str() {
                                "x" => pos.x = v,
                                "y" => pos.y = v,
                                "z" => pos.z = v,
                                "red" => rgb.x = v,
                                "green" => rgb.y = v,
                                "blue" => rgb.z = v,
                                "nx" => nrm.x = v,
                                "ny" => nrm.y = v,
                                "nz" => nrm.z = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, len_ty, item_ty) => {
                        let at = cur.pos;
                        let n = len_ty.read(cur.take(len_ty.size(), "list length")?) as usize;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            items.push(item_ty.read(cur.take(item_ty.size(), "list item")?));
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if n != 3 || items.iter().any(|&i| i < 0.0) {
                                return Err(Error::parse(path.display().to_string(), at, "triangle with 3 non-negative indices"));
                            }
                            data.faces.push([items[0] as usize, items[1] as usize, items[2] as usize]);
                        }
                    }
                }
            }
            if is_vertex {
                data.positions.push(pos);
                if let Some(c) = data.colors.as_mut() {
                    c.push(rgb / 255.0);
                }
                if let Some(n) = data.normals.as_mut() {
                    n.push(nrm);
                }
            }
        }
    }
    if data.faces.iter().flatten().any(|&i| i >= data.positions.len()) {
        return Err(cur.err("face indices within the vertex count"));
    }
    Ok(data)
}

pub fn write_ply_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    cloud.validate()?;
    let data = PlyData { positions: cloud.positions.clone(), colors: cloud.colors.clone(), normals: cloud.normals.clone(), faces: Vec::new() };
    write_bytes(path, &encode_ply(&data))
}

pub fn read_ply_cloud(path: &Path) -> Result<PointCloud> {
    let d = decode_ply(&read_bytes(path)?, path)?;
    Ok(PointCloud { positions: d.positions, colors: d.colors, normals: d.normals })
}

pub fn write_ply_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    mesh.validate()?;
    let data = PlyData { positions: mesh.vertices.clone(), colors: mesh.vertex_colors.clone(), normals: None, faces: mesh.triangles.clone() };
    write_bytes(path, &encode_ply(&data))
}

pub fn read_ply_mesh(path: &Path) -> Result<TriangleMesh> {
    let d = decode_ply(&read_bytes(path)?, path)?;
    let mut mesh = TriangleMesh::new(d.positions, d.faces)?;
    mesh.vertex_colors = d.colors;
    Ok(mesh)
}

/// Grayscale PFM, little-endian, rows stored bottom to top. Invalid pixels are −1.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for v in (0..depth.height).rev() {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            let x: f32 = if d > 0.0 { d as f32 } else { -1.0 };
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let mut cur = Cursor::new(bytes, path);
    if cur.token("`Pf` magic")? != "Pf" {
        cur.pos = 0;
        return Err(cur.err("`Pf` magic (grayscale PFM)"));
    }
    let at = cur.pos;
    let width: usize = cur.token("width")?.parse().map_err(|_| Error::parse(path.display().to_string(), at, "integer width"))?;
    let at = cur.pos;
    let height: usize = cur.token("height")?.parse().map_err(|_| Error::parse(path.display().to_string(), at, "integer height"))?;
    let at = cur.pos;
    let scale: f64 = cur.token("scale")?.parse().map_err(|_| Error::parse(path.display().to_string(), at, "scale value"))?;
    if scale >= 0.0 {
        return Err(Error::parse(path.display().to_string(), at, "negative scale (little-endian)"));
    }
    let raw = cur.take(width * height * 4, &format!("{} float32 samples", width * height))?;
    let mut values = vec![0.0; width * height];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let (row, u) = (k / width, k % width);
        let v = height - 1 - row;
        values[v * width + u] = if x > 0.0 && x.is_finite() { x } else { -1.0 };
    }
    DepthMap::new(width, height, values)
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_bytes(path)?, path)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut cur = Cursor::new(bytes, path);
    if cur.token("`P6` magic")? != "P6" {
        cur.pos = 0;
        return Err(cur.err("`P6` magic"));
    }
    let mut fields = [0usize; 3];
    for (f, what) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        let at = cur.pos;
        *f = cur.token(what)?.parse().map_err(|_| Error::parse(path.display().to_string(), at, format!("integer {what}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(cur.err("maxval 255"));
    }
    let raw = cur.take(width * height * 3, &format!("{} RGB pixels", width * height))?;
    Ok(RgbImage { width, height, pixels: raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path)?, path)
}

pub fn encode_corners(set: &CorrespondenceSet) -> String {
    let mut out = format!("{CORNERS_HEADER}\n");
    for (x, uv) in set.object_points.iter().zip(&set.image_points) {
        out += &format!("{} {} {} {} {}\n", x.x, x.y, x.z, uv.x, uv.y);
    }
    out
}

pub fn decode_corners(text: &str, path: &Path) -> Result<CorrespondenceSet> {
    let name = path.display().to_string();
    let mut offset = 0;
    let mut object_points = Vec::new();
    let mut image_points = Vec::new();
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim();
        if n == 0 {
            if body != CORNERS_HEADER {
                return Err(Error::parse(name, 0, format!("header `{CORNERS_HEADER}`")));
            }
        } else if !body.is_empty() && !body.starts_with('#') {
            let vals: Vec<f64> = body.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| {
                Error::parse(name.clone(), offset, "five numbers `X Y Z u v`")
            })?;
            if vals.len() != 5 {
                return Err(Error::parse(name, offset, "five numbers `X Y Z u v`"));
            }
            object_points.push(Vec3::new(vals[0], vals[1], vals[2]));
            image_points.push(Vec2::new(vals[3], vals[4]));
        }
        offset += line.len();
    }
    if text.is_empty() {
        return Err(Error::parse(name, 0, format!("header `{CORNERS_HEADER}`")));
    }
    CorrespondenceSet::new(object_points, image_points)
}

pub fn write_corners(path: &Path, set: &CorrespondenceSet) -> Result<()> {
    write_bytes(path, encode_corners(set).as_bytes())
}

pub fn read_corners(path: &Path) -> Result<CorrespondenceSet> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(path.display().to_string(), e.valid_up_to(), "UTF-8 text"))?;
    decode_corners(text, path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use tempfile::tempdir;

    fn p(name: &str) -> std::path::PathBuf {
        std::path::PathBuf::from(name)
    }

    proptest! {
        #[test]
        fn ply_cloud_roundtrip(
            raw in prop::collection::vec((prop::array::uniform3(-1e4f64..1e4), prop::array::uniform3(0u8..=255), prop::array::uniform3(-1.0f64..1.0)), 0..60),
        ) {
            let cloud = PointCloud {
                positions: raw.iter().map(|r| Vec3::from(r.0)).collect(),
                colors: Some(raw.iter().map(|r| u8_to_color(r.1)).collect()),
                normals: Some(raw.iter().map(|r| Vec3::from(r.2)).collect()),
            };
            let data = PlyData { positions: cloud.positions.clone(), colors: cloud.colors.clone(), normals: cloud.normals.clone(), faces: vec![] };
            let back = decode_ply(&encode_ply(&data), &p("x.ply")).unwrap();
            prop_assert_eq!(back, data);
        }

        #[test]
        fn pfm_roundtrip(w in 1usize..12, h in 1usize..12, seed in 0u32..1000) {
            let values: Vec<f64> = (0..w * h)
                .map(|i| if (i as u32 + seed) % 5 == 0 { -1.0 } else { ((i as u32 * 7919 + seed) % 100_000) as f32 as f64 * 0.0123f32 as f64 })
                .map(|v| if v > 0.0 { v as f32 as f64 } else { -1.0 })
                .collect();
            let d = DepthMap::new(w, h, values).unwrap();
            prop_assert_eq!(decode_pfm(&encode_pfm(&d), &p("x.pfm")).unwrap(), d);
        }
    }

    #[test]
    fn mesh_roundtrip_on_disk() {
        let dir = tempdir().unwrap();
        let mut mesh = TriangleMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()], vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]).unwrap();
        mesh.vertex_colors = Some(vec![u8_to_color([1, 2, 3]), u8_to_color([255, 0, 9]), u8_to_color([7, 7, 7]), u8_to_color([0, 0, 0])]);
        let path = dir.path().join("a/b/mesh.ply");
        write_ply_mesh(&path, &mesh).unwrap();
        assert_eq!(read_ply_mesh(&path).unwrap(), mesh);
    }

    #[test]
    fn truncated_ply_header_reports_offset() {
        let bytes = encode_ply(&PlyData { positions: vec![Vec3::x()], ..PlyData::default() });
        let cut = &bytes[..30];
        match decode_ply(cut, &p("cut.ply")) {
            Err(Error::Parse { offset, expected, .. }) => {
                assert!(offset <= 30, "{offset}");
                assert!(expected.contains("header"), "{expected}");
            }
            other => panic!("{other:?}"),
        }
        let body_cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_ply(body_cut, &p("cut.ply")), Err(Error::Parse { .. })));
        assert!(matches!(decode_ply(b"plx\n", &p("bad.ply")), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn foreign_ply_types() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment made elsewhere\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar alpha\nend_header\n".to_vec();
        for v in [1.5f32, -2.0, 3.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(9);
        let d = decode_ply(&bytes, &p("f.ply")).unwrap();
        assert_eq!(d.positions, vec![Vec3::new(1.5, -2.0, 3.25)]);
        assert!(d.colors.is_none() && d.normals.is_none());
        let ascii = b"ply\nformat ascii 1.0\nend_header\n";
        assert!(matches!(decode_ply(ascii, &p("a.ply")), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn ppm_roundtrip_and_errors() {
        let mut img = RgbImage::new(5, 3);
        img.set(4, 2, [1, 2, 3]);
        img.set(0, 1, [250, 0, 128]);
        assert_eq!(decode_ppm(&encode_ppm(&img), &p("i.ppm")).unwrap(), img);
        let bytes = encode_ppm(&img);
        assert!(matches!(decode_ppm(&bytes[..bytes.len() - 1], &p("i.ppm")), Err(Error::Parse { .. })));
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n", &p("i.ppm")), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn pfm_orientation_and_invalid() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, -1.0, 4.0]).unwrap();
        let bytes = encode_pfm(&d);
        let header = b"Pf\n2 2\n-1.0\n".len();
        // bottom row first
        assert_eq!(f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()), -1.0);
        assert_eq!(decode_pfm(&bytes, &p("d.pfm")).unwrap(), d);
        assert!(matches!(decode_pfm(b"PF\n1 1\n-1.0\n", &p("d.pfm")), Err(Error::Parse { .. })));
        assert!(matches!(decode_pfm(b"Pf\n1 1\n1.0\n0000", &p("d.pfm")), Err(Error::Parse { .. })));
    }

    #[test]
    fn corners_roundtrip_and_errors() {
        let set = CorrespondenceSet::new(
            vec![Vec3::new(0.1, -20.0, 0.0), Vec3::new(1.0 / 3.0, 2.0, 0.0)],
            vec![Vec2::new(320.123456789, 1e-7), Vec2::new(5.0, 6.5)],
        )
        .unwrap();
        let text = encode_corners(&set);
        assert!(text.starts_with("pnp-corners v1\n"));
        let back = decode_corners(&text, &p("c.txt")).unwrap();
        assert_eq!(back.object_points, set.object_points);
        assert_eq!(back.image_points, set.image_points);
        let bad = "pnp-corners v1\n1 2 3 4 5\n1 2 3 x 5\n";
        assert!(matches!(decode_corners(bad, &p("c.txt")), Err(Error::Parse { offset: 25, .. })));
        assert!(matches!(decode_corners("corners\n", &p("c.txt")), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempdir().unwrap();
        let t = crate::geometry::RigidTransform::from_rotation_vector(Vec3::new(0.1, 0.2, 0.3)).with_translation(Vec3::new(1.0, 2.0, 3.0));
        let path = dir.path().join("t.json");
        write_json(&path, &t).unwrap();
        let back: crate::geometry::RigidTransform = read_json(&path).unwrap();
        assert_eq!(back, t);
        assert!(matches!(read_json::<crate::geometry::RigidTransform>(&dir.path().join("none.json")), Err(Error::Io { .. })));
    }
}
