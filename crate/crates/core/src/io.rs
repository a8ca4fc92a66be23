//! Mesh, mask and JSON file I/O. Writes go through a temporary file in the
//! target directory and are renamed into place.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};
use crate::render::BinaryImage;

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Loads an OBJ or PLY mesh, chosen by extension. Vertex order is preserved
/// and normals are kept when the file has one per vertex.
pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("obj") => read_obj(path),
        Some("ply") => read_ply(path),
        _ => Err(Error::parse(path, "mesh files must end in .obj or .ply")),
    }
}

fn read_obj(path: &Path) -> Result<Mesh> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    // normal index referenced by each vertex, when consistent
    let mut vertex_normal: Vec<Option<usize>> = Vec::new();
    let mut normals_consistent = true;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let at = |msg: &str| Error::parse(path, format!("line {}: {msg}", lineno + 1));
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| at("bad vertex"))?;
                if c.len() != 3 {
                    return Err(at("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
                vertex_normal.push(None);
            }
            Some("vn") => {
                let c: Vec<f64> = tok.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| at("bad normal"))?;
                if c.len() != 3 {
                    return Err(at("normal needs three coordinates"));
                }
                normals.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for t in tok {
                    let mut parts = t.split('/');
                    let vi = resolve_obj_index(parts.next().unwrap_or(""), vertices.len()).ok_or_else(|| at("bad face index"))?;
                    let ni = parts.nth(1).filter(|s| !s.is_empty());
                    if let Some(ni) = ni {
                        let ni = resolve_obj_index(ni, normals.len()).ok_or_else(|| at("bad normal index"))?;
                        match vertex_normal[vi] {
                            None => vertex_normal[vi] = Some(ni),
                            Some(prev) if prev != ni => normals_consistent = false,
                            _ => {}
                        }
                    }
                    poly.push(vi);
                }
                if poly.len() < 3 {
                    return Err(at("face needs at least three vertices"));
                }
                for k in 1..poly.len() - 1 {
                    faces.push([poly[0], poly[k], poly[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut mesh = Mesh::new(vertices, faces).map_err(|e| Error::parse(path, e.to_string()))?;
    // per-vertex normals: either indexed one-to-one by faces or listed in vertex order
    let per_vertex = if normals_consistent && vertex_normal.iter().all(Option::is_some) && !vertex_normal.is_empty() {
        Some(vertex_normal.iter().map(|n| normals[n.unwrap()]).collect::<Vec<_>>())
    } else if normals.len() == mesh.vertices.len() && vertex_normal.iter().all(Option::is_none) {
        Some(normals)
    } else {
        None
    };
    if let Some(n) = per_vertex {
        let n = n.iter().map(|v| v.normalize()).collect();
        mesh = mesh.with_normals(n).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    Ok(mesh)
}

/// 1-based or negative OBJ index into a list of `len` items.
fn resolve_obj_index(s: &str, len: usize) -> Option<usize> {
    let i: i64 = s.parse().ok()?;
    let idx = if i > 0 { i - 1 } else { len as i64 + i };
    (idx >= 0 && (idx as usize) < len).then_some(idx as usize)
}

/// OBJ text with `v`, `vn` (when present) and 1-based `f` lines.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            s.push_str(&format!("vn {} {} {}\n", n.x, n.y, n.z));
        }
        for f in &mesh.faces {
            s.push_str(&format!("f {0}//{0} {1}//{1} {2}//{2}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
    } else {
        for f in &mesh.faces {
            s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
    }
    s
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    write_atomic(path, obj_string(mesh).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar { name: String, ty: String },
    List { count: String, item: String, name: String },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

/// Reads `vertex` (x, y, z and optional nx, ny, nz) and `face`
/// (`vertex_indices` or `vertex_index`) elements of an ascii or binary PLY.
fn read_ply(path: &Path) -> Result<Mesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |m: String| Error::parse(path, m);
    let mut reader = &bytes[..];
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        let n = BufRead::read_line(&mut reader, &mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(err("missing end_header".into()));
        }
        let line = line.trim().to_string();
        if line == "end_header" {
            break;
        }
        header.push(line);
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(err("not a PLY file".into()));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in &header[1..] {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    "binary_big_endian" => PlyFormat::BinaryBe,
                    other => return Err(err(format!("unknown format {other}"))),
                })
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(format!("bad element count in {line:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, name] => elements
                .last_mut()
                .ok_or_else(|| err("property before element".into()))?
                .props
                .push(PlyProperty::List {
                    count: count.to_string(),
                    item: item.to_string(),
                    name: name.to_string(),
                }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| err("property before element".into()))?
                .props
                .push(PlyProperty::Scalar {
                    name: name.to_string(),
                    ty: ty.to_string(),
                }),
            _ => {}
        }
    }
    let format = format.ok_or_else(|| err("missing format line".into()))?;
    let mut values = PlyValues::new(format, reader);
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for row in 0..el.count {
            let mut xyz = [f64::NAN; 3];
            let mut nrm = [f64::NAN; 3];
            for p in &el.props {
                match p {
                    PlyProperty::Scalar { name, ty } => {
                        let v = values.next(ty).ok_or_else(|| err(format!("{} {row}: truncated", el.name)))?;
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            "nx" => nrm[0] = v,
                            "ny" => nrm[1] = v,
                            "nz" => nrm[2] = v,
                            _ => {}
                        }
                    }
                    PlyProperty::List { count, item, name } => {
                        let n = values.next(count).ok_or_else(|| err(format!("{} {row}: truncated", el.name)))? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(values.next(item).ok_or_else(|| err(format!("{} {row}: truncated", el.name)))? as usize);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if idx.len() < 3 {
                                return Err(err(format!("face {row} has fewer than three vertices")));
                            }
                            for k in 1..idx.len() - 1 {
                                faces.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                if xyz.iter().any(|c| c.is_nan()) {
                    return Err(err(format!("vertex {row} lacks x, y or z")));
                }
                vertices.push(Vec3::from(xyz));
                if nrm.iter().all(|c| !c.is_nan()) {
                    normals.push(Vec3::from(nrm).normalize());
                }
            }
        }
    }
    let mut mesh = Mesh::new(vertices, faces).map_err(|e| err(e.to_string()))?;
    if !normals.is_empty() && normals.len() == mesh.vertices.len() {
        mesh = mesh.with_normals(normals).map_err(|e| err(e.to_string()))?;
    }
    Ok(mesh)
}

struct PlyValues<'a> {
    format: PlyFormat,
    data: &'a [u8],
    tokens: Option<std::vec::IntoIter<&'a str>>,
}

impl<'a> PlyValues<'a> {
    fn new(format: PlyFormat, data: &'a [u8]) -> Self {
        let tokens = (format == PlyFormat::Ascii)
            .then(|| std::str::from_utf8(data).ok().map(|s| s.split_whitespace().collect::<Vec<_>>().into_iter()))
            .flatten();
        Self { format, data, tokens }
    }

    fn next(&mut self, ty: &str) -> Option<f64> {
        if self.format == PlyFormat::Ascii {
            return self.tokens.as_mut()?.next()?.parse().ok();
        }
        let size = match ty {
            "char" | "int8" | "uchar" | "uint8" => 1,
            "short" | "int16" | "ushort" | "uint16" => 2,
            "int" | "int32" | "uint" | "uint32" | "float" | "float32" => 4,
            "double" | "float64" => 8,
            _ => return None,
        };
        let mut buf = [0u8; 8];
        self.data.read_exact(&mut buf[..size]).ok()?;
        let le = self.format == PlyFormat::BinaryLe;
        macro_rules! get {
            ($t:ty, $n:expr) => {{
                let b: [u8; $n] = buf[..$n].try_into().ok()?;
                (if le { <$t>::from_le_bytes(b) } else { <$t>::from_be_bytes(b) }) as f64
            }};
        }
        Some(match ty {
            "char" | "int8" => get!(i8, 1),
            "uchar" | "uint8" => get!(u8, 1),
            "short" | "int16" => get!(i16, 2),
            "ushort" | "uint16" => get!(u16, 2),
            "int" | "int32" => get!(i32, 4),
            "uint" | "uint32" => get!(u32, 4),
            "float" | "float32" => get!(f32, 4),
            _ => get!(f64, 8),
        })
    }
}

/// Reads an 8-bit PNG as a binary mask: a pixel is set when its first
/// channel is at least 128. Palette and low-bit-depth images are expanded.
pub fn read_mask(path: &Path) -> Result<BinaryImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::parse(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::parse(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::parse(path, e.to_string()))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width, info.height);
    let mut img = BinaryImage::new(w, h);
    for y in 0..h {
        let row = &buf[y as usize * info.line_size..];
        for x in 0..w {
            img.set(x, y, row[x as usize * channels] >= 128);
        }
    }
    Ok(img)
}

/// 8-bit grayscale PNG bytes with values 0 and 255.
pub fn mask_png(mask: &BinaryImage) -> Result<Vec<u8>> {
    gray_png(mask.width, mask.height, &mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect::<Vec<_>>())
}

pub fn write_mask(path: &Path, mask: &BinaryImage) -> Result<()> {
    write_atomic(path, &mask_png(mask)?)
}

fn gray_png(w: u32, h: u32, pixels: &[u8]) -> Result<Vec<u8>> {
    encode_png(w, h, png::ColorType::Grayscale, pixels)
}

/// 8-bit RGB PNG bytes.
pub fn rgb_png(w: u32, h: u32, pixels: &[u8]) -> Result<Vec<u8>> {
    encode_png(w, h, png::ColorType::Rgb, pixels)
}

fn encode_png(w: u32, h: u32, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
        writer.write_image_data(pixels).map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> Mesh {
        Mesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let mut m = tetra().with_vertex_normals();
        m.vertices[1].x = 0.1 + 0.2;
        write_obj(&p, &m).unwrap();
        let back = read_mesh(&p).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.faces, m.faces);
        let (a, b) = (back.normals.unwrap(), m.normals.unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-15);
        }
    }

    #[test]
    fn obj_keeps_unreferenced_vertices_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.obj");
        fs::write(&p, "# points\nv 3 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 4 2 -2\n").unwrap();
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.vertices[0].x, 3.0);
        assert_eq!(m.faces, vec![[3, 1, 2]]);
        assert!(m.normals.is_none());
        fs::write(&p, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(read_mesh(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn obj_quads_are_fanned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        fs::write(&p, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n").unwrap();
        assert_eq!(read_mesh(&p).unwrap().faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn ply_ascii_and_binary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
        )
        .unwrap();
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);

        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n".to_vec();
        for v in [[0.5f64, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.25]] {
            for c in v {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        bytes.push(3);
        for i in [2u32, 1, 0] {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.vertices[2], Vec3::new(0.0, 1.0, 0.25));
        assert_eq!(m.faces, vec![[2, 1, 0]]);
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_mesh(&p).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut m = BinaryImage::new(7, 5);
        m.set(0, 0, true);
        m.set(6, 4, true);
        m.set(3, 2, true);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        assert_eq!(mask_png(&m).unwrap(), mask_png(&m).unwrap());
    }

    #[test]
    fn unknown_mesh_extension() {
        assert!(read_mesh(Path::new("x.stl")).is_err());
        assert!(matches!(read_mesh(Path::new("/nonexistent/x.obj")), Err(Error::Io { .. })));
    }
}
