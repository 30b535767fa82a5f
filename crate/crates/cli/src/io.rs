//! On-disk formats: camera files, PFM depth maps, PLY clouds, pair lists,
//! PNG images and the scene bundle layout built from them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use epiflow_core::fusion::PointCloud;
use epiflow_core::geometry::{CameraView, Intrinsics, Pose};
use epiflow_core::raster::{DepthMap, Image};
use epiflow_core::synthdata::Scene;
use epiflow_core::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Rotation rows may deviate from orthonormal by this much.
pub const ORTHONORMAL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFile {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// Trailing numeric lines (depth-range metadata), counted and dropped.
    pub ignored_trailing: usize,
}

fn malformed(line: usize, msg: impl Into<String>) -> Error {
    Error::MalformedCameraFile { line, msg: msg.into() }
}

fn numbers(line: usize, text: &str, expect: usize) -> Result<Vec<f64>> {
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| malformed(line, format!("not a number: {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expect {
        return Err(malformed(line, format!("expected {expect} numbers, found {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(malformed(line, "non-finite value"));
    }
    Ok(vals)
}

/// Parses `extrinsic` + 4x4 world-to-camera, `intrinsic` + 3x3, then any
/// number of trailing numeric lines, which are never interpreted.
pub fn parse_camera_file(text: &str) -> Result<CameraFile> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| malformed(text.lines().count() + 1, format!("missing {what}")));
    let (n, l) = next("extrinsic header")?;
    if l != "extrinsic" {
        return Err(malformed(n, format!("expected \"extrinsic\", found {l:?}")));
    }
    let mut ext = [[0.0; 4]; 4];
    let mut ext_lines = [0; 4];
    for (row, at) in ext.iter_mut().zip(&mut ext_lines) {
        let (n, l) = next("extrinsic row")?;
        row.copy_from_slice(&numbers(n, l, 4)?);
        *at = n;
    }
    let (n, l) = next("intrinsic header")?;
    if l != "intrinsic" {
        return Err(malformed(n, format!("expected \"intrinsic\", found {l:?}")));
    }
    let mut int = [[0.0; 3]; 3];
    let mut last = n;
    for row in &mut int {
        let (n, l) = next("intrinsic row")?;
        row.copy_from_slice(&numbers(n, l, 3)?);
        last = n;
    }
    let mut ignored_trailing = 0;
    for (n, l) in lines {
        let ok = l.split_whitespace().all(|t| t.parse::<f64>().is_ok());
        if !ok {
            return Err(malformed(n, format!("unexpected trailing content {l:?}")));
        }
        ignored_trailing += 1;
    }
    if ext[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(malformed(ext_lines[3], "extrinsic bottom row must be 0 0 0 1"));
    }
    let r = Matrix3::from_fn(|i, j| ext[i][j]);
    let t = Vector3::new(ext[0][3], ext[1][3], ext[2][3]);
    let pose = Pose::from_approx(r, t, ORTHONORMAL_TOL).map_err(|e| malformed(ext_lines[0], e.to_string()))?;
    if int[1][0] != 0.0 || int[2] != [0.0, 0.0, 1.0] || int[0][1] != 0.0 {
        return Err(malformed(last, "intrinsic matrix must be upper triangular without skew, last row 0 0 1"));
    }
    let intrinsics = Intrinsics::new(int[0][0], int[1][1], int[0][2], int[1][2]).map_err(|e| malformed(last, e.to_string()))?;
    Ok(CameraFile {
        pose,
        intrinsics,
        ignored_trailing,
    })
}

pub fn write_camera_file(pose: &Pose, k: &Intrinsics) -> String {
    let mut s = String::from("extrinsic\n");
    let (r, t) = (pose.rotation(), pose.translation());
    for i in 0..3 {
        let _ = writeln!(s, "{:e} {:e} {:e} {:e}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
    }
    s.push_str("0 0 0 1\n\nintrinsic\n");
    let m = k.matrix();
    for i in 0..3 {
        let _ = writeln!(s, "{:e} {:e} {:e}", m[(i, 0)], m[(i, 1)], m[(i, 2)]);
    }
    s
}

fn bad_header(offset: usize, msg: impl Into<String>) -> Error {
    Error::MalformedHeader { offset, msg: msg.into() }
}

/// Reads one whitespace-terminated header token at or after `*pos`;
/// returns its offset and text.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<(usize, &'a str)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad_header(start, "unexpected end of header"));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| bad_header(start, "header is not ASCII"))?;
    Ok((start, tok))
}

/// Single-channel PFM; rows are stored bottom to top. Invalid pixels are
/// written as 0 and read back as invalid.
pub fn write_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            let v = depth.get(x, y).unwrap_or(0.0) as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let mut pos = 0;
    let (_, magic) = header_token(bytes, &mut pos)?;
    if magic != "Pf" {
        return Err(bad_header(0, format!("expected single-channel \"Pf\", found {magic:?}")));
    }
    let mut dim = |what: &str| -> Result<usize> {
        let (at, tok) = header_token(bytes, &mut pos)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| bad_header(at, format!("bad {what} {tok:?}")))
    };
    let (w, h) = (dim("width")?, dim("height")?);
    let (at, tok) = header_token(bytes, &mut pos)?;
    let scale: f64 = tok.parse().map_err(|_| bad_header(at, "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad_header(at, "scale must be non-zero"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad_header(pos, "missing header terminator"));
    }
    pos += 1;
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad_header(pos, "size overflow"))?;
    if bytes.len() - pos < need {
        return Err(bad_header(bytes.len(), format!("payload truncated: {} of {need} bytes", bytes.len() - pos)));
    }
    if bytes.len() - pos > need {
        return Err(bad_header(pos + need, "trailing bytes after payload"));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for (k, chunk) in bytes[pos..].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) } as f64;
        let (x, row) = (k % w, k / w);
        let i = (h - 1 - row) * w + x;
        if v.is_finite() && v > 0.0 {
            values[i] = v;
            mask[i] = true;
        }
    }
    DepthMap::new(w, h, values, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut head = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.len()
    );
    if cloud.colors.is_some() {
        head.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let color = cloud.colors.as_ref().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{:e} {:e} {:e}", p.x, p.y, p.z);
                if let Some(c) = color {
                    let _ = write!(line, " {} {} {}", c[0], c[1], c[2]);
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = color {
                    out.extend_from_slice(&c);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "float" | "float32" => Some(Self::F32),
            "double" | "float64" => Some(Self::F64),
            "uchar" | "uint8" => Some(Self::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }
}

/// Reads the vertex element of an ascii or binary little-endian PLY with
/// `x y z` and optional `red green blue` properties.
pub fn read_ply(bytes: &[u8]) -> Result<PointCloud> {
    let end = b"end_header\n";
    let header_end = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| bad_header(0, "missing end_header"))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad_header(0, "header is not ASCII"))?;
    let mut offset = 0;
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    for (i, line) in header.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] if i == 0 => {}
            _ if i == 0 => return Err(bad_header(0, "missing ply magic")),
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(bad_header(offset, format!("unsupported format {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["element", name, n] => {
                if count.is_some() {
                    return Err(bad_header(offset, "only a single vertex element is supported"));
                }
                in_vertex = *name == "vertex";
                if !in_vertex {
                    return Err(bad_header(offset, format!("unsupported element {name}")));
                }
                count = Some(n.parse::<usize>().map_err(|_| bad_header(offset, "bad vertex count"))?);
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad_header(offset, format!("unsupported type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => return Err(bad_header(offset, format!("unexpected header line {line:?}"))),
        }
        offset += line.len() + 1;
    }
    let format = format.ok_or_else(|| bad_header(0, "missing format line"))?;
    let count = count.ok_or_else(|| bad_header(0, "missing vertex element"))?;
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let xyz = [find("x"), find("y"), find("z")];
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(bad_header(0, "vertex needs x, y and z"));
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    let body = &bytes[header_end..];
    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad_header(header_end, "payload is not ASCII"))?;
            let mut at = header_end;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                if rows.len() == count {
                    return Err(bad_header(at, "more vertices than declared"));
                }
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad_header(at, format!("bad value {t:?}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != props.len() {
                    return Err(bad_header(at, "wrong number of vertex values"));
                }
                rows.push(vals);
                at += line.len() + 1;
            }
            if rows.len() != count {
                return Err(bad_header(bytes.len(), format!("payload truncated: {} of {count} vertices", rows.len())));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let need = stride * count;
            if body.len() < need {
                return Err(bad_header(bytes.len(), format!("payload truncated: {} of {need} bytes", body.len())));
            }
            if body.len() > need {
                return Err(bad_header(header_end + need, "trailing bytes after payload"));
            }
            for chunk in body.chunks_exact(stride.max(1)).take(count) {
                let mut at = 0;
                let mut vals = Vec::with_capacity(props.len());
                for (_, s) in &props {
                    let b = &chunk[at..at + s.size()];
                    vals.push(match s {
                        Scalar::F32 => f32::from_le_bytes(b.try_into().expect("sized")) as f64,
                        Scalar::F64 => f64::from_le_bytes(b.try_into().expect("sized")),
                        Scalar::U8 => b[0] as f64,
                    });
                    at += s.size();
                }
                rows.push(vals);
            }
        }
    }
    let points = rows.iter().map(|r| Vector3::new(r[ix], r[iy], r[iz])).collect::<Vec<_>>();
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(bad_header(header_end, "non-finite coordinate"));
    }
    let colors = rgb.map(|[r, g, b]| rows.iter().map(|v| [v[r] as u8, v[g] as u8, v[b] as u8]).collect());
    Ok(PointCloud { points, colors })
}

/// `(reference, sources)` tuples of a pair list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList(pub Vec<(usize, Vec<usize>)>);

/// First line: count; then per entry a reference id line and a line with
/// the source count followed by `(id, score)` pairs. Scores are ignored.
pub fn parse_pair_file(text: &str) -> Result<PairList> {
    let bad = |msg: String| Error::InvalidInput(format!("pair file: {msg}"));
    let mut toks = text.split_whitespace();
    let mut next = |what: &str| toks.next().ok_or_else(|| bad(format!("missing {what}")));
    let n: usize = next("count")?.parse().map_err(|_| bad("bad count".into()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r: usize = next("reference id")?.parse().map_err(|_| bad("bad reference id".into()))?;
        let k: usize = next("source count")?.parse().map_err(|_| bad("bad source count".into()))?;
        let mut src = Vec::with_capacity(k);
        for _ in 0..k {
            src.push(next("source id")?.parse().map_err(|_| bad("bad source id".into()))?);
            next("score")?.parse::<f64>().map_err(|_| bad("bad score".into()))?;
        }
        out.push((r, src));
    }
    Ok(PairList(out))
}

pub fn write_pair_file(pairs: &PairList) -> String {
    let mut s = format!("{}\n", pairs.0.len());
    for (r, src) in &pairs.0 {
        let _ = write!(s, "{r}\n{}", src.len());
        for id in src {
            let _ = write!(s, " {id} 1.0");
        }
        s.push('\n');
    }
    s
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Views, pairing and optional ground truth of one scene directory:
/// `images/NNNNNNNN.png`, `cams/NNNNNNNN_cam.txt`, `depths/NNNNNNNN.pfm`,
/// `pair.txt`, `gt_cloud.ply`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub views: Vec<CameraView>,
    pub pairs: PairList,
    pub gt_depths: Option<Vec<DepthMap>>,
    pub gt_cloud: Option<PointCloud>,
    /// Camera files that carried trailing depth-range lines.
    pub ignored_metadata: usize,
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:08}.png"))
}

pub fn camera_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("cams").join(format!("{i:08}_cam.txt"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("depths").join(format!("{i:08}.pfm"))
}

impl Bundle {
    /// Every view referenced with all other views as sources.
    pub fn from_scene(scene: &Scene) -> Self {
        let n = scene.views.len();
        Self {
            views: scene.views.clone(),
            pairs: PairList((0..n).map(|r| (r, (0..n).filter(|&s| s != r).collect())).collect()),
            gt_depths: Some(scene.gt.depths.clone()),
            gt_cloud: Some(PointCloud::new(scene.gt.cloud.clone())),
            ignored_metadata: 0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "cams", "depths"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        for (i, v) in self.views.iter().enumerate() {
            write_png(&image_path(dir, i), &v.image)?;
            fs::write(camera_path(dir, i), write_camera_file(&v.world_to_camera, &v.intrinsics))?;
        }
        if let Some(depths) = &self.gt_depths {
            for (i, d) in depths.iter().enumerate() {
                fs::write(depth_path(dir, i), write_pfm(d))?;
            }
        }
        fs::write(dir.join("pair.txt"), write_pair_file(&self.pairs))?;
        if let Some(cloud) = &self.gt_cloud {
            fs::write(dir.join("gt_cloud.ply"), write_ply(cloud, PlyFormat::BinaryLittleEndian))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let pairs = parse_pair_file(&fs::read_to_string(dir.join("pair.txt"))?)?;
        let n = pairs
            .0
            .iter()
            .flat_map(|(r, s)| std::iter::once(*r).chain(s.iter().copied()))
            .max()
            .map_or(0, |m| m + 1);
        let mut views = Vec::with_capacity(n);
        let mut ignored = 0;
        for i in 0..n {
            let cam_path = camera_path(dir, i);
            let cam = parse_camera_file(&fs::read_to_string(&cam_path)?).map_err(|e| match e {
                Error::MalformedCameraFile { line, msg } => Error::MalformedCameraFile {
                    line,
                    msg: format!("{}: {msg}", cam_path.display()),
                },
                other => other,
            })?;
            ignored += (cam.ignored_trailing > 0) as usize;
            views.push(CameraView::new(cam.intrinsics, cam.pose, read_png(&image_path(dir, i))?)?);
        }
        let gt_depths = if (0..n).all(|i| depth_path(dir, i).exists()) && n > 0 {
            Some((0..n).map(|i| read_pfm(&fs::read(depth_path(dir, i))?)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let cloud_path = dir.join("gt_cloud.ply");
        let gt_cloud = if cloud_path.exists() { Some(read_ply(&fs::read(cloud_path)?)?) } else { None };
        Ok(Self {
            views,
            pairs,
            gt_depths,
            gt_cloud,
            ignored_metadata: ignored,
        })
    }

    /// Reference view followed by its sources.
    pub fn views_for(&self, entry: usize) -> Result<Vec<CameraView>> {
        let (r, src) = self
            .pairs
            .0
            .get(entry)
            .ok_or_else(|| Error::InvalidInput(format!("no pair entry {entry}")))?;
        std::iter::once(r)
            .chain(src)
            .map(|&i| {
                self.views
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("pair list names missing view {i}")))
            })
            .collect()
    }
}
