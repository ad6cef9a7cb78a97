//! Binary little-endian PLY in the standard 3DGS attribute layout.
//!
//! Required vertex properties: `x y z`, `f_dc_0..2`, `f_rest_*` (0, 9, 24 or
//! 45 of them), `opacity`, `scale_0..2`, `rot_0..3`. Extra scalar properties
//! are skipped. `f_rest` is channel-major: `f_rest_j` holds channel
//! `j / (B-1)` of basis function `1 + j % (B-1)`.

use std::collections::HashMap;

use thiserror::Error;

use super::sh::degree_for_basis;
use super::GaussianScene;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("missing attribute `{name}` (header ends at byte {offset})")]
    MissingAttribute { name: String, offset: usize },
    #[error("attribute `{name}` has unsupported type `{ty}` at byte {offset}")]
    UnsupportedType { name: String, ty: String, offset: usize },
    #[error("truncated payload: vertex {vertex}, attribute `{name}` at byte {offset}")]
    Truncated { vertex: usize, name: String, offset: usize },
    #[error("vertex {index}: quaternion has zero norm (attribute `rot_0` at byte {offset})")]
    ZeroQuaternion { index: usize, offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
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
}

struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

struct Header {
    vertex_count: usize,
    properties: Vec<Property>,
    stride: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut properties = Vec::new();
    let mut stride = 0usize;
    loop {
        let start = pos;
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(PlyError::MalformedHeader {
                offset: start,
                reason: "missing end_header".into(),
            });
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| PlyError::MalformedHeader { offset: start, reason: "non-ASCII header".into() })?
            .trim_end_matches('\r');
        pos += nl + 1;
        let bad = |reason: &str| PlyError::MalformedHeader { offset: start, reason: reason.to_string() };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if line_no == 0 {
            if line != "ply" {
                return Err(bad("missing `ply` magic"));
            }
            line_no += 1;
            continue;
        }
        line_no += 1;
        match tokens.first().copied() {
            Some("format") => {
                if tokens.get(1) != Some(&"binary_little_endian") {
                    return Err(bad("only binary_little_endian is supported"));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                if tokens.len() != 3 {
                    return Err(bad("element line needs a name and a count"));
                }
                if vertex_count.is_some() && !in_vertex {
                    // elements after vertex are ignored
                    continue;
                }
                if in_vertex {
                    in_vertex = false;
                    continue;
                }
                if tokens[1] != "vertex" {
                    return Err(bad("vertex must be the first element"));
                }
                let n = tokens[2].parse::<usize>().map_err(|_| bad("invalid vertex count"))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                if tokens.get(1) == Some(&"list") {
                    return Err(bad("list properties are not supported on vertices"));
                }
                if tokens.len() != 3 {
                    return Err(bad("property line needs a type and a name"));
                }
                let ty = ScalarType::parse(tokens[1]).ok_or_else(|| bad("unknown property type"))?;
                properties.push(Property { name: tokens[2].to_string(), ty, offset: stride });
                stride += ty.size();
            }
            Some("end_header") => break,
            Some(other) => return Err(bad(&format!("unexpected keyword `{other}`"))),
        }
    }
    let vertex_count = vertex_count.ok_or(PlyError::MalformedHeader {
        offset: pos,
        reason: "no vertex element".into(),
    })?;
    Ok(Header { vertex_count, properties, stride, data_start: pos })
}

fn read_scalar(bytes: &[u8], ty: ScalarType) -> f64 {
    match ty {
        ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        _ => unreachable!("required attributes are float-typed"),
    }
}

/// Parses a 3DGS PLY. Quaternions farther than 1e-6 from unit norm are
/// renormalized; zero quaternions are rejected.
pub fn load_ply(bytes: &[u8]) -> Result<GaussianScene, PlyError> {
    let header = parse_header(bytes)?;
    let by_name: HashMap<&str, &Property> =
        header.properties.iter().map(|p| (p.name.as_str(), p)).collect();

    let rest_count = (0..)
        .take_while(|j| by_name.contains_key(format!("f_rest_{j}").as_str()))
        .count();
    let basis = rest_count / 3 + 1;
    if rest_count % 3 != 0 || degree_for_basis(basis).is_none() {
        return Err(PlyError::MissingAttribute {
            name: format!("f_rest_{rest_count}"),
            offset: header.data_start,
        });
    }

    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..rest_count).map(|j| format!("f_rest_{j}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].map(String::from),
    );
    let mut fields = Vec::with_capacity(names.len());
    for name in &names {
        let p = by_name.get(name.as_str()).ok_or_else(|| PlyError::MissingAttribute {
            name: name.clone(),
            offset: header.data_start,
        })?;
        if !matches!(p.ty, ScalarType::F32 | ScalarType::F64) {
            return Err(PlyError::UnsupportedType {
                name: name.clone(),
                ty: format!("{:?}", p.ty),
                offset: header.data_start,
            });
        }
        fields.push(*p);
    }

    let n = header.vertex_count;
    let available = bytes.len() - header.data_start;
    if available < n * header.stride {
        let vertex = available / header.stride.max(1);
        let within = available - vertex * header.stride;
        let prop = header
            .properties
            .iter()
            .find(|p| p.offset + p.ty.size() > within)
            .expect("stride covers all properties");
        return Err(PlyError::Truncated {
            vertex,
            name: prop.name.clone(),
            offset: header.data_start + vertex * header.stride + prop.offset,
        });
    }

    let mut scene = GaussianScene::empty(basis);
    let mut values = vec![0.0; fields.len()];
    let mut sh = vec![0.0; basis * 3];
    for v in 0..n {
        let row = &bytes[header.data_start + v * header.stride..];
        for (slot, p) in values.iter_mut().zip(&fields) {
            *slot = read_scalar(&row[p.offset..], p.ty);
        }
        for ch in 0..3 {
            sh[ch] = values[3 + ch];
            for k in 1..basis {
                sh[k * 3 + ch] = values[6 + ch * (basis - 1) + (k - 1)];
            }
        }
        let o = 6 + rest_count;
        scene.push(
            [values[0], values[1], values[2]],
            [values[o + 4], values[o + 5], values[o + 6], values[o + 7]],
            [values[o + 1], values[o + 2], values[o + 3]],
            values[o],
            &sh,
        );
    }
    scene.normalize_rotations().map_err(|e| match e {
        super::SceneError::ZeroQuaternion { index } => PlyError::ZeroQuaternion {
            index,
            offset: header.data_start + index * header.stride + by_name["rot_0"].offset,
        },
        _ => unreachable!(),
    })?;
    Ok(scene)
}

/// Writes the scene as float32 binary PLY with the canonical property order.
pub fn save_ply(scene: &GaussianScene) -> Vec<u8> {
    let basis = scene.sh_basis;
    let rest = (basis - 1) * 3;
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("element vertex {}\n", scene.len());
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..rest).map(|j| format!("f_rest_{j}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].map(String::from),
    );
    for name in &names {
        header += &format!("property float {name}\n");
    }
    header += "end_header\n";

    let mut out = header.into_bytes();
    out.reserve(scene.len() * names.len() * 4);
    let put = |v: f64, out: &mut Vec<u8>| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..scene.len() {
        let sh = scene.sh_of(i);
        for v in scene.positions[i] {
            put(v, &mut out);
        }
        for ch in 0..3 {
            put(sh[ch], &mut out);
        }
        for ch in 0..3 {
            for k in 1..basis {
                put(sh[k * 3 + ch], &mut out);
            }
        }
        put(scene.opacity_logits[i], &mut out);
        for v in scene.log_scales[i] {
            put(v, &mut out);
        }
        for v in scene.rotations[i] {
            put(v, &mut out);
        }
    }
    out
}
