//! Binary little-endian PLY with `x y z` as float32 and `red green blue` as
//! uchar.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::PointCloud;

const PROPERTIES: [(&str, &str); 6] =
    [("float", "x"), ("float", "y"), ("float", "z"), ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")];

pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.points.len()).into_bytes();
    for (ty, name) in PROPERTIES {
        out.extend_from_slice(format!("property {ty} {name}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(c);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<PointCloud> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| Error::Format { offset: start, message: "unterminated header".into() })?;
        *pos = end + 1;
        line_no += 1;
        String::from_utf8(bytes[start..end].to_vec())
            .map(|s| s.trim_end_matches('\r').to_string())
            .map_err(|_| Error::Format { offset: start, message: "header is not UTF-8".into() })
    };
    let bad = |offset: usize, message: String| Error::Format { offset, message };

    if next_line(&mut pos)? != "ply" {
        return Err(bad(0, "missing \"ply\" magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let at = pos;
        let line = next_line(&mut pos)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(bad(at, format!("unsupported format {other:?}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad(at, format!("bad vertex count {n:?}")))?)
            }
            ["element", name, ..] => return Err(bad(at, format!("unsupported element {name:?}"))),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => return Err(bad(at, format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad(pos, "missing vertex element".into()))?;
    let expected: Vec<(String, String)> = PROPERTIES.iter().map(|(t, n)| (t.to_string(), n.to_string())).collect();
    if props != expected {
        return Err(bad(pos, format!("unsupported vertex layout {props:?}")));
    }
    let payload = &bytes[pos..];
    if payload.len() < 15 * count {
        return Err(bad(bytes.len(), format!("truncated payload: need {} bytes, found {}", 15 * count, payload.len())));
    }
    let mut cloud = PointCloud::default();
    for rec in payload[..15 * count].chunks_exact(15) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        cloud.push([f(0), f(4), f(8)], [rec[12], rec[13], rec[14]], 0);
    }
    Ok(cloud)
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<()> {
    super::write_file(path, &encode(cloud))
}

pub fn read(path: &Path) -> Result<PointCloud> {
    decode(&std::fs::read(path)?)
}
