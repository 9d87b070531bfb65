//! Per-view camera text files.
//!
//! ```text
//! extrinsic
//! r00 r01 r02 t0
//! r10 r11 r12 t1
//! r20 r21 r22 t2
//! 0 0 0 1
//!
//! intrinsic
//! fx 0 cx
//! 0 fy cy
//! 0 0 1
//!
//! d_min d_interval d_count d_max
//! ```
//!
//! Numbers are written in shortest round-trip form, so a record survives
//! write/read unchanged bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthRange};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthLine {
    pub d_min: f64,
    pub interval: f64,
    pub count: usize,
    pub d_max: f64,
}

impl DepthLine {
    pub fn from_range(range: &DepthRange) -> Self {
        Self {
            d_min: range.d_min,
            interval: (range.d_max - range.d_min) / (range.count.max(2) - 1) as f64,
            count: range.count,
            d_max: range.d_max,
        }
    }

    pub fn range(&self) -> Result<DepthRange> {
        DepthRange::new(self.d_min, self.d_max, self.count)
    }
}

/// Raw contents of a camera file.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRecord {
    pub extrinsic: Matrix4<f64>,
    pub intrinsic: Matrix3<f64>,
    pub depth: DepthLine,
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera, range: &DepthRange) -> Self {
        Self { extrinsic: cam.extrinsic(), intrinsic: cam.intrinsics(), depth: DepthLine::from_range(range) }
    }

    /// Builds a validated camera; image extents come from the image itself.
    pub fn camera(&self, width: usize, height: usize) -> Result<Camera> {
        let k = &self.intrinsic;
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::config("intrinsic matrix must be [fx 0 cx; 0 fy cy; 0 0 1]"));
        }
        let e = &self.extrinsic;
        Camera::new(
            k[(0, 0)],
            k[(1, 1)],
            k[(0, 2)],
            k[(1, 2)],
            e.fixed_view::<3, 3>(0, 0).into_owned(),
            Vector3::new(e[(0, 3)], e[(1, 3)], e[(2, 3)]),
            width,
            height,
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("extrinsic\n");
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| self.extrinsic[(r, c)].to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s.push_str("\nintrinsic\n");
        for r in 0..3 {
            let row: Vec<String> = (0..3).map(|c| self.intrinsic[(r, c)].to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let d = &self.depth;
        let _ = writeln!(s, "\n{} {} {} {}", d.d_min, d.interval, d.count, d.d_max);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let last_line = text.lines().count().max(1);
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: last_line,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let keyword = |(n, l): (usize, &str), word: &str| {
            if l == word {
                Ok(())
            } else {
                Err(Error::Parse { line: n, message: format!("expected \"{word}\" block, found {l:?}") })
            }
        };
        let numbers = |(n, l): (usize, &str), count: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: n, message: format!("bad number: {e}") })?;
            if vals.len() != count {
                return Err(Error::Parse {
                    line: n,
                    message: format!("expected {count} numbers, found {}", vals.len()),
                });
            }
            Ok(vals)
        };

        keyword(next("extrinsic")?, "extrinsic")?;
        let mut extrinsic = Matrix4::zeros();
        for r in 0..4 {
            let row = numbers(next("extrinsic row")?, 4)?;
            for (c, v) in row.into_iter().enumerate() {
                extrinsic[(r, c)] = v;
            }
        }
        keyword(next("intrinsic")?, "intrinsic")?;
        let mut intrinsic = Matrix3::zeros();
        for r in 0..3 {
            let row = numbers(next("intrinsic row")?, 3)?;
            for (c, v) in row.into_iter().enumerate() {
                intrinsic[(r, c)] = v;
            }
        }
        let depth_line = next("depth line")?;
        let d = numbers(depth_line, 4)?;
        if d[2] < 0.0 || d[2].fract() != 0.0 {
            return Err(Error::Parse {
                line: depth_line.0,
                message: format!("depth count must be a whole number, got {}", d[2]),
            });
        }
        Ok(Self {
            extrinsic,
            intrinsic,
            depth: DepthLine { d_min: d[0], interval: d[1], count: d[2] as usize, d_max: d[3] },
        })
    }
}

pub fn write(path: &Path, record: &CameraRecord) -> Result<()> {
    super::write_file(path, record.to_text().as_bytes())
}

pub fn read(path: &Path) -> Result<CameraRecord> {
    CameraRecord::parse(&std::fs::read_to_string(path)?)
}
