//! Binary little-endian PLY export.
//!
//! Vertices carry `float x, y, z` and `uchar red, green, blue`. Track files
//! add an `edge` element of `int vertex1, vertex2` joining consecutive
//! positions of each pixel.

use std::io::{self, Write};

use anytime4d_core::geometry::Vec3;

pub fn color_byte(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(out: &mut impl Write, vertices: usize, edges: Option<usize>) -> io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "element vertex {vertices}")?;
    for p in ["x", "y", "z"] {
        writeln!(out, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(out, "property uchar {p}")?;
    }
    if let Some(e) = edges {
        writeln!(out, "element edge {e}")?;
        writeln!(out, "property int vertex1")?;
        writeln!(out, "property int vertex2")?;
    }
    writeln!(out, "end_header")
}

fn vertex(out: &mut impl Write, p: &Vec3, rgb: [u8; 3]) -> io::Result<()> {
    for c in [p.x, p.y, p.z] {
        out.write_all(&(c as f32).to_le_bytes())?;
    }
    out.write_all(&rgb)
}

/// Colored point cloud.
pub fn write_points(out: &mut impl Write, points: &[(Vec3, [u8; 3])]) -> io::Result<()> {
    header(out, points.len(), None)?;
    for (p, c) in points {
        vertex(out, p, *c)?;
    }
    Ok(())
}

/// Polylines: `tracks[k]` lists the positions of one point over time.
pub fn write_tracks(out: &mut impl Write, tracks: &[(Vec<Vec3>, [u8; 3])]) -> io::Result<()> {
    let vertices: usize = tracks.iter().map(|t| t.0.len()).sum();
    let edges: usize = tracks.iter().map(|t| t.0.len().saturating_sub(1)).sum();
    header(out, vertices, Some(edges))?;
    for (pts, c) in tracks {
        for p in pts {
            vertex(out, p, *c)?;
        }
    }
    let mut base = 0i32;
    for (pts, _) in tracks {
        for k in 1..pts.len() as i32 {
            out.write_all(&(base + k - 1).to_le_bytes())?;
            out.write_all(&(base + k).to_le_bytes())?;
        }
        base += pts.len() as i32;
    }
    Ok(())
}

/// Vertex count declared in a PLY header.
pub fn vertex_count(bytes: &[u8]) -> Option<usize> {
    let end = bytes.windows(11).position(|w| w == b"end_header\n")?;
    let text = std::str::from_utf8(&bytes[..end]).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
}
