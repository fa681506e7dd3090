//! SVG mesh rendering.
//!
//! Triangles are drawn as polygons over a fixed-size canvas. An optional
//! nodal field fills each element with a linear blue-to-red ramp through its
//! vertex average; the quality mode colors by aspect ratio instead. Inverted
//! elements are always highlighted. Output is deterministic byte-for-byte.

use crate::fem::Field;
use crate::mesh::Mesh;
use crate::{Error, Result};
use std::fmt::Write as _;

#[derive(Debug, Clone, Default)]
pub struct RenderOptions {
    pub field: Option<Field>,
    /// Color elements by aspect ratio instead of the field.
    pub quality: bool,
}

const CANVAS: f64 = 800.0;
const MARGIN: f64 = 20.0;

fn ramp(t: f64) -> (u8, u8, u8) {
    // Blue (cold) to red (hot) through white.
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let s = t / 0.5;
        (lerp(70.0, 245.0, s), lerp(110.0, 245.0, s), lerp(190.0, 245.0, s))
    } else {
        let s = (t - 0.5) / 0.5;
        (lerp(245.0, 200.0, s), lerp(245.0, 60.0, s), lerp(245.0, 40.0, s))
    }
}

fn lerp(a: f64, b: f64, t: f64) -> u8 {
    (a + (b - a) * t).round() as u8
}

/// Renders the mesh to an SVG string.
pub fn render_svg(mesh: &Mesh, options: &RenderOptions) -> Result<String> {
    if let Some(f) = &options.field {
        if f.values.len() != mesh.n_vertices() {
            return Err(Error::Format("field length does not match the mesh".into()));
        }
    }
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in &mesh.coords {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (CANVAS - 2.0 * MARGIN) / span;
    let tx = |p: [f64; 2]| -> (f64, f64) {
        (
            MARGIN + (p[0] - lo[0]) * scale,
            // SVG y grows downward.
            CANVAS - MARGIN - (p[1] - lo[1]) * scale,
        )
    };

    // Per-element scalar for the fill.
    let scalars: Option<Vec<f64>> = if options.quality {
        Some(
            (0..mesh.n_elements())
                .map(|e| mesh.aspect_ratio(e).unwrap_or(f64::MAX).min(10.0))
                .collect(),
        )
    } else {
        options.field.as_ref().map(|f| {
            (0..mesh.n_elements())
                .map(|e| {
                    let t = mesh.tris[e];
                    (f.values[t[0]] + f.values[t[1]] + f.values[t[2]]) / 3.0
                })
                .collect()
        })
    };
    let (smin, smax) = match &scalars {
        Some(s) => {
            let mn = s.iter().cloned().fold(f64::MAX, f64::min);
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            (mn, if mx > mn { mx } else { mn + 1.0 })
        }
        None => (0.0, 1.0),
    };

    let tangled: std::collections::BTreeSet<usize> = mesh.detect_tangled().into_iter().collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{c}\" height=\"{c}\" viewBox=\"0 0 {c} {c}\">",
        c = CANVAS
    );
    for e in 0..mesh.n_elements() {
        let t = mesh.tris[e];
        let pts: Vec<String> = t
            .iter()
            .map(|&v| {
                let (x, y) = tx(mesh.coords[v]);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let fill = if tangled.contains(&e) {
            "#ff00aa".to_string()
        } else {
            match &scalars {
                Some(s) => {
                    let (r, g, b) = ramp((s[e] - smin) / (smax - smin));
                    format!("#{r:02x}{g:02x}{b:02x}")
                }
                None => "#f5f2ec".to_string(),
            }
        };
        let stroke = if tangled.contains(&e) { "#aa0033" } else { "#333333" };
        let _ = writeln!(
            svg,
            "<polygon points=\"{}\" fill=\"{}\" stroke=\"{}\" stroke-width=\"0.8\"/>",
            pts.join(" "),
            fill,
            stroke
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
