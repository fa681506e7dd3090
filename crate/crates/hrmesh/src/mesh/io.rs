//! Mesh text format.
//!
//! Line 1: `N_v N_e`. Then `N_v` vertex lines `x y class component` and
//! `N_e` element lines `i j k parent`. Classes: 0 interior, 1 edge,
//! 2 corner; `component` and `parent` use -1 for "none". Floats are written
//! with 17 significant digits so round-trips are bit-exact.

use super::{BoundaryClass, Mesh};
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

impl Mesh {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n_vertices(), self.n_elements());
        for (v, p) in self.coords.iter().enumerate() {
            let (class, comp) = match self.boundary_class[v] {
                BoundaryClass::Interior => (0, -1i64),
                BoundaryClass::Edge(c) => (1, c as i64),
                BoundaryClass::Corner => (2, -1),
            };
            let _ = writeln!(s, "{:.16e} {:.16e} {} {}", p[0], p[1], class, comp);
        }
        for (e, t) in self.tris.iter().enumerate() {
            let parent = self.lineage[e].map(|p| p as i64).unwrap_or(-1);
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], parent);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty mesh file".into()))?;
        let mut it = header.split_whitespace();
        let n_v: usize = parse(it.next(), "N_v")?;
        let n_e: usize = parse(it.next(), "N_e")?;
        let mut coords = Vec::with_capacity(n_v);
        let mut classes = Vec::with_capacity(n_v);
        for k in 0..n_v {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing vertex {k}")))?;
            let mut it = line.split_whitespace();
            let x: f64 = parse(it.next(), "x")?;
            let y: f64 = parse(it.next(), "y")?;
            let class: i64 = parse(it.next(), "class")?;
            let comp: i64 = parse(it.next(), "component")?;
            coords.push([x, y]);
            classes.push(match class {
                0 => BoundaryClass::Interior,
                1 => BoundaryClass::Edge(comp as usize),
                2 => BoundaryClass::Corner,
                c => return Err(Error::Format(format!("unknown boundary class {c}"))),
            });
        }
        let mut tris = Vec::with_capacity(n_e);
        let mut lineage = Vec::with_capacity(n_e);
        for k in 0..n_e {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing element {k}")))?;
            let mut it = line.split_whitespace();
            let i: usize = parse(it.next(), "i")?;
            let j: usize = parse(it.next(), "j")?;
            let l: usize = parse(it.next(), "k")?;
            let parent: i64 = parse(it.next(), "parent")?;
            tris.push([i, j, l]);
            lineage.push(if parent < 0 { None } else { Some(parent as usize) });
        }
        let mut mesh = Mesh::from_raw(coords, tris)?;
        // Component lines and numbering are canonical: re-derive them from
        // geometry and check the stored tags agree.
        mesh.reclassify_boundary()?;
        if mesh.boundary_class != classes {
            return Err(Error::Format("stored boundary tags disagree with mesh geometry".into()));
        }
        mesh.lineage = lineage;
        Ok(mesh)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path)?;
        Mesh::from_text(&text)
    }
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::Format(format!("missing field {what}")))?
        .parse()
        .map_err(|_| Error::Format(format!("unparseable field {what}")))
}
