//! Triangle meshes: representation, ASCII file I/O, normals and adjacency.
//!
//! Vertex positions are stored flat as `[x0, y0, z0, x1, ...]`. The mesh file
//! format is a small OBJ-style grammar (`v x y z [r g b]` / `f i j k` with
//! 1-based indices); landmark vertex indices live in a sidecar text file with
//! exactly 66 lines. See the book chapter on file formats for the grammar.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const LANDMARK_COUNT: usize = 66;

/// Fallback normal for vertices whose incident faces are all degenerate.
pub const DEGENERATE_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Debug, Clone)]
pub struct Mesh {
    /// Flat vertex positions, length `3 * vertex_count`.
    pub vertices: Vec<f64>,
    /// Triangle vertex indices, consistently oriented (outward normals).
    pub faces: Vec<[u32; 3]>,
    /// Optional per-vertex RGB in `[0, 1]`, length `3 * vertex_count`.
    pub colors: Option<Vec<f64>>,
    /// Landmark vertex indices; empty or exactly 66 entries.
    pub landmarks: Vec<u32>,
    adjacency: Vec<Vec<u32>>,
    edges: Vec<[u32; 2]>,
}

impl Mesh {
    pub fn new(vertices: Vec<f64>, faces: Vec<[u32; 3]>, colors: Option<Vec<f64>>) -> Result<Self> {
        if !vertices.len().is_multiple_of(3) {
            return Err(Error::Dimension(format!(
                "vertex array length {} is not a multiple of 3",
                vertices.len()
            )));
        }
        let n = vertices.len() / 3;
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v as usize >= n {
                    return Err(Error::InvalidInput(format!(
                        "face {fi} references vertex {v} but the mesh has {n} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidInput(format!(
                    "face {fi} repeats a vertex index"
                )));
            }
        }
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(Error::Dimension(format!(
                    "color array length {} does not match vertex array length {}",
                    c.len(),
                    vertices.len()
                )));
            }
        }
        let (adjacency, edges) = build_adjacency(n, &faces);
        Ok(Mesh {
            vertices,
            faces,
            colors,
            landmarks: Vec::new(),
            adjacency,
            edges,
        })
    }

    pub fn with_landmarks(mut self, landmarks: Vec<u32>) -> Result<Self> {
        self.set_landmarks(landmarks)?;
        Ok(self)
    }

    pub fn set_landmarks(&mut self, landmarks: Vec<u32>) -> Result<()> {
        let n = self.vertex_count();
        let mut seen = std::collections::HashSet::new();
        for &l in &landmarks {
            if l as usize >= n {
                return Err(Error::InvalidInput(format!(
                    "landmark index {l} out of range for {n} vertices"
                )));
            }
            if !seen.insert(l) {
                return Err(Error::InvalidInput(format!("duplicate landmark index {l}")));
            }
        }
        self.landmarks = landmarks;
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [
            self.vertices[3 * i],
            self.vertices[3 * i + 1],
            self.vertices[3 * i + 2],
        ]
    }

    /// Sorted 1-ring vertex neighbors of each vertex.
    pub fn adjacency(&self) -> &[Vec<u32>] {
        &self.adjacency
    }

    /// Unique undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[[u32; 2]] {
        &self.edges
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.vertex_count() {
            for c in 0..3 {
                let v = self.vertices[3 * i + c];
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }
}

fn build_adjacency(n: usize, faces: &[[u32; 3]]) -> (Vec<Vec<u32>>, Vec<[u32; 2]>) {
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
    }
    let mut edges = Vec::new();
    for (i, list) in adj.iter_mut().enumerate() {
        list.sort_unstable();
        list.dedup();
        for &j in list.iter() {
            if (i as u32) < j {
                edges.push([i as u32, j]);
            }
        }
    }
    (adj, edges)
}

/// Area-weighted vertex normals at the given positions.
///
/// Degenerate faces contribute a zero vector; vertices whose accumulated
/// normal stays below the length guard get [`DEGENERATE_NORMAL`].
pub fn compute_vertex_normals(mesh: &Mesh, positions: &[f64]) -> Result<Vec<f64>> {
    if positions.len() != mesh.vertices.len() {
        return Err(Error::Dimension(format!(
            "positions length {} does not match mesh ({})",
            positions.len(),
            mesh.vertices.len()
        )));
    }
    let mut accum = vec![0.0f64; positions.len()];
    accumulate_face_normals(&mesh.faces, positions, &mut accum);
    let mut normals = vec![0.0f64; positions.len()];
    for i in 0..mesh.vertex_count() {
        let m = [accum[3 * i], accum[3 * i + 1], accum[3 * i + 2]];
        let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        let n = if len <= NORMAL_LEN_GUARD {
            DEGENERATE_NORMAL
        } else {
            [m[0] / len, m[1] / len, m[2] / len]
        };
        normals[3 * i..3 * i + 3].copy_from_slice(&n);
    }
    Ok(normals)
}

pub(crate) const NORMAL_LEN_GUARD: f64 = 1e-12;

/// Sum of incident face cross products per vertex (the unnormalized normal).
pub(crate) fn accumulate_face_normals(faces: &[[u32; 3]], positions: &[f64], accum: &mut [f64]) {
    accum.fill(0.0);
    for f in faces {
        let [a, b, c] = [f[0] as usize, f[1] as usize, f[2] as usize];
        let pa = &positions[3 * a..3 * a + 3];
        let pb = &positions[3 * b..3 * b + 3];
        let pc = &positions[3 * c..3 * c + 3];
        let e1 = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
        let e2 = [pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]];
        let cross = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        for v in [a, b, c] {
            accum[3 * v] += cross[0];
            accum[3 * v + 1] += cross[1];
            accum[3 * v + 2] += cross[2];
        }
    }
}

/// Load a mesh from the ASCII format described in the book.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text, path)
}

fn parse_mesh(text: &str, path: &Path) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut has_colors: Option<bool> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap();
        let rest: Vec<&str> = it.collect();
        match tag {
            "v" => {
                if rest.len() != 3 && rest.len() != 6 {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("vertex line needs 3 or 6 numbers, got {}", rest.len()),
                    ));
                }
                let nums = parse_floats(&rest, path, lineno)?;
                let with_color = nums.len() == 6;
                match has_colors {
                    None => has_colors = Some(with_color),
                    Some(h) if h != with_color => {
                        return Err(Error::parse(
                            path,
                            lineno,
                            "mixed colored and uncolored vertices",
                        ))
                    }
                    _ => {}
                }
                vertices.extend_from_slice(&nums[..3]);
                if with_color {
                    for &c in &nums[3..6] {
                        if !(0.0..=1.0).contains(&c) {
                            return Err(Error::parse(
                                path,
                                lineno,
                                format!("color component {c} outside [0, 1]"),
                            ));
                        }
                    }
                    colors.extend_from_slice(&nums[3..6]);
                }
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("only triangle faces are supported, got {} indices", rest.len()),
                    ));
                }
                let mut tri = [0u32; 3];
                for (k, tok) in rest.iter().enumerate() {
                    let idx: i64 = tok.parse().map_err(|_| {
                        Error::parse(path, lineno, format!("bad face index `{tok}`"))
                    })?;
                    if idx < 1 {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!("face index {idx} must be >= 1"),
                        ));
                    }
                    tri[k] = (idx - 1) as u32;
                }
                faces.push(tri);
            }
            other => {
                return Err(Error::parse(path, lineno, format!("unknown line tag `{other}`")));
            }
        }
    }
    let n = vertices.len() / 3;
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v as usize >= n {
                return Err(Error::parse(
                    path,
                    // report against end of file; faces hold no line info after parse
                    0,
                    format!("face {fi} references vertex {} but the mesh has {n} vertices", v + 1),
                ));
            }
        }
    }
    let colors = if has_colors == Some(true) { Some(colors) } else { None };
    Mesh::new(vertices, faces, colors)
}

fn parse_floats(tokens: &[&str], path: &Path, lineno: usize) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path, lineno, format!("bad number `{t}`")))
        })
        .collect()
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..mesh.vertex_count() {
        let v = mesh.vertex(i);
        match &mesh.colors {
            Some(c) => out.push_str(&format!(
                "v {} {} {} {} {} {}\n",
                v[0],
                v[1],
                v[2],
                c[3 * i],
                c[3 * i + 1],
                c[3 * i + 2]
            )),
            None => out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2])),
        }
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Load the 66 landmark vertex indices from a sidecar file, one per line.
pub fn load_landmarks(path: impl AsRef<Path>, vertex_count: usize) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let idx: u32 = line
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, format!("bad landmark index `{line}`")))?;
        if idx as usize >= vertex_count {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("landmark index {idx} out of range for {vertex_count} vertices"),
            ));
        }
        out.push(idx);
    }
    if out.len() != LANDMARK_COUNT {
        return Err(Error::InvalidInput(format!(
            "expected {LANDMARK_COUNT} landmark lines in {}, got {}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

pub fn save_landmarks(landmarks: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text: String = landmarks.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
