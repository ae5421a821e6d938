//! Marching-cubes surface extraction from binary masks and OBJ output.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::BinaryMask;
use tables::TRI_TABLE;

const ISO_LEVEL: f64 = 0.5;
const MIN_AREA: f64 = 1e-12;

/// Corner offsets in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each of the 12 cube edges.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    /// Positions in mm.
    pub vertices: Vec<[f64; 3]>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl TriangleMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Uses of each undirected edge.
    pub fn edge_uses(&self) -> HashMap<(usize, usize), usize> {
        let mut uses = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        uses
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        let edges = self.edge_uses().len();
        self.vertices.len() as i64 - edges as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_uses().values().all(|&n| n == 2)
    }

    pub fn triangle_area(&self, t: [usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        let n = cross(sub(b, a), sub(c, a));
        0.5 * dot(n, n).sqrt()
    }

    /// Signed enclosed volume; positive when triangles face outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Indices in range and no zero-area triangles.
    pub fn validate(&self) -> Result<()> {
        for (i, &t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::Format(format!(
                    "triangle {i} references a missing vertex"
                )));
            }
            if self.triangle_area(t) <= MIN_AREA {
                return Err(Error::Format(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }
}

/// Marching cubes over the 0/1 field at iso-level 0.5, after padding the
/// mask with one layer of background so every surface closes. Vertex
/// `(x, y, z)` of the mask grid maps to `(x, y, z) * spacing_mm`.
pub fn extract_surface(mask: &BinaryMask, spacing_mm: f64) -> Result<TriangleMesh> {
    if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing_mm}"
        )));
    }
    let mut mesh = TriangleMesh::default();
    if mask.count() == 0 {
        return Ok(mesh);
    }
    let [nx, ny, nz] = mask.dims();
    // Padded lattice coordinate p holds mask voxel p - 1.
    let inside = |p: [usize; 3]| -> bool {
        (0..3).all(|a| (1..=mask.dims()[a]).contains(&p[a]))
            && mask.get(p[0] - 1, p[1] - 1, p[2] - 1) != 0
    };
    let (px, py) = (nx + 2, ny + 2);
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for z in 0..=nz {
        for y in 0..=ny {
            for x in 0..=nx {
                let corners = CORNERS.map(|o| [x + o[0], y + o[1], z + o[2]]);
                let case = corners
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (i, &c)| acc | (usize::from(inside(c)) << i));
                let row = &TRI_TABLE[case];
                for tri in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                    let ids = [0, 1, 2].map(|k| {
                        let [a, b] = EDGES[tri[k] as usize].map(|c| corners[c]);
                        let lo = if a < b { a } else { b };
                        let axis = (0..3).find(|&i| a[i] != b[i]).expect("edge spans one axis");
                        let key = (lo[0] + px * (lo[1] + py * lo[2]), axis);
                        *edge_vertex.entry(key).or_insert_with(|| {
                            let v = [0, 1, 2].map(|i| {
                                let pa = a[i] as f64;
                                let pb = b[i] as f64;
                                // Binary field: the crossing is always halfway.
                                let t = ISO_LEVEL;
                                (pa + t * (pb - pa) - 1.0) * spacing_mm
                            });
                            mesh.vertices.push(v);
                            mesh.vertices.len() - 1
                        })
                    });
                    // The table winds triangles toward the inside corners.
                    let t = [ids[0], ids[2], ids[1]];
                    if mesh.triangle_area(t) > MIN_AREA {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Wavefront text: `v x y z` lines, then 1-based `f a b c` lines.
pub fn encode_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

/// Reads `v` and triangular `f` records; other records are ignored.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let bad = |n: usize, what: &str| Error::Format(format!("line {}: {what}", n + 1));
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(n, "bad vertex coordinate"))?;
                if c.len() != 3 {
                    return Err(bad(n, "vertex needs 3 coordinates"));
                }
                mesh.vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| p.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(n, "bad face index"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad(n, "face needs 3 one-based indices"));
                }
                mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    if mesh
        .triangles
        .iter()
        .flatten()
        .any(|&i| i >= mesh.vertices.len())
    {
        return Err(Error::Format("face references a missing vertex".into()));
    }
    Ok(mesh)
}

pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    fs::write(path, encode_obj(mesh)).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    parse_obj(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> BinaryMask {
        let mut data = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        BinaryMask::new(dims, data).unwrap()
    }

    #[test]
    fn empty_mask_gives_empty_mesh() {
        let m = extract_surface(&mask([4, 4, 4], |_, _, _| false), 1.0).unwrap();
        assert_eq!((m.vertex_count(), m.triangle_count()), (0, 0));
        assert_eq!(encode_obj(&m), "");
    }

    #[test]
    fn single_voxel_is_an_outward_octahedron() {
        let m = extract_surface(&mask([3, 3, 3], |x, y, z| (x, y, z) == (1, 1, 1)), 2.0).unwrap();
        assert_eq!((m.vertex_count(), m.triangle_count()), (6, 8));
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_watertight());
        m.validate().unwrap();
        // Octahedron with vertices 1 mm from the center: volume 4/3 mm³.
        assert!((m.signed_volume() - 4.0 / 3.0).abs() < 1e-12);
        for v in &m.vertices {
            let d: f64 = v.iter().map(|c| (c - 2.0).abs()).sum();
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn border_voxels_close_through_padding() {
        let m = extract_surface(&mask([2, 2, 2], |_, _, _| true), 1.0).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
        for v in &m.vertices {
            assert!(v.iter().all(|c| (-0.5..=1.5).contains(c)));
        }
    }

    #[test]
    fn solid_torus_has_genus_one() {
        let m = extract_surface(
            &mask([20, 20, 4], |x, y, z| {
                let r = ((x as f64 - 9.5).powi(2) + (y as f64 - 9.5).powi(2)).sqrt();
                (1..3).contains(&z) && (3.0..7.5).contains(&r)
            }),
            1.25,
        )
        .unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 0);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn obj_round_trip() {
        let m = extract_surface(&mask([3, 4, 3], |x, y, _| x + y < 3), 1.25).unwrap();
        let text = encode_obj(&m);
        assert_eq!(parse_obj(&text).unwrap(), m);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
        assert!(parse_obj("v 0 0\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        write_obj(&m, &path).unwrap();
        assert_eq!(read_obj(&path).unwrap(), m);
        assert!(write_obj(&m, &dir.path().join("missing/m.obj")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_masks_are_closed_and_consistent(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = mask([4, 4, 4], |x, y, z| bits[x + 4 * (y + 4 * z)]);
            let mesh = extract_surface(&m, 1.0).unwrap();
            prop_assert!(mesh.is_watertight());
            mesh.validate().unwrap();
            // Consistent orientation: each directed edge appears once.
            let mut directed = std::collections::HashSet::new();
            for t in &mesh.triangles {
                for k in 0..3 {
                    prop_assert!(directed.insert((t[k], t[(k + 1) % 3])));
                }
            }
            let voxels = m.count() as f64;
            prop_assert!(mesh.signed_volume() > 0.0 || voxels == 0.0);
            prop_assert_eq!(extract_surface(&m, 1.0).unwrap(), mesh);
        }
    }
}
