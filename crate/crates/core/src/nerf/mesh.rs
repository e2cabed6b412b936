//! Marching-cubes isosurface extraction and simple mesh utilities.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mc_tables::{EDGE_TABLE, TRI_TABLE};
use super::{query_density, NerfDecoder, Triplane};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

// Cube corner offsets and edge endpoints in the usual marching-cubes numbering.
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

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Number of connected components over shared vertices (faces only).
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for k in 1..3 {
                let a = find(&mut parent, f[0]);
                let b = find(&mut parent, f[k]);
                if a != b {
                    parent[a] = b;
                }
            }
        }
        let mut roots: Vec<usize> = self
            .faces
            .iter()
            .map(|f| find(&mut parent, f[0]))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        if self.faces.is_empty() {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += self.area(f);
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let f = cdf.partition_point(|c| *c < u).min(self.faces.len() - 1);
                let [a, b, c] = self.triangle(f);
                let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + (b - a) * r1 + (c - a) * r2
            })
            .collect()
    }

    /// ASCII OBJ with 1-indexed faces.
    pub fn write_obj(&self, out: &mut impl Write) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z)?;
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_obj(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Isosurface `density == threshold` of a field sampled on a `res^3` lattice
/// spanning `[-1, 1]^3`. Vertices on shared lattice edges are welded.
pub fn extract_isosurface(
    density: impl Fn(&[Vec3]) -> Result<Vec<f64>>,
    res: usize,
    threshold: f64,
) -> Result<TriangleMesh> {
    if res < 2 {
        return Err(Error::Config("marching cubes needs a lattice of at least 2^3".into()));
    }
    let step = 2.0 / (res - 1) as f64;
    let coord = |i: usize| -1.0 + i as f64 * step;
    let index = |x: usize, y: usize, z: usize| (z * res + y) * res + x;
    let mut lattice = Vec::with_capacity(res * res * res);
    for z in 0..res {
        for y in 0..res {
            for x in 0..res {
                lattice.push(Vec3::new(coord(x), coord(y), coord(z)));
            }
        }
    }
    let values = density(&lattice)?;
    if values.len() != lattice.len() {
        return Err(Error::Shape("density field returned wrong number of values".into()));
    }

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for z in 0..res - 1 {
        for y in 0..res - 1 {
            for x in 0..res - 1 {
                let corner_idx: [usize; 8] =
                    CORNERS.map(|c| index(x + c[0], y + c[1], z + c[2]));
                let mut case = 0usize;
                for (bit, &ci) in corner_idx.iter().enumerate() {
                    if values[ci] > threshold {
                        case |= 1 << bit;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                for (e, [a, b]) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (ia, ib) = (corner_idx[*a], corner_idx[*b]);
                    let key = (ia.min(ib), ia.max(ib));
                    local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (va, vb) = (values[ia], values[ib]);
                        let s = ((threshold - va) / (vb - va)).clamp(0.0, 1.0);
                        mesh.vertices.push(lattice[ia] + (lattice[ib] - lattice[ia]) * s);
                        mesh.vertices.len() - 1
                    });
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    mesh.faces.push([
                        local[tri[0] as usize],
                        local[tri[1] as usize],
                        local[tri[2] as usize],
                    ]);
                }
            }
        }
    }
    Ok(mesh)
}

/// Mesh of the decoded density isosurface on a `grid_resolution^3` lattice.
pub fn extract_mesh(
    triplane: &Triplane,
    decoder: &NerfDecoder,
    grid_resolution: usize,
    density_threshold: f64,
) -> Result<TriangleMesh> {
    if grid_resolution < 8 {
        return Err(Error::Config(format!(
            "grid resolution must be at least 8, got {grid_resolution}"
        )));
    }
    extract_isosurface(
        |pts| query_density(triplane, decoder, pts),
        grid_resolution,
        density_threshold,
    )
}
