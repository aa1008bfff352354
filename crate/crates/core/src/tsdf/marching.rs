//! Marching cubes with a case table derived from face-sign topology.
//!
//! Each face contributes one iso-segment per run of inside corners (walked
//! counter-clockwise as seen from outside the cube), which separates
//! diagonal inside corners. Segments chain into closed loops that are
//! fan-triangulated. Triangles face towards increasing `phi`.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use super::{CornerCoord, TsdfField};
use crate::geom::Vec3;
use crate::grid::CORNER_OFFSETS;
use crate::mesh::TriangleMesh;

pub const CASE_TABLE_SIZE: usize = 256;

/// Corners of each cube face, counter-clockwise seen from outside.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

/// Cube edges as `(low corner, axis)`; the high corner is `low | 1 << axis`.
const EDGES: [(usize, usize); 12] = [
    (0, 0),
    (2, 0),
    (4, 0),
    (6, 0),
    (0, 1),
    (1, 1),
    (4, 1),
    (5, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

fn edge_id(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    EDGES
        .iter()
        .position(|&(c, ax)| c == lo && ax == axis)
        .expect("cube edge")
}

/// Triangles (as edge ids) for every inside-corner mask.
pub(crate) fn case_table() -> &'static [Vec<[usize; 3]>; CASE_TABLE_SIZE] {
    static TABLE: OnceLock<[Vec<[usize; 3]>; CASE_TABLE_SIZE]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(build_case))
}

fn build_case(mask: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| mask >> c & 1 == 1;
    // next[e] = edge the iso-line runs to after entering at e
    let mut next = [usize::MAX; 12];
    for face in FACES {
        let crossing = |i: usize| (face[i], face[(i + 1) % 4]);
        let mut entries = Vec::new();
        let mut exits = Vec::new();
        for i in 0..4 {
            let (a, b) = crossing(i);
            if !inside(a) && inside(b) {
                entries.push(i);
            } else if inside(a) && !inside(b) {
                exits.push(i);
            }
        }
        for &en in &entries {
            // first exit after the entry going round the face
            let ex = (1..=4)
                .map(|k| (en + k) % 4)
                .find(|i| exits.contains(i))
                .expect("runs alternate");
            let (a, b) = crossing(en);
            let (c, d) = crossing(ex);
            next[edge_id(a, b)] = edge_id(c, d);
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut ring = vec![start];
        seen[start] = true;
        let mut e = next[start];
        while e != start {
            seen[e] = true;
            ring.push(e);
            e = next[e];
        }
        for k in 1..ring.len() - 1 {
            tris.push([ring[0], ring[k], ring[k + 1]]);
        }
    }
    tris
}

type EdgeKey = (CornerCoord, u8);

/// Axis slot marking a vertex that sits exactly on a lattice corner.
const CORNER_KEY: u8 = 3;

/// Extracts the zero level set of the observed part of a field.
///
/// Only cells whose eight corners are all observed are polygonized.
/// Vertices are shared across cells through their global lattice edge (or
/// corner, when a sample is exactly zero), so the result is watertight
/// wherever the observed region is. Triangles collapsed by corner welding
/// are dropped.
pub fn extract_mesh(field: &TsdfField) -> TriangleMesh {
    let table = case_table();
    let m = field.max_coord();
    let coords = field.coords();
    let samples = field.samples();
    let cells: Vec<Vec<([EdgeKey; 3], [Vec3; 3])>> = coords
        .par_iter()
        .map(|c| {
            if c.iter().any(|v| *v >= m) {
                return Vec::new();
            }
            let mut phi = [0.0f64; 8];
            let mut corner = [[0u32; 3]; 8];
            for (j, o) in CORNER_OFFSETS.iter().enumerate() {
                let cc = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                let Some(i) = field.index_of(&cc) else {
                    return Vec::new();
                };
                if !samples[i].is_observed() {
                    return Vec::new();
                }
                phi[j] = samples[i].phi;
                corner[j] = cc;
            }
            let mask = (0..8).fold(0usize, |acc, j| acc | ((phi[j] < 0.0) as usize) << j);
            let tris = &table[mask];
            if tris.is_empty() {
                return Vec::new();
            }
            let vertex = |e: usize| -> (EdgeKey, Vec3) {
                let (lo, axis) = EDGES[e];
                let hi = lo | 1 << axis;
                let (pa, pb) = (field.position(&corner[lo]), field.position(&corner[hi]));
                // a zero sample welds every vertex at that corner
                if phi[lo] == 0.0 {
                    return ((corner[lo], CORNER_KEY), pa);
                }
                if phi[hi] == 0.0 {
                    return ((corner[hi], CORNER_KEY), pb);
                }
                let t = phi[lo] / (phi[lo] - phi[hi]);
                ((corner[lo], axis as u8), pa + (pb - pa) * t)
            };
            tris.iter()
                .filter_map(|t| {
                    let (k0, p0) = vertex(t[0]);
                    let (k1, p1) = vertex(t[1]);
                    let (k2, p2) = vertex(t[2]);
                    (k0 != k1 && k1 != k2 && k0 != k2).then_some(([k0, k1, k2], [p0, p1, p2]))
                })
                .collect()
        })
        .collect();

    let mut ids: HashMap<EdgeKey, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for cell in cells {
        for (keys, pts) in cell {
            let mut tri = [0u32; 3];
            for k in 0..3 {
                tri[k] = *ids.entry(keys[k]).or_insert_with(|| {
                    vertices.push(pts[k]);
                    (vertices.len() - 1) as u32
                });
            }
            triangles.push(tri);
        }
    }
    TriangleMesh::new(vertices, triangles).expect("indices are in range")
}
