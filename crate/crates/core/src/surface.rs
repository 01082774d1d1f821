//! Level-set extraction from density volumes and mesh export.
//!
//! 2D volumes (`dims[2] == 1`) use marching squares with the cell-center
//! average deciding saddle cells. 3D volumes split every cube into the six
//! Kuhn tetrahedra around its main diagonal; neighboring cubes then agree
//! on face diagonals, so the piecewise-linear level set is closed wherever
//! the field is below the level on the volume border. Crossing vertices are
//! keyed by lattice edge and shared between cells. Faces are oriented with
//! the normal pointing toward decreasing density.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::DensityVolume;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<[f64; 3]>,
    /// 3D faces.
    pub triangles: Vec<[usize; 3]>,
    /// 2D contour segments, dense side on the left.
    pub segments: Vec<[usize; 2]>,
    pub watertight: bool,
    pub components: usize,
}

impl SurfaceMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty() && self.segments.is_empty()
    }

    /// Signed enclosed volume (3D) or area (2D) of the dense region.
    pub fn enclosed_measure(&self) -> f64 {
        let v = &self.vertices;
        if !self.triangles.is_empty() {
            self.triangles
                .iter()
                .map(|t| dot(&v[t[0]], &cross(&v[t[1]], &v[t[2]])) / 6.0)
                .sum::<f64>()
                .abs()
        } else {
            self.segments
                .iter()
                .map(|s| 0.5 * (v[s[0]][0] * v[s[1]][1] - v[s[1]][0] * v[s[0]][1]))
                .sum::<f64>()
                .abs()
        }
    }

    pub fn triangle_normal(&self, t: &[usize; 3]) -> [f64; 3] {
        let v = &self.vertices;
        let n = cross(&sub(&v[t[1]], &v[t[0]]), &sub(&v[t[2]], &v[t[0]]));
        let len = dot(&n, &n).sqrt();
        if len > 0.0 {
            [n[0] / len, n[1] / len, n[2] / len]
        } else {
            [0.0; 3]
        }
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Shared crossing vertices keyed by the lattice edge they lie on.
struct VertexPool<'a> {
    volume: &'a DensityVolume,
    level: f64,
    nudge: f64,
    keys: HashMap<(usize, usize), usize>,
    vertices: Vec<[f64; 3]>,
}

impl<'a> VertexPool<'a> {
    /// Field value with exact hits on the level moved just above it, so no
    /// crossing lands on a lattice point.
    fn value(&self, flat: usize) -> f64 {
        let v = self.volume.values[flat];
        if v == self.level {
            v + self.nudge
        } else {
            v
        }
    }

    fn coords(&self, flat: usize) -> [usize; 3] {
        let d = self.volume.dims;
        [flat / (d[1] * d[2]), (flat / d[2]) % d[1], flat % d[2]]
    }

    fn crossing(&mut self, a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&i) = self.keys.get(&key) {
            return i;
        }
        let (lo, hi) = key;
        let (va, vb) = (self.value(lo), self.value(hi));
        let t = (self.level - va) / (vb - va);
        let pa = self.volume.point(self.coords(lo)[0], self.coords(lo)[1], self.coords(lo)[2]);
        let pb = self.volume.point(self.coords(hi)[0], self.coords(hi)[1], self.coords(hi)[2]);
        let p = [
            pa[0] + t * (pb[0] - pa[0]),
            pa[1] + t * (pb[1] - pa[1]),
            pa[2] + t * (pb[2] - pa[2]),
        ];
        let i = self.vertices.len();
        self.vertices.push(p);
        self.keys.insert(key, i);
        i
    }
}

/// Extract the `level` set of `volume`. Levels must lie in `(0, 1)`.
pub fn extract_isosurface(volume: &DensityVolume, level: f64) -> Result<SurfaceMesh> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("iso level must lie in (0, 1), got {level}")));
    }
    volume.validate()?;
    let mut pool = VertexPool {
        volume,
        level,
        nudge: 1e-9,
        keys: HashMap::new(),
        vertices: Vec::new(),
    };
    let mut mesh = SurfaceMesh::default();
    if volume.dims[2] == 1 {
        mesh.segments = marching_squares(&mut pool);
    } else {
        mesh.triangles = marching_tetrahedra(&mut pool);
    }
    mesh.vertices = pool.vertices;
    mesh.components = count_components(&mesh);
    mesh.watertight = if mesh.triangles.is_empty() {
        segments_closed(&mesh)
    } else {
        is_watertight(&mesh)
    };
    Ok(mesh)
}

fn marching_squares(pool: &mut VertexPool) -> Vec<[usize; 2]> {
    let d = pool.volume.dims;
    let idx = |i: usize, j: usize| i * d[1] + j;
    let mut segments = Vec::new();
    if d[0] < 2 || d[1] < 2 {
        return segments;
    }
    for i in 0..d[0] - 1 {
        for j in 0..d[1] - 1 {
            // counterclockwise corners
            let c = [idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)];
            let v: Vec<f64> = c.iter().map(|&f| pool.value(f)).collect();
            let inside: Vec<bool> = v.iter().map(|&x| x > pool.level).collect();
            let mask = inside.iter().enumerate().fold(0u8, |m, (k, &b)| m | ((b as u8) << k));
            if mask == 0 || mask == 15 {
                continue;
            }
            // edge e joins corner e and e+1
            let edge = |e: usize| (c[e], c[(e + 1) % 4]);
            let pairs: Vec<(usize, usize)> = match mask {
                5 | 10 => {
                    let center_inside = v.iter().sum::<f64>() / 4.0 > pool.level;
                    // isolate the corners on the minority side of the center
                    let isolated: [usize; 2] = if (mask == 5) == center_inside { [1, 3] } else { [0, 2] };
                    isolated.iter().map(|&k| ((k + 3) % 4, k)).collect()
                }
                _ => {
                    let crossing: Vec<usize> = (0..4).filter(|&e| inside[e] != inside[(e + 1) % 4]).collect();
                    vec![(crossing[0], crossing[1])]
                }
            };
            for (ea, eb) in pairs {
                let (a0, a1) = edge(ea);
                let (b0, b1) = edge(eb);
                let pa = pool.crossing(a0, a1);
                let pb = pool.crossing(b0, b1);
                if pa == pb {
                    continue;
                }
                // dense side on the left: the inside end of edge ea tells us
                let ia = if inside[ea] { ea } else { (ea + 1) % 4 };
                let pv = &pool.vertices;
                let dir = [pv[pb][0] - pv[pa][0], pv[pb][1] - pv[pa][1]];
                let corner = pool.volume.point(pool.coords(c[ia])[0], pool.coords(c[ia])[1], 0);
                let to_in = [corner[0] - pv[pa][0], corner[1] - pv[pa][1]];
                let left = dir[0] * to_in[1] - dir[1] * to_in[0];
                segments.push(if left >= 0.0 { [pa, pb] } else { [pb, pa] });
            }
        }
    }
    segments
}

const KUHN: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn marching_tetrahedra(pool: &mut VertexPool) -> Vec<[usize; 3]> {
    let d = pool.volume.dims;
    let mut tris = Vec::new();
    if d.iter().any(|&n| n < 2) {
        return tris;
    }
    for i in 0..d[0] - 1 {
        for j in 0..d[1] - 1 {
            for k in 0..d[2] - 1 {
                for perm in KUHN {
                    let mut corner = [i, j, k];
                    let mut tet = [0usize; 4];
                    tet[0] = pool.volume.index(corner[0], corner[1], corner[2]);
                    for (s, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        tet[s + 1] = pool.volume.index(corner[0], corner[1], corner[2]);
                    }
                    polygonize_tet(pool, &tet, &mut tris);
                }
            }
        }
    }
    tris
}

fn polygonize_tet(pool: &mut VertexPool, tet: &[usize; 4], out: &mut Vec<[usize; 3]>) {
    let vals: Vec<f64> = tet.iter().map(|&f| pool.value(f)).collect();
    let inside: Vec<usize> = (0..4).filter(|&k| vals[k] > pool.level).collect();
    let outside: Vec<usize> = (0..4).filter(|&k| vals[k] <= pool.level).collect();
    let mut faces: Vec<Vec<usize>> = Vec::new();
    match inside.len() {
        1 | 3 => {
            let (lone, rest) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
            faces.push(rest.iter().map(|&r| pool.crossing(tet[lone], tet[r])).collect());
        }
        2 => {
            let (a, b) = (inside[0], inside[1]);
            let (c, e) = (outside[0], outside[1]);
            let q = [
                pool.crossing(tet[a], tet[c]),
                pool.crossing(tet[a], tet[e]),
                pool.crossing(tet[b], tet[e]),
                pool.crossing(tet[b], tet[c]),
            ];
            faces.push(vec![q[0], q[1], q[2]]);
            faces.push(vec![q[0], q[2], q[3]]);
        }
        _ => return,
    }
    // outward = toward decreasing density
    let pts: Vec<[f64; 3]> = tet
        .iter()
        .map(|&f| {
            let c = pool.coords(f);
            pool.volume.point(c[0], c[1], c[2])
        })
        .collect();
    let centroid_in = centroid(inside.iter().map(|&k| pts[k]));
    let centroid_out = centroid(outside.iter().map(|&k| pts[k]));
    let outward = sub(&centroid_out, &centroid_in);
    for f in faces {
        let t = [f[0], f[1], f[2]];
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        let v = &pool.vertices;
        let n = cross(&sub(&v[t[1]], &v[t[0]]), &sub(&v[t[2]], &v[t[0]]));
        if dot(&n, &n) == 0.0 {
            continue;
        }
        out.push(if dot(&n, &outward) >= 0.0 { t } else { [t[0], t[2], t[1]] });
    }
}

fn centroid(points: impl Iterator<Item = [f64; 3]>) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for p in points {
        s[0] += p[0];
        s[1] += p[1];
        s[2] += p[2];
        n += 1.0;
    }
    [s[0] / n, s[1] / n, s[2] / n]
}

/// Every edge used by exactly two faces, once in each direction.
pub fn is_watertight(mesh: &SurfaceMesh) -> bool {
    if mesh.triangles.is_empty() {
        return false;
    }
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &mesh.triangles {
        for e in 0..3 {
            *directed.entry((t[e], t[(e + 1) % 3])).or_default() += 1;
        }
    }
    directed
        .iter()
        .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
}

fn segments_closed(mesh: &SurfaceMesh) -> bool {
    if mesh.segments.is_empty() {
        return false;
    }
    let mut out_deg = vec![0usize; mesh.vertices.len()];
    let mut in_deg = vec![0usize; mesh.vertices.len()];
    for s in &mesh.segments {
        out_deg[s[0]] += 1;
        in_deg[s[1]] += 1;
    }
    out_deg.iter().zip(&in_deg).all(|(&o, &i)| o == i && o <= 1)
}

fn count_components(mesh: &SurfaceMesh) -> usize {
    let n = mesh.vertices.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let union = |a: usize, b: usize, p: &mut Vec<usize>| {
        let (ra, rb) = (find(p, a), find(p, b));
        if ra != rb {
            p[ra] = rb;
        }
    };
    for t in &mesh.triangles {
        union(t[0], t[1], &mut parent);
        union(t[1], t[2], &mut parent);
    }
    for s in &mesh.segments {
        union(s[0], s[1], &mut parent);
    }
    let mut used = vec![false; n];
    for t in &mesh.triangles {
        t.iter().for_each(|&v| used[v] = true);
    }
    for s in &mesh.segments {
        s.iter().for_each(|&v| used[v] = true);
    }
    let mut roots: Vec<usize> = (0..n).filter(|&v| used[v]).map(|v| find(&mut parent, v)).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}

/// ASCII STL of a triangle mesh.
pub fn to_ascii_stl(mesh: &SurfaceMesh, name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "solid {name}");
    for t in &mesh.triangles {
        let n = mesh.triangle_normal(t);
        let _ = writeln!(s, "  facet normal {:e} {:e} {:e}", n[0], n[1], n[2]);
        let _ = writeln!(s, "    outer loop");
        for &v in t {
            let p = mesh.vertices[v];
            let _ = writeln!(s, "      vertex {:e} {:e} {:e}", p[0], p[1], p[2]);
        }
        let _ = writeln!(s, "    endloop");
        let _ = writeln!(s, "  endfacet");
    }
    let _ = writeln!(s, "endsolid {name}");
    s
}

/// 2D contour as CSV, one segment per row.
pub fn to_polyline_csv(mesh: &SurfaceMesh) -> String {
    let mut s = String::from("x0_m,y0_m,x1_m,y1_m\n");
    for seg in &mesh.segments {
        let (a, b) = (mesh.vertices[seg[0]], mesh.vertices[seg[1]]);
        let _ = writeln!(s, "{:e},{:e},{:e},{:e}", a[0], a[1], b[0], b[1]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_field_is_empty() {
        let v = DensityVolume::new([3, 3, 3], 1.0, [0.0; 3], vec![1.0; 27]).unwrap();
        assert!(extract_isosurface(&v, 0.5).unwrap().is_empty());
        assert!(extract_isosurface(&v, 1.5).is_err());
    }

    #[test]
    fn midpoint_crossing() {
        let v = DensityVolume::new([2, 2, 1], 1.0, [0.0; 3], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let m = extract_isosurface(&v, 0.5).unwrap();
        assert_eq!(m.segments.len(), 1);
        assert!(m.vertices.iter().all(|p| p[0] == 0.5));
    }

    #[test]
    fn single_dense_point_gives_closed_octahedron() {
        let mut vals = vec![0.0; 27];
        vals[13] = 1.0;
        let v = DensityVolume::new([3, 3, 3], 1.0, [0.0; 3], vals).unwrap();
        let m = extract_isosurface(&v, 0.5).unwrap();
        assert!(m.watertight);
        assert_eq!(m.components, 1);
        assert!(m.enclosed_measure() > 0.0);
    }
}
