//! 3D convex hulls via quickhull (conflict lists, farthest-point-first),
//! with half-space output for point-containment tests.
//!
//! All plane math runs in f64 regardless of the input scalar: rendered f32
//! surface clouds carry per-coordinate noise far above f32 epsilon, and
//! planes fit through such points at f32 precision produce sliver faces
//! whose orientation is numerical garbage.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::math::Vec3;

/// Slack used by containment tests: a point within this signed distance
/// outside a face still counts as inside (boundary-inclusive).
pub const CONTAINMENT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ConvexHull<T> {
    /// Hull vertices (subset of the input points, deduplicated).
    pub vertices: Vec<Vec3<T>>,
    /// Triangular faces indexing `vertices`, outward-oriented.
    pub faces: Vec<[usize; 3]>,
    /// One `(unit normal, offset)` pair per face: inside iff `n·x <= d`.
    pub half_spaces: Vec<(Vec3<T>, T)>,
}

impl<T: Float> ConvexHull<T> {
    /// Boundary-inclusive containment with [`CONTAINMENT_SLACK`].
    pub fn contains(&self, p: &Vec3<T>) -> bool {
        let slack = cast::<T>(CONTAINMENT_SLACK);
        self.half_spaces.iter().all(|(n, d)| n.dot(p) <= *d + slack)
    }
}

struct Face {
    v: [usize; 3],
    n: Vec3<f64>,
    d: f64,
    /// Conflict list: input indices strictly outside this face (each
    /// unresolved point lives in exactly one list).
    outside: Vec<u32>,
    alive: bool,
}

fn make_face(pts: &[Vec3<f64>], v: [usize; 3]) -> Face {
    let n = (pts[v[1]] - pts[v[0]]).cross(&(pts[v[2]] - pts[v[0]]));
    let len = n.norm();
    // A zero-area sliver (unreachable with farthest-first apexes) gets a
    // never-visible, always-satisfied half-space instead of NaN.
    let n = if len > 0.0 { n * (1.0 / len) } else { Vec3::new(0.0, 0.0, 0.0) };
    Face { v, n, d: n.dot(&pts[v[0]]), outside: Vec::new(), alive: true }
}

/// Builds the convex hull of a point set.
///
/// Requires at least 4 points spanning a non-degenerate volume; otherwise
/// returns `DegenerateInput` (callers that only need an enclosing region can
/// fall back to an inflated bounding box).
pub fn convex_hull<T: Float>(points: &[Vec3<T>]) -> Result<ConvexHull<T>> {
    if points.len() < 4 {
        return Err(Error::DegenerateInput(format!(
            "convex hull needs at least 4 points, got {}",
            points.len()
        )));
    }
    let pts: Vec<Vec3<f64>> = points
        .iter()
        .map(|p| Vec3::new(p[0].to_f64_cfg(), p[1].to_f64_cfg(), p[2].to_f64_cfg()))
        .collect();
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in &pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let diag = (hi - lo).norm().max(1e-12);
    let eps = diag * 1e-10 + 1e-12;

    // Initial simplex: spread apart in each dimension of variation.
    let i0 = 0;
    let i1 = argmax(&pts, |p| (p - pts[i0]).norm());
    if (pts[i1] - pts[i0]).norm() <= eps {
        return Err(Error::DegenerateInput("all points coincide".into()));
    }
    let e01 = (pts[i1] - pts[i0]).normalize();
    let i2 = argmax(&pts, |p| {
        let v = p - pts[i0];
        (v - e01 * e01.dot(&v)).norm()
    });
    let v2 = pts[i2] - pts[i0];
    if (v2 - e01 * e01.dot(&v2)).norm() <= eps {
        return Err(Error::DegenerateInput("points are collinear".into()));
    }
    let n012 = (pts[i1] - pts[i0]).cross(&(pts[i2] - pts[i0])).normalize();
    let i3 = argmax(&pts, |p| (p - pts[i0]).dot(&n012).abs());
    let h = (pts[i3] - pts[i0]).dot(&n012);
    if h.abs() <= eps {
        return Err(Error::DegenerateInput("points are coplanar".into()));
    }

    // Orient the base so i3 lies behind it, then build the 4 seed faces.
    let (a, b) = if h > 0.0 { (i2, i1) } else { (i1, i2) };
    let mut faces: Vec<Face> = Vec::new();
    for tri in [[i0, a, b], [i0, b, i3], [i0, i3, a], [b, a, i3]] {
        faces.push(make_face(&pts, tri));
    }
    for (idx, p) in pts.iter().enumerate() {
        if idx == i0 || idx == i1 || idx == i2 || idx == i3 {
            continue;
        }
        assign_to_conflict_list(&mut faces, &[0, 1, 2, 3], p, idx as u32, eps);
    }

    let mut alive_list: Vec<usize> = vec![0, 1, 2, 3];
    let mut stack: Vec<usize> =
        (0..4).filter(|&f| !faces[f].outside.is_empty()).collect();
    // With exact arithmetic a hull never exceeds 2n-4 faces; the cap turns
    // a hypothetical numerical runaway into a loud error instead of a hang.
    let face_cap = 16 * pts.len() + 256;

    while let Some(fid) = stack.pop() {
        if !faces[fid].alive || faces[fid].outside.is_empty() {
            continue;
        }
        // Farthest conflict point of this face becomes the next apex; the
        // maximally-outside choice keeps every new plane well-conditioned.
        let mut apex = faces[fid].outside[0];
        let mut best = f64::NEG_INFINITY;
        for &q in &faces[fid].outside {
            let s = faces[fid].n.dot(&pts[q as usize]) - faces[fid].d;
            if s > best || (s == best && q < apex) {
                best = s;
                apex = q;
            }
        }
        let p = pts[apex as usize];

        let visible: Vec<usize> = alive_list
            .iter()
            .copied()
            .filter(|&f| faces[f].n.dot(&p) - faces[f].d > eps)
            .collect();
        if visible.is_empty() {
            // Marginal apex no longer outside anything: resolve it as interior.
            faces[fid].outside.retain(|&q| q != apex);
            if !faces[fid].outside.is_empty() {
                stack.push(fid);
            }
            continue;
        }

        // Horizon: edges used exactly once among visible faces, keeping the
        // orientation they had in their (dying) face so new normals point out.
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for &fi in &visible {
            let v = faces[fi].v;
            for e in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                *edge_count.entry((e.0.min(e.1), e.0.max(e.1))).or_insert(0) += 1;
            }
        }
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        let mut orphans: Vec<u32> = Vec::new();
        for &fi in &visible {
            let v = faces[fi].v;
            for e in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                if edge_count[&(e.0.min(e.1), e.0.max(e.1))] == 1 {
                    horizon.push(e);
                }
            }
            orphans.append(&mut faces[fi].outside);
            faces[fi].alive = false;
        }

        let mut new_ids = Vec::with_capacity(horizon.len());
        for (u, v) in horizon {
            new_ids.push(faces.len());
            faces.push(make_face(&pts, [u, v, apex as usize]));
        }
        if faces.len() > face_cap {
            return Err(Error::InvariantViolation(format!(
                "convex hull failed to converge ({} faces for {} points)",
                faces.len(),
                pts.len()
            )));
        }
        // Dying faces' conflict points either fall inside the grown hull or
        // land strictly outside one of the new faces.
        for q in orphans {
            if q != apex {
                assign_to_conflict_list(&mut faces, &new_ids, &pts[q as usize], q, eps);
            }
        }
        alive_list.retain(|&f| faces[f].alive);
        for &nf in &new_ids {
            alive_list.push(nf);
            if !faces[nf].outside.is_empty() {
                stack.push(nf);
            }
        }
    }

    // Compact to alive faces and used vertices. Hull vertices are indexed
    // back into the caller's points so the scalar type round-trips exactly.
    let mut vert_map: HashMap<usize, usize> = HashMap::new();
    let mut vertices: Vec<Vec3<T>> = Vec::new();
    let mut out_faces: Vec<[usize; 3]> = Vec::new();
    let mut half_spaces: Vec<(Vec3<T>, T)> = Vec::new();
    for f in faces.iter().filter(|f| f.alive) {
        for &vi in &f.v {
            if !vert_map.contains_key(&vi) {
                vert_map.insert(vi, vertices.len());
                vertices.push(points[vi]);
            }
        }
        out_faces.push([vert_map[&f.v[0]], vert_map[&f.v[1]], vert_map[&f.v[2]]]);
        half_spaces.push((
            Vec3::new(cast::<T>(f.n[0]), cast::<T>(f.n[1]), cast::<T>(f.n[2])),
            cast::<T>(f.d),
        ));
    }

    let hull = ConvexHull { vertices, faces: out_faces, half_spaces };
    debug_assert!(
        points.len() > 4096
            || points.iter().all(|p| hull.contains(p) || signed_violation(&hull, p) < 1e-6)
    );
    Ok(hull)
}

/// Puts `idx` on the conflict list of whichever candidate face it is
/// farthest outside of, if any; otherwise the point is inside (or within
/// `eps` of) all of them and is resolved for good.
fn assign_to_conflict_list(
    faces: &mut [Face],
    candidates: &[usize],
    p: &Vec3<f64>,
    idx: u32,
    eps: f64,
) {
    let mut best: Option<(usize, f64)> = None;
    for &f in candidates {
        let s = faces[f].n.dot(p) - faces[f].d;
        if s > eps && best.map_or(true, |(_, bs)| s > bs) {
            best = Some((f, s));
        }
    }
    if let Some((f, _)) = best {
        faces[f].outside.push(idx);
    }
}

fn signed_violation<T: Float>(hull: &ConvexHull<T>, p: &Vec3<T>) -> f64 {
    hull.half_spaces
        .iter()
        .map(|(n, d)| (n.dot(p) - *d).to_f64_cfg())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn argmax<T: Float, F: Fn(&Vec3<T>) -> T>(points: &[Vec3<T>], f: F) -> usize {
    let mut best = 0;
    let mut best_v = f(&points[0]);
    for (i, p) in points.iter().enumerate().skip(1) {
        let v = f(p);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tetrahedron_has_four_faces_and_vertices() {
        let pts = vec![
            Vec3::new(0.0f64, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.5, 1.0, 0.0),
            Vec3::new(0.5, 0.3, 1.0),
        ];
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.vertices.len(), 4);
        assert_eq!(hull.faces.len(), 4);
        for p in &pts {
            assert!(hull.contains(p));
        }
        assert!(!hull.contains(&Vec3::new(2.0, 2.0, 2.0)));
    }

    #[test]
    fn cube_corners_are_exactly_the_hull_vertices() {
        let mut pts = Vec::new();
        for x in [0.0f64, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Vec3::new(x, y, z));
                }
            }
        }
        // Interior points must not appear as vertices.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            pts.push(Vec3::new(
                0.1 + 0.8 * rng.gen::<f64>(),
                0.1 + 0.8 * rng.gen::<f64>(),
                0.1 + 0.8 * rng.gen::<f64>(),
            ));
        }
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.vertices.len(), 8);
        for v in &hull.vertices {
            for k in 0..3 {
                assert!(v[k] == 0.0 || v[k] == 1.0);
            }
        }
        let inside = Vec3::new(0.5, 0.5, 0.5);
        assert!(hull.contains(&inside));
        assert!(!hull.contains(&Vec3::new(1.0 + 1e-6, 0.5, 0.5)));
        // Boundary-inclusive within slack.
        assert!(hull.contains(&Vec3::new(1.0 + 0.5e-9, 0.5, 0.5)));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let coplanar: Vec<Vec3<f64>> = (0..10)
            .map(|i| Vec3::new(i as f64 * 0.1, (i * i) as f64 * 0.01, 0.0))
            .collect();
        assert!(matches!(convex_hull(&coplanar), Err(Error::DegenerateInput(_))));
        let collinear: Vec<Vec3<f64>> =
            (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 3.0 * i as f64)).collect();
        assert!(matches!(convex_hull(&collinear), Err(Error::DegenerateInput(_))));
        let few = vec![Vec3::new(0.0f64, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        assert!(matches!(convex_hull(&few), Err(Error::DegenerateInput(_))));
    }

    /// Independent oracle in the gift-wrapping spirit: enumerate all planes
    /// through point triples and mark a triple extreme when every remaining
    /// point lies on one side. The union of extreme triples is exactly the
    /// hull vertex set (no four inputs are coplanar with probability 1 for
    /// random continuous coordinates).
    fn brute_force_vertices(points: &[Vec3<f64>]) -> Vec<usize> {
        let n = points.len();
        let mut extreme = vec![false; n];
        // Enumerate all planes through point triples; any point strictly on
        // the outer side of some supporting plane bounds the set.
        for i in 0..n {
            for j in (i + 1)..n {
                for k in (j + 1)..n {
                    let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
                    if normal.norm() < 1e-12 {
                        continue;
                    }
                    let nn = normal.normalize();
                    let d = nn.dot(&points[i]);
                    let mut above = 0;
                    let mut below = 0;
                    for (t, p) in points.iter().enumerate() {
                        if t == i || t == j || t == k {
                            continue;
                        }
                        let s = nn.dot(p) - d;
                        if s > 1e-9 {
                            above += 1;
                        } else if s < -1e-9 {
                            below += 1;
                        }
                    }
                    if above == 0 || below == 0 {
                        extreme[i] = true;
                        extreme[j] = true;
                        extreme[k] = true;
                    }
                }
            }
        }
        (0..n).filter(|&i| extreme[i]).collect()
    }

    #[test]
    fn vertex_set_matches_supporting_plane_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..10 {
            let n = 8 + (case % 5) * 8;
            let pts: Vec<Vec3<f64>> = (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.gen::<f64>() * 2.0 - 1.0,
                        rng.gen::<f64>() * 2.0 - 1.0,
                        rng.gen::<f64>() * 2.0 - 1.0,
                    )
                })
                .collect();
            let hull = convex_hull(&pts).unwrap();
            let mut got: Vec<usize> = hull
                .vertices
                .iter()
                .map(|v| pts.iter().position(|p| (p - v).norm() < 1e-12).unwrap())
                .collect();
            got.sort_unstable();
            let expected = brute_force_vertices(&pts);
            assert_eq!(got, expected, "case {case}");
        }
    }

    /// Rendered surface clouds are the hard case: tens of thousands of f32
    /// points, most on a sphere cap (every one extreme), plus a coplanar
    /// table patch and near-duplicates from overlapping views. The previous
    /// insertion-order algorithm went quadratic-with-sliver-cascades here.
    #[test]
    fn large_noisy_f32_surface_cloud_completes_and_contains_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<Vec3<f32>> = Vec::new();
        for _ in 0..6000 {
            // Upper hemisphere of radius 55 mm with ~0.1 mm noise.
            let z: f64 = rng.gen::<f64>();
            let t: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let r = (1.0 - z * z).sqrt();
            let noise = 1.0 + 2e-3 * (rng.gen::<f64>() - 0.5);
            let p = Vec3::new(
                (0.055 * r * t.cos() * noise) as f32,
                (0.055 * r * t.sin() * noise) as f32,
                (0.02 + 0.055 * z * noise) as f32,
            );
            pts.push(p);
            if rng.gen::<f64>() < 0.3 {
                pts.push(p); // exact duplicate, as overlapping views produce
            }
        }
        for _ in 0..4000 {
            // Flat annulus around the object, z exactly constant.
            let t: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let r = 0.06 + 0.04 * rng.gen::<f64>();
            pts.push(Vec3::new((r * t.cos()) as f32, (r * t.sin()) as f32, 0.0));
        }
        let hull = convex_hull(&pts).unwrap();
        assert!(hull.vertices.len() >= 8);
        let worst = pts
            .iter()
            .map(|p| signed_violation(&hull, p))
            .fold(f64::NEG_INFINITY, f64::max);
        // f32 half-space rounding costs at most a few ulp of the 0.1 m scale.
        assert!(worst < 1e-6, "worst violation {worst:.3e}");
    }

    #[test]
    fn every_input_point_satisfies_all_half_spaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let pts: Vec<Vec3<f64>> = (0..60)
                .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let hull = convex_hull(&pts).unwrap();
            for p in &pts {
                assert!(hull.contains(p), "violation {:.3e}", signed_violation(&hull, p));
            }
        }
    }
}
