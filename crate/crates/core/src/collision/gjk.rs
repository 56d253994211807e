//! GJK distance between convex cores and EPA penetration depth.
//!
//! Both algorithms work on the Minkowski difference `A - B` of the shapes'
//! unrounded cores. The rounded part (sphere/capsule radius plus swept radius)
//! is added afterwards, which keeps sphere-like queries exact.

use nalgebra::{Matrix3, Vector3};

use super::shape::ConvexShape;
use super::CollisionError;

pub const GJK_MAX_ITERATIONS: usize = 128;
pub const GJK_TOLERANCE: f64 = 1e-9;
pub const EPA_TOLERANCE: f64 = 1e-6;
pub const EPA_MAX_ITERATIONS: usize = 256;

/// Cores closer than this are treated as intersecting.
const CONTACT_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub(crate) struct SupportPoint {
    pub w: Vector3<f64>,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

pub(crate) type SupportFn<'s> = dyn Fn(&Vector3<f64>) -> SupportPoint + 's;

fn core_support(a: &ConvexShape, b: &ConvexShape, d: &Vector3<f64>) -> SupportPoint {
    let pa = a.core_support(d);
    let pb = b.core_support(&-d);
    SupportPoint { w: pa - pb, a: pa, b: pb }
}

fn inflated_support(a: &ConvexShape, b: &ConvexShape, d: &Vector3<f64>) -> SupportPoint {
    let n = d.norm();
    let u = if n > 0.0 { d / n } else { Vector3::x() };
    let pa = a.core_support(d) + u * a.radius();
    let pb = b.core_support(&-d) - u * b.radius();
    SupportPoint { w: pa - pb, a: pa, b: pb }
}

pub(crate) enum GjkOutcome {
    Separated { pa: Vector3<f64>, pb: Vector3<f64>, distance: f64 },
    Intersecting { simplex: Vec<SupportPoint> },
}

/// Closest point to the origin of the convex hull of `simplex`.
///
/// Every face of the simplex is tried; the minimum over faces whose affine
/// projection lands inside the face is the hull's closest point. The simplex
/// is reduced to the supporting face. Returns `None` when the origin lies
/// inside a full tetrahedron.
fn closest_on_simplex(simplex: &mut Vec<SupportPoint>) -> Option<(Vector3<f64>, Vec<f64>)> {
    let n = simplex.len();
    let mut best: Option<(f64, u32, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let Some(lambda) = affine_projection(simplex, &idx) else { continue };
        if lambda.iter().any(|l| *l < -1e-12) {
            continue;
        }
        let p: Vector3<f64> = idx.iter().zip(&lambda).map(|(i, l)| simplex[*i].w * *l).sum();
        let d2 = p.norm_squared();
        let better = match &best {
            None => true,
            Some((bd, bmask, _)) => d2 < *bd - 1e-30 || (d2 <= *bd && mask.count_ones() < bmask.count_ones()),
        };
        if better {
            best = Some((d2, mask, lambda));
        }
    }
    let (_, mask, lambda) = best?;
    if mask.count_ones() == 4 {
        return None;
    }
    let kept: Vec<SupportPoint> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| simplex[i]).collect();
    *simplex = kept;
    let v = simplex.iter().zip(&lambda).map(|(s, l)| s.w * *l).sum();
    Some((v, lambda))
}

/// Barycentric weights of the origin's projection onto the affine hull of the
/// selected points, or `None` if they are affinely dependent.
fn affine_projection(simplex: &[SupportPoint], idx: &[usize]) -> Option<Vec<f64>> {
    let w0 = simplex[idx[0]].w;
    match idx.len() {
        1 => Some(vec![1.0]),
        2 => {
            let e = simplex[idx[1]].w - w0;
            let ee = e.norm_squared();
            if ee < 1e-24 {
                return None;
            }
            let t = -w0.dot(&e) / ee;
            Some(vec![1.0 - t, t])
        }
        3 => {
            let e1 = simplex[idx[1]].w - w0;
            let e2 = simplex[idx[2]].w - w0;
            let g = nalgebra::Matrix2::new(e1.dot(&e1), e1.dot(&e2), e1.dot(&e2), e2.dot(&e2));
            let det = g.determinant();
            if det.abs() < 1e-14 * (g[(0, 0)] * g[(1, 1)]).max(1e-300) {
                return None;
            }
            let rhs = nalgebra::Vector2::new(-w0.dot(&e1), -w0.dot(&e2));
            let mu = g.try_inverse()? * rhs;
            Some(vec![1.0 - mu.x - mu.y, mu.x, mu.y])
        }
        4 => {
            let m = Matrix3::from_columns(&[simplex[idx[1]].w - w0, simplex[idx[2]].w - w0, simplex[idx[3]].w - w0]);
            let scale = m.column_iter().map(|c| c.norm()).product::<f64>();
            if m.determinant().abs() < 1e-12 * scale.max(1e-300) {
                return None;
            }
            let mu = m.try_inverse()? * (-w0);
            Some(vec![1.0 - mu.sum(), mu.x, mu.y, mu.z])
        }
        _ => None,
    }
}

pub(crate) fn gjk_cores(a: &ConvexShape, b: &ConvexShape) -> Result<GjkOutcome, CollisionError> {
    gjk(&|d: &Vector3<f64>| core_support(a, b, d), a.pose.translation.vector - b.pose.translation.vector)
}

pub(crate) fn gjk(support: &SupportFn<'_>, initial_dir: Vector3<f64>) -> Result<GjkOutcome, CollisionError> {
    let dir = if initial_dir.norm_squared() > 1e-24 { initial_dir } else { Vector3::x() };
    let first = support(&dir);
    let mut simplex = vec![first];
    let mut lambda = vec![1.0];
    let mut v = first.w;

    for _ in 0..GJK_MAX_ITERATIONS {
        let vn = v.norm();
        if vn <= CONTACT_EPS {
            return Ok(GjkOutcome::Intersecting { simplex });
        }
        let w = support(&-v);
        // Upper bound on how much the distance estimate can still drop.
        let gap = (v.norm_squared() - v.dot(&w.w)) / vn;
        let duplicate = simplex.iter().any(|s| (s.w - w.w).norm_squared() < 1e-28);
        if gap <= GJK_TOLERANCE || duplicate {
            return Ok(separated(&simplex, &lambda, vn));
        }
        let previous = (simplex.clone(), lambda.clone());
        simplex.push(w);
        match closest_on_simplex(&mut simplex) {
            None => return Ok(GjkOutcome::Intersecting { simplex }),
            Some((nv, nl)) => {
                if nv.norm() >= vn {
                    // No progress: numerical floor reached.
                    return Ok(separated(&previous.0, &previous.1, vn));
                }
                v = nv;
                lambda = nl;
            }
        }
    }
    Err(CollisionError::IterationCap { algorithm: "GJK", iterations: GJK_MAX_ITERATIONS })
}

fn separated(simplex: &[SupportPoint], lambda: &[f64], distance: f64) -> GjkOutcome {
    let pa = simplex.iter().zip(lambda).map(|(s, l)| s.a * *l).sum();
    let pb = simplex.iter().zip(lambda).map(|(s, l)| s.b * *l).sum();
    GjkOutcome::Separated { pa, pb, distance }
}

#[derive(Debug, Clone, Copy)]
struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    dist: f64,
}

pub(crate) struct EpaResult {
    pub depth: f64,
    pub normal: Vector3<f64>,
    pub pa: Vector3<f64>,
    pub pb: Vector3<f64>,
}

/// Grow a GJK terminal simplex into a tetrahedron enclosing the origin.
fn blow_up(support: &SupportFn<'_>, mut pts: Vec<SupportPoint>) -> Option<Vec<SupportPoint>> {
    let axes = [Vector3::x(), Vector3::y(), Vector3::z(), -Vector3::x(), -Vector3::y(), -Vector3::z()];
    if pts.len() == 1 {
        for d in axes {
            let s = support(&d);
            if (s.w - pts[0].w).norm() > 1e-9 {
                pts.push(s);
                break;
            }
        }
    }
    if pts.len() == 2 {
        let e = (pts[1].w - pts[0].w).normalize();
        let seed = if e.x.abs() < 0.57 {
            Vector3::x()
        } else if e.y.abs() < 0.57 {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let perp = e.cross(&seed).normalize();
        let rot_step = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(e), std::f64::consts::FRAC_PI_3);
        let mut d = perp;
        for _ in 0..6 {
            let s = support(&d);
            let off = (s.w - pts[0].w).cross(&e).norm();
            if off > 1e-9 {
                pts.push(s);
                break;
            }
            d = rot_step * d;
        }
    }
    if pts.len() == 3 {
        let n = (pts[1].w - pts[0].w).cross(&(pts[2].w - pts[0].w));
        if n.norm() < 1e-18 {
            return None;
        }
        for d in [n, -n] {
            let s = support(&d);
            if (s.w - pts[0].w).dot(&n).abs() > 1e-9 * n.norm() {
                pts.push(s);
                break;
            }
        }
    }
    if pts.len() != 4 {
        return None;
    }
    let m = Matrix3::from_columns(&[pts[1].w - pts[0].w, pts[2].w - pts[0].w, pts[3].w - pts[0].w]);
    if m.determinant().abs() < 1e-15 {
        return None;
    }
    Some(pts)
}

fn make_face(verts: &[SupportPoint], v: [usize; 3], interior: &Vector3<f64>) -> Option<Face> {
    let (p0, p1, p2) = (verts[v[0]].w, verts[v[1]].w, verts[v[2]].w);
    let n = (p1 - p0).cross(&(p2 - p0));
    let len = n.norm();
    if len < 1e-18 {
        return None;
    }
    let mut normal = n / len;
    let mut v = v;
    if normal.dot(&(p0 - interior)) < 0.0 {
        normal = -normal;
        v.swap(1, 2);
    }
    Some(Face { v, normal, dist: normal.dot(&p0) })
}

pub(crate) fn epa(support: &SupportFn<'_>, simplex: Vec<SupportPoint>) -> Result<EpaResult, CollisionError> {
    let verts0 = blow_up(support, simplex).ok_or(CollisionError::Degenerate)?;
    let interior: Vector3<f64> = verts0.iter().map(|s| s.w).sum::<Vector3<f64>>() / 4.0;
    let mut verts = verts0;
    let mut faces: Vec<Face> = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]].iter().filter_map(|f| make_face(&verts, *f, &interior)).collect();
    if faces.len() != 4 {
        return Err(CollisionError::Degenerate);
    }

    for _ in 0..EPA_MAX_ITERATIONS {
        let (fi, face) =
            faces.iter().enumerate().min_by(|x, y| x.1.dist.total_cmp(&y.1.dist)).map(|(i, f)| (i, *f)).ok_or(CollisionError::Degenerate)?;
        let s = support(&face.normal);
        let growth = s.w.dot(&face.normal) - face.dist;
        if growth < EPA_TOLERANCE {
            return Ok(finish(&verts, &face));
        }
        let new_idx = verts.len();
        verts.push(s);

        let mut horizon: Vec<(usize, usize)> = Vec::new();
        let mut kept = Vec::with_capacity(faces.len() + 4);
        for (i, f) in faces.iter().enumerate() {
            let visible = i == fi || f.normal.dot(&(s.w - verts[f.v[0]].w)) > 1e-12;
            if visible {
                for (p, q) in [(f.v[0], f.v[1]), (f.v[1], f.v[2]), (f.v[2], f.v[0])] {
                    if let Some(pos) = horizon.iter().position(|e| *e == (q, p)) {
                        horizon.swap_remove(pos);
                    } else {
                        horizon.push((p, q));
                    }
                }
            } else {
                kept.push(*f);
            }
        }
        for (p, q) in horizon {
            if let Some(f) = make_face(&verts, [p, q, new_idx], &interior) {
                kept.push(f);
            }
        }
        if kept.is_empty() {
            return Err(CollisionError::Degenerate);
        }
        faces = kept;
    }
    // Expansion stalled; the closest face is still a valid lower bound.
    let face = *faces.iter().min_by(|x, y| x.dist.total_cmp(&y.dist)).ok_or(CollisionError::Degenerate)?;
    Ok(finish(&verts, &face))
}

fn finish(verts: &[SupportPoint], face: &Face) -> EpaResult {
    let [i0, i1, i2] = face.v;
    let p = face.normal * face.dist;
    let (a, b, c) = (verts[i0].w, verts[i1].w, verts[i2].w);
    let lambda = barycentric(&p, &a, &b, &c);
    let pa = verts[i0].a * lambda[0] + verts[i1].a * lambda[1] + verts[i2].a * lambda[2];
    let pb = verts[i0].b * lambda[0] + verts[i1].b * lambda[1] + verts[i2].b * lambda[2];
    EpaResult { depth: face.dist.max(0.0), normal: face.normal, pa, pb }
}

fn barycentric(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> [f64; 3] {
    let v0 = b - a;
    let v1 = c - a;
    let v2 = p - a;
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    if denom.abs() < 1e-300 {
        return [1.0, 0.0, 0.0];
    }
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    [1.0 - v - w, v, w]
}

pub(crate) fn epa_cores(a: &ConvexShape, b: &ConvexShape, simplex: Vec<SupportPoint>) -> Result<EpaResult, CollisionError> {
    let core = |d: &Vector3<f64>| core_support(a, b, d);
    if a.primitive.core_is_solid() || b.primitive.core_is_solid() {
        if let Ok(r) = epa(&core, simplex) {
            return Ok(EpaResult { depth: r.depth + a.radius() + b.radius(), ..inflate(r, a.radius(), b.radius()) });
        }
    }
    if let (Some(sa), Some(sb)) = (a.core_segment(), b.core_segment()) {
        return Ok(swept_segments_penetration(a, b, sa, sb));
    }
    // Lower-dimensional core difference that EPA could not expand: run it on
    // the rounded shapes directly, which are full-dimensional.
    let full = |d: &Vector3<f64>| inflated_support(a, b, d);
    let dir = a.pose.translation.vector - b.pose.translation.vector;
    match gjk(&full, dir)? {
        GjkOutcome::Intersecting { simplex } => epa(&full, simplex),
        GjkOutcome::Separated { .. } => Err(CollisionError::NotOverlapping),
    }
}

type Segment = (Vector3<f64>, Vector3<f64>);

/// Closest points between two segments (either may be degenerate).
pub(crate) fn closest_segment_points(s1: Segment, s2: Segment) -> (Vector3<f64>, Vector3<f64>) {
    let (p1, q1) = s1;
    let (p2, q2) = s2;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-24;
    let (s, t) = if a <= eps && e <= eps {
        (0.0, 0.0)
    } else if a <= eps {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > eps * a * e { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    (p1 + d1 * s, p2 + d2 * t)
}

/// Penetration of two sphere-swept points/segments whose cores touch.
///
/// The core difference is at most two-dimensional, so the cheapest escape is
/// along its normal and the depth is the summed radius minus the core gap.
fn swept_segments_penetration(a: &ConvexShape, b: &ConvexShape, sa: Segment, sb: Segment) -> EpaResult {
    let (ca, cb) = closest_segment_points(sa, sb);
    let gap = cb - ca;
    let center = (sb.0 + sb.1 - sa.0 - sa.1) / 2.0;
    let u = sa.1 - sa.0;
    let v = sb.1 - sb.0;
    let cross = u.cross(&v);
    let n = if gap.norm() > 1e-12 {
        gap.normalize()
    } else if cross.norm() > 1e-9 * (u.norm() * v.norm()).max(1e-300) && u.norm() > 0.0 && v.norm() > 0.0 {
        let c = cross.normalize();
        if c.dot(&center) < 0.0 {
            -c
        } else {
            c
        }
    } else {
        let axis = if u.norm() > v.norm() { u } else { v };
        let perp = |w: Vector3<f64>| if axis.norm() > 0.0 { w - axis * (w.dot(&axis) / axis.norm_squared()) } else { w };
        let c = perp(center);
        let c = if c.norm() > 1e-12 {
            c.normalize()
        } else {
            [Vector3::z(), Vector3::x(), Vector3::y()].into_iter().map(perp).find(|w| w.norm() > 0.5).unwrap_or(Vector3::z()).normalize()
        };
        if c.dot(&center) < 0.0 {
            -c
        } else {
            c
        }
    };
    let depth = a.radius() + b.radius() - gap.norm();
    EpaResult { depth, normal: n, pa: ca + n * a.radius(), pb: cb - n * b.radius() }
}

fn inflate(r: EpaResult, ra: f64, rb: f64) -> EpaResult {
    EpaResult { pa: r.pa + r.normal * ra, pb: r.pb - r.normal * rb, ..r }
}
