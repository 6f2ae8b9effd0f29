use crate::geometry::{Aabb, Vec3};

const HIT_EPS: f64 = 1e-9;

/// Colour function evaluated on a surface point in object-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Checker period in metres.
    pub period: f64,
}

impl Texture {
    pub fn solid(color: [f64; 3]) -> Self {
        Texture {
            color_a: color,
            color_b: color,
            period: 1.0,
        }
    }

    /// Checker colour. Box faces use the two tangent coordinates of the hit
    /// face (`face_axis`), spheres use all three.
    pub fn color_at(&self, local: &Vec3, face_axis: Option<usize>) -> [f64; 3] {
        let cell = |v: f64| (v / self.period).floor() as i64;
        let parity = match face_axis {
            Some(axis) => (0..3).filter(|&i| i != axis).map(|i| cell(local[i])).sum::<i64>(),
            None => (0..3).map(|i| cell(local[i])).sum::<i64>(),
        };
        let base = if parity.rem_euclid(2) == 0 {
            self.color_a
        } else {
            self.color_b
        };
        // Faces facing different axes get slightly different brightness.
        let tint = match face_axis {
            Some(0) => 1.0,
            Some(1) => 0.88,
            Some(_) => 0.78,
            None => 1.0,
        };
        [base[0] * tint, base[1] * tint, base[2] * tint]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Solid axis-aligned box.
    Box(Aabb),
    Sphere { center: Vec3, radius: f64 },
    /// Hollow room: everything outside the box is solid, so rays starting
    /// inside always terminate on its inner walls.
    Enclosure(Aabb),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub face_axis: Option<usize>,
}

impl Shape {
    /// First intersection with `origin + dir * t`, `t > 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        match self {
            Shape::Box(bbox) => {
                let (t0, t1) = bbox.intersect(origin, dir)?;
                let t = if t0 > HIT_EPS { t0 } else if t1 > HIT_EPS { t1 } else { return None };
                let point = origin + dir * t;
                Some(Hit {
                    t,
                    point,
                    face_axis: Some(nearest_face_axis(bbox, &point)),
                })
            }
            Shape::Enclosure(bbox) => {
                if !bbox.contains(origin) {
                    return Some(Hit {
                        t: HIT_EPS,
                        point: *origin,
                        face_axis: Some(0),
                    });
                }
                let (_, t1) = bbox.intersect(origin, dir)?;
                let point = origin + dir * t1;
                Some(Hit {
                    t: t1,
                    point,
                    face_axis: Some(nearest_face_axis(bbox, &point)),
                })
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > HIT_EPS {
                    -b - sq
                } else if -b + sq > HIT_EPS {
                    -b + sq
                } else {
                    return None;
                };
                Some(Hit {
                    t,
                    point: origin + dir * t,
                    face_axis: None,
                })
            }
        }
    }

    /// Whether `p` lies in the solid part of the shape.
    pub fn occupies(&self, p: &Vec3) -> bool {
        match self {
            Shape::Box(bbox) => bbox.contains(p),
            Shape::Enclosure(bbox) => !bbox.contains(p),
            Shape::Sphere { center, radius } => (p - center).norm() <= *radius,
        }
    }

    pub fn translated(&self, offset: &Vec3) -> Shape {
        match *self {
            Shape::Box(b) => Shape::Box(Aabb::new(b.min + offset, b.max + offset)),
            Shape::Enclosure(b) => Shape::Enclosure(Aabb::new(b.min + offset, b.max + offset)),
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: center + offset,
                radius,
            },
        }
    }
}

fn nearest_face_axis(bbox: &Aabb, p: &Vec3) -> usize {
    let mut best = (f64::INFINITY, 0);
    for i in 0..3 {
        let d = (p[i] - bbox.min[i]).abs().min((p[i] - bbox.max[i]).abs());
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

impl Primitive {
    pub fn color_at(&self, hit: &Hit) -> [f64; 3] {
        self.texture.color_at(&hit.point, hit.face_axis)
    }
}
