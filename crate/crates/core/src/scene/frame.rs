use std::f64::consts::PI;

pub type Vec2 = [f64; 2];

/// Displacements shorter than this (meters) do not define a heading.
pub const DEGENERATE_NORM: f64 = 1e-6;

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    } else if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// Rotation that maps the direction `(cos, sin)` onto `+x`, i.e. rotation by
/// minus the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot2 {
    cos: f64,
    sin: f64,
}

impl Rot2 {
    pub const IDENTITY: Rot2 = Rot2 { cos: 1.0, sin: 0.0 };

    pub fn from_heading(theta: f64) -> Self {
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Frame aligned with a non-degenerate direction vector.
    pub fn aligned_with(dir: Vec2) -> Option<Self> {
        let n = norm(dir);
        (n > DEGENERATE_NORM).then(|| Self {
            cos: dir[0] / n,
            sin: dir[1] / n,
        })
    }

    /// World vector expressed in the local frame.
    pub fn apply(&self, v: Vec2) -> Vec2 {
        [
            self.cos * v[0] + self.sin * v[1],
            -self.sin * v[0] + self.cos * v[1],
        ]
    }

    /// Local vector expressed in the world frame.
    pub fn apply_inverse(&self, v: Vec2) -> Vec2 {
        [
            self.cos * v[0] - self.sin * v[1],
            self.sin * v[0] + self.cos * v[1],
        ]
    }

    /// Row-major 2x2 matrix of [`Rot2::apply`].
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.cos, self.sin], [-self.sin, self.cos]]
    }
}

/// Agent-centric frame: origin at the agent's current position, `+x` along
/// its last displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Vec2,
    pub rotation: Rot2,
    pub heading: f64,
}

impl Frame {
    pub fn identity_at(origin: Vec2) -> Self {
        Self {
            origin,
            rotation: Rot2::IDENTITY,
            heading: 0.0,
        }
    }

    /// Builds the frame from the reference displacement; a degenerate
    /// displacement gives heading 0 and the identity rotation.
    pub fn from_reference(origin: Vec2, reference: Vec2) -> Self {
        match Rot2::aligned_with(reference) {
            Some(rotation) => Self {
                origin,
                rotation,
                heading: reference[1].atan2(reference[0]),
            },
            None => Self::identity_at(origin),
        }
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        self.rotation.apply(sub(p, self.origin))
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        add(self.rotation.apply_inverse(p), self.origin)
    }
}

/// Distance from `p` to the segment `a..b`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(sub(p, [a[0] + t * ab[0], a[1] + t * ab[1]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthonormal_with_unit_determinant() {
        let r = Rot2::from_heading(0.7);
        let m = r.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!((det - 1.0).abs() < 1e-12);
        let dot = m[0][0] * m[1][0] + m[0][1] * m[1][1];
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn round_trip_world_local_world() {
        let f = Frame::from_reference([3.0, -1.0], [0.3, 0.9]);
        let p = [7.5, 2.25];
        let back = f.to_world(f.to_local(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn segment_distance_clamps_to_endpoints() {
        assert_eq!(point_segment_distance([-3.0, 4.0], [0.0, 0.0], [10.0, 0.0]), 5.0);
        assert_eq!(point_segment_distance([5.0, 2.0], [0.0, 0.0], [10.0, 0.0]), 2.0);
    }
}
