//! Planar points, axis-aligned rectangles and segment clipping.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + t * (o.x - self.x), self.y + t * (o.y - self.y))
    }
}

impl From<[f64; 2]> for Point {
    fn from(a: [f64; 2]) -> Self {
        Point::new(a[0], a[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Closed axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl From<[f64; 4]> for Rect {
    fn from(a: [f64; 4]) -> Self {
        Rect::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.xmin, r.ymin, r.xmax, r.ymax]
    }
}

/// Absolute slack used when deciding whether a segment enters a rectangle.
pub const EDGE_TOL: f64 = 1e-9;

impl Rect {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax && [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite())
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    pub fn contains_interior(&self, p: Point) -> bool {
        p.x > self.xmin && p.x < self.xmax && p.y > self.ymin && p.y < self.ymax
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.xmin >= self.xmin && o.xmax <= self.xmax && o.ymin >= self.ymin && o.ymax <= self.ymax
    }

    pub fn overlap_area(&self, o: &Rect) -> f64 {
        let w = self.xmax.min(o.xmax) - self.xmin.max(o.xmin);
        let h = self.ymax.min(o.ymax) - self.ymin.max(o.ymin);
        w.max(0.0) * h.max(0.0)
    }

    /// Whether the interiors overlap.
    pub fn intersects(&self, o: &Rect) -> bool {
        self.xmin < o.xmax && o.xmin < self.xmax && self.ymin < o.ymax && o.ymin < self.ymax
    }

    /// Whether segment `a`-`b` passes through the interior. Grazing an edge
    /// or a corner does not count.
    pub fn blocks_segment(&self, a: Point, b: Point) -> bool {
        let inner = Rect::new(
            self.xmin + EDGE_TOL,
            self.ymin + EDGE_TOL,
            self.xmax - EDGE_TOL,
            self.ymax - EDGE_TOL,
        );
        match inner.clip(a, b) {
            Some((t0, t1)) => t1 > t0,
            None => false,
        }
    }

    /// Liang-Barsky clipping: the parameter range of `a + t (b - a)`,
    /// `t` in `[0, 1]`, that lies inside the rectangle.
    pub fn clip(&self, a: Point, b: Point) -> Option<(f64, f64)> {
        let d = b.sub(a);
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for (p, q) in [
            (-d.x, a.x - self.xmin),
            (d.x, self.xmax - a.x),
            (-d.y, a.y - self.ymin),
            (d.y, self.ymax - a.y),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// The four walls with outward unit normals.
    pub fn walls(&self) -> [Wall; 4] {
        let (x0, y0, x1, y1) = (self.xmin, self.ymin, self.xmax, self.ymax);
        [
            Wall { axis: Axis::X, at: x0, lo: y0, hi: y1, outward: -1.0 },
            Wall { axis: Axis::X, at: x1, lo: y0, hi: y1, outward: 1.0 },
            Wall { axis: Axis::Y, at: y0, lo: x0, hi: x1, outward: -1.0 },
            Wall { axis: Axis::Y, at: y1, lo: x0, hi: x1, outward: 1.0 },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Wall on a line of constant x.
    X,
    /// Wall on a line of constant y.
    Y,
}

/// Axis-aligned wall segment with the sign of its outward normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wall {
    pub axis: Axis,
    pub at: f64,
    pub lo: f64,
    pub hi: f64,
    pub outward: f64,
}

impl Wall {
    pub fn normal(&self) -> Point {
        match self.axis {
            Axis::X => Point::new(self.outward, 0.0),
            Axis::Y => Point::new(0.0, self.outward),
        }
    }

    /// Signed distance of `p` from the wall line, positive outside.
    pub fn side(&self, p: Point) -> f64 {
        match self.axis {
            Axis::X => self.outward * (p.x - self.at),
            Axis::Y => self.outward * (p.y - self.at),
        }
    }

    pub fn mirror(&self, p: Point) -> Point {
        match self.axis {
            Axis::X => Point::new(2.0 * self.at - p.x, p.y),
            Axis::Y => Point::new(p.x, 2.0 * self.at - p.y),
        }
    }

    /// Where segment `a`-`b` crosses the wall line, if within the wall.
    pub fn crossing(&self, a: Point, b: Point) -> Option<Point> {
        let (ca, cb) = match self.axis {
            Axis::X => (a.x, b.x),
            Axis::Y => (a.y, b.y),
        };
        if ca == cb {
            return None;
        }
        let t = (self.at - ca) / (cb - ca);
        if !(0.0..=1.0).contains(&t) {
            return None;
        }
        let p = a.lerp(b, t);
        let along = match self.axis {
            Axis::X => p.y,
            Axis::Y => p.x,
        };
        if along < self.lo || along > self.hi {
            return None;
        }
        // snap onto the wall line exactly
        Some(match self.axis {
            Axis::X => Point::new(self.at, p.y),
            Axis::Y => Point::new(p.x, self.at),
        })
    }
}
