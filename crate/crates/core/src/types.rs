//! Shared value types: points, boxes, hand trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized location of an invisible left hand fed to the decoder.
pub const DEFAULT_LEFT_HAND: Point = Point { x: 0.25, y: 1.5 };
/// Normalized location of an invisible right hand fed to the decoder.
pub const DEFAULT_RIGHT_HAND: Point = Point { x: 0.75, y: 1.5 };

/// A 2D point. Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn normalized(self, frame_size: [f64; 2]) -> Point {
        Point::new(self.x / frame_size[0], self.y / frame_size[1])
    }

    pub fn clamped_unit(self) -> Point {
        Point::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Schema(format!("box [{x1}, {y1}, {x2}, {y2}] is not ordered")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn centered(c: Point, w: f64, h: f64) -> Self {
        Self { x1: c.x - w / 2.0, y1: c.y - h / 2.0, x2: c.x + w / 2.0, y2: c.y + h / 2.0 }
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn default_location(self) -> Point {
        match self {
            Side::Left => DEFAULT_LEFT_HAND,
            Side::Right => DEFAULT_RIGHT_HAND,
        }
    }
}

/// Future left/right hand locations, normalized to the last observation frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandTrajectory {
    pub left: Vec<Point>,
    pub right: Vec<Point>,
    /// `[left, right]` visibility per step.
    pub visible: Vec<[bool; 2]>,
}

impl HandTrajectory {
    pub fn new(left: Vec<Point>, right: Vec<Point>, visible: Vec<[bool; 2]>) -> Result<Self> {
        let t = Self { left, right, visible };
        t.validate()?;
        Ok(t)
    }

    pub fn fully_visible(left: Vec<Point>, right: Vec<Point>) -> Self {
        let n = left.len();
        Self { left, right, visible: vec![[true, true]; n] }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.left.len();
        if f == 0 || self.right.len() != f || self.visible.len() != f {
            return Err(Error::Schema("trajectory sides and visibility must share a nonzero horizon".into()));
        }
        for s in 0..f {
            for side in Side::BOTH {
                if self.visible[s][side.index()] && !self.point(s, side).is_finite() {
                    return Err(Error::Schema("visible trajectory point is not finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.left.len()
    }

    pub fn point(&self, step: usize, side: Side) -> Point {
        match side {
            Side::Left => self.left[step],
            Side::Right => self.right[step],
        }
    }

    pub fn is_visible(&self, step: usize, side: Side) -> bool {
        self.visible[step][side.index()]
    }

    /// `[lx, ly, rx, ry]` at `step`, substituting default locations for invisible sides.
    pub fn hands_or_default(&self, step: usize) -> [f64; 4] {
        let l = if self.visible[step][0] { self.left[step] } else { DEFAULT_LEFT_HAND };
        let r = if self.visible[step][1] { self.right[step] } else { DEFAULT_RIGHT_HAND };
        [l.x, l.y, r.x, r.y]
    }
}

/// Up to `N` contact points in normalized last-observation-frame coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContactPointSet {
    pub points: Vec<Point>,
}

impl ContactPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
