//! Pipe and insert geometry.
//!
//! A design places `n` annular rings on the outside of a uniform pipe. Each
//! ring `i` has an outer diameter `d[i]` and a width `w_ring[i]`, and is
//! followed by a bare gap of width `w_gap[i]`. The layout starts with a ring
//! at the excited end; whatever pipe length is left after the last gap is a
//! single trailing bare segment.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of inserts in the standard 30-variable design.
pub const INSERT_COUNT: usize = 10;
/// Length of the flattened design vector, `[d.., w_ring.., w_gap..]`.
pub const DESIGN_DIM: usize = 3 * INSERT_COUNT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("design violates bounds at {}", format_violations(.0))]
    Bounds(Vec<BoundViolation>),
    #[error("inserts and gaps span {total:.6} m, more than the pipe length {length:.6} m")]
    Infeasible { total: f64, length: f64 },
    #[error("insert {index} has outer diameter {diameter} m below the pipe outer diameter {pipe} m")]
    NegativeAnnulus { index: usize, diameter: f64, pipe: f64 },
    #[error("design arrays have mismatched lengths (d={d}, w_ring={w_ring}, w_gap={w_gap})")]
    Shape { d: usize, w_ring: usize, w_gap: usize },
    #[error("expected a flat design of length {expected}, got {got}")]
    FlatLength { expected: usize, got: usize },
    #[error("invalid pipe: {0}")]
    Pipe(String),
}

fn format_violations(v: &[BoundViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Host pipe geometry and material, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipeSpec {
    pub length: f64,
    pub density: f64,
    pub youngs: f64,
    pub shear: f64,
    pub inner_diameter: f64,
    pub outer_diameter: f64,
}

impl Default for PipeSpec {
    fn default() -> Self {
        Self {
            length: 9.0,
            density: 1800.0,
            youngs: 193e9,
            shear: 77.2e9,
            inner_diameter: 0.15,
            outer_diameter: 0.16,
        }
    }
}

impl PipeSpec {
    pub fn check(&self) -> Result<(), GeometryError> {
        let positive = [
            ("length", self.length),
            ("density", self.density),
            ("youngs", self.youngs),
            ("shear", self.shear),
            ("inner_diameter", self.inner_diameter),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeometryError::Pipe(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.outer_diameter.is_finite() && self.outer_diameter > self.inner_diameter) {
            return Err(GeometryError::Pipe(format!(
                "outer_diameter {} must exceed inner_diameter {}",
                self.outer_diameter, self.inner_diameter
            )));
        }
        Ok(())
    }

    /// Segment with the bare pipe cross-section.
    pub fn bare_segment(&self, width: f64) -> Segment {
        Segment::annulus(width, self.outer_diameter, self.inner_diameter, self)
    }

    /// Mass of the bare pipe body.
    pub fn body_mass(&self) -> f64 {
        self.density * annulus_area(self.outer_diameter, self.inner_diameter) * self.length
    }
}

/// Closed interval for one design variable family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

/// Box bounds on the three design variable families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignBounds {
    pub diameter: Range,
    pub ring_width: Range,
    pub gap_width: Range,
}

impl Default for DesignBounds {
    fn default() -> Self {
        Self {
            diameter: Range::new(0.16, 0.32),
            ring_width: Range::new(0.075, 0.375),
            gap_width: Range::new(0.0015, 0.0225),
        }
    }
}

impl DesignBounds {
    pub fn check(&self) -> Result<(), String> {
        for (name, r) in [
            ("diameter", self.diameter),
            ("ring_width", self.ring_width),
            ("gap_width", self.gap_width),
        ] {
            if !(r.min.is_finite() && r.max.is_finite() && r.min > 0.0 && r.min <= r.max) {
                return Err(format!("bounds.{name}: need 0 < min <= max, got [{}, {}]", r.min, r.max));
            }
        }
        Ok(())
    }

    /// Per-coordinate ranges of the flat `n`-insert design vector.
    pub fn flat_ranges(&self, inserts: usize) -> Vec<Range> {
        let mut out = Vec::with_capacity(3 * inserts);
        out.extend(std::iter::repeat(self.diameter).take(inserts));
        out.extend(std::iter::repeat(self.ring_width).take(inserts));
        out.extend(std::iter::repeat(self.gap_width).take(inserts));
        out
    }

    /// Map a flat physical design onto `[-1, 1]` per coordinate.
    pub fn normalize(&self, flat: &[f64]) -> Vec<f64> {
        self.flat_ranges(flat.len() / 3)
            .iter()
            .zip(flat)
            .map(|(r, &v)| 2.0 * (v - r.min) / r.width() - 1.0)
            .collect()
    }

    pub fn denormalize(&self, unit: &[f64]) -> Vec<f64> {
        self.flat_ranges(unit.len() / 3)
            .iter()
            .zip(unit)
            .map(|(r, &u)| r.min + 0.5 * (u + 1.0) * r.width())
            .collect()
    }

    pub fn clamp(&self, design: &DesignVector) -> DesignVector {
        DesignVector {
            d: design.d.iter().map(|&v| self.diameter.clamp(v)).collect(),
            w_ring: design.w_ring.iter().map(|&v| self.ring_width.clamp(v)).collect(),
            w_gap: design.w_gap.iter().map(|&v| self.gap_width.clamp(v)).collect(),
        }
    }
}

/// Insert layout. Serialized as `{"d": [..], "w_ring": [..], "w_gap": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignVector {
    pub d: Vec<f64>,
    pub w_ring: Vec<f64>,
    pub w_gap: Vec<f64>,
}

impl DesignVector {
    pub fn new(d: Vec<f64>, w_ring: Vec<f64>, w_gap: Vec<f64>) -> Result<Self, GeometryError> {
        let v = Self { d, w_ring, w_gap };
        v.check_shape()?;
        Ok(v)
    }

    /// Same ring diameter, ring width and gap width for all `n` inserts.
    pub fn uniform(n: usize, d: f64, w_ring: f64, w_gap: f64) -> Self {
        Self { d: vec![d; n], w_ring: vec![w_ring; n], w_gap: vec![w_gap; n] }
    }

    /// Rings flush with the pipe surface; the chain is a uniform pipe.
    pub fn flush(pipe: &PipeSpec, bounds: &DesignBounds) -> Self {
        Self::uniform(INSERT_COUNT, pipe.outer_diameter, bounds.ring_width.min, bounds.gap_width.min)
    }

    pub fn inserts(&self) -> usize {
        self.d.len()
    }

    fn check_shape(&self) -> Result<(), GeometryError> {
        if self.d.len() != self.w_ring.len() || self.d.len() != self.w_gap.len() {
            return Err(GeometryError::Shape {
                d: self.d.len(),
                w_ring: self.w_ring.len(),
                w_gap: self.w_gap.len(),
            });
        }
        Ok(())
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, GeometryError> {
        if flat.len() % 3 != 0 || flat.is_empty() {
            return Err(GeometryError::FlatLength { expected: DESIGN_DIM, got: flat.len() });
        }
        let n = flat.len() / 3;
        Ok(Self {
            d: flat[..n].to_vec(),
            w_ring: flat[n..2 * n].to_vec(),
            w_gap: flat[2 * n..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.inserts());
        out.extend_from_slice(&self.d);
        out.extend_from_slice(&self.w_ring);
        out.extend_from_slice(&self.w_gap);
        out
    }

    /// Total axial span of rings and gaps.
    pub fn occupied_length(&self) -> f64 {
        self.w_ring.iter().chain(&self.w_gap).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Diameter,
    RingWidth,
    GapWidth,
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variable::Diameter => "d",
            Variable::RingWidth => "w_ring",
            Variable::GapWidth => "w_gap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub variable: Variable,
    pub index: usize,
    pub value: f64,
    pub bound: Range,
}

impl fmt::Display for BoundViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{}]={} outside [{}, {}]",
            self.variable, self.index, self.value, self.bound.min, self.bound.max
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthViolation {
    pub occupied: f64,
    pub length: f64,
}

/// Outcome of [`DesignSpace::validate`]. Empty means feasible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<BoundViolation>,
    pub length: Option<LengthViolation>,
    pub shape: Option<String>,
}

impl ValidationReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty() && self.length.is_none() && self.shape.is_none()
    }
}

/// One uniform cylindrical sub-body of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub width: f64,
    pub outer_diameter: f64,
    pub inner_diameter: f64,
    pub area: f64,
    pub polar_inertia: f64,
    pub bending_inertia: f64,
    pub youngs: f64,
    pub shear: f64,
    pub density: f64,
}

pub fn annulus_area(d_out: f64, d_in: f64) -> f64 {
    PI / 4.0 * (d_out * d_out - d_in * d_in)
}

pub fn annulus_bending_inertia(d_out: f64, d_in: f64) -> f64 {
    PI / 64.0 * (d_out.powi(4) - d_in.powi(4))
}

impl Segment {
    pub fn annulus(width: f64, d_out: f64, d_in: f64, material: &PipeSpec) -> Self {
        let bending_inertia = annulus_bending_inertia(d_out, d_in);
        Self {
            width,
            outer_diameter: d_out,
            inner_diameter: d_in,
            area: annulus_area(d_out, d_in),
            polar_inertia: 2.0 * bending_inertia,
            bending_inertia,
            youngs: material.youngs,
            shear: material.shear,
            density: material.density,
        }
    }

    pub fn mass(&self) -> f64 {
        self.density * self.area * self.width
    }

    /// Same cross-section and material, different width.
    pub fn with_width(&self, width: f64) -> Self {
        Self { width, ..*self }
    }
}

/// Ordered segments from the excited end to the response end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentChain {
    pub segments: Vec<Segment>,
}

impl SegmentChain {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// A single bare-pipe segment spanning the whole pipe.
    pub fn uniform(pipe: &PipeSpec) -> Self {
        Self::new(vec![pipe.bare_segment(pipe.length)])
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.width).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.segments.iter().map(Segment::mass).sum()
    }

    /// Mass polar moment of inertia about the pipe axis.
    pub fn total_polar_inertia(&self) -> f64 {
        self.segments.iter().map(|s| s.density * s.polar_inertia * s.width).sum()
    }
}

/// Pipe plus the admissible box for designs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    pub pipe: PipeSpec,
    pub bounds: DesignBounds,
}

impl DesignSpace {
    pub fn new(pipe: PipeSpec, bounds: DesignBounds) -> Self {
        Self { pipe, bounds }
    }

    pub fn validate(&self, design: &DesignVector) -> ValidationReport {
        let mut report = ValidationReport::default();
        if let Err(e) = design.check_shape() {
            report.shape = Some(e.to_string());
            return report;
        }
        let families = [
            (Variable::Diameter, &design.d, self.bounds.diameter),
            (Variable::RingWidth, &design.w_ring, self.bounds.ring_width),
            (Variable::GapWidth, &design.w_gap, self.bounds.gap_width),
        ];
        for (variable, values, bound) in families {
            for (index, &value) in values.iter().enumerate() {
                if !bound.contains(value) {
                    report.violations.push(BoundViolation { variable, index, value, bound });
                }
            }
        }
        let occupied = design.occupied_length();
        if !(occupied <= self.pipe.length) {
            report.length = Some(LengthViolation { occupied, length: self.pipe.length });
        }
        report
    }

    /// Expand a design into `ring, gap, ring, gap, ..., remainder`.
    pub fn build_segments(&self, design: &DesignVector) -> Result<SegmentChain, GeometryError> {
        self.pipe.check()?;
        let report = self.validate(design);
        if report.shape.is_some() {
            design.check_shape()?;
        }
        if !report.violations.is_empty() {
            return Err(GeometryError::Bounds(report.violations));
        }
        if let Some(l) = report.length {
            return Err(GeometryError::Infeasible { total: l.occupied, length: l.length });
        }

        let pipe = &self.pipe;
        let mut segments = Vec::with_capacity(2 * design.inserts() + 1);
        for i in 0..design.inserts() {
            segments.push(Segment::annulus(design.w_ring[i], design.d[i], pipe.inner_diameter, pipe));
            segments.push(pipe.bare_segment(design.w_gap[i]));
        }
        let remainder = pipe.length - design.occupied_length();
        if remainder > 0.0 {
            segments.push(pipe.bare_segment(remainder));
        }
        Ok(SegmentChain::new(segments))
    }
}

/// Added annular mass of the rings; the pipe body is excluded.
pub fn insert_mass(design: &DesignVector, pipe: &PipeSpec) -> Result<f64, GeometryError> {
    design.check_shape()?;
    let mut mass = 0.0;
    for (index, (&d, &w)) in design.d.iter().zip(&design.w_ring).enumerate() {
        if d < pipe.outer_diameter {
            return Err(GeometryError::NegativeAnnulus { index, diameter: d, pipe: pipe.outer_diameter });
        }
        mass += PI / 4.0 * (d * d - pipe.outer_diameter * pipe.outer_diameter) * w;
    }
    Ok(pipe.density * mass)
}
