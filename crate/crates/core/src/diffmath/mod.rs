//! Dense numeric core: flat parameter vectors with named segments, a
//! recording tape for reverse-mode gradients, and a central-difference
//! gradient oracle.

mod mat;
mod tape;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mat::{argmax, argmax_excluding, dot, log_sum_exp, Mat};
#[doc(hidden)]
pub use tape::Fault;
pub use tape::{Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient flowing out of `{op}`")]
    NonFiniteGradient { op: &'static str },
    #[error("objective must be 1x1, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("parameter layout mismatch: expected {expected} values, got {found}")]
    LayoutMismatch { expected: usize, found: usize },
}

/// A named, shaped slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, disjoint, covering segment table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuilds a layout from `(name, rows, cols)` triples, assigning
    /// contiguous offsets.
    pub fn from_shapes<S: Into<String>>(shapes: impl IntoIterator<Item = (S, usize, usize)>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            segments.push(Segment {
                name: name.into(),
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        }
        Self { segments }
    }

    /// The segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&i))
    }
}

/// All trainable values of a model part, flat, addressed by segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn builder() -> ParamBuilder {
        ParamBuilder::default()
    }

    pub fn from_parts(layout: Layout, values: Vec<f64>) -> Result<Self, DiffError> {
        if layout.len() != values.len() {
            return Err(DiffError::LayoutMismatch {
                expected: layout.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: Arc::new(layout),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn segment(&self, name: &str) -> Result<&Segment, DiffError> {
        self.layout
            .get(name)
            .ok_or_else(|| DiffError::UnknownSegment(name.to_string()))
    }

    pub fn segment_values(&self, name: &str) -> Result<&[f64], DiffError> {
        let seg = self.segment(name)?;
        Ok(&self.values[seg.range()])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Result<&mut [f64], DiffError> {
        let range = self.segment(name)?.range();
        Ok(&mut self.values[range])
    }

    pub fn segment_mat(&self, name: &str) -> Result<Mat, DiffError> {
        let seg = self.segment(name)?;
        Ok(Mat::from_vec(seg.rows, seg.cols, self.values[seg.range()].to_vec()))
    }

    /// Joins several vectors into one, prefixing each segment name.
    pub fn concat(parts: &[(&str, &ParamVector)]) -> ParamVector {
        let mut b = ParamVector::builder();
        for (prefix, pv) in parts {
            for seg in pv.layout.segments() {
                b = b.push(format!("{prefix}{}", seg.name), seg.rows, seg.cols, pv.values[seg.range()].to_vec());
            }
        }
        b.build()
    }

    /// The segments whose names start with `prefix`, with the prefix removed.
    pub fn extract(&self, prefix: &str) -> ParamVector {
        let mut b = ParamVector::builder();
        for seg in self.layout.segments() {
            if let Some(rest) = seg.name.strip_prefix(prefix) {
                b = b.push(rest, seg.rows, seg.cols, self.values[seg.range()].to_vec());
            }
        }
        b.build()
    }

    /// Flat index ranges of all segments whose names start with `prefix`.
    pub fn ranges_with_prefix(&self, prefix: &str) -> Vec<std::ops::Range<usize>> {
        self.layout
            .segments()
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(Segment::range)
            .collect()
    }

    /// A zero gradient with this vector's layout.
    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            values: vec![0.0; self.len()],
            layout: Arc::clone(&self.layout),
        }
    }
}

#[derive(Debug, Default)]
pub struct ParamBuilder {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl ParamBuilder {
    /// Appends a segment. Panics when `values.len() != rows * cols` or the
    /// name is already taken.
    pub fn push(mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        let name = name.into();
        assert_eq!(values.len(), rows * cols, "segment `{name}`: wrong value count");
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate segment `{name}`"
        );
        self.segments.push(Segment {
            name,
            offset: self.values.len(),
            rows,
            cols,
        });
        self.values.extend(values);
        self
    }

    pub fn build(self) -> ParamVector {
        ParamVector {
            values: self.values,
            layout: Arc::new(Layout {
                segments: self.segments,
            }),
        }
    }
}

/// Gradient of a scalar objective, laid out like its [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl Gradient {
    /// Wraps raw values in `params`' layout.
    pub fn from_values(params: &ParamVector, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != params.len() {
            return Err(DiffError::LayoutMismatch {
                expected: params.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: Arc::clone(&params.layout),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn segment_values(&self, name: &str) -> Result<&[f64], DiffError> {
        let seg = self
            .layout
            .get(name)
            .ok_or_else(|| DiffError::UnknownSegment(name.to_string()))?;
        Ok(&self.values[seg.range()])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// How a [`ParamVector`] enters an objective: differentiated or held fixed.
#[derive(Debug, Clone, Copy)]
pub enum Binding<'p> {
    Trainable(&'p ParamVector),
    Frozen(&'p ParamVector),
}

impl<'p> Binding<'p> {
    pub fn params(&self) -> &'p ParamVector {
        match *self {
            Binding::Trainable(p) | Binding::Frozen(p) => p,
        }
    }

    /// Places a segment on the tape, as a gradient-receiving input when
    /// trainable.
    pub fn get<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>, DiffError> {
        let params = self.params();
        let seg = params.segment(name)?;
        let value = Mat::from_vec(seg.rows, seg.cols, params.values[seg.range()].to_vec());
        Ok(match self {
            Binding::Trainable(_) => tape.input(value, seg.offset),
            Binding::Frozen(_) => tape.constant(value),
        })
    }
}

/// Identity that pins a closure to the objective signature, so closures
/// stored in a `let` still accept every tape lifetime.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Binding<'_>) -> Result<Var<'t>, DiffError>,
{
    f
}

/// Evaluates `objective` on a fresh tape without a backward pass.
pub fn evaluate<F>(objective: F, params: &ParamVector) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&'t Tape, Binding<'_>) -> Result<Var<'t>, DiffError>,
{
    let tape = Tape::new();
    let out = objective(&tape, Binding::Frozen(params))?;
    if let Some(op) = tape.non_finite_op() {
        return Err(DiffError::NonFinite { op });
    }
    let (rows, cols) = out.shape();
    if (rows, cols) != (1, 1) {
        return Err(DiffError::NotScalar { rows, cols });
    }
    Ok(out.scalar())
}

/// Objective value and its exact reverse-mode gradient with respect to
/// `params`. The objective receives `params` as a trainable binding; any
/// other parameter vectors it reads should be bound as frozen.
pub fn value_and_grad<F>(objective: F, params: &ParamVector) -> Result<(f64, Gradient), DiffError>
where
    F: for<'t> Fn(&'t Tape, Binding<'_>) -> Result<Var<'t>, DiffError>,
{
    value_and_grad_with_fault(objective, params, None)
}

#[doc(hidden)]
pub fn value_and_grad_with_fault<F>(
    objective: F,
    params: &ParamVector,
    fault: Option<Fault>,
) -> Result<(f64, Gradient), DiffError>
where
    F: for<'t> Fn(&'t Tape, Binding<'_>) -> Result<Var<'t>, DiffError>,
{
    let tape = Tape::with_fault(fault);
    let out = objective(&tape, Binding::Trainable(params))?;
    if let Some(op) = tape.non_finite_op() {
        return Err(DiffError::NonFinite { op });
    }
    let values = tape.backward(out, params.len())?;
    Ok((
        out.scalar(),
        Gradient {
            values,
            layout: Arc::clone(&params.layout),
        },
    ))
}

/// Central-difference estimate `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` per
/// coordinate.
pub fn finite_diff_grad<F>(objective: F, params: &ParamVector, h: f64) -> Result<Gradient, DiffError>
where
    F: for<'t> Fn(&'t Tape, Binding<'_>) -> Result<Var<'t>, DiffError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(DiffError::InvalidStep(h));
    }
    let mut probe = params.clone();
    let mut values = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = params.values[i];
        probe.values[i] = x + h;
        let up = evaluate(&objective, &probe)?;
        probe.values[i] = x - h;
        let down = evaluate(&objective, &probe)?;
        probe.values[i] = x;
        values.push((up - down) / (2.0 * h));
    }
    Ok(Gradient {
        values,
        layout: Arc::clone(&params.layout),
    })
}

/// `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> ParamVector {
        ParamVector::builder().push("x", 1, 1, vec![x]).build()
    }

    fn square<'t>(tape: &'t Tape, p: Binding<'_>) -> Result<Var<'t>, DiffError> {
        Ok(p.get(tape, "x")?.square().sum())
    }

    #[test]
    fn square_value_and_grad() {
        let (v, g) = value_and_grad(square, &scalar_param(3.0)).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.values(), &[6.0]);
    }

    #[test]
    fn square_finite_difference() {
        let g = finite_diff_grad(square, &scalar_param(3.0), 1e-5).unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = scalar_param(1.0);
        let konst = objective(|tape, _p| Ok(tape.constant(Mat::scalar(4.2))));
        let g = finite_diff_grad(konst, &p, 1e-5).unwrap();
        assert_eq!(g.values(), &[0.0]);
        let (_, g) = value_and_grad(konst, &p).unwrap();
        assert_eq!(g.values(), &[0.0]);
    }

    #[test]
    fn non_finite_forward_names_the_primitive() {
        let p = scalar_param(-2.0);
        let f = objective(|tape, p| Ok(p.get(tape, "x")?.ln().sum()));
        assert_eq!(
            value_and_grad(f, &p).unwrap_err(),
            DiffError::NonFinite { op: "log" }
        );
        assert!(finite_diff_grad(f, &p, 1e-5).is_err());
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert_eq!(
            finite_diff_grad(square, &scalar_param(1.0), 0.0).unwrap_err(),
            DiffError::InvalidStep(0.0)
        );
    }

    #[test]
    fn segments_are_contiguous_and_covering() {
        let p = ParamVector::builder()
            .push("a", 2, 3, vec![0.0; 6])
            .push("b", 1, 4, vec![1.0; 4])
            .build();
        assert_eq!(p.len(), 10);
        assert_eq!(p.segment("b").unwrap().range(), 6..10);
        assert_eq!(p.layout().len(), p.len());
        assert_eq!(p.layout().segment_of(7).unwrap().name, "b");
        assert!(matches!(p.segment("c"), Err(DiffError::UnknownSegment(_))));
    }
}
