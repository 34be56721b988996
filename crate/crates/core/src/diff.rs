//! Flat parameter-vector algebra and finite-difference oracles.
//!
//! Every trainable quantity in the crate lives in a [`ParamVector`]: one dense
//! `f64` buffer plus a [`Layout`] naming the tensors packed into it. Matrices
//! are stored column-major so a segment can be viewed as a `nalgebra` matrix
//! without copying.
//!
//! The finite-difference routines are test oracles for the analytic
//! derivatives in [`crate::nssm`]; they are never used on a training path.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step for gradients.
pub const FD_GRADIENT_STEP: f64 = 1e-5;
/// Default central-difference step for Hessian-vector products.
pub const FD_HVP_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Segment {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of named tensor shapes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Layout { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for seg in &self.segments {
            let n = seg.numel();
            if seg.name == name {
                return Some(offset..offset + n);
            }
            offset += n;
        }
        None
    }

    /// Segment ranges in layout order.
    pub fn ranges(&self) -> impl Iterator<Item = (&Segment, Range<usize>)> + '_ {
        self.segments.iter().scan(0usize, |offset, seg| {
            let start = *offset;
            *offset += seg.numel();
            Some((seg, start..*offset))
        })
    }

    /// Name of the first segment where `self` and `other` disagree.
    pub fn first_difference(&self, other: &Layout) -> Option<String> {
        for (i, seg) in self.segments.iter().enumerate() {
            match other.segments.get(i) {
                Some(o) if o == seg => continue,
                _ => return Some(seg.name.clone()),
            }
        }
        other
            .segments
            .get(self.segments.len())
            .map(|s| s.name.clone())
    }
}

/// A dense parameter vector tied to a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    /// Rebuilds a vector from its flat values. Inverse of [`ParamVector::flatten`].
    pub fn unflatten(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "layout holds {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    /// Convenience for tests and tiny examples: a single segment named `w`.
    pub fn from_slice(values: &[f64]) -> Self {
        let layout = Arc::new(Layout::new(vec![Segment::new("w", &[values.len()])]));
        ParamVector {
            layout,
            values: values.to_vec(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.values[r])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.range(name)?;
        Some(&mut self.values[r])
    }

    /// A vector of the same layout with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::unflatten(self.layout.clone(), values)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) {
            return Ok(());
        }
        match self.layout.first_difference(&other.layout) {
            None => Ok(()),
            Some(segment) => Err(Error::LayoutMismatch { segment }),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, a: f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(1.0, other, self)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }

    /// In-place `self += a * x`.
    pub fn axpy_inplace(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_compatible(x)?;
        for (s, xv) in self.values.iter_mut().zip(&x.values) {
            *s += a * xv;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A twice-differentiable scalar objective over a [`ParamVector`].
///
/// The NSSM prediction loss implements this; so do the quadratic surrogates
/// used to check the bilevel machinery against closed forms.
pub trait Objective {
    fn value(&self, w: &ParamVector) -> Result<f64>;

    fn gradient(&self, w: &ParamVector) -> Result<ParamVector>;

    fn value_and_gradient(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        Ok((self.value(w)?, self.gradient(w)?))
    }

    /// Hessian of [`Objective::value`] at `w` applied to `v`.
    fn hvp(&self, w: &ParamVector, v: &ParamVector) -> Result<ParamVector>;
}

/// Returns `a * x + y`.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_compatible(y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(xv, yv)| a * xv + yv)
        .collect();
    Ok(ParamVector {
        layout: y.layout.clone(),
        values,
    })
}

/// Central-difference gradient of `f` at `w`.
pub fn fd_gradient<F>(f: F, w: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = w.clone();
    let mut grad = w.zeros_like();
    for i in 0..w.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let fp = f(&probe);
        probe.values[i] = orig - h;
        let fm = f(&probe);
        probe.values[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        grad.values[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference Hessian-vector product `(g(w + h v) - g(w - h v)) / 2h`.
pub fn fd_hvp<G>(g: G, w: &ParamVector, v: &ParamVector, h: f64) -> Result<ParamVector>
where
    G: Fn(&ParamVector) -> Result<ParamVector>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    w.check_compatible(v)?;
    let gp = g(&axpy(h, v, w)?)?;
    let gm = g(&axpy(-h, v, w)?)?;
    let mut out = gp.sub(&gm)?.scale(0.5 / h);
    if let Some(i) = gp
        .values
        .iter()
        .zip(&gm.values)
        .position(|(a, b)| !a.is_finite() || !b.is_finite())
    {
        return Err(Error::NonFinite { index: i });
    }
    out.layout = w.layout.clone();
    Ok(out)
}

/// `‖a - b‖ / max(‖b‖, floor)`, the relative error used throughout the test oracles.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_segment_layout() -> Arc<Layout> {
        Arc::new(Layout::new(vec![
            Segment::new("a", &[2, 3]),
            Segment::new("b", &[4]),
        ]))
    }

    #[test]
    fn axpy_examples() {
        let v = ParamVector::from_slice(&[1.5, -2.0]);
        let any = ParamVector::from_slice(&[9.0, 7.0]);
        assert_eq!(axpy(0.0, &any, &v).unwrap().values(), v.values());

        let neg = v.scale(-1.0);
        assert_eq!(axpy(1.0, &v, &neg).unwrap().values(), &[0.0, 0.0]);

        let x = ParamVector::from_slice(&[1.0, 2.0]);
        let y = x.with_values(vec![3.0, 4.0]).unwrap();
        assert_eq!(axpy(2.0, &x, &y).unwrap().values(), &[5.0, 8.0]);
    }

    #[test]
    fn axpy_layout_mismatch_names_segment() {
        let x = ParamVector::zeros(two_segment_layout());
        let other = Arc::new(Layout::new(vec![
            Segment::new("a", &[2, 3]),
            Segment::new("c", &[4]),
        ]));
        let y = ParamVector::zeros(other);
        match axpy(1.0, &x, &y) {
            Err(Error::LayoutMismatch { segment }) => assert_eq!(segment, "b"),
            other => panic!("expected layout mismatch, got {other:?}"),
        }
    }

    #[test]
    fn layout_ranges() {
        let l = two_segment_layout();
        assert_eq!(l.len(), 10);
        assert_eq!(l.range("a"), Some(0..6));
        assert_eq!(l.range("b"), Some(6..10));
        assert_eq!(l.range("zz"), None);
    }

    #[test]
    fn fd_gradient_examples() {
        let w = ParamVector::from_slice(&[3.0, -1.0]);
        let g = fd_gradient(|p| 0.5 * p.dot(p).unwrap(), &w, 1e-5).unwrap();
        assert!((g.values()[0] - 3.0).abs() < 1e-8);
        assert!((g.values()[1] + 1.0).abs() < 1e-8);

        let g = fd_gradient(|_| 4.2, &w, 1e-5).unwrap();
        assert_eq!(g.values(), &[0.0, 0.0]);
    }

    #[test]
    fn fd_gradient_reports_non_finite_index() {
        let w = ParamVector::from_slice(&[1.0, 0.0, 1.0]);
        let err = fd_gradient(
            |p| if p.values()[1] > 0.0 { f64::NAN } else { 0.0 },
            &w,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
    }

    #[test]
    fn fd_hvp_examples() {
        let w = ParamVector::from_slice(&[0.3, -0.7]);
        let v = w.with_values(vec![1.0, 2.0]).unwrap();
        let h = fd_hvp(|p| Ok(p.clone()), &w, &v, 1e-4).unwrap();
        assert!(relative_error(h.values(), &[1.0, 2.0], 1e-12) < 1e-10);

        let v = w.with_values(vec![1.0, 1.0]).unwrap();
        let d = [2.0, 5.0];
        let h = fd_hvp(
            |p| p.with_values(p.values().iter().zip(d).map(|(x, s)| x * s).collect()),
            &w,
            &v,
            1e-4,
        )
        .unwrap();
        assert!(relative_error(h.values(), &[2.0, 5.0], 1e-12) < 1e-10);
    }

    #[test]
    fn rejects_non_positive_step() {
        let w = ParamVector::from_slice(&[1.0]);
        assert!(fd_gradient(|_| 0.0, &w, 0.0).is_err());
        assert!(fd_hvp(|p| Ok(p.clone()), &w, &w, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(values in prop::collection::vec(-1e6f64..1e6, 10)) {
            let v = ParamVector::unflatten(two_segment_layout(), values.clone()).unwrap();
            let back = ParamVector::unflatten(v.layout().clone(), v.flatten()).unwrap();
            prop_assert_eq!(back.values(), &values[..]);
        }

        #[test]
        fn axpy_is_deterministic_and_closed(
            a in -10.0f64..10.0,
            xs in prop::collection::vec(-1e3f64..1e3, 10),
            ys in prop::collection::vec(-1e3f64..1e3, 10),
        ) {
            let x = ParamVector::unflatten(two_segment_layout(), xs).unwrap();
            let y = ParamVector::unflatten(two_segment_layout(), ys).unwrap();
            let r1 = axpy(a, &x, &y).unwrap();
            let r2 = axpy(a, &x, &y).unwrap();
            prop_assert_eq!(r1.layout(), y.layout());
            for (p, q) in r1.values().iter().zip(r2.values()) {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }
}
