//! Encoded image representations.

/// An image representation `phi(I)` plus a short record of how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Set when `values` has unit (or zero) l2 norm.
    pub l2_normalised: bool,
    /// Encoder tag followed by the post-processing steps applied, e.g.
    /// `"fv:k16:d22|ssqrt|l2-blocks|l2"`.
    pub provenance: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, provenance: impl Into<String>) -> Self {
        Self {
            values,
            l2_normalised: false,
            provenance: provenance.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Scales to unit l2 norm; zero vectors are left untouched.
    pub fn l2_normalised(mut self) -> Self {
        l2_normalise(&mut self.values);
        self.l2_normalised = true;
        self.provenance.push_str("|l2");
        self
    }

    pub fn with_step(mut self, step: &str) -> Self {
        self.provenance.push('|');
        self.provenance.push_str(step);
        self
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// In-place l2 normalisation. Returns the norm before scaling.
pub fn l2_normalise(v: &mut [f64]) -> f64 {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn signed_sqrt(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.signum() * x.abs().sqrt());
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
