//! Dense tensors, sparsemax and its directional derivative, softmax, and a
//! central-difference gradient checker.
//!
//! All arithmetic is f64 even though hidden-state files store f32: the
//! gradient checks elsewhere in the crate assert relative errors below 1e-6,
//! which f32 cannot support. Every function here is pure; there is no shared
//! mutable state.

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `values.len()` matches the dims product
    /// and that every entry is finite.
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if values.len() != expected {
            return Err(Error::DimMismatch(format!(
                "tensor dims {dims:?} require {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tensor value at flat index {pos} is not finite"
            )));
        }
        Ok(Self { dims, values })
    }

    /// All-zero tensor with the given dims.
    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Flat offset of a row in a tensor whose last dim is the feature axis.
    /// For dims `[a, b, d]`, `row_offset(&[i, j])` is the start of the
    /// length-`d` slice at `(i, j, ..)`.
    pub fn row_offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len() + 1, self.dims.len());
        let mut off = 0;
        for (k, &i) in index.iter().enumerate() {
            debug_assert!(i < self.dims[k]);
            off = off * self.dims[k] + i;
        }
        off * self.dims[self.dims.len() - 1]
    }

    /// Borrow the length-`last_dim` row at `index` (all dims but the last).
    pub fn row(&self, index: &[usize]) -> &[f64] {
        let d = self.dims[self.dims.len() - 1];
        let off = self.row_offset(index);
        &self.values[off..off + d]
    }
}

/// Nonnegative vector summing to 1 (within 1e-12).
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validate and wrap. Entries may be exactly zero.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument(
                "simplex vector must be nonempty".into(),
            ));
        }
        if entries.iter().any(|&e| e < 0.0 || !e.is_finite()) {
            return Err(Error::InvalidArgument(
                "simplex vector entries must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "simplex vector sums to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_finite_nonempty(name: &str, z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} must be nonempty")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} contains a non-finite value"
        )));
    }
    Ok(())
}

/// Signed gaps `z_i - tau` after shifting `z` by its max, where tau is the
/// threshold making `max(z - tau, 0)` the Euclidean projection of `z` onto
/// the probability simplex.
///
/// Sort-based rule: with `w = z - max(z)` sorted as `w_(1) >= w_(2) >= ...`,
/// the support size is the largest k with `1 + k * w_(k) > sum_{j<=k} w_(j)`,
/// and `tau = (sum_{j<=k} w_(j) - 1) / k`. The max shift changes nothing in
/// exact arithmetic (tau absorbs it) and is what makes shift invariance hold
/// bit-for-bit whenever `z + c` is exactly representable.
fn support_gaps(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|&zi| zi - max).collect();
    let mut sorted = w.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut k = 1;
    for (j, &wj) in sorted.iter().enumerate() {
        cumsum += wj;
        if 1.0 + (j as f64 + 1.0) * wj > cumsum {
            k = j + 1;
        } else {
            cumsum -= wj;
            break;
        }
    }
    let tau = (cumsum - 1.0) / k as f64;
    w.into_iter().map(|wi| wi - tau).collect()
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Components at or below the threshold come out exactly zero, which is what
/// lets the layer-pooling weights ignore layers entirely.
pub fn sparsemax(z: &[f64]) -> Result<SimplexVector> {
    check_finite_nonempty("sparsemax input", z)?;
    let mut out: Vec<f64> = support_gaps(z).iter().map(|&g| g.max(0.0)).collect();
    // Sweep up the last-ulp drift so the SimplexVector invariant (sum within
    // 1e-12) holds for any input magnitude.
    let sum: f64 = out.iter().sum();
    if sum > 0.0 && sum != 1.0 {
        for v in &mut out {
            *v /= sum;
        }
    }
    SimplexVector::new(out)
}

/// Jacobian-vector product of sparsemax at `z` applied to `v`.
///
/// On the support S of `sparsemax(z)` the Jacobian acts as centering:
/// `(Jv)_i = v_i - mean_{j in S}(v_j)`; off-support rows are zero. The
/// Jacobian is symmetric, so this same function serves as the
/// vector-Jacobian product in backpropagation.
///
/// Returns [`Error::Boundary`] when any off-support entry lies strictly
/// within 1e-9 below the threshold (the numerically ambiguous case);
/// callers perturb and retry. An entry exactly at the threshold is treated
/// as off-support and the support-side one-sided Jacobian is returned.
pub fn sparsemax_jvp(z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_finite_nonempty("sparsemax_jvp input", z)?;
    if z.len() != v.len() {
        return Err(Error::DimMismatch(format!(
            "sparsemax_jvp: |z| = {}, |v| = {}",
            z.len(),
            v.len()
        )));
    }
    let gaps = support_gaps(z);
    let mut support = Vec::with_capacity(z.len());
    for (i, &gap) in gaps.iter().enumerate() {
        if gap > 0.0 {
            support.push(i);
        } else if gap > -1e-9 && gap != 0.0 {
            return Err(Error::Boundary(i));
        }
    }
    let mean: f64 = support.iter().map(|&i| v[i]).sum::<f64>() / support.len() as f64;
    let mut out = vec![0.0; z.len()];
    for &i in &support {
        out[i] = v[i] - mean;
    }
    Ok(out)
}

/// Numerically stable softmax (max-shifted exponentials).
pub fn softmax(z: &[f64]) -> Result<SimplexVector> {
    check_finite_nonempty("softmax input", z)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&zi| (zi - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    SimplexVector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// This is the oracle the analytic gradients are checked against; it never
/// shares code with them.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_grad: step must be positive and finite, got {h}"
        )));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "finite_diff_grad: objective is non-finite near coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}
