use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::info::eigen::symmetric_eigenvalues;
use crate::scalar::Scalar;

/// Eigenvalues below this are treated as exact zeros.
pub const EIGEN_CLIP: f64 = 1e-12;
/// Eigenvalues below this are reported as a numeric failure.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = -1e-8;

/// Square kernel similarity matrix over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T> {
    n: usize,
    entries: Vec<T>,
    trace_normalized: bool,
}

/// Which batch entries take part in estimation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    active: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(active: Vec<bool>) -> Self {
        Self { active }
    }

    pub fn all_active(n: usize) -> Self {
        Self { active: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }
}

impl<T: Scalar> GramMatrix<T> {
    /// Wraps explicit entries, e.g. a hand-built matrix.
    pub fn from_entries(n: usize, entries: Vec<T>, trace_normalized: bool) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Contract(format!("gram: {} entries for n = {n}", entries.len())));
        }
        Ok(Self {
            n,
            entries,
            trace_normalized,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.n + j]
    }

    pub fn is_trace_normalized(&self) -> bool {
        self.trace_normalized
    }

    pub fn trace(&self) -> T {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Divides every entry by the trace.
    pub fn normalized(mut self) -> Result<Self> {
        let tr = self.trace();
        if !(tr > T::zero()) {
            return Err(Error::Estimation(format!("gram: cannot normalize a matrix with trace {tr}")));
        }
        for v in &mut self.entries {
            *v /= tr;
        }
        self.trace_normalized = true;
        Ok(self)
    }

    /// `M G M` for a diagonal 0/1 mask: inactive rows and columns are zeroed.
    pub fn masked(mut self, mask: &MaskMatrix) -> Result<Self> {
        if mask.len() != self.n {
            return Err(Error::Contract(format!("mask of length {} for n = {}", mask.len(), self.n)));
        }
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                if !(mask.is_active(i) && mask.is_active(j)) {
                    self.entries[i * n + j] = T::zero();
                }
            }
        }
        self.trace_normalized = false;
        Ok(self)
    }

    /// Eigenvalues of `(G + G^T) / 2`, ascending.
    pub fn eigenvalues(&self) -> Result<Vec<T>> {
        let n = self.n;
        let half = T::of(0.5);
        let mut sym = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = (self.get(i, j) + self.get(j, i)) * half;
            }
        }
        symmetric_eigenvalues(&sym, n)
    }
}

/// Raw Gaussian kernel matrix of the l2-normalized rows of `u` (`[N, D]`).
///
/// `G_ij = exp(-|u_i - u_j|^2 / (2 sigma^2))`. Zero rows are left as zero
/// vectors.
pub fn kernel_matrix<T: Scalar>(u: &Tensor<T>, sigma: T) -> Result<GramMatrix<T>> {
    if u.rank() != 2 {
        return Err(Error::Contract(format!("gram expects a [N, D] batch, got {:?}", u.shape())));
    }
    let (n, d) = (u.shape()[0], u.shape()[1]);
    if n < 2 {
        return Err(Error::Contract(format!("gram needs at least 2 samples, got {n}")));
    }
    if !(sigma > T::zero()) {
        return Err(Error::Contract(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    let mut rows = u.data().to_vec();
    for (i, row) in rows.chunks_mut(d.max(1)).enumerate().take(n) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            log::debug!("gram: row {i} is a zero vector; left unnormalized");
        }
    }
    let scale = T::one() / (T::of(2.0) * sigma * sigma);
    let mut entries = vec![T::zero(); n * n];
    for i in 0..n {
        entries[i * n + i] = T::one();
        let ri = &rows[i * d..(i + 1) * d];
        for j in i + 1..n {
            let rj = &rows[j * d..(j + 1) * d];
            let dist2: T = ri.iter().zip(rj).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let k = (-dist2 * scale).exp();
            entries[i * n + j] = k;
            entries[j * n + i] = k;
        }
    }
    GramMatrix::from_entries(n, entries, false)
}

/// Trace-normalized Gaussian Gram matrix of a batch.
pub fn gram<T: Scalar>(u: &Tensor<T>, sigma: T) -> Result<GramMatrix<T>> {
    kernel_matrix(u, sigma)?.normalized()
}

/// `-sum(l ln l)` over the eigenvalues of a trace-normalized Gram matrix, in
/// nats, with eigenvalues clipped to `[0, 1]` and `0 ln 0 = 0`.
pub fn matrix_entropy<T: Scalar>(g: &GramMatrix<T>) -> Result<T> {
    if !g.trace_normalized {
        return Err(Error::Contract("matrix entropy needs a trace-normalized Gram matrix".into()));
    }
    let eig = g.eigenvalues()?;
    let min = eig.first().copied().unwrap_or_else(T::zero);
    if min < T::of(NEGATIVE_EIGEN_TOLERANCE) {
        return Err(Error::Numeric(format!(
            "gram matrix is not positive semi-definite: smallest eigenvalue {min} (n = {}, largest {})",
            g.n,
            eig.last().copied().unwrap_or_else(T::zero)
        )));
    }
    let clip = T::of(EIGEN_CLIP);
    Ok(eig
        .into_iter()
        .map(|l| if l < clip { T::zero() } else { l.min(T::one()) })
        .filter(|l| *l > T::zero())
        .map(|l| -l * l.ln())
        .sum())
}

/// Hadamard product of two Gram matrices, trace-normalized.
pub fn joint_gram<T: Scalar>(a: &GramMatrix<T>, b: &GramMatrix<T>) -> Result<GramMatrix<T>> {
    if a.n != b.n {
        return Err(Error::Contract(format!("joint gram: n = {} vs n = {}", a.n, b.n)));
    }
    let entries = a.entries.iter().zip(&b.entries).map(|(&x, &y)| x * y).collect();
    GramMatrix::from_entries(a.n, entries, false)?.normalized()
}

/// Masked, trace-normalized Gram matrix; masking happens before normalization.
pub(crate) fn prepared_gram<T: Scalar>(
    u: &Tensor<T>,
    sigma: T,
    mask: Option<&MaskMatrix>,
) -> Result<(GramMatrix<T>, GramMatrix<T>)> {
    let raw = kernel_matrix(u, sigma)?;
    let raw = match mask {
        Some(m) => {
            if m.len() != raw.n {
                return Err(Error::Contract(format!("mask of length {} for n = {}", m.len(), raw.n)));
            }
            if m.active_count() < 2 {
                return Err(Error::Estimation(format!(
                    "need at least 2 active samples, got {}",
                    m.active_count()
                )));
            }
            raw.masked(m)?
        }
        None => raw,
    };
    let normalized = raw.clone().normalized()?;
    Ok((raw, normalized))
}

/// `I(U; V) = H(U) + H(V) - H(U, V)` from matrix-based entropies.
///
/// Not floored at zero, so small negative estimates stay visible.
pub fn mutual_information<T: Scalar>(
    u: &Tensor<T>,
    v: &Tensor<T>,
    sigma: T,
    mask: Option<&MaskMatrix>,
) -> Result<T> {
    if u.rank() != 2 || v.rank() != 2 || u.shape()[0] != v.shape()[0] {
        return Err(Error::Contract(format!(
            "mutual information needs batches of equal size, got {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let (gu_raw, gu) = prepared_gram(u, sigma, mask)?;
    let (gv_raw, gv) = prepared_gram(v, sigma, mask)?;
    let joint = joint_gram(&gu_raw, &gv_raw)?;
    Ok(matrix_entropy(&gu)? + matrix_entropy(&gv)? - matrix_entropy(&joint)?)
}
