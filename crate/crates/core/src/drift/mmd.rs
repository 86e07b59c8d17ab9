use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `exp(-‖x − y‖² / 2σ²)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    Ok(rbf(x, y, 1.0 / (2.0 * sigma * sigma)))
}

#[inline]
fn rbf(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    (-sq_dist(x, y) * gamma).exp()
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median heuristic: lower median of the pairwise Euclidean distances. A zero
/// median falls back to the smallest positive distance, and to 1.0 when all
/// samples coincide.
pub fn median_bandwidth(samples: &Tensor) -> Result<f64> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::Data(format!("median heuristic needs 2 samples, got {n}")));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(samples.row(i), samples.row(j)).sqrt());
        }
    }
    let median = lower_median(&mut d);
    if median > 0.0 {
        return Ok(median);
    }
    Ok(d.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min))
        .map(|m| if m.is_finite() { m } else { 1.0 })
}

/// Element at index `(len − 1) / 2` of the sorted values.
pub(crate) fn lower_median(values: &mut [f64]) -> f64 {
    let mid = (values.len() - 1) / 2;
    *values.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Reference and current sample windows, each `N × V`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub reference: Tensor,
    pub current: Tensor,
    pub ref_origin: usize,
    pub cur_origin: usize,
}

impl WindowPair {
    pub fn new(reference: Tensor, current: Tensor) -> Result<Self> {
        Self::at(reference, current, 0, 0)
    }

    pub fn at(reference: Tensor, current: Tensor, ref_origin: usize, cur_origin: usize) -> Result<Self> {
        if reference.rows() < 2 || current.rows() < 2 {
            return Err(Error::Data(format!(
                "MMD windows need at least 2 samples each, got {} and {}",
                reference.rows(),
                current.rows()
            )));
        }
        if reference.cols() != current.cols() {
            return Err(Error::Dimension(format!(
                "window dimensions differ: {:?} vs {:?}",
                reference.shape(),
                current.shape()
            )));
        }
        Ok(Self {
            reference,
            current,
            ref_origin,
            cur_origin,
        })
    }

    pub fn swapped(&self) -> Self {
        Self {
            reference: self.current.clone(),
            current: self.reference.clone(),
            ref_origin: self.cur_origin,
            cur_origin: self.ref_origin,
        }
    }
}

struct KernelSums {
    /// Σ_{i≠j} k(x_i, x_j) over reference pairs
    ref_off: f64,
    cur_off: f64,
    cross: f64,
}

fn kernel_sums(a: &Tensor, b: &Tensor, gamma: f64) -> KernelSums {
    // Evaluate in a canonical orientation so swapping the windows gives
    // bitwise-identical sums.
    if a.data()
        .iter()
        .map(|x| x.to_bits())
        .lt(b.data().iter().map(|x| x.to_bits()))
    {
        let s = kernel_sums(b, a, gamma);
        return KernelSums {
            ref_off: s.cur_off,
            cur_off: s.ref_off,
            cross: s.cross,
        };
    }
    let within = |t: &Tensor| {
        let mut s = 0.0;
        for i in 0..t.rows() {
            for j in i + 1..t.rows() {
                s += rbf(t.row(i), t.row(j), gamma);
            }
        }
        2.0 * s
    };
    let cross = if a.rows() == b.rows() {
        // diagonal first, then mirrored pairs in the order `within` uses, so
        // identical windows reproduce `within + n` exactly
        let n = a.rows();
        let diag: f64 = (0..n).map(|i| rbf(a.row(i), b.row(i), gamma)).sum();
        let mut pairs = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                pairs += rbf(a.row(i), b.row(j), gamma) + rbf(a.row(j), b.row(i), gamma);
            }
        }
        pairs + diag
    } else {
        let mut c = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                c += rbf(a.row(i), b.row(j), gamma);
            }
        }
        c
    };
    KernelSums {
        ref_off: within(a),
        cur_off: within(b),
        cross,
    }
}

fn gamma_of(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    Ok(1.0 / (2.0 * sigma * sigma))
}

/// Squared MMD, V-statistic form: all three double sums include the diagonal.
pub fn mmd_squared_biased(pair: &WindowPair, sigma: f64) -> Result<f64> {
    let gamma = gamma_of(sigma)?;
    let (nr, nc) = (pair.reference.rows() as f64, pair.current.rows() as f64);
    let s = kernel_sums(&pair.reference, &pair.current, gamma);
    // k(x, x) = 1 on the diagonal
    let xx = (s.ref_off + nr) / (nr * nr);
    let yy = (s.cur_off + nc) / (nc * nc);
    let xy = 2.0 * s.cross / (nr * nc);
    Ok((xx + yy) - xy)
}

/// Squared MMD, U-statistic form (diagonals excluded). Can be negative.
pub fn mmd_squared_unbiased(pair: &WindowPair, sigma: f64) -> Result<f64> {
    let gamma = gamma_of(sigma)?;
    let (nr, nc) = (pair.reference.rows() as f64, pair.current.rows() as f64);
    let s = kernel_sums(&pair.reference, &pair.current, gamma);
    Ok((s.ref_off / (nr * (nr - 1.0)) + s.cur_off / (nc * (nc - 1.0))) - 2.0 * s.cross / (nr * nc))
}

/// Deviation bound of the empirical MMD that holds with probability `1 − δ`
/// for a kernel bounded by `k_max`.
pub fn concentration_bound(k_max: f64, n_s: usize, n_t: usize, delta: f64) -> f64 {
    let (ns, nt) = (n_s as f64, n_t as f64);
    2.0 * k_max.sqrt() * (1.0 / ns.sqrt() + 1.0 / nt.sqrt()) + (2.0 * k_max * (2.0 / delta).ln() / ns.min(nt)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(rbf_kernel(&[1.5, -2.0], &[1.5, -2.0], 0.3).unwrap(), 1.0);
        let k = rbf_kernel(&[0.0], &[2.0], 1.0).unwrap();
        assert!((k - (-2.0f64).exp()).abs() < 1e-15);
        assert!((k - 0.135335).abs() < 1e-6);
        let wide = rbf_kernel(&[0.0], &[2.0], 1e3).unwrap();
        assert!(wide > k && wide > 0.999_99);
        assert!(rbf_kernel(&[0.0], &[1.0], 0.0).is_err());
        assert!(rbf_kernel(&[0.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_bandwidth(&col(&[0.0, 1.0, 3.0])).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&col(&[4.0, 4.0, 4.0])).unwrap(), 1.0);
        // distances {0,0,0,0,0,3} in some order: median 0 -> smallest positive
        assert_eq!(median_bandwidth(&col(&[0.0, 0.0, 0.0, 3.0])).unwrap(), 3.0);
        assert!(matches!(median_bandwidth(&col(&[1.0])), Err(Error::Data(_))));
    }

    #[test]
    fn median_even_count_uses_lower_median() {
        assert_eq!(lower_median(&mut [4.0, 2.0, 1.0, 3.0]), 2.0);
        let pts = col(&[0.0, 1.0, 3.0, 7.0]);
        // distances: 1,3,7,2,6,4 -> sorted 1,2,3,4,6,7 -> lower median 3
        assert_eq!(median_bandwidth(&pts).unwrap(), 3.0);
    }

    #[test]
    fn biased_mmd_hand_example() {
        let pair = WindowPair::new(col(&[0.0, 0.0]), col(&[2.0, 2.0])).unwrap();
        let v = mmd_squared_biased(&pair, 1.0).unwrap();
        assert!((v - (2.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-12);
        assert!((v - 1.72933).abs() < 1e-5);
        assert!(WindowPair::new(col(&[0.0]), col(&[2.0])).is_err());
    }

    #[test]
    fn identical_windows() {
        let w = col(&[0.1, 0.5, -0.3, 2.0]);
        let pair = WindowPair::new(w.clone(), w).unwrap();
        assert!(mmd_squared_biased(&pair, 0.7).unwrap().abs() < 1e-12);
        // distinct points: the U-statistic goes negative
        assert!(mmd_squared_unbiased(&pair, 0.7).unwrap() < 0.0);
    }

    #[test]
    fn bound_value() {
        let b = concentration_bound(1.0, 100, 100, 0.05);
        assert!((b - (0.4 + (2.0 * 40f64.ln() / 100.0).sqrt())).abs() < 1e-15);
        assert!((b - 0.6716).abs() < 1e-4);
    }
}
