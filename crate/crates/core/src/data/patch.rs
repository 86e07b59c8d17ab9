use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N = ⌊(L − P)/S⌋ + 1`.
pub fn patch_count(l: usize, p: usize, s: usize) -> Result<usize> {
    if p == 0 || s == 0 {
        return Err(Error::Parameter("patch length and stride must be positive".into()));
    }
    if p > l {
        return Err(Error::Parameter(format!(
            "patch length {p} exceeds look-back window {l}"
        )));
    }
    Ok((l - p) / s + 1)
}

/// Slices each variable of `input` (`L × V`) into patches, giving a
/// `V·N × P` matrix with variable-major row blocks. Samples after the last
/// full patch are dropped.
pub fn patch_matrix(input: &Tensor, p: usize, s: usize) -> Result<Tensor> {
    let (l, v) = (input.rows(), input.cols());
    let n = patch_count(l, p, s)?;
    let mut data = Vec::with_capacity(v * n * p);
    for var in 0..v {
        for i in 0..n {
            for j in 0..p {
                data.push(input.get(i * s + j, var));
            }
        }
    }
    Tensor::new(&[v * n, p], data)
}

/// The `N × D` embedding sequence of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub embeddings: Tensor,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Channel-independent patch embedding with a shared `P × D` projection.
pub fn embed_patches(input: &Tensor, p: usize, s: usize, weight: &Tensor, bias: &Tensor) -> Result<Vec<PatchSequence>> {
    let patches = patch_matrix(input, p, s)?;
    let n = patches.rows() / input.cols();
    let mut emb = patches.matmul(weight)?;
    let d = emb.cols();
    if bias.len() != d {
        return Err(Error::Dimension(format!(
            "bias {:?} does not match embedding width {d}",
            bias.shape()
        )));
    }
    for (i, x) in emb.data_mut().iter_mut().enumerate() {
        *x += bias.data()[i % d];
    }
    Ok((0..input.cols())
        .map(|v| PatchSequence {
            embeddings: Tensor::new(&[n, d], emb.data()[v * n * d..(v + 1) * n * d].to_vec()).expect("block shape"),
            patch_len: p,
            stride: s,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_counts_for_reference_settings() {
        assert_eq!(patch_count(96, 48, 12).unwrap(), 5);
        assert_eq!(patch_count(36, 24, 4).unwrap(), 4);
        assert!(patch_count(10, 11, 1).is_err());
    }

    #[test]
    fn zero_projection_gives_zero_embeddings() {
        let input = Tensor::new(&[96, 7], (0..96 * 7).map(|i| i as f64).collect()).unwrap();
        let seqs = embed_patches(&input, 48, 12, &Tensor::zeros(&[48, 8]), &Tensor::zeros(&[1, 8])).unwrap();
        assert_eq!(seqs.len(), 7);
        for s in seqs {
            assert_eq!(s.embeddings.shape(), &[5, 8]);
            assert!(s.embeddings.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn patches_copy_the_right_samples() {
        let input = Tensor::new(&[10, 2], (0..20).map(|i| i as f64).collect()).unwrap();
        let m = patch_matrix(&input, 4, 3).unwrap();
        // N = (10-4)/3 + 1 = 3, trailing sample 9 dropped
        assert_eq!(m.shape(), &[6, 4]);
        assert_eq!(m.row(1), &[6.0, 8.0, 10.0, 12.0]);
        assert_eq!(m.row(5), &[13.0, 15.0, 17.0, 19.0]);
    }

    proptest! {
        #[test]
        fn count_formula_and_patches_fit(l in 1usize..200, p in 1usize..200, s in 1usize..50) {
            prop_assume!(p <= l);
            let n = patch_count(l, p, s).unwrap();
            prop_assert!(n >= 1);
            prop_assert_eq!(n, (l - p) / s + 1);
            // last patch ends inside the window, one more would not
            prop_assert!((n - 1) * s + p <= l);
            prop_assert!(n * s + p > l);
        }
    }
}
