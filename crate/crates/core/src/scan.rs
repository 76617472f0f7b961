//! Kernels for the first-order linear recurrence `h_t = a_t ⊙ h_{t-1} + b_t`
//! with `h_0 = 0`, the state-update primitive of the selective scan.
//!
//! Two interchangeable kernels sit behind [`ScanKernel`] and are selected by
//! name: a plain left-to-right recurrence, and a work-efficient tree scan
//! over the associative combine
//! `(a1, b1) ∘ (a2, b2) = (a1·a2, a2·b1 + b2)`
//! (O(T) work, O(log T) span). Both produce the same states up to float
//! reassociation.

use crate::scalar::Scalar;

/// A strategy for computing all prefix states of the recurrence.
///
/// Inputs are row-major `[T, L]` buffers: `T` time steps of `L` independent
/// lanes. Lane `l` of step `t` lives at index `t * L + l`.
pub trait ScanKernel<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns all states `h_t`, same `[T, L]` layout as the inputs.
    fn run(&self, a: &[F], b: &[F], steps: usize, lanes: usize) -> Vec<F>;
}

/// Left-to-right evaluation of the recurrence.
pub struct SequentialScan;

impl<F: Scalar> ScanKernel<F> for SequentialScan {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn run(&self, a: &[F], b: &[F], steps: usize, lanes: usize) -> Vec<F> {
        debug_assert_eq!(a.len(), steps * lanes);
        debug_assert_eq!(b.len(), steps * lanes);
        let mut h = vec![F::zero(); steps * lanes];
        if steps == 0 {
            return h;
        }
        h[..lanes].copy_from_slice(&b[..lanes]);
        for t in 1..steps {
            let base = t * lanes;
            let prev = base - lanes;
            for l in 0..lanes {
                h[base + l] = a[base + l] * h[prev + l] + b[base + l];
            }
        }
        h
    }
}

/// Blelloch-style up-sweep/down-sweep over the associative combine.
///
/// Steps are padded with the combine identity `(1, 0)` to the next power of
/// two; identity padding leaves the real prefixes exact.
pub struct ParallelScan;

impl<F: Scalar> ScanKernel<F> for ParallelScan {
    fn name(&self) -> &'static str {
        "parallel"
    }

    fn run(&self, a: &[F], b: &[F], steps: usize, lanes: usize) -> Vec<F> {
        debug_assert_eq!(a.len(), steps * lanes);
        debug_assert_eq!(b.len(), steps * lanes);
        if steps == 0 {
            return Vec::new();
        }
        let n = steps.next_power_of_two();

        // Working pair (av, bv) per padded step, all lanes side by side.
        let mut av = vec![F::one(); n * lanes];
        let mut bv = vec![F::zero(); n * lanes];
        av[..steps * lanes].copy_from_slice(a);
        bv[..steps * lanes].copy_from_slice(b);

        // Up-sweep: node at `hi` becomes the combine of its subtree,
        // earlier half at `lo` first.
        let mut stride = 1;
        while stride < n {
            let step = stride * 2;
            let mut hi = step - 1;
            while hi < n {
                let lo = hi - stride;
                combine_rows(&mut av, &mut bv, lo, hi, lanes);
                hi += step;
            }
            stride = step;
        }

        // Down-sweep: turn subtree totals into exclusive prefixes.
        // Root prefix is the identity.
        for l in 0..lanes {
            av[(n - 1) * lanes + l] = F::one();
            bv[(n - 1) * lanes + l] = F::zero();
        }
        let mut stride = n / 2;
        while stride >= 1 {
            let step = stride * 2;
            let mut hi = step - 1;
            while hi < n {
                let lo = hi - stride;
                // Left child takes the parent prefix; right child takes
                // parent prefix ∘ left subtree total (prefix is earlier,
                // so it is the first operand).
                for l in 0..lanes {
                    let li = lo * lanes + l;
                    let hi_i = hi * lanes + l;
                    let (la, lb) = (av[li], bv[li]);
                    let (pa, pb) = (av[hi_i], bv[hi_i]);
                    av[li] = pa;
                    bv[li] = pb;
                    av[hi_i] = pa * la;
                    bv[hi_i] = la * pb + lb;
                }
                hi += step;
            }
            stride /= 2;
        }

        // Inclusive prefix = exclusive prefix ∘ element; applying a prefix
        // pair (A, B) to h_0 = 0 leaves just the B component.
        let mut h = vec![F::zero(); steps * lanes];
        for t in 0..steps {
            for l in 0..lanes {
                let i = t * lanes + l;
                h[i] = a[i] * bv[i] + b[i];
            }
        }
        h
    }
}

/// In-place `pair[hi] = pair[lo] ∘ pair[hi]` across all lanes of two rows.
fn combine_rows<F: Scalar>(av: &mut [F], bv: &mut [F], lo: usize, hi: usize, lanes: usize) {
    for l in 0..lanes {
        let li = lo * lanes + l;
        let hi_i = hi * lanes + l;
        let (a1, b1) = (av[li], bv[li]);
        let (a2, b2) = (av[hi_i], bv[hi_i]);
        av[hi_i] = a1 * a2;
        bv[hi_i] = a2 * b1 + b2;
    }
}

/// Registered kernel names, lookup order stable.
pub fn kernel_names() -> &'static [&'static str] {
    &["parallel", "sequential"]
}

/// Look up a kernel by its registered name.
pub fn kernel_by_name<F: Scalar>(name: &str) -> Option<&'static dyn ScanKernel<F>> {
    match name {
        "sequential" => Some(&SequentialScan),
        "parallel" => Some(&ParallelScan),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(a: &[f64], b: &[f64], t: usize, l: usize) -> Vec<f64> {
        ScanKernel::<f64>::run(&SequentialScan, a, b, t, l)
    }

    fn par(a: &[f64], b: &[f64], t: usize, l: usize) -> Vec<f64> {
        ScanKernel::<f64>::run(&ParallelScan, a, b, t, l)
    }

    #[test]
    fn running_count_when_all_ones() {
        let t = 9;
        let a = vec![1.0; t];
        let b = vec![1.0; t];
        let h = seq(&a, &b, t, 1);
        for (i, v) in h.iter().enumerate() {
            assert_eq!(*v, (i + 1) as f64);
        }
    }

    #[test]
    fn memoryless_when_decay_zero() {
        let a = vec![0.0; 5];
        let b = vec![3.0, 1.0, 4.0, 1.0, 5.0];
        assert_eq!(seq(&a, &b, 5, 1), b);
    }

    #[test]
    fn matches_closed_form_expansion() {
        // h_t = sum_{s<=t} (prod_{r=s+1..t} a_r) b_s, expanded directly.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 7;
        let lanes = 3;
        let a: Vec<f64> = (0..t * lanes).map(|_| rng.gen_range(0.1..1.0)).collect();
        let b: Vec<f64> = (0..t * lanes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = seq(&a, &b, t, lanes);
        for l in 0..lanes {
            for ti in 0..t {
                let mut expect = 0.0;
                for s in 0..=ti {
                    let mut prod = 1.0;
                    for r in s + 1..=ti {
                        prod *= a[r * lanes + l];
                    }
                    expect += prod * b[s * lanes + l];
                }
                assert!((h[ti * lanes + l] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &t in &[1usize, 2, 3, 8, 17, 1000] {
            let lanes = 4;
            let a: Vec<f64> = (0..t * lanes).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..t * lanes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let hs = seq(&a, &b, t, lanes);
            let hp = par(&a, &b, t, lanes);
            let max_diff = hs
                .iter()
                .zip(&hp)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "T={t}: max diff {max_diff}");
        }
    }

    #[test]
    fn single_step_returns_drive() {
        let h = par(&[0.3], &[2.5], 1, 1);
        assert_eq!(h, vec![2.5]);
    }

    #[test]
    fn registry_lookup() {
        assert!(kernel_by_name::<f64>("sequential").is_some());
        assert!(kernel_by_name::<f64>("parallel").is_some());
        assert!(kernel_by_name::<f64>("simd").is_none());
        assert_eq!(kernel_names().len(), 2);
    }
}
