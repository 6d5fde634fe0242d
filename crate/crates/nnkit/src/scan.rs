//! First-order linear recurrences `x_t = a_t · x_{t-1} + b_t` evaluated as a
//! prefix scan over the affine-map monoid.
//!
//! Coefficients are signed. Composition of affine maps is associative, so the
//! sequence is split into blocks, each block is reduced to a single map, the
//! block maps are scanned to obtain every block's entry state, and finally
//! every block is expanded from its entry state. Blocks are independent in
//! the first and last phase.

use num_traits::Float;

/// The affine map `x ↦ a·x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine<T> {
    pub a: T,
    pub b: T,
}

impl<T: Float> Affine<T> {
    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
        }
    }

    pub fn apply(self, x: T) -> T {
        self.a * x + self.b
    }

    /// `self` followed by `next`, i.e. `next ∘ self`.
    pub fn then(self, next: Self) -> Self {
        Self {
            a: next.a * self.a,
            b: next.a * self.b + next.b,
        }
    }
}

pub const DEFAULT_BLOCK: usize = 256;

/// Plain left-to-right evaluation. Reference for [`affine_scan`].
pub fn affine_sequential<T: Float>(a: &[T], b: &[T], x0: T, out: &mut [T]) {
    assert!(a.len() == b.len() && a.len() == out.len());
    let mut x = x0;
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        x = ai * x + bi;
        *o = x;
    }
}

/// Inclusive scan of `x_t = a_t x_{t-1} + b_t` with `x_{-1} = x0`.
pub fn affine_scan<T: Float>(a: &[T], b: &[T], x0: T, out: &mut [T]) {
    affine_scan_blocked(a, b, x0, out, DEFAULT_BLOCK);
}

pub fn affine_scan_blocked<T: Float>(a: &[T], b: &[T], x0: T, out: &mut [T], block: usize) {
    assert!(a.len() == b.len() && a.len() == out.len());
    assert!(block > 0);
    let n = a.len();
    if n == 0 {
        return;
    }
    let n_blocks = n.div_ceil(block);

    // Phase 1: reduce every block to one map. Within a block, use a
    // Hillis-Steele style pairwise tree so the reduction order is the
    // associative one rather than a running fold.
    let aggregates: Vec<Affine<T>> = (0..n_blocks)
        .map(|k| {
            let lo = k * block;
            let hi = (lo + block).min(n);
            reduce_tree(&a[lo..hi], &b[lo..hi])
        })
        .collect();

    // Phase 2: exclusive scan over block maps gives each block's entry state.
    let mut entry = Vec::with_capacity(n_blocks);
    let mut state = x0;
    for agg in &aggregates {
        entry.push(state);
        state = agg.apply(state);
    }

    // Phase 3: expand each block from its entry state.
    for (k, &x_in) in entry.iter().enumerate() {
        let lo = k * block;
        let hi = (lo + block).min(n);
        affine_sequential(&a[lo..hi], &b[lo..hi], x_in, &mut out[lo..hi]);
    }
}

fn reduce_tree<T: Float>(a: &[T], b: &[T]) -> Affine<T> {
    let mut maps: Vec<Affine<T>> = a
        .iter()
        .zip(b)
        .map(|(&a, &b)| Affine { a, b })
        .collect();
    while maps.len() > 1 {
        let next: Vec<Affine<T>> = maps
            .chunks(2)
            .map(|pair| match pair {
                [first, second] => first.then(*second),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
        maps = next;
    }
    maps.pop().unwrap_or_else(Affine::identity)
}

/// Reverse-time scan `y_t = a_next[t] · y_{t+1} + c_t` with `y_n = 0`,
/// evaluated through [`affine_scan`] on the reversed sequence. Used for
/// adjoints of forward recurrences.
pub fn affine_scan_reverse<T: Float>(a_next: &[T], c: &[T], out: &mut [T]) {
    let n = c.len();
    assert!(a_next.len() == n && out.len() == n);
    let ra: Vec<T> = (0..n).map(|i| a_next[n - 1 - i]).collect();
    let rc: Vec<T> = (0..n).map(|i| c[n - 1 - i]).collect();
    let mut tmp = vec![T::zero(); n];
    affine_scan(&ra, &rc, T::zero(), &mut tmp);
    for i in 0..n {
        out[i] = tmp[n - 1 - i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_is_associative_on_exact_values() {
        let f = Affine { a: 0.5, b: 1.0 };
        let g = Affine { a: -2.0, b: 0.25 };
        let h = Affine { a: 4.0, b: -1.0 };
        assert_eq!(f.then(g).then(h), f.then(g.then(h)));
        assert_eq!(f.then(Affine::identity()), f);
    }

    #[test]
    fn blocked_matches_sequential_for_odd_lengths() {
        for n in [1usize, 2, 3, 7, 17, 300, 1025] {
            let a: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
            let b: Vec<f64> = (0..n).map(|i| ((i * 104729) % 11) as f64 / 11.0).collect();
            let mut s = vec![0.0; n];
            let mut p = vec![0.0; n];
            affine_sequential(&a, &b, 0.3, &mut s);
            for block in [1, 2, 5, 256] {
                affine_scan_blocked(&a, &b, 0.3, &mut p, block);
                for (x, y) in s.iter().zip(&p) {
                    assert!((x - y).abs() < 1e-12, "n={n} block={block}");
                }
            }
        }
    }

    #[test]
    fn reverse_scan_matches_loop() {
        let a = [0.5, -0.25, 0.75, 0.1];
        let c = [1.0, 2.0, -1.0, 0.5];
        let mut out = [0.0; 4];
        affine_scan_reverse(&a, &c, &mut out);
        let mut y = 0.0;
        let mut expect = [0.0; 4];
        for t in (0..4).rev() {
            y = a[t] * y + c[t];
            expect[t] = y;
        }
        for (x, e) in out.iter().zip(&expect) {
            assert!((x - e).abs() < 1e-15);
        }
    }
}
