//! Equal-count binning of values sorted by a key.

use std::ops::Range;

/// Splits `len` sorted items into `n_bins` contiguous ranges whose sizes
/// differ by at most one. Fewer bins are returned when `len < n_bins`.
pub fn equal_count_ranges(len: usize, n_bins: usize) -> Vec<Range<usize>> {
    let bins = n_bins.min(len);
    if bins == 0 {
        return Vec::new();
    }
    let base = len / bins;
    let extra = len % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Median of a sorted slice.
pub fn sorted_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "median of empty slice");
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median of arbitrary values (NaNs are not expected).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    sorted_median(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranges_cover_everything() {
        let r = equal_count_ranges(10, 3);
        assert_eq!(r, vec![0..4, 4..7, 7..10]);
        assert_eq!(equal_count_ranges(2, 5).len(), 2);
        assert!(equal_count_ranges(0, 5).is_empty());
    }

    #[test]
    fn medians() {
        assert_eq!(sorted_median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(sorted_median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    proptest! {
        #[test]
        fn bin_sizes_differ_by_at_most_one(len in 0usize..500, bins in 1usize..120) {
            let r = equal_count_ranges(len, bins);
            let sizes: Vec<usize> = r.iter().map(|x| x.len()).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), len);
            if let (Some(lo), Some(hi)) = (sizes.iter().min(), sizes.iter().max()) {
                prop_assert!(hi - lo <= 1);
                prop_assert!(*lo >= 1);
            }
            for w in r.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
        }
    }
}
