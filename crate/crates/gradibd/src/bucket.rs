//! Visit-bucketized frequency encoding.
//!
//! An irregular visit sequence becomes a sparse codes-by-buckets count
//! matrix: time is cut into fixed-width buckets of `tau` days and each
//! cell holds how often a code was recorded inside a bucket. With
//! `tau = 1` this degenerates to one bucket per day, i.e. a per-visit
//! encoding.

use std::collections::BTreeMap;

use crate::codec::{CodecError, CodeVocab};
use crate::cohort::CohortRecord;

/// Sparse code-by-bucket frequency matrix for one patient.
///
/// Only strictly positive counts are stored. Keys are ordered
/// `(bucket, code)` so iteration is already grouped chronologically,
/// which is the order the graph builder wants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketMatrix {
    n_codes: usize,
    n_buckets: usize,
    tau: i64,
    entries: BTreeMap<(usize, usize), u32>,
}

impl BucketMatrix {
    /// Number of code rows (the vocabulary size N).
    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    /// Total number of bucket columns T.
    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    /// Bucket width in days.
    pub fn tau(&self) -> i64 {
        self.tau
    }

    /// Count for `(code, bucket)`, zero when absent.
    pub fn get(&self, code: usize, bucket: usize) -> u32 {
        self.entries.get(&(bucket, code)).copied().unwrap_or(0)
    }

    /// Nonzero cells in `(bucket, code)` order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.entries.iter().map(|(&(b, c), &f)| (b, c, f))
    }

    /// Number of `(code, bucket)` pairs with positive frequency.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Sorted indices of buckets holding at least one entry.
    pub fn nonempty_buckets(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for (&(b, _), _) in &self.entries {
            if out.last() != Some(&b) {
                out.push(b);
            }
        }
        out
    }

    /// Sum of all stored frequencies, i.e. total code occurrences.
    pub fn total_occurrences(&self) -> u64 {
        self.entries.values().map(|&f| u64::from(f)).sum()
    }
}

/// Bucketize one patient's visits into a sparse frequency matrix.
///
/// `T = ceil(window_days / tau)` buckets cover the observation window
/// starting at `max(0, record.cutoff_day() - window_days)`; a code
/// occurrence at day `d` lands in bucket `(d - window_start) / tau`.
/// Occurrences of the same code in the same bucket accumulate. Visits
/// outside `[window_start, cutoff_day]` are ignored; a record left empty
/// by truncation yields a matrix with zero entries.
///
/// The cutoff day itself is usable, so when `tau` divides `window_days`
/// exactly, the final day of a full-length window would index one past
/// the last bucket; it is clamped into bucket `T - 1` instead of being
/// dropped, keeping total frequency equal to the in-window occurrence
/// count at every bucket width.
///
/// Buckets are aligned to the window start rather than any calendar
/// boundary, so the encoding is independent of absolute dates.
pub fn bucketize(
    record: &CohortRecord,
    vocab: &CodeVocab,
    tau: i64,
    window_days: i64,
) -> Result<BucketMatrix, CodecError> {
    assert!(tau >= 1, "tau must be at least one day");
    assert!(window_days >= tau, "window must cover at least one bucket");
    let cutoff = record.cutoff_day();
    let window_start = (cutoff - window_days).max(0);
    let n_buckets = (window_days as usize).div_ceil(tau as usize);

    let mut entries: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for visit in &record.visits {
        if visit.day_offset < window_start || visit.day_offset > cutoff {
            continue;
        }
        let bucket = (((visit.day_offset - window_start) / tau) as usize).min(n_buckets - 1);
        for raw in &visit.codes {
            let code = vocab.encode(raw)?;
            *entries.entry((bucket, code)).or_insert(0) += 1;
        }
    }
    Ok(BucketMatrix { n_codes: vocab.n(), n_buckets, tau, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Visit;
    use proptest::prelude::*;

    fn vocab() -> CodeVocab {
        CodeVocab::build((0..26).map(|i| format!("{}01", (b'A' + i as u8) as char))).unwrap()
    }

    fn record(anchor: i64, visits: Vec<(i64, Vec<&str>)>) -> CohortRecord {
        CohortRecord::new(
            "p1".into(),
            0,
            anchor,
            visits
                .into_iter()
                .map(|(d, codes)| Visit {
                    day_offset: d,
                    codes: codes.into_iter().map(String::from).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn counts_accumulate_within_buckets() {
        let v = vocab();
        // Code F01 (id 5) at days 0, 3, 10 with weekly buckets.
        let r = record(1095, vec![(0, vec!["F01"]), (3, vec!["F01"]), (10, vec!["F01"])]);
        let m = bucketize(&r, &v, 7, 1095).unwrap();
        assert_eq!(m.get(5, 0), 2);
        assert_eq!(m.get(5, 1), 1);
        assert_eq!(m.nonempty_buckets(), vec![0, 1]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.n_buckets(), 157);
    }

    #[test]
    fn tau_one_is_per_day() {
        let v = vocab();
        let r = record(1095, vec![(0, vec!["A01"]), (1, vec!["A01", "B01"])]);
        let m = bucketize(&r, &v, 1, 1095).unwrap();
        assert_eq!(m.n_buckets(), 1095);
        assert_eq!(m.get(0, 0), 1);
        assert_eq!(m.get(0, 1), 1);
        assert_eq!(m.get(1, 1), 1);
    }

    #[test]
    fn empty_record_gives_zero_entries() {
        let v = vocab();
        let r = record(400, vec![]);
        let m = bucketize(&r, &v, 7, 1095).unwrap();
        assert_eq!(m.nnz(), 0);
        assert_eq!(m.n_buckets(), 157);
        assert!(m.nonempty_buckets().is_empty());
    }

    #[test]
    fn truncated_visits_do_not_count() {
        let v = vocab();
        let r = record(400, vec![(10, vec!["A01"]), (390, vec!["B01"])]);
        let t = r.apply_prediction_interval(30);
        let m = bucketize(&t, &v, 7, 1095).unwrap();
        assert_eq!(m.total_occurrences(), 1);
    }

    #[test]
    fn unknown_codes_land_on_unk_row() {
        let v = CodeVocab::build(["K50"]).unwrap();
        let r = record(400, vec![(0, vec!["Z99.9"])]);
        let m = bucketize(&r, &v, 7, 1095).unwrap();
        assert_eq!(m.get(v.unk_id(), 0), 1);
    }

    #[test]
    fn boundary_day_is_counted() {
        let v = vocab();
        let r = record(400, vec![(370, vec!["A01"]), (380, vec!["B01"])]);
        let t = r.apply_prediction_interval(30);
        let m = bucketize(&t, &v, 7, 1095).unwrap();
        assert_eq!(m.total_occurrences(), 1);
        assert_eq!(m.get(0, 370 / 7), 1);
    }

    #[test]
    fn full_window_endpoint_clamps_into_last_bucket() {
        // With tau dividing window_days and a full-length window, the
        // inclusive cutoff day indexes one past the end; it must land in
        // the last bucket rather than vanish.
        let v = vocab();
        let r = record(400, vec![(370, vec!["A01"])]);
        let t = r.apply_prediction_interval(30);
        let m = bucketize(&t, &v, 5, 10).unwrap();
        assert_eq!(m.n_buckets(), 2);
        assert_eq!(m.total_occurrences(), 1);
        assert_eq!(m.get(0, 1), 1);
    }

    prop_compose! {
        fn arb_record()(
            visits in proptest::collection::vec(
                (0i64..1000, proptest::collection::vec(0usize..26, 1..5)),
                0..40,
            )
        ) -> CohortRecord {
            let mut visits: Vec<(i64, Vec<usize>)> = visits;
            visits.sort_by_key(|(d, _)| *d);
            CohortRecord::new(
                "p".into(),
                0,
                1000,
                visits
                    .into_iter()
                    .map(|(d, ids)| Visit {
                        day_offset: d,
                        codes: ids
                            .into_iter()
                            .map(|i| format!("{}01", (b'A' + i as u8) as char))
                            .collect(),
                    })
                    .collect(),
            )
            .unwrap()
        }
    }

    proptest! {
        // Oracle: total stored mass is a direct recount of the visit list.
        #[test]
        fn total_mass_matches_recount(r in arb_record(), tau in 1i64..40) {
            let v = vocab();
            let m = bucketize(&r, &v, tau, 1095).unwrap();
            let brute: usize = r.visits.iter().map(|vi| vi.codes.len()).sum();
            prop_assert_eq!(m.total_occurrences(), brute as u64);
        }

        // Oracle: nnz equals a densify-and-count scan.
        #[test]
        fn nnz_matches_dense_scan(r in arb_record(), tau in 1i64..40) {
            let v = vocab();
            let m = bucketize(&r, &v, tau, 1095).unwrap();
            let mut dense = vec![vec![0u32; m.n_buckets()]; m.n_codes()];
            for (b, c, f) in m.iter() {
                dense[c][b] = f;
            }
            let count = dense.iter().flatten().filter(|&&f| f > 0).count();
            prop_assert_eq!(m.nnz(), count);
        }

        // Column sums equal per-bucket occurrence counts recomputed from
        // the raw visits.
        #[test]
        fn column_sums_match_visits(r in arb_record(), tau in 1i64..40) {
            let v = vocab();
            let m = bucketize(&r, &v, tau, 1095).unwrap();
            let mut per_bucket = vec![0u64; m.n_buckets()];
            for visit in &r.visits {
                per_bucket[(visit.day_offset / tau) as usize] += visit.codes.len() as u64;
            }
            let mut col = vec![0u64; m.n_buckets()];
            for (b, _, f) in m.iter() {
                col[b] += u64::from(f);
            }
            prop_assert_eq!(col, per_bucket);
        }

        // Weekly buckets refine exactly into daily buckets summed over
        // seven-day runs.
        #[test]
        fn weekly_equals_daily_aggregated(r in arb_record()) {
            let v = vocab();
            let weekly = bucketize(&r, &v, 7, 1095).unwrap();
            let daily = bucketize(&r, &v, 1, 1095).unwrap();
            for (b, c, f) in weekly.iter() {
                let summed: u32 = (0..7).map(|k| daily.get(c, b * 7 + k)).sum();
                prop_assert_eq!(f, summed);
            }
            prop_assert_eq!(weekly.total_occurrences(), daily.total_occurrences());
        }

        // Shuffling codes within visits cannot change the matrix.
        #[test]
        fn invariant_under_code_order(r in arb_record(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let v = vocab();
            let a = bucketize(&r, &v, 7, 1095).unwrap();
            let mut shuffled = r.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for visit in &mut shuffled.visits {
                visit.codes.shuffle(&mut rng);
            }
            let b = bucketize(&shuffled, &v, 7, 1095).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
