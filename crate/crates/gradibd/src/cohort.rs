//! Patient cohort data model, JSONL ingestion, prediction-interval
//! truncation, synthetic cohort generation, and the stratified holdout
//! split.
//!
//! A patient is a labeled sequence of timestamped visits, each carrying
//! one or more raw diagnosis codes, observed in the window preceding an
//! anchor day (the diagnosis of interest). Day offsets are relative to
//! the start of the observation window.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard cap on the lookback window: three years in days.
pub const MAX_LOOKBACK_DAYS: i64 = 1095;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invariant violation on {field}: {message}")]
    InvariantViolation {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("too few records: {0}")]
    TooFewRecords(String),
}

/// One clinical visit: a day offset inside the observation window and a
/// non-empty list of raw diagnosis codes received that day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub day_offset: i64,
    pub codes: Vec<String>,
}

/// One patient's labeled diagnosis trajectory.
///
/// Invariants enforced at construction: visits sorted non-decreasing by
/// day, every visit strictly before the anchor, anchor within the
/// three-year lookback cap, day offsets non-negative, codes non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRecord {
    pub patient_id: String,
    pub label: u8,
    pub anchor_day: i64,
    pub visits: Vec<Visit>,
    /// Last usable day after prediction-interval truncation: visits
    /// strictly after it have been removed. Equals `anchor_day` on a
    /// freshly loaded record. Not part of the on-disk schema.
    cutoff_day: i64,
}

/// On-disk JSONL row: exactly these keys, nothing else.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    patient_id: String,
    label: u8,
    anchor_day: i64,
    visits: Vec<Visit>,
}

impl CohortRecord {
    /// Validate fields and construct a record. `line` is only used to
    /// annotate error messages (0 for in-memory construction).
    pub fn new(
        patient_id: String,
        label: u8,
        anchor_day: i64,
        visits: Vec<Visit>,
    ) -> Result<Self, CohortError> {
        Self::validate(patient_id, label, anchor_day, visits, 0)
    }

    fn validate(
        patient_id: String,
        label: u8,
        anchor_day: i64,
        visits: Vec<Visit>,
        line: usize,
    ) -> Result<Self, CohortError> {
        let fail = |field, message: String| CohortError::InvariantViolation { line, field, message };
        if label > 1 {
            return Err(fail("label", format!("expected 0 or 1, got {label}")));
        }
        if anchor_day > MAX_LOOKBACK_DAYS {
            return Err(fail(
                "anchor_day",
                format!("{anchor_day} exceeds the {MAX_LOOKBACK_DAYS}-day lookback cap"),
            ));
        }
        if anchor_day < 0 {
            return Err(fail("anchor_day", format!("{anchor_day} is negative")));
        }
        let mut prev = i64::MIN;
        for v in &visits {
            if v.day_offset < 0 {
                return Err(fail("day_offset", format!("{} is negative", v.day_offset)));
            }
            if v.day_offset >= anchor_day {
                return Err(fail(
                    "day_offset",
                    format!("{} is not before anchor_day {anchor_day}", v.day_offset),
                ));
            }
            if v.day_offset < prev {
                return Err(fail(
                    "visits",
                    format!("not sorted: {} after {prev}", v.day_offset),
                ));
            }
            if v.codes.is_empty() {
                return Err(fail("codes", format!("visit at day {} has no codes", v.day_offset)));
            }
            prev = v.day_offset;
        }
        Ok(Self {
            patient_id,
            label,
            anchor_day,
            visits,
            cutoff_day: anchor_day,
        })
    }

    /// Last usable day of history, inclusive: `anchor_day - lead` once a
    /// prediction interval has been applied, `anchor_day` before that
    /// (validation already keeps every visit strictly before the anchor).
    pub fn cutoff_day(&self) -> i64 {
        self.cutoff_day
    }

    /// True when truncation (or the source data) left no usable visits.
    /// Such records are kept, not dropped, so test-set composition stays
    /// fixed across prediction-interval sweeps; they classify from a
    /// zero pooled embedding.
    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// Remove visits inside the prediction interval: everything after
    /// `anchor_day - lead_days` (the boundary day itself stays usable).
    /// The anchor is unchanged.
    ///
    /// Idempotent for a fixed lead; a larger lead always yields a
    /// subset of the visits of a smaller one.
    pub fn apply_prediction_interval(&self, lead_days: i64) -> Self {
        assert!(lead_days >= 0, "lead_days must be non-negative");
        let cutoff = self.anchor_day - lead_days;
        Self {
            patient_id: self.patient_id.clone(),
            label: self.label,
            anchor_day: self.anchor_day,
            visits: self
                .visits
                .iter()
                .filter(|v| v.day_offset <= cutoff)
                .cloned()
                .collect(),
            cutoff_day: cutoff.min(self.cutoff_day),
        }
    }

    fn to_raw(&self) -> RawRecord {
        RawRecord {
            patient_id: self.patient_id.clone(),
            label: self.label,
            anchor_day: self.anchor_day,
            visits: self.visits.clone(),
        }
    }

    /// Serialize to one JSONL line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("record serialization cannot fail")
    }
}

/// Read a JSONL cohort file, validating every record.
///
/// Errors carry the 1-based line number of the offending row. Blank
/// lines are permitted and skipped. An empty file is an empty cohort.
pub fn load_cohort(path: &Path) -> Result<Vec<CohortRecord>, CohortError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|source| CohortError::Parse { line: line_no, source })?;
        records.push(CohortRecord::validate(
            raw.patient_id,
            raw.label,
            raw.anchor_day,
            raw.visits,
            line_no,
        )?);
    }
    Ok(records)
}

/// Write a cohort as JSONL, one record per line.
pub fn save_cohort(path: &Path, records: &[CohortRecord]) -> Result<(), CohortError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", r.to_json_line())?;
    }
    f.flush()?;
    Ok(())
}

/// Synthetic cohort generator settings.
///
/// Substitute for private clinical data: controls draw background codes
/// from a Zipf distribution; cases additionally receive motif codes at
/// an intensity that ramps up linearly toward the anchor, so case and
/// control separate through both code identity and frequency dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub case_fraction: f64,
    pub background_vocab_size: usize,
    /// Indices into the synthetic code table that carry the case signal.
    pub motif_codes: Vec<usize>,
    /// Peak extra motif occurrences per visit at the anchor; 0 disables
    /// the signal entirely (null cohort).
    pub motif_ramp: f64,
    /// Mean visits per 30 days.
    pub visit_rate: f64,
    /// Mean background codes per visit (at least one is always drawn).
    pub codes_per_visit: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            case_fraction: 0.2,
            background_vocab_size: 150,
            motif_codes: vec![5, 23, 47],
            motif_ramp: 2.0,
            visit_rate: 3.0,
            codes_per_visit: 2.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn check(&self) -> Result<(), CohortError> {
        let err = |m: &str| Err(CohortError::Config(m.to_string()));
        if self.n_patients == 0 {
            return err("n_patients must be positive");
        }
        if !(self.case_fraction > 0.0 && self.case_fraction < 1.0) {
            return err("case_fraction must be in (0, 1)");
        }
        if self.background_vocab_size == 0 {
            return err("background_vocab_size must be positive");
        }
        if self.background_vocab_size > 2600 {
            return err("background_vocab_size exceeds the synthetic code table (2600)");
        }
        if self.visit_rate <= 0.0 {
            return err("visit_rate must be positive");
        }
        if self.codes_per_visit <= 0.0 {
            return err("codes_per_visit must be positive");
        }
        if self.motif_ramp < 0.0 {
            return err("motif_ramp must be non-negative");
        }
        if self.motif_codes.iter().any(|&m| m >= self.background_vocab_size) {
            return err("motif_codes must index into the background vocabulary");
        }
        Ok(())
    }
}

/// Map a synthetic code index to an ICD-like chapter string: A00..Z99.
fn synth_chapter(idx: usize) -> String {
    format!("{}{:02}", (b'A' + (idx / 100) as u8) as char, idx % 100)
}

/// Zipf exponent for background code frequencies.
const ZIPF_EXPONENT: f64 = 1.1;
/// Flat motif exposure shared by both groups, as a fraction of the ramp
/// peak, so code identity alone does not separate the classes.
const MOTIF_BASE_FRACTION: f64 = 0.15;
/// Days over which the case motif intensity ramps from 0 to its peak.
const MOTIF_RAMP_SPAN_DAYS: f64 = 365.0;

/// Generate a deterministic synthetic cohort.
///
/// The first `round(n_patients * case_fraction)` patients are cases.
/// Each patient draws from its own generator seeded from the master
/// seed and the patient index, so generation order (and parallelism)
/// cannot change the output.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<CohortRecord>, CohortError> {
    config.check()?;
    let n_cases = (config.n_patients as f64 * config.case_fraction).round() as usize;
    let records = (0..config.n_patients)
        .map(|i| generate_patient(config, i, i < n_cases))
        .collect();
    Ok(records)
}

fn generate_patient(config: &SynthConfig, index: usize, is_case: bool) -> CohortRecord {
    let seed = config
        .seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let anchor_day = rng.gen_range(365..=MAX_LOOKBACK_DAYS);
    let zipf = Zipf::new(config.background_vocab_size as u64, ZIPF_EXPONENT)
        .expect("validated zipf parameters");
    let interarrival = Exp::new(config.visit_rate / 30.0).expect("validated rate");

    let mut visits = Vec::new();
    let mut day = interarrival.sample(&mut rng);
    while (day as i64) < anchor_day {
        let day_offset = day as i64;
        let n_background = 1 + sample_poisson(&mut rng, config.codes_per_visit - 1.0);
        let mut codes: Vec<String> = (0..n_background)
            .map(|_| {
                let rank = zipf.sample(&mut rng) as usize;
                raw_code(&mut rng, rank - 1)
            })
            .collect();

        let base_rate = config.motif_ramp * MOTIF_BASE_FRACTION;
        let motif_rate = if is_case {
            let proximity =
                (1.0 - (anchor_day - day_offset) as f64 / MOTIF_RAMP_SPAN_DAYS).max(0.0);
            base_rate + config.motif_ramp * proximity
        } else {
            base_rate
        };
        if !config.motif_codes.is_empty() && motif_rate > 0.0 {
            for _ in 0..sample_poisson(&mut rng, motif_rate) {
                let pick = config.motif_codes[rng.gen_range(0..config.motif_codes.len())];
                codes.push(raw_code(&mut rng, pick));
            }
        }

        visits.push(Visit { day_offset, codes });
        day += interarrival.sample(&mut rng);
    }

    CohortRecord::new(
        format!("p{index:06}"),
        u8::from(is_case),
        anchor_day,
        visits,
    )
    .expect("generated record satisfies invariants")
}

/// Raw code string for a synthetic chapter, sometimes with a decimal
/// suffix so downstream truncation is actually exercised.
fn raw_code(rng: &mut ChaCha8Rng, idx: usize) -> String {
    let chapter = synth_chapter(idx);
    if rng.gen_bool(0.4) {
        format!("{chapter}.{}", rng.gen_range(0..10))
    } else {
        chapter
    }
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Split into train and test, stratified by label.
///
/// Per stratum the test share is `floor(n * test_fraction)`, which keeps
/// the test case fraction within one patient of the overall fraction.
/// Membership is a deterministic function of `seed`.
pub fn stratified_split(
    records: &[CohortRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<CohortRecord>, Vec<CohortRecord>), CohortError> {
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must be in (0, 1)"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [1u8, 0u8] {
        let mut stratum: Vec<&CohortRecord> = records.iter().filter(|r| r.label == label).collect();
        if stratum.is_empty() {
            return Err(CohortError::TooFewRecords(format!(
                "no records with label {label}"
            )));
        }
        let n_test = (stratum.len() as f64 * test_fraction).floor() as usize;
        if n_test == 0 || n_test == stratum.len() {
            return Err(CohortError::TooFewRecords(format!(
                "label {label} stratum of {} cannot give both splits at test_fraction {test_fraction}",
                stratum.len()
            )));
        }
        stratum.shuffle(&mut rng);
        for (i, r) in stratum.into_iter().enumerate() {
            if i < n_test {
                test.push(r.clone());
            } else {
                train.push(r.clone());
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(anchor: i64, days: &[i64]) -> CohortRecord {
        CohortRecord::new(
            "p1".into(),
            1,
            anchor,
            days.iter()
                .map(|&d| Visit { day_offset: d, codes: vec!["K50".into()] })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        std::fs::write(
            &path,
            r#"{"patient_id":"p1","label":1,"anchor_day":400,"visits":[{"day_offset":10,"codes":["R10.9"]}]}"#,
        )
        .unwrap();
        let records = load_cohort(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].patient_id, "p1");
        assert_eq!(records[0].visits[0].codes, vec!["R10.9"]);
        assert_eq!(records[0].cutoff_day(), 400);
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_cohort(&path).unwrap().is_empty());
    }

    #[test]
    fn load_rejects_visit_after_anchor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"patient_id":"p1","label":1,"anchor_day":400,"visits":[{"day_offset":500,"codes":["R10"]}]}"#,
        )
        .unwrap();
        let err = load_cohort(&path).unwrap_err();
        match err {
            CohortError::InvariantViolation { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "day_offset");
            }
            other => panic!("expected invariant violation, got {other}"),
        }
    }

    #[test]
    fn load_reports_parse_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"patient_id\":\"p1\",\"label\":0,\"anchor_day\":400,\"visits\":[]}\nnot json\n",
        )
        .unwrap();
        match load_cohort(&path).unwrap_err() {
            CohortError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn load_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"patient_id":"p1","label":0,"anchor_day":400,"visits":[],"extra":1}"#,
        )
        .unwrap();
        assert!(matches!(load_cohort(&path).unwrap_err(), CohortError::Parse { line: 1, .. }));
    }

    #[test]
    fn prediction_interval_removes_tail() {
        let r = record(400, &[10, 380]);
        let t = r.apply_prediction_interval(30);
        assert_eq!(t.visits.len(), 1);
        assert_eq!(t.visits[0].day_offset, 10);
        assert_eq!(t.anchor_day, 400);
        assert_eq!(t.cutoff_day(), 370);
    }

    #[test]
    fn prediction_interval_zero_is_identity() {
        let r = record(400, &[10, 380]);
        assert_eq!(r.apply_prediction_interval(0), r);
    }

    #[test]
    fn prediction_interval_keeps_early_visits() {
        let r = record(400, &[10]);
        let t = r.apply_prediction_interval(180);
        assert_eq!(t.visits.len(), 1);
    }

    #[test]
    fn prediction_interval_keeps_the_boundary_day() {
        let r = record(400, &[370, 380]);
        let t = r.apply_prediction_interval(30);
        assert_eq!(t.visits.len(), 1);
        assert_eq!(t.visits[0].day_offset, 370);
    }

    #[test]
    fn prediction_interval_can_empty_a_record() {
        let r = record(400, &[390, 395]);
        let t = r.apply_prediction_interval(30);
        assert!(t.is_empty());
        assert!(!r.is_empty());
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let config = SynthConfig {
            n_patients: 100,
            case_fraction: 0.2,
            seed: 7,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&config).unwrap();
        assert_eq!(a.iter().filter(|r| r.label == 1).count(), 20);
        assert_eq!(a.iter().filter(|r| r.label == 0).count(), 80);
        let b = generate_synthetic(&config).unwrap();
        let line = |rs: &[CohortRecord]| {
            rs.iter().map(|r| r.to_json_line()).collect::<Vec<_>>().join("\n")
        };
        assert_eq!(line(&a), line(&b));
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let config = SynthConfig { case_fraction: 1.5, ..SynthConfig::default() };
        assert!(matches!(generate_synthetic(&config), Err(CohortError::Config(_))));
        let config = SynthConfig { visit_rate: 0.0, ..SynthConfig::default() };
        assert!(matches!(generate_synthetic(&config), Err(CohortError::Config(_))));
    }

    #[test]
    fn null_signal_uses_no_motifs_differently() {
        // With motif_ramp = 0 neither group receives motif injections, so
        // the generation paths are identical; the chance-level training
        // check lives in the acceptance suite.
        let config = SynthConfig { motif_ramp: 0.0, n_patients: 40, ..SynthConfig::default() };
        let records = generate_synthetic(&config).unwrap();
        assert_eq!(records.len(), 40);
    }

    #[test]
    fn split_strata_counts() {
        let config = SynthConfig { n_patients: 100, case_fraction: 0.2, ..SynthConfig::default() };
        let records = generate_synthetic(&config).unwrap();
        let (train, test) = stratified_split(&records, 0.1, 3).unwrap();
        assert_eq!(test.iter().filter(|r| r.label == 1).count(), 2);
        assert_eq!(test.iter().filter(|r| r.label == 0).count(), 8);
        assert_eq!(train.len() + test.len(), 100);
    }

    #[test]
    fn split_matches_full_scale_arithmetic() {
        // 9038 patients with 1167 cases at 10% held out: floor per stratum
        // gives 116 + 787 = 903 test patients.
        let n_cases = 1167usize;
        let n_controls = 7871usize;
        let mut records = Vec::new();
        for i in 0..(n_cases + n_controls) {
            records.push(
                CohortRecord::new(format!("p{i}"), u8::from(i < n_cases), 400, vec![]).unwrap(),
            );
        }
        let (train, test) = stratified_split(&records, 0.1, 1).unwrap();
        assert_eq!(test.len(), 903);
        assert_eq!(train.len(), 8135);
        assert_eq!(test.iter().filter(|r| r.label == 1).count(), 116);
    }

    #[test]
    fn split_seed_changes_membership_not_counts() {
        let config = SynthConfig { n_patients: 60, ..SynthConfig::default() };
        let records = generate_synthetic(&config).unwrap();
        let (_, test_a) = stratified_split(&records, 0.25, 1).unwrap();
        let (_, test_b) = stratified_split(&records, 0.25, 2).unwrap();
        assert_eq!(test_a.len(), test_b.len());
        let ids = |t: &[CohortRecord]| t.iter().map(|r| r.patient_id.clone()).collect::<Vec<_>>();
        assert_ne!(ids(&test_a), ids(&test_b));
    }

    #[test]
    fn split_errors_on_missing_stratum() {
        let records: Vec<CohortRecord> = (0..10)
            .map(|i| CohortRecord::new(format!("p{i}"), 0, 400, vec![]).unwrap())
            .collect();
        assert!(matches!(
            stratified_split(&records, 0.2, 1),
            Err(CohortError::TooFewRecords(_))
        ));
    }

    proptest! {
        #[test]
        fn truncation_idempotent_and_monotone(
            days in proptest::collection::btree_set(0i64..400, 0..30),
            lead_a in 0i64..200,
            lead_b in 0i64..200,
        ) {
            let r = record(400, &days.into_iter().collect::<Vec<_>>());
            let ta = r.apply_prediction_interval(lead_a);
            prop_assert_eq!(ta.apply_prediction_interval(lead_a).visits.clone(), ta.visits.clone());
            let tb = r.apply_prediction_interval(lead_b);
            let (hi, lo) = if lead_a >= lead_b { (&ta, &tb) } else { (&tb, &ta) };
            for v in &hi.visits {
                prop_assert!(lo.visits.contains(v));
            }
        }

        #[test]
        fn synthetic_records_satisfy_invariants(seed in any::<u64>(), n in 1usize..20) {
            let config = SynthConfig {
                n_patients: n,
                seed,
                visit_rate: 2.0,
                ..SynthConfig::default()
            };
            for r in generate_synthetic(&config).unwrap() {
                prop_assert!(r.anchor_day >= 365 && r.anchor_day <= MAX_LOOKBACK_DAYS);
                let mut prev = -1i64;
                for v in &r.visits {
                    prop_assert!(v.day_offset >= 0);
                    prop_assert!(v.day_offset < r.anchor_day);
                    prop_assert!(v.day_offset >= prev);
                    prop_assert!(!v.codes.is_empty());
                    prev = v.day_offset;
                }
            }
        }

        #[test]
        fn split_partitions_input(n_cases in 4usize..30, n_controls in 4usize..60, seed in any::<u64>()) {
            let mut records = Vec::new();
            for i in 0..(n_cases + n_controls) {
                records.push(CohortRecord::new(format!("p{i}"), u8::from(i < n_cases), 500, vec![]).unwrap());
            }
            let (train, test) = stratified_split(&records, 0.3, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), records.len());
            let mut ids: Vec<&str> = train.iter().chain(test.iter()).map(|r| r.patient_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), records.len());
        }
    }
}
