use batchcast::data::{
    load_dataset, make_minibatches, minibatch_count, standardize, step_origin, synth_ar, write_long_csv, DataFormat, Granularity, Series, Split, SynthConfig,
    TimeSeriesDataset,
};
use proptest::prelude::*;

fn single(values: Vec<f64>) -> TimeSeriesDataset {
    let s = Series { id: "x".into(), start: step_origin(), start_step: None, values, split: None };
    TimeSeriesDataset::new(Granularity::Hourly, vec![s]).unwrap()
}

/// Every admissible newest index, filtered to the stride lattice from the first one.
fn enumerate(len: usize, span: std::ops::Range<usize>, p: usize, d: usize, stride: usize) -> Vec<usize> {
    let admissible: Vec<usize> = (0..len).filter(|&t| t + 1 >= d && t + 1 - d >= p && t + 1 - d >= span.start && t < span.end).collect();
    admissible.iter().copied().filter(|t| (t - admissible[0]).is_multiple_of(stride)).collect()
}

proptest! {
    #[test]
    fn minibatch_enumeration_matches_brute_force(len in 2usize..120, p in 1usize..12, d in 1usize..12, stride in 1usize..9, start_frac in 0.0f64..0.5) {
        let ds = single(vec![0.0; len]);
        let start = (start_frac * len as f64) as usize;
        let expected = enumerate(len, start..len, p, d, stride);
        match make_minibatches(&ds, 0, start..len, p, d, stride) {
            Ok(batches) => {
                let got: Vec<usize> = batches.iter().map(|b| b.newest).collect();
                prop_assert_eq!(&got, &expected);
                if start == 0 {
                    prop_assert_eq!(got.len(), minibatch_count(len, p, d, stride));
                }
            }
            Err(_) => prop_assert!(expected.is_empty()),
        }
    }

    #[test]
    fn windows_reconstruct_the_series(values in prop::collection::vec(-50.0f64..50.0, 30..60), p in 1usize..8, d in 1usize..6) {
        let ds = single(values.clone());
        for b in make_minibatches(&ds, 0, 0..values.len(), p, d, 1).unwrap() {
            for (k, w) in b.windows(&ds).iter().enumerate() {
                prop_assert_eq!(w.target_index, b.newest + 1 + k - d);
                prop_assert_eq!(w.target, values[w.target_index]);
                prop_assert_eq!(w.inputs.len(), p + 1);
                prop_assert_eq!(w.inputs[0].lag_value, 0.0);
                for (j, input) in w.inputs.iter().enumerate().skip(1) {
                    prop_assert_eq!(input.lag_value, values[w.target_index - p + j - 1]);
                }
            }
        }
    }

    #[test]
    fn standardization_round_trips(values in prop::collection::vec(-1e3f64..1e3, 40..80), span in 5usize..15) {
        let ds = single(values.clone()).with_splits(span).unwrap();
        let (std_ds, table) = standardize(&ds).unwrap();
        let scaler = table.get(0);
        prop_assert!(scaler.std > 0.0);
        for (raw, z) in values.iter().zip(&std_ds.series()[0].values) {
            prop_assert!((scaler.inverse(*z) - raw).abs() <= 1e-12 * raw.abs().max(1.0));
        }
    }

    #[test]
    fn splits_never_leak(len in 30usize..200, span in 1usize..15) {
        let ds = single(vec![1.0; len]).with_splits(span).unwrap();
        let s = &ds.series()[0];
        let (tr, va, te) = (s.span(Split::Train).unwrap(), s.span(Split::Validation).unwrap(), s.span(Split::Test).unwrap());
        prop_assert!(tr.end <= va.start && va.end <= te.start);
        prop_assert_eq!(va.len(), te.len());
        prop_assert!(ds.timestamp(0, tr.end as i64 - 1) < ds.timestamp(0, va.start as i64));
        prop_assert!(ds.timestamp(0, va.end as i64 - 1) < ds.timestamp(0, te.start as i64));
    }
}

#[test]
fn synthetic_files_reload_identically() {
    let cfg = SynthConfig { n_series: 3, length: 300, seed: 9, ..SynthConfig::default() };
    let ds = synth_ar(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.csv");
    write_long_csv(&ds, &path).unwrap();
    let back = load_dataset(&path, DataFormat::LongCsv, None).unwrap();
    assert_eq!(back.granularity(), Granularity::Hourly);
    assert_eq!(back.n_series(), 3);
    for (a, b) in ds.series().iter().zip(back.series()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.values, b.values);
    }
    let again = dir.path().join("again.csv");
    write_long_csv(&synth_ar(&cfg).unwrap(), &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn wide_and_long_layouts_agree() {
    let dir = tempfile::tempdir().unwrap();
    let long = dir.path().join("long.csv");
    let wide = dir.path().join("wide.csv");
    let mut l = String::from("series_id,timestamp,value\n");
    let mut w = String::from("timestamp,a,b\n");
    for t in 0..6 {
        let ts = format!("2024-03-0{}T00:00:00Z", t + 1);
        l.push_str(&format!("a,{ts},{}\nb,{ts},{}\n", t as f64, 10.0 - t as f64));
        w.push_str(&format!("{ts},{},{}\n", t as f64, 10.0 - t as f64));
    }
    std::fs::write(&long, l).unwrap();
    std::fs::write(&wide, w).unwrap();
    let a = load_dataset(&long, DataFormat::LongCsv, None).unwrap();
    let b = load_dataset(&wide, DataFormat::WideCsv, None).unwrap();
    assert_eq!(a.granularity(), Granularity::Daily);
    assert_eq!(a.series(), b.series());
}
