//! CSV parsing, split arithmetic, normalization and window placement.

use multitoken_core::config::{ConstantChannels, DataOptions, SplitRatios};
use multitoken_core::data::{export_forecast, load_csv, parse_csv, split_bounds, ExportFormat};
use multitoken_core::{Error, Forecast, Series, Split};

fn csv_text(rows: usize) -> String {
    let mut s = String::from("date,a,b\n");
    for t in 0..rows {
        let a = (t as f64 * 0.3).sin() * 4.0 + 10.0;
        let b = t as f64 * 0.5 - 7.0;
        s.push_str(&format!("2020-01-01 {t:02}:00,{a},{b}\n"));
    }
    s
}

fn population_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

#[test]
fn dated_file_with_train_statistics() {
    let d = parse_csv("toy", &csv_text(100), &DataOptions::default()).unwrap();
    assert_eq!(d.columns, vec!["a", "b"]);
    assert_eq!(d.timestamps.as_ref().unwrap().len(), 100);
    assert_eq!((d.train_end, d.val_end), (70, 80));
    let raw_b: Vec<f64> = (0..100).map(|t| t as f64 * 0.5 - 7.0).collect();
    let (m, s) = population_stats(&raw_b[..70]);
    assert!((d.norm.mean[1] - m).abs() < 1e-12 && (d.norm.std[1] - s).abs() < 1e-12);
    for t in 0..100 {
        assert!((d.values.channel(1)[t] - (raw_b[t] - m) / s).abs() < 1e-12);
    }
    let train = d.split_values(Split::Train);
    let (m0, s0) = population_stats(train.channel(0));
    assert!(m0.abs() < 1e-12 && (s0 - 1.0).abs() < 1e-12);
    let back = d.denormalize(&d.values);
    assert!((back.channel(1)[99] - raw_b[99]).abs() < 1e-9);
}

#[test]
fn ett_names_use_six_two_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ETTtoy.csv");
    std::fs::write(&path, csv_text(100)).unwrap();
    let d = load_csv(&path, &DataOptions::default()).unwrap();
    assert_eq!(d.name, "ETTtoy");
    assert_eq!((d.train_end, d.val_end), (60, 80));
    assert_eq!(split_bounds(17420, (6, 2, 2)).unwrap(), (10452, 13936));
    assert_eq!(split_bounds(69680, (6, 2, 2)).unwrap(), (41808, 55744));
}

#[test]
fn headerless_date_detection_and_plain_numbers() {
    let plain = "x,y\n1,2\n3,4\n5,7\n2,2\n4,1\n6,0\n7,3\n1,1\n2,5\n9,9\n";
    let opts = DataOptions {
        split: SplitRatios::Fixed(6, 2, 2),
        ..DataOptions::default()
    };
    let d = parse_csv("p", plain, &opts).unwrap();
    assert!(d.timestamps.is_none());
    assert_eq!(d.channels(), 2);
    assert_eq!(d.rows(), 10);
}

#[test]
fn parse_errors_locate_the_cell() {
    let bad = "date,a,b\nd0,1,2\nd1,3,oops\n";
    match parse_csv("bad", bad, &DataOptions::default()) {
        Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 3)),
        other => panic!("{other:?}"),
    }
    let ragged = "date,a,b\nd0,1,2\nd1,3\n";
    assert!(matches!(
        parse_csv("r", ragged, &DataOptions::default()),
        Err(Error::Parse { row: 3, .. }) | Err(Error::Csv(_))
    ));
    let nan = "a,b\n1,NaN\n";
    assert!(matches!(
        parse_csv("n", nan, &DataOptions::default()),
        Err(Error::Parse {
            row: 2,
            column: 2,
            ..
        })
    ));
    assert!(matches!(
        parse_csv("one", "a\n1\n2\n", &DataOptions::default()),
        Err(Error::Format(_))
    ));
    assert!(matches!(
        parse_csv("empty", "a,b\n", &DataOptions::default()),
        Err(Error::Format(_))
    ));
}

#[test]
fn constant_channel_policy() {
    let text = "a,b\n".to_owned() + &(0..20).map(|i| format!("{i},5\n")).collect::<String>();
    assert!(matches!(
        parse_csv("c", &text, &DataOptions::default()),
        Err(Error::ConstantChannel { channel: 1, .. })
    ));
    let guard = DataOptions {
        constant_channels: ConstantChannels::Guard,
        ..DataOptions::default()
    };
    let d = parse_csv("c", &text, &guard).unwrap();
    assert_eq!(d.norm.std[1], 1.0);
}

#[test]
fn windows_respect_split_edges() {
    let d = parse_csv("toy", &csv_text(400), &DataOptions::default()).unwrap();
    let (l, h) = (48, 12);
    for split in [Split::Train, Split::Val, Split::Test] {
        let (start, end) = d.range(split);
        let origins = d.window_origins(split, l, h, 1);
        assert!(!origins.is_empty());
        for &o in &origins {
            assert!(o + l >= start && o + l + h <= end);
            if split == Split::Train {
                assert!(o >= start);
            }
        }
        let w = d.sample(origins[0], l, h).unwrap();
        assert_eq!((w.x.len(), w.y.len()), (l, h));
        assert_eq!(w.y.channel(0)[0], d.values.channel(0)[origins[0] + l]);
    }
    assert!(d.window_origins(Split::Val, 48, 41, 1).is_empty());
}

#[test]
fn exported_parts_sum_to_prediction() {
    let d = parse_csv("toy", &csv_text(100), &DataOptions::default()).unwrap();
    let b0 = Series::new(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap();
    let b1 = Series::new(2, 3, vec![0.5, 0.5, 0.5, 0.25, 0.25, 0.25]).unwrap();
    let fc = Forecast {
        prediction: b0.zip_with(&b1, |a, b| a + b).unwrap(),
        branch_outputs: vec![b0.clone(), b1.clone()],
        branch_contributions: vec![b0, b1],
    };
    let json = export_forecast(&fc, &d.columns, Some(&d.norm), ExportFormat::Json).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for ch in v["channels"].as_array().unwrap() {
        let offset = ch["offset"].as_f64().unwrap();
        let pred = ch["prediction"].as_array().unwrap();
        let branches = ch["branches"].as_array().unwrap();
        for t in 0..3 {
            let sum: f64 = branches.iter().map(|b| b[t].as_f64().unwrap()).sum();
            assert!((offset + sum - pred[t].as_f64().unwrap()).abs() < 1e-9);
        }
    }
    let csv = export_forecast(&fc, &d.columns, None, ExportFormat::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "channel,step,prediction,offset,branch0,branch1"
    );
    assert_eq!(lines.count(), 6);
}
