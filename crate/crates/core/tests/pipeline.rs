use towscan::anomaly::{label_windows, AnomalyMap, ScorePoint, TowSignal};
use towscan::depth::{decode_pgm, encode_pgm, preprocess};
use towscan::localize::{blobs_to_boxes, detect_map_blobs, iou, DEFAULT_SCALES};
use towscan::sampler::{extract_windows, window_centers};
use towscan::synth::{generate, random_defects, DefectKind, DefectSpec, SynthSpec};
use towscan::tows::detect_tows;
use towscan::SampleLabel;

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn detected_layout_matches_generator_on_a_few_seeds() {
    for seed in 0..8 {
        let scan = generate(&spec(seed)).unwrap();
        let layout = detect_tows(&preprocess(&scan.map).map, 8).unwrap();
        assert_eq!(layout.tow_count(), 8);
        for (got, want) in layout.centerlines.iter().zip(&scan.layout.centerlines) {
            assert!(
                got.row.abs_diff(want.row) <= 1,
                "seed {seed}: {got:?} vs {want:?}"
            );
        }
        let (l, r) = layout.vertical_bounds;
        let (gl, gr) = scan.layout.vertical_bounds;
        assert!(l.abs_diff(gl) <= 1 && r.abs_diff(gr) <= 1, "seed {seed}");
    }
}

#[test]
fn raw_scan_survives_pgm_round_trip() {
    let scan = generate(&spec(4)).unwrap();
    let back = decode_pgm(&encode_pgm(&scan.map).unwrap()).unwrap();
    assert_eq!(back.width(), 256);
    for (a, b) in scan.map.pixels().iter().zip(back.pixels()) {
        assert_eq!((b * 65535.0).round(), a.round());
    }
}

#[test]
fn windows_cover_every_tow_and_defects_label_abnormal() {
    let mut s = spec(9);
    s.defects = random_defects(&s, 3, 1);
    let scan = generate(&s).unwrap();
    let norm = preprocess(&scan.map).map;
    let layout = detect_tows(&norm, 8).unwrap();
    let mut set = extract_windows(&norm, &layout, 32, 8).unwrap();
    let per_tow = window_centers(layout.vertical_bounds.0, layout.vertical_bounds.1, 32, 8).len();
    assert_eq!(set.len(), 8 * per_tow);
    assert!(set.samples.iter().all(|w| w.pixels.len() == 1024));
    label_windows(&mut set, &scan.boxes, 0.1);
    let abnormal: Vec<_> = set
        .samples
        .iter()
        .filter(|w| w.label == SampleLabel::Abnormal)
        .collect();
    assert!(abnormal.len() >= 3);
    for b in &scan.boxes {
        assert!(abnormal.iter().any(|w| {
            let cx = w.center_x as f64;
            cx > b.x && cx < b.x + b.w && w.tow_index == b.tow
        }));
    }
}

#[test]
fn bump_in_a_signal_becomes_a_box_on_the_defect() {
    let mut s = spec(2);
    s.defects = vec![DefectSpec {
        kind: DefectKind::Gap,
        tow_index: 5,
        x_start: 100,
        x_extent: 40,
        magnitude: 1.0,
    }];
    let scan = generate(&s).unwrap();
    let layout = &scan.layout;
    // an idealized anomaly signal: a Gaussian bump over the defect footprint
    let truth = &scan.boxes[0];
    let centre = truth.x + truth.w / 2.0;
    let centers = window_centers(layout.vertical_bounds.0, layout.vertical_bounds.1, 32, 8);
    let tows = layout
        .centerlines
        .iter()
        .map(|c| TowSignal {
            tow_index: c.tow_index,
            points: centers
                .iter()
                .map(|&x| ScorePoint {
                    center_x: x,
                    center_y: c.row,
                    score: 1e-4
                        + if c.tow_index == 5 {
                            0.01 * (-((x as f64 - centre) / 16.0).powi(2) / 2.0).exp()
                        } else {
                            0.0
                        },
                })
                .collect(),
        })
        .collect();
    let map = AnomalyMap {
        width: 256,
        height: 256,
        window: 32,
        stride: 8,
        tows,
    };
    let blobs = detect_map_blobs(&map, &DEFAULT_SCALES, 1e-3).unwrap();
    assert_eq!(blobs.len(), 1);
    let boxes = blobs_to_boxes(&blobs, layout, 21, 32, 8, (256, 256)).unwrap();
    assert_eq!(boxes[0].tow, 5);
    assert!(iou(&boxes[0], truth) > 0.5, "{:?} vs {:?}", boxes[0], truth);
}
