mod common;

use rand::Rng;
use supcon::evaluate::export::{composition_csv, embedding_csv, EmbeddingRow};
use supcon::evaluate::{
    argmax, cluster_composition, embed_2d, full_composition, topk_accuracy, ward_cluster, weighted_f1,
};

#[test]
fn ward_matches_exhaustive_oracle() {
    let mut rng = common::rng(101);
    for trial in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n).map(|_| common::normal_vec(&mut rng, d)).collect();
        let k = rng.random_range(1..=n);
        let report = ward_cluster(&points, k).unwrap();
        let (partition, costs) = common::brute_force_ward(&points, k);
        assert_eq!(common::partition_of(&report.assignments), partition, "trial {trial}");
        assert_eq!(report.dendrogram.len(), n - k);
        for (m, c) in report.dendrogram.iter().zip(&costs) {
            assert!((m.cost - c).abs() < 1e-9 * (1.0 + c.abs()), "trial {trial}");
        }
    }
}

#[test]
fn ward_two_clusters_on_a_line() {
    let points = vec![vec![0.0], vec![1.0], vec![10.0]];
    let report = ward_cluster(&points, 2).unwrap();
    assert_eq!(common::partition_of(&report.assignments), common::best_two_partition(&points));
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = common::rng(202);
    for trial in 0..1000 {
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(1..=30);
        let y_true = common::random_labels(&mut rng, n, classes);
        // Coarse logits make ties common.
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..classes).map(|_| rng.random_range(0..4) as f64).collect())
            .collect();
        let y_pred: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
        let f1 = weighted_f1(&y_true, &y_pred, classes).unwrap().value;
        assert!((f1 - common::brute_weighted_f1(&y_true, &y_pred, classes)).abs() < 1e-12, "trial {trial}");
        let mut prev = 0.0;
        for k in 1..=classes {
            let acc = topk_accuracy(&logits, &y_true, k).unwrap();
            assert!((acc - common::brute_topk(&logits, &y_true, k)).abs() < 1e-12, "trial {trial} k {k}");
            assert!(acc >= prev);
            prev = acc;
        }
        assert_eq!(prev, 1.0);
    }
}

#[test]
fn balanced_binary_weighted_f1_is_mean_class_f1() {
    let mut rng = common::rng(303);
    for _ in 0..200 {
        let half = rng.random_range(1..20);
        let y_true: Vec<usize> = (0..2 * half).map(|i| i % 2).collect();
        let y_pred = common::random_labels(&mut rng, 2 * half, 2);
        let f1 = weighted_f1(&y_true, &y_pred, 2).unwrap();
        let plain = |pos: usize| {
            let tp = (0..2 * half).filter(|&i| y_true[i] == pos && y_pred[i] == pos).count() as f64;
            let fp = (0..2 * half).filter(|&i| y_true[i] != pos && y_pred[i] == pos).count() as f64;
            let fneg = (0..2 * half).filter(|&i| y_true[i] == pos && y_pred[i] != pos).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            }
        };
        assert!((f1.value - 0.5 * (plain(0) + plain(1))).abs() < 1e-12);
    }
}

#[test]
fn small_topk_fixture() {
    let mut rng = common::rng(404);
    let logits: Vec<Vec<f64>> = (0..6).map(|_| common::normal_vec(&mut rng, 4)).collect();
    let y = common::random_labels(&mut rng, 6, 4);
    assert_eq!(topk_accuracy(&logits, &y, 3).unwrap(), common::brute_topk(&logits, &y, 3));
    assert!(topk_accuracy(&logits, &y, 5).is_err());
}

/// One class per orthant of R^3, well separated from the origin.
fn orthant_fixture(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = common::rng(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for class in 0..8 {
        for _ in 0..per {
            let p: Vec<f64> = (0..3)
                .map(|axis| {
                    let sign = if class >> axis & 1 == 1 { 1.0 } else { -1.0 };
                    sign * (3.0 + 0.3 * common::normal_vec(&mut rng, 1)[0])
                })
                .collect();
            points.push(p);
            labels.push(class);
        }
    }
    (points, labels)
}

#[test]
fn orthant_clusters_are_pure() {
    let (points, labels) = orthant_fixture(25, 7);
    let report = ward_cluster(&points, 8).unwrap();
    for rows in full_composition(&report, &labels).unwrap() {
        assert!(rows[0].1 >= 99.0, "cluster purity {}", rows[0].1);
        assert!((rows.iter().map(|r| r.1).sum::<f64>() - 100.0).abs() < 1e-9);
    }
    let table = cluster_composition(&report, &labels, 3).unwrap();
    let names: Vec<String> = (0..8).map(|c| format!("area-{c}")).collect();
    let csv = composition_csv(&table, &names);
    assert!(csv.starts_with("cluster,label,percent\n"));
    assert_eq!(csv.lines().count(), 1 + table.len());
}

#[test]
fn composition_tie_goes_to_lower_label() {
    let points: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 * 1e-3]).collect();
    let labels: Vec<usize> = (0..100).map(|i| if i % 2 == 0 { 4 } else { 2 }).collect();
    let report = ward_cluster(&points, 1).unwrap();
    let rows = cluster_composition(&report, &labels, 1).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].label, 2);
    assert!((rows[0].percent - 50.0).abs() < 1e-12);
}

fn variance(xy: &[[f64; 2]], axis: usize) -> f64 {
    let m = xy.iter().map(|p| p[axis]).sum::<f64>() / xy.len() as f64;
    xy.iter().map(|p| (p[axis] - m).powi(2)).sum::<f64>() / xy.len() as f64
}

#[test]
fn embedding_of_planar_data_is_exact() {
    let mut rng = common::rng(505);
    let d = 128;
    let basis = common::orthonormal(&mut rng, d);
    let (u, v) = (&basis[..d], &basis[d..2 * d]);
    let coords: Vec<[f64; 2]> = (0..40)
        .map(|_| {
            let c = common::normal_vec(&mut rng, 2);
            [3.0 * c[0], c[1]]
        })
        .collect();
    let points: Vec<Vec<f64>> = coords
        .iter()
        .map(|c| (0..d).map(|j| c[0] * u[j] + c[1] * v[j]).collect())
        .collect();
    let xy = embed_2d(&points, 1).unwrap();
    assert!(variance(&xy, 0) >= variance(&xy, 1));
    // Pairwise distances are preserved when the projection loses nothing.
    for i in 0..points.len() {
        for j in 0..i {
            let full: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
            let flat = (xy[i][0] - xy[j][0]).powi(2) + (xy[i][1] - xy[j][1]).powi(2);
            assert!((full.sqrt() - flat.sqrt()).abs() < 1e-5);
        }
    }
}

#[test]
fn duplicated_points_share_coordinates() {
    let mut rng = common::rng(606);
    let base: Vec<Vec<f64>> = (0..15).map(|_| common::normal_vec(&mut rng, 6)).collect();
    let points: Vec<Vec<f64>> = base.iter().chain(&base).cloned().collect();
    let xy = embed_2d(&points, 2).unwrap();
    for i in 0..15 {
        assert_eq!(xy[i], xy[i + 15]);
    }
    assert!(variance(&xy, 0) >= variance(&xy, 1));
}

#[test]
fn embedding_is_rotation_invariant_up_to_sign() {
    let mut rng = common::rng(707);
    let (n, d) = (30, 5);
    // Distinct principal variances keep the axes well defined.
    let x: Vec<f64> = (0..n * d)
        .map(|i| common::normal_vec(&mut rng, 1)[0] * [5.0, 3.0, 1.0, 0.5, 0.2][i % d])
        .collect();
    let q = common::orthonormal(&mut rng, d);
    let rotated = common::rotate_rows(&x, n, d, &q);
    let rows = |v: &[f64]| v.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let a = embed_2d(&rows(&x), 3).unwrap();
    let b = embed_2d(&rows(&rotated), 3).unwrap();
    for axis in 0..2 {
        let same = (0..n).all(|i| (a[i][axis] - b[i][axis]).abs() < 1e-6);
        let flipped = (0..n).all(|i| (a[i][axis] + b[i][axis]).abs() < 1e-6);
        assert!(same || flipped, "axis {axis}");
    }
}

#[test]
fn embedding_csv_layout() {
    let rows = vec![
        EmbeddingRow { xy: [0.5, -1.0], label: 2, brain_id: 1, cluster: 0 },
        EmbeddingRow { xy: [1.5, 2.0], label: 0, brain_id: 0, cluster: 3 },
    ];
    let csv = embedding_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,y,label,brain_id,cluster");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].ends_with(",0,0,4"));
}
