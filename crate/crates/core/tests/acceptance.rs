//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured values. Run with `cargo test --test acceptance`
//! (add `-- --nocapture` to see the lines as they pass).

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use efaprune_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use efaprune_core::data::{gaussian_blobs, load_cifar10_binary, load_idx, write_cifar10_batch,
    write_idx, Split};
use efaprune_core::efa::{analyze_snapshots, mask_gradients, Aggregate, EFAConfig, MaskedGradients};
use efaprune_core::entropy::{
    analyze_entropy, entropy_nats, filter_entropy, layer_cross_entropy, weight_histogram,
    EntropyReport, WeightNorm,
};
use efaprune_core::error_analysis::single_layer_removal_check;
use efaprune_core::fisher::logistic_fisher_hessian_check;
use efaprune_core::linalg::sym_eig;
use efaprune_core::nn::{
    capture_gradient_matrices, evaluate, model_stats, presets, train, train_epochs, Augmentation,
    ConvSpec, LayerKind, LayerSpec, ModelSpec, OptimizerState, TrainConfig,
};
use efaprune_core::oracle::{gradient_check, ql_eigenvalues};
use efaprune_core::prune::{apply_plan, build_plan, build_plan_with_target, overpruning_comparison,
    PruningPlan};
use efaprune_core::report::{canonical_json, export_report};
use efaprune_core::tensor::Tensor;

fn random_batch(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------
// criterion 1: analytic gradients vs central finite differences
// ---------------------------------------------------------------------

#[test]
fn c01_gradient_correctness() {
    let nets: Vec<(ModelSpec, Vec<usize>, Tensor)> = vec![
        // 2 weight layers: plain conv + classifier
        (
            ModelSpec::build(
                vec![
                    LayerSpec::conv(1, 4, 3),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::Flatten),
                    LayerSpec::new(LayerKind::Linear {
                        in_features: 4 * 64,
                        out_features: 10,
                    }),
                    LayerSpec::new(LayerKind::SoftmaxXent),
                ],
                11,
            )
            .unwrap(),
            (0..6).map(|i| i % 10).collect(),
            random_batch(&[6, 1, 8, 8], 100),
        ),
        // 3 weight layers with bias and a pool
        (
            ModelSpec::build(
                vec![
                    LayerSpec::new(LayerKind::Conv(ConvSpec {
                        in_channels: 1,
                        out_channels: 6,
                        kernel: 3,
                        stride: 1,
                        padding: 0,
                        bias: true,
                    })),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }),
                    LayerSpec::conv(6, 8, 3),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::Flatten),
                    LayerSpec::new(LayerKind::Linear {
                        in_features: 8 * 9,
                        out_features: 5,
                    }),
                    LayerSpec::new(LayerKind::SoftmaxXent),
                ],
                12,
            )
            .unwrap(),
            (0..6).map(|i| i % 5).collect(),
            random_batch(&[6, 1, 8, 8], 101),
        ),
        // strided conv behind batch norm
        (
            ModelSpec::build(
                vec![
                    LayerSpec::new(LayerKind::Conv(ConvSpec {
                        in_channels: 3,
                        out_channels: 8,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: false,
                    })),
                    LayerSpec::new(LayerKind::BatchNorm { channels: 8 }),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::Conv(ConvSpec {
                        in_channels: 8,
                        out_channels: 8,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                        bias: false,
                    })),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::Flatten),
                    LayerSpec::new(LayerKind::Linear {
                        in_features: 8 * 16,
                        out_features: 4,
                    }),
                    LayerSpec::new(LayerKind::SoftmaxXent),
                ],
                13,
            )
            .unwrap(),
            (0..5).map(|i| i % 4).collect(),
            random_batch(&[5, 3, 8, 8], 102),
        ),
        // wide kernel with average pooling
        (
            ModelSpec::build(
                vec![
                    LayerSpec::new(LayerKind::Conv(ConvSpec {
                        in_channels: 1,
                        out_channels: 8,
                        kernel: 5,
                        stride: 1,
                        padding: 2,
                        bias: false,
                    })),
                    LayerSpec::new(LayerKind::BatchNorm { channels: 8 }),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::AvgPool { size: 2, stride: 2 }),
                    LayerSpec::new(LayerKind::Flatten),
                    LayerSpec::new(LayerKind::Linear {
                        in_features: 8 * 16,
                        out_features: 3,
                    }),
                    LayerSpec::new(LayerKind::SoftmaxXent),
                ],
                14,
            )
            .unwrap(),
            (0..6).map(|i| i % 3).collect(),
            random_batch(&[6, 1, 8, 8], 103),
        ),
        // 4 weight layers
        (
            ModelSpec::build(
                vec![
                    LayerSpec::conv(2, 4, 3),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::conv(4, 4, 3),
                    LayerSpec::new(LayerKind::BatchNorm { channels: 4 }),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }),
                    LayerSpec::new(LayerKind::Conv(ConvSpec {
                        in_channels: 4,
                        out_channels: 6,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: true,
                    })),
                    LayerSpec::new(LayerKind::Relu),
                    LayerSpec::new(LayerKind::Flatten),
                    LayerSpec::new(LayerKind::Linear {
                        in_features: 6 * 16,
                        out_features: 6,
                    }),
                    LayerSpec::new(LayerKind::SoftmaxXent),
                ],
                15,
            )
            .unwrap(),
            (0..6).collect(),
            random_batch(&[6, 2, 8, 8], 104),
        ),
    ];

    let mut worst_overall = 0.0f64;
    for (i, (model, labels, batch)) in nets.iter().enumerate() {
        let worst = gradient_check(model, batch, labels, 20, 1e-5, 500 + i as u64).unwrap();
        assert!(
            worst <= 1e-4,
            "net {i}: worst relative gradient error {worst}"
        );
        worst_overall = worst_overall.max(worst);
    }
    println!(
        "acceptance 01 gradient-correctness: PASS (5 nets, worst relative error {worst_overall:.3e})"
    );
}

// ---------------------------------------------------------------------
// criterion 2: eigensolver vs independent oracle
// ---------------------------------------------------------------------

#[test]
fn c02_eigensolver_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap = 0.0f64;
    for _ in 0..10 {
        let n = 8;
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-3.0..3.0);
                m.set2(i, j, v);
                m.set2(j, i, v);
            }
        }
        let spectrum = sym_eig(&m).unwrap();
        let oracle = ql_eigenvalues(&m).unwrap();
        for (a, b) in spectrum.eigenvalues.iter().zip(&oracle) {
            worst_gap = worst_gap.max((a - b).abs());
        }

        // trace preservation
        let trace: f64 = (0..n).map(|i| m.at2(i, i)).sum();
        let sum: f64 = spectrum.eigenvalues.iter().sum();
        assert!(
            (sum - trace).abs() <= 1e-9 * trace.abs().max(1e-12),
            "trace drift: {sum} vs {trace}"
        );

        // reconstruction
        let rec = spectrum.reconstruct();
        let mut err = 0.0;
        let mut norm = 0.0;
        for (a, b) in rec.data().iter().zip(m.data()) {
            err += (a - b) * (a - b);
            norm += b * b;
        }
        assert!(err.sqrt() <= 1e-8 * norm.sqrt());
    }
    assert!(worst_gap <= 1e-8, "worst eigenvalue gap {worst_gap}");
    println!("acceptance 02 eigensolver-oracle: PASS (10 matrices, worst gap {worst_gap:.3e})");
}

// ---------------------------------------------------------------------
// criterion 3: Fisher information equals the Hessian at the optimum
// ---------------------------------------------------------------------

#[test]
fn c03_fisher_hessian_identity() {
    let check = logistic_fisher_hessian_check(50_000, 20_240_501).unwrap();
    assert!(
        check.gradient_norm < 1e-5,
        "fit stalled at gradient norm {}",
        check.gradient_norm
    );
    assert!(
        check.relative_frobenius_distance <= 0.15,
        "relative Frobenius distance {}",
        check.relative_frobenius_distance
    );
    println!(
        "acceptance 03 fisher-hessian-identity: PASS (grad norm {:.2e}, relative distance {:.4})",
        check.gradient_norm, check.relative_frobenius_distance
    );
}

// ---------------------------------------------------------------------
// criterion 4: entropy invariants
// ---------------------------------------------------------------------

#[test]
fn c04_entropy_invariants() {
    let m = 1000;
    let ln_m = (m as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    for _ in 0..1000 {
        let len = rng.random_range(2..120);
        let w: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = filter_entropy(&w, m).unwrap();
        assert!((0.0..=ln_m + 1e-12).contains(&h), "H = {h}");
    }

    assert_eq!(filter_entropy(&[0.42; 64], m).unwrap(), 0.0);

    let uniform: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect();
    let h_uniform = filter_entropy(&uniform, m).unwrap();
    assert!((h_uniform - ln_m).abs() <= 1e-9, "uniform H = {h_uniform}");

    let mut worst_self = 0.0f64;
    let mut worst_gibbs = 0.0f64;
    for _ in 0..1000 {
        let la = rng.random_range(4..60);
        let lb = rng.random_range(4..60);
        let a: Vec<f64> = (0..la).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b: Vec<f64> = (0..lb).map(|_| rng.random_range(-1.5..1.5)).collect();

        let ce_aa = layer_cross_entropy(&a, &a, m).unwrap();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let an: Vec<f64> = a.iter().map(|x| x / norm).collect();
        let h_a = entropy_nats(&weight_histogram(&an, m, None).unwrap().probabilities);
        worst_self = worst_self.max((ce_aa - h_a).abs());
        assert!((ce_aa - h_a).abs() <= 1e-9, "CE(A,A)={ce_aa} vs H(A)={h_a}");

        // Gibbs over shared bins
        let bnorm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bn: Vec<f64> = b.iter().map(|x| x / bnorm).collect();
        let lo = an.iter().chain(&bn).cloned().fold(f64::INFINITY, f64::min);
        let hi = an
            .iter()
            .chain(&bn)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut edges: Vec<f64> = (0..=m)
            .map(|i| lo + (hi - lo) * i as f64 / m as f64)
            .collect();
        edges[0] = lo;
        edges[m] = hi;
        let ha_shared =
            entropy_nats(&weight_histogram(&an, m, Some(&edges)).unwrap().probabilities);
        let ce_ab = layer_cross_entropy(&a, &b, m).unwrap();
        worst_gibbs = worst_gibbs.max(ha_shared - ce_ab);
        assert!(ce_ab >= ha_shared - 1e-9, "Gibbs: CE={ce_ab} < H={ha_shared}");
    }

    println!(
        "acceptance 04 entropy-invariants: PASS (1000 filters bounded, uniform at ln m, worst |CE(A,A)-H| {worst_self:.2e}, worst Gibbs slack {worst_gibbs:.2e})"
    );
}

// ---------------------------------------------------------------------
// criterion 5: hierarchical selection conformance
// ---------------------------------------------------------------------

/// A plain prunable conv chain; conv layers sit at paths 0, 3, 6, ...
fn chain_model(widths: &[usize], seed: u64) -> ModelSpec {
    let mut layers = Vec::new();
    let mut cin = 1;
    for &w in widths {
        let mut conv = LayerSpec::conv(cin, w, 3);
        conv.prunable = true;
        layers.push(conv);
        layers.push(LayerSpec::new(LayerKind::BatchNorm { channels: w }));
        layers.push(LayerSpec::new(LayerKind::Relu));
        cin = w;
    }
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Linear {
        in_features: cin * 64,
        out_features: 4,
    }));
    layers.push(LayerSpec::new(LayerKind::SoftmaxXent));
    ModelSpec::build(layers, seed).unwrap()
}

fn entropy_fixture(model: &ModelSpec, values: &[Vec<f64>], ces: &[f64]) -> EntropyReport {
    let prunable = model.prunable_convs();
    let mut filter_entropies = Vec::new();
    for ((layer, _), vals) in prunable.iter().zip(values) {
        for (f, &v) in vals.iter().enumerate() {
            filter_entropies.push((layer.clone(), f, v));
        }
    }
    let layer_cross_entropies = ces
        .iter()
        .enumerate()
        .map(|(i, &ce)| (prunable[i + 1].0.clone(), prunable[i].0.clone(), ce))
        .collect();
    EntropyReport {
        bin_count: 1000,
        filter_entropies,
        layer_cross_entropies,
    }
}

/// ascending entropies `base + 0.01 * f`
fn ramp(base: f64, n: usize) -> Vec<f64> {
    (0..n).map(|f| base + 0.01 * f as f64).collect()
}

struct Fixture {
    name: &'static str,
    widths: Vec<usize>,
    entropies: Vec<Vec<f64>>,
    ces: Vec<f64>,
    min_filters: usize,
    target: usize,
    /// expected kept filters per surviving layer position
    expect_kept: Vec<(usize, Vec<usize>)>,
    /// expected removal order, by layer position
    expect_removed: Vec<usize>,
    expect_feasible: bool,
}

fn hand_trace_fixtures() -> Vec<Fixture> {
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    vec![
        Fixture {
            name: "keep-all",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(2.0, 8), ramp(1.0, 8)],
            ces: vec![0.5, 0.5],
            min_filters: 5,
            target: 24,
            expect_kept: vec![(0, all(8)), (1, all(8)), (2, all(8))],
            expect_removed: vec![],
            expect_feasible: true,
        },
        Fixture {
            name: "drop-single-lowest",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(2.0, 8), ramp(1.0, 8)],
            ces: vec![0.5, 0.5],
            min_filters: 5,
            target: 23,
            expect_kept: vec![(0, all(8)), (1, all(8)), (2, (1..8).collect())],
            expect_removed: vec![],
            expect_feasible: true,
        },
        Fixture {
            name: "starved-middle-removed",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(0.1, 8), ramp(1.0, 8)],
            ces: vec![0.2, 0.9],
            min_filters: 5,
            target: 14,
            expect_kept: vec![(0, all(8)), (2, (2..8).collect())],
            expect_removed: vec![1],
            expect_feasible: true,
        },
        Fixture {
            name: "starved-last-promoted",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(2.0, 8), ramp(0.1, 8)],
            ces: vec![0.5, 0.5],
            min_filters: 5,
            target: 18,
            expect_kept: vec![(0, all(8)), (1, (3..8).collect()), (2, (3..8).collect())],
            expect_removed: vec![],
            expect_feasible: true,
        },
        Fixture {
            name: "starved-first-promoted",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(0.1, 8), ramp(3.0, 8), ramp(2.0, 8)],
            ces: vec![0.5, 0.5],
            min_filters: 5,
            target: 18,
            expect_kept: vec![(0, (3..8).collect()), (1, all(8)), (2, (3..8).collect())],
            expect_removed: vec![],
            expect_feasible: true,
        },
        Fixture {
            name: "remove-then-promote",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(0.2, 8), ramp(0.1, 8)],
            ces: vec![0.3, 0.8],
            min_filters: 5,
            target: 12,
            expect_kept: vec![(0, (1..8).collect()), (2, (3..8).collect())],
            expect_removed: vec![1],
            expect_feasible: true,
        },
        Fixture {
            name: "uniform-tie-breaking",
            widths: vec![8, 8, 8],
            entropies: vec![vec![1.0; 8], vec![1.0; 8], vec![1.0; 8]],
            ces: vec![0.5, 0.5],
            min_filters: 5,
            target: 20,
            expect_kept: vec![(0, all(8)), (1, (0..7).collect()), (2, (0..5).collect())],
            expect_removed: vec![],
            expect_feasible: true,
        },
        Fixture {
            name: "narrow-middle-removed",
            widths: vec![8, 3, 8],
            entropies: vec![ramp(3.0, 8), ramp(0.1, 3), ramp(2.0, 8)],
            ces: vec![0.9, 0.9],
            min_filters: 5,
            target: 16,
            expect_kept: vec![(0, all(8)), (2, all(8))],
            expect_removed: vec![1],
            expect_feasible: true,
        },
        Fixture {
            name: "narrow-first-promoted-to-own-width",
            widths: vec![3, 8, 8],
            entropies: vec![ramp(0.1, 3), ramp(3.0, 8), ramp(2.0, 8)],
            ces: vec![0.5, 0.5],
            min_filters: 5,
            target: 17,
            expect_kept: vec![(0, vec![0, 1, 2]), (1, all(8)), (2, (2..8).collect())],
            expect_removed: vec![],
            expect_feasible: true,
        },
        Fixture {
            name: "budget-exceeds-supply",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(2.0, 8), ramp(1.0, 8)],
            ces: vec![0.5, 0.5],
            min_filters: 5,
            target: 30,
            expect_kept: vec![(0, all(8)), (1, all(8)), (2, all(8))],
            expect_removed: vec![],
            expect_feasible: false,
        },
        Fixture {
            name: "zero-budget-infeasible",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(2.0, 8), ramp(1.0, 8)],
            ces: vec![0.2, 0.4],
            min_filters: 5,
            target: 0,
            expect_kept: vec![],
            expect_removed: vec![1],
            expect_feasible: false,
        },
        Fixture {
            name: "promote-then-remove",
            widths: vec![8, 8, 8],
            entropies: vec![
                ramp(3.0, 8),
                vec![0.10, 0.11, 0.12, 2.00, 2.01, 2.02, 2.03, 2.04],
                ramp(1.0, 8),
            ],
            ces: vec![0.3, 0.6],
            min_filters: 5,
            target: 15,
            expect_kept: vec![(0, all(8)), (2, (1..8).collect())],
            expect_removed: vec![1],
            expect_feasible: true,
        },
        Fixture {
            name: "removal-order-by-cross-entropy",
            widths: vec![8, 8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(0.2, 8), ramp(0.1, 8), ramp(2.0, 8)],
            ces: vec![0.5, 0.3, 0.9],
            min_filters: 5,
            target: 16,
            expect_kept: vec![(0, all(8)), (3, all(8))],
            expect_removed: vec![2, 1],
            expect_feasible: true,
        },
        Fixture {
            name: "double-removal-starves-budget",
            widths: vec![8, 8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(0.2, 8), ramp(0.1, 8), ramp(2.0, 8)],
            ces: vec![0.5, 0.3, 0.9],
            min_filters: 5,
            target: 18,
            expect_kept: vec![(0, all(8)), (3, all(8))],
            expect_removed: vec![2, 1],
            expect_feasible: false,
        },
        Fixture {
            name: "five-layers-one-removal",
            widths: vec![6, 6, 6, 6, 6],
            entropies: vec![
                ramp(5.0, 6),
                ramp(4.0, 6),
                ramp(0.1, 6),
                ramp(2.0, 6),
                ramp(3.0, 6),
            ],
            ces: vec![0.8, 0.1, 0.7, 0.9],
            min_filters: 3,
            target: 21,
            expect_kept: vec![(0, all(6)), (1, all(6)), (3, vec![3, 4, 5]), (4, all(6))],
            expect_removed: vec![2],
            expect_feasible: true,
        },
        Fixture {
            name: "min-one-keeps-single-filter",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(0.1, 8), ramp(1.0, 8)],
            ces: vec![0.2, 0.9],
            min_filters: 1,
            target: 9,
            expect_kept: vec![(0, all(8)), (2, vec![7])],
            expect_removed: vec![1],
            expect_feasible: true,
        },
        Fixture {
            name: "tiny-budget-floors-overflow",
            widths: vec![8, 8, 8],
            entropies: vec![ramp(3.0, 8), ramp(2.0, 8), ramp(1.0, 8)],
            ces: vec![0.4, 0.6],
            min_filters: 5,
            target: 3,
            expect_kept: vec![],
            expect_removed: vec![1],
            expect_feasible: false,
        },
        Fixture {
            name: "two-layer-tie-promotion",
            widths: vec![8, 8],
            entropies: vec![vec![1.0; 8], vec![1.0; 8]],
            ces: vec![0.5],
            min_filters: 5,
            target: 11,
            expect_kept: vec![(0, (0..6).collect()), (1, (0..5).collect())],
            expect_removed: vec![],
            expect_feasible: true,
        },
        Fixture {
            name: "width-one-layer-removed",
            widths: vec![8, 1, 8],
            entropies: vec![ramp(3.0, 8), vec![0.5], ramp(1.0, 8)],
            ces: vec![0.9, 0.9],
            min_filters: 5,
            target: 10,
            expect_kept: vec![(0, (3..8).collect()), (2, (3..8).collect())],
            expect_removed: vec![1],
            expect_feasible: true,
        },
        Fixture {
            name: "heterogeneous-widths-floor-clamp",
            widths: vec![16, 8, 4],
            entropies: vec![ramp(2.0, 16), ramp(1.0, 8), ramp(0.1, 4)],
            ces: vec![0.8, 0.2],
            min_filters: 5,
            target: 20,
            expect_kept: vec![(0, (0..16).collect()), (2, vec![0, 1, 2, 3])],
            expect_removed: vec![1],
            expect_feasible: true,
        },
    ]
}

#[test]
fn c05_hierarchical_selection_conformance() {
    let fixtures = hand_trace_fixtures();
    assert_eq!(fixtures.len(), 20);
    for fx in &fixtures {
        let model = chain_model(&fx.widths, 1);
        let entropy = entropy_fixture(&model, &fx.entropies, &fx.ces);
        let plan =
            build_plan_with_target(&model, fx.target, &entropy, fx.min_filters, 0.95, 0.0)
                .unwrap();
        let prunable = model.prunable_convs();

        assert_eq!(
            plan.feasible, fx.expect_feasible,
            "{}: feasibility ({:?})",
            fx.name, plan.infeasible_reason
        );
        let expected_removed: Vec<String> = fx
            .expect_removed
            .iter()
            .map(|&pos| prunable[pos].0.clone())
            .collect();
        assert_eq!(plan.removed_layers, expected_removed, "{}: removals", fx.name);
        if fx.expect_feasible {
            for (pos, filters) in &fx.expect_kept {
                let layer = &prunable[*pos].0;
                assert_eq!(
                    plan.kept_in(layer).unwrap_or(&[]),
                    filters.as_slice(),
                    "{}: kept filters of layer {layer}",
                    fx.name
                );
            }
            let expected_total: usize = fx.expect_kept.iter().map(|(_, f)| f.len()).sum();
            assert_eq!(plan.kept_count(), expected_total, "{}: budget", fx.name);
            assert_eq!(plan.kept_count(), fx.target, "{}: |kept| = N", fx.name);
        }
    }

    // 1000 random fixtures: feasibility invariants
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut feasible_count = 0;
    for _ in 0..1000 {
        let layers = rng.random_range(2..6);
        let widths: Vec<usize> = (0..layers).map(|_| rng.random_range(3..20)).collect();
        let total: usize = widths.iter().sum();
        let entropies: Vec<Vec<f64>> = widths
            .iter()
            .map(|&w| (0..w).map(|_| rng.random_range(0.0..7.0)).collect())
            .collect();
        let ces: Vec<f64> = (1..layers).map(|_| rng.random_range(0.0..3.0)).collect();
        let min_filters = rng.random_range(1..7);
        let target = rng.random_range(0..=total + 5);

        let model = chain_model(&widths, 2);
        let entropy = entropy_fixture(&model, &entropies, &ces);
        let plan =
            build_plan_with_target(&model, target, &entropy, min_filters, 0.95, 0.0).unwrap();
        let prunable = model.prunable_convs();

        let removed: BTreeSet<&String> = plan.removed_layers.iter().collect();
        assert_eq!(
            removed.len(),
            plan.removed_layers.len(),
            "a layer was removed twice"
        );
        for (layer, kept) in &plan.kept_filters {
            assert!(!removed.contains(layer), "kept filters in a removed layer");
            if plan.feasible {
                let width = prunable.iter().find(|(l, _)| l == layer).unwrap().1;
                assert!(
                    kept.len() >= min_filters.min(width),
                    "layer {layer} kept {} < floor {}",
                    kept.len(),
                    min_filters.min(width)
                );
            }
        }
        if plan.feasible {
            assert_eq!(plan.kept_count(), target, "|kept| must equal N");
            feasible_count += 1;
        } else {
            assert!(plan.infeasible_reason.is_some());
        }
    }

    println!(
        "acceptance 05 hierarchical-selection: PASS (20 hand traces exact, 1000 random fixtures hold invariants, {feasible_count} feasible)"
    );
}

// ---------------------------------------------------------------------
// criterion 6: over-pruning structural claim at an 81% budget
// ---------------------------------------------------------------------

#[test]
fn c06_overpruning_structural_claim() {
    let tmp = tempfile::tempdir().unwrap();

    // synthetic 10-class color blobs written through the CIFAR-10 binary
    // format, 5000 train + 500 probe images
    let pool = gaussian_blobs(5500, 10, 3, 32, 32, 0.3, 606).unwrap();
    let train_idx: Vec<usize> = (0..5000).collect();
    let test_idx: Vec<usize> = (5000..5500).collect();
    write_cifar10_batch(
        &tmp.path().join("data_batch_1.bin"),
        &pool.subset(&train_idx, Split::Train).unwrap(),
    )
    .unwrap();
    write_cifar10_batch(
        &tmp.path().join("test_batch.bin"),
        &pool.subset(&test_idx, Split::Test).unwrap(),
    )
    .unwrap();
    let train_data = load_cifar10_binary(tmp.path(), Split::Train).unwrap();
    assert_eq!(train_data.len(), 5000);

    let mut model = presets::vgg_with_channels(
        &[8, 8, 16, 16, 32, 32, 32, 48, 48, 48, 48, 48, 48],
        3,
        10,
        616,
    )
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 128,
        lr_initial: 0.05,
        lr_milestones: vec![],
        lr_decay: 10.0,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs: 2,
        augmentation: Augmentation::None,
    };
    let log = train(&mut model, &train_data, &cfg).unwrap();

    let entropy = analyze_entropy(&model, 1000, WeightNorm::L2).unwrap();
    let cmp = overpruning_comparison(&model, &entropy, 0.81, 5).unwrap();

    for (layer, n) in &cmp.hierarchical_counts {
        assert!(
            *n == 0 || *n >= 5,
            "hierarchical pruning left layer {layer} with {n} filters"
        );
    }

    let flat: Vec<usize> = cmp.flat_counts.iter().map(|(_, n)| *n).collect();
    let hier: Vec<usize> = cmp.hierarchical_counts.iter().map(|(_, n)| *n).collect();
    println!(
        "acceptance 06 overpruning-structure: PASS (train acc {:.2}%, budget {} of 432; flat survivors {:?} (starved: {:?}); hierarchical survivors {:?}, removed {:?}, all >= 5)",
        log.epoch_accuracy.last().unwrap() * 100.0,
        cmp.budget_keep,
        flat,
        cmp.flat_starved,
        hier,
        cmp.hierarchical_removed,
    );
}

// ---------------------------------------------------------------------
// criteria 7 + 8: end-to-end compression and rate monotonicity
// ---------------------------------------------------------------------

#[test]
fn c07_c08_end_to_end_compression_and_monotonicity() {
    let tmp = tempfile::tempdir().unwrap();

    // blob digits written through the IDX container
    let pool = gaussian_blobs(1800, 10, 1, 16, 16, 0.35, 707).unwrap();
    let train_idx: Vec<usize> = (0..1500).collect();
    let test_idx: Vec<usize> = (1500..1800).collect();
    write_idx(
        &tmp.path().join("train-images-idx3-ubyte"),
        &tmp.path().join("train-labels-idx1-ubyte"),
        &pool.subset(&train_idx, Split::Train).unwrap(),
    )
    .unwrap();
    write_idx(
        &tmp.path().join("t10k-images-idx3-ubyte"),
        &tmp.path().join("t10k-labels-idx1-ubyte"),
        &pool.subset(&test_idx, Split::Test).unwrap(),
    )
    .unwrap();
    let train_data = load_idx(
        &tmp.path().join("train-images-idx3-ubyte"),
        &tmp.path().join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test_data = load_idx(
        &tmp.path().join("t10k-images-idx3-ubyte"),
        &tmp.path().join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();

    let cfg = TrainConfig {
        batch_size: 64,
        lr_initial: 0.05,
        lr_milestones: vec![6, 9],
        lr_decay: 10.0,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs: 12,
        augmentation: Augmentation::None,
    };
    let mut baseline = presets::tiny_cnn(1, 16, 16, 10, 717).unwrap();
    train(&mut baseline, &train_data, &cfg).unwrap();
    let baseline_acc = evaluate(&baseline, &test_data, cfg.batch_size).unwrap();
    let baseline_stats = model_stats(&baseline, (1, 16, 16)).unwrap();

    // one calibration capture serves all three variance rates
    let calibration = train_data.calibration_split(0.1, 717).unwrap();
    let snapshots = capture_gradient_matrices(&baseline, &calibration, cfg.batch_size).unwrap();
    let base_config = EFAConfig {
        variance_contribution_rate: 0.95,
        taylor_epsilon: 1e-6,
        calibration_batches: 8,
        center: true,
        aggregate: Aggregate::Average,
    };
    let masked: Vec<MaskedGradients> = snapshots
        .iter()
        .take(base_config.calibration_batches)
        .map(|s| mask_gradients(s, &baseline, base_config.taylor_epsilon).unwrap())
        .collect();

    let efa = analyze_snapshots(&baseline, &masked, &base_config).unwrap();
    assert!(
        efa.filter_pruning_ratio > 0.2 && efa.filter_pruning_ratio < 0.95,
        "filter pruning ratio {} outside (0.2, 0.95)",
        efa.filter_pruning_ratio
    );

    let entropy = analyze_entropy(&baseline, 1000, WeightNorm::L2).unwrap();
    let plan = build_plan(&baseline, &efa, &entropy, 5).unwrap();
    assert!(plan.feasible, "{:?}", plan.infeasible_reason);
    let mut pruned = apply_plan(&baseline, &plan, (1, 16, 16)).unwrap();
    train(&mut pruned, &train_data, &cfg).unwrap();
    let pruned_acc = evaluate(&pruned, &test_data, cfg.batch_size).unwrap();
    let pruned_stats = model_stats(&pruned, (1, 16, 16)).unwrap();

    let drop_pp = (baseline_acc - pruned_acc) * 100.0;
    let params_removed = 1.0 - pruned_stats.parameters as f64 / baseline_stats.parameters as f64;
    assert!(drop_pp <= 2.0, "accuracy drop {drop_pp:.2} pp exceeds 2");
    assert!(
        params_removed >= 0.40,
        "only {:.1}% of parameters removed",
        params_removed * 100.0
    );

    println!(
        "acceptance 07 end-to-end-compression: PASS (baseline {:.2}%, pruned {:.2}%, drop {:.2} pp, ratio {:.3}, params removed {:.1}%, filters {} -> {})",
        baseline_acc * 100.0,
        pruned_acc * 100.0,
        drop_pp,
        efa.filter_pruning_ratio,
        params_removed * 100.0,
        baseline_stats.filters,
        pruned_stats.filters,
    );

    // criterion 8: ratio non-increasing in the variance rate, one capture
    let mut ratios = Vec::new();
    for rate in [0.99, 0.95, 0.90] {
        let cfg_r = EFAConfig {
            variance_contribution_rate: rate,
            ..base_config.clone()
        };
        let report = analyze_snapshots(&baseline, &masked, &cfg_r).unwrap();
        ratios.push(report.filter_pruning_ratio);
    }
    assert!(
        ratios[0] <= ratios[1] + 1e-12 && ratios[1] <= ratios[2] + 1e-12,
        "ratios not monotone: {ratios:?}"
    );
    println!(
        "acceptance 08 rate-monotonicity: PASS (ratio at r=0.99/0.95/0.90 = {:.3}/{:.3}/{:.3})",
        ratios[0], ratios[1], ratios[2]
    );

    // supplementary: the removed-layer choice under L1 vs L2 weight
    // normalization of the cross-entropy criterion (reported, not gated)
    let entropy_l1 = analyze_entropy(&baseline, 1000, WeightNorm::L1).unwrap();
    let plan_l1 = build_plan(&baseline, &efa, &entropy_l1, 5).unwrap();
    if plan_l1.removed_layers == plan.removed_layers {
        println!(
            "acceptance note: layer choice is stable across L1/L2 normalization ({:?})",
            plan.removed_layers
        );
    } else {
        println!(
            "acceptance note: layer choice differs across normalizations (L2 {:?} vs L1 {:?})",
            plan.removed_layers, plan_l1.removed_layers
        );
    }
}

// ---------------------------------------------------------------------
// criterion 9: error propagation bound on a trained 3-layer net
// ---------------------------------------------------------------------

#[test]
fn c09_error_bound_soundness() {
    // 3-stage 1x1-conv tower trained through a classifier head, measured
    // on the conv stack alone
    let data = gaussian_blobs(400, 4, 8, 6, 6, 0.2, 909).unwrap();
    let widths = 8usize;
    let mut layers = Vec::new();
    for _ in 0..3 {
        layers.push(LayerSpec::prunable(LayerKind::Conv(ConvSpec {
            in_channels: widths,
            out_channels: widths,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: false,
        })));
        layers.push(LayerSpec::new(LayerKind::Relu));
    }
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Linear {
        in_features: widths * 36,
        out_features: 4,
    }));
    layers.push(LayerSpec::new(LayerKind::SoftmaxXent));
    let mut model = ModelSpec::build(layers, 919).unwrap();
    let cfg = TrainConfig {
        batch_size: 50,
        lr_initial: 0.05,
        lr_milestones: vec![],
        lr_decay: 10.0,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs: 8,
        augmentation: Augmentation::None,
    };
    train(&mut model, &data, &cfg).unwrap();

    // conv stack only
    let sub_layers: Vec<LayerSpec> = model.layers[..6].to_vec();
    let mut sub_params = model.params.clone();
    sub_params.retain(|k, _| k.starts_with("0.") || k.starts_with("2.") || k.starts_with("4."));
    let chain = ModelSpec {
        layers: sub_layers,
        params: sub_params,
        seed: model.seed,
    };

    let probe_idx: Vec<usize> = (0..64).collect();
    let probe = data.subset(&probe_idx, Split::Calibration).unwrap().images;

    let mut rng = ChaCha8Rng::seed_from_u64(929);
    let mut worst_margin = f64::INFINITY;
    for trial in 0..20 {
        let layer = ["0", "2", "4"][rng.random_range(0..3)];
        let count = rng.random_range(1..widths);
        let mut filters: Vec<usize> = (0..widths).collect();
        filters.shuffle(&mut rng);
        filters.truncate(count);

        let report = single_layer_removal_check(&chain, &probe, layer, &filters).unwrap();
        assert!(
            report.measured_output_error <= report.accumulated_bound + 1e-9,
            "trial {trial}: measured {} > bound {}",
            report.measured_output_error,
            report.accumulated_bound
        );
        worst_margin = worst_margin.min(report.accumulated_bound - report.measured_output_error);
    }
    println!(
        "acceptance 09 error-bound-soundness: PASS (20 removals, smallest bound margin {worst_margin:.3e})"
    );
}

// ---------------------------------------------------------------------
// criterion 10: static accounting of the reference architectures
// ---------------------------------------------------------------------

#[test]
fn c10_static_accounting() {
    let vgg = presets::vgg_a(0).unwrap();
    let stats = model_stats(&vgg, (3, 32, 32)).unwrap();
    assert_eq!(stats.filters, 4224);
    let params_err = (stats.parameters as f64 - 14.7e6).abs() / 14.7e6;
    assert!(params_err < 0.01, "parameters {}", stats.parameters);
    let flops_err = (stats.flops as f64 - 314e6).abs() / 314e6;
    assert!(flops_err < 0.02, "flops {}", stats.flops);

    let resnet = presets::resnet56(0).unwrap();
    let rstats = model_stats(&resnet, (3, 32, 32)).unwrap();
    assert_eq!(rstats.filters, 1008);

    println!(
        "acceptance 10 static-accounting: PASS (VGG-A: 4224 filters, {} params ({:.2}% off 14.7M), {} FLOPs ({:.2}% off 314M); ResNet56 prunable filters 1008)",
        stats.parameters,
        params_err * 100.0,
        stats.flops,
        flops_err * 100.0
    );
}

// ---------------------------------------------------------------------
// criterion 11: determinism and persistence
// ---------------------------------------------------------------------

fn mini_pipeline(dir: &std::path::Path, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let data = gaussian_blobs(240, 4, 1, 8, 8, 0.25, seed).unwrap();
    let mut model = presets::tiny_cnn(1, 8, 8, 4, seed ^ 0xf00d).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        lr_initial: 0.05,
        lr_milestones: vec![],
        lr_decay: 10.0,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs: 3,
        augmentation: Augmentation::ShiftMirror,
    };
    let mut state = OptimizerState::for_model(&model);
    let log = train_epochs(&mut model, &data, &cfg, &mut state, 0).unwrap();
    let ckpt = Checkpoint::from_model(&model, &state, 3, log.epoch_losses, log.epoch_accuracy);
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &ckpt).unwrap();

    let calibration = data.calibration_split(0.1, seed).unwrap();
    let snapshots = capture_gradient_matrices(&model, &calibration, 32).unwrap();
    let config = EFAConfig::default();
    let masked: Vec<MaskedGradients> = snapshots
        .iter()
        .take(config.calibration_batches)
        .map(|s| mask_gradients(s, &model, config.taylor_epsilon).unwrap())
        .collect();
    let efa = analyze_snapshots(&model, &masked, &config).unwrap();
    let entropy = analyze_entropy(&model, 1000, WeightNorm::L2).unwrap();
    let plan = build_plan(&model, &efa, &entropy, 5).unwrap();
    let plan_path = dir.join("plan.json");
    export_report(&plan, &plan_path).unwrap();

    (
        std::fs::read(&ckpt_path).unwrap(),
        std::fs::read(&plan_path).unwrap(),
    )
}

#[test]
fn c11_determinism_and_persistence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    std::fs::create_dir_all(&dir_a).unwrap();
    std::fs::create_dir_all(&dir_b).unwrap();

    // identical seeds produce byte-identical artifacts
    let (ckpt_a, plan_a) = mini_pipeline(&dir_a, 1111);
    let (ckpt_b, plan_b) = mini_pipeline(&dir_b, 1111);
    assert_eq!(ckpt_a, ckpt_b, "checkpoint bytes differ across runs");
    assert_eq!(plan_a, plan_b, "plan bytes differ across runs");

    // round trip: load, compare tensors, re-save, compare bytes
    let loaded = load_checkpoint(&dir_a.join("model.ckpt")).unwrap();
    let resaved = dir_a.join("model2.ckpt");
    save_checkpoint(&resaved, &loaded).unwrap();
    assert_eq!(
        std::fs::read(&resaved).unwrap(),
        ckpt_a,
        "round trip not bit-exact"
    );

    // plan re-export after parsing is byte-identical
    let parsed: PruningPlan =
        efaprune_core::report::import_report(&dir_a.join("plan.json")).unwrap();
    assert_eq!(
        format!("{}\n", canonical_json(&parsed).unwrap()).into_bytes(),
        plan_a
    );

    // resume equals uninterrupted
    let data = gaussian_blobs(240, 4, 1, 8, 8, 0.25, 2222).unwrap();
    let make_cfg = |epochs: usize| TrainConfig {
        batch_size: 32,
        lr_initial: 0.05,
        lr_milestones: vec![],
        lr_decay: 10.0,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs,
        augmentation: Augmentation::ShiftMirror,
    };
    let mut straight = presets::tiny_cnn(1, 8, 8, 4, 2323).unwrap();
    let mut straight_state = OptimizerState::for_model(&straight);
    let straight_log =
        train_epochs(&mut straight, &data, &make_cfg(6), &mut straight_state, 0).unwrap();

    let mut first = presets::tiny_cnn(1, 8, 8, 4, 2323).unwrap();
    let mut first_state = OptimizerState::for_model(&first);
    let first_log = train_epochs(&mut first, &data, &make_cfg(3), &mut first_state, 0).unwrap();
    let interrupt = tmp.path().join("interrupt.ckpt");
    save_checkpoint(
        &interrupt,
        &Checkpoint::from_model(&first, &first_state, 3, first_log.epoch_losses.clone(), vec![]),
    )
    .unwrap();

    let resumed_ckpt = load_checkpoint(&interrupt).unwrap();
    let mut resumed = resumed_ckpt.to_model().unwrap();
    let mut resumed_state = resumed_ckpt.optimizer_state();
    let resumed_log =
        train_epochs(&mut resumed, &data, &make_cfg(6), &mut resumed_state, 3).unwrap();

    let mut full_curve = first_log.epoch_losses;
    full_curve.extend(resumed_log.epoch_losses);
    assert_eq!(
        full_curve, straight_log.epoch_losses,
        "resumed loss curve differs from uninterrupted"
    );
    assert_eq!(
        resumed.params, straight.params,
        "resumed parameters differ from uninterrupted"
    );

    println!(
        "acceptance 11 determinism-persistence: PASS (byte-identical artifacts, bit-exact round trip, resume matches straight run over 6 epochs)"
    );
}
