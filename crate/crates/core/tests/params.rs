use cellsearch::genotype::{Branch, CellGenotype, Genotype};
use cellsearch::params::ParamStore;
use cellsearch::search_space::{Candidate, OperatorKind, OperatorMask};
use cellsearch::supernet::{NetMode, NetworkConfig, SuperNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn candidate_count(kind: OperatorKind, c: usize, stride: usize, affine: bool) -> usize {
    let mut store = ParamStore::<f32>::new();
    Candidate::new(
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(0),
        "op",
        kind,
        c,
        stride,
        affine,
    )
    .unwrap();
    store.count()
}

/// Weights of one operator on a `c`-channel edge.
fn op_params(kind: OperatorKind, c: usize, stride: usize, affine: bool) -> usize {
    let bn = if affine { 2 * c } else { 0 };
    match kind {
        OperatorKind::SepConv3 => 9 * c + c * c + bn,
        OperatorKind::SepConv5 => 25 * c + c * c + bn,
        OperatorKind::AtrousConv3 => 9 * c * c + bn,
        OperatorKind::AtrousConv5 => 25 * c * c + bn,
        OperatorKind::AvgPool3 | OperatorKind::MaxPool3 => 0,
        OperatorKind::Skip if stride == 1 => 0,
        OperatorKind::Skip => c * c + bn,
    }
}

#[test]
fn operator_counts_are_analytic() {
    for kind in OperatorKind::ALL {
        for c in [1, 4, 7] {
            for stride in [1, 2] {
                for affine in [false, true] {
                    assert_eq!(
                        candidate_count(kind, c, stride, affine),
                        op_params(kind, c, stride, affine),
                        "{kind} c={c} s={stride} affine={affine}"
                    );
                }
            }
        }
    }
    // C=16: 3x3 separable 400 + 32, atrous 2304 + 32
    assert_eq!(candidate_count(OperatorKind::SepConv3, 16, 1, true), 432);
    assert_eq!(candidate_count(OperatorKind::AtrousConv3, 16, 1, true), 2336);
}

fn config(cells: usize, c: usize, classes: usize, mask: OperatorMask) -> NetworkConfig {
    NetworkConfig {
        num_cells: cells,
        init_channels: c,
        num_classes: classes,
        reduce_positions: None,
        input_size: 16,
        operator_mask: mask,
    }
}

/// Independent count of a whole network, relaxed when `genotype` is `None`.
fn network_params(cfg: &NetworkConfig, genotype: Option<&Genotype>) -> usize {
    let c = cfg.init_channels;
    let stem = 3 * c;
    let mut total = 27 * stem + 2 * stem + 9 * stem * stem + 2 * stem;
    let (mut c_pp, mut c_p, mut cur) = (stem, stem, c);
    for i in 0..cfg.num_cells {
        let reduce = cfg.is_reduce(i);
        if reduce {
            cur *= 2;
        }
        total += c_pp * cur + 2 * cur + c_p * cur + 2 * cur;
        for node in 0..4 {
            for source in 0..node + 2 {
                let stride = if reduce && source < 2 { 2 } else { 1 };
                match genotype {
                    None => {
                        total += cfg
                            .operator_mask
                            .kinds()
                            .iter()
                            .map(|&k| op_params(k, cur, stride, false))
                            .sum::<usize>()
                    }
                    Some(g) => {
                        let cell = if reduce { &g.reduce } else { &g.normal };
                        for b in &cell.nodes[node] {
                            if b.source == source {
                                total += op_params(b.op, cur, stride, true);
                            }
                        }
                    }
                }
            }
        }
        c_pp = c_p;
        c_p = 4 * cur;
    }
    total + c_p * cfg.num_classes + cfg.num_classes
}

fn sample_genotype() -> Genotype {
    let b = Branch::new;
    use OperatorKind::*;
    Genotype::new(
        CellGenotype {
            nodes: vec![
                [b(0, SepConv3), b(1, AtrousConv5)],
                [b(0, Skip), b(2, MaxPool3)],
                [b(1, SepConv5), b(3, AtrousConv3)],
                [b(2, AvgPool3), b(4, Skip)],
            ],
        },
        CellGenotype {
            nodes: vec![
                [b(0, Skip), b(1, AtrousConv3)],
                [b(1, SepConv5), b(2, Skip)],
                [b(0, MaxPool3), b(3, SepConv3)],
                [b(1, Skip), b(4, AtrousConv5)],
            ],
        },
    )
}

#[test]
fn network_counts_are_analytic_and_fixed_is_smaller() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (cells, c, classes) in [(4, 8, 4), (6, 16, 21), (8, 4, 10)] {
        for mask in [OperatorMask::full(), OperatorMask::atrous_free()] {
            let cfg = config(cells, c, classes, mask);
            let relaxed = SuperNet::<f32>::build(&cfg, NetMode::Relaxed, &mut rng).unwrap();
            assert_eq!(relaxed.count_parameters(), network_params(&cfg, None));
            let g = sample_genotype();
            let fixed = SuperNet::<f32>::build(&cfg, NetMode::Fixed(g.clone()), &mut rng).unwrap();
            assert_eq!(fixed.count_parameters(), network_params(&cfg, Some(&g)));
            assert!(fixed.count_parameters() < relaxed.count_parameters());
            let uniform = Genotype::new(
                CellGenotype::uniform(OperatorKind::AtrousConv5),
                CellGenotype::uniform(OperatorKind::AtrousConv5),
            );
            let heavy = SuperNet::<f32>::build(&cfg, NetMode::Fixed(uniform.clone()), &mut rng).unwrap();
            assert_eq!(heavy.count_parameters(), network_params(&cfg, Some(&uniform)));
        }
    }
}

#[test]
fn head_and_stem_counts() {
    let cfg = config(4, 8, 4, OperatorMask::full());
    let net = SuperNet::<f32>::build(&cfg, NetMode::Relaxed, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(net.final_channels, 4 * 32);
    assert_eq!(net.params.count_where(|n| n.starts_with("head")), 128 * 4 + 4);
    assert_eq!(
        net.params.count_where(|n| n.starts_with("stem")),
        24 * 27 + 24 * 24 * 9 + 4 * 24
    );
    assert_eq!(cfg.reduce_positions(), [1, 2]);
}
