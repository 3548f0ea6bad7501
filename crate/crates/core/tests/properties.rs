use std::collections::BTreeSet;

use cellsearch::data::{hflip, resize_bilinear, split, synthetic_shapes, Image, SplitKind, SplitSpec};
use cellsearch::genotype::{derive, validate, AlphasFile, Branch, CellGenotype, Genotype};
use cellsearch::metrics::{overall_accuracy, ConfusionMatrix};
use cellsearch::search_space::{OperatorKind, OperatorMask, NUM_EDGES, NUM_NODES};
use proptest::prelude::*;

fn image() -> impl Strategy<Value = Image> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
        prop::collection::vec(-1.0f32..1.0, 3 * h * w).prop_map(move |data| Image::new(h, w, data).unwrap())
    })
}

fn cell() -> impl Strategy<Value = CellGenotype> {
    let node = |n: usize| {
        (0..n, 0..n - 1, 0..7usize, 0..7usize).prop_map(move |(a, b, x, y)| {
            let b = if b >= a { b + 1 } else { b };
            [
                Branch::new(a, OperatorKind::ALL[x]),
                Branch::new(b, OperatorKind::ALL[y]),
            ]
        })
    };
    (node(2), node(3), node(4), node(5)).prop_map(|(a, b, c, d)| CellGenotype {
        nodes: vec![a, b, c, d],
    })
}

/// Rows on a 1/8 grid, so that integer shifts are exact.
fn rows(width: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec((-16i32..16).prop_map(|v| v as f64 / 8.0), width),
        NUM_EDGES,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_each_class(per_class in 2usize..12, seed in any::<u64>(), ratio in 0.1f64..0.9) {
        let ds = synthetic_shapes(3, per_class, 8, 1).unwrap();
        for kind in [SplitKind::SearchHalf, SplitKind::TrainRatio(ratio)] {
            let (a, b) = split(&ds, SplitSpec { kind, seed }).unwrap();
            prop_assert_eq!(a.len() + b.len(), ds.len());
            let mut all: Vec<_> = a.items.iter().chain(&b.items).map(|i| format!("{:?}", i.source)).collect();
            all.sort();
            let unique: BTreeSet<_> = all.iter().cloned().collect();
            prop_assert_eq!(unique.len(), ds.len());
            for c in 0..3 {
                prop_assert!(a.class_counts()[c] >= 1 && b.class_counts()[c] >= 1);
                prop_assert_eq!(a.class_counts()[c] + b.class_counts()[c], per_class);
            }
            let again = split(&ds, SplitSpec { kind, seed }).unwrap();
            prop_assert_eq!(&again.0.items, &a.items);
        }
    }

    #[test]
    fn genotype_json_round_trips(normal in cell(), reduce in cell()) {
        let g = Genotype::new(normal, reduce);
        prop_assert!(validate(&g).is_ok());
        let back = Genotype::from_json(&g.to_json()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_json(), g.to_json());
    }

    #[test]
    fn derive_ignores_row_shifts(normal in rows(7), reduce in rows(7), shifts in prop::collection::vec(-4i32..4, 2 * NUM_EDGES)) {
        let file = AlphasFile { normal, reduce, mask: OperatorMask::full(), seed: 0 };
        let g = derive(&file).unwrap();
        prop_assert!(validate(&g).is_ok());
        prop_assert_eq!(g.normal.nodes.len(), NUM_NODES);
        let mut shifted = file.clone();
        for (r, row) in shifted.normal.iter_mut().chain(shifted.reduce.iter_mut()).enumerate() {
            for v in row.iter_mut() {
                *v += shifts[r] as f64;
            }
        }
        prop_assert_eq!(derive(&shifted).unwrap(), g);
    }

    #[test]
    fn accuracy_ignores_sample_order(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200), seed in any::<u64>()) {
        let names: Vec<String> = (0..4).map(|c| format!("c{c}")).collect();
        let (truth, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let mut cm = ConfusionMatrix::new(names.clone());
        cm.accumulate(&truth, &pred).unwrap();
        let mut shuffled = pairs.clone();
        let n = shuffled.len();
        for i in 0..n {
            let j = (seed.wrapping_mul(i as u64 + 1) % n as u64) as usize;
            shuffled.swap(i, j);
        }
        let (t2, p2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let mut cm2 = ConfusionMatrix::new(names);
        cm2.accumulate(&t2, &p2).unwrap();
        prop_assert_eq!(&cm2.counts, &cm.counts);
        prop_assert_eq!(overall_accuracy(&cm).unwrap(), overall_accuracy(&cm2).unwrap());
        let hits = pairs.iter().filter(|(t, p)| t == p).count();
        prop_assert_eq!(overall_accuracy(&cm).unwrap(), hits as f64 / n as f64);
        for c in 0..4 {
            prop_assert_eq!(cm.row_sums()[c], truth.iter().filter(|&&t| t == c).count() as u64);
        }
        prop_assert_eq!(cm.total(), n as u64);
    }

    #[test]
    fn hflip_is_an_involution(img in image()) {
        let f = hflip(&img);
        for c in 0..3 {
            for y in 0..img.height {
                for x in 0..img.width {
                    prop_assert_eq!(f.at(c, y, x), img.at(c, y, img.width - 1 - x));
                }
            }
        }
        prop_assert_eq!(hflip(&f), img);
    }

    #[test]
    fn resize_to_same_size_is_identity(img in image()) {
        let r = resize_bilinear(&img, img.height, img.width).unwrap();
        for (a, b) in r.data.iter().zip(&img.data) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
