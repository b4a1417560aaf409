use proptest::prelude::*;
use voxslice::metrics::{iou_per_class, Confusion};
use voxslice::tensor::OccupancyGrid;

const K: usize = 5;

fn grid_pair() -> impl Strategy<Value = (OccupancyGrid, OccupancyGrid)> {
    (1usize..=2, 1usize..=4, 1usize..=4, 1usize..=4).prop_flat_map(|(b, x, y, z)| {
        let n = b * x * y * z;
        (prop::collection::vec(0..K as u8, n), prop::collection::vec(0..K as u8, n)).prop_map(move |(p, g)| {
            let dims = [b, x, y, z];
            (OccupancyGrid::new(dims, p).unwrap(), OccupancyGrid::new(dims, g).unwrap())
        })
    })
}

fn relabel(g: &OccupancyGrid, map: &[u8]) -> OccupancyGrid {
    OccupancyGrid::new(g.dims(), g.labels().iter().map(|&l| map[l as usize]).collect()).unwrap()
}

fn binarized(g: &OccupancyGrid) -> Vec<bool> {
    g.labels().iter().map(|&l| l != 0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn swapping_prediction_and_truth_keeps_iou((p, g) in grid_pair()) {
        let a = iou_per_class(&p, &g, K).unwrap();
        let b = iou_per_class(&g, &p, K).unwrap();
        prop_assert_eq!(&a.per_class_iou, &b.per_class_iou);
        prop_assert_eq!(a.confusion.fp, b.confusion.fn_);
        prop_assert_eq!(a.geo_iou, b.geo_iou);
    }

    #[test]
    fn relabeling_classes_keeps_miou((p, g) in grid_pair(), perm in Just(vec![1u8, 2, 3, 4]).prop_shuffle()) {
        let map: Vec<u8> = std::iter::once(0).chain(perm).collect();
        let a = iou_per_class(&p, &g, K).unwrap();
        let b = iou_per_class(&relabel(&p, &map), &relabel(&g, &map), K).unwrap();
        prop_assert_eq!(a.miou, b.miou);
        for (c, &m) in map.iter().enumerate().skip(1) {
            prop_assert_eq!(a.per_class_iou[c - 1], b.per_class_iou[m as usize - 1]);
        }
    }

    #[test]
    fn geo_iou_is_one_exactly_when_occupancy_agrees((p, g) in grid_pair()) {
        let r = iou_per_class(&p, &g, K).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.geo_iou));
        prop_assert_eq!(r.geo_iou == 1.0, binarized(&p) == binarized(&g));
    }

    #[test]
    fn miou_lies_between_defined_ious((p, g) in grid_pair()) {
        let r = iou_per_class(&p, &g, K).unwrap();
        let defined: Vec<f64> = r.per_class_iou.iter().flatten().copied().collect();
        match r.miou {
            None => prop_assert!(defined.is_empty()),
            Some(m) => {
                let lo = defined.iter().cloned().fold(f64::MAX, f64::min);
                let hi = defined.iter().cloned().fold(f64::MIN, f64::max);
                prop_assert!(lo <= m && m <= hi);
            }
        }
    }

    #[test]
    fn merged_batches_equal_stacked_batch((p, g) in grid_pair()) {
        // split each grid into two equal batch items
        let half = |t: &OccupancyGrid, first: bool| {
            let [b, x, y, z] = t.dims();
            let n = b * x * y * z;
            let labels = if first { &t.labels()[..n / 2] } else { &t.labels()[n / 2..n / 2 * 2] };
            OccupancyGrid::new([1, 1, 1, n / 2], labels.to_vec()).unwrap()
        };
        prop_assume!(p.labels().len() >= 2);
        let (p1, p2, g1, g2) = (half(&p, true), half(&p, false), half(&g, true), half(&g, false));
        let mut a = Confusion::new(K);
        a.add(&p1, &g1).unwrap();
        let mut b = Confusion::new(K);
        b.add(&p2, &g2).unwrap();
        a.merge(&b).unwrap();
        let joint = iou_per_class(
            &OccupancyGrid::stack(&[&p1, &p2]).unwrap(),
            &OccupancyGrid::stack(&[&g1, &g2]).unwrap(),
            K,
        ).unwrap();
        prop_assert_eq!(a.report(), joint);
    }
}

#[test]
fn documented_two_by_two_example() {
    let grid = |l: &[u8]| OccupancyGrid::new([1, 2, 2, 1], l.to_vec()).unwrap();
    let r = iou_per_class(&grid(&[1, 2, 2, 2]), &grid(&[1, 1, 2, 0]), 3).unwrap();
    assert_eq!((r.confusion.tp[1], r.confusion.fp[1], r.confusion.fn_[1]), (1, 0, 1));
    assert_eq!((r.confusion.tp[2], r.confusion.fp[2], r.confusion.fn_[2]), (1, 2, 0));
    assert_eq!(r.per_class_iou, vec![Some(0.5), Some(1.0 / 3.0)]);
    assert_eq!(r.miou, Some(5.0 / 12.0));
}
