mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use canvas_fss::backend_gateway::{
    BackendError, NegativeMode, OracleBackend, OracleEntry, Polarity, PromptBox, RetryPolicy,
    ScoredMask, SegmentRequest, Segmenter,
};
use canvas_fss::canvas_geometry::{
    from_canvas_box, from_canvas_mask, plan_layout, to_canvas_box, LayoutSpec, LayoutVariant,
    Placement, Role, SupportPosition,
};
use canvas_fss::data_ingest::{
    build_folds_from_ids, decode_rle, encode_rle, parse_manifest, sample_episodes, validate_episode,
    BitGrid, BoxPx, CategoryDef, DatasetKind, DatasetManifest, FoldSpec, ImageRecord,
    InstanceAnnotation, MaskRle, SamplingConstraint,
};
use canvas_fss::eval_runner::{compose_episode, prepare};
use canvas_fss::metrics::{episode_counts, fb_iou, miou, MetricsAccumulator, PixelCounts};
use canvas_fss::prompt_engine::{partition_exemplars, select_representative_instance, NegativeScenario};
use canvas_fss::synthetic::SyntheticDataset;
use proptest::prelude::*;

fn grid(max_h: u32, max_w: u32) -> impl Strategy<Value = BitGrid> {
    (1..=max_h, 1..=max_w).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), (h * w) as usize)
            .prop_map(move |bits| BitGrid::from_fn(h, w, |r, c| bits[(r * w + c) as usize]))
    })
}

/// Blobby masks: a few filled rectangles, so runs are long.
fn blob_grid(h: u32, w: u32) -> impl Strategy<Value = BitGrid> {
    proptest::collection::vec((0..w, 0..h, 1..=w, 1..=h), 0..4).prop_map(move |rects| {
        let mut g = BitGrid::new(h, w);
        for (x, y, bw, bh) in rects {
            g.fill_box(&BoxPx::new(x, y, (x + bw).min(w), (y + bh).min(h)), true);
        }
        g
    })
}

fn brute_bbox(g: &BitGrid) -> Option<BoxPx> {
    let mut b: Option<(u32, u32, u32, u32)> = None;
    for r in 0..g.height() {
        for c in 0..g.width() {
            if g.get(r, c) {
                let e = b.get_or_insert((c, r, c + 1, r + 1));
                *e = (e.0.min(c), e.1.min(r), e.2.max(c + 1), e.3.max(r + 1));
            }
        }
    }
    b.map(|(x0, y0, x1, y1)| BoxPx::new(x0, y0, x1, y1))
}

// ---- masks and ingestion

proptest! {
    #[test]
    fn rle_round_trip(g in grid(24, 24)) {
        let m = encode_rle(&g);
        prop_assert_eq!(m.counts().iter().map(|&c| c as u64).sum::<u64>(), g.height() as u64 * g.width() as u64);
        // canonical: only the first run may be empty
        prop_assert!(m.counts().iter().skip(1).all(|&c| c > 0));
        let back = decode_rle(&m);
        prop_assert_eq!(encode_rle(&back), m);
        prop_assert_eq!(back, g);
    }

    #[test]
    fn parsed_bbox_is_tight(h in 4u32..40, w in 4u32..40, pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..7)) {
        let poly: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x * w as f64, y * h as f64]).collect();
        let doc = serde_json::json!({
            "images": [{"id": 1, "width": w, "height": h, "file_name": "1.png"}],
            "categories": [{"id": 1, "name": "a"}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "segmentation": [poly], "iscrowd": 0}],
        });
        let m = parse_manifest(doc.to_string().as_bytes()).unwrap();
        for a in m.annotations() {
            prop_assert_eq!(Some(a.bbox), brute_bbox(&a.mask.decode()));
            prop_assert_eq!(a.area, a.mask.decode().count_ones());
        }
    }

    #[test]
    fn folds_partition_categories(ids in proptest::collection::btree_set(1u64..10_000, 80), pascal in any::<bool>()) {
        let ids: Vec<u64> = ids.into_iter().collect();
        let (kind, ids) = if pascal { (DatasetKind::Pascal5i, ids[..20].to_vec()) } else { (DatasetKind::Coco20i, ids) };
        let folds = build_folds_from_ids(kind, &ids).unwrap();
        let mut seen = BTreeSet::new();
        for f in &folds {
            for c in &f.test_class_ids {
                prop_assert!(seen.insert(*c));
            }
        }
        prop_assert_eq!(seen, ids.iter().copied().collect::<BTreeSet<_>>());
    }
}

fn random_manifest(n_images: u64, second: &[bool]) -> DatasetManifest {
    let images = (1..=n_images)
        .map(|id| ImageRecord { id, width: 8, height: 8, file_path: format!("{id}.png") })
        .collect();
    let categories = (1..=3).map(|id| CategoryDef { id, name: format!("c{id}") }).collect();
    let mut anns = Vec::new();
    let mut next = 1;
    for id in 1..=n_images {
        let cat = 1 + id % 2;
        let mut g = BitGrid::new(8, 8);
        g.fill_box(&BoxPx::new(0, 0, 4, 4), true);
        anns.push(InstanceAnnotation::from_mask(next, id, cat, encode_rle(&g)).unwrap());
        next += 1;
        if second[(id - 1) as usize] {
            let mut g = BitGrid::new(8, 8);
            g.fill_box(&BoxPx::new(4, 4, 8, 8), true);
            anns.push(InstanceAnnotation::from_mask(next, id, 3, encode_rle(&g)).unwrap());
            next += 1;
        }
    }
    DatasetManifest::new(images, categories, anns).unwrap()
}

proptest! {
    #[test]
    fn sampler_valid_and_deterministic(
        second in proptest::collection::vec(any::<bool>(), 16),
        seed in any::<u64>(),
        shot in 1usize..4,
        multi in any::<bool>(),
    ) {
        let m = random_manifest(16, &second);
        let fold = FoldSpec { dataset_kind: DatasetKind::Pascal5i, fold_index: 0, test_class_ids: vec![1, 2] };
        let constraint = if multi { SamplingConstraint::MultiCategory } else { SamplingConstraint::Standard };
        match sample_episodes(&m, &fold, shot, 30, seed, constraint) {
            Ok(eps) => {
                prop_assert_eq!(eps.len(), 30);
                for e in &eps {
                    prop_assert_eq!(validate_episode(e, &fold, &m), Ok(()));
                    if multi {
                        for img in e.support_image_ids().chain([e.query_image_id]) {
                            prop_assert!(m.category_count(img) >= 2);
                        }
                    }
                }
                let again = sample_episodes(&m, &fold, shot, 30, seed, constraint).unwrap();
                prop_assert_eq!(eps, again);
            }
            // only when some class lacks shot + 1 eligible images
            Err(_) => prop_assert!(multi),
        }
    }
}

// ---- geometry

fn all_layout_specs() -> Vec<LayoutSpec> {
    use LayoutVariant::*;
    use SupportPosition::*;
    let mut out = Vec::new();
    for v in [ArpTopPadded, FrHorizontal, FrVertical, Grid2x3, VerticalStrip, HorizontalStrip, InverseL] {
        for p in [Top, Bottom, Left, TopLeft, Grid] {
            for r in [None, Some(0.3), Some(0.4), Some(0.5), Some(0.6)] {
                if let Ok(s) = LayoutSpec::new(v, p, r, v.shot()) {
                    out.push(s);
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn layouts_tile_any_canvas(cw in 16u32..2048, ch in 16u32..2048, src in (1u32..900, 1u32..900)) {
        for spec in all_layout_specs() {
            let plan = plan_layout(&spec, &vec![src; spec.shot], src, (cw, ch)).unwrap();
            let rects: Vec<BoxPx> = plan.placements.iter().map(|p| p.rect).collect();
            for (i, a) in rects.iter().enumerate() {
                prop_assert!(!a.is_empty());
                prop_assert!(a.x1 <= cw && a.y1 <= ch);
                for b in &rects[i + 1..] {
                    prop_assert!(a.intersection(b).is_none(), "{:?} overlaps in {}", spec, plan);
                }
            }
            if spec.variant != LayoutVariant::ArpTopPadded {
                let area: u64 = rects.iter().map(|r| r.area()).sum();
                prop_assert_eq!(area, cw as u64 * ch as u64, "{:?}", spec);
            }
            if let Some(r) = spec.ratio {
                let fh = (r * ch as f64 + 1e-9).floor() as u32;
                let fw = (r * cw as f64 + 1e-9).floor() as u32;
                let s0 = plan.support(0).unwrap().rect;
                let band = match (spec.variant, spec.support_position) {
                    (LayoutVariant::FrHorizontal | LayoutVariant::VerticalStrip, _) => (s0.width(), fw),
                    _ => (s0.height(), fh),
                };
                prop_assert_eq!(band.0, band.1, "{:?}", spec);
            }
        }
    }
}

fn placement() -> impl Strategy<Value = Placement> {
    (0u32..500, 0u32..500, 1u32..800, 1u32..800, 1u32..800, 1u32..800).prop_map(|(x, y, w, h, sw, sh)| {
        Placement { role: Role::Query, rect: BoxPx::new(x, y, x + w, y + h), source_size: (sw, sh) }
    })
}

fn box_in(w: u32, h: u32) -> impl Strategy<Value = BoxPx> {
    (0..w, 0..h).prop_flat_map(move |(x0, y0)| {
        (x0 + 1..=w, y0 + 1..=h).prop_map(move |(x1, y1)| BoxPx::new(x0, y0, x1, y1))
    })
}

proptest! {
    #[test]
    fn box_map_monotone_and_contained(
        p in placement(),
        fa in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
        grow in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let (sw, sh) = p.source_size;
        let lerp = |a: u32, b: u32, t: f64| a + ((b - a) as f64 * t) as u32;
        let ax0 = lerp(0, sw - 1, fa.0);
        let ay0 = lerp(0, sh - 1, fa.1);
        let a = BoxPx::new(ax0, ay0, lerp(ax0 + 1, sw, fa.2), lerp(ay0 + 1, sh, fa.3));
        let b = BoxPx::new(lerp(0, a.x0, grow.0), lerp(0, a.y0, grow.1), lerp(a.x1, sw, grow.2), lerp(a.y1, sh, grow.3));
        let ma = to_canvas_box(&a, &p);
        let mb = to_canvas_box(&b, &p);
        prop_assert!(ma.rect.x0 < ma.rect.x1 && ma.rect.y0 < ma.rect.y1);
        prop_assert!(p.rect.contains(&ma.rect));
        prop_assert!(ma.rect.x0 + 1 >= mb.rect.x0 && ma.rect.y0 + 1 >= mb.rect.y0);
        prop_assert!(ma.rect.x1 <= mb.rect.x1 + 1 && ma.rect.y1 <= mb.rect.y1 + 1);
    }

    #[test]
    fn box_round_trip_within_one_pixel(
        (p, b) in (1u32..700, 1u32..700, 0.34f64..2.9, 0.34f64..2.9).prop_flat_map(|(sw, sh, kx, ky)| {
            let w = ((sw as f64 * kx).round() as u32).max(1);
            let h = ((sh as f64 * ky).round() as u32).max(1);
            let p = Placement { role: Role::Query, rect: BoxPx::new(7, 11, 7 + w, 11 + h), source_size: (sw, sh) };
            (Just(p), box_in(sw, sh))
        })
    ) {
        let m = to_canvas_box(&b, &p);
        prop_assume!(!m.clamped);
        let back = from_canvas_box(&m.rect, &p);
        for (x, y) in [(back.x0, b.x0), (back.y0, b.y0), (back.x1, b.x1), (back.y1, b.y1)] {
            prop_assert!(x.abs_diff(y) <= 1, "{:?} -> {:?} -> {:?} via {:?}", b, m.rect, back, p);
        }
    }

    #[test]
    fn decomposition_ignores_outside_query(
        inside in blob_grid(30, 40),
        out_a in blob_grid(30, 40),
        out_b in blob_grid(30, 40),
        src in (5u32..60, 5u32..60),
    ) {
        let query = BoxPx::new(10, 8, 30, 22);
        let p = Placement { role: Role::Query, rect: query, source_size: src };
        let mix = |outside: &BitGrid| BitGrid::from_fn(30, 40, |r, c| {
            if query.contains(&BoxPx::new(c, r, c + 1, r + 1)) { inside.get(r, c) } else { outside.get(r, c) }
        });
        let a = from_canvas_mask(&encode_rle(&mix(&out_a)), &p);
        let b = from_canvas_mask(&encode_rle(&mix(&out_b)), &p);
        prop_assert_eq!(a.size(), (src.1, src.0));
        prop_assert_eq!(a, b);
    }
}

// ---- prompts

fn mask_with_box(b: Option<BoxPx>) -> MaskRle {
    let mut g = BitGrid::new(16, 16);
    if let Some(b) = b {
        g.fill_box(&b, true);
    }
    encode_rle(&g)
}

proptest! {
    #[test]
    fn partition_rule(
        cands in proptest::collection::vec((0.0f64..=1.0, proptest::option::weighted(0.9, box_in(16, 16))), 0..30),
        tau in 0.05f64..0.95,
        cap in 0usize..12,
    ) {
        let scored: Vec<ScoredMask> = cands.iter().map(|(s, b)| ScoredMask { mask: mask_with_box(*b), score: *s }).collect();
        let (pos, neg) = partition_exemplars(&scored, tau, cap);
        prop_assert!(neg.len() <= cap);
        prop_assert!(pos.iter().all(|e| e.score >= tau));
        prop_assert!(neg.iter().all(|e| e.score < tau));
        let non_empty: Vec<usize> = cands.iter().enumerate().filter(|(_, c)| c.1.is_some()).map(|(i, _)| i).collect();
        let pos_idx: BTreeSet<usize> = pos.iter().map(|e| e.index).collect();
        let (_, all_neg) = partition_exemplars(&scored, tau, usize::MAX);
        let neg_idx: BTreeSet<usize> = all_neg.iter().map(|e| e.index).collect();
        prop_assert!(pos_idx.is_disjoint(&neg_idx));
        prop_assert_eq!(pos_idx.union(&neg_idx).copied().collect::<Vec<_>>(), non_empty);
        // truncation keeps the highest scores
        let mut want: Vec<f64> = all_neg.iter().map(|e| e.score).collect();
        want.sort_by(|a, b| b.total_cmp(a));
        want.truncate(cap);
        prop_assert_eq!(neg.iter().map(|e| e.score).collect::<Vec<_>>(), want);
        for e in pos.iter().chain(&neg) {
            prop_assert_eq!(Some(e.rect), cands[e.index].1);
        }
    }

    #[test]
    fn representative_is_max_area_lowest_id(items in proptest::collection::vec((1u64..1000, 1u64..50), 1..12)) {
        let mut seen = BTreeSet::new();
        let anns: Vec<InstanceAnnotation> = items
            .iter()
            .filter(|(id, _)| seen.insert(*id))
            .map(|&(id, area)| InstanceAnnotation {
                id,
                image_id: 1,
                category_id: 1,
                mask: MaskRle::empty(1, 1),
                bbox: BoxPx::new(0, 0, 1, 1),
                area,
            })
            .collect();
        let refs: Vec<&InstanceAnnotation> = anns.iter().collect();
        let got = select_representative_instance(&refs).unwrap();
        let mut best = &anns[0];
        for a in &anns[1..] {
            if a.area > best.area || (a.area == best.area && a.id < best.id) {
                best = a;
            }
        }
        prop_assert_eq!(got.id, best.id);
    }
}

fn shared_dataset() -> &'static SyntheticDataset {
    static DS: OnceLock<SyntheticDataset> = OnceLock::new();
    DS.get_or_init(|| {
        let dir = Box::leak(Box::new(tempfile::tempdir().unwrap()));
        common::small_dataset(dir.path())
    })
}

fn scenario() -> impl Strategy<Value = NegativeScenario> {
    prop_oneof![
        Just(NegativeScenario::None),
        (0usize..6).prop_map(|cap| NegativeScenario::ThresholdPartition { tau: 0.5, cap }),
        (0usize..6).prop_map(|cap| NegativeScenario::BackgroundNegatives { cap }),
        (0usize..11).prop_map(|cap| NegativeScenario::SemanticDistractors { cap }),
        (0usize..11).prop_map(|cap| NegativeScenario::MultipleNegatives { cap }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prompts_inside_origin_tiles(seed in any::<u64>(), s in scenario(), five_shot in any::<bool>()) {
        let ds = shared_dataset();
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = common::base_config(ds, tmp.path());
        cfg.seed = seed;
        cfg.n_episodes = 3;
        cfg.negative_scenario = s;
        if five_shot {
            cfg.layout = LayoutSpec::new(LayoutVariant::InverseL, SupportPosition::TopLeft, Some(0.3), 5).unwrap();
        }
        let prep = match prepare(&cfg) {
            Ok(p) => p,
            // five-shot multi-category pools can be too small for some classes
            Err(e) => { prop_assume!(false, "{}", e); unreachable!() }
        };
        let backend = OracleBackend::new(NegativeMode::IgnoreNegatives);
        for ep in &prep.episodes {
            let a = compose_episode(&prep, ep, &backend).unwrap();
            let b = compose_episode(&prep, ep, &backend).unwrap();
            prop_assert_eq!(&a.prompts.bundle, &b.prompts.bundle);
            let bundle = &a.prompts.bundle;
            prop_assert!(!bundle.positives.is_empty());
            prop_assert!(bundle.negatives.len() <= s.cap());
            if s == NegativeScenario::None {
                prop_assert!(bundle.negatives.is_empty());
            }
            for p in bundle.positives.iter().chain(&bundle.negatives) {
                let tile = a.plan().support(p.support_index).unwrap().rect;
                prop_assert!(tile.contains(&p.rect), "{:?} outside {:?}", p, tile);
            }
            prop_assert!(bundle.positives.iter().all(|p| p.polarity == Polarity::Positive));
            prop_assert!(bundle.negatives.iter().all(|p| p.polarity == Polarity::Negative));
        }
    }
}

// ---- metrics

fn counts() -> impl Strategy<Value = (u64, PixelCounts)> {
    (1u64..4, 0u64..50, 0u64..50, 0u64..50, 0u64..200)
        .prop_map(|(c, tp, fp, fn_, tn)| (c, PixelCounts::from_confusion(tp, fp, fn_, tn)))
}

fn accumulate(items: &[(u64, PixelCounts)]) -> MetricsAccumulator {
    let mut acc = MetricsAccumulator::default();
    for (c, k) in items {
        acc.add(*c, k);
    }
    acc
}

proptest! {
    #[test]
    fn accumulation_order_and_sharding(
        (items, perm) in proptest::collection::vec(counts(), 1..40)
            .prop_flat_map(|v| { let n = v.len(); (Just(v), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) }),
        cuts in proptest::collection::vec(any::<prop::sample::Index>(), 0..4),
    ) {
        let single = accumulate(&items);
        let shuffled: Vec<_> = perm.iter().map(|&i| items[i]).collect();
        let other = accumulate(&shuffled);
        let classes: Vec<u64> = (1..4).collect();
        let observed: Vec<u64> = classes.iter().copied().filter(|c| single.classes.class(*c).is_some_and(|s| s.union > 0)).collect();
        if !observed.is_empty() {
            prop_assert_eq!(miou(&single.classes, &observed).unwrap().to_bits(), miou(&other.classes, &observed).unwrap().to_bits());
        }
        prop_assert_eq!(fb_iou(&single.fb).ok().map(f64::to_bits), fb_iou(&other.fb).ok().map(f64::to_bits));
        prop_assert_eq!(&single.fb, &other.fb);

        let mut bounds: Vec<usize> = cuts.iter().map(|i| i.index(items.len() + 1)).collect();
        bounds.extend([0, items.len()]);
        bounds.sort_unstable();
        let mut merged = MetricsAccumulator::default();
        for w in bounds.windows(2) {
            merged.merge(&accumulate(&items[w[0]..w[1]]));
        }
        prop_assert_eq!(merged.fb, single.fb);
        prop_assert_eq!(merged.episodes, single.episodes);
        for c in &observed {
            let (a, b) = (merged.classes.class(*c).unwrap(), single.classes.class(*c).unwrap());
            prop_assert_eq!((a.intersection, a.union), (b.intersection, b.union));
        }
        if let Ok(v) = fb_iou(&single.fb) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if !observed.is_empty() {
            let v = miou(&single.classes, &observed).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn identical_and_disjoint_masks(g in blob_grid(20, 20)) {
        let m = encode_rle(&g);
        let k = episode_counts(&m, &m).unwrap();
        if g.count_ones() > 0 {
            prop_assert_eq!(k.iou(), Some(1.0));
            let inv = encode_rle(&BitGrid::from_fn(20, 20, |r, c| !g.get(r, c)));
            if g.count_ones() < 400 {
                prop_assert_eq!(episode_counts(&m, &inv).unwrap().iou(), Some(0.0));
            }
        }
        prop_assert_eq!(k.total(), 400);
    }
}

// ---- backend

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn oracle_is_deterministic(g in blob_grid(12, 16), n_neg in 0usize..3, mode in 0usize..3) {
        let mode = [NegativeMode::IgnoreNegatives, NegativeMode::SuppressAll, NegativeMode::Attenuate { px_per_negative: 1 }][mode];
        let backend = OracleBackend::new(mode);
        backend.registry().insert(
            "r",
            OracleEntry { masks: vec![ScoredMask { mask: encode_rle(&g), score: 0.95 }], label: None },
        );
        let mut boxes = vec![PromptBox { rect: BoxPx::new(0, 0, 4, 4), polarity: Polarity::Positive }];
        boxes.extend((0..n_neg).map(|i| PromptBox { rect: BoxPx::new(i as u32, 8, i as u32 + 4, 12), polarity: Polarity::Negative }));
        let req = SegmentRequest {
            request_id: "r".into(),
            image: std::sync::Arc::new(image::RgbImage::new(16, 12)),
            boxes,
            text: None,
            max_masks: 4,
        };
        prop_assert_eq!(backend.segment(&req).unwrap(), backend.segment(&req).unwrap());
    }

    #[test]
    fn retries_only_retryable(fail_times in 0u32..8, max_attempts in 1u32..6, capability in any::<bool>()) {
        let policy = RetryPolicy {
            max_attempts,
            initial_backoff: std::time::Duration::ZERO,
            multiplier: 2.0,
            max_backoff: std::time::Duration::ZERO,
        };
        let mut calls = 0u32;
        let out = policy.run(|| {
            calls += 1;
            if calls <= fail_times {
                Err(if capability {
                    BackendError::Capability("no".into())
                } else {
                    BackendError::Transport("reset".into())
                })
            } else {
                Ok(calls)
            }
        });
        if fail_times == 0 {
            prop_assert_eq!(out.unwrap(), 1);
        } else if capability {
            prop_assert_eq!(calls, 1);
            prop_assert!(out.is_err());
        } else if fail_times < max_attempts {
            prop_assert_eq!(out.unwrap(), fail_times + 1);
        } else {
            prop_assert_eq!(calls, max_attempts);
            prop_assert!(matches!(out, Err(BackendError::Transport(_))));
        }
    }
}

#[test]
fn backoff_grows_to_cap() {
    let p = RetryPolicy::default();
    let waits: Vec<_> = (1..8).map(|a| p.backoff(a)).collect();
    assert!(waits.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*waits.last().unwrap(), p.max_backoff);
}
