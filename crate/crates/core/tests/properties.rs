//! Invariants checked over randomized inputs against the oracles in `common`.

mod common;

use proptest::prelude::*;
use rand::Rng;

use sparsefuse::attention::{block_sparse_sdpa, dense_sdpa_oracle, AttentionInput, AttentionShape};
use sparsefuse::backend::exec::{exec_segment, exec_unfused, BoundOp};
use sparsefuse::backend::MeasurementBackend;
use sparsefuse::bsr::{build_bsr, BsrMask, TileClass};
use sparsefuse::fusion::{
    classify_segment, decode, encode, enumerate_legal_schemes, reachable_schemes, transitions,
    FusionScheme, SchemeCode,
};
use sparsefuse::kernel::{threshold, DEFAULT_TAU};
use sparsefuse::mask::{compose, gen_dilated, gen_global, gen_sliding_window, DenseMask};
use sparsefuse::search::ParamSetting;

use common::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn segs_of(s: &FusionScheme) -> Vec<(usize, usize)> {
    s.segments.iter().map(|g| (g.start, g.end)).collect()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn bsr_reconstructs_and_classifies(seed in any::<u64>(), seq_len in 1usize..80, bm in 1usize..20, bn in 1usize..20) {
        let mask = random_mask(&mut rng(seed), seq_len);
        let bsr = build_bsr(&mask, bm, bn).unwrap();
        bsr.validate().unwrap();
        prop_assert_eq!(bsr.to_dense().unwrap(), mask.clone());
        let tiles = brute_tiles(&mask, bm, bn);
        let mut valid = 0;
        for (r, row) in tiles.iter().enumerate() {
            for (c, t) in row.iter().enumerate() {
                let got = bsr.classify(r, c);
                match t {
                    Tile::Full => prop_assert_eq!(got, Some(TileClass::Full)),
                    Tile::Part => prop_assert!(matches!(got, Some(TileClass::Part(_)))),
                    Tile::Empty => prop_assert_eq!(got, None),
                }
                valid += usize::from(*t != Tile::Empty);
            }
        }
        prop_assert_eq!(bsr.valid_count(), valid);
        let st = bsr.block_stats();
        prop_assert_eq!(st.full_count + st.part_count, valid);
        prop_assert_eq!(st.full_count + st.part_count + st.empty_count, st.n_rows * st.n_cols);
    }

    #[test]
    fn bsr_binary_round_trip(seed in any::<u64>(), seq_len in 1usize..64, bm in 1usize..17, bn in 1usize..17) {
        let bsr = build_bsr(&random_mask(&mut rng(seed), seq_len), bm, bn).unwrap();
        let mut buf = Vec::new();
        bsr.write_binary(&mut buf).unwrap();
        let back = BsrMask::read_binary(buf.as_slice()).unwrap();
        prop_assert_eq!(back, bsr);
    }

    #[test]
    fn composed_mask_covers_parts(seq_len in 1usize..96, w in 1usize..16, d in 1usize..4, g in 0usize..8) {
        let w = w.min(seq_len);
        let parts = [
            gen_sliding_window(seq_len, w).unwrap(),
            gen_dilated(seq_len, w, d).unwrap(),
            gen_global(seq_len, g.min(seq_len)).unwrap(),
        ];
        let all = compose(&parts).unwrap();
        for p in &parts {
            for (a, b) in all.bits().iter().zip(p.bits()) {
                prop_assert!(*a || !*b);
            }
        }
        let s = all.sparsity();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn threshold_matches_hand_formula_and_is_monotone(seed in any::<u64>(), seq_len in 17usize..160, extra in 0usize..40) {
        let mut r = rng(seed);
        let mask = random_mask(&mut r, seq_len);
        let t0 = threshold(&mask, DEFAULT_TAU).unwrap();
        prop_assert!((t0 - brute_threshold(&mask)).abs() < 1e-12);
        let mut more = mask.clone();
        for _ in 0..extra {
            more.set(r.random_range(0..seq_len), r.random_range(0..seq_len), true);
        }
        prop_assert!(threshold(&more, DEFAULT_TAU).unwrap() >= t0);
    }

    #[test]
    fn block_sparse_attention_matches_oracle(seed in any::<u64>(), seq_len in 1usize..48, bm in 1usize..20, bn in 1usize..20) {
        let mut r = rng(seed);
        let mask = random_mask(&mut r, seq_len);
        let shape = AttentionShape { bs: 1, heads: 2, seq_len, head_size: 8 };
        let input = AttentionInput::<f64>::random(shape, seed);
        let want = dense_sdpa_oracle(&input, &mask).unwrap();
        let got = block_sparse_sdpa(&input.cast::<f32>(), &build_bsr(&mask, bm, bn).unwrap()).unwrap();
        prop_assert!(got.max_abs_diff(&want) <= 1e-5);
        for i in (0..seq_len).filter(|&i| !mask.row(i).contains(&true)) {
            prop_assert!(got.row(0, 0, i).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn codec_round_trips(n in 1usize..40, seed in any::<u64>()) {
        let mut r = rng(seed);
        let parts = all_or_random_partition(&mut r, n);
        let scheme = to_scheme(&parts);
        let code = encode(&scheme);
        prop_assert_eq!(code.len(), n);
        let back = FusionScheme { segments: decode(&code) };
        prop_assert_eq!(segs_of(&back), parts);
        let reencoded = encode(&FusionScheme { segments: decode(&code.flipped()) });
        prop_assert!(reencoded.equivalent(&code));
        let hex = code.to_hex();
        prop_assert_eq!(SchemeCode::from_hex(&hex, n).unwrap(), code);
    }

    #[test]
    fn transitions_preserve_legality(seed in any::<u64>(), n in 1usize..9) {
        let mut r = rng(seed);
        let g = random_chain(&mut r, n, true);
        let ks = kinds(&g);
        let start = to_scheme(&random_legal_scheme(&mut r, &ks));
        prop_assert!(start.is_legal(&g));
        for t in transitions(&start, &g) {
            let next = t.apply(&start);
            prop_assert_eq!(next.n_ops(), n);
            prop_assert!(brute_legal(&ks, &segs_of(&next)), "{:?} -> {:?}", t, segs_of(&next));
            prop_assert!(next.segments.len() < start.segments.len() || next != start);
        }
    }

    #[test]
    fn reachable_set_is_legal(seed in any::<u64>(), n in 1usize..7) {
        let mut r = rng(seed);
        let g = random_chain(&mut r, n, true);
        let ks = kinds(&g);
        let legal: Vec<Vec<(usize, usize)>> = enumerate_legal_schemes(&g).iter().map(segs_of).collect();
        let brute: Vec<Vec<(usize, usize)>> = all_partitions(n).into_iter().filter(|p| brute_legal(&ks, p)).collect();
        prop_assert_eq!(legal.len(), brute.len());
        for s in reachable_schemes(&FusionScheme::unfused(n), &g) {
            prop_assert!(brute_legal(&ks, &segs_of(&s)));
        }
    }

    #[test]
    fn fused_segments_match_reference(seed in any::<u64>(), rows in 1usize..24, cols in 1usize..24, inner in 1usize..24) {
        let mut r = rng(seed);
        let x = random_matrix(&mut r, rows, inner, 1.0);
        let w1 = random_matrix(&mut r, inner, cols, 0.5);
        let w2 = random_matrix(&mut r, cols, cols, 0.5);
        let pro: Vec<BoundOp> = random_mi_run(&mut r, rows, inner, 2).into_iter().map(BoundOp::Mi).collect();
        let mid: Vec<BoundOp> = random_mi_run(&mut r, rows, cols, 2).into_iter().map(BoundOp::Mi).collect();
        let epi: Vec<BoundOp> = random_mi_run(&mut r, rows, cols, 2).into_iter().map(BoundOp::Mi).collect();

        let mi_chain: Vec<BoundOp> = pro.clone();
        let ci_mi: Vec<BoundOp> = pro.iter().cloned().chain([BoundOp::Gemm(w1.clone())]).chain(mid.clone()).collect();
        let ci_ci: Vec<BoundOp> = ci_mi.iter().cloned().chain([BoundOp::Gemm(w2)]).chain(epi).collect();
        let (tm, tn, tk) = (tile_choice(&mut r), tile_choice(&mut r), tile_choice(&mut r));
        let cases = [
            (mi_chain, ParamSetting::MiChain { chunk_size: [1, 7, 64, 4096][r.random_range(0..4)] }, 1e-5),
            (ci_mi, ParamSetting::CiMi { tile_m: tm, tile_n: tn, tile_k: tk }, 1e-4),
            (ci_ci, ParamSetting::CiCi { tile_m: tm, tile_n: tn, tile_k: tk, stage_depth: r.random_range(1..4) }, 1e-3),
        ];
        for (ops, setting, tol) in cases {
            if ops.is_empty() {
                continue;
            }
            let got = exec_segment(&ops, &setting, &x).unwrap();
            let (_, _, want) = reference_f64(&ops, &x);
            let err = max_err(&got, &want);
            prop_assert!(err <= tol, "{:?}: {}", setting, err);
            let unfused = exec_unfused(&ops, &x).unwrap();
            prop_assert!(f64::from(got.max_abs_diff(&unfused)) <= tol);
        }
    }

    #[test]
    fn synthetic_model_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (g, model) = random_instance(&mut r);
        let space = small_space();
        for scheme in enumerate_legal_schemes(&g).iter().take(8) {
            for seg in scheme.tunable_segments(&g) {
                let kind = classify_segment(seg, &g).unwrap();
                for st in space.grid(kind) {
                    let a = model.measure(&g, scheme, seg, st).unwrap();
                    let b = model.clone().measure(&g, scheme, seg, st).unwrap();
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                    prop_assert!(a > 0.0);
                    prop_assert!(model.param_factor(seg, st) >= 1.0);
                }
            }
        }
    }
}

fn all_or_random_partition(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..n {
        if r.random_bool(0.4) {
            out.push((start, i));
            start = i;
        }
    }
    out.push((start, n));
    out
}

#[test]
fn unfused_scheme_reaches_every_legal_scheme_on_small_chains() {
    let mut r = rng(77);
    for n in 1..=6 {
        for _ in 0..6 {
            let g = random_chain(&mut r, n, true);
            let legal: std::collections::BTreeSet<FusionScheme> =
                enumerate_legal_schemes(&g).into_iter().collect();
            let reached = reachable_schemes(&FusionScheme::unfused(n), &g);
            assert_eq!(reached, legal, "{:?}", kinds(&g));
        }
    }
}

#[test]
fn mask_from_fn_round_trips_through_bits() {
    let m = DenseMask::from_fn(33, |i, j| (i * 7 + j) % 5 == 0);
    assert_eq!(DenseMask::from_bits(33, m.bits().to_vec()).unwrap(), m);
}
