use edgenav::ssm::{
    scan_expand, scan_merge, scan_recurrence, selective_scan, Direction, DirectionalSequences, LiteSs2d, SsmCore,
    SsmParams,
};
use edgenav_autodiff::gradcheck::{check_gradients, check_store_gradients, DEFAULT_EPS};
use edgenav_autodiff::init::uniform;
use edgenav_autodiff::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softplus(v: f64) -> f64 {
    (1.0 + v.exp()).ln()
}

/// Two-loop recurrence written directly from the definition.
fn oracle(u: &[f64], n: usize, d: usize, l: usize, store: &ParamStore, prefix: &str) -> Vec<f64> {
    let get = |k: &str| store.get(&format!("{prefix}.{k}")).unwrap();
    let (down, up, bias) = (get("delta_down"), get("delta_up"), get("delta_bias"));
    let (bp, cp, alog, dsk) = (get("b_proj"), get("c_proj"), get("a_log"), get("d_skip"));
    let r = down.shape[0];
    let s = alog.shape[1];
    let at = |ni: usize, ch: usize, t: usize| u[(ni * d + ch) * l + t];
    let mut y = vec![0.0; n * d * l];
    for ni in 0..n {
        for ch in 0..d {
            let mut h = vec![0.0; s];
            for t in 0..l {
                let mut low = vec![0.0; r];
                for (ri, lv) in low.iter_mut().enumerate() {
                    *lv = (0..d).map(|c2| down.data()[ri * d + c2] * at(ni, c2, t)).sum();
                }
                let pre: f64 = bias.data()[ch] + (0..r).map(|ri| up.data()[ch * r + ri] * low[ri]).sum::<f64>();
                let delta = softplus(pre);
                let mut out = 0.0;
                for k in 0..s {
                    let b: f64 = (0..d).map(|c2| bp.data()[k * d + c2] * at(ni, c2, t)).sum();
                    let c: f64 = (0..d).map(|c2| cp.data()[k * d + c2] * at(ni, c2, t)).sum();
                    let a = -alog.data()[ch * s + k].exp();
                    h[k] = (delta * a).exp() * h[k] + delta * b * at(ni, ch, t);
                    out += c * h[k];
                }
                y[(ni * d + ch) * l + t] = out + dsk.data()[ch] * at(ni, ch, t);
            }
        }
    }
    y
}

fn random_core(seed: u64, d: usize, s: usize) -> (SsmCore, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let core = SsmCore::new("core", d, s);
    let mut store = ParamStore::new();
    core.init(&mut store, &mut rng).unwrap();
    // Spread the step sizes and decays away from their small initial range.
    for i in 0..store.len() {
        for v in store.values_mut(i) {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    (core, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selective_scan_matches_oracle(seed in 0u64..10_000, l in 1usize..=32, s in 1usize..=8, d in 1usize..=4, n in 1usize..=2) {
        let (core, store) = random_core(seed, d, s);
        let u = uniform(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), 1.0, n * d * l);
        let p = store.bind::<f64>(false);
        let params = SsmParams::from_binding(&p, &core.prefix).unwrap();
        let y = selective_scan(&Tensor::new(u.clone(), &[n, d, l]).unwrap(), &params).unwrap();
        let want = oracle(&u, n, d, l, &store, &core.prefix);
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn three_by_three_orders_by_hand() {
    // 0 1 2
    // 3 4 5
    // 6 7 8
    let x = Tensor::new((0..9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
    let s = scan_expand(&x).unwrap();
    assert_eq!(s.row_forward.data(), &[0., 1., 2., 3., 4., 5., 6., 7., 8.]);
    assert_eq!(s.row_reverse.data(), &[8., 7., 6., 5., 4., 3., 2., 1., 0.]);
    assert_eq!(s.col_forward.data(), &[0., 3., 6., 1., 4., 7., 2., 5., 8.]);
    assert_eq!(s.col_reverse.data(), &[8., 5., 2., 7., 4., 1., 6., 3., 0.]);
}

#[test]
fn expand_inverse_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d, h, w) = (2, 3, 4, 5);
    let x = Tensor::new(uniform(&mut rng, 1.0, n * d * h * w), &[n, d, h, w]).unwrap();
    let s = scan_expand(&x).unwrap();
    for dir in Direction::ALL {
        let order = dir.order(h, w);
        let seq = s.get(dir).data();
        let mut back = vec![0.0; x.numel()];
        for plane in 0..n * d {
            for (t, &pos) in order.iter().enumerate() {
                back[plane * h * w + pos] = seq[plane * h * w + t];
            }
        }
        assert_eq!(back, x.data());
    }
}

#[test]
fn merge_matches_index_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (n, d, h, w) = (2, 2, 3, 4);
    let l = h * w;
    let seqs: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 1.0, n * d * l)).collect();
    let ys = DirectionalSequences::from_parts(
        [0, 1, 2, 3].map(|k| Tensor::new(seqs[k].clone(), &[n, d, l]).unwrap()),
        h,
        w,
    );
    let merged = scan_merge(&ys).unwrap();
    let mut want = vec![0.0; n * d * l];
    for plane in 0..n * d {
        for i in 0..h {
            for j in 0..w {
                let pos = i * w + j;
                let steps = [pos, l - 1 - pos, j * h + i, l - 1 - (j * h + i)];
                for (k, &t) in steps.iter().enumerate() {
                    want[plane * l + pos] += seqs[k][plane * l + t];
                }
            }
        }
    }
    for (a, b) in merged.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn recurrence_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d, s, l) = (2, 3, 4, 7);
    let mk = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| {
        let k = shape.iter().product();
        Tensor::new((0..k).map(|_| rng.gen_range(lo..hi)).collect(), shape).unwrap()
    };
    let inputs = vec![
        mk(&mut rng, &[n, d, l], -1.0, 1.0),
        mk(&mut rng, &[n, d, l], 0.05, 0.8),
        mk(&mut rng, &[d, s], -2.0, -0.2),
        mk(&mut rng, &[n, s, l], -1.0, 1.0),
        mk(&mut rng, &[n, s, l], -1.0, 1.0),
        mk(&mut rng, &[d], -1.0, 1.0),
    ];
    let w = mk(&mut rng, &[n, d, l], -1.0, 1.0);
    let report = check_gradients(
        |x| Ok(scan_recurrence(&x[0], &x[1], &x[2], &x[3], &x[4], &x[5]).unwrap().mul(&w)?.sum()),
        &inputs,
        DEFAULT_EPS,
        1e-6,
        usize::MAX,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn lite_ss2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let blk = LiteSs2d::new("blk", 4, 8, 4);
    let mut store = ParamStore::new();
    blk.init(&mut store, &mut rng).unwrap();
    for i in 0..store.len() {
        for v in store.values_mut(i) {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let x = Tensor::new(uniform(&mut rng, 1.0, 4 * 9), &[1, 4, 3, 3]).unwrap();
    let w = Tensor::new(uniform(&mut rng, 1.0, 4 * 9), &[1, 4, 3, 3]).unwrap();
    let report = check_store_gradients(
        &store,
        |p| Ok(blk.forward(p, &x).unwrap().mul(&w)?.sum()),
        DEFAULT_EPS,
        1e-6,
        usize::MAX,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert_eq!(report.checked, store.num_params());
}
